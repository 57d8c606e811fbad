use crate::error::{Result, XfiError};
use crate::tensor::{Tape, Tensor, Var};
use crate::xfusion::{TaskKind, TaskSpec};

/// Supervision for a batch: flattened keypoints (`B × 3J`) or class labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Keypoints(Tensor),
    Labels(Vec<usize>),
}

/// Batch loss on the tape. HPE: mean over samples and joints of the squared joint
/// distance. HAR: mean cross-entropy.
pub fn batch_loss(tape: &mut Tape, output: Var, targets: &Targets, task: TaskSpec) -> Result<Var> {
    match (task.kind, targets) {
        (TaskKind::Hpe, Targets::Keypoints(t)) => {
            let (rows, _) = t.dims2()?;
            tape.squared_error(output, t, (rows * task.joints) as f64)
        }
        (TaskKind::Har, Targets::Labels(labels)) => tape.cross_entropy(output, labels),
        _ => Err(XfiError::InvalidArgument(format!(
            "targets do not match task `{}`",
            task.kind.name()
        ))),
    }
}

/// Loss for one sample: `pred`/`target` are `J × 3` for HPE; for HAR `pred` holds `C`
/// logits and `target` a single class index.
pub fn compute_loss(pred: &Tensor, target: &Tensor, task: TaskSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let loss = match task.kind {
        TaskKind::Hpe => {
            let (joints, cols) = pred.dims2()?;
            if cols != 3 || target.shape() != pred.shape() {
                return Err(XfiError::shape("compute_loss", pred.shape(), target.shape()));
            }
            let p = tape.constant(pred.clone());
            tape.squared_error(p, target, joints as f64)?
        }
        TaskKind::Har => {
            let classes = pred.numel();
            let label = target.item()?;
            if label.fract() != 0.0 || label < 0.0 || label >= classes as f64 {
                return Err(XfiError::InvalidArgument(format!(
                    "class label {label} out of range for {classes} classes"
                )));
            }
            let p = tape.constant(pred.reshape(&[1, classes])?);
            tape.cross_entropy(p, &[label as usize])?
        }
    };
    Ok(tape.value(loss).clone())
}

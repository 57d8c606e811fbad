use rand::Rng;

use super::blocks::linear;
use super::TaskSpec;
use crate::encoding::init_uniform;
use crate::error::{Result, XfiError};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

pub const HEAD_FC1: &str = "head.fc1";
pub const HEAD_FC2: &str = "head.fc2";

/// Token-mean pooling followed by `d_f → hidden → output_dim`.
pub fn init_task_head<R: Rng>(store: &mut ParameterStore, d_f: usize, hidden: usize, task: TaskSpec, rng: &mut R) -> Result<()> {
    store.insert(format!("{HEAD_FC1}.w"), init_uniform(d_f, hidden, rng))?;
    store.insert(format!("{HEAD_FC1}.b"), Tensor::zeros(&[hidden]))?;
    store.insert(format!("{HEAD_FC2}.w"), init_uniform(hidden, task.output_dim(), rng))?;
    store.insert(format!("{HEAD_FC2}.b"), Tensor::zeros(&[task.output_dim()]))
}

/// Mean over each sample's tokens, `(groups·n_f) × d_f → groups × d_f`.
pub fn token_mean(tape: &mut Tape, emb_cm: Var, groups: usize) -> Result<Var> {
    tape.adaptive_avg_pool(emb_cm, groups, 1)
}

/// Maps `groups` cross-modal embeddings to `groups × output_dim` task outputs (flattened
/// `J×3` keypoints or raw logits).
pub fn task_head_forward(tape: &mut Tape, store: &ParameterStore, emb_cm: Var, groups: usize, task: TaskSpec) -> Result<Var> {
    let out_dim = store.get(&format!("{HEAD_FC2}.b"))?.numel();
    if out_dim != task.output_dim() {
        return Err(XfiError::shape("task_head_forward", &[task.output_dim()], &[out_dim]));
    }
    let pooled = token_mean(tape, emb_cm, groups)?;
    let h = linear(tape, store, HEAD_FC1, pooled)?;
    let h = tape.relu(h)?;
    linear(tape, store, HEAD_FC2, h)
}

/// Reshapes a flattened keypoint row into a `J × 3` tensor.
pub fn keypoints_from_row(row: &[f64]) -> Result<Tensor> {
    if !row.len().is_multiple_of(3) {
        return Err(XfiError::InvalidShape {
            shape: vec![row.len()],
            reason: "keypoint output must have 3 values per joint".into(),
        });
    }
    Tensor::new(vec![row.len() / 3, 3], row.to_vec())
}

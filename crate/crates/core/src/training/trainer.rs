use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Split;
use super::loss::batch_loss;
use super::metrics::{classification_metrics, keypoint_metrics};
use super::optim::{adamw_step, sgd_step, OptimState, OptimizerKind, TrainConfig};
use super::sampler::{sample_existence_list, OccurrenceStats};
use crate::error::{Result, XfiError};
use crate::tensor::{Tape, Tensor};
use crate::xfusion::{keypoints_from_row, ForwardCtx, TaskKind, TaskModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
    pub present: Vec<bool>,
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
    pub occurrences: OccurrenceStats,
}

impl History {
    /// Mean loss over the first `window` entries.
    pub fn initial_loss(&self, window: usize) -> Option<f64> {
        let n = window.min(self.entries.len());
        (n > 0).then(|| self.entries[..n].iter().map(|e| e.loss).sum::<f64>() / n as f64)
    }

    /// Mean loss over the last `window` entries.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let n = window.min(self.entries.len());
        let tail = &self.entries[self.entries.len() - n..];
        (n > 0).then(|| tail.iter().map(|e| e.loss).sum::<f64>() / n as f64)
    }
}

/// Cycles through shuffled epochs of sample indices.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    fn next<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == 0 {
                    self.order.shuffle(rng);
                }
                let i = self.order[self.cursor];
                self.cursor = (self.cursor + 1) % self.order.len();
                i
            })
            .collect()
    }
}

/// Modality-invariant training: each batch draws one existence list from `probs`, masks
/// the absent modalities, and takes one optimizer step on the parameters that batch used.
pub fn train_model(model: &mut dyn TaskModel, data: &Split, probs: &[f64], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(XfiError::Precondition("training split is empty".into()));
    }
    if probs.len() != model.modality_count() || data.modality_count() != model.modality_count() {
        return Err(XfiError::InvalidArgument(format!(
            "model has {} modalities, data {} and probabilities {}",
            model.modality_count(),
            data.modality_count(),
            probs.len()
        )));
    }
    let task = model.task();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut stream = BatchStream {
        order: (0..data.len()).collect(),
        cursor: 0,
    };
    let mut state = OptimState::new();
    let mut history = History {
        entries: Vec::with_capacity(cfg.steps),
        occurrences: OccurrenceStats::new(probs.len()),
    };
    for step in 0..cfg.steps {
        let list = sample_existence_list(probs, &mut rng)?;
        let rows = stream.next(cfg.batch_size, &mut rng);
        let inputs = data.batch_inputs(&rows)?;
        let targets = data.batch_targets(&rows, task)?;
        let mut ctx = match model.dropout_rate() {
            r if r > 0.0 => ForwardCtx::train(r, ChaCha8Rng::seed_from_u64(rng.gen())),
            _ => ForwardCtx::eval(),
        };
        let diverged = |e: XfiError| match e {
            XfiError::NonFinite { .. } => XfiError::Diverged { step, loss: f64::NAN },
            other => other,
        };
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &inputs, &list.present, &mut ctx).map_err(diverged)?;
        let loss = batch_loss(&mut tape, out.output, &targets, task).map_err(diverged)?;
        let loss_value = tape.value(loss).item()?;
        let params = model.params_mut();
        params.zero_grad();
        tape.backward(loss, params).map_err(diverged)?;
        let used: Vec<&str> = tape.used_params().collect();
        let lr = cfg.rate_at(step);
        match cfg.optimizer {
            OptimizerKind::Adamw => adamw_step(params, used, &mut state, cfg, lr),
            OptimizerKind::Sgd => sgd_step(params, used, &mut state, cfg, lr),
        }
        .map_err(diverged)?;
        history.occurrences.record(&list);
        history.entries.push(HistoryEntry {
            step,
            loss: loss_value,
            present: list.present,
        });
    }
    Ok(history)
}

/// Metric values for one evaluated subset, in report order.
pub type SubsetMetrics = Vec<(&'static str, f64)>;

/// Raw model outputs on a split for one presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `n × output_dim`.
    pub outputs: Tensor,
    /// `n × d` token-mean embeddings.
    pub embeddings: Tensor,
    /// Shape of one sample's cross-modal embedding.
    pub emb_shape: Vec<usize>,
}

/// Forward pass over the whole split in chunks of `chunk` samples.
pub fn predict(model: &dyn TaskModel, data: &Split, present: &[bool], chunk: usize) -> Result<Predictions> {
    let n = data.len();
    let chunk = chunk.max(1);
    let (mut outputs, mut embeddings) = (Vec::new(), Vec::new());
    let (mut out_dim, mut emb_dim, mut emb_shape) = (0, 0, Vec::new());
    for start in (0..n).step_by(chunk) {
        let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let inputs = data.batch_inputs(&rows)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &inputs, present, &mut ForwardCtx::eval())?;
        let o = tape.value(out.output);
        let e = tape.value(out.embedding);
        (out_dim, emb_dim) = (o.dims2()?.1, e.dims2()?.1);
        let (tokens, d) = tape.value(out.emb_cm).dims2()?;
        emb_shape = vec![tokens / rows.len(), d];
        outputs.extend_from_slice(o.data());
        embeddings.extend_from_slice(e.data());
    }
    Ok(Predictions {
        outputs: Tensor::new(vec![n, out_dim], outputs)?,
        embeddings: Tensor::new(vec![n, emb_dim], embeddings)?,
        emb_shape,
    })
}

/// Task metrics for one presence mask: MPJPE and PA-MPJPE for keypoints; accuracy,
/// silhouette and Calinski–Harabasz for classes.
pub fn evaluate_subset(model: &dyn TaskModel, data: &Split, present: &[bool]) -> Result<SubsetMetrics> {
    let pred = predict(model, data, present, 64)?;
    let task = model.task();
    match task.kind {
        TaskKind::Hpe => {
            let (mut mpjpe, mut pa) = (0.0, 0.0);
            for r in 0..data.len() {
                let p = keypoints_from_row(pred.outputs.row(r))?;
                let g = keypoints_from_row(data.keypoints.row(r))?;
                let (m, a) = keypoint_metrics(&p, &g)?;
                mpjpe += m;
                pa += a;
            }
            let n = data.len() as f64;
            Ok(vec![("mpjpe", mpjpe / n), ("pa_mpjpe", pa / n)])
        }
        TaskKind::Har => {
            let m = classification_metrics(&pred.outputs, &data.labels, &pred.embeddings)?;
            Ok(vec![
                ("accuracy", m.accuracy),
                ("silhouette", m.silhouette),
                ("calinski_harabasz", m.calinski_harabasz),
            ])
        }
    }
}

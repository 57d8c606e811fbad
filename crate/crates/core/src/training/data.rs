use super::loss::Targets;
use crate::error::{Result, XfiError};
use crate::tensor::Tensor;
use crate::xfusion::{TaskKind, TaskSpec};

/// One split of a multimodal dataset: per-modality raw rows plus both task targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `raws[m]` is `n × raw_dim_m`.
    pub raws: Vec<Tensor>,
    /// `n × 3J` flattened keypoints.
    pub keypoints: Tensor,
    pub labels: Vec<usize>,
}

fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (_, cols) = t.dims2()?;
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), cols], data)
}

impl Split {
    pub fn new(raws: Vec<Tensor>, keypoints: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = keypoints.dims2()?;
        if labels.len() != n {
            return Err(XfiError::shape("Split", &[n], &[labels.len()]));
        }
        for raw in &raws {
            if raw.dims2()?.0 != n {
                return Err(XfiError::shape("Split", &[n], raw.shape()));
            }
        }
        Ok(Self { raws, keypoints, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modality_count(&self) -> usize {
        self.raws.len()
    }

    /// Raw rows of every modality for the given sample indices.
    pub fn batch_inputs(&self, rows: &[usize]) -> Result<Vec<Tensor>> {
        self.raws.iter().map(|r| gather(r, rows)).collect()
    }

    pub fn batch_targets(&self, rows: &[usize], task: TaskSpec) -> Result<Targets> {
        Ok(match task.kind {
            TaskKind::Hpe => Targets::Keypoints(gather(&self.keypoints, rows)?),
            TaskKind::Har => Targets::Labels(rows.iter().map(|&r| self.labels[r]).collect()),
        })
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfiError};

/// Presence vector drawn for one training batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExistenceList {
    pub present: Vec<bool>,
    pub probs: Vec<f64>,
}

impl ExistenceList {
    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(XfiError::InvalidArgument("existence probabilities are empty".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(XfiError::InvalidArgument(format!("existence probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Independent Bernoulli draws, resampled until at least one modality is present.
pub fn sample_existence_list<R: Rng>(probs: &[f64], rng: &mut R) -> Result<ExistenceList> {
    check_probs(probs)?;
    if probs.iter().all(|&p| p == 0.0) {
        return Err(XfiError::Precondition(
            "all existence probabilities are zero; a non-empty subset is impossible".into(),
        ));
    }
    loop {
        let present: Vec<bool> = probs.iter().map(|&p| rng.gen::<f64>() < p).collect();
        if present.iter().any(|&p| p) {
            return Ok(ExistenceList {
                present,
                probs: probs.to_vec(),
            });
        }
    }
}

fn ln_choose(m: u64, k: u64) -> f64 {
    let k = k.min(m - k);
    (0..k).map(|i| ((m - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// `∏ C(m,k_i) p_i^{k_i} (1−p_i)^{m−k_i}`, accumulated in log space.
pub fn binomial_count_pmf(counts: &[u64], m: u64, probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    if counts.len() != probs.len() {
        return Err(XfiError::shape("binomial_count_pmf", &[counts.len()], &[probs.len()]));
    }
    let mut log_p = 0.0;
    for (&k, &p) in counts.iter().zip(probs) {
        if k > m {
            return Err(XfiError::InvalidArgument(format!("count {k} exceeds {m} iterations")));
        }
        let term = |n: u64, q: f64| if n == 0 { 0.0 } else { n as f64 * q.ln() };
        log_p += ln_choose(m, k) + term(k, p) + term(m - k, 1.0 - p);
    }
    Ok(log_p.exp())
}

/// How often each modality appeared over `iterations` sampled batches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceStats {
    pub counts: Vec<u64>,
    pub iterations: u64,
}

impl OccurrenceStats {
    pub fn new(modalities: usize) -> Self {
        Self {
            counts: vec![0; modalities],
            iterations: 0,
        }
    }

    pub fn record(&mut self, list: &ExistenceList) {
        for (c, &p) in self.counts.iter_mut().zip(&list.present) {
            *c += u64::from(p);
        }
        self.iterations += 1;
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let m = self.iterations.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / m).collect()
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoding::{validate_modalities, ModalityConfig};
use crate::error::{Result, XfiError};
use crate::tensor::Tensor;
use crate::training::Split;

/// Parameters of the synthetic complementary-multimodal generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataConfig {
    pub d_z: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub joints: usize,
    pub num_classes: usize,
    pub modalities: Vec<ModalityConfig>,
    pub seed: u64,
}

/// The fixed linear maps behind a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `3J × d_z`.
    pub keypoint_map: Tensor,
    /// `C × d_z`.
    pub prototypes: Tensor,
    /// `mixing[m]` is `raw_dim_m × d_z`.
    pub mixing: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Split,
    pub eval: Split,
    pub truth: GroundTruth,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, _) = m.dims2().unwrap_or((0, 0));
    (0..rows).map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn draw_split(cfg: &SyntheticDataConfig, truth: &GroundTruth, n: usize, rng: &mut ChaCha8Rng) -> Result<Split> {
    let mut raws: Vec<Vec<f64>> = vec![Vec::new(); cfg.modalities.len()];
    let (mut keypoints, mut labels) = (Vec::with_capacity(n * 3 * cfg.joints), Vec::with_capacity(n));
    for _ in 0..n {
        let z: Vec<f64> = (0..cfg.d_z).map(|_| rng.sample(StandardNormal)).collect();
        keypoints.extend(matvec(&truth.keypoint_map, &z));
        let scores = matvec(&truth.prototypes, &z);
        labels.push((0..scores.len()).fold(0, |b, c| if scores[c] > scores[b] { c } else { b }));
        for (m, modality) in cfg.modalities.iter().enumerate() {
            let masked: Vec<f64> = z
                .iter()
                .zip(&modality.informative_mask)
                .map(|(&v, &keep)| if keep { v } else { 0.0 })
                .collect();
            let clean = matvec(&truth.mixing[m], &masked);
            raws[m].extend(
                clean
                    .into_iter()
                    .map(|v| v + modality.noise_sigma * rng.sample::<f64, _>(StandardNormal)),
            );
        }
    }
    let raws = raws
        .into_iter()
        .zip(&cfg.modalities)
        .map(|(data, m)| Tensor::new(vec![n, m.raw_dim], data))
        .collect::<Result<Vec<_>>>()?;
    Split::new(raws, Tensor::new(vec![n, 3 * cfg.joints], keypoints)?, labels)
}

/// `z ~ N(0, I)`; keypoints `W_gt·z`; label `argmax_c ⟨proto_c, z⟩`;
/// `raw_m = A_m·(mask_m ⊙ z) + σ_m·noise`. The maps are drawn first, then the training
/// samples, then the evaluation samples, all from one seeded stream.
pub fn generate_synthetic_dataset(cfg: &SyntheticDataConfig) -> Result<SyntheticDataset> {
    validate_modalities(&cfg.modalities, cfg.d_z)?;
    if cfg.joints < 3 || cfg.num_classes < 2 || cfg.n_train == 0 || cfg.n_eval == 0 {
        return Err(XfiError::Config(
            "synthetic data needs joints ≥ 3, classes ≥ 2 and non-empty splits".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // streams 0 and 1 drive parameter and stub initialization
    rng.set_stream(2);
    let unit = 1.0 / (cfg.d_z as f64).sqrt();
    let keypoint_map = gaussian(3 * cfg.joints, cfg.d_z, unit, &mut rng);
    let prototypes = gaussian(cfg.num_classes, cfg.d_z, 1.0, &mut rng);
    let mixing = cfg
        .modalities
        .iter()
        .map(|m| {
            let observed = m.informative_mask.iter().filter(|&&k| k).count().max(1);
            gaussian(m.raw_dim, cfg.d_z, 1.0 / (observed as f64).sqrt(), &mut rng)
        })
        .collect();
    let truth = GroundTruth {
        keypoint_map,
        prototypes,
        mixing,
    };
    let train = draw_split(cfg, &truth, cfg.n_train, &mut rng)?;
    let eval = draw_split(cfg, &truth, cfg.n_eval, &mut rng)?;
    Ok(SyntheticDataset { train, eval, truth })
}

impl super::ExperimentConfig {
    pub fn data_config(&self) -> SyntheticDataConfig {
        SyntheticDataConfig {
            d_z: self.data.d_z,
            n_train: self.data.n_train,
            n_eval: self.data.n_eval,
            joints: self.data.joints,
            num_classes: self.data.classes,
            modalities: self.modality_configs(),
            seed: self.seed,
        }
    }
}

//! Modality feature encoding: frozen stub extractors, learned projections, positional
//! encoding and multi-modal embedding assembly.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfiError};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// Static description of one sensor modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityConfig {
    pub id: String,
    pub raw_dim: usize,
    /// Latent dimensions this modality observes.
    pub informative_mask: Vec<bool>,
    pub noise_sigma: f64,
    pub p_exist: f64,
    /// Source of the positional encoding (at most one modality).
    pub is_spatial: bool,
}

/// Validates a canonical modality list against a latent space of `latent_dim` dimensions.
pub fn validate_modalities(modalities: &[ModalityConfig], latent_dim: usize) -> Result<()> {
    if modalities.is_empty() {
        return Err(XfiError::Config("at least one modality is required".into()));
    }
    let mut covered = vec![false; latent_dim];
    for (i, m) in modalities.iter().enumerate() {
        if m.id.is_empty() || m.id.contains(['+', '.', ',', ' ']) {
            return Err(XfiError::Config(format!(
                "modality id `{}` must be non-empty without '+', '.', ',' or spaces",
                m.id
            )));
        }
        if modalities[..i].iter().any(|o| o.id == m.id) {
            return Err(XfiError::Config(format!("duplicate modality id `{}`", m.id)));
        }
        if m.raw_dim == 0 {
            return Err(XfiError::Config(format!("modality `{}` has raw_dim 0", m.id)));
        }
        if m.informative_mask.len() != latent_dim {
            return Err(XfiError::Config(format!(
                "modality `{}` mask has {} entries, latent dim is {latent_dim}",
                m.id,
                m.informative_mask.len()
            )));
        }
        if !(0.0..=1.0).contains(&m.p_exist) {
            return Err(XfiError::Config(format!(
                "modality `{}` p_exist {} outside [0, 1]",
                m.id, m.p_exist
            )));
        }
        if !(m.noise_sigma >= 0.0 && m.noise_sigma.is_finite()) {
            return Err(XfiError::Config(format!(
                "modality `{}` noise_sigma must be >= 0",
                m.id
            )));
        }
        for (c, &flag) in covered.iter_mut().zip(&m.informative_mask) {
            *c |= flag;
        }
    }
    if let Some(dim) = covered.iter().position(|c| !c) {
        return Err(XfiError::Config(format!(
            "latent dimension {dim} is not observed by any modality"
        )));
    }
    if modalities.iter().filter(|m| m.is_spatial).count() > 1 {
        return Err(XfiError::Config("at most one modality may be spatial".into()));
    }
    Ok(())
}

/// Token geometry of the encoder output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    /// Tokens per modality.
    pub n_f: usize,
    /// Stub extractor feature width.
    pub d_hid: usize,
    /// Unified feature width.
    pub d_f: usize,
}

/// Frozen stand-in for a pretrained feature extractor: a fixed linear map from the raw
/// observation to `n_f × d_hid` features.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStub {
    frozen: Tensor,
    n_f: usize,
    d_hid: usize,
}

impl EncoderStub {
    /// Gaussian matrix scaled by `1/sqrt(raw_dim)`, drawn from `rng`.
    pub fn seeded<R: Rng>(raw_dim: usize, n_f: usize, d_hid: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (raw_dim as f64).sqrt();
        let data = (0..raw_dim * n_f * d_hid)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self {
            frozen: Tensor::from_parts(vec![raw_dim, n_f * d_hid], data),
            n_f,
            d_hid,
        }
    }

    pub fn from_matrix(frozen: Tensor, n_f: usize, d_hid: usize) -> Result<Self> {
        let (_, cols) = frozen.dims2()?;
        if cols != n_f * d_hid {
            return Err(XfiError::shape("EncoderStub", frozen.shape(), &[n_f, d_hid]));
        }
        Ok(Self { frozen, n_f, d_hid })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.frozen
    }

    pub fn raw_dim(&self) -> usize {
        self.frozen.shape()[0]
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn d_hid(&self) -> usize {
        self.d_hid
    }
}

pub fn projection_weight(id: &str) -> String {
    format!("enc.{id}.proj.w")
}

pub fn projection_bias(id: &str) -> String {
    format!("enc.{id}.proj.b")
}

pub const POSITIONAL_WEIGHT: &str = "pe.w";
pub const POSITIONAL_BIAS: &str = "pe.b";

/// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Registers the learned projection `d_hid → d_f` for modality `id`.
pub fn init_projection<R: Rng>(store: &mut ParameterStore, id: &str, dims: EncoderDims, rng: &mut R) -> Result<()> {
    store.insert(projection_weight(id), init_uniform(dims.d_hid, dims.d_f, rng))?;
    store.insert(projection_bias(id), Tensor::zeros(&[dims.d_f]))
}

/// Registers the positional-encoding map `raw_dim → n_f·d_f`.
pub fn init_positional<R: Rng>(store: &mut ParameterStore, raw_dim: usize, dims: EncoderDims, rng: &mut R) -> Result<()> {
    store.insert(POSITIONAL_WEIGHT, init_uniform(raw_dim, dims.n_f * dims.d_f, rng))?;
    store.insert(POSITIONAL_BIAS, Tensor::zeros(&[dims.n_f * dims.d_f]))
}

/// Encodes a batch of raw observations (`B × raw_dim`) into `(B·n_f) × d_f` features:
/// frozen stub, reshape to tokens, then the learned row-wise projection.
pub fn encode_modality_batch(
    tape: &mut Tape,
    raw: Var,
    stub: &EncoderStub,
    store: &ParameterStore,
    id: &str,
) -> Result<Var> {
    let (batch, raw_dim) = tape.value(raw).dims2()?;
    if raw_dim != stub.raw_dim() {
        return Err(XfiError::shape("encode_modality", &[batch, raw_dim], stub.matrix().shape()));
    }
    let frozen = tape.constant(stub.matrix().clone());
    let hidden = tape.matmul(raw, frozen)?;
    let tokens = tape.reshape(hidden, &[batch * stub.n_f, stub.d_hid])?;
    let w = tape.param(store, &projection_weight(id))?;
    let b = tape.param(store, &projection_bias(id))?;
    tape.linear(tokens, w, Some(b))
}

/// Single-sample encoding returning `F_i` as an `n_f × d_f` tensor.
pub fn encode_modality(raw: &[f64], stub: &EncoderStub, store: &ParameterStore, id: &str) -> Result<Tensor> {
    if raw.len() != stub.raw_dim() {
        return Err(XfiError::shape("encode_modality", &[raw.len()], &[stub.raw_dim()]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, raw.len()], raw.to_vec())?);
    let out = encode_modality_batch(&mut tape, x, stub, store, id)?;
    Ok(tape.value(out).clone())
}

/// Learned positional encoding from the spatial modality's raw batch (`B × raw_dim`),
/// reshaped to `(B·n_f) × d_f`. Returns `None` when `enabled` is false.
pub fn positional_encoding(
    tape: &mut Tape,
    store: &ParameterStore,
    spatial_raw: Option<Var>,
    enabled: bool,
    dims: EncoderDims,
) -> Result<Option<Var>> {
    if !enabled {
        return Ok(None);
    }
    let raw = spatial_raw.ok_or_else(|| {
        XfiError::Precondition("positional encoding enabled but the spatial modality is absent".into())
    })?;
    let (batch, _) = tape.value(raw).dims2()?;
    let w = tape.param(store, POSITIONAL_WEIGHT)?;
    let b = tape.param(store, POSITIONAL_BIAS)?;
    let flat = tape.linear(raw, w, Some(b))?;
    tape.reshape(flat, &[batch * dims.n_f, dims.d_f]).map(Some)
}

/// The encoding is supplied only when configured on and the spatial modality is present.
pub fn positional_gate(configured: bool, spatial_index: Option<usize>, present: &[bool]) -> bool {
    configured && spatial_index.is_some_and(|i| present.get(i).copied().unwrap_or(false))
}

/// How modality blocks are merged into the multi-modal embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Token-axis concatenation in canonical order: `(n_f·|S|) × d_f`.
    #[default]
    Concat,
    /// Elementwise mean of blocks: `n_f × d_f`.
    Add,
}

/// Which modality blocks receive the positional encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalScope {
    #[default]
    AllBlocks,
    SpatialBlock,
}

/// Positional term to add during assembly.
#[derive(Clone, Copy, Debug)]
pub struct PositionalTerm {
    pub value: Var,
    pub scope: PositionalScope,
    /// Canonical index of the spatial modality.
    pub spatial_index: usize,
}

/// Merges per-modality blocks (keyed by canonical index) into `Emb_mm`. Every block is
/// `(groups·n_f) × d_f`; the positional term, when given, is added before combining.
pub fn assemble_multimodal_embedding(
    tape: &mut Tape,
    features: &BTreeMap<usize, Var>,
    positional: Option<PositionalTerm>,
    mode: CombineMode,
    groups: usize,
) -> Result<Var> {
    if features.is_empty() {
        return Err(XfiError::EmptyModalitySet);
    }
    let mut blocks = Vec::with_capacity(features.len());
    let first_shape = tape.shape(*features.values().next().unwrap()).to_vec();
    for (&idx, &block) in features {
        if tape.shape(block) != first_shape.as_slice() {
            return Err(XfiError::shape("assemble_multimodal_embedding", &first_shape, tape.shape(block)));
        }
        let with_pe = match positional {
            Some(p) if p.scope == PositionalScope::AllBlocks || p.spatial_index == idx => tape.add(block, p.value)?,
            _ => block,
        };
        blocks.push(with_pe);
    }
    match mode {
        CombineMode::Concat => tape.concat_grouped(&blocks, groups),
        CombineMode::Add => tape.mean_of(&blocks),
    }
}

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::ForwardCtx;
use super::forward::{init_fusion_params, FusionInputs, FusionNet, FusionTrace};
use super::head::{init_task_head, task_head_forward, token_mean};
use super::{FusionConfig, TaskSpec, Variant};
use crate::encoding::{
    encode_modality_batch, init_positional, init_projection, positional_encoding, positional_gate, EncoderDims,
    EncoderStub, ModalityConfig, PositionalTerm,
};
use crate::error::{Result, XfiError};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// Everything needed to build a model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub fusion: FusionConfig,
    pub d_hid: usize,
    pub task: TaskSpec,
    pub modalities: Vec<ModalityConfig>,
}

impl ModelSpec {
    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            n_f: self.fusion.n_f,
            d_hid: self.d_hid,
            d_f: self.fusion.d_f,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.id.clone()).collect()
    }

    pub fn spatial_index(&self) -> Option<usize> {
        self.modalities.iter().position(|m| m.is_spatial)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.d_hid == 0 {
            return Err(XfiError::Config("d_hid must be positive".into()));
        }
        if self.task.output_dim() == 0 {
            return Err(XfiError::Config("task output dimension must be positive".into()));
        }
        if self.modalities.is_empty() {
            return Err(XfiError::Config("at least one modality is required".into()));
        }
        if self.modalities.iter().filter(|m| m.is_spatial).count() > 1 {
            return Err(XfiError::Config("at most one modality may be spatial".into()));
        }
        Ok(())
    }
}

/// Seeded generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seeded generator for the frozen extractor stubs, independent of the parameter stream.
pub fn stub_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Graph handles produced by a model forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Cross-modal embedding `(B·n_f) × d_f` (or the baseline's pooled features).
    pub emb_cm: Var,
    /// Task outputs `B × output_dim`.
    pub output: Var,
    /// Token-mean embedding `B × d_f` used for clustering metrics.
    pub embedding: Var,
}

/// A trainable model that accepts any non-empty modality subset.
pub trait TaskModel: Send + Sync {
    fn task(&self) -> TaskSpec;

    fn modality_count(&self) -> usize;

    fn params(&self) -> &ParameterStore;

    fn params_mut(&mut self) -> &mut ParameterStore;

    /// Frozen extractor stubs in canonical modality order.
    fn stubs(&self) -> &[EncoderStub];

    /// Dropout applied during training; evaluation never drops.
    fn dropout_rate(&self) -> f64 {
        0.0
    }

    /// `raws[i]` is the `B × raw_dim` batch for canonical modality `i`; entries whose
    /// `present` flag is false are never read.
    fn forward(&self, tape: &mut Tape, raws: &[Tensor], present: &[bool], ctx: &mut ForwardCtx) -> Result<ModelOutput>;
}

/// Checks the presence mask and returns the batch size.
pub(crate) fn batch_size(raws: &[Tensor], present: &[bool], modalities: usize) -> Result<usize> {
    if present.len() != modalities || raws.len() != modalities {
        return Err(XfiError::InvalidArgument(format!(
            "expected {modalities} modality slots, got {} presence flags and {} inputs",
            present.len(),
            raws.len()
        )));
    }
    let first = present.iter().position(|&p| p).ok_or(XfiError::EmptyModalitySet)?;
    let (b, _) = raws[first].dims2()?;
    for (i, raw) in raws.iter().enumerate() {
        if present[i] && raw.dims2()?.0 != b {
            return Err(XfiError::shape("batch", raws[first].shape(), raw.shape()));
        }
    }
    Ok(b)
}

/// Frozen stubs, learned encoders, fusion stage and task head.
#[derive(Clone, Debug)]
pub struct XFiModel {
    spec: ModelSpec,
    params: ParameterStore,
    stubs: Vec<EncoderStub>,
}

impl XFiModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let dims = spec.encoder_dims();
        let mut srng = stub_rng(seed);
        let stubs = spec
            .modalities
            .iter()
            .map(|m| EncoderStub::seeded(m.raw_dim, dims.n_f, dims.d_hid, &mut srng))
            .collect();
        let mut rng = init_rng(seed);
        let mut params = ParameterStore::new();
        for m in &spec.modalities {
            init_projection(&mut params, &m.id, dims, &mut rng)?;
        }
        if let (true, Some(i)) = (spec.fusion.positional_encoding, spec.spatial_index()) {
            init_positional(&mut params, spec.modalities[i].raw_dim, dims, &mut rng)?;
        }
        init_fusion_params(&mut params, &spec.fusion, &spec.ids(), &mut rng)?;
        init_task_head(&mut params, spec.fusion.d_f, spec.fusion.ffn_hidden, spec.task, &mut rng)?;
        Ok(Self { spec, params, stubs })
    }

    /// Reassembles a model from stored parameters and stubs.
    pub fn from_parts(spec: ModelSpec, params: ParameterStore, stubs: Vec<EncoderStub>) -> Result<Self> {
        spec.validate()?;
        if stubs.len() != spec.modalities.len() {
            return Err(XfiError::Config(format!(
                "{} stubs for {} modalities",
                stubs.len(),
                spec.modalities.len()
            )));
        }
        Ok(Self { spec, params, stubs })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn stubs(&self) -> &[EncoderStub] {
        &self.stubs
    }

    pub fn fusion_net<'a>(&'a self, ids: &'a [String]) -> FusionNet<'a> {
        FusionNet {
            cfg: &self.spec.fusion,
            store: &self.params,
            ids,
        }
    }

    /// Encodes every present modality into `(B·n_f) × d_f` blocks keyed by canonical index.
    pub fn encode(&self, tape: &mut Tape, raws: &[Tensor], present: &[bool]) -> Result<(BTreeMap<usize, Var>, BTreeMap<usize, Var>)> {
        let mut raw_vars = BTreeMap::new();
        let mut features = BTreeMap::new();
        for (i, m) in self.spec.modalities.iter().enumerate() {
            if !present[i] {
                continue;
            }
            let raw = tape.constant(raws[i].clone());
            raw_vars.insert(i, raw);
            features.insert(i, encode_modality_batch(tape, raw, &self.stubs[i], &self.params, &m.id)?);
        }
        Ok((raw_vars, features))
    }

    /// Full forward pass, optionally recording the key-value snapshots of the iterative
    /// driver.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        raws: &[Tensor],
        present: &[bool],
        ctx: &mut ForwardCtx,
        trace: Option<&mut FusionTrace>,
    ) -> Result<ModelOutput> {
        let groups = batch_size(raws, present, self.spec.modalities.len())?;
        let (raw_vars, features) = self.encode(tape, raws, present)?;
        let spatial = self.spec.spatial_index();
        let enabled = positional_gate(self.spec.fusion.positional_encoding, spatial, present);
        let spatial_raw = spatial.and_then(|i| raw_vars.get(&i).copied());
        let positional = positional_encoding(tape, &self.params, spatial_raw, enabled, self.spec.encoder_dims())?
            .map(|value| PositionalTerm {
                value,
                scope: self.spec.fusion.positional_scope,
                spatial_index: spatial.unwrap_or(0),
            });
        let ids = self.spec.ids();
        let net = self.fusion_net(&ids);
        let inputs = FusionInputs {
            features: &features,
            positional,
            groups,
        };
        let emb_cm = match (self.spec.fusion.variant, trace) {
            (Variant::IterativeSharedBlock, trace) => net.xfusion_forward(tape, inputs, ctx, trace)?,
            (_, _) => net.fusion_variant_forward(tape, inputs, ctx)?,
        };
        let output = task_head_forward(tape, &self.params, emb_cm, groups, self.spec.task)?;
        let embedding = token_mean(tape, emb_cm, groups)?;
        Ok(ModelOutput {
            emb_cm,
            output,
            embedding,
        })
    }
}

impl TaskModel for XFiModel {
    fn task(&self) -> TaskSpec {
        self.spec.task
    }

    fn modality_count(&self) -> usize {
        self.spec.modalities.len()
    }

    fn params(&self) -> &ParameterStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn stubs(&self) -> &[EncoderStub] {
        &self.stubs
    }

    fn dropout_rate(&self) -> f64 {
        self.spec.fusion.dropout_rate
    }

    fn forward(&self, tape: &mut Tape, raws: &[Tensor], present: &[bool], ctx: &mut ForwardCtx) -> Result<ModelOutput> {
        self.forward_traced(tape, raws, present, ctx, None)
    }
}

use std::collections::BTreeMap;

use super::data::Split;
use super::optim::TrainConfig;
use super::trainer::{train_model, History};
use crate::encoding::{encode_modality_batch, init_projection, init_uniform, EncoderStub};
use crate::error::{Result, XfiError};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};
use crate::xfusion::{
    batch_size, init_rng, stub_rng, token_mean, ForwardCtx, ModelOutput, ModelSpec, TaskModel, TaskSpec,
};

fn stubs_for(spec: &ModelSpec, seed: u64) -> Vec<EncoderStub> {
    let dims = spec.encoder_dims();
    let mut rng = stub_rng(seed);
    spec.modalities
        .iter()
        .map(|m| EncoderStub::seeded(m.raw_dim, dims.n_f, dims.d_hid, &mut rng))
        .collect()
}

fn init_mlp(store: &mut ParameterStore, prefix: &str, dims: [usize; 3], rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
    let [input, hidden, output] = dims;
    store.insert(format!("{prefix}.fc1.w"), init_uniform(input, hidden, rng))?;
    store.insert(format!("{prefix}.fc1.b"), Tensor::zeros(&[hidden]))?;
    store.insert(format!("{prefix}.fc2.w"), init_uniform(hidden, output, rng))?;
    store.insert(format!("{prefix}.fc2.b"), Tensor::zeros(&[output]))
}

fn mlp(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = tape.param(store, &format!("{prefix}.fc1.w"))?;
    let b1 = tape.param(store, &format!("{prefix}.fc1.b"))?;
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.relu(h)?;
    let w2 = tape.param(store, &format!("{prefix}.fc2.w"))?;
    let b2 = tape.param(store, &format!("{prefix}.fc2.b"))?;
    tape.linear(h, w2, Some(b2))
}

/// `(B·n_f) × d_f → B × (n_f·d_f)` followed by the MLP.
fn flatten_mlp(tape: &mut Tape, store: &ParameterStore, prefix: &str, tokens: Var, groups: usize) -> Result<Var> {
    let (rows, d) = tape.value(tokens).dims2()?;
    let flat = tape.reshape(tokens, &[groups, rows / groups * d])?;
    mlp(tape, store, prefix, flat)
}

fn encode_present(
    tape: &mut Tape,
    spec: &ModelSpec,
    stubs: &[EncoderStub],
    store: &ParameterStore,
    raws: &[Tensor],
    present: &[bool],
) -> Result<BTreeMap<usize, Var>> {
    let mut out = BTreeMap::new();
    for (i, m) in spec.modalities.iter().enumerate().filter(|(i, _)| present[*i]) {
        let raw = tape.constant(raws[i].clone());
        out.insert(i, encode_modality_batch(tape, raw, &stubs[i], store, &m.id)?);
    }
    Ok(out)
}

const CONCAT_HEAD: &str = "concat.mlp";

/// Feature-level fusion: concatenate present blocks, average-pool to `n_f` tokens,
/// flatten, then an MLP head.
#[derive(Clone, Debug)]
pub struct FeatureConcat {
    spec: ModelSpec,
    params: ParameterStore,
    stubs: Vec<EncoderStub>,
}

impl FeatureConcat {
    /// Reassembles a model from stored parameters and stubs.
    pub fn from_parts(spec: ModelSpec, params: ParameterStore, stubs: Vec<EncoderStub>) -> Result<Self> {
        spec.validate()?;
        if stubs.len() != spec.modalities.len() {
            return Err(XfiError::Config(format!("{} stubs for {} modalities", stubs.len(), spec.modalities.len())));
        }
        Ok(Self { spec, params, stubs })
    }

    /// Shares the frozen stubs of an [`XFiModel`](crate::xfusion::XFiModel) built from the
    /// same spec and seed.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let dims = spec.encoder_dims();
        let stubs = stubs_for(&spec, seed);
        let mut rng = init_rng(seed);
        let mut params = ParameterStore::new();
        for m in &spec.modalities {
            init_projection(&mut params, &m.id, dims, &mut rng)?;
        }
        let widths = [dims.n_f * dims.d_f, spec.fusion.ffn_hidden, spec.task.output_dim()];
        init_mlp(&mut params, CONCAT_HEAD, widths, &mut rng)?;
        Ok(Self { spec, params, stubs })
    }
}

impl TaskModel for FeatureConcat {
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

    fn forward(&self, tape: &mut Tape, raws: &[Tensor], present: &[bool], _ctx: &mut ForwardCtx) -> Result<ModelOutput> {
        let groups = batch_size(raws, present, self.modality_count())?;
        let features = encode_present(tape, &self.spec, &self.stubs, &self.params, raws, present)?;
        let blocks: Vec<Var> = features.values().copied().collect();
        let concat = tape.concat_grouped(&blocks, groups)?;
        let pooled = tape.adaptive_avg_pool(concat, groups, self.spec.fusion.n_f)?;
        let output = flatten_mlp(tape, &self.params, CONCAT_HEAD, pooled, groups)?;
        let embedding = token_mean(tape, pooled, groups)?;
        Ok(ModelOutput {
            emb_cm: pooled,
            output,
            embedding,
        })
    }
}

fn member_head(id: &str) -> String {
    format!("single.{id}.mlp")
}

/// Decision-level fusion: one single-modality model (encoder, flatten, MLP) per modality;
/// the fused output is the arithmetic mean of the present members' outputs.
#[derive(Clone, Debug)]
pub struct DecisionAverage {
    spec: ModelSpec,
    params: ParameterStore,
    stubs: Vec<EncoderStub>,
}

impl DecisionAverage {
    /// Reassembles a model from stored parameters and stubs.
    pub fn from_parts(spec: ModelSpec, params: ParameterStore, stubs: Vec<EncoderStub>) -> Result<Self> {
        spec.validate()?;
        if stubs.len() != spec.modalities.len() {
            return Err(XfiError::Config(format!("{} stubs for {} modalities", stubs.len(), spec.modalities.len())));
        }
        Ok(Self { spec, params, stubs })
    }

    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let dims = spec.encoder_dims();
        let stubs = stubs_for(&spec, seed);
        let mut rng = init_rng(seed);
        let mut params = ParameterStore::new();
        for m in &spec.modalities {
            init_projection(&mut params, &m.id, dims, &mut rng)?;
            let widths = [dims.n_f * dims.d_f, spec.fusion.ffn_hidden, spec.task.output_dim()];
            init_mlp(&mut params, &member_head(&m.id), widths, &mut rng)?;
        }
        Ok(Self { spec, params, stubs })
    }

    /// Output of member `i` alone, `B × output_dim`.
    pub fn member_forward(&self, tape: &mut Tape, raws: &[Tensor], i: usize) -> Result<Var> {
        let mut present = vec![false; self.modality_count()];
        *present
            .get_mut(i)
            .ok_or_else(|| XfiError::InvalidArgument(format!("no member {i}")))? = true;
        let groups = batch_size(raws, &present, self.modality_count())?;
        let features = encode_present(tape, &self.spec, &self.stubs, &self.params, raws, &present)?;
        flatten_mlp(tape, &self.params, &member_head(&self.spec.modalities[i].id), features[&i], groups)
    }

    /// Trains every member on its own modality only.
    pub fn train_members(&mut self, data: &Split, cfg: &TrainConfig) -> Result<Vec<History>> {
        let n = self.modality_count();
        (0..n)
            .map(|i| {
                let probs: Vec<f64> = (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect();
                train_model(self, data, &probs, cfg)
            })
            .collect()
    }
}

impl TaskModel for DecisionAverage {
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

    fn forward(&self, tape: &mut Tape, raws: &[Tensor], present: &[bool], _ctx: &mut ForwardCtx) -> Result<ModelOutput> {
        let groups = batch_size(raws, present, self.modality_count())?;
        let features = encode_present(tape, &self.spec, &self.stubs, &self.params, raws, present)?;
        let (mut outputs, mut embeddings) = (Vec::new(), Vec::new());
        for (&i, &f) in &features {
            let head = member_head(&self.spec.modalities[i].id);
            outputs.push(flatten_mlp(tape, &self.params, &head, f, groups)?);
            embeddings.push(token_mean(tape, f, groups)?);
        }
        let blocks: Vec<Var> = features.values().copied().collect();
        Ok(ModelOutput {
            emb_cm: tape.mean_of(&blocks)?,
            output: tape.mean_of(&outputs)?,
            embedding: tape.mean_of(&embeddings)?,
        })
    }
}

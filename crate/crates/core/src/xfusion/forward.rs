//! Fusion drivers: the iterative X-Fusion loop and the comparison variants.

use std::collections::BTreeMap;

use rand::Rng;

use super::blocks::{
    cross_attention_inject, cross_modal_forward, generate_kv, init_cross_attention, init_kv_generator,
    init_self_attention, self_attention_block, ForwardCtx,
};
use super::{FusionConfig, Variant};
use crate::encoding::{assemble_multimodal_embedding, PositionalTerm};
use crate::error::{Result, XfiError};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

pub fn kv_prefix(layer: Option<usize>, id: &str) -> String {
    match layer {
        Some(l) => format!("kv.l{l}.{id}"),
        None => format!("kv.{id}"),
    }
}

pub fn cm_prefix(layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!("cm.l{l}"),
        None => "cm".to_string(),
    }
}

pub fn ca_prefix(layer: Option<usize>, id: &str) -> String {
    match layer {
        Some(l) => format!("ca.l{l}.{id}"),
        None => format!("ca.{id}"),
    }
}

pub fn tf_prefix(layer: usize) -> String {
    format!("tf.l{layer}")
}

/// Registers every fusion parameter required by `cfg.variant` for modalities `ids`.
///
/// Layers are numbered from 1. Injection after the last cross-modal pass does not feed the
/// output, so stacked variants create cross-attention (and fresh key-value) parameters for
/// layers `1..iterations` only.
pub fn init_fusion_params<R: Rng>(store: &mut ParameterStore, cfg: &FusionConfig, ids: &[String], rng: &mut R) -> Result<()> {
    let t = cfg.iterations;
    match cfg.variant {
        Variant::IterativeSharedBlock => {
            init_self_attention(store, &cm_prefix(None), cfg, rng)?;
            for id in ids {
                init_kv_generator(store, &kv_prefix(None, id), cfg.d_f, rng)?;
                init_cross_attention(store, &ca_prefix(None, id), cfg, rng)?;
            }
        }
        Variant::StackedFreshKv | Variant::StackedSharedKv => {
            for layer in 1..=t {
                init_self_attention(store, &cm_prefix(Some(layer)), cfg, rng)?;
            }
            for id in ids {
                if cfg.variant == Variant::StackedSharedKv {
                    init_kv_generator(store, &kv_prefix(None, id), cfg.d_f, rng)?;
                }
                for layer in 1..t {
                    if cfg.variant == Variant::StackedFreshKv {
                        init_kv_generator(store, &kv_prefix(Some(layer), id), cfg.d_f, rng)?;
                    }
                    init_cross_attention(store, &ca_prefix(Some(layer), id), cfg, rng)?;
                }
            }
        }
        Variant::TransformerOnly => {
            for layer in 1..=t {
                init_self_attention(store, &tf_prefix(layer), cfg, rng)?;
            }
        }
    }
    Ok(())
}

/// Per-iteration snapshot of the key-value pairs read by the fusion block.
#[derive(Clone, Debug, Default)]
pub struct FusionTrace {
    pub kv_by_iteration: Vec<BTreeMap<usize, (Tensor, Tensor)>>,
}

/// Encoded modality blocks entering the fusion stage.
#[derive(Clone, Copy, Debug)]
pub struct FusionInputs<'a> {
    /// `F_i` keyed by canonical modality index, each `(groups·n_f) × d_f`.
    pub features: &'a BTreeMap<usize, Var>,
    pub positional: Option<PositionalTerm>,
    /// Number of samples stacked along the row axis.
    pub groups: usize,
}

/// Parameters and configuration shared by every fusion driver.
#[derive(Clone, Copy, Debug)]
pub struct FusionNet<'a> {
    pub cfg: &'a FusionConfig,
    pub store: &'a ParameterStore,
    /// Modality ids in canonical order.
    pub ids: &'a [String],
}

impl FusionNet<'_> {
    fn id(&self, idx: usize) -> Result<&str> {
        self.ids
            .get(idx)
            .map(String::as_str)
            .ok_or_else(|| XfiError::InvalidArgument(format!("modality index {idx} not configured")))
    }

    fn generate_all_kv(
        &self,
        tape: &mut Tape,
        sources: &BTreeMap<usize, Var>,
        layer: Option<usize>,
    ) -> Result<BTreeMap<usize, (Var, Var)>> {
        sources
            .iter()
            .map(|(&idx, &f)| {
                let prefix = kv_prefix(layer, self.id(idx)?);
                Ok((idx, generate_kv(tape, self.store, &prefix, f, self.cfg.norm_eps)?))
            })
            .collect()
    }

    /// Injects every present modality and concatenates the results in canonical order.
    fn inject_all(
        &self,
        tape: &mut Tape,
        emb_cm: Var,
        kv: &BTreeMap<usize, (Var, Var)>,
        layer: Option<usize>,
        groups: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<BTreeMap<usize, Var>> {
        kv.iter()
            .map(|(&idx, &(k, v))| {
                let prefix = ca_prefix(layer, self.id(idx)?);
                let out = cross_attention_inject(tape, self.store, &prefix, emb_cm, k, v, groups, self.cfg, ctx)?;
                Ok((idx, out))
            })
            .collect()
    }

    fn initial_embedding(&self, tape: &mut Tape, inputs: FusionInputs<'_>) -> Result<Var> {
        assemble_multimodal_embedding(
            tape,
            inputs.features,
            inputs.positional,
            self.cfg.combine_mode,
            inputs.groups,
        )
    }

    /// Iterative X-Fusion: key-value pairs are generated once from the encoder features, then
    /// the shared block alternates the cross-modal transformer with per-modality injection.
    /// Returns the cross-modal embedding of the last iteration.
    pub fn xfusion_forward(
        &self,
        tape: &mut Tape,
        inputs: FusionInputs<'_>,
        ctx: &mut ForwardCtx,
        mut trace: Option<&mut FusionTrace>,
    ) -> Result<Var> {
        if self.cfg.variant != Variant::IterativeSharedBlock {
            return Err(XfiError::Config(format!(
                "xfusion_forward requires the iterative variant, got {}",
                self.cfg.variant
            )));
        }
        if inputs.features.is_empty() {
            return Err(XfiError::EmptyModalitySet);
        }
        let kv = self.generate_all_kv(tape, inputs.features, None)?;
        let mut emb_mm = self.initial_embedding(tape, inputs)?;
        let cm = cm_prefix(None);
        let mut emb_cm = emb_mm;
        for t in 1..=self.cfg.iterations {
            emb_cm = cross_modal_forward(tape, self.store, &cm, emb_mm, inputs.groups, self.cfg, ctx)?;
            if let Some(trace) = trace.as_deref_mut() {
                trace.kv_by_iteration.push(
                    kv.iter()
                        .map(|(&i, &(k, v))| (i, (tape.value(k).clone(), tape.value(v).clone())))
                        .collect(),
                );
            }
            if t < self.cfg.iterations {
                let injected = self.inject_all(tape, emb_cm, &kv, None, inputs.groups, ctx)?;
                let blocks: Vec<Var> = injected.into_values().collect();
                emb_mm = tape.concat_grouped(&blocks, inputs.groups)?;
            }
        }
        Ok(emb_cm)
    }

    /// Stacked X-Fusion and transformer-only comparison architectures.
    pub fn fusion_variant_forward(&self, tape: &mut Tape, inputs: FusionInputs<'_>, ctx: &mut ForwardCtx) -> Result<Var> {
        if inputs.features.is_empty() {
            return Err(XfiError::EmptyModalitySet);
        }
        let groups = inputs.groups;
        let depth = self.cfg.iterations;
        match self.cfg.variant {
            Variant::IterativeSharedBlock => Err(XfiError::Config(
                "fusion_variant_forward does not handle the iterative variant".into(),
            )),
            Variant::StackedFreshKv | Variant::StackedSharedKv => {
                let fresh = self.cfg.variant == Variant::StackedFreshKv;
                let shared_kv = if fresh {
                    None
                } else {
                    Some(self.generate_all_kv(tape, inputs.features, None)?)
                };
                let mut sources = inputs.features.clone();
                let mut emb_mm = self.initial_embedding(tape, inputs)?;
                let mut emb_cm = emb_mm;
                for layer in 1..=depth {
                    emb_cm = cross_modal_forward(tape, self.store, &cm_prefix(Some(layer)), emb_mm, groups, self.cfg, ctx)?;
                    if layer == depth {
                        break;
                    }
                    let kv = match &shared_kv {
                        Some(kv) => kv.clone(),
                        None => self.generate_all_kv(tape, &sources, Some(layer))?,
                    };
                    sources = self.inject_all(tape, emb_cm, &kv, Some(layer), groups, ctx)?;
                    let blocks: Vec<Var> = sources.values().copied().collect();
                    emb_mm = tape.concat_grouped(&blocks, groups)?;
                }
                Ok(emb_cm)
            }
            Variant::TransformerOnly => {
                let mut x = self.initial_embedding(tape, inputs)?;
                for layer in 1..=depth {
                    x = self_attention_block(tape, self.store, &tf_prefix(layer), x, groups, self.cfg, ctx)?;
                }
                tape.adaptive_avg_pool(x, groups, self.cfg.n_f)
            }
        }
    }

    /// Runs whichever driver `cfg.variant` selects.
    pub fn forward(&self, tape: &mut Tape, inputs: FusionInputs<'_>, ctx: &mut ForwardCtx) -> Result<Var> {
        match self.cfg.variant {
            Variant::IterativeSharedBlock => self.xfusion_forward(tape, inputs, ctx, None),
            _ => self.fusion_variant_forward(tape, inputs, ctx),
        }
    }
}

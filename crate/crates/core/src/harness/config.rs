use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{validate_modalities, CombineMode, ModalityConfig, PositionalScope};
use crate::error::{Result, XfiError};
use crate::training::TrainConfig;
use crate::xfusion::{FusionConfig, ModelSpec, TaskKind, TaskSpec, Variant};

/// Named starting point that a config file is merged onto.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Latent dimension `d_z`.
    pub d_z: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub joints: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub task: TaskKind,
    /// Width of the frozen stub's per-token output.
    pub d_hid: usize,
    pub n_f: usize,
    pub d_f: usize,
    pub heads: usize,
    pub scale: f64,
    pub iterations: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
    pub post_norm: bool,
    pub dropout_rate: f64,
    pub positional_encoding: bool,
    pub positional_scope: PositionalScope,
    pub combine_mode: CombineMode,
    pub identity_attn_out: bool,
    pub norm_eps: f64,
}

impl ModelSection {
    fn from_fusion(task: TaskKind, d_hid: usize, f: FusionConfig) -> Self {
        Self {
            task,
            d_hid,
            n_f: f.n_f,
            d_f: f.d_f,
            heads: f.heads,
            scale: f.scale,
            iterations: f.iterations,
            ffn_hidden: f.ffn_hidden,
            variant: f.variant,
            post_norm: f.post_norm,
            dropout_rate: f.dropout_rate,
            positional_encoding: f.positional_encoding,
            positional_scope: f.positional_scope,
            combine_mode: f.combine_mode,
            identity_attn_out: f.identity_attn_out,
            norm_eps: f.norm_eps,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            n_f: self.n_f,
            d_f: self.d_f,
            heads: self.heads,
            scale: self.scale,
            iterations: self.iterations,
            ffn_hidden: self.ffn_hidden,
            variant: self.variant,
            post_norm: self.post_norm,
            dropout_rate: self.dropout_rate,
            positional_encoding: self.positional_encoding,
            positional_scope: self.positional_scope,
            combine_mode: self.combine_mode,
            identity_attn_out: self.identity_attn_out,
            norm_eps: self.norm_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySection {
    pub raw_dim: usize,
    /// Latent dimensions this modality observes.
    pub informative: Vec<usize>,
    pub noise_sigma: f64,
    pub p_exist: f64,
    #[serde(default)]
    pub spatial: bool,
}

/// Probability vectors for the `ablate` command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Explicit vectors, one per cell. When empty, `target` is swept over `levels`.
    #[serde(default)]
    pub probabilities: Vec<Vec<f64>>,
    /// Modality whose probability is swept (default: the last declared modality).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
}

fn default_levels() -> Vec<f64> {
    vec![0.5, 0.7, 0.9]
}

/// Complete experiment description. Modalities keep their declaration order, which is the
/// canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub ablate: AblateSection,
    pub modality: IndexMap<String, ModalitySection>,
}

fn modality(raw_dim: usize, dims: std::ops::Range<usize>, sigma: f64, spatial: bool) -> ModalitySection {
    ModalitySection {
        raw_dim,
        informative: dims.collect(),
        noise_sigma: sigma,
        p_exist: 0.5,
        spatial,
    }
}

impl ExperimentConfig {
    /// Four modalities with overlapping partial views of a 12-dim latent, HPE with 17
    /// joints, batch 16, 2,000 steps.
    pub fn desk() -> Self {
        let mut modalities = IndexMap::new();
        modalities.insert("I".to_string(), modality(24, 0..6, 0.05, false));
        modalities.insert("D".to_string(), modality(24, 3..9, 0.05, false));
        modalities.insert("L".to_string(), modality(24, 6..12, 0.05, true));
        let mut r = modality(24, 0..3, 0.05, false);
        r.informative.extend(9..12);
        modalities.insert("R".to_string(), r);
        Self {
            preset: Preset::Desk,
            seed: 0,
            data: DataSection {
                d_z: 12,
                n_train: 512,
                n_eval: 256,
                joints: 17,
                classes: 8,
            },
            model: ModelSection::from_fusion(TaskKind::Hpe, 16, FusionConfig::desk()),
            train: TrainConfig::default(),
            ablate: AblateSection {
                levels: default_levels(),
                ..AblateSection::default()
            },
            modality: modalities,
        }
    }

    /// The desk experiment at full architecture size: 32 tokens of width 512, 8 heads.
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            model: ModelSection::from_fusion(TaskKind::Hpe, 64, FusionConfig::paper()),
            ..Self::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses `text` and merges it onto a preset: the `preset` argument wins over a
    /// `preset` key in the file, which wins over the desk default. Tables merge key by
    /// key, except `[modality.*]`, which replaces the preset's modality list when present.
    pub fn from_toml_str(text: &str, preset: Option<Preset>) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e| XfiError::Config(format!("{e}")))?;
        let named = match file.get("preset") {
            Some(v) => Some(
                Preset::deserialize(v.clone()).map_err(|e| XfiError::Config(format!("preset: {e}")))?,
            ),
            None => None,
        };
        let base = Self::preset(preset.or(named).unwrap_or_default());
        let mut merged = toml::Table::try_from(&base).map_err(|e| XfiError::Config(e.to_string()))?;
        merge(&mut merged, file);
        if let Some(p) = preset {
            merged.insert("preset".into(), toml::Value::String(p.name().into()));
        }
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| XfiError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, preset: Option<Preset>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, preset)
    }

    /// Canonical text: the fully merged config serialized in field order.
    pub fn canonical_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| XfiError::Config(e.to_string()))
    }

    /// Hex SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_text()?.as_bytes())))
    }

    pub fn modality_ids(&self) -> Vec<String> {
        self.modality.keys().cloned().collect()
    }

    pub fn modality_configs(&self) -> Vec<ModalityConfig> {
        self.modality
            .iter()
            .map(|(id, m)| {
                let mut mask = vec![false; self.data.d_z];
                for &d in &m.informative {
                    if let Some(slot) = mask.get_mut(d) {
                        *slot = true;
                    }
                }
                ModalityConfig {
                    id: id.clone(),
                    raw_dim: m.raw_dim,
                    informative_mask: mask,
                    noise_sigma: m.noise_sigma,
                    p_exist: m.p_exist,
                    is_spatial: m.spatial,
                }
            })
            .collect()
    }

    pub fn task(&self) -> TaskSpec {
        match self.model.task {
            TaskKind::Hpe => TaskSpec::hpe(self.data.joints),
            TaskKind::Har => TaskSpec::har(self.data.classes),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            fusion: self.model.fusion(),
            d_hid: self.model.d_hid,
            task: self.task(),
            modalities: self.modality_configs(),
        }
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn existence_probs(&self) -> Vec<f64> {
        self.modality.values().map(|m| m.p_exist).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (id, m) in &self.modality {
            if let Some(&d) = m.informative.iter().find(|&&d| d >= self.data.d_z) {
                return Err(XfiError::Config(format!(
                    "modality `{id}` lists latent dim {d}, but d_z is {}",
                    self.data.d_z
                )));
            }
        }
        validate_modalities(&self.modality_configs(), self.data.d_z)?;
        if self.data.joints < 3 {
            return Err(XfiError::Config("joints must be at least 3".into()));
        }
        if self.data.classes < 2 {
            return Err(XfiError::Config("classes must be at least 2".into()));
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 || self.data.d_z == 0 {
            return Err(XfiError::Config("d_z, n_train and n_eval must be positive".into()));
        }
        self.model_spec().validate()?;
        self.train.validate()?;
        let n = self.modality.len();
        for p in &self.ablate.probabilities {
            if p.len() != n {
                return Err(XfiError::Config(format!(
                    "ablation vector has {} entries for {n} modalities",
                    p.len()
                )));
            }
        }
        if let Some(t) = &self.ablate.target {
            if !self.modality.contains_key(t) {
                return Err(XfiError::Config(format!("ablation target `{t}` is not a modality")));
            }
        }
        Ok(())
    }

    /// Probability vectors of the ablation cells.
    pub fn ablation_cells(&self) -> Vec<Vec<f64>> {
        if !self.ablate.probabilities.is_empty() {
            return self.ablate.probabilities.clone();
        }
        let base = self.existence_probs();
        let target = match &self.ablate.target {
            Some(t) => self.modality.get_index_of(t).unwrap_or(base.len() - 1),
            None => base.len() - 1,
        };
        self.ablate
            .levels
            .iter()
            .map(|&p| {
                let mut v = base.clone();
                v[target] = p;
                v
            })
            .collect()
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if key != "modality" => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

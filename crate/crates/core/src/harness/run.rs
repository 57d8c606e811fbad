use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, Preset};
use super::data::{generate_synthetic_dataset, SyntheticDataset};
use super::report::{enumerate_subsets, subset_label, write_json, ExperimentReport, ReportMetadata, ReportRow};
use crate::encoding::EncoderStub;
use crate::error::{Result, XfiError};
use crate::tensor::ParameterStore;
use crate::training::{evaluate_subset, train_model, DecisionAverage, FeatureConcat, History, Split};
use crate::xfusion::{TaskModel, Variant, XFiModel};

/// Harness command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Ablate,
    Variants,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Variants => "variants",
        }
    }
}

/// A fusion variant or one of the two baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Fusion(Variant),
    FeatureConcat,
    DecisionAverage,
}

impl ModelKind {
    /// The four fusion variants followed by the two baselines.
    pub fn all() -> Vec<ModelKind> {
        let mut kinds: Vec<_> = Variant::ALL.into_iter().map(ModelKind::Fusion).collect();
        kinds.extend([ModelKind::FeatureConcat, ModelKind::DecisionAverage]);
        kinds
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fusion(v) => v.name(),
            ModelKind::FeatureConcat => "feature-concat",
            ModelKind::DecisionAverage => "decision-average",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| XfiError::Checkpoint(format!("unknown model kind `{s}`")))
    }
}

/// Config, digest and generated data shared by every model of one experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub digest: String,
    pub data: SyntheticDataset,
}

const STUB_PREFIX: &str = "stub.";

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let digest = config.digest()?;
        let data = generate_synthetic_dataset(&config.data_config())?;
        Ok(Self { config, digest, data })
    }

    /// Freshly initialized model of the given kind. Fusion kinds override the configured
    /// variant.
    pub fn build(&self, kind: ModelKind) -> Result<Box<dyn TaskModel>> {
        let mut spec = self.config.model_spec();
        let seed = self.config.seed;
        Ok(match kind {
            ModelKind::Fusion(v) => {
                spec.fusion.variant = v;
                Box::new(XFiModel::new(spec, seed)?)
            }
            ModelKind::FeatureConcat => Box::new(FeatureConcat::new(spec, seed)?),
            ModelKind::DecisionAverage => Box::new(DecisionAverage::new(spec, seed)?),
        })
    }

    /// Builds and trains one model. Fusion models and feature-concat train with the
    /// modality-invariant sampler over `probs`; decision-average members train on their
    /// own modality.
    pub fn train(&self, kind: ModelKind, probs: &[f64]) -> Result<(Box<dyn TaskModel>, Vec<History>)> {
        let cfg = self.config.train_config();
        match kind {
            ModelKind::DecisionAverage => {
                let mut model = DecisionAverage::new(self.config.model_spec(), self.config.seed)?;
                let histories = model.train_members(&self.data.train, &cfg)?;
                Ok((Box::new(model), histories))
            }
            _ => {
                let mut model = self.build(kind)?;
                let history = train_model(model.as_mut(), &self.data.train, probs, &cfg)?;
                Ok((model, vec![history]))
            }
        }
    }

    /// Evaluates every non-empty subset on `split` (in parallel) and returns report rows in
    /// canonical subset order.
    pub fn evaluate(&self, model: &dyn TaskModel, split: &Split) -> Result<Vec<ReportRow>> {
        let ids = self.config.modality_ids();
        let task = self.config.model.task.name();
        let subsets = enumerate_subsets(ids.len());
        let results = subsets
            .par_iter()
            .map(|present| evaluate_subset(model, split, present))
            .collect::<Result<Vec<_>>>()?;
        Ok(subsets
            .iter()
            .zip(results)
            .flat_map(|(present, metrics)| {
                let subset = subset_label(&ids, present);
                metrics.into_iter().map(move |(metric, value)| ReportRow {
                    task: task.to_string(),
                    subset: subset.clone(),
                    metric: metric.to_string(),
                    value,
                })
            })
            .collect())
    }

    pub fn report(&self, command: Command, kind: ModelKind, probs: &[f64], rows: Vec<ReportRow>) -> ExperimentReport {
        ExperimentReport {
            metadata: ReportMetadata {
                command: command.name().into(),
                preset: self.config.preset.name().into(),
                seed: self.config.seed,
                model: kind.name().into(),
                task: self.config.model.task.name().into(),
                config_digest: self.digest.clone(),
                probabilities: probs.to_vec(),
            },
            rows,
        }
    }

    pub fn checkpoint(&self, kind: ModelKind, model: &dyn TaskModel) -> Checkpoint {
        let mut arrays: Vec<_> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (id, stub) in self.config.modality_ids().iter().zip(model.stubs()) {
            arrays.push((format!("{STUB_PREFIX}{id}"), stub.matrix().clone()));
        }
        Checkpoint {
            digest: self.digest.clone(),
            kind: kind.name().into(),
            arrays,
        }
    }

    /// Rebuilds a model from a checkpoint written for this experiment's config.
    pub fn restore(&self, ck: &Checkpoint) -> Result<(ModelKind, Box<dyn TaskModel>)> {
        if ck.digest != self.digest {
            return Err(XfiError::DigestMismatch {
                checkpoint: ck.digest.clone(),
                config: self.digest.clone(),
            });
        }
        let kind = ModelKind::parse(&ck.kind)?;
        let mut spec = self.config.model_spec();
        let dims = spec.encoder_dims();
        let mut params = ParameterStore::new();
        let mut stubs = Vec::new();
        for id in self.config.modality_ids() {
            let name = format!("{STUB_PREFIX}{id}");
            let m = ck
                .get(&name)
                .ok_or_else(|| XfiError::Checkpoint(format!("missing array `{name}`")))?;
            stubs.push(EncoderStub::from_matrix(m.clone(), dims.n_f, dims.d_hid)?);
        }
        for (name, t) in &ck.arrays {
            if !name.starts_with(STUB_PREFIX) {
                params.insert(name.clone(), t.clone())?;
            }
        }
        let expected = self.build(kind)?;
        let same_layout = expected.params().len() == params.len()
            && expected
                .params()
                .iter()
                .all(|(n, t)| params.get(n).map(|p| p.shape() == t.shape()).unwrap_or(false));
        if !same_layout {
            return Err(XfiError::Checkpoint(format!(
                "parameters do not match a `{}` model for this config",
                kind.name()
            )));
        }
        let model: Box<dyn TaskModel> = match kind {
            ModelKind::Fusion(v) => {
                spec.fusion.variant = v;
                Box::new(XFiModel::from_parts(spec, params, stubs)?)
            }
            ModelKind::FeatureConcat => Box::new(FeatureConcat::from_parts(spec, params, stubs)?),
            ModelKind::DecisionAverage => Box::new(DecisionAverage::from_parts(spec, params, stubs)?),
        };
        Ok((kind, model))
    }
}

/// Where a command reads its config and writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl RunOptions {
    /// Config file (or the preset alone) with the seed override applied.
    pub fn load_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path, self.preset)?,
            None => ExperimentConfig::preset(self.preset.unwrap_or_default()),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a command produced. Wall time is returned here and written to
/// `timing.json`, never into the report files, which stay byte-deterministic.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// `(cell name, report)`; cell names are empty for `eval`.
    pub reports: Vec<(String, ExperimentReport)>,
    pub histories: Vec<(String, Vec<History>)>,
    pub wall_time: Duration,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    command: &'a str,
    preset: &'a str,
    seed: u64,
    model: &'a str,
    task: &'a str,
    config_digest: &'a str,
    probabilities: &'a [f64],
    steps: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    occurrence_counts: Vec<Vec<u64>>,
}

fn history_csv(ids: &[String], histories: &[History]) -> String {
    let mut out = String::from("run,step,loss,subset\n");
    for (run, h) in histories.iter().enumerate() {
        for e in &h.entries {
            let _ = writeln!(out, "{run},{},{:?},{}", e.step, e.loss, subset_label(ids, &e.present));
        }
    }
    out
}

/// Trains one model, writes its checkpoint, history and training summary into `dir`.
fn train_into(exp: &Experiment, kind: ModelKind, probs: &[f64], dir: &Path) -> Result<(Box<dyn TaskModel>, Vec<History>)> {
    std::fs::create_dir_all(dir)?;
    let (model, histories) = exp.train(kind, probs)?;
    exp.checkpoint(kind, model.as_ref()).save(&dir.join("model.ckpt"))?;
    let ids = exp.config.modality_ids();
    std::fs::write(dir.join("history.csv"), history_csv(&ids, &histories))?;
    let window = 50;
    let summary = TrainSummary {
        command: "train",
        preset: exp.config.preset.name(),
        seed: exp.config.seed,
        model: kind.name(),
        task: exp.config.model.task.name(),
        config_digest: &exp.digest,
        probabilities: probs,
        steps: exp.config.train.steps,
        initial_loss: histories.first().and_then(|h| h.initial_loss(window)),
        final_loss: histories.first().and_then(|h| h.final_loss(window)),
        occurrence_counts: histories.iter().map(|h| h.occurrences.counts.clone()).collect(),
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    Ok((model, histories))
}

fn train_and_eval(exp: &Experiment, command: Command, kind: ModelKind, probs: &[f64], dir: &Path) -> Result<(ExperimentReport, Vec<History>)> {
    let (model, histories) = train_into(exp, kind, probs, dir)?;
    let rows = exp.evaluate(model.as_ref(), &exp.data.eval)?;
    let report = exp.report(command, kind, probs, rows);
    report.write(dir)?;
    Ok((report, histories))
}

#[derive(Serialize)]
struct CellSummary {
    cell: String,
    model: String,
    probabilities: Vec<f64>,
}

/// Runs `command` and writes its artifacts under `opts.out`:
///
/// * `train`: `model.ckpt`, `history.csv`, `train_summary.json`
/// * `eval`: reads `model.ckpt`; writes `report.csv`, `summary.json`
/// * `ablate`: `ablate/cell-<k>/` per probability vector, plus `ablate/cells.json`
/// * `variants`: `variants/<model>/` per model, plus `variants/cells.json`
pub fn run_experiment(command: Command, opts: &RunOptions) -> Result<RunOutcome> {
    run_with_config(command, opts.load_config()?, &opts.out)
}

/// [`run_experiment`] with an already loaded config.
pub fn run_with_config(command: Command, config: ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let start = Instant::now();
    let exp = Experiment::new(config)?;
    std::fs::create_dir_all(out)?;
    let probs = exp.config.existence_probs();
    let mut outcome = RunOutcome {
        reports: Vec::new(),
        histories: Vec::new(),
        wall_time: Duration::ZERO,
    };
    let configured = ModelKind::Fusion(exp.config.model.variant);
    match command {
        Command::Train => {
            let (_, histories) = train_into(&exp, configured, &probs, out)?;
            outcome.histories.push((String::new(), histories));
        }
        Command::Eval => {
            let path = out.join("model.ckpt");
            if !path.exists() {
                return Err(XfiError::Checkpoint(format!(
                    "no checkpoint at {}; run `train` first",
                    path.display()
                )));
            }
            let ck = Checkpoint::load(&path)?;
            let (kind, model) = exp.restore(&ck)?;
            let rows = exp.evaluate(model.as_ref(), &exp.data.eval)?;
            let report = exp.report(command, kind, &probs, rows);
            report.write(out)?;
            outcome.reports.push((String::new(), report));
        }
        Command::Ablate | Command::Variants => {
            let (root, cells): (PathBuf, Vec<(String, ModelKind, Vec<f64>)>) = if command == Command::Ablate {
                let cells = exp
                    .config
                    .ablation_cells()
                    .into_iter()
                    .enumerate()
                    .map(|(k, p)| (format!("cell-{k}"), configured, p))
                    .collect();
                (out.join("ablate"), cells)
            } else {
                let cells = ModelKind::all()
                    .into_iter()
                    .map(|k| (k.name().to_string(), k, probs.clone()))
                    .collect();
                (out.join("variants"), cells)
            };
            let results = cells
                .par_iter()
                .map(|(name, kind, p)| train_and_eval(&exp, command, *kind, p, &root.join(name)))
                .collect::<Result<Vec<_>>>()?;
            let index: Vec<CellSummary> = cells
                .iter()
                .map(|(name, kind, p)| CellSummary {
                    cell: name.clone(),
                    model: kind.name().into(),
                    probabilities: p.clone(),
                })
                .collect();
            write_json(&root.join("cells.json"), &index)?;
            for ((name, _, _), (report, histories)) in cells.into_iter().zip(results) {
                outcome.reports.push((name.clone(), report));
                outcome.histories.push((name, histories));
            }
        }
    }
    outcome.wall_time = start.elapsed();
    write_json(
        &out.join("timing.json"),
        &serde_json::json!({ "command": command.name(), "wall_time_seconds": outcome.wall_time.as_secs_f64() }),
    )?;
    Ok(outcome)
}

//! Experiment orchestration: the condition matrix, seed derivation, the
//! checkpoint cache, and report emission.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::{load_pretrained, pretrain, save_pretrained, write_log_csv, PretrainConfig};
use crate::encoder::{init_encoder, EncoderParams};
use crate::envsim::{collect_trajectories, Category, Split, TrajectoryDataset, VariableSpec};
use crate::numerics::AdamConfig;
use crate::probe::{evaluate, filter_variables, train_probes, ConditionReport, ProbeConfig, VariableScore};
use crate::{Error, Result};

pub use config::{derive_seed, Condition, ExperimentConfig, StepBudgets, TrainingBudget};
pub use report::{emit_report, markdown, rows_from_json, rows_to_json, summary_rows, ReportFormat};

/// Environment variable that overrides the checkpoint cache location.
pub const CACHE_ENV: &str = "MSTDIM_CACHE_DIR";

/// The three splits for one seed index.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub pretrain: TrajectoryDataset,
    pub probe_train: TrajectoryDataset,
    pub probe_test: TrajectoryDataset,
}

/// Seed shared by every condition at `index`, so conditions see the same
/// data and pretraining initialization.
pub fn data_seed(config: &ExperimentConfig, index: usize) -> u64 {
    derive_seed(config.master_seed, "data", index)
}

pub fn pretrain_seed(config: &ExperimentConfig, index: usize) -> u64 {
    derive_seed(config.master_seed, "pretrain", index)
}

/// Seed of one (condition, index) cell; drives probe training.
pub fn cell_seed(config: &ExperimentConfig, condition: &Condition, index: usize) -> u64 {
    derive_seed(config.master_seed, &condition.to_string(), index)
}

/// Collects one split, or ingests it from `<data.dir>/<split>`.
pub fn load_split(config: &ExperimentConfig, index: usize, split: Split) -> Result<TrajectoryDataset> {
    let n = match split {
        Split::Pretrain => config.steps.pretrain,
        Split::ProbeTrain => config.steps.probe_train,
        Split::ProbeTest => config.steps.probe_test,
    };
    match &config.data_dir {
        Some(dir) => {
            let path = dir.join(split.key());
            let d = TrajectoryDataset::ingest(&path)?;
            if d.split != split {
                return Err(Error::config(format!("{} holds the {} split", path.display(), d.split.key())));
            }
            Ok(d)
        }
        None => collect_trajectories(&config.env, data_seed(config, index), n, split),
    }
}

pub fn load_datasets(config: &ExperimentConfig, index: usize) -> Result<Datasets> {
    Ok(Datasets {
        pretrain: load_split(config, index, Split::Pretrain)?,
        probe_train: load_split(config, index, Split::ProbeTrain)?,
        probe_test: load_split(config, index, Split::ProbeTest)?,
    })
}

/// On-disk store of pretrained checkpoints and finished cell reports.
#[derive(Debug)]
pub struct Cache {
    pub dir: PathBuf,
    /// Lookups answered from disk since creation.
    pub hits: usize,
    /// Pretraining or probe runs actually executed.
    pub trainings: usize,
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Cache {
            dir: dir.into(),
            hits: 0,
            trainings: 0,
        }
    }

    /// `$MSTDIM_CACHE_DIR` if set, else `<out>/cache`.
    pub fn for_config(config: &ExperimentConfig) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(d) if !d.is_empty() => Cache::new(PathBuf::from(d)),
            _ => Cache::new(config.out.join("cache")),
        }
    }

    fn ensure_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }

    pub fn checkpoint_path(&self, config: &ExperimentConfig, ratio: f64, seed: u64) -> PathBuf {
        self.dir.join(format!("pretrain-{}-{seed:016x}.ckpt", config.pretrain_key(ratio)))
    }

    fn cell_path(&self, config: &ExperimentConfig, condition: &Condition, index: usize) -> PathBuf {
        let mut c = config.clone();
        // Matrix composition and output location do not affect a cell.
        c.conditions = vec![*condition];
        c.seeds = 1;
        c.out = PathBuf::new();
        self.dir.join(format!("cell-{}-{index}.json", c.fingerprint()))
    }
}

/// Writes through a temporary file so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Pretrained encoder for `ratio`, from the cache when available.
pub fn pretrained_encoder(
    config: &ExperimentConfig,
    data: &TrajectoryDataset,
    ratio: f64,
    index: usize,
    cache: &mut Cache,
) -> Result<EncoderParams<f32>> {
    let seed = pretrain_seed(config, index);
    let path = cache.checkpoint_path(config, ratio, seed);
    let enc_cfg = config.encoder_for_env();
    if path.exists() {
        cache.hits += 1;
        return Ok(load_pretrained(&path, &enc_cfg)?.0);
    }
    cache.ensure_dir()?;
    let pcfg = PretrainConfig {
        updates: config.pretrain.updates,
        batch_size: config.pretrain.batch_size,
        adam: AdamConfig {
            learning_rate: config.pretrain.learning_rate,
            ..AdamConfig::default()
        },
        mask: config.pretrain_mask(ratio),
        mask_positives: config.mask_positives,
        log_every: config.pretrain_log_every,
        seed,
        abort_checkpoint: Some(path.with_extension("abort.ckpt")),
    };
    let out = pretrain(data, &enc_cfg, &pcfg)?;
    cache.trainings += 1;
    let tmp = path.with_extension("part");
    save_pretrained(&tmp, &out.encoder, &out.scorer)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    write_log_csv(&path.with_extension("log.csv"), &out.log)?;
    Ok(out.encoder)
}

/// Runs one cell: (pretrain) -> train probes -> evaluate.
pub fn run_condition(
    condition: &Condition,
    config: &ExperimentConfig,
    index: usize,
    data: &Datasets,
    cache: &mut Cache,
) -> Result<ConditionReport> {
    let seed = cell_seed(config, condition, index);
    let cell_path = cache.cell_path(config, condition, index);
    let fingerprint = config.fingerprint();
    if let Ok(text) = fs::read_to_string(&cell_path) {
        if let Ok(report) = ConditionReport::from_json(&text) {
            cache.hits += 1;
            return Ok(report.tagged(&condition.to_string(), seed, &fingerprint));
        }
    }
    let variables = filter_variables(&data.probe_train, config.entropy_threshold)?;
    let encoder = match condition.pretrain_ratio() {
        Some(ratio) => pretrained_encoder(config, &data.pretrain, ratio, index, cache)?,
        None => init_encoder::<f32>(&config.encoder_for_env(), pretrain_seed(config, index))?,
    };
    let report = probe_condition(condition, config, &encoder, &variables, data, seed)?;
    cache.trainings += 1;
    cache.ensure_dir()?;
    write_atomic(&cell_path, report.to_json().as_bytes())?;
    Ok(report.tagged(&condition.to_string(), seed, &fingerprint))
}

/// Probe training and evaluation for a cell whose encoder is already known.
pub fn probe_condition(
    condition: &Condition,
    config: &ExperimentConfig,
    encoder: &EncoderParams<f32>,
    variables: &[VariableSpec],
    data: &Datasets,
    seed: u64,
) -> Result<ConditionReport> {
    let ratio = condition.probe_ratio(config.probe_mask_ratio);
    let pcfg = ProbeConfig {
        updates: config.probe.updates,
        batch_size: config.probe.batch_size,
        adam: AdamConfig {
            learning_rate: config.probe.learning_rate,
            ..AdamConfig::default()
        },
        seed,
    };
    let model = train_probes(
        encoder,
        &data.probe_train,
        variables,
        &config.probe_train_mask(ratio),
        condition.frozen(),
        &pcfg,
    )?;
    let report = evaluate(&model.encoder, &model.heads, &data.probe_test, &config.probe_test_mask(ratio), seed)?;
    Ok(report.tagged(&condition.to_string(), seed, &config.fingerprint()))
}

/// One (condition, seed index) entry of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub condition: String,
    pub index: usize,
    pub seed: u64,
    pub report: Option<ConditionReport>,
    /// Cause of failure when `report` is absent.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: Category,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub f1: f64,
    pub f1_std: f64,
}

/// Across-seed statistics of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub f1: f64,
    pub f1_std: f64,
    pub categories: Vec<CategorySummary>,
    /// Per-variable means over seeds.
    pub variables: Vec<VariableScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub fingerprint: String,
    pub environment: String,
    pub master_seed: u64,
    pub seeds: usize,
    pub mask_fill: String,
    pub f1_averaging: String,
    pub cells: Vec<MatrixCell>,
    pub summaries: Vec<ConditionSummary>,
}

impl MatrixResult {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.report.is_none()).count()
    }

    pub fn summary(&self, condition: &str) -> Option<&ConditionSummary> {
        self.summaries.iter().find(|s| s.condition == condition)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad matrix JSON: {e}")))
    }

    /// Recomputes summaries from the cells, in condition order.
    pub fn summarize(&mut self, conditions: &[String]) {
        self.summaries = conditions
            .iter()
            .map(|name| {
                let cells: Vec<&MatrixCell> = self.cells.iter().filter(|c| &c.condition == name).collect();
                let ok: Vec<&ConditionReport> = cells.iter().filter_map(|c| c.report.as_ref()).collect();
                summarize_condition(name, &ok, cells.len() - ok.len())
            })
            .collect();
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize_condition(name: &str, reports: &[&ConditionReport], failed: usize) -> ConditionSummary {
    let col = |f: &dyn Fn(&ConditionReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(|r| f(r)).collect() };
    let (accuracy, accuracy_std) = mean_std(&col(&|r| Some(r.mean_accuracy)));
    let (f1, f1_std) = mean_std(&col(&|r| Some(r.mean_f1)));
    let categories = Category::ALL
        .into_iter()
        .filter_map(|c| {
            let acc = col(&|r| r.category(c).map(|s| s.accuracy));
            if acc.is_empty() {
                return None;
            }
            let (accuracy, accuracy_std) = mean_std(&acc);
            let (f1, f1_std) = mean_std(&col(&|r| r.category(c).map(|s| s.f1)));
            Some(CategorySummary {
                category: c,
                accuracy,
                accuracy_std,
                f1,
                f1_std,
            })
        })
        .collect();
    let mut variables: Vec<VariableScore> = Vec::new();
    for r in reports {
        for v in &r.variables {
            if !variables.iter().any(|x| x.name == v.name) {
                let acc = col(&|r| r.variables.iter().find(|x| x.name == v.name).map(|x| x.accuracy));
                let f1s = col(&|r| r.variables.iter().find(|x| x.name == v.name).map(|x| x.f1));
                variables.push(VariableScore {
                    name: v.name.clone(),
                    category: v.category,
                    accuracy: mean_std(&acc).0,
                    f1: mean_std(&f1s).0,
                });
            }
        }
    }
    ConditionSummary {
        condition: name.to_string(),
        seeds_ok: reports.len(),
        seeds_failed: failed,
        accuracy,
        accuracy_std,
        f1,
        f1_std,
        categories,
        variables,
    }
}

/// Runs every (condition, seed index) cell. Failures are recorded in the
/// result rather than returned; per-cell reports go to `<out>/cells`.
pub fn run_matrix(config: &ExperimentConfig, cache: &mut Cache, progress: &mut dyn FnMut(&str)) -> Result<MatrixResult> {
    config.validate()?;
    let cells_dir = config.out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let mut cells = Vec::new();
    for index in 0..config.seeds {
        let data = load_datasets(config, index);
        for condition in &config.conditions {
            let seed = cell_seed(config, condition, index);
            let outcome = data
                .as_ref()
                .map_err(|e| Error::config(format!("dataset: {e}")))
                .and_then(|d| run_condition(condition, config, index, d, cache));
            let name = condition.to_string();
            let cell = match outcome {
                Ok(report) => {
                    let stem = cells_dir.join(format!("{name}-{index}"));
                    write_atomic(&stem.with_extension("json"), report.to_json().as_bytes())?;
                    write_atomic(&stem.with_extension("csv"), report.to_csv().as_bytes())?;
                    progress(&format!(
                        "{name} seed {index}: accuracy {:.3}, F1 {:.3}",
                        report.mean_accuracy, report.mean_f1
                    ));
                    MatrixCell {
                        condition: name,
                        index,
                        seed,
                        report: Some(report),
                        error: None,
                    }
                }
                Err(e) => {
                    progress(&format!("{name} seed {index}: FAILED: {e}"));
                    MatrixCell {
                        condition: name,
                        index,
                        seed,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    let mut result = MatrixResult {
        fingerprint: config.fingerprint(),
        environment: config.env.name.clone(),
        master_seed: config.master_seed,
        seeds: config.seeds,
        mask_fill: config.to_pairs()["mask.fill"].clone(),
        f1_averaging: crate::probe::F1_AVERAGING.to_string(),
        cells,
        summaries: Vec::new(),
    };
    let names: Vec<String> = config.conditions.iter().map(|c| c.to_string()).collect();
    result.summarize(&names);
    Ok(result)
}

#[cfg(test)]
mod tests;

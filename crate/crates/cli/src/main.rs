use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mstdim_core::contrastive::write_log_csv;
use mstdim_core::envsim::Split;
use mstdim_core::runner::{
    emit_report, load_datasets, load_split, pretrained_encoder, run_condition, run_matrix, Cache, Condition,
    ExperimentConfig, MatrixResult, ReportFormat,
};

/// Masked spatiotemporal contrastive pretraining and probing.
#[derive(Parser)]
#[command(name = "mstdim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from full-size frames and step counts instead of the desk profile.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the pretrain, probe_train and probe_test splits.
    Collect(Common),
    /// Pretrain an encoder and write its checkpoint and training log.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Anchor mask ratio (overrides `mask.ratio`).
        #[arg(long)]
        mask_ratio: Option<f64>,
    },
    /// Run a single condition for the first seed and write its report.
    Probe {
        #[command(flatten)]
        common: Common,
        /// e.g. `non_observable` or `pretrain_masked(0.4)`.
        #[arg(long)]
        condition: String,
        /// Probe mask ratio (overrides `probe.mask_ratio`).
        #[arg(long)]
        mask_ratio: Option<f64>,
    },
    /// Run every (condition, seed) cell and emit all report formats.
    Matrix {
        #[command(flatten)]
        common: Common,
        /// Restrict to these conditions (repeatable).
        #[arg(long)]
        condition: Vec<String>,
    },
    /// Re-emit reports from `<out>/report.json`.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// csv, json, markdown or svg_bars; all when omitted.
        #[arg(long)]
        format: Vec<String>,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let base = if common.paper_scale {
        ExperimentConfig::paper()
    } else {
        ExperimentConfig::desk()
    };
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::parse(&text, base)?
        }
        None => base,
    };
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn emit_all(result: &MatrixResult, formats: &[ReportFormat], out: &Path) -> Result<()> {
    for &f in formats {
        for p in emit_report(result, f, out)? {
            eprintln!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Collect(common) => {
            let config = resolve(&common)?;
            create(&config.out)?;
            let data = load_datasets(&config, 0)?;
            for d in [&data.pretrain, &data.probe_train, &data.probe_test] {
                let dir = config.out.join(d.split.key());
                d.save(&dir)?;
                eprintln!("{}: {} frames in {} episodes -> {}", d.split.key(), d.len(), d.episodes().len(), dir.display());
            }
        }
        Command::Pretrain { common, mask_ratio } => {
            let mut config = resolve(&common)?;
            if let Some(p) = mask_ratio {
                config.mask.ratio = p;
                config.validate()?;
            }
            create(&config.out)?;
            let data = load_split(&config, 0, Split::Pretrain)?;
            let mut cache = Cache::for_config(&config);
            pretrained_encoder(&config, &data, config.mask.ratio, 0, &mut cache)?;
            let ckpt = cache.checkpoint_path(&config, config.mask.ratio, mstdim_core::runner::pretrain_seed(&config, 0));
            fs::copy(&ckpt, config.out.join("encoder.ckpt")).context("copying checkpoint")?;
            let log = ckpt.with_extension("log.csv");
            if log.exists() {
                fs::copy(&log, config.out.join("train_log.csv")).context("copying training log")?;
            } else {
                write_log_csv(&config.out.join("train_log.csv"), &[])?;
            }
            eprintln!(
                "encoder -> {} ({})",
                config.out.join("encoder.ckpt").display(),
                if cache.hits > 0 { "cached" } else { "trained" }
            );
        }
        Command::Probe {
            common,
            condition,
            mask_ratio,
        } => {
            let mut config = resolve(&common)?;
            if let Some(p) = mask_ratio {
                config.probe_mask_ratio = p;
                config.validate()?;
            }
            let condition = Condition::parse(&condition)?;
            create(&config.out)?;
            let data = load_datasets(&config, 0)?;
            let mut cache = Cache::for_config(&config);
            let report = run_condition(&condition, &config, 0, &data, &mut cache)?;
            fs::write(config.out.join("report.json"), report.to_json())?;
            fs::write(config.out.join("report.csv"), report.to_csv())?;
            println!("{condition}: accuracy {:.3}, F1 {:.3}", report.mean_accuracy, report.mean_f1);
        }
        Command::Matrix { common, condition } => {
            let mut config = resolve(&common)?;
            if !condition.is_empty() {
                config.conditions = condition.iter().map(|c| Condition::parse(c)).collect::<Result<_, _>>()?;
            }
            create(&config.out)?;
            fs::write(config.out.join("config.txt"), config.to_text())?;
            let mut cache = Cache::for_config(&config);
            let result = run_matrix(&config, &mut cache, &mut |line| eprintln!("{line}"))?;
            emit_all(&result, &ReportFormat::ALL, &config.out)?;
            eprintln!("{} cache hit(s), {} training run(s)", cache.hits, cache.trainings);
            let failed = result.failed_cells();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { out, format } => {
            let path = out.join("report.json");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let result = MatrixResult::from_json(&text)?;
            let formats = if format.is_empty() {
                ReportFormat::ALL.to_vec()
            } else {
                format.iter().map(|f| ReportFormat::parse(f)).collect::<Result<_, _>>()?
            };
            if formats.is_empty() {
                bail!("no report format selected");
            }
            emit_all(&result, &formats, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

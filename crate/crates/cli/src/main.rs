//! `jointpred`: synthesize cohorts, run the joint model, predict and report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use jointpred::domain::{validate_config, FusionMode, PipelineConfig, ValidatedConfig};
use jointpred::ensemble::{run_joint_model, Cohort, EnsembleModel};
use jointpred::ingest::{RangeRules, Universe};
use jointpred::report::{self, MODEL_DIR, MODEL_FILE};
use jointpred::synth::{generate, CohortSpec};
use jointpred::{par, Error, Result};

#[derive(Parser)]
#[command(name = "jointpred", version, about = "Joint prediction of psychological constructs from sensor data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic cohort.
    Synth {
        /// Cohort spec (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the cohort CSV files.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the joint model on a data directory.
    Run {
        #[command(flatten)]
        common: Common,
        /// Directory of modality and ground-truth CSV files.
        #[arg(long)]
        data: PathBuf,
        /// Directory for reports and models.
        #[arg(long)]
        out: PathBuf,
        /// Stop after the first pass.
        #[arg(long)]
        skip_proxy_pass: bool,
        /// How modality blocks are combined.
        #[arg(long, value_enum)]
        fusion_mode: Option<Fusion>,
    },
    /// Predict every construct for a new data directory.
    Predict {
        /// Run directory or model directory.
        #[arg(long)]
        models: PathBuf,
        /// Directory of modality CSV files.
        #[arg(long)]
        data: PathBuf,
        /// Directory for predictions.csv.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Regenerate the report files of a finished run.
    Report {
        /// Run directory.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the regenerated reports.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Feature,
    #[value(name = "per_modality_mean")]
    PerModalityMean,
}

fn load_config(common: &Common, skip_proxy: bool, fusion: Option<Fusion>) -> Result<ValidatedConfig> {
    let mut raw = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        raw.pipeline.seed = Some(s);
    }
    let mut cfg = validate_config(raw)?;
    if skip_proxy {
        cfg.proxy_pass = false;
    }
    if let Some(f) = fusion {
        cfg.fusion_mode = match f {
            Fusion::Feature => FusionMode::Feature,
            Fusion::PerModalityMean => FusionMode::PerModalityMean,
        };
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match config {
        Some(p) => CohortSpec::load(p)?,
        None => CohortSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    mkdir(out)?;
    generate(&spec)?.write_dir(out)
}

fn cmd_run(cfg: &ValidatedConfig, data: &Path, out: &Path) -> Result<()> {
    let rules = RangeRules::new(cfg.screening_rules.clone());
    let universe = Universe::load_dir(data, &cfg.constructs, &rules, true)?;
    let cohort = Cohort::build(&universe, cfg)?;
    let (run, model) = run_joint_model(&cohort, cfg)?;
    mkdir(out)?;
    let metrics = report::write_run(out, &run, &model)?;
    for c in run.results.keys() {
        if let Some((m, b)) = metrics.mean_smape(*c) {
            log::info!("{c}: smape {m:.2} baseline {b:.2}");
        }
    }
    Ok(())
}

fn cmd_predict(models: &Path, data: &Path, out: &Path) -> Result<()> {
    let nested = models.join(MODEL_DIR).join(MODEL_FILE);
    let path = if nested.exists() { nested } else { models.join(MODEL_FILE) };
    let model = EnsembleModel::load(&path)?;
    let cfg = &model.config;
    let rules = RangeRules::new(cfg.screening_rules.clone());
    let universe = Universe::load_dir(data, &cfg.constructs, &rules, false)?;
    let cohort = Cohort::build(&universe, cfg)?;
    let preds = model.predict(&cohort)?;
    mkdir(out)?;
    let path = out.join("predictions.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    report::write_predictions(std::io::BufWriter::new(f), &cohort.participants, &preds)
}

fn cmd_report(data: &Path, out: &Path) -> Result<()> {
    let run = report::load_run(data)?;
    let model = EnsembleModel::load(&data.join(MODEL_DIR).join(MODEL_FILE))?;
    mkdir(out)?;
    report::write_reports(out, &run, &model).map(|_| ())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Command::Run {
            common,
            data,
            out,
            skip_proxy_pass,
            fusion_mode,
        } => {
            let cfg = load_config(&common, skip_proxy_pass, fusion_mode)?;
            par::with_workers(common.workers, || cmd_run(&cfg, &data, &out))
        }
        Command::Predict {
            models,
            data,
            out,
            workers,
        } => par::with_workers(workers, || cmd_predict(&models, &data, &out)),
        Command::Report { data, out } => cmd_report(&data, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "path": e.path(),
            });
            eprintln!("{record}");
            ExitCode::from(2)
        }
    }
}

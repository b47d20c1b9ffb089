use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use coperc_core::Modality;
use coperc_harness::data::Regime;
use coperc_harness::pipeline::{self, RunDir, Sweep, TrainRequest};
use coperc_harness::{gradcheck, Config, HarnessError, Result};

#[derive(Parser)]
#[command(name = "coperc", version, about = "Hetero-modal cooperative perception: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// TOML config (desk profile when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the dataset and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    #[value(name = "v2v-c")]
    V2vC,
    #[value(name = "v2v-l")]
    V2vL,
    #[value(name = "v2v-h")]
    V2vH,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::V2vC => Regime::V2vC,
            RegimeArg::V2vL => Regime::V2vL,
            RegimeArg::V2vH => Regime::V2vH,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Ratio,
    Agents,
    Compression,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Camera,
    Lidar,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train/val/test scene splits.
    Generate,
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage 1 only; both modalities when omitted.
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
        /// Continue from the stage's checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate No/Late/HM-ViT fusion on the test split.
    Eval {
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
        #[arg(long, value_enum)]
        sweep: Option<SweepArg>,
        /// Defaults to the stage-2 checkpoint at the configured rate.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw one test scene as SVG.
    Render {
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, value_enum, default_value = "v2v-h")]
        regime: RegimeArg,
        /// Detections CSV exported by `eval`.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Generate one scene and run a single fusion pass.
    FuseOnce {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.dataset.seed = s;
        cfg.training.seed = s;
        cfg.validate()?;
    }
    let run = RunDir(cli.out.clone());
    match cli.cmd {
        Cmd::Generate => {
            let m = pipeline::generate(&cfg, &run)?;
            println!("wrote {} train / {} val / {} test scenes to {}", m.train, m.val, m.test, run.dataset().display());
        }
        Cmd::Train { stage, modality, resume, max_steps } => {
            let modality = modality.map(|m| match m {
                ModalityArg::Camera => Modality::Camera,
                ModalityArg::Lidar => Modality::Lidar,
            });
            if stage == 2 && modality.is_some() {
                return Err(HarnessError::Validation("--modality applies to stage 1 only".into()));
            }
            for p in pipeline::train(&cfg, &run, &TrainRequest { stage, modality, resume, max_steps })? {
                println!("wrote {}", p.display());
            }
        }
        Cmd::Eval { regime, sweep, checkpoint } => {
            let sweep = sweep.map(|s| match s {
                SweepArg::Ratio => Sweep::Ratio,
                SweepArg::Agents => Sweep::Agents,
                SweepArg::Compression => Sweep::Compression,
            });
            let report = pipeline::evaluate(&cfg, &run, regime.map(Into::into), sweep, checkpoint.as_deref())?;
            print!("{}", report.to_csv()?);
        }
        Cmd::Render { scene, regime, detections } => {
            let p = pipeline::render(&cfg, &run, scene, regime.into(), detections.as_deref())?;
            println!("wrote {}", p.display());
        }
        Cmd::Gradcheck { inject_fault } => {
            let report = gradcheck::run_suite(inject_fault)?;
            for r in &report.results {
                println!("{:<5} {:<24} max rel err {:.3e} ({} coords)", if r.passed { "ok" } else { "FAIL" }, r.name, r.max_rel_err, r.checked);
            }
            println!("{} checks in {:.1} s", report.results.len(), report.seconds);
            if !report.passed() {
                return Err(HarnessError::Validation(format!(
                    "gradient check failed (threshold {:e})",
                    gradcheck::THRESHOLD
                )));
            }
        }
        Cmd::FuseOnce { checkpoint } => {
            let seed = cli.seed.unwrap_or(cfg.dataset.seed);
            let r = pipeline::fuse_once(&cfg, seed, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

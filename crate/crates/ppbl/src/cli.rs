//! Command-line surface: each training phase is a replayable subcommand
//! with all state on disk, so offline and online phases can be re-run
//! independently.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use crate::adversary::{AttackMode, StageHook};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::evaluate_asr;
use crate::error::{Error, Result};
use crate::experiments::{
    self, alignment_streams, build_partition, clean_streams, eval_stream, harmful_streams,
    pretrain_base, LabeledRun,
};
use crate::metrics::MetricsLog;
use crate::model::ModelParams;
use crate::partition::compute_task_vector;
use crate::pipeline::{run_monolithic, run_sft};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ppbl",
    version,
    about = "Pipeline-parallel training simulator and backdoor-injection laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Script the shared base model on the clean task and checkpoint it
    PretrainBase {
        /// Experiment config file (key = value); defaults apply if omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint path (.ppbl)
        #[arg(long)]
        out: PathBuf,
        /// Optional metrics CSV path
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Offline phase: train the attacker's surrogate from a base checkpoint
    TrainSurrogate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base model checkpoint
        #[arg(long)]
        base: PathBuf,
        /// Output surrogate checkpoint path (.ppbl)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Online phase: stage-partitioned SFT, optionally under attack
    RunSft {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base: PathBuf,
        /// Surrogate checkpoint; required for iterative/one-shot attacks
        #[arg(long)]
        surrogate: Option<PathBuf>,
        /// Output checkpoint path (.ppbl)
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV path
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Post-hoc safety alignment of a fine-tuned checkpoint
    Align {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to align
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print triggered/untriggered ASR and safety score for a checkpoint
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report only the triggered-prompt numbers
        #[arg(long)]
        trigger: bool,
        /// Machine-readable output
        #[arg(long)]
        json: bool,
    },
    /// Run the (scale, frequency) grid plus clean and one-shot baselines
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated injection scales
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5")]
        w: Vec<f64>,
        /// Comma-separated injection periods
        #[arg(long, value_delimiter = ',', default_value = "25,50")]
        fq: Vec<u64>,
        /// Base checkpoint; pretrained fresh when omitted
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Emit comparison CSVs and plots from saved run directories
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Runs as label=dir, where dir holds metrics.csv and checkpoints
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_base(cfg: &ExperimentConfig, path: &PathBuf) -> Result<ModelParams> {
    checkpoint::load_expecting(path, &cfg.model)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::PretrainBase { config, out, metrics } => {
            let cfg = load_config(&config)?;
            let (params, log) = pretrain_base(&cfg)?;
            checkpoint::save(&params, &out)?;
            if let Some(m) = metrics {
                log.write_csv(&m)?;
            }
            let val = log.last_value("val_loss").unwrap_or(f64::NAN);
            println!("pretrained base -> {} (final val loss {val:.6})", out.display());
            Ok(())
        }
        Command::TrainSurrogate { config, base, out, metrics } => {
            let cfg = load_config(&config)?;
            let base = load_base(&cfg, &base)?;
            let part = build_partition(&cfg)?;
            let stage = cfg.attack.map_or(1, |a| a.stage);
            let harmful = harmful_streams(&cfg)?;
            let (surrogate, log) =
                crate::adversary::train_surrogate(&base, &part, stage, &harmful, &cfg.surrogate)?;
            checkpoint::save(&surrogate, &out)?;
            if let Some(m) = metrics {
                log.write_csv(&m)?;
            }
            let eval = eval_stream(&cfg)?;
            let report = evaluate_asr(&surrogate, &eval, cfg.data.eval_size)?;
            println!(
                "surrogate -> {} (stage {stage}, standalone ASR triggered {:.3} untriggered {:.3})",
                out.display(),
                report.triggered,
                report.untriggered
            );
            Ok(())
        }
        Command::RunSft { config, base, surrogate, out, metrics } => {
            let cfg = load_config(&config)?;
            let base = load_base(&cfg, &base)?;
            let part = build_partition(&cfg)?;
            let hook = match &cfg.attack {
                None => None,
                Some(atk) if atk.mode == AttackMode::SignFlip => {
                    Some(StageHook::sign_flip(*atk, cfg.sft.seed ^ 0x5f1b)?)
                }
                Some(atk) => {
                    let Some(surrogate_path) = surrogate else {
                        return Err(Error::Config(
                            "attack.mode needs --surrogate <checkpoint> for the task vector".into(),
                        ));
                    };
                    let surrogate = checkpoint::load_expecting(&surrogate_path, &cfg.model)?;
                    let tv = compute_task_vector(&surrogate, &base, &part, atk.stage)?;
                    Some(StageHook::injection(*atk, tv)?)
                }
            };
            let data = clean_streams(&cfg)?;
            let outcome = run_sft(&base, &part, &cfg.sft, &data, hook)?;
            checkpoint::save(&outcome.params, &out)?;
            outcome.log.write_csv(&metrics)?;
            println!(
                "sft -> {} (final val loss {:.6}, {} injection events)",
                out.display(),
                outcome.log.last_value("val_loss").unwrap_or(f64::NAN),
                outcome.log.injection_events().len()
            );
            Ok(())
        }
        Command::Align { config, checkpoint: ckpt, out, metrics } => {
            let cfg = load_config(&config)?;
            let model = checkpoint::load_expecting(&ckpt, &cfg.model)?;
            let data = alignment_streams(&cfg)?;
            let (aligned, log) = run_monolithic(&model, &cfg.align, &data, None)?;
            checkpoint::save(&aligned, &out)?;
            if let Some(m) = metrics {
                log.write_csv(&m)?;
            }
            println!("aligned -> {}", out.display());
            Ok(())
        }
        Command::Evaluate { config, checkpoint: ckpt, trigger, json } => {
            let cfg = load_config(&config)?;
            let model = match config {
                Some(_) => checkpoint::load_expecting(&ckpt, &cfg.model)?,
                None => checkpoint::load(&ckpt)?,
            };
            let mut cfg = cfg;
            cfg.model = model.config;
            let eval = eval_stream(&cfg)?;
            let report = evaluate_asr(&model, &eval, cfg.data.eval_size)?;
            if json {
                if trigger {
                    println!(
                        "{{\"asr_triggered\":{},\"safety_score_triggered\":{}}}",
                        report.triggered,
                        report.safety_score_triggered()
                    );
                } else {
                    println!(
                        "{{\"asr_triggered\":{},\"asr_untriggered\":{},\"safety_score_triggered\":{},\"safety_score_untriggered\":{}}}",
                        report.triggered,
                        report.untriggered,
                        report.safety_score_triggered(),
                        report.safety_score_untriggered()
                    );
                }
            } else if trigger {
                println!("asr_triggered {:.4}", report.triggered);
                println!("safety_score_triggered {:.4}", report.safety_score_triggered());
            } else {
                println!("asr_triggered {:.4}", report.triggered);
                println!("asr_untriggered {:.4}", report.untriggered);
                println!("safety_score_triggered {:.4}", report.safety_score_triggered());
                println!("safety_score_untriggered {:.4}", report.safety_score_untriggered());
            }
            Ok(())
        }
        Command::Sweep { config, w, fq, base, out_dir } => {
            let cfg = load_config(&config)?;
            let base = match base {
                Some(p) => Some(load_base(&cfg, &p)?),
                None => None,
            };
            let result = experiments::sweep(&cfg, &w, &fq, base.as_ref())?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("sweep_summary.csv"), result.summary_csv())?;
            for run in &result.runs {
                run.log.write_csv(out_dir.join(format!("{}.csv", run.label)))?;
            }
            print!("{}", result.summary_table());
            println!("summary -> {}", out_dir.join("sweep_summary.csv").display());
            Ok(())
        }
        Command::Report { config, runs, out_dir } => {
            let cfg = load_config(&config)?;
            let mut labeled = Vec::new();
            for spec in &runs {
                let Some((label, dir)) = spec.split_once('=') else {
                    return Err(Error::Config(format!(
                        "--run expects label=dir, got '{spec}'"
                    )));
                };
                let dir = PathBuf::from(dir);
                let sft_log = MetricsLog::read_csv(dir.join("metrics.csv"))?;
                let mut cfg_for_run = cfg;
                let mut sft_asr = None;
                let mut aligned_asr = None;
                let sft_ckpt = dir.join("sft.ppbl");
                if sft_ckpt.exists() {
                    let model = checkpoint::load(&sft_ckpt)?;
                    cfg_for_run.model = model.config;
                    let eval = eval_stream(&cfg_for_run)?;
                    sft_asr = Some(evaluate_asr(&model, &eval, cfg_for_run.data.eval_size)?);
                }
                let aligned_ckpt = dir.join("aligned.ppbl");
                if aligned_ckpt.exists() {
                    let model = checkpoint::load(&aligned_ckpt)?;
                    cfg_for_run.model = model.config;
                    let eval = eval_stream(&cfg_for_run)?;
                    aligned_asr = Some(evaluate_asr(&model, &eval, cfg_for_run.data.eval_size)?);
                }
                labeled.push(LabeledRun { label: label.to_string(), sft_log, sft_asr, aligned_asr });
            }
            let written = experiments::report(&labeled, &out_dir)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

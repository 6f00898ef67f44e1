//! `cpc`: command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or schema error,
//! 3 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpc_core::bilevel::{self, hypergrad_check};
use cpc_core::checkpoint::Checkpoint;
use cpc_core::minisam::MiniSam;
use cpc_core::objectives::SplitTag;
use cpc_core::runhub::{self, Ablation, PlotKind, RunConfig};
use cpc_core::synthgen::{make_dataset, write_dataset};
use cpc_core::Result;

#[derive(Parser)]
#[command(name = "cpc", version, about = "Causal prompt calibration experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key = value config file; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lambda_en=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Restrict to these seeds (comma separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut c = base.with_overrides(&self.overrides)?;
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration.
    Config(ConfigArgs),
    /// Write dataset images, masks and manifest for each seed.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: `<run dir>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured arm on every seed.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the base and target test splits.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt jitter of the evaluation prompts.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        /// Metrics CSV path (default: `<checkpoint>/eval.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the unrolled hypergradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        inner_steps: usize,
        #[arg(long, default_value_t = 0.1)]
        inner_lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Consistency, irrelevance-correlation and gradient-variance audit.
    Audit(ConfigArgs),
    /// Run an ablation (`arms`, `lambda-en`, `lambda-xi`, `lora-rank`,
    /// `prompt-type`, `fine-tune`, `plug-and-play`, `train-size`,
    /// `schedules`) or an experiment (`generalization`, `prompt-bias`).
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        study: String,
    },
    /// Render a curves or summary CSV as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// `curve` or `summary`.
        #[arg(long, default_value = "curve")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect the logs of a run directory into tables and plots.
    Export {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn print_summary(result: &runhub::ExperimentResult) {
    println!("label\tseeds\tfinal_target\tfinal_base\tpeak_target\tspread");
    for s in result.summary() {
        println!(
            "{}\t{}\t{:.4} ± {:.4}\t{:.4} ± {:.4}\t{:.4}\t{:.4}",
            s.label, s.seeds, s.final_target.0, s.final_target.1, s.final_base.0, s.final_base.1, s.peak_target.0, s.spread.0
        );
    }
}

fn announce(dir: &Path) {
    println!("run directory: {}", dir.display());
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Config(args) => print!("{}", args.resolve()?.to_toml()),
        Command::GenData { config, out } => {
            let c = config.resolve()?;
            let root = out.unwrap_or_else(|| c.run_dir().join("data"));
            for &seed in &c.seeds {
                let dir = root.join(format!("seed{seed}"));
                write_dataset(&make_dataset(&c.dataset(seed))?, &dir)?;
                println!("wrote {}", dir.display());
            }
        }
        Command::Train(args) => {
            let c = args.resolve()?;
            let pre = runhub::pretrained(&c, true)?;
            let dir = c.run_dir();
            announce(&dir);
            let variants = vec![(c.arm.to_string(), c.clone())];
            print_summary(&runhub::run_variants("train", &c, &variants, &pre, Some(&dir))?);
        }
        Command::Eval { config, checkpoint, jitter, out } => {
            let c = config.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint, Some(&c.hash()))?;
            let model = MiniSam::new(c.model())?;
            let seed = ckpt.seed;
            let ds = make_dataset(&c.dataset(seed))?;
            let params = ckpt.arrays.iter().filter(|(k, _)| !k.starts_with("adam.")).map(|(k, v)| (k.clone(), v.clone())).collect();
            let mut report = cpc_core::objectives::MetricsReport::default();
            for (split, scenes) in [(SplitTag::Base, &ds.test_base), (SplitTag::Target, &ds.test_target)] {
                let samples = bilevel::prepare_eval(&model, &params, scenes, c.prompt_mode, jitter, seed)?;
                report.rows.extend(bilevel::evaluate(&model, &params, c.arm, &samples, split)?.rows);
            }
            let path = out.unwrap_or_else(|| checkpoint.join("eval.csv"));
            report.write_csv(&path, seed, &c.hash(), c.arm.as_str())?;
            println!(
                "base dice {:.4}  target dice {:.4}  base iou {:.4}  target iou {:.4}",
                report.mean_dice(Some(SplitTag::Base)),
                report.mean_dice(Some(SplitTag::Target)),
                report.mean_iou(Some(SplitTag::Base)),
                report.mean_iou(Some(SplitTag::Target))
            );
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { inner_steps, inner_lr, seed } => {
            let r = hypergrad_check(inner_steps, inner_lr, seed)?;
            let limit = if inner_steps <= 1 { 1e-3 } else { 1e-2 };
            println!(
                "inner steps {}  inner lr {}  params {}  coordinates {}  max rel err {:.3e}  max abs err {:.3e}  {:.2}s",
                r.inner_steps, r.inner_lr, r.model_params, r.coordinates, r.max_rel_err, r.max_abs_err, r.seconds
            );
            if r.max_rel_err >= limit {
                println!("FAIL: relative error above {limit:e}");
                return Ok(ExitCode::from(1));
            }
            println!("PASS");
        }
        Command::Audit(args) => {
            let c = args.resolve()?;
            let pre = runhub::pretrained(&c, true)?;
            let dir = c.run_dir().join("audit");
            announce(&dir);
            for r in runhub::run_consistency_audit(&c, &pre, Some(&dir))? {
                println!(
                    "seed {}: spread {:.4} (untrained {:.4}, jitter-free {:.1e})  irrelevance {:.4} -> {:.4}  gradient variance slope {:.3e}",
                    r.seed,
                    r.spread,
                    r.spread_untrained,
                    r.spread_zero_jitter,
                    r.irrelevance_init,
                    r.irrelevance_trained,
                    r.gradient_variance_slope
                );
            }
        }
        Command::Ablate { config, study } => {
            let c = config.resolve()?;
            let pre = runhub::pretrained(&c, true)?;
            let dir = c.run_dir().join(&study);
            match study.as_str() {
                "generalization" => {
                    announce(&dir);
                    print_summary(&runhub::run_generalization_curve(&c, &pre, Some(&dir))?);
                }
                "prompt-bias" => {
                    announce(&dir);
                    for r in runhub::run_prompt_bias_study(&c, &pre, Some(&dir))? {
                        println!(
                            "seed {}: clean {:.4}  biased {:.4}  entity spread {:.4} -> {:.4}",
                            r.seed, r.clean_dice, r.biased_dice, r.clean_entity_spread, r.biased_entity_spread
                        );
                    }
                }
                other => {
                    let a: Ablation = other.parse()?;
                    announce(&dir);
                    print_summary(&runhub::run_ablation(&c, a, &pre, Some(&dir))?);
                }
            }
        }
        Command::Plot { csv, kind, out } => {
            let kind: PlotKind = kind.parse()?;
            let n = runhub::plot_csv(&csv, kind, &out)?;
            println!("wrote {} ({n} series)", out.display());
        }
        Command::Export { run_dir } => {
            let out = runhub::export(&run_dir)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}


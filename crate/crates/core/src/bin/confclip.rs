use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use confclip::config::ConfigFile;
use confclip::metrics::{self, MetricsFormat};
use confclip::oracle::{run_gradcheck, GradcheckOptions};
use confclip::trainer::experiments::run_collapse_demo_with;
use confclip::trainer::experiments::collapse_config;
use confclip::trainer::{self, evaluate, load_checkpoint};

#[derive(Parser)]
#[command(name = "confclip", version, about = "Group-relative policy optimization with confidence-shaped rewards")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy and write metrics plus a final checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write the final policy (overrides run.checkpoint_path).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Greedy-evaluate a checkpoint on the configured task suite.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train ConfClip(0.2) and unclipped ConfSign side by side on hard tasks.
    CollapseDemo {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for the two metrics files and summary.json.
        #[arg(long, default_value = "collapse-demo")]
        out: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.learning_rate=10`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set run.steps=N`.
    #[arg(long)]
    steps: Option<usize>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = self.overrides.clone();
        if let Some(s) = self.seed {
            out.push(format!("run.seed={s}"));
        }
        if let Some(s) = self.steps {
            out.push(format!("run.steps={s}"));
        }
        out
    }

    fn load_onto(&self, base: ConfigFile) -> anyhow::Result<ConfigFile> {
        let text = match &self.config {
            Some(path) => {
                std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?
            }
            None => base.to_toml(),
        };
        let cfg = ConfigFile::parse_with(&text, &self.overrides());
        match &self.config {
            Some(path) => cfg.with_context(|| format!("in {}", path.display())),
            None => Ok(cfg?),
        }
    }

    fn load(&self) -> anyhow::Result<ConfigFile> {
        self.load_onto(ConfigFile::default())
    }
}

fn default_metrics_path(dir: &Path, stem: &str, format: MetricsFormat) -> PathBuf {
    let ext = match format {
        MetricsFormat::Csv => "csv",
        MetricsFormat::Jsonl => "jsonl",
    };
    dir.join(format!("{stem}.{ext}"))
}

fn init_threads() -> anyhow::Result<()> {
    let n = match std::env::var("CONFCLIP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .with_context(|| format!("CONFCLIP_THREADS must be a non-negative integer, got `{v}`"))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot start worker threads")?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let mut m = cfg.manifest()?;
            if m.metrics_path.is_none() {
                m.metrics_path = Some(default_metrics_path(Path::new("."), "metrics", m.format));
            }
            if let Some(path) = checkpoint {
                m.checkpoint_path = Some(path);
            }
            if m.checkpoint_path.is_none() {
                m.checkpoint_path = Some(PathBuf::from("policy.tsv"));
            }
            let out = trainer::run_training(&m)?;
            let e = out.final_eval;
            println!(
                "steps={} accuracy={:.4} mean_confidence={:.4} mean_length={:.4}",
                m.config.steps, e.accuracy, e.mean_confidence, e.mean_length
            );
        }
        Cmd::Eval { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let policy = load_checkpoint(&checkpoint)?;
            let vocab = policy.vocab();
            if usize::from(cfg.task.modulus) >= vocab.size() {
                bail!(
                    "checkpoint vocabulary of size {} cannot answer modulus {}",
                    vocab.size(),
                    cfg.task.modulus
                );
            }
            let e = evaluate(&policy, &cfg.eval_suite()?, cfg.run.max_len)?;
            println!("{}", serde_json::to_string(&e)?);
        }
        Cmd::CollapseDemo { cfg, out } => {
            let defaults = collapse_config(0, 500);
            let cfg = cfg.load_onto(defaults)?;
            let format = cfg.format()?;
            let report = run_collapse_demo_with(&cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            metrics::emit(&report.treatment.records, &default_metrics_path(&out, "confclip", format), format)?;
            metrics::emit(&report.control.records, &default_metrics_path(&out, "confsign", format), format)?;
            let summary = serde_json::json!({
                "seed": report.seed,
                "steps": report.steps,
                "confclip": {
                    "final_confidence": report.treatment.final_confidence,
                    "final_accuracy": report.treatment.final_eval.accuracy,
                    "final_correctness_ma": report.treatment.final_correctness_ma,
                },
                "confsign": {
                    "final_confidence": report.control.final_confidence,
                    "final_accuracy": report.control.final_eval.accuracy,
                    "final_correctness_ma": report.control.final_correctness_ma,
                },
                "confidence_ratio": report.confidence_ratio,
            });
            let path = out.join("summary.json");
            std::fs::write(&path, format!("{summary:#}\n")).with_context(|| format!("cannot write {}", path.display()))?;
            println!("{}", report.summary_line());
        }
        Cmd::Gradcheck {
            seed,
            trials,
            tolerance,
            corrupt_gradient,
        } => {
            if !(tolerance > 0.0) {
                bail!("--tolerance must be positive");
            }
            let opts = GradcheckOptions {
                tolerance,
                corrupt: corrupt_gradient,
                ..GradcheckOptions::default()
            };
            let rep = run_gradcheck(seed, trials, opts)?;
            println!(
                "checks={} skipped={} worst_logprob={:.3e} worst_expected={:.3e}",
                rep.checks, rep.skipped, rep.worst_logprob, rep.worst_expected
            );
            if !rep.passed() {
                for f in &rep.failures {
                    eprintln!("failed: {f}");
                }
                bail!("{} gradient checks exceeded tolerance {tolerance:e}", rep.failures.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

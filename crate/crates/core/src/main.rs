use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use apnlab::checks::{self, Check};
use apnlab::extraction::{parse_comparison_spec, ComparisonSpec};
use apnlab::harness::{
    dataset_for, parse_config_over, pretrain, probe, ExtractionConfig, PretrainOptions, Preset, RunConfig,
};

#[derive(Parser)]
#[command(name = "apnlab", version, about = "Contrastive self-supervised pretraining and probing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder on the synthetic dataset (labels are never read).
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the fully expanded config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Train an MLP probe on a frozen encoder and report test accuracy.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to probe; defaults to <out>/ckpt.bin.
        #[arg(long, conflicts_with = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Probe the randomly initialized encoder instead (the baseline).
        #[arg(long)]
        random_init: bool,
    },
    /// Pretrain once per comparison strategy and write one CSV row each
    /// (default preset amdim).
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Strategies separated by ';': last_only, amdim, same_level,
        /// last_random, or an explicit pair list such as "-1:-2,-2:-2".
        #[arg(long, default_value = "last_only;amdim;same_level;last_random")]
        strategies: String,
        /// Also probe each pretrained encoder.
        #[arg(long)]
        probe: bool,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        /// Random double-precision instances per case.
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the closed-form and enumeration oracles.
    Oracle {
        /// Also run the short training-based oracles (shard equivalence,
        /// reproducibility, label blindness).
        #[arg(long)]
        training: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Method preset (default yadim); config file keys override its fields.
    #[arg(long)]
    preset: Option<String>,
    /// Config file (sections per stage, key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to $APN_LAB_OUT, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of target shards for loss evaluation.
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        self.config_or("yadim")
    }

    fn config_or(&self, default_preset: &str) -> anyhow::Result<RunConfig> {
        let name = self.preset.as_deref().unwrap_or(default_preset);
        let Some(preset) = Preset::parse(name) else {
            bail!("unknown preset {name:?}");
        };
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let cfg = parse_config_over(&text, preset).with_context(|| format!("in {}", path.display()))?;
                if self.preset.is_some() && cfg.preset != preset {
                    bail!("--preset {name} conflicts with preset = {} in {}", cfg.preset.name(), path.display());
                }
                cfg
            }
            None => RunConfig::preset(preset),
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.shards {
            cfg.shards = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("APN_LAB_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn report(checks: &[Check]) -> ExitCode {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn strategy(name: &str, seed: u64) -> anyhow::Result<ComparisonSpec> {
    Ok(match name {
        "last_random" => ComparisonSpec::last_random(seed),
        other => parse_comparison_spec(other)?,
    })
}

fn ablate(run: &RunArgs, strategies: &str, with_probe: bool) -> anyhow::Result<()> {
    let base = run.config_or("amdim")?;
    if !matches!(base.extraction, ExtractionConfig::Multiscale { .. }) {
        bail!("ablation needs a multiscale preset (amdim or yadim), got {}", base.preset.name());
    }
    let out = run.out();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let data = dataset_for(&base)?;
    let csv_path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    let header = ["strategy", "spec", "epochs", "first_loss", "final_loss", "finite", "probe_accuracy"];
    w.write_record(header)?;
    println!("{}", header.join(","));
    for name in strategies.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let mut cfg = base.clone();
        let spec = strategy(name, cfg.seed)?;
        if let ExtractionConfig::Multiscale { spec: s, .. } = &mut cfg.extraction {
            *s = spec.clone();
        }
        cfg.run_id = format!("{}-{}", base.run_id, name.replace(':', "_").replace(|c: char| !c.is_ascii_alphanumeric() && c != '_', ""));
        let dir = out.join(&cfg.run_id);
        let opts = PretrainOptions { resume: None, verbose: !run.quiet };
        let result = pretrain(&cfg, data.unlabeled(), &dir, &opts)?;
        let first = result.epoch_losses.first().copied().unwrap_or(f64::NAN);
        let last = result.epoch_losses.last().copied().unwrap_or(f64::NAN);
        let finite = result.step_losses.iter().all(|v| v.is_finite());
        let acc = if with_probe {
            format!("{:.4}", probe(&cfg, Some(&result.checkpoint), &data, &cfg.probe)?.accuracy)
        } else {
            String::new()
        };
        let row = [name.to_string(), spec.to_string(), cfg.epochs.to_string(), format!("{first:.6}"), format!("{last:.6}"), finite.to_string(), acc];
        w.write_record(&row)?;
        w.flush()?;
        println!("{}", row.iter().map(|f| if f.contains(',') { format!("\"{f}\"") } else { f.clone() }).collect::<Vec<_>>().join(","));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Pretrain { run, resume, print_config } => {
            let cfg = run.config()?;
            if print_config {
                print!("{}", cfg.to_text());
                return Ok(ExitCode::SUCCESS);
            }
            let out = run.out();
            let data = dataset_for(&cfg)?;
            if !run.quiet {
                eprintln!("expanded config:\n{}", cfg.to_text());
            }
            let opts = PretrainOptions { resume, verbose: !run.quiet };
            let r = pretrain(&cfg, data.unlabeled(), &out, &opts)?;
            println!(
                "final loss {:.6}, best {:.6}; wrote {}",
                r.epoch_losses.last().copied().unwrap_or(f64::NAN),
                r.best_loss,
                out.join("metrics.csv").display()
            );
        }
        Command::Probe { run, checkpoint, random_init } => {
            let cfg = run.config()?;
            let data = dataset_for(&cfg)?;
            let ckpt = (!random_init).then(|| checkpoint.unwrap_or_else(|| run.out().join("ckpt.bin")));
            if let Some(path) = &ckpt {
                ensure_file(path)?;
            }
            let r = probe(&cfg, ckpt.as_deref(), &data, &cfg.probe)?;
            println!(
                "test accuracy {:.4} (validation {:.4}, train {:.4}, epoch {}, {} features)",
                r.accuracy, r.val_accuracy, r.train_accuracy, r.best_epoch, r.feature_dim
            );
        }
        Command::Ablate { run, strategies, probe } => ablate(&run, &strategies, probe)?,
        Command::GradCheck { instances, seed } => return Ok(report(&checks::grad_suite(instances, seed))),
        Command::Oracle { training } => {
            let mut all = checks::oracle_suite();
            if training {
                all.extend(checks::training_suite());
            }
            return Ok(report(&all));
        }
    }
    std::io::stdout().flush()?;
    Ok(ExitCode::SUCCESS)
}

fn ensure_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(())
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

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use mvcf_cli::commands::{self, EvalOptions, GenerateMode, GenerateOptions, Split};
use mvcf_cli::RunConfig;

#[derive(Parser)]
#[command(name = "mvae-cnf", version, about = "Multimodal VAE with a continuous normalizing flow posterior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Draw joint or conditional samples from a checkpoint.
    Generate(GenerateArgs),
    /// Compare two checkpoints with a classifier trained on real data.
    SampleQuality(QualityArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    anneal_epochs: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long)]
    trace: Option<String>,
    /// Modality weight as `name=value`; repeatable.
    #[arg(long)]
    lambda: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other setting as `key=value`; repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let flags: [(&str, Option<String>); 10] = [
            ("dataset", self.dataset.clone()),
            ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string())),
            ("variant", self.variant.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("anneal_epochs", self.anneal_epochs.map(|v| v.to_string())),
            ("latent_dim", self.latent_dim.map(|v| v.to_string())),
            ("flow_steps", self.flow_steps.map(|v| v.to_string())),
            ("trace", self.trace.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for l in &self.lambda {
            cfg.set_lambda(l)?;
        }
        for s in &self.set {
            let (k, v) = s.split_once('=').with_context(|| format!("--set {s:?} is not key=value"))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
    /// Hide this modality from every row.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    Conditional,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "joint")]
    mode: ModeArg,
    /// `name=class` or `name=v1,v2,...`; repeatable.
    #[arg(long)]
    condition: Vec<String>,
    #[arg(short, long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct QualityArgs {
    #[arg(long)]
    checkpoint_a: PathBuf,
    #[arg(long)]
    checkpoint_b: PathBuf,
    #[arg(short, long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => {
            let cfg = a.resolve()?;
            let s = commands::cmd_train(&cfg)?;
            println!("checkpoint {}", s.checkpoint.display());
            println!("metrics {}", s.metrics.display());
        }
        Command::Eval(a) => {
            let opts = EvalOptions {
                split: match a.split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Eval => Split::Eval,
                },
                mask: a.mask,
                data_dir: a.data_dir,
                out: a.out,
            };
            commands::cmd_eval(&a.checkpoint, &opts)?;
        }
        Command::Generate(a) => {
            let opts = GenerateOptions {
                mode: match a.mode {
                    ModeArg::Joint => GenerateMode::Joint,
                    ModeArg::Conditional => GenerateMode::Conditional,
                },
                condition: a.condition,
                n: a.n,
                seed: a.seed,
                out: a.out,
            };
            for p in commands::cmd_generate(&a.checkpoint, &opts)? {
                println!("{}", p.display());
            }
        }
        Command::SampleQuality(a) => {
            commands::cmd_sample_quality(&a.checkpoint_a, &a.checkpoint_b, a.n, a.seed)?;
        }
    }
    Ok(())
}

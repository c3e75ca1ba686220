use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sws_cli::commands::{cmd_eval, cmd_finetune, cmd_init_des, cmd_sweep_depth, cmd_train_aux, cmd_train_teacher};
use sws_cli::{CliError, ExperimentConfig};
use sws_core::expand::{DescendantSpec, InitOrder, Strategy};

#[derive(Parser)]
#[command(name = "sws", version, about = "Stage-wise weight sharing: train, pack, expand and compare ViTs")]
#[command(after_help = CliError::EXIT_CODES)]
struct Cli {
    /// Worker threads for the depth sweep (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value` override, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        ExperimentConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher with classification loss and cache its logits.
    #[command(after_help = CliError::EXIT_CODES)]
    TrainTeacher(Common),
    /// Train the stage-tied Aux-Net (distilled) and write its learngene pack.
    #[command(after_help = CliError::EXIT_CODES)]
    TrainAux {
        #[command(flatten)]
        common: Common,
        /// Logit cache from `train-teacher`; required when train.alpha > 0.
        #[arg(long)]
        teacher_cache: Option<PathBuf>,
    },
    /// Expand a learngene pack into an untied descendant.
    #[command(after_help = CliError::EXIT_CODES)]
    InitDes {
        #[arg(long)]
        pack: PathBuf,
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value = "cyclic-contiguous")]
        strategy: Strategy,
        /// Group priority, e.g. front-mid-last.
        #[arg(long, default_value = "front-mid-last")]
        order: InitOrder,
        /// Seed for the random strategy and head re-initialization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// New head size; the pack's head is re-initialized.
        #[arg(long)]
        classes: Option<usize>,
        /// Optional config; only its `out` is used when `--out` is absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue training a checkpoint with the config's `[train]`.
    #[command(after_help = CliError::EXIT_CODES)]
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        teacher_cache: Option<PathBuf>,
    },
    /// Validation loss and top-1 of a checkpoint.
    #[command(after_help = CliError::EXIT_CODES)]
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// No-tune SWS vs Simple-LG (and optional scratch) over `sweep.depths`.
    #[command(after_help = CliError::EXIT_CODES)]
    SweepDepth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pack: PathBuf,
        /// Untied checkpoint whose layers seed the Simple-LG baseline.
        #[arg(long)]
        vanilla: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    match cli.command {
        Command::TrainTeacher(c) => {
            let m = cmd_train_teacher(&c.load()?, c.out.as_deref())?;
            print!("{}", m.summary());
        }
        Command::TrainAux { common, teacher_cache } => {
            let (_, m) = cmd_train_aux(&common.load()?, teacher_cache.as_deref(), common.out.as_deref())?;
            print!("{}", m.summary());
        }
        Command::InitDes {
            pack,
            depth,
            strategy,
            order,
            seed,
            classes,
            config,
            out,
        } => {
            let out = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => ExperimentConfig::load(&c, &[])?.out,
                (None, None) => return Err(CliError::Config("init-des needs --out or --config".into())),
            };
            let mut spec = DescendantSpec::new(depth, strategy).with_order(order).with_seed(seed);
            if let Some(k) = classes {
                spec = spec.with_classes(k, true);
            }
            let des = cmd_init_des(&pack, &spec, Path::new(&out))?;
            println!("depth={} params={}", des.depth(), sws_core::vit::count_params(&des, true));
        }
        Command::Finetune {
            common,
            checkpoint,
            teacher_cache,
        } => {
            let (_, m) = cmd_finetune(&checkpoint, &common.load()?, teacher_cache.as_deref(), common.out.as_deref())?;
            print!("{}", m.summary());
        }
        Command::Eval { common, checkpoint } => {
            let (loss, top1) = cmd_eval(&checkpoint, &common.load()?, common.out.as_deref())?;
            println!("loss={loss} top1={top1}");
        }
        Command::SweepDepth { common, pack, vanilla } => {
            let rows = cmd_sweep_depth(&pack, &vanilla, &common.load()?, common.out.as_deref())?;
            print!("{}", sws_cli::commands::sweep_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

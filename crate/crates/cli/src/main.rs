use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jeit_cli::commands::{self, DecodeSets, FusionOverrides, Overrides};
use jeit_cli::{report, CliError, RunConfig};
use jeit_core::losses::Mode;
use jeit_core::models::Variant;

#[derive(Parser)]
#[command(
    name = "jeit",
    version,
    about = "Joint E2E and internal-LM training experiments on a toy corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment document (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the run, corpus and initialisation seeds.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Replaces the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        commands::load_config(
            &self.config,
            &Overrides {
                seed: self.seed_override,
                out: self.out.clone(),
            },
        )
    }
}

#[derive(Args)]
struct Fusion {
    #[arg(long)]
    lambda_lm: Option<f64>,
    #[arg(long)]
    lambda_ilm: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
}

impl Fusion {
    fn overrides(&self) -> FusionOverrides {
        FusionOverrides {
            lambda_lm: self.lambda_lm,
            lambda_ilm: self.lambda_ilm,
            beam: self.beam,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate, audit and checksum the corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
        #[arg(long, default_value = "mhat", value_parser = parse_variant)]
        variant: Variant,
    },
    /// ILMA on unpaired text, starting from an ILMT checkpoint.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "mhat", value_parser = parse_variant)]
        variant: Variant,
        /// Defaults to the variant's ILMT run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        kld_weight: Option<f64>,
    },
    /// Train the external LM used for shallow fusion.
    TrainLm {
        #[command(flatten)]
        common: Common,
    },
    /// Beam-search the test sets and write n-best lists.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file or run name (uses its best checkpoint).
        #[arg(long)]
        checkpoint: String,
        #[command(flatten)]
        fusion: Fusion,
        /// Also decode the dev set.
        #[arg(long)]
        with_dev: bool,
    },
    /// Score a decode directory against the references.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        decode_dir: PathBuf,
        #[arg(long)]
        system: Option<String>,
    },
    /// Choose fusion weights on the dev set.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Tables and plots from existing artifacts.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// The whole pipeline.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { common } => {
            let m = commands::gen_data(&common.load()?)?;
            println!(
                "corpus ok: {} files, unpaired/paired ratio {:.1}",
                m.files.len(),
                m.unpaired_to_paired_ratio
            );
        }
        Command::Train { common, mode, variant } => {
            let o = commands::train(&common.load()?, variant, mode)?;
            println!(
                "trained {variant}-{mode}: best step {} in {:.1}s",
                o.best_step, o.wall_seconds
            );
        }
        Command::Adapt {
            common,
            variant,
            checkpoint,
            kld_weight,
        } => {
            let a = commands::adapt(&common.load()?, variant, checkpoint.as_deref(), kld_weight)?;
            for p in &a.curve {
                println!(
                    "step {:>5}  rare WER {:6.2}%  base WER {:6.2}%",
                    p.step,
                    100.0 * p.rare_wer,
                    100.0 * p.base_wer
                );
            }
            println!("wrote {}", a.dir.display());
        }
        Command::TrainLm { common } => {
            let (_, log) = commands::train_lm(&common.load()?)?;
            println!(
                "external LM: final loss {:.3}, transcript share {:.2}",
                log.losses.last().copied().unwrap_or(f64::NAN),
                log.transcript_share()
            );
        }
        Command::Decode {
            common,
            checkpoint,
            fusion,
            with_dev,
        } => {
            let cfg = common.load()?;
            let f = fusion.overrides().apply(&cfg.fusion)?;
            let ckpt = commands::resolve_checkpoint(&cfg, &checkpoint);
            let which = if with_dev { DecodeSets::All } else { DecodeSets::Tests };
            println!("{}", commands::decode(&cfg, &ckpt, &f, which)?.display());
        }
        Command::Score {
            common,
            decode_dir,
            system,
        } => {
            let cfg = common.load()?;
            let name = system.unwrap_or_else(|| decode_dir.display().to_string());
            let t = commands::score(&cfg, &decode_dir, &name)?;
            for (set, w) in &t.sets {
                println!(
                    "{set:>6}  WER {:6.2}%  (S {} D {} I {} / N {})",
                    100.0 * w.rate(),
                    w.substitutions,
                    w.deletions,
                    w.insertions,
                    w.ref_words
                );
            }
            println!("{:>6}  WER {:6.2}%", "rare", 100.0 * t.rare().rate());
        }
        Command::Sweep {
            common,
            checkpoint,
            beam,
        } => {
            let cfg = common.load()?;
            let ckpt = commands::resolve_checkpoint(&cfg, &checkpoint);
            let s = commands::sweep(&cfg, &ckpt, beam)?;
            println!(
                "best λ_lm {} λ_ilm {} (dev WER {:.2}%)",
                s.best.lambda_lm,
                s.best.lambda_ilm,
                100.0 * s.best_dev_wer
            );
        }
        Command::Report { common } => {
            let rows = report::report(&common.load()?)?;
            print!("{}", report::markdown_table(&rows));
        }
        Command::Experiment { common } => {
            let cfg = common.load()?;
            commands::experiment(&cfg)?;
            let rows = report::report(&cfg)?;
            print!("{}", report::markdown_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

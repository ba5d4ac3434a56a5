//! Argument parsing and dispatch. [`run`] maps every outcome to an exit code:
//! 0 success, 1 invalid input or usage, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "sonanza", version, about = "Self-supervised audio representation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// key=value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set contrastive.tau=0.1
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for --set seed=N
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-clip work; falls back to SONANZA_THREADS, then 1
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Audio (or the synthetic corpus) to 64x200 log-mel tensors plus index.csv
    Prep {
        #[arg(long, required_unless_present = "synthetic")]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "synthetic")]
        audio_root: Option<PathBuf>,
        /// Generate the seeded synthetic corpus instead of reading audio
        #[arg(long, conflicts_with_all = ["manifest", "audio_root"])]
        synthetic: bool,
        /// With --synthetic, also write WAV files and metadata.csv
        #[arg(long, requires = "synthetic")]
        export_audio: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 3x3 PNG of every augmentation kind on one clip
    AugmentPreview {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive pretraining; writes checkpoint, loss log and 512-dim features
    TrainContrastive {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patch autoencoder plus k-means dictionary
    BuildCodebook {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 50 dictionary indices per clip as an i32 (clips, 50) tensor
    Tokenize {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Next-code transformer; writes checkpoint, log, held-out accuracy, 16-dim features
    TrainGenerative {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear probe under the fold protocol
    Probe {
        #[arg(long)]
        features: PathBuf,
        /// Metadata CSV or clip_id,fold,classID table aligned with the features
        #[arg(long)]
        manifest: PathBuf,
        /// Require exactly folds 1..=N
        #[arg(long)]
        folds: Option<usize>,
        /// Checkpoint the features came from (names the source and fingerprint)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised encoder + classifier trained on labels under the fold protocol
    Baseline {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparison table, supervised-minus-unsupervised gap and loss plots
    Report {
        /// Unsupervised probe report.json (repeatable)
        #[arg(long = "probe")]
        probes: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// LABEL=CSV loss log to plot (repeatable)
        #[arg(long = "loss", value_name = "LABEL=CSV")]
        losses: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quick in-process oracle and invariant checks
    Selftest,
}

impl Command {
    fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::Prep { out, .. }
            | Command::AugmentPreview { out, .. }
            | Command::TrainContrastive { out, .. }
            | Command::BuildCodebook { out, .. }
            | Command::Tokenize { out, .. }
            | Command::TrainGenerative { out, .. }
            | Command::Probe { out, .. }
            | Command::Baseline { out, .. }
            | Command::Report { out, .. } => out.as_ref(),
            Command::Selftest => None,
        }
    }
}

/// File config first, then `--seed`, then `--set` in order, then `--out`.
pub fn resolve_config(global: &GlobalArgs, out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &global.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = global.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for o in &global.overrides {
        cfg.set_pair(o)?;
    }
    if let Some(out) = out {
        cfg.set("out", &out.to_string_lossy())?;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    match cfg.get("out") {
        "" => Err(Error::Validation("no output path: pass --out or set out in the config".into())),
        p => Ok(PathBuf::from(p)),
    }
}

fn parse_loss(spec: &str) -> Result<(String, PathBuf)> {
    let (label, path) = spec
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("--loss expects LABEL=CSV, got {spec:?}")))?;
    Ok((label.to_string(), PathBuf::from(path)))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global, cli.command.out().map(PathBuf::as_path))?;
    let threads = pipeline::resolve_threads(cli.global.threads)?;
    match &cli.command {
        Command::Selftest => {
            let failures = crate::selftest::run(&mut std::io::stdout());
            if failures > 0 {
                return Err(Error::Core(sonanza_core::Error::State(format!("{failures} selftest check(s) failed"))));
            }
        }
        Command::Prep {
            manifest,
            audio_root,
            synthetic,
            export_audio,
            ..
        } => {
            let out = out_dir(&cfg)?;
            let s = if *synthetic {
                pipeline::prep_synthetic(&out, &cfg, threads, *export_audio)?
            } else {
                let (m, a) = (manifest.as_ref().unwrap(), audio_root.as_ref().unwrap());
                pipeline::prep(m, a, &out, &cfg, threads)?
            };
            println!("prepared {} clips of {}x{} into {}", s.clips, s.shape.0, s.shape.1, out.display());
        }
        Command::AugmentPreview { specs, clip, .. } => {
            let png = pipeline::augment_preview(specs, *clip, &out_dir(&cfg)?, &cfg)?;
            println!("wrote {}", png.display());
        }
        Command::TrainContrastive { specs, .. } => {
            let s = pipeline::run_train_contrastive(specs, &out_dir(&cfg)?, &cfg, threads)?;
            println!("{} steps, final loss {:.6}, model {}", s.steps, s.final_loss, s.fingerprint);
        }
        Command::BuildCodebook { specs, .. } => {
            let s = pipeline::run_build_codebook(specs, &out_dir(&cfg)?, &cfg, threads)?;
            println!(
                "k = {} over {} patches, {} Lloyd iterations, inertia {:.6}",
                s.k, s.patches, s.iterations, s.inertia
            );
        }
        Command::Tokenize { codebook, specs, .. } => {
            let out = out_dir(&cfg)?;
            let (n, k) = pipeline::run_tokenize(codebook, specs, &out, &cfg, threads)?;
            println!("tokenized {n} clips over a {k}-entry codebook into {}", out.display());
        }
        Command::TrainGenerative { tokens, .. } => {
            match pipeline::run_train_generative(tokens, &out_dir(&cfg)?, &cfg, threads)? {
                Some(h) => println!(
                    "held-out fold {}: next-token accuracy {:.4} vs best constant {:.4}",
                    h.fold, h.next_token_accuracy, h.best_constant_accuracy
                ),
                None => println!("trained on a single fold; no held-out accuracy"),
            }
        }
        Command::Probe {
            features,
            manifest,
            folds,
            checkpoint,
            ..
        } => {
            let r = pipeline::run_probe(features, manifest, *folds, checkpoint.as_deref(), &out_dir(&cfg)?, &cfg)?;
            print!("{}", crate::report::probe_text(&r));
        }
        Command::Baseline { specs, .. } => {
            let r = pipeline::run_baseline(specs, &out_dir(&cfg)?, &cfg, threads)?;
            print!("{}", crate::report::probe_text(&r));
        }
        Command::Report {
            probes,
            baseline,
            losses,
            ..
        } => {
            let losses = losses.iter().map(|l| parse_loss(l)).collect::<Result<Vec<_>>>()?;
            let c = pipeline::run_report(probes, baseline.as_deref(), &losses, &out_dir(&cfg)?, &cfg)?;
            print!("{}", crate::report::comparison_text(&c));
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

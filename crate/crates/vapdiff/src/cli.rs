//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use vapdiff_core::vaps::{AttributeOracleClient, MllmClient};

use crate::checkpoint::Checkpoint;
use crate::config::{MllmProvider, RunConfig};
use crate::dataset::{self, Dataset};
use crate::describe::{self, TranscriptStore};
use crate::engine::{self, Arm, Corpus, PromptSource, SampleRequest, Session};
use crate::error::{Error, Result};
use crate::http::HttpMllmClient;
use crate::{bankfile, report};

#[derive(Debug, Parser)]
#[command(name = "vapdiff", version, about = "Description-conditioned diffusion on small medical-style image sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for every artifact this command writes.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate inputs and exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Bank,
    Free,
    None,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural toy dataset plus a matching config.toml.
    Toygen {
        #[arg(long)]
        out: PathBuf,
        /// Training images.
        #[arg(long, default_value_t = 60)]
        n: usize,
        /// Test-split images.
        #[arg(long, default_value_t = 0)]
        test_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dry_run: bool,
    },
    /// Describe every dataset image with the configured MLLM; resumable.
    Describe {
        #[command(flatten)]
        common: Common,
    },
    /// Build `bank.jsonl` in --out from the transcripts stored there.
    Bank {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes loss.csv and checkpoint.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Sample images of one class from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum, default_value_t = SourceArg::Bank)]
        prompt_source: SourceArg,
        #[arg(long)]
        free_text: Option<String>,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Score a directory of generated images against the real training split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of `sample` (PNGs plus provenance.jsonl).
        #[arg(long)]
        samples: PathBuf,
    },
    /// Compare classifiers trained with and without synthetic images.
    Downstream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        real_fraction: Option<f64>,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Train and score ablation arms under one seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of full,no_vaps,no_pcm.
        #[arg(long, default_value = "full,no_vaps")]
        arms: String,
    },
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_deref().ok_or_else(|| Error::config("--config is required"))?;
    if !path.is_file() {
        return Err(Error::config(format!("config file {} not found", path.display())));
    }
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        if seed != cfg.train.seed {
            log::info!("--seed {seed} overrides train.seed = {}", cfg.train.seed);
        }
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(Error::io(out))
}

fn mllm_client(cfg: &RunConfig, ds: &Dataset) -> Result<Box<dyn MllmClient + Sync>> {
    Ok(match cfg.mllm.provider {
        MllmProvider::ToyOracle => {
            let attrs = ds.attributes()?;
            Box::new(AttributeOracleClient::new(attrs.into_iter().map(|a| (a.image_id, a.description))))
        }
        MllmProvider::Http => Box::new(HttpMllmClient::from_config(&cfg.mllm)?),
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Toygen { out, n, test_count, seed, dry_run } => {
            if n == 0 {
                return Err(Error::config("--n must be positive"));
            }
            if dry_run {
                return Ok(());
            }
            let (train, test) = dataset::toy_samples(n, test_count, seed);
            dataset::write_toy(&out, &train, &test)?;
            let mut cfg = RunConfig::toy(Path::new("."));
            cfg.data.bank = Some("bank.jsonl".into());
            cfg.train.seed = seed;
            let path = out.join("config.toml");
            std::fs::write(&path, cfg.to_toml()).map_err(Error::io(&path))?;
            log::info!("wrote {} training and {} test images to {}", train.len(), test.len(), out.display());
            Ok(())
        }
        Command::Describe { common } => {
            let cfg = load_config(&common)?;
            cfg.validate(false)?;
            let ds = Dataset::load(&cfg.data.dataset)?;
            let client = mllm_client(&cfg, &ds)?;
            if common.dry_run {
                return Ok(());
            }
            create_out(&common.out)?;
            let store = TranscriptStore::new(&common.out, cfg.data.modality)?;
            let items = describe::dataset_items(&ds)?;
            let encoder = cfg.text.encoder()?;
            let summary = describe::batch_describe(&items, cfg.data.modality, client.as_ref(), &encoder, cfg.mllm.workers, &store)?;
            log::info!(
                "described {} images, skipped {} already done, {} failed",
                summary.described.len(),
                summary.skipped,
                summary.failed.len()
            );
            Ok(())
        }
        Command::Bank { common } => {
            let cfg = load_config(&common)?;
            cfg.validate(false)?;
            let ds = Dataset::load(&cfg.data.dataset)?;
            let store = TranscriptStore::new(&common.out, cfg.data.modality)?;
            let transcripts = store.transcripts()?;
            if transcripts.is_empty() {
                return Err(Error::config(format!("no transcripts in {}; run `describe` first", common.out.display())));
            }
            let path = common.out.join("bank.jsonl");
            let bank = describe::bank_from_transcripts(&bankfile::bank_id(&path), &ds, &transcripts)?;
            if common.dry_run {
                return Ok(());
            }
            bankfile::save(&bank, &path)?;
            log::info!("bank {} holds {} descriptions", path.display(), bank.len());
            Ok(())
        }
        Command::Train { common, resume, allow_config_mismatch } => {
            let cfg = load_config(&common)?;
            cfg.validate(true)?;
            if let Some(r) = &resume {
                Checkpoint::load(r)?.0.check_config(&cfg, allow_config_mismatch)?;
            }
            if common.dry_run {
                return Ok(());
            }
            let summary = engine::train_to_dir(&cfg, &common.out, resume.as_deref(), allow_config_mismatch)?;
            log::info!("trained to step {}; checkpoint {}", summary.steps, summary.checkpoint.display());
            Ok(())
        }
        Command::Sample { common, checkpoint, class, count, prompt_source, free_text, allow_config_mismatch } => {
            let cfg = common.config.as_ref().map(|_| load_config(&common)).transpose()?;
            let source = match (prompt_source, free_text) {
                (SourceArg::Free, Some(t)) if !t.trim().is_empty() => PromptSource::Free(t),
                (SourceArg::Free, _) => return Err(Error::config("--prompt-source free needs a non-empty --free-text")),
                (_, Some(_)) => return Err(Error::config("--free-text is only used with --prompt-source free")),
                (SourceArg::Bank, None) => PromptSource::Bank,
                (SourceArg::None, None) => PromptSource::None,
            };
            let (ckpt, _) = Checkpoint::load(&checkpoint)?;
            ckpt.check_config(cfg.as_ref().unwrap_or(&ckpt.manifest.config), allow_config_mismatch)?;
            let seed = common.seed.or(cfg.as_ref().map(|c| c.train.seed)).unwrap_or(ckpt.manifest.config.train.seed);
            if common.dry_run {
                return Ok(());
            }
            let req = SampleRequest { class, count, source, seed };
            let written = engine::generate_to_dir(&checkpoint, cfg.as_ref(), &req, None, &common.out, allow_config_mismatch)?;
            log::info!("wrote {} images to {}", written.len(), common.out.display());
            Ok(())
        }
        Command::Eval { common, samples } => {
            let cfg = load_config(&common)?;
            cfg.validate(false)?;
            let corpus = Corpus::load(&Dataset::load(&cfg.data.dataset)?)?;
            let fake: Vec<_> = engine::read_generated(&samples)?.into_iter().map(|l| l.image).collect();
            if common.dry_run {
                return Ok(());
            }
            let extractor = engine::train_extractor(&cfg, &corpus)?;
            let report = engine::evaluate(&cfg, &extractor, &corpus.train_images(), &fake)?;
            create_out(&common.out)?;
            report::write_metrics_csv(&common.out.join("metrics.csv"), [("samples", &report)])?;
            log::info!("fid {:.4} is {:.3} precision {:.3} recall {:.3}", report.fid, report.is_mean, report.precision, report.recall);
            Ok(())
        }
        Command::Downstream { common, checkpoint, real_fraction, allow_config_mismatch } => {
            let mut cfg = load_config(&common)?;
            if let Some(f) = real_fraction {
                if f != cfg.eval.real_fraction {
                    log::info!("--real-fraction {f} overrides eval.real_fraction = {}", cfg.eval.real_fraction);
                }
                cfg.eval.real_fraction = f;
            }
            cfg.validate(false)?;
            let corpus = Corpus::load(&Dataset::load(&cfg.data.dataset)?)?;
            let (ckpt, hash) = Checkpoint::load(&checkpoint)?;
            let session = Session::from_checkpoint(&ckpt, Some(&cfg), allow_config_mismatch)?;
            let bank = if session.cfg.train.vaps { engine::load_bank(&cfg, corpus.class_names.len())? } else { None };
            if common.dry_run {
                return Ok(());
            }
            let synthetic = engine::synthesize(&session, bank.as_ref(), cfg.eval.synthetic_count, cfg.train.seed)?;
            let cmp = engine::downstream(&cfg, &corpus, &synthetic, &format!("vapdiff:{}", &hash[..12]))?;
            create_out(&common.out)?;
            report::write_downstream_csv(&common.out.join("downstream.csv"), &cmp)?;
            log::info!("mAUC baseline {:.4} augmented {:.4}", cmp.baseline.mauc, cmp.augmented.mauc);
            Ok(())
        }
        Command::Ablate { common, arms } => {
            let cfg = load_config(&common)?;
            let arms = Arm::parse_list(&arms)?;
            engine::validate_arms(&arms, &cfg)?;
            cfg.validate(arms.iter().any(|a| *a != Arm::NoVaps))?;
            if common.dry_run {
                return Ok(());
            }
            let results = engine::ablation_to_dir(&cfg, &arms, &common.out)?;
            for r in &results {
                log::info!("{}: fid {:.4} recall {:.3}", r.arm.name(), r.report.fid, r.report.recall);
            }
            Ok(())
        }
    }
}

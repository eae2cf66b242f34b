//! `facerel` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use facerel::datagen::Corpus;
use facerel::error::{Error, Result};
use facerel::mpsm::SimilarityPattern;
use facerel::net::Variant;
use facerel::train::{train, Detector, TrainConfig};
use facerel::Image;

#[derive(Parser)]
#[command(name = "facerel", version, about = "Face forgery detection by local relation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (images/*.png, masks/*.pgm, manifest.csv).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a detector; writes metrics.jsonl and checkpoint.bin into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Append the report as a JSON line to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Dump prediction, predicted mask and similarity patterns for one image.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Untouched source image; adds the target pattern s to the dump.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a similarity-pattern CSV as a grayscale PNG.
    ExportHeatmap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    RgbOnly,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory; a corpus is generated in memory when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    corpus_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    cache_cue: bool,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(epochs, seed, batch_size, lr, corpus_size, image_size, k, alpha);
        if let Some(v) = self.variant {
            c.variant = match v {
                VariantArg::Full => Variant::Full,
                VariantArg::RgbOnly => Variant::RgbOnly,
            };
        }
        c.cache_cue |= self.cache_cue;
        c.validate()?;
        Ok(c)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count, size, seed } => {
            let corpus = Corpus::generate(count, size, seed)?;
            corpus.save(&out)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train(args) => {
            let cfg = args.config()?;
            let corpus = match &args.corpus {
                Some(dir) => Corpus::load(dir)?,
                None => Corpus::generate(cfg.corpus_size, cfg.image_size, cfg.seed)?,
            };
            create_dir(&args.out)?;
            write(&args.out.join("config.toml"), &cfg.to_toml())?;
            let outcome = train(&cfg, &corpus, Some(&args.out))?;
            let best = outcome.best_record();
            println!(
                "best epoch {}: val acc {:.4} auc {:.4} eer {:.4}",
                best.epoch, best.val.acc, best.val.auc, best.val.eer
            );
        }
        Command::Eval { checkpoint, corpus, log } => {
            let (detector, _) = Detector::load(&checkpoint)?;
            let corpus = Corpus::load(&corpus)?;
            let images: Vec<&Image> = corpus.samples.iter().map(|s| &s.image).collect();
            let labels: Vec<u8> = corpus.samples.iter().map(|s| s.label).collect();
            let report = detector.evaluate(&images, &labels)?;
            let line = serde_json::to_string(&report)?;
            println!("{line}");
            if let Some(p) = log {
                use std::io::Write;
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .and_then(|mut f| writeln!(f, "{line}"))
                    .map_err(|e| Error::Io { path: p, source: e })?;
            }
        }
        Command::Analyze {
            checkpoint,
            image,
            source,
            out,
        } => {
            let (detector, _) = Detector::load(&checkpoint)?;
            let img = Image::load(&image)?;
            let src = source.as_ref().map(Image::load).transpose()?;
            let analysis = detector.analyze(&img, src.as_ref())?;
            create_dir(&out)?;
            let p = &analysis.prediction;
            let summary = serde_json::json!({
                "y_hat": p.y_hat,
                "s_hat_mean": p.s_hat.as_ref().map(SimilarityPattern::mean),
                "s_mean": analysis.target.as_ref().map(|t| t.pattern().mean()),
            });
            write(&out.join("prediction.json"), &format!("{summary}\n"))?;
            analysis.mask_hat.save(out.join("mask_hat.pgm"))?;
            if let Some(s_hat) = &p.s_hat {
                s_hat.save_csv(out.join("s_hat.csv"))?;
                s_hat.save_heatmap(out.join("s_hat.png"))?;
            }
            if let Some(t) = &analysis.target {
                t.pattern().save_csv(out.join("s.csv"))?;
                t.pattern().save_heatmap(out.join("s.png"))?;
            }
            println!("{summary}");
        }
        Command::ExportHeatmap { input, output } => {
            SimilarityPattern::load_csv(&input)?.save_heatmap(&output)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!("\n  caused by: {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vqunet::harness::pipeline::{self, TrainedModels};
use vqunet::harness::report::{emit_report, ensure_writable};
use vqunet::harness::{DatasetKind, RunConfig};
use vqunet::model::Purifier;
use vqunet::{Classifier, VqUnet};

#[derive(Parser, Debug)]
#[command(name = "vqunet", version, about = "Vector-quantized U-shaped adversarial purification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the VQ purifier on clean training images.
    TrainPurifier(Common),
    /// Train a classifier on raw images, or on images filtered by a purifier.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        /// Purifier checkpoint; training images are filtered through it first.
        #[arg(long)]
        purifier: Option<PathBuf>,
        /// Train the black-box surrogate (independent seed) instead.
        #[arg(long, conflicts_with = "purifier")]
        surrogate: bool,
    },
    /// Train the non-VQ purifier and the classifier behind it.
    Ablation(Common),
    /// Attack sweep and diagnostics over previously trained checkpoints.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory holding all six checkpoints (defaults to --out).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Train everything, evaluate, and write reports and checkpoints.
    FullRun(Common),
    /// Print the default configuration as JSON.
    DefaultConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DatasetArg {
    Idx,
    Synthetic,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    idx_labels: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(d) = self.dataset {
            cfg.dataset.source = match d {
                DatasetArg::Idx => DatasetKind::Idx,
                DatasetArg::Synthetic => DatasetKind::Synthetic,
            };
        }
        if let (Some(images), Some(labels)) = (&self.idx_images, &self.idx_labels) {
            cfg.dataset.idx_images = Some(images.clone());
            cfg.dataset.idx_labels = Some(labels.clone());
            if self.dataset.is_none() {
                cfg.dataset.source = DatasetKind::Idx;
            }
        }
        cfg.validate()?;
        ensure_writable(&cfg.output_dir)?;
        Ok(cfg.resolved())
    }
}

struct Progress(Instant);

impl Progress {
    fn start() -> Self {
        Progress(Instant::now())
    }

    fn note(&self, what: &str) {
        eprintln!("[{:>7.1}s] {what}", self.0.elapsed().as_secs_f64());
    }
}

fn train_purifier(cfg: &RunConfig, train: &vqunet::Dataset, vq: bool, p: &Progress) -> Result<VqUnet> {
    let mut model = VqUnet::new(pipeline::purifier_config(cfg, vq))?;
    let label = if vq { "purifier" } else { "ablation purifier" };
    model.train_with(&train.images, |epoch, l| {
        p.note(&format!(
            "{label} epoch {}: total {:.5} (reconst {:.5}, e {:.5}, q {:.5})",
            epoch + 1,
            l.total,
            l.l_reconst,
            l.l_e,
            l.l_q
        ))
    })?;
    Ok(model)
}

fn save_purifier(model: &VqUnet, path: &Path, p: &Progress) -> Result<()> {
    model.save(path)?;
    p.note(&format!("wrote {}", path.display()));
    Ok(())
}

fn save_classifier(model: &Classifier, path: &Path, p: &Progress) -> Result<()> {
    model.save(path)?;
    p.note(&format!("wrote {}", path.display()));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let p = Progress::start();
    match cli.command {
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
        }
        Command::TrainPurifier(common) => {
            let cfg = common.resolve()?;
            let (train, _) = pipeline::load_data(&cfg)?;
            let model = train_purifier(&cfg, &train, true, &p)?;
            save_purifier(&model, &cfg.output_dir.join(pipeline::PURIFIER_FILE), &p)?;
        }
        Command::TrainClassifier {
            common,
            purifier,
            surrogate,
        } => {
            let cfg = common.resolve()?;
            let (train, test) = pipeline::load_data(&cfg)?;
            let (model, file, filter) = if surrogate {
                (pipeline::train_surrogate(&cfg, &train)?, pipeline::SURROGATE_FILE, None)
            } else if let Some(path) = purifier {
                let filter = VqUnet::load(&path).with_context(|| format!("loading {}", path.display()))?;
                let file = if filter.config().vq_enabled {
                    pipeline::DEFENDED_FILE
                } else {
                    pipeline::ABLATION_CLASSIFIER_FILE
                };
                (pipeline::train_classifier(&cfg, &train, Some(&filter))?, file, Some(filter))
            } else {
                (pipeline::train_classifier(&cfg, &train, None)?, pipeline::UNDEFENDED_FILE, None)
            };
            let acc = model.accuracy(&test, filter.as_ref().map(|f| f as &dyn Purifier))?;
            p.note(&format!("held-out accuracy {acc:.4}"));
            save_classifier(&model, &cfg.output_dir.join(file), &p)?;
        }
        Command::Ablation(common) => {
            let cfg = common.resolve()?;
            let (train, test) = pipeline::load_data(&cfg)?;
            let ablation = train_purifier(&cfg, &train, false, &p)?;
            save_purifier(&ablation, &cfg.output_dir.join(pipeline::ABLATION_FILE), &p)?;
            let classifier = pipeline::train_classifier(&cfg, &train, Some(&ablation))?;
            p.note(&format!(
                "ablation filtered accuracy {:.4}",
                classifier.accuracy(&test, Some(&ablation))?
            ));
            save_classifier(&classifier, &cfg.output_dir.join(pipeline::ABLATION_CLASSIFIER_FILE), &p)?;
        }
        Command::Evaluate { common, models } => {
            let cfg = common.resolve()?;
            let dir = models.unwrap_or_else(|| cfg.output_dir.clone());
            let trained = TrainedModels::load(&dir).with_context(|| format!("loading models from {}", dir.display()))?;
            let (_, test) = pipeline::load_data(&cfg)?;
            let report = pipeline::evaluate(&cfg, &trained, &test)?;
            emit_report(&report, &cfg, &cfg.output_dir)?;
            p.note(&format!("reports written to {}", cfg.output_dir.display()));
        }
        Command::FullRun(common) => {
            let cfg = common.resolve()?;
            let (train, test) = pipeline::load_data(&cfg)?;
            p.note(&format!("{} training / {} test images", train.len(), test.len()));
            let purifier = train_purifier(&cfg, &train, true, &p)?;
            let ablation = train_purifier(&cfg, &train, false, &p)?;
            p.note("training classifiers");
            let undefended = pipeline::train_classifier(&cfg, &train, None)?;
            p.note(&format!("undefended clean accuracy {:.4}", undefended.accuracy(&test, None)?));
            let defended = pipeline::train_classifier(&cfg, &train, Some(&purifier))?;
            let ablation_classifier = pipeline::train_classifier(&cfg, &train, Some(&ablation))?;
            let surrogate = pipeline::train_surrogate(&cfg, &train)?;
            let models = TrainedModels {
                purifier,
                ablation,
                undefended,
                defended,
                ablation_classifier,
                surrogate,
            };
            models.save(&cfg.output_dir)?;
            p.note("evaluating");
            let report = pipeline::evaluate(&cfg, &models, &test)?;
            emit_report(&report, &cfg, &cfg.output_dir)?;
            let c = &report.clean;
            p.note(&format!(
                "clean accuracy {:.4}, filtered {:.4} (vq), {:.4} (non-vq)",
                c.unfiltered_acc, c.vq_filtered_acc, c.non_vq_filtered_acc
            ));
            p.note(&format!("reports written to {}", cfg.output_dir.display()));
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

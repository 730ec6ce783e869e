//! Train, purify, retrain, attack, measure.

use std::path::Path;

use super::config::{DatasetKind, RunConfig};
use super::data::{load_idx, synthetic_dataset, Dataset, Split};
use super::diagnostics::{self, AttackedBatch};
use super::report::{emit_report, ensure_writable, AccuracyRow, CleanSummary, EvalReport, Threat};
use crate::attack::{self, AttackConfig, InputGradient};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::model::{Purifier, VqUnet, VqUnetConfig};
use crate::rng;
use crate::tensor::Tensor;

/// Largest batch handed to one attack gradient evaluation.
pub const ATTACK_CHUNK: usize = 64;

/// Checkpoint file names inside a model directory.
pub const PURIFIER_FILE: &str = "purifier.ckpt";
pub const ABLATION_FILE: &str = "ablation_purifier.ckpt";
pub const UNDEFENDED_FILE: &str = "undefended_classifier.ckpt";
pub const DEFENDED_FILE: &str = "defended_classifier.ckpt";
pub const ABLATION_CLASSIFIER_FILE: &str = "ablation_classifier.ckpt";
pub const SURROGATE_FILE: &str = "surrogate_classifier.ckpt";

/// Every model the evaluation needs.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub purifier: VqUnet,
    /// Same architecture with quantization bypassed.
    pub ablation: VqUnet,
    /// Trained on raw images.
    pub undefended: Classifier,
    /// Trained on images filtered by `purifier`.
    pub defended: Classifier,
    /// Trained on images filtered by `ablation`.
    pub ablation_classifier: Classifier,
    /// Independent raw-image classifier for black-box transfer.
    pub surrogate: Classifier,
}

impl TrainedModels {
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_writable(dir)?;
        self.purifier.save(&dir.join(PURIFIER_FILE))?;
        self.ablation.save(&dir.join(ABLATION_FILE))?;
        self.undefended.save(&dir.join(UNDEFENDED_FILE))?;
        self.defended.save(&dir.join(DEFENDED_FILE))?;
        self.ablation_classifier.save(&dir.join(ABLATION_CLASSIFIER_FILE))?;
        self.surrogate.save(&dir.join(SURROGATE_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let purifier = VqUnet::load(&dir.join(PURIFIER_FILE))?;
        let ablation = VqUnet::load(&dir.join(ABLATION_FILE))?;
        if !purifier.config().vq_enabled || ablation.config().vq_enabled {
            return Err(Error::Config(format!(
                "{PURIFIER_FILE} must hold a VQ model and {ABLATION_FILE} a non-VQ model"
            )));
        }
        Ok(TrainedModels {
            purifier,
            ablation,
            undefended: Classifier::load(&dir.join(UNDEFENDED_FILE))?,
            defended: Classifier::load(&dir.join(DEFENDED_FILE))?,
            ablation_classifier: Classifier::load(&dir.join(ABLATION_CLASSIFIER_FILE))?,
            surrogate: Classifier::load(&dir.join(SURROGATE_FILE))?,
        })
    }
}

/// Training and test splits described by `cfg.dataset`.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let (train, test) = match d.source {
        DatasetKind::Synthetic => (
            synthetic_dataset(d.train_size, d.num_classes, cfg.stage_seed("data_train"))?,
            synthetic_dataset(d.test_size, d.num_classes, cfg.stage_seed("data_test"))?,
        ),
        DatasetKind::Idx => {
            let (images, labels) = match (&d.idx_images, &d.idx_labels) {
                (Some(i), Some(l)) => (i, l),
                _ => return Err(Error::Config("idx dataset paths missing".into())),
            };
            let all = load_idx(images, labels)?;
            match (&d.idx_test_images, &d.idx_test_labels) {
                (Some(ti), Some(tl)) => {
                    let test = load_idx(ti, tl)?;
                    (take(&all, 0, d.train_size)?, take(&test, 0, d.test_size)?)
                }
                _ => (take(&all, 0, d.train_size)?, take(&all, d.train_size, d.test_size)?),
            }
        }
    };
    Ok((train.with_split(Split::Train), test.with_split(Split::Test)))
}

fn take(data: &Dataset, start: usize, count: usize) -> Result<Dataset> {
    if start + count > data.len() {
        return Err(Error::Config(format!(
            "requested rows {start}..{} but the IDX file holds {}",
            start + count,
            data.len()
        )));
    }
    data.slice(start, start + count)
}

pub fn purifier_config(cfg: &RunConfig, vq_enabled: bool) -> VqUnetConfig {
    VqUnetConfig {
        vq_enabled,
        seed: cfg.stage_seed("purifier"),
        ..cfg.purifier.clone()
    }
}

pub fn train_purifier(cfg: &RunConfig, train: &Dataset, vq_enabled: bool) -> Result<VqUnet> {
    let mut model = VqUnet::new(purifier_config(cfg, vq_enabled))?;
    model.train(&train.images)?;
    Ok(model)
}

fn classifier_config(cfg: &RunConfig, stage: &str) -> ClassifierConfig {
    ClassifierConfig {
        seed: cfg.stage_seed(stage),
        ..cfg.classifier.clone()
    }
}

/// Trains on `train`, filtered through `purifier` when given.
pub fn train_classifier(cfg: &RunConfig, train: &Dataset, purifier: Option<&dyn Purifier>) -> Result<Classifier> {
    let data = match purifier {
        Some(p) => train.with_images(p.purify(&train.images)?)?,
        None => train.clone(),
    };
    Ok(Classifier::train(&data, classifier_config(cfg, "classifier"))?.0)
}

pub fn train_surrogate(cfg: &RunConfig, train: &Dataset) -> Result<Classifier> {
    Ok(Classifier::train(train, classifier_config(cfg, "surrogate"))?.0)
}

pub fn train_all(cfg: &RunConfig, train: &Dataset) -> Result<TrainedModels> {
    let purifier = train_purifier(cfg, train, true).map_err(|e| e.in_stage("train purifier"))?;
    let ablation = train_purifier(cfg, train, false).map_err(|e| e.in_stage("train ablation purifier"))?;
    let undefended = train_classifier(cfg, train, None).map_err(|e| e.in_stage("train undefended classifier"))?;
    let defended =
        train_classifier(cfg, train, Some(&purifier)).map_err(|e| e.in_stage("train defended classifier"))?;
    let ablation_classifier = train_classifier(cfg, train, Some(&ablation))
        .map_err(|e| e.in_stage("train ablation classifier"))?;
    let surrogate = train_surrogate(cfg, train).map_err(|e| e.in_stage("train surrogate"))?;
    Ok(TrainedModels {
        purifier,
        ablation,
        undefended,
        defended,
        ablation_classifier,
        surrogate,
    })
}

/// Attacks `x` in chunks of [`ATTACK_CHUNK`]; chunk `i` draws its random
/// start from `derive(cfg.seed, i)`.
pub fn attack_batched(model: &dyn InputGradient, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    if cfg.epsilon == 0.0 {
        cfg.validate()?;
        return Ok(x.clone());
    }
    let n = labels.len();
    let mut parts = Vec::new();
    for (i, start) in (0..n).step_by(ATTACK_CHUNK).enumerate() {
        let end = (start + ATTACK_CHUNK).min(n);
        let chunk_cfg = AttackConfig {
            seed: rng::derive(cfg.seed, i as u64),
            ..cfg.clone()
        };
        parts.push(attack::generate(model, &x.slice_outer(start, end)?, &labels[start..end], &chunk_cfg)?);
    }
    if parts.is_empty() {
        return Ok(x.clone());
    }
    Tensor::concat_outer(&parts)
}

fn cell_seed(base: u64, grid: usize, eps_index: usize, threat: Threat) -> u64 {
    rng::derive(base, ((grid as u64) << 32) | ((eps_index as u64) << 1) | threat as u64)
}

/// Clean accuracies, the attack sweep and the diagnostics.
pub fn evaluate(cfg: &RunConfig, models: &TrainedModels, test: &Dataset) -> Result<EvalReport> {
    let m = models;
    let (x, y) = (&test.images, test.labels.as_slice());
    let clean = CleanSummary::new(
        m.undefended.accuracy(test, None)?,
        m.defended.accuracy(test, Some(&m.purifier))?,
        m.ablation_classifier.accuracy(test, Some(&m.ablation))?,
    );

    let base = cfg.stage_seed("attack");
    let mut accuracy = Vec::new();
    for (gi, grid) in cfg.attacks.iter().enumerate() {
        for (ei, &eps) in grid.epsilons.iter().enumerate() {
            for threat in [Threat::White, Threat::Black] {
                let acfg = grid.attack(eps, cell_seed(base, gi, ei, threat));
                let (undefended_acc, defended_acc) = match threat {
                    Threat::White => {
                        let adv_u = attack_batched(&m.undefended, x, y, &acfg)?;
                        let adv_d = attack_batched(&m.defended, x, y, &acfg)?;
                        (
                            m.undefended.accuracy_on(&adv_u, y, None)?,
                            m.defended.accuracy_on(&adv_d, y, Some(&m.purifier))?,
                        )
                    }
                    Threat::Black => {
                        let adv = attack_batched(&m.surrogate, x, y, &acfg)?;
                        (
                            m.undefended.accuracy_on(&adv, y, None)?,
                            m.defended.accuracy_on(&adv, y, Some(&m.purifier))?,
                        )
                    }
                };
                accuracy.push(AccuracyRow {
                    family: grid.family,
                    epsilon: eps,
                    threat,
                    undefended_acc,
                    defended_acc,
                    clean_filtered_acc: clean.vq_filtered_acc,
                    clean_unfiltered_acc: clean.unfiltered_acc,
                });
            }
        }
    }

    let k = cfg.diagnostic_samples.min(test.len());
    let dx = x.slice_outer(0, k)?;
    let dy = &y[..k];
    let attacked: Vec<AttackedBatch> = cfg
        .diagnostic_epsilons()
        .iter()
        .map(|&eps| {
            Ok(AttackedBatch {
                epsilon: eps,
                images: attack_batched(&m.undefended, &dx, dy, &AttackConfig::fgsm(eps))?,
            })
        })
        .collect::<Result<_>>()?;
    let depths = diagnostics::default_depths(&m.purifier);
    Ok(EvalReport {
        accuracy,
        reconstruction: diagnostics::reconstruction_divergence(&m.purifier, &m.ablation, &dx, &attacked)?,
        features: diagnostics::feature_divergence(&m.purifier, &m.ablation, &dx, &attacked, &depths)?,
        churn: diagnostics::code_churn(&m.purifier, &dx, &attacked, &depths)?,
        clean,
    })
}

/// Full run: data, training, evaluation and report files under
/// `cfg.output_dir`. The output directory is checked before any work starts.
pub fn run_pipeline(cfg: &RunConfig) -> Result<(EvalReport, TrainedModels)> {
    cfg.validate()?;
    ensure_writable(&cfg.output_dir)?;
    let resolved = cfg.resolved();
    let (train, test) = load_data(&resolved).map_err(|e| e.in_stage("load data"))?;
    let models = train_all(&resolved, &train)?;
    let report = evaluate(&resolved, &models, &test).map_err(|e| e.in_stage("evaluate"))?;
    emit_report(&report, &resolved, &cfg.output_dir).map_err(|e| e.in_stage("emit report"))?;
    Ok((report, models))
}

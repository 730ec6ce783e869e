//! Run configuration, mirrored field for field by the JSON config file.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackFamily};
use crate::classifier::ClassifierConfig;
use crate::error::{Error, Result};
use crate::model::VqUnetConfig;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Idx,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetKind,
    pub train_size: usize,
    pub test_size: usize,
    /// Synthetic only.
    pub num_classes: usize,
    /// IDX only. When no separate test pair is given, the test split is taken
    /// from the rows following the training rows.
    #[serde(default)]
    pub idx_images: Option<PathBuf>,
    #[serde(default)]
    pub idx_labels: Option<PathBuf>,
    #[serde(default)]
    pub idx_test_images: Option<PathBuf>,
    #[serde(default)]
    pub idx_test_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetKind::Synthetic,
            train_size: 4000,
            test_size: 1000,
            num_classes: 10,
            idx_images: None,
            idx_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
        }
    }
}

/// One attack family swept over an epsilon grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackGrid {
    pub family: AttackFamily,
    pub epsilons: Vec<f64>,
    /// BIM/PGD iterations.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// BIM/PGD step size as a fraction of epsilon.
    #[serde(default = "default_step_fraction")]
    pub step_fraction: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
}

fn default_steps() -> usize {
    10
}

fn default_step_fraction() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

pub const DEFAULT_EPSILONS: [f64; 6] = [0.0, 0.02, 0.05, 0.1, 0.15, 0.2];

impl AttackGrid {
    pub fn new(family: AttackFamily, epsilons: Vec<f64>) -> Self {
        AttackGrid {
            family,
            epsilons,
            steps: default_steps(),
            step_fraction: default_step_fraction(),
            random_start: true,
        }
    }

    pub fn attack(&self, epsilon: f64, seed: u64) -> AttackConfig {
        AttackConfig {
            steps: self.steps,
            step_size: epsilon * self.step_fraction,
            random_start: self.random_start,
            ..AttackConfig::for_family(self.family, epsilon, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub purifier: VqUnetConfig,
    pub classifier: ClassifierConfig,
    pub attacks: Vec<AttackGrid>,
    /// Test images used by the divergence and code-churn diagnostics.
    pub diagnostic_samples: usize,
    pub output_dir: PathBuf,
    /// Every stage seed is derived from this one.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            purifier: VqUnetConfig::default(),
            classifier: ClassifierConfig::default(),
            attacks: AttackFamily::ALL
                .iter()
                .map(|&f| AttackGrid::new(f, DEFAULT_EPSILONS.to_vec()))
                .collect(),
            diagnostic_samples: 200,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Named stage streams of the global seed.
pub const STAGES: [(&str, u64); 7] = [
    ("data_train", 1),
    ("data_test", 2),
    ("purifier", 3),
    ("classifier", 4),
    ("surrogate", 5),
    ("attack", 6),
    ("ablation", 7),
];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        let stream = STAGES
            .iter()
            .find(|(name, _)| *name == stage)
            .map(|(_, s)| *s)
            .unwrap_or_else(|| panic!("unknown stage {stage}"));
        rng::derive(self.seed, stream)
    }

    pub fn stage_seeds(&self) -> BTreeMap<String, u64> {
        STAGES.iter().map(|(n, _)| (n.to_string(), self.stage_seed(n))).collect()
    }

    /// Copy with the nested model seeds replaced by ones derived from `seed`.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.purifier.seed = self.stage_seed("purifier");
        cfg.classifier.seed = self.stage_seed("classifier");
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.purifier.validate()?;
        self.classifier.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.dataset;
        if d.train_size == 0 || d.test_size == 0 {
            return bad("dataset.train_size and dataset.test_size must be positive".into());
        }
        match d.source {
            DatasetKind::Synthetic => {
                if self.purifier.input_shape != [32, 32, 1] || self.classifier.input_shape != [32, 32, 1] {
                    return bad("synthetic images are 32x32x1; set input_shape accordingly".into());
                }
                if !(2..=10).contains(&d.num_classes) {
                    return bad(format!("dataset.num_classes must be in 2..=10, got {}", d.num_classes));
                }
                if d.num_classes > self.classifier.num_classes {
                    return bad("classifier.num_classes is smaller than dataset.num_classes".into());
                }
            }
            DatasetKind::Idx => {
                if d.idx_images.is_none() || d.idx_labels.is_none() {
                    return bad("idx datasets need dataset.idx_images and dataset.idx_labels".into());
                }
                if d.idx_test_images.is_some() != d.idx_test_labels.is_some() {
                    return bad("idx_test_images and idx_test_labels must be given together".into());
                }
            }
        }
        if self.purifier.input_shape != self.classifier.input_shape {
            return bad("purifier and classifier input shapes differ".into());
        }
        if self.attacks.is_empty() {
            return bad("at least one attack grid is required".into());
        }
        for grid in &self.attacks {
            if grid.epsilons.is_empty() {
                return bad(format!("{} epsilon list is empty", grid.family));
            }
            if grid.epsilons.windows(2).any(|w| !(w[0] < w[1])) {
                return bad(format!("{} epsilons must be strictly ascending", grid.family));
            }
            for &e in &grid.epsilons {
                grid.attack(e, 0).validate()?;
            }
        }
        if self.attacks.iter().filter(|g| g.family == AttackFamily::Fgsm).count() > 1 {
            return bad("fgsm appears more than once".into());
        }
        if self.diagnostic_samples == 0 {
            return bad("diagnostic_samples must be positive".into());
        }
        Ok(())
    }

    /// Grid for the diagnostics: the FGSM grid if present, else the first.
    pub fn diagnostic_epsilons(&self) -> &[f64] {
        self.attacks
            .iter()
            .find(|g| g.family == AttackFamily::Fgsm)
            .unwrap_or(&self.attacks[0])
            .epsilons
            .as_slice()
    }
}

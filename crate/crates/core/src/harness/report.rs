//! Evaluation results and their on-disk form.
//!
//! | file | columns |
//! |------|---------|
//! | `accuracy.csv` | `family,epsilon,threat,undefended_acc,defended_acc` |
//! | `reconstruction_divergence.csv` | `variant,epsilon,mean_l1` |
//! | `feature_divergence.csv` | `variant,stage,depth,epsilon,mean_l1` |
//! | `code_churn.csv` | `depth,epsilon,churn_fraction` |
//! | `run.json` | resolved config, stage seeds, version, clean-accuracy summary |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::diagnostics::{ChurnRow, FeatureRow, ReconstructionRow};
use crate::attack::AttackFamily;
use crate::error::{Error, Result};

pub const ACCURACY_HEADER: [&str; 5] = ["family", "epsilon", "threat", "undefended_acc", "defended_acc"];
pub const RECONSTRUCTION_HEADER: [&str; 3] = ["variant", "epsilon", "mean_l1"];
pub const FEATURE_HEADER: [&str; 5] = ["variant", "stage", "depth", "epsilon", "mean_l1"];
pub const CHURN_HEADER: [&str; 3] = ["depth", "epsilon", "churn_fraction"];

pub const VERSION: &str = concat!("vqunet-v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threat {
    White,
    Black,
}

impl Threat {
    pub fn name(self) -> &'static str {
        match self {
            Threat::White => "white",
            Threat::Black => "black",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub threat: Threat,
    pub undefended_acc: f64,
    pub defended_acc: f64,
    pub clean_filtered_acc: f64,
    pub clean_unfiltered_acc: f64,
}

/// Clean accuracies with and without filtering. Degradation is unfiltered
/// minus filtered accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanSummary {
    pub unfiltered_acc: f64,
    pub vq_filtered_acc: f64,
    pub vq_degradation: f64,
    pub non_vq_filtered_acc: f64,
    pub non_vq_degradation: f64,
    /// `"vq"` or `"non_vq"`, whichever degrades less (`"vq"` on ties).
    pub smallest_degradation: String,
}

impl CleanSummary {
    pub fn new(unfiltered_acc: f64, vq_filtered_acc: f64, non_vq_filtered_acc: f64) -> Self {
        let vq_degradation = unfiltered_acc - vq_filtered_acc;
        let non_vq_degradation = unfiltered_acc - non_vq_filtered_acc;
        CleanSummary {
            unfiltered_acc,
            vq_filtered_acc,
            vq_degradation,
            non_vq_filtered_acc,
            non_vq_degradation,
            smallest_degradation: if vq_degradation <= non_vq_degradation { "vq" } else { "non_vq" }.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: Vec<AccuracyRow>,
    pub reconstruction: Vec<ReconstructionRow>,
    pub features: Vec<FeatureRow>,
    pub churn: Vec<ChurnRow>,
    pub clean: CleanSummary,
}

impl EvalReport {
    pub fn rows_for(&self, family: AttackFamily, threat: Threat) -> impl Iterator<Item = &AccuracyRow> {
        self.accuracy
            .iter()
            .filter(move |r| r.family == family && r.threat == threat)
    }
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub stage_seeds: BTreeMap<String, u64>,
    pub clean: CleanSummary,
}

fn csv_bytes<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn accuracy_csv(report: &EvalReport) -> Result<Vec<u8>> {
    csv_bytes(
        ACCURACY_HEADER,
        report.accuracy.iter().map(|r| {
            [
                r.family.name().to_string(),
                r.epsilon.to_string(),
                r.threat.name().to_string(),
                r.undefended_acc.to_string(),
                r.defended_acc.to_string(),
            ]
        }),
    )
}

pub fn reconstruction_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let vq = report.reconstruction.iter().map(|r| ["vq".into(), r.epsilon.to_string(), r.vq_l1.to_string()]);
    let plain = report
        .reconstruction
        .iter()
        .map(|r| ["non_vq".into(), r.epsilon.to_string(), r.non_vq_l1.to_string()]);
    csv_bytes(RECONSTRUCTION_HEADER, vq.chain(plain))
}

pub fn feature_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let rows = report.features.iter().flat_map(|r| {
        let (d, e) = (r.depth.to_string(), r.epsilon.to_string());
        [
            ["vq".into(), "pre_vq".into(), d.clone(), e.clone(), r.pre_vq_l1.to_string()],
            ["vq".into(), "post_vq".into(), d.clone(), e.clone(), r.post_vq_l1.to_string()],
            ["non_vq".into(), "pre_vq".into(), d, e, r.non_vq_pre_l1.to_string()],
        ]
    });
    csv_bytes(FEATURE_HEADER, rows)
}

pub fn churn_csv(report: &EvalReport) -> Result<Vec<u8>> {
    csv_bytes(
        CHURN_HEADER,
        report
            .churn
            .iter()
            .map(|r| [r.depth.to_string(), r.epsilon.to_string(), r.churn_fraction.to_string()]),
    )
}

/// Fails early when `dir` cannot be created or written.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    let unwritable = |source| Error::Unwritable {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(unwritable)?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(unwritable)?;
    fs::remove_file(&probe).map_err(unwritable)?;
    Ok(())
}

/// Writes every report file. Contents are staged in temporary files first
/// and renamed into place only after all of them were written.
pub fn emit_report(report: &EvalReport, config: &RunConfig, out_dir: &Path) -> Result<()> {
    ensure_writable(out_dir)?;
    let manifest = RunManifest {
        version: VERSION.to_string(),
        config: config.clone(),
        stage_seeds: config.stage_seeds(),
        clean: report.clean.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("accuracy.csv", accuracy_csv(report)?),
        ("reconstruction_divergence.csv", reconstruction_csv(report)?),
        ("feature_divergence.csv", feature_csv(report)?),
        ("code_churn.csv", churn_csv(report)?),
        ("run.json", json),
    ];
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
    let outcome = (|| -> Result<()> {
        for (name, bytes) in &files {
            let tmp = out_dir.join(format!(".{name}.tmp"));
            fs::write(&tmp, bytes)?;
            staged.push((tmp, out_dir.join(name)));
        }
        for (tmp, dst) in &staged {
            fs::rename(tmp, dst)?;
        }
        Ok(())
    })();
    if outcome.is_err() {
        for (tmp, _) in &staged {
            let _ = fs::remove_file(tmp);
        }
    }
    outcome
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

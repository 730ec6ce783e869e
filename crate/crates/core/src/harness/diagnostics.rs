//! How far adversarial noise travels through the purifier: reconstruction
//! divergence, per-depth feature divergence and code churn.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DepthFeatures, Purifier, VqUnet};
use crate::tensor::Tensor;

/// Attacked copies of one clean batch, one per epsilon (ascending).
#[derive(Clone, Debug)]
pub struct AttackedBatch {
    pub epsilon: f64,
    pub images: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub epsilon: f64,
    /// Mean |x - purify(x_adv)| for the VQ model.
    pub vq_l1: f64,
    /// Same for the non-VQ ablation.
    pub non_vq_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub depth: usize,
    pub epsilon: f64,
    /// Mean |a_d(x) - a_d(x_adv)| in the VQ model.
    pub pre_vq_l1: f64,
    /// Mean |q_d(x) - q_d(x_adv)| in the VQ model.
    pub post_vq_l1: f64,
    /// Mean |a_d(x) - a_d(x_adv)| in the non-VQ ablation.
    pub non_vq_pre_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnRow {
    pub depth: usize,
    pub epsilon: f64,
    pub churn_fraction: f64,
}

/// Depths `1..=min(3, depth)`, the ones the diagnostics cover by default.
pub fn default_depths(model: &VqUnet) -> Vec<usize> {
    (1..=model.config().depth.min(3)).collect()
}

fn check_pair(vq: &VqUnet, non_vq: &VqUnet) -> Result<()> {
    if !vq.config().vq_enabled {
        return Err(Error::Config("diagnostics need a VQ-enabled purifier".into()));
    }
    if non_vq.config().vq_enabled {
        return Err(Error::Config("the ablation purifier must have vq_enabled = false".into()));
    }
    Ok(())
}

fn check_depths(model: &VqUnet, depths: &[usize]) -> Result<()> {
    let max = model.config().depth;
    if let Some(&d) = depths.iter().find(|&&d| d == 0 || d > max) {
        return Err(Error::InvalidArgument(format!("depth {d} outside 1..={max}")));
    }
    Ok(())
}

pub fn reconstruction_divergence(
    vq: &VqUnet,
    non_vq: &VqUnet,
    clean: &Tensor,
    attacked: &[AttackedBatch],
) -> Result<Vec<ReconstructionRow>> {
    check_pair(vq, non_vq)?;
    attacked
        .iter()
        .map(|b| {
            Ok(ReconstructionRow {
                epsilon: b.epsilon,
                vq_l1: clean.mean_abs_diff(&vq.purify(&b.images)?)?,
                non_vq_l1: clean.mean_abs_diff(&non_vq.purify(&b.images)?)?,
            })
        })
        .collect()
}

fn pick(features: &[DepthFeatures], depth: usize) -> &DepthFeatures {
    &features[depth - 1]
}

pub fn feature_divergence(
    vq: &VqUnet,
    non_vq: &VqUnet,
    clean: &Tensor,
    attacked: &[AttackedBatch],
    depths: &[usize],
) -> Result<Vec<FeatureRow>> {
    check_pair(vq, non_vq)?;
    check_depths(vq, depths)?;
    check_depths(non_vq, depths)?;
    let clean_vq = vq.features(clean)?;
    let clean_plain = non_vq.features(clean)?;
    let mut per_eps = Vec::with_capacity(attacked.len());
    for b in attacked {
        per_eps.push((b.epsilon, vq.features(&b.images)?, non_vq.features(&b.images)?));
    }
    let mut rows = Vec::new();
    for &d in depths {
        for (eps, adv_vq, adv_plain) in &per_eps {
            let (c, a) = (pick(&clean_vq, d), pick(adv_vq, d));
            rows.push(FeatureRow {
                depth: d,
                epsilon: *eps,
                pre_vq_l1: c.pre_vq.mean_abs_diff(&a.pre_vq)?,
                post_vq_l1: c.post_vq.mean_abs_diff(&a.post_vq)?,
                non_vq_pre_l1: pick(&clean_plain, d).pre_vq.mean_abs_diff(&pick(adv_plain, d).pre_vq)?,
            });
        }
    }
    Ok(rows)
}

/// Fraction of positions whose selected code changes under attack.
pub fn code_churn(vq: &VqUnet, clean: &Tensor, attacked: &[AttackedBatch], depths: &[usize]) -> Result<Vec<ChurnRow>> {
    if !vq.config().vq_enabled {
        return Err(Error::Config("code churn needs a VQ-enabled purifier".into()));
    }
    check_depths(vq, depths)?;
    let base = vq.features(clean)?;
    let per_eps: Vec<(f64, Vec<DepthFeatures>)> = attacked
        .iter()
        .map(|b| Ok((b.epsilon, vq.features(&b.images)?)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &d in depths {
        let before = &pick(&base, d).indices;
        for (eps, feats) in &per_eps {
            let after = &pick(feats, d).indices;
            let changed = before.iter().zip(after).filter(|(a, b)| a != b).count();
            rows.push(ChurnRow {
                depth: d,
                epsilon: *eps,
                churn_fraction: changed as f64 / before.len().max(1) as f64,
            });
        }
    }
    Ok(rows)
}

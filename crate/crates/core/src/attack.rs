//! Untargeted gradient-sign attacks under an l-infinity budget.
//!
//! All three families share one loop: start from `x` (or a uniform point in
//! the ball for PGD), take `steps` signed-gradient steps of `step_size` on the
//! cross-entropy, and project back after every step. FGSM is that loop with one
//! step of size `epsilon`.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::model::Purifier;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 3] = [AttackFamily::Fgsm, AttackFamily::Bim, AttackFamily::Pgd];

    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Bim => "bim",
            AttackFamily::Pgd => "pgd",
        }
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f64,
    /// Ignored for FGSM, which always takes one step.
    pub steps: usize,
    /// Ignored for FGSM, which always steps by `epsilon`.
    pub step_size: f64,
    /// Only PGD honours this.
    pub random_start: bool,
    pub clip: [f64; 2],
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            family: AttackFamily::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            clip: [0.0, 1.0],
            seed: 0,
        }
    }

    /// Ten steps of `epsilon / 4`.
    pub fn bim(epsilon: f64) -> Self {
        AttackConfig {
            family: AttackFamily::Bim,
            steps: 10,
            step_size: epsilon / 4.0,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn pgd(epsilon: f64, seed: u64) -> Self {
        AttackConfig {
            family: AttackFamily::Pgd,
            random_start: true,
            seed,
            ..Self::bim(epsilon)
        }
    }

    pub fn for_family(family: AttackFamily, epsilon: f64, seed: u64) -> Self {
        match family {
            AttackFamily::Fgsm => Self::fgsm(epsilon),
            AttackFamily::Bim => Self::bim(epsilon),
            AttackFamily::Pgd => Self::pgd(epsilon, seed),
        }
    }

    /// `(steps, step_size, random_start)` actually used.
    pub fn schedule(&self) -> (usize, f64, bool) {
        match self.family {
            AttackFamily::Fgsm => (1, self.epsilon, false),
            AttackFamily::Bim => (self.steps, self.step_size, false),
            AttackFamily::Pgd => (self.steps, self.step_size, self.random_start),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("attack: {m}")));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        let [lo, hi] = self.clip;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("clip range [{lo}, {hi}] is not an interval"));
        }
        let (steps, step_size, _) = self.schedule();
        if steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(step_size.is_finite() && step_size >= 0.0) || (steps > 1 && self.epsilon > 0.0 && step_size <= 0.0) {
            return bad(format!("step_size must be > 0 when steps > 1, got {step_size}"));
        }
        Ok(())
    }
}

/// Source of attack gradients: the mean cross-entropy of `x` against `labels`
/// and its gradient with respect to `x`.
pub trait InputGradient {
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `p` onto the intersection of the l-infinity ball of radius `eps`
/// around `x` and `[lo, hi]`, such that the computed `|p - x|` never exceeds
/// `eps` despite rounding. `x` must lie in `[lo, hi]`.
pub fn project(p: f64, x: f64, eps: f64, lo: f64, hi: f64) -> f64 {
    let mut p = p.clamp(x - eps, x + eps).clamp(lo, hi);
    if p.is_nan() {
        return x;
    }
    while (p - x).abs() > eps {
        p = if p > x { p.next_down() } else { p.next_up() };
    }
    p
}

fn check_inputs(x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    let n = x.shape().first().copied().unwrap_or(0);
    if n != labels.len() {
        return Err(Error::shape(
            "attack",
            format!("{} images but {} labels", n, labels.len()),
        ));
    }
    let [lo, hi] = cfg.clip;
    if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !(**v >= lo && **v <= hi)) {
        return Err(Error::PixelRange { index, value });
    }
    Ok(())
}

/// Runs the attack, calling `observe(step, x_adv)` after every projected step
/// (steps count from 1).
pub fn generate_with(
    model: &dyn InputGradient,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    check_inputs(x, labels, cfg)?;
    let (steps, step_size, random_start) = cfg.schedule();
    let eps = cfg.epsilon;
    let [lo, hi] = cfg.clip;
    let mut adv = x.clone();
    if random_start && eps > 0.0 {
        let mut r = rng::from_seed(cfg.seed);
        for (a, &x0) in adv.data_mut().iter_mut().zip(x.data()) {
            let start = x0 + r.gen_range(-eps..=eps);
            *a = project(start, x0, eps, lo, hi);
        }
    }
    for step in 1..=steps {
        let (_, grad) = model.loss_and_input_grad(&adv, labels)?;
        for ((a, &x0), &g) in adv.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
            *a = project(*a + step_size * sign(g), x0, eps, lo, hi);
        }
        observe(step, &adv);
    }
    Ok(adv)
}

pub fn generate(model: &dyn InputGradient, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    generate_with(model, x, labels, cfg, &mut |_, _| {})
}

/// One signed-gradient step of size `epsilon`.
pub fn fgsm(model: &dyn InputGradient, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    generate(model, x, labels, &AttackConfig::fgsm(epsilon))
}

/// Iterated FGSM with projection; `cfg.family` is ignored.
pub fn bim(model: &dyn InputGradient, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    let cfg = AttackConfig {
        family: AttackFamily::Bim,
        ..cfg.clone()
    };
    generate(model, x, labels, &cfg)
}

/// BIM from a uniform random point of the ball when `cfg.random_start` is set.
pub fn pgd(model: &dyn InputGradient, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    let cfg = AttackConfig {
        family: AttackFamily::Pgd,
        ..cfg.clone()
    };
    generate(model, x, labels, &cfg)
}

/// Crafts examples on `surrogate` and returns the accuracy of `target`
/// (behind `purifier`, if any) on them.
pub fn transfer_attack(
    surrogate: &dyn InputGradient,
    target: &Classifier,
    purifier: Option<&dyn Purifier>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<f64> {
    let adv = generate(surrogate, x, labels, cfg)?;
    target.accuracy_on(&adv, labels, purifier)
}

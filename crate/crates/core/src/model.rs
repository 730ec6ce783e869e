//! The U-shaped purifier.
//!
//! Data flow for `depth = D`:
//!
//! ```text
//! x -> stem conv -> [encoder d: stride-2 conv, 2 residual blocks -> a_d -> VQ_d -> q_d*] x D
//!   -> bottleneck (conv, 2 residual blocks)
//!   -> [decoder d: stride-2 transposed conv, concat q_{d-1}* (if d > 1), conv] for d = D..1
//!   -> output conv -> clip [0, 1]
//! ```
//!
//! Training minimizes `alpha * L_reconst + beta * L_E + L_Q`, with the
//! encoder and codebook terms summed over depths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelKind};
use crate::error::{CheckpointError, Error, Result};
use crate::layers::{Conv2d, ConvTranspose2d, ResidualBlock};
use crate::rng;
use crate::tensor::{Adam, Graph, NodeId, ParamStore, Tensor};
use crate::vq::{self, Codebook, QuantizationResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqUnetConfig {
    /// `[H, W, C]`.
    pub input_shape: [usize; 3],
    /// Number of stride-2 encoder levels.
    pub depth: usize,
    /// Width of the full-resolution stem convolution.
    pub stem_channels: usize,
    pub channels: Vec<usize>,
    pub codebook_k: Vec<usize>,
    /// `false` builds the ablation with every quantizer bypassed.
    pub vq_enabled: bool,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for VqUnetConfig {
    fn default() -> Self {
        VqUnetConfig {
            input_shape: [32, 32, 1],
            depth: 4,
            stem_channels: 32,
            channels: vec![64, 128, 256, 512],
            codebook_k: vec![128; 4],
            vq_enabled: true,
            alpha: 1.0,
            beta: 1.0,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        }
    }
}

impl VqUnetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("purifier: {m}")));
        let [h, w, c] = self.input_shape;
        if self.depth == 0 || self.depth > 16 {
            return bad(format!("depth must be in 1..=16, got {}", self.depth));
        }
        let f = 1usize << self.depth;
        if h == 0 || w == 0 || c == 0 || h % f != 0 || w % f != 0 {
            return bad(format!(
                "input {h}x{w}x{c} must be nonempty with H and W divisible by 2^{}",
                self.depth
            ));
        }
        if self.channels.len() != self.depth || self.codebook_k.len() != self.depth {
            return bad(format!(
                "channels ({}) and codebook_k ({}) must both have depth ({}) entries",
                self.channels.len(),
                self.codebook_k.len(),
                self.depth
            ));
        }
        if self.stem_channels == 0 || self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.vq_enabled && self.codebook_k.iter().any(|&k| k < 2) {
            return bad("every codebook needs K >= 2".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    fn same_architecture(&self, other: &VqUnetConfig) -> Option<String> {
        if self.vq_enabled != other.vq_enabled {
            return Some(format!(
                "vq_enabled is {} in the checkpoint but {} here",
                other.vq_enabled, self.vq_enabled
            ));
        }
        let lhs = (self.input_shape, self.depth, self.stem_channels, &self.channels, &self.codebook_k);
        let rhs = (other.input_shape, other.depth, other.stem_channels, &other.channels, &other.codebook_k);
        (lhs != rhs).then(|| format!("architecture {rhs:?} does not match {lhs:?}"))
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    down: Conv2d,
    res: [ResidualBlock; 2],
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up: ConvTranspose2d,
    refine: Conv2d,
}

/// Scalar loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reconst: f64,
    pub l_e: f64,
    pub l_q: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combines the three terms exactly as the training graph does.
    pub fn combine(alpha: f64, beta: f64, l_reconst: f64, l_e: f64, l_q: f64) -> Self {
        LossBreakdown {
            l_reconst,
            l_e,
            l_q,
            total: alpha * l_reconst + beta * l_e + l_q,
        }
    }
}

/// Per-epoch, sample-weighted mean losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<LossBreakdown>,
}

/// Graph handles of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub input: NodeId,
    /// Output projection before clipping; the reconstruction loss reads this
    /// so pixels pushed outside `[0, 1]` keep a gradient.
    pub projection: NodeId,
    pub reconstruction: NodeId,
    pub bottleneck: NodeId,
    pub per_depth: Vec<QuantizationResult>,
}

/// Loss graph handles.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_reconst: NodeId,
    pub l_e: NodeId,
    pub l_q: NodeId,
    pub total: NodeId,
}

/// Encoder features of one depth, evaluated without gradients.
#[derive(Clone, Debug)]
pub struct DepthFeatures {
    pub depth: usize,
    pub pre_vq: Tensor,
    pub post_vq: Tensor,
    pub indices: Vec<usize>,
}

/// Anything that maps images to filtered images of the same shape.
pub trait Purifier {
    fn purify(&self, x: &Tensor) -> Result<Tensor>;
}

/// The no-op filter.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Purifier for Identity {
    fn purify(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

#[derive(Clone, Debug)]
pub struct VqUnet {
    config: VqUnetConfig,
    store: ParamStore,
    stem: Conv2d,
    encoders: Vec<EncoderBlock>,
    codebooks: Vec<Codebook>,
    bottleneck: (Conv2d, [ResidualBlock; 2]),
    decoders: Vec<DecoderBlock>,
    head: Conv2d,
}

impl VqUnet {
    pub fn new(config: VqUnetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::from_seed(rng::derive(config.seed, 0x1417));
        let mut store = ParamStore::new();
        let c_in = config.input_shape[2];
        let stem = Conv2d::new(&mut store, "stem", (c_in, config.stem_channels, 3, 1), 2.0, &mut rng);

        let mut encoders = Vec::with_capacity(config.depth);
        let mut codebooks = Vec::new();
        let mut prev = config.stem_channels;
        for (d, &ch) in config.channels.iter().enumerate() {
            let name = format!("enc{}", d + 1);
            let down = Conv2d::new(&mut store, &format!("{name}.down"), (prev, ch, 3, 2), 2.0, &mut rng);
            let res = [
                ResidualBlock::new(&mut store, &format!("{name}.res0"), ch, &mut rng),
                ResidualBlock::new(&mut store, &format!("{name}.res1"), ch, &mut rng),
            ];
            encoders.push(EncoderBlock { down, res });
            if config.vq_enabled {
                codebooks.push(Codebook::new(&mut store, d + 1, config.codebook_k[d], ch, &mut rng)?);
            }
            prev = ch;
        }

        let deepest = *config.channels.last().unwrap();
        let bottleneck = (
            Conv2d::new(&mut store, "mid.conv", (deepest, deepest, 3, 1), 2.0, &mut rng),
            [
                ResidualBlock::new(&mut store, "mid.res0", deepest, &mut rng),
                ResidualBlock::new(&mut store, "mid.res1", deepest, &mut rng),
            ],
        );

        let mut decoders = Vec::with_capacity(config.depth);
        let mut prev = deepest;
        for level in (1..=config.depth).rev() {
            let target = if level >= 2 {
                config.channels[level - 2]
            } else {
                config.stem_channels
            };
            let skip = if level >= 2 { config.channels[level - 2] } else { 0 };
            let name = format!("dec{level}");
            let up = ConvTranspose2d::new(&mut store, &format!("{name}.up"), (prev, target, 3, 2), &mut rng);
            let refine = Conv2d::new(&mut store, &format!("{name}.refine"), (target + skip, target, 3, 1), 2.0, &mut rng);
            decoders.push(DecoderBlock { up, refine });
            prev = target;
        }
        let head = Conv2d::new(&mut store, "head", (config.stem_channels, c_in, 3, 1), 1.0, &mut rng);

        Ok(VqUnet {
            config,
            store,
            stem,
            encoders,
            codebooks,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &VqUnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, h, w, c] = x.dims4("vqunet")?;
        if [h, w, c] != self.config.input_shape {
            return Err(Error::shape(
                "vqunet",
                format!("input {:?} does not match configured {:?}", x.shape(), self.config.input_shape),
            ));
        }
        Ok(())
    }

    /// Records a forward pass of `x` into `g`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<Forward> {
        self.check_input(g.value(x))?;
        let s = &self.store;
        let h = self.stem.forward(g, s, x)?;
        let mut h = g.relu(h)?;

        let mut per_depth = Vec::with_capacity(self.config.depth);
        for (d, enc) in self.encoders.iter().enumerate() {
            h = enc.down.forward(g, s, h)?;
            h = g.relu(h)?;
            for r in &enc.res {
                h = r.forward(g, s, h)?;
            }
            let result = match self.codebooks.get(d) {
                Some(cb) => vq::quantize(g, s, h, cb)?,
                None => QuantizationResult::passthrough(d + 1, h),
            };
            h = result.q_star;
            per_depth.push(result);
        }

        h = self.bottleneck.0.forward(g, s, h)?;
        h = g.relu(h)?;
        for r in &self.bottleneck.1 {
            h = r.forward(g, s, h)?;
        }
        let bottleneck = h;

        for (i, dec) in self.decoders.iter().enumerate() {
            let level = self.config.depth - i;
            h = dec.up.forward(g, s, h)?;
            h = g.relu(h)?;
            if level >= 2 {
                h = g.concat_channels(h, per_depth[level - 2].q_star)?;
            }
            h = dec.refine.forward(g, s, h)?;
            h = g.relu(h)?;
        }
        let out = self.head.forward(g, s, h)?;
        let reconstruction = g.clip(out, 0.0, 1.0)?;
        Ok(Forward {
            input: x,
            projection: out,
            reconstruction,
            bottleneck,
            per_depth,
        })
    }

    /// Records the three loss terms and their weighted total.
    pub fn loss_nodes(&self, g: &mut Graph, fwd: &Forward) -> Result<LossNodes> {
        let l_reconst = g.mse(fwd.input, fwd.projection)?;
        let l_e = sum_terms(g, fwd.per_depth.iter().filter_map(|r| r.loss_e))?;
        let l_q = sum_terms(g, fwd.per_depth.iter().filter_map(|r| r.loss_q))?;
        let wr = g.scale(l_reconst, self.config.alpha)?;
        let we = g.scale(l_e, self.config.beta)?;
        let partial = g.add(wr, we)?;
        let total = g.add(partial, l_q)?;
        Ok(LossNodes {
            l_reconst,
            l_e,
            l_q,
            total,
        })
    }

    pub fn loss(&self, x: &Tensor) -> Result<LossBreakdown> {
        let mut g = Graph::frozen();
        let xn = g.input(x.clone());
        let fwd = self.forward(&mut g, xn)?;
        let nodes = self.loss_nodes(&mut g, &fwd)?;
        breakdown(&g, &nodes)
    }

    /// Mini-batch training on `images` (`[N, H, W, C]` in `[0, 1]`) for the
    /// configured number of epochs.
    pub fn train(&mut self, images: &Tensor) -> Result<TrainingLog> {
        self.train_with(images, |_, _| {})
    }

    /// As [`VqUnet::train`], calling `on_epoch(epoch, mean_losses)` after each epoch.
    pub fn train_with(&mut self, images: &Tensor, mut on_epoch: impl FnMut(usize, &LossBreakdown)) -> Result<TrainingLog> {
        self.check_input(images)?;
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let optimizer = Adam::new(self.config.learning_rate);
        let mut order_rng = rng::from_seed(rng::derive(self.config.seed, 0x0DE5));
        let mut log = TrainingLog::default();
        for epoch in 0..self.config.epochs {
            let order = shuffled(n, &mut order_rng);
            let mut acc = LossBreakdown::default();
            for (batch, rows) in order.chunks(self.config.batch_size).enumerate() {
                let x = images.select_outer(rows)?;
                let mut g = Graph::new();
                let xn = g.input(x);
                let fwd = self.forward(&mut g, xn)?;
                let nodes = self.loss_nodes(&mut g, &fwd)?;
                let b = breakdown(&g, &nodes)?;
                for (term, v) in [("l_reconst", b.l_reconst), ("l_e", b.l_e), ("l_q", b.l_q), ("total loss", b.total)] {
                    if !v.is_finite() {
                        return Err(Error::NonFinite { term, epoch, batch });
                    }
                }
                g.backward(nodes.total, &mut self.store)?;
                optimizer.step(&mut self.store)?;
                let w = rows.len() as f64;
                acc.l_reconst += w * b.l_reconst;
                acc.l_e += w * b.l_e;
                acc.l_q += w * b.l_q;
                acc.total += w * b.total;
            }
            let inv = 1.0 / n as f64;
            let mean = LossBreakdown {
                l_reconst: acc.l_reconst * inv,
                l_e: acc.l_e * inv,
                l_q: acc.l_q * inv,
                total: acc.total * inv,
            };
            on_epoch(epoch, &mean);
            log.epochs.push(mean);
        }
        Ok(log)
    }

    fn batches(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let step = self.config.batch_size.max(1);
        (0..n).step_by(step).map(|s| x.slice_outer(s, (s + step).min(n))).collect()
    }

    /// Encoder features and selected codes at every depth.
    pub fn features(&self, x: &Tensor) -> Result<Vec<DepthFeatures>> {
        let mut parts: Vec<Vec<DepthFeatures>> = Vec::new();
        for batch in self.batches(x)? {
            let mut g = Graph::frozen();
            let xn = g.input(batch);
            let fwd = self.forward(&mut g, xn)?;
            parts.push(
                fwd.per_depth
                    .iter()
                    .map(|r| DepthFeatures {
                        depth: r.depth,
                        pre_vq: g.value(r.a).clone(),
                        post_vq: g.value(r.q_star).clone(),
                        indices: r.indices.clone(),
                    })
                    .collect(),
            );
        }
        let mut out = Vec::with_capacity(self.config.depth);
        for d in 0..self.config.depth {
            let pre: Vec<Tensor> = parts.iter().map(|p| p[d].pre_vq.clone()).collect();
            let post: Vec<Tensor> = parts.iter().map(|p| p[d].post_vq.clone()).collect();
            out.push(DepthFeatures {
                depth: d + 1,
                pre_vq: Tensor::concat_outer(&pre)?,
                post_vq: Tensor::concat_outer(&post)?,
                indices: parts.iter().flat_map(|p| p[d].indices.iter().copied()).collect(),
            });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.config)?;
        checkpoint::save(path, ModelKind::Purifier, &json, &self.store)
    }

    /// Rebuilds a model from the config stored in the checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let decoded = checkpoint::load(path, ModelKind::Purifier)?;
        let config: VqUnetConfig = serde_json::from_str(&decoded.config_json)
            .map_err(|e| CheckpointError::ConfigMismatch(e.to_string()))?;
        let mut model = VqUnet::new(config)?;
        checkpoint::restore(&mut model.store, decoded.params)?;
        Ok(model)
    }

    /// Loads weights into this model; the checkpoint architecture, including
    /// `vq_enabled`, must match.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let decoded = checkpoint::load(path, ModelKind::Purifier)?;
        let stored: VqUnetConfig = serde_json::from_str(&decoded.config_json)
            .map_err(|e| CheckpointError::ConfigMismatch(e.to_string()))?;
        if let Some(why) = self.config.same_architecture(&stored) {
            return Err(CheckpointError::ConfigMismatch(why).into());
        }
        checkpoint::restore(&mut self.store, decoded.params)?;
        Ok(())
    }
}

impl Purifier for VqUnet {
    /// Forward reconstruction without gradients, already clipped to `[0, 1]`.
    fn purify(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::new();
        for batch in self.batches(x)? {
            let mut g = Graph::frozen();
            let xn = g.input(batch);
            let fwd = self.forward(&mut g, xn)?;
            parts.push(g.value(fwd.reconstruction).clone());
        }
        if parts.is_empty() {
            return Ok(x.clone());
        }
        Tensor::concat_outer(&parts)
    }
}

fn sum_terms(g: &mut Graph, mut terms: impl Iterator<Item = NodeId>) -> Result<NodeId> {
    let Some(first) = terms.next() else {
        return Ok(g.input(Tensor::scalar(0.0)));
    };
    terms.try_fold(first, |acc, t| g.add(acc, t))
}

fn breakdown(g: &Graph, n: &LossNodes) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        l_reconst: g.value(n.l_reconst).item()?,
        l_e: g.value(n.l_e).item()?,
        l_q: g.value(n.l_q).item()?,
        total: g.value(n.total).item()?,
    })
}

pub(crate) fn shuffled(n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

//! Small residual CNN standing in for the defended target model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::InputGradient;
use crate::checkpoint::{self, ModelKind};
use crate::error::{CheckpointError, Error, Result};
use crate::harness::Dataset;
use crate::layers::{Conv2d, Linear, ResidualBlock};
use crate::model::{shuffled, Purifier};
use crate::rng;
use crate::tensor::{graph_softmax_rows, Adam, Graph, NodeId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Width of each stage; every stage after the first halves the resolution.
    pub channels: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            input_shape: [32, 32, 1],
            num_classes: 10,
            channels: vec![32, 64, 128],
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("classifier: {m}")));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a nonempty list of positive widths".into());
        }
        if self.input_shape.contains(&0) {
            return bad("input_shape must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<Conv2d>,
    res: ResidualBlock,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    store: ParamStore,
    stem: Conv2d,
    stages: Vec<Stage>,
    head: Linear,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::from_seed(rng::derive(config.seed, 0xC1A5));
        let mut store = ParamStore::new();
        let first = config.channels[0];
        let stem = Conv2d::new(&mut store, "stem", (config.input_shape[2], first, 3, 1), 2.0, &mut rng);
        let mut stages = Vec::new();
        let mut prev = first;
        for (i, &ch) in config.channels.iter().enumerate() {
            let down = (i > 0).then(|| {
                Conv2d::new(&mut store, &format!("stage{i}.down"), (prev, ch, 3, 2), 2.0, &mut rng)
            });
            let res = ResidualBlock::new(&mut store, &format!("stage{i}.res"), ch, &mut rng);
            stages.push(Stage { down, res });
            prev = ch;
        }
        let head = Linear::new(&mut store, "head", prev, config.num_classes, &mut rng);
        Ok(Classifier {
            config,
            store,
            stem,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, h, w, c] = x.dims4("classifier")?;
        if [h, w, c] != self.config.input_shape {
            return Err(Error::shape(
                "classifier",
                format!("input {:?} does not match configured {:?}", x.shape(), self.config.input_shape),
            ));
        }
        Ok(())
    }

    /// Records the logits `[N, num_classes]` of `x`.
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.check_input(g.value(x))?;
        let s = &self.store;
        let h = self.stem.forward(g, s, x)?;
        let mut h = g.relu(h)?;
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                h = down.forward(g, s, h)?;
                h = g.relu(h)?;
            }
            h = stage.res.forward(g, s, h)?;
        }
        let pooled = g.global_avg_pool(h)?;
        self.head.forward(g, s, pooled)
    }

    fn batches(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let step = 128;
        (0..n).step_by(step).map(|s| x.slice_outer(s, (s + step).min(n))).collect()
    }

    pub fn logit_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::new();
        for b in self.batches(x)? {
            let mut g = Graph::frozen();
            let xn = g.input(b);
            let l = self.logits(&mut g, xn)?;
            parts.push(g.value(l).clone());
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.num_classes]));
        }
        Tensor::concat_outer(&parts)
    }

    /// Per-class probabilities `[N, num_classes]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logit_values(x)?;
        let k = self.config.num_classes;
        Tensor::new(logits.shape().to_vec(), graph_softmax_rows(logits.data(), k))
    }

    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logit_values(x)?;
        Ok(logits
            .data()
            .chunks_exact(self.config.num_classes)
            .map(argmax)
            .collect())
    }

    /// Fraction of correct argmax predictions, optionally filtering the
    /// images through `purifier` first.
    pub fn accuracy(&self, data: &Dataset, purifier: Option<&dyn Purifier>) -> Result<f64> {
        self.accuracy_on(&data.images, &data.labels, purifier)
    }

    pub fn accuracy_on(&self, images: &Tensor, labels: &[usize], purifier: Option<&dyn Purifier>) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let filtered;
        let x = match purifier {
            Some(p) => {
                filtered = p.purify(images)?;
                &filtered
            }
            None => images,
        };
        let pred = self.predict_labels(x)?;
        if pred.len() != labels.len() {
            return Err(Error::shape(
                "accuracy",
                format!("{} images but {} labels", pred.len(), labels.len()),
            ));
        }
        let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Trains a fresh classifier with cross-entropy; returns it and the
    /// per-epoch mean loss.
    pub fn train(data: &Dataset, config: ClassifierConfig) -> Result<(Classifier, Vec<f64>)> {
        let mut model = Classifier::new(config)?;
        let losses = model.fit(data)?;
        Ok((model, losses))
    }

    pub fn fit(&mut self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_input(&data.images)?;
        let n = data.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: self.config.num_classes,
            });
        }
        let optimizer = Adam::new(self.config.learning_rate);
        let mut order_rng = rng::from_seed(rng::derive(self.config.seed, 0x0DE5));
        let mut losses = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let order = shuffled(n, &mut order_rng);
            let mut total = 0.0;
            for (batch, rows) in order.chunks(self.config.batch_size).enumerate() {
                let x = data.images.select_outer(rows)?;
                let y: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
                let mut g = Graph::new();
                let xn = g.input(x);
                let logits = self.logits(&mut g, xn)?;
                let loss = g.softmax_cross_entropy(logits, &y)?;
                let lv = g.value(loss).item()?;
                if !lv.is_finite() {
                    return Err(Error::NonFinite {
                        term: "cross-entropy",
                        epoch,
                        batch,
                    });
                }
                g.backward(loss, &mut self.store)?;
                optimizer.step(&mut self.store)?;
                total += lv * rows.len() as f64;
            }
            losses.push(total / n as f64);
        }
        Ok(losses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.config)?;
        checkpoint::save(path, ModelKind::Classifier, &json, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let decoded = checkpoint::load(path, ModelKind::Classifier)?;
        let config: ClassifierConfig = serde_json::from_str(&decoded.config_json)
            .map_err(|e| CheckpointError::ConfigMismatch(e.to_string()))?;
        let mut model = Classifier::new(config)?;
        checkpoint::restore(&mut model.store, decoded.params)?;
        Ok(model)
    }
}

impl InputGradient for Classifier {
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Graph::frozen();
        let xn = g.variable(x.clone());
        let logits = self.logits(&mut g, xn)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let grads = g.gradients(loss)?;
        Ok((g.value(loss).item()?, grads.wrt(&g, xn)))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

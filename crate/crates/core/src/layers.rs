//! Parameterized building blocks shared by the purifier and the classifier.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Padding, ParamId, ParamStore, Tensor};

fn he_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let std = (gain / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (in_c, out_c, size, stride): (usize, usize, usize, usize),
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            he_normal(&[size, size, in_c, out_c], size * size * in_c, gain, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        Conv2d {
            kernel,
            bias,
            stride,
            padding: Padding::Same,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, k, self.stride, self.padding)?;
        g.bias_add(y, b)
    }
}

/// Transposed convolution; kernel stored as `[Kh, Kw, Cout, Cin]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (in_c, out_c, size, stride): (usize, usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        // Each output pixel sees about size²/stride² input taps per channel.
        let fan_in = (size * size * in_c / (stride * stride)).max(1);
        let kernel = store.add(
            format!("{name}.kernel"),
            he_normal(&[size, size, out_c, in_c], fan_in, 2.0, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        ConvTranspose2d {
            kernel,
            bias,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.conv_transpose2d(x, k, self.stride)?;
        g.bias_add(y, b)
    }
}

/// `relu(x + conv(relu(conv(x))))`, channel count preserved.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Self {
        let first = Conv2d::new(store, &format!("{name}.0"), (channels, channels, 3, 1), 2.0, rng);
        // Small residual branch at init keeps deep stacks near identity.
        let second = Conv2d::new(store, &format!("{name}.1"), (channels, channels, 3, 1), 0.5, rng);
        ResidualBlock { first, second }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.first.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.second.forward(g, store, h)?;
        let y = g.add(x, h)?;
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_f: usize, out_f: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(&[in_f, out_f], in_f, 1.0, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_f]));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.bias_add(y, b)
    }
}

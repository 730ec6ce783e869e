//! Per-depth codebooks and straight-through vector quantization.
//!
//! Every spatial position of a `[N, H, W, G]` feature map is one G-wide
//! vector; it is replaced by the codebook row at the smallest Euclidean
//! distance (lowest index on ties). The quantized map `q` enters the rest of
//! the network through `q* = a + stop_gradient(q - a)`, so the encoder sees an
//! identity Jacobian. Two auxiliary losses keep encoder outputs and codes in
//! the same range:
//!
//! * encoder loss `mse(stop_gradient(q), a)`: gradient reaches the encoder only;
//! * codebook loss `mse(q, stop_gradient(a))`: gradient reaches the codes only.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Codebook {
    pub codes: ParamId,
    pub depth: usize,
    k: usize,
    g: usize,
}

impl Codebook {
    /// Registers a `[k, g]` code matrix drawn uniformly from `[-1/k, 1/k]`.
    pub fn new(store: &mut ParamStore, depth: usize, k: usize, g: usize, rng: &mut Rng) -> Result<Self> {
        if k < 2 || g < 1 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs K >= 2 and G >= 1, got K={k}, G={g}"
            )));
        }
        let bound = 1.0 / k as f64;
        let init = Tensor::from_fn(&[k, g], |_| rng.gen_range(-bound..=bound));
        let codes = store.add(format!("codebook.{depth}"), init);
        Ok(Codebook { codes, depth, k, g })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn g(&self) -> usize {
        self.g
    }
}

/// Index of the row of `codes` (`[K, G]`) nearest to `v` in squared Euclidean
/// distance; the lowest index wins ties.
pub fn nearest_code(v: &[f64], codes: &Tensor) -> usize {
    let g = codes.shape()[1];
    debug_assert_eq!(v.len(), g);
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, row) in codes.data().chunks_exact(g).enumerate() {
        let d: f64 = v.iter().zip(row).map(|(a, e)| (a - e) * (a - e)).sum();
        if d < best_dist {
            best = j;
            best_dist = d;
        }
    }
    best
}

/// Nearest-code index for every G-wide vector of a channel-last tensor.
pub fn assign(a: &Tensor, codes: &Tensor) -> Result<Vec<usize>> {
    let g = codes.shape()[1];
    if a.shape().last() != Some(&g) {
        return Err(Error::shape(
            "quantize",
            format!("feature width {:?} does not match code width {g}", a.shape().last()),
        ));
    }
    Ok(a.data().chunks_exact(g).map(|v| nearest_code(v, codes)).collect())
}

/// Non-differentiable quantization: `(q, indices)`.
pub fn quantize_values(a: &Tensor, codes: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let indices = assign(a, codes)?;
    let g = codes.shape()[1];
    let mut data = Vec::with_capacity(a.len());
    for &i in &indices {
        data.extend_from_slice(&codes.data()[i * g..(i + 1) * g]);
    }
    Ok((Tensor::new(a.shape().to_vec(), data)?, indices))
}

/// Graph handles produced by quantizing one depth.
#[derive(Clone, Debug)]
pub struct QuantizationResult {
    pub depth: usize,
    /// Pre-quantization features.
    pub a: NodeId,
    /// Codebook rows selected per position.
    pub q: NodeId,
    /// Straight-through tensor fed downstream; equals `q` in value.
    pub q_star: NodeId,
    /// Selected code per spatial position, `N*H*W` entries; empty when the
    /// depth is not quantized.
    pub indices: Vec<usize>,
    pub loss_e: Option<NodeId>,
    pub loss_q: Option<NodeId>,
}

impl QuantizationResult {
    /// Unquantized depth: features pass through untouched, no VQ losses.
    pub fn passthrough(depth: usize, a: NodeId) -> Self {
        QuantizationResult {
            depth,
            a,
            q: a,
            q_star: a,
            indices: Vec::new(),
            loss_e: None,
            loss_q: None,
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.loss_q.is_some()
    }
}

pub fn quantize(graph: &mut Graph, store: &ParamStore, a: NodeId, codebook: &Codebook) -> Result<QuantizationResult> {
    let codes = store.value(codebook.codes);
    let indices = assign(graph.value(a), codes)?;
    let table = graph.param(store, codebook.codes);
    let q = graph.gather_rows(table, indices.clone(), graph.value(a).shape().to_vec())?;
    let q_star = graph.straight_through(a, q)?;
    let q_fixed = graph.stop_gradient(q);
    let loss_e = graph.mse(q_fixed, a)?;
    let a_fixed = graph.stop_gradient(a);
    let loss_q = graph.mse(q, a_fixed)?;
    Ok(QuantizationResult {
        depth: codebook.depth,
        a,
        q,
        q_star,
        indices,
        loss_e: Some(loss_e),
        loss_q: Some(loss_q),
    })
}

/// Checks that `result.q_star` equals `result.q` bit-exactly and that its
/// Jacobian with respect to `result.a` is the identity. The Jacobian is probed
/// along a random direction `r` through the random functional
/// `f = <w, q*>`: both the backpropagated directional derivative and a central
/// finite difference over the replayed tape must equal `<w, r>`.
pub fn straight_through_check(
    graph: &mut Graph,
    store: &ParamStore,
    result: &QuantizationResult,
    seed: u64,
) -> Result<bool> {
    let (qv, sv) = (graph.value(result.q), graph.value(result.q_star));
    if qv.shape() != sv.shape()
        || qv.data().iter().zip(sv.data()).any(|(x, y)| x.to_bits() != y.to_bits())
    {
        return Ok(false);
    }
    let mut rng = rng::from_seed(seed);
    let shape = sv.shape().to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let r = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let expected = w.dot(&r)?;

    let wn = graph.input(w);
    let prod = graph.mul(result.q_star, wn)?;
    let f = graph.sum(prod)?;

    let analytic = graph.gradients(f)?.wrt(graph, result.a).dot(&r)?;

    let h = 1e-6;
    let base = graph.value(result.a);
    let plus = Tensor::new(shape.clone(), base.data().iter().zip(r.data()).map(|(a, d)| a + h * d).collect())?;
    let minus = Tensor::new(shape, base.data().iter().zip(r.data()).map(|(a, d)| a - h * d).collect())?;
    let f_plus = graph.replay(store, &[(result.a, &plus)], f)?.item()?;
    let f_minus = graph.replay(store, &[(result.a, &minus)], f)?.item()?;
    let numeric = (f_plus - f_minus) / (2.0 * h);

    let tol = 1e-6 * expected.abs().max(1.0);
    Ok((analytic - expected).abs() <= tol && (numeric - expected).abs() <= tol)
}

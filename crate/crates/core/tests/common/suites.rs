//! Check suites shared by the focused test files and the acceptance runner.

use rand::Rng;
use vqunet::attack::generate_with;
use vqunet::harness::DEFAULT_EPSILONS;
use vqunet::tensor::Padding;
use vqunet::vq::{self, nearest_code, Codebook};
use vqunet::{AttackConfig, AttackFamily, Classifier, Graph, ParamStore, Tensor, VqUnet, VqUnetConfig};

use super::{leaf_gradient_error, param_gradient_error, random_tensor, rng};

pub const H: f64 = 1e-5;

/// Values in `[lo, hi]` with magnitude at least `gap`, keeping relu and clip
/// kinks out of the finite-difference stencil.
pub fn away_from_zero(shape: &[usize], gap: f64, r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(gap..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn conv2d_error(stride: usize, padding: Padding, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let x = g.variable(random_tensor(&[1, 4, 4, 2], -1.0, 1.0, &mut r));
    let k = g.variable(random_tensor(&[3, 3, 2, 2], -1.0, 1.0, &mut r));
    let y = g.conv2d(x, k, stride, padding).unwrap();
    let t = g.input(random_tensor(g.value(y).shape(), -1.0, 1.0, &mut r));
    let loss = g.mse(y, t).unwrap();
    leaf_gradient_error(&g, &ParamStore::new(), loss, &[x, k], H)
}

fn conv_transpose2d_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let x = g.variable(random_tensor(&[1, 2, 2, 3], -1.0, 1.0, &mut r));
    let k = g.variable(random_tensor(&[3, 3, 2, 3], -1.0, 1.0, &mut r));
    let y = g.conv_transpose2d(x, k, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 4, 4, 2]);
    let t = g.input(random_tensor(&[1, 4, 4, 2], -1.0, 1.0, &mut r));
    let loss = g.mse(y, t).unwrap();
    leaf_gradient_error(&g, &ParamStore::new(), loss, &[x, k], H)
}

fn relu_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let x = g.variable(away_from_zero(&[4, 8], 0.01, &mut r));
    let y = g.relu(x).unwrap();
    let w = g.input(random_tensor(&[4, 8], -1.0, 1.0, &mut r));
    let p = g.mul(y, w).unwrap();
    let loss = g.sum(p).unwrap();
    leaf_gradient_error(&g, &ParamStore::new(), loss, &[x], H)
}

fn mse_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let a = g.variable(random_tensor(&[3, 5], -1.0, 1.0, &mut r));
    let b = g.variable(random_tensor(&[3, 5], -1.0, 1.0, &mut r));
    let loss = g.mse(a, b).unwrap();
    leaf_gradient_error(&g, &ParamStore::new(), loss, &[a, b], H)
}

fn softmax_cross_entropy_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let l = g.variable(random_tensor(&[4, 3], -3.0, 3.0, &mut r));
    let loss = g.softmax_cross_entropy(l, &[2, 0, 1, 1]).unwrap();
    leaf_gradient_error(&g, &ParamStore::new(), loss, &[l], H)
}

/// Worst relative finite-difference error of each primitive.
pub fn primitive_gradient_errors() -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d same stride 1", conv2d_error(1, Padding::Same, 10)),
        ("conv2d same stride 2", conv2d_error(2, Padding::Same, 11)),
        ("conv2d valid", conv2d_error(1, Padding::Valid, 12)),
        ("conv_transpose2d", conv_transpose2d_error(13)),
        ("relu", relu_error(14)),
        ("mse", mse_error(15)),
        ("softmax cross-entropy", softmax_cross_entropy_error(16)),
    ]
}

/// Runs the straight-through identity and gradient check for `seeds`
/// random codebooks; true when all pass.
pub fn straight_through_passes(seeds: u64) -> bool {
    (0..seeds).all(|seed| {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        let cb = Codebook::new(&mut store, 1, 6, 3, &mut vqunet::rng::from_seed(seed)).unwrap();
        let mut g = Graph::new();
        let a = g.variable(random_tensor(&[2, 3, 3, 3], -0.3, 0.3, &mut r));
        let res = vq::quantize(&mut g, &store, a, &cb).unwrap();
        vq::straight_through_check(&mut g, &store, &res, seed).unwrap()
    })
}

/// The 8x8, depth-2, K=4 purifier used by the end-to-end gradient check.
pub fn tiny(vq_enabled: bool) -> VqUnetConfig {
    VqUnetConfig {
        input_shape: [8, 8, 1],
        depth: 2,
        stem_channels: 3,
        channels: vec![4, 4],
        codebook_k: vec![4, 4],
        vq_enabled,
        batch_size: 2,
        epochs: 1,
        seed: 21,
        ..VqUnetConfig::default()
    }
}

/// Every parameter of the tiny purifier against central differences of the
/// total loss, with code indices held fixed and checked unchanged.
pub fn tiny_model_gradient_error(vq_enabled: bool) -> f64 {
    let mut model = VqUnet::new(tiny(vq_enabled)).unwrap();
    // Zero biases leave some pre-activations exactly on the relu kink, where
    // the two one-sided slopes differ; probe at a generic point instead.
    let mut r = rng(25);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let p = model.params_mut().get_mut(id);
        if p.name.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
        }
    }
    let x = random_tensor(&[2, 8, 8, 1], 0.0, 1.0, &mut rng(22));
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let fwd = model.forward(&mut g, xn).unwrap();
    let losses = model.loss_nodes(&mut g, &fwd).unwrap();
    let indices: Vec<Vec<usize>> = fwd.per_depth.iter().map(|d| d.indices.clone()).collect();
    let mut probe_model = model.clone();
    param_gradient_error(&g, model.params(), losses.total, 1e-6, |store| {
        *probe_model.params_mut() = store.clone();
        let now: Vec<Vec<usize>> = probe_model.features(&x).unwrap().into_iter().map(|f| f.indices).collect();
        assert_eq!(now, indices, "a code index flipped during probing");
    })
}

/// Index of the smallest squared distance, scanning every row; first wins.
pub fn scan(v: &[f64], codes: &[Vec<f64>]) -> usize {
    let dists: Vec<f64> = codes
        .iter()
        .map(|e| e.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

pub fn table(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

/// `(pairs checked, disagreements)` between `nearest_code` and [`scan`] over
/// random codebooks.
pub fn nearest_code_vs_scan(codebooks: usize, per_book: usize, seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let (mut checked, mut wrong) = (0, 0);
    for _ in 0..codebooks {
        let k = r.gen_range(2..=16);
        let g = r.gen_range(1..=6);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..g).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let codes = table(&rows);
        for _ in 0..per_book {
            let v: Vec<f64> = (0..g).map(|_| r.gen_range(-1.5..1.5)).collect();
            if nearest_code(&v, &codes) != scan(&v, &rows) {
                wrong += 1;
            }
            checked += 1;
        }
    }
    (checked, wrong)
}

/// `(ties checked, resolved to a higher index)` over exactly tied pairs of
/// rows, built from integer coordinates so every distance is exact.
pub fn tie_resolution(cases: usize, seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let mut wrong = 0;
    for _ in 0..cases {
        let g = r.gen_range(1..=4);
        let v: Vec<f64> = (0..g).map(|_| r.gen_range(-5..=5) as f64).collect();
        let d: Vec<f64> = (0..g).map(|_| r.gen_range(1..=3) as f64).collect();
        let plus: Vec<f64> = v.iter().zip(&d).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = v.iter().zip(&d).map(|(a, b)| a - b).collect();
        let far: Vec<f64> = v.iter().map(|a| a + 100.0).collect();
        let lo = r.gen_range(0..3);
        let mut rows = vec![far; 4];
        let (first, second) = if r.gen_bool(0.5) { (plus, minus) } else { (minus, plus) };
        rows[lo] = first;
        rows[lo + 1] = second;
        if nearest_code(&v, &table(&rows)) != lo || scan(&v, &rows) != lo {
            wrong += 1;
        }
    }
    (cases, wrong)
}

/// Quantizing an already quantized tensor reproduces it with zero losses.
pub fn quantize_is_idempotent(seed: u64) -> bool {
    let mut store = ParamStore::new();
    let cb = Codebook::new(&mut store, 1, 8, 4, &mut vqunet::rng::from_seed(seed)).unwrap();
    let a = random_tensor(&[2, 3, 3, 4], -0.2, 0.2, &mut rng(seed + 1));
    let mut g = Graph::new();
    let an = g.variable(a);
    let first = vq::quantize(&mut g, &store, an, &cb).unwrap();
    let q = g.value(first.q).clone();
    let qn = g.variable(q.clone());
    let second = vq::quantize(&mut g, &store, qn, &cb).unwrap();
    g.value(second.q) == &q
        && second.indices == first.indices
        && g.value(second.loss_e.unwrap()).item().unwrap() == 0.0
        && g.value(second.loss_q.unwrap()).item().unwrap() == 0.0
}

/// Finite differences confirm the encoder loss moves only the features and
/// the codebook loss only the codebook. Returns the worst supported-direction
/// error, or `None` when any unsupported direction is nonzero.
pub fn vq_loss_supports(seeds: u64) -> Option<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut store = ParamStore::new();
        let cb = Codebook::new(&mut store, 1, 6, 3, &mut vqunet::rng::from_seed(seed)).unwrap();
        let mut g = Graph::new();
        let a = g.variable(random_tensor(&[1, 3, 3, 3], -0.4, 0.4, &mut rng(40 + seed)));
        let res = vq::quantize(&mut g, &store, a, &cb).unwrap();
        let (le, lq) = (res.loss_e.unwrap(), res.loss_q.unwrap());
        if param_gradient_error(&g, &store, le, H, |_| {}) != 0.0 || leaf_gradient_error(&g, &store, lq, &[a], H) != 0.0
        {
            return None;
        }
        let mut s = store.clone();
        g.backward(le, &mut s).unwrap();
        if s.get(cb.codes).grad.is_some() || g.gradients(lq).unwrap().wrt(&g, a).data().iter().any(|&v| v != 0.0) {
            return None;
        }
        worst = worst
            .max(leaf_gradient_error(&g, &store, le, &[a], H))
            .max(param_gradient_error(&g, &store, lq, H, |_| {}));
    }
    Some(worst)
}

/// Images with some pixels pushed onto the box edges.
pub fn edge_batch(n: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let d = vqunet::harness::synthetic_dataset(n, classes, 100 + seed).unwrap();
    let mut x = d.images.clone();
    let mut r = rng(seed);
    for v in x.data_mut() {
        match r.gen_range(0..10) {
            0 => *v = 0.0,
            1 => *v = 1.0,
            _ => {}
        }
    }
    (x, d.labels)
}

/// Pixels outside the l-infinity ball or the box, over every family, every
/// epsilon of the default grid and `seeds` seeds, scanning after every step.
/// Returns `(pixels scanned, violations)`.
pub fn attack_bound_violations(clf: &Classifier, seeds: u64, batch: usize) -> (usize, usize) {
    let classes = clf.config().num_classes.min(10);
    let (mut scanned, mut bad) = (0, 0);
    for seed in 0..seeds {
        let (x, y) = edge_batch(batch, classes, seed);
        for family in AttackFamily::ALL {
            for &eps in &DEFAULT_EPSILONS {
                let cfg = AttackConfig::for_family(family, eps, seed);
                let count = |adv: &Tensor| {
                    adv.data()
                        .iter()
                        .zip(x.data())
                        .filter(|(&a, &o)| !((a - o).abs() <= eps && (0.0..=1.0).contains(&a)))
                        .count()
                };
                let mut per_step = 0;
                let adv = generate_with(clf, &x, &y, &cfg, &mut |_, step| per_step += count(step)).unwrap();
                bad += per_step + count(&adv);
                scanned += adv.len();
            }
        }
    }
    (scanned, bad)
}

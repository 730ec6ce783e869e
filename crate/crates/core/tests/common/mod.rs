#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqunet::{Graph, NodeId, ParamStore, Tensor};

pub mod suites;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error between backpropagated gradients of `loss` with
/// respect to the leaves `vars` and central differences over the replayed tape.
pub fn leaf_gradient_error(g: &Graph, store: &ParamStore, loss: NodeId, vars: &[NodeId], h: f64) -> f64 {
    let grads = g.gradients(loss).unwrap();
    let mut worst = 0.0f64;
    for &v in vars {
        let analytic = grads.wrt(g, v);
        let base = g.value(v).clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            let fp = g.replay(store, &[(v, &plus)], loss).unwrap().item().unwrap();
            let fm = g.replay(store, &[(v, &minus)], loss).unwrap().item().unwrap();
            worst = worst.max(rel_err(analytic.data()[i], (fp - fm) / (2.0 * h)));
        }
    }
    worst
}

/// Same as [`leaf_gradient_error`] but for every scalar of every parameter,
/// perturbing the store. `on_probe` sees each perturbed store (used to assert
/// that no code index flips).
pub fn param_gradient_error(
    g: &Graph,
    store: &ParamStore,
    loss: NodeId,
    h: f64,
    mut on_probe: impl FnMut(&ParamStore),
) -> f64 {
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    g.backward(loss, &mut with_grads).unwrap();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = with_grads
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for i in 0..store.value(id).len() {
            let mut probe = store.clone();
            probe.get_mut(id).value.data_mut()[i] += h;
            on_probe(&probe);
            let fp = g.replay(&probe, &[], loss).unwrap().item().unwrap();
            probe.get_mut(id).value.data_mut()[i] -= 2.0 * h;
            on_probe(&probe);
            let fm = g.replay(&probe, &[], loss).unwrap().item().unwrap();
            worst = worst.max(rel_err(analytic.data()[i], (fp - fm) / (2.0 * h)));
        }
    }
    worst
}

/// Direct nested-loop cross-correlation with TF-style `same` or `valid`
/// padding, written independently of the library kernels.
pub fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, same: bool) -> Tensor {
    let s = x.shape();
    let (n, h, w, ci) = (s[0], s[1], s[2], s[3]);
    let ks = k.shape();
    let (kh, kw, co) = (ks[0], ks[1], ks[3]);
    let (oh, ow, pt, pl) = if same {
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(w);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
    };
    let mut out = vec![0.0; n * oh * ow * co];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - pt as isize;
                            let ix = (ox * stride + dx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                let xv = x.data()[((b * h + iy as usize) * w + ix as usize) * ci + c];
                                let kv = k.data()[((dy * kw + dx) * ci + c) * co + o];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, co], out).unwrap()
}

/// Seconds-scale pipeline config: 2 classes, tiny models, two epsilons.
pub fn tiny_run_config(out: &std::path::Path) -> vqunet::RunConfig {
    use vqunet::harness::AttackGrid;
    use vqunet::AttackFamily;
    let mut cfg = vqunet::RunConfig::default();
    cfg.dataset.train_size = 48;
    cfg.dataset.test_size = 24;
    cfg.dataset.num_classes = 2;
    cfg.purifier = vqunet::VqUnetConfig {
        depth: 2,
        stem_channels: 4,
        channels: vec![4, 8],
        codebook_k: vec![8, 8],
        epochs: 1,
        batch_size: 16,
        ..vqunet::VqUnetConfig::default()
    };
    cfg.classifier = vqunet::ClassifierConfig {
        num_classes: 2,
        channels: vec![4, 8],
        epochs: 1,
        batch_size: 16,
        ..vqunet::ClassifierConfig::default()
    };
    cfg.attacks = AttackFamily::ALL
        .iter()
        .map(|&f| AttackGrid {
            steps: 2,
            ..AttackGrid::new(f, vec![0.0, 0.1])
        })
        .collect();
    cfg.diagnostic_samples = 8;
    cfg.output_dir = out.to_path_buf();
    cfg.seed = 3;
    cfg
}

mod common;

use common::suites::{away_from_zero, primitive_gradient_errors, straight_through_passes, tiny, tiny_model_gradient_error, H};
use common::{leaf_gradient_error, param_gradient_error, random_tensor, rng};
use vqunet::vq::{self, Codebook};
use vqunet::{Graph, ParamStore, VqUnet, VqUnetConfig};

const PRIMITIVE_TOL: f64 = 1e-4;

#[test]
fn primitive_gradients_match_differences() {
    for (op, err) in primitive_gradient_errors() {
        assert!(err < PRIMITIVE_TOL, "{op}: {err}");
    }
}

#[test]
fn elementwise_and_reduction_gradients() {
    let mut r = rng(12);
    let mut g = Graph::new();
    let a = g.variable(away_from_zero(&[2, 3, 3, 2], 0.05, &mut r));
    let b = g.variable(random_tensor(&[2, 3, 3, 2], -1.0, 1.0, &mut r));
    let bias = g.variable(random_tensor(&[2], -1.0, 1.0, &mut r));
    let s = g.mul(a, b).unwrap();
    let s = g.bias_add(s, bias).unwrap();
    let relu = g.relu(a).unwrap();
    let sum = g.add(s, relu).unwrap();
    let d = g.sub(sum, b).unwrap();
    let sc = g.scale(d, 0.7).unwrap();
    let clipped = g.clip(sc, -0.8, 0.8).unwrap();
    let c = g.concat_channels(clipped, a).unwrap();
    let t = g.input(random_tensor(g.value(c).shape(), -1.0, 1.0, &mut r));
    let loss = g.mse(c, t).unwrap();
    // Keep clip kinks out of the stencil.
    assert!(g.value(sc).data().iter().all(|v| (v.abs() - 0.8).abs() > 1e-3));
    let err = leaf_gradient_error(&g, &ParamStore::new(), loss, &[a, b, bias], H);
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn softmax_cross_entropy_pool_and_matmul_gradients() {
    let mut r = rng(15);
    let mut g = Graph::new();
    let x = g.variable(random_tensor(&[3, 2, 2, 4], -1.0, 1.0, &mut r));
    let w = g.variable(random_tensor(&[4, 5], -1.0, 1.0, &mut r));
    let pooled = g.global_avg_pool(x).unwrap();
    let logits = g.matmul(pooled, w).unwrap();
    let loss = g.softmax_cross_entropy(logits, &[0, 4, 2]).unwrap();
    let err = leaf_gradient_error(&g, &ParamStore::new(), loss, &[x, w], H);
    assert!(err < PRIMITIVE_TOL, "{err}");

    let mut g = Graph::new();
    let l = g.variable(random_tensor(&[4, 3], -3.0, 3.0, &mut r));
    let loss = g.softmax_cross_entropy(l, &[2, 0, 1, 1]).unwrap();
    let err = leaf_gradient_error(&g, &ParamStore::new(), loss, &[l], H);
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn reshape_and_gather_gradients() {
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let table = store.add("table", random_tensor(&[4, 3], -1.0, 1.0, &mut r));
    let mut g = Graph::new();
    let tn = g.param(&store, table);
    let gathered = g.gather_rows(tn, vec![3, 0, 3, 1, 2, 2], vec![1, 2, 3, 3]).unwrap();
    let flat = g.reshape(gathered, &[6, 3]).unwrap();
    let t = g.input(random_tensor(&[6, 3], -1.0, 1.0, &mut r));
    let loss = g.mse(flat, t).unwrap();
    let err = param_gradient_error(&g, &store, loss, H, |_| {});
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn straight_through_path_is_identity_and_checks_pass() {
    assert!(straight_through_passes(10));
}

#[test]
fn vq_losses_route_gradients_to_disjoint_groups() {
    let mut r = rng(17);
    let mut store = ParamStore::new();
    let cb = Codebook::new(&mut store, 1, 5, 2, &mut vqunet::rng::from_seed(3)).unwrap();
    let mut g = Graph::new();
    let a = g.variable(random_tensor(&[1, 3, 3, 2], -0.5, 0.5, &mut r));
    let res = vq::quantize(&mut g, &store, a, &cb).unwrap();
    let (le, lq) = (res.loss_e.unwrap(), res.loss_q.unwrap());
    assert_eq!(g.value(le).item().unwrap(), g.value(lq).item().unwrap());

    // Encoder loss: gradient on a matches differences, none on the codebook.
    assert!(leaf_gradient_error(&g, &store, le, &[a], H) < PRIMITIVE_TOL);
    let mut s = store.clone();
    g.backward(le, &mut s).unwrap();
    assert!(s.get(cb.codes).grad.is_none());
    assert!(param_gradient_error(&g, &store, le, H, |_| {}) == 0.0);

    // Codebook loss: gradient on the codes matches differences, none on a.
    assert!(g.gradients(lq).unwrap().wrt(&g, a).data().iter().all(|&v| v == 0.0));
    assert_eq!(leaf_gradient_error(&g, &store, lq, &[a], H), 0.0);
    assert!(param_gradient_error(&g, &store, lq, H, |_| {}) < PRIMITIVE_TOL);
}

#[test]
fn tiny_vqunet_total_loss_gradients() {
    let err = tiny_model_gradient_error(true);
    assert!(err < 1e-3, "{err}");
    let err = tiny_model_gradient_error(false);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn codebook_gradients_come_only_from_the_codebook_loss() {
    let model = VqUnet::new(tiny(true)).unwrap();
    let x = random_tensor(&[2, 8, 8, 1], 0.0, 1.0, &mut rng(23));
    let mut g = Graph::new();
    let xn = g.input(x);
    let fwd = model.forward(&mut g, xn).unwrap();
    let l = model.loss_nodes(&mut g, &fwd).unwrap();
    // total without L_Q.
    let ar = g.scale(l.l_reconst, model.config().alpha).unwrap();
    let be = g.scale(l.l_e, model.config().beta).unwrap();
    let without_q = g.add(ar, be).unwrap();
    let mut s = model.params().clone();
    g.backward(without_q, &mut s).unwrap();
    for cb in model.codebooks() {
        let grad = s.get(cb.codes).grad.clone();
        assert!(grad.map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
    }
    let mut s = model.params().clone();
    g.backward(l.total, &mut s).unwrap();
    for cb in model.codebooks() {
        assert!(s.get(cb.codes).grad.as_ref().unwrap().data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn beta_zero_removes_the_encoder_loss_path() {
    let cfg = VqUnetConfig { beta: 0.0, ..tiny(true) };
    let model = VqUnet::new(cfg).unwrap();
    let x = random_tensor(&[2, 8, 8, 1], 0.0, 1.0, &mut rng(24));
    let mut g = Graph::new();
    let xn = g.input(x);
    let fwd = model.forward(&mut g, xn).unwrap();
    let l = model.loss_nodes(&mut g, &fwd).unwrap();
    let ar = g.scale(l.l_reconst, 1.0).unwrap();
    let mut total = model.params().clone();
    g.backward(l.total, &mut total).unwrap();
    let mut reconst_and_q = model.params().clone();
    let sum = g.add(ar, l.l_q).unwrap();
    g.backward(sum, &mut reconst_and_q).unwrap();
    for (p, q) in total.iter().zip(reconst_and_q.iter()) {
        let (a, b) = (p.grad.as_ref().unwrap(), q.grad.as_ref().unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{}", p.name);
        }
    }
    // And the finite-difference view of the total agrees with backprop.
    assert!(param_gradient_error(&g, model.params(), l.total, 1e-6, |_| {}) < 1e-3);
}


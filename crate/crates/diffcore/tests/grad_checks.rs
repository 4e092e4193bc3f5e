//! Finite-difference verification of every differentiable op and layer.
//!
//! All checks run at `f64` with central differences. Inputs are drawn away
//! from non-differentiable points (relu kinks, pooling ties) so the numeric
//! quotient is meaningful.

use diffcore::check::grad_check;
use diffcore::graph::{Binding, Graph, NodeId};
use diffcore::nn::{Affine, Embedding, LstmCell};
use diffcore::params::ParamSet;
use diffcore::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-3;
const POINTS: usize = 5;

/// Random tensor with entries in (lo, hi), regenerated until no entry is
/// within `margin` of zero (keeps relu/abs kinks out of the stencil).
fn sample(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64, margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    loop {
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * (hi - lo) + lo).collect();
        if margin == 0.0 || data.iter().all(|v| v.abs() > margin) {
            return Tensor::new(shape, data);
        }
    }
}

fn check<F>(name: &str, f: F, x: &Tensor<f64>)
where
    F: Fn(&mut Graph<f64>, NodeId) -> NodeId,
{
    let res = grad_check(f, x, EPS).unwrap();
    assert!(
        res.max_rel_err < TOL,
        "{name}: max rel err {} at coord {} (analytic {}, numeric {})",
        res.max_rel_err,
        res.worst_index,
        res.analytic[res.worst_index],
        res.numeric[res.worst_index]
    );
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..POINTS {
        let x = sample(&mut rng, vec![7], -2.0, 2.0, 0.05);
        check(
            "relu",
            |g, xn| {
                let y = g.relu(xn);
                g.sum(y)
            },
            &x,
        );
        check(
            "tanh",
            |g, xn| {
                let y = g.tanh(xn);
                g.sum(y)
            },
            &x,
        );
        check(
            "sigmoid",
            |g, xn| {
                let y = g.sigmoid(xn);
                g.sum(y)
            },
            &x,
        );
        check(
            "add_scalar/mul_scalar",
            |g, xn| {
                let y = g.add_scalar(xn, 0.7);
                let z = g.mul_scalar(y, -1.3);
                g.sum(z)
            },
            &x,
        );
        check(
            "mean",
            |g, xn| g.mean(xn),
            &x,
        );
    }
}

#[test]
fn binary_ops_against_fixed_partner() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..POINTS {
        let x = sample(&mut rng, vec![6], -1.5, 1.5, 0.0);
        let other = sample(&mut rng, vec![6], -1.5, 1.5, 0.0);
        let o1 = other.clone();
        check(
            "add/sub/mul chain",
            move |g, xn| {
                let c = g.input(o1.clone());
                let s = g.add(xn, c);
                let d = g.sub(s, xn);
                let p = g.mul(d, xn);
                g.sum(p)
            },
            &x,
        );
        let o2 = other.clone();
        check(
            "dot",
            move |g, xn| {
                let c = g.input(o2.clone());
                g.dot(xn, c)
            },
            &x,
        );
        check(
            "dot with self",
            |g, xn| g.dot(xn, xn),
            &x,
        );
    }
}

#[test]
fn normalize_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..POINTS {
        // Keep |x| well above the stabilising epsilon so the check probes the
        // generic branch of the derivative.
        let x = sample(&mut rng, vec![6], -1.5, 1.5, 0.2);
        let w = sample(&mut rng, vec![6], -1.0, 1.0, 0.0);
        check(
            "normalize then weighted sum",
            move |g, xn| {
                let y = g.normalize(xn, 2.5);
                let c = g.input(w.clone());
                g.dot(y, c)
            },
            &x,
        );
        // Cosine-style score: both sides normalised, one differentiable.
        let other = sample(&mut rng, vec![6], -1.5, 1.5, 0.2);
        check(
            "cosine score",
            move |g, xn| {
                let a = g.normalize(xn, 1.0);
                let c = g.input(other.clone());
                let b = g.normalize(c, 1.0);
                let s = g.dot(a, b);
                g.mul_scalar(s, 3.0)
            },
            &x,
        );
    }
}

#[test]
fn softmax_slice_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..POINTS {
        let x = sample(&mut rng, vec![9], -3.0, 3.0, 0.0);
        // Weighted sum of softmax probabilities exercises the full Jacobian.
        let w: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let wt = Tensor::from_vec(w);
        check(
            "softmax",
            move |g, xn| {
                let p = g.softmax(xn);
                let c = g.input(wt.clone());
                g.dot(p, c)
            },
            &x,
        );
        check(
            "slice",
            |g, xn| {
                let s = g.slice(xn, 2, 4);
                let ss = g.mul(s, s);
                g.sum(ss)
            },
            &x,
        );
        check(
            "index",
            |g, xn| {
                let a = g.index(xn, 3);
                let b = g.index(xn, 7);
                g.mul(a, b)
            },
            &x,
        );
    }
}

#[test]
fn matvec_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..POINTS {
        let w = sample(&mut rng, vec![4, 6], -1.0, 1.0, 0.0);
        let x = sample(&mut rng, vec![6], -1.0, 1.0, 0.0);
        let xc = x.clone();
        check(
            "matvec wrt weight",
            move |g, wn| {
                let xn = g.input(xc.clone());
                let y = g.matvec(wn, xn);
                let yy = g.mul(y, y);
                g.sum(yy)
            },
            &w,
        );
        let wc = w.clone();
        check(
            "matvec wrt input",
            move |g, xn| {
                let wn = g.input(wc.clone());
                let y = g.matvec(wn, xn);
                let yy = g.mul(y, y);
                g.sum(yy)
            },
            &x,
        );
    }
}

#[test]
fn conv2d_both_sides_and_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..POINTS {
        // 2 input channels, 3 output channels, 3x3 kernel, 6x6 input, pad 1.
        let w = sample(&mut rng, vec![3, 2, 3, 3], -0.7, 0.7, 0.0);
        let x = sample(&mut rng, vec![2, 6, 6], -1.0, 1.0, 0.0);
        let xc = x.clone();
        check(
            "conv2d wrt weight",
            move |g, wn| {
                let xn = g.input(xc.clone());
                let y = g.conv2d(wn, xn, 1);
                let yy = g.mul(y, y);
                g.sum(yy)
            },
            &w,
        );
        let wc = w.clone();
        check(
            "conv2d wrt input",
            move |g, xn| {
                let wn = g.input(wc.clone());
                let y = g.conv2d(wn, xn, 1);
                let yy = g.mul(y, y);
                g.sum(yy)
            },
            &x,
        );
        let b = sample(&mut rng, vec![2], -0.5, 0.5, 0.0);
        let xc2 = x.clone();
        check(
            "bias_chan wrt bias",
            move |g, bn| {
                let xn = g.input(xc2.clone());
                let y = g.bias_chan(xn, bn);
                let yy = g.mul(y, y);
                g.sum(yy)
            },
            &b,
        );
        check(
            "mean_pool2",
            |g, xn| {
                let y = g.mean_pool2(xn);
                let yy = g.mul(y, y);
                g.sum(yy)
            },
            &x,
        );
    }
}

#[test]
fn max_pool_away_from_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    'point: for _ in 0..POINTS {
        let x = sample(&mut rng, vec![1, 4, 4], -1.0, 1.0, 0.0);
        // Skip draws where any 2x2 window has a near-tie: the max switches
        // argument inside the stencil and the numeric quotient is undefined.
        let d = x.data();
        for wy in 0..2 {
            for wx in 0..2 {
                let mut vals: Vec<f64> = Vec::new();
                for dy in 0..2 {
                    for dx in 0..2 {
                        vals.push(d[(2 * wy + dy) * 4 + 2 * wx + dx]);
                    }
                }
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if vals[3] - vals[2] < 10.0 * EPS {
                    continue 'point;
                }
            }
        }
        check(
            "max_pool2",
            |g, xn| {
                let y = g.max_pool2(xn);
                let yy = g.mul(y, y);
                g.sum(yy)
            },
            &x,
        );
    }
}

#[test]
fn reshape_is_gradient_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = sample(&mut rng, vec![2, 3, 2], -1.0, 1.0, 0.0);
    check(
        "reshape",
        |g, xn| {
            let y = g.reshape(xn, vec![12]);
            let z = g.mul(y, y);
            g.sum(z)
        },
        &x,
    );
}

#[test]
fn affine_layer_wrt_all_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut ps: ParamSet<f64> = ParamSet::new();
    let layer = Affine::new(&mut ps, "aff", 5, 3, &mut rng);
    let x_in = sample(&mut rng, vec![5], -1.0, 1.0, 0.0);

    // Check d loss / d W with the input held fixed.
    let w0 = ps.get(layer.w).clone();
    let psc = ps.clone();
    let lc = layer.clone();
    let xc = x_in.clone();
    check(
        "affine wrt w",
        move |g, wn| {
            let mut ps = psc.clone();
            *ps.get_mut(lc.w) = g.value(wn).clone();
            // Rebuild by hand so the leaf under test is the graph input.
            let b = g.input(ps.get(lc.b).clone());
            let x = g.input(xc.clone());
            let wx = g.matvec(wn, x);
            let y = g.add(wx, b);
            let yy = g.mul(y, y);
            g.sum(yy)
        },
        &w0,
    );

    let b0 = ps.get(layer.b).clone();
    let psc = ps.clone();
    let lc = layer.clone();
    let xc = x_in.clone();
    check(
        "affine wrt b",
        move |g, bn| {
            let w = g.input(psc.get(lc.w).clone());
            let x = g.input(xc.clone());
            let wx = g.matvec(w, x);
            let y = g.add(wx, bn);
            let yy = g.mul(y, y);
            g.sum(yy)
        },
        &b0,
    );
}

#[test]
fn lstm_cell_wrt_input_state_and_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut ps: ParamSet<f64> = ParamSet::new();
    let cell = LstmCell::new(&mut ps, "cell", 4, 3, &mut rng);
    let x0 = sample(&mut rng, vec![4], -1.0, 1.0, 0.0);
    let h0 = sample(&mut rng, vec![3], -0.5, 0.5, 0.0);
    let c0 = sample(&mut rng, vec![3], -0.5, 0.5, 0.0);

    // wrt input x
    let psc = ps.clone();
    let cc = cell.clone();
    let (hh, cc0) = (h0.clone(), c0.clone());
    check(
        "lstm wrt x",
        move |g, xn| {
            let mut bind = Binding::new(&psc);
            let h = g.input(hh.clone());
            let c = g.input(cc0.clone());
            let (h1, c1) = cc.apply(g, &mut bind, &psc, xn, h, c);
            let hs = g.mul(h1, h1);
            let cs = g.mul(c1, c1);
            let a = g.sum(hs);
            let b = g.sum(cs);
            g.add(a, b)
        },
        &x0,
    );

    // wrt hidden state h
    let psc = ps.clone();
    let cc = cell.clone();
    let (xx, cc0) = (x0.clone(), c0.clone());
    check(
        "lstm wrt h",
        move |g, hn| {
            let mut bind = Binding::new(&psc);
            let x = g.input(xx.clone());
            let c = g.input(cc0.clone());
            let (h1, c1) = cc.apply(g, &mut bind, &psc, x, hn, c);
            let hs = g.mul(h1, h1);
            let cs = g.mul(c1, c1);
            let a = g.sum(hs);
            let b = g.sum(cs);
            g.add(a, b)
        },
        &h0,
    );

    // wrt the packed recurrent weight, via an explicit rebuild
    let wh0 = ps.get(cell.wh).clone();
    let psc = ps.clone();
    let cc = cell.clone();
    let (xx, hh, cc0) = (x0.clone(), h0.clone(), c0.clone());
    check(
        "lstm wrt wh",
        move |g, whn| {
            let hd = cc.hidden_dim;
            let wx = g.input(psc.get(cc.wx).clone());
            let b = g.input(psc.get(cc.b).clone());
            let x = g.input(xx.clone());
            let h = g.input(hh.clone());
            let c = g.input(cc0.clone());
            let zx = g.matvec(wx, x);
            let zh = g.matvec(whn, h);
            let zs = g.add(zx, zh);
            let z = g.add(zs, b);
            let i_pre = g.slice(z, 0, hd);
            let f_pre = g.slice(z, hd, hd);
            let g_pre = g.slice(z, 2 * hd, hd);
            let o_pre = g.slice(z, 3 * hd, hd);
            let i = g.sigmoid(i_pre);
            let f = g.sigmoid(f_pre);
            let cand = g.tanh(g_pre);
            let o = g.sigmoid(o_pre);
            let fc = g.mul(f, c);
            let ig = g.mul(i, cand);
            let c1 = g.add(fc, ig);
            let ca = g.tanh(c1);
            let h1 = g.mul(o, ca);
            let hs = g.mul(h1, h1);
            let cs = g.mul(c1, c1);
            let a = g.sum(hs);
            let bb = g.sum(cs);
            g.add(a, bb)
        },
        &wh0,
    );
}

#[test]
fn embedding_wrt_table_and_relaxed_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut ps: ParamSet<f64> = ParamSet::new();
    let emb = Embedding::new(&mut ps, "emb", 5, 3, &mut rng);
    let onehot = Tensor::from_vec(vec![0.1, 0.6, 0.1, 0.1, 0.1]);
    let t0 = ps.get(emb.table).clone();
    let oc = onehot.clone();
    check(
        "embedding wrt table",
        move |g, tn| {
            let o = g.input(oc.clone());
            let e = g.matvec(tn, o);
            let ee = g.mul(e, e);
            g.sum(ee)
        },
        &t0,
    );
    let psc = ps.clone();
    let ec = emb;
    check(
        "embedding wrt onehot",
        move |g, on| {
            let t = g.input(psc.get(ec.table).clone());
            let e = g.matvec(t, on);
            let ee = g.mul(e, e);
            g.sum(ee)
        },
        &onehot,
    );
}

/// The straight-through estimator's backward must equal the backward of the
/// relaxed softmax sample with the same noise, even though forward is hard.
#[test]
fn straight_through_backward_matches_relaxed_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..10 {
        let logits: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let weights: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let tau = 0.5 + rng.random::<f64>() * 1.5;

        // Run the ST op with a snapshotted rng so we can replay the noise.
        let mut rng_a = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut g: Graph<f64> = Graph::new();
        let l = g.leaf_grad(Tensor::from_vec(logits.clone()));
        let y = g.st_sample(l, tau, &mut rng_a);
        let wt = g.input(Tensor::from_vec(weights.clone()));
        let loss = g.dot(y, wt);
        g.backward(loss).unwrap();
        let st_grad: Vec<f64> = g.grad(l).to_vec();

        // Forward value is hard one-hot.
        let hard = g.hard_index(y);
        for (i, &v) in g.value(y).data().iter().enumerate() {
            assert_eq!(v, if i == hard { 1.0 } else { 0.0 });
        }

        // Replay the identical noise through an explicit softmax((l+g)/tau).
        let mut rng_b = ChaCha8Rng::seed_from_u64(1000 + trial);
        let noise: Vec<f64> = (0..6)
            .map(|_| {
                let u: f64 = rng_b.random::<f64>().max(1e-12);
                -(-u.ln()).ln()
            })
            .collect();
        let mut g2: Graph<f64> = Graph::new();
        let l2 = g2.leaf_grad(Tensor::from_vec(logits.clone()));
        let n2 = g2.input(Tensor::from_vec(noise));
        let z0 = g2.add(l2, n2);
        let z = g2.mul_scalar(z0, 1.0 / tau);
        let p = g2.softmax(z);
        let wt2 = g2.input(Tensor::from_vec(weights.clone()));
        let loss2 = g2.dot(p, wt2);
        g2.backward(loss2).unwrap();
        let relaxed_grad: Vec<f64> = g2.grad(l2).to_vec();

        for (a, b) in st_grad.iter().zip(&relaxed_grad) {
            assert!((a - b).abs() < 1e-10, "st {a} vs relaxed {b}");
        }
    }
}

/// Gradient of a linear function is exactly the coefficient vector,
/// independent of the evaluation point.
#[test]
fn linear_probe_recovers_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let coef: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 3.0 - 1.5).collect();
    for _ in 0..3 {
        let x = sample(&mut rng, vec![8], -2.0, 2.0, 0.0);
        let ct = Tensor::from_vec(coef.clone());
        let mut g: Graph<f64> = Graph::new();
        let xn = g.leaf_grad(x);
        let c = g.input(ct);
        let y = g.dot(xn, c);
        g.backward(y).unwrap();
        for (gv, cv) in g.grad(xn).iter().zip(&coef) {
            assert!((gv - cv).abs() < 1e-12);
        }
    }
}

//! Finite-difference verification of the differentiable stroke renderer.
//!
//! The renderer's backward pass treats the point-to-segment projection as
//! constant (exact, by the envelope argument) and routes each pixel's
//! gradient to its nearest segment. Central differences over the full
//! coordinate vector confirm both choices numerically. Degenerate
//! (zero-length) strokes are rendered but deliberately excluded here: the
//! nearest-point parameter is discontinuous exactly at zero length.

use diffcore::check::grad_check;
use diffcore::graph::Graph;
use diffcore::Tensor;
use numgame::agents::LineRasterOp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

const SIDE: usize = 32;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-2;

/// Random stroke coordinates kept inside the canvas and away from
/// degeneracy (minimum stroke length 0.1 in normalized units).
fn random_strokes(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut coords = Vec::with_capacity(4 * k);
    for _ in 0..k {
        loop {
            let c: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.9)).collect();
            let len2 = (c[2] - c[0]).powi(2) + (c[3] - c[1]).powi(2);
            if len2 > 0.01 {
                coords.extend_from_slice(&c);
                break;
            }
        }
    }
    coords
}

fn projection_weights(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..SIDE * SIDE).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Project the rendered canvas to a scalar with fixed random weights so one
/// backward pass exercises the whole per-pixel Jacobian.
fn render_and_project(
    g: &mut Graph<f64>,
    coords: diffcore::graph::NodeId,
    weights: &[f64],
) -> diffcore::graph::NodeId {
    let op = Rc::new(LineRasterOp { side: SIDE, sigma_px: 1.5 / 64.0 * SIDE as f64 });
    let raster = g.custom(op, &[coords]);
    let flat = g.reshape(raster, vec![SIDE * SIDE]);
    let w = g.input(Tensor::from_vec(weights.to_vec()));
    let prod = g.mul(flat, w);
    g.sum(prod)
}

#[test]
fn renderer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..3 {
        let coords = Tensor::from_vec(random_strokes(&mut rng, 3));
        let weights = projection_weights(&mut rng);
        let check = grad_check(
            |g, x| render_and_project(g, x, &weights),
            &coords,
            EPS,
        )
        .unwrap();
        assert!(
            check.max_rel_err < TOL,
            "trial {trial}: max rel err {} at coord {}",
            check.max_rel_err,
            check.worst_index
        );
    }
}

#[test]
fn clamped_endpoints_still_check_out() {
    // A short stroke in one corner: most pixels project beyond an endpoint,
    // exercising the clamped branches of the backward pass.
    let coords = Tensor::from_vec(vec![0.2, 0.2, 0.3, 0.25]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let weights = projection_weights(&mut rng);
    let check = grad_check(|g, x| render_and_project(g, x, &weights), &coords, EPS).unwrap();
    assert!(check.max_rel_err < TOL, "max rel err {}", check.max_rel_err);
}

#[test]
fn ink_conversion_composes_differentiably() {
    // The trainer feeds 1 - raster into the encoder; check the composed
    // scalar too so the sign flip is covered end to end.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let coords = Tensor::from_vec(random_strokes(&mut rng, 2));
    let weights = projection_weights(&mut rng);
    let check = grad_check(
        |g, x| {
            let op = Rc::new(LineRasterOp { side: SIDE, sigma_px: 1.5 / 64.0 * SIDE as f64 });
            let raster = g.custom(op, &[x]);
            let neg = g.mul_scalar(raster, -1.0);
            let ink = g.add_scalar(neg, 1.0);
            let flat = g.reshape(ink, vec![SIDE * SIDE]);
            let w = g.input(Tensor::from_vec(weights.clone()));
            let prod = g.mul(flat, w);
            g.sum(prod)
        },
        &coords,
        EPS,
    )
    .unwrap();
    assert!(check.max_rel_err < TOL, "max rel err {}", check.max_rel_err);
}

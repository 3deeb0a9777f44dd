mod common;

use common::{heads, pairing, rng};
use gyromix::grad::{self, check_head_gradient, fd_gradient, grad_decomposition, loss_grad_embeddings, GradientReport};
use gyromix::loss::{self, HeadOutputs};
use gyromix::training::encoder::{EncoderConfig, EncoderParams};
use gyromix::training::{batch_loss, batch_loss_and_grad};
use gyromix::{BallConfig, LossConfig, LossMode, PairedBatch};
use ndarray::Array2;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn cfg(mode: LossMode, tau: f64, lambda: f64) -> LossConfig {
    LossConfig {
        mode,
        tau,
        lambda,
        combo_weight: 0.3,
    }
}

#[test]
fn cosine_mode_matches_fd_on_k6() {
    let out = heads(&mut rng(1), 6, 4, 1.0);
    let r = check_head_gradient(&out, &pairing(3), &cfg(LossMode::Euclidean, 0.2, 0.0), &BallConfig::default(), FD_STEP)
        .unwrap();
    assert!(r.max_rel_err < FD_TOL, "max rel err {}", r.max_rel_err);
}

#[test]
fn hyperbolic_mode_matches_fd_on_k6() {
    let ball = BallConfig::with_curvature(0.1).unwrap();
    let out = heads(&mut rng(2), 6, 4, 1.0);
    let r = check_head_gradient(&out, &pairing(3), &cfg(LossMode::Hyperbolic, 0.2, 0.0), &ball, FD_STEP).unwrap();
    assert!(r.max_rel_err < FD_TOL, "max rel err {}", r.max_rel_err);
}

#[test]
fn mixed_and_combo_modes_match_fd() {
    let ball = BallConfig::with_curvature(1.0).unwrap();
    for (seed, mode) in [(3, LossMode::Mixed), (4, LossMode::ConvexCombo)] {
        let out = heads(&mut rng(seed), 8, 3, 1.5);
        let r = check_head_gradient(&out, &pairing(4), &cfg(mode, 0.5, 3.0), &ball, FD_STEP).unwrap();
        assert!(r.max_rel_err < FD_TOL, "{mode:?}: max rel err {}", r.max_rel_err);
    }
}

/// Sharp temperatures and c = 1 sum to losses large enough that 64-bit
/// differences lose the small coordinates; the double-double objective does not.
#[test]
fn sharp_settings_match_extended_precision_differences() {
    let ball = BallConfig::with_curvature(1.0).unwrap();
    let mut r = rng(21);
    for mode in [LossMode::Euclidean, LossMode::Hyperbolic, LossMode::Mixed, LossMode::ConvexCombo] {
        let out = heads(&mut r, 8, 4, 1.2);
        let c = cfg(mode, 0.05, 8.0);
        let g = loss_grad_embeddings(&out, &pairing(4), &c, &ball).unwrap();
        let analytic: Vec<f64> = [g.euclid, g.hyper].into_iter().flatten().flat_map(|a| a.into_iter()).collect();
        let numeric = common::hp::fd_gradient(&out, &pairing(4), &c, &ball, 1e-9);
        assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < FD_TOL, "{mode:?}: analytic {a:e} vs {n:e}");
        }
    }
}

#[test]
fn clip_boundary_straddle() {
    // pre-map rows at ‖v‖ = r ± 0.1 exercise both branches of the clip
    let ball = BallConfig::default();
    let mut out = heads(&mut rng(5), 6, 4, 1.0);
    let h = out.hyper.as_mut().unwrap();
    for (i, mut row) in h.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        let target = if i % 2 == 0 { ball.r - 0.1 } else { ball.r + 0.1 };
        row *= target / n;
    }
    let r = check_head_gradient(&out, &pairing(3), &cfg(LossMode::Hyperbolic, 0.2, 0.0), &ball, FD_STEP).unwrap();
    assert!(r.max_rel_err < FD_TOL, "max rel err {}", r.max_rel_err);
}

#[test]
fn vanishing_weights_give_vanishing_gradient() {
    // every negative antipodal, every positive identical: p_neg ~ exp(-4/τ)
    let k = 4;
    let mut e = Array2::zeros((k, 2));
    e[[0, 0]] = 1.0;
    e[[1, 0]] = 1.0;
    e[[2, 0]] = -1.0;
    e[[3, 0]] = -1.0;
    let out = HeadOutputs { euclid: Some(e), hyper: None };
    let c = cfg(LossMode::Euclidean, 0.05, 0.0);
    let p = pairing(2);
    let d = loss::mode_distance_matrix(&out, &c, &BallConfig::default()).unwrap();
    let w = loss::triplet_weights(&d, &p, c.tau).unwrap();
    assert!(w.p_neg.iter().all(|&x| x < 1e-12));
    let g = loss_grad_embeddings(&out, &p, &c, &BallConfig::default()).unwrap();
    assert!(g.norm() < 1e-8, "{}", g.norm());
}

#[test]
fn decomposition_reassembles_gradient() {
    let ball = BallConfig::with_curvature(0.1).unwrap();
    for (seed, mode) in [
        (10, LossMode::Euclidean),
        (11, LossMode::Hyperbolic),
        (12, LossMode::Mixed),
        (13, LossMode::ConvexCombo),
    ] {
        let out = heads(&mut rng(seed), 8, 5, 1.2);
        let c = cfg(mode, 0.2, 3.0);
        let g = loss_grad_embeddings(&out, &pairing(4), &c, &ball).unwrap();
        let (re, rh) = grad_decomposition(&out, &pairing(4), &c, &ball).unwrap().reassemble();
        for (a, b) in [(g.euclid, re), (g.hyper, rh)] {
            match (a, b) {
                (Some(a), Some(b)) => {
                    let diff = (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    assert!(diff < 1e-10, "{mode:?}: {diff}");
                }
                (None, None) => {}
                _ => panic!("{mode:?}: branch presence differs"),
            }
        }
    }
}

#[test]
fn uniform_batch_weights_are_equal() {
    let e = Array2::from_elem((6, 3), 0.4);
    let out = HeadOutputs { euclid: Some(e), hyper: None };
    let dec = grad_decomposition(&out, &pairing(3), &cfg(LossMode::Euclidean, 0.1, 0.0), &BallConfig::default()).unwrap();
    for a in &dec.parts[0].anchors {
        assert!((a.p_pos - 0.2).abs() < 1e-15);
        for t in &a.terms {
            assert!((t.weight - 0.2).abs() < 1e-15);
        }
    }
}

#[test]
fn dominant_hard_negative_carries_the_anchor_gradient() {
    // anchor 0: positive at 60°, negative 2 at 10°, the rest far away
    let deg = |a: f64| [a.to_radians().cos(), a.to_radians().sin()];
    let rows = [deg(0.0), deg(60.0), deg(10.0), deg(-170.0), deg(150.0), deg(-120.0)];
    let e = Array2::from_shape_fn((6, 2), |(i, j)| rows[i][j]);
    let out = HeadOutputs { euclid: Some(e), hyper: None };
    let c = cfg(LossMode::Euclidean, 0.05, 0.0);
    let p = pairing(3);
    let dec = grad_decomposition(&out, &p, &c, &BallConfig::default()).unwrap();
    let anchor = &dec.parts[0].anchors[0];
    let full = anchor.gradient(c.tau, Some((6, 2)), None).0.unwrap();
    let hard = anchor.terms.iter().find(|t| t.negative == 2).unwrap();
    let share = hard.weight / c.tau * hard.direction.norm() / full.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(share > 0.9, "share {share}");
    // and that anchor's gradient is itself FD-correct
    let f = |flat: &[f64]| {
        let z = Array2::from_shape_vec((6, 2), flat.to_vec()).unwrap();
        let d = loss::cosine_matrix(z.view()).unwrap();
        let row = d.d.row(0).to_vec();
        // anchor-0 term only, naive
        let num = (-row[1] / c.tau).exp();
        let den: f64 = (1..6).map(|k| (-row[k] / c.tau).exp()).sum();
        Ok(-(num / den).ln())
    };
    let flat: Vec<f64> = out.euclid.as_ref().unwrap().iter().copied().collect();
    let fd = fd_gradient(f, &flat, FD_STEP).unwrap();
    // unit-norm rows have exactly zero radial gradient, so compare absolutely
    let r = GradientReport::compare(full.iter().copied().collect(), fd).unwrap();
    assert!(r.max_abs_err < 1e-6, "{}", r.max_abs_err);
}

#[test]
fn similarity_form_matches_distance_form() {
    // pairwise CE on D_cos at τ is InfoNCE at τ/2; the two gradient routes agree
    let out = heads(&mut rng(20), 8, 4, 1.0);
    let z = out.euclid.clone().unwrap();
    let p = pairing(4);
    let tau = 0.2;
    let via_d = loss_grad_embeddings(&out, &p, &cfg(LossMode::Euclidean, tau, 0.0), &BallConfig::default()).unwrap();
    let (l_s, g_s) = grad::infonce_grad(z.view(), &p, tau / 2.0).unwrap();
    assert!(common::rel_err(via_d.loss, l_s) < 1e-12);
    let diff = (&via_d.euclid.unwrap() - &g_s).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(diff < 1e-10, "{diff}");
    let batch = PairedBatch::new(z.clone(), p.clone()).unwrap();
    let fd = fd_gradient(
        |f| {
            let b = PairedBatch::new(Array2::from_shape_vec(z.raw_dim(), f.to_vec()).unwrap(), p.clone()).unwrap();
            loss::infonce_loss(&b, tau / 2.0)
        },
        batch.z.as_slice().unwrap(),
        FD_STEP,
    )
    .unwrap();
    let r = GradientReport::compare(g_s.iter().copied().collect(), fd).unwrap();
    assert!(r.max_rel_err < FD_TOL, "{}", r.max_rel_err);
}

#[test]
fn halving_tau_is_tracked_by_analytic_gradient() {
    let ball = BallConfig::with_curvature(0.1).unwrap();
    let out = heads(&mut rng(30), 6, 3, 1.0);
    for tau in [0.4, 0.2, 0.1, 0.05] {
        for mode in [LossMode::Euclidean, LossMode::Hyperbolic] {
            let r = check_head_gradient(&out, &pairing(3), &cfg(mode, tau, 0.0), &ball, FD_STEP).unwrap();
            assert!(r.max_rel_err < FD_TOL, "{mode:?} τ={tau}: {}", r.max_rel_err);
        }
    }
}

#[test]
fn encoder_parameter_gradient_matches_fd() {
    let ball = BallConfig::with_curvature(0.1).unwrap();
    let enc = EncoderConfig {
        hidden_dim: 6,
        embed_dim: 4,
        out_dim: 3,
        shared_heads: false,
    };
    let x = common::gaussian(&mut rng(40), 8, 5, 1.0);
    let p = pairing(4);
    for (seed, mode, shared) in [
        (1, LossMode::Euclidean, false),
        (2, LossMode::Hyperbolic, false),
        (3, LossMode::Mixed, false),
        (4, LossMode::Mixed, true),
    ] {
        let enc = EncoderConfig { shared_heads: shared, ..enc };
        let params = EncoderParams::init(5, &enc, &mut rng(seed)).unwrap();
        let c = cfg(mode, 0.2, 3.0);
        let (_, g) = batch_loss_and_grad(&params, x.view(), &p, &c, &ball).unwrap();
        let fd = fd_gradient(
            |flat| {
                let mut q = params.clone();
                q.set_flat(flat)?;
                batch_loss(&q, x.view(), &p, &c, &ball)
            },
            &params.to_flat(),
            FD_STEP,
        )
        .unwrap();
        let r = GradientReport::compare(g.to_flat(), fd).unwrap();
        assert!(r.max_rel_err < FD_TOL, "{mode:?} shared={shared}: {}", r.max_rel_err);
    }
}

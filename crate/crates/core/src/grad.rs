//! Analytic gradients of the pairwise losses and a finite-difference oracle.
//!
//! For one anchor the gradient of the cross-entropy with respect to its
//! distance row is `∂L/∂D[i][pos] = (1 − p_pos)/τ` and `∂L/∂D[i][k] = −p_k/τ`.
//! Since `1 − p_pos = Σ_k p_k` this is the same as
//! `(1/τ)·Σ_k p_k·∇(D[i][pos] − D[i][k])`, which [`grad_decomposition`]
//! exposes term by term.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{self, BallConfig};
use crate::loss::{self, anchor_softmax, HeadOutputs, LossConfig, LossMode, Pairing};

/// Gradient of a loss with respect to the raw head outputs.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub loss: f64,
    pub euclid: Option<Array2<f64>>,
    pub hyper: Option<Array2<f64>>,
}

impl HeadGrads {
    /// All gradient entries, euclidean rows first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        if let Some(e) = &self.euclid {
            v.extend(e.iter());
        }
        if let Some(h) = &self.hyper {
            v.extend(h.iter());
        }
        v
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Per-pair distance derivatives for the branches a mode uses.
struct PairDerivs<'a> {
    euclid: Option<ArrayView2<'a, f64>>,
    ball: Option<&'a Array2<f64>>,
    lambda_h: f64,
    cfg: &'a BallConfig,
}

impl PairDerivs<'_> {
    /// Adds `coef·∇_{rows} D(a, b)` into the accumulators.
    fn accumulate(&self, a: usize, b: usize, coef: f64, ge: &mut Option<Array2<f64>>, gb: &mut Option<Array2<f64>>) {
        if let (Some(z), Some(ge)) = (&self.euclid, ge.as_mut()) {
            let (za, zb) = (z.row(a).to_vec(), z.row(b).to_vec());
            let da = geometry::cos_dist_grad(&za, &zb);
            let db = geometry::cos_dist_grad(&zb, &za);
            for j in 0..za.len() {
                ge[[a, j]] += coef * da[j];
                ge[[b, j]] += coef * db[j];
            }
        }
        if let (Some(x), Some(gb)) = (self.ball, gb.as_mut()) {
            if self.lambda_h != 0.0 {
                let (xa, xb) = (x.row(a).to_vec(), x.row(b).to_vec());
                let (da, db) = geometry::hyp_dist_grad(&xa, &xb, self.cfg);
                let c = coef * self.lambda_h;
                for j in 0..xa.len() {
                    gb[[a, j]] += c * da[j];
                    gb[[b, j]] += c * db[j];
                }
            }
        }
    }
}

/// Chains a gradient with respect to ball points back to the pre-map rows.
fn pull_back_to_pre_map(pre: &Array2<f64>, g_ball: &Array2<f64>, cfg: &BallConfig) -> Array2<f64> {
    let mut out = Array2::zeros(pre.raw_dim());
    for ((v, g), mut dst) in pre.rows().into_iter().zip(g_ball.rows()).zip(out.rows_mut()) {
        let back = geometry::to_ball_vjp(&v.to_vec(), &g.to_vec(), cfg);
        dst.assign(&ndarray::ArrayView1::from(&back));
    }
    out
}

/// One softmax over a distance matrix and the branches it differentiates into.
struct Component {
    scale: f64,
    d: Array2<f64>,
    euclid: bool,
    lambda_h: f64,
}

fn components(cfg: &LossConfig, md: &loss::ModeDistances) -> Vec<Component> {
    let cos = || md.cos.as_ref().unwrap().d.clone();
    let hyp = || md.hyp.as_ref().unwrap().d.clone();
    match cfg.mode {
        LossMode::Euclidean => vec![Component {
            scale: 1.0,
            d: cos(),
            euclid: true,
            lambda_h: 0.0,
        }],
        LossMode::Hyperbolic => vec![Component {
            scale: 1.0,
            d: hyp(),
            euclid: false,
            lambda_h: 1.0,
        }],
        LossMode::Mixed => vec![Component {
            scale: 1.0,
            d: cos() + hyp() * cfg.lambda,
            euclid: true,
            lambda_h: cfg.lambda,
        }],
        LossMode::ConvexCombo => vec![
            Component {
                scale: cfg.combo_weight,
                d: hyp(),
                euclid: false,
                lambda_h: 1.0,
            },
            Component {
                scale: 1.0 - cfg.combo_weight,
                d: cos(),
                euclid: true,
                lambda_h: 0.0,
            },
        ],
    }
}

fn zeros_like(z: Option<&Array2<f64>>) -> Option<Array2<f64>> {
    z.map(|z| Array2::zeros(z.raw_dim()))
}

/// Loss value and its exact gradient with respect to the head outputs.
///
/// Hyperbolic rows are differentiated through clip, `exp_map_0` and the
/// boundary projection.
pub fn loss_grad_embeddings(
    out: &HeadOutputs,
    pairing: &Pairing,
    cfg: &LossConfig,
    ball: &BallConfig,
) -> Result<HeadGrads> {
    cfg.validate()?;
    if out.rows() != pairing.len() {
        return Err(Error::Shape(format!(
            "{} head rows for a pairing of {} rows",
            out.rows(),
            pairing.len()
        )));
    }
    let md = loss::mode_distances(out, cfg.mode, ball)?;
    let mut ge = if cfg.mode.uses_euclid() { zeros_like(out.euclid.as_ref()) } else { None };
    let mut gb = zeros_like(md.ball.as_ref());
    let mut total = 0.0;
    for comp in components(cfg, &md) {
        let pd = PairDerivs {
            euclid: if comp.euclid { out.euclid.as_ref().map(|z| z.view()) } else { None },
            ball: md.ball.as_ref(),
            lambda_h: comp.lambda_h,
            cfg: ball,
        };
        for i in 0..pairing.len() {
            let row = comp.d.row(i).to_vec();
            let pos = pairing.pos(i);
            let sm = anchor_softmax(&row, i, pos, cfg.tau);
            total += comp.scale * sm.loss;
            for (k, &p) in sm.weights.iter().enumerate() {
                if k == i {
                    continue;
                }
                let dl_dd = if k == pos { (1.0 - p) / cfg.tau } else { -p / cfg.tau };
                pd.accumulate(i, k, comp.scale * dl_dd, &mut ge, &mut gb);
            }
        }
    }
    let hyper = match (gb, out.hyper.as_ref()) {
        (Some(gb), Some(pre)) => Some(pull_back_to_pre_map(pre, &gb, ball)),
        _ => None,
    };
    Ok(HeadGrads {
        loss: total,
        euclid: ge,
        hyper,
    })
}

/// A sparse gradient touching a few rows of each branch.
#[derive(Debug, Clone, Default)]
pub struct RowGrad {
    /// `(row, ∂/∂euclid_row)`.
    pub euclid: Vec<(usize, Vec<f64>)>,
    /// `(row, ∂/∂pre_map_row)`.
    pub hyper: Vec<(usize, Vec<f64>)>,
}

impl RowGrad {
    pub fn norm(&self) -> f64 {
        self.euclid
            .iter()
            .chain(&self.hyper)
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// The contribution of one triplet `(anchor, positive, negative)`.
#[derive(Debug, Clone)]
pub struct TripletTerm {
    pub negative: usize,
    /// `p(x⁻)` for this negative.
    pub weight: f64,
    /// `∇(D[anchor][positive] − D[anchor][negative])` w.r.t. the head outputs.
    pub direction: RowGrad,
}

#[derive(Debug, Clone)]
pub struct AnchorTerms {
    pub anchor: usize,
    pub positive: usize,
    pub p_pos: f64,
    pub terms: Vec<TripletTerm>,
}

impl AnchorTerms {
    /// `(1/τ)·Σ_k p_k·direction_k` for this anchor alone.
    pub fn gradient(&self, tau: f64, shape_e: Option<(usize, usize)>, shape_h: Option<(usize, usize)>) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        let mut ge = shape_e.map(Array2::zeros);
        let mut gh = shape_h.map(Array2::zeros);
        for t in &self.terms {
            add_scaled(&mut ge, &mut gh, &t.direction, t.weight / tau);
        }
        (ge, gh)
    }
}

/// One softmax's worth of triplet terms, weighted by `scale` in the total.
#[derive(Debug, Clone)]
pub struct DecompositionPart {
    pub scale: f64,
    pub anchors: Vec<AnchorTerms>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub tau: f64,
    pub parts: Vec<DecompositionPart>,
    shape_e: Option<(usize, usize)>,
    shape_h: Option<(usize, usize)>,
}

fn add_scaled(ge: &mut Option<Array2<f64>>, gh: &mut Option<Array2<f64>>, g: &RowGrad, s: f64) {
    if let Some(ge) = ge.as_mut() {
        for (r, v) in &g.euclid {
            for (j, x) in v.iter().enumerate() {
                ge[[*r, j]] += s * x;
            }
        }
    }
    if let Some(gh) = gh.as_mut() {
        for (r, v) in &g.hyper {
            for (j, x) in v.iter().enumerate() {
                gh[[*r, j]] += s * x;
            }
        }
    }
}

impl Decomposition {
    /// `Σ_parts scale·Σ_i (1/τ)·Σ_k p·direction`.
    pub fn reassemble(&self) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        let mut ge = self.shape_e.map(Array2::zeros);
        let mut gh = self.shape_h.map(Array2::zeros);
        for part in &self.parts {
            for a in &part.anchors {
                for t in &a.terms {
                    add_scaled(&mut ge, &mut gh, &t.direction, part.scale * t.weight / self.tau);
                }
            }
        }
        (ge, gh)
    }

    pub fn anchor_gradient(&self, part: usize, anchor: usize) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        self.parts[part].anchors[anchor].gradient(self.tau, self.shape_e, self.shape_h)
    }
}

/// Distance gradient `∇D(a, b)` as a sparse row gradient on the head outputs.
fn pair_direction(
    a: usize,
    b: usize,
    euclid: Option<ArrayView2<'_, f64>>,
    ball_pts: Option<&Array2<f64>>,
    pre: Option<&Array2<f64>>,
    lambda_h: f64,
    cfg: &BallConfig,
) -> RowGrad {
    let mut g = RowGrad::default();
    if let Some(z) = euclid {
        let (za, zb) = (z.row(a).to_vec(), z.row(b).to_vec());
        g.euclid.push((a, geometry::cos_dist_grad(&za, &zb)));
        g.euclid.push((b, geometry::cos_dist_grad(&zb, &za)));
    }
    if let (Some(x), Some(pre)) = (ball_pts, pre) {
        if lambda_h != 0.0 {
            let (xa, xb) = (x.row(a).to_vec(), x.row(b).to_vec());
            let (da, db) = geometry::hyp_dist_grad(&xa, &xb, cfg);
            let scale = |v: Vec<f64>| v.into_iter().map(|t| t * lambda_h).collect::<Vec<_>>();
            g.hyper.push((a, geometry::to_ball_vjp(&pre.row(a).to_vec(), &scale(da), cfg)));
            g.hyper.push((b, geometry::to_ball_vjp(&pre.row(b).to_vec(), &scale(db), cfg)));
        }
    }
    g
}

fn sub(mut a: RowGrad, b: &RowGrad) -> RowGrad {
    a.euclid
        .extend(b.euclid.iter().map(|(r, v)| (*r, v.iter().map(|x| -x).collect())));
    a.hyper
        .extend(b.hyper.iter().map(|(r, v)| (*r, v.iter().map(|x| -x).collect())));
    a
}

/// Splits the loss gradient into weighted triplet terms.
pub fn grad_decomposition(
    out: &HeadOutputs,
    pairing: &Pairing,
    cfg: &LossConfig,
    ball: &BallConfig,
) -> Result<Decomposition> {
    cfg.validate()?;
    let md = loss::mode_distances(out, cfg.mode, ball)?;
    let mut parts = Vec::new();
    for comp in components(cfg, &md) {
        let euclid = if comp.euclid { out.euclid.as_ref().map(|z| z.view()) } else { None };
        let mut anchors = Vec::with_capacity(pairing.len());
        for i in 0..pairing.len() {
            let pos = pairing.pos(i);
            let sm = anchor_softmax(&comp.d.row(i).to_vec(), i, pos, cfg.tau);
            let dir_pos = pair_direction(i, pos, euclid, md.ball.as_ref(), out.hyper.as_ref(), comp.lambda_h, ball);
            let terms = pairing
                .negatives(i)
                .map(|k| {
                    let dir_neg = pair_direction(i, k, euclid, md.ball.as_ref(), out.hyper.as_ref(), comp.lambda_h, ball);
                    TripletTerm {
                        negative: k,
                        weight: sm.weights[k],
                        direction: sub(dir_pos.clone(), &dir_neg),
                    }
                })
                .collect();
            anchors.push(AnchorTerms {
                anchor: i,
                positive: pos,
                p_pos: sm.weights[pos],
                terms,
            });
        }
        parts.push(DecompositionPart {
            scale: comp.scale,
            anchors,
        });
    }
    Ok(Decomposition {
        tau: cfg.tau,
        parts,
        shape_e: if cfg.mode.uses_euclid() { out.euclid.as_ref().map(|z| z.dim()) } else { None },
        shape_h: if cfg.mode.uses_hyper() { out.hyper.as_ref().map(|z| z.dim()) } else { None },
    })
}

/// Gradient of [`loss::infonce_loss`] in its similarity form,
/// `(1/τ)·Σ_i Σ_k p_k·∇(s[i][k] − s[i][pos])`.
///
/// Independent of the distance-based path; used to cross-check it.
pub fn infonce_grad(z: ArrayView2<'_, f64>, pairing: &Pairing, tau: f64) -> Result<(f64, Array2<f64>)> {
    let k = z.nrows();
    if k != pairing.len() {
        return Err(Error::Shape(format!("{k} rows for a pairing of {} rows", pairing.len())));
    }
    let s = loss::similarity_matrix(z)?;
    let norms: Vec<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    // ∇_{z_a} s(a, b) = (ẑ_b − s·ẑ_a)/‖z_a‖
    let ds = |a: usize, b: usize| -> Vec<f64> {
        (0..z.ncols())
            .map(|j| (z[[b, j]] / norms[b] - s[[a, b]] * z[[a, j]] / norms[a]) / norms[a])
            .collect()
    };
    let mut g = Array2::zeros(z.raw_dim());
    let mut total = 0.0;
    for i in 0..k {
        let pos = pairing.pos(i);
        let neg_s: Vec<f64> = (0..k).map(|j| -s[[i, j]]).collect();
        let sm = anchor_softmax(&neg_s, i, pos, tau);
        total += sm.loss;
        for kk in pairing.negatives(i) {
            let w = sm.weights[kk] / tau;
            // ∇(s_ik − s_ipos): rows i, k and pos
            for (row, grad, sign) in [
                (i, ds(i, kk), 1.0),
                (kk, ds(kk, i), 1.0),
                (i, ds(i, pos), -1.0),
                (pos, ds(pos, i), -1.0),
            ] {
                for (j, v) in grad.iter().enumerate() {
                    g[[row, j]] += sign * w * v;
                }
            }
        }
    }
    Ok((total, g))
}

/// Central differences `(f(p + h·e_j) − f(p − h·e_j))/(2h)` per coordinate.
///
/// Coordinates are evaluated in parallel on the current rayon pool; the
/// result does not depend on the number of threads.
pub fn fd_gradient<F>(f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::config("step", format!("must be > 0, got {step}")));
    }
    (0..params.len())
        .into_par_iter()
        .map(|j| {
            let mut p = params.to_vec();
            p[j] = params[j] + step;
            let fp = f(&p)?;
            p[j] = params[j] - step;
            let fm = f(&p)?;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::NonFinite(format!("loss at coordinate {j}")));
            }
            Ok((fp - fm) / (2.0 * step))
        })
        .collect()
}

/// Denominator floor for relative errors near zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradientReport {
    pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>) -> Result<Self> {
        if analytic.len() != numeric.len() {
            return Err(Error::Shape(format!(
                "analytic gradient has {} entries, numeric {}",
                analytic.len(),
                numeric.len()
            )));
        }
        let mut max_rel_err = 0.0f64;
        let mut max_abs_err = 0.0f64;
        for (a, n) in analytic.iter().zip(&numeric) {
            let abs = (a - n).abs();
            let denom = a.abs().max(n.abs()).max(REL_ERR_FLOOR);
            max_abs_err = max_abs_err.max(abs);
            max_rel_err = max_rel_err.max(abs / denom);
        }
        Ok(Self {
            analytic,
            numeric,
            max_rel_err,
            max_abs_err,
        })
    }
}

/// Checks [`loss_grad_embeddings`] against central differences on the head outputs.
pub fn check_head_gradient(
    out: &HeadOutputs,
    pairing: &Pairing,
    cfg: &LossConfig,
    ball: &BallConfig,
    step: f64,
) -> Result<GradientReport> {
    let g = loss_grad_embeddings(out, pairing, cfg, ball)?;
    let ne = if cfg.mode.uses_euclid() { out.euclid.as_ref().map_or(0, |z| z.len()) } else { 0 };
    let params: Vec<f64> = {
        let mut v = Vec::new();
        if ne > 0 {
            v.extend(out.euclid.as_ref().unwrap().iter());
        }
        if cfg.mode.uses_hyper() {
            v.extend(out.require_hyper()?.iter());
        }
        v
    };
    let rebuild = |p: &[f64]| -> HeadOutputs {
        let euclid = out.euclid.as_ref().map(|z| {
            if ne > 0 {
                Array2::from_shape_vec(z.raw_dim(), p[..ne].to_vec()).unwrap()
            } else {
                z.clone()
            }
        });
        let hyper = out.hyper.as_ref().map(|z| {
            if cfg.mode.uses_hyper() {
                Array2::from_shape_vec(z.raw_dim(), p[ne..].to_vec()).unwrap()
            } else {
                z.clone()
            }
        });
        HeadOutputs { euclid, hyper }
    };
    let numeric = fd_gradient(|p| loss::objective(&rebuild(p), pairing, cfg, ball), &params, step)?;
    GradientReport::compare(g.flatten(), numeric)
}

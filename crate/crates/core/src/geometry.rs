//! Poincaré-ball operations on plain `f64` slices.
//!
//! The ball of curvature `c` is `{x : c‖x‖² < 1}`. `c = 0` selects explicit
//! Euclidean branches (vector addition, `2‖x − y‖`) rather than numeric
//! limits. Every operation that can land on or near the boundary re-projects
//! its output to `√c‖x‖ ≤ 1 − eps_ball`.
//!
//! The `*_grad` and `*_vjp` helpers are the hand-derived derivatives used by
//! [`crate::grad`]; they are exact for the functions computed here.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Curvature, pre-map clip radius and boundary margin for hyperbolic ops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BallConfig {
    pub c: f64,
    pub r: f64,
    pub eps_ball: f64,
}

impl Default for BallConfig {
    fn default() -> Self {
        Self {
            c: 0.1,
            r: 2.3,
            eps_ball: 1e-5,
        }
    }
}

impl BallConfig {
    pub fn new(c: f64, r: f64, eps_ball: f64) -> Result<Self> {
        let cfg = Self { c, r, eps_ball };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Curvature `c` with the default clip radius and margin.
    pub fn with_curvature(c: f64) -> Result<Self> {
        Self::new(c, Self::default().r, Self::default().eps_ball)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(Error::config("ball.c", format!("must be finite and >= 0, got {}", self.c)));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::config("ball.r", format!("must be > 0, got {}", self.r)));
        }
        if !(self.eps_ball > 0.0 && self.eps_ball < 1.0) {
            return Err(Error::config(
                "ball.eps_ball",
                format!("must lie in (0, 1), got {}", self.eps_ball),
            ));
        }
        Ok(())
    }

    /// Largest Euclidean norm a projected point may have.
    pub fn max_norm(&self) -> f64 {
        (1.0 - self.eps_ball) / self.c.sqrt()
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.c == 0.0 || self.c * norm_sq(x) < 1.0
    }
}

/// A point strictly inside the ball it was constructed for.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    pub fn new(coords: Vec<f64>, cfg: &BallConfig) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ball point coordinates".into()));
        }
        if !cfg.contains(&coords) {
            return Err(Error::domain(
                "BallPoint::new",
                format!("c‖x‖² = {} is not < 1", cfg.c * norm_sq(&coords)),
            ));
        }
        Ok(Self(coords))
    }

    pub fn origin(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for BallPoint {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

fn check_finite(op: &'static str, name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{op}: argument `{name}`")))
    }
}

fn check_interior(op: &'static str, name: &str, v: &[f64], cfg: &BallConfig) -> Result<()> {
    check_finite(op, name, v)?;
    if cfg.contains(v) {
        Ok(())
    } else {
        Err(Error::domain(
            op,
            format!(
                "argument `{name}` is outside the ball: c‖{name}‖² = {} ≥ 1",
                cfg.c * norm_sq(v)
            ),
        ))
    }
}

/// Möbius addition `x ⊕_c y`.
pub fn mobius_add(x: &[f64], y: &[f64], cfg: &BallConfig) -> Result<BallPoint> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("mobius_add: {} vs {} coordinates", x.len(), y.len())));
    }
    check_interior("mobius_add", "x", x, cfg)?;
    check_interior("mobius_add", "y", y, cfg)?;
    Ok(BallPoint(mobius_add_raw(x, y, cfg)))
}

pub(crate) fn mobius_add_raw(x: &[f64], y: &[f64], cfg: &BallConfig) -> Vec<f64> {
    let c = cfg.c;
    if c == 0.0 {
        return x.iter().zip(y).map(|(a, b)| a + b).collect();
    }
    let xy = dot(x, y);
    let xx = norm_sq(x);
    let yy = norm_sq(y);
    let coef_x = 1.0 + 2.0 * c * xy + c * yy;
    let coef_y = 1.0 - c * xx;
    let denom = 1.0 + 2.0 * c * xy + c * c * xx * yy;
    let mut out: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| (coef_x * a + coef_y * b) / denom)
        .collect();
    project_in_place(&mut out, cfg);
    out
}

/// Geodesic distance `(2/√c)·arctanh(√c‖−x ⊕_c y‖)`. Requires `c > 0`.
pub fn hyp_dist(x: &[f64], y: &[f64], cfg: &BallConfig) -> Result<f64> {
    if cfg.c == 0.0 {
        return Err(Error::domain(
            "hyp_dist",
            "c = 0 has no hyperbolic distance; use the Euclidean limit 2‖x − y‖",
        ));
    }
    if x.len() != y.len() {
        return Err(Error::Shape(format!("hyp_dist: {} vs {} coordinates", x.len(), y.len())));
    }
    check_interior("hyp_dist", "x", x, cfg)?;
    check_interior("hyp_dist", "y", y, cfg)?;
    let d = hyp_dist_raw(x, y, cfg);
    if d.is_finite() {
        Ok(d)
    } else {
        Err(Error::domain("hyp_dist", "‖−x ⊕ y‖ reached the boundary"))
    }
}

pub(crate) fn hyp_dist_raw(x: &[f64], y: &[f64], cfg: &BallConfig) -> f64 {
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let w = mobius_add_raw(&neg_x, y, cfg);
    let sqrt_c = cfg.c.sqrt();
    2.0 / sqrt_c * (sqrt_c * norm(&w)).atanh()
}

/// Gradients of [`hyp_dist`] with respect to `x` and `y`.
///
/// Uses the equivalent form `(1/√c)·arccosh(1 + 2c‖x−y‖²/((1−c‖x‖²)(1−c‖y‖²)))`.
/// Returns zeros at `x = y`, where the distance is not differentiable.
pub fn hyp_dist_grad(x: &[f64], y: &[f64], cfg: &BallConfig) -> (Vec<f64>, Vec<f64>) {
    let c = cfg.c;
    let n = x.len();
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let u = norm_sq(&diff);
    if u == 0.0 {
        return (vec![0.0; n], vec![0.0; n]);
    }
    let alpha = 1.0 - c * norm_sq(x);
    let beta = 1.0 - c * norm_sq(y);
    let zm1 = 2.0 * c * u / (alpha * beta);
    let coef = 2.0 * std::f64::consts::SQRT_2 / (u.sqrt() * (alpha * beta).sqrt() * (zm1 + 2.0).sqrt());
    let kx = c * u / alpha;
    let ky = c * u / beta;
    let gx = (0..n).map(|i| coef * (diff[i] + kx * x[i])).collect();
    let gy = (0..n).map(|i| coef * (-diff[i] + ky * y[i])).collect();
    (gx, gy)
}

/// `tanh(√c‖v‖)/(√c‖v‖)`, with the series used when the argument is tiny.
fn exp0_scale(a: f64) -> f64 {
    if a < 1e-4 {
        1.0 - a * a / 3.0
    } else {
        a.tanh() / a
    }
}

/// Exponential map at the origin, `tanh(√c‖v‖)·v/(√c‖v‖)`.
///
/// The conformal factor at the origin is 2, which cancels the 1/2 inside
/// the general map. `c = 0` returns `v` unchanged.
pub fn exp_map_0(v: &[f64], cfg: &BallConfig) -> Result<BallPoint> {
    check_finite("exp_map_0", "v", v)?;
    Ok(BallPoint(exp_map_0_raw(v, cfg)))
}

pub(crate) fn exp_map_0_raw(v: &[f64], cfg: &BallConfig) -> Vec<f64> {
    if cfg.c == 0.0 {
        return v.to_vec();
    }
    let a = cfg.c.sqrt() * norm(v);
    let s = exp0_scale(a);
    let mut out: Vec<f64> = v.iter().map(|x| s * x).collect();
    project_in_place(&mut out, cfg);
    out
}

/// Vector-Jacobian product of [`exp_map_0`] (before projection) at `v`.
pub fn exp_map_0_vjp(v: &[f64], upstream: &[f64], cfg: &BallConfig) -> Vec<f64> {
    let c = cfg.c;
    if c == 0.0 {
        return upstream.to_vec();
    }
    let a = c.sqrt() * norm(v);
    let g = exp0_scale(a);
    // g'(‖v‖)/‖v‖ = c·(a·sech²a − tanh a)/a³
    let ratio = if a < 1e-3 {
        -2.0 / 3.0 + 8.0 * a * a / 15.0
    } else {
        let sech = 1.0 / a.cosh();
        (a * sech * sech - a.tanh()) / (a * a * a)
    };
    let k = c * ratio * dot(v, upstream);
    v.iter().zip(upstream).map(|(vi, ui)| g * ui + k * vi).collect()
}

/// Rescales `v` to norm `r` when it is longer, otherwise returns it as is.
pub fn clip_norm(v: &[f64], r: f64) -> Vec<f64> {
    let n = norm(v);
    if n <= r {
        v.to_vec()
    } else {
        let s = r / n;
        v.iter().map(|x| x * s).collect()
    }
}

/// Vector-Jacobian product of "rescale to norm `radius` if longer".
///
/// Inside the radius this is the identity; outside it is
/// `(radius/‖v‖)·(I − v̂v̂ᵀ)` applied to `upstream`.
pub fn clip_norm_vjp(v: &[f64], upstream: &[f64], radius: f64) -> Vec<f64> {
    let n = norm(v);
    if n <= radius {
        return upstream.to_vec();
    }
    let s = radius / n;
    let proj = dot(v, upstream) / (n * n);
    v.iter()
        .zip(upstream)
        .map(|(vi, ui)| s * (ui - proj * vi))
        .collect()
}

/// Squared chord distance between unit-normalized vectors, `2 − 2·cos θ`.
pub fn cos_dist(zi: &[f64], zj: &[f64]) -> Result<f64> {
    if zi.len() != zj.len() {
        return Err(Error::Shape(format!("cos_dist: {} vs {} coordinates", zi.len(), zj.len())));
    }
    let ni = norm(zi);
    let nj = norm(zj);
    if ni == 0.0 || nj == 0.0 {
        let which = if ni == 0.0 { "zi" } else { "zj" };
        return Err(Error::domain("cos_dist", format!("argument `{which}` has zero norm")));
    }
    Ok(cos_dist_raw(zi, zj, ni, nj))
}

pub(crate) fn cos_dist_raw(zi: &[f64], zj: &[f64], ni: f64, nj: f64) -> f64 {
    (2.0 - 2.0 * dot(zi, zj) / (ni * nj)).clamp(0.0, 4.0)
}

/// Gradient of [`cos_dist`] with respect to `zi`: `−2(ẑj − (ẑi·ẑj)ẑi)/‖zi‖`.
pub fn cos_dist_grad(zi: &[f64], zj: &[f64]) -> Vec<f64> {
    let ni = norm(zi);
    let nj = norm(zj);
    let cos = dot(zi, zj) / (ni * nj);
    zi.iter()
        .zip(zj)
        .map(|(a, b)| -2.0 * (b / nj - cos * a / ni) / ni)
        .collect()
}

/// Pulls `x` back to `√c‖x‖ = 1 − eps_ball` when it is at or beyond that radius.
pub fn project_to_ball(x: &[f64], cfg: &BallConfig) -> Result<BallPoint> {
    check_finite("project_to_ball", "x", x)?;
    let mut out = x.to_vec();
    project_in_place(&mut out, cfg);
    Ok(BallPoint(out))
}

fn project_in_place(x: &mut [f64], cfg: &BallConfig) {
    if cfg.c == 0.0 {
        return;
    }
    let limit = 1.0 - cfg.eps_ball;
    let scaled = cfg.c.sqrt() * norm(x);
    if scaled >= limit {
        let s = limit / scaled;
        x.iter_mut().for_each(|v| *v *= s);
    }
}

/// Maps a hyperbolic-head output into the ball: clip to `r`, then `exp_map_0`.
pub fn to_ball(v: &[f64], cfg: &BallConfig) -> Vec<f64> {
    exp_map_0_raw(&clip_norm(v, cfg.r), cfg)
}

/// Vector-Jacobian product of [`to_ball`], including the boundary projection.
pub fn to_ball_vjp(v: &[f64], upstream: &[f64], cfg: &BallConfig) -> Vec<f64> {
    let clipped = clip_norm(v, cfg.r);
    let mut g = upstream.to_vec();
    if cfg.c > 0.0 {
        let mapped = exp_map_0_raw_unprojected(&clipped, cfg);
        g = clip_norm_vjp(&mapped, &g, cfg.max_norm());
    }
    let g = exp_map_0_vjp(&clipped, &g, cfg);
    clip_norm_vjp(v, &g, cfg.r)
}

fn exp_map_0_raw_unprojected(v: &[f64], cfg: &BallConfig) -> Vec<f64> {
    let s = exp0_scale(cfg.c.sqrt() * norm(v));
    v.iter().map(|x| s * x).collect()
}

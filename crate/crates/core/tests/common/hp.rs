//! Double-double re-implementation of the training objective, written
//! directly from the formulas. Central differences on it are free of the
//! 64-bit roundoff that limits `fd_gradient` when the summed loss is large.

use gyromix::{BallConfig, HeadOutputs, LossConfig, LossMode, Pairing};
use ndarray::Array2;
use twofloat::TwoFloat as T;

type Rows = Vec<Vec<T>>;

// twofloat's transcendental functions and its TwoFloat/TwoFloat division
// are only good to about 64-bit precision, so those needed here are built
// from its accurate multiply, add and scalar-divide.

/// Long division, one 64-bit quotient digit at a time.
fn div(a: T, b: T) -> T {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    T::from(q1) + q2 + r.hi() / b.hi()
}

/// Taylor series on `x / 2^m`, then `m` squarings.
fn exp(x: T) -> T {
    let m = (x.hi().abs().max(1e-300).log2().ceil() as i32 + 10).max(0);
    let r = x / 2f64.powi(m);
    let (mut term, mut sum) = (T::from(1.0), T::from(1.0));
    for k in 1..=14 {
        term = term * r / k as f64;
        sum += term;
    }
    for _ in 0..m {
        sum = sum * sum;
    }
    sum
}

/// Newton on `exp(y) = x` from the 64-bit logarithm.
fn ln(x: T) -> T {
    let mut y = T::from(x.hi().ln());
    for _ in 0..2 {
        y = y + x * exp(-y) - 1.0;
    }
    y
}

fn tanh(a: T) -> T {
    let e = exp(-2.0 * a);
    div(1.0 - e, 1.0 + e)
}

fn atanh(z: T) -> T {
    0.5 * ln(div(1.0 + z, 1.0 - z))
}

fn dot(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::from(0.0), |s, (x, y)| s + *x * *y)
}

fn norm(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn scale(a: &[T], s: T) -> Vec<T> {
    a.iter().map(|x| *x * s).collect()
}

fn cos_matrix(z: &Rows) -> Rows {
    let norms: Vec<T> = z.iter().map(|r| norm(r)).collect();
    (0..z.len())
        .map(|i| {
            (0..z.len())
                .map(|j| 2.0 - 2.0 * div(dot(&z[i], &z[j]), norms[i] * norms[j]))
                .collect()
        })
        .collect()
}

/// clip to `r`, exponential map at the origin, boundary projection.
fn to_ball(v: &[T], ball: &BallConfig) -> Vec<T> {
    let c = T::from(ball.c);
    let r = T::from(ball.r);
    let n = norm(v);
    let v = if n > r { scale(v, div(r, n)) } else { v.to_vec() };
    let n = norm(&v);
    if n == 0.0 {
        return v;
    }
    let a = c.sqrt() * n;
    let x = scale(&v, div(tanh(a), a));
    let limit = T::from(1.0 - ball.eps_ball);
    let sn = c.sqrt() * norm(&x);
    if sn >= limit {
        scale(&x, div(limit, sn))
    } else {
        x
    }
}

fn mobius_add(x: &[T], y: &[T], c: T) -> Vec<T> {
    let xy = dot(x, y);
    let xx = dot(x, x);
    let yy = dot(y, y);
    let a = 1.0 + 2.0 * c * xy + c * yy;
    let b = 1.0 - c * xx;
    let den = 1.0 + 2.0 * c * xy + c * c * xx * yy;
    x.iter().zip(y).map(|(xi, yi)| div(a * *xi + b * *yi, den)).collect()
}

fn hyp_matrix(b: &Rows, c: T) -> Rows {
    let sc = c.sqrt();
    (0..b.len())
        .map(|i| {
            let neg: Vec<T> = b[i].iter().map(|v| -*v).collect();
            (0..b.len())
                .map(|j| {
                    if i == j {
                        return T::from(0.0);
                    }
                    let m = norm(&mobius_add(&neg, &b[j], c));
                    div(T::from(2.0), sc) * atanh(sc * m)
                })
                .collect()
        })
        .collect()
}

fn ce(d: &Rows, pairing: &Pairing, tau: f64) -> T {
    let tau = T::from(tau);
    let mut total = T::from(0.0);
    for i in 0..d.len() {
        let logits: Vec<(usize, T)> = (0..d.len()).filter(|&k| k != i).map(|k| (k, div(-d[i][k], tau))).collect();
        let m = logits.iter().map(|&(_, l)| l).fold(logits[0].1, |a, b| if b > a { b } else { a });
        let sum = logits.iter().fold(T::from(0.0), |s, &(_, l)| s + exp(l - m));
        let pos = logits.iter().find(|&&(k, _)| k == pairing.pos(i)).unwrap().1;
        total += m + ln(sum) - pos;
    }
    total
}

fn lift(z: &Array2<f64>) -> Rows {
    z.rows().into_iter().map(|r| r.iter().map(|&v| T::from(v)).collect()).collect()
}

fn objective(e: Option<&Rows>, h: Option<&Rows>, pairing: &Pairing, cfg: &LossConfig, ball: &BallConfig) -> T {
    let dc = e.map(cos_matrix);
    let dh = h.map(|h| {
        let b: Rows = h.iter().map(|v| to_ball(v, ball)).collect();
        hyp_matrix(&b, T::from(ball.c))
    });
    match cfg.mode {
        LossMode::Euclidean => ce(&dc.unwrap(), pairing, cfg.tau),
        LossMode::Hyperbolic => ce(&dh.unwrap(), pairing, cfg.tau),
        LossMode::Mixed => {
            let (dc, dh) = (dc.unwrap(), dh.unwrap());
            let fused: Rows = dc
                .iter()
                .zip(&dh)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x + cfg.lambda * *y).collect())
                .collect();
            ce(&fused, pairing, cfg.tau)
        }
        LossMode::ConvexCombo => {
            let w = cfg.combo_weight;
            w * ce(&dh.unwrap(), pairing, cfg.tau) + (1.0 - w) * ce(&dc.unwrap(), pairing, cfg.tau)
        }
    }
}

/// Central differences in double-double over the branches the mode uses,
/// Euclidean coordinates first, in row-major order.
pub fn fd_gradient(out: &HeadOutputs, pairing: &Pairing, cfg: &LossConfig, ball: &BallConfig, h: f64) -> Vec<f64> {
    let mut e = out.euclid.as_ref().filter(|_| cfg.mode.uses_euclid()).map(lift);
    let mut hy = out.hyper.as_ref().filter(|_| cfg.mode.uses_hyper()).map(lift);
    let mut coords = Vec::new();
    for (branch, rows) in [(0, &e), (1, &hy)] {
        if let Some(rows) = rows {
            for i in 0..rows.len() {
                for j in 0..rows[i].len() {
                    coords.push((branch, i, j));
                }
            }
        }
    }
    let step = T::from(h);
    coords
        .into_iter()
        .map(|(branch, i, j)| {
            let mut eval = |delta: T| {
                let target = if branch == 0 { e.as_mut() } else { hy.as_mut() }.unwrap();
                let orig = target[i][j];
                target[i][j] = orig + delta;
                let v = objective(e.as_ref(), hy.as_ref(), pairing, cfg, ball);
                let target = if branch == 0 { e.as_mut() } else { hy.as_mut() }.unwrap();
                target[i][j] = orig;
                v
            };
            let up = eval(step);
            let down = eval(-step);
            f64::from(div(up - down, 2.0 * step))
        })
        .collect()
}

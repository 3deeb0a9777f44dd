//! Two-layer MLP trunk with a Euclidean and a hyperbolic projection head.
//!
//! Forward: `h = tanh(W1·x + b1)`, `t = W2·h + b2`, `u = t/‖t‖` (with the
//! zero-norm guard), then `e = He·u + be` and `v = Hh·u + bh`. The
//! hyperbolic rows `v` are pre-map; the loss clips and maps them.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::HeadGrads;
use crate::loss::HeadOutputs;

/// Norms below this are treated as zero by the trunk normalization.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    fn gaussian<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let s = 1.0 / (input as f64).sqrt();
        let w = Array2::from_shape_simple_fn((output, input), || {
            let g: f64 = StandardNormal.sample(rng);
            g * s
        });
        Self { w, b: Array1::zeros(output) }
    }

    /// Random Gaussian matrix with orthonormal rows (or columns when taller).
    fn semi_orthogonal<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let tall = output > input;
        let (vecs, len) = if tall { (input, output) } else { (output, input) };
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vecs);
        while basis.len() < vecs {
            let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
            for q in &basis {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-8 {
                v.iter_mut().for_each(|a| *a /= n);
                basis.push(v);
            }
        }
        let mut w = Array2::zeros((output, input));
        for (k, q) in basis.iter().enumerate() {
            for (j, &val) in q.iter().enumerate() {
                if tall {
                    w[[j, k]] = val;
                } else {
                    w[[k, j]] = val;
                }
            }
        }
        Self { w, b: Array1::zeros(output) }
    }

    /// Rows of `x` mapped through the layer.
    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub out_dim: usize,
    /// Both branches read from `head_e` when set.
    pub shared_heads: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embed_dim: 32,
            out_dim: 16,
            shared_heads: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("out_dim", self.out_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("encoder.{name}"), "must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub trunk_in: Linear,
    pub trunk_out: Linear,
    pub head_e: Linear,
    pub head_h: Linear,
    pub shared_heads: bool,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    x: Array2<f64>,
    hidden: Array2<f64>,
    trunk: Array2<f64>,
    unit: Array2<f64>,
    /// Rows where the zero-norm guard replaced the trunk output.
    guarded: Vec<bool>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::config("encoder.input_dim", "must be >= 1"));
        }
        Ok(Self {
            trunk_in: Linear::gaussian(input_dim, cfg.hidden_dim, rng),
            trunk_out: Linear::gaussian(cfg.hidden_dim, cfg.embed_dim, rng),
            head_e: Linear::semi_orthogonal(cfg.embed_dim, cfg.out_dim, rng),
            head_h: Linear::semi_orthogonal(cfg.embed_dim, cfg.out_dim, rng),
            shared_heads: cfg.shared_heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk_in.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.head_e.w.nrows()
    }

    fn hyper_head(&self) -> &Linear {
        if self.shared_heads {
            &self.head_e
        } else {
            &self.head_h
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(HeadOutputs, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "encoder expects {} input features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let hidden = self.trunk_in.forward(x).mapv(f64::tanh);
        let trunk = self.trunk_out.forward(hidden.view());
        let mut unit = trunk.clone();
        let mut guarded = vec![false; unit.nrows()];
        for (i, mut row) in unit.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if n < NORM_GUARD || !n.is_finite() {
                row.fill(0.0);
                row[0] = 1.0;
                guarded[i] = true;
            } else {
                row /= n;
            }
        }
        let euclid = self.head_e.forward(unit.view());
        let hyper = self.hyper_head().forward(unit.view());
        if euclid.iter().chain(hyper.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let cache = ForwardCache {
            x: x.to_owned(),
            hidden,
            trunk,
            unit,
            guarded,
        };
        Ok((
            HeadOutputs {
                euclid: Some(euclid),
                hyper: Some(hyper),
            },
            cache,
        ))
    }

    /// Branch outputs for `x`.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<HeadOutputs> {
        Ok(self.forward(x)?.0)
    }

    /// Parameter gradient from head-output gradients.
    pub fn backward(&self, cache: &ForwardCache, g: &HeadGrads) -> EncoderParams {
        let mut grads = self.zeros_like();
        let mut g_unit = Array2::zeros(cache.unit.raw_dim());
        let mut head = |lin: &Linear, gl: &mut Linear, go: &Array2<f64>| {
            gl.w += &go.t().dot(&cache.unit);
            gl.b += &go.sum_axis(Axis(0));
            g_unit += &go.dot(&lin.w);
        };
        if let Some(ge) = &g.euclid {
            head(&self.head_e, &mut grads.head_e, ge);
        }
        if let Some(gh) = &g.hyper {
            if self.shared_heads {
                head(&self.head_e, &mut grads.head_e, gh);
            } else {
                head(&self.head_h, &mut grads.head_h, gh);
            }
        }
        // u = t/‖t‖  ⇒  ∂/∂t = (g − (u·g)u)/‖t‖; zero where guarded
        let mut g_trunk = Array2::zeros(cache.trunk.raw_dim());
        for i in 0..cache.trunk.nrows() {
            if cache.guarded[i] {
                continue;
            }
            let t = cache.trunk.row(i);
            let u = cache.unit.row(i);
            let gu = g_unit.row(i);
            let n = t.dot(&t).sqrt();
            let proj = u.dot(&gu);
            g_trunk.row_mut(i).assign(&((&gu - &(&u * proj)) / n));
        }
        grads.trunk_out.w = g_trunk.t().dot(&cache.hidden);
        grads.trunk_out.b = g_trunk.sum_axis(Axis(0));
        let g_hidden = g_trunk.dot(&self.trunk_out.w) * cache.hidden.mapv(|h| 1.0 - h * h);
        grads.trunk_in.w = g_hidden.t().dot(&cache.x);
        grads.trunk_in.b = g_hidden.sum_axis(Axis(0));
        grads
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk_in: Linear::zeros(self.trunk_in.w.ncols(), self.trunk_in.w.nrows()),
            trunk_out: Linear::zeros(self.trunk_out.w.ncols(), self.trunk_out.w.nrows()),
            head_e: Linear::zeros(self.head_e.w.ncols(), self.head_e.w.nrows()),
            head_h: Linear::zeros(self.head_h.w.ncols(), self.head_h.w.nrows()),
            shared_heads: self.shared_heads,
        }
    }

    fn layers(&self) -> [&Linear; 4] {
        [&self.trunk_in, &self.trunk_out, &self.head_e, &self.head_h]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.trunk_in, &mut self.trunk_out, &mut self.head_e, &mut self.head_h]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers().iter().flat_map(|l| l.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut src = flat.iter();
        for layer in self.layers_mut() {
            for (dst, v) in layer.iter_mut().zip(&mut src) {
                *dst = *v;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        let d_in = self.trunk_in.w.ncols();
        let hidden = self.trunk_in.w.nrows();
        let embed = self.trunk_out.w.nrows();
        let ok = d_in > 0
            && self.trunk_in.b.len() == hidden
            && self.trunk_out.w.ncols() == hidden
            && self.trunk_out.b.len() == embed
            && self.head_e.w.ncols() == embed
            && self.head_h.w.ncols() == embed
            && self.head_e.w.nrows() == self.head_h.w.nrows()
            && self.head_e.b.len() == self.head_e.w.nrows()
            && self.head_h.b.len() == self.head_h.w.nrows();
        if !ok {
            return Err(Error::Snapshot("encoder layer dimensions are inconsistent".into()));
        }
        if !self.is_finite() {
            return Err(Error::Snapshot("encoder parameters contain non-finite values".into()));
        }
        Ok(())
    }
}

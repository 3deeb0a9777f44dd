//! Batch sampling, optimizers and the training loop.

pub mod data;
pub mod encoder;

use ndarray::ArrayView2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BallConfig;
use crate::grad;
use crate::loss::{self, HeadOutputs, LossConfig, Pairing};
use data::Dataset;
use encoder::{EncoderConfig, EncoderParams};

/// Row indices into a dataset plus the pairing of the resulting batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub rows: Vec<usize>,
    pub pairing: Pairing,
}

/// `N` distinct classes, two distinct samples each; rows `2j`, `2j + 1` pair up.
pub fn sample_batch<R: Rng + ?Sized>(ds: &Dataset, n_classes: usize, rng: &mut R) -> Result<BatchIndices> {
    if n_classes < 2 {
        return Err(Error::Sampling(format!("need N >= 2 classes per batch, got {n_classes}")));
    }
    let eligible = ds.pairable_classes();
    if eligible.len() < n_classes {
        return Err(Error::Sampling(format!(
            "requested {n_classes} classes per batch but only {} classes have >= 2 samples",
            eligible.len()
        )));
    }
    let picked = index::sample(rng, eligible.len(), n_classes);
    let mut rows = Vec::with_capacity(2 * n_classes);
    let mut labels = Vec::with_capacity(n_classes);
    for ci in picked.iter() {
        let label = eligible[ci];
        let members = &ds.class_index()[&label];
        let two = index::sample(rng, members.len(), 2);
        rows.push(members[two.index(0)]);
        rows.push(members[two.index(1)]);
        labels.push(label);
    }
    Ok(BatchIndices {
        rows,
        pairing: Pairing::adjacent(&labels)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Adam with decoupled weight decay.
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub classes_per_batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub ball: BallConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes_per_batch: 8,
            steps: 500,
            lr: 1e-3,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.01,
            grad_clip: 3.0,
            seed: 0,
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            ball: BallConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 {
            return Err(Error::config("train.classes_per_batch", "must be >= 2"));
        }
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("train.lr", format!("must be >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be > 0"));
        }
        self.encoder.validate()?;
        self.loss.validate()?;
        self.ball.validate()?;
        if self.loss.mode.uses_hyper() && self.ball.c == 0.0 {
            return Err(Error::config("ball.c", "hyperbolic loss modes need c > 0"));
        }
        Ok(())
    }
}

/// Scales `g` in place so its norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        g.iter_mut().for_each(|x| *x *= s);
    }
    n
}

enum Optimizer {
    Sgd,
    Adamw { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adamw => Optimizer::Adamw {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, gi) in params.iter_mut().zip(g) {
                    *p -= lr * (gi + wd * *p);
                }
            }
            Optimizer::Adamw { m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t);
                for i in 0..params.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * params[i]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub trace: Vec<StepRecord>,
}

impl TrainOutcome {
    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let n = n.min(self.trace.len()).max(1);
        self.trace[self.trace.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64
    }
}

/// Independent RNG streams for initialization and batch sampling.
pub fn seeded_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(0);
    let mut batches = ChaCha8Rng::seed_from_u64(seed);
    batches.set_stream(1);
    (init, batches)
}

/// Loss and encoder-parameter gradient for one batch of rows.
pub fn batch_loss_and_grad(
    params: &EncoderParams,
    x: ArrayView2<'_, f64>,
    pairing: &Pairing,
    loss_cfg: &LossConfig,
    ball: &BallConfig,
) -> Result<(f64, EncoderParams)> {
    let (out, cache) = params.forward(x)?;
    let out = restrict_to_mode(out, loss_cfg);
    let hg = grad::loss_grad_embeddings(&out, pairing, loss_cfg, ball)?;
    Ok((hg.loss, params.backward(&cache, &hg)))
}

/// Loss only, for finite-difference checks through the whole encoder.
pub fn batch_loss(
    params: &EncoderParams,
    x: ArrayView2<'_, f64>,
    pairing: &Pairing,
    loss_cfg: &LossConfig,
    ball: &BallConfig,
) -> Result<f64> {
    let out = restrict_to_mode(params.encode(x)?, loss_cfg);
    loss::objective(&out, pairing, loss_cfg, ball)
}

fn restrict_to_mode(mut out: HeadOutputs, cfg: &LossConfig) -> HeadOutputs {
    if !cfg.mode.uses_euclid() {
        out.euclid = None;
    }
    if !cfg.mode.uses_hyper() {
        out.hyper = None;
    }
    out
}

/// Runs `cfg.steps` optimizer steps on batches drawn from `ds`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut init_rng, mut batch_rng) = seeded_streams(cfg.seed);
    let mut params = EncoderParams::init(ds.dim(), &cfg.encoder, &mut init_rng)?;
    let mut flat = params.to_flat();
    let mut opt = Optimizer::new(cfg.optimizer, flat.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(ds, cfg.classes_per_batch, &mut batch_rng)?;
        let x = ds.x.select(ndarray::Axis(0), &batch.rows);
        let (loss, g) = batch_loss_and_grad(&params, x.view(), &batch.pairing, &cfg.loss, &cfg.ball)?;
        let mut g = g.to_flat();
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        let grad_norm = clip_global_norm(&mut g, cfg.grad_clip);
        let clipped_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        opt.step(&mut flat, &g, cfg.lr, cfg.weight_decay);
        params.set_flat(&flat)?;
        if !params.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        trace.push(StepRecord {
            step,
            loss,
            grad_norm,
            clipped_norm,
        });
        log::trace!("step {step}: loss {loss:.6}, |g| {grad_norm:.4}");
    }
    Ok(TrainOutcome { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use data::{synth_hierarchy, SynthSpec};

    fn blobs(classes: usize) -> Dataset {
        let spec = SynthSpec {
            depth: 1,
            leaf_classes: classes,
            samples_per_class: 6,
            dim: 4,
            ..SynthSpec::default()
        };
        synth_hierarchy(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn batch_contract() {
        let ds = blobs(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let b = sample_batch(&ds, 2, &mut rng).unwrap();
            assert_eq!(b.rows.len(), 4);
            assert_ne!(b.rows[0], b.rows[1]);
            for i in 0..4 {
                assert_eq!(ds.y[b.rows[i]], b.pairing.labels()[i]);
            }
            assert_ne!(b.pairing.labels()[0], b.pairing.labels()[2]);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let ds = blobs(5);
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..10).map(|_| sample_batch(&ds, 3, &mut r).unwrap().rows).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..10).map(|_| sample_batch(&ds, 3, &mut r).unwrap().rows).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_classes() {
        let err = sample_batch(&blobs(2), 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("only 2 classes"), "{err}");
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let ds = blobs(4);
        let cfg = TrainConfig {
            classes_per_batch: 2,
            steps: 5,
            lr: 0.0,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&ds, &cfg).unwrap();
        let (mut init, _) = seeded_streams(4);
        let fresh = EncoderParams::init(ds.dim(), &cfg.encoder, &mut init).unwrap();
        assert_eq!(out.params, fresh);
    }

    #[test]
    fn clip_global_norm_bounds() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 3.0), 5.0);
        assert!((g[0] - 1.8).abs() < 1e-15 && (g[1] - 2.4).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_global_norm(&mut g, 3.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.classes_per_batch = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.loss.mode = loss::LossMode::Hyperbolic;
        c.ball.c = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("ball.c"));
    }
}

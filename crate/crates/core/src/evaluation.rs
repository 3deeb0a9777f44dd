//! Retrieval metrics and triplet-weight diagnostics.
//!
//! Neighbor rankings break distance ties by ascending sample index so that
//! reports are identical across platforms and thread counts.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BallConfig};
use crate::loss::{self, HeadOutputs, LossConfig, LossMode, Pairing};
use crate::training::data::Dataset;
use crate::training::encoder::EncoderParams;
use crate::training::{self, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMetric {
    Cos,
    Hyp,
    Mix,
}

impl RetrievalMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMetric::Cos => "cos",
            RetrievalMetric::Hyp => "hyp",
            RetrievalMetric::Mix => "mix",
        }
    }

    /// The metric matching what a loss mode trains.
    pub fn for_mode(mode: LossMode) -> Self {
        match mode {
            LossMode::Euclidean => RetrievalMetric::Cos,
            LossMode::Hyperbolic => RetrievalMetric::Hyp,
            LossMode::Mixed | LossMode::ConvexCombo => RetrievalMetric::Mix,
        }
    }
}

impl std::str::FromStr for RetrievalMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" => Ok(RetrievalMetric::Cos),
            "hyp" => Ok(RetrievalMetric::Hyp),
            "mix" => Ok(RetrievalMetric::Mix),
            other => Err(Error::config("metric", format!("unknown metric `{other}` (cos, hyp, mix)"))),
        }
    }
}

/// A set of embedded samples and the distance used to compare them.
#[derive(Debug, Clone)]
pub enum EmbeddingSpace {
    Cosine { z: Array2<f64> },
    /// Rows are ball points.
    Hyperbolic { z: Array2<f64>, cfg: BallConfig },
    /// `D_cos(euclid) + λ·D_hyp(ball)`.
    Mixed {
        euclid: Array2<f64>,
        ball: Array2<f64>,
        lambda: f64,
        cfg: BallConfig,
    },
}

impl EmbeddingSpace {
    pub fn cosine(z: Array2<f64>) -> Result<Self> {
        if let Some(i) = z.rows().into_iter().position(|r| r.dot(&r) == 0.0) {
            return Err(Error::domain("cosine space", format!("row {i} has zero norm")));
        }
        Ok(EmbeddingSpace::Cosine { z })
    }

    pub fn hyperbolic(z: Array2<f64>, cfg: BallConfig) -> Result<Self> {
        check_ball_rows(&z, &cfg)?;
        Ok(EmbeddingSpace::Hyperbolic { z, cfg })
    }

    pub fn mixed(euclid: Array2<f64>, ball: Array2<f64>, lambda: f64, cfg: BallConfig) -> Result<Self> {
        if euclid.nrows() != ball.nrows() {
            return Err(Error::Shape(format!(
                "euclidean rows {} != hyperbolic rows {}",
                euclid.nrows(),
                ball.nrows()
            )));
        }
        check_ball_rows(&ball, &cfg)?;
        Ok(EmbeddingSpace::Mixed { euclid, ball, lambda, cfg })
    }

    /// Builds the space for `metric` from raw head outputs.
    pub fn from_heads(out: &HeadOutputs, metric: RetrievalMetric, lambda: f64, cfg: &BallConfig) -> Result<Self> {
        match metric {
            RetrievalMetric::Cos => Self::cosine(out.require_euclid()?.clone()),
            RetrievalMetric::Hyp => Self::hyperbolic(out.ball_points(cfg)?, *cfg),
            RetrievalMetric::Mix => Self::mixed(out.require_euclid()?.clone(), out.ball_points(cfg)?, lambda, *cfg),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EmbeddingSpace::Cosine { z } | EmbeddingSpace::Hyperbolic { z, .. } => z.nrows(),
            EmbeddingSpace::Mixed { euclid, .. } => euclid.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        match self {
            EmbeddingSpace::Cosine { z } => cos_rows(z.view(), i, j),
            EmbeddingSpace::Hyperbolic { z, cfg } => hyp_rows(z.view(), i, j, cfg),
            EmbeddingSpace::Mixed { euclid, ball, lambda, cfg } => {
                cos_rows(euclid.view(), i, j) + lambda * hyp_rows(ball.view(), i, j, cfg)
            }
        }
    }

    /// All `j ≠ i` sorted by `(distance, index)`.
    pub fn ranked_from(&self, i: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = (0..self.len()).filter(|&j| j != i).map(|j| (j, self.dist(i, j))).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v
    }
}

fn check_ball_rows(z: &Array2<f64>, cfg: &BallConfig) -> Result<()> {
    if cfg.c == 0.0 {
        return Err(Error::config("ball.c", "hyperbolic retrieval needs c > 0"));
    }
    for (i, r) in z.rows().into_iter().enumerate() {
        if cfg.c * r.dot(&r) >= 1.0 {
            return Err(Error::domain("hyperbolic space", format!("row {i} lies outside the ball")));
        }
    }
    Ok(())
}

fn cos_rows(z: ArrayView2<'_, f64>, i: usize, j: usize) -> f64 {
    let (a, b) = (z.row(i), z.row(j));
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    (2.0 - 2.0 * a.dot(&b) / (na * nb)).clamp(0.0, 4.0)
}

fn hyp_rows(z: ArrayView2<'_, f64>, i: usize, j: usize, cfg: &BallConfig) -> f64 {
    geometry::hyp_dist_raw(&z.row(i).to_vec(), &z.row(j).to_vec(), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub metric: RetrievalMetric,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub queries: usize,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

/// Fraction of queries whose `K` nearest other samples include a same-label one.
pub fn recall_at_k(
    space: &EmbeddingSpace,
    metric: RetrievalMetric,
    labels: &[u32],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let m = space.len();
    if labels.len() != m {
        return Err(Error::Shape(format!("{m} embeddings but {} labels", labels.len())));
    }
    if m < 2 {
        return Err(Error::Shape("recall needs at least 2 samples".into()));
    }
    if ks.is_empty() {
        return Err(Error::config("ks", "need at least one K"));
    }
    for &k in ks {
        if k == 0 || k >= m {
            return Err(Error::config("ks", format!("K = {k} must lie in [1, {}]", m - 1)));
        }
    }
    // rank (0-based) of the first correct neighbor per query, or None
    let first_hit: Vec<Option<usize>> = (0..m)
        .into_par_iter()
        .map(|q| {
            space
                .ranked_from(q)
                .iter()
                .position(|&(j, _)| labels[j] == labels[q])
        })
        .collect();
    let recall = ks
        .iter()
        .map(|&k| first_hit.iter().filter(|h| matches!(h, Some(r) if *r < k)).count() as f64 / m as f64)
        .collect();
    Ok(RetrievalReport {
        metric,
        ks: ks.to_vec(),
        recall,
        queries: m,
    })
}

/// The `m` nearest samples with a label different from the anchor's.
pub fn hard_negatives(anchor: usize, space: &EmbeddingSpace, labels: &[u32], m: usize) -> Result<Vec<usize>> {
    if labels.len() != space.len() {
        return Err(Error::Shape(format!("{} embeddings but {} labels", space.len(), labels.len())));
    }
    if anchor >= labels.len() {
        return Err(Error::Shape(format!("anchor {anchor} out of range")));
    }
    let negatives: Vec<usize> = space
        .ranked_from(anchor)
        .into_iter()
        .filter(|&(j, _)| labels[j] != labels[anchor])
        .map(|(j, _)| j)
        .collect();
    if m > negatives.len() {
        return Err(Error::config(
            "m",
            format!("asked for {m} hard negatives but anchor {anchor} has {}", negatives.len()),
        ));
    }
    Ok(negatives[..m].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorOverlap {
    pub anchor: usize,
    pub top_e: Vec<usize>,
    pub top_h: Vec<usize>,
    pub only_e: Vec<usize>,
    pub only_h: Vec<usize>,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub m: usize,
    pub anchors: Vec<AnchorOverlap>,
    pub mean_jaccard: f64,
}

/// Top-`m` hard negatives under cosine (`z_e`) and hyperbolic (`z_h`, ball
/// points) distances, per anchor, with their disagreement.
pub fn overlap_report(
    z_e: &Array2<f64>,
    z_h: &Array2<f64>,
    labels: &[u32],
    m: usize,
    cfg: &BallConfig,
) -> Result<OverlapReport> {
    if z_e.nrows() != z_h.nrows() || z_e.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "overlap needs equal lengths: {} euclidean, {} hyperbolic, {} labels",
            z_e.nrows(),
            z_h.nrows(),
            labels.len()
        )));
    }
    if m == 0 {
        return Err(Error::config("m", "must be >= 1"));
    }
    let se = EmbeddingSpace::cosine(z_e.clone())?;
    let sh = EmbeddingSpace::hyperbolic(z_h.clone(), *cfg)?;
    let anchors = (0..labels.len())
        .into_par_iter()
        .map(|a| {
            let top_e = hard_negatives(a, &se, labels, m)?;
            let top_h = hard_negatives(a, &sh, labels, m)?;
            let set_e: BTreeSet<usize> = top_e.iter().copied().collect();
            let set_h: BTreeSet<usize> = top_h.iter().copied().collect();
            let only_e: Vec<usize> = set_e.difference(&set_h).copied().collect();
            let only_h: Vec<usize> = set_h.difference(&set_e).copied().collect();
            let inter = set_e.intersection(&set_h).count() as f64;
            let union = set_e.union(&set_h).count() as f64;
            Ok(AnchorOverlap {
                anchor: a,
                top_e,
                top_h,
                only_e,
                only_h,
                jaccard: inter / union,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_jaccard = anchors.iter().map(|a| a.jaccard).sum::<f64>() / anchors.len().max(1) as f64;
    Ok(OverlapReport { m, anchors, mean_jaccard })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PProfileRow {
    pub anchor: usize,
    /// 0 for the nearest negative.
    pub rank: usize,
    pub negative: usize,
    pub distance: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PProfile {
    pub rows: Vec<PProfileRow>,
    pub p_pos: Vec<f64>,
    pub n_pairs: usize,
}

impl PProfile {
    /// `1/(2N − 1)`, the weight every term gets when all distances are equal.
    pub fn uniform_level(&self) -> f64 {
        1.0 / (2 * self.n_pairs - 1) as f64
    }

    pub fn max_p(&self, anchor: usize) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.anchor == anchor)
            .map(|r| r.p)
            .fold(0.0, f64::max)
    }
}

/// Per-anchor negatives sorted by ascending distance with their `p(x⁻)`.
pub fn p_profile(out: &HeadOutputs, pairing: &Pairing, cfg: &LossConfig, ball: &BallConfig) -> Result<PProfile> {
    let d = loss::mode_distance_matrix(out, cfg, ball)?;
    let w = loss::triplet_weights(&d, pairing, cfg.tau)?;
    let mut rows = Vec::new();
    for i in 0..pairing.len() {
        let mut negs: Vec<usize> = pairing.negatives(i).collect();
        negs.sort_by(|&a, &b| d.d[[i, a]].total_cmp(&d.d[[i, b]]).then(a.cmp(&b)));
        for (rank, k) in negs.into_iter().enumerate() {
            rows.push(PProfileRow {
                anchor: i,
                rank,
                negative: k,
                distance: d.d[[i, k]],
                p: w.p_neg[[i, k]],
            });
        }
    }
    Ok(PProfile {
        rows,
        p_pos: w.p_pos,
        n_pairs: pairing.n_pairs(),
    })
}

/// Recall@K of a trained encoder on `ds`, under the given metric.
pub fn evaluate_model(
    params: &EncoderParams,
    ds: &Dataset,
    metric: RetrievalMetric,
    lambda: f64,
    cfg: &BallConfig,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let out = params.encode(ds.x.view())?;
    let space = EmbeddingSpace::from_heads(&out, metric, lambda, cfg)?;
    recall_at_k(&space, metric, &ds.y, ks)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub taus: Vec<f64>,
    pub cs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub modes: Vec<LossMode>,
}

/// One trained-and-evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: LossMode,
    pub tau: f64,
    /// 0 for euclidean cells.
    pub c: f64,
    /// 0 for cells without a mixing weight.
    pub lambda: f64,
    pub recall1: f64,
    /// Mean loss over the final ten steps.
    pub loss: f64,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.taus.is_empty() {
            return Err(Error::config("sweep", "grid is empty: need at least one mode and one tau"));
        }
        let needs_c = self.modes.iter().any(|m| m.uses_hyper());
        if needs_c && self.cs.is_empty() {
            return Err(Error::config("sweep.cs", "hyperbolic modes need at least one c"));
        }
        let needs_lambda = self.modes.iter().any(|m| matches!(m, LossMode::Mixed));
        if needs_lambda && self.lambdas.is_empty() {
            return Err(Error::config("sweep.lambdas", "mixed mode needs at least one lambda"));
        }
        for &t in &self.taus {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config("sweep.taus", format!("tau must be > 0, got {t}")));
            }
        }
        for &c in &self.cs {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("sweep.cs", format!("c must be > 0, got {c}")));
            }
        }
        for &l in &self.lambdas {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::config("sweep.lambdas", format!("lambda must be >= 0, got {l}")));
            }
        }
        Ok(())
    }

    /// Grid points in report order: mode, then tau, then c, then lambda.
    pub fn points(&self) -> Vec<(LossMode, f64, f64, f64)> {
        let mut pts = Vec::new();
        for &mode in &self.modes {
            for &tau in &self.taus {
                match mode {
                    LossMode::Euclidean => pts.push((mode, tau, 0.0, 0.0)),
                    LossMode::Hyperbolic | LossMode::ConvexCombo => {
                        for &c in &self.cs {
                            pts.push((mode, tau, c, 0.0));
                        }
                    }
                    LossMode::Mixed => {
                        for &c in &self.cs {
                            for &l in &self.lambdas {
                                pts.push((mode, tau, c, l));
                            }
                        }
                    }
                }
            }
        }
        pts
    }
}

/// Number of trailing steps averaged into a cell's reported loss.
pub const SWEEP_LOSS_WINDOW: usize = 10;

/// Trains and evaluates one cell. Every cell starts from the same seed, so
/// cells differ only in their grid coordinates.
pub fn run_cell(train: &Dataset, eval: &Dataset, base: &TrainConfig, point: (LossMode, f64, f64, f64)) -> SweepCell {
    let (mode, tau, c, lambda) = point;
    let start = Instant::now();
    let mut cfg = base.clone();
    cfg.loss.mode = mode;
    cfg.loss.tau = tau;
    if mode.uses_hyper() {
        cfg.ball.c = c;
    }
    if matches!(mode, LossMode::Mixed) {
        cfg.loss.lambda = lambda;
    }
    let result = training::train(train, &cfg).and_then(|outcome| {
        let metric = RetrievalMetric::for_mode(mode);
        let rep = evaluate_model(&outcome.params, eval, metric, cfg.loss.lambda, &cfg.ball, &[1])?;
        Ok((rep.recall[0], outcome.tail_loss(SWEEP_LOSS_WINDOW)))
    });
    let (recall1, loss, status) = match result {
        Ok((r, l)) => (r, l, "ok".to_string()),
        Err(e) => (f64::NAN, f64::NAN, e.to_string()),
    };
    SweepCell {
        mode,
        tau,
        c,
        lambda,
        recall1,
        loss,
        status,
        runtime_secs: start.elapsed().as_secs_f64(),
    }
}

/// Trains one model per grid point on the first half of the classes and
/// reports Recall@1 on the second half. Cells run in parallel on the
/// current rayon pool; a failing cell is recorded, not fatal.
pub fn sweep(ds: &Dataset, base: &TrainConfig, grid: &SweepGrid) -> Result<SweepReport> {
    grid.validate()?;
    let (train, eval) = ds.split_by_class()?;
    let cells = grid
        .points()
        .into_par_iter()
        .map(|pt| run_cell(&train, &eval, base, pt))
        .collect();
    Ok(SweepReport { seed: base.seed, cells })
}

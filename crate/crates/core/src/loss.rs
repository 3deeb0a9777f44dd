//! Pairwise cross-entropy over distance matrices.
//!
//! For anchor `i` with positive `pos(i)` the per-anchor term is
//!
//! ```text
//! −log( exp(−D[i][pos]/τ) / (exp(−D[i][pos]/τ) + Σ_{k ∉ {i, pos}} exp(−D[i][k]/τ)) )
//! ```
//!
//! summed over all `K = 2N` anchors. Every softmax here is evaluated in the
//! max-shifted log-sum-exp form.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BallConfig};

/// Labels and the anchor → positive involution of a `K = 2N` batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    labels: Vec<u32>,
    pos: Vec<usize>,
}

impl Pairing {
    pub fn new(labels: Vec<u32>, pos: Vec<usize>) -> Result<Self> {
        let k = labels.len();
        if pos.len() != k {
            return Err(Error::Batch(format!("{k} labels but {} pairing entries", pos.len())));
        }
        if !k.is_multiple_of(2) || k < 4 {
            return Err(Error::Batch(format!("K = {k}; need K = 2N with N >= 2")));
        }
        for (i, &p) in pos.iter().enumerate() {
            if p >= k {
                return Err(Error::Batch(format!("pos({i}) = {p} is out of range")));
            }
            if p == i {
                return Err(Error::Batch(format!("row {i} is paired with itself")));
            }
            if pos[p] != i {
                return Err(Error::Batch(format!("pairing is not an involution at row {i}")));
            }
            if labels[i] != labels[p] {
                return Err(Error::Batch(format!(
                    "rows {i} and {p} are paired but carry labels {} and {}",
                    labels[i], labels[p]
                )));
            }
        }
        let mut pair_labels: Vec<u32> = (0..k).filter(|&i| i < pos[i]).map(|i| labels[i]).collect();
        pair_labels.sort_unstable();
        if pair_labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Batch("two pairs share a label".into()));
        }
        Ok(Self { labels, pos })
    }

    /// Rows `2j` and `2j + 1` form pair `j` with label `pair_labels[j]`.
    pub fn adjacent(pair_labels: &[u32]) -> Result<Self> {
        let labels = pair_labels.iter().flat_map(|&l| [l, l]).collect();
        let pos = (0..2 * pair_labels.len()).map(|i| i ^ 1).collect();
        Self::new(labels, pos)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_pairs(&self) -> usize {
        self.labels.len() / 2
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pos(&self, i: usize) -> usize {
        self.pos[i]
    }

    /// Indices `k ∉ {i, pos(i)}` in ascending order.
    pub fn negatives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let p = self.pos[i];
        (0..self.len()).filter(move |&k| k != i && k != p)
    }
}

/// Embedding rows together with their pairing.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub z: Array2<f64>,
    pub pairing: Pairing,
}

impl PairedBatch {
    pub fn new(z: Array2<f64>, pairing: Pairing) -> Result<Self> {
        if z.nrows() != pairing.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows for a pairing of {} rows",
                z.nrows(),
                pairing.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch embeddings".into()));
        }
        Ok(Self { z, pairing })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Cosine,
    Hyperbolic,
    /// `D_cos + λ·D_hyp`.
    Mixed,
}

/// Symmetric, zero-diagonal pairwise distances.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub d: Array2<f64>,
    pub kind: DistanceKind,
    /// Curvature used for the hyperbolic part, if any.
    pub curvature: Option<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.d.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.d.nrows() == 0
    }

    /// Wraps a user-supplied matrix after checking shape, symmetry and diagonal.
    pub fn from_array(d: Array2<f64>, kind: DistanceKind, curvature: Option<f64>) -> Result<Self> {
        let k = d.nrows();
        if d.ncols() != k {
            return Err(Error::Shape(format!("distance matrix is {}x{}", k, d.ncols())));
        }
        for i in 0..k {
            if d[[i, i]] != 0.0 {
                return Err(Error::Shape(format!("D[{i}][{i}] = {} is not zero", d[[i, i]])));
            }
            for j in 0..i {
                let (a, b) = (d[[i, j]], d[[j, i]]);
                if !(a.is_finite() && a >= 0.0) {
                    return Err(Error::Shape(format!("D[{i}][{j}] = {a} is not a finite distance")));
                }
                if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                    return Err(Error::Shape(format!("D is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { d, kind, curvature })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Euclidean,
    Hyperbolic,
    Mixed,
    ConvexCombo,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Euclidean => "euclidean",
            LossMode::Hyperbolic => "hyperbolic",
            LossMode::Mixed => "mixed",
            LossMode::ConvexCombo => "convex_combo",
        }
    }

    pub fn uses_euclid(self) -> bool {
        !matches!(self, LossMode::Hyperbolic)
    }

    pub fn uses_hyper(self) -> bool {
        !matches!(self, LossMode::Euclidean)
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" | "cos" => Ok(LossMode::Euclidean),
            "hyperbolic" | "hyp" => Ok(LossMode::Hyperbolic),
            "mixed" | "mix" => Ok(LossMode::Mixed),
            "convex_combo" => Ok(LossMode::ConvexCombo),
            other => Err(Error::config("loss.mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub tau: f64,
    pub lambda: f64,
    /// Weight on the hyperbolic loss in `convex_combo` mode.
    pub combo_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Euclidean,
            tau: 0.05,
            lambda: 3.0,
            combo_weight: 0.5,
        }
    }
}

impl LossConfig {
    pub fn new(mode: LossMode, tau: f64) -> Self {
        Self {
            mode,
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("loss.lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.combo_weight) {
            return Err(Error::config(
                "loss.combo_weight",
                format!("must lie in [0, 1], got {}", self.combo_weight),
            ));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::config("loss.tau", format!("must be > 0, got {tau}")))
    }
}

/// Softmax weights of each anchor over its positive and negatives.
#[derive(Debug, Clone)]
pub struct TripletWeightMatrix {
    /// `p_neg[[i, k]]`, zero for `k ∈ {i, pos(i)}`.
    pub p_neg: Array2<f64>,
    pub p_pos: Vec<f64>,
}

/// Per-anchor result of the stabilized softmax: loss term and weights.
pub(crate) struct AnchorSoftmax {
    pub loss: f64,
    /// Weight per column; zero at the anchor itself.
    pub weights: Vec<f64>,
}

/// Softmax over logits `−row[k]/τ`, `k ≠ i`, with the positive at `pos`.
///
/// Logits are taken relative to the positive's, `(row[pos] − row[k])/τ`,
/// then max-shifted. The loss `−log p_pos` is then `m + log Σ`, and when
/// the positive is the largest logit it is `log1p` of the negatives' mass,
/// which keeps full relative precision for near-zero losses.
pub(crate) fn anchor_softmax(row: &[f64], i: usize, pos: usize, tau: f64) -> AnchorSoftmax {
    let dp = row[pos];
    let rel = |k: usize| if k == pos { 0.0 } else { (dp - row[k]) / tau };
    let m = (0..row.len()).filter(|&k| k != i).map(rel).fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = (0..row.len())
        .map(|k| if k == i { 0.0 } else { (rel(k) - m).exp() })
        .collect();
    let rest: f64 = weights.iter().enumerate().filter(|&(k, _)| k != pos).map(|(_, w)| w).sum();
    let sum = weights[pos] + rest;
    let loss = if m == 0.0 { rest.ln_1p() } else { m + sum.ln() };
    weights.iter_mut().for_each(|w| *w /= sum);
    AnchorSoftmax { loss, weights }
}

fn check_consistent(d: &DistanceMatrix, pairing: &Pairing) -> Result<()> {
    if d.len() != pairing.len() || d.d.ncols() != pairing.len() {
        return Err(Error::Shape(format!(
            "distance matrix is {}x{} but the batch has {} rows",
            d.d.nrows(),
            d.d.ncols(),
            pairing.len()
        )));
    }
    Ok(())
}

/// Distances between all rows of `batch.z`.
///
/// For [`DistanceKind::Hyperbolic`] the rows must already be ball points.
pub fn distance_matrix(batch: &PairedBatch, kind: DistanceKind, cfg: &BallConfig) -> Result<DistanceMatrix> {
    match kind {
        DistanceKind::Cosine => cosine_matrix(batch.z.view()),
        DistanceKind::Hyperbolic => hyperbolic_matrix(batch.z.view(), cfg),
        DistanceKind::Mixed => Err(Error::Shape(
            "a mixed distance needs two branches; use mixed_distance_matrix".into(),
        )),
    }
}

pub fn cosine_matrix(z: ArrayView2<'_, f64>) -> Result<DistanceMatrix> {
    let k = z.nrows();
    let rows: Vec<Vec<f64>> = z.rows().into_iter().map(|r| r.to_vec()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| geometry::norm(r)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::domain("distance_matrix", format!("row {i} has zero norm")));
    }
    let mut d = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..i {
            let v = geometry::cos_dist_raw(&rows[i], &rows[j], norms[i], norms[j]);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(DistanceMatrix {
        d,
        kind: DistanceKind::Cosine,
        curvature: None,
    })
}

pub fn hyperbolic_matrix(z: ArrayView2<'_, f64>, cfg: &BallConfig) -> Result<DistanceMatrix> {
    let k = z.nrows();
    let rows: Vec<Vec<f64>> = z.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut d = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..i {
            let v = geometry::hyp_dist(&rows[i], &rows[j], cfg).map_err(|e| match e {
                Error::Domain { op, msg } => Error::Domain {
                    op,
                    msg: format!("rows ({i}, {j}): {msg}"),
                },
                other => other,
            })?;
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(DistanceMatrix {
        d,
        kind: DistanceKind::Hyperbolic,
        curvature: Some(cfg.c),
    })
}

/// `D_cos(zcos) + λ·D_hyp(zhyp)`, with `zhyp` already in the ball.
pub fn mixed_distance_matrix(
    zcos: ArrayView2<'_, f64>,
    zhyp: ArrayView2<'_, f64>,
    lambda: f64,
    cfg: &BallConfig,
) -> Result<DistanceMatrix> {
    if zcos.nrows() != zhyp.nrows() {
        return Err(Error::Shape(format!(
            "euclidean branch has {} rows, hyperbolic branch has {}",
            zcos.nrows(),
            zhyp.nrows()
        )));
    }
    let dc = cosine_matrix(zcos)?;
    let dh = hyperbolic_matrix(zhyp, cfg)?;
    Ok(DistanceMatrix {
        d: dc.d + dh.d * lambda,
        kind: DistanceKind::Mixed,
        curvature: Some(cfg.c),
    })
}

/// Summed pairwise cross-entropy over all anchors.
pub fn pairwise_ce_loss(d: &DistanceMatrix, pairing: &Pairing, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_consistent(d, pairing)?;
    let mut total = 0.0;
    for (i, row) in d.d.rows().into_iter().enumerate() {
        let row = row.to_vec();
        total += anchor_softmax(&row, i, pairing.pos(i), tau).loss;
    }
    Ok(total)
}

/// Similarity-form InfoNCE, `s_ij = ẑ_i·ẑ_j` on unit-normalized rows.
///
/// With `D_cos = 2 − 2s`, `pairwise_ce_loss(D_cos, τ)` equals this loss at
/// temperature `τ/2`.
pub fn infonce_loss(batch: &PairedBatch, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let s = similarity_matrix(batch.z.view())?;
    let k = s.nrows();
    let mut total = 0.0;
    for i in 0..k {
        // softmax over −(−s)/τ
        let neg: Vec<f64> = (0..k).map(|j| -s[[i, j]]).collect();
        total += anchor_softmax(&neg, i, batch.pairing.pos(i), tau).loss;
    }
    Ok(total)
}

pub(crate) fn similarity_matrix(z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let k = z.nrows();
    let mut unit = z.to_owned();
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::domain("infonce_loss", format!("row {i} has zero norm")));
        }
        row /= n;
    }
    let mut s = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            s[[i, j]] = unit.row(i).dot(&unit.row(j));
        }
    }
    Ok(s)
}

pub fn triplet_weights(d: &DistanceMatrix, pairing: &Pairing, tau: f64) -> Result<TripletWeightMatrix> {
    check_tau(tau)?;
    check_consistent(d, pairing)?;
    let k = pairing.len();
    let mut p_neg = Array2::zeros((k, k));
    let mut p_pos = vec![0.0; k];
    for i in 0..k {
        let row = d.d.row(i).to_vec();
        let pos = pairing.pos(i);
        let sm = anchor_softmax(&row, i, pos, tau);
        for (j, w) in sm.weights.into_iter().enumerate() {
            if j == pos {
                p_pos[i] = w;
            } else if j != i {
                p_neg[[i, j]] = w;
            }
        }
    }
    Ok(TripletWeightMatrix { p_neg, p_pos })
}

/// Cross-entropy on the fused distance `D_cos + λ·D_hyp`.
///
/// `zhyp` rows must already be ball points.
pub fn mix_loss(
    zcos: ArrayView2<'_, f64>,
    zhyp: ArrayView2<'_, f64>,
    pairing: &Pairing,
    tau: f64,
    lambda: f64,
    cfg: &BallConfig,
) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::config("loss.lambda", format!("must be >= 0, got {lambda}")));
    }
    let d = mixed_distance_matrix(zcos, zhyp, lambda, cfg)?;
    pairwise_ce_loss(&d, pairing, tau)
}

/// `w·L_hyp + (1 − w)·L_nce`.
pub fn convex_combo_loss(l_hyp: f64, l_nce: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::config("loss.combo_weight", format!("must lie in [0, 1], got {w}")));
    }
    Ok(w * l_hyp + (1.0 - w) * l_nce)
}

/// Raw outputs of the two projection heads for one batch.
///
/// `hyper` holds pre-map rows; they are sent through clip and `exp_map_0`
/// before any hyperbolic distance is taken.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub euclid: Option<Array2<f64>>,
    pub hyper: Option<Array2<f64>>,
}

impl HeadOutputs {
    pub fn rows(&self) -> usize {
        self.euclid
            .as_ref()
            .or(self.hyper.as_ref())
            .map_or(0, |z| z.nrows())
    }

    pub(crate) fn require_euclid(&self) -> Result<&Array2<f64>> {
        self.euclid
            .as_ref()
            .ok_or_else(|| Error::Shape("loss mode needs the euclidean branch output".into()))
    }

    pub(crate) fn require_hyper(&self) -> Result<&Array2<f64>> {
        self.hyper
            .as_ref()
            .ok_or_else(|| Error::Shape("loss mode needs the hyperbolic branch output".into()))
    }

    /// Hyperbolic rows mapped into the ball.
    pub fn ball_points(&self, cfg: &BallConfig) -> Result<Array2<f64>> {
        let h = self.require_hyper()?;
        Ok(map_rows_to_ball(h.view(), cfg))
    }
}

pub fn map_rows_to_ball(z: ArrayView2<'_, f64>, cfg: &BallConfig) -> Array2<f64> {
    let mut out = Array2::zeros(z.raw_dim());
    for (src, mut dst) in z.rows().into_iter().zip(out.rows_mut()) {
        let mapped = geometry::to_ball(&src.to_vec(), cfg);
        dst.assign(&ndarray::ArrayView1::from(&mapped));
    }
    out
}

/// Distance matrices a loss mode is built from, before `τ` is applied.
pub(crate) struct ModeDistances {
    pub cos: Option<DistanceMatrix>,
    pub hyp: Option<DistanceMatrix>,
    pub ball: Option<Array2<f64>>,
}

pub(crate) fn mode_distances(out: &HeadOutputs, mode: LossMode, cfg: &BallConfig) -> Result<ModeDistances> {
    let cos = if mode.uses_euclid() {
        Some(cosine_matrix(out.require_euclid()?.view())?)
    } else {
        None
    };
    let (hyp, ball) = if mode.uses_hyper() {
        if cfg.c == 0.0 {
            return Err(Error::config("ball.c", "hyperbolic loss modes need c > 0"));
        }
        let ball = out.ball_points(cfg)?;
        (Some(hyperbolic_matrix(ball.view(), cfg)?), Some(ball))
    } else {
        (None, None)
    };
    if let (Some(c), Some(h)) = (&cos, &hyp) {
        if c.len() != h.len() {
            return Err(Error::Shape("branch outputs have different row counts".into()));
        }
    }
    Ok(ModeDistances { cos, hyp, ball })
}

/// The loss selected by `cfg.mode`, evaluated on raw head outputs.
pub fn objective(out: &HeadOutputs, pairing: &Pairing, cfg: &LossConfig, ball: &BallConfig) -> Result<f64> {
    cfg.validate()?;
    let md = mode_distances(out, cfg.mode, ball)?;
    match cfg.mode {
        LossMode::Euclidean => pairwise_ce_loss(md.cos.as_ref().unwrap(), pairing, cfg.tau),
        LossMode::Hyperbolic => pairwise_ce_loss(md.hyp.as_ref().unwrap(), pairing, cfg.tau),
        LossMode::Mixed => {
            let (c, h) = (md.cos.unwrap(), md.hyp.unwrap());
            let fused = DistanceMatrix {
                d: c.d + h.d * cfg.lambda,
                kind: DistanceKind::Mixed,
                curvature: Some(ball.c),
            };
            pairwise_ce_loss(&fused, pairing, cfg.tau)
        }
        LossMode::ConvexCombo => {
            let l_nce = pairwise_ce_loss(md.cos.as_ref().unwrap(), pairing, cfg.tau)?;
            let l_hyp = pairwise_ce_loss(md.hyp.as_ref().unwrap(), pairing, cfg.tau)?;
            convex_combo_loss(l_hyp, l_nce, cfg.combo_weight)
        }
    }
}

/// Distance matrix the mode's softmax runs over (`D_cos`, `D_hyp` or fused).
pub fn mode_distance_matrix(out: &HeadOutputs, cfg: &LossConfig, ball: &BallConfig) -> Result<DistanceMatrix> {
    let md = mode_distances(out, cfg.mode, ball)?;
    Ok(match cfg.mode {
        LossMode::Euclidean => md.cos.unwrap(),
        LossMode::Hyperbolic => md.hyp.unwrap(),
        LossMode::Mixed => DistanceMatrix {
            d: md.cos.unwrap().d + md.hyp.unwrap().d * cfg.lambda,
            kind: DistanceKind::Mixed,
            curvature: Some(ball.c),
        },
        LossMode::ConvexCombo => {
            return Err(Error::config(
                "loss.mode",
                "convex_combo has two softmaxes and no single distance matrix",
            ))
        }
    })
}

//! Python bindings for `gyromix`.
//!
//! Vectors are lists of floats and matrices are lists of rows; numpy
//! arrays convert with `.tolist()`. Batches use adjacent pairing (rows
//! `2j`, `2j+1` are positives) unless `pos` gives the partner of each row.

use gyromix::evaluation::{self, EmbeddingSpace, RetrievalMetric};
use gyromix::loss::{self as core_loss, DistanceMatrix};
use gyromix::snapshot::Snapshot;
use gyromix::training::{self, data::synth_seeded};
use gyromix::{geometry, grad, Dataset, EncoderParams, HeadOutputs, LossConfig, LossMode, Pairing, SynthSpec, TrainConfig};
use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Matrix = Vec<Vec<f64>>;

fn py_err(e: gyromix::Error) -> PyErr {
    match e {
        gyromix::Error::Divergence { .. } | gyromix::Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_array(rows: &Matrix) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("matrix rows have different lengths"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Matrix {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn pairing(k: usize, pos: Option<Vec<usize>>) -> PyResult<Pairing> {
    match pos {
        None => {
            if !k.is_multiple_of(2) {
                return Err(PyValueError::new_err(format!("{k} rows cannot be paired adjacently")));
            }
            Pairing::adjacent(&(0..(k / 2) as u32).collect::<Vec<_>>()).map_err(py_err)
        }
        Some(pos) => {
            // one distinct label per pair
            let labels = pos.iter().enumerate().map(|(i, &p)| i.min(p) as u32).collect();
            Pairing::new(labels, pos).map_err(py_err)
        }
    }
}

fn ball_or_default(ball: Option<&BallConfig>) -> geometry::BallConfig {
    ball.map_or_else(geometry::BallConfig::default, |b| b.inner)
}

/// Curvature `c`, pre-map clip radius `r` and boundary margin `eps_ball`.
#[pyclass(frozen, skip_from_py_object, module = "gyromix")]
#[derive(Clone)]
struct BallConfig {
    inner: geometry::BallConfig,
}

#[pymethods]
impl BallConfig {
    #[new]
    #[pyo3(signature = (c = 0.1, r = 2.3, eps_ball = 1e-5))]
    fn new(c: f64, r: f64, eps_ball: f64) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::BallConfig::new(c, r, eps_ball).map_err(py_err)?,
        })
    }

    #[getter]
    fn c(&self) -> f64 {
        self.inner.c
    }

    #[getter]
    fn r(&self) -> f64 {
        self.inner.r
    }

    #[getter]
    fn eps_ball(&self) -> f64 {
        self.inner.eps_ball
    }

    fn __repr__(&self) -> String {
        format!("BallConfig(c={:?}, r={:?}, eps_ball={:?})", self.inner.c, self.inner.r, self.inner.eps_ball)
    }
}

#[pyfunction]
#[pyo3(signature = (x, y, ball = None))]
fn mobius_add(x: Vec<f64>, y: Vec<f64>, ball: Option<&BallConfig>) -> PyResult<Vec<f64>> {
    let p = geometry::mobius_add(&x, &y, &ball_or_default(ball)).map_err(py_err)?;
    Ok(p.into_inner())
}

#[pyfunction]
#[pyo3(signature = (x, y, ball = None))]
fn hyp_dist(x: Vec<f64>, y: Vec<f64>, ball: Option<&BallConfig>) -> PyResult<f64> {
    geometry::hyp_dist(&x, &y, &ball_or_default(ball)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (v, ball = None))]
fn exp_map_0(v: Vec<f64>, ball: Option<&BallConfig>) -> PyResult<Vec<f64>> {
    let p = geometry::exp_map_0(&v, &ball_or_default(ball)).map_err(py_err)?;
    Ok(p.into_inner())
}

#[pyfunction]
#[pyo3(signature = (x, ball = None))]
fn project_to_ball(x: Vec<f64>, ball: Option<&BallConfig>) -> PyResult<Vec<f64>> {
    let p = geometry::project_to_ball(&x, &ball_or_default(ball)).map_err(py_err)?;
    Ok(p.into_inner())
}

#[pyfunction]
fn clip_norm(v: Vec<f64>, r: f64) -> Vec<f64> {
    geometry::clip_norm(&v, r)
}

/// Clip to `r`, then map into the ball: what the loss applies to hyperbolic-head rows.
#[pyfunction]
#[pyo3(signature = (v, ball = None))]
fn to_ball(v: Vec<f64>, ball: Option<&BallConfig>) -> Vec<f64> {
    geometry::to_ball(&v, &ball_or_default(ball))
}

#[pyfunction]
fn cos_dist(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    geometry::cos_dist(&a, &b).map_err(py_err)
}

/// Pairwise distances: `"cos"` on raw rows, `"hyp"` on ball points.
#[pyfunction]
#[pyo3(signature = (z, kind = "cos", ball = None))]
fn distance_matrix(z: Matrix, kind: &str, ball: Option<&BallConfig>) -> PyResult<Matrix> {
    let z = to_array(&z)?;
    let d = match kind {
        "cos" => core_loss::cosine_matrix(z.view()),
        "hyp" => core_loss::hyperbolic_matrix(z.view(), &ball_or_default(ball)),
        other => return Err(PyValueError::new_err(format!("unknown distance `{other}` (cos, hyp)"))),
    }
    .map_err(py_err)?;
    Ok(to_rows(&d.d))
}

fn checked_distances(d: &Matrix) -> PyResult<DistanceMatrix> {
    DistanceMatrix::from_array(to_array(d)?, core_loss::DistanceKind::Cosine, None).map_err(py_err)
}

/// Summed pairwise cross-entropy over a distance matrix.
#[pyfunction]
#[pyo3(signature = (d, tau, pos = None))]
fn pairwise_ce_loss(d: Matrix, tau: f64, pos: Option<Vec<usize>>) -> PyResult<f64> {
    let p = pairing(d.len(), pos)?;
    core_loss::pairwise_ce_loss(&checked_distances(&d)?, &p, tau).map_err(py_err)
}

/// `(p_pos, p_neg)`: per-anchor positive weight and the matrix of `p(x⁻)`.
#[pyfunction]
#[pyo3(signature = (d, tau, pos = None))]
fn triplet_weights(d: Matrix, tau: f64, pos: Option<Vec<usize>>) -> PyResult<(Vec<f64>, Matrix)> {
    let p = pairing(d.len(), pos)?;
    let w = core_loss::triplet_weights(&checked_distances(&d)?, &p, tau).map_err(py_err)?;
    Ok((w.p_pos, to_rows(&w.p_neg)))
}

fn heads(z_e: Option<Matrix>, z_h: Option<Matrix>) -> PyResult<(HeadOutputs, usize)> {
    let euclid = z_e.as_ref().map(to_array).transpose()?;
    let hyper = z_h.as_ref().map(to_array).transpose()?;
    let k = euclid.as_ref().or(hyper.as_ref()).map_or(0, |a| a.nrows());
    Ok((HeadOutputs { euclid, hyper }, k))
}

fn loss_config(mode: &str, tau: f64, lambda_: f64, combo_weight: f64) -> PyResult<LossConfig> {
    let cfg = LossConfig {
        mode: mode.parse::<LossMode>().map_err(py_err)?,
        tau,
        lambda: lambda_,
        combo_weight,
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Training objective on head outputs; `z_h` rows are pre-map (clipped and
/// mapped into the ball internally).
#[pyfunction]
#[pyo3(name = "loss", signature = (z_e = None, z_h = None, mode = "euclidean", tau = 0.05, lambda_ = 1.0, combo_weight = 0.5, ball = None, pos = None))]
#[allow(clippy::too_many_arguments)]
fn objective(
    z_e: Option<Matrix>,
    z_h: Option<Matrix>,
    mode: &str,
    tau: f64,
    lambda_: f64,
    combo_weight: f64,
    ball: Option<&BallConfig>,
    pos: Option<Vec<usize>>,
) -> PyResult<f64> {
    let (out, k) = heads(z_e, z_h)?;
    let cfg = loss_config(mode, tau, lambda_, combo_weight)?;
    core_loss::objective(&out, &pairing(k, pos)?, &cfg, &ball_or_default(ball)).map_err(py_err)
}

/// `(loss, grad_e, grad_h)`; a gradient is `None` for a branch the mode ignores.
#[pyfunction]
#[pyo3(signature = (z_e = None, z_h = None, mode = "euclidean", tau = 0.05, lambda_ = 1.0, combo_weight = 0.5, ball = None, pos = None))]
#[allow(clippy::too_many_arguments)]
fn loss_and_grad(
    z_e: Option<Matrix>,
    z_h: Option<Matrix>,
    mode: &str,
    tau: f64,
    lambda_: f64,
    combo_weight: f64,
    ball: Option<&BallConfig>,
    pos: Option<Vec<usize>>,
) -> PyResult<(f64, Option<Matrix>, Option<Matrix>)> {
    let (out, k) = heads(z_e, z_h)?;
    let cfg = loss_config(mode, tau, lambda_, combo_weight)?;
    let g = grad::loss_grad_embeddings(&out, &pairing(k, pos)?, &cfg, &ball_or_default(ball)).map_err(py_err)?;
    Ok((g.loss, g.euclid.as_ref().map(to_rows), g.hyper.as_ref().map(to_rows)))
}

/// Recall@K. `"cos"` uses `z`; `"hyp"` treats `z` as ball points; `"mix"`
/// uses `z` (Euclidean) plus ball points `z_h` weighted by `lambda_`.
#[pyfunction]
#[pyo3(signature = (z, labels, ks, metric = "cos", z_h = None, lambda_ = 1.0, ball = None))]
fn recall_at_k(
    z: Matrix,
    labels: Vec<u32>,
    ks: Vec<usize>,
    metric: &str,
    z_h: Option<Matrix>,
    lambda_: f64,
    ball: Option<&BallConfig>,
) -> PyResult<Vec<f64>> {
    let metric: RetrievalMetric = metric.parse().map_err(py_err)?;
    let cfg = ball_or_default(ball);
    let z = to_array(&z)?;
    let space = match metric {
        RetrievalMetric::Cos => EmbeddingSpace::cosine(z),
        RetrievalMetric::Hyp => EmbeddingSpace::hyperbolic(z, cfg),
        RetrievalMetric::Mix => {
            let zh = z_h.ok_or_else(|| PyValueError::new_err("metric `mix` needs z_h"))?;
            EmbeddingSpace::mixed(z, to_array(&zh)?, lambda_, cfg)
        }
    }
    .map_err(py_err)?;
    Ok(evaluation::recall_at_k(&space, metric, &labels, &ks).map_err(py_err)?.recall)
}

/// Synthetic class hierarchy as `(x, labels)`.
#[pyfunction]
#[pyo3(signature = (seed = 7, depth = 3, branching = 2, leaf_classes = 16, samples_per_class = 50, dim = 16, noise = 1.0, spread = 4.0, decay = 0.5))]
#[allow(clippy::too_many_arguments)]
fn synth(
    seed: u64,
    depth: usize,
    branching: usize,
    leaf_classes: usize,
    samples_per_class: usize,
    dim: usize,
    noise: f64,
    spread: f64,
    decay: f64,
) -> PyResult<(Matrix, Vec<u32>)> {
    let spec = SynthSpec {
        depth,
        branching,
        leaf_classes,
        samples_per_class,
        dim,
        noise,
        spread,
        decay,
    };
    let ds = synth_seeded(&spec, seed).map_err(py_err)?;
    Ok((to_rows(&ds.x), ds.y))
}

/// A trained encoder with the config it was trained with.
#[pyclass(module = "gyromix")]
struct Model {
    config: TrainConfig,
    params: EncoderParams,
    /// `(step, loss, grad_norm, clipped_norm)` per optimizer step.
    #[pyo3(get)]
    trace: Vec<(usize, f64, f64, f64)>,
}

#[pymethods]
impl Model {
    /// `(euclidean_head, hyperbolic_head)` rows for `x`; the hyperbolic rows are pre-map.
    fn encode(&self, x: Matrix) -> PyResult<(Matrix, Matrix)> {
        let out = self.params.encode(to_array(&x)?.view()).map_err(py_err)?;
        Ok((to_rows(out.euclid.as_ref().unwrap()), to_rows(out.hyper.as_ref().unwrap())))
    }

    /// Hyperbolic-head rows mapped into the ball.
    fn ball_points(&self, x: Matrix) -> PyResult<Matrix> {
        let out = self.params.encode(to_array(&x)?.view()).map_err(py_err)?;
        Ok(to_rows(&out.ball_points(&self.config.ball).map_err(py_err)?))
    }

    /// Recall@K on `(x, labels)`; the metric defaults to the one the mode trains.
    #[pyo3(signature = (x, labels, ks, metric = None))]
    fn evaluate(&self, x: Matrix, labels: Vec<u32>, ks: Vec<usize>, metric: Option<&str>) -> PyResult<Vec<f64>> {
        let metric = match metric {
            Some(m) => m.parse().map_err(py_err)?,
            None => RetrievalMetric::for_mode(self.config.loss.mode),
        };
        let ds = Dataset::new(to_array(&x)?, labels).map_err(py_err)?;
        let c = &self.config;
        let rep = evaluation::evaluate_model(&self.params, &ds, metric, c.loss.lambda, &c.ball, &ks).map_err(py_err)?;
        Ok(rep.recall)
    }

    /// The snapshot JSON the CLI reads and writes.
    fn to_json(&self) -> PyResult<String> {
        let snap = Snapshot::new(self.config.clone(), self.params.clone());
        serde_json::to_string(&snap).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let snap = Snapshot::from_json(text).map_err(py_err)?;
        Ok(Self {
            config: snap.config,
            params: snap.params,
            trace: Vec::new(),
        })
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Trains an encoder on `(x, labels)`. `config` is a TrainConfig JSON
/// object (as in a snapshot); keyword arguments override it.
#[pyfunction]
#[pyo3(signature = (x, labels, config = None, mode = None, tau = None, c = None, lambda_ = None, steps = None, classes_per_batch = None, seed = None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    x: Matrix,
    labels: Vec<u32>,
    config: Option<&str>,
    mode: Option<&str>,
    tau: Option<f64>,
    c: Option<f64>,
    lambda_: Option<f64>,
    steps: Option<usize>,
    classes_per_batch: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Model> {
    let mut cfg: TrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    if let Some(m) = mode {
        cfg.loss.mode = m.parse().map_err(py_err)?;
    }
    if let Some(v) = tau {
        cfg.loss.tau = v;
    }
    if let Some(v) = c {
        cfg.ball.c = v;
    }
    if let Some(v) = lambda_ {
        cfg.loss.lambda = v;
    }
    if let Some(v) = steps {
        cfg.steps = v;
    }
    if let Some(v) = classes_per_batch {
        cfg.classes_per_batch = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    let ds = Dataset::new(to_array(&x)?, labels).map_err(py_err)?;
    let outcome = py.detach(|| training::train(&ds, &cfg)).map_err(py_err)?;
    Ok(Model {
        trace: outcome
            .trace
            .iter()
            .map(|r| (r.step, r.loss, r.grad_norm, r.clipped_norm))
            .collect(),
        config: cfg,
        params: outcome.params,
    })
}

#[pymodule]
#[pyo3(name = "gyromix")]
fn gyromix_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<BallConfig>()?;
    m.add_class::<Model>()?;
    for f in [
        wrap_pyfunction!(mobius_add, m)?,
        wrap_pyfunction!(hyp_dist, m)?,
        wrap_pyfunction!(exp_map_0, m)?,
        wrap_pyfunction!(project_to_ball, m)?,
        wrap_pyfunction!(clip_norm, m)?,
        wrap_pyfunction!(to_ball, m)?,
        wrap_pyfunction!(cos_dist, m)?,
        wrap_pyfunction!(distance_matrix, m)?,
        wrap_pyfunction!(pairwise_ce_loss, m)?,
        wrap_pyfunction!(triplet_weights, m)?,
        wrap_pyfunction!(objective, m)?,
        wrap_pyfunction!(loss_and_grad, m)?,
        wrap_pyfunction!(recall_at_k, m)?,
        wrap_pyfunction!(synth, m)?,
        wrap_pyfunction!(train, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}

//! Feature datasets: synthetic hierarchies and file ingestion.
//!
//! Two on-disk formats are supported:
//!
//! - CSV: one sample per line, features then the integer label in the last
//!   column. A header line is optional and detected by a non-numeric label.
//! - GMF1: little-endian `b"GMF1"`, `u32 M`, `u32 d`, `M·d` `f32` features
//!   row-major, then `M` `u32` labels.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GMF1_MAGIC: &[u8; 4] = b"GMF1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<u32>,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Vec<u32>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} feature rows but {} labels", x.nrows(), y.len())));
        }
        if let Some((pos, _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature at row {}, column {}", pos.0, pos.1)));
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in y.iter().enumerate() {
            class_index.entry(l).or_default().push(i);
        }
        Ok(Self { x, y, class_index })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn class_index(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.class_index
    }

    /// Classes with at least two samples, in ascending label order.
    pub fn pairable_classes(&self) -> Vec<u32> {
        self.class_index
            .iter()
            .filter(|(_, rows)| rows.len() >= 2)
            .map(|(&l, _)| l)
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let x = self.x.select(ndarray::Axis(0), rows);
        let y = rows.iter().map(|&i| self.y[i]).collect();
        Self::new(x, y)
    }

    /// Disjoint class split: the first half of the labels (ascending) train,
    /// the rest evaluate.
    pub fn split_by_class(&self) -> Result<(Self, Self)> {
        let labels: Vec<u32> = self.class_index.keys().copied().collect();
        if labels.len() < 2 {
            return Err(Error::Sampling(format!("cannot split {} class(es)", labels.len())));
        }
        let cut = labels.len().div_ceil(2);
        let train_labels = &labels[..cut];
        let (mut tr, mut ev) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            if train_labels.binary_search(&self.y[i]).is_ok() {
                tr.push(i);
            } else {
                ev.push(i);
            }
        }
        Ok((self.subset(&tr)?, self.subset(&ev)?))
    }
}

/// Parameters of the synthetic class hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Levels below the root; leaves sit at this depth.
    pub depth: usize,
    /// Children per internal node above the leaf level.
    pub branching: usize,
    pub leaf_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Expected norm of the per-sample Gaussian noise.
    pub noise: f64,
    /// Expected norm of the first-level offsets.
    pub spread: f64,
    /// Offset norm ratio between consecutive levels.
    pub decay: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: 2,
            leaf_classes: 16,
            samples_per_class: 50,
            dim: 16,
            noise: 1.0,
            spread: 4.0,
            decay: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("depth", self.depth),
            ("branching", self.branching),
            ("leaf_classes", self.leaf_classes),
            ("samples_per_class", self.samples_per_class),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("data.synthetic.{name}"), "must be >= 1"));
            }
        }
        for (name, v) in [("noise", self.noise), ("spread", self.spread), ("decay", self.decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("data.synthetic.{name}"), format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, norm: f64) -> Vec<f64> {
    let s = norm / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * s
        })
        .collect()
}

/// [`synth_hierarchy`] driven by a ChaCha8 stream seeded with `seed`.
pub fn synth_seeded(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    synth_hierarchy(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Class centers from a random tree walk, then Gaussian samples per leaf.
///
/// Level `l` (1-based) offsets have expected norm `spread·decay^(l−1)`.
/// Internal levels branch `branching` ways; the `leaf_classes` leaves are
/// dealt round-robin to the nodes of level `depth − 1`. Labels are
/// `0..leaf_classes` in leaf order, rows grouped by class.
pub fn synth_hierarchy<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.dim;
    let mut level = vec![vec![0.0; d]];
    for l in 1..spec.depth {
        let scale = spec.spread * spec.decay.powi(l as i32 - 1);
        let mut next = Vec::with_capacity(level.len() * spec.branching);
        for parent in &level {
            for _ in 0..spec.branching {
                let off = gaussian_vec(rng, d, scale);
                next.push(parent.iter().zip(&off).map(|(a, b)| a + b).collect::<Vec<_>>());
            }
        }
        level = next;
    }
    let leaf_scale = spec.spread * spec.decay.powi(spec.depth as i32 - 1);
    let centers: Vec<Vec<f64>> = (0..spec.leaf_classes)
        .map(|j| {
            let parent = &level[j % level.len()];
            let off = gaussian_vec(rng, d, leaf_scale);
            parent.iter().zip(&off).map(|(a, b)| a + b).collect()
        })
        .collect();

    let m = spec.leaf_classes * spec.samples_per_class;
    let mut x = Array2::zeros((m, d));
    let mut y = Vec::with_capacity(m);
    for (class, center) in centers.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let row = class * spec.samples_per_class + s;
            let noise = gaussian_vec(rng, d, spec.noise);
            for j in 0..d {
                x[[row, j]] = center[j] + noise[j];
            }
            y.push(class as u32);
        }
    }
    Dataset::new(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Csv,
    Gmf1,
}

impl std::str::FromStr for FeatureFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(FeatureFormat::Csv),
            "gmf1" => Ok(FeatureFormat::Gmf1),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<Dataset> {
    match format {
        FeatureFormat::Csv => load_csv(path),
        FeatureFormat::Gmf1 => load_gmf1(path),
    }
}

pub fn save_features(ds: &Dataset, path: &Path, format: FeatureFormat) -> Result<()> {
    match format {
        FeatureFormat::Csv => save_csv(ds, path),
        FeatureFormat::Gmf1 => save_gmf1(ds, path),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut width: Option<usize> = None;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 1;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let label_field = rec.get(rec.len() - 1).unwrap_or("");
        if idx == 0 && label_field.parse::<u32>().is_err() {
            // header
            width = Some(rec.len());
            continue;
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(parse_err(path, line, format!("expected {w} columns, found {}", rec.len())));
            }
            None => width = Some(rec.len()),
            _ => {}
        }
        if rec.len() < 2 {
            return Err(parse_err(path, line, "need at least one feature and a label"));
        }
        for (col, f) in rec.iter().take(rec.len() - 1).enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, line, format!("column {}: `{f}` is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column {}: non-finite value", col + 1)));
            }
            feats.push(v);
        }
        let label: u32 = label_field
            .parse()
            .map_err(|_| parse_err(path, line, format!("label `{label_field}` is not a non-negative integer")))?;
        labels.push(label);
    }
    let d = width.map_or(0, |w| w - 1);
    if labels.is_empty() {
        return Err(parse_err(path, 1, "no records"));
    }
    let x = Array2::from_shape_vec((labels.len(), d), feats).map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(x, labels)
}

fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<String> = (1..=ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, label) in ds.x.rows().into_iter().zip(&ds.y) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_gmf1(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    // "line" is the record number for binary input: 0 = header
    let trunc = |rec: usize| move |e: std::io::Error| parse_err(path, rec, format!("truncated file: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc(0))?;
    if &magic != GMF1_MAGIC {
        return Err(parse_err(path, 0, format!("bad magic {magic:?}, expected \"GMF1\"")));
    }
    let m = r.read_u32::<LittleEndian>().map_err(trunc(0))? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(trunc(0))? as usize;
    let mut x = Array2::zeros((m, d));
    for i in 0..m {
        for j in 0..d {
            let v = r.read_f32::<LittleEndian>().map_err(trunc(i + 1))?;
            if !v.is_finite() {
                return Err(parse_err(path, i + 1, format!("column {}: non-finite value", j + 1)));
            }
            x[[i, j]] = v as f64;
        }
    }
    let mut y = Vec::with_capacity(m);
    for i in 0..m {
        y.push(r.read_u32::<LittleEndian>().map_err(trunc(i + 1))?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(parse_err(path, m, format!("{} trailing bytes after labels", rest.len())));
    }
    Dataset::new(x, y)
}

fn save_gmf1(ds: &Dataset, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(GMF1_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(ds.len() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(ds.dim() as u32).map_err(io)?;
    for v in ds.x.iter() {
        w.write_f32::<LittleEndian>(*v as f32).map_err(io)?;
    }
    for &l in &ds.y {
        w.write_u32::<LittleEndian>(l).map_err(io)?;
    }
    w.flush().map_err(io)
}

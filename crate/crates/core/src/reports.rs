//! CSV report writers and the JSON metadata sidecar.
//!
//! Column order is fixed. Floats are written in Rust's shortest
//! round-trip form, so identical values always produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{OverlapReport, PProfile, RetrievalReport, SweepReport};
use crate::training::StepRecord;

pub const RECALL_HEADER: [&str; 3] = ["metric", "k", "recall"];
pub const P_PROFILE_HEADER: [&str; 4] = ["anchor", "rank", "distance", "p"];
pub const OVERLAP_HEADER: [&str; 4] = ["anchor", "jaccard", "only_e", "only_h"];
pub const SWEEP_HEADER: [&str; 7] = ["mode", "tau", "c", "lambda", "recall1", "loss", "status"];
pub const TRACE_HEADER: [&str; 4] = ["step", "loss", "grad_norm", "clipped_norm"];

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn join(ix: &[usize]) -> String {
    ix.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_recall(path: &Path, rep: &RetrievalReport) -> Result<()> {
    write_csv(
        path,
        RECALL_HEADER,
        rep.ks
            .iter()
            .zip(&rep.recall)
            .map(|(k, r)| [rep.metric.as_str().to_string(), k.to_string(), num(*r)]),
    )
}

pub fn write_p_profile(path: &Path, prof: &PProfile) -> Result<()> {
    write_csv(
        path,
        P_PROFILE_HEADER,
        prof.rows
            .iter()
            .map(|r| [r.anchor.to_string(), r.rank.to_string(), num(r.distance), num(r.p)]),
    )
}

pub fn write_overlap(path: &Path, rep: &OverlapReport) -> Result<()> {
    write_csv(
        path,
        OVERLAP_HEADER,
        rep.anchors
            .iter()
            .map(|a| [a.anchor.to_string(), num(a.jaccard), join(&a.only_e), join(&a.only_h)]),
    )
}

pub fn write_sweep(path: &Path, rep: &SweepReport) -> Result<()> {
    write_csv(
        path,
        SWEEP_HEADER,
        rep.cells.iter().map(|c| {
            [
                c.mode.as_str().to_string(),
                num(c.tau),
                num(c.c),
                num(c.lambda),
                num(c.recall1),
                num(c.loss),
                c.status.clone(),
            ]
        }),
    )
}

pub fn write_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    write_csv(
        path,
        TRACE_HEADER,
        trace
            .iter()
            .map(|r| [r.step.to_string(), num(r.loss), num(r.grad_norm), num(r.clipped_norm)]),
    )
}

/// Sidecar written next to every report. Timestamps live only here.
#[derive(Debug, Serialize)]
pub struct Metadata<'a, C: Serialize> {
    pub command: &'a str,
    pub seed: u64,
    pub version: &'a str,
    pub created_unix_secs: u64,
    pub config: &'a C,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

pub fn write_metadata<C: Serialize>(
    path: &Path,
    command: &str,
    seed: u64,
    config: &C,
    extra: Option<serde_json::Value>,
) -> Result<()> {
    let meta = Metadata {
        command,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        created_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        config,
        extra,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

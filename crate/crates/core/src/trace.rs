//! Per-iteration run records and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How the iterate of a record was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepType {
    Init,
    Newton,
    Fallback,
    /// A first-order method's own update.
    Prox,
}

/// One row of a trace: the state at the start of iteration `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub step_type: StepType,
    pub psi: f64,
    /// `||F^I(x)||` with the exact gradient, when evaluated.
    pub full_res: Option<f64>,
    pub stoch_res: f64,
    pub theta: Option<f64>,
    pub lambda: f64,
    pub grad_size: usize,
    pub hess_size: usize,
    pub epochs: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIters,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub method: String,
    pub status: RunStatus,
    pub iterations: usize,
    pub newton_accepted: usize,
    pub fallbacks: usize,
    /// Failed bookkeeping checks (theta and iterate recursion).
    pub invariant_violations: usize,
    pub final_psi: f64,
    pub final_full_res: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub summary: TraceSummary,
    /// Last iterate.
    pub x: Vec<f64>,
}

impl Trace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_records(&self.records, w)
    }

    /// Step types of the last `n` iterations (the initial record excluded).
    pub fn tail_steps(&self, n: usize) -> Vec<StepType> {
        let steps: Vec<StepType> = self
            .records
            .iter()
            .filter(|r| r.step_type != StepType::Init)
            .map(|r| r.step_type)
            .collect();
        steps[steps.len().saturating_sub(n)..].to_vec()
    }
}

pub fn write_records<W: Write>(records: &[TraceRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

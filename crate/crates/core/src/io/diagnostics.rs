//! Per-iteration diagnostics as CSV.

use std::path::Path;

use serde::Serialize;

use crate::autocontext::IterationDiagnostics;
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 8] = ["iteration", "dsc_gm", "dsc_wm", "rfp_percent", "sim", "reg_v", "reg_j", "total"];

#[derive(Serialize)]
struct Row {
    iteration: usize,
    dsc_gm: f64,
    dsc_wm: f64,
    rfp_percent: f64,
    sim: f64,
    reg_v: f64,
    reg_j: f64,
    total: f64,
}

impl From<&IterationDiagnostics> for Row {
    fn from(d: &IterationDiagnostics) -> Self {
        Self {
            iteration: d.iteration,
            dsc_gm: d.dsc_gm,
            dsc_wm: d.dsc_wm,
            rfp_percent: d.rfp_percent,
            sim: d.loss.sim,
            reg_v: d.loss.velocity_reg,
            reg_j: d.loss.jacobian_reg,
            total: d.loss.total,
        }
    }
}

/// Render diagnostics as CSV text with a header row. Floats are written in
/// shortest round-trip form, so identical runs give identical bytes.
pub fn diagnostics_csv(diagnostics: &[IterationDiagnostics]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if diagnostics.is_empty() {
        w.write_record(CSV_COLUMNS).expect("writing to memory");
    }
    for d in diagnostics {
        w.serialize(Row::from(d)).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is utf-8")
}

pub fn write_diagnostics(path: impl AsRef<Path>, diagnostics: &[IterationDiagnostics]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, diagnostics_csv(diagnostics)).map_err(|e| Error::io(path, e))
}

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// One training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: usize,
    /// Average vision-token budget of the active schedule.
    pub budget: f64,
    pub loss: f64,
    pub eval_acc: Option<f64>,
    /// Only filled when wall-clock recording is on, which makes the log non-reproducible.
    pub wall_ms: Option<u64>,
}

/// Writes rows as CSV with header `step,phase,budget,loss,eval_acc,wall_ms`.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["step", "phase", "budget", "loss", "eval_acc", "wall_ms"]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

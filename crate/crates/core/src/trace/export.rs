use std::path::Path;

use super::{io_err, write_atomic, ParetoPoint, TraceError};
use crate::ledger::LedgerSummary;

pub const PARETO_COLUMNS: [&str; 5] = ["threshold", "escalation_rate", "accuracy", "relative_cost", "mean_latency"];

fn pareto_csv_bytes(points: &[ParetoPoint]) -> Result<Vec<u8>, TraceError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    // explicit header so an empty list still yields one line
    w.write_record(PARETO_COLUMNS)?;
    for p in points {
        w.serialize(p)?;
    }
    w.into_inner().map_err(|e| TraceError::Csv(e.into_error().into()))
}

/// Writes points with a fixed column order; floats use the shortest
/// representation that parses back to the same value.
pub fn write_pareto_csv(points: &[ParetoPoint], path: &Path) -> Result<(), TraceError> {
    let bytes = pareto_csv_bytes(points)?;
    write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn read_pareto_csv(path: &Path) -> Result<Vec<ParetoPoint>, TraceError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != PARETO_COLUMNS {
        return Err(TraceError::SchemaMismatch(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(TraceError::from)).collect()
}

/// One flat row per summary, columns named after the summary fields.
pub fn write_summaries_csv(summaries: &[LedgerSummary], path: &Path) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in summaries {
        w.serialize(s)?;
    }
    let bytes = w.into_inner().map_err(|e| TraceError::Csv(e.into_error().into()))?;
    write_atomic(path, &bytes).map_err(io_err(path))
}

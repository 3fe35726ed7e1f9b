//! Offline labeled traces: JSONL persistence, deterministic train/test
//! splitting, synthetic generation, replay and threshold sweeps.

mod export;
mod replay;
mod synth;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{DomainError, EnsembleResponse, ModelOutput, Query};
use crate::estimator::{EstimatorError, LabeledExample};
use crate::features::build_feature_vector;
use crate::ledger::LedgerError;

pub use export::{read_pareto_csv, write_pareto_csv, write_summaries_csv, PARETO_COLUMNS};
pub use replay::{
    baseline_confidence_cascade, pareto_frontier, replay, replay_with_scores, score_traces, sweep_confidence_cascade,
    sweep_thresholds,
    ParetoPoint, ReplayDecision, ReplayResult, SweepResult,
};
pub use synth::{
    generate_synthetic, SyntheticTraceParams, DEFAULT_FEATURE_SEPARATION, REFERENCE_L1_ACCURACY,
    REFERENCE_L2_ACCURACY,
};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Share of query ids (by hash) assigned to the training split.
pub const TRAIN_PERCENT: u64 = 80;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid synthetic trace parameters: {0}")]
    InvalidParams(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("threshold grid must be nonempty, sorted and within [0,1]")]
    InvalidGrid,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One labeled query with the Layer-1 outputs and the pre-computed Oracle
/// outcome, so replay never needs a live model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_version: u32,
    pub query: Query,
    pub l1_outputs: Vec<ModelOutput>,
    pub l1_aggregated_correct: bool,
    pub l2_correct: bool,
    pub l2_output_tokens: u64,
    pub l2_latency: f64,
    /// Raw population variance of Layer-1 output token counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_token_variance: Option<f64>,
}

impl TraceRecord {
    pub fn ensemble(&self) -> Result<EnsembleResponse, DomainError> {
        EnsembleResponse::new(self.query.id.clone(), self.l1_outputs.clone())
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.schema_version != TRACE_SCHEMA_VERSION {
            return Err(TraceError::SchemaMismatch(format!(
                "record {} has schema_version {} (expected {TRACE_SCHEMA_VERSION})",
                self.query.id, self.schema_version
            )));
        }
        self.query.validate()?;
        self.ensemble()?;
        if !(self.l2_latency >= 0.0 && self.l2_latency.is_finite()) {
            return Err(TraceError::SchemaMismatch(format!(
                "record {} has invalid l2_latency",
                self.query.id
            )));
        }
        Ok(())
    }

    /// Training example: the label is the recorded failure flag, never
    /// re-derived from text.
    pub fn labeled_example(&self) -> Result<LabeledExample, DomainError> {
        Ok(LabeledExample {
            features: build_feature_vector(&self.ensemble()?),
            label: !self.l1_aggregated_correct,
        })
    }

    pub fn in_training_split(&self) -> bool {
        in_training_split(&self.query.id)
    }
}

/// Deterministic 80/20 split keyed by a hash of the query id.
pub fn in_training_split(query_id: &str) -> bool {
    let digest = Sha256::digest(query_id.as_bytes());
    let bucket = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")) % 100;
    bucket < TRAIN_PERCENT
}

/// Splits traces into (train, test) by query-id hash, preserving order.
pub fn split_train_test(traces: &[TraceRecord]) -> (Vec<TraceRecord>, Vec<TraceRecord>) {
    traces.iter().cloned().partition(TraceRecord::in_training_split)
}

pub fn labeled_examples(traces: &[TraceRecord]) -> Result<Vec<LabeledExample>, DomainError> {
    traces.iter().map(TraceRecord::labeled_example).collect()
}

pub fn write_jsonl<W: Write>(traces: &[TraceRecord], mut w: W) -> std::io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|source| TraceError::Io {
            path: "<stream>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|source| TraceError::Json { line: i + 1, source })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_traces(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        TraceError::Io { source, .. } => TraceError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

/// Writes through a temporary file in the same directory, then renames, so
/// a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn save_traces(path: &Path, traces: &[TraceRecord]) -> Result<(), TraceError> {
    let mut buf = Vec::new();
    write_jsonl(traces, &mut buf).map_err(io_err(path))?;
    write_atomic(path, &buf).map_err(io_err(path))
}

/// Empirical Layer-1 and Layer-2 accuracies of a trace set.
pub fn empirical_accuracies(traces: &[TraceRecord]) -> (f64, f64) {
    let n = traces.len().max(1) as f64;
    let l1 = traces.iter().filter(|t| t.l1_aggregated_correct).count() as f64 / n;
    let l2 = traces.iter().filter(|t| t.l2_correct).count() as f64 / n;
    (l1, l2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Vec<TraceRecord> {
        generate_synthetic(&SyntheticTraceParams {
            n: 50,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn jsonl_round_trip() {
        let traces = tiny();
        let mut buf = Vec::new();
        write_jsonl(&traces, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 50);
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, traces);
    }

    #[test]
    fn rejects_other_schema_versions() {
        let mut traces = tiny();
        traces[3].schema_version = 2;
        let mut buf = Vec::new();
        write_jsonl(&traces, &mut buf).unwrap();
        assert!(matches!(read_jsonl(&buf[..]), Err(TraceError::SchemaMismatch(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = read_jsonl(&b"\n{not json}\n"[..]).unwrap_err();
        assert!(matches!(err, TraceError::Json { line: 2, .. }));
    }

    #[test]
    fn split_is_stable_and_roughly_eighty_percent() {
        let ids: Vec<String> = (0..5000).map(|i| format!("q-{i}")).collect();
        let train = ids.iter().filter(|id| in_training_split(id)).count();
        assert!((3850..=4150).contains(&train), "{train}");
        assert_eq!(in_training_split("q-17"), in_training_split("q-17"));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}

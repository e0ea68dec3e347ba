//! Desk-scale evaluation: pairwise preference rates, a greedy-argmax
//! hallucination rate, the precision/recall composite over externally
//! supplied hallucination and coverage percentages, and stage-by-stage
//! trajectory reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, PolicyTable, ResponseId};
use crate::objectives::PreferencePair;
use crate::trainer::{StageName, StageTrace};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty pair set")]
    Empty,
    #[error("{0}")]
    Domain(String),
    #[error("stage mismatch: {0}")]
    StageMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Fraction of pairs whose chosen response outranks the rejected one under
/// the chosen image. Exact ties count one half.
pub fn preference_accuracy(
    policy: &PolicyTable,
    pairs: &[PreferencePair],
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for pair in pairs {
        let context = pair.chosen_context();
        let lw = policy.log_prob(&context, pair.chosen_response)?;
        let ll = policy.log_prob(&context, pair.rejected_response)?;
        total += if lw > ll {
            1.0
        } else if lw == ll {
            0.5
        } else {
            0.0
        };
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of pairs whose chosen response is likelier under its own image
/// than under the rejected image. Exact ties count one half.
pub fn visual_grounding_accuracy(
    policy: &PolicyTable,
    pairs: &[PreferencePair],
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for pair in pairs {
        let own = policy.log_prob(&pair.chosen_context(), pair.chosen_response)?;
        let other = policy.log_prob(&pair.rejected_context(), pair.chosen_response)?;
        total += if own > other {
            1.0
        } else if own == other {
            0.5
        } else {
            0.0
        };
    }
    Ok(total / pairs.len() as f64)
}

/// Greedy argmax over a context row; ties break toward the lowest response id.
fn greedy_argmax(policy: &PolicyTable, ctx_idx: usize) -> ResponseId {
    let row = policy.row(ctx_idx);
    let vocab = policy.vocab();
    let mut best = 0usize;
    for k in 1..row.len() {
        if row[k] > row[best] || (row[k] == row[best] && vocab[k] < vocab[best]) {
            best = k;
        }
    }
    vocab[best]
}

/// Fraction of pairs whose greedy response under the chosen image is the
/// rejected (hallucinated) response.
pub fn halrate(policy: &PolicyTable, pairs: &[PreferencePair]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0usize;
    for pair in pairs {
        let ci = policy.context_index(&pair.chosen_context())?;
        if greedy_argmax(policy, ci) == pair.rejected_response {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Harmonic mean of precision (100 - chair)% and recall (cover)%, reported
/// in percent. Both inputs are percentages in [0, 100].
pub fn f1_gen(chair_pct: f64, cover_pct: f64) -> Result<f64, EvalError> {
    for (name, v) in [("chair", chair_pct), ("cover", cover_pct)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(EvalError::Domain(format!(
                "{name} must lie in [0, 100], got {v}"
            )));
        }
    }
    let precision = 1.0 - chair_pct / 100.0;
    let recall = cover_pct / 100.0;
    if precision + recall <= 0.0 {
        return Err(EvalError::Domain(
            "degenerate inputs: precision + recall is zero".into(),
        ));
    }
    Ok(200.0 * precision * recall / (precision + recall))
}

/// The three pairwise rates of one policy snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub preference_accuracy: f64,
    pub visual_grounding_accuracy: f64,
    pub halrate: f64,
}

pub fn evaluate(policy: &PolicyTable, pairs: &[PreferencePair]) -> Result<EvalSnapshot, EvalError> {
    Ok(EvalSnapshot {
        preference_accuracy: preference_accuracy(policy, pairs)?,
        visual_grounding_accuracy: visual_grounding_accuracy(policy, pairs)?,
        halrate: halrate(policy, pairs)?,
    })
}

/// Final metrics plus the stage-by-stage breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub preference_accuracy: f64,
    pub visual_grounding_accuracy: f64,
    pub halrate: f64,
    /// Present when hallucination/coverage percentages were supplied.
    pub f1_gen: Option<f64>,
    /// Metrics of the policy before any training, when evaluated.
    pub initial: Option<EvalSnapshot>,
    pub per_stage: Vec<(StageName, EvalSnapshot)>,
}

/// Align per-stage evaluations with the training traces and assemble the
/// report; the top-level metrics are the final stage's.
pub fn curriculum_report(
    traces: &[StageTrace],
    per_stage: &[(StageName, EvalSnapshot)],
    f1: Option<f64>,
) -> Result<EvalReport, EvalError> {
    if per_stage.is_empty() {
        return Err(EvalError::Empty);
    }
    if traces.len() != per_stage.len() {
        return Err(EvalError::StageMismatch(format!(
            "{} traces vs {} evaluation snapshots",
            traces.len(),
            per_stage.len()
        )));
    }
    for (trace, (stage, _)) in traces.iter().zip(per_stage) {
        if trace.stage_name != *stage {
            return Err(EvalError::StageMismatch(format!(
                "trace stage {} vs evaluation stage {stage}",
                trace.stage_name
            )));
        }
    }
    let last = per_stage.last().unwrap().1;
    Ok(EvalReport {
        preference_accuracy: last.preference_accuracy,
        visual_grounding_accuracy: last.visual_grounding_accuracy,
        halrate: last.halrate,
        f1_gen: f1,
        initial: None,
        per_stage: per_stage.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// CSV artifacts.
// ---------------------------------------------------------------------------

pub const EVAL_HEADER: &str = "stage,preference_accuracy,visual_grounding_accuracy,halrate,f1_gen";

/// An `initial` row when present, the per-stage rows in execution order, and
/// an `overall` row carrying the report-level metrics (and the composite
/// score when present).
pub fn render_eval_csv(report: &EvalReport) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    let mut row = |label: &str, snap: &EvalSnapshot| {
        let _ = writeln!(
            out,
            "{label},{},{},{},",
            snap.preference_accuracy, snap.visual_grounding_accuracy, snap.halrate
        );
    };
    if let Some(initial) = &report.initial {
        row("initial", initial);
    }
    for (stage, snap) in &report.per_stage {
        row(&stage.to_string(), snap);
    }
    let f1 = report.f1_gen.map(|v| v.to_string()).unwrap_or_default();
    let _ = writeln!(
        out,
        "overall,{},{},{},{f1}",
        report.preference_accuracy, report.visual_grounding_accuracy, report.halrate
    );
    out
}

pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, render_eval_csv(report))
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

/// Parse an evaluation CSV back into labelled snapshots (the `overall`
/// summary row is skipped); used when merging runs into a trajectory file.
pub fn read_eval_csv(path: &Path) -> Result<Vec<(String, EvalSnapshot)>, EvalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == EVAL_HEADER => {}
        Some((_, other)) => {
            return Err(EvalError::Parse { line: 1, message: format!("bad header {other:?}") })
        }
        None => return Err(EvalError::Parse { line: 1, message: "empty report".into() }),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(EvalError::Parse {
                line: line_no,
                message: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        if fields[0] == "overall" {
            continue;
        }
        let parse_f = |i: usize| -> Result<f64, EvalError> {
            fields[i].parse::<f64>().map_err(|_| EvalError::Parse {
                line: line_no,
                message: format!("bad float {:?}", fields[i]),
            })
        };
        out.push((
            fields[0].to_string(),
            EvalSnapshot {
                preference_accuracy: parse_f(1)?,
                visual_grounding_accuracy: parse_f(2)?,
                halrate: parse_f(3)?,
            },
        ));
    }
    Ok(out)
}

pub const TRAJECTORY_HEADER: &str =
    "order,stage_index,stage,preference_accuracy,visual_grounding_accuracy,halrate";

/// One labelled run for the trajectory file.
pub struct TrajectoryRun {
    pub order_label: String,
    pub stages: Vec<(String, EvalSnapshot)>,
}

/// Metric trajectories across stages for one or more runs, suitable for
/// external plotting.
pub fn render_trajectory_csv(runs: &[TrajectoryRun]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for run in runs {
        for (index, (stage, snap)) in run.stages.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                run.order_label,
                index,
                stage,
                snap.preference_accuracy,
                snap.visual_grounding_accuracy,
                snap.halrate
            );
        }
    }
    out
}

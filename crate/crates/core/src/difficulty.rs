//! Per-pair difficulty scoring and curriculum partitioning.
//!
//! Three raw ingredients per preference pair:
//! - forced-choice uncertainty: the policy's probabilities over exactly the
//!   chosen and rejected responses are renormalized to a binary distribution
//!   under each image, and the two binary entropies averaged,
//! - semantic proximity: cosine similarity of the two image embeddings,
//! - structural discrepancy: entropic optimal transport between the two
//!   patch sets under a joint feature-spatial cost.
//!
//! Each column is z-standardized over the whole dataset (population σ) and
//! the score is the weighted sum of the z-scores, defaults all one.

pub mod ot;

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

use crate::data::DatasetBundle;
use crate::model::{ImageId, ModelError, PairId, PolicyTable};
use crate::numeric::{sigmoid, Neumaier};
use crate::objectives::PreferencePair;
use crate::trainer::{CurriculumPlan, OrderMode, StageName, StageSpec};
use ot::{exact_uniform_plan, sinkhorn, CostMatrix, OtError};

#[derive(Debug, Error)]
pub enum DifficultyError {
    #[error("{0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("pair {pair} references unknown image id {image}")]
    UnknownImage { pair: PairId, image: ImageId },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One image patch: a feature vector plus a position in the unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub feature: Vec<f64>,
    pub position: [f64; 2],
}

/// Synthetic stand-in for an encoded image: a unit-norm semantic embedding
/// plus a positioned patch-feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub embedding: Vec<f64>,
    pub patches: Vec<Patch>,
}

/// Solver settings for the structural discrepancy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtParams {
    /// Weight of the squared position distance in the joint cost.
    pub gamma: f64,
    /// Entropic regularizer as a fraction of the mean cost; 0 selects the
    /// exact linear program.
    pub epsilon_scale: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for OtParams {
    fn default() -> Self {
        // The tolerance gates the pre-projection marginal residual; the
        // returned plan is projected onto the marginal polytope afterward,
        // so tightening it past the value's own accuracy needs only buys
        // iterations against the solver's harmonic tail.
        Self { gamma: 1.0, epsilon_scale: 1e-3, max_iterations: 500_000, tolerance: 1e-7 }
    }
}

/// Weights for the three standardized columns. All one by default, which
/// reduces the aggregate to the plain z-score sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyWeights {
    pub w_h: f64,
    pub w_d: f64,
    pub w_s: f64,
}

impl Default for DifficultyWeights {
    fn default() -> Self {
        Self { w_h: 1.0, w_d: 1.0, w_s: 1.0 }
    }
}

/// Raw and standardized metrics of one pair plus the composite score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub pair_id: PairId,
    pub h_bar: f64,
    pub s_clip: f64,
    pub d_ot: f64,
    pub z_h: f64,
    pub z_s: f64,
    pub z_d: f64,
    pub score: f64,
}

/// Binary entropy in nats, with 0·ln 0 ≡ 0.
pub fn binary_entropy(p: f64) -> Result<f64, DifficultyError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DifficultyError::Domain(format!(
            "binary entropy needs p in [0, 1], got {p}"
        )));
    }
    let term = |x: f64| if x == 0.0 { 0.0 } else { -x * x.ln() };
    Ok(term(p) + term(1.0 - p))
}

/// Mean forced-choice entropy over the two images: under each image the
/// policy's mass on the chosen and rejected responses is renormalized to a
/// binary distribution whose entropy measures the model's own confusion.
pub fn mllm_uncertainty(
    policy: &PolicyTable,
    pair: &PreferencePair,
) -> Result<f64, DifficultyError> {
    let mut total = 0.0;
    for context in [pair.chosen_context(), pair.rejected_context()] {
        let lw = policy.log_prob(&context, pair.chosen_response)?;
        let ll = policy.log_prob(&context, pair.rejected_response)?;
        // p = π(y_w) / (π(y_w) + π(y_l)) = σ(log π(y_w) - log π(y_l)).
        let p = sigmoid(lw - ll);
        total += binary_entropy(p)?;
    }
    Ok(0.5 * total)
}

/// Cosine similarity of two unit-norm embeddings, clamped to [-1, 1].
pub fn semantic_proximity(a: &ImageRecord, b: &ImageRecord) -> Result<f64, DifficultyError> {
    if a.embedding.len() != b.embedding.len() {
        return Err(DifficultyError::Shape(format!(
            "embedding dims {} vs {}",
            a.embedding.len(),
            b.embedding.len()
        )));
    }
    let dot: f64 = a.embedding.iter().zip(&b.embedding).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Joint feature-spatial cost: C_ij = ‖f_i - f_j‖² + γ‖pos_i - pos_j‖².
pub fn patch_cost_matrix(
    a: &ImageRecord,
    b: &ImageRecord,
    gamma: f64,
) -> Result<CostMatrix, DifficultyError> {
    if a.patches.is_empty() || b.patches.is_empty() {
        return Err(OtError::EmptyPatchSet.into());
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(DifficultyError::Domain(format!(
            "spatial weight gamma must be non-negative, got {gamma}"
        )));
    }
    let dim = a.patches[0].feature.len();
    for patch in a.patches.iter().chain(&b.patches) {
        if patch.feature.len() != dim {
            return Err(OtError::DimensionMismatch { left: dim, right: patch.feature.len() }.into());
        }
    }
    let (m, n) = (a.patches.len(), b.patches.len());
    let mut values = Vec::with_capacity(m * n);
    for pi in &a.patches {
        for pj in &b.patches {
            let feat: f64 = pi
                .feature
                .iter()
                .zip(&pj.feature)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let pos: f64 = pi
                .position
                .iter()
                .zip(&pj.position)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            values.push(feat + gamma * pos);
        }
    }
    Ok(CostMatrix::new(m, n, values)?)
}

/// Optimal-transport discrepancy between two patch sets under uniform
/// marginals. `epsilon_scale = 0` solves the exact linear program; otherwise
/// the entropic problem with ε = epsilon_scale · mean(C).
pub fn structural_discrepancy(
    a: &ImageRecord,
    b: &ImageRecord,
    params: &OtParams,
) -> Result<f64, DifficultyError> {
    let cost = patch_cost_matrix(a, b, params.gamma)?;
    let mean_cost = cost.mean();
    if params.epsilon_scale == 0.0 {
        let (_, value) = exact_uniform_plan(&cost)?;
        return Ok(value);
    }
    if !params.epsilon_scale.is_finite() || params.epsilon_scale < 0.0 {
        return Err(DifficultyError::Domain(format!(
            "epsilon_scale must be non-negative, got {}",
            params.epsilon_scale
        )));
    }
    if mean_cost == 0.0 {
        // All costs zero: every feasible plan is optimal and free.
        return Ok(0.0);
    }
    let (m, n) = (cost.rows, cost.cols);
    let a_marg = vec![1.0 / m as f64; m];
    let b_marg = vec![1.0 / n as f64; n];
    let outcome = sinkhorn(
        &cost,
        &a_marg,
        &b_marg,
        params.epsilon_scale * mean_cost,
        params.max_iterations,
        params.tolerance,
    )?;
    Ok(outcome.transport_cost)
}

/// (x - μ) / σ with population σ. A constant column maps to all zeros.
pub fn zscore_column(values: &[f64]) -> Result<Vec<f64>, DifficultyError> {
    if values.is_empty() {
        return Err(DifficultyError::Domain("z-score of an empty column".into()));
    }
    let n = values.len() as f64;
    let mut mean_acc = Neumaier::new();
    for &v in values {
        mean_acc.add(v);
    }
    let mean = mean_acc.total() / n;
    let mut var_acc = Neumaier::new();
    for &v in values {
        var_acc.add((v - mean) * (v - mean));
    }
    let sigma = (var_acc.total() / n).sqrt();
    if sigma < 1e-12 {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / sigma).collect())
}

/// Standardize the three raw columns and aggregate with the given weights,
/// in the fixed order w_h·z_h + w_d·z_d + w_s·z_s.
pub fn aggregate_scores(
    pair_ids: &[PairId],
    h_col: &[f64],
    s_col: &[f64],
    d_col: &[f64],
    weights: &DifficultyWeights,
) -> Result<Vec<DifficultyRecord>, DifficultyError> {
    let z_h = zscore_column(h_col)?;
    let z_s = zscore_column(s_col)?;
    let z_d = zscore_column(d_col)?;
    Ok((0..pair_ids.len())
        .map(|i| DifficultyRecord {
            pair_id: pair_ids[i],
            h_bar: h_col[i],
            s_clip: s_col[i],
            d_ot: d_col[i],
            z_h: z_h[i],
            z_s: z_s[i],
            z_d: z_d[i],
            score: weights.w_h * z_h[i] + weights.w_d * z_d[i] + weights.w_s * z_s[i],
        })
        .collect())
}

/// The full scoring pass: raw metrics per pair, dataset-wide standardization,
/// weighted aggregation. Records come back sorted by pair id.
pub fn difficulty_scores(
    policy: &PolicyTable,
    bundle: &DatasetBundle,
    weights: &DifficultyWeights,
    ot_params: &OtParams,
) -> Result<Vec<DifficultyRecord>, DifficultyError> {
    if bundle.pairs.is_empty() {
        return Err(DifficultyError::Domain("dataset has no pairs".into()));
    }
    let images: HashMap<ImageId, &ImageRecord> =
        bundle.images.iter().map(|img| (img.image_id, img)).collect();
    let mut pairs: Vec<&PreferencePair> = bundle.pairs.iter().collect();
    pairs.sort_by_key(|p| p.pair_id);

    let mut pair_ids = Vec::with_capacity(pairs.len());
    let mut h_col = Vec::with_capacity(pairs.len());
    let mut s_col = Vec::with_capacity(pairs.len());
    let mut d_col = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let img_w = images
            .get(&pair.chosen_image)
            .ok_or(DifficultyError::UnknownImage { pair: pair.pair_id, image: pair.chosen_image })?;
        let img_l = images
            .get(&pair.rejected_image)
            .ok_or(DifficultyError::UnknownImage { pair: pair.pair_id, image: pair.rejected_image })?;
        pair_ids.push(pair.pair_id);
        h_col.push(mllm_uncertainty(policy, pair)?);
        s_col.push(semantic_proximity(img_w, img_l)?);
        d_col.push(structural_discrepancy(img_w, img_l, ot_params)?);
    }
    aggregate_scores(&pair_ids, &h_col, &s_col, &d_col, weights)
}

/// Sort ascending by (score, pair id) and cut at the proportion boundaries.
/// Every easy score ≤ every medium score ≤ every hard score, and the three
/// stages cover the records exactly once.
pub fn partition(
    records: &[DifficultyRecord],
    proportions: (f64, f64, f64),
) -> Result<CurriculumPlan, DifficultyError> {
    let n = records.len();
    if n == 0 {
        return Err(DifficultyError::Domain("cannot partition an empty record set".into()));
    }
    let (p_e, p_m, p_h) = proportions;
    for (name, p) in [("easy", p_e), ("medium", p_m), ("hard", p_h)] {
        if !p.is_finite() || p <= 0.0 {
            return Err(DifficultyError::Domain(format!(
                "{name} proportion must be positive, got {p}"
            )));
        }
    }
    if ((p_e + p_m + p_h) - 1.0).abs() > 1e-9 {
        return Err(DifficultyError::Domain(format!(
            "proportions must sum to 1, got {}",
            p_e + p_m + p_h
        )));
    }
    let mut ordered: Vec<&DifficultyRecord> = records.iter().collect();
    ordered.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.pair_id.cmp(&b.pair_id))
    });
    // The tiny epsilon keeps real-valued cut points like 100 · 0.3 from
    // flooring one short under binary rounding.
    let cut = |p: f64| ((n as f64) * p + 1e-9).floor() as usize;
    let cut1 = cut(p_e);
    let cut2 = cut(p_e + p_m);
    if cut1 == 0 || cut2 <= cut1 || cut2 >= n {
        return Err(DifficultyError::Domain(format!(
            "proportions ({p_e}, {p_m}, {p_h}) produce an empty stage for n = {n}"
        )));
    }
    let ids = |slice: &[&DifficultyRecord]| slice.iter().map(|r| r.pair_id).collect::<Vec<_>>();
    Ok(CurriculumPlan {
        stages: vec![
            StageSpec { name: StageName::Easy, pair_ids: ids(&ordered[..cut1]), hyperparams: None },
            StageSpec {
                name: StageName::Medium,
                pair_ids: ids(&ordered[cut1..cut2]),
                hyperparams: None,
            },
            StageSpec { name: StageName::Hard, pair_ids: ids(&ordered[cut2..]), hyperparams: None },
        ],
        order_mode: OrderMode::Forward,
    })
}

// ---------------------------------------------------------------------------
// Difficulty report file: one CSV record per pair, fixed column order.
// ---------------------------------------------------------------------------

pub const REPORT_HEADER: &str = "pair_id,h_bar,s_clip,d_ot,z_h,z_s,z_d,score,stage";

/// Render the report: pair id, raw metrics, z-scores, composite score and
/// assigned stage, one line per pair in record order.
pub fn render_report(
    records: &[DifficultyRecord],
    plan: &CurriculumPlan,
) -> Result<String, DifficultyError> {
    let mut stage_of: HashMap<PairId, StageName> = HashMap::new();
    for stage in &plan.stages {
        for id in &stage.pair_ids {
            stage_of.insert(*id, stage.name);
        }
    }
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in records {
        let stage = stage_of.get(&r.pair_id).ok_or_else(|| {
            DifficultyError::Domain(format!("pair {} is missing from the plan", r.pair_id))
        })?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.pair_id, r.h_bar, r.s_clip, r.d_ot, r.z_h, r.z_s, r.z_d, r.score, stage
        ));
    }
    Ok(out)
}

pub fn write_report(
    records: &[DifficultyRecord],
    plan: &CurriculumPlan,
    path: &Path,
) -> Result<(), DifficultyError> {
    let text = render_report(records, plan)?;
    std::fs::write(path, text)
        .map_err(|source| DifficultyError::Io { path: path.display().to_string(), source })
}

pub fn read_report(path: &Path) -> Result<Vec<(DifficultyRecord, StageName)>, DifficultyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DifficultyError::Io { path: path.display().to_string(), source })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == REPORT_HEADER => {}
        Some((_, other)) => {
            return Err(DifficultyError::Parse {
                line: 1,
                message: format!("bad header {other:?}"),
            })
        }
        None => {
            return Err(DifficultyError::Parse { line: 1, message: "empty report".into() })
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(DifficultyError::Parse {
                line: line_no,
                message: format!("expected 9 fields, found {}", fields.len()),
            });
        }
        let parse_f = |i: usize| -> Result<f64, DifficultyError> {
            fields[i].parse::<f64>().map_err(|_| DifficultyError::Parse {
                line: line_no,
                message: format!("bad float {:?}", fields[i]),
            })
        };
        let pair_id = fields[0]
            .parse::<u32>()
            .map(PairId)
            .map_err(|_| DifficultyError::Parse {
                line: line_no,
                message: format!("bad pair id {:?}", fields[0]),
            })?;
        let stage = fields[8].parse::<StageName>().map_err(|_| DifficultyError::Parse {
            line: line_no,
            message: format!("bad stage {:?}", fields[8]),
        })?;
        records.push((
            DifficultyRecord {
                pair_id,
                h_bar: parse_f(1)?,
                s_clip: parse_f(2)?,
                d_ot: parse_f(3)?,
                z_h: parse_f(4)?,
                z_s: parse_f(5)?,
                z_d: parse_f(6)?,
                score: parse_f(7)?,
            },
            stage,
        ));
    }
    Ok(records)
}

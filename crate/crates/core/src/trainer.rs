//! The staged training loop with dynamic reference resets.
//!
//! A curriculum is an ordered list of stages, each a set of pair ids. Before
//! every stage the reference model is reset to a snapshot of the current
//! policy, which makes the policy-to-reference KL exactly zero at stage
//! start and lets stage rewards accumulate additively in logit space across
//! stages. Within a stage, plain gradient descent runs on the mean per-pair
//! objective: full batch when the batch size covers the stage, otherwise
//! seeded-shuffle mini-batches.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GradTable, ModelError, PairId, PolicyTable, RewardTable};
use crate::numeric::neg_log_sigmoid;
use crate::objectives::{
    bt_probability, margin, margin_grad_factor, mean_breakdown, scpo_grad, scpo_loss,
    GradAccumulator, Hyperparams, LossBreakdown, PreferencePair,
};
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Easy,
    Medium,
    Hard,
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageName::Easy => write!(f, "easy"),
            StageName::Medium => write!(f, "medium"),
            StageName::Hard => write!(f, "hard"),
        }
    }
}

impl FromStr for StageName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(StageName::Easy),
            "medium" => Ok(StageName::Medium),
            "hard" => Ok(StageName::Hard),
            other => Err(format!("unknown stage name {other:?}")),
        }
    }
}

/// Stage traversal order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderMode {
    Forward,
    Reversed,
    Shuffled { seed: u64 },
}

impl fmt::Display for OrderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderMode::Forward => write!(f, "forward"),
            OrderMode::Reversed => write!(f, "reversed"),
            OrderMode::Shuffled { seed } => write!(f, "shuffled({seed})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: StageName,
    pub pair_ids: Vec<PairId>,
    /// Optional per-stage override of the run-level hyperparameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<Hyperparams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub stages: Vec<StageSpec>,
    pub order_mode: OrderMode,
}

pub const PLAN_FORMAT: &str = "scpo-plan";
pub const PLAN_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PlanFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    plan: CurriculumPlan,
}

impl CurriculumPlan {
    /// Disjoint, non-empty stage membership.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::InvalidPlan("plan has no stages".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for stage in &self.stages {
            if stage.pair_ids.is_empty() {
                return Err(TrainError::InvalidPlan(format!("stage {} is empty", stage.name)));
            }
            for id in &stage.pair_ids {
                if !seen.insert(*id) {
                    return Err(TrainError::InvalidPlan(format!(
                        "pair {id} appears in more than one stage"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stage traversal order under the plan's order mode.
    pub fn ordered_stages(&self) -> Vec<&StageSpec> {
        let mut stages: Vec<&StageSpec> = self.stages.iter().collect();
        match self.order_mode {
            OrderMode::Forward => {}
            OrderMode::Reversed => stages.reverse(),
            OrderMode::Shuffled { seed } => {
                let mut rng = seeding::stream(seed, "plan/shuffle", 0);
                for k in (1..stages.len()).rev() {
                    stages.swap(k, rng.random_range(0..=k));
                }
            }
        }
        stages
    }

    pub fn to_json(&self) -> String {
        let file = PlanFile {
            format: PLAN_FORMAT.to_string(),
            version: PLAN_VERSION,
            plan: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("plan serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let file: PlanFile = serde_json::from_str(text)
            .map_err(|e| TrainError::InvalidPlan(format!("bad plan json: {e}")))?;
        if file.format != PLAN_FORMAT || file.version != PLAN_VERSION {
            return Err(TrainError::InvalidPlan(format!(
                "unsupported plan file {} v{}",
                file.format, file.version
            )));
        }
        Ok(file.plan)
    }

    pub fn write_to(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
    }

    pub fn read_from(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })?;
        Self::from_json(&text)
    }
}

/// Telemetry of one trained stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub stage_name: StageName,
    /// Mean loss breakdown per epoch, in epoch order.
    pub epoch_losses: Vec<LossBreakdown>,
    /// Mean batch gradient norm per epoch.
    pub epoch_grad_norms: Vec<f64>,
    /// Mean KL(policy ‖ reference) over all contexts at stage start. Exactly
    /// zero whenever the reference is a fresh snapshot of the policy.
    pub kl_to_ref_at_start: f64,
    pub kl_to_ref_at_end: f64,
    /// The policy as it stood at the end of the stage.
    pub end_policy: PolicyTable,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage has no pairs")]
    EmptyStage,
    #[error("unknown pair id {0} in curriculum plan")]
    UnknownPair(PairId),
    #[error("non-finite loss at epoch {epoch}: {value}")]
    NonFinite { epoch: usize, value: f64 },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How per-pair losses are formed during a stage.
#[derive(Clone, Copy)]
pub enum TrainMode<'a> {
    /// The full objective on the given pairs as observed preferences.
    Sampled,
    /// Expected pure ranking loss: each pair contributes both orientations,
    /// weighted by the logistic preference probability implied by the given
    /// ground-truth reward table. Exists to make reward-recovery checks
    /// noise-free; only the text-style margin is trained.
    Population { truth: &'a RewardTable },
}

/// Stage stopping rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopRule {
    /// Fixed epoch count from the hyperparameters.
    Epochs,
    /// Stop once the full-batch gradient norm falls below `tol`, with a hard
    /// epoch cap.
    GradNorm { tol: f64, max_epochs: usize },
}

pub struct StageOptions<'a> {
    pub stage: StageName,
    pub mode: TrainMode<'a>,
    pub stop: StopRule,
    /// Substream seed for mini-batch shuffling.
    pub seed: u64,
}

impl StageOptions<'_> {
    pub fn sampled(stage: StageName, seed: u64) -> Self {
        Self { stage, mode: TrainMode::Sampled, stop: StopRule::Epochs, seed }
    }
}

fn pair_loss_grad(
    policy: &PolicyTable,
    reference: &PolicyTable,
    pair: &PreferencePair,
    hp: &Hyperparams,
    mode: &TrainMode<'_>,
) -> Result<(LossBreakdown, GradTable), TrainError> {
    match mode {
        TrainMode::Sampled => Ok((
            scpo_loss(policy, reference, pair, hp)?,
            scpo_grad(policy, reference, pair, hp)?,
        )),
        TrainMode::Population { truth } => {
            let context = pair.chosen_context();
            let r_w = truth.value(&context, pair.chosen_response)?;
            let r_l = truth.value(&context, pair.rejected_response)?;
            let p = bt_probability(r_w, r_l);
            let m = margin(policy, reference, &context, pair.chosen_response, pair.rejected_response)?;
            let loss = p * neg_log_sigmoid(hp.beta * m) + (1.0 - p) * neg_log_sigmoid(-hp.beta * m);
            // d/dm of the two orientations; the margin derivative w.r.t. the
            // row is the bare indicator difference (softmax terms cancel).
            let factor =
                p * margin_grad_factor(m, hp.beta) - (1.0 - p) * margin_grad_factor(-m, hp.beta);
            let ci = policy.context_index(&context)?;
            let yw = policy.response_index(pair.chosen_response)?;
            let yl = policy.response_index(pair.rejected_response)?;
            let mut grad = GradTable::new(policy.vocab().len());
            grad.add_entry(ci, yw, factor);
            grad.add_entry(ci, yl, -factor);
            let mut breakdown = LossBreakdown::zeros();
            breakdown.l_text = loss;
            breakdown.l_cco = loss;
            breakdown.l_total = loss;
            Ok((breakdown, grad))
        }
    }
}

/// Mean loss and mean gradient over a pair set under the given mode.
pub fn batch_loss_grad(
    policy: &PolicyTable,
    reference: &PolicyTable,
    pairs: &[PreferencePair],
    hp: &Hyperparams,
    mode: &TrainMode<'_>,
) -> Result<(LossBreakdown, GradTable), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyStage);
    }
    let mut losses = Vec::with_capacity(pairs.len());
    let mut acc = GradAccumulator::new(policy.vocab().len());
    for pair in pairs {
        let (loss, grad) = pair_loss_grad(policy, reference, pair, hp, mode)?;
        losses.push(loss);
        acc.add(&grad);
    }
    let mean = mean_breakdown(losses.into_iter().map(Ok))?;
    Ok((mean, acc.mean()?))
}

/// Gradient descent on the mean per-pair objective against a frozen
/// reference. Returns the updated policy and the stage telemetry.
pub fn train_stage(
    policy: &PolicyTable,
    reference: &PolicyTable,
    pairs: &[PreferencePair],
    hp: &Hyperparams,
    options: &StageOptions<'_>,
) -> Result<(PolicyTable, StageTrace), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyStage);
    }
    hp.validate().map_err(TrainError::InvalidConfig)?;
    let mut current = policy.snapshot();
    let kl_to_ref_at_start = current.mean_kl(reference)?;
    let mut shuffle_rng = seeding::stream(options.seed, "train/shuffle", 0);

    let max_epochs = match options.stop {
        StopRule::Epochs => hp.epochs_per_stage,
        StopRule::GradNorm { max_epochs, .. } => max_epochs,
    };
    let n = pairs.len();
    let mut epoch_losses = Vec::new();
    let mut epoch_grad_norms = Vec::new();

    for epoch in 0..max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if hp.batch_size < n {
            for k in (1..n).rev() {
                order.swap(k, shuffle_rng.random_range(0..=k));
            }
        }
        let mut pair_losses: Vec<LossBreakdown> = Vec::with_capacity(n);
        let mut norm_acc = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let mut acc = GradAccumulator::new(current.vocab().len());
            for &idx in chunk {
                let (loss, grad) =
                    pair_loss_grad(&current, reference, &pairs[idx], hp, &options.mode)?;
                if !loss.l_total.is_finite() {
                    return Err(TrainError::NonFinite { epoch, value: loss.l_total });
                }
                pair_losses.push(loss);
                acc.add(&grad);
            }
            let mean_grad = acc.mean()?;
            norm_acc += (chunk.len() as f64 / n as f64) * mean_grad.l2_norm();
            current.gradient_step(&mean_grad, hp.learning_rate);
        }
        epoch_losses.push(mean_breakdown(pair_losses.into_iter().map(Ok))?);
        epoch_grad_norms.push(norm_acc);

        if let StopRule::GradNorm { tol, .. } = options.stop {
            let (_, full) = batch_loss_grad(&current, reference, pairs, hp, &options.mode)?;
            if full.l2_norm() <= tol {
                break;
            }
        }
    }

    let kl_to_ref_at_end = current.mean_kl(reference)?;
    let trace = StageTrace {
        stage_name: options.stage,
        epoch_losses,
        epoch_grad_norms,
        kl_to_ref_at_start,
        kl_to_ref_at_end,
        end_policy: current.snapshot(),
    };
    Ok((current, trace))
}

pub struct CurriculumOutcome {
    pub final_policy: PolicyTable,
    pub traces: Vec<StageTrace>,
}

/// Run the staged loop: before each stage the reference becomes a fresh
/// snapshot of the current policy, so the stage-start KL is exactly zero.
pub fn run_curriculum(
    policy0: &PolicyTable,
    plan: &CurriculumPlan,
    pairs: &[PreferencePair],
    hp: &Hyperparams,
    seed: u64,
) -> Result<CurriculumOutcome, TrainError> {
    plan.validate()?;
    hp.validate().map_err(TrainError::InvalidConfig)?;
    let mut by_id: HashMap<PairId, &PreferencePair> = HashMap::with_capacity(pairs.len());
    for pair in pairs {
        if by_id.insert(pair.pair_id, pair).is_some() {
            return Err(TrainError::Domain(format!("duplicate pair id {}", pair.pair_id)));
        }
    }

    let mut current = policy0.snapshot();
    let mut traces = Vec::with_capacity(plan.stages.len());
    for (ordinal, stage) in plan.ordered_stages().into_iter().enumerate() {
        let stage_pairs: Vec<PreferencePair> = stage
            .pair_ids
            .iter()
            .map(|id| by_id.get(id).copied().copied().ok_or(TrainError::UnknownPair(*id)))
            .collect::<Result<_, _>>()?;
        let stage_hp = stage.hyperparams.as_ref().unwrap_or(hp);
        let reference = current.snapshot();
        let options = StageOptions {
            stage: stage.name,
            mode: TrainMode::Sampled,
            stop: StopRule::Epochs,
            seed: seeding::derive_seed(seed, "train/stage", ordinal as u64),
        };
        let (next, trace) = train_stage(&current, &reference, &stage_pairs, stage_hp, &options)?;
        current = next;
        traces.push(trace);
    }
    Ok(CurriculumOutcome { final_policy: current, traces })
}

/// Two routes to the N-stage optimum: sequential stage-by-stage closed-form
/// updates versus a single update with the summed rewards. Returns the
/// maximum per-context total-variation distance between the two.
pub fn verify_cumulative_identity(
    policy0: &PolicyTable,
    rewards: &[RewardTable],
    beta: f64,
) -> Result<f64, TrainError> {
    if rewards.is_empty() {
        return Err(TrainError::Domain("need at least one reward table".into()));
    }
    let mut sequential = policy0.snapshot();
    for r in rewards {
        sequential = crate::model::closed_form_optimum(&sequential, r, beta)?;
    }
    let mut summed = rewards[0].clone();
    for r in &rewards[1..] {
        summed = summed.add(r)?;
    }
    let direct = crate::model::closed_form_optimum(policy0, &summed, beta)?;
    let mut worst: f64 = 0.0;
    for c in policy0.contexts() {
        worst = worst.max(sequential.tv_distance(&direct, c)?);
    }
    Ok(worst)
}

/// Gradient factor ∂ℓ/∂M across a margin grid: sign and limits per the
/// logistic saturation analysis.
pub fn saturation_probe(margins: &[f64], beta: f64) -> Vec<(f64, f64)> {
    margins.iter().map(|&m| (m, margin_grad_factor(m, beta))).collect()
}

// ---------------------------------------------------------------------------
// Trace file: one CSV line per (stage, epoch).
// ---------------------------------------------------------------------------

pub const TRACE_HEADER: &str = "stage,epoch,l_text,l_image,l_cco,l_match_w,l_contradict_l,l_match_l,l_contradict_w,l_cso,l_total,grad_norm,kl_start,kl_end";

pub fn render_trace_csv(traces: &[StageTrace]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for trace in traces {
        for (epoch, (loss, norm)) in
            trace.epoch_losses.iter().zip(&trace.epoch_grad_norms).enumerate()
        {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                trace.stage_name,
                epoch,
                loss.l_text,
                loss.l_image,
                loss.l_cco,
                loss.l_match_w,
                loss.l_contradict_l,
                loss.l_match_l,
                loss.l_contradict_w,
                loss.l_cso,
                loss.l_total,
                norm,
                trace.kl_to_ref_at_start,
                trace.kl_to_ref_at_end,
            ));
        }
    }
    out
}

pub fn write_trace_csv(traces: &[StageTrace], path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, render_trace_csv(traces))
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
}

//! A desk-scale laboratory for symmetric curriculum preference optimization
//! over tabular conditional policies.
//!
//! The pipeline: generate synthetic preference pairs with controllable
//! contrast strength ([`data`]), score their difficulty and cut an
//! easy/medium/hard curriculum ([`difficulty`]), train a tabular policy
//! stage by stage with a bidirectional preference objective and dynamic
//! reference resets ([`objectives`], [`trainer`]), and evaluate the
//! resulting snapshots ([`eval`]). Policies are exact tables ([`model`]),
//! so every claimed identity — loss decompositions, analytic gradients,
//! KL resets, closed-form stage optima and their additive composition —
//! is checkable to floating-point precision.

pub mod data;
pub mod difficulty;
pub mod eval;
pub mod floatfmt;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod seeding;
pub mod trainer;

pub use data::{generate, read_bundle, write_bundle, DataError, DatasetBundle, DeltaSpec, GenConfig};
pub use difficulty::{
    difficulty_scores, partition, DifficultyError, DifficultyRecord, DifficultyWeights,
    ImageRecord, OtParams, Patch,
};
pub use eval::{evaluate, f1_gen, EvalError, EvalReport, EvalSnapshot};
pub use floatfmt::FloatMode;
pub use model::{
    closed_form_optimum, policy_reward_gap, Context, GradTable, ImageId, ImageSlot, ModelError,
    PairId, PolicyTable, QueryId, ResponseId, RewardTable,
};
pub use objectives::{scpo_grad, scpo_loss, Hyperparams, LossBreakdown, PreferencePair};
pub use trainer::{
    run_curriculum, train_stage, CurriculumOutcome, CurriculumPlan, OrderMode, StageName,
    StageSpec, StageTrace, TrainError,
};

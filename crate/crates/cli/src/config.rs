//! Run configuration: a TOML file with optional sections, every knob
//! defaulting to the library conventions. Command-line flags override
//! individual fields after the file is loaded.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use scpo_core::data::{DeltaSpec, GenConfig};
use scpo_core::difficulty::{DifficultyWeights, OtParams};
use scpo_core::objectives::Hyperparams;
use scpo_core::trainer::OrderMode;

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub gen: GenSection,
    #[serde(default)]
    pub hyperparams: HyperparamsSection,
    #[serde(default)]
    pub difficulty: DifficultySection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            gen: GenSection::default(),
            hyperparams: HyperparamsSection::default(),
            difficulty: DifficultySection::default(),
            train: TrainSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config file {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("invalid config file {}", path.display()))
            }
        }
    }

    /// The generation config with the run seed folded in.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            n_pairs: self.gen.n_pairs,
            embedding_dim: self.gen.embedding_dim,
            patch_count: self.gen.patch_count,
            patch_dim: self.gen.patch_dim,
            delta: self.gen.delta,
            response_vocab_size: self.gen.response_vocab_size,
            seed: self.seed,
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            beta: self.hyperparams.beta,
            beta1: self.hyperparams.beta1,
            beta2: self.hyperparams.beta2,
            lambda: self.hyperparams.lambda,
            learning_rate: self.hyperparams.learning_rate,
            batch_size: self.hyperparams.batch_size,
            epochs_per_stage: self.hyperparams.epochs_per_stage,
        }
    }

    pub fn weights(&self) -> DifficultyWeights {
        DifficultyWeights {
            w_h: self.difficulty.w_h,
            w_d: self.difficulty.w_d,
            w_s: self.difficulty.w_s,
        }
    }

    pub fn ot_params(&self) -> OtParams {
        OtParams {
            gamma: self.difficulty.gamma,
            epsilon_scale: self.difficulty.epsilon_scale,
            max_iterations: self.difficulty.max_iterations,
            tolerance: self.difficulty.tolerance,
        }
    }

    pub fn proportions(&self) -> Result<(f64, f64, f64)> {
        match self.difficulty.proportions[..] {
            [e, m, h] => Ok((e, m, h)),
            _ => bail!(
                "difficulty.proportions must list exactly three values, got {}",
                self.difficulty.proportions.len()
            ),
        }
    }
}

mod defaults {
    use super::*;

    pub fn n_pairs() -> u32 {
        GenConfig::default().n_pairs
    }
    pub fn embedding_dim() -> usize {
        GenConfig::default().embedding_dim
    }
    pub fn patch_count() -> usize {
        GenConfig::default().patch_count
    }
    pub fn patch_dim() -> usize {
        GenConfig::default().patch_dim
    }
    pub fn delta() -> DeltaSpec {
        GenConfig::default().delta
    }
    pub fn response_vocab_size() -> u32 {
        GenConfig::default().response_vocab_size
    }
    pub fn beta() -> f64 {
        Hyperparams::default().beta
    }
    pub fn beta1() -> f64 {
        Hyperparams::default().beta1
    }
    pub fn beta2() -> f64 {
        Hyperparams::default().beta2
    }
    pub fn lambda() -> f64 {
        Hyperparams::default().lambda
    }
    pub fn learning_rate() -> f64 {
        Hyperparams::default().learning_rate
    }
    pub fn batch_size() -> usize {
        Hyperparams::default().batch_size
    }
    pub fn epochs_per_stage() -> usize {
        Hyperparams::default().epochs_per_stage
    }
    pub fn w_h() -> f64 {
        DifficultyWeights::default().w_h
    }
    pub fn w_d() -> f64 {
        DifficultyWeights::default().w_d
    }
    pub fn w_s() -> f64 {
        DifficultyWeights::default().w_s
    }
    pub fn gamma() -> f64 {
        OtParams::default().gamma
    }
    pub fn epsilon_scale() -> f64 {
        OtParams::default().epsilon_scale
    }
    pub fn max_iterations() -> usize {
        OtParams::default().max_iterations
    }
    pub fn tolerance() -> f64 {
        OtParams::default().tolerance
    }
    pub fn proportions() -> Vec<f64> {
        vec![0.25, 0.40, 0.35]
    }
    pub fn order() -> OrderMode {
        OrderMode::Forward
    }
    pub fn dataset() -> String {
        "dataset.jsonl".into()
    }
    pub fn difficulty_report() -> String {
        "difficulty.csv".into()
    }
    pub fn plan() -> String {
        "plan.json".into()
    }
    pub fn trace() -> String {
        "trace.csv".into()
    }
    pub fn eval_report() -> String {
        "eval.csv".into()
    }
    pub fn trajectory() -> String {
        "trajectory.csv".into()
    }
    pub fn policy_prefix() -> String {
        "policy".into()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    #[serde(default = "defaults::n_pairs")]
    pub n_pairs: u32,
    #[serde(default = "defaults::embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "defaults::patch_count")]
    pub patch_count: usize,
    #[serde(default = "defaults::patch_dim")]
    pub patch_dim: usize,
    #[serde(default = "defaults::delta")]
    pub delta: DeltaSpec,
    #[serde(default = "defaults::response_vocab_size")]
    pub response_vocab_size: u32,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            n_pairs: defaults::n_pairs(),
            embedding_dim: defaults::embedding_dim(),
            patch_count: defaults::patch_count(),
            patch_dim: defaults::patch_dim(),
            delta: defaults::delta(),
            response_vocab_size: defaults::response_vocab_size(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamsSection {
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs_per_stage")]
    pub epochs_per_stage: usize,
}

impl Default for HyperparamsSection {
    fn default() -> Self {
        Self {
            beta: defaults::beta(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            lambda: defaults::lambda(),
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            epochs_per_stage: defaults::epochs_per_stage(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultySection {
    #[serde(default = "defaults::w_h")]
    pub w_h: f64,
    #[serde(default = "defaults::w_d")]
    pub w_d: f64,
    #[serde(default = "defaults::w_s")]
    pub w_s: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::epsilon_scale")]
    pub epsilon_scale: f64,
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "defaults::tolerance")]
    pub tolerance: f64,
    #[serde(default = "defaults::proportions")]
    pub proportions: Vec<f64>,
}

impl Default for DifficultySection {
    fn default() -> Self {
        Self {
            w_h: defaults::w_h(),
            w_d: defaults::w_d(),
            w_s: defaults::w_s(),
            gamma: defaults::gamma(),
            epsilon_scale: defaults::epsilon_scale(),
            max_iterations: defaults::max_iterations(),
            tolerance: defaults::tolerance(),
            proportions: defaults::proportions(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "defaults::order")]
    pub order: OrderMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { order: defaults::order() }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "defaults::dataset")]
    pub dataset: String,
    #[serde(default = "defaults::difficulty_report")]
    pub difficulty_report: String,
    #[serde(default = "defaults::plan")]
    pub plan: String,
    #[serde(default = "defaults::trace")]
    pub trace: String,
    #[serde(default = "defaults::eval_report")]
    pub eval_report: String,
    #[serde(default = "defaults::trajectory")]
    pub trajectory: String,
    #[serde(default = "defaults::policy_prefix")]
    pub policy_prefix: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: defaults::dataset(),
            difficulty_report: defaults::difficulty_report(),
            plan: defaults::plan(),
            trace: defaults::trace(),
            eval_report: defaults::eval_report(),
            trajectory: defaults::trajectory(),
            policy_prefix: defaults::policy_prefix(),
        }
    }
}

impl PathsSection {
    pub fn dataset(&self, run_dir: &Path) -> PathBuf {
        run_dir.join(&self.dataset)
    }

    pub fn difficulty_report(&self, run_dir: &Path) -> PathBuf {
        run_dir.join(&self.difficulty_report)
    }

    pub fn plan(&self, run_dir: &Path) -> PathBuf {
        run_dir.join(&self.plan)
    }

    pub fn trace(&self, run_dir: &Path) -> PathBuf {
        run_dir.join(&self.trace)
    }

    pub fn eval_report(&self, run_dir: &Path) -> PathBuf {
        run_dir.join(&self.eval_report)
    }

    pub fn trajectory(&self, run_dir: &Path) -> PathBuf {
        run_dir.join(&self.trajectory)
    }

    pub fn policy(&self, run_dir: &Path, label: &str) -> PathBuf {
        run_dir.join(format!("{}_{label}.json", self.policy_prefix))
    }
}

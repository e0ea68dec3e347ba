//! The pipeline commands. Every command reads its inputs from the run
//! directory (or the paths configured under `[paths]`), writes its artifacts
//! back there and refreshes the manifest, so identical configs and seeds
//! yield byte-identical run directories.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use scpo_core::data::{generate, read_bundle, write_bundle, DatasetBundle};
use scpo_core::difficulty::{
    difficulty_scores, partition, read_report, write_report, DifficultyRecord,
};
use scpo_core::eval::{
    evaluate, f1_gen, read_eval_csv, render_trajectory_csv, write_eval_csv, EvalSnapshot,
    TrajectoryRun,
};
use scpo_core::floatfmt::FloatMode;
use scpo_core::model::PolicyTable;
use scpo_core::objectives::Hyperparams;
use scpo_core::trainer::{
    run_curriculum, CurriculumOutcome, CurriculumPlan, OrderMode, StageName, write_trace_csv,
};

use crate::config::RunConfig;
use crate::manifest::update_manifest;

fn ensure_run_dir(run_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir)
        .with_context(|| format!("cannot create run directory {}", run_dir.display()))
}

fn load_bundle(config: &RunConfig, run_dir: &Path) -> Result<DatasetBundle> {
    let path = config.paths.dataset(run_dir);
    read_bundle(&path).with_context(|| format!("cannot load dataset {}", path.display()))
}

/// The configured base policy: an explicit file when given, otherwise the
/// uniform table over the dataset's contexts and vocabulary.
fn base_policy(bundle: &DatasetBundle, policy_path: Option<&Path>) -> Result<PolicyTable> {
    match policy_path {
        Some(path) => PolicyTable::read_from(path)
            .with_context(|| format!("cannot load policy {}", path.display())),
        None => PolicyTable::uniform(bundle.contexts(), bundle.vocab())
            .map_err(|e| anyhow!("cannot build uniform policy: {e}")),
    }
}

pub fn gen_data(config: &RunConfig, run_dir: &Path) -> Result<()> {
    ensure_run_dir(run_dir)?;
    let gen_config = config.gen_config();
    let bundle = generate(&gen_config).context("generation failed")?;
    let path = config.paths.dataset(run_dir);
    write_bundle(&bundle, &path, FloatMode::Hex)
        .with_context(|| format!("cannot write dataset {}", path.display()))?;
    println!(
        "wrote {} pairs, {} images, {} queries (seed {}) to {}",
        bundle.pairs.len(),
        bundle.images.len(),
        bundle.queries.len(),
        gen_config.seed,
        path.display()
    );
    update_manifest(run_dir)
}

pub fn score(config: &RunConfig, run_dir: &Path, policy_path: Option<&Path>) -> Result<()> {
    ensure_run_dir(run_dir)?;
    let bundle = load_bundle(config, run_dir)?;
    let policy = base_policy(&bundle, policy_path)?;
    let records = difficulty_scores(&policy, &bundle, &config.weights(), &config.ot_params())
        .context("difficulty scoring failed")?;
    let mut plan = partition(&records, config.proportions()?).context("partition failed")?;
    plan.order_mode = config.train.order;
    let report_path = config.paths.difficulty_report(run_dir);
    write_report(&records, &plan, &report_path)
        .with_context(|| format!("cannot write difficulty report {}", report_path.display()))?;
    let plan_path = config.paths.plan(run_dir);
    plan.write_to(&plan_path)
        .with_context(|| format!("cannot write plan {}", plan_path.display()))?;
    let sizes: Vec<String> =
        plan.stages.iter().map(|s| format!("{}={}", s.name, s.pair_ids.len())).collect();
    println!(
        "scored {} pairs; stages {}; wrote {} and {}",
        records.len(),
        sizes.join(" "),
        report_path.display(),
        plan_path.display()
    );
    update_manifest(run_dir)
}

pub struct TrainArgs<'a> {
    pub policy_path: Option<&'a Path>,
    pub order: Option<OrderMode>,
    pub lambda_sweep: Option<Vec<f64>>,
    pub medium_sweep: Option<Vec<f64>>,
}

fn run_and_write(
    policy0: &PolicyTable,
    plan: &CurriculumPlan,
    bundle: &DatasetBundle,
    hp: &Hyperparams,
    seed: u64,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<CurriculumOutcome> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let outcome =
        run_curriculum(policy0, plan, &bundle.pairs, hp, seed).context("training failed")?;
    policy0
        .write_to(&config.paths.policy(out_dir, "initial"), FloatMode::Hex)
        .context("cannot write initial policy snapshot")?;
    for trace in &outcome.traces {
        let path = config.paths.policy(out_dir, &trace.stage_name.to_string());
        trace
            .end_policy
            .write_to(&path, FloatMode::Hex)
            .with_context(|| format!("cannot write snapshot {}", path.display()))?;
    }
    outcome
        .final_policy
        .write_to(&config.paths.policy(out_dir, "final"), FloatMode::Hex)
        .context("cannot write final policy snapshot")?;
    let trace_path = config.paths.trace(out_dir);
    write_trace_csv(&outcome.traces, &trace_path)
        .with_context(|| format!("cannot write trace {}", trace_path.display()))?;
    Ok(outcome)
}

pub fn train(config: &RunConfig, run_dir: &Path, args: &TrainArgs<'_>) -> Result<()> {
    ensure_run_dir(run_dir)?;
    let bundle = load_bundle(config, run_dir)?;
    let policy0 = base_policy(&bundle, args.policy_path)?;
    let hp = config.hyperparams();
    let plan_path = config.paths.plan(run_dir);
    let mut plan = CurriculumPlan::read_from(&plan_path)
        .with_context(|| format!("cannot load plan {}", plan_path.display()))?;
    if let Some(order) = args.order {
        plan.order_mode = order;
    }

    match (&args.lambda_sweep, &args.medium_sweep) {
        (Some(_), Some(_)) => bail!("--lambda-sweep and --medium-sweep are mutually exclusive"),
        (None, None) => {
            // The effective plan (order included) is written back so that
            // eval and report see exactly what ran.
            plan.write_to(&plan_path)
                .with_context(|| format!("cannot write plan {}", plan_path.display()))?;
            let outcome =
                run_and_write(&policy0, &plan, &bundle, &hp, config.seed, config, run_dir)?;
            let last = outcome.traces.last().expect("plan has stages");
            println!(
                "trained {} stages ({} order); final stage {} mean loss {:.6}",
                outcome.traces.len(),
                plan.order_mode,
                last.stage_name,
                last.epoch_losses.last().map(|l| l.l_total).unwrap_or(f64::NAN)
            );
        }
        (Some(lambdas), None) => {
            for &lambda in lambdas {
                let mut swept = hp.clone();
                swept.lambda = lambda;
                let out_dir = run_dir.join(format!("lambda_{lambda}"));
                run_and_write(&policy0, &plan, &bundle, &swept, config.seed, config, &out_dir)?;
                plan.write_to(&config.paths.plan(&out_dir))?;
                println!("lambda {lambda}: traces under {}", out_dir.display());
            }
        }
        (None, Some(mediums)) => {
            let report_path = config.paths.difficulty_report(run_dir);
            let records: Vec<DifficultyRecord> = read_report(&report_path)
                .with_context(|| {
                    format!("medium sweep needs the difficulty report {}", report_path.display())
                })?
                .into_iter()
                .map(|(record, _)| record)
                .collect();
            let (p_easy, _, _) = config.proportions()?;
            for &p_medium in mediums {
                let p_hard = 1.0 - p_easy - p_medium;
                if p_hard <= 0.0 {
                    bail!(
                        "medium proportion {p_medium} leaves no hard stage (easy is {p_easy})"
                    );
                }
                let mut swept_plan = partition(&records, (p_easy, p_medium, p_hard))
                    .with_context(|| format!("partition failed for medium = {p_medium}"))?;
                swept_plan.order_mode = plan.order_mode;
                let out_dir = run_dir.join(format!("medium_{p_medium}"));
                run_and_write(&policy0, &swept_plan, &bundle, &hp, config.seed, config, &out_dir)?;
                swept_plan.write_to(&config.paths.plan(&out_dir))?;
                println!("medium {p_medium}: traces under {}", out_dir.display());
            }
        }
    }
    update_manifest(run_dir)
}

/// Chair/cover percentages, one `chair,cover` data line after a header.
fn read_metrics_file(path: &Path) -> Result<(f64, f64)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read metrics file {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("chair,cover") => {}
        other => bail!(
            "metrics file {} must start with the header 'chair,cover', found {other:?}",
            path.display()
        ),
    }
    let line = lines
        .next()
        .ok_or_else(|| anyhow!("metrics file {} has no data line", path.display()))?;
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 2 {
        bail!("metrics file {} data line needs two fields", path.display());
    }
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| anyhow!("bad percentage {s:?} in {}", path.display()))
    };
    Ok((parse(fields[0])?, parse(fields[1])?))
}

pub fn eval(config: &RunConfig, run_dir: &Path, metrics_path: Option<&Path>) -> Result<()> {
    let bundle = load_bundle(config, run_dir)?;
    let plan_path = config.paths.plan(run_dir);
    let plan = CurriculumPlan::read_from(&plan_path)
        .with_context(|| format!("cannot load plan {}", plan_path.display()))?;

    let mut per_stage: Vec<(StageName, EvalSnapshot)> = Vec::new();
    for stage in plan.ordered_stages() {
        let path = config.paths.policy(run_dir, &stage.name.to_string());
        if !path.exists() {
            bail!("missing policy snapshot {} (run `scpo train` first)", path.display());
        }
        let policy = PolicyTable::read_from(&path)
            .with_context(|| format!("cannot load snapshot {}", path.display()))?;
        per_stage.push((stage.name, evaluate(&policy, &bundle.pairs)?));
    }

    let f1 = match metrics_path {
        None => None,
        Some(path) => {
            let (chair, cover) = read_metrics_file(path)?;
            Some(f1_gen(chair, cover).context("composite score failed")?)
        }
    };

    let last = per_stage.last().ok_or_else(|| anyhow!("plan has no stages"))?.1;
    let initial_path = config.paths.policy(run_dir, "initial");
    let initial = if initial_path.exists() {
        let policy = PolicyTable::read_from(&initial_path)
            .with_context(|| format!("cannot load snapshot {}", initial_path.display()))?;
        Some(evaluate(&policy, &bundle.pairs)?)
    } else {
        None
    };

    let report = scpo_core::eval::EvalReport {
        preference_accuracy: last.preference_accuracy,
        visual_grounding_accuracy: last.visual_grounding_accuracy,
        halrate: last.halrate,
        f1_gen: f1,
        initial,
        per_stage,
    };
    let report_path = config.paths.eval_report(run_dir);
    write_eval_csv(&report, &report_path)
        .with_context(|| format!("cannot write evaluation report {}", report_path.display()))?;
    println!(
        "final: preference_accuracy {:.4} visual_grounding {:.4} halrate {:.4}{}",
        report.preference_accuracy,
        report.visual_grounding_accuracy,
        report.halrate,
        report.f1_gen.map(|v| format!(" f1_gen {v:.2}")).unwrap_or_default()
    );
    update_manifest(run_dir)
}

pub fn report(config: &RunConfig, run_dir: &Path, runs: &[&Path]) -> Result<()> {
    let mut trajectory_runs = Vec::new();
    for dir in runs {
        let plan_path = config.paths.plan(dir);
        let plan = CurriculumPlan::read_from(&plan_path)
            .with_context(|| format!("cannot load plan {}", plan_path.display()))?;
        let eval_path = config.paths.eval_report(dir);
        let stages = read_eval_csv(&eval_path)
            .with_context(|| format!("cannot load evaluation report {}", eval_path.display()))?;
        trajectory_runs.push(TrajectoryRun {
            order_label: plan.order_mode.to_string(),
            stages,
        });
    }
    let path = config.paths.trajectory(run_dir);
    std::fs::write(&path, render_trajectory_csv(&trajectory_runs))
        .with_context(|| format!("cannot write trajectory {}", path.display()))?;
    println!("wrote trajectories of {} run(s) to {}", trajectory_runs.len(), path.display());
    update_manifest(run_dir)
}

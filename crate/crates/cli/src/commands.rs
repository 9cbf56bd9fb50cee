//! simulate, train, attribute and calibrate.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use dsmdp::attribution::{attribution_sweep, DEFAULT_BALANCE_THRESHOLD};
use dsmdp::calibration::{
    group_by_task, task_report, CalibrationParams, Rate, TaskReport, DEFAULT_RESAMPLES,
};
use dsmdp::exact::TrajectorySpace;
use dsmdp::objectives::{
    combine, kl_gradient, kl_q_values, weighted_score, ObjectiveGradient, Track,
};
use dsmdp::rng::derive_seed;
use dsmdp::trainer::{summarize, TrainError, TRACE_COLUMNS};
use dsmdp::trajectory::{read_jsonl, sample_trajectory, LabeledTrajectory};
use dsmdp::{
    attribute, AttemptOutcome, ParamVec, Params, Report, TrainSettings, Trajectory, World,
};

use crate::output::{dump_config, fmt, fmt_opt, load_config, located, OutputDir};
use crate::{AttributeArgs, CalibrateArgs, CliError, CliResult, CommonArgs};

fn apply_common(world: &mut World, seed: &mut u64, args: &CommonArgs) {
    if let Some(s) = args.seed {
        *seed = s;
    }
    if let Some(c) = args.convention {
        world.kl_sign_convention = c.into();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub n: usize,
    pub seed: u64,
    pub params: Params,
    pub world: World,
    /// Written into every record's `task` field when set.
    pub task: Option<String>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 0,
            params: Params::worked_example(),
            world: World::default(),
            task: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct SimulateSummary {
    n: usize,
    truncated: usize,
    mean_attempts: f64,
    first_attempt_correct_rate: f64,
    /// Final-answer accuracy over records that stopped on their own.
    observed_accuracy: Option<f64>,
    p_correct: f64,
    model_accuracy: Option<f64>,
}

pub fn simulate(args: &crate::SimulateArgs) -> CliResult<()> {
    let mut cfg: SimulateConfig = load_config(args.common.config.as_deref(), "simulate")?;
    apply_common(&mut cfg.world, &mut cfg.seed, &args.common);
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if args.common.dump_config {
        return dump_config(&cfg);
    }
    if cfg.n == 0 {
        return Err(CliError::Validation("n must be at least 1".into()));
    }
    cfg.world.validate()?;
    cfg.params.validate()?;

    let records: Vec<Trajectory> = (0..cfg.n as u64)
        .map(|i| sample_trajectory(&cfg.params, &cfg.world, derive_seed(cfg.seed, i)))
        .collect();
    let mut jsonl = String::new();
    for t in &records {
        let line = LabeledTrajectory {
            trajectory: t.clone(),
            task: cfg.task.clone(),
        };
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }

    let n = records.len() as f64;
    let completed: Vec<&Trajectory> = records.iter().filter(|t| !t.truncated()).collect();
    let summary = SimulateSummary {
        n: records.len(),
        truncated: records.len() - completed.len(),
        mean_attempts: records.iter().map(|t| t.len() as f64).sum::<f64>() / n,
        first_attempt_correct_rate: records
            .iter()
            .filter(|t| t.steps()[0].outcome == AttemptOutcome::Correct)
            .count() as f64
            / n,
        observed_accuracy: (!completed.is_empty()).then(|| {
            completed
                .iter()
                .filter(|t| t.final_outcome() == AttemptOutcome::Correct)
                .count() as f64
                / completed.len() as f64
        }),
        p_correct: cfg.params.action_probs().p_correct,
        model_accuracy: CalibrationParams::from_policy(&cfg.params)
            .and_then(|p| dsmdp::predict_accuracy(&p))
            .ok(),
    };
    log::info!(
        "simulated {} trajectories, {} truncated",
        summary.n,
        summary.truncated
    );

    let mut out = OutputDir::create(&args.common.out)?;
    out.write_text("trajectories.jsonl", &jsonl)?;
    out.write_json("summary.json", &summary)?;
    out.finish("simulate", Some(cfg.seed), &cfg)
}

pub fn train(args: &CommonArgs) -> CliResult<()> {
    let mut cfg: TrainSettings = load_config(args.config.as_deref(), "train")?;
    apply_common(&mut cfg.world, &mut cfg.seed, args);
    if args.dump_config {
        return dump_config(&cfg);
    }
    let trace = match dsmdp::trainer::train(&cfg) {
        Ok(t) => t,
        Err(TrainError::Invalid(e)) => return Err(e.into()),
        Err(e @ TrainError::Diverged { .. }) => return Err(CliError::Validation(e.to_string())),
    };
    let summary = summarize(&trace)?;
    log::info!(
        "trained {} steps, final params {:?}, detected period {:?}",
        summary.steps,
        summary.final_params,
        summary.detected_period
    );

    let mut out = OutputDir::create(&args.out)?;
    let rows: Vec<Vec<String>> = trace.records.iter().map(|r| r.csv_fields()).collect();
    out.write_table(args.format, "trace", &TRACE_COLUMNS, &rows, &trace.records)?;
    out.write_json("summary.json", &summary)?;
    out.finish("train", Some(cfg.seed), &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeConfig {
    pub params: Params,
    pub reference: Params,
    pub world: World,
    /// Answer lengths for the sweep; both lengths are set to each value.
    pub lengths: Vec<usize>,
    pub balance_threshold: f64,
    /// Trajectory whose reward, KL and net tracks are reported.
    pub trajectory: Trajectory,
    pub advantage: f64,
    /// Unused; present so every config carries a seed.
    pub seed: u64,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            params: Params::worked_example(),
            reference: Params::worked_example_reference(),
            world: World::default(),
            lengths: vec![1, 2, 4, 8, 16, 32, 64],
            balance_threshold: DEFAULT_BALANCE_THRESHOLD,
            trajectory: Trajectory::worked_example(),
            advantage: 0.5,
            seed: 0,
        }
    }
}

const ATTRIBUTION_COLUMNS: [&str; 10] = [
    "scope",
    "track",
    "d_theta_s",
    "d_theta_d_c",
    "d_theta_d_w",
    "sampling_magnitude",
    "decision_magnitude",
    "ratio",
    "balanced",
    "zero_gradient",
];

#[derive(Debug, Serialize)]
struct AttributionRow {
    scope: &'static str,
    gradient: ObjectiveGradient<f64>,
    report: Report,
}

impl AttributionRow {
    fn fields(&self) -> Vec<String> {
        let g = &self.gradient;
        let r = &self.report;
        vec![
            self.scope.to_string(),
            r.track.label().to_string(),
            fmt(g.d_theta_s),
            fmt(g.d_theta_d_c),
            fmt(g.d_theta_d_w),
            fmt(r.sampling_magnitude),
            fmt(r.decision_magnitude),
            fmt(r.ratio),
            fmt(r.balanced),
            fmt(r.zero_gradient),
        ]
    }
}

#[derive(Debug, Serialize)]
struct QRow {
    step: usize,
    action: &'static str,
    d_k: f64,
    future: f64,
    #[serde(rename = "Q")]
    q: f64,
    score: f64,
    parameter: &'static str,
    contribution: f64,
}

fn on_param(v: ParamVec<f64>, name: &str) -> f64 {
    match name {
        "theta_s" => v.s,
        "theta_d_c" => v.d_c,
        _ => v.d_w,
    }
}

pub fn attribute_cmd(args: &AttributeArgs) -> CliResult<()> {
    let common = &args.common;
    let mut cfg: AttributeConfig = load_config(common.config.as_deref(), "attribute")?;
    apply_common(&mut cfg.world, &mut cfg.seed, common);
    if common.dump_config {
        return dump_config(&cfg);
    }
    cfg.world.validate()?;
    cfg.params.validate()?;
    cfg.reference.validate()?;
    cfg.trajectory.validate_for(&cfg.world)?;
    if !cfg.advantage.is_finite() {
        return Err(CliError::Validation("advantage must be finite".into()));
    }
    let threshold = cfg.balance_threshold;
    let (p, r, w) = (&cfg.params, &cfg.reference, &cfg.world);

    let space = TrajectorySpace::new(w)?;
    let expected_reward = space.surrogate_gradient(p);
    let expected_kl = space.kl_gradient(p, r);
    let traj_reward = ObjectiveGradient::new(
        Track::Reward,
        weighted_score(&cfg.trajectory, cfg.advantage, p, w),
    );
    let traj_kl = kl_gradient(&cfg.trajectory, p, r, w);
    let traj_net = combine(traj_reward, traj_kl, w).net;
    let mut rows = Vec::new();
    for (scope, g) in [
        ("expected", expected_reward),
        ("expected", expected_kl),
        ("trajectory", traj_reward),
        ("trajectory", traj_kl),
        ("trajectory", traj_net),
    ] {
        rows.push(AttributionRow {
            scope,
            gradient: g,
            report: attribute(&g, threshold)?,
        });
    }

    let sweep = attribution_sweep(p, r, w, &cfg.lengths, threshold)?;

    let mut out = OutputDir::create(&common.out)?;
    let fields: Vec<Vec<String>> = rows.iter().map(AttributionRow::fields).collect();
    out.write_table(
        common.format,
        "attribution",
        &ATTRIBUTION_COLUMNS,
        &fields,
        &rows,
    )?;
    let sweep_fields: Vec<Vec<String>> = sweep
        .iter()
        .map(|s| {
            vec![
                fmt(s.length),
                s.track.label().to_string(),
                fmt(s.sampling_magnitude),
                fmt(s.decision_magnitude),
                fmt(s.ratio),
                fmt(s.balanced),
            ]
        })
        .collect();
    out.write_table(
        common.format,
        "sweep",
        &[
            "L",
            "track",
            "sampling_magnitude",
            "decision_magnitude",
            "ratio",
            "balanced",
        ],
        &sweep_fields,
        &sweep,
    )?;

    if args.dump_qvalues {
        let q: Vec<QRow> = kl_q_values(&cfg.trajectory, p, r, w)
            .iter()
            .map(|e| QRow {
                step: e.step,
                action: e.action.label(),
                d_k: e.immediate,
                future: e.future,
                q: e.q,
                score: on_param(e.score, e.parameter()),
                parameter: e.parameter(),
                contribution: on_param(e.contribution(), e.parameter()),
            })
            .collect();
        let q_fields: Vec<Vec<String>> = q
            .iter()
            .map(|e| {
                vec![
                    fmt(e.step),
                    e.action.to_string(),
                    fmt(e.d_k),
                    fmt(e.future),
                    fmt(e.q),
                    fmt(e.score),
                    e.parameter.to_string(),
                    fmt(e.contribution),
                ]
            })
            .collect();
        out.write_table(
            common.format,
            "qvalues",
            &[
                "step",
                "action",
                "d_k",
                "future",
                "Q",
                "score",
                "parameter",
                "contribution",
            ],
            &q_fields,
            &q,
        )?;
    }
    out.finish("attribute", Some(cfg.seed), &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateConfig {
    pub input: Option<PathBuf>,
    pub bootstrap: usize,
    pub seed: u64,
    pub by_task: bool,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            input: None,
            bootstrap: DEFAULT_RESAMPLES,
            seed: 0,
            by_task: false,
        }
    }
}

const CALIBRATION_COLUMNS: [&str; 16] = [
    "task",
    "n",
    "truncated",
    "p_s",
    "p_s_low",
    "p_s_high",
    "p_d_c",
    "p_d_c_low",
    "p_d_c_high",
    "p_d_w",
    "p_d_w_low",
    "p_d_w_high",
    "predicted_accuracy",
    "predicted_low",
    "predicted_high",
    "observed_accuracy",
];

fn rate_fields(r: &Rate) -> [String; 3] {
    [fmt_opt(r.estimate), fmt(r.ci_low), fmt(r.ci_high)]
}

fn report_fields(t: &TaskReport) -> Vec<String> {
    let mut f = vec![t.task.clone(), fmt(t.n), fmt(t.truncated)];
    for r in [
        &t.params.p_s,
        &t.params.p_d_c,
        &t.params.p_d_w,
        &t.predicted_accuracy,
    ] {
        f.extend(rate_fields(r));
    }
    f.push(fmt_opt(t.observed_accuracy));
    f
}

pub fn calibrate(args: &CalibrateArgs) -> CliResult<()> {
    let common = &args.common;
    let mut cfg: CalibrateConfig = load_config(common.config.as_deref(), "calibrate")?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(i) = &args.input {
        cfg.input = Some(i.clone());
    }
    if let Some(b) = args.bootstrap {
        cfg.bootstrap = b;
    }
    cfg.by_task |= args.by_task;
    if common.convention.is_some() {
        log::warn!("--convention has no effect on calibrate");
    }
    if common.dump_config {
        return dump_config(&cfg);
    }
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| CliError::Validation("calibrate needs --input".into()))?;
    let file = File::open(input).map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
    let records = read_jsonl(BufReader::new(file)).map_err(|e| located(input, e))?;
    if records.is_empty() {
        return Err(CliError::Validation(format!(
            "{} holds no records",
            input.display()
        )));
    }

    let groups = if cfg.by_task {
        group_by_task(records)
    } else {
        let all = records.into_iter().map(|r| r.trajectory).collect();
        [("all".to_string(), all)].into_iter().collect()
    };
    let mut reports = Vec::with_capacity(groups.len());
    for (task, recs) in &groups {
        let r = task_report(task, recs, cfg.bootstrap, cfg.seed)?;
        println!(
            "{task}: n={} p_s={} p_d_c={} p_d_w={} predicted={} observed={}",
            r.n,
            fmt_opt(r.params.p_s.estimate),
            fmt_opt(r.params.p_d_c.estimate),
            fmt_opt(r.params.p_d_w.estimate),
            fmt_opt(r.predicted_accuracy.estimate),
            fmt_opt(r.observed_accuracy),
        );
        reports.push(r);
    }

    let mut out = OutputDir::create(&common.out)?;
    let fields: Vec<Vec<String>> = reports.iter().map(report_fields).collect();
    out.write_table(
        common.format,
        "calibration",
        &CALIBRATION_COLUMNS,
        &fields,
        &reports,
    )?;
    out.finish("calibrate", Some(cfg.seed), &cfg)
}

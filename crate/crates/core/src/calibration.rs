//! Three-parameter accuracy model of the retry process.
//!
//! A round samples an answer (correct with `p_s`), then either stops or
//! resamples: stop after a correct answer with `p_d_c`, resample after a wrong
//! one with `p_d_w`. Per round the process ends correctly with
//! `a = p_s·p_d_c`, ends wrongly with `b = (1−p_s)(1−p_d_w)` and continues
//! with `c = 1 − a − b`, so the infinite-horizon accuracy is `a / (1 − c)`.
//!
//! Rates and intervals here are plain `f64` probabilities.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::PolicyParams;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Real;
use crate::trajectory::{AttemptOutcome, DecisionAction, LabeledTrajectory, Trajectory};

/// Smallest per-round stopping mass accepted by [`predict_accuracy`].
pub const EPSILON_DENOM: f64 = 1e-12;

/// Upper bound on the horizon accepted by [`brute_force_accuracy`].
pub const MAX_BRUTE_FORCE_HORIZON: usize = 64;

pub const DEFAULT_RESAMPLES: usize = 100;

/// Task label given to records without a `task` field.
pub const UNLABELED_TASK: &str = "unlabeled";

/// A probability estimate with a confidence interval. An undefined rate has
/// no estimate and the uninformative interval `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub estimate: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Rate {
    pub fn point(value: f64) -> Self {
        Self {
            estimate: Some(value),
            ci_low: value,
            ci_high: value,
        }
    }

    pub fn undefined() -> Self {
        Self {
            estimate: None,
            ci_low: 0.0,
            ci_high: 1.0,
        }
    }

    pub fn is_undefined(&self) -> bool {
        self.estimate.is_none()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }

    pub fn width(&self) -> f64 {
        self.ci_high - self.ci_low
    }

    /// Percentile interval from bootstrap draws, widened to contain the
    /// estimate.
    fn with_percentiles(estimate: Option<f64>, draws: &mut [f64]) -> Self {
        let Some(est) = estimate else {
            return Self::undefined();
        };
        if draws.is_empty() {
            return Self::point(est);
        }
        draws.sort_by(f64::total_cmp);
        Self {
            estimate: Some(est),
            ci_low: percentile(draws, 2.5).min(est),
            ci_high: percentile(draws, 97.5).max(est),
        }
    }
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub p_s: Rate,
    pub p_d_c: Rate,
    pub p_d_w: Rate,
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be a probability, got {p}")))
    }
}

impl CalibrationParams {
    /// Exact rates with zero-width intervals.
    pub fn new(p_s: f64, p_d_c: f64, p_d_w: f64) -> Result<Self> {
        check_probability("p_s", p_s)?;
        check_probability("p_d_c", p_d_c)?;
        check_probability("p_d_w", p_d_w)?;
        Ok(Self {
            p_s: Rate::point(p_s),
            p_d_c: Rate::point(p_d_c),
            p_d_w: Rate::point(p_d_w),
        })
    }

    /// The rates implied by a three-logit policy.
    pub fn from_policy<T: Real>(params: &PolicyParams<T>) -> Result<Self> {
        params.validate()?;
        let p = params.action_probs();
        Self::new(
            p.p_correct.as_f64(),
            p.p_stop_given_c.as_f64(),
            p.p_resample_given_w.as_f64(),
        )
    }

    /// Point rates usable by the model. An undefined decision rate is only
    /// accepted when the outcome it conditions on has zero probability.
    pub fn resolved(&self) -> Result<(f64, f64, f64)> {
        let p_s = self
            .p_s
            .estimate
            .ok_or_else(|| invalid("p_s is undefined"))?;
        let p_d_c = match self.p_d_c.estimate {
            Some(v) => v,
            None if p_s == 0.0 => 0.0,
            None => {
                return Err(invalid(
                    "p_d_c is undefined but correct attempts are possible",
                ))
            }
        };
        let p_d_w = match self.p_d_w.estimate {
            Some(v) => v,
            None if p_s == 1.0 => 0.0,
            None => {
                return Err(invalid(
                    "p_d_w is undefined but wrong attempts are possible",
                ))
            }
        };
        check_probability("p_s", p_s)?;
        check_probability("p_d_c", p_d_c)?;
        check_probability("p_d_w", p_d_w)?;
        Ok((p_s, p_d_c, p_d_w))
    }
}

/// Infinite-horizon accuracy `p_s·p_d_c / (1 − (p_s(1−p_d_c) + (1−p_s)p_d_w))`.
pub fn predict_accuracy(params: &CalibrationParams) -> Result<f64> {
    let (p_s, p_d_c, p_d_w) = params.resolved()?;
    let success = p_s * p_d_c;
    // `1 − c` written as the stopping mass, which avoids cancellation near 1.
    let stop = success + (1.0 - p_s) * (1.0 - p_d_w);
    if stop <= EPSILON_DENOM {
        return Err(Error::DegenerateProcess(stop));
    }
    Ok((success / stop).clamp(0.0, 1.0))
}

/// How [`brute_force_accuracy`] scores runs still going at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationConvention {
    /// Truncated runs count as failures: `acc(h) = a + c·acc(h−1)`.
    #[default]
    CountAsFailure,
    /// Truncated runs are scored on their final attempt.
    ScoreFinalAttempt,
    /// Truncated runs are dropped and accuracy is conditioned on stopping,
    /// matching how [`estimate`] and observed accuracy treat them.
    ExcludeTruncated,
}

/// Success probability of the process run for at most `max_attempts`
/// rounds, by propagating probability mass round by round.
pub fn brute_force_accuracy(
    params: &CalibrationParams,
    max_attempts: usize,
    convention: TruncationConvention,
) -> Result<f64> {
    if max_attempts == 0 {
        return Err(invalid("max_attempts must be at least 1"));
    }
    if max_attempts > MAX_BRUTE_FORCE_HORIZON {
        return Err(Error::HorizonTooLarge {
            requested: max_attempts,
            limit: MAX_BRUTE_FORCE_HORIZON,
        });
    }
    let (p_s, p_d_c, p_d_w) = params.resolved()?;
    let mut alive = 1.0;
    let mut success = 0.0;
    let mut stopped = 0.0;
    for round in 1..=max_attempts {
        let correct = alive * p_s;
        let wrong = alive * (1.0 - p_s);
        success += correct * p_d_c;
        stopped += correct * p_d_c + wrong * (1.0 - p_d_w);
        if round == max_attempts {
            if convention == TruncationConvention::ScoreFinalAttempt {
                success += correct * (1.0 - p_d_c);
            }
        } else {
            alive = correct * (1.0 - p_d_c) + wrong * p_d_w;
        }
    }
    match convention {
        TruncationConvention::ExcludeTruncated => {
            if stopped <= EPSILON_DENOM {
                return Err(Error::DegenerateProcess(stopped));
            }
            Ok((success / stopped).clamp(0.0, 1.0))
        }
        _ => Ok(success.clamp(0.0, 1.0)),
    }
}

/// Additive per-record tallies behind every estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub records: u64,
    pub first_correct: u64,
    pub correct_decisions: u64,
    pub stops_after_correct: u64,
    pub wrong_decisions: u64,
    pub resamples_after_wrong: u64,
    /// Records that stopped on their own.
    pub completed: u64,
    pub completed_correct: u64,
}

impl Counts {
    /// Tallies one record. The forced terminal stop of a truncated record is
    /// not a policy decision and is left out of the decision counts.
    pub fn of(traj: &Trajectory) -> Self {
        let mut c = Counts {
            records: 1,
            ..Default::default()
        };
        let steps = traj.steps();
        if steps[0].outcome == AttemptOutcome::Correct {
            c.first_correct = 1;
        }
        let decided = if traj.truncated() {
            &steps[..steps.len() - 1]
        } else {
            steps
        };
        for step in decided {
            match (step.outcome, step.decision) {
                (AttemptOutcome::Correct, d) => {
                    c.correct_decisions += 1;
                    c.stops_after_correct += u64::from(d == DecisionAction::Stop);
                }
                (AttemptOutcome::Wrong, d) => {
                    c.wrong_decisions += 1;
                    c.resamples_after_wrong += u64::from(d == DecisionAction::Resample);
                }
            }
        }
        if !traj.truncated() {
            c.completed = 1;
            c.completed_correct = u64::from(traj.final_outcome() == AttemptOutcome::Correct);
        }
        c
    }

    pub fn add(&mut self, o: &Counts) {
        self.records += o.records;
        self.first_correct += o.first_correct;
        self.correct_decisions += o.correct_decisions;
        self.stops_after_correct += o.stops_after_correct;
        self.wrong_decisions += o.wrong_decisions;
        self.resamples_after_wrong += o.resamples_after_wrong;
        self.completed += o.completed;
        self.completed_correct += o.completed_correct;
    }

    fn ratio(num: u64, den: u64) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    pub fn params(&self) -> CalibrationParams {
        let rate = |v: Option<f64>| v.map_or_else(Rate::undefined, Rate::point);
        CalibrationParams {
            p_s: rate(Self::ratio(self.first_correct, self.records)),
            p_d_c: rate(Self::ratio(
                self.stops_after_correct,
                self.correct_decisions,
            )),
            p_d_w: rate(Self::ratio(
                self.resamples_after_wrong,
                self.wrong_decisions,
            )),
        }
    }

    /// Final-answer accuracy over records that were not truncated.
    pub fn observed_accuracy(&self) -> Option<f64> {
        Self::ratio(self.completed_correct, self.completed)
    }
}

fn total_counts(records: &[Trajectory]) -> Result<(Vec<Counts>, Counts)> {
    if records.is_empty() {
        return Err(invalid("cannot estimate from an empty record set"));
    }
    let per: Vec<Counts> = records.iter().map(Counts::of).collect();
    let mut total = Counts::default();
    per.iter().for_each(|c| total.add(c));
    Ok((per, total))
}

/// Point estimates: `p_s` from first attempts, the decision rates from
/// decisions conditioned on the outcome they follow.
pub fn estimate(records: &[Trajectory]) -> Result<CalibrationParams> {
    Ok(total_counts(records)?.1.params())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEstimate {
    pub params: CalibrationParams,
    /// Model accuracy; undefined when the point estimates give no prediction.
    pub predicted_accuracy: Rate,
    pub observed_accuracy: Option<f64>,
}

/// Percentile bootstrap (2.5 / 97.5) over records resampled with
/// replacement. Resample `i` draws from `derive_seed(seed, i)`.
pub fn bootstrap_ci(
    records: &[Trajectory],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapEstimate> {
    if resamples < 2 {
        return Err(invalid(format!(
            "need at least 2 bootstrap resamples, got {resamples}"
        )));
    }
    let (per, total) = total_counts(records)?;
    let point = total.params();
    let point_pred = predict_accuracy(&point).ok();

    let mut draws: [Vec<f64>; 4] = Default::default();
    for i in 0..resamples {
        let mut rng = rng_from_seed(derive_seed(seed, i as u64));
        let mut acc = Counts::default();
        for _ in 0..per.len() {
            acc.add(&per[rng.gen_range(0..per.len())]);
        }
        let p = acc.params();
        let fields = [
            p.p_s.estimate,
            p.p_d_c.estimate,
            p.p_d_w.estimate,
            predict_accuracy(&p).ok(),
        ];
        for (d, v) in draws.iter_mut().zip(fields) {
            d.extend(v);
        }
    }
    let [mut s, mut dc, mut dw, mut pred] = draws;
    Ok(BootstrapEstimate {
        params: CalibrationParams {
            p_s: Rate::with_percentiles(point.p_s.estimate, &mut s),
            p_d_c: Rate::with_percentiles(point.p_d_c.estimate, &mut dc),
            p_d_w: Rate::with_percentiles(point.p_d_w.estimate, &mut dw),
        },
        predicted_accuracy: Rate::with_percentiles(point_pred, &mut pred),
        observed_accuracy: total.observed_accuracy(),
    })
}

/// Calibration summary for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub n: usize,
    pub truncated: usize,
    pub params: CalibrationParams,
    pub predicted_accuracy: Rate,
    pub observed_accuracy: Option<f64>,
}

pub fn task_report(
    task: &str,
    records: &[Trajectory],
    resamples: usize,
    seed: u64,
) -> Result<TaskReport> {
    let b = bootstrap_ci(records, resamples, seed)?;
    Ok(TaskReport {
        task: task.to_string(),
        n: records.len(),
        truncated: records.iter().filter(|t| t.truncated()).count(),
        params: b.params,
        predicted_accuracy: b.predicted_accuracy,
        observed_accuracy: b.observed_accuracy,
    })
}

/// Groups labeled records by task, in label order.
pub fn group_by_task(records: Vec<LabeledTrajectory>) -> BTreeMap<String, Vec<Trajectory>> {
    let mut groups: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for r in records {
        let key = r.task.unwrap_or_else(|| UNLABELED_TASK.to_string());
        groups.entry(key).or_default().push(r.trajectory);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use AttemptOutcome::{Correct as C, Wrong as W};

    fn cp(s: f64, dc: f64, dw: f64) -> CalibrationParams {
        CalibrationParams::new(s, dc, dw).unwrap()
    }

    #[test]
    fn closed_form_cases() {
        assert_eq!(predict_accuracy(&cp(1.0, 1.0, 0.3)).unwrap(), 1.0);
        assert_eq!(predict_accuracy(&cp(0.37, 1.0, 0.0)).unwrap(), 0.37);
        assert_eq!(predict_accuracy(&cp(0.5, 1.0, 1.0)).unwrap(), 1.0);
        assert!(matches!(
            predict_accuracy(&cp(0.0, 0.5, 1.0)),
            Err(Error::DegenerateProcess(_))
        ));
        assert!(CalibrationParams::new(1.2, 0.5, 0.5).is_err());
    }

    #[test]
    fn brute_force_conventions() {
        let p = cp(0.6, 0.7, 0.8);
        let a = 0.6 * 0.7;
        let h1 = |c| brute_force_accuracy(&p, 1, c).unwrap();
        assert!((h1(TruncationConvention::CountAsFailure) - a).abs() < 1e-15);
        assert!((h1(TruncationConvention::ScoreFinalAttempt) - 0.6).abs() < 1e-15);
        let pred = predict_accuracy(&p).unwrap();
        assert!((h1(TruncationConvention::ExcludeTruncated) - pred).abs() < 1e-15);

        let geo =
            brute_force_accuracy(&cp(0.5, 1.0, 1.0), 20, TruncationConvention::CountAsFailure)
                .unwrap();
        assert!((geo - (1.0 - 0.5f64.powi(20))).abs() < 1e-12);
        assert!((1.0 - geo).abs() < 1e-6);
    }

    #[test]
    fn brute_force_contracts_by_c() {
        let p = cp(0.3, 0.6, 0.9);
        let c = 0.3 * 0.4 + 0.7 * 0.9;
        let pred = predict_accuracy(&p).unwrap();
        for conv in [
            TruncationConvention::CountAsFailure,
            TruncationConvention::ScoreFinalAttempt,
        ] {
            let gaps: Vec<f64> = (1..12)
                .map(|h| (brute_force_accuracy(&p, h, conv).unwrap() - pred).abs())
                .collect();
            for w in gaps.windows(2) {
                assert!((w[1] / w[0] - c).abs() < 1e-9, "{conv:?}: {w:?}");
            }
        }
    }

    #[test]
    fn horizon_bounds() {
        let p = cp(0.5, 0.5, 0.5);
        assert!(brute_force_accuracy(&p, 0, TruncationConvention::default()).is_err());
        assert!(matches!(
            brute_force_accuracy(
                &p,
                MAX_BRUTE_FORCE_HORIZON + 1,
                TruncationConvention::default()
            ),
            Err(Error::HorizonTooLarge { .. })
        ));
    }

    #[test]
    fn direct_counting() {
        let recs = vec![
            Trajectory::from_outcomes(&[W, C]).unwrap(),
            Trajectory::from_outcomes(&[C]).unwrap(),
        ];
        let p = estimate(&recs).unwrap();
        assert_eq!(p.p_s.estimate, Some(0.5));
        assert_eq!(p.p_d_c.estimate, Some(1.0));
        assert_eq!(p.p_d_w.estimate, Some(1.0));
    }

    #[test]
    fn all_correct_first_try() {
        let recs = vec![Trajectory::from_outcomes(&[C]).unwrap(); 100];
        let p = estimate(&recs).unwrap();
        assert_eq!(p.p_s.estimate, Some(1.0));
        assert_eq!(p.p_d_c.estimate, Some(1.0));
        assert!(p.p_d_w.is_undefined());
        assert_eq!((p.p_d_w.ci_low, p.p_d_w.ci_high), (0.0, 1.0));
        assert_eq!(predict_accuracy(&p).unwrap(), 1.0);
        assert!(estimate(&[]).is_err());
    }

    #[test]
    fn truncated_final_stop_is_not_counted() {
        let t = Trajectory::truncated_from_outcomes(&[W, W]).unwrap();
        let c = Counts::of(&t);
        assert_eq!((c.wrong_decisions, c.resamples_after_wrong), (1, 1));
        assert_eq!((c.completed, c.first_correct), (0, 0));
        let p = estimate(&[t]).unwrap();
        assert_eq!(p.p_d_w.estimate, Some(1.0));
        assert!(p.p_d_c.is_undefined());
        assert!(predict_accuracy(&p).is_err());
    }

    #[test]
    fn bootstrap_single_record_has_zero_width() {
        let recs = vec![Trajectory::from_outcomes(&[W, C]).unwrap()];
        let b = bootstrap_ci(&recs, 20, 3).unwrap();
        assert_eq!(b.params.p_s.width(), 0.0);
        assert_eq!(b.params.p_d_c.width(), 0.0);
        assert_eq!(b.params.p_d_w.width(), 0.0);
        assert!(bootstrap_ci(&recs, 1, 3).is_err());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let recs = vec![
            Trajectory::from_outcomes(&[W, C]).unwrap(),
            Trajectory::from_outcomes(&[C]).unwrap(),
            Trajectory::from_outcomes(&[W]).unwrap(),
            Trajectory::from_outcomes(&[C]).unwrap(),
        ];
        let a = bootstrap_ci(&recs, 50, 9).unwrap();
        assert_eq!(a, bootstrap_ci(&recs, 50, 9).unwrap());
        for r in [
            a.params.p_s,
            a.params.p_d_c,
            a.params.p_d_w,
            a.predicted_accuracy,
        ] {
            let e = r.estimate.unwrap();
            assert!(r.contains(e) && r.ci_low >= 0.0 && r.ci_high <= 1.0);
        }
    }
}

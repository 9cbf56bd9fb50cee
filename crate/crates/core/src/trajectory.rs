//! Trajectories of the two-stage process: sampling, exact enumeration and the
//! factorized log-probability.
//!
//! A trajectory alternates attempts and decisions,
//! `(A_1, RESAMPLE, A_2, RESAMPLE, ..., A_T, STOP)`. Reasoning tokens are not
//! materialized; an attempt only carries its outcome, and its length comes from
//! [`WorldConfig`].
//!
//! At the attempt horizon a RESAMPLE cannot be honored. The recorded decision
//! is forced to STOP and the trajectory is flagged `truncated`. The forced STOP
//! is not a policy action, so probabilities and scores use the RESAMPLE the
//! policy actually drew at that step.

use std::io::BufRead;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{decision_score, sampling_score, ParamVec, PolicyParams, WorldConfig};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Real;

/// Largest horizon accepted by [`enumerate_trajectories`].
pub const MAX_ENUMERATION_HORIZON: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttemptOutcome {
    #[serde(rename = "C")]
    Correct,
    #[serde(rename = "W")]
    Wrong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecisionAction {
    #[serde(rename = "STOP")]
    Stop,
    #[serde(rename = "RESAMPLE")]
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub outcome: AttemptOutcome,
    pub decision: DecisionAction,
}

impl Step {
    pub fn new(outcome: AttemptOutcome, decision: DecisionAction) -> Self {
        Self { outcome, decision }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryWire", into = "TrajectoryWire")]
pub struct Trajectory {
    steps: Vec<Step>,
    truncated: bool,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryWire {
    steps: Vec<Step>,
    #[serde(default)]
    truncated: bool,
}

impl TryFrom<TrajectoryWire> for Trajectory {
    type Error = Error;
    fn try_from(w: TrajectoryWire) -> Result<Self> {
        Trajectory::new(w.steps, w.truncated)
    }
}

impl From<Trajectory> for TrajectoryWire {
    fn from(t: Trajectory) -> Self {
        Self {
            steps: t.steps,
            truncated: t.truncated,
        }
    }
}

impl Trajectory {
    /// Every step but the last must RESAMPLE; the last must STOP unless the
    /// trajectory is truncated.
    pub fn new(steps: Vec<Step>, truncated: bool) -> Result<Self> {
        let Some((last, init)) = steps.split_last() else {
            return Err(invalid("trajectory must contain at least one step"));
        };
        if let Some(k) = init
            .iter()
            .position(|s| s.decision != DecisionAction::Resample)
        {
            return Err(invalid(format!(
                "step {} stops before the end of the trajectory",
                k + 1
            )));
        }
        if !truncated && last.decision != DecisionAction::Stop {
            return Err(invalid(
                "final step of a non-truncated trajectory must STOP",
            ));
        }
        Ok(Self { steps, truncated })
    }

    /// Builds a completed trajectory from its attempt outcomes: RESAMPLE after
    /// every attempt but the last, STOP after the last.
    pub fn from_outcomes(outcomes: &[AttemptOutcome]) -> Result<Self> {
        Self::with_outcomes(outcomes, false)
    }

    /// Truncated trajectory: the policy resampled after the final attempt.
    pub fn truncated_from_outcomes(outcomes: &[AttemptOutcome]) -> Result<Self> {
        Self::with_outcomes(outcomes, true)
    }

    fn with_outcomes(outcomes: &[AttemptOutcome], truncated: bool) -> Result<Self> {
        let n = outcomes.len();
        let steps = outcomes
            .iter()
            .enumerate()
            .map(|(k, &o)| {
                let d = if k + 1 == n {
                    DecisionAction::Stop
                } else {
                    DecisionAction::Resample
                };
                Step::new(o, d)
            })
            .collect();
        Self::new(steps, truncated)
    }

    /// The worked example: a wrong answer, RESAMPLE, a correct answer, STOP.
    pub fn worked_example() -> Self {
        Self::from_outcomes(&[AttemptOutcome::Wrong, AttemptOutcome::Correct])
            .expect("valid trajectory")
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn final_outcome(&self) -> AttemptOutcome {
        self.steps.last().expect("non-empty").outcome
    }

    pub fn validate_for<T: Real>(&self, config: &WorldConfig<T>) -> Result<()> {
        if self.len() > config.max_attempts {
            return Err(invalid(format!(
                "trajectory has {} attempts, horizon is {}",
                self.len(),
                config.max_attempts
            )));
        }
        Ok(())
    }

    /// Steps with the decision the policy actually took. Identical to
    /// [`steps`](Self::steps) except that a truncated trajectory's forced STOP
    /// is reported as the RESAMPLE that triggered truncation.
    pub fn policy_actions(&self) -> impl Iterator<Item = Step> + '_ {
        let n = self.steps.len();
        let truncated = self.truncated;
        self.steps.iter().enumerate().map(move |(k, s)| {
            if truncated && k + 1 == n {
                Step::new(s.outcome, DecisionAction::Resample)
            } else {
                *s
            }
        })
    }

    /// Total number of reasoning tokens across attempts.
    pub fn total_tokens<T: Real>(&self, config: &WorldConfig<T>) -> usize {
        self.steps.iter().map(|s| config.len_of(s.outcome)).sum()
    }

    /// Serializes to the single-line JSON wire format.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

/// Exponents of the six conditional probabilities in a trajectory's
/// probability, which is a monomial in them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProbabilityFactors {
    pub correct: u32,
    pub wrong: u32,
    pub stop_given_c: u32,
    pub resample_given_c: u32,
    pub stop_given_w: u32,
    pub resample_given_w: u32,
}

impl ProbabilityFactors {
    pub fn of(traj: &Trajectory) -> Self {
        let mut f = Self::default();
        for s in traj.policy_actions() {
            match s.outcome {
                AttemptOutcome::Correct => f.correct += 1,
                AttemptOutcome::Wrong => f.wrong += 1,
            }
            match (s.outcome, s.decision) {
                (AttemptOutcome::Correct, DecisionAction::Stop) => f.stop_given_c += 1,
                (AttemptOutcome::Correct, DecisionAction::Resample) => f.resample_given_c += 1,
                (AttemptOutcome::Wrong, DecisionAction::Stop) => f.stop_given_w += 1,
                (AttemptOutcome::Wrong, DecisionAction::Resample) => f.resample_given_w += 1,
            }
        }
        f
    }

    pub fn probability<T: Real>(&self, params: &PolicyParams<T>) -> T {
        let p = params.action_probs();
        p.p_correct.powi(self.correct as i32)
            * p.p_wrong.powi(self.wrong as i32)
            * p.p_stop_given_c.powi(self.stop_given_c as i32)
            * p.p_resample_given_c.powi(self.resample_given_c as i32)
            * p.p_stop_given_w.powi(self.stop_given_w as i32)
            * p.p_resample_given_w.powi(self.resample_given_w as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedTrajectory {
    pub trajectory: Trajectory,
    pub factors: ProbabilityFactors,
}

impl EnumeratedTrajectory {
    pub fn probability<T: Real>(&self, params: &PolicyParams<T>) -> T {
        self.factors.probability(params)
    }
}

/// Every trajectory of at most `max_attempts` attempts, including the
/// truncated ones at the horizon.
pub fn enumerate_trajectories<T: Real>(
    config: &WorldConfig<T>,
) -> Result<Vec<EnumeratedTrajectory>> {
    let horizon = config.max_attempts;
    if horizon > MAX_ENUMERATION_HORIZON {
        return Err(Error::HorizonTooLarge {
            requested: horizon,
            limit: MAX_ENUMERATION_HORIZON,
        });
    }
    if horizon == 0 {
        return Err(invalid("max_attempts must be at least 1"));
    }
    let mut out = Vec::with_capacity((1usize << (horizon + 1)) * 3 / 2);
    let mut outcomes = Vec::with_capacity(horizon);
    for depth in 1..=horizon {
        for bits in 0u32..(1u32 << depth) {
            outcomes.clear();
            outcomes.extend((0..depth).map(|k| {
                if bits >> k & 1 == 0 {
                    AttemptOutcome::Correct
                } else {
                    AttemptOutcome::Wrong
                }
            }));
            let mut push = |traj: Trajectory| {
                let factors = ProbabilityFactors::of(&traj);
                out.push(EnumeratedTrajectory {
                    trajectory: traj,
                    factors,
                });
            };
            push(Trajectory::from_outcomes(&outcomes)?);
            if depth == horizon {
                push(Trajectory::truncated_from_outcomes(&outcomes)?);
            }
        }
    }
    Ok(out)
}

/// Factorized log-probability: attempt terms plus decision terms.
pub fn log_prob<T: Real>(traj: &Trajectory, params: &PolicyParams<T>) -> T {
    traj.policy_actions()
        .map(|s| {
            params.log_sample_prob(s.outcome) + params.log_decision_prob(s.outcome, s.decision)
        })
        .sum()
}

/// Gradient of [`log_prob`] split by policy component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSplit<T> {
    /// Touches `θ_s` only.
    pub sampling: ParamVec<T>,
    /// Touches `θ_{d,C}` and `θ_{d,W}` only.
    pub decision: ParamVec<T>,
}

impl<T: Real> GradSplit<T> {
    pub fn total(&self) -> ParamVec<T> {
        self.sampling + self.decision
    }
}

pub fn grad_log_prob<T: Real>(traj: &Trajectory, params: &PolicyParams<T>) -> GradSplit<T> {
    let mut sampling = ParamVec::zero();
    let mut decision = ParamVec::zero();
    for s in traj.policy_actions() {
        sampling += sampling_score(params, s.outcome);
        decision += decision_score(params, s.outcome, s.decision);
    }
    GradSplit { sampling, decision }
}

/// Draws one trajectory. A pure function of `(params, config, seed)`.
pub fn sample_trajectory<T: Real>(
    params: &PolicyParams<T>,
    config: &WorldConfig<T>,
    seed: u64,
) -> Trajectory {
    let probs = params.action_probs();
    let p_correct = probs.p_correct.as_f64();
    let p_stop_c = probs.p_stop_given_c.as_f64();
    let p_resample_w = probs.p_resample_given_w.as_f64();
    let mut rng = rng_from_seed(seed);
    let mut steps = Vec::new();
    let horizon = config.max_attempts.max(1);
    loop {
        let outcome = if rng.gen::<f64>() < p_correct {
            AttemptOutcome::Correct
        } else {
            AttemptOutcome::Wrong
        };
        let u = rng.gen::<f64>();
        let decision = match outcome {
            AttemptOutcome::Correct if u < p_stop_c => DecisionAction::Stop,
            AttemptOutcome::Correct => DecisionAction::Resample,
            AttemptOutcome::Wrong if u < p_resample_w => DecisionAction::Resample,
            AttemptOutcome::Wrong => DecisionAction::Stop,
        };
        match decision {
            DecisionAction::Stop => {
                steps.push(Step::new(outcome, DecisionAction::Stop));
                return Trajectory {
                    steps,
                    truncated: false,
                };
            }
            DecisionAction::Resample if steps.len() + 1 == horizon => {
                steps.push(Step::new(outcome, DecisionAction::Stop));
                return Trajectory {
                    steps,
                    truncated: true,
                };
            }
            DecisionAction::Resample => steps.push(Step::new(outcome, DecisionAction::Resample)),
        }
    }
}

/// A group of trajectories rolled out from the same policy, with rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample<T> {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<T>,
}

impl<T: Real> GroupSample<T> {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        let rewards = trajectories.iter().map(crate::objectives::reward).collect();
        Self {
            trajectories,
            rewards,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn mean_reward(&self) -> T {
        if self.rewards.is_empty() {
            return T::zero();
        }
        self.rewards.iter().copied().sum::<T>() / T::from_count(self.rewards.len())
    }
}

/// Rolls out `config.group_size` trajectories; member `i` uses
/// `derive_seed(seed, i)`.
pub fn sample_group<T: Real>(
    params: &PolicyParams<T>,
    config: &WorldConfig<T>,
    seed: u64,
) -> GroupSample<T> {
    let trajectories = (0..config.group_size as u64)
        .map(|i| sample_trajectory(params, config, derive_seed(seed, i)))
        .collect();
    GroupSample::new(trajectories)
}

/// A trajectory with an optional task label, as read from JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrajectory {
    #[serde(flatten)]
    pub trajectory: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

/// Reads one trajectory per non-blank line. Errors name the offending line.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<LabeledTrajectory>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            location: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabeledTrajectory = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use AttemptOutcome::*;
    use DecisionAction::*;

    fn world(max_attempts: usize) -> WorldConfig<f64> {
        WorldConfig {
            max_attempts,
            ..Default::default()
        }
    }

    #[test]
    fn construction_invariants() {
        assert!(Trajectory::new(vec![], false).is_err());
        assert!(Trajectory::new(
            vec![Step::new(Correct, Stop), Step::new(Wrong, Stop)],
            false
        )
        .is_err());
        assert!(Trajectory::new(vec![Step::new(Wrong, Resample)], false).is_err());
        assert!(Trajectory::new(vec![Step::new(Wrong, Resample)], true).is_ok());
        let t = Trajectory::worked_example();
        assert_eq!(t.len(), 2);
        assert!(!t.truncated());
        assert!(t.validate_for(&world(1)).is_err());
        assert!(t.validate_for(&world(2)).is_ok());
    }

    #[test]
    fn saturated_policy_single_step() {
        let p = PolicyParams::new(30.0, 30.0, 0.0).unwrap();
        for seed in 0..20 {
            let t = sample_trajectory(&p, &world(5), seed);
            assert_eq!(t.steps(), &[Step::new(Correct, Stop)]);
            assert!(!t.truncated());
        }
    }

    #[test]
    fn forced_truncation() {
        let p = PolicyParams::new(-30.0, 0.0, 30.0).unwrap();
        let t = sample_trajectory(&p, &world(5), 3);
        assert_eq!(t.len(), 5);
        assert!(t.truncated());
        assert!(t.steps().iter().all(|s| s.outcome == Wrong));
        assert_eq!(t.steps()[4].decision, Stop);
        assert_eq!(t.policy_actions().last().unwrap().decision, Resample);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = PolicyParams::<f64>::worked_example();
        for seed in [0, 1, 42, u64::MAX] {
            assert_eq!(
                sample_trajectory(&p, &world(8), seed),
                sample_trajectory(&p, &world(8), seed)
            );
        }
    }

    #[test]
    fn enumeration_small_cases() {
        let e1 = enumerate_trajectories(&world(1)).unwrap();
        assert_eq!(e1.len(), 4);
        assert_eq!(e1.iter().filter(|e| e.trajectory.truncated()).count(), 2);

        let e2 = enumerate_trajectories(&world(2)).unwrap();
        let depth2: Vec<_> = e2.iter().filter(|e| e.trajectory.len() == 2).collect();
        assert_eq!(
            depth2.iter().filter(|e| !e.trajectory.truncated()).count(),
            4
        );
        assert_eq!(
            depth2.iter().filter(|e| e.trajectory.truncated()).count(),
            4
        );
        let p = PolicyParams::new(0.7, -0.2, 1.9).unwrap();
        let mass: f64 = e2.iter().map(|e| e.probability(&p)).sum();
        assert!((mass - 1.0).abs() < 1e-12);

        let e3 = enumerate_trajectories(&world(3)).unwrap();
        let uniform = PolicyParams::new(0.0, 0.0, 0.0).unwrap();
        for e in e3.iter().filter(|e| e.trajectory.len() == 3) {
            assert!((e.probability(&uniform) - 0.5f64.powi(6)).abs() < 1e-15);
        }
    }

    #[test]
    fn enumeration_bound() {
        assert!(matches!(
            enumerate_trajectories(&world(21)),
            Err(Error::HorizonTooLarge { .. })
        ));
    }

    #[test]
    fn log_prob_reference_values() {
        let p = PolicyParams::<f64>::worked_example();
        let single = Trajectory::from_outcomes(&[Correct]).unwrap();
        let expected = 0.4_f64.exp() / (1.0 + 0.4_f64.exp());
        let stop = 1.0 / (1.0 + (-2.2_f64).exp());
        assert!((log_prob(&single, &p) - (expected.ln() + stop.ln())).abs() < 1e-14);

        let lp = log_prob(&Trajectory::worked_example(), &p);
        let rounded = 0.4013_f64.ln() + 0.8022_f64.ln() + 0.5987_f64.ln() + 0.9002_f64.ln();
        assert!((lp - rounded).abs() < 5e-4);

        let z = PolicyParams::new(0.0, 0.0, 0.0).unwrap();
        assert!((log_prob(&single, &z) - 2.0 * 0.5_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn grad_log_prob_reference_values() {
        let p = PolicyParams::<f64>::worked_example();
        let g = grad_log_prob(&Trajectory::worked_example(), &p);
        assert!((g.sampling.s + 0.1974).abs() < 5e-4);
        assert!((g.decision.d_w - 0.1978).abs() < 5e-4);
        assert_eq!(g.sampling.d_c, 0.0);
        assert_eq!(g.sampling.d_w, 0.0);
        assert_eq!(g.decision.s, 0.0);

        let single = Trajectory::from_outcomes(&[Correct]).unwrap();
        assert_eq!(grad_log_prob(&single, &p).total().d_w, 0.0);
    }

    #[test]
    fn jsonl_wire_format() {
        let line = r#"{"steps":[{"outcome":"W","decision":"RESAMPLE"},{"outcome":"C","decision":"STOP"}],"truncated":false}"#;
        let t: Trajectory = serde_json::from_str(line).unwrap();
        assert_eq!(t, Trajectory::worked_example());
        assert_eq!(t.to_json_line(), line);

        let input = format!("{line}\n\n{{\"steps\":[{{\"outcome\":\"C\",\"decision\":\"STOP\"}}],\"truncated\":false,\"task\":\"3x6\"}}\n");
        let recs = read_jsonl(input.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].task.as_deref(), Some("3x6"));

        let bad = format!("{line}\n{{\"steps\":[]}}\n");
        match read_jsonl(bad.as_bytes()) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

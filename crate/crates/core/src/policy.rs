//! Logit-parameterized two-stage policy.
//!
//! The sampling policy emits a correct answer with probability `σ(θ_s)`. The
//! decision policy stops after a correct answer with probability `σ(θ_{d,C})`
//! and resamples after a wrong answer with probability `σ(θ_{d,W})`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::trajectory::{AttemptOutcome, DecisionAction};

/// Numerically stable logistic function. Non-finite logits are rejected.
pub fn sigmoid<T: Real>(logit: T) -> Result<T> {
    if !logit.is_finite() {
        return Err(invalid(format!("sigmoid of non-finite logit {logit}")));
    }
    Ok(sigmoid_unchecked(logit))
}

pub(crate) fn sigmoid_unchecked<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln σ(x)` without forming `σ(x)` first.
pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    // -softplus(-x)
    let z = -x;
    -(z.max(T::zero()) + (-z.abs()).exp().ln_1p())
}

/// The three learnable logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<T> {
    /// Sampling-correctness logit.
    pub theta_s: T,
    /// STOP-given-correct logit.
    pub theta_d_c: T,
    /// RESAMPLE-given-wrong logit.
    pub theta_d_w: T,
}

impl<T: Real> PolicyParams<T> {
    pub fn new(theta_s: T, theta_d_c: T, theta_d_w: T) -> Result<Self> {
        let p = Self {
            theta_s,
            theta_d_c,
            theta_d_w,
        };
        p.validate()?;
        Ok(p)
    }

    /// Initial policy of the worked arithmetic example: (0.4, 2.2, 1.4).
    pub fn worked_example() -> Self {
        Self {
            theta_s: T::lit(0.4),
            theta_d_c: T::lit(2.2),
            theta_d_w: T::lit(1.4),
        }
    }

    /// Reference policy of the worked arithmetic example: (0.3, 2.0, 1.2).
    pub fn worked_example_reference() -> Self {
        Self {
            theta_s: T::lit(0.3),
            theta_d_c: T::lit(2.0),
            theta_d_w: T::lit(1.2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_s", self.theta_s),
            ("theta_d_c", self.theta_d_c),
            ("theta_d_w", self.theta_d_w),
        ] {
            if !v.is_finite() {
                return Err(invalid(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn action_probs(&self) -> ActionProbs<T> {
        let p_correct = sigmoid_unchecked(self.theta_s);
        let p_stop_given_c = sigmoid_unchecked(self.theta_d_c);
        let p_resample_given_w = sigmoid_unchecked(self.theta_d_w);
        ActionProbs {
            p_correct,
            p_wrong: sigmoid_unchecked(-self.theta_s),
            p_stop_given_c,
            p_resample_given_c: sigmoid_unchecked(-self.theta_d_c),
            p_resample_given_w,
            p_stop_given_w: sigmoid_unchecked(-self.theta_d_w),
        }
    }

    /// `π_sample(outcome)`.
    pub fn sample_prob(&self, outcome: AttemptOutcome) -> T {
        match outcome {
            AttemptOutcome::Correct => sigmoid_unchecked(self.theta_s),
            AttemptOutcome::Wrong => sigmoid_unchecked(-self.theta_s),
        }
    }

    /// `π_d(decision | outcome)`.
    pub fn decision_prob(&self, outcome: AttemptOutcome, decision: DecisionAction) -> T {
        sigmoid_unchecked(self.decision_logit_signed(outcome, decision))
    }

    pub fn log_sample_prob(&self, outcome: AttemptOutcome) -> T {
        match outcome {
            AttemptOutcome::Correct => log_sigmoid(self.theta_s),
            AttemptOutcome::Wrong => log_sigmoid(-self.theta_s),
        }
    }

    pub fn log_decision_prob(&self, outcome: AttemptOutcome, decision: DecisionAction) -> T {
        log_sigmoid(self.decision_logit_signed(outcome, decision))
    }

    /// Logit whose sigmoid is the probability of `decision` after `outcome`.
    fn decision_logit_signed(&self, outcome: AttemptOutcome, decision: DecisionAction) -> T {
        match (outcome, decision) {
            (AttemptOutcome::Correct, DecisionAction::Stop) => self.theta_d_c,
            (AttemptOutcome::Correct, DecisionAction::Resample) => -self.theta_d_c,
            (AttemptOutcome::Wrong, DecisionAction::Resample) => self.theta_d_w,
            (AttemptOutcome::Wrong, DecisionAction::Stop) => -self.theta_d_w,
        }
    }

    /// Moves the logits by `step` (gradient ascent when `step` is a scaled gradient).
    pub fn shifted(&self, step: ParamVec<T>) -> Self {
        Self {
            theta_s: self.theta_s + step.s,
            theta_d_c: self.theta_d_c + step.d_c,
            theta_d_w: self.theta_d_w + step.d_w,
        }
    }

    pub fn as_vec(&self) -> ParamVec<T> {
        ParamVec::new(self.theta_s, self.theta_d_c, self.theta_d_w)
    }
}

impl<T: Real> From<ParamVec<T>> for PolicyParams<T> {
    fn from(v: ParamVec<T>) -> Self {
        Self {
            theta_s: v.s,
            theta_d_c: v.d_c,
            theta_d_w: v.d_w,
        }
    }
}

/// All six conditional probabilities of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionProbs<T> {
    pub p_correct: T,
    pub p_wrong: T,
    pub p_stop_given_c: T,
    pub p_resample_given_w: T,
    pub p_resample_given_c: T,
    pub p_stop_given_w: T,
}

/// `action_probs` with input validation.
pub fn action_probs<T: Real>(params: &PolicyParams<T>) -> Result<ActionProbs<T>> {
    params.validate()?;
    Ok(params.action_probs())
}

/// A vector over the three logits, in the order `(θ_s, θ_{d,C}, θ_{d,W})`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVec<T> {
    pub s: T,
    pub d_c: T,
    pub d_w: T,
}

impl<T: Real> ParamVec<T> {
    pub fn new(s: T, d_c: T, d_w: T) -> Self {
        Self { s, d_c, d_w }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn sampling_only(s: T) -> Self {
        Self::new(s, T::zero(), T::zero())
    }

    pub fn decision_only(d_c: T, d_w: T) -> Self {
        Self::new(T::zero(), d_c, d_w)
    }

    pub fn is_finite(&self) -> bool {
        self.s.is_finite() && self.d_c.is_finite() && self.d_w.is_finite()
    }

    pub fn to_array(self) -> [T; 3] {
        [self.s, self.d_c, self.d_w]
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        (self.s - other.s)
            .abs()
            .max((self.d_c - other.d_c).abs())
            .max((self.d_w - other.d_w).abs())
    }
}

impl<T: Real> Add for ParamVec<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.s + o.s, self.d_c + o.d_c, self.d_w + o.d_w)
    }
}

impl<T: Real> AddAssign for ParamVec<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for ParamVec<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.s - o.s, self.d_c - o.d_c, self.d_w - o.d_w)
    }
}

impl<T: Real> Neg for ParamVec<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.s, -self.d_c, -self.d_w)
    }
}

impl<T: Real> Mul<T> for ParamVec<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        Self::new(self.s * k, self.d_c * k, self.d_w * k)
    }
}

impl<T: Real> std::iter::Sum for ParamVec<T> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

/// `∂ log π_sample(outcome) / ∂θ`. Only `θ_s` is touched.
pub fn sampling_score<T: Real>(params: &PolicyParams<T>, outcome: AttemptOutcome) -> ParamVec<T> {
    let s = match outcome {
        AttemptOutcome::Correct => sigmoid_unchecked(-params.theta_s),
        AttemptOutcome::Wrong => -sigmoid_unchecked(params.theta_s),
    };
    ParamVec::sampling_only(s)
}

/// `∂ log π_d(decision | outcome) / ∂θ`. Only the logit conditioned on
/// `outcome` is touched.
pub fn decision_score<T: Real>(
    params: &PolicyParams<T>,
    outcome: AttemptOutcome,
    decision: DecisionAction,
) -> ParamVec<T> {
    match (outcome, decision) {
        (AttemptOutcome::Correct, DecisionAction::Stop) => {
            ParamVec::decision_only(sigmoid_unchecked(-params.theta_d_c), T::zero())
        }
        (AttemptOutcome::Correct, DecisionAction::Resample) => {
            ParamVec::decision_only(-sigmoid_unchecked(params.theta_d_c), T::zero())
        }
        (AttemptOutcome::Wrong, DecisionAction::Resample) => {
            ParamVec::decision_only(T::zero(), sigmoid_unchecked(-params.theta_d_w))
        }
        (AttemptOutcome::Wrong, DecisionAction::Stop) => {
            ParamVec::decision_only(T::zero(), -sigmoid_unchecked(params.theta_d_w))
        }
    }
}

/// Score of one (attempt, decision) step: sampling score plus decision score.
pub fn score_components<T: Real>(
    params: &PolicyParams<T>,
    outcome: AttemptOutcome,
    decision: DecisionAction,
) -> ParamVec<T> {
    sampling_score(params, outcome) + decision_score(params, outcome, decision)
}

/// Sign applied to `log(π_θ/π_ref)` when forming immediate KL penalties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlSignConvention {
    /// `d = log(π_θ/π_ref)`: Q-values measure the divergence itself.
    Section3,
    /// `d = -log(π_θ/π_ref)`: Q-values measure the negated divergence, so the
    /// KL track is already an ascent direction for the regularized objective.
    #[default]
    AppendixC,
}

impl KlSignConvention {
    pub fn sign<T: Real>(self) -> T {
        match self {
            KlSignConvention::Section3 => T::one(),
            KlSignConvention::AppendixC => -T::one(),
        }
    }
}

impl std::str::FromStr for KlSignConvention {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "section3" => Ok(Self::Section3),
            "appendixc" => Ok(Self::AppendixC),
            other => Err(invalid(format!(
                "unknown KL sign convention {other:?} (expected section3 or appendixc)"
            ))),
        }
    }
}

/// Environment of the two-stage process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct WorldConfig<T> {
    /// Tokens in a correct attempt.
    pub len_correct: usize,
    /// Tokens in a wrong attempt.
    pub len_wrong: usize,
    pub gamma: T,
    pub max_attempts: usize,
    pub kl_weight: T,
    pub group_size: usize,
    pub kl_sign_convention: KlSignConvention,
}

impl<T: Real> Default for WorldConfig<T> {
    fn default() -> Self {
        Self {
            len_correct: 8,
            len_wrong: 8,
            gamma: T::one(),
            max_attempts: 8,
            kl_weight: T::one(),
            group_size: 8,
            kl_sign_convention: KlSignConvention::AppendixC,
        }
    }
}

impl<T: Real> WorldConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.len_correct < 1 || self.len_wrong < 1 {
            return Err(invalid("attempt lengths must be at least 1"));
        }
        if self.max_attempts < 1 {
            return Err(invalid("max_attempts must be at least 1"));
        }
        if self.group_size < 2 {
            return Err(invalid("group_size must be at least 2"));
        }
        if !(self.gamma > T::zero() && self.gamma <= T::one()) {
            return Err(invalid(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.kl_weight >= T::zero() && self.kl_weight.is_finite()) {
            return Err(invalid(format!(
                "kl_weight must be finite and nonnegative, got {}",
                self.kl_weight
            )));
        }
        Ok(())
    }

    /// Token count of an attempt with the given outcome.
    pub fn len_of(&self, outcome: AttemptOutcome) -> usize {
        match outcome {
            AttemptOutcome::Correct => self.len_correct,
            AttemptOutcome::Wrong => self.len_wrong,
        }
    }

    /// Same world with both attempt lengths set to `len`.
    pub fn with_lengths(mut self, len: usize) -> Self {
        self.len_correct = len;
        self.len_wrong = len;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use AttemptOutcome::*;
    use DecisionAction::*;

    #[test]
    fn sigmoid_reference_points() {
        assert_eq!(sigmoid(0.0_f64).unwrap(), 0.5);
        assert!((sigmoid(0.4_f64).unwrap() - 0.5987).abs() < 5e-5);
        assert!((sigmoid(2.2_f64).unwrap() - 0.9002).abs() < 5e-5);
        assert!(sigmoid(f64::NAN).is_err());
        assert!(sigmoid(f64::INFINITY).is_err());
        // no overflow in the tails
        assert!(sigmoid(-800.0_f64).unwrap() >= 0.0);
        assert_eq!(sigmoid(800.0_f64).unwrap(), 1.0);
    }

    #[test]
    fn action_probs_match_worked_example() {
        let p = PolicyParams::<f64>::worked_example().action_probs();
        assert!((p.p_correct - 0.5987).abs() < 5e-5);
        assert!((p.p_stop_given_c - 0.9002).abs() < 5e-5);
        assert!((p.p_resample_given_w - 0.8022).abs() < 5e-5);

        let r = PolicyParams::<f64>::worked_example_reference().action_probs();
        assert!((r.p_correct - 0.5744).abs() < 5e-5);
        assert!((r.p_stop_given_c - 0.8808).abs() < 5e-5);
        assert!((r.p_resample_given_w - 0.7685).abs() < 5e-5);
    }

    #[test]
    fn saturated_logits() {
        let p = PolicyParams::new(30.0_f64, 30.0, 30.0)
            .unwrap()
            .action_probs();
        assert!((p.p_correct - 1.0).abs() < 1e-12);
        assert!(p.p_wrong < 1e-12);
        assert!(p.p_resample_given_c < 1e-12);
        assert!(p.p_stop_given_w < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(PolicyParams::new(f64::NAN, 0.0, 0.0).is_err());
        assert!(action_probs(&PolicyParams {
            theta_s: 0.0,
            theta_d_c: f64::INFINITY,
            theta_d_w: 0.0
        })
        .is_err());
    }

    #[test]
    fn scores_at_worked_example() {
        let p = PolicyParams::<f64>::worked_example();
        assert!((sampling_score(&p, Wrong).s + 0.5987).abs() < 5e-5);
        assert!((decision_score(&p, Correct, Stop).d_c - 0.0998).abs() < 5e-5);
        let z = PolicyParams::new(0.0_f64, 0.0, 0.0).unwrap();
        assert_eq!(sampling_score(&z, Correct).s, 0.5);
    }

    #[test]
    fn exactly_one_decision_logit_scored() {
        let p = PolicyParams::new(0.3_f64, -1.0, 0.7).unwrap();
        for o in [Correct, Wrong] {
            for d in [Stop, Resample] {
                let g = decision_score(&p, o, d);
                assert_eq!(g.s, 0.0);
                let nonzero = [g.d_c, g.d_w].iter().filter(|v| **v != 0.0).count();
                assert_eq!(nonzero, 1);
            }
        }
    }

    #[test]
    fn log_probs_agree_with_probs() {
        let p = PolicyParams::new(-1.3_f64, 0.25, 4.0).unwrap();
        for o in [Correct, Wrong] {
            assert!((p.log_sample_prob(o) - p.sample_prob(o).ln()).abs() < 1e-14);
            for d in [Stop, Resample] {
                assert!((p.log_decision_prob(o, d) - p.decision_prob(o, d).ln()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn world_validation() {
        let mut w = WorldConfig::<f64>::default();
        assert!(w.validate().is_ok());
        w.group_size = 1;
        assert!(w.validate().is_err());
        let w = WorldConfig::<f64> {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn convention_parsing() {
        assert_eq!(
            "appendixc".parse::<KlSignConvention>().unwrap(),
            KlSignConvention::AppendixC
        );
        assert_eq!(
            "section3".parse::<KlSignConvention>().unwrap(),
            KlSignConvention::Section3
        );
        assert_eq!(
            "appendix_c".parse::<KlSignConvention>().unwrap(),
            KlSignConvention::AppendixC
        );
        assert!("x".parse::<KlSignConvention>().is_err());
    }
}

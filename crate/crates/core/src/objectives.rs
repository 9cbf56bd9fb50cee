//! Reward, group-relative advantages and the per-track objective gradients.
//!
//! Every gradient is reported as an ascent direction over the three logits.
//! The reward and KL tracks are on-policy estimators built from the score of
//! each action times its Q-value; the SFT and DFT tracks treat the trajectory
//! as a demonstration.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::policy::{
    decision_score, sampling_score, KlSignConvention, ParamVec, PolicyParams, WorldConfig,
};
use crate::scalar::Real;
use crate::trajectory::{grad_log_prob, AttemptOutcome, DecisionAction, GroupSample, Trajectory};

/// Groups whose reward spread is at or below this get zero advantages.
pub const EPSILON_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Reward,
    Kl,
    Sft,
    Dft,
    /// Reward plus weighted KL.
    Net,
}

impl Track {
    pub fn label(self) -> &'static str {
        match self {
            Track::Reward => "reward",
            Track::Kl => "kl",
            Track::Sft => "sft",
            Track::Dft => "dft",
            Track::Net => "net",
        }
    }
}

impl std::fmt::Display for Track {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveGradient<T> {
    pub d_theta_s: T,
    pub d_theta_d_c: T,
    pub d_theta_d_w: T,
    pub track: Track,
}

impl<T: Real> ObjectiveGradient<T> {
    pub fn new(track: Track, v: ParamVec<T>) -> Self {
        Self {
            d_theta_s: v.s,
            d_theta_d_c: v.d_c,
            d_theta_d_w: v.d_w,
            track,
        }
    }

    pub fn zero(track: Track) -> Self {
        Self::new(track, ParamVec::zero())
    }

    pub fn as_vec(&self) -> ParamVec<T> {
        ParamVec::new(self.d_theta_s, self.d_theta_d_c, self.d_theta_d_w)
    }

    pub fn is_finite(&self) -> bool {
        self.as_vec().is_finite()
    }
}

/// Indicator reward on the final attempt. A truncated trajectory is scored by
/// its last attempt as well.
pub fn reward<T: Real>(traj: &Trajectory) -> T {
    match traj.final_outcome() {
        AttemptOutcome::Correct => T::one(),
        AttemptOutcome::Wrong => T::zero(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet<T> {
    pub advantages: Vec<T>,
    pub group_mean: T,
    /// Population standard deviation of the rewards.
    pub group_std: T,
}

/// Group-relative advantage estimation: `(R_i - mean) / std`.
pub fn grae<T: Real>(rewards: &[T]) -> Result<AdvantageSet<T>> {
    if rewards.len() < 2 {
        return Err(invalid(format!(
            "advantage estimation needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(invalid(format!("non-finite reward {r}")));
    }
    let n = T::from_count(rewards.len());
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    let advantages = if std > T::lit(EPSILON_STD) {
        rewards.iter().map(|&r| (r - mean) / std).collect()
    } else {
        vec![T::zero(); rewards.len()]
    };
    Ok(AdvantageSet {
        advantages,
        group_mean: mean,
        group_std: std,
    })
}

/// `A · ∇ log P(τ)` with each action's score additionally discounted by the
/// number of tokens between the action and the end of the trajectory. The
/// sampling action of attempt `k` sees the tokens of attempts `k..=T`; its
/// decision comes right after attempt `k` and sees attempts `k+1..=T`.
pub fn weighted_score<T: Real>(
    traj: &Trajectory,
    advantage: T,
    params: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> ParamVec<T> {
    if config.gamma == T::one() {
        return grad_log_prob(traj, params).total() * advantage;
    }
    let lens: Vec<usize> = traj
        .steps()
        .iter()
        .map(|s| config.len_of(s.outcome))
        .collect();
    let mut remaining: usize = lens.iter().sum();
    let mut acc = ParamVec::zero();
    for (s, len) in traj.policy_actions().zip(&lens) {
        let sample_discount = config.gamma.powi(remaining as i32);
        remaining -= len;
        let decision_discount = config.gamma.powi(remaining as i32);
        acc += sampling_score(params, s.outcome) * sample_discount;
        acc += decision_score(params, s.outcome, s.decision) * decision_discount;
    }
    acc * advantage
}

/// Mean of advantage-weighted scores over explicitly supplied
/// (trajectory, advantage) pairs.
pub fn advantage_weighted_gradient<T: Real>(
    items: &[(Trajectory, T)],
    params: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> ObjectiveGradient<T> {
    if items.is_empty() {
        return ObjectiveGradient::zero(Track::Reward);
    }
    let sum: ParamVec<T> = items
        .iter()
        .map(|(t, a)| weighted_score(t, *a, params, config))
        .sum();
    ObjectiveGradient::new(Track::Reward, sum * (T::one() / T::from_count(items.len())))
}

/// On-policy surrogate-reward gradient with GRAE advantages; the importance
/// ratio is identically 1.
pub fn surrogate_gradient<T: Real>(
    group: &GroupSample<T>,
    params: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> Result<ObjectiveGradient<T>> {
    if group.trajectories.len() != group.rewards.len() {
        return Err(invalid("group has mismatched trajectory and reward counts"));
    }
    let adv = grae(&group.rewards)?;
    let items: Vec<(Trajectory, T)> = group
        .trajectories
        .iter()
        .cloned()
        .zip(adv.advantages)
        .collect();
    Ok(advantage_weighted_gradient(&items, params, config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Sample(AttemptOutcome),
    Decide(DecisionAction),
}

impl ActionKind {
    pub fn label(self) -> &'static str {
        match self {
            ActionKind::Sample(AttemptOutcome::Correct) => "Sample C",
            ActionKind::Sample(AttemptOutcome::Wrong) => "Sample W",
            ActionKind::Decide(DecisionAction::Stop) => "STOP",
            ActionKind::Decide(DecisionAction::Resample) => "RESAMPLE",
        }
    }
}

/// One row of a per-action Q table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QEntry<T> {
    /// 1-based attempt index.
    pub step: usize,
    /// Outcome of the attempt this row belongs to.
    pub outcome: AttemptOutcome,
    pub action: ActionKind,
    /// Immediate term of the action.
    pub immediate: T,
    /// Value carried in from later actions.
    pub future: T,
    pub q: T,
    /// `∇ log π` of the action.
    pub score: ParamVec<T>,
}

impl<T: Real> QEntry<T> {
    pub fn contribution(&self) -> ParamVec<T> {
        self.score * self.q
    }

    /// Name of the logit this action's score touches.
    pub fn parameter(&self) -> &'static str {
        match (self.action, self.outcome) {
            (ActionKind::Sample(_), _) => "theta_s",
            (ActionKind::Decide(_), AttemptOutcome::Correct) => "theta_d_c",
            (ActionKind::Decide(_), AttemptOutcome::Wrong) => "theta_d_w",
        }
    }
}

/// Immediate KL penalties `(d_sample, d_decision)` for each attempt.
pub fn kl_penalties<T: Real>(
    traj: &Trajectory,
    params: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> Vec<(T, T)> {
    let sign: T = config.kl_sign_convention.sign();
    traj.policy_actions()
        .map(|s| {
            let len = T::from_count(config.len_of(s.outcome));
            let sample = len
                * sign
                * (params.log_sample_prob(s.outcome) - reference.log_sample_prob(s.outcome));
            let decision = sign
                * (params.log_decision_prob(s.outcome, s.decision)
                    - reference.log_decision_prob(s.outcome, s.decision));
            (sample, decision)
        })
        .collect()
}

/// Token-level KL Q-values via the backward recursion
/// `Q_sample(k) = d_sample(k) + γ Q_d(k)`, `Q_d(k) = d_decision(k) + γ Q_sample(k+1)`.
/// Rows follow trajectory order: attempt 1, decision 1, attempt 2, ...
pub fn kl_q_values<T: Real>(
    traj: &Trajectory,
    params: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> Vec<QEntry<T>> {
    let d = kl_penalties(traj, params, reference, config);
    let actions: Vec<_> = traj.policy_actions().collect();
    let mut rows = vec![None; 2 * actions.len()];
    let mut next_q = T::zero();
    for k in (0..actions.len()).rev() {
        let s = actions[k];
        let (d_sample, d_decision) = d[k];
        let future = config.gamma * next_q;
        let q_d = d_decision + future;
        rows[2 * k + 1] = Some(QEntry {
            step: k + 1,
            outcome: s.outcome,
            action: ActionKind::Decide(s.decision),
            immediate: d_decision,
            future,
            q: q_d,
            score: decision_score(params, s.outcome, s.decision),
        });
        let future = config.gamma * q_d;
        let q_s = d_sample + future;
        rows[2 * k] = Some(QEntry {
            step: k + 1,
            outcome: s.outcome,
            action: ActionKind::Sample(s.outcome),
            immediate: d_sample,
            future,
            q: q_s,
            score: sampling_score(params, s.outcome),
        });
        next_q = q_s;
    }
    rows.into_iter().map(|r| r.expect("row filled")).collect()
}

fn gradient_from_q<T: Real>(track: Track, rows: &[QEntry<T>]) -> ObjectiveGradient<T> {
    ObjectiveGradient::new(track, rows.iter().map(QEntry::contribution).sum())
}

/// `Σ_t ∇ log π_t · Q_t` over the KL Q table.
pub fn kl_gradient<T: Real>(
    traj: &Trajectory,
    params: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> ObjectiveGradient<T> {
    gradient_from_q(Track::Kl, &kl_q_values(traj, params, reference, config))
}

/// Reward, KL and net tracks for one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedGradient<T> {
    pub reward: ObjectiveGradient<T>,
    pub kl: ObjectiveGradient<T>,
    pub net: ObjectiveGradient<T>,
}

/// Net ascent direction `reward + w · drag`, where the drag is the KL track
/// signed so that it points toward the reference under either convention.
pub fn combine<T: Real>(
    reward: ObjectiveGradient<T>,
    kl: ObjectiveGradient<T>,
    config: &WorldConfig<T>,
) -> CombinedGradient<T> {
    let drag_sign = match config.kl_sign_convention {
        KlSignConvention::AppendixC => T::one(),
        KlSignConvention::Section3 => -T::one(),
    };
    let net = reward.as_vec() + kl.as_vec() * (config.kl_weight * drag_sign);
    CombinedGradient {
        reward,
        kl,
        net: ObjectiveGradient::new(Track::Net, net),
    }
}

/// Group-mean KL track.
pub fn group_kl_gradient<T: Real>(
    group: &GroupSample<T>,
    params: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> ObjectiveGradient<T> {
    if group.is_empty() {
        return ObjectiveGradient::zero(Track::Kl);
    }
    let sum: ParamVec<T> = group
        .trajectories
        .iter()
        .map(|t| kl_gradient(t, params, reference, config).as_vec())
        .sum();
    ObjectiveGradient::new(Track::Kl, sum * (T::one() / T::from_count(group.len())))
}

pub fn combined_gradient<T: Real>(
    group: &GroupSample<T>,
    params: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> Result<CombinedGradient<T>> {
    let reward = surrogate_gradient(group, params, config)?;
    let kl = group_kl_gradient(group, params, reference, config);
    Ok(combine(reward, kl, config))
}

/// Implicit Q-values of maximum-likelihood training, where each token's
/// implicit reward is the reciprocal of its probability. All tokens of an
/// attempt share the attempt-level probability. Sampling rows report the Q of
/// the attempt's first token; decision rows exclude their own reward.
pub fn sft_q_values<T: Real>(
    traj: &Trajectory,
    params: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> Vec<QEntry<T>> {
    let per_action = |s: crate::trajectory::Step| {
        (
            T::one() / params.sample_prob(s.outcome),
            T::one() / params.decision_prob(s.outcome, s.decision),
        )
    };
    demonstration_q_values(traj, params, config, per_action)
}

/// Implicit Q-values of probability-rescaled fine-tuning: every token earns
/// the constant `c`, so the values depend only on lengths.
pub fn dft_q_values<T: Real>(traj: &Trajectory, config: &WorldConfig<T>, c: T) -> Vec<QEntry<T>> {
    // The score column needs some policy; DFT rows report a zero score.
    let zero = PolicyParams {
        theta_s: T::zero(),
        theta_d_c: T::zero(),
        theta_d_w: T::zero(),
    };
    let mut rows = demonstration_q_values(traj, &zero, config, |_| (c, c));
    for r in &mut rows {
        r.score = ParamVec::zero();
    }
    rows
}

/// Shared backward pass for the demonstration tracks. `rewards` maps a step
/// to (per-token reward of the attempt, reward of the decision).
fn demonstration_q_values<T: Real, F>(
    traj: &Trajectory,
    params: &PolicyParams<T>,
    config: &WorldConfig<T>,
    rewards: F,
) -> Vec<QEntry<T>>
where
    F: Fn(crate::trajectory::Step) -> (T, T),
{
    let actions: Vec<_> = traj.policy_actions().collect();
    let mut rows = vec![None; 2 * actions.len()];
    // Sum of all rewards strictly after the current decision.
    let mut after = T::zero();
    for k in (0..actions.len()).rev() {
        let s = actions[k];
        let (token_r, decision_r) = rewards(s);
        let len = config.len_of(s.outcome);
        rows[2 * k + 1] = Some(QEntry {
            step: k + 1,
            outcome: s.outcome,
            action: ActionKind::Decide(s.decision),
            immediate: T::zero(),
            future: after,
            q: after,
            score: decision_score(params, s.outcome, s.decision),
        });
        let within = T::from_count(len - 1) * token_r + decision_r;
        rows[2 * k] = Some(QEntry {
            step: k + 1,
            outcome: s.outcome,
            action: ActionKind::Sample(s.outcome),
            immediate: within,
            future: after,
            q: within + after,
            score: sampling_score(params, s.outcome),
        });
        after = after + T::from_count(len) * token_r + decision_r;
    }
    rows.into_iter().map(|r| r.expect("row filled")).collect()
}

/// Q of token `j` (1-based) of attempt `step` from a demonstration Q table.
pub fn sample_token_q<T: Real>(
    rows: &[QEntry<T>],
    traj: &Trajectory,
    config: &WorldConfig<T>,
    step: usize,
    j: usize,
    token_reward: T,
) -> Result<T> {
    let s = traj
        .steps()
        .get(step.wrapping_sub(1))
        .ok_or_else(|| invalid(format!("no attempt {step}")))?;
    let len = config.len_of(s.outcome);
    if j == 0 || j > len {
        return Err(invalid(format!("token index {j} outside 1..={len}")));
    }
    Ok(rows[2 * (step - 1)].q - T::from_count(j - 1) * token_reward)
}

/// Maximum-likelihood gradient of a demonstration: each attempt's score
/// counted once per token, plus each decision's score.
pub fn sft_gradient<T: Real>(
    traj: &Trajectory,
    params: &PolicyParams<T>,
    config: &WorldConfig<T>,
) -> ObjectiveGradient<T> {
    let g = traj
        .policy_actions()
        .map(|s| {
            sampling_score(params, s.outcome) * T::from_count(config.len_of(s.outcome))
                + decision_score(params, s.outcome, s.decision)
        })
        .sum();
    ObjectiveGradient::new(Track::Sft, g)
}

/// Probability-rescaled likelihood gradient, `c · Σ ∇π`.
pub fn dft_gradient<T: Real>(
    traj: &Trajectory,
    params: &PolicyParams<T>,
    config: &WorldConfig<T>,
    c: T,
) -> ObjectiveGradient<T> {
    let g: ParamVec<T> = traj
        .policy_actions()
        .map(|s| {
            let len = T::from_count(config.len_of(s.outcome));
            sampling_score(params, s.outcome) * (len * params.sample_prob(s.outcome))
                + decision_score(params, s.outcome, s.decision)
                    * params.decision_prob(s.outcome, s.decision)
        })
        .sum();
    ObjectiveGradient::new(Track::Dft, g * c)
}

//! GRPO-style training of the three-logit policy.
//!
//! Each step rolls out a group on-policy, standardizes rewards within the
//! group, forms the reward, KL and net gradients, and takes a plain ascent
//! step on the net gradient. The reference policy is replaced by the current
//! one every `ref_refresh_interval` steps, which produces a sawtooth in the KL
//! track.

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributionReport, DEFAULT_BALANCE_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::objectives::{combined_gradient, ObjectiveGradient};
use crate::policy::{ActionProbs, ParamVec, PolicyParams, WorldConfig};
use crate::rng::derive_seed;
use crate::scalar::Real;
use crate::trajectory::sample_group;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct TrainConfig<T> {
    pub steps: usize,
    pub learning_rate: T,
    /// Overrides `world.group_size`.
    pub group_size: usize,
    /// Overrides `world.kl_weight`.
    pub kl_weight: T,
    pub ref_refresh_interval: usize,
    pub seed: u64,
    pub world: WorldConfig<T>,
    pub init: PolicyParams<T>,
    /// Initial reference; the initial policy when absent.
    pub reference: Option<PolicyParams<T>>,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: T::lit(0.02),
            group_size: 16,
            kl_weight: T::lit(1.0),
            ref_refresh_interval: 50,
            seed: 0,
            world: WorldConfig::default(),
            init: PolicyParams::worked_example(),
            reference: Some(PolicyParams::worked_example_reference()),
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(invalid("steps must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= T::zero()) {
            return Err(invalid(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.ref_refresh_interval < 1 {
            return Err(invalid("ref_refresh_interval must be at least 1"));
        }
        self.effective_world().validate()?;
        self.init.validate()?;
        if let Some(r) = &self.reference {
            r.validate()?;
        }
        Ok(())
    }

    /// World with the trainer's group size and KL weight applied.
    pub fn effective_world(&self) -> WorldConfig<T> {
        WorldConfig {
            group_size: self.group_size,
            kl_weight: self.kl_weight,
            ..self.world
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord<T> {
    /// 1-based.
    pub step: usize,
    /// Parameters the group was sampled from.
    pub params: PolicyParams<T>,
    pub reference: PolicyParams<T>,
    pub probs: ActionProbs<T>,
    pub reward: ObjectiveGradient<T>,
    pub kl: ObjectiveGradient<T>,
    pub net: ObjectiveGradient<T>,
    pub reward_attribution: AttributionReport<T>,
    pub kl_attribution: AttributionReport<T>,
    pub mean_reward: T,
}

/// Column order of the CSV trace.
pub const TRACE_COLUMNS: [&str; 27] = [
    "step",
    "theta_s",
    "theta_d_c",
    "theta_d_w",
    "ref_theta_s",
    "ref_theta_d_c",
    "ref_theta_d_w",
    "p_correct",
    "p_stop_given_c",
    "p_resample_given_w",
    "reward_d_theta_s",
    "reward_d_theta_d_c",
    "reward_d_theta_d_w",
    "kl_d_theta_s",
    "kl_d_theta_d_c",
    "kl_d_theta_d_w",
    "net_d_theta_s",
    "net_d_theta_d_c",
    "net_d_theta_d_w",
    "reward_sampling_magnitude",
    "reward_decision_magnitude",
    "reward_ratio",
    "kl_sampling_magnitude",
    "kl_decision_magnitude",
    "kl_ratio",
    "kl_magnitude",
    "mean_reward",
];

impl<T: Real> StepRecord<T> {
    /// Euclidean norm of the KL-track gradient.
    pub fn kl_magnitude(&self) -> T {
        let v = self.kl.as_vec();
        (v.s * v.s + v.d_c * v.d_c + v.d_w * v.d_w).sqrt()
    }

    /// Values in [`TRACE_COLUMNS`] order.
    pub fn csv_fields(&self) -> Vec<String> {
        let mut f = vec![self.step.to_string()];
        let nums = [
            self.params.theta_s,
            self.params.theta_d_c,
            self.params.theta_d_w,
            self.reference.theta_s,
            self.reference.theta_d_c,
            self.reference.theta_d_w,
            self.probs.p_correct,
            self.probs.p_stop_given_c,
            self.probs.p_resample_given_w,
            self.reward.d_theta_s,
            self.reward.d_theta_d_c,
            self.reward.d_theta_d_w,
            self.kl.d_theta_s,
            self.kl.d_theta_d_c,
            self.kl.d_theta_d_w,
            self.net.d_theta_s,
            self.net.d_theta_d_c,
            self.net.d_theta_d_w,
            self.reward_attribution.sampling_magnitude,
            self.reward_attribution.decision_magnitude,
            self.reward_attribution.ratio,
            self.kl_attribution.sampling_magnitude,
            self.kl_attribution.decision_magnitude,
            self.kl_attribution.ratio,
            self.kl_magnitude(),
            self.mean_reward,
        ];
        f.extend(nums.iter().map(|v| v.to_string()));
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace<T> {
    pub records: Vec<StepRecord<T>>,
    /// Parameters after the last update.
    pub final_params: PolicyParams<T>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError<T: Real> {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("parameters became non-finite after step {step}")]
    Diverged {
        step: usize,
        /// Record of the last step whose parameters were finite.
        last_finite: Box<StepRecord<T>>,
    },
}

pub fn train<T: Real>(
    cfg: &TrainConfig<T>,
) -> std::result::Result<TrainingTrace<T>, TrainError<T>> {
    cfg.validate()?;
    let world = cfg.effective_world();
    let mut params = cfg.init;
    let mut reference = cfg.reference.unwrap_or(cfg.init);
    let threshold = T::lit(DEFAULT_BALANCE_THRESHOLD);
    let mut records = Vec::with_capacity(cfg.steps);

    for t in 0..cfg.steps {
        let group = sample_group(&params, &world, derive_seed(cfg.seed, t as u64));
        let g = combined_gradient(&group, &params, &reference, &world)?;
        let record = StepRecord {
            step: t + 1,
            params,
            reference,
            probs: params.action_probs(),
            reward_attribution: attribute(&g.reward, threshold)?,
            kl_attribution: attribute(&g.kl, threshold)?,
            reward: g.reward,
            kl: g.kl,
            net: g.net,
            mean_reward: group.mean_reward(),
        };
        let next = params.shifted(g.net.as_vec() * cfg.learning_rate);
        if !next.is_finite() {
            return Err(TrainError::Diverged {
                step: t + 1,
                last_finite: Box::new(record),
            });
        }
        records.push(record);
        params = next;
        if (t + 1) % cfg.ref_refresh_interval == 0 {
            reference = params;
        }
    }
    Ok(TrainingTrace {
        records,
        final_params: params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary<T> {
    pub steps: usize,
    pub final_params: PolicyParams<T>,
    pub final_probs: ActionProbs<T>,
    /// Mean of the finite per-step ratios.
    pub mean_reward_ratio: T,
    pub mean_kl_ratio: T,
    /// Ratio of mean sampling magnitude to mean decision magnitude.
    pub pooled_reward_ratio: T,
    pub pooled_kl_ratio: T,
    pub mean_group_reward: T,
    pub cumulative_net: ParamVec<T>,
    /// Per-logit sums of `|KL gradient|`.
    pub cumulative_kl_magnitude: ParamVec<T>,
    /// Dominant period of the KL magnitude series, if one is detectable.
    pub detected_period: Option<usize>,
}

pub fn summarize<T: Real>(trace: &TrainingTrace<T>) -> Result<TrainSummary<T>> {
    let recs = &trace.records;
    if recs.is_empty() {
        return Err(invalid("cannot summarize an empty trace"));
    }
    let n = T::from_count(recs.len());
    let finite_mean = |f: &dyn Fn(&StepRecord<T>) -> T| {
        let vals: Vec<T> = recs.iter().map(f).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            T::nan()
        } else {
            vals.iter().copied().sum::<T>() / T::from_count(vals.len())
        }
    };
    let pooled = |s: &dyn Fn(&StepRecord<T>) -> T, d: &dyn Fn(&StepRecord<T>) -> T| {
        let num: T = recs.iter().map(s).sum();
        let den: T = recs.iter().map(d).sum();
        if den == T::zero() {
            T::infinity()
        } else {
            num / den
        }
    };
    let kl_series: Vec<f64> = recs.iter().map(|r| r.kl_magnitude().as_f64()).collect();
    Ok(TrainSummary {
        steps: recs.len(),
        final_params: trace.final_params,
        final_probs: trace.final_params.action_probs(),
        mean_reward_ratio: finite_mean(&|r| r.reward_attribution.ratio),
        mean_kl_ratio: finite_mean(&|r| r.kl_attribution.ratio),
        pooled_reward_ratio: pooled(&|r| r.reward_attribution.sampling_magnitude, &|r| {
            r.reward_attribution.decision_magnitude
        }),
        pooled_kl_ratio: pooled(&|r| r.kl_attribution.sampling_magnitude, &|r| {
            r.kl_attribution.decision_magnitude
        }),
        mean_group_reward: recs.iter().map(|r| r.mean_reward).sum::<T>() / n,
        cumulative_net: recs.iter().map(|r| r.net.as_vec()).sum(),
        cumulative_kl_magnitude: recs
            .iter()
            .map(|r| {
                let v = r.kl.as_vec();
                ParamVec::new(v.s.abs(), v.d_c.abs(), v.d_w.abs())
            })
            .sum(),
        detected_period: dominant_period(&kl_series),
    })
}

/// Normalized autocorrelation for lags `0..=max_lag`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Vec<f64> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n.max(1) as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let denom: f64 = centered.iter().map(|x| x * x).sum();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|lag| {
            if denom == 0.0 {
                return 0.0;
            }
            centered[..n - lag]
                .iter()
                .zip(&centered[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / denom
        })
        .collect()
}

/// Subtracts a centered moving average of half-width `half`.
fn detrend(series: &[f64], half: usize) -> Vec<f64> {
    let n = series.len();
    let mut prefix = vec![0.0; n + 1];
    for (i, x) in series.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            series[i] - (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Dominant period of a series from its autocorrelation.
///
/// The slow trend is removed first with a moving average spanning a tenth of
/// the series. Past the first non-positive lag, the result is the shortest
/// local maximum reaching 60% of the highest peak up to half the length.
pub fn dominant_period(series: &[f64]) -> Option<usize> {
    if series.len() < 8 {
        return None;
    }
    let detrended = detrend(series, (series.len() / 20).max(1));
    let acf = autocorrelation(&detrended, series.len() / 2);
    let start = acf.iter().position(|&v| v <= 0.0)?;
    let best = acf[start..]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if best <= 0.0 {
        return None;
    }
    (start.max(1)..acf.len()).find(|&lag| {
        let left = acf[lag - 1];
        let right = acf.get(lag + 1).copied().unwrap_or(f64::NEG_INFINITY);
        acf[lag] >= 0.6 * best && acf[lag] >= left && acf[lag] >= right
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(steps: usize) -> TrainConfig<f64> {
        TrainConfig {
            steps,
            ..Default::default()
        }
    }

    #[test]
    fn record_count_and_order() {
        let tr = train(&short(30)).unwrap();
        assert_eq!(tr.records.len(), 30);
        assert!(tr.records.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(TRACE_COLUMNS.len(), tr.records[0].csv_fields().len());
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..short(40)
        };
        let tr = train(&cfg).unwrap();
        assert!(tr.records.iter().all(|r| r.params == cfg.init));
        assert_eq!(tr.final_params, cfg.init);
        let s = summarize(&tr).unwrap();
        assert_eq!(s.final_params, tr.records[0].params);
        assert_eq!(s.final_probs, tr.records[0].probs);
    }

    #[test]
    fn reference_refreshes_on_schedule() {
        let cfg = TrainConfig {
            ref_refresh_interval: 10,
            ..short(25)
        };
        let tr = train(&cfg).unwrap();
        assert_eq!(tr.records[0].reference, cfg.reference.unwrap());
        assert_eq!(tr.records[10].reference, tr.records[10].params);
        assert_eq!(tr.records[20].reference, tr.records[20].params);
        assert_eq!(tr.records[15].reference, tr.records[10].params);
    }

    #[test]
    fn divergence_reports_last_finite_step() {
        let cfg = TrainConfig {
            learning_rate: 1e308,
            kl_weight: 1e3,
            ..short(50)
        };
        match train(&cfg) {
            Err(TrainError::Diverged { step, last_finite }) => {
                assert_eq!(last_finite.step, step);
                assert!(last_finite.params.is_finite());
            }
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|t| t.final_params)
            ),
        }
    }

    #[test]
    fn invalid_config() {
        assert!(train(&TrainConfig::<f64> {
            steps: 0,
            ..Default::default()
        })
        .is_err());
        assert!(train(&TrainConfig::<f64> {
            group_size: 1,
            ..short(3)
        })
        .is_err());
    }

    #[test]
    fn period_of_sawtooth() {
        let series: Vec<f64> = (0..1000).map(|i| (i % 40) as f64).collect();
        assert_eq!(dominant_period(&series), Some(40));
        assert_eq!(dominant_period(&[1.0; 100]), None);
        assert_eq!(dominant_period(&[1.0, 2.0]), None);
    }

    #[test]
    fn summary_of_empty_trace() {
        let tr = TrainingTrace::<f64> {
            records: vec![],
            final_params: PolicyParams::worked_example(),
        };
        assert!(summarize(&tr).is_err());
    }
}

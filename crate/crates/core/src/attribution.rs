//! Sampling-versus-decision split of gradient magnitudes.
//!
//! The sampling magnitude is `|∂/∂θ_s|`; the decision magnitude is the
//! Euclidean norm over `(∂/∂θ_{d,C}, ∂/∂θ_{d,W})`. A gradient is balanced
//! when neither magnitude exceeds the other by more than the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exact::TrajectorySpace;
use crate::objectives::{ObjectiveGradient, Track};
use crate::policy::{PolicyParams, WorldConfig};
use crate::scalar::Real;

/// Default balance threshold (2:1).
pub const DEFAULT_BALANCE_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport<T> {
    pub track: Track,
    pub sampling_magnitude: T,
    pub decision_magnitude: T,
    /// `sampling / decision`; `+∞` when only the decision magnitude is zero,
    /// `1` for an all-zero gradient.
    pub ratio: T,
    pub balanced: bool,
    pub zero_gradient: bool,
}

pub fn attribute<T: Real>(
    grad: &ObjectiveGradient<T>,
    balance_threshold: T,
) -> Result<AttributionReport<T>> {
    if !(balance_threshold.is_finite() && balance_threshold > T::one()) {
        return Err(invalid(format!(
            "balance threshold must be a finite value above 1, got {balance_threshold}"
        )));
    }
    if !grad.is_finite() {
        return Err(invalid("cannot attribute a non-finite gradient"));
    }
    let sampling = grad.d_theta_s.abs();
    let decision = grad.d_theta_d_c.hypot(grad.d_theta_d_w);
    let zero = sampling == T::zero() && decision == T::zero();
    let (ratio, balanced) = if zero {
        (T::one(), true)
    } else if decision == T::zero() {
        (T::infinity(), false)
    } else if sampling == T::zero() {
        (T::zero(), false)
    } else {
        let r = sampling / decision;
        (r, r.max(r.recip()) <= balance_threshold)
    };
    Ok(AttributionReport {
        track: grad.track,
        sampling_magnitude: sampling,
        decision_magnitude: decision,
        ratio,
        balanced,
        zero_gradient: zero,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    #[serde(rename = "L")]
    pub length: usize,
    pub track: Track,
    pub sampling_magnitude: T,
    pub decision_magnitude: T,
    pub ratio: T,
    pub balanced: bool,
}

impl<T: Real> SweepRow<T> {
    fn from_report(length: usize, r: &AttributionReport<T>) -> Self {
        Self {
            length,
            track: r.track,
            sampling_magnitude: r.sampling_magnitude,
            decision_magnitude: r.decision_magnitude,
            ratio: r.ratio,
            balanced: r.balanced,
        }
    }
}

/// Expected reward- and KL-track attribution for each attempt length, with
/// both answer lengths set to `L`.
pub fn attribution_sweep<T: Real>(
    params: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    config: &WorldConfig<T>,
    lengths: &[usize],
    balance_threshold: T,
) -> Result<Vec<SweepRow<T>>> {
    params.validate()?;
    reference.validate()?;
    if let Some(l) = lengths.iter().find(|&&l| l == 0) {
        return Err(invalid(format!("sweep lengths must be positive, got {l}")));
    }
    let mut rows = Vec::with_capacity(2 * lengths.len());
    for &len in lengths {
        let world = config.with_lengths(len);
        let space = TrajectorySpace::new(&world)?;
        let reward = attribute(&space.surrogate_gradient(params), balance_threshold)?;
        let kl = attribute(&space.kl_gradient(params, reference), balance_threshold)?;
        rows.push(SweepRow::from_report(len, &reward));
        rows.push(SweepRow::from_report(len, &kl));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ParamVec;

    fn grad(track: Track, s: f64, dc: f64, dw: f64) -> ObjectiveGradient<f64> {
        ObjectiveGradient::new(track, ParamVec::new(s, dc, dw))
    }

    #[test]
    fn worked_example_tracks() {
        let kl = attribute(&grad(Track::Kl, -0.1861, -0.0022, -0.0785), 2.0).unwrap();
        let expect = 0.1861 / (0.0022f64.powi(2) + 0.0785f64.powi(2)).sqrt();
        assert!((kl.ratio - expect).abs() < 1e-12);
        assert!((kl.ratio - 2.37).abs() < 5e-3);
        assert!(!kl.balanced);

        let rw = attribute(&grad(Track::Reward, -0.0987, 0.0499, 0.0989), 2.0).unwrap();
        assert!((rw.ratio - 0.89).abs() < 5e-3);
        assert!(rw.balanced);
    }

    #[test]
    fn zero_and_one_sided() {
        let z = attribute(&grad(Track::Kl, 0.0, 0.0, 0.0), 2.0).unwrap();
        assert!(z.zero_gradient && z.balanced);
        assert_eq!(z.ratio, 1.0);
        let s = attribute(&grad(Track::Kl, 0.3, 0.0, 0.0), 2.0).unwrap();
        assert!(s.ratio.is_infinite() && !s.balanced);
        let d = attribute(&grad(Track::Kl, 0.0, 0.1, 0.0), 2.0).unwrap();
        assert_eq!(d.ratio, 0.0);
        assert!(!d.balanced);
    }

    #[test]
    fn threshold_validation() {
        assert!(attribute(&grad(Track::Kl, 1.0, 1.0, 1.0), 1.0).is_err());
        assert!(attribute(&grad(Track::Kl, f64::NAN, 1.0, 1.0), 2.0).is_err());
    }

    #[test]
    fn sweep_rejects_zero_length() {
        let p = PolicyParams::<f64>::worked_example();
        let w = WorldConfig::default();
        assert!(attribution_sweep(&p, &p, &w, &[0], 2.0).is_err());
    }
}

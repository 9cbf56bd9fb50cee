//! Exact expectations over the enumerated trajectory space.
//!
//! These are the infinite-group limits of the sampled estimators in
//! [`objectives`](crate::objectives): advantages use the population mean and
//! standard deviation of the reward under the current policy.

use crate::error::Result;
use crate::objectives::{
    dft_gradient, kl_gradient, reward, sft_gradient, weighted_score, ObjectiveGradient, Track,
    EPSILON_STD,
};
use crate::policy::{ParamVec, PolicyParams, WorldConfig};
use crate::scalar::Real;
use crate::trajectory::{enumerate_trajectories, EnumeratedTrajectory};

/// Enumerated trajectory space for one world.
pub struct TrajectorySpace<T> {
    config: WorldConfig<T>,
    paths: Vec<EnumeratedTrajectory>,
}

impl<T: Real> TrajectorySpace<T> {
    pub fn new(config: &WorldConfig<T>) -> Result<Self> {
        Ok(Self {
            config: *config,
            paths: enumerate_trajectories(config)?,
        })
    }

    pub fn paths(&self) -> &[EnumeratedTrajectory] {
        &self.paths
    }

    pub fn config(&self) -> &WorldConfig<T> {
        &self.config
    }

    /// `Σ_τ P(τ | params) f(τ)`, summed in enumeration order.
    pub fn expect<F>(&self, params: &PolicyParams<T>, mut f: F) -> ParamVec<T>
    where
        F: FnMut(&EnumeratedTrajectory) -> ParamVec<T>,
    {
        self.paths
            .iter()
            .map(|e| f(e) * e.probability(params))
            .sum()
    }

    pub fn expected_reward(&self, params: &PolicyParams<T>) -> T {
        self.paths
            .iter()
            .map(|e| e.probability(params) * reward::<T>(&e.trajectory))
            .sum()
    }

    /// Population reward mean and standard deviation.
    pub fn reward_moments(&self, params: &PolicyParams<T>) -> (T, T) {
        let mean = self.expected_reward(params);
        // reward is an indicator
        let var = (mean * (T::one() - mean)).max(T::zero());
        (mean, var.sqrt())
    }

    /// Expected surrogate-reward gradient with population advantages.
    pub fn surrogate_gradient(&self, params: &PolicyParams<T>) -> ObjectiveGradient<T> {
        let (mean, std) = self.reward_moments(params);
        if std <= T::lit(EPSILON_STD) {
            return ObjectiveGradient::zero(Track::Reward);
        }
        let g = self.expect(params, |e| {
            let adv = (reward::<T>(&e.trajectory) - mean) / std;
            weighted_score(&e.trajectory, adv, params, &self.config)
        });
        ObjectiveGradient::new(Track::Reward, g)
    }

    /// Expected KL-track gradient.
    pub fn kl_gradient(
        &self,
        params: &PolicyParams<T>,
        reference: &PolicyParams<T>,
    ) -> ObjectiveGradient<T> {
        let g = self.expect(params, |e| {
            kl_gradient(&e.trajectory, params, reference, &self.config).as_vec()
        });
        ObjectiveGradient::new(Track::Kl, g)
    }

    /// Expected SFT gradient on demonstrations drawn from `data`.
    pub fn sft_gradient(
        &self,
        data: &PolicyParams<T>,
        params: &PolicyParams<T>,
    ) -> ObjectiveGradient<T> {
        let g = self.expect(data, |e| {
            sft_gradient(&e.trajectory, params, &self.config).as_vec()
        });
        ObjectiveGradient::new(Track::Sft, g)
    }

    /// Expected DFT gradient on demonstrations drawn from `data`.
    pub fn dft_gradient(
        &self,
        data: &PolicyParams<T>,
        params: &PolicyParams<T>,
        c: T,
    ) -> ObjectiveGradient<T> {
        let g = self.expect(data, |e| {
            dft_gradient(&e.trajectory, params, &self.config, c).as_vec()
        });
        ObjectiveGradient::new(Track::Dft, g)
    }
}

//! Variance-preserving forward-noising schedule and the reverse-time grid.
//!
//! The forward process is `dX = -1/2 beta(t) X dt + sqrt(beta(t)) dW` on the
//! continuous time interval `[0, 1]`, with the linear rate
//! `beta(t) = beta_min + t (beta_max - beta_min)`. Its marginal perturbation
//! kernel is `X_t = alpha(t) X_0 + sigma(t) Z` with
//!
//! ```text
//! alpha(t) = exp(-1/2 * (beta_min t + (beta_max - beta_min) t^2 / 2))
//! sigma(t) = sqrt(1 - alpha(t)^2)
//! ```
//!
//! so `alpha^2 + sigma^2 = 1` identically (the variance-preserving property).
//! Discrete samplers walk a uniform step grid `{T, T-k, ..., k, 0}` where
//! step `i` corresponds to continuous time `t_i = i / T`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Marginal perturbation coefficients at one time: `x_t = alpha x_0 + sigma z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalCoeffs {
    /// Signal retention factor, in `(0, 1]`.
    pub alpha: f64,
    /// Noise scale, in `[0, 1)`.
    pub sigma: f64,
}

/// Linear variance-preserving noise schedule on `t in [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpSchedule {
    beta_min: f64,
    beta_max: f64,
    num_steps: u32,
}

impl VpSchedule {
    /// Benchmark defaults: `beta_min = 0.1`, `beta_max = 20`, `T = 1000`.
    pub fn default_benchmark() -> Self {
        Self::new(0.1, 20.0, 1000).expect("benchmark defaults are valid")
    }

    /// Build a schedule, validating `0 < beta_min <= beta_max` and
    /// `num_steps >= 1`.
    pub fn new(beta_min: f64, beta_max: f64, num_steps: u32) -> Result<Self> {
        if !(beta_min.is_finite() && beta_max.is_finite()) || beta_min <= 0.0 {
            return Err(CoreError::Config(format!(
                "schedule requires finite rates with 0 < beta_min, got beta_min={beta_min}, beta_max={beta_max}"
            )));
        }
        if beta_max < beta_min {
            return Err(CoreError::Config(format!(
                "schedule requires beta_min <= beta_max, got beta_min={beta_min} > beta_max={beta_max}"
            )));
        }
        if num_steps == 0 {
            return Err(CoreError::Config("schedule requires num_steps >= 1".into()));
        }
        Ok(Self {
            beta_min,
            beta_max,
            num_steps,
        })
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    /// Total number of discrete steps `T`; step `i` maps to `t = i / T`.
    pub fn num_steps(&self) -> u32 {
        self.num_steps
    }

    /// Continuous time of a discrete step index.
    pub fn time_of_step(&self, step: u32) -> f64 {
        f64::from(step) / f64::from(self.num_steps)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::Domain(format!(
                "time {t} outside the schedule domain [0, 1]"
            )));
        }
        Ok(())
    }

    /// Instantaneous noising rate `beta(t)`.
    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min))
    }

    /// Exact integral `int_0^t beta(u) du` of the linear rate.
    fn int_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// Marginal coefficients `(alpha, sigma)` at time `t`.
    pub fn marginal_coeffs(&self, t: f64) -> Result<MarginalCoeffs> {
        self.check_time(t)?;
        let alpha = (-0.5 * self.int_beta(t)).exp();
        let sigma = (1.0 - alpha * alpha).max(0.0).sqrt();
        Ok(MarginalCoeffs { alpha, sigma })
    }

    /// Drift `f(x, t) = -1/2 beta(t) x` and squared diffusion `g^2(t) = beta(t)`
    /// of the forward SDE.
    pub fn drift_diffusion(&self, x: &DVector<f64>, t: f64) -> Result<(DVector<f64>, f64)> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Input(
                "drift_diffusion received a non-finite state vector".into(),
            ));
        }
        let beta = self.beta(t)?;
        Ok((x * (-0.5 * beta), beta))
    }

    /// Signal-to-noise ratio `alpha^2 / sigma^2`. Undefined at `t = 0` where
    /// `sigma = 0`.
    pub fn snr(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        if t == 0.0 {
            return Err(CoreError::Domain(
                "snr is unbounded at t = 0 (sigma = 0)".into(),
            ));
        }
        let mc = self.marginal_coeffs(t)?;
        Ok(mc.alpha * mc.alpha / (mc.sigma * mc.sigma))
    }

    /// First time at which the SNR falls to `level`, found by bisection to a
    /// time tolerance of `1e-9`. The SNR is strictly decreasing, diverges as
    /// `t -> 0+`, and attains its minimum at `t = 1`; levels below `snr(1)`
    /// are unattainable.
    pub fn snr_crossing(&self, level: f64) -> Result<f64> {
        if !level.is_finite() || level <= 0.0 {
            return Err(CoreError::Domain(format!(
                "snr level must be positive and finite, got {level}"
            )));
        }
        let snr_end = self.snr(1.0)?;
        if level < snr_end {
            return Err(CoreError::NotFound(format!(
                "snr never falls to {level}; the minimum over (0, 1] is {snr_end:.6e}"
            )));
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        // Invariant: snr(lo) > level >= snr(hi), treating snr(0) as +inf.
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            if self.snr(mid)? > level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Descending uniform grid of reverse-time steps `{T, T-k, ..., k, 0}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_total: u32,
    stride: u32,
}

impl TimeGrid {
    /// Build a grid over `t_total` steps with uniform `stride`; the stride
    /// must be positive and divide `t_total` exactly.
    pub fn new(t_total: u32, stride: u32) -> Result<Self> {
        if stride == 0 {
            return Err(CoreError::Config("grid stride must be >= 1".into()));
        }
        if t_total == 0 {
            return Err(CoreError::Config("grid needs t_total >= 1".into()));
        }
        if t_total % stride != 0 {
            return Err(CoreError::Config(format!(
                "grid stride {stride} does not divide the total step count {t_total}"
            )));
        }
        Ok(Self { t_total, stride })
    }

    pub fn t_total(&self) -> u32 {
        self.t_total
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    /// Number of grid points including both endpoints.
    pub fn num_points(&self) -> usize {
        (self.t_total / self.stride) as usize + 1
    }

    /// Grid steps in descending order `T, T-k, ..., k, 0`.
    pub fn steps_desc(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.num_points() as u32).map(move |j| self.t_total - j * self.stride)
    }

    /// Grid steps in ascending order `0, k, ..., T`.
    pub fn steps_asc(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.num_points() as u32).map(move |j| j * self.stride)
    }

    /// Consecutive reverse-time pairs `(current, next)` with `current > next`.
    pub fn pairs_desc(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let stride = self.stride;
        self.steps_desc()
            .filter(move |&i| i >= stride)
            .map(move |i| (i, i - stride))
    }

    /// True when `step` lies on the grid.
    pub fn contains(&self, step: u32) -> bool {
        step <= self.t_total && step % self.stride == 0
    }

    /// Snap an arbitrary step index onto the grid, rounding toward zero.
    pub fn snap_down(&self, step: u32) -> u32 {
        let capped = step.min(self.t_total);
        capped - capped % self.stride
    }
}

//! Reverse-time samplers with attribute control.
//!
//! Generation starts at `x_T ~ N(0, I)` and walks the descending step grid
//! `{T, T-k, ..., k, 0}`. At each grid step the conditioning attribute is
//! chosen by the strategy:
//!
//! * vanilla — one fixed attribute throughout;
//! * switched — attribute `s0` while the step index exceeds the transition
//!   point `tau`, attribute `s1` from `tau` downward, so `tau = 0`
//!   reproduces vanilla `s0` and `tau = T` reproduces vanilla `s1` exactly
//!   (bit for bit);
//! * mixed — a fixed convex blend of the two conditional score fields.
//!
//! The default integrator is the deterministic probability-flow update
//! `x += (f(x, t) - g^2(t)/2 * score) * dt`; the stochastic variant uses
//! `x += (f - g^2 * score) * dt + g * sqrt(|dt|) * xi`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gmm::{Attr, LabeledSet};
use crate::schedule::{TimeGrid, VpSchedule};
use crate::score::ScoreSource;

/// Attribute switching at a transition step: condition on `s0` strictly
/// above `tau`, on `s1` at and below it. Generated points are assigned `s1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchPolicy {
    pub s0: Attr,
    pub s1: Attr,
    pub tau: u32,
}

/// Static blend of conditional scores: `(1 - p) * score(s0) + p * score(s1)`.
/// Generated points are assigned `s1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixPolicy {
    pub s0: Attr,
    pub s1: Attr,
    pub p: f64,
}

/// How the conditioning attribute evolves over the reverse walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Vanilla { s: Attr },
    Switched(SwitchPolicy),
    Mixed(MixPolicy),
}

impl Strategy {
    /// Attribute recorded on the generated points.
    pub fn assigned_attr(&self) -> Attr {
        match self {
            Strategy::Vanilla { s } => *s,
            Strategy::Switched(p) => p.s1,
            Strategy::Mixed(p) => p.s1,
        }
    }
}

/// Numerical integrator for the reverse walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Deterministic probability-flow update (the default).
    Ode,
    /// Euler–Maruyama update of the reverse stochastic dynamics.
    Sde,
}

/// Size, grid, seed and tracing options of one generation run.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec {
    pub n: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// Record the full state at every grid step (memory: `n * d` per point).
    pub record_trajectory: bool,
}

impl RunSpec {
    pub fn new(n: usize, grid: TimeGrid, seed: u64) -> Self {
        Self {
            n,
            grid,
            seed,
            record_trajectory: false,
        }
    }
}

/// Output of a generation run.
#[derive(Debug, Clone)]
pub struct SampleRun {
    /// Generated points, one row per sample.
    pub points: DMatrix<f64>,
    /// Attribute assigned to every generated point.
    pub assigned: Attr,
    /// Strategy that produced the run.
    pub strategy: Strategy,
    pub grid: TimeGrid,
    pub seed: u64,
    /// States at every grid step (descending, starting at `T`), when
    /// requested.
    pub trajectory: Option<Vec<(u32, DMatrix<f64>)>>,
}

impl SampleRun {
    /// View the run as a labeled dataset with the assigned attribute.
    pub fn labeled(&self) -> LabeledSet {
        LabeledSet::new(
            self.points.clone(),
            vec![self.assigned; self.points.nrows()],
            self.seed,
        )
        .expect("row/attr lengths match by construction")
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str, step: u32, t: f64) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical(format!(
            "{what} became non-finite at step {step} (t = {t:.6})"
        )));
    }
    Ok(())
}

/// Shared reverse walk. `score_at(x, t, step)` supplies the (possibly
/// blended) score field for the current state.
fn run_reverse<F>(
    src: &dyn ScoreSource,
    sched: &VpSchedule,
    strategy: Strategy,
    integrator: Integrator,
    spec: &RunSpec,
    mut score_at: F,
) -> Result<SampleRun>
where
    F: FnMut(&DMatrix<f64>, f64, u32) -> Result<DMatrix<f64>>,
{
    if spec.grid.t_total() != sched.num_steps() {
        return Err(CoreError::Config(format!(
            "grid covers {} steps but the schedule has {}",
            spec.grid.t_total(),
            sched.num_steps()
        )));
    }
    let d = src.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = DMatrix::zeros(spec.n, d);
    for i in 0..spec.n {
        for j in 0..d {
            x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut trajectory = spec
        .record_trajectory
        .then(|| Vec::with_capacity(spec.grid.num_points()));
    if let Some(tr) = trajectory.as_mut() {
        tr.push((spec.grid.t_total(), x.clone()));
    }

    let mut noise = match integrator {
        Integrator::Ode => None,
        Integrator::Sde => Some(DMatrix::zeros(spec.n, d)),
    };

    for (cur, next) in spec.grid.pairs_desc() {
        let t = sched.time_of_step(cur);
        let dt = sched.time_of_step(next) - t; // negative
        let beta = sched.beta(t)?;
        let score = score_at(&x, t, cur)?;
        if score.shape() != (spec.n, d) {
            return Err(CoreError::Input(format!(
                "score source returned shape {:?}, expected {:?}",
                score.shape(),
                (spec.n, d)
            )));
        }
        check_finite(&score, "score", cur, t)?;

        match integrator {
            Integrator::Ode => {
                // x += dt * (-beta/2 * x - beta/2 * score)
                let half = 0.5 * beta;
                for i in 0..spec.n {
                    for j in 0..d {
                        let drift = -half * x[(i, j)] - half * score[(i, j)];
                        x[(i, j)] += dt * drift;
                    }
                }
            }
            Integrator::Sde => {
                let xi = noise.as_mut().expect("noise buffer exists for sde");
                for i in 0..spec.n {
                    for j in 0..d {
                        xi[(i, j)] = rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let root = (beta * dt.abs()).sqrt();
                let half = 0.5 * beta;
                for i in 0..spec.n {
                    for j in 0..d {
                        let drift = -half * x[(i, j)] - beta * score[(i, j)];
                        x[(i, j)] += dt * drift + root * xi[(i, j)];
                    }
                }
            }
        }
        check_finite(&x, "sampler state", next, sched.time_of_step(next))?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push((next, x.clone()));
        }
    }

    Ok(SampleRun {
        points: x,
        assigned: strategy.assigned_attr(),
        strategy,
        grid: spec.grid,
        seed: spec.seed,
        trajectory,
    })
}

fn validate_mix(policy: &MixPolicy) -> Result<()> {
    if !policy.p.is_finite() || !(0.0..=1.0).contains(&policy.p) {
        return Err(CoreError::Config(format!(
            "mix weight must lie in [0, 1], got {}",
            policy.p
        )));
    }
    Ok(())
}

/// Run any strategy under either integrator.
pub fn sample(
    src: &dyn ScoreSource,
    sched: &VpSchedule,
    strategy: &Strategy,
    integrator: Integrator,
    spec: &RunSpec,
) -> Result<SampleRun> {
    match *strategy {
        Strategy::Vanilla { s } => run_reverse(src, sched, *strategy, integrator, spec, {
            move |x, t, _| src.score_batch(x, t, s)
        }),
        Strategy::Switched(policy) => {
            if !spec.grid.contains(policy.tau) {
                return Err(CoreError::Config(format!(
                    "transition step {} is not on the sampling grid (stride {}); \
                     nearest grid step not above it is {}",
                    policy.tau,
                    spec.grid.stride(),
                    spec.grid.snap_down(policy.tau)
                )));
            }
            run_reverse(
                src,
                sched,
                *strategy,
                integrator,
                spec,
                move |x, t, step| {
                    let s = if step > policy.tau {
                        policy.s0
                    } else {
                        policy.s1
                    };
                    src.score_batch(x, t, s)
                },
            )
        }
        Strategy::Mixed(policy) => {
            validate_mix(&policy)?;
            run_reverse(src, sched, *strategy, integrator, spec, move |x, t, _| {
                // Endpoint weights short-circuit to a single evaluation so
                // p = 0 and p = 1 reproduce the vanilla runs bit for bit.
                if policy.p == 0.0 {
                    src.score_batch(x, t, policy.s0)
                } else if policy.p == 1.0 {
                    src.score_batch(x, t, policy.s1)
                } else {
                    let a = src.score_batch(x, t, policy.s0)?;
                    let b = src.score_batch(x, t, policy.s1)?;
                    Ok(a * (1.0 - policy.p) + b * policy.p)
                }
            })
        }
    }
}

/// Probability-flow run conditioned on one attribute throughout.
pub fn sample_vanilla(
    src: &dyn ScoreSource,
    sched: &VpSchedule,
    s: Attr,
    spec: &RunSpec,
) -> Result<SampleRun> {
    sample(src, sched, &Strategy::Vanilla { s }, Integrator::Ode, spec)
}

/// Probability-flow run with attribute switching at `policy.tau`.
pub fn sample_switched(
    src: &dyn ScoreSource,
    sched: &VpSchedule,
    policy: &SwitchPolicy,
    spec: &RunSpec,
) -> Result<SampleRun> {
    sample(
        src,
        sched,
        &Strategy::Switched(*policy),
        Integrator::Ode,
        spec,
    )
}

/// Probability-flow run driven by a static blend of conditional scores.
pub fn sample_mixed(
    src: &dyn ScoreSource,
    sched: &VpSchedule,
    policy: &MixPolicy,
    spec: &RunSpec,
) -> Result<SampleRun> {
    sample(src, sched, &Strategy::Mixed(*policy), Integrator::Ode, spec)
}

/// Stochastic (Euler–Maruyama) run under any strategy.
pub fn sample_sde(
    src: &dyn ScoreSource,
    sched: &VpSchedule,
    strategy: &Strategy,
    spec: &RunSpec,
) -> Result<SampleRun> {
    sample(src, sched, strategy, Integrator::Sde, spec)
}

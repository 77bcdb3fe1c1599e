//! Fair transition-point search.
//!
//! Along one reverse walk, the conditional score gap at grid step `i` is
//! summarized as `D_i = g^2(t_i) * mean_batch(score(x, t_i, s0) - score(x,
//! t_i, s1))`. Splitting the walk at a candidate step `tau` assigns steps
//! above `tau` to `s0` and the rest to `s1`; the fair transition point
//! minimizes the imbalance `|sum_{i <= tau} D_i - sum_{i > tau} D_i| =
//! |2 * prefix(tau) - total|` over all grid steps. Step 0 is never evaluated
//! (the walk ends there), so its gap entry is zero by convention.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gmm::Attr;
use crate::schedule::{TimeGrid, VpSchedule};
use crate::score::ScoreSource;
use crate::seeding::derive_seed;

/// Which score field advances the search trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauDrive {
    /// Drive with `(score(s0) + score(s1)) / 2` (the default). Symmetric in
    /// the attribute pair, so swapping `s0` and `s1` flips every gap sign
    /// exactly and returns the identical transition point.
    #[default]
    Average,
    /// Drive with `score(s0)` only.
    Initial,
}

/// Everything produced by one transition-point search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauTrace {
    pub s0: Attr,
    pub s1: Attr,
    pub drive: TauDrive,
    pub batch_size: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    /// Data dimensionality of the gap vectors.
    pub dim: usize,
    /// Grid steps in ascending order `0, k, ..., T`.
    pub steps: Vec<u32>,
    /// Score-gap summary `D_i` per ascending grid step; the step-0 entry is
    /// zero because the walk never evaluates there.
    pub d_per_step: Vec<Vec<f64>>,
    /// Ascending prefix sums of `d_per_step`; the last row is the total.
    pub cumulative: Vec<Vec<f64>>,
    /// Imbalance `|2 * prefix - total|` per candidate transition step.
    pub objective: Vec<f64>,
    /// Candidate with the smallest imbalance (ties break to the smallest
    /// step).
    pub tau_star: u32,
    /// True when the two attributes produced identical score fields.
    pub degenerate: bool,
}

/// Candidate steps paired with their imbalance values, ascending.
pub fn objective_curve(trace: &TauTrace) -> Vec<(u32, f64)> {
    trace
        .steps
        .iter()
        .copied()
        .zip(trace.objective.iter().copied())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Search for the fair transition point between `s0` and `s1`.
///
/// One batch of `batch_size` walkers is driven from `x_T ~ N(0, I)` down the
/// grid; both conditional scores are evaluated at every step above zero, the
/// gaps are accumulated, and the imbalance objective is minimized over all
/// grid steps (including 0 and `T`, which correspond to the two vanilla
/// runs).
#[allow(clippy::too_many_arguments)]
pub fn find_tau(
    src: &dyn ScoreSource,
    sched: &VpSchedule,
    s0: Attr,
    s1: Attr,
    grid: TimeGrid,
    batch_size: usize,
    drive: TauDrive,
    seed: u64,
) -> Result<TauTrace> {
    if batch_size == 0 {
        return Err(CoreError::Config(
            "transition-point search needs batch_size >= 1".into(),
        ));
    }
    if grid.t_total() != sched.num_steps() {
        return Err(CoreError::Config(format!(
            "grid covers {} steps but the schedule has {}",
            grid.t_total(),
            sched.num_steps()
        )));
    }
    let d = src.dim();
    let m = grid.num_points();
    let steps: Vec<u32> = grid.steps_asc().collect();
    let mut d_per_step = vec![vec![0.0; d]; m];

    if s0 != s1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(batch_size, d);
        for i in 0..batch_size {
            for j in 0..d {
                x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        for (cur, next) in grid.pairs_desc() {
            let t = sched.time_of_step(cur);
            let dt = sched.time_of_step(next) - t;
            let beta = sched.beta(t)?;
            let psi0 = src.score_batch(&x, t, s0)?;
            let psi1 = src.score_batch(&x, t, s1)?;
            for (name, m) in [("score(s0)", &psi0), ("score(s1)", &psi1)] {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::Numerical(format!(
                        "{name} became non-finite at step {cur} (t = {t:.6})"
                    )));
                }
            }
            let idx = (cur / grid.stride()) as usize;
            let gap = &d_per_step[idx];
            debug_assert!(gap.iter().all(|&v| v == 0.0));
            d_per_step[idx] = (0..d)
                .map(|j| beta * (psi0.column(j) - psi1.column(j)).sum() / batch_size as f64)
                .collect();

            let half = 0.5 * beta;
            for i in 0..batch_size {
                for j in 0..d {
                    let s = match drive {
                        TauDrive::Average => 0.5 * (psi0[(i, j)] + psi1[(i, j)]),
                        TauDrive::Initial => psi0[(i, j)],
                    };
                    let drift = -half * x[(i, j)] - half * s;
                    x[(i, j)] += dt * drift;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Numerical(format!(
                    "search trajectory became non-finite at step {next}"
                )));
            }
        }
    }

    let mut cumulative = Vec::with_capacity(m);
    let mut running = vec![0.0; d];
    for row in &d_per_step {
        for j in 0..d {
            running[j] += row[j];
        }
        cumulative.push(running.clone());
    }
    let total = cumulative
        .last()
        .expect("grid has at least one point")
        .clone();

    let mut objective = Vec::with_capacity(m);
    for prefix in &cumulative {
        let v: Vec<f64> = (0..d).map(|j| 2.0 * prefix[j] - total[j]).collect();
        objective.push(norm(&v));
    }
    let mut best = 0usize;
    for (i, &obj) in objective.iter().enumerate() {
        if obj < objective[best] {
            best = i;
        }
    }
    let degenerate = d_per_step.iter().all(|row| row.iter().all(|&v| v == 0.0));

    Ok(TauTrace {
        s0,
        s1,
        drive,
        batch_size,
        seed,
        grid,
        dim: d,
        steps,
        d_per_step,
        cumulative,
        objective,
        tau_star: (best as u32) * grid.stride(),
        degenerate,
    })
}

/// One row of a batch-size stability study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub batch_size: usize,
    /// Mean transition point across the repeats.
    pub mean: f64,
    /// Sample standard deviation across the repeats (0 for a single repeat).
    pub std: f64,
}

/// Transition-point spread as a function of search batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub rows: Vec<StabilityRow>,
    pub repeats: usize,
    pub seed: u64,
}

/// Repeat the search `repeats` times per batch size (seeds derived as
/// `stability.b{size}.r{rep}`) and summarize the spread of the returned
/// transition points.
#[allow(clippy::too_many_arguments)]
pub fn tau_stability(
    src: &dyn ScoreSource,
    sched: &VpSchedule,
    s0: Attr,
    s1: Attr,
    grid: TimeGrid,
    batch_sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<StabilityTable> {
    if repeats == 0 {
        return Err(CoreError::Config(
            "stability study needs repeats >= 1".into(),
        ));
    }
    if batch_sizes.is_empty() {
        return Err(CoreError::Config(
            "stability study needs at least one batch size".into(),
        ));
    }
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &batch in batch_sizes {
        let mut taus = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let run_seed = derive_seed(seed, &format!("stability.b{batch}.r{rep}"));
            let trace = find_tau(src, sched, s0, s1, grid, batch, TauDrive::Average, run_seed)?;
            taus.push(f64::from(trace.tau_star));
        }
        let mean = taus.iter().sum::<f64>() / repeats as f64;
        let std = if repeats >= 2 {
            let var =
                taus.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (repeats - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        rows.push(StabilityRow {
            batch_size: batch,
            mean,
            std,
        });
    }
    Ok(StabilityTable {
        rows,
        repeats,
        seed,
    })
}

//! Score-source abstraction.
//!
//! Samplers and the transition-point search only need one thing: the
//! conditional score field `psi(x, t, s) ~= grad_x log p_t(x | s)`. Two
//! implementations exist — the exact mixture oracle ([`AnalyticScore`]) and
//! the learned denoiser ([`crate::scorenet::TrainedScore`]) — and both are
//! identified by a content fingerprint that run artifacts record so every
//! sample set can be traced back to the exact field that produced it.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::gmm::{Attr, ConditionalGmm};
use crate::schedule::VpSchedule;
use crate::seeding::sha256_hex;

/// A conditional score field on `[0, 1] x {attr 0, attr 1}`.
pub trait ScoreSource: Sync {
    /// Data dimensionality `d`.
    fn dim(&self) -> usize;

    /// Stable content fingerprint (hash of everything that determines the
    /// field's values), recorded in run sidecars.
    fn fingerprint(&self) -> String;

    /// Scores for every row of `xs` at time `t` under attribute `s`.
    fn score_batch(&self, xs: &DMatrix<f64>, t: f64, s: Attr) -> Result<DMatrix<f64>>;

    /// Score of a single point.
    fn score(&self, x: &DVector<f64>, t: f64, s: Attr) -> Result<DVector<f64>> {
        let xs = DMatrix::from_rows(&[x.transpose()]);
        Ok(self.score_batch(&xs, t, s)?.row(0).transpose())
    }
}

/// Exact scores of a perturbed conditional Gaussian mixture.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    gmm: ConditionalGmm,
    schedule: VpSchedule,
}

impl AnalyticScore {
    pub fn new(gmm: ConditionalGmm, schedule: VpSchedule) -> Self {
        Self { gmm, schedule }
    }

    pub fn gmm(&self) -> &ConditionalGmm {
        &self.gmm
    }

    pub fn schedule(&self) -> &VpSchedule {
        &self.schedule
    }
}

impl ScoreSource for AnalyticScore {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn fingerprint(&self) -> String {
        let params = serde_json::to_string(&(&self.gmm, &self.schedule))
            .expect("mixture parameters serialize to json");
        format!("analytic:{}", &sha256_hex(params.as_bytes())[..16])
    }

    fn score_batch(&self, xs: &DMatrix<f64>, t: f64, s: Attr) -> Result<DMatrix<f64>> {
        self.gmm.analytic_score_batch(&self.schedule, xs, t, s)
    }
}

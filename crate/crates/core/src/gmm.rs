//! Attribute-conditional Gaussian-mixture ground truth.
//!
//! The data distribution is `p(x, s) = p(s) p(x | s)` where the sensitive
//! attribute `s` takes the two values [`Attr::Zero`] and [`Attr::One`] and
//! each conditional `p(x | s)` is a Gaussian mixture. Under the
//! variance-preserving forward process the time-`t` perturbation of a mixture
//! is again a mixture with component means `alpha(t) mu_k` and covariances
//! `alpha(t)^2 Sigma_k + sigma(t)^2 I`, so perturbed densities and scores are
//! available in closed form and serve as the exact reference for everything
//! the learned network is supposed to approximate.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::schedule::{MarginalCoeffs, VpSchedule};

/// Binary sensitive attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Attr {
    Zero,
    One,
}

impl Attr {
    pub fn index(self) -> usize {
        match self {
            Attr::Zero => 0,
            Attr::One => 1,
        }
    }

    pub fn flipped(self) -> Attr {
        match self {
            Attr::Zero => Attr::One,
            Attr::One => Attr::Zero,
        }
    }

    pub fn from_index(i: usize) -> Result<Attr> {
        match i {
            0 => Ok(Attr::Zero),
            1 => Ok(Attr::One),
            _ => Err(CoreError::Input(format!(
                "attribute value must be 0 or 1, got {i}"
            ))),
        }
    }
}

impl TryFrom<u8> for Attr {
    type Error = CoreError;
    fn try_from(v: u8) -> Result<Attr> {
        Attr::from_index(v as usize)
    }
}

impl From<Attr> for u8 {
    fn from(a: Attr) -> u8 {
        a.index() as u8
    }
}

impl std::fmt::Display for Attr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// One weighted Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Labeled point set: one row of `points` per sample, one attribute per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    points: DMatrix<f64>,
    attrs: Vec<Attr>,
    seed: u64,
}

impl LabeledSet {
    /// Bundle points and attributes; the row count must match.
    pub fn new(points: DMatrix<f64>, attrs: Vec<Attr>, seed: u64) -> Result<Self> {
        if points.nrows() != attrs.len() {
            return Err(CoreError::Input(format!(
                "labeled set has {} points but {} attribute labels",
                points.nrows(),
                attrs.len()
            )));
        }
        Ok(Self {
            points,
            attrs,
            seed,
        })
    }

    /// Stack homogeneously-labeled blocks into one set.
    pub fn from_parts(parts: &[(&DMatrix<f64>, Attr)], seed: u64) -> Result<Self> {
        if parts.is_empty() {
            return Err(CoreError::Input("cannot stack zero blocks".into()));
        }
        let dim = parts[0].0.ncols();
        let total: usize = parts.iter().map(|(m, _)| m.nrows()).sum();
        let mut points = DMatrix::zeros(total, dim);
        let mut attrs = Vec::with_capacity(total);
        let mut row = 0;
        for (block, attr) in parts {
            if block.ncols() != dim {
                return Err(CoreError::Input(format!(
                    "stacked blocks disagree on dimension: {} vs {dim}",
                    block.ncols()
                )));
            }
            points.rows_mut(row, block.nrows()).copy_from(*block);
            attrs.extend(std::iter::repeat(*attr).take(block.nrows()));
            row += block.nrows();
        }
        LabeledSet::new(points, attrs, seed)
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn attrs(&self) -> &[Attr] {
        &self.attrs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Count of rows carrying each attribute, indexed `[zero, one]`.
    pub fn counts(&self) -> [usize; 2] {
        let ones = self.attrs.iter().filter(|a| **a == Attr::One).count();
        [self.attrs.len() - ones, ones]
    }

    /// Rows restricted to one attribute value.
    pub fn points_of(&self, attr: Attr) -> DMatrix<f64> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.attrs[i] == attr).collect();
        let mut out = DMatrix::zeros(rows.len(), self.dim());
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).copy_from(&self.points.row(i));
        }
        out
    }

    /// Write as CSV with header `x0,...,x{d-1},s`. Rejects non-finite values.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        if self.points.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Input(
                "refusing to write non-finite coordinates to csv".into(),
            ));
        }
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("s".into());
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = (0..self.dim())
                .map(|j| format!("{}", self.points[(i, j)]))
                .collect();
            rec.push(self.attrs[i].index().to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read a CSV produced by [`LabeledSet::write_csv`]; the header and every
    /// row are validated. Provenance seed of a file-loaded set is `0`.
    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)?;
        let header = rdr.headers()?.clone();
        if header.len() < 2 || header.iter().next_back() != Some("s") {
            return Err(CoreError::Input(format!(
                "{}: expected header x0,...,x{{d-1}},s, got {:?}",
                path.display(),
                header
            )));
        }
        let dim = header.len() - 1;
        for (j, name) in header.iter().take(dim).enumerate() {
            if name != format!("x{j}") {
                return Err(CoreError::Input(format!(
                    "{}: column {j} named {name:?}, expected \"x{j}\"",
                    path.display()
                )));
            }
        }
        let mut coords: Vec<f64> = Vec::new();
        let mut attrs: Vec<Attr> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for j in 0..dim {
                let v: f64 = rec[j].parse().map_err(|_| {
                    CoreError::Input(format!(
                        "{}: row {line}: column x{j} is not a float: {:?}",
                        path.display(),
                        &rec[j]
                    ))
                })?;
                coords.push(v);
            }
            let s: usize = rec[dim].parse().map_err(|_| {
                CoreError::Input(format!(
                    "{}: row {line}: attribute is not an integer: {:?}",
                    path.display(),
                    &rec[dim]
                ))
            })?;
            attrs.push(Attr::from_index(s).map_err(|_| {
                CoreError::Input(format!(
                    "{}: row {line}: attribute must be 0 or 1, got {s}",
                    path.display()
                ))
            })?);
        }
        let n = attrs.len();
        let points = DMatrix::from_row_slice(n, dim, &coords);
        LabeledSet::new(points, attrs, 0)
    }
}

/// Attribute-conditional Gaussian mixture with a Bernoulli attribute prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGmm {
    dim: usize,
    comps: [Vec<GaussComponent>; 2],
    attr_one_prior: f64,
}

impl ConditionalGmm {
    /// Benchmark default ("two-cluster bias"): attribute 0 at `(-1.5, 0)`,
    /// attribute 1 at `(+1.5, 0)`, unit covariances, equal priors. The
    /// separation gives a vanilla conditional cross-BER of about 0.067 while
    /// keeping the fair switched output on a well-supported region of the
    /// mixture.
    pub fn default_benchmark() -> Self {
        let comp = |mx: f64| GaussComponent {
            weight: 1.0,
            mean: DVector::from_vec(vec![mx, 0.0]),
            cov: DMatrix::identity(2, 2),
        };
        Self::new(2, vec![comp(-1.5)], vec![comp(1.5)], 0.5).expect("benchmark defaults are valid")
    }

    /// Build and validate: weights of each conditional must be nonnegative
    /// and sum to one within `1e-12`, covariances must be symmetric positive
    /// definite, and every shape must match `dim`.
    pub fn new(
        dim: usize,
        attr_zero: Vec<GaussComponent>,
        attr_one: Vec<GaussComponent>,
        attr_one_prior: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::Config("mixture dimension must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&attr_one_prior) {
            return Err(CoreError::Config(format!(
                "attribute prior must lie in [0, 1], got {attr_one_prior}"
            )));
        }
        for (which, comps) in [("attribute 0", &attr_zero), ("attribute 1", &attr_one)] {
            if comps.is_empty() {
                return Err(CoreError::Config(format!(
                    "{which} conditional needs at least one component"
                )));
            }
            let mut wsum = 0.0;
            for (k, c) in comps.iter().enumerate() {
                // Rejects NaN as well as genuinely negative weights.
                if c.weight < 0.0 || c.weight.is_nan() {
                    return Err(CoreError::Config(format!(
                        "{which} component {k}: weight {} is negative or NaN",
                        c.weight
                    )));
                }
                wsum += c.weight;
                if c.mean.len() != dim || c.cov.nrows() != dim || c.cov.ncols() != dim {
                    return Err(CoreError::Config(format!(
                        "{which} component {k}: mean/cov shapes do not match dim {dim}"
                    )));
                }
                for i in 0..dim {
                    for j in 0..i {
                        let (a, b) = (c.cov[(i, j)], c.cov[(j, i)]);
                        if (a - b).abs() > 1e-12 * (1.0 + a.abs() + b.abs()) {
                            return Err(CoreError::Config(format!(
                                "{which} component {k}: covariance is not symmetric at ({i},{j})"
                            )));
                        }
                    }
                }
                if Cholesky::new(c.cov.clone()).is_none() {
                    return Err(CoreError::Config(format!(
                        "{which} component {k}: covariance is not positive definite"
                    )));
                }
            }
            if (wsum - 1.0).abs() > 1e-12 {
                return Err(CoreError::Config(format!(
                    "{which} weights sum to {wsum}, expected 1 within 1e-12"
                )));
            }
        }
        Ok(Self {
            dim,
            comps: [attr_zero, attr_one],
            attr_one_prior,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn attr_prior(&self, s: Attr) -> f64 {
        match s {
            Attr::Zero => 1.0 - self.attr_one_prior,
            Attr::One => self.attr_one_prior,
        }
    }

    pub fn components(&self, s: Attr) -> &[GaussComponent] {
        &self.comps[s.index()]
    }

    /// Mean of the conditional mixture `E[x | s]`.
    pub fn conditional_mean(&self, s: Attr) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for c in self.components(s) {
            m += &c.mean * c.weight;
        }
        m
    }

    /// Draw `n` labeled points. Per point the stream order is: attribute
    /// uniform, component uniform, then `d` standard normals.
    pub fn sample_data(&self, n: usize, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chols: [Vec<(DVector<f64>, DMatrix<f64>)>; 2] = [0, 1].map(|s| {
            self.comps[s]
                .iter()
                .map(|c| {
                    let l = Cholesky::new(c.cov.clone())
                        .expect("covariances validated at construction")
                        .l();
                    (c.mean.clone(), l)
                })
                .collect()
        });
        let mut points = DMatrix::zeros(n, self.dim);
        let mut attrs = Vec::with_capacity(n);
        for i in 0..n {
            let attr = if rng.gen::<f64>() < self.attr_one_prior {
                Attr::One
            } else {
                Attr::Zero
            };
            let u: f64 = rng.gen();
            let comps = &self.comps[attr.index()];
            let mut k = comps.len() - 1;
            let mut acc = 0.0;
            for (idx, c) in comps.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = idx;
                    break;
                }
            }
            let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (mean, l) = &chols[attr.index()][k];
            let x = mean + l * z;
            points.row_mut(i).copy_from(&x.transpose());
            attrs.push(attr);
        }
        LabeledSet::new(points, attrs, seed).expect("constructed with matching lengths")
    }

    /// Components of the time-`t` perturbed conditional: means shrink by
    /// `alpha`, covariances become `alpha^2 Sigma + sigma^2 I`.
    pub fn perturbed_components(&self, s: Attr, mc: MarginalCoeffs) -> Vec<GaussComponent> {
        let a2 = mc.alpha * mc.alpha;
        let s2 = mc.sigma * mc.sigma;
        self.components(s)
            .iter()
            .map(|c| {
                let mut cov = &c.cov * a2;
                for i in 0..self.dim {
                    cov[(i, i)] += s2;
                }
                GaussComponent {
                    weight: c.weight,
                    mean: &c.mean * mc.alpha,
                    cov,
                }
            })
            .collect()
    }

    /// Schedule-aware wrapper around [`ConditionalGmm::perturbed_components`].
    pub fn perturbed_at(&self, sched: &VpSchedule, t: f64, s: Attr) -> Result<Vec<GaussComponent>> {
        Ok(self.perturbed_components(s, sched.marginal_coeffs(t)?))
    }

    /// Factorized form of the perturbed conditional at one `(t, s)`,
    /// reusable across a whole batch of points.
    pub fn prepare(&self, sched: &VpSchedule, t: f64, s: Attr) -> Result<PreparedMixture> {
        PreparedMixture::from_components(self.perturbed_at(sched, t, s)?)
    }

    /// Factorized perturbed *unconditional* mixture
    /// `p_t(x) = sum_s p(s) p_t(x | s)` at one `t`.
    pub fn prepare_unconditional(&self, sched: &VpSchedule, t: f64) -> Result<PreparedMixture> {
        let mut comps = Vec::new();
        for s in [Attr::Zero, Attr::One] {
            let prior = self.attr_prior(s);
            if prior == 0.0 {
                continue;
            }
            for mut c in self.perturbed_at(sched, t, s)? {
                c.weight *= prior;
                comps.push(c);
            }
        }
        PreparedMixture::from_components(comps)
    }

    /// Exact log-density `log p_t(x | s)`.
    pub fn log_density(
        &self,
        sched: &VpSchedule,
        x: &DVector<f64>,
        t: f64,
        s: Attr,
    ) -> Result<f64> {
        Ok(self.prepare(sched, t, s)?.log_density(x))
    }

    /// Exact perturbed-conditional score `grad_x log p_t(x | s)`.
    pub fn analytic_score(
        &self,
        sched: &VpSchedule,
        x: &DVector<f64>,
        t: f64,
        s: Attr,
    ) -> Result<DVector<f64>> {
        Ok(self.prepare(sched, t, s)?.score(x))
    }

    /// Scores for every row of `xs` at one `(t, s)`.
    pub fn analytic_score_batch(
        &self,
        sched: &VpSchedule,
        xs: &DMatrix<f64>,
        t: f64,
        s: Attr,
    ) -> Result<DMatrix<f64>> {
        if xs.ncols() != self.dim {
            return Err(CoreError::Input(format!(
                "points have dimension {}, mixture has {}",
                xs.ncols(),
                self.dim
            )));
        }
        let prep = self.prepare(sched, t, s)?;
        let mut out = DMatrix::zeros(xs.nrows(), xs.ncols());
        let mut xi = DVector::zeros(self.dim);
        for i in 0..xs.nrows() {
            xi.copy_from(&xs.row(i).transpose());
            out.row_mut(i).copy_from(&prep.score(&xi).transpose());
        }
        Ok(out)
    }
}

/// One Gaussian of a prepared mixture: Cholesky factor plus the constant part
/// of its weighted log-density.
struct PreparedGaussian {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `ln w - d/2 ln(2 pi) - sum_i ln L_ii`
    log_norm: f64,
}

impl PreparedGaussian {
    /// `ln(w N(x; mean, cov))`
    fn weighted_log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor is nonsingular by construction");
        self.log_norm - 0.5 * y.norm_squared()
    }

    /// `grad_x ln N(x; mean, cov) = -cov^{-1} (x - mean)`
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.chol.solve(&(x - &self.mean))
    }
}

/// Mixture factorized for repeated density/score evaluation at a fixed time.
pub struct PreparedMixture {
    comps: Vec<PreparedGaussian>,
}

/// Below this weighted log-density the mixture has underflowed to zero in
/// `f64`; the score then falls back to the dominant component's gradient.
const FAR_FIELD_LOG_DENSITY: f64 = -700.0;

impl PreparedMixture {
    fn from_components(comps: Vec<GaussComponent>) -> Result<Self> {
        let dim = comps.first().map_or(0, |c| c.mean.len());
        let half_log_two_pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut prepared = Vec::with_capacity(comps.len());
        for c in comps {
            if c.weight == 0.0 {
                continue;
            }
            let chol = Cholesky::new(c.cov).ok_or_else(|| {
                CoreError::Numerical("perturbed covariance lost positive definiteness".into())
            })?;
            let log_det_l: f64 = (0..dim).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
            prepared.push(PreparedGaussian {
                log_norm: c.weight.ln() - dim as f64 * half_log_two_pi - log_det_l,
                mean: c.mean,
                chol,
            });
        }
        if prepared.is_empty() {
            return Err(CoreError::Config(
                "prepared mixture has no components with positive weight".into(),
            ));
        }
        Ok(Self { comps: prepared })
    }

    /// `log sum_k w_k N(x; ...)` via log-sum-exp.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let logs: Vec<f64> = self
            .comps
            .iter()
            .map(|c| c.weighted_log_density(x))
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }

    /// Mixture score: responsibility-weighted component gradients. Far from
    /// all components (every weighted log-density below `-700`) the density
    /// underflows, so the dominant component alone defines the direction.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        let logs: Vec<f64> = self
            .comps
            .iter()
            .map(|c| c.weighted_log_density(x))
            .collect();
        let (kmax, &lmax) = logs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least one component");
        if lmax < FAR_FIELD_LOG_DENSITY {
            return self.comps[kmax].gradient(x);
        }
        let mut z = 0.0;
        let mut acc = DVector::zeros(x.len());
        for (c, &l) in self.comps.iter().zip(&logs) {
            let r = (l - lmax).exp();
            z += r;
            acc += c.gradient(x) * r;
        }
        acc / z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::gaussian_w2;

    /// Anisotropic two-component mixture used in oracle tests.
    fn wide_gmm() -> ConditionalGmm {
        let c0a = GaussComponent {
            weight: 0.7,
            mean: DVector::from_vec(vec![-2.0, 0.5]),
            cov: DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.7]),
        };
        let c0b = GaussComponent {
            weight: 0.3,
            mean: DVector::from_vec(vec![-0.5, -1.0]),
            cov: DMatrix::from_row_slice(2, 2, &[0.6, -0.2, -0.2, 1.2]),
        };
        let c1 = GaussComponent {
            weight: 1.0,
            mean: DVector::from_vec(vec![2.0, -0.5]),
            cov: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 1.1]),
        };
        ConditionalGmm::new(2, vec![c0a, c0b], vec![c1], 0.4).unwrap()
    }

    #[test]
    fn construction_validates() {
        let id = DMatrix::identity(2, 2);
        let ok = GaussComponent {
            weight: 1.0,
            mean: DVector::zeros(2),
            cov: id.clone(),
        };
        // Weights must sum to one.
        let half = GaussComponent {
            weight: 0.5,
            ..ok.clone()
        };
        assert!(matches!(
            ConditionalGmm::new(2, vec![half], vec![ok.clone()], 0.5),
            Err(CoreError::Config(_))
        ));
        // Covariance must be positive definite.
        let bad_cov = GaussComponent {
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            ..ok.clone()
        };
        assert!(matches!(
            ConditionalGmm::new(2, vec![bad_cov], vec![ok.clone()], 0.5),
            Err(CoreError::Config(_))
        ));
        // Covariance must be symmetric.
        let asym = GaussComponent {
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]),
            ..ok.clone()
        };
        assert!(matches!(
            ConditionalGmm::new(2, vec![asym], vec![ok.clone()], 0.5),
            Err(CoreError::Config(_))
        ));
        // Prior in range, nonempty conditionals, matching dims.
        assert!(ConditionalGmm::new(2, vec![ok.clone()], vec![ok.clone()], 1.5).is_err());
        assert!(ConditionalGmm::new(2, vec![], vec![ok.clone()], 0.5).is_err());
        let wrong_dim = GaussComponent {
            mean: DVector::zeros(3),
            ..ok.clone()
        };
        assert!(ConditionalGmm::new(2, vec![wrong_dim], vec![ok], 0.5).is_err());
    }

    #[test]
    fn perturbation_endpoints() {
        let gmm = wide_gmm();
        let sched = VpSchedule::default_benchmark();

        // t = 0 reproduces the data mixture exactly.
        let at0 = gmm.perturbed_at(&sched, 0.0, Attr::Zero).unwrap();
        for (p, c) in at0.iter().zip(gmm.components(Attr::Zero)) {
            assert!((&p.mean - &c.mean).amax() < 1e-15);
            assert!((&p.cov - &c.cov).amax() < 1e-15);
        }

        // t = 1: every perturbed component is within W2 0.02 of N(0, I), so
        // the weighted per-component transport cost to the standard normal
        // prior is below 0.02 for both conditionals combined.
        let zero_mean = DVector::zeros(2);
        let id = DMatrix::identity(2, 2);
        let mut total = 0.0;
        for s in [Attr::Zero, Attr::One] {
            for p in gmm.perturbed_at(&sched, 1.0, s).unwrap() {
                total += gmm.attr_prior(s)
                    * p.weight
                    * gaussian_w2(&p.mean, &p.cov, &zero_mean, &id).unwrap();
            }
        }
        assert!(total < 0.02, "mixture-to-prior transport bound {total}");
    }

    #[test]
    fn log_density_matches_mc_normalization() {
        // Importance sampling with a wide normal proposal: the integral of
        // exp(log_density) over the plane must be 1 within 2 percent.
        let gmm = wide_gmm();
        let sched = VpSchedule::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(901);
        let scale = 3.0_f64;
        let log_q_norm = -(2.0 * std::f64::consts::PI * scale * scale).ln();
        for (t, s) in [(0.0, Attr::Zero), (0.35, Attr::One), (0.9, Attr::Zero)] {
            let prep = gmm.prepare(&sched, t, s).unwrap();
            let n = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let x = DVector::from_fn(2, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
                let log_q = log_q_norm - 0.5 * x.norm_squared() / (scale * scale);
                acc += (prep.log_density(&x) - log_q).exp();
            }
            let integral = acc / n as f64;
            assert!(
                (integral - 1.0).abs() < 0.02,
                "t={t} s={s:?}: integral={integral}"
            );
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        // Central differences of log_density at 20 seeded random triples.
        let gmm = wide_gmm();
        let sched = VpSchedule::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let h = 1e-5;
        for trial in 0..20 {
            let x = DVector::from_fn(2, |_, _| 4.0 * rng.sample::<f64, _>(StandardNormal));
            let t = 0.01 + 0.99 * rng.gen::<f64>();
            let s = if rng.gen::<bool>() {
                Attr::One
            } else {
                Attr::Zero
            };
            let score = gmm.analytic_score(&sched, &x, t, s).unwrap();
            let mut fd = DVector::zeros(2);
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                fd[j] = (gmm.log_density(&sched, &xp, t, s).unwrap()
                    - gmm.log_density(&sched, &xm, t, s).unwrap())
                    / (2.0 * h);
            }
            let rel = (&score - &fd).norm() / fd.norm().max(1e-12);
            assert!(rel < 1e-5, "trial {trial}: rel={rel:e} t={t} s={s:?}");
        }
    }

    #[test]
    fn far_field_score_is_finite_and_points_home() {
        let gmm = wide_gmm();
        let sched = VpSchedule::default_benchmark();
        let x = DVector::from_vec(vec![1e3, -1e3]);
        let ld = gmm.log_density(&sched, &x, 0.2, Attr::Zero).unwrap();
        assert!(ld.is_finite() && ld < FAR_FIELD_LOG_DENSITY);
        let score = gmm.analytic_score(&sched, &x, 0.2, Attr::Zero).unwrap();
        assert!(score.iter().all(|v| v.is_finite()));
        // Pointing toward the mixture mass: positive projection on (mean - x).
        let to_mass = gmm.conditional_mean(Attr::Zero) - &x;
        assert!(score.dot(&to_mass) > 0.0);
    }

    #[test]
    fn sampling_moments_match_mixture() {
        let gmm = wide_gmm();
        let n = 100_000;
        let set = gmm.sample_data(n, 4242);
        assert_eq!(set.len(), n);
        assert_eq!(set.dim(), 2);

        // Attribute fractions near the prior (SE ~ 0.0016).
        let [n0, n1] = set.counts();
        let frac1 = n1 as f64 / n as f64;
        assert!((frac1 - 0.4).abs() < 0.006, "frac1={frac1}");
        assert_eq!(n0 + n1, n);

        // Conditional means within ~5 standard errors.
        for s in [Attr::Zero, Attr::One] {
            let pts = set.points_of(s);
            let expect = gmm.conditional_mean(s);
            for j in 0..2 {
                let mean_j = pts.column(j).mean();
                let tol = 5.0 * 1.6 / (pts.nrows() as f64).sqrt();
                assert!(
                    (mean_j - expect[j]).abs() < tol,
                    "s={s:?} coord {j}: {mean_j} vs {}",
                    expect[j]
                );
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let gmm = wide_gmm();
        let a = gmm.sample_data(512, 7);
        let b = gmm.sample_data(512, 7);
        let c = gmm.sample_data(512, 8);
        assert_eq!(a.points(), b.points());
        assert_eq!(a.attrs(), b.attrs());
        assert_ne!(a.points(), c.points());
    }

    #[test]
    fn near_degenerate_covariance_collapses_to_mean() {
        let eps = 1e-12;
        let comp = GaussComponent {
            weight: 1.0,
            mean: DVector::from_vec(vec![3.0, -1.0]),
            cov: DMatrix::identity(2, 2) * eps,
        };
        let gmm = ConditionalGmm::new(2, vec![comp.clone()], vec![comp], 0.5).unwrap();
        let set = gmm.sample_data(1000, 99);
        for i in 0..set.len() {
            assert!((set.points()[(i, 0)] - 3.0).abs() < 1e-4);
            assert!((set.points()[(i, 1)] + 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let gmm = wide_gmm();
        let set = gmm.sample_data(257, 31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.csv");
        set.write_csv(&path).unwrap();
        let back = LabeledSet::read_csv(&path).unwrap();
        assert_eq!(set.points(), back.points());
        assert_eq!(set.attrs(), back.attrs());
    }

    #[test]
    fn csv_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, content: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, content).unwrap();
            p
        };
        let bad_header = write("a.csv", "a,b,s\n1,2,0\n");
        assert!(LabeledSet::read_csv(&bad_header).is_err());
        let bad_attr = write("b.csv", "x0,x1,s\n1,2,7\n");
        assert!(LabeledSet::read_csv(&bad_attr).is_err());
        let bad_float = write("c.csv", "x0,x1,s\n1,zzz,0\n");
        assert!(LabeledSet::read_csv(&bad_float).is_err());
        let no_attr_col = write("d.csv", "x0,x1\n1,2\n");
        assert!(LabeledSet::read_csv(&no_attr_col).is_err());
    }

    #[test]
    fn labeled_set_stacking_and_splitting() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(1, 2, &[5.0, 6.0]);
        let set = LabeledSet::from_parts(&[(&a, Attr::Zero), (&b, Attr::One)], 5).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.counts(), [2, 1]);
        assert_eq!(set.points_of(Attr::One), b);
        assert_eq!(set.points_of(Attr::Zero), a);
        // Length mismatch is rejected.
        assert!(LabeledSet::new(a, vec![Attr::Zero], 0).is_err());
    }
}

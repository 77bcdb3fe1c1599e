//! Fairness and fidelity evaluation.
//!
//! * Balanced error rate (BER) of an attribute probe:
//!   `ber = (P(f(X)=0 | S=1) + P(f(X)=1 | S=0)) / 2`. A BER near `1/2` means
//!   no probe can recover the attribute from the coordinates — the
//!   non-distinguishability notion of fairness used throughout this crate.
//! * Cross evaluation: train the probe on one dataset, measure BER on the
//!   other, in both directions.
//! * Fréchet (2-Wasserstein-squared under Gaussian fits) distance between
//!   point clouds.
//! * PCA by power iteration with deflation, with axes defined by a reference
//!   pair so multiple generated sets can be projected into the same plane.
//! * Average ground-truth log-likelihood of a point cloud under the
//!   perturbed unconditional mixture.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gmm::{Attr, ConditionalGmm, LabeledSet};
use crate::schedule::VpSchedule;
use crate::seeding::derive_seed;

/// Direction tag of a report whose probe was trained on the synthetic set.
pub const TAG_SYN_TO_ORIG: &str = "Syn→Orig";
/// Direction tag of a report whose probe was trained on the reference set.
pub const TAG_ORIG_TO_SYN: &str = "Orig→Syn";

/// Probe architecture used to predict the attribute from coordinates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Probe {
    /// Logistic regression on raw coordinates (the default).
    #[default]
    Linear,
    /// One-hidden-layer tanh network, e.g. `hidden = 32`.
    Mlp { hidden: usize },
}

/// Logistic-regression attribute probe.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub w: DVector<f64>,
    pub b: f64,
    /// Accuracy on its own training set.
    pub train_accuracy: f64,
}

/// One-hidden-layer tanh probe.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DVector<f64>,
    b2: f64,
    pub train_accuracy: f64,
}

/// Trained probe of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrClassifier {
    Linear(LinearClassifier),
    Mlp(MlpClassifier),
}

impl AttrClassifier {
    /// Probability assigned to attribute one.
    pub fn prob_one(&self, x: &DVector<f64>) -> f64 {
        match self {
            AttrClassifier::Linear(c) => sigmoid(c.w.dot(x) + c.b),
            AttrClassifier::Mlp(c) => {
                let h = (&c.w1 * x + &c.b1).map(f64::tanh);
                sigmoid(c.w2.dot(&h) + c.b2)
            }
        }
    }

    /// Hard decision: attribute one iff `P(s=1 | x) > 1/2`.
    pub fn predict(&self, x: &DVector<f64>) -> Attr {
        if self.prob_one(x) > 0.5 {
            Attr::One
        } else {
            Attr::Zero
        }
    }

    pub fn train_accuracy(&self) -> f64 {
        match self {
            AttrClassifier::Linear(c) => c.train_accuracy,
            AttrClassifier::Mlp(c) => c.train_accuracy,
        }
    }
}

/// Balanced-error-rate report for one probe/dataset pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Which set trained the probe, e.g. [`TAG_SYN_TO_ORIG`].
    pub direction: String,
    /// `P(f(X) = 1 | S = 0)` on the evaluation set.
    pub err_s0: f64,
    /// `P(f(X) = 0 | S = 1)` on the evaluation set.
    pub err_s1: f64,
    /// `|err_s0 - err_s1|`.
    pub gap: f64,
    /// `(err_s0 + err_s1) / 2`.
    pub ber: f64,
    /// Evaluation rows carrying attribute zero.
    pub n_s0: usize,
    /// Evaluation rows carrying attribute one.
    pub n_s1: usize,
    /// Probe accuracy on its own training set.
    pub train_accuracy: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const PROBE_LEARNING_RATE: f64 = 0.1;
const PROBE_STEPS: usize = 2000;

fn check_trainable(data: &LabeledSet) -> Result<()> {
    if data.is_empty() {
        return Err(CoreError::Input(
            "cannot train a probe on an empty set".into(),
        ));
    }
    if data.points().iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Input(
            "probe training data contains non-finite coordinates".into(),
        ));
    }
    let [n0, n1] = data.counts();
    if n0 == 0 || n1 == 0 {
        let missing = if n0 == 0 { 0 } else { 1 };
        return Err(CoreError::Input(format!(
            "probe training data has no rows with attribute {missing}"
        )));
    }
    Ok(())
}

/// Fit an attribute probe by full-batch gradient descent on the logistic
/// loss (learning rate 0.1, 2000 steps). The linear probe starts from zeros
/// and is fully determined by the data; the MLP probe draws its initial
/// weights from `seed`.
pub fn train_classifier(data: &LabeledSet, probe: Probe, seed: u64) -> Result<AttrClassifier> {
    check_trainable(data)?;
    let n = data.len();
    let d = data.dim();
    let x = data.points();
    let y: DVector<f64> = DVector::from_fn(n, |i, _| data.attrs()[i].index() as f64);

    let clf = match probe {
        Probe::Linear => {
            let mut w = DVector::zeros(d);
            let mut b = 0.0;
            for _ in 0..PROBE_STEPS {
                let z = x * &w;
                let resid = DVector::from_fn(n, |i, _| sigmoid(z[i] + b) - y[i]);
                let grad_w = x.transpose() * &resid / n as f64;
                let grad_b = resid.mean();
                w -= grad_w * PROBE_LEARNING_RATE;
                b -= grad_b * PROBE_LEARNING_RATE;
            }
            AttrClassifier::Linear(LinearClassifier {
                w,
                b,
                train_accuracy: 0.0,
            })
        }
        Probe::Mlp { hidden } => {
            if hidden == 0 {
                return Err(CoreError::Config("mlp probe needs hidden >= 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sd1 = 1.0 / (d as f64).sqrt();
            let sd2 = 1.0 / (hidden as f64).sqrt();
            let mut w1 =
                DMatrix::from_fn(hidden, d, |_, _| sd1 * rng.sample::<f64, _>(StandardNormal));
            let mut b1: DVector<f64> = DVector::zeros(hidden);
            let mut w2 =
                DVector::from_fn(hidden, |_, _| sd2 * rng.sample::<f64, _>(StandardNormal));
            let mut b2 = 0.0;
            let xt = x.transpose();
            for _ in 0..PROBE_STEPS {
                // Forward: H = tanh(W1 X^T + b1), p = sigmoid(w2 . H + b2).
                let mut h: DMatrix<f64> = &w1 * &xt;
                for j in 0..n {
                    for i in 0..hidden {
                        h[(i, j)] = (h[(i, j)] + b1[i]).tanh();
                    }
                }
                let z = h.transpose() * &w2;
                let resid = DVector::from_fn(n, |i, _| (sigmoid(z[i] + b2) - y[i]) / n as f64);
                // Backward.
                let grad_w2 = &h * &resid;
                let grad_b2 = resid.sum();
                // dH = w2 resid^T, through tanh: (1 - H^2).
                let mut dpre: DMatrix<f64> = DMatrix::zeros(hidden, n);
                for j in 0..n {
                    for i in 0..hidden {
                        dpre[(i, j)] = w2[i] * resid[j] * (1.0 - h[(i, j)] * h[(i, j)]);
                    }
                }
                let grad_w1 = &dpre * x;
                let grad_b1 = DVector::from_fn(hidden, |i, _| dpre.row(i).sum());
                w1 -= grad_w1 * PROBE_LEARNING_RATE;
                b1 -= grad_b1 * PROBE_LEARNING_RATE;
                w2 -= grad_w2 * PROBE_LEARNING_RATE;
                b2 -= grad_b2 * PROBE_LEARNING_RATE;
            }
            AttrClassifier::Mlp(MlpClassifier {
                w1,
                b1,
                w2,
                b2,
                train_accuracy: 0.0,
            })
        }
    };

    // Fill in training accuracy.
    let mut correct = 0usize;
    let mut xi = DVector::zeros(d);
    for i in 0..n {
        xi.copy_from(&x.row(i).transpose());
        if clf.predict(&xi) == data.attrs()[i] {
            correct += 1;
        }
    }
    let acc = correct as f64 / n as f64;
    Ok(match clf {
        AttrClassifier::Linear(mut c) => {
            c.train_accuracy = acc;
            AttrClassifier::Linear(c)
        }
        AttrClassifier::Mlp(mut c) => {
            c.train_accuracy = acc;
            AttrClassifier::Mlp(c)
        }
    })
}

/// Balanced error rate of `clf` on `eval`, reported under a direction tag.
/// Both attribute values must be present in the evaluation set.
pub fn ber(clf: &AttrClassifier, eval: &LabeledSet, direction: &str) -> Result<FairnessReport> {
    let [n0, n1] = eval.counts();
    if n0 == 0 || n1 == 0 {
        let missing = if n0 == 0 { 0 } else { 1 };
        return Err(CoreError::Input(format!(
            "evaluation set has no rows with attribute {missing}"
        )));
    }
    let mut wrong0 = 0usize; // predicted one among attribute-zero rows
    let mut wrong1 = 0usize; // predicted zero among attribute-one rows
    let mut xi = DVector::zeros(eval.dim());
    for i in 0..eval.len() {
        xi.copy_from(&eval.points().row(i).transpose());
        let pred = clf.predict(&xi);
        match eval.attrs()[i] {
            Attr::Zero if pred == Attr::One => wrong0 += 1,
            Attr::One if pred == Attr::Zero => wrong1 += 1,
            _ => {}
        }
    }
    let err_s0 = wrong0 as f64 / n0 as f64;
    let err_s1 = wrong1 as f64 / n1 as f64;
    Ok(FairnessReport {
        direction: direction.to_string(),
        err_s0,
        err_s1,
        gap: (err_s0 - err_s1).abs(),
        ber: 0.5 * (err_s0 + err_s1),
        n_s0: n0,
        n_s1: n1,
        train_accuracy: clf.train_accuracy(),
    })
}

/// Two-direction cross evaluation: train on `synthetic`, test on
/// `reference` (tag [`TAG_SYN_TO_ORIG`]) and vice versa
/// (tag [`TAG_ORIG_TO_SYN`]).
pub fn cross_eval(
    synthetic: &LabeledSet,
    reference: &LabeledSet,
    probe: Probe,
    seed: u64,
) -> Result<(FairnessReport, FairnessReport)> {
    let clf_syn = train_classifier(synthetic, probe, derive_seed(seed, "cross.synthetic"))?;
    let clf_ref = train_classifier(reference, probe, derive_seed(seed, "cross.reference"))?;
    let syn_to_orig = ber(&clf_syn, reference, TAG_SYN_TO_ORIG)?;
    let orig_to_syn = ber(&clf_ref, synthetic, TAG_ORIG_TO_SYN)?;
    Ok((syn_to_orig, orig_to_syn))
}

/// Gaussian fit of a point cloud: mean and unbiased covariance.
pub fn fit_gaussian(points: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = (points.nrows(), points.ncols());
    if n < 2 {
        return Err(CoreError::Input(format!(
            "need at least 2 points to fit a covariance, got {n}"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Input("points contain non-finite values".into()));
    }
    let mean = DVector::from_fn(d, |j, _| points.column(j).mean());
    let mut centered = points.clone();
    for i in 0..n {
        for j in 0..d {
            centered[(i, j)] -= mean[j];
        }
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// Symmetric PSD square root via eigendecomposition of the symmetrized
/// matrix, clamping negative eigenvalues at zero. Returns the root and
/// whether clamping occurred.
fn spd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clamped = false;
    let roots: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < 0.0 {
                clamped = true;
                0.0
            } else {
                l.sqrt()
            }
        })
        .collect();
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, r) in roots.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*r);
    }
    (&scaled * v.transpose(), clamped)
}

/// Fréchet distance between two Gaussians given by parameters:
/// `|mu_a - mu_b|^2 + tr(Ca + Cb - 2 (Ca^1/2 Cb Ca^1/2)^1/2)`.
pub fn gaussian_frechet(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    if mean_a.len() != mean_b.len() || cov_a.shape() != cov_b.shape() {
        return Err(CoreError::Input(
            "gaussian parameters have mismatched dimensions".into(),
        ));
    }
    let (root_a, _) = spd_sqrt(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let (cross, _) = spd_sqrt(&inner);
    let value =
        (mean_a - mean_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// 2-Wasserstein distance between two Gaussians (square root of the Fréchet
/// value).
pub fn gaussian_w2(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    Ok(gaussian_frechet(mean_a, cov_a, mean_b, cov_b)?.sqrt())
}

/// Fréchet distance plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    pub value: f64,
    /// True when a fitted covariance was rank deficient and `1e-8 I` was
    /// added before taking matrix roots.
    pub regularized: bool,
}

/// Fréchet distance between Gaussian fits of two point clouds. Each cloud
/// needs at least `d + 1` points; rank-deficient fits are regularized with
/// `+1e-8 I` and flagged.
pub fn frechet_distance_detailed(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<FrechetStats> {
    if a.ncols() != b.ncols() {
        return Err(CoreError::Input(format!(
            "point clouds have different dimensions: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let d = a.ncols();
    for (name, m) in [("first", a), ("second", b)] {
        if m.nrows() < d + 1 {
            return Err(CoreError::Input(format!(
                "{name} cloud has {} points; a d={d} Gaussian fit needs at least {}",
                m.nrows(),
                d + 1
            )));
        }
    }
    let (mean_a, mut cov_a) = fit_gaussian(a)?;
    let (mean_b, mut cov_b) = fit_gaussian(b)?;
    let mut regularized = false;
    for cov in [&mut cov_a, &mut cov_b] {
        let min_eig = SymmetricEigen::new(cov.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < 1e-10 {
            regularized = true;
            for i in 0..d {
                cov[(i, i)] += 1e-8;
            }
        }
    }
    Ok(FrechetStats {
        value: gaussian_frechet(&mean_a, &cov_a, &mean_b, &cov_b)?,
        regularized,
    })
}

/// Fréchet distance between Gaussian fits of two point clouds.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    Ok(frechet_distance_detailed(a, b)?.value)
}

/// PCA basis and projections produced by [`pca_project`].
#[derive(Debug, Clone)]
pub struct PcaResult {
    /// Mean of the pooled reference points; projection subtracts it.
    pub mean: DVector<f64>,
    /// Top-2 principal axes (unit vectors).
    pub axes: [DVector<f64>; 2],
    /// Variances along the axes.
    pub eigenvalues: [f64; 2],
    /// Projections of the reference rows restricted to each attribute.
    pub reference_projections: [DMatrix<f64>; 2],
    /// Projections of the target clouds, in input order.
    pub target_projections: Vec<DMatrix<f64>>,
}

impl PcaResult {
    /// Project further points into the same plane.
    pub fn project(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(points.nrows(), 2);
        for i in 0..points.nrows() {
            for (k, axis) in self.axes.iter().enumerate() {
                let mut acc = 0.0;
                for j in 0..points.ncols() {
                    acc += (points[(i, j)] - self.mean[j]) * axis[j];
                }
                out[(i, k)] = acc;
            }
        }
        out
    }
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Deterministic generic start direction for the power iteration.
fn power_start(d: usize) -> DVector<f64> {
    let mut v = DVector::from_fn(d, |j, _| 1.0 + 0.01 * ((j + 1) as f64).sin());
    v /= v.norm();
    v
}

/// Largest eigenpair of a symmetric PSD matrix by power iteration.
fn power_iteration(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let mut v = power_start(m.nrows());
    for iter in 0..POWER_MAX_ITERS {
        let mut w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            // The matrix annihilates v: eigenvalue 0 along this direction.
            return Ok((0.0, v));
        }
        w /= norm;
        if w.dot(&v) < 0.0 {
            w = -w;
        }
        let delta = (&w - &v).norm();
        v = w;
        if delta < POWER_TOL {
            let lambda = v.dot(&(m * &v));
            return Ok((lambda, v));
        }
        let _ = iter;
    }
    Err(CoreError::Numerical(format!(
        "power iteration did not converge within {POWER_MAX_ITERS} iterations (tol {POWER_TOL:e})"
    )))
}

/// Fit a two-axis PCA basis on the pooled reference pair and project the
/// reference (split by attribute) plus every target cloud onto it.
pub fn pca_project(reference: &LabeledSet, targets: &[&DMatrix<f64>]) -> Result<PcaResult> {
    let d = reference.dim();
    if d < 2 {
        return Err(CoreError::Input("pca needs dimension >= 2".into()));
    }
    if reference.len() < 3 {
        return Err(CoreError::Input(
            "pca reference needs at least 3 points".into(),
        ));
    }
    let [n0, n1] = reference.counts();
    if n0 == 0 || n1 == 0 {
        let missing = if n0 == 0 { 0 } else { 1 };
        return Err(CoreError::Input(format!(
            "pca reference has no rows with attribute {missing}"
        )));
    }
    for (idx, t) in targets.iter().enumerate() {
        if t.ncols() != d {
            return Err(CoreError::Input(format!(
                "target {idx} has dimension {} but the reference has {d}",
                t.ncols()
            )));
        }
    }
    let (mean, cov) = fit_gaussian(reference.points())?;
    let (l1, v1) = power_iteration(&cov)?;
    let deflated = &cov - &v1 * v1.transpose() * l1;
    let (l2, v2) = power_iteration(&deflated)?;
    let result = PcaResult {
        mean,
        axes: [v1, v2],
        eigenvalues: [l1, l2],
        reference_projections: [
            DMatrix::zeros(0, 2), // placeholders, replaced below
            DMatrix::zeros(0, 2),
        ],
        target_projections: Vec::new(),
    };
    let ref0 = result.project(&reference.points_of(Attr::Zero));
    let ref1 = result.project(&reference.points_of(Attr::One));
    let target_projections = targets.iter().map(|t| result.project(t)).collect();
    Ok(PcaResult {
        reference_projections: [ref0, ref1],
        target_projections,
        ..result
    })
}

/// Mean log-density of `points` under the perturbed unconditional mixture at
/// time `t` (use `t = 0` for the data distribution). Compensated summation
/// keeps the mean independent of row order to near machine precision.
pub fn avg_loglik(
    points: &DMatrix<f64>,
    gmm: &ConditionalGmm,
    sched: &VpSchedule,
    t: f64,
) -> Result<f64> {
    if points.nrows() == 0 {
        return Err(CoreError::Input(
            "cannot average log-likelihood over an empty cloud".into(),
        ));
    }
    if points.ncols() != gmm.dim() {
        return Err(CoreError::Input(format!(
            "points have dimension {}, mixture has {}",
            points.ncols(),
            gmm.dim()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Input("points contain non-finite values".into()));
    }
    let prep = gmm.prepare_unconditional(sched, t)?;
    let mut sum = 0.0;
    let mut comp = 0.0; // Kahan compensation
    let mut xi = DVector::zeros(points.ncols());
    for i in 0..points.nrows() {
        xi.copy_from(&points.row(i).transpose());
        let y = prep.log_density(&xi) - comp;
        let t_new = sum + y;
        comp = (t_new - sum) - y;
        sum = t_new;
    }
    Ok(sum / points.nrows() as f64)
}

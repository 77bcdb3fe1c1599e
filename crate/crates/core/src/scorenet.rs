//! Learned denoiser and its training loop.
//!
//! The network predicts the noise `eps` that produced `x_t = alpha x_0 +
//! sigma eps` from the noised point, a sinusoidal embedding of `t`, and a
//! learned embedding of the conditioning attribute. The corresponding score
//! field is `score(x, t, s) = -eps_hat(x, t, s) / sigma(t)`, exposed through
//! [`TrainedScore`].
//!
//! Everything is written against plain arrays with explicit forward and
//! backward passes so the gradients can be validated against central finite
//! differences parameter by parameter.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gmm::{Attr, LabeledSet};
use crate::schedule::VpSchedule;
use crate::score::ScoreSource;
use crate::seeding::sha256_hex;

/// Sin/cos features of the scalar time input.
pub const TIME_EMBED_DIM: usize = 16;
/// Learned embedding width per attribute.
pub const ATTR_EMBED_DIM: usize = 8;
/// Width of both hidden layers.
pub const HIDDEN_DIM: usize = 128;
/// Number of attribute values.
pub const NUM_ATTRS: usize = 2;
/// Training never samples `t` below this floor, and the trained score clamps
/// its `sigma(t)` denominator here.
pub const MIN_TRAIN_TIME: f64 = 1e-5;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Frequencies `10^(3j/7)` for `j = 0..8`, spanning 1 to 1000.
fn time_frequencies() -> [f64; TIME_EMBED_DIM / 2] {
    let mut f = [0.0; TIME_EMBED_DIM / 2];
    for (j, slot) in f.iter_mut().enumerate() {
        *slot = 10f64.powf(3.0 * j as f64 / 7.0);
    }
    f
}

/// All learnable arrays, in their canonical (flattening) order.
#[derive(Debug, Clone, PartialEq)]
struct MlpParams {
    attr_embed: Array2<f64>, // (NUM_ATTRS, ATTR_EMBED_DIM)
    w1: Array2<f64>,         // (in_dim, HIDDEN_DIM)
    b1: Array1<f64>,
    w2: Array2<f64>, // (HIDDEN_DIM, HIDDEN_DIM)
    b2: Array1<f64>,
    w3: Array2<f64>, // (HIDDEN_DIM, dim)
    b3: Array1<f64>,
}

/// Two-hidden-layer SiLU network predicting the noise vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserMlp {
    dim: usize,
    params: MlpParams,
}

struct ForwardCache {
    feats: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

impl DenoiserMlp {
    /// Network input width: coordinates, time features, attribute embedding.
    pub fn input_dim(dim: usize) -> usize {
        dim + TIME_EMBED_DIM + ATTR_EMBED_DIM
    }

    /// Fresh network. Hidden weights use Kaiming-style `N(0, sqrt(2 /
    /// fan_in))`, the attribute embedding `N(0, 1)`, the output layer a
    /// near-zero `N(0, 1e-4)` so the initial prediction is almost zero, and
    /// all biases start at zero. Draw order follows the flattening order.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::Config("denoiser needs dim >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = Self::input_dim(dim);
        let mut draw = |rows: usize, cols: usize, sd: f64| {
            Array2::from_shape_fn((rows, cols), |_| sd * rng.sample::<f64, _>(StandardNormal))
        };
        let attr_embed = draw(NUM_ATTRS, ATTR_EMBED_DIM, 1.0);
        let w1 = draw(in_dim, HIDDEN_DIM, (2.0 / in_dim as f64).sqrt());
        let w2 = draw(HIDDEN_DIM, HIDDEN_DIM, (2.0 / HIDDEN_DIM as f64).sqrt());
        let w3 = draw(HIDDEN_DIM, dim, 1e-4);
        Ok(Self {
            dim,
            params: MlpParams {
                attr_embed,
                w1,
                b1: Array1::zeros(HIDDEN_DIM),
                w2,
                b2: Array1::zeros(HIDDEN_DIM),
                w3,
                b3: Array1::zeros(dim),
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let p = &self.params;
        p.attr_embed.len()
            + p.w1.len()
            + p.b1.len()
            + p.w2.len()
            + p.b2.len()
            + p.w3.len()
            + p.b3.len()
    }

    /// Flatten all parameters in the canonical order `attr_embed, w1, b1,
    /// w2, b2, w3, b3`, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let p = &self.params;
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(p.attr_embed.iter());
        flat.extend(p.w1.iter());
        flat.extend(p.b1.iter());
        flat.extend(p.w2.iter());
        flat.extend(p.b2.iter());
        flat.extend(p.w3.iter());
        flat.extend(p.b3.iter());
        flat
    }

    /// Rebuild a network from a flat parameter vector (inverse of
    /// [`DenoiserMlp::to_flat`]).
    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::Config("denoiser needs dim >= 1".into()));
        }
        let in_dim = Self::input_dim(dim);
        let expected = NUM_ATTRS * ATTR_EMBED_DIM
            + in_dim * HIDDEN_DIM
            + HIDDEN_DIM
            + HIDDEN_DIM * HIDDEN_DIM
            + HIDDEN_DIM
            + HIDDEN_DIM * dim
            + dim;
        if flat.len() != expected {
            return Err(CoreError::Input(format!(
                "flat parameter vector has length {}, expected {expected} for dim {dim}",
                flat.len()
            )));
        }
        let mut offset = 0usize;
        let take2 = |rows: usize, cols: usize, offset: &mut usize| {
            let slice = &flat[*offset..*offset + rows * cols];
            *offset += rows * cols;
            Array2::from_shape_vec((rows, cols), slice.to_vec())
                .expect("shape matches slice length")
        };
        let attr_embed = take2(NUM_ATTRS, ATTR_EMBED_DIM, &mut offset);
        let w1 = take2(in_dim, HIDDEN_DIM, &mut offset);
        let b1 = Array1::from_vec(flat[offset..offset + HIDDEN_DIM].to_vec());
        offset += HIDDEN_DIM;
        let w2 = take2(HIDDEN_DIM, HIDDEN_DIM, &mut offset);
        let b2 = Array1::from_vec(flat[offset..offset + HIDDEN_DIM].to_vec());
        offset += HIDDEN_DIM;
        let w3 = take2(HIDDEN_DIM, dim, &mut offset);
        let b3 = Array1::from_vec(flat[offset..offset + dim].to_vec());
        offset += dim;
        debug_assert_eq!(offset, expected);
        Ok(Self {
            dim,
            params: MlpParams {
                attr_embed,
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            },
        })
    }

    /// Assemble the network input rows: coordinates, sin/cos time features,
    /// attribute embedding.
    fn features(&self, x: &Array2<f64>, ts: &[f64], attrs: &[Attr]) -> Array2<f64> {
        let n = x.nrows();
        let freqs = time_frequencies();
        let mut feats = Array2::zeros((n, Self::input_dim(self.dim)));
        for i in 0..n {
            for j in 0..self.dim {
                feats[(i, j)] = x[(i, j)];
            }
            for (k, f) in freqs.iter().enumerate() {
                let phase = f * ts[i];
                feats[(i, self.dim + 2 * k)] = phase.sin();
                feats[(i, self.dim + 2 * k + 1)] = phase.cos();
            }
            let row = attrs[i].index();
            for k in 0..ATTR_EMBED_DIM {
                feats[(i, self.dim + TIME_EMBED_DIM + k)] = self.params.attr_embed[(row, k)];
            }
        }
        feats
    }

    fn forward_cached(&self, feats: Array2<f64>) -> ForwardCache {
        let p = &self.params;
        let z1 = feats.dot(&p.w1) + &p.b1;
        let h1 = z1.mapv(silu);
        let z2 = h1.dot(&p.w2) + &p.b2;
        let h2 = z2.mapv(silu);
        let out = h2.dot(&p.w3) + &p.b3;
        ForwardCache {
            feats,
            z1,
            h1,
            z2,
            h2,
            out,
        }
    }

    /// Predicted noise for a batch of rows at per-row times and attributes.
    pub fn forward_batch(
        &self,
        x: &DMatrix<f64>,
        ts: &[f64],
        attrs: &[Attr],
    ) -> Result<DMatrix<f64>> {
        let n = x.nrows();
        if x.ncols() != self.dim {
            return Err(CoreError::Input(format!(
                "input has dimension {}, network expects {}",
                x.ncols(),
                self.dim
            )));
        }
        if ts.len() != n || attrs.len() != n {
            return Err(CoreError::Input(format!(
                "row counts disagree: {} points, {} times, {} attributes",
                n,
                ts.len(),
                attrs.len()
            )));
        }
        let xa = Array2::from_shape_fn((n, self.dim), |(i, j)| x[(i, j)]);
        let cache = self.forward_cached(self.features(&xa, ts, attrs));
        Ok(DMatrix::from_fn(n, self.dim, |i, j| cache.out[(i, j)]))
    }

    /// Predicted noise for a single point.
    pub fn forward(
        &self,
        x: &nalgebra::DVector<f64>,
        t: f64,
        attr: Attr,
    ) -> Result<nalgebra::DVector<f64>> {
        let xs = DMatrix::from_rows(&[x.transpose()]);
        Ok(self.forward_batch(&xs, &[t], &[attr])?.row(0).transpose())
    }
}

/// One frozen denoising batch: noised points with the exact noise that made
/// them. Separating the batch from the RNG keeps losses and gradients pure
/// functions, which is what the finite-difference checks need.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    x_t: Array2<f64>,
    ts: Vec<f64>,
    attrs: Vec<Attr>,
    eps: Array2<f64>,
}

impl NoisedBatch {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x_t.ncols()
    }
}

/// Draw a denoising batch: uniform rows of `data` (with replacement),
/// `t ~ U(MIN_TRAIN_TIME, 1)`, fresh Gaussian noise, and `x_t = alpha x_0 +
/// sigma eps`. Per sample the RNG is consumed in the order: row index, time,
/// noise coordinates.
pub fn make_noised_batch<R: Rng>(
    data: &LabeledSet,
    sched: &VpSchedule,
    batch_size: usize,
    rng: &mut R,
) -> Result<NoisedBatch> {
    if data.is_empty() {
        return Err(CoreError::Input(
            "cannot draw batches from an empty dataset".into(),
        ));
    }
    if batch_size == 0 {
        return Err(CoreError::Config("batch_size must be >= 1".into()));
    }
    let d = data.dim();
    let n = data.len();
    let mut x_t = Array2::zeros((batch_size, d));
    let mut eps = Array2::zeros((batch_size, d));
    let mut ts = Vec::with_capacity(batch_size);
    let mut attrs = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let row = rng.gen_range(0..n);
        let t = MIN_TRAIN_TIME + (1.0 - MIN_TRAIN_TIME) * rng.gen::<f64>();
        let coeffs = sched.marginal_coeffs(t)?;
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            eps[(i, j)] = e;
            x_t[(i, j)] = coeffs.alpha * data.points()[(row, j)] + coeffs.sigma * e;
        }
        ts.push(t);
        attrs.push(data.attrs()[row]);
    }
    Ok(NoisedBatch {
        x_t,
        ts,
        attrs,
        eps,
    })
}

/// Denoising loss on a frozen batch: mean over rows of `|eps_hat - eps|^2`
/// (summed over coordinates).
pub fn loss_on(model: &DenoiserMlp, batch: &NoisedBatch) -> f64 {
    let cache = model.forward_cached(model.features(&batch.x_t, &batch.ts, &batch.attrs));
    let diff = &cache.out - &batch.eps;
    diff.mapv(|v| v * v).sum() / batch.len() as f64
}

/// Loss plus its gradient with respect to every parameter, flattened in the
/// canonical order.
pub fn backward_on(model: &DenoiserMlp, batch: &NoisedBatch) -> (f64, Vec<f64>) {
    let n = batch.len();
    let d = model.dim;
    let p = &model.params;
    let cache = model.forward_cached(model.features(&batch.x_t, &batch.ts, &batch.attrs));
    let diff = &cache.out - &batch.eps;
    let loss = diff.mapv(|v| v * v).sum() / n as f64;

    let d_out = diff.mapv(|v| 2.0 * v / n as f64);
    let grad_w3 = cache.h2.t().dot(&d_out);
    let grad_b3 = d_out.sum_axis(Axis(0));
    let d_h2 = d_out.dot(&p.w3.t());
    let d_z2 = &d_h2 * &cache.z2.mapv(silu_prime);
    let grad_w2 = cache.h1.t().dot(&d_z2);
    let grad_b2 = d_z2.sum_axis(Axis(0));
    let d_h1 = d_z2.dot(&p.w2.t());
    let d_z1 = &d_h1 * &cache.z1.mapv(silu_prime);
    let grad_w1 = cache.feats.t().dot(&d_z1);
    let grad_b1 = d_z1.sum_axis(Axis(0));
    let d_feats = d_z1.dot(&p.w1.t());

    let mut grad_embed = Array2::<f64>::zeros((NUM_ATTRS, ATTR_EMBED_DIM));
    let base = d + TIME_EMBED_DIM;
    for i in 0..n {
        let row = batch.attrs[i].index();
        for k in 0..ATTR_EMBED_DIM {
            grad_embed[(row, k)] += d_feats[(i, base + k)];
        }
    }

    let mut flat = Vec::with_capacity(model.param_count());
    flat.extend(grad_embed.iter());
    flat.extend(grad_w1.iter());
    flat.extend(grad_b1.iter());
    flat.extend(grad_w2.iter());
    flat.extend(grad_b2.iter());
    flat.extend(grad_w3.iter());
    flat.extend(grad_b3.iter());
    (loss, flat)
}

/// Adam hyperparameters and loop size for denoiser training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            steps: 20_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::Config(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(CoreError::Config(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(CoreError::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Train the denoiser with Adam. Returns the trained network and the loss
/// curve sampled every 100 steps (always including the first and last step).
pub fn train(
    model: DenoiserMlp,
    data: &LabeledSet,
    sched: &VpSchedule,
    config: &TrainConfig,
) -> Result<(DenoiserMlp, Vec<(u32, f64)>)> {
    config.validate()?;
    if data.dim() != model.dim() {
        return Err(CoreError::Input(format!(
            "training data has dimension {}, network expects {}",
            data.dim(),
            model.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = model.dim();
    let mut flat = model.to_flat();
    let mut current = model;
    let mut m = vec![0.0; flat.len()];
    let mut v = vec![0.0; flat.len()];
    let mut curve: Vec<(u32, f64)> = Vec::new();
    let lr = config.learning_rate;

    for step in 0..config.steps {
        let batch = make_noised_batch(data, sched, config.batch_size, &mut rng)?;
        let (loss, grad) = backward_on(&current, &batch);
        if !loss.is_finite() {
            return Err(CoreError::Numerical(format!(
                "training diverged: loss became non-finite at step {step}"
            )));
        }
        if step % 100 == 0 || step + 1 == config.steps {
            curve.push((step, loss));
        }
        let t = f64::from(step + 1);
        let bc1 = 1.0 - config.beta1.powf(t);
        let bc2 = 1.0 - config.beta2.powf(t);
        for i in 0..flat.len() {
            let g = grad[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            flat[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        current = DenoiserMlp::from_flat(dim, &flat)?;
    }
    Ok((current, curve))
}

/// Architecture block of a serialized checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointArch {
    pub data_dim: usize,
    pub time_embed_dim: usize,
    pub attr_embed_dim: usize,
    pub hidden_dim: usize,
    pub num_attrs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointWeights {
    attr_embed: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: Vec<f64>,
}

/// JSON-serializable snapshot of a denoiser plus its training provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub arch: CheckpointArch,
    weights: CheckpointWeights,
    pub train_config: Option<TrainConfig>,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(model: &DenoiserMlp, train_config: Option<TrainConfig>) -> Self {
        let p = &model.params;
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            arch: CheckpointArch {
                data_dim: model.dim,
                time_embed_dim: TIME_EMBED_DIM,
                attr_embed_dim: ATTR_EMBED_DIM,
                hidden_dim: HIDDEN_DIM,
                num_attrs: NUM_ATTRS,
            },
            weights: CheckpointWeights {
                attr_embed: p.attr_embed.iter().copied().collect(),
                w1: p.w1.iter().copied().collect(),
                b1: p.b1.to_vec(),
                w2: p.w2.iter().copied().collect(),
                b2: p.b2.to_vec(),
                w3: p.w3.iter().copied().collect(),
                b3: p.b3.to_vec(),
            },
            train_config,
        }
    }

    /// Rebuild the network, validating schema, architecture and lengths.
    pub fn to_model(&self) -> Result<DenoiserMlp> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CoreError::Input(format!(
                "checkpoint schema version {} is not supported (expected {})",
                self.schema_version, CHECKPOINT_SCHEMA_VERSION
            )));
        }
        let a = &self.arch;
        if a.time_embed_dim != TIME_EMBED_DIM
            || a.attr_embed_dim != ATTR_EMBED_DIM
            || a.hidden_dim != HIDDEN_DIM
            || a.num_attrs != NUM_ATTRS
        {
            return Err(CoreError::Input(format!(
                "checkpoint architecture {a:?} does not match this build"
            )));
        }
        let d = a.data_dim;
        let in_dim = DenoiserMlp::input_dim(d);
        let w = &self.weights;
        let checks = [
            ("attr_embed", w.attr_embed.len(), NUM_ATTRS * ATTR_EMBED_DIM),
            ("w1", w.w1.len(), in_dim * HIDDEN_DIM),
            ("b1", w.b1.len(), HIDDEN_DIM),
            ("w2", w.w2.len(), HIDDEN_DIM * HIDDEN_DIM),
            ("b2", w.b2.len(), HIDDEN_DIM),
            ("w3", w.w3.len(), HIDDEN_DIM * d),
            ("b3", w.b3.len(), d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(CoreError::Input(format!(
                    "checkpoint weight '{name}' has {got} values, expected {want}"
                )));
            }
        }
        let mut flat = Vec::with_capacity(checks.iter().map(|&(_, _, want)| want).sum::<usize>());
        flat.extend(&w.attr_embed);
        flat.extend(&w.w1);
        flat.extend(&w.b1);
        flat.extend(&w.w2);
        flat.extend(&w.b2);
        flat.extend(&w.w3);
        flat.extend(&w.b3);
        DenoiserMlp::from_flat(d, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::NotFound(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Score field backed by a trained denoiser: `score = -eps_hat / sigma(t)`,
/// with `t` clamped to [`MIN_TRAIN_TIME`] so the field stays finite at
/// `t = 0`.
#[derive(Debug, Clone)]
pub struct TrainedScore {
    model: DenoiserMlp,
    schedule: VpSchedule,
}

impl TrainedScore {
    pub fn new(model: DenoiserMlp, schedule: VpSchedule) -> Self {
        Self { model, schedule }
    }

    pub fn model(&self) -> &DenoiserMlp {
        &self.model
    }

    pub fn schedule(&self) -> &VpSchedule {
        &self.schedule
    }
}

impl ScoreSource for TrainedScore {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn fingerprint(&self) -> String {
        let mut bytes: Vec<u8> = Vec::new();
        for v in self.model.to_flat() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(
            serde_json::to_string(&self.schedule)
                .expect("schedule serializes")
                .as_bytes(),
        );
        format!("trained:{}", &sha256_hex(&bytes)[..16])
    }

    fn score_batch(&self, xs: &DMatrix<f64>, t: f64, s: Attr) -> Result<DMatrix<f64>> {
        let t_eff = t.max(MIN_TRAIN_TIME);
        let coeffs = self.schedule.marginal_coeffs(t_eff)?;
        let n = xs.nrows();
        let eps_hat = self.model.forward_batch(xs, &vec![t_eff; n], &vec![s; n])?;
        Ok(eps_hat / -coeffs.sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::ConditionalGmm;
    use crate::score::AnalyticScore;
    use nalgebra::DVector;
    use tempfile::tempdir;

    fn small_data(n: usize, seed: u64) -> LabeledSet {
        ConditionalGmm::default_benchmark().sample_data(n, seed)
    }

    fn sched() -> VpSchedule {
        VpSchedule::default_benchmark()
    }

    #[test]
    fn near_zero_head_makes_initial_loss_the_noise_energy() {
        // With the output layer at scale 1e-4 the prediction is ~0, so the
        // loss is E|eps|^2 = d.
        let model = DenoiserMlp::new(2, 1).unwrap();
        let data = small_data(4096, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = make_noised_batch(&data, &sched(), 4096, &mut rng).unwrap();
        let loss = loss_on(&model, &batch);
        assert!((loss - 2.0).abs() < 0.1, "initial loss {loss}");
    }

    #[test]
    fn flat_roundtrip_is_exact_and_counts_match() {
        let model = DenoiserMlp::new(2, 7).unwrap();
        let expected = NUM_ATTRS * ATTR_EMBED_DIM
            + 26 * HIDDEN_DIM
            + HIDDEN_DIM
            + HIDDEN_DIM * HIDDEN_DIM
            + HIDDEN_DIM
            + HIDDEN_DIM * 2
            + 2;
        assert_eq!(model.param_count(), expected);
        let flat = model.to_flat();
        assert_eq!(flat.len(), expected);
        let rebuilt = DenoiserMlp::from_flat(2, &flat).unwrap();
        assert_eq!(model, rebuilt);

        assert!(DenoiserMlp::from_flat(2, &flat[1..]).is_err());
        assert!(DenoiserMlp::from_flat(3, &flat).is_err());
    }

    #[test]
    fn analytic_gradient_matches_central_differences_everywhere() {
        // Warm the parameters away from the near-zero initialization first
        // so the check exercises non-degenerate weights.
        let data = small_data(256, 11);
        let warm_cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 50,
            seed: 12,
            ..TrainConfig::default()
        };
        let (model, _) =
            train(DenoiserMlp::new(2, 10).unwrap(), &data, &sched(), &warm_cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let batch = make_noised_batch(&data, &sched(), 16, &mut rng).unwrap();
        assert!(batch.attrs.contains(&Attr::Zero));
        assert!(batch.attrs.contains(&Attr::One));

        let (_, grad) = backward_on(&model, &batch);
        let mut flat = model.to_flat();
        let h = 1e-5;
        let mut worst = (0.0f64, 0usize);
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + h;
            let up = loss_on(&DenoiserMlp::from_flat(2, &flat).unwrap(), &batch);
            flat[i] = orig - h;
            let down = loss_on(&DenoiserMlp::from_flat(2, &flat).unwrap(), &batch);
            flat[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, i);
            }
        }
        assert!(
            worst.0 < 1e-4,
            "worst relative gradient error {:e} at flat index {}",
            worst.0,
            worst.1
        );
    }

    #[test]
    fn attribute_and_time_inputs_change_the_prediction() {
        let model = DenoiserMlp::new(2, 21).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.8]);
        let a0 = model.forward(&x, 0.5, Attr::Zero).unwrap();
        let a1 = model.forward(&x, 0.5, Attr::One).unwrap();
        assert_ne!(a0, a1, "attribute embedding had no effect");
        let t0 = model.forward(&x, 0.0, Attr::Zero).unwrap();
        let t1 = model.forward(&x, 1.0, Attr::Zero).unwrap();
        assert_ne!(t0, t1, "time embedding did not separate t=0 from t=1");
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_and_validated() {
        let model = DenoiserMlp::new(2, 31).unwrap();
        let cfg = TrainConfig::default();
        let ckpt = Checkpoint::from_model(&model, Some(cfg));
        let dir = tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
        let rebuilt = loaded.to_model().unwrap();
        assert_eq!(model.to_flat(), rebuilt.to_flat());
        assert_eq!(loaded.train_config, Some(cfg));

        let mut bad = ckpt.clone();
        bad.weights.w1.pop();
        let err = bad.to_model().unwrap_err();
        assert!(err.to_string().contains("w1"), "{err}");

        let mut wrong_version = ckpt.clone();
        wrong_version.schema_version = 99;
        assert!(wrong_version.to_model().is_err());

        assert!(Checkpoint::load(&dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data(512, 41);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 300,
            seed: 42,
            ..TrainConfig::default()
        };
        let (m1, c1) = train(DenoiserMlp::new(2, 40).unwrap(), &data, &sched(), &cfg).unwrap();
        let (m2, c2) = train(DenoiserMlp::new(2, 40).unwrap(), &data, &sched(), &cfg).unwrap();
        assert_eq!(m1.to_flat(), m2.to_flat());
        assert_eq!(c1, c2);
        // Curve covers the first step, every 100th, and the last step.
        assert_eq!(c1[0].0, 0);
        assert_eq!(c1.last().unwrap().0, 299);
        assert_eq!(c1.len(), 4);
    }

    #[test]
    fn short_training_learns_the_score_field() {
        let gmm = ConditionalGmm::default_benchmark();
        let data = gmm.sample_data(4000, 51);
        let sched = sched();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            steps: 2000,
            seed: 52,
            ..TrainConfig::default()
        };
        let (model, curve) = train(DenoiserMlp::new(2, 50).unwrap(), &data, &sched, &cfg).unwrap();
        let initial = curve[0].1;
        let last = curve.last().unwrap().1;
        assert!(
            last < 0.5 * initial,
            "loss did not halve: {initial} -> {last}"
        );
        // Fine-tune at a lower rate to settle below the noise floor of the
        // first stage (warm starts chain cleanly through `train`).
        let fine = TrainConfig {
            learning_rate: 2e-4,
            steps: 1500,
            seed: 152,
            ..cfg
        };
        let (model, _) = train(model, &data, &sched, &fine).unwrap();

        let trained = TrainedScore::new(model, sched.clone());
        let analytic = AnalyticScore::new(gmm.clone(), sched.clone());
        for (k, t) in [(1u64, 0.1), (2, 0.5), (3, 0.9)] {
            // Evaluate both fields on points drawn near the perturbed law.
            let coeffs = sched.marginal_coeffs(t).unwrap();
            let base = gmm.sample_data(1000, 53 + k).points().clone();
            let mut rng = ChaCha8Rng::seed_from_u64(54);
            let mut xs = base.clone();
            for i in 0..xs.nrows() {
                for j in 0..xs.ncols() {
                    xs[(i, j)] = coeffs.alpha * base[(i, j)]
                        + coeffs.sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            for s in [Attr::Zero, Attr::One] {
                let a = trained.score_batch(&xs, t, s).unwrap();
                let b = analytic.score_batch(&xs, t, s).unwrap();
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let cos = dot / (a.norm() * b.norm());
                assert!(cos > 0.99, "t={t}, attr {s:?}: cosine to exact field {cos}");
            }
        }
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let data = small_data(128, 61);
        let cfg = TrainConfig {
            learning_rate: 1e160,
            batch_size: 16,
            steps: 10,
            seed: 62,
            ..TrainConfig::default()
        };
        let err = train(DenoiserMlp::new(2, 60).unwrap(), &data, &sched(), &cfg).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        assert!(err.to_string().contains("step"), "{err}");
    }

    #[test]
    fn trained_score_clamps_time_and_fingerprints_weights() {
        let model = DenoiserMlp::new(2, 71).unwrap();
        let src = TrainedScore::new(model.clone(), sched());
        let xs = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, -0.3, 0.4]);
        let at_zero = src.score_batch(&xs, 0.0, Attr::Zero).unwrap();
        let at_floor = src.score_batch(&xs, MIN_TRAIN_TIME, Attr::Zero).unwrap();
        assert_eq!(at_zero, at_floor);
        assert!(src.score_batch(&xs, 1.5, Attr::Zero).is_err());

        let fp = src.fingerprint();
        assert!(fp.starts_with("trained:"));
        assert_eq!(fp, TrainedScore::new(model.clone(), sched()).fingerprint());
        let mut flat = model.to_flat();
        flat[100] += 1e-9;
        let other = TrainedScore::new(DenoiserMlp::from_flat(2, &flat).unwrap(), sched());
        assert_ne!(fp, other.fingerprint());
    }

    #[test]
    fn batch_and_config_validation() {
        let data = small_data(32, 81);
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        assert!(make_noised_batch(&data, &s, 0, &mut rng).is_err());
        let batch = make_noised_batch(&data, &s, 8, &mut rng).unwrap();
        assert_eq!((batch.len(), batch.dim()), (8, 2));
        assert!(batch
            .ts
            .iter()
            .all(|&t| (MIN_TRAIN_TIME..=1.0).contains(&t)));

        let model = DenoiserMlp::new(2, 83).unwrap();
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta1: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                steps: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(train(model.clone(), &data, &s, &bad).is_err());
        }
    }
}

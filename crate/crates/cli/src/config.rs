//! Strict JSON run configuration.
//!
//! Every block is optional and falls back to the benchmark defaults; unknown
//! keys anywhere are rejected so typos fail loudly instead of silently
//! running a different experiment.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use switchdiff_core::gmm::GaussComponent;
use switchdiff_core::sampler::Integrator;
use switchdiff_core::tausearch::TauDrive;
use switchdiff_core::{Attr, ConditionalGmm, CoreError, Probe, Result, TrainConfig, VpSchedule};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Top-level run configuration shared by all commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must equal [`CONFIG_SCHEMA_VERSION`].
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; the `--out` flag overrides it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleBlock,
    /// Ground-truth mixture; omitted means the benchmark pair of unit
    /// Gaussians at (-1.5, 0) and (1.5, 0) with equal priors.
    #[serde(default)]
    pub gmm: Option<GmmBlock>,
    #[serde(default)]
    pub score_source: ScoreSourceBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub sampler: SamplerBlock,
    #[serde(default)]
    pub tausearch: TauSearchBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub eval: Option<EvalBlock>,
    #[serde(default)]
    pub pca: Option<PcaBlock>,
    #[serde(default)]
    pub generate: GenerateBlock,
}

impl RunConfig {
    /// Read and validate a config file, returning the parsed config along
    /// with the raw bytes (hashed into the run manifest).
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| {
            CoreError::NotFound(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| CoreError::Config(format!("invalid config {}: {e}", path.display())))?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CoreError::Config(format!(
                "config schema_version {} is not supported (expected {})",
                config.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        Ok((config, bytes))
    }

    pub fn to_schedule(&self) -> Result<VpSchedule> {
        self.schedule.to_schedule()
    }

    pub fn to_gmm(&self) -> Result<ConditionalGmm> {
        match &self.gmm {
            None => Ok(ConditionalGmm::default_benchmark()),
            Some(block) => block.to_gmm(),
        }
    }
}

/// Variance-preserving schedule parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleBlock {
    pub beta_min: f64,
    pub beta_max: f64,
    pub num_steps: u32,
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            num_steps: 1000,
        }
    }
}

impl ScheduleBlock {
    pub fn to_schedule(&self) -> Result<VpSchedule> {
        VpSchedule::new(self.beta_min, self.beta_max, self.num_steps)
    }
}

/// One mixture component in plain-JSON form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentBlock {
    #[serde(default = "one")]
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major covariance; omitted means identity.
    #[serde(default)]
    pub cov: Option<Vec<Vec<f64>>>,
}

fn one() -> f64 {
    1.0
}

impl ComponentBlock {
    fn to_component(&self, dim: usize) -> Result<GaussComponent> {
        if self.mean.len() != dim {
            return Err(CoreError::Config(format!(
                "component mean has {} entries, expected dim {dim}",
                self.mean.len()
            )));
        }
        let cov = match &self.cov {
            None => DMatrix::identity(dim, dim),
            Some(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(CoreError::Config(format!(
                        "component covariance must be {dim}x{dim}"
                    )));
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
        };
        Ok(GaussComponent {
            weight: self.weight,
            mean: DVector::from_vec(self.mean.clone()),
            cov,
        })
    }
}

/// Conditional mixture in plain-JSON form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmBlock {
    pub dim: usize,
    pub attr0: Vec<ComponentBlock>,
    pub attr1: Vec<ComponentBlock>,
    #[serde(default = "half")]
    pub attr_one_prior: f64,
}

fn half() -> f64 {
    0.5
}

impl GmmBlock {
    pub fn to_gmm(&self) -> Result<ConditionalGmm> {
        let comps0 = self
            .attr0
            .iter()
            .map(|c| c.to_component(self.dim))
            .collect::<Result<Vec<_>>>()?;
        let comps1 = self
            .attr1
            .iter()
            .map(|c| c.to_component(self.dim))
            .collect::<Result<Vec<_>>>()?;
        ConditionalGmm::new(self.dim, comps0, comps1, self.attr_one_prior)
    }
}

/// Which score field drives sampling and the transition-point search.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreSourceBlock {
    /// Exact scores of the configured mixture.
    #[default]
    Analytic,
    /// A trained denoiser checkpoint.
    Trained { checkpoint: PathBuf },
}

/// Denoiser training parameters plus the size of the internally drawn
/// training dataset. The RNG seeds are derived from the run seed, not
/// configured here.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: u32,
    pub dataset_size: usize,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            steps: t.steps,
            dataset_size: 20_000,
        }
    }
}

impl TrainBlock {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            steps: self.steps,
            seed,
        }
    }
}

/// Generation strategy selector for the `sample` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Vanilla,
    #[default]
    Switched,
    Mixed,
}

/// Attribute-switching parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyBlock {
    pub s0: Attr,
    pub s1: Attr,
    pub tau: u32,
}

impl Default for PolicyBlock {
    fn default() -> Self {
        Self {
            s0: Attr::Zero,
            s1: Attr::One,
            tau: 0,
        }
    }
}

/// Score-blending parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixBlock {
    pub s0: Attr,
    pub s1: Attr,
    pub p: f64,
}

impl Default for MixBlock {
    fn default() -> Self {
        Self {
            s0: Attr::Zero,
            s1: Attr::One,
            p: 0.6,
        }
    }
}

/// `sample` command parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerBlock {
    pub strategy: StrategyKind,
    pub integrator: Integrator,
    pub n: usize,
    pub grid_stride: u32,
    /// Attribute for the vanilla strategy.
    pub s: Attr,
    pub policy: PolicyBlock,
    pub mix: MixBlock,
    pub record_trajectory: bool,
}

impl Default for SamplerBlock {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Switched,
            integrator: Integrator::Ode,
            n: 1000,
            grid_stride: 10,
            s: Attr::Zero,
            policy: PolicyBlock::default(),
            mix: MixBlock::default(),
            record_trajectory: false,
        }
    }
}

/// `find-tau` command parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauSearchBlock {
    pub s0: Attr,
    pub s1: Attr,
    pub batch_size: usize,
    pub grid_stride: u32,
    pub drive: TauDrive,
}

impl Default for TauSearchBlock {
    fn default() -> Self {
        Self {
            s0: Attr::Zero,
            s1: Attr::One,
            batch_size: 4096,
            grid_stride: 10,
            drive: TauDrive::Average,
        }
    }
}

/// `sweep-tau` command parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    pub s0: Attr,
    pub s1: Attr,
    /// Number of equispaced transition points, endpoints included.
    pub num_taus: u32,
    /// Generated points per switching direction per draw.
    pub n_per_direction: usize,
    pub grid_stride: u32,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            s0: Attr::Zero,
            s1: Attr::One,
            num_taus: 11,
            n_per_direction: 2000,
            grid_stride: 10,
        }
    }
}

/// `evaluate` command inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    pub synthetic_csv: PathBuf,
    pub reference_csv: PathBuf,
    #[serde(default)]
    pub probe: Probe,
}

/// `pca` command inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaBlock {
    pub reference_csv: PathBuf,
    #[serde(default)]
    pub targets: Vec<PathBuf>,
}

/// `generate` command parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateBlock {
    pub n: usize,
}

impl Default for GenerateBlock {
    fn default() -> Self {
        Self { n: 20_000 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn write_config(json: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(json.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn minimal_config_fills_benchmark_defaults() {
        let f = write_config(r#"{ "schema_version": 1, "seed": 7 }"#);
        let (config, bytes) = RunConfig::load(f.path()).unwrap();
        assert!(!bytes.is_empty());
        assert_eq!(config.seed, 7);
        let sched = config.to_schedule().unwrap();
        assert_eq!(sched.num_steps(), 1000);
        let gmm = config.to_gmm().unwrap();
        assert_eq!(gmm.dim(), 2);
        assert_eq!(gmm.conditional_mean(Attr::Zero)[0], -1.5);
        assert!(matches!(config.score_source, ScoreSourceBlock::Analytic));
        assert_eq!(config.sampler.n, 1000);
        assert_eq!(config.tausearch.batch_size, 4096);
        assert_eq!(config.sweep.num_taus, 11);
        assert_eq!(config.train.dataset_size, 20_000);
        assert!(config.eval.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let f = write_config(r#"{ "schema_version": 1, "sampler": { "grid_strde": 10 } }"#);
        let err = RunConfig::load(f.path()).unwrap_err();
        assert!(err.to_string().contains("grid_strde"), "{err}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let f = write_config(r#"{ "schema_version": 2 }"#);
        let err = RunConfig::load(f.path()).unwrap_err();
        assert!(err.to_string().contains("schema_version 2"), "{err}");
    }

    #[test]
    fn custom_gmm_block_builds_the_mixture() {
        let f = write_config(
            r#"{
                "schema_version": 1,
                "gmm": {
                    "dim": 2,
                    "attr0": [
                        { "weight": 0.5, "mean": [-2.0, 0.0] },
                        { "weight": 0.5, "mean": [-1.0, 1.0], "cov": [[2.0, 0.3], [0.3, 1.0]] }
                    ],
                    "attr1": [ { "mean": [1.5, 0.0] } ],
                    "attr_one_prior": 0.4
                }
            }"#,
        );
        let (config, _) = RunConfig::load(f.path()).unwrap();
        let gmm = config.to_gmm().unwrap();
        assert_eq!(gmm.components(Attr::Zero).len(), 2);
        assert_eq!(gmm.attr_prior(Attr::One), 0.4);

        let bad = write_config(
            r#"{
                "schema_version": 1,
                "gmm": { "dim": 2, "attr0": [ { "mean": [1.0] } ], "attr1": [ { "mean": [0.0, 0.0] } ] }
            }"#,
        );
        let (config, _) = RunConfig::load(bad.path()).unwrap();
        assert!(config.to_gmm().is_err());
    }

    #[test]
    fn trained_score_source_and_attr_codes_parse() {
        let f = write_config(
            r#"{
                "schema_version": 1,
                "score_source": { "kind": "trained", "checkpoint": "ckpt.json" },
                "sampler": { "strategy": "switched", "policy": { "s0": 1, "s1": 0, "tau": 360 } }
            }"#,
        );
        let (config, _) = RunConfig::load(f.path()).unwrap();
        match &config.score_source {
            ScoreSourceBlock::Trained { checkpoint } => {
                assert_eq!(checkpoint, &PathBuf::from("ckpt.json"))
            }
            other => panic!("wrong source {other:?}"),
        }
        assert_eq!(config.sampler.policy.s0, Attr::One);
        assert_eq!(config.sampler.policy.tau, 360);

        let bad_attr =
            write_config(r#"{ "schema_version": 1, "sampler": { "policy": { "s0": 3 } } }"#);
        assert!(RunConfig::load(bad_attr.path()).is_err());
    }

    #[test]
    fn missing_file_is_a_not_found_error() {
        let err = RunConfig::load(Path::new("/nonexistent/config.json")).unwrap_err();
        assert!(matches!(err, CoreError::NotFound(_)), "{err}");
    }
}

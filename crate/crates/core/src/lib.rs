//! Core algorithms for attribute-switching diffusion sampling on synthetic
//! Gaussian-mixture data.
//!
//! The crate provides:
//! * a variance-preserving noise schedule ([`schedule`]),
//! * conditional Gaussian-mixture ground truth with exact perturbed scores
//!   ([`gmm`], [`score`]),
//! * fairness and fidelity metrics ([`eval`]),
//! * deterministic seed derivation ([`seeding`]).

pub mod error;
pub mod eval;
pub mod gmm;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod scorenet;
pub mod seeding;
pub mod tausearch;

pub use error::{CoreError, Result};
pub use eval::{
    avg_loglik, cross_eval, frechet_distance, frechet_distance_detailed, gaussian_frechet,
    gaussian_w2, pca_project, train_classifier, AttrClassifier, FairnessReport, FrechetStats,
    LinearClassifier, PcaResult, Probe,
};
pub use gmm::{Attr, ConditionalGmm, GaussComponent, LabeledSet};
pub use sampler::{
    sample, sample_mixed, sample_sde, sample_switched, sample_vanilla, Integrator, MixPolicy,
    RunSpec, SampleRun, Strategy, SwitchPolicy,
};
pub use schedule::{MarginalCoeffs, TimeGrid, VpSchedule};
pub use score::{AnalyticScore, ScoreSource};
pub use scorenet::{
    backward_on, loss_on, make_noised_batch, train, Checkpoint, CheckpointArch, DenoiserMlp,
    NoisedBatch, TrainConfig, TrainedScore,
};
pub use seeding::derive_seed;
pub use tausearch::{
    find_tau, objective_curve, tau_stability, StabilityRow, StabilityTable, TauDrive, TauTrace,
};

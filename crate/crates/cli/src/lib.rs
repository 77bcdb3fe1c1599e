//! Command-line front end for the switching-diffusion laboratory.
//!
//! The binary reads a strict JSON config, runs one command (data generation,
//! denoiser training, sampling, transition-point search, sweeps, evaluation,
//! or PCA projection), and writes reproducible artifacts plus a manifest
//! into the output directory.

pub mod commands;
pub mod config;
pub mod manifest;

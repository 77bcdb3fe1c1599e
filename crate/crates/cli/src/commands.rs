//! Command implementations.
//!
//! Each command reads the shared [`RunConfig`], derives its RNG streams from
//! the effective run seed, writes its artifacts into the output directory,
//! and finishes with a `manifest.json` describing the run. Rerunning a
//! command with the same config and seed rewrites every artifact byte for
//! byte.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use switchdiff_core::sampler::{sample, MixPolicy, RunSpec, SampleRun, Strategy, SwitchPolicy};
use switchdiff_core::scorenet::{train, Checkpoint, DenoiserMlp, TrainedScore};
use switchdiff_core::seeding::derive_seed;
use switchdiff_core::tausearch::{find_tau, TauTrace};
use switchdiff_core::{
    avg_loglik, cross_eval, frechet_distance_detailed, pca_project, AnalyticScore, Attr, CoreError,
    FairnessReport, FrechetStats, LabeledSet, Probe, Result, ScoreSource, TimeGrid, VpSchedule,
};

use crate::config::{RunConfig, ScoreSourceBlock, StrategyKind};
use crate::manifest::Manifest;

/// Everything a command needs: parsed config, its raw bytes (for the
/// manifest hash), the resolved output directory, and the effective seed.
#[derive(Debug)]
pub struct CmdContext<'a> {
    pub config: &'a RunConfig,
    pub config_bytes: &'a [u8],
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Suppress the one-line stdout summaries (for library-driven runs).
    pub quiet: bool,
}

impl<'a> CmdContext<'a> {
    /// Resolve CLI overrides against the config and create the output
    /// directory.
    pub fn new(
        config: &'a RunConfig,
        config_bytes: &'a [u8],
        out_override: Option<PathBuf>,
        seed_override: Option<u64>,
    ) -> Result<Self> {
        let out_dir = match out_override.or_else(|| config.out_dir.clone()) {
            Some(dir) => dir,
            None => {
                return Err(CoreError::Config(
                    "no output directory: set out_dir in the config or pass --out".into(),
                ))
            }
        };
        std::fs::create_dir_all(&out_dir)?;
        let seed = seed_override.unwrap_or(config.seed);
        Ok(Self {
            config,
            config_bytes,
            out_dir,
            seed,
            quiet: false,
        })
    }

    /// Same context without stdout summaries.
    pub fn quiet(mut self) -> Self {
        self.quiet = true;
        self
    }

    fn say(&self, line: String) {
        if !self.quiet {
            println!("{line}");
        }
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, self.seed, self.config_bytes)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Names accepted by [`run_command`].
pub const COMMANDS: [&str; 7] = [
    "generate",
    "train",
    "sample",
    "find-tau",
    "sweep-tau",
    "evaluate",
    "pca",
];

/// Dispatch a command by name.
pub fn run_command(name: &str, ctx: &CmdContext) -> Result<()> {
    match name {
        "generate" => cmd_generate(ctx),
        "train" => cmd_train(ctx),
        "sample" => cmd_sample(ctx),
        "find-tau" => cmd_find_tau(ctx),
        "sweep-tau" => cmd_sweep_tau(ctx),
        "evaluate" => cmd_evaluate(ctx),
        "pca" => cmd_pca(ctx),
        other => Err(CoreError::Config(format!("unknown command {other}"))),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

fn fmt_float(v: f64) -> String {
    format!("{v}")
}

/// Write a CSV file with the shortest-roundtrip float format used across all
/// artifacts.
fn write_csv_rows(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn coord_header(dim: usize) -> Vec<String> {
    (0..dim).map(|j| format!("x{j}")).collect()
}

/// Write a coordinates-only CSV (`x0..x{d-1}`), one row per point.
fn write_points_csv(path: &Path, points: &DMatrix<f64>) -> Result<()> {
    write_csv_rows(
        path,
        &coord_header(points.ncols()),
        (0..points.nrows()).map(|i| {
            (0..points.ncols())
                .map(|j| fmt_float(points[(i, j)]))
                .collect()
        }),
    )
}

/// Read a point cloud from CSV. Accepts both the coordinates-only layout
/// (`x0..x{d-1}`) and the labeled layout with a trailing `s` column, which is
/// ignored.
pub fn read_points_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CoreError::NotFound(format!("cannot read points {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let mut dim = headers.len();
    if headers.iter().next_back() == Some("s") {
        dim -= 1;
    }
    for (j, name) in headers.iter().take(dim).enumerate() {
        if name != format!("x{j}") {
            return Err(CoreError::Input(format!(
                "{}: expected coordinate column x{j}, found {name}",
                path.display()
            )));
        }
    }
    if dim == 0 {
        return Err(CoreError::Input(format!(
            "{}: no coordinate columns",
            path.display()
        )));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for record in reader.records() {
        let record = record?;
        for j in 0..dim {
            let field = record.get(j).ok_or_else(|| {
                CoreError::Input(format!("{}: short row {}", path.display(), n + 1))
            })?;
            let v: f64 = field.parse().map_err(|_| {
                CoreError::Input(format!(
                    "{}: row {} has a non-numeric value {field:?}",
                    path.display(),
                    n + 1
                ))
            })?;
            rows.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(CoreError::Input(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(DMatrix::from_row_slice(n, dim, &rows))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json.as_bytes())?;
    Ok(())
}

/// Build the configured score source; returns the checkpoint path when the
/// source is a trained model so the manifest can hash it.
fn build_score_source(
    config: &RunConfig,
    sched: &VpSchedule,
) -> Result<(Box<dyn ScoreSource>, Option<PathBuf>)> {
    match &config.score_source {
        ScoreSourceBlock::Analytic => {
            let gmm = config.to_gmm()?;
            Ok((Box::new(AnalyticScore::new(gmm, sched.clone())), None))
        }
        ScoreSourceBlock::Trained { checkpoint } => {
            let model = Checkpoint::load(checkpoint)?.to_model()?;
            Ok((
                Box::new(TrainedScore::new(model, sched.clone())),
                Some(checkpoint.clone()),
            ))
        }
    }
}

fn labeled_read(path: &Path) -> Result<LabeledSet> {
    LabeledSet::read_csv(path).map_err(|e| CoreError::Input(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Draw a labeled dataset from the ground-truth mixture into `data.csv`.
pub fn cmd_generate(ctx: &CmdContext) -> Result<()> {
    let gmm = ctx.config.to_gmm()?;
    let n = ctx.config.generate.n;
    if n == 0 {
        return Err(CoreError::Config("generate.n must be at least 1".into()));
    }
    let data = gmm.sample_data(n, derive_seed(ctx.seed, "generate"));
    data.write_csv(ctx.path("data.csv"))?;

    let mut manifest = ctx.manifest("generate");
    manifest.add_output("data.csv");
    manifest.write(&ctx.out_dir)?;
    ctx.say(format!(
        "generate: wrote {} labeled points ({} / {} per attribute) to {}",
        data.len(),
        data.counts()[0],
        data.counts()[1],
        ctx.out_dir.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Train the conditional denoiser on freshly drawn mixture data and save
/// `checkpoint.json` plus the loss curve.
pub fn cmd_train(ctx: &CmdContext) -> Result<()> {
    let gmm = ctx.config.to_gmm()?;
    let sched = ctx.config.to_schedule()?;
    let block = &ctx.config.train;
    if block.dataset_size == 0 {
        return Err(CoreError::Config(
            "train.dataset_size must be at least 1".into(),
        ));
    }
    let dataset = gmm.sample_data(block.dataset_size, derive_seed(ctx.seed, "train.data"));
    let model = DenoiserMlp::new(gmm.dim(), derive_seed(ctx.seed, "train.init"))?;
    let train_config = block.to_train_config(derive_seed(ctx.seed, "train.loop"));
    let (model, curve) = train(model, &dataset, &sched, &train_config)?;

    Checkpoint::from_model(&model, Some(train_config)).save(&ctx.path("checkpoint.json"))?;
    write_csv_rows(
        &ctx.path("loss.csv"),
        &["step".to_string(), "loss".to_string()],
        curve
            .iter()
            .map(|(step, loss)| vec![step.to_string(), fmt_float(*loss)]),
    )?;

    let mut manifest = ctx.manifest("train");
    manifest.add_output("checkpoint.json");
    manifest.add_output("loss.csv");
    manifest.write(&ctx.out_dir)?;
    let last = curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    ctx.say(format!(
        "train: {} steps on {} points, final loss {last:.4}, checkpoint in {}",
        train_config.steps,
        dataset.len(),
        ctx.out_dir.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

/// Sidecar describing exactly how `points.csv` / `samples.csv` were made.
#[derive(Debug, Serialize)]
struct SampleSidecar {
    schema_version: u32,
    seed: u64,
    n: usize,
    dim: usize,
    strategy: Strategy,
    integrator: switchdiff_core::sampler::Integrator,
    grid: TimeGrid,
    /// Transition step as requested in the config, before snapping.
    requested_tau: Option<u32>,
    /// Transition step actually used (snapped down to the grid).
    effective_tau: Option<u32>,
    assigned_attr: Attr,
    score_fingerprint: String,
}

/// Generate points under the configured strategy and integrator.
///
/// Writes `points.csv` (coordinates only, so byte-wise diffs against other
/// runs compare geometry alone), `samples.csv` (with the assigned attribute),
/// a `samples.json` sidecar, and optionally a `trajectory/` directory with
/// one snapshot per grid step.
pub fn cmd_sample(ctx: &CmdContext) -> Result<()> {
    let sched = ctx.config.to_schedule()?;
    let block = &ctx.config.sampler;
    let grid = TimeGrid::new(sched.num_steps(), block.grid_stride)?;
    let (src, checkpoint) = build_score_source(ctx.config, &sched)?;

    let mut requested_tau = None;
    let mut effective_tau = None;
    let strategy = match block.strategy {
        StrategyKind::Vanilla => Strategy::Vanilla { s: block.s },
        StrategyKind::Switched => {
            let snapped = grid.snap_down(block.policy.tau);
            if snapped != block.policy.tau {
                eprintln!(
                    "note: transition step {} is off the stride-{} grid; using {snapped}",
                    block.policy.tau,
                    grid.stride()
                );
            }
            requested_tau = Some(block.policy.tau);
            effective_tau = Some(snapped);
            Strategy::Switched(SwitchPolicy {
                s0: block.policy.s0,
                s1: block.policy.s1,
                tau: snapped,
            })
        }
        StrategyKind::Mixed => Strategy::Mixed(MixPolicy {
            s0: block.mix.s0,
            s1: block.mix.s1,
            p: block.mix.p,
        }),
    };

    let spec = RunSpec {
        n: block.n,
        grid,
        seed: derive_seed(ctx.seed, "sample"),
        record_trajectory: block.record_trajectory,
    };
    let run: SampleRun = sample(src.as_ref(), &sched, &strategy, block.integrator, &spec)?;

    write_points_csv(&ctx.path("points.csv"), &run.points)?;
    run.labeled().write_csv(ctx.path("samples.csv"))?;
    let sidecar = SampleSidecar {
        schema_version: 1,
        seed: spec.seed,
        n: run.points.nrows(),
        dim: run.points.ncols(),
        strategy: run.strategy,
        integrator: block.integrator,
        grid,
        requested_tau,
        effective_tau,
        assigned_attr: run.assigned,
        score_fingerprint: src.fingerprint(),
    };
    write_json(&ctx.path("samples.json"), &sidecar)?;

    let mut manifest = ctx.manifest("sample");
    if let Some(ckpt) = &checkpoint {
        manifest.add_input(ckpt)?;
    }
    manifest.add_output("points.csv");
    manifest.add_output("samples.csv");
    manifest.add_output("samples.json");
    if let Some(traj) = &run.trajectory {
        let dir = ctx.path("trajectory");
        std::fs::create_dir_all(&dir)?;
        for (step, snapshot) in traj {
            let name = format!("trajectory/step_{step:05}.csv");
            write_points_csv(&ctx.path(&name), snapshot)?;
            manifest.add_output(&name);
        }
    }
    manifest.write(&ctx.out_dir)?;
    ctx.say(format!(
        "sample: {} points (attribute {}) via {:?} in {}",
        run.points.nrows(),
        run.assigned.index(),
        block.integrator,
        ctx.out_dir.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// find-tau
// ---------------------------------------------------------------------------

/// Run the transition-point search and write the full trace.
///
/// `trace.json` holds the machine-readable record; `trace.csv` tabulates the
/// per-step score gaps, their ascending prefix sums, and the imbalance
/// objective per candidate step.
pub fn cmd_find_tau(ctx: &CmdContext) -> Result<()> {
    let sched = ctx.config.to_schedule()?;
    let block = &ctx.config.tausearch;
    let grid = TimeGrid::new(sched.num_steps(), block.grid_stride)?;
    let (src, checkpoint) = build_score_source(ctx.config, &sched)?;

    let trace: TauTrace = find_tau(
        src.as_ref(),
        &sched,
        block.s0,
        block.s1,
        grid,
        block.batch_size,
        block.drive,
        derive_seed(ctx.seed, "tausearch"),
    )?;

    write_json(&ctx.path("trace.json"), &trace)?;
    let mut header = vec!["step".to_string()];
    header.extend((0..trace.dim).map(|j| format!("d_{j}")));
    header.extend((0..trace.dim).map(|j| format!("cum_{j}")));
    header.push("objective".to_string());
    write_csv_rows(
        &ctx.path("trace.csv"),
        &header,
        (0..trace.steps.len()).map(|i| {
            let mut row = vec![trace.steps[i].to_string()];
            row.extend(trace.d_per_step[i].iter().map(|v| fmt_float(*v)));
            row.extend(trace.cumulative[i].iter().map(|v| fmt_float(*v)));
            row.push(fmt_float(trace.objective[i]));
            row
        }),
    )?;

    let mut manifest = ctx.manifest("find-tau");
    if let Some(ckpt) = &checkpoint {
        manifest.add_input(ckpt)?;
    }
    manifest.add_output("trace.json");
    manifest.add_output("trace.csv");
    manifest.write(&ctx.out_dir)?;
    ctx.say(format!(
        "find-tau: transition step {} (degenerate: {}) written to {}",
        trace.tau_star,
        trace.degenerate,
        ctx.out_dir.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-tau
// ---------------------------------------------------------------------------

/// Sweep the transition step across the schedule and measure downstream
/// quality at each stop.
///
/// At every candidate step two independent switched pairs are generated (one
/// run per switching direction per pair). The probe-based error rates come
/// from cross-evaluating the two pairs against each other; the distance
/// column compares the two direction clouds of the first pair; the
/// likelihood column scores the first pair under the ground-truth mixture.
pub fn cmd_sweep_tau(ctx: &CmdContext) -> Result<()> {
    let sched = ctx.config.to_schedule()?;
    let gmm = ctx.config.to_gmm()?;
    let block = &ctx.config.sweep;
    let grid = TimeGrid::new(sched.num_steps(), block.grid_stride)?;
    let (src, checkpoint) = build_score_source(ctx.config, &sched)?;

    if block.num_taus < 2 {
        return Err(CoreError::Config(
            "sweep.num_taus must be at least 2".into(),
        ));
    }
    if block.n_per_direction == 0 {
        return Err(CoreError::Config(
            "sweep.n_per_direction must be at least 1".into(),
        ));
    }
    let t_total = grid.t_total();
    let gaps = block.num_taus - 1;
    if t_total % gaps != 0 || (t_total / gaps) % grid.stride() != 0 {
        return Err(CoreError::Config(format!(
            "sweep.num_taus {} does not divide {} steps into stride-{} grid stops",
            block.num_taus,
            t_total,
            grid.stride()
        )));
    }
    let sweep_step = t_total / gaps;

    let (s0, s1) = (block.s0, block.s1);
    let mut rows: Vec<Vec<String>> = Vec::new();
    for k in 0..block.num_taus {
        let tau = k * sweep_step;
        let forward = SwitchPolicy { s0, s1, tau };
        let reverse = SwitchPolicy {
            s0: s1,
            s1: s0,
            tau,
        };
        let pair = |label: &str| -> Result<(LabeledSet, DMatrix<f64>, DMatrix<f64>)> {
            let spec_fwd = RunSpec::new(
                block.n_per_direction,
                grid,
                derive_seed(ctx.seed, &format!("sweep.t{tau}.fwd.{label}")),
            );
            let spec_rev = RunSpec::new(
                block.n_per_direction,
                grid,
                derive_seed(ctx.seed, &format!("sweep.t{tau}.rev.{label}")),
            );
            let fwd = sample(
                src.as_ref(),
                &sched,
                &Strategy::Switched(forward),
                switchdiff_core::sampler::Integrator::Ode,
                &spec_fwd,
            )?;
            let rev = sample(
                src.as_ref(),
                &sched,
                &Strategy::Switched(reverse),
                switchdiff_core::sampler::Integrator::Ode,
                &spec_rev,
            )?;
            let set = LabeledSet::from_parts(
                &[(&fwd.points, s1), (&rev.points, s0)],
                derive_seed(ctx.seed, &format!("sweep.t{tau}.{label}")),
            )?;
            Ok((set, fwd.points, rev.points))
        };
        let (set_a, fwd_a, rev_a) = pair("a")?;
        let (set_b, _, _) = pair("b")?;

        let (syn_to_real, real_to_syn) = cross_eval(
            &set_a,
            &set_b,
            Probe::Linear,
            derive_seed(ctx.seed, &format!("sweep.t{tau}.eval")),
        )?;
        let frechet = frechet_distance_detailed(&fwd_a, &rev_a)?;
        let loglik = avg_loglik(set_a.points(), &gmm, &sched, 0.0)?;

        rows.push(vec![
            tau.to_string(),
            fmt_float(syn_to_real.ber),
            fmt_float(real_to_syn.ber),
            fmt_float(frechet.value),
            fmt_float(loglik),
        ]);
    }

    write_csv_rows(
        &ctx.path("sweep.csv"),
        &[
            "tau".to_string(),
            "ber_syn_to_real".to_string(),
            "ber_real_to_syn".to_string(),
            "frechet_s0s1".to_string(),
            "avg_loglik".to_string(),
        ],
        rows.into_iter(),
    )?;

    let mut manifest = ctx.manifest("sweep-tau");
    if let Some(ckpt) = &checkpoint {
        manifest.add_input(ckpt)?;
    }
    manifest.add_output("sweep.csv");
    manifest.write(&ctx.out_dir)?;
    ctx.say(format!(
        "sweep-tau: {} transition steps, {} points per direction, results in {}",
        block.num_taus,
        block.n_per_direction,
        ctx.out_dir.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Full evaluation report for one synthetic/reference CSV pair.
#[derive(Debug, Serialize)]
struct EvalReport {
    schema_version: u32,
    probe: Probe,
    /// Probe trained on the synthetic set, evaluated on the reference set.
    syn_to_orig: FairnessReport,
    /// Probe trained on the reference set, evaluated on the synthetic set.
    orig_to_syn: FairnessReport,
    frechet_all: FrechetStats,
    /// Per-attribute distances; absent when either side lacks enough rows
    /// with that attribute.
    frechet_s0: Option<FrechetStats>,
    frechet_s1: Option<FrechetStats>,
    /// Mean log-density under the configured ground-truth mixture; absent
    /// when the CSV dimension does not match the mixture.
    avg_loglik_synthetic: Option<f64>,
    avg_loglik_reference: Option<f64>,
    n_synthetic: usize,
    n_reference: usize,
}

/// Cross-evaluate two labeled CSVs and write `report.json`.
pub fn cmd_evaluate(ctx: &CmdContext) -> Result<()> {
    let block = ctx.config.eval.as_ref().ok_or_else(|| {
        CoreError::Config("evaluate needs an eval block with the two CSV paths".into())
    })?;
    let synthetic = labeled_read(&block.synthetic_csv)?;
    let reference = labeled_read(&block.reference_csv)?;

    let (syn_to_orig, orig_to_syn) = cross_eval(
        &synthetic,
        &reference,
        block.probe,
        derive_seed(ctx.seed, "evaluate"),
    )?;
    let frechet_all = frechet_distance_detailed(synthetic.points(), reference.points())?;

    let dim = synthetic.dim();
    let per_attr = |attr: Attr| -> Result<Option<FrechetStats>> {
        let idx = attr.index();
        if synthetic.counts()[idx] <= dim || reference.counts()[idx] <= dim {
            return Ok(None);
        }
        Ok(Some(frechet_distance_detailed(
            &synthetic.points_of(attr),
            &reference.points_of(attr),
        )?))
    };

    let gmm = ctx.config.to_gmm()?;
    let sched = ctx.config.to_schedule()?;
    let loglik = |set: &LabeledSet| -> Result<Option<f64>> {
        if set.dim() != gmm.dim() {
            return Ok(None);
        }
        Ok(Some(avg_loglik(set.points(), &gmm, &sched, 0.0)?))
    };

    let report = EvalReport {
        schema_version: 1,
        probe: block.probe,
        n_synthetic: synthetic.len(),
        n_reference: reference.len(),
        frechet_s0: per_attr(Attr::Zero)?,
        frechet_s1: per_attr(Attr::One)?,
        avg_loglik_synthetic: loglik(&synthetic)?,
        avg_loglik_reference: loglik(&reference)?,
        syn_to_orig,
        orig_to_syn,
        frechet_all,
    };
    write_json(&ctx.path("report.json"), &report)?;

    let mut manifest = ctx.manifest("evaluate");
    manifest.add_input(&block.synthetic_csv)?;
    manifest.add_input(&block.reference_csv)?;
    manifest.add_output("report.json");
    manifest.write(&ctx.out_dir)?;
    ctx.say(format!(
        "evaluate: BER {:.4} / {:.4}, distance {:.4}, report in {}",
        report.syn_to_orig.ber,
        report.orig_to_syn.ber,
        report.frechet_all.value,
        ctx.out_dir.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// pca
// ---------------------------------------------------------------------------

/// Plane summary written alongside `pca.csv`.
#[derive(Debug, Serialize)]
struct PcaSummary {
    schema_version: u32,
    mean: Vec<f64>,
    axes: [Vec<f64>; 2],
    eigenvalues: [f64; 2],
    /// Source tag and row count per block of `pca.csv`, in file order.
    sources: Vec<(String, usize)>,
}

/// Project reference data and target clouds onto the reference's top-2
/// principal plane; write `pca.csv` (source, pc1, pc2) and `pca.json`.
pub fn cmd_pca(ctx: &CmdContext) -> Result<()> {
    let block =
        ctx.config.pca.as_ref().ok_or_else(|| {
            CoreError::Config("pca needs a pca block with a reference CSV".into())
        })?;
    let reference = labeled_read(&block.reference_csv)?;
    let mut targets: Vec<(String, DMatrix<f64>)> = Vec::new();
    for (i, path) in block.targets.iter().enumerate() {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("target_{i}"));
        let tag = if targets.iter().any(|(t, _)| *t == stem) {
            format!("{stem}_{i}")
        } else {
            stem
        };
        targets.push((tag, read_points_csv(path)?));
    }

    let mats: Vec<&DMatrix<f64>> = targets.iter().map(|(_, m)| m).collect();
    let result = pca_project(&reference, &mats)?;

    let mut sources: Vec<(String, usize)> = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut push_block = |tag: &str, proj: &DMatrix<f64>, sources: &mut Vec<(String, usize)>| {
        sources.push((tag.to_string(), proj.nrows()));
        for i in 0..proj.nrows() {
            rows.push(vec![
                tag.to_string(),
                fmt_float(proj[(i, 0)]),
                fmt_float(proj[(i, 1)]),
            ]);
        }
    };
    push_block(
        "reference_s0",
        &result.reference_projections[0],
        &mut sources,
    );
    push_block(
        "reference_s1",
        &result.reference_projections[1],
        &mut sources,
    );
    for ((tag, _), proj) in targets.iter().zip(result.target_projections.iter()) {
        push_block(tag, proj, &mut sources);
    }

    write_csv_rows(
        &ctx.path("pca.csv"),
        &["source".to_string(), "pc1".to_string(), "pc2".to_string()],
        rows.into_iter(),
    )?;
    let summary = PcaSummary {
        schema_version: 1,
        mean: result.mean.iter().copied().collect(),
        axes: [
            result.axes[0].iter().copied().collect(),
            result.axes[1].iter().copied().collect(),
        ],
        eigenvalues: result.eigenvalues,
        sources,
    };
    write_json(&ctx.path("pca.json"), &summary)?;

    let mut manifest = ctx.manifest("pca");
    manifest.add_input(&block.reference_csv)?;
    for path in &block.targets {
        manifest.add_input(path)?;
    }
    manifest.add_output("pca.csv");
    manifest.add_output("pca.json");
    manifest.write(&ctx.out_dir)?;
    ctx.say(format!(
        "pca: projected {} source blocks onto the reference plane in {}",
        summary.sources.len(),
        ctx.out_dir.display()
    ));
    Ok(())
}

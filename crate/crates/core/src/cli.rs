//! Batch front end: `giqs <subcommand> --config <path> [--seed N] [--jobs N] [--out DIR]`.
//!
//! Exit status: 0 on success, 2 when verification violations were found (the
//! report is still written), 1 on errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::basis::Basis;
use crate::config::{parse_config, ExperimentConfig, StaticPerturbation};
use crate::dynamics::{evolve, growth_exponent_with_threshold, localized_state, EvolveOptions, TruncatedBasis};
use crate::error::{GiqsError, Result};
use crate::lattice::Budget;
use crate::linalg::Scalar;
use crate::models::GiqsModel;
use crate::normalform::{
    homological_step, iterate_normal_form, omega_density, perturbed_spectrum, row_norms, shell_power_fit,
    support_violations, NormalFormOptions, OperatorMatrix, ShellAggregate,
};
use crate::partition::{build_clusters, build_partition, melnikov_scan};
use crate::report::{write_container, ReportRecord, Timing, SCHEMA_VERSION};
use crate::steepness::{niederman_check, steepness_profile, Annulus, SteepVerdict, SteepnessOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Partition,
    Clusters,
    Melnikov,
    Steepness,
    Spectrum,
    Normalform,
    Evolve,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Partition => "partition",
            Command::Clusters => "clusters",
            Command::Melnikov => "melnikov",
            Command::Steepness => "steepness",
            Command::Spectrum => "spectrum",
            Command::Normalform => "normalform",
            Command::Evolve => "evolve",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `run.seed` and `run.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; overrides `run.jobs`.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Resonance partition of an annulus with property checks.
    Partition(CommonArgs),
    /// Spectral clusters of h_L up to an energy.
    Clusters(CommonArgs),
    /// Small-divisor scan over frequency tuples.
    Melnikov(CommonArgs),
    /// Steepness indices and the line-sampling analytic criterion.
    Steepness(CommonArgs),
    /// Perturbed eigenvalues matched to first-order predictions.
    Spectrum(CommonArgs),
    /// Homological elimination of nonresonant matrix elements.
    Normalform(CommonArgs),
    /// Time evolution with Sobolev norm tracking.
    Evolve(CommonArgs),
}

#[derive(Debug, Parser)]
#[command(name = "giqs", version, about = "Resonance partitions, normal forms and Sobolev growth for globally integrable quantum systems")]
struct Cli {
    #[command(subcommand)]
    sub: Sub,
}

/// Reports of one invocation and the resulting exit status.
#[derive(Debug)]
pub struct RunOutcome {
    pub reports: Vec<ReportRecord>,
    pub exit_code: i32,
}

/// Parses arguments, runs, prints errors; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (cmd, common) = match cli.sub {
        Sub::Partition(c) => (Command::Partition, c),
        Sub::Clusters(c) => (Command::Clusters, c),
        Sub::Melnikov(c) => (Command::Melnikov, c),
        Sub::Steepness(c) => (Command::Steepness, c),
        Sub::Spectrum(c) => (Command::Spectrum, c),
        Sub::Normalform(c) => (Command::Normalform, c),
        Sub::Evolve(c) => (Command::Evolve, c),
    };
    match run_from_args(cmd, &common) {
        Ok(out) => {
            for r in &out.reports {
                eprintln!(
                    "{} seed {}: {} violation(s), {:.2} s",
                    r.subcommand, r.seed, r.violations, r.timing.wall_seconds
                );
            }
            out.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run_from_args(cmd: Command, args: &CommonArgs) -> Result<RunOutcome> {
    let text = fs::read_to_string(&args.config)?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = args.seed {
        cfg.run.seed = s;
        cfg.run.seeds.clear();
    }
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(GiqsError::invalid("--jobs must be at least 1"));
        }
        cfg.run.jobs = j;
    }
    if let Some(o) = &args.out {
        cfg.output.dir = o.to_string_lossy().into_owned();
    }
    run(&cfg, cmd)
}

/// Runs one subcommand for every configured seed on a pool of `run.jobs` threads.
pub fn run(cfg: &ExperimentConfig, cmd: Command) -> Result<RunOutcome> {
    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir)?;
    let seeds = cfg.seeds();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.jobs)
        .build()
        .map_err(|e| GiqsError::invalid(format!("thread pool: {e}")))?;
    let reports: Vec<ReportRecord> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let stem = if seeds.len() == 1 {
                    cmd.name().to_string()
                } else {
                    format!("{}-seed{seed}", cmd.name())
                };
                run_job(cfg, cmd, seed, &dir, &stem)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let exit_code = if reports.iter().any(|r| r.violations > 0) { 2 } else { 0 };
    Ok(RunOutcome { reports, exit_code })
}

struct JobOutput {
    payload: Value,
    violations: u64,
    files: Vec<String>,
}

fn run_job(cfg: &ExperimentConfig, cmd: Command, seed: u64, dir: &Path, stem: &str) -> Result<ReportRecord> {
    let start = Instant::now();
    let mut job_cfg = cfg.clone();
    job_cfg.run.seed = seed;
    job_cfg.run.seeds.clear();
    let model = job_cfg.build_model()?;
    let out = match cmd {
        Command::Partition => run_partition(&job_cfg, &model)?,
        Command::Clusters => run_clusters(&job_cfg, &model)?,
        Command::Melnikov => run_melnikov(&job_cfg, &model)?,
        Command::Steepness => run_steepness(&job_cfg, &model, seed)?,
        Command::Spectrum => run_spectrum(&job_cfg, &model, seed, dir, stem)?,
        Command::Normalform => run_normalform(&job_cfg, &model, seed, dir, stem)?,
        Command::Evolve => run_evolve(&job_cfg, &model, seed, dir, stem)?,
    };
    let hash = job_cfg.hash();
    let mut rec = ReportRecord {
        schema_version: SCHEMA_VERSION,
        experiment_id: format!("{}-{}-{seed}", cmd.name(), &hash[..12]),
        subcommand: cmd.name().to_string(),
        seed,
        config_hash: hash,
        config: job_cfg.experiment_value(),
        payload: out.payload,
        violations: out.violations,
        files: out.files,
        timing: Timing {
            wall_seconds: 0.0,
            budget_mb: Budget::from_env().mb,
            threads: rayon::current_num_threads(),
        },
    };
    rec.timing.wall_seconds = start.elapsed().as_secs_f64();
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, rec.to_json()?)?;
    Ok(rec)
}

fn run_partition(cfg: &ExperimentConfig, model: &GiqsModel) -> Result<JobOutput> {
    let p = &cfg.run.partition;
    let rep = build_partition(model, p.r_min, p.r_max, &cfg.resonance, &p.checks())?;
    Ok(JobOutput {
        violations: rep.violations.total() as u64,
        payload: serde_json::to_value(&rep)?,
        files: Vec::new(),
    })
}

fn run_clusters(cfg: &ExperimentConfig, model: &GiqsModel) -> Result<JobOutput> {
    let c = build_clusters(model, cfg.run.clusters.e_max)?;
    let v = c.gap_failures.len() + c.width_failures.len() + usize::from(!c.coverage_ok);
    Ok(JobOutput {
        violations: v as u64,
        payload: serde_json::to_value(&c)?,
        files: Vec::new(),
    })
}

fn run_melnikov(cfg: &ExperimentConfig, model: &GiqsModel) -> Result<JobOutput> {
    let m = &cfg.run.melnikov;
    let e_max = m
        .e_max
        .unwrap_or_else(|| 2.0 * m.r as f64 * model.h_value(&vec![m.cutoff; model.dim()]).unwrap_or(1.0).abs() + 1.0);
    let clusters = build_clusters(model, e_max)?;
    let rep = melnikov_scan(model, &clusters, m.r, m.cutoff, m.gamma, m.tau, m.max_listed)?;
    Ok(JobOutput {
        violations: rep.violation_count,
        payload: serde_json::to_value(&rep)?,
        files: Vec::new(),
    })
}

fn run_steepness(cfg: &ExperimentConfig, model: &GiqsModel, seed: u64) -> Result<JobOutput> {
    let s = &cfg.run.steepness;
    let def = Annulus::default_for(model);
    let dom = Annulus::new(s.r_min.unwrap_or(def.r_min), s.r_max.unwrap_or(def.r_max))?;
    let mut estimates = Vec::new();
    let mut violations = 0;
    let dims: Vec<usize> = if s.s.is_empty() { (1..model.dim()).collect() } else { s.s.clone() };
    for dim in dims {
        let mut opts = SteepnessOptions::new(dim, seed);
        opts.n_points = s.n_points;
        opts.n_subspaces = s.n_subspaces;
        match steepness_profile(model, &dom, &opts) {
            Ok(est) => {
                if est.verdict == SteepVerdict::NotSteep {
                    violations += 1;
                }
                estimates.push(serde_json::to_value(&est)?);
            }
            Err(GiqsError::VanishingGradient(g)) => {
                violations += 1;
                estimates.push(json!({ "s": dim, "verdict": "not_steep", "reason": "vanishing_gradient", "inf_grad": g }));
            }
            Err(e) => return Err(e),
        }
    }
    let nied = niederman_check(model, &dom, s.niederman_lines, s.niederman_samples, s.zero_threshold, seed)?;
    if !nied.pass {
        violations += 1;
    }
    Ok(JobOutput {
        violations,
        payload: json!({ "domain": dom, "estimates": estimates, "niederman": nied }),
        files: Vec::new(),
    })
}

/// Static perturbation on a basis, real when possible.
enum StaticOp {
    Real(OperatorMatrix<f64>),
    Complex(OperatorMatrix<Complex64>),
}

fn static_operator(model: &GiqsModel, basis: Arc<Basis>, pert: &StaticPerturbation, seed: u64) -> Result<StaticOp> {
    match pert.kind.as_str() {
        "convolution" => {
            let coeffs = pert.coefficients(model.dim());
            if coeffs.iter().all(|(_, c)| c.im == 0.0) {
                let re: Vec<(Vec<i64>, f64)> = coeffs.into_iter().map(|(k, c)| (k, c.re)).collect();
                Ok(StaticOp::Real(OperatorMatrix::convolution(basis, &re, pert.order, pert.decay)?))
            } else {
                Ok(StaticOp::Complex(OperatorMatrix::convolution(
                    basis, &coeffs, pert.order, pert.decay,
                )?))
            }
        }
        _ => Ok(StaticOp::Complex(OperatorMatrix::random_decay(
            basis,
            pert.order,
            pert.decay,
            pert.amplitude,
            seed,
        ))),
    }
}

fn spectrum_generic<T: Scalar>(
    cfg: &ExperimentConfig,
    model: &GiqsModel,
    v: &OperatorMatrix<T>,
    dir: &Path,
    stem: &str,
) -> Result<JobOutput> {
    let sp = &cfg.run.spectrum;
    let omega = v.basis.omegas(model)?;
    let rep = perturbed_spectrum(model, &omega, v)?;
    let radii_max = sp.omega_radii.iter().copied().fold(sp.r_max, f64::max);
    let part = build_partition(model, 0.0, radii_max, &cfg.resonance, &cfg.run.partition.checks())?;
    let (mut norms, mut res) = (Vec::new(), Vec::new());
    for m in &rep.matches {
        if part.in_omega(&m.a) == Some(true) {
            norms.push(m.norm);
            res.push(m.residual);
        }
    }
    let fit = shell_power_fit(&norms, &res, sp.fit_lo, sp.fit_hi, sp.fit_width, ShellAggregate::Mean);
    let density = omega_density(&part, &sp.omega_radii)?;
    let mut violations = rep.skipped_clusters.len() as u64;
    let fit_value = match &fit {
        Ok((f, shells)) => {
            if f.slope >= 0.0 {
                violations += 1;
            }
            json!({ "exponent": f.slope, "r2": f.r2, "intercept": f.intercept, "shells": shells })
        }
        Err(e) => {
            violations += 1;
            json!({ "error": e.to_string() })
        }
    };
    let decreasing = density.deficiency.windows(2).all(|w| w[1] < w[0]);
    if !decreasing {
        violations += 1;
    }
    let mut files = Vec::new();
    if cfg.output.spectrum_csv {
        let name = format!("{stem}-matches.csv");
        let mut w = csv::Writer::from_path(dir.join(&name))?;
        w.write_record(["a", "j", "norm", "lambda_a", "mu", "lambda", "residual", "omega"])?;
        for m in &rep.matches {
            let a: Vec<String> = m.a.iter().map(|x| x.to_string()).collect();
            w.write_record([
                a.join(" "),
                m.j.to_string(),
                m.norm.to_string(),
                m.lambda_a.to_string(),
                m.mu.to_string(),
                m.lambda.to_string(),
                m.residual.to_string(),
                (part.in_omega(&m.a) == Some(true)).to_string(),
            ])?;
        }
        w.flush()?;
        files.push(name);
    }
    Ok(JobOutput {
        violations,
        payload: json!({
            "n_states": v.len(),
            "n_matched": rep.matches.len(),
            "n_omega": norms.len(),
            "max_residual": rep.matches.iter().map(|m| m.residual).fold(0.0, f64::max),
            "skipped_clusters": rep.skipped_clusters,
            "residual_fit": fit_value,
            "omega_density": density,
            "deficiency_decreasing": decreasing,
        }),
        files,
    })
}

fn run_spectrum(cfg: &ExperimentConfig, model: &GiqsModel, seed: u64, dir: &Path, stem: &str) -> Result<JobOutput> {
    let sp = &cfg.run.spectrum;
    let basis = Arc::new(Basis::annulus(model, sp.r_min, sp.r_max)?);
    match static_operator(model, basis, &sp.perturbation, seed)? {
        StaticOp::Real(v) => spectrum_generic(cfg, model, &v, dir, stem),
        StaticOp::Complex(v) => spectrum_generic(cfg, model, &v, dir, stem),
    }
}

fn to_c64<T: Scalar>(m: &faer::Mat<T>) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)].to_c64());
        }
    }
    out
}

fn normalform_generic<T: Scalar>(
    cfg: &ExperimentConfig,
    model: &GiqsModel,
    v: &OperatorMatrix<T>,
    dir: &Path,
    stem: &str,
) -> Result<JobOutput> {
    let nf_cfg = &cfg.run.normalform;
    let omega = v.basis.omegas(model)?;
    let opts = NormalFormOptions {
        divisor_floor: nf_cfg.divisor_floor,
        ..Default::default()
    };
    let nf = if nf_cfg.steps == 1 {
        homological_step(&omega, v, model, &cfg.resonance, &opts)?
    } else {
        iterate_normal_form(&omega, v, model, &cfg.resonance, nf_cfg.steps, &opts)?
    };
    let part = build_partition(model, nf_cfg.r_min, nf_cfg.r_max, &cfg.resonance, &cfg.run.partition.checks())?;
    let support = support_violations(&nf.z, &v.basis, &part);
    let norms: Vec<f64> = v.basis.states.iter().map(|s| v.basis.points[s.point].norm).collect();
    let fit = shell_power_fit(
        &norms,
        &row_norms(&nf.remainder),
        nf_cfg.fit_lo,
        nf_cfg.fit_hi,
        nf_cfg.fit_width,
        ShellAggregate::Rms,
    );
    let closure = nf.closure.unwrap_or(f64::NAN);
    let mut violations = support as u64 + nf.audit_warnings as u64;
    if !(closure <= 1e-10) {
        violations += 1;
    }
    let fit_value = match &fit {
        Ok((f, shells)) => {
            if f.slope >= 0.0 {
                violations += 1;
            }
            json!({ "order": f.slope, "r2": f.r2, "intercept": f.intercept, "shells": shells })
        }
        Err(e) => {
            violations += 1;
            json!({ "error": e.to_string() })
        }
    };
    let mut files = Vec::new();
    if nf_cfg.export_matrices {
        let n = v.len();
        let index: Vec<Vec<i64>> = v.basis.states.iter().map(|s| v.basis.points[s.point].index.clone()).collect();
        for (name, m) in [("generator", &nf.generator), ("z", &nf.z), ("remainder", &nf.remainder)] {
            let file = format!("{stem}-{name}.giqs");
            let meta = json!({ "matrix": name, "basis": index, "convention": "psi = exp(G) phi, G anti-Hermitian" });
            write_container(fs::File::create(dir.join(&file))?, &[n, n], meta, &to_c64(m))?;
            files.push(file);
        }
    }
    Ok(JobOutput {
        violations,
        payload: json!({
            "n_states": v.len(),
            "steps": nf_cfg.steps,
            "closure": closure,
            "support_violations": support,
            "off_block_mass": nf.off_block_mass,
            "min_divisor": nf.min_divisor,
            "divisor_floor": nf.divisor_floor,
            "audit_warnings": nf.audit_warnings,
            "remainder_frobenius": crate::linalg::frobenius(&nf.remainder),
            "remainder_fit": fit_value,
            "convention": "psi = exp(G) phi, G anti-Hermitian",
        }),
        files,
    })
}

fn run_normalform(cfg: &ExperimentConfig, model: &GiqsModel, seed: u64, dir: &Path, stem: &str) -> Result<JobOutput> {
    let nf = &cfg.run.normalform;
    let basis = Arc::new(Basis::annulus(model, nf.r_min, nf.r_max)?);
    match static_operator(model, basis, &nf.perturbation, seed)? {
        StaticOp::Real(v) => normalform_generic(cfg, model, &v, dir, stem),
        StaticOp::Complex(v) => normalform_generic(cfg, model, &v, dir, stem),
    }
}

fn run_evolve(cfg: &ExperimentConfig, model: &GiqsModel, seed: u64, dir: &Path, stem: &str) -> Result<JobOutput> {
    let ev = &cfg.run.evolve;
    let basis = TruncatedBasis::new(model, ev.cutoff)?;
    let torus = matches!(cfg.model, crate::config::ModelSpec::Torus { .. });
    let spec = ev.perturbation.build(model.dim(), torus, seed)?;
    let psi0 = localized_state(&basis, ev.init_radius, seed);
    let opts = EvolveOptions {
        dt: ev.dt,
        s_list: ev.s_list.clone(),
        record_every: ev.record_every,
        checkpoint_every: ev.checkpoint_every,
        drift_tol: ev.drift_tol,
        ..Default::default()
    };
    let traj = evolve(&basis, &spec, &psi0, ev.t0, ev.t1, &opts)?;
    let drift = traj.max_l2_drift();
    let max_tail = traj.tail.iter().copied().fold(0.0, f64::max);
    let mut violations = u64::from(drift > 1e-8);
    let growth = match growth_exponent_with_threshold(&traj, ev.fit_s, ev.fit_window, ev.tail_threshold) {
        Ok(g) => serde_json::to_value(&g)?,
        Err(e @ GiqsError::TruncationContaminated { .. }) => {
            violations += 1;
            json!({ "refused": e.to_string() })
        }
        Err(e) => return Err(e),
    };
    let mut files = Vec::new();
    if cfg.output.trajectory_csv {
        let name = format!("{stem}-trajectory.csv");
        traj.write_csv(fs::File::create(dir.join(&name))?)?;
        files.push(name);
    }
    if !traj.checkpoints.is_empty() {
        let name = format!("{stem}-checkpoints.giqs");
        let times: Vec<f64> = traj.checkpoints.iter().map(|(t, _)| *t).collect();
        let data: Vec<Complex64> = traj.checkpoints.iter().flat_map(|(_, s)| s.coeffs.iter().copied()).collect();
        let index: Vec<&Vec<i64>> = basis.basis.states.iter().map(|s| &basis.basis.points[s.point].index).collect();
        let meta = json!({ "times": times, "basis": index });
        write_container(
            fs::File::create(dir.join(&name))?,
            &[times.len(), basis.len()],
            meta,
            &data,
        )?;
        files.push(name);
    }
    Ok(JobOutput {
        violations,
        payload: json!({
            "n_states": basis.len(),
            "method": traj.method,
            "steps": traj.steps,
            "halvings": traj.halvings,
            "max_l2_drift": drift,
            "max_tail": max_tail,
            "final_norms": traj.sobolev.iter().map(|v| v.last().copied()).collect::<Vec<_>>(),
            "s_list": traj.s_list,
            "growth": growth,
        }),
        files,
    })
}

//! Experiment configuration: TOML parsing, default injection and validation.
//!
//! Every violation found is reported, not only the first one. Unknown keys are
//! rejected with their full path.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{FieldMode, PerturbationKind, TimeDependentPerturbation, TimeProfile};
use crate::error::{GiqsError, Result};
use crate::lattice::Budget;
use crate::models::{AnharmonicParams, GiqsModel, LieGroupParams, QuadraticForm};
use crate::partition::{PartitionChecks, ResonanceParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

/// Resolved model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Torus { dim: usize, metric: Vec<f64> },
    Sphere { n: u32 },
    Lie { group: String, weights: Option<Vec<Vec<f64>>> },
    Anharmonic { ell: u32, kappa: [f64; 2], nodes: usize },
}

impl ModelSpec {
    pub fn build(&self) -> Result<GiqsModel> {
        match self {
            ModelSpec::Torus { dim, metric } => {
                let identity = (0..dim * dim).all(|ij| metric[ij] == if ij / dim == ij % dim { 1.0 } else { 0.0 });
                if identity {
                    Ok(GiqsModel::flat_torus(*dim))
                } else {
                    Ok(GiqsModel::torus(QuadraticForm::from_f64(*dim, metric.clone())?))
                }
            }
            ModelSpec::Sphere { n } => GiqsModel::sphere(*n),
            ModelSpec::Lie { group, weights } => {
                let params = match (group.as_str(), weights) {
                    (_, Some(w)) => LieGroupParams::from_weights(group, w)?,
                    ("su2", None) => LieGroupParams::su2(),
                    ("su3", None) => LieGroupParams::su3(),
                    (g, None) => return Err(GiqsError::invalid(format!("unknown Lie group `{g}`"))),
                };
                Ok(GiqsModel::lie_group(params))
            }
            ModelSpec::Anharmonic { ell, kappa, nodes } => {
                let mut p = AnharmonicParams::new(*ell);
                p.nodes = *nodes;
                GiqsModel::anharmonic_with_kappa(p, *kappa)
            }
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct RawModel {
    kind: Option<String>,
    dim: Option<usize>,
    metric: Option<Vec<f64>>,
    n: Option<u32>,
    group: Option<String>,
    weights: Option<Vec<Vec<f64>>>,
    ell: Option<u32>,
    kappa: Option<Vec<f64>>,
    nodes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct RawResonance {
    delta: Option<f64>,
    mu: Option<f64>,
    r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionRun {
    pub r_min: f64,
    pub r_max: f64,
    pub dyadic_limit: f64,
    pub separation_floor: f64,
    pub max_listed: usize,
}

impl Default for PartitionRun {
    fn default() -> Self {
        let c = PartitionChecks::default();
        PartitionRun {
            r_min: 8.0,
            r_max: 64.0,
            dyadic_limit: c.dyadic_limit,
            separation_floor: c.separation_floor,
            max_listed: c.max_listed,
        }
    }
}

impl PartitionRun {
    pub fn checks(&self) -> PartitionChecks {
        PartitionChecks {
            dyadic_limit: self.dyadic_limit,
            separation_floor: self.separation_floor,
            max_listed: self.max_listed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClustersRun {
    pub e_max: f64,
}

impl Default for ClustersRun {
    fn default() -> Self {
        ClustersRun { e_max: 1e4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelnikovRun {
    pub r: usize,
    pub cutoff: f64,
    pub gamma: f64,
    pub tau: f64,
    pub e_max: Option<f64>,
    pub max_listed: usize,
}

impl Default for MelnikovRun {
    fn default() -> Self {
        MelnikovRun {
            r: 4,
            cutoff: 10.0,
            gamma: 1.0,
            tau: 1.0,
            e_max: None,
            max_listed: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteepnessRun {
    /// Subspace dimensions to probe; empty means every `1 <= s < d`.
    pub s: Vec<usize>,
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub n_points: usize,
    pub n_subspaces: usize,
    pub niederman_lines: usize,
    pub niederman_samples: usize,
    pub zero_threshold: f64,
}

impl Default for SteepnessRun {
    fn default() -> Self {
        SteepnessRun {
            s: Vec::new(),
            r_min: None,
            r_max: None,
            n_points: 32,
            n_subspaces: 4,
            niederman_lines: 50,
            niederman_samples: 200,
            zero_threshold: 1e-6,
        }
    }
}

/// One Fourier coefficient `v(k)` of a convolution operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeEntry {
    pub k: Vec<i64>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// Static perturbation used by `spectrum` and `normalform`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaticPerturbation {
    /// `convolution` or `random_decay`.
    pub kind: String,
    pub order: f64,
    pub decay: f64,
    /// Random-decay amplitude.
    pub amplitude: f64,
    /// Convolution coefficients; `-k` partners are added as conjugates when missing.
    /// Empty means `v(0) = 0.3`, `v(±e_j) = 0.1/j`.
    pub modes: Vec<ModeEntry>,
}

impl Default for StaticPerturbation {
    fn default() -> Self {
        StaticPerturbation {
            kind: "convolution".into(),
            order: 0.0,
            decay: 4.0,
            amplitude: 0.05,
            modes: Vec::new(),
        }
    }
}

impl StaticPerturbation {
    /// Coefficient list with conjugate partners filled in.
    pub fn coefficients(&self, d: usize) -> Vec<(Vec<i64>, num_complex::Complex64)> {
        use num_complex::Complex64 as C;
        let mut out: Vec<(Vec<i64>, C)> = if self.modes.is_empty() {
            let mut v = vec![(vec![0; d], C::new(0.3, 0.0))];
            for j in 0..d {
                let mut e = vec![0; d];
                e[j] = 1;
                v.push((e, C::new(0.1 / (j + 1) as f64, 0.0)));
            }
            v
        } else {
            self.modes.iter().map(|m| (m.k.clone(), C::new(m.re, m.im))).collect()
        };
        let n = out.len();
        for i in 0..n {
            let neg: Vec<i64> = out[i].0.iter().map(|x| -x).collect();
            if !out.iter().any(|(k, _)| *k == neg) {
                let c = out[i].1.conj();
                out.push((neg, c));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrumRun {
    pub r_min: f64,
    pub r_max: f64,
    pub perturbation: StaticPerturbation,
    /// Shell window `[fit_lo, fit_hi)` and width of the residual power-law fit.
    pub fit_lo: f64,
    pub fit_hi: f64,
    pub fit_width: f64,
    /// Radii at which the Ω deficiency is counted.
    pub omega_radii: Vec<f64>,
}

impl Default for SpectrumRun {
    fn default() -> Self {
        SpectrumRun {
            r_min: 8.0,
            r_max: 40.0,
            perturbation: StaticPerturbation::default(),
            fit_lo: 12.0,
            fit_hi: 36.0,
            fit_width: 2.0,
            omega_radii: vec![16.0, 32.0, 64.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalFormRun {
    pub r_min: f64,
    pub r_max: f64,
    pub steps: usize,
    pub divisor_floor: f64,
    pub perturbation: StaticPerturbation,
    pub fit_lo: f64,
    pub fit_hi: f64,
    pub fit_width: f64,
    /// Write `G`, `Z` and `R` to binary containers.
    pub export_matrices: bool,
}

impl Default for NormalFormRun {
    fn default() -> Self {
        NormalFormRun {
            r_min: 8.0,
            r_max: 40.0,
            steps: 1,
            divisor_floor: 1e-10,
            perturbation: StaticPerturbation::default(),
            fit_lo: 12.0,
            fit_hi: 36.0,
            fit_width: 2.0,
            export_matrices: false,
        }
    }
}

/// Time-dependent perturbation used by `evolve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicPerturbation {
    /// `magnetic_torus`, `convolution_potential`, `random_decay`, `free`, or
    /// `auto` (magnetic on the torus, random decay elsewhere).
    pub kind: String,
    /// Scale of the default quasiperiodic profiles.
    pub amplitude: f64,
    /// Declared order; defaults to 1 for the magnetic field and 0 otherwise.
    pub order: Option<f64>,
    pub decay: f64,
    /// Explicit field modes per axis (magnetic torus); default: one smooth mode per axis.
    pub field: Option<Vec<Vec<FieldMode>>>,
    /// Explicit potential modes; default: two smooth modes.
    pub potential: Option<Vec<FieldMode>>,
    /// `(frequency, amplitude)` pairs of the random-decay modulation.
    pub profile: Option<Vec<(f64, f64)>>,
}

impl Default for DynamicPerturbation {
    fn default() -> Self {
        DynamicPerturbation {
            kind: "auto".into(),
            amplitude: 0.3,
            order: None,
            decay: 4.0,
            field: None,
            potential: None,
            profile: None,
        }
    }
}

const GOLDEN: f64 = 1.618_033_988_749_895;

fn quasiperiodic(amplitude: f64, shift: usize) -> TimeProfile {
    let freqs = [1.0, std::f64::consts::SQRT_2, GOLDEN];
    TimeProfile {
        terms: (0..3)
            .map(|i| (freqs[(i + shift) % 3], amplitude / (i + 1) as f64))
            .collect(),
    }
}

impl DynamicPerturbation {
    /// The kind after resolving `auto`.
    pub fn resolved_kind(&self, torus: bool) -> &str {
        match self.kind.as_str() {
            "auto" if torus => "magnetic_torus",
            "auto" => "random_decay",
            k => k,
        }
    }

    pub fn resolved_order(&self, torus: bool) -> f64 {
        self.order
            .unwrap_or(if self.resolved_kind(torus) == "magnetic_torus" { 1.0 } else { 0.0 })
    }

    pub fn build(&self, d: usize, torus: bool, seed: u64) -> Result<TimeDependentPerturbation> {
        let unit = |j: usize| {
            let mut e = vec![0i64; d];
            e[j % d] = 1;
            e
        };
        let default_potential = || {
            let mut v = vec![FieldMode {
                k: vec![1; d],
                re: 0.5,
                im: 0.0,
                profile: quasiperiodic(self.amplitude, 2),
            }];
            if d >= 2 {
                let mut k = vec![0; d];
                k[0] = 1;
                k[1] = -1;
                v.push(FieldMode {
                    k,
                    re: 0.25,
                    im: 0.25,
                    profile: quasiperiodic(self.amplitude, 0),
                });
            }
            v
        };
        let kind = match self.resolved_kind(torus) {
            "magnetic_torus" => PerturbationKind::MagneticTorus {
                field: self.field.clone().unwrap_or_else(|| {
                    (0..d)
                        .map(|j| {
                            let (re, im) = if j % 2 == 0 { (0.5, 0.0) } else { (0.0, 0.5) };
                            vec![FieldMode {
                                k: unit(j + 1),
                                re,
                                im,
                                profile: quasiperiodic(self.amplitude, j),
                            }]
                        })
                        .collect()
                }),
                potential: self.potential.clone().unwrap_or_else(default_potential),
            },
            "convolution_potential" => PerturbationKind::ConvolutionPotential {
                potential: self.potential.clone().unwrap_or_else(default_potential),
            },
            "random_decay" => PerturbationKind::RandomDecay {
                amplitude: self.amplitude,
                profile: self
                    .profile
                    .clone()
                    .map(|terms| TimeProfile { terms })
                    .unwrap_or_else(|| quasiperiodic(1.0, 0)),
            },
            "free" => PerturbationKind::Free,
            other => return Err(GiqsError::invalid(format!("unknown perturbation kind `{other}`"))),
        };
        Ok(TimeDependentPerturbation {
            kind,
            order: self.resolved_order(torus),
            decay: self.decay,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveRun {
    pub cutoff: f64,
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub s_list: Vec<f64>,
    pub record_every: usize,
    /// Keep full states every this many records (written to a binary container).
    pub checkpoint_every: Option<usize>,
    pub fit_s: f64,
    pub fit_window: (f64, f64),
    pub tail_threshold: f64,
    pub drift_tol: f64,
    /// Radius of the support of the random initial state.
    pub init_radius: f64,
    pub perturbation: DynamicPerturbation,
}

impl Default for EvolveRun {
    fn default() -> Self {
        EvolveRun {
            cutoff: 32.0,
            t0: 0.0,
            t1: 1000.0,
            dt: 0.1,
            s_list: vec![1.0, 2.0],
            record_every: 10,
            checkpoint_every: None,
            fit_s: 2.0,
            fit_window: (1.0, 1000.0),
            tail_threshold: crate::dynamics::TAIL_THRESHOLD,
            drift_tol: 1e-10,
            init_radius: 3.0,
            perturbation: DynamicPerturbation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    /// Independent jobs, one per seed; empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub partition: PartitionRun,
    pub clusters: ClustersRun,
    pub melnikov: MelnikovRun,
    pub steepness: SteepnessRun,
    pub spectrum: SpectrumRun,
    pub normalform: NormalFormRun,
    pub evolve: EvolveRun,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            seeds: Vec::new(),
            jobs: 1,
            partition: PartitionRun::default(),
            clusters: ClustersRun::default(),
            melnikov: MelnikovRun::default(),
            steepness: SteepnessRun::default(),
            spectrum: SpectrumRun::default(),
            normalform: NormalFormRun::default(),
            evolve: EvolveRun::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: String,
    pub trajectory_csv: bool,
    pub spectrum_csv: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "giqs-out".into(),
            trajectory_csv: true,
            spectrum_csv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub resonance: ResonanceParams,
    pub run: RunSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        if self.run.seeds.is_empty() {
            vec![self.run.seed]
        } else {
            self.run.seeds.clone()
        }
    }

    /// The configuration without `run.jobs` and `output.dir`, which only
    /// affect how and where a run executes.
    pub fn experiment_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(run) = v.get_mut("run").and_then(|r| r.as_object_mut()) {
            run.remove("jobs");
        }
        if let Some(out) = v.get_mut("output").and_then(|r| r.as_object_mut()) {
            out.remove("dir");
        }
        crate::report::sort_keys(v)
    }

    /// Hex SHA-256 of the canonical (sorted-key) JSON form of [`Self::experiment_value`].
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.experiment_value()).expect("json");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_model(&self) -> Result<GiqsModel> {
        self.model.build()
    }
}

/// Deserializes one section, recording unknown keys and type errors under `path`.
fn section<T: serde::de::DeserializeOwned + Default>(
    table: &toml::Table,
    path: &str,
    errors: &mut Vec<String>,
) -> T {
    let Some(v) = table.get(path) else {
        return T::default();
    };
    let mut unknown = Vec::new();
    let out = serde_ignored::deserialize(v.clone(), |p| unknown.push(p.to_string()));
    for u in unknown {
        errors.push(format!("{path}.{u}: unknown key"));
    }
    match out {
        Ok(x) => x,
        Err(e) => {
            errors.push(format!("{path}: {}", e.to_string().trim()));
            T::default()
        }
    }
}

fn check(errors: &mut Vec<String>, ok: bool, msg: impl FnOnce() -> String) {
    if !ok {
        errors.push(msg());
    }
}

fn resolve_model(raw: RawModel, errors: &mut Vec<String>) -> Option<ModelSpec> {
    let Some(kind) = raw.kind.clone() else {
        errors.push("model.kind: missing (torus, sphere, lie or anharmonic)".into());
        return None;
    };
    let allowed: &[&str] = match kind.as_str() {
        "torus" => &["dim", "metric"],
        "sphere" => &["n"],
        "lie" => &["group", "weights"],
        "anharmonic" => &["ell", "kappa", "nodes"],
        other => {
            errors.push(format!("model.kind: unknown kind `{other}`"));
            return None;
        }
    };
    let given = [
        ("dim", raw.dim.is_some()),
        ("metric", raw.metric.is_some()),
        ("n", raw.n.is_some()),
        ("group", raw.group.is_some()),
        ("weights", raw.weights.is_some()),
        ("ell", raw.ell.is_some()),
        ("kappa", raw.kappa.is_some()),
        ("nodes", raw.nodes.is_some()),
    ];
    for (key, present) in given {
        if present && !allowed.contains(&key) {
            errors.push(format!("model.{key}: not a parameter of the {kind} model"));
        }
    }
    let before = errors.len();
    let spec = match kind.as_str() {
        "torus" => {
            let dim = raw.dim.or_else(|| raw.metric.as_ref().map(|m| (m.len() as f64).sqrt() as usize));
            let dim = dim.unwrap_or(2);
            check(errors, dim >= 1, || "model.dim: must be at least 1".into());
            let metric = raw
                .metric
                .unwrap_or_else(|| (0..dim * dim).map(|ij| if ij / dim == ij % dim { 1.0 } else { 0.0 }).collect());
            check(errors, metric.len() == dim * dim, || {
                format!("model.metric: needs {} entries for dim = {dim}, got {}", dim * dim, metric.len())
            });
            ModelSpec::Torus { dim, metric }
        }
        "sphere" => {
            let n = raw.n.unwrap_or(2);
            check(errors, n >= 2, || format!("model.n: sphere dimension must be >= 2, got {n}"));
            ModelSpec::Sphere { n }
        }
        "lie" => {
            let group = raw.group.unwrap_or_else(|| "su2".into());
            if raw.weights.is_none() {
                check(errors, group == "su2" || group == "su3", || {
                    format!("model.group: `{group}` needs explicit weights (built in: su2, su3)")
                });
            }
            ModelSpec::Lie {
                group,
                weights: raw.weights,
            }
        }
        _ => {
            let ell = raw.ell.unwrap_or(2);
            check(errors, ell >= 1, || format!("model.ell: must be >= 1, got {ell}"));
            let kappa = raw.kappa.unwrap_or_else(|| vec![0.5, 0.0]);
            check(errors, kappa.len() == 2, || "model.kappa: needs 2 entries".into());
            let nodes = raw.nodes.unwrap_or(48);
            check(errors, nodes >= 4, || "model.nodes: must be >= 4".into());
            ModelSpec::Anharmonic {
                ell,
                kappa: [kappa.first().copied().unwrap_or(0.5), kappa.get(1).copied().unwrap_or(0.0)],
                nodes,
            }
        }
    };
    if errors.len() > before {
        return None;
    }
    Some(spec)
}

/// Rough number of lattice points in a ball of radius `r` in dimension `d`.
fn ball_count(d: usize, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let mut v = 1.0;
    // volume of the unit ball by recursion V_d = 2π/d V_{d-2}
    let mut k = d;
    while k >= 2 {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k -= 2;
    }
    if k == 1 {
        v *= 2.0;
    }
    v * r.powi(d as i32)
}

fn validate(cfg: &ExperimentConfig, model: &GiqsModel, errors: &mut Vec<String>) {
    let d = model.dim();
    let deg = model.degree();
    if let Err(e) = cfg.resonance.validate(model) {
        errors.push(format!("resonance: {e}"));
    }
    let run = &cfg.run;
    check(errors, run.jobs >= 1, || "run.jobs: must be at least 1".into());
    let p = &run.partition;
    check(errors, p.r_min >= 0.0 && p.r_min < p.r_max, || {
        format!("run.partition: need 0 <= r_min < r_max, got [{}, {}]", p.r_min, p.r_max)
    });
    check(errors, p.dyadic_limit > 1.0, || "run.partition.dyadic_limit: must exceed 1".into());
    check(errors, p.separation_floor > 0.0, || "run.partition.separation_floor: must be positive".into());
    check(errors, run.clusters.e_max > 0.0, || "run.clusters.e_max: must be positive".into());
    let m = &run.melnikov;
    check(errors, m.r >= 2, || format!("run.melnikov.r: must be >= 2, got {}", m.r));
    check(errors, m.cutoff > 0.0, || "run.melnikov.cutoff: must be positive".into());
    check(errors, m.gamma > 0.0 && m.tau >= 0.0, || {
        "run.melnikov: gamma must be positive and tau nonnegative".into()
    });
    let s = &run.steepness;
    check(errors, s.s.iter().all(|&x| x >= 1 && x < d), || {
        format!("run.steepness.s: every entry must satisfy 1 <= s < {d}")
    });
    if let (Some(lo), Some(hi)) = (s.r_min, s.r_max) {
        check(errors, lo > 0.0 && lo < hi, || "run.steepness: need 0 < r_min < r_max".into());
    }
    check(errors, s.n_points >= 2 && s.n_subspaces >= 1, || {
        "run.steepness: n_points >= 2 and n_subspaces >= 1 required".into()
    });
    check(errors, s.niederman_samples >= 3 && s.zero_threshold > 0.0, || {
        "run.steepness: niederman_samples >= 3 and zero_threshold > 0 required".into()
    });

    let budget = Budget::from_env();
    let mut check_static = |path: &str, r_min: f64, r_max: f64, pert: &StaticPerturbation, fit: (f64, f64, f64)| {
        check(errors, r_min >= 0.0 && r_min < r_max, || {
            format!("{path}: need 0 <= r_min < r_max, got [{r_min}, {r_max}]")
        });
        check(errors, fit.0 < fit.1 && fit.2 > 0.0, || {
            format!("{path}: need fit_lo < fit_hi and fit_width > 0")
        });
        check(errors, pert.kind == "convolution" || pert.kind == "random_decay", || {
            format!("{path}.perturbation.kind: `{}` is not convolution or random_decay", pert.kind)
        });
        check(errors, pert.order < deg, || {
            format!("{path}.perturbation.order: must be below the degree {deg}, got {}", pert.order)
        });
        check(errors, pert.decay > 0.0, || format!("{path}.perturbation.decay: must be positive"));
        for (i, mode) in pert.modes.iter().enumerate() {
            check(errors, mode.k.len() == d, || {
                format!("{path}.perturbation.modes[{i}].k: needs {d} entries")
            });
        }
        // same rule as the basis constructor
        let n = ball_count(d, r_max) - ball_count(d, r_min - 1.0);
        if let Err(e) = budget.check("dense operator", 16.0 * n * n) {
            errors.push(format!("{path}.r_max: {e}"));
        }
    };
    let sp = &run.spectrum;
    check_static("run.spectrum", sp.r_min, sp.r_max, &sp.perturbation, (sp.fit_lo, sp.fit_hi, sp.fit_width));
    let nf = &run.normalform;
    check_static("run.normalform", nf.r_min, nf.r_max, &nf.perturbation, (nf.fit_lo, nf.fit_hi, nf.fit_width));
    check(errors, sp.omega_radii.iter().all(|&r| r > 0.0), || {
        "run.spectrum.omega_radii: must be positive".into()
    });
    check(errors, nf.steps >= 1, || "run.normalform.steps: must be at least 1".into());
    check(errors, nf.divisor_floor > 0.0, || "run.normalform.divisor_floor: must be positive".into());

    let ev = &run.evolve;
    check(errors, ev.cutoff > 0.0, || "run.evolve.cutoff: must be positive".into());
    check(errors, ev.dt > 0.0, || format!("run.evolve.dt: must be positive, got {}", ev.dt));
    check(errors, ev.t1 != ev.t0, || "run.evolve: t1 must differ from t0".into());
    check(errors, !ev.s_list.is_empty(), || "run.evolve.s_list: must not be empty".into());
    check(errors, ev.s_list.contains(&ev.fit_s), || {
        format!("run.evolve.fit_s: {} is not in s_list", ev.fit_s)
    });
    let (lo, hi) = (ev.t0.min(ev.t1), ev.t0.max(ev.t1));
    check(errors, ev.fit_window.0 < ev.fit_window.1 && ev.fit_window.0 >= lo && ev.fit_window.1 <= hi, || {
        format!("run.evolve.fit_window: must be an interval inside [{lo}, {hi}]")
    });
    check(errors, ev.record_every >= 1, || "run.evolve.record_every: must be at least 1".into());
    check(errors, ev.tail_threshold > 0.0 && ev.drift_tol > 0.0, || {
        "run.evolve: tail_threshold and drift_tol must be positive".into()
    });
    let dp = &ev.perturbation;
    let torus = matches!(cfg.model, ModelSpec::Torus { .. });
    check(
        errors,
        ["auto", "magnetic_torus", "convolution_potential", "random_decay", "free"].contains(&dp.kind.as_str()),
        || format!("run.evolve.perturbation.kind: unknown kind `{}`", dp.kind),
    );
    let order = dp.resolved_order(torus);
    check(errors, order < deg, || {
        format!("run.evolve.perturbation.order: must be below the degree {deg}, got {order}")
    });
    if dp.kind == "magnetic_torus" {
        check(errors, torus, || {
            "run.evolve.perturbation.kind: magnetic_torus requires the torus model".into()
        });
    }
    if dp.kind == "convolution_potential" {
        check(errors, matches!(cfg.model, ModelSpec::Torus { .. } | ModelSpec::Anharmonic { .. }), || {
            "run.evolve.perturbation.kind: convolution_potential needs a multiplicity-one model".into()
        });
    }
    let n = ball_count(d, ev.cutoff);
    if let Err(e) = budget.check("evolution workspace", 64.0 * 16.0 * n) {
        errors.push(format!("run.evolve.cutoff: {e}"));
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| GiqsError::Config(ConfigErrors(vec![e.to_string().trim().to_string()])))?;
    let mut errors = Vec::new();
    for key in table.keys() {
        if !["model", "resonance", "run", "output"].contains(&key.as_str()) {
            errors.push(format!("{key}: unknown section"));
        }
    }
    let raw_model: RawModel = section(&table, "model", &mut errors);
    if !table.contains_key("model") {
        errors.push("model: missing section".into());
    }
    let raw_res: RawResonance = section(&table, "resonance", &mut errors);
    let run: RunSection = section(&table, "run", &mut errors);
    let output: OutputSection = section(&table, "output", &mut errors);
    let spec = if table.contains_key("model") {
        resolve_model(raw_model, &mut errors)
    } else {
        None
    };
    let model = spec.as_ref().and_then(|s| match s.build() {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(format!("model: {e}"));
            None
        }
    });
    let (Some(spec), Some(model)) = (spec, model) else {
        return Err(GiqsError::Config(ConfigErrors(errors)));
    };
    let defaults = ResonanceParams::defaults_for(&model);
    let cfg = ExperimentConfig {
        model: spec,
        resonance: ResonanceParams {
            delta: raw_res.delta.unwrap_or(defaults.delta),
            mu: raw_res.mu.unwrap_or(defaults.mu),
            r: raw_res.r.unwrap_or(defaults.r),
        },
        run,
        output,
    };
    validate(&cfg, &model, &mut errors);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(GiqsError::Config(ConfigErrors(errors)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors_of(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(GiqsError::Config(ConfigErrors(e))) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_torus_gets_defaults() {
        let cfg = parse_config("[model]\nkind = \"torus\"\n").unwrap();
        assert_eq!(cfg.resonance.delta, 0.5);
        assert_eq!(cfg.resonance.mu, 0.25);
        assert_eq!(cfg.resonance.r, 8.0);
        assert_eq!(cfg.model, ModelSpec::Torus { dim: 2, metric: vec![1.0, 0.0, 0.0, 1.0] });
    }

    #[test]
    fn delta_at_the_bound_is_rejected() {
        let e = errors_of("[model]\nkind = \"torus\"\n[resonance]\ndelta = 1.5\n");
        assert_eq!(e.len(), 1);
        assert!(e[0].contains("delta"), "{e:?}");
    }

    #[test]
    fn ell_zero_is_rejected() {
        let e = errors_of("[model]\nkind = \"anharmonic\"\nell = 0\n");
        assert!(e.iter().any(|m| m.contains("model.ell")), "{e:?}");
    }

    #[test]
    fn every_violation_is_listed() {
        let e = errors_of(
            "[model]\nkind = \"torus\"\nn = 3\n[run]\nbogus = 1\n[run.evolve]\ndt = -1.0\n[run.melnikov]\nr = 1\n[extra]\n",
        );
        for needle in ["model.n", "run.bogus", "run.evolve.dt", "run.melnikov.r", "extra"] {
            assert!(e.iter().any(|m| m.contains(needle)), "{needle} missing from {e:?}");
        }
    }

    #[test]
    fn syntax_errors_carry_position() {
        let e = errors_of("[model]\nkind = \n");
        assert!(e[0].contains("line 2"), "{e:?}");
    }

    #[test]
    fn hash_depends_on_content() {
        let a = parse_config("[model]\nkind = \"torus\"\n").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}

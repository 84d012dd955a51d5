//! C ABI over the giqs toolkit.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. Every fallible call returns a [`GiqsStatus`];
//! the message of the most recent failure on the calling thread is available
//! from [`giqs_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use giqs::cli::Command;
use giqs::config::parse_config;
use giqs::models::{AnharmonicParams, LieGroupParams};
use giqs::partition::{build_partition, PartitionChecks, ResonanceParams};
use giqs::report::to_canonical_json;
use giqs::{ActionPoint, GiqsError, GiqsModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GiqsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfDomain = 3,
    Budget = 4,
    Config = 5,
    Numerical = 6,
    Io = 7,
    Utf8 = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct GiqsModelHandle {
    model: GiqsModel,
}

/// Opaque report handle: a canonical JSON document plus summary numbers.
pub struct GiqsReportHandle {
    json: CString,
    violations: u64,
}

/// Summary of a partition run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GiqsPartitionSummary {
    pub n_points: usize,
    pub n_blocks: usize,
    pub boundary_blocks: usize,
    pub dyadic_constant: f64,
    pub separation_constant: f64,
    pub violations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &GiqsError) -> GiqsStatus {
    match e {
        GiqsError::InvalidArgument(_) | GiqsError::ModelMismatch { .. } | GiqsError::EmptyDomain(_) => {
            GiqsStatus::InvalidArgument
        }
        GiqsError::OutOfCone(_) | GiqsError::OutOfDomain { .. } => GiqsStatus::OutOfDomain,
        GiqsError::Budget { .. } => GiqsStatus::Budget,
        GiqsError::Config(_) => GiqsStatus::Config,
        GiqsError::Io(_) | GiqsError::Csv(_) | GiqsError::Json(_) | GiqsError::Container(_) => GiqsStatus::Io,
        _ => GiqsStatus::Numerical,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), (GiqsStatus, String)>>(f: F) -> GiqsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GiqsStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            GiqsStatus::Panic
        }
    }
}

fn lift<T>(r: giqs::Result<T>) -> Result<T, (GiqsStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (GiqsStatus, String) {
    (GiqsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GiqsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GiqsStatus::Utf8, format!("{what} is not valid UTF-8")))
}

unsafe fn put_model(out: *mut *mut GiqsModelHandle, model: GiqsModel) -> Result<(), (GiqsStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(GiqsModelHandle { model }));
    Ok(())
}

/// Message of the last failure on this thread, or null. Free with [`giqs_string_free`].
#[no_mangle]
pub extern "C" fn giqs_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(m) => CString::new(m.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn giqs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Flat torus `T^d` with `h_L(a) = |a|²`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn giqs_model_torus(d: usize, out: *mut *mut GiqsModelHandle) -> GiqsStatus {
    guard(|| {
        if d == 0 {
            return Err((GiqsStatus::InvalidArgument, "d must be positive".into()));
        }
        put_model(out, GiqsModel::flat_torus(d))
    })
}

/// Laplacian on the sphere `S^n`, `n >= 2`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn giqs_model_sphere(n: u32, out: *mut *mut GiqsModelHandle) -> GiqsStatus {
    guard(|| {
        let m = lift(GiqsModel::sphere(n))?;
        put_model(out, m)
    })
}

/// Laplacian on a compact Lie group: `"su2"` or `"su3"`.
///
/// # Safety
/// `group` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn giqs_model_lie(group: *const c_char, out: *mut *mut GiqsModelHandle) -> GiqsStatus {
    guard(|| {
        let params = match c_str(group, "group")? {
            "su2" => LieGroupParams::su2(),
            "su3" => LieGroupParams::su3(),
            g => return Err((GiqsStatus::InvalidArgument, format!("unknown group `{g}`"))),
        };
        put_model(out, GiqsModel::lie_group(params))
    })
}

/// Planar anharmonic oscillator with potential `|x|^{2ℓ}/(2ℓ)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn giqs_model_anharmonic(ell: u32, out: *mut *mut GiqsModelHandle) -> GiqsStatus {
    guard(|| {
        let m = lift(GiqsModel::anharmonic(AnharmonicParams::new(ell)))?;
        put_model(out, m)
    })
}

/// # Safety
/// `model` must come from a `giqs_model_*` constructor and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn giqs_model_free(model: *mut GiqsModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of actions `d`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn giqs_model_dim(model: *const GiqsModelHandle) -> usize {
    model.as_ref().map_or(0, |m| m.model.dim())
}

/// Homogeneity degree of `h_L`, or NaN for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn giqs_model_degree(model: *const GiqsModelHandle) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.model.degree())
}

unsafe fn lattice_point<'a>(
    model: *const GiqsModelHandle,
    index: *const i64,
    len: usize,
) -> Result<(&'a GiqsModel, ActionPoint), (GiqsStatus, String)> {
    let m = model.as_ref().ok_or_else(|| null("model"))?;
    if index.is_null() {
        return Err(null("index"));
    }
    if len != m.model.dim() {
        return Err((
            GiqsStatus::InvalidArgument,
            format!("index has {len} entries, model has d = {}", m.model.dim()),
        ));
    }
    let idx = std::slice::from_raw_parts(index, len).to_vec();
    if !m.model.in_spectrum(&idx) {
        return Err((GiqsStatus::OutOfDomain, format!("{idx:?} is not in the joint spectrum")));
    }
    let a = ActionPoint::new(idx, m.model.kappa());
    Ok((&m.model, a))
}

/// Eigenvalue `ω_a = h_L(a)` of the lattice point with integer index `index[0..len]`.
///
/// # Safety
/// `model` must be a live handle, `index` must point to `len` integers and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn giqs_model_omega(
    model: *const GiqsModelHandle,
    index: *const i64,
    len: usize,
    out: *mut f64,
) -> GiqsStatus {
    guard(|| {
        let (m, a) = lattice_point(model, index, len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(m.omega(&a))?;
        Ok(())
    })
}

/// Multiplicity of the joint eigenvalue with integer index `index[0..len]`.
///
/// # Safety
/// As for [`giqs_model_omega`].
#[no_mangle]
pub unsafe extern "C" fn giqs_model_multiplicity(
    model: *const GiqsModelHandle,
    index: *const i64,
    len: usize,
    out: *mut usize,
) -> GiqsStatus {
    guard(|| {
        let (m, a) = lattice_point(model, index, len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.multiplicity(&a);
        Ok(())
    })
}

/// `h_L` at a real point `a[0..len]`.
///
/// # Safety
/// `model` must be a live handle, `a` must point to `len` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn giqs_model_h(
    model: *const GiqsModelHandle,
    a: *const f64,
    len: usize,
    out: *mut f64,
) -> GiqsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if a.is_null() || out.is_null() {
            return Err(null("a or out"));
        }
        if len != m.model.dim() {
            return Err((GiqsStatus::InvalidArgument, format!("point has {len} entries")));
        }
        *out = lift(m.model.h_value(std::slice::from_raw_parts(a, len)))?;
        Ok(())
    })
}

/// Builds the resonance partition of `r_min <= |a| <= r_max` with default checks.
/// Pass NaN for `delta`, `mu` or `r` to use the model defaults.
///
/// # Safety
/// `model` must be a live handle; `summary` and `report` may each be null.
#[no_mangle]
pub unsafe extern "C" fn giqs_partition(
    model: *const GiqsModelHandle,
    r_min: f64,
    r_max: f64,
    delta: f64,
    mu: f64,
    r: f64,
    summary: *mut GiqsPartitionSummary,
    report: *mut *mut GiqsReportHandle,
) -> GiqsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let def = ResonanceParams::defaults_for(&m.model);
        let pick = |x: f64, d: f64| if x.is_nan() { d } else { x };
        let p = ResonanceParams {
            delta: pick(delta, def.delta),
            mu: pick(mu, def.mu),
            r: pick(r, def.r),
        };
        let rep = lift(build_partition(&m.model, r_min, r_max, &p, &PartitionChecks::default()))?;
        if let Some(s) = summary.as_mut() {
            *s = GiqsPartitionSummary {
                n_points: rep.n_points,
                n_blocks: rep.blocks.len(),
                boundary_blocks: rep.boundary_blocks,
                dyadic_constant: rep.dyadic_constant,
                separation_constant: rep.separation_constant,
                violations: rep.violations.total(),
            };
        }
        if !report.is_null() {
            let json = lift(to_canonical_json(&rep))?;
            *report = Box::into_raw(Box::new(GiqsReportHandle {
                json: CString::new(json).map_err(|_| (GiqsStatus::Numerical, "NUL in report".into()))?,
                violations: rep.violations.total() as u64,
            }));
        }
        Ok(())
    })
}

/// Parses a TOML configuration and runs one subcommand (`"partition"`,
/// `"clusters"`, `"melnikov"`, `"steepness"`, `"spectrum"`, `"normalform"`
/// or `"evolve"`), writing side files to `out_dir` (null: the configured directory).
/// The report of the first seed is returned.
///
/// # Safety
/// String arguments must be NUL-terminated (or null where allowed) and `report` valid.
#[no_mangle]
pub unsafe extern "C" fn giqs_run(
    config_toml: *const c_char,
    subcommand: *const c_char,
    out_dir: *const c_char,
    report: *mut *mut GiqsReportHandle,
) -> GiqsStatus {
    guard(|| {
        if report.is_null() {
            return Err(null("report"));
        }
        let text = c_str(config_toml, "config")?;
        let cmd = match c_str(subcommand, "subcommand")? {
            "partition" => Command::Partition,
            "clusters" => Command::Clusters,
            "melnikov" => Command::Melnikov,
            "steepness" => Command::Steepness,
            "spectrum" => Command::Spectrum,
            "normalform" => Command::Normalform,
            "evolve" => Command::Evolve,
            other => return Err((GiqsStatus::InvalidArgument, format!("unknown subcommand `{other}`"))),
        };
        let mut cfg = lift(parse_config(text))?;
        if !out_dir.is_null() {
            cfg.output.dir = c_str(out_dir, "out_dir")?.to_string();
        }
        let outcome = lift(giqs::cli::run(&cfg, cmd))?;
        let rec = outcome
            .reports
            .into_iter()
            .next()
            .ok_or_else(|| (GiqsStatus::Numerical, "no report produced".into()))?;
        let json = lift(rec.to_json())?;
        *report = Box::into_raw(Box::new(GiqsReportHandle {
            json: CString::new(json).map_err(|_| (GiqsStatus::Numerical, "NUL in report".into()))?,
            violations: rec.violations,
        }));
        Ok(())
    })
}

/// JSON text of a report, valid until the report is freed.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn giqs_report_json(report: *const GiqsReportHandle) -> *const c_char {
    report.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// Number of verification violations recorded in a report.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn giqs_report_violations(report: *const GiqsReportHandle) -> u64 {
    report.as_ref().map_or(0, |r| r.violations)
}

/// # Safety
/// `report` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn giqs_report_free(report: *mut GiqsReportHandle) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

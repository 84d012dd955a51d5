//! Catalog of globally integrable models: the function `h_L` of the actions,
//! its gradient `w`, multiplicities `n_a` and the Sobolev weight `k0`.

pub mod anharmonic;

use std::fmt;
use std::sync::Arc;

use faer::{Mat, Side};
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

pub use anharmonic::{invert_actions, radial_action, regularized_action_a1, AnharmonicParams};

use crate::error::{GiqsError, Result};
use crate::lattice::{norm, ActionPoint, Cone};

pub type Rational = Ratio<i128>;

/// Symmetric positive definite form `h(a) = aᵀ G a`, optionally with exact
/// rational entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticForm {
    pub d: usize,
    pub gram: Vec<f64>,
    #[serde(skip)]
    pub exact: Option<Vec<Rational>>,
}

impl QuadraticForm {
    pub fn identity(d: usize) -> Self {
        let exact: Vec<Rational> = (0..d * d)
            .map(|i| if i % (d + 1) == 0 { Rational::from_integer(1) } else { Rational::zero() })
            .collect();
        QuadraticForm::from_rationals(d, exact).expect("identity is positive definite")
    }

    pub fn from_rationals(d: usize, entries: Vec<Rational>) -> Result<Self> {
        let gram: Vec<f64> = entries.iter().map(|r| r.to_f64().unwrap_or(f64::NAN)).collect();
        let mut q = QuadraticForm::from_f64(d, gram)?;
        q.exact = Some(entries);
        Ok(q)
    }

    pub fn from_f64(d: usize, gram: Vec<f64>) -> Result<Self> {
        if d == 0 || gram.len() != d * d {
            return Err(GiqsError::invalid(format!(
                "quadratic form needs {} entries, got {}",
                d * d,
                gram.len()
            )));
        }
        for i in 0..d {
            for j in 0..d {
                let (x, y) = (gram[i * d + j], gram[j * d + i]);
                if !x.is_finite() || (x - y).abs() > 1e-14 * (1.0 + x.abs()) {
                    return Err(GiqsError::invalid("quadratic form must be finite and symmetric"));
                }
            }
        }
        let q = QuadraticForm { d, gram, exact: None };
        if q.min_eigenvalue() <= 0.0 {
            return Err(GiqsError::invalid("quadratic form must be positive definite"));
        }
        Ok(q)
    }

    pub fn eval(&self, a: &[f64]) -> f64 {
        let d = self.d;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += a[i] * self.gram[i * d + j] * a[j];
            }
        }
        s
    }

    pub fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let d = self.d;
        (0..d)
            .map(|i| 2.0 * (0..d).map(|j| self.gram[i * d + j] * a[j]).sum::<f64>())
            .collect()
    }

    pub fn eval_exact(&self, a: &[Rational]) -> Option<Rational> {
        let g = self.exact.as_ref()?;
        let d = self.d;
        let mut s = Rational::zero();
        for i in 0..d {
            for j in 0..d {
                s += a[i] * g[i * d + j] * a[j];
            }
        }
        Some(s)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = Mat::<f64>::from_fn(self.d, self.d, |i, j| self.gram[i * self.d + j]);
        match m.self_adjoint_eigenvalues(Side::Lower) {
            Ok(ev) => ev.iter().copied().fold(f64::INFINITY, f64::min),
            Err(_) => f64::NAN,
        }
    }

    pub fn total(&self) -> f64 {
        self.gram.iter().sum()
    }
}

/// Fundamental-weight data of a compact simply connected Lie group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LieGroupParams {
    pub name: String,
    pub form: QuadraticForm,
}

impl LieGroupParams {
    /// From explicit fundamental weights `f_1..f_d` in R^d.
    pub fn from_weights(name: &str, weights: &[Vec<f64>]) -> Result<Self> {
        let d = weights.len();
        if d == 0 || weights.iter().any(|w| w.len() != d) {
            return Err(GiqsError::invalid("need d fundamental weights in R^d"));
        }
        let gram: Vec<f64> = (0..d * d)
            .map(|ij| {
                let (i, j) = (ij / d, ij % d);
                weights[i].iter().zip(&weights[j]).map(|(x, y)| x * y).sum()
            })
            .collect();
        let form = QuadraticForm::from_f64(d, gram)
            .map_err(|_| GiqsError::invalid("fundamental weights must be linearly independent"))?;
        Ok(LieGroupParams {
            name: name.to_string(),
            form,
        })
    }

    /// SU(2) with `|f_1|² = 1/4`.
    pub fn su2() -> Self {
        let form = QuadraticForm::from_rationals(1, vec![Rational::new(1, 4)]).expect("valid");
        LieGroupParams {
            name: "su2".into(),
            form,
        }
    }

    /// SU(3) in the normalization where the SU(2) subgroup matches [`LieGroupParams::su2`].
    pub fn su3() -> Self {
        let g = vec![
            Rational::new(1, 3),
            Rational::new(1, 6),
            Rational::new(1, 6),
            Rational::new(1, 3),
        ];
        LieGroupParams {
            name: "su3".into(),
            form: QuadraticForm::from_rationals(2, g).expect("valid"),
        }
    }

    /// `F = Σ_{i,j} f_i·f_j`; the Laplacian is `h_L(a) − F`.
    pub fn offset(&self) -> f64 {
        self.form.total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereParams {
    pub n: u32,
}

impl SphereParams {
    pub fn shift(&self) -> f64 {
        (self.n as f64 - 1.0) / 2.0
    }

    /// Dimension of the degree-j spherical harmonics on S^n.
    pub fn harmonic_dimension(&self, j: u64) -> u64 {
        let n = self.n as u64;
        // (2j+n-1)(j+n-2)! / (j!(n-1)!)
        let mut binom: u128 = 1; // C(j+n-2, n-2)
        for i in 1..=(n - 2) as u128 {
            binom = binom * (j as u128 + i) / i;
        }
        let num = (2 * j + n - 1) as u128 * binom;
        (num / (n - 1) as u128) as u64
    }
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// User-supplied `h_L` for probing steepness and resonance on arbitrary functions.
#[derive(Clone)]
pub struct CustomModel {
    pub name: String,
    pub h: ScalarFn,
    pub grad: Option<VectorFn>,
}

impl fmt::Debug for CustomModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomModel").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    Torus(QuadraticForm),
    Sphere(SphereParams),
    Lie(LieGroupParams),
    Anharmonic(AnharmonicParams),
    Custom(CustomModel),
}

/// A globally integrable quantum system, described entirely on the action lattice.
#[derive(Debug, Clone)]
pub struct GiqsModel {
    kind: ModelKind,
    kappa: Vec<f64>,
    cone: Cone,
    degree: f64,
    r_hom: f64,
    eval_radius: f64,
}

/// Step used by the centered finite differences, relative to `max(1, |a|)`.
pub const FD_STEP: f64 = 1e-3;

impl GiqsModel {
    pub fn flat_torus(d: usize) -> Self {
        GiqsModel::torus(QuadraticForm::identity(d))
    }

    pub fn torus(metric: QuadraticForm) -> Self {
        GiqsModel {
            kappa: vec![0.0; metric.d],
            kind: ModelKind::Torus(metric),
            cone: Cone::Full,
            degree: 2.0,
            r_hom: 0.0,
            eval_radius: 0.0,
        }
    }

    pub fn sphere(n: u32) -> Result<Self> {
        if n < 2 {
            return Err(GiqsError::invalid("sphere dimension n must be >= 2"));
        }
        let p = SphereParams { n };
        Ok(GiqsModel {
            kappa: vec![p.shift()],
            kind: ModelKind::Sphere(p),
            cone: Cone::Orthant,
            degree: 2.0,
            r_hom: 0.0,
            eval_radius: 0.0,
        })
    }

    pub fn lie_group(params: LieGroupParams) -> Self {
        GiqsModel {
            kappa: vec![0.0; params.form.d],
            kind: ModelKind::Lie(params),
            cone: Cone::Orthant,
            degree: 2.0,
            r_hom: 0.0,
            eval_radius: 0.0,
        }
    }

    pub fn anharmonic(params: AnharmonicParams) -> Result<Self> {
        GiqsModel::anharmonic_with_kappa(params, [0.5, 0.0])
    }

    pub fn anharmonic_with_kappa(params: AnharmonicParams, kappa: [f64; 2]) -> Result<Self> {
        params.validate()?;
        Ok(GiqsModel {
            kind: ModelKind::Anharmonic(params),
            kappa: kappa.to_vec(),
            cone: Cone::Anharmonic,
            degree: params.degree(),
            r_hom: 1.0,
            eval_radius: 1.0,
        })
    }

    /// A model from an arbitrary function on R^d (no quantization attached:
    /// multiplicity 1, κ = 0, weight ⟨a⟩).
    pub fn custom(
        name: &str,
        d: usize,
        degree: f64,
        cone: Cone,
        h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: Option<Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
    ) -> Self {
        GiqsModel {
            kind: ModelKind::Custom(CustomModel {
                name: name.to_string(),
                h: Arc::new(h),
                grad: grad.map(Arc::from),
            }),
            kappa: vec![0.0; d],
            cone,
            degree,
            r_hom: 0.0,
            eval_radius: 0.0,
        }
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &str {
        match &self.kind {
            ModelKind::Torus(_) => "torus",
            ModelKind::Sphere(_) => "sphere",
            ModelKind::Lie(_) => "lie",
            ModelKind::Anharmonic(_) => "anharmonic",
            ModelKind::Custom(c) => &c.name,
        }
    }

    pub fn dim(&self) -> usize {
        self.kappa.len()
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn cone(&self) -> Cone {
        self.cone
    }

    /// Homogeneity degree at infinity.
    pub fn degree(&self) -> f64 {
        self.degree
    }

    /// Radius beyond which `h_L` is exactly homogeneous.
    pub fn homogeneity_radius(&self) -> f64 {
        self.r_hom
    }

    /// Below this radius `h_L` is not evaluated (regularized neighbourhood of the origin).
    pub fn eval_radius(&self) -> f64 {
        self.eval_radius
    }

    /// Model-specific restrictions of the lattice beyond the cone.
    pub fn in_spectrum(&self, index: &[i64]) -> bool {
        match &self.kind {
            ModelKind::Sphere(_) => index[0] >= 0,
            ModelKind::Lie(_) => index.iter().all(|&n| n >= 1),
            _ => true,
        }
    }

    fn check_domain(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.dim() {
            return Err(GiqsError::invalid(format!(
                "expected a {}-vector, got {}",
                self.dim(),
                a.len()
            )));
        }
        if !self.cone.contains(a) {
            return Err(GiqsError::OutOfCone(a.to_vec()));
        }
        let n = norm(a);
        if n < self.eval_radius {
            return Err(GiqsError::OutOfDomain {
                norm: n,
                radius: self.eval_radius,
            });
        }
        Ok(())
    }

    /// `h_L(a)`.
    pub fn h_value(&self, a: &[f64]) -> Result<f64> {
        self.check_domain(a)?;
        Ok(match &self.kind {
            ModelKind::Torus(q) => q.eval(a),
            ModelKind::Lie(p) => p.form.eval(a),
            ModelKind::Sphere(_) => a[0] * a[0],
            ModelKind::Anharmonic(p) => invert_actions(p, a[0], a[1])?,
            ModelKind::Custom(c) => (c.h)(a),
        })
    }

    /// `w(a) = ∇h_L(a)`; analytic where available, Richardson-extrapolated
    /// centered differences otherwise.
    pub fn gradient(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(a)?;
        match &self.kind {
            ModelKind::Torus(q) => Ok(q.gradient(a)),
            ModelKind::Lie(p) => Ok(p.form.gradient(a)),
            ModelKind::Sphere(_) => Ok(vec![2.0 * a[0]]),
            ModelKind::Custom(CustomModel { grad: Some(g), .. }) => Ok(g(a)),
            _ => self.fd_gradient(a),
        }
    }

    /// Centered finite-difference gradient of `h_L` (with one Richardson
    /// extrapolation), one-sided towards the interior near the cone boundary.
    pub fn fd_gradient(&self, a: &[f64]) -> Result<Vec<f64>> {
        let h0 = FD_STEP * norm(a).max(1.0);
        let d = self.dim();
        let mut out = vec![0.0; d];
        for i in 0..d {
            let eval_at = |t: f64| -> Result<f64> {
                let mut x = a.to_vec();
                x[i] += t;
                self.h_value(&x)
            };
            let central = |h: f64| -> Result<f64> { Ok((eval_at(h)? - eval_at(-h)?) / (2.0 * h)) };
            let forward = |h: f64, dir: f64| -> Result<f64> {
                // second-order one-sided difference
                let f0 = eval_at(0.0)?;
                let f1 = eval_at(dir * h)?;
                let f2 = eval_at(2.0 * dir * h)?;
                Ok(dir * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h))
            };
            let ok = |t: f64| {
                let mut x = a.to_vec();
                x[i] += t;
                self.cone.contains(&x) && norm(&x) >= self.eval_radius
            };
            out[i] = if ok(h0) && ok(-h0) {
                let d1 = central(h0)?;
                let d2 = central(h0 / 2.0)?;
                (4.0 * d2 - d1) / 3.0
            } else {
                let dir = if ok(2.0 * h0) { 1.0 } else { -1.0 };
                let d1 = forward(h0, dir)?;
                let d2 = forward(h0 / 2.0, dir)?;
                (4.0 * d2 - d1) / 3.0
            };
        }
        Ok(out)
    }

    /// Eigenvalue `ω_a = h_L(a)` at a lattice point.
    pub fn omega(&self, a: &ActionPoint) -> Result<f64> {
        self.h_value(&a.coords)
    }

    /// `ω_a` in exact rational arithmetic, when the model admits it.
    pub fn omega_exact(&self, a: &ActionPoint) -> Option<Rational> {
        let coords = self.exact_coords(a)?;
        match &self.kind {
            ModelKind::Torus(q) => q.eval_exact(&coords),
            ModelKind::Lie(p) => p.form.eval_exact(&coords),
            ModelKind::Sphere(_) => Some(coords[0] * coords[0]),
            _ => None,
        }
    }

    fn exact_coords(&self, a: &ActionPoint) -> Option<Vec<Rational>> {
        a.index
            .iter()
            .zip(&self.kappa)
            .map(|(&n, &k)| {
                // κ in the shipped models is a multiple of 1/2
                let twice = (2.0 * k).round();
                if (twice - 2.0 * k).abs() > 0.0 {
                    return None;
                }
                Some(Rational::from_integer(n as i128) + Rational::new(twice as i128, 2))
            })
            .collect()
    }

    /// `n_a`, the dimension of the joint eigenspace.
    pub fn multiplicity(&self, a: &ActionPoint) -> usize {
        match &self.kind {
            ModelKind::Sphere(p) => p.harmonic_dimension(a.index[0].max(0) as u64) as usize,
            _ => 1,
        }
    }

    /// Sobolev weight, the eigenvalue of `K_0` on the joint eigenspace of `a`.
    pub fn k0_weight(&self, a: &ActionPoint) -> f64 {
        match &self.kind {
            ModelKind::Torus(q) => (1.0 + q.eval(&a.coords)).sqrt(),
            ModelKind::Lie(p) => (1.0 + p.form.eval(&a.coords) - p.offset()).sqrt(),
            ModelKind::Sphere(p) => {
                let s = p.shift();
                (1.0 + a.coords[0] * a.coords[0] - s * s).sqrt()
            }
            ModelKind::Anharmonic(p) => {
                let e = invert_actions(p, a.coords[0], a.coords[1]).unwrap_or(f64::NAN);
                let l = p.ell as f64;
                (1.0 + e).powf((l + 1.0) / (2.0 * l))
            }
            ModelKind::Custom(_) => (1.0 + a.norm * a.norm).sqrt(),
        }
    }

    /// Upper bound on `|a|` over points with `h_L(a) <= e`.
    pub fn radius_for_energy(&self, e: f64) -> f64 {
        let e = e.max(0.0);
        match &self.kind {
            ModelKind::Torus(q) => (e / q.min_eigenvalue()).sqrt(),
            ModelKind::Lie(p) => (e / p.form.min_eigenvalue()).sqrt(),
            ModelKind::Sphere(_) => e.sqrt(),
            _ => {
                let r0 = 2.0 * self.eval_radius.max(1.0);
                let h_min = self.min_on_sphere(r0);
                (r0 * (e / h_min).powf(1.0 / self.degree) * 1.05).max(r0)
            }
        }
    }

    fn min_on_sphere(&self, r: f64) -> f64 {
        let d = self.dim();
        let mut best = f64::INFINITY;
        let mut visit = |x: Vec<f64>| {
            if self.cone.contains(&x) {
                if let Ok(v) = self.h_value(&x) {
                    best = best.min(v);
                }
            }
        };
        match d {
            1 => visit(vec![r]),
            2 => {
                for i in 0..720 {
                    let t = i as f64 * std::f64::consts::TAU / 720.0;
                    visit(vec![r * t.cos(), r * t.sin()]);
                }
            }
            _ => {
                let n = 4000;
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                for i in 0..n {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let rr = (1.0 - z * z).sqrt();
                    let t = golden * i as f64;
                    let mut x = vec![0.0; d];
                    x[0] = r * rr * t.cos();
                    x[1] = r * rr * t.sin();
                    x[2] = r * z;
                    visit(x);
                }
            }
        }
        best
    }
}

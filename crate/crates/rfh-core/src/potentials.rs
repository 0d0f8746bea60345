//! Starshaped potentials F with value/gradient/Hessian in eigenbasis coordinates.
//!
//! The zero set S = {F = 0} is required to bound a bounded strictly starshaped
//! domain: every ray from the origin meets S exactly once and the radial
//! derivative ⟨∇F(u),u⟩ stays bounded below by a positive constant on S.
//! `check_starshape` validates exactly that, by sampled radial root-finding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_reduction::KernelProblem;
use crate::spectrum::SpectralModel;

/// Cap for radial root scans; S beyond this radius counts as unbounded.
pub(crate) const RADIAL_SCAN_MAX: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    None,
    S1,
    Z2,
}

/// Quintic smoothstep on [0,1] with two continuous derivatives at the ends.
pub(crate) fn smoothstep(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let s = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        let ds = 30.0 * t * t * (1.0 - t) * (1.0 - t);
        let dds = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
        (s, ds, dds)
    }
}

/// Radial cutoff: 1 on [0, r_one], 0 on [r_zero, ∞), smooth in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialCutoff {
    pub r_one: f64,
    pub r_zero: f64,
}

impl RadialCutoff {
    fn eval(&self, r: f64) -> (f64, f64, f64) {
        let w = self.r_zero - self.r_one;
        let (s, ds, dds) = smoothstep((r - self.r_one) / w);
        (1.0 - s, -ds / w, -dds / (w * w))
    }
}

/// Radial bump: 0 outside [r0, r3], 1 on [r1, r2], smooth ramps between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialBump {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

impl RadialBump {
    pub fn around_shell(r_shell: f64) -> Self {
        Self { r0: 0.6 * r_shell, r1: 0.8 * r_shell, r2: 1.2 * r_shell, r3: 1.4 * r_shell }
    }

    fn eval(&self, r: f64) -> (f64, f64, f64) {
        if r < self.r2 {
            let w = self.r1 - self.r0;
            smoothstep_scaled((r - self.r0) / w, w)
        } else {
            let w = self.r3 - self.r2;
            let (s, ds, dds) = smoothstep_scaled((r - self.r2) / w, w);
            (1.0 - s, -ds, -dds)
        }
    }
}

fn smoothstep_scaled(t: f64, w: f64) -> (f64, f64, f64) {
    let (s, ds, dds) = smoothstep(t);
    (s, ds / w, dds / (w * w))
}

/// Smooth ramp in q = |a_k|², vanishing at 0: localizes a plane perturbation
/// away from the plane's origin so other circles are untouched to second order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneRamp {
    pub q_zero: f64,
    pub q_one: f64,
}

impl PlaneRamp {
    fn eval(&self, q: f64) -> (f64, f64, f64) {
        let w = self.q_one - self.q_zero;
        smoothstep_scaled((q - self.q_zero) / w, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Base {
    Sphere,
    Ellipsoid {
        /// Weight per real coordinate slot, all > 0.
        weights: Vec<f64>,
    },
    PPower {
        p: f64,
        /// Samples of the coefficient function h on the quadrature grid.
        h: Vec<f64>,
        grid: usize,
    },
    /// F(u) = Σ_j coeffs[j] · (‖u‖²)^j. The sphere is [−1/2, 1/2].
    QuadraticRadial { coeffs: Vec<f64> },
    KernelReduced { problem: KernelProblem },
    Blend { a: Box<Potential>, b: Box<Potential>, weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Perturbation {
    /// strength · ⟨f,u⟩ · χ(‖u‖)
    Linear { f: Vec<f64>, strength: f64, cutoff: RadialCutoff },
    /// strength · ⟨f,u⟩² · χ(‖u‖)  (even, Z2-safe)
    Even { f: Vec<f64>, strength: f64, cutoff: RadialCutoff },
    /// strength · Σ_l w_l |a_l|² · χ(‖u‖)  (S¹-invariant plane weights)
    PlaneQuadratic { weights: Vec<f64>, strength: f64, cutoff: RadialCutoff },
    /// strength · Re(a_label) · ρ(|a_label|²) · b(‖u‖)  (splits one circle)
    SymmetryBreak { label: i32, strength: f64, bump: RadialBump, ramp: PlaneRamp },
}

/// A starshaped potential: base shape plus an optional perturbation stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    base: Base,
    symmetry: Symmetry,
    perturbations: Vec<Perturbation>,
}

/// Full second-order data of F at a point.
#[derive(Debug, Clone)]
pub struct PotentialJet {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl Potential {
    pub fn sphere(symmetry: Symmetry) -> Self {
        Self { base: Base::Sphere, symmetry, perturbations: Vec::new() }
    }

    pub fn ellipsoid(weights: Vec<f64>, symmetry: Symmetry) -> Result<Self> {
        if weights.iter().any(|&c| c <= 0.0) {
            return Err(Error::InvalidInput("ellipsoid weights must be positive".into()));
        }
        Ok(Self { base: Base::Ellipsoid { weights }, symmetry, perturbations: Vec::new() })
    }

    /// h ≡ 1 on a default grid sized for the model's maximum frequency.
    pub fn p_power_uniform(p: f64, model: &SpectralModel, symmetry: Symmetry) -> Result<Self> {
        let grid = 4 * max_frequency(model) + 1;
        Self::p_power(p, vec![1.0; grid], grid, symmetry)
    }

    pub fn p_power(p: f64, h: Vec<f64>, grid: usize, symmetry: Symmetry) -> Result<Self> {
        if p <= 1.0 {
            return Err(Error::InvalidInput("p_power exponent must be > 1".into()));
        }
        if h.len() != grid {
            return Err(Error::DimensionMismatch { expected: grid, got: h.len() });
        }
        if h.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidInput("p_power coefficient h must be >= c > 0".into()));
        }
        Ok(Self { base: Base::PPower { p, h, grid }, symmetry, perturbations: Vec::new() })
    }

    pub fn quadratic_radial(coeffs: Vec<f64>, symmetry: Symmetry) -> Self {
        Self { base: Base::QuadraticRadial { coeffs }, symmetry, perturbations: Vec::new() }
    }

    /// Register a kernel-reduced potential F(u) = Q(u) − 1/(p+1); it is even.
    pub fn kernel_reduced(problem: KernelProblem) -> Self {
        Self { base: Base::KernelReduced { problem }, symmetry: Symmetry::Z2, perturbations: Vec::new() }
    }

    /// Convex blend (1−w)·a + w·b, used by continuation schedules.
    pub fn blend(a: &Potential, b: &Potential, weight: f64) -> Self {
        let symmetry = if a.symmetry == b.symmetry { a.symmetry } else { Symmetry::None };
        Self {
            base: Base::Blend { a: Box::new(a.clone()), b: Box::new(b.clone()), weight },
            symmetry,
            perturbations: Vec::new(),
        }
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.base {
            Base::Sphere => "sphere",
            Base::Ellipsoid { .. } => "ellipsoid",
            Base::PPower { .. } => "p_power",
            Base::QuadraticRadial { .. } => "custom_quadratic_plus",
            Base::KernelReduced { .. } => "kernel_reduced",
            Base::Blend { .. } => "blend",
        }
    }

    pub fn n_perturbations(&self) -> usize {
        self.perturbations.len()
    }
}

/// F(u).
pub fn potential_value(pot: &Potential, model: &SpectralModel, u: &DVector<f64>) -> Result<f64> {
    Ok(eval(pot, model, u, Want::Value)?.0)
}

/// (F(u), ∇F(u)) with the gradient in E-coordinates.
pub fn potential_value_grad(
    pot: &Potential,
    model: &SpectralModel,
    u: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let (v, g, _) = eval(pot, model, u, Want::Grad)?;
    Ok((v, g.unwrap()))
}

/// Value, E-gradient and symmetric Hessian of F at u.
pub fn potential_jet(pot: &Potential, model: &SpectralModel, u: &DVector<f64>) -> Result<PotentialJet> {
    let (value, grad, hess) = eval(pot, model, u, Want::Hess)?;
    Ok(PotentialJet { value, grad: grad.unwrap(), hess: hess.unwrap() })
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd)]
enum Want {
    Value,
    Grad,
    Hess,
}

fn eval(
    pot: &Potential,
    model: &SpectralModel,
    u: &DVector<f64>,
    want: Want,
) -> Result<(f64, Option<DVector<f64>>, Option<DMatrix<f64>>)> {
    let n = model.real_dim();
    if u.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: u.len() });
    }
    let (mut value, mut grad, mut hess) = base_eval(&pot.base, model, u, want)?;
    for pert in &pot.perturbations {
        let (v, g, h) = perturbation_eval(pert, model, u, want)?;
        value += v;
        if let (Some(grad), Some(g)) = (grad.as_mut(), g) {
            *grad += g;
        }
        if let (Some(hess), Some(h)) = (hess.as_mut(), h) {
            *hess += h;
        }
    }
    Ok((value, grad, hess))
}

fn base_eval(
    base: &Base,
    model: &SpectralModel,
    u: &DVector<f64>,
    want: Want,
) -> Result<(f64, Option<DVector<f64>>, Option<DMatrix<f64>>)> {
    let n = u.len();
    match base {
        Base::Sphere => {
            let value = 0.5 * (u.norm_squared() - 1.0);
            let grad = (want >= Want::Grad).then(|| u.clone());
            let hess = (want >= Want::Hess).then(|| DMatrix::identity(n, n));
            Ok((value, grad, hess))
        }
        Base::Ellipsoid { weights } => {
            if weights.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: weights.len() });
            }
            let value = 0.5 * (u.iter().zip(weights).map(|(a, c)| c * a * a).sum::<f64>() - 1.0);
            let grad = (want >= Want::Grad)
                .then(|| DVector::from_fn(n, |i, _| weights[i] * u[i]));
            let hess = (want >= Want::Hess)
                .then(|| DMatrix::from_diagonal(&DVector::from_vec(weights.clone())));
            Ok((value, grad, hess))
        }
        Base::PPower { p, h, grid } => p_power_eval(*p, h, *grid, model, u, want),
        Base::QuadraticRadial { coeffs } => {
            let q = u.norm_squared();
            let (pv, dp, ddp) = poly_eval(coeffs, q);
            let grad = (want >= Want::Grad).then(|| u.map(|x| 2.0 * dp * x));
            let hess = (want >= Want::Hess).then(|| {
                let mut m = DMatrix::identity(n, n) * (2.0 * dp);
                m.ger(4.0 * ddp, u, u, 1.0);
                m
            });
            Ok((pv, grad, hess))
        }
        Base::KernelReduced { problem } => {
            let p = problem.p();
            let (q, qgrad) = if want >= Want::Grad {
                let (q, g) = crate::kernel_reduction::q_jet(problem, u)?;
                (q, Some(g))
            } else {
                (crate::kernel_reduction::q_value(problem, u)?, None)
            };
            let value = q - 1.0 / (p + 1.0);
            let hess = if want >= Want::Hess {
                Some(crate::kernel_reduction::q_hessian(problem, u)?)
            } else {
                None
            };
            Ok((value, qgrad, hess))
        }
        Base::Blend { a, b, weight } => {
            let (va, ga, ha) = eval(a, model, u, want)?;
            let (vb, gb, hb) = eval(b, model, u, want)?;
            let w = *weight;
            let value = (1.0 - w) * va + w * vb;
            let grad = ga.map(|ga| ga * (1.0 - w) + gb.unwrap() * w);
            let hess = ha.map(|ha| ha * (1.0 - w) + hb.unwrap() * w);
            Ok((value, grad, hess))
        }
    }
}

/// Polynomial in q with first and second derivatives.
fn poly_eval(coeffs: &[f64], q: f64) -> (f64, f64, f64) {
    let (mut v, mut dv, mut ddv) = (0.0, 0.0, 0.0);
    for &c in coeffs.iter().rev() {
        ddv = ddv * q + 2.0 * dv;
        dv = dv * q + v;
        v = v * q + c;
    }
    (v, dv, ddv)
}

// ---------------------------------------------------------------------------
// Trigonometric realization for quadrature-backed potentials.
//
// Label ±k maps to the frequency-k mode on the periodic unit circle: √2·cos(kx)
// for positive labels and √2·sin(kx) for negative ones on real models; for
// complex models the label's eigenplane maps to the complex mode e^{i·l·x}.
// Both families are E-orthonormal under the normalized measure dx/2π.
// ---------------------------------------------------------------------------

pub(crate) fn max_frequency(model: &SpectralModel) -> usize {
    model.labels().iter().map(|l| l.unsigned_abs() as usize).max().unwrap_or(0)
}

fn p_power_eval(
    p: f64,
    h: &[f64],
    grid: usize,
    model: &SpectralModel,
    u: &DVector<f64>,
    want: Want,
) -> Result<(f64, Option<DVector<f64>>, Option<DMatrix<f64>>)> {
    let fmax = max_frequency(model);
    if grid < 4 * fmax {
        return Err(Error::QuadratureUnderresolved { grid, max_freq: fmax });
    }
    if h.len() != grid {
        return Err(Error::DimensionMismatch { expected: grid, got: h.len() });
    }
    let n = u.len();
    let w = 1.0 / grid as f64;
    if !model.complex_structure() {
        // C[g][s] = φ_s(x_g)
        let c = real_basis_matrix(model, grid);
        let vals = &c * u;
        let mut value = 0.0;
        let mut gamma = DVector::zeros(grid);
        let mut dpsi = DVector::zeros(grid);
        for g in 0..grid {
            let v = vals[g];
            let av = v.abs();
            value += w * h[g] * av.powf(p + 1.0);
            if want >= Want::Grad {
                gamma[g] = w * h[g] * av.powf(p - 1.0) * v;
            }
            if want >= Want::Hess {
                dpsi[g] = w * h[g] * p * av.powf(p - 1.0);
            }
        }
        let value = (value - 1.0) / (p + 1.0);
        let grad = (want >= Want::Grad).then(|| c.transpose() * gamma);
        let hess = (want >= Want::Hess).then(|| {
            let mut m = DMatrix::zeros(n, n);
            for g in 0..grid {
                let row = c.row(g);
                m.ger(dpsi[g], &row.transpose(), &row.transpose(), 1.0);
            }
            m
        });
        Ok((value, grad, hess))
    } else {
        let (cre, cim) = complex_basis_matrices(model, grid);
        let re = &cre * u;
        let im = &cim * u;
        let mut value = 0.0;
        let mut grad = (want >= Want::Grad).then(|| DVector::zeros(n));
        let mut hess = (want >= Want::Hess).then(|| DMatrix::zeros(n, n));
        for g in 0..grid {
            let (x, y) = (re[g], im[g]);
            let r2 = x * x + y * y;
            let r = r2.sqrt();
            value += w * h[g] * r.powf(p + 1.0);
            if r < 1e-300 {
                continue;
            }
            let rp1 = r.powf(p - 1.0);
            if let Some(grad) = grad.as_mut() {
                let coef = w * h[g] * rp1;
                grad.axpy(coef * x, &cre.row(g).transpose(), 1.0);
                grad.axpy(coef * y, &cim.row(g).transpose(), 1.0);
            }
            if let Some(hess) = hess.as_mut() {
                // |z|^{p-1} I + (p-1)|z|^{p-3} z zᵀ on the point value, pushed
                // through the basis rows.
                let rowx = cre.row(g).transpose();
                let rowy = cim.row(g).transpose();
                let c0 = w * h[g] * rp1;
                hess.ger(c0, &rowx, &rowx, 1.0);
                hess.ger(c0, &rowy, &rowy, 1.0);
                let zdir = &rowx * x + &rowy * y;
                let c1 = w * h[g] * (p - 1.0) * r.powf(p - 3.0);
                hess.ger(c1, &zdir, &zdir, 1.0);
            }
        }
        let value = (value - 1.0) / (p + 1.0);
        Ok((value, grad, hess))
    }
}

fn real_basis_matrix(model: &SpectralModel, grid: usize) -> DMatrix<f64> {
    let n = model.real_dim();
    let sqrt2 = std::f64::consts::SQRT_2;
    DMatrix::from_fn(grid, n, |g, s| {
        let label = model.labels()[s];
        let x = std::f64::consts::TAU * g as f64 / grid as f64;
        let f = label.unsigned_abs() as f64;
        if label > 0 {
            sqrt2 * (f * x).cos()
        } else {
            sqrt2 * (f * x).sin()
        }
    })
}

fn complex_basis_matrices(model: &SpectralModel, grid: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.real_dim();
    let mut cre = DMatrix::zeros(grid, n);
    let mut cim = DMatrix::zeros(grid, n);
    for g in 0..grid {
        let x = std::f64::consts::TAU * g as f64 / grid as f64;
        for (i, &label) in model.labels().iter().enumerate() {
            let (s, c) = (label as f64 * x).sin_cos();
            // (a + ib) e^{i l x} = (a c − b s) + i (a s + b c)
            cre[(g, 2 * i)] = c;
            cre[(g, 2 * i + 1)] = -s;
            cim[(g, 2 * i)] = s;
            cim[(g, 2 * i + 1)] = c;
        }
    }
    (cre, cim)
}

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

fn perturbation_eval(
    pert: &Perturbation,
    model: &SpectralModel,
    u: &DVector<f64>,
    want: Want,
) -> Result<(f64, Option<DVector<f64>>, Option<DMatrix<f64>>)> {
    match pert {
        Perturbation::Linear { f, strength, cutoff } => {
            let f = slice_vector(f, u.len())?;
            let phi = u.dot(&f);
            let dphi = f;
            radial_product(u, *strength, phi, Some(dphi), None, *cutoff, want)
        }
        Perturbation::Even { f, strength, cutoff } => {
            let f = slice_vector(f, u.len())?;
            let s = u.dot(&f);
            let phi = s * s;
            let dphi = &f * (2.0 * s);
            let ddphi = (want >= Want::Hess).then(|| {
                let mut m = DMatrix::zeros(u.len(), u.len());
                m.ger(2.0, &f, &f, 1.0);
                m
            });
            radial_product(u, *strength, phi, Some(dphi), ddphi, *cutoff, want)
        }
        Perturbation::PlaneQuadratic { weights, strength, cutoff } => {
            let n = u.len();
            let slot_w: Vec<f64> = if model.complex_structure() {
                weights.iter().flat_map(|&w| [w, w]).collect()
            } else {
                weights.clone()
            };
            if slot_w.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: slot_w.len() });
            }
            let phi = u.iter().zip(&slot_w).map(|(a, w)| w * a * a).sum::<f64>();
            let dphi = DVector::from_fn(n, |i, _| 2.0 * slot_w[i] * u[i]);
            let ddphi = (want >= Want::Hess).then(|| {
                DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 2.0 * slot_w[i]))
            });
            radial_product(u, *strength, phi, Some(dphi), ddphi, *cutoff, want)
        }
        Perturbation::SymmetryBreak { label, strength, bump, ramp } => {
            let idx = model
                .labels()
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::InvalidInput(format!("label {label} not in model")))?;
            let slots = model.label_slots(idx);
            let (sx, sy) = (slots.start, slots.start + 1);
            if !model.complex_structure() {
                return Err(Error::InvalidInput("symmetry breaking needs a complex-structure model".into()));
            }
            let n = u.len();
            let (x, y) = (u[sx], u[sy]);
            let q = x * x + y * y;
            let (rho, drho, ddrho) = ramp.eval(q);
            let phi = x * rho;
            let mut dphi = DVector::zeros(n);
            dphi[sx] = rho + 2.0 * x * x * drho;
            dphi[sy] = 2.0 * x * y * drho;
            let ddphi = (want >= Want::Hess).then(|| {
                let mut m = DMatrix::zeros(n, n);
                m[(sx, sx)] = 6.0 * x * drho + 4.0 * x * x * x * ddrho;
                m[(sx, sy)] = 2.0 * y * drho + 4.0 * x * x * y * ddrho;
                m[(sy, sx)] = m[(sx, sy)];
                m[(sy, sy)] = 2.0 * x * drho + 4.0 * x * y * y * ddrho;
                m
            });
            bump_product(u, *strength, phi, Some(dphi), ddphi, *bump, want)
        }
    }
}

fn slice_vector(f: &[f64], n: usize) -> Result<DVector<f64>> {
    if f.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: f.len() });
    }
    Ok(DVector::from_column_slice(f))
}

fn radial_product(
    u: &DVector<f64>,
    strength: f64,
    phi: f64,
    dphi: Option<DVector<f64>>,
    ddphi: Option<DMatrix<f64>>,
    cutoff: RadialCutoff,
    want: Want,
) -> Result<(f64, Option<DVector<f64>>, Option<DMatrix<f64>>)> {
    let r = u.norm();
    let (c, dc, ddc) = cutoff.eval(r);
    assemble_product(u, strength, phi, dphi, ddphi, r, c, dc, ddc, want)
}

fn bump_product(
    u: &DVector<f64>,
    strength: f64,
    phi: f64,
    dphi: Option<DVector<f64>>,
    ddphi: Option<DMatrix<f64>>,
    bump: RadialBump,
    want: Want,
) -> Result<(f64, Option<DVector<f64>>, Option<DMatrix<f64>>)> {
    let r = u.norm();
    let (c, dc, ddc) = bump.eval(r);
    assemble_product(u, strength, phi, dphi, ddphi, r, c, dc, ddc, want)
}

/// Jet of strength · φ(u) · c(‖u‖) given jets of φ and c.
#[allow(clippy::too_many_arguments)]
fn assemble_product(
    u: &DVector<f64>,
    strength: f64,
    phi: f64,
    dphi: Option<DVector<f64>>,
    ddphi: Option<DMatrix<f64>>,
    r: f64,
    c: f64,
    dc: f64,
    ddc: f64,
    want: Want,
) -> Result<(f64, Option<DVector<f64>>, Option<DMatrix<f64>>)> {
    let n = u.len();
    let value = strength * phi * c;
    if want == Want::Value {
        return Ok((value, None, None));
    }
    let dphi = dphi.unwrap_or_else(|| DVector::zeros(n));
    let radial_ok = r > 1e-9;
    let uhat = if radial_ok { u / r } else { DVector::zeros(n) };
    let mut grad = &dphi * c;
    if radial_ok && dc != 0.0 {
        grad.axpy(phi * dc, &uhat, 1.0);
    }
    grad *= strength;
    if want == Want::Grad {
        return Ok((value, Some(grad), None));
    }
    let mut h = ddphi.unwrap_or_else(|| DMatrix::zeros(n, n)) * c;
    if radial_ok && (dc != 0.0 || ddc != 0.0) {
        h.ger(dc, &dphi, &uhat, 1.0);
        h.ger(dc, &uhat, &dphi, 1.0);
        h.ger(phi * ddc - phi * dc / r, &uhat, &uhat, 1.0);
        for i in 0..n {
            h[(i, i)] += phi * dc / r;
        }
    }
    h *= strength;
    Ok((value, Some(grad), Some(h)))
}

// ---------------------------------------------------------------------------
// Starshape validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StarshapeReport {
    pub min_radial_derivative: f64,
    pub samples: usize,
    pub max_radius: f64,
    pub bounded: bool,
    pub passed: bool,
}

/// Sample a uniformly distributed unit direction (Box-Muller normals).
pub(crate) fn sample_unit_direction(rng: &mut impl rand::Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (-2.0 * u1.ln()).sqrt() * u2.cos()
        });
        let norm = v.norm();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Find the radial root of F(r·d) = 0 for r in (0, RADIAL_SCAN_MAX].
///
/// Scans for sign changes first so that non-starshaped level sets (more than
/// one crossing) are detected rather than silently bisected.
pub(crate) fn radial_root(
    pot: &Potential,
    model: &SpectralModel,
    dir: &DVector<f64>,
    sample_index: usize,
) -> Result<f64> {
    const SCAN: usize = 256;
    let f = |r: f64| potential_value(pot, model, &(dir * r));
    let mut crossings: Vec<(f64, f64)> = Vec::new();
    let mut prev_r = RADIAL_SCAN_MAX * 1e-6;
    let mut prev_v = f(prev_r)?;
    for j in 1..=SCAN {
        let r = RADIAL_SCAN_MAX * j as f64 / SCAN as f64;
        let v = f(r)?;
        if prev_v == 0.0 || prev_v.signum() != v.signum() {
            crossings.push((prev_r, r));
            if crossings.len() > 1 {
                return Err(Error::MultipleCrossings(sample_index));
            }
        }
        prev_r = r;
        prev_v = v;
    }
    let (mut lo, mut hi) = match crossings.first() {
        Some(&(lo, hi)) => (lo, hi),
        None => return Err(Error::NoZeroCrossing(sample_index)),
    };
    let flo = f(lo)?;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sample S by radial root-finding along seeded random directions and report
/// the minimum radial derivative ⟨∇F(u),u⟩ and the maximum radius.
pub fn check_starshape(
    pot: &Potential,
    model: &SpectralModel,
    n_samples: usize,
    seed: u64,
) -> Result<StarshapeReport> {
    use rand::SeedableRng;
    if n_samples < 1 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut min_rad = f64::INFINITY;
    let mut max_radius: f64 = 0.0;
    for i in 0..n_samples {
        let dir = sample_unit_direction(&mut rng, model.real_dim());
        let r = radial_root(pot, model, &dir, i)?;
        let u = &dir * r;
        let (_, grad) = potential_value_grad(pot, model, &u)?;
        min_rad = min_rad.min(grad.dot(&u));
        max_radius = max_radius.max(r);
    }
    let bounded = max_radius < RADIAL_SCAN_MAX;
    Ok(StarshapeReport {
        min_radial_derivative: min_rad,
        samples: n_samples,
        max_radius,
        bounded,
        passed: min_rad > 0.0 && bounded,
    })
}

// ---------------------------------------------------------------------------
// Perturbation constructors
// ---------------------------------------------------------------------------

/// Add a small generic perturbation that respects the declared symmetry class:
/// ⟨f,u⟩ (none), ⟨f,u⟩² (Z2), or S¹-invariant plane weights (S1), each cut off
/// outside a ball containing S so far-field behavior is unchanged.
pub fn perturb_generic(
    pot: &Potential,
    model: &SpectralModel,
    strength: f64,
    direction_seed: u64,
) -> Result<Potential> {
    use rand::SeedableRng;
    if strength < 0.0 {
        return Err(Error::InvalidInput("perturbation strength must be >= 0".into()));
    }
    let probe = check_starshape(pot, model, 32, direction_seed ^ 0x5eed_cafe)?;
    let cutoff = RadialCutoff { r_one: 1.25 * probe.max_radius, r_zero: 2.5 * probe.max_radius };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(direction_seed);
    let mut out = pot.clone();
    let pert = match pot.symmetry {
        Symmetry::None => {
            let f = sample_unit_direction(&mut rng, model.real_dim());
            Perturbation::Linear { f: f.as_slice().to_vec(), strength, cutoff }
        }
        Symmetry::Z2 => {
            let f = sample_unit_direction(&mut rng, model.real_dim());
            Perturbation::Even { f: f.as_slice().to_vec(), strength, cutoff }
        }
        Symmetry::S1 => {
            let w = sample_unit_direction(&mut rng, model.n_labels());
            Perturbation::PlaneQuadratic { weights: w.as_slice().to_vec(), strength, cutoff }
        }
    };
    out.perturbations.push(pert);
    Ok(out)
}

/// Split one critical circle into a max and a min by adding
/// strength·Re(a_k)·ρ(|a_k|²)·b(‖u‖) localized around the circle's shell.
///
/// Restricted to the circle itself the added term is exactly strength·r·cosθ,
/// so the perturbed functional has one max (θ=0) and one min (θ=π) there.
pub fn break_symmetry(
    pot: &Potential,
    model: &SpectralModel,
    circle: &crate::critical::CriticalRecord,
    strength: f64,
) -> Result<Potential> {
    if pot.symmetry != Symmetry::S1 {
        return Err(Error::InvalidInput("symmetry breaking applies to S1-invariant potentials".into()));
    }
    break_symmetry_unchecked(pot, model, circle, strength)
}

/// The breaking construction itself, without the S¹-tag precondition: used to
/// stack one break per circle (the tag is gone after the first application).
pub(crate) fn break_symmetry_unchecked(
    pot: &Potential,
    model: &SpectralModel,
    circle: &crate::critical::CriticalRecord,
    strength: f64,
) -> Result<Potential> {
    if circle.orbit_type != crate::critical::OrbitType::Circle {
        return Err(Error::NotACircle);
    }
    if !model.complex_structure() {
        return Err(Error::InvalidInput("symmetry breaking needs a complex-structure model".into()));
    }
    let u = &circle.point.coeffs;
    // dominant eigenplane of the representative
    let mut best = (0usize, -1.0);
    for i in 0..model.n_labels() {
        let s = model.label_slots(i);
        let q = u[s.start] * u[s.start] + u[s.start + 1] * u[s.start + 1];
        if q > best.1 {
            best = (i, q);
        }
    }
    let label = model.labels()[best.0];
    let r_shell = u.norm();
    let q_plane = best.1;
    let mut out = pot.clone();
    out.perturbations.push(Perturbation::SymmetryBreak {
        label,
        strength,
        bump: RadialBump::around_shell(r_shell),
        ramp: PlaneRamp { q_zero: 0.04 * q_plane, q_one: 0.25 * q_plane },
    });
    out.symmetry = Symmetry::None;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{build_model, ModelSpec, StatePoint};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn model(n: u32, complex: bool) -> SpectralModel {
        build_model(ModelSpec::Abstract { n }, complex).unwrap()
    }

    fn rand_u(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
    }

    /// Central finite-difference checks of the gradient and Hessian.
    fn fd_check(pot: &Potential, m: &SpectralModel, u: &DVector<f64>, rng: &mut ChaCha8Rng) {
        let jet = potential_jet(pot, m, u).unwrap();
        let eps = 1e-5;
        let v = sample_unit_direction(rng, u.len());
        let fp = potential_value(pot, m, &(u + &v * eps)).unwrap();
        let fm = potential_value(pot, m, &(u - &v * eps)).unwrap();
        let fd = (fp - fm) / (2.0 * eps);
        let an = jet.grad.dot(&v);
        let scale = an.abs().max(fd.abs()).max(1e-6);
        assert!(((fd - an) / scale).abs() <= 1e-6, "grad fd {fd} vs {an}");
        // Hessian column check against the gradient difference quotient
        let (_, gp) = potential_value_grad(pot, m, &(u + &v * eps)).unwrap();
        let (_, gm) = potential_value_grad(pot, m, &(u - &v * eps)).unwrap();
        let fd_col = (gp - gm) / (2.0 * eps);
        let an_col = &jet.hess * &v;
        let scale = an_col.norm().max(fd_col.norm()).max(1e-4);
        assert!(
            (&fd_col - &an_col).norm() / scale <= 1e-5,
            "hess fd mismatch: {} vs {}",
            fd_col.norm(),
            an_col.norm()
        );
        // symmetry
        let asym = (&jet.hess - jet.hess.transpose()).amax();
        assert!(asym <= 1e-12);
    }

    #[test]
    fn sphere_jet_on_unit_sphere() {
        let m = model(3, false);
        let mut u = DVector::zeros(6);
        u[3] = 1.0;
        let jet = potential_jet(&Potential::sphere(Symmetry::Z2), &m, &u).unwrap();
        assert_eq!(jet.value, 0.0);
        assert_eq!(jet.grad, u);
        assert_eq!(jet.hess, DMatrix::identity(6, 6));
    }

    #[test]
    fn ellipsoid_hand_differentiated() {
        let m = model(3, false);
        let w = vec![2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
        let pot = Potential::ellipsoid(w, Symmetry::Z2).unwrap();
        let mut u = DVector::zeros(6);
        u[3] = 1.0 / 2.0_f64.sqrt();
        let jet = potential_jet(&pot, &m, &u).unwrap();
        assert_relative_eq!(jet.value, 0.0, epsilon = 1e-15);
        assert_relative_eq!(jet.grad[3], 2.0_f64.sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn p_power_single_mode_against_refined_grid() {
        let m = model(3, false);
        let p = 3.0;
        let pot = Potential::p_power_uniform(p, &m, Symmetry::Z2).unwrap();
        let amp = 0.83;
        let mut u = DVector::zeros(6);
        u[4] = amp; // label 2 cosine mode
        let v = potential_value(&pot, &m, &u).unwrap();
        // analytic: ∫ (A·√2 cos 2x)⁴ = (3/2) A⁴
        let exact = (1.5 * amp.powi(4) - 1.0) / 4.0;
        assert_relative_eq!(v, exact, max_relative = 1e-12);
        // refined-grid oracle at twice the resolution
        let grid2 = 2 * (4 * max_frequency(&m) + 1);
        let pot2 = Potential::p_power(p, vec![1.0; grid2], grid2, Symmetry::Z2).unwrap();
        let v2 = potential_value(&pot2, &m, &u).unwrap();
        assert_relative_eq!(v, v2, max_relative = 1e-10);
    }

    #[test]
    fn p_power_underresolved_grid_rejected() {
        let m = model(3, false);
        let pot = Potential::p_power(3.0, vec![1.0; 8], 8, Symmetry::Z2).unwrap();
        let u = DVector::zeros(6);
        assert!(matches!(
            potential_value(&pot, &m, &u),
            Err(Error::QuadratureUnderresolved { .. })
        ));
    }

    #[test]
    fn gradient_and_hessian_fd_all_kinds() {
        let mreal = model(3, false);
        let mcx = model(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sphere = Potential::sphere(Symmetry::Z2);
        let ell = Potential::ellipsoid(vec![1.3, 0.8, 1.1, 0.9, 1.2, 0.7], Symmetry::Z2).unwrap();
        let pp = Potential::p_power_uniform(3.0, &mreal, Symmetry::Z2).unwrap();
        let quad = Potential::quadratic_radial(vec![-0.4, 0.3, 0.05], Symmetry::Z2);
        let pert = perturb_generic(&sphere, &mreal, 1e-2, 11).unwrap();
        let pert_even =
            perturb_generic(&Potential::sphere(Symmetry::Z2), &mreal, 1e-2, 12).unwrap();
        for pot in [&sphere, &ell, &pp, &quad, &pert, &pert_even] {
            for _ in 0..20 {
                let u = rand_u(&mut rng, 6, 1.6);
                fd_check(pot, &mreal, &u, &mut rng);
            }
        }
        // complex p_power and an s1 plane perturbation
        let ppc = Potential::p_power_uniform(3.0, &mcx, Symmetry::S1).unwrap();
        let ppc_pert = perturb_generic(&ppc, &mcx, 1e-2, 13).unwrap();
        let sb = {
            let sph = Potential::sphere(Symmetry::S1);
            let rec = fake_circle(&mcx);
            break_symmetry(&sph, &mcx, &rec, 0.05).unwrap()
        };
        for pot in [&ppc, &ppc_pert, &sb] {
            for _ in 0..20 {
                let u = rand_u(&mut rng, 12, 1.4);
                fd_check(pot, &mcx, &u, &mut rng);
            }
        }
    }

    fn fake_circle(m: &SpectralModel) -> crate::critical::CriticalRecord {
        let mut u = DVector::zeros(m.real_dim());
        u[2] = 1.0; // label 2 plane, Re slot
        crate::critical::CriticalRecord {
            id: 0,
            point: StatePoint::new(u, 2.0),
            action: 1.0,
            residual: 0.0,
            hessian_inertia: (0, 1, 0),
            rel_index: None,
            orbit_type: crate::critical::OrbitType::Circle,
            orbit_id: 0,
            broken_children: None,
        }
    }

    #[test]
    fn declared_symmetries_hold() {
        let mcx = model(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s1_pots = [
            Potential::sphere(Symmetry::S1),
            Potential::p_power_uniform(3.0, &mcx, Symmetry::S1).unwrap(),
            perturb_generic(&Potential::sphere(Symmetry::S1), &mcx, 1e-3, 5).unwrap(),
        ];
        for pot in &s1_pots {
            for _ in 0..10 {
                let u = rand_u(&mut rng, 12, 1.2);
                let z = StatePoint::new(u.clone(), 0.0);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = mcx.s1_rotate(&z, theta);
                let a = potential_value(pot, &mcx, &u).unwrap();
                let b = potential_value(pot, &mcx, &r.coeffs).unwrap();
                assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
        let mreal = model(3, false);
        let z2_pots = [
            Potential::sphere(Symmetry::Z2),
            perturb_generic(&Potential::sphere(Symmetry::Z2), &mreal, 1e-3, 6).unwrap(),
        ];
        for pot in &z2_pots {
            for _ in 0..10 {
                let u = rand_u(&mut rng, 6, 1.2);
                let a = potential_value(pot, &mreal, &u).unwrap();
                let b = potential_value(pot, &mreal, &(-&u)).unwrap();
                assert_relative_eq!(a, b, epsilon = 1e-14, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn starshape_sphere_exact() {
        let m = model(3, false);
        let rep = check_starshape(&Potential::sphere(Symmetry::Z2), &m, 40, 1).unwrap();
        assert!(rep.passed);
        assert_relative_eq!(rep.min_radial_derivative, 1.0, max_relative = 1e-9);
        assert_relative_eq!(rep.max_radius, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn starshape_p_power_unit_derivative() {
        let m = model(2, false);
        let pot = Potential::p_power_uniform(3.0, &m, Symmetry::Z2).unwrap();
        let rep = check_starshape(&pot, &m, 30, 2).unwrap();
        assert!(rep.passed);
        // on S the quadrature integral ∫ h|u|^{p+1} equals 1 exactly
        assert_relative_eq!(rep.min_radial_derivative, 1.0, max_relative = 1e-8);
    }

    #[test]
    fn starshape_detects_annulus() {
        let m = model(2, false);
        // (q−1)(q−4) − 0.1 in q = ‖u‖²: two radial crossings
        let pot = Potential::quadratic_radial(vec![3.9, -5.0, 1.0], Symmetry::Z2);
        assert!(matches!(
            check_starshape(&pot, &m, 10, 3),
            Err(Error::MultipleCrossings(_))
        ));
    }

    #[test]
    fn starshape_no_crossing() {
        let m = model(2, false);
        let pot = Potential::quadratic_radial(vec![1.0, 1.0], Symmetry::Z2);
        assert!(matches!(check_starshape(&pot, &m, 10, 4), Err(Error::NoZeroCrossing(_))));
    }

    #[test]
    fn perturb_strength_zero_is_identity() {
        let m = model(3, false);
        let pot = Potential::sphere(Symmetry::None);
        let pert = perturb_generic(&pot, &m, 0.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let u = rand_u(&mut rng, 6, 3.0);
            assert_eq!(
                potential_value(&pot, &m, &u).unwrap(),
                potential_value(&pert, &m, &u).unwrap()
            );
        }
    }

    #[test]
    fn break_symmetry_exact_cosine_on_circle() {
        let m = model(3, true);
        let sph = Potential::sphere(Symmetry::S1);
        let rec = fake_circle(&m);
        let s = 0.05;
        let broken = break_symmetry(&sph, &m, &rec, s).unwrap();
        for k in 0..16 {
            let theta = std::f64::consts::TAU * k as f64 / 16.0;
            let z = m.s1_rotate(&rec.point, theta);
            let base = potential_value(&sph, &m, &z.coeffs).unwrap();
            let pert = potential_value(&broken, &m, &z.coeffs).unwrap();
            assert_relative_eq!(pert - base, s * theta.cos(), epsilon = 1e-12);
        }
    }

    #[test]
    fn break_symmetry_strength_zero_unchanged() {
        let m = model(3, true);
        let sph = Potential::sphere(Symmetry::S1);
        let rec = fake_circle(&m);
        let broken = break_symmetry(&sph, &m, &rec, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..10 {
            let u = rand_u(&mut rng, 12, 1.5);
            assert_eq!(
                potential_value(&sph, &m, &u).unwrap(),
                potential_value(&broken, &m, &u).unwrap()
            );
        }
    }

    #[test]
    fn break_symmetry_leaves_distant_circle_alone() {
        // ellipsoid with plane weights (9, 1, 1): circles at radii 1/3 and 1
        let m = model(3, true);
        let w = vec![9.0, 9.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 9.0, 9.0];
        let pot = Potential::ellipsoid(w, Symmetry::S1).unwrap();
        let mut u1 = DVector::zeros(12);
        u1[2] = 1.0 / 3.0; // label -2 plane? slots 2,3 => label index 1 = label -2
        let rec = crate::critical::CriticalRecord {
            point: StatePoint::new(u1, -2.0),
            ..fake_circle(&m)
        };
        let broken = break_symmetry(&pot, &m, &rec, 0.1).unwrap();
        // points on the unit shell (far from the bump support around 1/3)
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let dir = sample_unit_direction(&mut rng, 12);
            let u = dir.clone();
            let a = potential_value(&pot, &m, &u).unwrap();
            let b = potential_value(&broken, &m, &u).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn break_symmetry_rejects_isolated() {
        let m = model(3, true);
        let sph = Potential::sphere(Symmetry::S1);
        let mut rec = fake_circle(&m);
        rec.orbit_type = crate::critical::OrbitType::Isolated;
        assert!(matches!(break_symmetry(&sph, &m, &rec, 0.1), Err(Error::NotACircle)));
    }

    #[test]
    fn potential_json_roundtrip() {
        let m = model(2, false);
        let pot = perturb_generic(
            &Potential::ellipsoid(vec![1.0, 1.1, 0.9, 1.2], Symmetry::Z2).unwrap(),
            &m,
            1e-3,
            17,
        )
        .unwrap();
        let text = serde_json::to_string(&pot).unwrap();
        let back: Potential = serde_json::from_str(&text).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let u = rand_u(&mut rng, 4, 1.0);
        assert_eq!(
            potential_value(&pot, &m, &u).unwrap(),
            potential_value(&back, &m, &u).unwrap()
        );
    }
}

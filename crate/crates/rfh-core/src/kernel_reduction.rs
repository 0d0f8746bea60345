//! Kernel reduction for models where L has a kernel block (the wave family).
//!
//! For u in H⁺ ⊕ H⁻ the inner functional K_u(v) = (1/(p+1))‖u+v‖_{p+1}^{p+1}
//! is strictly convex over the kernel block and attains its minimum at v(u);
//! the reduced potential Q(u) = K_u(v(u)) restores a well-posed problem on the
//! nonzero spectrum. Its gradient needs no differentiation through v(u): the
//! minimality of v kills that term, so ⟨Q'(u),h⟩ = ∫|u+v|^{p−1}(u+v)·h. The
//! second derivative keeps the implicit term and becomes a Schur complement.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::{ModelDocument, SpectralModel};

/// Inner minimizations converge to this gradient norm.
pub const KERNEL_GRAD_TOL: f64 = 1e-10;

/// A model with its kernel block and the quadrature data for |·|^{p+1}.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelProblem {
    model: SpectralModel,
    p: f64,
    /// quadrature weight per grid point (uniform)
    weight: f64,
    /// (n_points × real_dim) eigenbasis values on the grid
    b_eigen: DMatrix<f64>,
    /// (n_points × kernel_dim) kernel basis values on the grid
    b_kernel: DMatrix<f64>,
}

/// Build the quadrature realization for a model.
///
/// Wave models evaluate on the 2-torus with the cosine family e_k(t)e_j(x);
/// models without a kernel use the 1-D trigonometric realization and an empty
/// kernel block, so Q degenerates to the plain (1/(p+1))‖u‖_{p+1}^{p+1}.
pub fn kernel_problem(model: &SpectralModel, p: f64) -> Result<KernelProblem> {
    if p <= 1.0 {
        return Err(Error::InvalidInput("kernel reduction needs p > 1".into()));
    }
    if model.complex_structure() {
        return Err(Error::UnsupportedModel("kernel reduction uses real realizations".into()));
    }
    match model.wave_modes() {
        Some(modes) => {
            let n_freq = modes
                .eigen
                .iter()
                .chain(modes.kernel.iter())
                .map(|&(j, k)| j.max(k) as usize)
                .max()
                .unwrap_or(0);
            let m = 4 * n_freq + 1;
            let npts = m * m;
            let grid: Vec<(f64, f64)> = (0..npts)
                .map(|g| {
                    let (a, b) = (g / m, g % m);
                    (
                        std::f64::consts::TAU * a as f64 / m as f64,
                        std::f64::consts::TAU * b as f64 / m as f64,
                    )
                })
                .collect();
            let basis = |j: u32, k: u32, t: f64, x: f64| cosine_mode(k, t) * cosine_mode(j, x);
            let b_eigen = DMatrix::from_fn(npts, modes.eigen.len(), |g, s| {
                let (j, k) = modes.eigen[s];
                basis(j, k, grid[g].0, grid[g].1)
            });
            let b_kernel = DMatrix::from_fn(npts, modes.kernel.len(), |g, s| {
                let (j, k) = modes.kernel[s];
                basis(j, k, grid[g].0, grid[g].1)
            });
            Ok(KernelProblem {
                model: model.clone(),
                p,
                weight: 1.0 / npts as f64,
                b_eigen,
                b_kernel,
            })
        }
        None => {
            let fmax = crate::potentials::max_frequency(model);
            let m = 4 * fmax + 1;
            let sqrt2 = std::f64::consts::SQRT_2;
            let b_eigen = DMatrix::from_fn(m, model.real_dim(), |g, s| {
                let label = model.labels()[s];
                let x = std::f64::consts::TAU * g as f64 / m as f64;
                let f = label.unsigned_abs() as f64;
                if label > 0 {
                    sqrt2 * (f * x).cos()
                } else {
                    sqrt2 * (f * x).sin()
                }
            });
            Ok(KernelProblem {
                model: model.clone(),
                p,
                weight: 1.0 / m as f64,
                b_eigen,
                b_kernel: DMatrix::zeros(m, 0),
            })
        }
    }
}

fn cosine_mode(freq: u32, s: f64) -> f64 {
    if freq == 0 {
        1.0
    } else {
        std::f64::consts::SQRT_2 * (freq as f64 * s).cos()
    }
}

impl KernelProblem {
    pub fn model(&self) -> &SpectralModel {
        &self.model
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn kernel_dim(&self) -> usize {
        self.b_kernel.ncols()
    }

    fn check_u(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.model.real_dim() {
            return Err(Error::DimensionMismatch { expected: self.model.real_dim(), got: u.len() });
        }
        Ok(())
    }

    /// Point values of u + v on the grid.
    fn field(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut w = &self.b_eigen * u;
        if self.kernel_dim() > 0 {
            w += &self.b_kernel * v;
        }
        w
    }

    /// Residual of the kernel optimality condition: ∫|w|^{p−1}w·η_j per kernel
    /// basis element η_j.
    pub fn orthogonality_residual(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.check_u(u)?;
        let w = self.field(u, v);
        Ok(self.kernel_gradient(&w).norm())
    }

    fn kernel_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let psi = w.map(|x| self.weight * x.abs().powf(self.p - 1.0) * x);
        self.b_kernel.transpose() * psi
    }

    fn value_of_field(&self, w: &DVector<f64>) -> f64 {
        let p = self.p;
        self.weight * w.iter().map(|x| x.abs().powf(p + 1.0)).sum::<f64>() / (p + 1.0)
    }
}

/// Minimize K_u over the kernel block by damped Newton on the convex problem.
pub fn minimize_kernel_part(kp: &KernelProblem, u: &DVector<f64>) -> Result<DVector<f64>> {
    kp.check_u(u)?;
    let kd = kp.kernel_dim();
    let mut v = DVector::zeros(kd);
    if kd == 0 {
        return Ok(v);
    }
    let p = kp.p;
    let mut w = kp.field(u, &v);
    let mut g = kp.kernel_gradient(&w);
    for _ in 0..200 {
        let gn = g.norm();
        if gn <= KERNEL_GRAD_TOL {
            return Ok(v);
        }
        // Hessian p ∫ |w|^{p−1} η_i η_j
        let mut h = DMatrix::zeros(kd, kd);
        for gpt in 0..w.len() {
            let c = kp.weight * p * w[gpt].abs().powf(p - 1.0);
            if c != 0.0 {
                let row = kp.b_kernel.row(gpt).transpose();
                h.ger(c, &row, &row, 1.0);
            }
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                let scale = h.amax().max(1e-8);
                for i in 0..kd {
                    h[(i, i)] += 1e-8 * scale;
                }
                match h.cholesky() {
                    Some(ch) => ch.solve(&(-&g)),
                    None => -&g,
                }
            }
        };
        // line search on the convex objective
        let k0 = kp.value_of_field(&w);
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &v + &step * alpha;
            let wc = kp.field(u, &cand);
            if kp.value_of_field(&wc) <= k0 + 1e-12 {
                v = cand;
                w = wc;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            return Err(Error::NonConvergence(gn));
        }
        g = kp.kernel_gradient(&w);
    }
    let gn = g.norm();
    if gn <= KERNEL_GRAD_TOL {
        Ok(v)
    } else {
        Err(Error::NonConvergence(gn))
    }
}

/// Q(u) = K_u(v(u)).
pub fn q_value(kp: &KernelProblem, u: &DVector<f64>) -> Result<f64> {
    let v = minimize_kernel_part(kp, u)?;
    Ok(kp.value_of_field(&kp.field(u, &v)))
}

/// Q(u) and its gradient on H⁺ ⊕ H⁻ by the envelope formula.
pub fn q_jet(kp: &KernelProblem, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let v = minimize_kernel_part(kp, u)?;
    let w = kp.field(u, &v);
    let psi = w.map(|x| kp.weight * x.abs().powf(kp.p - 1.0) * x);
    let grad = kp.b_eigen.transpose() * psi;
    Ok((kp.value_of_field(&w), grad))
}

/// Full second derivative of Q: the (eigen, eigen) block of the pointwise
/// Hessian minus its Schur correction through the kernel block.
pub fn q_hessian(kp: &KernelProblem, u: &DVector<f64>) -> Result<DMatrix<f64>> {
    let v = minimize_kernel_part(kp, u)?;
    let w = kp.field(u, &v);
    let n = kp.b_eigen.ncols();
    let kd = kp.kernel_dim();
    let p = kp.p;
    let mut a_ee = DMatrix::zeros(n, n);
    let mut a_ek = DMatrix::zeros(n, kd);
    let mut a_kk = DMatrix::zeros(kd, kd);
    for g in 0..w.len() {
        let c = kp.weight * p * w[g].abs().powf(p - 1.0);
        if c == 0.0 {
            continue;
        }
        let re = kp.b_eigen.row(g).transpose();
        a_ee.ger(c, &re, &re, 1.0);
        if kd > 0 {
            let rk = kp.b_kernel.row(g).transpose();
            a_ek.ger(c, &re, &rk, 1.0);
            a_kk.ger(c, &rk, &rk, 1.0);
        }
    }
    if kd > 0 {
        if let Some(ch) = a_kk.clone().cholesky() {
            let x = ch.solve(&a_ek.transpose()); // A_kk⁻¹ A_ke
            a_ee -= &a_ek * x;
        }
        // a singular kernel Hessian only happens on measure-zero fields; the
        // uncorrected block is then the right one-sided derivative
    }
    Ok(a_ee)
}

// serde: rebuild grids from the constructor data

#[derive(Serialize, Deserialize)]
struct KernelProblemDoc {
    model: ModelDocument,
    p: f64,
}

impl Serialize for KernelProblem {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        KernelProblemDoc { model: self.model.to_document(), p: self.p }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KernelProblem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = KernelProblemDoc::deserialize(d)?;
        let model = SpectralModel::from_document(&doc.model).map_err(serde::de::Error::custom)?;
        kernel_problem(&model, doc.p).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{potential_value, sample_unit_direction, Potential, Symmetry};
    use crate::spectrum::{build_model, ModelSpec};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn wave_problem(n: u32, p: f64) -> KernelProblem {
        let model = build_model(ModelSpec::Wave { n }, false).unwrap();
        kernel_problem(&model, p).unwrap()
    }

    #[test]
    fn empty_kernel_matches_plain_p_power() {
        let model = build_model(ModelSpec::Abstract { n: 2 }, false).unwrap();
        let kp = kernel_problem(&model, 3.0).unwrap();
        assert_eq!(kp.kernel_dim(), 0);
        let pot = Potential::p_power_uniform(3.0, &model, Symmetry::Z2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let u = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let v = minimize_kernel_part(&kp, &u).unwrap();
            assert_eq!(v.len(), 0);
            let q = q_value(&kp, &u).unwrap();
            // plain potential is (‖u‖_{p+1}^{p+1} − 1)/(p+1)
            let f = potential_value(&pot, &model, &u).unwrap();
            assert_relative_eq!(q - 0.25, f, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_input_has_zero_minimizer() {
        let kp = wave_problem(2, 3.0);
        let u = DVector::zeros(kp.model().real_dim());
        let v = minimize_kernel_part(&kp, &u).unwrap();
        assert!(v.norm() < 1e-12);
    }

    #[test]
    fn orthogonality_residual_small_on_randoms() {
        let kp = wave_problem(3, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..25 {
            let u = DVector::from_fn(kp.model().real_dim(), |_, _| rng.gen_range(-1.0..1.0));
            let v = minimize_kernel_part(&kp, &u).unwrap();
            assert!(kp.orthogonality_residual(&u, &v).unwrap() <= 1e-8);
            // the minimum beats v = 0
            let w0 = kp.field(&u, &DVector::zeros(kp.kernel_dim()));
            let wv = kp.field(&u, &v);
            assert!(kp.value_of_field(&wv) <= kp.value_of_field(&w0) + 1e-14);
        }
    }

    #[test]
    fn envelope_gradient_matches_fd() {
        let kp = wave_problem(2, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = kp.model().real_dim();
        for _ in 0..10 {
            let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let (_, grad) = q_jet(&kp, &u).unwrap();
            let dir = sample_unit_direction(&mut rng, n);
            let eps = 1e-5;
            let qp = q_value(&kp, &(&u + &dir * eps)).unwrap();
            let qm = q_value(&kp, &(&u - &dir * eps)).unwrap();
            let fd = (qp - qm) / (2.0 * eps);
            let an = grad.dot(&dir);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn schur_hessian_matches_fd_of_gradient() {
        let kp = wave_problem(2, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = kp.model().real_dim();
        for _ in 0..5 {
            let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let h = q_hessian(&kp, &u).unwrap();
            let dir = sample_unit_direction(&mut rng, n);
            let eps = 1e-5;
            let (_, gp) = q_jet(&kp, &(&u + &dir * eps)).unwrap();
            let (_, gm) = q_jet(&kp, &(&u - &dir * eps)).unwrap();
            let fd = (gp - gm) / (2.0 * eps);
            let an = &h * &dir;
            let scale = an.norm().max(fd.norm()).max(1e-3);
            assert!((&fd - &an).norm() / scale <= 2e-5);
        }
    }

    #[test]
    fn q_even_and_scaling_monotone() {
        let kp = wave_problem(2, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = kp.model().real_dim();
        for _ in 0..5 {
            let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let q = q_value(&kp, &u).unwrap();
            let qneg = q_value(&kp, &(-&u)).unwrap();
            assert_relative_eq!(q, qneg, max_relative = 1e-10);
            let mut prev = 0.0;
            for k in 1..=6 {
                let t = 0.4 * k as f64;
                let qt = q_value(&kp, &(&u * t)).unwrap();
                assert!(qt > prev, "Q not monotone along the ray at t={t}");
                prev = qt;
            }
        }
    }

    #[test]
    fn radial_derivative_is_one_on_s() {
        let model = build_model(ModelSpec::Wave { n: 3 }, false).unwrap();
        let kp = kernel_problem(&model, 3.0).unwrap();
        let pot = Potential::kernel_reduced(kp.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..10 {
            let dir = sample_unit_direction(&mut rng, model.real_dim());
            let r = crate::potentials::radial_root(&pot, &model, &dir, i).unwrap();
            let u = &dir * r;
            let (_, grad) = q_jet(&kp, &u).unwrap();
            let radial = grad.dot(&u);
            assert_relative_eq!(radial, 1.0, max_relative = 1e-7);
        }
    }
}

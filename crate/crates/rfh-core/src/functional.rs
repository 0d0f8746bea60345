//! The constrained action functional I(u,λ) = ½⟨Lu,u⟩ − λF(u) and its
//! H-metric gradient, Hessian, and descending flow field.
//!
//! In eigenbasis coordinates with the metric G = diag(|λ_i|; 1) the H-gradient
//! has coefficient slots sign(λ_i)a_i − λ·g_i/|λ_i| and multiplier slot −F(u),
//! and the descending flow is exactly its negative. The Hessian is stored as
//! the Euclidean symmetric matrix; inertia counts go through congruence with
//! G, never through the non-symmetric product G⁻¹A.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::potentials::{potential_jet, potential_value, potential_value_grad, Potential};
use crate::spectrum::{SpectralModel, StatePoint};

/// Second-order data of I at a point.
#[derive(Debug, Clone)]
pub struct ActionJet {
    pub value: f64,
    /// H-metric gradient; multiplier slot holds −F(u).
    pub grad_h: StatePoint,
    /// Euclidean symmetric Hessian on coordinates × multiplier.
    pub hess_euclid: DMatrix<f64>,
}

/// I(z).
pub fn action_value(model: &SpectralModel, pot: &Potential, z: &StatePoint) -> Result<f64> {
    model.check_point(z)?;
    let f = potential_value(pot, model, &z.coeffs)?;
    Ok(quadratic_part(model, z) - z.multiplier * f)
}

fn quadratic_part(model: &SpectralModel, z: &StatePoint) -> f64 {
    0.5 * z
        .coeffs
        .iter()
        .zip(model.slot_eigenvalues())
        .map(|(a, l)| l * a * a)
        .sum::<f64>()
}

/// Full jet: value, H-gradient, Euclidean Hessian.
pub fn action_jet(model: &SpectralModel, pot: &Potential, z: &StatePoint) -> Result<ActionJet> {
    model.check_point(z)?;
    let jet = potential_jet(pot, model, &z.coeffs)?;
    let n = model.real_dim();
    let lam = z.multiplier;
    let value = quadratic_part(model, z) - lam * jet.value;

    let slot = model.slot_eigenvalues();
    let grad_coeffs = DVector::from_fn(n, |i, _| {
        slot[i].signum() * z.coeffs[i] - lam * jet.grad[i] / slot[i].abs()
    });
    let grad_h = StatePoint::new(grad_coeffs, -jet.value);

    let mut hess = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            hess[(i, j)] = -lam * jet.hess[(i, j)];
        }
        hess[(i, i)] += slot[i];
        hess[(i, n)] = -jet.grad[i];
        hess[(n, i)] = -jet.grad[i];
    }
    Ok(ActionJet { value, grad_h, hess_euclid: hess })
}

/// Euclidean gradient of I as an (n+1)-vector (coefficients then multiplier).
pub fn grad_euclid(model: &SpectralModel, pot: &Potential, z: &StatePoint) -> Result<DVector<f64>> {
    model.check_point(z)?;
    let (f, g) = potential_value_grad(pot, model, &z.coeffs)?;
    let n = model.real_dim();
    let slot = model.slot_eigenvalues();
    let mut out = DVector::zeros(n + 1);
    for i in 0..n {
        out[i] = slot[i] * z.coeffs[i] - z.multiplier * g[i];
    }
    out[n] = -f;
    Ok(out)
}

/// Descending flow vector field: the negative H-gradient of I.
///
/// Coefficient slots −sign(λ_i)a_i + λ·g_i/|λ_i|, multiplier slot F(u).
pub fn flow_field(model: &SpectralModel, pot: &Potential, z: &StatePoint) -> Result<StatePoint> {
    model.check_point(z)?;
    let (f, g) = potential_value_grad(pot, model, &z.coeffs)?;
    let n = model.real_dim();
    let slot = model.slot_eigenvalues();
    let coeffs = DVector::from_fn(n, |i, _| {
        -slot[i].signum() * z.coeffs[i] + z.multiplier * g[i] / slot[i].abs()
    });
    Ok(StatePoint::new(coeffs, f))
}

/// H-norm of the H-gradient: ‖∇I‖_H = √(∇EᵀG⁻¹∇E).
pub fn grad_h_norm(model: &SpectralModel, pot: &Potential, z: &StatePoint) -> Result<f64> {
    let ge = grad_euclid(model, pot, z)?;
    Ok(weighted_inv_norm(model, &ge))
}

pub(crate) fn weighted_inv_norm(model: &SpectralModel, grad_euclid: &DVector<f64>) -> f64 {
    let n = model.real_dim();
    let mut acc = grad_euclid[n] * grad_euclid[n];
    for (i, l) in model.slot_eigenvalues().iter().enumerate() {
        acc += grad_euclid[i] * grad_euclid[i] / l.abs();
    }
    acc.sqrt()
}

/// Metric weights (|λ_i|...; 1) as a vector.
pub fn metric_diagonal(model: &SpectralModel) -> DVector<f64> {
    let n = model.real_dim();
    let mut g = DVector::zeros(n + 1);
    for (i, l) in model.slot_eigenvalues().iter().enumerate() {
        g[i] = l.abs();
    }
    g[n] = 1.0;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::Symmetry;
    use crate::spectrum::{build_model, h_inner, ModelSpec};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sphere_setup(n: u32) -> (SpectralModel, Potential) {
        (build_model(ModelSpec::Abstract { n }, false).unwrap(), Potential::sphere(Symmetry::Z2))
    }

    #[test]
    fn critical_point_jet() {
        let (m, pot) = sphere_setup(3);
        let mut z = StatePoint::zeros(6);
        z.coeffs[4] = 1.0; // φ_2
        z.multiplier = 2.0;
        let jet = action_jet(&m, &pot, &z).unwrap();
        assert_relative_eq!(jet.value, 1.0, max_relative = 1e-15); // λ_2/2
        assert!(jet.grad_h.coeffs.amax() < 1e-15);
        assert!(jet.grad_h.multiplier.abs() < 1e-15);
    }

    #[test]
    fn origin_value() {
        let (m, pot) = sphere_setup(3);
        let z = StatePoint::new(DVector::zeros(6), 1.7);
        assert_relative_eq!(action_value(&m, &pot, &z).unwrap(), 1.7 / 2.0, max_relative = 1e-15);
    }

    #[test]
    fn grad_h_matches_metric_weighted_fd() {
        let (m, pot) = sphere_setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let z = StatePoint::new(
                DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0)),
                rng.gen_range(-2.0..2.0),
            );
            let jet = action_jet(&m, &pot, &z).unwrap();
            // FD of I in the direction of a coordinate, pulled back by G
            let eps = 1e-6;
            let g = metric_diagonal(&m);
            for k in 0..7 {
                let mut zp = z.to_full();
                zp[k] += eps;
                let mut zm = z.to_full();
                zm[k] -= eps;
                let fp = action_value(&m, &pot, &StatePoint::from_full(&zp)).unwrap();
                let fm = action_value(&m, &pot, &StatePoint::from_full(&zm)).unwrap();
                let fd = (fp - fm) / (2.0 * eps); // Euclidean partial
                let gh = jet.grad_h.to_full();
                let an = g[k] * gh[k]; // G·grad_h = Euclidean gradient
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "slot {k}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn flow_is_negative_gradient() {
        let m = build_model(ModelSpec::DiracToy { n: 3 }, true).unwrap();
        let pot = Potential::sphere(Symmetry::S1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let z = StatePoint::new(
                DVector::from_fn(m.real_dim(), |_, _| rng.gen_range(-1.0..1.0)),
                rng.gen_range(-2.0..2.0),
            );
            let jet = action_jet(&m, &pot, &z).unwrap();
            let f = flow_field(&m, &pot, &z).unwrap();
            assert!((f.coeffs + jet.grad_h.coeffs).amax() < 1e-14);
            assert!((f.multiplier + jet.grad_h.multiplier).abs() < 1e-14);
        }
    }

    #[test]
    fn sphere_flow_component_formula() {
        let (m, pot) = sphere_setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let z = StatePoint::new(
                DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0)),
                rng.gen_range(-2.0..2.0),
            );
            let f = flow_field(&m, &pot, &z).unwrap();
            for i in 0..6 {
                let li = m.slot_eigenvalues()[i];
                let expect = (z.multiplier - li) * z.coeffs[i] / li.abs();
                assert_relative_eq!(f.coeffs[i], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn multiplier_slot_vanishes_on_s() {
        let (m, pot) = sphere_setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dir = crate::potentials::sample_unit_direction(&mut rng, 6);
        let z = StatePoint::new(dir, 0.9);
        let f = flow_field(&m, &pot, &z).unwrap();
        assert!(f.multiplier.abs() < 1e-14);
    }

    #[test]
    fn hessian_symmetric() {
        let m = build_model(ModelSpec::Abstract { n: 3 }, false).unwrap();
        let pot = Potential::p_power_uniform(3.0, &m, Symmetry::Z2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let z = StatePoint::new(
                DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0)),
                rng.gen_range(-2.0..2.0),
            );
            let jet = action_jet(&m, &pot, &z).unwrap();
            assert!((&jet.hess_euclid - jet.hess_euclid.transpose()).amax() <= 1e-12);
        }
    }

    #[test]
    fn grad_h_norm_consistent_with_h_inner() {
        let (m, pot) = sphere_setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = StatePoint::new(DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)), 0.4);
        let jet = action_jet(&m, &pot, &z).unwrap();
        let direct = h_inner(&m, &jet.grad_h, &jet.grad_h).unwrap().sqrt();
        assert_relative_eq!(grad_h_norm(&m, &pot, &z).unwrap(), direct, max_relative = 1e-13);
    }
}

//! Relative index of critical records against the reference splitting H⁻ × ℝ.
//!
//! The index and co-index of a critical point are both infinite in the full
//! problem; the grading that survives truncation is the relative one:
//! rel_index = (negative inertia of the Hessian) − (dim H⁻ + 1). Since the
//! metric G is positive definite, Sylvester's law lets us count inertia on the
//! Euclidean symmetric matrix directly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::critical::{CriticalRecord, OrbitType};
use crate::error::{Error, Result};
use crate::functional::action_jet;
use crate::potentials::Potential;
use crate::spectrum::SpectralModel;

/// Relative zero threshold for inertia counting.
pub const INERTIA_ZERO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexReport {
    pub n_neg_hessian: usize,
    pub reference_dim: usize,
    pub rel_index: i32,
}

/// Inertia (n_neg, n_zero, n_pos) of a symmetric matrix by LDLᵀ factorization
/// with Bunch-Kaufman partial pivoting. Pivots within `INERTIA_ZERO_TOL`
/// (relative to the matrix scale) count as zero modes.
pub fn inertia(a: &DMatrix<f64>) -> (usize, usize, usize) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "inertia needs a square matrix");
    let mut a = a.clone();
    let scale = a.amax().max(1.0);
    let tol = INERTIA_ZERO_TOL * scale;
    let alpha = (1.0 + 17.0_f64.sqrt()) / 8.0;

    let (mut neg, mut zero, mut pos) = (0usize, 0usize, 0usize);
    let mut k = 0;
    while k < n {
        // trailing submatrix scale
        let mut trail_max: f64 = 0.0;
        for i in k..n {
            for j in k..n {
                trail_max = trail_max.max(a[(i, j)].abs());
            }
        }
        if trail_max <= tol {
            zero += n - k;
            break;
        }

        // largest off-diagonal entry in column k below the diagonal
        let mut lam = 0.0;
        let mut r = k;
        for i in (k + 1)..n {
            if a[(i, k)].abs() > lam {
                lam = a[(i, k)].abs();
                r = i;
            }
        }
        let akk = a[(k, k)].abs();

        if akk <= tol && lam <= tol {
            // decoupled null direction
            zero += 1;
            k += 1;
            continue;
        }

        let use_two = if akk >= alpha * lam {
            false
        } else {
            // σ: largest off-diagonal entry in row/column r of the trailing block
            let mut sigma: f64 = 0.0;
            for i in k..n {
                if i != r {
                    sigma = sigma.max(a[(i, r)].abs());
                }
            }
            if akk * sigma >= alpha * lam * lam {
                false
            } else if a[(r, r)].abs() >= alpha * sigma {
                swap_sym(&mut a, k, r);
                false
            } else {
                swap_sym(&mut a, k + 1, r);
                true
            }
        };

        if !use_two {
            let d = a[(k, k)];
            if d.abs() <= tol {
                zero += 1;
            } else if d > 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            if d.abs() > tol {
                for i in (k + 1)..n {
                    let lik = a[(i, k)] / d;
                    for j in (k + 1)..=i {
                        let v = a[(i, j)] - lik * a[(j, k)];
                        a[(i, j)] = v;
                        a[(j, i)] = v;
                    }
                }
            }
            k += 1;
        } else {
            let (p, q, s) = (a[(k, k)], a[(k + 1, k)], a[(k + 1, k + 1)]);
            let det = p * s - q * q;
            // eigenvalues of the 2x2 block
            let tr2 = 0.5 * (p + s);
            let disc = (0.25 * (p - s) * (p - s) + q * q).sqrt();
            for ev in [tr2 + disc, tr2 - disc] {
                if ev.abs() <= tol {
                    zero += 1;
                } else if ev > 0.0 {
                    pos += 1;
                } else {
                    neg += 1;
                }
            }
            if det.abs() > tol * tol {
                let (ei_a, ei_b, ei_c) = (s / det, -q / det, p / det);
                for i in (k + 2)..n {
                    let (x, y) = (a[(i, k)], a[(i, k + 1)]);
                    let wx = ei_a * x + ei_b * y;
                    let wy = ei_b * x + ei_c * y;
                    for j in (k + 2)..=i {
                        let v = a[(i, j)] - wx * a[(j, k)] - wy * a[(j, k + 1)];
                        a[(i, j)] = v;
                        a[(j, i)] = v;
                    }
                }
            }
            k += 2;
        }
    }
    (neg, zero, pos)
}

fn swap_sym(a: &mut DMatrix<f64>, i: usize, j: usize) {
    if i == j {
        return;
    }
    a.swap_rows(i, j);
    a.swap_columns(i, j);
}

/// Relative index of a record: negative Hessian inertia minus (dim H⁻ + 1).
///
/// Circles carry exactly one mandated zero mode (the orbit tangent), which is
/// excluded from the count; any further degeneracy is an error.
pub fn relative_index(
    model: &SpectralModel,
    pot: &Potential,
    rec: &CriticalRecord,
) -> Result<IndexReport> {
    let jet = action_jet(model, pot, &rec.point)?;
    let (n_neg, n_zero, _) = inertia(&jet.hess_euclid);
    let allowed = if rec.orbit_type == OrbitType::Circle { 1 } else { 0 };
    if n_zero > allowed {
        return Err(Error::DegenerateHessian { zeros: n_zero, allowed });
    }
    let reference_dim = model.neg_real_dim() + 1;
    Ok(IndexReport {
        n_neg_hessian: n_neg,
        reference_dim,
        rel_index: n_neg as i32 - reference_dim as i32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DVector, SymmetricEigen};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn eig_inertia(a: &DMatrix<f64>) -> (usize, usize, usize) {
        let scale = a.amax().max(1.0);
        let tol = INERTIA_ZERO_TOL * scale;
        let eig = SymmetricEigen::new(a.clone());
        let (mut neg, mut zero, mut pos) = (0, 0, 0);
        for &v in eig.eigenvalues.iter() {
            if v.abs() <= tol {
                zero += 1;
            } else if v > 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        (neg, zero, pos)
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _, | rng.gen_range(-1.0..1.0));
        (&m + m.transpose()) * 0.5
    }

    #[test]
    fn inertia_matches_eigensolve_on_randoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let a = random_symmetric(&mut rng, n);
            assert_eq!(inertia(&a), eig_inertia(&a), "matrix {a}");
        }
    }

    #[test]
    fn inertia_detects_engineered_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let n = rng.gen_range(3..10);
            let rank = rng.gen_range(1..n);
            // A = B D Bᵀ with B orthogonal-ish and D having `rank` nonzeros
            let b = random_symmetric(&mut rng, n);
            let q = SymmetricEigen::new(b).eigenvectors;
            let mut d = DVector::zeros(n);
            for i in 0..rank {
                d[i] = rng.gen_range(0.2..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
            let a = &q * DMatrix::from_diagonal(&d) * q.transpose();
            let (neg, zero, pos) = inertia(&a);
            let expect_neg = d.iter().filter(|&&x| x < 0.0).count();
            assert_eq!(zero, n - rank);
            assert_eq!(neg, expect_neg);
            assert_eq!(pos, rank - expect_neg);
        }
    }

    #[test]
    fn inertia_hyperbolic_coupling_block() {
        // [[0, -1], [-1, 0]] has eigenvalues ±1
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert_eq!(inertia(&a), (1, 0, 1));
    }

    #[test]
    fn inertia_all_zero() {
        let a = DMatrix::zeros(4, 4);
        assert_eq!(inertia(&a), (0, 4, 0));
    }

    #[test]
    fn sylvester_consistency_with_metric_congruence() {
        // inertia(A) must equal inertia of G^{-1/2} A G^{-1/2} for G > 0
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.gen_range(2..10);
            let a = random_symmetric(&mut rng, n);
            let g = DVector::from_fn(n, |_, _| rng.gen_range(0.2..5.0));
            let gm = DMatrix::from_diagonal(&g.map(|x: f64| 1.0 / x.sqrt()));
            let s = &gm * &a * &gm;
            assert_eq!(inertia(&a), eig_inertia(&s));
        }
    }
}

//! Two-point boundary-value solver: Lobatto-IIIA (trapezoid) collocation at
//! Chebyshev-spaced nodes, Newton iteration, and a structured block
//! elimination for the almost-block-bidiagonal linear systems.
//!
//! Unknowns are the node values z_1..z_m. Rows are the left boundary
//! conditions (projection onto the complement of the departing subspace),
//! one collocation block per interval, an optional scalar anchor row pinning
//! time translation, and the right boundary conditions. The system is square
//! exactly when n_left + n_right + (anchor ? 1 : 0) = dim.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Anchor<'a> {
    pub node: usize,
    pub target: f64,
    pub value: &'a (dyn Fn(&DVector<f64>) -> Option<f64> + Sync),
    pub grad: &'a (dyn Fn(&DVector<f64>) -> Option<DVector<f64>> + Sync),
}

pub(crate) struct CollocationProblem<'a> {
    pub times: Vec<f64>,
    pub dim: usize,
    pub field: &'a (dyn Fn(f64, &DVector<f64>) -> Option<DVector<f64>> + Sync),
    pub jacobian: &'a (dyn Fn(f64, &DVector<f64>) -> Option<DMatrix<f64>> + Sync),
    /// rows annihilating the allowed departure subspace at the source
    pub left_rows: DMatrix<f64>,
    pub left_point: DVector<f64>,
    /// rows annihilating the allowed arrival subspace at the target
    pub right_rows: DMatrix<f64>,
    pub right_point: DVector<f64>,
    pub anchor: Option<Anchor<'a>>,
}

pub(crate) struct CollocationSolution {
    pub nodes: Vec<DVector<f64>>,
    /// max abs over collocation rows
    pub residual: f64,
    /// max abs over boundary-condition and anchor rows
    pub bc_defect: f64,
}

struct ResidualBlocks {
    left: DVector<f64>,
    colloc: Vec<DVector<f64>>,
    anchor: Option<f64>,
    right: DVector<f64>,
    norm_sq: f64,
    max_colloc: f64,
    max_bc: f64,
}

fn amax_or0(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

impl ResidualBlocks {
    fn max_all(&self) -> f64 {
        self.max_colloc.max(self.max_bc)
    }
}

/// Chebyshev-Gauss-Lobatto nodes on [a, b].
pub(crate) fn chebyshev_times(a: f64, b: f64, m: usize) -> Vec<f64> {
    assert!(m >= 3);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (0..m)
        .map(|k| mid - half * (std::f64::consts::PI * k as f64 / (m - 1) as f64).cos())
        .collect()
}

impl CollocationProblem<'_> {
    fn n_nodes(&self) -> usize {
        self.times.len()
    }

    fn is_square(&self) -> bool {
        let extra = usize::from(self.anchor.is_some());
        self.left_rows.nrows() + self.right_rows.nrows() + extra == self.dim
    }

    fn residuals(&self, nodes: &[DVector<f64>], fields: &[DVector<f64>]) -> Option<ResidualBlocks> {
        let m = self.n_nodes();
        let left = &self.left_rows * (&nodes[0] - &self.left_point);
        let right = &self.right_rows * (&nodes[m - 1] - &self.right_point);
        let mut colloc = Vec::with_capacity(m - 1);
        let mut max_colloc: f64 = 0.0;
        let mut norm_sq = left.norm_squared() + right.norm_squared();
        for j in 0..m - 1 {
            let h = self.times[j + 1] - self.times[j];
            let r = &nodes[j + 1] - &nodes[j] - (&fields[j] + &fields[j + 1]) * (0.5 * h);
            max_colloc = max_colloc.max(r.amax());
            norm_sq += r.norm_squared();
            colloc.push(r);
        }
        let mut max_bc = amax_or0(&left).max(amax_or0(&right));
        let anchor = match &self.anchor {
            Some(a) => {
                let v = (a.value)(&nodes[a.node])? - a.target;
                max_bc = max_bc.max(v.abs());
                norm_sq += v * v;
                Some(v)
            }
            None => None,
        };
        Some(ResidualBlocks { left, colloc, anchor, right, norm_sq, max_colloc, max_bc })
    }

    fn eval_fields(&self, nodes: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
        self.times
            .iter()
            .zip(nodes)
            .map(|(&t, z)| (self.field)(t, z))
            .collect()
    }

    fn residuals_of(&self, nodes: &[DVector<f64>]) -> Option<ResidualBlocks> {
        let fields = self.eval_fields(nodes)?;
        self.residuals(nodes, &fields)
    }

    /// One Newton direction by forward block condensation + back substitution.
    fn newton_direction(
        &self,
        nodes: &[DVector<f64>],
        res: &ResidualBlocks,
    ) -> Option<Vec<DVector<f64>>> {
        let d = self.dim;
        let m = self.n_nodes();
        let wide = 2 * d + 1;

        let jacs: Option<Vec<DMatrix<f64>>> = self
            .times
            .iter()
            .zip(nodes)
            .map(|(&t, z)| (self.jacobian)(t, z))
            .collect();
        let jacs = jacs?;

        let anchor_node = self.anchor.as_ref().map(|a| a.node);
        let anchor_grad = match &self.anchor {
            Some(a) => Some((a.grad)(&nodes[a.node])?),
            None => None,
        };

        // pending rows over (δz_j | rhs)
        let n_l = self.left_rows.nrows();
        let mut pending = DMatrix::zeros(n_l, d + 1);
        pending.view_mut((0, 0), (n_l, d)).copy_from(&self.left_rows);
        for (i, v) in res.left.iter().enumerate() {
            pending[(i, d)] = -v;
        }

        let mut stored: Vec<DMatrix<f64>> = Vec::with_capacity(m - 1);
        for j in 0..m - 1 {
            let h = self.times[j + 1] - self.times[j];
            let p = pending.nrows();
            let anchor_here = anchor_node == Some(j) && j < m - 1;
            let rows = p + d + usize::from(anchor_here);
            let mut panel = DMatrix::zeros(rows, wide);
            panel.view_mut((0, 0), (p, d)).copy_from(&pending.view((0, 0), (p, d)));
            for i in 0..p {
                panel[(i, 2 * d)] = pending[(i, d)];
            }
            // collocation block: A_j δz_j + B_j δz_{j+1} = −r_j
            for r in 0..d {
                for c in 0..d {
                    panel[(p + r, c)] = -0.5 * h * jacs[j][(r, c)];
                    panel[(p + r, d + c)] = -0.5 * h * jacs[j + 1][(r, c)];
                }
                panel[(p + r, r)] -= 1.0;
                panel[(p + r, d + r)] += 1.0;
                panel[(p + r, 2 * d)] = -res.colloc[j][r];
            }
            if anchor_here {
                let g = anchor_grad.as_ref().unwrap();
                for c in 0..d {
                    panel[(rows - 1, c)] = g[c];
                }
                panel[(rows - 1, 2 * d)] = -res.anchor.unwrap();
            }

            // eliminate the δz_j columns with partial pivoting
            let scale = panel.amax().max(1e-300);
            for col in 0..d {
                let mut piv = col;
                for r in (col + 1)..rows {
                    if panel[(r, col)].abs() > panel[(piv, col)].abs() {
                        piv = r;
                    }
                }
                if panel[(piv, col)].abs() <= 1e-13 * scale {
                    return None;
                }
                if piv != col {
                    panel.swap_rows(piv, col);
                }
                let diag = panel[(col, col)];
                for r in (col + 1)..rows {
                    let f = panel[(r, col)] / diag;
                    if f != 0.0 {
                        for c in col..wide {
                            panel[(r, c)] -= f * panel[(col, c)];
                        }
                        panel[(r, col)] = 0.0;
                    }
                }
            }
            stored.push(panel.view((0, 0), (d, wide)).into_owned());
            let p_new = rows - d;
            let mut next = DMatrix::zeros(p_new, d + 1);
            for r in 0..p_new {
                for c in 0..d {
                    next[(r, c)] = panel[(d + r, d + c)];
                }
                next[(r, d)] = panel[(d + r, 2 * d)];
            }
            pending = next;
        }

        // final block on δz_m
        let n_r = self.right_rows.nrows();
        let p = pending.nrows();
        let anchor_at_end = anchor_node == Some(m - 1);
        let fin_rows = p + n_r + usize::from(anchor_at_end);
        if fin_rows != d {
            return None;
        }
        let mut fin = DMatrix::zeros(d, d);
        let mut rhs = DVector::zeros(d);
        for r in 0..p {
            for c in 0..d {
                fin[(r, c)] = pending[(r, c)];
            }
            rhs[r] = pending[(r, d)];
        }
        for r in 0..n_r {
            for c in 0..d {
                fin[(p + r, c)] = self.right_rows[(r, c)];
            }
            rhs[p + r] = -res.right[r];
        }
        if anchor_at_end {
            let g = anchor_grad.as_ref().unwrap();
            for c in 0..d {
                fin[(d - 1, c)] = g[c];
            }
            rhs[d - 1] = -res.anchor.unwrap();
        }
        let last = fin.lu().solve(&rhs)?;

        // back substitution through the stored upper-triangular panels
        let mut deltas = vec![DVector::zeros(d); m];
        deltas[m - 1] = last;
        for j in (0..m - 1).rev() {
            let u = &stored[j];
            let mut b = DVector::zeros(d);
            for r in 0..d {
                let mut acc = u[(r, 2 * d)];
                for c in 0..d {
                    acc -= u[(r, d + c)] * deltas[j + 1][c];
                }
                b[r] = acc;
            }
            let mut x = DVector::zeros(d);
            for r in (0..d).rev() {
                let mut acc = b[r];
                for c in (r + 1)..d {
                    acc -= u[(r, c)] * x[c];
                }
                x[r] = acc / u[(r, r)];
            }
            deltas[j] = x;
        }
        Some(deltas)
    }

    /// Newton with halving line search from an initial node path.
    pub(crate) fn solve(
        &self,
        init: Vec<DVector<f64>>,
        tol: f64,
        max_iter: usize,
    ) -> Option<CollocationSolution> {
        if !self.is_square() {
            log::error!("collocation system is not square");
            return None;
        }
        let mut nodes = init;
        let mut res = self.residuals_of(&nodes)?;
        for _ in 0..max_iter {
            if res.max_all() <= tol {
                return Some(CollocationSolution {
                    nodes,
                    residual: res.max_colloc,
                    bc_defect: res.max_bc,
                });
            }
            if !res.norm_sq.is_finite() {
                return None;
            }
            let delta = self.newton_direction(&nodes, &res)?;
            let mut alpha = 1.0;
            let mut advanced = false;
            for _ in 0..30 {
                let cand: Vec<DVector<f64>> = nodes
                    .iter()
                    .zip(&delta)
                    .map(|(z, dz)| z + dz * alpha)
                    .collect();
                if let Some(cr) = self.residuals_of(&cand) {
                    if cr.norm_sq.is_finite()
                        && cr.norm_sq.sqrt() <= (1.0 - 1e-4 * alpha) * res.norm_sq.sqrt()
                    {
                        nodes = cand;
                        res = cr;
                        advanced = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !advanced {
                return None;
            }
        }
        if res.max_all() <= tol {
            Some(CollocationSolution { nodes, residual: res.max_colloc, bc_defect: res.max_bc })
        } else {
            None
        }
    }

    /// Residual check of an externally produced node path (used to accept
    /// symmetry-completed orbit candidates).
    pub(crate) fn verify(&self, nodes: &[DVector<f64>], tol: f64) -> Option<(f64, f64)> {
        let res = self.residuals_of(nodes)?;
        if res.max_all() <= tol {
            Some((res.max_colloc, res.max_bc))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Linear saddle flow z' = diag(1, -1) z: connecting the unstable line of
    /// the origin to a shifted stable line tests the machinery end to end.
    #[test]
    fn linear_saddle_bvp() {
        let dim = 2;
        let field = |_t: f64, z: &DVector<f64>| {
            Some(DVector::from_vec(vec![z[0], -z[1]]))
        };
        let jacobian = |_t: f64, _z: &DVector<f64>| {
            Some(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]))
        };
        // orbit z(t) = (c e^t, k e^{-t}); BCs: left picks stable coordinate
        // z0[1] = 1 offset, right pins z1[0] = 1 offset; anchored product.
        let times = chebyshev_times(-4.0, 4.0, 33);
        let left_rows = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let right_rows = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let left_point = DVector::from_vec(vec![0.0, (4.0_f64).exp()]);
        let right_point = DVector::from_vec(vec![(4.0_f64).exp(), 0.0]);
        let problem = CollocationProblem {
            times: times.clone(),
            dim,
            field: &field,
            jacobian: &jacobian,
            left_rows,
            left_point,
            right_rows,
            right_point,
            anchor: None,
        };
        let init: Vec<DVector<f64>> = times
            .iter()
            .map(|&t| DVector::from_vec(vec![(t).exp() * 0.9, (-t).exp() * 1.1]))
            .collect();
        let sol = problem.solve(init, 1e-12, 40).expect("solve");
        // exact solution z = (e^t, e^{-t}); trapezoid error is O(h²) so only
        // the boundary rows are exact. Check endpoint conditions instead.
        assert!(sol.bc_defect <= 1e-12);
        assert!(sol.residual <= 1e-12);
        assert_relative_eq!(sol.nodes[0][1], (4.0_f64).exp(), max_relative = 1e-10);
        assert_relative_eq!(sol.nodes.last().unwrap()[0], (4.0_f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn anchored_translation_is_pinned() {
        // autonomous scalar-ish saddle with a translation family: z' = (z0, -z1)
        // plus anchor picking the node where z0 = 1.
        let field = |_t: f64, z: &DVector<f64>| Some(DVector::from_vec(vec![z[0], -z[1]]));
        let jacobian =
            |_t: f64, _z: &DVector<f64>| Some(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        let times = chebyshev_times(-5.0, 5.0, 41);
        let mid = times.len() / 2;
        let value = |z: &DVector<f64>| Some(z[0]);
        let grad = |_z: &DVector<f64>| Some(DVector::from_vec(vec![1.0, 0.0]));
        let problem = CollocationProblem {
            times: times.clone(),
            dim: 2,
            field: &field,
            jacobian: &jacobian,
            // leave both endpoints free along their exponential directions
            left_rows: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            left_point: DVector::from_vec(vec![0.0, 0.0]),
            right_rows: DMatrix::zeros(0, 2),
            right_point: DVector::zeros(2),
            anchor: Some(Anchor { node: mid, target: 1.0, value: &value, grad: &grad }),
        };
        let init: Vec<DVector<f64>> =
            times.iter().map(|&t| DVector::from_vec(vec![(t * 0.9).exp() * 2.0, 0.0])).collect();
        let sol = problem.solve(init, 1e-12, 60).expect("solve");
        assert_relative_eq!(sol.nodes[mid][0], 1.0, epsilon = 1e-11);
        assert!(sol.nodes.iter().all(|z| z[1].abs() < 1e-9));
    }
}

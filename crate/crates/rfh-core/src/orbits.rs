//! Connecting orbits of the descending flow and their mod-2 counts.
//!
//! Orbits between records with index gap one are isolated once time
//! translation is pinned, so they are found as solutions of a two-point
//! collocation problem: the first node is constrained to the source plus its
//! unstable subspace, the last to the target plus its stable subspace, and the
//! action value at the node nearest t = 0 fixes the translation. Multistart
//! initial paths are deduplicated after solving; candidates produced by
//! symmetry transforms are accepted only if the full discrete residual passes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::ser::SerializeStruct;
use serde::Serialize;

use crate::collocation::{chebyshev_times, Anchor, CollocationProblem};
use crate::critical::{mix_seed, orbit_distance, CriticalRecord};
use crate::error::{Error, Result};
use crate::functional::{action_jet, action_value, flow_field, grad_h_norm, metric_diagonal};
use crate::potentials::{Potential, Symmetry};
use crate::spectrum::{SpectralModel, StatePoint};

pub use crate::complexes::count_mod2;

/// Orbits whose aligned node sets differ by less than this are duplicates.
pub const ORBIT_DEDUP_TOL: f64 = 1e-4;

/// Gradient norm below which a trajectory counts as converged to a record.
pub const FLOW_REST_TOL: f64 = 1e-10;

/// E-norm blow-up guard for trajectories.
pub const FLOW_BLOWUP: f64 = 1e6;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OrbitParams {
    pub n_starts: usize,
    pub seed: u64,
    /// residual gate for accepted orbits
    pub tol: f64,
    /// number of collocation nodes (m)
    pub nodes: usize,
    /// override for the half-horizon T (default from endpoint decay rates)
    pub horizon: Option<f64>,
}

impl Default for OrbitParams {
    fn default() -> Self {
        Self { n_starts: 8, seed: 0, tol: 1e-8, nodes: 64, horizon: None }
    }
}

/// A discretized connecting orbit with endpoint tags.
#[derive(Debug, Clone)]
pub struct OrbitRecord {
    pub source_id: usize,
    pub target_id: usize,
    pub times: Vec<f64>,
    pub nodes: Vec<StatePoint>,
    /// max discretized flow-equation defect
    pub residual: f64,
    /// max boundary-condition and anchor defect
    pub bc_defect: f64,
    pub action_profile: Vec<f64>,
    /// action value pinned at the node nearest t = 0
    pub phase_anchor: f64,
}

impl Serialize for OrbitRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        // coarse node subsample keeps artifacts small
        let stride = (self.nodes.len() / 16).max(1);
        let coarse: Vec<(f64, &StatePoint)> = self
            .times
            .iter()
            .zip(&self.nodes)
            .enumerate()
            .filter(|(i, _)| i % stride == 0 || *i + 1 == self.nodes.len())
            .map(|(_, (t, z))| (*t, z))
            .collect();
        let mut st = s.serialize_struct("OrbitRecord", 7)?;
        st.serialize_field("source_id", &self.source_id)?;
        st.serialize_field("target_id", &self.target_id)?;
        st.serialize_field("residual", &self.residual)?;
        st.serialize_field("bc_defect", &self.bc_defect)?;
        st.serialize_field("phase_anchor", &self.phase_anchor)?;
        st.serialize_field("action_profile", &self.action_profile)?;
        st.serialize_field("nodes_coarse", &coarse)?;
        st.end()
    }
}

// ---------------------------------------------------------------------------
// Flow integration (Dormand-Prince 5(4), adaptive)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StatePoint>,
    /// id of the record the flow came to rest on, if any
    pub landed_on: Option<usize>,
}

const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrate the descending flow from z0 with adaptive step control.
///
/// Stops early once the H-gradient norm falls below `FLOW_REST_TOL`, reporting
/// the nearest record within deduplication distance; errors with `BlowUp` if
/// the E-norm leaves the admissible region.
pub fn integrate_flow(
    model: &SpectralModel,
    pot: &Potential,
    z0: &StatePoint,
    t_max: f64,
    tol: f64,
    records: &[CriticalRecord],
) -> Result<Trajectory> {
    model.check_point(z0)?;
    if tol <= 0.0 {
        return Err(Error::InvalidInput("integrator tolerance must be > 0".into()));
    }
    let f = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let v = flow_field(model, pot, &StatePoint::from_full(z))?;
        Ok(v.to_full())
    };
    let mut t = 0.0;
    let mut z = z0.to_full();
    let mut h = (t_max / 100.0).min(0.1).max(1e-6);
    let mut times = vec![0.0];
    let mut states = vec![z0.clone()];
    let mut landed = None;

    let mut k: Vec<DVector<f64>> = vec![DVector::zeros(z.len()); 7];
    k[0] = f(&z)?;
    while t < t_max {
        let state = StatePoint::from_full(&z);
        if state.e_norm() > FLOW_BLOWUP {
            return Err(Error::BlowUp(FLOW_BLOWUP));
        }
        let gnorm = grad_h_norm(model, pot, &state)?;
        if gnorm <= FLOW_REST_TOL {
            landed = nearest_record(model, pot.symmetry(), records, &state);
            break;
        }
        let h_step = h.min(t_max - t);
        for i in 1..7 {
            let mut y = z.clone();
            for (j, kj) in k.iter().enumerate().take(i) {
                let a = DP_A[i - 1][j];
                if a != 0.0 {
                    y.axpy(h_step * a, kj, 1.0);
                }
            }
            k[i] = f(&y)?;
        }
        let mut y5 = z.clone();
        let mut y4 = z.clone();
        for i in 0..7 {
            if DP_B5[i] != 0.0 {
                y5.axpy(h_step * DP_B5[i], &k[i], 1.0);
            }
            if DP_B4[i] != 0.0 {
                y4.axpy(h_step * DP_B4[i], &k[i], 1.0);
            }
        }
        let mut err: f64 = 0.0;
        for i in 0..z.len() {
            let sc = tol * (1.0 + z[i].abs().max(y5[i].abs()));
            err = err.max((y5[i] - y4[i]).abs() / sc);
        }
        if err <= 1.0 {
            t += h_step;
            // FSAL: stage 7 of the accepted step is the next step's stage 1
            k[0] = k[6].clone();
            z = y5;
            times.push(t);
            states.push(StatePoint::from_full(&z));
        } else {
            k[0] = f(&z)?;
        }
        let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
        h = (h_step * fac).max(1e-12);
        let _ = DP_C;
    }
    if landed.is_none() {
        let state = states.last().unwrap();
        if grad_h_norm(model, pot, state)? <= FLOW_REST_TOL {
            landed = nearest_record(model, pot.symmetry(), records, state);
        }
    }
    Ok(Trajectory { times, states, landed_on: landed })
}

fn nearest_record(
    model: &SpectralModel,
    symmetry: Symmetry,
    records: &[CriticalRecord],
    z: &StatePoint,
) -> Option<usize> {
    records
        .iter()
        .map(|r| (orbit_distance(model, symmetry, &r.point, z), r.id))
        .filter(|(d, _)| *d < 1e-6)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, id)| id)
}

// ---------------------------------------------------------------------------
// Endpoint linearization data
// ---------------------------------------------------------------------------

struct EndpointEig {
    /// rows annihilating the unstable subspace (one per non-negative mode)
    complement_unstable: DMatrix<f64>,
    /// rows annihilating the stable subspace (one per non-positive mode)
    complement_stable: DMatrix<f64>,
    /// flow-departure directions (negative Hessian modes), G-orthonormal
    unstable_dirs: Vec<DVector<f64>>,
    slowest_unstable: f64,
    slowest_stable: f64,
}

fn endpoint_eig(model: &SpectralModel, pot: &Potential, rec: &CriticalRecord) -> Result<EndpointEig> {
    let jet = action_jet(model, pot, &rec.point)?;
    let g = metric_diagonal(model);
    let n = g.len();
    let gh_inv = DVector::from_fn(n, |i, _| 1.0 / g[i].sqrt());
    let s = DMatrix::from_fn(n, n, |i, j| gh_inv[i] * jet.hess_euclid[(i, j)] * gh_inv[j]);
    let eig = SymmetricEigen::new(s);
    let tol = 1e-10 * eig.eigenvalues.amax().max(1.0);

    let mut comp_unstable_rows = Vec::new();
    let mut comp_stable_rows = Vec::new();
    let mut unstable_dirs = Vec::new();
    let (mut slow_u, mut slow_s) = (f64::INFINITY, f64::INFINITY);
    for (idx, &mu) in eig.eigenvalues.iter().enumerate() {
        let w = eig.eigenvectors.column(idx);
        // BC row: ⟨v_i, ·⟩_G with v_i = G^{-1/2} w_i, i.e. row (G^{1/2} w_i)ᵀ
        let row = DVector::from_fn(n, |i, _| g[i].sqrt() * w[i]);
        if mu < -tol {
            unstable_dirs.push(DVector::from_fn(n, |i, _| gh_inv[i] * w[i]));
            slow_u = slow_u.min(-mu);
            comp_stable_rows.push(row);
        } else if mu > tol {
            slow_s = slow_s.min(mu);
            comp_unstable_rows.push(row);
        } else {
            comp_unstable_rows.push(row.clone());
            comp_stable_rows.push(row);
        }
    }
    let pack = |rows: &[DVector<f64>]| {
        let mut m = DMatrix::zeros(rows.len(), n);
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from(&r.transpose());
        }
        m
    };
    Ok(EndpointEig {
        complement_unstable: pack(&comp_unstable_rows),
        complement_stable: pack(&comp_stable_rows),
        unstable_dirs,
        slowest_unstable: slow_u,
        slowest_stable: slow_s,
    })
}

fn default_horizon(src: &EndpointEig, tgt: &EndpointEig) -> f64 {
    let rate = src.slowest_unstable.min(tgt.slowest_stable).max(1e-6);
    ((1e8_f64).ln() / rate).clamp(8.0, 5e4)
}

// ---------------------------------------------------------------------------
// Connecting orbits
// ---------------------------------------------------------------------------

/// Find the distinct connecting orbits from `source` to `target` (index gap
/// one) by multistart collocation. Deterministic given the seed.
pub fn find_connecting_orbits(
    model: &SpectralModel,
    pot: &Potential,
    source: &CriticalRecord,
    target: &CriticalRecord,
    params: &OrbitParams,
) -> Result<Vec<OrbitRecord>> {
    let (si, ti) = (
        source.rel_index.ok_or(Error::RecordNotReady(source.id))?,
        target.rel_index.ok_or(Error::RecordNotReady(target.id))?,
    );
    if si - ti != 1 {
        return Err(Error::IndexGapInvalid { source_index: si, target_index: ti });
    }
    if source.hessian_inertia.1 != 0 || target.hessian_inertia.1 != 0 {
        return Err(Error::RecordNotReady(if source.hessian_inertia.1 != 0 {
            source.id
        } else {
            target.id
        }));
    }
    if source.action <= target.action + 1e-12 {
        return Ok(Vec::new());
    }

    let src = endpoint_eig(model, pot, source)?;
    let tgt = endpoint_eig(model, pot, target)?;
    let horizon = params.horizon.unwrap_or_else(|| default_horizon(&src, &tgt));
    let times = chebyshev_times(-horizon, horizon, params.nodes);
    let anchor_node = times
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap();
    let anchor_target = 0.5 * (source.action + target.action);

    let field = |_t: f64, z: &DVector<f64>| -> Option<DVector<f64>> {
        flow_field(model, pot, &StatePoint::from_full(z)).ok().map(|v| v.to_full())
    };
    let g = metric_diagonal(model);
    let jacobian = |_t: f64, z: &DVector<f64>| -> Option<DMatrix<f64>> {
        let jet = action_jet(model, pot, &StatePoint::from_full(z)).ok()?;
        let n = z.len();
        Some(DMatrix::from_fn(n, n, |i, j| -jet.hess_euclid[(i, j)] / g[i]))
    };
    let anchor_value =
        |z: &DVector<f64>| action_value(model, pot, &StatePoint::from_full(z)).ok();
    let anchor_grad = |z: &DVector<f64>| {
        crate::functional::grad_euclid(model, pot, &StatePoint::from_full(z)).ok()
    };
    let problem = CollocationProblem {
        times: times.clone(),
        dim: model.full_dim(),
        field: &field,
        jacobian: &jacobian,
        left_rows: src.complement_unstable.clone(),
        left_point: source.point.to_full(),
        right_rows: tgt.complement_stable.clone(),
        right_point: target.point.to_full(),
        anchor: Some(Anchor {
            node: anchor_node,
            target: anchor_target,
            value: &anchor_value,
            grad: &anchor_grad,
        }),
    };

    let inits = initial_paths(model, source, target, &src, &times, params);
    let newton_tol = (params.tol * 1e-2).clamp(1e-13, 1e-9);
    let solutions: Vec<Option<(Vec<DVector<f64>>, f64, f64)>> = inits
        .into_par_iter()
        .map(|init| {
            problem
                .solve(init, newton_tol, 80)
                .map(|s| (s.nodes, s.residual, s.bc_defect))
        })
        .collect();

    let mut found: Vec<(Vec<DVector<f64>>, f64, f64)> = Vec::new();
    for sol in solutions.into_iter().flatten() {
        if !found.iter().any(|(o, _, _)| path_distance(o, &sol.0) < ORBIT_DEDUP_TOL) {
            found.push(sol);
        }
    }
    // symmetry completion: candidates are kept only if the residual verifies
    let mut completed: Vec<(Vec<DVector<f64>>, f64, f64)> = Vec::new();
    for (orbit, _, _) in found.clone() {
        for transform in [conjugate_path, negate_path] {
            let cand = transform(model, &orbit);
            if let Some((r, b)) = problem.verify(&cand, params.tol) {
                if !found
                    .iter()
                    .chain(&completed)
                    .any(|(o, _, _)| path_distance(o, &cand) < ORBIT_DEDUP_TOL)
                {
                    completed.push((cand, r, b));
                }
            }
        }
    }
    found.extend(completed);

    let mut orbits = Vec::new();
    for (nodes, residual, bc_defect) in found {
        if residual.max(bc_defect) > params.tol {
            continue;
        }
        let states: Vec<StatePoint> = nodes.iter().map(StatePoint::from_full).collect();
        let action_profile: Vec<f64> = states
            .iter()
            .map(|z| action_value(model, pot, z))
            .collect::<Result<_>>()?;
        if !action_profile.windows(2).all(|w| w[1] <= w[0] + 1e-9) {
            log::debug!("dropping orbit candidate with non-monotone action");
            continue;
        }
        orbits.push(OrbitRecord {
            source_id: source.id,
            target_id: target.id,
            times: times.clone(),
            nodes: states,
            residual,
            bc_defect,
            action_profile,
            phase_anchor: anchor_target,
        });
    }
    orbits.sort_by(|a, b| {
        for (x, y) in a.nodes[anchor_node]
            .coeffs
            .iter()
            .zip(b.nodes[anchor_node].coeffs.iter())
        {
            let c = x.total_cmp(y);
            if c != std::cmp::Ordering::Equal {
                return c;
            }
        }
        std::cmp::Ordering::Equal
    });
    Ok(orbits)
}

fn path_distance(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

fn conjugate_path(model: &SpectralModel, path: &[DVector<f64>]) -> Vec<DVector<f64>> {
    path.iter()
        .map(|z| model.conjugate(&StatePoint::from_full(z)).to_full())
        .collect()
}

fn negate_path(_model: &SpectralModel, path: &[DVector<f64>]) -> Vec<DVector<f64>> {
    path.iter()
        .map(|z| {
            let s = StatePoint::from_full(z);
            StatePoint::new(-&s.coeffs, s.multiplier).to_full()
        })
        .collect()
}

fn initial_paths(
    model: &SpectralModel,
    source: &CriticalRecord,
    target: &CriticalRecord,
    src: &EndpointEig,
    times: &[f64],
    params: &OrbitParams,
) -> Vec<Vec<DVector<f64>>> {
    use rand::Rng;
    use rand::SeedableRng;
    let z0 = source.point.to_full();
    let z1 = target.point.to_full();
    let dist = (&z1 - &z0).norm().max(1e-3);
    let horizon = times.last().unwrap().abs();
    let mut inits = Vec::new();

    // same-circle endpoints get rotational interpolations in both senses
    if model.complex_structure() {
        let d_s1 = orbit_distance(model, Symmetry::S1, &source.point, &target.point);
        if d_s1 < 0.1 * (1.0 + source.point.e_norm()) {
            for dir in [1.0, -1.0] {
                let path = times
                    .iter()
                    .map(|&t| {
                        let s = ramp((t / horizon + 1.0) / 2.0);
                        let mut z = model
                            .s1_rotate(&source.point, dir * std::f64::consts::PI * s)
                            .to_full();
                        let n = z.len() - 1;
                        z[n] = (1.0 - s) * z0[n] + s * z1[n];
                        z
                    })
                    .collect();
                inits.push(path);
            }
        }
    }

    for start in 0..params.n_starts {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(
            params.seed,
            0x0b17 ^ ((source.id as u64) << 32) ^ ((target.id as u64) << 16) ^ start as u64,
        ));
        let kick: DVector<f64> = if start == 0 || src.unstable_dirs.is_empty() {
            DVector::zeros(z0.len())
        } else {
            let mut k = DVector::zeros(z0.len());
            for dir in &src.unstable_dirs {
                k.axpy(rng.gen_range(-1.0..1.0), dir, 1.0);
            }
            let n = k.norm();
            if n > 1e-12 {
                k *= (0.1 + 0.3 * rng.gen_range(0.0..1.0)) * dist / n;
            }
            k
        };
        let path = times
            .iter()
            .map(|&t| {
                let s = ramp((t / horizon + 1.0) / 2.0);
                let bump = (std::f64::consts::PI * (t / horizon + 1.0) / 2.0).sin().powi(2);
                &z0 * (1.0 - s) + &z1 * s + &kick * bump
            })
            .collect();
        inits.push(path);
    }
    inits
}

fn ramp(t: f64) -> f64 {
    crate::potentials::smoothstep(t.clamp(0.0, 1.0)).0
}

// ---------------------------------------------------------------------------
// Boundedness diagnostics
// ---------------------------------------------------------------------------

/// Runtime check of the a-priori bounds along a trajectory or orbit.
#[derive(Debug, Clone, Serialize)]
pub struct PsDiagnostic {
    pub epsilon: f64,
    /// first-drop times of the gradient norm, per sample node
    pub tau_values: Vec<f64>,
    pub tau_bound: f64,
    pub lambda_bound: f64,
    pub u_bound: f64,
    pub max_abs_lambda: f64,
    pub max_u_h_norm: f64,
    pub bound_violated: bool,
}

/// τ(s) = first time ≥ s at which the H-gradient norm falls to ≤ ε, checked
/// against (b−a)/ε², with |λ| and ‖u‖_H checked against C + (b−a)/ε where
/// C = 1.1 · 2b / (starshape coercivity).
pub fn ps_monitor(
    model: &SpectralModel,
    pot: &Potential,
    times: &[f64],
    states: &[StatePoint],
    window: (f64, f64),
    epsilon: f64,
    starshape_coercivity: f64,
) -> Result<PsDiagnostic> {
    if epsilon <= 0.0 || starshape_coercivity <= 0.0 {
        return Err(Error::InvalidInput("ps_monitor needs positive epsilon and coercivity".into()));
    }
    let (a, b) = window;
    let gnorms: Vec<f64> = states
        .iter()
        .map(|z| grad_h_norm(model, pot, z))
        .collect::<Result<_>>()?;
    let mut tau_values = Vec::with_capacity(times.len());
    for i in 0..times.len() {
        let drop = (i..times.len()).find(|&j| gnorms[j] <= epsilon);
        let tau = match drop {
            Some(j) => times[j] - times[i],
            None => times[times.len() - 1] - times[i] + (b - a) / (epsilon * epsilon),
        };
        tau_values.push(tau);
    }
    let tau_bound = (b - a) / (epsilon * epsilon);
    let c_mon = 1.1 * 2.0 * b.abs() / starshape_coercivity;
    let lambda_bound = c_mon + (b - a) / epsilon;
    let u_bound = lambda_bound;
    let max_abs_lambda = states.iter().map(|z| z.multiplier.abs()).fold(0.0, f64::max);
    let max_u_h_norm = states
        .iter()
        .map(|z| model.h_norm_sq_u(&z.coeffs).sqrt())
        .fold(0.0, f64::max);
    let max_tau = tau_values.iter().copied().fold(0.0, f64::max);
    let bound_violated =
        max_tau > tau_bound + 1e-12 || max_abs_lambda > lambda_bound || max_u_h_norm > u_bound;
    Ok(PsDiagnostic {
        epsilon,
        tau_values,
        tau_bound,
        lambda_bound,
        u_bound,
        max_abs_lambda,
        max_u_h_norm,
        bound_violated,
    })
}

/// Raw orbit counts for every index-gap-one, action-decreasing pair.
///
/// Returns the count map (keyed by record ids) and the accepted orbits.
pub fn orbit_counts(
    model: &SpectralModel,
    pot: &Potential,
    records: &[CriticalRecord],
    params: &OrbitParams,
) -> Result<(BTreeMap<(usize, usize), usize>, Vec<OrbitRecord>)> {
    let mut counts = BTreeMap::new();
    let mut all_orbits = Vec::new();
    for source in records {
        for target in records {
            let (Some(si), Some(ti)) = (source.rel_index, target.rel_index) else {
                return Err(Error::RecordNotReady(source.id));
            };
            if si - ti != 1 || source.action <= target.action + 1e-10 {
                continue;
            }
            let orbits = find_connecting_orbits(model, pot, source, target, params)?;
            counts.insert((source.id, target.id), orbits.len());
            all_orbits.extend(orbits);
        }
    }
    Ok((counts, all_orbits))
}

//! Critical points and circles of the action in an action window.
//!
//! The critical equations are Lu = λ∇F(u), F(u) = 0, solved as a square system
//! by damped Newton from seeded multistart points. New solutions are deflated
//! against the full symmetry orbits of the ones already found, so orbits (not
//! points) are the deduplication unit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{action_jet, action_value, metric_diagonal};
use crate::grading;
use crate::potentials::{
    perturb_generic, potential_jet, potential_value_grad, radial_root, sample_unit_direction,
    Potential, Symmetry,
};
use crate::spectrum::{SpectralModel, StatePoint};

/// Orbits closer than this (after symmetry alignment) are one solution.
pub const DEDUP_RADIUS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrbitType {
    Isolated,
    Circle,
    Pair,
}

/// A located critical point, circle representative, or pair member.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalRecord {
    pub id: usize,
    pub point: StatePoint,
    pub action: f64,
    /// E-norm of (Lu − λ∇F(u), F(u)).
    pub residual: f64,
    pub hessian_inertia: (usize, usize, usize),
    pub rel_index: Option<i32>,
    pub orbit_type: OrbitType,
    pub orbit_id: usize,
    /// After symmetry breaking: ids of (min, max) children in the broken set.
    pub broken_children: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchParams {
    pub window: (f64, f64),
    pub n_starts: usize,
    pub seed: u64,
    pub tol: f64,
}

impl SearchParams {
    pub fn new(window: (f64, f64), n_starts: usize, seed: u64, tol: f64) -> Self {
        Self { window, n_starts, seed, tol }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// Residual of the critical equations, (λ_i a_i − λ g_i; F(u)).
fn residual_vec(model: &SpectralModel, pot: &Potential, z: &StatePoint) -> Result<DVector<f64>> {
    let (f, g) = potential_value_grad(pot, model, &z.coeffs)?;
    let n = model.real_dim();
    let slot = model.slot_eigenvalues();
    let mut r = DVector::zeros(n + 1);
    for i in 0..n {
        r[i] = slot[i] * z.coeffs[i] - z.multiplier * g[i];
    }
    r[n] = f;
    Ok(r)
}

/// E-norm of the critical-equation residual at z.
pub fn critical_residual(model: &SpectralModel, pot: &Potential, z: &StatePoint) -> Result<f64> {
    Ok(residual_vec(model, pot, z)?.norm())
}

fn residual_jacobian(
    model: &SpectralModel,
    pot: &Potential,
    z: &StatePoint,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let jet = potential_jet(pot, model, &z.coeffs)?;
    let n = model.real_dim();
    let slot = model.slot_eigenvalues();
    let lam = z.multiplier;
    let mut r = DVector::zeros(n + 1);
    let mut j = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        r[i] = slot[i] * z.coeffs[i] - lam * jet.grad[i];
        for k in 0..n {
            j[(i, k)] = -lam * jet.hess[(i, k)];
        }
        j[(i, i)] += slot[i];
        j[(i, n)] = -jet.grad[i];
        j[(n, i)] = jet.grad[i];
    }
    r[n] = jet.value;
    Ok((r, j))
}

/// Damped Newton on the critical equations, with a Levenberg-Marquardt
/// fallback near singular Jacobians (critical circles).
pub(crate) fn newton_refine(
    model: &SpectralModel,
    pot: &Potential,
    z0: &StatePoint,
    tol: f64,
    max_iter: usize,
) -> Option<(StatePoint, f64)> {
    let mut z = z0.to_full();
    let n = model.real_dim();
    for _ in 0..max_iter {
        let state = StatePoint::from_full(&z);
        let (r, j) = residual_jacobian(model, pot, &state).ok()?;
        let rn = r.norm();
        if rn <= tol {
            return Some((state, rn));
        }
        if !rn.is_finite() || state.e_norm() > 1e8 {
            return None;
        }
        let mut step = j.clone().lu().solve(&(-&r));
        let bad = |s: &DVector<f64>| !s.iter().all(|v| v.is_finite()) || s.norm() > 1e5 * (1.0 + z.norm());
        if step.as_ref().map_or(true, |s| bad(s)) {
            // LM step: (JᵀJ + μI) δ = −Jᵀ r
            let jt = j.transpose();
            let mut mu = 1e-10 + 1e-4 * rn;
            step = None;
            for _ in 0..8 {
                let mut a = &jt * &j;
                for i in 0..=n {
                    a[(i, i)] += mu;
                }
                if let Some(s) = a.lu().solve(&(-(&jt * &r))) {
                    if !bad(&s) {
                        step = Some(s);
                        break;
                    }
                }
                mu *= 100.0;
            }
        }
        let step = step?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &z + &step * alpha;
            let cand_state = StatePoint::from_full(&cand);
            if let Ok(rc) = residual_vec(model, pot, &cand_state) {
                if rc.norm() <= (1.0 - 1e-4 * alpha) * rn {
                    z = cand;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            log::debug!("newton stagnation at residual {rn:.3e}");
            return None;
        }
    }
    None
}

/// E-distance between the symmetry orbits of two points.
pub(crate) fn orbit_distance(
    model: &SpectralModel,
    symmetry: Symmetry,
    a: &StatePoint,
    b: &StatePoint,
) -> f64 {
    let dl = a.multiplier - b.multiplier;
    match symmetry {
        Symmetry::S1 if model.complex_structure() => {
            let (mut ip_c, mut ip_s) = (0.0, 0.0);
            for i in 0..model.n_labels() {
                let (xa, ya) = (a.coeffs[2 * i], a.coeffs[2 * i + 1]);
                let (xb, yb) = (b.coeffs[2 * i], b.coeffs[2 * i + 1]);
                ip_c += xa * xb + ya * yb;
                ip_s += xa * yb - ya * xb;
            }
            let best = (ip_c * ip_c + ip_s * ip_s).sqrt();
            let d2 = a.e_norm_sq() + b.e_norm_sq() - 2.0 * best + dl * dl;
            d2.max(0.0).sqrt()
        }
        Symmetry::Z2 => {
            let plus = (&a.coeffs - &b.coeffs).norm_squared();
            let minus = (&a.coeffs + &b.coeffs).norm_squared();
            (plus.min(minus) + dl * dl).sqrt()
        }
        _ => ((&a.coeffs - &b.coeffs).norm_squared() + dl * dl).sqrt(),
    }
}

/// Classify a converged solution and compute its Hessian inertia.
fn classify(
    model: &SpectralModel,
    pot: &Potential,
    z: &StatePoint,
) -> Result<((usize, usize, usize), OrbitType)> {
    let jet = action_jet(model, pot, z)?;
    let inertia = grading::inertia(&jet.hess_euclid);
    let orbit_type = if inertia.1 == 1
        && pot.symmetry() == Symmetry::S1
        && model.complex_structure()
        && zero_mode_is_tangent(model, &jet.hess_euclid, z)
    {
        OrbitType::Circle
    } else if pot.symmetry() == Symmetry::Z2 {
        OrbitType::Pair
    } else {
        OrbitType::Isolated
    };
    Ok((inertia, orbit_type))
}

fn zero_mode_is_tangent(model: &SpectralModel, hess: &DMatrix<f64>, z: &StatePoint) -> bool {
    let g = metric_diagonal(model);
    let n = hess.nrows();
    let ghalf_inv = DVector::from_fn(n, |i, _| 1.0 / g[i].sqrt());
    let s = DMatrix::from_fn(n, n, |i, j| ghalf_inv[i] * hess[(i, j)] * ghalf_inv[j]);
    let eig = SymmetricEigen::new(s);
    let mut kmin = 0;
    for (k, v) in eig.eigenvalues.iter().enumerate() {
        if v.abs() < eig.eigenvalues[kmin].abs() {
            kmin = k;
        }
    }
    let w = eig.eigenvectors.column(kmin);
    let v = DVector::from_fn(n, |i, _| ghalf_inv[i] * w[i]);
    let tangent = model.s1_tangent(z).to_full();
    let tn = tangent.norm();
    if tn < 1e-12 {
        return false;
    }
    let cosine = v.dot(&tangent).abs() / (v.norm() * tn);
    cosine >= 0.99
}

/// Rotate a circle representative to phase zero of its dominant plane;
/// flip a pair representative so its first significant coefficient is positive.
fn canonicalize(model: &SpectralModel, orbit_type: OrbitType, z: &StatePoint) -> StatePoint {
    match orbit_type {
        OrbitType::Circle => {
            let mut best = (0usize, -1.0);
            for i in 0..model.n_labels() {
                let s = model.label_slots(i);
                let q = z.coeffs[s.start] * z.coeffs[s.start]
                    + z.coeffs[s.start + 1] * z.coeffs[s.start + 1];
                if q > best.1 {
                    best = (i, q);
                }
            }
            let s = model.label_slots(best.0);
            let theta = z.coeffs[s.start + 1].atan2(z.coeffs[s.start]);
            model.s1_rotate(z, -theta)
        }
        OrbitType::Pair => {
            for i in 0..z.coeffs.len() {
                if z.coeffs[i].abs() > 1e-8 {
                    if z.coeffs[i] < 0.0 {
                        return StatePoint::new(-&z.coeffs, z.multiplier);
                    }
                    break;
                }
            }
            z.clone()
        }
        OrbitType::Isolated => z.clone(),
    }
}

/// Locate all critical records with action in the window by deflated
/// multistart Newton. Deterministic given the seed.
pub fn find_critical_points(
    model: &SpectralModel,
    pot: &Potential,
    params: &SearchParams,
) -> Result<Vec<CriticalRecord>> {
    find_critical_points_seeded(model, pot, params, &[])
}

/// Same, with extra explicit initial guesses tried before the random starts.
pub fn find_critical_points_seeded(
    model: &SpectralModel,
    pot: &Potential,
    params: &SearchParams,
    extra_starts: &[StatePoint],
) -> Result<Vec<CriticalRecord>> {
    use rand::SeedableRng;
    let (a, b) = params.window;
    if a >= b {
        return Err(Error::InvalidInput("window must satisfy a < b".into()));
    }
    if params.n_starts < 1 {
        return Err(Error::InvalidInput("n_starts must be >= 1".into()));
    }
    if params.tol <= 0.0 {
        return Err(Error::InvalidInput("tolerance must be > 0".into()));
    }

    let starts: Vec<Option<StatePoint>> = (0..params.n_starts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(params.seed, i as u64));
            sample_start(model, pot, &mut rng, (a, b))
        })
        .collect();

    let solutions: Vec<Option<(StatePoint, f64)>> = extra_starts
        .par_iter()
        .map(|z| newton_refine(model, pot, z, params.tol, 150))
        .chain(starts.par_iter().map(|s| {
            s.as_ref().and_then(|z| newton_refine(model, pot, z, params.tol, 150))
        }))
        .collect();

    let mut kept: Vec<CriticalRecord> = Vec::new();
    let mut n_stagnated = 0usize;
    for sol in solutions {
        let Some((z, residual)) = sol else {
            n_stagnated += 1;
            continue;
        };
        let action = action_value(model, pot, &z)?;
        if action < a - 1e-12 || action > b + 1e-12 {
            continue;
        }
        if kept
            .iter()
            .any(|r| orbit_distance(model, pot.symmetry(), &r.point, &z) < DEDUP_RADIUS)
        {
            continue;
        }
        let (inertia, orbit_type) = classify(model, pot, &z)?;
        let point = canonicalize(model, orbit_type, &z);
        kept.push(CriticalRecord {
            id: 0,
            point,
            action,
            residual,
            hessian_inertia: inertia,
            rel_index: None,
            orbit_type,
            orbit_id: 0,
            broken_children: None,
        });
    }
    if n_stagnated > 0 {
        log::debug!("{n_stagnated} Newton starts stagnated");
    }
    if kept.is_empty() {
        log::warn!("window [{a}, {b}] is empty: no critical points found");
    }

    // materialize Z2 partners
    if pot.symmetry() == Symmetry::Z2 {
        let mut partners = Vec::new();
        for rec in &kept {
            let mirrored = StatePoint::new(-&rec.point.coeffs, rec.point.multiplier);
            if orbit_distance(model, Symmetry::None, &rec.point, &mirrored) > DEDUP_RADIUS {
                let residual = critical_residual(model, pot, &mirrored)?;
                partners.push(CriticalRecord {
                    id: 0,
                    point: mirrored,
                    action: rec.action,
                    residual,
                    hessian_inertia: rec.hessian_inertia,
                    rel_index: None,
                    orbit_type: OrbitType::Pair,
                    orbit_id: 0,
                    broken_children: None,
                });
            }
        }
        kept.extend(partners);
    }

    sort_and_id(model, pot.symmetry(), &mut kept);
    Ok(kept)
}

fn sort_and_id(model: &SpectralModel, symmetry: Symmetry, records: &mut Vec<CriticalRecord>) {
    records.sort_by(|p, q| {
        p.action
            .total_cmp(&q.action)
            .then(p.point.multiplier.total_cmp(&q.point.multiplier))
            .then_with(|| {
                for (x, y) in p.point.coeffs.iter().zip(q.point.coeffs.iter()) {
                    let c = x.total_cmp(y);
                    if c != std::cmp::Ordering::Equal {
                        return c;
                    }
                }
                std::cmp::Ordering::Equal
            })
    });
    for (i, r) in records.iter_mut().enumerate() {
        r.id = i;
        r.orbit_id = i;
    }
    // group symmetry partners under the representative's id
    let n = records.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if records[j].orbit_id != records[j].id {
                continue;
            }
            let d = orbit_distance(model, symmetry, &records[i].point, &records[j].point);
            if d < DEDUP_RADIUS {
                records[j].orbit_id = records[i].orbit_id;
            }
        }
    }
}

fn sample_start(
    model: &SpectralModel,
    pot: &Potential,
    rng: &mut rand_chacha::ChaCha8Rng,
    window: (f64, f64),
) -> Option<StatePoint> {
    use rand::Rng;
    let dir = sample_unit_direction(rng, model.real_dim());
    let r = radial_root(pot, model, &dir, 0).ok()?;
    let u = &dir * r;
    let (_, g) = potential_value_grad(pot, model, &u).ok()?;
    let radial = g.dot(&u);
    if radial.abs() < 1e-10 {
        return None;
    }
    // |λ| ~ 2|I| / ⟨∇F(u),u⟩ links the multiplier to the target action level.
    let action: f64 = rng.gen_range(window.0..window.1);
    let lam = 2.0 * action / radial;
    Some(StatePoint::new(u, lam))
}

/// If any record carries unexpected degeneracy, retry with escalating generic
/// perturbations that preserve the declared symmetry class.
pub fn ensure_morse(
    model: &SpectralModel,
    pot: &Potential,
    records: &[CriticalRecord],
    params: &SearchParams,
) -> Result<(Potential, Vec<CriticalRecord>)> {
    if records.iter().all(record_degeneracy_ok) {
        return Ok((pot.clone(), records.to_vec()));
    }
    for (attempt, strength) in [1e-8, 1e-6, 1e-4].into_iter().enumerate() {
        let perturbed = perturb_generic(pot, model, strength, mix_seed(params.seed, 77 + attempt as u64))?;
        let found = find_critical_points(model, &perturbed, params)?;
        if !found.is_empty() && found.iter().all(record_degeneracy_ok) {
            return Ok((perturbed, found));
        }
        log::debug!("ensure_morse attempt {attempt} at strength {strength:.1e} still degenerate");
    }
    Err(Error::PersistentDegeneracy(3))
}

fn record_degeneracy_ok(rec: &CriticalRecord) -> bool {
    let allowed = if rec.orbit_type == OrbitType::Circle { 1 } else { 0 };
    rec.hessian_inertia.1 <= allowed
}

/// Break every circle in `circles`, re-solve on the perturbed potential, and
/// link each circle to its (min, max) children in the returned Morse set.
pub fn break_all_circles(
    model: &SpectralModel,
    pot: &Potential,
    circles: &[CriticalRecord],
    strength: f64,
    params: &SearchParams,
) -> Result<(Potential, Vec<CriticalRecord>, Vec<CriticalRecord>)> {
    if pot.symmetry() != Symmetry::S1 {
        return Err(Error::InvalidInput("symmetry breaking applies to S1-invariant potentials".into()));
    }
    let mut seeds = Vec::new();
    let broken_pot = {
        let mut staged = pot.clone();
        for circle in circles {
            if circle.orbit_type != OrbitType::Circle {
                return Err(Error::NotACircle);
            }
            staged = crate::potentials::break_symmetry_unchecked(&staged, model, circle, strength)?;
        }
        staged
    };
    for circle in circles {
        seeds.push(circle.point.clone()); // phase 0: the max
        seeds.push(model.s1_rotate(&circle.point, std::f64::consts::PI)); // the min
    }
    let morse = find_critical_points_seeded(model, &broken_pot, params, &seeds)?;

    // match children to circles
    let mut circles_out = circles.to_vec();
    for circle in circles_out.iter_mut() {
        let mut matched: Vec<(f64, usize)> = morse
            .iter()
            .map(|r| (orbit_distance(model, Symmetry::S1, &circle.point, &r.point), r.id))
            .filter(|(d, _)| *d < 0.25 * (1.0 + circle.point.e_norm()))
            .collect();
        matched.sort_by(|a, b| a.0.total_cmp(&b.0));
        matched.truncate(2);
        if matched.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "circle {} broke into {} records instead of 2",
                circle.id,
                matched.len()
            )));
        }
        let (ra, rb) = (matched[0].1, matched[1].1);
        let (amin, amax) = if morse[ra].action <= morse[rb].action { (ra, rb) } else { (rb, ra) };
        circle.broken_children = Some((amin, amax));
    }
    Ok((broken_pot, morse, circles_out))
}

//! Stability under change of potential: continuation maps between the
//! complexes of two starshaped potentials.
//!
//! A homotopy F_t = (1−η(t))F₁ + η(t)F₂ with a smoothstep ramp η drives the
//! non-autonomous flow z' = −∇I_t(z). Index-preserving counts of its
//! connecting orbits assemble a chain map Φ; composing the maps of a schedule
//! with per-step sup-difference ≤ δ transports homology between the ends.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::collocation::{chebyshev_times, CollocationProblem};
use crate::complexes::{BitMatrix, ChainComplexData, HomologyTable};
use crate::critical::{mix_seed, CriticalRecord, SearchParams};
use crate::error::{Error, Result};
use crate::functional::metric_diagonal;
use crate::orbits::OrbitParams;
use crate::potentials::{
    check_starshape, potential_value, potential_value_grad, sample_unit_direction, smoothstep,
    Potential,
};
use crate::spectrum::{SpectralModel, StatePoint};

/// Sampled |F₁ − F₂| beyond this cap counts as unbounded.
const DIFF_CAP: f64 = 1e6;

/// Smooth ramp: 0 for t ≤ 0, 1 for t ≥ 1.
pub fn eta(t: f64) -> f64 {
    smoothstep(t.clamp(0.0, 1.0)).0
}

#[derive(Debug, Clone)]
pub struct HomotopySchedule {
    pub f1: Potential,
    pub f2: Potential,
    pub delta: f64,
    /// sup of |F₁ − F₂| over the sampled region
    pub sup_difference: f64,
    /// blend potentials at s_0 = 0 < s_1 < … < s_K = 1 (length K+1)
    pub steps: Vec<Potential>,
}

/// Build the minimal uniform partition with per-step sup-difference ≤ delta,
/// sampling 10⁴ points in a ball holding both surfaces.
pub fn make_schedule(
    model: &SpectralModel,
    f1: &Potential,
    f2: &Potential,
    delta: f64,
    sample_seed: u64,
) -> Result<HomotopySchedule> {
    use rand::Rng;
    use rand::SeedableRng;
    if delta <= 0.0 {
        return Err(Error::InvalidInput("schedule delta must be > 0".into()));
    }
    let rep1 = check_starshape(f1, model, 64, mix_seed(sample_seed, 1))?;
    let rep2 = check_starshape(f2, model, 64, mix_seed(sample_seed, 2))?;
    if !rep1.passed || !rep2.passed {
        return Err(Error::InvalidInput("both potentials must pass the starshape check".into()));
    }
    let radius = 2.0 * rep1.max_radius.max(rep2.max_radius);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sample_seed);
    let mut sup: f64 = 0.0;
    for _ in 0..10_000 {
        let dir = sample_unit_direction(&mut rng, model.real_dim());
        let u = dir * (radius * rng.gen_range(0.0..1.0f64));
        let d = (potential_value(f1, model, &u)? - potential_value(f2, model, &u)?).abs();
        sup = sup.max(d);
    }
    if sup > DIFF_CAP {
        return Err(Error::UnboundedDifference(sup));
    }
    let k = ((sup / delta).ceil() as usize).max(1);
    let steps = (0..=k)
        .map(|j| Potential::blend(f1, f2, j as f64 / k as f64))
        .collect();
    Ok(HomotopySchedule { f1: f1.clone(), f2: f2.clone(), delta, sup_difference: sup, steps })
}

/// Index-preserving chain map from the complex of one potential to the next.
#[derive(Debug, Clone, Serialize)]
pub struct ContinuationMap {
    /// Φ_k as a (dim C²_k × dim C¹_k) bit matrix
    pub phi: BTreeMap<i32, BitMatrix>,
    pub dim_from: BTreeMap<i32, usize>,
    pub dim_to: BTreeMap<i32, usize>,
}

impl ContinuationMap {
    pub fn identity(cc: &ChainComplexData) -> Self {
        let mut phi = BTreeMap::new();
        let mut dims = BTreeMap::new();
        for (&k, gens) in &cc.generators {
            phi.insert(k, BitMatrix::identity(gens.len()));
            dims.insert(k, gens.len());
        }
        Self { phi, dim_from: dims.clone(), dim_to: dims }
    }

    pub fn phi_or_zero(&self, degree: i32) -> BitMatrix {
        match self.phi.get(&degree) {
            Some(m) => m.clone(),
            None => BitMatrix::zeros(
                self.dim_to.get(&degree).copied().unwrap_or(0),
                self.dim_from.get(&degree).copied().unwrap_or(0),
            ),
        }
    }

    /// other ∘ self, degreewise matrix product over GF(2).
    pub fn then(&self, other: &ContinuationMap) -> ContinuationMap {
        let mut phi = BTreeMap::new();
        let degrees: std::collections::BTreeSet<i32> =
            self.phi.keys().chain(other.phi.keys()).copied().collect();
        for &k in &degrees {
            let a = other.phi_or_zero(k);
            let b = self.phi_or_zero(k);
            if a.rows() > 0 && b.cols() > 0 && a.cols() == b.rows() {
                phi.insert(k, a.mul(&b));
            }
        }
        ContinuationMap { phi, dim_from: self.dim_from.clone(), dim_to: other.dim_to.clone() }
    }
}

/// Count orbits of the non-autonomous flow from a critical point of the first
/// potential to an equal-index critical point of the second.
pub fn find_nonautonomous_orbits(
    model: &SpectralModel,
    pot_from: &Potential,
    pot_to: &Potential,
    source: &CriticalRecord,
    target: &CriticalRecord,
    params: &OrbitParams,
) -> Result<usize> {
    let (si, ti) = (
        source.rel_index.ok_or(Error::RecordNotReady(source.id))?,
        target.rel_index.ok_or(Error::RecordNotReady(target.id))?,
    );
    if si != ti {
        return Err(Error::IndexMismatch { source_index: si, target_index: ti });
    }
    if source.hessian_inertia.1 != 0 || target.hessian_inertia.1 != 0 {
        return Err(Error::RecordNotReady(source.id));
    }

    let src = endpoint_rows(model, pot_from, source, true)?;
    let tgt = endpoint_rows(model, pot_to, target, false)?;
    let t_left = ((1e8_f64).ln() / src.rate.max(1e-6)).clamp(8.0, 5e4);
    let t_right = ((1e8_f64).ln() / tgt.rate.max(1e-6)).clamp(8.0, 5e4);
    let times = chebyshev_times(-t_left, 1.0 + t_right, params.nodes);

    let g = metric_diagonal(model);
    let field = |t: f64, z: &DVector<f64>| blended_flow(model, pot_from, pot_to, eta(t), z);
    let jacobian =
        |t: f64, z: &DVector<f64>| blended_jacobian(model, pot_from, pot_to, eta(t), z, &g);
    let problem = CollocationProblem {
        times: times.clone(),
        dim: model.full_dim(),
        field: &field,
        jacobian: &jacobian,
        left_rows: src.rows.clone(),
        left_point: source.point.to_full(),
        right_rows: tgt.rows.clone(),
        right_point: target.point.to_full(),
        anchor: None,
    };

    let z0 = source.point.to_full();
    let z1 = target.point.to_full();
    let dist = (&z1 - &z0).norm().max(1e-3);
    let span = times[times.len() - 1] - times[0];
    let inits: Vec<Vec<DVector<f64>>> = (0..params.n_starts)
        .map(|start| {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(
                params.seed,
                0xc047 ^ ((source.id as u64) << 24) ^ ((target.id as u64) << 8) ^ start as u64,
            ));
            let mut kick = DVector::zeros(z0.len());
            if start > 0 {
                for dir in &src.unstable_dirs {
                    kick.axpy(rng.gen_range(-1.0..1.0), dir, 1.0);
                }
                let n = kick.norm();
                if n > 1e-12 {
                    kick *= 0.2 * dist / n;
                }
            }
            times
                .iter()
                .map(|&t| {
                    let s = smoothstep(((t - times[0]) / span).clamp(0.0, 1.0)).0;
                    let bump = (std::f64::consts::PI * (t - times[0]) / span).sin().powi(2);
                    &z0 * (1.0 - s) + &z1 * s + &kick * bump
                })
                .collect()
        })
        .collect();

    let newton_tol = (params.tol * 1e-2).clamp(1e-13, 1e-9);
    let solutions: Vec<Option<Vec<DVector<f64>>>> = inits
        .into_par_iter()
        .map(|init| problem.solve(init, newton_tol, 80).map(|s| s.nodes))
        .collect();
    let mut found: Vec<Vec<DVector<f64>>> = Vec::new();
    for sol in solutions.into_iter().flatten() {
        if !found.iter().any(|o| path_distance(o, &sol) < crate::orbits::ORBIT_DEDUP_TOL) {
            found.push(sol);
        }
    }
    Ok(found.len())
}

struct EndpointRows {
    rows: DMatrix<f64>,
    unstable_dirs: Vec<DVector<f64>>,
    rate: f64,
}

fn endpoint_rows(
    model: &SpectralModel,
    pot: &Potential,
    rec: &CriticalRecord,
    left: bool,
) -> Result<EndpointRows> {
    use nalgebra::SymmetricEigen;
    let jet = crate::functional::action_jet(model, pot, &rec.point)?;
    let g = metric_diagonal(model);
    let n = g.len();
    let gh_inv = DVector::from_fn(n, |i, _| 1.0 / g[i].sqrt());
    let s = DMatrix::from_fn(n, n, |i, j| gh_inv[i] * jet.hess_euclid[(i, j)] * gh_inv[j]);
    let eig = SymmetricEigen::new(s);
    let tol = 1e-10 * eig.eigenvalues.amax().max(1.0);
    let mut rows = Vec::new();
    let mut unstable_dirs = Vec::new();
    let mut rate = f64::INFINITY;
    for (idx, &mu) in eig.eigenvalues.iter().enumerate() {
        let w = eig.eigenvectors.column(idx);
        let row = DVector::from_fn(n, |i, _| g[i].sqrt() * w[i]);
        if mu < -tol {
            unstable_dirs.push(DVector::from_fn(n, |i, _| gh_inv[i] * w[i]));
            if left {
                rate = rate.min(-mu);
            } else {
                rows.push(row);
            }
        } else if mu > tol {
            if left {
                rows.push(row);
            } else {
                rate = rate.min(mu);
            }
        } else {
            rows.push(row);
        }
    }
    let mut m = DMatrix::zeros(rows.len(), n);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from(&r.transpose());
    }
    Ok(EndpointRows { rows: m, unstable_dirs, rate })
}

fn path_distance(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn blended_flow(
    model: &SpectralModel,
    pa: &Potential,
    pb: &Potential,
    w: f64,
    z: &DVector<f64>,
) -> Option<DVector<f64>> {
    let state = StatePoint::from_full(z);
    let (fa, ga) = potential_value_grad(pa, model, &state.coeffs).ok()?;
    let (fb, gb) = potential_value_grad(pb, model, &state.coeffs).ok()?;
    let n = model.real_dim();
    let slot = model.slot_eigenvalues();
    let mut out = DVector::zeros(n + 1);
    for i in 0..n {
        let gi = (1.0 - w) * ga[i] + w * gb[i];
        out[i] = -slot[i].signum() * state.coeffs[i] + state.multiplier * gi / slot[i].abs();
    }
    out[n] = (1.0 - w) * fa + w * fb;
    Some(out)
}

fn blended_jacobian(
    model: &SpectralModel,
    pa: &Potential,
    pb: &Potential,
    w: f64,
    z: &DVector<f64>,
    g: &DVector<f64>,
) -> Option<DMatrix<f64>> {
    let state = StatePoint::from_full(z);
    let ja = crate::potentials::potential_jet(pa, model, &state.coeffs).ok()?;
    let jb = crate::potentials::potential_jet(pb, model, &state.coeffs).ok()?;
    let n = model.real_dim();
    let slot = model.slot_eigenvalues();
    let lam = state.multiplier;
    let mut a = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = -lam * ((1.0 - w) * ja.hess[(i, j)] + w * jb.hess[(i, j)]);
        }
        a[(i, i)] += slot[i];
        let gi = (1.0 - w) * ja.grad[i] + w * jb.grad[i];
        a[(i, n)] = -gi;
        a[(n, i)] = -gi;
    }
    Some(DMatrix::from_fn(n + 1, n + 1, |i, j| -a[(i, j)] / g[i]))
}

/// Assemble Φ from per-pair counts and verify the chain identity against the
/// two complexes.
pub fn build_phi(
    cc_from: &ChainComplexData,
    cc_to: &ChainComplexData,
    counts: &BTreeMap<(usize, usize), usize>,
) -> Result<ContinuationMap> {
    let mut phi = BTreeMap::new();
    let mut dim_from = BTreeMap::new();
    let mut dim_to = BTreeMap::new();
    for (&k, gens_from) in &cc_from.generators {
        dim_from.insert(k, gens_from.len());
    }
    for (&k, gens_to) in &cc_to.generators {
        dim_to.insert(k, gens_to.len());
    }
    for (&k, gens_from) in &cc_from.generators {
        let Some(gens_to) = cc_to.generators.get(&k) else { continue };
        let mut m = BitMatrix::zeros(gens_to.len(), gens_from.len());
        for (col, &s) in gens_from.iter().enumerate() {
            for (row, &t) in gens_to.iter().enumerate() {
                if counts.get(&(s, t)).is_some_and(|c| c % 2 == 1) {
                    m.set(row, col, true);
                }
            }
        }
        phi.insert(k, m);
    }
    let map = ContinuationMap { phi, dim_from, dim_to };
    verify_chain_map(&map, cc_from, cc_to)?;
    Ok(map)
}

/// ∂² ∘ Φ = Φ ∘ ∂¹ over GF(2) in every degree.
pub fn verify_chain_map(
    map: &ContinuationMap,
    cc_from: &ChainComplexData,
    cc_to: &ChainComplexData,
) -> Result<()> {
    let degrees: std::collections::BTreeSet<i32> = cc_from
        .generators
        .keys()
        .chain(cc_to.generators.keys())
        .copied()
        .collect();
    for &k in &degrees {
        let lhs = cc_to.boundary_or_zero(k).mul(&map.phi_or_zero(k));
        let rhs = map.phi_or_zero(k - 1).mul(&cc_from.boundary_or_zero(k));
        if lhs != rhs {
            return Err(Error::ChainMapViolation { degree: k });
        }
    }
    Ok(())
}

/// Is the induced map on homology bijective in the given degree?
pub fn induced_bijective_in_degree(
    map: &ContinuationMap,
    cc_from: &ChainComplexData,
    cc_to: &ChainComplexData,
    k: i32,
) -> bool {
    let n1 = cc_from.dim(k);
    let n2 = cc_to.dim(k);
    let d1_k = cc_from.boundary_or_zero(k);
    let d1_k1 = cc_from.boundary_or_zero(k + 1);
    let d2_k = cc_to.boundary_or_zero(k);
    let d2_k1 = cc_to.boundary_or_zero(k + 1);
    let r1k = d1_k.rank();
    let r1k1 = d1_k1.rank();
    let h1 = n1 - r1k - r1k1;
    let h2 = n2 - d2_k.rank() - d2_k1.rank();
    if h1 != h2 {
        return false;
    }
    if h1 == 0 {
        return true;
    }
    let phi_k = map.phi_or_zero(k);
    let kernel = d1_k.kernel_basis();
    // rows: image basis of ∂²_{k+1}, then Φ(kernel of ∂¹_k)
    let n_b = d2_k1.cols();
    let mut stack = BitMatrix::zeros(n_b + kernel.len(), n2.max(1));
    for j in 0..n_b {
        for i in 0..n2 {
            if d2_k1.get(i, j) {
                stack.set(j, i, true);
            }
        }
    }
    let mut b_only = BitMatrix::zeros(n_b, n2.max(1));
    for j in 0..n_b {
        for i in 0..n2 {
            if d2_k1.get(i, j) {
                b_only.set(j, i, true);
            }
        }
    }
    for (r, vec) in kernel.iter().enumerate() {
        let img = phi_k.mul_vec(vec);
        for i in 0..n2 {
            if (img[i / 64] >> (i % 64)) & 1 == 1 {
                stack.set(n_b + r, i, true);
            }
        }
    }
    let r_b = b_only.rank();
    let r_mb = stack.rank();
    let induced_rank = r_mb - r_b;
    let ker_dim = n1 - r1k;
    induced_rank == h2 && ker_dim - induced_rank == r1k1
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationStepReport {
    pub step: usize,
    pub n_pairs: usize,
    pub chain_identity_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationOutcome {
    pub n_steps: usize,
    pub sup_difference: f64,
    pub steps: Vec<ContinuationStepReport>,
    pub composed: ContinuationMap,
    pub induced_bijective: bool,
    pub per_degree: Vec<(i32, bool)>,
    pub homology_source: HomologyTable,
    pub homology_target: HomologyTable,
}

/// Full continuation run: schedule, per-step complexes, per-step chain maps,
/// composition, and the induced-isomorphism check on interior degrees.
pub fn run_continuation(
    model: &SpectralModel,
    f1: &Potential,
    f2: &Potential,
    delta: f64,
    search: &SearchParams,
    orbit: &OrbitParams,
    sample_seed: u64,
) -> Result<ContinuationOutcome> {
    let schedule = make_schedule(model, f1, f2, delta, sample_seed)?;
    let runs: Vec<crate::pipeline::PlainRun> = schedule
        .steps
        .iter()
        .map(|pot| crate::pipeline::plain_run(model, pot, search, orbit, 0.05))
        .collect::<Result<_>>()?;

    let mut steps = Vec::new();
    let mut composed: Option<ContinuationMap> = None;
    for j in 0..runs.len() - 1 {
        let from = &runs[j];
        let to = &runs[j + 1];
        let mut counts = BTreeMap::new();
        for s in &from.records {
            for t in &to.records {
                if s.rel_index != t.rel_index {
                    continue;
                }
                let n = find_nonautonomous_orbits(
                    model,
                    &from.potential,
                    &to.potential,
                    s,
                    t,
                    orbit,
                )?;
                counts.insert((s.id, t.id), n);
            }
        }
        let phi = build_phi(&from.complex, &to.complex, &counts)?;
        steps.push(ContinuationStepReport {
            step: j,
            n_pairs: counts.len(),
            chain_identity_ok: true,
        });
        composed = Some(match composed {
            None => phi,
            Some(prev) => prev.then(&phi),
        });
    }
    let composed = composed.expect("schedule has at least one step");

    let cc1 = &runs[0].complex;
    let cc2 = &runs[runs.len() - 1].complex;
    let interior = intersect_interior(cc1, cc2);
    let mut per_degree = Vec::new();
    let mut all_ok = true;
    if let Some((lo, hi)) = interior {
        for k in lo..=hi {
            let ok = induced_bijective_in_degree(&composed, cc1, cc2, k);
            all_ok &= ok;
            per_degree.push((k, ok));
        }
    }
    Ok(ContinuationOutcome {
        n_steps: schedule.steps.len() - 1,
        sup_difference: schedule.sup_difference,
        steps,
        composed,
        induced_bijective: all_ok,
        per_degree,
        homology_source: runs[0].homology.clone(),
        homology_target: runs[runs.len() - 1].homology.clone(),
    })
}

fn intersect_interior(a: &ChainComplexData, b: &ChainComplexData) -> Option<(i32, i32)> {
    let (a_lo, a_hi) = a.degree_range()?;
    let (b_lo, b_hi) = b.degree_range()?;
    let lo = (a_lo + 1).max(b_lo + 1);
    let hi = (a_hi - 1).min(b_hi - 1);
    (lo <= hi).then_some((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::Symmetry;
    use crate::spectrum::{build_model, ModelSpec};

    #[test]
    fn identity_schedule_is_one_trivial_step() {
        let m = build_model(ModelSpec::Abstract { n: 2 }, false).unwrap();
        let pot = Potential::sphere(Symmetry::Z2);
        let s = make_schedule(&m, &pot, &pot, 0.25, 5).unwrap();
        assert_eq!(s.steps.len(), 2);
        assert_eq!(s.sup_difference, 0.0);
    }

    #[test]
    fn schedule_step_count_matches_sup() {
        let m = build_model(ModelSpec::Abstract { n: 2 }, false).unwrap();
        let f1 = Potential::sphere(Symmetry::Z2);
        let f2 = Potential::ellipsoid(vec![1.1, 1.1, 1.1, 1.1], Symmetry::Z2).unwrap();
        let delta = 0.05;
        let s = make_schedule(&m, &f1, &f2, delta, 6).unwrap();
        let expect = ((s.sup_difference / delta).ceil() as usize).max(1);
        assert_eq!(s.steps.len(), expect + 1);
        // sup |F1-F2| = 0.05 r² over the ball of radius ~2.1
        assert!(s.sup_difference > 0.15 && s.sup_difference < 0.25, "{}", s.sup_difference);
    }

    #[test]
    fn cutoff_blend_to_p_power_is_finite() {
        let m = build_model(ModelSpec::Abstract { n: 2 }, false).unwrap();
        let f1 = Potential::sphere(Symmetry::Z2);
        let f2 = Potential::p_power_uniform(3.0, &m, Symmetry::Z2).unwrap();
        let s = make_schedule(&m, &f1, &f2, 0.2, 7).unwrap();
        assert!(s.steps.len() >= 2);
        assert!(s.sup_difference.is_finite());
    }

    #[test]
    fn unbounded_difference_detected() {
        let m = build_model(ModelSpec::Abstract { n: 2 }, false).unwrap();
        let f1 = Potential::sphere(Symmetry::Z2);
        // huge radial polynomial: same zero set topology, giant values on the ball
        let f2 = Potential::quadratic_radial(vec![-0.5e7, 0.5e7], Symmetry::Z2);
        assert!(matches!(
            make_schedule(&m, &f1, &f2, 0.1, 8),
            Err(Error::UnboundedDifference(_))
        ));
    }

    #[test]
    fn chain_map_identity_for_identity_complexes() {
        use crate::complexes::Flavor;
        // two-degree complex with a single generator each and zero boundary
        let mut gens = BTreeMap::new();
        gens.insert(0, vec![0usize]);
        gens.insert(1, vec![1usize]);
        let cc = ChainComplexData {
            flavor: Flavor::Plain,
            window: (0.0, 1.0),
            generators: gens,
            boundary: BTreeMap::new(),
            provenance: vec![],
        };
        let mut counts = BTreeMap::new();
        counts.insert((0usize, 0usize), 1usize);
        counts.insert((1usize, 1usize), 1usize);
        let phi = build_phi(&cc, &cc, &counts).unwrap();
        let id = ContinuationMap::identity(&cc);
        assert_eq!(phi.phi, id.phi);
    }
}

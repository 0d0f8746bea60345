//! End-to-end runs: critical points → grading → orbit counts → complex →
//! homology, per flavor. These are the building blocks the CLI and the
//! continuation machinery share.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::complexes::{
    assemble_plain, assemble_s1, assemble_z2, homology_z2, s1_symmetric_check,
    z2_quotient_compatible, ChainComplexData, HomologyTable,
};
use crate::critical::{
    break_all_circles, ensure_morse, find_critical_points, CriticalRecord, OrbitType, SearchParams,
};
use crate::error::{Error, Result};
use crate::grading::relative_index;
use crate::orbits::{find_connecting_orbits, orbit_counts, OrbitParams, OrbitRecord};
use crate::potentials::{Potential, Symmetry};
use crate::spectrum::SpectralModel;

/// Fill rel_index on every record.
pub fn grade_records(
    model: &SpectralModel,
    pot: &Potential,
    records: &mut [CriticalRecord],
) -> Result<()> {
    for rec in records.iter_mut() {
        rec.rel_index = Some(relative_index(model, pot, rec)?.rel_index);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct PlainRun {
    pub potential: Potential,
    /// graded circles of the original potential, when breaking happened
    pub circles: Option<Vec<CriticalRecord>>,
    pub records: Vec<CriticalRecord>,
    pub counts: BTreeMap<(usize, usize), usize>,
    pub orbits: Vec<OrbitRecord>,
    pub complex: ChainComplexData,
    pub homology: HomologyTable,
}

/// Plain-flavor run. S¹-invariant potentials are symmetry-broken first; other
/// potentials go through the degeneracy ladder if needed.
pub fn plain_run(
    model: &SpectralModel,
    pot: &Potential,
    search: &SearchParams,
    orbit: &OrbitParams,
    break_strength: f64,
) -> Result<PlainRun> {
    let found = find_critical_points(model, pot, search)?;
    let (pot_used, mut records, circles) = if pot.symmetry() == Symmetry::S1
        && found.iter().any(|r| r.orbit_type == OrbitType::Circle)
    {
        let mut circles = found;
        if circles.iter().any(|r| r.orbit_type != OrbitType::Circle) {
            return Err(Error::InvalidInput(
                "mixed circle / non-circle critical set under an S1 potential".into(),
            ));
        }
        grade_records(model, pot, &mut circles)?;
        let (broken_pot, morse, circles) =
            break_all_circles(model, pot, &circles, break_strength, search)?;
        (broken_pot, morse, Some(circles))
    } else {
        let (pot_used, records) = ensure_morse(model, pot, &found, search)?;
        (pot_used, records, None)
    };
    grade_records(model, &pot_used, &mut records)?;
    let (counts, orbits) = orbit_counts(model, &pot_used, &records, orbit)?;
    let complex = assemble_plain(&records, &counts, search.window)?;
    let homology = homology_z2(&complex);
    Ok(PlainRun { potential: pot_used, circles, records, counts, orbits, complex, homology })
}

#[derive(Debug, Clone, Serialize)]
pub struct S1Run {
    pub broken_potential: Potential,
    /// graded circles with broken_children links
    pub circles: Vec<CriticalRecord>,
    pub broken_records: Vec<CriticalRecord>,
    pub counts: BTreeMap<(usize, usize), usize>,
    pub orbits: Vec<OrbitRecord>,
    pub symmetric_check_ok: bool,
    pub complex: ChainComplexData,
    pub homology: HomologyTable,
}

/// S¹-equivariant run over circle quotients.
pub fn s1_run(
    model: &SpectralModel,
    pot: &Potential,
    search: &SearchParams,
    orbit: &OrbitParams,
    break_strength: f64,
) -> Result<S1Run> {
    if pot.symmetry() != Symmetry::S1 {
        return Err(Error::InvalidInput("s1 flavor needs an S1-invariant potential".into()));
    }
    let mut circles = find_critical_points(model, pot, search)?;
    if circles.iter().any(|r| r.orbit_type != OrbitType::Circle) {
        return Err(Error::InvalidInput("critical set contains non-circle records".into()));
    }
    grade_records(model, pot, &mut circles)?;
    let (broken_pot, mut broken, circles) =
        break_all_circles(model, pot, &circles, break_strength, search)?;
    grade_records(model, &broken_pot, &mut broken)?;

    // boundary entries need counts between children of degree-adjacent circles
    let mut counts = BTreeMap::new();
    let mut orbits = Vec::new();
    for hi in &circles {
        for lo in &circles {
            if hi.rel_index.unwrap_or(0) != lo.rel_index.unwrap_or(0) + 1 {
                continue;
            }
            let (hi_min, hi_max) = hi.broken_children.unwrap();
            let (lo_min, lo_max) = lo.broken_children.unwrap();
            for (s, t) in [(hi_max, lo_max), (hi_min, lo_min)] {
                let found =
                    find_connecting_orbits(model, &broken_pot, &broken[s], &broken[t], orbit)?;
                counts.insert((s, t), found.len());
                orbits.extend(found);
            }
        }
    }
    let symmetric_check_ok = s1_symmetric_check(&circles, &counts);
    let complex = assemble_s1(&circles, &counts, search.window)?;
    let homology = homology_z2(&complex);
    Ok(S1Run {
        broken_potential: broken_pot,
        circles,
        broken_records: broken,
        counts,
        orbits,
        symmetric_check_ok,
        complex,
        homology,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Z2Run {
    pub potential: Potential,
    pub records: Vec<CriticalRecord>,
    pub counts: BTreeMap<(usize, usize), usize>,
    pub orbits: Vec<OrbitRecord>,
    pub plain_complex: ChainComplexData,
    pub complex: ChainComplexData,
    pub quotient_compatible: bool,
    pub homology: HomologyTable,
    pub plain_homology: HomologyTable,
}

/// ℤ₂-equivariant run over ± pair classes, with the quotient-square check
/// against the plain complex.
pub fn z2_run(
    model: &SpectralModel,
    pot: &Potential,
    search: &SearchParams,
    orbit: &OrbitParams,
) -> Result<Z2Run> {
    if pot.symmetry() != Symmetry::Z2 {
        return Err(Error::InvalidInput("z2 flavor needs a Z2-symmetric potential".into()));
    }
    let found = find_critical_points(model, pot, search)?;
    let (pot_used, mut records) = ensure_morse(model, pot, &found, search)?;
    grade_records(model, &pot_used, &mut records)?;
    let (counts, orbits) = orbit_counts(model, &pot_used, &records, orbit)?;
    let plain_complex = assemble_plain(&records, &counts, search.window)?;
    let complex = assemble_z2(&records, &counts, search.window)?;
    let quotient_compatible = z2_quotient_compatible(&plain_complex, &complex, &records);
    let homology = homology_z2(&complex);
    let plain_homology = homology_z2(&plain_complex);
    Ok(Z2Run {
        potential: pot_used,
        records,
        counts,
        orbits,
        plain_complex,
        complex,
        quotient_compatible,
        homology,
        plain_homology,
    })
}

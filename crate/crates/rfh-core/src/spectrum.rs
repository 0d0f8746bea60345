//! Truncated spectral models of the operator L.
//!
//! A model holds a finite window of the spectrum of an invertible self-adjoint
//! operator with eigenvalues unbounded in both directions, together with the
//! splitting H = H⁺ ⊕ H⁻ and the metric weights |λ_i|. Coordinates are always
//! taken in an E-orthonormal eigenbasis, so every downstream formula is an
//! explicit finite sum: ⟨Lu,u⟩ = Σ λ_i a_i² and the H-metric is the diagonal
//! matrix diag(|λ_i|; 1) on coordinates × multiplier.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which model family a spectrum comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Abstract,
    DiracToy,
    EllipticSystem,
    Beam,
    Wave,
}

/// Constructor data: family plus integer truncation cutoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// λ_{±k} = ±k for k = 1..=n.
    Abstract { n: u32 },
    /// Half-integer symmetric spectrum λ_{±k} = ±(k - 1/2), k = 1..=n.
    DiracToy { n: u32 },
    /// Pairs ±μ_k with μ_k = (kπ)² the Dirichlet values on the unit interval.
    EllipticSystem { k_max: u32 },
    /// ±√(j² + μ_k²) over j = 0..=j_max, k = 1..=k_max, μ_k = (kπ)².
    Beam { j_max: u32, k_max: u32 },
    /// j² − k² over j,k = 0..=n; resonant j=k modes form the kernel block.
    Wave { n: u32 },
    /// Explicit spectrum, for tests and irregular cases. Labels ±1..±m.
    Custom { eigenvalues: Vec<f64> },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Abstract { .. } | ModelSpec::Custom { .. } => ModelKind::Abstract,
            ModelSpec::DiracToy { .. } => ModelKind::DiracToy,
            ModelSpec::EllipticSystem { .. } => ModelKind::EllipticSystem,
            ModelSpec::Beam { .. } => ModelKind::Beam,
            ModelSpec::Wave { .. } => ModelKind::Wave,
        }
    }
}

/// A point z = (u, λ): eigenbasis coefficients plus the multiplier.
///
/// For complex-structure models consecutive slot pairs hold (Re, Im) of one
/// eigenplane coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePoint {
    #[serde(with = "crate::serde_dvector")]
    pub coeffs: DVector<f64>,
    pub multiplier: f64,
}

impl StatePoint {
    pub fn new(coeffs: DVector<f64>, multiplier: f64) -> Self {
        Self { coeffs, multiplier }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { coeffs: DVector::zeros(dim), multiplier: 0.0 }
    }

    /// E-norm² of the coefficient part (multiplier excluded).
    pub fn e_norm_sq(&self) -> f64 {
        self.coeffs.norm_squared()
    }

    pub fn e_norm(&self) -> f64 {
        self.coeffs.norm()
    }

    /// Flatten to the (n+1)-vector (coeffs..., multiplier).
    pub fn to_full(&self) -> DVector<f64> {
        let n = self.coeffs.len();
        let mut v = DVector::zeros(n + 1);
        v.rows_mut(0, n).copy_from(&self.coeffs);
        v[n] = self.multiplier;
        v
    }

    pub fn from_full(v: &DVector<f64>) -> Self {
        let n = v.len() - 1;
        Self { coeffs: v.rows(0, n).into_owned(), multiplier: v[n] }
    }
}

/// Resonant (j,k) bookkeeping for the wave family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveModes {
    /// (x-frequency j, t-frequency k) per label, aligned with `labels`.
    pub eigen: Vec<(u32, u32)>,
    /// Diagonal modes j = k, consumed only by the kernel reduction.
    pub kernel: Vec<(u32, u32)>,
}

/// Truncated eigenvalue/eigenbasis description of L.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    spec: ModelSpec,
    complex_structure: bool,
    labels: Vec<i32>,
    eigenvalues: Vec<f64>,
    kernel_dim: usize,
    wave_modes: Option<WaveModes>,
    /// Eigenvalue per real coordinate slot (labels doubled for complex planes).
    slot_eigenvalues: Vec<f64>,
}

/// Build a truncated model. Cutoffs must be ≥ 1.
pub fn build_model(spec: ModelSpec, complex_structure: bool) -> Result<SpectralModel> {
    let (positives, kernel_dim, wave_modes): (Vec<f64>, usize, Option<WaveModes>) = match &spec {
        ModelSpec::Abstract { n } => {
            check_cutoff(*n)?;
            ((1..=*n).map(|k| k as f64).collect(), 0, None)
        }
        ModelSpec::DiracToy { n } => {
            check_cutoff(*n)?;
            ((1..=*n).map(|k| k as f64 - 0.5).collect(), 0, None)
        }
        ModelSpec::EllipticSystem { k_max } => {
            check_cutoff(*k_max)?;
            let mu = |k: u32| (k as f64 * std::f64::consts::PI).powi(2);
            ((1..=*k_max).map(mu).collect(), 0, None)
        }
        ModelSpec::Beam { j_max, k_max } => {
            check_cutoff(*k_max)?;
            let mu = |k: u32| (k as f64 * std::f64::consts::PI).powi(2);
            let mut vals = Vec::new();
            for j in 0..=*j_max {
                for k in 1..=*k_max {
                    vals.push(((j as f64).powi(2) + mu(k).powi(2)).sqrt());
                }
            }
            vals.sort_by(f64::total_cmp);
            (vals, 0, None)
        }
        ModelSpec::Wave { n } => {
            check_cutoff(*n)?;
            if complex_structure {
                return Err(Error::UnsupportedModel(
                    "wave model uses a real cosine realization; complex structure unsupported".into(),
                ));
            }
            let mut pos: Vec<(f64, u32, u32)> = Vec::new();
            let mut kernel = Vec::new();
            for j in 0..=*n {
                for k in 0..=*n {
                    let v = j as f64 * j as f64 - k as f64 * k as f64;
                    if j == k {
                        kernel.push((j, k));
                    } else if v > 0.0 {
                        pos.push((v, j, k));
                    }
                }
            }
            pos.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let m = pos.len();
            // Mirror pairs (k,j) give the negative half; assemble label-aligned modes.
            let mut eigen = Vec::with_capacity(2 * m);
            for &(_, j, k) in pos.iter().rev() {
                eigen.push((k, j)); // label -i: swapped frequencies, value -(j²-k²)
            }
            for &(_, j, k) in pos.iter() {
                eigen.push((j, k));
            }
            let kd = kernel.len();
            let values = pos.iter().map(|t| t.0).collect();
            (values, kd, Some(WaveModes { eigen, kernel }))
            // labels/eigenvalues assembled below from `values`.
        }
        ModelSpec::Custom { eigenvalues } => {
            // Interpreted as the positive half; must be positive and sorted.
            if eigenvalues.is_empty() {
                return Err(Error::InvalidInput("custom spectrum must be nonempty".into()));
            }
            for &v in eigenvalues {
                if !(v > 0.0) {
                    return Err(Error::InvalidInput(
                        "custom spectrum lists the positive half; entries must be > 0".into(),
                    ));
                }
            }
            let mut vals = eigenvalues.clone();
            vals.sort_by(f64::total_cmp);
            (vals, 0, None)
        }
    };

    let m = positives.len();
    if m == 0 {
        return Err(Error::InvalidInput("truncation produced an empty spectrum".into()));
    }
    let mut labels = Vec::with_capacity(2 * m);
    let mut eigenvalues = Vec::with_capacity(2 * m);
    for i in (0..m).rev() {
        labels.push(-((i + 1) as i32));
        eigenvalues.push(-positives[i]);
    }
    for (i, &v) in positives.iter().enumerate() {
        labels.push((i + 1) as i32);
        eigenvalues.push(v);
    }
    for &v in &eigenvalues {
        if v.abs() < 1e-12 {
            return Err(Error::ZeroEigenvalue(format!("{spec:?}")));
        }
    }

    let slot_eigenvalues = expand_slots(&eigenvalues, complex_structure);
    Ok(SpectralModel {
        spec,
        complex_structure,
        labels,
        eigenvalues,
        kernel_dim,
        wave_modes,
        slot_eigenvalues,
    })
}

fn check_cutoff(n: u32) -> Result<()> {
    if n < 1 {
        Err(Error::InvalidInput("truncation cutoff must be >= 1".into()))
    } else {
        Ok(())
    }
}

fn expand_slots(eigenvalues: &[f64], complex_structure: bool) -> Vec<f64> {
    if complex_structure {
        eigenvalues.iter().flat_map(|&v| [v, v]).collect()
    } else {
        eigenvalues.to_vec()
    }
}

impl SpectralModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn complex_structure(&self) -> bool {
        self.complex_structure
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel_dim
    }

    pub fn wave_modes(&self) -> Option<&WaveModes> {
        self.wave_modes.as_ref()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    /// Total number of real coefficient slots.
    pub fn real_dim(&self) -> usize {
        self.slot_eigenvalues.len()
    }

    /// real_dim + 1 (the multiplier slot).
    pub fn full_dim(&self) -> usize {
        self.real_dim() + 1
    }

    /// Eigenvalue attached to each real coordinate slot.
    pub fn slot_eigenvalues(&self) -> &[f64] {
        &self.slot_eigenvalues
    }

    /// Real dimension of H⁻ in this truncation.
    pub fn neg_real_dim(&self) -> usize {
        self.slot_eigenvalues.iter().filter(|&&v| v < 0.0).count()
    }

    /// Coordinate slots of one label: a single slot, or the (Re, Im) pair.
    pub fn label_slots(&self, label_index: usize) -> std::ops::Range<usize> {
        if self.complex_structure {
            2 * label_index..2 * label_index + 2
        } else {
            label_index..label_index + 1
        }
    }

    pub fn check_point(&self, z: &StatePoint) -> Result<()> {
        if z.coeffs.len() != self.real_dim() {
            return Err(Error::DimensionMismatch { expected: self.real_dim(), got: z.coeffs.len() });
        }
        Ok(())
    }

    /// H-norm² of the coefficient part: Σ |λ_i| a_i².
    pub fn h_norm_sq_u(&self, coeffs: &DVector<f64>) -> f64 {
        coeffs
            .iter()
            .zip(self.slot_eigenvalues.iter())
            .map(|(a, l)| l.abs() * a * a)
            .sum()
    }

    /// Rotate every (Re, Im) eigenplane pair by the angle θ. Identity on real models.
    pub fn s1_rotate(&self, z: &StatePoint, theta: f64) -> StatePoint {
        if !self.complex_structure {
            return z.clone();
        }
        let (c, s) = (theta.cos(), theta.sin());
        let mut out = z.coeffs.clone();
        for i in 0..self.n_labels() {
            let (x, y) = (z.coeffs[2 * i], z.coeffs[2 * i + 1]);
            out[2 * i] = c * x - s * y;
            out[2 * i + 1] = s * x + c * y;
        }
        StatePoint::new(out, z.multiplier)
    }

    /// Infinitesimal rotation generator applied to z (tangent to the S¹ orbit).
    pub fn s1_tangent(&self, z: &StatePoint) -> StatePoint {
        let mut out = DVector::zeros(z.coeffs.len());
        if self.complex_structure {
            for i in 0..self.n_labels() {
                out[2 * i] = -z.coeffs[2 * i + 1];
                out[2 * i + 1] = z.coeffs[2 * i];
            }
        }
        StatePoint::new(out, 0.0)
    }

    /// Flip the sign of every Im slot. Identity on real models.
    pub fn conjugate(&self, z: &StatePoint) -> StatePoint {
        if !self.complex_structure {
            return z.clone();
        }
        let mut out = z.coeffs.clone();
        for i in 0..self.n_labels() {
            out[2 * i + 1] = -out[2 * i + 1];
        }
        StatePoint::new(out, z.multiplier)
    }
}

/// H×ℝ inner product: Σ |λ_i| a_i b_i + λ₁λ₂.
pub fn h_inner(model: &SpectralModel, z1: &StatePoint, z2: &StatePoint) -> Result<f64> {
    model.check_point(z1)?;
    model.check_point(z2)?;
    let mut acc = z1.multiplier * z2.multiplier;
    for ((a, b), l) in z1.coeffs.iter().zip(z2.coeffs.iter()).zip(model.slot_eigenvalues.iter()) {
        acc += l.abs() * a * b;
    }
    Ok(acc)
}

/// Split into (u⁺, u⁻): coefficients zeroed on opposite-sign labels, multipliers zeroed.
pub fn split_pm(model: &SpectralModel, z: &StatePoint) -> Result<(StatePoint, StatePoint)> {
    model.check_point(z)?;
    let mut plus = DVector::zeros(z.coeffs.len());
    let mut minus = DVector::zeros(z.coeffs.len());
    for (i, &l) in model.slot_eigenvalues.iter().enumerate() {
        if l > 0.0 {
            plus[i] = z.coeffs[i];
        } else {
            minus[i] = z.coeffs[i];
        }
    }
    Ok((StatePoint::new(plus, 0.0), StatePoint::new(minus, 0.0)))
}

/// JSON document for a model: constructor spec plus the derived spectrum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(flatten)]
    pub spec: ModelSpec,
    pub complex_structure: bool,
    pub labels: Vec<i32>,
    pub eigenvalues: Vec<f64>,
    pub kernel_dim: usize,
}

impl SpectralModel {
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            spec: self.spec.clone(),
            complex_structure: self.complex_structure,
            labels: self.labels.clone(),
            eigenvalues: self.eigenvalues.clone(),
            kernel_dim: self.kernel_dim,
        }
    }

    /// Rebuild from a document and verify the stored spectrum round-trips.
    pub fn from_document(doc: &ModelDocument) -> Result<SpectralModel> {
        let model = build_model(doc.spec.clone(), doc.complex_structure)?;
        if model.labels != doc.labels || model.kernel_dim != doc.kernel_dim {
            return Err(Error::InvalidInput("model document labels/kernel do not match spec".into()));
        }
        if model.eigenvalues.len() != doc.eigenvalues.len() {
            return Err(Error::InvalidInput("model document eigenvalue count mismatch".into()));
        }
        for (a, b) in model.eigenvalues.iter().zip(doc.eigenvalues.iter()) {
            if (a - b).abs() > 1e-15 * a.abs().max(b.abs()) {
                return Err(Error::InvalidInput("model document eigenvalues drifted".into()));
            }
        }
        Ok(model)
    }
}

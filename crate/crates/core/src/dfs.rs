//! Pair-bit code: logical qubit `i` lives on ions `(i₁, i₂)` with
//! `|0_L⟩ = |0⟩_{i₁}|1⟩_{i₂}` and `|1_L⟩ = |1⟩_{i₁}|0⟩_{i₂}`, the kernel of
//! `Z_i = σ_z^{(i₁)} + σ_z^{(i₂)}`.

use nalgebra::DVector;
use thiserror::Error;

use crate::linalg::{max_abs, unitarity_error, DenseOperator, PauliAxis, StateVector, C64, I, ONE, ZERO};
use crate::oracle::spin_operator;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DfsError {
    #[error("invalid encoding: {0}")]
    InvalidEncoding(String),
    #[error("amplitude vector has norm {0}, expected 1")]
    NotNormalized(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("leakage {leakage:.3e} exceeds the bound {bound:.3e}")]
    LeakageAboveThreshold { leakage: f64, bound: f64 },
}

/// Assignment of logical qubits to physical ion pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogicalEncoding {
    n_physical: usize,
    pairs: Vec<(usize, usize)>,
}

impl LogicalEncoding {
    /// Every physical qubit must belong to exactly one pair.
    pub fn new(n_physical: usize, pairs: Vec<(usize, usize)>) -> Result<Self, DfsError> {
        if pairs.is_empty() {
            return Err(DfsError::InvalidEncoding("no logical qubits".into()));
        }
        let mut seen = vec![false; n_physical];
        for &(a, b) in &pairs {
            for q in [a, b] {
                if q >= n_physical {
                    return Err(DfsError::InvalidEncoding(format!(
                        "ion {q} outside {n_physical} physical qubits"
                    )));
                }
                if std::mem::replace(&mut seen[q], true) {
                    return Err(DfsError::InvalidEncoding(format!("ion {q} used twice")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(DfsError::InvalidEncoding(
                "every physical qubit must belong to a pair".into(),
            ));
        }
        Ok(LogicalEncoding { n_physical, pairs })
    }

    /// One logical qubit on ions (0, 1).
    pub fn single() -> Self {
        LogicalEncoding {
            n_physical: 2,
            pairs: vec![(0, 1)],
        }
    }

    /// Logical qubit `i` on ions `(2i, 2i + 1)`.
    pub fn adjacent_pairs(n_logical: usize) -> Self {
        LogicalEncoding {
            n_physical: 2 * n_logical,
            pairs: (0..n_logical).map(|i| (2 * i, 2 * i + 1)).collect(),
        }
    }

    pub fn n_physical(&self) -> usize {
        self.n_physical
    }

    pub fn n_logical(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn logical_dimension(&self) -> usize {
        1 << self.n_logical()
    }

    /// Physical basis index of the code word with logical bits `l`
    /// (logical qubit 0 least significant).
    pub fn code_index(&self, l: usize) -> usize {
        self.pairs.iter().enumerate().fold(0, |acc, (i, &(a, b))| {
            if (l >> i) & 1 == 0 {
                acc | (1 << b)
            } else {
                acc | (1 << a)
            }
        })
    }

    pub fn code_indices(&self) -> Vec<usize> {
        (0..self.logical_dimension()).map(|l| self.code_index(l)).collect()
    }

    /// Projector onto the code space, on the spin space.
    pub fn projector(&self) -> DenseOperator {
        let d = 1 << self.n_physical;
        let mut p = DenseOperator::zeros(d, d);
        for c in self.code_indices() {
            p[(c, c)] = ONE;
        }
        p
    }

    /// `Z_i = σ_z^{(i₁)} + σ_z^{(i₂)}`.
    pub fn z_operator(&self, logical: usize) -> DenseOperator {
        let (a, b) = self.pairs[logical];
        spin_operator(self.n_physical, &[(a, PauliAxis::Z)]) + spin_operator(self.n_physical, &[(b, PauliAxis::Z)])
    }

    /// `Σ_i Z_i`, the collective dephasing operator.
    pub fn collective_z(&self) -> DenseOperator {
        (0..self.n_logical()).map(|i| self.z_operator(i)).fold(
            DenseOperator::zeros(1 << self.n_physical, 1 << self.n_physical),
            |acc, z| acc + z,
        )
    }

    /// Isometry from the logical space into the physical spin space.
    pub fn isometry(&self) -> DenseOperator {
        let mut v = DenseOperator::zeros(1 << self.n_physical, self.logical_dimension());
        for (l, c) in self.code_indices().into_iter().enumerate() {
            v[(c, l)] = ONE;
        }
        v
    }

    /// `P U P` expressed in the code basis.
    pub fn restrict(&self, u: &DenseOperator) -> Result<DenseOperator, DfsError> {
        let d = 1 << self.n_physical;
        if u.nrows() != d || u.ncols() != d {
            return Err(DfsError::DimensionMismatch(format!(
                "operator is {}x{}, expected {d}x{d}",
                u.nrows(),
                u.ncols()
            )));
        }
        let idx = self.code_indices();
        Ok(DenseOperator::from_fn(idx.len(), idx.len(), |r, c| u[(idx[r], idx[c])]))
    }

    /// `‖(1 − P) U P‖_max`.
    pub fn leakage(&self, u: &DenseOperator) -> f64 {
        let idx = self.code_indices();
        let mut worst: f64 = 0.0;
        for &c in &idx {
            for r in 0..u.nrows() {
                if !idx.contains(&r) {
                    worst = worst.max(u[(r, c)].norm());
                }
            }
        }
        worst
    }
}

/// Physical spin state for logical amplitudes.
pub fn encode_state(enc: &LogicalEncoding, amplitudes: &[C64]) -> Result<StateVector, DfsError> {
    if amplitudes.len() != enc.logical_dimension() {
        return Err(DfsError::DimensionMismatch(format!(
            "{} amplitudes for {} logical states",
            amplitudes.len(),
            enc.logical_dimension()
        )));
    }
    let norm = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(DfsError::NotNormalized(norm));
    }
    let mut psi = DVector::from_element(1 << enc.n_physical, ZERO);
    for (l, a) in amplitudes.iter().enumerate() {
        psi[enc.code_index(l)] = *a;
    }
    Ok(psi)
}

/// Logical action of a physical spin operator.
#[derive(Clone, Debug, PartialEq)]
pub struct LogicalGateReport {
    pub logical: DenseOperator,
    pub leakage: f64,
    pub fidelity_to_target: f64,
    pub extracted_phase: f64,
}

impl LogicalGateReport {
    pub fn unitarity_error(&self) -> f64 {
        unitarity_error(&self.logical)
    }
}

/// Restrict `u` to the code space and compare with `target` modulo a global
/// phase. With `leakage_bound` set, excess leakage is an error.
pub fn extract_logical_gate(
    u: &DenseOperator,
    enc: &LogicalEncoding,
    target: &DenseOperator,
    leakage_bound: Option<f64>,
) -> Result<LogicalGateReport, DfsError> {
    let logical = enc.restrict(u)?;
    let d = enc.logical_dimension();
    if target.nrows() != d || target.ncols() != d {
        return Err(DfsError::DimensionMismatch(format!("target must be {d}x{d}")));
    }
    let leakage = enc.leakage(u);
    if let Some(bound) = leakage_bound {
        if leakage > bound {
            return Err(DfsError::LeakageAboveThreshold { leakage, bound });
        }
    }
    let overlap = (target.adjoint() * &logical).trace();
    Ok(LogicalGateReport {
        logical,
        leakage,
        fidelity_to_target: overlap.norm() / d as f64,
        extracted_phase: overlap.arg(),
    })
}

/// Logical Pauli operators on one logical qubit.
pub fn pi_x() -> DenseOperator {
    PauliAxis::X.matrix()
}

pub fn pi_y() -> DenseOperator {
    PauliAxis::Y.matrix()
}

pub fn pi_z() -> DenseOperator {
    PauliAxis::Z.matrix()
}

/// `exp(iφ P)` for an involutory `P`.
pub fn logical_rotation(phi: f64, p: &DenseOperator) -> DenseOperator {
    let n = p.nrows();
    DenseOperator::identity(n, n) * C64::new(phi.cos(), 0.0) + p * (I * phi.sin())
}

/// A physical two-body generator and its code-space restriction.
#[derive(Clone, Debug)]
pub struct LogicalEquivalent {
    pub name: &'static str,
    pub physical: DenseOperator,
    pub encoding: LogicalEncoding,
    pub restriction: DenseOperator,
    /// The logical operator it reproduces.
    pub logical: DenseOperator,
}

/// `σ_x^{(1)}σ_x^{(2)} ↦ π_x`, `σ_y^{(1)}σ_x^{(2)} ↦ π_y` on one logical qubit
/// and `σ_z^{(i₁)}σ_z^{(j₁)} ↦ π_z ⊗ π_z` on two.
pub fn logical_pauli_equivalents() -> Vec<LogicalEquivalent> {
    let single = LogicalEncoding::single();
    let double = LogicalEncoding::adjacent_pairs(2);
    let build = |name, enc: &LogicalEncoding, factors: &[(usize, PauliAxis)], logical: DenseOperator| {
        let physical = spin_operator(enc.n_physical(), factors);
        let restriction = enc.restrict(&physical).expect("dimensions agree");
        LogicalEquivalent {
            name,
            physical,
            encoding: enc.clone(),
            restriction,
            logical,
        }
    };
    vec![
        build("xx", &single, &[(0, PauliAxis::X), (1, PauliAxis::X)], pi_x()),
        build("yx", &single, &[(0, PauliAxis::Y), (1, PauliAxis::X)], pi_y()),
        build(
            "zz",
            &double,
            &[(0, PauliAxis::Z), (2, PauliAxis::Z)],
            pi_z().kronecker(&pi_z()),
        ),
    ]
}

/// True when both physical gates act identically on the code space
/// (entrywise to 1e-8).
pub fn addressing_equivalence_check(
    u_first: &DenseOperator,
    u_second: &DenseOperator,
    enc: &LogicalEncoding,
) -> Result<bool, DfsError> {
    let a = enc.restrict(u_first)?;
    let b = enc.restrict(u_second)?;
    Ok(max_abs(&(a - b)) < 1e-8)
}

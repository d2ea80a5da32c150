//! Harmonic model of an ion array: Hessian, normal modes and the
//! force-to-mode coupling coefficients `D̃_{μk} = D_{μk} / sqrt(2 m ω_k)`.
//!
//! Units are dimensionless with `ħ = 1`; every ion sits in its own local well
//! of frequency `ω_0` and neighbouring ions are coupled through the Coulomb
//! curvature `κ` (positive along the array axis, negative transversally).

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModeError {
    #[error("invalid ion array: {0}")]
    InvalidConfig(String),
    #[error("mode {index} is unstable: Hessian eigenvalue {eigenvalue:.6e} is not positive")]
    NonPositiveMode { index: usize, eigenvalue: f64 },
    #[error("Hessian is not symmetric (asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// Open chain.
    Chain,
    /// Periodic ring; the last ion couples back to the first.
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingRange {
    NearestNeighbor,
    /// Every pair, scaled as `κ (d / r)³`.
    LongRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IonArrayConfig {
    pub mass: f64,
    /// Local trap frequency of each ion.
    pub trap_frequencies: Vec<f64>,
    pub spacing: f64,
    /// Second derivative of the pair potential at the equilibrium separation.
    pub coulomb_curvature: f64,
    /// Equilibrium positions along the array.
    pub positions: Vec<f64>,
    pub topology: Topology,
    pub range: CouplingRange,
}

impl IonArrayConfig {
    /// Uniform open chain with unit mass and unit spacing.
    pub fn chain(n_ions: usize, trap_frequency: f64, curvature: f64) -> Self {
        IonArrayConfig {
            mass: 1.0,
            trap_frequencies: vec![trap_frequency; n_ions],
            spacing: 1.0,
            coulomb_curvature: curvature,
            positions: (0..n_ions).map(|j| j as f64).collect(),
            topology: Topology::Chain,
            range: CouplingRange::NearestNeighbor,
        }
    }

    pub fn ring(n_ions: usize, trap_frequency: f64, curvature: f64) -> Self {
        IonArrayConfig {
            topology: Topology::Ring,
            ..Self::chain(n_ions, trap_frequency, curvature)
        }
    }

    pub fn with_mass(mut self, mass: f64) -> Self {
        self.mass = mass;
        self
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.positions = (0..self.n_ions()).map(|j| j as f64 * spacing).collect();
        self.spacing = spacing;
        self
    }

    pub fn with_range(mut self, range: CouplingRange) -> Self {
        self.range = range;
        self
    }

    pub fn n_ions(&self) -> usize {
        self.trap_frequencies.len()
    }

    pub fn validate(&self) -> Result<(), ModeError> {
        let bad = |s: String| Err(ModeError::InvalidConfig(s));
        let n = self.n_ions();
        if n == 0 {
            return bad("n_ions must be at least 1".into());
        }
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return bad(format!("mass must be positive, got {}", self.mass));
        }
        if let Some(w) = self.trap_frequencies.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return bad(format!("trap frequencies must be positive, got {w}"));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad(format!("spacing must be positive, got {}", self.spacing));
        }
        if !self.coulomb_curvature.is_finite() {
            return bad("coulomb curvature must be finite".into());
        }
        if self.positions.len() != n {
            return bad(format!("{} positions for {} ions", self.positions.len(), n));
        }
        if self.positions.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("equilibrium positions must be strictly increasing".into());
        }
        if self.topology == Topology::Ring && n < 3 {
            return bad("a ring needs at least 3 ions".into());
        }
        Ok(())
    }

    fn separation(&self, a: usize, b: usize) -> f64 {
        let direct = (self.positions[b] - self.positions[a]).abs();
        match self.topology {
            Topology::Chain => direct,
            Topology::Ring => direct.min(self.n_ions() as f64 * self.spacing - direct),
        }
    }

    /// Coupled pairs `(a, b, κ_ab)` with `a < b`.
    pub fn pair_couplings(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n_ions();
        let kappa = self.coulomb_curvature;
        let mut pairs = Vec::new();
        match self.range {
            CouplingRange::NearestNeighbor => {
                for a in 0..n.saturating_sub(1) {
                    pairs.push((a, a + 1, kappa));
                }
                if self.topology == Topology::Ring && n >= 3 {
                    pairs.push((0, n - 1, kappa));
                }
            }
            CouplingRange::LongRange => {
                for a in 0..n {
                    for b in a + 1..n {
                        let r = self.separation(a, b);
                        pairs.push((a, b, kappa * (self.spacing / r).powi(3)));
                    }
                }
            }
        }
        pairs
    }
}

/// `v_jj = m ω_j² + Σ κ_jj'`, `v_jj' = −κ_jj'`.
pub fn build_hessian(cfg: &IonArrayConfig) -> DMatrix<f64> {
    let n = cfg.n_ions();
    let mut v = DMatrix::zeros(n, n);
    for (j, w) in cfg.trap_frequencies.iter().enumerate() {
        v[(j, j)] = cfg.mass * w * w;
    }
    for (a, b, k) in cfg.pair_couplings() {
        v[(a, a)] += k;
        v[(b, b)] += k;
        v[(a, b)] -= k;
        v[(b, a)] -= k;
    }
    v
}

/// Normal-mode spectrum. `mode_matrix` is `n_ions × n_modes`; it is square
/// after diagonalization and loses columns under [`ModeSpectrum::select`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSpectrum {
    frequencies: Vec<f64>,
    mode_matrix: DMatrix<f64>,
    mass: f64,
}

impl ModeSpectrum {
    /// Assemble a spectrum directly, e.g. a single sideband-addressed mode.
    pub fn from_parts(frequencies: Vec<f64>, mode_matrix: DMatrix<f64>, mass: f64) -> Result<Self, ModeError> {
        if mode_matrix.ncols() != frequencies.len() {
            return Err(ModeError::InvalidConfig(format!(
                "{} frequencies for {} mode columns",
                frequencies.len(),
                mode_matrix.ncols()
            )));
        }
        if let Some((index, &w)) = frequencies.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
            return Err(ModeError::NonPositiveMode {
                index,
                eigenvalue: mass * w * w.abs(),
            });
        }
        if !(mass > 0.0) {
            return Err(ModeError::InvalidConfig("mass must be positive".into()));
        }
        Ok(ModeSpectrum {
            frequencies,
            mode_matrix,
            mass,
        })
    }

    pub fn n_ions(&self) -> usize {
        self.mode_matrix.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.frequencies.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn frequency(&self, k: usize) -> f64 {
        self.frequencies[k]
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn mode_matrix(&self) -> &DMatrix<f64> {
        &self.mode_matrix
    }

    pub fn min_frequency(&self) -> f64 {
        self.frequencies.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_frequency(&self) -> f64 {
        self.frequencies.iter().copied().fold(0.0, f64::max)
    }

    /// `D̃_{μk}`.
    pub fn coupling(&self, ion: usize, mode: usize) -> Result<f64, ModeError> {
        if ion >= self.n_ions() {
            return Err(ModeError::IndexOutOfRange {
                what: "ion",
                index: ion,
                len: self.n_ions(),
            });
        }
        if mode >= self.n_modes() {
            return Err(ModeError::IndexOutOfRange {
                what: "mode",
                index: mode,
                len: self.n_modes(),
            });
        }
        Ok(self.mode_matrix[(ion, mode)] / (2.0 * self.mass * self.frequencies[mode]).sqrt())
    }

    pub fn coupling_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_ions(), self.n_modes(), |i, k| {
            self.mode_matrix[(i, k)] / (2.0 * self.mass * self.frequencies[k]).sqrt()
        })
    }

    /// Keep only the listed modes, in the given order.
    pub fn select(&self, modes: &[usize]) -> Result<ModeSpectrum, ModeError> {
        if let Some(&k) = modes.iter().find(|&&k| k >= self.n_modes()) {
            return Err(ModeError::IndexOutOfRange {
                what: "mode",
                index: k,
                len: self.n_modes(),
            });
        }
        let cols: Vec<_> = modes.iter().map(|&k| self.mode_matrix.column(k).into_owned()).collect();
        Ok(ModeSpectrum {
            frequencies: modes.iter().map(|&k| self.frequencies[k]).collect(),
            mode_matrix: DMatrix::from_columns(&cols),
            mass: self.mass,
        })
    }
}

/// Diagonalize the Hessian: ascending frequencies, and each column flipped so
/// that its first largest-magnitude entry is positive.
pub fn diagonalize_modes(hessian: &DMatrix<f64>, mass: f64) -> Result<ModeSpectrum, ModeError> {
    let n = hessian.nrows();
    if n == 0 || !hessian.is_square() {
        return Err(ModeError::InvalidConfig(
            "Hessian must be a non-empty square matrix".into(),
        ));
    }
    if !(mass > 0.0) {
        return Err(ModeError::InvalidConfig("mass must be positive".into()));
    }
    let scale = hessian.amax().max(1.0);
    let asym = (hessian - hessian.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(ModeError::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new(hessian.clone());

    let mut order: Vec<usize> = (0..n).collect();
    let lead = |k: usize| leading_index(eig.eigenvectors.column(k).as_slice());
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(lead(a).cmp(&lead(b)))
    });

    let mut frequencies = Vec::with_capacity(n);
    let mut columns = Vec::with_capacity(n);
    for (index, &k) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[k];
        if !(lambda > 0.0) {
            return Err(ModeError::NonPositiveMode {
                index,
                eigenvalue: lambda,
            });
        }
        frequencies.push((lambda / mass).sqrt());
        let mut col = eig.eigenvectors.column(k).into_owned();
        if col[lead(k)] < 0.0 {
            col.neg_mut();
        }
        columns.push(col);
    }
    Ok(ModeSpectrum {
        frequencies,
        mode_matrix: DMatrix::from_columns(&columns),
        mass,
    })
}

/// Index of the first entry whose magnitude is within rounding of the largest.
fn leading_index(col: &[f64]) -> usize {
    let max = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    col.iter()
        .position(|x| x.abs() >= max - 1e-12 * max.max(1.0))
        .unwrap_or(0)
}

/// Full pipeline: validate, build and diagonalize.
pub fn analyze(cfg: &IonArrayConfig) -> Result<ModeSpectrum, ModeError> {
    cfg.validate()?;
    diagonalize_modes(&build_hessian(cfg), cfg.mass)
}

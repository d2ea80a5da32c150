//! Brute-force propagation of the spin ⊗ phonon system in the interaction
//! picture, plus the closed-form spin gate it is checked against.
//!
//! `H(t) = −Σ_k Σ_μ g_μ^k(t) σ_α^{(μ)} (a_k e^{−iω_k t} + a_k† e^{iω_k t})`
//!
//! Propagation uses a fourth-order Magnus step on the two Gauss points of each
//! grid interval, applied through a Taylor series of sparse products, and
//! verifies itself by step doubling.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::exec::Execution;
use crate::linalg::{max_abs, unitarity_error, DenseOperator, Pattern, PauliAxis, SparseOperator, C64, ONE, ZERO};
use crate::modes::{ModeError, ModeSpectrum};
use crate::pulse::{ForceSchedule, GatePair, Piece, PulseError, STEPS_PER_PERIOD};

/// Hard limit on the Hilbert-space dimension.
pub const MAX_DIMENSION: usize = 1 << 20;
/// Largest dimension for which a full dense propagator is assembled.
pub const MAX_DENSE_DIMENSION: usize = 1 << 12;
pub const DEFAULT_FOCK_CUTOFF: usize = 10;
pub const DOUBLING_TOLERANCE: f64 = 1e-6;
pub const TAIL_LIMIT: f64 = 1e-8;
pub const UNITARITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Hilbert-space dimension {dimension} exceeds the limit {limit}")]
    DimensionGuard { dimension: usize, limit: usize },
    #[error("{steps} steps give dt = {dt:.4e}, above the limit {limit:.4e} (40 steps per shortest period)")]
    TooFewSteps { steps: usize, dt: f64, limit: f64 },
    #[error("step count {steps} is not a multiple of the {pieces} smooth pieces of the schedule")]
    MisalignedSteps { steps: usize, pieces: usize },
    #[error("propagation not converged: step doubling to {steps} steps still changed U by {difference:.3e}")]
    NotConverged { steps: usize, difference: f64 },
    #[error("Fock tail population {population:.3e} exceeds {limit:.0e}; raise the cutoff")]
    TailPopulation { population: f64, limit: f64 },
    #[error("propagator not unitary: ‖U†U − I‖ = {0:.3e}")]
    NotUnitary(f64),
    #[error("projector has zero trace")]
    ZeroTrace,
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Mode(#[from] ModeError),
}

/// Qubits ⊗ truncated Fock modes. Index = spin bits (qubit 0 least
/// significant) + 2^n_qubits · (mixed-radix Fock digits, mode 0 fastest).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HilbertSpace {
    n_qubits: usize,
    cutoffs: Vec<usize>,
}

impl HilbertSpace {
    pub fn new(n_qubits: usize, n_modes: usize, fock_cutoff: usize) -> Result<Self, OracleError> {
        Self::with_cutoffs(n_qubits, vec![fock_cutoff; n_modes])
    }

    pub fn with_cutoffs(n_qubits: usize, cutoffs: Vec<usize>) -> Result<Self, OracleError> {
        if n_qubits == 0 {
            return Err(OracleError::DimensionMismatch("at least one qubit is required".into()));
        }
        if cutoffs.contains(&0) {
            return Err(OracleError::DimensionMismatch("Fock cutoffs must be positive".into()));
        }
        let mut dimension: usize = 1;
        for f in std::iter::once(1usize << n_qubits.min(21)).chain(cutoffs.iter().map(|c| c + 1)) {
            dimension = dimension.saturating_mul(f);
        }
        if n_qubits > 20 || dimension > MAX_DIMENSION {
            return Err(OracleError::DimensionGuard {
                dimension,
                limit: MAX_DIMENSION,
            });
        }
        Ok(HilbertSpace { n_qubits, cutoffs })
    }

    /// Same space with one more mode appended.
    pub fn with_extra_mode(&self, cutoff: usize) -> Result<Self, OracleError> {
        let mut cutoffs = self.cutoffs.clone();
        cutoffs.push(cutoff);
        Self::with_cutoffs(self.n_qubits, cutoffs)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn n_modes(&self) -> usize {
        self.cutoffs.len()
    }

    pub fn cutoff(&self, mode: usize) -> usize {
        self.cutoffs[mode]
    }

    pub fn spin_dimension(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn fock_dimension(&self) -> usize {
        self.cutoffs.iter().map(|c| c + 1).product()
    }

    pub fn dimension(&self) -> usize {
        self.spin_dimension() * self.fock_dimension()
    }

    pub fn index(&self, spin: usize, fock: &[usize]) -> usize {
        debug_assert_eq!(fock.len(), self.n_modes());
        let mut f = 0;
        for (k, &n) in fock.iter().enumerate().rev() {
            debug_assert!(n <= self.cutoffs[k]);
            f = f * (self.cutoffs[k] + 1) + n;
        }
        spin + self.spin_dimension() * f
    }

    pub fn decompose(&self, index: usize) -> (usize, Vec<usize>) {
        let spin = index % self.spin_dimension();
        let mut rest = index / self.spin_dimension();
        let fock = self
            .cutoffs
            .iter()
            .map(|c| {
                let n = rest % (c + 1);
                rest /= c + 1;
                n
            })
            .collect();
        (spin, fock)
    }

    /// `σ_α^{(qubit)}` as a sparse operator on the full space.
    pub fn pauli(&self, qubit: usize, axis: PauliAxis) -> SparseOperator {
        self.pauli_ladder(&[(qubit, axis, ONE)], None)
    }

    /// `Σ_j c_j σ_{α_j}^{(q_j)} ⊗ a_mode` (or ⊗ 1 when `mode` is `None`).
    pub fn pauli_ladder(&self, factors: &[(usize, PauliAxis, C64)], mode: Option<usize>) -> SparseOperator {
        let dim = self.dimension();
        let mut triplets = Vec::new();
        for col in 0..dim {
            let (spin, mut fock) = self.decompose(col);
            let amp = match mode {
                Some(k) if fock[k] == 0 => continue,
                Some(k) => {
                    let s = (fock[k] as f64).sqrt();
                    fock[k] -= 1;
                    s
                }
                None => 1.0,
            };
            for &(q, axis, c) in factors {
                let (bit, a) = axis.act_on_bit((spin >> q) & 1);
                let new_spin = (spin & !(1 << q)) | (bit << q);
                triplets.push((self.index(new_spin, &fock), col, c * a * amp));
            }
        }
        SparseOperator::from_triplets(dim, triplets)
    }

    /// `1_spin ⊗ a_mode`.
    pub fn annihilation(&self, mode: usize) -> SparseOperator {
        let dim = self.dimension();
        let triplets = (0..dim)
            .filter_map(|col| {
                let (spin, mut fock) = self.decompose(col);
                (fock[mode] > 0).then(|| {
                    let s = (fock[mode] as f64).sqrt();
                    fock[mode] -= 1;
                    (self.index(spin, &fock), col, C64::new(s, 0.0))
                })
            })
            .collect();
        SparseOperator::from_triplets(dim, triplets)
    }

    pub fn number(&self, mode: usize) -> SparseOperator {
        let dim = self.dimension();
        let triplets = (0..dim)
            .map(|i| (i, i, C64::new(self.decompose(i).1[mode] as f64, 0.0)))
            .collect();
        SparseOperator::from_triplets(dim, triplets)
    }

    /// Embed a spin-only operator as `op ⊗ 1_fock`.
    pub fn embed_spin(&self, op: &DenseOperator) -> Result<DenseOperator, OracleError> {
        let s = self.spin_dimension();
        if op.nrows() != s || op.ncols() != s {
            return Err(OracleError::DimensionMismatch(format!(
                "spin operator is {}x{}, space has {s} spin states",
                op.nrows(),
                op.ncols()
            )));
        }
        let dim = self.dimension();
        self.dense_guard()?;
        let mut out = DenseOperator::zeros(dim, dim);
        for f in 0..self.fock_dimension() {
            out.view_mut((f * s, f * s), (s, s)).copy_from(op);
        }
        Ok(out)
    }

    fn dense_guard(&self) -> Result<(), OracleError> {
        if self.dimension() > MAX_DENSE_DIMENSION {
            return Err(OracleError::DimensionGuard {
                dimension: self.dimension(),
                limit: MAX_DENSE_DIMENSION,
            });
        }
        Ok(())
    }
}

/// Dense product of Pauli factors on `n_qubits`.
pub fn spin_operator(n_qubits: usize, factors: &[(usize, PauliAxis)]) -> DenseOperator {
    let dim = 1 << n_qubits;
    let mut out = DenseOperator::zeros(dim, dim);
    for col in 0..dim {
        let mut row = col;
        let mut amp = ONE;
        for &(q, axis) in factors {
            let (bit, a) = axis.act_on_bit((row >> q) & 1);
            row = (row & !(1 << q)) | (bit << q);
            amp *= a;
        }
        out[(row, col)] += amp;
    }
    out
}

/// `exp(−iΦ σ_α ⊗ σ_α′)` on two qubits (qubit 0 carries `α`).
pub fn analytic_gate(phase: f64, axes: (PauliAxis, PauliAxis)) -> DenseOperator {
    analytic_gate_on(2, phase, GatePair::new(0, 1, axes.0, axes.1))
}

/// `cos Φ · 1 − i sin Φ · σ_α^{(i)} σ_α′^{(j)}` on `n_qubits`.
pub fn analytic_gate_on(n_qubits: usize, phase: f64, pair: GatePair) -> DenseOperator {
    let dim = 1 << n_qubits;
    let p = spin_operator(n_qubits, &[(pair.ions[0], pair.axes[0]), (pair.ions[1], pair.axes[1])]);
    DenseOperator::identity(dim, dim) * C64::new(phase.cos(), 0.0) - p * C64::new(0.0, phase.sin())
}

/// `(|tr(P U† V P)| / tr P, arg tr(P U† V P))`.
pub fn fidelity_mod_phase(
    u: &DenseOperator,
    v: &DenseOperator,
    projector: &DenseOperator,
) -> Result<(f64, f64), OracleError> {
    let n = u.nrows();
    if [u.ncols(), v.nrows(), v.ncols(), projector.nrows(), projector.ncols()]
        .iter()
        .any(|&d| d != n)
    {
        return Err(OracleError::DimensionMismatch(
            "fidelity operands differ in shape".into(),
        ));
    }
    let trace_p = projector.trace().re;
    if trace_p.abs() < 1e-12 {
        return Err(OracleError::ZeroTrace);
    }
    let overlap = (projector * u.adjoint() * v * projector).trace();
    Ok((overlap.norm() / trace_p, overlap.arg()))
}

/// Spin block `⟨fock_out| U |fock_in⟩`.
pub fn fock_block(u: &DenseOperator, space: &HilbertSpace, fock_out: &[usize], fock_in: &[usize]) -> DenseOperator {
    let s = space.spin_dimension();
    let (r, c) = (space.index(0, fock_out), space.index(0, fock_in));
    u.view((r, c), (s, s)).into_owned()
}

/// Choice of one-step propagator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Integrator {
    /// Fourth-order Magnus on the two Gauss points of each interval.
    #[default]
    Magnus4,
    /// `exp(−i H(t_mid) Δt)`.
    Midpoint,
}

#[derive(Clone, Copy, Debug)]
pub struct PropagationOptions {
    pub execution: Execution,
    pub integrator: Integrator,
    /// Verify by step doubling; when false the given step count is used as is.
    pub check_doubling: bool,
    pub max_doublings: u32,
    pub tolerance: f64,
    /// Columns whose every mode starts at or below this Fock level are
    /// watched by the tail-population guard.
    pub guard_fock: usize,
    pub tail_limit: f64,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        PropagationOptions {
            execution: Execution::default(),
            integrator: Integrator::default(),
            check_doubling: true,
            max_doublings: 3,
            tolerance: DOUBLING_TOLERANCE,
            guard_fock: 0,
            tail_limit: TAIL_LIMIT,
        }
    }
}

/// Time-dependent Hamiltonian of a force schedule on a Hilbert space:
/// `H(t) = H_static + Σ_k p(t) (e^{−iω_k t} A_k + e^{iω_k t} A_k†)` with
/// `A_k = −Σ_μ D̃_{μk} A w_μ σ_α^{(μ)} a_k`.
#[derive(Clone, Debug)]
pub struct SystemHamiltonian {
    schedule: ForceSchedule,
    dim: usize,
    frequencies: Vec<f64>,
    drives: Vec<(SparseOperator, SparseOperator)>,
    static_op: Option<SparseOperator>,
    /// Highest frequency present, for the resolution guard.
    fastest: f64,
}

impl SystemHamiltonian {
    /// Qubit `μ` is ion `μ`; space mode `k` is spectrum mode `k`. Extra space
    /// modes beyond the spectrum are left free for bath models.
    pub fn new(schedule: &ForceSchedule, modes: &ModeSpectrum, space: &HilbertSpace) -> Result<Self, OracleError> {
        schedule.validate()?;
        if space.n_qubits() != modes.n_ions() {
            return Err(OracleError::DimensionMismatch(format!(
                "space has {} qubits but the array has {} ions",
                space.n_qubits(),
                modes.n_ions()
            )));
        }
        if space.n_modes() < modes.n_modes() {
            return Err(OracleError::DimensionMismatch(format!(
                "space has {} modes but the spectrum has {}",
                space.n_modes(),
                modes.n_modes()
            )));
        }
        for t in &schedule.targets {
            if t.ion >= space.n_qubits() {
                return Err(OracleError::DimensionMismatch(format!(
                    "target ion {} has no qubit",
                    t.ion
                )));
            }
        }
        let drives = (0..modes.n_modes())
            .map(|k| {
                let factors = schedule
                    .targets
                    .iter()
                    .map(|t| {
                        Ok((
                            t.ion,
                            t.axis,
                            C64::new(-modes.coupling(t.ion, k)? * schedule.amplitude * t.weight, 0.0),
                        ))
                    })
                    .collect::<Result<Vec<_>, ModeError>>()?;
                let op = space.pauli_ladder(&factors, Some(k));
                let adj = op.adjoint();
                Ok((op, adj))
            })
            .collect::<Result<Vec<_>, OracleError>>()?;
        Ok(SystemHamiltonian {
            schedule: schedule.clone(),
            dim: space.dimension(),
            frequencies: modes.frequencies().to_vec(),
            drives,
            static_op: None,
            fastest: modes.max_frequency(),
        })
    }

    /// Add a time-independent Hermitian term; `frequency` is its fastest
    /// internal oscillation (zero for slow terms).
    pub fn with_static(mut self, op: SparseOperator, frequency: f64) -> Result<Self, OracleError> {
        if op.dim() != self.dim {
            return Err(OracleError::DimensionMismatch("static term dimension".into()));
        }
        self.static_op = Some(match self.static_op.take() {
            None => op,
            Some(prev) => {
                let triplets = prev.iter().chain(op.iter()).collect();
                SparseOperator::from_triplets(self.dim, triplets)
            }
        });
        self.fastest = self.fastest.max(frequency);
        Ok(self)
    }

    pub fn schedule(&self) -> &ForceSchedule {
        &self.schedule
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    fn coefficients(&self, piece: &Piece, t: f64) -> Vec<C64> {
        let p = self.schedule.piece_profile(piece, t);
        self.frequencies.iter().map(|w| C64::from_polar(p, -w * t)).collect()
    }

    /// `H(t)` as a dense matrix, using the right-continuous profile.
    pub fn dense_at(&self, t: f64) -> DenseOperator {
        let p = self.schedule.profile(t);
        let mut h = self
            .static_op
            .as_ref()
            .map_or_else(|| DenseOperator::zeros(self.dim, self.dim), |s| s.to_dense());
        for ((op, adj), w) in self.drives.iter().zip(&self.frequencies) {
            let c = C64::from_polar(p, -w * t);
            for (r, col, v) in op.iter() {
                h[(r, col)] += c * v;
            }
            for (r, col, v) in adj.iter() {
                h[(r, col)] += c.conj() * v;
            }
        }
        h
    }

    /// Smallest admissible step count: 40 steps per shortest period,
    /// rounded up to the schedule's piece structure.
    pub fn minimum_steps(&self) -> usize {
        let pieces = self.schedule.pieces().len();
        let periods = self.schedule.total_duration() * self.fastest / (2.0 * PI);
        let min = ((periods * STEPS_PER_PERIOD as f64) - 1e-9).ceil().max(1.0) as usize;
        min.div_ceil(pieces) * pieces
    }

    fn check_steps(&self, steps: usize) -> Result<(), OracleError> {
        let pieces = self.schedule.pieces().len();
        if steps == 0 || !steps.is_multiple_of(pieces) {
            return Err(OracleError::MisalignedSteps { steps, pieces });
        }
        if self.fastest > 0.0 {
            let dt = self.schedule.total_duration() / steps as f64;
            let limit = 2.0 * PI / self.fastest / STEPS_PER_PERIOD as f64;
            if dt > limit * (1.0 + 1e-9) {
                return Err(OracleError::TooFewSteps { steps, dt, limit });
            }
        }
        Ok(())
    }

    fn engine(&self) -> Engine {
        let mut ops: Vec<&SparseOperator> = Vec::new();
        if let Some(s) = &self.static_op {
            ops.push(s);
        }
        for (op, adj) in &self.drives {
            ops.push(op);
            ops.push(adj);
        }
        let (pattern, slots) = Pattern::union(self.dim, &ops);
        let dense = |slot: &Vec<(usize, C64)>| {
            let mut v = vec![ZERO; pattern.nnz()];
            for &(p, x) in slot {
                v[p] += x;
            }
            v
        };
        let mut it = slots.iter();
        let static_vals = self.static_op.as_ref().map(|_| dense(it.next().unwrap()));
        let mut drive_vals = Vec::new();
        while let (Some(a), Some(b)) = (it.next(), it.next()) {
            drive_vals.push((dense(a), dense(b)));
        }
        Engine {
            pattern,
            static_vals,
            drive_vals,
        }
    }
}

/// `H(t)` as a dense matrix.
pub fn build_hamiltonian(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
    t: f64,
) -> Result<DenseOperator, OracleError> {
    space.dense_guard()?;
    Ok(SystemHamiltonian::new(schedule, modes, space)?.dense_at(t))
}

/// Hamiltonian values on a fixed sparsity pattern.
struct Engine {
    pattern: Pattern,
    static_vals: Option<Vec<C64>>,
    drive_vals: Vec<(Vec<C64>, Vec<C64>)>,
}

impl Engine {
    fn restrict(&self, rows: &[usize]) -> Engine {
        let (pattern, source) = self.pattern.restrict(rows);
        let gather = |v: &Vec<C64>| source.iter().map(|&p| v[p]).collect::<Vec<_>>();
        Engine {
            pattern,
            static_vals: self.static_vals.as_ref().map(gather),
            drive_vals: self.drive_vals.iter().map(|(a, b)| (gather(a), gather(b))).collect(),
        }
    }

    fn values(&self, coeffs: &[C64], out: &mut [C64]) {
        match &self.static_vals {
            Some(s) => out.copy_from_slice(s),
            None => out.fill(ZERO),
        }
        for ((op, adj), c) in self.drive_vals.iter().zip(coeffs) {
            if *c == ZERO {
                continue;
            }
            let cc = c.conj();
            for ((o, a), x) in op.iter().zip(adj).zip(out.iter_mut()) {
                *x += c * o + cc * a;
            }
        }
    }
}

/// Workspace for one block propagation.
struct Stepper<'a> {
    engine: &'a Engine,
    h1: Vec<C64>,
    h2: Vec<C64>,
    y1: DMatrix<C64>,
    y2: DMatrix<C64>,
    z: DMatrix<C64>,
    term: DMatrix<C64>,
    next: DMatrix<C64>,
}

const TAYLOR_RADIUS: f64 = 0.5;

fn taylor_terms(theta: f64) -> usize {
    // smallest K with θ^K / K! below double precision
    let mut term = 1.0;
    let mut k = 0;
    while term > 1e-17 && k < 40 {
        k += 1;
        term *= theta / k as f64;
    }
    k.max(1)
}

impl<'a> Stepper<'a> {
    fn new(engine: &'a Engine, cols: usize) -> Self {
        let n = engine.pattern.dim;
        let nnz = engine.pattern.nnz();
        Stepper {
            engine,
            h1: vec![ZERO; nnz],
            h2: vec![ZERO; nnz],
            y1: DMatrix::zeros(n, cols),
            y2: DMatrix::zeros(n, cols),
            z: DMatrix::zeros(n, cols),
            term: DMatrix::zeros(n, cols),
            next: DMatrix::zeros(n, cols),
        }
    }

    /// Advance `x` by one step `[t0, t0 + h]` of `piece`.
    fn step(
        &mut self,
        x: &mut DMatrix<C64>,
        piece: &Piece,
        t0: f64,
        h: f64,
        integrator: Integrator,
        ham: &SystemHamiltonian,
    ) {
        let pat = &self.engine.pattern;
        let bound = match integrator {
            Integrator::Midpoint => {
                let c = ham.coefficients(piece, t0 + 0.5 * h);
                self.engine.values(&c, &mut self.h1);
                h * pat.inf_norm(&self.h1)
            }
            Integrator::Magnus4 => {
                let d = h / (2.0 * 3f64.sqrt());
                let mid = t0 + 0.5 * h;
                let c1 = ham.coefficients(piece, mid - d);
                let c2 = ham.coefficients(piece, mid + d);
                self.engine.values(&c1, &mut self.h1);
                self.engine.values(&c2, &mut self.h2);
                let (n1, n2) = (pat.inf_norm(&self.h1), pat.inf_norm(&self.h2));
                0.5 * h * (n1 + n2) + 3f64.sqrt() * h * h / 12.0 * 2.0 * n1 * n2
            }
        };
        if bound == 0.0 {
            return;
        }
        let substeps = (bound / TAYLOR_RADIUS).ceil().max(1.0) as usize;
        let terms = taylor_terms(bound / substeps as f64);
        let inv_s = 1.0 / substeps as f64;
        for _ in 0..substeps {
            self.term.copy_from(x);
            for j in 1..=terms {
                self.generator(integrator, h, inv_s / j as f64);
                std::mem::swap(&mut self.term, &mut self.z);
                *x += &self.term;
            }
        }
    }

    /// `term ← scale · Ω term`, result left in `z`.
    fn generator(&mut self, integrator: Integrator, h: f64, scale: f64) {
        let pat = &self.engine.pattern;
        match integrator {
            Integrator::Midpoint => {
                pat.apply(&self.h1, &self.term, &mut self.z);
                self.z *= C64::new(0.0, -h * scale);
            }
            Integrator::Magnus4 => {
                pat.apply(&self.h1, &self.term, &mut self.y1);
                pat.apply(&self.h2, &self.term, &mut self.y2);
                pat.apply(&self.h2, &self.y1, &mut self.z);
                pat.apply(&self.h1, &self.y2, &mut self.next);
                let c = 3f64.sqrt() * h * h / 12.0;
                // Ω x = −i h/2 (H1 + H2) x − c (H2 H1 − H1 H2) x
                let a = C64::new(0.0, -0.5 * h * scale);
                let b = C64::new(-c * scale, 0.0);
                for (((z, n), y1), y2) in self
                    .z
                    .iter_mut()
                    .zip(self.next.iter())
                    .zip(self.y1.iter())
                    .zip(self.y2.iter())
                {
                    *z = a * (y1 + y2) + b * (*z - n);
                }
            }
        }
    }
}

/// Rows whose Fock level in some mode is within the top two of its ladder.
fn tail_rows(space: &HilbertSpace, rows: &[usize]) -> Vec<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, &r)| {
            let (_, fock) = space.decompose(r);
            fock.iter().enumerate().any(|(k, &n)| n + 1 >= space.cutoff(k))
        })
        .map(|(i, _)| i)
        .collect()
}

struct BlockRun {
    columns: DMatrix<C64>,
    max_tail: f64,
}

/// Propagate the columns `x` (local block coordinates) over `steps` steps.
fn run_block(
    ham: &SystemHamiltonian,
    engine: &Engine,
    mut x: DMatrix<C64>,
    steps: usize,
    integrator: Integrator,
    guard_cols: &[usize],
    tail: &[usize],
) -> BlockRun {
    let pieces = ham.schedule.pieces();
    let per_piece = steps / pieces.len();
    let mut stepper = Stepper::new(engine, x.ncols());
    let tail_pop = |x: &DMatrix<C64>| {
        guard_cols
            .iter()
            .map(|&c| tail.iter().map(|&r| x[(r, c)].norm_sqr()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let mut max_tail = tail_pop(&x);
    for piece in &pieces {
        let h = (piece.t1 - piece.t0) / per_piece as f64;
        for m in 0..per_piece {
            stepper.step(&mut x, piece, piece.t0 + m as f64 * h, h, integrator, ham);
            if !guard_cols.is_empty() && !tail.is_empty() {
                max_tail = max_tail.max(tail_pop(&x));
            }
        }
    }
    BlockRun { columns: x, max_tail }
}

/// Result of a verified propagation.
#[derive(Clone, Debug)]
pub struct Propagation {
    /// Full propagator, or the propagated columns for [`propagate_columns`].
    pub unitary: DenseOperator,
    pub steps: usize,
    /// `‖U_2N − U_N‖_max` of the accepted doubling (zero when unchecked).
    pub doubling_difference: f64,
    pub max_tail_population: f64,
}

/// Propagated block columns, their tail population and where each column goes.
type BlockResult = (DMatrix<C64>, f64, Vec<(usize, usize)>);

/// Groups of connected basis states that contain the requested columns.
fn blocks_for(engine: &Engine, columns: Option<&[usize]>) -> Vec<Vec<usize>> {
    let comps = engine.pattern.components();
    match columns {
        None => comps,
        Some(cols) => {
            let mut wanted: Vec<usize> = comps
                .iter()
                .enumerate()
                .filter(|(_, c)| cols.iter().any(|x| c.binary_search(x).is_ok()))
                .flat_map(|(_, c)| c.iter().copied())
                .collect();
            wanted.sort_unstable();
            vec![wanted]
        }
    }
}

fn propagate_impl(
    ham: &SystemHamiltonian,
    space: &HilbertSpace,
    columns: Option<&[usize]>,
    steps: usize,
    opts: &PropagationOptions,
) -> Result<Propagation, OracleError> {
    if ham.dim != space.dimension() {
        return Err(OracleError::DimensionMismatch("Hamiltonian and space differ".into()));
    }
    ham.check_steps(steps)?;
    let engine = ham.engine();
    let blocks = blocks_for(&engine, columns);
    let n_out = columns.map_or(space.dimension(), |c| c.len());
    if columns.is_none() {
        space.dense_guard()?;
    }
    let guarded = |global: usize| space.decompose(global).1.iter().all(|&n| n <= opts.guard_fock);

    let run = |n_steps: usize| -> Vec<BlockResult> {
        opts.execution.map(&blocks, |rows| {
            let local = engine.restrict(rows);
            // (local column index in block, output column)
            let placement: Vec<(usize, usize)> = match columns {
                None => rows.iter().enumerate().map(|(i, &r)| (i, r)).collect(),
                Some(cols) => cols
                    .iter()
                    .enumerate()
                    .map(|(o, c)| (rows.binary_search(c).expect("column in block"), o))
                    .collect(),
            };
            let mut x = DMatrix::zeros(rows.len(), placement.len());
            for (j, &(i, _)) in placement.iter().enumerate() {
                x[(i, j)] = ONE;
            }
            let guard_cols: Vec<usize> = placement
                .iter()
                .enumerate()
                .filter(|(_, &(i, _))| guarded(rows[i]))
                .map(|(j, _)| j)
                .collect();
            let tail = tail_rows(space, rows);
            let r = run_block(ham, &local, x, n_steps, opts.integrator, &guard_cols, &tail);
            (r.columns, r.max_tail, placement)
        })
    };
    let assemble = |parts: &[BlockResult]| {
        let mut u = DenseOperator::zeros(space.dimension(), n_out);
        let mut tail: f64 = 0.0;
        for ((cols, t, placement), rows) in parts.iter().zip(&blocks) {
            tail = tail.max(*t);
            for (j, &(_, out)) in placement.iter().enumerate() {
                for (i, &r) in rows.iter().enumerate() {
                    u[(r, out)] = cols[(i, j)];
                }
            }
        }
        (u, tail)
    };

    let (mut u, mut tail) = assemble(&run(steps));
    let mut n = steps;
    let mut difference = 0.0;
    if opts.check_doubling {
        let mut accepted = false;
        for _ in 0..=opts.max_doublings {
            let (u2, t2) = assemble(&run(2 * n));
            difference = max_abs(&(&u2 - &u));
            n *= 2;
            u = u2;
            tail = tail.max(t2);
            if difference < opts.tolerance {
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(OracleError::NotConverged { steps: n, difference });
        }
    }
    if tail > opts.tail_limit {
        return Err(OracleError::TailPopulation {
            population: tail,
            limit: opts.tail_limit,
        });
    }
    let err = if columns.is_none() {
        unitarity_error(&u)
    } else {
        u.column_iter().map(|c| (c.norm() - 1.0).abs()).fold(0.0, f64::max)
    };
    if err > UNITARITY_TOLERANCE {
        return Err(OracleError::NotUnitary(err));
    }
    Ok(Propagation {
        unitary: u,
        steps: n,
        doubling_difference: difference,
        max_tail_population: tail,
    })
}

/// Full propagator `U(T)` with `steps` initial grid steps, verified by step doubling.
pub fn propagate(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
    steps: usize,
) -> Result<DenseOperator, OracleError> {
    let ham = SystemHamiltonian::new(schedule, modes, space)?;
    Ok(propagate_with(&ham, space, steps, &PropagationOptions::default())?.unitary)
}

pub fn propagate_with(
    ham: &SystemHamiltonian,
    space: &HilbertSpace,
    steps: usize,
    opts: &PropagationOptions,
) -> Result<Propagation, OracleError> {
    propagate_impl(ham, space, None, steps, opts)
}

/// `U(T)|c⟩` for each basis index `c`, as the columns of the returned matrix.
pub fn propagate_columns(
    ham: &SystemHamiltonian,
    space: &HilbertSpace,
    columns: &[usize],
    steps: usize,
    opts: &PropagationOptions,
) -> Result<Propagation, OracleError> {
    if columns.iter().any(|&c| c >= space.dimension()) {
        return Err(OracleError::DimensionMismatch(
            "initial basis index out of range".into(),
        ));
    }
    propagate_impl(ham, space, Some(columns), steps, opts)
}

/// Spin block `⟨fock_out|U|fock_in⟩` from columns produced by
/// [`propagate_columns`] for `spin ⊗ |fock_in⟩`, spin ascending.
pub fn column_block(columns: &DenseOperator, space: &HilbertSpace, fock_out: &[usize]) -> DenseOperator {
    let s = space.spin_dimension();
    let r = space.index(0, fock_out);
    columns.view((r, 0), (s, columns.ncols())).into_owned()
}

/// Basis indices of `spin ⊗ |fock⟩` for all spins, ascending.
pub fn spin_columns(space: &HilbertSpace, fock: &[usize]) -> Vec<usize> {
    (0..space.spin_dimension()).map(|s| space.index(s, fock)).collect()
}

/// Code-space style fidelity of the spin block `⟨n|U|n⟩` against `target`.
pub fn spin_fidelity(
    u: &DenseOperator,
    space: &HilbertSpace,
    fock: &[usize],
    target: &DenseOperator,
    projector: &DenseOperator,
) -> Result<(f64, f64), OracleError> {
    let block = fock_block(u, space, fock, fock);
    fidelity_mod_phase(target, &block, projector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::I;
    use crate::modes::{analyze, IonArrayConfig};
    use crate::pulse::{coupling_phase, design_adiabatic_schedule, ForceTarget, PulseShape};
    use approx::assert_relative_eq;

    fn com() -> ModeSpectrum {
        analyze(&IonArrayConfig::chain(2, 1.0, 0.1))
            .unwrap()
            .select(&[0])
            .unwrap()
    }

    #[test]
    fn basis_ordering_is_pinned() {
        let s = HilbertSpace::with_cutoffs(2, vec![2, 3]).unwrap();
        assert_eq!(s.dimension(), 4 * 3 * 4);
        assert_eq!(s.index(1, &[0, 0]), 1);
        assert_eq!(s.index(0, &[1, 0]), 4);
        assert_eq!(s.index(0, &[0, 1]), 12);
        assert_eq!(s.index(3, &[2, 3]), 3 + 4 * (2 + 3 * 3));
        for i in 0..s.dimension() {
            let (spin, fock) = s.decompose(i);
            assert_eq!(s.index(spin, &fock), i);
        }
    }

    #[test]
    fn dimension_guard() {
        assert!(matches!(
            HilbertSpace::new(4, 2, 256),
            Err(OracleError::DimensionGuard { .. })
        ));
        assert!(matches!(
            HilbertSpace::new(21, 0, 1),
            Err(OracleError::DimensionGuard { .. })
        ));
        assert!(HilbertSpace::new(2, 1, 10).is_ok());
    }

    #[test]
    fn single_qubit_hamiltonian_entries() {
        let m = analyze(&IonArrayConfig::chain(1, 2.0, 0.0)).unwrap();
        // D̃ = 0.5 at ω = 2, so A = 2 gives g = 1
        let s = ForceSchedule::new(vec![ForceTarget::new(0, PauliAxis::Z)], PulseShape::Constant, 2.0, 1.0);
        let space = HilbertSpace::new(1, 1, 1).unwrap();
        let h = build_hamiltonian(&s, &m, &space, 0.0).unwrap();
        let mut expected = DenseOperator::zeros(4, 4);
        // |s, n⟩ → index s + 2n; σ_z = +1 on s = 0
        expected[(0, 2)] = -ONE;
        expected[(2, 0)] = -ONE;
        expected[(1, 3)] = ONE;
        expected[(3, 1)] = ONE;
        assert!(max_abs(&(h - expected)) < 1e-15);
    }

    #[test]
    fn zero_schedule_is_identity() {
        let m = com();
        let s = ForceSchedule::for_pair(GatePair::xx(0, 1), PulseShape::Constant, 0.0, 2.0 * PI)
            .with_resolution_for(&m, 40);
        let space = HilbertSpace::new(2, 1, 4).unwrap();
        let u = propagate(&s, &m, &space, s.total_steps()).unwrap();
        assert_eq!(u, DenseOperator::identity(space.dimension(), space.dimension()));
    }

    #[test]
    fn analytic_gate_examples() {
        assert_eq!(
            analytic_gate(0.0, (PauliAxis::Z, PauliAxis::Z)),
            DenseOperator::identity(4, 4)
        );
        let g = analytic_gate(PI / 2.0, (PauliAxis::Z, PauliAxis::Z));
        let d = [-I, I, I, -I];
        for (k, v) in d.iter().enumerate() {
            assert!((g[(k, k)] - v).norm() < 1e-15);
        }
        assert!(unitarity_error(&analytic_gate(0.3, (PauliAxis::Y, PauliAxis::X))) < 1e-15);
    }

    #[test]
    fn fidelity_examples() {
        let u = analytic_gate(0.4, (PauliAxis::X, PauliAxis::X));
        let p = DenseOperator::identity(4, 4);
        let (f, ph) = fidelity_mod_phase(&u, &u, &p).unwrap();
        assert_relative_eq!(f, 1.0, epsilon = 1e-15);
        assert_relative_eq!(ph, 0.0, epsilon = 1e-15);
        let v = &u * C64::from_polar(1.0, 0.7);
        let (f, ph) = fidelity_mod_phase(&u, &v, &p).unwrap();
        assert_relative_eq!(f, 1.0, epsilon = 1e-14);
        assert_relative_eq!(ph, 0.7, epsilon = 1e-14);
        assert!(matches!(
            fidelity_mod_phase(&u, &u, &DenseOperator::zeros(4, 4)),
            Err(OracleError::ZeroTrace)
        ));
    }

    #[test]
    fn closed_loop_gate_matches_analytic() {
        let m = com();
        let s = design_adiabatic_schedule(&m, GatePair::zz(0, 1), -PI / 4.0, 20).unwrap();
        let phi = coupling_phase(&s, &m, (0, 1)).unwrap().phase_total;
        let space = HilbertSpace::new(2, 1, 10).unwrap();
        let opts = PropagationOptions {
            guard_fock: 2,
            ..Default::default()
        };
        let ham = SystemHamiltonian::new(&s, &m, &space).unwrap();
        let u = propagate_with(&ham, &space, s.total_steps(), &opts).unwrap().unitary;
        let target = analytic_gate(phi, (PauliAxis::Z, PauliAxis::Z));
        let p = DenseOperator::identity(4, 4);
        for n in 0..3 {
            let (f, _) = spin_fidelity(&u, &space, &[n], &target, &p).unwrap();
            assert!(1.0 - f < 1e-6, "n = {n}: {f}");
        }
    }

    #[test]
    fn columns_match_full_propagator() {
        let m = com();
        let s = ForceSchedule::for_pair(GatePair::xx(0, 1), PulseShape::Constant, 0.3, PI).with_resolution_for(&m, 40);
        let space = HilbertSpace::new(2, 1, 8).unwrap();
        let ham = SystemHamiltonian::new(&s, &m, &space).unwrap();
        let opts = PropagationOptions {
            check_doubling: false,
            tail_limit: 1.0,
            ..Default::default()
        };
        let full = propagate_with(&ham, &space, 400, &opts).unwrap().unitary;
        let cols = spin_columns(&space, &[0]);
        let part = propagate_columns(&ham, &space, &cols, 400, &opts).unwrap().unitary;
        for (j, &c) in cols.iter().enumerate() {
            assert!((full.column(c) - part.column(j)).iter().all(|z| z.norm() < 1e-14));
        }
        let seq = PropagationOptions {
            execution: Execution::Sequential,
            ..opts
        };
        assert_eq!(propagate_with(&ham, &space, 400, &seq).unwrap().unitary, full);
    }

    #[test]
    fn step_guards() {
        let m = com();
        let s = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::Constant, 0.1, 20.0 * PI);
        let space = HilbertSpace::new(2, 1, 4).unwrap();
        let ham = SystemHamiltonian::new(&s, &m, &space).unwrap();
        assert!(matches!(
            propagate_with(&ham, &space, 40, &PropagationOptions::default()),
            Err(OracleError::TooFewSteps { .. })
        ));
        let bad = SystemHamiltonian::new(&s, &m, &HilbertSpace::new(3, 1, 4).unwrap());
        assert!(matches!(bad, Err(OracleError::DimensionMismatch(_))));
    }

    #[test]
    fn tail_guard_trips_on_small_cutoff() {
        let m = com();
        let s = ForceSchedule::for_pair(GatePair::zz(0, 1), PulseShape::Constant, 1.0, PI).with_resolution_for(&m, 40);
        let space = HilbertSpace::new(2, 1, 3).unwrap();
        let ham = SystemHamiltonian::new(&s, &m, &space).unwrap();
        let r = propagate_with(&ham, &space, s.total_steps(), &PropagationOptions::default());
        assert!(matches!(r, Err(OracleError::TailPopulation { .. })), "{r:?}");
    }
}

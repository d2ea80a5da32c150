//! Collective dephasing `Σ_i Z_i ⊗ B` on top of the gate Hamiltonian, the
//! spin-motion noise left by open phonon loops, and refocusing by reversed
//! cycles.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dfs::{DfsError, LogicalEncoding};
use crate::exec::Execution;
use crate::linalg::{expm, max_abs, DenseOperator, PauliAxis, SparseOperator, C64, I, ZERO};
use crate::modes::ModeSpectrum;
use crate::oracle::{
    column_block, fidelity_mod_phase, propagate_columns, propagate_with, spin_columns, HilbertSpace, OracleError,
    Propagation, PropagationOptions, SystemHamiltonian,
};
use crate::pulse::{cycle_residuals, eta_at, eta_trajectory, residual_eta, ForceSchedule, PulseError};
use crate::quadrature::simpson_samples;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoherenceError {
    #[error("invalid dephasing model: {0}")]
    InvalidModel(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("refocusing premise violated: {0}")]
    RefocusPremiseViolated(String),
    #[error("invalid scan: {0}")]
    InvalidScan(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Dfs(#[from] DfsError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DephasingKind {
    /// `B → β` with `β ~ N(0, σ_B²)`, fixed within a run.
    QuasiStaticScalar { sigma_b: f64 },
    /// `B = b (a_b + a_b†)` for one bath oscillator of frequency `ω_b`,
    /// truncated at `cutoff`, initially in its ground state.
    SingleBathMode {
        coupling: f64,
        frequency: f64,
        cutoff: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DephasingModel {
    pub kind: DephasingKind,
    pub samples: usize,
    pub seed: u64,
}

impl DephasingModel {
    pub fn quasi_static(sigma_b: f64, samples: usize, seed: u64) -> Result<Self, DecoherenceError> {
        let m = DephasingModel {
            kind: DephasingKind::QuasiStaticScalar { sigma_b },
            samples,
            seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn bath_mode(coupling: f64, frequency: f64, cutoff: usize) -> Result<Self, DecoherenceError> {
        let m = DephasingModel {
            kind: DephasingKind::SingleBathMode {
                coupling,
                frequency,
                cutoff,
            },
            samples: 1,
            seed: 0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_sigma(self, sigma_b: f64) -> Self {
        DephasingModel {
            kind: DephasingKind::QuasiStaticScalar { sigma_b },
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), DecoherenceError> {
        let bad = |m: &str| Err(DecoherenceError::InvalidModel(m.into()));
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        match self.kind {
            DephasingKind::QuasiStaticScalar { sigma_b } if !(sigma_b >= 0.0 && sigma_b.is_finite()) => {
                bad("sigma_B must be a non-negative number")
            }
            DephasingKind::SingleBathMode {
                coupling,
                frequency,
                cutoff,
            } if !coupling.is_finite() || !(frequency >= 0.0 && frequency.is_finite()) || cutoff == 0 => {
                bad("bath mode needs finite coupling, non-negative frequency and a positive cutoff")
            }
            _ => Ok(()),
        }
    }

    /// Standard-normal draws shared by every σ_B with the same seed.
    pub fn standard_draws(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.samples).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// `β_s = σ_B z_s`; a single zero for the bath model.
    pub fn betas(&self) -> Vec<f64> {
        match self.kind {
            DephasingKind::QuasiStaticScalar { sigma_b } => {
                self.standard_draws().into_iter().map(|z| sigma_b * z).collect()
            }
            DephasingKind::SingleBathMode { .. } => vec![0.0],
        }
    }
}

/// `β Σ_q σ_z^{(q)}` over every qubit of the space.
pub fn dephasing_term(space: &HilbertSpace, beta: f64) -> SparseOperator {
    let dim = space.dimension();
    let triplets = (0..dim)
        .map(|i| {
            let spin = i % space.spin_dimension();
            let z: i32 = (0..space.n_qubits())
                .map(|q| if (spin >> q) & 1 == 0 { 1 } else { -1 })
                .sum();
            (i, i, C64::new(beta * z as f64, 0.0))
        })
        .collect();
    SparseOperator::from_triplets(dim, triplets)
}

/// Hamiltonian and space for the gate plus dephasing. For the bath model the
/// returned space carries the bath oscillator as its last mode.
pub fn total_hamiltonian(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
    model: &DephasingModel,
    beta: f64,
) -> Result<(SystemHamiltonian, HilbertSpace), DecoherenceError> {
    model.validate()?;
    if space.n_modes() != modes.n_modes() {
        return Err(DecoherenceError::ModelMismatch(format!(
            "space has {} modes for a {}-mode spectrum",
            space.n_modes(),
            modes.n_modes()
        )));
    }
    match model.kind {
        DephasingKind::QuasiStaticScalar { .. } => {
            let ham = SystemHamiltonian::new(schedule, modes, space)?.with_static(dephasing_term(space, beta), 0.0)?;
            Ok((ham, space.clone()))
        }
        DephasingKind::SingleBathMode {
            coupling,
            frequency,
            cutoff,
        } => {
            let full = space.with_extra_mode(cutoff)?;
            let bath = full.n_modes() - 1;
            let factors: Vec<(usize, PauliAxis, C64)> = (0..full.n_qubits())
                .map(|q| (q, PauliAxis::Z, C64::new(coupling, 0.0)))
                .collect();
            let lower = full.pauli_ladder(&factors, Some(bath));
            let number = full.number(bath);
            let triplets = lower
                .iter()
                .chain(lower.adjoint().iter())
                .chain(number.iter().map(|(r, c, v)| (r, c, v * frequency)))
                .collect();
            let ham = SystemHamiltonian::new(schedule, modes, &full)?
                .with_static(SparseOperator::from_triplets(full.dimension(), triplets), frequency)?;
            Ok((ham, full))
        }
    }
}

/// Full propagator of the gate with dephasing; see [`total_hamiltonian`] for the space.
pub fn total_propagate(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
    model: &DephasingModel,
    beta: f64,
) -> Result<Propagation, DecoherenceError> {
    let (ham, full) = total_hamiltonian(schedule, modes, space, model, beta)?;
    let steps = ham.minimum_steps();
    Ok(propagate_with(&ham, &full, steps, &PropagationOptions::default())?)
}

/// Average gate fidelity on the code space with every mode starting in its
/// ground state. `columns[:, l]` is `U |code_l⟩|0⟩`.
pub fn code_gate_fidelity(
    columns: &DenseOperator,
    space: &HilbertSpace,
    enc: &LogicalEncoding,
    target: &DenseOperator,
) -> f64 {
    let codes = enc.code_indices();
    let d = codes.len();
    let s = space.spin_dimension();
    let mut process = 0.0;
    for f in 0..space.fock_dimension() {
        let mut overlap = ZERO;
        for (l, _) in codes.iter().enumerate() {
            for (lp, &cp) in codes.iter().enumerate() {
                overlap += target[(lp, l)].conj() * columns[(f * s + cp, l)];
            }
        }
        process += overlap.norm_sqr();
    }
    let process = process / (d * d) as f64;
    ((d as f64 * process + 1.0) / (d as f64 + 1.0)).min(1.0)
}

/// Per-target, per-mode diagnostics of the running residual `η(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualDiagnostics {
    pub max_abs_eta: f64,
    /// `max |∫η dt| / (max|η| T)` over targets and modes.
    pub first_moment: f64,
    /// `max |∫η³ dt| / (max|η|³ T)`.
    pub third_moment: f64,
    /// Largest `|η(t + T/2) + η(t)| / max|η|` on the grid.
    pub antisymmetry: f64,
    /// `‖∫ sin 2η̂(t) dt‖_max / T`, the mixing part of the first-order
    /// dephasing term, on the space's Fock ladder.
    pub first_order_mixing: f64,
}

pub fn residual_diagnostics(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    cutoff: usize,
) -> Result<ResidualDiagnostics, DecoherenceError> {
    let total = schedule.total_duration();
    let mut out = ResidualDiagnostics {
        max_abs_eta: 0.0,
        first_moment: 0.0,
        third_moment: 0.0,
        antisymmetry: 0.0,
        first_order_mixing: 0.0,
    };
    let a = annihilation_dense(cutoff);
    for target in &schedule.targets {
        for k in 0..modes.n_modes() {
            let traj = eta_trajectory(schedule, modes, target.ion, k)?;
            let n = traj.values.len() - 1;
            let h = total / n as f64;
            let peak = traj.values.iter().fold(0.0f64, |m, z| m.max(z.norm()));
            out.max_abs_eta = out.max_abs_eta.max(peak);
            if peak == 0.0 {
                continue;
            }
            let cubes: Vec<C64> = traj.values.iter().map(|z| z * z * z).collect();
            out.first_moment = out.first_moment.max(integrate(&traj.values, h).norm() / (peak * total));
            out.third_moment = out
                .third_moment
                .max(integrate(&cubes, h).norm() / (peak.powi(3) * total));
            if n % 2 == 0 {
                let half = n / 2;
                let anti = (0..=half)
                    .map(|m| (traj.values[m] + traj.values[m + half]).norm())
                    .fold(0.0, f64::max);
                out.antisymmetry = out.antisymmetry.max(anti / peak);
            } else {
                out.antisymmetry = f64::INFINITY;
            }
            let sines: Vec<DenseOperator> = traj.values.iter().map(|eta| sin_cos_two_eta(&a, *eta).0).collect();
            let mixing = integrate_operators(&sines, h);
            out.first_order_mixing = out.first_order_mixing.max(max_abs(&mixing) / total);
        }
    }
    Ok(out)
}

/// Simpson when the interval count is even, trapezoid otherwise.
fn integrate(values: &[C64], h: f64) -> C64 {
    if (values.len() - 1).is_multiple_of(2) && values.len() >= 3 {
        simpson_samples(values, h)
    } else {
        let n = values.len() - 1;
        (values[1..n].iter().sum::<C64>() + (values[0] + values[n]) * 0.5) * h
    }
}

fn integrate_operators(ops: &[DenseOperator], h: f64) -> DenseOperator {
    let (r, c) = ops[0].shape();
    DenseOperator::from_fn(r, c, |i, j| {
        let column: Vec<C64> = ops.iter().map(|o| o[(i, j)]).collect();
        integrate(&column, h)
    })
}

fn annihilation_dense(cutoff: usize) -> DenseOperator {
    let n = cutoff + 1;
    DenseOperator::from_fn(n, n, |r, c| {
        if c == r + 1 {
            C64::new((c as f64).sqrt(), 0.0)
        } else {
            ZERO
        }
    })
}

/// `(sin 2η̂, cos 2η̂)` with `η̂ = η a + η* a†` on a truncated ladder.
fn sin_cos_two_eta(a: &DenseOperator, eta: C64) -> (DenseOperator, DenseOperator) {
    let hat = a * eta + a.adjoint() * eta.conj();
    let plus = expm(&(&hat * (I * 2.0)));
    let minus = expm(&(&hat * (-I * 2.0)));
    let sin = (&plus - &minus) * C64::new(0.0, -0.5);
    let cos = (plus + minus) * C64::new(0.5, 0.0);
    (sin, cos)
}

/// `Z̃(t)` for the addressed pair together with the residual that fixes it.
#[derive(Clone, Debug)]
pub struct GaugedDephasing {
    pub eta: C64,
    /// Operator on the (qubits ⊗ single mode) space.
    pub operator: DenseOperator,
}

/// Spin factor multiplying `sin 2η̂` for an ion driven along `axis`.
fn mixing_operator(n_qubits: usize, qubit: usize, axis: PauliAxis) -> DenseOperator {
    use crate::oracle::spin_operator;
    match axis {
        PauliAxis::X => -spin_operator(n_qubits, &[(qubit, PauliAxis::Y)]),
        PauliAxis::Y => spin_operator(n_qubits, &[(qubit, PauliAxis::X)]),
        PauliAxis::Z => DenseOperator::zeros(1 << n_qubits, 1 << n_qubits),
    }
}

fn check_homogeneous(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
) -> Result<(), DecoherenceError> {
    if modes.n_modes() != 1 || space.n_modes() != 1 {
        return Err(DecoherenceError::ModelMismatch(
            "the gauged dephasing form needs exactly one mode".into(),
        ));
    }
    if schedule.targets.len() != 2 {
        return Err(DecoherenceError::ModelMismatch(
            "the gauged dephasing form needs exactly two targets".into(),
        ));
    }
    let g: Vec<f64> = schedule
        .targets
        .iter()
        .map(|t| Ok(t.weight * modes.coupling(t.ion, 0)?))
        .collect::<Result<_, crate::modes::ModeError>>()
        .map_err(|e| DecoherenceError::Pulse(e.into()))?;
    if (g[0] - g[1]).abs() > 1e-12 * g[0].abs().max(g[1].abs()) {
        return Err(DecoherenceError::ModelMismatch(format!(
            "couplings differ between the two ions ({} vs {})",
            g[0], g[1]
        )));
    }
    Ok(())
}

/// Closed form `Z̃ = cos 2η̂ · (σ_z^{(1)} + σ_z^{(2)}) + sin 2η̂ · (M_1 + M_2)` with
/// `M = −σ_y` for an x-axis force, `+σ_x` for a y-axis force and zero for z.
pub fn gauged_dephasing_operator(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
    t: f64,
) -> Result<GaugedDephasing, DecoherenceError> {
    check_homogeneous(schedule, modes, space)?;
    let nq = space.n_qubits();
    let eta = eta_at(schedule, modes, schedule.targets[0].ion, 0, t)?;
    let (sin, cos) = sin_cos_two_eta(&annihilation_dense(space.cutoff(0)), eta);
    let mut z = DenseOperator::zeros(1 << nq, 1 << nq);
    let mut mix = z.clone();
    for target in &schedule.targets {
        z += crate::oracle::spin_operator(nq, &[(target.ion, PauliAxis::Z)]);
        mix += mixing_operator(nq, target.ion, target.axis);
    }
    Ok(GaugedDephasing {
        eta,
        operator: cos.kronecker(&z) + sin.kronecker(&mix),
    })
}

/// `G⁻¹(t) Z G(t)` with `G(t) = exp(i Σ_μ η̂_μ(t) σ_α^{(μ)})` built as one dense exponential.
pub fn gauged_dephasing_by_conjugation(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
    t: f64,
) -> Result<DenseOperator, DecoherenceError> {
    check_homogeneous(schedule, modes, space)?;
    let nq = space.n_qubits();
    let a = annihilation_dense(space.cutoff(0));
    let mut generator = DenseOperator::zeros(space.dimension(), space.dimension());
    let mut z = DenseOperator::zeros(1 << nq, 1 << nq);
    for target in &schedule.targets {
        let eta = eta_at(schedule, modes, target.ion, 0, t)?;
        let hat = &a * eta + a.adjoint() * eta.conj();
        generator += hat.kronecker(&crate::oracle::spin_operator(nq, &[(target.ion, target.axis)])) * I;
        z += crate::oracle::spin_operator(nq, &[(target.ion, PauliAxis::Z)]);
    }
    let g = expm(&generator);
    let z_full = DenseOperator::identity(space.cutoff(0) + 1, space.cutoff(0) + 1).kronecker(&z);
    Ok(g.adjoint() * z_full * g)
}

/// `exp{i Σ_k Σ_μ [η_μ^k a_k + h.c.] σ_z^{(μ)}}` for a residual matrix
/// indexed like [`residual_eta`].
fn noise_operator_from_eta(
    schedule: &ForceSchedule,
    space: &HilbertSpace,
    eta: &DMatrix<C64>,
) -> Result<DenseOperator, DecoherenceError> {
    if let Some(t) = schedule.targets.iter().find(|t| t.axis != PauliAxis::Z) {
        return Err(DecoherenceError::ModelMismatch(format!(
            "the residual noise operator needs z-axis forces; ion {} uses {}",
            t.ion,
            t.axis.label()
        )));
    }
    if eta.ncols() > space.n_modes() {
        return Err(DecoherenceError::ModelMismatch(
            "space has fewer modes than the spectrum".into(),
        ));
    }
    let dim = space.dimension();
    let mut triplets = Vec::new();
    for k in 0..eta.ncols() {
        let factors: Vec<(usize, PauliAxis, C64)> = schedule
            .targets
            .iter()
            .enumerate()
            .map(|(m, t)| (t.ion, PauliAxis::Z, I * eta[(m, k)]))
            .collect();
        let lower = space.pauli_ladder(&factors, Some(k));
        triplets.extend(lower.iter());
        triplets.extend(lower.adjoint().iter().map(|(r, c, v)| (r, c, -v)));
    }
    let generator = SparseOperator::from_triplets(dim, triplets).to_dense();
    Ok(expm(&generator))
}

pub fn residual_noise_operator(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
) -> Result<DenseOperator, DecoherenceError> {
    let eta = residual_eta(schedule, modes)?;
    noise_operator_from_eta(schedule, space, &eta)
}

/// One noise operator per cycle, each from that cycle's contribution to `η`.
pub fn cycle_noise_operators(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
) -> Result<Vec<DenseOperator>, DecoherenceError> {
    cycle_residuals(schedule, modes)?
        .iter()
        .map(|eta| noise_operator_from_eta(schedule, space, eta))
        .collect()
}

/// Monte Carlo outcome for one schedule under one dephasing model.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseReport {
    pub mean_fidelity: f64,
    pub std_fidelity: f64,
    pub fidelities: Vec<f64>,
    pub betas: Vec<f64>,
    pub cycles: usize,
    pub steps: usize,
    pub residuals: ResidualDiagnostics,
}

impl NoiseReport {
    pub fn mean_infidelity(&self) -> f64 {
        let n = self.fidelities.len() as f64;
        self.fidelities.iter().map(|f| 1.0 - f).sum::<f64>() / n
    }
}

/// Everything fixed across noise samples.
#[derive(Clone, Debug)]
pub struct NoiseTask<'a> {
    pub schedule: &'a ForceSchedule,
    pub modes: &'a ModeSpectrum,
    pub space: &'a HilbertSpace,
    pub encoding: &'a LogicalEncoding,
    /// Ideal logical gate.
    pub target: &'a DenseOperator,
}

fn sample_columns(
    task: &NoiseTask,
    model: &DephasingModel,
    beta: f64,
    steps: Option<usize>,
    check: bool,
) -> Result<(DenseOperator, HilbertSpace, usize), DecoherenceError> {
    let (ham, full) = total_hamiltonian(task.schedule, task.modes, task.space, model, beta)?;
    let vacuum = vec![0; full.n_modes()];
    let cols: Vec<usize> = task
        .encoding
        .code_indices()
        .iter()
        .map(|&c| full.index(c, &vacuum))
        .collect();
    let opts = PropagationOptions {
        execution: Execution::Sequential,
        check_doubling: check,
        ..Default::default()
    };
    let p = propagate_columns(&ham, &full, &cols, steps.unwrap_or_else(|| ham.minimum_steps()), &opts)?;
    Ok((p.unitary, full, p.steps))
}

/// Mean code-space fidelity over the model's samples. The largest-|β| sample
/// is first propagated with step doubling; every sample then uses the
/// accepted step count.
pub fn noise_fidelity(
    task: &NoiseTask,
    model: &DephasingModel,
    execution: Execution,
) -> Result<NoiseReport, DecoherenceError> {
    model.validate()?;
    if task.encoding.n_physical() != task.space.n_qubits() {
        return Err(DecoherenceError::ModelMismatch(
            "encoding and space disagree on the qubit count".into(),
        ));
    }
    let betas = model.betas();
    let pilot = betas
        .iter()
        .copied()
        .fold(0.0f64, |m, b| if b.abs() > m.abs() { b } else { m });
    let (_, _, steps) = sample_columns(task, model, pilot, None, true)?;
    let fidelities = execution.try_map(&betas, |&beta| {
        let (cols, full, _) = sample_columns(task, model, beta, Some(steps), false)?;
        Ok::<f64, DecoherenceError>(code_gate_fidelity(&cols, &full, task.encoding, task.target))
    })?;
    let n = fidelities.len() as f64;
    let mean = fidelities.iter().sum::<f64>() / n;
    let var = if fidelities.len() > 1 {
        fidelities.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(NoiseReport {
        mean_fidelity: mean,
        std_fidelity: var.sqrt(),
        fidelities,
        betas,
        cycles: task.schedule.cycles(),
        steps,
        residuals: residual_diagnostics(task.schedule, task.modes, task.space.cutoff(0))?,
    })
}

/// Tolerance on the refocusing premise checks (relative to `max|η|`).
pub const REFOCUS_TOLERANCE: f64 = 1e-10;

/// Noise reports for a reference schedule and a refocused schedule of equal
/// total phase. The refocused schedule must satisfy `η(t + T/2) = −η(t)` and
/// have vanishing first and third moments of `η`.
pub fn refocus_compare(
    reference: &NoiseTask,
    refocused: &NoiseTask,
    model: &DephasingModel,
    execution: Execution,
) -> Result<(NoiseReport, NoiseReport), DecoherenceError> {
    let diag = residual_diagnostics(refocused.schedule, refocused.modes, refocused.space.cutoff(0))?;
    let checks = [
        ("eta(t + T/2) = -eta(t)", diag.antisymmetry),
        ("first moment of eta", diag.first_moment),
        ("third moment of eta", diag.third_moment),
    ];
    for (what, value) in checks {
        if !(value <= REFOCUS_TOLERANCE) {
            return Err(DecoherenceError::RefocusPremiseViolated(format!("{what}: {value:.3e}")));
        }
    }
    let a = noise_fidelity(reference, model, execution)?;
    let b = noise_fidelity(refocused, model, execution)?;
    Ok((a, b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanPoint {
    pub sigma_b: f64,
    pub mean_infidelity: f64,
    pub std_infidelity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseScan {
    pub points: Vec<ScanPoint>,
    /// Least-squares slope of `ln(mean infidelity)` against `ln σ_B`.
    pub slope: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64, DecoherenceError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(DecoherenceError::InvalidScan("need at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(DecoherenceError::InvalidScan(
            "log-log fit needs positive values".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(DecoherenceError::InvalidScan("all σ_B values coincide".into()));
    }
    Ok(sxy / sxx)
}

/// Mean infidelity over a σ_B grid with common random numbers.
pub fn noise_scan(
    task: &NoiseTask,
    model: &DephasingModel,
    sigmas: &[f64],
    execution: Execution,
) -> Result<NoiseScan, DecoherenceError> {
    if sigmas.is_empty() {
        return Err(DecoherenceError::InvalidScan("empty σ_B grid".into()));
    }
    if !matches!(model.kind, DephasingKind::QuasiStaticScalar { .. }) {
        return Err(DecoherenceError::InvalidScan(
            "scans need the quasi-static model".into(),
        ));
    }
    let points = sigmas
        .iter()
        .map(|&s| {
            let r = noise_fidelity(task, &model.with_sigma(s), execution)?;
            Ok(ScanPoint {
                sigma_b: s,
                mean_infidelity: r.mean_infidelity(),
                std_infidelity: r.std_fidelity,
            })
        })
        .collect::<Result<Vec<_>, DecoherenceError>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.sigma_b).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_infidelity).collect();
    let slope = log_log_slope(&xs, &ys).unwrap_or(f64::NAN);
    Ok(NoiseScan { points, slope })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThermalReport {
    pub fock_states: Vec<usize>,
    pub fidelities: Vec<f64>,
    pub spread: f64,
}

/// Fidelity of `⟨n|U|n⟩` against the spin gate `target` on the range of
/// `projector` (the full spin space or a code space) for each initial Fock
/// level `n` (all modes at `n`).
pub fn thermal_insensitivity_scan(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    space: &HilbertSpace,
    target: &DenseOperator,
    projector: &DenseOperator,
    fock_states: &[usize],
    execution: Execution,
) -> Result<ThermalReport, DecoherenceError> {
    if fock_states.is_empty() {
        return Err(DecoherenceError::InvalidScan("no Fock states requested".into()));
    }
    let ham = SystemHamiltonian::new(schedule, modes, space)?;
    let fidelities = execution.try_map(fock_states, |&n| {
        let fock = vec![n; space.n_modes()];
        let opts = PropagationOptions {
            execution: Execution::Sequential,
            guard_fock: n,
            ..Default::default()
        };
        let p = propagate_columns(&ham, space, &spin_columns(space, &fock), ham.minimum_steps(), &opts)?;
        let block = column_block(&p.unitary, space, &fock);
        Ok::<f64, DecoherenceError>(fidelity_mod_phase(target, &block, projector)?.0)
    })?;
    let max = fidelities.iter().copied().fold(f64::MIN, f64::max);
    let min = fidelities.iter().copied().fold(f64::MAX, f64::min);
    Ok(ThermalReport {
        fock_states: fock_states.to_vec(),
        fidelities,
        spread: max - min,
    })
}

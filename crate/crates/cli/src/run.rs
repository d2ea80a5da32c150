//! Command dispatch: turns a [`RunConfig`] into report tables.

use std::path::PathBuf;

use iondfs::decoherence::{
    noise_fidelity, noise_scan, refocus_compare, residual_diagnostics, thermal_insensitivity_scan, DecoherenceError,
    DephasingModel, NoiseReport, NoiseTask,
};
use iondfs::dfs::{DfsError, LogicalEncoding};
use iondfs::linalg::DenseOperator;
use iondfs::modes::{analyze, IonArrayConfig, ModeError, ModeSpectrum, Topology};
use iondfs::oracle::{
    analytic_gate_on, column_block, fidelity_mod_phase, propagate_columns, spin_columns, HilbertSpace, OracleError,
    PropagationOptions, SystemHamiltonian,
};
use iondfs::pulse::{
    coupling_phase, design_adiabatic_schedule, design_iterated_refocused_schedule, refocusing_signs, ForceSchedule,
    GatePair, PulseError, PulseShape,
};
use iondfs::Execution;
use thiserror::Error;

use crate::config::{Command, ConfigError, NoiseConfig, NoiseKind, PulseConfig, PulseSource, RunConfig, ShapeKind};
use crate::report::{write_atomic, Cell, Table};

/// Steps per period of the fastest mode for explicit-amplitude schedules.
const STEPS_PER_PERIOD: usize = 40;
/// Largest leakage tolerated when a gate is read as a logical gate.
const LEAKAGE_BOUND: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Dfs(#[from] DfsError),
    #[error(transparent)]
    Decoherence(#[from] DecoherenceError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Process exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitClass {
    Config = 2,
    Numerical = 3,
    Guard = 4,
}

impl RunError {
    pub fn class(&self) -> ExitClass {
        match self {
            RunError::Config(_) => ExitClass::Config,
            RunError::Io { .. } => ExitClass::Numerical,
            RunError::Mode(e) => mode_class(e),
            RunError::Pulse(e) => pulse_class(e),
            RunError::Oracle(e) => oracle_class(e),
            RunError::Dfs(e) => dfs_class(e),
            RunError::Decoherence(e) => match e {
                DecoherenceError::RefocusPremiseViolated(_) => ExitClass::Guard,
                DecoherenceError::Oracle(e) => oracle_class(e),
                DecoherenceError::Pulse(e) => pulse_class(e),
                DecoherenceError::Dfs(e) => dfs_class(e),
                DecoherenceError::InvalidModel(_)
                | DecoherenceError::ModelMismatch(_)
                | DecoherenceError::InvalidScan(_) => ExitClass::Config,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class() as i32
    }
}

fn mode_class(e: &ModeError) -> ExitClass {
    match e {
        ModeError::NotSymmetric(_) => ExitClass::Numerical,
        _ => ExitClass::Config,
    }
}

fn pulse_class(e: &PulseError) -> ExitClass {
    match e {
        PulseError::AdiabaticityViolated { .. } | PulseError::ResolutionTooCoarse { .. } => ExitClass::Guard,
        PulseError::Quadrature(_) => ExitClass::Numerical,
        PulseError::Mode(e) => mode_class(e),
        _ => ExitClass::Config,
    }
}

fn oracle_class(e: &OracleError) -> ExitClass {
    match e {
        OracleError::DimensionGuard { .. } | OracleError::TailPopulation { .. } => ExitClass::Guard,
        OracleError::NotConverged { .. } | OracleError::NotUnitary(_) | OracleError::ZeroTrace => ExitClass::Numerical,
        OracleError::Pulse(e) => pulse_class(e),
        OracleError::Mode(e) => mode_class(e),
        _ => ExitClass::Config,
    }
}

fn dfs_class(e: &DfsError) -> ExitClass {
    match e {
        DfsError::LeakageAboveThreshold { .. } => ExitClass::Guard,
        _ => ExitClass::Config,
    }
}

/// What a successful run produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: String,
    pub files: Vec<PathBuf>,
}

/// Everything shared by the commands once the config is typed.
struct Setup {
    full: ModeSpectrum,
    modes: ModeSpectrum,
    n_ions: usize,
}

impl Setup {
    fn new(cfg: &RunConfig) -> Result<Self, RunError> {
        let a = &cfg.array;
        let base = match a.topology {
            Topology::Chain => IonArrayConfig::chain(a.n_ions, a.omega0, a.kappa),
            Topology::Ring => IonArrayConfig::ring(a.n_ions, a.omega0, a.kappa),
        };
        let array = base.with_mass(a.mass).with_spacing(a.spacing).with_range(a.range);
        let full = analyze(&array)?;
        let modes = match &a.modes {
            Some(keep) => full.select(keep).map_err(|e| invalid("array.modes", &e.to_string()))?,
            None => full.clone(),
        };
        Ok(Setup {
            full,
            modes,
            n_ions: a.n_ions,
        })
    }

    fn pair(&self, p: &PulseConfig) -> GatePair {
        GatePair::new(p.targets.0, p.targets.1, p.axes.0, p.axes.1)
    }

    fn schedule(&self, cfg: &RunConfig) -> Result<ForceSchedule, RunError> {
        let p = cfg.pulse.as_ref().expect("pulse section checked at load");
        let pair = self.pair(p);
        let levels = p.refocusing_levels();
        let s = match (p.shape, p.source) {
            (ShapeKind::SmoothBump, PulseSource::TargetPhase(phi)) => {
                design_adiabatic_schedule(&self.modes, pair, phi, p.periods)?
            }
            (ShapeKind::Constant, PulseSource::TargetPhase(phi)) => {
                design_iterated_refocused_schedule(&self.modes, pair, phi, p.periods, levels)?
            }
            (shape, PulseSource::Amplitude(a)) => {
                let shape = match shape {
                    ShapeKind::SmoothBump => PulseShape::SmoothBump,
                    ShapeKind::Constant => PulseShape::Constant,
                    ShapeKind::KickTrain => PulseShape::KickTrain(p.levels.clone().unwrap_or_default()),
                };
                ForceSchedule::for_pair(pair, shape, a, p.duration(self.modes.min_frequency()))
                    .with_reversal(refocusing_signs(levels))
                    .with_resolution_for(&self.modes, STEPS_PER_PERIOD)
            }
            (ShapeKind::KickTrain, PulseSource::TargetPhase(_)) => unreachable!("rejected at load"),
        };
        s.validate()?;
        Ok(s)
    }

    fn space(&self, cfg: &RunConfig) -> Result<HilbertSpace, RunError> {
        Ok(HilbertSpace::new(
            self.n_ions,
            self.modes.n_modes(),
            cfg.space.fock_cutoff,
        )?)
    }

    fn encoding(&self, cfg: &RunConfig) -> Result<LogicalEncoding, RunError> {
        let pairs = match &cfg.array.encoding {
            Some(p) => p.clone(),
            None if self.n_ions.is_multiple_of(2) => (0..self.n_ions / 2).map(|l| (2 * l, 2 * l + 1)).collect(),
            None => return Err(invalid("array.encoding", "an odd ion count needs explicit pairs")),
        };
        LogicalEncoding::new(self.n_ions, pairs).map_err(|e| invalid("array.encoding", &e.to_string()))
    }

    /// Spin gate the schedule should implement, from its own phase.
    fn target(&self, cfg: &RunConfig, schedule: &ForceSchedule) -> Result<DenseOperator, RunError> {
        let p = cfg.pulse.as_ref().expect("pulse section checked at load");
        let phase = coupling_phase(schedule, &self.modes, p.targets)?.phase_total;
        Ok(analytic_gate_on(self.n_ions, phase, self.pair(p)))
    }

    /// The target gate restricted to the code; refused if it leaves the code.
    fn logical_target(&self, enc: &LogicalEncoding, gate: &DenseOperator) -> Result<DenseOperator, RunError> {
        let leakage = enc.leakage(gate);
        if leakage > LEAKAGE_BOUND {
            return Err(DfsError::LeakageAboveThreshold {
                leakage,
                bound: LEAKAGE_BOUND,
            }
            .into());
        }
        Ok(enc.restrict(gate)?)
    }
}

fn invalid(key: &str, reason: &str) -> RunError {
    RunError::Config(ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.to_string(),
    })
}

fn noise_model(n: &NoiseConfig) -> Result<DephasingModel, RunError> {
    let m = match n.kind {
        NoiseKind::QuasiStatic => DephasingModel::quasi_static(n.sigma_b, n.samples, n.seed),
        NoiseKind::BathMode => DephasingModel::bath_mode(n.bath_coupling, n.bath_frequency, n.bath_cutoff),
    };
    Ok(m?)
}

/// Writes report tables and remembers what was written.
struct Writer<'a> {
    cfg: &'a RunConfig,
    stamp: Option<u64>,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn table(&mut self, t: &Table) -> Result<(), RunError> {
        let dir = &self.cfg.output.dir;
        let written = t
            .write(dir, self.cfg.output.format, self.stamp)
            .map_err(|source| RunError::Io {
                path: dir.join(&t.name),
                source,
            })?;
        self.files.extend(written);
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), RunError> {
        let path = self.cfg.output.dir.join(name);
        write_atomic(&path, body.as_bytes()).map_err(|source| RunError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(path);
        Ok(())
    }
}

fn row<const N: usize>(cells: [Cell; N]) -> Vec<Cell> {
    cells.to_vec()
}

/// Runs the configured command. `stamp` is written as a `#` metadata line
/// at the top of each CSV report.
pub fn run(cfg: &RunConfig, stamp: Option<u64>) -> Result<Outcome, RunError> {
    std::fs::create_dir_all(&cfg.output.dir).map_err(|source| RunError::Io {
        path: cfg.output.dir.clone(),
        source,
    })?;
    let setup = Setup::new(cfg)?;
    let mut w = Writer {
        cfg,
        stamp,
        files: Vec::new(),
    };
    let summary = match cfg.command {
        Command::Modes => modes(&setup, &mut w)?,
        Command::Design => design(&setup, &mut w)?,
        Command::Simulate => simulate(&setup, &mut w)?,
        Command::NoiseScan => scan(&setup, &mut w)?,
        Command::Refocus => refocus(&setup, &mut w)?,
        Command::ThermalScan => thermal(&setup, &mut w)?,
    };
    Ok(Outcome {
        summary: format!("{}: {summary}", cfg.command.name()),
        files: w.files,
    })
}

fn modes(setup: &Setup, w: &mut Writer) -> Result<String, RunError> {
    let spectrum = &setup.full;
    let mut t = Table::new("modes", &["k", "omega_k"]);
    for (k, &omega) in spectrum.frequencies().iter().enumerate() {
        t.push(row([k.into(), omega.into()]));
    }
    w.table(&t)?;
    let mut columns = vec!["ion".to_string()];
    columns.extend((0..spectrum.n_modes()).map(|k| format!("d_{k}")));
    let mut d = Table::new("mode_matrix", &columns);
    let m = spectrum.mode_matrix();
    for ion in 0..spectrum.n_ions() {
        let mut r = vec![Cell::from(ion)];
        r.extend((0..spectrum.n_modes()).map(|k| Cell::from(m[(ion, k)])));
        d.push(r);
    }
    w.table(&d)?;
    Ok(format!(
        "{} modes, omega in [{:.6}, {:.6}]",
        spectrum.n_modes(),
        spectrum.min_frequency(),
        spectrum.max_frequency()
    ))
}

fn design(setup: &Setup, w: &mut Writer) -> Result<String, RunError> {
    let s = setup.schedule(w.cfg)?;
    let p = w.cfg.pulse.as_ref().expect("pulse section checked at load");
    let report = coupling_phase(&s, &setup.modes, p.targets)?;
    w.text("schedule.txt", &format!("{s}\n"))?;
    let mut t = Table::new(
        "design",
        &[
            "amplitude",
            "duration",
            "cycles",
            "steps_per_cycle",
            "phase",
            "phase_adiabatic",
            "max_abs_eta",
            "adiabaticity",
        ],
    );
    t.push(row([
        s.amplitude.into(),
        s.duration.into(),
        s.cycles().into(),
        s.steps_per_cycle.into(),
        report.phase_total.into(),
        report.phase_adiabatic.into(),
        report.max_abs_eta().into(),
        report.adiabaticity.into(),
    ]));
    w.table(&t)?;
    Ok(format!(
        "amplitude {:.6e}, duration {:.6}, phase {:.9}",
        s.amplitude,
        s.total_duration(),
        report.phase_total
    ))
}

fn simulate(setup: &Setup, w: &mut Writer) -> Result<String, RunError> {
    let cfg = w.cfg;
    let s = setup.schedule(cfg)?;
    let p = cfg.pulse.as_ref().expect("pulse section checked at load");
    let report = coupling_phase(&s, &setup.modes, p.targets)?;
    let space = setup.space(cfg)?;
    let ham = SystemHamiltonian::new(&s, &setup.modes, &space)?;
    let vacuum = vec![0; space.n_modes()];
    let opts = PropagationOptions {
        execution: Execution::default(),
        ..Default::default()
    };
    let steps = cfg.space.steps.unwrap_or_else(|| ham.minimum_steps());
    let prop = propagate_columns(&ham, &space, &spin_columns(&space, &vacuum), steps, &opts).map_err(|e| match e {
        OracleError::TooFewSteps { .. } | OracleError::MisalignedSteps { .. } if cfg.space.steps.is_some() => {
            invalid("space.steps", &e.to_string())
        }
        e => e.into(),
    })?;
    let block = column_block(&prop.unitary, &space, &vacuum);
    let target = analytic_gate_on(setup.n_ions, report.phase_total, setup.pair(p));
    let identity = DenseOperator::identity(space.spin_dimension(), space.spin_dimension());
    let (fidelity, global_phase) = fidelity_mod_phase(&target, &block, &identity)?;
    let mut t = Table::new(
        "simulate",
        &[
            "phase",
            "phase_adiabatic",
            "max_abs_eta",
            "adiabaticity",
            "fidelity",
            "global_phase",
            "step_doubling_diff",
            "steps",
            "max_tail_population",
        ],
    );
    t.push(row([
        report.phase_total.into(),
        report.phase_adiabatic.into(),
        report.max_abs_eta().into(),
        report.adiabaticity.into(),
        fidelity.into(),
        global_phase.into(),
        prop.doubling_difference.into(),
        prop.steps.into(),
        prop.max_tail_population.into(),
    ]));
    w.table(&t)?;
    let mut summary = format!(
        "phase {:.9}, max|eta| {:.3e}, fidelity {:.12}",
        report.phase_total,
        report.max_abs_eta(),
        fidelity
    );
    if let Some(n) = &cfg.noise {
        let enc = setup.encoding(cfg)?;
        let logical = setup.logical_target(&enc, &setup.target(cfg, &s)?)?;
        let task = NoiseTask {
            schedule: &s,
            modes: &setup.modes,
            space: &space,
            encoding: &enc,
            target: &logical,
        };
        let r = noise_fidelity(&task, &noise_model(n)?, Execution::default())?;
        let mut t = Table::new(
            "simulate_noise",
            &[
                "mean_infidelity",
                "std",
                "samples",
                "steps",
                "first_moment",
                "third_moment",
            ],
        );
        t.push(noise_row(&r));
        w.table(&t)?;
        summary.push_str(&format!(", noisy code infidelity {:.6e}", r.mean_infidelity()));
    }
    Ok(summary)
}

fn noise_row(r: &NoiseReport) -> Vec<Cell> {
    row([
        r.mean_infidelity().into(),
        r.std_fidelity.into(),
        r.fidelities.len().into(),
        r.steps.into(),
        r.residuals.first_moment.into(),
        r.residuals.third_moment.into(),
    ])
}

/// Schedule, space, encoding and logical target for the noise commands.
struct NoiseSetup {
    schedule: ForceSchedule,
    space: HilbertSpace,
    encoding: LogicalEncoding,
    target: DenseOperator,
}

impl NoiseSetup {
    fn new(setup: &Setup, cfg: &RunConfig) -> Result<Self, RunError> {
        let schedule = setup.schedule(cfg)?;
        let encoding = setup.encoding(cfg)?;
        let gate = setup.target(cfg, &schedule)?;
        Ok(NoiseSetup {
            space: setup.space(cfg)?,
            target: setup.logical_target(&encoding, &gate)?,
            schedule,
            encoding,
        })
    }

    fn task<'a>(&'a self, schedule: &'a ForceSchedule, modes: &'a ModeSpectrum) -> NoiseTask<'a> {
        NoiseTask {
            schedule,
            modes,
            space: &self.space,
            encoding: &self.encoding,
            target: &self.target,
        }
    }
}

fn scan(setup: &Setup, w: &mut Writer) -> Result<String, RunError> {
    let cfg = w.cfg;
    let n = cfg.noise.as_ref().expect("noise section checked at load");
    let ns = NoiseSetup::new(setup, cfg)?;
    let result = noise_scan(
        &ns.task(&ns.schedule, &setup.modes),
        &noise_model(n)?,
        &n.sigmas,
        Execution::default(),
    )?;
    let mut t = Table::new("noise_scan", &["beta", "mean_infidelity", "std"]);
    let mut plot = Table::new("noise_scan_plot", &["x", "y"]);
    for p in &result.points {
        t.push(row([
            p.sigma_b.into(),
            p.mean_infidelity.into(),
            p.std_infidelity.into(),
        ]));
        plot.push(row([p.sigma_b.into(), p.mean_infidelity.into()]));
    }
    w.table(&t)?;
    w.table(&plot)?;
    let mut fit = Table::new("noise_scan_fit", &["cycles", "slope"]);
    fit.push(row([ns.schedule.cycles().into(), result.slope.into()]));
    w.table(&fit)?;
    Ok(format!(
        "{} points, log-log slope {:.4}",
        result.points.len(),
        result.slope
    ))
}

fn refocus(setup: &Setup, w: &mut Writer) -> Result<String, RunError> {
    let cfg = w.cfg;
    let n = cfg.noise.as_ref().expect("noise section checked at load");
    let ns = NoiseSetup::new(setup, cfg)?;
    let reference = ns.schedule.merged_single_cycle()?;
    let (one, many) = refocus_compare(
        &ns.task(&reference, &setup.modes),
        &ns.task(&ns.schedule, &setup.modes),
        &noise_model(n)?,
        Execution::default(),
    )?;
    let reference_moments = residual_diagnostics(&reference, &setup.modes, ns.space.cutoff(0))?;
    let mut t = Table::new(
        "refocus",
        &["cycles", "infidelity", "std", "first_moment", "third_moment"],
    );
    for (r, d) in [(&one, &reference_moments), (&many, &many.residuals)] {
        t.push(row([
            r.cycles.into(),
            r.mean_infidelity().into(),
            r.std_fidelity.into(),
            d.first_moment.into(),
            d.third_moment.into(),
        ]));
    }
    w.table(&t)?;
    let ratio = many.mean_infidelity() / one.mean_infidelity();
    let mut s = Table::new("refocus_summary", &["sigma_b", "samples", "ratio"]);
    s.push(row([n.sigma_b.into(), n.samples.into(), ratio.into()]));
    w.table(&s)?;
    Ok(format!(
        "infidelity {:.6e} (1 cycle) vs {:.6e} ({} cycles), ratio {:.4}",
        one.mean_infidelity(),
        many.mean_infidelity(),
        many.cycles,
        ratio
    ))
}

fn thermal(setup: &Setup, w: &mut Writer) -> Result<String, RunError> {
    let cfg = w.cfg;
    let s = setup.schedule(cfg)?;
    let space = setup.space(cfg)?;
    let target = setup.target(cfg, &s)?;
    let identity = DenseOperator::identity(space.spin_dimension(), space.spin_dimension());
    let r = thermal_insensitivity_scan(
        &s,
        &setup.modes,
        &space,
        &target,
        &identity,
        &cfg.space.fock_states,
        Execution::default(),
    )?;
    let mut t = Table::new("thermal_scan", &["fock", "fidelity"]);
    let mut plot = Table::new("thermal_scan_plot", &["x", "y"]);
    for (&n, &f) in r.fock_states.iter().zip(&r.fidelities) {
        t.push(row([n.into(), f.into()]));
        plot.push(row([(n as f64).into(), f.into()]));
    }
    w.table(&t)?;
    w.table(&plot)?;
    let mut summary = Table::new("thermal_scan_summary", &["min_fidelity", "spread"]);
    let min = r.fidelities.iter().copied().fold(f64::INFINITY, f64::min);
    summary.push(row([min.into(), r.spread.into()]));
    w.table(&summary)?;
    Ok(format!(
        "{} Fock states, min fidelity {:.12}, spread {:.3e}",
        r.fock_states.len(),
        min,
        r.spread
    ))
}

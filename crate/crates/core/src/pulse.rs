//! Spin-dependent force schedules and the integrals that fix the gate:
//! closure residuals `η_μ^k(T)`, the pair coupling `J_ij^k(t)` and the
//! accumulated phase `Φ(T) = Σ_k ∫ J_ij^k dt`.
//!
//! Every target ion shares one unit profile `p(t)`; ion `μ` feels
//! `f_μ(t) = A w_μ p(t)` and couples to mode `k` through
//! `g_μ^k(t) = D̃_{μk} f_μ(t)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::exec::Execution;
use crate::linalg::{PauliAxis, C64, ZERO};
use crate::modes::{ModeError, ModeSpectrum};
use crate::quadrature::{self, cumulative_simpson, simpson, QuadratureError};

/// Default time resolution: samples per period of the fastest mode.
pub const STEPS_PER_PERIOD: usize = 40;
/// Upper bound on `max|ḟ| / ω_min` accepted for adiabatic designs.
pub const ADIABATICITY_BOUND: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PulseError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error("time {t} outside the schedule support [0, {end}]")]
    TimeOutOfRange { t: f64, end: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("invalid ion pair: {0}")]
    InvalidPair(String),
    #[error("degenerate design request: {0}")]
    DegenerateRequest(String),
    #[error("adiabaticity {adiabaticity:.4} exceeds the bound {bound}")]
    AdiabaticityViolated { adiabaticity: f64, bound: f64 },
    #[error("mode {mode} completes {periods:.6} periods per half cycle; refocusing needs an integer")]
    IncommensurateModes { mode: usize, periods: f64 },
    #[error("time step {dt:.4e} exceeds the resolution limit {limit:.4e}")]
    ResolutionTooCoarse { dt: f64, limit: f64 },
}

/// One addressed ion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceTarget {
    pub ion: usize,
    pub axis: PauliAxis,
    /// Relative strength and sign of this ion's force.
    pub weight: f64,
}

impl ForceTarget {
    pub fn new(ion: usize, axis: PauliAxis) -> Self {
        ForceTarget { ion, axis, weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PulseShape {
    /// `sin²(π t / T)` per cycle.
    SmoothBump,
    Constant,
    /// Equal-length piecewise-constant levels per cycle.
    KickTrain(Vec<f64>),
    /// Samples on a uniform grid over one cycle, linearly interpolated.
    Sampled(Vec<f64>),
}

impl PulseShape {
    fn name(&self) -> &'static str {
        match self {
            PulseShape::SmoothBump => "smooth_bump",
            PulseShape::Constant => "constant",
            PulseShape::KickTrain(_) => "kick_train",
            PulseShape::Sampled(_) => "sampled",
        }
    }
}

/// Which ions and axes a two-qubit interaction addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatePair {
    pub ions: [usize; 2],
    pub axes: [PauliAxis; 2],
}

impl GatePair {
    pub fn new(i: usize, j: usize, axis_i: PauliAxis, axis_j: PauliAxis) -> Self {
        GatePair {
            ions: [i, j],
            axes: [axis_i, axis_j],
        }
    }

    pub fn zz(i: usize, j: usize) -> Self {
        Self::new(i, j, PauliAxis::Z, PauliAxis::Z)
    }

    pub fn xx(i: usize, j: usize) -> Self {
        Self::new(i, j, PauliAxis::X, PauliAxis::X)
    }

    /// `σ_y^{(i)} σ_x^{(j)}`, the logical `π_y` generator on a code pair.
    pub fn yx(i: usize, j: usize) -> Self {
        Self::new(i, j, PauliAxis::Y, PauliAxis::X)
    }
}

/// A smooth stretch of the schedule: one segment of one cycle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Piece {
    pub cycle: usize,
    pub segment: usize,
    pub t0: f64,
    pub t1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForceSchedule {
    pub targets: Vec<ForceTarget>,
    pub shape: PulseShape,
    pub amplitude: f64,
    /// Duration of one cycle.
    pub duration: f64,
    /// Sign applied to each cycle; its length is the cycle count.
    pub reversal: Vec<f64>,
    /// Uniform grid: time steps per cycle.
    pub steps_per_cycle: usize,
}

impl ForceSchedule {
    /// Single cycle with a 400-step grid.
    pub fn new(targets: Vec<ForceTarget>, shape: PulseShape, amplitude: f64, duration: f64) -> Self {
        ForceSchedule {
            targets,
            shape,
            amplitude,
            duration,
            reversal: vec![1.0],
            steps_per_cycle: 400,
        }
    }

    pub fn for_pair(pair: GatePair, shape: PulseShape, amplitude: f64, duration: f64) -> Self {
        Self::new(
            vec![
                ForceTarget::new(pair.ions[0], pair.axes[0]),
                ForceTarget::new(pair.ions[1], pair.axes[1]),
            ],
            shape,
            amplitude,
            duration,
        )
    }

    pub fn with_reversal(mut self, signs: Vec<f64>) -> Self {
        self.reversal = signs;
        self
    }

    pub fn with_steps_per_cycle(mut self, steps: usize) -> Self {
        self.steps_per_cycle = steps;
        self
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    /// Smallest valid grid with at least `per_period` steps per period of the fastest mode.
    pub fn with_resolution_for(mut self, modes: &ModeSpectrum, per_period: usize) -> Self {
        self.steps_per_cycle = resolution_steps(
            self.duration,
            modes.max_frequency(),
            per_period,
            self.segments_per_cycle(),
        );
        self
    }

    pub fn cycles(&self) -> usize {
        self.reversal.len()
    }

    pub fn total_duration(&self) -> f64 {
        self.duration * self.cycles() as f64
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_cycle * self.cycles()
    }

    pub fn dt(&self) -> f64 {
        self.duration / self.steps_per_cycle as f64
    }

    pub fn segments_per_cycle(&self) -> usize {
        match &self.shape {
            PulseShape::SmoothBump | PulseShape::Constant => 1,
            PulseShape::KickTrain(levels) => levels.len().max(1),
            PulseShape::Sampled(samples) => samples.len().saturating_sub(1).max(1),
        }
    }

    pub fn target_of(&self, ion: usize) -> Option<&ForceTarget> {
        self.targets.iter().find(|t| t.ion == ion)
    }

    pub fn validate(&self) -> Result<(), PulseError> {
        let bad = |s: String| Err(PulseError::InvalidSchedule(s));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !self.amplitude.is_finite() {
            return bad("amplitude must be finite".into());
        }
        if self.reversal.is_empty() {
            return bad("at least one cycle is required".into());
        }
        if self.reversal.iter().any(|s| *s != 1.0 && *s != -1.0) {
            return bad("reversal flags must be +1 or -1".into());
        }
        for (a, t) in self.targets.iter().enumerate() {
            if !t.weight.is_finite() {
                return bad(format!("weight of ion {} is not finite", t.ion));
            }
            if self.targets[..a].iter().any(|u| u.ion == t.ion) {
                return bad(format!("ion {} is targeted twice", t.ion));
            }
        }
        match &self.shape {
            PulseShape::KickTrain(levels) if levels.is_empty() || levels.iter().any(|l| !l.is_finite()) => {
                return bad("kick train needs finite levels".into())
            }
            PulseShape::Sampled(s) if s.len() < 2 || s.iter().any(|l| !l.is_finite()) => {
                return bad("sampled shape needs at least two finite samples".into())
            }
            _ => {}
        }
        if self.steps_per_cycle < 2 || !self.steps_per_cycle.is_multiple_of(self.segments_per_cycle()) {
            return bad(format!(
                "steps per cycle ({}) must be at least 2 and a multiple of the segment count ({})",
                self.steps_per_cycle,
                self.segments_per_cycle()
            ));
        }
        Ok(())
    }

    /// The grid must resolve the fastest mode with [`STEPS_PER_PERIOD`] steps.
    pub fn check_resolution(&self, modes: &ModeSpectrum) -> Result<(), PulseError> {
        let limit = 2.0 * PI / modes.max_frequency() / STEPS_PER_PERIOD as f64;
        let dt = self.dt();
        if dt > limit * (1.0 + 1e-12) {
            return Err(PulseError::ResolutionTooCoarse { dt, limit });
        }
        Ok(())
    }

    pub fn pieces(&self) -> Vec<Piece> {
        let segs = self.segments_per_cycle();
        let seg_len = self.duration / segs as f64;
        (0..self.cycles())
            .flat_map(|cycle| {
                let start = cycle as f64 * self.duration;
                (0..segs).map(move |segment| Piece {
                    cycle,
                    segment,
                    t0: start + segment as f64 * seg_len,
                    t1: if segment + 1 == segs {
                        start + self.duration
                    } else {
                        start + (segment + 1) as f64 * seg_len
                    },
                })
            })
            .collect()
    }

    /// Signed unit profile on `piece`, using one-sided values at its ends.
    pub fn piece_profile(&self, piece: &Piece, t: f64) -> f64 {
        let sign = self.reversal[piece.cycle];
        let local = t - piece.cycle as f64 * self.duration;
        let shape = match &self.shape {
            PulseShape::SmoothBump => {
                if local <= 0.0 || local >= self.duration {
                    0.0
                } else {
                    (PI * local / self.duration).sin().powi(2)
                }
            }
            PulseShape::Constant => 1.0,
            PulseShape::KickTrain(levels) => levels[piece.segment],
            PulseShape::Sampled(samples) => {
                let seg_len = self.duration / (samples.len() - 1) as f64;
                let x = ((local - piece.segment as f64 * seg_len) / seg_len).clamp(0.0, 1.0);
                samples[piece.segment] * (1.0 - x) + samples[piece.segment + 1] * x
            }
        };
        sign * shape
    }

    fn locate(&self, t: f64) -> Piece {
        let pieces = self.pieces();
        let idx = pieces.iter().position(|p| t < p.t1).unwrap_or(pieces.len() - 1);
        pieces[idx]
    }

    /// Signed unit profile `p(t)`; right-continuous at internal breakpoints.
    pub fn profile(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.total_duration() {
            return 0.0;
        }
        self.piece_profile(&self.locate(t), t)
    }

    /// Force on `ion` at time `t`; zero for ions that are not targeted.
    pub fn force(&self, ion: usize, t: f64) -> f64 {
        match self.target_of(ion) {
            Some(target) => self.amplitude * target.weight * self.profile(t),
            None => 0.0,
        }
    }

    fn max_weight(&self) -> f64 {
        self.targets.iter().map(|t| t.weight.abs()).fold(0.0, f64::max)
    }

    /// `max_t |ḟ|` over targets; infinite when the force jumps anywhere,
    /// including switching on at `t = 0` or off at the end.
    pub fn max_force_rate(&self) -> f64 {
        let scale = self.amplitude.abs() * self.max_weight();
        if scale == 0.0 {
            return 0.0;
        }
        let pieces = self.pieces();
        let mut left = 0.0;
        for p in &pieces {
            if (self.piece_profile(p, p.t0) - left).abs() > 1e-14 {
                return f64::INFINITY;
            }
            left = self.piece_profile(p, p.t1);
        }
        if left.abs() > 1e-14 {
            return f64::INFINITY;
        }
        let slope = match &self.shape {
            PulseShape::SmoothBump => PI / self.duration,
            PulseShape::Constant | PulseShape::KickTrain(_) => 0.0,
            PulseShape::Sampled(s) => {
                let seg_len = self.duration / (s.len() - 1) as f64;
                s.windows(2).map(|w| (w[1] - w[0]).abs() / seg_len).fold(0.0, f64::max)
            }
        };
        scale * slope
    }

    /// Same total duration, amplitude and targets as one unreversed cycle.
    /// Only defined for constant pulses, where it carries the same phase.
    pub fn merged_single_cycle(&self) -> Result<ForceSchedule, PulseError> {
        if self.shape != PulseShape::Constant {
            return Err(PulseError::InvalidSchedule(
                "only constant pulses can be merged into one cycle".into(),
            ));
        }
        Ok(ForceSchedule {
            duration: self.total_duration(),
            reversal: vec![1.0],
            steps_per_cycle: self.total_steps(),
            ..self.clone()
        })
    }

    /// Check targets against a mode spectrum.
    fn check_targets(&self, modes: &ModeSpectrum) -> Result<(), PulseError> {
        for t in &self.targets {
            if t.ion >= modes.n_ions() {
                return Err(ModeError::IndexOutOfRange {
                    what: "ion",
                    index: t.ion,
                    len: modes.n_ions(),
                }
                .into());
            }
        }
        Ok(())
    }
}

fn resolution_steps(duration: f64, max_frequency: f64, per_period: usize, segments: usize) -> usize {
    let periods = duration * max_frequency / (2.0 * PI);
    let min = (periods * per_period as f64 - 1e-9).ceil().max(2.0) as usize;
    let unit = 2 * segments;
    min.div_ceil(unit) * unit
}

impl fmt::Display for ForceSchedule {
    /// One-line record: `shape=… amplitude=… duration=… cycles=… reversal=…
    /// steps_per_cycle=… targets=ion:axis:weight,…` plus `levels=`/`samples=`
    /// for kick trains and sampled shapes.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        write!(
            f,
            "shape={} amplitude={:?} duration={:?} cycles={} reversal={} steps_per_cycle={} targets={}",
            self.shape.name(),
            self.amplitude,
            self.duration,
            self.cycles(),
            join(&self.reversal),
            self.steps_per_cycle,
            self.targets
                .iter()
                .map(|t| format!("{}:{}:{:?}", t.ion, t.axis.label(), t.weight))
                .collect::<Vec<_>>()
                .join(",")
        )?;
        match &self.shape {
            PulseShape::KickTrain(levels) => write!(f, " levels={}", join(levels)),
            PulseShape::Sampled(samples) => write!(f, " samples={}", join(samples)),
            _ => Ok(()),
        }
    }
}

impl FromStr for ForceSchedule {
    type Err = PulseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| PulseError::InvalidSchedule(m);
        let mut fields = std::collections::BTreeMap::new();
        for token in s.split_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed field `{token}`")))?;
            if fields.insert(k, v).is_some() {
                return Err(bad(format!("duplicate field `{k}`")));
            }
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(|| bad(format!("missing field `{k}`")));
        let num = |k: &str, v: &str| {
            v.parse::<f64>()
                .map_err(|_| bad(format!("field `{k}`: bad number `{v}`")))
        };
        let list = |k: &str, v: &str| -> Result<Vec<f64>, PulseError> { v.split(',').map(|x| num(k, x)).collect() };
        let shape_name = take("shape")?;
        let amplitude = num("amplitude", take("amplitude")?)?;
        let duration = num("duration", take("duration")?)?;
        let cycles: usize = take("cycles")?
            .parse()
            .map_err(|_| bad("field `cycles`: bad integer".into()))?;
        let reversal = list("reversal", take("reversal")?)?;
        if reversal.len() != cycles {
            return Err(bad(format!("{} reversal flags for {cycles} cycles", reversal.len())));
        }
        let steps_per_cycle = take("steps_per_cycle")?
            .parse()
            .map_err(|_| bad("field `steps_per_cycle`: bad integer".into()))?;
        let targets = take("targets")?
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                let parts: Vec<&str> = t.split(':').collect();
                let (ion, axis, weight) = match parts.as_slice() {
                    [i, a] => (*i, *a, "1"),
                    [i, a, w] => (*i, *a, *w),
                    _ => return Err(bad(format!("malformed target `{t}`"))),
                };
                Ok(ForceTarget {
                    ion: ion.parse().map_err(|_| bad(format!("bad ion in `{t}`")))?,
                    axis: PauliAxis::from_label(axis).ok_or_else(|| bad(format!("bad axis in `{t}`")))?,
                    weight: num("targets", weight)?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let shape = match shape_name {
            "smooth_bump" => PulseShape::SmoothBump,
            "constant" => PulseShape::Constant,
            "kick_train" => PulseShape::KickTrain(list("levels", take("levels")?)?),
            "sampled" => PulseShape::Sampled(list("samples", take("samples")?)?),
            other => return Err(bad(format!("unknown shape `{other}`"))),
        };
        if let Some(k) = fields.keys().next() {
            return Err(bad(format!("unknown field `{k}`")));
        }
        let schedule = ForceSchedule {
            targets,
            shape,
            amplitude,
            duration,
            reversal,
            steps_per_cycle,
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Residuals, per-mode phases and the adiabatic estimate for one ion pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    /// `η_μ^k(T)` indexed by (target position, mode).
    pub eta: DMatrix<C64>,
    pub phase_total: f64,
    pub phase_per_mode: Vec<f64>,
    pub phase_adiabatic: f64,
    /// Filled in by the oracle, which extracts it numerically.
    pub global_phase: Option<f64>,
    /// `max_t |ḟ| / ω_min`.
    pub adiabaticity: f64,
}

impl PhaseReport {
    pub fn max_abs_eta(&self) -> f64 {
        self.eta.iter().fold(0.0, |m, z| m.max(z.norm()))
    }
}

/// `g_μ^k(t) = D̃_{μk} f_μ(t)`.
pub fn eval_g(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    ion: usize,
    mode: usize,
    t: f64,
) -> Result<f64, PulseError> {
    let coupling = modes.coupling(ion, mode)?;
    let end = schedule.total_duration();
    if !(t >= 0.0 && t <= end * (1.0 + 1e-12)) {
        return Err(PulseError::TimeOutOfRange { t, end });
    }
    Ok(coupling * schedule.force(ion, t))
}

fn base_intervals(schedule: &ForceSchedule) -> usize {
    let n = (schedule.steps_per_cycle / schedule.segments_per_cycle()).max(2);
    n + n % 2
}

/// `∫ p(t) e^{-iωt} dt` over `pieces` with `n` intervals each, and `∫|p|`.
fn profile_transform(schedule: &ForceSchedule, pieces: &[Piece], omega: f64, n: usize) -> (C64, f64) {
    let mut value = ZERO;
    let mut scale = 0.0;
    for p in pieces {
        value += simpson(
            |t| C64::from_polar(schedule.piece_profile(p, t), -omega * t),
            p.t0,
            p.t1,
            n,
        );
        scale += simpson(|t| C64::new(schedule.piece_profile(p, t).abs(), 0.0), p.t0, p.t1, n).re;
    }
    (value, scale)
}

fn refined_transforms(
    schedule: &ForceSchedule,
    pieces: &[Piece],
    modes: &ModeSpectrum,
) -> Result<Vec<C64>, PulseError> {
    let omegas = modes.frequencies().to_vec();
    let r = quadrature::refine(base_intervals(schedule), |n| {
        let out = Execution::default().map(&omegas, |&w| profile_transform(schedule, pieces, w, n));
        (out.iter().map(|o| o.0).collect(), out.iter().map(|o| o.1).collect())
    })?;
    Ok(r.value)
}

fn eta_from_transforms(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    transforms: &[C64],
) -> Result<DMatrix<C64>, PulseError> {
    let mut eta = DMatrix::from_element(schedule.targets.len(), modes.n_modes(), ZERO);
    for (a, t) in schedule.targets.iter().enumerate() {
        for (k, tr) in transforms.iter().enumerate() {
            eta[(a, k)] = tr * (modes.coupling(t.ion, k)? * t.weight * schedule.amplitude);
        }
    }
    Ok(eta)
}

/// `η_μ^k(T) = ∫_0^T g_μ^k(t) e^{-iω_k t} dt` for every target and mode.
pub fn residual_eta(schedule: &ForceSchedule, modes: &ModeSpectrum) -> Result<DMatrix<C64>, PulseError> {
    schedule.validate()?;
    schedule.check_targets(modes)?;
    let transforms = refined_transforms(schedule, &schedule.pieces(), modes)?;
    eta_from_transforms(schedule, modes, &transforms)
}

/// The contribution of each cycle to `η`, in the global time frame.
pub fn cycle_residuals(schedule: &ForceSchedule, modes: &ModeSpectrum) -> Result<Vec<DMatrix<C64>>, PulseError> {
    schedule.validate()?;
    schedule.check_targets(modes)?;
    let pieces = schedule.pieces();
    (0..schedule.cycles())
        .map(|c| {
            let own: Vec<Piece> = pieces.iter().copied().filter(|p| p.cycle == c).collect();
            let transforms = refined_transforms(schedule, &own, modes)?;
            eta_from_transforms(schedule, modes, &transforms)
        })
        .collect()
}

/// `η_μ^k(t)` at an arbitrary time.
pub fn eta_at(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    ion: usize,
    mode: usize,
    t: f64,
) -> Result<C64, PulseError> {
    schedule.validate()?;
    let coupling = modes.coupling(ion, mode)?;
    let end = schedule.total_duration();
    if !(t >= 0.0 && t <= end * (1.0 + 1e-12)) {
        return Err(PulseError::TimeOutOfRange { t, end });
    }
    let Some(target) = schedule.target_of(ion) else {
        return Ok(ZERO);
    };
    let pieces: Vec<Piece> = schedule
        .pieces()
        .into_iter()
        .filter(|p| p.t0 < t)
        .map(|p| Piece { t1: p.t1.min(t), ..p })
        .collect();
    let omega = modes.frequency(mode);
    let r = quadrature::refine(base_intervals(schedule), |n| {
        let (v, s) = profile_transform(schedule, &pieces, omega, n);
        (vec![v], vec![s])
    })?;
    Ok(r.value[0] * (coupling * target.weight * schedule.amplitude))
}

/// `η(t)` sampled on the schedule grid.
#[derive(Clone, Debug)]
pub struct EtaTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<C64>,
}

/// Running residual of one target on the schedule's own grid (no refinement).
pub fn eta_trajectory(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    ion: usize,
    mode: usize,
) -> Result<EtaTrajectory, PulseError> {
    schedule.validate()?;
    let coupling = modes.coupling(ion, mode)?;
    let scale = coupling * schedule.target_of(ion).map_or(0.0, |t| t.weight) * schedule.amplitude;
    let omega = modes.frequency(mode);
    let per_piece = schedule.steps_per_cycle / schedule.segments_per_cycle();
    let mut times = vec![0.0];
    let mut values = vec![ZERO];
    for p in schedule.pieces() {
        let h = (p.t1 - p.t0) / per_piece as f64;
        let samples: Vec<C64> = (0..=per_piece)
            .map(|m| {
                let t = if m == per_piece { p.t1 } else { p.t0 + m as f64 * h };
                C64::from_polar(schedule.piece_profile(&p, t), -omega * t)
            })
            .collect();
        let start = *values.last().unwrap();
        let cum = cumulative_simpson(&samples, h);
        for (m, c) in cum.iter().enumerate().skip(1) {
            times.push(if m == per_piece { p.t1 } else { p.t0 + m as f64 * h });
            values.push(start + c * scale);
        }
    }
    Ok(EtaTrajectory { times, values })
}

fn pair_targets(schedule: &ForceSchedule, pair: (usize, usize)) -> Result<(ForceTarget, ForceTarget), PulseError> {
    let (i, j) = pair;
    if i == j {
        return Err(PulseError::InvalidPair(format!("ion {i} paired with itself")));
    }
    let (Some(ti), Some(tj)) = (schedule.target_of(i), schedule.target_of(j)) else {
        return Err(PulseError::InvalidPair(format!(
            "ions {i} and {j} must both be targeted"
        )));
    };
    if schedule.targets.len() != 2 {
        return Err(PulseError::InvalidPair(format!(
            "schedule must target exactly ions {i} and {j}, found {} targets",
            schedule.targets.len()
        )));
    }
    Ok((*ti, *tj))
}

/// `Ψ_k = ∫_0^T p(t) ∫_0^t p(t') sin ω(t' − t) dt' dt` on `n` intervals per piece,
/// with the inner integral carried as `E(t) = ∫_0^t p e^{iωt'}` so that the
/// integrand is `p(t) Im(e^{-iωt} E(t))`. Returns (Ψ, ∫|integrand|).
fn double_integral(schedule: &ForceSchedule, omega: f64, n: usize) -> (f64, f64) {
    let mut running = ZERO;
    let mut total = 0.0;
    let mut scale = 0.0;
    for p in schedule.pieces() {
        let h = (p.t1 - p.t0) / n as f64;
        let ts: Vec<f64> = (0..=n)
            .map(|m| if m == n { p.t1 } else { p.t0 + m as f64 * h })
            .collect();
        let prof: Vec<f64> = ts.iter().map(|&t| schedule.piece_profile(&p, t)).collect();
        let inner: Vec<C64> = ts
            .iter()
            .zip(&prof)
            .map(|(&t, &v)| C64::from_polar(v, omega * t))
            .collect();
        let cum = cumulative_simpson(&inner, h);
        let outer: Vec<f64> = ts
            .iter()
            .zip(&prof)
            .zip(&cum)
            .map(|((&t, &v), c)| v * (C64::from_polar(1.0, -omega * t) * (running + c)).im)
            .collect();
        total += quadrature::simpson_samples_real(&outer, h);
        let abs: Vec<f64> = outer.iter().map(|x| x.abs()).collect();
        scale += quadrature::simpson_samples_real(&abs, h);
        running += cum[n];
    }
    (total, scale)
}

/// `Φ(T) = Σ_k ∫_0^T J_ij^k dt` with
/// `J_ij^k(t) = ∫_0^t [g_i^k(t) g_j^k(t') + g_i^k(t') g_j^k(t)] sin ω_k(t' − t) dt'`.
pub fn coupling_phase(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    pair: (usize, usize),
) -> Result<PhaseReport, PulseError> {
    schedule.validate()?;
    schedule.check_targets(modes)?;
    let (ti, tj) = pair_targets(schedule, pair)?;
    let omegas = modes.frequencies().to_vec();
    let n0 = base_intervals(schedule);
    let r = quadrature::refine(n0, |n| {
        let out = Execution::default().map(&omegas, |&w| double_integral(schedule, w, n));
        (
            out.iter().map(|o| C64::new(o.0, 0.0)).collect(),
            out.iter().map(|o| o.1).collect(),
        )
    })?;
    let a2 = schedule.amplitude * schedule.amplitude * ti.weight * tj.weight;
    let phase_per_mode = (0..modes.n_modes())
        .map(|k| Ok(2.0 * a2 * modes.coupling(ti.ion, k)? * modes.coupling(tj.ion, k)? * r.value[k].re))
        .collect::<Result<Vec<f64>, PulseError>>()?;
    let phase_total = phase_per_mode.iter().sum();
    Ok(PhaseReport {
        eta: residual_eta(schedule, modes)?,
        phase_total,
        phase_per_mode,
        phase_adiabatic: adiabatic_phase(schedule, modes, pair)?,
        global_phase: None,
        adiabaticity: schedule.max_force_rate() / modes.min_frequency(),
    })
}

/// `J_ij^k(t)` on the schedule grid, as `(t, J)` pairs.
pub fn coupling_rate(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    pair: (usize, usize),
    mode: usize,
) -> Result<Vec<(f64, f64)>, PulseError> {
    schedule.validate()?;
    let (ti, tj) = pair_targets(schedule, pair)?;
    let pref = 2.0
        * schedule.amplitude
        * schedule.amplitude
        * ti.weight
        * tj.weight
        * modes.coupling(ti.ion, mode)?
        * modes.coupling(tj.ion, mode)?;
    let omega = modes.frequency(mode);
    let n = schedule.steps_per_cycle / schedule.segments_per_cycle();
    let mut running = ZERO;
    let mut out = vec![(0.0, 0.0)];
    for p in schedule.pieces() {
        let h = (p.t1 - p.t0) / n as f64;
        let ts: Vec<f64> = (0..=n)
            .map(|m| if m == n { p.t1 } else { p.t0 + m as f64 * h })
            .collect();
        let inner: Vec<C64> = ts
            .iter()
            .map(|&t| C64::from_polar(schedule.piece_profile(&p, t), omega * t))
            .collect();
        let cum = cumulative_simpson(&inner, h);
        for m in 1..=n {
            let t = ts[m];
            let e = C64::from_polar(1.0, -omega * t) * (running + cum[m]);
            out.push((t, pref * schedule.piece_profile(&p, t) * e.im));
        }
        running += cum[n];
    }
    Ok(out)
}

/// Adiabatic closed form `Φ ≈ −Σ_k (2/ω_k) ∫ g_i^k g_j^k dt`.
pub fn adiabatic_phase(
    schedule: &ForceSchedule,
    modes: &ModeSpectrum,
    pair: (usize, usize),
) -> Result<f64, PulseError> {
    schedule.validate()?;
    let (ti, tj) = pair_targets(schedule, pair)?;
    let pieces = schedule.pieces();
    let r = quadrature::refine(base_intervals(schedule), |n| {
        let v: f64 = pieces
            .iter()
            .map(|p| simpson(|t| C64::new(schedule.piece_profile(p, t).powi(2), 0.0), p.t0, p.t1, n).re)
            .sum();
        (vec![C64::new(v, 0.0)], vec![v])
    })?;
    let square_integral = r.value[0].re;
    let a2 = schedule.amplitude * schedule.amplitude * ti.weight * tj.weight;
    let mut phase = 0.0;
    for k in 0..modes.n_modes() {
        phase -=
            2.0 / modes.frequency(k) * modes.coupling(ti.ion, k)? * modes.coupling(tj.ion, k)? * a2 * square_integral;
    }
    Ok(phase)
}

/// `Σ_k 2 D̃_ik D̃_jk / ω_k`, the mode sum shared by the closed-form phases.
fn mode_sum(modes: &ModeSpectrum, pair: GatePair) -> Result<f64, PulseError> {
    let [i, j] = pair.ions;
    if i == j {
        return Err(PulseError::InvalidPair(format!("ion {i} paired with itself")));
    }
    let mut k_sum = 0.0;
    for k in 0..modes.n_modes() {
        k_sum += 2.0 * modes.coupling(i, k)? * modes.coupling(j, k)? / modes.frequency(k);
    }
    if k_sum.abs() < 1e-300 {
        return Err(PulseError::DegenerateRequest(format!(
            "ions {i} and {j} share no mode coupling"
        )));
    }
    Ok(k_sum)
}

/// Targets for `pair` with the second weight chosen so that `−w_j K` has the
/// sign of the requested phase.
fn signed_targets(pair: GatePair, k_sum: f64, target_phase: f64) -> Vec<ForceTarget> {
    let w_j = -target_phase.signum() * k_sum.signum();
    vec![
        ForceTarget::new(pair.ions[0], pair.axes[0]),
        ForceTarget {
            ion: pair.ions[1],
            axis: pair.axes[1],
            weight: w_j,
        },
    ]
}

/// Smooth-bump schedule spanning `periods` periods of the slowest mode whose
/// adiabatic phase equals `target_phase`.
pub fn design_adiabatic_schedule(
    modes: &ModeSpectrum,
    pair: GatePair,
    target_phase: f64,
    periods: usize,
) -> Result<ForceSchedule, PulseError> {
    if target_phase == 0.0 || !target_phase.is_finite() {
        return Err(PulseError::DegenerateRequest("target phase must be non-zero".into()));
    }
    if periods == 0 {
        return Err(PulseError::DegenerateRequest("periods must be positive".into()));
    }
    let k_sum = mode_sum(modes, pair)?;
    let duration = periods as f64 * 2.0 * PI / modes.min_frequency();
    // ∫ sin⁴(πt/T) dt = 3T/8
    let amplitude = (target_phase.abs() / (k_sum.abs() * 3.0 * duration / 8.0)).sqrt();
    let schedule = ForceSchedule::new(
        signed_targets(pair, k_sum, target_phase),
        PulseShape::SmoothBump,
        amplitude,
        duration,
    )
    .with_resolution_for(modes, STEPS_PER_PERIOD);
    let adiabaticity = schedule.max_force_rate() / modes.min_frequency();
    if adiabaticity >= ADIABATICITY_BOUND {
        return Err(PulseError::AdiabaticityViolated {
            adiabaticity,
            bound: ADIABATICITY_BOUND,
        });
    }
    Ok(schedule)
}

/// Two-cycle constant-force schedule with `g(t + T₂/2) = −g(t)`.
pub fn design_refocused_schedule(
    modes: &ModeSpectrum,
    pair: GatePair,
    target_phase: f64,
    half_cycle_periods: usize,
) -> Result<ForceSchedule, PulseError> {
    design_iterated_refocused_schedule(modes, pair, target_phase, half_cycle_periods, 1)
}

/// Reversal pattern of `levels` nested refocusings: `+−`, `+−−+`, `+−−+−++−`, …
pub fn refocusing_signs(levels: u32) -> Vec<f64> {
    let mut signs = vec![1.0];
    for _ in 0..levels {
        let flipped: Vec<f64> = signs.iter().map(|s| -s).collect();
        signs.extend(flipped);
    }
    signs
}

/// Constant-force schedule of `2^levels` cycles, each lasting
/// `half_cycle_periods` periods of the slowest mode, with nested reversals.
/// Every mode must close its loop within one cycle.
pub fn design_iterated_refocused_schedule(
    modes: &ModeSpectrum,
    pair: GatePair,
    target_phase: f64,
    half_cycle_periods: usize,
    levels: u32,
) -> Result<ForceSchedule, PulseError> {
    if target_phase == 0.0 || !target_phase.is_finite() {
        return Err(PulseError::DegenerateRequest("target phase must be non-zero".into()));
    }
    if half_cycle_periods == 0 {
        return Err(PulseError::DegenerateRequest(
            "half-cycle periods must be positive".into(),
        ));
    }
    let duration = half_cycle_periods as f64 * 2.0 * PI / modes.min_frequency();
    for (mode, w) in modes.frequencies().iter().enumerate() {
        let periods = w * duration / (2.0 * PI);
        if (periods - periods.round()).abs() > 1e-9 * periods.max(1.0) {
            return Err(PulseError::IncommensurateModes { mode, periods });
        }
    }
    let k_sum = mode_sum(modes, pair)?;
    let signs = refocusing_signs(levels);
    // closed loops: each cycle contributes −A² w_j K T_c
    let amplitude = (target_phase.abs() / (k_sum.abs() * signs.len() as f64 * duration)).sqrt();
    Ok(ForceSchedule::new(
        signed_targets(pair, k_sum, target_phase),
        PulseShape::Constant,
        amplitude,
        duration,
    )
    .with_reversal(signs)
    .with_resolution_for(modes, STEPS_PER_PERIOD))
}

/// Outcome of the two adiabatic-validity inequalities.
#[derive(Clone, Debug, PartialEq)]
pub struct AdiabaticWindow {
    pub max_force_rate: f64,
    pub lowest_frequency: f64,
    pub relaxation_rate: f64,
    /// `max|ḟ| < 0.1 ω_l`
    pub slow_enough: bool,
    /// `max|ḟ| > τ_rel⁻¹`
    pub fast_enough: bool,
}

impl AdiabaticWindow {
    pub fn passes(&self) -> bool {
        self.slow_enough && self.fast_enough
    }
}

pub fn check_adiabatic_window(schedule: &ForceSchedule, modes: &ModeSpectrum, relaxation_rate: f64) -> AdiabaticWindow {
    let max_force_rate = schedule.max_force_rate();
    let lowest_frequency = modes.min_frequency();
    AdiabaticWindow {
        max_force_rate,
        lowest_frequency,
        relaxation_rate,
        slow_enough: max_force_rate < ADIABATICITY_BOUND * lowest_frequency,
        fast_enough: max_force_rate > relaxation_rate,
    }
}

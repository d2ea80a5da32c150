//! Run configuration: a flat INI-like text file.
//!
//! ```text
//! # comment
//! command = simulate
//!
//! [array]
//! n_ions = 2
//! omega0 = 1.0
//! ```
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Keys before
//! the first section header belong to the top level, which only holds
//! `command`. Every key must appear at most once and must be known.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use iondfs::linalg::PauliAxis;
use iondfs::modes::{CouplingRange, Topology};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("override `{0}` must look like section.key=value")]
    BadOverride(String),
}

const KNOWN_KEYS: &[&str] = &[
    "command",
    "array.n_ions",
    "array.omega0",
    "array.kappa",
    "array.spacing",
    "array.mass",
    "array.topology",
    "array.range",
    "array.modes",
    "array.encoding",
    "pulse.shape",
    "pulse.target_phase",
    "pulse.amplitude",
    "pulse.periods",
    "pulse.cycles",
    "pulse.axis",
    "pulse.targets",
    "pulse.levels",
    "space.fock_cutoff",
    "space.steps",
    "space.fock_states",
    "noise.kind",
    "noise.sigma_b",
    "noise.sigmas",
    "noise.samples",
    "noise.seed",
    "noise.bath_coupling",
    "noise.bath_frequency",
    "noise.bath_cutoff",
    "output.dir",
    "output.format",
];

const SECTIONS: &[&str] = &["array", "pulse", "space", "noise", "output"];

/// Parsed `section.key → value` pairs, before typing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let syntax = |message: String| ConfigError::Syntax { line: n + 1, message };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| syntax("unterminated section header".into()))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(syntax(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key = value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(syntax("empty key".into()));
            }
            let key = match &section {
                Some(s) => format!("{s}.{k}"),
                None => k.to_string(),
            };
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            if entries.insert(key.clone(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate(key));
            }
        }
        Ok(RawConfig { entries })
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Apply `section.key=value`, replacing any value from the file.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(assignment.to_string()))?;
        let key = k.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key));
        }
        self.entries.insert(key, v.trim().to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}.");
        self.entries.keys().any(|k| k.starts_with(&prefix))
    }

    fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    fn parsed<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, ConfigError> {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|_| ConfigError::Invalid {
                    key: key.to_string(),
                    reason: format!("expected {what}, got `{v}`"),
                })
            })
            .transpose()
    }

    fn real(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        let v: Option<f64> = self.parsed(key, "a number")?;
        if let Some(x) = v {
            if !x.is_finite() {
                return Err(invalid(key, "must be finite"));
            }
        }
        Ok(v)
    }

    fn positive(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        let v = self.real(key)?;
        if matches!(v, Some(x) if x <= 0.0) {
            return Err(invalid(key, "must be positive"));
        }
        Ok(v)
    }

    fn count(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        let v: Option<usize> = self.parsed(key, "a non-negative integer")?;
        if v == Some(0) {
            return Err(invalid(key, "must be positive"));
        }
        Ok(v)
    }

    fn list<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<Vec<T>>, ConfigError> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim().parse::<T>().map_err(|_| ConfigError::Invalid {
                            key: key.to_string(),
                            reason: format!("expected a comma-separated list of {what}, got `{v}`"),
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}

fn invalid(key: &str, reason: &str) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Modes,
    Design,
    Simulate,
    NoiseScan,
    Refocus,
    ThermalScan,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Modes => "modes",
            Command::Design => "design",
            Command::Simulate => "simulate",
            Command::NoiseScan => "noise-scan",
            Command::Refocus => "refocus",
            Command::ThermalScan => "thermal-scan",
        }
    }
}

impl FromStr for Command {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "modes" => Command::Modes,
            "design" => Command::Design,
            "simulate" => Command::Simulate,
            "noise-scan" => Command::NoiseScan,
            "refocus" => Command::Refocus,
            "thermal-scan" => Command::ThermalScan,
            other => {
                return Err(invalid(
                    "command",
                    &format!("unknown command `{other}` (modes, design, simulate, noise-scan, refocus, thermal-scan)"),
                ))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayConfig {
    pub n_ions: usize,
    pub omega0: f64,
    pub kappa: f64,
    pub spacing: f64,
    pub mass: f64,
    pub topology: Topology,
    pub range: CouplingRange,
    /// Indices of the modes kept in the simulation; all when absent.
    pub modes: Option<Vec<usize>>,
    /// Logical pairs; adjacent pairs when absent.
    pub encoding: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    SmoothBump,
    Constant,
    KickTrain,
}

/// How the pulse amplitude is fixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PulseSource {
    /// Designed so that the adiabatic phase equals `phase`.
    TargetPhase(f64),
    Amplitude(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PulseConfig {
    pub shape: ShapeKind,
    pub source: PulseSource,
    /// Slowest-mode periods per cycle.
    pub periods: usize,
    /// Number of cycles, a power of two; cycles beyond the first are sign-reversed copies.
    pub cycles: usize,
    pub axes: (PauliAxis, PauliAxis),
    pub targets: (usize, usize),
    pub levels: Option<Vec<f64>>,
}

impl PulseConfig {
    pub fn refocusing_levels(&self) -> u32 {
        self.cycles.trailing_zeros()
    }

    pub fn duration(&self, slowest: f64) -> f64 {
        self.periods as f64 * 2.0 * PI / slowest
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpaceConfig {
    pub fock_cutoff: usize,
    pub steps: Option<usize>,
    pub fock_states: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    QuasiStatic,
    BathMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub sigma_b: f64,
    pub sigmas: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub bath_coupling: f64,
    pub bath_frequency: f64,
    pub bath_cutoff: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: Format,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub array: ArrayConfig,
    /// Absent only for `modes`.
    pub pulse: Option<PulseConfig>,
    pub space: SpaceConfig,
    /// Present when the config has a `[noise]` section.
    pub noise: Option<NoiseConfig>,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let command: Command = raw.require("command")?.parse()?;
        let array = array_section(raw)?;
        let pulse = if command == Command::Modes {
            None
        } else {
            Some(pulse_section(raw, &array)?)
        };
        let space = SpaceConfig {
            fock_cutoff: raw.count("space.fock_cutoff")?.unwrap_or(10),
            steps: raw.count("space.steps")?,
            fock_states: raw
                .list("space.fock_states", "integers")?
                .unwrap_or_else(|| vec![0, 1, 2]),
        };
        let noise = if raw.has_section("noise") {
            Some(noise_section(raw)?)
        } else {
            None
        };
        let format = match raw.get("output.format").unwrap_or("both") {
            "csv" => Format::Csv,
            "json" => Format::Json,
            "both" => Format::Both,
            other => {
                return Err(invalid(
                    "output.format",
                    &format!("expected csv, json or both, got `{other}`"),
                ))
            }
        };
        let output = OutputConfig {
            dir: PathBuf::from(raw.get("output.dir").unwrap_or(".")),
            format,
        };
        let cfg = RunConfig {
            command,
            array,
            pulse,
            space,
            noise,
            output,
        };
        cfg.check_command_needs()?;
        Ok(cfg)
    }

    fn check_command_needs(&self) -> Result<(), ConfigError> {
        match self.command {
            Command::NoiseScan | Command::Refocus => {
                let noise = self
                    .noise
                    .as_ref()
                    .ok_or_else(|| ConfigError::Missing("noise.kind".into()))?;
                if noise.kind != NoiseKind::QuasiStatic {
                    return Err(invalid("noise.kind", "scans and refocusing need quasi_static noise"));
                }
                if self.command == Command::NoiseScan && noise.sigmas.is_empty() {
                    return Err(ConfigError::Missing("noise.sigmas".into()));
                }
            }
            _ => {}
        }
        if self.command == Command::Refocus {
            let pulse = self.pulse.as_ref().expect("pulse section for refocus");
            if pulse.cycles < 2 || pulse.shape != ShapeKind::Constant {
                return Err(invalid(
                    "pulse.cycles",
                    "refocus needs a constant shape and at least two cycles",
                ));
            }
        }
        Ok(())
    }
}

fn array_section(raw: &RawConfig) -> Result<ArrayConfig, ConfigError> {
    let n_ions = raw
        .count("array.n_ions")?
        .ok_or_else(|| ConfigError::Missing("array.n_ions".into()))?;
    let omega0 = raw
        .positive("array.omega0")?
        .ok_or_else(|| ConfigError::Missing("array.omega0".into()))?;
    let topology = match raw.get("array.topology").unwrap_or("chain") {
        "chain" => Topology::Chain,
        "ring" => Topology::Ring,
        other => {
            return Err(invalid(
                "array.topology",
                &format!("expected chain or ring, got `{other}`"),
            ))
        }
    };
    let range = match raw.get("array.range").unwrap_or("nearest") {
        "nearest" => CouplingRange::NearestNeighbor,
        "long" => CouplingRange::LongRange,
        other => {
            return Err(invalid(
                "array.range",
                &format!("expected nearest or long, got `{other}`"),
            ))
        }
    };
    let encoding =
        raw.get("array.encoding")
            .map(|v| {
                v.split(',')
                    .map(|pair| {
                        let (a, b) = pair.trim().split_once(':').ok_or_else(|| {
                            invalid("array.encoding", &format!("expected pairs like 0:1,2:3, got `{v}`"))
                        })?;
                        let ion = |x: &str| {
                            x.trim()
                                .parse::<usize>()
                                .map_err(|_| invalid("array.encoding", &format!("bad ion index `{x}`")))
                        };
                        Ok((ion(a)?, ion(b)?))
                    })
                    .collect::<Result<Vec<_>, ConfigError>>()
            })
            .transpose()?;
    Ok(ArrayConfig {
        n_ions,
        omega0,
        kappa: raw
            .real("array.kappa")?
            .ok_or_else(|| ConfigError::Missing("array.kappa".into()))?,
        spacing: raw.positive("array.spacing")?.unwrap_or(1.0),
        mass: raw.positive("array.mass")?.unwrap_or(1.0),
        topology,
        range,
        modes: raw.list("array.modes", "integers")?,
        encoding,
    })
}

fn axis(key: &str, c: char) -> Result<PauliAxis, ConfigError> {
    PauliAxis::from_label(&c.to_string()).ok_or_else(|| invalid(key, &format!("unknown axis `{c}`")))
}

fn pulse_section(raw: &RawConfig, array: &ArrayConfig) -> Result<PulseConfig, ConfigError> {
    let shape = match raw.require("pulse.shape")? {
        "smooth_bump" => ShapeKind::SmoothBump,
        "constant" => ShapeKind::Constant,
        "kick_train" => ShapeKind::KickTrain,
        other => {
            return Err(invalid(
                "pulse.shape",
                &format!("expected smooth_bump, constant or kick_train, got `{other}`"),
            ))
        }
    };
    let source = match (raw.real("pulse.target_phase")?, raw.real("pulse.amplitude")?) {
        (Some(_), Some(_)) => {
            return Err(invalid(
                "pulse.amplitude",
                "give either pulse.target_phase or pulse.amplitude",
            ))
        }
        (None, None) => return Err(ConfigError::Missing("pulse.target_phase".into())),
        (Some(p), None) => {
            if p == 0.0 {
                return Err(invalid("pulse.target_phase", "must be non-zero"));
            }
            PulseSource::TargetPhase(p)
        }
        (None, Some(a)) => PulseSource::Amplitude(a),
    };
    let cycles = raw.count("pulse.cycles")?.unwrap_or(1);
    if !cycles.is_power_of_two() {
        return Err(invalid("pulse.cycles", "must be a power of two"));
    }
    let axis_text = raw.get("pulse.axis").unwrap_or("zz");
    let chars: Vec<char> = axis_text.chars().collect();
    if chars.len() != 2 {
        return Err(invalid(
            "pulse.axis",
            &format!("expected two axis letters such as zz or yx, got `{axis_text}`"),
        ));
    }
    let axes = (axis("pulse.axis", chars[0])?, axis("pulse.axis", chars[1])?);
    let targets: Vec<usize> = raw.list("pulse.targets", "integers")?.unwrap_or_else(|| vec![0, 1]);
    if targets.len() != 2 || targets[0] == targets[1] {
        return Err(invalid("pulse.targets", "expected two distinct ions"));
    }
    if targets.iter().any(|&t| t >= array.n_ions) {
        return Err(invalid("pulse.targets", "ion index beyond array.n_ions"));
    }
    let levels = raw.list("pulse.levels", "numbers")?;
    match (shape, &levels, source) {
        (ShapeKind::KickTrain, None, _) => return Err(ConfigError::Missing("pulse.levels".into())),
        (ShapeKind::KickTrain, Some(_), PulseSource::TargetPhase(_)) => {
            return Err(invalid(
                "pulse.target_phase",
                "kick trains need an explicit pulse.amplitude",
            ))
        }
        (ShapeKind::SmoothBump, _, PulseSource::TargetPhase(_)) if cycles != 1 => {
            return Err(invalid("pulse.cycles", "the adiabatic design uses a single cycle"))
        }
        (ShapeKind::SmoothBump | ShapeKind::Constant, Some(_), _) => {
            return Err(invalid("pulse.levels", "only kick trains take levels"))
        }
        _ => {}
    }
    Ok(PulseConfig {
        shape,
        source,
        periods: raw
            .count("pulse.periods")?
            .ok_or_else(|| ConfigError::Missing("pulse.periods".into()))?,
        cycles,
        axes,
        targets: (targets[0], targets[1]),
        levels,
    })
}

fn noise_section(raw: &RawConfig) -> Result<NoiseConfig, ConfigError> {
    let kind = match raw.require("noise.kind")? {
        "quasi_static" => NoiseKind::QuasiStatic,
        "bath_mode" => NoiseKind::BathMode,
        other => {
            return Err(invalid(
                "noise.kind",
                &format!("expected quasi_static or bath_mode, got `{other}`"),
            ))
        }
    };
    let non_negative = |key: &str| -> Result<Option<f64>, ConfigError> {
        let v = raw.real(key)?;
        if matches!(v, Some(x) if x < 0.0) {
            return Err(invalid(key, "must be non-negative"));
        }
        Ok(v)
    };
    let sigmas: Vec<f64> = raw.list("noise.sigmas", "numbers")?.unwrap_or_default();
    if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(invalid("noise.sigmas", "every σ_B must be positive"));
    }
    Ok(NoiseConfig {
        kind,
        sigma_b: non_negative("noise.sigma_b")?.unwrap_or(0.0),
        sigmas,
        samples: raw.count("noise.samples")?.unwrap_or(200),
        seed: raw.parsed("noise.seed", "a non-negative integer")?.unwrap_or(2024),
        bath_coupling: raw.real("noise.bath_coupling")?.unwrap_or(0.0),
        bath_frequency: non_negative("noise.bath_frequency")?.unwrap_or(1.0),
        bath_cutoff: raw.count("noise.bath_cutoff")?.unwrap_or(8),
    })
}

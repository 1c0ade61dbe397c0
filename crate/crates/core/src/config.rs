//! Experiment configuration files.
//!
//! A config is a TOML document with a parameter block (`[system]` or
//! `[circuit]`, exactly one), `[protocol]`, optional `[noise]` and optional
//! `[simulation]`. Frequencies are strings with a unit (`"1.5 MHz"`) or bare
//! numbers in MHz, always cyclic and converted to angular units on load. Times
//! are strings with a unit (`"100 us"`) or bare numbers in microseconds.
//! Angles are multiples of π: `0.5`, `"0.5pi"`, `"pi/12"`.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;
use toml::{Table, Value};

use crate::analysis::WignerGrid;
use crate::circuit_params::{
    numeric_chis_multi_with, ChiMethod, CircuitError, CoupledQubit, CouplingSpec, SystemParams, TransmonSpec,
    DEFAULT_CAVITY_LEVELS, DEFAULT_TRANSMON_LEVELS,
};
use crate::dynamics::{DriveModel, DynamicsError, NoiseConfig};
use crate::hilbert::{parse_qubit_label, C64, ONE, ZERO};

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("TOML syntax: {0}")]
    Syntax(String),
    #[error("missing field `{0}`")]
    Missing(String),
    #[error("field `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Noise(#[from] DynamicsError),
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), msg: msg.into() }
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn with_unit(s: &str) -> Option<(f64, String)> {
    let s = s.trim();
    let split = s.find(|c: char| c.is_ascii_alphabetic() || c == 'µ').unwrap_or(s.len());
    let x = s[..split].trim().parse::<f64>().ok()?;
    Some((x, s[split..].trim().to_string()))
}

/// Cyclic frequency value to angular frequency.
pub fn parse_frequency(v: &Value, field: &str) -> Result<f64, ConfigError> {
    let hz = match v {
        Value::String(s) => {
            let (x, unit) = with_unit(s).ok_or_else(|| invalid(field, format!("cannot parse frequency {s:?}")))?;
            let scale = match unit.as_str() {
                "Hz" | "" => 1.0,
                "kHz" => 1e3,
                "MHz" => 1e6,
                "GHz" => 1e9,
                u => return Err(invalid(field, format!("unknown frequency unit {u:?}"))),
            };
            x * scale
        }
        _ => number(v).ok_or_else(|| invalid(field, "expected a frequency"))? * 1e6,
    };
    Ok(2.0 * PI * hz)
}

/// Duration in seconds; `"inf"` and `"off"` give infinity.
pub fn parse_time(v: &Value, field: &str) -> Result<f64, ConfigError> {
    match v {
        Value::String(s) if matches!(s.trim(), "inf" | "off" | "infinite") => Ok(f64::INFINITY),
        Value::String(s) => {
            let (x, unit) = with_unit(s).ok_or_else(|| invalid(field, format!("cannot parse time {s:?}")))?;
            let scale = match unit.as_str() {
                "s" => 1.0,
                "ms" => 1e-3,
                "us" | "µs" => 1e-6,
                "ns" => 1e-9,
                "" => 1e-6,
                u => return Err(invalid(field, format!("unknown time unit {u:?}"))),
            };
            Ok(x * scale)
        }
        _ => Ok(number(v).ok_or_else(|| invalid(field, "expected a time"))? * 1e-6),
    }
}

/// Angle in radians from a multiple of π.
pub fn parse_angle(v: &Value, field: &str) -> Result<f64, ConfigError> {
    match v {
        Value::String(s) => {
            let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
            let bad = || invalid(field, format!("cannot parse angle {s:?}"));
            let (num, den) = match t.split_once('/') {
                Some((a, b)) => (a.to_string(), b.parse::<f64>().map_err(|_| bad())?),
                None => (t.clone(), 1.0),
            };
            let coef = match num.strip_suffix("pi").or_else(|| num.strip_suffix('π')) {
                Some("") => 1.0,
                Some("-") => -1.0,
                Some(c) => c.trim_end_matches('*').parse::<f64>().map_err(|_| bad())?,
                None => num.parse::<f64>().map_err(|_| bad())?,
            };
            Ok(coef * PI / den)
        }
        _ => Ok(number(v).ok_or_else(|| invalid(field, "expected an angle"))? * PI),
    }
}

fn get<'a>(t: &'a Table, section: &str, key: &str) -> Result<&'a Value, ConfigError> {
    t.get(key).ok_or_else(|| ConfigError::Missing(format!("{section}.{key}")))
}

fn list<'a>(v: &'a Value, field: &str) -> Result<&'a Vec<Value>, ConfigError> {
    v.as_array().ok_or_else(|| invalid(field, "expected a list"))
}

fn section<'a>(t: &'a Table, name: &str) -> Result<Option<&'a Table>, ConfigError> {
    match t.get(name) {
        None => Ok(None),
        Some(Value::Table(s)) => Ok(Some(s)),
        Some(_) => Err(invalid(name, "expected a table")),
    }
}

fn check_keys(t: &Table, sec: &str, allowed: &[&str]) -> Result<(), ConfigError> {
    for k in t.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(ConfigError::UnknownKey(format!("{sec}.{k}")));
        }
    }
    Ok(())
}

fn boolean(t: &Table, sec: &str, key: &str, default: bool) -> Result<bool, ConfigError> {
    match t.get(key) {
        None => Ok(default),
        Some(Value::Boolean(b)) => Ok(*b),
        Some(_) => Err(invalid(&format!("{sec}.{key}"), "expected true or false")),
    }
}

fn float(t: &Table, sec: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
    match t.get(key) {
        None => Ok(default),
        Some(v) => number(v).ok_or_else(|| invalid(&format!("{sec}.{key}"), "expected a number")),
    }
}

const SYSTEM_KEYS: &[&str] = &["delta_omega", "chi_qr", "chi_qq", "chi_rr", "chi_q1q2", "coupling_mismatch"];
const CIRCUIT_KEYS: &[&str] =
    &["e_j", "e_c", "g", "omega_r", "method", "transmon_levels", "cavity_levels", "chi_q1q2", "coupling_mismatch"];
const PROTOCOL_KEYS: &[&str] =
    &["n", "angles", "alpha", "nbar", "initial", "kerr_correction", "frame_reference", "echo", "cross_kerr_phase"];
const NOISE_KEYS: &[&str] = &["tau_r", "tau_q", "tau_phi"];
const SIMULATION_KEYS: &[&str] =
    &["cutoff", "drive", "rtol", "atol", "include_kerr", "mode", "snapshots", "wigner_extent", "wigner_points"];

/// Where the Hamiltonian parameters come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamSource {
    Direct,
    Circuit { spec: CouplingSpec, method: ChiMethod, levels: (usize, usize) },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameChoice {
    /// Largest displacement among all components.
    Largest,
    /// Largest displacement among components reachable from the initial state.
    Populated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Master equation when any noise channel is on, otherwise exact ket evolution.
    Auto,
    Lindblad,
    Unitary,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SnapshotSteps {
    Final,
    All,
    Labels(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub n: usize,
    pub angles: Vec<f64>,
    pub alpha: C64,
    pub initial: Vec<C64>,
    pub initial_label: String,
    pub kerr_correction: bool,
    pub frame: FrameChoice,
    pub echo: bool,
    pub cross_kerr_phase: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub cutoff: usize,
    pub drive: DriveModel,
    pub rtol: f64,
    pub atol: f64,
    pub include_kerr: bool,
    pub mode: RunMode,
    pub snapshots: SnapshotSteps,
    pub wigner: Option<WignerGrid>,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub source: ParamSource,
    pub system: SystemParams,
    /// Relative excess `δ` of the slowest coupling.
    pub coupling_mismatch: f64,
    pub qubit_cross_kerr: f64,
    pub protocol: ProtocolConfig,
    pub noise: NoiseConfig,
    pub simulation: SimulationConfig,
    /// The document as loaded, for echoing and sweeps.
    pub document: Table,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        Self::from_table(doc)
    }

    pub fn from_table(doc: Table) -> Result<Self, ConfigError> {
        for k in doc.keys() {
            if !["system", "circuit", "protocol", "noise", "simulation"].contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        let protocol_t = section(&doc, "protocol")?.ok_or_else(|| ConfigError::Missing("protocol".into()))?;
        let n = match get(protocol_t, "protocol", "n")? {
            Value::Integer(i) if *i >= 1 => *i as usize,
            _ => return Err(invalid("protocol.n", "expected a positive integer")),
        };
        let (source, system, mismatch, cross) = parse_params(&doc, n)?;
        let protocol = parse_protocol(protocol_t, n)?;
        let noise = parse_noise(&doc)?;
        let simulation = parse_simulation(&doc)?;
        Ok(Self {
            source,
            system,
            coupling_mismatch: mismatch,
            qubit_cross_kerr: cross,
            protocol,
            noise,
            simulation,
            document: doc,
        })
    }

    /// Copy with one dotted key replaced, re-validated.
    pub fn with_override(&self, key: &str, value: f64) -> Result<Self, ConfigError> {
        let mut doc = self.document.clone();
        set_path(&mut doc, key, value)?;
        Self::from_table(doc)
    }

    pub fn nbar(&self) -> f64 {
        self.protocol.alpha.norm_sqr()
    }
}

fn parse_params(doc: &Table, n: usize) -> Result<(ParamSource, SystemParams, f64, f64), ConfigError> {
    let sys = section(doc, "system")?;
    let circ = section(doc, "circuit")?;
    let (source, params, block, sec) = match (sys, circ) {
        (Some(_), Some(_)) => return Err(invalid("system/circuit", "give exactly one parameter block")),
        (None, None) => return Err(ConfigError::Missing("system or circuit".into())),
        (Some(s), None) => {
            check_keys(s, "system", SYSTEM_KEYS)?;
            (ParamSource::Direct, parse_system(s, n)?, s, "system")
        }
        (None, Some(c)) => {
            check_keys(c, "circuit", CIRCUIT_KEYS)?;
            let (spec, method, levels) = parse_circuit(c, n)?;
            let p = numeric_chis_multi_with(&spec, levels.0, levels.1, method)?;
            (ParamSource::Circuit { spec, method, levels }, p, c, "circuit")
        }
    };
    let mismatch = float(block, sec, "coupling_mismatch", 0.0)?;
    let cross = match block.get("chi_q1q2") {
        None => 0.0,
        Some(v) => parse_frequency(v, &format!("{sec}.chi_q1q2"))?,
    };
    params.validate()?;
    Ok((source, params, mismatch, cross))
}

fn parse_system(s: &Table, n: usize) -> Result<SystemParams, ConfigError> {
    let chi_qq = parse_frequency(get(s, "system", "chi_qq")?, "system.chi_qq")?;
    let mut p = match (s.get("delta_omega"), s.get("chi_qr")) {
        (Some(_), Some(_)) => return Err(invalid("system.chi_qr", "give either delta_omega or chi_qr")),
        (None, None) => return Err(ConfigError::Missing("system.delta_omega".into())),
        (Some(d), None) => SystemParams::equal_spacing(n, parse_frequency(d, "system.delta_omega")?, chi_qq, 0.0),
        (None, Some(v)) => {
            let vals = list(v, "system.chi_qr")?;
            if vals.len() != n {
                return Err(invalid("system.chi_qr", format!("expected {n} entries (q1 first)")));
            }
            let chi_qr = vals
                .iter()
                .enumerate()
                .map(|(i, x)| parse_frequency(x, &format!("system.chi_qr[{i}]")))
                .collect::<Result<Vec<_>, _>>()?;
            let slowest = chi_qr[n - 1];
            SystemParams { omega_r: 0.0, omega_q: vec![0.0; n], chi_qr, chi_qq: vec![chi_qq; n], chi_rr: 0.0, delta_omega: slowest }
        }
    };
    p.chi_rr = match s.get("chi_rr") {
        None => crate::circuit_params::cavity_self_kerr_estimate(&p.chi_qr, chi_qq),
        Some(Value::String(x)) if x == "auto" => crate::circuit_params::cavity_self_kerr_estimate(&p.chi_qr, chi_qq),
        Some(v) => parse_frequency(v, "system.chi_rr")?,
    };
    Ok(p)
}

fn parse_circuit(c: &Table, n: usize) -> Result<(CouplingSpec, ChiMethod, (usize, usize)), ConfigError> {
    let per_qubit = |key: &str| -> Result<Vec<f64>, ConfigError> {
        let field = format!("circuit.{key}");
        let vals = list(get(c, "circuit", key)?, &field)?;
        if vals.len() != n {
            return Err(invalid(&field, format!("expected {n} entries (q1 first)")));
        }
        vals.iter().enumerate().map(|(i, v)| parse_frequency(v, &format!("{field}[{i}]"))).collect()
    };
    let (e_j, e_c, g) = (per_qubit("e_j")?, per_qubit("e_c")?, per_qubit("g")?);
    let omega_r = parse_frequency(get(c, "circuit", "omega_r")?, "circuit.omega_r")?;
    let qubits = (0..n)
        .map(|i| Ok(CoupledQubit { transmon: TransmonSpec::new(e_j[i], e_c[i])?, g: g[i] }))
        .collect::<Result<Vec<_>, CircuitError>>()?;
    let method = match c.get("method").and_then(Value::as_str) {
        None | Some("first-order") => ChiMethod::FirstOrder,
        Some("exact") => ChiMethod::Exact,
        Some(m) => return Err(invalid("circuit.method", format!("unknown method {m:?}"))),
    };
    let lv = |key: &str, d: usize| match c.get(key) {
        None => Ok(d),
        Some(Value::Integer(i)) if *i >= 3 => Ok(*i as usize),
        Some(_) => Err(invalid(&format!("circuit.{key}"), "expected an integer >= 3")),
    };
    let levels = (lv("transmon_levels", DEFAULT_TRANSMON_LEVELS)?, lv("cavity_levels", DEFAULT_CAVITY_LEVELS)?);
    Ok((CouplingSpec { omega_r, qubits }, method, levels))
}

/// Reads only the `[circuit]` block; the qubit count is the length of `e_j`.
pub fn circuit_block(text: &str) -> Result<(CouplingSpec, ChiMethod, (usize, usize)), ConfigError> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let c = section(&doc, "circuit")?.ok_or_else(|| ConfigError::Missing("circuit".into()))?;
    check_keys(c, "circuit", CIRCUIT_KEYS)?;
    let n = list(get(c, "circuit", "e_j")?, "circuit.e_j")?.len();
    if n == 0 {
        return Err(invalid("circuit.e_j", "no qubits"));
    }
    parse_circuit(c, n)
}

fn parse_initial(v: Option<&Value>, n: usize) -> Result<(Vec<C64>, String), ConfigError> {
    let dim = 1usize << n;
    match v {
        None => {
            let mut s = vec![ZERO; dim];
            s[0] = ONE;
            Ok((s, "0".repeat(n)))
        }
        Some(Value::String(s)) if s == "uniform" => {
            Ok((vec![C64::new(1.0 / (dim as f64).sqrt(), 0.0); dim], "uniform".into()))
        }
        Some(Value::String(s)) => {
            let bits = parse_qubit_label(s)
                .filter(|_| s.len() == n)
                .ok_or_else(|| invalid("protocol.initial", format!("expected {n} binary digits (q{n} first) or \"uniform\"")))?;
            let mut amps = vec![ZERO; dim];
            amps[bits] = ONE;
            Ok((amps, s.clone()))
        }
        Some(Value::Array(a)) => {
            if a.len() != dim {
                return Err(invalid("protocol.initial", format!("expected {dim} amplitudes")));
            }
            let amps = a
                .iter()
                .map(|x| match x {
                    Value::Array(p) if p.len() == 2 => match (number(&p[0]), number(&p[1])) {
                        (Some(re), Some(im)) => Ok(C64::new(re, im)),
                        _ => Err(invalid("protocol.initial", "amplitudes are [re, im] pairs")),
                    },
                    _ => number(x).map(|re| C64::new(re, 0.0)).ok_or_else(|| invalid("protocol.initial", "bad amplitude")),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let norm: f64 = amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(invalid("protocol.initial", "zero vector"));
            }
            Ok((amps.into_iter().map(|z| z / norm).collect(), "custom".into()))
        }
        Some(_) => Err(invalid("protocol.initial", "expected a label, \"uniform\" or a list")),
    }
}

fn parse_protocol(t: &Table, n: usize) -> Result<ProtocolConfig, ConfigError> {
    check_keys(t, "protocol", PROTOCOL_KEYS)?;
    let raw = list(get(t, "protocol", "angles")?, "protocol.angles")?;
    let want = (1usize << n) - 1;
    if raw.len() != want {
        return Err(invalid("protocol.angles", format!("expected {want} angles for n = {n}, got {}", raw.len())));
    }
    let angles = raw
        .iter()
        .enumerate()
        .map(|(i, v)| parse_angle(v, &format!("protocol.angles[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let alpha = match (t.get("alpha"), t.get("nbar")) {
        (Some(_), Some(_)) => return Err(invalid("protocol.alpha", "give either alpha or nbar")),
        (None, None) => return Err(ConfigError::Missing("protocol.alpha".into())),
        (None, Some(v)) => {
            let nb = number(v).filter(|x| *x > 0.0).ok_or_else(|| invalid("protocol.nbar", "expected a positive number"))?;
            C64::new(nb.sqrt(), 0.0)
        }
        (Some(Value::Array(p)), None) if p.len() == 2 => match (number(&p[0]), number(&p[1])) {
            (Some(re), Some(im)) => C64::new(re, im),
            _ => return Err(invalid("protocol.alpha", "expected [re, im]")),
        },
        (Some(v), None) => C64::new(number(v).ok_or_else(|| invalid("protocol.alpha", "expected a number"))?, 0.0),
    };
    if alpha.norm() == 0.0 {
        return Err(invalid("protocol.alpha", "displacement must be non-zero"));
    }
    let (initial, initial_label) = parse_initial(t.get("initial"), n)?;
    let frame = match t.get("frame_reference").and_then(Value::as_str) {
        None | Some("largest") => FrameChoice::Largest,
        Some("populated") => FrameChoice::Populated,
        Some(x) => return Err(invalid("protocol.frame_reference", format!("unknown value {x:?}"))),
    };
    let cross_kerr_phase = t.get("cross_kerr_phase").map(|v| parse_angle(v, "protocol.cross_kerr_phase")).transpose()?;
    Ok(ProtocolConfig {
        n,
        angles,
        alpha,
        initial,
        initial_label,
        kerr_correction: boolean(t, "protocol", "kerr_correction", true)?,
        frame,
        echo: boolean(t, "protocol", "echo", true)?,
        cross_kerr_phase,
    })
}

fn parse_noise(doc: &Table) -> Result<NoiseConfig, ConfigError> {
    let Some(t) = section(doc, "noise")? else {
        return Ok(NoiseConfig::off());
    };
    check_keys(t, "noise", NOISE_KEYS)?;
    let time = |k: &str| match t.get(k) {
        None => Ok(f64::INFINITY),
        Some(v) => parse_time(v, &format!("noise.{k}")),
    };
    Ok(NoiseConfig::new(time("tau_r")?, time("tau_q")?, time("tau_phi")?)?)
}

fn parse_simulation(doc: &Table) -> Result<SimulationConfig, ConfigError> {
    let empty = Table::new();
    let t = section(doc, "simulation")?.unwrap_or(&empty);
    check_keys(t, "simulation", SIMULATION_KEYS)?;
    let cutoff = match t.get("cutoff") {
        None => 100,
        Some(Value::Integer(i)) if *i >= 1 => *i as usize,
        Some(_) => return Err(invalid("simulation.cutoff", "expected a positive integer")),
    };
    let drive = match t.get("drive").and_then(Value::as_str) {
        None | Some("continuous") => DriveModel::Continuous,
        Some("instantaneous") => DriveModel::Instantaneous,
        Some(x) => return Err(invalid("simulation.drive", format!("unknown drive model {x:?}"))),
    };
    let mode = match t.get("mode").and_then(Value::as_str) {
        None | Some("auto") => RunMode::Auto,
        Some("lindblad") => RunMode::Lindblad,
        Some("unitary") => RunMode::Unitary,
        Some(x) => return Err(invalid("simulation.mode", format!("unknown mode {x:?}"))),
    };
    let snapshots = match t.get("snapshots") {
        None => SnapshotSteps::Final,
        Some(Value::String(s)) if s == "all" => SnapshotSteps::All,
        Some(Value::String(s)) if s == "final" => SnapshotSteps::Final,
        Some(Value::Array(a)) => SnapshotSteps::Labels(
            a.iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(|| invalid("simulation.snapshots", "expected step labels")))
                .collect::<Result<_, _>>()?,
        ),
        Some(_) => return Err(invalid("simulation.snapshots", "expected \"all\", \"final\" or a list of labels")),
    };
    let wigner = match (t.get("wigner_extent"), t.get("wigner_points")) {
        (None, None) => None,
        (e, p) => {
            let extent = e.map_or(Some(5.0), number).ok_or_else(|| invalid("simulation.wigner_extent", "expected a number"))?;
            let points = match p {
                None => 101,
                Some(Value::Integer(i)) if *i >= 2 => *i as usize,
                Some(_) => return Err(invalid("simulation.wigner_points", "expected an integer >= 2")),
            };
            Some(WignerGrid::square(extent, points))
        }
    };
    Ok(SimulationConfig {
        cutoff,
        drive,
        rtol: float(t, "simulation", "rtol", 1e-8)?,
        atol: float(t, "simulation", "atol", 1e-10)?,
        include_kerr: boolean(t, "simulation", "include_kerr", true)?,
        mode,
        snapshots,
        wigner,
    })
}

fn known_key(path: &[&str]) -> bool {
    let keys: &[&str] = match path.first().copied() {
        Some("system") => SYSTEM_KEYS,
        Some("circuit") => CIRCUIT_KEYS,
        Some("protocol") => PROTOCOL_KEYS,
        Some("noise") => NOISE_KEYS,
        Some("simulation") => SIMULATION_KEYS,
        _ => return false,
    };
    path.len() >= 2 && keys.contains(&path[1])
}

/// Sets `a.b` or `a.b.i` (list index) to a number, creating `a.b` if absent.
pub fn set_path(doc: &mut Table, key: &str, value: f64) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if !known_key(&parts) || parts.len() > 3 {
        return Err(ConfigError::UnknownKey(key.to_string()));
    }
    let sec = doc
        .entry(parts[0].to_string())
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    let new = if parts[1] == "cutoff" || parts[1] == "n" || parts[1].ends_with("levels") {
        Value::Integer(value.round() as i64)
    } else {
        Value::Float(value)
    };
    match parts.get(2) {
        None => {
            sec.insert(parts[1].to_string(), new);
        }
        Some(idx) => {
            let i: usize = idx.parse().map_err(|_| ConfigError::UnknownKey(key.to_string()))?;
            let arr = sec
                .get_mut(parts[1])
                .and_then(Value::as_array_mut)
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            let slot = arr.get_mut(i).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            *slot = new;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const CAPTION: &str = r#"
[system]
delta_omega = "1.5 MHz"
chi_qq = "300 MHz"

[protocol]
n = 2
angles = ["0.25pi", "pi", 1]
nbar = 3

[noise]
tau_r = "100 us"
tau_q = 100
tau_phi = "0.1 ms"
"#;

    #[test]
    fn loads_direct_config_with_units() {
        let c = ExperimentConfig::from_str(CAPTION).unwrap();
        assert_relative_eq!(c.system.delta_omega, 2.0 * PI * 1.5e6, max_relative = 1e-15);
        assert_relative_eq!(c.system.chi_qr[0], 2.0 * PI * 3e6, max_relative = 1e-15);
        assert_relative_eq!(c.system.chi_rr, 2.0 * PI * 1e6 * 5.0 * 1.5 * 1.5 / 1200.0, max_relative = 1e-12);
        assert_relative_eq!(c.protocol.angles[0], PI / 4.0);
        assert_relative_eq!(c.protocol.angles[2], PI);
        assert_relative_eq!(c.nbar(), 3.0, max_relative = 1e-12);
        assert_relative_eq!(c.noise.tau_phi, 1e-4, max_relative = 1e-12);
        assert_eq!(c.simulation.cutoff, 100);
        assert_eq!(c.protocol.initial_label, "00");
    }

    #[test]
    fn units_and_angles() {
        let f = |s: &str| parse_frequency(&Value::String(s.into()), "f").unwrap() / (2.0 * PI);
        assert_relative_eq!(f("9.16 GHz"), 9.16e9);
        assert_relative_eq!(f("9.367kHz"), 9367.0);
        assert_relative_eq!(parse_frequency(&Value::Float(2.5), "f").unwrap(), 2.0 * PI * 2.5e6);
        let a = |s: &str| parse_angle(&Value::String(s.into()), "a").unwrap();
        assert_relative_eq!(a("pi/12"), PI / 12.0);
        assert_relative_eq!(a("0.5pi"), PI / 2.0);
        assert_relative_eq!(a("-pi"), -PI);
        assert_relative_eq!(a("0"), 0.0);
        assert!(parse_angle(&Value::String("half".into()), "a").is_err());
        assert_eq!(parse_time(&Value::String("off".into()), "t").unwrap(), f64::INFINITY);
        assert!(parse_frequency(&Value::String("3 parsec".into()), "f").is_err());
    }

    #[test]
    fn missing_field_is_named() {
        let text = r#"
[circuit]
e_j = ["27.0 GHz", "20.1 GHz"]
g = ["101 MHz", "127 MHz"]
omega_r = "9.16 GHz"
[protocol]
n = 2
angles = [0, 0, 0]
nbar = 1
"#;
        let err = ExperimentConfig::from_str(text).unwrap_err();
        assert!(matches!(&err, ConfigError::Missing(f) if f == "circuit.e_c"), "{err}");
    }

    #[test]
    fn circuit_block_runs_extraction() {
        let text = r#"
[circuit]
e_j = ["27.0 GHz", "20.1 GHz"]
e_c = ["0.3 GHz", "0.3 GHz"]
g = ["101 MHz", "127 MHz"]
omega_r = "9.16 GHz"
[protocol]
n = 2
angles = [0, 0, 0]
nbar = 1
"#;
        let c = ExperimentConfig::from_str(text).unwrap();
        let mhz = |x: f64| x / (2.0 * PI * 1e6);
        assert!((mhz(c.system.chi_qr[1]) - 1.499).abs() < 0.03);
    }

    #[test]
    fn rejects_bad_blocks() {
        let both = format!("{CAPTION}\n[circuit]\nomega_r = 1\n");
        assert!(ExperimentConfig::from_str(&both).is_err());
        let bad_angles = CAPTION.replace("angles = [\"0.25pi\", \"pi\", 1]", "angles = [0, 0]");
        assert!(matches!(ExperimentConfig::from_str(&bad_angles), Err(ConfigError::Invalid { .. })));
        let stray = CAPTION.replace("nbar = 3", "nbar = 3\ncolour = 1");
        assert!(matches!(ExperimentConfig::from_str(&stray), Err(ConfigError::UnknownKey(_))));
        let unphysical = CAPTION.replace("tau_phi = \"0.1 ms\"", "tau_phi = 300");
        assert!(matches!(ExperimentConfig::from_str(&unphysical), Err(ConfigError::Noise(_))));
    }

    #[test]
    fn overrides_for_sweeps() {
        let c = ExperimentConfig::from_str(CAPTION).unwrap();
        let d = c.with_override("system.delta_omega", 2.0).unwrap();
        assert_relative_eq!(d.system.delta_omega, 2.0 * PI * 2e6, max_relative = 1e-15);
        let e = c.with_override("protocol.angles.0", 0.5).unwrap();
        assert_relative_eq!(e.protocol.angles[0], PI / 2.0);
        let f = c.with_override("simulation.cutoff", 40.0).unwrap();
        assert_eq!(f.simulation.cutoff, 40);
        assert!(matches!(c.with_override("protocol.colour", 1.0), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.with_override("protocol.angles.7", 1.0), Err(ConfigError::UnknownKey(_))));
    }
}

//! Pulse schedules for coherent controlization through a shared cavity.
//!
//! A schedule is a flat list of [`PulseEvent`]s grouped into labelled steps.
//! Qubit components of the joint state are indexed by register bits (see
//! [`crate::hilbert`]); during a wait of length `t` the cavity part of the
//! component `b` rotates by `e^{i s_b Δω t}` with `s_b` from [`component_speeds`].

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::hilbert::{qubit_bit, Operator, SpaceLayout, C64, ZERO};

pub const DEFAULT_MAX_QUBITS: usize = 6;

/// Distance from the origin below which a tracked component sits in the vacuum.
pub const VACUUM_RADIUS: f64 = 1e-9;

/// Squared amplitude below which a tracked component counts as empty.
pub const POPULATION_FLOOR: f64 = 1e-12;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("{n} qubits need {expected} angles, got {got}")]
    BadAngleCount { n: usize, expected: usize, got: usize },
    #[error("{n} qubits unsupported (allowed 2..={max})")]
    UnsupportedN { n: usize, max: usize },
    #[error("echo mismatch delta = {0} outside [0, 0.5)")]
    DeltaTooLarge(f64),
    #[error("echo correction is only defined for two qubits, got {0}")]
    EchoUnsupported(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Rotation angles `θ_1 … θ_{2^n−1}` in heap order: `θ_1` acts on `q_n`, and the
/// children of `θ_k` are `θ_{2k}` (control bit 1) and `θ_{2k+1}` (control bit 0).
#[derive(Clone, Debug, PartialEq)]
pub struct AngleSet {
    theta: Vec<f64>,
}

impl AngleSet {
    pub fn new(n: usize, theta: Vec<f64>) -> Result<Self, ProtocolError> {
        let expected = (1usize << n) - 1;
        if n == 0 || n > 20 || theta.len() != expected {
            return Err(ProtocolError::BadAngleCount { n, expected, got: theta.len() });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(ProtocolError::InvalidParameter("angles must be finite".into()));
        }
        Ok(Self { theta })
    }

    pub fn zeros(n: usize) -> Self {
        Self { theta: vec![0.0; (1 << n) - 1] }
    }

    pub fn n_qubits(&self) -> usize {
        (self.theta.len() + 1).trailing_zeros() as usize
    }

    /// `θ_j`, one-based.
    pub fn theta(&self, j: usize) -> f64 {
        self.theta[j - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PulseEvent {
    Displace { alpha: C64 },
    /// Free evolution followed by the frame rotation `e^{−i φ n̂}`.
    Wait { duration: f64, frame_angle: f64 },
    /// Vacuum-conditioned `U(θ)`; its window is the duration of the next wait.
    ConditionalRotation { qubit: usize, theta: f64, window: f64 },
    UnconditionalRotation { qubit: usize, theta: f64 },
    /// `−i (cos φ X + sin φ Y)` on one qubit.
    EchoPi { qubit: usize, axis: f64 },
    /// `e^{iφ}` on the register states with both qubits excited.
    ControlledPhase { qubits: [usize; 2], phi: f64 },
}

/// Which components set `γ` in the frame correction after a wait.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum FrameReference {
    #[default]
    AllComponents,
    /// Only components carrying weight when the protocol starts from this
    /// register state.
    Populated(Vec<C64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleOptions {
    /// Cavity self-Kerr `χ_rr`; when set every wait carries the angle
    /// `ε_w (2|γ|² + 1)` with `ε_w = χ_rr t_w / 2`.
    pub kerr_frame: Option<f64>,
    /// Relative excess `δ` of the `q_2` coupling compensated by an echo.
    pub echo_delta: f64,
    pub frame_reference: FrameReference,
    pub max_qubits: usize,
    /// Phase put on `|11⟩` together with `U(θ_2)` (two qubits only).
    pub cross_kerr_phase: Option<f64>,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            kerr_frame: None,
            echo_delta: 0.0,
            frame_reference: FrameReference::AllComponents,
            max_qubits: DEFAULT_MAX_QUBITS,
            cross_kerr_phase: None,
        }
    }
}

/// Events `start..end` of a schedule form the step called `label`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolStep {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSchedule {
    pub events: Vec<PulseEvent>,
    pub steps: Vec<ProtocolStep>,
    pub n_qubits: usize,
    pub alpha: C64,
    pub delta_omega: f64,
    pub options: ScheduleOptions,
}

impl ProtocolSchedule {
    /// `π/Δω`.
    pub fn delta_t(&self) -> f64 {
        PI / self.delta_omega
    }

    pub fn step(&self, label: &str) -> Option<&ProtocolStep> {
        self.steps.iter().find(|s| s.label == label)
    }

    pub fn step_events(&self, step: &ProtocolStep) -> &[PulseEvent] {
        &self.events[step.start..step.end]
    }

    pub fn total_time(&self) -> f64 {
        self.events
            .iter()
            .map(|e| match e {
                PulseEvent::Wait { duration, .. } => *duration,
                _ => 0.0,
            })
            .sum()
    }

    /// Largest displacement amplitude reached by any tracked component.
    pub fn max_excursion(&self) -> f64 {
        let speeds = component_speeds(self.n_qubits, self.options.echo_delta);
        let mut tr = PhaseSpaceTracker::new(self.n_qubits, self.delta_omega, speeds, None);
        let mut m: f64 = 0.0;
        for e in &self.events {
            tr.apply(e);
            m = tr.positions().iter().fold(m, |acc, p| acc.max(p.norm()));
        }
        m
    }

    /// Line-oriented text form with 17 significant digits per number.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# cavitybus schedule n={} alpha={},{} delta_omega={}",
            self.n_qubits,
            fmt17(self.alpha.re),
            fmt17(self.alpha.im),
            fmt17(self.delta_omega)
        );
        for step in &self.steps {
            let _ = writeln!(out, "# step {}", step.label);
            for e in self.step_events(step) {
                out.push_str(&event_line(e));
                out.push('\n');
            }
        }
        out
    }
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn event_line(e: &PulseEvent) -> String {
    match e {
        PulseEvent::Displace { alpha } => format!("D {} {}", fmt17(alpha.re), fmt17(alpha.im)),
        PulseEvent::Wait { duration, frame_angle } => format!("W {} {}", fmt17(*duration), fmt17(*frame_angle)),
        PulseEvent::ConditionalRotation { qubit, theta, window } => {
            format!("CR {qubit} {} {}", fmt17(*theta), fmt17(*window))
        }
        PulseEvent::UnconditionalRotation { qubit, theta } => format!("UR {qubit} {}", fmt17(*theta)),
        PulseEvent::EchoPi { qubit, axis } => format!("E {qubit} {}", fmt17(*axis)),
        PulseEvent::ControlledPhase { qubits, phi } => format!("CP {} {} {}", qubits[0], qubits[1], fmt17(*phi)),
    }
}

/// Reads the output of [`ProtocolSchedule::to_text`]. Options are not part of
/// the format and come back as defaults.
pub fn parse_schedule_text(text: &str) -> Result<ProtocolSchedule, ProtocolError> {
    let mut events = Vec::new();
    let mut steps: Vec<ProtocolStep> = Vec::new();
    let mut n_qubits = None;
    let mut alpha = ZERO;
    let mut delta_omega = None;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let perr = |msg: &str| ProtocolError::Parse { line, msg: msg.to_string() };
        let t = raw.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(label) = rest.strip_prefix("step ") {
                if let Some(last) = steps.last_mut() {
                    last.end = events.len();
                }
                steps.push(ProtocolStep { label: label.trim().to_string(), start: events.len(), end: events.len() });
            } else if let Some(hdr) = rest.strip_prefix("cavitybus schedule") {
                for kv in hdr.split_whitespace() {
                    let (key, val) = kv.split_once('=').ok_or_else(|| perr("malformed header"))?;
                    match key {
                        "n" => n_qubits = Some(val.parse::<usize>().map_err(|_| perr("bad n"))?),
                        "alpha" => {
                            let (re, im) = val.split_once(',').ok_or_else(|| perr("bad alpha"))?;
                            alpha = C64::new(
                                re.parse().map_err(|_| perr("bad alpha"))?,
                                im.parse().map_err(|_| perr("bad alpha"))?,
                            );
                        }
                        "delta_omega" => delta_omega = Some(val.parse::<f64>().map_err(|_| perr("bad delta_omega"))?),
                        _ => {}
                    }
                }
            }
            continue;
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        let f = |i: usize| -> Result<f64, ProtocolError> {
            toks.get(i).ok_or_else(|| perr("missing field"))?.parse::<f64>().map_err(|_| perr("bad number"))
        };
        let q = |i: usize| -> Result<usize, ProtocolError> {
            toks.get(i).ok_or_else(|| perr("missing field"))?.parse::<usize>().map_err(|_| perr("bad qubit index"))
        };
        let ev = match toks[0] {
            "D" => PulseEvent::Displace { alpha: C64::new(f(1)?, f(2)?) },
            "W" => PulseEvent::Wait { duration: f(1)?, frame_angle: f(2)? },
            "CR" => PulseEvent::ConditionalRotation { qubit: q(1)?, theta: f(2)?, window: f(3)? },
            "UR" => PulseEvent::UnconditionalRotation { qubit: q(1)?, theta: f(2)? },
            "E" => PulseEvent::EchoPi { qubit: q(1)?, axis: if toks.len() > 2 { f(2)? } else { 0.0 } },
            "CP" => PulseEvent::ControlledPhase { qubits: [q(1)?, q(2)?], phi: f(3)? },
            other => return Err(perr(&format!("unknown event `{other}`"))),
        };
        events.push(ev);
    }
    if let Some(last) = steps.last_mut() {
        last.end = events.len();
    }
    if steps.is_empty() {
        steps = (0..events.len()).map(|i| ProtocolStep { label: roman(i + 1), start: i, end: i + 1 }).collect();
    }
    let n_qubits = n_qubits.ok_or(ProtocolError::Parse { line: 1, msg: "missing header".into() })?;
    let delta_omega = delta_omega.ok_or(ProtocolError::Parse { line: 1, msg: "missing delta_omega".into() })?;
    Ok(ProtocolSchedule { events, steps, n_qubits, alpha, delta_omega, options: ScheduleOptions::default() })
}

/// Lower-case roman numeral.
pub fn roman(mut k: usize) -> String {
    const TABLE: [(usize, &str); 13] = [
        (1000, "m"),
        (900, "cm"),
        (500, "d"),
        (400, "cd"),
        (100, "c"),
        (90, "xc"),
        (50, "l"),
        (40, "xl"),
        (10, "x"),
        (9, "ix"),
        (5, "v"),
        (4, "iv"),
        (1, "i"),
    ];
    let mut s = String::new();
    for &(v, r) in &TABLE {
        while k >= v {
            s.push_str(r);
            k -= v;
        }
    }
    s
}

/// `exp(−i θ σ_y / 2)`.
pub fn y_rotation(theta: f64) -> [[C64; 2]; 2] {
    let (s, c) = (theta / 2.0).sin_cos();
    [[C64::new(c, 0.0), C64::new(-s, 0.0)], [C64::new(s, 0.0), C64::new(c, 0.0)]]
}

/// `−i (cos φ X + sin φ Y)`.
pub fn echo_matrix(axis: f64) -> [[C64; 2]; 2] {
    let mi = C64::new(0.0, -1.0);
    [[ZERO, mi * C64::from_polar(1.0, -axis)], [mi * C64::from_polar(1.0, axis), ZERO]]
}

/// Rotation rates of the register components in units of `Δω`:
/// `s_b = Σ_i b_i 2^{n−i}` with the weight of `q_n` scaled by `1 + slow_mismatch`.
pub fn component_speeds(n: usize, slow_mismatch: f64) -> Vec<f64> {
    (0..1usize << n)
        .map(|b| {
            (1..=n)
                .filter(|&q| b & qubit_bit(q) != 0)
                .map(|q| {
                    let w = (1u64 << (n - q)) as f64;
                    if q == n {
                        w * (1.0 + slow_mismatch)
                    } else {
                        w
                    }
                })
                .sum()
        })
        .collect()
}

/// Follows the coherent-state centre, geometric phase and ideal register
/// amplitude of every component through a schedule, ignoring Kerr terms.
#[derive(Clone, Debug)]
pub struct PhaseSpaceTracker {
    n_qubits: usize,
    delta_omega: f64,
    speeds: Vec<f64>,
    pos: Vec<C64>,
    phase: Vec<f64>,
    amp: Vec<C64>,
}

impl PhaseSpaceTracker {
    pub fn new(n_qubits: usize, delta_omega: f64, speeds: Vec<f64>, amplitudes: Option<&[C64]>) -> Self {
        let d = 1 << n_qubits;
        let amp = match amplitudes {
            Some(a) => a.to_vec(),
            None => vec![C64::new(1.0 / (d as f64).sqrt(), 0.0); d],
        };
        Self { n_qubits, delta_omega, speeds, pos: vec![ZERO; d], phase: vec![0.0; d], amp }
    }

    pub fn positions(&self) -> &[C64] {
        &self.pos
    }

    pub fn geometric_phases(&self) -> &[f64] {
        &self.phase
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amp
    }

    pub fn populated(&self, b: usize) -> bool {
        self.amp[b].norm_sqr() > POPULATION_FLOOR
    }

    /// Largest `|γ|` among the selected components.
    pub fn max_radius(&self, populated_only: bool) -> f64 {
        (0..self.pos.len())
            .filter(|&b| !populated_only || self.populated(b))
            .map(|b| self.pos[b].norm())
            .fold(0.0, f64::max)
    }

    fn mix(&mut self, qubit: usize, u: [[C64; 2]; 2], vacuum_only: bool) {
        let bit = qubit_bit(qubit);
        for b in 0..self.amp.len() {
            if b & bit != 0 {
                continue;
            }
            let c = b | bit;
            if vacuum_only && (self.pos[b].norm() > VACUUM_RADIUS || self.pos[c].norm() > VACUUM_RADIUS) {
                continue;
            }
            let (x0, x1) = (self.amp[b], self.amp[c]);
            self.amp[b] = u[0][0] * x0 + u[0][1] * x1;
            self.amp[c] = u[1][0] * x0 + u[1][1] * x1;
        }
    }

    pub fn apply(&mut self, e: &PulseEvent) {
        match *e {
            PulseEvent::Displace { alpha } => {
                for (p, ph) in self.pos.iter_mut().zip(self.phase.iter_mut()) {
                    *ph += (alpha * p.conj()).im;
                    *p += alpha;
                }
            }
            PulseEvent::Wait { duration, .. } => {
                for (p, s) in self.pos.iter_mut().zip(&self.speeds) {
                    *p *= C64::from_polar(1.0, s * self.delta_omega * duration);
                }
            }
            PulseEvent::ConditionalRotation { qubit, theta, .. } => self.mix(qubit, y_rotation(theta), true),
            PulseEvent::UnconditionalRotation { qubit, theta } => self.mix(qubit, y_rotation(theta), false),
            PulseEvent::EchoPi { qubit, axis } => {
                let bit = qubit_bit(qubit);
                let m = echo_matrix(axis);
                for b in 0..self.amp.len() {
                    if b & bit != 0 {
                        continue;
                    }
                    let c = b | bit;
                    self.pos.swap(b, c);
                    self.phase.swap(b, c);
                    let (x0, x1) = (self.amp[b], self.amp[c]);
                    self.amp[b] = m[0][1] * x1;
                    self.amp[c] = m[1][0] * x0;
                }
            }
            PulseEvent::ControlledPhase { qubits, phi } => {
                let mask = qubit_bit(qubits[0]) | qubit_bit(qubits[1]);
                for (b, a) in self.amp.iter_mut().enumerate() {
                    if b & mask == mask {
                        *a *= C64::from_polar(1.0, phi);
                    }
                }
            }
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }
}

/// `ε (2|γ|² + 1)`.
pub fn frame_correction_angle(gamma: C64, eps: f64) -> f64 {
    eps * (2.0 * gamma.norm_sqr() + 1.0)
}

/// Split `(t′, t″)` of the recombination wait when `χ_{q2 r} = (χ_{q1 r}/2)(1+δ)`.
pub fn echo_segments(delta: f64, chi_q1r: f64) -> Result<(f64, f64), ProtocolError> {
    if !(0.0..0.5).contains(&delta) {
        return Err(ProtocolError::DeltaTooLarge(delta));
    }
    if !(chi_q1r > 0.0 && chi_q1r.is_finite()) {
        return Err(ProtocolError::InvalidParameter("χ_q1r must be positive".into()));
    }
    let t1 = PI / chi_q1r * (2.0 + delta) / (1.0 + delta);
    let t2 = 2.0 * PI / chi_q1r - t1;
    Ok((t1, t2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleStats {
    pub displacements: usize,
    /// Conditional and unconditional rotations; echo pulses are not counted.
    pub unitaries: usize,
    pub total_time: f64,
    pub total_time_in_dt: f64,
}

pub fn schedule_stats(s: &ProtocolSchedule) -> ScheduleStats {
    let mut st = ScheduleStats { displacements: 0, unitaries: 0, total_time: 0.0, total_time_in_dt: 0.0 };
    for e in &s.events {
        match e {
            PulseEvent::Displace { .. } => st.displacements += 1,
            PulseEvent::ConditionalRotation { .. } | PulseEvent::UnconditionalRotation { .. } => st.unitaries += 1,
            PulseEvent::Wait { duration, .. } => st.total_time += duration,
            _ => {}
        }
    }
    st.total_time_in_dt = st.total_time / s.delta_t();
    st
}

/// `N_D = 2^{n+1} − 4`, `N_U = 2^n − 1`, `T/Δt = 3·2^n − 11` (valid for `n ≥ 3`).
pub fn counting_formulas(n: usize) -> (usize, usize, f64) {
    ((1 << (n + 1)) - 4, (1 << n) - 1, (3 * (1i64 << n) - 11) as f64)
}

// Draft events use α as the unit of displacement and Δt as the unit of time.
#[derive(Clone, Debug)]
enum Draft {
    Ur { qubit: usize, heap: usize },
    D(C64),
    W(f64),
    Cr { qubit: usize, heap: usize, w: f64 },
    EchoWait { qubit: usize, first: f64, second: f64, axis: f64 },
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn draft_two(echo: Option<(f64, f64)>) -> Vec<Draft> {
    use Draft::*;
    match echo {
        None => vec![
            Ur { qubit: 2, heap: 1 },
            D(c(1.0, 0.0)),
            W(1.0),
            D(c(1.0, 0.0)),
            Cr { qubit: 1, heap: 2, w: 1.0 },
            D(c(-2.0, 0.0)),
            Cr { qubit: 1, heap: 3, w: 1.0 },
            D(c(-1.0, 0.0)),
            W(1.0),
            D(c(1.0, 0.0)),
        ],
        Some((delta, axis)) => {
            let e = C64::from_polar(1.0, PI * delta);
            let one = c(1.0, 0.0);
            let x = -(one + e) * e / 2.0;
            let first = (2.0 + delta) / (2.0 * (1.0 + delta));
            vec![
                Ur { qubit: 2, heap: 1 },
                D(one),
                W(1.0),
                D(e),
                Cr { qubit: 1, heap: 2, w: 1.0 },
                D(-(one + e)),
                Cr { qubit: 1, heap: 3, w: 1.0 },
                D(x),
                EchoWait { qubit: 2, first, second: 1.0 - first, axis },
                D(-x * C64::from_polar(1.0, PI * delta / 2.0)),
            ]
        }
    }
}

fn draft_three() -> Vec<Draft> {
    use Draft::*;
    vec![
        Ur { qubit: 3, heap: 1 },
        D(c(1.0, 0.0)),
        W(1.0),
        D(c(1.0, 0.0)),
        Cr { qubit: 2, heap: 2, w: 1.0 },
        D(c(-2.0, 0.0)),
        Cr { qubit: 2, heap: 3, w: 0.5 },
        D(c(0.0, -2.0)),
        Cr { qubit: 1, heap: 4, w: 2.0 },
        D(c(0.0, 4.0)),
        Cr { qubit: 1, heap: 5, w: 2.0 },
        D(c(0.0, -2.0)),
        W(0.5),
        D(c(-2.0, 0.0)),
        W(0.5),
        D(c(-2.0, 0.0)),
        Cr { qubit: 1, heap: 6, w: 2.0 },
        D(c(4.0, 0.0)),
        Cr { qubit: 1, heap: 7, w: 2.0 },
        D(c(-2.0, 0.0)),
        W(0.5),
        D(c(1.0, 0.0)),
        W(1.0),
        D(c(1.0, 0.0)),
    ]
}

// Unit-free positions of every component after each draft event; Δt = 1, α = 1.
fn draft_positions(draft: &[Draft], n: usize) -> Vec<C64> {
    let speeds = component_speeds(n, 0.0);
    let mut tr = PhaseSpaceTracker::new(n, PI, speeds, None);
    for d in draft {
        for e in draft_events(d, &AngleSet::zeros(n), c(1.0, 0.0), 1.0) {
            tr.apply(&e);
        }
    }
    tr.pos
}

// Positions reached during the inserted sequence for offset `b1`; returns
// (feasible, largest radius, smallest non-target radius).
fn score_insertion(pos: &[C64], speeds: &[f64], w1: f64, b1: C64) -> (bool, f64, f64) {
    let targets: Vec<usize> = (0..pos.len()).filter(|&b| pos[b].norm() < VACUUM_RADIUS).collect();
    let Some(&lead) = targets.iter().find(|&&b| b & qubit_bit(2) != 0) else {
        return (false, f64::INFINITY, 0.0);
    };
    let q: Vec<C64> = pos.iter().zip(speeds).map(|(p, s)| (p + b1) * C64::from_polar(1.0, PI * w1 * s)).collect();
    let b2 = -q[lead];
    let mut max_r: f64 = b1.norm();
    let mut min_other = f64::INFINITY;
    let mut ok = b1.norm() >= 1.0 - 1e-9;
    for b in 0..pos.len() {
        let (r1, r2) = ((q[b] + b2).norm(), (q[b] - b2).norm());
        max_r = max_r.max(r1).max(r2).max(q[b].norm());
        if targets.contains(&b) {
            let first = b & qubit_bit(2) != 0;
            let (near, far) = if first { (r1, r2) } else { (r2, r1) };
            ok &= near < VACUUM_RADIUS && far >= 2.0 - 1e-9;
        } else {
            min_other = min_other.min(r1.min(r2));
        }
    }
    ok &= min_other >= 2.0 - 1e-9;
    (ok, max_r, min_other)
}

// Adds qubit n+1 to an n-qubit draft: old labels shift up by one and the new
// fastest qubit becomes q_1. After every window of a rotation on the old q_1 a
// sequence of four displacements brings the two sub-branches to the vacuum in
// turn; its net action on all other components is a displacement that is
// folded into the following displacement.
fn extend_draft(old: &[Draft], n: usize) -> Vec<Draft> {
    use Draft::*;
    let n_new = n + 1;
    let speeds = component_speeds(n_new, 0.0);
    let w1 = 2.0 / (1u64 << n) as f64;
    let mut out: Vec<Draft> = Vec::with_capacity(old.len() * 2);
    let mut carry = ZERO;
    for ev in old {
        let shifted = match ev.clone() {
            Ur { qubit, heap } => Ur { qubit: qubit + 1, heap },
            Cr { qubit, heap, w } => Cr { qubit: qubit + 1, heap, w },
            EchoWait { qubit, first, second, axis } => EchoWait { qubit: qubit + 1, first, second, axis },
            D(b) => {
                let b = b - carry;
                carry = ZERO;
                D(b)
            }
            w => w,
        };
        let insert_after = matches!(shifted, Cr { qubit: 2, .. });
        let heap = if let Cr { heap, .. } = shifted { heap } else { 0 };
        out.push(shifted);
        if !insert_after {
            continue;
        }
        let pos = draft_positions(&out, n_new);
        let mut best: Option<(C64, f64, f64)> = None;
        for r in [1.0, 2.0] {
            for k in 0..8 {
                let b1 = C64::from_polar(r, PI * k as f64 / 4.0);
                let (ok, max_r, min_other) = score_insertion(&pos, &speeds, w1, b1);
                if !ok {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((_, m, o)) => max_r < m - 1e-9 || ((max_r - m).abs() <= 1e-9 && min_other > o + 1e-9),
                };
                if better {
                    best = Some((b1, max_r, min_other));
                }
            }
        }
        let b1 = best.map(|b| b.0).unwrap_or(c(2.0, 0.0));
        let lead = (0..pos.len()).find(|&b| pos[b].norm() < VACUUM_RADIUS && b & qubit_bit(2) != 0).unwrap_or(0);
        let b2 = -(pos[lead] + b1) * C64::from_polar(1.0, PI * w1 * speeds[lead]);
        out.extend([
            D(b1),
            W(w1),
            D(b2),
            Cr { qubit: 1, heap: 2 * heap, w: 2.0 },
            D(-2.0 * b2),
            Cr { qubit: 1, heap: 2 * heap + 1, w: 2.0 },
            D(b2),
            W(2.0 - w1),
        ]);
        carry = b1;
    }
    debug_assert!(carry == ZERO);
    out
}

fn draft_events(d: &Draft, angles: &AngleSet, alpha: C64, dt: f64) -> Vec<PulseEvent> {
    let wait = |w: f64| PulseEvent::Wait { duration: w * dt, frame_angle: 0.0 };
    match *d {
        Draft::Ur { qubit, heap } => vec![PulseEvent::UnconditionalRotation { qubit, theta: angles.theta(heap) }],
        Draft::D(b) => vec![PulseEvent::Displace { alpha: b * alpha }],
        Draft::W(w) => vec![wait(w)],
        Draft::Cr { qubit, heap, w } => {
            vec![PulseEvent::ConditionalRotation { qubit, theta: angles.theta(heap), window: w * dt }, wait(w)]
        }
        Draft::EchoWait { qubit, first, second, axis } => vec![
            wait(first),
            PulseEvent::EchoPi { qubit, axis: 0.0 },
            wait(second),
            PulseEvent::EchoPi { qubit, axis },
        ],
    }
}

/// Compiles the protocol for `n` qubits.
///
/// Two and three qubits use fixed sequences; larger registers are grown from
/// the three-qubit sequence one qubit at a time.
pub fn build_schedule(
    n: usize,
    angles: &AngleSet,
    alpha: C64,
    delta_omega: f64,
    opts: &ScheduleOptions,
) -> Result<ProtocolSchedule, ProtocolError> {
    let max = opts.max_qubits.min(20);
    if n < 2 || n > max {
        return Err(ProtocolError::UnsupportedN { n, max });
    }
    let expected = (1usize << n) - 1;
    if angles.as_slice().len() != expected {
        return Err(ProtocolError::BadAngleCount { n, expected, got: angles.as_slice().len() });
    }
    if !(delta_omega > 0.0 && delta_omega.is_finite()) {
        return Err(ProtocolError::InvalidParameter("Δω must be positive".into()));
    }
    if !(alpha.re.is_finite() && alpha.im.is_finite()) || alpha.norm() == 0.0 {
        return Err(ProtocolError::InvalidParameter("α must be finite and non-zero".into()));
    }
    let delta = opts.echo_delta;
    if delta != 0.0 {
        if n != 2 {
            return Err(ProtocolError::EchoUnsupported(n));
        }
        if !(0.0..0.5).contains(&delta) {
            return Err(ProtocolError::DeltaTooLarge(delta));
        }
    }
    if opts.cross_kerr_phase.is_some() && n != 2 {
        return Err(ProtocolError::InvalidParameter("cross-Kerr phase gate is defined for two qubits".into()));
    }
    if let FrameReference::Populated(init) = &opts.frame_reference {
        if init.len() != 1 << n {
            return Err(ProtocolError::InvalidParameter("frame reference state has wrong dimension".into()));
        }
    }
    if let Some(chi_rr) = opts.kerr_frame {
        if !(chi_rr >= 0.0 && chi_rr.is_finite()) {
            return Err(ProtocolError::InvalidParameter("χ_rr must be non-negative".into()));
        }
    }

    let draft = match n {
        2 => {
            let echo = (delta != 0.0).then(|| (delta, alpha.norm_sqr() * (PI * delta).sin() / 2.0));
            draft_two(echo)
        }
        _ => {
            let mut d = draft_three();
            for m in 3..n {
                d = extend_draft(&d, m);
            }
            d
        }
    };

    let dt = PI / delta_omega;
    let mut events = Vec::new();
    let mut steps = Vec::new();
    for (k, d) in draft.iter().enumerate() {
        let start = events.len();
        events.extend(draft_events(d, angles, alpha, dt));
        if let (Some(phi), Draft::Cr { heap: 2, .. }) = (opts.cross_kerr_phase, d) {
            events.insert(start + 1, PulseEvent::ControlledPhase { qubits: [2, 1], phi });
        }
        steps.push(ProtocolStep { label: roman(k + 1), start, end: events.len() });
    }

    if let Some(chi_rr) = opts.kerr_frame {
        let init = match &opts.frame_reference {
            FrameReference::AllComponents => None,
            FrameReference::Populated(v) => Some(v.as_slice()),
        };
        let mut tr = PhaseSpaceTracker::new(n, delta_omega, component_speeds(n, delta), init);
        for e in events.iter_mut() {
            if let PulseEvent::Wait { duration, frame_angle } = e {
                let gamma = match opts.frame_reference {
                    FrameReference::AllComponents => tr.max_radius(false),
                    FrameReference::Populated(_) => tr.max_radius(true),
                };
                *frame_angle = frame_correction_angle(C64::new(gamma, 0.0), chi_rr * *duration / 2.0);
            }
            tr.apply(e);
        }
    }

    Ok(ProtocolSchedule { events, steps, n_qubits: n, alpha, delta_omega, options: opts.clone() })
}

// Register bits of the control pattern selected by heap index `k` at depth `L`.
fn control_pattern(n: usize, k: usize) -> (usize, usize) {
    let depth = usize::BITS as usize - 1 - k.leading_zeros() as usize;
    let mut mask = 0;
    let mut value = 0;
    for j in 0..depth {
        let digit = (k >> (depth - 1 - j)) & 1;
        let bit = qubit_bit(n - j);
        mask |= bit;
        if digit == 0 {
            value |= bit;
        }
    }
    (mask, value)
}

/// Dense matrix of the probability unitary; rows and columns are register bits.
pub fn target_matrix(n: usize, angles: &AngleSet) -> Result<Array2<C64>, ProtocolError> {
    let expected = (1usize << n) - 1;
    if n == 0 || angles.as_slice().len() != expected {
        return Err(ProtocolError::BadAngleCount { n, expected, got: angles.as_slice().len() });
    }
    let d = 1usize << n;
    let mut u = Array2::<C64>::eye(d);
    for depth in 0..n {
        let target = n - depth;
        let tb = qubit_bit(target);
        let mut layer = Array2::<C64>::zeros((d, d));
        for k in (1 << depth)..(1 << (depth + 1)) {
            let (mask, value) = control_pattern(n, k);
            let r = y_rotation(angles.theta(k));
            for col in 0..d {
                if col & mask != value {
                    continue;
                }
                let cb = usize::from(col & tb != 0);
                for rb in 0..2 {
                    let row = (col & !tb) | if rb == 1 { tb } else { 0 };
                    layer[[row, col]] += r[rb][cb];
                }
            }
        }
        u = layer.dot(&u);
    }
    Ok(u)
}

/// The probability unitary as an operator on the bare register.
pub fn target_unitary(n: usize, angles: &AngleSet) -> Result<Operator, ProtocolError> {
    let m = target_matrix(n, angles)?;
    let layout = SpaceLayout::qubits_only(n).map_err(|e| ProtocolError::InvalidParameter(e.to_string()))?;
    Ok(Operator::from_dense(layout, m.view()))
}

/// `U(θ) |ξ⟩` for a register ket `ξ`.
pub fn target_state(n: usize, angles: &AngleSet, initial: &[C64]) -> Result<Array1<C64>, ProtocolError> {
    let m = target_matrix(n, angles)?;
    if initial.len() != m.nrows() {
        return Err(ProtocolError::InvalidParameter("register state has wrong dimension".into()));
    }
    Ok(m.dot(&Array1::from(initial.to_vec())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dw() -> f64 {
        2.0 * PI * 1.5e6
    }

    fn ideal_track(s: &ProtocolSchedule) -> PhaseSpaceTracker {
        let mut tr = PhaseSpaceTracker::new(s.n_qubits, s.delta_omega, component_speeds(s.n_qubits, 0.0), None);
        for e in &s.events {
            tr.apply(e);
        }
        tr
    }

    #[test]
    fn two_qubit_layout_of_events() {
        let s = build_schedule(2, &AngleSet::zeros(2), C64::new(1.2, 0.0), dw(), &Default::default()).unwrap();
        let st = schedule_stats(&s);
        assert_eq!((st.displacements, st.unitaries), (5, 3));
        assert_abs_diff_eq!(st.total_time_in_dt, 4.0, epsilon = 1e-12);
        let waits = s.events.iter().filter(|e| matches!(e, PulseEvent::Wait { .. })).count();
        assert_eq!(waits, 4);
        assert_eq!(s.steps.len(), 10);
        assert_eq!(s.steps[9].label, "x");
    }

    #[test]
    fn counting_for_three_to_six() {
        for n in 3..=6 {
            let s = build_schedule(n, &AngleSet::zeros(n), C64::new(1.0, 0.0), dw(), &Default::default()).unwrap();
            let st = schedule_stats(&s);
            let (nd, nu, t) = counting_formulas(n);
            assert_eq!(st.displacements, nd, "n={n}");
            assert_eq!(st.unitaries, nu, "n={n}");
            assert_abs_diff_eq!(st.total_time_in_dt, t, epsilon = 1e-9);
        }
    }

    #[test]
    fn every_component_closes_its_loop_in_phase() {
        for n in 2..=6 {
            let s = build_schedule(n, &AngleSet::zeros(n), C64::new(1.0, 0.0), dw(), &Default::default()).unwrap();
            let tr = ideal_track(&s);
            for p in tr.positions() {
                assert!(p.norm() < 1e-9, "n={n} open loop {p}");
            }
            let ph0 = tr.geometric_phases()[0];
            for &ph in tr.geometric_phases() {
                let d = (ph - ph0).rem_euclid(2.0 * PI);
                assert!(d.min(2.0 * PI - d) < 1e-9, "n={n} phase spread");
            }
        }
    }

    #[test]
    fn conditional_windows_isolate_one_branch() {
        for n in 2..=5 {
            let s = build_schedule(n, &AngleSet::zeros(n), C64::new(1.0, 0.0), dw(), &Default::default()).unwrap();
            let mut tr = PhaseSpaceTracker::new(n, s.delta_omega, component_speeds(n, 0.0), None);
            for e in &s.events {
                if let PulseEvent::ConditionalRotation { qubit, .. } = e {
                    let bit = qubit_bit(*qubit);
                    let at_vac: Vec<usize> =
                        (0..1 << n).filter(|&b| tr.positions()[b].norm() < VACUUM_RADIUS).collect();
                    // the whole sub-register below the controls shares one position
                    assert_eq!(at_vac.len(), 2 * bit, "n={n}");
                    let high = !(2 * bit - 1);
                    assert!(at_vac.iter().all(|b| b & high == at_vac[0] & high));
                    for b in 0..1 << n {
                        if !at_vac.contains(&b) {
                            assert!(tr.positions()[b].norm() >= 2.0 - 1e-9);
                        }
                    }
                }
                tr.apply(e);
            }
        }
    }

    #[test]
    fn three_qubit_step_three_and_extremes() {
        let s = build_schedule(3, &AngleSet::zeros(3), C64::new(1.0, 0.0), dw(), &Default::default()).unwrap();
        assert_eq!(s.steps.len(), 24);
        assert_abs_diff_eq!(s.max_excursion(), 4.0, epsilon = 1e-9);
        let mut durations: Vec<f64> = s
            .events
            .iter()
            .filter_map(|e| if let PulseEvent::Wait { duration, .. } = e { Some(duration / s.delta_t()) } else { None })
            .collect();
        durations.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert!(durations.iter().all(|w| [0.5, 1.0, 2.0].iter().any(|x| (x - w).abs() < 1e-12)));
    }

    #[test]
    fn kerr_frame_angles_two_qubits() {
        let chi_rr = 2.0 * PI * 9.4e3;
        let alpha = C64::new(1.5f64.sqrt(), 0.0);
        let opts = ScheduleOptions { kerr_frame: Some(chi_rr), ..Default::default() };
        let s = build_schedule(2, &AngleSet::zeros(2), alpha, dw(), &opts).unwrap();
        let eps = chi_rr * s.delta_t() / 2.0;
        let angles: Vec<f64> = s
            .events
            .iter()
            .filter_map(|e| if let PulseEvent::Wait { frame_angle, .. } = e { Some(*frame_angle) } else { None })
            .collect();
        let a1 = eps * (2.0 * 1.5 + 1.0);
        let a2 = eps * (8.0 * 1.5 + 1.0);
        for (got, want) in angles.iter().zip([a1, a2, a2, a1]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn frame_angle_values() {
        assert_eq!(frame_correction_angle(C64::new(2.0, 0.0), 0.0), 0.0);
        let a = C64::new(1.5f64.sqrt(), 0.0);
        assert_abs_diff_eq!(frame_correction_angle(2.0 * a, 0.01), 0.13, epsilon = 1e-12);
        assert_abs_diff_eq!(frame_correction_angle(C64::new(3f64.sqrt(), 0.0), 0.01), 0.07, epsilon = 1e-12);
    }

    #[test]
    fn echo_split() {
        let chi = 2.0 * PI * 3e6;
        let (t1, t2) = echo_segments(0.0, chi).unwrap();
        assert_abs_diff_eq!(t1, 2.0 * PI / chi, epsilon = 1e-20);
        assert_eq!(t2, 0.0);
        let (t1, t2) = echo_segments(0.05, chi).unwrap();
        assert_abs_diff_eq!(t1 / (PI / chi), 2.05 / 1.05, epsilon = 1e-12);
        assert_abs_diff_eq!(t2 / (PI / chi), 2.0 - 2.05 / 1.05, epsilon = 1e-12);
        assert_abs_diff_eq!(t1 + t2, 2.0 * PI / chi, epsilon = 1e-20);
        assert!(matches!(echo_segments(0.5, chi), Err(ProtocolError::DeltaTooLarge(_))));
        assert!(matches!(echo_segments(-0.01, chi), Err(ProtocolError::DeltaTooLarge(_))));
    }

    #[test]
    fn echo_schedule_uses_split_wait() {
        let delta = 0.02;
        let opts = ScheduleOptions { echo_delta: delta, ..Default::default() };
        let s = build_schedule(2, &AngleSet::zeros(2), C64::new(1.0, 0.0), dw(), &opts).unwrap();
        let st = schedule_stats(&s);
        assert_eq!((st.displacements, st.unitaries), (5, 3));
        assert_abs_diff_eq!(st.total_time_in_dt, 4.0, epsilon = 1e-12);
        let ix = s.step("ix").unwrap();
        let ev = s.step_events(ix);
        assert_eq!(ev.len(), 4);
        let (t1, t2) = echo_segments(delta, 2.0 * dw()).unwrap();
        assert!(matches!(ev[0], PulseEvent::Wait { duration, .. } if (duration - t1).abs() < 1e-18));
        assert!(matches!(ev[2], PulseEvent::Wait { duration, .. } if (duration - t2).abs() < 1e-18));

        let mut tr = PhaseSpaceTracker::new(2, s.delta_omega, component_speeds(2, delta), None);
        for e in &s.events {
            tr.apply(e);
        }
        assert!(tr.positions().iter().all(|p| p.norm() < 1e-9));
    }

    #[test]
    fn rejects_bad_requests() {
        let a = C64::new(1.0, 0.0);
        assert!(matches!(
            build_schedule(2, &AngleSet::zeros(3), a, dw(), &Default::default()),
            Err(ProtocolError::BadAngleCount { .. })
        ));
        assert!(matches!(
            build_schedule(7, &AngleSet::zeros(7), a, dw(), &Default::default()),
            Err(ProtocolError::UnsupportedN { n: 7, max: 6 })
        ));
        assert!(AngleSet::new(2, vec![0.0; 4]).is_err());
        let echo3 = ScheduleOptions { echo_delta: 0.02, ..Default::default() };
        assert!(matches!(build_schedule(3, &AngleSet::zeros(3), a, dw(), &echo3), Err(ProtocolError::EchoUnsupported(3))));
    }

    #[test]
    fn target_identity_and_collapse() {
        let u = target_matrix(2, &AngleSet::zeros(2)).unwrap();
        assert_abs_diff_eq!((&u - &Array2::<C64>::eye(4)).iter().map(|z| z.norm()).fold(0.0, f64::max), 0.0);
        let th = AngleSet::new(2, vec![0.3, 1.1, 1.1]).unwrap();
        let u = target_matrix(2, &th).unwrap();
        // θ2 = θ3: a rotation on q1 after one on q2
        let r1 = y_rotation(0.3);
        let r2 = y_rotation(1.1);
        for row in 0..4 {
            for col in 0..4 {
                let want = r1[row >> 1][col >> 1] * r2[row & 1][col & 1];
                assert_abs_diff_eq!((u[[row, col]] - want).norm(), 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn target_caption_state() {
        let th = AngleSet::new(2, vec![PI / 2.0, PI, PI]).unwrap();
        let psi = target_state(2, &th, &[C64::new(1.0, 0.0), ZERO, ZERO, ZERO]).unwrap();
        let h = 0.5f64.sqrt();
        // |q2 q1⟩ = (|01⟩ + |11⟩)/√2
        let want = [0.0, h, 0.0, h];
        for (z, w) in psi.iter().zip(want) {
            assert_abs_diff_eq!(z.re, w, epsilon = 1e-12);
            assert_abs_diff_eq!(z.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn heap_order_three_qubits() {
        // θ_5 acts on q1 when (q3, q2) = (1, 0)
        let mut th = vec![0.0; 7];
        th[0] = PI;
        th[1] = PI;
        th[4] = PI;
        let psi = target_state(3, &AngleSet::new(3, th).unwrap(), &[C64::new(1.0, 0.0), ZERO, ZERO, ZERO, ZERO, ZERO, ZERO, ZERO])
            .unwrap();
        // q3 → 1, then θ2 (q3 = 1) flips q2 → 1, so θ5 is idle
        assert_abs_diff_eq!(psi[0b110].norm(), 1.0, epsilon = 1e-12);
        assert_eq!(control_pattern(3, 5), (0b110, 0b100));
        assert_eq!(control_pattern(3, 4), (0b110, 0b110));
        assert_eq!(control_pattern(3, 7), (0b110, 0b000));
    }

    #[test]
    fn text_round_trip() {
        let th = AngleSet::new(3, (1..=7).map(|k| 0.1 * k as f64).collect()).unwrap();
        let opts = ScheduleOptions { kerr_frame: Some(2.0 * PI * 3e3), ..Default::default() };
        let s = build_schedule(3, &th, C64::new(0.7, 0.2), 2.0 * PI * 0.3e6, &opts).unwrap();
        let text = s.to_text();
        let back = parse_schedule_text(&text).unwrap();
        assert_eq!(back.events, s.events);
        assert_eq!(back.steps, s.steps);
        assert_eq!(back.alpha, s.alpha);
        assert_eq!(back.delta_omega, s.delta_omega);
        assert!(parse_schedule_text("# cavitybus schedule n=2 alpha=1,0 delta_omega=1\nX 1\n").is_err());
    }

    #[test]
    fn roman_labels() {
        assert_eq!(roman(4), "iv");
        assert_eq!(roman(9), "ix");
        assert_eq!(roman(24), "xxiv");
    }
}

//! Acceptance checks run by `cavitybus verify` and the acceptance test target.

use std::f64::consts::PI;
use std::fmt;
use std::time::Instant;

use ndarray::Array1;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::analysis::{component_vacuum_overlap, qubit_target_fidelity, vacuum_return_fidelity, KerrCheckpoint};
use crate::circuit_params::{
    dispersive_chis_single, numeric_chis_multi, CircuitError, CoupledQubit, CouplingSpec, DispersiveChis,
    SystemParams, TransmonSpec, DEFAULT_CAVITY_LEVELS, DEFAULT_TRANSMON_LEVELS,
};
use crate::dynamics::{
    run_schedule_lindblad, run_schedule_unitary, state_trace, DynamicsOptions, NoiseConfig, StepTrace,
};
use crate::hilbert::{coherent_amplitudes, parse_qubit_label, QuantumState, SpaceLayout, C64, CUTOFF_GUARD, ONE, ZERO};
use crate::protocol::{
    build_schedule, counting_formulas, schedule_stats, target_state, AngleSet, ProtocolSchedule, ProtocolStep,
    PulseEvent, ScheduleOptions,
};

pub const MHZ: f64 = 2.0 * PI * 1e6;
const US: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Failure that is recorded as a known reproduction gap.
    pub known_gap: bool,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match (self.passed, self.known_gap) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known gap)",
            (false, false) => "FAIL",
        };
        write!(f, "[{:>2}] {status:<16} {:<34} {} ({:.1} s)", self.id, self.name, self.detail, self.seconds)
    }
}

type CheckFn = fn(&CheckContext) -> (bool, String);

/// Injection points for harness self-tests.
#[derive(Clone, Copy)]
pub struct CheckContext {
    pub dispersive: fn(f64, f64, f64) -> Result<DispersiveChis, CircuitError>,
}

impl Default for CheckContext {
    fn default() -> Self {
        Self { dispersive: dispersive_chis_single }
    }
}

struct Check {
    id: usize,
    name: &'static str,
    heavy: bool,
    run: CheckFn,
}

const CHECKS: &[Check] = &[
    Check { id: 1, name: "dispersive identity", heavy: false, run: dispersive_identity },
    Check { id: 2, name: "circuit parameter reproduction", heavy: false, run: circuit_reproduction },
    Check { id: 3, name: "ideal protocol exactness", heavy: false, run: ideal_exactness },
    Check { id: 4, name: "perturbative Kerr coefficients", heavy: false, run: perturbative_coefficients },
    Check { id: 5, name: "corrected fidelity vs coupling", heavy: false, run: fidelity_vs_coupling },
    Check { id: 6, name: "linear Kerr image order", heavy: false, run: linear_kerr_order },
    Check { id: 7, name: "two-qubit lossy table", heavy: false, run: two_qubit_table },
    Check { id: 8, name: "two-qubit 100 us run", heavy: false, run: caption_run },
    Check { id: 9, name: "three-qubit table", heavy: true, run: three_qubit_table },
    Check { id: 10, name: "counting formulas", heavy: false, run: counting },
    Check { id: 11, name: "master equation sanity", heavy: false, run: master_equation_sanity },
    Check { id: 12, name: "echo correction", heavy: false, run: echo_correction },
];

/// Criteria whose failure is a recorded reproduction gap.
const KNOWN_GAPS: &[usize] = &[4, 9];

pub fn check_ids(include_heavy: bool) -> Vec<usize> {
    CHECKS.iter().filter(|c| include_heavy || !c.heavy).map(|c| c.id).collect()
}

pub fn check_name(id: usize) -> Option<&'static str> {
    CHECKS.iter().find(|c| c.id == id).map(|c| c.name)
}

pub fn run_check(id: usize, ctx: &CheckContext) -> Option<CheckOutcome> {
    let c = CHECKS.iter().find(|c| c.id == id)?;
    let t = Instant::now();
    let (passed, detail) = (c.run)(ctx);
    Some(CheckOutcome {
        id,
        name: c.name,
        passed,
        detail,
        known_gap: !passed && KNOWN_GAPS.contains(&id),
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn err(e: impl fmt::Display) -> (bool, String) {
    (false, format!("error: {e}"))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return err(e),
        }
    };
}

/// Smallest cutoff that passes the dynamics guard for `s`.
pub fn minimal_cutoff(s: &ProtocolSchedule) -> usize {
    let r = s.max_excursion();
    (CUTOFF_GUARD * r * r).ceil() as usize + 1
}

fn basis(n: usize, bits: usize) -> Vec<C64> {
    let mut v = vec![ZERO; 1 << n];
    v[bits] = ONE;
    v
}

fn uniform(n: usize) -> Vec<C64> {
    vec![C64::new((0.5f64).powi(n as i32).sqrt(), 0.0); 1 << n]
}

fn vacuum_with(layout: SpaceLayout, q: &[C64]) -> Result<QuantumState, crate::hilbert::HilbertError> {
    QuantumState::vacuum_with_qubits(layout, Array1::from(q.to_vec()).view())
}

fn quiet() -> DynamicsOptions {
    DynamicsOptions { snapshots: false, ..DynamicsOptions::default() }
}

// 1 ---------------------------------------------------------------------------

fn dispersive_identity(ctx: &CheckContext) -> (bool, String) {
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let delta = rng.gen_range(0.5..3.0) * 2.0 * PI * 1e9 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let g = rng.gen_range(0.0..0.2) * delta.abs();
        let beta = rng.gen_range(0.1..0.4) * 2.0 * PI * 1e9;
        let c = tri!((ctx.dispersive)(g, delta, beta));
        let lhs = 4.0 * c.chi_rr * c.chi_qq;
        let rhs = c.chi_qr * c.chi_qr;
        let defect = if rhs == 0.0 { lhs.abs() } else { ((lhs - rhs) / rhs).abs() };
        worst = worst.max(defect);
    }
    (worst < 1e-12, format!("max relative defect {worst:.2e} over 1000 draws"))
}

// 2 ---------------------------------------------------------------------------

/// Two-transmon circuit whose dispersive parameters approximate row (c).
pub fn reference_circuit() -> Result<CouplingSpec, CircuitError> {
    let ghz = 2.0 * PI * 1e9;
    Ok(CouplingSpec {
        omega_r: 9.16 * ghz,
        qubits: vec![
            CoupledQubit { transmon: TransmonSpec::new(27.0 * ghz, 0.3 * ghz)?, g: 101.0 * MHZ },
            CoupledQubit { transmon: TransmonSpec::new(20.1 * ghz, 0.3 * ghz)?, g: 127.0 * MHZ },
        ],
    })
}

fn circuit_reproduction(_: &CheckContext) -> (bool, String) {
    let spec = tri!(reference_circuit());
    let p = tri!(numeric_chis_multi(&spec, DEFAULT_TRANSMON_LEVELS, DEFAULT_CAVITY_LEVELS));
    let got = [p.chi_qr[1], p.chi_qr[0], p.chi_rr, p.chi_qq[0], p.chi_qq[1]].map(|x| x / MHZ);
    let want = [1.499, 2.982, 9.367e-3, 296.998, 298.46];
    let worst = got.iter().zip(want).map(|(g, w)| ((g - w) / w).abs()).fold(0.0, f64::max);
    (
        worst <= 0.02,
        format!(
            "chi_q2r {:.4} chi_q1r {:.4} chi_rr {:.4e} chi_q1q1 {:.3} chi_q2q2 {:.3} MHz; worst {:.2}%",
            got[0],
            got[1],
            got[2],
            got[3],
            got[4],
            100.0 * worst
        ),
    )
}

// 3 ---------------------------------------------------------------------------

fn ideal_exactness(_: &CheckContext) -> (bool, String) {
    let mut rng = StdRng::seed_from_u64(11);
    let mut failures = Vec::new();
    let mut worst = f64::INFINITY;
    let mut runs = 0;
    for n in [2usize, 3] {
        let p = SystemParams::equal_spacing(n, 1.0 * MHZ, 300.0 * MHZ, 0.0);
        for nbar in [1.5f64, 2.0, 3.0] {
            let bound = 1.0 - 10.0 * (-4.0 * nbar).exp();
            for _ in 0..20 {
                let theta: Vec<f64> = (0..(1 << n) - 1).map(|_| rng.gen_range(-PI..PI)).collect();
                let bits = rng.gen_range(0..1usize << n);
                let angles = tri!(AngleSet::new(n, theta));
                let s = tri!(build_schedule(n, &angles, C64::new(nbar.sqrt(), 0.0), p.delta_omega, &Default::default()));
                let layout = tri!(SpaceLayout::new(minimal_cutoff(&s), n));
                let init = basis(n, bits);
                let tr = tri!(run_schedule_unitary(&tri!(vacuum_with(layout, &init)), &s, &p, &quiet()));
                let target = tri!(target_state(n, &angles, &init));
                let fr = tri!(vacuum_return_fidelity(&tr.final_state));
                let fq = tri!(qubit_target_fidelity(&tr.final_state, target.view()));
                worst = worst.min((fr - bound).min(fq - bound));
                runs += 1;
                if fr < bound || fq < bound {
                    failures.push(format!("n={n} nbar={nbar} F_r={fr:.6} F_q={fq:.6}"));
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("{runs} runs, smallest margin above bound {worst:.2e}")
    } else {
        format!("{} of {runs} below bound: {}", failures.len(), failures[0])
    };
    (failures.is_empty(), detail)
}

// 4 ---------------------------------------------------------------------------

/// `F_mn^(k)` for every register state after step `label`, zero angles.
fn kerr_fidelities(nbar: f64, eps: f64, corrected: bool) -> Result<Vec<(String, Vec<f64>)>, String> {
    let dw = 1.0 * MHZ;
    let delta_t = PI / dw;
    let chi_rr = 2.0 * eps / delta_t;
    let p = SystemParams::equal_spacing(2, dw, 300.0 * MHZ, chi_rr);
    let opts = ScheduleOptions { kerr_frame: corrected.then_some(chi_rr), ..Default::default() };
    let s = build_schedule(2, &AngleSet::zeros(2), C64::new(nbar.sqrt(), 0.0), dw, &opts).map_err(|e| e.to_string())?;
    let layout = SpaceLayout::new(minimal_cutoff(&s).max(40), 2).map_err(|e| e.to_string())?;
    let psi = vacuum_with(layout, &uniform(2)).map_err(|e| e.to_string())?;
    let tr = run_schedule_unitary(&psi, &s, &p, &DynamicsOptions::default()).map_err(|e| e.to_string())?;
    [KerrCheckpoint::Iv, KerrCheckpoint::Vi, KerrCheckpoint::X]
        .iter()
        .map(|k| {
            let st = tr.state(k.label()).ok_or_else(|| format!("no snapshot {}", k.label()))?;
            let f = (0..4).map(|b| component_vacuum_overlap(st, b)).collect::<Result<Vec<_>, _>>();
            Ok((k.label().to_string(), f.map_err(|e| e.to_string())?))
        })
        .collect()
}

/// Register states `q2 q1` that return to the vacuum after each checkpoint.
fn returning_components(k: KerrCheckpoint) -> &'static [&'static str] {
    match k {
        KerrCheckpoint::Iv => &["10", "11"],
        KerrCheckpoint::Vi => &["00", "01"],
        KerrCheckpoint::X => &["00", "01", "10", "11"],
    }
}

/// Published closed forms; they differ from [`KerrCheckpoint::coefficient`]
/// only in the cubic term of the uncorrected step (vi) value.
pub fn published_coefficient(k: KerrCheckpoint, nbar: f64, corrected: bool) -> f64 {
    match (k, corrected) {
        (KerrCheckpoint::Vi, false) => 409.0 * nbar.powi(3) + 158.0 * nbar * nbar + 9.0 * nbar,
        _ => k.coefficient(nbar, corrected),
    }
}

fn perturbative_coefficients(_: &CheckContext) -> (bool, String) {
    let eps = 2e-4;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut own: f64 = 0.0;
    for (corrected, nbars) in [(true, vec![1.5]), (false, vec![1.0, 1.5])] {
        for nbar in nbars {
            let fs = match kerr_fidelities(nbar, eps, corrected) {
                Ok(v) => v,
                Err(e) => return err(e),
            };
            for (k, (label, f)) in [KerrCheckpoint::Iv, KerrCheckpoint::Vi, KerrCheckpoint::X].iter().zip(fs) {
                let want = published_coefficient(*k, nbar, corrected);
                let derived = k.coefficient(nbar, corrected);
                for comp in returning_components(*k) {
                    let bits = parse_qubit_label(comp).unwrap_or(0);
                    let got = (1.0 - f[bits]) / (eps * eps);
                    own = own.max(((got - derived) / derived).abs());
                    let rel = ((got - want) / want).abs();
                    if rel > worst {
                        worst = rel;
                        worst_at = format!("{label} |{comp}> corrected={corrected} nbar={nbar}: {got:.2} vs {want:.2}");
                    }
                }
            }
        }
    }
    (
        worst < 0.05,
        format!(
            "eps {eps:.0e}, worst {:.2}% at {worst_at}; vs 324 nbar^3 form worst {:.2}%",
            100.0 * worst,
            100.0 * own
        ),
    )
}

// 5 ---------------------------------------------------------------------------

/// Smallest `F_mn^(x)` of the corrected, noiseless protocol.
pub fn corrected_final_overlap(chi_q2r_mhz: f64, nbar: f64) -> Result<f64, String> {
    let p = SystemParams::equal_spacing_estimated_kerr(2, chi_q2r_mhz * MHZ, 300.0 * MHZ);
    let opts = ScheduleOptions { kerr_frame: Some(p.chi_rr), ..Default::default() };
    let s = build_schedule(2, &AngleSet::zeros(2), C64::new(nbar.sqrt(), 0.0), p.delta_omega, &opts)
        .map_err(|e| e.to_string())?;
    let layout = SpaceLayout::new(minimal_cutoff(&s).max(40), 2).map_err(|e| e.to_string())?;
    let psi = vacuum_with(layout, &uniform(2)).map_err(|e| e.to_string())?;
    let tr = run_schedule_unitary(&psi, &s, &p, &quiet()).map_err(|e| e.to_string())?;
    (0..4)
        .map(|b| component_vacuum_overlap(&tr.final_state, b).map_err(|e| e.to_string()))
        .try_fold(1.0f64, |m, f| Ok(m.min(f?)))
}

fn fidelity_vs_coupling(_: &CheckContext) -> (bool, String) {
    let lo = tri!(corrected_final_overlap(1.0, 1.5));
    let hi = tri!(corrected_final_overlap(3.0, 1.5));
    let ok = (lo - 0.99).abs() <= 0.01 && (hi - 0.94).abs() <= 0.015;
    (ok, format!("F^(x) {lo:.4} at 1 MHz (0.99), {hi:.4} at 3 MHz (0.94)"))
}

// 6 ---------------------------------------------------------------------------

/// `1 − |⟨image|e^{iε n²}|α⟩|²` for the first-order Kerr image.
pub fn linear_kerr_infidelity(nbar: f64, eps: f64, cutoff: usize) -> f64 {
    let alpha = C64::new(nbar.sqrt(), 0.0);
    let exact = coherent_amplitudes(alpha, cutoff);
    let (phase, rotated) = crate::analysis::linear_kerr_image(alpha, eps);
    let image = coherent_amplitudes(rotated, cutoff);
    let mut ov = ZERO;
    for (k, (a, b)) in exact.iter().zip(image.iter()).enumerate() {
        let nk = k as f64;
        ov += b.conj() * C64::from_polar(1.0, phase) * a * C64::from_polar(1.0, eps * nk * nk);
    }
    1.0 - ov.norm_sqr()
}

fn linear_kerr_order(_: &CheckContext) -> (bool, String) {
    let pts: Vec<(f64, f64)> = (0..=8)
        .map(|i| {
            let eps = 10f64.powf(-4.0 + 0.25 * i as f64);
            (eps.ln(), linear_kerr_infidelity(3.0, eps, 80).ln())
        })
        .collect();
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let num: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let slope = num / den;
    ((slope - 2.0).abs() <= 0.1, format!("log-log slope {slope:.4} at nbar 3"))
}

// 7, 8 ------------------------------------------------------------------------

/// A lossy two- or three-qubit run specified like a simulation table row.
#[derive(Clone, Debug)]
pub struct TableRow {
    pub name: &'static str,
    pub n: usize,
    /// Slowest coupling in MHz (cyclic).
    pub chi_qr_mhz: f64,
    pub alpha: f64,
    pub tau_r_us: f64,
    pub tau_q_us: f64,
    pub tau_phi_us: f64,
    /// `q_n … q_1` label, or `"uniform"`.
    pub initial: &'static str,
    pub theta: Vec<f64>,
    pub kerr: bool,
    pub expected: (f64, f64),
}

impl TableRow {
    pub fn initial_state(&self) -> Vec<C64> {
        if self.initial == "uniform" {
            uniform(self.n)
        } else {
            basis(self.n, parse_qubit_label(self.initial).unwrap_or(0))
        }
    }

    pub fn params(&self) -> SystemParams {
        let mut p = SystemParams::equal_spacing_estimated_kerr(self.n, self.chi_qr_mhz * MHZ, 300.0 * MHZ);
        if !self.kerr {
            p.chi_rr = 0.0;
        }
        p
    }

    pub fn schedule(&self) -> Result<ProtocolSchedule, String> {
        let p = self.params();
        let opts = ScheduleOptions { kerr_frame: (p.chi_rr > 0.0).then_some(p.chi_rr), ..Default::default() };
        let angles = AngleSet::new(self.n, self.theta.clone()).map_err(|e| e.to_string())?;
        build_schedule(self.n, &angles, C64::new(self.alpha, 0.0), p.delta_omega, &opts).map_err(|e| e.to_string())
    }

    /// Runs the row; returns `(F_r, F_q, largest trace defect over steps)`.
    pub fn simulate(&self, cutoff: usize, snapshots: bool) -> Result<(f64, f64, f64, StepTrace), String> {
        let p = self.params();
        let s = self.schedule()?;
        let layout = SpaceLayout::new(cutoff, self.n).map_err(|e| e.to_string())?;
        let init = self.initial_state();
        let psi = vacuum_with(layout, &init).map_err(|e| e.to_string())?;
        let noise = NoiseConfig::new(self.tau_r_us * US, self.tau_q_us * US, self.tau_phi_us * US)
            .map_err(|e| e.to_string())?;
        let opts = DynamicsOptions { snapshots, ..DynamicsOptions::default() };
        let tr = run_schedule_lindblad(&psi.to_density(), &s, &p, &noise, &opts).map_err(|e| e.to_string())?;
        let angles = AngleSet::new(self.n, self.theta.clone()).map_err(|e| e.to_string())?;
        let target = target_state(self.n, &angles, &init).map_err(|e| e.to_string())?;
        let fr = vacuum_return_fidelity(&tr.final_state).map_err(|e| e.to_string())?;
        let fq = qubit_target_fidelity(&tr.final_state, target.view()).map_err(|e| e.to_string())?;
        let defect = tr
            .records
            .iter()
            .filter_map(|r| r.state.as_ref())
            .chain(std::iter::once(&tr.final_state))
            .map(|st| (state_trace(st) - 1.0).abs())
            .fold(0.0, f64::max);
        Ok((fr, fq, defect, tr))
    }
}

pub fn two_qubit_rows() -> Vec<TableRow> {
    let row = |name, chi, alpha: f64, tq, tphi, initial, theta: [f64; 3], expected| TableRow {
        name,
        n: 2,
        chi_qr_mhz: chi,
        alpha,
        tau_r_us: 100.0,
        tau_q_us: tq,
        tau_phi_us: tphi,
        initial,
        theta: theta.to_vec(),
        kerr: true,
        expected,
    };
    let s3 = 3f64.sqrt();
    vec![
        row("c", 3.0, 2f64.sqrt(), 20.0, 30.0, "00", [PI / 2.0, PI, PI], (0.907, 0.916)),
        row("d", 1.5, s3, 100.0, 100.0, "00", [PI / 2.0, PI / 6.0, PI / 3.0], (0.938, 0.953)),
        row("e", 1.5, s3, 100.0, 100.0, "00", [0.0, 0.0, 0.0], (0.943, 1.000)),
        row("f", 1.5, s3, 100.0, 100.0, "00", [PI / 12.0, PI / 4.0, PI], (0.955, 0.953)),
        row("g", 1.5, s3, 100.0, 100.0, "01", [PI / 4.0, PI, PI / 6.0], (0.943, 0.959)),
    ]
}

pub fn caption_row() -> TableRow {
    TableRow {
        name: "caption",
        n: 2,
        chi_qr_mhz: 1.5,
        alpha: 3f64.sqrt(),
        tau_r_us: 100.0,
        tau_q_us: 100.0,
        tau_phi_us: 100.0,
        initial: "00",
        theta: vec![PI / 2.0, PI, PI],
        kerr: true,
        expected: (0.95, 0.93),
    }
}

fn compare_rows(rows: &[TableRow], tol: f64, cutoff_for: impl Fn(&TableRow) -> usize) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in rows {
        let (fr, fq, _, _) = match r.simulate(cutoff_for(r), false) {
            Ok(v) => v,
            Err(e) => return err(format!("row {}: {e}", r.name)),
        };
        let good = (fr - r.expected.0).abs() <= tol && (fq - r.expected.1).abs() <= tol;
        ok &= good;
        parts.push(format!(
            "{}{} ({fr:.3}, {fq:.3}) vs ({:.3}, {:.3})",
            r.name,
            if good { "" } else { "!" },
            r.expected.0,
            r.expected.1
        ));
    }
    (ok, parts.join("; "))
}

fn row_cutoff(r: &TableRow) -> usize {
    r.schedule().map(|s| minimal_cutoff(&s)).unwrap_or(1).max(30)
}

fn two_qubit_table(_: &CheckContext) -> (bool, String) {
    compare_rows(&two_qubit_rows(), 0.02, row_cutoff)
}

fn caption_run(_: &CheckContext) -> (bool, String) {
    compare_rows(&[caption_row()], 0.02, row_cutoff)
}

// 9 ---------------------------------------------------------------------------

pub fn three_qubit_rows() -> Vec<TableRow> {
    let row = |name, chi, theta: [f64; 7], kerr, expected| TableRow {
        name,
        n: 3,
        chi_qr_mhz: chi,
        alpha: 1.0,
        tau_r_us: 100.0,
        tau_q_us: 100.0,
        tau_phi_us: 100.0,
        initial: "000",
        theta: theta.to_vec(),
        kerr,
        expected,
    };
    let s11 = [PI / 12.0, 0.0, PI / 3.0, 0.0, 0.0, PI / 2.0, PI];
    vec![
        row("s3", 0.4, [0.0; 7], true, (0.832, 1.000)),
        row("s11", 0.3, s11, true, (0.804, 0.639)),
        row("s12", 0.3, s11, false, (0.953, 0.748)),
    ]
}

pub const THREE_QUBIT_CUTOFF: usize = 60;
pub const THREE_QUBIT_REFERENCE_CUTOFF: usize = 50;

fn three_qubit_table(_: &CheckContext) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in three_qubit_rows() {
        let (fr, fq, _, _) = match r.simulate(THREE_QUBIT_CUTOFF, false) {
            Ok(v) => v,
            Err(e) => return err(format!("row {}: {e}", r.name)),
        };
        let (fr0, fq0, _, _) = match r.simulate(THREE_QUBIT_REFERENCE_CUTOFF, false) {
            Ok(v) => v,
            Err(e) => return err(format!("row {}: {e}", r.name)),
        };
        let drift = (fr - fr0).abs().max((fq - fq0).abs());
        let good = (fr - r.expected.0).abs() <= 0.03 && (fq - r.expected.1).abs() <= 0.03 && drift < 1e-3;
        ok &= good;
        parts.push(format!(
            "{}{} ({fr:.3}, {fq:.3}) vs ({:.3}, {:.3}), cutoff drift {drift:.1e}",
            r.name,
            if good { "" } else { "!" },
            r.expected.0,
            r.expected.1
        ));
    }
    (ok, parts.join("; "))
}

// 10 --------------------------------------------------------------------------

fn counting(_: &CheckContext) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for n in 3..=6usize {
        let angles = AngleSet::zeros(n);
        let opts = ScheduleOptions { max_qubits: n.max(6), ..Default::default() };
        let s = tri!(build_schedule(n, &angles, ONE, 1.0 * MHZ, &opts));
        let st = schedule_stats(&s);
        let want = ((1usize << (n + 1)) - 4, (1usize << n) - 1, (3 * (1i64 << n) - 11) as f64);
        let good = st.displacements == want.0
            && st.unitaries == want.1
            && (st.total_time_in_dt - want.2).abs() < 1e-9
            && counting_formulas(n) == want;
        ok &= good;
        parts.push(format!("n={n}: {} {} {}", st.displacements, st.unitaries, st.total_time_in_dt.round()));
    }
    (ok, parts.join("; "))
}

// 11 --------------------------------------------------------------------------

fn single_step_schedule(events: Vec<PulseEvent>, n: usize, dw: f64) -> ProtocolSchedule {
    let steps = vec![ProtocolStep { label: "i".into(), start: 0, end: events.len() }];
    ProtocolSchedule { events, steps, n_qubits: n, alpha: ONE, delta_omega: dw, options: Default::default() }
}

fn master_equation_sanity(_: &CheckContext) -> (bool, String) {
    let dw = 1.0 * MHZ;
    let p = SystemParams::equal_spacing(1, dw, 300.0 * MHZ, 0.0);
    let (tau, nbar, t) = (5.0 * US, 2.0f64, 3.0 * US);
    let s = single_step_schedule(
        vec![PulseEvent::Displace { alpha: C64::new(nbar.sqrt(), 0.0) }, PulseEvent::Wait { duration: t, frame_angle: 0.0 }],
        1,
        dw,
    );
    let layout = tri!(SpaceLayout::new(40, 1));
    let noise = tri!(NoiseConfig::new(tau, f64::INFINITY, f64::INFINITY));
    let tr = tri!(run_schedule_lindblad(&QuantumState::basis(layout, 0, 0), &s, &p, &noise, &quiet()));
    let want = nbar * (-t / tau).exp();
    let decay = ((tr.final_state.mean_photon_number() - want) / want).abs();

    let p2 = SystemParams::equal_spacing_estimated_kerr(2, 1.5 * MHZ, 300.0 * MHZ);
    let s2 = tri!(build_schedule(2, &AngleSet::zeros(2), C64::new(1.0, 0.0), p2.delta_omega, &Default::default()));
    let layout2 = tri!(SpaceLayout::new(minimal_cutoff(&s2).max(20), 2));
    let psi = tri!(vacuum_with(layout2, &uniform(2)));
    let dephase = tri!(NoiseConfig::new(f64::INFINITY, f64::INFINITY, 2.0 * US));
    let a = tri!(run_schedule_lindblad(&psi.to_density(), &s2, &p2, &dephase, &quiet()));
    let b = tri!(run_schedule_lindblad(&psi.to_density(), &s2, &p2, &NoiseConfig::off(), &quiet()));
    let (pa, pb) = (a.final_state.populations(), b.final_state.populations());
    let pop_drift = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    let mut trace_defect: f64 = 0.0;
    for r in two_qubit_rows().iter().take(2) {
        match r.simulate(row_cutoff(r), true) {
            Ok((_, _, d, _)) => trace_defect = trace_defect.max(d),
            Err(e) => return err(e),
        }
    }
    let ok = decay < 1e-6 && pop_drift < 1e-10 && trace_defect < 1e-7;
    (ok, format!("decay law {decay:.1e}, dephasing population drift {pop_drift:.1e}, trace defect {trace_defect:.1e}"))
}

// 12 --------------------------------------------------------------------------

/// Final `(F_r, F_q)` of a noiseless two-qubit run with coupling mismatch `delta`.
pub fn mismatch_run(delta: f64, echo: bool, nbar: f64) -> Result<(f64, f64), String> {
    let p = SystemParams::equal_spacing(2, 1.5 * MHZ, 300.0 * MHZ, 0.0);
    let angles = AngleSet::new(2, vec![PI / 2.0, PI, PI / 3.0]).map_err(|e| e.to_string())?;
    let opts = ScheduleOptions { echo_delta: if echo { delta } else { 0.0 }, ..Default::default() };
    let s = build_schedule(2, &angles, C64::new(nbar.sqrt(), 0.0), p.delta_omega, &opts).map_err(|e| e.to_string())?;
    let cutoff = minimal_cutoff(&s).max(minimal_cutoff(&build_schedule(
        2,
        &angles,
        C64::new(nbar.sqrt(), 0.0),
        p.delta_omega,
        &Default::default(),
    )
    .map_err(|e| e.to_string())?));
    let layout = SpaceLayout::new(cutoff + 10, 2).map_err(|e| e.to_string())?;
    let init = basis(2, 0);
    let psi = vacuum_with(layout, &init).map_err(|e| e.to_string())?;
    let dyn_opts = DynamicsOptions { delta_mismatch: delta, ..quiet() };
    let tr = run_schedule_unitary(&psi, &s, &p, &dyn_opts).map_err(|e| e.to_string())?;
    let target = target_state(2, &angles, &init).map_err(|e| e.to_string())?;
    Ok((
        vacuum_return_fidelity(&tr.final_state).map_err(|e| e.to_string())?,
        qubit_target_fidelity(&tr.final_state, target.view()).map_err(|e| e.to_string())?,
    ))
}

fn echo_correction(_: &CheckContext) -> (bool, String) {
    let nbar = 3.0;
    let base = tri!(mismatch_run(0.0, false, nbar));
    let echo = tri!(mismatch_run(0.02, true, nbar));
    let bare = tri!(mismatch_run(0.02, false, nbar));
    let match_err = (echo.0 - base.0).abs().max((echo.1 - base.1).abs());
    let loss = (base.0 - bare.0).max(base.1 - bare.1);
    (
        match_err < 1e-6 && loss >= 1e-3,
        format!("nbar {nbar}: echo vs matched {match_err:.1e}, no echo loses {loss:.2e}"),
    )
}

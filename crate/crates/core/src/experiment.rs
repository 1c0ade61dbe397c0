//! Runs one configured experiment and flattens it into a CSV row.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::analysis::{reduced_cavity_state, reduced_qubit_matrix, wigner, AnalysisError, FidelityRecord, WignerField};
use crate::config::{ExperimentConfig, FrameChoice, ParamSource, RunMode, SnapshotSteps};
use crate::dynamics::{run_schedule_lindblad, run_schedule_unitary, DynamicsError, DynamicsOptions, StepTrace};
use crate::hilbert::{qubit_label, HilbertError, QuantumState, SpaceLayout, C64};
use crate::protocol::{
    build_schedule, target_state, AngleSet, FrameReference, ProtocolError, ProtocolSchedule, ScheduleOptions,
};

#[derive(Error, Debug)]
pub enum ExperimentError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Schedule exactly as the config asks for it.
pub fn schedule_for(cfg: &ExperimentConfig) -> Result<ProtocolSchedule, ProtocolError> {
    let pc = &cfg.protocol;
    let angles = AngleSet::new(pc.n, pc.angles.clone())?;
    let chi_rr = cfg.system.chi_rr;
    let opts = ScheduleOptions {
        kerr_frame: (pc.kerr_correction && cfg.simulation.include_kerr && chi_rr > 0.0).then_some(chi_rr),
        echo_delta: if pc.echo { cfg.coupling_mismatch } else { 0.0 },
        frame_reference: match pc.frame {
            FrameChoice::Largest => FrameReference::AllComponents,
            FrameChoice::Populated => FrameReference::Populated(pc.initial.clone()),
        },
        cross_kerr_phase: pc.cross_kerr_phase,
        ..ScheduleOptions::default()
    };
    build_schedule(pc.n, &angles, pc.alpha, cfg.system.delta_omega, &opts)
}

pub fn dynamics_options(cfg: &ExperimentConfig) -> DynamicsOptions {
    let sim = &cfg.simulation;
    DynamicsOptions {
        include_kerr: sim.include_kerr,
        delta_mismatch: cfg.coupling_mismatch,
        qubit_cross_kerr: cfg.qubit_cross_kerr,
        drive: sim.drive,
        rtol: sim.rtol,
        atol: sim.atol,
        ..DynamicsOptions::default()
    }
}

pub fn uses_master_equation(cfg: &ExperimentConfig) -> bool {
    match cfg.simulation.mode {
        RunMode::Auto => !cfg.noise.is_off(),
        RunMode::Lindblad => true,
        RunMode::Unitary => false,
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub schedule: ProtocolSchedule,
    pub trace: StepTrace,
    pub target: Array1<C64>,
    /// One record per protocol step, in order.
    pub steps: Vec<FidelityRecord>,
    pub f_r: f64,
    pub f_q: f64,
    pub wall_seconds: f64,
}

impl ExperimentOutcome {
    /// Step labels selected for snapshot files.
    pub fn snapshot_labels(&self, which: &SnapshotSteps) -> Vec<String> {
        let all = self.steps.iter().map(|r| r.step.clone());
        match which {
            SnapshotSteps::All => all.collect(),
            SnapshotSteps::Final => all.last().into_iter().collect(),
            SnapshotSteps::Labels(ls) => all.filter(|l| ls.contains(l)).collect(),
        }
    }

    pub fn qubit_matrix(&self, label: &str) -> Result<Array2<C64>, ExperimentError> {
        let st = self.trace.state(label).ok_or_else(|| AnalysisError::StepMissing(label.to_string()))?;
        Ok(reduced_qubit_matrix(st)?)
    }

    pub fn wigner_at(&self, label: &str, cfg: &ExperimentConfig) -> Result<Option<WignerField>, ExperimentError> {
        let Some(grid) = cfg.simulation.wigner else {
            return Ok(None);
        };
        let st = self.trace.state(label).ok_or_else(|| AnalysisError::StepMissing(label.to_string()))?;
        Ok(Some(wigner(&reduced_cavity_state(st)?, &grid)?))
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let start = Instant::now();
    let schedule = schedule_for(cfg)?;
    let pc = &cfg.protocol;
    let layout = SpaceLayout::new(cfg.simulation.cutoff, pc.n)?;
    let ket = QuantumState::vacuum_with_qubits(layout, Array1::from(pc.initial.clone()).view())?;
    let opts = dynamics_options(cfg);
    let trace = if uses_master_equation(cfg) {
        run_schedule_lindblad(&ket.to_density(), &schedule, &cfg.system, &cfg.noise, &opts)?
    } else {
        run_schedule_unitary(&ket, &schedule, &cfg.system, &opts)?
    };
    let angles = AngleSet::new(pc.n, pc.angles.clone())?;
    let target = target_state(pc.n, &angles, &pc.initial)?;
    let nbar = cfg.nbar();
    let eps = cfg.system.chi_rr * schedule.delta_t() / 2.0;
    let mut steps = Vec::with_capacity(trace.records.len());
    for r in &trace.records {
        if let Some(st) = &r.state {
            steps.push(FidelityRecord::from_state(&r.label, st, target.view(), nbar, eps)?);
        }
    }
    let last = FidelityRecord::from_state("final", &trace.final_state, target.view(), nbar, eps)?;
    Ok(ExperimentOutcome {
        schedule,
        f_r: last.f_r,
        f_q: last.f_q,
        trace,
        target,
        steps,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn mhz(x: f64) -> f64 {
    x / (2.0 * std::f64::consts::PI * 1e6)
}

fn g17(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn joined(xs: impl IntoIterator<Item = f64>) -> String {
    xs.into_iter().map(g17).collect::<Vec<_>>().join(";")
}

/// Config echo as `(column, value)` pairs: enough to rerun the row.
pub fn config_echo(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let p = &cfg.system;
    let pc = &cfg.protocol;
    let sim = &cfg.simulation;
    let pi = std::f64::consts::PI;
    let mut out: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    push(
        "params",
        match &cfg.source {
            ParamSource::Direct => "direct".into(),
            ParamSource::Circuit { method, .. } => format!("circuit-{method:?}").to_lowercase(),
        },
    );
    push("chi_qr_MHz", joined(p.chi_qr.iter().map(|&c| mhz(c))));
    push("chi_qq_MHz", joined(p.chi_qq.iter().map(|&c| mhz(c))));
    push("chi_rr_MHz", g17(mhz(p.chi_rr)));
    push("delta_omega_MHz", g17(mhz(p.delta_omega)));
    push("chi_q1q2_MHz", g17(mhz(cfg.qubit_cross_kerr)));
    push("coupling_mismatch", g17(cfg.coupling_mismatch));
    push("n", pc.n.to_string());
    push("angles_pi", joined(pc.angles.iter().map(|a| a / pi)));
    push("alpha_re", g17(pc.alpha.re));
    push("alpha_im", g17(pc.alpha.im));
    push("nbar", g17(cfg.nbar()));
    let init = pc.initial.iter().map(|z| format!("{}{:+}i", g17(z.re), g17(z.im))).collect::<Vec<_>>();
    push("initial", format!("{}={}", pc.initial_label, init.join(";")));
    push("kerr_correction", pc.kerr_correction.to_string());
    push("frame_reference", format!("{:?}", pc.frame).to_lowercase());
    push("echo", pc.echo.to_string());
    push("cross_kerr_phase_pi", pc.cross_kerr_phase.map_or(String::new(), |x| g17(x / pi)));
    push("tau_r_us", g17(cfg.noise.tau_r * 1e6));
    push("tau_q_us", g17(cfg.noise.tau_q * 1e6));
    push("tau_phi_us", g17(cfg.noise.tau_phi * 1e6));
    push("cutoff", sim.cutoff.to_string());
    push("drive", format!("{:?}", sim.drive).to_lowercase());
    push("rtol", g17(sim.rtol));
    push("atol", g17(sim.atol));
    push("include_kerr", sim.include_kerr.to_string());
    push("mode", if uses_master_equation(cfg) { "lindblad" } else { "unitary" }.into());
    out
}

/// Header and values of one `results.csv` line.
pub fn result_row(run: usize, cfg: &ExperimentConfig, o: &ExperimentOutcome) -> (Vec<String>, Vec<String>) {
    let mut head = vec!["run".to_string(), "F_r".into(), "F_q".into()];
    let mut vals = vec![run.to_string(), g17(o.f_r), g17(o.f_q)];
    for (k, v) in config_echo(cfg) {
        head.push(k);
        vals.push(v);
    }
    let n = cfg.protocol.n;
    for r in &o.steps {
        for (bits, f) in &r.components {
            head.push(format!("F{}_{}", qubit_label(*bits, n), r.step));
            vals.push(f.map_or(String::new(), g17));
        }
    }
    head.push("wall_s".into());
    vals.push(format!("{:.3}", o.wall_seconds));
    (head, vals)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_line(fields: &[String]) -> String {
    let mut line = String::new();
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str(&csv_field(f));
    }
    line
}

/// Reduced register matrix as `row,col,re,im`.
pub fn qubit_matrix_csv(m: &Array2<C64>) -> String {
    let mut s = String::from("row,col,re,im\n");
    for ((r, c), z) in m.indexed_iter() {
        let _ = writeln!(s, "{r},{c},{},{}", g17(z.re), g17(z.im));
    }
    s
}

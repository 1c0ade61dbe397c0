//! Evolution of cavity–register states through pulse schedules.
//!
//! Everything runs in the frame rotating with the bare cavity and qubit
//! frequencies, where the dispersive Hamiltonian is diagonal. Unitary runs use
//! that directly; dissipative runs integrate the master equation with an
//! integrating-factor Runge–Kutta scheme that removes the diagonal part
//! exactly and leaves only jump terms and the conditional drive to the
//! adaptive stepper.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Zip};
use thiserror::Error;

use crate::circuit_params::SystemParams;
use crate::hilbert::{
    displacement_matrix, mode_operators, qubit_bit, HilbertError, Operator, QuantumState, SpaceLayout, StateData,
    C64, CUTOFF_GUARD, ZERO,
};
use crate::protocol::{echo_matrix, y_rotation, ProtocolError, ProtocolSchedule, PulseEvent};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("unphysical noise: {0}")]
    Physicality(String),
    #[error("integrator failed at t = {time:.6e} s: {msg}")]
    IntegratorFailure { time: f64, msg: String },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
}

/// Lifetimes in seconds; `f64::INFINITY` switches a channel off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub tau_r: f64,
    pub tau_q: f64,
    pub tau_phi: f64,
}

impl NoiseConfig {
    pub fn new(tau_r: f64, tau_q: f64, tau_phi: f64) -> Result<Self, DynamicsError> {
        let n = Self { tau_r, tau_q, tau_phi };
        n.validate()?;
        Ok(n)
    }

    pub fn off() -> Self {
        Self { tau_r: f64::INFINITY, tau_q: f64::INFINITY, tau_phi: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, t) in [("tau_r", self.tau_r), ("tau_q", self.tau_q), ("tau_phi", self.tau_phi)] {
            if t.is_nan() || t <= 0.0 {
                return Err(DynamicsError::Physicality(format!("{name} = {t} must be positive")));
            }
        }
        if self.dephasing_rate() < 0.0 {
            return Err(DynamicsError::Physicality(format!(
                "1/(2 tau_phi) - 1/(4 tau_q) = {:.3e} is negative",
                self.dephasing_rate()
            )));
        }
        Ok(())
    }

    /// Coefficient of `Σ_i (σ^z_i ρ σ^z_i − ρ)`.
    pub fn dephasing_rate(&self) -> f64 {
        0.5 / self.tau_phi - 0.25 / self.tau_q
    }

    pub fn is_off(&self) -> bool {
        self.tau_r.is_infinite() && self.tau_q.is_infinite() && self.dephasing_rate() == 0.0
    }
}

/// How a conditional rotation acts during its window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DriveModel {
    /// `|0⟩⟨0|_r ⊗ U(θ) + (1 − |0⟩⟨0|_r) ⊗ 1` at the start of the window.
    Instantaneous,
    /// `H_d = θ/(2T) |0⟩⟨0|_r ⊗ σ_y` for the whole window `T`.
    #[default]
    Continuous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsOptions {
    pub include_kerr: bool,
    /// `χ_{q_n r} → (χ_{q_{n−1} r}/2)(1 + δ)` when non-zero.
    pub delta_mismatch: f64,
    /// `−χ_{q1q2} n_{q1} n_{q2}` added to the Hamiltonian.
    pub qubit_cross_kerr: f64,
    pub drive: DriveModel,
    pub rtol: f64,
    pub atol: f64,
    /// First trial step as a fraction of `Δt`.
    pub initial_step: f64,
    pub max_steps: usize,
    /// Keep a state copy at every step boundary.
    pub snapshots: bool,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        Self {
            include_kerr: true,
            delta_mismatch: 0.0,
            qubit_cross_kerr: 0.0,
            drive: DriveModel::Continuous,
            rtol: 1e-8,
            atol: 1e-10,
            initial_step: 0.05,
            max_steps: 5_000_000,
            snapshots: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub label: String,
    pub elapsed: f64,
    pub state: Option<QuantumState>,
}

#[derive(Clone, Debug)]
pub struct StepTrace {
    pub records: Vec<StepRecord>,
    pub final_state: QuantumState,
    pub warnings: Vec<String>,
    /// Accepted integrator steps (zero for unitary runs).
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl StepTrace {
    pub fn record(&self, label: &str) -> Option<&StepRecord> {
        self.records.iter().find(|r| r.label == label)
    }

    pub fn state(&self, label: &str) -> Option<&QuantumState> {
        self.record(label).and_then(|r| r.state.as_ref())
    }
}

fn check_layout(layout: SpaceLayout, p: &SystemParams) -> Result<usize, DynamicsError> {
    let cutoff = layout.cavity_cutoff().ok_or_else(|| DynamicsError::LayoutMismatch("no cavity factor".into()))?;
    if layout.n_qubits() != p.n_qubits() {
        return Err(DynamicsError::LayoutMismatch(format!(
            "layout has {} qubits, parameters {}",
            layout.n_qubits(),
            p.n_qubits()
        )));
    }
    Ok(cutoff)
}

fn effective_chi(p: &SystemParams, delta_mismatch: f64) -> Result<Vec<f64>, DynamicsError> {
    let mut chi = p.chi_qr.clone();
    let n = chi.len();
    if delta_mismatch != 0.0 {
        if n < 2 {
            return Err(DynamicsError::LayoutMismatch("coupling mismatch needs two qubits".into()));
        }
        chi[n - 1] = chi[n - 2] / 2.0 * (1.0 + delta_mismatch);
    }
    Ok(chi)
}

/// Diagonal of `H_I + H_K (+ qubit cross-Kerr)` in the layout basis.
pub fn dispersive_energies(
    p: &SystemParams,
    layout: SpaceLayout,
    opts: &DynamicsOptions,
) -> Result<Vec<f64>, DynamicsError> {
    check_layout(layout, p)?;
    let n = layout.n_qubits();
    let chi = effective_chi(p, opts.delta_mismatch)?;
    let pair = if n >= 2 { qubit_bit(1) | qubit_bit(2) } else { usize::MAX };
    Ok((0..layout.dim())
        .map(|i| {
            let (photons, bits) = layout.split(i);
            let np = photons as f64;
            let mut h: f64 = -(1..=n).filter(|&q| bits & qubit_bit(q) != 0).map(|q| chi[q - 1]).sum::<f64>() * np;
            if opts.include_kerr {
                h -= p.chi_rr / 2.0 * np * np;
            }
            if bits & pair == pair {
                h -= opts.qubit_cross_kerr;
            }
            h
        })
        .collect())
}

/// `H_I = −Σ χ_{q_i r} a†a σ⁺_i σ⁻_i`.
pub fn interaction_hamiltonian(p: &SystemParams, layout: SpaceLayout) -> Result<Operator, DynamicsError> {
    let opts = DynamicsOptions { include_kerr: false, ..Default::default() };
    let h = dispersive_energies(p, layout, &opts)?;
    Ok(Operator::diagonal(layout, &h.iter().map(|&x| C64::new(x, 0.0)).collect::<Vec<_>>()))
}

/// `H_K = −(χ_rr/2)(a†a)²`.
pub fn kerr_hamiltonian(p: &SystemParams, layout: SpaceLayout) -> Result<Operator, DynamicsError> {
    check_layout(layout, p)?;
    let d: Vec<C64> = (0..layout.dim())
        .map(|i| {
            let np = layout.split(i).0 as f64;
            C64::new(-p.chi_rr / 2.0 * np * np, 0.0)
        })
        .collect();
    Ok(Operator::diagonal(layout, &d))
}

pub fn hamiltonian_dispersive(
    p: &SystemParams,
    layout: SpaceLayout,
    include_kerr: bool,
    delta_mismatch: f64,
) -> Result<Operator, DynamicsError> {
    let opts = DynamicsOptions { include_kerr, delta_mismatch, ..Default::default() };
    let h = dispersive_energies(p, layout, &opts)?;
    Ok(Operator::diagonal(layout, &h.iter().map(|&x| C64::new(x, 0.0)).collect::<Vec<_>>()))
}

/// `θ/(2T) |0⟩⟨0|_r ⊗ σ_y` on `qubit`.
pub fn drive_hamiltonian(layout: SpaceLayout, qubit: usize, theta: f64, window: f64) -> Result<Operator, DynamicsError> {
    let ops = mode_operators(layout)?;
    let g = theta / (2.0 * window);
    Ok(ops.vacuum_projector.matmul(&ops.sigma_y[qubit - 1])?.scale(C64::new(g, 0.0)))
}

/// Right-hand side of the master equation for a general Hamiltonian.
pub fn lindblad_rhs(rho: ArrayView2<C64>, h: &Operator, noise: &NoiseConfig) -> Result<Array2<C64>, DynamicsError> {
    let layout = h.layout();
    if rho.dim() != (layout.dim(), layout.dim()) {
        return Err(DynamicsError::LayoutMismatch(format!("rho is {:?}, operator {}", rho.dim(), layout.dim())));
    }
    let mi = C64::new(0.0, -1.0);
    let mut out = (h.mul_dense(rho) - h.dense_mul(rho)) * mi;
    let ops = mode_operators(layout)?;
    let mut dissipate = |l: &Operator, rate: f64| {
        if rate == 0.0 {
            return;
        }
        let ld = l.adjoint();
        let ldl = ld.matmul(l).expect("same layout");
        let jump = ld.dense_mul(l.mul_dense(rho).view());
        let anti = ldl.mul_dense(rho) + ldl.dense_mul(rho);
        out.scaled_add(C64::new(rate, 0.0), &jump);
        out.scaled_add(C64::new(-rate / 2.0, 0.0), &anti);
    };
    if layout.has_cavity() {
        dissipate(&ops.a, 1.0 / noise.tau_r);
    }
    for sm in &ops.sigma_minus {
        dissipate(sm, 1.0 / noise.tau_q);
    }
    let g = noise.dephasing_rate();
    if g != 0.0 {
        for sz in &ops.sigma_z {
            let t = sz.dense_mul(sz.mul_dense(rho).view());
            out.scaled_add(C64::new(g, 0.0), &t);
            out.scaled_add(C64::new(-g, 0.0), &rho);
        }
    }
    Ok(out)
}

// --- state manipulation helpers -------------------------------------------

struct DisplacementCache {
    cutoff: usize,
    entries: Vec<(C64, Array2<C64>)>,
}

impl DisplacementCache {
    fn new(cutoff: usize) -> Self {
        Self { cutoff, entries: Vec::new() }
    }

    fn get(&mut self, alpha: C64) -> &Array2<C64> {
        if let Some(k) = self.entries.iter().position(|(a, _)| *a == alpha) {
            return &self.entries[k].1;
        }
        self.entries.push((alpha, displacement_matrix(alpha, self.cutoff)));
        &self.entries.last().unwrap().1
    }
}

// (D ⊗ 1) M for a matrix whose rows follow the layout basis.
fn cavity_left(dc: &Array2<C64>, m: &Array2<C64>, q: usize) -> Array2<C64> {
    let (rows, cols) = m.dim();
    let nc = dc.nrows();
    let std = m.as_standard_layout();
    let view = std.view().into_shape_with_order((nc, q * cols)).expect("layout-compatible shape");
    dc.dot(&view).into_shape_with_order((rows, cols)).expect("same size")
}

fn adjoint(m: &Array2<C64>) -> Array2<C64> {
    let (r, c) = m.dim();
    let mut out = Array2::zeros((c, r));
    out.assign(&m.t());
    out.mapv_inplace(|z| z.conj());
    out
}

fn displace_density(dc: &Array2<C64>, rho: &Array2<C64>, q: usize) -> Array2<C64> {
    let x = cavity_left(dc, rho, q);
    adjoint(&cavity_left(dc, &adjoint(&x), q))
}

fn displace_ket(dc: &Array2<C64>, psi: &Array1<C64>, q: usize) -> Array1<C64> {
    let nc = dc.nrows();
    let m = psi.view().into_shape_with_order((nc, q)).expect("ket shape");
    dc.dot(&m).into_shape_with_order(nc * q).expect("same size")
}

// Row range of the vacuum block or the whole space.
fn row_limit(dim: usize, q: usize, vacuum_only: bool) -> usize {
    if vacuum_only {
        q
    } else {
        dim
    }
}

fn gate_ket(psi: &mut Array1<C64>, qubit: usize, u: [[C64; 2]; 2], vacuum_only: bool, q: usize) {
    let bit = qubit_bit(qubit);
    for i in 0..row_limit(psi.len(), q, vacuum_only) {
        if i & bit != 0 {
            continue;
        }
        let j = i | bit;
        let (x0, x1) = (psi[i], psi[j]);
        psi[i] = u[0][0] * x0 + u[0][1] * x1;
        psi[j] = u[1][0] * x0 + u[1][1] * x1;
    }
}

// G ρ G† for G acting as `u` on one qubit (restricted to the vacuum block if asked).
fn gate_density(rho: &mut Array2<C64>, qubit: usize, u: [[C64; 2]; 2], vacuum_only: bool, q: usize) {
    let bit = qubit_bit(qubit);
    let dim = rho.nrows();
    let lim = row_limit(dim, q, vacuum_only);
    for i in 0..lim {
        if i & bit != 0 {
            continue;
        }
        let j = i | bit;
        for c in 0..dim {
            let (x0, x1) = (rho[[i, c]], rho[[j, c]]);
            rho[[i, c]] = u[0][0] * x0 + u[0][1] * x1;
            rho[[j, c]] = u[1][0] * x0 + u[1][1] * x1;
        }
    }
    for r in 0..dim {
        for i in 0..lim {
            if i & bit != 0 {
                continue;
            }
            let j = i | bit;
            let (x0, x1) = (rho[[r, i]], rho[[r, j]]);
            rho[[r, i]] = x0 * u[0][0].conj() + x1 * u[0][1].conj();
            rho[[r, j]] = x0 * u[1][0].conj() + x1 * u[1][1].conj();
        }
    }
}

fn phase_gate_diag(layout: SpaceLayout, qubits: [usize; 2], phi: f64) -> Vec<C64> {
    let mask = qubit_bit(qubits[0]) | qubit_bit(qubits[1]);
    (0..layout.dim())
        .map(|i| if layout.split(i).1 & mask == mask { C64::from_polar(1.0, phi) } else { C64::new(1.0, 0.0) })
        .collect()
}

// exp(−i T (diag(h_vac) + H_d)) restricted to the vacuum block.
fn vacuum_block_propagator(h_vac: &[f64], qubit: usize, theta: f64, window: f64) -> Array2<C64> {
    let q = h_vac.len();
    let bit = qubit_bit(qubit);
    let g = theta / (2.0 * window);
    let mut m = DMatrix::<C64>::zeros(q, q);
    for (b, &h) in h_vac.iter().enumerate() {
        m[(b, b)] = C64::new(h, 0.0);
        if b & bit == 0 {
            // σ_y: ⟨1|σ_y|0⟩ = i
            m[(b | bit, b)] = C64::new(0.0, g);
            m[(b, b | bit)] = C64::new(0.0, -g);
        }
    }
    let eig = m.symmetric_eigen();
    let v = eig.eigenvectors;
    let ph: Vec<C64> = eig.eigenvalues.iter().map(|&l| C64::from_polar(1.0, -l * window)).collect();
    Array2::from_shape_fn((q, q), |(r, c)| (0..q).map(|k| v[(r, k)] * ph[k] * v[(c, k)].conj()).sum())
}

fn check_cutoff(s: &ProtocolSchedule, cutoff: usize) -> Result<(), DynamicsError> {
    let reach = s.max_excursion();
    if reach * reach > cutoff as f64 / CUTOFF_GUARD + 1e-9 {
        return Err(HilbertError::CutoffTooSmall { cutoff, mean_photons: reach * reach }.into());
    }
    Ok(())
}

fn push_record(
    records: &mut Vec<StepRecord>,
    warnings: &mut Vec<String>,
    label: &str,
    elapsed: f64,
    state: QuantumState,
    keep: bool,
) {
    if let Some(w) = state.truncation_warning() {
        warnings.push(format!("step {label}: {w}"));
    }
    records.push(StepRecord { label: label.to_string(), elapsed, state: keep.then_some(state) });
}

/// Exact pure-state evolution: waits are diagonal phases and conditional
/// rotations act on the vacuum block.
pub fn run_schedule_unitary(
    initial: &QuantumState,
    s: &ProtocolSchedule,
    p: &SystemParams,
    opts: &DynamicsOptions,
) -> Result<StepTrace, DynamicsError> {
    let layout = initial.layout();
    let cutoff = check_layout(layout, p)?;
    if layout.n_qubits() != s.n_qubits {
        return Err(DynamicsError::LayoutMismatch("schedule and state differ in qubit count".into()));
    }
    let mut psi = initial
        .as_ket()
        .ok_or_else(|| DynamicsError::LayoutMismatch("unitary runs need a ket".into()))?
        .clone();
    check_cutoff(s, cutoff)?;
    let q = layout.qubit_dim();
    let h = dispersive_energies(p, layout, opts)?;
    let photons: Vec<f64> = (0..layout.dim()).map(|i| layout.split(i).0 as f64).collect();
    let mut cache = DisplacementCache::new(cutoff);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut elapsed = 0.0;
    let mut pending: Option<(usize, f64, f64)> = None;

    for step in &s.steps {
        for e in s.step_events(step) {
            match *e {
                PulseEvent::Displace { alpha } => psi = displace_ket(cache.get(alpha), &psi, q),
                PulseEvent::UnconditionalRotation { qubit, theta } => gate_ket(&mut psi, qubit, y_rotation(theta), false, q),
                PulseEvent::EchoPi { qubit, axis } => gate_ket(&mut psi, qubit, echo_matrix(axis), false, q),
                PulseEvent::ControlledPhase { qubits, phi } => {
                    for (z, f) in psi.iter_mut().zip(phase_gate_diag(layout, qubits, phi)) {
                        *z *= f;
                    }
                }
                PulseEvent::ConditionalRotation { qubit, theta, window } => match opts.drive {
                    DriveModel::Instantaneous => gate_ket(&mut psi, qubit, y_rotation(theta), true, q),
                    DriveModel::Continuous => pending = Some((qubit, theta, window)),
                },
                PulseEvent::Wait { duration, frame_angle } => {
                    for i in 0..psi.len() {
                        psi[i] *= C64::from_polar(1.0, -h[i] * duration - frame_angle * photons[i]);
                    }
                    if let Some((qubit, theta, window)) = pending.take() {
                        // the drive lives on the vacuum block, where H is diagonal
                        // and the photon-number phases above are trivial
                        let u = vacuum_block_propagator(&h[..q], qubit, theta, window);
                        let block: Array1<C64> = psi.slice(s![..q]).to_owned();
                        let undo: Array1<C64> =
                            (0..q).map(|i| block[i] * C64::from_polar(1.0, h[i] * duration)).collect();
                        psi.slice_mut(s![..q]).assign(&u.dot(&undo));
                    }
                    elapsed += duration;
                }
            }
        }
        let state = QuantumState::ket_unchecked(layout, psi.clone());
        push_record(&mut records, &mut warnings, &step.label, elapsed, state, opts.snapshots);
    }
    Ok(StepTrace {
        records,
        final_state: QuantumState::ket_unchecked(layout, psi),
        warnings,
        accepted_steps: 0,
        rejected_steps: 0,
    })
}

// --- master equation --------------------------------------------------------

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

// ρ_ij ↦ exp(λ_ij τ) ρ_ij with λ_ij = x_i + x_j* − 2 γ_φ popcount(b_i ⊕ b_j).
struct Propagator {
    x: Vec<C64>,
    bits: Vec<usize>,
    dephasing: f64,
    n_qubits: usize,
}

impl Propagator {
    fn factors(&self, tau: f64) -> (Vec<C64>, Vec<f64>) {
        let u = self.x.iter().map(|x| (x * tau).exp()).collect();
        let d = (0..=self.n_qubits).map(|k| (-2.0 * self.dephasing * tau * k as f64).exp()).collect();
        (u, d)
    }

    fn apply(&self, tau: f64, m: &mut Array2<C64>) {
        if tau == 0.0 {
            return;
        }
        let (u, d) = self.factors(tau);
        let bits = &self.bits;
        Zip::indexed(m).for_each(|(i, j), z| {
            *z *= u[i] * u[j].conj() * d[(bits[i] ^ bits[j]).count_ones() as usize];
        });
    }
}

// Jump terms plus the conditional drive.
struct JumpTerms {
    q: usize,
    dim: usize,
    sqrt_n: Vec<f64>,
    rate_r: f64,
    rate_q: f64,
    n_qubits: usize,
    drive: Option<(usize, f64)>,
}

impl JumpTerms {
    fn is_zero(&self) -> bool {
        self.rate_r == 0.0 && self.rate_q == 0.0 && self.drive.is_none()
    }

    fn eval(&self, rho: &Array2<C64>, out: &mut Array2<C64>) {
        out.fill(ZERO);
        let (q, dim) = (self.q, self.dim);
        if self.rate_r != 0.0 {
            let src = rho.slice(s![q.., q..]);
            let sq = &self.sqrt_n;
            let r = self.rate_r;
            Zip::indexed(out.slice_mut(s![..dim - q, ..dim - q])).and(&src).for_each(|(i, j), o, &x| {
                *o = x * (r * sq[i] * sq[j]);
            });
        }
        if self.rate_q != 0.0 {
            for qubit in 1..=self.n_qubits {
                let bit = qubit_bit(qubit);
                for i in (0..dim).filter(|i| i & bit == 0) {
                    for j in (0..dim).filter(|j| j & bit == 0) {
                        out[[i, j]] += rho[[i | bit, j | bit]] * self.rate_q;
                    }
                }
            }
        }
        if let Some((qubit, g)) = self.drive {
            let bit = qubit_bit(qubit);
            // −i (H_d ρ − ρ H_d) with H_d = g P_0 ⊗ σ_y
            for i in 0..q {
                let k = i ^ bit;
                let coef = if i & bit != 0 { C64::new(0.0, g) } else { C64::new(0.0, -g) };
                let f = C64::new(0.0, -1.0) * coef;
                for c in 0..dim {
                    out[[i, c]] += f * rho[[k, c]];
                }
            }
            for j in 0..q {
                let k = j ^ bit;
                let coef = if j & bit != 0 { C64::new(0.0, -g) } else { C64::new(0.0, g) };
                let f = C64::new(0.0, 1.0) * coef;
                for r in 0..dim {
                    out[[r, j]] += f * rho[[r, k]];
                }
            }
        }
    }
}

struct Integrator {
    prop: Propagator,
    rtol: f64,
    atol: f64,
    max_steps: usize,
    h_hint: f64,
    accepted: usize,
    rejected: usize,
}

impl Integrator {
    fn evolve(&mut self, rho: &mut Array2<C64>, jumps: &JumpTerms, span: f64, t0: f64) -> Result<(), DynamicsError> {
        if jumps.is_zero() {
            self.prop.apply(span, rho);
            return Ok(());
        }
        let dim = rho.nrows();
        let mut k: Vec<Array2<C64>> = (0..7).map(|_| Array2::zeros((dim, dim))).collect();
        let mut f: Vec<Array2<C64>> = (0..7).map(|_| Array2::zeros((dim, dim))).collect();
        let mut stage = Array2::<C64>::zeros((dim, dim));
        jumps.eval(rho, &mut k[0]);
        let mut t = 0.0;
        let mut h = self.h_hint.min(span);
        let mut steps = 0usize;
        while t < span * (1.0 - 1e-14) {
            if span - t < h * 1.01 {
                h = span - t;
            }
            steps += 1;
            if steps > self.max_steps {
                return Err(DynamicsError::IntegratorFailure { time: t0 + t, msg: "step budget exhausted".into() });
            }
            f[0].assign(&k[0]);
            for st in 1..7 {
                stage.assign(rho);
                for j in 0..st {
                    if A[st][j] != 0.0 {
                        stage.scaled_add(C64::new(h * A[st][j], 0.0), &f[j]);
                    }
                }
                if st == 6 {
                    break;
                }
                self.prop.apply(C[st] * h, &mut stage);
                let (head, tail) = k.split_at_mut(st);
                let _ = head;
                jumps.eval(&stage, &mut tail[0]);
                f[st].assign(&tail[0]);
                self.prop.apply(-C[st] * h, &mut f[st]);
            }
            // stage now holds v(h) in the frame of t
            let mut err_sq = 0.0;
            {
                let mut errm = Array2::<C64>::zeros((dim, dim));
                for j in 0..6 {
                    if E[j] != 0.0 {
                        errm.scaled_add(C64::new(h * E[j], 0.0), &f[j]);
                    }
                }
                let mut next = stage.clone();
                self.prop.apply(h, &mut next);
                let mut k7 = Array2::<C64>::zeros((dim, dim));
                jumps.eval(&next, &mut k7);
                let mut f7 = k7.clone();
                self.prop.apply(-h, &mut f7);
                errm.scaled_add(C64::new(h * E[6], 0.0), &f7);
                Zip::from(&errm).and(&*rho).and(&stage).for_each(|e, a, b| {
                    let sc = self.atol + self.rtol * a.norm().max(b.norm());
                    err_sq += (e.norm() / sc).powi(2);
                });
                let err = (err_sq / (dim * dim) as f64).sqrt();
                if !err.is_finite() {
                    return Err(DynamicsError::IntegratorFailure { time: t0 + t, msg: "non-finite error estimate".into() });
                }
                if err <= 1.0 {
                    *rho = next;
                    k[0] = k7;
                    t += h;
                    self.accepted += 1;
                    let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                    if span - t > 0.0 {
                        h *= fac;
                        self.h_hint = h;
                    }
                } else {
                    self.rejected += 1;
                    h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                }
            }
            if h < span * 1e-14 {
                return Err(DynamicsError::IntegratorFailure { time: t0 + t, msg: "step size underflow".into() });
            }
        }
        Ok(())
    }
}

/// Density-matrix evolution under the dispersive master equation.
pub fn run_schedule_lindblad(
    initial: &QuantumState,
    s: &ProtocolSchedule,
    p: &SystemParams,
    noise: &NoiseConfig,
    opts: &DynamicsOptions,
) -> Result<StepTrace, DynamicsError> {
    noise.validate()?;
    let layout = initial.layout();
    let cutoff = check_layout(layout, p)?;
    if layout.n_qubits() != s.n_qubits {
        return Err(DynamicsError::LayoutMismatch("schedule and state differ in qubit count".into()));
    }
    check_cutoff(s, cutoff)?;
    let dim = layout.dim();
    let q = layout.qubit_dim();
    let n = layout.n_qubits();
    let h = dispersive_energies(p, layout, opts)?;
    let photons: Vec<f64> = (0..dim).map(|i| layout.split(i).0 as f64).collect();
    let bits: Vec<usize> = (0..dim).map(|i| layout.split(i).1).collect();
    let rate_r = 1.0 / noise.tau_r;
    let rate_q = 1.0 / noise.tau_q;
    let x: Vec<C64> = (0..dim)
        .map(|i| {
            let excited = bits[i].count_ones() as f64;
            C64::new(-photons[i] * rate_r / 2.0 - excited * rate_q / 2.0, -h[i])
        })
        .collect();
    let mut integ = Integrator {
        prop: Propagator { x, bits: bits.clone(), dephasing: noise.dephasing_rate(), n_qubits: n },
        rtol: opts.rtol,
        atol: opts.atol,
        max_steps: opts.max_steps,
        h_hint: opts.initial_step * s.delta_t(),
        accepted: 0,
        rejected: 0,
    };
    let sqrt_n: Vec<f64> = photons.iter().take(dim - q).map(|n| (n + 1.0).sqrt()).collect();
    let mut jumps = JumpTerms { q, dim, sqrt_n, rate_r, rate_q, n_qubits: n, drive: None };

    let mut rho = initial.to_density_matrix();
    let mut cache = DisplacementCache::new(cutoff);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut elapsed = 0.0;
    for step in &s.steps {
        for e in s.step_events(step) {
            match *e {
                PulseEvent::Displace { alpha } => rho = displace_density(cache.get(alpha), &rho, q),
                PulseEvent::UnconditionalRotation { qubit, theta } => {
                    gate_density(&mut rho, qubit, y_rotation(theta), false, q)
                }
                PulseEvent::EchoPi { qubit, axis } => gate_density(&mut rho, qubit, echo_matrix(axis), false, q),
                PulseEvent::ControlledPhase { qubits, phi } => {
                    let f = phase_gate_diag(layout, qubits, phi);
                    Zip::indexed(&mut rho).for_each(|(i, j), z| *z *= f[i] * f[j].conj());
                }
                PulseEvent::ConditionalRotation { qubit, theta, window } => match opts.drive {
                    DriveModel::Instantaneous => gate_density(&mut rho, qubit, y_rotation(theta), true, q),
                    DriveModel::Continuous => jumps.drive = Some((qubit, theta / (2.0 * window))),
                },
                PulseEvent::Wait { duration, frame_angle } => {
                    integ.evolve(&mut rho, &jumps, duration, elapsed)?;
                    jumps.drive = None;
                    if frame_angle != 0.0 {
                        Zip::indexed(&mut rho).for_each(|(i, j), z| {
                            *z *= C64::from_polar(1.0, -frame_angle * (photons[i] - photons[j]));
                        });
                    }
                    elapsed += duration;
                }
            }
        }
        let state = QuantumState::density_unchecked(layout, rho.clone());
        push_record(&mut records, &mut warnings, &step.label, elapsed, state, opts.snapshots);
    }
    let tr: f64 = (0..dim).map(|i| rho[[i, i]].re).sum();
    if (tr - 1.0).abs() > 1e-7 {
        warnings.push(format!("trace drifted to {tr:.12}"));
    }
    Ok(StepTrace {
        records,
        final_state: QuantumState::density_unchecked(layout, rho),
        warnings,
        accepted_steps: integ.accepted,
        rejected_steps: integ.rejected,
    })
}

/// Sideband period `π/Δω` for a parameter set, for callers that build custom schedules.
pub fn sideband_period(p: &SystemParams) -> f64 {
    PI / p.delta_omega
}

/// Trace distance `½‖ρ − σ‖₁` between two states of the same layout.
pub fn trace_distance(a: &QuantumState, b: &QuantumState) -> Result<f64, DynamicsError> {
    if a.layout() != b.layout() {
        return Err(DynamicsError::LayoutMismatch("states live on different layouts".into()));
    }
    let d = a.to_density_matrix() - b.to_density_matrix();
    let ev = crate::hilbert::hermitian_eigenvalues(d.view());
    Ok(0.5 * ev.iter().map(|x| x.abs()).sum::<f64>())
}

/// `Tr ρ` of a state regardless of representation.
pub fn state_trace(s: &QuantumState) -> f64 {
    match s.data() {
        StateData::Ket(v) => v.iter().map(|z| z.norm_sqr()).sum(),
        StateData::Density(r) => (0..r.nrows()).map(|i| r[[i, i]].re).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{coherent_state, Factor, partial_trace, ONE};
    use crate::protocol::{build_schedule, target_state, AngleSet, ProtocolStep, ScheduleOptions};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand::rngs::StdRng;

    fn params2(chi_rr: f64) -> SystemParams {
        SystemParams::equal_spacing(2, 2.0 * PI * 1.5e6, 2.0 * PI * 300e6, chi_rr)
    }

    fn custom(events: Vec<PulseEvent>, n: usize, dw: f64) -> ProtocolSchedule {
        let steps = (0..events.len()).map(|i| ProtocolStep { label: format!("{}", i + 1), start: i, end: i + 1 }).collect();
        ProtocolSchedule { events, steps, n_qubits: n, alpha: ONE, delta_omega: dw, options: Default::default() }
    }

    fn random_density(dim: usize, rng: &mut StdRng) -> Array2<C64> {
        let m = Array2::from_shape_fn((dim, dim), |_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let r = m.dot(&adjoint(&m));
        let tr: C64 = (0..dim).map(|i| r[[i, i]]).sum();
        r / tr
    }

    #[test]
    fn vacuum_is_dark_and_spectrum_matches_sidebands() {
        let p = params2(2.0 * PI * 10e3);
        let layout = SpaceLayout::new(6, 2).unwrap();
        let h = hamiltonian_dispersive(&p, layout, true, 0.0).unwrap();
        assert!(h.hermitian_defect() < 1e-12);
        for bits in 0..4 {
            assert_eq!(h.get(bits, bits), ZERO);
        }
        let dw = p.delta_omega;
        for photons in 0..=6 {
            for bits in 0..4usize {
                let (q2, q1) = ((bits >> 1) & 1, bits & 1);
                let np = photons as f64;
                let want = -((2 * q1 + q2) as f64) * dw * np - p.chi_rr * np * np / 2.0;
                let i = layout.index(photons, bits);
                assert_abs_diff_eq!(h.get(i, i).re, want, epsilon = 1e-6);
            }
        }
        let hi = interaction_hamiltonian(&p, layout).unwrap();
        let hk = kerr_hamiltonian(&p, layout).unwrap();
        let comm = hi.commutator(&hk).unwrap();
        assert!(comm.to_dense().iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn mismatch_rescales_slow_coupling() {
        let p = params2(0.0);
        let layout = SpaceLayout::new(3, 2).unwrap();
        let opts = DynamicsOptions { delta_mismatch: 0.02, ..Default::default() };
        let h = dispersive_energies(&p, layout, &opts).unwrap();
        let i = layout.index(1, 0b10);
        assert_abs_diff_eq!(h[i], -p.delta_omega * 1.02, epsilon = 1e-6);
    }

    #[test]
    fn ideal_two_qubit_run_hits_target() {
        let nbar: f64 = 3.0;
        let p = params2(0.0);
        let layout = SpaceLayout::new(40, 2).unwrap();
        let th = AngleSet::new(2, vec![0.7, 2.1, 1.3]).unwrap();
        let s = build_schedule(2, &th, C64::new(nbar.sqrt(), 0.0), p.delta_omega, &Default::default()).unwrap();
        let init = [ONE, ZERO, ZERO, ZERO];
        let psi0 = QuantumState::vacuum_with_qubits(layout, ndarray::ArrayView1::from(&init)).unwrap();
        for drive in [DriveModel::Instantaneous, DriveModel::Continuous] {
            let opts = DynamicsOptions { drive, ..Default::default() };
            let tr = run_schedule_unitary(&psi0, &s, &p, &opts).unwrap();
            let psi = tr.final_state.as_ket().unwrap();
            let tgt = target_state(2, &th, &init).unwrap();
            let vac: Vec<C64> = (0..4).map(|b| psi[b]).collect();
            let fr: f64 = vac.iter().map(|z| z.norm_sqr()).sum();
            let ov: C64 = tgt.iter().zip(&vac).map(|(t, v)| t.conj() * v).sum();
            assert!(fr >= 0.9999, "F_r = {fr}");
            assert!(ov.norm_sqr() / fr >= 0.9999);
        }
    }

    #[test]
    fn step_three_separates_by_slow_qubit() {
        let p = params2(0.0);
        let layout = SpaceLayout::new(30, 2).unwrap();
        let alpha = C64::new(1.5, 0.0);
        let s = build_schedule(2, &AngleSet::zeros(2), alpha, p.delta_omega, &Default::default()).unwrap();
        let h = 0.5;
        let init = [C64::new(h, 0.0); 4];
        let psi0 = QuantumState::vacuum_with_qubits(layout, ndarray::ArrayView1::from(&init)).unwrap();
        let tr = run_schedule_unitary(&psi0, &s, &p, &Default::default()).unwrap();
        let st = tr.state("iii").unwrap().as_ket().unwrap();
        for bits in 0..4usize {
            let comp: Vec<C64> = (0..=30).map(|n| st[layout.index(n, bits)] / h).collect();
            let sign = if bits & 0b10 == 0 { 1.0 } else { -1.0 };
            let want = crate::hilbert::coherent_amplitudes(alpha * sign, 30);
            let ov: C64 = want.iter().zip(&comp).map(|(a, b)| a.conj() * b).sum();
            assert_abs_diff_eq!(ov.norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn empty_schedule_keeps_state() {
        let p = params2(0.0);
        let layout = SpaceLayout::new(10, 2).unwrap();
        let psi0 = coherent_state(C64::new(0.5, 0.2), layout).unwrap();
        let s = custom(vec![], 2, p.delta_omega);
        let tr = run_schedule_unitary(&psi0, &s, &p, &Default::default()).unwrap();
        assert_eq!(tr.final_state, psi0);
    }

    #[test]
    fn general_rhs_cavity_decay_and_relaxation() {
        let tau = 7e-6;
        let layout = SpaceLayout::new(3, 1).unwrap();
        let h = Operator::zeros(layout);
        let one = QuantumState::basis(layout, 1, 0).to_density_matrix();
        let d = lindblad_rhs(one.view(), &h, &NoiseConfig::new(tau, f64::INFINITY, f64::INFINITY).unwrap()).unwrap();
        let mut want = Array2::<C64>::zeros((layout.dim(), layout.dim()));
        want[[0, 0]] = C64::new(1.0 / tau, 0.0);
        want[[2, 2]] = C64::new(-1.0 / tau, 0.0);
        assert!((&d - &want).iter().all(|z| z.norm() < 1e-6));

        let ex = QuantumState::basis(layout, 0, 1).to_density_matrix();
        let d = lindblad_rhs(ex.view(), &h, &NoiseConfig::new(f64::INFINITY, tau, 2.0 * tau).unwrap()).unwrap();
        let mut want = Array2::<C64>::zeros((layout.dim(), layout.dim()));
        want[[0, 0]] = C64::new(1.0 / tau, 0.0);
        want[[1, 1]] = C64::new(-1.0 / tau, 0.0);
        assert!((&d - &want).iter().all(|z| z.norm() < 1e-6));
    }

    #[test]
    fn dephasing_fixes_mixed_state_and_trace_vanishes() {
        let layout = SpaceLayout::new(2, 2).unwrap();
        let dim = layout.dim();
        let mixed = Array2::<C64>::eye(dim) / C64::new(dim as f64, 0.0);
        let noise = NoiseConfig::new(f64::INFINITY, f64::INFINITY, 20e-6).unwrap();
        let d = lindblad_rhs(mixed.view(), &Operator::zeros(layout), &noise).unwrap();
        assert!(d.iter().all(|z| z.norm() < 1e-12));

        let mut rng = StdRng::seed_from_u64(11);
        let noise = NoiseConfig::new(3e-6, 5e-6, 4e-6).unwrap();
        for _ in 0..5 {
            let rho = random_density(dim, &mut rng);
            let hm = random_density(dim, &mut rng) * C64::new(1e6, 0.0);
            let h = Operator::from_dense(layout, hm.view());
            let d = lindblad_rhs(rho.view(), &h, &noise).unwrap();
            let tr: C64 = (0..dim).map(|i| d[[i, i]]).sum();
            assert!(tr.norm() < 1e-12 * 1e6);
            assert!(crate::hilbert::hermitian_defect(d.view()) < 1e-6);
        }
    }

    #[test]
    fn noise_validation() {
        assert!(matches!(NoiseConfig::new(1e-6, 10e-6, 30e-6), Err(DynamicsError::Physicality(_))));
        assert!(NoiseConfig::new(1e-6, 10e-6, 20e-6).is_ok());
        assert!(matches!(NoiseConfig::new(-1.0, 1.0, 1.0), Err(DynamicsError::Physicality(_))));
    }

    #[test]
    fn structured_rhs_matches_general_form() {
        let p = params2(2.0 * PI * 20e3);
        let layout = SpaceLayout::new(4, 2).unwrap();
        let dim = layout.dim();
        let noise = NoiseConfig::new(3e-6, 5e-6, 4e-6).unwrap();
        let opts = DynamicsOptions::default();
        let hd = dispersive_energies(&p, layout, &opts).unwrap();
        let (qubit, theta, window) = (1usize, 1.3, 0.4e-6);
        let hdrive = drive_hamiltonian(layout, qubit, theta, window).unwrap();
        let hdiag = Operator::diagonal(layout, &hd.iter().map(|&x| C64::new(x, 0.0)).collect::<Vec<_>>());
        let h = hdiag.add(&hdrive).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let rho = random_density(dim, &mut rng);
        let want = lindblad_rhs(rho.view(), &h, &noise).unwrap();

        let q = layout.qubit_dim();
        let photons: Vec<f64> = (0..dim).map(|i| layout.split(i).0 as f64).collect();
        let bits: Vec<usize> = (0..dim).map(|i| layout.split(i).1).collect();
        let x: Vec<C64> = (0..dim)
            .map(|i| {
                C64::new(-photons[i] / noise.tau_r / 2.0 - bits[i].count_ones() as f64 / noise.tau_q / 2.0, -hd[i])
            })
            .collect();
        let jumps = JumpTerms {
            q,
            dim,
            sqrt_n: photons.iter().take(dim - q).map(|n| (n + 1.0).sqrt()).collect(),
            rate_r: 1.0 / noise.tau_r,
            rate_q: 1.0 / noise.tau_q,
            n_qubits: 2,
            drive: Some((qubit, theta / (2.0 * window))),
        };
        let mut got = Array2::zeros((dim, dim));
        jumps.eval(&rho, &mut got);
        let g = noise.dephasing_rate();
        Zip::indexed(&mut got).for_each(|(i, j), z| {
            let lam = x[i] + x[j].conj() - 2.0 * g * (bits[i] ^ bits[j]).count_ones() as f64;
            *z += lam * rho[[i, j]];
        });
        let scale = want.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!((&got - &want).iter().all(|z| z.norm() < 1e-10 * scale));
    }

    #[test]
    fn cavity_decay_law() {
        let tau = 5e-6;
        let nbar: f64 = 2.0;
        let p = SystemParams::equal_spacing(1, 2.0 * PI * 1e6, 2.0 * PI * 300e6, 0.0);
        let layout = SpaceLayout::new(40, 1).unwrap();
        let t = 3e-6;
        let s = custom(
            vec![PulseEvent::Displace { alpha: C64::new(nbar.sqrt(), 0.0) }, PulseEvent::Wait { duration: t, frame_angle: 0.0 }],
            1,
            p.delta_omega,
        );
        let psi0 = QuantumState::basis(layout, 0, 0);
        let noise = NoiseConfig::new(tau, f64::INFINITY, f64::INFINITY).unwrap();
        let tr = run_schedule_lindblad(&psi0, &s, &p, &noise, &Default::default()).unwrap();
        let got = tr.final_state.mean_photon_number();
        let want = nbar * (-t / tau).exp();
        assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn lossless_master_equation_matches_unitary_run() {
        let chi_rr = 2.0 * PI * 20e3;
        let p = params2(chi_rr);
        let layout = SpaceLayout::new(24, 2).unwrap();
        let th = AngleSet::new(2, vec![PI / 2.0, PI, PI / 3.0]).unwrap();
        let opts_s = ScheduleOptions { kerr_frame: Some(chi_rr), ..Default::default() };
        let s = build_schedule(2, &th, C64::new(1.2, 0.0), p.delta_omega, &opts_s).unwrap();
        let init = [ONE, ZERO, ZERO, ZERO];
        let psi0 = QuantumState::vacuum_with_qubits(layout, ndarray::ArrayView1::from(&init)).unwrap();
        let opts = DynamicsOptions::default();
        let u = run_schedule_unitary(&psi0, &s, &p, &opts).unwrap();
        let l = run_schedule_lindblad(&psi0, &s, &p, &NoiseConfig::off(), &opts).unwrap();
        for (a, b) in u.records.iter().zip(&l.records) {
            let d = trace_distance(a.state.as_ref().unwrap(), b.state.as_ref().unwrap()).unwrap();
            assert!(d < 1e-6, "step {}: {d}", a.label);
        }
    }

    #[test]
    fn dephasing_keeps_populations() {
        let p = params2(2.0 * PI * 10e3);
        let layout = SpaceLayout::new(12, 2).unwrap();
        let h = 0.5;
        let init = [C64::new(h, 0.0), C64::new(0.0, h), C64::new(-h, 0.0), C64::new(h, 0.0)];
        let psi0 = QuantumState::vacuum_with_qubits(layout, ndarray::ArrayView1::from(&init)).unwrap();
        let s = custom(vec![PulseEvent::Wait { duration: 2e-6, frame_angle: 0.0 }], 2, p.delta_omega);
        let noise = NoiseConfig::new(f64::INFINITY, f64::INFINITY, 1e-6).unwrap();
        let tr = run_schedule_lindblad(&psi0, &s, &p, &noise, &Default::default()).unwrap();
        let before = psi0.populations();
        let after = tr.final_state.populations();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-10);
        }
        let rq = partial_trace(&tr.final_state, &[Factor::Qubit(1), Factor::Qubit(2)]).unwrap();
        assert!(rq.to_density_matrix()[[0, 1]].norm() < 0.25 * (-2.0f64).exp() + 1e-9);
    }
}

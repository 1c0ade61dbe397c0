//! Fidelities, Kerr estimates, Wigner functions and reduced-state summaries.

use std::f64::consts::PI;
use std::io::{self, Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::StepTrace;
use crate::hilbert::{qubit_label, QuantumState, SpaceLayout, StateData, C64, ZERO};

/// Below this weight a conditional cavity state is not reported.
pub const COMPONENT_FLOOR: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum AnalysisError {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("no snapshot for step {0}")]
    StepMissing(String),
    #[error("component |{label}⟩ carries weight {weight:.3e}")]
    ZeroComponent { label: String, weight: f64 },
    #[error("grid needs at least two points per axis and a positive extent")]
    GridDegenerate,
    #[error("malformed Wigner file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn require_full(state: &QuantumState) -> Result<SpaceLayout, AnalysisError> {
    let l = state.layout();
    if !l.has_cavity() || l.n_qubits() == 0 {
        return Err(AnalysisError::LayoutMismatch(format!("needs cavity and qubits, got {l:?}")));
    }
    Ok(l)
}

/// `Tr_r ρ` as a `2^n × 2^n` matrix.
pub fn reduced_qubit_matrix(state: &QuantumState) -> Result<Array2<C64>, AnalysisError> {
    let l = require_full(state)?;
    let q = l.qubit_dim();
    let mut out = Array2::zeros((q, q));
    match state.data() {
        StateData::Ket(v) => {
            for n in 0..l.cavity_dim() {
                let blk = v.slice(ndarray::s![n * q..(n + 1) * q]);
                for a in 0..q {
                    for b in 0..q {
                        out[[a, b]] += blk[a] * blk[b].conj();
                    }
                }
            }
        }
        StateData::Density(r) => {
            for n in 0..l.cavity_dim() {
                out += &r.slice(ndarray::s![n * q..(n + 1) * q, n * q..(n + 1) * q]);
            }
        }
    }
    Ok(out)
}

/// `Tr_q ρ` as a cavity-only state.
pub fn reduced_cavity_state(state: &QuantumState) -> Result<QuantumState, AnalysisError> {
    let l = require_full(state)?;
    let (q, nc) = (l.qubit_dim(), l.cavity_dim());
    let mut out = Array2::zeros((nc, nc));
    let full = state.to_density_matrix();
    for m in 0..nc {
        for n in 0..nc {
            out[[m, n]] = (0..q).map(|b| full[[m * q + b, n * q + b]]).sum();
        }
    }
    let cl = SpaceLayout::cavity_only(nc - 1).map_err(|e| AnalysisError::LayoutMismatch(e.to_string()))?;
    Ok(QuantumState::density_unchecked(cl, out))
}

/// `⟨0|Tr_q ρ|0⟩`.
pub fn vacuum_return_fidelity(state: &QuantumState) -> Result<f64, AnalysisError> {
    let l = require_full(state)?;
    let q = l.qubit_dim();
    Ok(match state.data() {
        StateData::Ket(v) => v.iter().take(q).map(|z| z.norm_sqr()).sum(),
        StateData::Density(r) => (0..q).map(|b| r[[b, b]].re).sum(),
    })
}

/// `⟨ψ|Tr_r ρ|ψ⟩` for a register ket `ψ`.
pub fn qubit_target_fidelity(state: &QuantumState, target: ArrayView1<C64>) -> Result<f64, AnalysisError> {
    let rq = reduced_qubit_matrix(state)?;
    if target.len() != rq.nrows() {
        return Err(AnalysisError::LayoutMismatch(format!(
            "target has {} amplitudes, register {}",
            target.len(),
            rq.nrows()
        )));
    }
    let mut f = ZERO;
    for a in 0..target.len() {
        for b in 0..target.len() {
            f += target[a].conj() * rq[[a, b]] * target[b];
        }
    }
    Ok(f.re)
}

/// Element-wise `|⟨μ|Tr_r ρ|m⟩|`.
pub fn reduced_qubit_matrix_magnitudes(state: &QuantumState) -> Result<Array2<f64>, AnalysisError> {
    Ok(reduced_qubit_matrix(state)?.mapv(|z| z.norm()))
}

/// Vacuum overlap of the cavity state conditioned on register state `bits`.
pub fn component_vacuum_overlap(state: &QuantumState, bits: usize) -> Result<f64, AnalysisError> {
    let l = require_full(state)?;
    if bits >= l.qubit_dim() {
        return Err(AnalysisError::LayoutMismatch(format!("register state {bits} out of range")));
    }
    let q = l.qubit_dim();
    let (weight, vac) = match state.data() {
        StateData::Ket(v) => {
            let w: f64 = (0..l.cavity_dim()).map(|n| v[n * q + bits].norm_sqr()).sum();
            (w, v[bits].norm_sqr())
        }
        StateData::Density(r) => {
            let w: f64 = (0..l.cavity_dim()).map(|n| r[[n * q + bits, n * q + bits]].re).sum();
            (w, r[[bits, bits]].re)
        }
    };
    if weight < COMPONENT_FLOOR {
        return Err(AnalysisError::ZeroComponent { label: qubit_label(bits, l.n_qubits()), weight });
    }
    Ok(vac / weight)
}

/// `F_mn^(k)` from the snapshot taken after step `label`.
pub fn step_component_fidelity(trace: &StepTrace, label: &str, bits: usize) -> Result<f64, AnalysisError> {
    let st = trace.state(label).ok_or_else(|| AnalysisError::StepMissing(label.to_string()))?;
    component_vacuum_overlap(st, bits)
}

/// Steps of the two-qubit protocol with closed-form Kerr estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KerrCheckpoint {
    Iv,
    Vi,
    X,
}

impl KerrCheckpoint {
    pub fn label(self) -> &'static str {
        match self {
            Self::Iv => "iv",
            Self::Vi => "vi",
            Self::X => "x",
        }
    }

    /// `C(n̄)` in `1 − ε² C(n̄)`.
    pub fn coefficient(self, nbar: f64, corrected: bool) -> f64 {
        let (n1, n2, n3) = (nbar, nbar * nbar, nbar * nbar * nbar);
        match (self, corrected) {
            (Self::Iv, false) => 4.0 * n3 + 6.0 * n2 + n1,
            (Self::Vi, false) => 324.0 * n3 + 158.0 * n2 + 9.0 * n1,
            (Self::X, false) => 256.0 * n3 + 136.0 * n2 + 4.0 * n1,
            (Self::Iv, true) => 2.0 * n2,
            (Self::Vi, true) => 50.0 * n2,
            (Self::X, true) => 72.0 * n2,
        }
    }
}

pub fn perturbative_fidelity(step: KerrCheckpoint, nbar: f64, eps: f64, corrected: bool) -> f64 {
    1.0 - eps * eps * step.coefficient(nbar, corrected)
}

/// First-order image of `e^{iε(a†a)²}|α⟩`: `(−ε n̄², e^{iε(2n̄+1)} α)`.
pub fn linear_kerr_image(alpha: C64, eps: f64) -> (f64, C64) {
    let nbar = alpha.norm_sqr();
    (-eps * nbar * nbar, alpha * C64::from_polar(1.0, eps * (2.0 * nbar + 1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelityRecord {
    pub step: String,
    /// `(register state, F)`; `None` when the component is empty.
    pub components: Vec<(usize, Option<f64>)>,
    pub f_r: f64,
    pub f_q: f64,
    pub nbar: f64,
    pub eps: f64,
}

impl FidelityRecord {
    pub fn from_state(
        step: &str,
        state: &QuantumState,
        target: ArrayView1<C64>,
        nbar: f64,
        eps: f64,
    ) -> Result<Self, AnalysisError> {
        let l = require_full(state)?;
        let components = (0..l.qubit_dim())
            .map(|b| match component_vacuum_overlap(state, b) {
                Ok(f) => Ok((b, Some(f))),
                Err(AnalysisError::ZeroComponent { .. }) => Ok((b, None)),
                Err(e) => Err(e),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            step: step.to_string(),
            components,
            f_r: vacuum_return_fidelity(state)?,
            f_q: qubit_target_fidelity(state, target)?,
            nbar,
            eps,
        })
    }
}

// --- Wigner function ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WignerGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub n_p: usize,
}

impl WignerGrid {
    pub fn square(extent: f64, points: usize) -> Self {
        Self { x_min: -extent, x_max: extent, n_x: points, p_min: -extent, p_max: extent, n_p: points }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.n_x < 2 || self.n_p < 2 || !(self.x_max > self.x_min) || !(self.p_max > self.p_min) {
            return Err(AnalysisError::GridDegenerate);
        }
        Ok(())
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (self.x_max - self.x_min) * i as f64 / (self.n_x - 1) as f64
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p_min + (self.p_max - self.p_min) * j as f64 / (self.n_p - 1) as f64
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn dp(&self) -> f64 {
        (self.p_max - self.p_min) / (self.n_p - 1) as f64
    }
}

/// `W(x, p)` with `β = (x + ip)/√2`; `values[[i, j]]` sits at `(x_i, p_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WignerField {
    pub grid: WignerGrid,
    pub values: Array2<f64>,
}

const WGR_MAGIC: &[u8; 4] = b"WGR1";

impl WignerField {
    /// Trapezoidal `∫ W dx dp`.
    pub fn integral(&self) -> f64 {
        let (nx, np) = self.values.dim();
        let mut s = 0.0;
        for i in 0..nx {
            let wx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
            for j in 0..np {
                let wp = if j == 0 || j == np - 1 { 0.5 } else { 1.0 };
                s += wx * wp * self.values[[i, j]];
            }
        }
        s * self.grid.dx() * self.grid.dp()
    }

    pub fn write_wgr<W: Write>(&self, mut w: W) -> io::Result<()> {
        let g = &self.grid;
        w.write_all(WGR_MAGIC)?;
        w.write_all(&(g.n_x as u32).to_le_bytes())?;
        w.write_all(&(g.n_p as u32).to_le_bytes())?;
        for v in [g.x_min, g.x_max, g.p_min, g.p_max] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.values.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_wgr_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * self.values.len());
        self.write_wgr(&mut out).expect("writing to a Vec");
        out
    }

    pub fn read_wgr<R: Read>(mut r: R) -> Result<Self, AnalysisError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WGR_MAGIC {
            return Err(AnalysisError::Format("bad magic".into()));
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u)?;
        let n_x = u32::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let n_p = u32::from_le_bytes(u) as usize;
        let mut f = [0u8; 8];
        let mut next = |r: &mut R| -> io::Result<f64> {
            r.read_exact(&mut f)?;
            Ok(f64::from_le_bytes(f))
        };
        let (x_min, x_max, p_min, p_max) = (next(&mut r)?, next(&mut r)?, next(&mut r)?, next(&mut r)?);
        let grid = WignerGrid { x_min, x_max, n_x, p_min, p_max, n_p };
        grid.validate()?;
        let mut vals = Vec::with_capacity(n_x * n_p);
        for _ in 0..n_x * n_p {
            vals.push(next(&mut r)?);
        }
        let values = Array2::from_shape_vec((n_x, n_p), vals).map_err(|e| AnalysisError::Format(e.to_string()))?;
        Ok(Self { grid, values })
    }

    /// `x,p,w` rows, `x` outer.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,p,w")?;
        for i in 0..self.grid.n_x {
            for j in 0..self.grid.n_p {
                writeln!(w, "{:.17e},{:.17e},{:.17e}", self.grid.x(i), self.grid.p(j), self.values[[i, j]])?;
            }
        }
        Ok(())
    }
}

// ln k! for k ≤ n.
fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for k in 1..=n {
        out[k] = out[k - 1] + (k as f64).ln();
    }
    out
}

// Σ_{m,n} ρ_mn w_mn(β) at one phase-space point.
fn wigner_point(rho: ArrayView2<C64>, beta: C64, lnf: &[f64]) -> f64 {
    let nc = rho.nrows();
    let b = 4.0 * beta.norm_sqr();
    let theta = beta.arg();
    let mut total = 0.0;
    for k in 0..nc {
        // h_m = √(m!/(m+k)!) B^{k/2} e^{−B/2} L_m^{(k)}(B), by upward recurrence in m
        let h0 = if b == 0.0 {
            if k == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            (0.5 * k as f64 * b.ln() - 0.5 * b - 0.5 * lnf[k]).exp()
        };
        let mut acc = ZERO;
        let (mut prev, mut cur) = (0.0, h0);
        for m in 0..nc - k {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            acc += rho[[m, m + k]] * (sign * cur);
            let (mf, kf) = (m as f64, k as f64);
            let next = ((2.0 * mf + 1.0 + kf - b) * cur - (mf * (mf + kf)).sqrt() * prev)
                / ((mf + 1.0) * (mf + 1.0 + kf)).sqrt();
            prev = cur;
            cur = next;
        }
        if k == 0 {
            total += acc.re;
        } else {
            total += 2.0 * (acc * C64::from_polar(1.0, k as f64 * theta)).re;
        }
    }
    total / PI
}

/// Wigner function of a cavity-only state via the Fock-basis Laguerre form.
pub fn wigner(state: &QuantumState, grid: &WignerGrid) -> Result<WignerField, AnalysisError> {
    grid.validate()?;
    let l = state.layout();
    if !l.has_cavity() || l.n_qubits() != 0 {
        return Err(AnalysisError::LayoutMismatch("Wigner function needs a cavity-only state".into()));
    }
    let rho = state.to_density_matrix();
    let lnf = ln_factorials(rho.nrows());
    let s2 = std::f64::consts::SQRT_2;
    let vals: Vec<f64> = (0..grid.n_x * grid.n_p)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / grid.n_p, idx % grid.n_p);
            wigner_point(rho.view(), C64::new(grid.x(i) / s2, grid.p(j) / s2), &lnf)
        })
        .collect();
    let values = Array2::from_shape_vec((grid.n_x, grid.n_p), vals).expect("grid size");
    Ok(WignerField { grid: *grid, values })
}

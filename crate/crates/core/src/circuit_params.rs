//! Effective cavity/qubit parameters derived from circuit quantities.
//!
//! All frequencies are angular (rad/s, or any consistent angular unit).

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

/// Minimum `E_J / E_C` accepted as the transmon regime.
pub const TRANSMON_RATIO_MIN: f64 = 10.0;
/// `g / |Δ|` above which the dispersive treatment is flagged.
pub const DISPERSIVE_RATIO_WARN: f64 = 0.2;
/// Minimum squared overlap for assigning a dressed state to a bare label.
pub const LABEL_OVERLAP_MIN: f64 = 0.7;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CircuitError {
    #[error("E_J/E_C = {ratio:.3} is below the transmon regime (needs >= 10)")]
    NotTransmonRegime { ratio: f64 },
    #[error("qubit-cavity detuning is zero")]
    ZeroDetuning,
    #[error("dressed state {label} has best bare overlap {overlap:.3} < 0.7")]
    LabelAmbiguity { label: String, overlap: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransmonSpec {
    pub e_j: f64,
    pub e_c: f64,
}

impl TransmonSpec {
    pub fn new(e_j: f64, e_c: f64) -> Result<Self, CircuitError> {
        let t = Self { e_j, e_c };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), CircuitError> {
        if !(self.e_j > 0.0 && self.e_c > 0.0) {
            return Err(CircuitError::InvalidParameter(format!("E_J={}, E_C={} must be positive", self.e_j, self.e_c)));
        }
        let ratio = self.e_j / self.e_c;
        if ratio < TRANSMON_RATIO_MIN {
            return Err(CircuitError::NotTransmonRegime { ratio });
        }
        Ok(())
    }
}

/// Qubit frequency `√(8 E_J E_C) − E_C` and anharmonicity `E_C`.
pub fn transmon_spectrum(t: &TransmonSpec) -> Result<(f64, f64), CircuitError> {
    t.validate()?;
    Ok(((8.0 * t.e_j * t.e_c).sqrt() - t.e_c, t.e_c))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DispersiveChis {
    pub chi_qq: f64,
    pub chi_qr: f64,
    pub chi_rr: f64,
}

/// Kerr coefficients of one transmon coupled to the cavity, to first order in
/// the anharmonicity after exact linear mode mixing.
pub fn dispersive_chis_single(g: f64, detuning: f64, beta: f64) -> Result<DispersiveChis, CircuitError> {
    if detuning == 0.0 {
        return Err(CircuitError::ZeroDetuning);
    }
    let s = (detuning * detuning + 4.0 * g * g).sqrt();
    let r = detuning.abs() / s;
    // 1 − r without cancellation for g ≪ |Δ|
    let one_minus_r = 4.0 * g * g / (s * (s + detuning.abs()));
    Ok(DispersiveChis {
        chi_qq: beta / 4.0 * (1.0 + r).powi(2),
        chi_qr: beta / 2.0 * 4.0 * g * g / (s * s),
        chi_rr: beta / 4.0 * one_minus_r.powi(2),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DressedModes {
    pub cavity: f64,
    pub qubit: f64,
    pub mixing_angle: f64,
}

pub fn dressed_frequencies(omega_r: f64, omega_q: f64, g: f64) -> Result<DressedModes, CircuitError> {
    let detuning = omega_q - omega_r;
    if detuning == 0.0 {
        return Err(CircuitError::ZeroDetuning);
    }
    let theta = 0.5 * (2.0 * g / detuning).atan();
    let (s, c) = theta.sin_cos();
    let s2 = (2.0 * theta).sin();
    Ok(DressedModes {
        cavity: omega_r * c * c + omega_q * s * s - g * s2,
        qubit: omega_r * s * s + omega_q * c * c + g * s2,
        mixing_angle: theta,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledQubit {
    pub transmon: TransmonSpec,
    pub g: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSpec {
    pub omega_r: f64,
    /// Entry `i - 1` describes qubit `i`.
    pub qubits: Vec<CoupledQubit>,
}

impl CouplingSpec {
    pub fn validate(&self) -> Result<(), CircuitError> {
        if self.qubits.is_empty() {
            return Err(CircuitError::InvalidParameter("no qubits".into()));
        }
        if !(self.omega_r > 0.0) {
            return Err(CircuitError::InvalidParameter("cavity frequency must be positive".into()));
        }
        for q in &self.qubits {
            let (wq, _) = transmon_spectrum(&q.transmon)?;
            if wq == self.omega_r {
                return Err(CircuitError::ZeroDetuning);
            }
        }
        Ok(())
    }

    /// Qubits whose `g/|Δ|` exceeds the dispersive warning ratio.
    pub fn dispersive_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, q) in self.qubits.iter().enumerate() {
            if let Ok((wq, _)) = transmon_spectrum(&q.transmon) {
                let ratio = q.g.abs() / (wq - self.omega_r).abs();
                if ratio > DISPERSIVE_RATIO_WARN {
                    out.push(format!("qubit {}: g/|Δ| = {ratio:.3} exceeds {DISPERSIVE_RATIO_WARN}", i + 1));
                }
            }
        }
        out
    }
}

/// Frequencies and Kerr coefficients entering the dispersive Hamiltonian.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemParams {
    pub omega_r: f64,
    /// Entry `i - 1` belongs to qubit `i`.
    pub omega_q: Vec<f64>,
    pub chi_qr: Vec<f64>,
    pub chi_qq: Vec<f64>,
    pub chi_rr: f64,
    /// Sideband spacing; the slowest cross-Kerr rate.
    pub delta_omega: f64,
}

impl SystemParams {
    /// `χ_{q_i r} = 2^{n−i} Δω`, with rotating-frame frequencies set to zero.
    pub fn equal_spacing(n: usize, delta_omega: f64, chi_qq: f64, chi_rr: f64) -> Self {
        let chi_qr = (1..=n).map(|i| delta_omega * (1u64 << (n - i)) as f64).collect();
        Self { omega_r: 0.0, omega_q: vec![0.0; n], chi_qr, chi_qq: vec![chi_qq; n], chi_rr, delta_omega }
    }

    /// Equal spacing with the self-Kerr taken from [`cavity_self_kerr_estimate`].
    pub fn equal_spacing_estimated_kerr(n: usize, delta_omega: f64, chi_qq: f64) -> Self {
        let mut p = Self::equal_spacing(n, delta_omega, chi_qq, 0.0);
        p.chi_rr = cavity_self_kerr_estimate(&p.chi_qr, chi_qq);
        p
    }

    pub fn n_qubits(&self) -> usize {
        self.chi_qr.len()
    }

    /// Whether `χ_{q_i r} = 2^{n−i} Δω` holds to relative tolerance `tol`.
    pub fn is_equal_spacing(&self, tol: f64) -> bool {
        let n = self.n_qubits();
        self.chi_qr.iter().enumerate().all(|(k, &c)| {
            let want = self.delta_omega * (1u64 << (n - 1 - k)) as f64;
            (c - want).abs() <= tol * want.abs()
        })
    }

    /// Sideband period `π/Δω`.
    pub fn delta_t(&self) -> f64 {
        std::f64::consts::PI / self.delta_omega
    }

    pub fn validate(&self) -> Result<(), CircuitError> {
        let n = self.n_qubits();
        if n == 0 || self.omega_q.len() != n || self.chi_qq.len() != n {
            return Err(CircuitError::InvalidParameter("per-qubit vectors must have equal non-zero length".into()));
        }
        let all = self.chi_qr.iter().chain(&self.chi_qq).chain(std::iter::once(&self.chi_rr));
        if all.clone().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(CircuitError::InvalidParameter("Kerr coefficients must be finite and non-negative".into()));
        }
        if !(self.delta_omega > 0.0 && self.delta_omega.is_finite()) {
            return Err(CircuitError::InvalidParameter("Δω must be positive".into()));
        }
        Ok(())
    }
}

/// `Σ_i χ_{q_i r}² / (4 χ_qq)`.
pub fn cavity_self_kerr_estimate(chi_qr: &[f64], chi_qq: f64) -> f64 {
    chi_qr.iter().map(|c| c * c).sum::<f64>() / (4.0 * chi_qq)
}

/// How the multi-mode spectrum is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChiMethod {
    /// Exact linear normal modes; quartic transmon terms to first order.
    #[default]
    FirstOrder,
    /// Full diagonalization of the truncated Duffing-oscillator Hamiltonian.
    Exact,
}

pub const DEFAULT_TRANSMON_LEVELS: usize = 6;
pub const DEFAULT_CAVITY_LEVELS: usize = 6;

/// Extracts `χ_{q_i r}`, `χ_{q_i q_i}` and `χ_rr` from the joint spectrum by
/// second finite differences of dressed-state energies.
pub fn numeric_chis_multi(spec: &CouplingSpec, transmon_levels: usize, cavity_levels: usize) -> Result<SystemParams, CircuitError> {
    numeric_chis_multi_with(spec, transmon_levels, cavity_levels, ChiMethod::FirstOrder)
}

pub fn numeric_chis_multi_with(
    spec: &CouplingSpec,
    transmon_levels: usize,
    cavity_levels: usize,
    method: ChiMethod,
) -> Result<SystemParams, CircuitError> {
    spec.validate()?;
    if transmon_levels < 3 || cavity_levels < 3 {
        return Err(CircuitError::InvalidParameter("need at least 3 levels per mode".into()));
    }
    let n = spec.qubits.len();
    let mut bare = Vec::with_capacity(n);
    for q in &spec.qubits {
        bare.push(transmon_spectrum(&q.transmon)?);
    }
    let mut dims = vec![cavity_levels];
    dims.extend(std::iter::repeat(transmon_levels).take(n));
    let energy: Box<dyn Fn(&[usize]) -> Result<f64, CircuitError>> = match method {
        ChiMethod::FirstOrder => Box::new(first_order_energies(spec, &bare)?),
        ChiMethod::Exact => Box::new(exact_energies(spec, &bare, &dims)?),
    };

    let occ = |cav: usize, qubit: Option<(usize, usize)>| -> Vec<usize> {
        let mut v = vec![0; n + 1];
        v[0] = cav;
        if let Some((k, m)) = qubit {
            v[k + 1] = m;
        }
        v
    };
    let e0 = energy(&occ(0, None))?;
    let e_r1 = energy(&occ(1, None))?;
    let e_r2 = energy(&occ(2, None))?;
    let decoupled = |k: usize| spec.qubits[k].g == 0.0;
    let chi_rr = if (0..n).all(decoupled) { 0.0 } else { -(e_r2 - 2.0 * e_r1 + e0) };
    let mut chi_qr = Vec::with_capacity(n);
    let mut chi_qq = Vec::with_capacity(n);
    let mut omega_q = Vec::with_capacity(n);
    for k in 0..n {
        let e_q1 = energy(&occ(0, Some((k, 1))))?;
        let e_q2 = energy(&occ(0, Some((k, 2))))?;
        let e_rq = energy(&occ(1, Some((k, 1))))?;
        chi_qr.push(if decoupled(k) { 0.0 } else { -(e_rq - e_r1 - e_q1 + e0) });
        chi_qq.push(-(e_q2 - 2.0 * e_q1 + e0));
        omega_q.push(e_q1 - e0);
    }
    let delta_omega = chi_qr.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SystemParams { omega_r: e_r1 - e0, omega_q, chi_qr, chi_qq, chi_rr, delta_omega })
}

/// Single-excitation mixing matrix `U[bare][mode]`, columns ordered so that
/// mode `m` is the one dominated by bare mode `m` (0 = cavity).
fn linear_modes(spec: &CouplingSpec, bare: &[(f64, f64)]) -> Result<(Vec<f64>, DMatrix<f64>), CircuitError> {
    let n = spec.qubits.len();
    let mut m = DMatrix::<f64>::zeros(n + 1, n + 1);
    m[(0, 0)] = spec.omega_r;
    for (k, q) in spec.qubits.iter().enumerate() {
        m[(k + 1, k + 1)] = bare[k].0;
        m[(0, k + 1)] = q.g;
        m[(k + 1, 0)] = q.g;
    }
    let eig = SymmetricEigen::new(m);
    let mut order = vec![usize::MAX; n + 1];
    for mode in 0..=n {
        let (b, w) = (0..=n)
            .map(|b| (b, eig.eigenvectors[(b, mode)].powi(2)))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if w < LABEL_OVERLAP_MIN || order[b] != usize::MAX {
            return Err(CircuitError::LabelAmbiguity { label: format!("linear mode {mode}"), overlap: w });
        }
        order[b] = mode;
    }
    let freqs = order.iter().map(|&m| eig.eigenvalues[m]).collect();
    let u = DMatrix::from_fn(n + 1, n + 1, |b, m| eig.eigenvectors[(b, order[m])]);
    Ok((freqs, u))
}

fn first_order_energies(spec: &CouplingSpec, bare: &[(f64, f64)]) -> Result<impl Fn(&[usize]) -> Result<f64, CircuitError>, CircuitError> {
    let (freqs, u) = linear_modes(spec, bare)?;
    let betas: Vec<f64> = bare.iter().map(|b| b.1).collect();
    Ok(move |occ: &[usize]| {
        let mut e: f64 = occ.iter().zip(&freqs).map(|(&k, w)| k as f64 * w).sum();
        // ⟨B†B†BB⟩ in a number state, B = Σ_m u_m a_m.
        for (k, beta) in betas.iter().enumerate() {
            let w: Vec<f64> = (0..occ.len()).map(|m| u[(k + 1, m)].powi(2)).collect();
            let mut quartic = 0.0;
            for m in 0..occ.len() {
                let nm = occ[m] as f64;
                quartic += w[m] * w[m] * nm * (nm - 1.0);
                for mm in (m + 1)..occ.len() {
                    quartic += 4.0 * w[m] * w[mm] * nm * occ[mm] as f64;
                }
            }
            e -= beta / 2.0 * quartic;
        }
        Ok(e)
    })
}

fn exact_energies(
    spec: &CouplingSpec,
    bare: &[(f64, f64)],
    dims: &[usize],
) -> Result<impl Fn(&[usize]) -> Result<f64, CircuitError>, CircuitError> {
    let dims = dims.to_vec();
    let n_modes = dims.len();
    let total: usize = dims.iter().product();
    let decode = |mut idx: usize| -> Vec<usize> {
        let mut occ = vec![0; n_modes];
        for m in (0..n_modes).rev() {
            occ[m] = idx % dims[m];
            idx /= dims[m];
        }
        occ
    };
    let enc_dims = dims.clone();
    let encode = move |occ: &[usize]| -> usize { occ.iter().zip(&enc_dims).fold(0, |acc, (&o, &d)| acc * d + o) };
    // The coupling conserves total excitations, so subtracting ω_R·N_exc leaves
    // every second difference unchanged and keeps the diagonal well scaled.
    let cavity_levels = dims[0];
    let mut h = DMatrix::<f64>::zeros(total, total);
    for idx in 0..total {
        let occ = decode(idx);
        let n_exc: usize = occ.iter().sum();
        let mut diag = spec.omega_r * occ[0] as f64 - spec.omega_r * n_exc as f64;
        for (k, &(wq, beta)) in bare.iter().enumerate() {
            let m = occ[k + 1] as f64;
            diag += wq * m - beta / 2.0 * m * (m - 1.0);
        }
        h[(idx, idx)] = diag;
        for (k, q) in spec.qubits.iter().enumerate() {
            // c† b_k
            if occ[k + 1] > 0 && occ[0] + 1 < cavity_levels {
                let mut to = occ.clone();
                to[0] += 1;
                to[k + 1] -= 1;
                let v = q.g * ((occ[0] + 1) as f64).sqrt() * (occ[k + 1] as f64).sqrt();
                let j = encode(&to);
                h[(j, idx)] += v;
                h[(idx, j)] += v;
            }
        }
    }
    let eig = SymmetricEigen::new(h);
    let omega_r = spec.omega_r;
    let evals = eig.eigenvalues.clone();
    let evecs = eig.eigenvectors;
    Ok(move |occ: &[usize]| {
        let idx = encode(occ);
        let (best, w) = (0..total)
            .map(|e| (e, evecs[(idx, e)].powi(2)))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if w < LABEL_OVERLAP_MIN {
            return Err(CircuitError::LabelAmbiguity { label: format!("{occ:?}"), overlap: w });
        }
        let n_exc: usize = occ.iter().sum();
        Ok(evals[best] + omega_r * n_exc as f64)
    })
}

//! Truncated Fock space of one cavity mode tensored with a register of qubits.
//!
//! Basis ordering is lexicographic over the factors (cavity, q_n, ..., q_1):
//! the flat index of `|photons⟩ ⊗ |q_n ... q_1⟩` is `photons * 2^n + bits`,
//! where qubit `i` sits at bit `i - 1` of `bits`.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Guard ratio between cutoff and |α|².
pub const CUTOFF_GUARD: f64 = 3.0;

/// Population of the top three Fock levels above which a state is flagged.
pub const TRUNCATION_WARN_LEVEL: f64 = 1e-8;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum HilbertError {
    #[error("invalid layout: cavity cutoff {cutoff:?}, {n_qubits} qubits")]
    InvalidLayout { cutoff: Option<usize>, n_qubits: usize },
    #[error("cutoff {cutoff} too small for |alpha|^2 = {mean_photons:.4} (needs |alpha|^2 <= cutoff/3)")]
    CutoffTooSmall { cutoff: usize, mean_photons: f64 },
    #[error("bad factor set for partial trace")]
    BadFactorSet,
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("operator check failed: {0}")]
    OperatorCheck(String),
}

/// Which tensor factors are present and how large they are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpaceLayout {
    cavity: Option<usize>,
    n_qubits: usize,
}

impl SpaceLayout {
    /// Cavity with Fock states `0..=cavity_cutoff` and `n_qubits` qubits.
    pub fn new(cavity_cutoff: usize, n_qubits: usize) -> Result<Self, HilbertError> {
        if cavity_cutoff < 1 || n_qubits < 1 || n_qubits > 20 {
            return Err(HilbertError::InvalidLayout { cutoff: Some(cavity_cutoff), n_qubits });
        }
        Ok(Self { cavity: Some(cavity_cutoff), n_qubits })
    }

    pub fn cavity_only(cavity_cutoff: usize) -> Result<Self, HilbertError> {
        if cavity_cutoff < 1 {
            return Err(HilbertError::InvalidLayout { cutoff: Some(cavity_cutoff), n_qubits: 0 });
        }
        Ok(Self { cavity: Some(cavity_cutoff), n_qubits: 0 })
    }

    pub fn qubits_only(n_qubits: usize) -> Result<Self, HilbertError> {
        if n_qubits < 1 || n_qubits > 20 {
            return Err(HilbertError::InvalidLayout { cutoff: None, n_qubits });
        }
        Ok(Self { cavity: None, n_qubits })
    }

    pub fn cavity_cutoff(&self) -> Option<usize> {
        self.cavity
    }

    pub fn has_cavity(&self) -> bool {
        self.cavity.is_some()
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    /// Number of Fock states kept (1 when there is no cavity factor).
    pub fn cavity_dim(&self) -> usize {
        self.cavity.map_or(1, |n| n + 1)
    }

    pub fn qubit_dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.cavity_dim() * self.qubit_dim()
    }

    pub fn index(&self, photons: usize, qubit_bits: usize) -> usize {
        photons * self.qubit_dim() + qubit_bits
    }

    /// Inverse of [`SpaceLayout::index`].
    pub fn split(&self, index: usize) -> (usize, usize) {
        (index / self.qubit_dim(), index % self.qubit_dim())
    }

    /// Layout of the qubit register alone.
    pub fn qubit_layout(&self) -> Result<SpaceLayout, HilbertError> {
        SpaceLayout::qubits_only(self.n_qubits)
    }

    /// Layout of the cavity alone.
    pub fn cavity_layout(&self) -> Result<SpaceLayout, HilbertError> {
        match self.cavity {
            Some(n) => SpaceLayout::cavity_only(n),
            None => Err(HilbertError::BadFactorSet),
        }
    }

    fn check_alpha(&self, alpha: C64) -> Result<usize, HilbertError> {
        let cutoff = self.cavity.ok_or(HilbertError::BadFactorSet)?;
        let mean = alpha.norm_sqr();
        if mean > cutoff as f64 / CUTOFF_GUARD {
            return Err(HilbertError::CutoffTooSmall { cutoff, mean_photons: mean });
        }
        Ok(cutoff)
    }
}

/// Qubit labels run 1..=n; the register bit of qubit `i` is `i - 1`.
pub fn qubit_bit(qubit: usize) -> usize {
    1 << (qubit - 1)
}

/// Renders a register basis index as `q_n ... q_1`.
pub fn qubit_label(bits: usize, n_qubits: usize) -> String {
    (1..=n_qubits).rev().map(|q| if bits & qubit_bit(q) != 0 { '1' } else { '0' }).collect()
}

/// Parses a `q_n ... q_1` bit string.
pub fn parse_qubit_label(label: &str) -> Option<usize> {
    let mut bits = 0;
    for c in label.chars() {
        bits <<= 1;
        match c {
            '0' => {}
            '1' => bits |= 1,
            _ => return None,
        }
    }
    Some(bits)
}

/// Sparse complex matrix in CSR form over a layout's basis.
#[derive(Clone, Debug)]
pub struct Operator {
    layout: SpaceLayout,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<C64>,
}

impl Operator {
    /// Duplicates are summed; exact zeros are dropped.
    pub fn from_triplets(layout: SpaceLayout, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        let dim = layout.dim();
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; dim + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        let mut rows = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet ({r}, {c}) outside dimension {dim}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                rows.push(r);
                last = Some((r, c));
            }
        }
        let mut keep_idx = Vec::with_capacity(indices.len());
        let mut keep_val = Vec::with_capacity(values.len());
        for ((r, c), v) in rows.iter().zip(indices).zip(values) {
            if v != ZERO {
                indptr[r + 1] += 1;
                keep_idx.push(c);
                keep_val.push(v);
            }
        }
        for r in 0..dim {
            indptr[r + 1] += indptr[r];
        }
        Self { layout, indptr, indices: keep_idx, values: keep_val }
    }

    pub fn zeros(layout: SpaceLayout) -> Self {
        Self::from_triplets(layout, Vec::new())
    }

    pub fn identity(layout: SpaceLayout) -> Self {
        Self::diagonal(layout, &vec![ONE; layout.dim()])
    }

    pub fn diagonal(layout: SpaceLayout, diag: &[C64]) -> Self {
        assert_eq!(diag.len(), layout.dim());
        Self::from_triplets(layout, diag.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    pub fn from_dense(layout: SpaceLayout, m: ArrayView2<C64>) -> Self {
        assert_eq!(m.dim(), (layout.dim(), layout.dim()));
        let mut t = Vec::new();
        for ((r, c), &v) in m.indexed_iter() {
            if v != ZERO {
                t.push((r, c, v));
            }
        }
        Self::from_triplets(layout, t)
    }

    /// Embeds a (cutoff+1)-square cavity matrix as `M ⊗ 1_q`.
    pub fn on_cavity(layout: SpaceLayout, m: ArrayView2<C64>) -> Self {
        let nc = layout.cavity_dim();
        let dq = layout.qubit_dim();
        assert_eq!(m.dim(), (nc, nc));
        let mut t = Vec::new();
        for ((r, c), &v) in m.indexed_iter() {
            if v != ZERO {
                for q in 0..dq {
                    t.push((layout.index(r, q), layout.index(c, q), v));
                }
            }
        }
        Self::from_triplets(layout, t)
    }

    /// Embeds a 2x2 matrix acting on qubit `qubit` (1-based).
    pub fn on_qubit(layout: SpaceLayout, qubit: usize, m: [[C64; 2]; 2]) -> Self {
        assert!(qubit >= 1 && qubit <= layout.n_qubits());
        let bit = qubit_bit(qubit);
        let mut t = Vec::new();
        for col in 0..layout.dim() {
            let (p, q) = layout.split(col);
            let b = usize::from(q & bit != 0);
            for (nb, row_m) in m.iter().enumerate() {
                let v = row_m[b];
                if v != ZERO {
                    let q2 = if nb == 1 { q | bit } else { q & !bit };
                    t.push((layout.index(p, q2), col, v));
                }
            }
        }
        Self::from_triplets(layout, t)
    }

    pub fn layout(&self) -> SpaceLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        let row = &self.indices[self.indptr[r]..self.indptr[r + 1]];
        match row.binary_search(&c) {
            Ok(k) => self.values[self.indptr[r] + k],
            Err(_) => ZERO,
        }
    }

    /// Iterates `(col, value)` over the stored entries of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> Vec<(usize, usize, C64)> {
        let mut t = Vec::with_capacity(self.nnz());
        for r in 0..self.dim() {
            for (c, v) in self.row(r) {
                t.push((r, c, v));
            }
        }
        t
    }

    pub fn to_dense(&self) -> Array2<C64> {
        let mut m = Array2::zeros((self.dim(), self.dim()));
        for (r, c, v) in self.triplets() {
            m[[r, c]] = v;
        }
        m
    }

    pub fn adjoint(&self) -> Self {
        let t = self.triplets().into_iter().map(|(r, c, v)| (c, r, v.conj())).collect();
        Self::from_triplets(self.layout, t)
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn add(&self, other: &Operator) -> Result<Self, HilbertError> {
        self.same_layout(other)?;
        let mut t = self.triplets();
        t.extend(other.triplets());
        Ok(Self::from_triplets(self.layout, t))
    }

    pub fn sub(&self, other: &Operator) -> Result<Self, HilbertError> {
        self.add(&other.scale(-ONE))
    }

    pub fn matmul(&self, other: &Operator) -> Result<Self, HilbertError> {
        self.same_layout(other)?;
        let mut t = Vec::new();
        for r in 0..self.dim() {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    t.push((r, c, a * b));
                }
            }
        }
        Ok(Self::from_triplets(self.layout, t))
    }

    /// `[A, B] = AB - BA`.
    pub fn commutator(&self, other: &Operator) -> Result<Self, HilbertError> {
        self.matmul(other)?.sub(&other.matmul(self)?)
    }

    pub fn apply(&self, v: ArrayView1<C64>) -> Array1<C64> {
        assert_eq!(v.len(), self.dim());
        Array1::from_iter((0..self.dim()).map(|r| self.row(r).map(|(c, x)| x * v[c]).sum()))
    }

    /// Dense product `S · M`.
    pub fn mul_dense(&self, m: ArrayView2<C64>) -> Array2<C64> {
        let (n, k) = m.dim();
        assert_eq!(n, self.dim());
        let mut out = Array2::zeros((n, k));
        for r in 0..n {
            let mut out_row = out.row_mut(r);
            for (c, x) in self.row(r) {
                out_row.scaled_add(x, &m.row(c));
            }
        }
        out
    }

    /// Dense product `M · S`.
    pub fn dense_mul(&self, m: ArrayView2<C64>) -> Array2<C64> {
        let (k, n) = m.dim();
        assert_eq!(n, self.dim());
        let mut out = Array2::zeros((k, n));
        for r in 0..n {
            for (c, x) in self.row(r) {
                let col_in = m.column(r);
                out.column_mut(c).scaled_add(x, &col_in);
            }
        }
        out
    }

    /// Largest entry of `|A - A†|`.
    pub fn hermitian_defect(&self) -> f64 {
        let d = self.sub(&self.adjoint()).expect("same layout");
        d.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    /// Largest entry of `|A†A - 1|`.
    pub fn unitary_defect(&self) -> f64 {
        let p = self.adjoint().matmul(self).expect("same layout");
        let d = p.sub(&Operator::identity(self.layout)).expect("same layout");
        d.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn assert_hermitian(&self, tol: f64) -> Result<(), HilbertError> {
        let d = self.hermitian_defect();
        if d > tol {
            return Err(HilbertError::OperatorCheck(format!("hermitian defect {d:e} > {tol:e}")));
        }
        Ok(())
    }

    pub fn assert_unitary(&self, tol: f64) -> Result<(), HilbertError> {
        let d = self.unitary_defect();
        if d > tol {
            return Err(HilbertError::OperatorCheck(format!("unitary defect {d:e} > {tol:e}")));
        }
        Ok(())
    }

    /// Main diagonal, if the operator has no off-diagonal entries.
    pub fn as_diagonal(&self) -> Option<Vec<C64>> {
        let mut d = vec![ZERO; self.dim()];
        for (r, c, v) in self.triplets() {
            if r != c {
                return None;
            }
            d[r] = v;
        }
        Some(d)
    }

    fn same_layout(&self, other: &Operator) -> Result<(), HilbertError> {
        if self.layout != other.layout {
            return Err(HilbertError::LayoutMismatch(format!("{:?} vs {:?}", self.layout, other.layout)));
        }
        Ok(())
    }
}

/// The standard operator set of a layout, all embedded in the full space.
#[derive(Clone, Debug)]
pub struct ModeOperators {
    pub a: Operator,
    pub a_dag: Operator,
    pub number: Operator,
    /// `sigma_minus[i - 1]` lowers qubit `i`.
    pub sigma_minus: Vec<Operator>,
    pub sigma_plus: Vec<Operator>,
    pub sigma_z: Vec<Operator>,
    pub sigma_y: Vec<Operator>,
    /// `|0⟩⟨0|_r ⊗ 1_q`.
    pub vacuum_projector: Operator,
}

pub fn cavity_lowering_matrix(cutoff: usize) -> Array2<C64> {
    let mut a = Array2::zeros((cutoff + 1, cutoff + 1));
    for n in 1..=cutoff {
        a[[n - 1, n]] = C64::new((n as f64).sqrt(), 0.0);
    }
    a
}

pub fn mode_operators(layout: SpaceLayout) -> Result<ModeOperators, HilbertError> {
    let cutoff = layout.cavity_cutoff().ok_or(HilbertError::BadFactorSet)?;
    let a = Operator::on_cavity(layout, cavity_lowering_matrix(cutoff).view());
    let a_dag = a.adjoint();
    let number = Operator::diagonal(
        layout,
        &(0..layout.dim()).map(|i| C64::new(layout.split(i).0 as f64, 0.0)).collect::<Vec<_>>(),
    );
    let lower = [[ZERO, ONE], [ZERO, ZERO]];
    let pz = [[ONE, ZERO], [ZERO, -ONE]];
    let py = [[ZERO, -I], [I, ZERO]];
    let qubits = 1..=layout.n_qubits();
    let sigma_minus: Vec<_> = qubits.clone().map(|q| Operator::on_qubit(layout, q, lower)).collect();
    let sigma_plus = sigma_minus.iter().map(Operator::adjoint).collect();
    let sigma_z = qubits.clone().map(|q| Operator::on_qubit(layout, q, pz)).collect();
    let sigma_y = qubits.map(|q| Operator::on_qubit(layout, q, py)).collect();
    let mut vac = Array2::zeros((cutoff + 1, cutoff + 1));
    vac[[0, 0]] = ONE;
    let vacuum_projector = Operator::on_cavity(layout, vac.view());
    Ok(ModeOperators { a, a_dag, number, sigma_minus, sigma_plus, sigma_z, sigma_y, vacuum_projector })
}

/// Pure ket or density matrix over a layout.
#[derive(Clone, Debug, PartialEq)]
pub enum StateData {
    Ket(Array1<C64>),
    Density(Array2<C64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantumState {
    layout: SpaceLayout,
    data: StateData,
}

pub const KET_NORM_TOL: f64 = 1e-9;
pub const DENSITY_HERMITIAN_TOL: f64 = 1e-10;
pub const DENSITY_TRACE_TOL: f64 = 1e-9;
pub const DENSITY_POSITIVITY_SLACK: f64 = 1e-8;

impl QuantumState {
    pub fn ket(layout: SpaceLayout, amplitudes: Array1<C64>) -> Result<Self, HilbertError> {
        let s = Self { layout, data: StateData::Ket(amplitudes) };
        s.validate()?;
        Ok(s)
    }

    pub fn density(layout: SpaceLayout, rho: Array2<C64>) -> Result<Self, HilbertError> {
        let s = Self { layout, data: StateData::Density(rho) };
        s.validate()?;
        Ok(s)
    }

    /// Skips validation; callers guarantee the invariants up to integration error.
    pub fn density_unchecked(layout: SpaceLayout, rho: Array2<C64>) -> Self {
        Self { layout, data: StateData::Density(rho) }
    }

    pub fn ket_unchecked(layout: SpaceLayout, amplitudes: Array1<C64>) -> Self {
        Self { layout, data: StateData::Ket(amplitudes) }
    }

    /// `|photons⟩ ⊗ |bits⟩`.
    pub fn basis(layout: SpaceLayout, photons: usize, bits: usize) -> Self {
        let mut v = Array1::zeros(layout.dim());
        v[layout.index(photons, bits)] = ONE;
        Self { layout, data: StateData::Ket(v) }
    }

    /// Cavity vacuum times a register ket given over the `2^n` qubit basis.
    pub fn vacuum_with_qubits(layout: SpaceLayout, qubits: ArrayView1<C64>) -> Result<Self, HilbertError> {
        if qubits.len() != layout.qubit_dim() {
            return Err(HilbertError::LayoutMismatch(format!(
                "register ket of length {} for {} qubits",
                qubits.len(),
                layout.n_qubits()
            )));
        }
        let mut v = Array1::zeros(layout.dim());
        v.slice_mut(ndarray::s![..layout.qubit_dim()]).assign(&qubits);
        Self::ket(layout, v)
    }

    pub fn layout(&self) -> SpaceLayout {
        self.layout
    }

    pub fn data(&self) -> &StateData {
        &self.data
    }

    pub fn is_ket(&self) -> bool {
        matches!(self.data, StateData::Ket(_))
    }

    pub fn as_ket(&self) -> Option<&Array1<C64>> {
        match &self.data {
            StateData::Ket(v) => Some(v),
            StateData::Density(_) => None,
        }
    }

    /// Density matrix (outer product for kets).
    pub fn to_density_matrix(&self) -> Array2<C64> {
        match &self.data {
            StateData::Density(r) => r.clone(),
            StateData::Ket(v) => {
                let n = v.len();
                Array2::from_shape_fn((n, n), |(i, j)| v[i] * v[j].conj())
            }
        }
    }

    pub fn to_density(&self) -> QuantumState {
        Self { layout: self.layout, data: StateData::Density(self.to_density_matrix()) }
    }

    pub fn trace(&self) -> f64 {
        match &self.data {
            StateData::Ket(v) => v.iter().map(|x| x.norm_sqr()).sum(),
            StateData::Density(r) => r.diag().iter().map(|x| x.re).sum(),
        }
    }

    /// Diagonal of the density matrix in the flat basis.
    pub fn populations(&self) -> Vec<f64> {
        match &self.data {
            StateData::Ket(v) => v.iter().map(|x| x.norm_sqr()).collect(),
            StateData::Density(r) => r.diag().iter().map(|x| x.re).collect(),
        }
    }

    /// Total population of each Fock level.
    pub fn photon_distribution(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.layout.cavity_dim()];
        for (i, x) in self.populations().into_iter().enumerate() {
            p[self.layout.split(i).0] += x;
        }
        p
    }

    pub fn mean_photon_number(&self) -> f64 {
        self.photon_distribution().iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    /// Population in the top three Fock levels.
    pub fn truncation_tail(&self) -> f64 {
        let p = self.photon_distribution();
        p.iter().rev().take(3.min(p.len())).sum()
    }

    /// Returns a diagnostic when the truncation tail exceeds the warning level.
    pub fn truncation_warning(&self) -> Option<String> {
        if !self.layout.has_cavity() {
            return None;
        }
        let tail = self.truncation_tail();
        (tail > TRUNCATION_WARN_LEVEL)
            .then(|| format!("top Fock levels hold population {tail:.3e} (cutoff {})", self.layout.cavity_cutoff().unwrap_or(0)))
    }

    /// Smallest eigenvalue of the (Hermitian part of the) density matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        match &self.data {
            StateData::Ket(_) => 0.0,
            StateData::Density(r) => min_hermitian_eigenvalue(r.view()),
        }
    }

    pub fn validate(&self) -> Result<(), HilbertError> {
        match &self.data {
            StateData::Ket(v) => {
                if v.len() != self.layout.dim() {
                    return Err(HilbertError::LayoutMismatch(format!("ket length {} vs {}", v.len(), self.layout.dim())));
                }
                let n = self.trace();
                if (n - 1.0).abs() > KET_NORM_TOL {
                    return Err(HilbertError::InvalidState(format!("ket norm² {n}")));
                }
            }
            StateData::Density(r) => {
                if r.dim() != (self.layout.dim(), self.layout.dim()) {
                    return Err(HilbertError::LayoutMismatch(format!("density shape {:?}", r.dim())));
                }
                let h = hermitian_defect(r.view());
                if h > DENSITY_HERMITIAN_TOL {
                    return Err(HilbertError::InvalidState(format!("hermitian defect {h:e}")));
                }
                let t = self.trace();
                if (t - 1.0).abs() > DENSITY_TRACE_TOL {
                    return Err(HilbertError::InvalidState(format!("trace {t}")));
                }
                let m = self.min_eigenvalue();
                if m < -DENSITY_POSITIVITY_SLACK {
                    return Err(HilbertError::InvalidState(format!("negative eigenvalue {m:e}")));
                }
            }
        }
        Ok(())
    }

    /// Expectation value `Tr(ρ O)`.
    pub fn expectation(&self, op: &Operator) -> Result<C64, HilbertError> {
        if op.layout() != self.layout {
            return Err(HilbertError::LayoutMismatch("operator and state".into()));
        }
        Ok(match &self.data {
            StateData::Ket(v) => {
                let ov = op.apply(v.view());
                v.iter().zip(ov.iter()).map(|(a, b)| a.conj() * b).sum()
            }
            StateData::Density(r) => {
                let mut acc = ZERO;
                for (row, col, x) in op.triplets() {
                    acc += x * r[[col, row]];
                }
                acc
            }
        })
    }
}

pub fn hermitian_defect(m: ArrayView2<C64>) -> f64 {
    let n = m.nrows();
    let mut d: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            d = d.max((m[[i, j]] - m[[j, i]].conj()).norm());
        }
    }
    d
}

pub fn to_nalgebra(m: ArrayView2<C64>) -> DMatrix<C64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Eigenvalues of the Hermitian part of `m`, ascending.
pub fn hermitian_eigenvalues(m: ArrayView2<C64>) -> Vec<f64> {
    let a = to_nalgebra(m);
    let h = (&a + a.adjoint()) * C64::new(0.5, 0.0);
    let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

pub fn min_hermitian_eigenvalue(m: ArrayView2<C64>) -> f64 {
    hermitian_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Fock amplitudes `e^{-|α|²/2} α^n / √n!` for `n = 0..=cutoff`, renormalized.
pub fn coherent_amplitudes(alpha: C64, cutoff: usize) -> Array1<C64> {
    let mut v = Array1::zeros(cutoff + 1);
    let mut term = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    v[0] = term;
    for n in 1..=cutoff {
        term = term * alpha / (n as f64).sqrt();
        v[n] = term;
    }
    let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    v.mapv_inplace(|x| x / norm);
    v
}

/// Coherent cavity state with the register in `|0...0⟩`.
pub fn coherent_state(alpha: C64, layout: SpaceLayout) -> Result<QuantumState, HilbertError> {
    let cutoff = layout.check_alpha(alpha)?;
    let amps = coherent_amplitudes(alpha, cutoff);
    let mut v = Array1::zeros(layout.dim());
    for (n, &x) in amps.iter().enumerate() {
        v[layout.index(n, 0)] = x;
    }
    QuantumState::ket(layout, v)
}

/// `exp(α a† − α* a)` on the truncated cavity, as a dense (cutoff+1)-square matrix.
///
/// `i(α a† − α* a)` is Hermitian and tridiagonal, so the exponential is taken
/// through its eigendecomposition.
pub fn displacement_matrix(alpha: C64, cutoff: usize) -> Array2<C64> {
    let dim = cutoff + 1;
    if alpha == ZERO {
        return Array2::eye(dim);
    }
    let mut k = DMatrix::<C64>::zeros(dim, dim);
    for n in 1..dim {
        let s = (n as f64).sqrt();
        // i(α a† − α* a): ⟨n|a†|n−1⟩ = √n
        k[(n, n - 1)] = I * alpha * s;
        k[(n - 1, n)] = -I * alpha.conj() * s;
    }
    let eig = k.symmetric_eigen();
    let v = eig.eigenvectors;
    let phases: Vec<C64> = eig.eigenvalues.iter().map(|&l| C64::from_polar(1.0, -l)).collect();
    // D = exp(-i K) = V e^{-iΛ} V†
    let mut out = Array2::zeros((dim, dim));
    for r in 0..dim {
        for c in 0..dim {
            let mut acc = ZERO;
            for (m, ph) in phases.iter().enumerate() {
                acc += v[(r, m)] * ph * v[(c, m)].conj();
            }
            out[[r, c]] = acc;
        }
    }
    out
}

pub fn displacement_operator(alpha: C64, layout: SpaceLayout) -> Result<Operator, HilbertError> {
    let cutoff = layout.check_alpha(alpha)?;
    Ok(Operator::on_cavity(layout, displacement_matrix(alpha, cutoff).view()))
}

/// Tensor factors addressable by [`partial_trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    Cavity,
    /// 1-based qubit label.
    Qubit(usize),
}

/// Traces out every factor not listed in `keep`.
///
/// Kept qubits are relabelled 1..k in their original order. Keeping every
/// factor returns the state as a density matrix.
pub fn partial_trace(state: &QuantumState, keep: &[Factor]) -> Result<QuantumState, HilbertError> {
    let layout = state.layout();
    if keep.is_empty() {
        return Err(HilbertError::BadFactorSet);
    }
    let mut keep_cavity = false;
    let mut kept_qubits = Vec::new();
    for f in keep {
        match *f {
            Factor::Cavity if layout.has_cavity() => keep_cavity = true,
            Factor::Qubit(q) if q >= 1 && q <= layout.n_qubits() => kept_qubits.push(q),
            _ => return Err(HilbertError::BadFactorSet),
        }
    }
    kept_qubits.sort_unstable();
    kept_qubits.dedup();
    let out_layout = match (keep_cavity, kept_qubits.len()) {
        (true, 0) => SpaceLayout::cavity_only(layout.cavity_cutoff().unwrap())?,
        (true, k) => SpaceLayout::new(layout.cavity_cutoff().unwrap(), k)?,
        (false, k) => SpaceLayout::qubits_only(k)?,
    };
    let traced_qubits: Vec<usize> = (1..=layout.n_qubits()).filter(|q| !kept_qubits.contains(q)).collect();

    let kept_bits = |bits: usize| -> usize {
        kept_qubits.iter().enumerate().fold(0, |acc, (k, &q)| acc | (usize::from(bits & qubit_bit(q) != 0) << k))
    };
    // Maps a full index to (reduced index, environment index).
    let n_env_cav = if keep_cavity { 1 } else { layout.cavity_dim() };
    let split = |idx: usize| -> (usize, usize) {
        let (p, bits) = layout.split(idx);
        let env_q = traced_qubits.iter().enumerate().fold(0, |acc, (k, &q)| acc | (usize::from(bits & qubit_bit(q) != 0) << k));
        let red_p = if keep_cavity { p } else { 0 };
        let env = if keep_cavity { env_q } else { p + n_env_cav * env_q };
        (out_layout.index(red_p, kept_bits(bits)), env)
    };
    let dim = layout.dim();
    let map: Vec<(usize, usize)> = (0..dim).map(split).collect();
    let rd = out_layout.dim();
    let mut red = Array2::<C64>::zeros((rd, rd));
    match state.data() {
        StateData::Ket(v) => {
            // Group amplitudes by environment index.
            let n_env = dim / rd;
            let mut psi = Array2::<C64>::zeros((n_env, rd));
            for (i, &(r, e)) in map.iter().enumerate() {
                psi[[e, r]] = v[i];
            }
            for e in 0..n_env {
                let row = psi.row(e);
                for i in 0..rd {
                    if row[i] == ZERO {
                        continue;
                    }
                    for j in 0..rd {
                        red[[i, j]] += row[i] * row[j].conj();
                    }
                }
            }
        }
        StateData::Density(rho) => {
            for i in 0..dim {
                let (ri, ei) = map[i];
                for j in 0..dim {
                    let (rj, ej) = map[j];
                    if ei == ej {
                        red[[ri, rj]] += rho[[i, j]];
                    }
                }
            }
        }
    }
    Ok(QuantumState::density_unchecked(out_layout, red))
}

/// Squared overlap: `|⟨a|b⟩|²` for kets, `⟨ψ|ρ|ψ⟩` for ket against density,
/// `Tr(ρσ)` for two density matrices.
pub fn overlap_fidelity(a: &QuantumState, b: &QuantumState) -> Result<f64, HilbertError> {
    if a.layout() != b.layout() {
        return Err(HilbertError::LayoutMismatch(format!("{:?} vs {:?}", a.layout(), b.layout())));
    }
    let f = match (a.data(), b.data()) {
        (StateData::Ket(x), StateData::Ket(y)) => x.iter().zip(y.iter()).map(|(p, q)| p.conj() * q).sum::<C64>().norm_sqr(),
        (StateData::Ket(x), StateData::Density(r)) | (StateData::Density(r), StateData::Ket(x)) => {
            let rx = r.dot(x);
            x.iter().zip(rx.iter()).map(|(p, q)| p.conj() * q).sum::<C64>().re
        }
        (StateData::Density(r), StateData::Density(s)) => {
            let n = r.nrows();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += (r[[i, j]] * s[[j, i]]).re;
                }
            }
            acc
        }
    };
    Ok(f.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn layout_dimension_and_index_order() {
        let l = SpaceLayout::new(4, 2).unwrap();
        assert_eq!(l.dim(), 20);
        assert_eq!(l.index(1, 0b10), 6);
        assert_eq!(l.split(6), (1, 0b10));
        assert!(SpaceLayout::new(0, 2).is_err());
        assert!(SpaceLayout::new(3, 0).is_err());
    }

    #[test]
    fn labels_read_highest_qubit_first() {
        assert_eq!(qubit_label(0b01, 2), "01");
        assert_eq!(qubit_label(0b10, 2), "10");
        assert_eq!(parse_qubit_label("10"), Some(0b10));
        assert_eq!(parse_qubit_label("1x"), None);
    }

    #[test]
    fn ladder_matrix_elements() {
        let l = SpaceLayout::new(5, 1).unwrap();
        let m = mode_operators(l).unwrap();
        assert_abs_diff_eq!(m.a_dag.get(l.index(1, 0), l.index(0, 0)).re, 1.0);
        assert_abs_diff_eq!(m.a.get(l.index(2, 1), l.index(3, 1)).re, 3f64.sqrt(), epsilon = 1e-15);
        // Top Fock level: a† cannot raise beyond the cutoff, so a a† vanishes there
        // instead of giving N + 1.
        let top = QuantumState::basis(l, 5, 0);
        let aad = m.a.matmul(&m.a_dag).unwrap();
        let ada = m.a_dag.matmul(&m.a).unwrap();
        assert_abs_diff_eq!(top.expectation(&m.number).unwrap().re, 5.0);
        assert_abs_diff_eq!(top.expectation(&ada).unwrap().re, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(top.expectation(&aad).unwrap().re, 0.0);
        let below = QuantumState::basis(l, 4, 0);
        assert_abs_diff_eq!(below.expectation(&aad).unwrap().re, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn coherent_mean_photon_number() {
        let l = SpaceLayout::new(100, 1).unwrap();
        let s = coherent_state(c(3f64.sqrt(), 0.0), l).unwrap();
        assert_abs_diff_eq!(s.mean_photon_number(), 3.0, epsilon = 1e-10);
        let vac = coherent_state(ZERO, l).unwrap();
        assert_abs_diff_eq!(vac.as_ket().unwrap()[0].re, 1.0);
    }

    #[test]
    fn coherent_guard() {
        let l = SpaceLayout::new(9, 1).unwrap();
        assert!(matches!(coherent_state(c(2.0, 0.0), l), Err(HilbertError::CutoffTooSmall { .. })));
        assert!(coherent_state(c(3f64.sqrt(), 0.0), l).is_ok());
    }

    #[test]
    fn vacuum_overlap_with_doubled_amplitude() {
        let l = SpaceLayout::new(40, 1).unwrap();
        for (nbar, expect) in [(1.5f64, 2.5e-3), (2.0, 3.3e-4)] {
            let alpha = nbar.sqrt();
            let s = coherent_state(c(2.0 * alpha, 0.0), l).unwrap();
            let p0 = s.as_ket().unwrap()[0].norm_sqr();
            assert_abs_diff_eq!(p0, (-4.0 * nbar).exp(), epsilon = 1e-12);
            assert!((p0 - expect).abs() / expect < 0.02);
        }
    }

    #[test]
    fn displacement_inverse_and_unitarity() {
        let l = SpaceLayout::new(30, 1).unwrap();
        let alpha = c(0.7, -0.4);
        let d = displacement_operator(alpha, l).unwrap();
        let dm = displacement_operator(-alpha, l).unwrap();
        let p = dm.matmul(&d).unwrap().sub(&Operator::identity(l)).unwrap();
        assert!(p.triplets().iter().all(|t| t.2.norm() < 1e-10));
        assert!(d.unitary_defect() < 1e-10);
    }

    #[test]
    fn displacement_rotation_covariance() {
        let cutoff = 40;
        let phi = std::f64::consts::PI / 3.0;
        let d = displacement_matrix(c(1.0, 0.0), cutoff);
        let dr = displacement_matrix(C64::from_polar(1.0, phi), cutoff);
        for r in 0..=cutoff {
            for k in 0..=cutoff {
                let lhs = C64::from_polar(1.0, phi * r as f64) * d[[r, k]] * C64::from_polar(1.0, -phi * k as f64);
                assert!((lhs - dr[[r, k]]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn displaced_vacuum_matches_fock_formula() {
        let l = SpaceLayout::new(60, 1).unwrap();
        let alpha = c(3f64.sqrt(), 0.0);
        let d = displacement_operator(alpha, l).unwrap();
        let v = d.apply(QuantumState::basis(l, 0, 0).as_ket().unwrap().view());
        // Independent oracle: log-space Poisson amplitudes.
        let mut overlap = ZERO;
        for n in 0..=60usize {
            let ln = -alpha.norm_sqr() / 2.0 + n as f64 * alpha.re.ln() - (1..=n).map(|k| (k as f64).ln()).sum::<f64>() / 2.0;
            overlap += ln.exp() * v[l.index(n, 0)];
        }
        assert_abs_diff_eq!(overlap.norm_sqr(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn partial_trace_of_product_state() {
        let l = SpaceLayout::new(20, 2).unwrap();
        let amps = coherent_amplitudes(c(1.0, 0.5), 20);
        let mut v = Array1::zeros(l.dim());
        for n in 0..=20 {
            v[l.index(n, 0b01)] = amps[n];
        }
        let s = QuantumState::ket(l, v).unwrap();
        let rc = partial_trace(&s, &[Factor::Cavity]).unwrap();
        let expect = QuantumState::ket(l.cavity_layout().unwrap(), amps.clone()).unwrap();
        assert_abs_diff_eq!(overlap_fidelity(&expect, &rc).unwrap(), 1.0, epsilon = 1e-12);
        let rq = partial_trace(&s.to_density(), &[Factor::Qubit(1), Factor::Qubit(2)]).unwrap();
        let m = rq.to_density_matrix();
        assert_abs_diff_eq!(m[[1, 1]].re, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn partial_trace_of_bell_pair() {
        let l = SpaceLayout::new(2, 2).unwrap();
        let mut v = Array1::zeros(l.dim());
        let h = std::f64::consts::FRAC_1_SQRT_2;
        v[l.index(0, 0b00)] = c(h, 0.0);
        v[l.index(0, 0b11)] = c(h, 0.0);
        let s = QuantumState::ket(l, v).unwrap();
        let r = partial_trace(&s, &[Factor::Qubit(2)]).unwrap();
        let ev = hermitian_eigenvalues(r.to_density_matrix().view());
        assert_abs_diff_eq!(ev[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1], 0.5, epsilon = 1e-12);
        assert!(matches!(partial_trace(&s, &[]), Err(HilbertError::BadFactorSet)));
        assert!(matches!(partial_trace(&s, &[Factor::Qubit(3)]), Err(HilbertError::BadFactorSet)));
    }

    #[test]
    fn separated_branches_trace_to_two_coherent_states() {
        let l = SpaceLayout::new(30, 2).unwrap();
        let alpha = c(3f64.sqrt(), 0.0);
        let plus = coherent_amplitudes(alpha, 30);
        let minus = coherent_amplitudes(-alpha, 30);
        let mut v = Array1::zeros(l.dim());
        for n in 0..=30 {
            for bits in 0..4usize {
                let amp = if bits & 0b10 == 0 { plus[n] } else { minus[n] };
                v[l.index(n, bits)] = amp * 0.5;
            }
        }
        let s = QuantumState::ket(l, v.clone()).unwrap();
        let r = partial_trace(&s, &[Factor::Cavity]).unwrap().to_density_matrix();
        // Brute-force oracle summing over the register index directly.
        for i in 0..=30 {
            for j in 0..=30 {
                let mut acc = ZERO;
                for bits in 0..4 {
                    acc += v[l.index(i, bits)] * v[l.index(j, bits)].conj();
                }
                assert!((acc - r[[i, j]]).norm() < 1e-14);
                let mix = 0.5 * (plus[i] * plus[j].conj() + minus[i] * minus[j].conj());
                assert!((mix - r[[i, j]]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn overlaps() {
        let l = SpaceLayout::new(40, 1).unwrap();
        let a = QuantumState::basis(l, 2, 1);
        assert_abs_diff_eq!(overlap_fidelity(&a, &a).unwrap(), 1.0);
        assert_abs_diff_eq!(overlap_fidelity(&a, &QuantumState::basis(l, 3, 1)).unwrap(), 0.0);
        let coh = coherent_state(c(1.5f64.sqrt(), 0.0), l).unwrap();
        let rc = partial_trace(&coh, &[Factor::Cavity]).unwrap();
        let vac = QuantumState::basis(l.cavity_layout().unwrap(), 0, 0);
        assert_abs_diff_eq!(overlap_fidelity(&vac, &rc).unwrap(), (-1.5f64).exp(), epsilon = 1e-12);
        let other = SpaceLayout::new(41, 1).unwrap();
        assert!(overlap_fidelity(&a, &QuantumState::basis(other, 0, 0)).is_err());
    }

    #[test]
    fn density_validation() {
        let l = SpaceLayout::new(2, 1).unwrap();
        let mut r = Array2::zeros((6, 6));
        r[[0, 0]] = c(0.5, 0.0);
        assert!(QuantumState::density(l, r.clone()).is_err());
        r[[1, 1]] = c(0.5, 0.0);
        assert!(QuantumState::density(l, r.clone()).is_ok());
        r[[0, 1]] = c(0.1, 0.0);
        assert!(QuantumState::density(l, r).is_err());
    }

    #[test]
    fn truncation_tail_flagging() {
        let l = SpaceLayout::new(12, 1).unwrap();
        assert!(coherent_state(c(0.5, 0.0), l).unwrap().truncation_warning().is_none());
        assert!(coherent_state(c(2.0, 0.0), l).unwrap().truncation_warning().is_some());
    }

    #[test]
    fn dense_products_match() {
        let l = SpaceLayout::new(3, 1).unwrap();
        let m = mode_operators(l).unwrap();
        let x = Array2::from_shape_fn((8, 8), |(i, j)| c(i as f64 - j as f64 * 0.3, (i * j) as f64 * 0.1));
        let ad = m.a.to_dense();
        let lhs = m.a.mul_dense(x.view());
        let rhs = m.a.dense_mul(x.view());
        assert!((lhs - ad.dot(&x)).iter().all(|v| v.norm() < 1e-12));
        assert!((rhs - x.dot(&ad)).iter().all(|v| v.norm() < 1e-12));
    }
}

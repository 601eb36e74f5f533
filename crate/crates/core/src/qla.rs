//! Dense complex linear algebra for one to four qubits.
//!
//! Everything is small and dense: operators live on 2/4/8-dimensional
//! spaces, states transiently up to dimension 16. Basis ordering per qubit
//! is {|1⟩, |0⟩} (excited first), so σz = diag(+1, −1), the ground state
//! |0⟩ is the −1 eigenvector of σz, and multi-qubit bases read
//! {|11⟩, |10⟩, |01⟩, |00⟩}. Kronecker products put the left factor on the
//! more significant position.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub const TOL_UNITARY: f64 = 1e-12;
pub const TOL_HERMITIAN: f64 = 1e-12;
pub const TOL_STATE: f64 = 1e-12;
/// Mixed states may carry tiny negative eigenvalue dust from round-off.
pub const TOL_EIGEN_DUST: f64 = 1e-10;

const MAX_OP_DIM: usize = 8;
const MAX_STATE_DIM: usize = 16;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Largest entry magnitude; the residual norm used throughout.
pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn is_supported_op_dim(d: usize) -> bool {
    d == 2 || d == 4 || d == 8
}

fn is_supported_state_dim(d: usize) -> bool {
    d.is_power_of_two() && (2..=MAX_STATE_DIM).contains(&d)
}

// ---------------------------------------------------------------------------
// Operators

#[derive(Clone, Debug)]
pub struct QOperator {
    dim: usize,
    mat: DMatrix<C64>,
}

impl QOperator {
    pub fn new(mat: DMatrix<C64>) -> Result<Self> {
        let (r, cols) = mat.shape();
        if r != cols {
            return Err(Error::InvalidOperator(format!("non-square shape {r}x{cols}")));
        }
        if !is_supported_op_dim(r) {
            return Err(Error::Dimension(r));
        }
        Ok(Self { dim: r, mat })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim))
    }

    /// Row-major entry list, mostly for writing 4×4 generators out verbatim.
    pub fn from_rows(dim: usize, entries: &[C64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimMismatch(format!(
                "{} entries for a {dim}x{dim} operator",
                entries.len()
            )));
        }
        Ok(Self::new(DMatrix::from_row_slice(dim, dim, entries))?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.mat
    }

    pub fn dagger(&self) -> Self {
        Self { dim: self.dim, mat: self.mat.adjoint() }
    }

    pub fn is_unitary(&self) -> bool {
        let id = DMatrix::<C64>::identity(self.dim, self.dim);
        max_abs(&(self.mat.adjoint() * &self.mat - id)) <= TOL_UNITARY
    }

    pub fn is_hermitian(&self) -> bool {
        max_abs(&(&self.mat - self.mat.adjoint())) <= TOL_HERMITIAN
    }

    pub fn mul(&self, rhs: &QOperator) -> Result<Self> {
        if self.dim != rhs.dim {
            return Err(Error::DimMismatch(format!("{} vs {}", self.dim, rhs.dim)));
        }
        Self::new(&self.mat * &rhs.mat)
    }

    /// U ρ U† for mixed states, U|ψ⟩ for pure ones.
    pub fn apply(&self, state: &QState) -> Result<QState> {
        if self.dim != state.dim() {
            return Err(Error::DimMismatch(format!("{} vs {}", self.dim, state.dim())));
        }
        match &state.data {
            StateData::Pure(v) => QState::pure(&self.mat * v),
            StateData::Mixed(rho) => QState::mixed(&self.mat * rho * self.mat.adjoint()),
        }
    }
}

pub fn sigma_x() -> QOperator {
    QOperator::from_rows(2, &[cr(0.0), cr(1.0), cr(1.0), cr(0.0)]).unwrap()
}

pub fn sigma_y() -> QOperator {
    QOperator::from_rows(2, &[cr(0.0), c(0.0, -1.0), c(0.0, 1.0), cr(0.0)]).unwrap()
}

pub fn sigma_z() -> QOperator {
    QOperator::from_rows(2, &[cr(1.0), cr(0.0), cr(0.0), cr(-1.0)]).unwrap()
}

/// σ₊ = |1⟩⟨0|.
pub fn sigma_plus() -> QOperator {
    QOperator::from_rows(2, &[cr(0.0), cr(1.0), cr(0.0), cr(0.0)]).unwrap()
}

/// σ₋ = |0⟩⟨1|.
pub fn sigma_minus() -> QOperator {
    QOperator::from_rows(2, &[cr(0.0), cr(0.0), cr(1.0), cr(0.0)]).unwrap()
}

// ---------------------------------------------------------------------------
// States

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateKind {
    Pure,
    Mixed,
}

#[derive(Clone, Debug)]
enum StateData {
    Pure(DVector<C64>),
    Mixed(DMatrix<C64>),
}

#[derive(Clone, Debug)]
pub struct QState {
    dim: usize,
    data: StateData,
}

impl QState {
    pub fn pure(amplitudes: DVector<C64>) -> Result<Self> {
        let dim = amplitudes.len();
        if !is_supported_state_dim(dim) {
            return Err(Error::Dimension(dim));
        }
        let norm = amplitudes.norm();
        if (norm - 1.0).abs() > TOL_STATE {
            return Err(Error::InvalidState(format!("pure state norm {norm}")));
        }
        Ok(Self { dim, data: StateData::Pure(amplitudes) })
    }

    pub fn mixed(rho: DMatrix<C64>) -> Result<Self> {
        let (r, cols) = rho.shape();
        if r != cols {
            return Err(Error::InvalidState(format!("non-square density {r}x{cols}")));
        }
        if !is_supported_state_dim(r) {
            return Err(Error::Dimension(r));
        }
        let tr = rho.diagonal().sum();
        if (tr.re - 1.0).abs() > TOL_STATE || tr.im.abs() > TOL_STATE {
            return Err(Error::InvalidState(format!("density trace {tr}")));
        }
        if max_abs(&(&rho - rho.adjoint())) > TOL_HERMITIAN {
            return Err(Error::InvalidState("density not Hermitian".into()));
        }
        let min_eig = rho
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -TOL_EIGEN_DUST {
            return Err(Error::InvalidState(format!("negative eigenvalue {min_eig}")));
        }
        Ok(Self { dim: r, data: StateData::Mixed(rho) })
    }

    /// Computational basis state |index⟩ in the {|1⟩,|0⟩}-per-qubit ordering.
    pub fn basis_state(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::DimMismatch(format!("index {index} in dim {dim}")));
        }
        let mut v = DVector::zeros(dim);
        v[index] = cr(1.0);
        Self::pure(v)
    }

    /// Single-qubit ground state |0⟩ (the −1 eigenvector of σz).
    pub fn ground() -> Self {
        Self::basis_state(2, 1).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> StateKind {
        match self.data {
            StateData::Pure(_) => StateKind::Pure,
            StateData::Mixed(_) => StateKind::Mixed,
        }
    }

    pub fn is_pure(&self) -> bool {
        self.kind() == StateKind::Pure
    }

    pub fn amplitudes(&self) -> Option<&DVector<C64>> {
        match &self.data {
            StateData::Pure(v) => Some(v),
            StateData::Mixed(_) => None,
        }
    }

    pub fn density(&self) -> DMatrix<C64> {
        match &self.data {
            StateData::Pure(v) => v * v.adjoint(),
            StateData::Mixed(rho) => rho.clone(),
        }
    }

    pub fn purity(&self) -> f64 {
        match &self.data {
            StateData::Pure(_) => 1.0,
            StateData::Mixed(rho) => (rho * rho).diagonal().sum().re,
        }
    }
}

// ---------------------------------------------------------------------------
// Products and traces

pub fn kron(a: &QOperator, b: &QOperator) -> Result<QOperator> {
    let d = a.dim * b.dim;
    if d > MAX_OP_DIM {
        return Err(Error::Dimension(d));
    }
    QOperator::new(a.mat.kronecker(&b.mat))
}

pub fn kron_states(a: &QState, b: &QState) -> Result<QState> {
    let d = a.dim * b.dim;
    if d > MAX_STATE_DIM {
        return Err(Error::Dimension(d));
    }
    match (&a.data, &b.data) {
        (StateData::Pure(u), StateData::Pure(v)) => QState::pure(u.kronecker(v)),
        _ => QState::mixed(a.density().kronecker(&b.density())),
    }
}

/// Trace out every subsystem not listed in `keep`; kept subsystems stay in
/// their original order. `dims` lists subsystem dimensions, most significant
/// (leftmost Kronecker factor) first.
pub fn partial_trace(state: &QState, dims: &[usize], keep: &[usize]) -> Result<QState> {
    let total: usize = dims.iter().product();
    if total != state.dim {
        return Err(Error::DimMismatch(format!(
            "dims product {total} vs state dim {}",
            state.dim
        )));
    }
    if keep.is_empty() || keep.iter().any(|&k| k >= dims.len()) {
        return Err(Error::DimMismatch("bad keep set".into()));
    }
    let mut keep_sorted = keep.to_vec();
    keep_sorted.sort_unstable();
    keep_sorted.dedup();
    if keep_sorted.len() != keep.len() {
        return Err(Error::DimMismatch("duplicate keep indices".into()));
    }

    // Strides of each subsystem in the flattened index, left factor most
    // significant.
    let n = dims.len();
    let mut strides = vec![1usize; n];
    for i in (0..n - 1).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let traced: Vec<usize> = (0..n).filter(|i| !keep_sorted.contains(i)).collect();

    let offsets = |subs: &[usize]| -> Vec<usize> {
        let mut out = vec![0usize];
        for &s in subs {
            let mut next = Vec::with_capacity(out.len() * dims[s]);
            for &base in &out {
                for d in 0..dims[s] {
                    next.push(base + d * strides[s]);
                }
            }
            out = next;
        }
        out
    };
    let kept_offsets = offsets(&keep_sorted);
    let traced_offsets = offsets(&traced);

    let rho = state.density();
    let kd = kept_offsets.len();
    let mut out = DMatrix::<C64>::zeros(kd, kd);
    for (a, &ra) in kept_offsets.iter().enumerate() {
        for (b, &rb) in kept_offsets.iter().enumerate() {
            let mut acc = C64::default();
            for &t in &traced_offsets {
                acc += rho[(ra + t, rb + t)];
            }
            out[(a, b)] = acc;
        }
    }
    QState::mixed(out)
}

/// exp(−i·scale·h) for Hermitian h, via eigendecomposition.
pub fn expm_hermitian(h: &QOperator, scale: f64) -> Result<QOperator> {
    if !h.is_hermitian() {
        return Err(Error::InvalidOperator("expm_hermitian needs a Hermitian input".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(h.mat.clone());
    let phases = DVector::from_iterator(
        h.dim,
        eig.eigenvalues.iter().map(|&l| C64::from_polar(1.0, -scale * l)),
    );
    let v = &eig.eigenvectors;
    let u = v * DMatrix::from_diagonal(&phases) * v.adjoint();
    QOperator::new(u)
}

// ---------------------------------------------------------------------------
// Schmidt decomposition

#[derive(Clone, Debug)]
pub struct SchmidtDecomposition {
    /// Sorted descending, real and nonnegative; Σλᵢ² = 1.
    pub coefficients: Vec<f64>,
    pub left: Vec<DVector<C64>>,
    pub right: Vec<DVector<C64>>,
}

impl SchmidtDecomposition {
    pub fn reconstruct(&self) -> DVector<C64> {
        let d = self.left[0].len() * self.right[0].len();
        let mut psi = DVector::<C64>::zeros(d);
        for ((&l, u), w) in self.coefficients.iter().zip(&self.left).zip(&self.right) {
            psi += u.kronecker(w).scale(l);
        }
        psi
    }
}

/// Bipartite Schmidt decomposition of a pure state, left block of dimension
/// `d_left` on the more significant factor. Phases are fixed by making each
/// left vector's first non-negligible amplitude real positive.
pub fn schmidt(state: &QState, d_left: usize, d_right: usize) -> Result<SchmidtDecomposition> {
    let psi = state
        .amplitudes()
        .ok_or_else(|| Error::InvalidState("schmidt decomposition needs a pure state".into()))?;
    if d_left * d_right != state.dim {
        return Err(Error::DimMismatch(format!(
            "{d_left}x{d_right} split of dim {}",
            state.dim
        )));
    }
    let m = DMatrix::from_fn(d_left, d_right, |i, j| psi[i * d_right + j]);
    let svd = nalgebra::SVD::new(m, true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");

    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut coefficients = Vec::with_capacity(r);
    let mut left = Vec::with_capacity(r);
    let mut right = Vec::with_capacity(r);
    for &k in &order {
        let lam = svd.singular_values[k];
        let mut uk: DVector<C64> = u.column(k).into_owned();
        let mut wk: DVector<C64> = v_t.row(k).transpose();
        // ψ = Σ λ u ⊗ w with w the corresponding row of V†; rotate the pair so
        // u's leading amplitude is real positive.
        if let Some(first) = uk.iter().find(|z| z.norm() > 1e-12).copied() {
            let phase = first / first.norm();
            uk = uk.map(|z| z / phase);
            wk = wk.map(|z| z * phase);
        }
        coefficients.push(lam);
        left.push(uk);
        right.push(wk);
    }
    Ok(SchmidtDecomposition { coefficients, left, right })
}

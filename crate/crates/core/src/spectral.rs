//! Full eigendecomposition of the universe Hamiltonian and exact time
//! propagation from it.
//!
//! `ψ(t) = V e^{-iΛt} Vᵀ ψ(0)`: the eigenbasis amplitudes `c = Vᵀψ(0)` are
//! computed once per initial state and every time sample is evaluated
//! directly, so there is no step-to-step error accumulation. Because `H` is
//! real, complex amplitudes are kept as separate real and imaginary vectors
//! acting through the real `V`.
//!
//! Eigenvector signs are normalized so that the largest-magnitude entry of
//! each column is positive; near-ties (within a relative `1e-12`) go to the
//! lowest index. Degenerate subspaces are left as the eigensolver returns
//! them, which does not affect any observable.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::evd::{self_adjoint_evd, self_adjoint_evd_scratch, ComputeEigenvectors};
use faer::linalg::matmul::matmul;
use faer::diag::Diag;
use faer::{Accum, Mat, MatRef, Par};

use crate::bath::{read_f64s, read_u64, BathRealization};
use crate::error::{Error, Result};
use crate::hashing::Hash32;
use crate::model::{InitialCondition, PhaseMode, SystemSpec};
use crate::rng::{stream, SeededStream};
use crate::universe::UniverseHamiltonian;

pub const QBS_MAGIC: &[u8; 4] = b"QBS1";
pub const QBS_VERSION: u32 = 1;

/// Maximum dimension accepted by [`reference_propagate`].
pub const REFERENCE_MAX_DIM: usize = 512;

/// Time samples per propagation block. Fixed so that results never depend on
/// how blocks are distributed over threads.
pub const TIME_BLOCK: usize = 64;

const SIGN_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    /// Ascending eigenvalues `Λ`.
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Mat<f64>,
    /// Hash of the Hamiltonian-defining configuration.
    pub provenance: Hash32,
}

/// Symmetric eigendecomposition of `a` (only the lower triangle is read),
/// sequential so the result is independent of the thread count.
pub fn diagonalize_matrix(a: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "matrix is {}x{}, not square",
            n,
            a.ncols()
        )));
    }
    let mut s = Diag::<f64>::zeros(n);
    let mut u = Mat::<f64>::zeros(n, n);
    let par = Par::Seq;
    let mut mem = MemBuffer::new(self_adjoint_evd_scratch::<f64>(
        n,
        ComputeEigenvectors::Yes,
        par,
        Default::default(),
    ));
    self_adjoint_evd(
        a,
        s.as_mut(),
        Some(u.as_mut()),
        par,
        MemStack::new(&mut mem),
        Default::default(),
    )
    .map_err(|e| Error::Eigensolver {
        dim: n,
        reason: format!("{e:?}"),
    })?;
    drop(mem);

    let eigenvalues: Vec<f64> = s.column_vector().iter().copied().collect();
    if let Some(k) = eigenvalues.iter().position(|v| !v.is_finite()) {
        return Err(Error::Eigensolver {
            dim: n,
            reason: format!("non-finite eigenvalue at index {k}"),
        });
    }
    normalize_signs(&mut u);
    Ok((eigenvalues, u))
}

fn normalize_signs(v: &mut Mat<f64>) {
    for k in 0..v.ncols() {
        let col = v.col_as_slice_mut(k);
        let max = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let threshold = max * (1.0 - SIGN_TIE_TOLERANCE);
        if let Some(pivot) = col.iter().position(|x| x.abs() >= threshold) {
            if col[pivot] < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
}

impl SpectralDecomposition {
    pub fn diagonalize(h: &UniverseHamiltonian, provenance: Hash32) -> Result<Self> {
        let (eigenvalues, eigenvectors) = diagonalize_matrix(h.h.as_ref())?;
        Ok(SpectralDecomposition {
            eigenvalues,
            eigenvectors,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `max |VᵀV - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let v = self.eigenvectors.as_ref();
        let n = self.dim();
        let mut gram = Mat::<f64>::zeros(n, n);
        matmul(gram.as_mut(), Accum::Replace, v.transpose(), v, 1.0, Par::Seq);
        let mut err = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram[(i, j)] - target).abs());
            }
        }
        err
    }

    /// `max |V diag(Λ) Vᵀ - h|`.
    pub fn reconstruction_error(&self, h: MatRef<'_, f64>) -> f64 {
        let n = self.dim();
        let v = self.eigenvectors.as_ref();
        let scaled = Mat::from_fn(n, n, |i, k| v[(i, k)] * self.eigenvalues[k]);
        let mut rebuilt = Mat::<f64>::zeros(n, n);
        matmul(rebuilt.as_mut(), Accum::Replace, scaled.as_ref(), v.transpose(), 1.0, Par::Seq);
        let mut err = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                err = err.max((rebuilt[(i, j)] - h[(i, j)]).abs());
            }
        }
        err
    }

    /// Writes the `QBS1` cache: magic, version (u32), `D` (u64), provenance
    /// hash (32 bytes), `Λ` (D values), `V` column-major (D² values); all
    /// little-endian.
    pub fn write_qbs(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::with_capacity(1 << 20, file);
        let io = |e| Error::io(path, e);
        w.write_all(QBS_MAGIC).map_err(io)?;
        w.write_all(&QBS_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.provenance).map_err(io)?;
        for v in &self.eigenvalues {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        let mut bytes = Vec::with_capacity(self.dim() * 8);
        for k in 0..self.dim() {
            bytes.clear();
            for v in self.eigenvectors.col_as_slice(k) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a `QBS1` cache; a provenance mismatch is a cache error.
    pub fn read_qbs(path: &Path, expected: &Hash32) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::cache(path, format!("cannot open spectral cache: {e}")))?;
        let mut r = BufReader::with_capacity(1 << 20, file);
        let bad = |why: &str| Error::cache(path, why.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != QBS_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version).map_err(|_| bad("truncated header"))?;
        if u32::from_le_bytes(version) != QBS_VERSION {
            return Err(bad("unsupported cache version"));
        }
        let dim = read_u64(&mut r).map_err(|_| bad("truncated header"))? as usize;
        let mut provenance: Hash32 = [0; 32];
        r.read_exact(&mut provenance).map_err(|_| bad("truncated header"))?;
        if &provenance != expected {
            return Err(bad("config hash mismatch"));
        }
        let eigenvalues = read_f64s(&mut r, dim).map_err(|_| bad("truncated eigenvalues"))?;
        let mut eigenvectors = Mat::<f64>::zeros(dim, dim);
        for k in 0..dim {
            let col = read_f64s(&mut r, dim).map_err(|_| bad("truncated eigenvectors"))?;
            eigenvectors.col_as_slice_mut(k).copy_from_slice(&col);
        }
        Ok(SpectralDecomposition {
            eigenvalues,
            eigenvectors,
            provenance,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Basis {
    JointProduct,
    UniverseEigen,
}

/// A pure state of the universe with amplitudes `re + i·im`.
#[derive(Clone, Debug, PartialEq)]
pub struct UniverseState {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub basis: Basis,
    pub time: f64,
    pub origin: Option<InitialCondition>,
}

impl UniverseState {
    pub fn basis_state(dim: usize, k: usize) -> Self {
        let mut re = vec![0.0; dim];
        re[k] = 1.0;
        UniverseState {
            re,
            im: vec![0.0; dim],
            basis: Basis::JointProduct,
            time: 0.0,
            origin: None,
        }
    }

    pub fn from_parts(re: Vec<f64>, im: Vec<f64>) -> Self {
        assert_eq!(re.len(), im.len());
        UniverseState {
            re,
            im,
            basis: Basis::JointProduct,
            time: 0.0,
            origin: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.re.len()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(a, b)| a * a + b * b).sum()
    }

    pub fn is_real(&self) -> bool {
        self.im.iter().all(|&v| v == 0.0)
    }

    /// `‖self - other‖₂`.
    pub fn distance(&self, other: &UniverseState) -> f64 {
        let re: f64 = self.re.iter().zip(&other.re).map(|(a, b)| (a - b).powi(2)).sum();
        let im: f64 = self.im.iter().zip(&other.im).map(|(a, b)| (a - b).powi(2)).sum();
        (re + im).sqrt()
    }
}

/// `ψ_{(s₀, b)} = e^{iθ_b} / √M` over the resolved bath window, zero
/// elsewhere. Phases are drawn in ascending `b` from the `phase_seed` stream.
pub fn prepare_initial(
    system: &SystemSpec,
    bath: &BathRealization,
    init: &InitialCondition,
) -> Result<UniverseState> {
    let d = system.dim();
    let n = bath.n_states();
    if init.system_level >= d {
        return Err(Error::InvalidInput(format!(
            "initial system level {} outside 0..{d}",
            init.system_level
        )));
    }
    let window = bath.resolve_window(&init.bath_window)?;
    let amp = 1.0 / (window.len() as f64).sqrt();
    let mut rng = SeededStream::new(init.phase_seed, stream::INITIAL_PHASES);
    let mut re = vec![0.0; d * n];
    let mut im = vec![0.0; d * n];
    let offset = init.system_level * n;
    for b in window {
        let k = offset + b;
        match init.phase_mode {
            PhaseMode::ComplexPhases => {
                let theta = std::f64::consts::TAU * rng.uniform();
                re[k] = amp * theta.cos();
                im[k] = amp * theta.sin();
            }
            PhaseMode::RandomSigns => {
                re[k] = if rng.coin() { -amp } else { amp };
            }
        }
    }
    Ok(UniverseState {
        re,
        im,
        basis: Basis::JointProduct,
        time: 0.0,
        origin: Some(init.clone()),
    })
}

fn apply(v: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let mut out = Mat::<f64>::zeros(v.nrows(), 1);
    let rhs = MatRef::from_column_major_slice(x, x.len(), 1);
    matmul(out.as_mut(), Accum::Replace, v, rhs, 1.0, Par::Seq);
    out.col_as_slice(0).to_vec()
}

/// Amplitudes in the universe eigenbasis, `c = Vᵀψ`.
pub fn to_eigenbasis(sd: &SpectralDecomposition, psi: &UniverseState) -> UniverseState {
    if psi.basis == Basis::UniverseEigen {
        return psi.clone();
    }
    let vt = sd.eigenvectors.as_ref().transpose();
    UniverseState {
        re: apply(vt, &psi.re),
        im: apply(vt, &psi.im),
        basis: Basis::UniverseEigen,
        time: psi.time,
        origin: psi.origin.clone(),
    }
}

/// Back to the joint product basis, `ψ = V c`.
pub fn to_product_basis(sd: &SpectralDecomposition, psi: &UniverseState) -> UniverseState {
    if psi.basis == Basis::JointProduct {
        return psi.clone();
    }
    let v = sd.eigenvectors.as_ref();
    UniverseState {
        re: apply(v, &psi.re),
        im: apply(v, &psi.im),
        basis: Basis::JointProduct,
        time: psi.time,
        origin: psi.origin.clone(),
    }
}

/// `O_k = |⟨E_k|ψ₀⟩|²`.
pub fn overlap_distribution(sd: &SpectralDecomposition, psi0: &UniverseState) -> Vec<f64> {
    let c = to_eigenbasis(sd, psi0);
    c.re.iter().zip(&c.im).map(|(a, b)| a * a + b * b).collect()
}

/// Exact propagation by `t` (relative to `psi0.time`), returned in the basis
/// of `psi0`.
pub fn propagate(sd: &SpectralDecomposition, psi0: &UniverseState, t: f64) -> UniverseState {
    let mut c = to_eigenbasis(sd, psi0);
    for (k, &lambda) in sd.eigenvalues.iter().enumerate() {
        let (sin, cos) = (lambda * t).sin_cos();
        let (a, b) = (c.re[k], c.im[k]);
        c.re[k] = cos * a + sin * b;
        c.im[k] = cos * b - sin * a;
    }
    c.time = psi0.time + t;
    match psi0.basis {
        Basis::UniverseEigen => c,
        Basis::JointProduct => to_product_basis(sd, &c),
    }
}

/// Evaluates `ψ(t)` for many times from one set of eigenbasis amplitudes.
pub struct Propagator<'a> {
    sd: &'a SpectralDecomposition,
    c_re: Vec<f64>,
    c_im: Vec<f64>,
}

impl<'a> Propagator<'a> {
    pub fn new(sd: &'a SpectralDecomposition, psi0: &UniverseState) -> Self {
        let c = to_eigenbasis(sd, psi0);
        Propagator {
            sd,
            c_re: c.re,
            c_im: c.im,
        }
    }

    pub fn eigen_amplitudes(&self) -> (&[f64], &[f64]) {
        (&self.c_re, &self.c_im)
    }

    /// Product-basis states for `times` as one `D x 2B` matrix: columns
    /// `0..B` hold real parts, `B..2B` the imaginary parts.
    pub fn evolve_block(&self, times: &[f64]) -> Mat<f64> {
        let dim = self.sd.dim();
        let b = times.len();
        let mut phased = Mat::<f64>::zeros(dim, 2 * b);
        for (col, &t) in times.iter().enumerate() {
            for k in 0..dim {
                let (sin, cos) = (self.sd.eigenvalues[k] * t).sin_cos();
                let (a, im) = (self.c_re[k], self.c_im[k]);
                phased[(k, col)] = cos * a + sin * im;
                phased[(k, b + col)] = cos * im - sin * a;
            }
        }
        let mut out = Mat::<f64>::zeros(dim, 2 * b);
        matmul(
            out.as_mut(),
            Accum::Replace,
            self.sd.eigenvectors.as_ref(),
            phased.as_ref(),
            1.0,
            Par::Seq,
        );
        out
    }
}

/// Upper bound on the spectral radius (Gershgorin).
fn gershgorin_radius(h: MatRef<'_, f64>) -> f64 {
    (0..h.nrows())
        .map(|i| (0..h.ncols()).map(|j| h[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn hamiltonian_rhs(h: MatRef<'_, f64>, re: &[f64], im: &[f64], out_re: &mut [f64], out_im: &mut [f64]) {
    // dψ/dt = -i h ψ  ⇒  d(re)/dt = h·im, d(im)/dt = -h·re
    let n = re.len();
    for i in 0..n {
        let (mut a, mut b) = (0.0, 0.0);
        for j in 0..n {
            let hij = h[(i, j)];
            a += hij * im[j];
            b += hij * re[j];
        }
        out_re[i] = a;
        out_im[i] = -b;
    }
}

/// Independent oracle: integrates `i dψ/dt = hψ` with the classical
/// fourth-order Runge–Kutta method at a fixed step no larger than `dt`.
/// No renormalization is applied.
pub fn reference_propagate(
    h: MatRef<'_, f64>,
    psi0: &UniverseState,
    t: f64,
    dt: f64,
) -> Result<UniverseState> {
    let n = h.nrows();
    if n > REFERENCE_MAX_DIM {
        return Err(Error::InvalidInput(format!(
            "reference propagator limited to D <= {REFERENCE_MAX_DIM}, got {n}"
        )));
    }
    if psi0.basis != Basis::JointProduct || psi0.dim() != n {
        return Err(Error::InvalidInput("state must be a product-basis vector of matching dimension".into()));
    }
    let radius = gershgorin_radius(h);
    if dt.is_nan() || dt <= 0.0 || dt * radius >= 0.05 {
        return Err(Error::InvalidInput(format!(
            "step {dt} does not resolve the spectrum: dt * {radius:.4} must be below 0.05"
        )));
    }
    let steps = if t == 0.0 { 0 } else { (t.abs() / dt - 1e-9).ceil().max(1.0) as usize };
    let mut re = psi0.re.clone();
    let mut im = psi0.im.clone();
    if steps > 0 {
        let step = t / steps as f64;
        let mut k = [(); 4].map(|_| (vec![0.0; n], vec![0.0; n]));
        let mut tmp_re = vec![0.0; n];
        let mut tmp_im = vec![0.0; n];
        for _ in 0..steps {
            hamiltonian_rhs(h, &re, &im, &mut k[0].0, &mut k[0].1);
            for stage in 1..4 {
                let frac = if stage == 3 { 1.0 } else { 0.5 };
                for i in 0..n {
                    tmp_re[i] = re[i] + frac * step * k[stage - 1].0[i];
                    tmp_im[i] = im[i] + frac * step * k[stage - 1].1[i];
                }
                let (head, tail) = k.split_at_mut(stage);
                let _ = head;
                hamiltonian_rhs(h, &tmp_re, &tmp_im, &mut tail[0].0, &mut tail[0].1);
            }
            for i in 0..n {
                re[i] += step / 6.0 * (k[0].0[i] + 2.0 * k[1].0[i] + 2.0 * k[2].0[i] + k[3].0[i]);
                im[i] += step / 6.0 * (k[0].1[i] + 2.0 * k[1].1[i] + 2.0 * k[2].1[i] + k[3].1[i]);
            }
        }
    }
    Ok(UniverseState {
        re,
        im,
        basis: Basis::JointProduct,
        time: psi0.time + t,
        origin: psi0.origin.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BathSpec, BathWindow, Placement};

    fn sym(n: usize, seed: u64) -> Mat<f64> {
        let mut rng = SeededStream::new(seed, 9);
        let mut a = Mat::<f64>::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = rng.normal();
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    fn decomposition(a: &Mat<f64>) -> SpectralDecomposition {
        let (eigenvalues, eigenvectors) = diagonalize_matrix(a.as_ref()).unwrap();
        SpectralDecomposition {
            eigenvalues,
            eigenvectors,
            provenance: [0; 32],
        }
    }

    fn small_universe(d: usize, n: usize, g: f64) -> (SystemSpec, BathRealization, UniverseHamiltonian) {
        let energies: Vec<f64> = [0.5, 1.5, 2.2, 4.0][..d].to_vec();
        let full = [
            [0.0, -0.7, 0.3, -0.9],
            [-0.7, 0.0, -1.2, -0.4],
            [0.3, -1.2, 0.0, 0.4],
            [-0.9, -0.4, 0.4, 0.0],
        ];
        let x = (0..d).map(|i| full[i][..d].to_vec()).collect();
        let system = SystemSpec { energies, x };
        let bath = BathRealization::generate(&BathSpec {
            n_states: n,
            e_min: 0.5,
            e_max: 3.0,
            beta: 0.4,
            placement: Placement::InverseCdf,
            eta_factor: 1.0,
            coupling_seed: 17,
            level_jitter: 0.0,
        });
        let h = UniverseHamiltonian::assemble(&system, &bath, g);
        (system, bath, h)
    }

    #[test]
    fn diagonal_input() {
        let a = Mat::from_fn(2, 2, |i, j| if i == j { [3.5, 4.5][i] } else { 0.0 });
        let sd = decomposition(&a);
        assert_eq!(sd.eigenvalues, vec![3.5, 4.5]);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(sd.eigenvectors[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn pauli_x_pair() {
        let a = Mat::from_fn(2, 2, |i, j| if i == j { 0.0 } else { 1.0 });
        let sd = decomposition(&a);
        assert!((sd.eigenvalues[0] + 1.0).abs() < 1e-15);
        assert!((sd.eigenvalues[1] - 1.0).abs() < 1e-15);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v = &sd.eigenvectors;
        assert!((v[(0, 0)] - r).abs() < 1e-15 && (v[(1, 0)] + r).abs() < 1e-15);
        assert!((v[(0, 1)] - r).abs() < 1e-15 && (v[(1, 1)] - r).abs() < 1e-15);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let a = sym(50, 3);
        let sd = decomposition(&a);
        assert!(sd.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        assert!(sd.orthonormality_error() <= 1e-10);
        let max_h = (0..50).flat_map(|i| (0..50).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].abs()).fold(0.0, f64::max);
        assert!(sd.reconstruction_error(a.as_ref()) <= 1e-8 * max_h);
        // Sign rule: the largest-magnitude entry of every column is positive.
        for k in 0..50 {
            let col = sd.eigenvectors.col_as_slice(k);
            let pivot = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn initial_state_shapes() {
        let (system, bath, _) = small_universe(2, 400, 0.1);
        let mut init = InitialCondition {
            system_level: 1,
            bath_window: BathWindow::index(10, 1),
            phase_mode: PhaseMode::ComplexPhases,
            phase_seed: 4,
        };
        let one = prepare_initial(&system, &bath, &init).unwrap();
        assert!((one.norm_sqr() - 1.0).abs() < 1e-15);

        init.bath_window = BathWindow::index(20, 350);
        let psi = prepare_initial(&system, &bath, &init).unwrap();
        assert!((psi.norm_sqr() - 1.0).abs() < 1e-12);
        let nonzero: Vec<usize> = (0..psi.dim()).filter(|&k| psi.re[k] != 0.0 || psi.im[k] != 0.0).collect();
        assert_eq!(nonzero.len(), 350);
        assert_eq!(nonzero[0], 400 + 20);
        for &k in &nonzero {
            let m = (psi.re[k].powi(2) + psi.im[k].powi(2)).sqrt();
            assert!((m - 1.0 / 350f64.sqrt()).abs() < 1e-15);
        }

        init.phase_mode = PhaseMode::RandomSigns;
        let real = prepare_initial(&system, &bath, &init).unwrap();
        assert!(real.is_real());
        assert!(real.re.iter().any(|&v| v < 0.0) && real.re.iter().any(|&v| v > 0.0));

        init.system_level = 2;
        assert!(prepare_initial(&system, &bath, &init).is_err());
        init.system_level = 0;
        init.bath_window = BathWindow::energy(100.0, 101.0);
        assert!(prepare_initial(&system, &bath, &init).is_err());
    }

    #[test]
    fn propagate_identity_and_stationary() {
        let (_, _, h) = small_universe(2, 6, 0.0);
        let sd = SpectralDecomposition::diagonalize(&h, [0; 32]).unwrap();
        let psi = UniverseState::basis_state(12, 7);
        let same = propagate(&sd, &psi, 0.0);
        assert!(same.distance(&psi) < 1e-15);

        let t = 3.7;
        let out = propagate(&sd, &psi, t);
        let e = h.h[(7, 7)];
        assert!((out.re[7] - (e * t).cos()).abs() < 1e-13);
        assert!((out.im[7] + (e * t).sin()).abs() < 1e-13);
        let rest: f64 = (0..12).filter(|&k| k != 7).map(|k| out.re[k].abs() + out.im[k].abs()).sum();
        assert!(rest < 1e-14);
    }

    #[test]
    fn rabi_oscillation() {
        let g = 0.3;
        let a = Mat::from_fn(2, 2, |i, j| if i == j { 0.0 } else { g });
        let sd = decomposition(&a);
        let psi = UniverseState::basis_state(2, 0);
        for &t in &[0.0, 0.5, 1.3, 10.0, 123.4] {
            let out = propagate(&sd, &psi, t);
            let p = out.re[0].powi(2) + out.im[0].powi(2);
            assert!((p - (g * t).cos().powi(2)).abs() < 1e-12, "t={t}");

            let r = reference_propagate(a.as_ref(), &psi, t, 1e-2).unwrap();
            let pr = r.re[0].powi(2) + r.im[0].powi(2);
            // Global error of RK4 at this step size.
            assert!((pr - (g * t).cos().powi(2)).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn reference_preconditions() {
        let a = Mat::from_fn(2, 2, |i, j| if i == j { 100.0 } else { 0.0 });
        let psi = UniverseState::basis_state(2, 0);
        assert!(reference_propagate(a.as_ref(), &psi, 1.0, 1e-3).is_err());
        let same = reference_propagate(a.as_ref(), &psi, 0.0, 1e-4).unwrap();
        assert_eq!(same, UniverseState { time: 0.0, ..psi.clone() });
        let big = Mat::<f64>::zeros(513, 513);
        assert!(reference_propagate(big.as_ref(), &UniverseState::basis_state(513, 0), 1.0, 1e-3).is_err());
    }

    #[test]
    fn unitarity_composition_energy() {
        let (system, bath, h) = small_universe(3, 12, 0.2);
        let sd = SpectralDecomposition::diagonalize(&h, [0; 32]).unwrap();
        let init = InitialCondition {
            system_level: 2,
            bath_window: BathWindow::index(3, 6),
            phase_mode: PhaseMode::ComplexPhases,
            phase_seed: 8,
        };
        let psi = prepare_initial(&system, &bath, &init).unwrap();
        let overlaps = overlap_distribution(&sd, &psi);
        let e_eigen: f64 = overlaps.iter().zip(&sd.eigenvalues).map(|(o, l)| o * l).sum();
        for &t in &[0.0, 1.0, 17.5, 400.0] {
            let out = propagate(&sd, &psi, t);
            assert!((out.norm_sqr() - 1.0).abs() < 1e-10);
            let hre = apply(h.h.as_ref(), &out.re);
            let him = apply(h.h.as_ref(), &out.im);
            let e: f64 = out.re.iter().zip(&hre).map(|(a, b)| a * b).sum::<f64>()
                + out.im.iter().zip(&him).map(|(a, b)| a * b).sum::<f64>();
            assert!(((e - e_eigen) / e_eigen).abs() < 1e-9);
        }
        let a = propagate(&sd, &propagate(&sd, &psi, 2.5), 4.0);
        let b = propagate(&sd, &psi, 6.5);
        assert!(a.distance(&b) < 1e-10);
        assert_eq!(a.time, 6.5);
    }

    #[test]
    fn block_matches_single() {
        let (system, bath, h) = small_universe(2, 10, 0.3);
        let sd = SpectralDecomposition::diagonalize(&h, [0; 32]).unwrap();
        let init = InitialCondition {
            system_level: 0,
            bath_window: BathWindow::index(2, 5),
            phase_mode: PhaseMode::ComplexPhases,
            phase_seed: 1,
        };
        let psi = prepare_initial(&system, &bath, &init).unwrap();
        let times = [0.0, 0.7, 5.0];
        let block = Propagator::new(&sd, &psi).evolve_block(&times);
        for (c, &t) in times.iter().enumerate() {
            let single = propagate(&sd, &psi, t);
            for k in 0..20 {
                assert!((block[(k, c)] - single.re[k]).abs() < 1e-13);
                assert!((block[(k, 3 + c)] - single.im[k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn eigenvector_overlap_is_delta() {
        let (_, _, h) = small_universe(2, 8, 0.4);
        let sd = SpectralDecomposition::diagonalize(&h, [0; 32]).unwrap();
        let k0 = 5;
        let psi = UniverseState::from_parts(sd.eigenvectors.col_as_slice(k0).to_vec(), vec![0.0; 16]);
        let o = overlap_distribution(&sd, &psi);
        for (k, &v) in o.iter().enumerate() {
            let want = if k == k0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
        assert!((o.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn uncoupled_overlap_hits_product_state() {
        let (_, _, h) = small_universe(2, 8, 0.0);
        let sd = SpectralDecomposition::diagonalize(&h, [0; 32]).unwrap();
        let k = 11;
        let o = overlap_distribution(&sd, &UniverseState::basis_state(16, k));
        let hit = o.iter().position(|&v| v > 0.5).unwrap();
        assert!((sd.eigenvalues[hit] - h.h[(k, k)]).abs() < 1e-13);
        assert!((o[hit] - 1.0).abs() < 1e-14);
    }

    proptest::proptest! {
        #[test]
        fn propagation_is_unitary_and_composes(seed in 0u64..1000, t1 in 0.0f64..50.0, t2 in 0.0f64..50.0) {
            let a = sym(6, seed);
            let sd = decomposition(&a);
            let mut rng = SeededStream::new(seed, 3);
            let re: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let im: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let scale = re.iter().chain(&im).map(|v| v * v).sum::<f64>().sqrt();
            let psi = UniverseState::from_parts(
                re.iter().map(|v| v / scale).collect(),
                im.iter().map(|v| v / scale).collect(),
            );
            let one = propagate(&sd, &psi, t1);
            proptest::prop_assert!((one.norm_sqr() - 1.0).abs() < 1e-10);
            let two = propagate(&sd, &one, t2);
            proptest::prop_assert!(two.distance(&propagate(&sd, &psi, t1 + t2)) < 1e-10);
        }
    }

    #[test]
    fn qbs_round_trip_and_mismatch() {
        let a = sym(12, 5);
        let mut sd = decomposition(&a);
        sd.provenance = [7; 32];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.qbs");
        sd.write_qbs(&path).unwrap();
        let back = SpectralDecomposition::read_qbs(&path, &[7; 32]).unwrap();
        assert_eq!(back.eigenvalues, sd.eigenvalues);
        assert!(back.eigenvectors == sd.eigenvectors);
        let err = SpectralDecomposition::read_qbs(&path, &[8; 32]).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        let missing = SpectralDecomposition::read_qbs(&dir.path().join("none"), &[7; 32]).unwrap_err();
        assert_eq!(missing.exit_code(), 5);
    }
}

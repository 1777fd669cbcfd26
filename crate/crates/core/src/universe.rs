//! The universe Hamiltonian over the joint system ⊗ bath product basis.
//!
//! Ordering is system-major: joint index `k = s * N + b`, so every system
//! level owns a contiguous block of `N` basis states.

use faer::linalg::evd::{self_adjoint_evd_scratch, ComputeEigenvectors};
use faer::{Mat, Par};
use serde::{Deserialize, Serialize};

use crate::bath::BathRealization;
use crate::error::{Error, Result};
use crate::model::SystemSpec;

pub fn joint_index(s: usize, b: usize, d: usize, n: usize) -> Result<usize> {
    if s >= d || b >= n {
        return Err(Error::InvalidInput(format!(
            "index (s={s}, b={b}) outside ({d}, {n})"
        )));
    }
    Ok(s * n + b)
}

/// Inverse of [`joint_index`]: `(s, b)`.
pub fn split_index(k: usize, n: usize) -> (usize, usize) {
    (k / n, k % n)
}

#[derive(Clone, Debug)]
pub struct UniverseHamiltonian {
    /// System dimension `d`.
    pub d: usize,
    /// Bath dimension `N`.
    pub n: usize,
    pub h: Mat<f64>,
}

impl UniverseHamiltonian {
    pub fn dim(&self) -> usize {
        self.d * self.n
    }

    /// `h = diag(E_s + ε_b) + g · x ⊗ y`.
    pub fn assemble(system: &SystemSpec, bath: &BathRealization, g: f64) -> Self {
        let d = system.dim();
        let n = bath.n_states();
        let dim = d * n;
        let mut h = Mat::<f64>::zeros(dim, dim);
        for sp in 0..d {
            for bp in 0..n {
                let col = h.col_as_slice_mut(sp * n + bp);
                let y_col = bath.y.col_as_slice(bp);
                for s in 0..d {
                    let coef = g * system.x[s][sp];
                    if coef == 0.0 {
                        continue;
                    }
                    for (dst, &y) in col[s * n..(s + 1) * n].iter_mut().zip(y_col) {
                        *dst = coef * y;
                    }
                }
                col[sp * n + bp] = system.energies[sp] + bath.levels[bp];
            }
        }
        UniverseHamiltonian { d, n, h }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|k| self.h[(k, k)]).sum()
    }
}

/// Bytes needed to build and diagonalize a universe of dimension `d * n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub dim: usize,
    pub bath_coupling_bytes: u64,
    pub hamiltonian_bytes: u64,
    pub eigenvector_bytes: u64,
    pub eigensolver_workspace_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryEstimate {
    pub fn for_dims(d: usize, n: usize) -> Self {
        let dim = d * n;
        let square = |m: usize| (m as u64) * (m as u64) * 8;
        let workspace = self_adjoint_evd_scratch::<f64>(
            dim,
            ComputeEigenvectors::Yes,
            Par::Seq,
            Default::default(),
        )
        .unaligned_bytes_required() as u64;
        let hamiltonian_bytes = square(dim);
        let eigenvector_bytes = square(dim);
        let bath_coupling_bytes = square(n);
        MemoryEstimate {
            dim,
            bath_coupling_bytes,
            hamiltonian_bytes,
            eigenvector_bytes,
            eigensolver_workspace_bytes: workspace,
            total_bytes: bath_coupling_bytes + hamiltonian_bytes + eigenvector_bytes + workspace,
        }
    }

    pub fn check(&self, limit: u64) -> Result<()> {
        if self.total_bytes > limit {
            return Err(Error::Memory {
                dim: self.dim,
                required: self.total_bytes,
                hamiltonian: self.hamiltonian_bytes,
                limit,
            });
        }
        Ok(())
    }

    /// Rough single-core wall time for the full diagonalization, seconds.
    pub fn eigensolver_seconds_estimate(&self) -> f64 {
        // Calibrated on faer at D = 8000 (about 140 s on one AVX2 core).
        let d = self.dim as f64;
        140.0 * (d / 8000.0).powi(3)
    }
}

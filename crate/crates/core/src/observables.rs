//! System-level observables of a universe state and their time series.

use std::io::{BufWriter, Write};
use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{Propagator, SpectralDecomposition, UniverseState, TIME_BLOCK};
use crate::universe::UniverseHamiltonian;

/// Minimum number of samples [`steady_statistics`] accepts.
pub const MIN_STEADY_SAMPLES: usize = 30;

/// `p_s = Σ_b |ψ_{(s,b)}|²` from split amplitudes of length `d * N`.
pub fn populations_from_parts(re: &[f64], im: &[f64], d: usize) -> Vec<f64> {
    let n = re.len() / d;
    (0..d)
        .map(|s| {
            let block = s * n..(s + 1) * n;
            re[block.clone()]
                .iter()
                .zip(&im[block])
                .map(|(a, b)| a * a + b * b)
                .sum()
        })
        .collect()
}

pub fn populations(psi: &UniverseState, d: usize) -> Vec<f64> {
    populations_from_parts(&psi.re, &psi.im, d)
}

/// `ρ_{ss'} = Σ_b ψ_{(s,b)} conj(ψ_{(s',b)})`, row-major `d x d`.
pub fn reduced_density_matrix(psi: &UniverseState, d: usize) -> Vec<Vec<Complex64>> {
    let n = psi.dim() / d;
    let amp = |k: usize| Complex64::new(psi.re[k], psi.im[k]);
    (0..d)
        .map(|s| {
            (0..d)
                .map(|sp| {
                    (0..n).fold(Complex64::new(0.0, 0.0), |acc, b| {
                        acc + amp(s * n + b) * amp(sp * n + b).conj()
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalReference {
    pub beta: f64,
    /// `e^{-βE_s} / Z`.
    pub populations: Vec<f64>,
    /// `Z = Σ_s e^{-βE_s}`.
    pub z: f64,
}

pub fn boltzmann(energies: &[f64], beta: f64) -> ThermalReference {
    // Weights relative to the ground level keep the ratios finite.
    let e0 = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = energies.iter().map(|e| (-beta * (e - e0)).exp()).collect();
    let total: f64 = weights.iter().sum();
    ThermalReference {
        beta,
        populations: weights.iter().map(|w| w / total).collect(),
        z: energies.iter().map(|e| (-beta * e).exp()).sum(),
    }
}

/// `p̄_s = Σ_k O_k q_s(k)` with `eigenstate_values` shaped `D x d`.
pub fn diagonal_ensemble(overlaps: &[f64], eigenstate_values: &Mat<f64>) -> Vec<f64> {
    (0..eigenstate_values.ncols())
        .map(|s| {
            overlaps
                .iter()
                .zip(eigenstate_values.col_as_slice(s))
                .map(|(o, q)| o * q)
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSeries {
    pub times: Vec<f64>,
    /// One `d`-vector per time.
    pub populations: Vec<Vec<f64>>,
    /// `⟨ψ(t)|H|ψ(t)⟩` evaluated in the product basis.
    pub energy: Vec<f64>,
    pub norm: Vec<f64>,
}

impl PopulationSeries {
    pub fn dim(&self) -> usize {
        self.populations.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_norm_drift(&self) -> f64 {
        let n0 = self.norm.first().copied().unwrap_or(1.0);
        self.norm.iter().map(|n| (n - n0).abs()).fold(0.0, f64::max)
    }

    pub fn max_relative_energy_drift(&self) -> f64 {
        let e0 = self.energy.first().copied().unwrap_or(0.0);
        self.energy
            .iter()
            .map(|e| ((e - e0) / e0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_population_sum_error(&self) -> f64 {
        self.populations
            .iter()
            .map(|p| (p.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes `t,p1..pd,energy,norm` with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim()).map(|s| format!("p{s}")));
        header.push("energy".into());
        header.push("norm".into());
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.len() {
            let mut row = vec![fmt17(self.times[i])];
            row.extend(self.populations[i].iter().map(|&p| fmt17(p)));
            row.push(fmt17(self.energy[i]));
            row.push(fmt17(self.norm[i]));
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// 17 significant digits, round-trippable.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Populations, energy and norm of `ψ(t)` for every entry of `times`.
///
/// Times are processed in fixed blocks of [`TIME_BLOCK`], in parallel over
/// blocks on the current rayon pool; each block is computed sequentially, so
/// the output is independent of the number of threads.
pub fn evolve_series(
    sd: &SpectralDecomposition,
    h: &UniverseHamiltonian,
    psi0: &UniverseState,
    times: &[f64],
) -> PopulationSeries {
    let d = h.d;
    let dim = h.dim();
    let prop = Propagator::new(sd, psi0);
    let blocks: Vec<Vec<(Vec<f64>, f64, f64)>> = times
        .par_chunks(TIME_BLOCK)
        .map(|chunk| {
            let b = chunk.len();
            let states = prop.evolve_block(chunk);
            let mut applied = Mat::<f64>::zeros(dim, 2 * b);
            matmul(applied.as_mut(), Accum::Replace, h.h.as_ref(), states.as_ref(), 1.0, Par::Seq);
            (0..b)
                .map(|c| {
                    let re = states.col_as_slice(c);
                    let im = states.col_as_slice(b + c);
                    let hre = applied.col_as_slice(c);
                    let him = applied.col_as_slice(b + c);
                    let pops = populations_from_parts(re, im, d);
                    let energy = dot(re, hre) + dot(im, him);
                    let norm = (dot(re, re) + dot(im, im)).sqrt();
                    (pops, energy, norm)
                })
                .collect()
        })
        .collect();
    let mut series = PopulationSeries {
        times: times.to_vec(),
        populations: Vec::with_capacity(times.len()),
        energy: Vec::with_capacity(times.len()),
        norm: Vec::with_capacity(times.len()),
    };
    for (pops, energy, norm) in blocks.into_iter().flatten() {
        series.populations.push(pops);
        series.energy.push(energy);
        series.norm.push(norm);
    }
    series
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStatistics {
    pub mean: f64,
    /// Population (not sample) standard deviation over time.
    pub std: f64,
}

/// Per-level time mean and standard deviation over samples with `t >= t_start`.
pub fn steady_statistics(series: &PopulationSeries, t_start: f64) -> Result<Vec<LevelStatistics>> {
    let first = series.times.partition_point(|&t| t < t_start);
    let count = series.len() - first;
    if count < MIN_STEADY_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "{count} samples at t >= {t_start}, need at least {MIN_STEADY_SAMPLES}"
        )));
    }
    let tail = &series.populations[first..];
    Ok((0..series.dim())
        .map(|s| {
            let mean = tail.iter().map(|p| p[s]).sum::<f64>() / count as f64;
            let var = tail.iter().map(|p| (p[s] - mean).powi(2)).sum::<f64>() / count as f64;
            LevelStatistics {
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

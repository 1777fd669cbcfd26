//! Eigenstate-thermalization diagnostics.
//!
//! The eigenstate value `q_s(k)` is the population of system level `s` in
//! the reduced state of universe eigenstate `k`. Moving averages run over
//! eigenstate index, centered, with the window shrinking symmetrically at the
//! spectrum edges.

use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::count_in;
use crate::error::{Error, Result};
use crate::model::{normalize_window, SystemSpec};
use crate::observables::{fmt17, ThermalReference};
use crate::spectral::SpectralDecomposition;

/// Minimum product levels per system level for [`g0_counting_check`].
pub const MIN_LEVELS_PER_SYSTEM_LEVEL: usize = 10;

#[derive(Clone, Debug)]
pub struct EthProfile {
    pub eigen_energies: Vec<f64>,
    /// `D x d`: row `k`, column `s`.
    pub eigenstate_values: Mat<f64>,
    pub moving_average: Mat<f64>,
    /// Odd window actually used.
    pub window: usize,
}

impl EthProfile {
    pub fn compute(sd: &SpectralDecomposition, d: usize, window: usize) -> Self {
        let values = eigenstate_values(sd, d);
        let window = normalize_window(window);
        let moving_average = moving_average(&values, window);
        EthProfile {
            eigen_energies: sd.eigenvalues.clone(),
            eigenstate_values: values,
            moving_average,
            window,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigen_energies.len()
    }

    pub fn levels(&self) -> usize {
        self.eigenstate_values.ncols()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        row_sum_error(&self.eigenstate_values).max(row_sum_error(&self.moving_average))
    }

    /// Writes `k,E_k,q1..qd,ma1..mad` with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.levels();
        let mut header = vec!["k".to_string(), "E_k".to_string()];
        header.extend((1..=d).map(|s| format!("q{s}")));
        header.extend((1..=d).map(|s| format!("ma{s}")));
        write_rows(path, &header, (0..self.dim()).map(|k| {
            let mut row = vec![k.to_string(), fmt17(self.eigen_energies[k])];
            row.extend((0..d).map(|s| fmt17(self.eigenstate_values[(k, s)])));
            row.extend((0..d).map(|s| fmt17(self.moving_average[(k, s)])));
            row
        }))
    }
}

fn row_sum_error(m: &Mat<f64>) -> f64 {
    (0..m.nrows())
        .map(|k| ((0..m.ncols()).map(|s| m[(k, s)]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `k,E_k,overlap`.
pub fn write_overlap_csv(path: &Path, energies: &[f64], overlaps: &[f64]) -> Result<()> {
    let header = ["k".to_string(), "E_k".to_string(), "overlap".to_string()];
    write_rows(
        path,
        &header,
        energies
            .iter()
            .zip(overlaps)
            .enumerate()
            .map(|(k, (e, o))| vec![k.to_string(), fmt17(*e), fmt17(*o)]),
    )
}

/// `q_s(k) = Σ_b V[(s,b), k]²` for every eigenvector, as a `D x d` matrix.
pub fn eigenstate_values(sd: &SpectralDecomposition, d: usize) -> Mat<f64> {
    let dim = sd.dim();
    let n = dim / d;
    let rows: Vec<Vec<f64>> = (0..dim)
        .into_par_iter()
        .map(|k| {
            let col = sd.eigenvectors.col_as_slice(k);
            (0..d)
                .map(|s| col[s * n..(s + 1) * n].iter().map(|v| v * v).sum())
                .collect()
        })
        .collect();
    Mat::from_fn(dim, d, |k, s| rows[k][s])
}

/// Centered moving average over rows. `w` is rounded up to odd; near the
/// edges the half-width shrinks to what fits on both sides.
pub fn moving_average(values: &Mat<f64>, w: usize) -> Mat<f64> {
    let half = normalize_window(w.max(1)) / 2;
    let dim = values.nrows();
    let mut out = Mat::<f64>::zeros(dim, values.ncols());
    for s in 0..values.ncols() {
        let col = values.col_as_slice(s);
        let dst = out.col_as_slice_mut(s);
        for k in 0..dim {
            let h = half.min(k).min(dim - 1 - k);
            let center = col[k];
            // Mean as an offset from the center keeps constant input exact.
            let offset: f64 = col[k - h..=k + h].iter().map(|v| v - center).sum();
            dst[k] = center + offset / (2 * h + 1) as f64;
        }
    }
    out
}

/// Selects a contiguous range of eigenstates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumBand {
    /// Fractions of the eigenstate index range `[0, D)`.
    IndexFraction { lo: f64, hi: f64 },
    /// Fractions of the energy span `[Λ_min, Λ_max]`.
    EnergyFraction { lo: f64, hi: f64 },
}

impl SpectrumBand {
    pub fn resolve(&self, energies: &[f64]) -> Range<usize> {
        let dim = energies.len();
        match *self {
            SpectrumBand::IndexFraction { lo, hi } => {
                let a = (lo * dim as f64).round() as usize;
                let b = (hi * dim as f64).round() as usize;
                a.min(dim)..b.clamp(a.min(dim), dim)
            }
            SpectrumBand::EnergyFraction { lo, hi } => {
                let (Some(&min), Some(&max)) = (energies.first(), energies.last()) else {
                    return 0..0;
                };
                let span = max - min;
                let a = energies.partition_point(|&e| e < min + lo * span);
                let b = energies.partition_point(|&e| e <= min + hi * span);
                a..b.max(a)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDeviation {
    /// `max_k |MA_s(k) - p_s^th|`.
    pub max_abs_dev: f64,
    /// RMS of `q_s(k) - MA_s(k)`.
    pub rms_fluctuation: f64,
}

pub fn eth_deviation(
    profile: &EthProfile,
    thermal: &ThermalReference,
    range: Range<usize>,
) -> Result<Vec<LevelDeviation>> {
    if range.is_empty() || range.end > profile.dim() {
        return Err(Error::InvalidInput(format!(
            "eigenstate range {range:?} is empty or outside 0..{}",
            profile.dim()
        )));
    }
    let count = range.len() as f64;
    Ok((0..profile.levels())
        .map(|s| {
            let q = &profile.eigenstate_values.col_as_slice(s)[range.clone()];
            let ma = &profile.moving_average.col_as_slice(s)[range.clone()];
            let max_abs_dev = ma
                .iter()
                .map(|m| (m - thermal.populations[s]).abs())
                .fold(0.0, f64::max);
            let ms = q.iter().zip(ma).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / count;
            LevelDeviation {
                max_abs_dev,
                rms_fluctuation: ms.sqrt(),
            }
        })
        .collect())
}

/// RMS of `q - MA` over `range`, pooled over all system levels.
pub fn rms_fluctuation(profile: &EthProfile, range: Range<usize>) -> f64 {
    let d = profile.levels();
    let mut acc = 0.0;
    for s in 0..d {
        let q = &profile.eigenstate_values.col_as_slice(s)[range.clone()];
        let ma = &profile.moving_average.col_as_slice(s)[range.clone()];
        acc += q.iter().zip(ma).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    (acc / (d * range.len()).max(1) as f64).sqrt()
}

/// Pooled RMS fluctuation per profile over its `band`.
pub fn fluctuation_scaling(profiles: &[&EthProfile], band: SpectrumBand) -> Vec<f64> {
    profiles
        .iter()
        .map(|p| rms_fluctuation(p, band.resolve(&p.eigen_energies)))
        .collect()
}

/// Fraction of uncoupled product levels `E_s + ε_b` in `[lo, hi]` that belong
/// to each system level. Pure counting; no diagonalization.
pub fn g0_counting_check(system: &SystemSpec, bath_levels: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let counts: Vec<usize> = system
        .energies
        .iter()
        .map(|e| count_in(bath_levels, lo - e, hi - e))
        .collect();
    let total: usize = counts.iter().sum();
    let needed = system.dim() * MIN_LEVELS_PER_SYSTEM_LEVEL;
    if total < needed {
        return Err(Error::InvalidInput(format!(
            "energy window [{lo}, {hi}] holds {total} product levels, need at least {needed}"
        )));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::BathRealization;
    use crate::model::{full_scale_config, BathSpec, Placement};
    use crate::observables::boltzmann;
    use crate::universe::{joint_index, UniverseHamiltonian};
    use proptest::prelude::*;

    fn instance(d: usize, n: usize, g: f64) -> (SystemSpec, UniverseHamiltonian, SpectralDecomposition) {
        let energies = [0.5, 1.5, 2.2, 4.0][..d].to_vec();
        let full = [
            [0.0, -0.7, 0.3, -0.9],
            [-0.7, 0.0, -1.2, -0.4],
            [0.3, -1.2, 0.0, 0.4],
            [-0.9, -0.4, 0.4, 0.0],
        ];
        let system = SystemSpec {
            energies,
            x: (0..d).map(|i| full[i][..d].to_vec()).collect(),
        };
        let bath = BathRealization::generate(&BathSpec {
            n_states: n,
            e_min: 1.0,
            e_max: 4.0,
            beta: 0.4,
            placement: Placement::InverseCdf,
            eta_factor: 1.0,
            coupling_seed: 21,
            level_jitter: 0.0,
        });
        let h = UniverseHamiltonian::assemble(&system, &bath, g);
        let sd = SpectralDecomposition::diagonalize(&h, [0; 32]).unwrap();
        (system, h, sd)
    }

    #[test]
    fn brute_force_partial_trace() {
        let (_, _, sd) = instance(2, 8, 0.3);
        let q = eigenstate_values(&sd, 2);
        for k in 0..16 {
            // Reduced density matrix diagonal via explicit joint indices.
            for s in 0..2 {
                let mut p = 0.0;
                for b in 0..8 {
                    let v = sd.eigenvectors[(joint_index(s, b, 2, 8).unwrap(), k)];
                    p += v * v;
                }
                assert!((q[(k, s)] - p).abs() < 1e-14);
            }
            assert!((q[(k, 0)] + q[(k, 1)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uncoupled_rows_are_unit_vectors() {
        let (_, _, sd) = instance(3, 10, 0.0);
        let q = eigenstate_values(&sd, 3);
        for k in 0..30 {
            let row: Vec<f64> = (0..3).map(|s| q[(k, s)]).collect();
            let hot = row.iter().filter(|&&v| (v - 1.0).abs() < 1e-12).count();
            let cold = row.iter().filter(|&&v| v.abs() < 1e-12).count();
            assert_eq!((hot, cold), (1, 2), "{row:?}");
        }
    }

    #[test]
    fn moving_average_examples() {
        let linear = Mat::from_fn(30, 1, |k, _| k as f64);
        let out = moving_average(&linear, 5);
        for k in 2..28 {
            assert!((out[(k, 0)] - k as f64).abs() < 1e-12);
        }
        // Symmetric shrink keeps a linear sequence exact at the edges too.
        assert_eq!(out[(0, 0)], 0.0);
        assert!((out[(1, 0)] - 1.0).abs() < 1e-12);

        let constant = Mat::from_fn(17, 2, |_, s| [0.3, 0.7][s]);
        let out = moving_average(&constant, 6);
        assert!(out == constant);

        let noisy = Mat::from_fn(9, 2, |k, s| ((k * 7 + s * 3) % 5) as f64);
        assert!(moving_average(&noisy, 1) == noisy);
        // An even window behaves as the next odd one.
        assert!(moving_average(&noisy, 4) == moving_average(&noisy, 5));
    }

    proptest! {
        #[test]
        fn moving_average_row_sums_and_shift(
            raw in prop::collection::vec(0.01f64..1.0, 3 * 40),
            w in 1usize..30,
            shift in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let rows: Vec<[f64; 3]> = raw.chunks(3).map(|c| {
                let t = c[0] + c[1] + c[2];
                [c[0] / t, c[1] / t, c[2] / t]
            }).collect();
            let m = Mat::from_fn(40, 3, |k, s| rows[k][s]);
            let out = moving_average(&m, w);
            prop_assert!(row_sum_error(&out) < 1e-10);
            let shifted = Mat::from_fn(40, 3, |k, s| m[(k, s)] + shift[s]);
            let out_shifted = moving_average(&shifted, w);
            for k in 0..40 {
                for s in 0..3 {
                    prop_assert!((out_shifted[(k, s)] - out[(k, s)] - shift[s]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn profile_and_deviation() {
        let (system, _, sd) = instance(2, 30, 0.2);
        let profile = EthProfile::compute(&sd, 2, 4);
        assert_eq!(profile.window, 5);
        assert!(profile.max_row_sum_error() < 1e-10);
        let thermal = boltzmann(&system.energies, 0.4);
        let dev = eth_deviation(&profile, &thermal, 10..50).unwrap();
        assert_eq!(dev.len(), 2);
        assert!(eth_deviation(&profile, &thermal, 5..5).is_err());
        assert!(eth_deviation(&profile, &thermal, 50..61).is_err());

        let exact = EthProfile {
            eigen_energies: vec![0.0; 20],
            eigenstate_values: Mat::from_fn(20, 2, |_, s| thermal.populations[s]),
            moving_average: Mat::from_fn(20, 2, |_, s| thermal.populations[s]),
            window: 3,
        };
        for dv in eth_deviation(&exact, &thermal, 0..20).unwrap() {
            assert_eq!(dv.max_abs_dev, 0.0);
            assert_eq!(dv.rms_fluctuation, 0.0);
        }
    }

    #[test]
    fn spectrum_bands() {
        let e: Vec<f64> = (0..=100).map(|k| k as f64).collect();
        assert_eq!(SpectrumBand::IndexFraction { lo: 0.25, hi: 0.75 }.resolve(&e), 25..76);
        assert_eq!(SpectrumBand::EnergyFraction { lo: 0.25, hi: 0.75 }.resolve(&e), 25..76);
        let skewed: Vec<f64> = (0..100).map(|k| (k as f64).powi(2)).collect();
        let r = SpectrumBand::EnergyFraction { lo: 0.0, hi: 0.25 }.resolve(&skewed);
        assert_eq!(r, 0..50);
        assert_eq!(SpectrumBand::IndexFraction { lo: 0.0, hi: 0.05 }.resolve(&skewed), 0..5);
    }

    #[test]
    fn g0_counting_trivial() {
        let levels: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let one = SystemSpec { energies: vec![1.0], x: vec![vec![0.0]] };
        assert_eq!(g0_counting_check(&one, &levels, 3.0, 5.0).unwrap(), vec![1.0]);
        let two = SystemSpec {
            energies: vec![1.0, 1.0],
            x: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        };
        let f = g0_counting_check(&two, &levels, 3.0, 5.0).unwrap();
        assert_eq!(f[0], f[1]);
        assert!(g0_counting_check(&two, &levels, 3.0, 3.2).is_err());
    }

    #[test]
    fn g0_counting_full_scale_window() {
        let config = full_scale_config();
        let levels = crate::bath::place_levels(&config.bath);
        let fractions = g0_counting_check(&config.system, &levels, 13.0, 14.0).unwrap();
        // Independent enumeration over every product level.
        let mut counts = [0usize; 4];
        for (s, e) in config.system.energies.iter().enumerate() {
            for eps in &levels {
                let total = e + eps;
                if (13.0..=14.0).contains(&total) {
                    counts[s] += 1;
                }
            }
        }
        let all: usize = counts.iter().sum();
        let thermal = boltzmann(&config.system.energies, config.bath.beta);
        for s in 0..4 {
            assert_eq!(fractions[s], counts[s] as f64 / all as f64);
            assert!((fractions[s] - thermal.populations[s]).abs() < 0.02, "{fractions:?}");
        }
    }

    #[test]
    fn csv_outputs() {
        let (_, _, sd) = instance(2, 4, 0.1);
        let profile = EthProfile::compute(&sd, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eth.csv");
        profile.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,E_k,q1,q2,ma1,ma2");
        assert_eq!(lines.len(), 9);
        let row: Vec<&str> = lines[3].split(',').collect();
        assert_eq!(row[0], "2");
        assert_eq!(row[2], row[4]);

        let path = dir.path().join("overlap.csv");
        write_overlap_csv(&path, &[1.0, 2.0], &[0.25, 0.75]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("k,E_k,overlap\n0,"));
    }
}

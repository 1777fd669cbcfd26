//! Bath construction: level energies with an exponential density of states
//! and the gap-scaled random coupling operator `Y`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use faer::Mat;

use crate::error::{Error, Result};
use crate::hashing::{bath_hash, Hash32};
use crate::model::{BathSpec, BathWindow, Placement};
use crate::rng::{stream, SeededStream};

pub const QBR_MAGIC: &[u8; 4] = b"QBR1";

/// Bath level energies for `spec`, ascending.
pub fn place_levels(spec: &BathSpec) -> Vec<f64> {
    let n = spec.n_states;
    let beta = spec.beta;
    let mut levels: Vec<f64> = match spec.placement {
        Placement::InverseCdf => {
            let span = (beta * (spec.e_max - spec.e_min)).exp_m1();
            let mut v: Vec<f64> = (0..n)
                .map(|i| {
                    let f = i as f64 / (n - 1) as f64;
                    spec.e_min + (f * span).ln_1p() / beta
                })
                .collect();
            v[0] = spec.e_min;
            v[n - 1] = spec.e_max;
            v
        }
        Placement::RecursiveSpacing => {
            let mut v = Vec::with_capacity(n);
            let mut e = spec.e_min;
            for _ in 0..n {
                v.push(e);
                e += (-beta * e).exp();
            }
            v
        }
    };

    if spec.level_jitter > 0.0 {
        let mut rng = SeededStream::new(spec.coupling_seed, stream::LEVEL_JITTER);
        let local_gap: Vec<f64> = (0..n)
            .map(|i| match i {
                0 => levels[1] - levels[0],
                _ if i == n - 1 => levels[n - 1] - levels[n - 2],
                _ => 0.5 * (levels[i + 1] - levels[i - 1]),
            })
            .collect();
        for (e, gap) in levels.iter_mut().zip(local_gap) {
            *e += spec.level_jitter * gap * (rng.uniform() - 0.5);
        }
        levels.sort_by(f64::total_cmp);
    }
    levels
}

/// Nearest-neighbour gaps of an ascending level list.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaps {
    /// `forward[i] = ε_{i+1} - ε_i`, `i = 0..N-1`.
    pub forward: Vec<f64>,
    /// `backward[j - 1] = ε_j - ε_{j-1}`, `j = 1..N`.
    pub backward: Vec<f64>,
}

impl Gaps {
    pub fn forward_at(&self, i: usize) -> f64 {
        self.forward[i]
    }

    /// Backward gap of level `j >= 1`.
    pub fn backward_at(&self, j: usize) -> f64 {
        self.backward[j - 1]
    }
}

pub fn gaps(levels: &[f64]) -> Gaps {
    let forward: Vec<f64> = levels.windows(2).map(|w| w[1] - w[0]).collect();
    Gaps {
        backward: forward.clone(),
        forward,
    }
}

/// `1 + (η/Δε₀) √(Δε_i Δε_j)`; note `η/Δε₀ = eta_factor`.
pub fn coupling_prefactor(eta_factor: f64, forward_gap_i: f64, backward_gap_j: f64) -> f64 {
    1.0 + eta_factor * (forward_gap_i * backward_gap_j).sqrt()
}

/// Symmetric coupling matrix with zero diagonal. For `i < j`,
/// `y[i][j] = prefactor(i, j) · w_ij` with `w_ij ~ N(0, 1)` drawn from the
/// `coupling_seed` stream in row-major order (`i` outer, `j` inner); the lower
/// triangle is a mirror.
pub fn build_coupling(spec: &BathSpec, levels: &[f64]) -> Mat<f64> {
    let n = levels.len();
    let g = gaps(levels);
    let mut rng = SeededStream::new(spec.coupling_seed, stream::BATH_COUPLING);
    let mut y = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = coupling_prefactor(spec.eta_factor, g.forward_at(i), g.backward_at(j)) * rng.normal();
            y[(i, j)] = v;
            y[(j, i)] = v;
        }
    }
    y
}

/// A concrete bath: levels, coupling operator, and the spec that produced them.
#[derive(Clone, Debug)]
pub struct BathRealization {
    pub levels: Vec<f64>,
    pub y: Mat<f64>,
    pub spec: BathSpec,
    pub delta_eps0_const: f64,
}

impl BathRealization {
    pub fn generate(spec: &BathSpec) -> Self {
        let levels = place_levels(spec);
        let y = build_coupling(spec, &levels);
        BathRealization {
            levels,
            y,
            spec: spec.clone(),
            delta_eps0_const: spec.delta_eps0(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.levels.len()
    }

    /// Resolves the initial-state window to a nonempty index range.
    pub fn resolve_window(&self, window: &BathWindow) -> Result<Range<usize>> {
        resolve_window(&self.levels, window)
    }

    /// Writes the `QBR1` dump: magic, `N` (u64), spec hash (32 bytes), the
    /// `N` levels, then the strict upper triangle of `y` row-major; all
    /// little-endian.
    pub fn write_qbr(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let n = self.n_states();
        let io = |e| Error::io(path, e);
        w.write_all(QBR_MAGIC).map_err(io)?;
        w.write_all(&(n as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&bath_hash(&self.spec)).map_err(io)?;
        for e in &self.levels {
            w.write_all(&e.to_le_bytes()).map_err(io)?;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                w.write_all(&self.y[(i, j)].to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Loads a `QBR1` dump, requiring that it was written for `spec`.
    pub fn read_qbr(path: &Path, spec: &BathSpec) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::cache(path, format!("cannot open bath cache: {e}")))?;
        let mut r = BufReader::new(file);
        let bad = |why: &str| Error::cache(path, why.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != QBR_MAGIC {
            return Err(bad("bad magic"));
        }
        let n = read_u64(&mut r).map_err(|_| bad("truncated header"))? as usize;
        let mut hash: Hash32 = [0; 32];
        r.read_exact(&mut hash).map_err(|_| bad("truncated header"))?;
        if hash != bath_hash(spec) || n != spec.n_states {
            return Err(bad("bath spec hash mismatch"));
        }
        let levels = read_f64s(&mut r, n).map_err(|_| bad("truncated levels"))?;
        let mut y = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            let row = read_f64s(&mut r, n - i - 1).map_err(|_| bad("truncated coupling"))?;
            for (off, v) in row.into_iter().enumerate() {
                let j = i + 1 + off;
                y[(i, j)] = v;
                y[(j, i)] = v;
            }
        }
        Ok(BathRealization {
            levels,
            y,
            spec: spec.clone(),
            delta_eps0_const: spec.delta_eps0(),
        })
    }
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn resolve_window(levels: &[f64], window: &BathWindow) -> Result<Range<usize>> {
    let range = match (window.by_index, window.by_energy) {
        (Some((first, count)), _) => first..first.saturating_add(count),
        (None, Some((lo, hi))) => {
            let start = levels.partition_point(|&e| e < lo);
            let end = levels.partition_point(|&e| e <= hi);
            start..end.max(start)
        }
        (None, None) => {
            return Err(Error::InvalidInput("bath window has no descriptor".into()));
        }
    };
    if range.is_empty() || range.end > levels.len() {
        return Err(Error::InvalidInput(format!(
            "bath window {window:?} resolves to {range:?}, which is empty or outside 0..{}",
            levels.len()
        )));
    }
    Ok(range)
}

/// Number of levels in `[a, b]`.
pub fn count_in(levels: &[f64], a: f64, b: f64) -> usize {
    levels.iter().filter(|&&e| e >= a && e <= b).count()
}

/// Level count in `[a, b]` implied by the inverse-CDF placement:
/// `N (e^{βb} - e^{βa}) / (e^{β e_max} - e^{β e_min})`.
pub fn expected_count(spec: &BathSpec, a: f64, b: f64) -> f64 {
    let beta = spec.beta;
    // Factor out e^{β e_min} to keep the exponentials small.
    let rel = |e: f64| (beta * (e - spec.e_min)).exp();
    spec.n_states as f64 * (rel(b) - rel(a)) / (rel(spec.e_max) - 1.0)
}

/// Exact continuum count for the inverse-CDF grid, `(N - 1) ΔF` where `ΔF` is
/// the normalized cumulative density between `a` and `b`. Any interval holds
/// within one level of this.
pub fn grid_count(spec: &BathSpec, a: f64, b: f64) -> f64 {
    expected_count(spec, a, b) * (spec.n_states - 1) as f64 / spec.n_states as f64
}

/// `A` in `D(E) = A e^{βE}` for the inverse-CDF placement (continuum limit).
pub fn density_prefactor(spec: &BathSpec) -> f64 {
    let beta = spec.beta;
    spec.n_states as f64 * beta / ((beta * spec.e_max).exp() - (beta * spec.e_min).exp())
}

/// Upper energy at which `n` inverse-CDF levels starting at `e_min` have
/// density prefactor `prefactor`.
pub fn e_max_for_density(n: usize, e_min: f64, beta: f64, prefactor: f64) -> f64 {
    ((beta * e_min).exp() + n as f64 * beta / prefactor).ln() / beta
}

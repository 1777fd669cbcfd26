//! Configuration schema and validation.
//!
//! A run is described by a single TOML document whose sections mirror
//! [`RunConfig`] field names. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The small system: its level energies and the coupling operator `X`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    /// Strictly ascending level energies, units of ħμ.
    pub energies: Vec<f64>,
    /// Real symmetric coupling operator with zero diagonal, row-major.
    pub x: Vec<Vec<f64>>,
}

impl SystemSpec {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `ε_i = e_min + ln(1 + i/(N-1) (e^{β(e_max-e_min)} - 1)) / β`.
    #[default]
    InverseCdf,
    /// `ε_0 = e_min`, `ε_{i+1} = ε_i + μ e^{-β ε_i}`; `e_max` is ignored.
    RecursiveSpacing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathSpec {
    pub n_states: usize,
    pub e_min: f64,
    pub e_max: f64,
    pub beta: f64,
    #[serde(default)]
    pub placement: Placement,
    /// `η = eta_factor · Δε₀`.
    pub eta_factor: f64,
    pub coupling_seed: u64,
    /// Level jitter as a fraction of the local mean gap.
    #[serde(default)]
    pub level_jitter: f64,
}

impl BathSpec {
    /// `Δε₀ = μ exp(-β e_min)`, used as a constant in the coupling prefactor.
    pub fn delta_eps0(&self) -> f64 {
        (-self.beta * self.e_min).exp()
    }

    pub fn eta(&self) -> f64 {
        self.eta_factor * self.delta_eps0()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub g: f64,
}

/// Selects the contiguous block of bath eigenstates in the initial state.
/// When both descriptors are given, `by_index` wins.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathWindow {
    /// `(first_index, count)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_index: Option<(usize, usize)>,
    /// `(e_lo, e_hi)`: every bath level with `e_lo <= ε <= e_hi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_energy: Option<(f64, f64)>,
}

impl BathWindow {
    pub fn index(first: usize, count: usize) -> Self {
        BathWindow {
            by_index: Some((first, count)),
            by_energy: None,
        }
    }

    pub fn energy(lo: f64, hi: f64) -> Self {
        BathWindow {
            by_index: None,
            by_energy: Some((lo, hi)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    /// Phases uniform in `[0, 2π)`.
    #[default]
    ComplexPhases,
    /// Phases `0` or `π` with equal probability; the state is real.
    RandomSigns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialCondition {
    pub system_level: usize,
    pub bath_window: BathWindow,
    #[serde(default)]
    pub phase_mode: PhaseMode,
    pub phase_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveSpec {
    pub t_max: f64,
    pub n_steps: usize,
}

impl EvolveSpec {
    /// Uniform grid with `n_steps + 1` points including `t = 0`.
    pub fn time_grid(&self) -> Vec<f64> {
        if self.n_steps == 0 {
            return vec![0.0];
        }
        let dt = self.t_max / self.n_steps as f64;
        (0..=self.n_steps).map(|i| i as f64 * dt).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EthSpec {
    pub ma_window: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_cache() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub bath: BathSpec,
    pub coupling: CouplingSpec,
    pub initial: InitialCondition,
    pub evolve: EvolveSpec,
    pub eth: EthSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_cache")]
    pub cache: bool,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

/// One violated constraint, addressed by its dotted field path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// A configuration that passed [`validate`], in normalized form.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValidatedConfig(RunConfig);

impl ValidatedConfig {
    pub fn config(&self) -> &RunConfig {
        &self.0
    }

    pub fn into_inner(self) -> RunConfig {
        self.0
    }
}

impl std::ops::Deref for ValidatedConfig {
    type Target = RunConfig;

    fn deref(&self) -> &RunConfig {
        &self.0
    }
}

/// Smallest odd integer `>= w`.
pub fn normalize_window(w: usize) -> usize {
    if w.is_multiple_of(2) {
        w + 1
    } else {
        w
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn check(&mut self, ok: bool, field: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.0.push(Violation {
                field: field.into(),
                message: message.into(),
            });
        }
    }
}

/// Checks every invariant of the configuration and returns it normalized:
/// the moving-average window is made odd and a doubly specified bath window
/// keeps only `by_index`. All violations are reported together.
pub fn validate(config: &RunConfig) -> std::result::Result<ValidatedConfig, Vec<Violation>> {
    let mut c = Collector(Vec::new());

    let sys = &config.system;
    let d = sys.energies.len();
    c.check(d >= 2, "system.energies", "need at least 2 levels");
    c.check(
        sys.energies.iter().all(|e| e.is_finite()),
        "system.energies",
        "non-finite energy",
    );
    c.check(
        sys.energies.windows(2).all(|w| w[0] < w[1]),
        "system.energies",
        "not ascending",
    );
    if sys.x.len() != d || sys.x.iter().any(|row| row.len() != d) {
        c.check(false, "system.x", format!("must be a {d}x{d} matrix"));
    } else {
        for i in 0..d {
            c.check(
                sys.x[i].iter().all(|v| v.is_finite()),
                format!("system.x[{i}]"),
                "non-finite entry",
            );
            c.check(
                sys.x[i][i] == 0.0,
                format!("system.x[{i}][{i}]"),
                "nonzero diagonal",
            );
            for j in (i + 1)..d {
                c.check(
                    sys.x[i][j] == sys.x[j][i],
                    format!("system.x[{i}][{j}]"),
                    "not symmetric",
                );
            }
        }
    }

    let bath = &config.bath;
    c.check(bath.n_states >= 2, "bath.n_states", "need at least 2 states");
    c.check(
        bath.e_min.is_finite() && bath.e_max.is_finite(),
        "bath.e_min",
        "non-finite energy range",
    );
    c.check(bath.e_min < bath.e_max, "bath.e_max", "must exceed bath.e_min");
    c.check(
        bath.beta > 0.0 && bath.beta.is_finite(),
        "bath.beta",
        "must be positive",
    );
    c.check(
        bath.eta_factor > 0.0 && bath.eta_factor.is_finite(),
        "bath.eta_factor",
        "must be positive",
    );
    c.check(
        bath.level_jitter >= 0.0 && bath.level_jitter.is_finite(),
        "bath.level_jitter",
        "must be nonnegative",
    );

    c.check(
        config.coupling.g >= 0.0 && config.coupling.g.is_finite(),
        "coupling.g",
        "must be nonnegative",
    );

    let init = &config.initial;
    c.check(
        init.system_level < d,
        "initial.system_level",
        format!("must be below the system dimension {d}"),
    );
    let window = &init.bath_window;
    match (window.by_index, window.by_energy) {
        (None, None) => c.check(
            false,
            "initial.bath_window",
            "need by_index or by_energy",
        ),
        (Some((first, count)), _) => {
            c.check(count >= 1, "initial.bath_window.by_index", "empty window");
            c.check(
                first.checked_add(count).is_some_and(|end| end <= bath.n_states),
                "initial.bath_window.by_index",
                format!("window exceeds the {} bath states", bath.n_states),
            );
        }
        (None, Some((lo, hi))) => c.check(
            lo.is_finite() && hi.is_finite() && lo <= hi,
            "initial.bath_window.by_energy",
            "need finite e_lo <= e_hi",
        ),
    }

    c.check(
        config.evolve.t_max > 0.0 && config.evolve.t_max.is_finite(),
        "evolve.t_max",
        "must be positive",
    );
    c.check(config.eth.ma_window >= 1, "eth.ma_window", "must be at least 1");

    if !c.0.is_empty() {
        return Err(c.0);
    }

    let mut normalized = config.clone();
    normalized.eth.ma_window = normalize_window(normalized.eth.ma_window);
    if normalized.initial.bath_window.by_index.is_some() {
        normalized.initial.bath_window.by_energy = None;
    }
    Ok(ValidatedConfig(normalized))
}

/// The full-scale 4-level / 5000-state reference configuration.
pub fn full_scale_config() -> RunConfig {
    let (x12, x13, x14, x23, x24, x34) = (-0.7, 0.3, -0.9, -1.2, -0.4, 0.4);
    RunConfig {
        system: SystemSpec {
            energies: vec![0.5, 1.5, 2.2, 4.0],
            x: vec![
                vec![0.0, x12, x13, x14],
                vec![x12, 0.0, x23, x24],
                vec![x13, x23, 0.0, x34],
                vec![x14, x24, x34, 0.0],
            ],
        },
        bath: BathSpec {
            n_states: 5000,
            e_min: 3.0,
            e_max: 20.0465,
            beta: 0.4,
            placement: Placement::InverseCdf,
            eta_factor: 100.0,
            coupling_seed: 1,
            level_jitter: 0.0,
        },
        coupling: CouplingSpec { g: 5e-3 },
        initial: InitialCondition {
            system_level: 0,
            bath_window: BathWindow::energy(12.4, 14.1),
            phase_mode: PhaseMode::ComplexPhases,
            phase_seed: 2,
        },
        evolve: EvolveSpec {
            t_max: 2000.0,
            n_steps: 2000,
        },
        eth: EthSpec { ma_window: 200 },
        output_dir: default_output_dir(),
        cache: true,
    }
}

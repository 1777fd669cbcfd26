//! Command pipeline behind the `qbath` binary: configuration loading, cache
//! handling, artifact emission and run manifests.
//!
//! Every command validates the configuration first (exit code 2), checks the
//! memory estimate against the ceiling before allocating anything large
//! (exit code 3), and writes its artifacts plus a manifest into the output
//! directory. `--dry-run` stops after the estimate and writes nothing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bath::BathRealization;
use crate::error::{Error, Result};
use crate::eth::{eth_deviation, g0_counting_check, write_overlap_csv, EthProfile, LevelDeviation, SpectrumBand};
use crate::hashing::{file_digest, hamiltonian_hash, physics_hash};
use crate::model::{validate, RunConfig, ValidatedConfig};
use crate::observables::{boltzmann, diagonal_ensemble, evolve_series, steady_statistics, LevelStatistics};
use crate::spectral::{overlap_distribution, prepare_initial, SpectralDecomposition};
use crate::universe::{MemoryEstimate, UniverseHamiltonian};

/// Bumped whenever an output format or a seeded draw order changes.
pub const ARTIFACT_VERSION: u32 = 1;

pub const SPECTRAL_CACHE: &str = "spectral.qbs";
pub const BATH_CACHE: &str = "bath.qbr";

/// Mid-spectrum band used by the ETH summary: the central half of the
/// energy span. The lowest eigenstates by index serve as the edge band.
pub const MID_BAND: SpectrumBand = SpectrumBand::EnergyFraction { lo: 0.25, hi: 0.75 };
pub const MID_BAND_BY_INDEX: SpectrumBand = SpectrumBand::IndexFraction { lo: 0.25, hi: 0.75 };
pub const EDGE_BAND: SpectrumBand = SpectrumBand::IndexFraction { lo: 0.0, hi: 0.05 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Build,
    Evolve,
    Eth,
    Thermal,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Build => "build",
            Command::Evolve => "evolve",
            Command::Eth => "eth",
            Command::Thermal => "thermal",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: PathBuf,
    pub output_dir: Option<PathBuf>,
    /// `NAME=VALUE` pairs; names are `coupling_seed` and `phase_seed`.
    pub seed_overrides: Vec<String>,
    pub dry_run: bool,
    /// 0 selects the rayon default.
    pub threads: usize,
    /// Bytes; `None` uses [`default_memory_limit`].
    pub memory_limit: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Seeds {
    pub coupling_seed: u64,
    pub phase_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    pub command: Command,
    /// Normalized configuration; a manifest can be passed back as `--config`.
    pub config: RunConfig,
    pub seeds: Seeds,
    pub config_hash: String,
    pub hamiltonian_hash: String,
    pub threads: usize,
    pub stages: Vec<StageTiming>,
    pub memory_estimate: Option<MemoryEstimate>,
    /// Peak resident set size of the process, when the platform reports it.
    pub peak_rss_bytes: Option<u64>,
    pub outputs: Vec<OutputFile>,
}

/// What a command did, for the binary to print.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub manifest: Option<PathBuf>,
    pub report: Vec<String>,
}

/// Loads a TOML config, or the `config` field of a JSON run manifest.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
        let config = value
            .get_mut("config")
            .map(serde_json::Value::take)
            .ok_or_else(|| parse("manifest has no `config` field".into()))?;
        return serde_json::from_value(config).map_err(|e| parse(e.to_string()));
    }
    RunConfig::load(path)
}

pub fn apply_seed_override(config: &mut RunConfig, spec: &str) -> Result<()> {
    let (name, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidInput(format!("seed override `{spec}` is not NAME=VALUE")))?;
    let value: u64 = value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("seed override `{spec}`: value is not a u64")))?;
    match name.trim() {
        "coupling_seed" | "bath.coupling_seed" => config.bath.coupling_seed = value,
        "phase_seed" | "initial.phase_seed" => config.initial.phase_seed = value,
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown seed `{other}` (expected coupling_seed or phase_seed)"
            )))
        }
    }
    Ok(())
}

/// Parses byte sizes such as `512M`, `1G`, `1.5GiB` or a plain integer.
pub fn parse_size(text: &str) -> Result<u64> {
    let t = text.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let num: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("cannot parse size `{text}`")))?;
    let scale: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        "t" | "tb" | "tib" => 1 << 40,
        _ => return Err(Error::InvalidInput(format!("unknown size unit in `{text}`"))),
    };
    if num.is_nan() || num < 0.0 {
        return Err(Error::InvalidInput(format!("negative size `{text}`")));
    }
    Ok((num * scale as f64) as u64)
}

/// 90% of physical memory when it can be read, otherwise unlimited.
pub fn default_memory_limit() -> u64 {
    std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|text| {
            let line = text.lines().find(|l| l.starts_with("MemTotal:"))?;
            let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
            Some(kib * 1024 / 10 * 9)
        })
        .unwrap_or(u64::MAX)
}

fn peak_rss_bytes() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = text.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

/// Loads, overrides and validates the configuration named by `opts`.
pub fn resolve_config(opts: &Options) -> Result<ValidatedConfig> {
    let mut config = load_config(&opts.config)?;
    for spec in &opts.seed_overrides {
        apply_seed_override(&mut config, spec)?;
    }
    if let Some(dir) = &opts.output_dir {
        config.output_dir = dir.clone();
    }
    validate(&config).map_err(Error::Validation)
}

/// Runs `command` on a rayon pool with the requested thread count.
pub fn run(command: Command, opts: &Options) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start thread pool: {e}")))?;
    let config = resolve_config(opts)?;
    let mut ctx = Context {
        command,
        config,
        dry_run: opts.dry_run,
        threads: pool.current_num_threads(),
        memory_limit: opts.memory_limit.unwrap_or_else(default_memory_limit),
        stages: Vec::new(),
        outputs: Vec::new(),
        estimate: None,
        report: Vec::new(),
    };
    pool.install(|| match command {
        Command::Build => cmd_build(&mut ctx),
        Command::Evolve => cmd_evolve(&mut ctx),
        Command::Eth => cmd_eth(&mut ctx),
        Command::Thermal => cmd_thermal(&mut ctx),
    })?;
    if ctx.dry_run {
        return Ok(Outcome {
            manifest: None,
            report: ctx.report,
        });
    }
    let manifest = ctx.write_manifest()?;
    Ok(Outcome {
        manifest: Some(manifest),
        report: ctx.report,
    })
}

struct Context {
    command: Command,
    config: ValidatedConfig,
    dry_run: bool,
    threads: usize,
    memory_limit: u64,
    stages: Vec<StageTiming>,
    outputs: Vec<String>,
    estimate: Option<MemoryEstimate>,
    report: Vec<String>,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let value = f()?;
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        Ok(value)
    }

    fn ensure_output_dir(&self) -> Result<()> {
        let dir = &self.config.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    /// Memory check plus a dry-run report. Returns `false` for dry runs.
    fn check_memory(&mut self) -> Result<bool> {
        let estimate = MemoryEstimate::for_dims(self.config.system.dim(), self.config.bath.n_states);
        self.estimate = Some(estimate);
        self.report.push(format!(
            "D = {}: estimated {} bytes ({:.2} GiB), eigensolver about {:.0} s",
            estimate.dim,
            estimate.total_bytes,
            estimate.total_bytes as f64 / (1u64 << 30) as f64,
            estimate.eigensolver_seconds_estimate(),
        ));
        estimate.check(self.memory_limit)?;
        Ok(!self.dry_run)
    }

    fn hamiltonian_hash(&self) -> crate::hashing::Hash32 {
        let c = &self.config;
        hamiltonian_hash(&c.system, &c.bath, &c.coupling)
    }

    /// The bath, Hamiltonian and decomposition, from cache or built inline.
    fn spectral(&mut self) -> Result<(BathRealization, UniverseHamiltonian, SpectralDecomposition)> {
        let key = self.hamiltonian_hash();
        if self.config.cache {
            let bath_path = self.out(BATH_CACHE);
            let spectral_path = self.out(SPECTRAL_CACHE);
            let spec = self.config.bath.clone();
            let bath = self.timed("load_bath", || BathRealization::read_qbr(&bath_path, &spec))?;
            let sd = self.timed("load_spectral", || SpectralDecomposition::read_qbs(&spectral_path, &key))?;
            let g = self.config.coupling.g;
            let system = self.config.system.clone();
            let h = self.timed("assemble", || Ok(UniverseHamiltonian::assemble(&system, &bath, g)))?;
            if sd.dim() != h.dim() {
                return Err(Error::cache(spectral_path, "dimension mismatch"));
            }
            return Ok((bath, h, sd));
        }
        self.build_spectral(key)
    }

    fn build_spectral(
        &mut self,
        key: crate::hashing::Hash32,
    ) -> Result<(BathRealization, UniverseHamiltonian, SpectralDecomposition)> {
        let spec = self.config.bath.clone();
        let bath = self.timed("bath", || Ok(BathRealization::generate(&spec)))?;
        let system = self.config.system.clone();
        let g = self.config.coupling.g;
        let h = self.timed("assemble", || Ok(UniverseHamiltonian::assemble(&system, &bath, g)))?;
        let sd = self.timed("diagonalize", || SpectralDecomposition::diagonalize(&h, key))?;
        Ok((bath, h, sd))
    }

    fn write_manifest(&self) -> Result<PathBuf> {
        self.ensure_output_dir()?;
        let outputs = self
            .outputs
            .iter()
            .map(|name| {
                Ok(OutputFile {
                    name: name.clone(),
                    sha256: file_digest(&self.out(name))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let config = self.config.config().clone();
        let manifest = RunManifest {
            artifact_version: ARTIFACT_VERSION,
            command: self.command,
            seeds: Seeds {
                coupling_seed: config.bath.coupling_seed,
                phase_seed: config.initial.phase_seed,
            },
            config_hash: hex::encode(physics_hash(&config)),
            hamiltonian_hash: hex::encode(self.hamiltonian_hash()),
            config,
            threads: self.threads,
            stages: self.stages.clone(),
            memory_estimate: self.estimate,
            peak_rss_bytes: peak_rss_bytes(),
            outputs,
        };
        let name = match self.command {
            Command::Evolve => format!("manifest_evolve_s{}.json", self.config.initial.system_level + 1),
            other => format!("manifest_{}.json", other.name()),
        };
        let path = self.out(&name);
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest types serialize to JSON");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// File name of the populations CSV for a 0-based initial system level.
pub fn populations_file(system_level: usize) -> String {
    format!("populations_s{}.csv", system_level + 1)
}

fn cmd_build(ctx: &mut Context) -> Result<()> {
    if !ctx.check_memory()? {
        return Ok(());
    }
    let key = ctx.hamiltonian_hash();
    let (bath, _h, sd) = ctx.build_spectral(key)?;
    ctx.ensure_output_dir()?;
    let bath_path = ctx.out(BATH_CACHE);
    let spectral_path = ctx.out(SPECTRAL_CACHE);
    ctx.timed("write_cache", || {
        bath.write_qbr(&bath_path)?;
        sd.write_qbs(&spectral_path)
    })?;
    ctx.record(SPECTRAL_CACHE);
    ctx.record(BATH_CACHE);
    ctx.report.push(format!(
        "diagonalized D = {}; eigenvalues in [{:.6}, {:.6}]",
        sd.dim(),
        sd.eigenvalues[0],
        sd.eigenvalues[sd.dim() - 1]
    ));
    Ok(())
}

fn cmd_evolve(ctx: &mut Context) -> Result<()> {
    if !ctx.check_memory()? {
        return Ok(());
    }
    let (bath, h, sd) = ctx.spectral()?;
    let psi0 = prepare_initial(&ctx.config.system, &bath, &ctx.config.initial)?;
    let times = ctx.config.evolve.time_grid();
    let series = ctx.timed("evolve", || Ok(evolve_series(&sd, &h, &psi0, &times)))?;
    ctx.ensure_output_dir()?;
    let name = populations_file(ctx.config.initial.system_level);
    let path = ctx.out(&name);
    series.write_csv(&path)?;
    ctx.record(&name);
    let last = series.populations.last().expect("time grid is never empty");
    ctx.report.push(format!(
        "{} samples; p(t_max) = {:?}; norm drift {:.2e}",
        series.len(),
        last,
        series.max_norm_drift()
    ));
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandDeviation {
    pub band: SpectrumBand,
    pub first: usize,
    pub end: usize,
    pub levels: Vec<LevelDeviation>,
}

fn band_deviation(profile: &EthProfile, thermal: &crate::observables::ThermalReference, band: SpectrumBand) -> Result<BandDeviation> {
    let range = band.resolve(&profile.eigen_energies);
    Ok(BandDeviation {
        band,
        first: range.start,
        end: range.end,
        levels: eth_deviation(profile, thermal, range.clone())?,
    })
}

fn cmd_eth(ctx: &mut Context) -> Result<()> {
    if !ctx.check_memory()? {
        return Ok(());
    }
    let (bath, _h, sd) = ctx.spectral()?;
    let config = ctx.config.config().clone();
    let d = config.system.dim();
    let profile = ctx.timed("eigenstate_values", || Ok(EthProfile::compute(&sd, d, config.eth.ma_window)))?;
    let psi0 = prepare_initial(&config.system, &bath, &config.initial)?;
    let overlaps = overlap_distribution(&sd, &psi0);
    let thermal = boltzmann(&config.system.energies, config.bath.beta);

    // Diagonal-ensemble prediction for every initial system level, keeping the
    // configured bath window and phases.
    let mut predictions = Vec::with_capacity(d);
    for s0 in 0..d {
        let mut initial = config.initial.clone();
        initial.system_level = s0;
        let psi = prepare_initial(&config.system, &bath, &initial)?;
        predictions.push(json!({
            "system_level": s0 + 1,
            "populations": diagonal_ensemble(&overlap_distribution(&sd, &psi), &profile.eigenstate_values),
        }));
    }

    // Counting check over the universe energies occupied by the initial state.
    let window = bath.resolve_window(&config.initial.bath_window)?;
    let e_s0 = config.system.energies[config.initial.system_level];
    let (lo, hi) = (bath.levels[window.start] + e_s0, bath.levels[window.end - 1] + e_s0);
    let g0 = match g0_counting_check(&config.system, &bath.levels, lo, hi) {
        Ok(fractions) => json!({ "energy_window": [lo, hi], "fractions": fractions }),
        Err(e) => json!({ "energy_window": [lo, hi], "fractions": null, "message": e.to_string() }),
    };

    let q = &profile.eigenstate_values;
    let min_row_max = (0..profile.dim())
        .map(|k| (0..d).map(|s| q[(k, s)]).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min);

    let summary = json!({
        "window": profile.window,
        "thermal": thermal,
        "eth_deviation": {
            "mid": band_deviation(&profile, &thermal, MID_BAND)?,
            "mid_by_index": band_deviation(&profile, &thermal, MID_BAND_BY_INDEX)?,
            "edge": band_deviation(&profile, &thermal, EDGE_BAND)?,
        },
        "g0_counting_check": g0,
        "diagonal_ensemble": predictions,
        "q_spot_check": {
            "min_over_k_of_max_s_q": min_row_max,
            "max_row_sum_error": profile.max_row_sum_error(),
        },
    });

    ctx.ensure_output_dir()?;
    let eth_path = ctx.out("eth.csv");
    let overlap_path = ctx.out("overlap.csv");
    let summary_path = ctx.out("eth_summary.json");
    ctx.timed("write", || {
        profile.write_csv(&eth_path)?;
        write_overlap_csv(&overlap_path, &profile.eigen_energies, &overlaps)?;
        write_json(&summary_path, &summary)
    })?;
    for name in ["eth.csv", "overlap.csv", "eth_summary.json"] {
        ctx.record(name);
    }
    ctx.report.push(format!("eigenstate values for D = {} written", profile.dim()));
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThermalSummary {
    pub beta: f64,
    pub z: f64,
    pub energies: Vec<f64>,
    pub populations: Vec<f64>,
}

fn cmd_thermal(ctx: &mut Context) -> Result<()> {
    let config = ctx.config.config();
    let thermal = boltzmann(&config.system.energies, config.bath.beta);
    let summary = ThermalSummary {
        beta: thermal.beta,
        z: thermal.z,
        energies: config.system.energies.clone(),
        populations: thermal.populations.clone(),
    };
    ctx.report.push(format!("beta = {}, p_th = {:?}", summary.beta, summary.populations));
    if ctx.dry_run {
        return Ok(());
    }
    ctx.ensure_output_dir()?;
    write_json(&ctx.out("thermal.json"), &summary)?;
    ctx.record("thermal.json");
    Ok(())
}

/// Steady-state statistics of a populations CSV written by `evolve`, over
/// `t >= t_start`.
pub fn read_steady_statistics(path: &Path, t_start: f64) -> Result<Vec<LevelStatistics>> {
    let series = read_populations_csv(path)?;
    steady_statistics(&series, t_start)
}

pub fn read_populations_csv(path: &Path) -> Result<crate::observables::PopulationSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| parse("empty file".into()))?.split(',').collect();
    let d = header.len().checked_sub(3).filter(|&d| d > 0).ok_or_else(|| parse("bad header".into()))?;
    let mut series = crate::observables::PopulationSeries {
        times: Vec::new(),
        populations: Vec::new(),
        energy: Vec::new(),
        norm: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse(format!("row {}: {e}", i + 2)))?;
        if row.len() != d + 3 {
            return Err(parse(format!("row {} has {} columns", i + 2, row.len())));
        }
        series.times.push(row[0]);
        series.populations.push(row[1..=d].to_vec());
        series.energy.push(row[d + 1]);
        series.norm.push(row[d + 2]);
    }
    Ok(series)
}

//! Configuration-driven command-line front end wiring the modules into the
//! measurement pipelines: simulation, mode analysis, propagation sweeps,
//! fitting/reconstruction of external data, and the gated demultiplexer.
//!
//! Every run is reproducible from `(config, seed)`: re-running a subcommand
//! with the same inputs produces bitwise-identical outputs.

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::fockspace::GaussianStateSpec;
use crate::modes::{
    apply_filter, compute_jsa, schmidt_decompose, JsaGrid, ModesError, SchmidtDecomposition,
};
use crate::opa::{marginals_from_csv, marginals_to_csv, Histogram, OpaError};
use crate::pulseprop::{
    demux_simulate, gain_curve_to_csv, gain_vs_energy, vacuum_histogram, GainPoint,
    PropError, PropagationConfig, WaveguideDispersion,
};
use crate::tomography::{
    analyze_histogram_set, simulate_marginals, AnalysisConfig, FitResult, HistogramSet,
    ReconstructionResult, RunMetadata, ScoreReport, TomoError, TomographyConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Errors mapped onto the process exit codes: config 2, numerical-contract 3,
/// I/O 4.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical contract failure: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TomoError> for CliError {
    fn from(e: TomoError) -> Self {
        match e {
            TomoError::LikelihoodDecrease { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PropError> for CliError {
    fn from(e: PropError) -> Self {
        match e {
            PropError::Resolution(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModesError> for CliError {
    fn from(e: ModesError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<OpaError> for CliError {
    fn from(e: OpaError) -> Self {
        CliError::Config(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "opatomo", version, about = "Squeezed-vacuum tomography toolkit")]
pub struct Cli {
    /// JSON run configuration; defaults are used when omitted where possible.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the config's random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for parameter sweeps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Simulate a pulse train and run the full analysis chain.
    Simulate,
    /// Joint spectral amplitude, Schmidt weights, and mode profiles.
    Modes,
    /// Split-step gain curves and pseudo-vacuum histograms.
    Prop,
    /// Two-mode fitting of external marginal files.
    Fit,
    /// Full analysis (calibrate, fit, reconstruct) of external files.
    Reconstruct,
    /// Gated demultiplexer routing check.
    Demux,
}

impl Command {
    fn pipeline_name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Modes => "modes",
            Command::Prop => "prop",
            Command::Fit => "fit",
            Command::Reconstruct => "reconstruct",
            Command::Demux => "demux",
        }
    }
}

/// Flat JSON run configuration with a `pipeline` discriminator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "pipeline", rename_all = "snake_case")]
pub enum RunConfig {
    Simulate(TomographyConfig),
    Modes(ModesConfig),
    Prop(PropSweepConfig),
    Fit(FilesConfig),
    Reconstruct(ReconstructConfig),
    Demux(DemuxConfig),
}

impl RunConfig {
    fn pipeline_name(&self) -> &'static str {
        match self {
            RunConfig::Simulate(_) => "simulate",
            RunConfig::Modes(_) => "modes",
            RunConfig::Prop(_) => "prop",
            RunConfig::Fit(_) => "fit",
            RunConfig::Reconstruct(_) => "reconstruct",
            RunConfig::Demux(_) => "demux",
        }
    }

    fn override_seed(&mut self, seed: u64) {
        match self {
            RunConfig::Simulate(c) => c.seed = seed,
            RunConfig::Modes(c) => c.seed = seed,
            RunConfig::Prop(c) => c.seed = seed,
            RunConfig::Fit(c) => c.seed = seed,
            RunConfig::Reconstruct(c) => c.seed = seed,
            RunConfig::Demux(c) => c.seed = seed,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            RunConfig::Simulate(c) => c.seed,
            RunConfig::Modes(c) => c.seed,
            RunConfig::Prop(c) => c.seed,
            RunConfig::Fit(c) => c.seed,
            RunConfig::Reconstruct(c) => c.seed,
            RunConfig::Demux(c) => c.seed,
        }
    }
}

/// JSA / Schmidt-mode analysis parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModesConfig {
    pub pump_center_nm: f64,
    pub pump_duration_fs: f64,
    pub length_mm: f64,
    pub grid_points: usize,
    pub span_thz: f64,
    /// Optional signal-band filter applied before the second decomposition.
    pub filter_band_nm: Option<(f64, f64)>,
    /// Effective-index table CSV; the bundled waveguide table when omitted.
    pub dispersion_csv: Option<PathBuf>,
    pub max_modes: usize,
    pub seed: u64,
}

impl Default for ModesConfig {
    fn default() -> Self {
        Self {
            pump_center_nm: 930.0,
            pump_duration_fs: 70.0,
            length_mm: 2.5,
            grid_points: 512,
            span_thz: 60.0,
            filter_band_nm: None,
            dispersion_csv: None,
            max_modes: 8,
            seed: 0,
        }
    }
}

/// Pump-energy sweep and pseudo-vacuum histogram parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PropSweepConfig {
    pub kappa: f64,
    pub length_mm: f64,
    pub step_count: usize,
    pub signal_nm: f64,
    pub pump_fwhm_fs: f64,
    pub energies_pj: Vec<f64>,
    pub seed_energy_pj: f64,
    /// Pump energies for the pseudo-vacuum histograms.
    pub histogram_energies_pj: Vec<f64>,
    pub histogram_trials: usize,
    pub histogram_bins: usize,
    pub filter_band_nm: Option<(f64, f64)>,
    pub dispersion_csv: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PropSweepConfig {
    fn default() -> Self {
        Self {
            kappa: 0.15,
            length_mm: 2.5,
            step_count: 100,
            signal_nm: 1860.0,
            pump_fwhm_fs: 70.0,
            energies_pj: (0..12).map(|i| 0.05 * 2f64.powi(i)).collect(),
            seed_energy_pj: 0.01,
            histogram_energies_pj: vec![],
            histogram_trials: 60,
            histogram_bins: 40,
            filter_band_nm: None,
            dispersion_csv: None,
            seed: 1,
        }
    }
}

/// External marginal files plus the run manifest fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilesConfig {
    pub marginals_csv: PathBuf,
    /// Shutter-closed reference; required.
    pub vacuum_csv: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

/// External-file analysis: fitting plus reconstruction parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructConfig {
    pub marginals_csv: PathBuf,
    pub vacuum_csv: Option<PathBuf>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_resamples: usize,
    /// Expected state for scoring, as (squeezing dB, anti-squeezing dB).
    #[serde(default)]
    pub expected_db: Option<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    crate::fockspace::DEFAULT_DIM
}
fn default_max_iters() -> usize {
    600
}
fn default_tol() -> f64 {
    1e-6
}
fn default_bootstrap() -> usize {
    100
}

/// Gated demultiplexer parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DemuxConfig {
    pub stream_rate_thz: f64,
    pub channels: usize,
    pub gate_gain_db: f64,
    pub pulse_count: usize,
    pub seed: u64,
}

impl Default for DemuxConfig {
    fn default() -> Self {
        Self {
            stream_rate_thz: 6.48,
            channels: 4,
            gate_gain_db: 40.0,
            pulse_count: 16,
            seed: 0,
        }
    }
}

/// Provenance sidecar written with every run.
#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub pipeline: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<String>,
}

/// Report schema shared by simulate and reconstruct.
#[derive(Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub fidelity: Option<f64>,
    pub max_delta_abs: Option<f64>,
    pub squeezing_db: f64,
    pub squeezing_std_db: f64,
    pub antisqueezing_db: f64,
    pub antisqueezing_std_db: f64,
    pub gain: f64,
    pub offset: f64,
    pub iterations_used: usize,
    pub final_log_likelihood: f64,
    pub complete: bool,
}

/// Parse CLI arguments, execute, and return the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Execute a parsed invocation; separated from [`run`] for testing.
pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        // Ignore the error if a global pool already exists (tests, repeats).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let mut config = load_config(cli)?;
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    if config.pipeline_name() != cli.command.pipeline_name() {
        return Err(CliError::Config(format!(
            "config pipeline '{}' does not match subcommand '{}'",
            config.pipeline_name(),
            cli.command.pipeline_name()
        )));
    }
    fs::create_dir_all(&cli.out)?;
    let outputs = match &config {
        RunConfig::Simulate(c) => cmd_simulate(c, &cli.out)?,
        RunConfig::Modes(c) => cmd_modes(c, &cli.out)?,
        RunConfig::Prop(c) => cmd_prop(c, &cli.out)?,
        RunConfig::Fit(c) => cmd_fit(c, &cli.out)?,
        RunConfig::Reconstruct(c) => cmd_reconstruct(c, &cli.out)?,
        RunConfig::Demux(c) => cmd_demux(c, &cli.out)?,
    };
    write_provenance(&config, &cli.out, outputs)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Config(format!(
                    "{} at line {}, column {}",
                    e, e.line(), e.column()
                ))
            })
        }
        None => match cli.command {
            Command::Simulate => Ok(RunConfig::Simulate(TomographyConfig::default())),
            Command::Modes => Ok(RunConfig::Modes(ModesConfig::default())),
            Command::Prop => Ok(RunConfig::Prop(PropSweepConfig::default())),
            Command::Demux => Ok(RunConfig::Demux(DemuxConfig::default())),
            Command::Fit | Command::Reconstruct => Err(CliError::Config(
                "this subcommand needs --config with input file paths".into(),
            )),
        },
    }
}

fn write_provenance(config: &RunConfig, out: &Path, outputs: Vec<String>) -> Result<()> {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").unwrap();
    }
    let prov = Provenance {
        pipeline: config.pipeline_name().to_string(),
        config_sha256: hex,
        seed: config.seed(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs,
    };
    write_text(
        out,
        "provenance.json",
        &serde_json::to_string_pretty(&prov).expect("provenance serializes"),
    )?;
    Ok(())
}

fn write_text(out: &Path, name: &str, text: &str) -> Result<String> {
    let path = out.join(name);
    fs::write(&path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(name.to_string())
}

fn load_dispersion(path: &Option<PathBuf>) -> Result<WaveguideDispersion> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("reading {}: {e}", p.display())))?;
            WaveguideDispersion::from_csv(&text).map_err(CliError::from)
        }
        None => Ok(WaveguideDispersion::device_fixture()),
    }
}

fn analysis_report(
    fit: &FitResult,
    rec: &ReconstructionResult,
    report: Option<&ScoreReport>,
) -> AnalysisReport {
    AnalysisReport {
        fidelity: report.map(|r| r.fidelity),
        max_delta_abs: report.map(|r| r.max_delta_abs),
        squeezing_db: rec.squeezing_db,
        squeezing_std_db: rec.squeezing_std_db,
        antisqueezing_db: rec.antisqueezing_db,
        antisqueezing_std_db: rec.antisqueezing_std_db,
        gain: fit.gain,
        offset: fit.offset,
        iterations_used: rec.iterations_used,
        final_log_likelihood: rec.final_log_likelihood,
        complete: rec.complete,
    }
}

fn write_analysis_outputs(
    out: &Path,
    fit: &FitResult,
    rec: &ReconstructionResult,
    report: Option<&ScoreReport>,
) -> Result<Vec<String>> {
    let mut files = Vec::new();
    files.push(write_text(
        out,
        "fit.json",
        &serde_json::to_string_pretty(fit).expect("fit serializes"),
    )?);
    files.push(write_text(
        out,
        "rho.json",
        &serde_json::to_string_pretty(&rec.rho.to_json()).expect("rho serializes"),
    )?);
    files.push(write_text(out, "wigner.csv", &rec.wigner.to_csv())?);
    files.push(write_text(
        out,
        "report.json",
        &serde_json::to_string_pretty(&analysis_report(fit, rec, report))
            .expect("report serializes"),
    )?);
    let rows: Vec<Vec<f64>> = (0..rec.wigner.values.nrows())
        .map(|i| {
            (0..rec.wigner.values.ncols())
                .map(|j| rec.wigner.values[(i, j)])
                .collect()
        })
        .collect();
    files.push(write_text(
        out,
        "wigner.svg",
        &svg_heatmap(&rows, "x", "p", "Wigner function"),
    )?);
    let phases: Vec<f64> = fit.phases.clone();
    let vac_mean = (2.0 * fit.gain).exp() / 4.0;
    let db: Vec<f64> = fit
        .models
        .iter()
        .map(|m| 10.0 * (m.mean1 / vac_mean).log10())
        .collect();
    files.push(write_text(
        out,
        "variance.svg",
        &svg_line(&phases, &db, "phase (rad)", "noise level (dB)"),
    )?);
    Ok(files)
}

fn cmd_simulate(cfg: &TomographyConfig, out: &Path) -> Result<Vec<String>> {
    let state = GaussianStateSpec::from_db(cfg.squeezing_db, cfg.antisqueezing_db)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let (marginals, vacuum) = simulate_marginals(cfg)?;
    let marginals_text = marginals_to_csv(&marginals);
    let vacuum_text = marginals_to_csv(&vacuum);
    let mut files = vec![
        write_text(out, "marginals.csv", &marginals_text)?,
        write_text(out, "vacuum.csv", &vacuum_text)?,
    ];
    // Analyze the re-parsed files, not the in-memory samples, so running
    // `reconstruct` on the emitted CSVs reproduces this report exactly.
    let set = HistogramSet::new(
        marginals_from_csv(&marginals_text)?,
        marginals_from_csv(&vacuum_text)?,
        RunMetadata {
            pump_energy_pj: None,
            seed: Some(cfg.seed),
            source: "simulated".into(),
        },
    )?;
    let (fit, rec, report) =
        analyze_histogram_set(&set, &AnalysisConfig::from(cfg), Some(&state))?;
    files.extend(write_analysis_outputs(out, &fit, &rec, report.as_ref())?);
    Ok(files)
}

#[derive(Debug, Serialize)]
struct ModesReport {
    schmidt_number: f64,
    filtered_schmidt_number: Option<f64>,
    weights: Vec<f64>,
    pump_center_nm: f64,
    pump_duration_fs: f64,
    length_mm: f64,
}

fn modes_profile_csv(dec: &SchmidtDecomposition, count: usize) -> String {
    let mut text = String::from("k,omega_rad_per_fs,re,im\n");
    for (k, mode) in dec.signal_modes.iter().take(count).enumerate() {
        for (w, a) in dec.signal_freqs.iter().zip(mode) {
            let _ = writeln!(text, "{k},{:.12e},{:.12e},{:.12e}", w, a.re, a.im);
        }
    }
    text
}

fn cmd_modes(cfg: &ModesConfig, out: &Path) -> Result<Vec<String>> {
    let dispersion = load_dispersion(&cfg.dispersion_csv)?;
    let grid = JsaGrid {
        points: cfg.grid_points,
        span_thz: cfg.span_thz,
    };
    let jsa = compute_jsa(
        &dispersion,
        cfg.pump_center_nm,
        cfg.pump_duration_fs,
        cfg.length_mm,
        grid,
    )?;
    let dec = schmidt_decompose(&jsa, cfg.max_modes);
    let filtered = cfg
        .filter_band_nm
        .map(|band| -> Result<SchmidtDecomposition> {
            Ok(schmidt_decompose(&apply_filter(&jsa, band)?, cfg.max_modes))
        })
        .transpose()?;

    let mut files = vec![
        write_text(out, "jsa.csv", &jsa.to_csv())?,
        write_text(out, "schmidt_weights.csv", &dec.weights_to_csv())?,
        write_text(out, "modes.csv", &modes_profile_csv(&dec, 4))?,
    ];
    if let Some(f) = &filtered {
        files.push(write_text(
            out,
            "schmidt_weights_filtered.csv",
            &f.weights_to_csv(),
        )?);
    }
    let report = ModesReport {
        schmidt_number: dec.schmidt_number(),
        filtered_schmidt_number: filtered.as_ref().map(|f| f.schmidt_number()),
        weights: dec.weights.clone(),
        pump_center_nm: cfg.pump_center_nm,
        pump_duration_fs: cfg.pump_duration_fs,
        length_mm: cfg.length_mm,
    };
    files.push(write_text(
        out,
        "report.json",
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?);
    let n = jsa.amplitude.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| jsa.amplitude[(i, j)].norm()).collect())
        .collect();
    files.push(write_text(
        out,
        "jsa.svg",
        &svg_heatmap(&rows, "signal detuning", "idler detuning", "|JSA|"),
    )?);
    let ks: Vec<f64> = (0..dec.weights.len()).map(|k| k as f64).collect();
    files.push(write_text(
        out,
        "weights.svg",
        &svg_line(&ks, &dec.weights, "mode index", "Schmidt weight"),
    )?);
    Ok(files)
}

#[derive(Debug, Serialize)]
struct PropReport {
    /// First energy where the measured gain falls >= 1 dB below the sqrt(E)
    /// extrapolation (saturation knee), if any.
    knee_energy_pj: Option<f64>,
    max_deviation_db: f64,
    histogram_peaks: Vec<HistogramPeak>,
}

#[derive(Debug, Serialize)]
struct HistogramPeak {
    pump_energy_pj: f64,
    filtered: bool,
    peak: f64,
    mean: f64,
}

fn histogram_csv(hist: &Histogram) -> String {
    let mut text = String::from("bin_center,count\n");
    for (i, &c) in hist.counts.iter().enumerate() {
        let center = 0.5 * (hist.bin_edges[i] + hist.bin_edges[i + 1]);
        let _ = writeln!(text, "{center:.12e},{c}");
    }
    text
}

/// Saturation knee: first swept energy whose measured gain sits at least
/// 1 dB below the undepleted extrapolation.
pub fn detect_knee(curve: &[GainPoint]) -> (Option<f64>, f64) {
    let mut knee = None;
    let mut max_dev = 0.0f64;
    for p in curve {
        let deficit = p.model_gain_db - p.gain_db;
        max_dev = max_dev.max(deficit);
        if knee.is_none() && deficit >= 1.0 {
            knee = Some(p.energy_pj);
        }
    }
    (knee, max_dev)
}

fn cmd_prop(cfg: &PropSweepConfig, out: &Path) -> Result<Vec<String>> {
    let dispersion = load_dispersion(&cfg.dispersion_csv)?;
    let prop = PropagationConfig {
        length_mm: cfg.length_mm,
        step_count: cfg.step_count.max(100),
        kappa: cfg.kappa,
        dispersion,
        noise_seed: cfg.seed,
    };
    let curve = gain_vs_energy(
        &prop,
        &cfg.energies_pj,
        cfg.pump_fwhm_fs,
        cfg.signal_nm,
        cfg.seed_energy_pj,
    )?;
    let mut files = vec![write_text(out, "gain_curve.csv", &gain_curve_to_csv(&curve))?];
    let (knee, max_dev) = detect_knee(&curve);

    let mut peaks = Vec::new();
    for (i, &energy) in cfg.histogram_energies_pj.iter().enumerate() {
        let unfiltered = vacuum_histogram(
            &prop,
            energy,
            cfg.histogram_trials,
            None,
            cfg.pump_fwhm_fs,
            cfg.signal_nm,
        )?;
        let hist = Histogram::from_samples(&unfiltered.samples, cfg.histogram_bins);
        files.push(write_text(
            out,
            &format!("hist_unfiltered_{i}.csv"),
            &histogram_csv(&hist),
        )?);
        peaks.push(HistogramPeak {
            pump_energy_pj: energy,
            filtered: false,
            peak: hist.peak_bin_center(),
            mean: unfiltered.mean(),
        });
        if let Some(band) = cfg.filter_band_nm {
            let filtered = vacuum_histogram(
                &prop,
                energy,
                cfg.histogram_trials,
                Some(band),
                cfg.pump_fwhm_fs,
                cfg.signal_nm,
            )?;
            let hist = Histogram::from_samples(&filtered.samples, cfg.histogram_bins);
            files.push(write_text(
                out,
                &format!("hist_filtered_{i}.csv"),
                &histogram_csv(&hist),
            )?);
            peaks.push(HistogramPeak {
                pump_energy_pj: energy,
                filtered: true,
                peak: hist.peak_bin_center(),
                mean: filtered.mean(),
            });
        }
    }

    let report = PropReport {
        knee_energy_pj: knee,
        max_deviation_db: max_dev,
        histogram_peaks: peaks,
    };
    files.push(write_text(
        out,
        "report.json",
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?);
    let xs: Vec<f64> = curve.iter().map(|p| p.energy_pj.sqrt()).collect();
    let ys: Vec<f64> = curve.iter().map(|p| p.gain_db).collect();
    files.push(write_text(
        out,
        "gain.svg",
        &svg_line(&xs, &ys, "sqrt(pump energy) (pJ^1/2)", "gain (dB)"),
    )?);
    Ok(files)
}

fn load_histogram_set(
    marginals_csv: &Path,
    vacuum_csv: &Option<PathBuf>,
    seed: u64,
) -> Result<HistogramSet> {
    let vacuum_path = vacuum_csv.as_ref().ok_or_else(|| {
        CliError::Config("manifest field 'vacuum_csv' is required and missing".into())
    })?;
    let marginals_text = fs::read_to_string(marginals_csv)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", marginals_csv.display())))?;
    let vacuum_text = fs::read_to_string(vacuum_path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", vacuum_path.display())))?;
    let marginals = marginals_from_csv(&marginals_text)?;
    let vacuum = marginals_from_csv(&vacuum_text)?;
    HistogramSet::new(
        marginals,
        vacuum,
        RunMetadata {
            pump_energy_pj: None,
            seed: Some(seed),
            source: marginals_csv.display().to_string(),
        },
    )
    .map_err(CliError::from)
}

fn cmd_fit(cfg: &FilesConfig, out: &Path) -> Result<Vec<String>> {
    let set = load_histogram_set(&cfg.marginals_csv, &cfg.vacuum_csv, cfg.seed)?;
    let fit = crate::tomography::fit_histogram_set(&set, None)?;
    Ok(vec![write_text(
        out,
        "fit.json",
        &serde_json::to_string_pretty(&fit).expect("fit serializes"),
    )?])
}

fn cmd_reconstruct(cfg: &ReconstructConfig, out: &Path) -> Result<Vec<String>> {
    let set = load_histogram_set(&cfg.marginals_csv, &cfg.vacuum_csv, cfg.seed)?;
    let expected = cfg
        .expected_db
        .map(|(s, a)| GaussianStateSpec::from_db(s, a))
        .transpose()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let acfg = AnalysisConfig {
        dim: cfg.dim,
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        seed: cfg.seed,
        bootstrap_resamples: cfg.bootstrap_resamples,
    };
    let (fit, rec, report) = analyze_histogram_set(&set, &acfg, expected.as_ref())?;
    write_analysis_outputs(out, &fit, &rec, report.as_ref())
}

fn cmd_demux(cfg: &DemuxConfig, out: &Path) -> Result<Vec<String>> {
    let report = demux_simulate(
        cfg.stream_rate_thz,
        cfg.channels,
        cfg.gate_gain_db,
        cfg.pulse_count,
    )?;
    Ok(vec![write_text(
        out,
        "demux.json",
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?])
}

// ---------------------------------------------------------------------------
// Minimal SVG emission. Plots are regenerable from the CSVs; nothing here is
// load-bearing for analysis.

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n<title>{title}</title>\n\
         <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    )
}

/// Line plot of y against x with labeled axes.
pub fn svg_line(xs: &[f64], ys: &[f64], xlabel: &str, ylabel: &str) -> String {
    let mut svg = svg_header(ylabel);
    if xs.len() == ys.len() && xs.len() >= 2 {
        let (x0, x1) = min_max(xs);
        let (y0, y1) = min_max(ys);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(1e-300) * (SVG_W - 2.0 * MARGIN);
        let sy = |y: f64| SVG_H - MARGIN - (y - y0) / (y1 - y0).max(1e-300) * (SVG_H - 2.0 * MARGIN);
        let mut points = String::new();
        for (x, y) in xs.iter().zip(ys) {
            let _ = write!(points, "{:.2},{:.2} ", sx(*x), sy(*y));
        }
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n",
            points.trim_end()
        );
        let _ = write!(
            svg,
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = MARGIN,
            b = SVG_H - MARGIN,
            r = SVG_W - MARGIN,
            t = MARGIN
        );
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{xlabel}</text>\n\
             <text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\" \
             transform=\"rotate(-90 14 {:.1})\">{ylabel}</text>\n",
            SVG_W / 2.0,
            SVG_H - 18.0,
            SVG_H / 2.0,
            SVG_H / 2.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grayscale heatmap of a row-major matrix, downsampled to at most 128 cells
/// per axis.
pub fn svg_heatmap(rows: &[Vec<f64>], xlabel: &str, ylabel: &str, title: &str) -> String {
    let mut svg = svg_header(title);
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if nr >= 2 && nc >= 2 {
        let stride_r = nr.div_ceil(128);
        let stride_c = nc.div_ceil(128);
        let mut vmax = 0.0f64;
        for row in rows {
            for &v in row {
                vmax = vmax.max(v.abs());
            }
        }
        let vmax = vmax.max(1e-300);
        let cells_r = nr.div_ceil(stride_r);
        let cells_c = nc.div_ceil(stride_c);
        let cw = (SVG_W - 2.0 * MARGIN) / cells_c as f64;
        let ch = (SVG_H - 2.0 * MARGIN) / cells_r as f64;
        for (ci, i) in (0..nr).step_by(stride_r).enumerate() {
            for (cj, j) in (0..nc).step_by(stride_c).enumerate() {
                let v = rows[i][j] / vmax;
                // Blue for negative, red for positive, white at zero.
                let (r, g, b) = if v >= 0.0 {
                    (255, (255.0 * (1.0 - v)) as u8, (255.0 * (1.0 - v)) as u8)
                } else {
                    ((255.0 * (1.0 + v)) as u8, (255.0 * (1.0 + v)) as u8, 255)
                };
                let _ = write!(
                    svg,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                     fill=\"rgb({r},{g},{b})\"/>\n",
                    MARGIN + cj as f64 * cw,
                    SVG_H - MARGIN - (ci as f64 + 1.0) * ch,
                    cw + 0.5,
                    ch + 0.5
                );
            }
        }
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{xlabel}</text>\n\
             <text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\" \
             transform=\"rotate(-90 14 {:.1})\">{ylabel}</text>\n",
            SVG_W / 2.0,
            SVG_H - 18.0,
            SVG_H / 2.0,
            SVG_H / 2.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in xs {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_mismatch_is_config_error() {
        let cli = Cli {
            config: None,
            seed: None,
            out: PathBuf::from("out"),
            threads: None,
            command: Command::Fit,
        };
        let err = execute(&cli).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::Demux(DemuxConfig::default());
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"pipeline\":\"demux\""));
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.pipeline_name(), "demux");
    }

    #[test]
    fn malformed_config_reports_position() {
        let err = serde_json::from_str::<RunConfig>("{\"pipeline\": \"demux\", \"channels\": }")
            .map(|_| ())
            .unwrap_err();
        assert!(err.line() >= 1);
    }

    #[test]
    fn knee_detection_finds_first_deficit() {
        let curve = vec![
            GainPoint { energy_pj: 1.0, gain_db: 10.0, model_gain_db: 10.0 },
            GainPoint { energy_pj: 2.0, gain_db: 12.0, model_gain_db: 12.5 },
            GainPoint { energy_pj: 4.0, gain_db: 13.0, model_gain_db: 14.5 },
            GainPoint { energy_pj: 8.0, gain_db: 14.0, model_gain_db: 17.0 },
        ];
        let (knee, max_dev) = detect_knee(&curve);
        assert_eq!(knee, Some(4.0));
        assert!((max_dev - 3.0).abs() < 1e-12);
    }

    #[test]
    fn svg_outputs_are_wellformed() {
        let line = svg_line(&[0.0, 1.0, 2.0], &[1.0, 0.5, 2.0], "x", "y");
        assert!(line.starts_with("<svg") && line.trim_end().ends_with("</svg>"));
        let heat = svg_heatmap(
            &[vec![0.0, 1.0], vec![-1.0, 0.5]],
            "x",
            "y",
            "test",
        );
        assert!(heat.contains("<rect") && heat.trim_end().ends_with("</svg>"));
    }
}

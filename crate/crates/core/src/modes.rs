//! Joint spectral amplitude construction, Schmidt decomposition, g²-based
//! mode counting, mode-overlap matrices, and the cascaded two-OPA mean
//! photon-number operator.
//!
//! Frequency grids are angular detunings from degeneracy in rad/fs, matching
//! the femtosecond units used by the propagation module.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pulseprop::{WaveguideDispersion, C_NM_PER_FS};

#[derive(Debug, Error)]
pub enum ModesError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("dispersion error: {0}")]
    Dispersion(#[from] crate::pulseprop::PropError),
}

pub type Result<T> = std::result::Result<T, ModesError>;

/// Frequency grid request for JSA construction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JsaGrid {
    pub points: usize,
    /// Half-span of the grid in THz (ordinary frequency detuning).
    pub span_thz: f64,
}

impl Default for JsaGrid {
    fn default() -> Self {
        Self {
            points: 512,
            span_thz: 60.0,
        }
    }
}

/// A normalized joint spectral amplitude J(Ω_s, Ω_i) on uniform detuning
/// grids.
#[derive(Debug, Clone)]
pub struct JointSpectralAmplitude {
    /// Signal detuning grid in rad/fs.
    pub signal_freqs: Vec<f64>,
    /// Idler detuning grid in rad/fs.
    pub idler_freqs: Vec<f64>,
    /// J(Ω_s, Ω_i), rows = signal, columns = idler; Σ|J|²·ΔΩΔΩ = 1.
    pub amplitude: DMatrix<Complex64>,
    /// Degeneracy (signal) wavelength in nm, kept for filter bookkeeping.
    pub degeneracy_nm: f64,
}

impl JointSpectralAmplitude {
    pub fn new(
        signal_freqs: Vec<f64>,
        idler_freqs: Vec<f64>,
        amplitude: DMatrix<Complex64>,
        degeneracy_nm: f64,
    ) -> Result<Self> {
        if amplitude.nrows() != signal_freqs.len() || amplitude.ncols() != idler_freqs.len() {
            return Err(ModesError::GridMismatch(format!(
                "amplitude is {}x{} but grids have {} and {} points",
                amplitude.nrows(),
                amplitude.ncols(),
                signal_freqs.len(),
                idler_freqs.len()
            )));
        }
        let jsa = Self {
            signal_freqs,
            idler_freqs,
            amplitude,
            degeneracy_nm,
        };
        let norm = jsa.norm_squared();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(ModesError::InvalidInput(format!(
                "JSA norm² = {norm}, expected 1 ± 1e-9"
            )));
        }
        if jsa.grids_coincide() {
            let asym = jsa.exchange_asymmetry();
            if asym > 1e-9 {
                return Err(ModesError::InvalidInput(format!(
                    "degenerate JSA exchange asymmetry {asym} exceeds 1e-9"
                )));
            }
        }
        Ok(jsa)
    }

    pub fn cell_area(&self) -> f64 {
        let ds = self.signal_freqs[1] - self.signal_freqs[0];
        let di = self.idler_freqs[1] - self.idler_freqs[0];
        ds * di
    }

    fn norm_squared(&self) -> f64 {
        self.amplitude.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.cell_area()
    }

    fn grids_coincide(&self) -> bool {
        self.signal_freqs.len() == self.idler_freqs.len()
            && self
                .signal_freqs
                .iter()
                .zip(&self.idler_freqs)
                .all(|(a, b)| (a - b).abs() < 1e-12)
    }

    fn exchange_asymmetry(&self) -> f64 {
        let mut max = 0.0f64;
        for r in 0..self.amplitude.nrows() {
            for c in 0..r {
                max = max.max((self.amplitude[(r, c)] - self.amplitude[(c, r)]).norm());
            }
        }
        max
    }

    /// CSV serialization, `omega_s,omega_i,re,im`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("omega_s,omega_i,re,im\n");
        for (r, &ws) in self.signal_freqs.iter().enumerate() {
            for (c, &wi) in self.idler_freqs.iter().enumerate() {
                let a = self.amplitude[(r, c)];
                out.push_str(&format!("{ws:.9e},{wi:.9e},{:.9e},{:.9e}\n", a.re, a.im));
            }
        }
        out
    }

    /// Grid metadata for the JSON sidecar accompanying the CSV.
    pub fn metadata(&self) -> JsaMetadata {
        JsaMetadata {
            signal_points: self.signal_freqs.len(),
            idler_points: self.idler_freqs.len(),
            signal_range_rad_per_fs: (
                self.signal_freqs[0],
                *self.signal_freqs.last().unwrap(),
            ),
            idler_range_rad_per_fs: (self.idler_freqs[0], *self.idler_freqs.last().unwrap()),
            degeneracy_nm: self.degeneracy_nm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JsaMetadata {
    pub signal_points: usize,
    pub idler_points: usize,
    pub signal_range_rad_per_fs: (f64, f64),
    pub idler_range_rad_per_fs: (f64, f64),
    pub degeneracy_nm: f64,
}

/// Result of a Schmidt (Bloch–Messiah) decomposition.
#[derive(Debug, Clone)]
pub struct SchmidtDecomposition {
    /// Descending weights λ_k, Σλ_k = 1.
    pub weights: Vec<f64>,
    /// Signal-side spectral modes, orthonormal under ΣΔΩ·ψψ*.
    pub signal_modes: Vec<Vec<Complex64>>,
    /// Idler-side spectral modes.
    pub idler_modes: Vec<Vec<Complex64>>,
    pub signal_freqs: Vec<f64>,
    pub idler_freqs: Vec<f64>,
}

impl SchmidtDecomposition {
    /// Schmidt number K = 1/Σλ².
    pub fn schmidt_number(&self) -> f64 {
        1.0 / self.weights.iter().map(|l| l * l).sum::<f64>()
    }

    /// CSV serialization of the weights, `k,lambda`.
    pub fn weights_to_csv(&self) -> String {
        let mut out = String::from("k,lambda\n");
        for (k, l) in self.weights.iter().enumerate() {
            out.push_str(&format!("{k},{l:.12e}\n"));
        }
        out
    }

    fn grid_step(&self) -> f64 {
        self.signal_freqs[1] - self.signal_freqs[0]
    }
}

/// Overlap matrix σ_mn between two OPAs' eigenmodes.
#[derive(Debug, Clone)]
pub struct ModeOverlap {
    pub sigma: DMatrix<Complex64>,
}

impl ModeOverlap {
    pub fn identity(n: usize) -> Self {
        Self {
            sigma: DMatrix::identity(n, n),
        }
    }
}

/// Per-mode squeezing of a squeezer/measurement cascade plus the overlap
/// between their mode sets.
#[derive(Debug, Clone)]
pub struct CascadeSpec {
    /// Squeezer per-mode parameters r^s_m.
    pub r_squeezer: Vec<f64>,
    /// Measurement-OPA per-mode parameters r^ms_n.
    pub r_measurement: Vec<f64>,
    pub overlap: ModeOverlap,
}

impl CascadeSpec {
    pub fn new(r_squeezer: Vec<f64>, r_measurement: Vec<f64>, overlap: ModeOverlap) -> Result<Self> {
        if overlap.sigma.nrows() != r_squeezer.len() || overlap.sigma.ncols() != r_measurement.len()
        {
            return Err(ModesError::GridMismatch(format!(
                "overlap is {}x{} but squeezing lists have {} and {} entries",
                overlap.sigma.nrows(),
                overlap.sigma.ncols(),
                r_squeezer.len(),
                r_measurement.len()
            )));
        }
        Ok(Self {
            r_squeezer,
            r_measurement,
            overlap,
        })
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// First-order joint spectral amplitude of a degenerate type-0 process:
/// `J(Ω_s, Ω_i) = α(Ω_s+Ω_i) · sinc(Δk·L/2) · e^{iΔk·L/2}` with a
/// transform-limited Gaussian pump of the given intensity FWHM and the
/// phase mismatch expanded to second order,
/// `Δk = GVM·(Ω_s+Ω_i) + (β₂ᵖ/2)(Ω_s+Ω_i)² − (β₂ˢ/2)(Ω_s²+Ω_i²)`.
/// The result is symmetrized and normalized.
pub fn compute_jsa(
    dispersion: &WaveguideDispersion,
    pump_center_nm: f64,
    pump_duration_fs: f64,
    length_mm: f64,
    grid: JsaGrid,
) -> Result<JointSpectralAmplitude> {
    if !(pump_duration_fs > 0.0) || !(length_mm > 0.0) || grid.points < 8 {
        return Err(ModesError::InvalidInput(
            "need positive pump duration and length, grid of >= 8 points".into(),
        ));
    }
    let signal_nm = 2.0 * pump_center_nm;
    let beta2_p = dispersion.gvd_at(pump_center_nm)?;
    let beta2_s = dispersion.gvd_at(signal_nm)?;
    let gvm = dispersion.gvm(pump_center_nm, signal_nm)?;

    let n = grid.points;
    let span = 2.0 * std::f64::consts::PI * grid.span_thz * 1e-3; // rad/fs
    let freqs: Vec<f64> = (0..n)
        .map(|i| -span + 2.0 * span * i as f64 / (n - 1) as f64)
        .collect();
    // Gaussian pump amplitude spectrum for an intensity-FWHM τ pulse.
    let tau2 = pump_duration_fs * pump_duration_fs;
    let alpha = |w: f64| (-w * w * tau2 / (8.0 * std::f64::consts::LN_2)).exp();

    let mut amplitude = DMatrix::zeros(n, n);
    for (r, &ws) in freqs.iter().enumerate() {
        for (c, &wi) in freqs.iter().enumerate() {
            let sum = ws + wi;
            let dk = gvm * sum + 0.5 * beta2_p * sum * sum - 0.5 * beta2_s * (ws * ws + wi * wi);
            let arg = 0.5 * dk * length_mm;
            amplitude[(r, c)] = Complex64::from_polar(1.0, arg) * (alpha(sum) * sinc(arg));
        }
    }
    // Suppress grid asymmetry artifacts in the degenerate geometry.
    let amplitude = (&amplitude + amplitude.transpose()) * Complex64::new(0.5, 0.0);
    normalize_jsa(freqs.clone(), freqs, amplitude, signal_nm)
}

fn normalize_jsa(
    signal_freqs: Vec<f64>,
    idler_freqs: Vec<f64>,
    mut amplitude: DMatrix<Complex64>,
    degeneracy_nm: f64,
) -> Result<JointSpectralAmplitude> {
    let ds = signal_freqs[1] - signal_freqs[0];
    let di = idler_freqs[1] - idler_freqs[0];
    let norm = amplitude.iter().map(|a| a.norm_sqr()).sum::<f64>() * ds * di;
    if !(norm > 0.0) {
        return Err(ModesError::InvalidInput("JSA has zero norm".into()));
    }
    amplitude /= Complex64::new(norm.sqrt(), 0.0);
    JointSpectralAmplitude::new(signal_freqs, idler_freqs, amplitude, degeneracy_nm)
}

/// Schmidt decomposition via SVD of the cell-area-weighted amplitude matrix.
/// Weights are squared singular values renormalized to 1; modes are
/// orthonormal under the grid measure.
pub fn schmidt_decompose(jsa: &JointSpectralAmplitude, max_modes: usize) -> SchmidtDecomposition {
    let ds = jsa.signal_freqs[1] - jsa.signal_freqs[0];
    let di = jsa.idler_freqs[1] - jsa.idler_freqs[0];
    // J·√(ΔΩ_s·ΔΩ_i) makes the discrete SVD the quadrature-consistent
    // Schmidt decomposition.
    let weighted = &jsa.amplitude * Complex64::new((ds * di).sqrt(), 0.0);
    let svd = weighted.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let keep = max_modes.min(order.len()).max(1);
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();

    let mut weights = Vec::with_capacity(keep);
    let mut signal_modes = Vec::with_capacity(keep);
    let mut idler_modes = Vec::with_capacity(keep);
    for &k in order.iter().take(keep) {
        weights.push(svd.singular_values[k].powi(2) / total);
        signal_modes.push(u.column(k).iter().map(|a| a / ds.sqrt()).collect());
        // Rows of V^H directly, so J = Σ √λ_k ψ_k(Ω_s) φ_k(Ω_i).
        idler_modes.push(vt.row(k).iter().map(|a| a / di.sqrt()).collect());
    }
    // Renormalize after truncation so Σλ = 1 exactly.
    let kept: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= kept;
    }
    SchmidtDecomposition {
        weights,
        signal_modes,
        idler_modes,
        signal_freqs: jsa.signal_freqs.clone(),
        idler_freqs: jsa.idler_freqs.clone(),
    }
}

/// Thermal-statistics mode counting: K = 1/(g² − 1) for g² ∈ (1, 2].
pub fn schmidt_from_g2(g2: f64) -> Result<f64> {
    if !(g2 > 1.0 && g2 <= 2.0) {
        return Err(ModesError::InvalidInput(format!(
            "g2 = {g2} outside (1, 2]"
        )));
    }
    Ok(1.0 / (g2 - 1.0))
}

/// Zero the amplitude outside a wavelength passband on both axes and
/// renormalize.
pub fn apply_filter(
    jsa: &JointSpectralAmplitude,
    passband_nm: (f64, f64),
) -> Result<JointSpectralAmplitude> {
    let (lo_nm, hi_nm) = passband_nm;
    if !(lo_nm < hi_nm) {
        return Err(ModesError::InvalidInput("empty passband".into()));
    }
    let w0 = 2.0 * std::f64::consts::PI * C_NM_PER_FS / jsa.degeneracy_nm;
    let w_lo = 2.0 * std::f64::consts::PI * C_NM_PER_FS / hi_nm - w0;
    let w_hi = 2.0 * std::f64::consts::PI * C_NM_PER_FS / lo_nm - w0;
    let pass = |w: f64| w >= w_lo && w <= w_hi;
    if !jsa.signal_freqs.iter().any(|&w| pass(w)) {
        return Err(ModesError::InvalidInput(
            "passband does not overlap the signal grid".into(),
        ));
    }
    let mut amplitude = jsa.amplitude.clone();
    for (r, &ws) in jsa.signal_freqs.iter().enumerate() {
        for (c, &wi) in jsa.idler_freqs.iter().enumerate() {
            if !pass(ws) || !pass(wi) {
                amplitude[(r, c)] = Complex64::new(0.0, 0.0);
            }
        }
    }
    normalize_jsa(
        jsa.signal_freqs.clone(),
        jsa.idler_freqs.clone(),
        amplitude,
        jsa.degeneracy_nm,
    )
}

/// Overlap matrix σ_mn = ⟨ψ^a_m, ψ^b_n⟩ between two mode sets sharing a
/// frequency grid (equal to the time-domain overlap by Parseval).
pub fn mode_overlap(dec_a: &SchmidtDecomposition, dec_b: &SchmidtDecomposition) -> Result<ModeOverlap> {
    if dec_a.signal_freqs.len() != dec_b.signal_freqs.len()
        || dec_a
            .signal_freqs
            .iter()
            .zip(&dec_b.signal_freqs)
            .any(|(x, y)| (x - y).abs() > 1e-12)
    {
        return Err(ModesError::GridMismatch(
            "decompositions must share the signal frequency grid".into(),
        ));
    }
    let dw = dec_a.grid_step();
    let mut sigma = DMatrix::zeros(dec_a.signal_modes.len(), dec_b.signal_modes.len());
    for (m, pa) in dec_a.signal_modes.iter().enumerate() {
        for (n, pb) in dec_b.signal_modes.iter().enumerate() {
            let s: Complex64 = pa
                .iter()
                .zip(pb)
                .map(|(a, b)| a.conj() * b)
                .sum::<Complex64>()
                * dw;
            sigma[(m, n)] = s;
        }
    }
    Ok(ModeOverlap { sigma })
}

/// Mean photon number of the cascade, per mode pair and total:
/// `⟨N_mn⟩ = |σ_mn|²·e^{2(r^ms_n + r^s_m)}/4`, modes treated as
/// statistically independent.
pub fn cascade_mean_photons(spec: &CascadeSpec) -> (DMatrix<f64>, f64) {
    let (rows, cols) = (spec.r_squeezer.len(), spec.r_measurement.len());
    let mut per_pair = DMatrix::zeros(rows, cols);
    for m in 0..rows {
        for n in 0..cols {
            per_pair[(m, n)] = spec.overlap.sigma[(m, n)].norm_sqr()
                * (2.0 * (spec.r_measurement[n] + spec.r_squeezer[m])).exp()
                / 4.0;
        }
    }
    let total = per_pair.iter().sum();
    (per_pair, total)
}

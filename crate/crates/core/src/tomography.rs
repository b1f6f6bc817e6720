//! Analysis pipeline: shot-noise calibration, two-mode fitting of measured
//! intensity histograms, conversion of intensity samples to signed quadrature
//! data, and iterative maximum-likelihood density-matrix reconstruction.
//!
//! The sign-symmetrized intensity-to-quadrature inversion restricts the
//! pipeline to zero-mean states by construction.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::f64::consts::PI;
use thiserror::Error;

use crate::fockspace::{
    self, fidelity, gaussian_dm_from_variances, quadrature_variance, symmetric_axis, wigner,
    DensityMatrix, GaussianStateSpec, WignerGrid,
};
use num_complex::Complex64 as C64;
use crate::numeric::{gauss_legendre, nelder_mead, oscillator_wavefunctions};
use crate::opa::{
    self, p2_pdf_with, sample_pulse_train, OpaGain, PhaseMarginal, TwoModeModel,
};

#[derive(Debug, Error)]
pub enum TomoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("missing calibration: {0}")]
    MissingCalibration(String),
    #[error("fit did not converge: {0}")]
    NonConvergence(String),
    #[error("log-likelihood decreased at iteration {iteration} by {delta:.3e}")]
    LikelihoodDecrease { iteration: usize, delta: f64 },
    #[error(transparent)]
    Fock(#[from] fockspace::FockError),
    #[error(transparent)]
    Opa(#[from] opa::OpaError),
}

pub type Result<T> = std::result::Result<T, TomoError>;

/// Phase span below which a tomographic data set is incomplete.
pub const COMPLETENESS_SPAN: f64 = PI / 2.0;

/// Provenance attached to a measured or simulated histogram set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub pump_energy_pj: Option<f64>,
    pub seed: Option<u64>,
    pub source: String,
}

/// Per-phase intensity marginals plus the shutter-closed vacuum reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramSet {
    pub marginals: Vec<PhaseMarginal>,
    pub vacuum_reference: Vec<PhaseMarginal>,
    pub metadata: RunMetadata,
}

impl HistogramSet {
    pub fn new(
        marginals: Vec<PhaseMarginal>,
        vacuum_reference: Vec<PhaseMarginal>,
        metadata: RunMetadata,
    ) -> Result<Self> {
        let mut phases: Vec<f64> = marginals.iter().map(|m| m.phi).collect();
        phases.sort_by(|a, b| a.partial_cmp(b).unwrap());
        phases.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        if phases.len() < 3 {
            return Err(TomoError::InvalidInput(format!(
                "need >= 3 distinct phases, got {}",
                phases.len()
            )));
        }
        let span = phases.last().unwrap() - phases.first().unwrap();
        if span < COMPLETENESS_SPAN - 1e-12 {
            return Err(TomoError::InvalidInput(format!(
                "phase span {span:.4} rad is below the completeness floor pi/2"
            )));
        }
        if vacuum_reference.iter().all(|m| m.samples.is_empty()) {
            return Err(TomoError::InvalidInput(
                "vacuum reference is empty".into(),
            ));
        }
        Ok(Self {
            marginals,
            vacuum_reference,
            metadata,
        })
    }

    pub fn phase_span(&self) -> f64 {
        phase_span(self.marginals.iter().map(|m| m.phi))
    }
}

fn phase_span(phases: impl Iterator<Item = f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in phases {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// Result of the shutter-closed shot-noise calibration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShotNoiseCalibration {
    /// Gain exponent recovered from `<N> = e^{2g}/4`.
    pub gain_exponent: f64,
    /// Post-offset vacuum mean photon number.
    pub vacuum_mean: f64,
    /// Offset subtracted before inversion.
    pub offset: f64,
}

/// Calibrate the measurement gain from shutter-closed vacuum runs:
/// subtract the depletion offset, average, and invert `<N> = e^{2g}/4`.
pub fn calibrate_shot_noise(
    vacuum_marginals: &[PhaseMarginal],
    offset: f64,
) -> Result<ShotNoiseCalibration> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for m in vacuum_marginals {
        sum += m.samples.iter().sum::<f64>();
        count += m.samples.len();
    }
    if count == 0 {
        return Err(TomoError::InvalidInput("no vacuum samples".into()));
    }
    let mean = sum / count as f64 - offset;
    if mean <= 0.0 {
        return Err(TomoError::InvalidInput(format!(
            "post-offset vacuum mean {mean:.3e} is not positive"
        )));
    }
    Ok(ShotNoiseCalibration {
        gain_exponent: 0.5 * (4.0 * mean).ln(),
        vacuum_mean: mean,
        offset,
    })
}

/// Per-phase calibration curve g(phi) for phase-dependent shot noise
/// (leaked-pump interference); extrema sit at phi = 0 and pi.
pub fn calibrate_per_phase(
    vacuum_marginals: &[PhaseMarginal],
    offset: f64,
) -> Result<Vec<(f64, f64)>> {
    vacuum_marginals
        .iter()
        .map(|m| {
            let cal = calibrate_shot_noise(std::slice::from_ref(m), offset)?;
            Ok((m.phi, cal.gain_exponent))
        })
        .collect()
}

/// Joint two-mode fit of a histogram set: per-phase dominant/secondary means
/// with one shared depletion offset, plus the calibrated gain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub phases: Vec<f64>,
    pub models: Vec<TwoModeModel>,
    /// Calibrated gain exponent of the measurement amplifier.
    pub gain: f64,
    /// Shared depletion offset.
    pub offset: f64,
    /// Per-phase Kolmogorov-Smirnov distance between the empirical and
    /// fitted distributions, evaluated on the fit bin edges.
    pub ks: Vec<f64>,
}

impl FitResult {
    pub fn model_at(&self, phi: f64) -> Option<(usize, &TwoModeModel)> {
        self.phases
            .iter()
            .position(|&p| (p - phi).abs() < 1e-9)
            .map(|k| (k, &self.models[k]))
    }
}

const FIT_BINS: usize = 50;
const FIT_GL_NODES: usize = 6;
/// Quadrature order used inside the fit objective's density evaluations.
const FIT_P2_ORDER: usize = 16;
const MIN_FIT_SAMPLES: usize = 1000;

struct Binned {
    edges: Vec<f64>,
    counts: Vec<f64>,
    total: f64,
}

/// Equal-count (quantile) binning: edges follow the sample quantiles, so the
/// dense low-intensity region that localizes the offset gets fine bins while
/// the sparse tail is merged.
fn bin_samples(samples: &[f64], bins: usize) -> Result<Binned> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let lo = sorted[0];
    let hi = sorted[n - 1];
    if !(hi > lo) {
        return Err(TomoError::InvalidInput(
            "samples are constant; nothing to fit".into(),
        ));
    }
    let mut edges = vec![lo];
    let mut counts = Vec::new();
    let mut start = 0usize;
    for b in 1..=bins {
        let end = if b == bins { n } else { b * n / bins };
        let edge = if b == bins {
            hi + 1e-9 * (hi - lo)
        } else {
            sorted[end]
        };
        // Duplicate sample values can collapse an edge; merge such bins.
        if edge > *edges.last().unwrap() {
            edges.push(edge);
            counts.push((end - start) as f64);
            start = end;
        }
    }
    Ok(Binned {
        edges,
        counts,
        total: n as f64,
    })
}

/// Probability mass of the two-mode model on `[a, b]`. The substitution
/// `N = offset + u^2` removes the inverse-square-root edge singularity.
fn bin_probability(model: &TwoModeModel, a: f64, b: f64, gl: &(Vec<f64>, Vec<f64>)) -> f64 {
    let ua = (a.max(model.offset) - model.offset).max(0.0).sqrt();
    let ub = (b.max(model.offset) - model.offset).max(0.0).sqrt();
    if ub <= ua {
        return 0.0;
    }
    let mid = 0.5 * (ua + ub);
    let half = 0.5 * (ub - ua);
    let mut acc = 0.0;
    for (t, w) in gl.0.iter().zip(&gl.1) {
        let u = mid + half * t;
        acc += w * 2.0 * u * p2_pdf_with(model.offset + u * u, model, FIT_P2_ORDER);
    }
    acc * half
}

fn binned_nll(binned: &Binned, model: &TwoModeModel, gl: &(Vec<f64>, Vec<f64>)) -> f64 {
    let mut nll = 0.0;
    for (i, &c) in binned.counts.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let p = bin_probability(model, binned.edges[i], binned.edges[i + 1], gl);
        nll -= c * p.max(1e-300).ln();
    }
    nll
}

fn model_from_params(ln_m1: f64, ln_m2: f64, w: f64) -> TwoModeModel {
    let (mut m1, mut m2) = (ln_m1.exp(), ln_m2.exp());
    if m2 > m1 {
        std::mem::swap(&mut m1, &mut m2);
    }
    TwoModeModel {
        mean1: m1,
        mean2: m2,
        offset: w * w,
    }
}

fn ks_statistic(binned: &Binned, model: &TwoModeModel, gl: &(Vec<f64>, Vec<f64>)) -> f64 {
    // Model CDF at the bin edges, including mass between the offset and the
    // lowest edge; compared with the empirical CDF on the same edges.
    let mut f_model = bin_probability(model, model.offset, binned.edges[0], gl);
    let mut f_emp = 0.0;
    let mut d: f64 = f_model;
    for (i, &c) in binned.counts.iter().enumerate() {
        f_model += bin_probability(model, binned.edges[i], binned.edges[i + 1], gl);
        f_emp += c / binned.total;
        d = d.max((f_model - f_emp).abs());
    }
    d
}

/// Maximum-likelihood two-mode fit of a single phase marginal.
///
/// Binned likelihood under [`p2_pdf`], minimized by Nelder-Mead over
/// `(ln mean1, ln mean2, sqrt(offset))` with three starts.
pub fn fit_two_mode(marginal: &PhaseMarginal, init: &TwoModeModel) -> Result<TwoModeModel> {
    if marginal.samples.len() < MIN_FIT_SAMPLES {
        return Err(TomoError::InvalidInput(format!(
            "two-mode fit needs >= {MIN_FIT_SAMPLES} samples, got {}",
            marginal.samples.len()
        )));
    }
    let binned = bin_samples(&marginal.samples, FIT_BINS)?;
    let gl = gauss_legendre(FIT_GL_NODES);
    let mean = (marginal.mean() - init.offset).max(1e-6);
    let starts = [
        vec![
            (init.mean1.max(1e-6)).ln(),
            (init.mean2.max(init.mean1 * 1e-3).max(1e-9)).ln(),
            init.offset.sqrt(),
        ],
        vec![(0.9 * mean).ln(), (0.1 * mean).ln(), init.offset.sqrt()],
        vec![(0.6 * mean).ln(), (0.4 * mean).ln(), (0.1 * mean).sqrt()],
    ];
    let objective = |t: &[f64]| binned_nll(&binned, &model_from_params(t[0], t[1], t[2]), &gl);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in &starts {
        let (p, v) = nelder_mead(&objective, start, 0.4, 400, 1e-8);
        if best.as_ref().map_or(true, |(_, bv)| v < *bv) {
            best = Some((p, v));
        }
    }
    let (p, v) = best.unwrap();
    if !v.is_finite() {
        return Err(TomoError::NonConvergence(format!(
            "objective not finite at last iterate ({:.4}, {:.4}, {:.4})",
            p[0], p[1], p[2]
        )));
    }
    let model = model_from_params(p[0], p[1], p[2]);
    TwoModeModel::new(model.mean1, model.mean2, model.offset).map_err(TomoError::from)
}

/// Joint fit across phases with a single shared offset: an outer 1-D search
/// over the offset wraps warm-started per-phase `(ln mean1, ln mean2)` fits.
pub fn fit_two_mode_joint(
    marginals: &[PhaseMarginal],
    init: &TwoModeModel,
) -> Result<(Vec<TwoModeModel>, f64, Vec<f64>)> {
    if marginals.is_empty() {
        return Err(TomoError::InvalidInput("no marginals to fit".into()));
    }
    for m in marginals {
        if m.samples.len() < MIN_FIT_SAMPLES {
            return Err(TomoError::InvalidInput(format!(
                "two-mode fit needs >= {MIN_FIT_SAMPLES} samples per phase, got {} at phi = {:.4}",
                m.samples.len(),
                m.phi
            )));
        }
    }
    let binned: Vec<Binned> = marginals
        .iter()
        .map(|m| bin_samples(&m.samples, FIT_BINS))
        .collect::<Result<_>>()?;
    let gl = gauss_legendre(FIT_GL_NODES);

    let warm: RefCell<Vec<Vec<f64>>> = RefCell::new(
        marginals
            .iter()
            .map(|m| {
                let mean = (m.mean() - init.offset).max(1e-6);
                vec![(0.9 * mean).ln(), (0.1 * mean).ln()]
            })
            .collect(),
    );
    let inner = |w: f64, step: f64, iters: usize| -> (f64, Vec<Vec<f64>>) {
        let starts = warm.borrow().clone();
        let results: Vec<(Vec<f64>, f64)> = binned
            .par_iter()
            .zip(&starts)
            .map(|(b, start)| {
                let obj = |t: &[f64]| binned_nll(b, &model_from_params(t[0], t[1], w), &gl);
                nelder_mead(obj, start, step, iters, 1e-8)
            })
            .collect();
        let total = results.iter().map(|(_, v)| v).sum();
        (total, results.into_iter().map(|(p, _)| p).collect())
    };

    // Seed the warm starts with a full-step fit at the initial offset, then
    // let the outer simplex refine the shared offset with short inner fits.
    let w0 = init.offset.sqrt();
    let (_, p0) = inner(w0, 0.4, 400);
    *warm.borrow_mut() = p0;
    let outer = |t: &[f64]| {
        let (total, p) = inner(t[0] * t[0], 0.1, 60);
        *warm.borrow_mut() = p;
        total
    };
    let (wbest, _) = nelder_mead(&outer, &[w0.max(0.05)], 0.3 * (w0 + 0.1), 15, 1e-3);
    let offset = wbest[0] * wbest[0];
    let (_, params) = inner(offset, 0.2, 200);

    let mut models = Vec::with_capacity(marginals.len());
    let mut ks = Vec::with_capacity(marginals.len());
    for (p, b) in params.iter().zip(&binned) {
        let model = model_from_params(p[0], p[1], wbest[0]);
        ks.push(ks_statistic(b, &model, &gl));
        models.push(TwoModeModel::new(model.mean1, model.mean2, model.offset)?);
    }
    Ok((models, offset, ks))
}

/// Fit a full histogram set: the vacuum reference yields the calibrated gain
/// via the fundamental-mode mean, the data marginals get a joint two-mode fit
/// with a shared offset.
pub fn fit_histogram_set(set: &HistogramSet, init: Option<TwoModeModel>) -> Result<FitResult> {
    let mut vac_samples = Vec::new();
    for m in &set.vacuum_reference {
        vac_samples.extend_from_slice(&m.samples);
    }
    let vac_marginal = PhaseMarginal::new(0.0, vac_samples)?;
    let vac_mean = vac_marginal.mean();
    let vac_init = init.unwrap_or(TwoModeModel {
        mean1: 0.9 * vac_mean,
        mean2: 0.05 * vac_mean,
        offset: 0.05 * vac_mean,
    });
    let vac_model = fit_two_mode(&vac_marginal, &vac_init)?;
    if vac_model.mean1 <= 0.0 {
        return Err(TomoError::MissingCalibration(
            "vacuum fundamental-mode mean is not positive".into(),
        ));
    }
    let gain = 0.5 * (4.0 * vac_model.mean1).ln();

    let data_init = TwoModeModel {
        mean1: vac_model.mean1,
        mean2: vac_model.mean2,
        offset: vac_model.offset,
    };
    let (models, offset, ks) = fit_two_mode_joint(&set.marginals, &data_init)?;
    Ok(FitResult {
        phases: set.marginals.iter().map(|m| m.phi).collect(),
        models,
        gain,
        offset,
        ks,
    })
}

/// How quadrature samples are produced from intensity data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum QuadratureRoute {
    /// Invert the raw per-pulse intensities.
    Direct,
    /// Draw from the fitted fundamental-mode distribution (the re-sampled
    /// route that isolates the fundamental mode).
    Resampled { seed: u64 },
}

/// Invert intensities to signed quadratures, `x = s*sqrt(2*max(N-offset,0))/e^g`,
/// with a fair deterministic sign alternation (valid for zero-mean states).
pub fn quadratures_from_intensities(samples: &[f64], gain_exponent: f64, offset: f64) -> Vec<f64> {
    let inv_gain = (-gain_exponent).exp();
    samples
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            s * (2.0 * (n - offset).max(0.0)).sqrt() * inv_gain
        })
        .collect()
}

/// Convert one phase marginal into signed quadrature samples using the
/// calibrated gain and shared offset from the fit.
pub fn marginals_to_quadratures(
    marginal: &PhaseMarginal,
    fit: &FitResult,
    route: QuadratureRoute,
) -> Result<Vec<f64>> {
    if !fit.gain.is_finite() {
        return Err(TomoError::MissingCalibration(
            "fit carries no finite gain exponent".into(),
        ));
    }
    match route {
        QuadratureRoute::Direct => Ok(quadratures_from_intensities(
            &marginal.samples,
            fit.gain,
            fit.offset,
        )),
        QuadratureRoute::Resampled { seed } => {
            let (idx, model) = fit.model_at(marginal.phi).ok_or_else(|| {
                TomoError::MissingCalibration(format!(
                    "no fitted model at phi = {:.6}",
                    marginal.phi
                ))
            })?;
            let sigma = (2.0 * model.mean1).sqrt() * (-fit.gain).exp();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ idx as u64);
            Ok((0..marginal.samples.len())
                .map(|i| {
                    let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                    let z: f64 = rng.sample(StandardNormal);
                    s * sigma * z.abs()
                })
                .collect())
        }
    }
}

/// Output of the iterative maximum-likelihood reconstruction.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub rho: DensityMatrix,
    pub wigner: WignerGrid,
    pub squeezing_db: f64,
    pub antisqueezing_db: f64,
    /// Bootstrap uncertainties; zero until filled by the pipeline.
    pub squeezing_std_db: f64,
    pub antisqueezing_std_db: f64,
    pub fidelity_vs_expected: Option<f64>,
    pub iterations_used: usize,
    pub final_log_likelihood: f64,
    /// Log-likelihood after every accepted iterate (monotonicity record).
    pub log_likelihood_history: Vec<f64>,
    /// False when the phase set spans less than pi/2.
    pub complete: bool,
}

/// Half-width of the quadrature POVM support.
const POVM_RANGE: f64 = 6.0;
/// Wigner grid emitted with every reconstruction.
const WIGNER_HALF_SPAN: f64 = 4.0;
const WIGNER_POINTS: usize = 101;

struct QuadraturePovm {
    bins: Vec<DMatrix<f64>>,
    edges: Vec<f64>,
}

/// Bin projectors `B_b = Integral_bin psi_m(x) psi_n(x) dx` over the
/// harmonic-oscillator position wavefunctions, Simpson rule per bin. The bin
/// width is a quarter of the vacuum standard deviation.
fn build_povm(dim: usize) -> QuadraturePovm {
    let target_width = (0.5f64).sqrt() / 4.0;
    let nbins = (2.0 * POVM_RANGE / target_width).round() as usize;
    let width = 2.0 * POVM_RANGE / nbins as f64;
    let edges: Vec<f64> = (0..=nbins).map(|i| -POVM_RANGE + width * i as f64).collect();
    const NSUB: usize = 8;
    let bins = (0..nbins)
        .map(|b| {
            let mut m = DMatrix::<f64>::zeros(dim, dim);
            let h = width / NSUB as f64;
            for j in 0..=NSUB {
                let x = edges[b] + h * j as f64;
                let w = if j == 0 || j == NSUB {
                    h / 3.0
                } else if j % 2 == 1 {
                    4.0 * h / 3.0
                } else {
                    2.0 * h / 3.0
                };
                let psi = oscillator_wavefunctions(dim, x);
                for r in 0..dim {
                    for c in 0..=r {
                        m[(r, c)] += w * psi[r] * psi[c];
                    }
                }
            }
            for r in 0..dim {
                for c in 0..r {
                    m[(c, r)] = m[(r, c)];
                }
            }
            m
        })
        .collect();
    QuadraturePovm { bins, edges }
}

struct PhaseData {
    cos_rot: DMatrix<f64>,
    sin_rot: DMatrix<f64>,
    counts: Vec<f64>,
}

/// One likelihood pass: log-likelihood of `rho` and the R operator
/// `R = (1/n) Sum_b (h_b / p_b) Pi_b(phi)` accumulated over phases.
fn likelihood_pass(
    rho: &DMatrix<C64>,
    povm: &QuadraturePovm,
    phases: &[PhaseData],
    total: f64,
) -> (f64, DMatrix<C64>) {
    let dim = rho.nrows();
    let rho_re = rho.map(|c| c.re);
    let rho_im = rho.map(|c| c.im);
    let parts: Vec<(f64, DMatrix<f64>, DMatrix<f64>)> = phases
        .par_iter()
        .map(|pd| {
            // Re[rho_mn e^{i(m-n)phi}] entering tr(B * rot).
            let rot_re = rho_re.component_mul(&pd.cos_rot) - rho_im.component_mul(&pd.sin_rot);
            let mut ll = 0.0;
            let mut w_acc = DMatrix::<f64>::zeros(dim, dim);
            for (b, bin) in povm.bins.iter().enumerate() {
                let h = pd.counts[b];
                let p = bin.dot(&rot_re).max(1e-300);
                if h > 0.0 {
                    ll += h * p.ln();
                    w_acc += bin * (h / p);
                }
            }
            // Rotate W back: R += W_mn e^{-i(m-n)phi}.
            let r_re = w_acc.component_mul(&pd.cos_rot);
            let r_im = -w_acc.component_mul(&pd.sin_rot);
            (ll, r_re, r_im)
        })
        .collect();
    let mut ll = 0.0;
    let mut r = DMatrix::<C64>::zeros(dim, dim);
    for (l, re, im) in parts {
        ll += l;
        for idx in 0..dim * dim {
            r[idx] += C64::new(re[idx] / total, im[idx] / total);
        }
    }
    (ll, r)
}

fn hermitize_normalize(m: DMatrix<C64>) -> DMatrix<C64> {
    let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let tr = h.trace().re;
    h / C64::new(tr, 0.0)
}

fn variance_extrema_db(rho: &DensityMatrix) -> (f64, f64) {
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for k in 0..360 {
        let v = quadrature_variance(rho, PI * k as f64 / 360.0);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    (10.0 * (vmin / 0.5).log10(), 10.0 * (vmax / 0.5).log10())
}

/// Iterative expectation-maximization reconstruction `rho -> N[R rho R]`
/// from signed quadrature samples grouped by phase.
///
/// The log-likelihood is recorded after every accepted iterate and must be
/// nondecreasing; a decreasing step falls back to diluted updates
/// `G = (1-a) I + a R` with `a` halved until monotonicity is restored, and
/// errors out if that fails.
pub fn mle_reconstruct(
    data: &[(f64, Vec<f64>)],
    dim: usize,
    max_iters: usize,
    tol: f64,
) -> Result<ReconstructionResult> {
    if dim < 2 {
        return Err(TomoError::InvalidInput("dim must be >= 2".into()));
    }
    if data.is_empty() || data.iter().any(|(_, x)| x.is_empty()) {
        return Err(TomoError::InvalidInput(
            "every phase needs at least one quadrature sample".into(),
        ));
    }
    let complete = phase_span(data.iter().map(|(p, _)| *p)) >= COMPLETENESS_SPAN - 1e-12;

    let povm = build_povm(dim);
    let nbins = povm.bins.len();
    let width = povm.edges[1] - povm.edges[0];
    let mut total = 0.0;
    let phases: Vec<PhaseData> = data
        .iter()
        .map(|(phi, xs)| {
            let mut counts = vec![0.0; nbins];
            for &x in xs {
                let idx = (((x + POVM_RANGE) / width) as isize).clamp(0, nbins as isize - 1);
                counts[idx as usize] += 1.0;
            }
            total += xs.len() as f64;
            let cos_rot =
                DMatrix::from_fn(dim, dim, |m, n| ((m as f64 - n as f64) * phi).cos());
            let sin_rot =
                DMatrix::from_fn(dim, dim, |m, n| ((m as f64 - n as f64) * phi).sin());
            PhaseData {
                cos_rot,
                sin_rot,
                counts,
            }
        })
        .collect();

    let identity = DMatrix::<C64>::identity(dim, dim);
    let mut rho = identity.clone() / C64::new(dim as f64, 0.0);
    let (mut ll, mut r_op) = likelihood_pass(&rho, &povm, &phases, total);
    let mut history = vec![ll];
    let mut iterations = 0usize;

    while iterations < max_iters {
        let mono_tol = 1e-9 * (1.0 + ll.abs());
        let cand = hermitize_normalize(&r_op * &rho * &r_op);
        let (mut ll_c, mut r_c) = likelihood_pass(&cand, &povm, &phases, total);
        let mut accepted = cand;
        if ll_c < ll - mono_tol {
            let mut alpha = 0.5;
            let mut ok = false;
            for _ in 0..40 {
                let g = &identity * C64::new(1.0 - alpha, 0.0) + &r_op * C64::new(alpha, 0.0);
                let diluted = hermitize_normalize(&g * &rho * g.adjoint());
                let (ll_d, r_d) = likelihood_pass(&diluted, &povm, &phases, total);
                if ll_d >= ll - mono_tol {
                    accepted = diluted;
                    ll_c = ll_d;
                    r_c = r_d;
                    ok = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !ok {
                return Err(TomoError::LikelihoodDecrease {
                    iteration: iterations + 1,
                    delta: ll - ll_c,
                });
            }
        }
        let gain = ll_c - ll;
        rho = accepted;
        ll = ll_c;
        r_op = r_c;
        history.push(ll);
        iterations += 1;
        if gain.abs() < tol {
            break;
        }
    }

    let rho = DensityMatrix::new(rho)?;
    let axis = symmetric_axis(WIGNER_HALF_SPAN, WIGNER_POINTS);
    let wig = wigner(&rho, &axis, &axis)?;
    let (s_minus, s_plus) = variance_extrema_db(&rho);
    Ok(ReconstructionResult {
        rho,
        wigner: wig,
        squeezing_db: s_minus,
        antisqueezing_db: s_plus,
        squeezing_std_db: 0.0,
        antisqueezing_std_db: 0.0,
        fidelity_vs_expected: None,
        iterations_used: iterations,
        final_log_likelihood: ll,
        log_likelihood_history: history,
        complete,
    })
}

/// Comparison of a reconstruction against an expected density matrix.
#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub fidelity: f64,
    /// Elementwise |rho_recovered - rho_expected|.
    pub delta_abs: DMatrix<f64>,
    pub max_delta_abs: f64,
    pub squeezing_db: f64,
    pub antisqueezing_db: f64,
}

pub fn score(result: &ReconstructionResult, expected: &DensityMatrix) -> Result<ScoreReport> {
    if result.rho.dim() != expected.dim() {
        return Err(TomoError::InvalidInput(format!(
            "dimension mismatch: {} vs {}",
            result.rho.dim(),
            expected.dim()
        )));
    }
    let f = fidelity(&result.rho, expected)?;
    let delta_abs = DMatrix::from_fn(result.rho.dim(), result.rho.dim(), |i, j| {
        (result.rho.elements()[(i, j)] - expected.elements()[(i, j)]).norm()
    });
    let max_delta_abs = delta_abs.max();
    let (s_minus, s_plus) = variance_extrema_db(&result.rho);
    Ok(ScoreReport {
        fidelity: f,
        delta_abs,
        max_delta_abs,
        squeezing_db: s_minus,
        antisqueezing_db: s_plus,
    })
}

/// Squeezing/anti-squeezing in dB with bootstrap uncertainties.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SqueezingEstimate {
    pub squeezing_db: f64,
    pub squeezing_std_db: f64,
    pub antisqueezing_db: f64,
    pub antisqueezing_std_db: f64,
}

/// Nonparametric bootstrap over pulses: per resample, the post-offset mean of
/// each phase is ratioed against the calibrated vacuum mean `e^{2g}/4` and the
/// dB extrema over phases give one squeezing/anti-squeezing draw.
pub fn bootstrap_squeezing_db(
    marginals: &[PhaseMarginal],
    gain_exponent: f64,
    offset: f64,
    resamples: usize,
    seed: u64,
) -> Result<SqueezingEstimate> {
    if marginals.is_empty() || resamples == 0 {
        return Err(TomoError::InvalidInput(
            "need marginals and at least one resample".into(),
        ));
    }
    let vac_mean = (2.0 * gain_exponent).exp() / 4.0;
    let extrema = |means: &[f64]| -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &m in means {
            let db = 10.0 * (m.max(1e-300) / vac_mean).log10();
            lo = lo.min(db);
            hi = hi.max(db);
        }
        (lo, hi)
    };
    let point: Vec<f64> = marginals.iter().map(|m| m.mean() - offset).collect();
    let (s_minus, s_plus) = extrema(&point);

    let mut draws_minus = Vec::with_capacity(resamples);
    let mut draws_plus = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let means: Vec<f64> = marginals
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ ((r as u64) << 20) ^ k as u64);
                let n = m.samples.len();
                let sum: f64 = (0..n).map(|_| m.samples[rng.gen_range(0..n)]).sum();
                sum / n as f64 - offset
            })
            .collect();
        let (lo, hi) = extrema(&means);
        draws_minus.push(lo);
        draws_plus.push(hi);
    }
    let std = |xs: &[f64]| -> f64 {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
    };
    Ok(SqueezingEstimate {
        squeezing_db: s_minus,
        squeezing_std_db: std(&draws_minus),
        antisqueezing_db: s_plus,
        antisqueezing_std_db: std(&draws_plus),
    })
}

/// End-to-end simulation + analysis configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TomographyConfig {
    /// Target squeezing in dB (negative).
    pub squeezing_db: f64,
    pub antisqueezing_db: f64,
    /// Measurement-amplifier gain exponent.
    pub gain_exponent: f64,
    pub phase_count: usize,
    pub pulses_per_phase: usize,
    /// Secondary Schmidt-mode mean relative to the fundamental.
    pub secondary_mean_ratio: f64,
    /// Pump-depletion offset added to every intensity sample.
    pub offset: f64,
    pub dim: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self {
            squeezing_db: -2.41,
            antisqueezing_db: 3.87,
            gain_exponent: 3.0,
            phase_count: 12,
            pulses_per_phase: 20_000,
            secondary_mean_ratio: 0.02,
            offset: 0.3,
            dim: fockspace::DEFAULT_DIM,
            max_iters: 600,
            tol: 1e-6,
            seed: 7,
            bootstrap_resamples: 100,
        }
    }
}

/// Everything produced by one simulated tomography run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub marginals: Vec<PhaseMarginal>,
    pub vacuum_reference: Vec<PhaseMarginal>,
    pub fit: FitResult,
    pub reconstruction: ReconstructionResult,
    pub report: ScoreReport,
}

/// Analysis parameters shared by the simulate and reconstruct pipelines.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub dim: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl From<&TomographyConfig> for AnalysisConfig {
    fn from(cfg: &TomographyConfig) -> Self {
        Self {
            dim: cfg.dim,
            max_iters: cfg.max_iters,
            tol: cfg.tol,
            seed: cfg.seed,
            bootstrap_resamples: cfg.bootstrap_resamples,
        }
    }
}

/// Generate the measurement and shutter-closed pulse trains for a simulated
/// tomography run. Returns `(data marginals, vacuum reference)`.
pub fn simulate_marginals(
    cfg: &TomographyConfig,
) -> Result<(Vec<PhaseMarginal>, Vec<PhaseMarginal>)> {
    let state = GaussianStateSpec::from_db(cfg.squeezing_db, cfg.antisqueezing_db)?;
    let gain = OpaGain::from_exponent(cfg.gain_exponent)?;
    let phases: Vec<f64> = (0..cfg.phase_count)
        .map(|k| PI * k as f64 / cfg.phase_count as f64)
        .collect();
    let marginals = sample_pulse_train(
        &state,
        &gain,
        cfg.secondary_mean_ratio,
        cfg.offset,
        &phases,
        cfg.pulses_per_phase,
        cfg.seed,
    )?;
    let vacuum = sample_pulse_train(
        &GaussianStateSpec::vacuum(),
        &gain,
        cfg.secondary_mean_ratio,
        cfg.offset,
        &[0.0],
        cfg.pulses_per_phase,
        cfg.seed ^ 0xD1B5_4A32_D192_ED03,
    )?;
    Ok((marginals, vacuum))
}

/// Run calibration, joint fitting, quadrature resampling, reconstruction, and
/// (if an expected state is supplied) scoring on a histogram set.
pub fn analyze_histogram_set(
    set: &HistogramSet,
    cfg: &AnalysisConfig,
    expected: Option<&GaussianStateSpec>,
) -> Result<(FitResult, ReconstructionResult, Option<ScoreReport>)> {
    let fit = fit_histogram_set(set, None)?;

    let resample_seed = cfg.seed ^ 0x9E37_79B9_7F4A_7C15;
    let data: Vec<(f64, Vec<f64>)> = set
        .marginals
        .iter()
        .map(|m| {
            marginals_to_quadratures(m, &fit, QuadratureRoute::Resampled { seed: resample_seed })
                .map(|x| (m.phi, x))
        })
        .collect::<Result<_>>()?;

    let mut reconstruction = mle_reconstruct(&data, cfg.dim, cfg.max_iters, cfg.tol)?;
    if cfg.bootstrap_resamples > 0 {
        let boot = bootstrap_squeezing_db(
            &set.marginals,
            fit.gain,
            fit.offset,
            cfg.bootstrap_resamples,
            cfg.seed ^ 0x2545_F491_4F6C_DD1D,
        )?;
        reconstruction.squeezing_std_db = boot.squeezing_std_db;
        reconstruction.antisqueezing_std_db = boot.antisqueezing_std_db;
    }

    let report = match expected {
        Some(state) => {
            let expected_dm = gaussian_dm_from_variances(state, cfg.dim)?;
            let report = score(&reconstruction, &expected_dm)?;
            reconstruction.fidelity_vs_expected = Some(report.fidelity);
            Some(report)
        }
        None => None,
    };
    Ok((fit, reconstruction, report))
}

/// Simulate a pulse train through the cascade, calibrate, fit, reconstruct,
/// and score against the expected Gaussian density matrix.
pub fn simulate_and_reconstruct(cfg: &TomographyConfig) -> Result<PipelineOutput> {
    let state = GaussianStateSpec::from_db(cfg.squeezing_db, cfg.antisqueezing_db)?;
    let gain = OpaGain::from_exponent(cfg.gain_exponent)?;
    let (marginals, vacuum) = simulate_marginals(cfg)?;
    let set = HistogramSet::new(
        marginals.clone(),
        vacuum.clone(),
        RunMetadata {
            pump_energy_pj: gain.pump_energy_pj(),
            seed: Some(cfg.seed),
            source: "simulated".into(),
        },
    )?;
    let (fit, reconstruction, report) =
        analyze_histogram_set(&set, &AnalysisConfig::from(cfg), Some(&state))?;
    Ok(PipelineOutput {
        marginals,
        vacuum_reference: vacuum,
        fit,
        reconstruction,
        report: report.expect("expected state supplied"),
    })
}

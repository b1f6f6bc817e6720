//! Truncated Fock-space numerics: density matrices, Wigner functions,
//! fidelities, and quadrature statistics. These both synthesize ground-truth
//! states and score reconstructions.
//!
//! Conventions: `x = (a + a†)/√2`, vacuum variance 1/2; positive squeezing
//! parameter `r` amplifies the `x` (φ = 0) quadrature.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::ln_gamma;

/// Default photon-number truncation (cutoff + 1).
pub const DEFAULT_DIM: usize = 40;

/// Largest tolerated population of the untruncated state outside the cutoff.
pub const TRACE_DEFICIT_TOL: f64 = 1e-6;

const HERMITICITY_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-10;
const EIGENVALUE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FockError {
    #[error("truncation dim {dim} too small: untruncated trace deficit {deficit:.3e} exceeds {tol:.0e}")]
    Truncation { dim: usize, deficit: f64, tol: f64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix is not a density matrix: {0}")]
    NotDensity(String),
}

pub type Result<T> = std::result::Result<T, FockError>;

/// A truncated Fock-basis density matrix. Hermitian, unit trace, positive
/// semidefinite to the tolerances checked at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    dim: usize,
    elements: DMatrix<C64>,
}

impl DensityMatrix {
    /// Validate and wrap a candidate matrix.
    pub fn new(elements: DMatrix<C64>) -> Result<Self> {
        let dim = elements.nrows();
        if dim < 2 || elements.ncols() != dim {
            return Err(FockError::InvalidInput(format!(
                "expected square matrix of dim >= 2, got {}x{}",
                elements.nrows(),
                elements.ncols()
            )));
        }
        for i in 0..dim {
            for j in 0..=i {
                let d = elements[(i, j)] - elements[(j, i)].conj();
                if d.norm() > HERMITICITY_TOL {
                    return Err(FockError::NotDensity(format!(
                        "not Hermitian at ({i},{j}): asymmetry {:.3e}",
                        d.norm()
                    )));
                }
            }
        }
        let trace: C64 = elements.trace();
        if (trace.re - 1.0).abs() > TRACE_TOL || trace.im.abs() > TRACE_TOL {
            return Err(FockError::NotDensity(format!("trace = {trace} != 1")));
        }
        let eigs = elements.clone().symmetric_eigenvalues();
        if let Some(min) = eigs.iter().copied().reduce(f64::min) {
            if min < -EIGENVALUE_TOL {
                return Err(FockError::NotDensity(format!("negative eigenvalue {min:.3e}")));
            }
        }
        Ok(Self { dim, elements })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn elements(&self) -> &DMatrix<C64> {
        &self.elements
    }

    /// Diagonal populations p_n.
    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim).map(|n| self.elements[(n, n)].re).collect()
    }

    /// Mean photon number tr(ρ·N̂).
    pub fn mean_photon_number(&self) -> f64 {
        self.populations()
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let ser = DensityMatrixFile::from(self);
        serde_json::to_value(ser).expect("density matrix serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let file: DensityMatrixFile = serde_json::from_value(value.clone())
            .map_err(|e| FockError::InvalidInput(format!("density matrix JSON: {e}")))?;
        file.try_into()
    }
}

/// On-disk form: `{dim, re: row-major, im: row-major}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DensityMatrixFile {
    pub dim: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl From<&DensityMatrix> for DensityMatrixFile {
    fn from(rho: &DensityMatrix) -> Self {
        let d = rho.dim;
        let mut re = Vec::with_capacity(d * d);
        let mut im = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                re.push(rho.elements[(i, j)].re);
                im.push(rho.elements[(i, j)].im);
            }
        }
        Self { dim: d, re, im }
    }
}

impl TryFrom<DensityMatrixFile> for DensityMatrix {
    type Error = FockError;

    fn try_from(file: DensityMatrixFile) -> Result<Self> {
        let d = file.dim;
        if file.re.len() != d * d || file.im.len() != d * d {
            return Err(FockError::InvalidInput(format!(
                "element count does not match dim {d}"
            )));
        }
        let elements = DMatrix::from_fn(d, d, |i, j| C64::new(file.re[i * d + j], file.im[i * d + j]));
        DensityMatrix::new(elements)
    }
}

/// Target Gaussian state given by its principal-axis quadrature variances.
/// The mean field is fixed at zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianStateSpec {
    /// Variance of the squeezed quadrature (vacuum = 1/2).
    pub squeezed_variance: f64,
    /// Variance of the anti-squeezed quadrature.
    pub antisqueezed_variance: f64,
}

impl GaussianStateSpec {
    pub fn new(squeezed_variance: f64, antisqueezed_variance: f64) -> Result<Self> {
        let spec = Self {
            squeezed_variance,
            antisqueezed_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Vacuum: both variances 1/2.
    pub fn vacuum() -> Self {
        Self {
            squeezed_variance: 0.5,
            antisqueezed_variance: 0.5,
        }
    }

    /// From squeezing/anti-squeezing levels in dB relative to vacuum
    /// (squeezing entered as a negative number).
    pub fn from_db(squeezing_db: f64, antisqueezing_db: f64) -> Result<Self> {
        Self::new(
            0.5 * 10f64.powf(squeezing_db / 10.0),
            0.5 * 10f64.powf(antisqueezing_db / 10.0),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.squeezed_variance > 0.0) || !(self.antisqueezed_variance > 0.0) {
            return Err(FockError::InvalidInput("variances must be positive".into()));
        }
        if self.squeezed_variance > self.antisqueezed_variance {
            return Err(FockError::InvalidInput(
                "squeezed variance exceeds anti-squeezed variance".into(),
            ));
        }
        if self.squeezed_variance * self.antisqueezed_variance < 0.25 * (1.0 - 1e-12) {
            return Err(FockError::InvalidInput(format!(
                "variance product {:.6e} violates the uncertainty bound 1/4",
                self.squeezed_variance * self.antisqueezed_variance
            )));
        }
        Ok(())
    }

    /// Squeezing parameter and thermal occupancy solving
    /// `V∓ = (n̄ + 1/2)·e^{∓2r}`.
    pub fn squeeze_and_thermal(&self) -> (f64, f64) {
        let r = 0.25 * (self.antisqueezed_variance / self.squeezed_variance).ln();
        let nbar = (self.squeezed_variance * self.antisqueezed_variance).sqrt() - 0.5;
        (r, nbar.max(0.0))
    }

    /// Variance of the quadrature at measurement phase φ
    /// (φ = 0 is the anti-squeezed axis).
    pub fn variance_at_phase(&self, phi: f64) -> f64 {
        let c = phi.cos();
        let s = phi.sin();
        self.antisqueezed_variance * c * c + self.squeezed_variance * s * s
    }
}

/// A sampled Wigner function on a rectangular phase-space grid.
#[derive(Debug, Clone)]
pub struct WignerGrid {
    pub x_axis: Vec<f64>,
    pub p_axis: Vec<f64>,
    /// `values[(i, j)] = W(x_axis[i], p_axis[j])`.
    pub values: DMatrix<f64>,
}

impl WignerGrid {
    /// Riemann sum of W times the cell area.
    pub fn integral(&self) -> f64 {
        let dx = self.x_axis[1] - self.x_axis[0];
        let dp = self.p_axis[1] - self.p_axis[0];
        self.values.sum() * dx * dp
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// CSV rows `x,p,w` with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,p,w\n");
        for (i, &x) in self.x_axis.iter().enumerate() {
            for (j, &p) in self.p_axis.iter().enumerate() {
                out.push_str(&format!("{x:.12e},{p:.12e},{:.12e}\n", self.values[(i, j)]));
            }
        }
        out
    }
}

/// Annihilation operator in a `dim`-dimensional Fock space (real entries).
pub(crate) fn annihilation(dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| {
        if j == i + 1 {
            (j as f64).sqrt()
        } else {
            0.0
        }
    })
}

/// Quadrature operators (x, p) as complex matrices.
pub(crate) fn quadrature_ops(dim: usize) -> (DMatrix<C64>, DMatrix<C64>) {
    let a = annihilation(dim);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let x = DMatrix::from_fn(dim, dim, |i, j| {
        C64::new((a[(i, j)] + a[(j, i)]) * inv_sqrt2, 0.0)
    });
    let p = DMatrix::from_fn(dim, dim, |i, j| {
        C64::new(0.0, (a[(j, i)] - a[(i, j)]) * inv_sqrt2)
    });
    (x, p)
}

/// Squeeze operator `S(r) = exp(r(a†² - a²)/2)` (real orthogonal); positive
/// `r` amplifies x.
fn squeeze_operator(dim: usize, r: f64) -> DMatrix<f64> {
    let a = annihilation(dim);
    let adag = a.transpose();
    let gen = (&adag * &adag - &a * &a) * (0.5 * r);
    gen.exp()
}

/// Populations of the untruncated squeezed vacuum, even levels only:
/// `p_{2n} = ((2n-1)!!/(2n)!!)·tanh^{2n}(r)/cosh(r)`.
fn squeezed_vacuum_deficit(r: f64, dim: usize) -> f64 {
    let t2 = r.tanh().powi(2);
    let mut p = 1.0 / r.cosh();
    let mut total = 0.0;
    let mut n = 0usize;
    while 2 * n < dim {
        total += p;
        p *= t2 * (2.0 * n as f64 + 1.0) / (2.0 * n as f64 + 2.0);
        n += 1;
    }
    1.0 - total
}

/// Squeezed vacuum `S(r)|0⟩⟨0|S†(r)` in a `dim`-dimensional Fock space.
pub fn squeezed_vacuum_dm(r: f64, dim: usize) -> Result<DensityMatrix> {
    if dim < 2 {
        return Err(FockError::InvalidInput("dim must be >= 2".into()));
    }
    if r.abs() > 3.0 {
        return Err(FockError::InvalidInput(format!(
            "|r| = {} exceeds the truncation guard of 3",
            r.abs()
        )));
    }
    let deficit = squeezed_vacuum_deficit(r, dim);
    if deficit > TRACE_DEFICIT_TOL {
        return Err(FockError::Truncation {
            dim,
            deficit,
            tol: TRACE_DEFICIT_TOL,
        });
    }
    // Build in an enlarged space so boundary effects of the truncated
    // squeeze operator stay below the validation tolerances.
    let dim_w = dim + 32;
    let s = squeeze_operator(dim_w, r);
    let psi = s.column(0);
    let mut rho = DMatrix::<C64>::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            rho[(i, j)] = C64::new(psi[i] * psi[j], 0.0);
        }
    }
    let tr = rho.trace().re;
    rho /= C64::new(tr, 0.0);
    DensityMatrix::new(rho)
}

/// Single-mode Gaussian (squeezed thermal) state with the requested
/// principal-axis variances: `ρ = S(r)·ρ_th(n̄)·S†(r)`.
pub fn gaussian_dm_from_variances(spec: &GaussianStateSpec, dim: usize) -> Result<DensityMatrix> {
    spec.validate()?;
    if dim < 2 {
        return Err(FockError::InvalidInput("dim must be >= 2".into()));
    }
    let (r, nbar) = spec.squeeze_and_thermal();
    if r.abs() > 3.0 {
        return Err(FockError::InvalidInput(format!(
            "implied squeezing r = {r} exceeds the truncation guard of 3"
        )));
    }
    let dim_w = dim + 32;
    let s = squeeze_operator(dim_w, r);
    let mut thermal = DMatrix::<f64>::zeros(dim_w, dim_w);
    let ratio = nbar / (nbar + 1.0);
    let mut p = 1.0 / (nbar + 1.0);
    for n in 0..dim_w {
        thermal[(n, n)] = p;
        p *= ratio;
    }
    let rho_w = &s * thermal * s.transpose();
    let deficit = 1.0 - (0..dim).map(|n| rho_w[(n, n)]).sum::<f64>();
    if deficit > TRACE_DEFICIT_TOL {
        return Err(FockError::Truncation {
            dim,
            deficit,
            tol: TRACE_DEFICIT_TOL,
        });
    }
    let mut rho = DMatrix::<C64>::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            // Symmetrize: the congruence is symmetric up to roundoff.
            rho[(i, j)] = C64::new(0.5 * (rho_w[(i, j)] + rho_w[(j, i)]), 0.0);
        }
    }
    let tr = rho.trace().re;
    rho /= C64::new(tr, 0.0);
    DensityMatrix::new(rho)
}

/// Generalized Laguerre polynomial `L_k^α(z)` by upward recurrence.
fn laguerre(k: usize, alpha: f64, z: f64) -> f64 {
    let mut l0 = 1.0;
    if k == 0 {
        return l0;
    }
    let mut l1 = 1.0 + alpha - z;
    for j in 1..k {
        let jf = j as f64;
        let l2 = ((2.0 * jf + 1.0 + alpha - z) * l1 - (jf + alpha) * l0) / (jf + 1.0);
        l0 = l1;
        l1 = l2;
    }
    l1
}

/// Wigner function of `rho` sampled on the cartesian product of the axes.
///
/// Uses the Fock-basis Laguerre kernel; for `|m⟩⟨n|`, `n ≥ m`:
/// `T_mn = ((-1)^m/π)·√(m!/n!)·(√2(x - ip))^{n-m}·e^{-(x²+p²)}·L_m^{n-m}(2(x²+p²))`.
pub fn wigner(rho: &DensityMatrix, x_axis: &[f64], p_axis: &[f64]) -> Result<WignerGrid> {
    for axis in [x_axis, p_axis] {
        if axis.len() < 2 || axis.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FockError::InvalidInput(
                "axes must be strictly increasing with >= 2 samples".into(),
            ));
        }
    }
    let dim = rho.dim;
    let inv_pi = std::f64::consts::FRAC_1_PI;
    let mut values = DMatrix::<f64>::zeros(x_axis.len(), p_axis.len());
    for (i, &x) in x_axis.iter().enumerate() {
        for (j, &p) in p_axis.iter().enumerate() {
            let s2 = 2.0 * (x * x + p * p);
            let beta = C64::new(x, -p) * std::f64::consts::SQRT_2;
            let beta_mag = beta.norm();
            let beta_phase = if beta_mag > 0.0 { beta / beta_mag } else { C64::new(1.0, 0.0) };
            let mut w = 0.0;
            for m in 0..dim {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                // Diagonal term.
                w += rho.elements[(m, m)].re * sign * inv_pi * (-0.5 * s2).exp() * laguerre(m, 0.0, s2);
                // Off-diagonal terms, counted twice via hermiticity.
                for n in (m + 1)..dim {
                    let k = (n - m) as f64;
                    if beta_mag == 0.0 {
                        continue;
                    }
                    let log_mag = 0.5 * (ln_gamma(m as f64 + 1.0) - ln_gamma(n as f64 + 1.0))
                        + k * beta_mag.ln()
                        - 0.5 * s2;
                    let kernel = sign * inv_pi * log_mag.exp() * laguerre(m, k, s2);
                    let t_mn = beta_phase.powu((n - m) as u32) * kernel;
                    w += 2.0 * (rho.elements[(m, n)] * t_mn.conj()).re;
                }
            }
            values[(i, j)] = w;
        }
    }
    Ok(WignerGrid {
        x_axis: x_axis.to_vec(),
        p_axis: p_axis.to_vec(),
        values,
    })
}

/// Symmetric grid of `n` points over ±`half_span`.
pub fn symmetric_axis(half_span: f64, n: usize) -> Vec<f64> {
    let step = 2.0 * half_span / (n as f64 - 1.0);
    (0..n).map(|i| -half_span + i as f64 * step).collect()
}

fn hermitian_sqrt(m: &DMatrix<C64>) -> DMatrix<C64> {
    let eig = m.clone().symmetric_eigen();
    let vals: DVector<f64> = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= C64::new(vals[k], 0.0);
    }
    &scaled * q.adjoint()
}

/// Uhlmann fidelity `F(ρ, σ) = (tr √(√ρ σ √ρ))²`, evaluated through the
/// equivalent trace-norm form `‖√ρ·√σ‖₁²` so it is symmetric by construction.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim != sigma.dim {
        return Err(FockError::DimMismatch(rho.dim, sigma.dim));
    }
    let product = hermitian_sqrt(&rho.elements) * hermitian_sqrt(&sigma.elements);
    let svd = product.svd(false, false);
    let tr: f64 = svd.singular_values.iter().sum();
    Ok((tr * tr).clamp(0.0, 1.0))
}

/// Variance of `x̂cosφ + p̂sinφ` in state `rho`.
pub fn quadrature_variance(rho: &DensityMatrix, phi: f64) -> f64 {
    let (x, p) = quadrature_ops(rho.dim);
    let xphi = x * C64::new(phi.cos(), 0.0) + p * C64::new(phi.sin(), 0.0);
    let mean = (&rho.elements * &xphi).trace().re;
    let mean_sq = (&rho.elements * (&xphi * &xphi)).trace().re;
    mean_sq - mean * mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn squeezed_vacuum_zero_r_is_vacuum() {
        let rho = squeezed_vacuum_dm(0.0, 10).unwrap();
        assert_relative_eq!(rho.populations()[0], 1.0, epsilon = 1e-12);
        assert!(rho.mean_photon_number().abs() < 1e-12);
    }

    #[test]
    fn squeezed_vacuum_mean_photon_number() {
        // Independent oracle: <N> = sinh²(r).
        let r = 0.5f64;
        let rho = squeezed_vacuum_dm(r, 30).unwrap();
        assert_relative_eq!(rho.mean_photon_number(), r.sinh().powi(2), epsilon = 1e-8);
    }

    #[test]
    fn squeezed_vacuum_has_even_parity() {
        let rho = squeezed_vacuum_dm(0.3, 30).unwrap();
        for (n, p) in rho.populations().iter().enumerate() {
            if n % 2 == 1 {
                assert!(*p < 1e-14, "odd population p_{n} = {p}");
            }
        }
    }

    #[test]
    fn squeezed_vacuum_truncation_error() {
        // dim 4 cannot hold r = 1.5.
        let err = squeezed_vacuum_dm(1.5, 4).unwrap_err();
        assert!(matches!(err, FockError::Truncation { .. }));
        let err = squeezed_vacuum_dm(3.5, 60).unwrap_err();
        assert!(matches!(err, FockError::InvalidInput(_)));
    }

    #[test]
    fn gaussian_vacuum_case() {
        let rho = gaussian_dm_from_variances(&GaussianStateSpec::vacuum(), 20).unwrap();
        assert_relative_eq!(rho.populations()[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn gaussian_reproduces_requested_variances() {
        let spec = GaussianStateSpec::from_db(-2.41, 3.87).unwrap();
        let rho = gaussian_dm_from_variances(&spec, DEFAULT_DIM).unwrap();
        assert_relative_eq!(
            quadrature_variance(&rho, 0.0),
            spec.antisqueezed_variance,
            epsilon = 1e-6
        );
        assert_relative_eq!(
            quadrature_variance(&rho, std::f64::consts::FRAC_PI_2),
            spec.squeezed_variance,
            epsilon = 1e-6
        );
    }

    #[test]
    fn gaussian_pure_case_matches_squeezed_vacuum() {
        let r = 0.4f64;
        let spec = GaussianStateSpec::new(0.5 * (-2.0 * r).exp(), 0.5 * (2.0 * r).exp()).unwrap();
        let a = gaussian_dm_from_variances(&spec, 30).unwrap();
        let b = squeezed_vacuum_dm(r, 30).unwrap();
        assert!(fidelity(&a, &b).unwrap() >= 1.0 - 1e-8);
    }

    #[test]
    fn wigner_vacuum_peak() {
        let rho = squeezed_vacuum_dm(0.0, 10).unwrap();
        let axis = symmetric_axis(4.0, 81);
        let grid = wigner(&rho, &axis, &axis).unwrap();
        let mid = axis.len() / 2;
        assert_relative_eq!(grid.values[(mid, mid)], std::f64::consts::FRAC_1_PI, epsilon = 1e-9);
        assert_relative_eq!(grid.integral(), 1.0, epsilon = 0.01);
    }

    #[test]
    fn wigner_matches_gaussian_closed_form() {
        // Pointwise oracle: W = (1/(2π√(VxVp)))·exp(-x²/2Vx - p²/2Vp) with the
        // anti-squeezed variance on the x (φ = 0) axis.
        let spec = GaussianStateSpec::from_db(-2.41, 3.87).unwrap();
        let rho = gaussian_dm_from_variances(&spec, 40).unwrap();
        let vx = spec.antisqueezed_variance;
        let vp = spec.squeezed_variance;
        let axis = symmetric_axis(3.0, 25);
        let grid = wigner(&rho, &axis, &axis).unwrap();
        for (i, &x) in axis.iter().enumerate() {
            for (j, &p) in axis.iter().enumerate() {
                let expect = (1.0 / (2.0 * std::f64::consts::PI * (vx * vp).sqrt()))
                    * (-x * x / (2.0 * vx) - p * p / (2.0 * vp)).exp();
                assert!(
                    (grid.values[(i, j)] - expect).abs() < 1e-6,
                    "W({x},{p}) = {} expected {expect}",
                    grid.values[(i, j)]
                );
            }
        }
    }

    #[test]
    fn wigner_squeezed_contour_is_one_sigma_ellipse() {
        // The 1/(eπ) contour of a pure squeezed vacuum crosses the axes at the
        // 1-σ points √(e^{±2r}) / √2... i.e. x = e^{r}/√2·√2 ~ derived below.
        let r = 0.28f64;
        let rho = squeezed_vacuum_dm(r, 40).unwrap();
        let target = 1.0 / (std::f64::consts::E * std::f64::consts::PI);
        // Along x (anti-squeezed): W(x,0) = (1/π)e^{-x²e^{-2r}} = 1/(eπ) at
        // x = e^{r}; along p at p = e^{-r}.
        let x1 = r.exp();
        let p1 = (-r).exp();
        let gx = wigner(&rho, &[x1, x1 + 0.1], &[0.0, 0.1]).unwrap();
        assert_relative_eq!(gx.values[(0, 0)], target, epsilon = 1e-6);
        let gp = wigner(&rho, &[0.0, 0.1], &[p1, p1 + 0.1]).unwrap();
        assert_relative_eq!(gp.values[(0, 0)], target, epsilon = 1e-6);
    }

    #[test]
    fn wigner_bounded_by_inverse_pi() {
        let spec = GaussianStateSpec::from_db(-2.41, 3.87).unwrap();
        let rho = gaussian_dm_from_variances(&spec, 40).unwrap();
        let axis = symmetric_axis(5.0, 61);
        let grid = wigner(&rho, &axis, &axis).unwrap();
        assert!(grid.max_abs() <= std::f64::consts::FRAC_1_PI + 1e-9);
    }

    #[test]
    fn fidelity_self_is_one() {
        let rho = squeezed_vacuum_dm(0.3, 25).unwrap();
        assert_relative_eq!(fidelity(&rho, &rho).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn fidelity_vacuum_vs_squeezed_closed_form() {
        // Pure-state overlap |<0|S(r)|0>|² = 1/cosh(r).
        let r = 0.28f64;
        let vac = squeezed_vacuum_dm(0.0, 30).unwrap();
        let sq = squeezed_vacuum_dm(r, 30).unwrap();
        let f = fidelity(&vac, &sq).unwrap();
        assert_relative_eq!(f, 1.0 / r.cosh(), epsilon = 1e-8);
        // Symmetry.
        let f2 = fidelity(&sq, &vac).unwrap();
        assert!((f - f2).abs() < 1e-10);
    }

    #[test]
    fn fidelity_dim_mismatch() {
        let a = squeezed_vacuum_dm(0.0, 10).unwrap();
        let b = squeezed_vacuum_dm(0.0, 12).unwrap();
        assert!(matches!(fidelity(&a, &b), Err(FockError::DimMismatch(10, 12))));
    }

    #[test]
    fn fidelity_monotone_under_vacuum_mixing() {
        let rho = squeezed_vacuum_dm(0.5, 40).unwrap();
        let vac = squeezed_vacuum_dm(0.0, 40).unwrap();
        let mut last = 1.0;
        for &eps in &[1e-3, 3e-3, 1e-2, 3e-2] {
            let mixed = DensityMatrix::new(
                rho.elements() * C64::new(1.0 - eps, 0.0) + vac.elements() * C64::new(eps, 0.0),
            )
            .unwrap();
            let f = fidelity(&rho, &mixed).unwrap();
            assert!(f <= last + 1e-12);
            assert!(f >= 1.0 - 0.5 * eps, "F = {f} at eps = {eps}");
            last = f;
        }
    }

    #[test]
    fn quadrature_variance_vacuum_is_half() {
        let vac = squeezed_vacuum_dm(0.0, 20).unwrap();
        for k in 0..8 {
            let phi = k as f64 * std::f64::consts::PI / 4.0;
            assert_relative_eq!(quadrature_variance(&vac, phi), 0.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn quadrature_variance_squeezed_extremes() {
        let r = 0.35f64;
        let rho = squeezed_vacuum_dm(r, 40).unwrap();
        assert_relative_eq!(quadrature_variance(&rho, 0.0), (2.0 * r).exp() / 2.0, epsilon = 1e-8);
        assert_relative_eq!(
            quadrature_variance(&rho, std::f64::consts::FRAC_PI_2),
            (-2.0 * r).exp() / 2.0,
            epsilon = 1e-8
        );
    }

    #[test]
    fn quadrature_variance_pi_periodic() {
        let spec = GaussianStateSpec::from_db(-1.5, 2.5).unwrap();
        let rho = gaussian_dm_from_variances(&spec, 30).unwrap();
        for k in 0..5 {
            let phi = 0.3 + 0.4 * k as f64;
            let a = quadrature_variance(&rho, phi);
            let b = quadrature_variance(&rho, phi + std::f64::consts::PI);
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn quadrature_variance_cosine_law() {
        let spec = GaussianStateSpec::from_db(-2.0, 3.0).unwrap();
        let rho = gaussian_dm_from_variances(&spec, 40).unwrap();
        for k in 0..16 {
            let phi = k as f64 * std::f64::consts::PI / 16.0;
            let expect = spec.variance_at_phase(phi);
            assert_relative_eq!(quadrature_variance(&rho, phi), expect, epsilon = 1e-6);
        }
    }

    #[test]
    fn density_matrix_json_round_trip() {
        let rho = squeezed_vacuum_dm(0.4, 25).unwrap();
        let json = rho.to_json();
        let back = DensityMatrix::from_json(&json).unwrap();
        assert!(fidelity(&rho, &back).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn gaussian_spec_rejects_sub_heisenberg() {
        assert!(GaussianStateSpec::new(0.1, 0.2).is_err());
        assert!(GaussianStateSpec::new(0.6, 0.5).is_err());
        assert!(GaussianStateSpec::new(0.25, 1.0).is_ok());
    }
}

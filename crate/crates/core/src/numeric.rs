//! Small numerical utilities shared across modules: quadrature rules,
//! special functions, a cubic-spline interpolant, and a derivative-free
//! simplex minimizer.

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`,
/// computed by Newton iteration on the Legendre polynomial roots and cached
/// per order (the rules sit inside tight fitting loops).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().unwrap().get(&n) {
        return rule.clone();
    }
    let rule = gauss_legendre_uncached(n);
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}

fn gauss_legendre_uncached(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P'_n(x).
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Integrate `f` over `[a, b]` with an `n`-point Gauss–Legendre rule.
#[cfg_attr(not(test), allow(dead_code))]
pub fn integrate_gl(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Natural logarithm of the gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Error function, Abramowitz–Stegun 7.1.26 (|error| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Harmonic-oscillator position wavefunctions `ψ_0..ψ_{nmax-1}` at `x`,
/// for the vacuum-variance-1/2 convention (`ψ_0 = π^{-1/4} e^{-x²/2}`).
pub fn oscillator_wavefunctions(nmax: usize, x: f64) -> Vec<f64> {
    let mut psi = vec![0.0; nmax];
    psi[0] = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    if nmax > 1 {
        psi[1] = std::f64::consts::SQRT_2 * x * psi[0];
    }
    for k in 2..nmax {
        let kf = k as f64;
        psi[k] = (2.0 / kf).sqrt() * x * psi[k - 1] - ((kf - 1.0) / kf).sqrt() * psi[k - 2];
    }
    psi
}

/// Cubic spline with not-a-knot end conditions. Reproduces cubic
/// polynomials exactly, which the dispersion oracles rely on.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    d2: Vec<f64>,
}

impl CubicSpline {
    pub fn new(x: &[f64], y: &[f64]) -> Self {
        let n = x.len();
        assert!(n >= 4, "not-a-knot spline needs at least 4 points");
        assert_eq!(n, y.len());
        assert!(x.windows(2).all(|w| w[1] > w[0]), "abscissae must increase");

        // Solve for second derivatives m_i. Interior rows are the standard
        // continuity equations; the first and last rows impose third-derivative
        // continuity across the second and penultimate knots.
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        let h = |i: usize| x[i + 1] - x[i];
        for i in 1..n - 1 {
            a[(i, i - 1)] = h(i - 1);
            a[(i, i)] = 2.0 * (h(i - 1) + h(i));
            a[(i, i + 1)] = h(i);
            b[i] = 6.0 * ((y[i + 1] - y[i]) / h(i) - (y[i] - y[i - 1]) / h(i - 1));
        }
        a[(0, 0)] = h(1);
        a[(0, 1)] = -(h(0) + h(1));
        a[(0, 2)] = h(0);
        a[(n - 1, n - 3)] = h(n - 2);
        a[(n - 1, n - 2)] = -(h(n - 3) + h(n - 2));
        a[(n - 1, n - 1)] = h(n - 3);
        let d2 = a.lu().solve(&b).expect("spline system is nonsingular");
        Self {
            x: x.to_vec(),
            y: y.to_vec(),
            d2: d2.iter().copied().collect(),
        }
    }

    fn segment(&self, xq: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&xi| xi <= xq) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    #[cfg_attr(not(test), allow(dead_code))]
    pub fn eval(&self, xq: f64) -> f64 {
        let i = self.segment(xq);
        let h = self.x[i + 1] - self.x[i];
        let t = (self.x[i + 1] - xq) / h;
        let u = (xq - self.x[i]) / h;
        t * self.y[i]
            + u * self.y[i + 1]
            + ((t * t * t - t) * self.d2[i] + (u * u * u - u) * self.d2[i + 1]) * h * h / 6.0
    }

    pub fn deriv(&self, xq: f64) -> f64 {
        let i = self.segment(xq);
        let h = self.x[i + 1] - self.x[i];
        let t = (self.x[i + 1] - xq) / h;
        let u = (xq - self.x[i]) / h;
        (self.y[i + 1] - self.y[i]) / h
            + ((3.0 * u * u - 1.0) * self.d2[i + 1] - (3.0 * t * t - 1.0) * self.d2[i]) * h / 6.0
    }

    pub fn deriv2(&self, xq: f64) -> f64 {
        let i = self.segment(xq);
        let h = self.x[i + 1] - self.x[i];
        let t = (self.x[i + 1] - xq) / h;
        let u = (xq - self.x[i]) / h;
        t * self.d2[i] + u * self.d2[i + 1]
    }
}

/// Nelder–Mead simplex minimization. Returns the best point and its value.
pub fn nelder_mead(
    f: impl Fn(&[f64]) -> f64,
    start: &[f64],
    initial_step: f64,
    max_iters: usize,
    tol: f64,
) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.to_vec());
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += initial_step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();

    for _ in 0..max_iters {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];
        if (values[worst] - values[best]).abs() < tol {
            break;
        }

        let mut centroid = vec![0.0; n];
        for &i in order.iter().take(n) {
            for k in 0..n {
                centroid[k] += simplex[i][k] / n as f64;
            }
        }
        let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
        };

        let reflected = lerp(&centroid, &simplex[worst], -1.0);
        let fr = f(&reflected);
        if fr < values[best] {
            let expanded = lerp(&centroid, &simplex[worst], -2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = fr;
        } else {
            let contracted = if fr < values[worst] {
                lerp(&centroid, &simplex[worst], -0.5)
            } else {
                lerp(&centroid, &simplex[worst], 0.5)
            };
            let fc = f(&contracted);
            if fc < values[worst].min(fr) {
                simplex[worst] = contracted;
                values[worst] = fc;
            } else {
                // Shrink toward the best vertex.
                let anchor = simplex[best].clone();
                for i in 0..=n {
                    if i == best {
                        continue;
                    }
                    simplex[i] = lerp(&anchor, &simplex[i], 0.5);
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }

    let (best, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    (simplex[best].clone(), values[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // n-point rule is exact through degree 2n-1.
        let v = integrate_gl(|x| x.powi(7) + 2.0 * x.powi(2), -1.0, 3.0, 8);
        let exact = (3.0f64.powi(8) - 1.0) / 8.0 + 2.0 * (27.0 + 1.0) / 3.0;
        assert_relative_eq!(v, exact, max_relative = 1e-13);
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        assert_relative_eq!(ln_gamma(5.0), 24.0f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), max_relative = 1e-12);
        assert_relative_eq!(ln_gamma(21.0), (1..=20).map(|k| (k as f64).ln()).sum::<f64>(), max_relative = 1e-12);
    }

    #[test]
    fn oscillator_wavefunctions_are_orthonormal() {
        let nmax = 12;
        let (nodes, weights) = gauss_legendre(400);
        let half = 10.0;
        let mut gram = vec![vec![0.0; nmax]; nmax];
        for (x, w) in nodes.iter().zip(&weights) {
            let psi = oscillator_wavefunctions(nmax, half * x);
            for i in 0..nmax {
                for j in 0..nmax {
                    gram[i][j] += w * half * psi[i] * psi[j];
                }
            }
        }
        for i in 0..nmax {
            for j in 0..nmax {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i][j] - expect).abs() < 1e-9, "gram[{i}][{j}] = {}", gram[i][j]);
            }
        }
    }

    #[test]
    fn spline_reproduces_cubic() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 0.125 * x * x * x;
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let sp = CubicSpline::new(&xs, &ys);
        for &x in &[0.1, 1.7, 3.33, 4.4] {
            assert_relative_eq!(sp.eval(x), f(x), max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(sp.deriv(x), -2.0 + x - 0.375 * x * x, max_relative = 1e-10, epsilon = 1e-10);
            assert_relative_eq!(sp.deriv2(x), 1.0 - 0.75 * x, max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let (p, v) = nelder_mead(
            |p| (p[0] - 3.0).powi(2) + 2.0 * (p[1] + 1.0).powi(2),
            &[0.0, 0.0],
            0.5,
            500,
            1e-14,
        );
        assert!(v < 1e-10);
        assert!((p[0] - 3.0).abs() < 1e-5 && (p[1] + 1.0).abs() < 1e-5);
    }
}

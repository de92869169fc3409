//! Small dense complex linear-algebra toolbox: quadrature rules, hermitian
//! eigendecompositions, matrix exponentials and a few operator helpers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
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

/// Affine map of a rule from [-1, 1] to [a, b].
pub fn scale_rule(nodes: &[f64], weights: &[f64], a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    (
        nodes.iter().map(|x| mid + half * x).collect(),
        weights.iter().map(|w| w * half).collect(),
    )
}

/// Eigendecomposition of a hermitian matrix. Returns ascending eigenvalues
/// and the unitary of column eigenvectors.
pub fn eigh(a: &CMat) -> (Vec<f64>, CMat) {
    let n = a.nrows();
    let sym = nalgebra::SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sym.eigenvalues[i].partial_cmp(&sym.eigenvalues[j]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| sym.eigenvalues[i]).collect();
    let mut vecs = CMat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &sym.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn dagger(a: &CMat) -> CMat {
    a.adjoint()
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

pub fn anticommutator(a: &CMat, b: &CMat) -> CMat {
    a * b + b * a
}

pub fn trace(a: &CMat) -> Complex64 {
    a.diagonal().iter().sum()
}

/// Largest absolute deviation from hermiticity.
pub fn hermiticity_residual(a: &CMat) -> f64 {
    let d = a - a.adjoint();
    d.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Symmetrize to the nearest hermitian matrix.
pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()).map(|z| 0.5 * z)
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a (6,6) Pade approximant.
pub fn expm(a: &CMat) -> CMat {
    let n = a.nrows();
    let norm: f64 = a
        .row_iter()
        .map(|r| r.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scale = c(0.5f64.powi(s));
    let x = a.map(|z| z * scale);

    // Pade(6,6) coefficients.
    let coef = [
        1.0,
        0.5,
        5.0 / 44.0,
        1.0 / 66.0,
        1.0 / 792.0,
        1.0 / 15840.0,
        1.0 / 665280.0,
    ];
    let id = CMat::identity(n, n);
    let mut pow = id.clone();
    let mut num = id.clone() * c(coef[0]);
    let mut den = id.clone() * c(coef[0]);
    for (k, &ck) in coef.iter().enumerate().skip(1) {
        pow = &pow * &x;
        num += pow.map(|z| z * c(ck));
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        den += pow.map(|z| z * c(sign * ck));
    }
    let mut f = den
        .lu()
        .solve(&num)
        .expect("expm: Pade denominator singular");
    for _ in 0..s {
        f = &f * &f;
    }
    f
}

/// exp(-i H t / hbar) for hermitian `h`, through its eigendecomposition.
pub fn unitary_evolution(h: &CMat, t: f64, hbar: f64) -> CMat {
    let (vals, vecs) = eigh(h);
    phase_function(&vals, &vecs, |e| (-I * c(e * t / hbar)).exp())
}

/// Assemble U f(Lambda) U^dagger for a spectral function on real eigenvalues.
pub fn phase_function(vals: &[f64], vecs: &CMat, f: impl Fn(f64) -> Complex64) -> CMat {
    let n = vals.len();
    let diag = CMat::from_diagonal(&CVec::from_iterator(n, vals.iter().map(|&e| f(e))));
    vecs * diag * vecs.adjoint()
}

/// Hermitian matrix function f(A) through the eigendecomposition.
pub fn hermitian_function(a: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = eigh(a);
    phase_function(&vals, &vecs, |e| c(f(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(5);
        // degree 9 is exact for a 5-point rule
        let int: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(8)).sum();
        assert_abs_diff_eq!(int, 2.0 / 9.0, epsilon = 1e-13);
        let total: f64 = w.iter().sum();
        assert_abs_diff_eq!(total, 2.0, epsilon = 1e-13);
    }

    #[test]
    fn gauss_legendre_sine() {
        let (x, w) = gauss_legendre(32);
        let (x, w) = scale_rule(&x, &w, 0.0, std::f64::consts::PI);
        let int: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.sin()).sum();
        assert_abs_diff_eq!(int, 2.0, epsilon = 1e-13);
    }

    #[test]
    fn eigh_reconstructs() {
        let a = CMat::from_row_slice(
            2,
            2,
            &[
                c(1.0),
                Complex64::new(0.3, 0.2),
                Complex64::new(0.3, -0.2),
                c(-0.5),
            ],
        );
        let (vals, vecs) = eigh(&a);
        let rebuilt = phase_function(&vals, &vecs, c);
        assert!(max_abs(&(rebuilt - a)) < 1e-12);
        assert!(vals[0] <= vals[1]);
    }

    #[test]
    fn expm_matches_eigenbasis_exponential() {
        let h = CMat::from_row_slice(
            2,
            2,
            &[
                c(0.7),
                Complex64::new(0.1, 0.4),
                Complex64::new(0.1, -0.4),
                c(-1.2),
            ],
        );
        let a = h.map(|z| -I * z);
        let direct = expm(&a);
        let via_eig = unitary_evolution(&h, 1.0, 1.0);
        assert!(max_abs(&(direct - via_eig)) < 1e-12);
    }

    #[test]
    fn expm_group_property() {
        let a = CMat::from_row_slice(
            2,
            2,
            &[
                Complex64::new(-0.3, 0.8),
                c(0.2),
                c(0.1),
                Complex64::new(-0.1, -0.4),
            ],
        );
        let half = expm(&a.map(|z| 0.5 * z));
        let full = expm(&a);
        assert!(max_abs(&(&half * &half - full)) < 1e-12);
    }
}

//! Resolvents, the superoperator scattering map, the two-particle
//! T-matrix with Pauli-corrected potentials, and smoothness diagnostics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::Statistics;
use crate::linalg::{c, dagger, eigh, max_abs, CMat, CVec, I};
use crate::modes::PotentialTensor;
use crate::HBAR;

/// Minimal positive gap between distinct values, with everything closer
/// than `tol` treated as degenerate. Returns 0 when all values coincide.
pub fn min_spacing(values: &[f64], tol: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut gap = f64::INFINITY;
    for w in v.windows(2) {
        let d = w[1] - w[0];
        if d > tol && d < gap {
            gap = d;
        }
    }
    if gap.is_finite() {
        gap
    } else {
        0.0
    }
}

fn check_epsilon(eps: f64, spacing: f64) -> Result<()> {
    if eps <= 0.0 {
        return Err(Error::InvalidInput("resolvent requires Re z > 0".into()));
    }
    if spacing > 0.0 && eps < 0.01 * spacing {
        return Err(Error::EpsilonTooSmall { eps, spacing });
    }
    Ok(())
}

/// Energy-domain vector resolvent: solves (z − H)x = b. Rejects z closer
/// to the spectrum than 1% of the level spacing.
pub fn resolvent_apply_vec(h: &CMat, z: Complex64, b: &CVec) -> Result<CVec> {
    let (vals, _) = eigh(h);
    let spacing = min_spacing(&vals, 1e-12);
    let dist = vals
        .iter()
        .map(|&e| (z - c(e)).norm())
        .fold(f64::INFINITY, f64::min);
    check_epsilon(dist, spacing)?;
    let n = h.nrows();
    let m = CMat::from_diagonal_element(n, n, z) - h;
    m.lu()
        .solve(b)
        .ok_or_else(|| Error::SolveFailed("singular resolvent solve".into()))
}

/// Applies (z − H′)⁻¹ to an operator B, with H′ = (i/ħ)[H,·], by working
/// in the eigenbasis of H where H′ is diagonal with eigenvalues
/// (i/ħ)(e_α − e_β). Requires Re z = ε > 0 bounded away from the pole
/// spacing.
pub fn resolvent_apply(h: &CMat, z: Complex64, b: &CMat) -> Result<CMat> {
    let (vals, vecs) = eigh(h);
    resolvent_apply_eig(&vals, &vecs, z, b)
}

/// Same solve with a precomputed eigendecomposition of H.
pub fn resolvent_apply_eig(vals: &[f64], vecs: &CMat, z: Complex64, b: &CMat) -> Result<CMat> {
    let spacing = min_spacing(vals, 1e-12) / HBAR;
    check_epsilon(z.re, spacing)?;
    let n = vals.len();
    let bt = dagger(vecs) * b * vecs;
    let mut xt = CMat::zeros(n, n);
    for a in 0..n {
        for bi in 0..n {
            let pole = I * (vals[a] - vals[bi]) / HBAR;
            xt[(a, bi)] = bt[(a, bi)] / (z - pole);
        }
    }
    Ok(vecs * xt * dagger(vecs))
}

/// V′[B] = (i/ħ)[V, B].
pub fn commutator_super(v: &CMat, b: &CMat) -> CMat {
    (v * b - b * v) * (I / HBAR)
}

/// Scattering map T(z)[B] = V′[B] + V′[(z − H′)⁻¹ V′[B]] with H = H0 + V.
pub fn scattering_map(h: &CMat, v: &CMat, z: Complex64, b: &CMat) -> Result<CMat> {
    let vb = commutator_super(v, b);
    let res = resolvent_apply(h, z, &vb)?;
    Ok(vb + commutator_super(v, &res))
}

/// (Anti)symmetrized unit-norm pair kets over mode pairs. Pairs are
/// enumerated lexicographically as (p1 ≤ p2), with diagonal pairs excluded
/// for fermions. `norms[P] = 1/sqrt(2(1+δ_{p1 p2}))` converts the raw
/// symmetrized combination a†_{p1} a†_{p2} |0⟩ to unit norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairBasis {
    pub statistics: Statistics,
    pub modes: usize,
    pub pairs: Vec<(usize, usize)>,
    pub norms: Vec<f64>,
}

impl PairBasis {
    pub fn new(statistics: Statistics, modes: usize) -> Self {
        let mut pairs = Vec::new();
        let mut norms = Vec::new();
        for p1 in 0..modes {
            let start = match statistics {
                Statistics::Bose => p1,
                Statistics::Fermi => p1 + 1,
            };
            for p2 in start..modes {
                pairs.push((p1, p2));
                let dup: f64 = if p1 == p2 { 1.0 } else { 0.0 };
                norms.push(1.0 / (2.0 * (1.0 + dup)).sqrt());
            }
        }
        Self {
            statistics,
            modes,
            pairs,
            norms,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Raw (non-orthonormal) overlap ⟨l₂l₁|f₂f₁⟩ = (1/2!)(δδ ± δδ).
    pub fn raw_overlap(&self, l: (usize, usize), f: (usize, usize)) -> f64 {
        let s = self.statistics.sign();
        0.5 * ((delta(l.1, f.1) * delta(l.0, f.0)) + s * (delta(l.1, f.0) * delta(l.0, f.1)))
    }

    /// Free pair energies E_{p1} + E_{p2}.
    pub fn pair_energies(&self, energies: &[f64]) -> Vec<f64> {
        self.pairs
            .iter()
            .map(|&(p1, p2)| energies[p1] + energies[p2])
            .collect()
    }

    /// Two-body potential in the unit-norm basis:
    /// 2 N_P N_Q (V_{p1 p2 q2 q1} ± V_{p1 p2 q1 q2}).
    pub fn potential_matrix(&self, tensor: &PotentialTensor) -> CMat {
        self.matrix_from_fn(|l1, l2, f2, f1| tensor.get(l1, l2, f2, f1))
    }

    pub fn matrix_from_fn(
        &self,
        coef: impl Fn(usize, usize, usize, usize) -> Complex64,
    ) -> CMat {
        let n = self.len();
        let s = c(self.statistics.sign());
        let mut m = CMat::zeros(n, n);
        for (pi, &(p1, p2)) in self.pairs.iter().enumerate() {
            for (qi, &(q1, q2)) in self.pairs.iter().enumerate() {
                let v = coef(p1, p2, q2, q1) + s * coef(p1, p2, q1, q2);
                m[(pi, qi)] = c(2.0 * self.norms[pi] * self.norms[qi]) * v;
            }
        }
        m
    }
}

fn delta(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

/// Two-particle T-matrix with Pauli-corrected left potential, evaluated at
/// a complex energy z (off the real axis).
#[derive(Debug, Clone)]
pub struct PairTMatrix {
    pub z: Complex64,
    pub t: CMat,
    pub v: CMat,
    pub v_left: CMat,
    pub h_left: CMat,
}

impl PairTMatrix {
    pub fn v_right(&self) -> CMat {
        dagger(&self.v_left)
    }

    pub fn h_right(&self) -> CMat {
        dagger(&self.h_left)
    }

    /// [T(z)]† rebuilt from the right-hand data; must equal the direct
    /// adjoint of `t`.
    pub fn adjoint_rebuilt(&self) -> Result<CMat> {
        let n = self.v.nrows();
        let m = CMat::from_diagonal_element(n, n, self.z.conj()) - self.h_right();
        let sol = m
            .lu()
            .solve(&self.v)
            .ok_or_else(|| Error::SolveFailed("adjoint resolvent solve".into()))?;
        Ok(&self.v + self.v_right() * sol)
    }

    pub fn adjoint_residual(&self) -> f64 {
        match self.adjoint_rebuilt() {
            Ok(rebuilt) => max_abs(&(dagger(&self.t) - rebuilt)),
            Err(_) => f64::INFINITY,
        }
    }
}

/// T^(2)(z) = V^(2) + V^(2) (z − H_L)⁻¹ V_L, with
/// ⟨P|V_L|Q⟩ = (1 ± n̄_{p1} ± n̄_{p2}) ⟨P|V|Q⟩ and H_L = H0 + V_L.
pub fn t_matrix_pair(
    basis: &PairBasis,
    energies: &[f64],
    tensor: &PotentialTensor,
    occupations: &[f64],
    z: Complex64,
) -> Result<PairTMatrix> {
    if energies.len() != basis.modes || occupations.len() != basis.modes {
        return Err(Error::InvalidInput(
            "energies/occupations must match mode count".into(),
        ));
    }
    if basis.statistics == Statistics::Fermi && occupations.iter().any(|&n| !(0.0..=1.0).contains(&n))
    {
        return Err(Error::InvalidInput(
            "Fermi occupations must lie in [0,1]".into(),
        ));
    }
    if basis.statistics == Statistics::Bose && occupations.iter().any(|&n| n < 0.0) {
        return Err(Error::InvalidInput("occupations must be >= 0".into()));
    }
    let n = basis.len();
    let v = basis.potential_matrix(tensor);
    let s = basis.statistics.sign();
    let mut v_left = v.clone();
    for (pi, &(p1, p2)) in basis.pairs.iter().enumerate() {
        let factor = c(1.0 + s * occupations[p1] + s * occupations[p2]);
        for qi in 0..n {
            v_left[(pi, qi)] *= factor;
        }
    }
    let e_pair = basis.pair_energies(energies);
    let mut h_left = v_left.clone();
    for (pi, &e) in e_pair.iter().enumerate() {
        h_left[(pi, pi)] += c(e);
    }
    let spacing = min_spacing(&e_pair, 1e-12);
    check_epsilon(z.im.abs(), spacing)?;
    let m = CMat::from_diagonal_element(n, n, z) - &h_left;
    let sol = m
        .lu()
        .solve(&v_left)
        .ok_or_else(|| Error::SolveFailed("pair resolvent solve".into()))?;
    let t = &v + &v * sol;
    Ok(PairTMatrix {
        z,
        t,
        v,
        v_left,
        h_left,
    })
}

/// Diagnostic report of the smoothness scan for a T builder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothnessReport {
    /// Estimated collision time: the shortest time scale τ₀ such that T
    /// varies by less than 5% over Δy = ħ/τ₀.
    pub tau0: f64,
    pub variation_y: f64,
    pub variation_eps: f64,
    pub epsilon_valid: bool,
    pub smooth: bool,
    pub threshold: f64,
}

const SMOOTHNESS_THRESHOLD: f64 = 0.05;

/// Scans the builder over the imaginary-axis window y ∈ [y_center ± y_window/2]
/// and over the supplied ε list. `level_spacing` is the pole spacing δ used
/// to flag invalid ε (poles too close).
pub fn smoothness_scan<F>(
    build: F,
    y_center: f64,
    y_window: f64,
    epsilons: &[f64],
    level_spacing: f64,
) -> SmoothnessReport
where
    F: Fn(Complex64) -> Result<CMat>,
{
    assert!(!epsilons.is_empty() && y_window > 0.0);
    let eps_mid = epsilons[epsilons.len() / 2];
    let at = |y: f64, eps: f64| build(c(eps) + I * y);
    let reference = at(y_center, eps_mid);
    let scale = reference
        .as_ref()
        .map(|m| max_abs(m))
        .unwrap_or(0.0)
        .max(1e-300);

    let relvar = |a: &Result<CMat>, b: &Result<CMat>| -> f64 {
        match (a, b) {
            (Ok(a), Ok(b)) => max_abs(&(a - b)) / scale,
            _ => f64::INFINITY,
        }
    };

    // variation over the ε list at fixed y
    let mut variation_eps: f64 = 0.0;
    for &e in epsilons {
        variation_eps = variation_eps.max(relvar(&at(y_center, e), &reference));
    }

    // find the largest Δy over which variation stays below threshold
    let steps = 24usize;
    let mut best_dy = None;
    let mut variation_y: f64 = 0.0;
    for k in 0..steps {
        // geometric grid from y_window down
        let dy = y_window * (0.5f64).powf(k as f64 * 12.0 / steps as f64);
        let var = relvar(&at(y_center + 0.5 * dy, eps_mid), &at(y_center - 0.5 * dy, eps_mid));
        if k == 0 {
            variation_y = var;
        }
        if var < SMOOTHNESS_THRESHOLD {
            best_dy = Some(dy);
            break;
        }
    }
    let (tau0, smooth) = match best_dy {
        Some(dy) => (HBAR / dy, true),
        None => (HBAR / (y_window * (0.5f64).powi(12)), false),
    };
    let epsilon_valid = epsilons.iter().all(|&e| e > level_spacing);
    SmoothnessReport {
        tau0,
        variation_y,
        variation_eps,
        epsilon_valid,
        smooth,
        threshold: SMOOTHNESS_THRESHOLD,
    }
}

/// Default ε: geometric mean of pole spacing δ and spectral width, clamped
/// to [10δ, ħ/τ₀].
pub fn default_epsilon(spacing: f64, width: f64, tau0: f64) -> f64 {
    let lo = 10.0 * spacing;
    let hi = HBAR / tau0;
    (spacing * width).sqrt().clamp(lo, hi.max(lo))
}

//! The kinetic generator on number-conserving monomials a†_h a_k: streaming,
//! gain and loss parts of the collision term, conservation and positivity
//! audits, the Pauli-factor factorization scan, and the smeared phase-space
//! (Boltzmann) density.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fock::{
    ladder, one_body_operator, two_body_from_fn, FockSpace, LadderKind,
    SecondQuantizedOperator, Statistics,
};
use crate::linalg::{c, dagger, max_abs, CMat, CVec, I};
use crate::modes::ModeBasis;
use crate::scattering::PairBasis;
use crate::HBAR;

/// Rebuilds the two-body operator ½ Σ a†a† c aa whose two-particle block
/// equals the given matrix on the unit-norm unordered pair basis. The kernel
/// is the (anti)symmetrized representative
///   c(l1,l2,f2,f1) = s^{σ_l+σ_f} · A[P,Q] / (4 N_P N_Q),
/// σ counting the sorting swaps of (l1,l2) and (f1,f2).
pub fn two_body_from_pair_matrix(
    space: &FockSpace,
    basis: &PairBasis,
    a: &CMat,
) -> SecondQuantizedOperator {
    let index: HashMap<(usize, usize), usize> = basis
        .pairs
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let s = basis.statistics.sign();
    two_body_from_fn(space, |l1, l2, f2, f1| {
        let (lp, ls) = if l1 <= l2 { ((l1, l2), 1.0) } else { ((l2, l1), s) };
        let (fp, fs) = if f1 <= f2 { ((f1, f2), 1.0) } else { ((f2, f1), s) };
        match (index.get(&lp), index.get(&fp)) {
            (Some(&pi), Some(&qi)) => {
                a[(pi, qi)] * c(ls * fs / (4.0 * basis.norms[pi] * basis.norms[qi]))
            }
            _ => c(0.0),
        }
    })
}

/// Pure pair-annihilation operator Â = Σ_{f1 f2} c_{f2 f1} a_{f2} a_{f1}
/// whose vacuum row reproduces the given unordered pair-basis row:
/// ⟨vac|Â|Q⟩ = row[Q]. Kernel: c = s^{σ_f}·row[Q]/(2√2 N_Q).
pub fn pair_annihilator(space: &FockSpace, basis: &PairBasis, row: &[Complex64]) -> CMat {
    let dim = space.dim();
    let s = basis.statistics.sign();
    let mut out = CMat::zeros(dim, dim);
    for (qi, &(q1, q2)) in basis.pairs.iter().enumerate() {
        if row[qi].norm() == 0.0 {
            continue;
        }
        let kappa = row[qi] / c(2.0 * std::f64::consts::SQRT_2 * basis.norms[qi]);
        // ordered terms (f1,f2) = (q1,q2) [σ=0] and (q2,q1) [σ=1], which
        // coincide on diagonal pairs
        let a_q1 = ladder(space, q1, LadderKind::Annihilate).to_dense();
        let a_q2 = ladder(space, q2, LadderKind::Annihilate).to_dense();
        // c_{f2 f1} a_{f2} a_{f1} with (f2,f1) = (q2,q1): apply a_{q1} first
        out += &a_q2 * &a_q1 * kappa;
        if q1 != q2 {
            out += &a_q1 * &a_q2 * (kappa * c(s));
        }
    }
    out
}

/// Report from the conservation / positivity audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConservationReport {
    /// ‖Σ_h L′(a†_h a_h)‖_max, relative to the collision scale
    pub number_residual: f64,
    /// ‖Σ_h E_h L′(a†_h a_h)‖_max relative to the collision scale
    pub energy_residual_rel: f64,
    /// min over random draws of Σ⟨ψ_h|([1+τL′]a†_h a_k)ψ_k⟩
    pub min_quadratic_form: f64,
    pub collision_scale: f64,
    pub tau: f64,
}

/// The kinetic generator realized on a truncated Fock space, assembled from
/// the pair-basis effective-interaction family: H_eff from V^eff, the
/// anti-self-adjoint part from Γ (with the unitarity substitution so number
/// conservation is exact), and the sandwich term from the R operators.
pub struct KineticGenerator {
    pub space: FockSpace,
    pub energies: Vec<f64>,
    pub ops: crate::lindblad::KineticOperators,
    pub tau0: f64,
    pub tau1: f64,
    pub mass: f64,
    h_eff: CMat,
    gamma_sub: CMat,
    /// Â_P per unordered pair, from the rows of R
    pair_ann: Vec<CMat>,
    /// dressing factor m_P = N_P (1 + δ_{p1 p2})
    m: Vec<f64>,
    pair_index: HashMap<(usize, usize), usize>,
    a_ops: Vec<CMat>,
    adag_ops: Vec<CMat>,
}

impl KineticGenerator {
    pub fn new(
        space: FockSpace,
        energies: &[f64],
        ops: crate::lindblad::KineticOperators,
        tau0: f64,
        tau1: f64,
        mass: f64,
    ) -> Result<Self> {
        let modes = ops.pair_basis.modes;
        if space.modes != modes || energies.len() != modes {
            return Err(Error::InvalidInput("mode count mismatch".into()));
        }
        let mut e1 = CMat::zeros(modes, modes);
        for (f, &e) in energies.iter().enumerate() {
            e1[(f, f)] = c(e);
        }
        let h_eff = one_body_operator(&space, &e1)
            .add(&two_body_from_pair_matrix(&space, &ops.pair_basis, &ops.v_eff))
            .to_dense();
        let gamma_sub =
            two_body_from_pair_matrix(&space, &ops.pair_basis, &ops.gamma_from_r).to_dense();
        let pair_ann: Vec<CMat> = (0..ops.pair_basis.len())
            .map(|p| {
                let row: Vec<Complex64> =
                    (0..ops.pair_basis.len()).map(|q| ops.r[(p, q)]).collect();
                pair_annihilator(&space, &ops.pair_basis, &row)
            })
            .collect();
        let m = ops
            .pair_basis
            .pairs
            .iter()
            .zip(&ops.pair_basis.norms)
            .map(|(&(p1, p2), &n)| n * if p1 == p2 { 2.0 } else { 1.0 })
            .collect();
        let pair_index = ops
            .pair_basis
            .pairs
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i))
            .collect();
        let a_ops: Vec<CMat> = (0..modes)
            .map(|f| ladder(&space, f, LadderKind::Annihilate).to_dense())
            .collect();
        let adag_ops: Vec<CMat> = a_ops.iter().map(dagger).collect();
        Ok(Self {
            space,
            energies: energies.to_vec(),
            ops,
            tau0,
            tau1,
            mass,
            h_eff,
            gamma_sub,
            pair_ann,
            m,
            pair_index,
            a_ops,
            adag_ops,
        })
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    /// Effective Hamiltonian realized on the Fock space (one-body energies
    /// plus the effective interaction).
    pub fn effective_hamiltonian(&self) -> &CMat {
        &self.h_eff
    }

    pub fn monomial(&self, h: usize, k: usize) -> CMat {
        &self.adag_ops[h] * &self.a_ops[k]
    }

    /// Ordered-label prefactor of R̂_{kλ} relative to Â_P: sign from sorting
    /// (Fermi) and the dressing m_P.
    fn ordered_factor(&self, k: usize, lam: usize) -> Option<(usize, f64)> {
        let s = self.ops.pair_basis.statistics.sign();
        let (pair, sign) = if k <= lam { ((k, lam), 1.0) } else { ((lam, k), s) };
        let pi = *self.pair_index.get(&pair)?;
        Some((pi, sign * self.m[pi]))
    }

    /// Sandwich term (1/ħ) Σ_λ R̂†_{hλ} R̂_{kλ}, with R̂_{kλ} = ±√2 m_P Â_P.
    pub fn sandwich(&self, h: usize, k: usize) -> CMat {
        let n = self.dim();
        let mut out = CMat::zeros(n, n);
        for lam in 0..self.space.modes {
            let (Some((pi, fh)), Some((qi, fk))) =
                (self.ordered_factor(h, lam), self.ordered_factor(k, lam))
            else {
                continue;
            };
            out += dagger(&self.pair_ann[pi]) * &self.pair_ann[qi] * c(2.0 * fh * fk / HBAR);
        }
        out
    }

    pub fn streaming(&self, h: usize, k: usize) -> CMat {
        let m = self.monomial(h, k);
        (&self.h_eff * &m - &m * &self.h_eff) * (I / HBAR)
    }

    /// −(1/ħ)([Γ̂, a†_h] a_k − a†_h [Γ̂, a_k]) with the substituted Γ̂.
    pub fn damping(&self, h: usize, k: usize) -> CMat {
        let g = &self.gamma_sub;
        let comm_hdag = g * &self.adag_ops[h] - &self.adag_ops[h] * g;
        let comm_k = g * &self.a_ops[k] - &self.a_ops[k] * g;
        (comm_hdag * &self.a_ops[k] - &self.adag_ops[h] * comm_k) * c(-1.0 / HBAR)
    }

    fn apply_uncut(&self, h: usize, k: usize) -> CMat {
        self.streaming(h, k) + self.damping(h, k) + self.sandwich(h, k)
    }

    /// L′(a†_h a_k) for monomials passing the diagonal-enough cut
    /// |E_h − E_k| ≤ ħ/τ1.
    pub fn apply(&self, h: usize, k: usize) -> Result<CMat> {
        let gap = (self.energies[h] - self.energies[k]).abs();
        if gap * self.tau1 / HBAR > 1.0 {
            return Err(Error::SecularCut(gap * self.tau1 / HBAR));
        }
        Ok(self.apply_uncut(h, k))
    }

    /// Gain, loss, and streaming parts of the diagonal collision term;
    /// gain + loss + streaming = apply(h, h) by construction.
    pub fn boltzmann_decompose(&self, h: usize) -> (CMat, CMat, CMat) {
        (self.sandwich(h, h), self.damping(h, h), self.streaming(h, h))
    }

    /// Typical magnitude of the collision (gain) terms, used to normalize
    /// residuals.
    pub fn collision_scale(&self) -> f64 {
        (0..self.space.modes)
            .map(|h| max_abs(&self.sandwich(h, h)))
            .fold(0.0, f64::max)
    }

    /// Diagonal product state matching the background occupations: exact
    /// binomial weights for Fermi statistics, truncated geometric for Bose.
    pub fn background_state(&self) -> CMat {
        let dim = self.dim();
        let nbar = &self.ops.occupations;
        let n_max = self.space.n_max as i32;
        let mut rho = CMat::zeros(dim, dim);
        let mut total = 0.0;
        for (i, occ) in self.space.states.iter().enumerate() {
            let mut w = 1.0;
            for (f, &o) in occ.iter().enumerate() {
                let n = nbar[f];
                w *= match self.space.statistics {
                    Statistics::Fermi => {
                        if o == 1 {
                            n
                        } else {
                            1.0 - n
                        }
                    }
                    Statistics::Bose => {
                        if n == 0.0 {
                            if o == 0 {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            let x = n / (1.0 + n);
                            (1.0 - x) * x.powi(o as i32) / (1.0 - x.powi(n_max + 1))
                        }
                    }
                };
            }
            rho[(i, i)] = c(w);
            total += w;
        }
        rho / c(total)
    }

    /// Largest block norm of L′ over all monomials; the positivity audit
    /// needs τ small against this scale, not just the collision scale.
    pub fn generator_scale(&self) -> f64 {
        let modes = self.space.modes;
        let mut s = 0.0f64;
        for h in 0..modes {
            for k in 0..modes {
                s = s.max(max_abs(&self.apply_uncut(h, k)));
            }
        }
        s
    }

    pub fn conservation_and_positivity(
        &self,
        tau: f64,
        draws: usize,
        seed: u64,
    ) -> ConservationReport {
        use rand::{Rng, SeedableRng};
        let n = self.dim();
        let modes = self.space.modes;
        let scale = self.collision_scale().max(1e-300);

        let mut number = CMat::zeros(n, n);
        for h in 0..modes {
            number += self.apply_uncut(h, h);
        }
        let number_residual = max_abs(&number) / scale;

        // energy balance of the collision rates in the background state;
        // streaming contributes exactly zero there
        let rho = self.background_state();
        let mut e_rate = 0.0;
        let mut e_scale = 0.0;
        for h in 0..modes {
            let (gain, loss, _) = self.boltzmann_decompose(h);
            let g = (&gain * &rho).trace().re;
            let l = (&loss * &rho).trace().re;
            e_rate += self.energies[h] * (g + l);
            e_scale += self.energies[h].abs() * (g.abs() + l.abs());
        }
        let energy_residual_rel = e_rate.abs() / e_scale.max(1e-300);

        // blocks of the first-order positivity form
        let blocks: Vec<Vec<CMat>> = (0..modes)
            .map(|h| {
                (0..modes)
                    .map(|k| self.monomial(h, k) + self.apply_uncut(h, k) * c(tau))
                    .collect()
            })
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut min_q = f64::INFINITY;
        for _ in 0..draws {
            let psis: Vec<CVec> = (0..modes)
                .map(|_| {
                    CVec::from_fn(n, |_, _| {
                        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                    })
                })
                .collect();
            let norm: f64 = psis.iter().map(|p| p.norm_squared()).sum();
            let mut q = 0.0;
            for h in 0..modes {
                for k in 0..modes {
                    q += (psis[h].adjoint() * &blocks[h][k] * &psis[k])[(0, 0)].re;
                }
            }
            min_q = min_q.min(q / norm);
        }
        ConservationReport {
            number_residual,
            energy_residual_rel,
            min_quadratic_form: min_q,
            collision_scale: scale,
            tau,
        }
    }
}

/// Factorization scan of the linear Pauli correction:
///   lhs = 2ε(1 ± n_λ ± ½(n_h+n_k)),
///   rhs = √(2ε(1±n_λ±n_h)) √(2ε(1±n_λ±n_k)).
/// Returns the max relative error over the grid and its location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PauliFactorizationReport {
    pub max_rel_error: f64,
    pub at: (f64, f64, f64),
}

pub fn pauli_factorization_check(
    statistics: Statistics,
    n_values: &[f64],
    epsilon: f64,
) -> PauliFactorizationReport {
    pauli_factorization_check_constrained(statistics, n_values, epsilon, f64::INFINITY)
}

/// Same scan restricted to combinations whose combined Pauli corrections
/// |n_λ + n_h| and |n_λ + n_k| stay below `max_correction` ("Pauli
/// corrections not very large").
pub fn pauli_factorization_check_constrained(
    statistics: Statistics,
    n_values: &[f64],
    epsilon: f64,
    max_correction: f64,
) -> PauliFactorizationReport {
    let s = statistics.sign();
    let mut worst = 0.0f64;
    let mut at = (0.0, 0.0, 0.0);
    for &nl in n_values {
        for &nh in n_values {
            for &nk in n_values {
                if (nl + nh).abs() > max_correction || (nl + nk).abs() > max_correction {
                    continue;
                }
                let lhs = 2.0 * epsilon * (1.0 + s * nl + s * 0.5 * (nh + nk));
                let fa = 2.0 * epsilon * (1.0 + s * nl + s * nh);
                let fb = 2.0 * epsilon * (1.0 + s * nl + s * nk);
                if fa <= 0.0 || fb <= 0.0 || lhs <= 0.0 {
                    continue;
                }
                let rhs = (fa * fb).sqrt();
                let rel = (lhs - rhs).abs() / lhs.abs();
                if rel > worst {
                    worst = rel;
                    at = (nl, nh, nk);
                }
            }
        }
    }
    PauliFactorizationReport {
        max_rel_error: worst,
        at,
    }
}

/// Gaussian-smeared joint position–momentum density on Gauss–Legendre nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSpaceDensity {
    pub x_nodes: Vec<f64>,
    pub x_weights: Vec<f64>,
    pub p_nodes: Vec<f64>,
    pub p_weights: Vec<f64>,
    /// values[ix][ip], real and nonnegative
    pub values: Vec<Vec<f64>>,
    pub sigma: f64,
    pub mass: f64,
}

impl PhaseSpaceDensity {
    pub fn integral(&self) -> f64 {
        let mut total = 0.0;
        for (ix, wx) in self.x_weights.iter().enumerate() {
            for (ip, wp) in self.p_weights.iter().enumerate() {
                total += wx * wp * self.values[ix][ip];
            }
        }
        total
    }

    pub fn min_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }

    /// Momentum marginal ∫ f dx at each p node.
    pub fn momentum_marginal(&self) -> Vec<f64> {
        (0..self.p_nodes.len())
            .map(|ip| {
                self.x_weights
                    .iter()
                    .enumerate()
                    .map(|(ix, wx)| wx * self.values[ix][ip])
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSpaceGrid {
    pub n_x: usize,
    pub n_p: usize,
    pub p_max: f64,
    pub quadrature_order: usize,
}

/// f(x,p) = m Σ_{hk} ⟨u_h|F(x,p)|u_k⟩ ⟨a†_h a_k⟩ with F the coherent-state
/// POVM |g_{xp}⟩⟨g_{xp}|/(2πħ), g a width-σ Gaussian wave packet. `rho_one`
/// holds ⟨a†_h a_k⟩ at (k,h) (the one-particle reduced density matrix).
pub fn boltzmann_density(
    rho_one: &CMat,
    basis: &ModeBasis,
    grid: &PhaseSpaceGrid,
    sigma: f64,
    mass: f64,
) -> Result<PhaseSpaceDensity> {
    if basis.dimension != 1 {
        return Err(Error::InvalidInput(
            "phase-space density implemented for one-dimensional boxes".into(),
        ));
    }
    let modes = basis.indices.len();
    if rho_one.nrows() != modes {
        return Err(Error::InvalidInput("density-matrix size mismatch".into()));
    }
    let l = basis.lengths[0];
    let x_lo = -6.0 * sigma;
    let x_hi = l + 6.0 * sigma;
    if sigma < 2.0 * (x_hi - x_lo) / grid.n_x as f64 {
        return Err(Error::InvalidInput(
            "smearing width below phase-space grid resolution".into(),
        ));
    }
    let (gx, gwx) = crate::linalg::gauss_legendre(grid.n_x);
    let (x_nodes, x_weights) = crate::linalg::scale_rule(&gx, &gwx, x_lo, x_hi);
    let (gp, gwp) = crate::linalg::gauss_legendre(grid.n_p);
    let (p_nodes, p_weights) =
        crate::linalg::scale_rule(&gp, &gwp, -grid.p_max, grid.p_max);
    let (gy, gwy) = crate::linalg::gauss_legendre(grid.quadrature_order);
    let (y_nodes, y_weights) = crate::linalg::scale_rule(&gy, &gwy, 0.0, l);
    let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-0.25);

    // G_h(x,p) = ⟨g_{xp}|u_h⟩ = Σ_y w_y norm e^{−(y−x)²/4σ²} e^{−ipy/ħ} u_h(y)
    // factorized as (x,y) × (y,p) matrix products
    let ny = y_nodes.len();
    let mut phase = CMat::zeros(ny, p_nodes.len());
    for (iy, &y) in y_nodes.iter().enumerate() {
        for (ip, &p) in p_nodes.iter().enumerate() {
            phase[(iy, ip)] = (-I * p * y / HBAR).exp();
        }
    }
    let g_mats: Vec<CMat> = (0..modes)
        .map(|h| {
            let mut left = CMat::zeros(grid.n_x, ny);
            for (ix, &x) in x_nodes.iter().enumerate() {
                for (iy, &y) in y_nodes.iter().enumerate() {
                    let gauss = (-(y - x).powi(2) / (4.0 * sigma * sigma)).exp();
                    left[(ix, iy)] =
                        c(y_weights[iy] * norm * gauss * basis.eval(h, &[y]));
                }
            }
            left * &phase
        })
        .collect();

    let prefactor = mass / (2.0 * std::f64::consts::PI * HBAR);
    let mut values = vec![vec![0.0; p_nodes.len()]; grid.n_x];
    let mut gbar = CVec::zeros(modes);
    for ix in 0..grid.n_x {
        for ip in 0..p_nodes.len() {
            for h in 0..modes {
                gbar[h] = g_mats[h][(ix, ip)].conj();
            }
            let v = (gbar.adjoint() * rho_one * &gbar)[(0, 0)].re;
            values[ix][ip] = prefactor * v;
        }
    }
    Ok(PhaseSpaceDensity {
        x_nodes,
        x_weights,
        p_nodes,
        p_weights,
        values,
        sigma,
        mass,
    })
}

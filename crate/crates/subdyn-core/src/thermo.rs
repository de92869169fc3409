//! Maximum-entropy thermodynamic layer: cell-integrated density operators
//! (mass, momentum, energy), generalized Gibbs states over a spatial cell
//! grid, the field-fitting inverse problem, entropy bookkeeping, closed
//! thermodynamic evolution driven by the kinetic generator, and the
//! memory-functional state reconstructed from a field history.

use num_complex::Complex64;

use crate::dynamics::{DensityMatrix, DEFAULT_PSD_TOL};
use crate::error::{Error, Result};
use crate::fock::{one_body_operator, two_body_from_fn, FockSpace};
use crate::kinetics::KineticGenerator;
use crate::linalg::{c, dagger, eigh, hermitize, max_abs, phase_function, trace, CMat, I};
use crate::modes::{ModeBasis, Potential};
use crate::{par, HBAR};

/// Eigenvalues below this cutoff are dropped from the entropy sum.
pub const ENTROPY_EIGENVALUE_CUTOFF: f64 = 1e-14;

/// Uniform partition of the 1D confinement interval into cells, with the
/// per-cell Gauss-Legendre order used to integrate the densities.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    pub length: f64,
    pub cells: usize,
    pub quadrature_order: usize,
}

impl SpatialGrid {
    pub fn new(length: f64, cells: usize, quadrature_order: usize) -> Result<Self> {
        if !(length > 0.0) || cells == 0 || quadrature_order < 2 {
            return Err(Error::InvalidInput(
                "grid needs positive length, at least one cell and order >= 2".into(),
            ));
        }
        Ok(Self {
            length,
            cells,
            quadrature_order,
        })
    }

    pub fn bounds(&self, cell: usize) -> (f64, f64) {
        let h = self.length / self.cells as f64;
        (cell as f64 * h, (cell + 1) as f64 * h)
    }

    fn cell_of(&self, x: f64) -> usize {
        let h = self.length / self.cells as f64;
        ((x / h).floor() as isize).clamp(0, self.cells as isize - 1) as usize
    }
}

/// Piecewise-constant thermodynamic fields over the grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermoState {
    /// Inverse temperature per cell, strictly positive.
    pub beta: Vec<f64>,
    /// Chemical potential per unit mass, per cell.
    pub mu: Vec<f64>,
    /// Velocity field per cell.
    pub velocity: Vec<f64>,
}

impl ThermoState {
    pub fn new(beta: Vec<f64>, mu: Vec<f64>, velocity: Vec<f64>) -> Result<Self> {
        if beta.len() != mu.len() || beta.len() != velocity.len() || beta.is_empty() {
            return Err(Error::InvalidInput("field vectors must share a nonzero length".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&beta) || !finite(&mu) || !finite(&velocity) {
            return Err(Error::InvalidInput("fields must be finite".into()));
        }
        if beta.iter().any(|&b| b <= 0.0) {
            return Err(Error::InvalidInput("inverse temperature must be positive".into()));
        }
        Ok(Self { beta, mu, velocity })
    }

    pub fn uniform(cells: usize, beta: f64, mu: f64) -> Result<Self> {
        Self::new(vec![beta; cells], vec![mu; cells], vec![0.0; cells])
    }

    pub fn cells(&self) -> usize {
        self.beta.len()
    }
}

/// Cell-integrated density operators on the truncated Fock space, stored in
/// the lab frame; rest-frame forms are produced by the shifted-derivative
/// combinations below. The mass-density Gram family is closed so the cell
/// sum reproduces the total mass operator exactly.
pub struct DensityOperatorSet {
    pub mass: f64,
    pub grid: SpatialGrid,
    /// Velocity field the set was built with (used by `e0`/`p0`).
    pub velocity: Vec<f64>,
    /// ρ̂_m(c) as dense Fock matrices.
    pub rho: Vec<CMat>,
    /// Lab-frame momentum density integrals.
    pub mom: Vec<CMat>,
    /// Lab-frame energy density integrals (kinetic + potential part).
    pub ener: Vec<CMat>,
    /// One-body coefficient matrices of the same families (modes x modes).
    pub rho_coeff: Vec<CMat>,
    pub mom_coeff: Vec<CMat>,
    pub ekin_coeff: Vec<CMat>,
    /// Whether the energy family carries a two-body potential part.
    pub has_potential: bool,
    dim: usize,
}

impl DensityOperatorSet {
    pub fn cells(&self) -> usize {
        self.rho.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> usize {
        self.rho_coeff[0].nrows()
    }

    /// Rest-frame momentum density at an explicit velocity.
    pub fn p0_at(&self, cell: usize, v: f64) -> CMat {
        &self.mom[cell] - &self.rho[cell] * c(v)
    }

    /// Rest-frame energy density at an explicit velocity.
    pub fn e0_at(&self, cell: usize, v: f64) -> CMat {
        &self.ener[cell] - &self.mom[cell] * c(v) + &self.rho[cell] * c(0.5 * v * v)
    }

    pub fn p0(&self, cell: usize) -> CMat {
        self.p0_at(cell, self.velocity[cell])
    }

    pub fn e0(&self, cell: usize) -> CMat {
        self.e0_at(cell, self.velocity[cell])
    }
}

fn cell_rules(grid: &SpatialGrid) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (x, w) = crate::linalg::gauss_legendre(grid.quadrature_order);
    (0..grid.cells)
        .map(|cl| {
            let (a, b) = grid.bounds(cl);
            crate::linalg::scale_rule(&x, &w, a, b)
        })
        .collect()
}

/// Per-cell two-body coefficient tensors: the pair-separation integral is
/// rewritten over the two particle coordinates and every composite-rule node
/// pair is assigned to the cell containing its midpoint, so the cell sum
/// telescopes to the full-domain quadrature exactly.
fn cell_potential_tensors(
    basis: &ModeBasis,
    grid: &SpatialGrid,
    potential: &Potential,
    rules: &[(Vec<f64>, Vec<f64>)],
) -> Vec<Vec<Complex64>> {
    let m = basis.len();
    let xs: Vec<f64> = rules.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let ws: Vec<f64> = rules.iter().flat_map(|(_, w)| w.iter().copied()).collect();
    let np = xs.len();
    let uv: Vec<Vec<f64>> = (0..m)
        .map(|f| xs.iter().map(|&x| basis.eval(f, &[x])).collect())
        .collect();

    if matches!(potential, Potential::Contact { width, .. } if width.unwrap_or(0.0) == 0.0) {
        let g = match potential {
            Potential::Contact { strength, .. } => *strength,
            _ => unreachable!(),
        };
        let mut out = vec![vec![Complex64::ZERO; m * m * m * m]; grid.cells];
        for a in 0..np {
            let cl = grid.cell_of(xs[a]);
            for l1 in 0..m {
                for l2 in 0..m {
                    for f2 in 0..m {
                        for f1 in 0..m {
                            out[cl][((l1 * m + l2) * m + f2) * m + f1] +=
                                c(g * ws[a] * uv[l1][a] * uv[l2][a] * uv[f2][a] * uv[f1][a]);
                        }
                    }
                }
            }
        }
        return out;
    }

    // Factorize through P[(l,f), a] = u_l(x_a) u_f(x_a) and the per-cell
    // masked kernel K_c[a, b] = w_a w_b V(|x_a - x_b|).
    let p: Vec<Vec<f64>> = (0..m * m)
        .map(|lf| {
            let (l, f) = (lf / m, lf % m);
            (0..np).map(|a| uv[l][a] * uv[f][a]).collect()
        })
        .collect();
    (0..grid.cells)
        .map(|cl| {
            let kernel: Vec<Vec<f64>> = par::map_indexed(np, |a| {
                (0..np)
                    .map(|b| {
                        if grid.cell_of(0.5 * (xs[a] + xs[b])) == cl {
                            ws[a] * ws[b] * potential.eval((xs[a] - xs[b]).abs())
                        } else {
                            0.0
                        }
                    })
                    .collect()
            });
            let q: Vec<Vec<f64>> = par::map_indexed(m * m, |lf| {
                (0..np)
                    .map(|b| (0..np).map(|a| p[lf][a] * kernel[a][b]).sum())
                    .collect()
            });
            let mut tensor = vec![Complex64::ZERO; m * m * m * m];
            for l1 in 0..m {
                for f1 in 0..m {
                    for l2 in 0..m {
                        for f2 in 0..m {
                            let s: f64 =
                                (0..np).map(|b| q[l1 * m + f1][b] * p[l2 * m + f2][b]).sum();
                            tensor[((l1 * m + l2) * m + f2) * m + f1] = c(s);
                        }
                    }
                }
            }
            tensor
        })
        .collect()
}

/// Assembles the cell-integrated mass, momentum and energy densities by
/// per-cell quadrature. The mass-density family is closed against the exact
/// mode Gram matrix so that the cell sum equals the total mass operator.
pub fn build_density_operators(
    space: &FockSpace,
    basis: &ModeBasis,
    grid: &SpatialGrid,
    velocity: &[f64],
    potential: &Potential,
) -> Result<DensityOperatorSet> {
    if basis.dimension != 1 {
        return Err(Error::InvalidInput("density operators are assembled in 1D".into()));
    }
    if space.modes != basis.len() {
        return Err(Error::InvalidInput("Fock space and mode basis disagree".into()));
    }
    if velocity.len() != grid.cells {
        return Err(Error::InvalidInput("velocity field must have one entry per cell".into()));
    }
    if (grid.length - basis.lengths[0]).abs() > 1e-12 * basis.lengths[0] {
        return Err(Error::InvalidInput("grid must partition the confinement box".into()));
    }
    let m = basis.len();
    let mass = basis.mass;
    let rules = cell_rules(grid);

    let mut gram: Vec<CMat> = Vec::with_capacity(grid.cells);
    let mut mom_coeff: Vec<CMat> = Vec::with_capacity(grid.cells);
    let mut ekin_coeff: Vec<CMat> = Vec::with_capacity(grid.cells);
    for (x, w) in &rules {
        let uv: Vec<Vec<f64>> = (0..m)
            .map(|f| x.iter().map(|&xi| basis.eval(f, &[xi])).collect())
            .collect();
        let ud: Vec<Vec<f64>> = (0..m)
            .map(|f| x.iter().map(|&xi| basis.eval_grad(f, &[xi])[0]).collect())
            .collect();
        let mut g = CMat::zeros(m, m);
        let mut p = CMat::zeros(m, m);
        let mut k = CMat::zeros(m, m);
        for h in 0..m {
            for l in 0..m {
                let mut sg = 0.0;
                let mut sp = 0.0;
                let mut sk = 0.0;
                for (a, &wa) in w.iter().enumerate() {
                    sg += wa * uv[h][a] * uv[l][a];
                    sp += wa * (uv[h][a] * ud[l][a] - ud[h][a] * uv[l][a]);
                    sk += wa * ud[h][a] * ud[l][a];
                }
                g[(h, l)] = c(sg);
                p[(h, l)] = Complex64::new(0.0, -0.5 * HBAR * sp);
                k[(h, l)] = c(sk * HBAR * HBAR / (2.0 * mass));
            }
        }
        gram.push(g);
        mom_coeff.push(p);
        ekin_coeff.push(k);
    }
    // Gram closure: the last cell absorbs the quadrature defect so the cell
    // sum of the mass density is the exact identity in mode space.
    let mut defect = CMat::identity(m, m);
    for g in gram.iter().take(grid.cells - 1) {
        defect -= g;
    }
    gram[grid.cells - 1] = defect;

    let rho_coeff: Vec<CMat> = gram.iter().map(|g| g * c(mass)).collect();
    let has_potential = *potential != Potential::Zero;
    let tensors = if has_potential {
        Some(cell_potential_tensors(basis, grid, potential, &rules))
    } else {
        None
    };

    let dim = space.dim();
    let mut rho = Vec::with_capacity(grid.cells);
    let mut mom = Vec::with_capacity(grid.cells);
    let mut ener = Vec::with_capacity(grid.cells);
    for cl in 0..grid.cells {
        rho.push(one_body_operator(space, &rho_coeff[cl]).to_dense());
        mom.push(one_body_operator(space, &mom_coeff[cl]).to_dense());
        let mut e = one_body_operator(space, &ekin_coeff[cl]);
        if let Some(tensors) = &tensors {
            let t = &tensors[cl];
            e = e.add(&two_body_from_fn(space, |l1, l2, f2, f1| {
                t[((l1 * m + l2) * m + f2) * m + f1]
            }));
        }
        ener.push(e.to_dense());
    }

    Ok(DensityOperatorSet {
        mass,
        grid: grid.clone(),
        velocity: velocity.to_vec(),
        rho,
        mom,
        ener,
        rho_coeff,
        mom_coeff,
        ekin_coeff,
        has_potential,
        dim,
    })
}

/// Lagrange multipliers of the lab-frame constraint operators, per cell:
/// (λ_e, λ_p, λ_ρ) = (β, −βv, β(v²/2 − μ)). The exponent is linear in these.
fn multipliers(state: &ThermoState) -> Vec<f64> {
    let mut lam = Vec::with_capacity(3 * state.cells());
    for cl in 0..state.cells() {
        let (b, mu, v) = (state.beta[cl], state.mu[cl], state.velocity[cl]);
        lam.push(b);
        lam.push(-b * v);
        lam.push(b * (0.5 * v * v - mu));
    }
    lam
}

fn state_from_multipliers(lam: &[f64]) -> Result<ThermoState> {
    let cells = lam.len() / 3;
    let mut beta = Vec::with_capacity(cells);
    let mut mu = Vec::with_capacity(cells);
    let mut velocity = Vec::with_capacity(cells);
    for cl in 0..cells {
        let b = lam[3 * cl];
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::FitDiverged(format!(
                "inverse temperature left the positive cone: beta[{cl}] = {b:e}"
            )));
        }
        let v = -lam[3 * cl + 1] / b;
        beta.push(b);
        velocity.push(v);
        mu.push(0.5 * v * v - lam[3 * cl + 2] / b);
    }
    ThermoState::new(beta, mu, velocity)
}

fn exponent_from_multipliers(ops: &DensityOperatorSet, lam: &[f64]) -> CMat {
    let mut k = CMat::zeros(ops.dim, ops.dim);
    for cl in 0..ops.cells() {
        k += &ops.ener[cl] * c(lam[3 * cl]);
        k += &ops.mom[cl] * c(lam[3 * cl + 1]);
        k += &ops.rho[cl] * c(lam[3 * cl + 2]);
    }
    k
}

/// Spectral weights of exp(−K)/Z: shifted eigenvalues, probabilities,
/// the eigenvector frame, and the log-partition function ln Z.
fn gibbs_weights(k: &CMat) -> Result<(Vec<f64>, Vec<f64>, CMat, f64)> {
    let (vals, vecs) = eigh(&hermitize(k));
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("exponent has non-finite spectrum".into()));
    }
    let kmin = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let probs: Vec<f64> = vals.iter().map(|&v| (-(v - kmin)).exp()).collect();
    let z: f64 = probs.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::PartitionUnderflow);
    }
    let shifted: Vec<f64> = vals.iter().map(|&v| v - kmin).collect();
    Ok((shifted, probs.iter().map(|p| p / z).collect(), vecs, z.ln() - kmin))
}

fn state_from_weights(probs: &[f64], vecs: &CMat) -> Result<DensityMatrix> {
    let n = probs.len();
    let mut d = CMat::zeros(n, n);
    for (a, &p) in probs.iter().enumerate() {
        d[(a, a)] = c(p);
    }
    DensityMatrix::new(vecs * d * dagger(vecs), DEFAULT_PSD_TOL)
}

/// Generalized Gibbs state w = exp(−Σ_c β_c [ê^(0)(c) − μ_c ρ̂_m(c)])/Z via
/// hermitian eigendecomposition with spectral shifting.
pub fn gibbs_state(state: &ThermoState, ops: &DensityOperatorSet) -> Result<DensityMatrix> {
    if state.cells() != ops.cells() {
        return Err(Error::InvalidInput("state and operator set cell counts differ".into()));
    }
    let k = exponent_from_multipliers(ops, &multipliers(state));
    let (_, probs, vecs, _) = gibbs_weights(&k)?;
    state_from_weights(&probs, &vecs)
}

/// Lab-frame expectation values of the density families per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTargets {
    pub ener: Vec<f64>,
    pub mom: Vec<f64>,
    pub rho: Vec<f64>,
}

pub fn expectations(ops: &DensityOperatorSet, w: &CMat) -> CellTargets {
    let ev = |a: &CMat| trace(&(a * w)).re;
    CellTargets {
        ener: ops.ener.iter().map(ev).collect(),
        mom: ops.mom.iter().map(ev).collect(),
        rho: ops.rho.iter().map(ev).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Freeze the mass-density multipliers at their initial values and drop
    /// the mass-density constraints. This pins μ itself exactly when the
    /// initial μ is zero (the multiplier is β(v²/2 − μ)); otherwise β
    /// updates reshuffle the frozen multiplier into a drifting μ.
    pub fix_mu: bool,
    /// Freeze the momentum multipliers at their initial values and drop the
    /// momentum constraints; exact velocity pinning when the initial
    /// velocity is zero.
    pub fix_velocity: bool,
    pub max_iter: usize,
    /// Convergence threshold on max |mismatch| / (1 + max |target|).
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            fix_mu: false,
            fix_velocity: false,
            max_iter: 80,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub residual: f64,
}

/// Kubo covariance weight: the exact derivative kernel of ⟨A⟩ with respect
/// to the multipliers, expressed through the shifted exponent spectrum.
fn kubo_weight(pa: f64, pb: f64, ka: f64, kb: f64) -> f64 {
    let d = kb - ka;
    if d.abs() < 1e-7 {
        0.5 * (pa + pb)
    } else {
        (pa - pb) / d
    }
}

struct FitEval {
    shifted: Vec<f64>,
    probs: Vec<f64>,
    vecs: CMat,
    residual: Vec<f64>,
    norm: f64,
    merit: f64,
}

/// Inverts the max-entropy problem: finds the fields whose Gibbs state
/// reproduces the given lab-frame expectation values, by damped Newton on
/// the multipliers with the operator covariance as the exact Hessian.
pub fn fit_fields(targets: &CellTargets, ops: &DensityOperatorSet) -> Result<ThermoState> {
    let init = ThermoState::uniform(ops.cells(), 1.0, 0.0)?;
    fit_fields_with(targets, ops, &init, &FitOptions::default()).map(|(s, _)| s)
}

pub fn fit_fields_with(
    targets: &CellTargets,
    ops: &DensityOperatorSet,
    init: &ThermoState,
    opts: &FitOptions,
) -> Result<(ThermoState, FitDiagnostics)> {
    let cells = ops.cells();
    if targets.ener.len() != cells || init.cells() != cells {
        return Err(Error::InvalidInput("targets/init cell count mismatch".into()));
    }
    let mut flat_ops: Vec<&CMat> = Vec::with_capacity(3 * cells);
    let mut flat_targets = Vec::with_capacity(3 * cells);
    for cl in 0..cells {
        flat_ops.extend([&ops.ener[cl], &ops.mom[cl], &ops.rho[cl]]);
        flat_targets.extend([targets.ener[cl], targets.mom[cl], targets.rho[cl]]);
    }
    let mut active: Vec<usize> = Vec::new();
    for cl in 0..cells {
        active.push(3 * cl);
        if !opts.fix_velocity {
            active.push(3 * cl + 1);
        }
        if !opts.fix_mu {
            active.push(3 * cl + 2);
        }
    }
    let na = active.len();
    let scale = 1.0
        + active
            .iter()
            .map(|&i| flat_targets[i].abs())
            .fold(0.0, f64::max);

    let eval = |lam: &[f64]| -> Result<FitEval> {
        let (shifted, probs, vecs, log_z) = gibbs_weights(&exponent_from_multipliers(ops, lam))?;
        let residual: Vec<f64> = active
            .iter()
            .map(|&i| {
                let at = dagger(&vecs) * flat_ops[i] * &vecs;
                let mean: f64 = probs.iter().enumerate().map(|(a, &p)| p * at[(a, a)].re).sum();
                mean - flat_targets[i]
            })
            .collect();
        let norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
        // Convex merit: ln Z + λ·t is minimized exactly where the
        // expectation values match the targets.
        let merit = log_z
            + active
                .iter()
                .map(|&i| lam[i] * flat_targets[i])
                .sum::<f64>();
        Ok(FitEval {
            shifted,
            probs,
            vecs,
            residual,
            norm,
            merit,
        })
    };

    let mut lam = multipliers(init);
    let mut cur = eval(&lam)?;
    let mut levenberg = 0.0f64;
    for iter in 0..opts.max_iter {
        let resid = cur.residual.iter().fold(0.0f64, |m, r| m.max(r.abs())) / scale;
        if resid < opts.tolerance {
            return Ok((
                state_from_multipliers(&lam)?,
                FitDiagnostics {
                    iterations: iter,
                    residual: resid,
                },
            ));
        }
        if lam.iter().map(|l| l * l).sum::<f64>().sqrt() > 1e8 {
            return Err(Error::FitDiverged(
                "multiplier norm blew up; targets are likely infeasible".into(),
            ));
        }

        // Exact Hessian: Kubo covariance of the active constraint operators.
        let transformed: Vec<CMat> = par::map_indexed(na, |j| {
            dagger(&cur.vecs) * flat_ops[active[j]] * &cur.vecs
        });
        let n = cur.probs.len();
        let means: Vec<f64> = transformed
            .iter()
            .map(|at| cur.probs.iter().enumerate().map(|(a, &p)| p * at[(a, a)].re).sum())
            .collect();
        let mut cov = nalgebra::DMatrix::<f64>::zeros(na, na);
        for a in 0..n {
            for b in 0..n {
                let wgt = kubo_weight(cur.probs[a], cur.probs[b], cur.shifted[a], cur.shifted[b]);
                if wgt == 0.0 {
                    continue;
                }
                for i in 0..na {
                    for j in i..na {
                        cov[(i, j)] += wgt * (transformed[i][(a, b)] * transformed[j][(b, a)]).re;
                    }
                }
            }
        }
        for i in 0..na {
            for j in i..na {
                cov[(i, j)] -= means[i] * means[j];
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let rhs = nalgebra::DVector::from_iterator(na, cur.residual.iter().copied());
        let diag_floor = 1e-12
            + (0..na)
                .map(|i| cov[(i, i)].abs())
                .fold(0.0, f64::max)
                * 1e-12;

        // Levenberg-regularized Newton step with an Armijo search on the
        // convex merit; the regularization ladder rescues nearly singular
        // covariances far from the solution.
        let mut accepted = false;
        let mut nu = levenberg;
        'ladder: for _ in 0..12 {
            let mut reg = cov.clone();
            for i in 0..na {
                reg[(i, i)] += nu * cov[(i, i)].abs().max(diag_floor);
            }
            let delta = match reg.clone().lu().solve(&rhs) {
                Some(d) => d,
                None => {
                    nu = (nu * 100.0).max(1e-8);
                    continue;
                }
            };
            // Directional derivative of the merit along δ is −r·δ; it must
            // be a descent direction, otherwise regularize harder.
            let slope: f64 = cur.residual.iter().zip(delta.iter()).map(|(r, d)| r * d).sum();
            if !(slope > 0.0) {
                nu = (nu * 100.0).max(1e-8);
                continue;
            }
            let mut alpha = 1.0;
            for _ in 0..30 {
                let mut cand = lam.clone();
                for (j, &i) in active.iter().enumerate() {
                    cand[i] += alpha * delta[j];
                }
                if (0..cells).any(|cl| cand[3 * cl] <= 0.0) {
                    alpha *= 0.5;
                    continue;
                }
                match eval(&cand) {
                    Ok(next)
                        if next.merit <= cur.merit - 1e-4 * alpha * slope
                            || next.norm < opts.tolerance * scale =>
                    {
                        lam = cand;
                        cur = next;
                        accepted = true;
                        levenberg = nu * 0.1;
                        break 'ladder;
                    }
                    Ok(_) | Err(Error::PartitionUnderflow) => alpha *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            nu = (nu * 100.0).max(1e-8);
        }
        if !accepted {
            return Err(Error::FitDiverged(format!(
                "line search stalled at residual {:.3e}",
                cur.norm / scale
            )));
        }
    }
    Err(Error::FitDiverged(format!(
        "no convergence in {} iterations, residual {:.3e}",
        opts.max_iter,
        cur.residual.iter().fold(0.0f64, |m, r| m.max(r.abs())) / scale
    )))
}

/// Von Neumann entropy −k Σ λ log λ over eigenvalues above the cutoff.
pub fn entropy_with(rho: &CMat, k: f64) -> f64 {
    let (vals, _) = eigh(&hermitize(rho));
    -k * vals
        .iter()
        .filter(|&&l| l >= ENTROPY_EIGENVALUE_CUTOFF)
        .map(|&l| l * l.ln())
        .sum::<f64>()
}

pub fn entropy(rho: &CMat) -> f64 {
    entropy_with(rho, 1.0)
}

#[derive(Debug, Clone)]
pub struct ThermoStep {
    pub time: f64,
    pub state: ThermoState,
    pub targets: CellTargets,
    pub entropy: f64,
    /// Max |d⟨Â⟩/dt| over the mass/energy families when the generator is
    /// replaced by the plain Hamiltonian commutator: the reversible dynamics
    /// produces no dissipative flux at the Gibbs state.
    pub hamiltonian_flux_max: f64,
}

#[derive(Debug)]
pub struct ThermoEvolution {
    pub steps: Vec<ThermoStep>,
    /// Set when a field re-fit failed; the series ends at the last valid state.
    pub aborted: Option<String>,
}

/// Closed evolution of the thermodynamic fields: at each step the relevant
/// expectations are advanced by d⟨Â⟩/dt = Tr((L′Â) w[fields]) and the fields
/// are re-fitted. The density operators must be interaction-free: the
/// collision physics lives entirely in the kinetic generator, while the
/// relevant observables stay quadratic.
pub fn evolve_thermo(
    state0: &ThermoState,
    ops: &DensityOperatorSet,
    kin: &KineticGenerator,
    t_grid: &[f64],
) -> Result<ThermoEvolution> {
    evolve_thermo_with(state0, ops, kin, t_grid, &FitOptions::default())
}

pub fn evolve_thermo_with(
    state0: &ThermoState,
    ops: &DensityOperatorSet,
    kin: &KineticGenerator,
    t_grid: &[f64],
    opts: &FitOptions,
) -> Result<ThermoEvolution> {
    if ops.has_potential {
        return Err(Error::InvalidInput(
            "thermodynamic evolution expects interaction-free density operators".into(),
        ));
    }
    if kin.dim() != ops.dim() || kin.space.modes != ops.modes() {
        return Err(Error::InvalidInput("generator and operator set dimensions differ".into()));
    }
    if t_grid.is_empty() {
        return Err(Error::InvalidInput("empty time grid".into()));
    }
    let modes = ops.modes();
    // L′ on every monomial the cell coefficients touch; the secular cut
    // applies uniformly because the coefficient matrices are dense.
    let mut l_mono: Vec<CMat> = Vec::with_capacity(modes * modes);
    for h in 0..modes {
        for k in 0..modes {
            l_mono.push(kin.apply(h, k)?);
        }
    }
    // Time-reversal-even part of the effective Hamiltonian: in a real mode
    // basis time reversal is complex conjugation, so the even part is the
    // entrywise real part. The odd remainder is a finite-window artifact of
    // the complex-energy scattering kernel and belongs with the collisions.
    let h_rev = CMat::from_fn(kin.dim(), kin.dim(), |i, j| {
        c(kin.effective_hamiltonian()[(i, j)].re)
    });
    let h_eff = &h_rev;

    let mut state = state0.clone();
    let mut steps: Vec<ThermoStep> = Vec::with_capacity(t_grid.len());
    let mut aborted = None;
    for (j, &t) in t_grid.iter().enumerate() {
        let w = gibbs_state(&state, ops)?;
        let targets = expectations(ops, &w.mat);
        let s = entropy(&w.mat);
        let flux = (0..ops.cells())
            .flat_map(|cl| [&ops.ener[cl], &ops.rho[cl]])
            .map(|a| (trace(&((h_eff * a - a * h_eff) * &w.mat)) * I / HBAR).re.abs())
            .fold(0.0, f64::max);
        steps.push(ThermoStep {
            time: t,
            state: state.clone(),
            targets: targets.clone(),
            entropy: s,
            hamiltonian_flux_max: flux,
        });
        if j + 1 == t_grid.len() {
            break;
        }
        let dt = t_grid[j + 1] - t;
        if !(dt > 0.0) {
            return Err(Error::InvalidInput("time grid must be strictly increasing".into()));
        }

        let tr_l: Vec<Complex64> = l_mono.iter().map(|l| trace(&(l * &w.mat))).collect();
        let rate = |coeff: &CMat| -> f64 {
            let mut r = Complex64::ZERO;
            for h in 0..modes {
                for k in 0..modes {
                    r += coeff[(h, k)] * tr_l[h * modes + k];
                }
            }
            r.re
        };
        let mut next = targets.clone();
        for cl in 0..ops.cells() {
            next.ener[cl] += dt * rate(&ops.ekin_coeff[cl]);
            next.rho[cl] += dt * rate(&ops.rho_coeff[cl]);
            if !opts.fix_velocity {
                next.mom[cl] += dt * rate(&ops.mom_coeff[cl]);
            }
        }
        match fit_fields_with(&next, ops, &state, opts) {
            Ok((fitted, _)) => state = fitted,
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        }
    }
    Ok(ThermoEvolution { steps, aborted })
}

/// Sampled field history on [T, t0], uniformly spaced.
#[derive(Debug, Clone)]
pub struct MemoryHistory {
    pub times: Vec<f64>,
    pub states: Vec<ThermoState>,
}

impl MemoryHistory {
    pub fn new(times: Vec<f64>, states: Vec<ThermoState>) -> Result<Self> {
        if times.len() != states.len() || times.len() < 2 {
            return Err(Error::InvalidInput("history needs at least two samples".into()));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) {
            return Err(Error::InvalidInput("history times must increase".into()));
        }
        for j in 1..times.len() {
            if ((times[j] - times[j - 1]) - dt).abs() > 1e-9 * dt {
                return Err(Error::InvalidInput("history has gaps or uneven sampling".into()));
            }
        }
        let cells = states[0].cells();
        if states.iter().any(|s| s.cells() != cells) {
            return Err(Error::InvalidInput("history states have inconsistent cells".into()));
        }
        Ok(Self { times, states })
    }

    pub fn step(&self) -> f64 {
        self.times[1] - self.times[0]
    }
}

pub struct MemoryReport {
    /// Exponent built from the fields at the initial time T with
    /// Heisenberg-evolved operators.
    pub direct: DensityMatrix,
    /// Exponent rebuilt from the fields at t plus the integrated history
    /// terms (field derivatives, discrete-gradient flux terms, boundary flux).
    pub split: DensityMatrix,
    /// Max-abs difference between the two forms.
    pub agreement: f64,
    /// Expectation of the boundary-flux operator in the direct state, one
    /// entry per history sample in [T, t]. Reported only; the bundled
    /// scenarios are isolated after preparation.
    pub boundary_flux: Vec<f64>,
}

/// Statistical operator carrying the memory of the field history: evaluates
/// the Heisenberg-evolved exponent directly, and independently through its
/// split into field-derivative and flux terms, checking the two agree.
pub fn memory_state(
    history: &MemoryHistory,
    ops: &DensityOperatorSet,
    h: &CMat,
    t: f64,
) -> Result<MemoryReport> {
    let cells = ops.cells();
    if history.states[0].cells() != cells {
        return Err(Error::InvalidInput("history and operator set cell counts differ".into()));
    }
    if h.nrows() != ops.dim() {
        return Err(Error::InvalidInput("Hamiltonian dimension mismatch".into()));
    }
    let dt = history.step();
    let jt = history
        .times
        .iter()
        .position(|&tj| (tj - t).abs() <= 1e-9 * dt.max(1.0))
        .ok_or_else(|| Error::InvalidInput("t must coincide with a history sample".into()))?;

    let (hv, hvecs) = eigh(&hermitize(h));
    // A(s) = e^{iHs/ħ} A e^{-iHs/ħ}
    let frame = |s: f64| phase_function(&hv, &hvecs, |l| (I * c(l * s / HBAR)).exp());
    let evolved = |a: &CMat, e: &CMat| e * a * dagger(e);

    // Field-weighted exponent operator at sample j, without evolution.
    let g_raw = |j: usize| -> CMat {
        let st = &history.states[j];
        let mut g = CMat::zeros(ops.dim(), ops.dim());
        for cl in 0..cells {
            g += ops.e0_at(cl, st.velocity[cl]) * c(st.beta[cl]);
            g -= &ops.rho[cl] * c(st.mu[cl] * st.beta[cl]);
        }
        g
    };

    let n = history.times.len();
    // Second-order field time derivative on the sample grid.
    let fdot = |f: &dyn Fn(usize) -> f64, j: usize| -> f64 {
        if j == 0 {
            (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * dt)
        } else if j + 1 == n {
            (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / (2.0 * dt)
        } else {
            (f(j + 1) - f(j - 1)) / (2.0 * dt)
        }
    };

    let delta = t - history.times[0];
    let dir_exponent = evolved(&g_raw(0), &frame(-delta));
    let (_, dir_probs, dir_vecs, _) = gibbs_weights(&dir_exponent)?;
    let w_dir = state_from_weights(&dir_probs, &dir_vecs)?;

    let comm = |a: &CMat| (h * a - a * h) * (I / HBAR);
    let d_rho: Vec<CMat> = (0..cells).map(|cl| comm(&ops.rho[cl])).collect();

    let mut integrands: Vec<CMat> = Vec::with_capacity(jt + 1);
    let mut boundary_flux = Vec::with_capacity(jt + 1);
    for j in 0..=jt {
        let st = &history.states[j];
        let e = frame(history.times[j] - t);

        let mut field_term = CMat::zeros(ops.dim(), ops.dim());
        for cl in 0..cells {
            let bdot = fdot(&|i| history.states[i].beta[cl], j);
            let mbdot = fdot(&|i| history.states[i].mu[cl] * history.states[i].beta[cl], j);
            let vdot = fdot(&|i| history.states[i].velocity[cl], j);
            field_term += ops.e0_at(cl, st.velocity[cl]) * c(bdot);
            field_term -= &ops.rho[cl] * c(mbdot);
            field_term -= ops.p0_at(cl, st.velocity[cl]) * c(st.beta[cl] * vdot);
        }

        // Abel summation of the commutator terms: running flux operators
        // across interior cell boundaries, plus the outer-boundary remainder.
        let d_e: Vec<CMat> = (0..cells)
            .map(|cl| comm(&ops.e0_at(cl, st.velocity[cl])))
            .collect();
        let mut s_e = CMat::zeros(ops.dim(), ops.dim());
        let mut s_r = CMat::zeros(ops.dim(), ops.dim());
        let mut grad_term = CMat::zeros(ops.dim(), ops.dim());
        for b in 0..cells - 1 {
            s_e += &d_e[b];
            s_r += &d_rho[b];
            let db = st.beta[b] - st.beta[b + 1];
            let dmb = st.mu[b] * st.beta[b] - st.mu[b + 1] * st.beta[b + 1];
            grad_term += &s_e * c(db) - &s_r * c(dmb);
        }
        s_e += &d_e[cells - 1];
        s_r += &d_rho[cells - 1];
        let last = cells - 1;
        let bound_raw = &s_e * c(st.beta[last]) - &s_r * c(st.mu[last] * st.beta[last]);

        boundary_flux.push(trace(&(evolved(&bound_raw, &e) * &w_dir.mat)).re);
        integrands.push(evolved(&(field_term + grad_term + bound_raw), &e));
    }

    // Composite Simpson over the history samples (trapezoid fallback when
    // the interval count is odd).
    let mut integral = CMat::zeros(ops.dim(), ops.dim());
    if jt >= 2 && jt % 2 == 0 {
        let mut j = 0;
        while j + 2 <= jt {
            integral += (&integrands[j] + &integrands[j + 1] * c(4.0) + &integrands[j + 2])
                * c(dt / 3.0);
            j += 2;
        }
    } else {
        for j in 0..jt {
            integral += (&integrands[j] + &integrands[j + 1]) * c(0.5 * dt);
        }
    }

    let split_exponent = g_raw(jt) - integral;
    let (_, sp_probs, sp_vecs, _) = gibbs_weights(&split_exponent)?;
    let w_split = state_from_weights(&sp_probs, &sp_vecs)?;
    let agreement = max_abs(&(&w_dir.mat - &w_split.mat));
    Ok(MemoryReport {
        direct: w_dir,
        split: w_split,
        agreement,
        boundary_flux,
    })
}

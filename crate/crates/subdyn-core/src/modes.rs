//! Single-particle mode basis of a hard-wall box and the two-body potential
//! tensor obtained from it by nested quadrature.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c};
use crate::par;

/// Default per-axis quadrature order.
pub const DEFAULT_QUADRATURE_ORDER: usize = 64;
/// Largest mode basis the builder will accept.
pub const MAX_BASIS_SIZE: usize = 4096;

/// Eigenmodes of the confining box: products of sine modes per axis, with
/// exact analytic energies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeBasis {
    pub dimension: usize,
    pub lengths: Vec<f64>,
    pub cutoff: usize,
    pub mass: f64,
    /// Per-axis quantum numbers of each mode, in the deterministic ordering.
    pub indices: Vec<Vec<usize>>,
    pub energies: Vec<f64>,
    pub quadrature_order: usize,
}

impl ModeBasis {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Mode function u_f evaluated at a point (len = dimension).
    pub fn eval(&self, f: usize, x: &[f64]) -> f64 {
        let mut v = 1.0;
        for (axis, &k) in self.indices[f].iter().enumerate() {
            let l = self.lengths[axis];
            v *= (2.0 / l).sqrt() * (std::f64::consts::PI * k as f64 * x[axis] / l).sin();
        }
        v
    }

    /// Gradient of u_f at a point.
    pub fn eval_grad(&self, f: usize, x: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.dimension];
        for d in 0..self.dimension {
            let mut v = 1.0;
            for (axis, &k) in self.indices[f].iter().enumerate() {
                let l = self.lengths[axis];
                let arg = std::f64::consts::PI * k as f64 * x[axis] / l;
                let fac = (2.0 / l).sqrt();
                if axis == d {
                    v *= fac * (std::f64::consts::PI * k as f64 / l) * arg.cos();
                } else {
                    v *= fac * arg.sin();
                }
            }
            grad[d] = v;
        }
        grad
    }

    /// Per-axis Gauss-Legendre rule over [0, L_axis] at the configured order.
    pub fn axis_rule(&self, axis: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
        let (x, w) = linalg::gauss_legendre(order);
        linalg::scale_rule(&x, &w, 0.0, self.lengths[axis])
    }

    /// Numerical mode overlaps; orthonormality diagnostic.
    pub fn overlap_residual(&self) -> f64 {
        let m = self.len();
        let pts = self.grid_points(self.quadrature_order);
        let mut res: f64 = 0.0;
        for f in 0..m {
            for g in f..m {
                let s: f64 = pts
                    .iter()
                    .map(|(x, w)| w * self.eval(f, x) * self.eval(g, x))
                    .sum();
                let target = if f == g { 1.0 } else { 0.0 };
                res = res.max((s - target).abs());
            }
        }
        res
    }

    /// Full tensor-product quadrature grid over the box.
    pub fn grid_points(&self, order: usize) -> Vec<(Vec<f64>, f64)> {
        let mut pts: Vec<(Vec<f64>, f64)> = vec![(vec![], 1.0)];
        for axis in 0..self.dimension {
            let (x, w) = self.axis_rule(axis, order);
            let mut next = Vec::with_capacity(pts.len() * order);
            for (p, pw) in &pts {
                for (xi, wi) in x.iter().zip(&w) {
                    let mut q = p.clone();
                    q.push(*xi);
                    next.push((q, pw * wi));
                }
            }
            pts = next;
        }
        pts
    }
}

/// Shape of the two-body potential V(|x - y|).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// g * delta(x - y). Beyond 1D this is regularized as a narrow Gaussian
    /// of the given width.
    Contact { strength: f64, width: Option<f64> },
    /// g * exp(-r^2 / (2 range^2))
    Gaussian { strength: f64, range: f64 },
}

impl Potential {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Contact { strength, width } => {
                let w = width.unwrap_or(0.0);
                if w == 0.0 {
                    // handled separately by the contact fast path
                    if r == 0.0 {
                        *strength
                    } else {
                        0.0
                    }
                } else {
                    let norm = 1.0 / (w * (2.0 * std::f64::consts::PI).sqrt());
                    strength * norm * (-0.5 * (r / w) * (r / w)).exp()
                }
            }
            Potential::Gaussian { strength, range } => {
                strength * (-0.5 * (r / range) * (r / range)).exp()
            }
        }
    }

    fn is_bare_contact(&self) -> bool {
        matches!(self, Potential::Contact { width: None, .. })
            || matches!(self, Potential::Contact { width: Some(w), .. } if *w == 0.0)
    }
}

/// V_{l1 l2 f2 f1}, the mode-space matrix elements of the two-body potential.
#[derive(Debug, Clone)]
pub struct PotentialTensor {
    pub modes: usize,
    pub potential: Potential,
    /// Row-major over (l1, l2, f2, f1).
    pub coefficients: Vec<Complex64>,
}

impl PotentialTensor {
    pub fn get(&self, l1: usize, l2: usize, f2: usize, f1: usize) -> Complex64 {
        let m = self.modes;
        self.coefficients[((l1 * m + l2) * m + f2) * m + f1]
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|z| z.norm() == 0.0)
    }

    /// Max violation of exchange symmetry and hermiticity.
    pub fn symmetry_residual(&self) -> f64 {
        let m = self.modes;
        let mut res: f64 = 0.0;
        for l1 in 0..m {
            for l2 in 0..m {
                for f2 in 0..m {
                    for f1 in 0..m {
                        let v = self.get(l1, l2, f2, f1);
                        res = res.max((v - self.get(l2, l1, f1, f2)).norm());
                        res = res.max((v - self.get(f1, f2, l2, l1).conj()).norm());
                    }
                }
            }
        }
        res
    }
}

/// Builds the box eigenbasis with deterministic mode ordering: lexicographic
/// enumeration of axis indices, stably sorted by energy.
pub fn build_box_basis(
    dimension: usize,
    lengths: &[f64],
    cutoff: usize,
    mass: f64,
) -> Result<ModeBasis> {
    if !(1..=3).contains(&dimension) {
        return Err(Error::InvalidInput(format!(
            "dimension must be 1, 2 or 3, got {dimension}"
        )));
    }
    if lengths.len() != dimension || lengths.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidInput("lengths must be positive, one per axis".into()));
    }
    if cutoff < 1 {
        return Err(Error::InvalidInput("cutoff must be >= 1".into()));
    }
    if mass <= 0.0 {
        return Err(Error::InvalidInput("mass must be positive".into()));
    }
    let total = cutoff.pow(dimension as u32);
    if total > MAX_BASIS_SIZE {
        return Err(Error::DimensionCap {
            dim: total,
            cap: MAX_BASIS_SIZE,
        });
    }

    let mut indices: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..dimension {
        let mut next = Vec::new();
        for idx in &indices {
            for k in 1..=cutoff {
                let mut j = idx.clone();
                j.push(k);
                next.push(j);
            }
        }
        indices = next;
    }
    let energy_of = |idx: &[usize]| -> f64 {
        idx.iter()
            .zip(lengths)
            .map(|(&k, &l)| {
                let kl = std::f64::consts::PI * k as f64 / l;
                kl * kl / (2.0 * mass)
            })
            .sum()
    };
    indices.sort_by(|a, b| {
        energy_of(a)
            .partial_cmp(&energy_of(b))
            .unwrap()
            .then(a.cmp(b))
    });
    let energies = indices.iter().map(|i| energy_of(i)).collect();

    Ok(ModeBasis {
        dimension,
        lengths: lengths.to_vec(),
        cutoff,
        mass,
        indices,
        energies,
        quadrature_order: DEFAULT_QUADRATURE_ORDER,
    })
}

/// Assembles V_{l1 l2 f2 f1} by nested quadrature, with an automatic
/// order-doubling convergence check.
pub fn potential_tensor(basis: &ModeBasis, potential: &Potential) -> Result<PotentialTensor> {
    let coarse = tensor_at_order(basis, potential, basis.quadrature_order);
    let fine = tensor_at_order(basis, potential, 2 * basis.quadrature_order);
    let change = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    if change > 1e-7 {
        return Err(Error::QuadratureNonConvergence {
            change,
            tol: 1e-7,
        });
    }
    Ok(PotentialTensor {
        modes: basis.len(),
        potential: potential.clone(),
        coefficients: fine,
    })
}

/// Same quadrature at explicit order, without the convergence gate. Used by
/// the refined-quadrature oracle in tests.
pub fn tensor_at_order(basis: &ModeBasis, potential: &Potential, order: usize) -> Vec<Complex64> {
    let m = basis.len();
    if *potential == Potential::Zero {
        return vec![Complex64::ZERO; m * m * m * m];
    }
    if potential.is_bare_contact() && basis.dimension == 1 {
        let g = match potential {
            Potential::Contact { strength, .. } => *strength,
            _ => unreachable!(),
        };
        // single integral: g * int u_l1 u_l2 u_f2 u_f1
        let (x, w) = basis.axis_rule(0, order);
        let vals: Vec<Vec<f64>> = (0..m)
            .map(|f| x.iter().map(|&xi| basis.eval(f, &[xi])).collect())
            .collect();
        return par::map_indexed(m * m * m * m, |lin| {
            let f1 = lin % m;
            let f2 = (lin / m) % m;
            let l2 = (lin / (m * m)) % m;
            let l1 = lin / (m * m * m);
            let s: f64 = (0..x.len())
                .map(|a| w[a] * vals[l1][a] * vals[l2][a] * vals[f2][a] * vals[f1][a])
                .sum();
            c(g * s)
        });
    }

    // Generic double quadrature. Factorize through P[(l,f), a] = u_l(x_a) u_f(x_a)
    // and the symmetric kernel K[a, b] = w_a w_b V(|x_a - x_b|).
    let pts = basis.grid_points(order);
    let np = pts.len();
    let pvals: Vec<Vec<f64>> = (0..m)
        .map(|f| pts.iter().map(|(x, _)| basis.eval(f, x)).collect())
        .collect();
    let kernel: Vec<Vec<f64>> = par::map_indexed(np, |a| {
        (0..np)
            .map(|b| {
                let r: f64 = pts[a]
                    .0
                    .iter()
                    .zip(&pts[b].0)
                    .map(|(xa, xb)| (xa - xb) * (xa - xb))
                    .sum::<f64>()
                    .sqrt();
                pts[a].1 * pts[b].1 * potential.eval(r)
            })
            .collect()
    });
    // Q[(l1,f1), b] = sum_a u_l1(a) u_f1(a) K[a,b]
    let q: Vec<Vec<f64>> = par::map_indexed(m * m, |lf| {
        let l1 = lf / m;
        let f1 = lf % m;
        (0..np)
            .map(|b| {
                (0..np)
                    .map(|a| pvals[l1][a] * pvals[f1][a] * kernel[a][b])
                    .sum()
            })
            .collect()
    });
    par::map_indexed(m * m * m * m, |lin| {
        let f1 = lin % m;
        let f2 = (lin / m) % m;
        let l2 = (lin / (m * m)) % m;
        let l1 = lin / (m * m * m);
        let s: f64 = (0..np)
            .map(|b| q[l1 * m + f1][b] * pvals[l2][b] * pvals[f2][b])
            .sum();
        c(s)
    })
}

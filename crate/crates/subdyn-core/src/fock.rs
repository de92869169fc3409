//! Truncated occupation-number space with charge sectors and the
//! second-quantized operators living on it.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, CMat, CVec};
use crate::modes::PotentialTensor;

/// Default cap on the total basis dimension.
pub const DEFAULT_DIMENSION_CAP: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistics {
    Bose,
    Fermi,
}

impl Statistics {
    /// +1 for Bose, -1 for Fermi; the sign entering Pauli factors.
    pub fn sign(self) -> f64 {
        match self {
            Statistics::Bose => 1.0,
            Statistics::Fermi => -1.0,
        }
    }
}

/// Occupation-number basis grouped into charge sectors (eigenspaces of the
/// total number operator), with deterministic ordering: by sector, then
/// lexicographic occupations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FockSpace {
    pub statistics: Statistics,
    pub modes: usize,
    pub n_max: usize,
    pub n_cap: usize,
    pub states: Vec<Vec<u8>>,
    /// Half-open index ranges of each charge sector 0..=n_max.
    pub sector_bounds: Vec<(usize, usize)>,
    #[serde(skip)]
    index_of: std::collections::HashMap<Vec<u8>, usize>,
}

impl FockSpace {
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn index(&self, occ: &[u8]) -> Option<usize> {
        self.index_of.get(occ).copied()
    }

    pub fn sector_of(&self, state: usize) -> usize {
        self.states[state].iter().map(|&n| n as usize).sum()
    }

    pub fn sector_range(&self, q: usize) -> (usize, usize) {
        self.sector_bounds[q]
    }

    /// Index of the vacuum state.
    pub fn vacuum(&self) -> usize {
        self.index(&vec![0u8; self.modes]).expect("vacuum present")
    }

    /// States where every ladder action stays below the truncation caps
    /// (Bose: total below n_max and all occupations below n_cap).
    pub fn truncation_safe(&self, state: usize) -> bool {
        match self.statistics {
            Statistics::Fermi => true,
            Statistics::Bose => {
                let total: usize = self.states[state].iter().map(|&n| n as usize).sum();
                total < self.n_max && self.states[state].iter().all(|&n| (n as usize) < self.n_cap)
            }
        }
    }
}

/// Deterministic enumeration of the truncated basis.
pub fn enumerate_basis(
    statistics: Statistics,
    modes: usize,
    n_max: usize,
    n_cap: usize,
) -> Result<FockSpace> {
    enumerate_basis_capped(statistics, modes, n_max, n_cap, DEFAULT_DIMENSION_CAP)
}

pub fn enumerate_basis_capped(
    statistics: Statistics,
    modes: usize,
    n_max: usize,
    n_cap: usize,
    dim_cap: usize,
) -> Result<FockSpace> {
    if modes == 0 {
        return Err(Error::InvalidInput("need at least one mode".into()));
    }
    if statistics == Statistics::Fermi && n_max > modes {
        return Err(Error::InvalidInput(format!(
            "Fermi statistics requires n_max <= modes, got {n_max} > {modes}"
        )));
    }
    let per_mode = match statistics {
        Statistics::Fermi => 1usize,
        Statistics::Bose => n_cap.min(n_max),
    };

    let mut states: Vec<Vec<u8>> = Vec::new();
    let mut sector_bounds = Vec::new();
    for q in 0..=n_max {
        let start = states.len();
        let mut occ = vec![0u8; modes];
        enumerate_sector(&mut states, &mut occ, 0, q, per_mode);
        sector_bounds.push((start, states.len()));
        if states.len() > dim_cap {
            return Err(Error::DimensionCap {
                dim: states.len(),
                cap: dim_cap,
            });
        }
    }
    let index_of = states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    Ok(FockSpace {
        statistics,
        modes,
        n_max,
        n_cap: per_mode,
        states,
        sector_bounds,
        index_of,
    })
}

fn enumerate_sector(
    out: &mut Vec<Vec<u8>>,
    occ: &mut Vec<u8>,
    mode: usize,
    remaining: usize,
    per_mode: usize,
) {
    if mode == occ.len() {
        if remaining == 0 {
            out.push(occ.clone());
        }
        return;
    }
    for n in 0..=per_mode.min(remaining) {
        occ[mode] = n as u8;
        enumerate_sector(out, occ, mode + 1, remaining - n, per_mode);
    }
    occ[mode] = 0;
}

/// Sparse operator over a Fock basis, tagged with the charge it shifts.
#[derive(Debug, Clone)]
pub struct SecondQuantizedOperator {
    pub dim: usize,
    pub sector_shift: i64,
    pub hermitian: bool,
    /// rows[i] = sorted (column, amplitude) pairs of row i.
    pub rows: Vec<Vec<(usize, Complex64)>>,
}

impl SecondQuantizedOperator {
    pub fn zeros(dim: usize, sector_shift: i64) -> Self {
        Self {
            dim,
            sector_shift,
            hermitian: sector_shift == 0,
            rows: vec![Vec::new(); dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut op = Self::zeros(dim, 0);
        for i in 0..dim {
            op.rows[i].push((i, c(1.0)));
        }
        op
    }

    pub fn from_dense(m: &CMat, sector_shift: i64) -> Self {
        let dim = m.nrows();
        let mut rows = vec![Vec::new(); dim];
        for i in 0..dim {
            for j in 0..dim {
                let z = m[(i, j)];
                if z.norm() > 0.0 {
                    rows[i].push((j, z));
                }
            }
        }
        let mut op = Self {
            dim,
            sector_shift,
            hermitian: false,
            rows,
        };
        op.hermitian = sector_shift == 0 && op.hermiticity_residual() < 1e-12;
        op
    }

    pub fn to_dense(&self) -> CMat {
        let mut m = CMat::zeros(self.dim, self.dim);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, z) in row {
                m[(i, j)] = z;
            }
        }
        m
    }

    pub fn apply(&self, v: &CVec) -> CVec {
        let mut out = CVec::zeros(self.dim);
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = Complex64::ZERO;
            for &(j, z) in row {
                acc += z * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn add_entry(&mut self, i: usize, j: usize, z: Complex64) {
        if z.norm() == 0.0 {
            return;
        }
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |&(col, _)| col) {
            Ok(pos) => row[pos].1 += z,
            Err(pos) => row.insert(pos, (j, z)),
        }
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        let mut out = self.clone();
        for row in &mut out.rows {
            for e in row.iter_mut() {
                e.1 *= s;
            }
        }
        out.hermitian = self.hermitian && s.im == 0.0;
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let shift = if self.sector_shift == other.sector_shift {
            self.sector_shift
        } else {
            0
        };
        let mut out = self.clone();
        out.sector_shift = shift;
        for (i, row) in other.rows.iter().enumerate() {
            for &(j, z) in row {
                out.add_entry(i, j, z);
            }
        }
        out.hermitian = self.hermitian && other.hermitian;
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut out = Self::zeros(self.dim, self.sector_shift + other.sector_shift);
        for i in 0..self.dim {
            for &(k, a) in &self.rows[i] {
                for &(j, b) in &other.rows[k] {
                    out.add_entry(i, j, a * b);
                }
            }
        }
        out.hermitian = false;
        out
    }

    pub fn dagger(&self) -> Self {
        let mut out = Self::zeros(self.dim, -self.sector_shift);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, z) in row {
                out.add_entry(j, i, z.conj());
            }
        }
        out.hermitian = self.hermitian;
        out
    }

    pub fn hermiticity_residual(&self) -> f64 {
        let d = self.to_dense();
        crate::linalg::hermiticity_residual(&d)
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.iter().map(|(_, z)| z.norm()))
            .fold(0.0, f64::max)
    }

    /// Checks that non-zero entries only connect sectors differing by the
    /// declared shift.
    pub fn sector_structure_ok(&self, space: &FockSpace) -> bool {
        self.rows.iter().enumerate().all(|(i, row)| {
            row.iter().all(|&(j, z)| {
                z.norm() == 0.0
                    || space.sector_of(i) as i64 - space.sector_of(j) as i64 == self.sector_shift
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LadderKind {
    Create,
    Annihilate,
}

/// Effect of a_f on one occupation vector: (amplitude, new occupations).
/// Fermi signs follow the Jordan-Wigner string over the fixed mode order.
fn annihilate_occ(space: &FockSpace, occ: &[u8], f: usize) -> Option<(f64, Vec<u8>)> {
    let n = occ[f] as usize;
    if n == 0 {
        return None;
    }
    let mut out = occ.to_vec();
    out[f] -= 1;
    let amp = match space.statistics {
        Statistics::Bose => (n as f64).sqrt(),
        Statistics::Fermi => {
            let string: usize = occ[..f].iter().map(|&x| x as usize).sum();
            if string % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
    };
    Some((amp, out))
}

fn create_occ(space: &FockSpace, occ: &[u8], f: usize) -> Option<(f64, Vec<u8>)> {
    let n = occ[f] as usize;
    match space.statistics {
        Statistics::Fermi if n >= 1 => return None,
        Statistics::Bose if n >= space.n_cap => return None,
        _ => {}
    }
    let mut out = occ.to_vec();
    out[f] += 1;
    let amp = match space.statistics {
        Statistics::Bose => ((n + 1) as f64).sqrt(),
        Statistics::Fermi => {
            let string: usize = occ[..f].iter().map(|&x| x as usize).sum();
            if string % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
    };
    Some((amp, out))
}

/// Ladder operator a_f or a†_f as a sparse matrix.
pub fn ladder(space: &FockSpace, f: usize, kind: LadderKind) -> SecondQuantizedOperator {
    assert!(f < space.modes, "mode index out of range");
    let shift = match kind {
        LadderKind::Create => 1,
        LadderKind::Annihilate => -1,
    };
    let mut op = SecondQuantizedOperator::zeros(space.dim(), shift);
    op.hermitian = false;
    for (j, occ) in space.states.iter().enumerate() {
        let step = match kind {
            LadderKind::Create => create_occ(space, occ, f),
            LadderKind::Annihilate => annihilate_occ(space, occ, f),
        };
        if let Some((amp, new_occ)) = step {
            if let Some(i) = space.index(&new_occ) {
                op.add_entry(i, j, c(amp));
            }
        }
    }
    op
}

/// One-body operator sum_{fg} M_{fg} a†_f a_g built by direct action on the
/// occupation basis.
pub fn one_body_operator(space: &FockSpace, m: &CMat) -> SecondQuantizedOperator {
    assert_eq!(m.nrows(), space.modes);
    let mut op = SecondQuantizedOperator::zeros(space.dim(), 0);
    for (j, occ) in space.states.iter().enumerate() {
        for g in 0..space.modes {
            let Some((a1, occ1)) = annihilate_occ(space, occ, g) else {
                continue;
            };
            for f in 0..space.modes {
                let coef = m[(f, g)];
                if coef.norm() == 0.0 {
                    continue;
                }
                if let Some((a2, occ2)) = create_occ(space, &occ1, f) {
                    if let Some(i) = space.index(&occ2) {
                        op.add_entry(i, j, coef * c(a1 * a2));
                    }
                }
            }
        }
    }
    op.hermitian = op.hermiticity_residual() < 1e-12;
    op
}

/// Two-body operator (1/2) sum V_{l1 l2 f2 f1} a†_{l1} a†_{l2} a_{f2} a_{f1}.
pub fn two_body_operator(space: &FockSpace, tensor: &PotentialTensor) -> SecondQuantizedOperator {
    assert_eq!(tensor.modes, space.modes);
    two_body_from_fn(space, |l1, l2, f2, f1| tensor.get(l1, l2, f2, f1))
}

/// Same assembly for an arbitrary coefficient function.
pub fn two_body_from_fn(
    space: &FockSpace,
    coef: impl Fn(usize, usize, usize, usize) -> Complex64,
) -> SecondQuantizedOperator {
    let m = space.modes;
    let mut op = SecondQuantizedOperator::zeros(space.dim(), 0);
    for (j, occ) in space.states.iter().enumerate() {
        for f1 in 0..m {
            let Some((a1, occ1)) = annihilate_occ(space, occ, f1) else {
                continue;
            };
            for f2 in 0..m {
                let Some((a2, occ2)) = annihilate_occ(space, &occ1, f2) else {
                    continue;
                };
                for l2 in 0..m {
                    let Some((a3, occ3)) = create_occ(space, &occ2, l2) else {
                        continue;
                    };
                    for l1 in 0..m {
                        let v = coef(l1, l2, f2, f1);
                        if v.norm() == 0.0 {
                            continue;
                        }
                        if let Some((a4, occ4)) = create_occ(space, &occ3, l1) {
                            if let Some(i) = space.index(&occ4) {
                                op.add_entry(i, j, v * c(0.5 * a1 * a2 * a3 * a4));
                            }
                        }
                    }
                }
            }
        }
    }
    op.hermitian = op.hermiticity_residual() < 1e-10;
    op
}

/// H = sum_f E_f a†_f a_f + (1/2) sum a† a† V a a.
pub fn build_hamiltonian(
    space: &FockSpace,
    energies: &[f64],
    tensor: &PotentialTensor,
) -> Result<SecondQuantizedOperator> {
    if energies.len() != space.modes || tensor.modes != space.modes {
        return Err(Error::InvalidInput(
            "energies/tensor dimension does not match mode count".into(),
        ));
    }
    let mut one = CMat::zeros(space.modes, space.modes);
    for (f, &e) in energies.iter().enumerate() {
        one[(f, f)] = c(e);
    }
    let h = one_body_operator(space, &one).add(&two_body_operator(space, tensor));
    let residual = h.hermiticity_residual();
    if residual > 1e-10 {
        return Err(Error::NotHermitian {
            residual,
            tol: 1e-10,
        });
    }
    Ok(h)
}

/// Total number operator N = sum_f a†_f a_f (diagonal in this basis).
pub fn number_operator(space: &FockSpace) -> SecondQuantizedOperator {
    let mut op = SecondQuantizedOperator::zeros(space.dim(), 0);
    for (i, occ) in space.states.iter().enumerate() {
        let n: usize = occ.iter().map(|&x| x as usize).sum();
        op.add_entry(i, i, c(n as f64));
    }
    op.hermitian = true;
    op
}

/// Mass operator M = m N.
pub fn mass_operator(space: &FockSpace, mass: f64) -> SecondQuantizedOperator {
    number_operator(space).scaled(c(mass))
}

/// Energy operator assembled from the integrated energy density: kinetic
/// one-body part from the gradient overlap matrix, plus the two-body
/// potential part. Must reproduce H up to quadrature error.
pub fn energy_operator(
    space: &FockSpace,
    basis: &crate::modes::ModeBasis,
    tensor: &PotentialTensor,
) -> SecondQuantizedOperator {
    let m = space.modes;
    let pts = basis.grid_points(basis.quadrature_order);
    let mut kin = CMat::zeros(m, m);
    for f in 0..m {
        for g in 0..m {
            let s: f64 = pts
                .iter()
                .map(|(x, w)| {
                    let gf = basis.eval_grad(f, x);
                    let gg = basis.eval_grad(g, x);
                    w * gf.iter().zip(&gg).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum();
            kin[(f, g)] = c(s * crate::HBAR * crate::HBAR / (2.0 * basis.mass));
        }
    }
    one_body_operator(space, &kin).add(&two_body_operator(space, tensor))
}

//! Assembly of the derived generators: the microsystem-in-matter master
//! equation (optical potential Q and jump family L_{λξ}) and the kinetic
//! operator family V^eff, Γ, R built from two-particle T-matrices.

use num_complex::Complex64;


use crate::error::{Error, Result};
use crate::linalg::{c, dagger, eigh, max_abs, CMat, I};
use crate::scattering::{min_spacing, resolvent_apply_eig, t_matrix_pair, PairBasis};
use crate::modes::PotentialTensor;
use crate::HBAR;

/// A single microsystem particle (charge-one sector over M one-particle
/// modes) coupled to a finite macrosystem ("bath"). The joint space is
/// ordered as the charge-0 block (bath eigenstates |λ⟩) followed by the
/// charge-1 block (mode f ⊗ bath λ). Everything is expressed in the bath
/// energy eigenbasis.
#[derive(Debug, Clone)]
pub struct MicroEmbedding {
    pub micro_energies: Vec<f64>,
    pub bath_energies: Vec<f64>,
    /// Eigenvalues of ρ_M (candidate labels ξ).
    pub pi: Vec<f64>,
    /// Columns are the eigenvectors |ξ⟩ of ρ_M in the bath eigenbasis.
    pub xi_vectors: CMat,
    /// Joint free Hamiltonian (diagonal) on the (1+M)·d_B space.
    pub h0: CMat,
    /// Joint interaction; zero on the charge-0 block.
    pub v: CMat,
    pub beta: f64,
}

impl MicroEmbedding {
    pub fn modes(&self) -> usize {
        self.micro_energies.len()
    }

    pub fn bath_dim(&self) -> usize {
        self.bath_energies.len()
    }

    pub fn joint_dim(&self) -> usize {
        (1 + self.modes()) * self.bath_dim()
    }

    /// Joint index of the charge-1 state (mode f, bath λ).
    pub fn idx1(&self, f: usize, lam: usize) -> usize {
        self.bath_dim() + f * self.bath_dim() + lam
    }

    /// Joint annihilator a_f: |f, λ⟩ → |vac, λ⟩.
    pub fn annihilator(&self, f: usize) -> CMat {
        let n = self.joint_dim();
        let mut a = CMat::zeros(n, n);
        for lam in 0..self.bath_dim() {
            a[(lam, self.idx1(f, lam))] = c(1.0);
        }
        a
    }

    /// ρ_M on the joint space (supported on the charge-0 block).
    pub fn rho_m_joint(&self) -> CMat {
        let n = self.joint_dim();
        let d = self.bath_dim();
        let mut rho = CMat::zeros(n, n);
        for xi in 0..d {
            for a in 0..d {
                for b in 0..d {
                    rho[(a, b)] += c(self.pi[xi])
                        * self.xi_vectors[(a, xi)]
                        * self.xi_vectors[(b, xi)].conj();
                }
            }
        }
        rho
    }

    pub fn h_full(&self) -> CMat {
        &self.h0 + &self.v
    }
}

/// Builds the embedding: the bath Hamiltonian is diagonalized exactly and
/// ρ_M = exp(−β H_M)/Z constructed in its eigenbasis (β = ∞ gives the
/// ground-state projector). The micro-bath interaction acts on the charge-1
/// block as Σ_{fk} C_{fk} a†_f a_k ⊗ B.
pub fn build_embedding(
    micro_energies: &[f64],
    h_bath: &CMat,
    coupling_micro: &CMat,
    coupling_bath: &CMat,
    beta: f64,
) -> Result<MicroEmbedding> {
    let m = micro_energies.len();
    let d = h_bath.nrows();
    if m == 0 || d == 0 {
        return Err(Error::InvalidInput("empty micro or bath space".into()));
    }
    if coupling_micro.nrows() != m || coupling_bath.nrows() != d {
        return Err(Error::InvalidInput("coupling shape mismatch".into()));
    }
    if crate::linalg::hermiticity_residual(h_bath) > 1e-12
        || crate::linalg::hermiticity_residual(coupling_micro) > 1e-12
        || crate::linalg::hermiticity_residual(coupling_bath) > 1e-12
    {
        return Err(Error::NotHermitian {
            residual: crate::linalg::hermiticity_residual(h_bath),
            tol: 1e-12,
        });
    }
    let (bath_energies, bath_vecs) = eigh(h_bath);

    // Gibbs weights in the bath eigenbasis, shifted for stability.
    let e0 = bath_energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut pi: Vec<f64> = if beta.is_infinite() {
        bath_energies
            .iter()
            .map(|&e| if (e - e0).abs() < 1e-12 { 1.0 } else { 0.0 })
            .collect()
    } else {
        bath_energies.iter().map(|&e| (-beta * (e - e0)).exp()).collect()
    };
    let z: f64 = pi.iter().sum();
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::PartitionUnderflow);
    }
    for p in pi.iter_mut() {
        *p /= z;
    }

    let n = (1 + m) * d;
    let mut h0 = CMat::zeros(n, n);
    for lam in 0..d {
        h0[(lam, lam)] = c(bath_energies[lam]);
    }
    for f in 0..m {
        for lam in 0..d {
            let i = d + f * d + lam;
            h0[(i, i)] = c(micro_energies[f] + bath_energies[lam]);
        }
    }
    // bath coupling operator transformed to the eigenbasis
    let b_eig = dagger(&bath_vecs) * coupling_bath * &bath_vecs;
    let mut v = CMat::zeros(n, n);
    for f in 0..m {
        for k in 0..m {
            let cfk = coupling_micro[(f, k)];
            if cfk.norm() == 0.0 {
                continue;
            }
            for a in 0..d {
                for b in 0..d {
                    v[(d + f * d + a, d + k * d + b)] += cfk * b_eig[(a, b)];
                }
            }
        }
    }
    Ok(MicroEmbedding {
        micro_energies: micro_energies.to_vec(),
        bath_energies,
        pi,
        xi_vectors: CMat::identity(d, d),
        h0,
        v,
        beta,
    })
}

/// Output of the coefficient extraction: the optical-potential matrix Q and
/// the labelled jump family L_{λξ} on the one-particle space.
#[derive(Debug, Clone)]
pub struct MicroCoefficients {
    pub q: CMat,
    /// ((λ, ξ), L matrix) for every bath label pair.
    pub jumps: Vec<((usize, usize), CMat)>,
    pub epsilon: f64,
    /// (k, f) pairs removed by the secular cut |E_k − E_f| < ħ/τ₁.
    pub dropped: Vec<(usize, usize)>,
}

/// Q_{kf} = ħ Tr[(T(−iE_k/ħ+ε) a_k) a†_f ρ_M] and
/// (L_{λξ})_{kf} = √(2εħ³π_ξ) ⟨λ| (T(−iE_k/ħ+ε) a_k) a†_f
///                 (E_k + E_λ − E_f − H_M − iħε)⁻¹ |ξ⟩.
pub fn micro_coefficients(
    emb: &MicroEmbedding,
    epsilon: f64,
    tau1: Option<f64>,
) -> Result<MicroCoefficients> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let m = emb.modes();
    let d = emb.bath_dim();
    let h = emb.h_full();
    let (vals, vecs) = eigh(&h);
    let spacing = min_spacing(&vals, 1e-12) / HBAR;
    if spacing > 0.0 && epsilon < 0.01 * spacing {
        return Err(Error::EpsilonTooSmall {
            eps: epsilon,
            spacing,
        });
    }

    let rho = emb.rho_m_joint();
    let vprime = |b: &CMat| (&emb.v * b - b * &emb.v) * (I / HBAR);

    // T(z_k)[a_k] for each mode k
    let mut t_ak = Vec::with_capacity(m);
    for k in 0..m {
        let zk = Complex64::new(epsilon, -emb.micro_energies[k] / HBAR);
        let a = emb.annihilator(k);
        let va = vprime(&a);
        let res = resolvent_apply_eig(&vals, &vecs, zk, &va)?;
        t_ak.push(&va + vprime(&res));
    }

    let secular_ok = |k: usize, f: usize| match tau1 {
        Some(t1) => (emb.micro_energies[k] - emb.micro_energies[f]).abs() < HBAR / t1,
        None => true,
    };

    let mut q = CMat::zeros(m, m);
    let mut dropped = Vec::new();
    // W[k][f]: charge-0 bath block of (T a_k) a†_f
    let mut w = vec![vec![CMat::zeros(d, d); m]; m];
    for k in 0..m {
        for f in 0..m {
            if !secular_ok(k, f) {
                dropped.push((k, f));
                continue;
            }
            let af_dag = dagger(&emb.annihilator(f));
            let op = &t_ak[k] * af_dag;
            q[(k, f)] = HBAR * (op.clone() * &rho).trace();
            let mut blk = CMat::zeros(d, d);
            for a in 0..d {
                for b in 0..d {
                    blk[(a, b)] = op[(a, b)];
                }
            }
            w[k][f] = blk;
        }
    }

    let mut jumps = Vec::new();
    for lam in 0..d {
        for xi in 0..d {
            let pref = (2.0 * epsilon * HBAR.powi(3) * emb.pi[xi]).sqrt();
            let mut l = CMat::zeros(m, m);
            if pref > 0.0 {
                for k in 0..m {
                    for f in 0..m {
                        if !secular_ok(k, f) {
                            continue;
                        }
                        // ⟨λ| W_kf G |ξ⟩ with G diagonal in the bath basis
                        let mut acc = Complex64::ZERO;
                        for lp in 0..d {
                            let denom = Complex64::new(
                                emb.micro_energies[k] + emb.bath_energies[lam]
                                    - emb.micro_energies[f]
                                    - emb.bath_energies[lp],
                                -HBAR * epsilon,
                            );
                            acc += w[k][f][(lam, lp)] / denom * emb.xi_vectors[(lp, xi)];
                        }
                        l[(k, f)] = c(pref) * acc;
                    }
                }
            }
            jumps.push(((lam, xi), l));
        }
    }
    Ok(MicroCoefficients {
        q,
        jumps,
        epsilon,
        dropped,
    })
}

/// Assembled Lindblad generator on a finite one-particle space.
#[derive(Debug, Clone)]
pub struct LindbladGenerator {
    pub h_eff: CMat,
    pub q: CMat,
    pub jumps: Vec<((usize, usize), CMat)>,
    /// −Σ L†L, used in place of Q+Q† so the trace identity is exact.
    pub q_plus_enforced: CMat,
    /// ‖Q + Q† + Σ L†L‖_max before enforcement.
    pub raw_trace_residual: f64,
    /// Largest eigenvalue of (Q+Q†); should be ≤ 0 for a contraction.
    pub dissipativity: f64,
}

impl LindbladGenerator {
    pub fn dim(&self) -> usize {
        self.h_eff.nrows()
    }

    /// dρ/dt = −(i/ħ)[H_eff, ρ] + (1/2ħ){Q+Q†, ρ} + (1/ħ) Σ L ρ L†,
    /// with Q+Q† replaced by −Σ L†L.
    pub fn apply(&self, rho: &CMat) -> CMat {
        let mut out = (&self.h_eff * rho - rho * &self.h_eff) * (-I / HBAR);
        out += (&self.q_plus_enforced * rho + rho * &self.q_plus_enforced) * c(0.5 / HBAR);
        for (_, l) in &self.jumps {
            out += l * rho * dagger(l) * c(1.0 / HBAR);
        }
        out
    }

    /// Column-major vectorized superoperator matrix (dim² × dim²).
    pub fn superoperator_matrix(&self) -> CMat {
        let n = self.dim();
        let id = CMat::identity(n, n);
        let mut sup = id.kronecker(&self.h_eff) * (-I / HBAR)
            + self.h_eff.transpose().kronecker(&id) * (I / HBAR);
        sup += id.kronecker(&self.q_plus_enforced) * c(0.5 / HBAR)
            + self.q_plus_enforced.transpose().kronecker(&id) * c(0.5 / HBAR);
        for (_, l) in &self.jumps {
            sup += l.map(|z| z.conj()).kronecker(l) * c(1.0 / HBAR);
        }
        sup
    }
}

/// Builds H_eff = H0 + (i/2)(Q − Q†) and enforces the trace identity by
/// substituting −Σ L†L for Q+Q†. Fails when the raw identity residual
/// exceeds `tolerance` (an inconsistent ε or truncation).
pub fn assemble_generator(
    h0: &CMat,
    q: &CMat,
    jumps: Vec<((usize, usize), CMat)>,
    tolerance: f64,
) -> Result<LindbladGenerator> {
    let n = h0.nrows();
    if q.nrows() != n || jumps.iter().any(|(_, l)| l.nrows() != n) {
        return Err(Error::InvalidInput("generator shape mismatch".into()));
    }
    let q_dag = dagger(q);
    let h_eff = h0 + (q - &q_dag) * (I * 0.5);
    let mut ll = CMat::zeros(n, n);
    for (_, l) in &jumps {
        ll += dagger(l) * l;
    }
    let q_plus = q + &q_dag;
    let raw = max_abs(&(&q_plus + &ll));
    if raw > tolerance {
        return Err(Error::TraceIdentity {
            residual: raw,
            tol: tolerance,
        });
    }
    let (ev, _) = eigh(&crate::linalg::hermitize(&q_plus));
    let dissipativity = ev.last().copied().unwrap_or(0.0);
    Ok(LindbladGenerator {
        h_eff,
        q: q.clone(),
        jumps,
        q_plus_enforced: -ll,
        raw_trace_residual: raw,
        dissipativity,
    })
}

/// Kinetic operator family on the unit-norm pair basis. Matrix indices run
/// over unordered mode pairs; `r` stacks the vacuum rows of the R operators
/// (row P = label pair, column Q = annihilated pair).
#[derive(Debug, Clone)]
pub struct KineticOperators {
    pub pair_basis: PairBasis,
    pub epsilon: f64,
    pub occupations: Vec<f64>,
    pub v_eff: CMat,
    pub gamma: CMat,
    pub r: CMat,
    /// ½ R†R over the unordered pair basis; the ordered-label sum of the
    /// unitarity relation counts each off-diagonal pair twice, which this
    /// convention absorbs.
    pub gamma_from_r: CMat,
}

impl KineticOperators {
    pub fn gamma_deviation(&self) -> f64 {
        max_abs(&(&self.gamma - &self.gamma_from_r))
    }

    /// Deviation restricted to near-degenerate pair-energy blocks
    /// (|Ē_P − Ē_Q| ≤ tol), where the relation holds beyond leading order.
    pub fn gamma_deviation_secular(&self, energies: &[f64], tol: f64) -> f64 {
        let e = self.pair_basis.pair_energies(energies);
        let d = &self.gamma - &self.gamma_from_r;
        let mut worst: f64 = 0.0;
        for p in 0..self.pair_basis.len() {
            for q in 0..self.pair_basis.len() {
                if (e[p] - e[q]).abs() <= tol {
                    worst = worst.max(d[(p, q)].norm());
                }
            }
        }
        worst
    }
}

/// Builds V^eff, Γ and the R family from a T-matrix provider `t_at(E)`,
/// which returns the unit-norm pair matrix T(E + iħε).
pub fn kinetic_from_t(
    basis: &PairBasis,
    energies: &[f64],
    occupations: &[f64],
    epsilon: f64,
    mut t_at: impl FnMut(f64) -> Result<CMat>,
) -> Result<KineticOperators> {
    let n = basis.len();
    let e_pair = basis.pair_energies(energies);
    // cache by distinct pair energy
    let mut cache: Vec<(f64, CMat)> = Vec::new();
    let mut t_for = |e: f64| -> Result<CMat> {
        if let Some((_, t)) = cache.iter().find(|(ee, _)| (ee - e).abs() < 1e-12) {
            return Ok(t.clone());
        }
        let t = t_at(e)?;
        cache.push((e, t.clone()));
        Ok(t)
    };
    let ts: Vec<CMat> = e_pair
        .iter()
        .map(|&e| t_for(e))
        .collect::<Result<Vec<_>>>()?;

    let s = basis.statistics.sign();
    let mut v_eff = CMat::zeros(n, n);
    let mut gamma = CMat::zeros(n, n);
    let mut r = CMat::zeros(n, n);
    for p in 0..n {
        let (p1, p2) = basis.pairs[p];
        let pauli = 1.0 + s * occupations[p1] + s * occupations[p2];
        let pref = -I * c((2.0 * epsilon * pauli.max(0.0)).sqrt());
        for q in 0..n {
            let t_q = ts[q][(p, q)]; // ⟨P|T(E_Q + iħε)|Q⟩
            let t_p_adj = ts[p][(q, p)].conj(); // ⟨P|T(E_P + iħε)†|Q⟩
            v_eff[(p, q)] = 0.5 * (t_q + t_p_adj);
            gamma[(p, q)] = I * 0.5 * (t_q - t_p_adj);
            let denom = Complex64::new(e_pair[p] - e_pair[q], -HBAR * epsilon);
            r[(p, q)] = pref * t_q / denom;
        }
    }
    let gamma_from_r = dagger(&r) * &r * c(0.5);
    Ok(KineticOperators {
        pair_basis: basis.clone(),
        epsilon,
        occupations: occupations.to_vec(),
        v_eff,
        gamma,
        r,
        gamma_from_r,
    })
}

/// Full build from a potential tensor: evaluates the Pauli-corrected pair
/// T-matrix at every required energy argument E + iħε.
pub fn build_heff_gamma_r_kinetic(
    basis: &PairBasis,
    energies: &[f64],
    tensor: &PotentialTensor,
    occupations: &[f64],
    epsilon: f64,
) -> Result<KineticOperators> {
    kinetic_from_t(basis, energies, occupations, epsilon, |e| {
        let z = Complex64::new(e, HBAR * epsilon);
        Ok(t_matrix_pair(basis, energies, tensor, occupations, z)?.t)
    })
}

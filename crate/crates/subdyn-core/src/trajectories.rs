//! Stochastic unraveling of the master equation: quantum-jump trajectories
//! with waiting-time sampling, jump-count subcollections by nested
//! time-ordered quadrature, and event-class probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::DensityMatrix;
use crate::error::{Error, Result};
use crate::lindblad::LindbladGenerator;
use crate::linalg::{c, dagger, expm, hermitize, CMat, CVec, I};
use crate::HBAR;

/// Number of dyadic refinement levels used to localize jump times inside a
/// base step (resolution dt/2^BISECTION_LEVELS).
const BISECTION_LEVELS: usize = 36;

/// A base step is rejected and refined when the survival probability decays
/// by more than this fraction across it.
const MAX_STEP_DECAY: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub label: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub index: usize,
    pub events: Vec<JumpEvent>,
    /// normalized state at each requested grid time
    pub states: Vec<CVec>,
    pub final_state: CVec,
}

#[derive(Debug, Clone)]
pub struct UnravelResult {
    pub seed: u64,
    pub times: Vec<f64>,
    pub records: Vec<TrajectoryRecord>,
    /// ensemble-averaged density matrix at each grid time
    pub mean_states: Vec<DensityMatrix>,
}

impl UnravelResult {
    /// Fraction of trajectories with exactly k jump events.
    pub fn count_frequency(&self, k: usize) -> f64 {
        let hits = self
            .records
            .iter()
            .filter(|r| r.events.len() == k)
            .count();
        hits as f64 / self.records.len() as f64
    }
}

/// Deterministic (no-jump) propagators for the non-hermitian drift
/// A = −iH_eff/ħ − (1/2ħ) Σ L†L, cached at dyadic fractions of the base step.
struct DyadicPropagators {
    levels: Vec<CMat>, // levels[j] = expm(A · dt / 2^j)
}

impl DyadicPropagators {
    fn new(gen: &LindbladGenerator, dt: f64) -> Self {
        let n = gen.dim();
        // q_plus_enforced = −Σ L†L
        let a = &gen.h_eff * (-I / HBAR) + &gen.q_plus_enforced * c(0.5 / HBAR);
        let mut levels = Vec::with_capacity(BISECTION_LEVELS + 1);
        let mut scale = dt;
        for _ in 0..=BISECTION_LEVELS {
            levels.push(expm(&(&a * c(scale))));
            scale *= 0.5;
        }
        let _ = n;
        Self { levels }
    }
}

fn pick_jump(
    gen: &LindbladGenerator,
    psi: &CVec,
    rng: &mut ChaCha8Rng,
) -> ((usize, usize), CVec) {
    let weights: Vec<f64> = gen
        .jumps
        .iter()
        .map(|(_, l)| (l * psi).norm_squared())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for ((label, l), w) in gen.jumps.iter().zip(&weights) {
        draw -= w;
        if draw <= 0.0 || *label == gen.jumps.last().unwrap().0 {
            let jumped = l * psi;
            let norm = jumped.norm();
            return (*label, jumped / c(norm));
        }
    }
    unreachable!()
}

/// Advance one base step, recursing to half steps when the survival
/// probability decays too fast; detects the threshold crossing and localizes
/// the jump time by dyadic bisection.
#[allow(clippy::too_many_arguments)]
fn advance_step(
    gen: &LindbladGenerator,
    props: &DyadicPropagators,
    psi: &mut CVec,
    t: &mut f64,
    dt: f64,
    level: usize,
    threshold: &mut f64,
    rng: &mut ChaCha8Rng,
    events: &mut Vec<JumpEvent>,
) {
    let trial = &props.levels[level] * &*psi;
    let n2 = trial.norm_squared();
    let start_n2 = psi.norm_squared();
    if n2 < (1.0 - MAX_STEP_DECAY) * start_n2 && level + 2 < props.levels.len() {
        let half = dt / 2.0;
        advance_step(gen, props, psi, t, half, level + 1, threshold, rng, events);
        advance_step(gen, props, psi, t, half, level + 1, threshold, rng, events);
        return;
    }
    if n2 >= *threshold {
        *psi = trial;
        *t += dt;
        return;
    }
    // jump inside this step: walk the remaining dyadic levels
    let mut tau = 0.0;
    let mut cur = psi.clone();
    for j in (level + 1)..props.levels.len() {
        let cand = &props.levels[j] * &cur;
        if cand.norm_squared() >= *threshold {
            cur = cand;
            tau += dt / 2.0f64.powi((j - level) as i32);
        }
    }
    *t += tau;
    let (label, jumped) = pick_jump(gen, &cur, rng);
    events.push(JumpEvent {
        time: *t,
        label,
    });
    *psi = jumped;
    *threshold = rng.gen::<f64>();
    // finish the remainder of the step
    let rest = dt - tau;
    if rest > 1e-12 * dt {
        // propagate the remainder with the same dyadic walk (approximation to
        // resolution dt/2^levels)
        let mut left = rest;
        for j in (level + 1)..props.levels.len() {
            let piece = dt / 2.0f64.powi((j - level) as i32);
            if left >= piece {
                let trial = &props.levels[j] * &*psi;
                let n2 = trial.norm_squared() / psi.norm_squared();
                if n2 < *threshold {
                    // nested jump within the remainder: recurse at this scale
                    advance_step(
                        gen, props, psi, t, piece, j, threshold, rng, events,
                    );
                } else {
                    *psi = trial;
                    *t += piece;
                }
                left -= piece;
            }
        }
    }
}

/// Runs `n_traj` quantum-jump trajectories from the pure state `psi0`,
/// recording normalized states at `t_grid` and ensemble-averaged density
/// matrices. Trajectories are independent ChaCha streams of `seed` and run
/// in parallel when the `parallel` feature is active.
pub fn unravel(
    gen: &LindbladGenerator,
    psi0: &CVec,
    t_grid: &[f64],
    n_traj: usize,
    seed: u64,
    base_dt: f64,
) -> Result<UnravelResult> {
    if psi0.len() != gen.dim() {
        return Err(Error::InvalidInput("state/generator dimension mismatch".into()));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) || t_grid.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::InvalidInput("time grid must be increasing and nonnegative".into()));
    }
    let props = DyadicPropagators::new(gen, base_dt);
    let psi0 = psi0 / c(psi0.norm());

    let records: Vec<TrajectoryRecord> = crate::par::map_indexed(n_traj, |idx| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64 + 1);
        let mut psi = psi0.clone();
        let mut t = 0.0;
        let mut threshold = rng.gen::<f64>();
        let mut events = Vec::new();
        let mut states = Vec::with_capacity(t_grid.len());
        for &target in t_grid {
            while t + base_dt <= target + 1e-12 * base_dt {
                advance_step(
                    gen, &props, &mut psi, &mut t, base_dt, 0, &mut threshold,
                    &mut rng, &mut events,
                );
            }
            // partial step to land on the grid point: walk dyadic pieces
            let mut left = target - t;
            for j in 1..props.levels.len() {
                let piece = base_dt / 2.0f64.powi(j as i32);
                if left >= piece {
                    advance_step(
                        gen, &props, &mut psi, &mut t, piece, j, &mut threshold,
                        &mut rng, &mut events,
                    );
                    left -= piece;
                }
            }
            states.push(&psi / c(psi.norm()));
        }
        let final_state = states.last().cloned().unwrap_or_else(|| psi.clone());
        TrajectoryRecord {
            index: idx,
            events,
            states,
            final_state,
        }
    });

    let n = gen.dim();
    let mean_states = (0..t_grid.len())
        .map(|j| {
            let mut acc = CMat::zeros(n, n);
            for r in &records {
                let s = &r.states[j];
                acc += s * s.adjoint();
            }
            acc /= c(n_traj as f64);
            DensityMatrix {
                mat: hermitize(&acc),
                psd_tolerance: crate::dynamics::DEFAULT_PSD_TOL,
            }
        })
        .collect();

    Ok(UnravelResult {
        seed,
        times: t_grid.to_vec(),
        records,
        mean_states,
    })
}

/// Probabilities of the jump-count subcollections: the k-jump contribution
/// to e^{tL}ρ0 in the Dyson decomposition
///   ρ_k(t) = ∫ S(t−t_k) J ⋯ J S(t_1) ρ0,  p_k = Tr ρ_k(t),
/// with S the no-jump semigroup and J ρ = (1/ħ) Σ L ρ L†, evaluated by
/// iterated trapezoid quadrature on a uniform grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subcollections {
    pub horizon: f64,
    pub probabilities: Vec<f64>,
    /// 1 − Σ p_k: weight of trajectories with more jumps than resolved
    pub remainder: f64,
}

pub fn subcollections(
    gen: &LindbladGenerator,
    rho0: &DensityMatrix,
    horizon: f64,
    max_events: usize,
    grid_points: usize,
) -> Result<Subcollections> {
    if grid_points < 2 {
        return Err(Error::InvalidInput("need at least 2 grid points".into()));
    }
    let n = gen.dim();
    let dt = horizon / (grid_points - 1) as f64;
    let a = &gen.h_eff * (-I / HBAR) + &gen.q_plus_enforced * c(0.5 / HBAR);
    let step = expm(&(&a * c(dt)));
    let step_dag = dagger(&step);
    let jump_map = |rho: &CMat| -> CMat {
        let mut out = CMat::zeros(n, n);
        for (_, l) in &gen.jumps {
            out += l * rho * dagger(l) * c(1.0 / HBAR);
        }
        out
    };

    // layer 0: no-jump branch on the grid
    let mut prev: Vec<CMat> = Vec::with_capacity(grid_points);
    prev.push(rho0.mat.clone());
    for j in 1..grid_points {
        let next = &step * &prev[j - 1] * &step_dag;
        prev.push(next);
    }
    let mut probabilities = vec![prev[grid_points - 1].trace().re];

    for _k in 1..=max_events {
        let sources: Vec<CMat> = prev.iter().map(&jump_map).collect();
        let mut layer: Vec<CMat> = Vec::with_capacity(grid_points);
        layer.push(CMat::zeros(n, n));
        for j in 1..grid_points {
            // trapezoid: ρ_k(t_j) = S(dt)ρ_k(t_{j−1}) + dt/2 (S(dt)J ρ_{k−1}(t_{j−1}) + J ρ_{k−1}(t_j))
            let carried = &step * &layer[j - 1] * &step_dag;
            let boundary =
                (&step * &sources[j - 1] * &step_dag + &sources[j]) * c(dt / 2.0);
            layer.push(carried + boundary);
        }
        probabilities.push(layer[grid_points - 1].trace().re);
        prev = layer;
    }
    let remainder = (1.0 - probabilities.iter().sum::<f64>()).max(0.0);
    Ok(Subcollections {
        horizon,
        probabilities,
        remainder,
    })
}

/// Probability that a trajectory's total jump count falls in one of the
/// given disjoint classes. Overlapping classes are rejected.
pub fn event_probability(
    sub: &Subcollections,
    classes: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let mut seen = std::collections::HashSet::new();
    for class in classes {
        for &k in class {
            if !seen.insert(k) {
                return Err(Error::InvalidInput(format!(
                    "event classes overlap at count {k}"
                )));
            }
        }
    }
    Ok(classes
        .iter()
        .map(|class| {
            class
                .iter()
                .map(|&k| sub.probabilities.get(k).copied().unwrap_or(0.0))
                .sum()
        })
        .collect())
}

//! Pipeline execution: builds the model named by a scenario, runs it, and
//! emits CSV series plus a map of named scalar results that the scenario's
//! assertions are checked against.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subdyn_core::dynamics::{evolve_master, subdynamics_compare, DensityMatrix, Method};
use subdyn_core::fock::{build_hamiltonian, enumerate_basis, number_operator, Statistics};
use subdyn_core::io;
use subdyn_core::linalg::{c, eigh, hermitize, CMat, CVec};
use subdyn_core::lindblad::{
    assemble_generator, build_embedding, build_heff_gamma_r_kinetic, micro_coefficients,
    LindbladGenerator, MicroEmbedding,
};
use subdyn_core::kinetics::KineticGenerator;
use subdyn_core::modes::{build_box_basis, potential_tensor, Potential};
use subdyn_core::scattering::PairBasis;
use subdyn_core::thermo::{
    build_density_operators, evolve_thermo_with, memory_state, FitOptions, MemoryHistory,
    SpatialGrid, ThermoState,
};
use subdyn_core::trajectories::unravel;

use crate::scenario::{Pipeline, Scenario};
use crate::Failure;

pub struct RunOutput {
    pub residuals: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
}

pub fn check_assertions(sc: &Scenario, residuals: &BTreeMap<String, f64>) -> Option<Failure> {
    for (key, bound) in &sc.assertions {
        match residuals.get(key) {
            None => {
                return Some(Failure::validation(format!(
                    "assertion references unknown result `{key}`"
                )))
            }
            Some(v) if !(v <= bound) => {
                return Some(Failure::assertion(format!(
                    "{key} = {v:.6e} exceeds bound {bound:.6e}"
                )))
            }
            _ => {}
        }
    }
    None
}

pub fn execute(sc: &Scenario, out_dir: &Path) -> Result<RunOutput, Failure> {
    match &sc.kind {
        Pipeline::Subdynamics { .. } => run_subdynamics(sc, out_dir),
        Pipeline::Trajectories { .. } => run_trajectories(sc, out_dir),
        Pipeline::Kinetics { .. } => run_kinetics(sc, out_dir),
        Pipeline::Thermo { .. } => run_thermo(sc, out_dir),
        Pipeline::Memory { .. } => run_memory(sc, out_dir),
    }
}

fn core(e: subdyn_core::Error) -> Failure {
    Failure::from_core(&e)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| lo + (hi - lo) * j as f64 / (n - 1).max(1) as f64)
        .collect()
}

fn random_hermitian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> CMat {
    let x = CMat::from_fn(n, n, |_, _| {
        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    });
    hermitize(&x) * c(scale)
}

/// Seeded micro-bath model shared by the subdynamics and trajectory runs.
fn build_micro(
    seed: u64,
    micro_energies: &[f64],
    bath_levels: usize,
    coupling: f64,
    beta: f64,
    epsilon: f64,
) -> Result<(MicroEmbedding, LindbladGenerator), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h_bath = random_hermitian(&mut rng, bath_levels, 0.8);
    for i in 0..bath_levels {
        h_bath[(i, i)] += c(1.0 + 0.3 * i as f64);
    }
    let cm = random_hermitian(&mut rng, micro_energies.len(), 1.0);
    let cb = random_hermitian(&mut rng, bath_levels, coupling);
    let emb = build_embedding(micro_energies, &h_bath, &cm, &cb, beta).map_err(core)?;
    let co = micro_coefficients(&emb, epsilon, None).map_err(core)?;
    let m = micro_energies.len();
    let mut h0 = CMat::zeros(m, m);
    for (i, &e) in micro_energies.iter().enumerate() {
        h0[(i, i)] = c(e);
    }
    let gen = assemble_generator(&h0, &co.q, co.jumps, f64::INFINITY).map_err(core)?;
    Ok((emb, gen))
}

fn uniform_pure(m: usize) -> CVec {
    CVec::from_element(m, c(1.0 / (m as f64).sqrt()))
}

fn trace_norm(a: &CMat) -> f64 {
    let (vals, _) = eigh(&hermitize(a));
    vals.iter().map(|v| v.abs()).sum()
}

fn run_subdynamics(sc: &Scenario, out_dir: &Path) -> Result<RunOutput, Failure> {
    let Pipeline::Subdynamics {
        micro_energies,
        bath_levels,
        coupling,
        beta,
        epsilon,
        tau0,
        tau1,
        t_points,
    } = &sc.kind
    else {
        unreachable!()
    };
    let (emb, gen) = build_micro(
        sc.seed,
        micro_energies,
        *bath_levels,
        *coupling,
        *beta,
        *epsilon,
    )?;
    let m = micro_energies.len();
    let psi0 = uniform_pure(m);
    let rho0 = DensityMatrix::from_pure(&psi0);

    let mut observables: Vec<(String, CMat)> = (0..m)
        .map(|f| {
            let mut p = CMat::zeros(m, m);
            p[(f, f)] = c(1.0);
            (format!("n_{f}"), p)
        })
        .collect();
    if m >= 2 {
        let mut sx = CMat::zeros(m, m);
        sx[(0, 1)] = c(1.0);
        sx[(1, 0)] = c(1.0);
        observables.push(("coh_01".into(), sx));
    }
    let obs_mats: Vec<CMat> = observables.iter().map(|(_, a)| a.clone()).collect();

    let window = (2.0 * tau0, 0.5 * tau1);
    let t_grid = linspace(window.0, window.1.min(window.0 + 8.0), *t_points);
    let report = subdynamics_compare(&emb, &gen, &rho0, &obs_mats, &t_grid, Some(window))
        .map_err(core)?;

    let mut rows: Vec<(f64, String, f64)> = Vec::new();
    for (i, (label, _)) in observables.iter().enumerate() {
        for (j, &t) in report.times.iter().enumerate() {
            rows.push((t, format!("{label}_exact"), report.exact[i][j]));
            rows.push((t, format!("{label}_reduced"), report.reduced[i][j]));
        }
    }
    let row_refs: Vec<(f64, &str, f64)> =
        rows.iter().map(|(t, l, v)| (*t, l.as_str(), *v)).collect();
    io::write_time_series(&out_dir.join("series.csv"), &row_refs).map_err(core)?;

    let mut residuals = BTreeMap::new();
    residuals.insert(
        "max_rel_deviation".into(),
        report
            .max_rel_deviation
            .iter()
            .cloned()
            .fold(0.0, f64::max),
    );
    residuals.insert("raw_trace_residual".into(), gen.raw_trace_residual);
    residuals.insert("dissipativity".into(), gen.dissipativity);
    residuals.insert(
        "horizon_flag".into(),
        if report.horizon_valid { 0.0 } else { 1.0 },
    );
    Ok(RunOutput {
        residuals,
        artifacts: vec!["series.csv".into()],
    })
}

fn run_trajectories(sc: &Scenario, out_dir: &Path) -> Result<RunOutput, Failure> {
    let Pipeline::Trajectories {
        micro_energies,
        bath_levels,
        coupling,
        beta,
        epsilon,
        n_traj,
        t_max,
        t_points,
        base_dt,
    } = &sc.kind
    else {
        unreachable!()
    };
    let (_, gen) = build_micro(
        sc.seed,
        micro_energies,
        *bath_levels,
        *coupling,
        *beta,
        *epsilon,
    )?;
    let psi0 = uniform_pure(micro_energies.len());
    let t_grid: Vec<f64> = (1..=*t_points)
        .map(|j| t_max * j as f64 / *t_points as f64)
        .collect();
    let result = unravel(&gen, &psi0, &t_grid, *n_traj, sc.seed, *base_dt).map_err(core)?;
    let rho0 = DensityMatrix::from_pure(&psi0);
    let exact = evolve_master(&gen, &rho0, &t_grid, Method::Auto).map_err(core)?;

    let gap = result
        .mean_states
        .iter()
        .zip(&exact)
        .map(|(a, b)| 0.5 * trace_norm(&(&a.mat - &b.mat)))
        .fold(0.0, f64::max);
    let mean_jumps = result
        .records
        .iter()
        .map(|r| r.events.len() as f64)
        .sum::<f64>()
        / result.records.len() as f64;

    let mut event_csv = String::from("trajectory,time,lambda,xi\n");
    for r in &result.records {
        for e in &r.events {
            event_csv.push_str(&format!(
                "{},{},{},{}\n",
                r.index, e.time, e.label.0, e.label.1
            ));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Failure::validation(e.to_string()))?;
    std::fs::write(out_dir.join("events.csv"), event_csv)
        .map_err(|e| Failure::validation(e.to_string()))?;

    let mut residuals = BTreeMap::new();
    residuals.insert("trace_norm_gap".into(), gap);
    residuals.insert("mean_jumps".into(), mean_jumps);
    residuals.insert("raw_trace_residual".into(), gen.raw_trace_residual);
    Ok(RunOutput {
        residuals,
        artifacts: vec!["events.csv".into()],
    })
}

/// Fermi-Dirac occupations at (β, μ) for the given spectrum.
fn fd_occupations(energies: &[f64], beta: f64, mu: f64) -> Vec<f64> {
    energies
        .iter()
        .map(|&e| 1.0 / ((beta * (e - mu)).exp() + 1.0))
        .collect()
}

struct KineticSetup {
    basis: subdyn_core::modes::ModeBasis,
    space: subdyn_core::fock::FockSpace,
    kin: KineticGenerator,
}

fn build_kinetic(
    modes: usize,
    length: f64,
    mass: f64,
    potential: &Potential,
    occupations: &[f64],
    epsilon: f64,
    tau0: f64,
    tau1: f64,
) -> Result<KineticSetup, Failure> {
    let basis = build_box_basis(1, &[length], modes, mass).map_err(core)?;
    let space = enumerate_basis(Statistics::Fermi, modes, modes, 1).map_err(core)?;
    let tensor = potential_tensor(&basis, potential).map_err(core)?;
    let pb = PairBasis::new(Statistics::Fermi, modes);
    let kin_ops = build_heff_gamma_r_kinetic(&pb, &basis.energies, &tensor, occupations, epsilon)
        .map_err(core)?;
    let kin = KineticGenerator::new(space.clone(), &basis.energies, kin_ops, tau0, tau1, mass)
        .map_err(core)?;
    Ok(KineticSetup { basis, space, kin })
}

fn run_kinetics(sc: &Scenario, out_dir: &Path) -> Result<RunOutput, Failure> {
    let Pipeline::Kinetics {
        modes,
        length,
        mass,
        potential,
        beta,
        mu,
        epsilon,
        tau0,
        tau1,
        audit_tau,
        audit_draws,
    } = &sc.kind
    else {
        unreachable!()
    };
    let probe = build_box_basis(1, &[*length], *modes, *mass).map_err(core)?;
    let occ = fd_occupations(&probe.energies, *beta, *mu);
    let setup = build_kinetic(
        *modes, *length, *mass, potential, &occ, *epsilon, *tau0, *tau1,
    )?;
    let report = setup
        .kin
        .conservation_and_positivity(*audit_tau, *audit_draws, sc.seed);

    // collision rates per mode at the matching background state
    let background = setup.kin.background_state();
    let mut rate_rows: Vec<(f64, String, f64)> = Vec::new();
    let mut equilibrium_rate_max = 0.0f64;
    for h in 0..*modes {
        let (gain, loss, _) = setup.kin.boltzmann_decompose(h);
        let g = (&gain * &background).trace().re;
        let l = (&loss * &background).trace().re;
        rate_rows.push((setup.basis.energies[h], format!("gain_{h}"), g));
        rate_rows.push((setup.basis.energies[h], format!("loss_{h}"), l));
        equilibrium_rate_max = equilibrium_rate_max.max((g + l).abs());
    }
    let row_refs: Vec<(f64, &str, f64)> = rate_rows
        .iter()
        .map(|(t, l, v)| (*t, l.as_str(), *v))
        .collect();
    io::write_time_series(&out_dir.join("rates.csv"), &row_refs).map_err(core)?;

    let scale = setup.kin.collision_scale().max(1e-300);
    let mut residuals = BTreeMap::new();
    residuals.insert("number_residual".into(), report.number_residual);
    residuals.insert("energy_residual_rel".into(), report.energy_residual_rel);
    residuals.insert(
        "positivity_deficit".into(),
        (-report.min_quadratic_form).max(0.0),
    );
    residuals.insert(
        "equilibrium_rate_rel".into(),
        equilibrium_rate_max / scale,
    );
    residuals.insert(
        "gamma_unitarity_deviation".into(),
        setup.kin.ops.gamma_deviation(),
    );
    Ok(RunOutput {
        residuals,
        artifacts: vec!["rates.csv".into()],
    })
}

fn run_thermo(sc: &Scenario, out_dir: &Path) -> Result<RunOutput, Failure> {
    let Pipeline::Thermo {
        modes,
        length,
        mass,
        cells,
        potential,
        beta,
        mu,
        epsilon,
        tau0,
        tau1,
        t_max,
        t_points,
    } = &sc.kind
    else {
        unreachable!()
    };
    let occ_beta = beta.iter().sum::<f64>() / beta.len() as f64;
    let occ_mu = mu.iter().sum::<f64>() / mu.len() as f64;
    let probe = build_box_basis(1, &[*length], *modes, *mass).map_err(core)?;
    let occ = fd_occupations(&probe.energies, occ_beta, occ_mu);
    let setup = build_kinetic(
        *modes, *length, *mass, potential, &occ, *epsilon, *tau0, *tau1,
    )?;
    let grid = SpatialGrid::new(*length, *cells, 48).map_err(core)?;
    let ops = build_density_operators(
        &setup.space,
        &setup.basis,
        &grid,
        &vec![0.0; *cells],
        &Potential::Zero,
    )
    .map_err(core)?;
    let state0 = ThermoState::new(beta.clone(), mu.clone(), vec![0.0; *cells]).map_err(core)?;
    let t_grid = linspace(0.0, *t_max, *t_points);
    let opts = FitOptions {
        fix_velocity: true,
        ..Default::default()
    };
    let evo = evolve_thermo_with(&state0, &ops, &setup.kin, &t_grid, &opts).map_err(core)?;
    if let Some(msg) = &evo.aborted {
        return Err(Failure {
            kind: "numerical".into(),
            message: format!("field evolution aborted: {msg}"),
            exit_code: crate::EXIT_NUMERICAL,
        });
    }

    let mut rows: Vec<(f64, String, f64)> = Vec::new();
    for step in &evo.steps {
        for cl in 0..*cells {
            rows.push((step.time, format!("beta_{cl}"), step.state.beta[cl]));
            rows.push((step.time, format!("mu_{cl}"), step.state.mu[cl]));
            rows.push((step.time, format!("v_{cl}"), step.state.velocity[cl]));
        }
        rows.push((step.time, "entropy".into(), step.entropy));
        rows.push((
            step.time,
            "hamiltonian_flux".into(),
            step.hamiltonian_flux_max,
        ));
    }
    let row_refs: Vec<(f64, &str, f64)> =
        rows.iter().map(|(t, l, v)| (*t, l.as_str(), *v)).collect();
    io::write_time_series(&out_dir.join("fields.csv"), &row_refs).map_err(core)?;

    let entropy_decrease = evo
        .steps
        .windows(2)
        .map(|w| (w[0].entropy - w[1].entropy).max(0.0))
        .fold(0.0, f64::max);
    let flux_max = evo
        .steps
        .iter()
        .map(|s| s.hamiltonian_flux_max)
        .fold(0.0, f64::max);
    let mut residuals = BTreeMap::new();
    residuals.insert("entropy_decrease".into(), entropy_decrease);
    residuals.insert("hamiltonian_flux_max".into(), flux_max);
    residuals.insert(
        "entropy_gain".into(),
        evo.steps.last().unwrap().entropy - evo.steps[0].entropy,
    );
    Ok(RunOutput {
        residuals,
        artifacts: vec!["fields.csv".into()],
    })
}

fn run_memory(sc: &Scenario, out_dir: &Path) -> Result<RunOutput, Failure> {
    let Pipeline::Memory {
        modes,
        length,
        mass,
        cells,
        potential,
        beta_start,
        beta_end,
        mu_start,
        mu_end,
        samples,
        dt,
    } = &sc.kind
    else {
        unreachable!()
    };
    let basis = build_box_basis(1, &[*length], *modes, *mass).map_err(core)?;
    let space = enumerate_basis(Statistics::Fermi, *modes, *modes, 1).map_err(core)?;
    let grid = SpatialGrid::new(*length, *cells, 48).map_err(core)?;
    let ops = build_density_operators(&space, &basis, &grid, &vec![0.0; *cells], &Potential::Zero)
        .map_err(core)?;
    let tensor = potential_tensor(&basis, potential).map_err(core)?;
    let h = build_hamiltonian(&space, &basis.energies, &tensor)
        .map_err(core)?
        .to_dense();

    let times: Vec<f64> = (0..*samples).map(|j| j as f64 * dt).collect();
    let span = times.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let states: Vec<ThermoState> = times
        .iter()
        .map(|&t| {
            let f = t / span;
            let blend =
                |a: &[f64], b: &[f64]| -> Vec<f64> {
                    a.iter().zip(b).map(|(x, y)| x + (y - x) * f).collect()
                };
            ThermoState::new(
                blend(beta_start, beta_end),
                blend(mu_start, mu_end),
                vec![0.0; *cells],
            )
        })
        .collect::<Result<_, _>>()
        .map_err(core)?;
    let history = MemoryHistory::new(times.clone(), states).map_err(core)?;
    let report = memory_state(&history, &ops, &h, *times.last().unwrap()).map_err(core)?;

    let rows: Vec<(f64, String, f64)> = times
        .iter()
        .zip(&report.boundary_flux)
        .map(|(&t, &f)| (t, "boundary_flux".to_string(), f))
        .collect();
    let row_refs: Vec<(f64, &str, f64)> =
        rows.iter().map(|(t, l, v)| (*t, l.as_str(), *v)).collect();
    io::write_time_series(&out_dir.join("boundary_flux.csv"), &row_refs).map_err(core)?;

    let mut residuals = BTreeMap::new();
    residuals.insert("agreement".into(), report.agreement);
    residuals.insert("direct_min_eigenvalue".into(), report.direct.min_eigenvalue());
    Ok(RunOutput {
        residuals,
        artifacts: vec!["boundary_flux.csv".into()],
    })
}

pub fn dump_ops(sc: &Scenario, out_dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut written = Vec::new();
    match &sc.kind {
        Pipeline::Subdynamics {
            micro_energies,
            bath_levels,
            coupling,
            beta,
            epsilon,
            ..
        }
        | Pipeline::Trajectories {
            micro_energies,
            bath_levels,
            coupling,
            beta,
            epsilon,
            ..
        } => {
            let (_, gen) = build_micro(
                sc.seed,
                micro_energies,
                *bath_levels,
                *coupling,
                *beta,
                *epsilon,
            )?;
            let jump_labels: Vec<String> = gen
                .jumps
                .iter()
                .map(|((lam, xi), _)| format!("jump_{lam}_{xi}"))
                .collect();
            let mut parts: Vec<(&str, &DMatrix<Complex64>)> =
                vec![("h_eff", &gen.h_eff), ("q", &gen.q)];
            for (label, (_, l)) in jump_labels.iter().zip(&gen.jumps) {
                parts.push((label.as_str(), l));
            }
            written.push(io::write_labeled_matrices(out_dir, "generator", &parts).map_err(core)?);
        }
        Pipeline::Kinetics {
            modes,
            length,
            mass,
            potential,
            beta,
            mu,
            epsilon,
            tau0,
            tau1,
            ..
        } => {
            let probe = build_box_basis(1, &[*length], *modes, *mass).map_err(core)?;
            let occ = fd_occupations(&probe.energies, *beta, *mu);
            let setup = build_kinetic(
                *modes, *length, *mass, potential, &occ, *epsilon, *tau0, *tau1,
            )?;
            let tensor = potential_tensor(&setup.basis, potential).map_err(core)?;
            written
                .push(io::write_tensor(out_dir, "tensor", &setup.basis, &tensor).map_err(core)?);
            let nop = number_operator(&setup.space);
            written.push(io::write_operator(out_dir, "number", &setup.space, &nop).map_err(core)?);
            let ham = build_hamiltonian(&setup.space, &setup.basis.energies, &tensor)
                .map_err(core)?;
            written.push(
                io::write_operator(out_dir, "hamiltonian", &setup.space, &ham).map_err(core)?,
            );
            written.push(
                io::write_labeled_matrices(
                    out_dir,
                    "kinetic",
                    &[
                        ("v_eff", &setup.kin.ops.v_eff),
                        ("gamma", &setup.kin.ops.gamma),
                        ("r", &setup.kin.ops.r),
                    ],
                )
                .map_err(core)?,
            );
            // representative scattering kernel: ½ Γ reconstructed from R, at
            // the stored smoothing scale
            written.push(
                io::write_t_matrix(
                    out_dir,
                    "gamma_from_r",
                    Complex64::new(0.0, setup.kin.ops.epsilon),
                    setup.kin.ops.epsilon,
                    &setup.kin.ops.occupations,
                    &setup.kin.ops.pair_basis,
                    &setup.kin.ops.gamma_from_r,
                )
                .map_err(core)?,
            );
        }
        Pipeline::Thermo {
            modes,
            length,
            mass,
            potential,
            ..
        }
        | Pipeline::Memory {
            modes,
            length,
            mass,
            potential,
            ..
        } => {
            let basis = build_box_basis(1, &[*length], *modes, *mass).map_err(core)?;
            let space = enumerate_basis(Statistics::Fermi, *modes, *modes, 1).map_err(core)?;
            let tensor = potential_tensor(&basis, potential).map_err(core)?;
            written.push(io::write_tensor(out_dir, "tensor", &basis, &tensor).map_err(core)?);
            let nop = number_operator(&space);
            written.push(io::write_operator(out_dir, "number", &space, &nop).map_err(core)?);
            let ham = build_hamiltonian(&space, &basis.energies, &tensor).map_err(core)?;
            written.push(io::write_operator(out_dir, "hamiltonian", &space, &ham).map_err(core)?);
        }
    }
    Ok(written)
}

//! Scenario schema: one JSON document naming a pipeline and its physical
//! and numerical parameters, plus named assertion bounds checked after the
//! run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use subdyn_core::modes::Potential;

/// Bundled scenarios compiled into the binary; `--config NAME` falls back to
/// these when no file of that name exists.
pub const BUNDLED: &[(&str, &str)] = &[
    (
        "free_particle.json",
        include_str!("../scenarios/free_particle.json"),
    ),
    (
        "weak_coupling_subdyn.json",
        include_str!("../scenarios/weak_coupling_subdyn.json"),
    ),
];

pub fn resolve_config_text(config: &str) -> std::io::Result<String> {
    match std::fs::read_to_string(config) {
        Ok(text) => Ok(text),
        Err(e) => {
            let name = std::path::Path::new(config)
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or(config);
            for (bundled, text) in BUNDLED {
                if *bundled == name || bundled.trim_end_matches(".json") == name {
                    return Ok((*text).to_string());
                }
            }
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Named upper bounds on the run's scalar results; the run fails with
    /// exit 4 when any is exceeded.
    #[serde(default)]
    pub assertions: BTreeMap<String, f64>,
    #[serde(flatten)]
    pub kind: Pipeline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pipeline {
    /// Reduced one-particle dynamics vs exact unitary joint evolution.
    Subdynamics {
        micro_energies: Vec<f64>,
        bath_levels: usize,
        /// Micro-bath coupling strength; 0 gives exactly free evolution.
        coupling: f64,
        /// Inverse temperature of the bath state.
        beta: f64,
        epsilon: f64,
        tau0: f64,
        tau1: f64,
        t_points: usize,
    },
    /// Quantum-jump unraveling vs the master-equation solution.
    Trajectories {
        micro_energies: Vec<f64>,
        bath_levels: usize,
        coupling: f64,
        beta: f64,
        epsilon: f64,
        n_traj: usize,
        t_max: f64,
        t_points: usize,
        base_dt: f64,
    },
    /// Kinetic-generator structure audit on a confined Fock space.
    Kinetics {
        modes: usize,
        length: f64,
        mass: f64,
        potential: Potential,
        beta: f64,
        mu: f64,
        epsilon: f64,
        tau0: f64,
        tau1: f64,
        audit_tau: f64,
        audit_draws: usize,
    },
    /// Closed evolution of hydrodynamic fields under the kinetic generator.
    Thermo {
        modes: usize,
        length: f64,
        mass: f64,
        cells: usize,
        potential: Potential,
        beta: Vec<f64>,
        mu: Vec<f64>,
        epsilon: f64,
        tau0: f64,
        tau1: f64,
        t_max: f64,
        t_points: usize,
    },
    /// Two evaluations of the history-dependent state, compared.
    Memory {
        modes: usize,
        length: f64,
        mass: f64,
        cells: usize,
        potential: Potential,
        beta_start: Vec<f64>,
        beta_end: Vec<f64>,
        mu_start: Vec<f64>,
        mu_end: Vec<f64>,
        samples: usize,
        dt: f64,
    },
}

impl Scenario {
    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty() {
            return Err("scenario name must not be empty".into());
        }
        match &self.kind {
            Pipeline::Subdynamics {
                micro_energies,
                bath_levels,
                coupling,
                epsilon,
                tau0,
                tau1,
                t_points,
                ..
            } => {
                if micro_energies.is_empty() || *bath_levels == 0 {
                    return Err("need at least one micro mode and one bath level".into());
                }
                if *coupling < 0.0 {
                    return Err("coupling must be nonnegative".into());
                }
                positive("epsilon", *epsilon)?;
                positive("tau0", *tau0)?;
                positive("tau1", *tau1)?;
                if *tau0 >= *tau1 {
                    return Err("tau0 must be smaller than tau1".into());
                }
                at_least("t_points", *t_points, 2)?;
            }
            Pipeline::Trajectories {
                micro_energies,
                bath_levels,
                coupling,
                epsilon,
                n_traj,
                t_max,
                t_points,
                base_dt,
                ..
            } => {
                if micro_energies.is_empty() || *bath_levels == 0 {
                    return Err("need at least one micro mode and one bath level".into());
                }
                if *coupling < 0.0 {
                    return Err("coupling must be nonnegative".into());
                }
                positive("epsilon", *epsilon)?;
                positive("t_max", *t_max)?;
                positive("base_dt", *base_dt)?;
                at_least("n_traj", *n_traj, 1)?;
                at_least("t_points", *t_points, 1)?;
            }
            Pipeline::Kinetics {
                modes,
                length,
                mass,
                beta,
                epsilon,
                tau0,
                tau1,
                audit_tau,
                audit_draws,
                ..
            } => {
                at_least("modes", *modes, 1)?;
                positive("length", *length)?;
                positive("mass", *mass)?;
                positive("beta", *beta)?;
                positive("epsilon", *epsilon)?;
                positive("tau0", *tau0)?;
                positive("tau1", *tau1)?;
                positive("audit_tau", *audit_tau)?;
                at_least("audit_draws", *audit_draws, 1)?;
            }
            Pipeline::Thermo {
                modes,
                length,
                mass,
                cells,
                beta,
                mu,
                epsilon,
                tau0,
                tau1,
                t_max,
                t_points,
                ..
            } => {
                at_least("modes", *modes, 1)?;
                at_least("cells", *cells, 1)?;
                positive("length", *length)?;
                positive("mass", *mass)?;
                positive("epsilon", *epsilon)?;
                positive("tau0", *tau0)?;
                positive("tau1", *tau1)?;
                positive("t_max", *t_max)?;
                at_least("t_points", *t_points, 2)?;
                if beta.len() != *cells || mu.len() != *cells {
                    return Err("beta and mu must have one entry per cell".into());
                }
                if beta.iter().any(|&b| b <= 0.0) {
                    return Err("beta entries must be positive".into());
                }
            }
            Pipeline::Memory {
                modes,
                length,
                mass,
                cells,
                beta_start,
                beta_end,
                mu_start,
                mu_end,
                samples,
                dt,
                ..
            } => {
                at_least("modes", *modes, 1)?;
                at_least("cells", *cells, 1)?;
                positive("length", *length)?;
                positive("mass", *mass)?;
                positive("dt", *dt)?;
                at_least("samples", *samples, 2)?;
                for (label, v) in [
                    ("beta_start", beta_start),
                    ("beta_end", beta_end),
                    ("mu_start", mu_start),
                    ("mu_end", mu_end),
                ] {
                    if v.len() != *cells {
                        return Err(format!("{label} must have one entry per cell"));
                    }
                }
                if beta_start.iter().chain(beta_end).any(|&b| b <= 0.0) {
                    return Err("beta profiles must stay positive".into());
                }
            }
        }
        Ok(())
    }
}

fn positive(label: &str, v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{label} must be positive and finite, got {v}"))
    }
}

fn at_least(label: &str, v: usize, min: usize) -> Result<(), String> {
    if v >= min {
        Ok(())
    } else {
        Err(format!("{label} must be at least {min}, got {v}"))
    }
}

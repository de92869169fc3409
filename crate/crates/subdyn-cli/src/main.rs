//! `subdyn`: scenario-driven batch runner over the subdyn-core pipelines.
//!
//! Subcommands: `run`, `sweep`, `validate`, `dump-ops`. Scenarios are JSON
//! documents; outputs are a manifest JSON (config echo, residual summary,
//! error record) plus CSV time series and binary operator dumps.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical-validity flag,
//! 4 assertion failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

mod pipelines;
mod scenario;

use scenario::Scenario;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_ASSERTION: u8 = 4;

#[derive(Parser)]
#[command(name = "subdyn", version, about = "scenario runner for reduced quantum field dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and write its artifacts.
    Run {
        #[arg(long, env = "SUBDYN_CONFIG")]
        config: String,
        /// Override the scenario seed.
        #[arg(long, env = "SUBDYN_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "SUBDYN_OUT_DIR", default_value = "out")]
        out_dir: PathBuf,
        /// Worker threads (0 = library default).
        #[arg(long, env = "SUBDYN_THREADS", default_value_t = 0)]
        threads: usize,
    },
    /// Run a scenario once per parameter value and aggregate key scalars.
    Sweep {
        #[arg(long, env = "SUBDYN_CONFIG")]
        config: String,
        #[arg(long, env = "SUBDYN_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "SUBDYN_OUT_DIR", default_value = "out")]
        out_dir: PathBuf,
        #[arg(long, env = "SUBDYN_THREADS", default_value_t = 0)]
        threads: usize,
        /// Dot-separated path of the scenario field to vary.
        #[arg(long)]
        param: String,
        /// Comma-separated JSON scalars substituted at `param`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Parse and validate a scenario without running it.
    Validate {
        #[arg(long, env = "SUBDYN_CONFIG")]
        config: String,
    },
    /// Build and dump the scenario's operators in the binary formats.
    DumpOps {
        #[arg(long, env = "SUBDYN_CONFIG")]
        config: String,
        #[arg(long, env = "SUBDYN_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "SUBDYN_OUT_DIR", default_value = "out")]
        out_dir: PathBuf,
    },
}

/// A failure with its exit code and a machine-readable record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub kind: String,
    pub message: String,
    pub exit_code: u8,
}

impl Failure {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self {
            kind: "validation".into(),
            message: msg.into(),
            exit_code: EXIT_VALIDATION,
        }
    }

    pub fn assertion(msg: impl Into<String>) -> Self {
        Self {
            kind: "assertion".into(),
            message: msg.into(),
            exit_code: EXIT_ASSERTION,
        }
    }

    pub fn from_core(e: &subdyn_core::Error) -> Self {
        use subdyn_core::Error as E;
        let numerical = matches!(
            e,
            E::EpsilonTooSmall { .. }
                | E::SmoothnessInvalid(_)
                | E::SecularCut(_)
                | E::QuadratureNonConvergence { .. }
                | E::PartitionUnderflow
                | E::PositivityViolation { .. }
                | E::TraceIdentity { .. }
                | E::NotHermitian { .. }
                | E::FitDiverged(_)
                | E::SolveFailed(_)
        );
        Self {
            kind: if numerical { "numerical" } else { "validation" }.into(),
            message: e.to_string(),
            exit_code: if numerical { EXIT_NUMERICAL } else { EXIT_VALIDATION },
        }
    }
}

fn configure_threads(threads: usize) {
    if threads > 0 {
        // ignore failure if a global pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn load_scenario(config: &str) -> Result<(Scenario, serde_json::Value), Failure> {
    let text = scenario::resolve_config_text(config)
        .map_err(|e| Failure::validation(format!("cannot read config {config}: {e}")))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::validation(format!("config is not valid JSON: {e}")))?;
    let sc: Scenario = serde_json::from_value(raw.clone())
        .map_err(|e| Failure::validation(format!("config does not match the schema: {e}")))?;
    sc.validate().map_err(Failure::validation)?;
    Ok((sc, raw))
}

fn run_one(sc: &Scenario, raw: &serde_json::Value, out_dir: &Path) -> (u8, BTreeMap<String, f64>) {
    let outcome = pipelines::execute(sc, out_dir);
    let (residuals, artifacts, failure) = match outcome {
        Ok(run) => {
            let failure = pipelines::check_assertions(sc, &run.residuals);
            (run.residuals, run.artifacts, failure)
        }
        Err(f) => (BTreeMap::new(), Vec::new(), Some(f)),
    };
    let exit = failure.as_ref().map_or(0, |f| f.exit_code);
    let manifest = subdyn_core::io::RunManifest {
        name: sc.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: Some(sc.seed),
        config: raw.clone(),
        residuals: residuals.clone(),
        artifacts,
        error: failure.map(|f| subdyn_core::io::ErrorRecord {
            kind: f.kind,
            message: f.message,
            exit_code: f.exit_code as i32,
        }),
    };
    if let Err(e) = subdyn_core::io::write_manifest(&out_dir.join("manifest.json"), &manifest) {
        eprintln!("error: cannot write manifest: {e}");
        return (EXIT_VALIDATION, residuals);
    }
    (exit, residuals)
}

fn set_by_path(value: &mut serde_json::Value, path: &str, new: serde_json::Value) -> Result<(), String> {
    let mut cur = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        match cur {
            serde_json::Value::Object(map) => {
                if last {
                    if !map.contains_key(*part) {
                        return Err(format!("config has no field `{part}`"));
                    }
                    map.insert((*part).to_string(), new);
                    return Ok(());
                }
                cur = map
                    .get_mut(*part)
                    .ok_or_else(|| format!("config has no field `{part}`"))?;
            }
            serde_json::Value::Array(arr) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| format!("`{part}` is not an array index"))?;
                if idx >= arr.len() {
                    return Err(format!("index {idx} out of bounds"));
                }
                if last {
                    arr[idx] = new;
                    return Ok(());
                }
                cur = &mut arr[idx];
            }
            _ => return Err(format!("`{part}` is not addressable")),
        }
    }
    Err("empty parameter path".into())
}

fn cmd_run(config: &str, seed: Option<u64>, out_dir: &Path, threads: usize) -> u8 {
    configure_threads(threads);
    let (mut sc, mut raw) = match load_scenario(config) {
        Ok(v) => v,
        Err(f) => {
            eprintln!("error ({}): {}", f.kind, f.message);
            return f.exit_code;
        }
    };
    if let Some(s) = seed {
        sc.seed = s;
        raw["seed"] = serde_json::json!(s);
    }
    let (exit, residuals) = run_one(&sc, &raw, out_dir);
    for (k, v) in &residuals {
        println!("{k} = {v:.6e}");
    }
    println!(
        "{}: {}",
        sc.name,
        if exit == 0 { "ok" } else { "FAILED" }
    );
    exit
}

fn cmd_sweep(
    config: &str,
    seed: Option<u64>,
    out_dir: &Path,
    threads: usize,
    param: &str,
    values: &[String],
) -> u8 {
    configure_threads(threads);
    let (_, raw0) = match load_scenario(config) {
        Ok(v) => v,
        Err(f) => {
            eprintln!("error ({}): {}", f.kind, f.message);
            return f.exit_code;
        }
    };

    use rayon::prelude::*;
    let rows: Vec<(String, u8, BTreeMap<String, f64>, Option<String>)> = values
        .par_iter()
        .map(|v| {
            let parsed: serde_json::Value = serde_json::from_str(v)
                .unwrap_or_else(|_| serde_json::Value::String(v.clone()));
            let mut raw = raw0.clone();
            if let Err(e) = set_by_path(&mut raw, param, parsed) {
                return (v.clone(), EXIT_VALIDATION, BTreeMap::new(), Some(e));
            }
            if let Some(s) = seed {
                raw["seed"] = serde_json::json!(s);
            }
            let sc: Scenario = match serde_json::from_value(raw.clone()) {
                Ok(sc) => sc,
                Err(e) => {
                    return (v.clone(), EXIT_VALIDATION, BTreeMap::new(), Some(e.to_string()))
                }
            };
            if let Err(e) = sc.validate() {
                return (v.clone(), EXIT_VALIDATION, BTreeMap::new(), Some(e));
            }
            let sub = out_dir.join(format!("{param}_{}", sanitize(v)));
            let (exit, residuals) = run_one(&sc, &raw, &sub);
            (v.clone(), exit, residuals, None)
        })
        .collect();

    // aggregate: one CSV row per (value, scalar)
    let mut csv = String::from("param,value,status,key,scalar\n");
    for (v, exit, residuals, err) in &rows {
        if residuals.is_empty() {
            csv.push_str(&format!(
                "{param},{v},{},error,{}\n",
                exit,
                err.clone().unwrap_or_else(|| "run failed".into()).replace(',', ";")
            ));
        }
        for (k, x) in residuals {
            csv.push_str(&format!("{param},{v},{exit},{k},{x}\n"));
        }
    }
    if let Err(e) = std::fs::create_dir_all(out_dir)
        .and_then(|_| std::fs::write(out_dir.join("sweep.csv"), csv))
    {
        eprintln!("error: cannot write sweep table: {e}");
        return EXIT_VALIDATION;
    }
    println!("sweep over {param}: {} runs", rows.len());
    0
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|ch| if ch.is_alphanumeric() || ch == '.' || ch == '-' { ch } else { '_' })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            threads,
        } => cmd_run(config, *seed, out_dir, *threads),
        Command::Sweep {
            config,
            seed,
            out_dir,
            threads,
            param,
            values,
        } => cmd_sweep(config, *seed, out_dir, *threads, param, values),
        Command::Validate { config } => match load_scenario(config) {
            Ok((sc, _)) => {
                println!("{}: valid", sc.name);
                0
            }
            Err(f) => {
                eprintln!("error ({}): {}", f.kind, f.message);
                f.exit_code
            }
        },
        Command::DumpOps {
            config,
            seed,
            out_dir,
        } => {
            let loaded = load_scenario(config).map(|(mut sc, raw)| {
                if let Some(s) = seed {
                    sc.seed = *s;
                }
                (sc, raw)
            });
            match loaded {
                Ok((sc, _)) => match pipelines::dump_ops(&sc, out_dir) {
                    Ok(paths) => {
                        for p in paths {
                            println!("{}", p.display());
                        }
                        0
                    }
                    Err(f) => {
                        eprintln!("error ({}): {}", f.kind, f.message);
                        f.exit_code
                    }
                },
                Err(f) => {
                    eprintln!("error ({}): {}", f.kind, f.message);
                    f.exit_code
                }
            }
        }
    };
    ExitCode::from(code)
}

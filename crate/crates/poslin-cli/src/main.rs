//! Command-line front end: validate, solve, search, convert, gen.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage or parse error,
//! 3 no convergence, 4 missing initial policy, 5 not substochastic.
//! Machine output goes to standard output or explicit paths; a run record
//! with timing lands on standard error so outputs stay byte-reproducible.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use poslin::bellman::{brute_force_solve, value_iterate, ENUMERATION_CAP};
use poslin::gen::{chemical_plant, random_instance, GenConfig};
use poslin::model::{normalize_e, validate, ProblemFile};
use poslin::search::{run_search, SearchConfig};
use poslin::ssp::{check_prop2_scaling, expand_skeleton, from_ssp, to_ssp, SspInstance};
use poslin::{CostVector, Error, ProblemInstance, VI_MAX_ITER, VI_TOL};

#[derive(Parser)]
#[command(name = "poslin", version, about = "Optimal control of positive linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a problem file against the model invariants and assumptions.
    Validate { path: PathBuf },
    /// Compute the optimal cost vector and policy.
    Solve {
        path: PathBuf,
        /// Value-iteration tolerance (default from POSLIN_TOL or 1e-10).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_enum, default_value_t = Method::Vi)]
        method: Method,
    },
    /// Run the heuristic search to a certified suboptimality ratio.
    Search {
        path: PathBuf,
        /// Stopping ratio, at least 1.
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        tol: Option<f64>,
        /// Write the per-iteration trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write per-iteration state snapshot CSVs into this directory.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Lock in actions certified dominant within the current bounds.
        #[arg(long)]
        fix_actions: bool,
    },
    /// Convert between the control and SSP file formats.
    Convert {
        path: PathBuf,
        #[arg(long, value_enum)]
        to: Target,
        /// Expand a super-stochastic instance into a truncated skeleton of
        /// this depth (only with --to ssp).
        #[arg(long, value_name = "K_MAX")]
        skeleton: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an instance file.
    Gen {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        actions_per_state: Option<usize>,
        #[arg(long)]
        density: Option<f64>,
        /// Push one open-loop column sum above one.
        #[arg(long)]
        unstable: bool,
        /// Generate with the identity measurement matrix instead of E = A.
        #[arg(long)]
        identity_e: bool,
        /// Output path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Vi,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Ssp,
    Control,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Chemical,
    Random,
}

#[derive(Args)]
struct Nothing {}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::NoConvergence { .. } => 3,
            Error::MissingInitialPolicy => 4,
            Error::NotSubstochastic { .. } => 5,
            _ => 1,
        };
        Failure::new(code, err.to_string())
    }
}

#[derive(Serialize)]
struct RunRecord {
    command: String,
    input_digest: String,
    parameters: serde_json::Value,
    outputs: Vec<String>,
    wall_time_ms: f64,
}

fn digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::new(2, format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::new(2, format!("cannot write {}: {e}", path.display())))
}

fn load_instance(text: &str) -> Result<ProblemInstance, Failure> {
    let file: ProblemFile = serde_json::from_str(text)
        .map_err(|e| Failure::new(2, format!("problem file parse error: {e}")))?;
    file.into_instance().map_err(Failure::from)
}

fn default_tol(flag: Option<f64>) -> f64 {
    flag.or_else(|| {
        std::env::var("POSLIN_TOL")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(VI_TOL)
}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();
    let mut record = RunRecord {
        command: String::new(),
        input_digest: String::new(),
        parameters: serde_json::Value::Null,
        outputs: Vec::new(),
        wall_time_ms: 0.0,
    };
    let result = run(cli, &mut record);
    record.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    eprintln!("{}", serde_json::to_string(&record).unwrap());
    if let Err(failure) = result {
        if !failure.message.is_empty() {
            eprintln!("error: {}", failure.message);
        }
        std::process::exit(failure.code);
    }
}

fn run(cli: Cli, record: &mut RunRecord) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { path } => {
            record.command = "validate".into();
            let text = read_file(&path)?;
            record.input_digest = digest(text.as_bytes());
            let instance = load_instance(&text)?;
            let report = validate(&instance);
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            if report.mandatory_ok {
                Ok(())
            } else {
                Err(Failure::new(1, String::new()))
            }
        }
        Command::Solve { path, tol, method } => {
            record.command = "solve".into();
            let text = read_file(&path)?;
            record.input_digest = digest(text.as_bytes());
            let tol = default_tol(tol);
            record.parameters = serde_json::json!({ "tol": tol });
            let instance = load_instance(&text)?;
            let report = validate(&instance);
            if !report.mandatory_ok {
                return Err(Failure::new(1, "instance fails mandatory validation"));
            }
            let result = match method {
                Method::Vi => value_iterate(
                    &instance,
                    &CostVector::zeros(instance.n),
                    tol,
                    VI_MAX_ITER,
                )?,
                Method::Oracle => brute_force_solve(&instance, ENUMERATION_CAP)?,
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&result.to_file(&instance)).unwrap()
            );
            Ok(())
        }
        Command::Search {
            path,
            gamma,
            tol,
            trace,
            snapshots,
            fix_actions,
        } => {
            record.command = "search".into();
            if gamma < 1.0 {
                return Err(Failure::new(2, "--gamma must be at least 1"));
            }
            let text = read_file(&path)?;
            record.input_digest = digest(text.as_bytes());
            let tol = default_tol(tol);
            record.parameters = serde_json::json!({ "gamma": gamma, "tol": tol });
            let instance = load_instance(&text)?;
            if instance.k_hat.is_none() {
                return Err(Failure::new(4, Error::MissingInitialPolicy.to_string()));
            }
            let mut config = SearchConfig::new(gamma);
            config.tol = tol;
            config.fix_actions = fix_actions;
            config.record_snapshots = snapshots.is_some();
            let outcome = run_search(&instance, &config)?;
            if let Some(trace_path) = &trace {
                write_file(trace_path, &outcome.trace_csv())?;
                record.outputs.push(trace_path.display().to_string());
            }
            if let Some(dir) = &snapshots {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Failure::new(2, format!("cannot create {}: {e}", dir.display())))?;
                for snap in &outcome.snapshots {
                    let path = dir.join(format!("iteration_{:03}.csv", snap.iteration));
                    write_file(&path, &outcome.snapshot_csv(snap, None))?;
                    record.outputs.push(path.display().to_string());
                }
            }
            let upper = outcome.upper_total(&instance);
            let lower = outcome.lower_total(&instance);
            let summary = serde_json::json!({
                "gamma": gamma,
                "iterations": outcome.iterations,
                "states_expanded": outcome.in_s.iter().filter(|&&b| b).count(),
                "upper_total": upper,
                "lower_total": lower,
                "ratio": upper / lower,
            });
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
            Ok(())
        }
        Command::Convert {
            path,
            to,
            skeleton,
            out,
        } => {
            record.command = "convert".into();
            let text = read_file(&path)?;
            record.input_digest = digest(text.as_bytes());
            record.parameters = serde_json::json!({ "skeleton": skeleton });
            match to {
                Target::Ssp => {
                    let instance = load_instance(&text)?;
                    let instance = if instance.e_is_identity() {
                        instance
                    } else {
                        normalize_e(&instance)?.instance
                    };
                    if let Some(k_max) = skeleton {
                        let sk = expand_skeleton(&instance, k_max)?;
                        write_file(&out, &sk.ssp.to_json())?;
                        record.outputs.push(out.display().to_string());
                        let report = check_prop2_scaling(&sk, VI_TOL)?;
                        let summary = serde_json::json!({
                            "expanded": sk.expanded,
                            "k_max": sk.k_max,
                            "truncation_mass": sk.truncation_mass,
                            "eq4_residual": sk.eq4_residual,
                            "eq5_residual": sk.eq5_residual,
                            "scaling": report,
                        });
                        println!("{}", serde_json::to_string_pretty(&summary).unwrap());
                    } else {
                        let ssp = to_ssp(&instance).map_err(|e| match e {
                            Error::NotSubstochastic { .. } => Failure::new(
                                5,
                                format!("{e}; re-run with --skeleton <K_MAX> to expand"),
                            ),
                            other => Failure::from(other),
                        })?;
                        write_file(&out, &ssp.to_json())?;
                        record.outputs.push(out.display().to_string());
                    }
                    Ok(())
                }
                Target::Control => {
                    if skeleton.is_some() {
                        return Err(Failure::new(2, "--skeleton only applies to --to ssp"));
                    }
                    let ssp = SspInstance::from_json(&text).map_err(|e| match e {
                        Error::InvalidSsp(ref m) if m.contains("parse") || m.contains("expected") => {
                            Failure::new(2, e.to_string())
                        }
                        other => Failure::from(other),
                    })?;
                    let back = from_ssp(&ssp)?;
                    write_file(&out, &back.instance.to_json())?;
                    record.outputs.push(out.display().to_string());
                    Ok(())
                }
            }
        }
        Command::Gen {
            preset,
            seed,
            n,
            actions_per_state,
            density,
            unstable,
            identity_e,
            out,
        } => {
            record.command = "gen".into();
            let instance = match preset {
                Preset::Chemical => {
                    if n.is_some() || actions_per_state.is_some() || density.is_some() || unstable
                        || identity_e
                    {
                        return Err(Failure::new(
                            2,
                            "--preset chemical only accepts --seed and --out",
                        ));
                    }
                    record.parameters = serde_json::json!({ "preset": "chemical", "seed": seed });
                    chemical_plant(seed)
                }
                Preset::Random => {
                    let defaults = GenConfig::default();
                    let density = density.unwrap_or(defaults.density);
                    if !(density > 0.0 && density <= 1.0) {
                        return Err(Failure::new(2, "--density must be in (0, 1]"));
                    }
                    let config = GenConfig {
                        n: n.unwrap_or(defaults.n),
                        actions_per_state: actions_per_state
                            .unwrap_or(defaults.actions_per_state),
                        density,
                        seed,
                        stable_open_loop: !unstable,
                        identity_e,
                        ..defaults
                    };
                    record.parameters = serde_json::json!({
                        "preset": "random",
                        "seed": seed,
                        "n": config.n,
                        "actions_per_state": config.actions_per_state,
                        "density": config.density,
                        "stable_open_loop": config.stable_open_loop,
                        "identity_e": config.identity_e,
                    });
                    random_instance(&config)
                }
            };
            let text = instance.to_json();
            record.input_digest = digest(record.parameters.to_string().as_bytes());
            match out {
                Some(path) => {
                    write_file(&path, &text)?;
                    record.outputs.push(path.display().to_string());
                }
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}

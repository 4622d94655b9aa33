//! Command-line front end: synthesize, simulate, validate-embedding, gaps.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, GainsFile, Problem};
use crate::embedding::ExtendedChain;
use crate::lmi::{assemble, LmiStates};
use crate::sdpsolve::{SolveStatus, SolverRegistry};
use crate::sim::{self, ChainStart};
use crate::synth::{certify_with, extract_gains, SpectralRegistry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_UNCERTIFIED: i32 = 3;

/// Steps simulated by `validate-embedding` unless overridden.
pub const EMBEDDING_STEPS: usize = 200_000;
pub const EMBEDDING_TOLERANCE: f64 = 0.02;
pub const EMBEDDING_FLOOR: f64 = 0.01;
pub const EMBEDDING_MIN_VISITS: usize = 1000;

#[derive(Debug, Parser)]
#[command(name = "mjls", version, about = "Gain synthesis for Markov jump linear systems with randomized mode observations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the LMIs, extract gains and certify mean-square stability.
    Synthesize {
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte Carlo simulation of the closed loop with a gains file.
    Simulate {
        config: PathBuf,
        gains: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Compare simulated extended-state transitions with the analytic matrix.
    ValidateEmbedding {
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = EMBEDDING_STEPS)]
        steps: usize,
    },
    /// Empirical distribution of gaps between observation times.
    Gaps {
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100_000)]
        count: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Config(ConfigError),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synthesize { config, out_dir, seed } => synthesize(&config, &out_dir, seed),
        Command::Simulate {
            config,
            gains,
            out_dir,
            seed,
            paths,
            horizon,
        } => simulate(&config, &gains, &out_dir, seed, paths, horizon),
        Command::ValidateEmbedding {
            config,
            out_dir,
            seed,
            steps,
        } => validate_embedding(&config, &out_dir, seed, steps),
        Command::Gaps {
            config,
            out_dir,
            seed,
            count,
        } => gaps(&config, &out_dir, seed, count),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            EXIT_CONFIG
        }
        Err(Failure::Io(e)) => {
            eprintln!("i/o error: {e}");
            EXIT_CONFIG
        }
    }
}

fn load(path: &Path) -> Result<Problem, Failure> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
    Ok(Problem::from_json(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CertificateFile {
    config_hash: String,
    seed: u64,
    status: SolveStatus,
    margin: f64,
    solver: String,
    solver_iterations: usize,
    lmi_states: LmiStates,
    lmi_blocks: usize,
    lmi_variables: usize,
    spectral_radius: Option<f64>,
    stable: Option<bool>,
    operator_dim: Option<usize>,
    spectral_method: Option<String>,
    message: Option<String>,
}

fn synthesize(config: &Path, out_dir: &Path, seed: Option<u64>) -> Result<i32, Failure> {
    let problem = load(config)?;
    let seed = seed.unwrap_or(problem.config.sim.seed);
    let solvers = SolverRegistry::default();
    let solver = solvers
        .get(&problem.config.solver.method)
        .map_err(|e| ConfigError::new("solver.method", e))?;
    let spectral = SpectralRegistry::default();
    let method = spectral
        .get(&problem.config.certify.method)
        .map_err(|e| ConfigError::new("certify.method", e))?;
    fs::create_dir_all(out_dir)?;

    let chain = ExtendedChain::build(&problem.model, &problem.obs).map_err(|e| ConfigError::new("", e))?;
    let retained = problem.config.lmi_states.retained(&chain, &problem.obs);
    let lmi = assemble(&problem.model, &chain, retained.as_deref()).map_err(|e| ConfigError::new("", e))?;
    let solution = solver.solve(&lmi, &problem.config.solver.options());

    let mut log = BufWriter::new(File::create(out_dir.join("solver_log.txt"))?);
    writeln!(log, "# config_hash {} seed {seed}", problem.hash)?;
    writeln!(
        log,
        "# solver {} blocks {} variables {}",
        solver.name(),
        lmi.blocks.len(),
        lmi.num_vars()
    )?;
    writeln!(log, "iteration,barrier_weight,margin,decrement,step")?;
    for rec in &solution.history {
        writeln!(
            log,
            "{},{},{},{},{}",
            rec.iteration,
            sim::format_float(rec.barrier_weight),
            sim::format_float(rec.margin),
            sim::format_float(rec.decrement),
            sim::format_float(rec.step)
        )?;
    }
    writeln!(log, "# status {} verified_margin {}", solution.status, sim::format_float(solution.margin))?;
    log.flush()?;

    let mut cert = CertificateFile {
        config_hash: problem.hash.clone(),
        seed,
        status: solution.status,
        margin: solution.margin,
        solver: solver.name().to_string(),
        solver_iterations: solution.iterations,
        lmi_states: problem.config.lmi_states,
        lmi_blocks: lmi.blocks.len(),
        lmi_variables: lmi.num_vars(),
        spectral_radius: None,
        stable: None,
        operator_dim: None,
        spectral_method: None,
        message: None,
    };
    if !solution.is_feasible() {
        cert.message = Some(format!("no strictly feasible point found ({})", solution.status));
        write_json(&out_dir.join("certificate.json"), &cert)?;
        eprintln!("solver failed: {}", solution.status);
        return Ok(EXIT_SOLVER);
    }
    let gains = match extract_gains(&solution, &lmi) {
        Ok(g) => g,
        Err(e) => {
            cert.message = Some(e.to_string());
            write_json(&out_dir.join("certificate.json"), &cert)?;
            eprintln!("gain extraction failed: {e}");
            return Ok(EXIT_SOLVER);
        }
    };
    write_json(&out_dir.join("gains.json"), &GainsFile::from_schedule(&gains, &problem.hash, seed))?;
    let certificate = certify_with(method, &problem.model, &chain, &gains, None)
        .map_err(|e| ConfigError::new("", e))?;
    cert.spectral_radius = Some(certificate.spectral_radius);
    cert.stable = Some(certificate.stable);
    cert.operator_dim = Some(certificate.operator_dim);
    cert.spectral_method = Some(certificate.method.clone());
    if !certificate.stable {
        cert.message = Some("LMI solution did not certify: this indicates a bug".into());
    }
    write_json(&out_dir.join("certificate.json"), &cert)?;
    println!(
        "status {} margin {} gains {} spectral_radius {}",
        solution.status,
        sim::format_float(solution.margin),
        gains.len(),
        sim::format_float(certificate.spectral_radius)
    );
    if certificate.stable {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "BUG: feasible LMI solution yields spectral radius {} >= 1",
            certificate.spectral_radius
        );
        Ok(EXIT_UNCERTIFIED)
    }
}

fn simulate(
    config: &Path,
    gains_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    paths: Option<usize>,
    horizon: Option<usize>,
) -> Result<i32, Failure> {
    let problem = load(config)?;
    let text = fs::read_to_string(gains_path)
        .map_err(|e| ConfigError::new("", format!("{}: {e}", gains_path.display())))?;
    let file: GainsFile = serde_json::from_str(&text).map_err(|e| ConfigError::new("gains", e))?;
    let gains = file.to_schedule()?;
    let m = &problem.model;
    if gains.modes() != m.modes()
        || gains.clock() != problem.obs.clock()
        || gains.input_dim() != m.input_dim()
        || gains.state_dim() != m.state_dim()
    {
        return Err(ConfigError::new(
            "gains",
            format!(
                "schedule N={} T={} m={} n={} does not match config N={} T={} m={} n={}",
                gains.modes(),
                gains.clock(),
                gains.input_dim(),
                gains.state_dim(),
                m.modes(),
                problem.obs.clock(),
                m.input_dim(),
                m.state_dim()
            ),
        )
        .into());
    }
    let mut cfg = problem.sim_config()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = paths {
        if p == 0 {
            return Err(ConfigError::new("--paths", "must be positive").into());
        }
        cfg.num_paths = p;
    }
    if let Some(h) = horizon {
        cfg.horizon = h;
    }
    let result = sim::simulate_closed_loop(m, &problem.obs, &gains, &cfg).map_err(|e| ConfigError::new("sim", e))?;
    fs::create_dir_all(out_dir)?;
    sim::write_summary_csv(BufWriter::new(File::create(out_dir.join("summary.csv"))?), &result)?;
    sim::write_paths_csv(BufWriter::new(File::create(out_dir.join("paths.csv"))?), &result)?;
    let ratio = result.decay_ratio();
    write_json(
        &out_dir.join("simulation.json"),
        &json!({
            "config_hash": problem.hash,
            "gains_config_hash": file.config_hash,
            "seed": cfg.seed,
            "num_paths": cfg.num_paths,
            "horizon": cfg.horizon,
            "decay_ratio": ratio,
            "summary": "summary.csv",
            "paths": "paths.csv",
        }),
    )?;
    println!("decay_ratio {}", sim::format_float(ratio));
    Ok(EXIT_OK)
}

fn validate_embedding(config: &Path, out_dir: &Path, seed: Option<u64>, steps: usize) -> Result<i32, Failure> {
    let problem = load(config)?;
    let mut cfg = problem.sim_config()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.horizon = steps;
    let chain = ExtendedChain::build(&problem.model, &problem.obs).map_err(|e| ConfigError::new("", e))?;
    let report = sim::check_embedding_law(
        &problem.model,
        &problem.obs,
        &chain,
        &cfg,
        EMBEDDING_MIN_VISITS,
        EMBEDDING_FLOOR,
        EMBEDDING_TOLERANCE,
    )
    .map_err(|e| ConfigError::new("sim", e))?;
    fs::create_dir_all(out_dir)?;
    let doc = json!({
        "config_hash": problem.hash,
        "seed": cfg.seed,
        "extended_states": chain.size(),
        "report": report,
    });
    write_json(&out_dir.join("embedding_report.json"), &doc)?;
    println!(
        "max_abs_error {} over {} entries in {} rows; unexpected transitions {}; {}",
        sim::format_float(report.max_abs_error),
        report.entries_compared,
        report.rows_compared,
        report.unexpected_transitions,
        if report.pass { "pass" } else { "FAIL" }
    );
    Ok(if report.pass { EXIT_OK } else { EXIT_SOLVER })
}

fn gaps(config: &Path, out_dir: &Path, seed: Option<u64>, count: usize) -> Result<i32, Failure> {
    let problem = load(config)?;
    let cfg = problem.sim_config()?;
    let seed = seed.unwrap_or(cfg.seed);
    let start = match cfg.s0 {
        ChainStart::Fixed(s) => s,
        _ => problem.obs.observation_set()[0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = problem.obs.sample_gaps(start, count, &mut rng);
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for g in &sample {
        *hist.entry(*g).or_insert(0) += 1;
    }
    fs::create_dir_all(out_dir)?;
    let mut w = BufWriter::new(File::create(out_dir.join("gaps.csv"))?);
    writeln!(w, "gap,count,frequency")?;
    for (g, c) in &hist {
        let f = *c as f64 / count.max(1) as f64;
        writeln!(w, "{g},{c},{}", sim::format_float(f))?;
        println!("gap {g}: {}", sim::format_float(f));
    }
    w.flush()?;
    write_json(
        &out_dir.join("gaps.json"),
        &json!({"config_hash": problem.hash, "seed": seed, "count": count, "s0": start + 1}),
    )?;
    Ok(EXIT_OK)
}

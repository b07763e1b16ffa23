//! Command-line driver: simulate observational datasets, print oracle
//! tables, evaluate estimators on an existing dataset, and run replication
//! experiments. Exits 0 on success, 2 on configuration errors, and 1 on
//! runtime failures.

use clap::{Parser, Subcommand};
use cope::harness::{
    run_experiment, toy_policy, EnvironmentId, EvaluationConfig, ExperimentConfig,
};
use cope::model::{PolicySpec, TabularCmdpwm, TabularCmdpwmParts};
use cope::oracle::oracle_results;
use cope::sim::{
    build_comparison_env, build_toy_env, generate_dataset, read_dataset_csv, write_dataset_csv,
    SimConfig,
};
use cope::CopeError;
use serde::Deserialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cope",
    version,
    about = "Off-policy value estimation for confounded MDPs with mediators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw an observational dataset under the behavior policy, as CSV.
    Simulate {
        /// JSON file: {environment, n_trajectories, horizon, burn_in?, seed}.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the exact oracle tables of a tabular environment as JSON.
    Oracle {
        /// JSON file: {environment?, policy?, policy_rows?, spec?, gamma}.
        /// Either name the toy environment or give a full tabular spec with
        /// explicit policy rows.
        #[arg(long)]
        config: PathBuf,
        /// Output JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the requested estimators on an existing dataset, as JSON.
    Evaluate {
        /// JSON file: an evaluation config plus "data", the dataset CSV path.
        #[arg(long)]
        config: PathBuf,
        /// Output JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scenario seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a replication grid and write one CSV row per estimator run.
    Experiment {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path for the per-replication rows (stdout when
        /// omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the master seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Also print the per-cell aggregate table to stdout.
        #[arg(long)]
        summary: bool,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

/// Configuration problems exit with 2, everything else with 1.
fn classify(err: CopeError) -> Failure {
    match err {
        CopeError::InvalidConfig(msg) => Failure::Config(msg),
        other => Failure::Runtime(other.to_string()),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("parsing {}: {e}", path.display())))
}

fn write_output(out: Option<&PathBuf>, content: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, content)
            .map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display()))),
        None => {
            print!("{content}");
            std::io::stdout()
                .flush()
                .map_err(|e| Failure::Runtime(e.to_string()))
        }
    }
}

#[derive(Deserialize)]
struct SimulateFile {
    environment: EnvironmentId,
    n_trajectories: usize,
    horizon: usize,
    #[serde(default)]
    burn_in: usize,
    seed: u64,
}

fn run_simulate(config: &Path, out: Option<&PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let file: SimulateFile = load_json(config)?;
    let sim = SimConfig {
        n_trajectories: file.n_trajectories,
        horizon: file.horizon,
        burn_in: file.burn_in,
        seed: seed.unwrap_or(file.seed),
    };
    let mut buf = Vec::new();
    match file.environment {
        EnvironmentId::Toy => {
            let env = build_toy_env();
            let data = generate_dataset(&env, &sim).map_err(classify)?;
            write_dataset_csv(&data, &mut buf).map_err(classify)?;
        }
        EnvironmentId::Comparison { d_s } => {
            let env = build_comparison_env(d_s).map_err(classify)?;
            let data = generate_dataset(&env, &sim).map_err(classify)?;
            write_dataset_csv(&data, &mut buf).map_err(classify)?;
        }
    }
    let csv = String::from_utf8(buf).expect("dataset csv is ascii");
    write_output(out, &csv)
}

#[derive(Deserialize)]
struct OracleFile {
    #[serde(default)]
    environment: Option<EnvironmentId>,
    #[serde(default)]
    policy: Option<String>,
    /// Explicit target-policy rows, one pmf over actions per state.
    #[serde(default)]
    policy_rows: Option<Vec<Vec<f64>>>,
    /// Full tabular model, replacing the named environment.
    #[serde(default)]
    spec: Option<TabularCmdpwmParts>,
    gamma: f64,
}

fn run_oracle(config: &Path, out: Option<&PathBuf>) -> Result<(), Failure> {
    let file: OracleFile = load_json(config)?;
    let (model, pi): (TabularCmdpwm, PolicySpec<usize>) = match file.spec {
        Some(parts) => {
            let model =
                TabularCmdpwm::new(parts).map_err(|e| Failure::Config(format!("spec: {e}")))?;
            let rows = file.policy_rows.ok_or_else(|| {
                Failure::Config("a custom spec needs explicit policy_rows".into())
            })?;
            let pi =
                PolicySpec::tabular(rows).map_err(|e| Failure::Config(format!("policy: {e}")))?;
            (model, pi)
        }
        None => {
            match file.environment {
                Some(EnvironmentId::Toy) | None => {}
                Some(other) => {
                    return Err(Failure::Config(format!(
                        "oracle tables need a tabular environment, got {}",
                        other.label()
                    )))
                }
            }
            let model = build_toy_env().tabular_spec().clone();
            let pi = match file.policy_rows {
                Some(rows) => PolicySpec::tabular(rows)
                    .map_err(|e| Failure::Config(format!("policy: {e}")))?,
                None => toy_policy(file.policy.as_deref().unwrap_or("target")).map_err(classify)?,
            };
            (model, pi)
        }
    };
    let results = oracle_results(&model, &pi, file.gamma).map_err(classify)?;
    let mut json =
        serde_json::to_string_pretty(&results).map_err(|e| Failure::Runtime(e.to_string()))?;
    json.push('\n');
    write_output(out, &json)
}

#[derive(Deserialize)]
struct EvaluateFile {
    #[serde(flatten)]
    cfg: EvaluationConfig,
    /// Dataset CSV path.
    data: PathBuf,
}

fn run_evaluate(config: &Path, out: Option<&PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut file: EvaluateFile = load_json(config)?;
    if let Some(s) = seed {
        file.cfg.seed = s;
    }
    file.cfg.validate().map_err(classify)?;
    let reader = fs::File::open(&file.data)
        .map_err(|e| Failure::Runtime(format!("reading {}: {e}", file.data.display())))?;
    let estimates = match file.cfg.environment {
        EnvironmentId::Toy => {
            let data = read_dataset_csv::<usize, _>(reader).map_err(classify)?;
            cope::harness::evaluate_dataset_tabular(&data, &file.cfg).map_err(classify)?
        }
        EnvironmentId::Comparison { .. } => {
            let data = read_dataset_csv::<Vec<f64>, _>(reader).map_err(classify)?;
            cope::harness::evaluate_dataset_continuous(&data, &file.cfg).map_err(classify)?
        }
    };
    let mut json =
        serde_json::to_string_pretty(&estimates).map_err(|e| Failure::Runtime(e.to_string()))?;
    json.push('\n');
    write_output(out, &json)
}

fn run_experiment_cmd(
    config: &Path,
    out: Option<&PathBuf>,
    seed: Option<u64>,
    summary: bool,
) -> Result<(), Failure> {
    let mut cfg: ExperimentConfig = load_json(config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let output = run_experiment(&cfg).map_err(classify)?;
    write_output(out, &output.rows_csv())?;
    if summary {
        print!("{}", output.summary_csv());
        std::io::stdout()
            .flush()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, out, seed } => run_simulate(&config, out.as_ref(), seed),
        Command::Oracle { config, out } => run_oracle(&config, out.as_ref()),
        Command::Evaluate { config, out, seed } => run_evaluate(&config, out.as_ref(), seed),
        Command::Experiment {
            config,
            out,
            seed,
            summary,
        } => run_experiment_cmd(&config, out.as_ref(), seed, summary),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

//! Replication experiments over (N, T) grids: dataset generation, nuisance
//! misspecification scenarios, per-replication estimate rows, and aggregate
//! summaries, all with a fixed seed schedule so results are reproducible
//! byte-for-byte regardless of worker count.

use crate::error::{CopeError, Result};
use crate::estimate::{
    baseline_estimates_continuous, baseline_estimates_tabular, cope_estimate, mis_estimate,
    BaselineConfig, ValueEstimate,
};
use crate::features::{StateFeatures, StateKey};
use crate::model::{Dataset, PolicySpec, TabularCmdpwm};
use crate::nuisance::{
    estimate_nu_tabular, estimate_omega, estimate_pa_star_tabular, fit_nuisances_continuous,
    fit_nuisances_tabular, fitted_q_evaluation, CondPmf, FittedQConfig, InitialDistribution,
    NuisanceConfig, NuisanceSet, QFunction, RatioFunction,
};
use crate::oracle::{exact_omega, exact_value, oracle_nuisance_set};
use crate::seeding::{derive_seed, replication_seed};
use crate::sim::{
    build_comparison_env, build_toy_env, comparison_target_policy, generate_dataset,
    rollout_target_value, toy_target_policy, truncation_horizon, GenerativeEnv, SimConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Stream tag for the corruption draws of one replication. Tags below 2^32
/// are taken by per-trajectory streams, so corruption noise can never share
/// a stream with trajectory data.
const CORRUPTION_SEED_TAG: u64 = 1 << 40;

/// Stream tag for the Monte Carlo truth of a continuous environment.
const TRUTH_SEED_TAG: u64 = 2 << 40;

/// Zero-error replications contribute this floor, `log10(1e-300)`, to the
/// log-error aggregates and are counted in `n_floored`.
const LOG_ERROR_FLOOR: f64 = -300.0;

/// Reward scale assumed when sizing the rollout horizon for environments
/// without a hard reward bound.
const TRUTH_R_SCALE: f64 = 10.0;

const METHOD_TAGS: [&str; 8] = [
    "COPE", "COPE-IS", "REG", "MIS", "DRL", "REG-M", "MIS-M", "DRL-M",
];

/// Which benchmark environment an experiment runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvironmentId {
    Toy,
    Comparison { d_s: usize },
}

impl EnvironmentId {
    pub fn label(&self) -> String {
        match self {
            EnvironmentId::Toy => "toy".into(),
            EnvironmentId::Comparison { d_s } => format!("comparison-d{d_s}"),
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, EnvironmentId::Toy)
    }
}

/// How the nuisances handed to the mediated estimator are produced. The
/// corrupt scenarios start from the oracle nuisances and damage one model
/// class on purpose, which is how the double-robustness claims are probed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Every nuisance is fitted from the replication's dataset.
    #[default]
    None,
    /// Every nuisance is replaced by its exact oracle counterpart.
    OracleNuisances,
    /// Oracle mediator model; everything else fitted from data.
    OraclePm,
    /// Oracle nuisances with the Q table and behavior-policy marginal
    /// damaged: N(0,1) noise on each Q entry and independent U(0.75, 1)
    /// factors on each p_a* entry (rows are deliberately left unnormalized).
    /// The ratio nuisance stays correct.
    CorruptM1,
    /// Oracle nuisances with the stationary ratio shifted by +0.5 on even
    /// states and -0.5 on odd states. The Q-side nuisances stay correct.
    CorruptM2,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::None => "none",
            Scenario::OracleNuisances => "oracle-nuisances",
            Scenario::OraclePm => "oracle-pm",
            Scenario::CorruptM1 => "corrupt-m1",
            Scenario::CorruptM2 => "corrupt-m2",
        };
        f.write_str(s)
    }
}

fn default_policy() -> String {
    "target".into()
}

fn default_alpha() -> f64 {
    0.05
}

fn default_truth_rollouts() -> usize {
    1_000_000
}

/// Full description of one replication experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: EnvironmentId,
    /// Target policy: "target" (the benchmark's evaluation policy) or
    /// "uniform".
    #[serde(default = "default_policy")]
    pub policy: String,
    pub gamma: f64,
    /// Trajectory counts to sweep.
    pub n_grid: Vec<usize>,
    /// Horizons to sweep.
    pub t_grid: Vec<usize>,
    pub n_replications: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Estimators to run, from: COPE, COPE-IS, REG, MIS, DRL, REG-M, MIS-M,
    /// DRL-M.
    pub methods: Vec<String>,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    /// Behavior-policy steps discarded before each trajectory starts.
    #[serde(default)]
    pub burn_in: usize,
    pub master_seed: u64,
    /// Worker threads. `None` falls back to the COPE_WORKERS environment
    /// variable, then to one worker per available core.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Rollouts behind the cached Monte Carlo truth of a continuous
    /// environment (tabular truths are exact and ignore this).
    #[serde(default = "default_truth_rollouts")]
    pub truth_rollouts: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CopeError::InvalidConfig(format!(
                "discount must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CopeError::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.n_grid.is_empty() || self.t_grid.is_empty() {
            return Err(CopeError::InvalidConfig(
                "n_grid and t_grid must be nonempty".into(),
            ));
        }
        if self.n_grid.contains(&0) || self.t_grid.contains(&0) {
            return Err(CopeError::InvalidConfig(
                "grid entries must be positive".into(),
            ));
        }
        if self.n_replications == 0 {
            return Err(CopeError::InvalidConfig(
                "n_replications must be positive".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(CopeError::InvalidConfig("methods must be nonempty".into()));
        }
        for m in &self.methods {
            if !METHOD_TAGS.contains(&m.as_str()) {
                return Err(CopeError::InvalidConfig(format!(
                    "unknown method {m:?}; expected one of {METHOD_TAGS:?}"
                )));
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(CopeError::InvalidConfig(format!("duplicate method {m:?}")));
            }
        }
        if !matches!(self.policy.as_str(), "target" | "uniform") {
            return Err(CopeError::InvalidConfig(format!(
                "unknown policy {:?}; expected \"target\" or \"uniform\"",
                self.policy
            )));
        }
        if self.scenario != Scenario::None && !self.environment.is_tabular() {
            return Err(CopeError::InvalidConfig(format!(
                "scenario {} needs a tabular environment",
                self.scenario
            )));
        }
        if let EnvironmentId::Comparison { d_s } = self.environment {
            if d_s == 0 {
                return Err(CopeError::InvalidConfig(
                    "comparison environment needs a positive state dimension".into(),
                ));
            }
            if self.truth_rollouts < 2 {
                return Err(CopeError::InvalidConfig(
                    "truth_rollouts must be at least 2".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One estimator run on one replication. `wall_ms` includes any shared model
/// fitting the row triggered; it is kept out of the CSV so reruns of the same
/// configuration stay byte-identical.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub env: String,
    pub scenario: String,
    pub n: usize,
    pub t: usize,
    pub rep: usize,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub truth: f64,
    /// 1 when `ci_lo <= truth <= ci_hi`.
    pub covered: u8,
    pub wall_ms: f64,
    /// "ok", or the error message of a failed replication.
    pub status: String,
}

struct RowMeta<'a> {
    env: &'a str,
    scenario: &'a str,
    n: usize,
    t: usize,
    rep: usize,
    truth: f64,
}

fn ms_since(started: Instant) -> f64 {
    started.elapsed().as_secs_f64() * 1e3
}

impl ResultRow {
    fn ok(method: &str, meta: &RowMeta<'_>, est: &ValueEstimate, wall_ms: f64) -> Self {
        let covered = u8::from(est.ci_lower <= meta.truth && meta.truth <= est.ci_upper);
        ResultRow {
            method: method.into(),
            env: meta.env.into(),
            scenario: meta.scenario.into(),
            n: meta.n,
            t: meta.t,
            rep: meta.rep,
            estimate: est.estimate,
            se: est.se,
            ci_lo: est.ci_lower,
            ci_hi: est.ci_upper,
            truth: meta.truth,
            covered,
            wall_ms,
            status: "ok".into(),
        }
    }

    fn failed(method: &str, meta: &RowMeta<'_>, message: &str, wall_ms: f64) -> Self {
        ResultRow {
            method: method.into(),
            env: meta.env.into(),
            scenario: meta.scenario.into(),
            n: meta.n,
            t: meta.t,
            rep: meta.rep,
            estimate: f64::NAN,
            se: f64::NAN,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
            truth: meta.truth,
            covered: 0,
            wall_ms,
            status: message.replace(',', ";").replace('\n', " "),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn csv_header() -> &'static str {
        "method,env,scenario,N,T,rep,estimate,se,ci_lo,ci_hi,truth,covered,status"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.env,
            self.scenario,
            self.n,
            self.t,
            self.rep,
            self.estimate,
            self.se,
            self.ci_lo,
            self.ci_hi,
            self.truth,
            self.covered,
            self.status
        )
    }
}

/// Log-scale error aggregates over the successful replications of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogMetrics {
    /// Mean of `log10 |estimate - truth|`.
    pub log_bias: f64,
    pub log_bias_sd: f64,
    /// Mean of `log10 (estimate - truth)^2`.
    pub log_mse: f64,
    pub log_mse_sd: f64,
    /// Replications whose error hit the `log10(1e-300)` floor.
    pub n_floored: usize,
}

/// Per-replication log errors, floored (and flagged) at `log10(1e-300)` when
/// an estimate matches the truth exactly.
pub fn log_metrics(estimates: &[f64], truth: f64) -> LogMetrics {
    let mut log_abs = Vec::with_capacity(estimates.len());
    let mut n_floored = 0;
    for &e in estimates {
        let err = (e - truth).abs();
        if err > 0.0 && err.is_finite() {
            log_abs.push(err.log10());
        } else {
            log_abs.push(LOG_ERROR_FLOOR);
            n_floored += 1;
        }
    }
    let log_sq: Vec<f64> = log_abs.iter().map(|l| 2.0 * l).collect();
    LogMetrics {
        log_bias: crate::math::mean(&log_abs),
        log_bias_sd: crate::math::sample_sd(&log_abs),
        log_mse: crate::math::mean(&log_sq),
        log_mse_sd: crate::math::sample_sd(&log_sq),
        n_floored,
    }
}

/// Empirical coverage and its binomial standard error `sqrt(p(1-p)/n)`.
pub fn coverage(covered: &[bool]) -> (f64, f64) {
    if covered.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = covered.len() as f64;
    let p = covered.iter().filter(|&&c| c).count() as f64 / n;
    (p, (p * (1.0 - p) / n).sqrt())
}

/// Aggregates for one (method, N, T) cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub env: String,
    pub scenario: String,
    pub n: usize,
    pub t: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub log_bias: f64,
    pub log_bias_sd: f64,
    pub log_mse: f64,
    pub log_mse_sd: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub n_floored: usize,
    pub truth: f64,
    /// Monte Carlo standard error of `truth`; zero when the truth is exact.
    pub truth_se: f64,
}

impl SummaryRow {
    pub fn csv_header() -> &'static str {
        "method,env,scenario,N,T,n_ok,n_failed,log_bias,log_bias_sd,log_mse,log_mse_sd,coverage,coverage_se,n_floored,truth,truth_se"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.env,
            self.scenario,
            self.n,
            self.t,
            self.n_ok,
            self.n_failed,
            self.log_bias,
            self.log_bias_sd,
            self.log_mse,
            self.log_mse_sd,
            self.coverage,
            self.coverage_se,
            self.n_floored,
            self.truth,
            self.truth_se
        )
    }
}

/// Everything one experiment produces: the per-replication rows in grid
/// order, their per-cell aggregates, and the truth they were scored against.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub truth: f64,
    pub truth_se: f64,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutput {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from(ResultRow::csv_header());
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SummaryRow::csv_header());
        out.push('\n');
        for row in &self.summary {
            out.push_str(&row.csv_row());
            out.push('\n');
        }
        out
    }
}

fn resolve_workers(cfg: &ExperimentConfig) -> Result<usize> {
    if let Some(w) = cfg.workers {
        return Ok(w);
    }
    match std::env::var("COPE_WORKERS") {
        Ok(raw) => raw.parse().map_err(|_| {
            CopeError::InvalidConfig(format!("COPE_WORKERS must be an integer, got {raw:?}"))
        }),
        Err(_) => Ok(0),
    }
}

/// Runs the full replication grid described by `cfg`.
///
/// Seed schedule, so any row can be regenerated in isolation:
/// - dataset of replication `rep` at cell `(N, T)`: seed
///   `replication_seed(master_seed, N, T, rep)`, trajectory `i` drawn from
///   `trajectory_rng(seed, i)`;
/// - corruption draws of that replication: ChaCha12 seeded with
///   `derive_seed(replication_seed, 1 << 40)`, consumed as Q noise in table
///   order followed by p_a* factors in (state, action) order;
/// - Monte Carlo truth of a continuous environment:
///   `derive_seed(master_seed, 2 << 40)`.
///
/// Replications run in parallel but are collected in grid order, so the
/// output is identical for any worker count. A failed replication becomes a
/// row with NaN estimates and the error message in `status`; it never aborts
/// the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg.environment {
        EnvironmentId::Toy => run_tabular_experiment(cfg),
        EnvironmentId::Comparison { d_s } => run_continuous_experiment(cfg, d_s),
    }
}

fn grid_tasks(cfg: &ExperimentConfig) -> Vec<(usize, usize, usize)> {
    let mut tasks = Vec::new();
    for &n in &cfg.n_grid {
        for &t in &cfg.t_grid {
            for rep in 0..cfg.n_replications {
                tasks.push((n, t, rep));
            }
        }
    }
    tasks
}

fn run_grid<E, FitN, FitB>(
    cfg: &ExperimentConfig,
    env: &E,
    pi: &PolicySpec<E::State>,
    truth: f64,
    truth_se: f64,
    fit_nuisances: FitN,
    fit_baselines: FitB,
) -> Result<ExperimentOutput>
where
    E: GenerativeEnv + Sync,
    E::State: StateKey + Send + Sync,
    FitN: Fn(&Dataset<E::State>, u64) -> Result<NuisanceSet<E::State>> + Sync,
    FitB: Fn(&Dataset<E::State>, bool) -> Result<Vec<ValueEstimate>> + Sync,
{
    let workers = resolve_workers(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CopeError::InvalidConfig(format!("worker pool: {e}")))?;
    let tasks = grid_tasks(cfg);
    let per_task: Vec<Vec<ResultRow>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(n, t, rep)| {
                run_replication(
                    cfg,
                    env,
                    pi,
                    n,
                    t,
                    rep,
                    truth,
                    &fit_nuisances,
                    &fit_baselines,
                )
            })
            .collect()
    });
    let rows: Vec<ResultRow> = per_task.into_iter().flatten().collect();
    let summary = summarize(cfg, &rows, truth, truth_se);
    Ok(ExperimentOutput {
        truth,
        truth_se,
        rows,
        summary,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_replication<E, FitN, FitB>(
    cfg: &ExperimentConfig,
    env: &E,
    pi: &PolicySpec<E::State>,
    n: usize,
    t: usize,
    rep: usize,
    truth: f64,
    fit_nuisances: &FitN,
    fit_baselines: &FitB,
) -> Vec<ResultRow>
where
    E: GenerativeEnv,
    E::State: StateKey,
    FitN: Fn(&Dataset<E::State>, u64) -> Result<NuisanceSet<E::State>>,
    FitB: Fn(&Dataset<E::State>, bool) -> Result<Vec<ValueEstimate>>,
{
    let env_label = cfg.environment.label();
    let scenario_label = cfg.scenario.to_string();
    let meta = RowMeta {
        env: &env_label,
        scenario: &scenario_label,
        n,
        t,
        rep,
        truth,
    };
    let seed = replication_seed(cfg.master_seed, n, t, rep);
    let sim = SimConfig {
        n_trajectories: n,
        horizon: t,
        burn_in: cfg.burn_in,
        seed,
    };
    let started = Instant::now();
    let data = match generate_dataset(env, &sim) {
        Ok(d) => d,
        Err(e) => {
            let msg = e.to_string();
            let wall_ms = ms_since(started);
            return cfg
                .methods
                .iter()
                .map(|m| ResultRow::failed(m, &meta, &msg, wall_ms))
                .collect();
        }
    };

    compute_methods(
        &data,
        pi,
        cfg.gamma,
        cfg.alpha,
        &cfg.methods,
        |d| fit_nuisances(d, seed),
        fit_baselines,
    )
    .into_iter()
    .map(|m| match m.outcome {
        Ok(est) => ResultRow::ok(&m.method, &meta, &est, m.wall_ms),
        Err(msg) => ResultRow::failed(&m.method, &meta, &msg, m.wall_ms),
    })
    .collect()
}

struct MethodOutcome {
    method: String,
    outcome: std::result::Result<ValueEstimate, String>,
    wall_ms: f64,
}

/// Runs the requested estimators on one dataset, fitting the mediated
/// nuisances and the baseline models at most once each.
fn compute_methods<S, FitN, FitB>(
    data: &Dataset<S>,
    pi: &PolicySpec<S>,
    gamma: f64,
    alpha: f64,
    methods: &[String],
    fit_nuisances: FitN,
    fit_baselines: FitB,
) -> Vec<MethodOutcome>
where
    S: StateKey,
    FitN: Fn(&Dataset<S>) -> Result<NuisanceSet<S>>,
    FitB: Fn(&Dataset<S>, bool) -> Result<Vec<ValueEstimate>>,
{
    let wants_mediator_variants = methods.iter().any(|m| m.ends_with("-M"));
    let mut nuisances: Option<std::result::Result<NuisanceSet<S>, String>> = None;
    let mut baselines: Option<std::result::Result<Vec<ValueEstimate>, String>> = None;
    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let started = Instant::now();
        let outcome: std::result::Result<ValueEstimate, String> = match method.as_str() {
            "COPE" | "COPE-IS" => {
                let fitted =
                    nuisances.get_or_insert_with(|| fit_nuisances(data).map_err(|e| e.to_string()));
                match fitted {
                    Ok(ns) => {
                        let est = if method == "COPE" {
                            cope_estimate(data, ns, pi, gamma, alpha)
                        } else {
                            mis_estimate(data, &ns.omega, &ns.pm, pi, gamma, alpha)
                        };
                        est.map_err(|e| e.to_string())
                    }
                    Err(msg) => Err(msg.clone()),
                }
            }
            tag => {
                let fitted = baselines.get_or_insert_with(|| {
                    fit_baselines(data, wants_mediator_variants).map_err(|e| e.to_string())
                });
                match fitted {
                    Ok(list) => list
                        .iter()
                        .find(|v| v.method == tag)
                        .cloned()
                        .ok_or_else(|| format!("baseline {tag} was not produced")),
                    Err(msg) => Err(msg.clone()),
                }
            }
        };
        out.push(MethodOutcome {
            method: method.clone(),
            outcome,
            wall_ms: ms_since(started),
        });
    }
    out
}

fn summarize(
    cfg: &ExperimentConfig,
    rows: &[ResultRow],
    truth: f64,
    truth_se: f64,
) -> Vec<SummaryRow> {
    let env_label = cfg.environment.label();
    let scenario_label = cfg.scenario.to_string();
    let mut out = Vec::new();
    for method in &cfg.methods {
        for &n in &cfg.n_grid {
            for &t in &cfg.t_grid {
                let cell: Vec<&ResultRow> = rows
                    .iter()
                    .filter(|r| r.method == *method && r.n == n && r.t == t)
                    .collect();
                let ok: Vec<&&ResultRow> = cell.iter().filter(|r| r.is_ok()).collect();
                let estimates: Vec<f64> = ok.iter().map(|r| r.estimate).collect();
                let flags: Vec<bool> = ok.iter().map(|r| r.covered == 1).collect();
                let lm = log_metrics(&estimates, truth);
                let (cov, cov_se) = coverage(&flags);
                out.push(SummaryRow {
                    method: method.clone(),
                    env: env_label.clone(),
                    scenario: scenario_label.clone(),
                    n,
                    t,
                    n_ok: ok.len(),
                    n_failed: cell.len() - ok.len(),
                    log_bias: lm.log_bias,
                    log_bias_sd: lm.log_bias_sd,
                    log_mse: lm.log_mse,
                    log_mse_sd: lm.log_mse_sd,
                    coverage: cov,
                    coverage_se: cov_se,
                    n_floored: lm.n_floored,
                    truth,
                    truth_se,
                });
            }
        }
    }
    out
}

/// Resolves a named target policy for the toy environment.
pub fn toy_policy(id: &str) -> Result<PolicySpec<usize>> {
    match id {
        "target" => Ok(toy_target_policy()),
        "uniform" => PolicySpec::tabular(vec![vec![1.0 / 3.0; 3]; 2]),
        other => Err(CopeError::InvalidConfig(format!(
            "unknown policy {other:?}; expected \"target\" or \"uniform\""
        ))),
    }
}

/// Resolves a named target policy for the comparison environment.
pub fn comparison_policy(id: &str) -> Result<PolicySpec<Vec<f64>>> {
    match id {
        "target" => Ok(comparison_target_policy()),
        "uniform" => Ok(PolicySpec::from_fn(2, |_: &Vec<f64>| vec![0.5, 0.5])),
        other => Err(CopeError::InvalidConfig(format!(
            "unknown policy {other:?}; expected \"target\" or \"uniform\""
        ))),
    }
}

fn run_tabular_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let env = build_toy_env();
    let spec = env.tabular_spec().clone();
    let pi = toy_policy(&cfg.policy)?;
    let truth = exact_value(&spec, &pi, cfg.gamma)?;
    let fit_nuisances = |data: &Dataset<usize>, rep_seed: u64| {
        scenario_nuisances(
            cfg.scenario,
            cfg.gamma,
            &cfg.nuisance,
            &spec,
            data,
            &pi,
            rep_seed,
        )
    };
    let fit_baselines = |data: &Dataset<usize>, with_m: bool| {
        let bcfg = BaselineConfig {
            with_mediator_in_state: with_m,
            nuisance: cfg.nuisance,
        };
        baseline_estimates_tabular(
            data,
            &pi,
            spec.n_states(),
            spec.n_actions(),
            spec.n_mediators(),
            cfg.gamma,
            cfg.alpha,
            &bcfg,
        )
    };
    run_grid(cfg, &env, &pi, truth, 0.0, fit_nuisances, fit_baselines)
}

fn run_continuous_experiment(cfg: &ExperimentConfig, d_s: usize) -> Result<ExperimentOutput> {
    let env = build_comparison_env(d_s)?;
    let pi = comparison_policy(&cfg.policy)?;
    let horizon = truncation_horizon(cfg.gamma, TRUTH_R_SCALE, 1e-8);
    let truth_seed = derive_seed(cfg.master_seed, TRUTH_SEED_TAG);
    let rollout = rollout_target_value(
        &env,
        &pi,
        cfg.gamma,
        cfg.truth_rollouts,
        horizon,
        truth_seed,
    )?;
    let n_actions = 2;
    let n_mediators = 2;
    let fit_nuisances = |data: &Dataset<Vec<f64>>, _rep_seed: u64| {
        fit_nuisances_continuous(data, &pi, n_actions, n_mediators, cfg.gamma, &cfg.nuisance)
    };
    let fit_baselines = |data: &Dataset<Vec<f64>>, with_m: bool| {
        let bcfg = BaselineConfig {
            with_mediator_in_state: with_m,
            nuisance: cfg.nuisance,
        };
        baseline_estimates_continuous(
            data,
            &pi,
            n_actions,
            n_mediators,
            cfg.gamma,
            cfg.alpha,
            &bcfg,
        )
    };
    run_grid(
        cfg,
        &env,
        &pi,
        rollout.value,
        rollout.mc_se,
        fit_nuisances,
        fit_baselines,
    )
}

/// Oracle mediator table `p_m(. | a, s)` wrapped for estimation use.
fn oracle_pm(spec: &TabularCmdpwm, eps_clip: f64) -> Result<CondPmf> {
    let table: Vec<Vec<Vec<f64>>> = (0..spec.n_actions())
        .map(|a| {
            (0..spec.n_states())
                .map(|s| (0..spec.n_mediators()).map(|m| spec.p_m(m, a, s)).collect())
                .collect()
        })
        .collect();
    CondPmf::from_action_state_table(table, eps_clip)
}

/// Builds the mediated estimator's nuisances for one replication under the
/// given scenario.
fn scenario_nuisances(
    scenario: Scenario,
    gamma: f64,
    ncfg: &NuisanceConfig,
    spec: &TabularCmdpwm,
    data: &Dataset<usize>,
    pi: &PolicySpec<usize>,
    rep_seed: u64,
) -> Result<NuisanceSet<usize>> {
    let (n_s, n_a, n_m) = (spec.n_states(), spec.n_actions(), spec.n_mediators());
    match scenario {
        Scenario::None => fit_nuisances_tabular(data, pi, n_s, n_a, n_m, gamma, ncfg),
        Scenario::OracleNuisances => oracle_nuisance_set(spec, pi, gamma, spec.nu()),
        Scenario::OraclePm => {
            let pm = oracle_pm(spec, ncfg.eps_clip)?;
            let pa_star = estimate_pa_star_tabular(data, n_s, n_a, ncfg)?;
            let features = StateFeatures::Indicator { n_states: n_s };
            let q = fitted_q_evaluation(
                data,
                pi,
                Some((&pm, &pa_star)),
                gamma,
                n_m,
                n_a,
                &features,
                &FittedQConfig::from(ncfg),
            )?;
            let nu = InitialDistribution::Tabular(estimate_nu_tabular(data, n_s)?);
            let omega = estimate_omega(data, pi, &pm, &nu, gamma, &features, ncfg.omega_ridge)?;
            Ok(NuisanceSet {
                q,
                omega,
                pa_star,
                pm,
                nu,
            })
        }
        Scenario::CorruptM1 => {
            let mut nuis = oracle_nuisance_set(spec, pi, gamma, spec.nu())?;
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(rep_seed, CORRUPTION_SEED_TAG));
            let mut q_table = nuis.q.table().expect("oracle Q is tabular").to_vec();
            for v in &mut q_table {
                *v += rng.sample::<f64, _>(StandardNormal);
            }
            nuis.q = QFunction::from_table(q_table, n_m, n_a, n_s)?;
            let mut pa_rows: Vec<Vec<f64>> = (0..n_s)
                .map(|s| spec.marginal_behavior_policy(s))
                .collect::<Result<_>>()?;
            for row in &mut pa_rows {
                for p in row.iter_mut() {
                    *p *= rng.gen_range(0.75..1.0);
                }
            }
            nuis.pa_star = CondPmf::from_state_table(pa_rows, ncfg.eps_clip)?;
            Ok(nuis)
        }
        Scenario::CorruptM2 => {
            let mut nuis = oracle_nuisance_set(spec, pi, gamma, spec.nu())?;
            let omega = exact_omega(spec, pi, gamma, spec.nu())?;
            let shifted: Vec<f64> = omega
                .iter()
                .enumerate()
                .map(|(s, &w)| if s % 2 == 0 { w + 0.5 } else { w - 0.5 })
                .collect();
            nuis.omega = RatioFunction::from_indicator_weights(shifted)?;
            Ok(nuis)
        }
    }
}

/// One-shot evaluation of an existing dataset, as driven by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub environment: EnvironmentId,
    #[serde(default = "default_policy")]
    pub policy: String,
    pub gamma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub methods: Vec<String>,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    /// Seed behind any corruption draws the scenario needs.
    #[serde(default)]
    pub seed: u64,
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CopeError::InvalidConfig(format!(
                "discount must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CopeError::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.methods.is_empty() {
            return Err(CopeError::InvalidConfig("methods must be nonempty".into()));
        }
        for m in &self.methods {
            if !METHOD_TAGS.contains(&m.as_str()) {
                return Err(CopeError::InvalidConfig(format!(
                    "unknown method {m:?}; expected one of {METHOD_TAGS:?}"
                )));
            }
        }
        if !matches!(self.policy.as_str(), "target" | "uniform") {
            return Err(CopeError::InvalidConfig(format!(
                "unknown policy {:?}; expected \"target\" or \"uniform\"",
                self.policy
            )));
        }
        if self.scenario != Scenario::None && !self.environment.is_tabular() {
            return Err(CopeError::InvalidConfig(format!(
                "scenario {} needs a tabular environment",
                self.scenario
            )));
        }
        Ok(())
    }
}

fn collect_outcomes(outcomes: Vec<MethodOutcome>) -> Result<Vec<ValueEstimate>> {
    outcomes
        .into_iter()
        .map(|m| {
            m.outcome
                .map_err(|msg| CopeError::InvalidArgument(format!("method {}: {msg}", m.method)))
        })
        .collect()
}

/// Runs the configured estimators on a toy-environment dataset. Unlike
/// [`run_experiment`], a failing estimator is reported as an error.
pub fn evaluate_dataset_tabular(
    data: &Dataset<usize>,
    cfg: &EvaluationConfig,
) -> Result<Vec<ValueEstimate>> {
    cfg.validate()?;
    if !cfg.environment.is_tabular() {
        return Err(CopeError::InvalidConfig(
            "a tabular dataset needs the toy environment".into(),
        ));
    }
    let env = build_toy_env();
    let spec = env.tabular_spec();
    data.validate_tabular(spec.n_states(), spec.n_actions(), spec.n_mediators())?;
    let pi = toy_policy(&cfg.policy)?;
    let outcomes = compute_methods(
        data,
        &pi,
        cfg.gamma,
        cfg.alpha,
        &cfg.methods,
        |d| {
            scenario_nuisances(
                cfg.scenario,
                cfg.gamma,
                &cfg.nuisance,
                spec,
                d,
                &pi,
                cfg.seed,
            )
        },
        |d, with_m| {
            let bcfg = BaselineConfig {
                with_mediator_in_state: with_m,
                nuisance: cfg.nuisance,
            };
            baseline_estimates_tabular(
                d,
                &pi,
                spec.n_states(),
                spec.n_actions(),
                spec.n_mediators(),
                cfg.gamma,
                cfg.alpha,
                &bcfg,
            )
        },
    );
    collect_outcomes(outcomes)
}

/// Runs the configured estimators on a comparison-environment dataset.
pub fn evaluate_dataset_continuous(
    data: &Dataset<Vec<f64>>,
    cfg: &EvaluationConfig,
) -> Result<Vec<ValueEstimate>> {
    cfg.validate()?;
    let d_s = match cfg.environment {
        EnvironmentId::Comparison { d_s } => d_s,
        EnvironmentId::Toy => {
            return Err(CopeError::InvalidConfig(
                "a continuous dataset needs the comparison environment".into(),
            ))
        }
    };
    if let Some(first) = data.trajectories().first() {
        let dim = first.initial_state().len();
        if dim != d_s {
            return Err(CopeError::InvalidArgument(format!(
                "dataset states have {dim} coordinates, the environment expects {d_s}"
            )));
        }
    }
    let pi = comparison_policy(&cfg.policy)?;
    let (n_actions, n_mediators) = (2, 2);
    let outcomes = compute_methods(
        data,
        &pi,
        cfg.gamma,
        cfg.alpha,
        &cfg.methods,
        |d| fit_nuisances_continuous(d, &pi, n_actions, n_mediators, cfg.gamma, &cfg.nuisance),
        |d, with_m| {
            let bcfg = BaselineConfig {
                with_mediator_in_state: with_m,
                nuisance: cfg.nuisance,
            };
            baseline_estimates_continuous(
                d,
                &pi,
                n_actions,
                n_mediators,
                cfg.gamma,
                cfg.alpha,
                &bcfg,
            )
        },
    );
    collect_outcomes(outcomes)
}

//! Estimation of the nuisance functions the value estimator is built from:
//! the state-marginal behavior policy, the mediator law, the mediated
//! Q-function, the marginal density ratio, and the empirical initial
//! distribution.
//!
//! Tabular datasets use Laplace-smoothed counting and exact per-cell least
//! squares; continuous datasets use multinomial logistic regression and
//! ridge regression on shared random Fourier features. All estimators fit
//! and evaluate on the same dataset (no cross-fitting).
//!
//! Estimated probabilities are stored raw, so rows sum to one and exact
//! summation identities hold; the `clipped_*` accessors apply the floor
//! `eps_clip` and are what every denominator goes through.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CopeError, Result};
use crate::features::{
    fit_fourier_map, logit_fit, LinearModel, RidgeSolver, StateFeatures, StateKey,
};
use crate::model::{Dataset, PolicySpec};

fn default_eps_clip() -> f64 {
    1e-3
}
fn default_alpha() -> f64 {
    0.5
}
fn default_ridge() -> f64 {
    1e-3
}
fn default_omega_ridge() -> f64 {
    1e-6
}
fn default_n_features() -> usize {
    100
}
fn default_q_max_iter() -> usize {
    500
}
fn default_q_tol() -> f64 {
    1e-6
}
fn default_logit_max_iter() -> usize {
    500
}
fn default_logit_tol() -> f64 {
    1e-8
}
fn default_seed() -> u64 {
    0
}

/// Knobs shared by all nuisance fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    /// Floor applied to estimated probabilities wherever they divide.
    #[serde(default = "default_eps_clip")]
    pub eps_clip: f64,
    /// Laplace smoothing pseudo-count for tabular frequency tables.
    #[serde(default = "default_alpha")]
    pub laplace_alpha: f64,
    /// Ridge penalty for Q regressions and logistic fits.
    #[serde(default = "default_ridge")]
    pub ridge_lambda: f64,
    /// Ridge added to the density-ratio linear system.
    #[serde(default = "default_omega_ridge")]
    pub omega_ridge: f64,
    /// Number of random Fourier features in continuous mode.
    #[serde(default = "default_n_features")]
    pub n_features: usize,
    #[serde(default = "default_q_max_iter")]
    pub q_max_iter: usize,
    #[serde(default = "default_q_tol")]
    pub q_tol: f64,
    #[serde(default = "default_logit_max_iter")]
    pub logit_max_iter: usize,
    #[serde(default = "default_logit_tol")]
    pub logit_tol: f64,
    /// Seed for drawing the Fourier feature map.
    #[serde(default = "default_seed")]
    pub feature_seed: u64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            eps_clip: default_eps_clip(),
            laplace_alpha: default_alpha(),
            ridge_lambda: default_ridge(),
            omega_ridge: default_omega_ridge(),
            n_features: default_n_features(),
            q_max_iter: default_q_max_iter(),
            q_tol: default_q_tol(),
            logit_max_iter: default_logit_max_iter(),
            logit_tol: default_logit_tol(),
            feature_seed: default_seed(),
        }
    }
}

/// A conditional pmf over a finite outcome set, conditioned on either a
/// state or an (action, state) pair. Backed by a count-derived table or by
/// multinomial logistic models on state features.
///
/// Raw accessors return stored probabilities (rows of fitted tables sum to
/// one); `clipped_*` accessors floor each entry at `eps_clip` and exist for
/// denominators. Querying with the wrong conditioning arity is a wiring bug
/// and panics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CondPmf {
    n_outcomes: usize,
    eps_clip: f64,
    backend: CondPmfBackend,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum CondPmfBackend {
    StateTable(Vec<Vec<f64>>),
    ActionStateTable(Vec<Vec<Vec<f64>>>),
    StateLogit {
        features: StateFeatures,
        model: LinearModel,
    },
    ActionStateLogit {
        features: StateFeatures,
        models: Vec<PerActionModel>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum PerActionModel {
    Fitted(LinearModel),
    /// Fallback when an action's subset carries a single outcome class.
    Constant(Vec<f64>),
}

fn check_table_rows(rows: &[Vec<f64>], n_outcomes: usize) -> Result<()> {
    for row in rows {
        if row.len() != n_outcomes {
            return Err(CopeError::InvalidArgument(format!(
                "table row has {} entries, expected {n_outcomes}",
                row.len()
            )));
        }
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CopeError::InvalidPmf(
                "table entries must be finite and nonnegative".into(),
            ));
        }
    }
    Ok(())
}

impl CondPmf {
    /// State-conditioned pmf from explicit rows (rows indexed by state).
    /// Rows are stored as given: corrupted-nuisance scenarios deliberately
    /// pass unnormalized rows.
    pub fn from_state_table(table: Vec<Vec<f64>>, eps_clip: f64) -> Result<Self> {
        if table.is_empty() {
            return Err(CopeError::InvalidArgument("empty pmf table".into()));
        }
        let n_outcomes = table[0].len();
        check_table_rows(&table, n_outcomes)?;
        Ok(CondPmf {
            n_outcomes,
            eps_clip,
            backend: CondPmfBackend::StateTable(table),
        })
    }

    /// (Action, state)-conditioned pmf from explicit rows `table[a][s]`.
    pub fn from_action_state_table(table: Vec<Vec<Vec<f64>>>, eps_clip: f64) -> Result<Self> {
        if table.is_empty() || table[0].is_empty() {
            return Err(CopeError::InvalidArgument("empty pmf table".into()));
        }
        let n_outcomes = table[0][0].len();
        for per_action in &table {
            if per_action.len() != table[0].len() {
                return Err(CopeError::InvalidArgument(
                    "ragged action-state pmf table".into(),
                ));
            }
            check_table_rows(per_action, n_outcomes)?;
        }
        Ok(CondPmf {
            n_outcomes,
            eps_clip,
            backend: CondPmfBackend::ActionStateTable(table),
        })
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn eps_clip(&self) -> f64 {
        self.eps_clip
    }

    /// Raw pmf given a state.
    pub fn given_state<S: StateKey>(&self, s: &S) -> Vec<f64> {
        match &self.backend {
            CondPmfBackend::StateTable(table) => table[s
                .tabular_index()
                .expect("state-table pmf needs a tabular state")]
            .clone(),
            CondPmfBackend::StateLogit { features, model } => {
                model.predict_proba(&features.eval(s))
            }
            _ => panic!("this CondPmf is conditioned on (action, state)"),
        }
    }

    /// Raw pmf given (action, state).
    pub fn given_action_state<S: StateKey>(&self, a: usize, s: &S) -> Vec<f64> {
        match &self.backend {
            CondPmfBackend::ActionStateTable(table) => table[a][s
                .tabular_index()
                .expect("state-table pmf needs a tabular state")]
            .clone(),
            CondPmfBackend::ActionStateLogit { features, models } => match &models[a] {
                PerActionModel::Fitted(model) => model.predict_proba(&features.eval(s)),
                PerActionModel::Constant(pmf) => pmf.clone(),
            },
            _ => panic!("this CondPmf is conditioned on state only"),
        }
    }

    pub fn prob_given_state<S: StateKey>(&self, outcome: usize, s: &S) -> f64 {
        self.given_state(s)[outcome]
    }

    pub fn prob_given_action_state<S: StateKey>(&self, outcome: usize, a: usize, s: &S) -> f64 {
        self.given_action_state(a, s)[outcome]
    }

    /// Floored probability for use in denominators.
    pub fn clipped_given_state<S: StateKey>(&self, outcome: usize, s: &S) -> f64 {
        self.prob_given_state(outcome, s).max(self.eps_clip)
    }

    /// Floored probability for use in denominators.
    pub fn clipped_given_action_state<S: StateKey>(&self, outcome: usize, a: usize, s: &S) -> f64 {
        self.prob_given_action_state(outcome, a, s)
            .max(self.eps_clip)
    }

    /// Raw pmf rows for every action at once (one feature evaluation for
    /// logit backends). Row `a` equals `given_action_state(a, s)`.
    pub fn given_all_actions<S: StateKey>(&self, s: &S) -> Vec<Vec<f64>> {
        match &self.backend {
            CondPmfBackend::ActionStateTable(table) => {
                let idx = s
                    .tabular_index()
                    .expect("state-table pmf needs a tabular state");
                table
                    .iter()
                    .map(|per_action| per_action[idx].clone())
                    .collect()
            }
            CondPmfBackend::ActionStateLogit { features, models } => {
                let xi = features.eval(s);
                models
                    .iter()
                    .map(|m| match m {
                        PerActionModel::Fitted(model) => model.predict_proba(&xi),
                        PerActionModel::Constant(pmf) => pmf.clone(),
                    })
                    .collect()
            }
            _ => panic!("this CondPmf is conditioned on state only"),
        }
    }
}

fn smoothed_rows(counts: Vec<Vec<f64>>, alpha: f64, n_outcomes: usize) -> Vec<Vec<f64>> {
    counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum::<f64>() + alpha * n_outcomes as f64;
            if total == 0.0 {
                vec![1.0 / n_outcomes as f64; n_outcomes]
            } else {
                row.iter().map(|c| (c + alpha) / total).collect()
            }
        })
        .collect()
}

/// Estimates the state-marginal behavior policy. Tabular data uses
/// Laplace-smoothed frequencies; a state never visited gets the uniform pmf.
pub fn estimate_pa_star_tabular(
    data: &Dataset<usize>,
    n_states: usize,
    n_actions: usize,
    cfg: &NuisanceConfig,
) -> Result<CondPmf> {
    data.validate_tabular(n_states, n_actions, usize::MAX)?;
    let mut counts = vec![vec![0.0; n_actions]; n_states];
    for (_, _, step, _) in data.transitions() {
        counts[step.state][step.action] += 1.0;
    }
    CondPmf::from_state_table(
        smoothed_rows(counts, cfg.laplace_alpha, n_actions),
        cfg.eps_clip,
    )
}

/// Continuous-state analog of [`estimate_pa_star_tabular`]: multinomial
/// logistic regression of the action on state features. Every action must
/// appear at least once.
pub fn estimate_pa_star_continuous(
    data: &Dataset<Vec<f64>>,
    n_actions: usize,
    features: &StateFeatures,
    cfg: &NuisanceConfig,
) -> Result<CondPmf> {
    let mut seen = vec![false; n_actions];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (_, _, step, _) in data.transitions() {
        seen[step.action] = true;
        rows.push(features.eval(&step.state));
        labels.push(step.action);
    }
    if seen.iter().any(|s| !s) {
        return Err(CopeError::DegenerateSample(
            "some action never appears in the data".into(),
        ));
    }
    let d = features.dim();
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let model = logit_fit(
        &x,
        &labels,
        cfg.ridge_lambda,
        cfg.logit_max_iter,
        cfg.logit_tol,
    )?;
    Ok(CondPmf {
        n_outcomes: n_actions,
        eps_clip: cfg.eps_clip,
        backend: CondPmfBackend::StateLogit {
            features: features.clone(),
            model,
        },
    })
}

/// Estimates the mediator law given (action, state) by Laplace-smoothed
/// counting per (a, s) cell.
pub fn estimate_pm_tabular(
    data: &Dataset<usize>,
    n_states: usize,
    n_actions: usize,
    n_mediators: usize,
    cfg: &NuisanceConfig,
) -> Result<CondPmf> {
    data.validate_tabular(n_states, n_actions, n_mediators)?;
    let mut counts = vec![vec![vec![0.0; n_mediators]; n_states]; n_actions];
    for (_, _, step, _) in data.transitions() {
        counts[step.action][step.state][step.mediator] += 1.0;
    }
    let table: Vec<Vec<Vec<f64>>> = counts
        .into_iter()
        .map(|per_action| smoothed_rows(per_action, cfg.laplace_alpha, n_mediators))
        .collect();
    CondPmf::from_action_state_table(table, cfg.eps_clip)
}

/// Continuous-state mediator law: one multinomial logistic model per action
/// on state features. An action whose subset carries a single mediator class
/// falls back to that point-mass pmf (the clip floor guards denominators).
pub fn estimate_pm_continuous(
    data: &Dataset<Vec<f64>>,
    n_actions: usize,
    n_mediators: usize,
    features: &StateFeatures,
    cfg: &NuisanceConfig,
) -> Result<CondPmf> {
    let d = features.dim();
    let mut models = Vec::with_capacity(n_actions);
    for a in 0..n_actions {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (_, _, step, _) in data.transitions() {
            if step.action == a {
                rows.push(features.eval(&step.state));
                labels.push(step.mediator);
            }
        }
        if rows.is_empty() {
            return Err(CopeError::DegenerateSample(format!(
                "action {a} never appears in the data"
            )));
        }
        let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        if distinct.len() == 1 {
            let only = *distinct.iter().next().unwrap();
            let mut pmf = vec![0.0; n_mediators];
            pmf[only] = 1.0;
            models.push(PerActionModel::Constant(pmf));
            continue;
        }
        let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        let model = logit_fit(
            &x,
            &labels,
            cfg.ridge_lambda,
            cfg.logit_max_iter,
            cfg.logit_tol,
        )?;
        if model.n_outputs() != n_mediators {
            return Err(CopeError::DegenerateSample(format!(
                "mediator {} never appears under action {a}",
                model.n_outputs()
            )));
        }
        models.push(PerActionModel::Fitted(model));
    }
    Ok(CondPmf {
        n_outcomes: n_mediators,
        eps_clip: cfg.eps_clip,
        backend: CondPmfBackend::ActionStateLogit {
            features: features.clone(),
            models,
        },
    })
}

/// The empirical initial-state distribution, reusable either as an
/// aggregated pmf (tabular) or as the raw list of initial states.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub enum InitialDistribution<S> {
    Tabular(Vec<f64>),
    Empirical(Vec<S>),
}

impl<S: StateKey> InitialDistribution<S> {
    /// Expectation of a scalar function of the initial state.
    pub fn expect_value(&self, f: &mut dyn FnMut(&S) -> f64) -> f64 {
        match self {
            InitialDistribution::Tabular(pmf) => pmf
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(s, p)| {
                    let state = S::from_tabular_index(s).expect("tabular initial distribution");
                    p * f(&state)
                })
                .sum(),
            InitialDistribution::Empirical(list) => {
                let total: f64 = list.iter().map(&mut *f).sum();
                total / list.len() as f64
            }
        }
    }

    /// Expectation of a feature vector of the initial state.
    pub fn expect_features(&self, features: &StateFeatures) -> DVector<f64> {
        let mut acc = DVector::zeros(features.dim());
        match self {
            InitialDistribution::Tabular(pmf) => {
                for (s, p) in pmf.iter().enumerate() {
                    if *p > 0.0 {
                        let state = S::from_tabular_index(s).expect("tabular initial distribution");
                        let xi = features.eval(&state);
                        for (j, v) in xi.iter().enumerate() {
                            acc[j] += p * v;
                        }
                    }
                }
            }
            InitialDistribution::Empirical(list) => {
                for s in list {
                    let xi = features.eval(s);
                    for (j, v) in xi.iter().enumerate() {
                        acc[j] += v;
                    }
                }
                acc /= list.len() as f64;
            }
        }
        acc
    }
}

/// Empirical initial distribution aggregated to a pmf over tabular states.
pub fn estimate_nu_tabular(data: &Dataset<usize>, n_states: usize) -> Result<Vec<f64>> {
    let mut pmf = vec![0.0; n_states];
    for s in data.initial_states() {
        if *s >= n_states {
            return Err(CopeError::IndexOutOfRange(format!(
                "initial state {s} outside {n_states}"
            )));
        }
        pmf[*s] += 1.0;
    }
    let n = data.n_trajectories() as f64;
    for p in &mut pmf {
        *p /= n;
    }
    Ok(pmf)
}

/// Empirical initial distribution as the list of initial states, each with
/// weight 1/N.
pub fn estimate_nu_empirical<S: Clone>(data: &Dataset<S>) -> Vec<S> {
    data.initial_states().cloned().collect()
}

/// The probability ratio correcting the mediator's distribution from the
/// behavior action to the target policy:
/// `rho(m, a, s) = sum_a' pi(a'|s) p_m(m|a', s) / p_m(m|a, s)`.
/// The numerator uses raw probabilities; the denominator is clipped.
pub fn rho<S: StateKey>(pm: &CondPmf, pi: &PolicySpec<S>, m: usize, a: usize, s: &S) -> f64 {
    let pi_probs = pi.probs(s);
    let numer: f64 = (0..pi.n_actions())
        .map(|ap| pi_probs[ap] * pm.prob_given_action_state(m, ap, s))
        .sum();
    numer / pm.clipped_given_action_state(m, a, s)
}

/// The fitted mediated Q-function (or its unconfounded analog), plus fit
/// diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QFunction {
    n_mediators: usize,
    n_actions: usize,
    backend: QBackend,
    iterations: usize,
    final_change: f64,
    converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum QBackend {
    Table {
        n_states: usize,
        /// Flat over ((m * n_actions) + a) * n_states + s.
        values: Vec<f64>,
    },
    PerCellLinear {
        features: StateFeatures,
        /// One coefficient vector per (m, a) cell, index m * n_actions + a.
        betas: Vec<DVector<f64>>,
    },
}

impl QFunction {
    /// Explicit tabular Q values, flat over ((m * n_a) + a) * n_s + s.
    pub fn from_table(
        values: Vec<f64>,
        n_mediators: usize,
        n_actions: usize,
        n_states: usize,
    ) -> Result<Self> {
        if values.len() != n_mediators * n_actions * n_states {
            return Err(CopeError::InvalidArgument(format!(
                "Q table has {} entries, expected {}",
                values.len(),
                n_mediators * n_actions * n_states
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CopeError::InvalidArgument(
                "Q table entries must be finite".into(),
            ));
        }
        Ok(QFunction {
            n_mediators,
            n_actions,
            backend: QBackend::Table { n_states, values },
            iterations: 0,
            final_change: 0.0,
            converged: true,
        })
    }

    pub fn n_mediators(&self) -> usize {
        self.n_mediators
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn iterations(&self) -> usize {
        self.iterations
    }
    pub fn final_change(&self) -> f64 {
        self.final_change
    }
    pub fn converged(&self) -> bool {
        self.converged
    }

    /// The underlying table for tabular backends (used to derive corrupted
    /// variants); `None` for linear backends.
    pub fn table(&self) -> Option<&[f64]> {
        match &self.backend {
            QBackend::Table { values, .. } => Some(values),
            QBackend::PerCellLinear { .. } => None,
        }
    }

    pub fn eval<S: StateKey>(&self, m: usize, a: usize, s: &S) -> f64 {
        debug_assert!(m < self.n_mediators && a < self.n_actions);
        match &self.backend {
            QBackend::Table { n_states, values } => {
                let idx = s.tabular_index().expect("tabular Q needs a tabular state");
                values[(m * self.n_actions + a) * n_states + idx]
            }
            QBackend::PerCellLinear { features, betas } => {
                let xi = features.eval(s);
                let beta = &betas[m * self.n_actions + a];
                beta.iter().zip(xi.iter()).map(|(b, v)| b * v).sum()
            }
        }
    }

    /// All Q values at one state, flat over `m * n_actions + a` (one feature
    /// evaluation for linear backends).
    pub fn eval_all<S: StateKey>(&self, s: &S) -> Vec<f64> {
        let n_cells = self.n_mediators * self.n_actions;
        match &self.backend {
            QBackend::Table { n_states, values } => {
                let idx = s.tabular_index().expect("tabular Q needs a tabular state");
                (0..n_cells)
                    .map(|cell| values[cell * n_states + idx])
                    .collect()
            }
            QBackend::PerCellLinear { features, betas } => {
                let xi = features.eval(s);
                betas
                    .iter()
                    .map(|beta| beta.iter().zip(xi.iter()).map(|(b, v)| b * v).sum())
                    .collect()
            }
        }
    }
}

/// Stopping rules for the iterative Q fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedQConfig {
    pub ridge_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FittedQConfig {
    fn default() -> Self {
        FittedQConfig {
            ridge_lambda: default_ridge(),
            max_iter: default_q_max_iter(),
            tol: default_q_tol(),
        }
    }
}

impl From<&NuisanceConfig> for FittedQConfig {
    fn from(cfg: &NuisanceConfig) -> Self {
        FittedQConfig {
            ridge_lambda: cfg.ridge_lambda,
            max_iter: cfg.q_max_iter,
            tol: cfg.q_tol,
        }
    }
}

/// Iterative fitted-Q evaluation of the mediated Bellman equation.
///
/// Starting from `Q^0 = 0`, each sweep regresses the target
/// `R + gamma * V^l(S')` on the current cell `(M, A)` (and the state), where
/// the backup `V^l` depends on `mediated`:
///
/// - `Some((pm, pa_star))`: the mediated backup
///   `V(s) = sum_{m, a, a*} Q(m, a, s) pm(m|a*, s) pa*(a|s) pi(a*|s)`;
/// - `None`: the plain unconfounded backup `V(s) = sum_a pi(a|s) Q(0, a, s)`,
///   which requires `n_mediators == 1` (baseline estimators use this).
///
/// Iteration stops when the sup-norm change of Q over the observed triples
/// falls below `cfg.tol`; hitting `cfg.max_iter` first leaves
/// `converged() == false` on the result. Indicator features run exact
/// per-cell least squares (cell means); Fourier features run one ridge
/// regression per (m, a) cell against a factorization computed once.
///
/// In the Fourier case every regression target is clamped to
/// `[r_min/(1-gamma), r_max/(1-gamma)]`, the return range implied by the
/// observed rewards: the true Q lies inside it, and without the clamp linear
/// extrapolation of intermediate iterates can escape the contraction regime
/// and diverge. The indicator case is a per-cell averaging scheme whose
/// backup weights sum to one, so it contracts unconditionally and needs no
/// clamp.
#[allow(clippy::too_many_arguments)]
pub fn fitted_q_evaluation<S: StateKey>(
    data: &Dataset<S>,
    pi: &PolicySpec<S>,
    mediated: Option<(&CondPmf, &CondPmf)>,
    gamma: f64,
    n_mediators: usize,
    n_actions: usize,
    features: &StateFeatures,
    cfg: &FittedQConfig,
) -> Result<QFunction> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CopeError::InvalidArgument(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    if mediated.is_none() && n_mediators != 1 {
        return Err(CopeError::InvalidArgument(
            "the direct backup requires a collapsed mediator dimension".into(),
        ));
    }
    match features {
        StateFeatures::Indicator { n_states } => fitted_q_tabular(
            data,
            pi,
            mediated,
            gamma,
            n_mediators,
            n_actions,
            *n_states,
            cfg,
        ),
        StateFeatures::Fourier { .. } => fitted_q_continuous(
            data,
            pi,
            mediated,
            gamma,
            n_mediators,
            n_actions,
            features,
            cfg,
        ),
    }
}

/// Backup weights w(m, a | s) with V(s) = sum_{m,a} w(m,a|s) Q(m,a,s).
fn backup_weights<S: StateKey>(
    s: &S,
    pi: &PolicySpec<S>,
    mediated: Option<(&CondPmf, &CondPmf)>,
    n_mediators: usize,
    n_actions: usize,
) -> Vec<f64> {
    let mut w = vec![0.0; n_mediators * n_actions];
    match mediated {
        Some((pm, pa_star)) => {
            let pi_probs = pi.probs(s);
            let pa = pa_star.given_state(s);
            for (a_star, &pi_a) in pi_probs.iter().enumerate() {
                if pi_a == 0.0 {
                    continue;
                }
                let pm_given = pm.given_action_state(a_star, s);
                for m in 0..n_mediators {
                    for a in 0..n_actions {
                        w[m * n_actions + a] += pm_given[m] * pa[a] * pi_a;
                    }
                }
            }
        }
        None => {
            let pi_probs = pi.probs(s);
            w[..n_actions].copy_from_slice(&pi_probs);
        }
    }
    w
}

#[allow(clippy::too_many_arguments)]
fn fitted_q_tabular<S: StateKey>(
    data: &Dataset<S>,
    pi: &PolicySpec<S>,
    mediated: Option<(&CondPmf, &CondPmf)>,
    gamma: f64,
    n_mediators: usize,
    n_actions: usize,
    n_states: usize,
    cfg: &FittedQConfig,
) -> Result<QFunction> {
    let n_cells = n_mediators * n_actions * n_states;
    let mut count = vec![0.0f64; n_cells];
    let mut sum_r = vec![0.0f64; n_cells];
    let mut next_count = vec![0.0f64; n_cells * n_states];
    for (_, _, step, next) in data.transitions() {
        let s = step.state.tabular_index().expect("tabular state");
        let s2 = next.tabular_index().expect("tabular state");
        // the direct backup collapses the mediator dimension
        let m = if mediated.is_some() { step.mediator } else { 0 };
        let cell = (m * n_actions + step.action) * n_states + s;
        count[cell] += 1.0;
        sum_r[cell] += step.reward;
        next_count[cell * n_states + s2] += 1.0;
    }

    // Backup weights per next state, computed once.
    let weights: Vec<Vec<f64>> = (0..n_states)
        .map(|s| {
            let state = S::from_tabular_index(s).expect("tabular state");
            backup_weights(&state, pi, mediated, n_mediators, n_actions)
        })
        .collect();

    let mut q = vec![0.0f64; n_cells];
    let mut iterations = 0usize;
    let mut final_change = f64::INFINITY;
    let mut converged = false;
    for iter in 1..=cfg.max_iter {
        iterations = iter;
        let mut v = vec![0.0f64; n_states];
        for (s, vs) in v.iter_mut().enumerate() {
            let w = &weights[s];
            for m in 0..n_mediators {
                for a in 0..n_actions {
                    *vs += w[m * n_actions + a] * q[(m * n_actions + a) * n_states + s];
                }
            }
        }
        let mut change = 0.0f64;
        let mut q_next = q.clone();
        for cell in 0..n_cells {
            if count[cell] == 0.0 {
                continue;
            }
            let mut backup = 0.0;
            for s2 in 0..n_states {
                let c = next_count[cell * n_states + s2];
                if c > 0.0 {
                    backup += c * v[s2];
                }
            }
            let new = (sum_r[cell] + gamma * backup) / count[cell];
            change = change.max((new - q[cell]).abs());
            q_next[cell] = new;
        }
        q = q_next;
        final_change = change;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(QFunction {
        n_mediators,
        n_actions,
        backend: QBackend::Table {
            n_states,
            values: q,
        },
        iterations,
        final_change,
        converged,
    })
}

#[allow(clippy::too_many_arguments)]
fn fitted_q_continuous<S: StateKey>(
    data: &Dataset<S>,
    pi: &PolicySpec<S>,
    mediated: Option<(&CondPmf, &CondPmf)>,
    gamma: f64,
    n_mediators: usize,
    n_actions: usize,
    features: &StateFeatures,
    cfg: &FittedQConfig,
) -> Result<QFunction> {
    let d = features.dim();
    let n_cells = n_mediators * n_actions;

    // Feature vectors per trajectory position (steps plus terminal state),
    // shared between "current" and "next" roles.
    let mut feats: Vec<Vec<f64>> = Vec::new();
    let mut offsets = Vec::with_capacity(data.n_trajectories());
    for traj in data.trajectories() {
        offsets.push(feats.len());
        for step in traj.steps() {
            feats.push(features.eval(&step.state));
        }
        feats.push(features.eval(traj.terminal_state()));
    }

    // Per transition: cell, reward, feature indices, and backup weights at
    // the next state (Q-independent, computed once).
    struct Row {
        cell: usize,
        reward: f64,
        s_feat: usize,
        next_feat: usize,
        next_weights: Vec<f64>,
    }
    let mut rows = Vec::with_capacity(data.total_steps());
    for (i, t, step, next) in data.transitions() {
        // the direct backup collapses the mediator dimension
        let m = if mediated.is_some() { step.mediator } else { 0 };
        rows.push(Row {
            cell: m * n_actions + step.action,
            reward: step.reward,
            s_feat: offsets[i] + t,
            next_feat: offsets[i] + t + 1,
            next_weights: backup_weights(next, pi, mediated, n_mediators, n_actions),
        });
    }

    // One fixed design (and factorization) per observed (m, a) cell.
    let mut cell_rows: Vec<Vec<usize>> = vec![Vec::new(); n_cells];
    for (k, row) in rows.iter().enumerate() {
        cell_rows[row.cell].push(k);
    }
    let mut solvers: Vec<Option<RidgeSolver>> = Vec::with_capacity(n_cells);
    for members in &cell_rows {
        if members.is_empty() {
            solvers.push(None);
            continue;
        }
        let x = DMatrix::from_fn(members.len(), d, |i, j| feats[rows[members[i]].s_feat][j]);
        solvers.push(Some(RidgeSolver::new(&x, cfg.ridge_lambda)?));
    }

    // Return range implied by the observed rewards; targets are clamped to
    // it so the iteration cannot diverge (see the doc comment).
    let (r_lo, r_hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), row| {
            (lo.min(row.reward), hi.max(row.reward))
        });
    let c = 1.0 / (1.0 - gamma);
    let (q_lo, q_hi) = (r_lo * c, r_hi * c);

    let mut betas: Vec<DVector<f64>> = vec![DVector::zeros(d); n_cells];
    let mut iterations = 0usize;
    let mut final_change = f64::INFINITY;
    let mut converged = false;
    for iter in 1..=cfg.max_iter {
        iterations = iter;
        // V^l at every next state under the current coefficients
        let v_next: Vec<f64> = rows
            .iter()
            .map(|row| {
                let xi = &feats[row.next_feat];
                let mut v = 0.0;
                for (cell, beta) in betas.iter().enumerate() {
                    let w = row.next_weights[cell];
                    if w != 0.0 {
                        let q: f64 = beta.iter().zip(xi.iter()).map(|(b, f)| b * f).sum();
                        v += w * q;
                    }
                }
                v
            })
            .collect();
        let mut change = 0.0f64;
        let mut betas_next = betas.clone();
        for (cell, members) in cell_rows.iter().enumerate() {
            let Some(solver) = &solvers[cell] else {
                continue;
            };
            let y: Vec<f64> = members
                .iter()
                .map(|&k| (rows[k].reward + gamma * v_next[k]).clamp(q_lo, q_hi))
                .collect();
            betas_next[cell] = solver.solve(&y);
        }
        for row in &rows {
            let xi = &feats[row.s_feat];
            let old: f64 = betas[row.cell]
                .iter()
                .zip(xi.iter())
                .map(|(b, f)| b * f)
                .sum();
            let new: f64 = betas_next[row.cell]
                .iter()
                .zip(xi.iter())
                .map(|(b, f)| b * f)
                .sum();
            change = change.max((new - old).abs());
        }
        betas = betas_next;
        final_change = change;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(QFunction {
        n_mediators,
        n_actions,
        backend: QBackend::PerCellLinear {
            features: features.clone(),
            betas,
        },
        iterations,
        final_change,
        converged,
    })
}

/// The fitted marginal density ratio `omega(s) = xi(s)^T beta`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatioFunction {
    features: StateFeatures,
    beta: DVector<f64>,
}

impl RatioFunction {
    pub fn new(features: StateFeatures, beta: DVector<f64>) -> Result<Self> {
        if beta.len() != features.dim() {
            return Err(CopeError::InvalidArgument(format!(
                "coefficient length {} does not match feature dimension {}",
                beta.len(),
                features.dim()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(CopeError::InvalidArgument(
                "ratio coefficients must be finite".into(),
            ));
        }
        Ok(RatioFunction { features, beta })
    }

    /// Per-state weights over an indicator basis: `omega(s) = weights[s]`.
    pub fn from_indicator_weights(weights: Vec<f64>) -> Result<Self> {
        let n_states = weights.len();
        RatioFunction::new(
            StateFeatures::Indicator { n_states },
            DVector::from_vec(weights),
        )
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn features(&self) -> &StateFeatures {
        &self.features
    }

    pub fn eval<S: StateKey>(&self, s: &S) -> f64 {
        let xi = self.features.eval(s);
        self.beta.iter().zip(xi.iter()).map(|(b, v)| b * v).sum()
    }
}

/// Solves the stacked estimating equations `L(omega, xi_j) = 0` for the
/// linear coefficients of the density ratio given per-transition ratios
/// `rho`: the matrix has rows indexed by the discriminator coordinate,
/// `mean[{xi(S) - gamma rho xi(S')} xi(S)^T] beta = (1-gamma) E_nu xi`,
/// with `lambda_omega I` added before the solve.
pub(crate) fn omega_from_ratios<S: StateKey>(
    data: &Dataset<S>,
    ratios: &[f64],
    nu: &InitialDistribution<S>,
    gamma: f64,
    features: &StateFeatures,
    lambda_omega: f64,
) -> Result<RatioFunction> {
    let d = features.dim();
    let mut mat = DMatrix::<f64>::zeros(d, d);
    let mut n = 0usize;
    for (k, (_, _, step, next)) in data.transitions().enumerate() {
        let xi_s = features.eval(&step.state);
        let xi_n = features.eval(next);
        let rho_k = ratios[k];
        for j in 0..d {
            let left = xi_s[j] - gamma * rho_k * xi_n[j];
            if left != 0.0 {
                for (c, &x) in xi_s.iter().enumerate() {
                    mat[(j, c)] += left * x;
                }
            }
        }
        n += 1;
    }
    mat /= n as f64;
    for j in 0..d {
        mat[(j, j)] += lambda_omega;
    }
    let rhs = nu.expect_features(features) * (1.0 - gamma);
    let beta = mat.lu().solve(&rhs).ok_or_else(|| {
        CopeError::SingularSystem("density-ratio linear system is singular".into())
    })?;
    RatioFunction::new(features.clone(), beta)
}

/// Estimates the marginal density ratio for the target policy using the
/// mediator probability ratio `rho`.
pub fn estimate_omega<S: StateKey>(
    data: &Dataset<S>,
    pi: &PolicySpec<S>,
    pm: &CondPmf,
    nu: &InitialDistribution<S>,
    gamma: f64,
    features: &StateFeatures,
    lambda_omega: f64,
) -> Result<RatioFunction> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CopeError::InvalidArgument(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    let ratios: Vec<f64> = data
        .transitions()
        .map(|(_, _, step, _)| rho(pm, pi, step.mediator, step.action, &step.state))
        .collect();
    omega_from_ratios(data, &ratios, nu, gamma, features, lambda_omega)
}

/// Unconfounded variant used by the baselines: the mediator ratio is
/// replaced with the policy ratio `pi(A|S) / pa_star(A|S)`.
pub fn estimate_omega_unconfounded<S: StateKey>(
    data: &Dataset<S>,
    pi: &PolicySpec<S>,
    pa_star: &CondPmf,
    nu: &InitialDistribution<S>,
    gamma: f64,
    features: &StateFeatures,
    lambda_omega: f64,
) -> Result<RatioFunction> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CopeError::InvalidArgument(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    let ratios: Vec<f64> = data
        .transitions()
        .map(|(_, _, step, _)| {
            pi.prob(step.action, &step.state)
                / pa_star.clipped_given_state(step.action, &step.state)
        })
        .collect();
    omega_from_ratios(data, &ratios, nu, gamma, features, lambda_omega)
}

/// Empirical estimating-equation residual
/// `L(omega, f) = mean[omega(S){f(S) - gamma rho f(S')}] - (1-gamma) E_nu f`.
/// The fitted ratio drives this to zero for every coordinate of its own
/// feature basis (exactly, when `lambda_omega = 0`).
pub fn evaluate_l<S: StateKey>(
    omega: &RatioFunction,
    f: &dyn Fn(&S) -> f64,
    data: &Dataset<S>,
    pi: &PolicySpec<S>,
    pm: &CondPmf,
    nu: &InitialDistribution<S>,
    gamma: f64,
) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (_, _, step, next) in data.transitions() {
        let rho_k = rho(pm, pi, step.mediator, step.action, &step.state);
        acc += omega.eval(&step.state) * (f(&step.state) - gamma * rho_k * f(next));
        n += 1;
    }
    acc / n as f64 - (1.0 - gamma) * nu.expect_value(&mut |s| f(s))
}

/// The full set of fitted nuisance functions consumed by the estimators.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub struct NuisanceSet<S> {
    pub q: QFunction,
    pub omega: RatioFunction,
    pub pa_star: CondPmf,
    pub pm: CondPmf,
    pub nu: InitialDistribution<S>,
}

/// Fits all nuisances on a tabular dataset (Laplace-smoothed tables, exact
/// per-cell Q iteration, indicator-basis density ratio).
pub fn fit_nuisances_tabular(
    data: &Dataset<usize>,
    pi: &PolicySpec<usize>,
    n_states: usize,
    n_actions: usize,
    n_mediators: usize,
    gamma: f64,
    cfg: &NuisanceConfig,
) -> Result<NuisanceSet<usize>> {
    let pa_star = estimate_pa_star_tabular(data, n_states, n_actions, cfg)?;
    let pm = estimate_pm_tabular(data, n_states, n_actions, n_mediators, cfg)?;
    let nu = InitialDistribution::Tabular(estimate_nu_tabular(data, n_states)?);
    let features = StateFeatures::Indicator { n_states };
    let q = fitted_q_evaluation(
        data,
        pi,
        Some((&pm, &pa_star)),
        gamma,
        n_mediators,
        n_actions,
        &features,
        &FittedQConfig::from(cfg),
    )?;
    let omega = estimate_omega(data, pi, &pm, &nu, gamma, &features, cfg.omega_ridge)?;
    Ok(NuisanceSet {
        q,
        omega,
        pa_star,
        pm,
        nu,
    })
}

/// Fits all nuisances on a continuous dataset: one Fourier feature map is
/// drawn from the observed states and shared by every component.
pub fn fit_nuisances_continuous(
    data: &Dataset<Vec<f64>>,
    pi: &PolicySpec<Vec<f64>>,
    n_actions: usize,
    n_mediators: usize,
    gamma: f64,
    cfg: &NuisanceConfig,
) -> Result<NuisanceSet<Vec<f64>>> {
    let mut states: Vec<Vec<f64>> = Vec::new();
    for traj in data.trajectories() {
        for step in traj.steps() {
            states.push(step.state.clone());
        }
        states.push(traj.terminal_state().clone());
    }
    let map = fit_fourier_map(&states, cfg.n_features, cfg.feature_seed)?;
    let features = StateFeatures::Fourier {
        map,
        intercept: true,
    };
    let pa_star = estimate_pa_star_continuous(data, n_actions, &features, cfg)?;
    let pm = estimate_pm_continuous(data, n_actions, n_mediators, &features, cfg)?;
    let nu = InitialDistribution::Empirical(estimate_nu_empirical(data));
    let q = fitted_q_evaluation(
        data,
        pi,
        Some((&pm, &pa_star)),
        gamma,
        n_mediators,
        n_actions,
        &features,
        &FittedQConfig::from(cfg),
    )?;
    let omega = estimate_omega(data, pi, &pm, &nu, gamma, &features, cfg.omega_ridge)?;
    Ok(NuisanceSet {
        q,
        omega,
        pa_star,
        pm,
        nu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{sigmoid, total_variation};
    use crate::model::{Step, TabularCmdpwm, TabularCmdpwmParts, Trajectory};
    use crate::sim::{build_toy_env, generate_dataset, toy_target_policy, SimConfig, TabularEnv};

    fn toy_dataset(n: usize, t: usize, seed: u64) -> Dataset<usize> {
        let env = build_toy_env();
        generate_dataset(
            &env,
            &SimConfig {
                n_trajectories: n,
                horizon: t,
                burn_in: 0,
                seed,
            },
        )
        .unwrap()
    }

    fn manual_dataset(steps: Vec<(usize, usize, usize, f64)>) -> Dataset<usize> {
        // one trajectory through the given (s, a, m, r) steps, ending in state 0
        let steps = steps
            .into_iter()
            .map(|(state, action, mediator, reward)| Step {
                state,
                action,
                mediator,
                reward,
            })
            .collect();
        Dataset::new(vec![Trajectory::new(steps, 0).unwrap()]).unwrap()
    }

    #[test]
    fn pa_star_counts_without_smoothing() {
        let data = manual_dataset(vec![
            (0, 0, 0, 0.0),
            (0, 0, 0, 0.0),
            (0, 1, 0, 0.0),
            (0, 1, 0, 0.0),
        ]);
        let cfg = NuisanceConfig {
            laplace_alpha: 0.0,
            ..NuisanceConfig::default()
        };
        let pa = estimate_pa_star_tabular(&data, 1, 2, &cfg).unwrap();
        let pmf = pa.given_state(&0usize);
        assert!((pmf[0] - 0.5).abs() < 1e-15);
        assert!((pmf[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unseen_state_gets_uniform_pmf() {
        let data = manual_dataset(vec![(0, 0, 0, 0.0), (0, 1, 0, 0.0), (0, 2, 0, 0.0)]);
        let cfg = NuisanceConfig {
            laplace_alpha: 1.0,
            ..NuisanceConfig::default()
        };
        let pa = estimate_pa_star_tabular(&data, 2, 3, &cfg).unwrap();
        let pmf = pa.given_state(&1usize);
        for p in pmf {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pa_star_recovers_toy_marginal() {
        let data = toy_dataset(2000, 100, 31);
        let pa = estimate_pa_star_tabular(&data, 2, 3, &NuisanceConfig::default()).unwrap();
        // action index 2 carries label +1 with marginal 0.25 at s=0
        assert!((pa.prob_given_state(2, &0usize) - 0.25).abs() < 0.02);
        assert!((pa.prob_given_state(1, &0usize) - 0.5).abs() < 0.02);
    }

    #[test]
    fn pm_point_mass_is_raw_one_and_clipped_complement() {
        let data = manual_dataset(vec![(0, 0, 1, 0.0), (0, 0, 1, 0.0), (0, 1, 0, 0.0)]);
        let cfg = NuisanceConfig {
            laplace_alpha: 0.0,
            ..NuisanceConfig::default()
        };
        let pm = estimate_pm_tabular(&data, 1, 2, 2, &cfg).unwrap();
        assert!((pm.prob_given_action_state(1, 0, &0usize) - 1.0).abs() < 1e-15);
        assert_eq!(pm.prob_given_action_state(0, 0, &0usize), 0.0);
        assert_eq!(pm.clipped_given_action_state(0, 0, &0usize), cfg.eps_clip);
    }

    #[test]
    fn pm_recovers_toy_formula_and_rows_sum_to_one() {
        let data = toy_dataset(2000, 100, 32);
        let pm = estimate_pm_tabular(&data, 2, 3, 2, &NuisanceConfig::default()).unwrap();
        // action label 0 is index 1: p_m(1|0, 0) = sigmoid(0.45)
        assert!((pm.prob_given_action_state(1, 1, &0usize) - sigmoid(0.45)).abs() < 0.02);
        for a in 0..3 {
            for s in 0..2usize {
                let row = pm.given_action_state(a, &s);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rho_is_one_for_action_independent_mediator() {
        let pm = CondPmf::from_action_state_table(
            vec![vec![vec![0.3, 0.7]], vec![vec![0.3, 0.7]]],
            1e-3,
        )
        .unwrap();
        let pi = PolicySpec::tabular(vec![vec![0.6, 0.4]]).unwrap();
        for m in 0..2 {
            for a in 0..2 {
                assert!((rho(&pm, &pi, m, a, &0usize) - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rho_is_one_for_point_mass_policy() {
        let pm = CondPmf::from_action_state_table(
            vec![vec![vec![0.2, 0.8]], vec![vec![0.55, 0.45]]],
            1e-3,
        )
        .unwrap();
        let pi = PolicySpec::tabular(vec![vec![0.0, 1.0]]).unwrap();
        for m in 0..2 {
            assert!((rho(&pm, &pi, m, 1, &0usize) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rho_matches_independent_arithmetic_on_toy_tables() {
        // exact mediator table of the toy environment
        let spec = build_toy_env().tabular_spec().clone();
        let table: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|a| {
                (0..2)
                    .map(|s| (0..2).map(|m| spec.p_m(m, a, s)).collect())
                    .collect()
            })
            .collect();
        let pm = CondPmf::from_action_state_table(table, 1e-3).unwrap();
        let pi = toy_target_policy();
        // s=0, behavior action label +1 (index 2), m=1
        let got = rho(&pm, &pi, 1, 2, &0usize);
        let expected =
            (0.25 * sigmoid(-0.45) + 0.5 * sigmoid(0.45) + 0.25 * sigmoid(1.35)) / sigmoid(-0.45);
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.544).abs() < 2e-3);
    }

    fn constant_reward_env(c: f64) -> TabularEnv {
        // two states, two actions, two mediators; dynamics arbitrary, reward always c
        let mut p_sr = Vec::new();
        for m in 0..2usize {
            for _a in 0..2 {
                for s in 0..2usize {
                    for _u in 0..1 {
                        let q = 0.3 + 0.2 * (m as f64) + 0.1 * (s as f64);
                        // single reward level c; joint over (s', r) collapses to next-state pmf
                        p_sr.extend_from_slice(&[1.0 - q, q]);
                    }
                }
            }
        }
        let spec = TabularCmdpwm::new(TabularCmdpwmParts {
            n_states: 2,
            n_actions: 2,
            n_mediators: 2,
            n_confounders: 1,
            reward_levels: vec![c],
            p_u: vec![1.0, 1.0],
            p_a: vec![0.5, 0.5, 0.4, 0.6],
            p_m: vec![0.7, 0.3, 0.6, 0.4, 0.2, 0.8, 0.5, 0.5],
            p_sr,
            nu: vec![0.5, 0.5],
            action_labels: vec![0.0, 1.0],
            confounder_labels: vec![0.0],
        })
        .unwrap();
        TabularEnv::new(spec)
    }

    #[test]
    fn fitted_q_constant_reward_fixed_point() {
        let c = 2.0;
        let gamma = 0.9;
        let env = constant_reward_env(c);
        let data = generate_dataset(
            &env,
            &SimConfig {
                n_trajectories: 50,
                horizon: 40,
                burn_in: 0,
                seed: 5,
            },
        )
        .unwrap();
        let cfg = NuisanceConfig::default();
        let pi = PolicySpec::tabular(vec![vec![0.5, 0.5], vec![0.3, 0.7]]).unwrap();
        let pa = estimate_pa_star_tabular(&data, 2, 2, &cfg).unwrap();
        let pm = estimate_pm_tabular(&data, 2, 2, 2, &cfg).unwrap();
        let q = fitted_q_evaluation(
            &data,
            &pi,
            Some((&pm, &pa)),
            gamma,
            2,
            2,
            &StateFeatures::Indicator { n_states: 2 },
            &FittedQConfig::default(),
        )
        .unwrap();
        assert!(q.converged());
        assert!(q.final_change() < 1e-6);
        let target = c / (1.0 - gamma);
        for m in 0..2 {
            for a in 0..2 {
                for s in 0..2usize {
                    // only observed cells are pinned; all cells here see data
                    assert!(
                        (q.eval(m, a, &s) - target).abs() < 1e-4,
                        "cell ({m},{a},{s}): {}",
                        q.eval(m, a, &s)
                    );
                }
            }
        }
    }

    #[test]
    fn fitted_q_gamma_zero_is_cell_mean_reward() {
        let data = toy_dataset(200, 50, 6);
        let cfg = NuisanceConfig::default();
        let pi = toy_target_policy();
        let pa = estimate_pa_star_tabular(&data, 2, 3, &cfg).unwrap();
        let pm = estimate_pm_tabular(&data, 2, 3, 2, &cfg).unwrap();
        let q = fitted_q_evaluation(
            &data,
            &pi,
            Some((&pm, &pa)),
            0.0,
            2,
            3,
            &StateFeatures::Indicator { n_states: 2 },
            &FittedQConfig::default(),
        )
        .unwrap();
        assert!(q.converged());
        // manual per-cell means
        let mut sums = [0.0; 12];
        let mut counts = [0.0; 12];
        for (_, _, step, _) in data.transitions() {
            let cell = (step.mediator * 3 + step.action) * 2 + step.state;
            sums[cell] += step.reward;
            counts[cell] += 1.0;
        }
        for m in 0..2 {
            for a in 0..3 {
                for s in 0..2usize {
                    let cell = (m * 3 + a) * 2 + s;
                    if counts[cell] > 0.0 {
                        assert!((q.eval(m, a, &s) - sums[cell] / counts[cell]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn omega_mean_is_one_at_gamma_zero() {
        let data = toy_dataset(200, 25, 9);
        let cfg = NuisanceConfig::default();
        let pi = toy_target_policy();
        let pm = estimate_pm_tabular(&data, 2, 3, 2, &cfg).unwrap();
        let nu = InitialDistribution::Tabular(estimate_nu_tabular(&data, 2).unwrap());
        let features = StateFeatures::Indicator { n_states: 2 };
        let omega = estimate_omega(&data, &pi, &pm, &nu, 0.0, &features, 0.0).unwrap();
        let mut acc = 0.0;
        let mut n = 0;
        for (_, _, step, _) in data.transitions() {
            acc += omega.eval(&step.state);
            n += 1;
        }
        assert!((acc / n as f64 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn omega_is_one_when_ratio_collapses_and_data_is_stationary() {
        // mediator independent of the action => rho = 1 for any policy
        let mut p_sr = Vec::new();
        for m in 0..2usize {
            for _a in 0..2 {
                for s in 0..2usize {
                    let q = 0.25 + 0.4 * (m as f64) + 0.15 * (s as f64);
                    p_sr.extend_from_slice(&[1.0 - q, q]);
                }
            }
        }
        let spec = TabularCmdpwm::new(TabularCmdpwmParts {
            n_states: 2,
            n_actions: 2,
            n_mediators: 2,
            n_confounders: 1,
            reward_levels: vec![1.0],
            p_u: vec![1.0, 1.0],
            p_a: vec![0.6, 0.4, 0.35, 0.65],
            p_m: vec![0.7, 0.3, 0.4, 0.6, 0.7, 0.3, 0.4, 0.6],
            p_sr,
            nu: vec![0.5, 0.5],
            action_labels: vec![0.0, 1.0],
            confounder_labels: vec![0.0],
        })
        .unwrap();
        let env = TabularEnv::new(spec);
        let data = generate_dataset(
            &env,
            &SimConfig {
                n_trajectories: 3000,
                horizon: 5,
                burn_in: 200,
                seed: 12,
            },
        )
        .unwrap();
        let cfg = NuisanceConfig::default();
        let pm = estimate_pm_tabular(&data, 2, 2, 2, &cfg).unwrap();
        let pi = PolicySpec::tabular(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let nu = InitialDistribution::Tabular(estimate_nu_tabular(&data, 2).unwrap());
        let features = StateFeatures::Indicator { n_states: 2 };
        let omega = estimate_omega(&data, &pi, &pm, &nu, 0.9, &features, 0.0).unwrap();
        for s in 0..2usize {
            assert!(
                (omega.eval(&s) - 1.0).abs() < 0.05,
                "omega({s}) = {}",
                omega.eval(&s)
            );
        }
    }

    #[test]
    fn omega_zeroes_the_estimating_equation_on_its_basis() {
        let data = toy_dataset(300, 40, 14);
        let cfg = NuisanceConfig::default();
        let pi = toy_target_policy();
        let pm = estimate_pm_tabular(&data, 2, 3, 2, &cfg).unwrap();
        let nu = InitialDistribution::Tabular(estimate_nu_tabular(&data, 2).unwrap());
        let features = StateFeatures::Indicator { n_states: 2 };
        let omega = estimate_omega(&data, &pi, &pm, &nu, 0.9, &features, 0.0).unwrap();
        for j in 0..2usize {
            let f = move |s: &usize| if *s == j { 1.0 } else { 0.0 };
            let resid = evaluate_l(&omega, &f, &data, &pi, &pm, &nu, 0.9);
            assert!(resid.abs() < 1e-8, "residual for basis {j}: {resid}");
        }
    }

    #[test]
    fn evaluate_l_trivial_cases() {
        let data = toy_dataset(20, 10, 2);
        let cfg = NuisanceConfig::default();
        let pi = toy_target_policy();
        let pm = estimate_pm_tabular(&data, 2, 3, 2, &cfg).unwrap();
        let nu = InitialDistribution::Tabular(estimate_nu_tabular(&data, 2).unwrap());
        let omega = RatioFunction::from_indicator_weights(vec![0.7, 1.3]).unwrap();
        let zero = |_: &usize| 0.0;
        assert_eq!(evaluate_l(&omega, &zero, &data, &pi, &pm, &nu, 0.9), 0.0);
        let zero_omega = RatioFunction::from_indicator_weights(vec![0.0, 0.0]).unwrap();
        let one = |_: &usize| 1.0;
        let got = evaluate_l(&zero_omega, &one, &data, &pi, &pm, &nu, 0.9);
        assert!((got - (-(1.0 - 0.9))).abs() < 1e-14);
    }

    #[test]
    fn nu_examples() {
        let data = Dataset::new(vec![
            Trajectory::new(
                vec![Step {
                    state: 0usize,
                    action: 0,
                    mediator: 0,
                    reward: 0.0,
                }],
                0,
            )
            .unwrap(),
            Trajectory::new(
                vec![Step {
                    state: 1usize,
                    action: 0,
                    mediator: 0,
                    reward: 0.0,
                }],
                0,
            )
            .unwrap(),
        ])
        .unwrap();
        let nu = estimate_nu_tabular(&data, 2).unwrap();
        assert_eq!(nu, vec![0.5, 0.5]);

        let point = Dataset::new(vec![
            Trajectory::new(
                vec![Step {
                    state: 1usize,
                    action: 0,
                    mediator: 0,
                    reward: 0.0
                }],
                1
            )
            .unwrap();
            3
        ])
        .unwrap();
        assert_eq!(estimate_nu_tabular(&point, 2).unwrap(), vec![0.0, 1.0]);

        let data = toy_dataset(5000, 2, 44);
        let nu = estimate_nu_tabular(&data, 2).unwrap();
        assert!(total_variation(&nu, &[0.5, 0.5]) < 0.02);
    }

    #[test]
    fn tabular_nuisance_set_round_trips_through_json() {
        let data = toy_dataset(50, 20, 19);
        let pi = toy_target_policy();
        let nuis =
            fit_nuisances_tabular(&data, &pi, 2, 3, 2, 0.9, &NuisanceConfig::default()).unwrap();
        let text = serde_json::to_string(&nuis).unwrap();
        let back: NuisanceSet<usize> = serde_json::from_str(&text).unwrap();
        for s in 0..2usize {
            assert_eq!(nuis.omega.eval(&s), back.omega.eval(&s));
            assert_eq!(nuis.pa_star.given_state(&s), back.pa_star.given_state(&s));
            for m in 0..2 {
                for a in 0..3 {
                    assert_eq!(nuis.q.eval(m, a, &s), back.q.eval(m, a, &s));
                    assert_eq!(
                        nuis.pm.prob_given_action_state(m, a, &s),
                        back.pm.prob_given_action_state(m, a, &s)
                    );
                }
            }
        }
    }

    #[test]
    fn continuous_nuisance_fit_smoke() {
        use crate::sim::{build_comparison_env, comparison_target_policy};
        let env = build_comparison_env(2).unwrap();
        let data = generate_dataset(
            &env,
            &SimConfig {
                n_trajectories: 40,
                horizon: 10,
                burn_in: 0,
                seed: 77,
            },
        )
        .unwrap();
        let pi = comparison_target_policy();
        let cfg = NuisanceConfig {
            n_features: 20,
            feature_seed: 3,
            ..NuisanceConfig::default()
        };
        let nuis = fit_nuisances_continuous(&data, &pi, 2, 2, 0.9, &cfg).unwrap();
        assert!(nuis.q.converged(), "Q change {}", nuis.q.final_change());
        let s = vec![0.2, -0.4];
        let pa = nuis.pa_star.given_state(&s);
        assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for a in 0..2 {
            let row = nuis.pm.given_action_state(a, &s);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert!(nuis.omega.eval(&s).is_finite());
        match &nuis.nu {
            InitialDistribution::Empirical(list) => assert_eq!(list.len(), 40),
            _ => panic!("continuous fit must keep empirical initial states"),
        }
        // gamma = 0 reduces to one ridge regression of R per cell
        let q0 = fitted_q_evaluation(
            &data,
            &pi,
            Some((&nuis.pm, &nuis.pa_star)),
            0.0,
            2,
            2,
            nuis.omega.features(),
            &FittedQConfig::default(),
        )
        .unwrap();
        assert!(q0.converged());
        assert!(q0.iterations() <= 2);
    }
}

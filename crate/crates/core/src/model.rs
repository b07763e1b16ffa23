//! Domain types for confounded MDPs with mediators: the tabular generative
//! specification, target policies, trajectories and datasets, plus the exact
//! front-door marginalizations of a tabular model.
//!
//! Conventions: states, actions, mediators and confounders are zero-based
//! dense indices. Models whose natural labels differ from indices (e.g. an
//! action set {-1, 0, 1}) carry a label table mapping index -> label.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CopeError, Result};

const PMF_TOL: f64 = 1e-12;

fn check_row(row: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() || p < 0.0 {
            return Err(CopeError::InvalidPmf(format!(
                "{what}: entry {p} is negative or not finite"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PMF_TOL {
        return Err(CopeError::InvalidPmf(format!(
            "{what}: row sums to {sum}, expected 1 within {PMF_TOL:e}"
        )));
    }
    Ok(())
}

/// Full generative specification of a tabular confounded MDP with mediators.
///
/// The model factorizes as
/// `p_u(u|s) p_a(a|s,u) p_m(m|a,s) p_sr(s',r|m,a,s,u)` with an initial state
/// distribution `nu`. The mediator table is indexed by `(a, s)` only, so the
/// structural requirement that the mediator is unconfounded is enforced by
/// the type rather than checked at runtime. Rewards take finitely many real
/// values (`reward_levels`), which is what makes exact enumeration possible.
///
/// All tables are stored flat in row-major order:
/// `p_u[s][u]`, `p_a[s][u][a]`, `p_m[a][s][m]`,
/// `p_sr[m][a][s][u][s' * n_reward_levels + r]`, `nu[s]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "TabularCmdpwmParts", into = "TabularCmdpwmParts")]
pub struct TabularCmdpwm {
    n_states: usize,
    n_actions: usize,
    n_mediators: usize,
    n_confounders: usize,
    reward_levels: Vec<f64>,
    p_u: Vec<f64>,
    p_a: Vec<f64>,
    p_m: Vec<f64>,
    p_sr: Vec<f64>,
    nu: Vec<f64>,
    action_labels: Vec<f64>,
    confounder_labels: Vec<f64>,
}

/// Serialization mirror of [`TabularCmdpwm`]; deserializing through it
/// re-runs full validation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularCmdpwmParts {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_mediators: usize,
    pub n_confounders: usize,
    pub reward_levels: Vec<f64>,
    pub p_u: Vec<f64>,
    pub p_a: Vec<f64>,
    pub p_m: Vec<f64>,
    pub p_sr: Vec<f64>,
    pub nu: Vec<f64>,
    pub action_labels: Vec<f64>,
    pub confounder_labels: Vec<f64>,
}

impl TryFrom<TabularCmdpwmParts> for TabularCmdpwm {
    type Error = CopeError;
    fn try_from(p: TabularCmdpwmParts) -> Result<Self> {
        TabularCmdpwm::new(p)
    }
}

impl From<TabularCmdpwm> for TabularCmdpwmParts {
    fn from(m: TabularCmdpwm) -> Self {
        TabularCmdpwmParts {
            n_states: m.n_states,
            n_actions: m.n_actions,
            n_mediators: m.n_mediators,
            n_confounders: m.n_confounders,
            reward_levels: m.reward_levels,
            p_u: m.p_u,
            p_a: m.p_a,
            p_m: m.p_m,
            p_sr: m.p_sr,
            nu: m.nu,
            action_labels: m.action_labels,
            confounder_labels: m.confounder_labels,
        }
    }
}

impl TabularCmdpwm {
    /// Validates and builds a specification from raw parts. Refuses rather
    /// than renormalizes: any pmf row off by more than 1e-12 is an error.
    pub fn new(parts: TabularCmdpwmParts) -> Result<Self> {
        let TabularCmdpwmParts {
            n_states,
            n_actions,
            n_mediators,
            n_confounders,
            reward_levels,
            p_u,
            p_a,
            p_m,
            p_sr,
            nu,
            action_labels,
            confounder_labels,
        } = parts;
        if n_states == 0 || n_actions == 0 || n_mediators == 0 || n_confounders == 0 {
            return Err(CopeError::InvalidPmf(
                "all space dimensions must be positive".into(),
            ));
        }
        let n_r = reward_levels.len();
        if n_r == 0 {
            return Err(CopeError::InvalidPmf(
                "reward_levels must be nonempty".into(),
            ));
        }
        if reward_levels.iter().any(|r| !r.is_finite()) {
            return Err(CopeError::InvalidPmf("reward_levels must be finite".into()));
        }
        if action_labels.len() != n_actions {
            return Err(CopeError::InvalidPmf(format!(
                "action_labels has {} entries, expected {n_actions}",
                action_labels.len()
            )));
        }
        if confounder_labels.len() != n_confounders {
            return Err(CopeError::InvalidPmf(format!(
                "confounder_labels has {} entries, expected {n_confounders}",
                confounder_labels.len()
            )));
        }
        let expect = |name: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                Err(CopeError::InvalidPmf(format!(
                    "{name} has {got} entries, expected {want}"
                )))
            } else {
                Ok(())
            }
        };
        expect("p_u", p_u.len(), n_states * n_confounders)?;
        expect("p_a", p_a.len(), n_states * n_confounders * n_actions)?;
        expect("p_m", p_m.len(), n_actions * n_states * n_mediators)?;
        expect(
            "p_sr",
            p_sr.len(),
            n_mediators * n_actions * n_states * n_confounders * n_states * n_r,
        )?;
        expect("nu", nu.len(), n_states)?;

        for s in 0..n_states {
            check_row(
                &p_u[s * n_confounders..(s + 1) * n_confounders],
                &format!("p_u(.|s={s})"),
            )?;
            for u in 0..n_confounders {
                let base = (s * n_confounders + u) * n_actions;
                check_row(&p_a[base..base + n_actions], &format!("p_a(.|s={s},u={u})"))?;
            }
        }
        for a in 0..n_actions {
            for s in 0..n_states {
                let base = (a * n_states + s) * n_mediators;
                check_row(
                    &p_m[base..base + n_mediators],
                    &format!("p_m(.|a={a},s={s})"),
                )?;
            }
        }
        let joint = n_states * n_r;
        for m in 0..n_mediators {
            for a in 0..n_actions {
                for s in 0..n_states {
                    for u in 0..n_confounders {
                        let row = ((m * n_actions + a) * n_states + s) * n_confounders + u;
                        check_row(
                            &p_sr[row * joint..(row + 1) * joint],
                            &format!("p_sr(.|m={m},a={a},s={s},u={u})"),
                        )?;
                    }
                }
            }
        }
        check_row(&nu, "nu")?;

        Ok(TabularCmdpwm {
            n_states,
            n_actions,
            n_mediators,
            n_confounders,
            reward_levels,
            p_u,
            p_a,
            p_m,
            p_sr,
            nu,
            action_labels,
            confounder_labels,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn n_mediators(&self) -> usize {
        self.n_mediators
    }
    pub fn n_confounders(&self) -> usize {
        self.n_confounders
    }
    pub fn n_reward_levels(&self) -> usize {
        self.reward_levels.len()
    }
    pub fn reward_levels(&self) -> &[f64] {
        &self.reward_levels
    }
    pub fn action_labels(&self) -> &[f64] {
        &self.action_labels
    }
    pub fn confounder_labels(&self) -> &[f64] {
        &self.confounder_labels
    }

    /// Largest absolute reward value; the R_max of truncation bounds.
    pub fn r_max(&self) -> f64 {
        self.reward_levels.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn p_u(&self, u: usize, s: usize) -> f64 {
        self.p_u[s * self.n_confounders + u]
    }
    pub fn p_a(&self, a: usize, s: usize, u: usize) -> f64 {
        self.p_a[(s * self.n_confounders + u) * self.n_actions + a]
    }
    pub fn p_m(&self, m: usize, a: usize, s: usize) -> f64 {
        self.p_m[(a * self.n_states + s) * self.n_mediators + m]
    }
    /// Joint probability of (next state, reward level) given (m, a, s, u).
    pub fn p_sr(&self, s_next: usize, r: usize, m: usize, a: usize, s: usize, u: usize) -> f64 {
        let row = ((m * self.n_actions + a) * self.n_states + s) * self.n_confounders + u;
        self.p_sr
            [row * self.n_states * self.reward_levels.len() + s_next * self.reward_levels.len() + r]
    }
    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(CopeError::IndexOutOfRange(format!(
                "state {s} out of range (n_states={})",
                self.n_states
            )));
        }
        Ok(())
    }
    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(CopeError::IndexOutOfRange(format!(
                "action {a} out of range (n_actions={})",
                self.n_actions
            )));
        }
        Ok(())
    }
    fn check_mediator(&self, m: usize) -> Result<()> {
        if m >= self.n_mediators {
            return Err(CopeError::IndexOutOfRange(format!(
                "mediator {m} out of range (n_mediators={})",
                self.n_mediators
            )));
        }
        Ok(())
    }

    /// State-marginal behavior policy `p_a*(a|s) = sum_u p_a(a|s,u) p_u(u|s)`.
    pub fn marginal_behavior_policy(&self, s: usize) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let mut out = vec![0.0; self.n_actions];
        for u in 0..self.n_confounders {
            let pu = self.p_u(u, s);
            for (a, o) in out.iter_mut().enumerate() {
                *o += self.p_a(a, s, u) * pu;
            }
        }
        Ok(out)
    }

    /// Bayes posterior of the confounder given an observed action,
    /// `p(u|s,a) = p_a(a|s,u) p_u(u|s) / p_a*(a|s)`.
    pub fn posterior_confounder(&self, s: usize, a: usize) -> Result<Vec<f64>> {
        self.check_state(s)?;
        self.check_action(a)?;
        let mut weights = vec![0.0; self.n_confounders];
        let mut marginal = 0.0;
        for (u, w) in weights.iter_mut().enumerate() {
            *w = self.p_a(a, s, u) * self.p_u(u, s);
            marginal += *w;
        }
        if marginal <= 0.0 {
            return Err(CopeError::ZeroMarginal(format!(
                "p_a*(a={a}|s={s}) = 0; the posterior over confounders is undefined"
            )));
        }
        for w in &mut weights {
            *w /= marginal;
        }
        Ok(weights)
    }

    /// Front-door transition marginal `p_sr*(s',r|m,a,s)`: the confounder is
    /// integrated against its posterior given (s,a). Valid because the
    /// mediator is conditionally independent of the confounder given (a,s).
    ///
    /// Returned flat over `s' * n_reward_levels + r`.
    pub fn marginal_transition(&self, m: usize, a: usize, s: usize) -> Result<Vec<f64>> {
        self.check_mediator(m)?;
        let posterior = self.posterior_confounder(s, a)?;
        let n_r = self.reward_levels.len();
        let mut out = vec![0.0; self.n_states * n_r];
        for (u, &w) in posterior.iter().enumerate() {
            for s2 in 0..self.n_states {
                for r in 0..n_r {
                    out[s2 * n_r + r] += w * self.p_sr(s2, r, m, a, s, u);
                }
            }
        }
        Ok(out)
    }

    /// Mean reward under the front-door transition marginal.
    pub fn marginal_mean_reward(&self, m: usize, a: usize, s: usize) -> Result<f64> {
        let joint = self.marginal_transition(m, a, s)?;
        let n_r = self.reward_levels.len();
        let mut mean = 0.0;
        for s2 in 0..self.n_states {
            for (r, &level) in self.reward_levels.iter().enumerate() {
                mean += joint[s2 * n_r + r] * level;
            }
        }
        Ok(mean)
    }

    /// Next-state marginal of [`Self::marginal_transition`].
    pub fn marginal_next_state(&self, m: usize, a: usize, s: usize) -> Result<Vec<f64>> {
        let joint = self.marginal_transition(m, a, s)?;
        let n_r = self.reward_levels.len();
        let mut out = vec![0.0; self.n_states];
        for (s2, o) in out.iter_mut().enumerate() {
            *o = joint[s2 * n_r..(s2 + 1) * n_r].iter().sum();
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

type PolicyFn<S> = Arc<dyn Fn(&S) -> Vec<f64> + Send + Sync>;

/// A stochastic target policy: a pmf over actions per state. Tabular policies
/// are index lookups; continuous-state policies evaluate a callable on the
/// state vector.
pub struct PolicySpec<S> {
    n_actions: usize,
    eval: PolicyFn<S>,
    tabular_rows: Option<Arc<Vec<Vec<f64>>>>,
}

impl<S> Clone for PolicySpec<S> {
    fn clone(&self) -> Self {
        PolicySpec {
            n_actions: self.n_actions,
            eval: Arc::clone(&self.eval),
            tabular_rows: self.tabular_rows.clone(),
        }
    }
}

impl PolicySpec<usize> {
    /// Tabular policy from per-state rows; each row must sum to 1 within 1e-12.
    pub fn tabular(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CopeError::InvalidPmf("policy table has no states".into()));
        }
        let n_actions = rows[0].len();
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n_actions {
                return Err(CopeError::InvalidPmf(format!(
                    "policy row for state {s} has {} entries, expected {n_actions}",
                    row.len()
                )));
            }
            check_row(row, &format!("pi(.|s={s})"))?;
        }
        let rows = Arc::new(rows);
        let captured = Arc::clone(&rows);
        Ok(PolicySpec {
            n_actions,
            eval: Arc::new(move |s: &usize| captured[*s].clone()),
            tabular_rows: Some(rows),
        })
    }

    /// The policy table when this policy was built from one.
    pub fn rows(&self) -> Option<&[Vec<f64>]> {
        self.tabular_rows.as_deref().map(|v| v.as_slice())
    }
}

impl<S> PolicySpec<S> {
    /// Policy from a callable returning the action pmf at a state.
    pub fn from_fn<F>(n_actions: usize, f: F) -> Self
    where
        F: Fn(&S) -> Vec<f64> + Send + Sync + 'static,
    {
        PolicySpec {
            n_actions,
            eval: Arc::new(f),
            tabular_rows: None,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Action pmf at `s`.
    pub fn probs(&self, s: &S) -> Vec<f64> {
        let p = (self.eval)(s);
        debug_assert_eq!(p.len(), self.n_actions);
        debug_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        p
    }

    pub fn prob(&self, a: usize, s: &S) -> f64 {
        self.probs(s)[a]
    }
}

/// One observed transition within a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Step<S> {
    pub state: S,
    pub action: usize,
    pub mediator: usize,
    pub reward: f64,
}

/// An ordered record of (state, action, mediator, reward) tuples plus the
/// state observed after the final step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    steps: Vec<Step<S>>,
    terminal_state: S,
}

impl<S> Trajectory<S> {
    pub fn new(steps: Vec<Step<S>>, terminal_state: S) -> Result<Self> {
        if steps.is_empty() {
            return Err(CopeError::InvalidArgument(
                "a trajectory must contain at least one step".into(),
            ));
        }
        Ok(Trajectory {
            steps,
            terminal_state,
        })
    }

    pub fn steps(&self) -> &[Step<S>] {
        &self.steps
    }

    pub fn terminal_state(&self) -> &S {
        &self.terminal_state
    }

    /// Number of recorded steps T_i.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The state following step `t`: the next step's state, or the terminal
    /// state after the last step.
    pub fn next_state(&self, t: usize) -> &S {
        if t + 1 < self.steps.len() {
            &self.steps[t + 1].state
        } else {
            &self.terminal_state
        }
    }

    pub fn initial_state(&self) -> &S {
        &self.steps[0].state
    }
}

/// A batch of trajectories sharing one state space.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    trajectories: Vec<Trajectory<S>>,
}

impl<S> Dataset<S> {
    pub fn new(trajectories: Vec<Trajectory<S>>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(CopeError::EmptyDataset);
        }
        Ok(Dataset { trajectories })
    }

    pub fn trajectories(&self) -> &[Trajectory<S>] {
        &self.trajectories
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// Iterator over all (trajectory index, step index, step, next state).
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize, &Step<S>, &S)> {
        self.trajectories.iter().enumerate().flat_map(|(i, traj)| {
            traj.steps()
                .iter()
                .enumerate()
                .map(move |(t, step)| (i, t, step, traj.next_state(t)))
        })
    }

    pub fn initial_states(&self) -> impl Iterator<Item = &S> {
        self.trajectories.iter().map(|t| t.initial_state())
    }
}

impl Dataset<usize> {
    /// Bounds check against a tabular spec's dimensions.
    pub fn validate_tabular(
        &self,
        n_states: usize,
        n_actions: usize,
        n_mediators: usize,
    ) -> Result<()> {
        for traj in &self.trajectories {
            for step in traj.steps() {
                if step.state >= n_states
                    || step.action >= n_actions
                    || step.mediator >= n_mediators
                {
                    return Err(CopeError::IndexOutOfRange(format!(
                        "step (s={}, a={}, m={}) outside ({n_states}, {n_actions}, {n_mediators})",
                        step.state, step.action, step.mediator
                    )));
                }
            }
            if *traj.terminal_state() >= n_states {
                return Err(CopeError::IndexOutOfRange(format!(
                    "terminal state {} outside {n_states}",
                    traj.terminal_state()
                )));
            }
        }
        Ok(())
    }
}

impl Dataset<Vec<f64>> {
    /// All state vectors must share one dimension; returns it.
    pub fn state_dim(&self) -> Result<usize> {
        let d = self.trajectories[0].initial_state().len();
        for traj in &self.trajectories {
            for step in traj.steps() {
                if step.state.len() != d {
                    return Err(CopeError::InvalidArgument(format!(
                        "state dimension {} != {d}",
                        step.state.len()
                    )));
                }
            }
            if traj.terminal_state().len() != d {
                return Err(CopeError::InvalidArgument(format!(
                    "terminal state dimension {} != {d}",
                    traj.terminal_state().len()
                )));
            }
        }
        Ok(d)
    }
}

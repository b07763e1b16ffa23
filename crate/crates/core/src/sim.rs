//! Trajectory simulation: the two benchmark environments, observational data
//! generation under the confounded behavior policy, and Monte Carlo rollouts
//! under do-interventions of a target policy.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{CopeError, Result};
use crate::math::{mean, sample_sd, sigmoid};
use crate::model::{Dataset, PolicySpec, Step, TabularCmdpwm, TabularCmdpwmParts, Trajectory};
use crate::seeding::trajectory_rng;

/// Tag distinguishing the two environment families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Tabular,
    Continuous,
}

/// Sampling interface of a confounded MDP with mediators. Actions, mediators
/// and confounders are sampled as dense indices; states are whatever the
/// environment uses. The mediator sampler takes no confounder argument, so
/// the requirement that mediators be unconfounded holds by construction.
pub trait GenerativeEnv: Send + Sync {
    type State: Clone + Send + Sync + 'static;

    fn kind(&self) -> EnvKind;
    fn n_actions(&self) -> usize;
    fn n_mediators(&self) -> usize;
    fn sample_initial_state(&self, rng: &mut ChaCha12Rng) -> Self::State;
    fn sample_confounder(&self, s: &Self::State, rng: &mut ChaCha12Rng) -> usize;
    fn sample_action_behavior(&self, s: &Self::State, u: usize, rng: &mut ChaCha12Rng) -> usize;
    fn sample_mediator(&self, a: usize, s: &Self::State, rng: &mut ChaCha12Rng) -> usize;
    fn sample_reward_and_next(
        &self,
        m: usize,
        a: usize,
        s: &Self::State,
        u: usize,
        rng: &mut ChaCha12Rng,
    ) -> (f64, Self::State);

    /// Largest possible |reward|, when the environment has one.
    fn reward_bound(&self) -> Option<f64>;
}

/// Draws an index from a pmf given one uniform variate.
pub(crate) fn sample_categorical(pmf: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.len() - 1
}

/// A generative environment backed by an explicit tabular specification.
pub struct TabularEnv {
    spec: TabularCmdpwm,
}

impl TabularEnv {
    pub fn new(spec: TabularCmdpwm) -> Self {
        TabularEnv { spec }
    }

    /// The exact tables driving this environment, for the oracle.
    pub fn tabular_spec(&self) -> &TabularCmdpwm {
        &self.spec
    }
}

impl GenerativeEnv for TabularEnv {
    type State = usize;

    fn kind(&self) -> EnvKind {
        EnvKind::Tabular
    }
    fn n_actions(&self) -> usize {
        self.spec.n_actions()
    }
    fn n_mediators(&self) -> usize {
        self.spec.n_mediators()
    }

    fn sample_initial_state(&self, rng: &mut ChaCha12Rng) -> usize {
        sample_categorical(self.spec.nu(), rng)
    }

    fn sample_confounder(&self, s: &usize, rng: &mut ChaCha12Rng) -> usize {
        let pmf: Vec<f64> = (0..self.spec.n_confounders())
            .map(|u| self.spec.p_u(u, *s))
            .collect();
        sample_categorical(&pmf, rng)
    }

    fn sample_action_behavior(&self, s: &usize, u: usize, rng: &mut ChaCha12Rng) -> usize {
        let pmf: Vec<f64> = (0..self.spec.n_actions())
            .map(|a| self.spec.p_a(a, *s, u))
            .collect();
        sample_categorical(&pmf, rng)
    }

    fn sample_mediator(&self, a: usize, s: &usize, rng: &mut ChaCha12Rng) -> usize {
        let pmf: Vec<f64> = (0..self.spec.n_mediators())
            .map(|m| self.spec.p_m(m, a, *s))
            .collect();
        sample_categorical(&pmf, rng)
    }

    fn sample_reward_and_next(
        &self,
        m: usize,
        a: usize,
        s: &usize,
        u: usize,
        rng: &mut ChaCha12Rng,
    ) -> (f64, usize) {
        let n_r = self.spec.n_reward_levels();
        let joint: Vec<f64> = (0..self.spec.n_states() * n_r)
            .map(|k| self.spec.p_sr(k / n_r, k % n_r, m, a, *s, u))
            .collect();
        let k = sample_categorical(&joint, rng);
        (self.spec.reward_levels()[k % n_r], k / n_r)
    }

    fn reward_bound(&self) -> Option<f64> {
        Some(self.spec.r_max())
    }
}

/// The two-state toy benchmark. States and mediators are binary, actions take
/// labels {-1, 0, +1} (indices 0, 1, 2) and the confounder labels {-1, +1}
/// (indices 0, 1). Rewards take values {0, 10}, drawn independently of the
/// next state given (s, u, m) with the same success probability
/// `sigmoid(0.5 * I(u=+1) * (s + m) - 0.1 s)`.
pub fn build_toy_env() -> TabularEnv {
    let n_states = 2;
    let n_actions = 3;
    let n_mediators = 2;
    let n_confounders = 2;
    let action_labels = vec![-1.0, 0.0, 1.0];
    let confounder_labels = vec![-1.0, 1.0];
    let reward_levels = vec![0.0, 10.0];

    let mut p_u = Vec::new();
    for _s in 0..n_states {
        p_u.extend_from_slice(&[0.5, 0.5]);
    }

    // p_a(+-1 | s, u) = 0.5 sigmoid(0.1 s + 0.9 u), p_a(0 | s, u) = 1 - sigmoid(.)
    let mut p_a = Vec::new();
    for s in 0..n_states {
        for u_label in &confounder_labels {
            let g = sigmoid(0.1 * s as f64 + 0.9 * u_label);
            p_a.extend_from_slice(&[0.5 * g, 1.0 - g, 0.5 * g]);
        }
    }

    // p_m(1 | a, s) = sigmoid(0.1 s - 0.9 (a - 0.5)) with a the action label.
    let mut p_m = Vec::new();
    for a_label in &action_labels {
        for s in 0..n_states {
            let g = sigmoid(0.1 * s as f64 - 0.9 * (a_label - 0.5));
            p_m.extend_from_slice(&[1.0 - g, g]);
        }
    }

    // Reward and next state are conditionally independent coin flips sharing
    // success probability q(s, u, m); neither depends on the action.
    let mut p_sr = Vec::new();
    for m in 0..n_mediators {
        for _a in 0..n_actions {
            for s in 0..n_states {
                for u_label in &confounder_labels {
                    let ind = if *u_label > 0.0 { 1.0 } else { 0.0 };
                    let q = sigmoid(0.5 * ind * (s as f64 + m as f64) - 0.1 * s as f64);
                    // joint over (s', r) with layout s' * 2 + r
                    p_sr.extend_from_slice(&[
                        (1.0 - q) * (1.0 - q),
                        (1.0 - q) * q,
                        q * (1.0 - q),
                        q * q,
                    ]);
                }
            }
        }
    }

    let spec = TabularCmdpwm::new(TabularCmdpwmParts {
        n_states,
        n_actions,
        n_mediators,
        n_confounders,
        reward_levels,
        p_u,
        p_a,
        p_m,
        p_sr,
        nu: vec![0.5, 0.5],
        action_labels,
        confounder_labels,
    })
    .expect("toy tables are valid by construction");
    TabularEnv::new(spec)
}

/// The toy benchmark's evaluation policy: pi(0|s) = 1 - sigmoid(0.3 s),
/// pi(+-1|s) = 0.5 sigmoid(0.3 s).
pub fn toy_target_policy() -> PolicySpec<usize> {
    let rows: Vec<Vec<f64>> = (0..2)
        .map(|s| {
            let g = sigmoid(0.3 * s as f64);
            vec![0.5 * g, 1.0 - g, 0.5 * g]
        })
        .collect();
    PolicySpec::tabular(rows).expect("toy policy rows are valid by construction")
}

/// Continuous-state comparison benchmark in `d_s` dimensions. The state is a
/// real vector, `C` denotes the sum of its coordinates, actions and mediators
/// are binary (labels 0/1), and the confounder takes labels {-1, +1}.
pub struct ComparisonEnv {
    d_s: usize,
}

impl ComparisonEnv {
    fn c(&self, s: &[f64]) -> f64 {
        s.iter().sum()
    }
}

/// Comparison benchmark: S0 standard normal; p_a(1|s,u) = sigmoid(0.1 C + 0.9 u);
/// p_m(1|a,s) = sigmoid(0.1 C + 0.9 (a - 0.5)); R ~ Normal(0.5 I(u=1)(m + C) - 0.1 C, 0.1^2);
/// S' ~ Normal(0.5 I(u=1)(m 1 + s) - 0.1 s, 0.25 I).
pub fn build_comparison_env(d_s: usize) -> Result<ComparisonEnv> {
    if d_s == 0 {
        return Err(CopeError::InvalidConfig(
            "comparison environment needs a positive state dimension".into(),
        ));
    }
    Ok(ComparisonEnv { d_s })
}

/// The comparison benchmark's evaluation policy: pi(1|s) = sigmoid(0.3 C).
pub fn comparison_target_policy() -> PolicySpec<Vec<f64>> {
    PolicySpec::from_fn(2, |s: &Vec<f64>| {
        let g = sigmoid(0.3 * s.iter().sum::<f64>());
        vec![1.0 - g, g]
    })
}

impl GenerativeEnv for ComparisonEnv {
    type State = Vec<f64>;

    fn kind(&self) -> EnvKind {
        EnvKind::Continuous
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn n_mediators(&self) -> usize {
        2
    }

    fn sample_initial_state(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        (0..self.d_s)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn sample_confounder(&self, _s: &Vec<f64>, rng: &mut ChaCha12Rng) -> usize {
        usize::from(rng.gen::<f64>() < 0.5)
    }

    fn sample_action_behavior(&self, s: &Vec<f64>, u: usize, rng: &mut ChaCha12Rng) -> usize {
        let u_label = if u == 1 { 1.0 } else { -1.0 };
        let p1 = sigmoid(0.1 * self.c(s) + 0.9 * u_label);
        usize::from(rng.gen::<f64>() < p1)
    }

    fn sample_mediator(&self, a: usize, s: &Vec<f64>, rng: &mut ChaCha12Rng) -> usize {
        let p1 = sigmoid(0.1 * self.c(s) + 0.9 * (a as f64 - 0.5));
        usize::from(rng.gen::<f64>() < p1)
    }

    fn sample_reward_and_next(
        &self,
        m: usize,
        _a: usize,
        s: &Vec<f64>,
        u: usize,
        rng: &mut ChaCha12Rng,
    ) -> (f64, Vec<f64>) {
        let ind = if u == 1 { 1.0 } else { 0.0 };
        let c = self.c(s);
        let r_mean = 0.5 * ind * (m as f64 + c) - 0.1 * c;
        let r = r_mean + 0.1 * rng.sample::<f64, _>(StandardNormal);
        let next = s
            .iter()
            .map(|&si| {
                let mu = 0.5 * ind * (m as f64 + si) - 0.1 * si;
                mu + 0.5 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        (r, next)
    }

    fn reward_bound(&self) -> Option<f64> {
        None
    }
}

/// Shape and seed of one observational dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SimConfig {
    pub n_trajectories: usize,
    pub horizon: usize,
    #[serde(default)]
    pub burn_in: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(CopeError::InvalidConfig(
                "n_trajectories must be >= 1".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(CopeError::InvalidConfig("horizon must be >= 1".into()));
        }
        Ok(())
    }
}

/// Simulates `cfg.n_trajectories` trajectories of `cfg.horizon` steps under
/// the environment's confounded behavior policy. Each trajectory runs on its
/// own RNG stream derived from `(cfg.seed, trajectory index)`, so the output
/// is a pure function of the inputs no matter how trajectories are spread
/// over threads. With `burn_in > 0`, each trajectory first takes that many
/// unrecorded behavior-policy steps, so the recorded initial state is drawn
/// near the stationary distribution rather than from the environment's
/// initial one.
pub fn generate_dataset<E: GenerativeEnv>(env: &E, cfg: &SimConfig) -> Result<Dataset<E::State>> {
    cfg.validate()?;
    let trajectories: Vec<Trajectory<E::State>> = (0..cfg.n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(cfg.seed, i as u64);
            let mut s = env.sample_initial_state(&mut rng);
            for _ in 0..cfg.burn_in {
                let u = env.sample_confounder(&s, &mut rng);
                let a = env.sample_action_behavior(&s, u, &mut rng);
                let m = env.sample_mediator(a, &s, &mut rng);
                let (_r, next) = env.sample_reward_and_next(m, a, &s, u, &mut rng);
                s = next;
            }
            let mut steps = Vec::with_capacity(cfg.horizon);
            for _ in 0..cfg.horizon {
                let u = env.sample_confounder(&s, &mut rng);
                let a = env.sample_action_behavior(&s, u, &mut rng);
                let m = env.sample_mediator(a, &s, &mut rng);
                let (r, next) = env.sample_reward_and_next(m, a, &s, u, &mut rng);
                steps.push(Step {
                    state: s.clone(),
                    action: a,
                    mediator: m,
                    reward: r,
                });
                s = next;
            }
            Trajectory::new(steps, s).expect("horizon >= 1 yields nonempty steps")
        })
        .collect();
    Dataset::new(trajectories)
}

/// Monte Carlo estimate of a discounted value from independent rollouts.
#[derive(Clone, Copy, Debug)]
pub struct RolloutEstimate {
    /// Average truncated discounted return.
    pub value: f64,
    /// Monte Carlo standard error of `value`.
    pub mc_se: f64,
    /// Bound on the truncation bias `gamma^horizon * R_max / (1 - gamma)`,
    /// when the environment has a reward bound.
    pub truncation_bound: Option<f64>,
    pub horizon: usize,
}

/// Smallest horizon h with `gamma^h * r_max / (1 - gamma) < tol`.
pub fn truncation_horizon(gamma: f64, r_max: f64, tol: f64) -> usize {
    if gamma <= 0.0 || r_max <= 0.0 {
        return 1;
    }
    let mut h = 1usize;
    let mut tail = gamma * r_max / (1.0 - gamma);
    while tail >= tol && h < 1_000_000 {
        tail *= gamma;
        h += 1;
    }
    h
}

/// Estimates the target policy's value `E[sum_t gamma^t R_t]` by simulating
/// do-interventions: at every step the action is drawn from `pi` regardless
/// of the confounder, which is still drawn by nature and still drives rewards
/// and transitions.
pub fn rollout_target_value<E: GenerativeEnv>(
    env: &E,
    pi: &PolicySpec<E::State>,
    gamma: f64,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<RolloutEstimate> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CopeError::InvalidArgument(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    if n_rollouts < 2 || horizon == 0 {
        return Err(CopeError::InvalidArgument(
            "need n_rollouts >= 2 and horizon >= 1".into(),
        ));
    }
    let returns: Vec<f64> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let mut s = env.sample_initial_state(&mut rng);
            let mut total = 0.0;
            let mut disc = 1.0;
            for _ in 0..horizon {
                let u = env.sample_confounder(&s, &mut rng);
                let a = sample_categorical(&pi.probs(&s), &mut rng);
                let m = env.sample_mediator(a, &s, &mut rng);
                let (r, next) = env.sample_reward_and_next(m, a, &s, u, &mut rng);
                total += disc * r;
                disc *= gamma;
                s = next;
            }
            total
        })
        .collect();
    let value = mean(&returns);
    let mc_se = sample_sd(&returns) / (n_rollouts as f64).sqrt();
    let truncation_bound = env
        .reward_bound()
        .map(|r_max| gamma.powi(horizon as i32) * r_max / (1.0 - gamma));
    Ok(RolloutEstimate {
        value,
        mc_se,
        truncation_bound,
        horizon,
    })
}

/// States that can round-trip through the dataset CSV schema.
pub trait CsvState: Sized + Clone {
    fn headers(&self) -> Vec<String>;
    fn fields(&self) -> Vec<String>;
    fn parse(fields: &[&str]) -> Result<Self>;
}

impl CsvState for usize {
    fn headers(&self) -> Vec<String> {
        vec!["s".into()]
    }
    fn fields(&self) -> Vec<String> {
        vec![self.to_string()]
    }
    fn parse(fields: &[&str]) -> Result<Self> {
        fields[0].parse().map_err(|e| {
            CopeError::InvalidArgument(format!("bad state field {:?}: {e}", fields[0]))
        })
    }
}

impl CsvState for Vec<f64> {
    fn headers(&self) -> Vec<String> {
        (0..self.len()).map(|i| format!("s{i}")).collect()
    }
    fn fields(&self) -> Vec<String> {
        self.iter().map(|v| v.to_string()).collect()
    }
    fn parse(fields: &[&str]) -> Result<Self> {
        fields
            .iter()
            .map(|f| {
                f.parse()
                    .map_err(|e| CopeError::InvalidArgument(format!("bad state field {f:?}: {e}")))
            })
            .collect()
    }
}

/// Writes a dataset as columnar CSV: `traj_id, t, <state cols>, action,
/// mediator, reward`. Each trajectory ends with one terminal row at
/// `t = T_i` whose action, mediator and reward columns are empty.
pub fn write_dataset_csv<S: CsvState, W: std::io::Write>(
    data: &Dataset<S>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let state_headers = data.trajectories()[0].initial_state().headers();
    let mut header = vec!["traj_id".to_string(), "t".to_string()];
    header.extend(state_headers);
    header.extend(["action".into(), "mediator".into(), "reward".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for (i, traj) in data.trajectories().iter().enumerate() {
        for (t, step) in traj.steps().iter().enumerate() {
            let mut rec = vec![i.to_string(), t.to_string()];
            rec.extend(step.state.fields());
            rec.push(step.action.to_string());
            rec.push(step.mediator.to_string());
            rec.push(step.reward.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let mut rec = vec![i.to_string(), traj.len().to_string()];
        rec.extend(traj.terminal_state().fields());
        rec.extend(["".to_string(), "".to_string(), "".to_string()]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CopeError {
    CopeError::InvalidArgument(format!("csv: {e}"))
}

/// Reads a dataset written by [`write_dataset_csv`]. Rows must be grouped by
/// `traj_id` and ordered by `t`, each group closing with its terminal row.
pub fn read_dataset_csv<S: CsvState, R: std::io::Read>(reader: R) -> Result<Dataset<S>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(csv_err)?.clone();
    let n_cols = header.len();
    if n_cols < 6 {
        return Err(CopeError::InvalidArgument(format!(
            "dataset csv needs at least 6 columns, found {n_cols}"
        )));
    }
    let n_state_cols = n_cols - 5;
    let mut trajectories = Vec::new();
    let mut current: Vec<Step<S>> = Vec::new();
    let mut current_id: Option<u64> = None;
    for record in r.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != n_cols {
            return Err(CopeError::InvalidArgument(format!(
                "row has {} columns, expected {n_cols}",
                record.len()
            )));
        }
        let traj_id: u64 = record[0].parse().map_err(|e| {
            CopeError::InvalidArgument(format!("bad traj_id {:?}: {e}", &record[0]))
        })?;
        if let Some(open_id) = current_id {
            if open_id != traj_id {
                return Err(CopeError::InvalidArgument(format!(
                    "trajectory {open_id} interleaved or missing its terminal row"
                )));
            }
        }
        let state_fields: Vec<&str> = (0..n_state_cols).map(|k| &record[2 + k]).collect();
        let state = S::parse(&state_fields)?;
        let action_field = &record[2 + n_state_cols];
        if action_field.is_empty() {
            // terminal row closes the trajectory
            trajectories.push(Trajectory::new(std::mem::take(&mut current), state)?);
            current_id = None;
        } else {
            let action: usize = action_field
                .parse()
                .map_err(|e| CopeError::InvalidArgument(format!("bad action: {e}")))?;
            let mediator: usize = record[3 + n_state_cols]
                .parse()
                .map_err(|e| CopeError::InvalidArgument(format!("bad mediator: {e}")))?;
            let reward: f64 = record[4 + n_state_cols]
                .parse()
                .map_err(|e| CopeError::InvalidArgument(format!("bad reward: {e}")))?;
            current.push(Step {
                state,
                action,
                mediator,
                reward,
            });
            current_id = Some(traj_id);
        }
    }
    if current_id.is_some() {
        return Err(CopeError::InvalidArgument(
            "file ended inside a trajectory (missing terminal row)".into(),
        ));
    }
    Dataset::new(trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TabularCmdpwmParts;

    #[test]
    fn toy_mediator_probability_matches_formula() {
        let env = build_toy_env();
        let spec = env.tabular_spec();
        // action label 0 is index 1; independent scalar evaluation of the formula
        let expected = 1.0 / (1.0 + (-0.45f64).exp());
        assert!((spec.p_m(1, 1, 0) - expected).abs() < 1e-15);
        assert!((expected - 0.6106).abs() < 5e-5);
    }

    #[test]
    fn toy_target_policy_at_zero() {
        let pi = toy_target_policy();
        let p = pi.probs(&0);
        assert!((p[1] - 0.5).abs() < 1e-15);
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let env = build_toy_env();
        let cfg = SimConfig {
            n_trajectories: 3,
            horizon: 5,
            burn_in: 0,
            seed: 11,
        };
        let d1 = generate_dataset(&env, &cfg).unwrap();
        assert_eq!(d1.n_trajectories(), 3);
        for traj in d1.trajectories() {
            assert_eq!(traj.len(), 5);
        }
        let d2 = generate_dataset(&env, &cfg).unwrap();
        assert_eq!(d1.trajectories(), d2.trajectories());
        let d3 = generate_dataset(&env, &SimConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(d1.trajectories(), d3.trajectories());
    }

    #[test]
    fn empirical_action_frequency_matches_marginal_policy() {
        let env = build_toy_env();
        let cfg = SimConfig {
            n_trajectories: 2000,
            horizon: 100,
            burn_in: 0,
            seed: 7,
        };
        let data = generate_dataset(&env, &cfg).unwrap();
        let mut visits = 0usize;
        let mut zeros = 0usize;
        for (_, _, step, _) in data.transitions() {
            if step.state == 0 {
                visits += 1;
                if step.action == 1 {
                    zeros += 1;
                }
            }
        }
        let p_hat = zeros as f64 / visits as f64;
        let se = (0.5 * 0.5 / visits as f64).sqrt();
        assert!(
            (p_hat - 0.5).abs() < 3.0 * se,
            "p_hat={p_hat}, visits={visits}"
        );
    }

    #[test]
    fn burn_in_reaches_stationarity() {
        let env = build_toy_env();
        let cfg = SimConfig {
            n_trajectories: 20_000,
            horizon: 2,
            burn_in: 200,
            seed: 3,
        };
        let data = generate_dataset(&env, &cfg).unwrap();
        let n = data.n_trajectories() as f64;
        let first: f64 = data
            .trajectories()
            .iter()
            .map(|t| t.steps()[0].state as f64)
            .sum::<f64>()
            / n;
        let last: f64 = data
            .trajectories()
            .iter()
            .map(|t| t.steps()[1].state as f64)
            .sum::<f64>()
            / n;
        assert!((first - last).abs() < 0.02, "first={first}, last={last}");
    }

    #[test]
    fn comparison_reward_mean_matches_closed_form() {
        let env = build_comparison_env(2).unwrap();
        // fixed (s, u, m); closed-form mean 0.5 * I(u=1) * (m + C) - 0.1 C
        let s = vec![0.4, -0.1];
        let c: f64 = 0.3;
        for (u, m) in [(0usize, 0usize), (1, 0), (1, 1)] {
            let expected = 0.5 * (u as f64) * (m as f64 + c) - 0.1 * c;
            let mut rng = trajectory_rng(99, (u * 2 + m) as u64);
            let n = 100_000;
            let draws: Vec<f64> = (0..n)
                .map(|_| env.sample_reward_and_next(m, 0, &s, u, &mut rng).0)
                .collect();
            let mu = mean(&draws);
            let se = sample_sd(&draws) / (n as f64).sqrt();
            assert!(
                (mu - expected).abs() < 3.0 * se,
                "u={u} m={m}: {mu} vs {expected}"
            );
        }
    }

    #[test]
    fn comparison_reward_mean_zero_at_origin() {
        let env = build_comparison_env(3).unwrap();
        let s = vec![0.0; 3];
        let mut rng = trajectory_rng(5, 0);
        let n = 50_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| env.sample_reward_and_next(0, 1, &s, 0, &mut rng).0)
            .collect();
        let mu = mean(&draws);
        let se = sample_sd(&draws) / (n as f64).sqrt();
        assert!(mu.abs() < 3.0 * se);
    }

    #[test]
    fn rollout_geometric_sum_for_constant_reward() {
        // single state, single action/mediator/confounder, reward always c
        let c = 2.5;
        let spec = TabularCmdpwm::new(TabularCmdpwmParts {
            n_states: 1,
            n_actions: 1,
            n_mediators: 1,
            n_confounders: 1,
            reward_levels: vec![c],
            p_u: vec![1.0],
            p_a: vec![1.0],
            p_m: vec![1.0],
            p_sr: vec![1.0],
            nu: vec![1.0],
            action_labels: vec![0.0],
            confounder_labels: vec![0.0],
        })
        .unwrap();
        let env = TabularEnv::new(spec);
        let pi = PolicySpec::tabular(vec![vec![1.0]]).unwrap();
        let gamma = 0.9;
        let horizon = 40;
        let est = rollout_target_value(&env, &pi, gamma, 10, horizon, 1).unwrap();
        let expected = c * (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma);
        assert!((est.value - expected).abs() < 1e-12);
        assert!(est.mc_se.abs() < 1e-12);
        let bound = est.truncation_bound.unwrap();
        assert!((bound - gamma.powi(horizon as i32) * c / (1.0 - gamma)).abs() < 1e-15);
    }

    #[test]
    fn rollout_gamma_zero_is_mean_first_reward() {
        let env = build_toy_env();
        let pi = toy_target_policy();
        let est = rollout_target_value(&env, &pi, 0.0, 5000, 1, 21).unwrap();
        // same seed, horizon 3: gamma=0 must still only count the first reward
        let est3 = rollout_target_value(&env, &pi, 0.0, 5000, 3, 21).unwrap();
        assert!((est.value - est3.value).abs() < 1e-12);
        assert!(est.value > 0.0 && est.value < 10.0);
    }

    #[test]
    fn truncation_horizon_thresholds() {
        assert_eq!(truncation_horizon(0.0, 10.0, 1e-4), 1);
        let h = truncation_horizon(0.9, 10.0, 1e-4);
        assert!(0.9f64.powi(h as i32) * 10.0 / 0.1 < 1e-4);
        assert!(0.9f64.powi(h as i32 - 1) * 10.0 / 0.1 >= 1e-4);
    }

    #[test]
    fn csv_round_trip_tabular() {
        let env = build_toy_env();
        let cfg = SimConfig {
            n_trajectories: 4,
            horizon: 6,
            burn_in: 0,
            seed: 2,
        };
        let data = generate_dataset(&env, &cfg).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&data, &mut buf).unwrap();
        let back: Dataset<usize> = read_dataset_csv(&buf[..]).unwrap();
        assert_eq!(data.trajectories(), back.trajectories());
    }

    #[test]
    fn csv_round_trip_continuous() {
        let env = build_comparison_env(3).unwrap();
        let cfg = SimConfig {
            n_trajectories: 3,
            horizon: 4,
            burn_in: 0,
            seed: 8,
        };
        let data = generate_dataset(&env, &cfg).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&data, &mut buf).unwrap();
        let back: Dataset<Vec<f64>> = read_dataset_csv(&buf[..]).unwrap();
        assert_eq!(data.trajectories(), back.trajectories());
        assert_eq!(back.state_dim().unwrap(), 3);
    }

    #[test]
    fn csv_read_rejects_truncated_file() {
        let text = "traj_id,t,s,action,mediator,reward\n0,0,1,2,0,10\n";
        let res: Result<Dataset<usize>> = read_dataset_csv(text.as_bytes());
        assert!(res.is_err());
    }
}

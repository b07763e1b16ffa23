//! The confounded off-policy value estimator: the front-door plug-in term,
//! the three augmentation terms, the combined point estimate with its
//! Wald confidence interval, a confidence interval for the value difference
//! of two policies, and the unconfounded baselines (REG / MIS / DRL, with
//! optional mediator-augmented state variants).
//!
//! The estimand is the unnormalized discounted value
//! `eta = sum_t gamma^t E[R_t]` under the target policy.

use serde::{Deserialize, Serialize};

use crate::error::{CopeError, Result};
use crate::features::{fit_fourier_map, StateFeatures, StateKey};
use crate::math::{sample_variance, z_two_sided};
use crate::model::{Dataset, PolicySpec, Step, Trajectory};
pub use crate::nuisance::rho;
use crate::nuisance::{
    estimate_pa_star_continuous, estimate_pa_star_tabular, fitted_q_evaluation, omega_from_ratios,
    CondPmf, FittedQConfig, InitialDistribution, NuisanceConfig, NuisanceSet, QFunction,
    RatioFunction,
};

/// A point estimate of the discounted value with its Wald confidence
/// interval and the per-trajectory contributions behind the variance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub method: String,
    pub estimate: f64,
    /// Standard error of the point estimate: sampling SD of the
    /// per-trajectory contributions over sqrt(N).
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub n_trajectories: usize,
    pub total_steps: usize,
    pub per_trajectory: Vec<f64>,
}

impl ValueEstimate {
    /// Assembles the estimate from the point value and per-trajectory
    /// contributions; the CI is centered at the point value.
    pub fn from_contributions(
        method: impl Into<String>,
        estimate: f64,
        per_trajectory: Vec<f64>,
        total_steps: usize,
        gamma: f64,
        alpha: f64,
    ) -> Result<Self> {
        let n = per_trajectory.len();
        if n < 2 {
            return Err(CopeError::InsufficientTrajectories(n));
        }
        let se = sample_variance(&per_trajectory).sqrt() / (n as f64).sqrt();
        let z = z_two_sided(alpha);
        Ok(ValueEstimate {
            method: method.into(),
            estimate,
            se,
            ci_lower: estimate - z * se,
            ci_upper: estimate + z * se,
            alpha,
            gamma,
            n_trajectories: n,
            total_steps,
            per_trajectory,
        })
    }

    pub fn csv_header() -> &'static str {
        "method,N,T,gamma,estimate,se,ci_lo,ci_hi"
    }

    pub fn csv_row(&self) -> String {
        let t = self.total_steps as f64 / self.n_trajectories as f64;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.n_trajectories,
            t,
            self.gamma,
            self.estimate,
            self.se,
            self.ci_lower,
            self.ci_upper
        )
    }
}

/// A confidence interval for the value difference of two target policies
/// evaluated on the same dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffEstimate {
    pub estimate: f64,
    /// SD of the per-trajectory differences, floored at `delta`, over sqrt(N).
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// The variance floor applied: the SE never drops below `delta/sqrt(N)`.
    pub delta: f64,
    pub n_trajectories: usize,
    pub total_steps: usize,
    pub per_trajectory: Vec<f64>,
}

impl DiffEstimate {
    pub fn csv_row(&self) -> String {
        let t = self.total_steps as f64 / self.n_trajectories as f64;
        format!(
            "DIFF,{},{},{},{},{},{},{}",
            self.n_trajectories,
            t,
            self.gamma,
            self.estimate,
            self.se,
            self.ci_lower,
            self.ci_upper
        )
    }
}

fn check_gamma_alpha(gamma: f64, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CopeError::InvalidArgument(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(CopeError::InvalidArgument(format!(
            "level must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// The front-door state value
/// `V(s) = sum_{m,a,a*} Q(m,a,s) pm(m|a*,s) pa*(a|s) pi(a*|s)`.
pub fn frontdoor_value<S: StateKey>(
    q: &QFunction,
    pm: &CondPmf,
    pa_star: &CondPmf,
    pi: &PolicySpec<S>,
    s: &S,
) -> f64 {
    let n_a = q.n_actions();
    let n_m = q.n_mediators();
    let pi_row = pi.probs(s);
    let pa = pa_star.given_state(s);
    let q_all = q.eval_all(s);
    let pm_rows = pm.given_all_actions(s);
    let mut v = 0.0;
    for a_star in 0..n_a {
        if pi_row[a_star] == 0.0 {
            continue;
        }
        let pm_row = &pm_rows[a_star];
        let mut inner = 0.0;
        for m in 0..n_m {
            for a in 0..n_a {
                inner += pm_row[m] * pa[a] * q_all[m * n_a + a];
            }
        }
        v += pi_row[a_star] * inner;
    }
    v
}

/// The front-door plug-in term: the initial-distribution expectation of the
/// front-door state value.
pub fn psi0<S: StateKey>(nuis: &NuisanceSet<S>, pi: &PolicySpec<S>) -> f64 {
    nuis.nu
        .expect_value(&mut |s| frontdoor_value(&nuis.q, &nuis.pm, &nuis.pa_star, pi, s))
}

/// The three augmentation terms of one transition `(S, A, M, R, S')`:
///
/// - `psi1`: the density-ratio- and probability-ratio-weighted temporal
///   difference error of the fitted Q against its front-door backup;
/// - `psi2`: mean zero whenever the mediator law is correctly specified;
/// - `psi3`: mean zero whenever the marginal behavior policy is correctly
///   specified.
///
/// All pmf sums use raw probabilities; only the two denominators (the
/// mediator probability under the behavior action, and the behavior policy
/// probability of the taken action) are clipped.
pub fn augmentation_terms<S: StateKey>(
    step: &Step<S>,
    next_state: &S,
    nuis: &NuisanceSet<S>,
    pi: &PolicySpec<S>,
    gamma: f64,
) -> (f64, f64, f64) {
    let n_a = nuis.q.n_actions();
    let n_m = nuis.q.n_mediators();
    let s = &step.state;
    let omega_s = nuis.omega.eval(s);
    if omega_s == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let c = 1.0 / (1.0 - gamma);
    let pi_s = pi.probs(s);
    let pa_s = nuis.pa_star.given_state(s);
    let pm_s = nuis.pm.given_all_actions(s);
    let q_s = nuis.q.eval_all(s);

    // mediator mixture under the target policy: w[m] = sum_a' pi(a'|S) pm(m|a',S)
    let w: Vec<f64> = (0..n_m)
        .map(|m| (0..n_a).map(|ap| pi_s[ap] * pm_s[ap][m]).sum())
        .collect();

    let rho_v = w[step.mediator] / pm_s[step.action][step.mediator].max(nuis.pm.eps_clip());
    let v_next = frontdoor_value(&nuis.q, &nuis.pm, &nuis.pa_star, pi, next_state);
    let q_ma = q_s[step.mediator * n_a + step.action];
    let psi1 = c * omega_s * rho_v * (step.reward + gamma * v_next - q_ma);

    let ratio = pi_s[step.action] / pa_s[step.action].max(nuis.pa_star.eps_clip());
    let mut sum2 = 0.0;
    for a in 0..n_a {
        if pa_s[a] == 0.0 {
            continue;
        }
        let mut q_bar = 0.0;
        for m in 0..n_m {
            q_bar += pm_s[step.action][m] * q_s[m * n_a + a];
        }
        sum2 += pa_s[a] * (q_s[step.mediator * n_a + a] - q_bar);
    }
    let psi2 = c * omega_s * ratio * sum2;

    let mut sum3 = 0.0;
    for m in 0..n_m {
        let mut q_avg = 0.0;
        for a in 0..n_a {
            q_avg += q_s[m * n_a + a] * pa_s[a];
        }
        sum3 += w[m] * (q_s[m * n_a + step.action] - q_avg);
    }
    let psi3 = c * omega_s * sum3;

    (psi1, psi2, psi3)
}

/// The doubly-robust value estimate: the plug-in term plus the globally
/// averaged augmentation terms,
/// `eta = psi0 + (sum_i T_i)^{-1} sum_{i,t} (psi1 + psi2 + psi3)`.
///
/// The CI is centered at the point estimate with the sampling SD of the
/// per-trajectory contributions
/// `eta_i = V(S_{i,0}) + T_i^{-1} sum_t (psi1 + psi2 + psi3)`;
/// when all trajectories share one length and `nuis.nu` is the empirical
/// initial distribution of this dataset, the point estimate equals the mean
/// of the `eta_i` exactly.
pub fn cope_estimate<S: StateKey>(
    data: &Dataset<S>,
    nuis: &NuisanceSet<S>,
    pi: &PolicySpec<S>,
    gamma: f64,
    alpha: f64,
) -> Result<ValueEstimate> {
    check_gamma_alpha(gamma, alpha)?;
    let n = data.n_trajectories();
    if n < 2 {
        return Err(CopeError::InsufficientTrajectories(n));
    }
    let p0 = psi0(nuis, pi);
    let mut total = 0.0;
    let mut per_trajectory = Vec::with_capacity(n);
    for traj in data.trajectories() {
        let mut traj_sum = 0.0;
        for (t, step) in traj.steps().iter().enumerate() {
            let (p1, p2, p3) = augmentation_terms(step, traj.next_state(t), nuis, pi, gamma);
            traj_sum += p1 + p2 + p3;
        }
        total += traj_sum;
        let v0 = frontdoor_value(&nuis.q, &nuis.pm, &nuis.pa_star, pi, traj.initial_state());
        per_trajectory.push(v0 + traj_sum / traj.len() as f64);
    }
    let point = p0 + total / data.total_steps() as f64;
    ValueEstimate::from_contributions(
        "COPE",
        point,
        per_trajectory,
        data.total_steps(),
        gamma,
        alpha,
    )
}

/// The marginalized importance-sampling value estimate
/// `(1-gamma)^{-1} (sum_i T_i)^{-1} sum_{i,t} R omega(S) rho(M, A, S)`
/// (the reduction of the full estimator at `Q = 0`), tagged `COPE-IS`.
pub fn mis_estimate<S: StateKey>(
    data: &Dataset<S>,
    omega: &RatioFunction,
    pm: &CondPmf,
    pi: &PolicySpec<S>,
    gamma: f64,
    alpha: f64,
) -> Result<ValueEstimate> {
    check_gamma_alpha(gamma, alpha)?;
    let n = data.n_trajectories();
    if n < 2 {
        return Err(CopeError::InsufficientTrajectories(n));
    }
    let c = 1.0 / (1.0 - gamma);
    let mut total = 0.0;
    let mut per_trajectory = Vec::with_capacity(n);
    for traj in data.trajectories() {
        let mut traj_sum = 0.0;
        for step in traj.steps() {
            let omega_s = omega.eval(&step.state);
            if omega_s == 0.0 {
                continue;
            }
            let rho_v = rho(pm, pi, step.mediator, step.action, &step.state);
            traj_sum += c * omega_s * rho_v * step.reward;
        }
        total += traj_sum;
        per_trajectory.push(traj_sum / traj.len() as f64);
    }
    let point = total / data.total_steps() as f64;
    ValueEstimate::from_contributions(
        "COPE-IS",
        point,
        per_trajectory,
        data.total_steps(),
        gamma,
        alpha,
    )
}

/// A confidence interval for `eta(pi2) - eta(pi1)` from one dataset: the
/// per-trajectory contributions of the two estimates are differenced and
/// their sampling variance floored at `delta^2`, so the SE never drops below
/// `delta/sqrt(N)` even when the policies coincide.
#[allow(clippy::too_many_arguments)]
pub fn value_difference_ci<S: StateKey>(
    data: &Dataset<S>,
    nuis1: &NuisanceSet<S>,
    pi1: &PolicySpec<S>,
    nuis2: &NuisanceSet<S>,
    pi2: &PolicySpec<S>,
    gamma: f64,
    alpha: f64,
    delta: f64,
) -> Result<DiffEstimate> {
    let first = cope_estimate(data, nuis1, pi1, gamma, alpha)?;
    let second = cope_estimate(data, nuis2, pi2, gamma, alpha)?;
    let per_trajectory: Vec<f64> = second
        .per_trajectory
        .iter()
        .zip(first.per_trajectory.iter())
        .map(|(b, a)| b - a)
        .collect();
    let n = per_trajectory.len();
    let estimate = second.estimate - first.estimate;
    let variance = sample_variance(&per_trajectory).max(delta * delta);
    let se = variance.sqrt() / (n as f64).sqrt();
    let z = z_two_sided(alpha);
    Ok(DiffEstimate {
        estimate,
        se,
        ci_lower: estimate - z * se,
        ci_upper: estimate + z * se,
        alpha,
        gamma,
        delta,
        n_trajectories: n,
        total_steps: data.total_steps(),
        per_trajectory,
    })
}

/// Options for the baseline estimators.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Also compute the `-M` variants, which append the current mediator to
    /// the state before fitting (the terminal state reuses the last
    /// mediator).
    #[serde(default)]
    pub with_mediator_in_state: bool,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
}

/// The dataset with the mediator folded into the state and the mediator
/// column collapsed, for the `-M` baseline variants.
fn augment_dataset<S: StateKey>(data: &Dataset<S>, n_mediators: usize) -> Dataset<S> {
    let trajectories = data
        .trajectories()
        .iter()
        .map(|traj| {
            let steps: Vec<Step<S>> = traj
                .steps()
                .iter()
                .map(|step| Step {
                    state: step.state.augmented_with(step.mediator, n_mediators),
                    action: step.action,
                    mediator: 0,
                    reward: step.reward,
                })
                .collect();
            let last_m = traj.steps().last().expect("nonempty trajectory").mediator;
            let terminal = traj.terminal_state().augmented_with(last_m, n_mediators);
            Trajectory::new(steps, terminal).expect("nonempty trajectory")
        })
        .collect();
    Dataset::new(trajectories).expect("nonempty dataset")
}

/// The per-transition policy ratio `pi(A|S) / pa_star(A|S)` shared by the
/// baselines. The `-M` variants reuse the ratios computed on the plain
/// states: the mediator enlarges the state only for the value models (Q and
/// the density ratio), never for the action propensity — conditioning the
/// propensity on a variable the action itself produced would smuggle the
/// mediator mechanism back into estimators meant to ignore it.
/// Index of each trajectory's first transition in dataset order.
fn transition_offsets<S: StateKey>(data: &Dataset<S>) -> impl Iterator<Item = usize> + '_ {
    data.trajectories().iter().scan(0usize, |acc, traj| {
        let start = *acc;
        *acc += traj.len();
        Some(start)
    })
}

fn policy_ratios<S: StateKey>(
    data: &Dataset<S>,
    pi: &PolicySpec<S>,
    pa_star: &CondPmf,
) -> Vec<f64> {
    data.transitions()
        .map(|(_, _, step, _)| {
            pi.prob(step.action, &step.state)
                / pa_star.clipped_given_state(step.action, &step.state)
        })
        .collect()
}

/// REG / MIS / DRL over a prepared (possibly mediator-augmented) dataset,
/// with the policy ratios supplied per transition.
#[allow(clippy::too_many_arguments)]
fn baseline_core<S: StateKey>(
    data: &Dataset<S>,
    pi: &PolicySpec<S>,
    features: &StateFeatures,
    ratios: &[f64],
    gamma: f64,
    alpha: f64,
    ncfg: &NuisanceConfig,
    suffix: &str,
) -> Result<Vec<ValueEstimate>> {
    check_gamma_alpha(gamma, alpha)?;
    let n = data.n_trajectories();
    if n < 2 {
        return Err(CopeError::InsufficientTrajectories(n));
    }
    let n_actions = pi.n_actions();
    let c = 1.0 / (1.0 - gamma);
    let total_steps = data.total_steps();

    // Unconfounded fitted Q over (a, s) and its plain policy backup.
    let q = fitted_q_evaluation(
        data,
        pi,
        None,
        gamma,
        1,
        n_actions,
        features,
        &FittedQConfig::from(ncfg),
    )?;
    let value = |s: &S| -> f64 {
        let pi_row = pi.probs(s);
        let q_row = q.eval_all(s);
        pi_row.iter().zip(q_row.iter()).map(|(p, qv)| p * qv).sum()
    };

    // REG: the plug-in over the empirical initial states.
    let v0: Vec<f64> = data.initial_states().map(&value).collect();
    let reg_point = v0.iter().sum::<f64>() / n as f64;
    let reg = ValueEstimate::from_contributions(
        format!("REG{suffix}"),
        reg_point,
        v0.clone(),
        total_steps,
        gamma,
        alpha,
    )?;

    // The unconfounded density ratio, fit with the policy ratio.
    let nu = InitialDistribution::Empirical(data.initial_states().cloned().collect());
    let omega = omega_from_ratios(data, ratios, &nu, gamma, features, ncfg.omega_ridge)?;

    // MIS: per-trajectory weighted average reward.
    let mut mis_contrib = Vec::with_capacity(n);
    for (k, traj) in transition_offsets(data).zip(data.trajectories()) {
        let mut traj_sum = 0.0;
        for (t, step) in traj.steps().iter().enumerate() {
            traj_sum += c * omega.eval(&step.state) * ratios[k + t] * step.reward;
        }
        mis_contrib.push(traj_sum / traj.len() as f64);
    }
    let mis_point = mis_contrib.iter().sum::<f64>() / n as f64;
    let mis = ValueEstimate::from_contributions(
        format!("MIS{suffix}"),
        mis_point,
        mis_contrib,
        total_steps,
        gamma,
        alpha,
    )?;

    // DRL: REG plus the ratio-weighted temporal difference correction.
    let mut total = 0.0;
    let mut drl_contrib = Vec::with_capacity(n);
    for ((i, traj), k) in data
        .trajectories()
        .iter()
        .enumerate()
        .zip(transition_offsets(data))
    {
        let mut traj_sum = 0.0;
        for (t, step) in traj.steps().iter().enumerate() {
            let td = step.reward + gamma * value(traj.next_state(t))
                - q.eval(0, step.action, &step.state);
            traj_sum += c * omega.eval(&step.state) * ratios[k + t] * td;
        }
        total += traj_sum;
        drl_contrib.push(v0[i] + traj_sum / traj.len() as f64);
    }
    let drl_point = reg_point + total / total_steps as f64;
    let drl = ValueEstimate::from_contributions(
        format!("DRL{suffix}"),
        drl_point,
        drl_contrib,
        total_steps,
        gamma,
        alpha,
    )?;

    Ok(vec![reg, mis, drl])
}

/// The unconfounded baselines on a tabular dataset. With
/// `with_mediator_in_state`, the `-M` variants run on the state space
/// enlarged by the mediator.
#[allow(clippy::too_many_arguments)]
pub fn baseline_estimates_tabular(
    data: &Dataset<usize>,
    pi: &PolicySpec<usize>,
    n_states: usize,
    n_actions: usize,
    n_mediators: usize,
    gamma: f64,
    alpha: f64,
    cfg: &BaselineConfig,
) -> Result<Vec<ValueEstimate>> {
    let ncfg = &cfg.nuisance;
    let features = StateFeatures::Indicator { n_states };
    let pa_star = estimate_pa_star_tabular(data, n_states, n_actions, ncfg)?;
    let ratios = policy_ratios(data, pi, &pa_star);
    let mut out = baseline_core(data, pi, &features, &ratios, gamma, alpha, ncfg, "")?;
    if cfg.with_mediator_in_state {
        let aug = augment_dataset(data, n_mediators);
        let n_aug = n_states * n_mediators;
        let rows: Vec<Vec<f64>> = (0..n_aug)
            .map(|idx| pi.probs(&(idx / n_mediators)))
            .collect();
        let pi_aug = PolicySpec::tabular(rows)?;
        let features_aug = StateFeatures::Indicator { n_states: n_aug };
        out.extend(baseline_core(
            &aug,
            &pi_aug,
            &features_aug,
            &ratios,
            gamma,
            alpha,
            ncfg,
            "-M",
        )?);
    }
    Ok(out)
}

/// The unconfounded baselines on a continuous dataset; each variant fits its
/// own Fourier feature map from the states it sees.
#[allow(clippy::too_many_arguments)]
pub fn baseline_estimates_continuous(
    data: &Dataset<Vec<f64>>,
    pi: &PolicySpec<Vec<f64>>,
    n_actions: usize,
    n_mediators: usize,
    gamma: f64,
    alpha: f64,
    cfg: &BaselineConfig,
) -> Result<Vec<ValueEstimate>> {
    let ncfg = &cfg.nuisance;
    let fourier = |d: &Dataset<Vec<f64>>| -> Result<StateFeatures> {
        let mut states: Vec<Vec<f64>> = Vec::new();
        for traj in d.trajectories() {
            for step in traj.steps() {
                states.push(step.state.clone());
            }
            states.push(traj.terminal_state().clone());
        }
        Ok(StateFeatures::Fourier {
            map: fit_fourier_map(&states, ncfg.n_features, ncfg.feature_seed)?,
            intercept: true,
        })
    };
    let features = fourier(data)?;
    let pa_star = estimate_pa_star_continuous(data, n_actions, &features, ncfg)?;
    let ratios = policy_ratios(data, pi, &pa_star);
    let mut out = baseline_core(data, pi, &features, &ratios, gamma, alpha, ncfg, "")?;
    if cfg.with_mediator_in_state {
        let aug = augment_dataset(data, n_mediators);
        let inner = pi.clone();
        let pi_aug = PolicySpec::from_fn(n_actions, move |s: &Vec<f64>| {
            inner.probs(&s[..s.len() - 1].to_vec())
        });
        let features_aug = fourier(&aug)?;
        out.extend(baseline_core(
            &aug,
            &pi_aug,
            &features_aug,
            &ratios,
            gamma,
            alpha,
            ncfg,
            "-M",
        )?);
    }
    Ok(out)
}

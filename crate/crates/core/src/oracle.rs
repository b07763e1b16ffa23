//! Exact ground truth on tabular environments: the mediated Q-function and
//! state values by fixed-point iteration, the policy value, the behavior
//! chain's stationary distribution, the exact marginal density ratio, and
//! exact expectations of the augmentation terms under the stationary
//! one-step law. Every estimator in this crate is tested against these
//! brute-force references.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CopeError, Result};
use crate::estimate::augmentation_terms;
use crate::model::{PolicySpec, Step, TabularCmdpwm};
use crate::nuisance::{CondPmf, InitialDistribution, NuisanceSet, QFunction, RatioFunction};

/// Default sup-norm tolerance for the oracle fixed-point computations.
pub const DEFAULT_ORACLE_TOL: f64 = 1e-12;

/// Clip floor for oracle-built conditional pmfs: small enough that it never
/// binds on exact positive probabilities, so population identities stay
/// exact.
const ORACLE_EPS_CLIP: f64 = 1e-12;

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CopeError::InvalidArgument(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    Ok(())
}

/// The exact mediated Q-function and the state values it backs up to.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QTables {
    /// Flat over ((m * n_actions) + a) * n_states + s.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm of `T(Q) - Q` at the returned table.
    pub bellman_residual: f64,
}

/// Front-door backup weights per state: `w[s][m * n_a + a]`, with
/// `V(s) = sum_{m,a} w Q(m,a,s)`.
fn frontdoor_weights(
    spec: &TabularCmdpwm,
    pi: &PolicySpec<usize>,
    pa_rows: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let (n_s, n_a, n_m) = (spec.n_states(), spec.n_actions(), spec.n_mediators());
    (0..n_s)
        .map(|s| {
            let pi_row = pi.probs(&s);
            let mut w = vec![0.0; n_m * n_a];
            for (a_star, &pi_a) in pi_row.iter().enumerate() {
                if pi_a == 0.0 {
                    continue;
                }
                for m in 0..n_m {
                    let pm = spec.p_m(m, a_star, s);
                    for a in 0..n_a {
                        w[m * n_a + a] += pi_a * pm * pa_rows[s][a];
                    }
                }
            }
            w
        })
        .collect()
}

/// Solves the mediated Bellman equation
/// `Q(m,a,s) = rbar(m,a,s) + gamma sum_s' P(s'|m,a,s) V(s')`
/// by fixed-point iteration, with `V` the front-door backup of `Q`. The
/// conditional reward and transition marginalize the confounder with its
/// posterior given `(s, a)`.
pub fn exact_q(
    spec: &TabularCmdpwm,
    pi: &PolicySpec<usize>,
    gamma: f64,
    tol: f64,
) -> Result<QTables> {
    check_gamma(gamma)?;
    if tol <= 0.0 {
        return Err(CopeError::InvalidArgument(
            "tolerance must be positive".into(),
        ));
    }
    let (n_s, n_a, n_m) = (spec.n_states(), spec.n_actions(), spec.n_mediators());
    let n_cells = n_m * n_a * n_s;

    let mut mean_r = vec![0.0; n_cells];
    let mut trans = vec![0.0; n_cells * n_s];
    for m in 0..n_m {
        for a in 0..n_a {
            for s in 0..n_s {
                let cell = (m * n_a + a) * n_s + s;
                mean_r[cell] = spec.marginal_mean_reward(m, a, s)?;
                let p = spec.marginal_next_state(m, a, s)?;
                trans[cell * n_s..(cell + 1) * n_s].copy_from_slice(&p);
            }
        }
    }
    let pa_rows: Vec<Vec<f64>> = (0..n_s)
        .map(|s| spec.marginal_behavior_policy(s))
        .collect::<Result<_>>()?;
    let weights = frontdoor_weights(spec, pi, &pa_rows);

    let backup_v = |q: &[f64]| -> Vec<f64> {
        (0..n_s)
            .map(|s| {
                weights[s]
                    .iter()
                    .enumerate()
                    .map(|(cell, w)| w * q[cell * n_s + s])
                    .sum()
            })
            .collect()
    };
    let apply = |q: &[f64]| -> Vec<f64> {
        let v = backup_v(q);
        (0..n_cells)
            .map(|cell| {
                let backup: f64 = (0..n_s).map(|s2| trans[cell * n_s + s2] * v[s2]).sum();
                mean_r[cell] + gamma * backup
            })
            .collect()
    };

    let mut q = vec![0.0; n_cells];
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        let q_next = apply(&q);
        let change = q
            .iter()
            .zip(q_next.iter())
            .fold(0.0f64, |acc, (old, new)| acc.max((new - old).abs()));
        q = q_next;
        if change < tol {
            break;
        }
    }
    let once_more = apply(&q);
    let bellman_residual = q
        .iter()
        .zip(once_more.iter())
        .fold(0.0f64, |acc, (old, new)| acc.max((new - old).abs()));
    let v = backup_v(&q);
    Ok(QTables {
        q,
        v,
        iterations,
        bellman_residual,
    })
}

/// The exact policy value `eta = sum_s nu(s) V(s)` under the environment's
/// initial distribution.
pub fn exact_value(spec: &TabularCmdpwm, pi: &PolicySpec<usize>, gamma: f64) -> Result<f64> {
    let tables = exact_q(spec, pi, gamma, DEFAULT_ORACLE_TOL)?;
    Ok(spec
        .nu()
        .iter()
        .zip(tables.v.iter())
        .map(|(p, v)| p * v)
        .sum())
}

/// The behavior-induced state kernel `P(s'|s)`, row-major `s * n_states + s'`,
/// marginalizing confounder, action, mediator, and reward.
pub fn behavior_state_kernel(spec: &TabularCmdpwm) -> Vec<f64> {
    let (n_s, n_a, n_m, n_u) = (
        spec.n_states(),
        spec.n_actions(),
        spec.n_mediators(),
        spec.n_confounders(),
    );
    let n_r = spec.n_reward_levels();
    let mut kernel = vec![0.0; n_s * n_s];
    for s in 0..n_s {
        for u in 0..n_u {
            let pu = spec.p_u(u, s);
            if pu == 0.0 {
                continue;
            }
            for a in 0..n_a {
                let pa = spec.p_a(a, s, u);
                if pa == 0.0 {
                    continue;
                }
                for m in 0..n_m {
                    let pm = spec.p_m(m, a, s);
                    if pm == 0.0 {
                        continue;
                    }
                    let w = pu * pa * pm;
                    for s2 in 0..n_s {
                        let mut p = 0.0;
                        for r in 0..n_r {
                            p += spec.p_sr(s2, r, m, a, s, u);
                        }
                        kernel[s * n_s + s2] += w * p;
                    }
                }
            }
        }
    }
    kernel
}

/// The target-policy state kernel built from front-door marginals:
/// `P(s'|s) = sum_{a*,m,a} pi(a*|s) p_m(m|a*,s) p_a*(a|s) P*(s'|m,a,s)`.
pub fn target_state_kernel(spec: &TabularCmdpwm, pi: &PolicySpec<usize>) -> Result<Vec<f64>> {
    let (n_s, n_a, n_m) = (spec.n_states(), spec.n_actions(), spec.n_mediators());
    let pa_rows: Vec<Vec<f64>> = (0..n_s)
        .map(|s| spec.marginal_behavior_policy(s))
        .collect::<Result<_>>()?;
    let weights = frontdoor_weights(spec, pi, &pa_rows);
    let mut kernel = vec![0.0; n_s * n_s];
    for s in 0..n_s {
        for m in 0..n_m {
            for a in 0..n_a {
                let w = weights[s][m * n_a + a];
                if w == 0.0 {
                    continue;
                }
                let p = spec.marginal_next_state(m, a, s)?;
                for s2 in 0..n_s {
                    kernel[s * n_s + s2] += w * p[s2];
                }
            }
        }
    }
    Ok(kernel)
}

/// The behavior chain's stationary state distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub p_inf: Vec<f64>,
    pub iterations: usize,
    /// Final `||p^T P - p^T||_1`.
    pub residual: f64,
}

/// Power-iterates the behavior state kernel to its stationary distribution.
/// Ergodicity is checked up front (every entry of the 64th kernel power must
/// be positive); failing chains return `NotErgodic`.
pub fn stationary_distribution(spec: &TabularCmdpwm) -> Result<StationaryDistribution> {
    let n_s = spec.n_states();
    let kernel = behavior_state_kernel(spec);
    let k = DMatrix::from_row_slice(n_s, n_s, &kernel);
    let mut power = k.clone();
    for _ in 0..6 {
        power = &power * &power;
    }
    if power.iter().any(|&x| x <= 0.0) {
        return Err(CopeError::NotErgodic(
            "the behavior state chain is not irreducible and aperiodic".into(),
        ));
    }
    let mut p = vec![1.0 / n_s as f64; n_s];
    let mut iterations = 0usize;
    while iterations < 1_000_000 {
        iterations += 1;
        let mut next = vec![0.0; n_s];
        for s in 0..n_s {
            let ps = p[s];
            if ps == 0.0 {
                continue;
            }
            for s2 in 0..n_s {
                next[s2] += ps * kernel[s * n_s + s2];
            }
        }
        let total: f64 = next.iter().sum();
        for x in &mut next {
            *x /= total;
        }
        let residual: f64 = p.iter().zip(next.iter()).map(|(a, b)| (a - b).abs()).sum();
        p = next;
        if residual < 1e-12 {
            return Ok(StationaryDistribution {
                p_inf: p,
                iterations,
                residual,
            });
        }
    }
    Err(CopeError::NotErgodic(
        "power iteration did not reach the stationary distribution".into(),
    ))
}

/// The exact marginal density ratio `omega(s) = d(s) / p_inf(s)`, where `d`
/// is the discounted state-occupancy of the target policy started from `nu`:
/// the unique solution of `d = (1-gamma) nu + gamma (P_pi)^T d`.
pub fn exact_omega(
    spec: &TabularCmdpwm,
    pi: &PolicySpec<usize>,
    gamma: f64,
    nu: &[f64],
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let n_s = spec.n_states();
    if nu.len() != n_s {
        return Err(CopeError::InvalidArgument(format!(
            "initial distribution has {} entries, expected {n_s}",
            nu.len()
        )));
    }
    if nu.iter().any(|p| !p.is_finite() || *p < 0.0) || (nu.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(CopeError::InvalidPmf(
            "initial distribution must be a pmf".into(),
        ));
    }
    let kernel = target_state_kernel(spec, pi)?;
    let k = DMatrix::from_row_slice(n_s, n_s, &kernel);
    let system = DMatrix::identity(n_s, n_s) - k.transpose() * gamma;
    let rhs = DVector::from_iterator(n_s, nu.iter().map(|p| (1.0 - gamma) * p));
    let d = system.lu().solve(&rhs).ok_or_else(|| {
        CopeError::SingularSystem("discounted occupancy system is singular".into())
    })?;
    let stationary = stationary_distribution(spec)?;
    Ok(d.iter()
        .zip(stationary.p_inf.iter())
        .map(|(di, pi_s)| di / pi_s)
        .collect())
}

/// A nuisance set built from exact tables: the fixed-point Q, the true
/// mediator law and marginal behavior policy, the exact density ratio
/// started from `nu`, and `nu` itself as the initial distribution.
pub fn oracle_nuisance_set(
    spec: &TabularCmdpwm,
    pi: &PolicySpec<usize>,
    gamma: f64,
    nu: &[f64],
) -> Result<NuisanceSet<usize>> {
    let (n_s, n_a, n_m) = (spec.n_states(), spec.n_actions(), spec.n_mediators());
    let tables = exact_q(spec, pi, gamma, DEFAULT_ORACLE_TOL)?;
    let q = QFunction::from_table(tables.q, n_m, n_a, n_s)?;
    let pa_rows: Vec<Vec<f64>> = (0..n_s)
        .map(|s| spec.marginal_behavior_policy(s))
        .collect::<Result<_>>()?;
    let pa_star = CondPmf::from_state_table(pa_rows, ORACLE_EPS_CLIP)?;
    let pm_table: Vec<Vec<Vec<f64>>> = (0..n_a)
        .map(|a| {
            (0..n_s)
                .map(|s| (0..n_m).map(|m| spec.p_m(m, a, s)).collect())
                .collect()
        })
        .collect();
    let pm = CondPmf::from_action_state_table(pm_table, ORACLE_EPS_CLIP)?;
    let omega = RatioFunction::from_indicator_weights(exact_omega(spec, pi, gamma, nu)?)?;
    Ok(NuisanceSet {
        q,
        omega,
        pa_star,
        pm,
        nu: InitialDistribution::Tabular(nu.to_vec()),
    })
}

/// Exact expectations of the three augmentation terms under the stationary
/// one-step law
/// `p_inf(s) p_u(u|s) p_a(a|s,u) p_m(m|a,s) p_sr(s',r|m,a,s,u)`,
/// by full enumeration. Verifies the zero-mean claims behind the estimator's
/// double robustness.
pub fn exact_psi_mean(
    spec: &TabularCmdpwm,
    pi: &PolicySpec<usize>,
    gamma: f64,
    nuis: &NuisanceSet<usize>,
) -> Result<(f64, f64, f64)> {
    check_gamma(gamma)?;
    let stationary = stationary_distribution(spec)?;
    let (n_s, n_a, n_m, n_u) = (
        spec.n_states(),
        spec.n_actions(),
        spec.n_mediators(),
        spec.n_confounders(),
    );
    let n_r = spec.n_reward_levels();
    let mut means = (0.0, 0.0, 0.0);
    for s in 0..n_s {
        let ps = stationary.p_inf[s];
        for u in 0..n_u {
            let pu = spec.p_u(u, s);
            for a in 0..n_a {
                let pa = spec.p_a(a, s, u);
                for m in 0..n_m {
                    let pm = spec.p_m(m, a, s);
                    let base = ps * pu * pa * pm;
                    if base == 0.0 {
                        continue;
                    }
                    for s2 in 0..n_s {
                        for r in 0..n_r {
                            let w = base * spec.p_sr(s2, r, m, a, s, u);
                            if w == 0.0 {
                                continue;
                            }
                            let step = Step {
                                state: s,
                                action: a,
                                mediator: m,
                                reward: spec.reward_levels()[r],
                            };
                            let (p1, p2, p3) = augmentation_terms(&step, &s2, nuis, pi, gamma);
                            means.0 += w * p1;
                            means.1 += w * p2;
                            means.2 += w * p3;
                        }
                    }
                }
            }
        }
    }
    Ok(means)
}

/// Every exact quantity for one (environment, policy, discount) triple.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleResults {
    pub gamma: f64,
    /// Marginal behavior policy, `pa_star[s][a]`.
    pub pa_star: Vec<Vec<f64>>,
    /// Mediator law, `pm[a][s][m]`.
    pub pm: Vec<Vec<Vec<f64>>>,
    /// Behavior-conditional transition law: row `(m * n_a + a) * n_s + s`
    /// holds the joint pmf over `s' * n_r + r`.
    pub transition: Vec<Vec<f64>>,
    /// Mediated Q, flat over ((m * n_a) + a) * n_s + s.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    /// The policy value under the environment's initial distribution.
    pub eta: f64,
    pub p_inf: Vec<f64>,
    /// Density ratio started from the environment's initial distribution.
    pub omega: Vec<f64>,
    pub q_iterations: usize,
    pub q_bellman_residual: f64,
    pub stationary_iterations: usize,
    pub stationary_residual: f64,
}

/// Computes the full set of oracle quantities for a tabular environment.
pub fn oracle_results(
    spec: &TabularCmdpwm,
    pi: &PolicySpec<usize>,
    gamma: f64,
) -> Result<OracleResults> {
    let (n_s, n_a, n_m) = (spec.n_states(), spec.n_actions(), spec.n_mediators());
    let tables = exact_q(spec, pi, gamma, DEFAULT_ORACLE_TOL)?;
    let eta = spec
        .nu()
        .iter()
        .zip(tables.v.iter())
        .map(|(p, v)| p * v)
        .sum();
    let stationary = stationary_distribution(spec)?;
    let omega = exact_omega(spec, pi, gamma, spec.nu())?;
    let pa_star: Vec<Vec<f64>> = (0..n_s)
        .map(|s| spec.marginal_behavior_policy(s))
        .collect::<Result<_>>()?;
    let pm: Vec<Vec<Vec<f64>>> = (0..n_a)
        .map(|a| {
            (0..n_s)
                .map(|s| (0..n_m).map(|m| spec.p_m(m, a, s)).collect())
                .collect()
        })
        .collect();
    let mut transition = Vec::with_capacity(n_m * n_a * n_s);
    for m in 0..n_m {
        for a in 0..n_a {
            for s in 0..n_s {
                transition.push(spec.marginal_transition(m, a, s)?);
            }
        }
    }
    Ok(OracleResults {
        gamma,
        pa_star,
        pm,
        transition,
        q: tables.q,
        v: tables.v,
        eta,
        p_inf: stationary.p_inf,
        omega,
        q_iterations: tables.iterations,
        q_bellman_residual: tables.bellman_residual,
        stationary_iterations: stationary.iterations,
        stationary_residual: stationary.residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::psi0;
    use crate::features::StateFeatures;
    use crate::model::TabularCmdpwmParts;
    use crate::nuisance::{
        estimate_nu_tabular, estimate_omega, fitted_q_evaluation, rho, FittedQConfig,
        NuisanceConfig,
    };
    use crate::sim::{
        build_toy_env, generate_dataset, rollout_target_value, toy_target_policy, SimConfig,
        TabularEnv,
    };

    fn toy() -> TabularCmdpwm {
        build_toy_env().tabular_spec().clone()
    }

    /// Independent enumeration of E[R | m, a, s] from raw tables.
    fn immediate_reward(spec: &TabularCmdpwm, m: usize, a: usize, s: usize) -> f64 {
        let n_u = spec.n_confounders();
        let n_r = spec.n_reward_levels();
        let mut post: Vec<f64> = (0..n_u)
            .map(|u| spec.p_u(u, s) * spec.p_a(a, s, u))
            .collect();
        let total: f64 = post.iter().sum();
        for w in &mut post {
            *w /= total;
        }
        let mut mean = 0.0;
        for (u, w) in post.iter().enumerate() {
            for s2 in 0..spec.n_states() {
                for r in 0..n_r {
                    mean += w * spec.p_sr(s2, r, m, a, s, u) * spec.reward_levels()[r];
                }
            }
        }
        mean
    }

    #[test]
    fn gamma_zero_q_is_immediate_reward() {
        let spec = toy();
        let pi = toy_target_policy();
        let tables = exact_q(&spec, &pi, 0.0, 1e-12).unwrap();
        for m in 0..2 {
            for a in 0..3 {
                for s in 0..2 {
                    let cell = (m * 3 + a) * 2 + s;
                    let expected = immediate_reward(&spec, m, a, s);
                    assert!(
                        (tables.q[cell] - expected).abs() < 1e-12,
                        "Q({m},{a},{s}) = {} vs {expected}",
                        tables.q[cell]
                    );
                }
            }
        }
        assert!(tables.bellman_residual < 1e-12);
    }

    fn constant_reward_spec(c: f64) -> TabularCmdpwm {
        let mut p_sr = Vec::new();
        for m in 0..2usize {
            for _a in 0..2 {
                for s in 0..2usize {
                    let q = 0.3 + 0.25 * (m as f64) + 0.1 * (s as f64);
                    p_sr.extend_from_slice(&[1.0 - q, q]);
                }
            }
        }
        TabularCmdpwm::new(TabularCmdpwmParts {
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
        .unwrap()
    }

    #[test]
    fn constant_reward_gives_geometric_value() {
        let c = 2.0;
        let gamma = 0.9;
        let spec = constant_reward_spec(c);
        let pi = PolicySpec::tabular(vec![vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        let tables = exact_q(&spec, &pi, gamma, 1e-12).unwrap();
        let target = c / (1.0 - gamma);
        for q in &tables.q {
            assert!((q - target).abs() < 1e-9);
        }
        assert!((exact_value(&spec, &pi, gamma).unwrap() - target).abs() < 1e-9);
    }

    #[test]
    fn exact_q_and_v_match_monte_carlo_rollouts() {
        let spec = toy();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let tables = exact_q(&spec, &pi, gamma, 1e-12).unwrap();

        // V(s) by rollouts from a point mass at s
        let mut v_mc = [0.0; 2];
        let mut v_se = [0.0; 2];
        let horizon = 150;
        for s in 0..2usize {
            let mut parts: TabularCmdpwmParts = spec.clone().into();
            parts.nu = vec![0.0, 0.0];
            parts.nu[s] = 1.0;
            let env = TabularEnv::new(TabularCmdpwm::new(parts).unwrap());
            let est =
                rollout_target_value(&env, &pi, gamma, 100_000, horizon, 900 + s as u64).unwrap();
            v_mc[s] = est.value;
            v_se[s] = est.mc_se;
            let slack = 3.0 * est.mc_se + est.truncation_bound.unwrap();
            assert!(
                (tables.v[s] - est.value).abs() < slack,
                "V({s}) = {} vs MC {} +- {}",
                tables.v[s],
                est.value,
                slack
            );
        }

        // Q(m,a,s) = independently enumerated immediate part + discounted MC tail
        for m in 0..2 {
            for a in 0..3 {
                for s in 0..2usize {
                    let cell = (m * 3 + a) * 2 + s;
                    let trans = spec.marginal_transition(m, a, s).unwrap();
                    let n_r = spec.n_reward_levels();
                    let mut tail = 0.0;
                    let mut tail_se = 0.0;
                    for s2 in 0..2 {
                        let p: f64 = (0..n_r).map(|r| trans[s2 * n_r + r]).sum();
                        tail += p * v_mc[s2];
                        tail_se += p * v_se[s2];
                    }
                    let q_mc = immediate_reward(&spec, m, a, s) + gamma * tail;
                    let slack = 3.0 * gamma * tail_se + 1e-3;
                    assert!(
                        (tables.q[cell] - q_mc).abs() < slack,
                        "Q({m},{a},{s}) = {} vs MC {q_mc} +- {slack}",
                        tables.q[cell]
                    );
                }
            }
        }
    }

    #[test]
    fn exact_value_matches_rollout_estimate() {
        let env = build_toy_env();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let eta = exact_value(env.tabular_spec(), &pi, gamma).unwrap();
        let est = rollout_target_value(&env, &pi, gamma, 100_000, 150, 41).unwrap();
        let slack = 3.0 * est.mc_se + est.truncation_bound.unwrap();
        assert!(
            (eta - est.value).abs() < slack,
            "{eta} vs {} +- {slack}",
            est.value
        );
    }

    #[test]
    fn stationary_matches_long_run_frequencies() {
        let env = build_toy_env();
        let st = stationary_distribution(env.tabular_spec()).unwrap();
        assert!((st.p_inf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(st.residual < 1e-12);
        let data = generate_dataset(
            &env,
            &SimConfig {
                n_trajectories: 20,
                horizon: 50_000,
                burn_in: 100,
                seed: 77,
            },
        )
        .unwrap();
        let mut freq = vec![0.0; 2];
        let mut n = 0.0;
        for (_, _, step, _) in data.transitions() {
            freq[step.state] += 1.0;
            n += 1.0;
        }
        for f in &mut freq {
            *f /= n;
        }
        assert!(
            (freq[0] - st.p_inf[0]).abs() < 0.005,
            "empirical {freq:?} vs {:?}",
            st.p_inf
        );
    }

    fn kernel_only_spec(rows: Vec<Vec<f64>>) -> TabularCmdpwm {
        // one action, one mediator, one confounder, one reward level:
        // the state kernel is exactly `rows`
        let n_s = rows.len();
        let p_sr: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        TabularCmdpwm::new(TabularCmdpwmParts {
            n_states: n_s,
            n_actions: 1,
            n_mediators: 1,
            n_confounders: 1,
            reward_levels: vec![1.0],
            p_u: vec![1.0; n_s],
            p_a: vec![1.0; n_s],
            p_m: vec![1.0; n_s],
            p_sr,
            nu: vec![1.0 / n_s as f64; n_s],
            action_labels: vec![0.0],
            confounder_labels: vec![0.0],
        })
        .unwrap()
    }

    #[test]
    fn stationary_trivial_kernels() {
        let sym = kernel_only_spec(vec![vec![0.9, 0.1], vec![0.1, 0.9]]);
        let st = stationary_distribution(&sym).unwrap();
        assert!((st.p_inf[0] - 0.5).abs() < 1e-12);
        assert!((st.p_inf[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let absorbing = kernel_only_spec(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        match stationary_distribution(&absorbing) {
            Err(CopeError::NotErgodic(_)) => {}
            other => panic!("expected NotErgodic, got {other:?}"),
        }
    }

    #[test]
    fn omega_matches_truncated_series() {
        let spec = toy();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let st = stationary_distribution(&spec).unwrap();
        let kernel = target_state_kernel(&spec, &pi).unwrap();
        for nu in [st.p_inf.clone(), spec.nu().to_vec()] {
            let omega = exact_omega(&spec, &pi, gamma, &nu).unwrap();
            // d = (1-gamma) sum_{t<=200} gamma^t p_t
            let mut p_t = nu.clone();
            let mut d = [0.0; 2];
            let mut scale = 1.0 - gamma;
            for _ in 0..=200 {
                for (d_s, &p) in d.iter_mut().zip(p_t.iter()) {
                    *d_s += scale * p;
                }
                scale *= gamma;
                let mut next = vec![0.0; 2];
                for s in 0..2 {
                    for s2 in 0..2 {
                        next[s2] += p_t[s] * kernel[s * 2 + s2];
                    }
                }
                p_t = next;
            }
            for s in 0..2 {
                let truncated = d[s] / st.p_inf[s];
                assert!(
                    (omega[s] - truncated).abs() < 1e-8,
                    "omega({s}) = {} vs series {truncated}",
                    omega[s]
                );
            }
            // mean-one identity under the stationary law
            let mean: f64 = omega.iter().zip(st.p_inf.iter()).map(|(o, p)| o * p).sum();
            assert!((mean - 1.0).abs() < 1e-10);
        }
    }

    fn unconfounded_spec() -> TabularCmdpwm {
        // two confounder levels that influence transitions but not actions
        let mut p_sr = Vec::new();
        for m in 0..2usize {
            for _a in 0..2 {
                for s in 0..2usize {
                    for u in 0..2usize {
                        let q = 0.2 + 0.3 * (m as f64) + 0.1 * (s as f64) + 0.15 * (u as f64);
                        p_sr.extend_from_slice(&[1.0 - q, q]);
                    }
                }
            }
        }
        TabularCmdpwm::new(TabularCmdpwmParts {
            n_states: 2,
            n_actions: 2,
            n_mediators: 2,
            n_confounders: 2,
            reward_levels: vec![0.0, 1.0],
            p_u: vec![0.5, 0.5, 0.3, 0.7],
            // p_a identical across u: no confounding of the action
            p_a: vec![0.6, 0.4, 0.6, 0.4, 0.35, 0.65, 0.35, 0.65],
            p_m: vec![0.7, 0.3, 0.45, 0.55, 0.25, 0.75, 0.5, 0.5],
            p_sr: {
                // rewards: split each next-state mass evenly over two levels
                let mut out = Vec::new();
                for chunk in p_sr.chunks(2) {
                    out.extend_from_slice(&[
                        chunk[0] * 0.5,
                        chunk[0] * 0.5,
                        chunk[1] * 0.5,
                        chunk[1] * 0.5,
                    ]);
                }
                out
            },
            nu: vec![0.5, 0.5],
            action_labels: vec![0.0, 1.0],
            confounder_labels: vec![-1.0, 1.0],
        })
        .unwrap()
    }

    #[test]
    fn omega_is_one_in_degenerate_cases() {
        let spec = toy();
        let pi = toy_target_policy();
        let st = stationary_distribution(&spec).unwrap();
        let omega = exact_omega(&spec, &pi, 0.0, &st.p_inf).unwrap();
        for o in &omega {
            assert!((o - 1.0).abs() < 1e-10);
        }

        // unconfounded chain, target = marginal behavior policy, nu = p_inf
        let spec = unconfounded_spec();
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|s| spec.marginal_behavior_policy(s).unwrap())
            .collect();
        let pi = PolicySpec::tabular(rows).unwrap();
        let st = stationary_distribution(&spec).unwrap();
        let omega = exact_omega(&spec, &pi, 0.9, &st.p_inf).unwrap();
        for o in &omega {
            assert!((o - 1.0).abs() < 1e-10, "omega = {omega:?}");
        }
    }

    #[test]
    fn frontdoor_value_matches_interventional_fixed_point() {
        let spec = toy();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let tables = exact_q(&spec, &pi, gamma, 1e-13).unwrap();

        // V by iterating the interventional Bellman operator directly:
        // actions drawn from pi independently of u, u never conditioned on
        let n_r = spec.n_reward_levels();
        let mut v = vec![0.0; 2];
        for _ in 0..2000 {
            let mut next = vec![0.0; 2];
            for (s, next_s) in next.iter_mut().enumerate() {
                let pi_row = pi.probs(&s);
                for u in 0..2 {
                    let pu = spec.p_u(u, s);
                    for (a_star, &pi_a) in pi_row.iter().enumerate() {
                        let w0 = pu * pi_a;
                        if w0 == 0.0 {
                            continue;
                        }
                        for m in 0..2 {
                            let w1 = w0 * spec.p_m(m, a_star, s);
                            for (s2, &v_s2) in v.iter().enumerate() {
                                for r in 0..n_r {
                                    let p = spec.p_sr(s2, r, m, a_star, s, u);
                                    *next_s += w1 * p * (spec.reward_levels()[r] + gamma * v_s2);
                                }
                            }
                        }
                    }
                }
            }
            v = next;
        }
        for (s, (&fd_v, &mc_v)) in tables.v.iter().zip(v.iter()).enumerate() {
            assert!(
                (fd_v - mc_v).abs() < 1e-10,
                "front-door V({s}) = {fd_v} vs interventional {mc_v}"
            );
        }

        // and the induced state kernels agree
        let fd = target_state_kernel(&spec, &pi).unwrap();
        for s in 0..2usize {
            let pi_row = pi.probs(&s);
            for s2 in 0..2 {
                let mut direct = 0.0;
                for u in 0..2 {
                    for (a_star, &pi_a) in pi_row.iter().enumerate() {
                        for m in 0..2 {
                            for r in 0..n_r {
                                direct += spec.p_u(u, s)
                                    * pi_a
                                    * spec.p_m(m, a_star, s)
                                    * spec.p_sr(s2, r, m, a_star, s, u);
                            }
                        }
                    }
                }
                assert!((fd[s * 2 + s2] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn population_is_identity_under_stationarity() {
        let spec = toy();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let st = stationary_distribution(&spec).unwrap();
        let tables = exact_q(&spec, &pi, gamma, 1e-12).unwrap();
        let eta_inf: f64 = tables
            .v
            .iter()
            .zip(st.p_inf.iter())
            .map(|(v, p)| v * p)
            .sum();
        let nuis = oracle_nuisance_set(&spec, &pi, gamma, &st.p_inf).unwrap();

        // (1-gamma)^{-1} E_inf[omega rho R] enumerated over the one-step law
        let n_r = spec.n_reward_levels();
        let mut is_value = 0.0;
        for s in 0..2usize {
            for u in 0..2 {
                for a in 0..3 {
                    for m in 0..2 {
                        let base =
                            st.p_inf[s] * spec.p_u(u, s) * spec.p_a(a, s, u) * spec.p_m(m, a, s);
                        if base == 0.0 {
                            continue;
                        }
                        let weight = nuis.omega.eval(&s) * rho(&nuis.pm, &pi, m, a, &s);
                        for s2 in 0..2 {
                            for r in 0..n_r {
                                is_value += base
                                    * spec.p_sr(s2, r, m, a, s, u)
                                    * weight
                                    * spec.reward_levels()[r];
                            }
                        }
                    }
                }
            }
        }
        is_value /= 1.0 - gamma;
        assert!(
            (is_value - eta_inf).abs() < 1e-8,
            "IS identity: {is_value} vs {eta_inf}"
        );

        // COPE population identity: psi0 + E[psi1+psi2+psi3] = eta
        let (p1, p2, p3) = exact_psi_mean(&spec, &pi, gamma, &nuis).unwrap();
        let cope = psi0(&nuis, &pi) + p1 + p2 + p3;
        assert!(
            (cope - eta_inf).abs() < 1e-8,
            "COPE identity: {cope} vs {eta_inf}"
        );
    }

    #[test]
    fn psi_means_vanish_with_oracle_nuisances() {
        let spec = toy();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let st = stationary_distribution(&spec).unwrap();
        let nuis = oracle_nuisance_set(&spec, &pi, gamma, &st.p_inf).unwrap();
        let (p1, p2, p3) = exact_psi_mean(&spec, &pi, gamma, &nuis).unwrap();
        assert!(p1.abs() < 1e-8, "E psi1 = {p1}");
        assert!(p2.abs() < 1e-8, "E psi2 = {p2}");
        assert!(p3.abs() < 1e-8, "E psi3 = {p3}");
    }

    #[test]
    fn psi2_mean_vanishes_with_only_the_mediator_law_correct() {
        let spec = toy();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let st = stationary_distribution(&spec).unwrap();
        let mut nuis = oracle_nuisance_set(&spec, &pi, gamma, &st.p_inf).unwrap();
        // arbitrary bounded Q, omega, and pa_star; pm stays exact
        nuis.q = QFunction::from_table(
            vec![
                1.3, -0.7, 2.1, 0.4, -1.9, 0.8, 3.2, -0.3, 1.1, 0.6, -2.4, 1.7,
            ],
            2,
            3,
            2,
        )
        .unwrap();
        nuis.omega = RatioFunction::from_indicator_weights(vec![1.3, 0.6]).unwrap();
        nuis.pa_star =
            CondPmf::from_state_table(vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]], 1e-12)
                .unwrap();
        let (_, p2, _) = exact_psi_mean(&spec, &pi, gamma, &nuis).unwrap();
        assert!(p2.abs() < 1e-8, "E psi2 = {p2}");
    }

    #[test]
    fn psi3_mean_vanishes_with_only_the_behavior_policy_correct() {
        let spec = toy();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let st = stationary_distribution(&spec).unwrap();
        let mut nuis = oracle_nuisance_set(&spec, &pi, gamma, &st.p_inf).unwrap();
        // arbitrary bounded Q, omega, and mediator law; pa_star stays exact
        nuis.q = QFunction::from_table(
            vec![
                0.9, -1.2, 0.3, 2.6, -0.5, 1.4, -2.2, 0.7, 1.8, -0.9, 0.2, 2.9,
            ],
            2,
            3,
            2,
        )
        .unwrap();
        nuis.omega = RatioFunction::from_indicator_weights(vec![0.4, 1.9]).unwrap();
        nuis.pm = CondPmf::from_action_state_table(
            vec![
                vec![vec![0.3, 0.7], vec![0.8, 0.2]],
                vec![vec![0.55, 0.45], vec![0.15, 0.85]],
                vec![vec![0.6, 0.4], vec![0.35, 0.65]],
            ],
            1e-12,
        )
        .unwrap();
        let (_, _, p3) = exact_psi_mean(&spec, &pi, gamma, &nuis).unwrap();
        assert!(p3.abs() < 1e-8, "E psi3 = {p3}");
    }

    #[test]
    fn fitted_q_converges_to_exact_q() {
        let env = build_toy_env();
        let spec = env.tabular_spec();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let data = generate_dataset(
            &env,
            &SimConfig {
                n_trajectories: 5000,
                horizon: 100,
                burn_in: 0,
                seed: 3,
            },
        )
        .unwrap();
        let st = stationary_distribution(spec).unwrap();
        let nuis = oracle_nuisance_set(spec, &pi, gamma, &st.p_inf).unwrap();
        let fitted = fitted_q_evaluation(
            &data,
            &pi,
            Some((&nuis.pm, &nuis.pa_star)),
            gamma,
            2,
            3,
            &StateFeatures::Indicator { n_states: 2 },
            &FittedQConfig::default(),
        )
        .unwrap();
        assert!(fitted.converged());
        let tables = exact_q(spec, &pi, gamma, 1e-12).unwrap();
        let mut sup = 0.0f64;
        for m in 0..2 {
            for a in 0..3 {
                for s in 0..2usize {
                    let cell = (m * 3 + a) * 2 + s;
                    sup = sup.max((fitted.eval(m, a, &s) - tables.q[cell]).abs());
                }
            }
        }
        // per-cell sampling noise is amplified by up to 1/(1-gamma) = 10
        // through the fixed point; the gap shrinks like 1/sqrt(N)
        assert!(sup < 0.3, "sup |fitted - exact| = {sup}");
    }

    #[test]
    fn estimated_omega_converges_to_exact_omega() {
        let env = build_toy_env();
        let spec = env.tabular_spec();
        let pi = toy_target_policy();
        let gamma = 0.9;
        let data = generate_dataset(
            &env,
            &SimConfig {
                n_trajectories: 5000,
                horizon: 100,
                burn_in: 0,
                seed: 4,
            },
        )
        .unwrap();
        let cfg = NuisanceConfig::default();
        let pm = crate::nuisance::estimate_pm_tabular(&data, 2, 3, 2, &cfg).unwrap();
        let nu_hat = InitialDistribution::Tabular(estimate_nu_tabular(&data, 2).unwrap());
        let fitted = estimate_omega(
            &data,
            &pi,
            &pm,
            &nu_hat,
            gamma,
            &StateFeatures::Indicator { n_states: 2 },
            cfg.omega_ridge,
        )
        .unwrap();
        let exact = exact_omega(spec, &pi, gamma, spec.nu()).unwrap();
        for (s, &w) in exact.iter().enumerate() {
            assert!(
                (fitted.eval(&s) - w).abs() < 0.05,
                "omega({s}): {} vs {w}",
                fitted.eval(&s)
            );
        }
    }

    #[test]
    fn oracle_results_round_trip_and_invariants() {
        let spec = toy();
        let pi = toy_target_policy();
        let res = oracle_results(&spec, &pi, 0.9).unwrap();
        assert!(res.q_bellman_residual < 1e-12);
        assert!(res.stationary_residual < 1e-12);
        assert!((res.p_inf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // front-door identity between the stored V and Q
        for s in 0..2usize {
            let mut v = 0.0;
            let pi_row = pi.probs(&s);
            for (a_star, &pi_a) in pi_row.iter().enumerate() {
                for m in 0..2 {
                    for a in 0..3 {
                        v += pi_a
                            * res.pm[a_star][s][m]
                            * res.pa_star[s][a]
                            * res.q[(m * 3 + a) * 2 + s];
                    }
                }
            }
            assert!((v - res.v[s]).abs() < 1e-10);
        }
        let text = serde_json::to_string(&res).unwrap();
        let back: OracleResults = serde_json::from_str(&text).unwrap();
        assert_eq!(res.eta, back.eta);
        assert_eq!(res.q, back.q);
        assert_eq!(res.omega, back.omega);
    }
}

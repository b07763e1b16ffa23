//! Feature maps and penalized linear fitting shared by the continuous-state
//! nuisance estimators: random Fourier features with a median-heuristic
//! bandwidth, ridge regression, and ridge-penalized multinomial logistic
//! regression.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CopeError, Result};
use crate::seeding::derive_seed;

/// At most this many inputs enter the median-heuristic bandwidth.
const BANDWIDTH_SUBSAMPLE: usize = 1000;

/// A state representation the estimators can work with: either a dense
/// tabular index or a real vector. The two concrete state types are `usize`
/// (tabular) and `Vec<f64>` (continuous); the estimator stack is generic
/// over this trait so both modes share one code path.
pub trait StateKey: Clone + PartialEq + Send + Sync + 'static {
    fn tabular_index(&self) -> Option<usize>;
    fn coords(&self) -> Option<&[f64]>;
    fn from_tabular_index(index: usize) -> Option<Self>;
    /// The state augmented with a mediator coordinate, for estimators that
    /// fold the mediator into the state.
    fn augmented_with(&self, mediator: usize, n_mediators: usize) -> Self;
}

impl StateKey for usize {
    fn tabular_index(&self) -> Option<usize> {
        Some(*self)
    }
    fn coords(&self) -> Option<&[f64]> {
        None
    }
    fn from_tabular_index(index: usize) -> Option<Self> {
        Some(index)
    }
    fn augmented_with(&self, mediator: usize, n_mediators: usize) -> Self {
        self * n_mediators + mediator
    }
}

impl StateKey for Vec<f64> {
    fn tabular_index(&self) -> Option<usize> {
        None
    }
    fn coords(&self) -> Option<&[f64]> {
        Some(self)
    }
    fn from_tabular_index(_index: usize) -> Option<Self> {
        None
    }
    fn augmented_with(&self, mediator: usize, _n_mediators: usize) -> Self {
        let mut out = self.clone();
        out.push(mediator as f64);
        out
    }
}

/// A state feature basis: one-hot indicators over a finite state space, or
/// random Fourier features of a vector state (optionally with an intercept
/// coordinate). Evaluating a basis on the wrong kind of state is a wiring
/// bug and panics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum StateFeatures {
    Indicator {
        n_states: usize,
    },
    Fourier {
        map: FourierFeatureMap,
        intercept: bool,
    },
}

impl StateFeatures {
    pub fn dim(&self) -> usize {
        match self {
            StateFeatures::Indicator { n_states } => *n_states,
            StateFeatures::Fourier { map, intercept } => map.n_features() + usize::from(*intercept),
        }
    }

    pub fn eval<S: StateKey>(&self, s: &S) -> Vec<f64> {
        match self {
            StateFeatures::Indicator { n_states } => {
                let idx = s
                    .tabular_index()
                    .expect("indicator features need a tabular state");
                assert!(
                    idx < *n_states,
                    "state {idx} outside indicator basis of {n_states}"
                );
                let mut v = vec![0.0; *n_states];
                v[idx] = 1.0;
                v
            }
            StateFeatures::Fourier { map, intercept } => {
                let x = s.coords().expect("Fourier features need a vector state");
                let mut v = map.map(x);
                if *intercept {
                    v.push(1.0);
                }
                v
            }
        }
    }
}

/// Random Fourier feature map `x -> sqrt(2/D) cos(W x + b)`, approximating a
/// Gaussian kernel with bandwidth `sigma_b`. Deterministic once fitted.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FourierFeatureMap {
    n_features: usize,
    frequencies: DMatrix<f64>,
    phases: DVector<f64>,
    bandwidth: f64,
    scale: f64,
}

impl FourierFeatureMap {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn d_input(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn map(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.d_input());
        let xv = DVector::from_column_slice(x);
        let mut z = &self.frequencies * xv + &self.phases;
        for v in z.iter_mut() {
            *v = self.scale * v.cos();
        }
        z.data.into()
    }
}

/// Fits a Fourier feature map on sample inputs: the bandwidth is the median
/// pairwise Euclidean distance of up to 1000 subsampled inputs, frequencies
/// are drawn Normal(0, 1/bandwidth^2) per coordinate, and phases uniformly
/// on [0, 2pi).
///
/// If the median distance is zero but some pair is separated, the smallest
/// positive distance is used instead; if all pairwise distances vanish the
/// sample is degenerate and an error is returned.
pub fn fit_fourier_map(
    sample_inputs: &[Vec<f64>],
    n_features: usize,
    seed: u64,
) -> Result<FourierFeatureMap> {
    if n_features == 0 {
        return Err(CopeError::InvalidArgument("n_features must be >= 1".into()));
    }
    if sample_inputs.len() < 2 {
        return Err(CopeError::DegenerateSample(
            "need at least 2 sample inputs for the median heuristic".into(),
        ));
    }
    let d = sample_inputs[0].len();
    if d == 0 || sample_inputs.iter().any(|x| x.len() != d) {
        return Err(CopeError::InvalidArgument(
            "sample inputs must share one positive dimension".into(),
        ));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));
    let subsample: Vec<&Vec<f64>> = if sample_inputs.len() <= BANDWIDTH_SUBSAMPLE {
        sample_inputs.iter().collect()
    } else {
        rand::seq::index::sample(&mut rng, sample_inputs.len(), BANDWIDTH_SUBSAMPLE)
            .into_iter()
            .map(|i| &sample_inputs[i])
            .collect()
    };
    let mut distances = Vec::with_capacity(subsample.len() * (subsample.len() - 1) / 2);
    for i in 0..subsample.len() {
        for j in (i + 1)..subsample.len() {
            let d2: f64 = subsample[i]
                .iter()
                .zip(subsample[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            distances.push(d2.sqrt());
        }
    }
    distances.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let n = distances.len();
    let median = if n % 2 == 1 {
        distances[n / 2]
    } else {
        0.5 * (distances[n / 2 - 1] + distances[n / 2])
    };
    let bandwidth = if median > 0.0 {
        median
    } else {
        match distances.iter().find(|&&v| v > 0.0) {
            Some(&v) => v,
            None => {
                return Err(CopeError::DegenerateSample(
                    "all pairwise distances are zero; no bandwidth exists".into(),
                ))
            }
        }
    };

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1));
    let sd = 1.0 / bandwidth;
    let frequencies = DMatrix::from_fn(n_features, d, |_, _| {
        sd * rng.sample::<f64, _>(StandardNormal)
    });
    let phases = DVector::from_fn(n_features, |_, _| {
        rng.gen::<f64>() * 2.0 * std::f64::consts::PI
    });
    Ok(FourierFeatureMap {
        n_features,
        frequencies,
        phases,
        bandwidth,
        scale: (2.0 / n_features as f64).sqrt(),
    })
}

use rand::SeedableRng;

/// A fitted linear model: one weight row per output (regression) or per
/// class (multinomial logistic). Carries its fit diagnostics; `converged`
/// is false when the optimizer hit its iteration cap, in which case the
/// model is still usable but flagged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearModel {
    weights: DMatrix<f64>,
    lambda: f64,
    converged: bool,
    final_grad_norm: f64,
    n_iter: usize,
}

impl LinearModel {
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn converged(&self) -> bool {
        self.converged
    }
    pub fn final_grad_norm(&self) -> f64 {
        self.final_grad_norm
    }
    pub fn n_iter(&self) -> usize {
        self.n_iter
    }
    pub fn n_outputs(&self) -> usize {
        self.weights.nrows()
    }
    pub fn n_features(&self) -> usize {
        self.weights.ncols()
    }

    /// Linear predictions `W x`, one per output row.
    pub fn predict_linear(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_features());
        let xv = DVector::from_column_slice(x);
        (&self.weights * xv).data.into()
    }

    /// Scalar prediction for single-output models.
    pub fn predict_scalar(&self, x: &[f64]) -> f64 {
        self.predict_linear(x)[0]
    }

    /// Class pmf `softmax(W x)`; sums to 1 by construction.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.predict_linear(x))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Ridge regression: weights solve `(X^T X + lambda I) w = X^T y`, computed
/// through the SVD of `X` so that ill-conditioned designs stay stable. With
/// `lambda = 0` a rank-deficient design is an error rather than a silent
/// pseudo-inverse.
pub fn ridge_fit(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LinearModel> {
    if x.nrows() != y.len() {
        return Err(CopeError::InvalidArgument(format!(
            "design has {} rows but targets have {}",
            x.nrows(),
            y.len()
        )));
    }
    if lambda < 0.0 {
        return Err(CopeError::InvalidArgument(
            "ridge penalty must be >= 0".into(),
        ));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if lambda == 0.0 {
        let rank_tol = 1e-10 * sigma_max.max(1e-300);
        let deficient = svd.singular_values.len() < x.ncols()
            || svd.singular_values.iter().any(|&s| s <= rank_tol);
        if deficient {
            return Err(CopeError::SingularSystem(
                "X^T X is singular and no ridge penalty was given".into(),
            ));
        }
    }
    let yv = DVector::from_column_slice(y);
    let uty = u.transpose() * yv;
    let mut coef = DVector::zeros(svd.singular_values.len());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let denom = s * s + lambda;
        if denom > 0.0 {
            coef[k] = s * uty[k] / denom;
        }
    }
    let w = vt.transpose() * coef;
    Ok(LinearModel {
        weights: DMatrix::from_row_slice(1, w.len(), w.as_slice()),
        lambda,
        converged: true,
        final_grad_norm: 0.0,
        n_iter: 0,
    })
}

/// Repeated ridge solves against one fixed design: factors
/// `X^T X + lambda I` once and then solves for many target vectors, as the
/// iterative Q-function fit requires. Needs a strictly positive penalty so
/// the factorization is unconditionally well posed.
pub struct RidgeSolver {
    chol: Cholesky<f64, Dyn>,
    xt: DMatrix<f64>,
}

impl RidgeSolver {
    pub fn new(x: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if lambda <= 0.0 {
            return Err(CopeError::InvalidArgument(
                "RidgeSolver requires a strictly positive penalty".into(),
            ));
        }
        let d = x.ncols();
        let xt = x.transpose();
        let mut gram = &xt * x;
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        let chol = Cholesky::new(gram).ok_or_else(|| {
            CopeError::SingularSystem(
                "ridge-regularized Gram matrix is not positive definite".into(),
            )
        })?;
        Ok(RidgeSolver { chol, xt })
    }

    pub fn solve(&self, y: &[f64]) -> DVector<f64> {
        let rhs = &self.xt * DVector::from_column_slice(y);
        self.chol.solve(&rhs)
    }
}

/// Ridge-penalized multinomial logistic regression fit by Newton's method
/// with step halving. Classes are dense labels `0..n_classes` with
/// `n_classes` inferred as `max(label) + 1`; at least two distinct labels
/// must be present and the penalty must be positive (it keeps separable
/// problems finite). A fit that exhausts `max_iter` before the gradient norm
/// falls below `tol` is returned with `converged() == false`.
pub fn logit_fit(
    x: &DMatrix<f64>,
    labels: &[usize],
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LinearModel> {
    let n = x.nrows();
    let d = x.ncols();
    if labels.len() != n {
        return Err(CopeError::InvalidArgument(format!(
            "design has {n} rows but labels have {}",
            labels.len()
        )));
    }
    if n == 0 || d == 0 {
        return Err(CopeError::InvalidArgument("empty design".into()));
    }
    if lambda <= 0.0 {
        return Err(CopeError::InvalidArgument(
            "multinomial fit requires a strictly positive penalty".into(),
        ));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; n_classes];
        for &l in labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&b| b).count()
    };
    if distinct < 2 {
        return Err(CopeError::DegenerateSample(
            "multinomial fit needs at least two distinct labels".into(),
        ));
    }

    let dim = n_classes * d;
    let mut w = DMatrix::<f64>::zeros(n_classes, d);
    let mut probs = DMatrix::<f64>::zeros(n, n_classes);
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    let mut iters = 0usize;

    let objective = |w: &DMatrix<f64>, probs_logits: &DMatrix<f64>| -> f64 {
        // penalized log-likelihood given the logits X W^T
        let mut ll = 0.0;
        for i in 0..n {
            let row: Vec<f64> = (0..n_classes).map(|k| probs_logits[(i, k)]).collect();
            ll += row[labels[i]] - log_sum_exp(&row);
        }
        ll - 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
    };

    let logits_of = |w: &DMatrix<f64>| x * w.transpose();
    let mut logits = logits_of(&w);
    let mut obj = objective(&w, &logits);

    for iter in 1..=max_iter {
        iters = iter;
        for i in 0..n {
            let row: Vec<f64> = (0..n_classes).map(|k| logits[(i, k)]).collect();
            let p = softmax(&row);
            for k in 0..n_classes {
                probs[(i, k)] = p[k];
            }
        }
        // gradient of the penalized log-likelihood, class-major flattening
        let mut grad = DVector::<f64>::zeros(dim);
        for k in 0..n_classes {
            for j in 0..d {
                let mut g = 0.0;
                for i in 0..n {
                    let resid = if labels[i] == k { 1.0 } else { 0.0 } - probs[(i, k)];
                    g += resid * x[(i, j)];
                }
                grad[k * d + j] = g - lambda * w[(k, j)];
            }
        }
        grad_norm = grad.norm();
        if grad_norm < tol {
            converged = true;
            iters = iter - 1;
            break;
        }

        // negative Hessian: sum_i (diag(p_i) - p_i p_i^T) (x) x_i x_i^T + lambda I
        let mut neg_h = DMatrix::<f64>::zeros(dim, dim);
        let mut weighted = DMatrix::<f64>::zeros(n, d);
        for k in 0..n_classes {
            for k2 in k..n_classes {
                for i in 0..n {
                    let c = if k == k2 {
                        probs[(i, k)] * (1.0 - probs[(i, k)])
                    } else {
                        -probs[(i, k)] * probs[(i, k2)]
                    };
                    for j in 0..d {
                        weighted[(i, j)] = c * x[(i, j)];
                    }
                }
                let block = weighted.transpose() * x;
                for j in 0..d {
                    for j2 in 0..d {
                        neg_h[(k * d + j, k2 * d + j2)] = block[(j, j2)];
                        if k2 != k {
                            neg_h[(k2 * d + j2, k * d + j)] = block[(j, j2)];
                        }
                    }
                }
            }
        }
        for i in 0..dim {
            neg_h[(i, i)] += lambda;
        }
        let step = match Cholesky::new(neg_h) {
            Some(chol) => chol.solve(&grad),
            None => {
                return Err(CopeError::SingularSystem(
                    "logistic Newton system is not positive definite".into(),
                ))
            }
        };

        // Step halving keeps Newton monotone far from the optimum. Near it,
        // the quadratic improvement falls below the objective's floating
        // point resolution and no scaled step shows strict progress; the
        // full Newton step is then the right move (quadratic convergence),
        // so it is the fallback rather than a vanishing step.
        let mut scale = 1.0;
        let mut accepted = None;
        let mut full_step = None;
        for halving in 0..30 {
            let mut trial = w.clone();
            for k in 0..n_classes {
                for j in 0..d {
                    trial[(k, j)] += scale * step[k * d + j];
                }
            }
            let trial_logits = logits_of(&trial);
            let trial_obj = objective(&trial, &trial_logits);
            if trial_obj > obj {
                accepted = Some((trial, trial_logits, trial_obj));
                break;
            }
            if halving == 0 {
                full_step = Some((trial, trial_logits, trial_obj));
            }
            scale *= 0.5;
        }
        let (next_w, next_logits, next_obj) =
            accepted.unwrap_or_else(|| full_step.expect("first halving recorded"));
        w = next_w;
        logits = next_logits;
        obj = next_obj;
    }

    Ok(LinearModel {
        weights: w,
        lambda,
        converged,
        final_grad_norm: grad_norm,
        n_iter: iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sigmoid;

    #[test]
    fn bandwidth_of_two_points_is_their_distance() {
        let map = fit_fourier_map(&[vec![0.0, 0.0], vec![0.0, 2.0]], 8, 1).unwrap();
        assert!((map.bandwidth() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_sample_is_rejected() {
        let inputs = vec![vec![1.0, 1.0]; 5];
        assert!(matches!(
            fit_fourier_map(&inputs, 8, 1),
            Err(CopeError::DegenerateSample(_))
        ));
    }

    #[test]
    fn duplicate_heavy_sample_falls_back_to_smallest_positive_distance() {
        let mut inputs = vec![vec![0.0]; 9];
        inputs.push(vec![3.0]);
        let map = fit_fourier_map(&inputs, 8, 1).unwrap();
        assert!((map.bandwidth() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn feature_norm_is_bounded_by_two() {
        let inputs: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64 * 0.37 - 3.0, (i as f64).sin()])
            .collect();
        let map = fit_fourier_map(&inputs, 64, 5).unwrap();
        for x in &inputs {
            let z = map.map(x);
            let norm2: f64 = z.iter().map(|v| v * v).sum();
            assert!(norm2 <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn map_is_reproducible_for_fixed_seed() {
        let inputs: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![i as f64, (i * i) as f64 * 0.01])
            .collect();
        let a = fit_fourier_map(&inputs, 16, 9).unwrap();
        let b = fit_fourier_map(&inputs, 16, 9).unwrap();
        assert_eq!(a.map(&[0.3, -1.2]), b.map(&[0.3, -1.2]));
        let c = fit_fourier_map(&inputs, 16, 10).unwrap();
        assert_ne!(a.map(&[0.3, -1.2]), c.map(&[0.3, -1.2]));
    }

    #[test]
    fn inner_products_approximate_gaussian_kernel() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let inputs: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let map = fit_fourier_map(&inputs, 2048, 4).unwrap();
        let sigma = map.bandwidth();
        for pair in inputs.chunks(2).take(10) {
            let (x, y) = (&pair[0], &pair[1]);
            let zx = map.map(x);
            let zy = map.map(y);
            let dot: f64 = zx.iter().zip(zy.iter()).map(|(a, b)| a * b).sum();
            let d2: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let kernel = (-d2 / (2.0 * sigma * sigma)).exp();
            assert!((dot - kernel).abs() < 0.05, "dot={dot}, kernel={kernel}");
        }
    }

    #[test]
    fn ridge_identity_examples() {
        let x = DMatrix::<f64>::identity(2, 2);
        let w0 = ridge_fit(&x, &[1.0, 2.0], 0.0).unwrap();
        assert!((w0.weights()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((w0.weights()[(0, 1)] - 2.0).abs() < 1e-12);
        let w1 = ridge_fit(&x, &[1.0, 2.0], 1.0).unwrap();
        assert!((w1.weights()[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((w1.weights()[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_first_order_optimality() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 50;
        let d = 5;
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let lambda = 1e-3;
        let model = ridge_fit(&x, &y, lambda).unwrap();
        let w = DVector::from_column_slice(model.weights().row(0).transpose().as_slice());
        let resid = &x * &w - DVector::from_column_slice(&y);
        let grad = x.transpose() * resid + lambda * &w;
        assert!(grad.norm() < 1e-8, "gradient norm {}", grad.norm());
    }

    #[test]
    fn ridge_rejects_singular_unpenalized_system() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            ridge_fit(&x, &[1.0, 2.0], 0.0),
            Err(CopeError::SingularSystem(_))
        ));
        assert!(ridge_fit(&x, &[1.0, 2.0], 1e-3).is_ok());
    }

    #[test]
    fn ridge_is_row_order_invariant() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let n = 20;
        let d = 3;
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>());
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let model = ridge_fit(&x, &y, 1e-3).unwrap();
        // reverse the rows
        let xr = DMatrix::from_fn(n, d, |i, j| x[(n - 1 - i, j)]);
        let yr: Vec<f64> = (0..n).map(|i| y[n - 1 - i]).collect();
        let model_r = ridge_fit(&xr, &yr, 1e-3).unwrap();
        for j in 0..d {
            assert!((model.weights()[(0, j)] - model_r.weights()[(0, j)]).abs() < 1e-10);
        }
    }

    #[test]
    fn ridge_solver_matches_one_shot_fit() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let n = 40;
        let d = 4;
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>() - 0.5);
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let solver = RidgeSolver::new(&x, 1e-3).unwrap();
        let w = solver.solve(&y);
        let model = ridge_fit(&x, &y, 1e-3).unwrap();
        for j in 0..d {
            assert!((w[j] - model.weights()[(0, j)]).abs() < 1e-9);
        }
    }

    #[test]
    fn intercept_only_balanced_labels_give_half() {
        let n = 40;
        let x = DMatrix::from_element(n, 1, 1.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let model = logit_fit(&x, &labels, 1e-3, 500, 1e-8).unwrap();
        assert!(model.converged());
        let p = model.predict_proba(&[1.0]);
        assert!((p[0] - 0.5).abs() < 1e-6);
        assert!((p[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn separable_data_stays_finite_under_penalty() {
        let n = 30;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 - 14.5);
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= 15)).collect();
        let model = logit_fit(&x, &labels, 1.0, 500, 1e-8).unwrap();
        assert!(model.converged());
        assert!(model.weights().iter().all(|w| w.is_finite()));
    }

    #[test]
    fn logit_recovers_generating_model() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n = 10_000;
        // features (1, x) with x uniform on [-2, 2]; true P(1|x) = sigmoid(0.7 x - 0.4)
        let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let labels: Vec<usize> = xs
            .iter()
            .map(|&v| usize::from(rng.gen::<f64>() < sigmoid(0.7 * v - 0.4)))
            .collect();
        let model = logit_fit(&x, &labels, 1e-3, 500, 1e-8).unwrap();
        assert!(model.converged());
        let mut sq = 0.0;
        let grid: Vec<f64> = (0..41).map(|k| -2.0 + 0.1 * k as f64).collect();
        for &v in &grid {
            let p = model.predict_proba(&[1.0, v])[1];
            let truth = sigmoid(0.7 * v - 0.4);
            sq += (p - truth) * (p - truth);
        }
        let rmse = (sq / grid.len() as f64).sqrt();
        assert!(rmse < 0.02, "rmse={rmse}");
    }

    #[test]
    fn multinomial_three_class_pmf_sums_to_one() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let n = 3000;
        let xs: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0))
            .collect();
        let x = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => xs[i].0,
            _ => xs[i].1,
        });
        let labels: Vec<usize> = xs
            .iter()
            .map(|&(a, b)| {
                let logits = [0.0, a - b, 0.5 * b];
                let p = softmax(&logits);
                let u: f64 = rng.gen();
                if u < p[0] {
                    0
                } else if u < p[0] + p[1] {
                    1
                } else {
                    2
                }
            })
            .collect();
        let model = logit_fit(&x, &labels, 1e-3, 500, 1e-8).unwrap();
        assert!(model.converged());
        for &(a, b) in xs.iter().take(25) {
            let p = model.predict_proba(&[1.0, a, b]);
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn model_json_round_trip() {
        let x = DMatrix::<f64>::identity(2, 2);
        let model = ridge_fit(&x, &[1.0, 2.0], 0.5).unwrap();
        let text = serde_json::to_string(&model).unwrap();
        let back: LinearModel = serde_json::from_str(&text).unwrap();
        assert_eq!(model.weights(), back.weights());

        let inputs = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.5, -0.5]];
        let map = fit_fourier_map(&inputs, 12, 2).unwrap();
        let text = serde_json::to_string(&map).unwrap();
        let back: FourierFeatureMap = serde_json::from_str(&text).unwrap();
        assert_eq!(map.map(&[0.2, 0.4]), back.map(&[0.2, 0.4]));
    }
}

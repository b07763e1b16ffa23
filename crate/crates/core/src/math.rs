//! Small numeric helpers shared across modules.

/// Logistic function 1 / (1 + e^{-x}), evaluated in a form that does not
/// overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sample mean; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased (n-1 denominator) sample variance; 0 when fewer than two points.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Standard deviation from `sample_variance`.
pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Upper alpha/2 quantile of the standard normal, i.e. the z used by a
/// two-sided level-(1-alpha) Wald interval.
pub fn z_two_sided(alpha: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    n.inverse_cdf(1.0 - alpha / 2.0)
}

/// Total variation distance between two pmfs of equal length.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(q.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry_and_bounds() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        for &x in &[-30.0, -1.0, 0.3, 5.0, 30.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0);
            assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
        // saturation without overflow at extreme inputs
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-12);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(800.0) > 1.0 - 1e-12);
    }

    #[test]
    fn z_quantile_matches_reference() {
        assert!((z_two_sided(0.05) - 1.959964).abs() < 1e-6);
        assert!((z_two_sided(0.10) - 1.644854).abs() < 1e-6);
    }

    #[test]
    fn variance_uses_unbiased_denominator() {
        let xs = [1.0, 2.0, 3.0];
        assert!((sample_variance(&xs) - 1.0).abs() < 1e-15);
    }
}

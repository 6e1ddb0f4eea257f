//! Kolmogorov-Smirnov tests used to check samplers and generated data.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

impl KsResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Asymptotic Kolmogorov survival function `Q(lambda)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

fn p_value(d: f64, n_eff: f64) -> f64 {
    let sq = n_eff.sqrt();
    kolmogorov_q((sq + 0.12 + 0.11 / sq) * d)
}

/// One-sample test of `samples` against Uniform[lo, hi].
pub fn ks_uniform_test(samples: &[f64], lo: f64, hi: f64) -> KsResult {
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - cdf).max(cdf - i as f64 / n);
    }
    KsResult { statistic: d, p_value: p_value(d, n) }
}

/// Two-sample test of equality of distributions.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(|p, q| p.total_cmp(q));
    ys.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let n_eff = (n * m) as f64 / (n + m) as f64;
    KsResult { statistic: d, p_value: p_value(d, n_eff) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evenly_spaced_points_are_uniform() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0 * 4.0).collect();
        let r = ks_uniform_test(&xs, 0.0, 4.0);
        assert!(r.statistic < 1e-3 + 1e-12);
        assert!(!r.rejects(0.01));
    }

    #[test]
    fn shifted_samples_are_rejected() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 / 1000.0).powi(2) * 4.0).collect();
        assert!(ks_uniform_test(&xs, 0.0, 4.0).rejects(0.01));
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let b: Vec<f64> = (0..500).map(|i| 0.3 + i as f64 / 500.0).collect();
        assert!(ks_two_sample(&a, &b).rejects(0.01));
        assert!(!ks_two_sample(&a, &a).rejects(0.01));
    }

    #[test]
    fn kolmogorov_critical_value_at_one_percent() {
        // Q(1.6276) = 0.01
        assert!((kolmogorov_q(1.6276) - 0.01).abs() < 1e-4);
    }
}

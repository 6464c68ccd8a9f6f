//! Small statistical helpers shared by the Monte Carlo modules.

use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: u64,
    pub trials: u64,
}

impl Proportion {
    pub fn new(successes: u64, trials: u64) -> Self {
        Proportion { successes, trials }
    }

    pub fn estimate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }

    /// Binomial standard error of the estimate.
    pub fn std_err(&self) -> f64 {
        if self.trials == 0 {
            return f64::INFINITY;
        }
        let p = self.estimate();
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    /// Wilson score interval at the given normal quantile.
    pub fn wilson(&self, z: f64) -> (f64, f64) {
        if self.trials == 0 {
            return (0.0, 1.0);
        }
        let n = self.trials as f64;
        let p = self.estimate();
        let z2 = z * z;
        let denom = 1.0 + z2 / n;
        let centre = (p + z2 / (2.0 * n)) / denom;
        let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
        ((centre - half).max(0.0), (centre + half).min(1.0))
    }

    pub fn ci95(&self) -> (f64, f64) {
        self.wilson(Z95)
    }
}

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Combine two accumulators (parallel Welford).
    pub fn merge(&self, o: &Moments) -> Moments {
        let n = self.n + o.n;
        if n == 0 {
            return Moments::default();
        }
        let d = o.mean - self.mean;
        let mean = self.mean + d * o.n as f64 / n as f64;
        let m2 = self.m2 + o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64;
        Moments { n, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        (self.variance() / self.n.max(1) as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub n: usize,
}

impl LinearFit {
    pub fn slope_ci95(&self) -> (f64, f64) {
        (self.slope - Z95 * self.slope_se, self.slope + Z95 * self.slope_se)
    }
}

/// Weighted least squares line fit; `weights` are inverse variances.
/// With no weights the standard errors come from the residual scatter.
pub fn fit_line(xs: &[f64], ys: &[f64], weights: Option<&[f64]>) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() == n => w.to_vec(),
        Some(_) => return None,
        None => vec![1.0; n],
    };
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(xs).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(ys).map(|(w, y)| w * y).sum();
    let xbar = sx / sw;
    let ybar = sy / sw;
    let sxx: f64 = w.iter().zip(xs).map(|(w, x)| w * (x - xbar).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = w
        .iter()
        .zip(xs.iter().zip(ys))
        .map(|(w, (x, y))| w * (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let (slope_se, intercept_se) = if weights.is_some() {
        ((1.0 / sxx).sqrt(), (1.0 / sw + xbar * xbar / sxx).sqrt())
    } else if n > 2 {
        let rss: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        let s2 = rss / (n - 2) as f64;
        ((s2 / sxx).sqrt(), (s2 * (1.0 / n as f64 + xbar * xbar / sxx)).sqrt())
    } else {
        (0.0, 0.0)
    };
    Some(LinearFit { slope, intercept, slope_se, intercept_se, n })
}

/// Slope of log(y) against log(x).
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    if xs.iter().chain(ys).any(|v| *v <= 0.0) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    fit_line(&lx, &ly, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_contains_estimate() {
        let p = Proportion::new(30, 100);
        let (lo, hi) = p.ci95();
        assert!(lo < 0.3 && 0.3 < hi);
        // Reference value of the Wilson interval for 30/100.
        assert!((lo - 0.2189).abs() < 1e-3 && (hi - 0.3958).abs() < 1e-3);
    }

    #[test]
    fn wilson_degenerate() {
        let (lo, hi) = Proportion::new(0, 50).ci95();
        assert!(lo < 1e-12);
        assert!(hi > 0.0 && hi < 0.1);
    }

    #[test]
    fn exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let f = fit_line(&xs, &ys, None).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept + 1.0).abs() < 1e-12);
        assert!(f.slope_se < 1e-9);
    }

    #[test]
    fn welford_matches_direct() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0];
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((m.mean() - mean).abs() < 1e-12);
        assert!((m.variance() - var).abs() < 1e-12);
        let (mut a, mut b) = (Moments::default(), Moments::default());
        xs[..2].iter().for_each(|&x| a.push(x));
        xs[2..].iter().for_each(|&x| b.push(x));
        let c = a.merge(&b);
        assert!((c.mean() - mean).abs() < 1e-12 && (c.variance() - var).abs() < 1e-12);
    }
}

//! Downstream causal and diagnostic quantities: weighted ATE, Kish ESS,
//! feature balance (ASDM), and chi-squared divergence estimates with an
//! analytic Gaussian oracle.

use crate::data::StudyArm;
use crate::error::{Error, Result};
use crate::weights::WeightVector;

/// ATE plus the per-arm pieces it was built from.
#[derive(Clone, Debug)]
pub struct EffectReport {
    pub ate: f64,
    pub weighted_means: Vec<f64>,
    pub ess: Vec<f64>,
}

/// Per-feature absolute standardized difference of means between two arms.
#[derive(Clone, Debug)]
pub struct BalanceReport {
    pub per_feature: Vec<f64>,
    pub mean_asdm: f64,
    /// Features skipped because the pooled standard deviation was zero.
    pub skipped: Vec<usize>,
}

fn weighted_mean(y: &[f64], w: &WeightVector) -> Result<f64> {
    if y.len() != w.len() {
        return Err(Error::InvalidArgument(format!(
            "{} outcomes vs {} weights",
            y.len(),
            w.len()
        )));
    }
    Ok(y.iter().zip(&w.weights).map(|(yi, wi)| yi * wi).sum())
}

/// Self-normalized importance-weighted ATE: sum(w1*y1) - sum(w2*y2).
pub fn weighted_ate(y1: &[f64], w1: &WeightVector, y2: &[f64], w2: &WeightVector) -> Result<f64> {
    Ok(weighted_mean(y1, w1)? - weighted_mean(y2, w2)?)
}

/// Kish effective sample size (sum w)^2 / sum w^2.
pub fn kish_ess(w: &WeightVector) -> Result<f64> {
    let sum: f64 = w.weights.iter().sum();
    let sum_sq: f64 = w.weights.iter().map(|wi| wi * wi).sum();
    if sum_sq == 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(sum * sum / sum_sq)
}

/// Full effect report for two outcome-bearing arms.
pub fn effect_report(
    y1: &[f64],
    w1: &WeightVector,
    y2: &[f64],
    w2: &WeightVector,
) -> Result<EffectReport> {
    let m1 = weighted_mean(y1, w1)?;
    let m2 = weighted_mean(y2, w2)?;
    Ok(EffectReport {
        ate: m1 - m2,
        weighted_means: vec![m1, m2],
        ess: vec![kish_ess(w1)?, kish_ess(w2)?],
    })
}

/// ASDM per feature: |weighted mean difference| / pooled std, where the
/// pooled std uses UNWEIGHTED per-arm variances so the denominator stays
/// fixed across weighting methods.
pub fn asdm(
    arm1: &StudyArm,
    w1: &WeightVector,
    arm2: &StudyArm,
    w2: &WeightVector,
) -> Result<BalanceReport> {
    let d = arm1.feature_dim();
    if arm2.feature_dim() != d {
        return Err(Error::DataValidation(format!(
            "feature dims differ: {} vs {}",
            d,
            arm2.feature_dim()
        )));
    }
    if w1.len() != arm1.n_units() || w2.len() != arm2.n_units() {
        return Err(Error::InvalidArgument("weight/arm row-count mismatch".into()));
    }

    let col = |arm: &StudyArm, j: usize| -> Vec<f64> {
        (0..arm.n_units()).map(|r| arm.row(r)[j]).collect()
    };
    let unweighted_var = |v: &[f64]| -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };

    let mut per_feature = Vec::with_capacity(d);
    let mut skipped = Vec::new();
    for j in 0..d {
        let c1 = col(arm1, j);
        let c2 = col(arm2, j);
        let pooled = ((unweighted_var(&c1) + unweighted_var(&c2)) / 2.0).sqrt();
        if pooled == 0.0 {
            skipped.push(j);
            continue;
        }
        let m1 = weighted_mean(&c1, w1)?;
        let m2 = weighted_mean(&c2, w2)?;
        per_feature.push((m1 - m2).abs() / pooled);
    }
    if per_feature.is_empty() {
        return Err(Error::DataValidation("all features have zero pooled std".into()));
    }
    let mean_asdm = per_feature.iter().sum::<f64>() / per_feature.len() as f64;
    Ok(BalanceReport { per_feature, mean_asdm, skipped })
}

/// Monte Carlo chi-squared estimate from unnormalized likelihood ratios of
/// samples drawn from q: E_q[(p/q)^2] - 1.
pub fn chi2_from_ratios(raw_ratios: &[f64]) -> Result<f64> {
    if raw_ratios.is_empty() {
        return Err(Error::InvalidArgument("chi2_from_ratios on empty input".into()));
    }
    let mean_sq = raw_ratios.iter().map(|r| r * r).sum::<f64>() / raw_ratios.len() as f64;
    Ok(mean_sq - 1.0)
}

/// A 1-D Gaussian by mean and variance.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if var <= 0.0 || !mean.is_finite() || !var.is_finite() {
            return Err(Error::InvalidArgument("Gaussian needs finite mean, positive var".into()));
        }
        Ok(Gaussian { mean, var })
    }

    pub fn density(&self, x: f64) -> f64 {
        let z = (x - self.mean).powi(2) / (2.0 * self.var);
        (-z).exp() / (2.0 * std::f64::consts::PI * self.var).sqrt()
    }
}

/// Closed-form Pearson chi-squared divergence between 1-D Gaussians:
/// integral p^2/q - 1. Finite only when 2/var_p - 1/var_q > 0; for equal
/// variances it reduces to exp(delta^2/var) - 1.
pub fn analytic_gaussian_chi2(p: Gaussian, q: Gaussian) -> Result<f64> {
    if 2.0 / p.var - 1.0 / q.var <= 0.0 {
        return Err(Error::DivergenceInfinite);
    }
    // integral exp(-a x^2 + b x + c) with
    //   a = 1/var_p - 1/(2 var_q)
    //   b = 2 mu_p/var_p - mu_q/var_q
    //   c = -mu_p^2/var_p + mu_q^2/(2 var_q)
    // equals sqrt(pi/a) exp(b^2/(4a) + c).
    let a = 1.0 / p.var - 1.0 / (2.0 * q.var);
    let b = 2.0 * p.mean / p.var - q.mean / q.var;
    let c = -p.mean.powi(2) / p.var + q.mean.powi(2) / (2.0 * q.var);
    let integral = (q.var.sqrt() / p.var) * (1.0 / (2.0 * a)).sqrt() * (b * b / (4.0 * a) + c).exp();
    Ok(integral - 1.0)
}

/// Adaptive Simpson quadrature of `f` on [lo, hi] to absolute tolerance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        // The halved tolerance can fall below what f64 spacing resolves; at
        // that point further splitting only accumulates rounding error.
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol || tol < f64::EPSILON {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let m = 0.5 * (lo + hi);
    let (fa, fm, fb) = (f(lo), f(m), f(hi));
    let whole = simpson(lo, hi, fa, fm, fb);
    recurse(f, lo, hi, fa, fm, fb, whole, tol, 40)
}

/// Quadrature route for the Gaussian chi-squared divergence, used to
/// cross-check the closed form.
pub fn quadrature_gaussian_chi2(p: Gaussian, q: Gaussian, tol: f64) -> Result<f64> {
    if 2.0 / p.var - 1.0 / q.var <= 0.0 {
        return Err(Error::DivergenceInfinite);
    }
    // The integrand p^2/q decays like a Gaussian with precision
    // 2/var_p - 1/var_q; pad the integration window generously.
    let spread = (1.0 / (2.0 / p.var - 1.0 / q.var)).sqrt();
    let center = p.mean;
    let half_width = 20.0 * spread + (p.mean - q.mean).abs() * 20.0 + 20.0 * q.var.sqrt();
    // Evaluate p^2/q in log space: both densities underflow to zero in the
    // far tails and the naive ratio becomes 0/0.
    let f = move |x: f64| {
        let log_p = -0.5 * (x - p.mean).powi(2) / p.var
            - 0.5 * (2.0 * std::f64::consts::PI * p.var).ln();
        let log_q = -0.5 * (x - q.mean).powi(2) / q.var
            - 0.5 * (2.0 * std::f64::consts::PI * q.var).ln();
        let log_f = 2.0 * log_p - log_q;
        if log_f < -700.0 {
            0.0
        } else {
            log_f.exp()
        }
    };
    let integral = adaptive_simpson(&f, center - half_width, center + half_width, tol);
    Ok(integral - 1.0)
}

/// Both sides of the variance-divergence identity for a constant estimand:
/// bootstrap variance of the IS estimate of 1 (lhs) against chi2/n (rhs).
pub fn is_variance_relation_check(
    raw_ratios: &[f64],
    n_replicates: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::Rng;
    use rand::SeedableRng;

    if raw_ratios.is_empty() {
        return Err(Error::InvalidArgument("empty ratios".into()));
    }
    let n = raw_ratios.len();
    let rhs = chi2_from_ratios(raw_ratios)? / n as f64;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut estimates = Vec::with_capacity(n_replicates);
    for _ in 0..n_replicates {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += raw_ratios[rng.random_range(0..n)];
        }
        estimates.push(sum / n as f64);
    }
    let mean = estimates.iter().sum::<f64>() / n_replicates as f64;
    let lhs =
        estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n_replicates - 1) as f64;
    Ok((lhs, rhs))
}

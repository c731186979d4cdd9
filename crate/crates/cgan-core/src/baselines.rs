//! Reference weighting methods: logistic-regression propensity scores,
//! inverse probability of treatment weighting, and percentile-clipped IPW.

use nalgebra::{DMatrix, DVector};

use crate::data::StudyArm;
use crate::error::{Error, Result};
use crate::weights::{normalize, WeightVector};

/// Fitted logistic propensity model P(T = 1 | x).
#[derive(Clone, Debug)]
pub struct PropensityModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Set when the fit shows signs of perfect separation (diverging
    /// coefficient norm); scores are still returned.
    pub separation_warning: bool,
}

impl PropensityModel {
    pub fn score(&self, row: &[f64]) -> f64 {
        let eta = self.intercept
            + row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum::<f64>();
        1.0 / (1.0 + (-eta).exp())
    }

    pub fn scores(&self, arm: &StudyArm) -> Vec<f64> {
        (0..arm.n_units()).map(|r| self.score(arm.row(r))).collect()
    }
}

const RIDGE: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 200;
const SEPARATION_NORM: f64 = 1e3;
/// |eta| beyond which a fitted probability counts as saturated (p within
/// about 7e-5 of 0 or 1).
const SATURATION_ETA: f64 = 9.6;

/// Maximizes the ridge-penalized Bernoulli log-likelihood of the treatment
/// indicator via iteratively reweighted least squares.
pub fn fit_logistic_propensity(features: &[&StudyArm], treated: &[bool]) -> Result<PropensityModel> {
    let rows: usize = features.iter().map(|a| a.n_units()).sum();
    if treated.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "{} treatment indicators for {} rows",
            treated.len(),
            rows
        )));
    }
    if treated.iter().all(|&t| t) || treated.iter().all(|&t| !t) {
        return Err(Error::DataValidation("both treatment classes must be present".into()));
    }
    let d = features[0].feature_dim();
    for arm in features {
        if arm.feature_dim() != d {
            return Err(Error::DataValidation("feature dims differ across arms".into()));
        }
    }

    // design matrix with leading intercept column
    let mut x = DMatrix::<f64>::zeros(rows, d + 1);
    let mut y = DVector::<f64>::zeros(rows);
    let mut r = 0usize;
    let mut flat_treated = treated.iter();
    for arm in features {
        for row_idx in 0..arm.n_units() {
            x[(r, 0)] = 1.0;
            for (j, v) in arm.row(row_idx).iter().enumerate() {
                x[(r, j + 1)] = *v;
            }
            y[r] = if *flat_treated.next().unwrap() { 1.0 } else { 0.0 };
            r += 1;
        }
    }

    let mut beta = DVector::<f64>::zeros(d + 1);
    let mut separation_warning = false;
    for _ in 0..MAX_ITERS {
        let eta = &x * &beta;
        let p: DVector<f64> = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let grad = x.transpose() * (&y - &p) - RIDGE * &beta;
        if grad.norm() < GRAD_TOL {
            break;
        }
        // IRLS Hessian: X^T W X + ridge, W = diag(p(1-p))
        let w: DVector<f64> = p.map(|pi| (pi * (1.0 - pi)).max(1e-10));
        let mut xtwx = DMatrix::<f64>::zeros(d + 1, d + 1);
        for i in 0..rows {
            let xi = x.row(i);
            for a in 0..d + 1 {
                for b in a..d + 1 {
                    xtwx[(a, b)] += w[i] * xi[a] * xi[b];
                }
            }
        }
        for a in 0..d + 1 {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
            xtwx[(a, a)] += RIDGE;
        }
        let step = xtwx
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::InvalidArgument("singular IRLS system".into()))?;
        beta += step;
        if beta.norm() > SEPARATION_NORM {
            separation_warning = true;
            break;
        }
    }
    if !separation_warning && beta.norm() > SEPARATION_NORM {
        separation_warning = true;
    }
    // The ridge keeps the norm finite even under perfect separation, so also
    // flag a fit that classifies every unit correctly with saturated
    // probabilities: that only happens when the unpenalized norm diverges.
    if !separation_warning {
        let eta = &x * &beta;
        let saturated_perfect = eta
            .iter()
            .zip(y.iter())
            .all(|(&e, &yi)| if yi > 0.5 { e > SATURATION_ETA } else { e < -SATURATION_ETA });
        if saturated_perfect {
            separation_warning = true;
        }
    }

    Ok(PropensityModel {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        separation_warning,
    })
}

const SCORE_CLAMP: f64 = 1e-12;

/// IPW raw weights 1/e(x) for treated units and 1/(1 - e(x)) for controls,
/// self-normalized per arm.
pub fn ipw_weights(scores: &[f64], treated: &[bool]) -> Result<(WeightVector, WeightVector)> {
    if scores.len() != treated.len() {
        return Err(Error::InvalidArgument("scores/indicator length mismatch".into()));
    }
    let mut raw_treated = Vec::new();
    let mut raw_control = Vec::new();
    for (&e, &t) in scores.iter().zip(treated) {
        let e = e.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        if t {
            raw_treated.push(1.0 / e);
        } else {
            raw_control.push(1.0 / (1.0 - e));
        }
    }
    Ok((normalize(0, raw_treated)?, normalize(1, raw_control)?))
}

/// Linear-interpolation empirical percentile over the pooled scores.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Clamps scores to the [lower_pct, upper_pct] empirical percentile band,
/// percentiles computed over the pooled score vector.
pub fn clip_percentile(scores: &[f64], lower_pct: f64, upper_pct: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("clip_percentile on empty scores".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile(&sorted, lower_pct);
    let hi = percentile(&sorted, upper_pct);
    Ok(scores.iter().map(|&s| s.clamp(lo, hi)).collect())
}

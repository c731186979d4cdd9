//! Importance weights extracted from trained critics.
//!
//! At the tight bound the critic transform recovers the likelihood ratio
//! p(x)/q_a(x) as t/2 + 1 = softplus(v)/2, which is nonnegative by
//! construction. Ratios are self-normalized per arm before any downstream
//! use; raw ratios feed only the chi-squared diagnostic.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::StudyArm;
use crate::error::{Error, Result};
use crate::tape::softplus_scalar;
use crate::tensor::Tensor;
use crate::trainer::TrainedModel;

/// Normalized per-unit importance weights for one arm.
#[derive(Clone, Debug)]
pub struct WeightVector {
    pub arm_index: usize,
    pub raw_ratios: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightVector {
    /// Uniform weights over n units (the unweighted baseline).
    pub fn uniform(arm_index: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("uniform weights over zero units".into()));
        }
        normalize(arm_index, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Unnormalized likelihood-ratio estimates softplus(v)/2 for every unit of
/// an arm, evaluated through the arm's critic. The arm is given in raw
/// coordinates and standardized with the model's stored stats.
pub fn raw_ratios(model: &TrainedModel, arm: &StudyArm, arm_index: usize) -> Result<Vec<f64>> {
    if arm_index >= model.n_arms() {
        return Err(Error::InvalidArgument(format!(
            "arm index {} out of range ({} arms)",
            arm_index,
            model.n_arms()
        )));
    }
    if arm.feature_dim() != model.feature_dim() {
        return Err(Error::ShapeMismatch {
            op: "raw_ratios",
            details: format!(
                "model feature dim {} vs arm dim {}",
                model.feature_dim(),
                arm.feature_dim()
            ),
        });
    }
    let x = model.stats.apply(&arm.features)?;
    let v = model.discriminators[arm_index].raw(&x)?;
    Ok(v.into_iter().map(|vi| softplus_scalar(vi) / 2.0).collect())
}

/// Self-normalizes raw ratios into weights summing to 1.
pub fn normalize(arm_index: usize, raw: Vec<f64>) -> Result<WeightVector> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("normalize on empty ratios".into()));
    }
    if raw.iter().any(|&r| r < 0.0 || !r.is_finite()) {
        return Err(Error::InvalidArgument("ratios must be finite and nonnegative".into()));
    }
    let c: f64 = raw.iter().sum();
    if c <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let weights = raw.iter().map(|&r| r / c).collect();
    Ok(WeightVector { arm_index, raw_ratios: raw, weights })
}

/// Extracts normalized weights for one arm from a trained model.
pub fn extract(model: &TrainedModel, arm: &StudyArm, arm_index: usize) -> Result<WeightVector> {
    normalize(arm_index, raw_ratios(model, arm, arm_index)?)
}

/// Sampling-importance-resampling: m rows drawn with replacement from the
/// weighted empirical distribution of the arm.
pub fn sir_resample(
    arm: &StudyArm,
    w: &WeightVector,
    m: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if m == 0 {
        return Err(Error::InvalidArgument("resample count must be >= 1".into()));
    }
    if w.len() != arm.n_units() {
        return Err(Error::InvalidArgument(format!(
            "weight length {} vs {} units",
            w.len(),
            arm.n_units()
        )));
    }
    let dist = WeightedIndex::new(&w.weights).map_err(|_| Error::DegenerateWeights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = arm.feature_dim();
    let mut indices = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m * d);
    for _ in 0..m {
        let idx = dist.sample(&mut rng);
        indices.push(idx);
        data.extend_from_slice(arm.row(idx));
    }
    Ok((Tensor::matrix(m, d, data)?, indices))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_at_zero_critic_output() {
        // softplus(0)/2 = ln2/2
        assert!((softplus_scalar(0.0) / 2.0 - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
        // v -> -inf excludes the unit
        assert!(softplus_scalar(-700.0) / 2.0 < 1e-300);
    }

    #[test]
    fn normalize_arithmetic() {
        let w = normalize(0, vec![1.0, 0.0, 3.0]).unwrap();
        assert_eq!(w.weights, vec![0.25, 0.0, 0.75]);
        let u = normalize(0, vec![2.0; 5]).unwrap();
        for wi in &u.weights {
            assert!((wi - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_sums_to_one() {
        let w = normalize(1, vec![0.3, 1.7, 0.01, 5.5, 0.0]).unwrap();
        let s: f64 = w.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(w.weights.iter().all(|&wi| wi >= 0.0));
    }

    #[test]
    fn normalize_all_zero_is_degenerate() {
        assert!(matches!(
            normalize(0, vec![0.0, 0.0]),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn sir_point_mass() {
        let arm = StudyArm::new(
            "a",
            Tensor::matrix(3, 1, vec![10.0, 20.0, 30.0]).unwrap(),
        )
        .unwrap();
        let w = normalize(0, vec![0.0, 1.0, 0.0]).unwrap();
        let (rows, idx) = sir_resample(&arm, &w, 50, 0).unwrap();
        assert!(idx.iter().all(|&i| i == 1));
        assert!(rows.data().iter().all(|&v| v == 20.0));
    }

    #[test]
    fn sir_uniform_frequencies() {
        let n = 4;
        let m = 40_000;
        let arm = StudyArm::new(
            "a",
            Tensor::matrix(n, 1, (0..n).map(|v| v as f64).collect()).unwrap(),
        )
        .unwrap();
        let w = WeightVector::uniform(0, n).unwrap();
        let (_, idx) = sir_resample(&arm, &w, m, 7).unwrap();
        let tol = 3.0 * (0.25_f64 / m as f64).sqrt();
        for unit in 0..n {
            let freq = idx.iter().filter(|&&i| i == unit).count() as f64 / m as f64;
            assert!(
                (freq - 1.0 / n as f64).abs() < tol,
                "unit {} freq {} tol {}",
                unit,
                freq,
                tol
            );
        }
    }
}

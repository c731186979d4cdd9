//! Synthetic two-arm cohorts built from normal-Wishart subpopulations.
//!
//! Three Gaussian subpopulations A, B, C are drawn from a normal-Wishart
//! prior. Arm 1 mixes A and B, arm 2 mixes A and C, so A is the latent
//! overlap both arms share. Outcomes are Gaussian with a mean per
//! (arm, subpopulation) cell.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::data::StudyArm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome mean for each (arm, subpopulation) cell; all cells share unit
/// standard deviation unless overridden.
#[derive(Clone, Debug)]
pub struct OutcomeMeans {
    pub arm1_a: f64,
    pub arm1_b: f64,
    pub arm2_a: f64,
    pub arm2_c: f64,
}

impl Default for OutcomeMeans {
    fn default() -> Self {
        OutcomeMeans { arm1_a: 60.0, arm1_b: 40.0, arm2_a: -10.0, arm2_c: 10.0 }
    }
}

/// Full description of the synthetic experiment.
#[derive(Clone, Debug)]
pub struct SimSpec {
    pub feature_dim: usize,
    /// Units drawn per subpopulation per arm.
    pub n_per_subpop: usize,
    pub prior_mean: Vec<f64>,
    /// Scales the precision of the subpopulation-mean draw; small values
    /// spread subpopulation means apart.
    pub kappa0: f64,
    /// Wishart degrees of freedom, must exceed feature_dim - 1.
    pub nu0: f64,
    /// Wishart scale matrix (row-major, feature_dim x feature_dim).
    pub psi: Vec<f64>,
    pub outcome_means: OutcomeMeans,
    pub outcome_std: f64,
    pub seed: u64,
}

impl SimSpec {
    /// Defaults: d = 10, 2000 units per subpopulation, mu0 = 0,
    /// kappa0 = 0.1, nu0 = d + 2, psi = I.
    pub fn with_defaults(feature_dim: usize, seed: u64) -> Self {
        let mut psi = vec![0.0; feature_dim * feature_dim];
        for i in 0..feature_dim {
            psi[i * feature_dim + i] = 1.0;
        }
        SimSpec {
            feature_dim,
            n_per_subpop: 2000,
            prior_mean: vec![0.0; feature_dim],
            kappa0: 0.1,
            nu0: feature_dim as f64 + 2.0,
            psi,
            outcome_means: OutcomeMeans::default(),
            outcome_std: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        if d == 0 || self.n_per_subpop == 0 {
            return Err(Error::InvalidArgument("dimensions and counts must be positive".into()));
        }
        if self.prior_mean.len() != d || self.psi.len() != d * d {
            return Err(Error::InvalidArgument("prior hyperparameter shapes must match d".into()));
        }
        if self.nu0 <= d as f64 - 1.0 {
            return Err(Error::InvalidArgument("nu0 must exceed d - 1".into()));
        }
        if self.kappa0 <= 0.0 || self.outcome_std <= 0.0 {
            return Err(Error::InvalidArgument("kappa0 and outcome std must be positive".into()));
        }
        Ok(())
    }
}

/// One subpopulation's Gaussian parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SubpopParams {
    pub mean: Vec<f64>,
    /// Covariance, row-major d x d.
    pub cov: Vec<f64>,
}

/// Draws (mean, covariance) from the normal-Wishart prior: precision from
/// Wishart(nu0, psi) via the Bartlett decomposition, mean from
/// N(mu0, (kappa0 * precision)^-1).
pub fn sample_normal_wishart(spec: &SimSpec, seed: u64) -> Result<SubpopParams> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let psi = DMatrix::from_row_slice(d, d, &spec.psi);
    let psi_chol = Cholesky::new(psi)
        .ok_or_else(|| Error::InvalidArgument("psi must be positive-definite".into()))?;

    for attempt in 0..=3 {
        // Bartlett factor: lower-triangular with chi distributed diagonal
        // (df nu0 - i) and standard normal strict lower triangle.
        let mut bartlett = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            let chi2 = ChiSquared::new(spec.nu0 - i as f64)
                .map_err(|e| Error::InvalidArgument(format!("chi-squared df: {e}")))?;
            bartlett[(i, i)] = chi2.sample(&mut rng).sqrt();
            for j in 0..i {
                bartlett[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let factor = psi_chol.l() * bartlett;
        let mut precision = &factor * factor.transpose();
        if attempt > 0 {
            for i in 0..d {
                precision[(i, i)] += 1e-8;
            }
        }

        let Some(prec_chol) = Cholesky::new(precision.clone()) else { continue };
        let cov = prec_chol.inverse();
        let Some(cov_chol) = Cholesky::new(cov.clone()) else { continue };

        // mean ~ N(mu0, cov / kappa0)
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mu0 = DVector::from_column_slice(&spec.prior_mean);
        let mean = mu0 + cov_chol.l() * z / spec.kappa0.sqrt();

        return Ok(SubpopParams {
            mean: mean.iter().copied().collect(),
            cov: cov.transpose().iter().copied().collect(),
        });
    }
    Err(Error::InvalidArgument(
        "normal-Wishart draw not positive-definite after 3 jittered retries".into(),
    ))
}

/// n rows from N(mean, cov).
fn sample_mvn(params: &SubpopParams, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let d = params.mean.len();
    let cov = DMatrix::from_row_slice(d, d, &params.cov);
    let chol = Cholesky::new(cov)
        .ok_or_else(|| Error::InvalidArgument("covariance not positive-definite".into()))?;
    let l = chol.l();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &l * z;
        for i in 0..d {
            out.push(params.mean[i] + x[i]);
        }
    }
    Ok(out)
}

/// The three subpopulation parameter sets, A shared across arms.
#[derive(Clone, Debug)]
pub struct SubpopSet {
    pub a: SubpopParams,
    pub b: SubpopParams,
    pub c: SubpopParams,
}

pub fn sample_subpopulations(spec: &SimSpec) -> Result<SubpopSet> {
    Ok(SubpopSet {
        a: sample_normal_wishart(spec, spec.seed.wrapping_add(1))?,
        b: sample_normal_wishart(spec, spec.seed.wrapping_add(2))?,
        c: sample_normal_wishart(spec, spec.seed.wrapping_add(3))?,
    })
}

/// Builds the two mixture arms: arm 1 = A + B, arm 2 = fresh A draws + C.
/// Subpopulation labels are retained on both arms.
pub fn build_populations(spec: &SimSpec) -> Result<(StudyArm, StudyArm, SubpopSet)> {
    spec.validate()?;
    let subpops = sample_subpopulations(spec)?;
    let n = spec.n_per_subpop;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(10));

    let mut arm1_data = sample_mvn(&subpops.a, n, &mut rng)?;
    arm1_data.extend(sample_mvn(&subpops.b, n, &mut rng)?);
    let mut arm1_labels = vec!["A".to_string(); n];
    arm1_labels.extend(vec!["B".to_string(); n]);

    let mut arm2_data = sample_mvn(&subpops.a, n, &mut rng)?;
    arm2_data.extend(sample_mvn(&subpops.c, n, &mut rng)?);
    let mut arm2_labels = vec!["A".to_string(); n];
    arm2_labels.extend(vec!["C".to_string(); n]);

    let arm1 = StudyArm::new("arm1", Tensor::matrix(2 * n, d, arm1_data)?)?
        .with_labels(arm1_labels)?;
    let arm2 = StudyArm::new("arm2", Tensor::matrix(2 * n, d, arm2_data)?)?
        .with_labels(arm2_labels)?;
    Ok((arm1, arm2, subpops))
}

/// Draws outcomes per unit from the Gaussian for its (arm, subpopulation)
/// cell. Arms must carry labels.
pub fn simulate_outcomes(arm1: StudyArm, arm2: StudyArm, spec: &SimSpec) -> Result<(StudyArm, StudyArm)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(20));
    let m = &spec.outcome_means;
    let draw = |arm: StudyArm,
                mean_of: &dyn Fn(&str) -> Option<f64>,
                rng: &mut ChaCha8Rng|
     -> Result<StudyArm> {
        let labels = arm
            .labels
            .clone()
            .ok_or_else(|| Error::DataValidation(format!("arm {} has no labels", arm.id)))?;
        let outcomes = labels
            .iter()
            .map(|l| {
                let mean = mean_of(l).ok_or_else(|| {
                    Error::DataValidation(format!("arm {}: unknown label {}", arm.id, l))
                })?;
                Ok(mean + spec.outcome_std * rng.sample::<f64, _>(StandardNormal))
            })
            .collect::<Result<Vec<f64>>>()?;
        arm.with_outcomes(outcomes)
    };
    let arm1 = draw(
        arm1,
        &|l| match l {
            "A" => Some(m.arm1_a),
            "B" => Some(m.arm1_b),
            _ => None,
        },
        &mut rng,
    )?;
    let arm2 = draw(
        arm2,
        &|l| match l {
            "A" => Some(m.arm2_a),
            "C" => Some(m.arm2_c),
            _ => None,
        },
        &mut rng,
    )?;
    Ok((arm1, arm2))
}

/// Builds arms with features, labels, and outcomes in one call.
pub fn simulate(spec: &SimSpec) -> Result<(StudyArm, StudyArm, SubpopSet)> {
    let (arm1, arm2, subpops) = build_populations(spec)?;
    let (arm1, arm2) = simulate_outcomes(arm1, arm2, spec)?;
    Ok((arm1, arm2, subpops))
}

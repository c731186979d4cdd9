//! Study-arm container shared by the trainer, weighting, and estimators.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One treatment group: a feature matrix with optional outcomes and
/// optional subpopulation labels (labels exist only for simulated data).
#[derive(Clone, Debug, PartialEq)]
pub struct StudyArm {
    pub id: String,
    pub features: Tensor,
    pub outcomes: Option<Vec<f64>>,
    pub labels: Option<Vec<String>>,
}

impl StudyArm {
    pub fn new(id: impl Into<String>, features: Tensor) -> Result<Self> {
        features.dims2()?;
        Ok(StudyArm { id: id.into(), features, outcomes: None, labels: None })
    }

    pub fn n_units(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn with_outcomes(mut self, outcomes: Vec<f64>) -> Result<Self> {
        if outcomes.len() != self.n_units() {
            return Err(Error::DataValidation(format!(
                "arm {}: {} outcomes for {} units",
                self.id,
                outcomes.len(),
                self.n_units()
            )));
        }
        self.outcomes = Some(outcomes);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_units() {
            return Err(Error::DataValidation(format!(
                "arm {}: {} labels for {} units",
                self.id,
                labels.len(),
                self.n_units()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.features.data()[r * d..(r + 1) * d]
    }
}

//! Group-conditional density estimation: fit, evaluate exact log-density,
//! and sample from each group's input distribution.

pub mod categorical;
pub mod gmm;

pub use categorical::{fit_categorical, rows_from_f64, rows_to_f64, AutoregressiveCategorical};
pub use gmm::{fit_gmm, GaussianMixture, GmmFitConfig, GmmFitMeta};

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous or categorical estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DensityKind {
    Gmm(GaussianMixture),
    Categorical(AutoregressiveCategorical),
}

/// A fitted group-conditional density with its provenance: which group it
/// models, how well it fits, and how much data produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityModel {
    pub kind: DensityKind,
    pub group: u8,
    pub fit_log_likelihood: f64,
    pub sample_count: usize,
}

impl DensityModel {
    pub fn dim(&self) -> usize {
        match &self.kind {
            DensityKind::Gmm(g) => g.dim(),
            DensityKind::Categorical(c) => c.columns(),
        }
    }

    pub fn as_gmm(&self) -> Result<&GaussianMixture> {
        match &self.kind {
            DensityKind::Gmm(g) => Ok(g),
            DensityKind::Categorical(_) => Err(Error::DomainMismatch(
                "expected a continuous density but found a categorical one".into(),
            )),
        }
    }

    pub fn as_categorical(&self) -> Result<&AutoregressiveCategorical> {
        match &self.kind {
            DensityKind::Categorical(c) => Ok(c),
            DensityKind::Gmm(_) => Err(Error::DomainMismatch(
                "expected a categorical density but found a continuous one".into(),
            )),
        }
    }

    /// Exact log-density of one row. Categorical rows must hold integer codes.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        match &self.kind {
            DensityKind::Gmm(g) => {
                if x.len() != g.dim() {
                    return Err(Error::ShapeMismatch { expected: g.dim(), got: x.len(), context: "density input" });
                }
                Ok(g.log_density(x))
            }
            DensityKind::Categorical(c) => {
                let view = ArrayView2::from_shape((1, x.len()), x)
                    .map_err(|_| Error::InvalidArgument("bad row".into()))?;
                let rows = rows_from_f64(&view)?;
                c.log_pmf(&rows[0])
            }
        }
    }

    pub fn log_density_batch(&self, x: &ArrayView2<f64>) -> Result<Array1<f64>> {
        match &self.kind {
            DensityKind::Gmm(g) => Ok(g.log_density_batch(x)),
            DensityKind::Categorical(c) => {
                let rows = rows_from_f64(x)?;
                let mut out = Array1::zeros(rows.len());
                for (i, row) in rows.iter().enumerate() {
                    out[i] = c.log_pmf(row)?;
                }
                Ok(out)
            }
        }
    }

    /// Draw `n` rows; categorical samples come back as integer codes in f64.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        match &self.kind {
            DensityKind::Gmm(g) => g.sample(n, rng),
            DensityKind::Categorical(c) => rows_to_f64(&c.sample(n, rng), c.columns()),
        }
    }
}

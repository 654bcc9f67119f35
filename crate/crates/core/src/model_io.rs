//! Versioned on-disk model format. Every artifact is a single JSON document
//! carrying a format version, a kind tag (density, checkpoint, or matching),
//! flat parameter arrays keyed by layout segment name, and the
//! standardization constants needed to rebuild runnable models, so the files
//! can be consumed without this crate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::discrete::DiscreteMatching;
use crate::downstream::Classifier;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowEncoder, FlowEncoderPair, Standardizer};
use crate::nn::{MlpModel, MlpSpec};
use crate::numerics::Layout;
use crate::train::{TrainConfig, TrainTrace, TrainedFnf};

pub const FORMAT_VERSION: u32 = 1;

/// One flat parameter block with its matrix shape, keyed by the layout
/// segment name it fills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSegment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Slice a flat parameter vector into the named blocks of `layout`.
pub fn split_segments(layout: &Layout, values: &[f64]) -> Result<Vec<NamedSegment>> {
    if values.len() != layout.total_len() {
        return Err(Error::ShapeMismatch {
            expected: layout.total_len(),
            got: values.len(),
            context: "segmented parameter vector",
        });
    }
    let mut out = Vec::with_capacity(layout.segments().len());
    let mut offset = 0;
    for spec in layout.segments() {
        out.push(NamedSegment {
            name: spec.name.clone(),
            rows: spec.rows,
            cols: spec.cols,
            values: values[offset..offset + spec.len()].to_vec(),
        });
        offset += spec.len();
    }
    Ok(out)
}

/// Reassemble a flat parameter vector, checking every block against the
/// layout it claims to fill.
pub fn join_segments(layout: &Layout, segments: &[NamedSegment]) -> Result<Vec<f64>> {
    if segments.len() != layout.segments().len() {
        return Err(Error::ShapeMismatch {
            expected: layout.segments().len(),
            got: segments.len(),
            context: "segment count",
        });
    }
    let mut out = Vec::with_capacity(layout.total_len());
    for (spec, seg) in layout.segments().iter().zip(segments) {
        if seg.name != spec.name || seg.rows != spec.rows || seg.cols != spec.cols {
            return Err(Error::InvalidArgument(format!(
                "segment {:?} ({}x{}) does not match expected {:?} ({}x{})",
                seg.name, seg.rows, seg.cols, spec.name, spec.rows, spec.cols
            )));
        }
        if seg.values.len() != spec.len() {
            return Err(Error::ShapeMismatch {
                expected: spec.len(),
                got: seg.values.len(),
                context: "segment values",
            });
        }
        out.extend_from_slice(&seg.values);
    }
    Ok(out)
}

/// Fitted group-conditional input densities with the shared standardizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityFile {
    pub dataset: String,
    pub seed: u64,
    pub standardizer: Standardizer,
    pub group0: DensityModel,
    pub group1: DensityModel,
}

/// A trained encoder pair and classifier head, stored with the base
/// densities and full training trace so every later stage can run from this
/// one file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub dataset: String,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub base0: DensityModel,
    pub base1: DensityModel,
    pub standardizer: Standardizer,
    pub flow: FlowConfig,
    pub f0_params: Vec<NamedSegment>,
    pub f1_params: Vec<NamedSegment>,
    pub classifier_spec: MlpSpec,
    pub classifier_params: Vec<NamedSegment>,
    pub trace: TrainTrace,
    pub best_epoch: usize,
}

impl CheckpointFile {
    /// Capture the best-validation model of a finished run.
    pub fn from_trained(
        dataset: impl Into<String>,
        seed: u64,
        train_config: TrainConfig,
        base0: DensityModel,
        base1: DensityModel,
        trained: &TrainedFnf,
    ) -> Result<Self> {
        let pair = &trained.pair;
        Ok(Self {
            dataset: dataset.into(),
            seed,
            train_config,
            base0,
            base1,
            standardizer: pair.standardizer.clone(),
            flow: pair.f0.config().clone(),
            f0_params: split_segments(pair.f0.layout(), pair.f0.param_values())?,
            f1_params: split_segments(pair.f1.layout(), pair.f1.param_values())?,
            classifier_spec: trained.classifier.model().spec().clone(),
            classifier_params: split_segments(
                &trained.classifier.model().layout(),
                trained.classifier.model().param_values(),
            )?,
            trace: trained.trace.clone(),
            best_epoch: trained.best_epoch,
        })
    }

    /// Rebuild the runnable encoder pair.
    pub fn encoder_pair(&self) -> Result<FlowEncoderPair> {
        let mut f0 = FlowEncoder::identity(self.flow.clone(), 0)?;
        f0.set_params(&join_segments(f0.layout(), &self.f0_params)?)?;
        let mut f1 = FlowEncoder::identity(self.flow.clone(), 1)?;
        f1.set_params(&join_segments(f1.layout(), &self.f1_params)?)?;
        FlowEncoderPair::new(f0, f1, self.standardizer.clone())
    }

    /// Rebuild the runnable classifier head.
    pub fn classifier(&self) -> Result<Classifier> {
        let layout = Layout::new(self.classifier_spec.segments("mlp"));
        let values = join_segments(&layout, &self.classifier_params)?;
        Classifier::new(MlpModel::new(self.classifier_spec.clone(), values)?)
    }
}

/// An optimal pairing of two finite distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchingFile {
    pub dataset: String,
    pub seed: u64,
    pub matching: DiscreteMatching,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelPayload {
    Density(Box<DensityFile>),
    Checkpoint(Box<CheckpointFile>),
    Matching(Box<MatchingFile>),
}

impl ModelPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelPayload::Density(_) => "density",
            ModelPayload::Checkpoint(_) => "checkpoint",
            ModelPayload::Matching(_) => "matching",
        }
    }
}

/// The envelope written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub payload: ModelPayload,
}

impl ModelFile {
    pub fn new(payload: ModelPayload) -> Self {
        Self { format_version: FORMAT_VERSION, payload }
    }

    /// Canonical serialized form; identical inputs give identical bytes.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(format!("{} (model file)", path.display())));
        }
        let file: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: file.format_version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(file)
    }

    pub fn into_density(self) -> Result<DensityFile> {
        match self.payload {
            ModelPayload::Density(d) => Ok(*d),
            other => Err(Error::ModelKind { found: other.kind().into(), expected: "density" }),
        }
    }

    pub fn into_checkpoint(self) -> Result<CheckpointFile> {
        match self.payload {
            ModelPayload::Checkpoint(c) => Ok(*c),
            other => Err(Error::ModelKind { found: other.kind().into(), expected: "checkpoint" }),
        }
    }

    pub fn into_matching(self) -> Result<MatchingFile> {
        match self.payload {
            ModelPayload::Matching(m) => Ok(*m),
            other => Err(Error::ModelKind { found: other.kind().into(), expected: "matching" }),
        }
    }
}

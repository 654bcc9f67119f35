//! Deterministic differentiable scalar computation: flat parameter vectors,
//! the reverse-mode tape, Adam, gradient verification, and seeded RNG.

pub mod adam;
pub mod gradcheck;
pub mod rng;
pub mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::grad_check;
pub use rng::{SeedStream, RNG_ALGORITHM};
pub use tape::{Gradients, NodeId, Tape};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Shape of one named parameter segment (a matrix; biases are 1xd).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl SegmentSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self { name: name.into(), rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered segment shapes describing how a flat [`ParamVector`] maps onto
/// the matrices of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<SegmentSpec>,
}

impl Layout {
    pub fn new(segments: Vec<SegmentSpec>) -> Self {
        Self { segments }
    }

    pub fn segments(&self) -> &[SegmentSpec] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(SegmentSpec::len).sum()
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, &SegmentSpec)> {
        self.segments.iter().scan(0usize, |off, s| {
            let o = *off;
            *off += s.len();
            Some((o, s))
        })
    }

    /// Bind every segment onto the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape, values: &[f64]) -> Vec<NodeId> {
        self.bind_with(tape, values, true)
    }

    /// Bind every segment as a constant (inference paths).
    pub fn bind_const(&self, tape: &mut Tape, values: &[f64]) -> Vec<NodeId> {
        self.bind_with(tape, values, false)
    }

    fn bind_with(&self, tape: &mut Tape, values: &[f64], differentiable: bool) -> Vec<NodeId> {
        assert_eq!(values.len(), self.total_len(), "layout/value length mismatch");
        self.offsets()
            .map(|(off, s)| {
                let m = Array2::from_shape_vec((s.rows, s.cols), values[off..off + s.len()].to_vec())
                    .expect("segment shape");
                if differentiable {
                    tape.leaf(m)
                } else {
                    tape.constant(m)
                }
            })
            .collect()
    }

    /// Flatten per-segment gradients back into a vector aligned with the layout.
    pub fn collect_grad(&self, tape: &Tape, grads: &Gradients, ids: &[NodeId]) -> Vec<f64> {
        assert_eq!(ids.len(), self.segments.len());
        let mut out = Vec::with_capacity(self.total_len());
        for &id in ids {
            out.extend(grads.wrt(tape, id).iter().cloned());
        }
        out
    }

    /// Flat offset and length of a named segment.
    pub fn offset_of(&self, name: &str) -> Option<(usize, usize)> {
        self.offsets()
            .find(|(_, s)| s.name == name)
            .map(|(off, s)| (off, s.len()))
    }

    pub fn param_vector(&self, values: Vec<f64>) -> ParamVector {
        ParamVector::new(
            values,
            self.segments.iter().map(|s| (s.name.clone(), s.len())).collect(),
        )
    }
}

/// Flat sequence of real parameters with named segments.
///
/// Length is fixed at construction; optimizer steps replace values but never
/// the shape. All values are finite 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<(String, usize)>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, segments: Vec<(String, usize)>) -> Self {
        let seg_total: usize = segments.iter().map(|(_, l)| l).sum();
        assert_eq!(values.len(), seg_total, "segment lengths must cover the vector");
        Self { values, segments }
    }

    /// Single unnamed segment covering everything.
    pub fn flat(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(values, vec![("params".to_string(), n)])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn segments(&self) -> &[(String, usize)] {
        &self.segments
    }

    /// Replace the values, keeping names and length.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: self.values.len(),
                got: values.len(),
                context: "ParamVector::with_values",
            });
        }
        Ok(Self { values, segments: self.segments.clone() })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Slice of one named segment.
    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let mut off = 0;
        for (n, len) in &self.segments {
            if n == name {
                return Some(&self.values[off..off + len]);
            }
            off += len;
        }
        None
    }
}

/// Loss value plus gradient aligned with a [`ParamVector`].
#[derive(Debug, Clone)]
pub struct GradResult {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

impl GradResult {
    pub fn new(loss: f64, gradient: Vec<f64>) -> Self {
        Self { loss, gradient }
    }
}

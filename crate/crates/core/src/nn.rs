//! Small feed-forward networks on the tape, shared by the coupling layers,
//! the classifier head, and adversarial probes.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::SegmentSpec;

/// Fully-connected net shape: tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        Self { input, hidden, output }
    }

    /// (fan_in, fan_out) of every affine layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output));
        dims
    }

    /// Weight and bias segments named `{prefix}.w{i}` / `{prefix}.b{i}`.
    pub fn segments(&self, prefix: &str) -> Vec<SegmentSpec> {
        let mut out = Vec::new();
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            out.push(SegmentSpec::new(format!("{prefix}.w{i}"), fan_in, fan_out));
            out.push(SegmentSpec::new(format!("{prefix}.b{i}"), 1, fan_out));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Uniform Glorot weights, zero biases. With `zero_last` the final affine
    /// layer is all zeros so the net outputs exactly zero at initialization.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, zero_last: bool) -> Vec<f64> {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut out = Vec::with_capacity(self.param_count());
        for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            if zero_last && i == last {
                out.extend(std::iter::repeat_n(0.0, fan_in * fan_out + fan_out));
                continue;
            }
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            out.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)));
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        out
    }

    /// Run the net. `params` must be the node ids of this net's segments in
    /// layout order (w0, b0, w1, b1, ...).
    pub fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> NodeId {
        let n_layers = self.layer_dims().len();
        assert_eq!(params.len(), 2 * n_layers, "expected one weight and bias per layer");
        let mut h = x;
        for i in 0..n_layers {
            let wx = tape.matmul(h, params[2 * i]);
            h = tape.add_row(wx, params[2 * i + 1]);
            if i + 1 < n_layers {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// A spec plus a concrete flat parameter vector: the smallest thing that can
/// be trained, saved, and evaluated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl MlpModel {
    pub fn new(spec: MlpSpec, params: Vec<f64>) -> crate::error::Result<Self> {
        if params.len() != spec.param_count() {
            return Err(crate::error::Error::ShapeMismatch {
                expected: spec.param_count(),
                got: params.len(),
                context: "mlp parameter vector",
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::Error::NonFinite("mlp parameters".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = spec.init(rng, false);
        Self { spec, params }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_values(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> crate::error::Result<()> {
        *self = Self::new(self.spec.clone(), values.to_vec())?;
        Ok(())
    }

    pub fn layout(&self) -> crate::numerics::Layout {
        crate::numerics::Layout::new(self.spec.segments("mlp"))
    }

    pub fn bind(&self, tape: &mut Tape, differentiable: bool) -> Vec<NodeId> {
        let layout = self.layout();
        if differentiable {
            layout.bind(tape, &self.params)
        } else {
            layout.bind_const(tape, &self.params)
        }
    }

    /// Plain batched evaluation on a throwaway tape.
    pub fn forward_batch(&self, x: &ndarray::ArrayView2<f64>) -> crate::error::Result<Array2<f64>> {
        if x.ncols() != self.spec.input {
            return Err(crate::error::Error::ShapeMismatch {
                expected: self.spec.input,
                got: x.ncols(),
                context: "mlp input",
            });
        }
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let xn = tape.constant(x.to_owned());
        let out = self.spec.forward(&mut tape, &ids, xn);
        Ok(tape.value(out).clone())
    }
}

/// Mean binary cross-entropy of logits (B x 1) against 0/1 targets (B x 1),
/// in the overflow-safe form softplus(logit) - target * logit.
pub fn bce_with_logits_mean(tape: &mut Tape, logits: NodeId, targets: &Array2<f64>) -> NodeId {
    assert_eq!(tape.value(logits).dim(), targets.dim(), "logit/target shape");
    let sp = tape.softplus(logits);
    let t = tape.constant(targets.clone());
    let yl = tape.mul(logits, t);
    let diff = tape.sub(sp, yl);
    tape.mean_all(diff)
}

/// Elementwise logistic function for probability readout.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

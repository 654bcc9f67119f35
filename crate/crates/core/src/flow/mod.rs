//! Paired invertible encoders built from affine coupling layers, with exact
//! forward, inverse, and log-det-Jacobian.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::nn::MlpSpec;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::{Layout, ParamVector};

/// Architecture of one encoder. One block is two coupling layers with
/// complementary masks, so `blocks = 4` yields 8 layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub input_dim: usize,
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub s_max: f64,
}

impl FlowConfig {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, blocks: 4, hidden: vec![32, 32], s_max: 5.0 }
    }

    pub fn layers(&self) -> usize {
         2 * self.blocks
    }
}

/// One affine coupling layer. Coordinates where `keep` is true pass through
/// unchanged and feed the scale/translate nets; the rest are transformed as
/// z_i = x_i * exp(s_i) + t_i with |s_i| <= s_max after smooth clamping.
///
/// For 1-D inputs no coordinate can be kept; the nets then see a zero vector
/// and the layer degenerates to a learned global affine map, which keeps the
/// flow invertible.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    keep: Vec<bool>,
    scale: MlpSpec,
    translate: MlpSpec,
}

impl CouplingLayer {
    fn new(dim: usize, parity_even: bool, hidden: &[usize]) -> Self {
        let keep: Vec<bool> = if dim == 1 {
            vec![false]
        } else {
            (0..dim).map(|i| (i % 2 == 0) == parity_even).collect()
        };
        let spec = MlpSpec::new(dim, hidden.to_vec(), dim);
        Self { keep, scale: spec.clone(), translate: spec }
    }

    pub fn keep_mask(&self) -> &[bool] {
        &self.keep
    }

    fn keep_row(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (1, self.keep.len()),
            self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )
        .expect("row")
    }

    fn active_row(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (1, self.keep.len()),
            self.keep.iter().map(|&k| if k { 0.0 } else { 1.0 }).collect(),
        )
        .expect("row")
    }
}

/// Invertible encoder for one group: a stack of coupling layers over
/// standardized inputs, parameterized by a flat vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "FlowEncoderData", try_from = "FlowEncoderData")]
pub struct FlowEncoder {
    config: FlowConfig,
    group: u8,
    layers: Vec<CouplingLayer>,
    layout: Layout,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FlowEncoderData {
    config: FlowConfig,
    group: u8,
    params: Vec<f64>,
}

impl From<FlowEncoder> for FlowEncoderData {
    fn from(e: FlowEncoder) -> Self {
        Self { config: e.config, group: e.group, params: e.params }
    }
}

impl TryFrom<FlowEncoderData> for FlowEncoder {
    type Error = Error;

    fn try_from(d: FlowEncoderData) -> Result<Self> {
        let mut enc = FlowEncoder::identity(d.config, d.group)?;
        enc.set_params(&d.params)?;
        Ok(enc)
    }
}

impl FlowEncoder {
    fn build(config: &FlowConfig) -> Result<(Vec<CouplingLayer>, Layout)> {
        if config.input_dim == 0 {
            return Err(Error::InvalidArgument("flow input dimension must be positive".into()));
        }
        if config.blocks == 0 {
            return Err(Error::InvalidArgument("flow needs at least one block".into()));
        }
        if config.s_max.is_nan() || config.s_max <= 0.0 {
            return Err(Error::InvalidArgument("scale clamp must be positive".into()));
        }
        let mut layers = Vec::with_capacity(config.layers());
        let mut segments = Vec::new();
        for i in 0..config.layers() {
            let layer = CouplingLayer::new(config.input_dim, i % 2 == 0, &config.hidden);
            segments.extend(layer.scale.segments(&format!("layer{i}.scale")));
            segments.extend(layer.translate.segments(&format!("layer{i}.translate")));
            layers.push(layer);
        }
        Ok((layers, Layout::new(segments)))
    }

    /// Encoder whose every layer is the identity map (all net weights zero).
    pub fn identity(config: FlowConfig, group: u8) -> Result<Self> {
        let (layers, layout) = Self::build(&config)?;
        let params = vec![0.0; layout.total_len()];
        Ok(Self { config, group, layers, layout, params })
    }

    /// Random hidden layers, zero final layers: starts as the identity map
    /// but with symmetry already broken for training.
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, group: u8, rng: &mut R) -> Result<Self> {
        let (layers, layout) = Self::build(&config)?;
        let mut params = Vec::with_capacity(layout.total_len());
        for layer in &layers {
            params.extend(layer.scale.init(rng, true));
            params.extend(layer.translate.init(rng, true));
        }
        debug_assert_eq!(params.len(), layout.total_len());
        Ok(Self { config, group, layers, layout, params })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn group(&self) -> u8 {
        self.group
    }

    pub fn dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> ParamVector {
        self.layout.param_vector(self.params.clone())
    }

    pub fn param_values(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.layout.total_len() {
            return Err(Error::ShapeMismatch {
                expected: self.layout.total_len(),
                got: values.len(),
                context: "flow parameter vector",
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow parameters".into()));
        }
        self.params.clear();
        self.params.extend_from_slice(values);
        Ok(())
    }

    /// Bind parameters onto a tape, differentiable or frozen.
    pub fn bind(&self, tape: &mut Tape, differentiable: bool) -> Vec<NodeId> {
        if differentiable {
            self.layout.bind(tape, &self.params)
        } else {
            self.layout.bind_const(tape, &self.params)
        }
    }

    fn ids_per_net(&self) -> usize {
        2 * (self.config.hidden.len() + 1)
    }

    fn layer_ids<'a>(&self, ids: &'a [NodeId], layer: usize) -> (&'a [NodeId], &'a [NodeId]) {
        let n = self.ids_per_net();
        let start = layer * 2 * n;
        (&ids[start..start + n], &ids[start + n..start + 2 * n])
    }

    fn layer_scale_translate(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        layer_idx: usize,
        input: NodeId,
    ) -> (NodeId, NodeId) {
        let layer = &self.layers[layer_idx];
        let keep = tape.constant(layer.keep_row());
        let active = tape.constant(layer.active_row());
        let cond = tape.mul_row(input, keep);
        let (scale_ids, trans_ids) = self.layer_ids(ids, layer_idx);
        let s_raw = layer.scale.forward(tape, scale_ids, cond);
        let squashed = tape.scale(s_raw, 1.0 / self.config.s_max);
        let squashed = tape.tanh(squashed);
        let s = tape.scale(squashed, self.config.s_max);
        let s_active = tape.mul_row(s, active);
        let t_raw = layer.translate.forward(tape, trans_ids, cond);
        let t_active = tape.mul_row(t_raw, active);
        (s_active, t_active)
    }

    fn check_finite(&self, tape: &Tape, node: NodeId, layer: usize, direction: &str) -> Result<()> {
        if tape.value(node).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "flow {direction} produced a non-finite value at layer {layer}"
            )));
        }
        Ok(())
    }

    /// Build z = f(x) and the per-row forward log-det (B x 1) on the tape.
    pub fn forward_nodes(&self, tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let mut log_det: Option<NodeId> = None;
        for i in 0..self.layers.len() {
            let (s_active, t_active) = self.layer_scale_translate(tape, ids, i, h);
            let es = tape.exp(s_active);
            let scaled = tape.mul(h, es);
            h = tape.add(scaled, t_active);
            self.check_finite(tape, h, i, "forward")?;
            let ld = tape.sum_rows(s_active);
            log_det = Some(match log_det {
                None => ld,
                Some(acc) => tape.add(acc, ld),
            });
        }
        Ok((h, log_det.expect("at least one layer")))
    }

    /// Build x = f^{-1}(z) and the log-det of the inverse map (B x 1).
    pub fn inverse_nodes(&self, tape: &mut Tape, ids: &[NodeId], z: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = z;
        let mut log_det_inv: Option<NodeId> = None;
        for i in (0..self.layers.len()).rev() {
            let (s_active, t_active) = self.layer_scale_translate(tape, ids, i, h);
            let diff = tape.sub(h, t_active);
            let neg_s = tape.neg(s_active);
            let es = tape.exp(neg_s);
            h = tape.mul(diff, es);
            self.check_finite(tape, h, i, "inverse")?;
            let ld = tape.sum_rows(neg_s);
            log_det_inv = Some(match log_det_inv {
                None => ld,
                Some(acc) => tape.add(acc, ld),
            });
        }
        Ok((h, log_det_inv.expect("at least one layer")))
    }

    fn run_batch(&self, x: &ArrayView2<f64>, inverse: bool) -> Result<(Array2<f64>, Array1<f64>)> {
        if x.ncols() != self.dim() {
            return Err(Error::ShapeMismatch { expected: self.dim(), got: x.ncols(), context: "flow input" });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow input".into()));
        }
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let xn = tape.constant(x.to_owned());
        let (out, ld) = if inverse {
            self.inverse_nodes(&mut tape, &ids, xn)?
        } else {
            self.forward_nodes(&mut tape, &ids, xn)?
        };
        let z = tape.value(out).clone();
        let d = tape.value(ld).index_axis(Axis(1), 0).to_owned();
        Ok((z, d))
    }

    /// z = f(x) with the forward log-det per row.
    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.run_batch(x, false)
    }

    /// x = f^{-1}(z) with the inverse log-det per row.
    pub fn inverse_batch(&self, z: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.run_batch(z, true)
    }

    pub fn forward_point(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let v = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|_| Error::InvalidArgument("bad point".into()))?;
        let (z, ld) = self.forward_batch(&v)?;
        Ok((z.row(0).to_vec(), ld[0]))
    }

    pub fn inverse_point(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let v = ArrayView2::from_shape((1, z.len()), z)
            .map_err(|_| Error::InvalidArgument("bad point".into()))?;
        let (x, ld) = self.inverse_batch(&v)?;
        Ok((x.row(0).to_vec(), ld[0]))
    }
}

/// Per-column affine rescaling fitted on training data and stored with the
/// model so every consumer sees the same input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &ArrayView2<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let mean: Vec<f64> = data.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
        let std: Vec<f64> = (0..data.ncols())
            .map(|j| {
                let var = data.column(j).iter().map(|&v| (v - mean[j]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(1e-8)
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, data: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }

    pub fn inverse_transform(&self, data: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * self.std[j] + self.mean[j]);
        }
        out
    }
}

/// The two group encoders plus the shared input standardization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowEncoderPair {
    pub f0: FlowEncoder,
    pub f1: FlowEncoder,
    pub standardizer: Standardizer,
}

impl FlowEncoderPair {
    pub fn new(f0: FlowEncoder, f1: FlowEncoder, standardizer: Standardizer) -> Result<Self> {
        if f0.dim() != f1.dim() {
            return Err(Error::ShapeMismatch { expected: f0.dim(), got: f1.dim(), context: "paired encoders" });
        }
        if standardizer.dim() != f0.dim() {
            return Err(Error::ShapeMismatch {
                expected: f0.dim(),
                got: standardizer.dim(),
                context: "standardizer",
            });
        }
        Ok(Self { f0, f1, standardizer })
    }

    pub fn dim(&self) -> usize {
        self.f0.dim()
    }

    pub fn encoder(&self, a: u8) -> &FlowEncoder {
        if a == 0 {
            &self.f0
        } else {
            &self.f1
        }
    }

    /// log p_{Z_a}(z) = log p_a(f_a^{-1}(z)) + log|det df_a^{-1}/dz| per row.
    /// Operates in the standardized input space.
    pub fn latent_log_density_batch(
        &self,
        base: &DensityModel,
        a: u8,
        z: &ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        let gmm = base.as_gmm()?;
        let enc = self.encoder(a);
        let mut tape = Tape::new();
        let ids = enc.bind(&mut tape, false);
        let zn = tape.constant(z.to_owned());
        let (x, ld) = enc.inverse_nodes(&mut tape, &ids, zn)?;
        let base_ld = gmm.log_density_nodes(&mut tape, x);
        let total = tape.add(base_ld, ld);
        Ok(tape.value(total).index_axis(Axis(1), 0).to_owned())
    }

    pub fn latent_log_density(&self, base: &DensityModel, a: u8, z: &[f64]) -> Result<f64> {
        let v = ArrayView2::from_shape((1, z.len()), z)
            .map_err(|_| Error::InvalidArgument("bad point".into()))?;
        Ok(self.latent_log_density_batch(base, a, &v)?[0])
    }
}

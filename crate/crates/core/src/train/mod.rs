//! Joint training of the paired invertible encoders and the downstream
//! classifier against a symmetrized-KL fairness surrogate, plus a minimal
//! alternating adversarial baseline for comparison.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{attack_mlp, AttackConfig, OptimalAdversary};
use crate::density::DensityModel;
use crate::downstream::Classifier;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowEncoder, FlowEncoderPair, Standardizer};
use crate::nn::{bce_with_logits_mean, MlpModel, MlpSpec};
use crate::numerics::adam::{adam_step, AdamHyper, AdamState};
use crate::numerics::rng::SeedStream;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::Layout;

/// How the fairness and classification objectives are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalarization {
    /// gamma * (L_0 + L_1) + (1 - gamma) * L_clf
    Convex,
    /// max of the two terms after running-scale normalization
    Chebyshev,
}

/// All knobs of one training run. Identical configs give identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// classifier-head learning rate; falls back to `lr`
    pub classifier_lr: Option<f64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub scalarization: Scalarization,
    pub flow: FlowConfig,
    pub classifier_hidden: Vec<usize>,
    /// draw the KL batches from the raw training rows instead of the fitted
    /// densities (ablation; the classification batches always use raw rows)
    pub batches_from_data: bool,
    /// gradient steps per epoch; defaults to ceil(max group size / batch)
    pub steps_per_epoch: Option<usize>,
    /// epochs over which the fairness weight ramps linearly from 0 up to
    /// `gamma`; 0 applies `gamma` from the first step. A ramp lets the
    /// classifier commit to a decision boundary before the transport terms
    /// start moving mass, which selects a label-consistent alignment when
    /// several transports match the densities equally well.
    #[serde(default)]
    pub gamma_warmup_epochs: usize,
}

impl TrainConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            gamma: 0.5,
            epochs: 60,
            batch_size: 128,
            lr: 0.01,
            classifier_lr: None,
            weight_decay: 1e-4,
            seed: 0,
            scalarization: Scalarization::Convex,
            flow: FlowConfig::new(input_dim),
            classifier_hidden: vec![32],
            batches_from_data: false,
            steps_per_epoch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0,1], got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("need at least one epoch".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Exponential running scale of one objective's magnitude; the scale is a
/// constant for gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningNorm {
    ema_abs: Option<f64>,
    decay: f64,
}

impl Default for RunningNorm {
    fn default() -> Self {
        Self { ema_abs: None, decay: 0.99 }
    }
}

impl RunningNorm {
    pub fn observe(&mut self, value: f64) {
        let a = value.abs();
        self.ema_abs = Some(match self.ema_abs {
            None => a,
            Some(e) => self.decay * e + (1.0 - self.decay) * a,
        });
    }

    /// Current scale; 1 before any observation, floored away from zero.
    pub fn scale(&self) -> f64 {
        self.ema_abs.map_or(1.0, |e| e.max(1e-8))
    }
}

/// Running scales for the two objectives entering the max-combination.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChebyshevNorm {
    pub kl: RunningNorm,
    pub clf: RunningNorm,
}

impl ChebyshevNorm {
    pub fn new() -> Self {
        Self::default()
    }

    fn observe(&mut self, kl: f64, clf: f64) -> (f64, f64) {
        self.kl.observe(kl);
        self.clf.observe(clf);
        (self.kl.scale(), self.clf.scale())
    }

    pub fn scales(&self) -> (f64, f64) {
        (self.kl.scale(), self.clf.scale())
    }
}

/// Combine the three loss values with the scales pinned by the caller.
pub fn joint_loss_with_scales(
    l0: f64,
    l1: f64,
    l_clf: f64,
    gamma: f64,
    mode: Scalarization,
    scales: (f64, f64),
) -> f64 {
    match mode {
        Scalarization::Convex => gamma * (l0 + l1) + (1.0 - gamma) * l_clf,
        Scalarization::Chebyshev => {
            (gamma * (l0 + l1) / scales.0).max((1.0 - gamma) * l_clf / scales.1)
        }
    }
}

/// Combine the three loss values into one scalar. The max-combination
/// updates the running scales as a side effect.
pub fn joint_loss(
    l0: f64,
    l1: f64,
    l_clf: f64,
    gamma: f64,
    mode: Scalarization,
    norm: &mut ChebyshevNorm,
) -> f64 {
    let scales = match mode {
        Scalarization::Convex => norm.scales(),
        Scalarization::Chebyshev => norm.observe(l0 + l1, l_clf),
    };
    joint_loss_with_scales(l0, l1, l_clf, gamma, mode, scales)
}

/// Same combination on the tape, for training. `l0`, `l1`, `l_clf` must be
/// scalar nodes. The max-combination updates the running scales from the
/// current scalar values before applying them.
pub fn joint_loss_nodes(
    tape: &mut Tape,
    l0: NodeId,
    l1: NodeId,
    l_clf: NodeId,
    gamma: f64,
    mode: Scalarization,
    norm: &mut ChebyshevNorm,
) -> NodeId {
    let scales = match mode {
        Scalarization::Convex => norm.scales(),
        Scalarization::Chebyshev => {
            let kl = tape.scalar(l0) + tape.scalar(l1);
            norm.observe(kl, tape.scalar(l_clf))
        }
    };
    joint_loss_nodes_with_scales(tape, l0, l1, l_clf, gamma, mode, scales)
}

/// Same combination on the tape with the scales pinned by the caller. The
/// running statistics are untouched, so the result is differentiable
/// everywhere the max-combination does not tie.
pub fn joint_loss_nodes_with_scales(
    tape: &mut Tape,
    l0: NodeId,
    l1: NodeId,
    l_clf: NodeId,
    gamma: f64,
    mode: Scalarization,
    scales: (f64, f64),
) -> NodeId {
    let kl = tape.add(l0, l1);
    match mode {
        Scalarization::Convex => {
            let a = tape.scale(kl, gamma);
            let b = tape.scale(l_clf, 1.0 - gamma);
            tape.add(a, b)
        }
        Scalarization::Chebyshev => {
            let a = tape.scale(kl, gamma / scales.0);
            let b = tape.scale(l_clf, (1.0 - gamma) / scales.1);
            tape.max_scalar(a, b)
        }
    }
}

/// Scalar KL-direction nodes for one batch from each group.
pub struct KlNodes {
    pub l0: NodeId,
    pub l1: NodeId,
}

/// First row of the batch the encoders cannot push through, if any.
fn offending_row(own: &FlowEncoder, other: &FlowEncoder, batch: &Array2<f64>) -> Option<(usize, Vec<f64>)> {
    for (r, row) in batch.rows().into_iter().enumerate() {
        let single = row.insert_axis(ndarray::Axis(0));
        let z = match own.forward_batch(&single) {
            Ok((z, _)) => z,
            Err(_) => return Some((r, row.to_vec())),
        };
        if other.inverse_batch(&z.view()).is_err() {
            return Some((r, row.to_vec()));
        }
    }
    None
}

fn blame_sample(err: Error, own: &FlowEncoder, other: &FlowEncoder, batch: &Array2<f64>, group: u8) -> Error {
    if let Some((r, values)) = offending_row(own, other, batch) {
        return Error::NonFinite(format!(
            "latent log-density failed on group-{group} batch row {r} with features {values:?}"
        ));
    }
    err
}

/// Per-row latent log-density gap for samples of group `a`:
/// log p_{Z_a}(f_a(x)) - log p_{Z_b}(f_a(x)), built with
/// log p_{Z_a}(f_a(x)) = log p_a(x) - logdet f_a and
/// log p_{Z_b}(f_a(x)) = log p_b(f_b^{-1}(z)) + logdet f_b^{-1}.
fn latent_gap_nodes(
    tape: &mut Tape,
    own: (&FlowEncoder, &[NodeId]),
    other: (&FlowEncoder, &[NodeId]),
    base_own: &DensityModel,
    base_other: &DensityModel,
    batch: &Array2<f64>,
    group: u8,
) -> Result<NodeId> {
    let gmm_own = base_own.as_gmm()?;
    let gmm_other = base_other.as_gmm()?;
    let x = tape.constant(batch.clone());
    let lp_own = gmm_own.log_density_nodes(tape, x);
    let (z, ld_fwd) = own
        .0
        .forward_nodes(tape, own.1, x)
        .map_err(|e| blame_sample(e, own.0, other.0, batch, group))?;
    let (x_other, ld_inv) = other
        .0
        .inverse_nodes(tape, other.1, z)
        .map_err(|e| blame_sample(e, own.0, other.0, batch, group))?;
    let lp_other = gmm_other.log_density_nodes(tape, x_other);
    let own_side = tape.sub(lp_own, ld_fwd);
    let other_side = tape.add(lp_other, ld_inv);
    let gap = tape.sub(own_side, other_side);
    if let Some(r) = tape.value(gap).column(0).iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "latent log-density gap is not finite for group-{group} batch row {r} with features {:?}",
            batch.row(r).to_vec()
        )));
    }
    Ok(gap)
}

/// Monte Carlo KL-direction losses on the tape, differentiable w.r.t. both
/// encoders' bound parameter nodes.
#[allow(clippy::too_many_arguments)]
pub fn kl_surrogate_nodes(
    tape: &mut Tape,
    f0: &FlowEncoder,
    ids0: &[NodeId],
    f1: &FlowEncoder,
    ids1: &[NodeId],
    base0: &DensityModel,
    base1: &DensityModel,
    batch0: &Array2<f64>,
    batch1: &Array2<f64>,
) -> Result<KlNodes> {
    let gap0 = latent_gap_nodes(tape, (f0, ids0), (f1, ids1), base0, base1, batch0, 0)?;
    let gap1 = latent_gap_nodes(tape, (f1, ids1), (f0, ids0), base1, base0, batch1, 1)?;
    Ok(KlNodes { l0: tape.mean_all(gap0), l1: tape.mean_all(gap1) })
}

/// Batch estimates of KL(latent_0 || latent_1) and KL(latent_1 || latent_0).
pub fn kl_surrogate_losses(
    pair: &FlowEncoderPair,
    base0: &DensityModel,
    base1: &DensityModel,
    batch0: &ArrayView2<f64>,
    batch1: &ArrayView2<f64>,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let ids0 = pair.f0.bind(&mut tape, false);
    let ids1 = pair.f1.bind(&mut tape, false);
    let nodes = kl_surrogate_nodes(
        &mut tape,
        &pair.f0,
        &ids0,
        &pair.f1,
        &ids1,
        base0,
        base1,
        &batch0.to_owned(),
        &batch1.to_owned(),
    )?;
    Ok((tape.scalar(nodes.l0), tape.scalar(nodes.l1)))
}

/// Feature rows and binary labels of one group.
#[derive(Clone, Copy)]
pub struct LabeledGroup<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [u8],
}

impl LabeledGroup<'_> {
    fn validate(&self, dim: usize, what: &str) -> Result<()> {
        if self.x.nrows() == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        if self.x.ncols() != dim {
            return Err(Error::ShapeMismatch { expected: dim, got: self.x.ncols(), context: "group features" });
        }
        if self.x.nrows() != self.y.len() {
            return Err(Error::ShapeMismatch { expected: self.x.nrows(), got: self.y.len(), context: "group labels" });
        }
        if self.y.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!("{what} labels must be 0/1")));
        }
        Ok(())
    }
}

/// Per-group train and validation rows, already in model coordinates.
#[derive(Clone, Copy)]
pub struct TrainSplits<'a> {
    pub train0: LabeledGroup<'a>,
    pub train1: LabeledGroup<'a>,
    pub val0: LabeledGroup<'a>,
    pub val1: LabeledGroup<'a>,
}

impl TrainSplits<'_> {
    fn validate(&self, dim: usize) -> Result<()> {
        self.train0.validate(dim, "train group 0")?;
        self.train1.validate(dim, "train group 1")?;
        self.val0.validate(dim, "validation group 0")?;
        self.val1.validate(dim, "validation group 1")
    }
}

/// One epoch's averaged training losses and validation measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l0: f64,
    pub l1: f64,
    pub l_clf: f64,
    pub joint: f64,
    pub val_delta: f64,
    pub val_accuracy: f64,
    pub val_joint: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.epochs.iter().all(|e| {
            [e.l0, e.l1, e.l_clf, e.joint, e.val_delta, e.val_accuracy, e.val_joint]
                .iter()
                .all(|v| v.is_finite())
        })
    }
}

/// Final and best-validation checkpoints of one run.
pub struct TrainedFnf {
    /// checkpoint with the lowest validation joint loss
    pub pair: FlowEncoderPair,
    pub classifier: Classifier,
    pub final_pair: FlowEncoderPair,
    pub final_classifier: Classifier,
    pub trace: TrainTrace,
    pub best_epoch: usize,
}

fn labels_column(y: &[u8]) -> Array2<f64> {
    Array2::from_shape_vec((y.len(), 1), y.iter().map(|&v| v as f64).collect()).expect("column")
}

/// Condensed view of the most recent completed epochs, for divergence reports.
fn trace_tail(trace: &TrainTrace) -> String {
    if trace.epochs.is_empty() {
        return "no completed epochs".to_string();
    }
    let tail: Vec<String> = trace
        .epochs
        .iter()
        .rev()
        .take(3)
        .rev()
        .map(|e| {
            format!(
                "epoch {}: l0={:.4e} l1={:.4e} l_clf={:.4e} joint={:.4e}",
                e.epoch, e.l0, e.l1, e.l_clf, e.joint
            )
        })
        .collect();
    format!("recent epochs: [{}]", tail.join("; "))
}

fn sample_rows<R: Rng + ?Sized>(x: &ArrayView2<f64>, y: &[u8], n: usize, rng: &mut R) -> (Array2<f64>, Vec<u8>) {
    let mut xb = Array2::zeros((n, x.ncols()));
    let mut yb = Vec::with_capacity(n);
    for r in 0..n {
        let i = rng.gen_range(0..x.nrows());
        xb.row_mut(r).assign(&x.row(i));
        yb.push(y[i]);
    }
    (xb, yb)
}

/// Scalar mean BCE in 64-bit, for validation readouts.
fn bce_scalar(logits: &[f64], y: &[u8]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(y)
        .map(|(&l, &t)| {
            let softplus = if l > 30.0 { l } else { (1.0 + l.exp()).ln() };
            softplus - t as f64 * l
        })
        .sum::<f64>()
        / n
}

struct ParamGroup {
    layout: Layout,
    state: AdamState,
    hyper: AdamHyper,
}

impl ParamGroup {
    fn new(layout: Layout, lr: f64) -> Self {
        let state = AdamState::new(layout.total_len());
        Self { layout, state, hyper: AdamHyper::with_lr(lr) }
    }

    /// One decoupled step: the l2 penalty enters through the gradient, the
    /// moments see the combined direction.
    fn step(&mut self, values: &[f64], mut grad: Vec<f64>, weight_decay: f64) -> Result<Vec<f64>> {
        for (g, p) in grad.iter_mut().zip(values) {
            *g += weight_decay * p;
        }
        let params = self.layout.param_vector(values.to_vec());
        let (next, state) = adam_step(&params, &grad, &self.state, &self.hyper)?;
        self.state = state;
        Ok(next.values().to_vec())
    }
}

/// Joint training: encoders against the symmetrized-KL surrogate, the
/// classifier head against cross-entropy, combined by the configured
/// scalarization, all updated by Adam each step. Deterministic per seed.
pub fn train_fnf(
    config: &TrainConfig,
    base0: &DensityModel,
    base1: &DensityModel,
    splits: &TrainSplits<'_>,
    standardizer: Standardizer,
) -> Result<TrainedFnf> {
    config.validate()?;
    let dim = config.flow.input_dim;
    splits.validate(dim)?;
    for (base, name) in [(base0, "group-0"), (base1, "group-1")] {
        if base.dim() != dim {
            return Err(Error::ShapeMismatch { expected: dim, got: base.dim(), context: "base density" });
        }
        base.as_gmm().map_err(|_| {
            Error::DomainMismatch(format!("{name} base density must be continuous for flow training"))
        })?;
    }
    if standardizer.dim() != dim {
        return Err(Error::ShapeMismatch { expected: dim, got: standardizer.dim(), context: "standardizer" });
    }

    let seeds = SeedStream::new(config.seed);
    let mut f0 = FlowEncoder::new(config.flow.clone(), 0, &mut seeds.stream("init-f0"))?;
    let mut f1 = FlowEncoder::new(config.flow.clone(), 1, &mut seeds.stream("init-f1"))?;
    let clf_spec = MlpSpec::new(dim, config.classifier_hidden.clone(), 1);
    let mut clf = Classifier::new(MlpModel::init(clf_spec, &mut seeds.stream("init-clf")))?;

    let mut group_f0 = ParamGroup::new(f0.layout().clone(), config.lr);
    let mut group_f1 = ParamGroup::new(f1.layout().clone(), config.lr);
    let mut group_clf =
        ParamGroup::new(clf.model().layout(), config.classifier_lr.unwrap_or(config.lr));

    let mut rng_d0 = seeds.stream("density-batches-g0");
    let mut rng_d1 = seeds.stream("density-batches-g1");
    let mut rng_rows = seeds.stream("row-batches");

    let b = config.batch_size;
    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| splits.train0.x.nrows().max(splits.train1.x.nrows()).div_ceil(b).max(1));

    let mut norm = ChebyshevNorm::new();
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, usize, FlowEncoderPair, Classifier)> = None;

    for epoch in 0..config.epochs {
        let mut sums = [0.0f64; 4];
        for _ in 0..steps {
            let (xl0, yl0) = sample_rows(&splits.train0.x, splits.train0.y, b, &mut rng_rows);
            let (xl1, yl1) = sample_rows(&splits.train1.x, splits.train1.y, b, &mut rng_rows);
            let (batch0, batch1) = if config.batches_from_data {
                (xl0.clone(), xl1.clone())
            } else {
                (base0.sample(b, &mut rng_d0), base1.sample(b, &mut rng_d1))
            };

            // a non-finite forward during training is divergence, not input error
            let diverged_at = |e: Error, trace: &TrainTrace| match e {
                Error::NonFinite(msg) => Error::Diverged {
                    epoch,
                    reason: format!("{msg}; {}", trace_tail(trace)),
                },
                other => other,
            };
            let mut tape = Tape::new();
            let ids0 = f0.bind(&mut tape, true);
            let ids1 = f1.bind(&mut tape, true);
            let idsc = clf.bind(&mut tape, true);
            let kl = kl_surrogate_nodes(&mut tape, &f0, &ids0, &f1, &ids1, base0, base1, &batch0, &batch1)
                .map_err(|e| diverged_at(e, &trace))?;

            let x0 = tape.constant(xl0);
            let (z0l, _) =
                f0.forward_nodes(&mut tape, &ids0, x0).map_err(|e| diverged_at(e, &trace))?;
            let logit0 = clf.forward_nodes(&mut tape, &idsc, z0l);
            let bce0 = bce_with_logits_mean(&mut tape, logit0, &labels_column(&yl0));
            let x1 = tape.constant(xl1);
            let (z1l, _) =
                f1.forward_nodes(&mut tape, &ids1, x1).map_err(|e| diverged_at(e, &trace))?;
            let logit1 = clf.forward_nodes(&mut tape, &idsc, z1l);
            let bce1 = bce_with_logits_mean(&mut tape, logit1, &labels_column(&yl1));
            let bsum = tape.add(bce0, bce1);
            let l_clf = tape.scale(bsum, 0.5);

            let joint = joint_loss_nodes(
                &mut tape,
                kl.l0,
                kl.l1,
                l_clf,
                config.gamma,
                config.scalarization,
                &mut norm,
            );
            let stats = [tape.scalar(kl.l0), tape.scalar(kl.l1), tape.scalar(l_clf), tape.scalar(joint)];
            if stats.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!(
                        "loss became non-finite (l0={}, l1={}, l_clf={}, joint={}); {}",
                        stats[0],
                        stats[1],
                        stats[2],
                        stats[3],
                        trace_tail(&trace)
                    ),
                });
            }
            for (s, v) in sums.iter_mut().zip(stats) {
                *s += v;
            }

            let grads = tape.backward(joint);
            let g0 = group_f0.layout.collect_grad(&tape, &grads, &ids0);
            let g1 = group_f1.layout.collect_grad(&tape, &grads, &ids1);
            let gc = group_clf.layout.collect_grad(&tape, &grads, &idsc);
            let p0 = group_f0
                .step(f0.param_values(), g0, config.weight_decay)
                .and_then(|p| f0.set_params(&p))
                .map_err(|e| diverged_at(e, &trace));
            let p1 = p0.and_then(|()| {
                group_f1
                    .step(f1.param_values(), g1, config.weight_decay)
                    .and_then(|p| f1.set_params(&p))
                    .map_err(|e| diverged_at(e, &trace))
            });
            p1.and_then(|()| {
                group_clf
                    .step(clf.model().param_values(), gc, config.weight_decay)
                    .and_then(|p| clf.set_params(&p))
                    .map_err(|e| diverged_at(e, &trace))
            })?;
        }

        let pair = FlowEncoderPair::new(f0.clone(), f1.clone(), standardizer.clone())?;
        let val = validate_epoch(&pair, &clf, base0, base1, splits, config, &norm)?;
        let n_steps = steps as f64;
        let stats = EpochStats {
            epoch,
            l0: sums[0] / n_steps,
            l1: sums[1] / n_steps,
            l_clf: sums[2] / n_steps,
            joint: sums[3] / n_steps,
            val_delta: val.delta,
            val_accuracy: val.accuracy,
            val_joint: val.joint,
        };
        trace.epochs.push(stats);
        if best.as_ref().is_none_or(|(j, ..)| val.joint < *j) {
            best = Some((val.joint, epoch, pair, clf.clone()));
        }
    }

    let (_, best_epoch, best_pair, best_clf) = best.expect("at least one epoch");
    Ok(TrainedFnf {
        pair: best_pair,
        classifier: best_clf,
        final_pair: FlowEncoderPair::new(f0, f1, standardizer)?,
        final_classifier: clf,
        trace,
        best_epoch,
    })
}

struct ValStats {
    delta: f64,
    accuracy: f64,
    joint: f64,
}

fn validate_epoch(
    pair: &FlowEncoderPair,
    clf: &Classifier,
    base0: &DensityModel,
    base1: &DensityModel,
    splits: &TrainSplits<'_>,
    config: &TrainConfig,
    norm: &ChebyshevNorm,
) -> Result<ValStats> {
    let (z0, _) = pair.f0.forward_batch(&splits.val0.x)?;
    let (z1, _) = pair.f1.forward_batch(&splits.val1.x)?;
    let adv = OptimalAdversary::for_flow(pair, base0, base1);
    let delta = adv.delta_on_latents(&z0.view(), &z1.view())?;

    let mean = |v: &ndarray::Array1<f64>| v.sum() / v.len() as f64;
    let lz0_on_z0 = pair.latent_log_density_batch(base0, 0, &z0.view())?;
    let lz1_on_z0 = pair.latent_log_density_batch(base1, 1, &z0.view())?;
    let lz1_on_z1 = pair.latent_log_density_batch(base1, 1, &z1.view())?;
    let lz0_on_z1 = pair.latent_log_density_batch(base0, 0, &z1.view())?;
    let l0 = mean(&(&lz0_on_z0 - &lz1_on_z0));
    let l1 = mean(&(&lz1_on_z1 - &lz0_on_z1));

    let logits0 = clf.logits(&z0.view())?;
    let logits1 = clf.logits(&z1.view())?;
    let n_val = (z0.nrows() + z1.nrows()) as f64;
    let l_clf = (bce_scalar(logits0.as_slice().expect("contiguous"), splits.val0.y) * z0.nrows() as f64
        + bce_scalar(logits1.as_slice().expect("contiguous"), splits.val1.y) * z1.nrows() as f64)
        / n_val;

    let correct0 = logits0.iter().zip(splits.val0.y).filter(|(&l, &y)| u8::from(l > 0.0) == y).count();
    let correct1 = logits1.iter().zip(splits.val1.y).filter(|(&l, &y)| u8::from(l > 0.0) == y).count();
    let accuracy = (correct0 + correct1) as f64 / n_val;

    let joint = joint_loss_with_scales(l0, l1, l_clf, config.gamma, config.scalarization, norm.scales());
    Ok(ValStats { delta, accuracy, joint })
}

/// Settings for the alternating min-max baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialConfig {
    /// weight of the fool-the-adversary term in the encoder objective
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub adversary_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    /// inner adversary maximization steps per encoder step
    pub adversary_steps: usize,
    /// epochs for the from-scratch adversary refit that measures recovery
    pub refit_epochs: usize,
}

impl AdversarialConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            gamma: 0.5,
            epochs: 30,
            batch_size: 128,
            lr: 0.005,
            seed: 0,
            latent_dim: input_dim,
            encoder_hidden: vec![16],
            adversary_hidden: vec![16],
            classifier_hidden: vec![16],
            adversary_steps: 1,
            refit_epochs: 60,
        }
    }
}

/// Result of one adversarial-baseline run. `recovery_rate` is the held-out
/// balanced accuracy of an adversary retrained from scratch on the frozen
/// encoder; diverged runs are kept and marked, not discarded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialOutcome {
    pub encoder: MlpModel,
    pub adversary: MlpModel,
    pub classifier: Classifier,
    pub joint_adversary_accuracy: Option<f64>,
    pub recovery_rate: Option<f64>,
    pub diverged: bool,
}

/// Alternating min-max training of a feed-forward encoder against a group
/// adversary: the adversary ascends on its recovery loss, then the encoder
/// and classifier descend on L_clf - gamma * L_adv.
pub fn train_adversarial_baseline(
    config: &AdversarialConfig,
    splits: &TrainSplits<'_>,
) -> Result<AdversarialOutcome> {
    let dim = splits.train0.x.ncols();
    splits.validate(dim)?;
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
    }

    let seeds = SeedStream::new(config.seed);
    let mut encoder = MlpModel::init(
        MlpSpec::new(dim, config.encoder_hidden.clone(), config.latent_dim),
        &mut seeds.stream("init-encoder"),
    );
    let mut adversary = MlpModel::init(
        MlpSpec::new(config.latent_dim, config.adversary_hidden.clone(), 1),
        &mut seeds.stream("init-adversary"),
    );
    let mut clf = Classifier::new(MlpModel::init(
        MlpSpec::new(config.latent_dim, config.classifier_hidden.clone(), 1),
        &mut seeds.stream("init-classifier"),
    ))?;

    let mut group_enc = ParamGroup::new(encoder.layout(), config.lr);
    let mut group_adv = ParamGroup::new(adversary.layout(), config.lr);
    let mut group_clf = ParamGroup::new(clf.model().layout(), config.lr);
    let mut rng_rows = seeds.stream("row-batches");

    let b = config.batch_size;
    let steps = splits.train0.x.nrows().max(splits.train1.x.nrows()).div_ceil(b).max(1);
    let group_targets = {
        let mut t = vec![0u8; b];
        t.extend(std::iter::repeat_n(1u8, b));
        labels_column(&t)
    };

    let mut diverged = false;
    'outer: for _epoch in 0..config.epochs {
        for _ in 0..steps {
            let (x0, y0) = sample_rows(&splits.train0.x, splits.train0.y, b, &mut rng_rows);
            let (x1, y1) = sample_rows(&splits.train1.x, splits.train1.y, b, &mut rng_rows);
            let mut x = Array2::zeros((2 * b, dim));
            for r in 0..b {
                x.row_mut(r).assign(&x0.row(r));
                x.row_mut(b + r).assign(&x1.row(r));
            }
            let mut y = y0.clone();
            y.extend_from_slice(&y1);

            // adversary ascends on recovery while the encoder is frozen
            for _ in 0..config.adversary_steps.max(1) {
                let mut tape = Tape::new();
                let enc_ids = encoder.bind(&mut tape, false);
                let adv_ids = adversary.bind(&mut tape, true);
                let xn = tape.constant(x.clone());
                let z = encoder.spec().forward(&mut tape, &enc_ids, xn);
                let logits = adversary.spec().forward(&mut tape, &adv_ids, z);
                let loss = bce_with_logits_mean(&mut tape, logits, &group_targets);
                if !tape.scalar(loss).is_finite() {
                    diverged = true;
                    break 'outer;
                }
                let grads = tape.backward(loss);
                let g = group_adv.layout.collect_grad(&tape, &grads, &adv_ids);
                match group_adv.step(adversary.param_values(), g, 0.0).and_then(|p| adversary.set_params(&p)) {
                    Ok(()) => {}
                    Err(_) => {
                        diverged = true;
                        break 'outer;
                    }
                }
            }

            // encoder and classifier descend on L_clf - gamma * L_adv
            let mut tape = Tape::new();
            let enc_ids = encoder.bind(&mut tape, true);
            let adv_ids = adversary.bind(&mut tape, false);
            let clf_ids = clf.bind(&mut tape, true);
            let xn = tape.constant(x.clone());
            let z = encoder.spec().forward(&mut tape, &enc_ids, xn);
            let clf_logits = clf.forward_nodes(&mut tape, &clf_ids, z);
            let l_clf = bce_with_logits_mean(&mut tape, clf_logits, &labels_column(&y));
            let adv_logits = adversary.spec().forward(&mut tape, &adv_ids, z);
            let l_adv = bce_with_logits_mean(&mut tape, adv_logits, &group_targets);
            // maximizing the adversary's loss = adding +gamma * L_adv would
            // reward overconfident wrong adversaries; the standard form
            // minimizes L_clf - gamma * L_adv
            let neg = tape.scale(l_adv, -config.gamma);
            let objective = tape.add(l_clf, neg);
            if !tape.scalar(objective).is_finite() {
                diverged = true;
                break 'outer;
            }
            let grads = tape.backward(objective);
            let ge = group_enc.layout.collect_grad(&tape, &grads, &enc_ids);
            let gc = group_clf.layout.collect_grad(&tape, &grads, &clf_ids);
            let enc_ok = group_enc.step(encoder.param_values(), ge, 0.0).and_then(|p| encoder.set_params(&p));
            let clf_ok = group_clf.step(clf.model().param_values(), gc, 0.0).and_then(|p| clf.set_params(&p));
            if enc_ok.is_err() || clf_ok.is_err() {
                diverged = true;
                break 'outer;
            }
        }
    }

    let (joint_acc, recovery) = if diverged {
        (None, None)
    } else {
        let z_train = encode_groups(&encoder, splits.train0.x, splits.train1.x)?;
        let z_val = encode_groups(&encoder, splits.val0.x, splits.val1.x)?;
        let a_train = group_labels(splits.train0.x.nrows(), splits.train1.x.nrows());
        let a_val = group_labels(splits.val0.x.nrows(), splits.val1.x.nrows());

        let logits = adversary.forward_batch(&z_val.view())?;
        let joint_acc = balanced_group_accuracy(&logits, &a_val);

        let attack_config = AttackConfig {
            hidden: vec![config.adversary_hidden.clone()],
            seeds: 3,
            epochs: config.refit_epochs,
            batch_size: config.batch_size,
            lr: config.lr.max(0.005),
        };
        let refit = attack_mlp(
            &z_train.view(),
            &a_train,
            &z_val.view(),
            &a_val,
            &config.adversary_hidden,
            &attack_config,
            seeds.child("refit").stream("seed").gen(),
        )?;
        (Some(joint_acc), Some(refit.best_balanced_accuracy))
    };

    Ok(AdversarialOutcome {
        encoder,
        adversary,
        classifier: clf,
        joint_adversary_accuracy: joint_acc,
        recovery_rate: recovery,
        diverged,
    })
}

fn encode_groups(encoder: &MlpModel, x0: ArrayView2<f64>, x1: ArrayView2<f64>) -> Result<Array2<f64>> {
    let z0 = encoder.forward_batch(&x0)?;
    let z1 = encoder.forward_batch(&x1)?;
    let mut out = Array2::zeros((z0.nrows() + z1.nrows(), z0.ncols()));
    for (r, row) in z0.rows().into_iter().chain(z1.rows()).enumerate() {
        out.row_mut(r).assign(&row);
    }
    Ok(out)
}

fn group_labels(n0: usize, n1: usize) -> Vec<u8> {
    let mut a = vec![0u8; n0];
    a.extend(std::iter::repeat_n(1u8, n1));
    a
}

fn balanced_group_accuracy(logits: &Array2<f64>, a: &[u8]) -> f64 {
    let mut correct = [0.0f64; 2];
    let mut total = [0.0f64; 2];
    for (i, &t) in a.iter().enumerate() {
        total[t as usize] += 1.0;
        if u8::from(logits[(i, 0)] > 0.0) == t {
            correct[t as usize] += 1.0;
        }
    }
    0.5 * (correct[0] / total[0].max(1.0) + correct[1] / total[1].max(1.0))
}

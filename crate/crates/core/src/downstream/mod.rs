//! Downstream prediction on latents, group fairness metrics, and recourse by
//! latent-space interpolation through the invertible encoders.

use ndarray::{Array1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowEncoderPair;
use crate::nn::{sigmoid, MlpModel, MlpSpec};
use crate::numerics::tape::{NodeId, Tape};

/// Binary classifier head over latents: probability of the favorable label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    model: MlpModel,
}

impl Classifier {
    pub fn new(model: MlpModel) -> Result<Self> {
        if model.spec().output != 1 {
            return Err(Error::InvalidArgument(format!(
                "classifier head must have one output, got {}",
                model.spec().output
            )));
        }
        Ok(Self { model })
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: Vec<usize>, rng: &mut R) -> Self {
        Self { model: MlpModel::init(MlpSpec::new(input, hidden, 1), rng) }
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        self.model.set_params(values)
    }

    pub fn bind(&self, tape: &mut Tape, differentiable: bool) -> Vec<NodeId> {
        self.model.bind(tape, differentiable)
    }

    pub fn forward_nodes(&self, tape: &mut Tape, ids: &[NodeId], z: NodeId) -> NodeId {
        self.model.spec().forward(tape, ids, z)
    }

    pub fn logits(&self, z: &ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.model.forward_batch(z)?.column(0).to_owned())
    }

    /// Probabilities strictly inside (0, 1): extreme logits are clamped one
    /// ulp inside so log(p) and log(1-p) stay finite downstream.
    pub fn predict_proba(&self, z: &ArrayView2<f64>) -> Result<Array1<f64>> {
        let lo = f64::MIN_POSITIVE;
        let hi = 1.0 - f64::EPSILON / 2.0;
        Ok(self.logits(z)?.mapv(|l| sigmoid(l).clamp(lo, hi)))
    }

    pub fn predict(&self, z: &ArrayView2<f64>, threshold: f64) -> Result<Vec<u8>> {
        Ok(self.predict_proba(z)?.iter().map(|&p| u8::from(p >= threshold)).collect())
    }
}

/// Group fairness metrics of hard decisions at one threshold. Odds-based
/// metrics are `None` when a required (group, label) cell is empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairnessMetrics {
    pub threshold: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub demographic_parity_distance: f64,
    pub equalized_odds_gap_y0: Option<f64>,
    pub equalized_odds_gap_y1: Option<f64>,
    pub equalized_odds_distance: Option<f64>,
    pub equal_opportunity_distance: Option<f64>,
}

/// Confusion counts for one (group, label) cell.
#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    total: usize,
    positive: usize,
}

/// Hard-decision fairness metrics over an encoded evaluation set.
pub fn eval_metrics(
    h: &Classifier,
    z: &ArrayView2<f64>,
    groups: &[u8],
    labels: &[u8],
    threshold: f64,
) -> Result<FairnessMetrics> {
    let n = z.nrows();
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if groups.len() != n || labels.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: groups.len().min(labels.len()), context: "metric labels" });
    }
    if !groups.contains(&0) || !groups.contains(&1) {
        return Err(Error::InvalidArgument("both groups must appear in the evaluation set".into()));
    }
    let preds = h.predict(z, threshold)?;

    // everything below is derived from per-(group, label) confusion counts
    let mut cells = [[Cell::default(); 2]; 2];
    let mut correct = 0usize;
    let mut per_label = [Cell::default(); 2];
    for i in 0..n {
        let (a, y, p) = (groups[i] as usize, labels[i] as usize, preds[i]);
        cells[a][y].total += 1;
        cells[a][y].positive += p as usize;
        per_label[y].total += 1;
        if p == labels[i] {
            correct += 1;
            per_label[y].positive += 1;
        }
    }
    let accuracy = correct as f64 / n as f64;
    let balanced_accuracy = {
        let rates: Vec<f64> = per_label
            .iter()
            .filter(|c| c.total > 0)
            .map(|c| c.positive as f64 / c.total as f64)
            .collect();
        rates.iter().sum::<f64>() / rates.len() as f64
    };

    let group_rate = |a: usize| -> f64 {
        let total = cells[a][0].total + cells[a][1].total;
        let positive = cells[a][0].positive + cells[a][1].positive;
        positive as f64 / total as f64
    };
    let demographic_parity_distance = (group_rate(0) - group_rate(1)).abs();

    let gap_for = |y: usize| -> Option<f64> {
        if cells[0][y].total == 0 || cells[1][y].total == 0 {
            return None;
        }
        let r0 = cells[0][y].positive as f64 / cells[0][y].total as f64;
        let r1 = cells[1][y].positive as f64 / cells[1][y].total as f64;
        Some((r0 - r1).abs())
    };
    let (g0, g1) = (gap_for(0), gap_for(1));
    let equalized_odds_distance = match (g0, g1) {
        (Some(a), Some(b)) => Some(a.max(b)),
        _ => None,
    };

    Ok(FairnessMetrics {
        threshold,
        accuracy,
        balanced_accuracy,
        demographic_parity_distance,
        equalized_odds_gap_y0: g0,
        equalized_odds_gap_y1: g1,
        equalized_odds_distance,
        equal_opportunity_distance: g1,
    })
}

/// Threshold maximizing balanced accuracy on a validation set; candidates are
/// midpoints between adjacent distinct predicted probabilities plus 0.5.
pub fn optimal_threshold(h: &Classifier, z: &ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
    if z.nrows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let probs = h.predict_proba(z)?;
    let mut sorted: Vec<f64> = probs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite probabilities"));
    sorted.dedup();
    let mut candidates = vec![0.5];
    for w in sorted.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    let score = |t: f64| -> f64 {
        let mut cell = [Cell::default(); 2];
        for (i, &y) in labels.iter().enumerate() {
            let p = u8::from(probs[i] >= t);
            cell[y as usize].total += 1;
            if p == y {
                cell[y as usize].positive += 1;
            }
        }
        let rates: Vec<f64> = cell
            .iter()
            .filter(|c| c.total > 0)
            .map(|c| c.positive as f64 / c.total as f64)
            .collect();
        rates.iter().sum::<f64>() / rates.len() as f64
    };
    let mut best = (0.5, score(0.5));
    for t in candidates {
        let s = score(t);
        if s > best.1 + 1e-15 {
            best = (t, s);
        }
    }
    Ok(best.0)
}

/// Recourse search settings. `immutable` lists feature indices that must not
/// change; a candidate that moves one of them is reported, not repaired.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecourseConfig {
    pub steps: usize,
    pub threshold: f64,
    pub immutable: Vec<usize>,
    pub immutable_tolerance: f64,
}

impl Default for RecourseConfig {
    fn default() -> Self {
        Self { steps: 100, threshold: 0.5, immutable: Vec::new(), immutable_tolerance: 1e-6 }
    }
}

/// A usable recourse point, in both standardized and original feature units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoursePoint {
    pub x_std: Vec<f64>,
    pub x_raw: Vec<f64>,
    pub delta_std: Vec<f64>,
    pub delta_raw: Vec<f64>,
    pub latent: Vec<f64>,
    /// fraction of the way from the rejected latent to its accepted target
    pub interpolation: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RecourseOutcome {
    /// the point was already accepted: the empty delta
    AlreadyAccepted,
    /// no accepted latent exists in the candidate pool
    NoAcceptedLatent,
    /// the nearest path to acceptance moves a feature declared immutable
    NotActionable { blocked_features: Vec<usize>, candidate: RecoursePoint },
    Found(RecoursePoint),
}

/// Latent-space recourse: find the nearest accepted latent in l2, walk the
/// segment toward it, stop at the earliest accepted interpolation point, and
/// invert back to feature space. `x_std` is a standardized feature row;
/// `pool` holds already-encoded dataset latents for the same group.
pub fn recourse(
    pair: &FlowEncoderPair,
    h: &Classifier,
    x_std: &[f64],
    a: u8,
    pool: &ArrayView2<f64>,
    config: &RecourseConfig,
) -> Result<RecourseOutcome> {
    if config.steps == 0 {
        return Err(Error::InvalidArgument("need at least one interpolation step".into()));
    }
    let enc = pair.encoder(a);
    let (z, _) = enc.forward_point(x_std)?;
    let z_arr = ArrayView2::from_shape((1, z.len()), &z).expect("row");
    if h.predict_proba(&z_arr)?[0] >= config.threshold {
        return Ok(RecourseOutcome::AlreadyAccepted);
    }

    let probs = h.predict_proba(pool)?;
    let accepted: Vec<usize> = (0..pool.nrows()).filter(|&i| probs[i] >= config.threshold).collect();
    if accepted.is_empty() {
        return Ok(RecourseOutcome::NoAcceptedLatent);
    }
    let target = *accepted
        .iter()
        .min_by(|&&i, &&j| {
            let di: f64 = pool.row(i).iter().zip(&z).map(|(p, q)| (p - q).powi(2)).sum();
            let dj: f64 = pool.row(j).iter().zip(&z).map(|(p, q)| (p - q).powi(2)).sum();
            di.partial_cmp(&dj).expect("finite distances")
        })
        .expect("nonempty");
    let target_z = pool.row(target);

    // earliest accepted point on the segment, re-checked after inversion so
    // the returned feature point itself is accepted, not just its latent
    for step in 1..=config.steps {
        let t = step as f64 / config.steps as f64;
        let zt: Vec<f64> = z.iter().zip(target_z.iter()).map(|(a, b)| a + t * (b - a)).collect();
        let zt_arr = ArrayView2::from_shape((1, zt.len()), &zt).expect("row");
        if h.predict_proba(&zt_arr)?[0] < config.threshold {
            continue;
        }
        let (x_new, _) = enc.inverse_point(&zt)?;
        let (z_check, _) = enc.forward_point(&x_new)?;
        let z_check_arr = ArrayView2::from_shape((1, z_check.len()), &z_check).expect("row");
        let prob = h.predict_proba(&z_check_arr)?[0];
        if prob < config.threshold {
            continue;
        }
        let delta_std: Vec<f64> = x_new.iter().zip(x_std).map(|(n, o)| n - o).collect();
        let to_raw = |v: &[f64]| -> Vec<f64> {
            let view = ArrayView2::from_shape((1, v.len()), v).expect("row");
            pair.standardizer.inverse_transform(&view).row(0).to_vec()
        };
        let x_raw_new = to_raw(&x_new);
        let x_raw_old = to_raw(x_std);
        let delta_raw: Vec<f64> = x_raw_new.iter().zip(&x_raw_old).map(|(n, o)| n - o).collect();
        let point = RecoursePoint {
            x_std: x_new,
            x_raw: x_raw_new,
            delta_std,
            delta_raw,
            latent: zt,
            interpolation: t,
            probability: prob,
        };
        let blocked: Vec<usize> = config
            .immutable
            .iter()
            .copied()
            .filter(|&j| point.delta_raw[j].abs() > config.immutable_tolerance)
            .collect();
        if blocked.is_empty() {
            return Ok(RecourseOutcome::Found(point));
        }
        return Ok(RecourseOutcome::NotActionable { blocked_features: blocked, candidate: point });
    }
    Ok(RecourseOutcome::NoAcceptedLatent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowConfig, FlowEncoder, Standardizer};
    use crate::numerics::rng::SeedStream;
    use ndarray::{array, Array2};

    /// Linear head w.z + b expressed as a hidden-free spec is not supported
    /// (hidden may be empty? layer_dims handles it), so build via one pass.
    fn linear_classifier(w: &[f64], b: f64) -> Classifier {
        let spec = MlpSpec::new(w.len(), vec![], 1);
        let mut params = w.to_vec();
        params.push(b);
        Classifier::new(MlpModel::new(spec, params).unwrap()).unwrap()
    }

    fn constant_classifier(dim: usize, logit: f64) -> Classifier {
        linear_classifier(&vec![0.0; dim], logit)
    }

    #[test]
    fn probabilities_stay_inside_open_interval() {
        let h = linear_classifier(&[50.0], 0.0);
        let z = array![[1000.0], [-1000.0], [0.0]];
        let p = h.predict_proba(&z.view()).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((p[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_classifier_has_zero_distances() {
        let h = constant_classifier(2, 3.0);
        let z = array![[0.1, 0.2], [5.0, -1.0], [-2.0, 0.4], [1.0, 1.0]];
        let m = eval_metrics(&h, &z.view(), &[0, 0, 1, 1], &[0, 1, 0, 1], 0.5).unwrap();
        assert_eq!(m.demographic_parity_distance, 0.0);
        assert_eq!(m.equalized_odds_distance, Some(0.0));
        assert_eq!(m.equal_opportunity_distance, Some(0.0));
    }

    #[test]
    fn group_oracle_classifier_has_parity_distance_one() {
        // group is encoded in the sign of the first latent coordinate
        let h = linear_classifier(&[10.0, 0.0], 0.0);
        let z = array![[-1.0, 0.3], [-2.0, 0.1], [1.0, 0.9], [2.0, -0.5]];
        let m = eval_metrics(&h, &z.view(), &[0, 0, 1, 1], &[0, 1, 0, 1], 0.5).unwrap();
        assert_eq!(m.demographic_parity_distance, 1.0);
    }

    #[test]
    fn parity_from_predictions_equals_parity_from_confusion_counts() {
        let mut rng = SeedStream::new(8).stream("metrics");
        let n = 400;
        let mut z = Array2::zeros((n, 2));
        let mut a = vec![0u8; n];
        let mut y = vec![0u8; n];
        for i in 0..n {
            z[(i, 0)] = rng.gen_range(-2.0..2.0);
            z[(i, 1)] = rng.gen_range(-2.0..2.0);
            a[i] = u8::from(rng.gen::<f64>() < 0.4);
            y[i] = u8::from(rng.gen::<f64>() < 0.5);
        }
        let h = linear_classifier(&[1.2, -0.7], 0.1);
        let m = eval_metrics(&h, &z.view(), &a, &y, 0.5).unwrap();
        // second path: group-wise mean of hard predictions
        let preds = h.predict(&z.view(), 0.5).unwrap();
        let rate = |g: u8| {
            let sel: Vec<f64> = preds
                .iter()
                .zip(&a)
                .filter(|(_, &ai)| ai == g)
                .map(|(&p, _)| p as f64)
                .collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        let direct = (rate(0) - rate(1)).abs();
        assert_eq!(m.demographic_parity_distance, direct);
    }

    #[test]
    fn empty_label_cell_marks_odds_metrics_undefined() {
        let h = linear_classifier(&[1.0], 0.0);
        let z = array![[0.5], [-0.5], [1.0], [2.0]];
        // group 1 has no y=0 rows
        let m = eval_metrics(&h, &z.view(), &[0, 0, 1, 1], &[0, 1, 1, 1], 0.5).unwrap();
        assert!(m.equalized_odds_gap_y0.is_none());
        assert!(m.equalized_odds_distance.is_none());
        assert!(m.equal_opportunity_distance.is_some());
    }

    #[test]
    fn distances_stay_in_unit_interval() {
        let mut rng = SeedStream::new(17).stream("metrics");
        for trial in 0..20 {
            let n = 60;
            let mut z = Array2::zeros((n, 3));
            let mut a = vec![0u8; n];
            let mut y = vec![0u8; n];
            for i in 0..n {
                for j in 0..3 {
                    z[(i, j)] = rng.gen_range(-3.0..3.0);
                }
                a[i] = u8::from(i % 2 == 0);
                y[i] = u8::from(rng.gen::<f64>() < 0.3);
            }
            let h = Classifier::init(3, vec![6], &mut SeedStream::new(trial).stream("clf"));
            let m = eval_metrics(&h, &z.view(), &a, &y, 0.5).unwrap();
            assert!((0.0..=1.0).contains(&m.demographic_parity_distance));
            for v in [m.equalized_odds_distance, m.equal_opportunity_distance].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn optimal_threshold_beats_default_on_skewed_labels() {
        // positives are rare and sit at moderate probabilities
        let mut rng = SeedStream::new(5).stream("skew");
        let n = 500;
        let mut z = Array2::zeros((n, 1));
        let mut y = vec![0u8; n];
        for i in 0..n {
            let positive = rng.gen::<f64>() < 0.1;
            y[i] = u8::from(positive);
            z[(i, 0)] = if positive { rng.gen_range(-0.5..1.5) } else { rng.gen_range(-2.0..0.3) };
        }
        let h = linear_classifier(&[1.0], -1.0);
        let t = optimal_threshold(&h, &z.view(), &y).unwrap();
        let bal = |thr: f64| {
            let preds = h.predict(&z.view(), thr).unwrap();
            let mut cell = [[0usize; 2]; 2];
            for (i, &p) in preds.iter().enumerate() {
                cell[y[i] as usize][0] += 1;
                cell[y[i] as usize][1] += usize::from(p == y[i]);
            }
            0.5 * (cell[0][1] as f64 / cell[0][0] as f64 + cell[1][1] as f64 / cell[1][0] as f64)
        };
        assert!(bal(t) >= bal(0.5), "optimal {} vs default {}", bal(t), bal(0.5));
        assert!(bal(t) > 0.8);
    }

    fn identity_pair(dim: usize) -> FlowEncoderPair {
        let f0 = FlowEncoder::identity(FlowConfig::new(dim), 0).unwrap();
        let f1 = FlowEncoder::identity(FlowConfig::new(dim), 1).unwrap();
        FlowEncoderPair::new(f0, f1, Standardizer::identity(dim)).unwrap()
    }

    #[test]
    fn already_accepted_point_returns_empty_delta() {
        let pair = identity_pair(2);
        let h = linear_classifier(&[1.0, 0.0], 0.0);
        let pool = array![[2.0, 0.0]];
        let out = recourse(&pair, &h, &[3.0, 1.0], 0, &pool.view(), &RecourseConfig::default()).unwrap();
        assert!(matches!(out, RecourseOutcome::AlreadyAccepted));
    }

    #[test]
    fn no_accepted_latent_is_reported_explicitly() {
        let pair = identity_pair(2);
        let h = linear_classifier(&[1.0, 0.0], 0.0);
        let pool = array![[-2.0, 0.0], [-1.0, 3.0]];
        let out = recourse(&pair, &h, &[-3.0, 1.0], 0, &pool.view(), &RecourseConfig::default()).unwrap();
        assert!(matches!(out, RecourseOutcome::NoAcceptedLatent));
    }

    #[test]
    fn identity_flow_linear_head_moves_along_the_boundary_normal() {
        let pair = identity_pair(2);
        // boundary normal (3, 4)/5
        let h = linear_classifier(&[3.0, 4.0], 0.0);
        // dense accepted pool on a grid
        let mut points = Vec::new();
        for i in -30..=30 {
            for j in -30..=30 {
                points.push([i as f64 * 0.1, j as f64 * 0.1]);
            }
        }
        let mut pool = Array2::zeros((points.len(), 2));
        for (r, p) in points.iter().enumerate() {
            pool[(r, 0)] = p[0];
            pool[(r, 1)] = p[1];
        }
        let x = [-1.0, -0.5];
        let out = recourse(&pair, &h, &x, 0, &pool.view(), &RecourseConfig::default()).unwrap();
        let RecourseOutcome::Found(point) = out else { panic!("expected recourse") };
        let norm = (point.delta_std.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let cos = (3.0 * point.delta_std[0] + 4.0 * point.delta_std[1]) / (5.0 * norm);
        assert!(cos > 0.95, "cosine to the normal {cos}");
        // validity: the returned point itself is accepted
        assert!(point.probability >= 0.5);
    }

    #[test]
    fn immutable_feature_change_is_flagged_not_silently_fixed() {
        let pair = identity_pair(2);
        // acceptance requires moving coordinate 0, which is declared immutable
        let h = linear_classifier(&[5.0, 0.0], 0.0);
        let pool = array![[1.0, 0.0]];
        let config = RecourseConfig { immutable: vec![0], ..Default::default() };
        let out = recourse(&pair, &h, &[-1.0, 0.0], 0, &pool.view(), &config).unwrap();
        let RecourseOutcome::NotActionable { blocked_features, .. } = out else {
            panic!("expected a blocked recourse");
        };
        assert_eq!(blocked_features, vec![0]);
    }

    #[test]
    fn recourse_stops_at_the_earliest_accepted_step() {
        let pair = identity_pair(1);
        let h = linear_classifier(&[4.0], 0.0);
        let pool = array![[5.0]];
        let out = recourse(&pair, &h, &[-1.0], 0, &pool.view(), &RecourseConfig::default()).unwrap();
        let RecourseOutcome::Found(point) = out else { panic!("expected recourse") };
        // boundary is at 0, start at -1, target 5: first accepted grid point
        // is the smallest t with -1 + 6t >= 0
        let expect_t = (1.0f64 / 6.0 * 100.0).ceil() / 100.0;
        assert!((point.interpolation - expect_t).abs() < 1e-12, "t {}", point.interpolation);
        assert!(point.x_std[0] >= 0.0 && point.x_std[0] < 0.1);
    }

    #[test]
    fn recourse_reports_raw_units_through_the_standardizer() {
        let mut data = Array2::zeros((100, 1));
        for i in 0..100 {
            data[(i, 0)] = 10.0 + (i as f64) * 0.2;
        }
        let st = Standardizer::fit(&data.view());
        let f0 = FlowEncoder::identity(FlowConfig::new(1), 0).unwrap();
        let f1 = FlowEncoder::identity(FlowConfig::new(1), 1).unwrap();
        let pair = FlowEncoderPair::new(f0, f1, st.clone()).unwrap();
        let h = linear_classifier(&[4.0], 0.0);
        let pool = array![[2.0]];
        let out = recourse(&pair, &h, &[-1.0], 0, &pool.view(), &RecourseConfig::default()).unwrap();
        let RecourseOutcome::Found(point) = out else { panic!("expected recourse") };
        // raw delta = std delta * sigma for an affine standardizer
        let sigma = {
            let one = array![[1.0]];
            let zero = array![[0.0]];
            st.inverse_transform(&one.view())[(0, 0)] - st.inverse_transform(&zero.view())[(0, 0)]
        };
        assert!((point.delta_raw[0] - point.delta_std[0] * sigma).abs() < 1e-10);
    }
}

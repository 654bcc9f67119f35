//! Exact optimal adversary, empirical statistical distance with
//! finite-sample guarantees, certified adversarial-accuracy bounds, and
//! trained MLP attacks.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::discrete::DiscreteMatching;
use crate::error::{Error, Result};
use crate::flow::FlowEncoderPair;
use crate::nn::{bce_with_logits_mean, MlpSpec};
use crate::numerics::adam::{adam_step, AdamHyper, AdamState};
use crate::numerics::rng::SeedStream;
use crate::numerics::tape::Tape;
use crate::numerics::Layout;

/// Smallest n with n >= -2 ln((1 - sqrt(1-delta))/2) / eps^2.
pub fn required_samples(epsilon: f64, delta: f64) -> Result<usize> {
    check_eps_delta(epsilon, delta)?;
    Ok(required_samples_raw(epsilon, delta).ceil() as usize)
}

fn required_samples_raw(epsilon: f64, delta: f64) -> f64 {
    let inner = (1.0 - (1.0 - delta).sqrt()) / 2.0;
    -2.0 * inner.ln() / (epsilon * epsilon)
}

/// Half-width guaranteed by n samples per group at failure probability delta.
pub fn hoeffding_epsilon(n: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    check_eps_delta(0.5, delta)?;
    let inner = (1.0 - (1.0 - delta).sqrt()) / 2.0;
    Ok((-2.0 * inner.ln() / n as f64).sqrt())
}

fn check_eps_delta(epsilon: f64, delta: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0,1), got {delta}")));
    }
    Ok(())
}

/// Certified ceiling on any adversary's accuracy given the distance estimate.
pub fn max_adversarial_accuracy(delta_hat: f64, epsilon: f64) -> f64 {
    (1.0 + (delta_hat + epsilon).clamp(0.0, 1.0)) / 2.0
}

/// The group-1 latent space an adversary sees: either a pair of invertible
/// encoders over continuous bases, or a finite-domain matching.
pub enum LatentSpace<'a> {
    Flow { pair: &'a FlowEncoderPair, base0: &'a DensityModel, base1: &'a DensityModel },
    Discrete { matching: &'a DiscreteMatching },
}

/// The exact density-comparison adversary: predicts group 1 whenever the
/// group-1 latent density is at least the group-0 latent density (ties
/// predict 1; the distance estimate does not depend on the tie rule).
pub struct OptimalAdversary<'a> {
    space: LatentSpace<'a>,
}

impl<'a> OptimalAdversary<'a> {
    pub fn new(space: LatentSpace<'a>) -> Self {
        Self { space }
    }

    pub fn for_flow(pair: &'a FlowEncoderPair, base0: &'a DensityModel, base1: &'a DensityModel) -> Self {
        Self::new(LatentSpace::Flow { pair, base0, base1 })
    }

    pub fn for_matching(matching: &'a DiscreteMatching) -> Self {
        Self::new(LatentSpace::Discrete { matching })
    }

    /// Predicted group for a batch of latent points.
    pub fn predict_batch(&self, z: &ArrayView2<f64>) -> Result<Vec<u8>> {
        match &self.space {
            LatentSpace::Flow { pair, base0, base1 } => {
                let ld0 = pair.latent_log_density_batch(base0, 0, z)?;
                let ld1 = pair.latent_log_density_batch(base1, 1, z)?;
                Ok(ld0.iter().zip(ld1.iter()).map(|(&a, &b)| u8::from(b >= a)).collect())
            }
            LatentSpace::Discrete { matching } => {
                let (pz0, pz1) = matching.latent_distributions();
                let mut out = Vec::with_capacity(z.nrows());
                for row in z.rows() {
                    let point: Vec<u32> = row.iter().map(|&v| v as u32).collect();
                    let idx = matching.domain().index_of(&point).ok_or(Error::OutOfDomain)?;
                    out.push(u8::from(pz1[idx] >= pz0[idx]));
                }
                Ok(out)
            }
        }
    }

    pub fn predict(&self, z: &[f64]) -> Result<u8> {
        let v = ArrayView2::from_shape((1, z.len()), z)
            .map_err(|_| Error::InvalidArgument("bad point".into()))?;
        Ok(self.predict_batch(&v)?[0])
    }

    /// Fresh latent samples from one group: base draw then encode.
    pub fn sample_latents<R: Rng + ?Sized>(&self, a: u8, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        match &self.space {
            LatentSpace::Flow { pair, base0, base1 } => {
                let base = if a == 0 { base0 } else { base1 };
                let x = base.sample(n, rng);
                let (z, _) = pair.encoder(a).forward_batch(&x.view())?;
                Ok(z)
            }
            LatentSpace::Discrete { matching } => {
                let pmf = matching.base_pmf(a);
                let mut out = Array2::zeros((n, matching.domain().point(0).len()));
                for r in 0..n {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut idx = pmf.len() - 1;
                    for (i, &v) in pmf.iter().enumerate() {
                        acc += v;
                        if u <= acc {
                            idx = i;
                            break;
                        }
                    }
                    let z = matching.encode(matching.domain().point(idx), a, rng)?;
                    for (c, &v) in z.iter().enumerate() {
                        out[(r, c)] = v as f64;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Empirical statistical distance from already-encoded samples.
    pub fn delta_on_latents(&self, z0: &ArrayView2<f64>, z1: &ArrayView2<f64>) -> Result<f64> {
        let mu0 = self.predict_batch(z0)?;
        let mu1 = self.predict_batch(z1)?;
        let m0 = mu0.iter().map(|&v| v as f64).sum::<f64>() / mu0.len().max(1) as f64;
        let m1 = mu1.iter().map(|&v| v as f64).sum::<f64>() / mu1.len().max(1) as f64;
        Ok((m0 - m1).abs())
    }
}

/// Draw n fresh samples per group, encode them, and report
/// |mean mu(z_0) - mean mu(z_1)|.
pub fn estimate_delta<R: Rng + ?Sized>(adv: &OptimalAdversary<'_>, n: usize, rng: &mut R) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample per group".into()));
    }
    let z0 = adv.sample_latents(0, n, rng)?;
    let z1 = adv.sample_latents(1, n, rng)?;
    adv.delta_on_latents(&z0.view(), &z1.view())
}

/// Per-label-conditional distance estimates offered as an equalized-odds
/// style certificate. This conditioning is an interpretation layered on the
/// demographic-parity bound, and is flagged as such in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalDeltas {
    pub delta_given_y0: Option<f64>,
    pub delta_given_y1: Option<f64>,
    pub interpretation: String,
}

/// Conditional distance on labeled, already-encoded latents.
pub fn conditional_deltas(
    adv: &OptimalAdversary<'_>,
    z0: &ArrayView2<f64>,
    y0: &[u8],
    z1: &ArrayView2<f64>,
    y1: &[u8],
) -> Result<ConditionalDeltas> {
    let select = |z: &ArrayView2<f64>, y: &[u8], label: u8| -> Array2<f64> {
        let rows: Vec<usize> = (0..z.nrows()).filter(|&i| y[i] == label).collect();
        let mut out = Array2::zeros((rows.len(), z.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).assign(&z.row(i));
        }
        out
    };
    let mut per_label = [None, None];
    for label in 0..2u8 {
        let s0 = select(z0, y0, label);
        let s1 = select(z1, y1, label);
        if s0.nrows() == 0 || s1.nrows() == 0 {
            continue;
        }
        per_label[label as usize] = Some(adv.delta_on_latents(&s0.view(), &s1.view())?);
    }
    Ok(ConditionalDeltas {
        delta_given_y0: per_label[0],
        delta_given_y1: per_label[1],
        interpretation: "label-conditional distance offered as an equalized-odds certificate; \
                         the guarantee proven for the unconditional distance is applied per label"
            .into(),
    })
}

/// Everything the certification pipeline proves about one encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationReport {
    pub delta_hat: f64,
    pub samples_per_group: usize,
    pub epsilon: f64,
    pub failure_probability: f64,
    pub max_adv_acc: f64,
    pub demographic_parity_bound: f64,
    pub conditional: Option<ConditionalDeltas>,
    pub attack_accuracies: Vec<AttackResult>,
}

/// Fresh-sample certification at a given budget and failure probability.
pub fn certify<R: Rng + ?Sized>(
    adv: &OptimalAdversary<'_>,
    n: usize,
    delta: f64,
    rng: &mut R,
) -> Result<CertificationReport> {
    let epsilon = hoeffding_epsilon(n, delta)?;
    let delta_hat = estimate_delta(adv, n, rng)?;
    Ok(CertificationReport {
        delta_hat,
        samples_per_group: n,
        epsilon,
        failure_probability: delta,
        max_adv_acc: max_adversarial_accuracy(delta_hat, epsilon),
        demographic_parity_bound: (delta_hat + epsilon).min(1.0),
        conditional: None,
        attack_accuracies: Vec::new(),
    })
}

/// One trained adversary's held-out balanced accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub architecture: String,
    pub seeds: usize,
    pub best_balanced_accuracy: f64,
}

/// Attack training settings. `hidden` lists the architectures to try.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub hidden: Vec<Vec<usize>>,
    pub seeds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            hidden: vec![vec![8], vec![50, 50], vec![200, 200, 200]],
            seeds: 5,
            epochs: 60,
            batch_size: 256,
            lr: 0.01,
        }
    }
}

fn balanced_accuracy(logits: &Array2<f64>, targets: &[u8]) -> f64 {
    let mut correct = [0.0f64; 2];
    let mut total = [0.0f64; 2];
    for (i, &t) in targets.iter().enumerate() {
        let pred = u8::from(logits[(i, 0)] > 0.0);
        total[t as usize] += 1.0;
        if pred == t {
            correct[t as usize] += 1.0;
        }
    }
    if total[0] == 0.0 || total[1] == 0.0 {
        return f64::NAN;
    }
    0.5 * (correct[0] / total[0] + correct[1] / total[1])
}

/// Train one MLP adversary to recover the group from latents; returns the
/// held-out balanced accuracy of the best epoch-end model across seeds.
pub fn attack_mlp(
    train_z: &ArrayView2<f64>,
    train_a: &[u8],
    test_z: &ArrayView2<f64>,
    test_a: &[u8],
    hidden: &[usize],
    config: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    if train_z.nrows() != train_a.len() || test_z.nrows() != test_a.len() {
        return Err(Error::ShapeMismatch {
            expected: train_z.nrows(),
            got: train_a.len(),
            context: "attack labels",
        });
    }
    if train_z.nrows() == 0 || test_z.nrows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let d = train_z.ncols();
    let spec = MlpSpec::new(d, hidden.to_vec(), 1);
    let layout = Layout::new(spec.segments("attack"));
    let targets: Array2<f64> =
        Array2::from_shape_vec((train_a.len(), 1), train_a.iter().map(|&v| v as f64).collect())
            .expect("targets");

    let mut best = f64::NAN;
    for s in 0..config.seeds {
        let stream = SeedStream::new(seed).child(&format!("attack-seed-{s}"));
        let mut init_rng = stream.stream("init");
        let mut params = layout.param_vector(spec.init(&mut init_rng, false));
        let mut state = AdamState::new(params.len());
        let hyper = AdamHyper::with_lr(config.lr);
        let mut batch_rng = stream.stream("batches");
        let n = train_z.nrows();
        let bsz = config.batch_size.min(n);
        let steps = n.div_ceil(bsz);
        let mut diverged = false;
        for _epoch in 0..config.epochs {
            for _ in 0..steps {
                let idx: Vec<usize> = (0..bsz).map(|_| batch_rng.gen_range(0..n)).collect();
                let mut xb = Array2::zeros((bsz, d));
                let mut yb = Array2::zeros((bsz, 1));
                for (r, &i) in idx.iter().enumerate() {
                    xb.row_mut(r).assign(&train_z.row(i));
                    yb[(r, 0)] = targets[(i, 0)];
                }
                let mut tape = Tape::new();
                let ids = layout.bind(&mut tape, params.values());
                let xn = tape.constant(xb);
                let logits = spec.forward(&mut tape, &ids, xn);
                let loss = bce_with_logits_mean(&mut tape, logits, &yb);
                if !tape.scalar(loss).is_finite() {
                    diverged = true;
                    break;
                }
                let grads = tape.backward(loss);
                let g = layout.collect_grad(&tape, &grads, &ids);
                let (p, st) = adam_step(&params, &g, &state, &hyper)?;
                params = p;
                state = st;
            }
            if diverged {
                break;
            }
        }
        if diverged {
            continue;
        }
        let mut tape = Tape::new();
        let ids = layout.bind_const(&mut tape, params.values());
        let xn = tape.constant(test_z.to_owned());
        let logits = spec.forward(&mut tape, &ids, xn);
        let acc = balanced_accuracy(tape.value(logits), test_a);
        if best.is_nan() || acc > best {
            best = acc;
        }
    }
    if best.is_nan() {
        return Err(Error::Diverged { epoch: 0, reason: "every attack seed diverged".into() });
    }
    Ok(AttackResult {
        architecture: hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x"),
        seeds: config.seeds,
        best_balanced_accuracy: best,
    })
}

/// Run the whole architecture suite; results in config order.
pub fn attack_suite(
    train_z: &ArrayView2<f64>,
    train_a: &[u8],
    test_z: &ArrayView2<f64>,
    test_a: &[u8],
    config: &AttackConfig,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    config
        .hidden
        .iter()
        .map(|h| attack_mlp(train_z, train_a, test_z, test_a, h, config, seed))
        .collect()
}

/// Split encoded rows into train/test halves deterministically.
pub fn split_latents(
    z: &ArrayView2<f64>,
    a: &[u8],
    train_fraction: f64,
    seed: u64,
) -> (Array2<f64>, Vec<u8>, Array2<f64>, Vec<u8>) {
    let n = z.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let cut = ((n as f64) * train_fraction).round() as usize;
    let build = |sel: &[usize]| {
        let mut m = Array2::zeros((sel.len(), z.ncols()));
        let mut lab = Vec::with_capacity(sel.len());
        for (r, &i) in sel.iter().enumerate() {
            m.row_mut(r).assign(&z.row(i));
            lab.push(a[i]);
        }
        (m, lab)
    };
    let (train_m, train_l) = build(&idx[..cut]);
    let (test_m, test_l) = build(&idx[cut..]);
    (train_m, train_l, test_m, test_l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{DensityKind, GaussianMixture};
    use crate::discrete::{optimal_matching, DiscreteMatching, FiniteDomain};
    use crate::flow::{FlowConfig, FlowEncoder, FlowEncoderPair, Standardizer};
    use ndarray::array;

    fn gaussian_model(mean: f64, group: u8) -> DensityModel {
        let g = GaussianMixture::from_parts(vec![1.0], array![[mean]], vec![array![[1.0]]]).unwrap();
        DensityModel { kind: DensityKind::Gmm(g), group, fit_log_likelihood: 0.0, sample_count: 0 }
    }

    fn identity_pair(dim: usize) -> FlowEncoderPair {
        let f0 = FlowEncoder::identity(FlowConfig::new(dim), 0).unwrap();
        let f1 = FlowEncoder::identity(FlowConfig::new(dim), 1).unwrap();
        FlowEncoderPair::new(f0, f1, Standardizer::identity(dim)).unwrap()
    }

    #[test]
    fn required_samples_matches_closed_form() {
        assert_eq!(required_samples(0.1, 0.75).unwrap(), 278);
        // halving epsilon exactly quadruples the raw bound
        let raw1 = required_samples_raw(0.1, 0.3);
        let raw2 = required_samples_raw(0.05, 0.3);
        assert!((raw2 / raw1 - 4.0).abs() < 1e-12);
        assert!(required_samples(1.5, 0.5).is_err());
        assert!(required_samples(0.1, 0.0).is_err());
    }

    #[test]
    fn epsilon_inverts_the_sample_bound() {
        for &(eps, delta) in &[(0.1, 0.75), (0.05, 0.1), (0.02, 0.25)] {
            let n = required_samples(eps, delta).unwrap();
            let eps_back = hoeffding_epsilon(n, delta).unwrap();
            assert!(eps_back <= eps + 1e-12, "eps {eps} -> n {n} -> {eps_back}");
            let eps_short = hoeffding_epsilon(n - 1, delta).unwrap();
            assert!(eps_short > eps, "n-1 samples cannot still reach {eps}");
        }
    }

    #[test]
    fn shifted_gaussians_predict_by_midpoint() {
        let pair = identity_pair(1);
        let b0 = gaussian_model(0.0, 0);
        let b1 = gaussian_model(2.0, 1);
        let adv = OptimalAdversary::for_flow(&pair, &b0, &b1);
        assert_eq!(adv.predict(&[0.5]).unwrap(), 0);
        assert_eq!(adv.predict(&[1.5]).unwrap(), 1);
        // equal densities at the midpoint: the tie goes to group 1
        assert_eq!(adv.predict(&[1.0]).unwrap(), 1);
    }

    #[test]
    fn identical_densities_always_predict_one_and_delta_is_small() {
        let pair = identity_pair(1);
        let b = gaussian_model(0.0, 0);
        let adv = OptimalAdversary::for_flow(&pair, &b, &b);
        for &z in &[-3.0, 0.0, 2.5] {
            assert_eq!(adv.predict(&[z]).unwrap(), 1);
        }
        let mut rng = SeedStream::new(12).stream("delta");
        let d = estimate_delta(&adv, 10_000, &mut rng).unwrap();
        assert!(d < 0.03, "delta {d}");
    }

    #[test]
    fn unit_gaussians_two_apart_recover_exact_distance() {
        // TV(N(-1,1), N(1,1)) = 2*Phi(1) - 1
        let pair = identity_pair(1);
        let b0 = gaussian_model(-1.0, 0);
        let b1 = gaussian_model(1.0, 1);
        let adv = OptimalAdversary::for_flow(&pair, &b0, &b1);
        let mut rng = SeedStream::new(7).stream("delta");
        let d = estimate_delta(&adv, 100_000, &mut rng).unwrap();
        assert!((d - 0.682_689_49).abs() < 0.01, "delta {d}");
    }

    #[test]
    fn matched_discrete_groups_have_half_accuracy() {
        let domain = FiniteDomain::exhaustive(&[3], 100).unwrap();
        let m = optimal_matching(&domain, &[0.2, 0.3, 0.5], &[0.5, 0.3, 0.2]).unwrap();
        let adv = OptimalAdversary::for_matching(&m);
        // matched groups: exact expectation of adversary accuracy is 1/2
        let (pz0, pz1) = m.latent_distributions();
        let mut acc = 0.0;
        for idx in 0..3 {
            let mu = adv.predict(&[idx as f64]).unwrap() as f64;
            acc += 0.5 * pz0[idx] * (1.0 - mu) + 0.5 * pz1[idx] * mu;
        }
        assert!((acc - 0.5).abs() < 1e-12, "accuracy {acc}");
    }

    #[test]
    fn disjoint_discrete_support_gives_delta_one() {
        let domain = FiniteDomain::exhaustive(&[4], 100).unwrap();
        let m = DiscreteMatching::with_permutation(
            &domain,
            vec![0, 1, 2, 3],
            &[0.5, 0.5, 0.0, 0.0],
            &[0.0, 0.0, 0.5, 0.5],
        )
        .unwrap();
        let adv = OptimalAdversary::for_matching(&m);
        let mut rng = SeedStream::new(3).stream("delta");
        let d = estimate_delta(&adv, 2000, &mut rng).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_predictor_dominates_every_binary_rule_on_small_domains() {
        let mut rng = SeedStream::new(99).stream("instances");
        for _ in 0..100 {
            let m = 2 + (rng.gen::<u64>() % 11) as usize;
            let mut p0: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mut p1: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
            let (s0, s1): (f64, f64) = (p0.iter().sum(), p1.iter().sum());
            p0.iter_mut().for_each(|v| *v /= s0);
            p1.iter_mut().for_each(|v| *v /= s1);
            let exact_tv = 0.5 * p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).sum::<f64>();
            let star: f64 = p0
                .iter()
                .zip(&p1)
                .map(|(&a, &b)| if b >= a { b - a } else { 0.0 })
                .sum();
            assert!((star - exact_tv).abs() < 1e-12, "mu* attains the exact distance");
            // every binary rule mu: |E1 mu - E0 mu| <= exact TV
            for mask in 0..(1u64 << m) {
                let gap: f64 = (0..m)
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| p1[i] - p0[i])
                    .sum();
                assert!(gap.abs() <= exact_tv + 1e-12);
            }
        }
    }

    #[test]
    fn report_formula_endpoints() {
        assert!((max_adversarial_accuracy(0.0, 0.01) - 0.505).abs() < 1e-12);
        assert!((max_adversarial_accuracy(1.0, 0.5) - 1.0).abs() < 1e-12);
        assert!((max_adversarial_accuracy(0.23, 0.0) - 0.615).abs() < 1e-12);
    }

    #[test]
    fn coverage_of_the_hoeffding_band() {
        // known distance: TV(N(-1,1), N(1,1)) = 2*Phi(1) - 1
        let true_delta = 0.682_689_492_137;
        let pair = identity_pair(1);
        let b0 = gaussian_model(-1.0, 0);
        let b1 = gaussian_model(1.0, 1);
        let adv = OptimalAdversary::for_flow(&pair, &b0, &b1);
        let (eps, delta) = (0.05, 0.1);
        let n = required_samples(eps, delta).unwrap();
        let mut rng = SeedStream::new(2024).stream("coverage");
        let reps = 300;
        let mut covered = 0;
        for _ in 0..reps {
            let d = estimate_delta(&adv, n, &mut rng).unwrap();
            if true_delta <= d + eps {
                covered += 1;
            }
        }
        let rate = covered as f64 / reps as f64;
        assert!(rate >= 1.0 - delta, "coverage {rate}");
    }

    #[test]
    fn certify_produces_consistent_report() {
        let pair = identity_pair(1);
        let b0 = gaussian_model(-1.0, 0);
        let b1 = gaussian_model(1.0, 1);
        let adv = OptimalAdversary::for_flow(&pair, &b0, &b1);
        let mut rng = SeedStream::new(5).stream("cert");
        let report = certify(&adv, 5000, 0.05, &mut rng).unwrap();
        assert!(report.delta_hat >= 0.0 && report.delta_hat <= 1.0);
        assert!(report.epsilon > 0.0);
        let expect = max_adversarial_accuracy(report.delta_hat, report.epsilon);
        assert!((report.max_adv_acc - expect).abs() < 1e-15);
        assert!(report.max_adv_acc >= 0.5 && report.max_adv_acc <= 1.0);
        assert!((report.demographic_parity_bound - (report.delta_hat + report.epsilon).min(1.0)).abs() < 1e-15);
    }

    #[test]
    fn attack_separates_separable_latents_and_not_identical_ones() {
        let mut rng = SeedStream::new(31).stream("latents");
        let n = 600;
        let mut z = Array2::zeros((2 * n, 2));
        let mut a = vec![0u8; 2 * n];
        for i in 0..n {
            z[(i, 0)] = rng.gen_range(-1.0..1.0) - 2.5;
            z[(i, 1)] = rng.gen_range(-1.0..1.0);
            z[(n + i, 0)] = rng.gen_range(-1.0..1.0) + 2.5;
            z[(n + i, 1)] = rng.gen_range(-1.0..1.0);
            a[n + i] = 1;
        }
        let (tz, ta, vz, va) = split_latents(&z.view(), &a, 0.7, 9);
        let config = AttackConfig { hidden: vec![vec![16]], seeds: 2, epochs: 40, ..Default::default() };
        let res = attack_mlp(&tz.view(), &ta, &vz.view(), &va, &[16], &config, 1).unwrap();
        assert!(res.best_balanced_accuracy > 0.97, "separable: {}", res.best_balanced_accuracy);

        // identical distributions: balanced accuracy hovers at chance
        let mut z_same = Array2::zeros((2 * n, 2));
        for i in 0..2 * n {
            z_same[(i, 0)] = rng.gen_range(-1.0..1.0);
            z_same[(i, 1)] = rng.gen_range(-1.0..1.0);
        }
        let (tz, ta, vz, va) = split_latents(&z_same.view(), &a, 0.7, 9);
        let res = attack_mlp(&tz.view(), &ta, &vz.view(), &va, &[16], &config, 1).unwrap();
        assert!(
            (res.best_balanced_accuracy - 0.5).abs() < 0.08,
            "identical: {}",
            res.best_balanced_accuracy
        );
    }

    #[test]
    fn conditional_deltas_skip_empty_cells() {
        let pair = identity_pair(1);
        let b0 = gaussian_model(-1.0, 0);
        let b1 = gaussian_model(1.0, 1);
        let adv = OptimalAdversary::for_flow(&pair, &b0, &b1);
        let z0 = array![[-1.2], [-0.8], [-1.0]];
        let z1 = array![[1.1], [0.9], [1.3]];
        let cond = conditional_deltas(&adv, &z0.view(), &[1, 1, 1], &z1.view(), &[1, 1, 0]).unwrap();
        assert!(cond.delta_given_y0.is_none(), "no y=0 rows in group 0");
        assert!(cond.delta_given_y1.is_some());
    }
}

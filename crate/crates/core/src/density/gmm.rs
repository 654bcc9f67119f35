//! Gaussian mixture estimation with full covariances via EM.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Tape};

const LN_2PI: f64 = 1.8378770664093453;

/// EM settings. `variance_floor` clamps Cholesky pivots so components can
/// never collapse onto single points.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GmmFitConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub variance_floor: f64,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-7, restarts: 5, variance_floor: 1e-6 }
    }
}

/// What happened during a fit: per-iteration mean log-likelihood of the
/// winning restart and how often degeneracy guards fired across restarts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmFitMeta {
    pub iterations: usize,
    pub final_log_likelihood: f64,
    pub log_likelihood_trace: Vec<f64>,
    pub regularization_events: usize,
    pub restarts: usize,
}

/// Mixture of full-covariance Gaussians. Covariances are stored as
/// lower-triangular Cholesky factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Array2<f64>,
    chols: Vec<Array2<f64>>,
}

impl GaussianMixture {
    /// Build directly from parameters. Weights must form a simplex and every
    /// factor must be lower-triangular with positive diagonal.
    pub fn from_parts(weights: Vec<f64>, means: Array2<f64>, chols: Vec<Array2<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.nrows() != k || chols.len() != k {
            return Err(Error::InvalidArgument(
                "component counts of weights, means, and factors must agree".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weights must be strictly positive and sum to 1, got sum {sum}"
            )));
        }
        let d = means.ncols();
        for l in &chols {
            if l.dim() != (d, d) {
                return Err(Error::ShapeMismatch { expected: d, got: l.nrows(), context: "Cholesky factor" });
            }
            for j in 0..d {
                if l[(j, j)] <= 0.0 {
                    return Err(Error::InvalidArgument("Cholesky diagonal must be positive".into()));
                }
            }
        }
        Ok(Self { weights, means, chols })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn chols(&self) -> &[Array2<f64>] {
        &self.chols
    }

    /// Covariance of one component, reconstructed from its factor.
    pub fn covariance(&self, k: usize) -> Array2<f64> {
        let l = &self.chols[k];
        l.dot(&l.t())
    }

    fn component_constants(&self) -> Vec<f64> {
        // ln w_k - d/2 ln(2pi) - sum ln L_jj
        let d = self.dim() as f64;
        self.chols
            .iter()
            .zip(&self.weights)
            .map(|(l, &w)| {
                let log_det: f64 = (0..l.nrows()).map(|j| l[(j, j)].ln()).sum();
                w.ln() - 0.5 * d * LN_2PI - log_det
            })
            .collect()
    }

    /// Per-row, per-component log joint ln(w_k) + ln N(x; mu_k, Sigma_k).
    fn log_joint(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let (n, d) = x.dim();
        assert_eq!(d, self.dim(), "input dimension mismatch");
        let consts = self.component_constants();
        let mut out = Array2::zeros((n, self.k()));
        for k in 0..self.k() {
            let inv_t = inv_lower(&self.chols[k]).reversed_axes();
            let centered = x - &self.means.row(k);
            let w = centered.dot(&inv_t);
            for i in 0..n {
                let q: f64 = w.row(i).iter().map(|v| v * v).sum();
                out[(i, k)] = consts[k] - 0.5 * q;
            }
        }
        out
    }

    /// Exact log-density of each row.
    pub fn log_density_batch(&self, x: &ArrayView2<f64>) -> Array1<f64> {
        let joint = self.log_joint(x);
        joint.map_axis(Axis(1), log_sum_exp)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let v = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        self.log_density_batch(&v)[0]
    }

    /// Differentiable log-density column (B x 1) for a B x d input node.
    /// Gradients flow to the input and, when the factors are bound as
    /// leaves elsewhere, through everything downstream of `x`.
    pub fn log_density_nodes(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let d = tape.value(x).ncols();
        assert_eq!(d, self.dim(), "input dimension mismatch");
        let consts = self.component_constants();
        let mut cols = Vec::with_capacity(self.k());
        for (k, &constant) in consts.iter().enumerate() {
            let neg_mu = self.means.row(k).mapv(|v| -v).insert_axis(Axis(0));
            let neg_mu = tape.constant(neg_mu);
            let centered = tape.add_row(x, neg_mu);
            let inv_t = tape.constant(inv_lower(&self.chols[k]).reversed_axes().to_owned());
            let w = tape.matmul(centered, inv_t);
            let sq = tape.square(w);
            let q = tape.sum_rows(sq);
            let half = tape.scale(q, -0.5);
            cols.push(tape.add_scalar(half, constant));
        }
        let joint = tape.concat_cols(&cols);
        tape.log_sum_exp_rows(joint)
    }

    /// Draw `n` rows, component then within-component noise, from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut cum = Vec::with_capacity(self.k());
        let mut acc = 0.0;
        for &w in &self.weights {
            acc += w;
            cum.push(acc);
        }
        for i in 0..n {
            let u: f64 = rng.gen();
            let k = cum.iter().position(|&c| u <= c).unwrap_or(self.k() - 1);
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let l = &self.chols[k];
            for r in 0..d {
                let mut v = self.means[(k, r)];
                for c in 0..=r {
                    v += l[(r, c)] * z[c];
                }
                out[(i, r)] = v;
            }
        }
        out
    }
}

/// Fit a `k`-component mixture by EM with k-means++ seeding. Runs
/// `config.restarts` independent seedings and keeps the best final
/// log-likelihood. Log-likelihood is checked to be nondecreasing.
pub fn fit_gmm<R: Rng + ?Sized>(
    data: &ArrayView2<f64>,
    k: usize,
    rng: &mut R,
    config: &GmmFitConfig,
) -> Result<(GaussianMixture, GmmFitMeta)> {
    let (n, d) = data.dim();
    if k == 0 {
        return Err(Error::InvalidArgument("component count must be positive".into()));
    }
    if n < k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    if d == 0 {
        return Err(Error::InvalidArgument("data must have at least one column".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training data for the mixture fit".into()));
    }

    let mut best: Option<(GaussianMixture, GmmFitMeta)> = None;
    for _ in 0..config.restarts.max(1) {
        let candidate = fit_once(data, k, rng, config)?;
        let better = match &best {
            None => true,
            Some((_, meta)) => candidate.1.final_log_likelihood > meta.final_log_likelihood,
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn fit_once<R: Rng + ?Sized>(
    data: &ArrayView2<f64>,
    k: usize,
    rng: &mut R,
    config: &GmmFitConfig,
) -> Result<(GaussianMixture, GmmFitMeta)> {
    let (n, d) = data.dim();
    let mut events = 0usize;

    let seeds = kmeanspp_seeds(data, k, rng);
    let mut means = Array2::zeros((k, d));
    for (row, &idx) in seeds.iter().enumerate() {
        means.row_mut(row).assign(&data.row(idx));
    }
    let pooled = sample_covariance(data);
    let (pooled_chol, e) = cholesky_floored(&pooled, config.variance_floor);
    events += e;
    let mut chols = vec![pooled_chol; k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut model = GaussianMixture { weights: weights.clone(), means: means.clone(), chols: chols.clone() };
    let mut trace: Vec<f64> = Vec::new();

    for iter in 0..config.max_iters {
        // E step
        let joint = model.log_joint(data);
        let row_lse = joint.map_axis(Axis(1), log_sum_exp);
        let mean_ll = row_lse.sum() / n as f64;
        if !mean_ll.is_finite() {
            return Err(Error::Diverged { epoch: iter, reason: "non-finite log-likelihood in EM".into() });
        }
        if let Some(&prev) = trace.last() {
            if mean_ll < prev - 1e-9 * (1.0 + prev.abs()) {
                return Err(Error::Diverged {
                    epoch: iter,
                    reason: format!("log-likelihood decreased from {prev} to {mean_ll}"),
                });
            }
            if mean_ll - prev < config.tol {
                trace.push(mean_ll);
                break;
            }
        }
        trace.push(mean_ll);

        let mut resp = joint;
        for (mut row, &lse) in resp.rows_mut().into_iter().zip(row_lse.iter()) {
            row.mapv_inplace(|v| (v - lse).exp());
        }

        // M step
        let nk = resp.sum_axis(Axis(0));
        for c in 0..k {
            if nk[c] < 1e-9 {
                // dead component: reseed at the worst-explained point
                let worst = row_lse
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                means.row_mut(c).assign(&data.row(worst));
                chols[c] = model.chols[c].clone();
                weights[c] = 1.0 / n as f64;
                events += 1;
                continue;
            }
            weights[c] = nk[c] / n as f64;
            let mut mu = Array1::<f64>::zeros(d);
            for i in 0..n {
                mu.scaled_add(resp[(i, c)], &data.row(i));
            }
            mu /= nk[c];
            let mut cov = Array2::<f64>::zeros((d, d));
            for i in 0..n {
                let r = resp[(i, c)];
                if r == 0.0 {
                    continue;
                }
                let diff = &data.row(i) - &mu;
                for a in 0..d {
                    for b in 0..=a {
                        cov[(a, b)] += r * diff[a] * diff[b];
                    }
                }
            }
            for a in 0..d {
                for b in 0..a {
                    cov[(a, b)] /= nk[c];
                    cov[(b, a)] = cov[(a, b)];
                }
                cov[(a, a)] /= nk[c];
            }
            let (l, e) = cholesky_floored(&cov, config.variance_floor);
            events += e;
            means.row_mut(c).assign(&mu);
            chols[c] = l;
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        model = GaussianMixture { weights: weights.clone(), means: means.clone(), chols: chols.clone() };
    }

    let final_ll = *trace.last().expect("at least one iteration");
    let meta = GmmFitMeta {
        iterations: trace.len(),
        final_log_likelihood: final_ll,
        log_likelihood_trace: trace,
        regularization_events: events,
        restarts: 1,
    };
    Ok((model, meta))
}

fn kmeanspp_seeds<R: Rng + ?Sized>(data: &ArrayView2<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = data.nrows();
    let mut seeds = Vec::with_capacity(k);
    seeds.push(rng.gen_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(seeds[0]))).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        seeds.push(next);
        for (i, best) in d2.iter_mut().enumerate() {
            let dist = sq_dist(data.row(i), data.row(next));
            if dist < *best {
                *best = dist;
            }
        }
    }
    seeds
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sample_covariance(data: &ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = data.dim();
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let mut cov = Array2::zeros((d, d));
    for i in 0..n {
        let diff = &data.row(i) - &mean;
        for a in 0..d {
            for b in 0..=a {
                cov[(a, b)] += diff[a] * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] /= n as f64;
            cov[(b, a)] = cov[(a, b)];
        }
        cov[(a, a)] /= n as f64;
    }
    cov
}

/// Lower Cholesky factor with pivots clamped to `floor`. Returns the factor
/// and how many pivots needed clamping.
fn cholesky_floored(cov: &Array2<f64>, floor: f64) -> (Array2<f64>, usize) {
    let d = cov.nrows();
    let mut l = Array2::<f64>::zeros((d, d));
    let mut events = 0usize;
    for j in 0..d {
        let mut pivot = cov[(j, j)];
        for c in 0..j {
            pivot -= l[(j, c)] * l[(j, c)];
        }
        if pivot < floor {
            pivot = floor;
            events += 1;
        }
        l[(j, j)] = pivot.sqrt();
        for r in (j + 1)..d {
            let mut v = cov[(r, j)];
            for c in 0..j {
                v -= l[(r, c)] * l[(j, c)];
            }
            l[(r, j)] = v / l[(j, j)];
        }
    }
    (l, events)
}

/// Inverse of a lower-triangular matrix by forward substitution.
fn inv_lower(l: &Array2<f64>) -> Array2<f64> {
    let d = l.nrows();
    let mut inv = Array2::<f64>::zeros((d, d));
    for col in 0..d {
        inv[(col, col)] = 1.0 / l[(col, col)];
        for row in (col + 1)..d {
            let mut s = 0.0;
            for k in col..row {
                s += l[(row, k)] * inv[(k, col)];
            }
            inv[(row, col)] = -s / l[(row, row)];
        }
    }
    inv
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

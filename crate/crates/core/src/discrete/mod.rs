//! Bijective encoders for finite categorical domains: probability-sorted
//! matching, a label-aware variant, and randomized mixing between the two.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::AutoregressiveCategorical;
use crate::error::{Error, Result};

/// Enumerated categorical domain with index maps in both directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "FiniteDomainData", try_from = "FiniteDomainData")]
pub struct FiniteDomain {
    points: Vec<Vec<u32>>,
    cardinalities: Vec<usize>,
    exhaustive: bool,
    index: BTreeMap<Vec<u32>, usize>,
}

#[derive(Serialize, Deserialize)]
struct FiniteDomainData {
    points: Vec<Vec<u32>>,
    cardinalities: Vec<usize>,
    exhaustive: bool,
}

impl From<FiniteDomain> for FiniteDomainData {
    fn from(d: FiniteDomain) -> Self {
        Self { points: d.points, cardinalities: d.cardinalities, exhaustive: d.exhaustive }
    }
}

impl TryFrom<FiniteDomainData> for FiniteDomain {
    type Error = Error;

    fn try_from(d: FiniteDomainData) -> Result<Self> {
        FiniteDomain::from_points(d.points, d.cardinalities, d.exhaustive)
    }
}

impl FiniteDomain {
    /// Every point of the product domain, in lexicographic order.
    pub fn exhaustive(cardinalities: &[usize], cap: usize) -> Result<Self> {
        if cardinalities.is_empty() || cardinalities.contains(&0) {
            return Err(Error::InvalidArgument("cardinalities must be positive".into()));
        }
        let size: usize = cardinalities.iter().product();
        if size > cap {
            return Err(Error::InvalidArgument(format!(
                "product domain has {size} points, cap is {cap}"
            )));
        }
        let mut points = Vec::with_capacity(size);
        let mut point = vec![0u32; cardinalities.len()];
        'outer: loop {
            points.push(point.clone());
            let mut col = cardinalities.len();
            loop {
                if col == 0 {
                    break 'outer;
                }
                col -= 1;
                point[col] += 1;
                if (point[col] as usize) < cardinalities[col] {
                    break;
                }
                point[col] = 0;
            }
        }
        Self::from_points(points, cardinalities.to_vec(), true)
    }

    /// Observed-support subset. `exhaustive` must be false unless the points
    /// cover the whole product domain.
    pub fn from_points(points: Vec<Vec<u32>>, cardinalities: Vec<usize>, exhaustive: bool) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("domain needs at least one point".into()));
        }
        let mut index = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            if p.len() != cardinalities.len() {
                return Err(Error::ShapeMismatch {
                    expected: cardinalities.len(),
                    got: p.len(),
                    context: "domain point width",
                });
            }
            for (col, (&v, &card)) in p.iter().zip(&cardinalities).enumerate() {
                if v as usize >= card {
                    return Err(Error::ValueOutOfRange { column: col, value: v as usize, cardinality: card });
                }
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate domain point {p:?}")));
            }
        }
        let full: usize = cardinalities.iter().product();
        if exhaustive && points.len() != full {
            return Err(Error::InvalidArgument(format!(
                "{} points cannot be exhaustive over a {full}-point product domain",
                points.len()
            )));
        }
        Ok(Self { points, cardinalities, exhaustive, index })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_exhaustive(&self) -> bool {
        self.exhaustive
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn point(&self, idx: usize) -> &[u32] {
        &self.points[idx]
    }

    pub fn points(&self) -> &[Vec<u32>] {
        &self.points
    }

    pub fn index_of(&self, x: &[u32]) -> Option<usize> {
        self.index.get(x).copied()
    }

    /// Evaluate a fitted categorical model over every point. Returns the
    /// probability vector and the mass it covers (1 when exhaustive).
    pub fn evaluate(&self, model: &AutoregressiveCategorical) -> Result<(Vec<f64>, f64)> {
        let mut p = Vec::with_capacity(self.len());
        for point in &self.points {
            p.push(model.log_pmf(point)?.exp());
        }
        let covered: f64 = p.iter().sum();
        Ok((p, covered))
    }
}

/// Permutation-based encoder pair for a finite domain: the identity for
/// group 0 and a mixture of two permutations for group 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteMatching {
    domain: FiniteDomain,
    /// distance-optimal permutation (source index -> target index)
    pi: Vec<usize>,
    /// label-aware permutation; group 1 uses it with probability 1 - gamma
    pi_label: Option<Vec<usize>>,
    gamma: f64,
    p0: Vec<f64>,
    p1: Vec<f64>,
    /// label classes whose per-class matching fell back to index order
    /// because one group had no mass there
    degenerate_classes: Vec<u8>,
}

fn check_probabilities(domain: &FiniteDomain, p: &[f64], name: &str) -> Result<()> {
    if p.len() != domain.len() {
        return Err(Error::DomainMismatch(format!(
            "{name} has {} entries for a {}-point domain",
            p.len(),
            domain.len()
        )));
    }
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument(format!("{name} must be finite and nonnegative")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{name} sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Indices sorted by ascending probability, ties broken by domain index.
fn sorted_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).expect("finite").then(a.cmp(&b)));
    order
}

/// Match the k-th smallest-p1 point to the k-th smallest-p0 point. Restricted
/// to `subset` when given (label-split classes).
fn sorted_matching_on(p0: &[f64], p1: &[f64], subset: Option<&[usize]>) -> Vec<(usize, usize)> {
    match subset {
        None => {
            let o0 = sorted_order(p0);
            let o1 = sorted_order(p1);
            o1.into_iter().zip(o0).collect()
        }
        Some(idx) => {
            let mut by0: Vec<usize> = idx.to_vec();
            by0.sort_by(|&a, &b| p0[a].partial_cmp(&p0[b]).expect("finite").then(a.cmp(&b)));
            let mut by1: Vec<usize> = idx.to_vec();
            by1.sort_by(|&a, &b| p1[a].partial_cmp(&p1[b]).expect("finite").then(a.cmp(&b)));
            by1.into_iter().zip(by0).collect()
        }
    }
}

/// Lemma-style distance-optimal matching: sort both distributions ascending
/// and pair equal ranks.
pub fn optimal_matching(domain: &FiniteDomain, p0: &[f64], p1: &[f64]) -> Result<DiscreteMatching> {
    check_probabilities(domain, p0, "p0")?;
    check_probabilities(domain, p1, "p1")?;
    let mut pi = vec![0usize; domain.len()];
    for (src, dst) in sorted_matching_on(p0, p1, None) {
        pi[src] = dst;
    }
    Ok(DiscreteMatching {
        domain: domain.clone(),
        pi,
        pi_label: None,
        gamma: 1.0,
        p0: p0.to_vec(),
        p1: p1.to_vec(),
        degenerate_classes: Vec::new(),
    })
}

/// Distance-optimal matching within each predicted-label class, with
/// per-class renormalization implicit in the rank pairing. A class carrying
/// zero mass in one group still gets a deterministic within-class matching
/// (ties fall back to index order) and is flagged as degenerate.
pub fn label_split_matching(
    domain: &FiniteDomain,
    p0: &[f64],
    p1: &[f64],
    labels: &[u8],
    gamma: f64,
) -> Result<DiscreteMatching> {
    check_probabilities(domain, p0, "p0")?;
    check_probabilities(domain, p1, "p1")?;
    if labels.len() != domain.len() {
        return Err(Error::DomainMismatch(format!(
            "{} labels for a {}-point domain",
            labels.len(),
            domain.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0,1], got {gamma}")));
    }

    let global = optimal_matching(domain, p0, p1)?;
    let mut pi_label = vec![0usize; domain.len()];
    let mut degenerate = Vec::new();
    let classes: Vec<u8> = {
        let mut c: Vec<u8> = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    for &class in &classes {
        let members: Vec<usize> = (0..domain.len()).filter(|&i| labels[i] == class).collect();
        let mass0: f64 = members.iter().map(|&i| p0[i]).sum();
        let mass1: f64 = members.iter().map(|&i| p1[i]).sum();
        if mass0 <= 0.0 || mass1 <= 0.0 {
            degenerate.push(class);
        }
        for (src, dst) in sorted_matching_on(p0, p1, Some(&members)) {
            pi_label[src] = dst;
        }
    }

    Ok(DiscreteMatching {
        domain: domain.clone(),
        pi: global.pi,
        pi_label: Some(pi_label),
        gamma,
        p0: p0.to_vec(),
        p1: p1.to_vec(),
        degenerate_classes: degenerate,
    })
}

impl DiscreteMatching {
    /// Build from an explicit permutation (gamma = 1, no label variant).
    pub fn with_permutation(
        domain: &FiniteDomain,
        pi: Vec<usize>,
        p0: &[f64],
        p1: &[f64],
    ) -> Result<Self> {
        check_probabilities(domain, p0, "p0")?;
        check_probabilities(domain, p1, "p1")?;
        if !is_permutation(&pi, domain.len()) {
            return Err(Error::InvalidArgument("pi is not a bijection on the domain".into()));
        }
        Ok(Self {
            domain: domain.clone(),
            pi,
            pi_label: None,
            gamma: 1.0,
            p0: p0.to_vec(),
            p1: p1.to_vec(),
            degenerate_classes: Vec::new(),
        })
    }

    pub fn domain(&self) -> &FiniteDomain {
        &self.domain
    }

    pub fn permutation(&self) -> &[usize] {
        &self.pi
    }

    pub fn label_permutation(&self) -> Option<&[usize]> {
        self.pi_label.as_deref()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0,1], got {gamma}")));
        }
        self.gamma = gamma;
        Ok(())
    }

    pub fn degenerate_classes(&self) -> &[u8] {
        &self.degenerate_classes
    }

    /// Base pmf of one group over the domain, in domain index order.
    pub fn base_pmf(&self, a: u8) -> &[f64] {
        if a == 0 {
            &self.p0
        } else {
            &self.p1
        }
    }

    /// Encode one point. Group 0 is the identity; group 1 applies the
    /// distance-optimal permutation with probability gamma, otherwise the
    /// label-aware one.
    pub fn encode<R: Rng + ?Sized>(&self, x: &[u32], a: u8, rng: &mut R) -> Result<Vec<u32>> {
        let idx = self.domain.index_of(x).ok_or(Error::OutOfDomain)?;
        if a == 0 {
            return Ok(x.to_vec());
        }
        let use_optimal = match &self.pi_label {
            None => true,
            Some(_) if self.gamma >= 1.0 => true,
            Some(_) if self.gamma <= 0.0 => false,
            Some(_) => rng.gen::<f64>() < self.gamma,
        };
        let target = if use_optimal {
            self.pi[idx]
        } else {
            self.pi_label.as_ref().expect("checked")[idx]
        };
        Ok(self.domain.point(target).to_vec())
    }

    /// Latent distributions induced by the encoders: group 0 keeps p0,
    /// group 1 pushes p1 through the permutation mixture.
    pub fn latent_distributions(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.domain.len();
        let mut z1 = vec![0.0; m];
        for (src, &dst) in self.pi.iter().enumerate() {
            z1[dst] += self.gamma * self.p1[src];
        }
        match &self.pi_label {
            Some(pl) => {
                for (src, &dst) in pl.iter().enumerate() {
                    z1[dst] += (1.0 - self.gamma) * self.p1[src];
                }
            }
            None => {
                if self.gamma < 1.0 {
                    // no label variant: the optimal permutation carries all mass
                    for (src, &dst) in self.pi.iter().enumerate() {
                        z1[dst] += (1.0 - self.gamma) * self.p1[src];
                    }
                }
            }
        }
        (self.p0.clone(), z1)
    }

    /// Exact statistical distance between the latent distributions,
    /// 0.5 * sum_z |p_Z0(z) - p_Z1(z)|.
    pub fn statistical_distance(&self) -> f64 {
        let (z0, z1) = self.latent_distributions();
        0.5 * z0.iter().zip(&z1).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

fn is_permutation(pi: &[usize], m: usize) -> bool {
    if pi.len() != m {
        return false;
    }
    let mut seen = vec![false; m];
    for &t in pi {
        if t >= m || seen[t] {
            return false;
        }
        seen[t] = true;
    }
    true
}

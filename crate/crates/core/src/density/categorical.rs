//! Exact autoregressive model for small categorical domains: one smoothed
//! conditional table per column, keyed by the full prefix.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-column conditional probability tables with Laplace smoothing.
///
/// Column `i` is modeled as p(x_i | x_0..x_{i-1}) where the conditioning
/// prefix is the exact observed history. Prefixes never seen in training
/// fall back to the uniform distribution over that column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoregressiveCategorical {
    cardinalities: Vec<usize>,
    alpha: f64,
    // per column: (prefix -> probability row), sorted by prefix
    tables: Vec<Vec<(Vec<u32>, Vec<f64>)>>,
}

impl AutoregressiveCategorical {
    pub fn columns(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of points in the full product domain.
    pub fn domain_size(&self) -> usize {
        self.cardinalities.iter().product()
    }

    fn conditional(&self, col: usize, prefix: &[u32]) -> Vec<f64> {
        let table = &self.tables[col];
        match table.binary_search_by(|(p, _)| p.as_slice().cmp(prefix)) {
            Ok(idx) => table[idx].1.clone(),
            Err(_) => {
                let d = self.cardinalities[col];
                vec![1.0 / d as f64; d]
            }
        }
    }

    fn check_point(&self, x: &[u32]) -> Result<()> {
        if x.len() != self.columns() {
            return Err(Error::ShapeMismatch {
                expected: self.columns(),
                got: x.len(),
                context: "categorical point width",
            });
        }
        for (col, (&v, &card)) in x.iter().zip(&self.cardinalities).enumerate() {
            if v as usize >= card {
                return Err(Error::ValueOutOfRange { column: col, value: v as usize, cardinality: card });
            }
        }
        Ok(())
    }

    /// Exact log probability of one point.
    pub fn log_pmf(&self, x: &[u32]) -> Result<f64> {
        self.check_point(x)?;
        let mut total = 0.0;
        for col in 0..self.columns() {
            let p = self.conditional(col, &x[..col]);
            total += p[x[col] as usize].ln();
        }
        Ok(total)
    }

    /// Draw `n` rows column by column.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<u32>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row: Vec<u32> = Vec::with_capacity(self.columns());
            for col in 0..self.columns() {
                let p = self.conditional(col, &row);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = p.len() - 1;
                for (v, &prob) in p.iter().enumerate() {
                    acc += prob;
                    if u <= acc {
                        pick = v;
                        break;
                    }
                }
                row.push(pick as u32);
            }
            out.push(row);
        }
        out
    }

    /// Every point of the product domain with its probability, in
    /// lexicographic order. Errors when the domain exceeds `cap` points.
    pub fn enumerate_pmf(&self, cap: usize) -> Result<Vec<(Vec<u32>, f64)>> {
        let size = self.domain_size();
        if size > cap {
            return Err(Error::InvalidArgument(format!(
                "domain has {size} points, enumeration capped at {cap}"
            )));
        }
        let mut out = Vec::with_capacity(size);
        let mut point = vec![0u32; self.columns()];
        loop {
            let p = self.log_pmf(&point)?.exp();
            out.push((point.clone(), p));
            // odometer increment
            let mut col = self.columns();
            loop {
                if col == 0 {
                    return Ok(out);
                }
                col -= 1;
                point[col] += 1;
                if (point[col] as usize) < self.cardinalities[col] {
                    break;
                }
                point[col] = 0;
            }
        }
    }
}

/// Fit smoothed conditional tables from integer-coded rows. Every conditional
/// probability is `(count + alpha) / (total + alpha * cardinality)`.
pub fn fit_categorical(
    data: &[Vec<u32>],
    cardinalities: &[usize],
    alpha: f64,
) -> Result<AutoregressiveCategorical> {
    if data.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if cardinalities.contains(&0) {
        return Err(Error::InvalidArgument("every column needs at least one category".into()));
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!("smoothing count must be positive, got {alpha}")));
    }
    let m = cardinalities.len();
    for row in data {
        if row.len() != m {
            return Err(Error::ShapeMismatch { expected: m, got: row.len(), context: "categorical row width" });
        }
        for (col, (&v, &card)) in row.iter().zip(cardinalities).enumerate() {
            if v as usize >= card {
                return Err(Error::ValueOutOfRange { column: col, value: v as usize, cardinality: card });
            }
        }
    }

    let mut tables = Vec::with_capacity(m);
    for col in 0..m {
        let d = cardinalities[col];
        let mut counts: BTreeMap<Vec<u32>, Vec<f64>> = BTreeMap::new();
        for row in data {
            let entry = counts.entry(row[..col].to_vec()).or_insert_with(|| vec![0.0; d]);
            entry[row[col] as usize] += 1.0;
        }
        let table: Vec<(Vec<u32>, Vec<f64>)> = counts
            .into_iter()
            .map(|(prefix, cnt)| {
                let total: f64 = cnt.iter().sum();
                let denom = total + alpha * d as f64;
                let probs: Vec<f64> = cnt.iter().map(|&c| (c + alpha) / denom).collect();
                (prefix, probs)
            })
            .collect();
        tables.push(table);
    }

    Ok(AutoregressiveCategorical { cardinalities: cardinalities.to_vec(), alpha, tables })
}

/// Convenience for integer-coded matrices stored as floats. Every entry must
/// be a nonnegative integer below its column cardinality.
pub fn rows_from_f64(data: &ArrayView2<f64>) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(data.nrows());
    for row in data.rows() {
        let mut r = Vec::with_capacity(row.len());
        for (col, &v) in row.iter().enumerate() {
            if !v.is_finite() || v.fract() != 0.0 || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "column {col} holds {v}, expected a nonnegative integer code"
                )));
            }
            r.push(v as u32);
        }
        out.push(r);
    }
    Ok(out)
}

/// Integer-coded rows as a float matrix (inverse of [`rows_from_f64`]).
pub fn rows_to_f64(rows: &[Vec<u32>], width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[(i, j)] = v as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeedStream;

    #[test]
    fn binary_column_smoothing() {
        // counts {0: 3, 1: 1}, alpha 1 -> (3+1)/(4+2), (1+1)/(4+2)
        let data = vec![vec![0], vec![0], vec![0], vec![1]];
        let model = fit_categorical(&data, &[2], 1.0).unwrap();
        assert!((model.log_pmf(&[0]).unwrap().exp() - 4.0 / 6.0).abs() < 1e-12);
        assert!((model.log_pmf(&[1]).unwrap().exp() - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn vanishing_smoothing_recovers_empirical_frequencies() {
        let data = vec![vec![0, 1], vec![0, 0], vec![1, 1], vec![0, 1]];
        let model = fit_categorical(&data, &[2, 2], 1e-12).unwrap();
        // p(x0=0) = 3/4; p(x1=1 | x0=0) = 2/3
        let p = model.log_pmf(&[0, 1]).unwrap().exp();
        assert!((p - 0.75 * (2.0 / 3.0)).abs() < 1e-9, "p {p}");
    }

    #[test]
    fn joint_sums_to_one() {
        let data = vec![vec![0, 2], vec![1, 0], vec![1, 1], vec![0, 0], vec![1, 2]];
        let model = fit_categorical(&data, &[2, 3], 1.0).unwrap();
        let total: f64 = model.enumerate_pmf(100).unwrap().iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn chained_conditionals_match_enumeration_oracle() {
        let mut rng = SeedStream::new(42).stream("rows");
        let cards = [2usize, 3, 2];
        let data: Vec<Vec<u32>> = (0..200)
            .map(|_| cards.iter().map(|&d| rng.gen_range(0..d as u32)).collect())
            .collect();
        let model = fit_categorical(&data, &cards, 1.0).unwrap();

        // oracle: smoothed conditionals recomputed by brute force per point
        let oracle = |x: &[u32]| -> f64 {
            let mut logp = 0.0;
            for col in 0..3 {
                let matches: Vec<&Vec<u32>> =
                    data.iter().filter(|r| r[..col] == x[..col]).collect();
                let total = matches.len() as f64;
                let count = matches.iter().filter(|r| r[col] == x[col]).count() as f64;
                logp += ((count + 1.0) / (total + cards[col] as f64)).ln();
            }
            logp
        };
        for (point, p) in model.enumerate_pmf(100).unwrap() {
            assert!((p.ln() - oracle(&point)).abs() < 1e-12, "mismatch at {point:?}");
        }
    }

    #[test]
    fn unseen_prefix_is_uniform() {
        // prefix x0 = 1 never occurs
        let data = vec![vec![0, 0], vec![0, 2], vec![0, 1]];
        let model = fit_categorical(&data, &[2, 3], 1.0).unwrap();
        for j in 0..3u32 {
            let joint = model.log_pmf(&[1, j]).unwrap().exp();
            let p0 = model.log_pmf(&[1, 0]).unwrap().exp();
            assert!((joint - p0).abs() < 1e-15, "conditional must be flat");
        }
        let total: f64 = model.enumerate_pmf(100).unwrap().iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_value_is_an_error() {
        let data = vec![vec![0], vec![1]];
        let model = fit_categorical(&data, &[2], 1.0).unwrap();
        let err = model.log_pmf(&[2]).unwrap_err();
        assert!(matches!(err, Error::ValueOutOfRange { column: 0, value: 2, cardinality: 2 }));
    }

    #[test]
    fn sampling_frequency_matches_model() {
        let data = vec![vec![0], vec![0], vec![0], vec![1]];
        // alpha 1 gives p(0) = 4/6; use a bigger dataset for p(0) = 0.75
        let mut big = Vec::new();
        for _ in 0..7500 {
            big.push(vec![0]);
        }
        for _ in 0..2500 {
            big.push(vec![1]);
        }
        let model = fit_categorical(&big, &[2], 1.0).unwrap();
        let mut rng = SeedStream::new(8).stream("sample");
        let samples = model.sample(100_000, &mut rng);
        let freq0 = samples.iter().filter(|r| r[0] == 0).count() as f64 / 100_000.0;
        assert!((freq0 - 0.75).abs() < 0.01, "freq {freq0}");
        drop(data);
    }

    #[test]
    fn same_seed_gives_identical_samples() {
        let data = vec![vec![0, 1], vec![1, 0], vec![1, 1]];
        let model = fit_categorical(&data, &[2, 2], 1.0).unwrap();
        let a = model.sample(32, &mut SeedStream::new(6).stream("s"));
        let b = model.sample(32, &mut SeedStream::new(6).stream("s"));
        assert_eq!(a, b);
    }

    #[test]
    fn conditional_rows_sum_to_one_and_stay_positive() {
        let data = vec![vec![0, 0, 1], vec![1, 2, 0], vec![0, 1, 1], vec![1, 0, 0]];
        let model = fit_categorical(&data, &[2, 3, 2], 1.0).unwrap();
        for table in &model.tables {
            for (_, row) in table {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let err = fit_categorical(&[], &[2], 1.0).unwrap_err();
        assert!(matches!(err, Error::TooFewSamples { .. }));
    }

    #[test]
    fn f64_round_trip() {
        let rows = vec![vec![0u32, 2], vec![1, 0]];
        let m = rows_to_f64(&rows, 2);
        assert_eq!(rows_from_f64(&m.view()).unwrap(), rows);
        let bad = ndarray::array![[0.5, 1.0]];
        assert!(rows_from_f64(&bad.view()).is_err());
    }
}

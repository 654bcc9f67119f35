//! Dataset preparation: a two-group synthetic generator, loaders for four
//! tabular benchmark datasets, deterministic splits, train-fit
//! discretization, an on-disk cache, and a sanity check that column pruning
//! keeps the prediction task learnable.

pub mod loaders;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Standardizer;
use crate::nn::{bce_with_logits_mean, MlpModel, MlpSpec};
use crate::numerics::adam::{adam_step, AdamHyper, AdamState};
use crate::numerics::rng::SeedStream;
use crate::numerics::tape::Tape;

pub use loaders::{load_adult, load_compas, load_crime, load_law, RawColumn, RawManifest};

/// Which portion of a dataset a matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Value representation of one prepared feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ColumnKind {
    /// Real-valued, stored as-is.
    Continuous,
    /// Integer codes `0..levels.len()`; `levels[code]` is the raw value.
    Categorical { levels: Vec<String> },
    /// Integer codes `0..=edges.len()` from cut points fit on the train split.
    Binned { edges: Vec<f64> },
}

impl ColumnKind {
    /// Number of distinct codes; `None` for continuous columns.
    pub fn cardinality(&self) -> Option<usize> {
        match self {
            ColumnKind::Continuous => None,
            ColumnKind::Categorical { levels } => Some(levels.len()),
            ColumnKind::Binned { edges } => Some(edges.len() + 1),
        }
    }
}

/// Name and representation of one kept column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
}

/// Column layout shared by the three splits of one prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub dataset: String,
    pub columns: Vec<ColumnSchema>,
    /// How the binary group tag was derived from the raw records.
    pub group_rule: String,
    /// How the binary label was derived from the raw records.
    pub label_rule: String,
}

impl DatasetSchema {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// Names of the kept columns, in matrix order.
    pub fn kept_columns(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// True when every column is integer-coded.
    pub fn is_categorical(&self) -> bool {
        !self.columns.is_empty()
            && self.columns.iter().all(|c| c.kind.cardinality().is_some())
    }

    /// Per-column code counts when the whole schema is integer-coded.
    pub fn cardinalities(&self) -> Option<Vec<usize>> {
        self.columns.iter().map(|c| c.kind.cardinality()).collect()
    }
}

/// One split: features (continuous values or integer codes stored as f64),
/// a binary group tag, and a binary label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub x: Array2<f64>,
    pub a: Vec<u8>,
    pub y: Vec<u8>,
    pub split: Split,
    pub schema: DatasetSchema,
}

impl TabularDataset {
    pub fn new(
        x: Array2<f64>,
        a: Vec<u8>,
        y: Vec<u8>,
        split: Split,
        schema: DatasetSchema,
    ) -> Result<Self> {
        let d = Self { x, a, y, split, schema };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        if self.a.len() != self.x.nrows() {
            return Err(Error::ShapeMismatch {
                expected: self.x.nrows(),
                got: self.a.len(),
                context: "group tags",
            });
        }
        if self.y.len() != self.x.nrows() {
            return Err(Error::ShapeMismatch {
                expected: self.x.nrows(),
                got: self.y.len(),
                context: "labels",
            });
        }
        if self.x.ncols() != self.schema.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.schema.dim(),
                got: self.x.ncols(),
                context: "schema columns",
            });
        }
        if self.a.iter().chain(&self.y).any(|&v| v > 1) {
            return Err(Error::InvalidArgument(
                "group tags and labels must be 0 or 1".into(),
            ));
        }
        for (j, col) in self.schema.columns.iter().enumerate() {
            for (i, &v) in self.x.column(j).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{} row {i} column {} ({})",
                        self.split.as_str(),
                        j,
                        col.name
                    )));
                }
                if let Some(card) = col.kind.cardinality() {
                    if v.fract() != 0.0 || v < 0.0 || v >= card as f64 {
                        return Err(Error::ValueOutOfRange {
                            column: j,
                            value: v as usize,
                            cardinality: card,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows and labels belonging to one group.
    pub fn group_rows(&self, group: u8) -> (Array2<f64>, Vec<u8>) {
        let idx: Vec<usize> = self
            .a
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(i, _)| i)
            .collect();
        let x = self.x.select(Axis(0), &idx);
        let y = idx.iter().map(|&i| self.y[i]).collect();
        (x, y)
    }

    pub fn stats(&self) -> SplitStats {
        let n = self.len();
        let n1 = self.a.iter().filter(|&&g| g == 1).count();
        let rate = |group: u8| {
            let rows: Vec<usize> = (0..n).filter(|&i| self.a[i] == group).collect();
            if rows.is_empty() {
                None
            } else {
                Some(rows.iter().filter(|&&i| self.y[i] == 1).count() as f64 / rows.len() as f64)
            }
        };
        SplitStats {
            rows: n,
            group1_share: if n == 0 { 0.0 } else { n1 as f64 / n as f64 },
            positive_rate_group0: rate(0),
            positive_rate_group1: rate(1),
            positive_rate: if n == 0 {
                0.0
            } else {
                self.y.iter().filter(|&&v| v == 1).count() as f64 / n as f64
            },
        }
    }
}

/// Row counts and group/label shares of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub rows: usize,
    pub group1_share: f64,
    pub positive_rate_group0: Option<f64>,
    pub positive_rate_group1: Option<f64>,
    pub positive_rate: f64,
}

/// Train/validation/test triple with one shared schema.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTriple {
    pub train: TabularDataset,
    pub validation: TabularDataset,
    pub test: TabularDataset,
}

impl DatasetTriple {
    pub fn new(
        train: TabularDataset,
        validation: TabularDataset,
        test: TabularDataset,
    ) -> Result<Self> {
        if train.schema != validation.schema || train.schema != test.schema {
            return Err(Error::DomainMismatch(
                "splits of one dataset must share a schema".into(),
            ));
        }
        Ok(Self { train, validation, test })
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.train.schema
    }

    pub fn splits(&self) -> [&TabularDataset; 3] {
        [&self.train, &self.validation, &self.test]
    }
}

/// The five datasets the loaders understand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Adult,
    Compas,
    Crime,
    Law,
    Synthetic,
}

impl DatasetName {
    pub const ALL: [DatasetName; 5] = [
        DatasetName::Adult,
        DatasetName::Compas,
        DatasetName::Crime,
        DatasetName::Law,
        DatasetName::Synthetic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Adult => "adult",
            DatasetName::Compas => "compas",
            DatasetName::Crime => "crime",
            DatasetName::Law => "law",
            DatasetName::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adult" => Ok(DatasetName::Adult),
            "compas" => Ok(DatasetName::Compas),
            "crime" => Ok(DatasetName::Crime),
            "law" => Ok(DatasetName::Law),
            "synthetic" => Ok(DatasetName::Synthetic),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset {other:?} (expected adult, compas, crime, law, or synthetic)"
            ))),
        }
    }
}

/// Where raw files live and how loading is randomized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadConfig {
    /// Directory holding the raw files named by the dataset manifests.
    pub root: PathBuf,
    /// Seed for split assignment and the synthetic generator.
    pub seed: u64,
    /// Bin count for discretized continuous columns.
    pub quantile_bins: usize,
    /// Rows per group for the synthetic dataset (across all splits).
    pub synthetic_n: usize,
}

impl LoadConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), seed: 7, quantile_bins: 5, synthetic_n: 4000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.quantile_bins < 2 {
            return Err(Error::InvalidArgument(format!(
                "quantile_bins must be at least 2, got {}",
                self.quantile_bins
            )));
        }
        if self.synthetic_n < 5 {
            return Err(Error::InvalidArgument(format!(
                "synthetic_n must be at least 5, got {}",
                self.synthetic_n
            )));
        }
        Ok(())
    }
}

/// Load the pruned, model-ready variant of a dataset.
pub fn load_dataset(name: DatasetName, config: &LoadConfig) -> Result<DatasetTriple> {
    config.validate()?;
    match name {
        DatasetName::Adult => loaders::load_adult(config),
        DatasetName::Compas => loaders::load_compas(config),
        DatasetName::Crime => loaders::load_crime(config),
        DatasetName::Law => loaders::load_law(config),
        DatasetName::Synthetic => load_synthetic(config.synthetic_n, config.seed),
    }
}

/// Load the wide variant of a dataset, keeping every usable raw column.
/// The synthetic dataset has no wide variant and loads identically.
pub fn load_original(name: DatasetName, config: &LoadConfig) -> Result<DatasetTriple> {
    config.validate()?;
    match name {
        DatasetName::Adult => loaders::load_adult_original(config),
        DatasetName::Compas => loaders::load_compas_original(config),
        DatasetName::Crime => loaders::load_crime_original(config),
        DatasetName::Law => loaders::load_law_original(config),
        DatasetName::Synthetic => load_synthetic(config.synthetic_n, config.seed),
    }
}

/// Split sizes (train, validation, test): a fifth of the rows (rounded up)
/// held out for testing, then a fifth of the remainder (rounded up) for
/// validation.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n.div_ceil(5);
    let pool = n - test;
    let val = pool.div_ceil(5);
    (pool - val, val, test)
}

/// Seed-deterministic row assignment for the three splits. Each index list
/// comes back sorted.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (_, val, test) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).stream("split"));
    let mut test_idx: Vec<usize> = order[..test].to_vec();
    let mut val_idx: Vec<usize> = order[test..test + val].to_vec();
    let mut train_idx: Vec<usize> = order[test + val..].to_vec();
    test_idx.sort_unstable();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    (train_idx, val_idx, test_idx)
}

/// Validation carve-out for datasets that ship a fixed test file: a fifth
/// of the pool (rounded up) becomes validation.
pub fn validation_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let val = n.div_ceil(5);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).stream("split"));
    let mut val_idx: Vec<usize> = order[..val].to_vec();
    let mut train_idx: Vec<usize> = order[val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    (train_idx, val_idx)
}

fn synthetic_schema() -> DatasetSchema {
    DatasetSchema {
        dataset: "synthetic".into(),
        columns: vec![
            ColumnSchema { name: "x1".into(), kind: ColumnKind::Continuous },
            ColumnSchema { name: "x2".into(), kind: ColumnKind::Continuous },
        ],
        group_rule: "group 0 sampled around x2 = +3, group 1 around x2 = -3".into(),
        label_rule: "y = 1 exactly when x1 and x2 share a sign".into(),
    }
}

fn synthetic_split(n_per_group: usize, seed: u64, split: Split) -> Result<TabularDataset> {
    let mut rng = SeedStream::new(seed).stream("draw");
    let n = 2 * n_per_group;
    let mut x = Array2::zeros((n, 2));
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for group in 0..2u8 {
        for i in 0..n_per_group {
            let row = group as usize * n_per_group + i;
            let cx: f64 = if rng.gen::<bool>() { 3.0 } else { -3.0 };
            let cy: f64 = if group == 0 { 3.0 } else { -3.0 };
            let x1 = cx + rng.sample::<f64, _>(StandardNormal);
            let x2 = cy + rng.sample::<f64, _>(StandardNormal);
            x[[row, 0]] = x1;
            x[[row, 1]] = x2;
            a.push(group);
            y.push(u8::from((x1 >= 0.0) == (x2 >= 0.0)));
        }
    }
    TabularDataset::new(x, a, y, split, synthetic_schema())
}

/// Draw a two-group synthetic split: each group an equal mixture of two
/// unit-variance Gaussians centered at x1 = -3 and x1 = +3, with group 0 at
/// x2 = +3 and group 1 at x2 = -3. The label is 1 exactly when x1 and x2
/// share a sign.
pub fn make_synthetic(n_per_group: usize, seed: u64) -> Result<TabularDataset> {
    if n_per_group == 0 {
        return Err(Error::InvalidArgument("need at least one row per group".into()));
    }
    synthetic_split(n_per_group, seed, Split::Train)
}

/// A full synthetic triple: `n_per_group` rows per group distributed over
/// the splits with the standard proportions, each split drawn independently.
pub fn load_synthetic(n_per_group: usize, seed: u64) -> Result<DatasetTriple> {
    let (train, val, test) = split_sizes(n_per_group);
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic_n {n_per_group} leaves an empty split"
        )));
    }
    let seeds = SeedStream::new(seed).child("synthetic");
    DatasetTriple::new(
        synthetic_split(train, seeds.child("train").seed(), Split::Train)?,
        synthetic_split(val, seeds.child("validation").seed(), Split::Validation)?,
        synthetic_split(test, seeds.child("test").seed(), Split::Test)?,
    )
}

/// Interior cut points at the j/bins quantiles of the training values,
/// deduplicated, so every value maps to one of at most `bins` codes.
pub fn quantile_edges(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    if values.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("values to discretize".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let mut edges = Vec::with_capacity(bins - 1);
    for j in 1..bins {
        let rank = (j * n).div_ceil(bins).max(1) - 1;
        let e = sorted[rank];
        if edges.last() != Some(&e) {
            edges.push(e);
        }
    }
    Ok(edges)
}

/// Code of `v` given sorted cut points: the count of cut points strictly
/// below `v`, so values equal to a cut point fall in the lower bin.
pub fn bin_code(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e < v)
}

/// Half-open value range `(lo, hi]` of one bin code, unbounded at the ends.
pub fn bin_bounds(edges: &[f64], code: usize) -> (f64, f64) {
    let lo = if code == 0 { f64::NEG_INFINITY } else { edges[code - 1] };
    let hi = if code >= edges.len() { f64::INFINITY } else { edges[code] };
    (lo, hi)
}

/// Expand integer-coded columns into indicator columns for model input.
pub fn one_hot(x: &ArrayView2<f64>, cardinalities: &[usize]) -> Result<Array2<f64>> {
    if x.ncols() != cardinalities.len() {
        return Err(Error::ShapeMismatch {
            expected: cardinalities.len(),
            got: x.ncols(),
            context: "one_hot cardinalities",
        });
    }
    let width: usize = cardinalities.iter().sum();
    let mut out = Array2::zeros((x.nrows(), width));
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut offset = 0;
        for (j, (&v, &card)) in row.iter().zip(cardinalities).enumerate() {
            if v.fract() != 0.0 || v < 0.0 || v >= card as f64 {
                return Err(Error::ValueOutOfRange {
                    column: j,
                    value: v as usize,
                    cardinality: card,
                });
            }
            out[[i, offset + v as usize]] = 1.0;
            offset += card;
        }
    }
    Ok(out)
}

/// Version tag written into every cache index.
pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CacheIndex {
    format_version: u32,
    schema: DatasetSchema,
    rows: BTreeMap<String, usize>,
}

/// Write `{train,validation,test}.csv` plus `schema.json` under `dir`.
/// Identical triples always produce byte-identical files.
pub fn write_cache(dir: &Path, triple: &DatasetTriple) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows = BTreeMap::new();
    for split in triple.splits() {
        rows.insert(split.split.as_str().to_string(), split.len());
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", split.split.as_str())))?;
        let mut header: Vec<&str> = triple.schema().kept_columns();
        header.push("a");
        header.push("y");
        w.write_record(&header)?;
        let mut line: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..split.len() {
            line.clear();
            // f64 Display is shortest round-trip, so re-reading is exact
            line.extend(split.x.row(i).iter().map(|v| format!("{v}")));
            line.push(split.a[i].to_string());
            line.push(split.y[i].to_string());
            w.write_record(&line)?;
        }
        w.flush()?;
    }
    let index = CacheIndex {
        format_version: CACHE_FORMAT_VERSION,
        schema: triple.schema().clone(),
        rows,
    };
    std::fs::write(dir.join("schema.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Read a triple written by [`write_cache`].
pub fn read_cache(dir: &Path) -> Result<DatasetTriple> {
    let index_path = dir.join("schema.json");
    if !index_path.exists() {
        return Err(Error::MissingInput(index_path.display().to_string()));
    }
    let index: CacheIndex = serde_json::from_slice(&std::fs::read(&index_path)?)?;
    if index.format_version != CACHE_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: index.format_version,
            supported: CACHE_FORMAT_VERSION,
        });
    }
    let read_split = |split: Split| -> Result<TabularDataset> {
        let path = dir.join(format!("{}.csv", split.as_str()));
        if !path.exists() {
            return Err(Error::MissingInput(path.display().to_string()));
        }
        let mut reader = csv::Reader::from_path(&path)?;
        let d = index.schema.dim();
        let mut values: Vec<f64> = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != d + 2 {
                return Err(Error::SchemaDrift {
                    path: path.display().to_string(),
                    detail: format!("expected {} fields per row, got {}", d + 2, record.len()),
                });
            }
            for field in record.iter().take(d) {
                values.push(field.parse::<f64>().map_err(|_| Error::SchemaDrift {
                    path: path.display().to_string(),
                    detail: format!("unparsable number {field:?}"),
                })?);
            }
            let tag = |s: &str| -> Result<u8> {
                match s {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::SchemaDrift {
                        path: path.display().to_string(),
                        detail: format!("group/label field must be 0 or 1, got {other:?}"),
                    }),
                }
            };
            a.push(tag(&record[d])?);
            y.push(tag(&record[d + 1])?);
        }
        let n = a.len();
        let x = Array2::from_shape_vec((n, d), values)
            .map_err(|_| Error::InvalidArgument("cache matrix shape".into()))?;
        TabularDataset::new(x, a, y, split, index.schema.clone())
    };
    let triple = DatasetTriple::new(
        read_split(Split::Train)?,
        read_split(Split::Validation)?,
        read_split(Split::Test)?,
    )?;
    for split in triple.splits() {
        let expected = index.rows.get(split.split.as_str()).copied();
        if expected != Some(split.len()) {
            return Err(Error::SchemaDrift {
                path: dir.display().to_string(),
                detail: format!(
                    "{} split has {} rows, index says {:?}",
                    split.split.as_str(),
                    split.len(),
                    expected
                ),
            });
        }
    }
    Ok(triple)
}

/// Settings for the pruning sanity classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SanityConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// How many independently seeded classifiers to average.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SanityConfig {
    fn default() -> Self {
        Self { hidden: vec![50], epochs: 20, batch_size: 128, lr: 1e-3, repeats: 5, seed: 7 }
    }
}

/// Mean and spread of test accuracy for the same architecture trained on
/// the wide and the pruned feature set of one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SanityReport {
    pub dataset: String,
    pub original_accuracy: f64,
    pub original_std: f64,
    pub preprocessed_accuracy: f64,
    pub preprocessed_std: f64,
}

impl SanityReport {
    /// Accuracy lost by pruning; negative when pruning helped.
    pub fn gap(&self) -> f64 {
        self.original_accuracy - self.preprocessed_accuracy
    }
}

// One model-ready matrix per split: integer-coded columns expanded to
// indicators, then everything standardized by train-split statistics.
fn design_matrices(triple: &DatasetTriple) -> Result<[Array2<f64>; 3]> {
    let schema = triple.schema();
    let expand = |d: &TabularDataset| -> Result<Array2<f64>> {
        let mut cols: Vec<Array2<f64>> = Vec::new();
        for (j, col) in schema.columns.iter().enumerate() {
            let column = d.x.column(j).insert_axis(Axis(1)).to_owned();
            match col.kind.cardinality() {
                None => cols.push(column),
                Some(card) => cols.push(one_hot(&column.view(), &[card])?),
            }
        }
        let views: Vec<_> = cols.iter().map(|c| c.view()).collect();
        ndarray::concatenate(Axis(1), &views)
            .map_err(|_| Error::InvalidArgument("design matrix assembly".into()))
    };
    let train = expand(&triple.train)?;
    let standardizer = Standardizer::fit(&train.view());
    Ok([
        standardizer.transform(&train.view()),
        standardizer.transform(&expand(&triple.validation)?.view()),
        standardizer.transform(&expand(&triple.test)?.view()),
    ])
}

fn mlp_accuracy(triple: &DatasetTriple, config: &SanityConfig, seeds: &SeedStream) -> Result<f64> {
    let [train_x, _, test_x] = design_matrices(triple)?;
    let spec = MlpSpec::new(train_x.ncols(), config.hidden.clone(), 1);
    let mut model = MlpModel::init(spec, &mut seeds.stream("init"));
    let layout = model.layout();
    let hyper = AdamHyper::with_lr(config.lr);
    let mut state = AdamState::new(model.param_values().len());
    let mut rng = seeds.stream("batches");
    let n = train_x.nrows();
    let b = config.batch_size.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(b) {
            let xb = train_x.select(Axis(0), chunk);
            let yb = Array2::from_shape_vec(
                (chunk.len(), 1),
                chunk.iter().map(|&i| triple.train.y[i] as f64).collect(),
            )
            .expect("column");
            let mut tape = Tape::new();
            let ids = model.bind(&mut tape, true);
            let x = tape.constant(xb);
            let logits = model.spec().forward(&mut tape, &ids, x);
            let loss = bce_with_logits_mean(&mut tape, logits, &yb);
            let grads = tape.backward(loss);
            let grad = layout.collect_grad(&tape, &grads, &ids);
            let point = layout.param_vector(model.param_values().to_vec());
            let (next, s) = adam_step(&point, &grad, &state, &hyper)?;
            state = s;
            model.set_params(next.values())?;
        }
    }
    let logits = model.forward_batch(&test_x.view())?;
    let correct = logits
        .column(0)
        .iter()
        .zip(&triple.test.y)
        .filter(|(l, y)| u8::from(**l > 0.0) == **y)
        .count();
    Ok(correct as f64 / triple.test.len().max(1) as f64)
}

/// Train the same classifier on two variants of one dataset and compare
/// mean test accuracy over seeded repeats. Both variants reuse the same
/// repeat seeds, so the comparison is paired and identical variants score
/// identically.
pub fn preprocessing_sanity(
    original: &DatasetTriple,
    preprocessed: &DatasetTriple,
    config: &SanityConfig,
) -> Result<SanityReport> {
    if config.repeats == 0 || config.epochs == 0 {
        return Err(Error::InvalidArgument("repeats and epochs must be positive".into()));
    }
    let run = |triple: &DatasetTriple| -> Result<(f64, f64)> {
        let mut accs = Vec::with_capacity(config.repeats);
        for r in 0..config.repeats {
            let seeds = SeedStream::new(config.seed)
                .child("sanity")
                .child(&format!("repeat-{r}"));
            accs.push(mlp_accuracy(triple, config, &seeds)?);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
        Ok((mean, var.sqrt()))
    };
    let (orig, orig_std) = run(original)?;
    let (prep, prep_std) = run(preprocessed)?;
    Ok(SanityReport {
        dataset: preprocessed.schema().dataset.clone(),
        original_accuracy: orig,
        original_std: orig_std,
        preprocessed_accuracy: prep,
        preprocessed_std: prep_std,
    })
}

//! Raw-file loaders for the four benchmark datasets. Each loader checks the
//! raw layout against a shipped column manifest, applies fixed filtering and
//! column-pruning rules, and produces a deterministic train/validation/test
//! triple. A wide `*_original` variant of each dataset keeps every usable
//! column for the pruning sanity check.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{
    bin_code, quantile_edges, split_indices, validation_indices, ColumnKind, ColumnSchema,
    DatasetName, DatasetSchema, DatasetTriple, LoadConfig, Split, TabularDataset,
};
use crate::error::{Error, Result};

/// Expected raw layout for one dataset. Defaults ship with the crate; a
/// `<root>/<dataset>.schema.json` file overrides them, so a differently
/// arranged distribution can be described without rebuilding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawManifest {
    /// File name under the dataset root.
    pub train_file: String,
    /// Second file for datasets that ship a fixed test portion.
    #[serde(default)]
    pub test_file: Option<String>,
    pub has_header: bool,
    /// Exact field count per row, required for headerless files.
    #[serde(default)]
    pub column_count: Option<usize>,
    /// The columns the loader consumes.
    pub columns: Vec<RawColumn>,
}

/// One consumed raw column: located by header name, or by position for
/// headerless files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawColumn {
    pub name: String,
    #[serde(default)]
    pub index: Option<usize>,
}

impl RawManifest {
    /// The manifest compiled into the crate.
    pub fn builtin(name: DatasetName) -> Result<Self> {
        let text = match name {
            DatasetName::Adult => include_str!("../../schemas/adult.json"),
            DatasetName::Compas => include_str!("../../schemas/compas.json"),
            DatasetName::Crime => include_str!("../../schemas/crime.json"),
            DatasetName::Law => include_str!("../../schemas/law.json"),
            DatasetName::Synthetic => {
                return Err(Error::InvalidArgument(
                    "the synthetic dataset has no raw files".into(),
                ))
            }
        };
        let manifest: RawManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// The builtin manifest, or the `<root>/<dataset>.schema.json` override.
    pub fn resolve(name: DatasetName, root: &Path) -> Result<Self> {
        let override_path = root.join(format!("{name}.schema.json"));
        if override_path.exists() {
            let manifest: RawManifest =
                serde_json::from_slice(&std::fs::read(&override_path)?)?;
            manifest.validate()?;
            Ok(manifest)
        } else {
            Self::builtin(name)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::InvalidArgument("manifest lists no columns".into()));
        }
        if !self.has_header {
            let count = self.column_count.ok_or_else(|| {
                Error::InvalidArgument("a headerless manifest needs column_count".into())
            })?;
            for col in &self.columns {
                match col.index {
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "column {:?} needs an index for a headerless file",
                            col.name
                        )))
                    }
                    Some(i) if i >= count => {
                        return Err(Error::InvalidArgument(format!(
                            "column {:?} index {i} out of range ({count} columns)",
                            col.name
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

/// One raw file in memory with consumed-column positions resolved.
struct RawTable {
    path: String,
    rows: Vec<csv::StringRecord>,
    positions: BTreeMap<String, usize>,
}

impl RawTable {
    fn len(&self) -> usize {
        self.rows.len()
    }

    // Panics on names absent from the manifest; loaders only ask for
    // manifest columns.
    fn get(&self, row: usize, name: &str) -> &str {
        &self.rows[row][self.positions[name]]
    }
}

fn read_table(path: &Path, manifest: &RawManifest) -> Result<RawTable> {
    if !path.exists() {
        return Err(Error::MissingInput(format!("{} (raw data file)", path.display())));
    }
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'|'))
        .from_path(path)?;
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        rows.push(record);
    }
    if manifest.has_header {
        if rows.is_empty() {
            return Err(Error::SchemaDrift { path: display, detail: "no header row".into() });
        }
        let header = rows.remove(0);
        let mut positions = BTreeMap::new();
        let mut missing: Vec<&str> = Vec::new();
        for col in &manifest.columns {
            match header.iter().position(|h| h.eq_ignore_ascii_case(&col.name)) {
                Some(i) => {
                    positions.insert(col.name.clone(), i);
                }
                None => missing.push(&col.name),
            }
        }
        if !missing.is_empty() {
            let wanted: BTreeSet<String> =
                manifest.columns.iter().map(|c| c.name.to_ascii_lowercase()).collect();
            let unmatched: Vec<&str> = header
                .iter()
                .filter(|h| !wanted.contains(&h.to_ascii_lowercase()))
                .collect();
            return Err(Error::SchemaDrift {
                path: display,
                detail: format!(
                    "missing required columns {missing:?}; unmatched columns present: {unmatched:?}"
                ),
            });
        }
        for (i, record) in rows.iter().enumerate() {
            if record.len() != header.len() {
                return Err(Error::SchemaDrift {
                    path: display,
                    detail: format!(
                        "row {} has {} fields, header has {}",
                        i + 2,
                        record.len(),
                        header.len()
                    ),
                });
            }
        }
        Ok(RawTable { path: display, rows, positions })
    } else {
        let count = manifest.column_count.expect("validated manifest");
        for (i, record) in rows.iter().enumerate() {
            if record.len() != count {
                return Err(Error::SchemaDrift {
                    path: display,
                    detail: format!(
                        "row {} has {} fields, expected {}",
                        i + 1,
                        record.len(),
                        count
                    ),
                });
            }
        }
        let positions = manifest
            .columns
            .iter()
            .map(|c| (c.name.clone(), c.index.expect("validated manifest")))
            .collect();
        Ok(RawTable { path: display, rows, positions })
    }
}

/// Raw markers treated as a missing value.
fn missing(s: &str) -> bool {
    s.is_empty() || s == "?" || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("n/a")
}

// Days since 1970-01-01 for a calendar date (proleptic Gregorian).
fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = y - i64::from(m <= 2);
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

/// Day number of a `YYYY-MM-DD` date, ignoring any trailing time of day.
fn parse_day(s: &str) -> Option<i64> {
    let date = s.get(..10)?;
    let mut parts = date.split('-');
    let y: i64 = parts.next()?.parse().ok()?;
    let m: i64 = parts.next()?.parse().ok()?;
    let d: i64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return None;
    }
    Some(days_from_civil(y, m, d))
}

/// Distinct values in a canonical order: numeric when every value parses as
/// an integer, lexicographic otherwise.
fn encode_levels(values: BTreeSet<String>) -> Vec<String> {
    let mut levels: Vec<String> = values.into_iter().collect();
    if let Ok(nums) = levels.iter().map(|v| v.parse::<i64>()).collect::<std::result::Result<Vec<_>, _>>() {
        let mut pairs: Vec<(i64, String)> = nums.into_iter().zip(levels).collect();
        pairs.sort_unstable();
        levels = pairs.into_iter().map(|(_, v)| v).collect();
    }
    levels
}

fn level_code(levels: &[String], value: &str) -> Result<usize> {
    levels
        .iter()
        .position(|l| l == value)
        .ok_or_else(|| Error::InvalidArgument(format!("value {value:?} missing from levels")))
}

fn take_u8(v: &[u8], idx: &[usize]) -> Vec<u8> {
    idx.iter().map(|&i| v[i]).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Adult
// ---------------------------------------------------------------------------

const ADULT_KEPT: [&str; 7] = [
    "relationship",
    "workclass",
    "marital-status",
    "race",
    "occupation",
    "education-num",
    "education",
];

fn adult_tables(config: &LoadConfig) -> Result<(RawTable, RawTable)> {
    let manifest = RawManifest::resolve(DatasetName::Adult, &config.root)?;
    let test_file = manifest
        .test_file
        .clone()
        .ok_or_else(|| Error::InvalidArgument("adult manifest needs test_file".into()))?;
    let train = read_table(&config.root.join(&manifest.train_file), &manifest)?;
    let test = read_table(&config.root.join(&test_file), &manifest)?;
    Ok((train, test))
}

// Rows with no missing field anywhere, matching the published split sizes.
fn complete_rows(table: &RawTable) -> Vec<usize> {
    (0..table.len())
        .filter(|&i| !table.rows[i].iter().any(missing))
        .collect()
}

fn adult_group_and_label(table: &RawTable, row: usize) -> (u8, u8) {
    let a = u8::from(table.get(row, "sex").eq_ignore_ascii_case("female"));
    let y = u8::from(table.get(row, "income").trim_end_matches('.') == ">50K");
    (a, y)
}

/// Income prediction with sex as the group tag, reduced to seven
/// integer-coded columns.
pub fn load_adult(config: &LoadConfig) -> Result<DatasetTriple> {
    let (train_t, test_t) = adult_tables(config)?;
    let train_keep = complete_rows(&train_t);
    let test_keep = complete_rows(&test_t);
    let mut sets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); ADULT_KEPT.len()];
    for (table, keep) in [(&train_t, &train_keep), (&test_t, &test_keep)] {
        for &i in keep {
            for (j, name) in ADULT_KEPT.iter().enumerate() {
                sets[j].insert(table.get(i, name).to_string());
            }
        }
    }
    let levels: Vec<Vec<String>> = sets.into_iter().map(encode_levels).collect();
    let encode = |table: &RawTable, keep: &[usize]| -> Result<(Array2<f64>, Vec<u8>, Vec<u8>)> {
        let mut x = Array2::zeros((keep.len(), ADULT_KEPT.len()));
        let mut a = Vec::with_capacity(keep.len());
        let mut y = Vec::with_capacity(keep.len());
        for (r, &i) in keep.iter().enumerate() {
            for (j, name) in ADULT_KEPT.iter().enumerate() {
                x[[r, j]] = level_code(&levels[j], table.get(i, name))? as f64;
            }
            let (ai, yi) = adult_group_and_label(table, i);
            a.push(ai);
            y.push(yi);
        }
        Ok((x, a, y))
    };
    let (pool_x, pool_a, pool_y) = encode(&train_t, &train_keep)?;
    let (test_x, test_a, test_y) = encode(&test_t, &test_keep)?;
    let (tr, va) = validation_indices(pool_x.nrows(), config.seed);
    let schema = DatasetSchema {
        dataset: "adult".into(),
        columns: ADULT_KEPT
            .iter()
            .zip(&levels)
            .map(|(name, l)| ColumnSchema {
                name: (*name).into(),
                kind: ColumnKind::Categorical { levels: l.clone() },
            })
            .collect(),
        group_rule: "1 = Female, 0 = Male".into(),
        label_rule: "1 = income over 50K".into(),
    };
    DatasetTriple::new(
        TabularDataset::new(
            pool_x.select(Axis(0), &tr),
            take_u8(&pool_a, &tr),
            take_u8(&pool_y, &tr),
            Split::Train,
            schema.clone(),
        )?,
        TabularDataset::new(
            pool_x.select(Axis(0), &va),
            take_u8(&pool_a, &va),
            take_u8(&pool_y, &va),
            Split::Validation,
            schema.clone(),
        )?,
        TabularDataset::new(test_x, test_a, test_y, Split::Test, schema)?,
    )
}

/// The wide adult variant: every attribute except the group tag, continuous
/// columns kept numeric and the rest integer-coded.
pub fn load_adult_original(config: &LoadConfig) -> Result<DatasetTriple> {
    const CONTINUOUS: [&str; 6] =
        ["age", "fnlwgt", "education-num", "capital-gain", "capital-loss", "hours-per-week"];
    const CATEGORICAL: [&str; 7] = [
        "workclass",
        "education",
        "marital-status",
        "occupation",
        "relationship",
        "race",
        "native-country",
    ];
    let (train_t, test_t) = adult_tables(config)?;
    let train_keep = complete_rows(&train_t);
    let test_keep = complete_rows(&test_t);
    let mut sets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); CATEGORICAL.len()];
    for (table, keep) in [(&train_t, &train_keep), (&test_t, &test_keep)] {
        for &i in keep {
            for (j, name) in CATEGORICAL.iter().enumerate() {
                sets[j].insert(table.get(i, name).to_string());
            }
        }
    }
    let levels: Vec<Vec<String>> = sets.into_iter().map(encode_levels).collect();
    let encode = |table: &RawTable, keep: &[usize]| -> Result<(Array2<f64>, Vec<u8>, Vec<u8>)> {
        let d = CONTINUOUS.len() + CATEGORICAL.len();
        let mut x = Array2::zeros((keep.len(), d));
        let mut a = Vec::with_capacity(keep.len());
        let mut y = Vec::with_capacity(keep.len());
        for (r, &i) in keep.iter().enumerate() {
            for (j, name) in CONTINUOUS.iter().enumerate() {
                let field = table.get(i, name);
                x[[r, j]] = field.parse().map_err(|_| Error::SchemaDrift {
                    path: table.path.clone(),
                    detail: format!("column {name} holds non-numeric value {field:?}"),
                })?;
            }
            for (j, name) in CATEGORICAL.iter().enumerate() {
                x[[r, CONTINUOUS.len() + j]] =
                    level_code(&levels[j], table.get(i, name))? as f64;
            }
            let (ai, yi) = adult_group_and_label(table, i);
            a.push(ai);
            y.push(yi);
        }
        Ok((x, a, y))
    };
    let (pool_x, pool_a, pool_y) = encode(&train_t, &train_keep)?;
    let (test_x, test_a, test_y) = encode(&test_t, &test_keep)?;
    let (tr, va) = validation_indices(pool_x.nrows(), config.seed);
    let mut columns: Vec<ColumnSchema> = CONTINUOUS
        .iter()
        .map(|name| ColumnSchema { name: (*name).into(), kind: ColumnKind::Continuous })
        .collect();
    columns.extend(CATEGORICAL.iter().zip(&levels).map(|(name, l)| ColumnSchema {
        name: (*name).into(),
        kind: ColumnKind::Categorical { levels: l.clone() },
    }));
    let schema = DatasetSchema {
        dataset: "adult-original".into(),
        columns,
        group_rule: "1 = Female, 0 = Male".into(),
        label_rule: "1 = income over 50K".into(),
    };
    DatasetTriple::new(
        TabularDataset::new(
            pool_x.select(Axis(0), &tr),
            take_u8(&pool_a, &tr),
            take_u8(&pool_y, &tr),
            Split::Train,
            schema.clone(),
        )?,
        TabularDataset::new(
            pool_x.select(Axis(0), &va),
            take_u8(&pool_a, &va),
            take_u8(&pool_y, &va),
            Split::Validation,
            schema.clone(),
        )?,
        TabularDataset::new(test_x, test_a, test_y, Split::Test, schema)?,
    )
}

// ---------------------------------------------------------------------------
// Compas
// ---------------------------------------------------------------------------

struct CompasRow {
    a: u8,
    y: u8,
    age: f64,
    diff_custody: f64,
    diff_jail: f64,
    priors: f64,
    juv_fel: f64,
    juv_misd: f64,
    juv_other: f64,
    days_screen: f64,
    sex: String,
    charge: String,
    vscore: String,
}

// Standard validity window: the screening must sit within 30 days of the
// arrest, the recidivism flag must be resolved, ordinary-violation charges
// are excluded, and score fields must be populated.
fn compas_rows(config: &LoadConfig) -> Result<Vec<CompasRow>> {
    let manifest = RawManifest::resolve(DatasetName::Compas, &config.root)?;
    let table = read_table(&config.root.join(&manifest.train_file), &manifest)?;
    let mut out = Vec::new();
    for i in 0..table.len() {
        let a = match table.get(i, "race") {
            "African-American" => 1u8,
            "Caucasian" => 0u8,
            _ => continue,
        };
        let days_screen: f64 = match table.get(i, "days_b_screening_arrest").parse() {
            Ok(v) => v,
            Err(_) => continue,
        };
        if !(-30.0..=30.0).contains(&days_screen) {
            continue;
        }
        if table.get(i, "is_recid") == "-1" || table.get(i, "c_charge_degree") == "O" {
            continue;
        }
        if missing(table.get(i, "score_text"))
            || missing(table.get(i, "v_score_text"))
            || missing(table.get(i, "sex"))
        {
            continue;
        }
        let y = match table.get(i, "two_year_recid") {
            "0" => 0u8,
            "1" => 1u8,
            _ => continue,
        };
        let (Some(cin), Some(cout), Some(jin), Some(jout)) = (
            parse_day(table.get(i, "in_custody")),
            parse_day(table.get(i, "out_custody")),
            parse_day(table.get(i, "c_jail_in")),
            parse_day(table.get(i, "c_jail_out")),
        ) else {
            continue;
        };
        let number = |name: &str| table.get(i, name).parse::<f64>().ok();
        let (Some(age), Some(priors), Some(juv_fel), Some(juv_misd), Some(juv_other)) = (
            number("age"),
            number("priors_count"),
            number("juv_fel_count"),
            number("juv_misd_count"),
            number("juv_other_count"),
        ) else {
            continue;
        };
        out.push(CompasRow {
            a,
            y,
            age,
            diff_custody: (cout - cin) as f64,
            diff_jail: (jout - jin) as f64,
            priors,
            juv_fel,
            juv_misd,
            juv_other,
            days_screen,
            sex: table.get(i, "sex").to_string(),
            charge: table.get(i, "c_charge_degree").to_string(),
            vscore: table.get(i, "v_score_text").to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(out)
}

type NumberField = fn(&CompasRow) -> f64;
type TextField = fn(&CompasRow) -> &str;

const COMPAS_BINNED: [(&str, NumberField); 4] = [
    ("age", |r| r.age),
    ("diff_custody", |r| r.diff_custody),
    ("diff_jail", |r| r.diff_jail),
    ("priors_count", |r| r.priors),
];

const COMPAS_CATEGORICAL: [(&str, TextField); 3] = [
    ("sex", |r| &r.sex),
    ("c_charge_degree", |r| &r.charge),
    ("v_score_text", |r| &r.vscore),
];

fn compas_levels(rows: &[CompasRow]) -> Vec<Vec<String>> {
    COMPAS_CATEGORICAL
        .iter()
        .map(|(_, get)| encode_levels(rows.iter().map(|r| get(r).to_string()).collect()))
        .collect()
}

/// Recidivism prediction restricted to two racial groups, with the four
/// remaining continuous columns discretized by train-split quantiles.
pub fn load_compas(config: &LoadConfig) -> Result<DatasetTriple> {
    let rows = compas_rows(config)?;
    let (tr, va, te) = split_indices(rows.len(), config.seed);
    let edges: Vec<Vec<f64>> = COMPAS_BINNED
        .iter()
        .map(|(_, get)| {
            let train_values: Vec<f64> = tr.iter().map(|&i| get(&rows[i])).collect();
            quantile_edges(&train_values, config.quantile_bins)
        })
        .collect::<Result<_>>()?;
    let levels = compas_levels(&rows);
    let mut columns: Vec<ColumnSchema> = COMPAS_BINNED
        .iter()
        .zip(&edges)
        .map(|((name, _), e)| ColumnSchema {
            name: (*name).into(),
            kind: ColumnKind::Binned { edges: e.clone() },
        })
        .collect();
    columns.extend(COMPAS_CATEGORICAL.iter().zip(&levels).map(|((name, _), l)| {
        ColumnSchema { name: (*name).into(), kind: ColumnKind::Categorical { levels: l.clone() } }
    }));
    let schema = DatasetSchema {
        dataset: "compas".into(),
        columns,
        group_rule: "1 = African-American, 0 = Caucasian".into(),
        label_rule: "1 = rearrested within two years".into(),
    };
    let build = |idx: &[usize], split: Split| -> Result<TabularDataset> {
        let mut x = Array2::zeros((idx.len(), schema.dim()));
        let mut a = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            let row = &rows[i];
            for (j, ((_, get), e)) in COMPAS_BINNED.iter().zip(&edges).enumerate() {
                x[[r, j]] = bin_code(e, get(row)) as f64;
            }
            for (j, ((_, get), l)) in COMPAS_CATEGORICAL.iter().zip(&levels).enumerate() {
                x[[r, COMPAS_BINNED.len() + j]] = level_code(l, get(row))? as f64;
            }
            a.push(row.a);
            y.push(row.y);
        }
        TabularDataset::new(x, a, y, split, schema.clone())
    };
    DatasetTriple::new(build(&tr, Split::Train)?, build(&va, Split::Validation)?, build(&te, Split::Test)?)
}

/// The wide compas variant: the same rows with every derived column kept
/// numeric and the categorical columns integer-coded.
pub fn load_compas_original(config: &LoadConfig) -> Result<DatasetTriple> {
    const CONTINUOUS: [(&str, NumberField); 8] = [
        ("age", |r| r.age),
        ("juv_fel_count", |r| r.juv_fel),
        ("juv_misd_count", |r| r.juv_misd),
        ("juv_other_count", |r| r.juv_other),
        ("priors_count", |r| r.priors),
        ("days_b_screening_arrest", |r| r.days_screen),
        ("diff_custody", |r| r.diff_custody),
        ("diff_jail", |r| r.diff_jail),
    ];
    let rows = compas_rows(config)?;
    let (tr, va, te) = split_indices(rows.len(), config.seed);
    let levels = compas_levels(&rows);
    let mut columns: Vec<ColumnSchema> = CONTINUOUS
        .iter()
        .map(|(name, _)| ColumnSchema { name: (*name).into(), kind: ColumnKind::Continuous })
        .collect();
    columns.extend(COMPAS_CATEGORICAL.iter().zip(&levels).map(|((name, _), l)| {
        ColumnSchema { name: (*name).into(), kind: ColumnKind::Categorical { levels: l.clone() } }
    }));
    let schema = DatasetSchema {
        dataset: "compas-original".into(),
        columns,
        group_rule: "1 = African-American, 0 = Caucasian".into(),
        label_rule: "1 = rearrested within two years".into(),
    };
    let build = |idx: &[usize], split: Split| -> Result<TabularDataset> {
        let mut x = Array2::zeros((idx.len(), schema.dim()));
        let mut a = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            let row = &rows[i];
            for (j, (_, get)) in CONTINUOUS.iter().enumerate() {
                x[[r, j]] = get(row);
            }
            for (j, ((_, get), l)) in COMPAS_CATEGORICAL.iter().zip(&levels).enumerate() {
                x[[r, CONTINUOUS.len() + j]] = level_code(l, get(row))? as f64;
            }
            a.push(row.a);
            y.push(row.y);
        }
        TabularDataset::new(x, a, y, split, schema.clone())
    };
    DatasetTriple::new(build(&tr, Split::Train)?, build(&va, Split::Validation)?, build(&te, Split::Test)?)
}

// ---------------------------------------------------------------------------
// Crime
// ---------------------------------------------------------------------------

const CRIME_FEATURES: [&str; 6] = [
    "racePctWhite",
    "pctWInvInc",
    "PctFam2Par",
    "PctKids2Par",
    "PctYoungKids2Par",
    "PctKidsBornNeverMar",
];
const CRIME_NEEDED: [&str; 10] = [
    "racepctblack",
    "racePctWhite",
    "racePctAsian",
    "racePctHisp",
    "pctWInvInc",
    "PctFam2Par",
    "PctKids2Par",
    "PctYoungKids2Par",
    "PctKidsBornNeverMar",
    "ViolentCrimesPerPop",
];

struct CrimeRaw {
    manifest: RawManifest,
    // every field parsed once; None marks a missing or non-numeric value
    cells: Vec<Vec<Option<f64>>>,
    retained: Vec<usize>,
    a: Vec<u8>,
    y: Vec<u8>,
}

fn crime_raw(config: &LoadConfig) -> Result<CrimeRaw> {
    let manifest = RawManifest::resolve(DatasetName::Crime, &config.root)?;
    let table = read_table(&config.root.join(&manifest.train_file), &manifest)?;
    let cells: Vec<Vec<Option<f64>>> = table
        .rows
        .iter()
        .map(|record| record.iter().map(|f| f.parse::<f64>().ok()).collect())
        .collect();
    let pos = |name: &str| table.positions[name];
    let retained: Vec<usize> = (0..cells.len())
        .filter(|&i| CRIME_NEEDED.iter().all(|name| cells[i][pos(name)].is_some()))
        .collect();
    if retained.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let targets: Vec<f64> =
        retained.iter().map(|&i| cells[i][pos("ViolentCrimesPerPop")].unwrap()).collect();
    let cut = median(&targets);
    let mut a = Vec::with_capacity(retained.len());
    let mut y = Vec::with_capacity(retained.len());
    for (&i, &target) in retained.iter().zip(&targets) {
        let white = cells[i][pos("racePctWhite")].unwrap();
        let others = cells[i][pos("racepctblack")].unwrap()
            + cells[i][pos("racePctAsian")].unwrap()
            + cells[i][pos("racePctHisp")].unwrap();
        a.push(u8::from(white / 5.0 < others));
        y.push(u8::from(target > cut));
    }
    Ok(CrimeRaw { manifest, cells, retained, a, y })
}

const CRIME_GROUP_RULE: &str =
    "1 when racePctWhite / 5 < racepctblack + racePctAsian + racePctHisp";
const CRIME_LABEL_RULE: &str = "1 when ViolentCrimesPerPop exceeds the global median";

/// Violent-crime-rate prediction from six family and income columns, with
/// the group tag derived from the community's racial makeup.
pub fn load_crime(config: &LoadConfig) -> Result<DatasetTriple> {
    let raw = crime_raw(config)?;
    let positions: BTreeMap<&str, usize> = raw
        .manifest
        .columns
        .iter()
        .map(|c| (c.name.as_str(), c.index.expect("validated manifest")))
        .collect();
    let mut x = Array2::zeros((raw.retained.len(), CRIME_FEATURES.len()));
    for (r, &i) in raw.retained.iter().enumerate() {
        for (j, name) in CRIME_FEATURES.iter().enumerate() {
            x[[r, j]] = raw.cells[i][positions[name]].unwrap();
        }
    }
    let schema = DatasetSchema {
        dataset: "crime".into(),
        columns: CRIME_FEATURES
            .iter()
            .map(|name| ColumnSchema { name: (*name).into(), kind: ColumnKind::Continuous })
            .collect(),
        group_rule: CRIME_GROUP_RULE.into(),
        label_rule: CRIME_LABEL_RULE.into(),
    };
    triple_from_split(x, raw.a, raw.y, schema, config.seed)
}

/// The wide crime variant: every numeric column that is complete across the
/// file, excluding identifiers and the prediction target.
pub fn load_crime_original(config: &LoadConfig) -> Result<DatasetTriple> {
    let raw = crime_raw(config)?;
    let count = raw.manifest.column_count.expect("validated manifest");
    let target = raw
        .manifest
        .columns
        .iter()
        .find(|c| c.name == "ViolentCrimesPerPop")
        .and_then(|c| c.index)
        .expect("builtin manifest names the target");
    let names: BTreeMap<usize, &str> = raw
        .manifest
        .columns
        .iter()
        .filter_map(|c| c.index.map(|i| (i, c.name.as_str())))
        .collect();
    // skip the leading identifier block; keep predictive columns with no
    // missing values anywhere
    let complete: Vec<usize> = (5..count)
        .filter(|&j| j != target && raw.cells.iter().all(|row| row[j].is_some()))
        .collect();
    if complete.is_empty() {
        return Err(Error::SchemaDrift {
            path: config.root.join(&raw.manifest.train_file).display().to_string(),
            detail: "no complete numeric columns outside the identifier block".into(),
        });
    }
    let mut x = Array2::zeros((raw.retained.len(), complete.len()));
    for (r, &i) in raw.retained.iter().enumerate() {
        for (c, &j) in complete.iter().enumerate() {
            x[[r, c]] = raw.cells[i][j].unwrap();
        }
    }
    let schema = DatasetSchema {
        dataset: "crime-original".into(),
        columns: complete
            .iter()
            .map(|&j| ColumnSchema {
                name: names.get(&j).map_or_else(|| format!("col{j}"), |n| (*n).into()),
                kind: ColumnKind::Continuous,
            })
            .collect(),
        group_rule: CRIME_GROUP_RULE.into(),
        label_rule: CRIME_LABEL_RULE.into(),
    };
    triple_from_split(x, raw.a, raw.y, schema, config.seed)
}

// Shared 80/20-plus-validation assembly for datasets without a fixed test file.
fn triple_from_split(
    x: Array2<f64>,
    a: Vec<u8>,
    y: Vec<u8>,
    schema: DatasetSchema,
    seed: u64,
) -> Result<DatasetTriple> {
    let (tr, va, te) = split_indices(x.nrows(), seed);
    let build = |idx: &[usize], split: Split| -> Result<TabularDataset> {
        TabularDataset::new(
            x.select(Axis(0), idx),
            take_u8(&a, idx),
            take_u8(&y, idx),
            split,
            schema.clone(),
        )
    };
    DatasetTriple::new(build(&tr, Split::Train)?, build(&va, Split::Validation)?, build(&te, Split::Test)?)
}

// ---------------------------------------------------------------------------
// Law
// ---------------------------------------------------------------------------

struct LawRow {
    a: u8,
    y: u8,
    lsat: f64,
    ugpa: f64,
    college: String,
    year: f64,
    gender: String,
    resident: f64,
}

fn law_rows(config: &LoadConfig) -> Result<Vec<LawRow>> {
    let manifest = RawManifest::resolve(DatasetName::Law, &config.root)?;
    let table = read_table(&config.root.join(&manifest.train_file), &manifest)?;
    let mut out = Vec::new();
    for i in 0..table.len() {
        let number = |name: &str| table.get(i, name).parse::<f64>().ok();
        let (Some(lsat), Some(ugpa), Some(year), Some(resident)) =
            (number("lsat"), number("ugpa"), number("year"), number("resident"))
        else {
            continue;
        };
        let y = match number("admit") {
            Some(0.0) => 0u8,
            Some(1.0) => 1u8,
            _ => continue,
        };
        let race = table.get(i, "race");
        let college = table.get(i, "college");
        let gender = table.get(i, "gender");
        if missing(race) || missing(college) || missing(gender) {
            continue;
        }
        out.push(LawRow {
            a: u8::from(!race.eq_ignore_ascii_case("white")),
            y,
            lsat,
            ugpa,
            college: college.to_string(),
            year,
            gender: gender.to_string(),
            resident,
        });
    }
    if out.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(out)
}

// Colleges ranked by train-split admission rate, highest first; colleges
// absent from the train split sort last, ties break by name.
fn college_ranks(rows: &[LawRow], train: &[usize]) -> BTreeMap<String, usize> {
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for row in rows {
        stats.entry(&row.college).or_default();
    }
    for &i in train {
        let entry = stats.get_mut(rows[i].college.as_str()).expect("seeded above");
        entry.1 += 1;
        if rows[i].y == 1 {
            entry.0 += 1;
        }
    }
    let mut order: Vec<(&str, f64)> = stats
        .into_iter()
        .map(|(college, (admitted, total))| {
            (college, if total == 0 { -1.0 } else { admitted as f64 / total as f64 })
        })
        .collect();
    order.sort_by(|x, z| z.1.partial_cmp(&x.1).expect("finite rates").then(x.0.cmp(z.0)));
    order.into_iter().enumerate().map(|(rank, (college, _))| (college.to_string(), rank)).collect()
}

const LAW_GROUP_RULE: &str = "1 = any race other than white";
const LAW_LABEL_RULE: &str = "1 = admitted";

/// Admission prediction from test score, undergraduate grades, and the
/// college applied to, ranked by decreasing train-split admission rate.
pub fn load_law(config: &LoadConfig) -> Result<DatasetTriple> {
    let rows = law_rows(config)?;
    let (tr, va, te) = split_indices(rows.len(), config.seed);
    let ranks = college_ranks(&rows, &tr);
    let schema = DatasetSchema {
        dataset: "law".into(),
        columns: ["lsat", "ugpa", "college_rank"]
            .iter()
            .map(|name| ColumnSchema { name: (*name).into(), kind: ColumnKind::Continuous })
            .collect(),
        group_rule: LAW_GROUP_RULE.into(),
        label_rule: LAW_LABEL_RULE.into(),
    };
    let build = |idx: &[usize], split: Split| -> Result<TabularDataset> {
        let mut x = Array2::zeros((idx.len(), 3));
        let mut a = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            x[[r, 0]] = rows[i].lsat;
            x[[r, 1]] = rows[i].ugpa;
            x[[r, 2]] = ranks[&rows[i].college] as f64;
            a.push(rows[i].a);
            y.push(rows[i].y);
        }
        TabularDataset::new(x, a, y, split, schema.clone())
    };
    DatasetTriple::new(build(&tr, Split::Train)?, build(&va, Split::Validation)?, build(&te, Split::Test)?)
}

/// The wide law variant: every attribute except the group tag, with college
/// and gender integer-coded.
pub fn load_law_original(config: &LoadConfig) -> Result<DatasetTriple> {
    let rows = law_rows(config)?;
    let (tr, va, te) = split_indices(rows.len(), config.seed);
    let colleges = encode_levels(rows.iter().map(|r| r.college.clone()).collect());
    let genders = encode_levels(rows.iter().map(|r| r.gender.clone()).collect());
    let schema = DatasetSchema {
        dataset: "law-original".into(),
        columns: vec![
            ColumnSchema { name: "lsat".into(), kind: ColumnKind::Continuous },
            ColumnSchema { name: "ugpa".into(), kind: ColumnKind::Continuous },
            ColumnSchema { name: "year".into(), kind: ColumnKind::Continuous },
            ColumnSchema { name: "resident".into(), kind: ColumnKind::Continuous },
            ColumnSchema {
                name: "college".into(),
                kind: ColumnKind::Categorical { levels: colleges.clone() },
            },
            ColumnSchema {
                name: "gender".into(),
                kind: ColumnKind::Categorical { levels: genders.clone() },
            },
        ],
        group_rule: LAW_GROUP_RULE.into(),
        label_rule: LAW_LABEL_RULE.into(),
    };
    let build = |idx: &[usize], split: Split| -> Result<TabularDataset> {
        let mut x = Array2::zeros((idx.len(), 6));
        let mut a = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            x[[r, 0]] = rows[i].lsat;
            x[[r, 1]] = rows[i].ugpa;
            x[[r, 2]] = rows[i].year;
            x[[r, 3]] = rows[i].resident;
            x[[r, 4]] = level_code(&colleges, &rows[i].college)? as f64;
            x[[r, 5]] = level_code(&genders, &rows[i].gender)? as f64;
            a.push(rows[i].a);
            y.push(rows[i].y);
        }
        TabularDataset::new(x, a, y, split, schema.clone())
    };
    DatasetTriple::new(build(&tr, Split::Train)?, build(&va, Split::Validation)?, build(&te, Split::Test)?)
}

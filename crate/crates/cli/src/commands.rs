//! Command implementations. Every command snapshots its full argument set
//! into a run manifest, hashes its inputs, and writes its outputs into one
//! run directory; reruns with the same arguments and seed produce
//! byte-identical model and report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use fairflow_core::certify::{
    attack_suite, certify, conditional_deltas, AttackConfig, AttackResult, CertificationReport,
    OptimalAdversary,
};
use fairflow_core::data::{
    self, DatasetName, DatasetTriple, LoadConfig, RawManifest, SanityConfig,
};
use fairflow_core::density::{
    fit_categorical, fit_gmm, rows_from_f64, DensityKind, DensityModel, GmmFitConfig,
};
use fairflow_core::discrete::{label_split_matching, FiniteDomain};
use fairflow_core::downstream::{
    eval_metrics, optimal_threshold, recourse, Classifier, RecourseConfig, RecourseOutcome,
};
use fairflow_core::flow::{FlowConfig, FlowEncoderPair, Standardizer};
use fairflow_core::model_io::{CheckpointFile, DensityFile, MatchingFile, ModelFile, ModelPayload};
use fairflow_core::numerics::SeedStream;
use fairflow_core::train::{train_fnf, LabeledGroup, Scalarization, TrainConfig, TrainSplits};
use fairflow_core::{Error, Result};

use crate::manifest::{read_manifest, ManifestBuilder};
use crate::plots::{render, Series};

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "FAIRFLOW_DATA_ROOT";

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Load a raw dataset, apply its pruning rules, and cache the splits
    Prepare(PrepareArgs),
    /// Generate and cache the synthetic two-group dataset
    Synth(SynthArgs),
    /// Compare classifier accuracy on the wide and pruned feature sets
    PrepSanity(PrepSanityArgs),
    /// Fit one density estimate per group on the cached train split
    FitDensity(FitDensityArgs),
    /// Train paired invertible encoders against fitted group densities
    Train(TrainArgs),
    /// Bound the best adversary's accuracy from fresh density samples
    Certify(CertifyArgs),
    /// Train MLP adversaries on encoded data and compare to the bound
    Attack(AttackArgs),
    /// Fairness and accuracy metrics of the trained head on encoded data
    Eval(EvalArgs),
    /// Exact distribution matching for fully categorical datasets
    MatchDiscrete(MatchDiscreteArgs),
    /// Latent-space recourse suggestions for rejected rows
    Recourse(RecourseArgs),
    /// Re-execute a command from its run manifest
    Rerun(RerunArgs),
}

impl Command {
    pub fn run(self) -> Result<()> {
        match self {
            Command::Prepare(a) => a.run(),
            Command::Synth(a) => a.run(),
            Command::PrepSanity(a) => a.run(),
            Command::FitDensity(a) => a.run(),
            Command::Train(a) => a.run(),
            Command::Certify(a) => a.run(),
            Command::Attack(a) => a.run(),
            Command::Eval(a) => a.run(),
            Command::MatchDiscrete(a) => a.run(),
            Command::Recourse(a) => a.run(),
            Command::Rerun(a) => a.run(),
        }
    }
}

/// Arguments shared by every command.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Common {
    /// Dataset root holding raw files and the cache; falls back to
    /// $FAIRFLOW_DATA_ROOT, then ./data
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Run directory for outputs and the manifest
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Master seed; all randomness derives from it
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

impl Common {
    fn resolved_root(&self) -> PathBuf {
        match &self.data_root {
            Some(p) => p.clone(),
            None => std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data")),
        }
    }

    /// Pin the resolved root so the manifest snapshot is self-contained.
    fn normalized(&self) -> Self {
        let mut c = self.clone();
        c.data_root = Some(self.resolved_root());
        c
    }

    fn cache_dir(&self, name: DatasetName, original: bool) -> PathBuf {
        let leaf =
            if original { format!("{name}-original") } else { name.to_string() };
        self.resolved_root().join("cache").join(leaf)
    }

    fn load_config(&self) -> LoadConfig {
        let mut config = LoadConfig::new(self.resolved_root());
        config.seed = self.seed;
        config
    }
}

fn parse_dataset(s: &str) -> Result<DatasetName> {
    s.parse()
}

fn parse_gamma(gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) || gamma.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    Ok(gamma)
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

/// "2x50" -> [50, 50]; a comma list gives several architectures.
fn parse_architectures(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(',')
        .map(|arch| {
            let arch = arch.trim();
            let (depth, width) = arch.split_once(['x', 'X']).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "architecture {arch:?} must look like DEPTHxWIDTH, e.g. 2x50"
                ))
            })?;
            let depth: usize = depth.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad depth in architecture {arch:?}"))
            })?;
            let width: usize = width.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad width in architecture {arch:?}"))
            })?;
            if depth == 0 || width == 0 {
                return Err(Error::InvalidArgument(format!(
                    "architecture {arch:?} needs positive depth and width"
                )));
            }
            Ok(vec![width; depth])
        })
        .collect()
}

fn read_cached(common: &Common, name: DatasetName, original: bool) -> Result<DatasetTriple> {
    data::read_cache(&common.cache_dir(name, original))
}

fn record_cache_inputs(
    builder: &mut ManifestBuilder,
    common: &Common,
    name: DatasetName,
    original: bool,
) -> Result<()> {
    let dir = common.cache_dir(name, original);
    for file in ["schema.json", "train.csv", "validation.csv", "test.csv"] {
        builder.record_input(&dir.join(file))?;
    }
    Ok(())
}

/// Rows of one group from a standardized matrix, with their labels.
fn group_slice(x: &Array2<f64>, a: &[u8], y: &[u8], group: u8) -> (Array2<f64>, Vec<u8>) {
    let idx: Vec<usize> =
        a.iter().enumerate().filter(|(_, &g)| g == group).map(|(i, _)| i).collect();
    let rows = x.select(Axis(0), &idx);
    let labels = idx.iter().map(|&i| y[i]).collect();
    (rows, labels)
}

/// Encode each group's standardized rows with its own encoder; returns the
/// stacked latents with matching group tags and labels.
fn encode_split(
    pair: &FlowEncoderPair,
    x_std: &Array2<f64>,
    a: &[u8],
    y: &[u8],
) -> Result<(Array2<f64>, Vec<u8>, Vec<u8>)> {
    let mut z = Array2::zeros((x_std.nrows(), x_std.ncols()));
    for group in 0..2u8 {
        let idx: Vec<usize> =
            a.iter().enumerate().filter(|(_, &g)| g == group).map(|(i, _)| i).collect();
        if idx.is_empty() {
            continue;
        }
        let rows = x_std.select(Axis(0), &idx);
        let (enc, _) = pair.encoder(group).forward_batch(&rows.view())?;
        for (r, &i) in idx.iter().enumerate() {
            z.row_mut(i).assign(&enc.row(r));
        }
    }
    Ok((z, a.to_vec(), y.to_vec()))
}

fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    ModelFile::load(path)?.into_checkpoint()
}

fn checkpoint_models(cp: &CheckpointFile) -> Result<(FlowEncoderPair, Classifier)> {
    Ok((cp.encoder_pair()?, cp.classifier()?))
}

/// Test-split latents of a checkpoint's dataset, grouped and labeled.
struct EncodedSplit {
    z: Array2<f64>,
    a: Vec<u8>,
    y: Vec<u8>,
}

fn encode_cached_split(
    pair: &FlowEncoderPair,
    triple: &DatasetTriple,
    which: usize,
) -> Result<EncodedSplit> {
    let split = triple.splits()[which];
    let x_std = pair.standardizer.transform(&split.x.view());
    let (z, a, y) = encode_split(pair, &x_std, &split.a, &split.y)?;
    Ok(EncodedSplit { z, a, y })
}

fn group_latents(split: &EncodedSplit, group: u8) -> Array2<f64> {
    let idx: Vec<usize> = split
        .a
        .iter()
        .enumerate()
        .filter(|(_, &g)| g == group)
        .map(|(i, _)| i)
        .collect();
    split.z.select(Axis(0), &idx)
}

/// Float formatting used in file names: shortest round-trip, so 0.02 stays
/// "0.02" and 1.0 becomes "1".
fn num_tag(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------------------
// prepare / synth

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PrepareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// adult, compas, crime, law, or synthetic
    #[arg(long)]
    pub dataset: String,
    /// Cache the wide variant that keeps every usable raw column
    #[arg(long, default_value_t = false)]
    pub original: bool,
    /// Bin count for discretized continuous columns
    #[arg(long, default_value_t = 5)]
    pub bins: usize,
}

fn split_stats_report(
    builder: &mut ManifestBuilder,
    triple: &DatasetTriple,
    dataset: &str,
) -> Result<()> {
    #[derive(Serialize)]
    struct Stats<'a> {
        dataset: &'a str,
        columns: usize,
        splits: BTreeMap<&'static str, fairflow_core::data::SplitStats>,
    }
    let mut splits = BTreeMap::new();
    for split in triple.splits() {
        splits.insert(split.split.as_str(), split.stats());
    }
    let stats = Stats { dataset, columns: triple.schema().dim(), splits };
    builder.json_report("stats.json", &stats)?;
    let rows: Vec<String> = triple
        .splits()
        .iter()
        .map(|s| {
            let st = s.stats();
            format!(
                "{},{},{:.6},{:.6}",
                s.split.as_str(),
                st.rows,
                st.group1_share,
                st.positive_rate
            )
        })
        .collect();
    builder.csv_report("stats.csv", "split,rows,group1_share,positive_rate", &rows)?;
    Ok(())
}

impl PrepareArgs {
    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let name = parse_dataset(&self.dataset)?;
        let mut config = self.common.load_config();
        config.quantile_bins = self.bins;
        config.validate()?;

        let mut builder = ManifestBuilder::new("prepare", &self, self.common.seed, &self.common.out)?;
        let triple = if self.original {
            data::load_original(name, &config)?
        } else {
            data::load_dataset(name, &config)?
        };
        if name != DatasetName::Synthetic {
            let raw = RawManifest::resolve(name, &config.root)?;
            builder.record_input(&config.root.join(&raw.train_file))?;
            if let Some(test_file) = &raw.test_file {
                builder.record_input(&config.root.join(test_file))?;
            }
            let override_path = config.root.join(format!("{name}.schema.json"));
            if override_path.exists() {
                builder.record_input(&override_path)?;
            }
        }

        let cache = self.common.cache_dir(name, self.original);
        data::write_cache(&cache, &triple)?;
        for file in ["schema.json", "train.csv", "validation.csv", "test.csv"] {
            builder.record_output(&cache.join(file));
        }
        split_stats_report(&mut builder, &triple, name.as_str())?;
        builder.finish()?;
        println!(
            "cached {name} under {} (train {} / validation {} / test {})",
            cache.display(),
            triple.train.len(),
            triple.validation.len(),
            triple.test.len()
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Rows per group across all splits
    #[arg(long, default_value_t = 4000)]
    pub n_per_group: usize,
}

impl SynthArgs {
    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let mut builder = ManifestBuilder::new("synth", &self, self.common.seed, &self.common.out)?;
        let triple = data::load_synthetic(self.n_per_group, self.common.seed)?;
        let cache = self.common.cache_dir(DatasetName::Synthetic, false);
        data::write_cache(&cache, &triple)?;
        for file in ["schema.json", "train.csv", "validation.csv", "test.csv"] {
            builder.record_output(&cache.join(file));
        }
        split_stats_report(&mut builder, &triple, "synthetic")?;
        builder.finish()?;
        println!(
            "cached synthetic under {} (train {} / validation {} / test {})",
            cache.display(),
            triple.train.len(),
            triple.validation.len(),
            triple.test.len()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// prep-sanity

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PrepSanityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: String,
    /// Hidden widths of the probe classifier, comma separated
    #[arg(long, default_value = "50")]
    pub hidden: String,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Independently seeded repeats to average
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

impl PrepSanityArgs {
    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let name = parse_dataset(&self.dataset)?;
        let mut builder =
            ManifestBuilder::new("prep-sanity", &self, self.common.seed, &self.common.out)?;
        record_cache_inputs(&mut builder, &self.common, name, true)?;
        record_cache_inputs(&mut builder, &self.common, name, false)?;
        let original = read_cached(&self.common, name, true)?;
        let pruned = read_cached(&self.common, name, false)?;
        let config = SanityConfig {
            hidden: parse_usize_list(&self.hidden, "hidden width")?,
            epochs: self.epochs,
            repeats: self.repeats,
            seed: self.common.seed,
            ..SanityConfig::default()
        };
        let report = data::preprocessing_sanity(&original, &pruned, &config)?;
        builder.json_report("sanity.json", &report)?;
        let row = format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            report.dataset,
            report.original_accuracy,
            report.original_std,
            report.preprocessed_accuracy,
            report.preprocessed_std,
            report.gap()
        );
        builder.csv_report(
            "sanity.csv",
            "dataset,original_accuracy,original_std,preprocessed_accuracy,preprocessed_std,gap",
            &[row],
        )?;
        builder.finish()?;
        println!(
            "{}: wide {:.4} vs pruned {:.4} (gap {:+.4})",
            report.dataset,
            report.original_accuracy,
            report.preprocessed_accuracy,
            report.gap()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// fit-density

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitDensityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: String,
    /// gmm or categorical
    #[arg(long, default_value = "gmm")]
    pub density: String,
    /// Mixture components for group 0
    #[arg(long, default_value_t = 2)]
    pub gmm_k0: usize,
    /// Mixture components for group 1
    #[arg(long, default_value_t = 2)]
    pub gmm_k1: usize,
    /// Dirichlet smoothing count for categorical fits
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// EM restarts per group
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
}

#[derive(Serialize)]
struct DensityFitReport {
    dataset: String,
    density: String,
    group0_log_likelihood: f64,
    group0_rows: usize,
    group1_log_likelihood: f64,
    group1_rows: usize,
    model_file: String,
}

impl FitDensityArgs {
    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let name = parse_dataset(&self.dataset)?;
        let mut builder =
            ManifestBuilder::new("fit-density", &self, self.common.seed, &self.common.out)?;
        record_cache_inputs(&mut builder, &self.common, name, false)?;
        let triple = read_cached(&self.common, name, false)?;
        let train = &triple.train;
        let seeds = SeedStream::new(self.common.seed).child("density");

        let (standardizer, group0, group1) = match self.density.as_str() {
            "gmm" => {
                let standardizer = Standardizer::fit(&train.x.view());
                let x_std = standardizer.transform(&train.x.view());
                let fit_group = |group: u8, k: usize| -> Result<DensityModel> {
                    let (rows, _) = group_slice(&x_std, &train.a, &train.y, group);
                    let config =
                        GmmFitConfig { restarts: self.restarts, ..GmmFitConfig::default() };
                    let mut rng = seeds.stream(&format!("group-{group}"));
                    let (gmm, meta) = fit_gmm(&rows.view(), k, &mut rng, &config)?;
                    Ok(DensityModel {
                        kind: DensityKind::Gmm(gmm),
                        group,
                        fit_log_likelihood: meta.final_log_likelihood,
                        sample_count: rows.nrows(),
                    })
                };
                let g0 = fit_group(0, self.gmm_k0)?;
                let g1 = fit_group(1, self.gmm_k1)?;
                (standardizer, g0, g1)
            }
            "categorical" => {
                let cards = triple.schema().cardinalities().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "dataset {name} has continuous columns; a categorical density needs \
                         integer-coded columns only"
                    ))
                })?;
                let fit_group = |group: u8| -> Result<DensityModel> {
                    let (rows, _) = group_slice(&train.x, &train.a, &train.y, group);
                    let coded = rows_from_f64(&rows.view())?;
                    let model = fit_categorical(&coded, &cards, self.alpha)?;
                    let mut ll = 0.0;
                    for row in &coded {
                        ll += model.log_pmf(row)?;
                    }
                    Ok(DensityModel {
                        kind: DensityKind::Categorical(model),
                        group,
                        fit_log_likelihood: ll / coded.len() as f64,
                        sample_count: coded.len(),
                    })
                };
                (Standardizer::identity(train.dim()), fit_group(0)?, fit_group(1)?)
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown density {other:?} (expected gmm or categorical)"
                )))
            }
        };

        let report = DensityFitReport {
            dataset: name.to_string(),
            density: self.density.clone(),
            group0_log_likelihood: group0.fit_log_likelihood,
            group0_rows: group0.sample_count,
            group1_log_likelihood: group1.fit_log_likelihood,
            group1_rows: group1.sample_count,
            model_file: "density.json".into(),
        };
        let file = ModelFile::new(ModelPayload::Density(Box::new(DensityFile {
            dataset: name.to_string(),
            seed: self.common.seed,
            standardizer,
            group0,
            group1,
        })));
        let path = builder.output_path("density.json");
        file.save(&path)?;
        builder.json_report("fit.json", &report)?;
        builder.finish()?;
        println!(
            "fitted {} density for {name}: group 0 ll {:.4} ({} rows), group 1 ll {:.4} ({} rows)",
            self.density,
            report.group0_log_likelihood,
            report.group0_rows,
            report.group1_log_likelihood,
            report.group1_rows
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: String,
    /// Fitted density file; its standardizer is reused as-is
    #[arg(long)]
    pub density: PathBuf,
    /// Single fairness weight in [0, 1]
    #[arg(long, conflicts_with = "gammas")]
    pub gamma: Option<f64>,
    /// Comma-separated sweep of fairness weights
    #[arg(long)]
    pub gammas: Option<String>,
    /// Training runs per gamma; run i uses master seed + i
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Coupling blocks in each encoder
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    /// Hidden widths of the coupling networks, comma separated
    #[arg(long, default_value = "32,32")]
    pub flow_hidden: String,
    /// Hidden widths of the prediction head, comma separated
    #[arg(long, default_value = "32")]
    pub classifier_hidden: String,
    /// convex or chebyshev
    #[arg(long, default_value = "convex")]
    pub scalarization: String,
    /// Batches drawn from the data instead of the fitted densities
    #[arg(long, default_value_t = false)]
    pub batches_from_data: bool,
    /// Also write an SVG of the tradeoff curve
    #[arg(long, default_value_t = false)]
    pub svg: bool,
}

impl TrainArgs {
    fn gammas(&self) -> Result<Vec<f64>> {
        let list = match (&self.gamma, &self.gammas) {
            (Some(g), None) => vec![*g],
            (None, Some(s)) => parse_f64_list(s, "gamma")?,
            (None, None) => vec![0.5],
            (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
        };
        list.into_iter().map(parse_gamma).collect()
    }

    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let name = parse_dataset(&self.dataset)?;
        let gammas = self.gammas()?;
        if self.seeds == 0 {
            return Err(Error::InvalidArgument("need at least one seed".into()));
        }
        let scalarization = match self.scalarization.as_str() {
            "convex" => Scalarization::Convex,
            "chebyshev" => Scalarization::Chebyshev,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown scalarization {other:?} (expected convex or chebyshev)"
                )))
            }
        };
        let flow_hidden = parse_usize_list(&self.flow_hidden, "flow hidden width")?;
        let classifier_hidden = parse_usize_list(&self.classifier_hidden, "classifier width")?;

        let mut builder = ManifestBuilder::new("train", &self, self.common.seed, &self.common.out)?;
        record_cache_inputs(&mut builder, &self.common, name, false)?;
        builder.record_input(&self.density)?;
        let triple = read_cached(&self.common, name, false)?;
        let density = ModelFile::load(&self.density)?.into_density()?;
        if density.dataset != name.as_str() {
            return Err(Error::DomainMismatch(format!(
                "density file was fitted on {:?}, not {name}",
                density.dataset
            )));
        }
        let dim = triple.schema().dim();
        let standardizer = density.standardizer.clone();

        // standardize once; training consumes per-group views
        let train_std = standardizer.transform(&triple.train.x.view());
        let val_std = standardizer.transform(&triple.validation.x.view());
        let test = &triple.test;
        let test_std = standardizer.transform(&test.x.view());
        let (t0, ty0) = group_slice(&train_std, &triple.train.a, &triple.train.y, 0);
        let (t1, ty1) = group_slice(&train_std, &triple.train.a, &triple.train.y, 1);
        let (v0, vy0) = group_slice(&val_std, &triple.validation.a, &triple.validation.y, 0);
        let (v1, vy1) = group_slice(&val_std, &triple.validation.a, &triple.validation.y, 1);
        let splits = TrainSplits {
            train0: LabeledGroup { x: t0.view(), y: &ty0 },
            train1: LabeledGroup { x: t1.view(), y: &ty1 },
            val0: LabeledGroup { x: v0.view(), y: &vy0 },
            val1: LabeledGroup { x: v1.view(), y: &vy1 },
        };

        let mut tradeoff_rows = Vec::new();
        let mut curve: Vec<(f64, f64)> = Vec::new();
        let mut acc_curve: Vec<(f64, f64)> = Vec::new();
        for &gamma in &gammas {
            for offset in 0..self.seeds {
                let run_seed = self.common.seed + offset;
                let mut config = TrainConfig::new(dim);
                config.gamma = gamma;
                config.epochs = self.epochs;
                config.batch_size = self.batch_size;
                config.lr = self.lr;
                config.weight_decay = self.weight_decay;
                config.seed = run_seed;
                config.scalarization = scalarization;
                config.batches_from_data = self.batches_from_data;
                config.classifier_hidden = classifier_hidden.clone();
                let mut flow = FlowConfig::new(dim);
                flow.blocks = self.blocks;
                flow.hidden = flow_hidden.clone();
                config.flow = flow;

                let trained =
                    train_fnf(&config, &density.group0, &density.group1, &splits, standardizer.clone())?;

                let tag = format!("g{}-s{run_seed}", num_tag(gamma));
                let trace_rows: Vec<String> = trained
                    .trace
                    .epochs
                    .iter()
                    .map(|e| {
                        format!(
                            "{},{},{},{},{},{},{},{}",
                            e.epoch, e.l0, e.l1, e.l_clf, e.joint, e.val_delta, e.val_accuracy,
                            e.val_joint
                        )
                    })
                    .collect();
                builder.csv_report(
                    &format!("trace-{tag}.csv"),
                    "epoch,l0,l1,l_clf,joint,val_delta,val_accuracy,val_joint",
                    &trace_rows,
                )?;

                // held-out readout of the winning checkpoint
                let adv = OptimalAdversary::for_flow(&trained.pair, &density.group0, &density.group1);
                let (z0, _) = group_slice(&test_std, &test.a, &test.y, 0);
                let (z1, _) = group_slice(&test_std, &test.a, &test.y, 1);
                let (enc0, _) = trained.pair.encoder(0).forward_batch(&z0.view())?;
                let (enc1, _) = trained.pair.encoder(1).forward_batch(&z1.view())?;
                let test_delta = adv.delta_on_latents(&enc0.view(), &enc1.view())?;
                let (z, _, y) = encode_split(&trained.pair, &test_std, &test.a, &test.y)?;
                let preds = trained.classifier.predict(&z.view(), 0.5)?;
                let test_accuracy = preds.iter().zip(&y).filter(|(p, t)| p == t).count() as f64
                    / y.len().max(1) as f64;

                let checkpoint = CheckpointFile::from_trained(
                    name.as_str(),
                    run_seed,
                    config,
                    density.group0.clone(),
                    density.group1.clone(),
                    &trained,
                )?;
                let path = builder.output_path(&format!("checkpoint-{tag}.json"));
                ModelFile::new(ModelPayload::Checkpoint(Box::new(checkpoint))).save(&path)?;

                let last = trained.trace.epochs.last();
                let val_delta = last.map_or(f64::NAN, |e| e.val_delta);
                let val_accuracy = last.map_or(f64::NAN, |e| e.val_accuracy);
                tradeoff_rows.push(format!(
                    "{gamma},{run_seed},{},{test_delta},{test_accuracy}",
                    trained.best_epoch
                ));
                curve.push((gamma, test_delta));
                acc_curve.push((gamma, test_accuracy));
                println!(
                    "gamma {gamma} seed {run_seed}: best epoch {}, val delta {val_delta:.4}, \
                     val acc {val_accuracy:.4}, test delta {test_delta:.4}, test acc {test_accuracy:.4}",
                    trained.best_epoch
                );
            }
        }
        builder.csv_report(
            "tradeoff.csv",
            "gamma,seed,best_epoch,test_delta,test_accuracy",
            &tradeoff_rows,
        )?;
        if self.svg {
            let svg = render(
                "fairness / accuracy tradeoff",
                "gamma",
                "held-out value",
                &[
                    Series { label: "test delta".into(), points: curve, line: false },
                    Series { label: "test accuracy".into(), points: acc_curve, line: false },
                ],
            );
            let path = builder.output_path("tradeoff.svg");
            std::fs::write(&path, svg)?;
        }
        builder.finish()?;
        println!(
            "wrote {} checkpoints and tradeoff.csv under {}",
            gammas.len() as u64 * self.seeds,
            self.common.out.display()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// certify

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CertifyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fresh samples per group
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    /// Certificate failure probability
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Also estimate label-conditional distances on the cached test split
    #[arg(long, default_value_t = false)]
    pub conditional: bool,
}

fn certification_row(report: &CertificationReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        report.delta_hat,
        report.samples_per_group,
        report.epsilon,
        report.failure_probability,
        report.max_adv_acc,
        report.demographic_parity_bound
    )
}

const CERTIFICATION_HEADER: &str =
    "delta_hat,samples_per_group,epsilon,failure_probability,max_adv_acc,demographic_parity_bound";

impl CertifyArgs {
    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let mut builder =
            ManifestBuilder::new("certify", &self, self.common.seed, &self.common.out)?;
        builder.record_input(&self.checkpoint)?;
        let cp = load_checkpoint(&self.checkpoint)?;
        let (pair, _) = checkpoint_models(&cp)?;
        let adv = OptimalAdversary::for_flow(&pair, &cp.base0, &cp.base1);
        let mut rng = SeedStream::new(self.common.seed).stream("certify");
        let mut report = certify(&adv, self.n, self.delta, &mut rng)?;

        if self.conditional {
            let name = parse_dataset(&cp.dataset)?;
            record_cache_inputs(&mut builder, &self.common, name, false)?;
            let triple = read_cached(&self.common, name, false)?;
            let test = encode_cached_split(&pair, &triple, 2)?;
            let z0 = group_latents(&test, 0);
            let z1 = group_latents(&test, 1);
            let y0: Vec<u8> = test.a.iter().zip(&test.y).filter(|(&g, _)| g == 0).map(|(_, &y)| y).collect();
            let y1: Vec<u8> = test.a.iter().zip(&test.y).filter(|(&g, _)| g == 1).map(|(_, &y)| y).collect();
            report.conditional =
                Some(conditional_deltas(&adv, &z0.view(), &y0, &z1.view(), &y1)?);
        }

        builder.json_report("certify.json", &report)?;
        builder.csv_report("certify.csv", CERTIFICATION_HEADER, &[certification_row(&report)])?;
        builder.finish()?;
        println!(
            "delta_hat {:.4} + epsilon {:.4} -> max adversarial accuracy {:.4} \
             (n {} per group, failure probability {})",
            report.delta_hat,
            report.epsilon,
            report.max_adv_acc,
            report.samples_per_group,
            report.failure_probability
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// attack

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttackArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adversary shapes as DEPTHxWIDTH, comma separated
    #[arg(long, default_value = "1x8,2x50,3x200")]
    pub arch: String,
    /// Restarts per architecture; the best one counts
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Samples per group behind the certified bound
    #[arg(long, default_value_t = 100_000)]
    pub bound_n: usize,
    /// Failure probability of the certified bound
    #[arg(long, default_value_t = 0.05)]
    pub bound_delta: f64,
}

#[derive(Serialize)]
struct AttackReport {
    dataset: String,
    certified_max_accuracy: f64,
    delta_hat: f64,
    epsilon: f64,
    attacks: Vec<AttackResult>,
    violations: usize,
}

impl AttackArgs {
    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let architectures = parse_architectures(&self.arch)?;
        let mut builder = ManifestBuilder::new("attack", &self, self.common.seed, &self.common.out)?;
        builder.record_input(&self.checkpoint)?;
        let cp = load_checkpoint(&self.checkpoint)?;
        let (pair, _) = checkpoint_models(&cp)?;
        let name = parse_dataset(&cp.dataset)?;
        record_cache_inputs(&mut builder, &self.common, name, false)?;
        let triple = read_cached(&self.common, name, false)?;

        let train = encode_cached_split(&pair, &triple, 0)?;
        let test = encode_cached_split(&pair, &triple, 2)?;
        let config = AttackConfig {
            hidden: architectures,
            seeds: self.seeds,
            epochs: self.epochs,
            ..AttackConfig::default()
        };
        let attack_seed = SeedStream::new(self.common.seed).child("attack").seed();
        let attacks = attack_suite(
            &train.z.view(),
            &train.a,
            &test.z.view(),
            &test.a,
            &config,
            attack_seed,
        )?;

        let adv = OptimalAdversary::for_flow(&pair, &cp.base0, &cp.base1);
        let mut rng = SeedStream::new(self.common.seed).stream("bound");
        let bound = certify(&adv, self.bound_n, self.bound_delta, &mut rng)?;
        let violations = attacks
            .iter()
            .filter(|r| r.best_balanced_accuracy > bound.max_adv_acc)
            .count();

        let report = AttackReport {
            dataset: cp.dataset.clone(),
            certified_max_accuracy: bound.max_adv_acc,
            delta_hat: bound.delta_hat,
            epsilon: bound.epsilon,
            attacks,
            violations,
        };
        builder.json_report("attack.json", &report)?;
        let rows: Vec<String> = report
            .attacks
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{}",
                    r.architecture, r.seeds, r.best_balanced_accuracy, report.certified_max_accuracy
                )
            })
            .collect();
        builder.csv_report(
            "attack.csv",
            "architecture,seeds,best_balanced_accuracy,certified_max_accuracy",
            &rows,
        )?;
        builder.finish()?;
        for r in &report.attacks {
            println!(
                "arch {}: balanced accuracy {:.4} (certified bound {:.4})",
                r.architecture, r.best_balanced_accuracy, report.certified_max_accuracy
            );
        }
        println!("violations: {}", report.violations);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Decision threshold; picked on the validation split when omitted
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    dataset: String,
    gamma: f64,
    seed: u64,
    test_delta: f64,
    metrics: fairflow_core::downstream::FairnessMetrics,
}

impl EvalArgs {
    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let mut builder = ManifestBuilder::new("eval", &self, self.common.seed, &self.common.out)?;
        builder.record_input(&self.checkpoint)?;
        let cp = load_checkpoint(&self.checkpoint)?;
        let (pair, classifier) = checkpoint_models(&cp)?;
        let name = parse_dataset(&cp.dataset)?;
        record_cache_inputs(&mut builder, &self.common, name, false)?;
        let triple = read_cached(&self.common, name, false)?;

        let threshold = match self.threshold {
            Some(t) => t,
            None => {
                let val = encode_cached_split(&pair, &triple, 1)?;
                optimal_threshold(&classifier, &val.z.view(), &val.y)?
            }
        };
        let test = encode_cached_split(&pair, &triple, 2)?;
        let metrics = eval_metrics(&classifier, &test.z.view(), &test.a, &test.y, threshold)?;
        let adv = OptimalAdversary::for_flow(&pair, &cp.base0, &cp.base1);
        let z0 = group_latents(&test, 0);
        let z1 = group_latents(&test, 1);
        let test_delta = adv.delta_on_latents(&z0.view(), &z1.view())?;

        let report = EvalReport {
            dataset: cp.dataset.clone(),
            gamma: cp.train_config.gamma,
            seed: cp.seed,
            test_delta,
            metrics,
        };
        builder.json_report("eval.json", &report)?;
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let m = &report.metrics;
        let row = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            report.gamma,
            report.seed,
            m.threshold,
            m.accuracy,
            m.balanced_accuracy,
            m.demographic_parity_distance,
            fmt_opt(m.equalized_odds_gap_y0),
            fmt_opt(m.equalized_odds_gap_y1),
            fmt_opt(m.equalized_odds_distance),
            fmt_opt(m.equal_opportunity_distance),
            report.test_delta
        );
        builder.csv_report(
            "eval.csv",
            "gamma,seed,threshold,accuracy,balanced_accuracy,demographic_parity_distance,\
             equalized_odds_gap_y0,equalized_odds_gap_y1,equalized_odds_distance,\
             equal_opportunity_distance,test_delta",
            &[row],
        )?;
        builder.finish()?;
        println!(
            "threshold {:.4}: accuracy {:.4}, demographic parity distance {:.4}, test delta {:.4}",
            report.metrics.threshold,
            report.metrics.accuracy,
            report.metrics.demographic_parity_distance,
            report.test_delta
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// match-discrete

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MatchDiscreteArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: String,
    /// Mixing weight between the optimal and label-preserving transports
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Dirichlet smoothing count for the per-group fits
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Largest enumerable domain size
    #[arg(long, default_value_t = 100_000)]
    pub domain_cap: usize,
}

#[derive(Serialize)]
struct MatchReport {
    dataset: String,
    gamma: f64,
    domain_points: usize,
    distance: f64,
    distance_optimal: f64,
    distance_label_preserving: f64,
    degenerate_label_classes: Vec<u8>,
    model_file: String,
}

impl MatchDiscreteArgs {
    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let name = parse_dataset(&self.dataset)?;
        let gamma = parse_gamma(self.gamma)?;
        let mut builder =
            ManifestBuilder::new("match-discrete", &self, self.common.seed, &self.common.out)?;
        record_cache_inputs(&mut builder, &self.common, name, false)?;
        let triple = read_cached(&self.common, name, false)?;
        let cards = triple.schema().cardinalities().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "dataset {name} has continuous columns; discrete matching needs integer codes"
            ))
        })?;
        let train = &triple.train;
        let domain = FiniteDomain::exhaustive(&cards, self.domain_cap)?;
        let pmf_for = |group: u8| -> Result<Vec<f64>> {
            let (rows, _) = group_slice(&train.x, &train.a, &train.y, group);
            let coded = rows_from_f64(&rows.view())?;
            let model = fit_categorical(&coded, &cards, self.alpha)?;
            let (pmf, _) = domain.evaluate(&model)?;
            Ok(pmf)
        };
        let p0 = pmf_for(0)?;
        let p1 = pmf_for(1)?;

        // label for each domain point: majority train label, with unseen
        // points falling back to the global majority (ties resolve to 1)
        let mut counts: BTreeMap<Vec<u32>, [usize; 2]> = BTreeMap::new();
        for (row, &label) in rows_from_f64(&train.x.view())?.iter().zip(&train.y) {
            counts.entry(row.clone()).or_insert([0, 0])[usize::from(label)] += 1;
        }
        let positive = train.y.iter().filter(|&&y| y == 1).count();
        let global = u8::from(2 * positive >= train.y.len());
        let labels: Vec<u8> = domain
            .points()
            .iter()
            .map(|p| match counts.get(p) {
                Some([n0, n1]) if n0 != n1 => u8::from(n1 > n0),
                Some(_) => global,
                None => global,
            })
            .collect();

        let mut matching = label_split_matching(&domain, &p0, &p1, &labels, gamma)?;
        let distance = matching.statistical_distance();
        matching.set_gamma(1.0)?;
        let distance_optimal = matching.statistical_distance();
        matching.set_gamma(0.0)?;
        let distance_label = matching.statistical_distance();
        matching.set_gamma(gamma)?;

        let report = MatchReport {
            dataset: name.to_string(),
            gamma,
            domain_points: domain.len(),
            distance,
            distance_optimal,
            distance_label_preserving: distance_label,
            degenerate_label_classes: matching.degenerate_classes().to_vec(),
            model_file: "matching.json".into(),
        };
        let file = ModelFile::new(ModelPayload::Matching(Box::new(MatchingFile {
            dataset: name.to_string(),
            seed: self.common.seed,
            matching,
        })));
        let path = builder.output_path("matching.json");
        file.save(&path)?;
        builder.json_report("match.json", &report)?;
        builder.csv_report(
            "match.csv",
            "gamma,distance",
            &[
                format!("0,{distance_label}"),
                format!("{gamma},{distance}"),
                format!("1,{distance_optimal}"),
            ],
        )?;
        builder.finish()?;
        println!(
            "matched {} domain points: distance {:.6} at gamma {gamma} \
             (optimal {:.6}, label-preserving {:.6})",
            report.domain_points, report.distance, report.distance_optimal,
            report.distance_label_preserving
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// recourse

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RecourseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Rejected test rows to process
    #[arg(long, default_value_t = 10)]
    pub limit: usize,
    /// Interpolation steps along the latent segment
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Feature indices that must not change, comma separated
    #[arg(long)]
    pub immutable: Option<String>,
}

#[derive(Serialize)]
struct RecourseSummary {
    dataset: String,
    threshold: f64,
    rejected_rows: usize,
    processed: usize,
    found: usize,
    not_actionable: usize,
    no_accepted_latent: usize,
}

impl RecourseArgs {
    fn run(mut self) -> Result<()> {
        self.common = self.common.normalized();
        let mut builder =
            ManifestBuilder::new("recourse", &self, self.common.seed, &self.common.out)?;
        builder.record_input(&self.checkpoint)?;
        let cp = load_checkpoint(&self.checkpoint)?;
        let (pair, classifier) = checkpoint_models(&cp)?;
        let name = parse_dataset(&cp.dataset)?;
        record_cache_inputs(&mut builder, &self.common, name, false)?;
        let triple = read_cached(&self.common, name, false)?;

        let config = RecourseConfig {
            steps: self.steps,
            threshold: self.threshold,
            immutable: match &self.immutable {
                Some(s) => parse_usize_list(s, "immutable index")?,
                None => Vec::new(),
            },
            immutable_tolerance: 1e-6,
        };

        // accepted candidates come from the same group's train split
        let train = encode_cached_split(&pair, &triple, 0)?;
        let pools = [group_latents(&train, 0), group_latents(&train, 1)];
        let test = &triple.test;
        let test_std = pair.standardizer.transform(&test.x.view());
        let probs = {
            let encoded = encode_cached_split(&pair, &triple, 2)?;
            classifier.predict_proba(&encoded.z.view())?
        };
        let rejected: Vec<usize> =
            (0..test.len()).filter(|&i| probs[i] < self.threshold).collect();

        let mut rows = Vec::new();
        let mut found = 0usize;
        let mut not_actionable = 0usize;
        let mut no_latent = 0usize;
        let processed = rejected.len().min(self.limit);
        for &i in rejected.iter().take(processed) {
            let x_std: Vec<f64> = test_std.row(i).to_vec();
            let group = test.a[i];
            let outcome =
                recourse(&pair, &classifier, &x_std, group, &pools[group as usize].view(), &config)?;
            let (kind, interpolation, probability, effort) = match &outcome {
                RecourseOutcome::AlreadyAccepted => ("already_accepted", None, None, None),
                RecourseOutcome::NoAcceptedLatent => {
                    no_latent += 1;
                    ("no_accepted_latent", None, None, None)
                }
                RecourseOutcome::NotActionable { candidate, .. } => {
                    not_actionable += 1;
                    ("not_actionable", Some(candidate.interpolation), Some(candidate.probability),
                     Some(l2(&candidate.delta_raw)))
                }
                RecourseOutcome::Found(point) => {
                    found += 1;
                    ("found", Some(point.interpolation), Some(point.probability),
                     Some(l2(&point.delta_raw)))
                }
            };
            let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            rows.push(format!(
                "{i},{group},{kind},{},{},{}",
                fmt_opt(interpolation),
                fmt_opt(probability),
                fmt_opt(effort)
            ));
        }
        builder.csv_report(
            "recourse.csv",
            "row,group,outcome,interpolation,probability,l2_change",
            &rows,
        )?;
        let summary = RecourseSummary {
            dataset: cp.dataset.clone(),
            threshold: self.threshold,
            rejected_rows: rejected.len(),
            processed,
            found,
            not_actionable,
            no_accepted_latent: no_latent,
        };
        builder.json_report("recourse.json", &summary)?;
        builder.finish()?;
        println!(
            "recourse for {processed} of {} rejected rows: {found} found, \
             {not_actionable} not actionable, {no_latent} without accepted latents",
            rejected.len()
        );
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// rerun

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// Manifest written by a previous run
    #[arg(long)]
    pub manifest: PathBuf,
}

impl RerunArgs {
    fn run(self) -> Result<()> {
        let manifest = read_manifest(&self.manifest)?;
        println!("rerunning {} from {}", manifest.command, self.manifest.display());
        let config = manifest.config;
        let command = match manifest.command.as_str() {
            "prepare" => Command::Prepare(serde_json::from_value(config)?),
            "synth" => Command::Synth(serde_json::from_value(config)?),
            "prep-sanity" => Command::PrepSanity(serde_json::from_value(config)?),
            "fit-density" => Command::FitDensity(serde_json::from_value(config)?),
            "train" => Command::Train(serde_json::from_value(config)?),
            "certify" => Command::Certify(serde_json::from_value(config)?),
            "attack" => Command::Attack(serde_json::from_value(config)?),
            "eval" => Command::Eval(serde_json::from_value(config)?),
            "match-discrete" => Command::MatchDiscrete(serde_json::from_value(config)?),
            "recourse" => Command::Recourse(serde_json::from_value(config)?),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "manifest names unknown command {other:?}"
                )))
            }
        };
        command.run()
    }
}

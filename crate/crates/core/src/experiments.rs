//! End-to-end reproduction harness.
//!
//! An [`ExperimentSpec`] is a flat `key = value` file. [`run_pipeline`]
//! executes train -> label -> associate -> prune -> diverge/converge ->
//! evaluate for every seed and aggregates the per-seed accuracies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::association::{self, associate, Association, LearningRule, PruneSpec};
use crate::data::{self, FeatureMatrix, PairedDataset};
use crate::error::{Error, Result};
use crate::inference::{self, ConvergenceConfig, Disconnected};
use crate::labeling::{self, LabeledSom};
use crate::rng::{self, Stream};
use crate::som::{self, GridMetric, SomGrid, TrainSchedule};
use crate::synthetic::TwoModalitySpec;

/// Environment variable naming the trained-map cache directory.
pub const CACHE_ENV: &str = "RESOM_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    None,
    MinMax,
    Standardize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(TwoModalitySpec),
    /// Feature files: RSM1 paths or `images,labels` IDX pairs. `y` is
    /// optional for unimodal runs.
    Files { x_train: String, x_test: String, y: Option<(String, String)> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub source: DataSource,
    pub normalize_x: Normalization,
    pub normalize_y: Normalization,
    pub data_seed: u64,
    /// Keep only the first `n` training rows (0 keeps all).
    pub train_limit: usize,
    pub grid_x: (usize, usize),
    pub grid_y: (usize, usize),
    pub schedule: TrainSchedule,
    pub label_fraction_x: f64,
    pub label_fraction_y: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub rule: LearningRule,
    pub eta: f64,
    pub assoc_epochs: usize,
    pub keep_convergence: f64,
    pub keep_divergence: f64,
    pub beta_divergence: f64,
    /// One value fixes beta; several are searched on a validation split.
    pub beta_grid: Vec<f64>,
    pub validation_fraction: f64,
    pub variants: Vec<ConvergenceConfig>,
    pub disconnected: Disconnected,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            source: DataSource::Synthetic(TwoModalitySpec::default()),
            normalize_x: Normalization::None,
            normalize_y: Normalization::None,
            data_seed: 0,
            train_limit: 0,
            grid_x: (10, 10),
            grid_y: (10, 10),
            schedule: TrainSchedule::default(),
            label_fraction_x: 0.01,
            label_fraction_y: 0.1,
            alpha_x: 1.0,
            alpha_y: 1.0,
            rule: LearningRule::Hebb,
            eta: 1.0,
            assoc_epochs: 1,
            keep_convergence: 0.1,
            keep_divergence: 0.25,
            beta_divergence: 1.0,
            beta_grid: vec![10.0],
            validation_fraction: 0.1,
            variants: ConvergenceConfig::variants(10.0),
            disconnected: Disconnected::Zero,
            seeds: (0..10).collect(),
        }
    }
}

fn config_err(key: &str, value: &str, what: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key} = {value}: {what}"))
}

fn resolve_paths(base: &Path, value: &str) -> String {
    value
        .split(',')
        .map(|p| {
            let p = Path::new(p.trim());
            if p.is_absolute() { p.to_path_buf() } else { base.join(p) }.display().to_string()
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| config_err(key, value, e))
}

/// `WxH`, returned as (width, height).
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| config_err("grid", s, "expected WxH"))?;
    let w = parse_num("grid", w.trim())?;
    let h = parse_num("grid", h.trim())?;
    if w == 0 || h == 0 {
        return Err(config_err("grid", s, "sides must be positive"));
    }
    Ok((w, h))
}

/// `a-b` (inclusive range) or a comma-separated list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u64, u64) = (parse_num("seeds", a.trim())?, parse_num("seeds", b.trim())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|t| parse_num("seeds", t.trim())).collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(config_err("seeds", s, "at least one seed required"));
    }
    Ok(seeds)
}

fn parse_list(key: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|t| parse_num(key, t.trim())).collect()
}

fn parse_pair(key: &str, s: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once(':').ok_or_else(|| config_err(key, s, "expected initial:final"))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

fn parse_norm(key: &str, s: &str) -> Result<Normalization> {
    match s {
        "none" => Ok(Normalization::None),
        "minmax" => Ok(Normalization::MinMax),
        "standardize" => Ok(Normalization::Standardize),
        _ => Err(config_err(key, s, "expected none|minmax|standardize")),
    }
}

/// Parses a variant name such as `max-norm-bmu` with the given beta.
pub fn parse_variant(name: &str, beta: f64) -> Result<ConvergenceConfig> {
    let parts: Vec<&str> = name.split('-').collect();
    if parts.len() != 3 {
        return Err(config_err("variants", name, "expected update-activities-neurons"));
    }
    let wrap = |e: Error| config_err("variants", name, e);
    Ok(ConvergenceConfig::new(
        parts[0].parse().map_err(wrap)?,
        parts[1].parse().map_err(wrap)?,
        parts[2].parse().map_err(wrap)?,
        beta,
    ))
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_in(text, None)
    }

    /// Parses with relative data paths resolved against `base`.
    pub fn parse_in(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, mut v) = (k.trim().to_string(), v.trim().to_string());
            if let (Some(base), true) = (base, k.ends_with(".train") || k.ends_with(".test")) {
                v = resolve_paths(base, &v);
            }
            kv.insert(k, v);
        }
        Self::from_map(&kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
        Self::parse_in(&text, path.parent())
    }

    fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut s = ExperimentSpec::default();
        let mut syn = TwoModalitySpec::default();
        let mut files: BTreeMap<&str, String> = BTreeMap::new();
        let mut variant_names: Option<String> = None;
        let mut source = "synthetic".to_string();
        for (k, v) in kv {
            let v = v.as_str();
            match k.as_str() {
                "name" => s.name = v.to_string(),
                "source" => source = v.to_string(),
                "x.train" => drop(files.insert("x.train", v.into())),
                "x.test" => drop(files.insert("x.test", v.into())),
                "y.train" => drop(files.insert("y.train", v.into())),
                "y.test" => drop(files.insert("y.test", v.into())),
                "x.normalize" => s.normalize_x = parse_norm(k, v)?,
                "y.normalize" => s.normalize_y = parse_norm(k, v)?,
                "synthetic.classes" => syn.classes = parse_num(k, v)?,
                "synthetic.train_per_class" => syn.train_per_class = parse_num(k, v)?,
                "synthetic.test_per_class" => syn.test_per_class = parse_num(k, v)?,
                "synthetic.dim_x" => syn.dim_x = parse_num(k, v)?,
                "synthetic.dim_y" => syn.dim_y = parse_num(k, v)?,
                "synthetic.noise" => syn.noise = parse_num(k, v)?,
                "synthetic.pair_separation" => syn.pair_separation = parse_num(k, v)?,
                "data_seed" => s.data_seed = parse_num(k, v)?,
                "train_limit" => s.train_limit = parse_num(k, v)?,
                "grid.x" => s.grid_x = parse_grid(v)?,
                "grid.y" => s.grid_y = parse_grid(v)?,
                "epochs" => s.schedule.epochs = parse_num(k, v)?,
                "lr" => (s.schedule.lr_initial, s.schedule.lr_final) = parse_pair(k, v)?,
                "sigma" => (s.schedule.sigma_initial, s.schedule.sigma_final) = parse_pair(k, v)?,
                "metric" => s.schedule.metric = v.parse::<GridMetric>().map_err(|e| config_err(k, v, e))?,
                "label_fraction.x" => s.label_fraction_x = parse_num(k, v)?,
                "label_fraction.y" => s.label_fraction_y = parse_num(k, v)?,
                "alpha.x" => s.alpha_x = parse_num(k, v)?,
                "alpha.y" => s.alpha_y = parse_num(k, v)?,
                "rule" => s.rule = v.parse().map_err(|e| config_err(k, v, e))?,
                "eta" => s.eta = parse_num(k, v)?,
                "assoc_epochs" => s.assoc_epochs = parse_num(k, v)?,
                "keep.convergence" => s.keep_convergence = parse_num(k, v)?,
                "keep.divergence" => s.keep_divergence = parse_num(k, v)?,
                "beta.divergence" => s.beta_divergence = parse_num(k, v)?,
                "beta" => s.beta_grid = parse_list(k, v)?,
                "validation_fraction" => s.validation_fraction = parse_num(k, v)?,
                "variants" => variant_names = Some(v.to_string()),
                "disconnected" => s.disconnected = v.parse().map_err(|e| config_err(k, v, e))?,
                "seeds" => s.seeds = parse_seeds(v)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        s.source = match source.as_str() {
            "synthetic" => DataSource::Synthetic(syn),
            "files" => {
                let need = |key: &str| {
                    files.get(key).cloned().ok_or_else(|| Error::Config(format!("source = files requires {key}")))
                };
                let y = match (files.get("y.train"), files.get("y.test")) {
                    (Some(a), Some(b)) => Some((a.clone(), b.clone())),
                    (None, None) => None,
                    _ => return Err(Error::Config("y.train and y.test must be given together".into())),
                };
                DataSource::Files { x_train: need("x.train")?, x_test: need("x.test")?, y }
            }
            other => return Err(config_err("source", other, "expected synthetic|files")),
        };
        let beta0 = s.beta_grid[0];
        s.variants = match variant_names.as_deref() {
            None | Some("all") => ConvergenceConfig::variants(beta0),
            Some(list) => list.split(',').map(|n| parse_variant(n.trim(), beta0)).collect::<Result<_>>()?,
        };
        for v in &mut s.variants {
            v.disconnected = s.disconnected;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
        let frac = |k: &str, f: f64| {
            if f > 0.0 && f <= 1.0 {
                Ok(())
            } else {
                Err(config_err(k, &f.to_string(), "must be in (0, 1]"))
            }
        };
        frac("label_fraction.x", self.label_fraction_x)?;
        frac("label_fraction.y", self.label_fraction_y)?;
        frac("keep.convergence", self.keep_convergence)?;
        frac("keep.divergence", self.keep_divergence)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.beta_grid.is_empty() || self.beta_grid.iter().any(|b| b.is_nan() || *b <= 0.0) {
            return Err(Error::Config("beta values must be positive".into()));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if let DataSource::Files { x_train, x_test, y } = &self.source {
            let mut paths = vec![x_train, x_test];
            if let Some((a, b)) = y {
                paths.extend([a, b]);
            }
            for p in paths {
                for part in p.split(',') {
                    if !Path::new(part.trim()).exists() {
                        return Err(Error::Config(format!("file not found: {}", part.trim())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical text used for hashing.
    pub fn canonical(&self) -> String {
        format!("{self:?}")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn is_multimodal(&self) -> bool {
        match &self.source {
            DataSource::Synthetic(_) => true,
            DataSource::Files { y, .. } => y.is_some(),
        }
    }
}

/// Pipeline stages, used to tag failures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Load,
    Train,
    Label,
    Associate,
    Prune,
    Diverge,
    Converge,
    Evaluate,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", format!("{self:?}").to_lowercase())
    }
}

trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage: stage.to_string(), source: Box::new(e) },
        })
    }
}

/// Loaded, normalized and paired data shared by all seeds.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: PairedDataset,
    pub test: PairedDataset,
    pub classes: usize,
    pub multimodal: bool,
}

fn normalize(train: FeatureMatrix, test: FeatureMatrix, how: Normalization) -> Result<(FeatureMatrix, FeatureMatrix)> {
    match how {
        Normalization::None => Ok((train, test)),
        Normalization::Standardize => data::standardize_then_minmax(&train, &test),
        Normalization::MinMax => {
            // rescale both with the training range
            let rows = train.rows();
            let mut labels = train.labels().to_vec();
            labels.extend_from_slice(test.labels());
            let mut values = train.values().to_vec();
            values.extend_from_slice(test.values());
            let all = FeatureMatrix::new(train.cols(), values, labels)?;
            let (mins, maxs) = column_minmax(&train);
            let scaled = scale_columns(&all, &mins, &maxs);
            let idx: Vec<usize> = (0..all.rows()).collect();
            Ok((scaled.select(&idx[..rows]), scaled.select(&idx[rows..])))
        }
    }
}

fn column_minmax(m: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; m.cols()];
    let mut hi = vec![f64::NEG_INFINITY; m.cols()];
    for r in 0..m.rows() {
        for (c, &v) in m.row(r).iter().enumerate() {
            lo[c] = lo[c].min(v as f64);
            hi[c] = hi[c].max(v as f64);
        }
    }
    (lo, hi)
}

fn scale_columns(m: &FeatureMatrix, lo: &[f64], hi: &[f64]) -> FeatureMatrix {
    let cols = m.cols();
    let values = m
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % cols;
            let span = hi[c] - lo[c];
            if span > 0.0 {
                ((v as f64 - lo[c]) / span).clamp(0.0, 1.0) as f32
            } else {
                0.0
            }
        })
        .collect();
    FeatureMatrix::new(cols, values, m.labels().to_vec()).expect("same shape")
}

fn limit_rows(m: FeatureMatrix, limit: usize) -> FeatureMatrix {
    if limit == 0 || limit >= m.rows() {
        return m;
    }
    let idx: Vec<usize> = (0..limit).collect();
    m.select(&idx)
}

pub fn prepare_data(spec: &ExperimentSpec) -> Result<PreparedData> {
    let (train, test, multimodal) = match &spec.source {
        DataSource::Synthetic(s) => {
            let (train, test) = s.generate(spec.data_seed);
            (train, test, true)
        }
        DataSource::Files { x_train, x_test, y } => {
            let xtr = limit_rows(data::load_any(x_train)?, spec.train_limit);
            let xte = data::load_any(x_test)?;
            let (xtr, xte) = normalize(xtr, xte, spec.normalize_x)?;
            match y {
                Some((y_train, y_test)) => {
                    let ytr = data::load_any(y_train)?;
                    let yte = data::load_any(y_test)?;
                    let (ytr, yte) = normalize(ytr, yte, spec.normalize_y)?;
                    let train = data::pair_by_class(&xtr, &ytr, spec.data_seed)?;
                    let test = data::pair_by_class(&xte, &yte, spec.data_seed.wrapping_add(1))?;
                    (train, test, true)
                }
                None => {
                    // unimodal: mirror x so the paired plumbing stays uniform
                    let train = PairedDataset::aligned(xtr.clone(), xtr)?;
                    let test = PairedDataset::aligned(xte.clone(), xte)?;
                    (train, test, false)
                }
            }
        }
    };
    let classes = train.num_classes().max(test.num_classes());
    Ok(PreparedData { train, test, classes, multimodal })
}

/// Content-addressed store of trained maps.
#[derive(Clone, Debug, Default)]
pub struct MapCache {
    dir: Option<PathBuf>,
}

impl MapCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        MapCache { dir }
    }

    pub fn from_env() -> Self {
        MapCache { dir: std::env::var_os(CACHE_ENV).map(PathBuf::from) }
    }

    pub fn key(data_hash: &str, grid: (usize, usize), schedule: &TrainSchedule, seed: u64) -> String {
        let text = format!("{data_hash}|{grid:?}|{schedule:?}|{seed}");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Returns the cached map for `key`, or trains it with `train` and
    /// stores it. The flag is true on a cache hit.
    pub fn get_or_train<F>(&self, key: &str, train: F) -> Result<(SomGrid, bool)>
    where
        F: FnOnce() -> Result<SomGrid>,
    {
        let Some(dir) = &self.dir else {
            return Ok((train()?, false));
        };
        let path = dir.join(format!("{key}.rsom"));
        if path.exists() {
            if let Ok((som, _)) = som::load_rsom(&path) {
                return Ok((som, true));
            }
        }
        let som = train()?;
        std::fs::create_dir_all(dir)?;
        // write-then-rename so concurrent seeds never observe a partial file
        let tmp = dir.join(format!("{key}.rsom.tmp{}", std::process::id()));
        som::save_rsom(&tmp, &som, None)?;
        std::fs::rename(&tmp, &path)?;
        Ok((som, false))
    }
}

/// Synapse counts for one seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SynapseCounts {
    pub potential: usize,
    pub sprouted_xy: usize,
    pub sprouted_yx: usize,
    pub kept_xy: usize,
    pub kept_yx: usize,
}

/// Everything one seed produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracies: BTreeMap<String, f64>,
    pub betas: BTreeMap<String, f64>,
    pub synapses: SynapseCounts,
    pub artifact_hashes: BTreeMap<String, String>,
    pub cache_hits: usize,
}

/// Aggregated outcome of a pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub spec_hash: String,
    pub seeds: Vec<SeedResult>,
    pub wall_time_secs: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RunRecord {
    pub fn metric_names(&self) -> Vec<String> {
        self.seeds.first().map(|s| s.accuracies.keys().cloned().collect()).unwrap_or_default()
    }

    pub fn per_seed(&self, metric: &str) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.accuracies.get(metric).copied()).collect()
    }

    pub fn summary(&self, metric: &str) -> (f64, f64) {
        mean_std(&self.per_seed(metric))
    }

    pub fn cache_hits(&self) -> usize {
        self.seeds.iter().map(|s| s.cache_hits).sum()
    }

    /// Hash over the spec hash and every per-seed value, excluding wall time.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec_hash.as_bytes());
        for s in &self.seeds {
            h.update(format!("{:?}{:?}{:?}{:?}{:?}", s.seed, s.accuracies, s.betas, s.synapses, s.artifact_hashes));
        }
        hex::encode(h.finalize())
    }

    /// `seed,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,metric,value\n");
        for s in &self.seeds {
            for (k, v) in &s.accuracies {
                let _ = writeln!(out, "{},{},{:.6}", s.seed, k, v);
            }
        }
        out
    }

    /// `metric.mean=`, `metric.std=` lines plus run metadata.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "spec_hash={}", self.spec_hash);
        let _ = writeln!(out, "record_hash={}", self.hash());
        let _ = writeln!(out, "seeds={}", self.seeds.len());
        for m in self.metric_names() {
            let (mean, std) = self.summary(&m);
            let _ = writeln!(out, "{m}.mean={:.4}", mean * 100.0);
            let _ = writeln!(out, "{m}.std={:.4}", std * 100.0);
        }
        if let Some(s) = self.seeds.first() {
            let _ = writeln!(out, "synapses.potential={}", s.synapses.potential);
        }
        let (sp, kept): (Vec<f64>, Vec<f64>) = self
            .seeds
            .iter()
            .map(|s| (s.synapses.sprouted_xy as f64, s.synapses.kept_xy as f64))
            .unzip();
        let _ = writeln!(out, "synapses.sprouted_xy.mean={:.1}", mean_std(&sp).0);
        let _ = writeln!(out, "synapses.kept_xy.mean={:.1}", mean_std(&kept).0);
        let _ = writeln!(out, "cache_hits={}", self.cache_hits());
        let _ = writeln!(out, "wall_time_secs={:.3}", self.wall_time_secs);
        out
    }
}

/// Where the pipeline reads and writes side artifacts.
#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    pub cache: MapCache,
    /// When set, per-seed checkpoints and synapse files are written here.
    pub artifacts_dir: Option<PathBuf>,
}

/// Trained and associated state for one seed, before pruning.
#[derive(Clone, Debug)]
pub struct SeedModel {
    pub som_x: SomGrid,
    pub som_y: SomGrid,
    pub labeled_x: LabeledSom,
    pub labeled_y: LabeledSom,
    pub subset_x: FeatureMatrix,
    pub association: Option<Association>,
    pub cache_hits: usize,
}

/// Splits off the last `fraction` of a shuffled training set for beta
/// selection. Returns (fit, validation).
fn split_validation(train: &PairedDataset, fraction: f64, seed: u64) -> (PairedDataset, Option<PairedDataset>) {
    let n_val = (train.len() as f64 * fraction).round() as usize;
    if n_val == 0 || n_val >= train.len() {
        return (train.clone(), None);
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::Split));
    let (fit, val) = idx.split_at(train.len() - n_val);
    let mut fit = fit.to_vec();
    let mut val = val.to_vec();
    fit.sort_unstable();
    val.sort_unstable();
    let take = |rows: &[usize]| PairedDataset {
        x: train.x.select(rows),
        y: train.y.select(&rows.iter().map(|&i| train.pairing[i]).collect::<Vec<_>>()),
        pairing: (0..rows.len()).collect(),
    };
    (take(&fit), Some(take(&val)))
}

fn train_map(
    cache: &MapCache,
    data: &FeatureMatrix,
    grid: (usize, usize),
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(SomGrid, bool)> {
    let key = MapCache::key(&data.content_hash(), grid, schedule, seed);
    cache.get_or_train(&key, || som::train(grid.0, grid.1, data, schedule, seed))
}

/// Trains, labels and associates the two maps for one seed.
pub fn build_seed_model(
    spec: &ExperimentSpec,
    fit: &PairedDataset,
    classes: usize,
    seed: u64,
    cache: &MapCache,
) -> Result<SeedModel> {
    let x = &fit.x;
    let y = fit.y_aligned();
    // distinct seeds per modality so the two maps do not share an init stream
    let seed_x = seed.wrapping_mul(2);
    let seed_y = seed.wrapping_mul(2).wrapping_add(1);
    let (som_x, hit_x) = train_map(cache, x, spec.grid_x, &spec.schedule, seed_x).stage(Stage::Train)?;
    let subset_x = labeling::select_covering_subset(x, spec.label_fraction_x, seed_x, classes).stage(Stage::Label)?;
    let labeled_x = labeling::label_som(&som_x, &subset_x, spec.alpha_x, classes).stage(Stage::Label)?;
    if !spec.is_multimodal() {
        return Ok(SeedModel {
            som_y: som_x.clone(),
            labeled_y: labeled_x.clone(),
            som_x,
            labeled_x,
            subset_x,
            association: None,
            cache_hits: hit_x as usize,
        });
    }
    let (som_y, hit_y) = train_map(cache, &y, spec.grid_y, &spec.schedule, seed_y).stage(Stage::Train)?;
    let subset_y = labeling::select_covering_subset(&y, spec.label_fraction_y, seed_y, classes).stage(Stage::Label)?;
    let labeled_y = labeling::label_som(&som_y, &subset_y, spec.alpha_y, classes).stage(Stage::Label)?;
    let association =
        associate(&som_x, &som_y, fit, spec.rule, spec.eta, spec.assoc_epochs).stage(Stage::Associate)?;
    Ok(SeedModel {
        som_x,
        som_y,
        labeled_x,
        labeled_y,
        subset_x,
        association: Some(association),
        cache_hits: hit_x as usize + hit_y as usize,
    })
}

fn sha_of(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

/// Picks the beta maximizing validation accuracy (first on ties).
fn select_beta(
    cfg: &ConvergenceConfig,
    grid: &[f64],
    validation: Option<&PairedDataset>,
    model: &SeedModel,
    assoc: &Association,
    classes: usize,
) -> Result<f64> {
    let (Some(val), true) = (validation, grid.len() > 1) else {
        return Ok(grid[0]);
    };
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &b in grid {
        let c = ConvergenceConfig { beta_x: b, beta_y: b, ..*cfg };
        let acc = inference::evaluate_convergence(val, &model.labeled_x, &model.labeled_y, assoc, &c, classes)?.accuracy();
        if acc > best.1 {
            best = (b, acc);
        }
    }
    Ok(best.0)
}

fn run_seed(spec: &ExperimentSpec, data: &PreparedData, seed: u64, opts: &PipelineOptions) -> Result<SeedResult> {
    let classes = data.classes;
    let multi_beta = spec.beta_grid.len() > 1 && data.multimodal;
    let (fit, validation) = if multi_beta {
        split_validation(&data.train, spec.validation_fraction, seed)
    } else {
        (data.train.clone(), None)
    };
    let model = build_seed_model(spec, &fit, classes, seed, &opts.cache)?;
    let mut accuracies = BTreeMap::new();
    let mut betas = BTreeMap::new();
    let mut hashes = BTreeMap::new();

    let test_y = data.test.y_aligned();
    let uni_x = inference::evaluate_unimodal(&model.labeled_x, &data.test.x, classes).stage(Stage::Evaluate)?;
    accuracies.insert("unimodal_x".to_string(), uni_x.accuracy());
    hashes.insert("som_x".into(), sha_of(|b| som::write_rsom(b, &model.som_x, Some(&model.labeled_x.labels)))?);

    let mut synapses = SynapseCounts::default();
    if let Some(assoc) = &model.association {
        let uni_y = inference::evaluate_unimodal(&model.labeled_y, &test_y, classes).stage(Stage::Evaluate)?;
        accuracies.insert("unimodal_y".into(), uni_y.accuracy());
        let best_uni = uni_x.accuracy().max(uni_y.accuracy());
        accuracies.insert("best_unimodal".into(), best_uni);
        hashes.insert("som_y".into(), sha_of(|b| som::write_rsom(b, &model.som_y, Some(&model.labeled_y.labels)))?);

        let div_assoc = assoc.prune(PruneSpec::new(spec.keep_divergence)?).stage(Stage::Prune)?;
        let diverged = inference::diverge_label(
            &model.som_x,
            &model.som_y,
            &div_assoc.xy,
            &model.subset_x,
            spec.beta_divergence,
            classes,
        )
        .stage(Stage::Diverge)?;
        let div = inference::evaluate_unimodal(&diverged, &test_y, classes).stage(Stage::Evaluate)?;
        accuracies.insert("divergence_y".into(), div.accuracy());

        let conv_assoc = assoc.prune(PruneSpec::new(spec.keep_convergence)?).stage(Stage::Prune)?;
        synapses = SynapseCounts {
            potential: assoc.xy.potential(),
            sprouted_xy: assoc.xy.count(),
            sprouted_yx: assoc.yx.count(),
            kept_xy: conv_assoc.xy.count(),
            kept_yx: conv_assoc.yx.count(),
        };
        hashes.insert("syn_xy".into(), sha_of(|b| association::write_rlat(b, &conv_assoc.xy))?);
        hashes.insert("syn_yx".into(), sha_of(|b| association::write_rlat(b, &conv_assoc.yx))?);
        for cfg in &spec.variants {
            let beta = select_beta(cfg, &spec.beta_grid, validation.as_ref(), &model, &conv_assoc, classes)
                .stage(Stage::Converge)?;
            let c = ConvergenceConfig { beta_x: beta, beta_y: beta, ..*cfg };
            let m = inference::evaluate_convergence(&data.test, &model.labeled_x, &model.labeled_y, &conv_assoc, &c, classes)
                .stage(Stage::Converge)?;
            accuracies.insert(format!("conv/{}", cfg.name()), m.accuracy());
            accuracies.insert(format!("gain/{}", cfg.name()), m.accuracy() - best_uni);
            betas.insert(cfg.name(), beta);
        }
        if let Some(dir) = &opts.artifacts_dir {
            std::fs::create_dir_all(dir)?;
            som::save_rsom(dir.join(format!("seed{seed}_x.rsom")), &model.som_x, Some(&model.labeled_x.labels))?;
            som::save_rsom(dir.join(format!("seed{seed}_y.rsom")), &model.som_y, Some(&model.labeled_y.labels))?;
            association::save_rlat(dir.join(format!("seed{seed}_xy.rlat")), &conv_assoc.xy)?;
            association::save_rlat(dir.join(format!("seed{seed}_yx.rlat")), &conv_assoc.yx)?;
        }
    } else if let Some(dir) = &opts.artifacts_dir {
        std::fs::create_dir_all(dir)?;
        som::save_rsom(dir.join(format!("seed{seed}_x.rsom")), &model.som_x, Some(&model.labeled_x.labels))?;
    }
    Ok(SeedResult { seed, accuracies, betas, synapses, artifact_hashes: hashes, cache_hits: model.cache_hits })
}

/// Runs every seed (in parallel) and aggregates.
pub fn run_pipeline(spec: &ExperimentSpec, opts: &PipelineOptions) -> Result<RunRecord> {
    let start = Instant::now();
    let data = prepare_data(spec).stage(Stage::Load)?;
    let seeds = spec
        .seeds
        .par_iter()
        .map(|&seed| run_seed(spec, &data, seed, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunRecord { spec_hash: spec.hash(), seeds, wall_time_secs: start.elapsed().as_secs_f64() })
}

/// One point of a pruning curve.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub keep_fraction: f64,
    pub divergence: Vec<f64>,
    pub convergence: Vec<f64>,
    /// Mean number of target neurons left without any incoming synapse.
    pub disconnected_targets: f64,
}

pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("keep_fraction,divergence_mean,divergence_std,convergence_mean,convergence_std,disconnected_targets\n");
    for p in points {
        let (dm, ds) = mean_std(&p.divergence);
        let (cm, cs) = mean_std(&p.convergence);
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6},{:.2}", p.keep_fraction, dm, ds, cm, cs, p.disconnected_targets);
    }
    out
}

/// Accuracy of divergence labeling and of the first convergence variant
/// against the fraction of potential synapses kept. The association is
/// learned once per seed and reused across fractions.
pub fn prune_sweep(spec: &ExperimentSpec, fractions: &[f64], opts: &PipelineOptions) -> Result<Vec<SweepPoint>> {
    let data = prepare_data(spec).stage(Stage::Load)?;
    if !data.multimodal {
        return Err(Error::Config("prune sweep needs two modalities".into()));
    }
    let cfg = *spec.variants.first().ok_or_else(|| Error::Config("no convergence variant".into()))?;
    let cfg = ConvergenceConfig { beta_x: spec.beta_grid[0], beta_y: spec.beta_grid[0], ..cfg };
    let test_y = data.test.y_aligned();
    let per_seed: Vec<Vec<(f64, f64, usize)>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let model = build_seed_model(spec, &data.train, data.classes, seed, &opts.cache)?;
            let assoc = model.association.as_ref().expect("multimodal model has an association");
            fractions
                .iter()
                .map(|&f| {
                    let pruned = assoc.prune(PruneSpec::new(f)?).stage(Stage::Prune)?;
                    let diverged = inference::diverge_label(
                        &model.som_x,
                        &model.som_y,
                        &pruned.xy,
                        &model.subset_x,
                        spec.beta_divergence,
                        data.classes,
                    )
                    .stage(Stage::Diverge)?;
                    let div = inference::evaluate_unimodal(&diverged, &test_y, data.classes)?.accuracy();
                    let conv = inference::evaluate_convergence(
                        &data.test,
                        &model.labeled_x,
                        &model.labeled_y,
                        &pruned,
                        &cfg,
                        data.classes,
                    )?
                    .accuracy();
                    let disconnected = pruned.xy.in_degrees().iter().filter(|&&d| d == 0).count();
                    Ok((div, conv, disconnected))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(fractions
        .iter()
        .enumerate()
        .map(|(i, &f)| SweepPoint {
            keep_fraction: f,
            divergence: per_seed.iter().map(|s| s[i].0).collect(),
            convergence: per_seed.iter().map(|s| s[i].1).collect(),
            disconnected_targets: mean_std(&per_seed.iter().map(|s| s[i].2 as f64).collect::<Vec<_>>()).0,
        })
        .collect())
}

/// Kernel widths tried by the labeling grid search.
pub const ALPHA_GRID: [f64; 7] = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0];

/// Test accuracy of x-map labeling for each alpha, per seed. Returns
/// `(alpha, per-seed accuracies)`.
pub fn alpha_sweep(spec: &ExperimentSpec, alphas: &[f64], opts: &PipelineOptions) -> Result<Vec<(f64, Vec<f64>)>> {
    let data = prepare_data(spec).stage(Stage::Load)?;
    let per_seed: Vec<Vec<f64>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let seed_x = seed.wrapping_mul(2);
            let (som_x, _) = train_map(&opts.cache, &data.train.x, spec.grid_x, &spec.schedule, seed_x)?;
            let subset = labeling::select_covering_subset(&data.train.x, spec.label_fraction_x, seed_x, data.classes)?;
            alphas
                .iter()
                .map(|&a| {
                    let labeled = labeling::label_som(&som_x, &subset, a, data.classes)?;
                    Ok(inference::evaluate_unimodal(&labeled, &data.test.x, data.classes)?.accuracy())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(alphas.iter().enumerate().map(|(i, &a)| (a, per_seed.iter().map(|s| s[i]).collect())).collect())
}

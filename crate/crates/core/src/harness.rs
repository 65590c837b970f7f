//! Overlap metrics, fold aggregation, run configuration and reports.
//!
//! `metrics.csv` header (fixed):
//!
//! ```text
//! run_id,fold,epoch,split,model,dice,jaccard,loss_sup,loss_unsup,lambda_unsup
//! ```
//!
//! `dice` and `jaccard` are percentages. `split` is `val` or `test`; `model`
//! is `teacher`, `color`, `structure` or `best` (the selected student).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::data::{generate_corpus, load_dir, make_splits, DatasetSplits, FoldData, SynthConfig};
use crate::error::{config_err, dim_err, Error, Result};
use crate::imaging::BinaryMask;
use crate::segnet::SegNetConfig;
use crate::trainer::TrainConfig;
use crate::uncertainty::UncertaintyConfig;

fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize, usize)> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(dim_err!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    let inter = pred.bits().iter().zip(gt.bits()).filter(|(p, g)| **p && **g).count();
    Ok((inter, pred.count(), gt.count()))
}

/// `100·2|P∩G| / (|P|+|G|)`; 100 when both masks are empty.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, p, g) = overlap(pred, gt)?;
    Ok(if p + g == 0 { 100.0 } else { 200.0 * i as f64 / (p + g) as f64 })
}

/// `100·|P∩G| / |P∪G|`; 100 when both masks are empty.
pub fn jaccard_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, p, g) = overlap(pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 { 100.0 } else { 100.0 * i as f64 / union as f64 })
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub fold: usize,
    pub epoch: usize,
    pub split: String,
    pub model: String,
    pub dice: f64,
    pub jaccard: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub lambda_unsup: f64,
}

/// Mean and sample standard deviation over folds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Set when only one value was available (std reported as 0).
    pub single: bool,
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Values are sorted before summation, so the result does not depend on input order.
pub fn aggregate(values: &[f64]) -> Aggregate {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return Aggregate { mean: f64::NAN, std: f64::NAN, n, single: false };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Aggregate { mean, std, n, single: n == 1 }
}

/// One aggregated configuration/model pair over folds.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub config: String,
    pub model: String,
    pub dice: Aggregate,
    pub jaccard: Aggregate,
}

/// Groups `test` rows by `(run_id, model)`; one value per fold (the latest
/// epoch if a fold repeats).
pub fn aggregate_folds(rows: &[MetricRow]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(&str, &str), BTreeMap<usize, &MetricRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == "test") {
        let per_fold = groups.entry((r.run_id.as_str(), r.model.as_str())).or_default();
        let keep = per_fold.get(&r.fold).map_or(true, |old| (r.epoch, r.dice.to_bits()) > (old.epoch, old.dice.to_bits()));
        if keep {
            per_fold.insert(r.fold, r);
        }
    }
    groups
        .into_iter()
        .map(|((config, model), folds)| {
            let dice: Vec<f64> = folds.values().map(|r| r.dice).collect();
            let jac: Vec<f64> = folds.values().map(|r| r.jaccard).collect();
            ReportRow { config: config.to_string(), model: model.to_string(), dice: aggregate(&dice), jaccard: aggregate(&jac) }
        })
        .collect()
}

/// Per-epoch validation curve averaged over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub config: String,
    pub model: String,
    pub epoch: usize,
    pub folds: usize,
    pub dice_mean: f64,
    pub jaccard_mean: f64,
}

pub fn curves(rows: &[MetricRow]) -> Vec<CurveRow> {
    let mut groups: BTreeMap<(&str, &str, usize), BTreeMap<usize, &MetricRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == "val") {
        groups.entry((r.run_id.as_str(), r.model.as_str(), r.epoch)).or_default().insert(r.fold, r);
    }
    groups
        .into_iter()
        .map(|((config, model, epoch), folds)| {
            let d: Vec<f64> = folds.values().map(|r| r.dice).collect();
            let j: Vec<f64> = folds.values().map(|r| r.jaccard).collect();
            CurveRow {
                config: config.to_string(),
                model: model.to_string(),
                epoch,
                folds: folds.len(),
                dice_mean: aggregate(&d).mean,
                jaccard_mean: aggregate(&j).mean,
            }
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let bytes = if rows.is_empty() {
        b"run_id,fold,epoch,split,model,dice,jaccard,loss_sup,loss_unsup,lambda_unsup\n".to_vec()
    } else {
        bytes
    };
    crate::segnet::write_atomic(path, &bytes)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Writes `report.csv` (one `mean ± std` row per configuration and model)
/// and `curves.csv` under `dir`.
pub fn write_report(dir: &Path, rows: &[MetricRow]) -> Result<Vec<ReportRow>> {
    let report = aggregate_folds(rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    let p = dir.join("report.csv");
    w.write_record(["config", "model", "folds", "dice", "jaccard", "dice_mean", "dice_std", "jaccard_mean", "jaccard_std", "single_fold"])
        .map_err(|e| csv_err(&p, e))?;
    for r in &report {
        w.write_record([
            r.config.clone(),
            r.model.clone(),
            r.dice.n.to_string(),
            r.dice.to_string(),
            r.jaccard.to_string(),
            format!("{:.4}", r.dice.mean),
            format!("{:.4}", r.dice.std),
            format!("{:.4}", r.jaccard.mean),
            format!("{:.4}", r.jaccard.std),
            r.dice.single.to_string(),
        ])
        .map_err(|e| csv_err(&p, e))?;
    }
    crate::segnet::write_atomic(&p, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;

    let p = dir.join("curves.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in curves(rows) {
        w.serialize(c).map_err(|e| csv_err(&p, e))?;
    }
    crate::segnet::write_atomic(&p, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Number of synthetic images.
    pub count: usize,
    pub synth: SynthConfig,
    /// Root with `images/` and `masks/` when `source = "directory"`.
    pub dir: Option<PathBuf>,
    pub resize: Option<usize>,
    pub labeled_ratio: f64,
    /// Cross-validation fold held out for validation, `0..5`.
    pub fold: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            count: 60,
            synth: SynthConfig::default(),
            dir: None,
            resize: None,
            labeled_ratio: 0.10,
            fold: 0,
        }
    }
}

/// Every tunable of a training run. Loaded from TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Drives network initialisation, splits and every stochastic step.
    /// `model.seed` is ignored in favour of this value.
    pub seed: u64,
    pub model: SegNetConfig,
    pub train: TrainConfig,
    pub uncertainty: UncertaintyConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "csds".into(),
            seed: 0,
            model: SegNetConfig::default(),
            train: TrainConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Schema { path: String::new(), message: e.to_string() })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.uncertainty.validate()?;
        self.augment.validate()?;
        self.data.synth.validate()?;
        if self.data.fold >= crate::data::NUM_FOLDS {
            return Err(config_err!("data.fold must lie in 0..{}, got {}", crate::data::NUM_FOLDS, self.data.fold));
        }
        if !(self.data.labeled_ratio > 0.0 && self.data.labeled_ratio <= 1.0) {
            return Err(config_err!("data.labeled_ratio must lie in (0, 1], got {}", self.data.labeled_ratio));
        }
        if self.data.source == DataSource::Directory && self.data.dir.is_none() {
            return Err(config_err!("data.dir is required when data.source = \"directory\""));
        }
        let side = self.data.resize.unwrap_or(self.data.synth.size);
        if self.data.source == DataSource::Synthetic || self.data.resize.is_some() {
            let m = self.model.size_multiple();
            if side % m != 0 {
                return Err(config_err!("image side {side} is not divisible by 2^depth = {m}"));
            }
        }
        Ok(())
    }

    /// Hex digest of the canonical TOML serialisation.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Loads or generates the corpus named by `cfg.data` and returns the
/// configured fold together with the full split assignment.
pub fn load_fold_data(cfg: &RunConfig) -> Result<(FoldData, DatasetSplits)> {
    let samples = match cfg.data.source {
        DataSource::Synthetic => generate_corpus(&cfg.data.synth, cfg.data.count)?,
        DataSource::Directory => {
            let dir = cfg.data.dir.as_deref().ok_or_else(|| config_err!("data.dir is not set"))?;
            let report = load_dir(dir, cfg.data.resize)?;
            for stem in &report.skipped {
                log::warn!("skipped {stem}: no matching mask");
            }
            report.samples
        }
    };
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let splits = make_splits(&ids, cfg.seed, cfg.data.labeled_ratio)?;
    let fold = FoldData::from_split(&samples, &splits.fold(cfg.data.fold)?)?;
    Ok((fold, splits))
}

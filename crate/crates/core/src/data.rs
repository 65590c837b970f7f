//! Synthetic gland corpus, PNG ingestion and the cross-validation split protocol.
//!
//! Synthetic images show elliptical glands (a hematoxylin-dark epithelial ring
//! around a pale lumen) on a textured eosin background scattered with
//! hematoxylin-stained stromal nuclei. Every image receives its own global
//! stain shift, so color alone does not separate glands from background
//! across the corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::ndcore::{Rng, Tensor};

/// One image with its binary gland mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub labeled: bool,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(dim_err!("sample image {is:?} / mask {ms:?} must be [3,H,W] / [1,H,W]"));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("mask is not binary".into()));
        }
        Ok(Sample { id: id.into(), image, mask, labeled: true })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.mean_f64()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub glands_min: usize,
    pub glands_max: usize,
    /// Gland semi-axis range as a fraction of the canvas side.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Lumen semi-axes relative to the gland's.
    pub lumen_ratio: f64,
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    pub lumen: [f64; 3],
    /// Per-image additive intensity shift amplitude, per channel.
    pub stain_shift: f64,
    /// Per-image stain strength amplitude: each channel's optical density is
    /// multiplied by `exp(u)`, `u ~ U(−stain_scale, stain_scale)`.
    pub stain_scale: f64,
    pub noise: f64,
    /// Upper bound on stromal nuclei per image.
    pub nuclei_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            glands_min: 2,
            glands_max: 5,
            radius_min: 0.10,
            radius_max: 0.22,
            lumen_ratio: 0.55,
            hematoxylin: [0.42, 0.22, 0.58],
            eosin: [0.88, 0.52, 0.68],
            lumen: [0.96, 0.90, 0.93],
            stain_shift: 0.15,
            stain_scale: 0.2,
            noise: 0.04,
            nuclei_max: 10,
            seed: 0,
        }
    }
}

pub const MIN_AREA_FRACTION: f64 = 0.05;
pub const MAX_AREA_FRACTION: f64 = 0.7;
const MAX_RETRIES: usize = 100;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(config_err!("synth.size must be >= 8, got {}", self.size));
        }
        if self.glands_min > self.glands_max {
            return Err(config_err!("synth.glands_min {} exceeds glands_max {}", self.glands_min, self.glands_max));
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max && self.radius_max <= 1.0) {
            return Err(config_err!("synth radius range [{}, {}] is invalid", self.radius_min, self.radius_max));
        }
        if !(0.0..1.0).contains(&self.lumen_ratio) {
            return Err(config_err!("synth.lumen_ratio must lie in [0, 1), got {}", self.lumen_ratio));
        }
        for (k, v) in [("stain_shift", self.stain_shift), ("stain_scale", self.stain_scale), ("noise", self.noise)] {
            if !(v >= 0.0) {
                return Err(config_err!("synth.{k} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_sample(cfg: &SynthConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).split(index);
    let n = cfg.size;
    let side = n as f64;
    for _ in 0..MAX_RETRIES {
        let count = cfg.glands_min + rng.below(cfg.glands_max - cfg.glands_min + 1);
        let glands: Vec<Ellipse> = (0..count)
            .map(|_| {
                let a = rng.uniform(cfg.radius_min, cfg.radius_max) * side;
                let b = rng.uniform(cfg.radius_min, cfg.radius_max) * side;
                let theta = rng.uniform(0.0, std::f64::consts::PI);
                Ellipse {
                    cx: rng.uniform(0.0, side),
                    cy: rng.uniform(0.0, side),
                    a,
                    b,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            })
            .collect();
        let mut mask = vec![0.0f32; n * n];
        let mut tissue = vec![0u8; n * n]; // 0 stroma, 1 epithelium, 2 lumen
        for y in 0..n {
            for x in 0..n {
                let r = glands
                    .iter()
                    .map(|g| g.radius(x as f64 + 0.5, y as f64 + 0.5))
                    .fold(f64::INFINITY, f64::min);
                if r <= 1.0 {
                    mask[y * n + x] = 1.0;
                    tissue[y * n + x] = if r <= cfg.lumen_ratio { 2 } else { 1 };
                }
            }
        }
        let frac = mask.iter().map(|&v| v as f64).sum::<f64>() / (n * n) as f64;
        if !(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac) {
            continue;
        }

        let nuclei: Vec<(f64, f64, f64)> = (0..rng.below(cfg.nuclei_max + 1))
            .map(|_| (rng.uniform(0.0, side), rng.uniform(0.0, side), rng.uniform(1.2, 2.6) * side / 64.0))
            .collect();
        let shift: Vec<f64> = (0..3).map(|_| rng.uniform(-cfg.stain_shift, cfg.stain_shift)).collect();
        let strength: Vec<f64> = (0..3).map(|_| rng.uniform(-cfg.stain_scale, cfg.stain_scale).exp()).collect();
        let (fx, fy, phase) = (rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2), rng.uniform(0.0, 6.3));

        let mut image = vec![0.0f32; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let texture = 0.04 * ((xf * fx + phase).sin() * (yf * fy).cos());
                let in_nucleus =
                    tissue[i] == 0 && nuclei.iter().any(|&(cx, cy, r)| (xf - cx).powi(2) + (yf - cy).powi(2) <= r * r);
                let base = match tissue[i] {
                    1 => cfg.hematoxylin,
                    2 => cfg.lumen,
                    _ if in_nucleus => cfg.hematoxylin,
                    _ => cfg.eosin,
                };
                for c in 0..3 {
                    let od = -(base[c] + texture).clamp(1e-3, 1.0).ln();
                    let v = (-od * strength[c]).exp() + shift[c] + cfg.noise * rng.normal();
                    image[c * n * n + i] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        let image = Tensor::new([3, n, n], image)?;
        let mask = Tensor::new([1, n, n], mask)?;
        return Sample::new(format!("synth_{index:05}"), image, mask);
    }
    Err(Error::Generation(format!(
        "no layout with foreground fraction in [{MIN_AREA_FRACTION}, {MAX_AREA_FRACTION}] after {MAX_RETRIES} attempts (index {index})"
    )))
}

pub fn generate_corpus(cfg: &SynthConfig, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| generate_sample(cfg, i)).collect()
}

/// Fixed test set plus five cross-validation folds with a labeled subset per fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub seed: u64,
    pub labeled_ratio: f64,
    pub test: Vec<String>,
    pub folds: Vec<Vec<String>>,
    /// `labeled[k]`: labeled ids within the training portion of fold `k`.
    pub labeled: Vec<Vec<String>>,
    /// Shuffled order of all non-test ids.
    order: Vec<String>,
}

pub const NUM_FOLDS: usize = 5;
pub const TEST_FRACTION: f64 = 0.2;

/// Ids for one cross-validation fold: the fold itself validates, the other
/// four train.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub fn make_splits(ids: &[String], seed: u64, labeled_ratio: f64) -> Result<DatasetSplits> {
    if ids.len() < 10 {
        return Err(config_err!("need at least 10 ids to split, got {}", ids.len()));
    }
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(config_err!("labeled_ratio must lie in (0, 1], got {labeled_ratio}"));
    }
    let mut unique = ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != ids.len() {
        return Err(config_err!("ids must be unique"));
    }
    let mut order = ids.to_vec();
    Rng::new(seed).shuffle(&mut order);
    let n_test = (TEST_FRACTION * ids.len() as f64).ceil() as usize;
    let test = order[..n_test].to_vec();
    let rest = order[n_test..].to_vec();
    let mut folds = vec![Vec::new(); NUM_FOLDS];
    for (i, id) in rest.iter().enumerate() {
        folds[i % NUM_FOLDS].push(id.clone());
    }
    let labeled = (0..NUM_FOLDS)
        .map(|k| {
            let train: Vec<&String> = rest.iter().filter(|id| !folds[k].contains(id)).collect();
            let count = ((labeled_ratio * train.len() as f64).round() as usize).max(1).min(train.len());
            train[..count].iter().map(|s| s.to_string()).collect()
        })
        .collect();
    Ok(DatasetSplits { seed, labeled_ratio, test, folds, labeled, order: rest })
}

impl DatasetSplits {
    pub fn fold(&self, k: usize) -> Result<FoldSplit> {
        let validation = self.folds.get(k).ok_or_else(|| config_err!("fold {k} out of range 0..{NUM_FOLDS}"))?.clone();
        let labeled = self.labeled[k].clone();
        let unlabeled = self
            .order
            .iter()
            .filter(|id| !validation.contains(id) && !labeled.contains(id))
            .cloned()
            .collect();
        Ok(FoldSplit { labeled, unlabeled, validation, test: self.test.clone() })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Samples of one fold, each tagged labeled or not.
#[derive(Clone, Debug, Default)]
pub struct FoldData {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl FoldData {
    pub fn from_split(samples: &[Sample], split: &FoldSplit) -> Result<Self> {
        let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let pick = |ids: &[String], labeled: bool| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|id| {
                    let mut s = (*by_id.get(id.as_str()).ok_or_else(|| config_err!("split id `{id}` has no sample"))?).clone();
                    s.labeled = labeled;
                    Ok(s)
                })
                .collect()
        };
        Ok(FoldData {
            labeled: pick(&split.labeled, true)?,
            unlabeled: pick(&split.unlabeled, false)?,
            validation: pick(&split.validation, true)?,
            test: pick(&split.test, true)?,
        })
    }
}

/// Samples read from disk plus image stems skipped for lack of a mask.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub skipped: Vec<String>,
}

pub const MASK_THRESHOLD: u8 = 127;

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Reads `images/*.png` with matching `masks/*.png`, optionally resizing to a
/// square side (bilinear for images, nearest for masks).
pub fn load_dir(root: &Path, resize_to: Option<usize>) -> Result<LoadReport> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    let mut report = LoadReport::default();
    if images.is_empty() {
        log::warn!("no images found under {}", root.join("images").display());
    }
    for (stem, img_path) in &images {
        let Some(mask_path) = masks.get(stem) else {
            log::warn!("skipping {stem}: no mask");
            report.skipped.push(stem.clone());
            continue;
        };
        let mut rgb = open_image(img_path)?.to_rgb8();
        let mut gray = open_image(mask_path)?.to_luma8();
        if rgb.dimensions() != gray.dimensions() {
            return Err(dim_err!("{}: image {:?} vs mask {:?}", stem, rgb.dimensions(), gray.dimensions()));
        }
        if let Some(s) = resize_to {
            let s = s as u32;
            rgb = imageops::resize(&rgb, s, s, FilterType::Triangle);
            gray = imageops::resize(&gray, s, s, FilterType::Nearest);
        }
        report.samples.push(Sample::new(stem.clone(), rgb_to_tensor(&rgb)?, mask_to_tensor(&gray)?)?);
    }
    Ok(report)
}

/// Decodes any supported image file to a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    rgb_to_tensor(&open_image(path)?.to_rgb8())
}

pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn mask_to_tensor(img: &GrayImage) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] > MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Tensor::new([1, h, w], data)
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let [_, c, h, w] = t.dims4()?;
    if c != 3 {
        return Err(dim_err!("expected a 3-channel image, got {c}"));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|ch| (d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn mask_to_gray(t: &Tensor<f32>) -> Result<GrayImage> {
    let [_, _, h, w] = t.dims4()?;
    let d = t.data();
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if d[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])))
}

pub fn save_png(img: impl Into<image::DynamicImage>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.into().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes `images/<id>.png` and `masks/<id>.png` under `root`.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    save_png(tensor_to_rgb(&sample.image)?, &root.join("images").join(format!("{}.png", sample.id)))?;
    save_png(mask_to_gray(&sample.mask)?, &root.join("masks").join(format!("{}.png", sample.id)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:03}")).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_sample(&cfg, 3).unwrap(), generate_sample(&cfg, 3).unwrap());
        assert_ne!(generate_sample(&cfg, 3).unwrap().image, generate_sample(&cfg, 4).unwrap().image);
    }

    #[test]
    fn no_glands_is_a_generation_error() {
        let cfg = SynthConfig { glands_min: 0, glands_max: 0, ..Default::default() };
        assert!(matches!(generate_sample(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn area_fraction_and_class_balance() {
        let cfg = SynthConfig { seed: 11, ..Default::default() };
        let fracs: Vec<f64> = (0..200).map(|i| generate_sample(&cfg, i).unwrap().foreground_fraction()).collect();
        assert!(fracs[..100].iter().all(|f| (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(f)));
        let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
        assert!((0.1..=0.5).contains(&mean), "{mean}");
    }

    #[test]
    fn ten_ids_split_by_round_robin() {
        let s = make_splits(&ids(10), 1, 0.1).unwrap();
        assert_eq!(s.test.len(), 2);
        let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 2, 1, 1]);
    }

    #[test]
    fn labeled_counts() {
        let s = make_splits(&ids(50), 2, 0.10).unwrap();
        // 50 → 10 test, 40 over five folds of 8; each fold trains on 32.
        for k in 0..NUM_FOLDS {
            assert_eq!(s.labeled[k].len(), 3);
        }
        let full = make_splits(&ids(50), 2, 1.0).unwrap();
        for k in 0..NUM_FOLDS {
            let f = full.fold(k).unwrap();
            assert!(f.unlabeled.is_empty());
            assert_eq!(f.labeled.len(), 32);
        }
        // 40 training ids exactly: 50 train-side ids with one fold held out
        let s = make_splits(&ids(63), 2, 0.10).unwrap();
        let f = s.fold(0).unwrap();
        assert_eq!(f.labeled.len() + f.unlabeled.len(), 40);
        assert_eq!(f.labeled.len(), 4);
    }

    #[test]
    fn splits_partition_and_are_deterministic() {
        let all = ids(37);
        let s = make_splits(&all, 9, 0.3).unwrap();
        assert_eq!(s, make_splits(&all, 9, 0.3).unwrap());
        let mut seen: Vec<String> = s.test.iter().chain(s.folds.iter().flatten()).cloned().collect();
        seen.sort();
        assert_eq!(seen, all);
        for k in 0..NUM_FOLDS {
            let f = s.fold(k).unwrap();
            assert!(f.labeled.iter().chain(&f.unlabeled).all(|id| !f.validation.contains(id) && !f.test.contains(id)));
            assert_eq!(f.labeled.len() + f.unlabeled.len() + f.validation.len() + f.test.len(), 37);
        }
    }

    #[test]
    fn split_errors() {
        assert!(matches!(make_splits(&ids(9), 0, 0.1), Err(Error::Config(_))));
        assert!(matches!(make_splits(&ids(20), 0, 0.0), Err(Error::Config(_))));
        assert!(matches!(make_splits(&ids(20), 0, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(&SynthConfig::default(), 0).unwrap();
        save_sample(dir.path(), &s).unwrap();
        let back = load_dir(dir.path(), None).unwrap();
        assert!(back.skipped.is_empty());
        let b = &back.samples[0];
        assert_eq!(b.mask, s.mask);
        let err = s.image.data().iter().zip(b.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6, "{err}");
    }

    #[test]
    fn loader_resizes_and_reports_missing_masks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { size: 32, ..Default::default() };
        let s = generate_sample(&cfg, 1).unwrap();
        save_sample(dir.path(), &s).unwrap();
        save_png(tensor_to_rgb(&s.image).unwrap(), &dir.path().join("images/orphan.png")).unwrap();
        let back = load_dir(dir.path(), Some(16)).unwrap();
        assert_eq!(back.skipped, vec!["orphan".to_string()]);
        assert_eq!(back.samples[0].image.shape(), &[3, 16, 16]);
        assert!(back.samples[0].mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let empty = tempfile::tempdir().unwrap();
        assert!(load_dir(empty.path(), None).unwrap().samples.is_empty());
    }
}

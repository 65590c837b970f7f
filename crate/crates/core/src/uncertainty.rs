//! Entropy-based uncertainty and its color/structure modulation.
//!
//! The teacher's per-pixel class distribution gives a base entropy map `U`.
//! Pixels whose smoothed inter-channel variance is high get amplified by
//! `1 + λ_C` (color map), and pixels on strong edges are amplified again by
//! `1 + λ_S` (structure map). The maps become per-pixel loss weights through
//! [`to_loss_weight`].

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::imaging::{
    channel_variance_map, edge_magnitude_map_eps, normalize_max, smooth, threshold_mask, BinaryMask, ScalarMap,
    SmoothMode,
};
use crate::ndcore::{ops, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base,
    ColorModulated,
    StructureModulated,
}

impl Stage {
    fn next(self) -> Result<Stage> {
        match self {
            Stage::Base => Ok(Stage::ColorModulated),
            Stage::ColorModulated => Ok(Stage::StructureModulated),
            Stage::StructureModulated => Err(Error::Validation("uncertainty map already fully modulated".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    map: ScalarMap,
    stage: Stage,
}

impl UncertaintyMap {
    pub fn from_parts(map: ScalarMap, stage: Stage) -> Self {
        UncertaintyMap { map, stage }
    }

    pub fn map(&self) -> &ScalarMap {
        &self.map
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn values(&self) -> &[f64] {
        self.map.values()
    }
}

/// How an uncertainty map becomes a per-pixel loss weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `u / mean(u)`: uncertain pixels weigh more, mean weight is one.
    #[default]
    Direct,
    /// `exp(−u)`: uncertain pixels weigh less.
    InverseExp,
}

/// Thresholds and strengths of the two modulation stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub tau_color: f64,
    pub tau_structure: f64,
    pub lambda_color: f64,
    pub lambda_structure: f64,
    pub eps: f64,
    pub smoothing: SmoothMode,
    pub weight_mode: WeightMode,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            tau_color: 0.5,
            tau_structure: 0.5,
            lambda_color: 0.5,
            lambda_structure: 0.5,
            eps: 1e-8,
            smoothing: SmoothMode::Gaussian3x3,
            weight_mode: WeightMode::Direct,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_color", self.tau_color),
            ("tau_structure", self.tau_structure),
            ("lambda_color", self.lambda_color),
            ("lambda_structure", self.lambda_structure),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err!("uncertainty.{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("uncertainty.eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

fn single_image_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 3]> {
    let [b, c, h, w] = t.dims4()?;
    if b != 1 {
        return Err(dim_err!("{what} must be a single image, got {:?}", t.shape()));
    }
    Ok([c, h, w])
}

/// `−Σ_c p_c ln(p_c + eps)` per pixel, floored at 0 (the `eps` shift makes
/// confident pixels come out at about `−eps`).
pub fn entropy_map<T: Scalar>(probs: &Tensor<T>, eps: f64) -> Result<UncertaintyMap> {
    let [c, h, w] = single_image_dims(probs, "probabilities")?;
    let hw = h * w;
    let p = probs.data();
    if let Some(bad) = p.iter().find(|v| v.as_f64() < 0.0) {
        return Err(Error::Numeric(format!("negative probability {:?}", bad)));
    }
    let values = (0..hw)
        .map(|px| (0..c).map(|ci| p[ci * hw + px].as_f64()).map(|pc| -pc * (pc + eps).ln()).sum::<f64>().max(0.0))
        .collect();
    Ok(UncertaintyMap { map: ScalarMap::new(h, w, values)?, stage: Stage::Base })
}

/// `u · (1 + λ·mask)`, advancing the stage tag.
pub fn modulate(u: &UncertaintyMap, mask: &BinaryMask, lambda: f64) -> Result<UncertaintyMap> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(config_err!("modulation strength must lie in [0, 1], got {lambda}"));
    }
    if mask.height() != u.map.height() || mask.width() != u.map.width() {
        return Err(dim_err!(
            "mask {}x{} vs map {}x{}",
            mask.height(),
            mask.width(),
            u.map.height(),
            u.map.width()
        ));
    }
    let values = u
        .map
        .values()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &m)| if m { v * (1.0 + lambda) } else { v })
        .collect();
    Ok(UncertaintyMap { map: ScalarMap::new(u.map.height(), u.map.width(), values)?, stage: u.stage.next()? })
}

/// Chromatic-richness mask: smoothed, max-normalised channel variance above `tau_color`.
pub fn color_mask<T: Scalar>(image: &Tensor<T>, cfg: &UncertaintyConfig) -> Result<BinaryMask> {
    let v = smooth(&channel_variance_map(image)?, cfg.smoothing);
    threshold_mask(&normalize_max(&v, cfg.eps), cfg.tau_color)
}

/// Edge mask: max-normalised edge magnitude above `tau_structure`.
pub fn structure_mask<T: Scalar>(image: &Tensor<T>, cfg: &UncertaintyConfig) -> Result<BinaryMask> {
    threshold_mask(&edge_magnitude_map_eps(image, cfg.eps)?, cfg.tau_structure)
}

/// The three stages of the uncertainty pipeline for one image.
#[derive(Clone, Debug)]
pub struct UncertaintyMaps {
    pub base: UncertaintyMap,
    pub color: UncertaintyMap,
    pub structure: UncertaintyMap,
}

/// Base, color-modulated and structure-modulated maps for one teacher
/// prediction and the image the teacher saw.
pub fn uncertainty_stages<T: Scalar>(
    teacher_logits: &Tensor<T>,
    image: &Tensor<T>,
    cfg: &UncertaintyConfig,
) -> Result<UncertaintyMaps> {
    cfg.validate()?;
    let [_, h, w] = single_image_dims(teacher_logits, "teacher logits")?;
    let [_, ih, iw] = single_image_dims(image, "image")?;
    if (h, w) != (ih, iw) {
        return Err(dim_err!("logits {h}x{w} vs image {ih}x{iw}"));
    }
    let probs = ops::softmax_channel(teacher_logits)?;
    let base = entropy_map(&probs, cfg.eps)?;
    let color = modulate(&base, &color_mask(image, cfg)?, cfg.lambda_color)?;
    let structure = modulate(&color, &structure_mask(image, cfg)?, cfg.lambda_structure)?;
    Ok(UncertaintyMaps { base, color, structure })
}

/// `(color_map, structure_map)`: the color branch consumes the first and
/// the structure branch the second.
pub fn csds_uncertainty<T: Scalar>(
    teacher_logits: &Tensor<T>,
    image: &Tensor<T>,
    cfg: &UncertaintyConfig,
) -> Result<(UncertaintyMap, UncertaintyMap)> {
    let maps = uncertainty_stages(teacher_logits, image, cfg)?;
    Ok((maps.color, maps.structure))
}

/// Per-pixel loss weights. A map with zero mean yields all ones in direct mode.
pub fn to_loss_weight(u: &UncertaintyMap, mode: WeightMode) -> ScalarMap {
    let m = u.map();
    let values = match mode {
        WeightMode::Direct => {
            let mean = m.mean();
            if mean > 0.0 {
                m.values().iter().map(|v| v / mean).collect()
            } else {
                vec![1.0; m.values().len()]
            }
        }
        WeightMode::InverseExp => m.values().iter().map(|v| (-v).exp()).collect(),
    };
    ScalarMap::new(m.height(), m.width(), values).expect("same dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn probs(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([vals.len(), 1, 1], vals).unwrap()
    }

    #[test]
    fn entropy_reference_values() {
        assert_abs_diff_eq!(entropy_map(&probs(&[0.5, 0.5]), 1e-8).unwrap().values()[0], LN_2, epsilon = 1e-7);
        let one_hot = entropy_map(&probs(&[1.0, 0.0]), 1e-8).unwrap().values()[0];
        assert_eq!(one_hot, 0.0);
        let e = entropy_map(&probs(&[0.8, 0.2]), 1e-8).unwrap().values()[0];
        assert_abs_diff_eq!(e, -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln()), epsilon = 1e-7);
        assert_abs_diff_eq!(e, 0.5004, epsilon = 1e-4);
        assert!(entropy_map(&probs(&[1.2, -0.2]), 1e-8).is_err());
    }

    #[test]
    fn modulation_examples() {
        let u = UncertaintyMap { map: ScalarMap::new(1, 2, vec![0.6, 0.3]).unwrap(), stage: Stage::Base };
        let full = BinaryMask::new(1, 2, vec![true, true]).unwrap();
        let m = modulate(&u, &full, 0.5).unwrap();
        assert_abs_diff_eq!(m.values()[0], 0.9, epsilon = 1e-12);
        assert_eq!(m.stage(), Stage::ColorModulated);
        assert_eq!(modulate(&u, &full, 0.0).unwrap().values(), u.values());
        assert_eq!(modulate(&u, &BinaryMask::empty(1, 2), 1.0).unwrap().values(), u.values());
        assert!(modulate(&u, &full, 1.5).is_err());
        assert!(modulate(&u, &BinaryMask::empty(2, 2), 0.5).is_err());
        let twice = modulate(&m, &full, 0.5).unwrap();
        assert!(modulate(&twice, &full, 0.5).is_err());
    }

    #[test]
    fn csds_examples() {
        let logits = Tensor::<f64>::zeros([2, 4, 4]);
        let mut img = Vec::new();
        for c in 0..3 {
            for i in 0..16 {
                img.push(((i * 7 + c * 5) % 11) as f64 / 10.0);
            }
        }
        let img = Tensor::from_f64([3, 4, 4], &img).unwrap();

        let zero = UncertaintyConfig { lambda_color: 0.0, lambda_structure: 0.0, ..Default::default() };
        let (c, s) = csds_uncertainty(&logits, &img, &zero).unwrap();
        assert!(c.values().iter().chain(s.values()).all(|&v| (v - LN_2).abs() < 1e-7));

        let grey = Tensor::<f64>::full([3, 4, 4], 0.4);
        let (c, s) = csds_uncertainty(&logits, &grey, &UncertaintyConfig::default()).unwrap();
        assert_eq!(c.values(), s.values());
        assert!(c.values().iter().all(|&v| (v - LN_2).abs() < 1e-7));

        let full = UncertaintyConfig {
            lambda_color: 1.0,
            lambda_structure: 1.0,
            tau_color: 0.0,
            tau_structure: 0.0,
            ..Default::default()
        };
        // every pixel needs nonzero variance and edge strength for τ = 0 to select it
        let mut busy = Vec::new();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    busy.push(if c == 0 { ((x + y) % 2) as f64 } else { 0.5 * c as f64 - 0.25 * ((x + y) % 2) as f64 });
                }
            }
        }
        let busy = Tensor::from_f64([3, 4, 4], &busy).unwrap();
        let maps = uncertainty_stages(&logits, &busy, &full).unwrap();
        assert_eq!(color_mask(&busy, &full).unwrap().count(), 16);
        // the bottom-right pixel has no forward neighbour in either direction,
        // so its edge strength is zero under replicate padding
        let smask = structure_mask(&busy, &full).unwrap();
        assert_eq!(smask.count(), 15);
        assert!(!smask.get(3, 3));
        for (i, v) in maps.structure.values().iter().enumerate() {
            let expect = if i == 15 { 2.0 * LN_2 } else { 4.0 * LN_2 };
            assert_abs_diff_eq!(*v, expect, epsilon = 1e-6);
        }
    }

    #[test]
    fn loss_weight_examples() {
        let constant = UncertaintyMap { map: ScalarMap::filled(2, 2, 0.3), stage: Stage::Base };
        assert!(to_loss_weight(&constant, WeightMode::Direct).values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let zero = UncertaintyMap { map: ScalarMap::filled(1, 3, 0.0), stage: Stage::Base };
        assert_eq!(to_loss_weight(&zero, WeightMode::InverseExp).values(), &[1.0; 3]);
        assert_eq!(to_loss_weight(&zero, WeightMode::Direct).values(), &[1.0; 3]);
        let two = UncertaintyMap { map: ScalarMap::new(1, 2, vec![LN_2, 0.0]).unwrap(), stage: Stage::Base };
        let w = to_loss_weight(&two, WeightMode::Direct);
        assert_abs_diff_eq!(w.values()[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.values()[1], 0.0, epsilon = 1e-12);
    }
}

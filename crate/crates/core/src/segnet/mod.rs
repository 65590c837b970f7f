//! Small U-shaped encoder-decoder producing per-pixel class logits.
//!
//! Layer table for depth `D`, base width `w`, widths `w_i = w·2^i`:
//!
//! | layer            | kernel | in → out                 |
//! |------------------|--------|--------------------------|
//! | `enc{i}.conv1`   | 3×3    | `c_i → w_i` (`c_0 = 3`, `c_i = w_{i-1}`) |
//! | `enc{i}.conv2`   | 3×3    | `w_i → w_i`              |
//! | `mid.conv1`      | 3×3    | `w_{D-1} → w_D`          |
//! | `mid.conv2`      | 3×3    | `w_D → w_D`              |
//! | `dec{i}.conv1`   | 3×3    | `w_{i+1} + w_i → w_i`    |
//! | `dec{i}.conv2`   | 3×3    | `w_i → w_i`              |
//! | `head`           | 1×1    | `w_0 → C`                |
//!
//! Every 3×3 conv is followed by ReLU. Encoder levels end in a 2×2 max-pool;
//! decoder levels start with a ×2 nearest upsample concatenated with the
//! matching encoder output. There is no normalisation layer, so evaluation is
//! a pure function of the parameters and EMA averaging is exact.

mod checkpoint;

pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, dim_err, Error, Result};
use crate::ndcore::{Eager, Exec, Graph, Rng, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { in_channels: 3, num_classes: 2, base_width: 16, depth: 3, seed: 0 }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(config_err!("model.base_width must be >= 4, got {}", self.base_width));
        }
        if !(1..=6).contains(&self.depth) {
            return Err(config_err!("model.depth must lie in 1..=6, got {}", self.depth));
        }
        if self.num_classes < 2 {
            return Err(config_err!("model.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 {
            return Err(config_err!("model.in_channels must be positive"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `(name, c_in, c_out, kernel)` for every conv, in parameter order.
    pub fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for i in 0..self.depth {
            out.push((format!("enc{i}.conv1"), c_in, self.width(i), 3));
            out.push((format!("enc{i}.conv2"), self.width(i), self.width(i), 3));
            c_in = self.width(i);
        }
        out.push(("mid.conv1".into(), c_in, self.width(self.depth), 3));
        out.push(("mid.conv2".into(), self.width(self.depth), self.width(self.depth), 3));
        for i in (0..self.depth).rev() {
            out.push((format!("dec{i}.conv1"), self.width(i + 1) + self.width(i), self.width(i), 3));
            out.push((format!("dec{i}.conv2"), self.width(i), self.width(i), 3));
        }
        out.push(("head".into(), self.width(0), self.num_classes, 1));
        out
    }

    /// Hash of the architecture (everything but the seed).
    pub fn fingerprint(&self) -> u64 {
        let canonical = format!(
            "segnet/v1;in={};classes={};width={};depth={}",
            self.in_channels, self.num_classes, self.base_width, self.depth
        );
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Named parameters of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Scalar = f32> {
    config: SegNetConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    fingerprint: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn from_parts(config: SegNetConfig, names: Vec<String>, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected: Vec<(String, Vec<usize>)> = expected_shapes(&config);
        if names.len() != expected.len() || params.len() != expected.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, got {} names / {} tensors",
                expected.len(),
                names.len(),
                params.len()
            )));
        }
        for ((name, p), (ename, eshape)) in names.iter().zip(&params).zip(&expected) {
            if name != ename || p.shape() != eshape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` {:?} does not match `{ename}` {:?}",
                    p.shape(),
                    eshape
                )));
            }
        }
        let fingerprint = config.fingerprint();
        Ok(ModelState { config, names, params, fingerprint })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// True when fingerprints match and names/shapes align one-to-one.
    pub fn compatible_with<U: Scalar>(&self, other: &ModelState<U>) -> bool {
        self.fingerprint == other.fingerprint
            && self.names == other.names
            && self.params.iter().zip(&other.params).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn ensure_compatible<U: Scalar>(&self, other: &ModelState<U>) -> Result<()> {
        if self.compatible_with(other) {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "fingerprint {:016x} vs {:016x}",
                self.fingerprint, other.fingerprint
            )))
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            fingerprint: self.fingerprint,
        }
    }

    /// Order-sensitive digest of every parameter bit, for change detection.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}

fn expected_shapes(cfg: &SegNetConfig) -> Vec<(String, Vec<usize>)> {
    cfg.layers()
        .into_iter()
        .flat_map(|(name, ci, co, k)| [(format!("{name}.weight"), vec![co, ci, k, k]), (format!("{name}.bias"), vec![co])])
        .collect()
}

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn build(cfg: &SegNetConfig, rng: &mut Rng) -> Result<ModelState<f32>> {
    cfg.validate()?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in expected_shapes(cfg) {
        let t = if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let std = (2.0 / fan_in).sqrt();
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| (rng.normal() * std) as f32).collect())?
        } else {
            Tensor::zeros(shape)
        };
        names.push(name);
        params.push(t);
    }
    ModelState::from_parts(cfg.clone(), names, params)
}

/// [`build`] seeded from `cfg.seed`.
pub fn init(cfg: &SegNetConfig) -> Result<ModelState<f32>> {
    build(cfg, &mut Rng::new(cfg.seed))
}

fn check_input(cfg: &SegNetConfig, shape: &[usize]) -> Result<()> {
    let [_, c, h, w] = match *shape {
        [b, c, h, w] => [b, c, h, w],
        ref s => return Err(dim_err!("network input must be [B,C,H,W], got {s:?}")),
    };
    if c != cfg.in_channels {
        return Err(dim_err!("network expects {} input channels, got {c}", cfg.in_channels));
    }
    let m = cfg.size_multiple();
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(dim_err!("input {h}x{w} must be a positive multiple of {m} (depth {})", cfg.depth));
    }
    Ok(())
}

/// The network body over any executor; `params` follow [`SegNetConfig::layers`] order.
pub fn forward_with<T: Scalar, E: Exec<T>>(
    exec: &mut E,
    cfg: &SegNetConfig,
    params: &[E::Value],
    input: E::Value,
) -> Result<E::Value> {
    let mut p = params.iter();
    let mut conv = |exec: &mut E, x: &E::Value, pad: usize| -> Result<E::Value> {
        let w = p.next().ok_or_else(|| Error::Incompatible("too few parameters".into()))?;
        let b = p.next().ok_or_else(|| Error::Incompatible("too few parameters".into()))?;
        exec.conv2d(x, w, b, 1, pad)
    };
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for _ in 0..cfg.depth {
        let y = conv(exec, &x, 1)?;
        let y = exec.relu(&y)?;
        let y = conv(exec, &y, 1)?;
        let y = exec.relu(&y)?;
        x = exec.maxpool2(&y)?;
        skips.push(y);
    }
    let y = conv(exec, &x, 1)?;
    let y = exec.relu(&y)?;
    let y = conv(exec, &y, 1)?;
    x = exec.relu(&y)?;
    for skip in skips.iter().rev() {
        let up = exec.upsample_nearest(&x, 2)?;
        let cat = exec.concat_channels(&[&up, skip])?;
        let y = conv(exec, &cat, 1)?;
        let y = exec.relu(&y)?;
        let y = conv(exec, &y, 1)?;
        x = exec.relu(&y)?;
    }
    conv(exec, &x, 0)
}

/// Evaluation-mode forward: nothing is recorded.
pub fn forward_eval<T: Scalar>(state: &ModelState<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    check_input(&state.config, batch.shape())?;
    forward_with(&mut Eager, &state.config, state.params(), batch.clone())
}

/// Training-mode forward recorded on `graph`. Returns the logits and the
/// parameter leaves (in [`ModelState::params`] order) for gradient lookup.
pub fn forward_train<T: Scalar>(
    graph: &mut Graph<T>,
    state: &ModelState<T>,
    batch: Var,
) -> Result<(Var, Vec<Var>)> {
    check_input(&state.config, graph.value(batch).shape())?;
    let params: Vec<Var> = state.params.iter().map(|p| graph.param(p.clone())).collect();
    let logits = forward_with(graph, &state.config, &params, batch)?;
    Ok((logits, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SegNetConfig {
        SegNetConfig { base_width: 4, depth: 2, seed: 5, ..Default::default() }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init(&small()).unwrap();
        let b = init(&small()).unwrap();
        assert_eq!(a, b);
        let c = init(&SegNetConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.params(), c.params());
        assert_eq!(a.fingerprint(), c.fingerprint());
        assert!(a.compatible_with(&c));
    }

    #[test]
    fn default_parameter_count_matches_hand_count() {
        // conv(a→b, 3×3) = 9ab + b
        // enc0 448 + 2320, enc1 4640 + 9248, enc2 18496 + 36928,
        // mid 73856 + 147584, dec2 110656 + 36928, dec1 27680 + 9248,
        // dec0 6928 + 2320, head 16·2 + 2 = 34
        let s = init(&SegNetConfig::default()).unwrap();
        assert_eq!(s.param_count(), 487_314);
    }

    #[test]
    fn output_matches_input_resolution_at_all_depths() {
        for depth in 1..=4 {
            let cfg = SegNetConfig { base_width: 4, depth, ..Default::default() };
            let s = init(&cfg).unwrap();
            let side = 16;
            let x = Tensor::<f32>::full([2, 3, side, side], 0.5);
            let y = forward_eval(&s, &x).unwrap();
            assert_eq!(y.shape(), &[2, 2, side, side], "depth {depth}");
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let s = init(&small()).unwrap();
        let x = Tensor::<f32>::zeros([1, 3, 10, 12]);
        assert!(matches!(forward_eval(&s, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let s = init(&small()).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::new([1, 3, 8, 8], (0..192).map(|_| rng.uniform(0.0, 1.0) as f32).collect()).unwrap();
        let a = forward_eval(&s, &x).unwrap();
        let b = forward_eval(&s, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn graph_and_eager_agree() {
        let s = init(&small()).unwrap();
        let x = Tensor::<f32>::full([1, 3, 8, 8], 0.25);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (logits, params) = forward_train(&mut g, &s, xv).unwrap();
        assert_eq!(params.len(), s.params().len());
        assert_eq!(g.value(logits).data(), forward_eval(&s, &x).unwrap().data());
    }

    struct NetLoss {
        state: ModelState<f64>,
        input: Tensor<f64>,
        target: Tensor<f64>,
        /// `None` differentiates w.r.t. the input, `Some(i)` w.r.t. parameter `i`.
        wrt: Option<usize>,
    }

    impl crate::ndcore::Objective for NetLoss {
        fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
            let input = match self.wrt {
                None => x,
                Some(_) => g.input(self.input.cast()),
            };
            let params: Vec<Var> = self
                .state
                .params()
                .iter()
                .enumerate()
                .map(|(i, p)| if Some(i) == self.wrt { x } else { g.input(p.cast()) })
                .collect();
            let logits = forward_with(g, self.state.config(), &params, input)?;
            Ok(crate::losses::ce_dice(g, logits, &self.target.cast(), None)?.var)
        }
    }

    #[test]
    fn loss_through_network_passes_gradient_check() {
        let cfg = SegNetConfig { base_width: 4, depth: 2, seed: 13, ..Default::default() };
        let state = init(&cfg).unwrap().cast::<f64>();
        let mut rng = Rng::new(17);
        let input = Tensor::new([1, 3, 8, 8], (0..192).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let target: Vec<f64> = (0..64).map(|i| if (i % 8) + (i / 8) > 7 { 1.0 } else { 0.0 }).collect();
        let target = Tensor::new([1, 2, 8, 8], target.iter().map(|t| 1.0 - t).chain(target.iter().copied()).collect()).unwrap();
        let head = state.names().iter().position(|n| n == "head.weight").unwrap();
        let first = state.names().iter().position(|n| n == "enc0.conv1.weight").unwrap();
        for wrt in [None, Some(head), Some(first)] {
            let x = match wrt {
                None => input.cast::<f32>(),
                Some(i) => state.params()[i].cast::<f32>(),
            };
            let obj = NetLoss { state: state.clone(), input: input.clone(), target: target.clone(), wrt };
            let rel = crate::ndcore::gradient_check(&obj, &x, 1e-4).unwrap();
            assert!(rel < 1e-3, "{wrt:?}: rel {rel}");
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(SegNetConfig { base_width: 3, ..Default::default() }.validate().is_err());
        assert!(SegNetConfig { depth: 0, ..Default::default() }.validate().is_err());
        assert!(SegNetConfig { num_classes: 1, ..Default::default() }.validate().is_err());
    }
}

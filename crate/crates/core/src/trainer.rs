//! Dual-student training with an EMA teacher.
//!
//! One optimizer step, in order:
//!
//! 1. shared flips/rotations on each labeled image and its mask;
//! 2. supervised CE+Dice for each enabled student;
//! 3. per unlabeled image, a color view `A_C(x)` (jitter or histogram match)
//!    and an elastic view `A_S(x)`; the teacher predicts on `x` and on
//!    `A_S(x)` without recording gradients, giving pseudo-labels and the
//!    color/structure uncertainty maps;
//! 4. consistency losses `C(A_C(x))` vs `T(x)` and `S(A_S(x))` vs `T(A_S(x))`
//!    weighted by those maps, added with factor `λ_unsup(epoch)`;
//! 5. one AdamW step per student.
//!
//! The teacher only changes through [`ema_update`].

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{color_branch, sample_elastic, warp, Interp, SharedGeom};
use crate::data::{FoldData, Sample};
use crate::error::{config_err, dim_err, Error, Result};
use crate::harness::{dice_score, jaccard_score, write_metrics, MetricRow, RunConfig};
use crate::imaging::{BinaryMask, ScalarMap};
use crate::losses::{ce_dice, unsup_pair_loss, LossValue, PseudoMode};
use crate::ndcore::{Graph, Rng, Tensor, Var};
use crate::segnet::{build, forward_eval, forward_with, save_checkpoint, ModelState, SegNetConfig};
use crate::uncertainty::{csds_uncertainty, to_loss_weight};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(config_err!("optimizer lr/weight_decay must be >= 0 and eps > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("optimizer betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-parameter moment buffers of decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
    skipped: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ModelState) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW { cfg, m: zeros.clone(), v: zeros, steps: 0, skipped: 0 }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`. Returns `false` (and counts a
    /// skip) when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelState, grads: &[Vec<f32>]) -> Result<bool> {
        if grads.len() != self.m.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(dim_err!("gradients do not match the optimizer's parameter layout"));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.steps += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *theta = ((*theta as f64) * decay - lr * update) as f32;
            }
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaStrategy {
    #[default]
    Mean,
    Alternate,
    BestStudentOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub alpha: f64,
    pub strategy: EmaStrategy,
    /// Use `min(alpha, 1 − 1/(t+1))` at update `t`, so an early teacher
    /// tracks the students instead of its initialisation.
    pub warmup: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig { alpha: 0.99, strategy: EmaStrategy::Mean, warmup: false }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("train.ema.alpha must lie in [0, 1], got {}", self.alpha));
        }
        Ok(())
    }

    /// Decay used for the `t`-th update (0-based).
    pub fn alpha_at(&self, t: u64) -> f64 {
        if self.warmup {
            self.alpha.min(1.0 - 1.0 / (t as f64 + 1.0))
        } else {
            self.alpha
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Student {
    Color,
    Structure,
}

impl Student {
    pub fn name(self) -> &'static str {
        match self {
            Student::Color => "color",
            Student::Structure => "structure",
        }
    }
}

/// What the teacher moved toward in one EMA update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaSource {
    Mean,
    Single(Student),
}

/// Source selection: alternate uses color on even epochs; best-student picks
/// the higher validation Dice `(color, structure)`, ties to color.
pub fn ema_source(strategy: EmaStrategy, epoch: usize, val_scores: (f64, f64)) -> EmaSource {
    match strategy {
        EmaStrategy::Mean => EmaSource::Mean,
        EmaStrategy::Alternate if epoch % 2 == 0 => EmaSource::Single(Student::Color),
        EmaStrategy::Alternate => EmaSource::Single(Student::Structure),
        EmaStrategy::BestStudentOnly if val_scores.1 > val_scores.0 => EmaSource::Single(Student::Structure),
        EmaStrategy::BestStudentOnly => EmaSource::Single(Student::Color),
    }
}

/// `θ_T ← α·θ_T + (1−α)·θ_src`, evaluated in f64 and rounded once.
pub fn ema_toward(teacher: &mut ModelState, source: &ModelState, alpha: f64) -> Result<()> {
    teacher.ensure_compatible(source)?;
    for (t, s) in teacher.params_mut().iter_mut().zip(source.params()) {
        for (t, &s) in t.data_mut().iter_mut().zip(s.data()) {
            *t = (alpha * *t as f64 + (1.0 - alpha) * s as f64) as f32;
        }
    }
    Ok(())
}

/// `θ_T ← α·θ_T + (1−α)·(θ_a + θ_b)/2`, evaluated in f64 and rounded once.
pub fn ema_toward_mean(teacher: &mut ModelState, a: &ModelState, b: &ModelState, alpha: f64) -> Result<()> {
    teacher.ensure_compatible(a)?;
    teacher.ensure_compatible(b)?;
    for ((t, a), b) in teacher.params_mut().iter_mut().zip(a.params()).zip(b.params()) {
        for ((t, &a), &b) in t.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *t = (alpha * *t as f64 + (1.0 - alpha) * ((a as f64 + b as f64) / 2.0)) as f32;
        }
    }
    Ok(())
}

pub fn ema_update(
    teacher: &mut ModelState,
    color: &ModelState,
    structure: &ModelState,
    cfg: &EmaConfig,
    epoch: usize,
    val_scores: (f64, f64),
) -> Result<EmaSource> {
    let source = ema_source(cfg.strategy, epoch, val_scores);
    match source {
        EmaSource::Mean => ema_toward_mean(teacher, color, structure, cfg.alpha)?,
        EmaSource::Single(Student::Color) => ema_toward(teacher, color, cfg.alpha)?,
        EmaSource::Single(Student::Structure) => ema_toward(teacher, structure, cfg.alpha)?,
    }
    Ok(source)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base weight of the consistency loss.
    pub lambda_unsup: f64,
    /// Ramp-up length as a fraction of `epochs`.
    pub ramp_fraction: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { epochs: 80, batch_size: 4, lambda_unsup: 1.0, ramp_fraction: 0.2 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("train.schedule epochs and batch_size must be >= 1"));
        }
        if !(self.lambda_unsup >= 0.0) || !(self.ramp_fraction >= 0.0) {
            return Err(config_err!("train.schedule lambda_unsup and ramp_fraction must be >= 0"));
        }
        Ok(())
    }

    pub fn ramp_epochs(&self) -> f64 {
        self.ramp_fraction * self.epochs as f64
    }
}

/// `base·exp(−5(1 − min(1, epoch/ramp))²)`; constant `base` when the ramp is empty.
pub fn lambda_unsup(epoch: usize, schedule: &TrainSchedule) -> f64 {
    let ramp = schedule.ramp_epochs();
    if ramp <= 0.0 {
        return schedule.lambda_unsup;
    }
    let t = (epoch as f64 / ramp).min(1.0);
    schedule.lambda_unsup * (-5.0 * (1.0 - t).powi(2)).exp()
}

/// How the teacher starts out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInit {
    /// All three networks start from the same seeded weights.
    #[default]
    Shared,
    /// Teacher and students drawn from independent streams of the seed.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub ema: EmaConfig,
    pub schedule: TrainSchedule,
    pub enable_color_student: bool,
    pub enable_structure_student: bool,
    /// `false` trains on labeled data only (supervised baseline).
    pub unsupervised: bool,
    pub pseudo_mode: PseudoMode,
    pub teacher_init: TeacherInit,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            ema: EmaConfig::default(),
            schedule: TrainSchedule::default(),
            enable_color_student: true,
            enable_structure_student: true,
            unsupervised: true,
            pseudo_mode: PseudoMode::Hard,
            teacher_init: TeacherInit::Shared,
            eval_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.ema.validate()?;
        self.schedule.validate()?;
        if !self.enable_color_student && !self.enable_structure_student {
            return Err(config_err!("at least one of train.enable_color_student / enable_structure_student must be true"));
        }
        if self.eval_batch == 0 {
            return Err(config_err!("train.eval_batch must be >= 1"));
        }
        Ok(())
    }

    pub fn enabled(&self, s: Student) -> bool {
        match s {
            Student::Color => self.enable_color_student,
            Student::Structure => self.enable_structure_student,
        }
    }

    pub fn students(&self) -> Vec<Student> {
        [Student::Color, Student::Structure].into_iter().filter(|&s| self.enabled(s)).collect()
    }

    /// EMA source for this configuration; a single enabled student is always the source.
    pub fn ema_source(&self, epoch: usize, val_scores: (f64, f64)) -> EmaSource {
        match (self.enable_color_student, self.enable_structure_student) {
            (true, false) => EmaSource::Single(Student::Color),
            (false, true) => EmaSource::Single(Student::Structure),
            _ => ema_source(self.ema.strategy, epoch, val_scores),
        }
    }
}

/// Teacher and the two students.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub teacher: ModelState,
    pub color: ModelState,
    pub structure: ModelState,
}

impl Networks {
    pub fn init(model: &SegNetConfig, seed: u64, init: TeacherInit) -> Result<Self> {
        let cfg = SegNetConfig { seed, ..model.clone() };
        match init {
            TeacherInit::Shared => {
                let s = build(&cfg, &mut Rng::new(seed))?;
                Ok(Networks { teacher: s.clone(), color: s.clone(), structure: s })
            }
            TeacherInit::Independent => {
                let root = Rng::new(seed);
                Ok(Networks {
                    teacher: build(&cfg, &mut root.split(0))?,
                    color: build(&cfg, &mut root.split(1))?,
                    structure: build(&cfg, &mut root.split(2))?,
                })
            }
        }
    }

    pub fn student(&self, s: Student) -> &ModelState {
        match s {
            Student::Color => &self.color,
            Student::Structure => &self.structure,
        }
    }

    pub fn student_mut(&mut self, s: Student) -> &mut ModelState {
        match s {
            Student::Color => &mut self.color,
            Student::Structure => &mut self.structure,
        }
    }

    /// The `t`-th teacher update of a run.
    pub fn ema(&mut self, cfg: &TrainConfig, t: u64, epoch: usize, val_scores: (f64, f64)) -> Result<EmaSource> {
        let source = cfg.ema_source(epoch, val_scores);
        let alpha = cfg.ema.alpha_at(t);
        match source {
            EmaSource::Mean => ema_toward_mean(&mut self.teacher, &self.color, &self.structure, alpha)?,
            EmaSource::Single(Student::Color) => ema_toward(&mut self.teacher, &self.color, alpha)?,
            EmaSource::Single(Student::Structure) => ema_toward(&mut self.teacher, &self.structure, alpha)?,
        }
        Ok(source)
    }
}

/// Losses of one student in one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub sup: LossValue,
    pub unsup: Option<LossValue>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub lambda_unsup: f64,
    pub color: Option<BranchReport>,
    pub structure: Option<BranchReport>,
    /// Optimizer steps actually applied (non-finite gradients skip).
    pub applied: Vec<Student>,
}

impl StepReport {
    pub fn branch(&self, s: Student) -> Option<&BranchReport> {
        match s {
            Student::Color => self.color.as_ref(),
            Student::Structure => self.structure.as_ref(),
        }
    }
}

/// Gradients per student, in parameter order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepGradients {
    pub color: Option<Vec<Vec<f32>>>,
    pub structure: Option<Vec<Vec<f32>>>,
}

/// `[N, C, H, W]` one-hot of binary masks: class 1 where the mask is set.
pub fn one_hot_masks(masks: &[&Tensor<f32>], num_classes: usize) -> Result<Tensor<f32>> {
    let first = masks.first().ok_or_else(|| dim_err!("no masks"))?;
    let [_, _, h, w] = first.dims4()?;
    let hw = h * w;
    let mut data = vec![0.0f32; masks.len() * num_classes * hw];
    for (b, m) in masks.iter().enumerate() {
        if m.numel() != hw {
            return Err(dim_err!("mask {:?} vs {h}x{w}", m.shape()));
        }
        for (px, &v) in m.data().iter().enumerate() {
            let class = if v > 0.5 { 1 } else { 0 };
            data[(b * num_classes + class) * hw + px] = 1.0;
        }
    }
    Tensor::new(vec![masks.len(), num_classes, h, w], data)
}

/// Unlabeled views and teacher outputs for one branch.
struct UnsupTargets {
    input: Tensor<f32>,
    teacher_logits: Tensor<f32>,
    weights: Vec<ScalarMap>,
}

fn per_sample(batch: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    (0..batch.shape()[0]).map(|i| batch.sample(i)).collect()
}

fn unsup_targets(
    batch_u: &[Sample],
    nets: &Networks,
    cfg: &RunConfig,
    references: &[&Tensor<f32>],
    rng: &mut Rng,
) -> Result<(Option<UnsupTargets>, Option<UnsupTargets>)> {
    let tc = &cfg.train;
    let (mut clean, mut color_views, mut warped) = (Vec::new(), Vec::new(), Vec::new());
    for s in batch_u {
        let x = if cfg.augment.shared_geometry { SharedGeom::sample(rng).apply(&s.image)? } else { s.image.clone() };
        if tc.enable_color_student {
            let others: Vec<&Tensor<f32>> = references.iter().copied().filter(|r| !std::ptr::eq(*r, &s.image)).collect();
            color_views.push(color_branch(&x, &others, &cfg.augment.jitter, rng)?.0);
        }
        if tc.enable_structure_student {
            let field = sample_elastic(s.height(), s.width(), cfg.augment.elastic_alpha, cfg.augment.elastic_sigma, rng)?;
            warped.push(warp(&x, &field, Interp::Bilinear)?);
        }
        clean.push(x);
    }
    let weight_mode = cfg.uncertainty.weight_mode;
    let color = if tc.enable_color_student {
        let clean_batch = Tensor::stack(&clean)?;
        let logits = forward_eval(&nets.teacher, &clean_batch)?;
        let weights = per_sample(&logits)?
            .iter()
            .zip(&clean)
            .map(|(z, x)| Ok(to_loss_weight(&csds_uncertainty(z, x, &cfg.uncertainty)?.0, weight_mode)))
            .collect::<Result<Vec<_>>>()?;
        Some(UnsupTargets { input: Tensor::stack(&color_views)?, teacher_logits: logits, weights })
    } else {
        None
    };
    let structure = if tc.enable_structure_student {
        let warped_batch = Tensor::stack(&warped)?;
        let logits = forward_eval(&nets.teacher, &warped_batch)?;
        let weights = per_sample(&logits)?
            .iter()
            .zip(&warped)
            .map(|(z, x)| Ok(to_loss_weight(&csds_uncertainty(z, x, &cfg.uncertainty)?.1, weight_mode)))
            .collect::<Result<Vec<_>>>()?;
        Some(UnsupTargets { input: warped_batch, teacher_logits: logits, weights })
    } else {
        None
    };
    Ok((color, structure))
}

fn student_gradients(
    state: &ModelState,
    labeled: &Tensor<f32>,
    target: &Tensor<f32>,
    unsup: Option<&UnsupTargets>,
    lambda: f64,
    pseudo_mode: PseudoMode,
) -> Result<(BranchReport, Vec<Vec<f32>>)> {
    let mut g = Graph::<f32>::new();
    let params: Vec<Var> = state.params().iter().map(|p| g.param(p.clone())).collect();
    let x = g.input(labeled.clone());
    let logits = forward_with(&mut g, state.config(), &params, x)?;
    let sup = ce_dice(&mut g, logits, target, None)?;
    let (total, unsup_value) = match unsup {
        Some(u) => {
            let xu = g.input(u.input.clone());
            let zu = forward_with(&mut g, state.config(), &params, xu)?;
            let l = unsup_pair_loss(&mut g, zu, &u.teacher_logits, &u.weights, pseudo_mode)?;
            let scaled = g.scale(l.var, lambda)?;
            (g.add(sup.var, scaled)?, Some(l.value))
        }
        None => (sup.var, None),
    };
    let total_value = g.value(total).item() as f64;
    if !total_value.is_finite() {
        return Err(Error::Divergence(format!("loss became {total_value}")));
    }
    g.backward(total)?;
    let grads = params
        .iter()
        .zip(state.params())
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
        .collect();
    Ok((BranchReport { sup: sup.value, unsup: unsup_value, total: total_value }, grads))
}

/// Steps 1–4: losses and gradients for every enabled student. Draws exactly
/// one value from `rng`; the labeled and unlabeled paths use separate
/// sub-streams, so the supervised part does not depend on whether the
/// consistency branch runs.
pub fn step_gradients(
    batch_l: &[Sample],
    batch_u: &[Sample],
    nets: &Networks,
    cfg: &RunConfig,
    lambda: f64,
    rng: &mut Rng,
) -> Result<(StepReport, StepGradients)> {
    if batch_l.is_empty() {
        return Err(Error::Validation("a training step needs at least one labeled sample".into()));
    }
    let step = Rng::new(rng.next_u64());
    let mut geo = step.split(0);
    let mut aug = step.split(1);

    let mut images = Vec::with_capacity(batch_l.len());
    let mut masks = Vec::with_capacity(batch_l.len());
    for s in batch_l {
        if cfg.augment.shared_geometry {
            let g = SharedGeom::sample(&mut geo);
            images.push(g.apply(&s.image)?);
            masks.push(g.apply(&s.mask)?);
        } else {
            images.push(s.image.clone());
            masks.push(s.mask.clone());
        }
    }
    let labeled = Tensor::stack(&images)?;
    let target = one_hot_masks(&masks.iter().collect::<Vec<_>>(), nets.color.config().num_classes)?;

    let (u_color, u_structure) = if cfg.train.unsupervised && !batch_u.is_empty() {
        let refs: Vec<&Tensor<f32>> = batch_l.iter().chain(batch_u).map(|s| &s.image).collect();
        unsup_targets(batch_u, nets, cfg, &refs, &mut aug)?
    } else {
        (None, None)
    };

    let mut report = StepReport { lambda_unsup: lambda, ..Default::default() };
    let mut grads = StepGradients::default();
    let mode = cfg.train.pseudo_mode;
    if cfg.train.enable_color_student {
        let (r, g) = student_gradients(&nets.color, &labeled, &target, u_color.as_ref(), lambda, mode)?;
        report.color = Some(r);
        grads.color = Some(g);
    }
    if cfg.train.enable_structure_student {
        let (r, g) = student_gradients(&nets.structure, &labeled, &target, u_structure.as_ref(), lambda, mode)?;
        report.structure = Some(r);
        grads.structure = Some(g);
    }
    Ok((report, grads))
}

/// Optimizer state of both students.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub color: AdamW,
    pub structure: AdamW,
}

impl Optimizers {
    pub fn new(cfg: &AdamWConfig, nets: &Networks) -> Self {
        Optimizers { color: AdamW::new(cfg.clone(), &nets.color), structure: AdamW::new(cfg.clone(), &nets.structure) }
    }

    pub fn skipped(&self) -> u64 {
        self.color.skipped() + self.structure.skipped()
    }
}

/// Steps 1–5. The teacher is left untouched.
pub fn train_step(
    batch_l: &[Sample],
    batch_u: &[Sample],
    nets: &mut Networks,
    opts: &mut Optimizers,
    cfg: &RunConfig,
    lambda: f64,
    rng: &mut Rng,
) -> Result<StepReport> {
    let (mut report, grads) = step_gradients(batch_l, batch_u, nets, cfg, lambda, rng)?;
    if let Some(g) = &grads.color {
        if opts.color.step(&mut nets.color, g)? {
            report.applied.push(Student::Color);
        }
    }
    if let Some(g) = &grads.structure {
        if opts.structure.step(&mut nets.structure, g)? {
            report.applied.push(Student::Structure);
        }
    }
    Ok(report)
}

/// Foreground masks (argmax class ≠ 0) for a set of samples.
pub fn predict_masks(state: &ModelState, samples: &[Sample], batch: usize) -> Result<Vec<BinaryMask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let labels = crate::losses::pseudo_labels(&forward_eval(state, &x)?)?;
        let [b, c, h, w] = labels.dims4()?;
        let hw = h * w;
        for i in 0..b {
            let bg = &labels.data()[i * c * hw..i * c * hw + hw];
            out.push(BinaryMask::new(h, w, bg.iter().map(|&v| v == 0.0).collect())?);
        }
    }
    Ok(out)
}

/// Mean per-image Dice and Jaccard (percent) of `state` on `samples`.
pub fn evaluate(state: &ModelState, samples: &[Sample], batch: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let preds = predict_masks(state, samples, batch)?;
    let (mut d, mut j) = (0.0, 0.0);
    for (p, s) in preds.iter().zip(samples) {
        let gt = BinaryMask::from_tensor(&s.mask, 0.5)?;
        d += dice_score(p, &gt)?;
        j += jaccard_score(p, &gt)?;
    }
    let n = samples.len() as f64;
    Ok((d / n, j / n))
}

/// Student selected by validation Dice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestStudent {
    pub student: Student,
    pub epoch: usize,
    pub val_dice: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub fold: usize,
    pub rows: Vec<MetricRow>,
    pub best: Option<BestStudent>,
    pub test_dice: f64,
    pub test_jaccard: f64,
    pub teacher_test_dice: f64,
    pub optimizer_steps: u64,
    pub ema_updates: u64,
    pub skipped_steps: u64,
    pub networks: Networks,
    pub best_state: ModelState,
}

/// Summary written to `run.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub fold: usize,
    pub wall_time_s: f64,
    pub best: Option<BestStudent>,
    pub test_dice: f64,
    pub test_jaccard: f64,
    pub teacher_test_dice: f64,
    pub optimizer_steps: u64,
    pub ema_updates: u64,
    pub skipped_steps: u64,
}

fn cycle_take(items: &[Sample], order: &mut Vec<usize>, cursor: &mut usize, n: usize, rng: &mut Rng) -> Vec<Sample> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n.min(items.len()) {
        if *cursor >= order.len() {
            *order = (0..items.len()).collect();
            rng.shuffle(order);
            *cursor = 0;
        }
        out.push(items[order[*cursor]].clone());
        *cursor += 1;
    }
    out
}

#[derive(Default, Clone, Copy)]
struct LossSums {
    sup: f64,
    unsup: f64,
    n: usize,
}

/// Trains one fold. With `out`, writes `metrics.csv`, `run.json`,
/// `best_student.ckpt` and `teacher.ckpt` there.
pub fn fit(cfg: &RunConfig, data: &FoldData, out: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(config_err!("no labeled training samples"));
    }
    let start = Instant::now();
    let tc = &cfg.train;
    let mut nets = Networks::init(&cfg.model, cfg.seed, tc.teacher_init)?;
    let mut opts = Optimizers::new(&tc.optimizer, &nets);
    let mut rng = Rng::new(cfg.seed).split(0x7472_6169_6e);
    let bs = tc.schedule.batch_size;
    let use_unlabeled = tc.unsupervised && !data.unlabeled.is_empty();
    let steps_per_epoch = data.labeled.len().max(data.unlabeled.len()).div_ceil(bs);

    let mut rows = Vec::new();
    let mut best: Option<BestStudent> = None;
    let mut best_state = nets.color.clone();
    let mut val_scores = (0.0, 0.0);
    let (mut l_order, mut l_cursor) = (Vec::new(), usize::MAX);
    let mut ema_updates = 0u64;
    let fold = cfg.data.fold;

    for epoch in 0..tc.schedule.epochs {
        let lambda = lambda_unsup(epoch, &tc.schedule);
        let mut u_order: Vec<usize> = (0..data.unlabeled.len()).collect();
        rng.shuffle(&mut u_order);
        let mut sums = [LossSums::default(); 2];
        for step in 0..steps_per_epoch {
            let batch_l = cycle_take(&data.labeled, &mut l_order, &mut l_cursor, bs, &mut rng);
            let batch_u: Vec<Sample> = if use_unlabeled {
                u_order.iter().skip(step * bs).take(bs).map(|&i| data.unlabeled[i].clone()).collect()
            } else {
                Vec::new()
            };
            let report = match train_step(&batch_l, &batch_u, &mut nets, &mut opts, cfg, lambda, &mut rng) {
                Ok(r) => r,
                Err(e @ Error::Divergence(_)) => {
                    if let Some(dir) = out {
                        save_checkpoint(&dir.join("diverged_color.ckpt"), &nets.color)?;
                        save_checkpoint(&dir.join("diverged_structure.ckpt"), &nets.structure)?;
                        save_checkpoint(&dir.join("diverged_teacher.ckpt"), &nets.teacher)?;
                    }
                    return Err(Error::Divergence(format!("epoch {epoch}, step {step}: {e}")));
                }
                Err(e) => return Err(e),
            };
            for (k, s) in [Student::Color, Student::Structure].into_iter().enumerate() {
                if let Some(b) = report.branch(s) {
                    sums[k].sup += b.sup.value;
                    sums[k].unsup += b.unsup.map_or(0.0, |u| u.value);
                    sums[k].n += 1;
                }
            }
            nets.ema(tc, ema_updates, epoch, val_scores)?;
            ema_updates += 1;
        }

        let eb = tc.eval_batch;
        let mut scores = [f64::NEG_INFINITY; 2];
        for (k, s) in [Student::Color, Student::Structure].into_iter().enumerate() {
            if !tc.enabled(s) {
                continue;
            }
            let (d, j) = evaluate(nets.student(s), &data.validation, eb)?;
            scores[k] = d;
            let n = sums[k].n.max(1) as f64;
            rows.push(MetricRow {
                run_id: cfg.run_id.clone(),
                fold,
                epoch,
                split: "val".into(),
                model: s.name().into(),
                dice: d,
                jaccard: j,
                loss_sup: sums[k].sup / n,
                loss_unsup: sums[k].unsup / n,
                lambda_unsup: lambda,
            });
            if !data.validation.is_empty() && best.as_ref().map_or(true, |b| d > b.val_dice) {
                best = Some(BestStudent { student: s, epoch, val_dice: d });
                best_state = nets.student(s).clone();
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("best_student.ckpt"), &best_state)?;
                }
            }
        }
        let (d, j) = evaluate(&nets.teacher, &data.validation, eb)?;
        rows.push(MetricRow {
            run_id: cfg.run_id.clone(),
            fold,
            epoch,
            split: "val".into(),
            model: "teacher".into(),
            dice: d,
            jaccard: j,
            loss_sup: 0.0,
            loss_unsup: 0.0,
            lambda_unsup: lambda,
        });
        val_scores = (scores[0], scores[1]);
        log::info!("epoch {epoch}: val dice color {:.2} structure {:.2} teacher {d:.2}", scores[0], scores[1]);
    }

    if best.is_none() {
        let s = tc.students()[0];
        best_state = nets.student(s).clone();
    }
    let last_epoch = tc.schedule.epochs - 1;
    let (test_dice, test_jaccard) = evaluate(&best_state, &data.test, tc.eval_batch)?;
    let (teacher_test_dice, teacher_test_jaccard) = evaluate(&nets.teacher, &data.test, tc.eval_batch)?;
    for (model, epoch, d, j) in [
        ("best", best.as_ref().map_or(last_epoch, |b| b.epoch), test_dice, test_jaccard),
        ("teacher", last_epoch, teacher_test_dice, teacher_test_jaccard),
    ] {
        rows.push(MetricRow {
            run_id: cfg.run_id.clone(),
            fold,
            epoch,
            split: "test".into(),
            model: model.into(),
            dice: d,
            jaccard: j,
            loss_sup: 0.0,
            loss_unsup: 0.0,
            lambda_unsup: lambda_unsup(last_epoch, &tc.schedule),
        });
    }

    let optimizer_steps = opts.color.steps() + opts.structure.steps();
    let result = RunResult {
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        fold,
        rows,
        best,
        test_dice,
        test_jaccard,
        teacher_test_dice,
        optimizer_steps,
        ema_updates,
        skipped_steps: opts.skipped(),
        networks: nets,
        best_state,
    };
    if let Some(dir) = out {
        write_metrics(&dir.join("metrics.csv"), &result.rows)?;
        save_checkpoint(&dir.join("best_student.ckpt"), &result.best_state)?;
        save_checkpoint(&dir.join("teacher.ckpt"), &result.networks.teacher)?;
        let manifest = RunManifest {
            run_id: result.run_id.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            fold,
            wall_time_s: start.elapsed().as_secs_f64(),
            best: result.best.clone(),
            test_dice,
            test_jaccard,
            teacher_test_dice,
            optimizer_steps,
            ema_updates,
            skipped_steps: result.skipped_steps,
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        crate::segnet::write_atomic(&dir.join("run.json"), &json)?;
    }
    Ok(result)
}

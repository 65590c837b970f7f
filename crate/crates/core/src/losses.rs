//! Supervised and consistency losses on the autodiff graph.
//!
//! Every function records onto a [`Graph`] and returns the loss node together
//! with a [`LossValue`] breakdown. Targets and teacher outputs enter as plain
//! tensors, so no gradient can reach whatever produced them.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::imaging::ScalarMap;
use crate::ndcore::{ops, Graph, Scalar, Tensor, Var};

pub const DEFAULT_SMOOTH: f64 = 1.0;

/// Scalar loss plus its parts. For [`ce_dice`], `value = (ce + dice) / 2`
/// where `dice` already carries the mean-weight factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub ce: f64,
    pub dice: f64,
    pub weight_mean: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub var: Var,
    pub value: LossValue,
}

/// Pseudo-label form used by the consistency loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    #[default]
    Hard,
    Soft,
}

/// Rejects targets that are not exactly one-hot along the channel axis.
pub fn validate_one_hot<T: Scalar>(target: &Tensor<T>) -> Result<()> {
    let [b, c, h, w] = target.dims4()?;
    let hw = h * w;
    let t = target.data();
    for bi in 0..b {
        for px in 0..hw {
            let mut ones = 0;
            for ci in 0..c {
                let v = t[(bi * c + ci) * hw + px].as_f64();
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::Validation(format!("target value {v} at sample {bi}, pixel {px} is not 0 or 1")));
                }
            }
            if ones != 1 {
                return Err(Error::Validation(format!("sample {bi}, pixel {px} has {ones} active classes")));
            }
        }
    }
    Ok(())
}

/// One-hot argmax over channels; ties go to the lowest class index.
pub fn pseudo_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = logits.dims4()?;
    let hw = h * w;
    let z = logits.data();
    let mut out = vec![T::zero(); z.len()];
    for bi in 0..b {
        for px in 0..hw {
            let mut best = 0;
            for ci in 1..c {
                if z[(bi * c + ci) * hw + px] > z[(bi * c + best) * hw + px] {
                    best = ci;
                }
            }
            out[(bi * c + best) * hw + px] = T::one();
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Stacks one weight map per sample into a `[B, 1, H, W]` tensor.
pub fn weights_tensor<T: Scalar>(maps: &[ScalarMap], logits_shape: &[usize]) -> Result<Tensor<T>> {
    let &[b, _, h, w] = logits_shape else {
        return Err(dim_err!("expected [B,C,H,W] logits, got {logits_shape:?}"));
    };
    if maps.len() != b {
        return Err(dim_err!("{} weight maps for batch of {b}", maps.len()));
    }
    let mut data = Vec::with_capacity(b * h * w);
    for m in maps {
        if (m.height(), m.width()) != (h, w) {
            return Err(dim_err!("weight map {}x{} vs logits {h}x{w}", m.height(), m.width()));
        }
        if let Some(bad) = m.values().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!("pixel weight {bad} is not a finite non-negative number")));
        }
        data.extend(m.values().iter().map(|&v| T::lit(v)));
    }
    Tensor::new(vec![b, 1, h, w], data)
}

fn weight_mean(maps: Option<&[ScalarMap]>) -> f64 {
    match maps {
        Some(ms) if !ms.is_empty() => {
            let (s, n) = ms.iter().fold((0.0, 0usize), |(s, n), m| (s + m.values().iter().sum::<f64>(), n + m.values().len()));
            s / n as f64
        }
        _ => 1.0,
    }
}

fn check_same_shape<T: Scalar>(g: &Graph<T>, logits: Var, target: &Tensor<T>) -> Result<()> {
    let shape = g.value(logits).shape();
    if shape != target.shape() {
        return Err(dim_err!("target {:?} vs logits {shape:?}", target.shape()));
    }
    Ok(())
}

/// Pixel-weighted mean cross-entropy against a one-hot target.
pub fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &Tensor<T>,
    weights: Option<&[ScalarMap]>,
) -> Result<Loss> {
    check_same_shape(g, logits, target)?;
    validate_one_hot(target)?;
    cross_entropy_any(g, logits, target, weights)
}

fn cross_entropy_any<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &Tensor<T>,
    weights: Option<&[ScalarMap]>,
) -> Result<Loss> {
    let w = weights.map(|m| weights_tensor(m, g.value(logits).shape())).transpose()?;
    let var = g.cross_entropy(logits, target.clone(), w)?;
    let v = g.value(var).item().as_f64();
    Ok(Loss { var, value: LossValue { value: v, ce: v, dice: 0.0, weight_mean: weight_mean(weights) } })
}

/// Soft Dice loss of probabilities against a target.
pub fn soft_dice<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &Tensor<T>, smooth: f64) -> Result<Loss> {
    check_same_shape(g, probs, target)?;
    if !(smooth > 0.0) {
        return Err(Error::Config(format!("dice smooth must be positive, got {smooth}")));
    }
    let var = g.soft_dice(probs, target.clone(), smooth)?;
    let v = g.value(var).item().as_f64();
    Ok(Loss { var, value: LossValue { value: v, ce: 0.0, dice: v, weight_mean: 1.0 } })
}

fn ce_dice_any<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &Tensor<T>,
    weights: Option<&[ScalarMap]>,
) -> Result<Loss> {
    let wm = weight_mean(weights);
    let ce = cross_entropy_any(g, logits, target, weights)?;
    let probs = g.softmax_channel(logits)?;
    let dice = soft_dice(g, probs, target, DEFAULT_SMOOTH)?;
    let ce_half = g.scale(ce.var, 0.5)?;
    let dice_half = g.scale(dice.var, 0.5 * wm)?;
    let var = g.add(ce_half, dice_half)?;
    let value = LossValue {
        value: g.value(var).item().as_f64(),
        ce: ce.value.ce,
        dice: dice.value.dice * wm,
        weight_mean: wm,
    };
    Ok(Loss { var, value })
}

/// `0.5·CE + 0.5·Dice(softmax(logits))`; with weights, CE is weighted per
/// pixel and Dice is scaled by the mean weight.
pub fn ce_dice<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &Tensor<T>,
    weights: Option<&[ScalarMap]>,
) -> Result<Loss> {
    check_same_shape(g, logits, target)?;
    validate_one_hot(target)?;
    ce_dice_any(g, logits, target, weights)
}

/// Weighted consistency of student logits with detached teacher logits.
pub fn unsup_pair_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    weights: &[ScalarMap],
    mode: PseudoMode,
) -> Result<Loss> {
    check_same_shape(g, student_logits, teacher_logits)?;
    let target = match mode {
        PseudoMode::Hard => pseudo_labels(teacher_logits)?,
        PseudoMode::Soft => ops::softmax_channel(teacher_logits)?,
    };
    ce_dice_any(g, student_logits, &target, Some(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{gradient_check, Objective, Rng};
    use crate::uncertainty::{to_loss_weight, Stage, UncertaintyMap, WeightMode};
    use approx::assert_abs_diff_eq;

    fn two_class(logit0: f64, logit1: f64, class: usize, b: usize, hw: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut z = Vec::new();
        let mut t = Vec::new();
        for _ in 0..b {
            z.extend(std::iter::repeat(logit0).take(hw));
            z.extend(std::iter::repeat(logit1).take(hw));
            t.extend(std::iter::repeat(if class == 0 { 1.0 } else { 0.0 }).take(hw));
            t.extend(std::iter::repeat(if class == 1 { 1.0 } else { 0.0 }).take(hw));
        }
        (Tensor::<f64>::from_f64([b, 2, 2, hw / 2], &z).unwrap(), Tensor::<f64>::from_f64([b, 2, 2, hw / 2], &t).unwrap())
    }

    fn eval_ce(z: Tensor<f64>, t: &Tensor<f64>, w: Option<&[ScalarMap]>) -> Result<LossValue> {
        let mut g = Graph::new();
        let v = g.input(z);
        cross_entropy(&mut g, v, t, w).map(|l| l.value)
    }

    #[test]
    fn cross_entropy_reference_values() {
        let (z, t) = two_class(20.0, 0.0, 0, 2, 4);
        assert!(eval_ce(z, &t, None).unwrap().value < 1e-8);
        let (z, t) = two_class(0.0, 0.0, 1, 1, 4);
        assert_abs_diff_eq!(eval_ce(z, &t, None).unwrap().value, std::f64::consts::LN_2, epsilon = 1e-12);
        // p(true) = 0.8 ⇔ logit gap ln 4
        let (z, t) = two_class(4f64.ln(), 0.0, 0, 1, 4);
        assert_abs_diff_eq!(eval_ce(z, &t, None).unwrap().value, -(0.8f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(-(0.8f64).ln(), 0.2231, epsilon = 1e-4);
    }

    #[test]
    fn non_one_hot_target_is_rejected() {
        let (z, mut t) = two_class(0.0, 0.0, 0, 1, 4);
        t.data_mut()[0] = 0.5;
        assert!(matches!(eval_ce(z.clone(), &t, None), Err(Error::Validation(_))));
        t.data_mut()[0] = 1.0;
        t.data_mut()[4] = 1.0;
        assert!(matches!(eval_ce(z, &t, None), Err(Error::Validation(_))));
    }

    #[test]
    fn soft_dice_reference_values() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::<f64>::from_f64([1, 1, 1, 2], &[1.0, 0.0]).unwrap();
        let p = g.input(t.clone());
        assert_abs_diff_eq!(soft_dice(&mut g, p, &t, 1.0).unwrap().value.value, 0.0, epsilon = 1e-15);

        let n = 64;
        let t: Vec<f64> = (0..2 * n).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
        let p: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let t = Tensor::<f64>::from_f64([1, 2, 8, 8], &t).unwrap();
        let pv = g.input(Tensor::<f64>::from_f64([1, 2, 8, 8], &p).unwrap());
        let d = soft_dice(&mut g, pv, &t, 1.0).unwrap().value.value;
        assert_abs_diff_eq!(d, 1.0 - 1.0 / 65.0, epsilon = 1e-12);
        assert!(soft_dice(&mut g, pv, &t, 0.0).is_err());
    }

    #[test]
    fn ce_dice_recombines_and_ones_weights_are_neutral() {
        let mut rng = Rng::new(3);
        let z: Vec<f64> = (0..2 * 2 * 16).map(|_| rng.normal()).collect();
        let z = Tensor::<f64>::from_f64([2, 2, 4, 4], &z).unwrap();
        let t = pseudo_labels(&Tensor::<f64>::from_f64([2, 2, 4, 4], &(0..64).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()).unwrap();
        let mut g = Graph::new();
        let v = g.input(z.clone());
        let plain = ce_dice(&mut g, v, &t, None).unwrap().value;
        assert_abs_diff_eq!(plain.value, (plain.ce + plain.dice) / 2.0, epsilon = 1e-7);
        let ones = vec![ScalarMap::filled(4, 4, 1.0); 2];
        let weighted = ce_dice(&mut g, v, &t, Some(&ones)).unwrap().value;
        assert_abs_diff_eq!(weighted.value, plain.value, epsilon = 1e-7);

        let perfect = t.cast::<f64>().data().iter().map(|v| 40.0 * v).collect::<Vec<_>>();
        let pv = g.input(Tensor::<f64>::from_f64([2, 2, 4, 4], &perfect).unwrap());
        let p = ce_dice(&mut g, pv, &t, None).unwrap().value.value;
        assert!(p < 1e-6, "{p}");
    }

    #[test]
    fn pseudo_label_ties_go_to_lowest_index() {
        let z = Tensor::<f64>::from_f64([1, 3, 1, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(pseudo_labels(&z).unwrap().data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn unsup_agreement_limit() {
        let mut rng = Rng::new(4);
        let z = Tensor::<f64>::from_f64([1, 2, 4, 4], &(0..32).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
        let ones = vec![ScalarMap::filled(4, 4, 1.0)];
        let mut g = Graph::new();
        let s = g.input(z.clone());
        let l = unsup_pair_loss(&mut g, s, &z, &ones, PseudoMode::Hard).unwrap().value.value;
        let own = ce_dice(&mut g, s, &pseudo_labels(&z).unwrap(), None).unwrap().value.value;
        assert_abs_diff_eq!(l, own, epsilon = 1e-12);
        assert!(l > 0.01);

        let sat = pseudo_labels(&z).unwrap().data().iter().map(|v| 50.0 * v).collect::<Vec<_>>();
        let sat = Tensor::<f64>::from_f64([1, 2, 4, 4], &sat).unwrap();
        let s = g.input(sat.clone());
        assert!(unsup_pair_loss(&mut g, s, &sat, &ones, PseudoMode::Hard).unwrap().value.value < 1e-6);

        let unweighted = unsup_pair_loss(&mut g, s, &z, &ones, PseudoMode::Soft).unwrap().value;
        assert!(unweighted.value.is_finite() && unweighted.value > 0.0);
    }

    #[test]
    fn doubling_uncertainty_leaves_direct_weighted_loss_unchanged() {
        let mut rng = Rng::new(8);
        let u: Vec<f64> = (0..16).map(|_| rng.uniform(0.0, 1.0)).collect();
        let doubled: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let mk = |v: Vec<f64>| UncertaintyMap::from_parts(ScalarMap::new(4, 4, v).unwrap(), Stage::StructureModulated);
        let w1 = to_loss_weight(&mk(u), WeightMode::Direct);
        let w2 = to_loss_weight(&mk(doubled), WeightMode::Direct);
        let s = Tensor::<f64>::from_f64([1, 2, 4, 4], &(0..32).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
        let t = Tensor::<f64>::from_f64([1, 2, 4, 4], &(0..32).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let sv = g.input(s);
        let a = unsup_pair_loss(&mut g, sv, &t, &[w1], PseudoMode::Hard).unwrap().value.value;
        let b = unsup_pair_loss(&mut g, sv, &t, &[w2], PseudoMode::Hard).unwrap().value.value;
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn negative_weights_and_shape_mismatch_are_errors() {
        let mut g = Graph::<f64>::new();
        let (z, t) = two_class(0.0, 1.0, 0, 1, 4);
        let v = g.input(z);
        let neg = vec![ScalarMap::filled(2, 2, -1.0)];
        assert!(matches!(ce_dice(&mut g, v, &t, Some(&neg)), Err(Error::Validation(_))));
        let wrong = Tensor::<f64>::zeros([1, 2, 4, 4]);
        assert!(matches!(unsup_pair_loss(&mut g, v, &wrong, &[], PseudoMode::Hard), Err(Error::Dimension(_))));
    }

    struct StudentObjective {
        target: Tensor<f64>,
        teacher: Tensor<f64>,
        weights: Vec<ScalarMap>,
        which: u8,
    }

    impl Objective for StudentObjective {
        fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
            let t = self.target.cast::<T>();
            let loss = match self.which {
                0 => cross_entropy(g, x, &t, Some(&self.weights))?,
                1 => {
                    let p = g.softmax_channel(x)?;
                    soft_dice(g, p, &t, DEFAULT_SMOOTH)?
                }
                2 => ce_dice(g, x, &t, Some(&self.weights))?,
                3 => unsup_pair_loss(g, x, &self.teacher.cast(), &self.weights, PseudoMode::Hard)?,
                _ => unsup_pair_loss(g, x, &self.teacher.cast(), &self.weights, PseudoMode::Soft)?,
            };
            Ok(loss.var)
        }
    }

    #[test]
    fn loss_gradients_pass_gradient_check() {
        let mut rng = Rng::new(21);
        for trial in 0..3 {
            let mut draw = |n: usize| (0..n).map(|_| rng.normal()).collect::<Vec<_>>();
            let x = Tensor::<f64>::from_f64([2, 2, 4, 4], &draw(64)).unwrap().cast::<f32>();
            let target = pseudo_labels(&Tensor::<f64>::from_f64([2, 2, 4, 4], &draw(64)).unwrap()).unwrap();
            let teacher = Tensor::<f64>::from_f64([2, 2, 4, 4], &draw(64)).unwrap();
            let weights: Vec<ScalarMap> = draw(32).chunks(16).map(|c| ScalarMap::new(4, 4, c.iter().map(|v| v.abs() + 0.1).collect()).unwrap()).collect();
            for which in 0..5 {
                let obj = StudentObjective { target: target.clone(), teacher: teacher.clone(), weights: weights.clone(), which };
                let rel = gradient_check(&obj, &x, 1e-4).unwrap();
                assert!(rel < 1e-3, "trial {trial} loss {which}: rel {rel}");
            }
        }
    }

    #[test]
    fn teacher_parameters_receive_no_gradient() {
        let mut rng = Rng::new(2);
        let mut g = Graph::<f64>::new();
        let teacher_w = g.param(Tensor::<f64>::from_f64([2, 2, 1, 1], &[1.0, 0.5, -0.3, 0.7]).unwrap());
        let teacher_b = g.param(Tensor::<f64>::zeros([2]));
        let x = g.input(Tensor::<f64>::from_f64([1, 2, 4, 4], &(0..32).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap());
        let teacher_logits = g.conv2d(x, teacher_w, teacher_b, 1, 0).unwrap();
        let detached = g.value(teacher_logits).clone();
        let student_w = g.param(Tensor::<f64>::from_f64([2, 2, 1, 1], &[0.2, 0.1, 0.4, -0.5]).unwrap());
        let student_b = g.param(Tensor::<f64>::zeros([2]));
        let s = g.conv2d(x, student_w, student_b, 1, 0).unwrap();
        let w = vec![ScalarMap::filled(4, 4, 1.0)];
        let loss = unsup_pair_loss(&mut g, s, &detached, &w, PseudoMode::Hard).unwrap();
        g.backward(loss.var).unwrap();
        assert!(g.grad(student_w).is_some());
        assert!(g.grad(teacher_w).is_none());
        assert!(g.grad(teacher_b).is_none());
    }

    #[test]
    fn cross_entropy_non_negative_and_dice_bounded() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let z = Tensor::<f64>::from_f64([1, 3, 2, 2], &(0..12).map(|_| 3.0 * rng.normal()).collect::<Vec<_>>()).unwrap();
            let t = pseudo_labels(&Tensor::<f64>::from_f64([1, 3, 2, 2], &(0..12).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()).unwrap();
            let mut g = Graph::new();
            let v = g.input(z);
            let l = ce_dice(&mut g, v, &t, None).unwrap().value;
            assert!(l.ce >= 0.0);
            assert!((0.0..=1.0).contains(&l.dice));
        }
    }
}

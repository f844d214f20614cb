//! Matching costs, supervised and unsupervised loss terms, and the
//! uncertainty-weighted mask loss with its analytic gradient for a linear
//! per-pixel model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{sigmoid, softmax_slice, BinaryMask, GroundTruthInstance, InstancePrediction, MaskLogitGrid};
use crate::matching::{hungarian, CostMatrix, MatchResult};
use crate::quality::UncertaintyMap;

/// Clamp applied to every probability before a logarithm.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing in the dice coefficient.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            bce: 1.0,
            dice: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.class, self.bce, self.dice].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("cost weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the unsupervised loss.
    pub lambda: f64,
    pub dice_enabled: bool,
    pub cost_weights: CostWeights,
    /// Cross-entropy on corrected pseudo-label classes as part of the unsupervised loss.
    pub unsup_class_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            dice_enabled: false,
            cost_weights: CostWeights::default(),
            unsup_class_loss: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        self.cost_weights.validate()
    }
}

/// A filtered, category-corrected pseudo-label with its uncertainty map.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub class_id: usize,
    pub mask: BinaryMask,
    pub uncertainty: UncertaintyMap,
}

impl PseudoLabel {
    pub fn new(class_id: usize, mask: BinaryMask, uncertainty: UncertaintyMap) -> Result<Self> {
        if mask.shape() != uncertainty.shape() {
            return Err(Error::ShapeMismatch {
                expected: mask.shape(),
                actual: uncertainty.shape(),
            });
        }
        Ok(Self {
            class_id,
            mask,
            uncertainty,
        })
    }

    /// Ground truth treated as a fully certain pseudo-label.
    pub fn certain(gt: &GroundTruthInstance) -> Self {
        let (h, w) = gt.mask.shape();
        Self {
            class_id: gt.class_id,
            mask: gt.mask.clone(),
            uncertainty: UncertaintyMap::uniform(h, w, 0.0).expect("0 is a valid uncertainty"),
        }
    }
}

/// Cross-entropy `-ln max(p_class, eps)` and its gradient w.r.t. the logits.
fn cross_entropy(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    if class >= logits.len() {
        return Err(Error::invalid(format!(
            "class id {class} out of range for {} classes",
            logits.len()
        )));
    }
    let mut p = softmax_slice(logits);
    let loss = -p[class].max(PROB_EPS).ln();
    if p[class] < PROB_EPS {
        return Ok((loss, vec![0.0; logits.len()]));
    }
    p[class] -= 1.0;
    Ok((loss, p))
}

/// Weighted binary cross-entropy at one pixel and its derivative w.r.t. the logit.
fn bce_pixel(logit: f64, target: bool, weight: f64) -> (f64, f64) {
    let t = sigmoid(logit);
    let tc = t.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let loss = if target { -tc.ln() } else { -(1.0 - tc).ln() };
    let grad = if t == tc { t - f64::from(u8::from(target)) } else { 0.0 };
    (weight * loss, weight * grad)
}

/// `1 - dice(sigmoid(logits), mask)` and its gradient w.r.t. the logits.
fn dice_loss(logits: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let inter: f64 = probs.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| p).sum();
    let psum: f64 = probs.iter().sum();
    let gsum = mask.iter().filter(|&&m| m).count() as f64;
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = psum + gsum + DICE_SMOOTH;
    let grad = probs
        .iter()
        .zip(mask)
        .map(|(&p, &m)| {
            let d_dice = (2.0 * f64::from(u8::from(m)) * den - num) / (den * den);
            -d_dice * p * (1.0 - p)
        })
        .collect();
    (1.0 - num / den, grad)
}

fn check_shape(student: &MaskLogitGrid, mask: &BinaryMask) -> Result<()> {
    if student.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: mask.shape(),
            actual: student.shape(),
        });
    }
    Ok(())
}

fn target_cost(student: &InstancePrediction, class_id: usize, mask: &BinaryMask, weights: &CostWeights) -> Result<f64> {
    check_shape(&student.mask_logits, mask)?;
    let logits = student.mask_logits.values();
    let mut cost = 0.0;
    if weights.class != 0.0 {
        cost += weights.class * cross_entropy(student.class_logits.values(), class_id)?.0;
    }
    if weights.bce != 0.0 {
        let bce: f64 = logits.iter().zip(mask.bits()).map(|(&z, &m)| bce_pixel(z, m, 1.0).0).sum();
        cost += weights.bce * bce / logits.len() as f64;
    }
    if weights.dice != 0.0 {
        cost += weights.dice * dice_loss(logits, mask.bits()).0;
    }
    Ok(cost)
}

/// Weighted sum of class NLL, mean per-pixel BCE and dice loss.
pub fn match_cost(student: &InstancePrediction, pseudo: &PseudoLabel, weights: &CostWeights) -> Result<f64> {
    target_cost(student, pseudo.class_id, &pseudo.mask, weights)
}

/// Hungarian assignment of student predictions (rows) to targets (columns).
pub fn match_predictions(
    students: &[InstancePrediction],
    targets: &[PseudoLabel],
    weights: &CostWeights,
) -> Result<MatchResult> {
    let mut data = Vec::with_capacity(students.len() * targets.len());
    for s in students {
        for t in targets {
            data.push(match_cost(s, t, weights)?);
        }
    }
    Ok(hungarian(&CostMatrix::new(students.len(), targets.len(), data)?))
}

/// Per-term loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub class: f64,
    pub mask: f64,
    pub dice: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.class + self.mask + self.dice
    }

    pub fn is_finite(&self) -> bool {
        self.class.is_finite() && self.mask.is_finite() && self.dice.is_finite()
    }
}

/// Gradients of a loss w.r.t. each student's class logits and mask logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradients {
    pub class: Vec<Vec<f64>>,
    pub mask: Vec<Vec<f64>>,
}

impl LogitGradients {
    fn zeros(students: &[InstancePrediction]) -> Self {
        Self {
            class: students.iter().map(|s| vec![0.0; s.num_classes()]).collect(),
            mask: students.iter().map(|s| vec![0.0; s.mask_logits.len()]).collect(),
        }
    }
}

/// How the per-pixel mask term is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MaskNorm {
    /// Mean over matched instances and pixels.
    Matched,
    /// Divide by `Q * HW` with `Q` the number of student predictions.
    AllQueries,
}

struct TermSwitches {
    class: bool,
    dice: bool,
    pixel_weights: bool,
    mask_norm: MaskNorm,
}

fn matched_losses(
    students: &[InstancePrediction],
    targets: &[PseudoLabel],
    matching: &MatchResult,
    switches: &TermSwitches,
) -> Result<(LossTerms, LogitGradients)> {
    let mut terms = LossTerms::default();
    let mut grads = LogitGradients::zeros(students);
    let matched = matching.len();
    if matched == 0 {
        return Ok((terms, grads));
    }
    for &(k, j) in &matching.pairs {
        let student = students
            .get(k)
            .ok_or_else(|| Error::invalid(format!("matched student {k} out of range")))?;
        let target = targets
            .get(j)
            .ok_or_else(|| Error::invalid(format!("matched target {j} out of range")))?;
        check_shape(&student.mask_logits, &target.mask)?;
        let hw = student.mask_logits.len() as f64;
        let mask_norm = match switches.mask_norm {
            MaskNorm::Matched => matched as f64 * hw,
            MaskNorm::AllQueries => students.len() as f64 * hw,
        };

        if switches.class {
            let (l, g) = cross_entropy(student.class_logits.values(), target.class_id)?;
            terms.class += l / matched as f64;
            for (acc, gi) in grads.class[k].iter_mut().zip(g) {
                *acc += gi / matched as f64;
            }
        }

        let logits = student.mask_logits.values();
        for (i, (&z, &m)) in logits.iter().zip(target.mask.bits()).enumerate() {
            let w = if switches.pixel_weights {
                1.0 - target.uncertainty.values()[i]
            } else {
                1.0
            };
            let (l, g) = bce_pixel(z, m, w);
            terms.mask += l / mask_norm;
            grads.mask[k][i] += g / mask_norm;
        }

        if switches.dice {
            let (l, g) = dice_loss(logits, target.mask.bits());
            terms.dice += l / matched as f64;
            for (acc, gi) in grads.mask[k].iter_mut().zip(g) {
                *acc += gi / matched as f64;
            }
        }
    }
    Ok((terms, grads))
}

/// Supervised loss against ground truth under a given matching: mean
/// cross-entropy plus mean per-pixel BCE (plus dice when enabled).
pub fn supervised_terms(
    students: &[InstancePrediction],
    targets: &[PseudoLabel],
    matching: &MatchResult,
    config: &LossConfig,
) -> Result<(LossTerms, LogitGradients)> {
    matched_losses(
        students,
        targets,
        matching,
        &TermSwitches {
            class: true,
            dice: config.dice_enabled,
            pixel_weights: false,
            mask_norm: MaskNorm::Matched,
        },
    )
}

/// Unsupervised loss against pseudo-labels under a given matching. The mask
/// term is the uncertainty-weighted BCE normalized by `Q * HW`; dice, when
/// enabled, is unweighted.
pub fn unsupervised_terms(
    students: &[InstancePrediction],
    pseudo: &[PseudoLabel],
    matching: &MatchResult,
    config: &LossConfig,
) -> Result<(LossTerms, LogitGradients)> {
    matched_losses(
        students,
        pseudo,
        matching,
        &TermSwitches {
            class: config.unsup_class_loss,
            dice: config.dice_enabled,
            pixel_weights: true,
            mask_norm: MaskNorm::AllQueries,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: LossTerms,
    pub matching: MatchResult,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.terms.total()
    }
}

/// Matches student predictions to ground truth and evaluates the supervised
/// loss. Empty ground truth yields zero for every term.
pub fn supervised_loss(
    students: &[InstancePrediction],
    ground_truth: &[GroundTruthInstance],
    config: &LossConfig,
) -> Result<LossReport> {
    let targets: Vec<PseudoLabel> = ground_truth.iter().map(PseudoLabel::certain).collect();
    let matching = match_predictions(students, &targets, &config.cost_weights)?;
    let (terms, _) = supervised_terms(students, &targets, &matching, config)?;
    Ok(LossReport { terms, matching })
}

/// Matches student predictions to pseudo-labels and evaluates the unsupervised loss.
pub fn unsupervised_loss(students: &[InstancePrediction], pseudo: &[PseudoLabel], config: &LossConfig) -> Result<LossReport> {
    let matching = match_predictions(students, pseudo, &config.cost_weights)?;
    let (terms, _) = unsupervised_terms(students, pseudo, &matching, config)?;
    Ok(LossReport { terms, matching })
}

/// Uncertainty-weighted mask BCE over matched pairs, normalized by `Q * HW`
/// where `Q = student_masks.len()`. Unmatched students contribute nothing.
pub fn pmua_mask_loss(student_masks: &[MaskLogitGrid], pseudo: &[PseudoLabel], matching: &MatchResult) -> Result<f64> {
    Ok(pmua_with_logit_grad(student_masks, pseudo, matching)?.0)
}

/// The PMUA loss and its gradient w.r.t. every student mask logit.
pub fn pmua_with_logit_grad(
    student_masks: &[MaskLogitGrid],
    pseudo: &[PseudoLabel],
    matching: &MatchResult,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let q = student_masks.len();
    let mut grads: Vec<Vec<f64>> = student_masks.iter().map(|m| vec![0.0; m.len()]).collect();
    let mut loss = 0.0;
    for &(k, j) in &matching.pairs {
        let student = student_masks
            .get(k)
            .ok_or_else(|| Error::invalid(format!("matched student {k} out of range")))?;
        let target = pseudo
            .get(j)
            .ok_or_else(|| Error::invalid(format!("matched pseudo-label {j} out of range")))?;
        check_shape(student, &target.mask)?;
        let norm = (q * student.len()) as f64;
        for (i, ((&z, &m), &u)) in student
            .values()
            .iter()
            .zip(target.mask.bits())
            .zip(target.uncertainty.values())
            .enumerate()
        {
            let (l, g) = bce_pixel(z, m, 1.0 - u);
            loss += l / norm;
            grads[k][i] += g / norm;
        }
    }
    Ok((loss, grads))
}

/// `L_sup + lambda * L_unsup`.
pub fn total_loss(supervised: f64, unsupervised: f64, lambda: f64) -> f64 {
    supervised + lambda * unsupervised
}

/// Row-major grid of per-pixel feature vectors of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PixelFeatures {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * dim {
            return Err(Error::LengthMismatch {
                expected: height * width * dim,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pixel features must be finite"));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Per-pixel logit `theta . x`; the foreground probability is its sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPixelModel {
    pub theta: Vec<f64>,
}

impl LinearPixelModel {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(Self { theta })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.theta.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn predict(&self, features: &PixelFeatures) -> Result<MaskLogitGrid> {
        if features.dim != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                actual: features.dim,
            });
        }
        let values = (0..features.num_pixels()).map(|i| self.logit(features.pixel(i))).collect();
        MaskLogitGrid::new(features.height, features.width, values)
    }

    /// Chains per-pixel logit gradients back to `theta`.
    pub fn backprop(&self, features: &PixelFeatures, logit_grad: &[f64], out: &mut [f64]) {
        for (i, &g) in logit_grad.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(features.pixel(i)) {
                *o += g * x;
            }
        }
    }
}

/// PMUA loss of a linear model whose `k`-th student mask is `sigmoid(theta . features[k])`.
pub fn pmua_model_loss(
    model: &LinearPixelModel,
    features: &[PixelFeatures],
    pseudo: &[PseudoLabel],
    matching: &MatchResult,
) -> Result<f64> {
    let masks = features.iter().map(|f| model.predict(f)).collect::<Result<Vec<_>>>()?;
    pmua_mask_loss(&masks, pseudo, matching)
}

/// Analytic gradient of [`pmua_model_loss`] w.r.t. `theta`. Each pixel's
/// contribution is `(1 - u) (t - M) x / (Q HW)`, zero where `t` is clamped.
pub fn pmua_gradient(
    model: &LinearPixelModel,
    features: &[PixelFeatures],
    pseudo: &[PseudoLabel],
    matching: &MatchResult,
) -> Result<Vec<f64>> {
    let masks = features.iter().map(|f| model.predict(f)).collect::<Result<Vec<_>>>()?;
    let (_, logit_grads) = pmua_with_logit_grad(&masks, pseudo, matching)?;
    let mut grad = vec![0.0; model.dim()];
    for (f, g) in features.iter().zip(&logit_grads) {
        model.backprop(f, g, &mut grad);
    }
    Ok(grad)
}

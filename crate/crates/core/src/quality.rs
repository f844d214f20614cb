//! Per-instance quality scores and the per-pixel uncertainty map.

use serde::{Deserialize, Serialize};

use crate::instance::{sigmoid, softmax, ClassLogits, InstancePrediction, MaskLogitGrid};

/// Class quality, mask quality and their product for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub class_quality: f64,
    pub mask_quality: f64,
    pub coupled_score: f64,
}

impl QualityScores {
    pub fn new(class_quality: f64, mask_quality: f64) -> Self {
        Self {
            class_quality,
            mask_quality,
            coupled_score: coupled_score(class_quality, mask_quality),
        }
    }

    pub fn of(prediction: &InstancePrediction) -> Self {
        Self::new(
            class_quality(&prediction.class_logits),
            mask_quality(&prediction.mask_logits),
        )
    }
}

/// Maximum softmax probability.
pub fn class_quality(logits: &ClassLogits) -> f64 {
    softmax(logits).into_iter().fold(0.0, f64::max)
}

/// Mean foreground probability over pixels with `sigmoid(q) > 0.5`.
///
/// Returns 0 when no pixel is foreground, so an instance without a single
/// confident pixel can never pass a mask threshold.
pub fn mask_quality(mask_logits: &MaskLogitGrid) -> f64 {
    let (sum, count) = mask_logits
        .values()
        .iter()
        .map(|&q| sigmoid(q))
        .filter(|&p| p > 0.5)
        .fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn coupled_score(class_quality: f64, mask_quality: f64) -> f64 {
    class_quality * mask_quality
}

/// Per-pixel uncertainty `1 - 2 |sigmoid(q) - 0.5|`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl UncertaintyMap {
    /// Validates that every entry lies in `[0, 1]`.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> crate::Result<Self> {
        if values.len() != height * width {
            return Err(crate::Error::LengthMismatch {
                expected: height * width,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(crate::Error::invalid("uncertainty values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// A map with the same value everywhere.
    pub fn uniform(height: usize, width: usize, value: f64) -> crate::Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn uncertainty_map(mask_logits: &MaskLogitGrid) -> UncertaintyMap {
    UncertaintyMap {
        height: mask_logits.height(),
        width: mask_logits.width(),
        values: mask_logits
            .values()
            .iter()
            .map(|&q| 1.0 - 2.0 * (sigmoid(q) - 0.5).abs())
            .collect(),
    }
}

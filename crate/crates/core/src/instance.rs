//! Prediction, mask and ground-truth types shared by every other module,
//! plus the elementary math (sigmoid, softmax, IoU) and the RLE mask codec.
//!
//! Rasters are stored row-major: pixel `(row, col)` lives at `row * width + col`.
//! Run-length counts are column-major to stay compatible with COCO tooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over a raw slice, using max-logit subtraction.
pub fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-class logits for one predicted instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassLogits(Vec<f64>);

impl ClassLogits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("class logits must have at least one entry"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("class logits must be finite"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ClassLogits {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ClassLogits> for Vec<f64> {
    fn from(l: ClassLogits) -> Self {
        l.0
    }
}

/// Softmax of an instance's class logits.
pub fn softmax(logits: &ClassLogits) -> Vec<f64> {
    softmax_slice(logits.values())
}

/// Row-major grid of per-pixel mask logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogitGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl MaskLogitGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask grid dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mask logits must be finite"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn negated(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }
}

/// One predicted instance: class logits plus a mask logit grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub class_logits: ClassLogits,
    pub mask_logits: MaskLogitGrid,
}

impl InstancePrediction {
    pub fn new(class_logits: ClassLogits, mask_logits: MaskLogitGrid) -> Self {
        Self {
            class_logits,
            mask_logits,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.num_classes()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask_logits.shape()
    }
}

/// Checks that all instances of one image share the same raster shape.
pub fn check_common_shape(predictions: &[InstancePrediction]) -> Result<Option<(usize, usize)>> {
    let Some(first) = predictions.first() else {
        return Ok(None);
    };
    let shape = first.shape();
    for p in &predictions[1..] {
        if p.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: p.shape(),
            });
        }
    }
    Ok(Some(shape))
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Builds a mask with the given `(row, col)` pixels set.
    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Result<Self> {
        let mut mask = Self::empty(height, width);
        for &(r, c) in pixels {
            if r >= height || c >= width {
                return Err(Error::invalid(format!(
                    "pixel ({r}, {c}) outside {height}x{width} mask"
                )));
            }
            mask.bits[r * width + c] = true;
        }
        Ok(mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box as `(row_min, col_min, row_max, col_max)`, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bbox = Some(match bbox {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bbox
    }
}

/// Intersection-over-union of two masks; 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground iff `sigmoid(q) > threshold`, strictly.
pub fn binarize(mask_logits: &MaskLogitGrid, threshold: f64) -> BinaryMask {
    BinaryMask {
        height: mask_logits.height,
        width: mask_logits.width,
        bits: mask_logits
            .values
            .iter()
            .map(|&q| sigmoid(q) > threshold)
            .collect(),
    }
}

/// Ground-truth annotation for one object.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub class_id: usize,
    pub mask: BinaryMask,
}

impl GroundTruthInstance {
    pub fn new(class_id: usize, mask: BinaryMask, num_classes: usize) -> Result<Self> {
        if class_id >= num_classes {
            return Err(Error::invalid(format!(
                "class id {class_id} out of range for {num_classes} classes"
            )));
        }
        if mask.is_empty() {
            return Err(Error::invalid("ground-truth mask must have a foreground pixel"));
        }
        Ok(Self { class_id, mask })
    }
}

/// Alternating background/foreground run lengths in column-major order.
/// The first run is background and may be zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunLengthCounts(pub Vec<u32>);

pub fn rle_encode(mask: &BinaryMask) -> RunLengthCounts {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for col in 0..mask.width {
        for row in 0..mask.height {
            let v = mask.get(row, col);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RunLengthCounts(counts)
}

pub fn rle_decode(counts: &RunLengthCounts, height: usize, width: usize) -> Result<BinaryMask> {
    let sum: u64 = counts.0.iter().map(|&c| c as u64).sum();
    let expected = (height * width) as u64;
    if sum != expected {
        return Err(Error::RleCountMismatch { sum, expected });
    }
    let mut mask = BinaryMask::empty(height, width);
    let mut idx = 0usize;
    let mut value = false;
    for &run in &counts.0 {
        if value {
            for k in idx..idx + run as usize {
                let (col, row) = (k / height, k % height);
                mask.set(row, col, true);
            }
        }
        idx += run as usize;
        value = !value;
    }
    Ok(mask)
}

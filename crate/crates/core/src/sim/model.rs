//! The toy instance segmenter used by the trainer: a linear per-pixel mask
//! head plus a linear class head over box-pooled features.
//!
//! Instances come from box proposals. For proposal `k` the mask head sees
//! each pixel's scene features followed by an "outside the box" indicator and
//! the squared normalized distance to the box centre, so
//! `t_k^i = sigmoid(theta . [x_i, outside_k(i), r_k(i)^2])`. The class head
//! maps the mean scene feature inside the box to `N` logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{ClassLogits, InstancePrediction, MaskLogitGrid};
use crate::loss::{LinearPixelModel, LogitGradients, PixelFeatures};
use crate::sim::noise::NoiseChannel;
use crate::sim::scene::{PixelBox, SyntheticScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Pixels added around the tight ground-truth box.
    pub margin: usize,
    /// Maximum random shift of each box edge.
    pub jitter: usize,
    /// Background proposals added to unlabeled scenes.
    pub spurious: usize,
    pub spurious_min_size: usize,
    pub spurious_max_size: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            margin: 2,
            jitter: 2,
            spurious: 2,
            spurious_min_size: 5,
            spurious_max_size: 12,
        }
    }
}

/// A box proposal; `source` is the ground-truth instance it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: PixelBox,
    pub source: Option<usize>,
}

fn jittered(v: usize, jitter: usize, lo: usize, hi: usize, rng: &mut ChaCha8Rng) -> usize {
    let shift = rng.random_range(0..=2 * jitter) as i64 - jitter as i64;
    (v as i64 + shift).clamp(lo as i64, hi as i64) as usize
}

/// Jittered ground-truth boxes, optionally followed by random background boxes.
pub fn make_proposals(scene: &SyntheticScene, config: &ProposalConfig, spurious: bool, rng: &mut ChaCha8Rng) -> Vec<Proposal> {
    let (h, w) = (scene.height, scene.width);
    let mut out = Vec::new();
    for k in 0..scene.instances.len() {
        let b = scene.instance_box(k);
        let r0 = jittered(b.row_min.saturating_sub(config.margin), config.jitter, 0, b.row_min, rng);
        let c0 = jittered(b.col_min.saturating_sub(config.margin), config.jitter, 0, b.col_min, rng);
        let r1 = jittered((b.row_max + config.margin).min(h - 1), config.jitter, b.row_max, h - 1, rng);
        let c1 = jittered((b.col_max + config.margin).min(w - 1), config.jitter, b.col_max, w - 1, rng);
        out.push(Proposal {
            bbox: PixelBox {
                row_min: r0,
                col_min: c0,
                row_max: r1,
                col_max: c1,
            },
            source: Some(k),
        });
    }
    if spurious {
        let max = config.spurious_max_size.min(h).min(w).max(1);
        let min = config.spurious_min_size.clamp(1, max);
        for _ in 0..config.spurious {
            let bh = rng.random_range(min..=max);
            let bw = rng.random_range(min..=max);
            let r0 = rng.random_range(0..=h - bh);
            let c0 = rng.random_range(0..=w - bw);
            out.push(Proposal {
                bbox: PixelBox {
                    row_min: r0,
                    col_min: c0,
                    row_max: r0 + bh - 1,
                    col_max: c0 + bw - 1,
                },
                source: None,
            });
        }
    }
    out
}

/// Scene features with the channel's Gaussian noise added to every
/// non-bias channel.
pub fn noisy_view(scene: &SyntheticScene, channel: &NoiseChannel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = scene.feature_dim;
    let mut v = scene.features.clone();
    if channel.noise_std > 0.0 {
        for (i, x) in v.iter_mut().enumerate() {
            if i % dim != 0 {
                *x += channel.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    v
}

/// Drops each proposal with the channel's dropout probability.
pub fn drop_proposals(proposals: &[Proposal], channel: &NoiseChannel, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..proposals.len())
        .filter(|_| channel.dropout == 0.0 || rng.random::<f64>() >= channel.dropout)
        .collect()
}

/// Per-pixel features a proposal adds to the scene features.
pub const BOX_FEATURES: usize = 2;

/// Cached forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub predictions: Vec<InstancePrediction>,
    pub mask_features: Vec<PixelFeatures>,
    pub pooled: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub num_classes: usize,
    pub mask: LinearPixelModel,
    /// Row-major `N x (N + 1)`.
    pub class_head: Vec<f64>,
}

impl ToyModel {
    /// Small seeded Gaussian initialization.
    pub fn init(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect() };
        let mask = LinearPixelModel {
            theta: draw(num_classes + 1 + BOX_FEATURES),
        };
        let class_head = draw(num_classes * (num_classes + 1));
        Self {
            num_classes,
            mask,
            class_head,
        }
    }

    pub fn scene_dim(&self) -> usize {
        self.num_classes + 1
    }

    pub fn num_params(&self) -> usize {
        self.mask.dim() + self.class_head.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.mask.theta.clone();
        p.extend_from_slice(&self.class_head);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        let split = self.mask.dim();
        self.mask.theta.copy_from_slice(&params[..split]);
        self.class_head.copy_from_slice(&params[split..]);
        Ok(())
    }

    pub fn forward(&self, scene: &SyntheticScene, view: &[f64], proposals: &[Proposal]) -> Result<Forward> {
        let (h, w) = (scene.height, scene.width);
        let sd = self.scene_dim();
        if scene.feature_dim != sd || view.len() != h * w * sd {
            return Err(Error::LengthMismatch {
                expected: h * w * sd,
                actual: view.len(),
            });
        }
        let mut out = Forward {
            predictions: Vec::with_capacity(proposals.len()),
            mask_features: Vec::with_capacity(proposals.len()),
            pooled: Vec::with_capacity(proposals.len()),
        };
        for p in proposals {
            let b = &p.bbox;
            let centre = ((b.row_min + b.row_max) as f64 / 2.0, (b.col_min + b.col_max) as f64 / 2.0);
            let half = (
                (b.row_max - b.row_min + 1) as f64 / 2.0,
                (b.col_max - b.col_min + 1) as f64 / 2.0,
            );
            let mut feats = Vec::with_capacity(h * w * (sd + BOX_FEATURES));
            let mut pooled = vec![0.0; sd];
            for r in 0..h {
                for c in 0..w {
                    let x = &view[(r * w + c) * sd..(r * w + c + 1) * sd];
                    feats.extend_from_slice(x);
                    let inside = b.contains(r, c);
                    feats.push(if inside { 0.0 } else { 1.0 });
                    let dr = (r as f64 - centre.0) / half.0;
                    let dc = (c as f64 - centre.1) / half.1;
                    feats.push(if inside { dr * dr + dc * dc } else { 0.0 });
                    if inside {
                        for (acc, v) in pooled.iter_mut().zip(x) {
                            *acc += v;
                        }
                    }
                }
            }
            let area = p.bbox.area() as f64;
            pooled.iter_mut().for_each(|v| *v /= area);
            let mask_features = PixelFeatures::new(h, w, sd + BOX_FEATURES, feats)?;
            let mask_logits = self.mask.predict(&mask_features)?;
            let class_logits = (0..self.num_classes)
                .map(|c| {
                    self.class_head[c * sd..(c + 1) * sd]
                        .iter()
                        .zip(&pooled)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            out.predictions.push(InstancePrediction::new(
                ClassLogits::new(class_logits)?,
                MaskLogitGrid::new(h, w, mask_logits.values().to_vec())?,
            ));
            out.mask_features.push(mask_features);
            out.pooled.push(pooled);
        }
        Ok(out)
    }

    /// Accumulates `scale * dL/dparams` into `out` given logit gradients.
    pub fn backward(&self, forward: &Forward, grads: &LogitGradients, scale: f64, out: &mut [f64]) {
        let split = self.mask.dim();
        let sd = self.scene_dim();
        let (mask_out, class_out) = out.split_at_mut(split);
        let mut mask_acc = vec![0.0; split];
        for (f, g) in forward.mask_features.iter().zip(&grads.mask) {
            self.mask.backprop(f, g, &mut mask_acc);
        }
        for (o, g) in mask_out.iter_mut().zip(mask_acc) {
            *o += scale * g;
        }
        for (pooled, g) in forward.pooled.iter().zip(&grads.class) {
            for (c, gc) in g.iter().enumerate() {
                for (d, x) in pooled.iter().enumerate() {
                    class_out[c * sd + d] += scale * gc * x;
                }
            }
        }
    }
}

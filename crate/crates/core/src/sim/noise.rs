//! Weak/strong noise channels. They stand in for image augmentations: the
//! trainer adds their noise to pixel features, and [`corrupt_predictions`]
//! applies them directly to ideal predictions for score-vs-IoU studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{ClassLogits, InstancePrediction, MaskLogitGrid};
use crate::sim::scene::SyntheticScene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseChannel {
    pub kind: ChannelKind,
    /// Gaussian standard deviation added to logits (or to features in training views).
    pub noise_std: f64,
    /// Probability that a predicted class is replaced by a random other class.
    pub class_confusion: f64,
    /// Probability that an instance is dropped.
    pub dropout: f64,
}

impl NoiseChannel {
    pub fn clean(kind: ChannelKind) -> Self {
        Self {
            kind,
            noise_std: 0.0,
            class_confusion: 0.0,
            dropout: 0.0,
        }
    }

    pub fn default_weak() -> Self {
        Self {
            kind: ChannelKind::Weak,
            noise_std: 0.1,
            class_confusion: 0.0,
            dropout: 0.0,
        }
    }

    pub fn default_strong() -> Self {
        Self {
            kind: ChannelKind::Strong,
            noise_std: 0.3,
            class_confusion: 0.0,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std must be finite and non-negative"));
        }
        for (name, v) in [("class_confusion", self.class_confusion), ("dropout", self.dropout)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// The strong channel must dominate the weak one parameter-wise.
    pub fn validate_pair(weak: &NoiseChannel, strong: &NoiseChannel) -> Result<()> {
        weak.validate()?;
        strong.validate()?;
        if weak.kind != ChannelKind::Weak || strong.kind != ChannelKind::Strong {
            return Err(Error::invalid("expected one weak and one strong channel"));
        }
        if strong.noise_std < weak.noise_std || strong.class_confusion < weak.class_confusion || strong.dropout < weak.dropout {
            return Err(Error::invalid("strong channel parameters must be >= weak ones"));
        }
        Ok(())
    }
}

/// Mask logit magnitude of a noise-free prediction.
pub const CLEAN_MASK_LOGIT: f64 = 4.0;
/// Class logit of the predicted class in a noise-free prediction.
pub const CLEAN_CLASS_LOGIT: f64 = 8.0;

/// Noisy predictions derived from a scene's ground truth, one per surviving
/// instance. Each instance gets its own noise severity in `[0.5, 1.5] x noise_std`
/// so that quality scores spread out.
pub fn corrupt_predictions(scene: &SyntheticScene, channel: &NoiseChannel, seed: u64) -> Result<Vec<InstancePrediction>> {
    channel.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.seed.rotate_left(29));
    let num_classes = scene.num_classes();
    let mut out = Vec::with_capacity(scene.instances.len());
    for gt in &scene.instances {
        if rng.random::<f64>() < channel.dropout {
            continue;
        }
        let severity = channel.noise_std * (0.5 + rng.random::<f64>());
        let mut class = gt.class_id;
        if num_classes > 1 && rng.random::<f64>() < channel.class_confusion {
            class = (class + rng.random_range(1..num_classes)) % num_classes;
        }
        let class_logits = (0..num_classes)
            .map(|c| {
                let base = if c == class { CLEAN_CLASS_LOGIT } else { 0.0 };
                base + severity * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let mask_logits = gt
            .mask
            .bits()
            .iter()
            .map(|&b| {
                let base = if b { CLEAN_MASK_LOGIT } else { -CLEAN_MASK_LOGIT };
                base + severity * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        out.push(InstancePrediction::new(
            ClassLogits::new(class_logits)?,
            MaskLogitGrid::new(scene.height, scene.width, mask_logits)?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::binarize;
    use crate::sim::scene::{generate_scene, SceneConfig};

    #[test]
    fn zero_noise_reproduces_ground_truth() {
        let scene = generate_scene(3, &SceneConfig::default()).unwrap();
        let preds = corrupt_predictions(&scene, &NoiseChannel::clean(ChannelKind::Weak), 1).unwrap();
        assert_eq!(preds.len(), scene.instances.len());
        for (p, gt) in preds.iter().zip(&scene.instances) {
            assert_eq!(binarize(&p.mask_logits, 0.5), gt.mask);
            assert_eq!(p.class_logits.argmax(), gt.class_id);
        }
    }

    #[test]
    fn full_confusion_flips_two_classes() {
        let cfg = SceneConfig {
            num_classes: 2,
            class_skew: vec![0.5, 0.5],
            ..SceneConfig::default()
        };
        let scene = generate_scene(8, &cfg).unwrap();
        let channel = NoiseChannel {
            class_confusion: 1.0,
            ..NoiseChannel::clean(ChannelKind::Strong)
        };
        let preds = corrupt_predictions(&scene, &channel, 2).unwrap();
        for (p, gt) in preds.iter().zip(&scene.instances) {
            assert_eq!(p.class_logits.argmax(), 1 - gt.class_id);
        }
    }

    #[test]
    fn dropout_removes_everything_at_one() {
        let scene = generate_scene(4, &SceneConfig::default()).unwrap();
        let channel = NoiseChannel {
            dropout: 1.0,
            ..NoiseChannel::clean(ChannelKind::Strong)
        };
        assert!(corrupt_predictions(&scene, &channel, 0).unwrap().is_empty());
    }

    #[test]
    fn channel_ordering() {
        assert!(NoiseChannel::validate_pair(&NoiseChannel::default_weak(), &NoiseChannel::default_strong()).is_ok());
        let weak = NoiseChannel {
            noise_std: 1.0,
            ..NoiseChannel::default_weak()
        };
        assert!(NoiseChannel::validate_pair(&weak, &NoiseChannel::default_strong()).is_err());
        let bad = NoiseChannel {
            dropout: 1.5,
            ..NoiseChannel::default_strong()
        };
        assert!(bad.validate().is_err());
    }
}

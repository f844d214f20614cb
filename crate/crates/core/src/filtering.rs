//! Pseudo-label selection: a single threshold on the coupled score, or
//! independent thresholds on class and mask quality (decoupled dual-threshold
//! filtering).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::InstancePrediction;
use crate::quality::QualityScores;

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.9;
pub const DEFAULT_CLASS_THRESHOLD: f64 = 0.85;
/// `0.9 * 0.85`, the coupled threshold equivalent to the decoupled defaults.
pub const DEFAULT_COUPLED_THRESHOLD: f64 = 0.765;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    Coupled,
    Decoupled,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(FilterMode::Coupled),
            "decoupled" | "ddtf" => Ok(FilterMode::Decoupled),
            other => Err(Error::invalid(format!("unknown filter mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterMode::Coupled => "coupled",
            FilterMode::Decoupled => "decoupled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub mask_threshold: f64,
    pub class_threshold: f64,
    pub coupled_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::Decoupled,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            class_threshold: DEFAULT_CLASS_THRESHOLD,
            coupled_threshold: DEFAULT_COUPLED_THRESHOLD,
        }
    }
}

impl FilterConfig {
    pub fn decoupled(mask_threshold: f64, class_threshold: f64) -> Self {
        Self {
            mode: FilterMode::Decoupled,
            mask_threshold,
            class_threshold,
            ..Self::default()
        }
    }

    pub fn coupled(coupled_threshold: f64) -> Self {
        Self {
            mode: FilterMode::Coupled,
            coupled_threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mask_threshold", self.mask_threshold),
            ("class_threshold", self.class_threshold),
            ("coupled_threshold", self.coupled_threshold),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    ClassBelow,
    MaskBelow,
    ScoreBelow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptInstance {
    pub index: usize,
    pub scores: QualityScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedInstance {
    pub index: usize,
    pub scores: QualityScores,
    pub reason: RejectReason,
}

/// Outcome of filtering one batch; kept and rejected indices partition the input.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilteredSet {
    pub kept: Vec<KeptInstance>,
    pub rejected: Vec<RejectedInstance>,
}

impl FilteredSet {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.kept.iter().map(|k| k.index).collect()
    }
}

fn ddtf_verdict(s: &QualityScores, mask_t: f64, class_t: f64) -> Option<RejectReason> {
    if s.class_quality < class_t {
        Some(RejectReason::ClassBelow)
    } else if s.mask_quality < mask_t {
        Some(RejectReason::MaskBelow)
    } else {
        None
    }
}

fn coupled_verdict(s: &QualityScores, score_t: f64) -> Option<RejectReason> {
    (s.coupled_score < score_t).then_some(RejectReason::ScoreBelow)
}

fn partition(
    scores: impl IntoIterator<Item = QualityScores>,
    verdict: impl Fn(&QualityScores) -> Option<RejectReason>,
) -> FilteredSet {
    let mut out = FilteredSet::default();
    for (index, scores) in scores.into_iter().enumerate() {
        match verdict(&scores) {
            None => out.kept.push(KeptInstance { index, scores }),
            Some(reason) => out.rejected.push(RejectedInstance {
                index,
                scores,
                reason,
            }),
        }
    }
    out
}

/// Filters precomputed scores with whichever rule `config.mode` selects.
pub fn filter_scores(scores: &[QualityScores], config: &FilterConfig) -> FilteredSet {
    let scores = scores.iter().copied();
    match config.mode {
        FilterMode::Decoupled => partition(scores, |s| {
            ddtf_verdict(s, config.mask_threshold, config.class_threshold)
        }),
        FilterMode::Coupled => partition(scores, |s| coupled_verdict(s, config.coupled_threshold)),
    }
}

/// Decoupled dual-threshold filtering: keep iff `c >= c_t` and `m >= m_t`.
/// Class is checked first, so it wins the rejection reason when both fail.
pub fn filter_ddtf(predictions: &[InstancePrediction], config: &FilterConfig) -> Result<FilteredSet> {
    if config.mode != FilterMode::Decoupled {
        return Err(Error::invalid("filter_ddtf requires decoupled mode"));
    }
    Ok(filter_predictions(predictions, config))
}

/// Coupled single-threshold baseline: keep iff `c * m >= s_t`.
pub fn filter_coupled(predictions: &[InstancePrediction], config: &FilterConfig) -> Result<FilteredSet> {
    if config.mode != FilterMode::Coupled {
        return Err(Error::invalid("filter_coupled requires coupled mode"));
    }
    Ok(filter_predictions(predictions, config))
}

pub fn filter_predictions(predictions: &[InstancePrediction], config: &FilterConfig) -> FilteredSet {
    let scores: Vec<QualityScores> = predictions.iter().map(QualityScores::of).collect();
    filter_scores(&scores, config)
}

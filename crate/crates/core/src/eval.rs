//! Evaluation analytics: error taxonomy, confusion matrix, score-vs-IoU
//! table and a simplified average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{binarize, mask_iou, BinaryMask, GroundTruthInstance, InstancePrediction};
use crate::quality::QualityScores;

/// The five error types a predicted instance can fall into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorCategory {
    /// Overlaps a ground-truth instance of its class.
    Cor,
    /// Overlaps well, but only with instances of other classes and not enough
    /// with its own.
    Loc,
    /// Overlaps an instance of a different class in the same superclass.
    Sim,
    /// Overlaps an instance of a different superclass.
    Oth,
    /// Touches no ground truth at all.
    BG,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 5] = [
        ErrorCategory::Cor,
        ErrorCategory::Loc,
        ErrorCategory::Sim,
        ErrorCategory::Oth,
        ErrorCategory::BG,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ErrorCategory::Cor => "Cor",
            ErrorCategory::Loc => "Loc",
            ErrorCategory::Sim => "Sim",
            ErrorCategory::Oth => "Oth",
            ErrorCategory::BG => "BG",
        }
    }

    fn slot(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap_or(0)
    }
}

impl std::fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Class id to superclass id, total over `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    superclass: Vec<usize>,
}

impl Taxonomy {
    pub fn new(superclass: Vec<usize>, num_classes: usize) -> Result<Self> {
        if superclass.len() != num_classes {
            return Err(Error::invalid(format!(
                "taxonomy covers {} classes, expected {num_classes}",
                superclass.len()
            )));
        }
        Ok(Self { superclass })
    }

    /// Every class in its own superclass.
    pub fn flat(num_classes: usize) -> Self {
        Self {
            superclass: (0..num_classes).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.superclass.len()
    }

    pub fn superclass(&self, class_id: usize) -> Result<usize> {
        self.superclass
            .get(class_id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("taxonomy has no entry for class {class_id}")))
    }

    pub fn mapping(&self) -> &[usize] {
        &self.superclass
    }
}

/// A predicted instance reduced to what the analytics need.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub class_id: usize,
    pub mask: BinaryMask,
    pub score: f64,
}

impl ScoredMask {
    /// Argmax class, mask binarized at 0.5 and coupled score `c * m`.
    pub fn from_prediction(prediction: &InstancePrediction) -> Self {
        Self {
            class_id: prediction.class_logits.argmax(),
            mask: binarize(&prediction.mask_logits, 0.5),
            score: QualityScores::of(prediction).coupled_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub categories: Vec<ErrorCategory>,
    /// Counts in [`ErrorCategory::ALL`] order.
    pub histogram: [usize; 5],
}

impl ErrorReport {
    pub fn count(&self, category: ErrorCategory) -> usize {
        self.histogram[category.slot()]
    }
}

/// Assigns each prediction one error category. With several qualifying
/// overlaps the precedence is Cor > Sim > Oth > Loc > BG. A prediction that
/// overlaps ground truth only weakly, or only weakly with other classes, is a
/// localization error.
pub fn categorize_errors(
    predictions: &[ScoredMask],
    ground_truth: &[GroundTruthInstance],
    taxonomy: &Taxonomy,
    iou_threshold: f64,
) -> Result<ErrorReport> {
    let mut categories = Vec::with_capacity(predictions.len());
    let mut histogram = [0usize; 5];
    for p in predictions {
        let own_super = taxonomy.superclass(p.class_id)?;
        let (mut cor, mut sim, mut oth, mut touched) = (false, false, false, false);
        for gt in ground_truth {
            let iou = mask_iou(&p.mask, &gt.mask)?;
            if iou > 0.0 {
                touched = true;
            }
            if iou > iou_threshold {
                if gt.class_id == p.class_id {
                    cor = true;
                } else if taxonomy.superclass(gt.class_id)? == own_super {
                    sim = true;
                } else {
                    oth = true;
                }
            }
        }
        let category = if cor {
            ErrorCategory::Cor
        } else if sim {
            ErrorCategory::Sim
        } else if oth {
            ErrorCategory::Oth
        } else if touched {
            ErrorCategory::Loc
        } else {
            ErrorCategory::BG
        };
        histogram[category.slot()] += 1;
        categories.push(category);
    }
    Ok(ErrorReport { categories, histogram })
}

fn iou_table(predictions: &[ScoredMask], ground_truth: &[GroundTruthInstance]) -> Result<Vec<Vec<f64>>> {
    predictions
        .iter()
        .map(|p| ground_truth.iter().map(|g| mask_iou(&p.mask, &g.mask)).collect())
        .collect()
}

/// `(N + 1) x (N + 1)` counts, rows = true class, columns = predicted class,
/// index `N` = background. Pairs with IoU > 0.5 are matched greedily by
/// descending IoU; unmatched ground truth lands in the background column and
/// unmatched predictions in the background row.
pub fn confusion_matrix(
    predictions: &[ScoredMask],
    ground_truth: &[GroundTruthInstance],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    let bg = num_classes;
    let check = |c: usize| {
        if c < num_classes {
            Ok(c)
        } else {
            Err(Error::invalid(format!("class {c} out of range for {num_classes} classes")))
        }
    };
    let ious = iou_table(predictions, ground_truth)?;
    let mut pairs: Vec<(f64, usize, usize)> = ious
        .iter()
        .enumerate()
        .flat_map(|(p, row)| row.iter().enumerate().map(move |(g, &v)| (v, p, g)))
        .filter(|(v, _, _)| *v > 0.5)
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut matrix = vec![vec![0usize; num_classes + 1]; num_classes + 1];
    let mut pred_used = vec![false; predictions.len()];
    let mut gt_used = vec![false; ground_truth.len()];
    for (_, p, g) in pairs {
        if pred_used[p] || gt_used[g] {
            continue;
        }
        pred_used[p] = true;
        gt_used[g] = true;
        matrix[check(ground_truth[g].class_id)?][check(predictions[p].class_id)?] += 1;
    }
    for (g, used) in gt_used.iter().enumerate() {
        if !used {
            matrix[check(ground_truth[g].class_id)?][bg] += 1;
        }
    }
    for (p, used) in pred_used.iter().enumerate() {
        if !used {
            matrix[bg][check(predictions[p].class_id)?] += 1;
        }
    }
    Ok(matrix)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreIouRow {
    pub instance: usize,
    pub class_quality: f64,
    pub mask_quality: f64,
    pub coupled_score: f64,
    pub best_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreIouTable {
    pub rows: Vec<ScoreIouRow>,
    /// Pearson correlations with the best IoU; NaN when undefined.
    pub corr_coupled: f64,
    pub corr_class: f64,
    pub corr_mask: f64,
}

/// Pearson correlation, NaN for fewer than two points or a constant column.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Quality scores and best ground-truth IoU (any class) for every prediction.
pub fn score_iou_table(predictions: &[InstancePrediction], ground_truth: &[GroundTruthInstance]) -> Result<ScoreIouTable> {
    let mut rows = Vec::with_capacity(predictions.len());
    for (instance, p) in predictions.iter().enumerate() {
        let q = QualityScores::of(p);
        let mask = binarize(&p.mask_logits, 0.5);
        let mut best_iou: f64 = 0.0;
        for g in ground_truth {
            best_iou = best_iou.max(mask_iou(&mask, &g.mask)?);
        }
        rows.push(ScoreIouRow {
            instance,
            class_quality: q.class_quality,
            mask_quality: q.mask_quality,
            coupled_score: q.coupled_score,
            best_iou,
        });
    }
    let column = |f: fn(&ScoreIouRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let iou = column(|r| r.best_iou);
    Ok(ScoreIouTable {
        corr_coupled: pearson(&column(|r| r.coupled_score), &iou),
        corr_class: pearson(&column(|r| r.class_quality), &iou),
        corr_mask: pearson(&column(|r| r.mask_quality), &iou),
        rows,
    })
}

/// 101-point interpolated average precision. Predictions are visited by
/// descending score (ties by index) and each claims the unmatched
/// same-class ground truth with the highest IoU, if that IoU reaches the
/// threshold. With no ground truth the result is 1 when there are also no
/// predictions and 0 otherwise.
pub fn simplified_ap(predictions: &[ScoredMask], ground_truth: &[GroundTruthInstance], iou_threshold: f64) -> Result<f64> {
    if ground_truth.is_empty() {
        return Ok(if predictions.is_empty() { 1.0 } else { 0.0 });
    }
    let ious = iou_table(predictions, ground_truth)?;
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].score.total_cmp(&predictions[a].score).then(a.cmp(&b)));

    let mut gt_used = vec![false; ground_truth.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &p) in order.iter().enumerate() {
        let best = ground_truth
            .iter()
            .enumerate()
            .filter(|(g, gt)| !gt_used[*g] && gt.class_id == predictions[p].class_id && ious[p][*g] >= iou_threshold)
            .max_by(|a, b| ious[p][a.0].total_cmp(&ious[p][b.0]).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            gt_used[g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / ground_truth.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let i = recall.partition_point(|&v| v < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Ok(total / 101.0)
}

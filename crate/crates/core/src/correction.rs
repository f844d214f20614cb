//! Dynamic category correction: blend the teacher's class distribution with an
//! external classifier's under a cosine-decayed weight and take the argmax.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::argmax;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Probability vector over the `N` foreground classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("distribution must be non-empty"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("distribution entries must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::invalid(format!("distribution sums to {sum}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, class: usize) -> Self {
        let mut p = vec![0.0; n];
        p[class] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.0
    }
}

/// Iteration counters driving the fusion schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionState {
    it_cur: u64,
    it_max: u64,
}

impl FusionState {
    pub fn new(it_cur: u64, it_max: u64) -> Result<Self> {
        if it_max == 0 {
            return Err(Error::invalid("it_max must be positive"));
        }
        if it_cur > it_max {
            return Err(Error::invalid(format!("it_cur {it_cur} exceeds it_max {it_max}")));
        }
        Ok(Self { it_cur, it_max })
    }

    pub fn it_cur(&self) -> u64 {
        self.it_cur
    }

    pub fn it_max(&self) -> u64 {
        self.it_max
    }

    pub fn weight(&self) -> f64 {
        fusion_weight(*self)
    }
}

/// `0.25 * (cos(pi * it_cur / it_max) + 1)`: 0.5 at the start, 0 at the end.
pub fn fusion_weight(state: FusionState) -> f64 {
    let ratio = state.it_cur as f64 / state.it_max as f64;
    0.25 * ((ratio * PI).cos() + 1.0)
}

/// `w * external + (1 - w) * teacher`.
pub fn fuse(teacher: &Distribution, external: &Distribution, w: f64) -> Result<Distribution> {
    if teacher.len() != external.len() {
        return Err(Error::LengthMismatch {
            expected: teacher.len(),
            actual: external.len(),
        });
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("fusion weight {w} outside [0, 1]")));
    }
    Ok(Distribution(
        teacher
            .0
            .iter()
            .zip(&external.0)
            .map(|(t, e)| w * e + (1.0 - w) * t)
            .collect(),
    ))
}

/// Corrected class plus the fused distribution it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub class_id: usize,
    pub fused: Distribution,
}

pub fn correct_with_weight(teacher: &Distribution, external: &Distribution, w: f64) -> Result<Correction> {
    let fused = fuse(teacher, external, w)?;
    Ok(Correction {
        class_id: fused.argmax(),
        fused,
    })
}

/// Argmax of the fused distribution; ties resolve to the lowest class index.
pub fn correct_category(teacher: &Distribution, external: &Distribution, state: FusionState) -> Result<usize> {
    Ok(correct_with_weight(teacher, external, state.weight())?.class_id)
}

/// One request to an external classifier.
///
/// `instance_id` keys precomputed responses. `source_class` is the class the
/// masked patch actually shows, which only a simulator knows; `None` means the
/// patch is background.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalQuery<'a> {
    pub instance_id: String,
    pub source_class: Option<usize>,
    pub vocabulary: &'a [String],
}

pub trait ExternalClassifier {
    fn classify(&self, query: &ExternalQuery<'_>) -> Result<Distribution>;
}

/// How the mock spreads the probability mass it does not put on the true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confusion {
    /// Residual mass split evenly over the other classes. The true class never
    /// drops below chance level `1/N`.
    Uniform,
    /// Row `c` gives residual weights over the other classes when the truth is `c`;
    /// the diagonal is ignored and rows are renormalized.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockClassifierConfig {
    pub num_classes: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
    /// Probability that a response is centred on a random wrong class instead.
    #[serde(default)]
    pub miss_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Deterministic stand-in for a vision-language classifier. Responses depend
/// only on `(seed, instance_id, source_class)`, so query order never matters.
#[derive(Debug, Clone)]
pub struct MockExternalClassifier {
    config: MockClassifierConfig,
}

impl MockExternalClassifier {
    pub fn new(config: MockClassifierConfig) -> Result<Self> {
        let n = config.num_classes;
        if n == 0 {
            return Err(Error::invalid("mock classifier needs at least one class"));
        }
        if !(0.0..=1.0).contains(&config.accuracy) {
            return Err(Error::invalid("mock accuracy must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&config.miss_rate) {
            return Err(Error::invalid("mock miss rate must lie in [0, 1]"));
        }
        if let Confusion::Matrix(rows) = &config.confusion {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(Error::invalid(format!("confusion matrix must be {n}x{n}")));
            }
            if rows.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid("confusion weights must be finite and non-negative"));
            }
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &MockClassifierConfig {
        &self.config
    }

    /// The response kernel centred on `class`, before any miss sampling.
    pub fn kernel(&self, class: usize) -> Result<Distribution> {
        let n = self.config.num_classes;
        if class >= n {
            return Err(Error::invalid(format!("unknown class id {class} for {n} classes")));
        }
        if n == 1 {
            return Ok(Distribution::one_hot(1, 0));
        }
        let mut probs = vec![0.0; n];
        match &self.config.confusion {
            Confusion::Uniform => {
                let on_class = self.config.accuracy.max(1.0 / n as f64);
                let rest = (1.0 - on_class) / (n - 1) as f64;
                for (k, p) in probs.iter_mut().enumerate() {
                    *p = if k == class { on_class } else { rest };
                }
            }
            Confusion::Matrix(rows) => {
                let acc = self.config.accuracy;
                let row = &rows[class];
                let off: f64 = row.iter().enumerate().filter(|(k, _)| *k != class).map(|(_, v)| v).sum();
                for (k, p) in probs.iter_mut().enumerate() {
                    *p = if k == class {
                        acc
                    } else if off > 0.0 {
                        (1.0 - acc) * row[k] / off
                    } else {
                        (1.0 - acc) / (n - 1) as f64
                    };
                }
            }
        }
        Ok(Distribution(probs))
    }

    fn query_rng(&self, instance_id: &str) -> ChaCha8Rng {
        // FNV-1a over the id, folded with the configured seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in instance_id.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.config.seed.rotate_left(17))
    }
}

impl ExternalClassifier for MockExternalClassifier {
    fn classify(&self, query: &ExternalQuery<'_>) -> Result<Distribution> {
        let n = self.config.num_classes;
        if !query.vocabulary.is_empty() && query.vocabulary.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: query.vocabulary.len(),
            });
        }
        let Some(truth) = query.source_class else {
            return Ok(Distribution::uniform(n));
        };
        if truth >= n {
            return Err(Error::invalid(format!("unknown class id {truth} for {n} classes")));
        }
        let mut centre = truth;
        if self.config.miss_rate > 0.0 && n > 1 {
            let mut rng = self.query_rng(&query.instance_id);
            if rng.random::<f64>() < self.config.miss_rate {
                let offset = rng.random_range(1..n);
                centre = (truth + offset) % n;
            }
        }
        self.kernel(centre)
    }
}

/// Responses loaded ahead of time, keyed by instance id.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedClassifier {
    responses: HashMap<String, Distribution>,
}

impl PrecomputedClassifier {
    pub fn new(responses: HashMap<String, Distribution>) -> Self {
        Self { responses }
    }
}

impl ExternalClassifier for PrecomputedClassifier {
    fn classify(&self, query: &ExternalQuery<'_>) -> Result<Distribution> {
        self.responses
            .get(&query.instance_id)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no precomputed distribution for `{}`", query.instance_id)))
    }
}

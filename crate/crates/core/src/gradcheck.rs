//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::instance::BinaryMask;
use crate::loss::{
    match_predictions, pmua_gradient, pmua_model_loss, CostWeights, LinearPixelModel, PixelFeatures, PseudoLabel,
};
use crate::matching::MatchResult;
use crate::quality::UncertaintyMap;

/// Comparison of an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
}

pub fn central_differences<F>(loss: F, theta: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + step;
            let plus = loss(&probe);
            probe[i] = theta[i] - step;
            let minus = loss(&probe);
            probe[i] = theta[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-8)`, maximized over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares `analytic` with central differences of `loss` at `theta`.
/// A NaN anywhere is reported as an infinite error rather than skipped.
pub fn finite_difference_check<F>(loss: F, analytic: &[f64], theta: &[f64], step: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    let numeric = central_differences(loss, theta, step);
    let mut max_relative_error = max_relative_error(analytic, &numeric);
    if analytic.len() != numeric.len() || analytic.iter().chain(&numeric).any(|v| !v.is_finite()) {
        max_relative_error = f64::INFINITY;
    }
    GradCheckReport {
        analytic: analytic.to_vec(),
        numeric,
        max_relative_error,
    }
}

/// A self-contained PMUA problem on a linear pixel model.
#[derive(Debug, Clone)]
pub struct PmuaProblem {
    pub model: LinearPixelModel,
    pub features: Vec<PixelFeatures>,
    pub pseudo: Vec<PseudoLabel>,
    pub matching: MatchResult,
}

impl PmuaProblem {
    /// Random problem: 1-3 student queries, at most as many pseudo-labels,
    /// Gaussian features and parameters, uniform uncertainties. The matching
    /// is computed once at the sampled parameters and then held fixed.
    pub fn random(seed: u64, height: usize, width: usize, dim: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = rng.random_range(1..=3usize);
        let labels = rng.random_range(1..=queries);
        let theta: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let model = LinearPixelModel::new(theta)?;
        let hw = height * width;
        let features = (0..queries)
            .map(|_| {
                let v = (0..hw * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                PixelFeatures::new(height, width, dim, v)
            })
            .collect::<Result<Vec<_>>>()?;
        let pseudo = (0..labels)
            .map(|_| {
                let bits = (0..hw).map(|_| rng.random_bool(0.5)).collect();
                let u = (0..hw).map(|_| rng.random::<f64>()).collect();
                PseudoLabel::new(0, BinaryMask::new(height, width, bits)?, UncertaintyMap::new(height, width, u)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let students = features
            .iter()
            .map(|f| {
                Ok(crate::instance::InstancePrediction::new(
                    crate::instance::ClassLogits::new(vec![0.0])?,
                    model.predict(f)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = CostWeights {
            class: 0.0,
            bce: 1.0,
            dice: 1.0,
        };
        let matching = match_predictions(&students, &pseudo, &weights)?;
        Ok(Self {
            model,
            features,
            pseudo,
            matching,
        })
    }

    pub fn loss_at(&self, theta: &[f64]) -> f64 {
        let model = LinearPixelModel {
            theta: theta.to_vec(),
        };
        pmua_model_loss(&model, &self.features, &self.pseudo, &self.matching).unwrap_or(f64::NAN)
    }

    pub fn check(&self, step: f64) -> Result<GradCheckReport> {
        let analytic = pmua_gradient(&self.model, &self.features, &self.pseudo, &self.matching)?;
        Ok(finite_difference_check(|t| self.loss_at(t), &analytic, &self.model.theta, step))
    }
}

/// Runs the PMUA gradient check on `count` problems derived from `seed`,
/// returning the worst relative error.
pub fn pmua_gradient_sweep(seed: u64, count: usize, step: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let problem = PmuaProblem::random(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), 4, 4, 3)?;
        worst = worst.max(problem.check(step)?.max_relative_error);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = [0.3, -1.2, 2.5, 0.0];
        let analytic: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let r = finite_difference_check(|t| t.iter().map(|v| v * v).sum(), &analytic, &theta, 1e-5);
        assert!(r.max_relative_error <= 1e-9, "{}", r.max_relative_error);
    }

    #[test]
    fn pmua_random_instance() {
        let p = PmuaProblem::random(42, 4, 4, 3).unwrap();
        let r = p.check(1e-5).unwrap();
        assert!(r.max_relative_error <= 1e-5, "{}", r.max_relative_error);
    }

    #[test]
    fn large_step_is_reported() {
        // Cubic loss: the central difference is off by step^2 per coordinate.
        let theta = [1.0, 2.0];
        let analytic: Vec<f64> = theta.iter().map(|t| 3.0 * t * t).collect();
        let r = finite_difference_check(|t| t.iter().map(|v| v * v * v).sum(), &analytic, &theta, 1e-1);
        assert!(r.max_relative_error > 1e-3);

        let p = PmuaProblem::random(5, 4, 4, 3).unwrap();
        let coarse = p.check(1e-1).unwrap().max_relative_error;
        let fine = p.check(1e-5).unwrap().max_relative_error;
        assert!(coarse > fine);
    }

    #[test]
    fn wrong_gradient_fails() {
        let p = PmuaProblem::random(9, 4, 4, 3).unwrap();
        let mut r = p.check(1e-5).unwrap();
        let bogus: Vec<f64> = r.analytic.iter().map(|g| g * 1.01).collect();
        r = finite_difference_check(|t| p.loss_at(t), &bogus, &p.model.theta, 1e-5);
        assert!(r.max_relative_error > 1e-3);
    }

    #[test]
    fn nan_is_infinite_error() {
        let r = finite_difference_check(|_| f64::NAN, &[1.0], &[0.0], 1e-5);
        assert!(r.max_relative_error.is_infinite());
    }
}

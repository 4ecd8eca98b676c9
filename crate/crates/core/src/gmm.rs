//! Gaussian mixtures left-truncated at zero.
//!
//! The truncation is applied to the mixture as a whole: the untruncated
//! mixture density is cut at zero and divided by the single constant
//! `Z = P(X > 0)` of the untruncated mixture. Per-component truncation would
//! give a different law when components carry different negative mass.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};

/// Smallest admissible component standard deviation.
pub const MIN_STD: f64 = 1e-9;

/// Tolerance on the component weight sum.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Mixtures whose untruncated mass above zero falls below this are rejected:
/// their truncated law is numerically meaningless and rejection sampling
/// would not terminate in practice.
const MIN_POSITIVE_MASS: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: f64, std: f64) -> Self {
        GaussianComponent { weight, mean, std }
    }

    fn density(&self, x: f64) -> f64 {
        normal_pdf((x - self.mean) / self.std) / self.std
    }

    /// Untruncated mass of this component on (0, x].
    fn mass_above_zero_to(&self, x: f64) -> f64 {
        // Use whichever pair of tails keeps precision.
        let lo = -self.mean / self.std;
        let hi = (x - self.mean) / self.std;
        if hi <= 0.0 {
            normal_cdf(hi) - normal_cdf(lo)
        } else if lo >= 0.0 {
            normal_cdf(-lo) - normal_cdf(-hi)
        } else {
            (0.5 - normal_cdf(lo)) + (0.5 - normal_cdf(-hi))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawMixture {
    truncation: f64,
    components: Vec<GaussianComponent>,
}

/// A Gaussian mixture restricted to `[0, inf)` and renormalized.
///
/// Construction validates the mixture, so every value of this type has
/// normalized nonnegative weights and strictly positive standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct TruncatedMixture {
    components: Vec<GaussianComponent>,
    /// Cumulative weights, used to pick a component while sampling.
    cumulative: Vec<f64>,
    /// Untruncated mixture mass above the truncation point.
    positive_mass: f64,
}

impl TryFrom<RawMixture> for TruncatedMixture {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        if raw.truncation != 0.0 {
            return Err(Error::validation(format!(
                "truncation point must be 0, got {}",
                raw.truncation
            )));
        }
        TruncatedMixture::new(raw.components)
    }
}

impl From<TruncatedMixture> for RawMixture {
    fn from(m: TruncatedMixture) -> Self {
        RawMixture {
            truncation: 0.0,
            components: m.components,
        }
    }
}

impl TruncatedMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::validation("mixture needs at least one component"));
        }
        for (i, c) in components.iter().enumerate() {
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::validation(format!(
                    "component {i}: weight {} is not a nonnegative number",
                    c.weight
                )));
            }
            if !c.mean.is_finite() {
                return Err(Error::validation(format!("component {i}: mean is not finite")));
            }
            if !(c.std.is_finite() && c.std >= MIN_STD) {
                return Err(Error::validation(format!(
                    "component {i}: std {} is below {MIN_STD}",
                    c.std
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::validation(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        let mut acc = 0.0;
        let cumulative = components
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        let positive_mass: f64 = components
            .iter()
            .map(|c| c.weight * normal_cdf(c.mean / c.std))
            .sum();
        if positive_mass < MIN_POSITIVE_MASS {
            return Err(Error::validation(
                "mixture has negligible mass above the truncation point",
            ));
        }
        Ok(TruncatedMixture {
            components,
            cumulative,
            positive_mass,
        })
    }

    /// A single-component mixture.
    pub fn single(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(1.0, mean, std)])
    }

    /// Normalizes `weights` and builds the mixture.
    pub fn from_unnormalized(components: Vec<GaussianComponent>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::validation("component weights must have a positive sum"));
        }
        Self::new(
            components
                .into_iter()
                .map(|c| GaussianComponent { weight: c.weight / total, ..c })
                .collect(),
        )
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn truncation_point(&self) -> f64 {
        0.0
    }

    /// Untruncated mixture mass above zero (the renormalization constant).
    pub fn positive_mass(&self) -> f64 {
        self.positive_mass
    }

    pub fn max_mean(&self) -> f64 {
        self.components.iter().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_std(&self) -> f64 {
        self.components.iter().map(|c| c.std).fold(0.0, f64::max)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        let raw: f64 = self.components.iter().map(|c| c.weight * c.density(x)).sum();
        raw / self.positive_mass
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let raw: f64 = self
            .components
            .iter()
            .map(|c| c.weight * c.mass_above_zero_to(x))
            .sum();
        (raw / self.positive_mass).clamp(0.0, 1.0)
    }

    /// `P(X > threshold)`, defined as `1 - cdf(threshold)`.
    pub fn tail_prob(&self, threshold: f64) -> f64 {
        1.0 - self.cdf(threshold)
    }

    /// One draw by rejection from the untruncated mixture.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let u: f64 = rng.random();
            let idx = self
                .cumulative
                .partition_point(|&c| c <= u)
                .min(self.components.len() - 1);
            let c = &self.components[idx];
            let z: f64 = rng.sample(StandardNormal);
            let x = c.mean + c.std * z;
            if x >= 0.0 {
                return x;
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<f64>> {
        if count == 0 {
            return Err(Error::validation("sample count must be positive"));
        }
        Ok((0..count).map(|_| self.sample_one(rng)).collect())
    }

    /// Sum of `n` independent draws.
    pub fn sample_sum<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> f64 {
        (0..n).map(|_| self.sample_one(rng)).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mixture serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

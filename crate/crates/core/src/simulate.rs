//! Ground truth: random scenarios, observations and the risk oracle.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::RiskCurve;
use crate::gmm::{GaussianComponent, TruncatedMixture};
use crate::queue::{self, BirthDeathRates, InitialState, LifecycleTrace};
use crate::seed;

/// Lower clamp applied to generated standard deviations.
pub const GENERATED_STD_FLOOR: f64 = 1e-4;

/// Default oracle batch size per occupancy state for routine use.
pub const ROUTINE_MC_SAMPLES: usize = 100_000;

/// Default oracle batch size per occupancy state for acceptance runs.
pub const ACCEPTANCE_MC_SAMPLES: usize = 1_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawScenario {
    lambda: f64,
    eta: f64,
    n_max: usize,
    r_max: f64,
    slice_load: TruncatedMixture,
}

/// Full ground truth for one slicing system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScenario", into = "RawScenario")]
pub struct ScenarioSpec {
    pub rates: BirthDeathRates,
    pub slice_load: TruncatedMixture,
    pub r_max: f64,
}

impl TryFrom<RawScenario> for ScenarioSpec {
    type Error = Error;

    fn try_from(raw: RawScenario) -> Result<Self> {
        ScenarioSpec::new(
            BirthDeathRates::new(raw.lambda, raw.eta, raw.n_max)?,
            raw.slice_load,
            raw.r_max,
        )
    }
}

impl From<ScenarioSpec> for RawScenario {
    fn from(s: ScenarioSpec) -> Self {
        RawScenario {
            lambda: s.rates.lambda,
            eta: s.rates.eta,
            n_max: s.rates.n_max,
            r_max: s.r_max,
            slice_load: s.slice_load,
        }
    }
}

impl ScenarioSpec {
    pub fn new(rates: BirthDeathRates, slice_load: TruncatedMixture, r_max: f64) -> Result<Self> {
        rates.validate()?;
        if !(r_max.is_finite() && r_max > 0.0) {
            return Err(Error::validation(format!("r_max must be > 0, got {r_max}")));
        }
        Ok(ScenarioSpec { rates, slice_load, r_max })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Ranges for drawing a random per-slice load mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureRanges {
    pub k: usize,
    pub mean_range: (f64, f64),
    pub std_range: (f64, f64),
}

impl Default for MixtureRanges {
    fn default() -> Self {
        MixtureRanges {
            k: 5,
            mean_range: (0.25, 0.75),
            std_range: (0.0, 0.1),
        }
    }
}

impl MixtureRanges {
    pub fn validate(&self) -> Result<()> {
        let (mlo, mhi) = self.mean_range;
        let (slo, shi) = self.std_range;
        if self.k < 1 {
            return Err(Error::validation("component count must be at least 1"));
        }
        if !(mlo >= 0.0 && mlo < mhi && mhi.is_finite()) {
            return Err(Error::validation(format!("invalid mean range ({mlo}, {mhi})")));
        }
        if !(slo >= 0.0 && slo < shi && shi.is_finite()) {
            return Err(Error::validation(format!("invalid std range ({slo}, {shi})")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TruncatedMixture> {
        self.validate()?;
        let (mlo, mhi) = self.mean_range;
        let (slo, shi) = self.std_range;
        let comps = (0..self.k)
            .map(|_| {
                let mean = rng.random_range(mlo..=mhi);
                let std = rng.random_range(slo..=shi).max(GENERATED_STD_FLOOR);
                // Uniform on (0, 1].
                let weight = 1.0 - rng.random::<f64>();
                GaussianComponent::new(weight, mean, std)
            })
            .collect();
        TruncatedMixture::from_unnormalized(comps)
    }
}

/// Draws a random scenario with the given rates and capacity.
pub fn random_scenario<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &MixtureRanges,
    rates: BirthDeathRates,
    r_max: f64,
) -> Result<ScenarioSpec> {
    let load = ranges.sample(rng)?;
    ScenarioSpec::new(rates, load, r_max)
}

/// What the estimator gets to see.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub trace: LifecycleTrace,
    pub load_samples: Vec<f64>,
}

impl ObservationSet {
    pub fn n_obs(&self) -> usize {
        self.load_samples.len()
    }

    pub fn write_loads_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "load")?;
        for x in &self.load_samples {
            writeln!(w, "{x}")?;
        }
        Ok(())
    }

    pub fn read_loads_csv<R: BufRead>(r: R) -> Result<Vec<f64>> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "load" => {}
            Some(Err(e)) => return Err(e.into()),
            _ => return Err(Error::Parse("missing load CSV header".into())),
        }
        let mut out = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let x: f64 = line
                .parse()
                .map_err(|_| Error::Parse(format!("bad load value `{line}`")))?;
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::validation(format!("load value {x} is not a finite nonnegative number")));
            }
            out.push(x);
        }
        Ok(out)
    }
}

/// Draws `n_obs` load snapshots and a lifecycle trace of length `horizon`.
///
/// Trace and loads come from two child streams of one seed drawn from `rng`,
/// so changing `n_obs` leaves the trace unchanged.
pub fn observe<R: RngCore + ?Sized>(
    spec: &ScenarioSpec,
    n_obs: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<ObservationSet> {
    if n_obs < 1 {
        return Err(Error::validation("n_obs must be at least 1"));
    }
    let base = rng.next_u64();
    let trace = queue::simulate_lifecycle(
        &spec.rates,
        horizon,
        InitialState::Stationary,
        &mut seed::child_stream(base, 0),
    )?;
    let load_samples = spec.slice_load.sample(&mut seed::child_stream(base, 1), n_obs)?;
    Ok(ObservationSet { trace, load_samples })
}

/// Default observation horizon, `1000 / eta`.
pub fn default_horizon(rates: &BirthDeathRates) -> f64 {
    1000.0 / rates.eta
}

/// Risk estimate together with per-threshold Monte-Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimate {
    pub curve: RiskCurve,
    pub std_errors: Vec<f64>,
}

fn check_sorted(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::validation("threshold list is empty"));
    }
    if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::validation("thresholds must be finite and sorted ascending"));
    }
    Ok(())
}

/// Fraction of `sorted` strictly above each threshold.
pub(crate) fn exceedance(sorted: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let n = sorted.len() as f64;
    thresholds
        .iter()
        .map(|&t| (sorted.len() - sorted.partition_point(|&x| x <= t)) as f64 / n)
        .collect()
}

/// Stratified oracle: one batch of `mc_samples` aggregate draws per
/// occupancy state, combined with exact Erlang weights.
pub fn stratified_overload_risk<R: RngCore + ?Sized>(
    spec: &ScenarioSpec,
    thresholds: &[f64],
    mc_samples: usize,
    rng: &mut R,
) -> Result<OracleEstimate> {
    check_sorted(thresholds)?;
    if mc_samples < 1 {
        return Err(Error::validation("mc_samples must be positive"));
    }
    let probs = queue::stationary_distribution(&spec.rates)?;
    let base = rng.next_u64();
    let load = &spec.slice_load;

    let per_state: Vec<Vec<f64>> = (1..=spec.rates.n_max)
        .into_par_iter()
        .map(|n| {
            if probs[n] == 0.0 {
                return vec![0.0; thresholds.len()];
            }
            let mut s = seed::child_stream(base, n as u64);
            let mut sums: Vec<f64> = (0..mc_samples).map(|_| load.sample_sum(&mut s, n)).collect();
            sums.sort_unstable_by(f64::total_cmp);
            exceedance(&sums, thresholds)
        })
        .collect();

    let m = mc_samples as f64;
    let mut risks = Vec::with_capacity(thresholds.len());
    let mut std_errors = Vec::with_capacity(thresholds.len());
    for (j, &t) in thresholds.iter().enumerate() {
        let empty_exceeds = if t < 0.0 { probs[0] } else { 0.0 };
        let mut p = empty_exceeds;
        let mut var = 0.0;
        for (i, ex) in per_state.iter().enumerate() {
            let pn = probs[i + 1];
            p += pn * ex[j];
            var += pn * pn * ex[j] * (1.0 - ex[j]) / m;
        }
        risks.push(p.clamp(0.0, 1.0));
        std_errors.push(var.sqrt());
    }
    Ok(OracleEstimate {
        curve: RiskCurve::new(thresholds.to_vec(), risks)?,
        std_errors,
    })
}

/// Ground-truth overload risk over `thresholds`.
pub fn true_overload_risk<R: RngCore + ?Sized>(
    spec: &ScenarioSpec,
    thresholds: &[f64],
    mc_samples: usize,
    rng: &mut R,
) -> Result<RiskCurve> {
    Ok(stratified_overload_risk(spec, thresholds, mc_samples, rng)?.curve)
}

/// Unstratified check: draw the occupancy from the Erlang law, then sum that
/// many slice loads, `mc_samples` times.
pub fn direct_overload_risk<R: RngCore + ?Sized>(
    spec: &ScenarioSpec,
    thresholds: &[f64],
    mc_samples: usize,
    rng: &mut R,
) -> Result<OracleEstimate> {
    check_sorted(thresholds)?;
    if mc_samples < 1 {
        return Err(Error::validation("mc_samples must be positive"));
    }
    let probs = queue::stationary_distribution(&spec.rates)?;
    let mut s = seed::stream(rng.next_u64());
    let mut sums: Vec<f64> = (0..mc_samples)
        .map(|_| {
            let u: f64 = s.random();
            let mut acc = 0.0;
            let n = probs
                .iter()
                .position(|&p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(spec.rates.n_max);
            spec.slice_load.sample_sum(&mut s, n)
        })
        .collect();
    sums.sort_unstable_by(f64::total_cmp);
    let risks = exceedance(&sums, thresholds);
    let m = mc_samples as f64;
    let std_errors = risks.iter().map(|p| (p * (1.0 - p) / m).sqrt()).collect();
    Ok(OracleEstimate {
        curve: RiskCurve::new(thresholds.to_vec(), risks)?,
        std_errors,
    })
}

//! Randomized benchmark harness.
//!
//! A trial draws a random scenario, observes it, runs the estimator and
//! scores the estimate against the stratified Monte-Carlo oracle. Trial
//! seeds derive from the master seed by index, so results do not depend on
//! how trials are scheduled across threads.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{self, PipelineConfig, RiskCurve};
use crate::queue::BirthDeathRates;
use crate::seed;
use crate::simulate::{self, MixtureRanges, ACCEPTANCE_MC_SAMPLES};

/// Truth values below this floor are ignored by [`error_rate`].
pub const TRUTH_FLOOR: f64 = 1e-4;

/// Fraction of failed trials above which a benchmark is reported as failed.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Threshold grid given either as explicit points or as an even range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdGrid {
    Points(Vec<f64>),
    Range { lo: f64, hi: f64, steps: usize },
}

impl ThresholdGrid {
    /// Default grid: 41 points on `[0.5 r_max, 1.5 r_max]`.
    pub fn around(r_max: f64) -> Self {
        ThresholdGrid::Range { lo: 0.5 * r_max, hi: 1.5 * r_max, steps: 41 }
    }

    pub fn points(&self) -> Result<Vec<f64>> {
        let pts = match self {
            ThresholdGrid::Points(p) => p.clone(),
            ThresholdGrid::Range { lo, hi, steps } => {
                if *steps == 0 || !(lo <= hi) {
                    return Err(Error::validation("threshold range needs lo <= hi and steps >= 1"));
                }
                if *steps == 1 {
                    vec![*lo]
                } else {
                    let step = (hi - lo) / (*steps - 1) as f64;
                    (0..*steps).map(|i| lo + step * i as f64).collect()
                }
            }
        };
        if pts.is_empty() || pts.iter().any(|t| !t.is_finite()) || pts.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::validation("threshold grid must be nonempty and sorted ascending"));
        }
        Ok(pts)
    }

    fn scaled(&self, s: f64) -> Self {
        match self {
            ThresholdGrid::Points(p) => ThresholdGrid::Points(p.iter().map(|t| t * s).collect()),
            ThresholdGrid::Range { lo, hi, steps } => ThresholdGrid::Range { lo: lo * s, hi: hi * s, steps: *steps },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub trials: usize,
    pub n_obs: usize,
    pub k_components: usize,
    pub mean_range: (f64, f64),
    pub std_range: (f64, f64),
    pub lambda: f64,
    pub eta: f64,
    pub n_max: usize,
    pub r_max: f64,
    /// Defaults to [`ThresholdGrid::around`] `r_max`.
    pub threshold_grid: Option<ThresholdGrid>,
    /// Lifecycle observation time; defaults to `1000 / eta`.
    pub trace_horizon: Option<f64>,
    /// Oracle draws per occupancy state.
    pub oracle_mc_samples: usize,
    pub master_seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            trials: 100,
            n_obs: 5000,
            k_components: 5,
            mean_range: (0.25, 0.75),
            std_range: (0.0, 0.1),
            lambda: 5.0,
            eta: 1.0,
            n_max: 10,
            r_max: 5.0,
            threshold_grid: None,
            trace_horizon: None,
            oracle_mc_samples: ACCEPTANCE_MC_SAMPLES,
            master_seed: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn rates(&self) -> Result<BirthDeathRates> {
        BirthDeathRates::new(self.lambda, self.eta, self.n_max)
    }

    pub fn ranges(&self) -> MixtureRanges {
        MixtureRanges { k: self.k_components, mean_range: self.mean_range, std_range: self.std_range }
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        self.threshold_grid.clone().unwrap_or_else(|| ThresholdGrid::around(self.r_max)).points()
    }

    pub fn horizon(&self) -> f64 {
        self.trace_horizon.unwrap_or(1000.0 / self.eta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::validation("trials must be at least 1"));
        }
        if self.n_obs < 1 {
            return Err(Error::validation("n_obs must be at least 1"));
        }
        if self.oracle_mc_samples < 1 {
            return Err(Error::validation("oracle_mc_samples must be positive"));
        }
        if !(self.r_max.is_finite() && self.r_max > 0.0) {
            return Err(Error::validation("r_max must be positive"));
        }
        if !(self.horizon().is_finite() && self.horizon() > 0.0) {
            return Err(Error::validation("trace horizon must be positive"));
        }
        self.rates()?;
        self.ranges().validate()?;
        self.pipeline.validate()?;
        self.grid()?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: BenchConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

/// Root-mean-square relative error over grid points whose truth is at least
/// [`TRUTH_FLOOR`].
pub fn error_rate(estimated: &RiskCurve, truth: &RiskCurve) -> Result<f64> {
    check_grids(estimated, truth)?;
    let rel: Vec<f64> = estimated
        .risks
        .iter()
        .zip(&truth.risks)
        .filter(|(_, &t)| t >= TRUTH_FLOOR)
        .map(|(e, t)| ((e - t) / t).powi(2))
        .collect();
    if rel.is_empty() {
        return Err(Error::DegenerateTruth { floor: TRUTH_FLOOR });
    }
    Ok((rel.iter().sum::<f64>() / rel.len() as f64).sqrt())
}

/// Root-mean-square absolute error over the whole grid.
pub fn absolute_rms_error(estimated: &RiskCurve, truth: &RiskCurve) -> Result<f64> {
    check_grids(estimated, truth)?;
    let n = truth.len() as f64;
    Ok((estimated.risks.iter().zip(&truth.risks).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / n).sqrt())
}

fn check_grids(a: &RiskCurve, b: &RiskCurve) -> Result<()> {
    if a.thresholds != b.thresholds {
        return Err(Error::validation("estimated and true curves use different threshold grids"));
    }
    Ok(())
}

/// Numbers produced by a completed trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScores {
    pub error_rate: f64,
    pub abs_rms_error: f64,
    /// Error of the pooled-sample readout.
    pub error_rate_empirical: f64,
    pub k_hat: usize,
    pub lambda_hat: f64,
    pub eta_hat: f64,
    pub thresholds: Vec<f64>,
    pub true_risks: Vec<f64>,
    pub estimated_risks: Vec<f64>,
    pub empirical_risks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrialOutcome {
    Completed(TrialScores),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub k_components: usize,
    pub outcome: TrialOutcome,
}

impl TrialResult {
    pub fn error_rate(&self) -> Option<f64> {
        match &self.outcome {
            TrialOutcome::Completed(s) => Some(s.error_rate),
            TrialOutcome::Failed(_) => None,
        }
    }

    pub fn scores(&self) -> Option<&TrialScores> {
        match &self.outcome {
            TrialOutcome::Completed(s) => Some(s),
            TrialOutcome::Failed(_) => None,
        }
    }
}

fn score_trial(config: &BenchConfig, trial_seed: u64) -> Result<TrialScores> {
    let grid = config.grid()?;
    let spec = simulate::random_scenario(
        &mut seed::child_stream(trial_seed, 0),
        &config.ranges(),
        config.rates()?,
        config.r_max,
    )?;
    let obs = simulate::observe(&spec, config.n_obs, config.horizon(), &mut seed::child_stream(trial_seed, 1))?;
    let out = estimate::run_pipeline(
        &obs,
        config.n_max,
        &grid,
        &config.pipeline,
        &mut seed::child_stream(trial_seed, 2),
    )?;
    let truth = simulate::true_overload_risk(
        &spec,
        &grid,
        config.oracle_mc_samples,
        &mut seed::child_stream(trial_seed, 3),
    )?;
    Ok(TrialScores {
        error_rate: error_rate(&out.curve, &truth)?,
        abs_rms_error: absolute_rms_error(&out.curve, &truth)?,
        error_rate_empirical: error_rate(&out.empirical_curve, &truth)?,
        k_hat: out.model.k_hat,
        lambda_hat: out.model.lambda_hat,
        eta_hat: out.model.eta_hat,
        thresholds: grid,
        true_risks: truth.risks,
        estimated_risks: out.curve.risks,
        empirical_risks: out.empirical_curve.risks,
    })
}

/// One benchmark trial; failures are recorded, not propagated.
pub fn run_trial(config: &BenchConfig, trial: usize, trial_seed: u64) -> TrialResult {
    let outcome = match score_trial(config, trial_seed) {
        Ok(s) => TrialOutcome::Completed(s),
        Err(e) => TrialOutcome::Failed(e.to_string()),
    };
    TrialResult { trial, seed: trial_seed, k_components: config.k_components, outcome }
}

/// Location statistics of the completed trials' error rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub completed: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub p05: Option<f64>,
    pub p25: Option<f64>,
    pub p75: Option<f64>,
    pub p95: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub median_empirical: Option<f64>,
}

/// Linear-interpolation quantile of ascending `sorted`.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

impl Summary {
    /// Summary of the given error rates; `failed` counts missing trials.
    pub fn from_errors(errors: &[f64], empirical: &[f64], failed: usize) -> Self {
        let mut s = errors.to_vec();
        s.sort_unstable_by(f64::total_cmp);
        let mut e = empirical.to_vec();
        e.sort_unstable_by(f64::total_cmp);
        let mean = if s.is_empty() { None } else { Some(s.iter().sum::<f64>() / s.len() as f64) };
        Summary {
            trials: s.len() + failed,
            completed: s.len(),
            failed,
            mean,
            median: quantile(&s, 0.5),
            p05: quantile(&s, 0.05),
            p25: quantile(&s, 0.25),
            p75: quantile(&s, 0.75),
            p95: quantile(&s, 0.95),
            min: s.first().copied(),
            max: s.last().copied(),
            median_empirical: quantile(&e, 0.5),
        }
    }

    pub fn of(results: &[TrialResult]) -> Self {
        let done: Vec<&TrialScores> = results.iter().filter_map(|r| r.scores()).collect();
        let errors: Vec<f64> = done.iter().map(|s| s.error_rate).collect();
        let empirical: Vec<f64> = done.iter().map(|s| s.error_rate_empirical).collect();
        Summary::from_errors(&errors, &empirical, results.len() - done.len())
    }

    pub fn failure_rate(&self) -> f64 {
        self.failed as f64 / self.trials.max(1) as f64
    }

    pub fn excessive_failures(&self) -> bool {
        self.failure_rate() > MAX_FAILURE_RATE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub results: Vec<TrialResult>,
    pub summary: Summary,
}

pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    seed::derive(master_seed, trial as u64)
}

pub fn run_benchmark(config: &BenchConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let results: Vec<TrialResult> = (0..config.trials)
        .into_par_iter()
        .map(|i| run_trial(config, i, trial_seed(config.master_seed, i)))
        .collect();
    let summary = Summary::of(&results);
    Ok(BenchmarkReport { results, summary })
}

/// Parameter varied by a sensitivity sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of mixture components per slice.
    ComponentCount,
    /// Multiplies the mean range, `r_max` and the threshold grid.
    MeanScale,
    /// Multiplies the std range.
    StdScale,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component_count" => Ok(SweepAxis::ComponentCount),
            "mean_scale" => Ok(SweepAxis::MeanScale),
            "std_scale" => Ok(SweepAxis::StdScale),
            other => Err(Error::validation(format!("unknown sweep axis `{other}`"))),
        }
    }
}

impl SweepAxis {
    pub fn apply(self, base: &BenchConfig, value: f64) -> Result<BenchConfig> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::validation(format!("sweep value {value} must be positive")));
        }
        let mut c = base.clone();
        match self {
            SweepAxis::ComponentCount => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::validation(format!("component count {value} must be a positive integer")));
                }
                c.k_components = value as usize;
            }
            SweepAxis::MeanScale => {
                c.mean_range = (base.mean_range.0 * value, base.mean_range.1 * value);
                c.r_max = base.r_max * value;
                c.threshold_grid = Some(base.threshold_grid.clone().unwrap_or_else(|| ThresholdGrid::around(base.r_max)).scaled(value));
            }
            SweepAxis::StdScale => {
                c.std_range = (base.std_range.0 * value, base.std_range.1 * value);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub value: f64,
    pub report: BenchmarkReport,
}

/// Reruns the benchmark once per axis value, all other settings fixed.
pub fn sensitivity_sweep(config: &BenchConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        return Err(Error::validation("sweep needs at least one value"));
    }
    values
        .iter()
        .map(|&v| {
            let c = axis.apply(config, v)?;
            Ok(SweepCell { value: v, report: run_benchmark(&c)? })
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-trial CSV.
pub fn write_trials_csv<W: Write>(mut w: W, results: &[TrialResult]) -> Result<()> {
    writeln!(w, "trial,seed,k,status,error_rate,abs_rms_error,error_rate_empirical,k_hat,lambda_hat,eta_hat,message")?;
    for r in results {
        match &r.outcome {
            TrialOutcome::Completed(s) => writeln!(
                w,
                "{},{},{},ok,{},{},{},{},{},{},",
                r.trial, r.seed, r.k_components, s.error_rate, s.abs_rms_error, s.error_rate_empirical, s.k_hat,
                s.lambda_hat, s.eta_hat
            )?,
            TrialOutcome::Failed(msg) => writeln!(
                w,
                "{},{},{},failed,,,,,,,{}",
                r.trial,
                r.seed,
                r.k_components,
                msg.replace([',', '\n'], ";")
            )?,
        }
    }
    Ok(())
}

/// Long-format per-threshold curves of completed trials.
pub fn write_curves_csv<W: Write>(mut w: W, results: &[TrialResult]) -> Result<()> {
    writeln!(w, "trial,threshold,p_true,p_estimated,p_empirical")?;
    for r in results {
        if let Some(s) = r.scores() {
            for i in 0..s.thresholds.len() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    r.trial, s.thresholds[i], s.true_risks[i], s.estimated_risks[i], s.empirical_risks[i]
                )?;
            }
        }
    }
    Ok(())
}

/// Histogram of completed error rates over `[0, max]` in `bins` bins.
pub fn write_histogram_csv<W: Write>(mut w: W, results: &[TrialResult], bins: usize) -> Result<()> {
    writeln!(w, "bin_lo,bin_hi,count")?;
    let errors: Vec<f64> = results.iter().filter_map(|r| r.error_rate()).collect();
    let max = errors.iter().copied().fold(0.0, f64::max);
    let bins = bins.max(1);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 / bins as f64 };
    let mut counts = vec![0usize; bins];
    for e in &errors {
        counts[((e / width) as usize).min(bins - 1)] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        writeln!(w, "{},{},{}", i as f64 * width, (i + 1) as f64 * width, c)?;
    }
    Ok(())
}

pub fn summary_json(summary: &Summary) -> String {
    serde_json::to_string_pretty(summary).expect("summary serializes")
}

/// `axis_value,trial,error_rate` rows of completed trials.
pub fn write_sweep_csv<W: Write>(mut w: W, cells: &[SweepCell]) -> Result<()> {
    writeln!(w, "axis_value,trial,error_rate")?;
    for cell in cells {
        for r in &cell.report.results {
            if let Some(e) = r.error_rate() {
                writeln!(w, "{},{},{}", cell.value, r.trial, e)?;
            }
        }
    }
    Ok(())
}

/// One summary row per sweep value.
pub fn write_sweep_summary_csv<W: Write>(mut w: W, cells: &[SweepCell]) -> Result<()> {
    writeln!(w, "axis_value,completed,failed,mean,median,p25,p75")?;
    for cell in cells {
        let s = &cell.report.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            cell.value,
            s.completed,
            s.failed,
            opt(s.mean),
            opt(s.median),
            opt(s.p25),
            opt(s.p75)
        )?;
    }
    Ok(())
}

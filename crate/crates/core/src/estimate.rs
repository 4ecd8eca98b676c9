//! The online overload-risk estimator.
//!
//! Stages, in order:
//!
//! 1. rate extraction from the lifecycle trace (`lambda_hat`, `eta_hat`);
//! 2. Erlang occupancy law from the estimated rates;
//! 3. single-slice density histogram, moving-average smoothing and
//!    prominence-based peak counting to pick the component count;
//! 4. one-dimensional K-means, one Gaussian per cluster;
//! 5. Monte-Carlo composition of the aggregate load over occupancy states
//!    and a second histogram/peaks/K-means pass on the pooled draws;
//! 6. risk readout from the re-fit aggregate mixture plus the atom at zero
//!    carried by the empty state.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GaussianComponent, TruncatedMixture};
use crate::queue::{self, BirthDeathRates, EventKind, LifecycleTrace};
use crate::seed;
use crate::simulate::{exceedance, ObservationSet};

/// Minimum number of births and of deaths needed to estimate rates.
pub const MIN_TRACE_EVENTS: usize = 10;
pub const MIN_PDF_SAMPLES: usize = 100;
pub const MIN_BINS: usize = 10;
pub const MIN_MC_PER_STATE: usize = 10_000;
/// Lower clamp on fitted component standard deviations.
pub const FITTED_STD_FLOOR: f64 = 1e-4;

/// Tunables of the estimator. Every field is optional in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub bins: usize,
    /// Moving-average window in bins (odd).
    pub window: usize,
    /// Minimum peak prominence as a fraction of the highest density.
    pub prominence: f64,
    /// Aggregate draws per occupancy state in the composition stage.
    pub mc_per_state: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bins: 100,
            window: 5,
            prominence: 0.05,
            mc_per_state: 10_000,
            restarts: 10,
            max_iter: 300,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < MIN_BINS {
            return Err(Error::validation(format!("bins must be at least {MIN_BINS}")));
        }
        if self.window % 2 == 0 || self.window > self.bins {
            return Err(Error::validation("window must be odd and at most the bin count"));
        }
        if !(self.prominence > 0.0 && self.prominence < 1.0) {
            return Err(Error::validation("prominence fraction must lie in (0, 1)"));
        }
        if self.mc_per_state < MIN_MC_PER_STATE {
            return Err(Error::validation(format!("mc_per_state must be at least {MIN_MC_PER_STATE}")));
        }
        if self.restarts < 1 || self.max_iter < 1 {
            return Err(Error::validation("restarts and max_iter must be positive"));
        }
        Ok(())
    }
}

/// Overload probability over an ascending grid of thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub thresholds: Vec<f64>,
    pub risks: Vec<f64>,
}

impl RiskCurve {
    pub fn new(thresholds: Vec<f64>, risks: Vec<f64>) -> Result<Self> {
        if thresholds.len() != risks.len() {
            return Err(Error::validation("threshold and risk vectors differ in length"));
        }
        if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::validation("thresholds must be sorted ascending"));
        }
        if risks.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::validation("risk values must lie in [0, 1]"));
        }
        if risks.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::validation("risk must be nonincreasing in threshold"));
        }
        Ok(RiskCurve { thresholds, risks })
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Writes `threshold,<column>` rows.
    pub fn write_csv<W: Write>(&self, mut w: W, column: &str) -> Result<()> {
        writeln!(w, "threshold,{column}")?;
        for (t, r) in self.thresholds.iter().zip(&self.risks) {
            writeln!(w, "{t},{r}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.starts_with("threshold,") => {}
            Some(Err(e)) => return Err(e.into()),
            _ => return Err(Error::Parse("missing risk CSV header".into())),
        }
        let mut thresholds = Vec::new();
        let mut risks = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (t, p) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad risk CSV row `{line}`")))?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{s}`")));
            thresholds.push(parse(t)?);
            risks.push(parse(p)?);
        }
        RiskCurve::new(thresholds, risks)
    }
}

/// Density histogram with uniform bins.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPdf {
    pub bin_edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl EmpiricalPdf {
    pub fn bin_width(&self) -> f64 {
        self.bin_edges[1] - self.bin_edges[0]
    }

    pub fn n_bins(&self) -> usize {
        self.densities.len()
    }

    pub fn mass(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.bin_width()
    }

    pub fn bin_centers(&self) -> impl Iterator<Item = f64> + '_ {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1]))
    }

    fn renormalized(mut self) -> Self {
        let mass = self.mass();
        if mass > 0.0 {
            for d in self.densities.iter_mut() {
                *d /= mass;
            }
        }
        self
    }
}

/// Maximum-likelihood birth and death rates from an observed trace.
///
/// Births are divided by the time spent below the cap (arrivals at the cap
/// are blocked and never observed); deaths by the integrated occupancy.
pub fn extract_rates(trace: &LifecycleTrace, n_max: usize) -> Result<(f64, f64)> {
    let births = trace.count(EventKind::Birth);
    let deaths = trace.count(EventKind::Death);
    if births < MIN_TRACE_EVENTS {
        return Err(Error::InsufficientTrace { kind: "birth", found: births, required: MIN_TRACE_EVENTS });
    }
    if deaths < MIN_TRACE_EVENTS {
        return Err(Error::InsufficientTrace { kind: "death", found: deaths, required: MIN_TRACE_EVENTS });
    }
    trace.validate(n_max)?;
    let mut unblocked = 0.0;
    let mut exposure = 0.0;
    for (state, dt) in trace.segments() {
        if state < n_max {
            unblocked += dt;
        }
        exposure += state as f64 * dt;
    }
    Ok((births as f64 / unblocked, deaths as f64 / exposure))
}

/// Density histogram of `samples` over `[0, 1.02 * max]`.
pub fn empirical_pdf(samples: &[f64], n_bins: usize) -> Result<EmpiricalPdf> {
    if samples.len() < MIN_PDF_SAMPLES {
        return Err(Error::InsufficientSamples { found: samples.len(), required: MIN_PDF_SAMPLES });
    }
    if n_bins < MIN_BINS {
        return Err(Error::validation(format!("need at least {MIN_BINS} bins, got {n_bins}")));
    }
    if samples.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::validation("load samples must be finite and nonnegative"));
    }
    let max = samples.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::validation("all load samples are zero"));
    }
    let upper = 1.02 * max;
    let width = upper / n_bins as f64;
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0usize; n_bins];
    for &x in samples {
        let idx = ((x / width) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    let scale = 1.0 / (samples.len() as f64 * width);
    let densities = counts.into_iter().map(|c| c as f64 * scale).collect();
    Ok(EmpiricalPdf { bin_edges, densities })
}

/// Centered moving average; edge bins average over the part of the window
/// that lies inside the histogram. The result is renormalized to mass 1.
pub fn smooth(pdf: &EmpiricalPdf, window: usize) -> Result<EmpiricalPdf> {
    let b = pdf.n_bins();
    if window % 2 == 0 || window < 1 || window > b {
        return Err(Error::validation(format!("window must be odd and in 1..={b}, got {window}")));
    }
    let half = window / 2;
    let densities = (0..b)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(b - 1);
            pdf.densities[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let out = EmpiricalPdf { bin_edges: pdf.bin_edges.clone(), densities };
    if window == 1 {
        return Ok(out);
    }
    Ok(out.renormalized())
}

/// Topographic prominence of the peak at `i`.
fn prominence(d: &[f64], i: usize) -> f64 {
    let h = d[i];
    let mut left_min = h;
    for &v in d[..i].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &d[i + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Interior strict local maxima with prominence at least
/// `prominence_frac * max density`. A flat top with strictly lower
/// neighbours on both sides counts once, at its middle bin.
pub fn peak_indices(pdf: &EmpiricalPdf, prominence_frac: f64) -> Vec<usize> {
    let d = &pdf.densities;
    if d.len() < 3 {
        return Vec::new();
    }
    let top = d.iter().copied().fold(0.0, f64::max);
    let floor = prominence_frac * top;
    let mut peaks = Vec::new();
    let mut i = 1;
    while i < d.len() - 1 {
        if d[i] > d[i - 1] {
            let mut j = i;
            while j + 1 < d.len() && d[j + 1] == d[i] {
                j += 1;
            }
            if j + 1 < d.len() && d[j + 1] < d[i] {
                let mid = (i + j) / 2;
                if prominence(d, mid) >= floor {
                    peaks.push(mid);
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

/// Estimated number of mixture components, at least 1.
pub fn detect_peaks(pdf: &EmpiricalPdf, prominence_frac: f64) -> usize {
    peak_indices(pdf, prominence_frac).len().max(1)
}

/// K-means settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions { restarts: 10, max_iter: 300 }
    }
}

/// Sorted samples with prefix sums, so a Lloyd step on the line costs
/// `O(k log n)`: for sorted centers every cluster is a contiguous run.
struct SortedData {
    x: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl SortedData {
    fn new(samples: &[f64]) -> Self {
        let mut x = samples.to_vec();
        x.sort_unstable_by(f64::total_cmp);
        let mut s1 = Vec::with_capacity(x.len() + 1);
        let mut s2 = Vec::with_capacity(x.len() + 1);
        s1.push(0.0);
        s2.push(0.0);
        for v in &x {
            s1.push(s1.last().unwrap() + v);
            s2.push(s2.last().unwrap() + v * v);
        }
        SortedData { x, s1, s2 }
    }

    fn len(&self) -> usize {
        self.x.len()
    }

    fn mean(&self, lo: usize, hi: usize) -> f64 {
        (self.s1[hi] - self.s1[lo]) / (hi - lo) as f64
    }

    fn sse(&self, lo: usize, hi: usize) -> f64 {
        let n = (hi - lo) as f64;
        let s = self.s1[hi] - self.s1[lo];
        (self.s2[hi] - self.s2[lo] - s * s / n).max(0.0)
    }

    /// Cluster boundaries `[0, b_1, .., n]` for ascending centers.
    fn boundaries(&self, centers: &[f64], out: &mut Vec<usize>) {
        out.clear();
        out.push(0);
        for w in centers.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            out.push(self.x.partition_point(|&v| v <= mid));
        }
        out.push(self.x.len());
    }
}

/// k-means++ seeding.
fn seed_centers<R: Rng + ?Sized>(data: &SortedData, k: usize, rng: &mut R) -> Vec<f64> {
    let x = &data.x;
    let mut centers = Vec::with_capacity(k);
    centers.push(x[rng.random_range(0..x.len())]);
    let mut d2: Vec<f64> = x.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let idx = d2
                .iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or(x.len() - 1);
            x[idx]
        } else {
            // Every point coincides with a center; the restart will collapse.
            centers[0]
        };
        centers.push(next);
        for (d, v) in d2.iter_mut().zip(x) {
            *d = d.min((v - next).powi(2));
        }
    }
    centers.sort_unstable_by(f64::total_cmp);
    centers
}

/// One Lloyd run from `centers`. Returns final boundaries and the
/// within-cluster sum of squares, or `None` if a cluster drops below two
/// members.
fn lloyd(data: &SortedData, mut centers: Vec<f64>, max_iter: usize) -> Option<(Vec<usize>, f64)> {
    let mut bounds = Vec::with_capacity(centers.len() + 1);
    let mut prev: Vec<usize> = Vec::new();
    for _ in 0..max_iter {
        data.boundaries(&centers, &mut bounds);
        if bounds.windows(2).any(|w| w[1] - w[0] < 2) {
            return None;
        }
        if bounds == prev {
            break;
        }
        for (c, w) in centers.iter_mut().zip(bounds.windows(2)) {
            *c = data.mean(w[0], w[1]);
        }
        std::mem::swap(&mut prev, &mut bounds);
    }
    if prev.is_empty() {
        prev = bounds;
    }
    let wcss = prev.windows(2).map(|w| data.sse(w[0], w[1])).sum();
    Some((prev, wcss))
}

fn mixture_from_clusters(data: &SortedData, bounds: &[usize]) -> Result<TruncatedMixture> {
    let n = data.len() as f64;
    let comps = bounds
        .windows(2)
        .map(|w| {
            let run = &data.x[w[0]..w[1]];
            let m = run.len() as f64;
            let mean = run.iter().sum::<f64>() / m;
            let var = if run.len() > 1 {
                run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            GaussianComponent::new(m / n, mean, var.sqrt().max(FITTED_STD_FLOOR))
        })
        .collect();
    TruncatedMixture::from_unnormalized(comps)
}

/// Fits a `k`-component truncated mixture by one-dimensional K-means.
///
/// Restarts that collapse a cluster below two members are discarded; when
/// every restart collapses, `k` is reduced by one and the fit retried.
pub fn fit_mixture<R: RngCore + ?Sized>(
    samples: &[f64],
    k: usize,
    opts: KMeansOptions,
    rng: &mut R,
) -> Result<TruncatedMixture> {
    if k < 1 {
        return Err(Error::validation("k must be at least 1"));
    }
    if samples.len() < 10 * k {
        return Err(Error::InsufficientSamples { found: samples.len(), required: 10 * k });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("samples must be finite"));
    }
    if opts.restarts < 1 || opts.max_iter < 1 {
        return Err(Error::validation("restarts and max_iter must be positive"));
    }
    let data = SortedData::new(samples);
    let base = rng.next_u64();
    for k in (1..=k).rev() {
        if k == 1 {
            return mixture_from_clusters(&data, &[0, data.len()]);
        }
        let branch = seed::derive(base, k as u64);
        let best = (0..opts.restarts)
            .filter_map(|r| {
                let mut s = seed::child_stream(branch, r as u64);
                let centers = seed_centers(&data, k, &mut s);
                lloyd(&data, centers, opts.max_iter)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((bounds, _)) = best {
            return mixture_from_clusters(&data, &bounds);
        }
    }
    unreachable!("k = 1 always fits")
}

/// Aggregate load law produced by composition and re-fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    /// Probability of the empty state (aggregate load exactly 0).
    pub zero_mass: f64,
    /// Re-fit mixture for the nonempty states; `None` when they carry no mass.
    pub mixture: Option<TruncatedMixture>,
    /// Pooled aggregate draws, sorted ascending.
    pub pool: Vec<f64>,
}

impl Composition {
    /// Risk read from the pooled draws instead of the re-fit mixture.
    pub fn empirical_risk(&self, thresholds: &[f64]) -> Result<RiskCurve> {
        let active = 1.0 - self.zero_mass;
        let risks = if self.pool.is_empty() {
            thresholds.iter().map(|&t| if t < 0.0 { 1.0 } else { 0.0 }).collect()
        } else {
            exceedance(&self.pool, thresholds)
                .into_iter()
                .zip(thresholds)
                .map(|(p, &t)| {
                    let atom = if t < 0.0 { self.zero_mass } else { 0.0 };
                    (active * p + atom).clamp(0.0, 1.0)
                })
                .collect()
        };
        RiskCurve::new(thresholds.to_vec(), risks)
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::validation("occupancy vector needs at least two states"));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::validation("occupancy probabilities must be nonnegative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("occupancy probabilities sum to {total}")));
    }
    Ok(())
}

/// Integer pool allocation proportional to `weights` (largest remainder).
fn allocate(weights: &[f64], total: usize) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / wsum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Monte-Carlo composition of the aggregate load and its mixture re-fit.
pub fn compose_and_refit<R: RngCore + ?Sized>(
    slice_mixture: &TruncatedMixture,
    occupancy_probs: &[f64],
    config: &PipelineConfig,
    rng: &mut R,
) -> Result<Composition> {
    config.validate()?;
    check_probs(occupancy_probs)?;
    let n_max = occupancy_probs.len() - 1;
    let zero_mass = occupancy_probs[0];
    let base = rng.next_u64();
    let active = &occupancy_probs[1..];
    if active.iter().all(|&p| p == 0.0) {
        return Ok(Composition { zero_mass, mixture: None, pool: Vec::new() });
    }

    let mc = config.mc_per_state;
    let batches: Vec<Vec<f64>> = (1..=n_max)
        .into_par_iter()
        .map(|n| {
            if occupancy_probs[n] == 0.0 {
                return Vec::new();
            }
            let mut s = seed::child_stream(base, n as u64);
            (0..mc).map(|_| slice_mixture.sample_sum(&mut s, n)).collect()
        })
        .collect();

    let counts = allocate(active, n_max * mc);
    let mut extra = seed::child_stream(base, 0);
    let mut pool = Vec::with_capacity(n_max * mc);
    for (batch, &count) in batches.iter().zip(&counts) {
        if count <= batch.len() {
            pool.extend_from_slice(&batch[..count]);
        } else {
            pool.extend_from_slice(batch);
            for _ in batch.len()..count {
                pool.push(batch[extra.random_range(0..batch.len())]);
            }
        }
    }
    pool.sort_unstable_by(f64::total_cmp);

    let hist = smooth(&empirical_pdf(&pool, config.bins)?, config.window)?;
    let k = detect_peaks(&hist, config.prominence).min(2 * n_max);
    let opts = KMeansOptions { restarts: config.restarts, max_iter: config.max_iter };
    let mixture = fit_mixture(&pool, k, opts, &mut seed::child_stream(base, n_max as u64 + 1))?;
    Ok(Composition { zero_mass, mixture: Some(mixture), pool })
}

/// Everything the estimator learned from one observation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub k_hat: usize,
    pub lambda_hat: f64,
    pub eta_hat: f64,
    pub n_max: usize,
    pub occupancy_probs: Vec<f64>,
    pub slice_mixture: TruncatedMixture,
    /// Re-fit aggregate law of the nonempty states; `null` if the pool is
    /// always empty.
    pub aggregate_mixture: Option<TruncatedMixture>,
}

impl FittedModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

/// `risk(t) = (1 - P0) * tail(aggregate, t)`; the empty state is an atom at 0.
pub fn risk_from_model(model: &FittedModel, thresholds: &[f64]) -> Result<RiskCurve> {
    check_probs(&model.occupancy_probs)?;
    let p0 = model.occupancy_probs[0];
    let risks = thresholds
        .iter()
        .map(|&t| {
            let atom = if t < 0.0 { p0 } else { 0.0 };
            let body = match &model.aggregate_mixture {
                Some(m) => (1.0 - p0) * m.tail_prob(t),
                None => 0.0,
            };
            (atom + body).clamp(0.0, 1.0)
        })
        .collect();
    RiskCurve::new(thresholds.to_vec(), risks)
}

/// Output of [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub model: FittedModel,
    /// Risk from the re-fit aggregate mixture.
    pub curve: RiskCurve,
    /// Risk read directly from the pooled Monte-Carlo draws, for comparison.
    pub empirical_curve: RiskCurve,
}

/// Runs every estimation stage on one observation set.
pub fn run_pipeline<R: RngCore + ?Sized>(
    obs: &ObservationSet,
    n_max: usize,
    thresholds: &[f64],
    config: &PipelineConfig,
    rng: &mut R,
) -> Result<PipelineOutput> {
    config.validate()?;
    if thresholds.is_empty() || thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::validation("thresholds must be nonempty and sorted ascending"));
    }
    let base = rng.next_u64();

    let (lambda_hat, eta_hat) = extract_rates(&obs.trace, n_max).map_err(|e| e.in_stage("extract_rates"))?;
    let occupancy_probs = BirthDeathRates::new(lambda_hat, eta_hat, n_max)
        .and_then(|r| queue::stationary_distribution(&r))
        .map_err(|e| e.in_stage("erlang"))?;

    let raw = empirical_pdf(&obs.load_samples, config.bins).map_err(|e| e.in_stage("empirical_pdf"))?;
    let smoothed = smooth(&raw, config.window).map_err(|e| e.in_stage("smooth"))?;
    let k_hat = detect_peaks(&smoothed, config.prominence);
    let opts = KMeansOptions { restarts: config.restarts, max_iter: config.max_iter };
    let slice_mixture = fit_mixture(&obs.load_samples, k_hat, opts, &mut seed::child_stream(base, 0))
        .map_err(|e| e.in_stage("fit_mixture"))?;

    let composition = compose_and_refit(&slice_mixture, &occupancy_probs, config, &mut seed::child_stream(base, 1))
        .map_err(|e| e.in_stage("compose_and_refit"))?;

    let model = FittedModel {
        k_hat,
        lambda_hat,
        eta_hat,
        n_max,
        occupancy_probs,
        slice_mixture,
        aggregate_mixture: composition.mixture.clone(),
    };
    let curve = risk_from_model(&model, thresholds).map_err(|e| e.in_stage("risk"))?;
    let empirical_curve = composition.empirical_risk(thresholds).map_err(|e| e.in_stage("risk"))?;
    Ok(PipelineOutput { model, curve, empirical_curve })
}

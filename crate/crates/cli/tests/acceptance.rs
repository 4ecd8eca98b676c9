//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run a subset by naming criteria: `cargo test --test acceptance -- A1 A4`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use slicerisk::bench::{self, BenchConfig, SweepAxis};
use slicerisk::estimate::{detect_peaks, empirical_pdf, fit_mixture, smooth, KMeansOptions, PipelineConfig};
use slicerisk::queue::{simulate_lifecycle, stationary_distribution, InitialState};
use slicerisk::simulate::{self, random_scenario, MixtureRanges};
use slicerisk::{seed, BirthDeathRates, GaussianComponent, TruncatedMixture};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    bench::quantile(&s, 0.5).unwrap_or(f64::NAN)
}

fn a1() -> Verdict {
    let cases: Vec<(f64, f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let mut r = seed::child_stream(0xA1, i);
            let rates = BirthDeathRates::new(
                r.random_range(0.1..20.0),
                r.random_range(0.2..5.0),
                r.random_range(1..=10),
            )
            .unwrap();
            let p = stationary_distribution(&rates).unwrap();
            let residual = (0..rates.n_max)
                .map(|n| (rates.lambda * p[n] - (n + 1) as f64 * rates.eta * p[n + 1]).abs())
                .fold(0.0, f64::max);
            let trace =
                simulate_lifecycle(&rates, 1e4 / rates.eta, InitialState::Stationary, &mut r).unwrap();
            let h = trace.occupancy_histogram(rates.n_max);
            let tv = 0.5 * p.iter().zip(&h).map(|(a, b)| (a - b).abs()).sum::<f64>();
            (residual, tv, rates.load())
        })
        .collect();
    let worst_res = cases.iter().map(|c| c.0).fold(0.0, f64::max);
    let worst_tv = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    verdict(
        worst_res < 1e-12 && worst_tv < 0.02,
        format!("20 configs, max balance residual {worst_res:.2e}, max TV {worst_tv:.4}"),
    )
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
}

fn pdf_mass(m: &TruncatedMixture) -> f64 {
    let mut cuts = vec![0.0, m.max_mean() + 12.0 * m.max_std()];
    for c in m.components() {
        for j in -6..=6 {
            let x = c.mean + j as f64 * c.std;
            if x > cuts[0] && x < cuts[1] {
                cuts.push(x);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.windows(2).map(|w| simpson(&|x| m.pdf(x), w[0], w[1], 1e-12)).sum()
}

fn ks_distance(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn a2() -> Verdict {
    let res: Vec<(f64, f64)> = (0..50u64)
        .into_par_iter()
        .map(|i| {
            let mut r = seed::child_stream(0xA2, i);
            let m = MixtureRanges::default().sample(&mut r).unwrap();
            let mass_err = (pdf_mass(&m) - 1.0).abs();
            let mut x = m.sample(&mut r, 100_000).unwrap();
            (mass_err, ks_distance(&mut x, |t| m.cdf(t)))
        })
        .collect();
    let mass = res.iter().map(|r| r.0).fold(0.0, f64::max);
    let ks = res.iter().map(|r| r.1).fold(0.0, f64::max);
    verdict(mass < 1e-6 && ks < 0.01, format!("50 mixtures, max mass error {mass:.2e}, max KS {ks:.4}"))
}

fn a3() -> Verdict {
    let cfg = BenchConfig::default();
    let grid = cfg.grid().unwrap();
    let m = simulate::ACCEPTANCE_MC_SAMPLES;
    let mut worst = 0.0f64;
    let mut misses = 0;
    for i in 0..10u64 {
        let spec = random_scenario(&mut seed::child_stream(0xA3, i), &cfg.ranges(), cfg.rates().unwrap(), cfg.r_max)
            .unwrap();
        let st = simulate::stratified_overload_risk(&spec, &grid, m, &mut seed::child_stream(0xA30, i)).unwrap();
        let di = simulate::direct_overload_risk(&spec, &grid, m, &mut seed::child_stream(0xA31, i)).unwrap();
        for j in 0..grid.len() {
            // Direct-draw error evaluated at the far more precise stratified value.
            let p = st.curve.risks[j];
            let se_direct = (p * (1.0 - p) / m as f64).sqrt();
            let se = (st.std_errors[j].powi(2) + se_direct.powi(2)).sqrt();
            let diff = (p - di.curve.risks[j]).abs();
            if diff > 0.0 {
                let z = if se > 0.0 { diff / se } else { f64::INFINITY };
                worst = worst.max(z);
                if z > 3.0 {
                    misses += 1;
                }
            }
        }
    }
    verdict(
        misses == 0,
        format!("10 scenarios x {} thresholds, max |diff|/se {worst:.2}, {misses} beyond 3 se", grid.len()),
    )
}

/// Mixture whose adjacent means are at least `6 * max std` apart.
fn separated_mixture(i: u64) -> TruncatedMixture {
    let mut r = seed::child_stream(0xA4, i);
    let k = r.random_range(2..=4);
    let smax: f64 = r.random_range(0.02..=0.05);
    let mut mean: f64 = r.random_range(0.2..0.4);
    let comps: Vec<GaussianComponent> = (0..k)
        .map(|j| {
            if j > 0 {
                mean += 6.0 * smax + r.random_range(0.0..0.1);
            }
            let std = if j == 0 { smax } else { r.random_range(0.5 * smax..=smax) };
            GaussianComponent::new(1.0 - r.random_range(0.0..0.8), mean, std)
        })
        .collect();
    TruncatedMixture::from_unnormalized(comps).unwrap()
}

fn a4() -> Verdict {
    let cfg = PipelineConfig::default();
    let fails: Vec<String> = (0..20u64)
        .into_par_iter()
        .filter_map(|i| {
            let truth = separated_mixture(i);
            let x = truth.sample(&mut seed::child_stream(0xA40, i), 5000).unwrap();
            let pdf = smooth(&empirical_pdf(&x, cfg.bins).unwrap(), cfg.window).unwrap();
            let k = detect_peaks(&pdf, cfg.prominence);
            if k != truth.len() {
                return Some(format!("case {i}: {k} peaks, want {} in {:?}", truth.len(), truth.components()));
            }
            let fit = fit_mixture(&x, k, KMeansOptions::default(), &mut seed::child_stream(0xA41, i)).unwrap();
            for (a, b) in fit.components().iter().zip(truth.components()) {
                if (a.mean - b.mean).abs() > 0.01 || (a.weight - b.weight).abs() > 0.05 {
                    return Some(format!("case {i}: fitted {a:?} vs true {b:?}"));
                }
            }
            None
        })
        .collect();
    let detail = match fails.first() {
        None => "20 cases, all K recovered, means within 0.01, weights within 0.05".to_string(),
        Some(f) => format!("{} of 20 cases failed; first: {f}", fails.len()),
    };
    verdict(fails.is_empty(), detail)
}

fn a5() -> Verdict {
    let report = bench::run_benchmark(&BenchConfig::default()).unwrap();
    let s = &report.summary;
    let med = s.median.unwrap_or(f64::NAN);
    verdict(
        s.failure_rate() <= 0.05 && med <= 0.25,
        format!(
            "{} trials, {} failed, median error rate {med:.4} (p25 {:.4}, p75 {:.4}; pooled-sample readout median {:.4})",
            s.trials,
            s.failed,
            s.p25.unwrap_or(f64::NAN),
            s.p75.unwrap_or(f64::NAN),
            s.median_empirical.unwrap_or(f64::NAN)
        ),
    )
}

fn a6() -> Verdict {
    let sizes = [500usize, 5000, 50_000];
    let results: Vec<Vec<bench::TrialResult>> = (0..20usize)
        .into_par_iter()
        .map(|i| {
            let seed = bench::trial_seed(0xA6, i);
            sizes
                .iter()
                .map(|&n| bench::run_trial(&BenchConfig { n_obs: n, ..BenchConfig::default() }, i, seed))
                .collect()
        })
        .collect();
    let rows: Vec<Vec<f64>> =
        results.iter().map(|r| r.iter().map(|t| t.error_rate().unwrap_or(f64::NAN)).collect()).collect();
    let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
    let meds: Vec<f64> = (0..3).map(|j| median(&col(j))).collect();
    let pooled: Vec<String> = (0..3)
        .map(|j| {
            let v: Vec<f64> = results.iter().filter_map(|r| r[j].scores()).map(|s| s.error_rate_empirical).collect();
            format!("{:.4}", median(&v))
        })
        .collect();
    let monotone = rows.iter().filter(|r| r[1] <= r[0] && r[2] <= r[1]).count();
    let failed = rows.iter().flatten().filter(|e| e.is_nan()).count();
    verdict(
        failed == 0 && meds[2] < meds[0] && monotone >= 16,
        format!(
            "medians at n_obs 500/5000/50000: {:.4}/{:.4}/{:.4}; nonincreasing in {monotone} of 20; {failed} failed trials; pooled-sample readout medians {}",
            meds[0],
            meds[1],
            meds[2],
            pooled.join("/")
        ),
    )
}

fn a7(out: &Path) -> Verdict {
    let c = BenchConfig { trials: 30, master_seed: 0xA7, ..BenchConfig::default() };
    let ks: Vec<f64> = (1..=8).map(f64::from).collect();
    let cells = bench::sensitivity_sweep(&c, SweepAxis::ComponentCount, &ks).unwrap();
    let meds: Vec<f64> = cells.iter().map(|cell| cell.report.summary.median.unwrap_or(f64::NAN)).collect();
    let inversions = meds.windows(2).filter(|w| !(w[1] >= w[0])).count();

    let std_cfg = BenchConfig { oracle_mc_samples: simulate::ROUTINE_MC_SAMPLES, ..c.clone() };
    let std_cells = bench::sensitivity_sweep(&std_cfg, SweepAxis::StdScale, &[0.25, 0.5, 1.0, 2.0, 4.0]).unwrap();
    std::fs::create_dir_all(out).unwrap();
    for (name, cells) in [("component_count", &cells), ("std_scale", &std_cells)] {
        let mut f = std::fs::File::create(out.join(format!("sweep_{name}.csv"))).unwrap();
        bench::write_sweep_summary_csv(&mut f, cells).unwrap();
    }
    let std_meds: Vec<String> = std_cells
        .iter()
        .map(|cell| format!("{}:{:.4}", cell.value, cell.report.summary.median.unwrap_or(f64::NAN)))
        .collect();
    let fmt: Vec<String> = meds.iter().map(|m| format!("{m:.4}")).collect();
    verdict(
        inversions <= 1,
        format!(
            "k=1..8 medians [{}], {inversions} inversions; std_scale medians (not gated) [{}]; data in {}",
            fmt.join(", "),
            std_meds.join(", "),
            out.display()
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn cli_session(root: &Path, threads: Option<&str>) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_slicerisk");
    let cfg = root.join("bench.json");
    std::fs::write(&cfg, r#"{"trials": 4, "n_obs": 1000, "oracle_mc_samples": 20000, "master_seed": 8}"#)
        .map_err(|e| e.to_string())?;
    let s = |p: &str| root.join(p).display().to_string();
    let cfg = cfg.display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["scenario".into(), "--seed".into(), "3".into(), "--out".into(), s("scn")],
        vec!["simulate".into(), "--scenario".into(), s("scn/scenario.json"), "--seed".into(), "4".into(), "--out".into(), s("obs")],
        vec!["estimate".into(), "--obs".into(), s("obs"), "--n-max".into(), "10".into(), "--seed".into(), "5".into(), "--out".into(), s("est")],
        vec!["oracle".into(), "--scenario".into(), s("scn/scenario.json"), "--mc-samples".into(), "20000".into(), "--seed".into(), "6".into(), "--out".into(), s("orc")],
        vec!["bench".into(), "--config".into(), cfg.clone(), "--out".into(), s("bench")],
        vec!["sweep".into(), "--config".into(), cfg, "--axis".into(), "component_count".into(), "--values".into(), "1,3".into(), "--trials".into(), "2".into(), "--out".into(), s("sweep")],
    ];
    for args in steps {
        let mut cmd = Command::new(bin);
        if let Some(t) = threads {
            cmd.args(["--threads", t]);
        }
        let out = cmd.args(&args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
        }
    }
    std::fs::remove_file(root.join("bench.json")).map_err(|e| e.to_string())?;
    Ok(())
}

fn a8() -> Verdict {
    let runs = [None, None, Some("8")];
    let mut snaps = Vec::new();
    for t in runs {
        let dir = tempfile::tempdir().unwrap();
        if let Err(e) = cli_session(dir.path(), t) {
            return verdict(false, e);
        }
        snaps.push(snapshot(dir.path()));
    }
    let n = snaps[0].len();
    let same = snaps.windows(2).all(|w| w[0] == w[1]);
    verdict(same && n == 13, format!("{n} output files per run, identical across 3 runs (one with --threads 8): {same}"))
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("A1", Box::new(a1)),
        ("A2", Box::new(a2)),
        ("A3", Box::new(a3)),
        ("A4", Box::new(a4)),
        ("A5", Box::new(a5)),
        ("A6", Box::new(a6)),
        ("A7", Box::new(move || a7(&out))),
        ("A8", Box::new(a8)),
    ];
    let mut failed = Vec::new();
    for (name, run) in &criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == name) {
            continue;
        }
        let t = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("{name} {status} [{:.1}s] {}", t.elapsed().as_secs_f64(), v.detail);
        if !v.pass {
            failed.push(*name);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}

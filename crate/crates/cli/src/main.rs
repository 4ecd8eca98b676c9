//! `slicerisk` command-line interface.
//!
//! Exit codes: 0 on success, 1 on validation or I/O errors, 2 when a
//! benchmark or sweep has too many failed trials.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use slicerisk::bench::{self, BenchConfig, SweepAxis, ThresholdGrid};
use slicerisk::estimate::{self, PipelineConfig};
use slicerisk::simulate::{self, MixtureRanges, ObservationSet, ScenarioSpec};
use slicerisk::{seed, LifecycleTrace};

#[derive(Debug, Parser)]
#[command(name = "slicerisk", version, about = "Overload-risk simulation and estimation for sliced networks")]
struct Cli {
    /// Worker threads; affects speed only, never results.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a random scenario from a benchmark config's generator.
    Scenario {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate observations (loads.csv, trace.csv) for a scenario.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 5000)]
        n_obs: usize,
        /// Lifecycle observation time; defaults to 1000 / eta.
        #[arg(long)]
        horizon: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the overload-risk curve from observations.
    Estimate {
        /// Directory holding loads.csv and trace.csv.
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        n_max: usize,
        /// Pipeline config JSON; every field optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Ground-truth overload-risk curve for a scenario.
    Oracle {
        #[arg(long)]
        scenario: PathBuf,
        /// Monte-Carlo draws per occupancy state.
        #[arg(long, default_value_t = simulate::ACCEPTANCE_MC_SAMPLES)]
        mc_samples: usize,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Randomized benchmark: trials.csv, curves.csv, summary.json, histogram.csv.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Sensitivity sweep over one scenario parameter: sweep.csv, sweep_summary.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// component_count, mean_scale or std_scale.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Threshold grid as lo:hi:steps; defaults to 41 points on [0.5, 1.5] * r_max.
    #[arg(long)]
    grid: Option<String>,
    /// Capacity used for the default grid.
    #[arg(long)]
    r_max: Option<f64>,
}

impl GridArgs {
    fn points(&self, fallback_r_max: f64) -> Result<Vec<f64>> {
        let grid = match &self.grid {
            Some(s) => {
                let parts: Vec<&str> = s.split(':').collect();
                let [lo, hi, steps] = parts[..] else {
                    bail!("--grid expects lo:hi:steps, got `{s}`");
                };
                ThresholdGrid::Range { lo: lo.parse()?, hi: hi.parse()?, steps: steps.parse()? }
            }
            None => ThresholdGrid::around(self.r_max.unwrap_or(fallback_r_max)),
        };
        Ok(grid.points()?)
    }
}

/// Failure that maps to exit code 2.
#[derive(Debug)]
struct ExcessiveFailures(String);

impl std::fmt::Display for ExcessiveFailures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ExcessiveFailures {}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn bench_config(path: Option<&Path>, trials: Option<usize>, seed: Option<u64>) -> Result<BenchConfig> {
    let mut c = match path {
        Some(p) => read_json::<BenchConfig>(p)?,
        None => BenchConfig::default(),
    };
    if let Some(t) = trials {
        c.trials = t;
    }
    if let Some(s) = seed {
        c.master_seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let mut w = create(dir, name)?;
    writeln!(w, "{text}")?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Scenario { config, common } => {
            let c = bench_config(config.as_deref(), None, None)?;
            let ranges = MixtureRanges { k: c.k_components, mean_range: c.mean_range, std_range: c.std_range };
            let spec = simulate::random_scenario(&mut seed::stream(common.seed), &ranges, c.rates()?, c.r_max)?;
            write_text(&common.out, "scenario.json", &spec.to_json())?;
        }
        Command::Simulate { scenario, n_obs, horizon, common } => {
            let spec: ScenarioSpec = read_json(&scenario)?;
            let horizon = horizon.unwrap_or_else(|| simulate::default_horizon(&spec.rates));
            let obs = simulate::observe(&spec, n_obs, horizon, &mut seed::stream(common.seed))?;
            let mut w = create(&common.out, "loads.csv")?;
            obs.write_loads_csv(&mut w)?;
            w.flush()?;
            let mut w = create(&common.out, "trace.csv")?;
            obs.trace.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::Estimate { obs, n_max, config, grid, common } => {
            let cfg = match config {
                Some(p) => read_json::<PipelineConfig>(&p)?,
                None => PipelineConfig::default(),
            };
            let open = |name: &str| -> Result<BufReader<File>> {
                let p = obs.join(name);
                Ok(BufReader::new(File::open(&p).with_context(|| format!("opening {}", p.display()))?))
            };
            let observations = ObservationSet {
                trace: LifecycleTrace::read_csv(open("trace.csv")?)?,
                load_samples: ObservationSet::read_loads_csv(open("loads.csv")?)?,
            };
            let thresholds = grid.points(5.0)?;
            let out = estimate::run_pipeline(&observations, n_max, &thresholds, &cfg, &mut seed::stream(common.seed))?;
            write_text(&common.out, "model.json", &out.model.to_json())?;
            let mut w = create(&common.out, "risk.csv")?;
            out.curve.write_csv(&mut w, "p_overload_estimated")?;
            w.flush()?;
            let mut w = create(&common.out, "risk_empirical.csv")?;
            out.empirical_curve.write_csv(&mut w, "p_overload_empirical")?;
            w.flush()?;
        }
        Command::Oracle { scenario, mc_samples, grid, common } => {
            let spec: ScenarioSpec = read_json(&scenario)?;
            let thresholds = grid.points(spec.r_max)?;
            let curve = simulate::true_overload_risk(&spec, &thresholds, mc_samples, &mut seed::stream(common.seed))?;
            let mut w = create(&common.out, "risk_true.csv")?;
            curve.write_csv(&mut w, "p_overload")?;
            w.flush()?;
        }
        Command::Bench { config, trials, seed, out } => {
            let c = bench_config(config.as_deref(), trials, seed)?;
            let report = bench::run_benchmark(&c)?;
            let mut w = create(&out, "trials.csv")?;
            bench::write_trials_csv(&mut w, &report.results)?;
            w.flush()?;
            let mut w = create(&out, "curves.csv")?;
            bench::write_curves_csv(&mut w, &report.results)?;
            w.flush()?;
            let mut w = create(&out, "histogram.csv")?;
            bench::write_histogram_csv(&mut w, &report.results, 20)?;
            w.flush()?;
            write_text(&out, "summary.json", &bench::summary_json(&report.summary))?;
            let s = &report.summary;
            eprintln!(
                "{} trials, {} failed, median error rate {}",
                s.trials,
                s.failed,
                s.median.map_or("n/a".to_string(), |m| format!("{m:.4}"))
            );
            if s.excessive_failures() {
                return Err(ExcessiveFailures(format!("{} of {} trials failed", s.failed, s.trials)).into());
            }
        }
        Command::Sweep { config, axis, values, trials, seed, out } => {
            let c = bench_config(config.as_deref(), trials, seed)?;
            let axis: SweepAxis = axis.parse()?;
            let cells = bench::sensitivity_sweep(&c, axis, &values)?;
            let mut w = create(&out, "sweep.csv")?;
            bench::write_sweep_csv(&mut w, &cells)?;
            w.flush()?;
            let mut w = create(&out, "sweep_summary.csv")?;
            bench::write_sweep_summary_csv(&mut w, &cells)?;
            w.flush()?;
            let bad: Vec<String> = cells
                .iter()
                .filter(|cell| cell.report.summary.excessive_failures())
                .map(|cell| cell.value.to_string())
                .collect();
            if !bad.is_empty() {
                return Err(ExcessiveFailures(format!("excessive trial failures at {}", bad.join(", "))).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ExcessiveFailures>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

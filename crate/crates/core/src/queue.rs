//! Slice occupancy as a capped birth-death process.
//!
//! Admitted slice requests arrive as a Poisson stream with rate `lambda`;
//! each active slice is released after an exponential lifetime with rate
//! `eta`. At most `n_max` slices are active and arrivals at the cap are lost,
//! so the occupancy is an M/M/c/c loss system with `c = n_max`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BirthDeathRates {
    /// Effective (admitted) arrival rate.
    pub lambda: f64,
    /// Per-slice release rate; mean lifetime is `1 / eta`.
    pub eta: f64,
    pub n_max: usize,
}

impl BirthDeathRates {
    pub fn new(lambda: f64, eta: f64, n_max: usize) -> Result<Self> {
        let r = BirthDeathRates { lambda, eta, n_max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::validation(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::validation(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.n_max < 1 {
            return Err(Error::validation("n_max must be at least 1"));
        }
        Ok(())
    }

    /// Offered load `lambda / eta`.
    pub fn load(&self) -> f64 {
        self.lambda / self.eta
    }
}

/// Erlang loss distribution `P_0..=P_{n_max}`.
///
/// The truncated Poisson weights `a^n / n!` are built by the recursion
/// `w_n = w_{n-1} * a / n`, rescaling whenever a weight grows past a large
/// bound so the computation stays finite for very large offered loads.
pub fn stationary_distribution(rates: &BirthDeathRates) -> Result<Vec<f64>> {
    rates.validate()?;
    let a = rates.load();
    let mut w = Vec::with_capacity(rates.n_max + 1);
    w.push(1.0_f64);
    for n in 1..=rates.n_max {
        let next = w[n - 1] * a / n as f64;
        w.push(next);
        if next > 1e250 {
            for v in w.iter_mut() {
                *v /= next;
            }
        }
    }
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Birth,
    Death,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Birth => "birth",
            EventKind::Death => "death",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "birth" => Ok(EventKind::Birth),
            "death" => Ok(EventKind::Death),
            other => Err(Error::Parse(format!("unknown event kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub timestamp: f64,
    pub kind: EventKind,
    /// Occupancy right after the event.
    pub occupancy: usize,
}

/// Observed slice lifecycle over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleTrace {
    pub initial_occupancy: usize,
    pub events: Vec<LifecycleEvent>,
    pub horizon: f64,
}

impl LifecycleTrace {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn max_occupancy(&self) -> usize {
        self.events
            .iter()
            .map(|e| e.occupancy)
            .fold(self.initial_occupancy, usize::max)
    }

    /// Piecewise-constant occupancy as `(state, duration)` segments.
    pub fn segments(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let mut prev_t = 0.0;
        let mut state = self.initial_occupancy;
        self.events
            .iter()
            .map(Some)
            .chain(std::iter::once(None))
            .map(move |e| match e {
                Some(ev) => {
                    let seg = (state, ev.timestamp - prev_t);
                    prev_t = ev.timestamp;
                    state = ev.occupancy;
                    seg
                }
                None => (state, self.horizon - prev_t),
            })
    }

    /// Fraction of time spent in each state `0..=n_max`.
    pub fn occupancy_histogram(&self, n_max: usize) -> Vec<f64> {
        let mut h = vec![0.0; n_max + 1];
        for (state, dt) in self.segments() {
            if state <= n_max {
                h[state] += dt;
            }
        }
        for v in h.iter_mut() {
            *v /= self.horizon;
        }
        h
    }

    /// Checks ordering, the ±1 step rule and the occupancy cap.
    pub fn validate(&self, n_max: usize) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::validation("trace horizon must be positive"));
        }
        if self.initial_occupancy > n_max {
            return Err(Error::validation("initial occupancy exceeds n_max"));
        }
        let mut prev_t = 0.0;
        let mut state = self.initial_occupancy;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.timestamp > prev_t || (i == 0 && e.timestamp >= 0.0)) || e.timestamp > self.horizon {
                return Err(Error::validation(format!("event {i}: timestamp out of order")));
            }
            let expected = match e.kind {
                EventKind::Birth => state + 1,
                EventKind::Death if state > 0 => state - 1,
                EventKind::Death => {
                    return Err(Error::validation(format!("event {i}: death at occupancy 0")))
                }
            };
            if e.occupancy != expected || e.occupancy > n_max {
                return Err(Error::validation(format!(
                    "event {i}: occupancy {} inconsistent with previous state {state}",
                    e.occupancy
                )));
            }
            prev_t = e.timestamp;
            state = e.occupancy;
        }
        Ok(())
    }

    /// Writes `timestamp,kind,occupancy` rows, framed by a `start` row at
    /// time 0 carrying the initial occupancy and an `end` row at the horizon.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "timestamp,kind,occupancy")?;
        writeln!(w, "0,start,{}", self.initial_occupancy)?;
        let mut last = self.initial_occupancy;
        for e in &self.events {
            writeln!(w, "{},{},{}", e.timestamp, e.kind, e.occupancy)?;
            last = e.occupancy;
        }
        writeln!(w, "{},end,{}", self.horizon, last)?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "timestamp,kind,occupancy" => {}
            Some(Err(e)) => return Err(e.into()),
            _ => return Err(Error::Parse("missing trace CSV header".into())),
        }
        let mut initial = None;
        let mut horizon = None;
        let mut events = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("trace CSV line {}: `{line}`", lineno + 2));
            let mut parts = line.split(',');
            let (t, kind, occ) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(t), Some(k), Some(o), None) => (t, k, o),
                _ => return Err(bad()),
            };
            let t: f64 = t.parse().map_err(|_| bad())?;
            let occ: usize = occ.parse().map_err(|_| bad())?;
            match kind {
                "start" => initial = Some(occ),
                "end" => horizon = Some(t),
                k => events.push(LifecycleEvent {
                    timestamp: t,
                    kind: k.parse()?,
                    occupancy: occ,
                }),
            }
        }
        Ok(LifecycleTrace {
            initial_occupancy: initial.ok_or_else(|| Error::Parse("trace CSV lacks a start row".into()))?,
            events,
            horizon: horizon.ok_or_else(|| Error::Parse("trace CSV lacks an end row".into()))?,
        })
    }
}

/// Where a simulated trace starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialState {
    /// Drawn from the stationary distribution, so the trace is stationary.
    #[default]
    Stationary,
    Empty,
}

/// Simulates the occupancy chain over `[0, horizon]`.
pub fn simulate_lifecycle<R: Rng + ?Sized>(
    rates: &BirthDeathRates,
    horizon: f64,
    start: InitialState,
    rng: &mut R,
) -> Result<LifecycleTrace> {
    rates.validate()?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::validation(format!("horizon must be > 0, got {horizon}")));
    }
    let initial = match start {
        InitialState::Empty => 0,
        InitialState::Stationary => {
            let p = stationary_distribution(rates)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            p.iter()
                .position(|&pn| {
                    acc += pn;
                    u < acc
                })
                .unwrap_or(rates.n_max)
        }
    };

    let mut events = Vec::new();
    let mut n = initial;
    let mut t = 0.0;
    loop {
        let birth = if n < rates.n_max { rates.lambda } else { 0.0 };
        let death = n as f64 * rates.eta;
        let total = birth + death;
        if total <= 0.0 {
            break;
        }
        let dt: f64 = Exp1.sample(rng);
        t += dt / total;
        if t > horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * total;
        let kind = if u < birth {
            n += 1;
            EventKind::Birth
        } else {
            n -= 1;
            EventKind::Death
        };
        events.push(LifecycleEvent {
            timestamp: t,
            kind,
            occupancy: n,
        });
    }
    Ok(LifecycleTrace {
        initial_occupancy: initial,
        events,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn no_arrivals_means_empty() {
        let r = BirthDeathRates::new(0.0, 0.7, 10).unwrap();
        let p = stationary_distribution(&r).unwrap();
        assert_eq!(p.len(), 11);
        assert_eq!(p[0], 1.0);
        assert!(p[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn small_erlang_vectors() {
        let p = stationary_distribution(&BirthDeathRates::new(1.0, 1.0, 1).unwrap()).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = stationary_distribution(&BirthDeathRates::new(3.0, 1.5, 2).unwrap()).unwrap();
        for (got, want) in p.iter().zip([0.2, 0.4, 0.4]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_load_stays_finite() {
        let r = BirthDeathRates::new(1e3, 1.0, 10).unwrap();
        let p = stationary_distribution(&r).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Detailed balance in ratio form: P_{n+1}/P_n = a/(n+1).
        assert!((p[10] / p[9] - 100.0).abs() < 1e-9);

        let r = BirthDeathRates::new(1e300, 1e-5, 400).unwrap();
        let p = stationary_distribution(&r).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[400] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_rates() {
        assert!(BirthDeathRates::new(1.0, 0.0, 3).is_err());
        assert!(BirthDeathRates::new(1.0, -1.0, 3).is_err());
        assert!(BirthDeathRates::new(-1.0, 1.0, 3).is_err());
        assert!(BirthDeathRates::new(1.0, 1.0, 0).is_err());
        let raw = BirthDeathRates { lambda: 1.0, eta: 0.0, n_max: 2 };
        assert!(stationary_distribution(&raw).is_err());
    }

    #[test]
    fn zero_lambda_trace_is_empty() {
        let r = BirthDeathRates::new(0.0, 1.0, 5).unwrap();
        let t = simulate_lifecycle(&r, 100.0, InitialState::Stationary, &mut seed::stream(1)).unwrap();
        assert!(t.events.is_empty());
        assert_eq!(t.initial_occupancy, 0);
    }

    #[test]
    fn trace_respects_cap_and_steps() {
        let r = BirthDeathRates::new(20.0, 1.0, 4).unwrap();
        let t = simulate_lifecycle(&r, 500.0, InitialState::Empty, &mut seed::stream(2)).unwrap();
        assert!(t.max_occupancy() <= 4);
        assert_eq!(t.max_occupancy(), 4);
        t.validate(4).unwrap();
        let again = simulate_lifecycle(&r, 500.0, InitialState::Empty, &mut seed::stream(2)).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn time_average_matches_erlang() {
        let r = BirthDeathRates::new(3.0, 1.0, 10).unwrap();
        let t = simulate_lifecycle(&r, 1e4, InitialState::Stationary, &mut seed::stream(5)).unwrap();
        let emp = t.occupancy_histogram(10);
        let p = stationary_distribution(&r).unwrap();
        let tv: f64 = 0.5 * emp.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.02, "tv = {tv}");
    }

    #[test]
    fn csv_round_trip() {
        let r = BirthDeathRates::new(2.0, 0.5, 3).unwrap();
        let t = simulate_lifecycle(&r, 50.0, InitialState::Stationary, &mut seed::stream(9)).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,kind,occupancy\n0,start,"));
        let back = LifecycleTrace::read_csv(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn validate_rejects_bad_steps() {
        let t = LifecycleTrace {
            initial_occupancy: 1,
            events: vec![LifecycleEvent { timestamp: 1.0, kind: EventKind::Birth, occupancy: 3 }],
            horizon: 2.0,
        };
        assert!(t.validate(5).is_err());
        let t = LifecycleTrace {
            initial_occupancy: 0,
            events: vec![LifecycleEvent { timestamp: 1.0, kind: EventKind::Death, occupancy: 0 }],
            horizon: 2.0,
        };
        assert!(t.validate(5).is_err());
    }
}

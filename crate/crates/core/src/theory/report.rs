use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::SeedSpec;

/// Which side of the bound counts as a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtMost,
    AtLeast,
    /// Strictly greater.
    Exceeds,
}

impl Direction {
    pub fn holds(self, measured: f64, bound: f64) -> bool {
        match self {
            Direction::AtMost => measured <= bound,
            Direction::AtLeast => measured >= bound,
            Direction::Exceeds => measured > bound,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    /// CSV spelling: `true`, `false` or `na`.
    pub fn as_csv(self) -> &'static str {
        match self {
            Verdict::Pass => "true",
            Verdict::Fail => "false",
            Verdict::NotApplicable => "na",
        }
    }

    /// Not-applicable counts as not failed.
    pub fn is_failure(self) -> bool {
        self == Verdict::Fail
    }
}

/// The parts of the experiment configuration a check depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub tau: Option<f64>,
    pub delta: Option<f64>,
    pub omega: Option<f64>,
}

impl CheckConfig {
    pub fn network(depth: usize, width: usize, tau: f64) -> Self {
        Self {
            depth: Some(depth),
            width: Some(width),
            tau: Some(tau),
            ..Self::default()
        }
    }

    pub fn with_data(mut self, n: usize, d: usize) -> Self {
        self.n = Some(n);
        self.d = Some(d);
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = Some(delta);
        self
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = Some(omega);
        self
    }
}

/// Outcome of one bound check.
///
/// `measured` is the scalar compared against `bound`; per-layer detail and
/// secondary quantities (standard errors, contrast bounds, raw values
/// before normalization) go in `per_layer` and `extras`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub check_name: String,
    pub config: CheckConfig,
    pub measured: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_layer: Vec<f64>,
    pub bound: f64,
    pub direction: Direction,
    /// `measured / bound`, always finite.
    pub slack: f64,
    pub trials: usize,
    pub verdict: Verdict,
    pub seed: Option<SeedSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, f64>,
}

fn finite_slack(measured: f64, bound: f64) -> f64 {
    if measured == 0.0 {
        return 0.0;
    }
    let s = measured / bound;
    if s.is_nan() {
        0.0
    } else {
        s.clamp(-f64::MAX, f64::MAX)
    }
}

impl BoundReport {
    pub fn new(
        check_name: &str,
        config: CheckConfig,
        measured: f64,
        bound: f64,
        direction: Direction,
        trials: usize,
    ) -> Self {
        let ok = measured.is_finite() && direction.holds(measured, bound);
        Self {
            check_name: check_name.to_string(),
            config,
            measured,
            per_layer: Vec::new(),
            bound,
            direction,
            slack: finite_slack(measured, bound),
            trials,
            verdict: Verdict::from_bool(ok),
            seed: None,
            extras: BTreeMap::new(),
        }
    }

    /// A report for a degenerate input where the inequality says nothing.
    pub fn not_applicable(check_name: &str, config: CheckConfig, measured: f64, trials: usize) -> Self {
        let mut r = Self::new(check_name, config, measured, 0.0, Direction::AtMost, trials);
        r.slack = 0.0;
        r.verdict = Verdict::NotApplicable;
        r
    }

    pub fn with_seed(mut self, seed: &SeedSpec) -> Self {
        self.seed = Some(seed.clone());
        self
    }

    pub fn with_per_layer(mut self, values: Vec<f64>) -> Self {
        self.per_layer = values;
        self
    }

    pub fn with_extra(mut self, key: &str, value: f64) -> Self {
        self.extras.insert(key.to_string(), value);
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn extra(&self, key: &str) -> Option<f64> {
        self.extras.get(key).copied()
    }
}

/// Worst case over a batch of reports of the same check.
///
/// `measured` is the largest value for upper bounds and the smallest for
/// lower bounds, trials add up, and the verdict fails if any input failed.
/// Not-applicable inputs are skipped; if all are, so is the result.
pub fn worst_case(check_name: &str, reports: &[BoundReport]) -> Option<BoundReport> {
    let live: Vec<&BoundReport> = reports
        .iter()
        .filter(|r| r.verdict != Verdict::NotApplicable)
        .collect();
    let trials = reports.iter().map(|r| r.trials).sum();
    let first = reports.first()?;
    if live.is_empty() {
        let mut r = first.clone();
        r.check_name = check_name.to_string();
        r.trials = trials;
        return Some(r);
    }
    let upper = first.direction == Direction::AtMost;
    let worst = live
        .iter()
        .copied()
        .reduce(|a, b| {
            let take_b = if upper {
                b.slack > a.slack
            } else {
                b.slack < a.slack
            };
            if take_b {
                b
            } else {
                a
            }
        })
        .expect("non-empty");
    let mut out = worst.clone();
    out.check_name = check_name.to_string();
    out.trials = trials;
    if live.iter().any(|r| r.verdict.is_failure()) {
        out.verdict = Verdict::Fail;
    }
    Some(out)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const CSV_HEADER: [&str; 13] = [
    "check_name",
    "L",
    "m",
    "n",
    "d",
    "tau",
    "omega",
    "trials",
    "measured",
    "bound",
    "slack",
    "pass",
    "seed",
];

pub fn write_reports_csv<W: Write>(reports: &[BoundReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        let c = &r.config;
        w.write_record([
            r.check_name.clone(),
            opt(c.depth),
            opt(c.width),
            opt(c.n),
            opt(c.d),
            opt(c.tau),
            opt(c.omega),
            r.trials.to_string(),
            r.measured.to_string(),
            r.bound.to_string(),
            r.slack.to_string(),
            r.verdict.as_csv().to_string(),
            opt(r.seed.as_ref()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reports_json<W: Write>(reports: &[BoundReport], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, reports)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_follows_direction() {
        let c = CheckConfig::default();
        assert!(BoundReport::new("x", c.clone(), 1.0, 2.0, Direction::AtMost, 1).passed());
        assert!(!BoundReport::new("x", c.clone(), 3.0, 2.0, Direction::AtMost, 1).passed());
        assert!(BoundReport::new("x", c.clone(), 2.0, 2.0, Direction::AtLeast, 1).passed());
        assert!(!BoundReport::new("x", c.clone(), 2.0, 2.0, Direction::Exceeds, 1).passed());
        assert!(!BoundReport::new("x", c, f64::NAN, 2.0, Direction::AtMost, 1).passed());
    }

    #[test]
    fn slack_is_always_finite() {
        let c = CheckConfig::default();
        assert_eq!(BoundReport::new("x", c.clone(), 0.0, 0.0, Direction::AtMost, 1).slack, 0.0);
        assert!(BoundReport::new("x", c.clone(), 1.0, 0.0, Direction::AtMost, 1).slack.is_finite());
        assert_eq!(BoundReport::new("x", c, 1.0, 4.0, Direction::AtMost, 1).slack, 0.25);
    }

    #[test]
    fn worst_case_picks_largest_slack_and_sums_trials() {
        let c = CheckConfig::default();
        let rs = vec![
            BoundReport::new("x", c.clone(), 1.0, 2.0, Direction::AtMost, 3),
            BoundReport::new("x", c.clone(), 1.5, 2.0, Direction::AtMost, 2),
            BoundReport::not_applicable("x", c, 0.0, 1),
        ];
        let w = worst_case("agg", &rs).unwrap();
        assert_eq!(w.measured, 1.5);
        assert_eq!(w.trials, 6);
        assert!(w.passed());
        assert!(worst_case("agg", &[]).is_none());
    }

    #[test]
    fn csv_has_fixed_header_and_na() {
        let rs = vec![
            BoundReport::new("a", CheckConfig::network(4, 8, 0.5), 1.0, 2.0, Direction::AtMost, 1)
                .with_seed(&SeedSpec::with_labels(7, &[1])),
            BoundReport::not_applicable("b", CheckConfig::default(), 0.0, 1),
        ];
        let mut buf = Vec::new();
        write_reports_csv(&rs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "check_name,L,m,n,d,tau,omega,trials,measured,bound,slack,pass,seed");
        assert_eq!(lines[1], "a,4,8,,,0.5,,1,1,2,0.5,true,7:1");
        assert!(lines[2].ends_with(",na,"));
    }

    #[test]
    fn json_roundtrip() {
        let r = BoundReport::new("a", CheckConfig::network(4, 8, 0.5), 1.0, 2.0, Direction::AtMost, 1)
            .with_extra("naive", 45.5)
            .with_per_layer(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_reports_json(std::slice::from_ref(&r), &mut buf).unwrap();
        let back: Vec<BoundReport> = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, vec![r]);
    }
}

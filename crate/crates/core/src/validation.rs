//! Normality checks for per-minute flow data: ingestion, slot pooling,
//! equiprobable-bin χ² tests, linear-combination tests for site pairs and
//! cumulative p-value curves.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};

use crate::error::{parameter, Error, Result};
use crate::stats::{chi2_sf, normal_quantile};

/// Smallest sample size that is tested.
pub const MIN_SAMPLE: usize = 90;
pub const BINS: usize = 10;
/// `BINS − 1 − 2` fitted parameters.
pub const DEGREES_OF_FREEDOM: f64 = 7.0;

/// Coefficient pairs `(α, β)` of the linear-combination tests.
pub const PAIRS: [(f64, f64); 10] = [
    (2.0, -2.0),
    (2.0, -1.0),
    (2.0, -0.5),
    (2.0, 0.5),
    (2.0, 1.0),
    (2.0, 2.0),
    (-1.0, 2.0),
    (-0.5, 2.0),
    (0.5, 2.0),
    (1.0, 2.0),
];

/// Per-minute readings of one site; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowSeries {
    pub site: String,
    pub times: Vec<NaiveDateTime>,
    pub flows: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestReport {
    pub rows: usize,
    pub accepted: usize,
    pub missing: usize,
    /// Skipped rows: unparsable, negative flow or repeated timestamp.
    pub malformed: usize,
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_local());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim().to_ascii_lowercase().as_str(), "" | "na" | "nan" | "null")
}

/// Reads `site,timestamp,flow` rows (a header row is expected).
pub fn ingest_reader<R: Read>(input: R) -> Result<(Vec<FlowSeries>, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let mut report = IngestReport::default();
    let mut by_site: BTreeMap<String, BTreeMap<NaiveDateTime, Option<f64>>> = BTreeMap::new();
    for rec in rdr.records() {
        report.rows += 1;
        let rec = match rec {
            Ok(r) if r.len() >= 3 => r,
            _ => {
                report.malformed += 1;
                continue;
            }
        };
        let Some(t) = parse_time(&rec[1]) else {
            report.malformed += 1;
            continue;
        };
        let flow = if is_missing(&rec[2]) {
            None
        } else {
            match rec[2].trim().parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => Some(v),
                _ => {
                    report.malformed += 1;
                    continue;
                }
            }
        };
        let site = by_site.entry(rec[0].trim().to_string()).or_default();
        if site.contains_key(&t) {
            report.malformed += 1;
            continue;
        }
        site.insert(t, flow);
        if flow.is_some() {
            report.accepted += 1;
        } else {
            report.missing += 1;
        }
    }
    let series = by_site
        .into_iter()
        .map(|(site, obs)| {
            let (times, flows) = obs.into_iter().unzip();
            FlowSeries { site, times, flows }
        })
        .collect();
    Ok((series, report))
}

pub fn ingest(path: &Path) -> Result<(Vec<FlowSeries>, IngestReport)> {
    ingest_reader(std::fs::File::open(path)?)
}

/// Daily window, slot width and excluded weekdays.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotOptions {
    /// Slot width (min).
    pub tau: u32,
    /// Window start, minutes after midnight.
    pub start_minute: u32,
    /// Window end (exclusive).
    pub end_minute: u32,
    pub exclude: Vec<Weekday>,
}

impl SlotOptions {
    /// 4 am to 11 am, Fridays and weekends dropped.
    pub fn new(tau: u32) -> Result<Self> {
        if ![1, 2, 5, 10, 20].contains(&tau) {
            return parameter(format!("slot width must be one of 1, 2, 5, 10, 20 minutes, got {tau}"));
        }
        Ok(Self { tau, start_minute: 240, end_minute: 660, exclude: vec![Weekday::Fri, Weekday::Sat, Weekday::Sun] })
    }

    pub fn slots(&self) -> usize {
        (self.end_minute - self.start_minute).div_ceil(self.tau) as usize
    }
}

/// Readings of one slot pooled across days, keyed by `(day, minute)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSample {
    pub slot: usize,
    /// Slot start, minutes after midnight.
    pub start_minute: u32,
    pub tau: u32,
    pub keys: Vec<(NaiveDate, u32)>,
    pub values: Vec<f64>,
}

impl SlotSample {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Pools the per-minute readings of each slot over the retained days.
pub fn slot_samples(series: &FlowSeries, opts: &SlotOptions) -> Vec<SlotSample> {
    let mut out: Vec<SlotSample> = (0..opts.slots())
        .map(|k| SlotSample {
            slot: k,
            start_minute: opts.start_minute + k as u32 * opts.tau,
            tau: opts.tau,
            keys: Vec::new(),
            values: Vec::new(),
        })
        .collect();
    for (t, f) in series.times.iter().zip(&series.flows) {
        let Some(v) = f else { continue };
        if opts.exclude.contains(&t.weekday()) {
            continue;
        }
        let minute = t.hour() * 60 + t.minute();
        if minute < opts.start_minute || minute >= opts.end_minute {
            continue;
        }
        let k = ((minute - opts.start_minute) / opts.tau) as usize;
        out[k].keys.push((t.date(), minute));
        out[k].values.push(*v);
    }
    out
}

/// Keeps the observations present in both samples, in key order.
pub fn align_samples(a: &SlotSample, b: &SlotSample) -> (SlotSample, SlotSample) {
    let bm: BTreeMap<_, _> = b.keys.iter().copied().zip(b.values.iter().copied()).collect();
    let mut a2 = SlotSample { keys: Vec::new(), values: Vec::new(), ..a.clone() };
    let mut b2 = SlotSample { keys: Vec::new(), values: Vec::new(), ..b.clone() };
    let mut pairs: Vec<_> = a.keys.iter().zip(&a.values).filter_map(|(k, v)| bm.get(k).map(|w| (*k, *v, *w))).collect();
    pairs.sort_by_key(|x| x.0);
    for (k, v, w) in pairs {
        a2.keys.push(k);
        a2.values.push(v);
        b2.keys.push(k);
        b2.values.push(w);
    }
    (a2, b2)
}

/// Outcome of one χ² test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
    /// Fitted mean and standard deviation (maximum likelihood).
    pub mean: f64,
    pub std: f64,
}

/// Interior bin edges of the fitted normal, `μ + σ·Φ⁻¹(k/10)`.
pub fn decile_edges(mean: f64, std: f64) -> [f64; BINS - 1] {
    std::array::from_fn(|k| mean + std * normal_quantile((k + 1) as f64 / BINS as f64))
}

/// Bin occupation; a value on an edge goes to the upper bin.
pub fn bin_counts(sample: &[f64], edges: &[f64; BINS - 1]) -> [usize; BINS] {
    let mut counts = [0usize; BINS];
    for &x in sample {
        counts[edges.partition_point(|&e| e <= x)] += 1;
    }
    counts
}

/// `Σ (O − E)² / E` with `E = n / 10`, and its χ² p-value.
pub fn chi2_statistic(counts: &[usize; BINS]) -> (f64, f64) {
    let n: usize = counts.iter().sum();
    let e = n as f64 / BINS as f64;
    let stat = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum::<f64>();
    (stat, chi2_sf(stat, DEGREES_OF_FREEDOM).clamp(0.0, 1.0))
}

/// Equiprobable-bin χ² normality test; `None` below [`MIN_SAMPLE`].
pub fn chi2_normality(sample: &[f64]) -> Option<TestResult> {
    let n = sample.len();
    if n < MIN_SAMPLE {
        return None;
    }
    let mean = sample.iter().sum::<f64>() / n as f64;
    let std = (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let (statistic, p_value) = chi2_statistic(&bin_counts(sample, &decile_edges(mean, std)));
    Some(TestResult { n, statistic, p_value, mean, std })
}

/// Coefficients `(α, β)` with the test of `αX_i + βX_j`.
pub type PairResult = ((f64, f64), Option<TestResult>);

/// χ² test of `αX_i + βX_j` for every pair in [`PAIRS`].
pub fn linear_combination_tests(xi: &SlotSample, xj: &SlotSample) -> Result<Vec<PairResult>> {
    if xi.keys != xj.keys {
        return Err(Error::Parameter(format!(
            "samples of slot {} are not aligned ({} vs {} observations)",
            xi.slot,
            xi.len(),
            xj.len()
        )));
    }
    Ok(PAIRS
        .iter()
        .map(|&(a, b)| {
            let z: Vec<f64> = xi.values.iter().zip(&xj.values).map(|(x, y)| a * x + b * y).collect();
            ((a, b), chi2_normality(&z))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PBucket {
    /// `[0, 0.01)`
    Strong,
    /// `[0.01, 0.05)`
    Moderate,
    /// `[0.05, 0.5)`
    Weak,
    /// `[0.5, 1]`
    None,
}

impl PBucket {
    pub fn of(p: f64) -> Self {
        if p < 0.01 {
            PBucket::Strong
        } else if p < 0.05 {
            PBucket::Moderate
        } else if p < 0.5 {
            PBucket::Weak
        } else {
            PBucket::None
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PBucket::Strong => "0-0.01",
            PBucket::Moderate => "0.01-0.05",
            PBucket::Weak => "0.05-0.5",
            PBucket::None => "0.5-1",
        }
    }
}

/// Running sums of the p-values with the bucket of each increment.
pub fn cumulative_pvalue_curve(p_values: &[f64]) -> Vec<(f64, PBucket)> {
    let mut acc = 0.0;
    p_values
        .iter()
        .map(|&p| {
            acc += p;
            (acc, PBucket::of(p))
        })
        .collect()
}

/// One row of the validation output.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub site: String,
    pub slot_start_minute: u32,
    pub tau: u32,
    /// `"univariate"` or `"α;β"`.
    pub test: String,
    pub result: Option<TestResult>,
}

/// Writes result rows with the cumulative p-value per `(site, tau, test)`
/// group; skipped tests leave their statistic empty and add nothing.
pub fn write_results_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["site", "slot_start", "tau_min", "test", "n", "statistic", "p_value", "cumulative_p", "bucket"])?;
    let mut acc: BTreeMap<(String, u32, String), f64> = BTreeMap::new();
    for r in rows {
        let slot = format!("{:02}:{:02}", r.slot_start_minute / 60, r.slot_start_minute % 60);
        let c = acc.entry((r.site.clone(), r.tau, r.test.clone())).or_insert(0.0);
        let tau = r.tau.to_string();
        match r.result {
            Some(t) => {
                *c += t.p_value;
                w.write_record([
                    r.site.as_str(),
                    &slot,
                    &tau,
                    &r.test,
                    &t.n.to_string(),
                    &format!("{:.10e}", t.statistic),
                    &format!("{:.10e}", t.p_value),
                    &format!("{:.10e}", c),
                    PBucket::of(t.p_value).label(),
                ])?;
            }
            None => w.write_record([r.site.as_str(), &slot, &tau, &r.test, "", "", "", &format!("{:.10e}", c), "skipped"])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// `"α;β"` label of a pair.
pub fn pair_label((a, b): (f64, f64)) -> String {
    format!("{a};{b}")
}

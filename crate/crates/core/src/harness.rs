//! Experiments over the synthetic world.
//!
//! * [`evaluate_offline`] scores a policy on held-out attributed bookings.
//! * [`run_closed_loop`] serves one arm day by day, simulating bookings and
//!   retraining on matured data every night.
//! * [`compare_policies`] replays the same search and intent stream for
//!   several arms and reports paired deltas against the first arm.
//! * [`emit_plot_data`] writes the per-day series as CSV and sampled bounds as
//!   JSON lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurizer::SearchRequest;
use crate::geo::{box_size_km, BoundingBox};
use crate::model::{fit_estimator, Estimator, TrainConfig, TrainingExample};
use crate::policy::{
    build_stats_table, FixedBounds, HeuristicConfig, McConfig, Policy, SigmaMode, UncertaintyEstimate,
    DEFAULT_CONTAINMENT, DEFAULT_LAMBDA, DEFAULT_MC_SAMPLES, DEFAULT_STATS_EXPANSION,
};
use crate::simworld::{
    attribute, daily_searches, is_mature, simulate_booking, BookingEvent, EventLog, GridIndex, IntentDraw,
    LoggedSearch, World, WorldConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Observations behind the recall figure.
    pub n: usize,
    pub booked_location_recall: f64,
    pub mean_bounds_size_km: f64,
    pub mean_listings_retrieved: f64,
    pub mean_sigma: Option<f64>,
    pub booking_conversion: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct BoxTally {
    boxes: usize,
    size_sum_km: f64,
    listings_sum: f64,
    sigma_sum: f64,
    sigma_n: usize,
}

impl BoxTally {
    fn add(&mut self, b: &BoundingBox, index: &GridIndex, u: Option<&UncertaintyEstimate>) {
        self.boxes += 1;
        self.size_sum_km += box_size_km(b).wh_sum_km;
        self.listings_sum += index.count_in_box(b) as f64;
        if let Some(u) = u {
            self.sigma_sum += u.mean_sigma();
            self.sigma_n += 1;
        }
    }

    fn mean_sigma(&self) -> Option<f64> {
        (self.sigma_n > 0).then(|| self.sigma_sum / self.sigma_n as f64)
    }
}

/// Scores `policy` on held-out examples: is the booked point inside the
/// bounds served for the attributed request?
pub fn evaluate_offline(policy: &Policy, heldout: &[TrainingExample], index: &GridIndex) -> Result<Metrics> {
    if heldout.is_empty() {
        return Err(Error::Empty("held-out examples"));
    }
    let mut tally = BoxTally::default();
    let mut contained = 0usize;
    for ex in heldout {
        let served = policy.serve(&ex.request)?;
        contained += usize::from(served.bounds.contains(ex.booked));
        tally.add(&served.bounds, index, served.uncertainty.as_ref());
    }
    let n = heldout.len() as f64;
    Ok(Metrics {
        n: heldout.len(),
        booked_location_recall: contained as f64 / n,
        mean_bounds_size_km: tally.size_sum_km / n,
        mean_listings_retrieved: tally.listings_sum / n,
        mean_sigma: tally.mean_sigma(),
        booking_conversion: None,
    })
}

/// Serves every search of `days` with `policy` and records the bookings.
pub fn generate_log(world: &World, days: std::ops::Range<u32>, policy: &Policy) -> Result<EventLog> {
    let mut log = EventLog::default();
    for day in days {
        for (i, req) in daily_searches(world, day).into_iter().enumerate() {
            let served = policy.bounds(&req)?;
            let intent = IntentDraw::sample(world, &req, i as u32)?;
            if let Some(b) = simulate_booking(world, &req, &served, &intent) {
                log.bookings.push(b);
            }
            log.searches.push(LoggedSearch { request: req, served });
        }
    }
    Ok(log)
}

/// Attributed examples split by search day: before `heldout_from` for
/// training, from it on for evaluation.
pub fn split_examples(log: &EventLog, heldout_from: u32) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    attribute(&log.searches, &log.bookings)
        .into_iter()
        .partition(|e| e.request.search_day_index < heldout_from)
}

pub fn write_examples<W: Write>(examples: &[TrainingExample], mut w: W) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io("<examples>", e))?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<examples>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: TrainingExample =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("example line {}: {e}", n + 1)))?;
        e.request.validate()?;
        out.push(e);
    }
    Ok(out)
}

pub fn save_examples(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_examples(examples, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_examples(path: &Path) -> Result<Vec<TrainingExample>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_examples(BufReader::new(f))
}

fn default_containment() -> f64 {
    DEFAULT_CONTAINMENT
}
fn default_expansion() -> f64 {
    DEFAULT_STATS_EXPANSION
}
fn default_samples() -> usize {
    DEFAULT_MC_SAMPLES
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmSpec {
    Heuristic,
    Stats {
        #[serde(default = "default_containment")]
        containment: f64,
        #[serde(default = "default_expansion")]
        expansion: f64,
    },
    MlMean {
        #[serde(default = "default_samples")]
        n_samples: usize,
    },
    Ucb {
        #[serde(default = "default_samples")]
        n_samples: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        sigma_mode: SigmaMode,
    },
    World,
    Degenerate,
}

impl ArmSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match *self {
            ArmSpec::Stats { containment, expansion } => {
                if !(containment > 0.0 && containment <= 1.0) || !(expansion > 0.0) {
                    return bad(format!("stats arm needs containment in (0, 1] and expansion > 0, got {containment}, {expansion}"));
                }
            }
            ArmSpec::MlMean { n_samples } if n_samples < 2 => {
                return bad("MC sample count must be >= 2".into());
            }
            ArmSpec::Ucb { n_samples, lambda, .. } => {
                if n_samples < 2 || !(lambda >= 0.0) {
                    return bad(format!("ucb arm needs n_samples >= 2 and lambda >= 0, got {n_samples}, {lambda}"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn learns(&self) -> bool {
        matches!(self, ArmSpec::Stats { .. } | ArmSpec::MlMean { .. } | ArmSpec::Ucb { .. })
    }

    fn uses_model(&self) -> bool {
        matches!(self, ArmSpec::MlMean { .. } | ArmSpec::Ucb { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub name: String,
    #[serde(flatten)]
    pub spec: ArmSpec,
}

impl ArmConfig {
    pub fn new(name: &str, spec: ArmSpec) -> Self {
        ArmConfig { name: name.to_string(), spec }
    }
}

/// Policy for `spec` after learning from `examples`, or `None` when the
/// spec learns and there is nothing to learn from yet.
pub fn build_policy(
    spec: &ArmSpec,
    heuristic: &HeuristicConfig,
    examples: &[TrainingExample],
    train: &TrainConfig,
) -> Result<Option<Policy>> {
    spec.validate()?;
    if spec.learns() && examples.is_empty() {
        return Ok(None);
    }
    let model = |examples: &[TrainingExample]| -> Result<Arc<Estimator>> {
        Ok(Arc::new(fit_estimator(examples, train)?.0))
    };
    Ok(Some(match *spec {
        ArmSpec::Heuristic => Policy::Heuristic(*heuristic),
        ArmSpec::Stats { containment, expansion } => Policy::Stats {
            table: Arc::new(build_stats_table(
                examples.iter().map(|e| (e.request.location_id.as_str(), e.booked, e.request.center)),
            )?),
            containment,
            expansion,
            fallback: *heuristic,
        },
        ArmSpec::MlMean { n_samples } => Policy::MlMean { model: model(examples)?, n_samples },
        ArmSpec::Ucb { n_samples, lambda, sigma_mode } => Policy::McDropoutUcb {
            model: model(examples)?,
            mc: McConfig { n_samples, lambda, sigma_mode },
        },
        ArmSpec::World => Policy::Fixed(FixedBounds::World),
        ArmSpec::Degenerate => Policy::Fixed(FixedBounds::Degenerate),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Days served by the arm's own policy.
    pub days: u32,
    /// Days served by the cold-start heuristic before the arm takes over.
    pub warmup_days: u32,
    /// Training window in days.
    pub window_days: u32,
    /// Destinations with at most this many bookings during warm-up count as tail.
    pub tail_max_bookings: usize,
    /// Searches per day kept for the bounds dump.
    pub sample_requests: usize,
    pub heuristic: HeuristicConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            days: 60,
            warmup_days: 14,
            window_days: 365,
            tail_max_bookings: 2,
            sample_requests: 5,
            heuristic: HeuristicConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days == 0 || self.window_days == 0 {
            return Err(Error::InvalidConfig("days and window_days must be >= 1".into()));
        }
        Ok(())
    }
}

/// Raw per-day counts for one arm; metrics are derived from them so sums
/// over days stay exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    /// 1-based day of the arm's own policy.
    pub day: u32,
    pub searches: usize,
    /// Searches whose guest would have booked given unbounded retrieval.
    pub reachable: usize,
    pub bookings: usize,
    pub tail_bookings: usize,
    pub size_sum_km: f64,
    pub listings_sum: f64,
    pub sigma_sum: f64,
    pub sigma_n: usize,
    /// Examples the policy serving this day was trained on.
    pub train_examples: usize,
    pub stream_hash: String,
}

impl DayRecord {
    pub fn metrics(&self) -> Metrics {
        metrics_of(std::slice::from_ref(self))
    }
}

fn metrics_of(days: &[DayRecord]) -> Metrics {
    let sum = |f: fn(&DayRecord) -> f64| days.iter().map(f).sum::<f64>();
    let searches = sum(|d| d.searches as f64).max(1.0);
    let reachable = sum(|d| d.reachable as f64);
    let sigma_n = sum(|d| d.sigma_n as f64);
    Metrics {
        n: reachable as usize,
        booked_location_recall: if reachable > 0.0 { sum(|d| d.bookings as f64) / reachable } else { 0.0 },
        mean_bounds_size_km: sum(|d| d.size_sum_km) / searches,
        mean_listings_retrieved: sum(|d| d.listings_sum) / searches,
        mean_sigma: (sigma_n > 0.0).then(|| sum(|d| d.sigma_sum) / sigma_n),
        booking_conversion: Some(sum(|d| d.bookings as f64) / searches),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSample {
    pub day: u32,
    pub arm: String,
    pub request: SearchRequest,
    pub bounds: BoundingBox,
    pub uncertainty: Option<UncertaintyEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: ArmConfig,
    pub days: Vec<DayRecord>,
    pub tail_destinations: Vec<String>,
    pub samples: Vec<BoundsSample>,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

impl ArmReport {
    pub fn totals(&self) -> Metrics {
        metrics_of(&self.days)
    }

    pub fn bookings(&self) -> usize {
        self.days.iter().map(|d| d.bookings).sum()
    }

    pub fn tail_bookings(&self) -> usize {
        self.days.iter().map(|d| d.tail_bookings).sum()
    }

    pub fn mean_sigma_on(&self, day: u32) -> Option<f64> {
        self.days.iter().find(|d| d.day == day).and_then(|d| d.metrics().mean_sigma)
    }
}

fn stream_hash(reqs: &[SearchRequest]) -> Result<String> {
    let mut h = Sha256::new();
    for r in reqs {
        h.update(serde_json::to_vec(r)?);
        h.update(b"\n");
    }
    Ok(crate::featurizer::hex_digest(&h.finalize()))
}

/// One arm of the closed loop: heuristic warm-up, then the arm's policy
/// retrained from scratch each night on matured, attributed bookings inside
/// the window. A numerical failure while training stops the run and is
/// reported in [`ArmReport::aborted`] with the days completed so far.
pub fn run_closed_loop(world: &World, arm: &ArmConfig, cfg: &LoopConfig, train: &TrainConfig) -> Result<ArmReport> {
    cfg.validate()?;
    arm.spec.validate()?;
    train.validate()?;
    let maturation = world.config.maturation_days;
    let heuristic = Policy::Heuristic(cfg.heuristic);
    let mut report = ArmReport {
        arm: arm.clone(),
        days: Vec::new(),
        tail_destinations: Vec::new(),
        samples: Vec::new(),
        aborted: None,
    };
    let mut searches: Vec<LoggedSearch> = Vec::new();
    let mut bookings: Vec<BookingEvent> = Vec::new();
    // learning arms serve the heuristic until they have data
    let mut policy = build_policy(&arm.spec, &cfg.heuristic, &[], train)?;
    let mut train_examples = 0usize;
    let mut tail = BTreeSet::new();

    for t in 0..cfg.warmup_days + cfg.days {
        let warm = t < cfg.warmup_days;
        let serving = if warm { &heuristic } else { policy.as_ref().unwrap_or(&heuristic) };
        let reqs = daily_searches(world, t);
        let mut rec = DayRecord {
            day: t.wrapping_sub(cfg.warmup_days).wrapping_add(1),
            searches: reqs.len(),
            reachable: 0,
            bookings: 0,
            tail_bookings: 0,
            size_sum_km: 0.0,
            listings_sum: 0.0,
            sigma_sum: 0.0,
            sigma_n: 0,
            train_examples,
            stream_hash: stream_hash(&reqs)?,
        };
        let mut tally = BoxTally::default();
        for (i, req) in reqs.into_iter().enumerate() {
            let served = serving.serve(&req)?;
            let intent = IntentDraw::sample(world, &req, i as u32)?;
            let reachable = simulate_booking(world, &req, &BoundingBox::world(), &intent).is_some();
            let booking = simulate_booking(world, &req, &served.bounds, &intent);
            rec.reachable += usize::from(reachable);
            tally.add(&served.bounds, world.index(), served.uncertainty.as_ref());
            if !warm && i < cfg.sample_requests {
                report.samples.push(BoundsSample {
                    day: rec.day,
                    arm: arm.name.clone(),
                    request: req.clone(),
                    bounds: served.bounds,
                    uncertainty: served.uncertainty,
                });
            }
            if let Some(b) = booking {
                debug_assert!(served.bounds.contains(b.booked));
                rec.bookings += 1;
                rec.tail_bookings += usize::from(tail.contains(&b.request.location_id));
                bookings.push(b);
            }
            searches.push(LoggedSearch { request: req, served: served.bounds });
        }
        rec.size_sum_km = tally.size_sum_km;
        rec.listings_sum = tally.listings_sum;
        rec.sigma_sum = tally.sigma_sum;
        rec.sigma_n = tally.sigma_n;
        if !warm {
            report.days.push(rec);
        }

        if t + 1 == cfg.warmup_days {
            let mut counts: BTreeMap<&str, usize> =
                world.destinations.iter().map(|d| (d.location_id.as_str(), 0)).collect();
            for b in bookings.iter().filter(|b| !b.cancelled) {
                *counts.entry(b.request.location_id.as_str()).or_default() += 1;
            }
            tail = counts
                .into_iter()
                .filter(|&(_, c)| c <= cfg.tail_max_bookings)
                .map(|(id, _)| id.to_string())
                .collect();
            report.tail_destinations = tail.iter().cloned().collect();
        }

        let next = t + 1;
        if next >= cfg.warmup_days && next < cfg.warmup_days + cfg.days && arm.spec.learns() {
            let since = next.saturating_sub(cfg.window_days);
            let mature: Vec<BookingEvent> = bookings
                .iter()
                .filter(|b| is_mature(b, next, maturation) && b.search_day_index >= since)
                .cloned()
                .collect();
            let first = searches.partition_point(|s| s.request.search_day_index < since);
            let examples = attribute(&searches[first..], &mature);
            match build_policy(&arm.spec, &cfg.heuristic, &examples, train) {
                Ok(p) => {
                    train_examples = examples.len();
                    if arm.spec.uses_model() {
                        info!("{}: day {} retrained on {} examples", arm.name, next, examples.len());
                    }
                    policy = p;
                }
                Err(e @ Error::Numerical(_)) => {
                    warn!("{}: training diverged on day {next}: {e}", arm.name);
                    report.aborted = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmDelta {
    pub arm: String,
    pub baseline: String,
    /// Difference in recall, in percentage points.
    pub recall_delta_pts: f64,
    pub size_delta_pct: Option<f64>,
    pub listings_delta_pct: Option<f64>,
    pub conversion_delta_pct: Option<f64>,
    pub bookings_delta: i64,
    pub tail_bookings_delta: i64,
}

fn pct(x: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| 100.0 * (x - base) / base)
}

impl ArmDelta {
    pub fn between(arm: &ArmReport, baseline: &ArmReport) -> Self {
        let (a, b) = (arm.totals(), baseline.totals());
        ArmDelta {
            arm: arm.arm.name.clone(),
            baseline: baseline.arm.name.clone(),
            recall_delta_pts: 100.0 * (a.booked_location_recall - b.booked_location_recall),
            size_delta_pct: pct(a.mean_bounds_size_km, b.mean_bounds_size_km),
            listings_delta_pct: pct(a.mean_listings_retrieved, b.mean_listings_retrieved),
            conversion_delta_pct: pct(
                a.booking_conversion.unwrap_or(0.0),
                b.booking_conversion.unwrap_or(0.0),
            ),
            bookings_delta: arm.bookings() as i64 - baseline.bookings() as i64,
            tail_bookings_delta: arm.tail_bookings() as i64 - baseline.tail_bookings() as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub world_seed: u64,
    pub world: WorldConfig,
    pub closed_loop: LoopConfig,
    pub train: TrainConfig,
    pub arms: Vec<ArmReport>,
    /// Each arm against the first.
    pub deltas: Vec<ArmDelta>,
    /// Whether every arm saw the same searches on every day they share.
    pub paired_streams: bool,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm.name == name)
    }

    /// Hash of the whole search stream the arms were served, when paired.
    pub fn stream_hash(&self) -> Option<String> {
        if !self.paired_streams {
            return None;
        }
        let mut h = Sha256::new();
        for d in &self.arms.first()?.days {
            h.update(d.stream_hash.as_bytes());
        }
        Some(crate::featurizer::hex_digest(&h.finalize()))
    }
}

/// Runs every arm over identical search and intent streams.
pub fn compare_policies(world: &World, arms: &[ArmConfig], cfg: &LoopConfig, train: &TrainConfig) -> Result<ExperimentReport> {
    if arms.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 arms, got {}", arms.len())));
    }
    run_arms(world, arms, cfg, train)
}

/// Like [`compare_policies`] but accepts a single arm.
pub fn run_arms(world: &World, arms: &[ArmConfig], cfg: &LoopConfig, train: &TrainConfig) -> Result<ExperimentReport> {
    if arms.is_empty() {
        return Err(Error::InvalidArgument("no arms to run".into()));
    }
    let mut names = BTreeSet::new();
    for a in arms {
        if !names.insert(a.name.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate arm name {}", a.name)));
        }
    }
    let reports = arms
        .iter()
        .map(|a| run_closed_loop(world, a, cfg, train))
        .collect::<Result<Vec<_>>>()?;
    let paired_streams = reports.iter().all(|r| {
        r.days
            .iter()
            .zip(&reports[0].days)
            .all(|(a, b)| a.day == b.day && a.stream_hash == b.stream_hash)
    });
    let deltas = reports.iter().map(|r| ArmDelta::between(r, &reports[0])).collect();
    Ok(ExperimentReport {
        world_seed: world.seed,
        world: world.config.clone(),
        closed_loop: cfg.clone(),
        train: train.clone(),
        arms: reports,
        deltas,
        paired_streams,
    })
}

/// One row of the per-day series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub day: u32,
    pub arm: String,
    pub recall: f64,
    pub size_km: f64,
    pub listings: f64,
    pub conversion: f64,
    pub mean_sigma: Option<f64>,
}

pub const SERIES_COLUMNS: [&str; 7] = ["day", "arm", "recall", "size_km", "listings", "conversion", "mean_sigma"];

pub fn series_rows(report: &ExperimentReport) -> Vec<SeriesRow> {
    let mut rows = Vec::new();
    for arm in &report.arms {
        for d in &arm.days {
            let m = d.metrics();
            rows.push(SeriesRow {
                day: d.day,
                arm: arm.arm.name.clone(),
                recall: m.booked_location_recall,
                size_km: m.mean_bounds_size_km,
                listings: m.mean_listings_retrieved,
                conversion: m.booking_conversion.unwrap_or(0.0),
                mean_sigma: m.mean_sigma,
            });
        }
    }
    rows
}

pub fn write_series_csv<W: Write>(rows: &[SeriesRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(SERIES_COLUMNS)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("<series csv>", e))
}

pub fn read_series_csv<R: std::io::Read>(r: R) -> Result<Vec<SeriesRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(SERIES_COLUMNS) {
        return Err(Error::Data(format!("unexpected series columns: {headers:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Writes the per-day CSV to `csv_path` and the sampled bounds, one JSON
/// object per line, to `samples_path`.
pub fn emit_plot_data(report: &ExperimentReport, csv_path: &Path, samples_path: &Path) -> Result<()> {
    let f = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    write_series_csv(&series_rows(report), BufWriter::new(f))?;
    let f = File::create(samples_path).map_err(|e| Error::io(samples_path, e))?;
    let mut w = BufWriter::new(f);
    for arm in &report.arms {
        for s in &arm.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io(samples_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(samples_path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    pub train_days: u32,
    pub heldout_days: u32,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig { train_days: 30, heldout_days: 7 }
    }
}

/// Everything an experiment needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub offline: OfflineConfig,
    #[serde(rename = "loop")]
    pub closed_loop: LoopConfig,
    pub train: TrainConfig,
    pub arms: Vec<ArmConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            world: WorldConfig::default(),
            offline: OfflineConfig::default(),
            closed_loop: LoopConfig::default(),
            train: TrainConfig::default(),
            arms: vec![
                ArmConfig::new("mean", ArmSpec::MlMean { n_samples: DEFAULT_MC_SAMPLES }),
                ArmConfig::new(
                    "ucb",
                    ArmSpec::Ucb { n_samples: DEFAULT_MC_SAMPLES, lambda: DEFAULT_LAMBDA, sigma_mode: SigmaMode::Mad },
                ),
            ],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.closed_loop.validate()?;
        self.train.validate()?;
        for a in &self.arms {
            a.spec.validate()?;
        }
        if self.offline.train_days == 0 || self.offline.heldout_days == 0 {
            return Err(Error::InvalidConfig("offline train_days and heldout_days must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::simworld::generate_world;

    fn small_world() -> World {
        let cfg = WorldConfig { destinations: 6, metros: 2, listings: 1500, searches_per_day: 40, ..Default::default() };
        generate_world(&cfg, 3).unwrap()
    }

    fn fixture_examples() -> Vec<TrainingExample> {
        let w = small_world();
        let req = crate::simworld::sample_search(&w, 0, 0);
        let c = req.center;
        [(0.0, 0.0), (0.01, 0.01), (5.0, 5.0)]
            .iter()
            .map(|&(a, b)| TrainingExample {
                request: req.clone(),
                booked: GeoPoint { lat: c.lat + a, lng: c.lng + b },
            })
            .collect()
    }

    #[test]
    fn offline_fixed_policies() {
        let w = small_world();
        let ex = fixture_examples();
        let world = evaluate_offline(&Policy::Fixed(FixedBounds::World), &ex, w.index()).unwrap();
        assert_eq!(world.booked_location_recall, 1.0);
        assert_eq!(world.mean_listings_retrieved, 1500.0);
        let degen = evaluate_offline(&Policy::Fixed(FixedBounds::Degenerate), &ex, w.index()).unwrap();
        assert_eq!(degen.mean_bounds_size_km, 0.0);
        assert!(degen.booked_location_recall <= 1.0 / 3.0);
        assert!(evaluate_offline(&Policy::Fixed(FixedBounds::World), &[], w.index()).is_err());
    }

    #[test]
    fn offline_counts_two_of_three() {
        let w = small_world();
        let ex = fixture_examples();
        let policy = Policy::Heuristic(HeuristicConfig::default());
        let mut r = ex[0].request.clone();
        r.location_type = crate::featurizer::LocationType::City;
        let ex: Vec<_> = ex.into_iter().map(|e| TrainingExample { request: r.clone(), ..e }).collect();
        let m = evaluate_offline(&policy, &ex, w.index()).unwrap();
        assert!((m.booked_location_recall - 2.0 / 3.0).abs() < 1e-12);
    }

    fn quick_loop(days: u32) -> LoopConfig {
        LoopConfig { days, warmup_days: 2, sample_requests: 2, ..Default::default() }
    }

    #[test]
    fn one_day_is_one_cycle() {
        let w = small_world();
        let r = run_closed_loop(&w, &ArmConfig::new("h", ArmSpec::Heuristic), &quick_loop(1), &TrainConfig::default())
            .unwrap();
        assert_eq!(r.days.len(), 1);
        assert_eq!(r.days[0].day, 1);
        assert_eq!(r.days[0].searches, 40);
        assert_eq!(r.samples.len(), 2);
    }

    #[test]
    fn fixed_arms_bracket_recall() {
        let w = small_world();
        let arms = [ArmConfig::new("degenerate", ArmSpec::Degenerate), ArmConfig::new("world", ArmSpec::World)];
        let rep = compare_policies(&w, &arms, &quick_loop(3), &TrainConfig::default()).unwrap();
        assert!(rep.paired_streams);
        assert!(rep.stream_hash().is_some());
        assert_eq!(rep.deltas[1].recall_delta_pts, 100.0);
        assert_eq!(rep.arm("degenerate").unwrap().bookings(), 0);
        let self_cmp = compare_policies(
            &w,
            &[ArmConfig::new("a", ArmSpec::World), ArmConfig::new("b", ArmSpec::World)],
            &quick_loop(2),
            &TrainConfig::default(),
        )
        .unwrap();
        let d = &self_cmp.deltas[1];
        assert_eq!(d.recall_delta_pts, 0.0);
        assert_eq!(d.size_delta_pct, Some(0.0));
        assert_eq!(d.conversion_delta_pct, Some(0.0));
        assert!(compare_policies(&w, &arms[..1], &quick_loop(1), &TrainConfig::default()).is_err());
    }

    #[test]
    fn series_csv_round_trip() {
        let w = small_world();
        let arms = [ArmConfig::new("h", ArmSpec::Heuristic), ArmConfig::new("s", ArmSpec::Stats {
            containment: 0.96,
            expansion: 1.1,
        })];
        let rep = compare_policies(&w, &arms, &LoopConfig { warmup_days: 9, ..quick_loop(2) }, &TrainConfig::default())
            .unwrap();
        let rows = series_rows(&rep);
        assert_eq!(rows.len(), 4);
        let mut buf = Vec::new();
        write_series_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("day,arm,recall,size_km,listings,conversion,mean_sigma\n"));
        assert_eq!(read_series_csv(&buf[..]).unwrap(), rows);

        let mut empty = Vec::new();
        write_series_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "day,arm,recall,size_km,listings,conversion,mean_sigma\n");
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let parsed = ExperimentConfig::from_toml(
            "seed = 4\n[loop]\ndays = 3\n[[arms]]\nname = \"u\"\nkind = \"ucb\"\nlambda = 1.5\n",
        )
        .unwrap();
        assert_eq!(parsed.closed_loop.days, 3);
        assert_eq!(
            parsed.arms[0].spec,
            ArmSpec::Ucb { n_samples: 32, lambda: 1.5, sigma_mode: SigmaMode::Mad }
        );
        assert!(ExperimentConfig::from_toml("[[arms]]\nname = \"u\"\nkind = \"ucb\"\nlambda = -1\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }
}

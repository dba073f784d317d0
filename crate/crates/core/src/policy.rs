//! Every way of turning a search request into retrieval bounds.
//!
//! * location-type heuristics (cold start),
//! * per-destination booking statistics,
//! * the learned estimator's MC-dropout mean,
//! * the learned estimator's upper confidence bound `μ + λσ`,
//! * fixed world-covering / degenerate boxes used as harness baselines.
//!
//! MC-dropout masks are derived from a hash of the model version, the encoded
//! request and the sample index, so the same request always gets the same
//! bounds from the same model.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{FeatureVector, LocationType, SearchRequest};
use crate::geo::{
    box_size_km, expansion_factor, scale_box, separable_km, to_box, BoundingBox, ExtentOffsets,
    GeoPoint, KM_PER_DEG,
};
use crate::model::{forward, DropoutMask, Estimator};
use crate::rng::KeyedSeed;

/// 25 miles.
pub const CITY_RADIUS_KM: f64 = 40.2336;
pub const DEFAULT_CONTAINMENT: f64 = 0.96;
pub const DEFAULT_STATS_EXPANSION: f64 = 1.1;
pub const DEFAULT_MC_SAMPLES: usize = 32;
pub const DEFAULT_LAMBDA: f64 = 2.0;

/// How point-like locations (addresses, POIs, streets, buildings) expand
/// their administrative box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "factor")]
pub enum PointExpansion {
    /// A constant factor.
    Fixed(f64),
    /// The log-scale curve of the diagonal size.
    LogScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    pub city_radius_km: f64,
    pub point_expansion: PointExpansion,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            city_radius_km: CITY_RADIUS_KM,
            point_expansion: PointExpansion::LogScale,
        }
    }
}

fn radius_box(center: GeoPoint, radius_km: f64) -> BoundingBox {
    let dlat = radius_km / KM_PER_DEG;
    let dlng = radius_km / (KM_PER_DEG * center.lat.to_radians().cos().max(1e-6));
    to_box(center, ExtentOffsets::new(dlat, dlat, dlng, dlng))
}

pub fn heuristic_bounds(req: &SearchRequest, cfg: &HeuristicConfig) -> BoundingBox {
    use LocationType::*;
    let city = || radius_box(req.center, cfg.city_radius_km);
    match (req.location_type, req.admin_bounds) {
        (City, _) => city(),
        (Country | State | Neighborhood, Some(admin)) => admin,
        (Street | Address | Poi | Building, Some(admin)) => {
            let factor = match cfg.point_expansion {
                PointExpansion::Fixed(f) => f,
                PointExpansion::LogScale => {
                    expansion_factor(box_size_km(&admin).diagonal_km).unwrap_or(1.0)
                }
            };
            scale_box(&admin, factor)
        }
        (t, None) => {
            warn!(
                "{} search for {} has no administrative bounds; using the city radius",
                t.as_str(),
                req.location_id
            );
            city()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub location_id: String,
    pub center: GeoPoint,
    /// Booked points, nearest to the center first.
    pub points: Vec<GeoPoint>,
}

impl StatsEntry {
    pub fn bookings(&self) -> usize {
        self.points.len()
    }

    /// Number of nearest points kept for `containment`.
    pub fn retained(&self, containment: f64) -> usize {
        let n = self.points.len();
        (((containment * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
    }

    /// Minimal box over the retained nearest points, before expansion.
    pub fn core_box(&self, containment: f64) -> BoundingBox {
        let k = self.retained(containment);
        BoundingBox::enclosing(self.points[..k].iter().copied()).expect("entries are non-empty")
    }
}

/// Booked locations per searched destination.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsTable {
    entries: BTreeMap<String, StatsEntry>,
}

impl StatsTable {
    pub fn get(&self, location_id: &str) -> Option<&StatsEntry> {
        self.entries.get(location_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in self.entries.values() {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io("<stats table>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("<stats table>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: StatsEntry = serde_json::from_str(&line)?;
            if e.points.is_empty() {
                return Err(Error::Data(format!("stats entry {} has no points", e.location_id)));
            }
            entries.insert(e.location_id.clone(), e);
        }
        Ok(StatsTable { entries })
    }
}

/// Groups booked points by destination and orders them by distance to the
/// destination center (stable for ties).
pub fn build_stats_table<'a, I>(bookings: I) -> Result<StatsTable>
where
    I: IntoIterator<Item = (&'a str, GeoPoint, GeoPoint)>,
{
    let mut entries: BTreeMap<String, StatsEntry> = BTreeMap::new();
    for (loc, booked, center) in bookings {
        entries
            .entry(loc.to_string())
            .or_insert_with(|| StatsEntry {
                location_id: loc.to_string(),
                center,
                points: Vec::new(),
            })
            .points
            .push(booked);
    }
    if entries.is_empty() {
        return Err(Error::Empty("stats table bookings"));
    }
    for e in entries.values_mut() {
        let c = e.center;
        let mut keyed: Vec<(f64, GeoPoint)> =
            e.points.iter().map(|p| (separable_km(*p, c, c.lat), *p)).collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        e.points = keyed.into_iter().map(|(_, p)| p).collect();
    }
    Ok(StatsTable { entries })
}

pub fn stats_bounds(
    table: &StatsTable,
    req: &SearchRequest,
    containment: f64,
    expansion: f64,
    fallback: &HeuristicConfig,
) -> BoundingBox {
    match table.get(&req.location_id) {
        Some(entry) => scale_box(&entry.core_box(containment), expansion),
        None => heuristic_bounds(req, fallback),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// `Σ|yⁱ - μ| / N`, the dispersion exactly as the scoring rule is written.
    #[default]
    Mad,
    /// Population standard deviation.
    Std,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub mu: ExtentOffsets,
    pub sigma: ExtentOffsets,
    pub n_samples: usize,
}

impl UncertaintyEstimate {
    /// Mean and dispersion of a set of sampled offset vectors.
    pub fn from_samples(samples: &[[f64; 4]], mode: SigmaMode) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        let n = samples.len() as f64;
        // shifted by the first sample so identical samples give an exact mean
        let first = samples[0];
        let mut mu = [0.0; 4];
        for s in samples {
            for i in 0..4 {
                mu[i] += s[i] - first[i];
            }
        }
        mu = std::array::from_fn(|i| first[i] + mu[i] / n);
        let mut sigma = [0.0; 4];
        for s in samples {
            for i in 0..4 {
                let d = s[i] - mu[i];
                sigma[i] += match mode {
                    SigmaMode::Mad => d.abs(),
                    SigmaMode::Std => d * d,
                };
            }
        }
        sigma = sigma.map(|v| match mode {
            SigmaMode::Mad => v / n,
            SigmaMode::Std => (v / n).sqrt(),
        });
        Ok(UncertaintyEstimate {
            mu: ExtentOffsets::from_array(mu),
            sigma: ExtentOffsets::from_array(sigma),
            n_samples: samples.len(),
        })
    }

    /// `μ + λσ`, componentwise.
    pub fn upper(&self, lambda: f64) -> ExtentOffsets {
        let (m, s) = (self.mu.to_array(), self.sigma.to_array());
        ExtentOffsets::from_array(std::array::from_fn(|i| m[i] + lambda * s[i]))
    }

    pub fn mean_sigma(&self) -> f64 {
        self.sigma.to_array().iter().sum::<f64>() / 4.0
    }
}

/// Dropout mask for MC sample `index` of the request encoded as `fv`.
pub fn mc_mask(est: &Estimator, fv: &FeatureVector, index: usize) -> DropoutMask {
    let mut key = KeyedSeed::new("mc-dropout");
    key.bytes(est.version.as_bytes()).bytes(&fv.canonical_bytes());
    let mut rng = key.u64(index as u64).rng();
    DropoutMask::sample(est.config.dropout_rate, est.params.arch.hidden, &mut rng)
}

/// Scores `fv` `n` times with independent deterministic dropout masks.
pub fn mc_dropout_score(
    est: &Estimator,
    fv: &FeatureVector,
    n: usize,
    mode: SigmaMode,
) -> Result<UncertaintyEstimate> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("MC sample count must be >= 2, got {n}")));
    }
    let samples = (0..n)
        .map(|i| {
            let mask = mc_mask(est, fv, i);
            forward(&est.params, fv, Some(&mask)).map(ExtentOffsets::to_array)
        })
        .collect::<Result<Vec<_>>>()?;
    UncertaintyEstimate::from_samples(&samples, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub n_samples: usize,
    pub lambda: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_samples: DEFAULT_MC_SAMPLES,
            lambda: DEFAULT_LAMBDA,
            sigma_mode: SigmaMode::Mad,
        }
    }
}

pub fn ucb_bounds(est: &Estimator, req: &SearchRequest, cfg: &McConfig) -> Result<(BoundingBox, UncertaintyEstimate)> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    let u = mc_dropout_score(est, &est.encode(req), cfg.n_samples, cfg.sigma_mode)?;
    Ok((to_box(req.center, u.upper(cfg.lambda)), u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedBounds {
    World,
    Degenerate,
}

#[derive(Debug, Clone)]
pub enum Policy {
    Heuristic(HeuristicConfig),
    Stats {
        table: Arc<StatsTable>,
        containment: f64,
        expansion: f64,
        fallback: HeuristicConfig,
    },
    /// MC-dropout mean of the estimator.
    MlMean { model: Arc<Estimator>, n_samples: usize },
    McDropoutUcb { model: Arc<Estimator>, mc: McConfig },
    Fixed(FixedBounds),
}

/// Bounds served for one request, with the uncertainty behind them when the
/// policy has one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Served {
    pub bounds: BoundingBox,
    pub uncertainty: Option<UncertaintyEstimate>,
}

impl Policy {
    pub fn stats(table: StatsTable) -> Self {
        Policy::Stats {
            table: Arc::new(table),
            containment: DEFAULT_CONTAINMENT,
            expansion: DEFAULT_STATS_EXPANSION,
            fallback: HeuristicConfig::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Heuristic(_) => "heuristic",
            Policy::Stats { .. } => "stats",
            Policy::MlMean { .. } => "ml_mean",
            Policy::McDropoutUcb { .. } => "mc_dropout_ucb",
            Policy::Fixed(FixedBounds::World) => "world",
            Policy::Fixed(FixedBounds::Degenerate) => "degenerate",
        }
    }

    pub fn serve(&self, req: &SearchRequest) -> Result<Served> {
        let plain = |bounds| Ok(Served { bounds, uncertainty: None });
        match self {
            Policy::Heuristic(cfg) => plain(heuristic_bounds(req, cfg)),
            Policy::Stats { table, containment, expansion, fallback } => {
                plain(stats_bounds(table, req, *containment, *expansion, fallback))
            }
            Policy::MlMean { model, n_samples } => {
                let mc = McConfig { n_samples: *n_samples, lambda: 0.0, sigma_mode: SigmaMode::Mad };
                let (bounds, u) = ucb_bounds(model, req, &mc)?;
                Ok(Served { bounds, uncertainty: Some(u) })
            }
            Policy::McDropoutUcb { model, mc } => {
                let (bounds, u) = ucb_bounds(model, req, mc)?;
                Ok(Served { bounds, uncertainty: Some(u) })
            }
            Policy::Fixed(FixedBounds::World) => plain(BoundingBox::world()),
            Policy::Fixed(FixedBounds::Degenerate) => plain(BoundingBox::degenerate(req.center)),
        }
    }

    pub fn bounds(&self, req: &SearchRequest) -> Result<BoundingBox> {
        Ok(self.serve(req)?.bounds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::tests::request;
    use approx::assert_abs_diff_eq;

    fn with_type(t: LocationType, admin: Option<BoundingBox>) -> SearchRequest {
        let mut r = request("x", 2);
        r.location_type = t;
        r.center = GeoPoint { lat: 0.0, lng: 0.0 };
        r.admin_bounds = admin;
        r
    }

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::from_corners(a, b, c, d).unwrap()
    }

    #[test]
    fn city_heuristic_is_a_25_mile_square() {
        let b = heuristic_bounds(&with_type(LocationType::City, None), &HeuristicConfig::default());
        assert_abs_diff_eq!(b.ne.lat, 0.3618, epsilon = 5e-5);
        assert_abs_diff_eq!(b.sw.lat, -0.3618, epsilon = 5e-5);
        assert_abs_diff_eq!(b.ne.lng, 0.3618, epsilon = 5e-5);
    }

    #[test]
    fn admin_types_pass_through() {
        let admin = bx(-0.1, -0.2, 0.3, 0.4);
        for t in [LocationType::Country, LocationType::State, LocationType::Neighborhood] {
            assert_eq!(heuristic_bounds(&with_type(t, Some(admin)), &HeuristicConfig::default()), admin);
        }
    }

    #[test]
    fn tiny_address_box_expands_by_2_9() {
        let admin = bx(-1e-6, -1e-6, 1e-6, 1e-6);
        let b = heuristic_bounds(&with_type(LocationType::Address, Some(admin)), &HeuristicConfig::default());
        assert_abs_diff_eq!(b.ne.lat, 2.9e-6, epsilon = 1e-9);
        let fixed = HeuristicConfig { point_expansion: PointExpansion::Fixed(2.5), ..Default::default() };
        let b = heuristic_bounds(&with_type(LocationType::Building, Some(admin)), &fixed);
        assert_abs_diff_eq!(b.ne.lat, 2.5e-6, epsilon = 1e-12);
    }

    #[test]
    fn missing_admin_falls_back_to_city() {
        let city = heuristic_bounds(&with_type(LocationType::City, None), &HeuristicConfig::default());
        for t in [LocationType::Neighborhood, LocationType::Poi] {
            assert_eq!(heuristic_bounds(&with_type(t, None), &HeuristicConfig::default()), city);
        }
    }

    fn table_of(points: &[(f64, f64)]) -> StatsTable {
        let c = GeoPoint { lat: 0.0, lng: 0.0 };
        build_stats_table(points.iter().map(|&(lat, lng)| ("x", GeoPoint { lat, lng }, c))).unwrap()
    }

    #[test]
    fn stats_counts_and_fallback() {
        let pts: Vec<_> = (0..100).map(|i| (0.001 * i as f64, 0.0)).collect();
        let t = table_of(&pts);
        assert_eq!(t.get("x").unwrap().retained(0.96), 96);
        assert_eq!(t.get("x").unwrap().core_box(0.96).ne.lat, 0.095);

        let t1 = table_of(&[(0.2, 0.3)]);
        let e = t1.get("x").unwrap();
        assert_eq!(e.core_box(0.96), BoundingBox::degenerate(GeoPoint { lat: 0.2, lng: 0.3 }));

        let c = GeoPoint { lat: 0.0, lng: 0.0 };
        let two = build_stats_table([
            ("a", GeoPoint { lat: 1.0, lng: 1.0 }, c),
            ("b", GeoPoint { lat: -1.0, lng: -1.0 }, c),
        ])
        .unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two.get("a").unwrap().points, vec![GeoPoint { lat: 1.0, lng: 1.0 }]);

        let unseen = with_type(LocationType::City, None);
        let mut r = unseen.clone();
        r.location_id = "nowhere".into();
        assert_eq!(
            stats_bounds(&two, &r, 0.96, 1.1, &HeuristicConfig::default()),
            heuristic_bounds(&r, &HeuristicConfig::default())
        );
        assert!(build_stats_table(std::iter::empty()).is_err());
    }

    #[test]
    fn stats_bounds_examples() {
        let same = table_of(&[(0.5, 0.5); 5]);
        let r = with_type(LocationType::City, None);
        let mut r = r;
        r.location_id = "x".into();
        assert_eq!(
            stats_bounds(&same, &r, 0.96, 1.1, &HeuristicConfig::default()),
            BoundingBox::degenerate(GeoPoint { lat: 0.5, lng: 0.5 })
        );
        let corners = table_of(&[(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)]);
        assert_eq!(stats_bounds(&corners, &r, 1.0, 1.0, &HeuristicConfig::default()), bx(-1.0, -1.0, 1.0, 1.0));
        // four-way tie: the first three in insertion order survive
        assert_eq!(stats_bounds(&corners, &r, 0.75, 1.0, &HeuristicConfig::default()), bx(-1.0, -1.0, 1.0, 1.0));
        let near = table_of(&[(2.0, 2.0), (0.1, 0.1), (-0.2, 0.1), (0.1, -0.3)]);
        assert_eq!(stats_bounds(&near, &r, 0.75, 1.0, &HeuristicConfig::default()), bx(-0.2, -0.3, 0.1, 0.1));
    }

    #[test]
    fn stats_table_jsonl_round_trip() {
        let t = table_of(&[(0.2, 0.1), (0.1, 0.1)]);
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        assert_eq!(StatsTable::read_jsonl(&buf[..]).unwrap(), t);
    }

    #[test]
    fn sigma_arithmetic() {
        let u = UncertaintyEstimate::from_samples(&[[0.0; 4], [2.0; 4]], SigmaMode::Mad).unwrap();
        assert_eq!(u.mu, ExtentOffsets::splat(1.0));
        assert_eq!(u.sigma, ExtentOffsets::splat(1.0));
        let same = UncertaintyEstimate::from_samples(&[[0.3, 0.1, 0.2, 0.4]; 5], SigmaMode::Mad).unwrap();
        assert_eq!(same.sigma, ExtentOffsets::default());
        assert_eq!(same.mu, ExtentOffsets::new(0.3, 0.1, 0.2, 0.4));
        let s = UncertaintyEstimate::from_samples(&[[0.0; 4], [0.0; 4], [3.0; 4]], SigmaMode::Std).unwrap();
        assert_abs_diff_eq!(s.sigma.sw_lat, 2f64.sqrt(), epsilon = 1e-12);
        let m = UncertaintyEstimate::from_samples(&[[0.0; 4], [0.0; 4], [3.0; 4]], SigmaMode::Mad).unwrap();
        assert_abs_diff_eq!(m.sigma.sw_lat, 4.0 / 3.0, epsilon = 1e-12);
        assert!(UncertaintyEstimate::from_samples(&[[1.0; 4]], SigmaMode::Mad).is_err());
    }

    #[test]
    fn ucb_offsets_formula() {
        let u = UncertaintyEstimate {
            mu: ExtentOffsets::splat(1.0),
            sigma: ExtentOffsets::splat(0.1),
            n_samples: 32,
        };
        for v in u.upper(2.0).to_array() {
            assert_abs_diff_eq!(v, 1.2, epsilon = 1e-12);
        }
        assert_eq!(u.upper(0.0), u.mu);
    }
}

//! Synthetic booking world.
//!
//! Destinations carry a latent, guest-conditioned mixture of places where
//! guests actually stay. Searches arrive daily; a searching guest draws an
//! intended stay point, walks to the nearest listing that fits the party, and
//! books it only when that listing lies inside the bounds the policy served.
//! Bookings that are not cancelled become training data after a maturation
//! delay.
//!
//! Every draw is keyed by `(seed, purpose, day, draw index)`, so two policy
//! arms replaying the same day see the same searches and the same intents.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::{Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{surface_cell_id, weekday, LocationType, SearchRequest};
use crate::geo::{separable_km, BoundingBox, GeoPoint, KM_PER_DEG};
use crate::model::TrainingExample;
use crate::rng::{KeyedSeed, Rng};

/// Search dates are drawn from the first `SEARCH_CALENDAR_DAYS` days of the
/// year so check-in and checkout never wrap into the next year.
const SEARCH_CALENDAR_DAYS: u32 = 300;
const MAX_GUESTS: u32 = 16;
/// Floor on a component's share of the listing supply.
const LISTING_COMPONENT_FLOOR: f64 = 0.15;
const COUNTRIES: [&str; 8] = ["US", "FR", "JP", "BR", "AU", "ZA", "IT", "MX"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub destinations: usize,
    pub metros: usize,
    pub listings: usize,
    pub zipf_s: f64,
    pub searches_per_day: usize,
    /// Relative weight of party sizes 1, 2, 3, ...
    pub guest_weights: Vec<f64>,
    pub mobile_app_share: f64,
    pub mean_lead_days: f64,
    pub mean_trip_nights: f64,
    /// Probability a searching guest intends to book at all.
    pub book_prob: f64,
    /// Probability the reservation lands the day after the search.
    pub next_day_booking_prob: f64,
    pub cancel_rate: f64,
    pub maturation_days: u32,
    pub booking_radius_km: f64,
    pub grid_cell_deg: f64,
    pub start_day_of_year: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            destinations: 50,
            metros: 12,
            listings: 10_000,
            zipf_s: 1.1,
            searches_per_day: 400,
            guest_weights: vec![
                0.18, 0.32, 0.09, 0.12, 0.04, 0.06, 0.03, 0.04, 0.02, 0.03, 0.01, 0.03, 0.005,
                0.005, 0.005, 0.01,
            ],
            mobile_app_share: 0.55,
            mean_lead_days: 21.0,
            mean_trip_nights: 3.0,
            book_prob: 0.7,
            next_day_booking_prob: 0.25,
            cancel_rate: 0.05,
            maturation_days: 7,
            booking_radius_km: 8.0,
            grid_cell_deg: 0.1,
            start_day_of_year: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.destinations == 0 || self.metros == 0 || self.listings == 0 {
            return bad("destination, metro and listing counts must be >= 1".into());
        }
        if self.searches_per_day == 0 {
            return bad("searches_per_day must be >= 1".into());
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return bad(format!("zipf_s must be finite and >= 0, got {}", self.zipf_s));
        }
        if self.guest_weights.is_empty()
            || self.guest_weights.len() > MAX_GUESTS as usize
            || self.guest_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.guest_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("guest_weights must hold 1..=16 nonnegative weights with a positive sum".into());
        }
        for (name, p) in [
            ("mobile_app_share", self.mobile_app_share),
            ("book_prob", self.book_prob),
            ("next_day_booking_prob", self.next_day_booking_prob),
            ("cancel_rate", self.cancel_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.mean_lead_days >= 0.0 && self.mean_trip_nights >= 1.0) {
            return bad("mean_lead_days must be >= 0 and mean_trip_nights >= 1".into());
        }
        if !(self.booking_radius_km > 0.0 && self.grid_cell_deg > 0.0) {
            return bad("booking_radius_km and grid_cell_deg must be > 0".into());
        }
        if !(1..=SEARCH_CALENDAR_DAYS).contains(&self.start_day_of_year) {
            return bad(format!("start_day_of_year must lie in [1, {SEARCH_CALENDAR_DAYS}]"));
        }
        Ok(())
    }

    /// Day of year of simulated day `day`.
    pub fn search_day_of_year(&self, day: u32) -> u32 {
        1 + (self.start_day_of_year - 1 + day) % SEARCH_CALENDAR_DAYS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: GeoPoint,
    /// Per-axis standard deviation `[lat, lng]` in degrees.
    pub std_deg: [f64; 2],
    pub weight: f64,
    /// Log-weight change per extra guest beyond two.
    pub guest_modifier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Destination {
    pub location_id: String,
    pub metro_id: String,
    pub country_code: String,
    pub location_type: LocationType,
    pub center: GeoPoint,
    pub admin_bounds: BoundingBox,
    pub mixture: Vec<MixtureComponent>,
    pub popularity: f64,
}

impl Destination {
    /// Mixture weights for a party of `guests`, normalized.
    pub fn component_weights(&self, guests: u32) -> Vec<f64> {
        let g = guests as f64 - 2.0;
        let raw: Vec<f64> = self.mixture.iter().map(|c| c.weight * (c.guest_modifier * g).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    pub fn sample_point(&self, guests: u32, rng: &mut Rng) -> GeoPoint {
        let k = WeightedIndex::new(self.component_weights(guests)).expect("positive weights").sample(rng);
        sample_component(&self.mixture[k], 1.0, rng)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Data(format!("destination {}: {m}", self.location_id)));
        if self.mixture.is_empty() {
            return bad("empty mixture");
        }
        if self.mixture.iter().any(|c| !(c.weight > 0.0) || c.std_deg.iter().any(|s| !(*s >= 0.0))) {
            return bad("mixture weights must be > 0 and stds >= 0");
        }
        if (self.mixture.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mixture weights must sum to 1");
        }
        if !(self.popularity > 0.0) || !self.center.is_valid() || !self.admin_bounds.is_valid() {
            return bad("invalid popularity, center or admin bounds");
        }
        Ok(())
    }
}

fn sample_component(c: &MixtureComponent, widen: f64, rng: &mut Rng) -> GeoPoint {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let dlat = std_normal.sample(rng) * c.std_deg[0] * widen;
    let dlng = std_normal.sample(rng) * c.std_deg[1] * widen;
    GeoPoint { lat: c.mean.lat + dlat, lng: c.mean.lng + dlng }.clamped()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Listing {
    pub listing_id: u32,
    pub location: GeoPoint,
    pub capacity: u32,
    pub nightly_price: f64,
}

/// Uniform lat/lng cell grid over listing locations.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_deg: f64,
    cells: HashMap<(i64, i64), Vec<u32>>,
    points: Vec<GeoPoint>,
}

impl GridIndex {
    pub fn new(listings: &[Listing], cell_deg: f64) -> Self {
        let mut index = GridIndex {
            cell_deg,
            cells: HashMap::new(),
            points: Vec::with_capacity(listings.len()),
        };
        for (i, l) in listings.iter().enumerate() {
            index.cells.entry(index.cell_of(l.location)).or_default().push(i as u32);
            index.points.push(l.location);
        }
        index
    }

    pub fn cell_of(&self, p: GeoPoint) -> (i64, i64) {
        ((p.lat / self.cell_deg).floor() as i64, (p.lng / self.cell_deg).floor() as i64)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of listings held by each occupied cell, summed.
    pub fn indexed_count(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    fn visit_box(&self, b: &BoundingBox, mut f: impl FnMut(u32)) {
        let (i0, j0) = self.cell_of(b.sw);
        let (i1, j1) = self.cell_of(b.ne);
        let spanned = (i1 - i0 + 1) as f64 * (j1 - j0 + 1) as f64;
        let mut check = |ids: &Vec<u32>| {
            for &id in ids {
                if b.contains(self.points[id as usize]) {
                    f(id);
                }
            }
        };
        if spanned > self.cells.len() as f64 {
            for (&(i, j), ids) in &self.cells {
                if (i0..=i1).contains(&i) && (j0..=j1).contains(&j) {
                    check(ids);
                }
            }
        } else {
            for i in i0..=i1 {
                for j in j0..=j1 {
                    if let Some(ids) = self.cells.get(&(i, j)) {
                        check(ids);
                    }
                }
            }
        }
    }

    /// Listings inside `b` (edges inclusive), ascending by id.
    pub fn ids_in_box(&self, b: &BoundingBox) -> Vec<u32> {
        let mut ids = Vec::new();
        self.visit_box(b, |id| ids.push(id));
        ids.sort_unstable();
        ids
    }

    pub fn count_in_box(&self, b: &BoundingBox) -> usize {
        let mut n = 0;
        self.visit_box(b, |_| n += 1);
        n
    }
}

pub fn count_in_box(index: &GridIndex, b: &BoundingBox) -> usize {
    index.count_in_box(b)
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub destinations: Vec<Destination>,
    pub listings: Vec<Listing>,
    index: GridIndex,
    by_location: HashMap<String, usize>,
    popularity: WeightedIndex<f64>,
    guests: WeightedIndex<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "section", rename_all = "snake_case")]
enum WorldRecord {
    Header { seed: u64, config: WorldConfig },
    Destination(Destination),
    Listing(Listing),
}

impl World {
    pub fn new(config: WorldConfig, seed: u64, destinations: Vec<Destination>, listings: Vec<Listing>) -> Result<Self> {
        config.validate()?;
        if destinations.is_empty() {
            return Err(Error::Empty("world destinations"));
        }
        let mut by_location = HashMap::new();
        for (i, d) in destinations.iter().enumerate() {
            d.validate()?;
            if by_location.insert(d.location_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate destination {}", d.location_id)));
            }
        }
        for (i, l) in listings.iter().enumerate() {
            if l.listing_id as usize != i || l.capacity < 1 || !l.location.is_valid() {
                return Err(Error::Data(format!("listing {} is malformed or out of order", l.listing_id)));
            }
        }
        let popularity = WeightedIndex::new(destinations.iter().map(|d| d.popularity))
            .map_err(|e| Error::Data(format!("destination popularity: {e}")))?;
        let guests = WeightedIndex::new(config.guest_weights.iter().copied())
            .map_err(|e| Error::InvalidConfig(format!("guest_weights: {e}")))?;
        let index = GridIndex::new(&listings, config.grid_cell_deg);
        Ok(World { config, seed, destinations, listings, index, by_location, popularity, guests })
    }

    pub fn index(&self) -> &GridIndex {
        &self.index
    }

    pub fn destination(&self, location_id: &str) -> Option<&Destination> {
        self.by_location.get(location_id).map(|&i| &self.destinations[i])
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |rec: &WorldRecord| -> Result<()> {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<world>", e))
        };
        line(&WorldRecord::Header { seed: self.seed, config: self.config.clone() })?;
        for d in &self.destinations {
            line(&WorldRecord::Destination(d.clone()))?;
        }
        for l in &self.listings {
            line(&WorldRecord::Listing(*l))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut header = None;
        let (mut destinations, mut listings) = (Vec::new(), Vec::new());
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<world>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: WorldRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("world line {}: {e}", n + 1)))?;
            match rec {
                WorldRecord::Header { seed, config } => header = Some((seed, config)),
                WorldRecord::Destination(d) => destinations.push(d),
                WorldRecord::Listing(l) => listings.push(l),
            }
        }
        let (seed, config) = header.ok_or_else(|| Error::Data("world file has no header".into()))?;
        World::new(config, seed, destinations, listings)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        World::read_jsonl(BufReader::new(f))
    }
}

struct TypeShape {
    admin_half_deg: f64,
    main_std_deg: f64,
    shift_deg: f64,
    shift_std_deg: f64,
    satellites: usize,
    satellite_dist_deg: (f64, f64),
    satellite_std_deg: f64,
}

fn shape(t: LocationType) -> TypeShape {
    use LocationType::*;
    let (admin_half_deg, main_std_deg, shift_deg, shift_std_deg, satellites, satellite_dist_deg, satellite_std_deg) =
        match t {
            Country => (5.0, 1.5, 1.5, 0.8, 1, (6.0, 8.0), 0.3),
            State => (1.2, 0.35, 0.4, 0.2, 1, (1.5, 2.0), 0.08),
            City => (0.25, 0.10, 0.12, 0.06, 2, (0.22, 0.32), 0.03),
            Neighborhood => (0.03, 0.03, 0.04, 0.02, 1, (0.15, 0.3), 0.02),
            Street => (0.01, 0.025, 0.03, 0.015, 1, (0.12, 0.25), 0.02),
            Address | Poi | Building => (0.002, 0.03, 0.035, 0.015, 1, (0.1, 0.2), 0.02),
        };
    TypeShape {
        admin_half_deg,
        main_std_deg,
        shift_deg,
        shift_std_deg,
        satellites,
        satellite_dist_deg,
        satellite_std_deg,
    }
}

const SECONDARY_TYPES: [LocationType; 10] = [
    LocationType::Neighborhood,
    LocationType::Poi,
    LocationType::City,
    LocationType::Address,
    LocationType::Neighborhood,
    LocationType::Street,
    LocationType::Poi,
    LocationType::Building,
    LocationType::State,
    LocationType::City,
];

/// Box of half-extent `half_deg` (lat) around `c`, with the longitude extent
/// widened so the box is square on the ground.
fn square_box(c: GeoPoint, half_deg: f64) -> BoundingBox {
    let half_lng = half_deg / c.lat.to_radians().cos().max(0.05);
    BoundingBox::from_corners(c.lat - half_deg, c.lng - half_lng, c.lat + half_deg, c.lng + half_lng)
        .map(|b| b.clamped())
        .unwrap_or_else(|_| BoundingBox::degenerate(c))
}

fn lng_scale(lat: f64) -> f64 {
    1.0 / lat.to_radians().cos().max(0.05)
}

fn make_destination(idx: usize, t: LocationType, center: GeoPoint, metro: usize, s: f64, rng: &mut Rng) -> Destination {
    let sh = shape(t);
    let k = lng_scale(center.lat);
    let angle = |rng: &mut Rng| rng.random_range(0.0..std::f64::consts::TAU);
    let offset = |dist: f64, a: f64| {
        GeoPoint { lat: center.lat + dist * a.sin(), lng: center.lng + dist * a.cos() * k }.clamped()
    };
    let shift_weight = rng.random_range(0.15..0.35);
    let satellite_weight = 0.0005;
    let mut mixture = vec![
        MixtureComponent {
            mean: center,
            std_deg: [sh.main_std_deg, sh.main_std_deg * k],
            weight: 1.0 - shift_weight - satellite_weight * sh.satellites as f64,
            guest_modifier: 0.0,
        },
        MixtureComponent {
            mean: offset(sh.shift_deg, angle(rng)),
            std_deg: [sh.shift_std_deg, sh.shift_std_deg * k],
            weight: shift_weight,
            guest_modifier: 0.0,
        },
    ];
    for _ in 0..sh.satellites {
        let dist = rng.random_range(sh.satellite_dist_deg.0..sh.satellite_dist_deg.1);
        mixture.push(MixtureComponent {
            mean: offset(dist, angle(rng)),
            std_deg: [sh.satellite_std_deg, sh.satellite_std_deg * k],
            weight: satellite_weight,
            guest_modifier: 2.0,
        });
    }
    Destination {
        location_id: format!("d{idx:03}"),
        metro_id: format!("m{metro:02}"),
        country_code: COUNTRIES[metro % COUNTRIES.len()].to_string(),
        location_type: t,
        center,
        admin_bounds: square_box(center, sh.admin_half_deg),
        mixture,
        popularity: 1.0 / ((idx + 1) as f64).powf(s),
    }
}

/// Builds a world: metros spread over the globe, destinations of mixed types
/// around them with Zipf popularity by index, and listings drawn from a
/// widened copy of each destination's mixture.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = KeyedSeed::new("world").u64(seed).rng();
    let metros = config.metros.min(config.destinations);
    let mut metro_centers: Vec<GeoPoint> = Vec::with_capacity(metros);
    while metro_centers.len() < metros {
        let p = GeoPoint { lat: rng.random_range(-40.0..55.0), lng: rng.random_range(-120.0..150.0) };
        let spaced = metro_centers
            .iter()
            .all(|q| (q.lat - p.lat).abs() > 3.0 || (q.lng - p.lng).abs() > 3.0);
        if spaced || metro_centers.len() > 1000 {
            metro_centers.push(p);
        }
    }
    let mut destinations = Vec::with_capacity(config.destinations);
    for idx in 0..config.destinations {
        let metro = idx % metros;
        let mc = metro_centers[metro];
        let (t, center) = if idx < metros {
            (LocationType::City, mc)
        } else {
            let t = SECONDARY_TYPES[(idx - metros) % SECONDARY_TYPES.len()];
            let spread = match t {
                LocationType::City | LocationType::State => 1.0,
                _ => 0.3,
            };
            let c = GeoPoint {
                lat: mc.lat + rng.random_range(-spread..spread),
                lng: mc.lng + rng.random_range(-spread..spread) * lng_scale(mc.lat),
            };
            (t, c.clamped())
        };
        destinations.push(make_destination(idx, t, center, metro, config.zipf_s, &mut rng));
    }

    let supply = WeightedIndex::new(destinations.iter().map(|d| d.popularity.sqrt()))
        .map_err(|e| Error::InvalidConfig(format!("popularity: {e}")))?;
    let big = Geometric::new(0.25).expect("valid p");
    let small = WeightedIndex::new([0.10, 0.30, 0.15, 0.20, 0.08, 0.10, 0.03, 0.04]).expect("weights");
    let price = Normal::new(4.5, 0.5).expect("valid");
    let mut listings = Vec::with_capacity(config.listings);
    for i in 0..config.listings {
        let d = &destinations[supply.sample(&mut rng)];
        let share = WeightedIndex::new(d.mixture.iter().map(|c| c.weight.max(LISTING_COMPONENT_FLOOR)))
            .expect("positive weights");
        let c = &d.mixture[share.sample(&mut rng)];
        let location = sample_component(c, 1.3, &mut rng);
        let capacity = if c.guest_modifier > 0.0 {
            (4 + big.sample(&mut rng) as u32).min(MAX_GUESTS)
        } else {
            1 + small.sample(&mut rng) as u32
        };
        listings.push(Listing {
            listing_id: i as u32,
            location,
            capacity,
            nightly_price: (price.sample(&mut rng) as f64).exp(),
        });
    }
    World::new(config.clone(), seed, destinations, listings)
}

fn geometric_with_mean(mean: f64, rng: &mut Rng) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Geometric::new(1.0 / (1.0 + mean)).expect("valid p").sample(rng).min(365) as u32
}

/// Draw `index` of day `day`: the same request for every policy arm.
pub fn sample_search(world: &World, day: u32, index: u32) -> SearchRequest {
    let cfg = &world.config;
    let mut rng = KeyedSeed::new("search").u64(world.seed).u64(day as u64).u64(index as u64).rng();
    let d = &world.destinations[world.popularity.sample(&mut rng)];
    let guests = 1 + world.guests.sample(&mut rng) as u32;
    let is_mobile_app = rng.random::<f64>() < cfg.mobile_app_share;
    let device_type = match (is_mobile_app, rng.random::<bool>()) {
        (true, true) => "ios",
        (true, false) => "android",
        (false, true) => "desktop",
        (false, false) => "mobile_web",
    };
    let trip = (1 + geometric_with_mean(cfg.mean_trip_nights - 1.0, &mut rng)).min(28);
    let search_doy = cfg.search_day_of_year(day);
    let lead = geometric_with_mean(cfg.mean_lead_days, &mut rng).min(366 - trip - search_doy);
    let checkin = search_doy + lead;
    SearchRequest {
        guest_id: ((day as u64) << 32) | index as u64,
        location_id: d.location_id.clone(),
        metro_id: d.metro_id.clone(),
        surface_cell_id: surface_cell_id(d.center),
        location_type: d.location_type,
        country_code: d.country_code.clone(),
        guests,
        is_mobile_app,
        device_type: device_type.to_string(),
        lead_days: lead,
        trip_length_nights: trip,
        is_weekend_trip: trip <= 3 && matches!(weekday(checkin), 4 | 5),
        checkin_day_of_year: checkin,
        checkout_day_of_year: checkin + trip,
        search_day_of_year: search_doy,
        center: d.center,
        admin_bounds: Some(d.admin_bounds),
        search_day_index: day,
    }
}

pub fn daily_searches(world: &World, day: u32) -> Vec<SearchRequest> {
    (0..world.config.searches_per_day as u32).map(|i| sample_search(world, day, i)).collect()
}

/// What the guest behind a search will do, independent of the served bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentDraw {
    pub wants_to_book: bool,
    pub point: GeoPoint,
    pub delay_days: u32,
    pub cancelled: bool,
}

impl IntentDraw {
    pub fn sample(world: &World, req: &SearchRequest, index: u32) -> Result<Self> {
        let cfg = &world.config;
        let d = world
            .destination(&req.location_id)
            .ok_or_else(|| Error::Data(format!("unknown destination {}", req.location_id)))?;
        let mut rng = KeyedSeed::new("intent")
            .u64(world.seed)
            .u64(req.search_day_index as u64)
            .u64(index as u64)
            .rng();
        let wants_to_book = rng.random::<f64>() < cfg.book_prob;
        let point = d.sample_point(req.guests, &mut rng);
        let delay_days = u32::from(rng.random::<f64>() < cfg.next_day_booking_prob);
        let cancelled = rng.random::<f64>() < cfg.cancel_rate;
        Ok(IntentDraw { wants_to_book, point, delay_days, cancelled })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedSearch {
    pub request: SearchRequest,
    pub served: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookingEvent {
    pub search_day_index: u32,
    pub reservation_day: u32,
    pub request: SearchRequest,
    pub booked: GeoPoint,
    pub listing_id: u32,
    pub cancelled: bool,
}

/// Nearest listing to `p` that fits `guests`, within `radius_km`; ties go to
/// the lower id.
pub fn nearest_feasible(world: &World, p: GeoPoint, guests: u32, radius_km: f64) -> Option<&Listing> {
    let dlat = radius_km / KM_PER_DEG;
    let dlng = dlat * lng_scale(p.lat);
    let area = BoundingBox::from_corners(p.lat - dlat, p.lng - dlng, p.lat + dlat, p.lng + dlng)
        .map(|b| b.clamped())
        .ok()?;
    let mut best: Option<(f64, u32)> = None;
    for id in world.index.ids_in_box(&area) {
        let l = &world.listings[id as usize];
        if l.capacity < guests {
            continue;
        }
        let dist = separable_km(p, l.location, p.lat);
        if dist <= radius_km && best.is_none_or(|(bd, _)| dist < bd) {
            best = Some((dist, id));
        }
    }
    best.map(|(_, id)| &world.listings[id as usize])
}

/// The guest books the nearest feasible listing to their intent point, but
/// only if the served bounds retrieved it.
pub fn simulate_booking(world: &World, req: &SearchRequest, served: &BoundingBox, intent: &IntentDraw) -> Option<BookingEvent> {
    if !intent.wants_to_book {
        return None;
    }
    let listing = nearest_feasible(world, intent.point, req.guests, world.config.booking_radius_km)?;
    if !served.contains(listing.location) {
        return None;
    }
    Some(BookingEvent {
        search_day_index: req.search_day_index,
        reservation_day: req.search_day_index + intent.delay_days,
        request: req.clone(),
        booked: listing.location,
        listing_id: listing.listing_id,
        cancelled: intent.cancelled,
    })
}

/// Bookings whose cancellation window has closed by `today`.
pub fn is_mature(b: &BookingEvent, today: u32, maturation_days: u32) -> bool {
    b.reservation_day + maturation_days <= today
}

/// Links each uncancelled booking to every search by the same guest for the
/// same destination, issued on the reservation day or the day before, whose
/// served bounds contain the booked listing.
pub fn attribute(searches: &[LoggedSearch], bookings: &[BookingEvent]) -> Vec<TrainingExample> {
    let mut by_guest: HashMap<u64, Vec<&LoggedSearch>> = HashMap::new();
    for s in searches {
        by_guest.entry(s.request.guest_id).or_default().push(s);
    }
    let mut out = Vec::new();
    for b in bookings.iter().filter(|b| !b.cancelled) {
        let Some(candidates) = by_guest.get(&b.request.guest_id) else { continue };
        for s in candidates {
            let day = s.request.search_day_index;
            if s.request.location_id == b.request.location_id
                && (day == b.reservation_day || day + 1 == b.reservation_day)
                && s.served.contains(b.booked)
            {
                out.push(TrainingExample { request: s.request.clone(), booked: b.booked });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventRecord {
    Search(LoggedSearch),
    Booking(BookingEvent),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub searches: Vec<LoggedSearch>,
    pub bookings: Vec<BookingEvent>,
}

impl EventLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.searches {
            serde_json::to_writer(&mut w, &EventRecord::Search(s.clone()))?;
            w.write_all(b"\n").map_err(|e| Error::io("<events>", e))?;
        }
        for b in &self.bookings {
            serde_json::to_writer(&mut w, &EventRecord::Booking(b.clone()))?;
            w.write_all(b"\n").map_err(|e| Error::io("<events>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut log = EventLog::default();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<events>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| Error::Data(format!("event line {}: {e}", n + 1)))? {
                EventRecord::Search(s) => log.searches.push(s),
                EventRecord::Booking(b) => log.bookings.push(b),
            }
        }
        Ok(log)
    }
}

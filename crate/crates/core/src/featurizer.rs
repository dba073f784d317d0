//! Search request → model input.
//!
//! A [`FeatureVector`] holds 10 categorical slots (dense vocabulary indices,
//! embedded by the model) and 9 standardized continuous slots.
//!
//! Categorical slots, in order:
//!
//! | slot | feature            | source                                   |
//! |------|--------------------|------------------------------------------|
//! | 0    | location id        | searched location                        |
//! | 1    | metro id           | metropolitan area                        |
//! | 2    | surface cell id    | 0.5° cell containing the searched center |
//! | 3    | location type      | country, state, city, ...                |
//! | 4    | location class     | region / locality / point (type subfield)|
//! | 5    | country code       |                                          |
//! | 6    | platform           | mobile app vs. web                       |
//! | 7    | device type        |                                          |
//! | 8    | check-in weekday   | derived from the check-in date           |
//! | 9    | search weekday     | derived from the search date             |
//!
//! Continuous slots: guests, is-mobile-app, lead days, trip length,
//! is-weekend-trip, sin/cos of the check-in day of year, sin/cos of the
//! search day of year. Checkout is implied by check-in plus trip length.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{BoundingBox, GeoPoint};

pub const N_CATEGORICAL: usize = 10;
pub const N_CONTINUOUS: usize = 9;

pub const CATEGORICAL_NAMES: [&str; N_CATEGORICAL] = [
    "location_id",
    "metro_id",
    "surface_cell_id",
    "location_type",
    "location_class",
    "country_code",
    "platform",
    "device_type",
    "checkin_weekday",
    "search_weekday",
];

pub const CONTINUOUS_NAMES: [&str; N_CONTINUOUS] = [
    "guests",
    "is_mobile_app",
    "lead_days",
    "trip_length_nights",
    "is_weekend_trip",
    "checkin_doy_sin",
    "checkin_doy_cos",
    "search_doy_sin",
    "search_doy_cos",
];

/// Edge of the surface grid used for `surface_cell_id`, in degrees.
pub const SURFACE_CELL_DEG: f64 = 0.5;

const DAYS_PER_CYCLE: f64 = 366.0;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationType {
    Country,
    State,
    City,
    Neighborhood,
    Street,
    Address,
    Poi,
    Building,
}

impl LocationType {
    pub const ALL: [LocationType; 8] = [
        LocationType::Country,
        LocationType::State,
        LocationType::City,
        LocationType::Neighborhood,
        LocationType::Street,
        LocationType::Address,
        LocationType::Poi,
        LocationType::Building,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LocationType::Country => "country",
            LocationType::State => "state",
            LocationType::City => "city",
            LocationType::Neighborhood => "neighborhood",
            LocationType::Street => "street",
            LocationType::Address => "address",
            LocationType::Poi => "poi",
            LocationType::Building => "building",
        }
    }

    /// Coarse grouping of the type: administrative region, populated place,
    /// or a point-like location.
    pub fn class(&self) -> &'static str {
        match self {
            LocationType::Country | LocationType::State => "region",
            LocationType::City | LocationType::Neighborhood => "locality",
            _ => "point",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    /// Searching guest; attribution only links a booking to the same guest's searches.
    pub guest_id: u64,
    pub location_id: String,
    pub metro_id: String,
    pub surface_cell_id: String,
    pub location_type: LocationType,
    pub country_code: String,
    pub guests: u32,
    pub is_mobile_app: bool,
    pub device_type: String,
    pub lead_days: u32,
    pub trip_length_nights: u32,
    pub is_weekend_trip: bool,
    pub checkin_day_of_year: u32,
    pub checkout_day_of_year: u32,
    pub search_day_of_year: u32,
    pub center: GeoPoint,
    #[serde(default)]
    pub admin_bounds: Option<BoundingBox>,
    pub search_day_index: u32,
}

impl SearchRequest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Data(format!("request for {}: {m}", self.location_id)));
        if !self.center.is_valid() {
            return bad("center out of range");
        }
        if self.guests < 1 {
            return bad("guests must be >= 1");
        }
        if self.trip_length_nights < 1 {
            return bad("trip length must be >= 1 night");
        }
        for d in [self.checkin_day_of_year, self.checkout_day_of_year, self.search_day_of_year] {
            if !(1..=366).contains(&d) {
                return bad("day of year outside [1, 366]");
            }
        }
        if self.checkout_day_of_year <= self.checkin_day_of_year {
            return bad("checkout must be after checkin");
        }
        if self.checkin_day_of_year < self.search_day_of_year
            || self.checkin_day_of_year - self.search_day_of_year != self.lead_days
        {
            return bad("lead days inconsistent with checkin and search dates");
        }
        if let Some(b) = &self.admin_bounds {
            if !b.is_valid() {
                return bad("admin bounds invalid");
            }
        }
        Ok(())
    }

    /// Raw categorical values in slot order.
    pub fn categorical_values(&self) -> [String; N_CATEGORICAL] {
        [
            self.location_id.clone(),
            self.metro_id.clone(),
            self.surface_cell_id.clone(),
            self.location_type.as_str().to_string(),
            self.location_type.class().to_string(),
            self.country_code.clone(),
            if self.is_mobile_app { "app" } else { "web" }.to_string(),
            self.device_type.clone(),
            weekday(self.checkin_day_of_year).to_string(),
            weekday(self.search_day_of_year).to_string(),
        ]
    }

    /// Continuous values before standardization.
    pub fn raw_continuous(&self) -> [f64; N_CONTINUOUS] {
        let (ci_sin, ci_cos) = cyclic(self.checkin_day_of_year);
        let (s_sin, s_cos) = cyclic(self.search_day_of_year);
        [
            self.guests as f64,
            bool_f(self.is_mobile_app),
            self.lead_days as f64,
            self.trip_length_nights as f64,
            bool_f(self.is_weekend_trip),
            ci_sin,
            ci_cos,
            s_sin,
            s_cos,
        ]
    }
}

fn bool_f(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `(sin, cos)` of `2π·day/366`.
pub fn cyclic(day_of_year: u32) -> (f64, f64) {
    (2.0 * PI * day_of_year as f64 / DAYS_PER_CYCLE).sin_cos()
}

/// Weekday index, 0 = Monday, with day 1 a Monday.
pub fn weekday(day_of_year: u32) -> u32 {
    (day_of_year + 6) % 7
}

pub fn surface_cell_id(p: GeoPoint) -> String {
    format!(
        "{}:{}",
        (p.lat / SURFACE_CELL_DEG).floor() as i64,
        (p.lng / SURFACE_CELL_DEG).floor() as i64
    )
}

/// Per-slot raw ID → dense index maps. Index 0 is out-of-vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<Vec<String>>,
    index: Vec<HashMap<String, u32>>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    slots: Vec<Vec<String>>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        let index = r
            .slots
            .iter()
            .map(|toks| toks.iter().enumerate().map(|(i, t)| (t.clone(), i as u32 + 1)).collect())
            .collect();
        Vocabulary { tokens: r.slots, index }
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr { slots: v.tokens }
    }
}

impl Vocabulary {
    /// Vocabulary size per slot, counting the OOV row.
    pub fn sizes(&self) -> [usize; N_CATEGORICAL] {
        std::array::from_fn(|i| self.tokens.get(i).map_or(0, Vec::len) + 1)
    }

    pub fn lookup(&self, slot: usize, raw: &str) -> u32 {
        self.index[slot].get(raw).copied().unwrap_or(0)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (slot, toks) in self.tokens.iter().enumerate() {
            h.update((slot as u64).to_le_bytes());
            for t in toks {
                h.update((t.len() as u64).to_le_bytes());
                h.update(t.as_bytes());
            }
        }
        hex_digest(&h.finalize()[..16])
    }

    fn validate(&self) -> Result<()> {
        if self.tokens.len() != N_CATEGORICAL {
            return Err(Error::Data(format!(
                "vocabulary has {} slots, expected {N_CATEGORICAL}",
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds vocabularies in first-seen order over `corpus`.
pub fn build_vocab<'a, I>(corpus: I) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a SearchRequest>,
{
    let mut tokens: Vec<Vec<String>> = vec![Vec::new(); N_CATEGORICAL];
    let mut index: Vec<HashMap<String, u32>> = vec![HashMap::new(); N_CATEGORICAL];
    let mut seen_any = false;
    for req in corpus {
        seen_any = true;
        for (slot, raw) in req.categorical_values().into_iter().enumerate() {
            if !index[slot].contains_key(&raw) {
                tokens[slot].push(raw.clone());
                index[slot].insert(raw, tokens[slot].len() as u32);
            }
        }
    }
    if !seen_any {
        return Err(Error::Empty("vocabulary corpus"));
    }
    Ok(Vocabulary { tokens, index })
}

/// Training-corpus mean and standard deviation of each continuous slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; N_CONTINUOUS],
    pub std: [f64; N_CONTINUOUS],
}

impl FeatureStats {
    pub fn identity() -> Self {
        FeatureStats {
            mean: [0.0; N_CONTINUOUS],
            std: [1.0; N_CONTINUOUS],
        }
    }

    pub fn from_corpus<'a, I>(corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SearchRequest>,
    {
        let mut n = 0usize;
        let mut sum = [0.0; N_CONTINUOUS];
        let mut sum_sq = [0.0; N_CONTINUOUS];
        for req in corpus {
            n += 1;
            for (i, v) in req.raw_continuous().into_iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        if n == 0 {
            return Err(Error::Empty("feature statistics corpus"));
        }
        let nf = n as f64;
        let mean = sum.map(|s| s / nf);
        let std = std::array::from_fn(|i| {
            let var = (sum_sq[i] / nf - mean[i] * mean[i]).max(0.0);
            var.sqrt().max(STD_FLOOR)
        });
        Ok(FeatureStats { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub categorical: [u32; N_CATEGORICAL],
    pub continuous: [f64; N_CONTINUOUS],
}

impl FeatureVector {
    /// Stable byte encoding, used to key per-request randomness.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * N_CATEGORICAL + 8 * N_CONTINUOUS);
        for c in self.categorical {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in self.continuous {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }
}

pub fn encode(req: &SearchRequest, vocab: &Vocabulary, stats: &FeatureStats) -> FeatureVector {
    let raw = req.categorical_values();
    let categorical = std::array::from_fn(|slot| vocab.lookup(slot, &raw[slot]));
    let cont = req.raw_continuous();
    let continuous = std::array::from_fn(|i| (cont[i] - stats.mean[i]) / stats.std[i].max(STD_FLOOR));
    FeatureVector { categorical, continuous }
}

/// Embedding width for a slot with `cardinality` rows.
pub fn embedding_dim(cardinality: usize) -> usize {
    ((1.6 * (cardinality as f64).powf(0.25)).ceil() as usize).clamp(1, 16)
}

/// Vocabulary and continuous statistics, stored together with checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub vocab: Vocabulary,
    pub stats: FeatureStats,
}

impl Featurizer {
    pub fn fit<'a, I>(corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SearchRequest> + Clone,
    {
        Ok(Featurizer {
            vocab: build_vocab(corpus.clone())?,
            stats: FeatureStats::from_corpus(corpus)?,
        })
    }

    pub fn encode(&self, req: &SearchRequest) -> FeatureVector {
        encode(req, &self.vocab, &self.stats)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Featurizer = serde_json::from_str(s)?;
        f.vocab.validate()?;
        Ok(f)
    }
}

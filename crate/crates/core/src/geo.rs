//! Geographic primitives: points, axis-aligned boxes, and the degree/kilometer
//! conversions shared by the losses, the policies and the metrics.
//!
//! Everything here works on a spherical Earth with separable axes. Longitude
//! distances are scaled by `cos(ref_lat)`, where `ref_lat` is the latitude of
//! the search (or box) center. Boxes never wrap the antimeridian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Kilometers per degree along a great circle.
pub const KM_PER_DEG: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

/// Heuristic expansion curve `max(1, ALPHA + BETA * ln(d + 1))`.
pub const EXPANSION_ALPHA: f64 = 2.9;
pub const EXPANSION_BETA: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lng: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lng: f64) -> Result<Self> {
        let p = GeoPoint { lat, lng };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(Error::InvalidArgument(format!(
                "point ({lat}, {lng}) outside [-90,90]x[-180,180]"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lng)
    }

    pub fn clamped(self) -> Self {
        GeoPoint {
            lat: self.lat.clamp(-90.0, 90.0),
            lng: self.lng.clamp(-180.0, 180.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Lat,
    Lng,
}

/// Closed axis-aligned box with `sw <= ne` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub sw: GeoPoint,
    pub ne: GeoPoint,
}

impl BoundingBox {
    pub fn new(sw: GeoPoint, ne: GeoPoint) -> Result<Self> {
        let b = BoundingBox { sw, ne };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidArgument(format!(
                "box sw=({}, {}) ne=({}, {}) is inverted or out of range",
                sw.lat, sw.lng, ne.lat, ne.lng
            )))
        }
    }

    pub fn from_corners(sw_lat: f64, sw_lng: f64, ne_lat: f64, ne_lng: f64) -> Result<Self> {
        Self::new(GeoPoint { lat: sw_lat, lng: sw_lng }, GeoPoint { lat: ne_lat, lng: ne_lng })
    }

    /// The whole valid lat/lng plane.
    pub fn world() -> Self {
        BoundingBox {
            sw: GeoPoint { lat: -90.0, lng: -180.0 },
            ne: GeoPoint { lat: 90.0, lng: 180.0 },
        }
    }

    pub fn degenerate(at: GeoPoint) -> Self {
        BoundingBox { sw: at, ne: at }
    }

    pub fn is_valid(&self) -> bool {
        self.sw.is_valid()
            && self.ne.is_valid()
            && self.sw.lat <= self.ne.lat
            && self.sw.lng <= self.ne.lng
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: 0.5 * (self.sw.lat + self.ne.lat),
            lng: 0.5 * (self.sw.lng + self.ne.lng),
        }
    }

    /// `other` lies entirely inside `self` (closed).
    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.sw.lat <= other.sw.lat
            && self.sw.lng <= other.sw.lng
            && self.ne.lat >= other.ne.lat
            && self.ne.lng >= other.ne.lng
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        contains(self, p)
    }

    /// Smallest box holding every point, or `None` for an empty iterator.
    pub fn enclosing<I: IntoIterator<Item = GeoPoint>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = BoundingBox::degenerate(first);
        for p in it {
            b.sw.lat = b.sw.lat.min(p.lat);
            b.sw.lng = b.sw.lng.min(p.lng);
            b.ne.lat = b.ne.lat.max(p.lat);
            b.ne.lng = b.ne.lng.max(p.lng);
        }
        Some(b)
    }

    pub fn clamped(self) -> Self {
        BoundingBox {
            sw: self.sw.clamped(),
            ne: self.ne.clamped(),
        }
    }
}

/// Outward extents from the search center, in degrees, in the order
/// `[sw_lat, ne_lat, sw_lng, ne_lng]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtentOffsets {
    pub sw_lat: f64,
    pub ne_lat: f64,
    pub sw_lng: f64,
    pub ne_lng: f64,
}

impl ExtentOffsets {
    pub fn new(sw_lat: f64, ne_lat: f64, sw_lng: f64, ne_lng: f64) -> Self {
        ExtentOffsets { sw_lat, ne_lat, sw_lng, ne_lng }
    }

    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v, v)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.sw_lat, self.ne_lat, self.sw_lng, self.ne_lng]
    }

    pub fn is_nonnegative(&self) -> bool {
        self.to_array().iter().all(|v| *v >= 0.0)
    }

    /// Recovers the extents that place `b`'s corners around `center`.
    pub fn between(center: GeoPoint, b: &BoundingBox) -> Self {
        Self::new(
            center.lat - b.sw.lat,
            b.ne.lat - center.lat,
            center.lng - b.sw.lng,
            b.ne.lng - center.lng,
        )
    }
}

/// Corners before any clamping; may be inverted when offsets are negative.
pub fn raw_corners(center: GeoPoint, o: ExtentOffsets) -> (GeoPoint, GeoPoint) {
    (
        GeoPoint {
            lat: center.lat - o.sw_lat,
            lng: center.lng - o.sw_lng,
        },
        GeoPoint {
            lat: center.lat + o.ne_lat,
            lng: center.lng + o.ne_lng,
        },
    )
}

/// Places `offsets` around `center` and clamps to the valid lat/lng ranges.
///
/// Negative extents are treated as zero so the result is always a valid box.
pub fn to_box(center: GeoPoint, offsets: ExtentOffsets) -> BoundingBox {
    let o = ExtentOffsets::from_array(offsets.to_array().map(|v| v.max(0.0)));
    let (sw, ne) = raw_corners(center, o);
    BoundingBox { sw, ne }.clamped()
}

pub fn contains(b: &BoundingBox, p: GeoPoint) -> bool {
    b.sw.lat <= p.lat && p.lat <= b.ne.lat && b.sw.lng <= p.lng && p.lng <= b.ne.lng
}

/// Kilometers per degree along `axis` at latitude `ref_lat`.
pub fn km_per_deg(axis: Axis, ref_lat: f64) -> f64 {
    match axis {
        Axis::Lat => KM_PER_DEG,
        Axis::Lng => KM_PER_DEG * ref_lat.to_radians().cos(),
    }
}

pub fn axis_km(a_deg: f64, b_deg: f64, axis: Axis, ref_lat: f64) -> f64 {
    (a_deg - b_deg).abs() * km_per_deg(axis, ref_lat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSize {
    pub width_km: f64,
    pub height_km: f64,
    pub wh_sum_km: f64,
    pub area_km2: f64,
    pub diagonal_km: f64,
}

pub fn box_size_km(b: &BoundingBox) -> BoxSize {
    let ref_lat = b.center().lat;
    let width_km = axis_km(b.ne.lng, b.sw.lng, Axis::Lng, ref_lat);
    let height_km = axis_km(b.ne.lat, b.sw.lat, Axis::Lat, ref_lat);
    BoxSize {
        width_km,
        height_km,
        wh_sum_km: width_km + height_km,
        area_km2: width_km * height_km,
        diagonal_km: width_km.hypot(height_km),
    }
}

/// Log-scale expansion factor for an administrative box of diagonal `d_km`.
pub fn expansion_factor(d_km: f64) -> Result<f64> {
    if !(d_km >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "diagonal must be nonnegative, got {d_km}"
        )));
    }
    Ok((EXPANSION_ALPHA + EXPANSION_BETA * (d_km + 1.0).ln()).max(1.0))
}

/// Scales `b` about its center, multiplying each half-extent by `factor`.
pub fn scale_box(b: &BoundingBox, factor: f64) -> BoundingBox {
    let factor = factor.max(0.0);
    if factor == 1.0 {
        return *b;
    }
    let c = b.center();
    let half_lat = 0.5 * (b.ne.lat - b.sw.lat) * factor;
    let half_lng = 0.5 * (b.ne.lng - b.sw.lng) * factor;
    BoundingBox {
        sw: GeoPoint {
            lat: c.lat - half_lat,
            lng: c.lng - half_lng,
        },
        ne: GeoPoint {
            lat: c.lat + half_lat,
            lng: c.lng + half_lng,
        },
    }
    .clamped()
}

/// Axis-separable distance used for nearest-point ordering: the Euclidean
/// norm of the per-axis kilometer distances, with longitude scaled at `ref_lat`.
pub fn separable_km(a: GeoPoint, b: GeoPoint, ref_lat: f64) -> f64 {
    axis_km(a.lat, b.lat, Axis::Lat, ref_lat).hypot(axis_km(a.lng, b.lng, Axis::Lng, ref_lat))
}

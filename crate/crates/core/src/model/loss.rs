//! Booked-listing (BL), retrieval-bounds-size (RBS) and valid-bounds (VB)
//! losses, plus their weighted sum and its gradient with respect to the four
//! predicted extents.
//!
//! BL and RBS are in kilometers, VB in degrees. Longitude kilometers are taken
//! at the search center latitude so the loss is separable per axis.

use serde::{Deserialize, Serialize};

use crate::geo::{km_per_deg, raw_corners, Axis, BoundingBox, ExtentOffsets, GeoPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlMode {
    /// Distance from the booked point to the box, per axis; zero inside.
    #[default]
    Hinge,
    /// Sum of distances from all four bound coordinates to the booked point.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 250.0,
            beta: 1.0,
            gamma: 1_000_000.0,
        }
    }
}

/// BL loss for a (possibly inverted) box, in km.
pub fn bl_loss(b: &BoundingBox, booked: GeoPoint, mode: BlMode, ref_lat: f64) -> f64 {
    let k_lat = km_per_deg(Axis::Lat, ref_lat);
    let k_lng = km_per_deg(Axis::Lng, ref_lat);
    match mode {
        BlMode::Hinge => {
            k_lng * ((b.sw.lng - booked.lng).max(0.0) + (booked.lng - b.ne.lng).max(0.0))
                + k_lat * ((b.sw.lat - booked.lat).max(0.0) + (booked.lat - b.ne.lat).max(0.0))
        }
        BlMode::Absolute => {
            k_lng * ((b.sw.lng - booked.lng).abs() + (b.ne.lng - booked.lng).abs())
                + k_lat * ((b.sw.lat - booked.lat).abs() + (b.ne.lat - booked.lat).abs())
        }
    }
}

/// Width plus height in km; negative for inverted boxes.
pub fn rbs_loss(b: &BoundingBox, ref_lat: f64) -> f64 {
    km_per_deg(Axis::Lng, ref_lat) * (b.ne.lng - b.sw.lng)
        + km_per_deg(Axis::Lat, ref_lat) * (b.ne.lat - b.sw.lat)
}

/// Inversion penalty in degrees.
pub fn vb_loss(raw_sw: GeoPoint, raw_ne: GeoPoint) -> f64 {
    (raw_sw.lat - raw_ne.lat).max(0.0) + (raw_sw.lng - raw_ne.lng).max(0.0)
}

/// Weighted loss of `offsets` around `center` against the booked `label`.
pub fn total_loss(
    center: GeoPoint,
    label: GeoPoint,
    offsets: ExtentOffsets,
    weights: &LossWeights,
    mode: BlMode,
) -> f64 {
    let (sw, ne) = raw_corners(center, offsets);
    let b = BoundingBox { sw, ne };
    weights.alpha * bl_loss(&b, label, mode, center.lat)
        + weights.beta * rbs_loss(&b, center.lat)
        + weights.gamma * vb_loss(sw, ne)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Total loss and its (sub)gradient with respect to `[sw_lat, ne_lat, sw_lng, ne_lng]`.
/// Kinks take subgradient 0.
pub fn loss_and_offset_grad(
    center: GeoPoint,
    label: GeoPoint,
    offsets: ExtentOffsets,
    weights: &LossWeights,
    mode: BlMode,
) -> (f64, [f64; 4]) {
    let loss = total_loss(center, label, offsets, weights, mode);
    let k = [
        km_per_deg(Axis::Lat, center.lat),
        km_per_deg(Axis::Lat, center.lat),
        km_per_deg(Axis::Lng, center.lat),
        km_per_deg(Axis::Lng, center.lat),
    ];
    let (sw, ne) = raw_corners(center, offsets);
    // d(corner)/d(offset): sw corners move by -1, ne corners by +1
    let corner = [sw.lat, ne.lat, sw.lng, ne.lng];
    let target = [label.lat, label.lat, label.lng, label.lng];
    let dir = [-1.0, 1.0, -1.0, 1.0];

    let mut g = [0.0; 4];
    for i in 0..4 {
        let bl = match mode {
            BlMode::Hinge => {
                // sw: max(0, sw - x); ne: max(0, x - ne)
                let outside = if dir[i] < 0.0 {
                    corner[i] - target[i]
                } else {
                    target[i] - corner[i]
                };
                if outside > 0.0 {
                    -k[i]
                } else {
                    0.0
                }
            }
            BlMode::Absolute => dir[i] * k[i] * sign(corner[i] - target[i]),
        };
        g[i] = weights.alpha * bl + weights.beta * k[i];
    }
    let o = offsets.to_array();
    if o[0] + o[1] < 0.0 {
        g[0] -= weights.gamma;
        g[1] -= weights.gamma;
    }
    if o[2] + o[3] < 0.0 {
        g[2] -= weights.gamma;
        g[3] -= weights.gamma;
    }
    (loss, g)
}

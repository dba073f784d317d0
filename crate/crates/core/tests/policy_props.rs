use std::sync::{Arc, OnceLock};

use georetrieval::featurizer::{LocationType, SearchRequest};
use georetrieval::geo::{BoundingBox, GeoPoint};
use georetrieval::harness::{generate_log, split_examples};
use georetrieval::model::{fit_estimator, Estimator, TrainConfig};
use georetrieval::policy::{
    build_stats_table, heuristic_bounds, mc_dropout_score, ucb_bounds, FixedBounds, HeuristicConfig, McConfig,
    Policy, SigmaMode,
};
use georetrieval::simworld::{generate_world, sample_search, World, WorldConfig};
use proptest::prelude::*;

const KM_PER_DEG: f64 = 111.195;

struct Fixture {
    world: World,
    model: Arc<Estimator>,
    stats: Policy,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = WorldConfig { destinations: 12, metros: 4, listings: 1500, searches_per_day: 60, ..Default::default() };
        let world = generate_world(&cfg, 11).unwrap();
        let log = generate_log(&world, 0..10, &Policy::Fixed(FixedBounds::World)).unwrap();
        let (train, _) = split_examples(&log, 10);
        let tc = TrainConfig { epochs: 3, hidden: 24, dropout_rate: 0.5, batch_size: 32, ..Default::default() };
        let model = Arc::new(fit_estimator(&train, &tc).unwrap().0);
        let table = build_stats_table(train.iter().map(|e| (e.request.location_id.as_str(), e.booked, e.request.center)))
            .unwrap();
        Fixture { world, model, stats: Policy::stats(table) }
    })
}

fn request(day: u32, idx: u32) -> SearchRequest {
    sample_search(&fixture().world, day, idx)
}

fn edge_request() -> impl Strategy<Value = SearchRequest> {
    (0u32..400, 0u32..200, -89.9f64..89.9, -179.9f64..179.9, 0usize..8, 1u32..17, any::<bool>()).prop_map(
        |(day, idx, lat, lng, t, guests, keep_admin)| {
            let mut r = request(day, idx);
            r.center = GeoPoint { lat, lng };
            r.location_type = LocationType::ALL[t];
            r.guests = guests;
            if !keep_admin {
                r.admin_bounds = None;
            }
            r.location_id = format!("unseen-{idx}");
            r
        },
    )
}

fn policies() -> Vec<Policy> {
    let f = fixture();
    vec![
        Policy::Heuristic(HeuristicConfig::default()),
        f.stats.clone(),
        Policy::MlMean { model: f.model.clone(), n_samples: 4 },
        Policy::McDropoutUcb {
            model: f.model.clone(),
            mc: McConfig { n_samples: 4, lambda: 2.0, sigma_mode: SigmaMode::Mad },
        },
        Policy::Fixed(FixedBounds::World),
        Policy::Fixed(FixedBounds::Degenerate),
    ]
}

fn valid(b: &BoundingBox) -> bool {
    b.is_valid() && [b.sw.lat, b.sw.lng, b.ne.lat, b.ne.lng].iter().all(|v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_policy_is_total(day in 0u32..400, idx in 0u32..200) {
        let r = request(day, idx);
        for p in policies() {
            let b = p.bounds(&r).unwrap();
            prop_assert!(valid(&b), "{} gave {b:?}", p.name());
        }
    }

    #[test]
    fn every_policy_is_total_off_distribution(r in edge_request()) {
        for p in policies() {
            let b = p.bounds(&r).unwrap();
            prop_assert!(valid(&b), "{} gave {b:?}", p.name());
        }
    }

    #[test]
    fn ucb_is_monotone_in_lambda(day in 0u32..400, idx in 0u32..200, l1 in 0.0f64..5.0, dl in 0.0f64..5.0) {
        let r = request(day, idx);
        let m = &fixture().model;
        let mc = |lambda| McConfig { n_samples: 8, lambda, sigma_mode: SigmaMode::Mad };
        let (small, _) = ucb_bounds(m, &r, &mc(l1)).unwrap();
        let (large, _) = ucb_bounds(m, &r, &mc(l1 + dl)).unwrap();
        prop_assert!(large.contains_box(&small));
    }

    #[test]
    fn scoring_is_pure(day in 0u32..400, idx in 0u32..200, std_mode in any::<bool>()) {
        let r = request(day, idx);
        let m = &fixture().model;
        let mode = if std_mode { SigmaMode::Std } else { SigmaMode::Mad };
        let fv = m.encode(&r);
        let a = mc_dropout_score(m, &fv, 8, mode).unwrap();
        let b = mc_dropout_score(m, &m.encode(&r.clone()), 8, mode).unwrap();
        prop_assert_eq!(a, b);
        let mc = McConfig { n_samples: 8, lambda: 2.0, sigma_mode: mode };
        prop_assert_eq!(ucb_bounds(m, &r, &mc).unwrap(), ucb_bounds(m, &r, &mc).unwrap());
    }

    #[test]
    fn stats_core_box_matches_nearest_points(
        lat in -60.0f64..60.0,
        lng in -170.0f64..170.0,
        offsets in prop::collection::vec((-0.5f64..0.5, -0.5f64..0.5), 1..1000),
        containment in 0.5f64..1.0,
    ) {
        let center = GeoPoint { lat, lng };
        let points: Vec<GeoPoint> =
            offsets.iter().map(|&(a, b)| GeoPoint { lat: lat + a, lng: lng + b }).collect();
        let table = build_stats_table(points.iter().map(|&p| ("x", p, center))).unwrap();
        let entry = table.get("x").unwrap();

        let n = points.len();
        let k = ((containment * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        let dist = |p: &GeoPoint| {
            let dy = (p.lat - lat) * KM_PER_DEG;
            let dx = (p.lng - lng) * KM_PER_DEG * lat.to_radians().cos();
            (dx * dx + dy * dy).sqrt()
        };
        let mut sorted = points.clone();
        sorted.sort_by(|a, b| dist(a).total_cmp(&dist(b)));
        let nearest = &sorted[..k];
        let lo_lat = nearest.iter().map(|p| p.lat).fold(f64::INFINITY, f64::min);
        let hi_lat = nearest.iter().map(|p| p.lat).fold(f64::NEG_INFINITY, f64::max);
        let lo_lng = nearest.iter().map(|p| p.lng).fold(f64::INFINITY, f64::min);
        let hi_lng = nearest.iter().map(|p| p.lng).fold(f64::NEG_INFINITY, f64::max);

        let core = entry.core_box(containment);
        prop_assert_eq!(entry.retained(containment), k);
        prop_assert_eq!([core.sw.lat, core.sw.lng, core.ne.lat, core.ne.lng], [lo_lat, lo_lng, hi_lat, hi_lng]);
        prop_assert!(nearest.iter().all(|p| core.contains(*p)));
    }
}

#[test]
fn heuristic_uses_admin_bounds_for_named_areas() {
    let mut r = request(0, 0);
    let admin = BoundingBox::from_corners(1.0, 2.0, 3.0, 4.0).unwrap();
    r.admin_bounds = Some(admin);
    for t in [LocationType::Country, LocationType::State, LocationType::Neighborhood] {
        r.location_type = t;
        assert_eq!(heuristic_bounds(&r, &HeuristicConfig::default()), admin);
    }
}

#[test]
fn stats_falls_back_to_heuristic_for_unseen_destinations() {
    let mut r = request(3, 5);
    r.location_id = "never-booked".into();
    let h = heuristic_bounds(&r, &HeuristicConfig::default());
    assert_eq!(fixture().stats.bounds(&r).unwrap(), h);
}

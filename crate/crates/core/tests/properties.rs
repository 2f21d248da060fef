use blue_core::batch::make_batch;
use blue_core::blur::{build_hierarchy, PrecisionLevels};
use blue_core::geo::{haversine_distance, spatial_context, temporal_context};
use blue_core::model::{BlueModel, ModelConfig};
use blue_core::pipeline::RunConfig;
use blue_core::preprocess::{reduce_redundancy, remove_drift, PreprocessConfig};
use blue_core::tasks::metrics::retrieval_report;
use blue_core::tasks::{eval_msts, msts_ranks};
use blue_core::{BoundingBox, GpsPoint, Trajectory};
use proptest::prelude::*;

/// Random walks with step sizes around the level-2 cell size, so that runs
/// of equal keys at both coarse levels are common. Coordinates may be
/// negative to exercise rounding of both signs.
fn walk(max_len: usize) -> impl Strategy<Value = Trajectory> {
    (
        -179.0..179.0f64,
        -80.0..80.0f64,
        0i64..2_000_000_000,
        prop::collection::vec((-0.003..0.003f64, -0.003..0.003f64, 0i64..90, any::<bool>()), 1..max_len),
    )
        .prop_map(|(lon0, lat0, t0, steps)| {
            let (mut lon, mut lat, mut t) = (lon0, lat0, t0);
            let mut points = Vec::with_capacity(steps.len());
            for (dlon, dlat, dt, stay) in steps {
                points.push(GpsPoint::new(lon, lat, t));
                if !stay {
                    lon = (lon + dlon).clamp(-180.0, 180.0);
                    lat = (lat + dlat).clamp(-89.0, 89.0);
                }
                t += dt;
            }
            Trajectory::new("w", points, None).unwrap()
        })
}

fn runs<K: PartialEq + Copy>(keys: &[K]) -> (Vec<K>, Vec<usize>) {
    let mut out: Vec<(K, usize)> = Vec::new();
    for &k in keys {
        match out.last_mut() {
            Some((last, n)) if *last == k => *n += 1,
            _ => out.push((k, 1)),
        }
    }
    out.into_iter().unzip()
}

/// Per-point rounding to 3 decimals, then the level-2 cells rounded again
/// to 2 decimals.
fn scan_oracle(t: &Trajectory) -> (Vec<usize>, Vec<usize>) {
    let cells2: Vec<(i64, i64)> = t
        .points
        .iter()
        .map(|p| ((p.lon * 1e3).round() as i64, (p.lat * 1e3).round() as i64))
        .collect();
    let (keys2, l12) = runs(&cells2);
    let cells3: Vec<(i64, i64)> = keys2
        .iter()
        .map(|&(a, b)| ((a as f64 / 10.0).round() as i64, (b as f64 / 10.0).round() as i64))
        .collect();
    let (_, l23) = runs(&cells3);
    (l12, l23)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn hierarchy_matches_scan_oracle(t in walk(80)) {
        let h = build_hierarchy(&t);
        let (l12, l23) = scan_oracle(&t);
        prop_assert_eq!(&h.lengths_12.0, &l12);
        prop_assert_eq!(&h.lengths_23.0, &l23);
    }

    #[test]
    fn hierarchy_conserves_and_nests(t in walk(80)) {
        let h = build_hierarchy(&t);
        prop_assert!(h.validate().is_ok());
        prop_assert!(h.level_len(3) <= h.level_len(2) && h.level_len(2) <= h.level_len(1));
        let l13 = h.lengths_13();
        prop_assert_eq!(l13.total(), t.len());
        let b2 = h.lengths_12.offsets();
        prop_assert!(l13.offsets().iter().all(|b| b2.contains(b)));
    }

    #[test]
    fn coarser_precisions_never_lengthen(t in walk(60)) {
        let fine = blue_core::blur::build_hierarchy_with(&t, PrecisionLevels([5, 4, 3]));
        let coarse = build_hierarchy(&t);
        prop_assert!(coarse.level_len(2) <= fine.level_len(2));
        prop_assert!(coarse.level_len(3) <= fine.level_len(3));
    }

    #[test]
    fn context_values_stay_in_range(t in walk(40), d_max in 10.0..5000.0f64) {
        let bbox = BoundingBox::fit([&t], d_max).unwrap();
        for c in spatial_context(&t, &bbox).unwrap() {
            prop_assert!(c.0.iter().all(|v| (0.0..=1.0).contains(v)), "{:?}", c);
            prop_assert!(c.0[3] < 1.0 && c.0[5] < 1.0);
        }
        for p in &t.points {
            let c = temporal_context(p.t);
            prop_assert!(c.0.iter().all(|v| (-0.5..=0.5).contains(v)), "{:?}", c);
        }
    }

    #[test]
    fn reversing_a_segment_swaps_directions(
        a in (-170.0..170.0f64, -80.0..80.0f64),
        b in (-0.05..0.05f64, -0.05..0.05f64),
    ) {
        let p = GpsPoint::new(a.0, a.1, 0);
        let q = GpsPoint::new(a.0 + b.0, a.1 + b.1, 10);
        let fwd = Trajectory::new("f", vec![p, q], None).unwrap();
        let rev = Trajectory::new("r", vec![GpsPoint { t: 0, ..q }, GpsPoint { t: 10, ..p }], None).unwrap();
        let bbox = BoundingBox::fit([&fwd], 1e4).unwrap();
        let f = spatial_context(&fwd, &bbox).unwrap();
        let r = spatial_context(&rev, &bbox).unwrap();
        prop_assert_eq!(f[0].0[2], r[1].0[4]);
        prop_assert_eq!(f[1].0[4], r[0].0[2]);
        prop_assert_eq!(f[0].0[3], r[1].0[5]);
        prop_assert_eq!(f[1].0[5], r[0].0[3]);
    }

    #[test]
    fn haversine_is_a_metric(
        a in (-180.0..180.0f64, -89.0..89.0f64),
        b in (-180.0..180.0f64, -89.0..89.0f64),
        c in (-180.0..180.0f64, -89.0..89.0f64),
    ) {
        let [a, b, c] = [a, b, c].map(|(lon, lat)| GpsPoint::new(lon, lat, 0));
        let ab = haversine_distance(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(haversine_distance(&a, &a), 0.0);
        prop_assert!((ab - haversine_distance(&b, &a)).abs() <= 1e-9 * ab.max(1.0));
        let via = haversine_distance(&a, &c) + haversine_distance(&c, &b);
        prop_assert!(ab <= via * (1.0 + 1e-6) + 1e-6);
    }

    #[test]
    fn drift_removal_is_idempotent_and_bounds_speed(t in walk(80), v_max in 0.5..40.0f64) {
        let cfg = PreprocessConfig { v_max, ..PreprocessConfig::default() };
        let once = remove_drift(&t, &cfg);
        prop_assert_eq!(&remove_drift(&once, &cfg), &once);
        prop_assert_eq!(once.points[0], t.points[0]);
        for w in once.points.windows(2) {
            let d = haversine_distance(&w[0], &w[1]);
            let dt = (w[1].t - w[0].t) as f64;
            prop_assert!(d == 0.0 || (dt > 0.0 && d / dt <= v_max));
        }
    }

    #[test]
    fn redundancy_reduction_is_idempotent(t in walk(120), radius in 5.0..400.0f64, count in 1usize..8) {
        let cfg = PreprocessConfig { cluster_radius: radius, cluster_count: count, ..PreprocessConfig::default() };
        let once = reduce_redundancy(&t, &cfg);
        prop_assert_eq!(&reduce_redundancy(&once, &cfg), &once);
        prop_assert!(once.len() <= t.len());
        prop_assert_eq!(once.points.first(), t.points.first());
        prop_assert_eq!(once.points.last(), t.points.last());
    }

    #[test]
    fn retrieval_report_is_bounded(ranks in prop::collection::vec(1usize..50, 1..40)) {
        let r = retrieval_report(&ranks).unwrap();
        prop_assert!(r.mr >= 1.0);
        prop_assert!(0.0 <= r.hr1 && r.hr1 <= r.hr5 && r.hr5 <= 1.0);
    }

    #[test]
    fn search_is_invariant_to_database_order(
        db in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 3..30),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..6),
        shift in any::<prop::sample::Index>(),
        dup in any::<bool>(),
    ) {
        let mut db = db;
        if dup {
            // an exact tie between two entries
            db[1] = db[0].clone();
        }
        let truth: Vec<usize> = picks.iter().map(|i| i.index(db.len())).collect();
        let queries: Vec<Vec<f64>> = truth.iter().map(|&t| db[t].iter().map(|v| v * 0.9).collect()).collect();
        let base = msts_ranks(&queries, &db, &truth).unwrap();

        // A rotation keeps the relative order of all but the wrapped block;
        // with a stable tie rule only ties that change order may move.
        let k = shift.index(db.len());
        let rotated: Vec<Vec<f64>> = db[k..].iter().chain(&db[..k]).cloned().collect();
        let moved: Vec<usize> = truth.iter().map(|&t| (t + db.len() - k) % db.len()).collect();
        let r = msts_ranks(&queries, &rotated, &moved).unwrap();
        let has_ties = (0..queries.len()).any(|q| {
            let s: Vec<f64> = db.iter().map(|v| v.iter().zip(&queries[q]).map(|(a, b)| a * b).sum()).collect();
            s.iter().enumerate().any(|(i, x)| i != truth[q] && *x == s[truth[q]])
        });
        if has_ties {
            prop_assert!(base.iter().zip(&r).all(|(a, b)| a.abs_diff(*b) <= 1));
        } else {
            prop_assert_eq!(&base, &r);
            prop_assert_eq!(eval_msts(&queries, &db, &truth).unwrap(), eval_msts(&queries, &rotated, &moved).unwrap());
        }
    }

    #[test]
    fn config_render_round_trips(d in 1usize..16, epochs in 1usize..50, lr in 1e-6..1e-1f64, seed in any::<u32>()) {
        let mut c = RunConfig::default();
        c.model.d = 2 * d * c.model.heads;
        c.train.epochs = epochs;
        c.train.lr = lr;
        c.set_seed(seed as u64);
        prop_assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// A trajectory's representation does not depend on its batch mates.
    #[test]
    fn embeddings_ignore_batch_mates(a in walk(30), b in walk(30), c in walk(30)) {
        let cfg = ModelConfig { d: 8, heads: 2, layers: [1, 1, 1], dropout: 0.0, ..ModelConfig::default() };
        let model = BlueModel::new(cfg, 3).unwrap();
        let trajs = [a, b, c];
        let bbox = BoundingBox::fit(&trajs, 1000.0).unwrap();
        let precisions = PrecisionLevels::default();
        let all = model.embed(&make_batch(&[&trajs[0], &trajs[1], &trajs[2]], &bbox, precisions).unwrap());
        let shuffled = model.embed(&make_batch(&[&trajs[2], &trajs[0], &trajs[1]], &bbox, precisions).unwrap());
        for (i, t) in trajs.iter().enumerate() {
            let alone = model.embed(&make_batch(&[t], &bbox, precisions).unwrap());
            prop_assert_eq!(&alone[0], &all[i]);
        }
        prop_assert_eq!(&shuffled[1], &all[0]);
        prop_assert_eq!(&shuffled[2], &all[1]);
        prop_assert_eq!(&shuffled[0], &all[2]);
    }
}

use proptest::prelude::*;
use stereoscale::config::PipelineConfig;
use stereoscale::dataset::{sample_distances, SampleData};
use stereoscale::geometry::{disparity_from_depth, disparity_from_depth_with};
use stereoscale::scene::{generate_scene, render_depth};
use stereoscale::{DepthMap, Exec, Inventory, SceneVariant, ViewingGeometry};

fn geometry() -> impl Strategy<Value = (ViewingGeometry, Vec<f64>)> {
    (2usize..10, 2usize..10, 0.03f64..0.09, 10.0f64..120.0).prop_flat_map(|(w, h, ipd, fov)| {
        (0..w, 0..h, prop::collection::vec(0.1f64..6.0, w * h)).prop_map(move |(fu, fv, depth)| {
            (ViewingGeometry::new(ipd, fov, w, h).unwrap().with_fixation(fu, fv).unwrap(), depth)
        })
    })
}

proptest! {
    #[test]
    fn fixation_pixel_has_zero_disparity((geom, depth) in geometry()) {
        let (w, h) = (geom.width_px, geom.height_px);
        let f = depth[geom.fixation_px.1 * w + geom.fixation_px.0];
        let map = DepthMap::new(w, h, depth, vec![true; w * h]).unwrap();
        let d = disparity_from_depth(&geom, &map, f).unwrap();
        prop_assert_eq!(d.at(geom.fixation_px.0, geom.fixation_px.1), 0.0);
        prop_assert!(d.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mirroring_commutes_with_disparity((geom, depth) in geometry()) {
        let (w, h) = (geom.width_px, geom.height_px);
        let (fu, fv) = geom.fixation_px;
        let f = depth[fv * w + fu];
        let map = DepthMap::new(w, h, depth, vec![true; w * h]).unwrap();
        let direct = disparity_from_depth(&geom, &map, f).unwrap().flipped_horizontal();
        let mirrored_geom = geom.with_fixation(w - 1 - fu, fv).unwrap();
        let mirrored = disparity_from_depth(&mirrored_geom, &map.flipped_horizontal(), f).unwrap();
        for (a, b) in direct.values.iter().zip(&mirrored.values) {
            prop_assert!((a - b).abs() <= 1e-15, "{} vs {}", a, b);
        }
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise((geom, depth) in geometry()) {
        let (w, h) = (geom.width_px, geom.height_px);
        let f = depth[geom.fixation_px.1 * w + geom.fixation_px.0];
        let map = DepthMap::new(w, h, depth, vec![true; w * h]).unwrap();
        let a = disparity_from_depth_with(&geom, &map, f, Exec::Sequential).unwrap();
        let b = disparity_from_depth_with(&geom, &map, f, Exec::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sample_files_round_trip(w in 1usize..6, h in 1usize..6, label in 0.25f64..2.5, seed in any::<u64>()) {
        let n = w * h;
        let disparity: Vec<f32> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 - 500.0) * 1e-4).collect();
        let mask: Vec<f32> = (0..n).map(|i| ((seed >> (i % 60)) & 1) as f32).collect();
        let s = SampleData { width: w, height: h, disparity, mask, label_distance_m: label };
        prop_assert_eq!(SampleData::decode(&s.encode()).unwrap(), s);
    }

    #[test]
    fn distances_respect_range(seed in any::<u64>(), lo in 0.1f64..1.0, span in 0.0f64..3.0) {
        let hi = lo + span;
        for d in sample_distances(seed, 50, lo, hi).unwrap() {
            prop_assert!(d >= lo && d <= hi);
        }
    }

    #[test]
    fn config_echo_round_trips(res in 8usize..2048, epochs in 1usize..500, lr in 1e-5f64..1e-1, det in any::<bool>()) {
        let mut cfg = PipelineConfig::default();
        cfg.resolution = res;
        cfg.max_epochs = epochs;
        cfg.learning_rate = lr;
        cfg.deterministic = det;
        prop_assert_eq!(PipelineConfig::parse(&cfg.echo()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hit_masks_do_not_depend_on_scale(seed in 0u64..50, s in 0.2f64..3.0) {
        let scene = generate_scene(seed, Inventory::default(), "p").unwrap();
        let geom = ViewingGeometry::square(32).unwrap();
        let a = render_depth(&scene, SceneVariant::FULL, &geom, 1.0).unwrap();
        let b = render_depth(&scene, SceneVariant::FULL, &geom, s).unwrap();
        prop_assert_eq!(&a.mask, &b.mask);
        for (x, y) in a.depth.iter().zip(&b.depth) {
            prop_assert!((x * s - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

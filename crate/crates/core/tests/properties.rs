use proptest::prelude::*;

use fieldscale::change::min_max;
use fieldscale::instances::{connected_components, polygonize, rasterize, Connectivity, PolygonizeOptions};
use fieldscale::io::{fields_to_geojson, geojson_to_fields, read_fsr, write_fsr, FsrRaster};
use fieldscale::losses::{loss_forward, loss_grad, random_problem, LossKind, LossSpec};
use fieldscale::mosaic::{median_composite, select_scenes_greedy, Scene, SceneStack};
use fieldscale::raster::{softmax, ClassGrid};
use fieldscale::robustness::{consistency, ConsistencySpec};
use fieldscale::synth::{world_geotransform, ConstantModel, StubMode, StubModel, StubModelSpec, BANDS, FRAMES};
use fieldscale::tiler::{enumerate_patches, gaussian_kernel, run_tiled};
use fieldscale::{BandStack, GeoTransform, LabelMask, LogitMap, TilingSpec, INTERIOR, UNKNOWN};

fn mask_strategy(max_side: usize) -> impl Strategy<Value = LabelMask> {
    (2..=max_side, 2..=max_side).prop_flat_map(|(h, w)| {
        proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(2u8)], h * w)
            .prop_map(move |data| LabelMask::new(h, w, data, world_geotransform()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patches_cover_every_pixel(h in 1usize..300, w in 1usize..300, s in 8usize..128, ov in 0usize..50) {
        let spec = TilingSpec::new(s, ov as f64 / 100.0).unwrap();
        let windows = enumerate_patches(h, w, &spec).unwrap();
        let mut hit = vec![false; h * w];
        for win in &windows {
            prop_assert!(win.row_end() <= h && win.col_end() <= w);
            prop_assert!(win.height == s.min(h) && win.width == s.min(w));
            for r in win.row_off..win.row_end() {
                for c in win.col_off..win.col_end() {
                    hit[r * w + c] = true;
                }
            }
        }
        prop_assert!(hit.into_iter().all(|x| x));
    }

    #[test]
    fn constant_model_stitches_to_constant(h in 16usize..90, w in 16usize..90, s in 16usize..40, level in -5.0f32..5.0) {
        let spec = TilingSpec::new(s, 0.25).unwrap();
        let kernel = gaussian_kernel(s, spec.default_sigma()).unwrap();
        let x = BandStack::from_data(FRAMES, BANDS, h, w, vec![0.0; FRAMES * BANDS * h * w], world_geotransform()).unwrap();
        let model = ConstantModel::new(vec![level, 0.0], FRAMES * BANDS);
        let out = run_tiled(&model, &x, &spec, &kernel, 2).unwrap();
        for &v in out.logits.plane(0) {
            prop_assert!((v - level).abs() <= 1e-5);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000) {
        let (z, _) = random_problem(seed, 3, 6, 5).unwrap();
        let p = softmax(&z).unwrap();
        for px in 0..30 {
            let s: f32 = (0..3).map(|c| p.plane(c)[px]).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn polygon_round_trip_any_block(mask in mask_strategy(24), block in 1usize..30) {
        let ids = connected_components(&mask, INTERIOR, Connectivity::Four);
        let opts = PolygonizeOptions { block_size: block, ..PolygonizeOptions::default() };
        let polys = polygonize(&ids, &opts).unwrap();
        prop_assert_eq!(polys.len(), ids.count());
        prop_assert_eq!(rasterize(&polys, ids.height(), ids.width()), ids.ids().to_vec());
        for p in &polys {
            prop_assert!((p.pixel_area() - p.pixel_count as f64).abs() < 1e-9);
        }
        prop_assert_eq!(polys, polygonize(&ids, &PolygonizeOptions::default()).unwrap());
    }

    #[test]
    fn geojson_round_trip(mask in mask_strategy(20)) {
        let gt = world_geotransform();
        let ids = connected_components(&mask, INTERIOR, Connectivity::Four);
        let polys = polygonize(&ids, &PolygonizeOptions::default()).unwrap();
        let back = geojson_to_fields(&fields_to_geojson(&polys, &gt), &gt).unwrap();
        prop_assert_eq!(rasterize(&back, ids.height(), ids.width()), ids.ids().to_vec());
    }

    #[test]
    fn losses_nonnegative_and_mask_invariant(seed in 0u64..500, k in 0usize..7) {
        let kind = LossKind::all_defaults()[k];
        let spec = LossSpec::new(kind);
        let (z, t) = random_problem(seed, 3, 6, 6).unwrap();
        let v = loss_forward(&spec, &z, &t).unwrap();
        prop_assert!(v >= -1e-12, "{} gave {}", kind, v);
        let n = 36;
        let mut data = z.values().to_vec();
        for (px, &lab) in t.data().iter().enumerate() {
            if lab == UNKNOWN {
                for c in 0..3 {
                    data[c * n + px] += 3.0;
                }
            }
        }
        let z2 = LogitMap::new(3, 6, 6, data, GeoTransform::default()).unwrap();
        prop_assert_eq!(v, loss_forward(&spec, &z2, &t).unwrap());
        let g = loss_grad(&spec, &z2, &t).unwrap();
        for (px, &lab) in t.data().iter().enumerate() {
            if lab == UNKNOWN {
                prop_assert!((0..3).all(|c| g[c * n + px] == 0.0));
            }
        }
    }

    #[test]
    fn noisy_consistency_in_unit_interval(seed in 0u64..200, sigma in 0.0f64..50.0) {
        let model = StubModel::rgbn(StubModelSpec::new(StubMode::Noisy { sigma, seed }, 10.0).unwrap()).unwrap();
        let x = BandStack::from_data(FRAMES, BANDS, 16, 16, vec![1.0; FRAMES * BANDS * 256], world_geotransform()).unwrap();
        let c = consistency(&model, &x, &ConsistencySpec::new(16, 12).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn min_max_maps_into_unit_interval(values in proptest::collection::vec(-1e6f64..1e6, 1..50)) {
        let m = min_max(&values);
        prop_assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        if values.iter().any(|&v| v != values[0]) {
            prop_assert!(m.contains(&0.0) && m.contains(&1.0));
        }
    }

    #[test]
    fn selection_depth_and_counts(seed in 0u64..300, t in 1usize..8, target in 1u32..6) {
        let mut rng = fieldscale::rng::Rng::new(seed);
        let (h, w) = (3, 4);
        let scenes: Vec<Scene> = (0..t)
            .map(|k| Scene {
                timestamp: format!("s{k}"),
                cloud_cover_pct: 0.0,
                bands: (0..h * w).map(|_| rng.uniform(0.0, 1.0) as f32).collect(),
                scl: vec![4; h * w],
                valid: (0..h * w).map(|_| rng.below(3) != 0).collect(),
            })
            .collect();
        let stack = SceneStack::new(1, h, w, scenes).unwrap();
        let valid = stack.valid_masks();
        let sel = select_scenes_greedy(&valid, target, 10).unwrap();
        let mut depth = vec![0u32; h * w];
        for &s in &sel.selected {
            for (d, &v) in depth.iter_mut().zip(&valid[s]) {
                *d += v as u32;
            }
        }
        prop_assert_eq!(&depth, &sel.coverage_depth);
        let comp = median_composite(&stack, &sel.selected, -1.0).unwrap();
        prop_assert_eq!(comp.counts, depth);
    }

    #[test]
    fn fsr_round_trip(seed in 0u64..100) {
        let dir = tempfile::tempdir().unwrap();
        let (z, t) = random_problem(seed, 3, 5, 7).unwrap();
        write_fsr(&dir.path().join("z"), &FsrRaster::from_logits(&z)).unwrap();
        write_fsr(&dir.path().join("t"), &FsrRaster::from_label_mask(&t)).unwrap();
        prop_assert_eq!(read_fsr(&dir.path().join("z")).unwrap().to_logits().unwrap(), z);
        prop_assert_eq!(read_fsr(&dir.path().join("t")).unwrap().to_label_mask().unwrap(), t);
    }
}

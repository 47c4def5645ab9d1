use bevtraj_core::scene::{augment, generate_scene, rasterize, RasterSample, SceneConfig, SceneKind, F_D, F_S};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kind_strategy() -> impl Strategy<Value = SceneKind> {
    prop::sample::select(SceneKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Shifting the scene by whole cells shifts the raster by the same cells,
    /// away from the grid edges.
    #[test]
    fn rasterization_is_translation_covariant(seed in 0u64..10_000, kind in kind_strategy(), kx in -3i32..=3, ky in -3i32..=3) {
        let cfg = SceneConfig::desk();
        let scene = generate_scene(seed, kind, &cfg);
        let a = rasterize(&scene, &cfg);
        let b = rasterize(&scene.translated([kx as f64, ky as f64]), &cfg);
        // world +x is +column, world +y is -row
        let (dc, dr) = (kx as isize, -(ky as isize));
        let m = 4isize;
        let plane = a.height * a.width;
        for r in m..a.height as isize - m {
            for c in m..a.width as isize - m {
                let (rs, cs) = ((r - dr) as usize, (c - dc) as usize);
                let (i, j) = (r as usize * a.width + c as usize, rs * a.width + cs);
                for ch in 0..F_S {
                    prop_assert_eq!(b.static_maps[ch * plane + i], a.static_maps[ch * plane + j], "static ch {} at ({}, {})", ch, r, c);
                }
                for k in 0..a.t_in * F_D {
                    let (x, y) = (b.dynamic[k * plane + i], a.dynamic[k * plane + j]);
                    prop_assert!((x - y).abs() < 1e-4, "dynamic {} at ({}, {}): {} vs {}", k, r, c, x, y);
                }
            }
        }
        for (p, q) in a.gt.iter().zip(&b.gt) {
            prop_assert!((q[0] - p[0] - dc as f32).abs() < 1e-4 && (q[1] - p[1] - dr as f32).abs() < 1e-4);
        }
    }

    #[test]
    fn generated_ground_truth_is_drivable(seed in any::<u64>(), kind in kind_strategy()) {
        let cfg = SceneConfig::desk();
        let s = rasterize(&generate_scene(seed, kind, &cfg), &cfg);
        for p in &s.gt {
            let (c, r) = (p[0].floor() as usize, p[1].floor() as usize);
            prop_assert_eq!(s.drivable_mask[r * s.width + c], 1);
        }
    }

    #[test]
    fn augmentation_preserves_shape_and_binary_values(seed in any::<u64>(), kind in kind_strategy(), aug_seed in any::<u64>()) {
        let cfg = SceneConfig::desk();
        let s: RasterSample = rasterize(&generate_scene(seed, kind, &cfg), &cfg);
        let a = augment(&s, &mut ChaCha8Rng::seed_from_u64(aug_seed));
        prop_assert!(a.validate().is_ok());
        prop_assert_eq!((a.height, a.width, a.t_in, a.t_out), (s.height, s.width, s.t_in, s.t_out));
        prop_assert!(a.static_maps.iter().chain(&a.drivable_mask).all(|&v| v <= 1));
    }
}

use dvr::camera::{add, Camera};
use dvr::mesh::Bounds;
use dvr::scene::{generate_cameras, generate_dataset, load_dataset, render_ground_truth, save_dataset, scene_registry, visual_hull, CameraRig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SCENES: [&str; 4] = ["sphere", "torus", "box", "carved-box"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ground_truth_depth_unprojects_onto_the_surface(scene in 0usize..4, seed in any::<u64>()) {
        let scene = (scene_registry().get(SCENES[scene]).unwrap())();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = generate_cameras(&CameraRig::new(1, 32), &mut rng).unwrap().remove(0);
        let view = render_ground_truth(&scene, &cam).unwrap();
        let depth = view.depth.as_ref().unwrap();
        for j in 0..32 {
            for i in 0..32 {
                let k = view.index(i, j);
                prop_assert_eq!(view.mask[k], depth[k].is_finite());
                if let Some(d) = view.depth_at(i, j) {
                    let p = cam.unproject_depth(Camera::pixel_center(i, j), d).unwrap();
                    prop_assert!(scene.shape.distance(p).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip_preserves_masks_and_colors(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = generate_dataset(&(scene_registry().get("torus").unwrap())(), &CameraRig::new(2, 16), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        for (a, b) in data.views.iter().zip(&back.views) {
            prop_assert_eq!(&a.mask, &b.mask);
            prop_assert_eq!(&a.rgb, &b.rgb);
            for (x, y) in a.depth.as_ref().unwrap().iter().zip(b.depth.as_ref().unwrap()) {
                prop_assert!(x == y || (x - y).abs() <= 1e-6 * x.abs());
            }
        }
    }
}

#[test]
fn visual_hull_contains_the_true_surface() {
    for name in ["sphere", "torus"] {
        let scene = (scene_registry().get(name).unwrap())();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = generate_dataset(&scene, &CameraRig::new(12, 64), &mut rng).unwrap();
        let hull = visual_hull(&data.views, 32, Bounds::cube(1.0)).unwrap();
        let c = hull.cell_size();
        let steps = [-c, 0.0, c];
        for p in scene.shape.sample_surface(2000, &mut rng) {
            let near = steps.iter().any(|&dx| steps.iter().any(|&dy| steps.iter().any(|&dz| hull.contains(add(p, [dx, dy, dz])))));
            assert!(near, "{name}: {p:?} outside the hull");
        }
    }
}

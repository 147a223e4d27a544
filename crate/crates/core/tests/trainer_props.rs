use dvr::rng::{stream, stream_rng};
use dvr::scene::{generate_dataset, scene_registry, CameraRig, MultiViewDataset};
use dvr::trainer::{TrainConfig, Trainer};
use proptest::prelude::*;

fn data(scene: &str) -> MultiViewDataset {
    let mut rng = stream_rng(5, stream::CAMERAS, 0);
    generate_dataset(&(scene_registry().get(scene).unwrap())(), &CameraRig::new(3, 16), &mut rng).unwrap()
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig { iterations: 4, pixels_per_view: 24, views_per_batch: 2, width: 8, blocks: 1, n_schedule: vec![(0, 8)], seed, log_every: 1, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn partition_covers_every_batch(seed in any::<u64>(), torus in any::<bool>(), target in 0usize..3) {
        let data = data(if torus { "torus" } else { "sphere" });
        let mut cfg = config(seed);
        cfg.occupancy_target = ["random", "hull", "depth"][target].into();
        cfg.hull_resolution = 16;
        let mut trainer = Trainer::new(&data, cfg).unwrap();
        for _ in 0..3 {
            let r = trainer.step().unwrap();
            prop_assert_eq!(r.partition.iter().sum::<usize>(), 48);
            prop_assert!(r.total.is_finite() && r.total >= 0.0);
            for term in [r.rgb, r.depth, r.freespace, r.occupancy, r.normal] {
                prop_assert!(term.is_finite() && term >= 0.0);
            }
        }
    }

    #[test]
    fn batches_depend_only_on_seed_and_iteration(seed in any::<u64>(), it in 0usize..1000) {
        let data = data("sphere");
        let a = Trainer::new(&data, config(seed)).unwrap();
        let b = Trainer::new(&data, config(seed)).unwrap();
        let (sa, sb) = (a.batch_samples(it), b.batch_samples(it));
        prop_assert_eq!(sa.len(), 48);
        prop_assert!(sa.iter().zip(&sb).all(|(x, y)| x.view == y.view && x.pixel == y.pixel));
    }
}

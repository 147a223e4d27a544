use std::cell::RefCell;
use std::rc::Rc;

use dvr::autodiff::Tape;
use dvr::camera::{dot, Ray};
use dvr::field::{FieldParams, LatentCode};
use dvr::gradcheck::{hit_rays, precise_sampling, random_surface_field};
use dvr::raycast::{depth_backward, depth_forward, secant_refine, surface_depth, DepthStats, Hit, RaySamplingConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random field with `rays` well-conditioned hits, if the field has enough
/// reachable surface.
fn setup(seed: u64, rays: usize) -> Option<(FieldParams, Vec<Ray>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_surface_field(16, 2, &mut rng).unwrap();
    let rays = hit_rays(&params, rays, &precise_sampling(), &mut rng).ok()?;
    Some((params, rays))
}

/// Nodes recorded by one forward and backward round of the depth op.
fn round_nodes(params: &FieldParams, hits: &[Hit]) -> usize {
    let z = LatentCode::none();
    let tape = Tape::new();
    let leaves = params.leaves(&tape, &z);
    let stats = Rc::new(RefCell::new(DepthStats::default()));
    let d = surface_depth(&leaves, params, &z, hits, stats.clone()).unwrap();
    let loss = d.sum().unwrap();
    tape.backward(&loss, 1.0).unwrap();
    let backward = stats.borrow().backward_nodes;
    tape.len() + backward
}

/// Field translated rigidly by `t`: `f'(p) = f(p - t)`.
fn translated(params: &FieldParams, t: [f64; 3]) -> FieldParams {
    let mut p = params.clone();
    for j in 0..p.width {
        let shift: f64 = (0..3).map(|i| t[i] * p.input.weight[[i, j]]).sum();
        p.input.bias[j] -= shift;
    }
    p
}

#[test]
fn depth_round_node_count_does_not_depend_on_n() {
    let (params, rays) = setup(1, 6).unwrap();
    let z = LatentCode::none();
    let hits = |n: usize| -> Vec<Hit> {
        let cfg = RaySamplingConfig { n, ..Default::default() };
        depth_forward(&rays, &params, &z, &cfg).unwrap().iter().filter_map(|h| h.hit).collect()
    };
    let (coarse, fine) = (hits(16), hits(512));
    assert_eq!(coarse.len(), fine.len());
    assert_eq!(round_nodes(&params, &coarse), round_nodes(&params, &fine));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn translating_the_surface_away_increases_depth(seed in 0u64..1000, s in 0.001f64..0.03) {
        let setup = setup(seed, 1);
        prop_assume!(setup.is_some());
        let (params, rays) = setup.unwrap();
        let ray = rays[0];
        let cfg = precise_sampling();
        let z = LatentCode::none();
        let before = depth_forward(&[ray], &params, &z, &cfg).unwrap()[0].hit.unwrap();
        let moved = translated(&params, ray.dir.map(|c| c * s));
        let after = depth_forward(&[ray], &moved, &z, &cfg).unwrap()[0].hit;
        if let Some(after) = after {
            prop_assume!(after.interval.abs_diff(before.interval) <= 1);
            prop_assert!(after.depth > before.depth);
            prop_assert!((after.depth - before.depth - s).abs() < 1e-6, "{} vs {}", after.depth - before.depth, s);
        }
    }

    #[test]
    fn depth_backward_is_linear_in_lambda(seed in 0u64..1000, a in -4.0f64..4.0) {
        let setup = setup(seed, 3);
        prop_assume!(setup.is_some());
        let (params, rays) = setup.unwrap();
        let z = LatentCode::none();
        let hits: Vec<Hit> = depth_forward(&rays, &params, &z, &precise_sampling()).unwrap().iter().map(|h| h.hit.unwrap()).collect();
        let pts = Array2::from_shape_fn((hits.len(), 3), |(k, c)| hits[k].point[c]);
        let denoms: Vec<f64> = hits.iter().map(|h| h.denom).collect();
        let lambda = vec![0.3, -1.1, 0.7];
        let scaled: Vec<f64> = lambda.iter().map(|l| a * l).collect();
        let mut stats = DepthStats::default();
        let g1 = depth_backward(&lambda, &pts, &denoms, &params, &z, &mut stats).unwrap();
        let ga = depth_backward(&scaled, &pts, &denoms, &params, &z, &mut stats).unwrap();
        for (x, y) in g1.iter().flatten().zip(ga.iter().flatten()) {
            prop_assert!((a * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn secant_stays_inside_its_bracket(k in 0.5f64..40.0, c in -1.0f64..1.0, lo_off in 0.001f64..0.5, hi_off in 0.001f64..0.5, wiggle in 0.0f64..0.45, iters in 0usize..12) {
        let f = |d: f64| 1.0 / (1.0 + (-(k * (d - c) + wiggle * (k * d).sin())).exp());
        let (lo, hi) = (c - lo_off, c + hi_off);
        prop_assume!(f(lo) < 0.5 && f(hi) >= 0.5);
        let r = secant_refine(f, lo, hi, 0.5, iters, 1e-5).unwrap();
        prop_assert!(r.depth >= lo && r.depth <= hi);
        prop_assert!(r.evaluations <= iters);
    }

    #[test]
    fn hit_points_lie_on_their_rays(seed in 0u64..1000) {
        let setup = setup(seed, 4);
        prop_assume!(setup.is_some());
        let (params, rays) = setup.unwrap();
        for (ray, h) in rays.iter().zip(depth_forward(&rays, &params, &LatentCode::none(), &precise_sampling()).unwrap()) {
            let hit = h.hit.unwrap();
            let p = ray.at(hit.depth);
            prop_assert!((0..3).all(|i| (p[i] - hit.point[i]).abs() < 1e-12));
            prop_assert!(dot(ray.dir, ray.dir) > 0.0);
        }
    }
}

//! End-to-end acceptance runs. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dvr::gradcheck::{check_loss_gradient, default_depth_check, REL_TOL};
use dvr::losses::LossWeights;
use dvr::mesh::{extract_mesh, Bounds, EvalReport, TriangleMesh};
use dvr::raycast::{render, secant_refine, RaySamplingConfig};
use dvr::rng::{stream, stream_rng};
use dvr::scene::{evaluate_mesh, generate_dataset, scene_registry, visual_hull, AnalyticScene, CameraRig, MultiViewDataset};
use dvr::trainer::{checkpoint_path, fit, TrainConfig, TrainState, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const EVAL_SAMPLES: usize = 300_000;
const MESH_RES: usize = 128;

struct Scene {
    scene: AnalyticScene,
    data: MultiViewDataset,
}

fn scene(name: &str) -> Scene {
    let scene = (scene_registry().get(name).expect("built-in scene"))();
    let mut rng = stream_rng(0, stream::CAMERAS, 0);
    let data = generate_dataset(&scene, &CameraRig::new(24, 128), &mut rng).expect("dataset");
    Scene { scene, data }
}

fn weights(rgb: f64, depth: f64) -> LossWeights {
    LossWeights { rgb, depth, ..Default::default() }
}

fn sphere_config(w: LossWeights) -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        width: 32,
        blocks: 3,
        learning_rate: 1e-3,
        pixels_per_view: 256,
        views_per_batch: 4,
        n_schedule: vec![(0, 16), (500, 32), (1000, 64)],
        weights: w,
        log_every: 500,
        ..Default::default()
    }
}

fn torus_config(w: LossWeights) -> TrainConfig {
    TrainConfig {
        iterations: 8000,
        learning_rate: 3e-4,
        n_schedule: vec![(0, 16), (2000, 32), (4000, 64)],
        occupancy_target: "hull".into(),
        log_every: 2000,
        ..sphere_config(w)
    }
}

struct Fitted {
    state: TrainState,
    mesh: TriangleMesh,
    chamfer: EvalReport,
    image_l1: f64,
    iou: f64,
}

fn chamfer(mesh: &TriangleMesh, scene: &AnalyticScene) -> Result<EvalReport, dvr::Error> {
    let mut rng = stream_rng(0, stream::EVAL, 0);
    evaluate_mesh(mesh, scene, EVAL_SAMPLES, &mut rng)
}

fn fit_and_measure(s: &Scene, config: &TrainConfig, label: &str) -> Result<Fitted, dvr::Error> {
    let t = Instant::now();
    let result = fit(&s.data, config, None, None)?;
    for line in &result.log {
        eprintln!("  [{label}] {line}");
    }
    let state = result.state;
    let mesh = extract_mesh(&state.params, &state.z, MESH_RES, 0.5, Bounds::cube(1.0))?;
    let chamfer = chamfer(&mesh, &s.scene)?;
    let cfg = RaySamplingConfig { n: 64, ..Default::default() };
    let (mut l1, mut iou) = (0.0, 0.0);
    for v in &s.data.views {
        let img = render(&v.camera, &state.params, &state.z, &cfg, s.scene.background)?;
        l1 += v.image_l1(&img)?;
        iou += v.mask_iou(&img)?;
    }
    let n = s.data.views.len() as f64;
    eprintln!("  [{label}] {chamfer} ({:.0?})", t.elapsed());
    Ok(Fitted { state, mesh, chamfer, image_l1: l1 / n, iou: iou / n })
}

fn hull_chamfer(s: &Scene) -> Result<f64, dvr::Error> {
    let hull = visual_hull(&s.data.views, MESH_RES, Bounds::cube(1.0))?;
    Ok(chamfer(&hull.mesh(), &s.scene)?.chamfer_l1)
}

fn depth_gradient() -> Outcome {
    let t = Instant::now();
    let r = default_depth_check(0)?;
    let elapsed = t.elapsed();
    Ok((r.within_tol >= 0.99 && elapsed < Duration::from_secs(60), format!("{r} in {elapsed:.1?}")))
}

fn loss_gradient() -> Outcome {
    let r = check_loss_gradient(0, 16, 5, 8, 1e-4)?;
    Ok((r.max_rel_err < REL_TOL, r.to_string()))
}

fn node_count(s: &Scene, state: &TrainState) -> Outcome {
    let count = |n: usize| -> Result<(usize, [usize; 3]), dvr::Error> {
        let config = TrainConfig { n_schedule: vec![(0, n)], ..sphere_config(weights(1.0, 0.0)) };
        let trainer = Trainer::resume(&s.data, config, state.clone())?;
        let samples = trainer.batch_samples(0);
        let (report, _) = trainer.evaluate(samples, 0)?;
        Ok((report.tape_nodes, report.partition))
    };
    let (coarse, p16) = count(16)?;
    let (fine, p512) = count(512)?;
    Ok((coarse == fine && p16[0] > 0, format!("n=16: {coarse} nodes (hits {}), n=512: {fine} nodes (hits {})", p16[0], p512[0])))
}

fn secant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    let cases = 1000;
    for case in 0..cases {
        let k = rng.random_range(2.0..30.0);
        let c = rng.random_range(-1.0..1.0);
        let tau = rng.random_range(0.3..0.7);
        let a = rng.random_range(0.0..0.9);
        let f: Box<dyn Fn(f64) -> f64> = match case % 4 {
            0 => Box::new(move |d| 1.0 / (1.0 + (-k * (d - c)).exp())),
            1 => Box::new(move |d| 0.5 + 0.5 * (k * (d - c) + a * (k * (d - c)).sin()).tanh()),
            2 => Box::new(move |d| 0.5 + (k * (d - c)).atan() / std::f64::consts::PI),
            _ => Box::new(move |d| 0.5 + 0.3 * (k * (d - c) + a * (k * (d - c)).powi(3)).tanh()),
        };
        // Root of f - tau by bisection, then a bracket of one sampling step
        // placed randomly around it.
        let (mut lo, mut hi) = (c - 2.0, c + 2.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if f(m) < tau {
                lo = m
            } else {
                hi = m
            }
        }
        let root = hi;
        let step = 2.0 / rng.random_range(16.0..128.0);
        let lo = root - rng.random_range(0.01..0.99) * step;
        let hi = lo + step;
        let r = secant_refine(&f, lo, hi, tau, 8, 1e-5)?;
        let err = (f(r.depth) - tau).abs();
        worst = worst.max(err);
        if err < 1e-5 && r.depth >= lo && r.depth <= hi && r.evaluations <= 8 {
            passed += 1;
        }
    }
    Ok((passed == cases, format!("{passed}/{cases} within 8 iterations, worst |f-tau|={worst:.2e}")))
}

fn sphere_fit(f: &Fitted) -> Outcome {
    let ok = f.chamfer.chamfer_l1 < 0.02 && f.image_l1 < 0.05 && f.mesh.is_watertight();
    Ok((ok, format!("chamfer_l1={:.5} image_l1={:.4} watertight={} iou={:.4}", f.chamfer.chamfer_l1, f.image_l1, f.mesh.is_watertight(), f.iou)))
}

fn texture_beats_hull(f: &Fitted, hull: f64) -> Outcome {
    let c = f.chamfer.chamfer_l1;
    Ok((c <= 0.8 * hull, format!("fit chamfer_l1={c:.5} hull chamfer_l1={hull:.5} margin={:.1}% (need >= 20%)", 100.0 * (1.0 - c / hull))))
}

fn depth_helps(rgb: &Fitted, depth: &Fitted) -> Outcome {
    let (a, b) = (rgb.chamfer.chamfer_l1, depth.chamfer.chamfer_l1);
    Ok((b <= 1.05 * a, format!("rgb+mask chamfer_l1={a:.5} with depth chamfer_l1={b:.5}")))
}

fn mask_only(f: &Fitted, hull: f64) -> Outcome {
    let c = f.chamfer.chamfer_l1;
    let gap = (c - hull).abs() / hull;
    Ok((f.iou > 0.95 && gap <= 0.1, format!("iou={:.4} chamfer_l1={c:.5} hull chamfer_l1={hull:.5} gap={:.1}% (need <= 10%)", f.iou, 100.0 * gap)))
}

fn determinism(s: &Scene) -> Outcome {
    let config = TrainConfig { iterations: 100, checkpoint_every: 100, ..sphere_config(weights(1.0, 0.0)) };
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for d in &dirs {
        fit(&s.data, &config, None, Some(d.path()))?;
    }
    let a = std::fs::read(checkpoint_path(dirs[0].path(), 100))?;
    let b = std::fs::read(checkpoint_path(dirs[1].path(), 100))?;
    Ok((a == b, format!("{} bytes, identical={}", a.len(), a == b)))
}

fn with_hull<'a>(fit: &'a Result<Fitted, dvr::Error>, hull: &Result<f64, dvr::Error>) -> Result<(&'a Fitted, f64), Box<dyn std::error::Error>> {
    let f = fit.as_ref().map_err(|e| e.to_string())?;
    let h = *hull.as_ref().map_err(|e| e.to_string())?;
    Ok((f, h))
}

fn report(name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok((true, detail)) => println!("PASS {name}: {detail}"),
        Ok((false, detail)) => {
            *failures += 1;
            println!("FAIL {name}: {detail}");
        }
        Err(e) => {
            *failures += 1;
            println!("FAIL {name}: error: {e}");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    report("depth-gradient", depth_gradient(), &mut failures);
    report("full-loss-gradient", loss_gradient(), &mut failures);
    report("secant-accuracy", secant(), &mut failures);

    let sphere = scene("sphere");
    report("determinism", determinism(&sphere), &mut failures);
    let rgb = fit_and_measure(&sphere, &sphere_config(weights(1.0, 0.0)), "sphere rgb+mask");
    let depth = fit_and_measure(&sphere, &sphere_config(weights(1.0, 1.0)), "sphere rgb+mask+depth");
    match &rgb {
        Ok(f) => {
            report("node-count-independent-of-n", node_count(&sphere, &f.state), &mut failures);
            report("sphere-fit", sphere_fit(f), &mut failures);
        }
        Err(e) => {
            report("node-count-independent-of-n", Err(e.to_string().into()), &mut failures);
            report("sphere-fit", Err(e.to_string().into()), &mut failures);
        }
    }
    let both = rgb.as_ref().map_err(|e| e.to_string()).and_then(|a| depth.as_ref().map(|b| (a, b)).map_err(|e| e.to_string()));
    report("depth-supervision-non-inferior", both.map_err(Into::into).and_then(|(a, b)| depth_helps(a, b)), &mut failures);

    let torus = scene("torus");
    let hull = hull_chamfer(&torus);
    let textured = fit_and_measure(&torus, &torus_config(weights(1.0, 0.0)), "torus rgb+mask");
    let masks = fit_and_measure(&torus, &torus_config(weights(0.0, 0.0)), "torus mask-only");
    report("texture-beats-visual-hull", with_hull(&textured, &hull).and_then(|(f, h)| texture_beats_hull(f, h)), &mut failures);
    report("mask-only-matches-visual-hull", with_hull(&masks, &hull).and_then(|(f, h)| mask_only(f, h)), &mut failures);

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}

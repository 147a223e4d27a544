//! Finite-difference checks of the analytic parameter gradients.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::camera::{normalize, scale, sub, Camera, Ray};
use crate::error::{Error, Result};
use crate::field::{FieldParams, LatentCode, DEFAULT_BLOCKS};
use crate::losses::{total_loss, Batch, LossContext, LossModes, LossWeights, PixelSample};
use crate::raycast::{depth_forward, surface_depth, DepthStats, RaySamplingConfig};
use crate::scene::{MultiViewDataset, View};

/// Relative error below which a coordinate counts as matching.
pub const REL_TOL: f64 = 1e-3;
/// Gradients smaller than this in magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Fraction of coordinates with relative error below [`REL_TOL`].
    pub within_tol: f64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max_rel_err={:.3e} within_tol={:.4} coordinates={}", self.max_rel_err, self.within_tol, self.coordinates)
    }
}

/// `|a - b| / max(|a|, |b|, ABS_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    let errs: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| relative_error(*a, *b)).collect();
    GradCheckReport {
        coordinates: errs.len(),
        max_rel_err: errs.iter().copied().fold(0.0, f64::max),
        within_tol: errs.iter().filter(|e| **e < REL_TOL).count() as f64 / errs.len().max(1) as f64,
    }
}

/// Central differences of `f` with respect to every parameter coordinate,
/// in declaration order.
pub fn finite_difference(params: &FieldParams, h: f64, f: impl Fn(&FieldParams) -> Result<f64>) -> Result<Vec<f64>> {
    let sizes: Vec<usize> = params.arrays().iter().map(|a| a.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    let mut work = params.clone();
    let originals = params.arrays();
    for (array, &size) in sizes.iter().enumerate() {
        for k in 0..size {
            let base = originals[array].as_slice().expect("standard layout")[k];
            let mut eval = |value: f64| -> Result<f64> {
                work.for_each_array_mut(|i, a| {
                    if i == array {
                        a[k] = value;
                    }
                });
                f(&work)
            };
            let plus = eval(base + h)?;
            let minus = eval(base - h)?;
            eval(base)?;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Random network whose occupancy crosses 0.5 inside the unit ball: the
/// occupancy bias is shifted so that the median logit there is zero.
pub fn random_surface_field<R: Rng + ?Sized>(width: usize, blocks: usize, rng: &mut R) -> Result<FieldParams> {
    let mut p = FieldParams::init(width, 0, blocks, rng)?;
    for l in p.layers_mut() {
        for b in l.bias.iter_mut() {
            *b += rng.random_range(-0.2..0.2);
        }
    }
    p.output.bias[0] = 0.0;
    let pts = ndarray::Array2::from_shape_fn((512, 3), |_| rng.random_range(-0.6..0.6));
    let occ = p.occupancy(pts.view(), &LatentCode::none())?;
    let mut logits: Vec<f64> = occ.iter().map(|o| (o / (1.0 - o)).ln()).collect();
    logits.sort_by(f64::total_cmp);
    p.output.bias[0] = -logits[logits.len() / 2];
    Ok(p)
}

/// Sampling configuration with a tight secant tolerance, so that the
/// forward depth is accurate enough for finite differences.
pub fn precise_sampling() -> RaySamplingConfig {
    RaySamplingConfig { n: 128, secant_iters: 60, secant_tol: 1e-13, roi_radius: Some(1.0), ..Default::default() }
}

/// Rays from points at distance 2 toward random targets in the ball, keeping
/// only well-conditioned hits.
pub fn hit_rays<R: Rng + ?Sized>(params: &FieldParams, count: usize, cfg: &RaySamplingConfig, rng: &mut R) -> Result<Vec<Ray>> {
    let z = LatentCode::none();
    let mut rays = Vec::new();
    for _ in 0..1000 {
        if rays.len() == count {
            return Ok(rays);
        }
        let eye = scale(normalize([0, 1, 2].map(|_| rng.random_range(-1.0..1.0))), 2.0);
        let target = [0, 1, 2].map(|_| rng.random_range(-0.4..0.4));
        let ray = Ray::new(eye, normalize(sub(target, eye)), 1e-6, f64::INFINITY)?;
        if let Some(h) = depth_forward(&[ray], params, &z, cfg)?[0].hit {
            if h.denom.abs() > 0.05 && h.residual.abs() < 1e-12 {
                rays.push(ray);
            }
        }
    }
    Err(Error::invalid("could not find enough rays hitting the random surface"))
}

fn flatten(grads: Vec<ndarray::ArrayD<f64>>) -> Vec<f64> {
    grads.into_iter().flat_map(|g| g.into_iter()).collect()
}

/// Gradient of `sum d_hat` over `rays` through the depth operator.
pub fn depth_sum_gradient(params: &FieldParams, rays: &[Ray], cfg: &RaySamplingConfig) -> Result<Vec<f64>> {
    let z = LatentCode::none();
    let hits: Vec<_> = depth_forward(rays, params, &z, cfg)?.into_iter().map(|h| h.hit.ok_or_else(|| Error::invalid("ray lost its hit"))).collect::<Result<_>>()?;
    let tape = Tape::new();
    let leaves = params.leaves(&tape, &z);
    let d = surface_depth(&leaves, params, &z, &hits, Rc::new(RefCell::new(DepthStats::default())))?;
    let mut g = tape.backward(&d.sum()?, 1.0)?;
    Ok(flatten(leaves.all().iter().map(|t| g.take(t).expect("leaf")).collect()))
}

pub fn depth_sum(params: &FieldParams, rays: &[Ray], cfg: &RaySamplingConfig) -> Result<f64> {
    depth_forward(rays, params, &LatentCode::none(), cfg)?
        .iter()
        .map(|h| h.hit.map(|h| h.depth).ok_or_else(|| Error::invalid("ray lost its hit under perturbation")))
        .sum()
}

/// Checks the gradient of `sum d_hat` over `rays` random rays on a random
/// `width` x `blocks` network.
pub fn check_depth_gradient(seed: u64, width: usize, blocks: usize, rays: usize, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_surface_field(width, blocks, &mut rng)?;
    let cfg = precise_sampling();
    let rays = hit_rays(&params, rays, &cfg, &mut rng)?;
    let analytic = depth_sum_gradient(&params, &rays, &cfg)?;
    let numeric = finite_difference(&params, h, |p| depth_sum(p, &rays, &cfg))?;
    Ok(compare(&analytic, &numeric))
}

/// The default configuration of the depth check: width 16, five blocks,
/// five rays, step 1e-4.
pub fn default_depth_check(seed: u64) -> Result<GradCheckReport> {
    check_depth_gradient(seed, 16, DEFAULT_BLOCKS, 5, 1e-4)
}

/// One view whose pixels all lie in the mask, with random ground-truth color
/// and depth, and `count` pixels of it that hit the random surface.
pub fn loss_check_setup<R: Rng + ?Sized>(params: &FieldParams, count: usize, rng: &mut R) -> Result<(MultiViewDataset, Vec<PixelSample>)> {
    let res = 24;
    let rgb: Vec<[u8; 3]> = (0..res * res).map(|_| [0, 1, 2].map(|_| rng.random::<u8>())).collect();
    let depth: Vec<f64> = (0..res * res).map(|_| rng.random_range(1.0..3.0)).collect();
    let cfg = precise_sampling();
    let mut best: Option<(MultiViewDataset, Vec<PixelSample>)> = None;
    for dir in [[0.3, -1.0, 0.6], [-0.3, 1.0, -0.6], [1.0, 0.2, 0.4], [-1.0, -0.2, -0.4], [0.2, 0.4, 1.0], [-0.2, -0.4, -1.0]] {
        let camera = Camera::look_at(scale(normalize(dir), 2.0), [0.0; 3], [0.0, 0.0, 1.0], 30.0, res, res)?;
        let view = View { camera, rgb: rgb.clone(), mask: vec![true; res * res], depth: Some(depth.clone()) };
        let data = MultiViewDataset { views: vec![view] };
        let mut samples = Vec::new();
        for k in (0..res * res).filter(|k| (k / res) % 3 == 0 && (k % res) % 3 == 0) {
            if samples.len() == count {
                break;
            }
            let s = PixelSample::from_view(&data, 0, k % res, k / res);
            let batch = Batch::new(&data, vec![s], params, &LatentCode::none(), &cfg)?;
            if let Some(h) = batch.hits[0].hit {
                if h.denom.abs() > 0.05 {
                    samples.push(s);
                }
            }
        }
        if best.as_ref().is_none_or(|b| samples.len() > b.1.len()) {
            best = Some((data, samples));
        }
    }
    match best {
        Some((data, samples)) if samples.len() >= count => Ok((data, samples)),
        _ => Err(Error::invalid("too few pixels hit the random surface")),
    }
}

fn photometric_loss(params: &FieldParams, data: &MultiViewDataset, samples: &[PixelSample], weights: &LossWeights, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    let z = LatentCode::none();
    let cfg = precise_sampling();
    let batch = Batch::new(data, samples.to_vec(), params, &z, &cfg)?;
    if batch.hits.iter().any(|h| !h.is_hit()) {
        return Err(Error::invalid("pixel lost its hit under perturbation"));
    }
    let tape = Tape::new();
    let leaves = params.leaves(&tape, &z);
    let ctx = LossContext { params, z: &z, leaves: &leaves, sampling: &cfg, stats: Rc::new(RefCell::new(DepthStats::default())), depth_gradient: true };
    let out = total_loss(&ctx, data, &batch, weights, &LossModes::default(), 0, 0)?;
    let value = out.total.scalar().expect("scalar loss");
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let mut g = tape.backward(&out.total, 1.0)?;
    Ok((value, flatten(leaves.all().iter().map(|t| g.take(t).expect("leaf")).collect())))
}

/// Checks the gradient of `w_rgb L_rgb + w_depth L_depth` over `pixels`
/// pixels.
pub fn check_loss_gradient(seed: u64, width: usize, blocks: usize, pixels: usize, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_surface_field(width, blocks, &mut rng)?;
    let (data, samples) = loss_check_setup(&params, pixels, &mut rng)?;
    let weights = LossWeights { rgb: 1.0, depth: 0.5, freespace: 0.0, occupancy: 0.0, normal: 0.0 };
    let (_, analytic) = photometric_loss(&params, &data, &samples, &weights, true)?;
    let numeric = finite_difference(&params, h, |p| Ok(photometric_loss(p, &data, &samples, &weights, false)?.0))?;
    Ok(compare(&analytic, &numeric))
}

//! Training objective: pixel partition and the photometric, depth,
//! freespace, occupancy and normal terms.
//!
//! Every term is a sum over its pixels. [`total_loss`] divides the weighted
//! sum by the number of sampled pixels, so the scale of the objective does
//! not depend on the batch size.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, RngCore};

use crate::autodiff::Tensor;
use crate::camera::{Ray, Vec3};
use crate::error::{Error, Result};
use crate::field::{FieldParams, LatentCode, ParamTensors, NORMAL_EPS};
use crate::raycast::{depth_forward, surface_depth, DepthStats, Hit, RaySamplingConfig, SurfaceHit};
use crate::registry::Registry;
use crate::rng::{stream, stream_rng};
use crate::scene::{MultiViewDataset, VisualHull};

/// BCE inputs are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;
/// Keeps the normal-difference norm differentiable at zero.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub view: usize,
    /// Integer pixel `(column, row)`.
    pub pixel: [usize; 2],
    pub gt_rgb: [f64; 3],
    pub in_mask: bool,
    pub gt_depth: Option<f64>,
}

impl PixelSample {
    pub fn from_view(data: &MultiViewDataset, view: usize, i: usize, j: usize) -> Self {
        let v = &data.views[view];
        PixelSample { view, pixel: [i, j], gt_rgb: v.color(i, j), in_mask: v.in_mask(i, j), gt_depth: v.depth_at(i, j) }
    }
}

/// Indices into the sample batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PixelPartition {
    /// In the mask, with a predicted surface.
    pub hit: Vec<usize>,
    /// Outside the mask.
    pub free: Vec<usize>,
    /// In the mask, but no predicted surface.
    pub missed: Vec<usize>,
}

impl PixelPartition {
    pub fn sizes(&self) -> [usize; 3] {
        [self.hit.len(), self.free.len(), self.missed.len()]
    }
}

pub fn classify(samples: &[PixelSample], hits: &[SurfaceHit]) -> Result<PixelPartition> {
    if samples.len() != hits.len() {
        return Err(Error::invalid(format!("{} samples but {} hit records", samples.len(), hits.len())));
    }
    let mut part = PixelPartition::default();
    for (k, (s, h)) in samples.iter().zip(hits).enumerate() {
        match (s.in_mask, h.is_hit()) {
            (false, _) => part.free.push(k),
            (true, true) => part.hit.push(k),
            (true, false) => part.missed.push(k),
        }
    }
    Ok(part)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub freespace: f64,
    pub occupancy: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rgb: 1.0, depth: 1.0, freespace: 1.0, occupancy: 1.0, normal: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.rgb, self.depth, self.freespace, self.occupancy, self.normal];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn all_zero(&self) -> bool {
        [self.rgb, self.depth, self.freespace, self.occupancy, self.normal].iter().all(|v| *v == 0.0)
    }
}

/// Image features compared by the photometric term.
pub trait FeatureMap {
    fn name(&self) -> &'static str;
    /// Pixel offsets whose colors enter the features besides the pixel.
    fn offsets(&self) -> &'static [[isize; 2]];
    /// `B x k` features from the `B x 3` center colors and the colors at
    /// each offset.
    fn features(&self, center: &Tensor, neighbors: &[Tensor]) -> Result<Tensor>;
}

pub struct RgbFeatures;

impl FeatureMap for RgbFeatures {
    fn name(&self) -> &'static str {
        "rgb"
    }

    fn offsets(&self) -> &'static [[isize; 2]] {
        &[]
    }

    fn features(&self, center: &Tensor, _: &[Tensor]) -> Result<Tensor> {
        Ok(center.clone())
    }
}

/// Colors plus forward differences to the right and lower neighbors.
pub struct RgbGradientFeatures;

impl FeatureMap for RgbGradientFeatures {
    fn name(&self) -> &'static str {
        "rgb+grad"
    }

    fn offsets(&self) -> &'static [[isize; 2]] {
        &[[1, 0], [0, 1]]
    }

    fn features(&self, center: &Tensor, neighbors: &[Tensor]) -> Result<Tensor> {
        let dx = neighbors[0].sub(center)?;
        let dy = neighbors[1].sub(center)?;
        Ok(Tensor::concat(&[center, &dx, &dy], 1)?)
    }
}

pub type FeatureFactory = fn() -> Box<dyn FeatureMap>;

pub fn feature_registry() -> Registry<FeatureFactory> {
    Registry::<FeatureFactory>::new("feature map")
        .with("rgb", || Box::new(RgbFeatures))
        .with("rgb+grad", || Box::new(RgbGradientFeatures))
}

/// Where along an in-mask ray without a predicted surface the field is
/// pushed toward occupied.
pub trait OccupancyTarget {
    fn name(&self) -> &'static str;
    /// Depth on `ray` (already clipped to the sampling interval).
    fn depth(&self, sample: &PixelSample, ray: &Ray, rng: &mut dyn RngCore) -> Result<f64>;
}

/// Uniform over the sampling interval.
pub struct RandomDepth;

impl OccupancyTarget for RandomDepth {
    fn name(&self) -> &'static str {
        "random"
    }

    fn depth(&self, _: &PixelSample, ray: &Ray, rng: &mut dyn RngCore) -> Result<f64> {
        Ok(uniform_depth(ray, rng))
    }
}

/// First point on the ray inside the visual hull; uniform when the ray
/// misses the hull grid.
pub struct HullEntryDepth(pub Arc<VisualHull>);

impl OccupancyTarget for HullEntryDepth {
    fn name(&self) -> &'static str {
        "hull"
    }

    fn depth(&self, _: &PixelSample, ray: &Ray, rng: &mut dyn RngCore) -> Result<f64> {
        Ok(self.0.entry_depth(ray).unwrap_or_else(|| uniform_depth(ray, rng)))
    }
}

/// The ground-truth depth of the pixel.
pub struct GroundTruthDepth;

impl OccupancyTarget for GroundTruthDepth {
    fn name(&self) -> &'static str {
        "depth"
    }

    fn depth(&self, sample: &PixelSample, _: &Ray, _: &mut dyn RngCore) -> Result<f64> {
        sample.gt_depth.ok_or_else(|| {
            Error::invalid(format!("depth occupancy target needs ground-truth depth at view {} pixel {:?}", sample.view, sample.pixel))
        })
    }
}

pub type TargetFactory = fn(Option<Arc<VisualHull>>) -> Result<Box<dyn OccupancyTarget>>;

pub fn occupancy_target_registry() -> Registry<TargetFactory> {
    Registry::<TargetFactory>::new("occupancy target")
        .with("random", |_| Ok(Box::new(RandomDepth)))
        .with("hull", |hull| match hull {
            Some(h) => Ok(Box::new(HullEntryDepth(h))),
            None => Err(Error::invalid("hull occupancy target needs a visual hull")),
        })
        .with("depth", |_| Ok(Box::new(GroundTruthDepth)))
}

fn uniform_depth(ray: &Ray, rng: &mut dyn RngCore) -> f64 {
    ray.near + rng.random::<f64>() * (ray.far - ray.near)
}

/// Everything the loss terms need from the current parameters.
pub struct LossContext<'a> {
    pub params: &'a FieldParams,
    pub z: &'a LatentCode,
    /// Parameters recorded on the tape the losses are built on.
    pub leaves: &'a ParamTensors,
    pub sampling: &'a RaySamplingConfig,
    pub stats: Rc<RefCell<DepthStats>>,
    /// When false, surface depth is treated as a constant and only the
    /// direct texture gradient reaches the parameters.
    pub depth_gradient: bool,
}

impl LossContext<'_> {
    /// `B x 1` surface depths for `hits`.
    pub fn depth(&self, hits: &[Hit]) -> Result<Tensor> {
        if self.depth_gradient {
            surface_depth(self.leaves, self.params, self.z, hits, self.stats.clone())
        } else {
            Ok(column(&hits.iter().map(|h| h.depth).collect::<Vec<_>>()))
        }
    }

    /// Colors at `origin + depth * dir` for each ray, differentiable through
    /// both the texture head and the depth.
    pub fn colors_at(&self, rays: &[Ray], depth: &Tensor) -> Result<Tensor> {
        let b = rays.len();
        let origins = matrix(&rays.iter().map(|r| r.origin).collect::<Vec<_>>());
        let dirs = matrix(&rays.iter().map(|r| r.dir).collect::<Vec<_>>());
        let ones = Tensor::constant(ArrayD::ones(IxDyn(&[1, 3])));
        let offsets = depth.matmul(&ones)?.mul(&dirs)?;
        let points = origins.add(&offsets)?;
        debug_assert_eq!(points.shape(), &[b, 3]);
        Ok(self.leaves.forward(&points)?.rgb)
    }
}

/// `B x 1` constant.
pub fn column(values: &[f64]) -> Tensor {
    Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[values.len(), 1]), values.to_vec()).expect("length matches"))
}

/// `B x 3` constant.
pub fn matrix(rows: &[[f64; 3]]) -> Tensor {
    Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[rows.len(), 3]), rows.iter().flatten().copied().collect()).expect("length matches"))
}

fn points_array(rows: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_vec((rows.len(), 3), rows.iter().flatten().copied().collect()).expect("length matches")
}

/// `sum |a - b|` over all entries.
pub fn l1_sum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.sub(b)?.abs()?.sum()?)
}

/// `sum -ln(1 - p)`, the cross-entropy against label 0.
pub fn bce_zero(p: &Tensor) -> Result<Tensor> {
    let one = Tensor::constant(ArrayD::ones(IxDyn(p.shape())));
    Ok(one.sub(&p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?)?.ln()?.sum()?.scale(-1.0)?)
}

/// `sum -ln(p)`, the cross-entropy against label 1.
pub fn bce_one(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?.ln()?.sum()?.scale(-1.0)?)
}

/// `K x B` matrix selecting rows `rows` of a `B`-row tensor.
fn selector(rows: &[usize], b: usize) -> Tensor {
    let mut s = ArrayD::zeros(IxDyn(&[rows.len(), b]));
    for (k, &r) in rows.iter().enumerate() {
        s[[k, r]] = 1.0;
    }
    Tensor::constant(s)
}

/// Photometric term over pixels with a predicted surface:
/// `sum || feat(I)_u - feat(I_hat)_u ||_1`. Neighbor colors needed by the
/// feature map are rendered the same way; where a neighbor is off-image,
/// outside the mask or not hit, the center color stands in for it in both
/// prediction and ground truth.
pub fn loss_rgb(
    ctx: &LossContext,
    data: &MultiViewDataset,
    samples: &[&PixelSample],
    rays: &[Ray],
    hits: &[Hit],
    depth: &Tensor,
    features: &dyn FeatureMap,
) -> Result<Tensor> {
    let b = samples.len();
    let center = ctx.colors_at(rays, depth)?;
    let gt_center = matrix(&samples.iter().map(|s| s.gt_rgb).collect::<Vec<_>>());
    let mut pred_nb = Vec::new();
    let mut gt_nb = Vec::new();
    for off in features.offsets() {
        let mut valid = Vec::new();
        let mut nb_rays = Vec::new();
        let mut gt_rows = Vec::with_capacity(b);
        for (k, s) in samples.iter().enumerate() {
            let view = &data.views[s.view];
            let (i, j) = (s.pixel[0] as isize + off[0], s.pixel[1] as isize + off[1]);
            let inside = i >= 0 && j >= 0 && (i as usize) < view.camera.width && (j as usize) < view.camera.height;
            if inside && view.in_mask(i as usize, j as usize) {
                valid.push(k);
                nb_rays.push(view.camera.pixel_to_ray(crate::camera::Camera::pixel_center(i as usize, j as usize))?);
                gt_rows.push(view.color(i as usize, j as usize));
            } else {
                gt_rows.push(s.gt_rgb);
            }
        }
        let nb_hits = depth_forward(&nb_rays, ctx.params, ctx.z, ctx.sampling)?;
        let kept: Vec<usize> = (0..valid.len()).filter(|&v| nb_hits[v].is_hit()).collect();
        let kept_rows: Vec<usize> = kept.iter().map(|&v| valid[v]).collect();
        let mut use_center = vec![1.0; b];
        for &r in &kept_rows {
            use_center[r] = 0.0;
        }
        for (k, uc) in use_center.iter().enumerate() {
            if *uc == 1.0 {
                gt_rows[k] = samples[k].gt_rgb;
            }
        }
        let kept_hits: Vec<Hit> = kept.iter().map(|&v| nb_hits[v].hit.unwrap()).collect();
        let kept_rays: Vec<Ray> = kept.iter().map(|&v| nb_rays[v]).collect();
        let nb_depth = ctx.depth(&kept_hits)?;
        let nb_colors = ctx.colors_at(&kept_rays, &nb_depth)?;
        let spread = Tensor::constant(selector(&kept_rows, b).value().t().to_owned());
        let fallback = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[b, 3]), |ix| use_center[ix[0]]));
        pred_nb.push(spread.matmul(&nb_colors)?.add(&center.mul(&fallback)?)?);
        gt_nb.push(matrix(&gt_rows));
    }
    debug_assert_eq!(hits.len(), b);
    let pred = features.features(&center, &pred_nb)?;
    let gt = features.features(&gt_center, &gt_nb)?;
    l1_sum(&pred, &gt)
}

/// `sum |d - d_hat|` over pixels that have ground-truth depth. `rows`
/// indexes into `depth`.
pub fn loss_depth(depth: &Tensor, rows: &[usize], gt: &[f64]) -> Result<Tensor> {
    let picked = selector(rows, depth.shape()[0]).matmul(depth)?;
    l1_sum(&picked, &column(gt))
}

/// `sum BCE(f(p), 0)` over the given points.
pub fn loss_freespace(ctx: &LossContext, points: &[Vec3]) -> Result<Tensor> {
    let occ = ctx.leaves.forward(&matrix(points))?.occ;
    bce_zero(&occ)
}

/// `sum BCE(f(p), 1)` over the given points.
pub fn loss_occupancy(ctx: &LossContext, points: &[Vec3]) -> Result<Tensor> {
    let occ = ctx.leaves.forward(&matrix(points))?.occ;
    bce_one(&occ)
}

/// `sum || n(p) - n(q) ||_2` over pairs whose gradients are both
/// non-degenerate. Returns the term and the number of skipped pairs.
pub fn loss_normal(ctx: &LossContext, surface: &[Vec3], neighbors: &[Vec3]) -> Result<(Tensor, usize)> {
    let n = surface.len();
    let mut all = surface.to_vec();
    all.extend_from_slice(neighbors);
    let plain = if all.is_empty() { Array2::zeros((0, 3)) } else { ctx.params.spatial_gradient(points_array(&all).view(), ctx.z)? };
    let ok = |r: usize| plain.row(r).dot(&plain.row(r)).sqrt() > NORMAL_EPS;
    let keep: Vec<usize> = (0..n).filter(|&k| ok(k) && ok(n + k)).collect();
    let mut pts: Vec<Vec3> = keep.iter().map(|&k| surface[k]).collect();
    pts.extend(keep.iter().map(|&k| neighbors[k]));
    let m = keep.len();
    let (_, grad) = ctx.leaves.forward_with_spatial_gradient(&points_array(&pts))?;
    let sum3 = Tensor::constant(ArrayD::ones(IxDyn(&[3, 1])));
    let spread3 = Tensor::constant(ArrayD::ones(IxDyn(&[1, 3])));
    let inv_norm = grad.mul(&grad)?.matmul(&sum3)?.sqrt()?.recip()?;
    let unit = grad.mul(&inv_norm.matmul(&spread3)?)?;
    let diff = unit.slice(0, 0, m)?.sub(&unit.slice(0, m, 2 * m)?)?;
    let eps = Tensor::constant(ArrayD::from_elem(IxDyn(&[m, 1]), NORM_EPS));
    let dist = diff.mul(&diff)?.matmul(&sum3)?.add(&eps)?.sqrt()?;
    let term = dist.sum()?;
    let offset = m as f64 * NORM_EPS.sqrt();
    let zero_shift = Tensor::from_vec(&[], vec![-offset])?;
    Ok((term.add(&zero_shift)?, n - m))
}

/// Uniform point in the ball of radius `r` around `p`.
pub fn ball_point<R: Rng + ?Sized>(p: Vec3, r: f64, rng: &mut R) -> Vec3 {
    loop {
        let u = [0, 1, 2].map(|_| rng.random_range(-1.0..=1.0));
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return [0, 1, 2].map(|i| p[i] + r * u[i]);
        }
    }
}

/// Strategy choices and constants of the objective.
pub struct LossModes {
    pub features: Box<dyn FeatureMap>,
    pub occupancy_target: Box<dyn OccupancyTarget>,
    /// Radius of the neighborhood for the normal term.
    pub normal_radius: f64,
}

impl Default for LossModes {
    fn default() -> Self {
        LossModes { features: Box::new(RgbFeatures), occupancy_target: Box::new(RandomDepth), normal_radius: 0.01 }
    }
}

/// A batch of pixels with their rays and forward hits.
pub struct Batch {
    pub samples: Vec<PixelSample>,
    /// Unclipped camera rays.
    pub rays: Vec<Ray>,
    pub hits: Vec<SurfaceHit>,
}

impl Batch {
    /// Casts the rays of `samples` and runs the surface search.
    pub fn new(data: &MultiViewDataset, samples: Vec<PixelSample>, params: &FieldParams, z: &LatentCode, cfg: &RaySamplingConfig) -> Result<Self> {
        let rays = samples
            .iter()
            .map(|s| data.views[s.view].camera.pixel_to_ray(crate::camera::Camera::pixel_center(s.pixel[0], s.pixel[1])))
            .collect::<Result<Vec<_>>>()?;
        let hits = depth_forward(&rays, params, z, cfg)?;
        Ok(Batch { samples, rays, hits })
    }
}

/// Per-term values (each a sum over its pixels divided by the batch size,
/// before weighting) and the differentiable total.
pub struct LossBreakdown {
    pub total: Tensor,
    pub rgb: f64,
    pub depth: f64,
    pub freespace: f64,
    pub occupancy: f64,
    pub normal: f64,
    pub partition: PixelPartition,
    pub skipped_normals: usize,
}

/// Weighted objective `sum_k w_k L_k / N` for the batch. Terms with zero
/// weight are not built. Randomness comes from counter-based streams keyed by
/// `(seed, counter)`.
pub fn total_loss(
    ctx: &LossContext,
    data: &MultiViewDataset,
    batch: &Batch,
    weights: &LossWeights,
    modes: &LossModes,
    seed: u64,
    counter: u64,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let n = batch.samples.len();
    if n == 0 {
        return Err(Error::invalid("empty pixel batch"));
    }
    let part = classify(&batch.samples, &batch.hits)?;
    let norm = 1.0 / n as f64;
    let mut total = Tensor::from_vec(&[], vec![0.0])?;
    let mut add = |term: Tensor, w: f64| -> Result<f64> {
        let v = term.scalar().unwrap_or(0.0) * norm + 0.0;
        total = total.add(&term.scale(w * norm)?)?;
        Ok(v)
    };

    let hit_rows = &part.hit;
    let hits: Vec<Hit> = hit_rows.iter().map(|&k| batch.hits[k].hit.unwrap()).collect();
    let hit_rays: Vec<Ray> = hit_rows.iter().map(|&k| batch.rays[k]).collect();
    let (mut rgb, mut depth_v, mut free_v, mut occ_v, mut normal_v, mut skipped) = (0.0, 0.0, 0.0, 0.0, 0.0, 0);

    if weights.rgb > 0.0 || weights.depth > 0.0 {
        let depth = ctx.depth(&hits)?;
        if weights.rgb > 0.0 {
            let samples: Vec<&PixelSample> = hit_rows.iter().map(|&k| &batch.samples[k]).collect();
            rgb = add(loss_rgb(ctx, data, &samples, &hit_rays, &hits, &depth, modes.features.as_ref())?, weights.rgb)?;
        }
        if weights.depth > 0.0 {
            let (rows, gt): (Vec<usize>, Vec<f64>) =
                hit_rows.iter().enumerate().filter_map(|(r, &k)| batch.samples[k].gt_depth.map(|d| (r, d))).unzip();
            depth_v = add(loss_depth(&depth, &rows, &gt)?, weights.depth)?;
        }
    }

    if weights.freespace > 0.0 {
        let mut rng = stream_rng(seed, stream::FREESPACE, counter);
        let mut points = Vec::new();
        for &k in &part.free {
            let sh = &batch.hits[k];
            match (sh.hit, sh.ray) {
                (Some(h), _) => points.push(h.point),
                (None, Some(ray)) => points.push(ray.at(uniform_depth(&ray, &mut rng))),
                (None, None) => {}
            }
        }
        free_v = add(loss_freespace(ctx, &points)?, weights.freespace)?;
    }

    if weights.occupancy > 0.0 {
        let mut rng = stream_rng(seed, stream::OCCUPANCY, counter);
        let mut points = Vec::new();
        for &k in &part.missed {
            if let Some(ray) = batch.hits[k].ray {
                let d = modes.occupancy_target.depth(&batch.samples[k], &ray, &mut rng)?;
                points.push(batch.rays[k].at(d));
            }
        }
        occ_v = add(loss_occupancy(ctx, &points)?, weights.occupancy)?;
    }

    if weights.normal > 0.0 {
        let mut rng = stream_rng(seed, stream::NORMAL, counter);
        let surface: Vec<Vec3> = hits.iter().map(|h| h.point).collect();
        let neighbors: Vec<Vec3> = surface.iter().map(|p| ball_point(*p, modes.normal_radius, &mut rng)).collect();
        let (term, s) = loss_normal(ctx, &surface, &neighbors)?;
        skipped = s;
        normal_v = add(term, weights.normal)?;
    }

    Ok(LossBreakdown { total, rgb, depth: depth_v, freespace: free_v, occupancy: occ_v, normal: normal_v, partition: part, skipped_normals: skipped })
}

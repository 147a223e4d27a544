//! Surface depth along rays: dense sampling, secant refinement, and the
//! implicit-differentiation backward pass.
//!
//! The forward pass never touches a tape. The backward pass for a batch of
//! surface points scales the incoming depth gradients by
//! `-1 / (grad_p f(p_hat) . w)` and pushes the result through a single
//! recorded evaluation of `f` at the surface points, so the memory it retains
//! depends on the batch size and network depth but not on the sample count.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::autodiff::{Tape, Tensor};
use crate::camera::{dot, Camera, Ray, Vec3};
use crate::error::{Error, Result};
use crate::field::{FieldParams, LatentCode, ParamTensors};

/// Name of the custom tape op for surface depth.
pub const DEPTH_OP: &str = "surface_depth";
/// Hits whose `|grad f . w|` is at or below this are left out of the
/// backward pass.
pub const DENOM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamplingConfig {
    /// Equally spaced samples per ray.
    pub n: usize,
    /// Level set defining the surface.
    pub tau: f64,
    pub secant_iters: usize,
    /// Stop refining once `|f(d) - tau|` is below this.
    pub secant_tol: f64,
    /// Rays are clipped to this sphere around the origin before sampling.
    pub roi_radius: Option<f64>,
    /// Upper bound on points per tape-free evaluation batch.
    pub max_batch_points: usize,
}

impl Default for RaySamplingConfig {
    fn default() -> Self {
        RaySamplingConfig {
            n: 128,
            tau: 0.5,
            secant_iters: 8,
            secant_tol: 1e-5,
            roi_radius: Some(1.0),
            max_batch_points: 1 << 16,
        }
    }
}

impl RaySamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid(format!("need at least 2 samples per ray, got {}", self.n)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if let Some(r) = self.roi_radius {
            if !(r > 0.0) {
                return Err(Error::invalid("region-of-interest radius must be positive"));
            }
        }
        if self.max_batch_points == 0 {
            return Err(Error::invalid("max_batch_points must be positive"));
        }
        Ok(())
    }

    /// The ray's sampling interval, or `None` when the ray never enters the
    /// region of interest.
    pub fn clip(&self, ray: &Ray) -> Option<Ray> {
        let clipped = match self.roi_radius {
            Some(r) => ray.clip_to_sphere([0.0; 3], r)?,
            None => *ray,
        };
        clipped.far.is_finite().then_some(clipped)
    }
}

/// A refined intersection with the `tau` level set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub point: Vec3,
    /// 1-based index `j` of the bracketing samples `p_j`, `p_{j+1}`.
    pub interval: usize,
    /// `grad_p f(point) . dir`.
    pub denom: f64,
    /// `f(point) - tau`.
    pub residual: f64,
}

/// Forward result for one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    /// Ray with its sampling interval; `None` if it misses the region of
    /// interest.
    pub ray: Option<Ray>,
    pub hit: Option<Hit>,
}

impl SurfaceHit {
    pub fn is_hit(&self) -> bool {
        self.hit.is_some()
    }
}

/// Sample points `r(near + j * ds)` for `j = 1..=n`, with
/// `ds = (far - near) / n`.
pub fn sample_ray(ray: &Ray, n: usize) -> Vec<Vec3> {
    let ds = (ray.far - ray.near) / n as f64;
    (1..=n).map(|j| ray.at(ray.near + j as f64 * ds)).collect()
}

fn sample_depth(ray: &Ray, n: usize, j: usize) -> f64 {
    ray.near + j as f64 * (ray.far - ray.near) / n as f64
}

/// Smallest 1-based `j` with `occ[j] < tau <= occ[j + 1]`, i.e. the first
/// transition from free to occupied space.
pub fn find_crossing(occ: &[f64], tau: f64) -> Option<usize> {
    occ.windows(2).position(|w| w[0] < tau && tau <= w[1]).map(|i| i + 1)
}

/// Outcome of refining one bracket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecantResult {
    pub depth: f64,
    pub residual: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Secant iteration on `g(d) = f(d) - tau` that keeps a bracket
/// `g(lo) < 0 <= g(hi)` and falls back to bisection whenever the secant step
/// leaves it.
#[derive(Debug, Clone)]
pub struct SecantState {
    lo: (f64, f64),
    hi: (f64, f64),
    prev: (f64, f64),
    last: (f64, f64),
    best: (f64, f64),
    evaluations: usize,
    done: bool,
    tol: f64,
}

impl SecantState {
    /// `f_lo` and `f_hi` are residuals `f - tau` at the interval ends.
    pub fn new(lo: f64, g_lo: f64, hi: f64, g_hi: f64, tol: f64) -> Result<Self> {
        if !(lo < hi) || !(g_lo < 0.0 && g_hi >= 0.0) {
            return Err(Error::invalid(format!(
                "secant needs f(lo) < tau <= f(hi) on lo < hi, got g({lo}) = {g_lo}, g({hi}) = {g_hi}"
            )));
        }
        let best = if -g_lo < g_hi { (lo, g_lo) } else { (hi, g_hi) };
        Ok(SecantState {
            lo: (lo, g_lo),
            hi: (hi, g_hi),
            prev: (lo, g_lo),
            last: (hi, g_hi),
            best,
            evaluations: 0,
            done: best.1.abs() < tol,
            tol,
        })
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Next depth to evaluate.
    pub fn propose(&self) -> f64 {
        let ((d0, g0), (d1, g1)) = (self.prev, self.last);
        let secant = if g1 != g0 { d1 - g1 * (d1 - d0) / (g1 - g0) } else { f64::NAN };
        let (a, b) = (self.lo.0, self.hi.0);
        if secant > a && secant < b {
            secant
        } else {
            0.5 * (a + b)
        }
    }

    pub fn update(&mut self, d: f64, g: f64) {
        self.evaluations += 1;
        if g < 0.0 {
            self.lo = (d, g);
        } else {
            self.hi = (d, g);
        }
        self.prev = self.last;
        self.last = (d, g);
        if g.abs() <= self.best.1.abs() {
            self.best = (d, g);
        }
        if g.abs() < self.tol || self.hi.0 - self.lo.0 <= f64::EPSILON * self.hi.0.abs() {
            self.done = true;
        }
    }

    pub fn result(&self) -> SecantResult {
        SecantResult {
            depth: self.best.0,
            residual: self.best.1,
            evaluations: self.evaluations,
            converged: self.best.1.abs() < self.tol,
        }
    }
}

/// Refines a crossing of `f` through `tau` on `[lo, hi]` with at most
/// `iters` evaluations of `f`.
pub fn secant_refine(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tau: f64, iters: usize, tol: f64) -> Result<SecantResult> {
    let mut st = SecantState::new(lo, f(lo) - tau, hi, f(hi) - tau, tol)?;
    for _ in 0..iters {
        if st.is_done() {
            break;
        }
        let d = st.propose();
        st.update(d, f(d) - tau);
    }
    Ok(st.result())
}

/// Predicts the surface depth for every ray. The field is evaluated without
/// recording; the spatial gradient at each hit is cached for the backward
/// pass.
pub fn depth_forward(rays: &[Ray], params: &FieldParams, z: &LatentCode, cfg: &RaySamplingConfig) -> Result<Vec<SurfaceHit>> {
    cfg.validate()?;
    let n = cfg.n;
    let clipped: Vec<Option<Ray>> = rays.iter().map(|r| cfg.clip(r)).collect();
    let active: Vec<usize> = (0..rays.len()).filter(|&i| clipped[i].is_some()).collect();

    // Dense sampling, in chunks of whole rays.
    let rays_per_chunk = (cfg.max_batch_points / n).max(1);
    let mut crossings: Vec<(usize, usize, f64, f64)> = Vec::new();
    for chunk in active.chunks(rays_per_chunk) {
        let mut pts = Array2::zeros((chunk.len() * n, 3));
        for (c, &i) in chunk.iter().enumerate() {
            for (j, p) in sample_ray(clipped[i].as_ref().unwrap(), n).into_iter().enumerate() {
                pts.row_mut(c * n + j).assign(&ndarray::aview1(&p));
            }
        }
        let occ = params.occupancy(pts.view(), z)?;
        let occ = occ.as_slice().expect("contiguous");
        for (c, &i) in chunk.iter().enumerate() {
            let vals = &occ[c * n..(c + 1) * n];
            if let Some(j) = find_crossing(vals, cfg.tau) {
                crossings.push((i, j, vals[j - 1] - cfg.tau, vals[j] - cfg.tau));
            }
        }
    }

    // Batched secant refinement across all crossing rays.
    let mut states: Vec<SecantState> = crossings
        .iter()
        .map(|&(i, j, g_lo, g_hi)| {
            let ray = clipped[i].as_ref().unwrap();
            SecantState::new(sample_depth(ray, n, j), g_lo, sample_depth(ray, n, j + 1), g_hi, cfg.secant_tol)
        })
        .collect::<Result<_>>()?;
    for _ in 0..cfg.secant_iters {
        let pending: Vec<usize> = (0..states.len()).filter(|&k| !states[k].is_done()).collect();
        if pending.is_empty() {
            break;
        }
        let mut pts = Array2::zeros((pending.len(), 3));
        let mut ds = Vec::with_capacity(pending.len());
        for (row, &k) in pending.iter().enumerate() {
            let d = states[k].propose();
            let p = clipped[crossings[k].0].as_ref().unwrap().at(d);
            pts.row_mut(row).assign(&ndarray::aview1(&p));
            ds.push(d);
        }
        let occ = params.occupancy(pts.view(), z)?;
        for (row, &k) in pending.iter().enumerate() {
            states[k].update(ds[row], occ[row] - cfg.tau);
        }
    }

    let mut surface = Array2::zeros((states.len(), 3));
    let results: Vec<SecantResult> = states.iter().map(SecantState::result).collect();
    for (k, res) in results.iter().enumerate() {
        let p = clipped[crossings[k].0].as_ref().unwrap().at(res.depth);
        surface.row_mut(k).assign(&ndarray::aview1(&p));
    }
    let grads = if states.is_empty() { Array2::zeros((0, 3)) } else { params.spatial_gradient(surface.view(), z)? };

    let mut out: Vec<SurfaceHit> = clipped.iter().map(|r| SurfaceHit { ray: *r, hit: None }).collect();
    for (k, res) in results.iter().enumerate() {
        let (i, j, _, _) = crossings[k];
        let ray = clipped[i].as_ref().unwrap();
        let g = [grads[[k, 0]], grads[[k, 1]], grads[[k, 2]]];
        out[i].hit = Some(Hit {
            depth: res.depth,
            point: [surface[[k, 0]], surface[[k, 1]], surface[[k, 2]]],
            interval: j,
            denom: dot(g, ray.dir),
            residual: res.residual,
        });
    }
    Ok(out)
}

/// Bookkeeping from backward passes through the depth op.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct DepthStats {
    /// Rays dropped because `|denom| <= DENOM_EPS`.
    pub excluded: usize,
    /// Nodes recorded by the backward evaluations of `f`.
    pub backward_nodes: usize,
    pub backward_calls: usize,
}

/// Parameter gradient `sum_b mu_b * d f(p_b) / d theta` with
/// `mu_b = -lambda_b / denom_b`, computed by one recorded evaluation of the
/// field at the surface points. Returns one array per parameter tensor (in
/// [`ParamTensors::all`] order) and updates `stats`.
pub fn depth_backward(
    lambda: &[f64],
    points: &Array2<f64>,
    denoms: &[f64],
    params: &FieldParams,
    z: &LatentCode,
    stats: &mut DepthStats,
) -> Result<Vec<ArrayD<f64>>> {
    let b = lambda.len();
    if points.nrows() != b || denoms.len() != b {
        return Err(Error::invalid(format!(
            "depth backward: {b} gradients for {} points and {} denominators",
            points.nrows(),
            denoms.len()
        )));
    }
    let mut mu = ArrayD::zeros(IxDyn(&[b, 1]));
    let mut excluded = 0;
    for k in 0..b {
        if denoms[k].abs() > DENOM_EPS {
            mu[[k, 0]] = -lambda[k] / denoms[k];
        } else {
            excluded += 1;
        }
    }
    if excluded > 0 {
        log::debug!("depth backward: {excluded} grazing rays excluded");
    }
    stats.excluded += excluded;
    let tape = Tape::new();
    let leaves = params.leaves(&tape, z);
    let out = leaves.forward(&Tensor::constant(points.clone().into_dyn()))?;
    let weighted = out.occ.mul(&Tensor::constant(mu))?.sum()?;
    let mut grads = tape.backward(&weighted, 1.0)?;
    stats.backward_nodes += tape.len();
    stats.backward_calls += 1;
    Ok(leaves.all().iter().map(|t| grads.take(t).expect("leaf gradient")).collect())
}

struct DepthContext {
    points: Array2<f64>,
    denoms: Vec<f64>,
    params: FieldParams,
    z: LatentCode,
    stats: Rc<RefCell<DepthStats>>,
}

/// Records the depths of `hits` on the tape of `leaves` as a `B x 1` tensor
/// whose backward rule is [`depth_backward`]. The rule is registered on the
/// tape on first use.
pub fn surface_depth(
    leaves: &ParamTensors,
    params: &FieldParams,
    z: &LatentCode,
    hits: &[Hit],
    stats: Rc<RefCell<DepthStats>>,
) -> Result<Tensor> {
    let inputs = leaves.all();
    let tape = inputs
        .iter()
        .find_map(|t| t.tape())
        .cloned()
        .ok_or_else(|| Error::invalid("surface depth needs parameters recorded on a tape"))?;
    if !tape.has_rule(DEPTH_OP) {
        tape.register_custom(
            DEPTH_OP,
            Rc::new(|ctx, grad| {
                let ctx = ctx.downcast_ref::<DepthContext>().ok_or_else(|| "unexpected context type".to_string())?;
                let lambda: Vec<f64> = grad.iter().copied().collect();
                let mut stats = ctx.stats.borrow_mut();
                depth_backward(&lambda, &ctx.points, &ctx.denoms, &ctx.params, &ctx.z, &mut stats).map_err(|e| e.to_string())
            }),
        )?;
    }
    let b = hits.len();
    let mut points = Array2::zeros((b, 3));
    let mut depth = ArrayD::zeros(IxDyn(&[b, 1]));
    for (k, h) in hits.iter().enumerate() {
        points.row_mut(k).assign(&ndarray::aview1(&h.point));
        depth[[k, 0]] = h.depth;
    }
    let ctx = DepthContext {
        points,
        denoms: hits.iter().map(|h| h.denom).collect(),
        params: params.clone(),
        z: z.clone(),
        stats,
    };
    Ok(tape.record_custom(DEPTH_OP, &inputs, depth, Box::new(ctx))?)
}

/// Rendered image, depth map and hit mask, row-major.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    /// Euclidean ray distance; infinite where nothing was hit.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Renders every pixel center of `camera`: color `t(p_hat)` where a surface
/// is hit, `background` elsewhere.
pub fn render(camera: &Camera, params: &FieldParams, z: &LatentCode, cfg: &RaySamplingConfig, background: [f64; 3]) -> Result<Rendering> {
    let (w, h) = (camera.width, camera.height);
    let rays: Vec<Ray> = (0..h)
        .flat_map(|j| (0..w).map(move |i| (i, j)))
        .map(|(i, j)| camera.pixel_to_ray(Camera::pixel_center(i, j)))
        .collect::<Result<_>>()?;
    let hits = depth_forward(&rays, params, z, cfg)?;
    let hit_idx: Vec<usize> = (0..hits.len()).filter(|&i| hits[i].is_hit()).collect();
    let mut pts = Array2::zeros((hit_idx.len(), 3));
    for (row, &i) in hit_idx.iter().enumerate() {
        pts.row_mut(row).assign(&ndarray::aview1(&hits[i].hit.unwrap().point));
    }
    let colors = params.forward(pts.view(), z)?.rgb;
    let mut out = Rendering {
        width: w,
        height: h,
        rgb: vec![background; w * h],
        depth: vec![f64::INFINITY; w * h],
        mask: vec![false; w * h],
    };
    for (row, &i) in hit_idx.iter().enumerate() {
        out.rgb[i] = [colors[[row, 0]], colors[[row, 1]], colors[[row, 2]]];
        out.depth[i] = hits[i].hit.unwrap().depth;
        out.mask[i] = true;
    }
    Ok(out)
}

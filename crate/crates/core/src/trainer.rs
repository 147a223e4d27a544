//! Optimization loop: pixel sampling, schedules, Adam, checkpoints and
//! metrics.

use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::Arc;

use log::{info, warn};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::field::{read_f64s, write_f64s, FieldParams, LatentCode};
use crate::losses::{feature_registry, occupancy_target_registry, total_loss, Batch, LossContext, LossModes, LossWeights, PixelSample};
use crate::mesh::Bounds;
use crate::raycast::{DepthStats, RaySamplingConfig};
use crate::rng::{stream, stream_rng};
use crate::scene::{visual_hull, MultiViewDataset};

const ADAM_MAGIC: &[u8; 8] = b"DVRADAM1";

/// Training configuration. Every field has a default, and unknown keys are
/// rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub pixels_per_view: usize,
    pub views_per_batch: usize,
    pub tau: f64,
    /// `(iteration, samples per ray)` pairs; the first must be at iteration 0.
    pub n_schedule: Vec<(usize, usize)>,
    /// `(iteration, learning rate)` pairs; empty means the default decay
    /// over `iterations` starting at `learning_rate`.
    pub lr_schedule: Vec<(usize, f64)>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub width: usize,
    pub blocks: usize,
    pub latent_dim: usize,
    pub weights: LossWeights,
    /// Name in the feature registry.
    pub feature: String,
    /// Name in the occupancy-target registry.
    pub occupancy_target: String,
    /// Grid resolution of the visual hull built for the "hull" target.
    pub hull_resolution: usize,
    pub normal_radius: f64,
    pub secant_iters: usize,
    pub secant_tol: f64,
    pub roi_radius: f64,
    /// Checkpoint period in iterations; 0 writes only the final state.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            pixels_per_view: 1024,
            views_per_batch: 4,
            tau: 0.5,
            n_schedule: vec![(0, 16), (500, 32), (1500, 64), (2500, 128)],
            lr_schedule: Vec::new(),
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            width: 64,
            blocks: 5,
            latent_dim: 0,
            weights: LossWeights::default(),
            feature: "rgb".into(),
            occupancy_target: "random".into(),
            hull_resolution: 64,
            normal_radius: 0.01,
            secant_iters: 8,
            secant_tol: 1e-5,
            roi_radius: 1.0,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

fn check_schedule<T: Copy>(name: &str, s: &[(usize, T)], valid: impl Fn(T) -> bool) -> Result<()> {
    match s.first() {
        None => return Err(Error::invalid(format!("{name} is empty"))),
        Some((0, _)) => {}
        Some((it, _)) => return Err(Error::invalid(format!("{name} must start at iteration 0, not {it}"))),
    }
    if s.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::invalid(format!("{name} iterations must be strictly increasing")));
    }
    if !s.iter().all(|&(_, v)| valid(v)) {
        return Err(Error::invalid(format!("{name} has an invalid value")));
    }
    Ok(())
}

/// Value in force at `iteration`.
pub fn scheduled<T: Copy>(schedule: &[(usize, T)], iteration: usize) -> T {
    schedule.iter().take_while(|(it, _)| *it <= iteration).last().or(schedule.first()).expect("non-empty schedule").1
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.message().to_string()))
    }

    /// Divides `base` by 5 at 60% and again at 80% of `iterations`.
    pub fn decay_schedule(iterations: usize, base: f64) -> Vec<(usize, f64)> {
        let mut s = vec![(0, base)];
        for (frac, lr) in [(0.6, base / 5.0), (0.8, base / 25.0)] {
            let it = (iterations as f64 * frac).round() as usize;
            if it > s.last().unwrap().0 {
                s.push((it, lr));
            }
        }
        s
    }

    pub fn effective_lr_schedule(&self) -> Vec<(usize, f64)> {
        if self.lr_schedule.is_empty() {
            Self::decay_schedule(self.iterations, self.learning_rate)
        } else {
            self.lr_schedule.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels_per_view == 0 || self.views_per_batch == 0 {
            return Err(Error::invalid("pixels_per_view and views_per_batch must be at least 1"));
        }
        if self.width == 0 {
            return Err(Error::invalid("width must be at least 1"));
        }
        check_schedule("n_schedule", &self.n_schedule, |n| n >= 2)?;
        check_schedule("lr_schedule", &self.effective_lr_schedule(), |g: f64| g.is_finite() && g >= 0.0)?;
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !(self.normal_radius > 0.0) {
            return Err(Error::invalid("normal_radius must be positive"));
        }
        if self.occupancy_target == "hull" && self.hull_resolution < 2 {
            return Err(Error::invalid("hull_resolution must be at least 2"));
        }
        self.weights.validate()?;
        feature_registry().get(&self.feature)?;
        occupancy_target_registry().get(&self.occupancy_target)?;
        self.sampling(0).validate()
    }

    /// Ray sampling settings in force at `iteration`.
    pub fn sampling(&self, iteration: usize) -> RaySamplingConfig {
        RaySamplingConfig {
            n: scheduled(&self.n_schedule, iteration),
            tau: self.tau,
            secant_iters: self.secant_iters,
            secant_tol: self.secant_tol,
            roi_radius: Some(self.roi_radius),
            ..Default::default()
        }
    }

    pub fn lr(&self, iteration: usize) -> f64 {
        scheduled(&self.effective_lr_schedule(), iteration)
    }
}

/// `count` pixels drawn uniformly with replacement over the whole image of
/// `view`.
pub fn sample_pixels<R: Rng + ?Sized>(data: &MultiViewDataset, view: usize, count: usize, rng: &mut R) -> Vec<PixelSample> {
    let cam = &data.views[view].camera;
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..cam.width);
            let j = rng.random_range(0..cam.height);
            PixelSample::from_view(data, view, i, j)
        })
        .collect()
}

/// Adam moments for every parameter array (followed by the latent code when
/// present).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

/// Parameter arrays in optimizer order, flattened.
fn flat_arrays(params: &FieldParams, z: &LatentCode) -> Vec<Vec<f64>> {
    let mut v: Vec<Vec<f64>> = params.arrays().into_iter().map(|a| a.iter().copied().collect()).collect();
    if z.dim() > 0 {
        v.push(z.0.to_vec());
    }
    v
}

impl AdamState {
    pub fn new(params: &FieldParams, z: &LatentCode) -> Self {
        let zeros: Vec<Vec<f64>> = flat_arrays(params, z).into_iter().map(|a| vec![0.0; a.len()]).collect();
        AdamState { first: zeros.clone(), second: zeros, step: 0 }
    }

    fn shapes_match(&self, grads: &[Vec<f64>]) -> bool {
        self.first.len() == grads.len() && self.first.iter().zip(grads).all(|(m, g)| m.len() == g.len())
    }

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(ADAM_MAGIC)?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.first.len() as u32).to_le_bytes())?;
        for (m, v) in self.first.iter().zip(&self.second) {
            w.write_all(&(m.len() as u64).to_le_bytes())?;
            write_f64s(w, m.iter().copied())?;
            write_f64s(w, v.iter().copied())?;
        }
        Ok(())
    }

    fn read<R: Read>(r: &mut R, params: &FieldParams, z: &LatentCode) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| format!("optimizer state: {e}"))?;
        if &magic != ADAM_MAGIC {
            return Err("optimizer state: bad magic".into());
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b8).map_err(|e| format!("optimizer step: {e}"))?;
        let step = u64::from_le_bytes(b8);
        r.read_exact(&mut b4).map_err(|e| format!("optimizer array count: {e}"))?;
        let mut state = AdamState::new(params, z);
        if u32::from_le_bytes(b4) as usize != state.first.len() {
            return Err("optimizer state does not match the field".into());
        }
        state.step = step;
        for (k, (m, v)) in state.first.iter_mut().zip(state.second.iter_mut()).enumerate() {
            r.read_exact(&mut b8).map_err(|e| format!("optimizer array {k}: {e}"))?;
            if u64::from_le_bytes(b8) as usize != m.len() {
                return Err(format!("optimizer array {k} has the wrong length"));
            }
            read_f64s(r, m).map_err(|e| format!("optimizer array {k}: {e}"))?;
            read_f64s(r, v).map_err(|e| format!("optimizer array {k}: {e}"))?;
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `params` and `z`. Returns `Ok(false)`
/// and leaves everything untouched when a gradient is non-finite.
pub fn adam_step(params: &mut FieldParams, z: &mut LatentCode, grads: &[Vec<f64>], state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<bool> {
    if !state.shapes_match(grads) {
        return Err(Error::invalid("gradient shapes do not match the optimizer state"));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let mut update = |k: usize, values: &mut [f64]| {
        let (m, v, g) = (&mut state.first[k], &mut state.second[k], &grads[k]);
        for i in 0..values.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hyper.eps);
        }
    };
    let mut count = 0;
    params.for_each_array_mut(|k, values| {
        update(k, values);
        count = k + 1;
    });
    if z.dim() > 0 {
        update(count, z.0.as_slice_mut().expect("contiguous latent code"));
    }
    Ok(true)
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: FieldParams,
    pub z: LatentCode,
    pub adam: AdamState,
    /// Number of completed iterations.
    pub iteration: usize,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(config.seed, stream::INIT, 0);
        let params = FieldParams::init(config.width, config.latent_dim, config.blocks, &mut rng)?;
        let z = LatentCode::zeros(config.latent_dim);
        let adam = AdamState::new(&params, &z);
        Ok(TrainState { params, z, adam, iteration: 0 })
    }

    /// Field checkpoint followed by the optimizer state and iteration.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        self.params.write_checkpoint(&self.z, &mut w)?;
        w.write_all(&(self.iteration as u64).to_le_bytes())?;
        self.adam.write(&mut w)?;
        w.flush()
    }

    pub fn read<R: Read>(mut r: R) -> std::result::Result<Self, String> {
        let (params, z) = FieldParams::read_checkpoint(&mut r)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|e| format!("iteration: {e}"))?;
        let iteration = u64::from_le_bytes(b8) as usize;
        let adam = AdamState::read(&mut r, &params, &z)?;
        Ok(TrainState { params, z, adam, iteration })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f)).map_err(|m| Error::format(path, m))
    }
}

/// Metrics of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub n: usize,
    pub lr: f64,
    pub total: f64,
    pub rgb: f64,
    pub depth: f64,
    pub freespace: f64,
    pub occupancy: f64,
    pub normal: f64,
    /// Sizes of the hit, free and missed pixel sets.
    pub partition: [usize; 3],
    /// Hits whose depth gradient was dropped for a vanishing denominator.
    pub excluded: usize,
    pub skipped: bool,
    /// Nodes on the main tape plus nodes built by depth backward passes.
    pub tape_nodes: usize,
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} n={} lr={:.3e} total={:.6e} rgb={:.6e} depth={:.6e} freespace={:.6e} occupancy={:.6e} normal={:.6e} p0={} p1={} p2={} excluded={} skipped={}",
            self.iteration,
            self.n,
            self.lr,
            self.total,
            self.rgb,
            self.depth,
            self.freespace,
            self.occupancy,
            self.normal,
            self.partition[0],
            self.partition[1],
            self.partition[2],
            self.excluded,
            self.skipped as u8
        )
    }
}

/// The optimization loop over a dataset.
pub struct Trainer<'a> {
    data: &'a MultiViewDataset,
    config: TrainConfig,
    modes: LossModes,
    pub state: TrainState,
    pub skipped: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a MultiViewDataset, config: TrainConfig) -> Result<Self> {
        let state = TrainState::init(&config)?;
        Self::resume(data, config, state)
    }

    pub fn resume(data: &'a MultiViewDataset, config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if state.params.width != config.width || state.params.num_blocks() != config.blocks || state.params.latent_dim != config.latent_dim {
            return Err(Error::invalid("checkpoint architecture does not match the config"));
        }
        let hull = if config.occupancy_target == "hull" {
            Some(Arc::new(visual_hull(&data.views, config.hull_resolution, Bounds::cube(config.roi_radius))?))
        } else {
            None
        };
        let features = (*feature_registry().get(&config.feature)?)();
        let occupancy_target = (*occupancy_target_registry().get(&config.occupancy_target)?)(hull)?;
        let modes = LossModes { features, occupancy_target, normal_radius: config.normal_radius };
        Ok(Trainer { data, config, modes, state, skipped: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Pixels of iteration `iteration`: views drawn uniformly with
    /// replacement, then pixels within each.
    pub fn batch_samples(&self, iteration: usize) -> Vec<PixelSample> {
        let mut rng = stream_rng(self.config.seed, stream::PIXELS, iteration as u64);
        let mut samples = Vec::with_capacity(self.config.views_per_batch * self.config.pixels_per_view);
        for _ in 0..self.config.views_per_batch {
            let v = (rng.next_u64() % self.data.views.len() as u64) as usize;
            samples.extend(sample_pixels(self.data, v, self.config.pixels_per_view, &mut rng));
        }
        samples
    }

    /// Loss and gradients for the given pixels under the current parameters
    /// and the sampling in force at `iteration`.
    pub fn evaluate(&self, samples: Vec<PixelSample>, iteration: usize) -> Result<(StepReport, Vec<Vec<f64>>)> {
        let cfg = self.config.sampling(iteration);
        let (params, z) = (&self.state.params, &self.state.z);
        let batch = Batch::new(self.data, samples, params, z, &cfg)?;
        let tape = Tape::new();
        let leaves = params.leaves(&tape, z);
        let stats = Rc::new(RefCell::new(DepthStats::default()));
        let ctx = LossContext { params, z, leaves: &leaves, sampling: &cfg, stats: stats.clone(), depth_gradient: true };
        let out = total_loss(&ctx, self.data, &batch, &self.config.weights, &self.modes, self.config.seed, iteration as u64)?;
        let total = out.total.scalar().unwrap_or(f64::NAN);
        let mut grads = match out.total.node_id() {
            Some(_) => Some(tape.backward(&out.total, 1.0)?),
            None => None,
        };
        let flat: Vec<Vec<f64>> = leaves
            .all()
            .iter()
            .zip(flat_arrays(params, z))
            .map(|(t, a)| match grads.as_mut().and_then(|g| g.take(t)) {
                Some(g) => g.iter().copied().collect(),
                None => vec![0.0; a.len()],
            })
            .collect();
        let stats = stats.borrow();
        let report = StepReport {
            iteration,
            n: cfg.n,
            lr: self.config.lr(iteration),
            total,
            rgb: out.rgb,
            depth: out.depth,
            freespace: out.freespace,
            occupancy: out.occupancy,
            normal: out.normal,
            partition: out.partition.sizes(),
            excluded: stats.excluded,
            skipped: false,
            tape_nodes: tape.len() + stats.backward_nodes,
        };
        Ok((report, flat))
    }

    /// Runs one iteration and advances the state.
    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.state.iteration;
        let (mut report, grads) = self.evaluate(self.batch_samples(it), it)?;
        let hyper = AdamHyper { beta1: self.config.adam_beta1, beta2: self.config.adam_beta2, eps: self.config.adam_eps };
        let applied = report.total.is_finite()
            && adam_step(&mut self.state.params, &mut self.state.z, &grads, &mut self.state.adam, report.lr, hyper)?;
        if !applied {
            warn!("iteration {it}: non-finite loss or gradient, update skipped");
            self.skipped += 1;
            report.skipped = true;
        }
        self.state.iteration += 1;
        Ok(report)
    }

    /// Steps until `until` iterations are complete, calling `on_step` after
    /// each.
    pub fn run_until(&mut self, until: usize, mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        while self.state.iteration < until {
            let report = self.step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// Outputs of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: TrainState,
    /// One record per logging period.
    pub log: Vec<StepReport>,
    pub skipped: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Checkpoint path for `iteration` inside `dir`.
pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.bin"))
}

/// Trains from `start` (or a fresh initialization) to `config.iterations`.
/// With `out_dir`, appends the metrics log to `metrics.log` and writes
/// checkpoints there.
pub fn fit(data: &MultiViewDataset, config: &TrainConfig, start: Option<TrainState>, out_dir: Option<&Path>) -> Result<FitResult> {
    let mut trainer = match start {
        Some(s) => Trainer::resume(data, config.clone(), s)?,
        None => Trainer::new(data, config.clone())?,
    };
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.log");
            let f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let total = config.iterations;
    trainer.run_until(total, |t, r| {
        let done = r.iteration + 1;
        if config.log_every > 0 && (r.iteration % config.log_every == 0 || done == total) {
            info!("{r}");
            if let Some((path, w)) = log_file.as_mut() {
                writeln!(w, "{r}").and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
            }
            log.push(r.clone());
        }
        if let Some(dir) = out_dir {
            if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) || done == total {
                let path = checkpoint_path(dir, done);
                t.state.save(&path)?;
                checkpoints.push(path);
            }
        }
        Ok(())
    })?;
    Ok(FitResult { skipped: trainer.skipped, state: trainer.state, log, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, sphere_scene, CameraRig};

    fn tiny_data() -> MultiViewDataset {
        let mut rng = stream_rng(3, stream::CAMERAS, 0);
        generate_dataset(&sphere_scene(), &CameraRig::new(3, 16), &mut rng).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            pixels_per_view: 32,
            views_per_batch: 2,
            width: 8,
            blocks: 1,
            n_schedule: vec![(0, 8), (3, 16)],
            lr_schedule: vec![(0, 1e-3), (4, 2e-4)],
            log_every: 1,
            ..Default::default()
        }
    }

    #[test]
    fn samples_cover_the_requested_count_in_range() {
        let data = tiny_data();
        let mut rng = stream_rng(0, stream::PIXELS, 0);
        let s = sample_pixels(&data, 1, 1024, &mut rng);
        assert_eq!(s.len(), 1024);
        assert!(s.iter().all(|p| p.view == 1 && p.pixel[0] < 16 && p.pixel[1] < 16));
        let mut again = stream_rng(0, stream::PIXELS, 0);
        assert_eq!(s, sample_pixels(&data, 1, 1024, &mut again));
    }

    #[test]
    fn schedules_switch_exactly_at_their_iterations() {
        let c = TrainConfig { iterations: 100, ..Default::default() };
        assert_eq!(c.sampling(499).n, 16);
        assert_eq!(c.sampling(500).n, 32);
        assert_eq!(c.sampling(2500).n, 128);
        assert_eq!(c.lr(59), 1e-4);
        assert_eq!(c.lr(60), 1e-4 / 5.0);
        assert_eq!(c.lr(80), 1e-4 / 25.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            TrainConfig { pixels_per_view: 0, ..Default::default() },
            TrainConfig { n_schedule: vec![(0, 16), (0, 32)], ..Default::default() },
            TrainConfig { n_schedule: vec![(5, 16)], ..Default::default() },
            TrainConfig { lr_schedule: vec![(0, 1e-3), (10, -1.0)], ..Default::default() },
            TrainConfig { feature: "sobel".into(), ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(TrainConfig::from_toml("iterations = 5\nbogus = 1\n").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig { lr_schedule: vec![(0, 1e-3), (10, 2e-4)], ..tiny_config() };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut rng = stream_rng(0, 0, 0);
        let mut p = FieldParams::init(4, 0, 1, &mut rng).unwrap();
        let before = p.clone();
        let mut z = LatentCode::none();
        let mut state = AdamState::new(&p, &z);
        let grads: Vec<Vec<f64>> = state.first.iter().map(|a| (0..a.len()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect()).collect();
        assert!(adam_step(&mut p, &mut z, &grads, &mut state, 1e-3, AdamHyper::default()).unwrap());
        for ((a, b), g) in p.arrays().iter().zip(before.arrays()).zip(&grads) {
            for ((x, y), gi) in a.iter().zip(b.iter()).zip(g) {
                let expected = -1e-3 * gi / (gi.abs() + 1e-8);
                assert!((x - y - expected).abs() < 1e-15);
                assert!(((x - y).abs() - 1e-3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_and_non_finite_gradients_leave_params_unchanged() {
        let mut rng = stream_rng(0, 0, 0);
        let mut p = FieldParams::init(4, 0, 1, &mut rng).unwrap();
        let before = p.clone();
        let mut z = LatentCode::none();
        let mut state = AdamState::new(&p, &z);
        let zeros: Vec<Vec<f64>> = state.first.clone();
        assert!(adam_step(&mut p, &mut z, &zeros, &mut state, 1e-3, AdamHyper::default()).unwrap());
        assert_eq!(p, before);
        let mut nan = zeros.clone();
        nan[0][0] = f64::NAN;
        let step = state.step;
        assert!(!adam_step(&mut p, &mut z, &nan, &mut state, 1e-3, AdamHyper::default()).unwrap());
        assert_eq!((p, state.step), (before, step));
    }

    #[test]
    fn partition_covers_the_batch_and_terms_are_logged() {
        let data = tiny_data();
        let r = fit(&data, &tiny_config(), None, None).unwrap();
        assert_eq!(r.log.len(), 6);
        for rec in &r.log {
            assert_eq!(rec.partition.iter().sum::<usize>(), 64);
            let line = rec.to_string();
            for key in ["rgb=", "depth=", "freespace=", "occupancy=", "normal=", "p0=", "p1=", "p2=", "n=", "lr="] {
                assert!(line.contains(key), "{line}");
            }
        }
        assert_eq!(r.log[2].n, 8);
        assert_eq!(r.log[3].n, 16);
    }

    #[test]
    fn zero_weights_are_a_fixed_point() {
        let data = tiny_data();
        let zero = LossWeights { rgb: 0.0, depth: 0.0, freespace: 0.0, occupancy: 0.0, normal: 0.0 };
        let config = TrainConfig { weights: zero, ..tiny_config() };
        let init = TrainState::init(&config).unwrap();
        let r = fit(&data, &config, None, None).unwrap();
        assert_eq!(r.state.params, init.params);
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let data = tiny_data();
        let config = tiny_config();
        let full = fit(&data, &config, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let half = fit(&data, &TrainConfig { iterations: 3, ..config.clone() }, None, Some(dir.path())).unwrap();
        let saved = TrainState::load(half.checkpoints.last().unwrap()).unwrap();
        assert_eq!(saved, half.state);
        let resumed = fit(&data, &config, Some(saved), None).unwrap();
        assert_eq!(resumed.state, full.state);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = MultiViewDataset { views: Vec::new() };
        assert!(Trainer::new(&data, tiny_config()).is_err());
    }

    #[test]
    fn truncated_checkpoint_names_the_failing_part() {
        let state = TrainState::init(&tiny_config()).unwrap();
        let mut bytes = Vec::new();
        state.write(&mut bytes).unwrap();
        assert_eq!(TrainState::read(&bytes[..]).unwrap(), state);
        let err = TrainState::read(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.contains("optimizer"), "{err}");
    }
}

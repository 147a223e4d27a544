//! Joint occupancy and texture network.
//!
//! A single residual MLP maps a point (optionally concatenated with a latent
//! code) to four logits: one occupancy logit and three color logits. Both
//! heads are squashed with a sigmoid.
//!
//! The network is evaluated through two paths that compute identical values:
//! a tape-free path on plain arrays (used for ray sampling and rendering) and
//! a recorded path on [`Tensor`]s (used whenever gradients are needed).

use std::io::{Read, Write};

use ndarray::{concatenate, s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{sigmoid, Tape, Tensor};
use crate::error::{Error, Result};

/// Number of residual blocks used by default.
pub const DEFAULT_BLOCKS: usize = 5;
/// Occupancy logit plus three color logits.
pub const OUTPUT_DIM: usize = 4;
/// Gradients with a norm at or below this are treated as degenerate.
pub const NORMAL_EPS: f64 = 1e-8;
/// Points per chunk in the tape-free evaluation path.
pub const EVAL_CHUNK: usize = 8192;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DVRFIELD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `fan_in x fan_out`; rows are applied as `x . W`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Affine { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        Affine { weight, bias: Array1::zeros(fan_out) }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// All weights of the network, in declaration order: input layer, the two
/// layers of each residual block, output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub width: usize,
    pub latent_dim: usize,
    pub input: Affine,
    pub blocks: Vec<(Affine, Affine)>,
    pub output: Affine,
}

/// Conditioning vector concatenated to every input point. Empty for an
/// unconditional model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentCode(pub Array1<f64>);

impl LatentCode {
    pub fn none() -> Self {
        LatentCode(Array1::zeros(0))
    }

    pub fn zeros(dim: usize) -> Self {
        LatentCode(Array1::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Output of the tape-free path.
#[derive(Debug, Clone)]
pub struct FieldEval {
    pub occ: Array1<f64>,
    pub rgb: Array2<f64>,
}

impl FieldParams {
    pub fn zeros(width: usize, latent_dim: usize, blocks: usize) -> Self {
        FieldParams {
            width,
            latent_dim,
            input: Affine::zeros(3 + latent_dim, width),
            blocks: (0..blocks).map(|_| (Affine::zeros(width, width), Affine::zeros(width, width))).collect(),
            output: Affine::zeros(width, OUTPUT_DIM),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases except the
    /// occupancy head, which starts at `+0.5`.
    pub fn init<R: Rng + ?Sized>(width: usize, latent_dim: usize, blocks: usize, rng: &mut R) -> Result<Self> {
        if width == 0 {
            return Err(Error::invalid("network width must be positive"));
        }
        let input = Affine::uniform(3 + latent_dim, width, rng);
        let blocks = (0..blocks)
            .map(|_| (Affine::uniform(width, width, rng), Affine::uniform(width, width, rng)))
            .collect();
        let mut output = Affine::uniform(width, OUTPUT_DIM, rng);
        output.bias[0] = 0.5;
        Ok(FieldParams { width, latent_dim, input, blocks, output })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        Self::count_for(self.width, self.latent_dim, self.blocks.len())
    }

    pub fn count_for(width: usize, latent_dim: usize, blocks: usize) -> usize {
        (3 + latent_dim + 1) * width + blocks * 2 * (width * width + width) + (width + 1) * OUTPUT_DIM
    }

    pub fn layers(&self) -> impl Iterator<Item = &Affine> {
        std::iter::once(&self.input)
            .chain(self.blocks.iter().flat_map(|(a, b)| [a, b]))
            .chain(std::iter::once(&self.output))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        std::iter::once(&mut self.input)
            .chain(self.blocks.iter_mut().flat_map(|(a, b)| [a, b]))
            .chain(std::iter::once(&mut self.output))
    }

    /// Parameter arrays in declaration order (weight then bias per layer).
    pub fn arrays(&self) -> Vec<ArrayD<f64>> {
        self.layers()
            .flat_map(|l| [l.weight.clone().into_dyn(), l.bias.clone().into_dyn()])
            .collect()
    }

    /// Visits every parameter array mutably, in declaration order.
    pub fn for_each_array_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        let mut i = 0;
        for l in self.layers_mut() {
            f(i, l.weight.as_slice_mut().expect("standard layout"));
            f(i + 1, l.bias.as_slice_mut().expect("standard layout"));
            i += 2;
        }
    }

    fn check_inputs(&self, points: &ArrayView2<f64>, z: &LatentCode) -> Result<()> {
        if points.ncols() != 3 {
            return Err(Error::invalid(format!("points must be B x 3, got B x {}", points.ncols())));
        }
        if z.dim() != self.latent_dim {
            return Err(Error::invalid(format!("latent code has dim {}, model expects {}", z.dim(), self.latent_dim)));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field input points".into()));
        }
        if !z.0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(())
    }

    fn input_matrix(&self, points: &ArrayView2<f64>, z: &LatentCode) -> Array2<f64> {
        let mut x = Array2::zeros((points.nrows(), 3 + self.latent_dim));
        x.slice_mut(s![.., 0..3]).assign(points);
        if self.latent_dim > 0 {
            x.slice_mut(s![.., 3..]).assign(&z.0.broadcast((points.nrows(), self.latent_dim)).expect("broadcast"));
        }
        x
    }

    /// Final hidden features `relu(net)` for one chunk.
    fn features(&self, points: &ArrayView2<f64>, z: &LatentCode) -> Array2<f64> {
        let x = self.input_matrix(points, z);
        let mut net = self.input.apply(&x.view());
        for (fc0, fc1) in &self.blocks {
            let a = net.mapv(|v| v.max(0.0));
            let mut h = fc0.apply(&a.view());
            h.mapv_inplace(|v| v.max(0.0));
            net = net + fc1.apply(&h.view());
        }
        net.mapv_inplace(|v| v.max(0.0));
        net
    }

    fn logits_chunk(&self, points: &ArrayView2<f64>, z: &LatentCode) -> Array2<f64> {
        self.output.apply(&self.features(points, z).view())
    }

    fn occupancy_chunk(&self, points: &ArrayView2<f64>, z: &LatentCode) -> Array1<f64> {
        let feats = self.features(points, z);
        let w = self.output.weight.column(0);
        let b = self.output.bias[0];
        (feats.dot(&w) + b).mapv(sigmoid)
    }

    fn chunked<T: Send>(&self, points: &ArrayView2<f64>, f: impl Fn(ArrayView2<f64>) -> T + Sync) -> Vec<T> {
        let n = points.nrows();
        if n <= EVAL_CHUNK {
            return vec![f(points.view())];
        }
        let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
        starts
            .into_par_iter()
            .map(|s0| f(points.slice(s![s0..(s0 + EVAL_CHUNK).min(n), ..])))
            .collect()
    }

    /// Occupancy probability and color for a batch of points.
    pub fn forward(&self, points: ArrayView2<f64>, z: &LatentCode) -> Result<FieldEval> {
        self.check_inputs(&points, z)?;
        let parts = self.chunked(&points, |c| self.logits_chunk(&c, z));
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let logits = if views.is_empty() {
            Array2::zeros((0, OUTPUT_DIM))
        } else {
            concatenate(Axis(0), &views).expect("same width")
        };
        Ok(FieldEval {
            occ: logits.column(0).mapv(sigmoid),
            rgb: logits.slice(s![.., 1..4]).mapv(sigmoid),
        })
    }

    /// Occupancy probability only; skips the color head.
    pub fn occupancy(&self, points: ArrayView2<f64>, z: &LatentCode) -> Result<Array1<f64>> {
        self.check_inputs(&points, z)?;
        let parts = self.chunked(&points, |c| self.occupancy_chunk(&c, z));
        Ok(parts.into_iter().flatten().collect())
    }

    /// Records the parameters (and the latent code, when conditioned) as
    /// leaves on `tape`.
    pub fn leaves(&self, tape: &Tape, z: &LatentCode) -> ParamTensors {
        let layers = self
            .layers()
            .map(|l| (tape.leaf(l.weight.clone().into_dyn()), tape.leaf(l.bias.clone().into_dyn())))
            .collect();
        let z = (self.latent_dim > 0).then(|| tape.leaf(z.0.clone().insert_axis(Axis(0)).into_dyn()));
        ParamTensors { layers, z, latent_dim: self.latent_dim }
    }

    /// Constant (non-differentiable) tensors holding the parameters.
    pub fn constants(&self, z: &LatentCode) -> ParamTensors {
        let layers = self
            .layers()
            .map(|l| (Tensor::constant(l.weight.clone().into_dyn()), Tensor::constant(l.bias.clone().into_dyn())))
            .collect();
        let z = (self.latent_dim > 0).then(|| Tensor::constant(z.0.clone().insert_axis(Axis(0)).into_dyn()));
        ParamTensors { layers, z, latent_dim: self.latent_dim }
    }

    /// Spatial gradient of the occupancy probability, `d f / d p`, for each
    /// point, by reverse-mode differentiation with respect to the points.
    pub fn spatial_gradient(&self, points: ArrayView2<f64>, z: &LatentCode) -> Result<Array2<f64>> {
        self.check_inputs(&points, z)?;
        let tape = Tape::new();
        let params = self.constants(z);
        let p = tape.leaf(points.to_owned().into_dyn());
        let out = params.forward(&p)?;
        let total = out.occ.sum()?;
        let mut grads = tape.backward(&total, 1.0)?;
        let g = grads.take(&p).expect("points are a leaf");
        Ok(g.into_dimensionality().expect("B x 3"))
    }

    /// Unit normal `grad f / |grad f|` at a point.
    pub fn surface_normal(&self, point: [f64; 3], z: &LatentCode) -> Result<Normal> {
        let pts = Array2::from_shape_vec((1, 3), point.to_vec()).expect("1 x 3");
        let g = self.spatial_gradient(pts.view(), z)?;
        Ok(Normal::from_gradient([g[[0, 0]], g[[0, 1]], g[[0, 2]]]))
    }

    /// Writes the field checkpoint: header followed by every parameter array
    /// in declaration order and the latent code, as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, z: &LatentCode, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [CHECKPOINT_VERSION, self.width as u32, self.blocks.len() as u32, self.latent_dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for a in self.arrays() {
            write_f64s(&mut w, a.iter().copied())?;
        }
        write_f64s(&mut w, z.0.iter().copied())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> std::result::Result<(Self, LatentCode), String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| format!("header: {e}"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err("not a field checkpoint (bad magic)".into());
        }
        let mut header = [0u32; 4];
        for h in &mut header {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| format!("header: {e}"))?;
            *h = u32::from_le_bytes(b);
        }
        let [version, width, blocks, latent_dim] = header.map(|v| v as usize);
        if version != CHECKPOINT_VERSION as usize {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        if width == 0 || width > 1 << 16 || blocks > 1 << 10 || latent_dim > 1 << 16 {
            return Err(format!("implausible header: width {width}, blocks {blocks}, latent_dim {latent_dim}"));
        }
        let mut params = FieldParams::zeros(width, latent_dim, blocks);
        let mut failure = None;
        params.for_each_array_mut(|i, dst| {
            if failure.is_none() {
                if let Err(e) = read_f64s(&mut r, dst) {
                    failure = Some(format!("parameter array {i}: {e}"));
                }
            }
        });
        if let Some(f) = failure {
            return Err(f);
        }
        let mut z = vec![0.0; latent_dim];
        read_f64s(&mut r, &mut z).map_err(|e| format!("latent code: {e}"))?;
        Ok((params, LatentCode(Array1::from(z))))
    }
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, dst: &mut [f64]) -> std::io::Result<()> {
    let mut b = [0u8; 8];
    for d in dst {
        r.read_exact(&mut b)?;
        *d = f64::from_le_bytes(b);
    }
    Ok(())
}

/// Result of normalizing a field gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normal {
    Unit([f64; 3]),
    /// Gradient norm at or below [`NORMAL_EPS`].
    Degenerate,
}

impl Normal {
    pub fn from_gradient(g: [f64; 3]) -> Self {
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if n <= NORMAL_EPS || !n.is_finite() {
            Normal::Degenerate
        } else {
            Normal::Unit([g[0] / n, g[1] / n, g[2] / n])
        }
    }

    pub fn unit(self) -> Option<[f64; 3]> {
        match self {
            Normal::Unit(n) => Some(n),
            Normal::Degenerate => None,
        }
    }
}

/// Network parameters as tensors, ready for a recorded forward pass.
#[derive(Clone, Debug)]
pub struct ParamTensors {
    /// `(weight, bias)` per layer in declaration order.
    pub layers: Vec<(Tensor, Tensor)>,
    /// Latent code as a `1 x latent_dim` tensor.
    pub z: Option<Tensor>,
    latent_dim: usize,
}

/// Output of the recorded path. `occ` is `B x 1`, `rgb` is `B x 3`.
#[derive(Clone, Debug)]
pub struct FieldTensors {
    pub occ: Tensor,
    pub rgb: Tensor,
}

impl ParamTensors {
    /// Every tensor in declaration order, latent code last.
    pub fn all(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.layers.iter().flat_map(|(w, b)| [w, b]).collect();
        if let Some(z) = &self.z {
            v.push(z);
        }
        v
    }

    fn num_blocks(&self) -> usize {
        self.layers.len() - 2
    }

    fn block(&self, i: usize) -> (&(Tensor, Tensor), &(Tensor, Tensor)) {
        (&self.layers[1 + 2 * i], &self.layers[2 + 2 * i])
    }

    fn input_tensor(&self, points: &Tensor) -> Result<Tensor> {
        match &self.z {
            None => Ok(points.clone()),
            Some(z) => {
                let ones = Tensor::constant(ArrayD::ones(IxDyn(&[points.shape()[0], 1])));
                let tiled = ones.matmul(z)?;
                Ok(Tensor::concat(&[points, &tiled], 1)?)
            }
        }
    }

    /// Recorded forward pass for `B x 3` points.
    pub fn forward(&self, points: &Tensor) -> Result<FieldTensors> {
        if points.shape().len() != 2 || points.shape()[1] != 3 {
            return Err(Error::invalid(format!("points must be B x 3, got {:?}", points.shape())));
        }
        if !points.value().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field input points".into()));
        }
        let x = self.input_tensor(points)?;
        let (w_in, b_in) = &self.layers[0];
        let mut net = x.matmul(w_in)?.bias_add(b_in)?;
        for i in 0..self.num_blocks() / 2 {
            let ((w0, b0), (w1, b1)) = self.block(i);
            let h = net.relu()?.matmul(w0)?.bias_add(b0)?.relu()?;
            net = net.add(&h.matmul(w1)?.bias_add(b1)?)?;
        }
        let (w_out, b_out) = self.layers.last().expect("output layer");
        let logits = net.relu()?.matmul(w_out)?.bias_add(b_out)?;
        Ok(FieldTensors {
            occ: logits.slice(1, 0, 1)?.sigmoid()?,
            rgb: logits.slice(1, 1, OUTPUT_DIM)?.sigmoid()?,
        })
    }

    /// Occupancy (`B x 1`) together with its spatial gradient (`B x 3`), both
    /// recorded so that losses on the gradient can be differentiated with
    /// respect to the parameters. The gradient is built by propagating the
    /// three coordinate tangents through the network alongside the values;
    /// ReLU masks enter as constants.
    pub fn forward_with_spatial_gradient(&self, points: &Array2<f64>) -> Result<(Tensor, Tensor)> {
        let b = points.nrows();
        if points.ncols() != 3 || !points.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("points must be finite B x 3"));
        }
        let p = Tensor::constant(points.clone().into_dyn());
        let x = self.input_tensor(&p)?;
        let (w_in, b_in) = &self.layers[0];
        let mut net = x.matmul(w_in)?.bias_add(b_in)?;

        // Tangent rows k*B..(k+1)*B hold d(net)/d(p_k).
        let mut selector = ArrayD::zeros(IxDyn(&[3 * b, 3 + self.latent_dim]));
        for k in 0..3 {
            for r in 0..b {
                selector[[k * b + r, k]] = 1.0;
            }
        }
        let mut tnet = Tensor::constant(selector).matmul(w_in)?;

        let relu_mask = |t: &Tensor| -> Tensor {
            let m = t.value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let tiled = concatenate(Axis(0), &[m.view(), m.view(), m.view()]).expect("same shape");
            Tensor::constant(tiled)
        };

        for i in 0..self.num_blocks() / 2 {
            let ((w0, b0), (w1, b1)) = self.block(i);
            let ta = tnet.mul(&relu_mask(&net))?;
            let pre = net.relu()?.matmul(w0)?.bias_add(b0)?;
            let th = ta.matmul(w0)?.mul(&relu_mask(&pre))?;
            let h = pre.relu()?;
            net = net.add(&h.matmul(w1)?.bias_add(b1)?)?;
            tnet = tnet.add(&th.matmul(w1)?)?;
        }
        let (w_out, b_out) = self.layers.last().expect("output layer");
        let tfeat = tnet.mul(&relu_mask(&net))?;
        let logit = net.relu()?.matmul(w_out)?.bias_add(b_out)?.slice(1, 0, 1)?;
        let occ = logit.sigmoid()?;
        let tlogit = tfeat.matmul(&w_out.slice(1, 0, 1)?)?;
        let dsig = occ.sub(&occ.mul(&occ)?)?;
        let parts: Vec<Tensor> = (0..3)
            .map(|k| tlogit.slice(0, k * b, (k + 1) * b)?.mul(&dsig))
            .collect::<std::result::Result<_, _>>()?;
        let grad = Tensor::concat(&[&parts[0], &parts[1], &parts[2]], 1)?;
        Ok((occ, grad))
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

//! Image encoder `f2d`, upsampling projection `u2d`, point encoder `f3d`
//! and the projection heads `g2d` / `g3d`.
//!
//! Every network owns a [`ParamSet`]. A forward pass first binds the set to
//! a tape (trainable or frozen), then records its ops against those vars.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::numcore::{BatchStats, Tape, Tensor, Var};
use crate::renderer::{CorrespondenceSet, Image};

/// Batchnorm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the caller folds them into the running buffers.
    Train,
    /// Running statistics; the pass is a pure function of the parameters.
    Eval,
}

/// Named learnable tensors plus batchnorm running buffers, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Vec<f64>>,
}

impl ParamSet {
    fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(t);
        self.values.len() - 1
    }

    fn push_bn(&mut self, name: &str, channels: usize) {
        self.push(format!("{name}.gamma"), Tensor::ones([channels]));
        self.push(format!("{name}.beta"), Tensor::zeros([channels]));
        self.buffer_names.push(format!("{name}.running_mean"));
        self.buffers.push(vec![0.0; channels]);
        self.buffer_names.push(format!("{name}.running_var"));
        self.buffers.push(vec![1.0; channels]);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self.names.iter().position(|n| n == name).ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
        if t.shape() != self.values[i].shape() {
            return Err(Error::contract(format!("parameter {name}: shape {:?} vs stored {:?}", t.shape(), self.values[i].shape())));
        }
        self.values[i] = t;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, v: Vec<f64>) -> Result<()> {
        let i = self
            .buffer_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::contract(format!("no buffer named {name}")))?;
        if v.len() != self.buffers[i].len() {
            return Err(Error::contract(format!("buffer {name}: length {} vs stored {}", v.len(), self.buffers[i].len())));
        }
        self.buffers[i] = v;
        Ok(())
    }

    /// Records every tensor as a tape leaf, tracked iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    fn running(&self, layer: usize) -> (&[f64], &[f64]) {
        (&self.buffers[2 * layer], &self.buffers[2 * layer + 1])
    }

    /// `running ← (1 − m)·running + m·batch` for every batchnorm layer.
    pub fn update_running(&mut self, stats: &[BatchStats], momentum: f64) -> Result<()> {
        if 2 * stats.len() != self.buffers.len() {
            return Err(Error::contract(format!("{} batch statistics for {} batchnorm layers", stats.len(), self.buffers.len() / 2)));
        }
        for (layer, s) in stats.iter().enumerate() {
            for (r, b) in self.buffers[2 * layer].iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.buffers[2 * layer + 1].iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Uniform He initialisation: `U(−b, b)` with `b = sqrt(6 / fan_in)`.
fn he_uniform(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = shape.into();
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("he_uniform shape")
}

#[allow(clippy::too_many_arguments)]
fn batch_norm(tape: &mut Tape, ps: &ParamSet, p: &[Var], gi: usize, layer: usize, x: Var, mode: Mode, stats: &mut Vec<BatchStats>) -> Result<Var> {
    let running = match mode {
        Mode::Train => None,
        Mode::Eval => Some(ps.running(layer)),
    };
    let (y, s) = tape.batch_norm(x, p[gi], p[gi + 1], running)?;
    stats.extend(s);
    Ok(y)
}

fn check_bound(ps: &ParamSet, p: &[Var], who: &str) -> Result<()> {
    if p.len() != ps.values.len() {
        return Err(Error::contract(format!("{who}: {} bound vars for {} parameters", p.len(), ps.values.len())));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder2DConfig {
    /// Output channels of each stride-2 stage; `s` is the stage count and
    /// `C1` the last width.
    pub widths: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Default for Encoder2DConfig {
    fn default() -> Self {
        Self { widths: vec![16, 32, 64], height: 32, width: 32 }
    }
}

impl Encoder2DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::contract(format!("image encoder widths {:?} must be non-empty and positive", self.widths)));
        }
        let f = 1usize << self.stages();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::contract(format!(
                "image size {}x{} not divisible by 2^{} = {f}",
                self.height,
                self.width,
                self.stages()
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// `(C1, H1, W1)`.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let s = self.stages();
        (*self.widths.last().unwrap_or(&0), self.height >> s, self.width >> s)
    }

    /// `C1·H1·W1`, the input width of the image-side head.
    pub fn flat_dim(&self) -> usize {
        let (c, h, w) = self.output_shape();
        c * h * w
    }
}

/// `f2d`: stride-2 3×3 convolutions, each followed by batchnorm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder2D {
    pub config: Encoder2DConfig,
    pub params: ParamSet,
}

impl Encoder2D {
    pub fn new(config: Encoder2DConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut c_in = 3;
        for (i, &c) in config.widths.iter().enumerate() {
            params.push(format!("conv{i}.weight"), he_uniform([c, c_in, 3, 3], c_in * 9, rng));
            params.push_bn(&format!("bn{i}"), c);
            c_in = c;
        }
        Ok(Self { config, params })
    }

    /// Final batchnorm scaled to zero, so the feature map is identically 0.
    pub fn zero_final_layer(&mut self) {
        let n = self.params.values.len();
        for t in &mut self.params.values[n - 2..] {
            t.data_mut().fill(0.0);
        }
    }

    /// `x[N,3,H,W] → [N,C1,H1,W1]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        check_bound(&self.params, p, "f2d")?;
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.height || s[3] != self.config.width {
            return Err(Error::contract(format!(
                "image batch {s:?} does not match encoder input [N, 3, {}, {}]",
                self.config.height, self.config.width
            )));
        }
        let mut stats = Vec::new();
        let mut h = x;
        for i in 0..self.config.stages() {
            h = tape.conv2d(h, p[3 * i], 2, 1)?;
            h = batch_norm(tape, &self.params, p, 3 * i + 1, i, h, mode, &mut stats)?;
            h = tape.relu(h);
        }
        Ok((h, stats))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpsamplerConfig {
    pub in_channels: usize,
    /// Per-pixel output dimension `d`.
    pub out_channels: usize,
    /// Number of ×2 stages; equals the image encoder's `s`.
    pub stages: usize,
}

impl UpsamplerConfig {
    pub fn for_encoder(enc: &Encoder2DConfig, out_channels: usize) -> Self {
        Self { in_channels: enc.output_shape().0, out_channels, stages: enc.stages() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stages == 0 {
            return Err(Error::contract(format!("upsampler config {self:?} has a zero field")));
        }
        Ok(())
    }
}

/// `u2d`: per stage, nearest ×2 upsampling then a 1×1 convolution with
/// bias; ReLU between stages, none after the last.
///
/// Both ops act per pixel, so the feature at `(u, v)` of the full-resolution
/// map equals the stage stack applied to the coarse cell `(u >> s, v >> s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    pub config: UpsamplerConfig,
    pub params: ParamSet,
}

impl Upsampler {
    pub fn new(config: UpsamplerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut c_in = config.in_channels;
        for i in 0..config.stages {
            let c = config.out_channels;
            params.push(format!("proj{i}.weight"), he_uniform([c, c_in, 1, 1], c_in, rng));
            params.push(format!("proj{i}.bias"), Tensor::zeros([c]));
            c_in = c;
        }
        Ok(Self { config, params })
    }

    pub fn zero_final_layer(&mut self) {
        let n = self.params.values.len();
        for t in &mut self.params.values[n - 2..] {
            t.data_mut().fill(0.0);
        }
    }

    fn check_input(&self, tape: &Tape, fmap: Var) -> Result<Vec<usize>> {
        let s = tape.shape(fmap).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::contract(format!("feature map {s:?} does not have {} channels", self.config.in_channels)));
        }
        Ok(s)
    }

    /// `[N,C1,H1,W1] → [N,d,H1·2^s,W1·2^s]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], fmap: Var) -> Result<Var> {
        check_bound(&self.params, p, "u2d")?;
        self.check_input(tape, fmap)?;
        let mut h = fmap;
        for i in 0..self.config.stages {
            h = tape.upsample2x(h)?;
            h = tape.conv2d(h, p[2 * i], 1, 0)?;
            h = tape.add_bias(h, p[2 * i + 1], 1)?;
            if i + 1 < self.config.stages {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Rows of the upsampled map at full-resolution pixels `(n, v, u)`,
    /// without materialising the map.
    pub fn forward_pixels(&self, tape: &mut Tape, p: &[Var], fmap: Var, pixels: &[(usize, usize, usize)]) -> Result<Var> {
        check_bound(&self.params, p, "u2d")?;
        let s = self.check_input(tape, fmap)?;
        let st = self.config.stages;
        let (hh, ww) = (s[2] << st, s[3] << st);
        if let Some(&(n, v, u)) = pixels.iter().find(|&&(n, v, u)| n >= s[0] || v >= hh || u >= ww) {
            return Err(Error::contract(format!("pixel (u={u}, v={v}) of image {n} outside {ww}x{hh} map of {} images", s[0])));
        }
        let coarse: Vec<_> = pixels.iter().map(|&(n, v, u)| (n, v >> st, u >> st)).collect();
        let mut h = tape.gather_pixels(fmap, &coarse)?;
        let mut c_in = self.config.in_channels;
        for i in 0..st {
            let w = tape.reshape(p[2 * i], [self.config.out_channels, c_in])?;
            h = tape.matmul_t(h, w, false, true)?;
            h = tape.add_bias(h, p[2 * i + 1], 1)?;
            if i + 1 < st {
                h = tape.relu(h);
            }
            c_in = self.config.out_channels;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder3DConfig {
    /// Shared-MLP widths after the 3-d input; the last is `C2`.
    pub widths: Vec<usize>,
}

impl Default for Encoder3DConfig {
    fn default() -> Self {
        Self { widths: vec![64, 128, 256] }
    }
}

impl Encoder3DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::contract(format!("point encoder widths {:?} must be non-empty and positive", self.widths)));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

/// `f3d`: shared per-point MLP, each layer linear → batchnorm → ReLU.
/// Batchnorm pools over every point of every cloud in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder3D {
    pub config: Encoder3DConfig,
    pub params: ParamSet,
}

impl Encoder3D {
    pub fn new(config: Encoder3DConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut c_in = 3;
        for (i, &c) in config.widths.iter().enumerate() {
            params.push(format!("mlp{i}.weight"), he_uniform([c_in, c], c_in, rng));
            params.push_bn(&format!("bn{i}"), c);
            c_in = c;
        }
        Ok(Self { config, params })
    }

    pub fn zero_final_layer(&mut self) {
        let n = self.params.values.len();
        for t in &mut self.params.values[n - 2..] {
            t.data_mut().fill(0.0);
        }
    }

    /// `[N,L,3] → [N·L, C2]`, rows ordered cloud-major.
    pub fn forward_rows(&self, tape: &mut Tape, p: &[Var], clouds: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        check_bound(&self.params, p, "f3d")?;
        let s = tape.shape(clouds).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::dim("encode_points", format!("cloud batch {s:?} is not [N, L, 3]")));
        }
        let mut h = tape.reshape(clouds, [s[0] * s[1], 3])?;
        let mut stats = Vec::new();
        for i in 0..self.config.widths.len() {
            h = tape.matmul(h, p[3 * i])?;
            h = batch_norm(tape, &self.params, p, 3 * i + 1, i, h, mode, &mut stats)?;
            h = tape.relu(h);
        }
        Ok((h, stats))
    }

    /// `[N,L,3] → [N,L,C2]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], clouds: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        let s = tape.shape(clouds).to_vec();
        let (rows, stats) = self.forward_rows(tape, p, clouds, mode)?;
        Ok((tape.reshape(rows, [s[0], s[1], self.config.out_channels()])?, stats))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionHeadConfig {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl ProjectionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.output == 0 {
            return Err(Error::contract(format!("projection head {self:?} has a zero dimension")));
        }
        Ok(())
    }
}

/// `g2d` / `g3d`: linear → ReLU → linear, outputs left unnormalised.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub config: ProjectionHeadConfig,
    pub params: ParamSet,
}

impl ProjectionHead {
    pub fn new(config: ProjectionHeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        params.push("fc0.weight", he_uniform([config.input, config.hidden], config.input, rng));
        params.push("fc0.bias", Tensor::zeros([config.hidden]));
        params.push("fc1.weight", he_uniform([config.hidden, config.output], config.hidden, rng));
        params.push("fc1.bias", Tensor::zeros([config.output]));
        Ok(Self { config, params })
    }

    pub fn zero_final_layer(&mut self) {
        for t in &mut self.params.values[2..] {
            t.data_mut().fill(0.0);
        }
    }

    /// `[B, input] → [B, output]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        check_bound(&self.params, p, "head")?;
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.config.input {
            return Err(Error::dim("projection_head", format!("input {s:?} vs head input {}", self.config.input)));
        }
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_bias(h, p[1], 1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, p[2])?;
        tape.add_bias(h, p[3], 1)
    }
}

/// Stacks images as `[N,3,H,W]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Degenerate("no images to stack".into()))?;
    let (w, h) = (first.width, first.height);
    if let Some(bad) = images.iter().find(|im| (im.width, im.height) != (w, h)) {
        return Err(Error::dim("images_to_tensor", format!("{}x{} image among {w}x{h} images", bad.width, bad.height)));
    }
    let data = images.iter().flat_map(|im| im.to_chw()).collect();
    Tensor::new([images.len(), 3, h, w], data)
}

/// Stacks equally sized clouds as `[N,L,3]`.
pub fn clouds_to_tensor(clouds: &[&PointCloud]) -> Result<Tensor> {
    let first = clouds.first().ok_or_else(|| Error::Degenerate("no clouds to stack".into()))?;
    let l = first.len();
    if l == 0 {
        return Err(Error::Degenerate("empty point cloud".into()));
    }
    if let Some(bad) = clouds.iter().find(|c| c.len() != l) {
        return Err(Error::dim("clouds_to_tensor", format!("cloud of {} points among clouds of {l}", bad.len())));
    }
    Tensor::new([clouds.len(), l, 3], clouds.iter().flat_map(|c| c.flat()).collect())
}

/// Eval-mode `f2d` over a batch of images.
pub fn encode_image(f2d: &Encoder2D, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = f2d.params.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let (y, _) = f2d.forward(&mut tape, &p, x, Mode::Eval)?;
    Ok(tape.value(y).clone())
}

pub fn upsample_features(u2d: &Upsampler, fmap: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = u2d.params.bind(&mut tape, false);
    let x = tape.constant(fmap.clone());
    let y = u2d.forward(&mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}

/// Eval-mode `f3d` over a batch of clouds.
pub fn encode_points(f3d: &Encoder3D, clouds: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = f3d.params.bind(&mut tape, false);
    let x = tape.constant(clouds.clone());
    let (y, _) = f3d.forward(&mut tape, &p, x, Mode::Eval)?;
    Ok(tape.value(y).clone())
}

/// `g2d(max_j f2d(y_j))` over the `m` views of one object, max taken
/// element-wise over the full `C1×H1×W1` tensors.
pub fn global_image_feature(f2d: &Encoder2D, g2d: &ProjectionHead, views: &[&Image]) -> Result<Vec<f64>> {
    if views.is_empty() {
        return Err(Error::contract("global image feature needs at least one view"));
    }
    let mut tape = Tape::new();
    let pf = f2d.params.bind(&mut tape, false);
    let pg = g2d.params.bind(&mut tape, false);
    let x = tape.constant(images_to_tensor(views)?);
    let (fmap, _) = f2d.forward(&mut tape, &pf, x, Mode::Eval)?;
    let pooled = tape.max_pool(fmap, 0)?;
    let flat = tape.reshape(pooled, [1, f2d.config.flat_dim()])?;
    let z = g2d.forward(&mut tape, &pg, flat)?;
    Ok(tape.value(z).data().to_vec())
}

/// `g3d(max f3d(P))`.
pub fn global_point_feature(f3d: &Encoder3D, g3d: &ProjectionHead, cloud: &PointCloud) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::contract("global point feature of an empty cloud"));
    }
    let mut tape = Tape::new();
    let pf = f3d.params.bind(&mut tape, false);
    let pg = g3d.params.bind(&mut tape, false);
    let x = tape.constant(clouds_to_tensor(&[cloud])?);
    let (feats, _) = f3d.forward(&mut tape, &pf, x, Mode::Eval)?;
    let pooled = tape.max_pool(feats, 1)?;
    let z = g3d.forward(&mut tape, &pg, pooled)?;
    Ok(tape.value(z).data().to_vec())
}

/// The networks feeding the pixel-point objective.
#[derive(Clone, Copy)]
pub struct PixelPointNets<'a> {
    pub f2d: &'a Encoder2D,
    pub u2d: &'a Upsampler,
    pub f3d: &'a Encoder3D,
    pub g3d: &'a ProjectionHead,
}

/// Eval-mode `(z2d, z3d)` for the correspondence entries `batch`.
///
/// `images[o][j]` is view `j` of object `o`, `clouds[o]` its point cloud.
pub fn pixel_point_features(
    nets: PixelPointNets<'_>,
    set: &CorrespondenceSet,
    images: &[Vec<Image>],
    clouds: &[PointCloud],
    batch: &[usize],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut views: Vec<(usize, usize)> = Vec::new();
    let mut objects: Vec<usize> = Vec::new();
    let mut pixel_rows = Vec::with_capacity(batch.len());
    let mut point_rows = Vec::with_capacity(batch.len());
    for &b in batch {
        let e = set.entries.get(b).ok_or_else(|| Error::contract(format!("entry {b} outside set of {}", set.len())))?;
        let cloud = clouds.get(e.object_id).ok_or_else(|| Error::contract(format!("entry {b}: no cloud for object {}", e.object_id)))?;
        let image = images
            .get(e.object_id)
            .and_then(|v| v.get(e.view_id))
            .ok_or_else(|| Error::contract(format!("entry {b}: no image for object {} view {}", e.object_id, e.view_id)))?;
        if e.point_index >= cloud.len() {
            return Err(Error::contract(format!("entry {b}: point {} outside cloud of {}", e.point_index, cloud.len())));
        }
        if e.pixel_u >= image.width || e.pixel_v >= image.height {
            return Err(Error::contract(format!("entry {b}: pixel ({}, {}) outside {}x{}", e.pixel_u, e.pixel_v, image.width, image.height)));
        }
        let vi = index_of(&mut views, (e.object_id, e.view_id));
        let oi = index_of(&mut objects, e.object_id);
        pixel_rows.push((vi, e.pixel_v, e.pixel_u));
        point_rows.push((oi, e.point_index));
    }
    if batch.is_empty() {
        return Ok(Vec::new());
    }

    let mut tape = Tape::new();
    let pf2 = nets.f2d.params.bind(&mut tape, false);
    let pu = nets.u2d.params.bind(&mut tape, false);
    let pf3 = nets.f3d.params.bind(&mut tape, false);
    let pg = nets.g3d.params.bind(&mut tape, false);
    let imgs: Vec<&Image> = views.iter().map(|&(o, j)| &images[o][j]).collect();
    let x = tape.constant(images_to_tensor(&imgs)?);
    let (fmap, _) = nets.f2d.forward(&mut tape, &pf2, x, Mode::Eval)?;
    let z2d = nets.u2d.forward_pixels(&mut tape, &pu, fmap, &pixel_rows)?;

    // eval-mode rows are independent of batch composition, so clouds of
    // different sizes are encoded one at a time
    let mut row_vars = Vec::with_capacity(objects.len());
    for &o in &objects {
        let c = tape.constant(clouds_to_tensor(&[&clouds[o]])?);
        let (rows, _) = nets.f3d.forward_rows(&mut tape, &pf3, c, Mode::Eval)?;
        row_vars.push(rows);
    }
    let mut offsets = Vec::with_capacity(objects.len());
    let mut acc = 0;
    for &o in &objects {
        offsets.push(acc);
        acc += clouds[o].len();
    }
    let all_rows = tape.concat_rows(&row_vars)?;
    let idx: Vec<usize> = point_rows.iter().map(|&(oi, p)| offsets[oi] + p).collect();
    let sel = tape.gather_rows(all_rows, &idx)?;
    let z3d = nets.g3d.forward(&mut tape, &pg, sel)?;

    let (a, b) = (tape.value(z2d), tape.value(z3d));
    Ok((0..batch.len()).map(|r| (a.row(r).to_vec(), b.row(r).to_vec())).collect())
}

fn index_of<T: PartialEq + Copy>(list: &mut Vec<T>, item: T) -> usize {
    match list.iter().position(|&x| x == item) {
        Some(i) => i,
        None => {
            list.push(item);
            list.len() - 1
        }
    }
}

//! One classification branch: five feature-extraction blocks
//! (3×3 conv → 2×2 max-pool → ReLU) followed by three mapping blocks
//! (fully connected → sigmoid, twice, then fully connected → softmax).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::classes::{ClassDistribution, NUM_ROCK_TYPES};
use crate::error::{Error, Result};
use crate::preprocess::Role;
use crate::tensor::{
    conv2d, conv2d_backward, conv_output_size, cross_entropy_loss, fully_connected, fully_connected_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, sgd_step, sigmoid, sigmoid_backward, softmax, LayerCache, Scalar, Tensor,
};

pub const FEATURE_BLOCKS: usize = 5;
pub const MAPPING_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchConfig {
    pub patch_size: usize,
    pub channel_widths: [usize; FEATURE_BLOCKS],
    pub fc_widths: [usize; MAPPING_BLOCKS - 1],
    pub num_classes: usize,
    pub conv_padding: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            patch_size: 224,
            channel_widths: [16, 32, 64, 128, 128],
            fc_widths: [256, 128],
            num_classes: NUM_ROCK_TYPES,
            conv_padding: 1,
        }
    }
}

impl BranchConfig {
    /// Spatial extent of the input and of the map after each feature block.
    pub fn spatial_sizes(&self) -> Result<[usize; FEATURE_BLOCKS + 1]> {
        let mut sizes = [self.patch_size; FEATURE_BLOCKS + 1];
        for i in 0..FEATURE_BLOCKS {
            let conv = conv_output_size(sizes[i], self.conv_padding, 1)?;
            if conv % 2 != 0 {
                return Err(Error::invalid(format!(
                    "patch size {} with padding {} feeds an odd {conv}x{conv} map into pool {}",
                    self.patch_size,
                    self.conv_padding,
                    i + 1
                )));
            }
            sizes[i + 1] = conv / 2;
        }
        Ok(sizes)
    }

    /// Length of the flattened feature vector entering the first mapping block.
    pub fn flat_features(&self) -> Result<usize> {
        let s = self.spatial_sizes()?[FEATURE_BLOCKS];
        Ok(self.channel_widths[FEATURE_BLOCKS - 1] * s * s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.num_classes < 2
            || self.channel_widths.contains(&0)
            || self.fc_widths.contains(&0)
        {
            return Err(Error::invalid(format!("invalid branch config {self:?}")));
        }
        if self.conv_padding > 1 {
            return Err(Error::invalid("conv padding must be 0 or 1"));
        }
        if self.spatial_sizes()?[FEATURE_BLOCKS] == 0 {
            return Err(Error::invalid(format!(
                "patch size {} collapses to nothing",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor in storage order: conv kernels and
    /// biases for the five feature blocks, then weights and biases for the
    /// three mapping blocks.
    pub fn parameter_shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let mut shapes = Vec::with_capacity(2 * (FEATURE_BLOCKS + MAPPING_BLOCKS));
        let mut c_in = 3;
        for &c_out in &self.channel_widths {
            shapes.push(vec![c_out, c_in, 3, 3]);
            shapes.push(vec![c_out]);
            c_in = c_out;
        }
        let mut n_in = self.flat_features()?;
        for &n_out in self.fc_widths.iter().chain([&self.num_classes]) {
            shapes.push(vec![n_out, n_in]);
            shapes.push(vec![n_out]);
            n_in = n_out;
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// The batch gradient is rescaled when its global L2 norm exceeds this.
    /// `f64::INFINITY` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            max_iterations: 20_000,
            seed: 0,
            max_grad_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::invalid(format!(
                "gradient norm limit {} must be positive",
                self.max_grad_norm
            )));
        }
        if self.batch_size == 0 || self.max_iterations == 0 {
            return Err(Error::invalid("batch size and iteration budget must be positive"));
        }
        Ok(())
    }
}

/// A single CNN branch bound to one image role.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchModel<T: Scalar = f32> {
    role: Role,
    config: BranchConfig,
    params: Vec<Tensor<T>>,
}

/// Builds a branch with zero biases and weights drawn from N(0, 2 / fan_in).
pub fn build_branch<T: Scalar>(config: &BranchConfig, role: Role, seed: u64) -> Result<BranchModel<T>> {
    let shapes = config.parameter_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = shapes
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(&shape);
            }
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("shape product matches")
        })
        .collect();
    Ok(BranchModel {
        role,
        config: config.clone(),
        params,
    })
}

/// Forward state kept for backpropagation.
struct Trace<'m, T: Scalar> {
    caches: Vec<LayerCache<'m, T>>,
    feature_shape: Vec<usize>,
    logits: Tensor<T>,
}

/// Per-sample loss, gradients and prediction.
#[derive(Debug, Clone)]
pub struct SampleGradient<T: Scalar> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub prediction: ClassDistribution,
    pub clamped: bool,
}

impl<T: Scalar> BranchModel<T> {
    pub fn from_parts(role: Role, config: BranchConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = config.parameter_shapes()?;
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::shape("parameter tensors do not match the branch config"));
        }
        Ok(Self { role, config, params })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> BranchModel<U> {
        BranchModel {
            role: self.role,
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_patch(&self, patch: &Tensor<T>) -> Result<()> {
        let p = self.config.patch_size;
        if patch.shape() != [3, p, p] {
            return Err(Error::shape(format!(
                "branch expects a [3, {p}, {p}] patch, got {:?}",
                patch.shape()
            )));
        }
        Ok(())
    }

    fn trace(&self, patch: &Tensor<T>) -> Result<Trace<'_, T>> {
        self.check_patch(patch)?;
        let pad = self.config.conv_padding;
        let mut caches = Vec::with_capacity(3 * FEATURE_BLOCKS + 2 * MAPPING_BLOCKS);
        let mut x = patch.clone();
        for block in 0..FEATURE_BLOCKS {
            let (k, b) = (&self.params[2 * block], &self.params[2 * block + 1]);
            let (y, c) = conv2d(&x, k, b, pad, 1)?;
            caches.push(c);
            let (y, c) = maxpool2(&y)?;
            caches.push(c);
            let (y, c) = relu(&y);
            caches.push(c);
            x = y;
        }
        let feature_shape = x.shape().to_vec();
        let n = x.len();
        x = x.reshape(vec![n])?;
        let fc = 2 * FEATURE_BLOCKS;
        for block in 0..MAPPING_BLOCKS {
            let (w, b) = (&self.params[fc + 2 * block], &self.params[fc + 2 * block + 1]);
            let (y, c) = fully_connected(&x, w, b)?;
            caches.push(c);
            x = y;
            if block + 1 < MAPPING_BLOCKS {
                let (y, c) = sigmoid(&x);
                caches.push(c);
                x = y;
            }
        }
        Ok(Trace {
            caches,
            feature_shape,
            logits: x,
        })
    }

    /// Raw scores before the final softmax.
    pub fn logits(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.trace(patch)?.logits)
    }

    /// Class probabilities for one `[3, P, P]` patch.
    pub fn forward(&self, patch: &Tensor<T>) -> Result<ClassDistribution> {
        Ok(softmax(&self.logits(patch)?))
    }

    /// Cross-entropy loss for `class` and its gradient with respect to every
    /// parameter, in storage order.
    pub fn loss_and_gradients(&self, patch: &Tensor<T>, class: usize) -> Result<SampleGradient<T>> {
        if class >= self.config.num_classes {
            return Err(Error::invalid(format!(
                "label {class} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let mut trace = self.trace(patch)?;
        let prediction = softmax(&trace.logits);
        let ce = cross_entropy_loss(&prediction, class)?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut g: Tensor<T> = ce.grad_logits.cast();

        let fc = 2 * FEATURE_BLOCKS;
        for block in (0..MAPPING_BLOCKS).rev() {
            if block + 1 < MAPPING_BLOCKS {
                g = sigmoid_backward(&g, &trace.caches.pop().expect("sigmoid cache"))?;
            }
            let (gx, gw, gb) = fully_connected_backward(&g, &trace.caches.pop().expect("fc cache"))?;
            grads[fc + 2 * block] = Some(gw);
            grads[fc + 2 * block + 1] = Some(gb);
            g = gx;
        }
        g = g.reshape(trace.feature_shape.clone())?;
        for block in (0..FEATURE_BLOCKS).rev() {
            g = relu_backward(&g, &trace.caches.pop().expect("relu cache"))?;
            g = maxpool2_backward(&g, &trace.caches.pop().expect("pool cache"))?;
            let (gx, gk, gb) = conv2d_backward(&g, &trace.caches.pop().expect("conv cache"))?;
            grads[2 * block] = Some(gk);
            grads[2 * block + 1] = Some(gb);
            g = gx;
        }
        Ok(SampleGradient {
            loss: ce.loss,
            grads: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
            prediction,
            clamped: ce.clamped,
        })
    }
}

/// Loss and accuracy history of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// Mean mini-batch loss, one entry per iteration.
    pub iteration_loss: Vec<f64>,
    /// Fraction of samples classified correctly while each completed epoch ran.
    pub epoch_accuracy: Vec<f64>,
}

/// Samples summed sequentially before partial sums are combined. Fixed so the
/// reduction order, and thus the result, does not depend on the thread count.
const REDUCTION_CHUNK: usize = 4;

/// Mini-batch SGD on softmax cross-entropy.
///
/// Sample order is reshuffled each epoch from `cfg.seed`. The batch gradient
/// is the mean of per-sample gradients, rescaled if its norm exceeds
/// `cfg.max_grad_norm`; per-sample work runs in parallel but is reduced in a
/// fixed order.
pub fn train_branch<T: Scalar>(
    model: &mut BranchModel<T>,
    samples: &[(&Tensor<T>, usize)],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    for (patch, class) in samples {
        model.check_patch(patch)?;
        if *class >= model.config.num_classes {
            return Err(Error::invalid(format!(
                "label {class} out of range for {} classes",
                model.config.num_classes
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut epoch_correct = 0usize;
    let mut log = TrainingLog::default();
    let lr = T::of(cfg.learning_rate);

    for iteration in 0..cfg.max_iterations {
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = &order[cursor..end];
        let model_ref = &*model;
        let partials = batch
            .par_chunks(REDUCTION_CHUNK)
            .map(|chunk| -> Result<(Vec<Tensor<T>>, f64, usize)> {
                let mut acc: Option<Vec<Tensor<T>>> = None;
                let mut loss = 0.0;
                let mut correct = 0;
                for &i in chunk {
                    let (patch, class) = samples[i];
                    let sg = model_ref.loss_and_gradients(patch, class)?;
                    loss += sg.loss;
                    correct += usize::from(sg.prediction.argmax() == class);
                    match &mut acc {
                        None => acc = Some(sg.grads),
                        Some(a) => {
                            for (t, g) in a.iter_mut().zip(&sg.grads) {
                                t.add_assign(g)?;
                            }
                        }
                    }
                }
                Ok((acc.expect("chunks are non-empty"), loss, correct))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut partials = partials.into_iter();
        let (mut grads, mut loss, mut correct) = partials.next().expect("batch is non-empty");
        for (g, l, c) in partials {
            for (t, d) in grads.iter_mut().zip(&g) {
                t.add_assign(d)?;
            }
            loss += l;
            correct += c;
        }
        let scale = 1.0 / batch.len() as f64;
        let mean_loss = loss * scale;
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                loss: mean_loss,
            });
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
            * scale;
        let step = if norm > cfg.max_grad_norm {
            scale * cfg.max_grad_norm / norm
        } else {
            scale
        };
        for g in &mut grads {
            g.scale(T::of(step));
        }
        sgd_step(&mut model.params, &grads, lr)?;
        log.iteration_loss.push(mean_loss);
        epoch_correct += correct;

        cursor = end;
        if cursor == order.len() {
            log.epoch_accuracy.push(epoch_correct as f64 / order.len() as f64);
            log::debug!(
                "{} branch: epoch {} done at iteration {}, loss {:.4}, accuracy {:.3}",
                model.role,
                log.epoch_accuracy.len(),
                iteration + 1,
                mean_loss,
                log.epoch_accuracy.last().unwrap()
            );
            epoch_correct = 0;
            cursor = 0;
            order.shuffle(&mut rng);
        }
    }
    Ok(log)
}

const MAGIC: &[u8; 4] = b"CCNN";
pub const MODEL_FORMAT_VERSION: u16 = 1;

/// Serializes a branch:
///
/// ```text
/// "CCNN" | version u16 | role u8 | patch_size u32 | 5 × channel width u32
///        | 2 × fc width u32 | num_classes u32 | padding u8
///        | tensor count u32 | per tensor: rank u8, rank × dim u32
///        | per tensor: f32 samples
/// ```
///
/// All integers and floats are little-endian. Samples are stored as 32-bit,
/// so only 32-bit models round-trip bit-exactly.
pub fn save_model<T: Scalar>(model: &BranchModel<T>) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.push(model.role.tag());
    let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(c.patch_size);
    c.channel_widths.iter().for_each(|&w| put(w));
    c.fc_widths.iter().for_each(|&w| put(w));
    put(c.num_classes);
    out.push(c.conv_padding as u8);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        out.push(p.shape().len() as u8);
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for p in &model.params {
        for v in p.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

/// Parses a model written by [`save_model`].
pub fn load_model(bytes: &[u8]) -> Result<BranchModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::ModelFormat("bad magic, not a CCNN model".into()));
    }
    let version = r.u16("version")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let tag = r.u8("role")?;
    let role = Role::from_tag(tag).ok_or_else(|| Error::ModelFormat(format!("unknown role tag {tag}")))?;
    let patch_size = r.u32("patch size")?;
    let mut channel_widths = [0; FEATURE_BLOCKS];
    for w in &mut channel_widths {
        *w = r.u32("channel widths")?;
    }
    let mut fc_widths = [0; MAPPING_BLOCKS - 1];
    for w in &mut fc_widths {
        *w = r.u32("fc widths")?;
    }
    let num_classes = r.u32("class count")?;
    let conv_padding = r.u8("padding")? as usize;
    let config = BranchConfig {
        patch_size,
        channel_widths,
        fc_widths,
        num_classes,
        conv_padding,
    };
    let expected = config
        .parameter_shapes()
        .map_err(|e| Error::ModelFormat(format!("config block is inconsistent: {e}")))?;

    let count = r.u32("tensor count")?;
    if count != expected.len() {
        return Err(Error::ModelFormat(format!(
            "shape table lists {count} tensors, config implies {}",
            expected.len()
        )));
    }
    for (i, want) in expected.iter().enumerate() {
        let rank = r.u8("tensor rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("tensor dims")).collect::<Result<Vec<_>>>()?;
        if &dims != want {
            return Err(Error::ModelFormat(format!(
                "tensor {i} has shape {dims:?}, config implies {want:?}"
            )));
        }
    }
    let params = expected
        .into_iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n, "weights")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat(format!(
            "{} trailing bytes after the weights",
            bytes.len() - r.pos
        )));
    }
    BranchModel::from_parts(role, config, params)
}

pub fn write_model<T: Scalar>(path: &Path, model: &BranchModel<T>) -> Result<()> {
    fs::write(path, save_model(model)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<BranchModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_model(&bytes).map_err(|e| match e {
        Error::ModelFormat(m) => Error::ModelFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

//! Trainable classifier networks with explicit backpropagation.
//!
//! Two architectures cover every conditioning job in the flow: a dense MLP
//! for flat data and a plain 3×3 same-padding convolutional stack for image
//! data. Inputs are categorical parts, one-hot encoded per position (flattened
//! for the MLP, K channels per grid channel for the conv net); outputs are
//! per-position class logits. ReLU sits between all layers, the final layer is
//! zero-initialized so an untrained net emits all-zero logits.
//!
//! Numerics: f32 parameters and activations with a fixed single-threaded
//! summation order, f64 accumulation in the loss and gradient reductions.
//! Identical inputs always produce bit-identical outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Magic tag of the network parameter file format.
pub const NET_MAGIC: [u8; 4] = *b"DDFN";
/// Current parameter file version.
pub const NET_VERSION: u16 = 1;

/// Per-position class logits, shape `(positions, K)`.
#[derive(Debug, Clone)]
pub struct LogitTensor {
    pub values: Array2<f32>,
}

impl LogitTensor {
    pub fn positions(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    /// Logit row for one position.
    pub fn row(&self, position: usize) -> &[f32] {
        self.values
            .row(position)
            .to_slice()
            .expect("logit rows are contiguous")
    }
}

/// Network architecture descriptor. All counts are ≥ 1; `k` is the class
/// alphabet shared by input one-hots and output logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetArch {
    /// Dense net over a flat categorical part: input `in_positions` classes,
    /// output logits for `out_positions` positions. `linear_layers` total
    /// linear maps with `hidden` units between them.
    Mlp {
        in_positions: usize,
        out_positions: usize,
        k: usize,
        hidden: usize,
        linear_layers: usize,
    },
    /// 3×3 same-padding conv net over a channel/height/width part: input
    /// `in_channels` grid channels (each one-hot expanded to K planes),
    /// output logits for `out_channels` grid channels at every pixel.
    Conv {
        in_channels: usize,
        out_channels: usize,
        k: usize,
        height: usize,
        width: usize,
        hidden_channels: usize,
        conv_layers: usize,
    },
}

impl NetArch {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NetArch::Mlp { in_positions, out_positions, k, hidden, linear_layers } => {
                in_positions >= 1 && out_positions >= 1 && k >= 1 && hidden >= 1 && linear_layers >= 1
            }
            NetArch::Conv {
                in_channels,
                out_channels,
                k,
                height,
                width,
                hidden_channels,
                conv_layers,
            } => {
                in_channels >= 1
                    && out_channels >= 1
                    && k >= 1
                    && height >= 1
                    && width >= 1
                    && hidden_channels >= 1
                    && conv_layers >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid architecture: {self:?}")))
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            NetArch::Mlp { k, .. } | NetArch::Conv { k, .. } => k,
        }
    }

    /// Length of the categorical input part this net consumes.
    pub fn input_len(&self) -> usize {
        match *self {
            NetArch::Mlp { in_positions, .. } => in_positions,
            NetArch::Conv { in_channels, height, width, .. } => in_channels * height * width,
        }
    }

    /// Number of output positions (rows of the produced [`LogitTensor`]).
    pub fn output_positions(&self) -> usize {
        match *self {
            NetArch::Mlp { out_positions, .. } => out_positions,
            NetArch::Conv { out_channels, height, width, .. } => out_channels * height * width,
        }
    }

    /// Width of the flat one-hot input fed to the first layer.
    fn input_units(&self) -> usize {
        match *self {
            NetArch::Mlp { in_positions, k, .. } => in_positions * k,
            NetArch::Conv { in_channels, k, height, width, .. } => in_channels * k * height * width,
        }
    }

    fn output_units(&self) -> usize {
        self.output_positions() * self.num_classes()
    }
}

/// One trainable layer. Conv weights are stored im2col-style as
/// `(in_channels · 9, out_channels)`; dense weights as `(in, out)`.
#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Dense { w: Array2<f32>, b: Array1<f32> },
    Conv { w: Array2<f32>, b: Array1<f32>, in_ch: usize, out_ch: usize },
}

impl Layer {
    pub(crate) fn weight(&self) -> &Array2<f32> {
        match self {
            Layer::Dense { w, .. } | Layer::Conv { w, .. } => w,
        }
    }

    pub(crate) fn bias(&self) -> &Array1<f32> {
        match self {
            Layer::Dense { b, .. } | Layer::Conv { b, .. } => b,
        }
    }

    fn params_mut(&mut self) -> (&mut Array2<f32>, &mut Array1<f32>) {
        match self {
            Layer::Dense { w, b } | Layer::Conv { w, b, .. } => (w, b),
        }
    }
}

/// Activations captured by a training-mode forward pass; consumed by
/// [`ClassifierNet::backward_and_step`] (the type system makes a backward
/// pass without a prior forward pass unrepresentable).
pub struct ForwardCache {
    /// `acts[i]` is the input to layer `i` (post-ReLU); `acts[0]` is the
    /// one-hot input.
    acts: Vec<Array2<f32>>,
    batch: usize,
}

/// Per-layer parameter gradients in layer order.
pub(crate) struct Grads {
    pub(crate) per_layer: Vec<(Array2<f32>, Array1<f32>)>,
}

/// A classifier net mapping a categorical part to per-position logits.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    arch: NetArch,
    layers: Vec<Layer>,
}

impl ClassifierNet {
    /// Builds a net with He-uniform weights, zero biases, and a
    /// zero-initialized final layer (so a fresh net emits all-zero logits).
    pub fn new(arch: NetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer_dims = Self::layer_dims(&arch);
        let n_layers = layer_dims.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (i, dims) in layer_dims.into_iter().enumerate() {
            let last = i == n_layers - 1;
            layers.push(Self::init_layer(&arch, dims, last, &mut rng));
        }
        Ok(ClassifierNet { arch, layers })
    }

    /// Per-layer `(in_channels_or_units, out_channels_or_units)`.
    fn layer_dims(arch: &NetArch) -> Vec<(usize, usize)> {
        let (total, first, mid, last) = match *arch {
            NetArch::Mlp { hidden, linear_layers, .. } => {
                (linear_layers, arch.input_units(), hidden, arch.output_units())
            }
            NetArch::Conv { in_channels, out_channels, k, hidden_channels, conv_layers, .. } => {
                (conv_layers, in_channels * k, hidden_channels, out_channels * k)
            }
        };
        (0..total)
            .map(|i| {
                let ins = if i == 0 { first } else { mid };
                let outs = if i == total - 1 { last } else { mid };
                (ins, outs)
            })
            .collect()
    }

    fn init_layer(arch: &NetArch, (ins, outs): (usize, usize), last: bool, rng: &mut ChaCha8Rng) -> Layer {
        let is_conv = matches!(arch, NetArch::Conv { .. });
        let w_rows = if is_conv { ins * 9 } else { ins };
        let w = if last {
            Array2::zeros((w_rows, outs))
        } else {
            let limit = (6.0 / w_rows as f32).sqrt();
            Array2::from_shape_fn((w_rows, outs), |_| rng.random_range(-limit..limit))
        };
        let b = Array1::zeros(outs);
        if is_conv {
            Layer::Conv { w, b, in_ch: ins, out_ch: outs }
        } else {
            Layer::Dense { w, b }
        }
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Overwrites one layer's parameters (shape-checked). Test and
    /// diagnostic hook; training goes through [`Self::backward_and_step`].
    pub(crate) fn set_layer_params(&mut self, idx: usize, w: Array2<f32>, b: Array1<f32>) -> Result<()> {
        let layer = self
            .layers
            .get_mut(idx)
            .ok_or_else(|| Error::Invalid(format!("layer index {idx} out of range")))?;
        let (lw, lb) = layer.params_mut();
        if lw.dim() != w.dim() || lb.dim() != b.dim() {
            return Err(Error::Shape(format!(
                "layer {idx} expects w{:?} b{:?}, got w{:?} b{:?}",
                lw.dim(),
                lb.dim(),
                w.dim(),
                b.dim()
            )));
        }
        *lw = w;
        *lb = b;
        Ok(())
    }

    /// Replaces every parameter (including the zero-initialized final layer)
    /// with seeded uniform noise of the given scale. Used by the verification
    /// suites to build diverse frozen nets without training.
    pub(crate) fn randomize(&mut self, seed: u64, scale: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let (w, b) = layer.params_mut();
            w.mapv_inplace(|_| rng.random_range(-scale..scale));
            b.mapv_inplace(|_| rng.random_range(-scale..scale));
        }
    }

    fn spatial(&self) -> (usize, usize) {
        match self.arch {
            NetArch::Conv { height, width, .. } => (height, width),
            NetArch::Mlp { .. } => (1, 1),
        }
    }

    fn check_part(&self, part: &[u16], expected_len: usize, what: &str) -> Result<()> {
        if part.len() != expected_len {
            return Err(Error::Shape(format!(
                "{what} length {} does not match net spec {expected_len}",
                part.len()
            )));
        }
        let k = self.arch.num_classes();
        if part.iter().any(|&v| v as usize >= k) {
            return Err(Error::Invalid(format!("{what} contains a class ≥ K={k}")));
        }
        Ok(())
    }

    /// One-hot encodes input parts into the first-layer activation matrix.
    fn encode_inputs(&self, parts: &[&[u16]]) -> Result<Array2<f32>> {
        let k = self.arch.num_classes();
        let in_len = self.arch.input_len();
        let mut x = Array2::zeros((parts.len(), self.arch.input_units()));
        match self.arch {
            NetArch::Mlp { .. } => {
                for (b, part) in parts.iter().enumerate() {
                    self.check_part(part, in_len, "input part")?;
                    for (pos, &class) in part.iter().enumerate() {
                        x[[b, pos * k + class as usize]] = 1.0;
                    }
                }
            }
            NetArch::Conv { in_channels, height, width, .. } => {
                let hw = height * width;
                for (b, part) in parts.iter().enumerate() {
                    self.check_part(part, in_len, "input part")?;
                    for c in 0..in_channels {
                        for s in 0..hw {
                            let class = part[c * hw + s] as usize;
                            x[[b, (c * k + class) * hw + s]] = 1.0;
                        }
                    }
                }
            }
        }
        Ok(x)
    }

    fn layer_forward(&self, layer: &Layer, x: &Array2<f32>) -> Array2<f32> {
        match layer {
            Layer::Dense { w, b } => {
                let mut y = x.dot(w);
                y += b;
                y
            }
            Layer::Conv { w, b, in_ch, out_ch } => {
                let (h, wd) = self.spatial();
                let batch = x.nrows();
                let col = im2col(x, *in_ch, h, wd);
                let mat = col.dot(w); // (B·HW, out_ch)
                let hw = h * wd;
                let mut y = Array2::zeros((batch, out_ch * hw));
                for bi in 0..batch {
                    for o in 0..*out_ch {
                        for s in 0..hw {
                            y[[bi, o * hw + s]] = mat[[bi * hw + s, o]] + b[o];
                        }
                    }
                }
                y
            }
        }
    }

    /// Runs the net, optionally retaining per-layer inputs for backprop.
    fn run(&self, parts: &[&[u16]], keep: bool) -> Result<(Array2<f32>, Option<ForwardCache>)> {
        if parts.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut x = self.encode_inputs(parts)?;
        let mut acts = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = self.layer_forward(layer, &x);
            if i < last {
                y.mapv_inplace(|v| v.max(0.0));
            }
            if keep {
                acts.push(x);
            }
            x = y;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("network produced non-finite logits".into()));
        }
        let cache = keep.then_some(ForwardCache { acts, batch: parts.len() });
        Ok((x, cache))
    }

    /// Raw-output column holding the logit for (position `p`, class `j`).
    ///
    /// Dense outputs are position-major; conv outputs are channel-major over
    /// K·out_channels planes, so class planes of one grid channel sit `HW`
    /// apart.
    fn logit_col(&self, p: usize, j: usize) -> usize {
        let k = self.arch.num_classes();
        match self.arch {
            NetArch::Mlp { .. } => p * k + j,
            NetArch::Conv { height, width, .. } => {
                let hw = height * width;
                ((p / hw) * k + j) * hw + (p % hw)
            }
        }
    }

    fn logits_row(&self, mat: &Array2<f32>, row: usize) -> LogitTensor {
        let k = self.arch.num_classes();
        let positions = self.arch.output_positions();
        let values =
            Array2::from_shape_fn((positions, k), |(p, j)| mat[[row, self.logit_col(p, j)]]);
        LogitTensor { values }
    }

    /// Evaluates the net on one categorical part.
    pub fn forward(&self, part: &[u16]) -> Result<LogitTensor> {
        let (mat, _) = self.run(&[part], false)?;
        Ok(self.logits_row(&mat, 0))
    }

    /// Evaluates the net on a batch in one pass (one logit tensor per part).
    pub fn forward_many(&self, parts: &[&[u16]]) -> Result<Vec<LogitTensor>> {
        let (mat, _) = self.run(parts, false)?;
        Ok((0..parts.len()).map(|b| self.logits_row(&mat, b)).collect())
    }

    /// Training-mode forward pass: returns the raw logit matrix
    /// `(batch, out_positions·K)` plus the activation cache for backprop.
    pub fn forward_train(&self, parts: &[&[u16]]) -> Result<(Array2<f32>, ForwardCache)> {
        let (mat, cache) = self.run(parts, true)?;
        Ok((mat, cache.expect("cache requested")))
    }

    fn layer_backward(
        &self,
        layer: &Layer,
        x: &Array2<f32>,
        dy: &Array2<f32>,
    ) -> (Array2<f32>, Array1<f32>, Array2<f32>) {
        match layer {
            Layer::Dense { w, .. } => {
                // f64 accumulation for the batch-summed parameter gradients.
                let x64 = x.mapv(f64::from);
                let dy64 = dy.mapv(f64::from);
                let dw = x64.t().dot(&dy64).mapv(|v| v as f32);
                let db = dy64.sum_axis(ndarray::Axis(0)).mapv(|v| v as f32);
                let dx = dy.dot(&w.t());
                (dw, db, dx)
            }
            Layer::Conv { w, in_ch, out_ch, .. } => {
                let (h, wd) = self.spatial();
                let hw = h * wd;
                let batch = x.nrows();
                let col = im2col(x, *in_ch, h, wd);
                let mut dmat = Array2::zeros((batch * hw, *out_ch));
                for bi in 0..batch {
                    for o in 0..*out_ch {
                        for s in 0..hw {
                            dmat[[bi * hw + s, o]] = dy[[bi, o * hw + s]];
                        }
                    }
                }
                let col64 = col.mapv(f64::from);
                let dmat64 = dmat.mapv(f64::from);
                let dw = col64.t().dot(&dmat64).mapv(|v| v as f32);
                let db = dmat64.sum_axis(ndarray::Axis(0)).mapv(|v| v as f32);
                let dcol = dmat.dot(&w.t());
                let dx = col2im(&dcol, *in_ch, h, wd, batch);
                (dw, db, dx)
            }
        }
    }

    /// Backpropagates `dlogits` (gradient of a scalar loss w.r.t. the raw
    /// logit matrix) through the cached activations.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f32>) -> Result<Grads> {
        let expected = (cache.batch, self.arch.output_units());
        if dlogits.dim() != expected {
            return Err(Error::Shape(format!(
                "upstream gradient shape {:?} does not match {expected:?}",
                dlogits.dim()
            )));
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut dy = dlogits.clone();
        for i in (0..self.layers.len()).rev() {
            let x = &cache.acts[i];
            let (dw, db, mut dx) = self.layer_backward(&self.layers[i], x, &dy);
            if i > 0 {
                // acts[i] is post-ReLU: zero slope wherever it clamped.
                dx.zip_mut_with(x, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            per_layer.push((dw, db));
            dy = dx;
        }
        per_layer.reverse();
        Ok(Grads { per_layer })
    }

    /// Computes parameter gradients from a cached forward pass and applies
    /// one Adam update.
    pub fn backward_and_step(
        &mut self,
        cache: ForwardCache,
        dlogits: &Array2<f32>,
        opt: &mut AdamState,
    ) -> Result<()> {
        let grads = self.backward(&cache, dlogits)?;
        opt.step(self, &grads)
    }

    /// One full training step: forward, batch-mean cross-entropy, backward,
    /// Adam update. Returns the mean loss in nats per position.
    pub fn train_batch(
        &mut self,
        inputs: &[&[u16]],
        targets: &[&[u16]],
        opt: &mut AdamState,
    ) -> Result<f64> {
        let (logits, cache) = self.forward_train(inputs)?;
        let (loss, dlogits) = self.batch_cross_entropy(&logits, targets)?;
        self.backward_and_step(cache, &dlogits, opt)?;
        Ok(loss)
    }

    /// Mean cross-entropy (nats per position) of the net on a batch, without
    /// touching parameters.
    pub fn batch_loss(&self, inputs: &[&[u16]], targets: &[&[u16]]) -> Result<f64> {
        let (logits, _) = self.run(inputs, false)?;
        let (loss, _) = self.batch_cross_entropy(&logits, targets)?;
        Ok(loss)
    }

    /// Batch-mean softmax cross-entropy over all positions, with the gradient
    /// already scaled for the mean (…/(batch · positions)).
    pub fn batch_cross_entropy(
        &self,
        logits: &Array2<f32>,
        targets: &[&[u16]],
    ) -> Result<(f64, Array2<f32>)> {
        let k = self.arch.num_classes();
        let positions = self.arch.output_positions();
        if logits.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for {} targets",
                logits.nrows(),
                targets.len()
            )));
        }
        let batch = targets.len();
        let mut grad = Array2::zeros(logits.dim());
        let scale = 1.0 / (batch as f64 * positions as f64);
        let mut total = 0.0f64;
        for (bi, target) in targets.iter().enumerate() {
            self.check_part(target, positions, "target part")?;
            for (p, &t) in target.iter().enumerate() {
                let row: Vec<f64> =
                    (0..k).map(|j| f64::from(logits[[bi, self.logit_col(p, j)]])).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_sum = max + sum.ln();
                total += log_sum - row[t as usize];
                for j in 0..k {
                    let softmax = (row[j] - max).exp() / sum;
                    let onehot = f64::from(j == t as usize);
                    grad[[bi, self.logit_col(p, j)]] = ((softmax - onehot) * scale) as f32;
                }
            }
        }
        Ok((total * scale, grad))
    }
}

/// Mean cross-entropy of one sample's logits against its target part, in
/// nats per position, with the per-logit gradient `(softmax − onehot) /
/// positions`. Numerically stabilized by max-subtraction.
pub fn cross_entropy_loss(logits: &LogitTensor, target: &[u16]) -> Result<(f64, Array2<f32>)> {
    let (positions, k) = (logits.positions(), logits.num_classes());
    if target.len() != positions {
        return Err(Error::Shape(format!(
            "{} targets for {positions} logit rows",
            target.len()
        )));
    }
    if target.iter().any(|&t| (t as usize) >= k) {
        return Err(Error::Invalid(format!("target class ≥ K={k}")));
    }
    let mut grad = Array2::zeros((positions, k));
    let mut total = 0.0f64;
    for (p, &t) in target.iter().enumerate() {
        let row: Vec<f64> = logits.row(p).iter().map(|&v| f64::from(v)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        total += log_sum - row[t as usize];
        for j in 0..k {
            let softmax = (row[j] - max).exp() / sum;
            let onehot = f64::from(j == t as usize);
            grad[[p, j]] = ((softmax - onehot) / positions as f64) as f32;
        }
    }
    Ok((total / positions as f64, grad))
}

/// Adam optimizer state (β1 = 0.9, β2 = 0.999, ε = 1e-8).
pub struct AdamState {
    t: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    moments: Vec<(Array2<f32>, Array1<f32>, Array2<f32>, Array1<f32>)>, // (m_w, m_b, v_w, v_b)
}

impl AdamState {
    pub fn new(net: &ClassifierNet, lr: f32) -> Self {
        let moments = net
            .layers()
            .iter()
            .map(|l| {
                (
                    Array2::zeros(l.weight().dim()),
                    Array1::zeros(l.bias().dim()),
                    Array2::zeros(l.weight().dim()),
                    Array1::zeros(l.bias().dim()),
                )
            })
            .collect();
        AdamState { t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn step(&mut self, net: &mut ClassifierNet, grads: &Grads) -> Result<()> {
        if grads.per_layer.len() != self.moments.len() || net.layers.len() != self.moments.len() {
            return Err(Error::Shape("optimizer state does not match network".into()));
        }
        self.t += 1;
        let c1 = ((1.0 - f64::from(self.beta1).powi(self.t as i32)).recip()) as f32;
        let c2 = ((1.0 - f64::from(self.beta2).powi(self.t as i32)).recip()) as f32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((layer, (dw, db)), (m_w, m_b, v_w, v_b)) in
            net.layers.iter_mut().zip(&grads.per_layer).zip(&mut self.moments)
        {
            let (w, b) = layer.params_mut();
            if w.dim() != dw.dim() || b.dim() != db.dim() {
                return Err(Error::Shape("gradient shape does not match parameters".into()));
            }
            adam_update(
                w.as_slice_mut().unwrap(),
                dw.as_slice().unwrap(),
                m_w.as_slice_mut().unwrap(),
                v_w.as_slice_mut().unwrap(),
                (b1, b2, lr, eps, c1, c2),
            );
            adam_update(
                b.as_slice_mut().unwrap(),
                db.as_slice().unwrap(),
                m_b.as_slice_mut().unwrap(),
                v_b.as_slice_mut().unwrap(),
                (b1, b2, lr, eps, c1, c2),
            );
        }
        Ok(())
    }
}

fn adam_update(
    p: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    (b1, b2, lr, eps, c1, c2): (f32, f32, f32, f32, f32, f32),
) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] * c1;
        let vhat = v[i] * c2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// im2col for 3×3 same-padding convolution: activations `(B, C·H·W)` →
/// patch matrix `(B·H·W, C·9)`.
fn im2col(x: &Array2<f32>, c_in: usize, h: usize, w: usize) -> Array2<f32> {
    let batch = x.nrows();
    let hw = h * w;
    let mut col = Array2::zeros((batch * hw, c_in * 9));
    for bi in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = bi * hw + y * w + xx;
                for c in 0..c_in {
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            col[[row, c * 9 + ky * 3 + kx]] =
                                x[[bi, c * hw + sy as usize * w + sx as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Serializes a net to the parameter file format: little-endian header
/// `{"DDFN", u16 version, u8 kind, u32 architecture fields}` followed by all
/// parameters as raw f32 in declaration order (per layer: weights row-major,
/// then biases).
pub fn write_net(net: &ClassifierNet, w: &mut dyn Write) -> Result<()> {
    w.write_all(&NET_MAGIC)?;
    w.write_u16::<LittleEndian>(NET_VERSION)?;
    match *net.arch() {
        NetArch::Mlp { in_positions, out_positions, k, hidden, linear_layers } => {
            w.write_u8(0)?;
            for v in [in_positions, out_positions, k, hidden, linear_layers] {
                w.write_u32::<LittleEndian>(v as u32)?;
            }
        }
        NetArch::Conv {
            in_channels,
            out_channels,
            k,
            height,
            width,
            hidden_channels,
            conv_layers,
        } => {
            w.write_u8(1)?;
            for v in [in_channels, out_channels, k, height, width, hidden_channels, conv_layers] {
                w.write_u32::<LittleEndian>(v as u32)?;
            }
        }
    }
    for layer in net.layers() {
        for &v in layer.weight().as_slice().expect("row-major weights") {
            w.write_f32::<LittleEndian>(v)?;
        }
        for &v in layer.bias().as_slice().expect("contiguous bias") {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Parses a net written by [`write_net`].
pub fn read_net(r: &mut dyn Read) -> Result<ClassifierNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != NET_MAGIC {
        return Err(Error::Format(format!(
            "bad net-file magic {magic:?}, expected {NET_MAGIC:?}"
        )));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != NET_VERSION {
        return Err(Error::Format(format!(
            "unsupported net-file version {version}, expected {NET_VERSION}"
        )));
    }
    let kind = r.read_u8()?;
    let mut field = || -> Result<usize> { Ok(r.read_u32::<LittleEndian>()? as usize) };
    let arch = match kind {
        0 => NetArch::Mlp {
            in_positions: field()?,
            out_positions: field()?,
            k: field()?,
            hidden: field()?,
            linear_layers: field()?,
        },
        1 => NetArch::Conv {
            in_channels: field()?,
            out_channels: field()?,
            k: field()?,
            height: field()?,
            width: field()?,
            hidden_channels: field()?,
            conv_layers: field()?,
        },
        other => {
            return Err(Error::Format(format!("unknown net kind tag {other}")));
        }
    };
    let mut net = ClassifierNet::new(arch, 0)?;
    for layer in &mut net.layers {
        let (w, b) = layer.params_mut();
        for v in w.iter_mut() {
            *v = r.read_f32::<LittleEndian>()?;
        }
        for v in b.iter_mut() {
            *v = r.read_f32::<LittleEndian>()?;
        }
    }
    let finite = net
        .layers()
        .iter()
        .all(|l| l.weight().iter().all(|v| v.is_finite()) && l.bias().iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Invalid("net file contains non-finite parameters".into()));
    }
    Ok(net)
}

pub fn save_net(net: &ClassifierNet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_net(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<ClassifierNet> {
    let mut r = BufReader::new(File::open(path)?);
    let net = read_net(&mut r)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after net parameters".into()));
    }
    Ok(net)
}

/// Serializes a net into a byte vector (used to embed nets in model files).
pub fn net_to_bytes(net: &ClassifierNet) -> Vec<u8> {
    let mut buf = Vec::new();
    write_net(net, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Parses a net from a byte slice produced by [`net_to_bytes`].
pub fn net_from_bytes(bytes: &[u8]) -> Result<ClassifierNet> {
    let mut cursor = Cursor::new(bytes);
    let net = read_net(&mut cursor)?;
    if cursor.position() != bytes.len() as u64 {
        return Err(Error::Format("trailing bytes after net parameters".into()));
    }
    Ok(net)
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
fn col2im(dcol: &Array2<f32>, c_in: usize, h: usize, w: usize, batch: usize) -> Array2<f32> {
    let hw = h * w;
    let mut dx = Array2::zeros((batch, c_in * hw));
    for bi in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = bi * hw + y * w + xx;
                for c in 0..c_in {
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[[bi, c * hw + sy as usize * w + sx as usize]] +=
                                dcol[[row, c * 9 + ky * 3 + kx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

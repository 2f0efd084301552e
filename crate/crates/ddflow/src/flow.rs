//! Invertible layers over categorical grids and the frozen model container.
//!
//! The workhorse is the conditional-permutation coupling layer: part a of the
//! input passes through unchanged, and every position of part b is relabeled
//! by a permutation derived from classifier logits θ = n(x_a). The
//! permutation ([`build_argsort_top`]) sorts only the h highest-logit classes
//! into the positions they jointly occupy, so likelier classes move toward
//! smaller class values and everything stays exactly invertible. Shuffle,
//! squeeze, and splitprior layers reshape and factor the active vector; a
//! [`FlowModel`] chains frozen layers with a fitted base distribution and
//! serializes the whole thing to a single file.
//!
//! All transforms are integer-exact: floating point only ever determines an
//! output class through the deterministic ordering of θ.

use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::CategoricalGrid;
use crate::likelihood::{softmax_f64, BaseDistribution};
use crate::neural::{net_from_bytes, net_to_bytes, ClassifierNet, LogitTensor, NetArch};

/// Magic tag of the model file format.
pub const MODEL_MAGIC: [u8; 4] = *b"DDFM";
/// Current model file version.
pub const MODEL_VERSION: u16 = 1;

/// Builds the positional array `r` of the partial argsort: the `h` classes
/// with the largest `theta` (ties toward the lower index) are sorted, in
/// descending θ order, into the positions they jointly occupy; every other
/// position keeps its own index. Reading `r` as a function `position ↦ class`
/// gives the decode-direction permutation.
pub fn build_argsort_top(theta: &[f32], h: usize) -> Result<Vec<u16>> {
    let k = theta.len();
    if k == 0 || k > usize::from(u16::MAX) + 1 {
        return Err(Error::Invalid(format!("alphabet size {k} out of range")));
    }
    if !(1..=k).contains(&h) {
        return Err(Error::Invalid(format!("h = {h} not in 1..={k}")));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("theta contains a non-finite value".into()));
    }
    let mut order: Vec<u16> = (0..k).map(|i| i as u16).collect();
    order.sort_by(|&a, &b| {
        theta[b as usize]
            .partial_cmp(&theta[a as usize])
            .expect("finite logits compare")
            .then(a.cmp(&b))
    });
    let sorted_desc = &order[..h];
    let mut occupied = sorted_desc.to_vec();
    occupied.sort_unstable();
    let mut r: Vec<u16> = (0..k).map(|p| p as u16).collect();
    for (j, &pos) in occupied.iter().enumerate() {
        r[pos as usize] = sorted_desc[j];
    }
    Ok(r)
}

/// An encode/decode permutation pair derived from one logit row.
///
/// Encode (the x→z direction) maps the j-th most likely top-h class to the
/// j-th smallest occupied position — in particular, with h = K the argmax
/// class lands on class 0. Decode is the exact inverse.
#[derive(Debug, Clone)]
pub struct TopHPermutation {
    enc: Vec<u16>,
    dec: Vec<u16>,
}

impl TopHPermutation {
    pub fn from_logits(theta: &[f32], h: usize) -> Result<Self> {
        let dec = build_argsort_top(theta, h)?;
        let mut enc = vec![0u16; dec.len()];
        for (p, &c) in dec.iter().enumerate() {
            enc[c as usize] = p as u16;
        }
        Ok(TopHPermutation { enc, dec })
    }

    pub fn k(&self) -> usize {
        self.enc.len()
    }

    pub fn encode(&self, c: u16) -> u16 {
        self.enc[c as usize]
    }

    pub fn decode(&self, c: u16) -> u16 {
        self.dec[c as usize]
    }
}

/// Relabels one class in the encode direction (likely classes → small values).
pub fn encode_class(c: u16, theta: &[f32], h: usize) -> Result<u16> {
    if c as usize >= theta.len() {
        return Err(Error::Invalid(format!("class {c} ≥ K={}", theta.len())));
    }
    Ok(TopHPermutation::from_logits(theta, h)?.encode(c))
}

/// Inverse of [`encode_class`].
pub fn decode_class(c: u16, theta: &[f32], h: usize) -> Result<u16> {
    if c as usize >= theta.len() {
        return Err(Error::Invalid(format!("class {c} ≥ K={}", theta.len())));
    }
    Ok(TopHPermutation::from_logits(theta, h)?.decode(c))
}

/// Splits a grid's values at element `d` into (part a, part b).
fn split_values(x: &CategoricalGrid, d: usize) -> (&[u16], &[u16]) {
    (&x.values()[..d], &x.values()[d..])
}

/// A conditional-permutation coupling layer: z_a = x_a, and each position of
/// x_b is relabeled by the permutation of its logit row from n(x_a).
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    split: usize,
    h: usize,
    net: ClassifierNet,
}

impl CouplingLayer {
    /// Wraps a frozen net. `split` is the element count of part a and must
    /// equal the net's input length; `h` must be in `1..=K`.
    pub fn new(split: usize, h: usize, net: ClassifierNet) -> Result<Self> {
        let k = net.arch().num_classes();
        if !(1..=k).contains(&h) {
            return Err(Error::Config(format!("h = {h} not in 1..={k}")));
        }
        if net.arch().input_len() != split {
            return Err(Error::Shape(format!(
                "split {split} does not match net input length {}",
                net.arch().input_len()
            )));
        }
        Ok(CouplingLayer { split, h, net })
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn net(&self) -> &ClassifierNet {
        &self.net
    }

    /// Errors unless the layer fits grids of this shape and alphabet.
    fn validate_for(&self, shape: &[usize], k: u32) -> Result<()> {
        if self.net.arch().num_classes() != k as usize {
            return Err(Error::Shape(format!(
                "net alphabet {} does not match data K={k}",
                self.net.arch().num_classes()
            )));
        }
        let total: usize = shape.iter().product();
        if self.split == 0 || self.split >= total {
            return Err(Error::Shape(format!(
                "split {} leaves an empty part for shape {shape:?}",
                self.split
            )));
        }
        if self.net.arch().output_positions() != total - self.split {
            return Err(Error::Shape(format!(
                "net predicts {} positions, part b has {}",
                self.net.arch().output_positions(),
                total - self.split
            )));
        }
        match (shape, self.net.arch()) {
            ([_], NetArch::Mlp { .. }) => Ok(()),
            (&[c, hh, ww], &NetArch::Conv { in_channels, out_channels, height, width, .. }) => {
                if hh != height || ww != width || self.split % (hh * ww) != 0 {
                    return Err(Error::Shape(format!(
                        "conv net {height}x{width} with channel split cannot consume shape {shape:?} at split {}",
                        self.split
                    )));
                }
                if in_channels + out_channels != c {
                    return Err(Error::Shape(format!(
                        "net channels {in_channels}+{out_channels} do not cover {c}"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Shape(format!(
                "net kind does not match grid rank {}",
                shape.len()
            ))),
        }
    }

    fn transform(&self, x: &CategoricalGrid, encode: bool) -> Result<CategoricalGrid> {
        self.validate_for(x.shape(), x.num_classes())?;
        let (a, b) = split_values(x, self.split);
        let theta = self.net.forward(a)?;
        let h = self.h;
        let mut out = Vec::with_capacity(x.len());
        out.extend_from_slice(a);
        for (i, &c) in b.iter().enumerate() {
            let perm = TopHPermutation::from_logits(theta.row(i), h)?;
            out.push(if encode { perm.encode(c) } else { perm.decode(c) });
        }
        CategoricalGrid::new(x.shape().to_vec(), x.num_classes(), out)
    }

    pub fn forward(&self, x: &CategoricalGrid) -> Result<CategoricalGrid> {
        self.transform(x, true)
    }

    /// Exact inverse: the net sees z_a = x_a, so the same logit rows are
    /// recovered and each class is mapped back.
    pub fn inverse(&self, z: &CategoricalGrid) -> Result<CategoricalGrid> {
        self.transform(z, false)
    }
}

/// A fixed, seeded permutation of channels (rank-3) or flat dimensions
/// (rank-1), drawn once at construction and stored explicitly.
#[derive(Debug, Clone)]
pub struct ShuffleLayer {
    seed: u64,
    perm: Vec<u32>,
}

impl ShuffleLayer {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 || len > u32::MAX as usize {
            return Err(Error::Invalid(format!("shuffle length {len} out of range")));
        }
        let mut perm: Vec<u32> = (0..len as u32).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(ShuffleLayer { seed, perm })
    }

    /// Rebuilds a layer from stored fields, revalidating the bijection.
    pub fn from_parts(seed: u64, perm: Vec<u32>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            let slot = seen
                .get_mut(p as usize)
                .ok_or_else(|| Error::Invalid(format!("permutation entry {p} out of range")))?;
            if std::mem::replace(slot, true) {
                return Err(Error::Invalid(format!("duplicate permutation entry {p}")));
            }
        }
        if perm.is_empty() {
            return Err(Error::Invalid("empty permutation".into()));
        }
        Ok(ShuffleLayer { seed, perm })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn perm(&self) -> &[u32] {
        &self.perm
    }

    /// Unit length this shuffle permutes: channels for rank 3, elements for
    /// rank 1.
    fn expected_len(shape: &[usize]) -> usize {
        match shape {
            [d] => *d,
            [c, _, _] => *c,
            _ => unreachable!("grids are rank 1 or 3"),
        }
    }

    fn apply(&self, x: &CategoricalGrid, forward: bool) -> Result<CategoricalGrid> {
        if Self::expected_len(x.shape()) != self.perm.len() {
            return Err(Error::Shape(format!(
                "shuffle over {} units cannot apply to shape {:?}",
                self.perm.len(),
                x.shape()
            )));
        }
        let block = x.len() / self.perm.len();
        let mut out = vec![0u16; x.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            let (dst, src) = if forward { (i, p as usize) } else { (p as usize, i) };
            out[dst * block..(dst + 1) * block]
                .copy_from_slice(&x.values()[src * block..(src + 1) * block]);
        }
        CategoricalGrid::new(x.shape().to_vec(), x.num_classes(), out)
    }

    pub fn forward(&self, x: &CategoricalGrid) -> Result<CategoricalGrid> {
        self.apply(x, true)
    }

    pub fn inverse(&self, z: &CategoricalGrid) -> Result<CategoricalGrid> {
        self.apply(z, false)
    }
}

/// Trades each 2×2 spatial block for 4 channels: `(C, H, W)` →
/// `(4C, H/2, W/2)`, block order top-left, top-right, bottom-left,
/// bottom-right.
pub fn squeeze_forward(x: &CategoricalGrid) -> Result<CategoricalGrid> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "squeeze needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0u16; x.len()];
    for ci in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let oc = ci * 4 + dy * 2 + dx;
                for y in 0..oh {
                    for xx in 0..ow {
                        out[oc * oh * ow + y * ow + xx] =
                            x.values()[ci * h * w + (2 * y + dy) * w + (2 * xx + dx)];
                    }
                }
            }
        }
    }
    CategoricalGrid::new(vec![c * 4, oh, ow], x.num_classes(), out)
}

/// Inverse of [`squeeze_forward`].
pub fn squeeze_inverse(z: &CategoricalGrid) -> Result<CategoricalGrid> {
    let (c, h, w) = z.dims3()?;
    if c % 4 != 0 {
        return Err(Error::Shape(format!(
            "unsqueeze needs a channel count divisible by 4, got {c}"
        )));
    }
    let (oc, oh, ow) = (c / 4, h * 2, w * 2);
    let mut out = vec![0u16; z.len()];
    for ci in 0..oc {
        for dy in 0..2 {
            for dx in 0..2 {
                let ic = ci * 4 + dy * 2 + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[ci * oh * ow + (2 * y + dy) * ow + (2 * xx + dx)] =
                            z.values()[ic * h * w + y * w + xx];
                    }
                }
            }
        }
    }
    CategoricalGrid::new(vec![oc, oh, ow], z.num_classes(), out)
}

/// Which part a splitprior factors out of the active vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactoredSide {
    /// Part a: the first `factored_len` elements (the part the preceding
    /// coupling left untouched).
    A,
    /// Part b: the last `factored_len` elements.
    B,
}

/// Factors part of the active vector out of the flow, modeling it with an
/// exact conditional categorical predicted from the kept part.
#[derive(Debug, Clone)]
pub struct SplitpriorLayer {
    factored_len: usize,
    side: FactoredSide,
    net: ClassifierNet,
}

impl SplitpriorLayer {
    pub fn new(factored_len: usize, side: FactoredSide, net: ClassifierNet) -> Result<Self> {
        if net.arch().output_positions() != factored_len {
            return Err(Error::Shape(format!(
                "net predicts {} positions, factored part has {factored_len}",
                net.arch().output_positions()
            )));
        }
        Ok(SplitpriorLayer { factored_len, side, net })
    }

    pub fn factored_len(&self) -> usize {
        self.factored_len
    }

    pub fn side(&self) -> FactoredSide {
        self.side
    }

    pub fn net(&self) -> &ClassifierNet {
        &self.net
    }

    fn split_ranges(&self, total: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        match self.side {
            FactoredSide::A => (0..self.factored_len, self.factored_len..total),
            FactoredSide::B => (total - self.factored_len..total, 0..total - self.factored_len),
        }
    }

    /// Shape of the kept part that continues through the flow.
    pub fn kept_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        let total: usize = shape.iter().product();
        if self.factored_len == 0 || self.factored_len >= total {
            return Err(Error::Shape(format!(
                "factored length {} leaves an empty part for shape {shape:?}",
                self.factored_len
            )));
        }
        match shape {
            [_] => Ok(vec![total - self.factored_len]),
            &[c, h, w] => {
                let hw = h * w;
                if self.factored_len % hw != 0 {
                    return Err(Error::Shape(format!(
                        "factored length {} is not a whole channel count for {shape:?}",
                        self.factored_len
                    )));
                }
                Ok(vec![c - self.factored_len / hw, h, w])
            }
            _ => unreachable!("grids are rank 1 or 3"),
        }
    }

    fn validate_for(&self, shape: &[usize], k: u32) -> Result<()> {
        if self.net.arch().num_classes() != k as usize {
            return Err(Error::Shape(format!(
                "net alphabet {} does not match data K={k}",
                self.net.arch().num_classes()
            )));
        }
        let kept = self.kept_shape(shape)?;
        let kept_len: usize = kept.iter().product();
        if self.net.arch().input_len() != kept_len {
            return Err(Error::Shape(format!(
                "net consumes {} elements, kept part has {kept_len}",
                self.net.arch().input_len()
            )));
        }
        if shape.len() == 3 && !matches!(self.net.arch(), NetArch::Conv { .. }) {
            return Err(Error::Shape("rank-3 splitprior needs a conv net".into()));
        }
        if shape.len() == 1 && !matches!(self.net.arch(), NetArch::Mlp { .. }) {
            return Err(Error::Shape("rank-1 splitprior needs a dense net".into()));
        }
        Ok(())
    }

    /// Removes the factored part: returns the kept grid, the factored values,
    /// and their conditional logits n(kept).
    pub fn apply(&self, x: &CategoricalGrid) -> Result<(CategoricalGrid, Vec<u16>, LogitTensor)> {
        self.validate_for(x.shape(), x.num_classes())?;
        let (fr, kr) = self.split_ranges(x.len());
        let factored = x.values()[fr].to_vec();
        let kept_values = x.values()[kr].to_vec();
        let kept = CategoricalGrid::new(
            self.kept_shape(x.shape())?,
            x.num_classes(),
            kept_values,
        )?;
        let logits = self.net.forward(kept.values())?;
        Ok((kept, factored, logits))
    }

    /// Conditional logits of the factored part given a kept grid.
    pub fn predict(&self, kept: &CategoricalGrid) -> Result<LogitTensor> {
        self.net.forward(kept.values())
    }

    /// Re-inserts a factored part, undoing [`Self::apply`]. `shape` is the
    /// full shape before the split.
    pub fn invert(
        &self,
        kept: &CategoricalGrid,
        factored: &[u16],
        shape: &[usize],
    ) -> Result<CategoricalGrid> {
        self.validate_for(shape, kept.num_classes())?;
        if factored.len() != self.factored_len {
            return Err(Error::Shape(format!(
                "factored part has {} values, expected {}",
                factored.len(),
                self.factored_len
            )));
        }
        if kept.shape() != self.kept_shape(shape)?.as_slice() {
            return Err(Error::Shape(format!(
                "kept part shape {:?} does not match split of {shape:?}",
                kept.shape()
            )));
        }
        let mut values = Vec::with_capacity(kept.len() + factored.len());
        match self.side {
            FactoredSide::A => {
                values.extend_from_slice(factored);
                values.extend_from_slice(kept.values());
            }
            FactoredSide::B => {
                values.extend_from_slice(kept.values());
                values.extend_from_slice(factored);
            }
        }
        CategoricalGrid::new(shape.to_vec(), kept.num_classes(), values)
    }
}

/// One frozen layer of a flow.
#[derive(Debug, Clone)]
pub enum FlowLayer {
    Shuffle(ShuffleLayer),
    Squeeze,
    Coupling(CouplingLayer),
    Splitprior(SplitpriorLayer),
}

impl FlowLayer {
    /// Output shape of this layer on the given input shape, validating all
    /// layer-specific constraints.
    pub fn output_shape(&self, input: &[usize], k: u32) -> Result<Vec<usize>> {
        match self {
            FlowLayer::Shuffle(s) => {
                if ShuffleLayer::expected_len(input) != s.perm().len() {
                    return Err(Error::Shape(format!(
                        "shuffle over {} units cannot apply to shape {input:?}",
                        s.perm().len()
                    )));
                }
                Ok(input.to_vec())
            }
            FlowLayer::Squeeze => match input {
                &[c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![c * 4, h / 2, w / 2]),
                _ => Err(Error::Shape(format!("cannot squeeze shape {input:?}"))),
            },
            FlowLayer::Coupling(c) => {
                c.validate_for(input, k)?;
                Ok(input.to_vec())
            }
            FlowLayer::Splitprior(s) => {
                s.validate_for(input, k)?;
                s.kept_shape(input)
            }
        }
    }

    fn name(&self) -> &'static str {
        match self {
            FlowLayer::Shuffle(_) => "shuffle",
            FlowLayer::Squeeze => "squeeze",
            FlowLayer::Coupling(_) => "coupling",
            FlowLayer::Splitprior(_) => "splitprior",
        }
    }
}

/// A part factored out by a splitprior during a forward pass.
#[derive(Debug, Clone)]
pub struct FactoredPart {
    /// Index of the splitprior layer in the model's layer list.
    pub layer_index: usize,
    pub values: Vec<u16>,
    /// Conditional logits the layer assigned to these values.
    pub logits: LogitTensor,
}

/// An immutable stack of frozen layers plus the fitted base distribution.
#[derive(Debug, Clone)]
pub struct FlowModel {
    num_classes: u32,
    input_shape: Vec<usize>,
    layers: Vec<FlowLayer>,
    base: BaseDistribution,
    final_shape: Vec<usize>,
    hash: u32,
}

impl FlowModel {
    /// Assembles and validates a model: the layer shapes must chain from
    /// `input_shape`, and `base` must cover the final latent exactly.
    pub fn new(
        num_classes: u32,
        input_shape: Vec<usize>,
        layers: Vec<FlowLayer>,
        base: BaseDistribution,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Invalid("num_classes must be positive".into()));
        }
        if input_shape.len() != 1 && input_shape.len() != 3 {
            return Err(Error::Shape(format!(
                "input rank must be 1 or 3, got {:?}",
                input_shape
            )));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape, num_classes).map_err(|e| {
                Error::Shape(format!("layer {i} ({}): {e}", layer.name()))
            })?;
        }
        let final_len: usize = shape.iter().product();
        if base.dims() != final_len || base.num_classes() != num_classes as usize {
            return Err(Error::Shape(format!(
                "base distribution covers {} dims x K={}, final latent is {final_len} dims x K={num_classes}",
                base.dims(),
                base.num_classes()
            )));
        }
        let mut model = FlowModel {
            num_classes,
            input_shape,
            layers,
            base,
            final_shape: shape,
            hash: 0,
        };
        model.hash = crc32fast::hash(&model.to_bytes());
        Ok(model)
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Number of dimensions of the model's input (the BPD denominator).
    pub fn input_dims(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.base
    }

    pub fn final_shape(&self) -> &[usize] {
        &self.final_shape
    }

    /// CRC32 of the serialized model; recorded in compressed containers so a
    /// mismatched model is refused at decode time.
    pub fn hash(&self) -> u32 {
        self.hash
    }

    fn check_input(&self, x: &CategoricalGrid) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() || x.num_classes() != self.num_classes {
            return Err(Error::Shape(format!(
                "grid shape {:?} K={} does not match model input {:?} K={}",
                x.shape(),
                x.num_classes(),
                self.input_shape,
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Pushes a sample through every layer; returns the final latent plus all
    /// factored parts (with their conditional logits) in layer order.
    pub fn forward(&self, x: &CategoricalGrid) -> Result<(CategoricalGrid, Vec<FactoredPart>)> {
        self.check_input(x)?;
        let mut z = x.clone();
        let mut parts = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            z = match layer {
                FlowLayer::Shuffle(s) => s.forward(&z)?,
                FlowLayer::Squeeze => squeeze_forward(&z)?,
                FlowLayer::Coupling(c) => c.forward(&z)?,
                FlowLayer::Splitprior(s) => {
                    let (kept, values, logits) = s.apply(&z)?;
                    parts.push(FactoredPart { layer_index: i, values, logits });
                    kept
                }
            };
        }
        Ok((z, parts))
    }

    /// Final latent only (forward pass without keeping factored logits).
    pub fn transform(&self, x: &CategoricalGrid) -> Result<CategoricalGrid> {
        Ok(self.forward(x)?.0)
    }

    /// Walks the layers in reverse, pulling each factored part from `source`
    /// as its splitprior is undone. `source` receives the layer index and the
    /// conditional logits predicted from the kept part, and must return the
    /// factored values.
    pub fn inverse_with(
        &self,
        z: &CategoricalGrid,
        source: &mut dyn FnMut(usize, &LogitTensor) -> Result<Vec<u16>>,
    ) -> Result<CategoricalGrid> {
        if z.shape() != self.final_shape.as_slice() || z.num_classes() != self.num_classes {
            return Err(Error::Shape(format!(
                "latent shape {:?} K={} does not match model final {:?} K={}",
                z.shape(),
                z.num_classes(),
                self.final_shape,
                self.num_classes
            )));
        }
        // Recompute the shape each layer saw on the way in, for re-insertion.
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut shape = self.input_shape.clone();
        shapes.push(shape.clone());
        for layer in &self.layers {
            shape = layer.output_shape(&shape, self.num_classes)?;
            shapes.push(shape.clone());
        }
        let mut x = z.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            x = match layer {
                FlowLayer::Shuffle(s) => s.inverse(&x)?,
                FlowLayer::Squeeze => squeeze_inverse(&x)?,
                FlowLayer::Coupling(c) => c.inverse(&x)?,
                FlowLayer::Splitprior(s) => {
                    let logits = s.predict(&x)?;
                    let values = source(i, &logits)?;
                    s.invert(&x, &values, &shapes[i])?
                }
            };
        }
        Ok(x)
    }

    /// Undoes [`Self::forward`] given the factored parts it returned.
    pub fn inverse(&self, z: &CategoricalGrid, parts: &[FactoredPart]) -> Result<CategoricalGrid> {
        let splitpriors = self
            .layers
            .iter()
            .filter(|l| matches!(l, FlowLayer::Splitprior(_)))
            .count();
        if parts.len() != splitpriors {
            return Err(Error::Shape(format!(
                "{} factored parts supplied, model has {splitpriors} splitpriors",
                parts.len()
            )));
        }
        let mut remaining = parts.iter().rev();
        self.inverse_with(z, &mut |layer_index, _logits| {
            let part = remaining.next().expect("count checked above");
            if part.layer_index != layer_index {
                return Err(Error::Shape(format!(
                    "factored part for layer {} supplied at layer {layer_index}",
                    part.layer_index
                )));
            }
            Ok(part.values.clone())
        })
    }

    /// Draws one sample: latent dims from the base distribution (ascending
    /// dimension order), then each factored part from its conditional softmax
    /// during inversion. Deterministic given the RNG state.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<CategoricalGrid> {
        let values: Vec<u16> = (0..self.base.dims())
            .map(|d| draw_categorical(rng, self.base.row(d)))
            .collect();
        let z = CategoricalGrid::new(self.final_shape.clone(), self.num_classes, values)?;
        self.inverse_with(&z, &mut |_, logits| {
            (0..logits.positions())
                .map(|p| {
                    let probs = softmax_f64(logits.row(p));
                    Ok(draw_categorical(rng, &probs))
                })
                .collect()
        })
    }

    /// Serializes the model (exactly the bytes [`Self::save`] writes).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn write(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(&MODEL_MAGIC)?;
        w.write_u16::<LittleEndian>(MODEL_VERSION)?;
        w.write_u32::<LittleEndian>(self.num_classes)?;
        w.write_u8(self.input_shape.len() as u8)?;
        for &d in &self.input_shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for layer in &self.layers {
            match layer {
                FlowLayer::Shuffle(s) => {
                    w.write_u8(0)?;
                    w.write_u64::<LittleEndian>(s.seed())?;
                    w.write_u32::<LittleEndian>(s.perm().len() as u32)?;
                    for &p in s.perm() {
                        w.write_u32::<LittleEndian>(p)?;
                    }
                }
                FlowLayer::Squeeze => w.write_u8(1)?,
                FlowLayer::Coupling(c) => {
                    w.write_u8(2)?;
                    w.write_u32::<LittleEndian>(c.split() as u32)?;
                    w.write_u32::<LittleEndian>(c.h() as u32)?;
                    let bytes = net_to_bytes(c.net());
                    w.write_u64::<LittleEndian>(bytes.len() as u64)?;
                    w.write_all(&bytes)?;
                }
                FlowLayer::Splitprior(s) => {
                    w.write_u8(3)?;
                    w.write_u8(match s.side() {
                        FactoredSide::A => 0,
                        FactoredSide::B => 1,
                    })?;
                    w.write_u32::<LittleEndian>(s.factored_len() as u32)?;
                    let bytes = net_to_bytes(s.net());
                    w.write_u64::<LittleEndian>(bytes.len() as u64)?;
                    w.write_all(&bytes)?;
                }
            }
        }
        w.write_u32::<LittleEndian>(self.base.dims() as u32)?;
        w.write_u32::<LittleEndian>(self.base.num_classes() as u32)?;
        for d in 0..self.base.dims() {
            for &p in self.base.row(d) {
                w.write_f64::<LittleEndian>(p)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MODEL_MAGIC {
            return Err(Error::Format(format!(
                "bad model-file magic {magic:?}, expected {MODEL_MAGIC:?}"
            )));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model-file version {version}, expected {MODEL_VERSION}"
            )));
        }
        let num_classes = r.read_u32::<LittleEndian>()?;
        let rank = r.read_u8()?;
        let mut input_shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            input_shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let layer_count = r.read_u32::<LittleEndian>()?;
        let mut layers = Vec::with_capacity(layer_count as usize);
        for _ in 0..layer_count {
            let tag = r.read_u8()?;
            layers.push(match tag {
                0 => {
                    let seed = r.read_u64::<LittleEndian>()?;
                    let len = r.read_u32::<LittleEndian>()? as usize;
                    let mut perm = Vec::with_capacity(len);
                    for _ in 0..len {
                        perm.push(r.read_u32::<LittleEndian>()?);
                    }
                    FlowLayer::Shuffle(ShuffleLayer::from_parts(seed, perm)?)
                }
                1 => FlowLayer::Squeeze,
                2 => {
                    let split = r.read_u32::<LittleEndian>()? as usize;
                    let h = r.read_u32::<LittleEndian>()? as usize;
                    let net = read_embedded_net(&mut r)?;
                    FlowLayer::Coupling(CouplingLayer::new(split, h, net)?)
                }
                3 => {
                    let side = match r.read_u8()? {
                        0 => FactoredSide::A,
                        1 => FactoredSide::B,
                        other => {
                            return Err(Error::Format(format!("unknown factored side {other}")));
                        }
                    };
                    let factored_len = r.read_u32::<LittleEndian>()? as usize;
                    let net = read_embedded_net(&mut r)?;
                    FlowLayer::Splitprior(SplitpriorLayer::new(factored_len, side, net)?)
                }
                other => {
                    return Err(Error::Format(format!("unknown layer tag {other}")));
                }
            });
        }
        let base_dims = r.read_u32::<LittleEndian>()? as usize;
        let base_k = r.read_u32::<LittleEndian>()? as usize;
        let mut probs = Vec::with_capacity(base_dims.saturating_mul(base_k));
        for _ in 0..base_dims * base_k {
            probs.push(r.read_f64::<LittleEndian>()?);
        }
        if r.position() != bytes.len() as u64 {
            return Err(Error::Format("trailing bytes after model".into()));
        }
        let base = BaseDistribution::from_probs(base_dims, base_k, probs)?;
        Self::new(num_classes, input_shape, layers, base)
    }
}

fn read_embedded_net(r: &mut Cursor<&[u8]>) -> Result<ClassifierNet> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let start = r.position() as usize;
    let bytes = r
        .get_ref()
        .get(start..start + len)
        .ok_or_else(|| Error::Format("embedded net overruns model file".into()))?;
    let net = net_from_bytes(bytes)?;
    r.set_position((start + len) as u64);
    Ok(net)
}

/// Draws one class from explicit f64 probabilities by inverse CDF.
pub(crate) fn draw_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> u16 {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i as u16;
        }
    }
    (probs.len() - 1) as u16
}

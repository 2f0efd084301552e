//! Greedy layer-by-layer training.
//!
//! Each coupling or splitprior net is trained in isolation against data
//! transformed by all previously frozen layers, so no gradient ever flows
//! through a discrete relabeling — the training signal is plain classifier
//! cross-entropy, which is exactly the code length the layer will charge.
//! Once a net converges it is frozen; the loop then transforms the working
//! set and moves to the next block. After the last block the base
//! distribution is fitted and the whole model is frozen and hashed.
//!
//! Everything is deterministic given (spec, data): the validation split,
//! each layer's weight initialization, and every epoch's batch order derive
//! from the spec's global seed.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    squeeze_forward, CouplingLayer, FactoredSide, FlowLayer, FlowModel, ShuffleLayer,
    SplitpriorLayer,
};
use crate::grid::{CategoricalGrid, Dataset};
use crate::likelihood::{evaluate_bpd, softmax_f64, BaseDistribution};
use crate::neural::{net_from_bytes, net_to_bytes, AdamState, ClassifierNet, NetArch};

/// Classifier architecture requested for one trainable block.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetSpec {
    /// Dense net for flat grids: `layers` linear maps of width `hidden`.
    Mlp { hidden: usize, layers: usize },
    /// 3×3 conv net for image grids: `depth` conv maps of `width` channels.
    Conv { width: usize, depth: usize },
}

/// One block of the flow, in application order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockSpec {
    Squeeze,
    Shuffle {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Coupling { h: usize, net: NetSpec },
    Splitprior { net: NetSpec },
}

fn default_lr() -> f64 {
    0.001
}

fn default_batch() -> usize {
    64
}

fn default_patience() -> usize {
    3
}

/// Complete training configuration, read from a JSON file.
///
/// Couplings split the active vector in half: the first `D/2` elements of a
/// flat grid, or the first `C/2` channels of an image grid, form part a.
/// Splitpriors factor that same first half out of the flow.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FlowSpec {
    /// Alphabet size of every grid element.
    pub k: u32,
    /// Input shape: `[D]` for flat data, `[C, H, W]` for images.
    pub shape: Vec<usize>,
    /// Adam learning rate.
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Minibatch size; the final batch of an epoch may be smaller.
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Per-layer epoch budget.
    pub epochs: usize,
    /// Early stopping: give up after this many epochs without a new best
    /// validation loss (0 disables early stopping).
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Global seed; all per-layer randomness derives from it.
    #[serde(default)]
    pub seed: u64,
    pub blocks: Vec<BlockSpec>,
}

impl FlowSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: FlowSpec = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad flow spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Shapes seen by each block: entry 0 is the input shape, entry i+1 the
    /// shape after block i. Errors if any block cannot apply.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let mut chain = vec![self.shape.clone()];
        for (i, block) in self.blocks.iter().enumerate() {
            let next = block_output_shape(block, chain.last().expect("non-empty"), self.k)
                .map_err(|e| Error::Config(format!("block {i}: {e}")))?;
            chain.push(next);
        }
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=65_536).contains(&self.k) {
            return Err(Error::Config(format!("k = {} not in 2..=65536", self.k)));
        }
        if self.shape.len() != 1 && self.shape.len() != 3 {
            return Err(Error::Config(format!(
                "shape {:?} must have rank 1 or 3",
                self.shape
            )));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("shape {:?} has a zero dim", self.shape)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if let BlockSpec::Coupling { h, .. } = block {
                if !(1..=self.k as usize).contains(h) {
                    return Err(Error::Config(format!(
                        "block {i}: h = {h} not in 1..={}",
                        self.k
                    )));
                }
            }
        }
        self.shape_chain()?;
        Ok(())
    }
}

/// Element count of the half split off by couplings and splitpriors.
fn half_split(shape: &[usize]) -> Result<usize> {
    match shape {
        [d] if *d >= 2 => Ok(d / 2),
        [c, h, w] if *c >= 2 => Ok((c / 2) * h * w),
        _ => Err(Error::Shape(format!("shape {shape:?} cannot be split in half"))),
    }
}

fn build_arch(
    shape: &[usize],
    k: u32,
    net: &NetSpec,
    in_len: usize,
    out_len: usize,
) -> Result<NetArch> {
    let arch = match (shape, net) {
        ([_], NetSpec::Mlp { hidden, layers }) => NetArch::Mlp {
            in_positions: in_len,
            out_positions: out_len,
            k: k as usize,
            hidden: *hidden,
            linear_layers: *layers,
        },
        (&[_, h, w], NetSpec::Conv { width, depth }) => NetArch::Conv {
            in_channels: in_len / (h * w),
            out_channels: out_len / (h * w),
            k: k as usize,
            height: h,
            width: w,
            hidden_channels: *width,
            conv_layers: *depth,
        },
        ([_], NetSpec::Conv { .. }) => {
            return Err(Error::Config("conv net on a flat grid".into()));
        }
        _ => return Err(Error::Config("dense net on an image grid".into())),
    };
    arch.validate()?;
    Ok(arch)
}

fn block_output_shape(block: &BlockSpec, shape: &[usize], k: u32) -> Result<Vec<usize>> {
    match block {
        BlockSpec::Squeeze => match shape {
            &[c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![c * 4, h / 2, w / 2]),
            _ => Err(Error::Shape(format!("cannot squeeze shape {shape:?}"))),
        },
        BlockSpec::Shuffle { .. } => Ok(shape.to_vec()),
        BlockSpec::Coupling { net, .. } => {
            let total: usize = shape.iter().product();
            let d = half_split(shape)?;
            build_arch(shape, k, net, d, total - d)?;
            Ok(shape.to_vec())
        }
        BlockSpec::Splitprior { net } => {
            let total: usize = shape.iter().product();
            let d = half_split(shape)?;
            build_arch(shape, k, net, total - d, d)?;
            match shape {
                [_] => Ok(vec![total - d]),
                &[c, h, w] => Ok(vec![c - c / 2, h, w]),
                _ => unreachable!("validated rank"),
            }
        }
    }
}

/// Hyperparameters of one net's optimization run.
#[derive(Debug, Clone)]
pub struct OptimSettings {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Base seed for per-epoch batch shuffling.
    pub shuffle_seed: u64,
}

/// What one optimization run did.
#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub epochs_run: usize,
    /// Epoch whose weights the net keeps (0 = the initial weights).
    pub best_epoch: usize,
    pub best_valid_nats: f64,
    /// Per-epoch (epoch, train nats, validation nats).
    pub rows: Vec<(usize, f64, f64)>,
}

fn eval_loss(net: &ClassifierNet, pairs: &[(&[u16], &[u16])], batch_size: usize) -> Result<f64> {
    let mut nats = 0.0;
    for chunk in pairs.chunks(batch_size) {
        let inputs: Vec<&[u16]> = chunk.iter().map(|p| p.0).collect();
        let targets: Vec<&[u16]> = chunk.iter().map(|p| p.1).collect();
        nats += net.batch_loss(&inputs, &targets)? * chunk.len() as f64;
    }
    Ok(nats / pairs.len() as f64)
}

/// Trains one classifier net on (input, target) pairs with Adam and
/// early stopping, keeping the weights of the best validation epoch. With an
/// empty `valid` set the training set doubles as the validation set. The
/// epoch loop stops `patience` epochs past the best epoch, or at the budget.
pub fn optimize_layer(
    net: &mut ClassifierNet,
    train: &[(&[u16], &[u16])],
    valid: &[(&[u16], &[u16])],
    settings: &OptimSettings,
) -> Result<OptimizeOutcome> {
    if train.is_empty() {
        return Err(Error::Invalid("cannot optimize on zero training pairs".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let eval_set = if valid.is_empty() { train } else { valid };
    let mut opt = AdamState::new(net, settings.learning_rate);
    let mut best_valid = eval_loss(net, eval_set, settings.batch_size)?;
    let mut best_bytes = net_to_bytes(net);
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;
    let mut rows = Vec::new();
    for epoch in 1..=settings.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            settings.shuffle_seed.wrapping_add(epoch as u64),
        ));
        let mut nats = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let inputs: Vec<&[u16]> = chunk.iter().map(|&i| train[i].0).collect();
            let targets: Vec<&[u16]> = chunk.iter().map(|&i| train[i].1).collect();
            nats += net.train_batch(&inputs, &targets, &mut opt)? * chunk.len() as f64;
        }
        let train_nats = nats / train.len() as f64;
        let valid_nats = eval_loss(net, eval_set, settings.batch_size)?;
        rows.push((epoch, train_nats, valid_nats));
        if valid_nats < best_valid {
            best_valid = valid_nats;
            best_epoch = epoch;
            best_bytes = net_to_bytes(net);
            stale = 0;
        } else {
            stale += 1;
            if settings.patience > 0 && stale >= settings.patience {
                break;
            }
        }
    }
    *net = net_from_bytes(&best_bytes)?;
    Ok(OptimizeOutcome { epochs_run, best_epoch, best_valid_nats: best_valid, rows })
}

/// One per-epoch loss record of the training run.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    /// Index of the block being trained.
    pub layer: usize,
    pub train_nats: f64,
    pub valid_nats: f64,
}

/// Summary of one trained net (couplings and splitpriors only).
#[derive(Debug, Clone)]
pub struct LayerReport {
    /// Block index in the spec.
    pub layer: usize,
    pub kind: &'static str,
    pub epochs_run: usize,
    pub best_valid_nats: f64,
    /// Exact train-split BPD before/after this layer was appended (bits of
    /// factored parts included, interim base refitted each time).
    pub train_bpd_before: f64,
    pub train_bpd_after: f64,
    /// Same measurement on the validation split, when one exists.
    pub valid_bpd_after: Option<f64>,
}

/// Everything a training run reports besides the model itself.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Train-split BPD of the untransformed data under a fitted base.
    pub initial_train_bpd: f64,
    pub rows: Vec<EpochRow>,
    pub layers: Vec<LayerReport>,
    /// Exact mean BPD of the finished model over the full input dataset —
    /// `evaluate_bpd` on the same file reproduces this number.
    pub final_bpd: f64,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// Loss curves as CSV with columns `epoch,layer,train_nats,valid_nats`.
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,layer,train_nats,valid_nats\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.9},{:.9}\n",
                row.epoch, row.layer, row.train_nats, row.valid_nats
            ));
        }
        out
    }
}

const SEED_STREAM_INIT: u64 = 1;
const SEED_STREAM_EPOCH: u64 = 2;
const SEED_STREAM_SHUFFLE: u64 = 3;
const SEED_STREAM_SPLIT: u64 = 4;

/// Mixes (global seed, block index, purpose) into an independent seed.
fn derive_seed(global: u64, layer: usize, stream: u64) -> u64 {
    let mut z = global
        ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Widths the shuffle permutes at this shape.
fn shuffle_units(shape: &[usize]) -> usize {
    match shape {
        [d] => *d,
        [c, ..] => *c,
        _ => unreachable!("grids are rank 1 or 3"),
    }
}

/// Applies a frozen layer to a working set, accumulating the exact bits each
/// sample's factored parts cost (conditional softmax code lengths).
fn apply_layer(
    layer: &FlowLayer,
    actives: &mut Vec<CategoricalGrid>,
    split_bits: &mut [f64],
) -> Result<()> {
    debug_assert_eq!(actives.len(), split_bits.len());
    let next: Vec<(CategoricalGrid, f64)> = actives
        .par_iter()
        .map(|x| match layer {
            FlowLayer::Shuffle(s) => Ok((s.forward(x)?, 0.0)),
            FlowLayer::Squeeze => Ok((squeeze_forward(x)?, 0.0)),
            FlowLayer::Coupling(c) => Ok((c.forward(x)?, 0.0)),
            FlowLayer::Splitprior(s) => {
                let (kept, factored, logits) = s.apply(x)?;
                let mut bits = 0.0;
                for (i, &v) in factored.iter().enumerate() {
                    bits -= softmax_f64(logits.row(i))[v as usize].log2();
                }
                Ok((kept, bits))
            }
        })
        .collect::<Result<_>>()?;
    *actives = Vec::with_capacity(next.len());
    for (i, (grid, bits)) in next.into_iter().enumerate() {
        actives.push(grid);
        split_bits[i] += bits;
    }
    Ok(())
}

/// Exact BPD of a working set: bits under a freshly fitted base plus each
/// sample's accumulated factored-part bits, per input dimension.
fn interim_bpd(
    actives: &[CategoricalGrid],
    split_bits: &[f64],
    input_dims: usize,
) -> Result<f64> {
    let base = BaseDistribution::fit(actives)?;
    let mut total = 0.0;
    for (x, &bits) in actives.iter().zip(split_bits) {
        total += base.grid_bits(x)? + bits;
    }
    Ok(total / (actives.len() * input_dims) as f64)
}

/// Trains a full model block by block. Returns the frozen model and the
/// training report; deterministic given (spec, data).
pub fn train_model(spec: &FlowSpec, data: &Dataset) -> Result<(FlowModel, TrainReport)> {
    spec.validate()?;
    if data.shape() != spec.shape.as_slice() || data.num_classes() != spec.k {
        return Err(Error::Shape(format!(
            "data is shape {:?} K={}, spec wants {:?} K={}",
            data.shape(),
            data.num_classes(),
            spec.shape,
            spec.k
        )));
    }
    let started = Instant::now();
    let items = data.items();
    let n = items.len();

    // Seeded 10% validation split (at least one sample when n allows).
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        0,
        SEED_STREAM_SPLIT,
    )));
    let valid_count = if n >= 2 { (n / 10).max(1) } else { 0 };
    let (valid_idx, train_idx) = order.split_at(valid_count);
    let mut train_act: Vec<CategoricalGrid> =
        train_idx.iter().map(|&i| items[i].clone()).collect();
    let mut valid_act: Vec<CategoricalGrid> =
        valid_idx.iter().map(|&i| items[i].clone()).collect();
    let mut train_bits = vec![0.0f64; train_act.len()];
    let mut valid_bits = vec![0.0f64; valid_act.len()];

    let input_dims: usize = spec.shape.iter().product();
    let mut shape = spec.shape.clone();
    let mut layers: Vec<FlowLayer> = Vec::new();
    let mut rows: Vec<EpochRow> = Vec::new();
    let mut layer_reports: Vec<LayerReport> = Vec::new();
    let initial_train_bpd = interim_bpd(&train_act, &train_bits, input_dims)?;
    let mut bpd_before = initial_train_bpd;

    for (i, block) in spec.blocks.iter().enumerate() {
        let total: usize = shape.iter().product();
        let trained: Option<(&'static str, OptimizeOutcome)>;
        let layer = match block {
            BlockSpec::Squeeze => {
                trained = None;
                FlowLayer::Squeeze
            }
            BlockSpec::Shuffle { seed } => {
                trained = None;
                let s = seed.unwrap_or_else(|| derive_seed(spec.seed, i, SEED_STREAM_SHUFFLE));
                FlowLayer::Shuffle(ShuffleLayer::new(shuffle_units(&shape), s)?)
            }
            BlockSpec::Coupling { h, net } => {
                let d = half_split(&shape)?;
                let arch = build_arch(&shape, spec.k, net, d, total - d)?;
                let mut net = ClassifierNet::new(arch, derive_seed(spec.seed, i, SEED_STREAM_INIT))?;
                let train_pairs: Vec<(&[u16], &[u16])> =
                    train_act.iter().map(|g| g.values().split_at(d)).collect();
                let valid_pairs: Vec<(&[u16], &[u16])> =
                    valid_act.iter().map(|g| g.values().split_at(d)).collect();
                let outcome = optimize_layer(
                    &mut net,
                    &train_pairs,
                    &valid_pairs,
                    &OptimSettings {
                        learning_rate: spec.lr as f32,
                        batch_size: spec.batch,
                        max_epochs: spec.epochs,
                        patience: spec.patience,
                        shuffle_seed: derive_seed(spec.seed, i, SEED_STREAM_EPOCH),
                    },
                )?;
                trained = Some(("coupling", outcome));
                FlowLayer::Coupling(CouplingLayer::new(d, *h, net)?)
            }
            BlockSpec::Splitprior { net } => {
                let d = half_split(&shape)?;
                let arch = build_arch(&shape, spec.k, net, total - d, d)?;
                let mut net = ClassifierNet::new(arch, derive_seed(spec.seed, i, SEED_STREAM_INIT))?;
                let train_pairs: Vec<(&[u16], &[u16])> = train_act
                    .iter()
                    .map(|g| {
                        let (factored, kept) = g.values().split_at(d);
                        (kept, factored)
                    })
                    .collect();
                let valid_pairs: Vec<(&[u16], &[u16])> = valid_act
                    .iter()
                    .map(|g| {
                        let (factored, kept) = g.values().split_at(d);
                        (kept, factored)
                    })
                    .collect();
                let outcome = optimize_layer(
                    &mut net,
                    &train_pairs,
                    &valid_pairs,
                    &OptimSettings {
                        learning_rate: spec.lr as f32,
                        batch_size: spec.batch,
                        max_epochs: spec.epochs,
                        patience: spec.patience,
                        shuffle_seed: derive_seed(spec.seed, i, SEED_STREAM_EPOCH),
                    },
                )?;
                trained = Some(("splitprior", outcome));
                FlowLayer::Splitprior(SplitpriorLayer::new(d, FactoredSide::A, net)?)
            }
        };
        apply_layer(&layer, &mut train_act, &mut train_bits)?;
        apply_layer(&layer, &mut valid_act, &mut valid_bits)?;
        shape = layer.output_shape(&shape, spec.k)?;
        layers.push(layer);
        if let Some((kind, outcome)) = trained {
            let train_bpd_after = interim_bpd(&train_act, &train_bits, input_dims)?;
            let valid_bpd_after = if valid_act.is_empty() {
                None
            } else {
                Some(interim_bpd(&valid_act, &valid_bits, input_dims)?)
            };
            rows.extend(outcome.rows.iter().map(|&(epoch, t, v)| EpochRow {
                epoch,
                layer: i,
                train_nats: t,
                valid_nats: v,
            }));
            layer_reports.push(LayerReport {
                layer: i,
                kind,
                epochs_run: outcome.epochs_run,
                best_valid_nats: outcome.best_valid_nats,
                train_bpd_before: bpd_before,
                train_bpd_after,
                valid_bpd_after,
            });
            bpd_before = train_bpd_after;
        }
    }

    // The shipped base sees every sample (both splits), transformed.
    let mut all_act = train_act;
    all_act.extend(valid_act);
    let base = BaseDistribution::fit(&all_act)?;
    let model = FlowModel::new(spec.k, spec.shape.clone(), layers, base)?;
    let final_bpd = evaluate_bpd(&model, items)?.mean_bpd;
    let report = TrainReport {
        initial_train_bpd,
        rows,
        layers: layer_reports,
        final_bpd,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sample_eight_gaussians, Split};
    use crate::likelihood::marginal_entropy_bits_per_dim;
    use rand::Rng;

    fn grid(shape: Vec<usize>, k: u32, values: Vec<u16>) -> CategoricalGrid {
        CategoricalGrid::new(shape, k, values).unwrap()
    }

    #[test]
    fn spec_json_applies_defaults_and_round_trips() {
        let text = r#"{
            "k": 91,
            "shape": [2],
            "epochs": 20,
            "blocks": [
                {"type": "coupling", "h": 91, "net": {"kind": "mlp", "hidden": 256, "layers": 4}}
            ]
        }"#;
        let spec = FlowSpec::from_json(text).unwrap();
        assert_eq!(spec.lr, 0.001);
        assert_eq!(spec.batch, 64);
        assert_eq!(spec.patience, 3);
        assert_eq!(spec.seed, 0);
        let again = FlowSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(again, spec);
        assert!(FlowSpec::from_json("{not json").is_err());
    }

    #[test]
    fn spec_validates_the_shape_chain_up_front() {
        let mut spec = FlowSpec {
            k: 4,
            shape: vec![1, 4, 4],
            lr: 0.001,
            batch: 8,
            epochs: 1,
            patience: 3,
            seed: 0,
            blocks: vec![
                BlockSpec::Squeeze,
                BlockSpec::Shuffle { seed: None },
                BlockSpec::Coupling { h: 4, net: NetSpec::Conv { width: 8, depth: 2 } },
                BlockSpec::Splitprior { net: NetSpec::Conv { width: 8, depth: 2 } },
            ],
        };
        let chain = spec.shape_chain().unwrap();
        assert_eq!(chain.last().unwrap(), &vec![2, 2, 2]);

        // A second squeeze on 1x1 spatial dims cannot apply.
        spec.blocks.push(BlockSpec::Squeeze);
        spec.blocks.push(BlockSpec::Squeeze);
        assert!(spec.validate().is_err());
        spec.blocks.truncate(4);

        spec.k = 1;
        assert!(spec.validate().is_err());
        spec.k = 4;
        spec.blocks[2] = BlockSpec::Coupling { h: 5, net: NetSpec::Conv { width: 8, depth: 2 } };
        assert!(spec.validate().is_err());
        spec.blocks[2] = BlockSpec::Coupling { h: 4, net: NetSpec::Mlp { hidden: 8, layers: 2 } };
        assert!(spec.validate().is_err(), "dense net on an image grid");
        spec.blocks[2] = BlockSpec::Coupling { h: 4, net: NetSpec::Conv { width: 8, depth: 2 } };
        spec.lr = 0.0;
        assert!(spec.validate().is_err());
    }

    /// Target is a deterministic function of the input, so the loss can be
    /// driven to ~0, and the resulting coupling with h = K sends every
    /// sample's part b to class 0.
    #[test]
    fn optimizer_learns_a_deterministic_mapping() {
        let arch = NetArch::Mlp { in_positions: 1, out_positions: 1, k: 4, hidden: 32, linear_layers: 2 };
        let mut net = ClassifierNet::new(arch, 5).unwrap();
        let samples: Vec<Vec<u16>> = (0..120).map(|i| vec![(i % 4) as u16; 2]).collect();
        let pairs: Vec<(&[u16], &[u16])> =
            samples.iter().map(|s| (&s[..1], &s[1..])).collect();
        let settings = OptimSettings {
            learning_rate: 0.05,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            shuffle_seed: 1,
        };
        let outcome = optimize_layer(&mut net, &pairs, &[], &settings).unwrap();
        assert!(
            outcome.best_valid_nats < 0.01,
            "loss {}",
            outcome.best_valid_nats
        );
        let layer = CouplingLayer::new(1, 4, net).unwrap();
        for s in &samples {
            let z = layer.forward(&grid(vec![2], 4, s.clone())).unwrap();
            assert_eq!(z.values()[1], 0, "input {s:?}");
        }
    }

    /// With part b independent and uniform, ln 2 per position is the best
    /// achievable loss, and the trained coupling cannot change the BPD.
    #[test]
    fn optimizer_bottoms_out_at_ln2_on_independent_uniform_data() {
        let mut items = Vec::new();
        for a in 0..2u16 {
            for b in 0..2u16 {
                for _ in 0..50 {
                    items.push(grid(vec![2], 2, vec![a, b]));
                }
            }
        }
        let data = Dataset::new(items, Split::Train).unwrap();
        let spec = FlowSpec {
            k: 2,
            shape: vec![2],
            lr: 0.001,
            batch: 16,
            epochs: 5,
            patience: 3,
            seed: 9,
            blocks: vec![BlockSpec::Coupling { h: 2, net: NetSpec::Mlp { hidden: 8, layers: 2 } }],
        };
        let (_, report) = train_model(&spec, &data).unwrap();
        let layer = &report.layers[0];
        assert!(
            (layer.best_valid_nats - std::f64::consts::LN_2).abs() < 0.02,
            "loss {}",
            layer.best_valid_nats
        );
        assert!(
            (layer.train_bpd_after - layer.train_bpd_before).abs() <= 0.01,
            "{} -> {}",
            layer.train_bpd_before,
            layer.train_bpd_after
        );
    }

    /// Validation labels are pure noise while the training set is learnable,
    /// so validation loss worsens once the net starts memorizing; the run
    /// must stop exactly `patience` epochs past the best epoch and keep the
    /// best epoch's weights.
    #[test]
    fn early_stopping_keeps_the_best_weights() {
        let arch = NetArch::Mlp { in_positions: 2, out_positions: 2, k: 2, hidden: 32, linear_layers: 2 };
        let mut net = ClassifierNet::new(arch, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let train_samples: Vec<Vec<u16>> = (0..40)
            .map(|_| {
                let a = rng.random_range(0..2u16);
                let b = rng.random_range(0..2u16);
                vec![a, b, a, b]
            })
            .collect();
        let valid_samples: Vec<Vec<u16>> = (0..40)
            .map(|_| {
                (0..4).map(|_| rng.random_range(0..2u16)).collect()
            })
            .collect();
        let train: Vec<(&[u16], &[u16])> =
            train_samples.iter().map(|s| (&s[..2], &s[2..])).collect();
        let valid: Vec<(&[u16], &[u16])> =
            valid_samples.iter().map(|s| (&s[..2], &s[2..])).collect();
        let settings = OptimSettings {
            learning_rate: 0.1,
            batch_size: 8,
            max_epochs: 100,
            patience: 3,
            shuffle_seed: 2,
        };
        let outcome = optimize_layer(&mut net, &train, &valid, &settings).unwrap();
        assert!(outcome.epochs_run < 100, "never stopped early");
        assert_eq!(outcome.epochs_run, outcome.best_epoch + 3);
        // The returned weights really are the best epoch's weights.
        let final_loss = eval_loss(&net, &valid, 8).unwrap();
        assert!((final_loss - outcome.best_valid_nats).abs() < 1e-12);
    }

    #[test]
    fn training_twice_with_one_seed_gives_one_model() {
        let data = sample_eight_gaussians(300, 17, Split::Train).unwrap();
        let spec = FlowSpec {
            k: 91,
            shape: vec![2],
            lr: 0.001,
            batch: 32,
            epochs: 2,
            patience: 3,
            seed: 123,
            blocks: vec![BlockSpec::Coupling { h: 91, net: NetSpec::Mlp { hidden: 16, layers: 2 } }],
        };
        let (model_a, report_a) = train_model(&spec, &data).unwrap();
        let (model_b, report_b) = train_model(&spec, &data).unwrap();
        assert_eq!(model_a.hash(), model_b.hash());
        assert_eq!(model_a.to_bytes(), model_b.to_bytes());
        assert_eq!(report_a.final_bpd, report_b.final_bpd);
        let mut other = spec.clone();
        other.seed = 124;
        let (model_c, _) = train_model(&other, &data).unwrap();
        assert_ne!(model_a.hash(), model_c.hash());
    }

    /// Adding a second block must not change what the first block learned.
    #[test]
    fn earlier_layers_stay_frozen_as_the_spec_grows() {
        let data = sample_eight_gaussians(200, 18, Split::Train).unwrap();
        let base_spec = FlowSpec {
            k: 91,
            shape: vec![2],
            lr: 0.001,
            batch: 32,
            epochs: 2,
            patience: 3,
            seed: 7,
            blocks: vec![BlockSpec::Coupling { h: 91, net: NetSpec::Mlp { hidden: 16, layers: 2 } }],
        };
        let mut longer = base_spec.clone();
        longer.blocks.push(BlockSpec::Coupling {
            h: 91,
            net: NetSpec::Mlp { hidden: 16, layers: 2 },
        });
        let (short_model, _) = train_model(&base_spec, &data).unwrap();
        let (long_model, _) = train_model(&longer, &data).unwrap();
        let net_bytes = |model: &FlowModel| match &model.layers()[0] {
            FlowLayer::Coupling(c) => net_to_bytes(c.net()),
            other => panic!("expected a coupling, got {other:?}"),
        };
        assert_eq!(net_bytes(&short_model), net_bytes(&long_model));
    }

    /// No blocks at all: the model is just the fitted base, and its BPD is
    /// the per-dimension marginal entropy up to add-one smoothing.
    #[test]
    fn zero_block_spec_reduces_to_the_marginal_baseline() {
        let data = sample_eight_gaussians(10_000, 19, Split::Train).unwrap();
        let spec = FlowSpec {
            k: 91,
            shape: vec![2],
            lr: 0.001,
            batch: 64,
            epochs: 0,
            patience: 3,
            seed: 0,
            blocks: vec![],
        };
        let (model, report) = train_model(&spec, &data).unwrap();
        assert!(model.layers().is_empty());
        let entropy = marginal_entropy_bits_per_dim(data.items()).unwrap();
        assert!(
            (report.final_bpd - entropy).abs() < 0.01,
            "bpd {} vs entropy {entropy}",
            report.final_bpd
        );
    }

    #[test]
    fn csv_lists_losses_under_stable_columns() {
        let data = sample_eight_gaussians(120, 20, Split::Train).unwrap();
        let spec = FlowSpec {
            k: 91,
            shape: vec![2],
            lr: 0.001,
            batch: 32,
            epochs: 2,
            patience: 3,
            seed: 3,
            blocks: vec![BlockSpec::Coupling { h: 91, net: NetSpec::Mlp { hidden: 8, layers: 2 } }],
        };
        let (_, report) = train_model(&spec, &data).unwrap();
        let csv = report.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,layer,train_nats,valid_nats"));
        let mut rows = 0;
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4);
            fields[0].parse::<usize>().unwrap();
            fields[1].parse::<usize>().unwrap();
            fields[2].parse::<f64>().unwrap();
            fields[3].parse::<f64>().unwrap();
            rows += 1;
        }
        assert_eq!(rows, report.rows.len());
        assert!(report.wall_seconds > 0.0);
    }

    #[test]
    fn train_model_rejects_mismatched_data() {
        let data = sample_eight_gaussians(50, 21, Split::Train).unwrap();
        let spec = FlowSpec {
            k: 91,
            shape: vec![3],
            lr: 0.001,
            batch: 32,
            epochs: 1,
            patience: 3,
            seed: 0,
            blocks: vec![],
        };
        assert!(train_model(&spec, &data).is_err());
        let spec_k = FlowSpec { k: 90, shape: vec![2], ..spec };
        assert!(train_model(&spec_k, &data).is_err());
    }
}

//! Self-verification suites.
//!
//! Each function here checks one load-bearing property of the library
//! against an independently coded oracle — a brute-force reference, a
//! finite-difference gradient, an exhaustive enumeration — and returns how
//! many cases it covered. The `verify` CLI subcommand and the acceptance
//! tests both run these, so the checks live in the library where they can
//! reach crate-internal hooks (direct parameter access, seeded
//! re-randomization) that the public API deliberately does not expose.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{compress, container_payload_len, decompress};
use crate::error::{Error, Result};
use crate::flow::{
    build_argsort_top, CouplingLayer, FactoredSide, FlowLayer, FlowModel, ShuffleLayer,
    SplitpriorLayer,
};
use crate::grid::{CategoricalGrid, Dataset, Split};
use crate::likelihood::{
    evaluate_bpd, optimal_factorized_bits, sort_joint_rows_descending, BaseDistribution,
};
use crate::neural::{ClassifierNet, Layer, NetArch};
use crate::train::{train_model, BlockSpec, FlowSpec, NetSpec};

/// What one suite did: a stable name for log lines and the number of
/// individual cases that were checked.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} cases ok", self.name, self.cases)
    }
}

fn fail(name: &str, detail: String) -> Error {
    Error::Invalid(format!("{name}: {detail}"))
}

// ---------------------------------------------------------------------------
// Partial argsort against a brute-force oracle.
// ---------------------------------------------------------------------------

/// Brute-force reference for the top-h relabeling permutation: repeatedly
/// scan for the largest remaining logit (ties to the lower index) to find
/// the h top classes in rank order, then write them back into their own
/// positions in ascending position order. No sorting routine involved.
pub fn brute_force_argsort_top(theta: &[f32], h: usize) -> Vec<u16> {
    let k = theta.len();
    let mut taken = vec![false; k];
    let mut ranked: Vec<usize> = Vec::with_capacity(h);
    for _ in 0..h {
        let mut best = usize::MAX;
        for i in 0..k {
            if !taken[i] && (best == usize::MAX || theta[i] > theta[best]) {
                best = i;
            }
        }
        taken[best] = true;
        ranked.push(best);
    }
    let mut slots = ranked.clone();
    slots.sort_unstable();
    let mut dec: Vec<u16> = (0..k as u16).collect();
    for (&slot, &class) in slots.iter().zip(&ranked) {
        dec[slot] = class as u16;
    }
    dec
}

/// Checks `build_argsort_top` against [`brute_force_argsort_top`] on random
/// logit vectors — smooth, quantized (many ties), and constant (all tied) —
/// and checks that h = K reproduces a full stable descending argsort.
pub fn argsort_matches_oracle(draws: usize) -> Result<CheckOutcome> {
    const NAME: &str = "argsort oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5A5);
    let sizes = [1usize, 2, 3, 4, 5, 8, 16, 91];
    for case in 0..draws {
        // Keep the smallest interesting case in steady rotation.
        let k = if case % 10 == 0 { 2 } else { sizes[rng.random_range(0..sizes.len())] };
        let h = rng.random_range(1..=k);
        let theta: Vec<f32> = match rng.random_range(0..3u8) {
            0 => (0..k).map(|_| rng.random_range(-5.0..5.0)).collect(),
            1 => (0..k).map(|_| rng.random_range(0..4) as f32 / 2.0).collect(),
            _ => vec![rng.random_range(-1.0..1.0); k],
        };
        let got = build_argsort_top(&theta, h)?;
        let want = brute_force_argsort_top(&theta, h);
        if got != want {
            return Err(fail(
                NAME,
                format!("theta {theta:?} h {h}: got {got:?}, oracle {want:?}"),
            ));
        }
        if h == k {
            // Full descending argsort by a third route: stable sort of
            // indices on negated logits keeps ties at the lower index.
            let mut full: Vec<u16> = (0..k as u16).collect();
            full.sort_by(|&a, &b| {
                theta[b as usize].partial_cmp(&theta[a as usize]).expect("finite")
            });
            if got != full {
                return Err(fail(
                    NAME,
                    format!("theta {theta:?} h=K: got {got:?}, full argsort {full:?}"),
                ));
            }
        }
    }
    Ok(CheckOutcome { name: NAME, cases: draws })
}

// ---------------------------------------------------------------------------
// Gradients against finite differences of an independent f64 forward pass.
// ---------------------------------------------------------------------------

/// Which single parameter a reference evaluation perturbs.
#[derive(Clone, Copy)]
enum Bump {
    Weight { layer: usize, row: usize, col: usize, delta: f64 },
    Bias { layer: usize, idx: usize, delta: f64 },
}

/// Independent plain-loop f64 forward pass + mean cross-entropy. Reads the
/// net's parameters (optionally perturbing one of them) but shares no code
/// with the production forward pass, so finite differences of this function
/// are an external oracle for the analytic gradients.
fn reference_loss(
    net: &ClassifierNet,
    inputs: &[&[u16]],
    targets: &[&[u16]],
    bump: Option<Bump>,
) -> f64 {
    let arch = net.arch();
    let k = arch.num_classes();
    let (height, width, is_conv) = match *arch {
        NetArch::Conv { height, width, .. } => (height, width, true),
        NetArch::Mlp { .. } => (1, 1, false),
    };
    let hw = height * width;

    let mut ws: Vec<Array2<f64>> = Vec::new();
    let mut bs: Vec<Array1<f64>> = Vec::new();
    let mut chans: Vec<(usize, usize)> = Vec::new();
    for layer in net.layers() {
        match layer {
            Layer::Dense { w, b } => {
                ws.push(w.mapv(f64::from));
                bs.push(b.mapv(f64::from));
                chans.push((w.nrows(), w.ncols()));
            }
            Layer::Conv { w, b, in_ch, out_ch } => {
                ws.push(w.mapv(f64::from));
                bs.push(b.mapv(f64::from));
                chans.push((*in_ch, *out_ch));
            }
        }
    }
    match bump {
        Some(Bump::Weight { layer, row, col, delta }) => ws[layer][[row, col]] += delta,
        Some(Bump::Bias { layer, idx, delta }) => bs[layer][idx] += delta,
        None => {}
    }

    let last = ws.len() - 1;
    let positions = arch.output_positions();
    let mut total = 0.0f64;
    for (input, target) in inputs.iter().zip(targets) {
        // One-hot encoding, matching the production layout: dense inputs are
        // position-major, conv inputs are (channel·K + class) planes.
        let mut x = vec![0.0f64; arch_input_units(arch)];
        if is_conv {
            let in_channels = match *arch {
                NetArch::Conv { in_channels, .. } => in_channels,
                _ => unreachable!(),
            };
            for c in 0..in_channels {
                for s in 0..hw {
                    x[(c * k + input[c * hw + s] as usize) * hw + s] = 1.0;
                }
            }
        } else {
            for (pos, &class) in input.iter().enumerate() {
                x[pos * k + class as usize] = 1.0;
            }
        }

        for (i, (w, b)) in ws.iter().zip(&bs).enumerate() {
            let (ins, outs) = chans[i];
            let mut y = if is_conv {
                // 3×3 same-padding convolution, written out longhand.
                let mut y = vec![0.0f64; outs * hw];
                for o in 0..outs {
                    for py in 0..height as isize {
                        for px in 0..width as isize {
                            let mut acc = b[o];
                            for c in 0..ins {
                                for ky in -1..=1isize {
                                    let sy = py + ky;
                                    if sy < 0 || sy >= height as isize {
                                        continue;
                                    }
                                    for kx in -1..=1isize {
                                        let sx = px + kx;
                                        if sx < 0 || sx >= width as isize {
                                            continue;
                                        }
                                        let tap = (c * 9 + (ky + 1) as usize * 3 + (kx + 1) as usize,
                                                   o);
                                        acc += x[c * hw + sy as usize * width + sx as usize]
                                            * w[[tap.0, tap.1]];
                                    }
                                }
                            }
                            y[o * hw + py as usize * width + px as usize] = acc;
                        }
                    }
                }
                y
            } else {
                let mut y = vec![0.0f64; outs];
                for (o, item) in y.iter_mut().enumerate() {
                    let mut acc = b[o];
                    for (r, &xv) in x.iter().enumerate() {
                        acc += xv * w[[r, o]];
                    }
                    *item = acc;
                }
                y
            };
            if i < last {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            x = y;
        }

        for (p, &t) in target.iter().enumerate() {
            let col = |j: usize| {
                if is_conv {
                    ((p / hw) * k + j) * hw + p % hw
                } else {
                    p * k + j
                }
            };
            let row: Vec<f64> = (0..k).map(|j| x[col(j)]).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += max + sum.ln() - row[t as usize];
        }
    }
    total / (inputs.len() * positions) as f64
}

fn arch_input_units(arch: &NetArch) -> usize {
    match *arch {
        NetArch::Mlp { in_positions, k, .. } => in_positions * k,
        NetArch::Conv { in_channels, k, height, width, .. } => in_channels * k * height * width,
    }
}

/// Checks every analytic parameter gradient of several small randomized nets
/// (dense and conv, 1–3 layers) against central finite differences of
/// [`reference_loss`], requiring 1e-4 relative agreement. Returns the total
/// number of parameters checked.
pub fn gradients_match_finite_differences() -> Result<CheckOutcome> {
    const NAME: &str = "gradient check";
    const EPS: f64 = 1e-4;
    let archs: Vec<NetArch> = vec![
        NetArch::Mlp { in_positions: 2, out_positions: 2, k: 3, hidden: 5, linear_layers: 1 },
        NetArch::Mlp { in_positions: 2, out_positions: 2, k: 3, hidden: 5, linear_layers: 2 },
        NetArch::Mlp { in_positions: 3, out_positions: 1, k: 4, hidden: 6, linear_layers: 3 },
        NetArch::Conv {
            in_channels: 2,
            out_channels: 2,
            k: 2,
            height: 3,
            width: 4,
            hidden_channels: 3,
            conv_layers: 1,
        },
        NetArch::Conv {
            in_channels: 1,
            out_channels: 2,
            k: 3,
            height: 3,
            width: 3,
            hidden_channels: 4,
            conv_layers: 2,
        },
        NetArch::Conv {
            in_channels: 2,
            out_channels: 1,
            k: 2,
            height: 2,
            width: 3,
            hidden_channels: 3,
            conv_layers: 3,
        },
    ];
    let mut cases = 0usize;
    for (ai, arch) in archs.into_iter().enumerate() {
        let mut net = ClassifierNet::new(arch, ai as u64)?;
        net.randomize(1000 + ai as u64, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + ai as u64);
        let k = net.arch().num_classes() as u16;
        let in_len = net.arch().input_len();
        let out_len = net.arch().output_positions();
        let batch: Vec<(Vec<u16>, Vec<u16>)> = (0..3)
            .map(|_| {
                (
                    (0..in_len).map(|_| rng.random_range(0..k)).collect(),
                    (0..out_len).map(|_| rng.random_range(0..k)).collect(),
                )
            })
            .collect();
        let inputs: Vec<&[u16]> = batch.iter().map(|(i, _)| i.as_slice()).collect();
        let targets: Vec<&[u16]> = batch.iter().map(|(_, t)| t.as_slice()).collect();

        let (logits, cache) = net.forward_train(&inputs)?;
        let (_, dlogits) = net.batch_cross_entropy(&logits, &targets)?;
        let grads = net.backward(&cache, &dlogits)?;

        for (li, (dw, db)) in grads.per_layer.iter().enumerate() {
            for row in 0..dw.nrows() {
                for col in 0..dw.ncols() {
                    let hi = reference_loss(&net, &inputs, &targets,
                        Some(Bump::Weight { layer: li, row, col, delta: EPS }));
                    let lo = reference_loss(&net, &inputs, &targets,
                        Some(Bump::Weight { layer: li, row, col, delta: -EPS }));
                    let fd = (hi - lo) / (2.0 * EPS);
                    let a = f64::from(dw[[row, col]]);
                    let rel = (a - fd).abs() / fd.abs().max(1e-3);
                    if rel > 1e-4 {
                        return Err(fail(
                            NAME,
                            format!(
                                "arch {ai} layer {li} w[{row},{col}]: analytic {a}, fd {fd}, rel {rel}"
                            ),
                        ));
                    }
                    cases += 1;
                }
            }
            for idx in 0..db.len() {
                let hi = reference_loss(&net, &inputs, &targets,
                    Some(Bump::Bias { layer: li, idx, delta: EPS }));
                let lo = reference_loss(&net, &inputs, &targets,
                    Some(Bump::Bias { layer: li, idx, delta: -EPS }));
                let fd = (hi - lo) / (2.0 * EPS);
                let a = f64::from(db[idx]);
                let rel = (a - fd).abs() / fd.abs().max(1e-3);
                if rel > 1e-4 {
                    return Err(fail(
                        NAME,
                        format!("arch {ai} layer {li} b[{idx}]: analytic {a}, fd {fd}, rel {rel}"),
                    ));
                }
                cases += 1;
            }
        }
    }
    Ok(CheckOutcome { name: NAME, cases })
}

// ---------------------------------------------------------------------------
// Invertibility.
// ---------------------------------------------------------------------------

/// Round-trips every possible input through every small coupling
/// configuration: flat grids of 2–4 positions, alphabets of 1–4 classes,
/// every split point, every h ≤ K, with randomized conditioning nets.
pub fn exhaustive_coupling_round_trips() -> Result<CheckOutcome> {
    const NAME: &str = "exhaustive coupling round trips";
    let mut cases = 0usize;
    for dims in 2..=4usize {
        for k in 1..=4u32 {
            for h in 1..=k as usize {
                for split in 1..dims {
                    let arch = NetArch::Mlp {
                        in_positions: split,
                        out_positions: dims - split,
                        k: k as usize,
                        hidden: 4,
                        linear_layers: 2,
                    };
                    let mut net =
                        ClassifierNet::new(arch, (dims * 100 + split * 10 + h) as u64)?;
                    net.randomize((k as usize * 31 + h) as u64, 0.9);
                    let layer = CouplingLayer::new(split, h, net)?;
                    let mut values = vec![0u16; dims];
                    loop {
                        let x = CategoricalGrid::new(vec![dims], k, values.clone())?;
                        let z = layer.forward(&x)?;
                        let back = layer.inverse(&z)?;
                        if back.values() != x.values() {
                            return Err(fail(
                                NAME,
                                format!(
                                    "D {dims} K {k} h {h} split {split}: {:?} -> {:?} -> {:?}",
                                    x.values(),
                                    z.values(),
                                    back.values()
                                ),
                            ));
                        }
                        cases += 1;
                        // Odometer over all K^D inputs.
                        let mut pos = 0;
                        while pos < dims {
                            values[pos] += 1;
                            if (values[pos] as u32) < k {
                                break;
                            }
                            values[pos] = 0;
                            pos += 1;
                        }
                        if pos == dims {
                            break;
                        }
                    }
                }
            }
        }
    }
    Ok(CheckOutcome { name: NAME, cases })
}

fn random_mlp(rng: &mut ChaCha8Rng, in_p: usize, out_p: usize, k: usize) -> Result<ClassifierNet> {
    let arch = NetArch::Mlp {
        in_positions: in_p,
        out_positions: out_p,
        k,
        hidden: rng.random_range(3..8),
        linear_layers: rng.random_range(1..3),
    };
    let mut net = ClassifierNet::new(arch, rng.random())?;
    net.randomize(rng.random(), 1.0);
    Ok(net)
}

fn random_conv(
    rng: &mut ChaCha8Rng,
    in_c: usize,
    out_c: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Result<ClassifierNet> {
    let arch = NetArch::Conv {
        in_channels: in_c,
        out_channels: out_c,
        k,
        height: h,
        width: w,
        hidden_channels: rng.random_range(2..5),
        conv_layers: rng.random_range(1..3),
    };
    let mut net = ClassifierNet::new(arch, rng.random())?;
    net.randomize(rng.random(), 1.0);
    Ok(net)
}

/// Builds `count` random models — random shape, alphabet, and stack of up to
/// three layers with randomized nets — and round-trips a random sample
/// through each: forward to the latent plus factored parts, inverse back,
/// demand exact equality.
pub fn randomized_model_round_trips(count: usize) -> Result<CheckOutcome> {
    const NAME: &str = "randomized model round trips";
    let failures: Vec<String> = (0..count)
        .into_par_iter()
        .filter_map(|trial| {
            match one_random_round_trip(trial as u64) {
                Ok(()) => None,
                Err(e) => Some(format!("trial {trial}: {e}")),
            }
        })
        .collect();
    if let Some(first) = failures.first() {
        return Err(fail(NAME, format!("{} failures, first: {first}", failures.len())));
    }
    Ok(CheckOutcome { name: NAME, cases: count })
}

fn one_random_round_trip(trial: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0B0_0000 + trial);
    let rank3 = rng.random::<bool>();
    let (mut shape, k) = if rank3 {
        let c = rng.random_range(1..=3usize);
        let h = [2usize, 4][rng.random_range(0..2)];
        let w = [2usize, 4][rng.random_range(0..2)];
        (vec![c, h, w], rng.random_range(2..=5u32))
    } else {
        (vec![rng.random_range(2..=10usize)], rng.random_range(2..=8u32))
    };
    let input_shape = shape.clone();
    let mut layers = Vec::new();
    for _ in 0..rng.random_range(1..=3usize) {
        let total: usize = shape.iter().product();
        let splittable = match shape.as_slice() {
            [d] => *d >= 2,
            [c, ..] => *c >= 2,
            _ => false,
        };
        let squeezable = matches!(shape.as_slice(), [_, h, w] if h % 2 == 0 && w % 2 == 0);
        let mut menu: Vec<u8> = vec![0]; // shuffle always applies
        if squeezable {
            menu.push(1);
        }
        if splittable {
            menu.push(2);
            menu.push(3);
        }
        let layer = match menu[rng.random_range(0..menu.len())] {
            0 => {
                let units = match shape.as_slice() {
                    [d] => *d,
                    [c, ..] => *c,
                    _ => unreachable!(),
                };
                FlowLayer::Shuffle(ShuffleLayer::new(units, rng.random())?)
            }
            1 => FlowLayer::Squeeze,
            2 => {
                let h = rng.random_range(1..=k as usize);
                let layer = match shape.as_slice() {
                    [d] => {
                        let split = rng.random_range(1..*d);
                        let net = random_mlp(&mut rng, split, d - split, k as usize)?;
                        CouplingLayer::new(split, h, net)?
                    }
                    &[c, hh, ww] => {
                        let ca = rng.random_range(1..c);
                        let net = random_conv(&mut rng, ca, c - ca, k as usize, hh, ww)?;
                        CouplingLayer::new(ca * hh * ww, h, net)?
                    }
                    _ => unreachable!(),
                };
                FlowLayer::Coupling(layer)
            }
            _ => {
                let layer = match shape.as_slice() {
                    [d] => {
                        let split = rng.random_range(1..*d);
                        let net = random_mlp(&mut rng, d - split, split, k as usize)?;
                        SplitpriorLayer::new(split, FactoredSide::A, net)?
                    }
                    &[c, hh, ww] => {
                        let ca = rng.random_range(1..c);
                        let net = random_conv(&mut rng, c - ca, ca, k as usize, hh, ww)?;
                        SplitpriorLayer::new(ca * hh * ww, FactoredSide::A, net)?
                    }
                    _ => unreachable!(),
                };
                debug_assert!(total >= 2);
                FlowLayer::Splitprior(layer)
            }
        };
        shape = layer.output_shape(&shape, k)?;
        layers.push(layer);
    }
    let dims: usize = shape.iter().product();
    let base = BaseDistribution::uniform(dims, k as usize)?;
    let model = FlowModel::new(k, input_shape.clone(), layers, base)?;
    let values: Vec<u16> = (0..input_shape.iter().product())
        .map(|_| rng.random_range(0..k as u16))
        .collect();
    let x = CategoricalGrid::new(input_shape, k, values)?;
    let (z, parts) = model.forward(&x)?;
    let back = model.inverse(&z, &parts)?;
    if back.values() != x.values() {
        return Err(Error::Invalid(format!(
            "round trip mismatch: {:?} -> {:?}",
            x.values(),
            back.values()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Codec.
// ---------------------------------------------------------------------------

/// Compresses and decompresses every sample through the model, checking
/// exact reconstruction and byte-deterministic output, and checks that the
/// mean realized payload rate stays within 0.02 + 32/D bits per dimension of
/// the model's measured BPD on the same samples.
pub fn codec_suite(model: &FlowModel, samples: &[CategoricalGrid]) -> Result<CheckOutcome> {
    const NAME: &str = "codec suite";
    if samples.is_empty() {
        return Err(fail(NAME, "no samples".into()));
    }
    let payload_bits: Vec<f64> = samples
        .par_iter()
        .map(|x| {
            let bytes = compress(model, x)?;
            if compress(model, x)? != bytes {
                return Err(Error::Invalid("nondeterministic bytes".into()));
            }
            let back = decompress(model, &bytes)?;
            if back.values() != x.values() {
                return Err(Error::Invalid("round trip mismatch".into()));
            }
            Ok(container_payload_len(model, &bytes)? as f64 * 8.0)
        })
        .collect::<Result<_>>()
        .map_err(|e| fail(NAME, e.to_string()))?;
    let dims = model.input_dims() as f64;
    let rate = payload_bits.iter().sum::<f64>() / (samples.len() as f64 * dims);
    let bpd = evaluate_bpd(model, samples)?.mean_bpd;
    let slack = 0.02 + 32.0 / dims;
    if rate - bpd > slack {
        return Err(fail(
            NAME,
            format!("rate {rate:.6} bpd exceeds measured {bpd:.6} + {slack:.6}"),
        ));
    }
    Ok(CheckOutcome { name: NAME, cases: samples.len() })
}

// ---------------------------------------------------------------------------
// Factorized-bits oracles on 2×2 joint distributions.
// ---------------------------------------------------------------------------

/// The worked 2×2 example: the joint [[0.4,0.2],[0.1,0.3]] costs ≈ 1.971
/// bits under the best factorized model, and ≈ 1.852 after each row is
/// sorted descending — per-row sorting provably concentrates column mass.
pub fn worked_joint_example() -> Result<CheckOutcome> {
    const NAME: &str = "worked 2x2 joint";
    let joint =
        Array2::from_shape_vec((2, 2), vec![0.4, 0.2, 0.1, 0.3]).expect("2x2");
    let before = optimal_factorized_bits(&joint)?;
    let after = optimal_factorized_bits(&sort_joint_rows_descending(&joint)?)?;
    if (before - 1.971).abs() > 1e-3 {
        return Err(fail(NAME, format!("before = {before}, want 1.971 ± 1e-3")));
    }
    if (after - 1.852).abs() > 1e-3 {
        return Err(fail(NAME, format!("after = {after}, want 1.852 ± 1e-3")));
    }
    Ok(CheckOutcome { name: NAME, cases: 2 })
}

fn check_sorting_never_hurts(joint: &Array2<f64>) -> Result<()> {
    let before = optimal_factorized_bits(joint)?;
    let after = optimal_factorized_bits(&sort_joint_rows_descending(joint)?)?;
    if after > before + 1e-12 {
        return Err(Error::Invalid(format!(
            "sorting raised factorized bits {before} -> {after} on {joint:?}"
        )));
    }
    Ok(())
}

/// Property sweep: per-row descending sorting never increases the optimal
/// factorized code length. Covers `draws` random 2×2 joints plus a full
/// simplex grid with `grid_steps` subdivisions per axis.
pub fn row_sorting_sweep(draws: usize, grid_steps: usize) -> Result<CheckOutcome> {
    const NAME: &str = "row sorting sweep";
    let mut rng = ChaCha8Rng::seed_from_u64(0x50F7);
    let mut cases = 0usize;
    for _ in 0..draws {
        // Dirichlet(1,1,1,1) via normalized exponentials, with the residual
        // folded into the largest entry so the table sums to 1 exactly.
        let mut v: Vec<f64> = (0..4).map(|_| -rng.random::<f64>().ln()).collect();
        let sum: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= sum);
        let residual = 1.0 - v.iter().sum::<f64>();
        let imax = (0..4).max_by(|&a, &b| v[a].total_cmp(&v[b])).expect("4 entries");
        v[imax] += residual;
        let joint = Array2::from_shape_vec((2, 2), v).expect("2x2");
        check_sorting_never_hurts(&joint).map_err(|e| fail(NAME, e.to_string()))?;
        cases += 1;
    }
    let n = grid_steps - 1;
    for i in 0..grid_steps {
        for j in 0..grid_steps {
            for l in 0..grid_steps {
                if i + j + l > n {
                    continue;
                }
                let mut v = vec![
                    i as f64 / n as f64,
                    j as f64 / n as f64,
                    l as f64 / n as f64,
                    (n - i - j - l) as f64 / n as f64,
                ];
                let residual = 1.0 - v.iter().sum::<f64>();
                let imax =
                    (0..4).max_by(|&a, &b| v[a].total_cmp(&v[b])).expect("4 entries");
                v[imax] += residual;
                let joint = Array2::from_shape_vec((2, 2), v).expect("2x2");
                check_sorting_never_hurts(&joint).map_err(|e| fail(NAME, e.to_string()))?;
                cases += 1;
            }
        }
    }
    Ok(CheckOutcome { name: NAME, cases })
}

// ---------------------------------------------------------------------------
// Greedy coupling on binary pair data, end to end.
// ---------------------------------------------------------------------------

/// Builds a dataset with exact per-cell counts drawn from a 2×2 joint and a
/// single-linear coupling net whose logits are those empirical conditional
/// counts — the net a perfectly trained classifier would converge to. Checks
/// that appending the h=K=2 coupling never increases the exact fitted BPD,
/// over `joints` random count tables.
pub fn greedy_binary_coupling_never_hurts(joints: usize) -> Result<CheckOutcome> {
    const NAME: &str = "greedy binary coupling";
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    let mut cases = 0usize;
    while cases < joints {
        let counts: [[u32; 2]; 2] =
            [[rng.random_range(0..=40), rng.random_range(0..=40)],
             [rng.random_range(0..=40), rng.random_range(0..=40)]];
        let total: u32 = counts.iter().flatten().sum();
        if total == 0 {
            continue;
        }
        let mut items = Vec::with_capacity(total as usize);
        for a in 0..2u16 {
            for b in 0..2u16 {
                for _ in 0..counts[a as usize][b as usize] {
                    items.push(CategoricalGrid::new(vec![2], 2, vec![a, b])?);
                }
            }
        }

        let plain = FlowModel::new(2, vec![2], vec![], BaseDistribution::fit(&items)?)?;
        let bpd_before = evaluate_bpd(&plain, &items)?.mean_bpd;

        // Single linear layer: logit(b = j | a) := count(a, j). Only the
        // order within each row matters to the relabeling, and ties resolve
        // exactly as they do for equal empirical probabilities.
        let arch =
            NetArch::Mlp { in_positions: 1, out_positions: 1, k: 2, hidden: 1, linear_layers: 1 };
        let mut net = ClassifierNet::new(arch, 0)?;
        let w = Array2::from_shape_fn((2, 2), |(a, j)| counts[a][j] as f32);
        net.set_layer_params(0, w, Array1::zeros(2))?;
        let layer = CouplingLayer::new(1, 2, net)?;
        let transformed: Vec<CategoricalGrid> =
            items.iter().map(|x| layer.forward(x)).collect::<Result<_>>()?;
        let coupled = FlowModel::new(
            2,
            vec![2],
            vec![FlowLayer::Coupling(layer)],
            BaseDistribution::fit(&transformed)?,
        )?;
        let bpd_after = evaluate_bpd(&coupled, &items)?.mean_bpd;

        if bpd_after > bpd_before + 1e-12 {
            return Err(fail(
                NAME,
                format!("counts {counts:?}: BPD rose {bpd_before} -> {bpd_after}"),
            ));
        }
        cases += 1;
    }
    Ok(CheckOutcome { name: NAME, cases })
}

// ---------------------------------------------------------------------------
// Synthetic categorical maps (stand-in for real segmentation data).
// ---------------------------------------------------------------------------

/// Synthetic 8-class 32×64 categorical maps: a random low-resolution class
/// grid nearest-upsampled 8×, with 1% of pixels flipped to a random class.
/// Structured enough that couplings find real signal, with no external data.
pub fn synthetic_segmentation(n: usize, seed: u64) -> Result<Dataset> {
    const K: u32 = 8;
    const H: usize = 32;
    const W: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let blobs: Vec<u16> = (0..4 * 8).map(|_| rng.random_range(0..K as u16)).collect();
        let mut values = vec![0u16; H * W];
        for y in 0..H {
            for x in 0..W {
                values[y * W + x] = blobs[(y / 8) * 8 + x / 8];
            }
        }
        for v in &mut values {
            if rng.random::<f64>() < 0.01 {
                *v = rng.random_range(0..K as u16);
            }
        }
        items.push(CategoricalGrid::new(vec![1, H, W], K, values)?);
    }
    Dataset::new(items, Split::Train)
}

/// Trains a small real model on synthetic categorical maps: squeeze to four
/// channels, then shuffled couplings (one restricted to the top 4 of 8
/// classes) and a splitprior. Used as the image-shaped subject for the
/// invertibility and codec suites.
pub fn segmentation_model(data: &Dataset, seed: u64) -> Result<FlowModel> {
    let spec = FlowSpec {
        k: 8,
        shape: vec![1, 32, 64],
        lr: 0.001,
        batch: 16,
        epochs: 2,
        patience: 3,
        seed,
        blocks: vec![
            BlockSpec::Squeeze,
            BlockSpec::Shuffle { seed: None },
            BlockSpec::Coupling { h: 4, net: NetSpec::Conv { width: 8, depth: 2 } },
            BlockSpec::Splitprior { net: NetSpec::Conv { width: 8, depth: 2 } },
            BlockSpec::Shuffle { seed: None },
            BlockSpec::Coupling { h: 8, net: NetSpec::Conv { width: 8, depth: 2 } },
        ],
    };
    let (model, _) = train_model(&spec, data)?;
    Ok(model)
}

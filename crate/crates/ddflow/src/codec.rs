//! Lossless entropy coding of grids under a frozen flow model.
//!
//! The coder is a byte-renormalizing rANS with a 32-bit state and 12-bit
//! quantized frequencies. Every probability the coder uses comes from the
//! same f64 tables the likelihood evaluation reads — the base distribution
//! rows and [`softmax_f64`] of the splitprior logits — quantized to integers
//! summing to 4096 with every symbol kept codable. Compression is therefore
//! exactly the model's own code: measured bits track reported bits per
//! dimension up to quantization rounding and the coder's constant tail.
//!
//! Decoding runs the flow inverse: latent dimensions are decoded under the
//! base first, then each factored part is decoded under the conditional
//! logits that become available as the inverse walk reconstructs the kept
//! parts. Containers carry the model hash and a checksum of the original
//! values, so a wrong model or a corrupted byte is always refused rather
//! than silently decoded into a different grid.

use std::io::Cursor;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::grid::CategoricalGrid;
use crate::likelihood::softmax_f64;

/// Magic tag of a single-grid compressed container.
pub const CODE_MAGIC: [u8; 4] = *b"DDFC";
/// Current single-grid container version.
pub const CODE_VERSION: u16 = 1;
/// Magic tag of a multi-grid stream with a random-access index.
pub const STREAM_MAGIC: [u8; 4] = *b"DDFS";
/// Current stream container version.
pub const STREAM_VERSION: u16 = 1;

/// Frequency precision: all tables sum to `1 << PRECISION_BITS`.
pub const PRECISION_BITS: u32 = 12;
/// Sum of every quantized frequency table.
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;
/// Lower bound of the coder state interval; also its initial and required
/// final value, which doubles as an end-of-stream integrity check.
const LOWER_BOUND: u32 = 1 << 23;

/// A probability row quantized to integer frequencies summing to
/// [`TOTAL_FREQ`], with cumulative sums for slot lookup.
#[derive(Debug, Clone)]
pub struct FrequencyTable {
    freq: Vec<u32>,
    cum: Vec<u32>,
}

impl FrequencyTable {
    /// Quantizes by largest remainder: floors of `p * 4096` first, then the
    /// remaining mass goes to the largest fractional parts (ties toward the
    /// lower index). Any symbol left at zero is raised to 1 by taking a count
    /// from the currently largest symbol, so every class stays codable.
    pub fn quantize(probs: &[f64]) -> Result<Self> {
        let k = probs.len();
        if k == 0 {
            return Err(Error::Invalid("cannot quantize an empty row".into()));
        }
        if k as u32 > TOTAL_FREQ {
            return Err(Error::Invalid(format!(
                "alphabet of {k} classes exceeds the coder's {TOTAL_FREQ} slots"
            )));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Invalid("probability row has a negative or non-finite entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "probability row sums to {sum}, expected 1 within 1e-6"
            )));
        }
        let mut freq = Vec::with_capacity(k);
        let mut remainders = Vec::with_capacity(k);
        for &p in probs {
            let scaled = p * f64::from(TOTAL_FREQ);
            let f = scaled.floor();
            freq.push(f as u32);
            remainders.push(scaled - f);
        }
        let mut total: i64 = freq.iter().map(|&f| i64::from(f)).sum();
        // Floating-point slop can leave the floors a hair over budget.
        while total > i64::from(TOTAL_FREQ) {
            let largest = argmax_u32(&freq);
            freq[largest] -= 1;
            total -= 1;
        }
        if total < i64::from(TOTAL_FREQ) {
            let deficit = (i64::from(TOTAL_FREQ) - total) as usize;
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                remainders[b]
                    .partial_cmp(&remainders[a])
                    .expect("finite remainders")
                    .then(a.cmp(&b))
            });
            debug_assert!(deficit <= k, "deficit {deficit} over {k} classes");
            for &i in order.iter().cycle().take(deficit) {
                freq[i] += 1;
            }
        }
        for i in 0..k {
            if freq[i] == 0 {
                let largest = argmax_u32(&freq);
                if freq[largest] < 2 {
                    return Err(Error::Invalid(
                        "cannot give every class a nonzero frequency".into(),
                    ));
                }
                freq[largest] -= 1;
                freq[i] = 1;
            }
        }
        let mut cum = Vec::with_capacity(k);
        let mut acc = 0u32;
        for &f in &freq {
            cum.push(acc);
            acc += f;
        }
        debug_assert_eq!(acc, TOTAL_FREQ);
        Ok(FrequencyTable { freq, cum })
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freq
    }

    /// (frequency, cumulative start) of one symbol.
    fn span(&self, s: usize) -> (u32, u32) {
        (self.freq[s], self.cum[s])
    }

    /// The symbol whose cumulative range contains `slot`.
    fn lookup(&self, slot: u32) -> usize {
        self.cum.partition_point(|&c| c <= slot) - 1
    }
}

fn argmax_u32(values: &[u32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Streaming rANS encoder. Symbols must be pushed in *reverse* of the order
/// the decoder will read them; [`Self::finish`] then lays the buffer out in
/// decode order with the final state in the first four bytes.
pub struct RansEncoder {
    state: u32,
    bytes: Vec<u8>,
}

impl Default for RansEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RansEncoder {
    pub fn new() -> Self {
        RansEncoder { state: LOWER_BOUND, bytes: Vec::new() }
    }

    pub fn put(&mut self, table: &FrequencyTable, symbol: u16) -> Result<()> {
        let s = symbol as usize;
        if s >= table.len() {
            return Err(Error::Invalid(format!(
                "symbol {s} outside table of {} classes",
                table.len()
            )));
        }
        let (f, c) = table.span(s);
        let x_max = ((LOWER_BOUND >> PRECISION_BITS) << 8) * f;
        let mut x = self.state;
        while x >= x_max {
            self.bytes.push((x & 0xFF) as u8);
            x >>= 8;
        }
        self.state = ((x / f) << PRECISION_BITS) + (x % f) + c;
        Ok(())
    }

    /// Payload bytes: four state bytes (big-endian once reversed), then the
    /// renormalization bytes in the order the decoder consumes them.
    pub fn finish(mut self) -> Vec<u8> {
        let x = self.state;
        self.bytes.extend_from_slice(&[
            (x & 0xFF) as u8,
            ((x >> 8) & 0xFF) as u8,
            ((x >> 16) & 0xFF) as u8,
            (x >> 24) as u8,
        ]);
        self.bytes.reverse();
        self.bytes
    }
}

/// Streaming rANS decoder over one payload produced by [`RansEncoder`].
pub struct RansDecoder<'a> {
    state: u32,
    rest: &'a [u8],
    pos: usize,
}

impl<'a> RansDecoder<'a> {
    pub fn new(payload: &'a [u8]) -> Result<Self> {
        if payload.len() < 4 {
            return Err(Error::Corrupt("payload shorter than the coder state".into()));
        }
        let state = u32::from_be_bytes(payload[..4].try_into().expect("4 bytes"));
        Ok(RansDecoder { state, rest: &payload[4..], pos: 0 })
    }

    pub fn get(&mut self, table: &FrequencyTable) -> Result<u16> {
        let slot = self.state & (TOTAL_FREQ - 1);
        let s = table.lookup(slot);
        let (f, c) = table.span(s);
        self.state = f * (self.state >> PRECISION_BITS) + slot - c;
        while self.state < LOWER_BOUND {
            let b = self
                .rest
                .get(self.pos)
                .ok_or_else(|| Error::Corrupt("payload truncated mid-symbol".into()))?;
            self.state = (self.state << 8) | u32::from(*b);
            self.pos += 1;
        }
        Ok(s as u16)
    }

    /// Verifies the stream ended exactly where encoding began: final state
    /// back at the initial bound with every byte consumed.
    pub fn finish(self) -> Result<()> {
        if self.state != LOWER_BOUND {
            return Err(Error::Corrupt("coder state did not return to its start".into()));
        }
        if self.pos != self.rest.len() {
            return Err(Error::Corrupt(format!(
                "{} unconsumed payload bytes",
                self.rest.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn values_crc(values: &[u16]) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    for &v in values {
        hasher.update(&v.to_le_bytes());
    }
    hasher.finalize()
}

/// The full symbol stream of one sample in decode order: latent dimensions
/// under their base rows, then factored parts (last splitprior first) under
/// their conditional softmaxes.
fn symbol_stream(model: &FlowModel, x: &CategoricalGrid) -> Result<Vec<(u16, Vec<f64>)>> {
    let (z, parts) = model.forward(x)?;
    let mut symbols = Vec::with_capacity(x.len());
    for (d, &v) in z.values().iter().enumerate() {
        symbols.push((v, model.base().row(d).to_vec()));
    }
    for part in parts.iter().rev() {
        for (i, &v) in part.values.iter().enumerate() {
            symbols.push((v, softmax_f64(part.logits.row(i))));
        }
    }
    Ok(symbols)
}

/// Compresses one grid into a self-describing container. Deterministic: the
/// same model and grid always produce the same bytes.
pub fn compress(model: &FlowModel, x: &CategoricalGrid) -> Result<Vec<u8>> {
    let symbols = symbol_stream(model, x)?;
    let mut enc = RansEncoder::new();
    for (v, probs) in symbols.iter().rev() {
        enc.put(&FrequencyTable::quantize(probs)?, *v)?;
    }
    let payload = enc.finish();
    let mut out = Vec::with_capacity(32 + payload.len());
    out.extend_from_slice(&CODE_MAGIC);
    out.write_u16::<LittleEndian>(CODE_VERSION)?;
    out.write_u32::<LittleEndian>(model.hash())?;
    out.write_u8(x.rank() as u8)?;
    for &d in x.shape() {
        out.write_u32::<LittleEndian>(d as u32)?;
    }
    out.write_u32::<LittleEndian>(values_crc(x.values()))?;
    out.write_u64::<LittleEndian>(payload.len() as u64)?;
    out.extend_from_slice(&payload);
    Ok(out)
}

struct ContainerHeader {
    shape: Vec<usize>,
    crc: u32,
    payload_offset: usize,
    payload_len: usize,
}

fn parse_container(model: &FlowModel, bytes: &[u8]) -> Result<ContainerHeader> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut r, &mut magic)?;
    if magic != CODE_MAGIC {
        return Err(Error::Format(format!(
            "bad container magic {magic:?}, expected {CODE_MAGIC:?}"
        )));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != CODE_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}, expected {CODE_VERSION}"
        )));
    }
    let hash = r.read_u32::<LittleEndian>()?;
    if hash != model.hash() {
        return Err(Error::HashMismatch { container: hash, model: model.hash() });
    }
    let rank = r.read_u8()?;
    if rank != 1 && rank != 3 {
        return Err(Error::Format(format!("container rank {rank} is not 1 or 3")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    if shape != model.input_shape() {
        return Err(Error::Shape(format!(
            "container holds shape {shape:?}, model expects {:?}",
            model.input_shape()
        )));
    }
    let crc = r.read_u32::<LittleEndian>()?;
    let payload_len = r.read_u64::<LittleEndian>()?;
    let payload_offset = r.position() as usize;
    let remaining = bytes.len() - payload_offset;
    if payload_len != remaining as u64 {
        return Err(Error::Corrupt(format!(
            "payload length field says {payload_len} bytes, container holds {remaining}"
        )));
    }
    Ok(ContainerHeader { shape, crc, payload_offset, payload_len: remaining })
}

/// Decompresses one container back to its exact original grid. Refuses a
/// container written under a different model (hash check) and any corrupted
/// byte (checksum and coder-state checks).
pub fn decompress(model: &FlowModel, bytes: &[u8]) -> Result<CategoricalGrid> {
    let header = parse_container(model, bytes)?;
    let payload = &bytes[header.payload_offset..header.payload_offset + header.payload_len];
    let mut dec = RansDecoder::new(payload)?;
    let final_len: usize = model.final_shape().iter().product();
    let mut zvals = Vec::with_capacity(final_len);
    for d in 0..final_len {
        zvals.push(dec.get(&FrequencyTable::quantize(model.base().row(d))?)?);
    }
    let z = CategoricalGrid::new(model.final_shape().to_vec(), model.num_classes(), zvals)?;
    let x = model.inverse_with(&z, &mut |_, logits| {
        (0..logits.positions())
            .map(|p| dec.get(&FrequencyTable::quantize(&softmax_f64(logits.row(p)))?))
            .collect()
    })?;
    dec.finish()?;
    if values_crc(x.values()) != header.crc {
        return Err(Error::Corrupt("decoded grid fails its checksum".into()));
    }
    debug_assert_eq!(x.shape(), header.shape.as_slice());
    Ok(x)
}

/// Payload length (in bytes) recorded in a compressed container, excluding
/// the container header itself.
pub fn container_payload_len(model: &FlowModel, bytes: &[u8]) -> Result<usize> {
    Ok(parse_container(model, bytes)?.payload_len)
}

/// Code length of the grid under the *unquantized* f64 tables, in bits: the
/// sum of −log₂ p over the exact symbol stream the coder would emit. Matches
/// the likelihood evaluation to float rounding and lower-bounds the payload.
pub fn ideal_bits(model: &FlowModel, x: &CategoricalGrid) -> Result<f64> {
    let mut bits = 0.0;
    for (v, probs) in symbol_stream(model, x)? {
        bits -= probs[v as usize].log2();
    }
    Ok(bits)
}

/// Compresses a whole dataset into one stream with a random-access index.
/// An empty slice is allowed and yields an index-only stream.
pub fn stream_compress(model: &FlowModel, items: &[CategoricalGrid]) -> Result<Vec<u8>> {
    let blobs: Vec<Vec<u8>> = items
        .par_iter()
        .map(|x| compress(model, x))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    out.extend_from_slice(&STREAM_MAGIC);
    out.write_u16::<LittleEndian>(STREAM_VERSION)?;
    out.write_u32::<LittleEndian>(model.hash())?;
    out.write_u64::<LittleEndian>(blobs.len() as u64)?;
    let mut offset = 0u64;
    for blob in &blobs {
        out.write_u64::<LittleEndian>(offset)?;
        offset += blob.len() as u64;
    }
    for blob in &blobs {
        out.extend_from_slice(blob);
    }
    Ok(out)
}

struct StreamLayout<'a> {
    offsets: Vec<usize>,
    blobs: &'a [u8],
}

impl StreamLayout<'_> {
    fn item(&self, index: usize) -> Result<&[u8]> {
        if index >= self.offsets.len() {
            return Err(Error::Invalid(format!(
                "item {index} out of range, stream holds {}",
                self.offsets.len()
            )));
        }
        let start = self.offsets[index];
        let end = self
            .offsets
            .get(index + 1)
            .copied()
            .unwrap_or(self.blobs.len());
        self.blobs
            .get(start..end)
            .ok_or_else(|| Error::Corrupt("stream index points outside the stream".into()))
    }
}

fn parse_stream<'a>(model: &FlowModel, bytes: &'a [u8]) -> Result<StreamLayout<'a>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut r, &mut magic)?;
    if magic != STREAM_MAGIC {
        return Err(Error::Format(format!(
            "bad stream magic {magic:?}, expected {STREAM_MAGIC:?}"
        )));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != STREAM_VERSION {
        return Err(Error::Format(format!(
            "unsupported stream version {version}, expected {STREAM_VERSION}"
        )));
    }
    let hash = r.read_u32::<LittleEndian>()?;
    if hash != model.hash() {
        return Err(Error::HashMismatch { container: hash, model: model.hash() });
    }
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut offsets = Vec::with_capacity(count);
    for _ in 0..count {
        offsets.push(r.read_u64::<LittleEndian>()? as usize);
    }
    for w in offsets.windows(2) {
        if w[1] < w[0] {
            return Err(Error::Corrupt("stream index is not ascending".into()));
        }
    }
    let blobs = &bytes[r.position() as usize..];
    if let Some(&first) = offsets.first() {
        if first != 0 {
            return Err(Error::Corrupt("stream index does not start at zero".into()));
        }
    }
    Ok(StreamLayout { offsets, blobs })
}

/// Number of grids in a compressed stream.
pub fn stream_item_count(model: &FlowModel, bytes: &[u8]) -> Result<usize> {
    Ok(parse_stream(model, bytes)?.offsets.len())
}

/// Random access: decompresses a single grid out of a stream.
pub fn stream_decompress_item(
    model: &FlowModel,
    bytes: &[u8],
    index: usize,
) -> Result<CategoricalGrid> {
    decompress(model, parse_stream(model, bytes)?.item(index)?)
}

/// Decompresses every grid in a stream, in order.
pub fn stream_decompress(model: &FlowModel, bytes: &[u8]) -> Result<Vec<CategoricalGrid>> {
    let layout = parse_stream(model, bytes)?;
    (0..layout.offsets.len())
        .into_par_iter()
        .map(|i| decompress(model, layout.item(i)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{
        CouplingLayer, FactoredSide, FlowLayer, FlowModel, ShuffleLayer, SplitpriorLayer,
    };
    use crate::likelihood::{sample_bits, BaseDistribution};
    use crate::neural::{ClassifierNet, NetArch};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, shape: &[usize], k: u32) -> CategoricalGrid {
        let len = shape.iter().product();
        let values = (0..len).map(|_| rng.random_range(0..k) as u16).collect();
        CategoricalGrid::new(shape.to_vec(), k, values).unwrap()
    }

    fn randomized_mlp(in_p: usize, out_p: usize, k: usize, seed: u64) -> ClassifierNet {
        let arch = NetArch::Mlp { in_positions: in_p, out_positions: out_p, k, hidden: 16, linear_layers: 2 };
        let mut net = ClassifierNet::new(arch, seed).unwrap();
        net.randomize(seed.wrapping_add(1), 0.8);
        net
    }

    fn randomized_conv(cin: usize, cout: usize, k: usize, h: usize, w: usize, seed: u64) -> ClassifierNet {
        let arch = NetArch::Conv {
            in_channels: cin,
            out_channels: cout,
            k,
            height: h,
            width: w,
            hidden_channels: 8,
            conv_layers: 2,
        };
        let mut net = ClassifierNet::new(arch, seed).unwrap();
        net.randomize(seed.wrapping_add(1), 0.8);
        net
    }

    /// (8,) K=5: shuffle, coupling, splitprior → (5,), fitted base.
    fn rank1_model(seed: u64) -> FlowModel {
        let layers = vec![
            FlowLayer::Shuffle(ShuffleLayer::new(8, seed).unwrap()),
            FlowLayer::Coupling(CouplingLayer::new(4, 4, randomized_mlp(4, 4, 5, seed)).unwrap()),
            FlowLayer::Splitprior(
                SplitpriorLayer::new(3, FactoredSide::A, randomized_mlp(5, 3, 5, seed + 1))
                    .unwrap(),
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<CategoricalGrid> =
            (0..60).map(|_| random_grid(&mut rng, &[5], 5)).collect();
        let base = BaseDistribution::fit(&latents).unwrap();
        FlowModel::new(5, vec![8], layers, base).unwrap()
    }

    /// (1,4,4) K=3: squeeze, shuffle, coupling, splitprior → (2,2,2).
    fn rank3_model(seed: u64) -> FlowModel {
        let layers = vec![
            FlowLayer::Squeeze,
            FlowLayer::Shuffle(ShuffleLayer::new(4, seed).unwrap()),
            FlowLayer::Coupling(
                CouplingLayer::new(8, 2, randomized_conv(2, 2, 3, 2, 2, seed)).unwrap(),
            ),
            FlowLayer::Splitprior(
                SplitpriorLayer::new(8, FactoredSide::A, randomized_conv(2, 2, 3, 2, 2, seed + 1))
                    .unwrap(),
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<CategoricalGrid> =
            (0..60).map(|_| random_grid(&mut rng, &[2, 2, 2], 3)).collect();
        let base = BaseDistribution::fit(&latents).unwrap();
        FlowModel::new(3, vec![1, 4, 4], layers, base).unwrap()
    }

    fn identity_uniform_model(dims: usize, k: u32) -> FlowModel {
        let base = BaseDistribution::uniform(dims, k as usize).unwrap();
        FlowModel::new(k, vec![dims], vec![], base).unwrap()
    }

    #[test]
    fn quantize_known_rows() {
        let t = FrequencyTable::quantize(&[0.5, 0.5]).unwrap();
        assert_eq!(t.freqs(), &[2048, 2048]);
        let t = FrequencyTable::quantize(&[0.999999, 0.000001]).unwrap();
        assert_eq!(t.freqs(), &[4095, 1]);
        let t = FrequencyTable::quantize(&[1.0]).unwrap();
        assert_eq!(t.freqs(), &[4096]);
        assert!(FrequencyTable::quantize(&[]).is_err());
        assert!(FrequencyTable::quantize(&[0.7, 0.7]).is_err());
        assert!(FrequencyTable::quantize(&[1.5, -0.5]).is_err());
    }

    proptest! {
        /// Quantized tables always sum to 4096 with no zero frequency, and
        /// slot lookup agrees with the cumulative spans.
        #[test]
        fn quantize_is_total_and_positive(
            raw in proptest::collection::vec(1e-9f64..1.0, 1..40),
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let t = FrequencyTable::quantize(&probs).unwrap();
            prop_assert_eq!(t.freqs().iter().sum::<u32>(), TOTAL_FREQ);
            prop_assert!(t.freqs().iter().all(|&f| f >= 1));
            for s in 0..t.len() {
                let (f, c) = t.span(s);
                prop_assert_eq!(t.lookup(c), s);
                prop_assert_eq!(t.lookup(c + f - 1), s);
            }
        }

        /// Raw coder round trip over random tables and symbol strings.
        #[test]
        fn rans_round_trips(
            raw in proptest::collection::vec(0.01f64..1.0, 2..8),
            picks in proptest::collection::vec(0.0f64..1.0, 0..200),
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let table = FrequencyTable::quantize(&probs).unwrap();
            let symbols: Vec<u16> =
                picks.iter().map(|&p| (p * raw.len() as f64) as u16).collect();
            let mut enc = RansEncoder::new();
            for &s in symbols.iter().rev() {
                enc.put(&table, s).unwrap();
            }
            let payload = enc.finish();
            let mut dec = RansDecoder::new(&payload).unwrap();
            for &want in &symbols {
                prop_assert_eq!(dec.get(&table).unwrap(), want);
            }
            dec.finish().unwrap();
        }
    }

    #[test]
    fn uniform_binary_payload_is_one_bit_per_symbol() {
        let model = identity_uniform_model(1024, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_grid(&mut rng, &[1024], 2);
        let container = compress(&model, &x).unwrap();
        let payload = container_payload_len(&model, &container).unwrap();
        assert!(
            (120..=136).contains(&payload),
            "payload {payload} bytes for 1024 uniform bits"
        );
        assert_eq!(decompress(&model, &container).unwrap().values(), x.values());
    }

    #[test]
    fn round_trips_through_real_models() {
        for model in [rank1_model(3), rank3_model(4)] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..50 {
                let x = random_grid(&mut rng, model.input_shape(), model.num_classes());
                let bytes = compress(&model, &x).unwrap();
                let back = decompress(&model, &bytes).unwrap();
                assert_eq!(back.values(), x.values());
                assert_eq!(back.shape(), x.shape());
            }
        }
    }

    #[test]
    fn compression_is_deterministic_across_model_reloads() {
        let model = rank1_model(6);
        let reloaded = FlowModel::from_bytes(&model.to_bytes()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let x = random_grid(&mut rng, &[8], 5);
            let a = compress(&model, &x).unwrap();
            let b = compress(&model, &x).unwrap();
            let c = compress(&reloaded, &x).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let model = rank1_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_grid(&mut rng, &[8], 5);
        let bytes = compress(&model, &x).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0xFF;
            assert!(
                decompress(&model, &bad).is_err(),
                "flipped byte {i} of {} went unnoticed",
                bytes.len()
            );
        }
        assert!(decompress(&model, &bytes[..bytes.len() - 1]).is_err());
        assert!(decompress(&model, &[]).is_err());
    }

    #[test]
    fn wrong_model_is_refused_by_hash() {
        let a = rank1_model(10);
        let b = rank1_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_grid(&mut rng, &[8], 5);
        let bytes = compress(&a, &x).unwrap();
        match decompress(&b, &bytes) {
            Err(Error::HashMismatch { container, model }) => {
                assert_eq!(container, a.hash());
                assert_eq!(model, b.hash());
            }
            other => panic!("expected a hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn payload_stays_close_to_ideal_bits() {
        let model = rank1_model(13);
        let dims = model.input_dims() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..30 {
            let x = random_grid(&mut rng, &[8], 5);
            let container = compress(&model, &x).unwrap();
            let payload_bits = 8.0 * container_payload_len(&model, &container).unwrap() as f64;
            let ideal = ideal_bits(&model, &x).unwrap();
            assert!(payload_bits >= ideal - 1e-9);
            assert!(
                payload_bits <= ideal + 0.02 * dims + 32.0,
                "payload {payload_bits} bits vs ideal {ideal}"
            );
        }
    }

    #[test]
    fn ideal_bits_match_the_likelihood_evaluation() {
        for model in [rank1_model(15), rank3_model(16)] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for _ in 0..20 {
                let x = random_grid(&mut rng, model.input_shape(), model.num_classes());
                let ideal = ideal_bits(&model, &x).unwrap();
                let (base_bits, split_bits) = sample_bits(&model, &x).unwrap();
                let reported = base_bits + split_bits;
                assert!(
                    (ideal - reported).abs() <= 1e-9 * reported.max(1.0),
                    "{ideal} vs {reported}"
                );
            }
        }
    }

    #[test]
    fn streams_round_trip_with_random_access() {
        let model = rank3_model(18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let items: Vec<CategoricalGrid> =
            (0..20).map(|_| random_grid(&mut rng, &[1, 4, 4], 3)).collect();
        let stream = stream_compress(&model, &items).unwrap();
        assert_eq!(stream_item_count(&model, &stream).unwrap(), items.len());
        let all = stream_decompress(&model, &stream).unwrap();
        for (a, b) in all.iter().zip(&items) {
            assert_eq!(a.values(), b.values());
        }
        for i in [0, 7, 19] {
            let item = stream_decompress_item(&model, &stream, i).unwrap();
            assert_eq!(item.values(), items[i].values());
        }
        assert!(stream_decompress_item(&model, &stream, 20).is_err());
        assert!(stream_decompress(&rank3_model(99), &stream).is_err());
    }

    #[test]
    fn empty_stream_is_index_only() {
        let model = rank1_model(20);
        let stream = stream_compress(&model, &[]).unwrap();
        assert_eq!(stream.len(), 18);
        assert_eq!(stream_item_count(&model, &stream).unwrap(), 0);
        assert!(stream_decompress(&model, &stream).unwrap().is_empty());
        assert!(stream_decompress_item(&model, &stream, 0).is_err());
    }

    #[test]
    fn stream_size_is_accounted_for() {
        let model = rank1_model(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let items: Vec<CategoricalGrid> =
            (0..100).map(|_| random_grid(&mut rng, &[8], 5)).collect();
        let stream = stream_compress(&model, &items).unwrap();
        let ideal_total: f64 = items
            .iter()
            .map(|x| ideal_bits(&model, x).unwrap() / 8.0)
            .sum();
        let budget = 1.03 * (ideal_total + 64.0 * items.len() as f64);
        assert!(
            (stream.len() as f64) <= budget,
            "stream {} bytes, budget {budget:.1}",
            stream.len()
        );
    }
}

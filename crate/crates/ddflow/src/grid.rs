//! Categorical grids, dataset containers, file I/O, and the quantized
//! eight-Gaussians toy-data generator.
//!
//! A [`CategoricalGrid`] is an N-dimensional array of class indices in
//! `0..K`, shaped either `(D,)` (flat) or `(C, H, W)` (channel-major image).
//! Grids are immutable after construction and validated on every entry path
//! (constructor, file loaders, generators).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Magic tag of the native grid file format.
pub const GRID_MAGIC: [u8; 4] = *b"DDFG";
/// Current native grid file version.
pub const GRID_VERSION: u16 = 1;

/// IDX image-file magic (big-endian): u8 data, 3 dimensions.
const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// An immutable array of class indices in `0..K`.
///
/// Shape is either rank 1 (`(D,)`) or rank 3 (`(C, H, W)`, values stored
/// channel-major, row-major within each channel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoricalGrid {
    shape: Vec<usize>,
    num_classes: u32,
    values: Vec<u16>,
}

impl CategoricalGrid {
    /// Validates and wraps raw values. Shape must be rank 1 or 3 with positive
    /// dims whose product equals `values.len()`; every value must be `< K`.
    pub fn new(shape: Vec<usize>, num_classes: u32, values: Vec<u16>) -> Result<Self> {
        if shape.len() != 1 && shape.len() != 3 {
            return Err(Error::Shape(format!(
                "grid rank must be 1 or 3, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {len} values, got {}",
                values.len()
            )));
        }
        if num_classes == 0 || num_classes > u32::from(u16::MAX) + 1 {
            return Err(Error::Invalid(format!(
                "num_classes must be in 1..=65536, got {num_classes}"
            )));
        }
        if let Some(&bad) = values.iter().find(|&&v| u32::from(v) >= num_classes) {
            return Err(Error::Invalid(format!(
                "class value {bad} out of range for K={num_classes}"
            )));
        }
        Ok(CategoricalGrid { shape, num_classes, values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    /// Total number of positions (product of the shape).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(C, H, W)` of a rank-3 grid.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected rank-3 grid, got {:?}", self.shape))),
        }
    }
}

/// Which portion of a corpus a dataset represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// A non-empty, shape- and K-homogeneous collection of grids.
#[derive(Debug, Clone)]
pub struct Dataset {
    items: Vec<CategoricalGrid>,
    split: Split,
}

impl Dataset {
    pub fn new(items: Vec<CategoricalGrid>, split: Split) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("dataset must be non-empty".into()))?;
        let (shape, k) = (first.shape().to_vec(), first.num_classes());
        for (i, g) in items.iter().enumerate() {
            if g.shape() != shape.as_slice() || g.num_classes() != k {
                return Err(Error::Shape(format!(
                    "item {i} has shape {:?} K={}, expected {:?} K={}",
                    g.shape(),
                    g.num_classes(),
                    shape,
                    k
                )));
            }
        }
        Ok(Dataset { items, split })
    }

    pub fn items(&self) -> &[CategoricalGrid] {
        &self.items
    }

    pub fn into_items(self) -> Vec<CategoricalGrid> {
        self.items
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    pub fn shape(&self) -> &[usize] {
        self.items[0].shape()
    }

    pub fn num_classes(&self) -> u32 {
        self.items[0].num_classes()
    }
}

/// A reader wrapper that tracks the byte offset, so parse errors can name the
/// exact position at which a file went wrong.
struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, pos: 0 }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.pos, msg)
    }

    fn read_exact_or(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.pos;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::parse(at, format!("unexpected end of file while reading {what}"))
            } else {
                Error::Io(e)
            }
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact_or(&mut b, what)?;
        Ok(b[0])
    }

    fn read_u16_le(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact_or(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32_le(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_or(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64_le(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_or(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_or(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }

    /// Errors unless the stream is exhausted.
    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(self.fail("trailing bytes after expected end of file")),
        }
    }
}

/// Writes a dataset to the native grid file format.
///
/// Layout (little-endian): `"DDFG"`, u16 version, u32 K, u8 rank,
/// u32 dims[rank], u64 item count, then raw u16 values item-major.
pub fn save_grids(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&GRID_MAGIC)?;
    w.write_u16::<LittleEndian>(GRID_VERSION)?;
    w.write_u32::<LittleEndian>(ds.num_classes())?;
    w.write_u8(ds.shape().len() as u8)?;
    for &d in ds.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_u64::<LittleEndian>(ds.len() as u64)?;
    for item in ds.items() {
        for &v in item.values() {
            w.write_u16::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a native grid file written by [`save_grids`], labeling the result
/// with `split` (the file format carries no split tag).
pub fn load_grids(path: &Path, split: Split) -> Result<Dataset> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact_or(&mut magic, "magic")?;
    if magic != GRID_MAGIC {
        return Err(Error::Format(format!(
            "bad grid-file magic {magic:?}, expected {GRID_MAGIC:?}"
        )));
    }
    let version = r.read_u16_le("version")?;
    if version != GRID_VERSION {
        return Err(Error::Format(format!(
            "unsupported grid-file version {version}, expected {GRID_VERSION}"
        )));
    }
    let k = r.read_u32_le("num_classes")?;
    let rank = r.read_u8("rank")?;
    if rank != 1 && rank != 3 {
        return Err(r.fail(format!("rank must be 1 or 3, got {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for i in 0..rank {
        let d = r.read_u32_le("dimension")? as usize;
        if d == 0 {
            return Err(r.fail(format!("dimension {i} is zero")));
        }
        shape.push(d);
    }
    let count = r.read_u64_le("item count")?;
    if count == 0 {
        return Err(r.fail("item count 0 rejected: datasets are non-empty"));
    }
    let item_len: usize = shape.iter().product();
    let mut items = Vec::with_capacity(count as usize);
    let mut raw = vec![0u8; item_len * 2];
    for _ in 0..count {
        r.read_exact_or(&mut raw, "grid values")?;
        let values: Vec<u16> = raw
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        items.push(CategoricalGrid::new(shape.clone(), k, values)?);
    }
    r.expect_eof()?;
    Dataset::new(items, split)
}

/// Loads an IDX image file (the MNIST container format) as binary grids.
///
/// Each pixel `p` maps to class 1 iff `p/255 ≥ threshold`, else class 0;
/// images become `(1, H, W)` grids with K = 2.
pub fn load_idx(path: &Path, threshold: f64, split: Split) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    let magic = r.read_u32_be("IDX magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::parse(
            0,
            format!("bad IDX magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = r.read_u32_be("image count")? as usize;
    let height = r.read_u32_be("image height")? as usize;
    let width = r.read_u32_be("image width")? as usize;
    if count == 0 || height == 0 || width == 0 {
        return Err(r.fail(format!(
            "degenerate IDX dimensions: {count} x {height} x {width}"
        )));
    }
    let mut items = Vec::with_capacity(count);
    let mut raw = vec![0u8; height * width];
    for _ in 0..count {
        r.read_exact_or(&mut raw, "image pixels")?;
        let values: Vec<u16> = raw
            .iter()
            .map(|&p| u16::from(f64::from(p) / 255.0 >= threshold))
            .collect();
        items.push(CategoricalGrid::new(vec![1, height, width], 2, values)?);
    }
    r.expect_eof()?;
    Dataset::new(items, split)
}

/// Number of bins per coordinate in the toy dataset.
pub const TOY_BINS: u32 = 91;
/// Flat shape of each toy sample.
pub const TOY_SHAPE: [usize; 1] = [2];

const TOY_RADIUS: f64 = 2.0;
const TOY_SIGMA: f64 = 0.1;
const TOY_RANGE: f64 = 4.0;

/// Maps a real coordinate to one of [`TOY_BINS`] uniform bins over
/// `[-4, 4]`: clip, then `floor((v+4)/8 · 91)` clamped to 90.
pub fn quantize_coord(v: f64) -> u16 {
    let c = v.clamp(-TOY_RANGE, TOY_RANGE);
    let bin = ((c + TOY_RANGE) / (2.0 * TOY_RANGE) * f64::from(TOY_BINS)).floor();
    (bin as i64).clamp(0, i64::from(TOY_BINS) - 1) as u16
}

/// Draws `n` samples from a mixture of 8 Gaussians (means on a circle of
/// radius 2 at angles 2πk/8, σ = 0.1 per coordinate), quantized to 91 bins
/// per coordinate. Deterministic given `seed`.
pub fn sample_eight_gaussians(n: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TOY_SIGMA).expect("valid sigma");
    let items = (0..n)
        .map(|_| {
            let k = rng.random_range(0..8u32);
            let angle = 2.0 * std::f64::consts::PI * f64::from(k) / 8.0;
            let x = TOY_RADIUS * angle.cos() + noise.sample(&mut rng);
            let y = TOY_RADIUS * angle.sin() + noise.sample(&mut rng);
            CategoricalGrid::new(TOY_SHAPE.to_vec(), TOY_BINS, vec![
                quantize_coord(x),
                quantize_coord(y),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::BigEndian;
    use proptest::prelude::*;

    fn grid(shape: &[usize], k: u32, values: &[u16]) -> CategoricalGrid {
        CategoricalGrid::new(shape.to_vec(), k, values.to_vec()).unwrap()
    }

    #[test]
    fn grid_validates_shape_and_classes() {
        assert!(CategoricalGrid::new(vec![2, 2], 4, vec![0; 4]).is_err()); // rank 2
        assert!(CategoricalGrid::new(vec![3], 4, vec![0, 1]).is_err()); // length
        assert!(CategoricalGrid::new(vec![2], 4, vec![0, 4]).is_err()); // class ≥ K
        assert!(CategoricalGrid::new(vec![0], 4, vec![]).is_err()); // zero dim
        assert!(CategoricalGrid::new(vec![2], 0, vec![0, 0]).is_err()); // K = 0
        let g = grid(&[1, 2, 2], 8, &[0, 7, 3, 3]);
        assert_eq!(g.dims3().unwrap(), (1, 2, 2));
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn dataset_requires_homogeneous_nonempty_items() {
        assert!(Dataset::new(vec![], Split::Train).is_err());
        let a = grid(&[2], 4, &[0, 1]);
        let b = grid(&[2], 5, &[0, 1]);
        assert!(Dataset::new(vec![a.clone(), b], Split::Train).is_err());
        let ds = Dataset::new(vec![a.clone(), a], Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.split(), Split::Test);
    }

    #[test]
    fn grid_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ddfg");
        let ds = Dataset::new(vec![grid(&[1, 2, 2], 8, &[0, 7, 3, 3])], Split::Train).unwrap();
        save_grids(&ds, &path).unwrap();
        let back = load_grids(&path, Split::Train).unwrap();
        assert_eq!(back.items(), ds.items());
        assert_eq!(back.num_classes(), 8);
    }

    #[test]
    fn grid_file_round_trip_many_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let items: Vec<_> = (0..1000)
            .map(|_| {
                let values: Vec<u16> = (0..12).map(|_| rng.random_range(0..37)).collect();
                grid(&[3, 2, 2], 37, &values)
            })
            .collect();
        let ds = Dataset::new(items, Split::Valid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("many.ddfg");
        save_grids(&ds, &path).unwrap();
        let back = load_grids(&path, Split::Valid).unwrap();
        assert_eq!(back.items(), ds.items());
    }

    #[test]
    fn zero_item_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ddfg");
        let mut f = File::create(&path).unwrap();
        f.write_all(&GRID_MAGIC).unwrap();
        f.write_u16::<LittleEndian>(GRID_VERSION).unwrap();
        f.write_u32::<LittleEndian>(4).unwrap();
        f.write_u8(1).unwrap();
        f.write_u32::<LittleEndian>(2).unwrap();
        f.write_u64::<LittleEndian>(0).unwrap(); // count = 0
        drop(f);
        let err = load_grids(&path, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "got {err:?}");
    }

    #[test]
    fn bad_magic_version_truncation_and_trailing_bytes_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(vec![grid(&[2], 4, &[1, 2])], Split::Train).unwrap();
        let path = dir.path().join("good.ddfg");
        save_grids(&ds, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("magic.ddfg");
        let mut bytes = good.clone();
        bytes[0] = b'X';
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(
            load_grids(&bad_magic, Split::Train).unwrap_err(),
            Error::Format(_)
        ));

        let bad_version = dir.path().join("version.ddfg");
        let mut bytes = good.clone();
        bytes[4] = 99;
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(
            load_grids(&bad_version, Split::Train).unwrap_err(),
            Error::Format(_)
        ));

        let truncated = dir.path().join("short.ddfg");
        std::fs::write(&truncated, &good[..good.len() - 1]).unwrap();
        match load_grids(&truncated, Split::Train).unwrap_err() {
            Error::Parse { offset, .. } => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }

        let trailing = dir.path().join("long.ddfg");
        let mut bytes = good;
        bytes.push(0);
        std::fs::write(&trailing, &bytes).unwrap();
        assert!(matches!(
            load_grids(&trailing, Split::Train).unwrap_err(),
            Error::Parse { .. }
        ));
    }

    proptest! {
        #[test]
        fn prop_save_load_round_trip(
            k in 1u32..300,
            rank1 in proptest::bool::ANY,
            dims in proptest::collection::vec(1usize..4, 3),
            count in 1usize..8,
            seed in proptest::num::u64::ANY,
        ) {
            let shape = if rank1 { vec![dims[0] * dims[1] * dims[2]] } else { dims };
            let item_len: usize = shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items: Vec<_> = (0..count)
                .map(|_| {
                    let values: Vec<u16> =
                        (0..item_len).map(|_| rng.random_range(0..k) as u16).collect();
                    CategoricalGrid::new(shape.clone(), k, values).unwrap()
                })
                .collect();
            let ds = Dataset::new(items, Split::Train).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("prop.ddfg");
            save_grids(&ds, &path).unwrap();
            let back = load_grids(&path, Split::Train).unwrap();
            prop_assert_eq!(back.items(), ds.items());
        }
    }

    fn write_idx(path: &Path, images: &[Vec<u8>], h: u32, w: u32) {
        let mut f = File::create(path).unwrap();
        f.write_u32::<BigEndian>(IDX_IMAGE_MAGIC).unwrap();
        f.write_u32::<BigEndian>(images.len() as u32).unwrap();
        f.write_u32::<BigEndian>(h).unwrap();
        f.write_u32::<BigEndian>(w).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
    }

    #[test]
    fn idx_loader_binarizes_at_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.idx");
        // 128/255 ≈ 0.502 ≥ 0.5 → class 1; 127/255 ≈ 0.498 < 0.5 → class 0.
        write_idx(&path, &[vec![0, 128, 127, 255]], 2, 2);
        let ds = load_idx(&path, 0.5, Split::Train).unwrap();
        assert_eq!(ds.shape(), &[1, 2, 2]);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.items()[0].values(), &[0, 1, 0, 1]);
    }

    #[test]
    fn idx_loader_all_zero_image_gives_all_class_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.idx");
        write_idx(&path, &[vec![0; 784]], 28, 28);
        let ds = load_idx(&path, 0.5, Split::Train).unwrap();
        assert!(ds.items()[0].values().iter().all(|&v| v == 0));
    }

    #[test]
    fn idx_loader_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.idx");
        let mut f = File::create(&bad).unwrap();
        f.write_u32::<BigEndian>(0x0000_0801).unwrap(); // vector magic, not images
        drop(f);
        assert!(matches!(
            load_idx(&bad, 0.5, Split::Train).unwrap_err(),
            Error::Parse { .. }
        ));

        let short = dir.path().join("short.idx");
        let mut f = File::create(&short).unwrap();
        f.write_u32::<BigEndian>(IDX_IMAGE_MAGIC).unwrap();
        f.write_u32::<BigEndian>(1).unwrap();
        f.write_u32::<BigEndian>(2).unwrap();
        f.write_u32::<BigEndian>(2).unwrap();
        // header only: pixel payload missing
        drop(f);
        match load_idx(&short, 0.5, Split::Train).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 16),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn quantize_coord_hits_documented_bins() {
        assert_eq!(quantize_coord(-4.0), 0);
        assert_eq!(quantize_coord(4.0), 90);
        assert_eq!(quantize_coord(-10.0), 0); // clipped
        assert_eq!(quantize_coord(10.0), 90); // clipped
        // mean at angle 0 is the point (2, 0)
        assert_eq!(quantize_coord(2.0), 68);
        assert_eq!(quantize_coord(0.0), 45);
    }

    #[test]
    fn eight_gaussians_shape_and_determinism() {
        let a = sample_eight_gaussians(256, 9, Split::Train).unwrap();
        let b = sample_eight_gaussians(256, 9, Split::Train).unwrap();
        let c = sample_eight_gaussians(256, 10, Split::Train).unwrap();
        assert_eq!(a.items(), b.items());
        assert_ne!(a.items(), c.items());
        assert_eq!(a.shape(), &[2]);
        assert_eq!(a.num_classes(), TOY_BINS);
        assert!(sample_eight_gaussians(0, 1, Split::Train).is_err());
    }

    #[test]
    fn eight_gaussians_has_eight_symmetric_modes() {
        let n = 100_000;
        let ds = sample_eight_gaussians(n, 4, Split::Train).unwrap();
        // Assign each sample to the nearest of the 8 mode centers (in bin
        // space) and χ²-test the counts against uniform: χ²₇ at α = 0.01
        // has critical value 18.475.
        let centers: Vec<(f64, f64)> = (0..8)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * f64::from(k) / 8.0;
                (
                    f64::from(quantize_coord(TOY_RADIUS * angle.cos())),
                    f64::from(quantize_coord(TOY_RADIUS * angle.sin())),
                )
            })
            .collect();
        let mut counts = [0f64; 8];
        for item in ds.items() {
            let (x, y) = (f64::from(item.values()[0]), f64::from(item.values()[1]));
            let nearest = (0..8)
                .min_by(|&a, &b| {
                    let da = (x - centers[a].0).powi(2) + (y - centers[a].1).powi(2);
                    let db = (x - centers[b].0).powi(2) + (y - centers[b].1).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            counts[nearest] += 1.0;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c - expected).powi(2) / expected).sum();
        assert!(chi2 < 18.475, "χ² = {chi2}, counts = {counts:?}");
    }
}

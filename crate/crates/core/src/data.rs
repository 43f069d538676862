//! Dataset readers, augmentation and batch iteration.
//!
//! Expected layout under the data directory:
//!
//! ```text
//! mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
//! fashion-mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
//! cifar-10-batches-bin/data_batch_{1..5}.bin, test_batch.bin
//! cifar-100-binary/train.bin, test.bin
//! ```

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cresnet_tensor::{Scalar, Tensor};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATA_DIR_ENV: &str = "CRESNET_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl DatasetName {
    pub const ALL: [DatasetName; 4] = [
        DatasetName::Mnist,
        DatasetName::FashionMnist,
        DatasetName::Cifar10,
        DatasetName::Cifar100,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar100 => "cifar100",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetName::Cifar100 => 100,
            _ => 10,
        }
    }

    pub fn subdir(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Cifar10 => "cifar-10-batches-bin",
            DatasetName::Cifar100 => "cifar-100-binary",
        }
    }

    /// Files read for `split`, relative to the data directory. IDX files
    /// may also carry a `.gz` suffix.
    pub fn expected_files(self, split: Split) -> Vec<PathBuf> {
        let dir = Path::new(self.subdir());
        let names: Vec<String> = match (self, split) {
            (DatasetName::Mnist | DatasetName::FashionMnist, _) => {
                let prefix = if split == Split::Train { "train" } else { "t10k" };
                vec![
                    format!("{prefix}-images-idx3-ubyte"),
                    format!("{prefix}-labels-idx1-ubyte"),
                ]
            }
            (DatasetName::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (DatasetName::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
            (DatasetName::Cifar100, Split::Train) => vec!["train.bin".into()],
            (DatasetName::Cifar100, Split::Test) => vec!["test.bin".into()],
        };
        names.into_iter().map(|n| dir.join(n)).collect()
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|d| d.as_str()).collect();
                format!("unknown dataset `{s}`; expected one of {}", names.join(", "))
            })
    }
}

/// Images stored as `u8`, each `channels x height x width`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` items.
    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            name: self.name.clone(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, 0, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX file.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::format(path, bytes.len() as u64, "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(path, 0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(path, 2, format!("element type 0x{:02x} is not unsigned byte", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::format(path, bytes.len() as u64, format!("truncated header for {ndim} dimensions")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let want = dims.iter().product::<usize>();
    let have = bytes.len() - header;
    if have != want {
        let offset = (header + have.min(want)) as u64;
        return Err(Error::format(
            path,
            offset,
            format!("dimensions {dims:?} need {want} data bytes, found {have}"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    parse_idx(&read_maybe_gz(path)?, path)
}

/// Pairs an image file (`0x00000803`) with a label file (`0x00000801`).
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    name: &str,
    split: Split,
    class_count: usize,
) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let img = read_idx(ip)?;
    let lab = read_idx(lp)?;
    let [n, h, w] = img.dims[..] else {
        return Err(Error::format(ip, 3, format!("image file has {} dimensions, expected 3", img.dims.len())));
    };
    let [m] = lab.dims[..] else {
        return Err(Error::format(lp, 3, format!("label file has {} dimensions, expected 1", lab.dims.len())));
    };
    if n != m {
        return Err(Error::format(lp, 4, format!("{m} labels for {n} images")));
    }
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    if let Some(i) = labels.iter().position(|&l| l >= class_count) {
        return Err(Error::format(lp, (8 + i) as u64, format!("label {} outside [0, {class_count})", labels[i])));
    }
    Ok(Dataset {
        name: name.into(),
        split,
        channels: 1,
        height: h,
        width: w,
        class_count,
        images: img.data,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 3073,
            CifarVariant::Cifar100 => 3074,
        }
    }
}

/// Reads CIFAR binary records: label byte(s) then 1024 R, 1024 G, 1024 B.
/// CIFAR-100 keeps the fine label.
pub fn load_cifar(paths: &[PathBuf], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let rec = variant.record_len();
    let label_bytes = rec - 3072;
    let classes = match variant {
        CifarVariant::Cifar10 => 10,
        CifarVariant::Cifar100 => 100,
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % rec != 0 {
            return Err(Error::format(
                path,
                (bytes.len() - bytes.len() % rec) as u64,
                format!("length {} is not a multiple of the {rec}-byte record", bytes.len()),
            ));
        }
        for (i, r) in bytes.chunks_exact(rec).enumerate() {
            let label = r[label_bytes - 1] as usize;
            if label >= classes {
                return Err(Error::format(path, (i * rec + label_bytes - 1) as u64, format!("label {label} outside [0, {classes})")));
            }
            labels.push(label);
            images.extend_from_slice(&r[label_bytes..]);
        }
    }
    Ok(Dataset {
        name: match variant {
            CifarVariant::Cifar10 => "cifar10".into(),
            CifarVariant::Cifar100 => "cifar100".into(),
        },
        split,
        channels: 3,
        height: 32,
        width: 32,
        class_count: classes,
        images,
        labels,
    })
}

/// Resolves `expected_files` under `dir`, accepting `.gz` for IDX files.
fn locate(dir: &Path, name: DatasetName, split: Split) -> Result<Vec<PathBuf>> {
    let expected = name.expected_files(split);
    let mut found = Vec::with_capacity(expected.len());
    for rel in &expected {
        let plain = dir.join(rel);
        let gz = dir.join(format!("{}.gz", rel.display()));
        if plain.is_file() {
            found.push(plain);
        } else if matches!(name, DatasetName::Mnist | DatasetName::FashionMnist) && gz.is_file() {
            found.push(gz);
        } else {
            let list: Vec<_> = expected.iter().map(|p| dir.join(p).display().to_string()).collect();
            return Err(Error::format(
                plain,
                0,
                format!("file not found; {name} {split:?} needs: {}", list.join(", ")),
            ));
        }
    }
    Ok(found)
}

pub fn load(dir: impl AsRef<Path>, name: DatasetName, split: Split) -> Result<Dataset> {
    let files = locate(dir.as_ref(), name, split)?;
    match name {
        DatasetName::Mnist | DatasetName::FashionMnist => load_idx(&files[0], &files[1], name.as_str(), split, 10),
        DatasetName::Cifar10 => load_cifar(&files, CifarVariant::Cifar10, split),
        DatasetName::Cifar100 => load_cifar(&files, CifarVariant::Cifar100, split),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub resize_to: [usize; 2],
    pub pad_to: [usize; 2],
    pub crop: [usize; 2],
    pub hflip_prob: f64,
    /// Per output channel, on the `[0, 1]` scale.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Output channels; single-channel images are replicated to match.
    pub channels: usize,
}

impl AugmentConfig {
    pub fn for_dataset(name: DatasetName) -> Self {
        let (mean, std) = match name {
            DatasetName::Mnist => (vec![0.1307; 3], vec![0.3081; 3]),
            DatasetName::FashionMnist => (vec![0.2860; 3], vec![0.3530; 3]),
            DatasetName::Cifar10 => (vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616]),
            DatasetName::Cifar100 => (vec![0.5071, 0.4865, 0.4409], vec![0.2673, 0.2564, 0.2762]),
        };
        // Mirrored digits are not label preserving.
        let hflip_prob = if name == DatasetName::Mnist { 0.0 } else { 0.5 };
        Self {
            resize_to: [32, 32],
            pad_to: [40, 40],
            crop: [32, 32],
            hflip_prob,
            mean,
            std,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augmentation: {m}")));
        if self.crop[0] > self.pad_to[0] || self.crop[1] > self.pad_to[1] {
            return bad("crop exceeds padded size");
        }
        if self.resize_to[0] > self.pad_to[0] || self.resize_to[1] > self.pad_to[1] {
            return bad("resize exceeds padded size");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob outside [0, 1]");
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return bad("mean/std length must equal channels");
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return bad("std must be positive");
        }
        Ok(())
    }
}

/// Random choices for one augmented image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Draw {
    let dy = rng.random_range(0..=cfg.pad_to[0] - cfg.crop[0]);
    let dx = rng.random_range(0..=cfg.pad_to[1] - cfg.crop[1]);
    let flip = rng.random_bool(cfg.hflip_prob);
    Draw { dy, dx, flip }
}

/// Nearest-neighbour resize, centered zero pad, crop at the drawn offset,
/// optional horizontal flip, then `(x / 255 - mean) / std`.
pub fn augment_with(image: &[u8], [c, h, w]: [usize; 3], cfg: &AugmentConfig, d: Draw) -> Vec<f32> {
    let [rh, rw] = cfg.resize_to;
    let [ch, cw] = cfg.crop;
    let top = (cfg.pad_to[0] - rh) / 2;
    let left = (cfg.pad_to[1] - rw) / 2;
    let mut out = Vec::with_capacity(cfg.channels * ch * cw);
    for oc in 0..cfg.channels {
        let plane = &image[(oc % c) * h * w..(oc % c + 1) * h * w];
        let (mean, std) = (cfg.mean[oc], cfg.std[oc]);
        for y in 0..ch {
            for x in 0..cw {
                let xs = if d.flip { cw - 1 - x } else { x };
                let (py, px) = (y + d.dy, xs + d.dx);
                let v = if py >= top && py < top + rh && px >= left && px < left + rw {
                    let sy = (py - top) * h / rh;
                    let sx = (px - left) * w / rw;
                    plane[sy * w + sx]
                } else {
                    0
                };
                out.push((v as f32 / 255.0 - mean) / std);
            }
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(image: &[u8], dims: [usize; 3], cfg: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    let d = draw(cfg, rng);
    augment_with(image, dims, cfg, d)
}

/// Test-time path: resize and normalize only.
pub fn normalize_only(image: &[u8], dims: [usize; 3], cfg: &AugmentConfig) -> Vec<f32> {
    let direct = AugmentConfig {
        pad_to: cfg.resize_to,
        crop: cfg.resize_to,
        ..cfg.clone()
    };
    augment_with(image, dims, &direct, Draw { dy: 0, dx: 0, flip: false })
}

/// Index batches covering `0..n` once, in seeded random order when a seed
/// is given. The last batch may be short.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    size: usize,
    pos: usize,
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(b)
    }
}

pub fn batches(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Batches {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Batches {
        order,
        size: batch_size,
        pos: 0,
    }
}

/// Stacks the chosen items into an `(N, C, H, W)` tensor, augmenting when
/// an rng is supplied.
pub fn make_batch<T: Scalar, R: Rng + ?Sized>(
    ds: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    mut rng: Option<&mut R>,
) -> (Tensor<T>, Vec<usize>) {
    let dims = [ds.channels, ds.height, ds.width];
    let per = cfg.channels * cfg.crop[0] * cfg.crop[1];
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        let img = match rng.as_deref_mut() {
            Some(r) => augment(ds.image(i), dims, cfg, r),
            None => normalize_only(ds.image(i), dims, cfg),
        };
        data.extend(img.into_iter().map(|v| T::from_f32(v).expect("finite pixel")));
    }
    let (h, w) = match rng {
        Some(_) => (cfg.crop[0], cfg.crop[1]),
        None => (cfg.resize_to[0], cfg.resize_to[1]),
    };
    let tensor = Tensor::new(vec![indices.len(), cfg.channels, h, w], data).expect("batch length matches shape");
    (tensor, indices.iter().map(|&i| ds.labels[i]).collect())
}

//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use cresnet::arch::{BlockKind, JumperKind};
use cresnet::blocks::{block_plan, Block, ConvBn};
use cresnet::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

/// NCHW array, kept separate from the library tensor on purpose.
#[derive(Debug, Clone, PartialEq)]
pub struct Nd {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Nd {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn random(shape: [usize; 4], rng: &mut impl Rng) -> Self {
        let data = (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { shape, data }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self { shape: [s[0], s[1], s[2], s[3]], data: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(self.shape.to_vec(), self.data.clone()).unwrap()
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn max_abs_diff(&self, other: &Nd) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Seven nested loops, no patch matrix.
pub fn direct_conv(x: &Nd, w: &[f64], out_ch: usize, k: usize, stride: usize, pad: usize) -> Nd {
    let [n, cin, h, wd] = x.shape;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut y = Nd::zeros([n, out_ch, ho, wo]);
    for b in 0..n {
        for co in 0..out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(b, ci, iy as usize, ix as usize) * w[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    y.data[((b * out_ch + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    y
}

/// Training-mode batch norm: batch mean, biased batch variance.
pub fn bn_train(x: &Nd, gamma: &[f64], beta: &[f64]) -> Nd {
    let [n, c, h, w] = x.shape;
    let m = (n * h * w) as f64;
    let mut y = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h * w).map(move |p| (b, p)))
            .map(|(b, p)| x.data[(b * c + ch) * h * w + p])
            .collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        for b in 0..n {
            for p in 0..h * w {
                let i = (b * c + ch) * h * w + p;
                y.data[i] = (x.data[i] - mean) / (var + EPS).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    y
}

pub fn relu(x: &Nd) -> Nd {
    Nd { shape: x.shape, data: x.data.iter().map(|v| v.max(0.0)).collect() }
}

pub fn add(a: &Nd, b: &Nd) -> Nd {
    assert_eq!(a.shape, b.shape, "oracle add shape mismatch");
    Nd { shape: a.shape, data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect() }
}

/// conv then (optionally) train-mode BN, reading weights out of the store.
pub fn unit(u: &ConvBn<f64>, store: &ParamStore<f64>, x: &Nd) -> Nd {
    let w = store.tensor(u.conv).data();
    let y = direct_conv(x, w, u.out_ch, u.kernel, u.stride, u.padding);
    match &u.norm {
        Some(n) => bn_train(&y, store.tensor(n.gamma).data(), store.tensor(n.beta).data()),
        None => y,
    }
}

fn p(u: &ConvBn<f64>, store: &ParamStore<f64>, x: &Nd) -> Nd {
    relu(&unit(u, store, x))
}

/// Block wiring written out by hand for each kind.
pub fn block_oracle(block: &Block<f64>, store: &ParamStore<f64>, x: &Nd) -> Nd {
    let l = &block.layers;
    let j = |i: usize, src: &Nd| match &block.jumpers[i].projection {
        Some(u) => unit(u, store, src),
        None => src.clone(),
    };
    match block.kind {
        BlockKind::BasicBlock => {
            let h = p(&l[0], store, x);
            relu(&add(&unit(&l[1], store, &h), &j(0, x)))
        }
        BlockKind::Bottleneck => {
            let h1 = p(&l[0], store, x);
            let h2 = p(&l[1], store, &h1);
            relu(&add(&unit(&l[2], store, &h2), &j(0, x)))
        }
        BlockKind::CrossBlock | BlockKind::CrossBottleneck3 => {
            let o1 = p(&l[0], store, x);
            let o2 = add(&p(&l[1], store, &o1), &j(0, x));
            add(&p(&l[2], store, &o2), &j(1, &o1))
        }
        BlockKind::CrossBottleneck6 => {
            let o1 = p(&l[0], store, x);
            let o2 = p(&l[1], store, &o1);
            let o3 = p(&l[2], store, &o2);
            let o4 = add(&p(&l[3], store, &o3), &j(0, x));
            let o5 = add(&p(&l[4], store, &o4), &j(1, &o2));
            add(&p(&l[5], store, &o5), &j(2, &o3))
        }
    }
}

/// Every legal solid/dashed assignment for one block, given which
/// positions are forced dashed.
pub fn masks(forced: &[bool]) -> Vec<Vec<JumperKind>> {
    let n = forced.len();
    (0..1usize << n)
        .map(|bits| {
            (0..n)
                .map(|i| if bits >> i & 1 == 1 { JumperKind::Dashed } else { JumperKind::Solid })
                .collect::<Vec<_>>()
        })
        .filter(|m| m.iter().zip(forced).all(|(k, &f)| !f || *k == JumperKind::Dashed))
        .collect()
}

/// A standalone block with randomized gamma/beta so BN is not the identity.
pub struct ToyBlock {
    pub block: Block<f64>,
    pub store: ParamStore<f64>,
    pub in_ch: usize,
}

pub struct ToyShape {
    pub kind: BlockKind,
    pub in_ch: usize,
    pub width: usize,
    pub stride: usize,
    pub hw: usize,
}

/// Which jumper positions of a toy block change shape.
pub fn forced_positions(s: &ToyShape) -> Vec<bool> {
    let plan = block_plan(
        s.kind,
        s.in_ch,
        s.kind.channel_plan(s.width),
        s.stride,
        &vec![JumperKind::Dashed; s.kind.jumper_count()],
        true,
        [s.hw, s.hw],
    )
    .unwrap();
    plan.jumpers.iter().map(|j| j.in_ch != j.out_ch || j.stride != 1).collect()
}

pub fn toy_block(s: &ToyShape, mask: &[JumperKind], projection_bn: bool, seed: u64) -> ToyBlock {
    let plan = block_plan(s.kind, s.in_ch, s.kind.channel_plan(s.width), s.stride, mask, projection_bn, [s.hw, s.hw])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = Block::new(&plan, &mut store, &mut rng).unwrap();
    for p in store.iter_mut() {
        if p.name.ends_with("bn.gamma") || p.name.ends_with("bn.beta") {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(0.5..1.5) - if p.name.ends_with("beta") { 1.0 } else { 0.0 };
            }
        }
    }
    ToyBlock { block, store, in_ch: s.in_ch }
}

/// Toy geometries covering every kind with and without a stride.
pub fn toy_shapes() -> Vec<ToyShape> {
    let mut v = Vec::new();
    for kind in BlockKind::ALL {
        let out = *kind.channel_plan(2).last().unwrap();
        for (in_ch, stride) in [(out, 1), (out + 1, 1), (out, 2)] {
            v.push(ToyShape { kind, in_ch, width: 2, stride, hw: 4 });
        }
    }
    v
}

/// A two-stage network narrow enough to train in milliseconds.
pub fn tiny_spec(kind: BlockKind) -> cresnet::ArchitectureSpec {
    use cresnet::arch::{assign_jumpers, HeadSpec, StageSpec, StemLayer};
    let mut spec = cresnet::ArchitectureSpec {
        name: format!("tiny_{kind}"),
        input_size: [8, 8],
        in_channels: 3,
        stem: vec![StemLayer::Conv { out_ch: 4, kernel: 3, stride: 1, padding: 1 }],
        stages: vec![
            StageSpec { block: kind, repeats: 1, channels: kind.channel_plan(4), stride: 1 },
            StageSpec { block: kind, repeats: 1, channels: kind.channel_plan(8), stride: 2 },
        ],
        head: HeadSpec::default(),
        jumpers: Vec::new(),
    };
    assign_jumpers(&mut spec, true, |s| if s.index == 1 { JumperKind::Dashed } else { JumperKind::Solid }).unwrap();
    spec
}

/// Single-channel 8x8 images: class 0 is bright on top, class 1 at the
/// bottom, plus noise. Flips are horizontal so the classes survive them.
pub fn synthetic(n: usize, seed: u64) -> cresnet::data::Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        for y in 0..8 {
            for _ in 0..8 {
                let lit = (y < 4) == (label == 0);
                let base = if lit { 170.0 } else { 40.0 };
                images.push((base + rng.random_range(-40.0..40.0f64)) as u8);
            }
        }
        labels.push(label);
    }
    cresnet::data::Dataset {
        name: "synthetic".into(),
        split: cresnet::data::Split::Train,
        channels: 1,
        height: 8,
        width: 8,
        class_count: 2,
        images,
        labels,
    }
}

pub fn tiny_aug() -> cresnet::data::AugmentConfig {
    cresnet::data::AugmentConfig {
        resize_to: [8, 8],
        pad_to: [10, 10],
        crop: [8, 8],
        hflip_prob: 0.5,
        mean: vec![0.4; 3],
        std: vec![0.3; 3],
        channels: 3,
    }
}

pub fn tiny_config(epochs: usize, seed: u64) -> cresnet::TrainConfig {
    cresnet::TrainConfig {
        epochs,
        seed,
        batch_size: 8,
        lr0: 0.05,
        lr_decay_every: 2,
        train_subset: None,
        test_subset: None,
        ..cresnet::TrainConfig::desk()
    }
}

/// `CRESNET_DATA_DIR`, else `data/` at the workspace root, if MNIST is there.
pub fn mnist_dir() -> Option<std::path::PathBuf> {
    let dir = std::env::var_os(cresnet::data::DATA_DIR_ENV)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    cresnet::data::load(&dir, cresnet::data::DatasetName::Mnist, cresnet::data::Split::Test)
        .is_ok()
        .then_some(dir)
}

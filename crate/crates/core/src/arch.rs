//! Declarative network description and its geometric plan.
//!
//! An [`ArchitectureSpec`] lists the stem, the stages and an explicit
//! per-jumper mask. [`plan`] resolves it into concrete conv layers and
//! jumpers with channel counts and spatial sizes, or reports every broken
//! invariant it finds.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    BasicBlock,
    Bottleneck,
    CrossBlock,
    CrossBottleneck3,
    CrossBottleneck6,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] = [
        BlockKind::BasicBlock,
        BlockKind::Bottleneck,
        BlockKind::CrossBlock,
        BlockKind::CrossBottleneck3,
        BlockKind::CrossBottleneck6,
    ];

    pub fn kernels(self) -> &'static [usize] {
        match self {
            BlockKind::BasicBlock => &[3, 3],
            BlockKind::Bottleneck | BlockKind::CrossBottleneck3 => &[1, 3, 1],
            BlockKind::CrossBlock => &[3, 3, 3],
            BlockKind::CrossBottleneck6 => &[1, 3, 1, 1, 3, 1],
        }
    }

    pub fn layer_count(self) -> usize {
        self.kernels().len()
    }

    /// Index of the layer carrying the block stride (the first 3x3).
    pub fn stride_layer(self) -> usize {
        match self {
            BlockKind::BasicBlock | BlockKind::CrossBlock => 0,
            _ => 1,
        }
    }

    /// `(source, destination)` taps per jumper. Tap 0 is the block input and
    /// tap `i` the output of layer `i - 1`.
    pub fn jumper_taps(self) -> &'static [(usize, usize)] {
        match self {
            BlockKind::BasicBlock => &[(0, 2)],
            BlockKind::Bottleneck => &[(0, 3)],
            BlockKind::CrossBlock | BlockKind::CrossBottleneck3 => &[(0, 2), (1, 3)],
            BlockKind::CrossBottleneck6 => &[(0, 4), (2, 5), (3, 6)],
        }
    }

    pub fn jumper_count(self) -> usize {
        self.jumper_taps().len()
    }

    /// Cross blocks add jumpers after the ReLU; the baselines add before the
    /// final ReLU.
    pub fn adds_after_relu(self) -> bool {
        !matches!(self, BlockKind::BasicBlock | BlockKind::Bottleneck)
    }

    /// Channel plan for base width `m`.
    pub fn channel_plan(self, m: usize) -> Vec<usize> {
        match self {
            BlockKind::BasicBlock => vec![m, m],
            BlockKind::Bottleneck | BlockKind::CrossBottleneck3 => vec![m, m, 4 * m],
            BlockKind::CrossBlock => vec![m, m, m],
            BlockKind::CrossBottleneck6 => vec![m, 2 * m, 2 * m, m, 2 * m, 2 * m],
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::BasicBlock => "basic_block",
            BlockKind::Bottleneck => "bottleneck",
            BlockKind::CrossBlock => "cross_block",
            BlockKind::CrossBottleneck3 => "cross_bottleneck3",
            BlockKind::CrossBottleneck6 => "cross_bottleneck6",
        })
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[serde(rename_all = "snake_case")]
pub enum JumperKind {
    Solid,
    Dashed,
}

impl fmt::Display for JumperKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JumperKind::Solid => "solid",
            JumperKind::Dashed => "dashed",
        })
    }
}

/// Stem conv layers are full WBR units (conv, BN, ReLU).
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StemLayer {
    Conv {
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub block: BlockKind,
    pub repeats: usize,
    /// Output channels of each layer in one block.
    pub channels: Vec<usize>,
    pub stride: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadPool {
    #[default]
    GlobalAvg,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq, Default)]
pub struct HeadSpec {
    pub pool: HeadPool,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct JumperEntry {
    pub stage: usize,
    pub block: usize,
    pub index: usize,
    pub kind: JumperKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Whether a dashed projection is followed by batch normalization.
    /// Absent means yes; must be absent on solid jumpers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<bool>,
}

impl JumperEntry {
    pub fn projection_bn(&self) -> bool {
        self.kind == JumperKind::Dashed && self.bn.unwrap_or(true)
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub name: String,
    /// `[height, width]`
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub stem: Vec<StemLayer>,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub head: HeadSpec,
    pub jumpers: Vec<JumperEntry>,
}

impl ArchitectureSpec {
    pub fn jumper_count(&self) -> usize {
        self.stages.iter().map(|s| s.repeats * s.block.jumper_count()).sum()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize spec: {e}")))
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

pub fn spec_from_file(path: impl AsRef<Path>) -> Result<ArchitectureSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ArchitectureSpec::from_toml(&text).map_err(|e| Error::SpecParse {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    })
}

pub fn spec_to_file(spec: &ArchitectureSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, spec.to_toml()?).map_err(|e| Error::io(path, e))
}

/// One broken invariant, located in the spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl Violation {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConvPlan {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub bn: bool,
}

impl ConvPlan {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    /// Conv weights plus the BN affine pair.
    pub fn params(&self) -> u64 {
        let w = (self.kernel * self.kernel * self.in_ch * self.out_ch) as u64;
        w + if self.bn { 2 * self.out_ch as u64 } else { 0 }
    }

    /// Multiply-accumulates.
    pub fn flops(&self) -> u64 {
        (self.kernel * self.kernel * self.in_ch * self.out_ch) as u64 * (self.out_h * self.out_w) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum StemPlan {
    Conv(ConvPlan),
    MaxPool {
        name: String,
        kernel: usize,
        stride: usize,
        padding: usize,
        channels: usize,
        out_h: usize,
        out_w: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JumperPlan {
    pub name: String,
    pub index: usize,
    pub src: usize,
    pub dest: usize,
    pub kind: JumperKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// The 1x1 projection of a dashed jumper.
    pub projection: Option<ConvPlan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockPlan {
    pub name: String,
    pub stage: usize,
    pub block: usize,
    pub kind: BlockKind,
    pub layers: Vec<ConvPlan>,
    pub jumpers: Vec<JumperPlan>,
}

impl BlockPlan {
    pub fn out_ch(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_ch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Plan {
    pub stem: Vec<StemPlan>,
    pub blocks: Vec<BlockPlan>,
    /// `(channels, height, width)` after the stem and after each stage.
    pub stage_shapes: Vec<(usize, usize, usize)>,
    pub features: usize,
}

impl Plan {
    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvPlan> {
        let stem = self.stem.iter().filter_map(|s| match s {
            StemPlan::Conv(c) => Some(c),
            StemPlan::MaxPool { .. } => None,
        });
        stem.chain(self.blocks.iter().flat_map(|b| b.layers.iter()))
    }

    pub fn jumpers(&self) -> impl Iterator<Item = &JumperPlan> {
        self.blocks.iter().flat_map(|b| b.jumpers.iter())
    }
}

/// A jumper position implied by the stages, before any mask is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JumperSlot {
    pub stage: usize,
    pub block: usize,
    pub index: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl JumperSlot {
    /// Whether shapes force a projection here.
    pub fn forced(&self) -> bool {
        self.in_ch != self.out_ch || self.stride != 1
    }

    pub fn entry(&self, kind: JumperKind, bn: bool) -> JumperEntry {
        JumperEntry {
            stage: self.stage,
            block: self.block,
            index: self.index,
            kind,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            stride: self.stride,
            bn: (kind == JumperKind::Dashed && !bn).then_some(false),
        }
    }
}

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

struct Skeleton {
    stem: Vec<StemPlan>,
    blocks: Vec<(BlockPlan, Vec<JumperSlot>)>,
    stage_shapes: Vec<(usize, usize, usize)>,
}

fn skeleton(spec: &ArchitectureSpec, out: &mut Vec<Violation>) -> Option<Skeleton> {
    let start = out.len();
    let [h0, w0] = spec.input_size;
    if h0 == 0 || w0 == 0 {
        out.push(Violation::new("input_size", "height and width must be positive"));
    }
    if spec.in_channels == 0 {
        out.push(Violation::new("in_channels", "must be positive"));
    }
    if spec.stages.is_empty() {
        out.push(Violation::new("stages", "at least one stage is required"));
    }
    if out.len() > start {
        return None;
    }

    let (mut c, mut h, mut w) = (spec.in_channels, h0, w0);
    let mut stem = Vec::new();
    for (i, layer) in spec.stem.iter().enumerate() {
        let loc = format!("stem {i}");
        match *layer {
            StemLayer::Conv {
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if out_ch == 0 || kernel == 0 || stride == 0 {
                    out.push(Violation::new(loc, "out_ch, kernel and stride must be positive"));
                    return None;
                }
                let (Some(oh), Some(ow)) = (conv_out(h, kernel, stride, padding), conv_out(w, kernel, stride, padding)) else {
                    out.push(Violation::new(loc, format!("kernel {kernel} exceeds padded input {h}x{w}")));
                    return None;
                };
                stem.push(StemPlan::Conv(ConvPlan {
                    name: format!("stem.{i}"),
                    in_ch: c,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    in_h: h,
                    in_w: w,
                    out_h: oh,
                    out_w: ow,
                    bn: true,
                }));
                (c, h, w) = (out_ch, oh, ow);
            }
            StemLayer::MaxPool { kernel, stride, padding } => {
                let valid = kernel > 0 && stride > 0 && padding < kernel;
                let dims = (conv_out(h, kernel, stride, padding), conv_out(w, kernel, stride, padding));
                let (true, (Some(oh), Some(ow))) = (valid, dims) else {
                    out.push(Violation::new(loc, format!("invalid pooling window {kernel}/{stride}/{padding} on {h}x{w}")));
                    return None;
                };
                stem.push(StemPlan::MaxPool {
                    name: format!("stem.{i}"),
                    kernel,
                    stride,
                    padding,
                    channels: c,
                    out_h: oh,
                    out_w: ow,
                });
                (h, w) = (oh, ow);
            }
        }
    }

    let mut stage_shapes = vec![(c, h, w)];
    let mut blocks = Vec::new();
    for (s, stage) in spec.stages.iter().enumerate() {
        let loc = format!("stage {s}");
        let kernels = stage.block.kernels();
        let before = out.len();
        if stage.repeats == 0 {
            out.push(Violation::new(&loc, "repeats must be at least 1"));
        }
        if stage.channels.len() != kernels.len() {
            out.push(Violation::new(
                &loc,
                format!(
                    "{} needs {} channel entries, found {}",
                    stage.block,
                    kernels.len(),
                    stage.channels.len()
                ),
            ));
        }
        if stage.channels.contains(&0) {
            out.push(Violation::new(&loc, "channel counts must be positive"));
        }
        if !matches!(stage.stride, 1 | 2) {
            out.push(Violation::new(&loc, format!("stride must be 1 or 2, found {}", stage.stride)));
        }
        if out.len() > before {
            return None;
        }
        for b in 0..stage.repeats {
            let stride = if b == 0 { stage.stride } else { 1 };
            let name = format!("stages.{s}.{b}");
            let mut taps = vec![(c, h, w)];
            let mut layers = Vec::with_capacity(kernels.len());
            for (i, (&k, &oc)) in kernels.iter().zip(&stage.channels).enumerate() {
                let st = if i == stage.block.stride_layer() { stride } else { 1 };
                let (ic, ih, iw) = *taps.last().unwrap();
                let pad = k / 2;
                let (Some(oh), Some(ow)) = (conv_out(ih, k, st, pad), conv_out(iw, k, st, pad)) else {
                    out.push(Violation::new(format!("{loc} block {b}"), "spatial size collapsed"));
                    return None;
                };
                layers.push(ConvPlan {
                    name: format!("{name}.wbr{i}"),
                    in_ch: ic,
                    out_ch: oc,
                    kernel: k,
                    stride: st,
                    padding: pad,
                    in_h: ih,
                    in_w: iw,
                    out_h: oh,
                    out_w: ow,
                    bn: true,
                });
                taps.push((oc, oh, ow));
            }
            let slots = stage
                .block
                .jumper_taps()
                .iter()
                .enumerate()
                .map(|(j, &(src, dest))| JumperSlot {
                    stage: s,
                    block: b,
                    index: j,
                    in_ch: taps[src].0,
                    out_ch: taps[dest].0,
                    stride: layers[src..dest].iter().map(|l| l.stride).product(),
                })
                .collect();
            (c, h, w) = *taps.last().unwrap();
            blocks.push((
                BlockPlan {
                    name,
                    stage: s,
                    block: b,
                    kind: stage.block,
                    layers,
                    jumpers: Vec::new(),
                },
                slots,
            ));
        }
        stage_shapes.push((c, h, w));
    }
    Some(Skeleton {
        stem,
        blocks,
        stage_shapes,
    })
}

/// Jumper positions implied by the stages, in mask order.
pub fn jumper_slots(spec: &ArchitectureSpec) -> std::result::Result<Vec<JumperSlot>, Vec<Violation>> {
    let mut v = Vec::new();
    match skeleton(spec, &mut v) {
        Some(sk) => Ok(sk.blocks.into_iter().flat_map(|(_, s)| s).collect()),
        None => Err(v),
    }
}

/// Resolves a spec into concrete layers, or every violation found.
pub fn plan(spec: &ArchitectureSpec) -> std::result::Result<Plan, Vec<Violation>> {
    let mut violations = Vec::new();
    let Some(sk) = skeleton(spec, &mut violations) else {
        return Err(violations);
    };
    let expected: usize = sk.blocks.iter().map(|(_, s)| s.len()).sum();
    if spec.jumpers.len() != expected {
        violations.push(Violation::new(
            "jumpers",
            format!("mask has {} entries, expected {expected}", spec.jumpers.len()),
        ));
    }

    let mut entries = spec.jumpers.iter();
    let mut blocks = Vec::with_capacity(sk.blocks.len());
    for (mut block, slots) in sk.blocks {
        for slot in slots {
            let loc = format!("stage {} block {} jumper {}", slot.stage, slot.block, slot.index);
            let Some(e) = entries.next() else { break };
            if (e.stage, e.block, e.index) != (slot.stage, slot.block, slot.index) {
                violations.push(Violation::new(
                    &loc,
                    format!("mask entry is labelled stage {} block {} jumper {}", e.stage, e.block, e.index),
                ));
                continue;
            }
            if (e.in_ch, e.out_ch, e.stride) != (slot.in_ch, slot.out_ch, slot.stride) {
                violations.push(Violation::new(
                    &loc,
                    format!(
                        "mask declares {}->{} stride {}, graph has {}->{} stride {}",
                        e.in_ch, e.out_ch, e.stride, slot.in_ch, slot.out_ch, slot.stride
                    ),
                ));
                continue;
            }
            if e.kind == JumperKind::Solid {
                if e.in_ch != e.out_ch {
                    violations.push(Violation::new(
                        &loc,
                        format!("solid jumper requires matching channels ({} -> {})", e.in_ch, e.out_ch),
                    ));
                    continue;
                }
                if e.stride != 1 {
                    violations.push(Violation::new(&loc, format!("solid jumper cannot span stride {}", e.stride)));
                    continue;
                }
                if e.bn.is_some() {
                    violations.push(Violation::new(&loc, "solid jumper carries no projection to normalize"));
                    continue;
                }
            }
            let (src, dest) = block.kind.jumper_taps()[slot.index];
            let tap_in = if src == 0 {
                let first = &block.layers[0];
                (first.in_h, first.in_w)
            } else {
                let l = &block.layers[src - 1];
                (l.out_h, l.out_w)
            };
            let tap_out = &block.layers[dest - 1];
            let name = format!("{}.jumper{}", block.name, slot.index);
            let projection = (e.kind == JumperKind::Dashed).then(|| ConvPlan {
                name: name.clone(),
                in_ch: e.in_ch,
                out_ch: e.out_ch,
                kernel: 1,
                stride: e.stride,
                padding: 0,
                in_h: tap_in.0,
                in_w: tap_in.1,
                out_h: tap_out.out_h,
                out_w: tap_out.out_w,
                bn: e.projection_bn(),
            });
            block.jumpers.push(JumperPlan {
                name,
                index: slot.index,
                src,
                dest,
                kind: e.kind,
                in_ch: e.in_ch,
                out_ch: e.out_ch,
                stride: e.stride,
                projection,
            });
        }
        blocks.push(block);
    }

    if !violations.is_empty() {
        return Err(violations);
    }
    let features = sk.stage_shapes.last().map_or(0, |s| s.0);
    Ok(Plan {
        stem: sk.stem,
        blocks,
        stage_shapes: sk.stage_shapes,
        features,
    })
}

/// Every broken invariant; empty iff the spec can be built.
pub fn validate(spec: &ArchitectureSpec) -> Vec<Violation> {
    plan(spec).err().unwrap_or_default()
}

/// Fills `spec.jumpers` from its stages, choosing each kind with `choose`.
/// Positions whose shapes force a projection are always dashed.
pub fn assign_jumpers(
    spec: &mut ArchitectureSpec,
    bn: bool,
    mut choose: impl FnMut(&JumperSlot) -> JumperKind,
) -> std::result::Result<(), Vec<Violation>> {
    let slots = jumper_slots(spec)?;
    spec.jumpers = slots
        .iter()
        .map(|slot| {
            let kind = if slot.forced() { JumperKind::Dashed } else { choose(slot) };
            slot.entry(kind, bn)
        })
        .collect();
    Ok(())
}

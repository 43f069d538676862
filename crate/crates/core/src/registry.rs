//! Built-in architectures.
//!
//! All networks share the 32x32 stem (two 3x3/64 convs) and four stages at
//! widths 64, 128, 256, 512 with strides 1, 2, 2, 2. Masks marked
//! [`SpecStatus::Reconstructed`] only satisfy their published dashed-jumper
//! counts; override them through a spec file if needed.

use serde::Serialize;

use crate::arch::{assign_jumpers, ArchitectureSpec, BlockKind, HeadSpec, JumperKind, JumperSlot, StageSpec, StemLayer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecStatus {
    /// Layer plan and jumper channel list transcribed from the reference table.
    Verified,
    /// Dashed placements chosen to match a stated count.
    Reconstructed,
}

impl std::fmt::Display for SpecStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpecStatus::Verified => "verified",
            SpecStatus::Reconstructed => "reconstructed",
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub status: SpecStatus,
    pub summary: &'static str,
}

type Chooser = fn(&JumperSlot) -> JumperKind;

struct Recipe {
    entry: RegistryEntry,
    block: BlockKind,
    repeats: [usize; 4],
    projection_bn: bool,
    choose: Chooser,
}

const WIDTHS: [usize; 4] = [64, 128, 256, 512];
const STRIDES: [usize; 4] = [1, 2, 2, 2];

fn solid(_: &JumperSlot) -> JumperKind {
    JumperKind::Solid
}

fn dashed(_: &JumperSlot) -> JumperKind {
    JumperKind::Dashed
}

fn pick(cond: bool) -> JumperKind {
    if cond {
        JumperKind::Dashed
    } else {
        JumperKind::Solid
    }
}

const RECIPES: &[Recipe] = &[
    Recipe {
        entry: RegistryEntry {
            name: "resnet18_ft",
            status: SpecStatus::Verified,
            summary: "ResNet18 with a 32x32 stem, basic blocks [2,2,2,2]",
        },
        block: BlockKind::BasicBlock,
        repeats: [2, 2, 2, 2],
        projection_bn: true,
        choose: solid,
    },
    Recipe {
        entry: RegistryEntry {
            name: "resnet34_ft",
            status: SpecStatus::Verified,
            summary: "ResNet34 with a 32x32 stem, basic blocks [3,4,6,3]",
        },
        block: BlockKind::BasicBlock,
        repeats: [3, 4, 6, 3],
        projection_bn: true,
        choose: solid,
    },
    Recipe {
        entry: RegistryEntry {
            name: "resnet50_ft",
            status: SpecStatus::Verified,
            summary: "ResNet50 with a 32x32 stem, bottlenecks [3,4,6,3]",
        },
        block: BlockKind::Bottleneck,
        repeats: [3, 4, 6, 3],
        projection_bn: true,
        choose: solid,
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet15_a1",
            status: SpecStatus::Verified,
            summary: "cross blocks [1,1,1,1], both jumpers dashed at stage transitions",
        },
        block: BlockKind::CrossBlock,
        repeats: [1, 1, 1, 1],
        projection_bn: true,
        choose: |s| pick(s.stage > 0),
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet18_a",
            status: SpecStatus::Verified,
            summary: "cross blocks [1,2,1,1], dashed only where shapes change",
        },
        block: BlockKind::CrossBlock,
        repeats: [1, 2, 1, 1],
        projection_bn: true,
        choose: solid,
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet27_a",
            status: SpecStatus::Reconstructed,
            summary: "cross blocks [2,2,2,2], dashed only where shapes change",
        },
        block: BlockKind::CrossBlock,
        repeats: [2, 2, 2, 2],
        projection_bn: true,
        choose: solid,
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet27_a1",
            status: SpecStatus::Reconstructed,
            summary: "cross blocks [2,2,2,2], both jumpers dashed at stage transitions",
        },
        block: BlockKind::CrossBlock,
        repeats: [2, 2, 2, 2],
        projection_bn: true,
        choose: |s| pick(s.stage > 0 && s.block == 0),
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet27_a2",
            status: SpecStatus::Verified,
            summary: "cross blocks [2,2,2,2], second jumper dashed in the first stage and both at transitions",
        },
        block: BlockKind::CrossBlock,
        repeats: [2, 2, 2, 2],
        projection_bn: true,
        choose: |s| pick((s.stage == 0 && s.index == 1) || (s.stage > 0 && s.block == 0)),
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet27_b",
            status: SpecStatus::Reconstructed,
            summary: "six-layer cross bottlenecks [1,1,1,1], first jumper dashed",
        },
        block: BlockKind::CrossBottleneck6,
        repeats: [1, 1, 1, 1],
        projection_bn: false,
        choose: |s| pick(s.index == 0),
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet27_b1",
            status: SpecStatus::Reconstructed,
            summary: "six-layer cross bottlenecks [1,1,1,1], dashed only where shapes change",
        },
        block: BlockKind::CrossBottleneck6,
        repeats: [1, 1, 1, 1],
        projection_bn: false,
        choose: solid,
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet27_b2",
            status: SpecStatus::Verified,
            summary: "six-layer cross bottlenecks [1,1,1,1], first and third jumpers dashed",
        },
        block: BlockKind::CrossBottleneck6,
        repeats: [1, 1, 1, 1],
        projection_bn: false,
        choose: |s| pick(s.index != 1),
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet27_b3",
            status: SpecStatus::Reconstructed,
            summary: "six-layer cross bottlenecks [1,1,1,1], every jumper dashed",
        },
        block: BlockKind::CrossBottleneck6,
        repeats: [1, 1, 1, 1],
        projection_bn: false,
        choose: dashed,
    },
    Recipe {
        entry: RegistryEntry {
            name: "cresnet27_c1",
            status: SpecStatus::Verified,
            summary: "three-layer cross bottlenecks [2,2,2,2], every jumper dashed",
        },
        block: BlockKind::CrossBottleneck3,
        repeats: [2, 2, 2, 2],
        projection_bn: false,
        choose: dashed,
    },
];

/// Two 3x3/64 WBR layers for 32x32 inputs.
pub fn small_image_stem() -> Vec<StemLayer> {
    vec![
        StemLayer::Conv {
            out_ch: 64,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        2
    ]
}

/// The 7x7 conv and max pool used for 224x224 inputs. No registry entry
/// uses it.
pub fn large_image_stem() -> Vec<StemLayer> {
    vec![
        StemLayer::Conv {
            out_ch: 64,
            kernel: 7,
            stride: 2,
            padding: 3,
        },
        StemLayer::MaxPool {
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    ]
}

fn build(recipe: &Recipe) -> ArchitectureSpec {
    let stages = (0..4)
        .map(|s| StageSpec {
            block: recipe.block,
            repeats: recipe.repeats[s],
            channels: recipe.block.channel_plan(WIDTHS[s]),
            stride: STRIDES[s],
        })
        .collect();
    let mut spec = ArchitectureSpec {
        name: recipe.entry.name.to_string(),
        input_size: [32, 32],
        in_channels: 3,
        stem: small_image_stem(),
        stages,
        head: HeadSpec::default(),
        jumpers: Vec::new(),
    };
    assign_jumpers(&mut spec, recipe.projection_bn, recipe.choose).expect("registry stage plans are valid");
    spec
}

pub fn entries() -> Vec<RegistryEntry> {
    RECIPES.iter().map(|r| r.entry).collect()
}

pub fn names() -> Vec<&'static str> {
    RECIPES.iter().map(|r| r.entry.name).collect()
}

pub fn entry(name: &str) -> Option<RegistryEntry> {
    RECIPES.iter().find(|r| r.entry.name == name).map(|r| r.entry)
}

pub fn get(name: &str) -> Result<ArchitectureSpec> {
    RECIPES
        .iter()
        .find(|r| r.entry.name == name)
        .map(build)
        .ok_or_else(|| Error::UnknownArch {
            name: name.to_string(),
            available: names().into_iter().map(String::from).collect(),
        })
}

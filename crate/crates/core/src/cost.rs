//! Static parameter and FLOPs accounting.
//!
//! FLOPs are multiply-accumulates of conv and fc layers, dashed-jumper
//! projections included. BN, ReLU, pooling and additions count zero; BN
//! contributes its two affine vectors to the parameter count but not its
//! running statistics.

use std::fmt::Write as _;

use cresnet_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::arch::{plan, ArchitectureSpec, ConvPlan, JumperKind, Plan, StemPlan};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    Conv,
    Jumper,
    Fc,
}

impl LayerType {
    fn as_str(self) -> &'static str {
        match self {
            LayerType::Conv => "conv",
            LayerType::Jumper => "jumper",
            LayerType::Fc => "fc",
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    #[serde(rename = "type")]
    pub layer_type: LayerType,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub params: u64,
    pub flops: u64,
}

impl LayerCost {
    fn conv(c: &ConvPlan, layer_type: LayerType) -> Self {
        Self {
            name: c.name.clone(),
            layer_type,
            in_ch: c.in_ch,
            out_ch: c.out_ch,
            kernel: c.kernel,
            stride: c.stride,
            out_h: c.out_h,
            out_w: c.out_w,
            params: c.params(),
            flops: c.flops(),
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageJumpers {
    pub solid: usize,
    pub dashed: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq, Default)]
pub struct JumperStats {
    pub solid: usize,
    pub dashed: usize,
    pub per_stage: Vec<StageJumpers>,
}

impl JumperStats {
    pub fn total(&self) -> usize {
        self.solid + self.dashed
    }
}

/// Totals rounded the way tables print them.
#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq)]
pub struct CostDisplay {
    pub params_m: f64,
    pub flops_g: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CostReport {
    pub arch: String,
    pub input_size: [usize; 2],
    pub classes: usize,
    pub params_total: u64,
    pub flops_total: u64,
    pub conv_layers: usize,
    pub jumpers: JumperStats,
    pub display: CostDisplay,
    pub layers: Vec<LayerCost>,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn planned(spec: &ArchitectureSpec) -> Result<Plan> {
    plan(spec).map_err(Error::InvalidSpec)
}

fn stats_of(plan: &Plan, stages: usize) -> JumperStats {
    let mut stats = JumperStats {
        per_stage: vec![StageJumpers::default(); stages],
        ..Default::default()
    };
    for b in &plan.blocks {
        for j in &b.jumpers {
            let slot = &mut stats.per_stage[b.stage];
            match j.kind {
                JumperKind::Solid => {
                    stats.solid += 1;
                    slot.solid += 1;
                }
                JumperKind::Dashed => {
                    stats.dashed += 1;
                    slot.dashed += 1;
                }
            }
        }
    }
    stats
}

/// Full per-layer report at the given input size.
pub fn analyze(spec: &ArchitectureSpec, input_size: [usize; 2], classes: usize) -> Result<CostReport> {
    if classes == 0 {
        return Err(Error::Config("classes must be positive".into()));
    }
    let mut spec = spec.clone();
    spec.input_size = input_size;
    let plan = planned(&spec)?;

    let mut layers = Vec::new();
    for s in &plan.stem {
        if let StemPlan::Conv(c) = s {
            layers.push(LayerCost::conv(c, LayerType::Conv));
        }
    }
    for b in &plan.blocks {
        for l in &b.layers {
            layers.push(LayerCost::conv(l, LayerType::Conv));
        }
        for p in b.jumpers.iter().filter_map(|j| j.projection.as_ref()) {
            layers.push(LayerCost::conv(p, LayerType::Jumper));
        }
    }
    layers.push(LayerCost {
        name: "fc".into(),
        layer_type: LayerType::Fc,
        in_ch: plan.features,
        out_ch: classes,
        kernel: 1,
        stride: 1,
        out_h: 1,
        out_w: 1,
        params: (plan.features * classes + classes) as u64,
        flops: (plan.features * classes) as u64,
    });

    let params_total = layers.iter().map(|l| l.params).sum();
    let flops_total = layers.iter().map(|l| l.flops).sum();
    Ok(CostReport {
        arch: spec.name.clone(),
        input_size,
        classes,
        params_total,
        flops_total,
        conv_layers: plan.conv_layers().count(),
        jumpers: stats_of(&plan, spec.stages.len()),
        display: CostDisplay {
            params_m: round2(params_total as f64 / 1e6),
            flops_g: round2(flops_total as f64 / 1e9),
        },
        layers,
    })
}

pub fn count_params(spec: &ArchitectureSpec, classes: usize) -> Result<u64> {
    Ok(analyze(spec, spec.input_size, classes)?.params_total)
}

pub fn count_flops(spec: &ArchitectureSpec, input_size: [usize; 2], classes: usize) -> Result<u64> {
    Ok(analyze(spec, input_size, classes)?.flops_total)
}

pub fn jumper_stats(spec: &ArchitectureSpec) -> Result<JumperStats> {
    Ok(stats_of(&planned(spec)?, spec.stages.len()))
}

/// Trainable scalars counted by walking the model's actual tensors.
pub fn audit_params<T: Scalar>(model: &Model<T>) -> u64 {
    model.params().iter().map(|(_, p)| p.tensor.numel() as u64).sum()
}

/// `(1 - subject / baseline) * 100`; negative when the subject is larger.
pub fn reduction_pct(subject: f64, baseline: f64) -> f64 {
    (1.0 - subject / baseline) * 100.0
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq)]
pub struct Reductions {
    pub flops_pct: f64,
    pub params_pct: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Comparison {
    pub subject: String,
    pub baseline: String,
    pub subject_params: u64,
    pub baseline_params: u64,
    pub subject_flops: u64,
    pub baseline_flops: u64,
    /// From unrounded totals.
    pub flops_reduction_pct: f64,
    pub params_reduction_pct: f64,
    /// The unrounded reductions rounded to 0.01 pt.
    pub display: Reductions,
    /// Reductions recomputed from totals first rounded to 0.01M / 0.01G.
    pub from_rounded_totals: Reductions,
}

pub fn compare_reports(subject: &CostReport, baseline: &CostReport) -> Comparison {
    let flops = reduction_pct(subject.flops_total as f64, baseline.flops_total as f64);
    let params = reduction_pct(subject.params_total as f64, baseline.params_total as f64);
    Comparison {
        subject: subject.arch.clone(),
        baseline: baseline.arch.clone(),
        subject_params: subject.params_total,
        baseline_params: baseline.params_total,
        subject_flops: subject.flops_total,
        baseline_flops: baseline.flops_total,
        flops_reduction_pct: flops,
        params_reduction_pct: params,
        display: Reductions {
            flops_pct: round2(flops),
            params_pct: round2(params),
        },
        from_rounded_totals: Reductions {
            flops_pct: round2(reduction_pct(subject.display.flops_g, baseline.display.flops_g)),
            params_pct: round2(reduction_pct(subject.display.params_m, baseline.display.params_m)),
        },
    }
}

pub fn compare(
    subject: &ArchitectureSpec,
    baseline: &ArchitectureSpec,
    input_size: [usize; 2],
    classes: usize,
) -> Result<Comparison> {
    Ok(compare_reports(
        &analyze(subject, input_size, classes)?,
        &analyze(baseline, input_size, classes)?,
    ))
}

pub const CSV_HEADER: &str = "name,type,in_ch,out_ch,k,stride,out_h,out_w,params,flops";

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                l.name,
                l.layer_type.as_str(),
                l.in_ch,
                l.out_ch,
                l.kernel,
                l.stride,
                l.out_h,
                l.out_w,
                l.params,
                l.flops
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

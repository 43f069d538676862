use cresnet_tensor::init::kaiming_normal;
use cresnet_tensor::{BnMode, BnState, ParamId, ParamRole, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{plan, ArchitectureSpec, JumperKind, Plan, StemPlan};
use crate::blocks::{wbr_forward, Block, ConvBn};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum StemUnit<T> {
    Wbr(ConvBn<T>),
    MaxPool { kernel: usize, stride: usize, padding: usize },
}

/// A built network: parameters, BN statistics and the layer graph.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ArchitectureSpec,
    plan: Plan,
    classes: usize,
    params: ParamStore<T>,
    stem: Vec<StemUnit<T>>,
    blocks: Vec<Block<T>>,
    fc_weight: ParamId,
    fc_bias: ParamId,
    mode: BnMode,
}

/// Logits plus the activation after the stem and after each stage.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    pub stages: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Kaiming-normal conv and fc weights drawn from a ChaCha8 stream seeded
    /// with `seed`; BN gamma 1, beta 0; fc bias 0.
    pub fn build(spec: &ArchitectureSpec, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        let plan = plan(spec).map_err(Error::InvalidSpec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stem = Vec::with_capacity(plan.stem.len());
        for s in &plan.stem {
            stem.push(match s {
                StemPlan::Conv(c) => StemUnit::Wbr(ConvBn::new(c, &mut params, &mut rng)?),
                StemPlan::MaxPool {
                    kernel, stride, padding, ..
                } => StemUnit::MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
            });
        }
        let blocks = plan
            .blocks
            .iter()
            .map(|b| Block::new(b, &mut params, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fc_weight = params.add(
            "fc.weight",
            ParamRole::FcWeight,
            kaiming_normal(&[classes, plan.features], plan.features, &mut rng),
        )?;
        let fc_bias = params.add("fc.bias", ParamRole::FcBias, Tensor::zeros(vec![classes]))?;
        Ok(Self {
            spec: spec.clone(),
            plan,
            classes,
            params,
            stem,
            blocks,
            fc_weight,
            fc_bias,
            mode: BnMode::Train,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    /// Conv layers excluding jumper projections.
    pub fn conv_layer_count(&self) -> usize {
        let stem = self.stem.iter().filter(|s| matches!(s, StemUnit::Wbr(_))).count();
        stem + self.blocks.iter().map(|b| b.layers.len()).sum::<usize>()
    }

    /// `(solid, dashed)` over the built jumpers.
    pub fn jumper_counts(&self) -> (usize, usize) {
        self.blocks
            .iter()
            .flat_map(|b| &b.jumpers)
            .fold((0, 0), |(s, d), j| match j.kind {
                JumperKind::Solid => (s + 1, d),
                JumperKind::Dashed => (s, d + 1),
            })
    }

    fn units(&self) -> impl Iterator<Item = &ConvBn<T>> {
        let stem = self.stem.iter().filter_map(|s| match s {
            StemUnit::Wbr(c) => Some(c),
            StemUnit::MaxPool { .. } => None,
        });
        let blocks = self
            .blocks
            .iter()
            .flat_map(|b| b.layers.iter().chain(b.jumpers.iter().filter_map(|j| j.projection.as_ref())));
        stem.chain(blocks)
    }

    fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        let stem = self.stem.iter_mut().filter_map(|s| match s {
            StemUnit::Wbr(c) => Some(c),
            StemUnit::MaxPool { .. } => None,
        });
        let blocks = self.blocks.iter_mut().flat_map(|b| {
            b.layers
                .iter_mut()
                .chain(b.jumpers.iter_mut().filter_map(|j| j.projection.as_mut()))
        });
        stem.chain(blocks)
    }

    /// Every BN layer's running statistics, keyed by the owning unit's name.
    pub fn bn_states(&self) -> impl Iterator<Item = (&str, &BnState<T>)> {
        self.units()
            .filter_map(|u| u.norm.as_ref().map(|n| (u.name.as_str(), &n.state)))
    }

    pub fn bn_states_mut(&mut self) -> impl Iterator<Item = (String, &mut BnState<T>)> {
        self.units_mut()
            .filter_map(|u| u.norm.as_mut().map(|n| (u.name.clone(), &mut n.state)))
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
        for s in &mut self.stem {
            if let StemUnit::Wbr(c) = s {
                c.set_mode(mode);
            }
        }
        self.blocks.iter_mut().for_each(|b| b.set_mode(mode));
    }

    pub fn forward_trace(&mut self, tape: &mut Tape<T>, x: Var) -> Result<ForwardTrace> {
        let mut h = x;
        for s in &mut self.stem {
            h = match s {
                StemUnit::Wbr(c) => wbr_forward(c, tape, &self.params, h)?,
                StemUnit::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => tape.max_pool2d(h, *kernel, *stride, *padding)?,
            };
        }
        let mut stages = vec![h];
        let mut current = self.blocks.first().map(|_| self.plan.blocks[0].stage);
        for (block, plan) in self.blocks.iter_mut().zip(&self.plan.blocks) {
            if Some(plan.stage) != current {
                stages.push(h);
                current = Some(plan.stage);
            }
            h = block.forward(tape, &self.params, h)?;
        }
        stages.push(h);
        let pooled = tape.global_avg_pool(h)?;
        let w = tape.param(&self.params, self.fc_weight);
        let b = tape.param(&self.params, self.fc_bias);
        let logits = tape.linear(pooled, w, b)?;
        tape.set_label(logits, "fc");
        Ok(ForwardTrace { logits, stages })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward_trace(tape, x)?.logits)
    }

    /// Logits for a batch on a throwaway tape.
    pub fn predict(&mut self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(images);
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }
}

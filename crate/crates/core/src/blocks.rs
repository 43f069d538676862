//! Executable residual blocks.
//!
//! Every block kind runs through the same loop: layer `i` maps tap `i` to
//! tap `i + 1`, and each jumper whose destination is tap `i + 1` is added
//! there. Cross blocks add after the layer's ReLU; the baselines add to the
//! normalized conv output and apply ReLU afterwards.

use cresnet_tensor::init::kaiming_normal;
use cresnet_tensor::{BnMode, BnState, ParamId, ParamRole, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::arch::{
    plan, ArchitectureSpec, BlockKind, BlockPlan, ConvPlan, HeadSpec, JumperKind, JumperPlan, StageSpec,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnState<T>,
}

/// Bias-free conv with optional batch normalization.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub name: String,
    pub conv: ParamId,
    pub norm: Option<Norm<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new<R: Rng + ?Sized>(plan: &ConvPlan, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let fan_in = plan.kernel * plan.kernel * plan.in_ch;
        let w = kaiming_normal(&plan.weight_shape(), fan_in, rng);
        let conv = store.add(format!("{}.conv.weight", plan.name), ParamRole::ConvWeight, w)?;
        let norm = if plan.bn {
            let gamma = store.add(
                format!("{}.bn.gamma", plan.name),
                ParamRole::BnGamma,
                Tensor::ones(vec![plan.out_ch]),
            )?;
            let beta = store.add(
                format!("{}.bn.beta", plan.name),
                ParamRole::BnBeta,
                Tensor::zeros(vec![plan.out_ch]),
            )?;
            Some(Norm {
                gamma,
                beta,
                state: BnState::new(plan.out_ch),
            })
        } else {
            None
        };
        Ok(Self {
            name: plan.name.clone(),
            conv,
            norm,
            in_ch: plan.in_ch,
            out_ch: plan.out_ch,
            kernel: plan.kernel,
            stride: plan.stride,
            padding: plan.padding,
        })
    }

    /// `bn(conv(x))`, or `conv(x)` without normalization.
    pub fn forward(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.conv);
        let mut y = tape.conv2d(x, w, self.stride, self.padding)?;
        if let Some(n) = &mut self.norm {
            let g = tape.param(store, n.gamma);
            let b = tape.param(store, n.beta);
            y = tape.batch_norm(y, g, b, &mut n.state)?;
        }
        tape.set_label(y, self.name.as_str());
        Ok(y)
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        if let Some(n) = &mut self.norm {
            n.state.mode = mode;
        }
    }
}

/// `relu(bn(conv(x)))`.
pub fn wbr_forward<T: Scalar>(unit: &mut ConvBn<T>, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let y = unit.forward(tape, store, x)?;
    Ok(tape.relu(y))
}

#[derive(Debug, Clone)]
pub struct Jumper<T> {
    pub index: usize,
    pub src: usize,
    pub dest: usize,
    pub kind: JumperKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub projection: Option<ConvBn<T>>,
}

impl<T: Scalar> Jumper<T> {
    fn new<R: Rng + ?Sized>(plan: &JumperPlan, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let projection = plan
            .projection
            .as_ref()
            .map(|p| ConvBn::new(p, store, rng))
            .transpose()?;
        Ok(Self {
            index: plan.index,
            src: plan.src,
            dest: plan.dest,
            kind: plan.kind,
            in_ch: plan.in_ch,
            out_ch: plan.out_ch,
            stride: plan.stride,
            projection,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match &mut self.projection {
            Some(p) => p.forward(tape, store, x),
            None => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub name: String,
    pub kind: BlockKind,
    pub layers: Vec<ConvBn<T>>,
    pub jumpers: Vec<Jumper<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn new<R: Rng + ?Sized>(plan: &BlockPlan, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let layers = plan
            .layers
            .iter()
            .map(|l| ConvBn::new(l, store, rng))
            .collect::<Result<Vec<_>>>()?;
        let jumpers = plan
            .jumpers
            .iter()
            .map(|j| Jumper::new(j, store, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: plan.name.clone(),
            kind: plan.kind,
            layers,
            jumpers,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let after_relu = self.kind.adds_after_relu();
        let mut taps = vec![x];
        for i in 0..self.layers.len() {
            let mut out = self.layers[i].forward(tape, store, taps[i])?;
            if after_relu {
                out = tape.relu(out);
            }
            for j in self.jumpers.iter_mut().filter(|j| j.dest == i + 1) {
                let skip = j.forward(tape, store, taps[j.src])?;
                if tape.shape(skip) != tape.shape(out) {
                    return Err(Error::JumperShape {
                        block: self.name.clone(),
                        index: j.index,
                        reason: format!("produces {:?} but the destination is {:?}", tape.shape(skip), tape.shape(out)),
                    });
                }
                out = tape.add(out, skip)?;
            }
            if !after_relu {
                out = tape.relu(out);
            }
            taps.push(out);
        }
        Ok(*taps.last().expect("blocks have layers"))
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.layers.iter_mut().for_each(|l| l.set_mode(mode));
        self.jumpers
            .iter_mut()
            .filter_map(|j| j.projection.as_mut())
            .for_each(|p| p.set_mode(mode));
    }
}

/// Geometry for one standalone block on an `in_ch x h x w` input.
///
/// `mask` gives each jumper's kind in order; positions that change shape
/// must be dashed.
pub fn block_plan(
    kind: BlockKind,
    in_ch: usize,
    channels: Vec<usize>,
    stride: usize,
    mask: &[JumperKind],
    projection_bn: bool,
    [h, w]: [usize; 2],
) -> Result<BlockPlan> {
    let mut spec = ArchitectureSpec {
        name: format!("{kind}"),
        input_size: [h, w],
        in_channels: in_ch,
        stem: Vec::new(),
        stages: vec![StageSpec {
            block: kind,
            repeats: 1,
            channels,
            stride,
        }],
        head: HeadSpec::default(),
        jumpers: Vec::new(),
    };
    let slots = crate::arch::jumper_slots(&spec).map_err(Error::InvalidSpec)?;
    if mask.len() != slots.len() {
        return Err(Error::Config(format!(
            "{kind} has {} jumpers, mask has {}",
            slots.len(),
            mask.len()
        )));
    }
    spec.jumpers = slots.iter().zip(mask).map(|(s, &k)| s.entry(k, projection_bn)).collect();
    let mut p = plan(&spec).map_err(Error::InvalidSpec)?;
    let mut b = p.blocks.remove(0);
    b.name = "block".into();
    for l in &mut b.layers {
        l.name = l.name.replacen("stages.0.0", "block", 1);
    }
    for j in &mut b.jumpers {
        j.name = j.name.replacen("stages.0.0", "block", 1);
        if let Some(p) = &mut j.projection {
            p.name = j.name.clone();
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(kind: BlockKind, mask: &[JumperKind], in_ch: usize, m: usize) -> (Block<f64>, ParamStore<f64>) {
        let plan = block_plan(kind, in_ch, kind.channel_plan(m), 1, mask, true, [4, 4]).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (Block::new(&plan, &mut store, &mut rng).unwrap(), store)
    }

    fn zero_weights(block: &Block<f64>, store: &mut ParamStore<f64>) {
        for l in &block.layers {
            store.get_mut(l.conv).tensor.data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_weight_traces_are_zero() {
        use JumperKind::*;
        let cases: [(BlockKind, &[JumperKind], usize); 3] = [
            (BlockKind::CrossBlock, &[Solid, Solid], 2),
            (BlockKind::CrossBottleneck3, &[Solid, Dashed], 2),
            (BlockKind::CrossBottleneck6, &[Solid, Solid, Solid], 2),
        ];
        for (kind, mask, in_ch) in cases {
            let (mut block, mut store) = build(kind, mask, in_ch, 2);
            zero_weights(&block, &mut store);
            if let Some(j) = block.jumpers.iter().find_map(|j| j.projection.as_ref()) {
                store.get_mut(j.conv).tensor.data_mut().fill(0.0);
            }
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_fn(vec![2, in_ch, 4, 4], |i| (i as f64 * 0.37).sin()));
            let y = block.forward(&mut tape, &store, x).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == 0.0), "{kind}");
        }
    }

    #[test]
    fn zero_weight_basic_block_returns_relu_of_input() {
        let (mut block, mut store) = build(BlockKind::BasicBlock, &[JumperKind::Solid], 2, 2);
        zero_weights(&block, &mut store);
        let mut tape = Tape::new();
        let input = Tensor::from_fn(vec![1, 2, 4, 4], |i| i as f64 - 10.0);
        let x = tape.input(input.clone());
        let y = block.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), input.map(|v| v.max(0.0)).data());
    }

    #[test]
    fn forced_positions_must_be_dashed() {
        let err = block_plan(
            BlockKind::CrossBottleneck3,
            4,
            vec![4, 4, 16],
            1,
            &[JumperKind::Solid, JumperKind::Solid],
            true,
            [4, 4],
        )
        .unwrap_err();
        assert!(err.to_string().contains("solid jumper requires matching channels"), "{err}");
    }

    #[test]
    fn wrong_input_channels_is_a_dimension_error() {
        let (mut block, store) = build(BlockKind::CrossBlock, &[JumperKind::Solid; 2], 2, 2);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 3, 4, 4]));
        let err = block.forward(&mut tape, &store, x).unwrap_err();
        assert!(matches!(err, Error::Tensor(cresnet_tensor::TensorError::Dimension { .. })), "{err}");
    }

    #[test]
    fn wbr_output_is_non_negative() {
        let (mut block, store) = build(BlockKind::CrossBlock, &[JumperKind::Solid; 2], 2, 2);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(vec![2, 2, 4, 4], |i| (i as f64).cos() * 3.0));
        let y = wbr_forward(&mut block.layers[0], &mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
    }
}

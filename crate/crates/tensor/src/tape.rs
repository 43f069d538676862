//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and enough context to
//! push gradients back to its inputs. `backward` sweeps the tape in reverse
//! and returns gradients for the leaves that require them.

use crate::bn::BnState;
use crate::error::{Result, TensorError};
use crate::kernels::conv::{self, ConvGeometry};
use crate::kernels::dense;
use crate::kernels::norm::{self, BnCache};
use crate::kernels::pool::{self, PoolGeometry};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<ParamId> },
    Conv2d { input: Var, weight: Var, geom: ConvGeometry },
    BatchNorm { input: Var, gamma: Var, beta: Var, cache: BnCache<T> },
    Relu { input: Var },
    Add { lhs: Var, rhs: Var },
    GlobalAvgPool { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum { input: Var },
    MulConst { input: Var, factor: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }

    /// Adds every parameter gradient into the matching tensor's grad buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Attaches a human-readable name used in diagnostics.
    pub fn set_label(&mut self, var: Var, label: impl Into<String>) {
        self.nodes[var.0].label = Some(label.into());
    }

    pub fn label(&self, var: Var) -> Option<&str> {
        self.nodes[var.0].label.as_deref()
    }

    /// First node (in recording order) whose value is not finite, with the
    /// nearest labelled node at or after it.
    pub fn first_non_finite(&self) -> Option<(Var, Option<&str>)> {
        let idx = self.nodes.iter().position(|n| !n.value.is_finite())?;
        let label = self.nodes[idx..].iter().find_map(|n| n.label.as_deref());
        Some((Var(idx), label))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or trainable input; trainability follows
    /// `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf { param: None }, rg)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.tensor(id);
        let rg = t.requires_grad();
        self.push(t.clone(), Op::Leaf { param: Some(id) }, rg)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        let out = conv::conv2d_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        let rg = self.requires_grad(input) || self.requires_grad(weight);
        Ok(self.push(value, Op::Conv2d { input, weight, geom }, rg))
    }

    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, state: &mut BnState<T>) -> Result<Var> {
        let dims = self.value(input).dims4("batch_norm")?;
        let (y, cache) = norm::batch_norm_forward(
            self.value(input).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
        )?;
        let value = Tensor::new(self.shape(input).to_vec(), y)?;
        let rg = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.requires_grad(input);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        same_shape("add", self.shape(lhs), self.shape(rhs))?;
        let a = self.value(lhs);
        let data = a
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(value, Op::Add { lhs, rhs }, rg))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        if h == 0 || w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                reason: "empty spatial extent".into(),
            });
        }
        let out = pool::global_avg_pool_forward(self.value(input).data(), n, c, h * w);
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let dims = self.value(input).dims4("max_pool2d")?;
        let geom = PoolGeometry::new(dims, kernel, stride, padding).ok_or_else(|| TensorError::InvalidArgument {
            op: "max_pool2d",
            reason: format!("kernel {kernel}, stride {stride}, padding {padding} invalid for {dims:?}"),
        })?;
        let (out, argmax) = pool::max_pool_forward(self.value(input).data(), &geom);
        let value = Tensor::new(vec![dims.0, dims.1, geom.out_h, geom.out_w], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// Affine map `x @ W^T + b` with `W: (out, in)`, `b: (out,)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d_in) = self.value(input).dims2("linear")?;
        let (d_out, w_in) = self.value(weight).dims2("linear")?;
        if w_in != d_in {
            return Err(TensorError::Dimension {
                op: "linear",
                axis: "input features (input axis 1 vs weight axis 1)".into(),
                expected: w_in,
                actual: d_in,
            });
        }
        if self.shape(bias) != [d_out] {
            return Err(TensorError::Dimension {
                op: "linear",
                axis: "bias length".into(),
                expected: d_out,
                actual: self.value(bias).numel(),
            });
        }
        let y = dense::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            d_in,
            d_out,
        );
        let value = Tensor::new(vec![n, d_out], y)?;
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Mean negative log-likelihood of `labels` under softmax(logits).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(TensorError::Dimension {
                op: "softmax_cross_entropy",
                axis: "label count vs batch".into(),
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(TensorError::LabelOutOfRange { row, label, classes: k });
        }
        let (loss, probs) = dense::softmax_cross_entropy_forward(self.value(logits).data(), labels, k);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, input: Var, factor: &Tensor<T>) -> Result<Var> {
        same_shape("mul_const", self.shape(input), factor.shape())?;
        let x = self.value(input);
        let data = x.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(
            value,
            Op::MulConst {
                input,
                factor: factor.data().to_vec(),
            },
            rg,
        ))
    }

    /// Propagates `d loss / d node` back to every leaf that requires grad.
    ///
    /// Gradients are returned rather than written into parameters; use
    /// [`Gradients::accumulate_into`] to add them to a [`ParamStore`].
    /// Calling that twice without zeroing accumulates.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = conv::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    self.wants(*input),
                    self.wants(*weight),
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[input.0], dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[weight.0], dw);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let x = self.value(*input);
                let dims = x.dims4("batch_norm").expect("validated in forward");
                let (dx, dg, db) = norm::batch_norm_backward(x.data(), dims, self.value(*gamma).data(), cache, g);
                if self.wants(*input) {
                    add_into(&mut grads[input.0], dx);
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], dg);
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], db);
                }
            }
            Op::Relu { input } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &d)| if y > T::zero() { d } else { T::zero() })
                    .collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Add { lhs, rhs } => {
                if self.wants(*lhs) {
                    add_into(&mut grads[lhs.0], g.to_vec());
                }
                if self.wants(*rhs) {
                    add_into(&mut grads[rhs.0], g.to_vec());
                }
            }
            Op::GlobalAvgPool { input } => {
                let (_, _, h, w) = self.value(*input).dims4("global_avg_pool").expect("validated");
                add_into(&mut grads[input.0], pool::global_avg_pool_backward(g, h * w));
            }
            Op::MaxPool { input, argmax } => {
                let len = self.value(*input).numel();
                add_into(&mut grads[input.0], pool::max_pool_backward(g, argmax, len));
            }
            Op::Linear { input, weight, bias } => {
                let (n, d_in) = self.value(*input).dims2("linear").expect("validated");
                let d_out = self.value(*bias).numel();
                let (dx, dw, db) = dense::linear_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    n,
                    d_in,
                    d_out,
                );
                if self.wants(*input) {
                    add_into(&mut grads[input.0], dx);
                }
                if self.wants(*weight) {
                    add_into(&mut grads[weight.0], dw);
                }
                if self.wants(*bias) {
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                add_into(
                    &mut grads[logits.0],
                    dense::softmax_cross_entropy_backward(probs, labels, k, g[0]),
                );
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                add_into(&mut grads[input.0], vec![g[0]; n]);
            }
            Op::MulConst { input, factor } => {
                let dx = g.iter().zip(factor).map(|(&a, &b)| a * b).collect();
                add_into(&mut grads[input.0], dx);
            }
        }
    }
}

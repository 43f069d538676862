use crate::param::ParamStore;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
///
/// ```text
/// v <- momentum * v + (grad + weight_decay * param)
/// param <- param - lr * v
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: T, weight_decay: T) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect(),
        }
    }

    /// Parameters without a gradient buffer are treated as having zero data
    /// gradient; weight decay still applies to them.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: T) {
        assert_eq!(self.velocity.len(), params.len(), "optimizer/parameter count mismatch");
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let (data, grad) = p.tensor.data_and_grad_mut();
            for i in 0..data.len() {
                let g = grad.map_or(T::zero(), |g| g[i]) + self.weight_decay * data[i];
                v[i] = self.momentum * v[i] + g;
                data[i] = data[i] - lr * v[i];
            }
        }
    }

    pub fn velocities(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn velocities_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.velocity
    }
}

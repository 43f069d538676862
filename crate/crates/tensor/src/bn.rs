use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: BnMode,
    /// False only when the layer was configured to demand a training step
    /// before evaluation.
    pub initialized: bool,
}

impl<T: Scalar> BnState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    /// Mean 0, variance 1, `eps = 1e-5`, `momentum = 0.1`, train mode.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64_lossy(Self::DEFAULT_EPS),
            momentum: T::from_f64_lossy(Self::DEFAULT_MOMENTUM),
            mode: BnMode::Train,
            initialized: true,
        }
    }

    /// Like [`BnState::new`] but refuses eval-mode use until a train step ran.
    pub fn unset(channels: usize) -> Self {
        Self {
            initialized: false,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

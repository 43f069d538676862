use crate::bn::{BnMode, BnState};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Per-channel statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

/// Normalizes `x` (NCHW) per channel. In train mode the batch statistics are
/// used and folded into the running estimates.
pub fn batch_norm_forward<T: Scalar>(
    x: &[T],
    shape: (usize, usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    state: &mut BnState<T>,
) -> Result<(Vec<T>, BnCache<T>)> {
    let (n, c, h, w) = shape;
    for (what, len) in [("gamma", gamma.len()), ("beta", beta.len()), ("running stats", state.channels())] {
        if len != c {
            return Err(TensorError::Dimension {
                op: "batch_norm",
                axis: format!("{what} channels"),
                expected: c,
                actual: len,
            });
        }
    }
    let hw = h * w;
    let m = n * hw;
    if m == 0 {
        return Err(TensorError::InvalidArgument {
            op: "batch_norm",
            reason: "empty batch".into(),
        });
    }
    let count = T::from_usize(m).unwrap();

    let (mean, var) = match state.mode {
        BnMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s = s + x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mu = s / count;
                let mut sq = T::zero();
                for b in 0..n {
                    sq = sq
                        + x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<T>();
                }
                mean[ch] = mu;
                var[ch] = sq / count;
            }
            let mom = state.momentum;
            let unbias = if m > 1 {
                count / T::from_usize(m - 1).unwrap()
            } else {
                T::one()
            };
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var[ch] * unbias;
            }
            state.initialized = true;
            (mean, var)
        }
        BnMode::Eval => {
            if !state.initialized {
                return Err(TensorError::StatsNotInitialized);
            }
            (state.running_mean.clone(), state.running_var.clone())
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            let base = (b * c + ch) * hw;
            for (o, &v) in y[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                *o = v * scale + shift;
            }
        }
    }
    Ok((
        y,
        BnCache {
            mean,
            inv_std,
            mode: state.mode,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    x: &[T],
    shape: (usize, usize, usize, usize),
    gamma: &[T],
    cache: &BnCache<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = shape;
    let hw = h * w;
    let count = T::from_usize(n * hw).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, is) = (cache.mean[ch], cache.inv_std[ch]);
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for (&g, &v) in dy[base..base + hw].iter().zip(&x[base..base + hw]) {
                dbeta[ch] = dbeta[ch] + g;
                dgamma[ch] = dgamma[ch] + g * (v - mu) * is;
            }
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    for ch in 0..c {
        let (mu, is) = (cache.mean[ch], cache.inv_std[ch]);
        let scale = gamma[ch] * is;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            let out = &mut dx[base..base + hw];
            match cache.mode {
                BnMode::Eval => {
                    for (o, &g) in out.iter_mut().zip(&dy[base..base + hw]) {
                        *o = g * scale;
                    }
                }
                BnMode::Train => {
                    let mean_dy = dbeta[ch] / count;
                    let mean_dy_xhat = dgamma[ch] / count;
                    for ((o, &g), &v) in out.iter_mut().zip(&dy[base..base + hw]).zip(&x[base..base + hw]) {
                        let xhat = (v - mu) * is;
                        *o = scale * (g - mean_dy - xhat * mean_dy_xhat);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

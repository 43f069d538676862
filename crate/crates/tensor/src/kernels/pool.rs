use crate::scalar::Scalar;

pub fn global_avg_pool_forward<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let denom = T::from_usize(hw).unwrap();
    (0..n * c)
        .map(|i| x[i * hw..(i + 1) * hw].iter().copied().sum::<T>() / denom)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &[T], hw: usize) -> Vec<T> {
    let denom = T::from_usize(hw).unwrap();
    dy.iter()
        .flat_map(|&g| std::iter::repeat_n(g / denom, hw))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(shape: (usize, usize, usize, usize), kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        let (batch, channels, in_h, in_w) = shape;
        if kernel == 0 || stride == 0 || padding >= kernel || in_h + 2 * padding < kernel || in_w + 2 * padding < kernel {
            return None;
        }
        Some(Self {
            batch,
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kernel) / stride + 1,
            out_w: (in_w + 2 * padding - kernel) / stride + 1,
        })
    }
}

/// Max pooling with implicit `-inf` padding. Returns outputs and the flat
/// input index that produced each output.
pub fn max_pool_forward<T: Scalar>(x: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * g.in_h * g.in_w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = base;
                for ki in 0..g.kernel {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.in_h {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw < 0 || iw as usize >= g.in_w {
                            continue;
                        }
                        let idx = base + ih as usize * g.in_w + iw as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward<T: Scalar>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] = dx[i] + g;
    }
    dx
}

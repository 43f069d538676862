use crate::scalar::Scalar;

/// `y = x @ W^T + b` for `x: (n, in)`, `W: (out, in)`.
pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut y: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
    T::gemm(
        n,
        d_in,
        d_out,
        T::one(),
        x,
        (d_in as isize, 1),
        w,
        (1, d_in as isize),
        T::one(),
        &mut y,
        (d_out as isize, 1),
    );
    y
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    d_in: usize,
    d_out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * d_in];
    T::gemm(
        n,
        d_out,
        d_in,
        T::one(),
        dy,
        (d_out as isize, 1),
        w,
        (d_in as isize, 1),
        T::zero(),
        &mut dx,
        (d_in as isize, 1),
    );
    let mut dw = vec![T::zero(); d_out * d_in];
    T::gemm(
        d_out,
        n,
        d_in,
        T::one(),
        dy,
        (1, d_out as isize),
        x,
        (d_in as isize, 1),
        T::zero(),
        &mut dw,
        (d_in as isize, 1),
    );
    let mut db = vec![T::zero(); d_out];
    for row in dy.chunks_exact(d_out) {
        db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
    }
    (dx, dw, db)
}

/// Mean cross-entropy of softmax(logits) against `labels`; also returns the
/// row-wise probabilities. Labels must already be range-checked.
pub fn softmax_cross_entropy_forward<T: Scalar>(logits: &[T], labels: &[usize], k: usize) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for ((row, out), &label) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            z = z + *o;
        }
        out.iter_mut().for_each(|o| *o = *o / z);
        total = total + (z.ln() + max - row[label]);
    }
    let n = T::from_usize(labels.len().max(1)).unwrap();
    (total / n, probs)
}

pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &[T], labels: &[usize], k: usize, upstream: T) -> Vec<T> {
    let scale = upstream / T::from_usize(labels.len().max(1)).unwrap();
    let mut d = probs.to_vec();
    for (row, &label) in d.chunks_exact_mut(k).zip(labels) {
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|v| *v = *v * scale);
    }
    d
}

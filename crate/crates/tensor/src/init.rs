use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// He-normal initialization: `N(0, 2 / fan_in)`, the ReLU-gain variant.
pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z * std)
    })
}

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A fixed, ordered collection of named weight tensors.
///
/// The order returned by `tensors` is the order used for flattening,
/// optimizer state and checkpoint serialization.
pub trait Parameters<T: Scalar> {
    fn names(&self) -> &'static [&'static str];
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// `uniform(-bound, bound)` sampled in `f64` so `f32` and `f64` models built
/// from the same seed agree up to rounding.
pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    bound: f64,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

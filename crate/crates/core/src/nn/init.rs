use rand::Rng;

use super::Param;
use crate::tensor::Element;

/// He-uniform: U(−√(6/fan_in), √(6/fan_in)).
pub(crate) fn he_uniform<T: Element>(p: &mut Param<T>, fan_in: usize, rng: &mut impl Rng) {
    fill_uniform(p, (6.0 / fan_in as f64).sqrt(), rng);
}

/// Glorot-uniform: U(−√(6/(fan_in+fan_out)), √(6/(fan_in+fan_out))).
pub(crate) fn glorot_uniform<T: Element>(p: &mut Param<T>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    fill_uniform(p, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng);
}

fn fill_uniform<T: Element>(p: &mut Param<T>, limit: f64, rng: &mut impl Rng) {
    for v in p.value.data_mut() {
        *v = T::from_f64_lossy(rng.random_range(-limit..limit));
    }
}

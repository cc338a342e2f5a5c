#![allow(dead_code)]

use fdft_core::autograd::{ParamRole, ParamStore};
use fdft_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: Shape, seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Fills every parameter with random values so no gradient path is
/// trivially zero. BN scales stay near one and variances positive.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let role = store.get(id).role;
        for v in store.get_mut(id).value.data_mut() {
            *v = match role {
                ParamRole::BnGamma => rng.gen_range(0.8..1.2),
                ParamRole::BnMovingVar => rng.gen_range(0.5..1.5),
                ParamRole::AttentionGamma => rng.gen_range(0.3..0.7),
                _ => rng.gen_range(-0.5..0.5),
            };
        }
    }
}

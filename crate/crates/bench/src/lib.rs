//! Shared fixtures for the benchmarks: phantoms, random masks and untrained
//! networks of the desk sizes.

use deepbet_core::nn::{build_linknet, NetworkConfig, NetworkWeights, WeightSet};
use deepbet_core::phantom::{generate, PhantomSpec};
use deepbet_core::pipeline::{View, ROLE_STAGE1, ROLE_STAGE2};
use deepbet_core::{BinaryMask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn phantom(seed: u64) -> (Volume, Volume) {
    let p = generate(&PhantomSpec::with_seed(seed, [80, 96, 80])).expect("default phantom geometry is feasible");
    (p.image, p.mask)
}

/// Blobby random mask: each voxel set with probability `p`.
pub fn random_mask(dims: [usize; 3], p: f64, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    BinaryMask::new(dims, (0..n).map(|_| rng.random_bool(p)).collect())
}

pub fn network(cfg: &NetworkConfig, seed: u64) -> NetworkWeights {
    build_linknet(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid network config")
}

pub fn desk_3d() -> NetworkConfig {
    NetworkConfig {
        base_channels: 8,
        ..NetworkConfig::paper_3d()
    }
}

pub fn desk_2d() -> NetworkConfig {
    NetworkConfig {
        base_channels: 16,
        ..NetworkConfig::paper_2d()
    }
}

/// Untrained weights for every role; timing does not depend on the values.
pub fn untrained_weights() -> WeightSet {
    let mut set = WeightSet::default();
    set.insert(ROLE_STAGE1, network(&desk_3d(), 1));
    set.insert(ROLE_STAGE2, network(&desk_3d(), 2));
    for (i, v) in View::ALL.iter().enumerate() {
        set.insert(v.role(), network(&desk_2d(), 3 + i as u64));
    }
    set
}

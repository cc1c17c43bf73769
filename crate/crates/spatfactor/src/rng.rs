//! Seeded random streams. Each chain gets its own ChaCha stream family, and
//! each sampler step type draws from a separate stream so adding or removing
//! draws in one step does not shift the others.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Step families with a dedicated stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Slice,
    Labels,
    Atoms,
    Delta,
    LatentZ,
    Alpha,
    Kappa,
    Rho,
    Eta,
    Upsilon,
    Psi,
    Beta,
    Sigma2,
    Lambda,
    Predict,
    Simulate,
    Kmeans,
    Diagnostics,
}

pub const N_STREAMS: usize = 19;

/// A ChaCha generator keyed by the seed and positioned on a (chain, step) stream.
pub fn stream_rng(seed: u64, chain: u32, stream: Stream) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(((chain as u64) << 32) | stream as u64);
    r
}

/// All per-step generators for one chain.
#[derive(Debug, Clone)]
pub struct ChainRngs {
    rngs: Vec<ChaCha20Rng>,
}

impl ChainRngs {
    pub fn new(seed: u64, chain: u32) -> ChainRngs {
        let all = [
            Stream::Init,
            Stream::Slice,
            Stream::Labels,
            Stream::Atoms,
            Stream::Delta,
            Stream::LatentZ,
            Stream::Alpha,
            Stream::Kappa,
            Stream::Rho,
            Stream::Eta,
            Stream::Upsilon,
            Stream::Psi,
            Stream::Beta,
            Stream::Sigma2,
            Stream::Lambda,
            Stream::Predict,
            Stream::Simulate,
            Stream::Kmeans,
            Stream::Diagnostics,
        ];
        ChainRngs { rngs: all.iter().map(|&s| stream_rng(seed, chain, s)).collect() }
    }

    pub fn get(&mut self, s: Stream) -> &mut ChaCha20Rng {
        &mut self.rngs[s as usize]
    }
}

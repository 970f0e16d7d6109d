use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seeded, splittable random stream. Every stochastic operation in the
/// crate takes one of these explicitly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stream {
    rng: ChaCha8Rng,
}

/// Serializable position of a [`Stream`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent child stream, advancing `self`.
    pub fn split(&mut self) -> Stream {
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        Stream {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    /// Child stream keyed by `(self's seed, key)` without advancing `self`.
    /// Children have fresh seeds, so derivations nest.
    pub fn derive(&self, key: u64) -> Stream {
        let mut keyed = ChaCha8Rng::from_seed(self.rng.get_seed());
        keyed.set_stream(key.wrapping_add(1));
        let mut seed = [0u8; 32];
        keyed.fill_bytes(&mut seed);
        Stream {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn state(&self) -> StreamState {
        let pos = self.rng.get_word_pos();
        StreamState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn from_state(state: &StreamState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
        Stream { rng }
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

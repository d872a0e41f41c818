use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Counter-based source of independent, platform-stable random substreams.
///
/// A substream is keyed by `(seed, label, index)`; the same key always yields
/// the same ChaCha8 sequence regardless of thread count or scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomStream {
    seed: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, label: &str, index: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(b"spineseg-stream-v1");
        h.update(self.seed.to_le_bytes());
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    /// Stream for one augmented sample of one case.
    pub fn for_sample(&self, case_id: &str, sample_index: u64) -> ChaCha8Rng {
        self.substream(&format!("case:{case_id}"), sample_index)
    }

    /// A child stream with its own seed, e.g. per fold.
    pub fn child(&self, label: &str, index: u64) -> RandomStream {
        use rand::RngCore;
        RandomStream::new(self.substream(label, index).next_u64())
    }
}

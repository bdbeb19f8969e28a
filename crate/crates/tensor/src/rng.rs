use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose-keyed substreams of the experiment seed. Adding draws to one stream
/// never shifts the values produced by another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialisation, in registration order.
    Init,
    /// Dataset synthesis and augmentation.
    Data,
    /// Batch composition (identity and instance choice).
    Sampler,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Sampler => 3,
        }
    }
}

/// Deterministic generator for one `(seed, stream)` pair.
#[derive(Clone)]
pub struct StreamRng {
    rng: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream.id());
        Self { rng }
    }

    /// Derived stream for a keyed sub-purpose (e.g. one identity's renders).
    pub fn derive(seed: u64, stream: Stream, key: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.set_stream(stream.id());
        Self { rng }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for StreamRng {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_matches() {
        let mut a = StreamRng::new(7, Stream::Init);
        let mut b = StreamRng::new(7, Stream::Init);
        for _ in 0..32 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn streams_are_independent_of_each_other() {
        // Consuming extra draws from Data must not disturb Sampler.
        let mut data = StreamRng::new(7, Stream::Data);
        for _ in 0..100 {
            data.uniform();
        }
        let mut s1 = StreamRng::new(7, Stream::Sampler);
        let mut s2 = StreamRng::new(7, Stream::Sampler);
        assert_eq!(s1.uniform().to_bits(), s2.uniform().to_bits());
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = StreamRng::new(7, Stream::Init);
        let mut b = StreamRng::new(7, Stream::Data);
        let same = (0..8).all(|_| a.uniform() == b.uniform());
        assert!(!same, "Init and Data streams produced identical draws");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = StreamRng::new(3, Stream::Sampler);
        let mut items: Vec<usize> = (0..20).collect();
        rng.shuffle(&mut items);
        let mut sorted = items.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }
}

//! Deterministic pseudo-random streams derived by hashing
//! `(seed, purpose label, epoch)`. Each purpose gets an independent stream,
//! so adding an actor or a draw site never perturbs unrelated draws and
//! replays agree across machines.

use sha2::{Digest, Sha256};

/// SHA-256 counter-mode stream. Not a general-purpose RNG; it exists to make
/// simulation draws reproducible and label-isolated.
pub struct DeterministicStream {
    key: [u8; 32],
    counter: u64,
    buf: [u8; 32],
    pos: usize,
}

impl DeterministicStream {
    pub fn derive(seed: u64, label: &str, epoch: u64) -> DeterministicStream {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update([0x1f]);
        hasher.update(label.as_bytes());
        hasher.update([0x1f]);
        hasher.update(epoch.to_le_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        DeterministicStream { key, counter: 0, buf: [0; 32], pos: 32 }
    }

    fn refill(&mut self) {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update(self.counter.to_le_bytes());
        self.buf = hasher.finalize().into();
        self.counter += 1;
        self.pos = 0;
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.pos + 8 > 32 {
            self.refill();
        }
        let bytes: [u8; 8] = self.buf[self.pos..self.pos + 8].try_into().unwrap();
        self.pos += 8;
        u64::from_le_bytes(bytes)
    }

    /// Uniform-ish draw in `[0, n)`. Modulo bias is irrelevant at simulation
    /// scale and keeps the reduction independent of any library's sampler.
    pub fn gen_range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "gen_range requires n > 0");
        self.next_u64() % n
    }

    /// Signed draw in `[-amplitude, +amplitude]`.
    pub fn gen_signed(&mut self, amplitude: u64) -> i64 {
        if amplitude == 0 {
            return 0;
        }
        let span = 2 * amplitude + 1;
        self.gen_range(span) as i64 - amplitude as i64
    }

    /// First `k` elements of a Fisher-Yates shuffle of `items`.
    pub fn sample<T: Clone>(&mut self, items: &[T], k: usize) -> Vec<T> {
        let k = k.min(items.len());
        let mut pool: Vec<T> = items.to_vec();
        for i in 0..k {
            let j = i + self.gen_range((pool.len() - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

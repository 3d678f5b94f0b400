//! Packed bit buffer used for key material, parities and Toeplitz hashing.
//! Bits are stored LSB-first within little-endian u64 words; the tail word
//! is kept masked so equality and popcounts stay exact.

use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitBuf {
    words: Vec<u64>,
    len: usize,
}

impl BitBuf {
    pub fn zeros(len: usize) -> Self {
        Self { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut b = Self::zeros(bits.len());
        for (i, &v) in bits.iter().enumerate() {
            if v {
                b.set(i, true);
            }
        }
        b
    }

    pub fn random<R: Rng>(rng: &mut R, len: usize) -> Self {
        let mut words: Vec<u64> = (0..len.div_ceil(64)).map(|_| rng.random()).collect();
        mask_tail(&mut words, len);
        Self { words, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i % 64);
        if v {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    #[inline]
    pub fn toggle(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    pub fn push(&mut self, v: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, v);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of differing bits between two equally sized buffers.
    pub fn diff_count(&self, other: &BitBuf) -> usize {
        assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    pub fn xor_with(&mut self, other: &BitBuf) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
    }

    /// 64 bits starting at an arbitrary bit offset (zero padded past the end).
    #[inline]
    pub fn word_at_bit(&self, offset: usize) -> u64 {
        let w = offset / 64;
        let r = offset % 64;
        let lo = self.words.get(w).copied().unwrap_or(0);
        if r == 0 {
            lo
        } else {
            let hi = self.words.get(w + 1).copied().unwrap_or(0);
            (lo >> r) | (hi << (64 - r))
        }
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Packs into bytes, LSB-first (the tail byte is zero padded).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len.div_ceil(8));
        for i in 0..self.len.div_ceil(8) {
            let w = self.words[i / 8];
            out.push((w >> ((i % 8) * 8)) as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Self {
        assert!(bytes.len() * 8 >= len, "byte slice too short for {len} bits");
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate().take(len.div_ceil(8)) {
            words[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        mask_tail(&mut words, len);
        Self { words, len }
    }

    /// Sub-buffer of `count` bits starting at `start`.
    pub fn slice(&self, start: usize, count: usize) -> BitBuf {
        assert!(start + count <= self.len);
        let mut words = Vec::with_capacity(count.div_ceil(64));
        for i in 0..count.div_ceil(64) {
            words.push(self.word_at_bit(start + i * 64));
        }
        mask_tail(&mut words, count);
        Self { words, len: count }
    }
}

fn mask_tail(words: &mut [u64], len: usize) {
    if len % 64 != 0 {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << (len % 64)) - 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn set_get_toggle() {
        let mut b = BitBuf::zeros(130);
        b.set(0, true);
        b.set(129, true);
        b.toggle(64);
        assert!(b.get(0) && b.get(64) && b.get(129));
        assert_eq!(b.count_ones(), 3);
        b.toggle(0);
        assert_eq!(b.count_ones(), 2);
    }

    #[test]
    fn byte_round_trip_preserves_bits() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for len in [1usize, 7, 8, 63, 64, 65, 1000] {
            let b = BitBuf::random(&mut rng, len);
            let back = BitBuf::from_bytes(&b.to_bytes(), len);
            assert_eq!(b, back, "len {len}");
        }
    }

    #[test]
    fn word_at_bit_matches_per_bit_reads() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let b = BitBuf::random(&mut rng, 300);
        for off in [0usize, 1, 63, 64, 65, 200, 290] {
            let w = b.word_at_bit(off);
            for k in 0..64 {
                let expect = if off + k < b.len() { b.get(off + k) } else { false };
                assert_eq!((w >> k) & 1 == 1, expect, "off {off} bit {k}");
            }
        }
    }

    #[test]
    fn slice_and_diff() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let b = BitBuf::random(&mut rng, 500);
        let s = b.slice(123, 200);
        for i in 0..200 {
            assert_eq!(s.get(i), b.get(123 + i));
        }
        let mut c = b.clone();
        c.toggle(10);
        c.toggle(499);
        assert_eq!(b.diff_count(&c), 2);
    }
}

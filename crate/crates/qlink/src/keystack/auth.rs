//! Message authentication: polynomial evaluation hash over GF(2⁶⁴) in
//! Wegman–Carter style. The hash key is drawn fresh from the key store for
//! every key block boundary, the 64-bit one-time-pad mask is fresh for every
//! tag, so tags never repeat and forgery probability stays at the
//! ε-universality bound of the evaluation hash.

use super::keystore::{KeyStackError, KeyStream};

/// GF(2⁶⁴) reduction polynomial x⁶⁴ + x⁴ + x³ + x + 1 (low word).
const GF64_POLY: u64 = 0x1B;

/// Carry-less multiplication in GF(2⁶⁴).
pub fn gf64_mul(a: u64, b: u64) -> u64 {
    let mut acc: u128 = 0;
    let mut b = b;
    let mut shifted = a as u128;
    while b != 0 {
        if b & 1 == 1 {
            acc ^= shifted;
        }
        shifted <<= 1;
        b >>= 1;
    }
    reduce128(acc)
}

fn reduce128(v: u128) -> u64 {
    let mut lo = v as u64;
    let mut hi = (v >> 64) as u64;
    while hi != 0 {
        // hi · (x⁴+x³+x+1) spills at most 4 bits past 64.
        let mut folded: u128 = 0;
        let mut p = GF64_POLY;
        let mut shift = 0;
        while p != 0 {
            if p & 1 == 1 {
                folded ^= (hi as u128) << shift;
            }
            p >>= 1;
            shift += 1;
        }
        lo ^= folded as u64;
        hi = (folded >> 64) as u64;
    }
    lo
}

/// Evaluation hash of a byte message under key `r`: the message is split
/// into 64-bit little-endian chunks and evaluated Horner-style, with the
/// bit length folded in as the final coefficient.
pub fn eval_hash(r: u64, message: &[u8]) -> u64 {
    let mut h: u64 = 0;
    for chunk in message.chunks(8) {
        let mut block = [0u8; 8];
        block[..chunk.len()].copy_from_slice(chunk);
        h = gf64_mul(h ^ u64::from_le_bytes(block), r);
    }
    gf64_mul(h ^ (message.len() as u64 * 8), r)
}

/// Authentication state for one direction of a channel. The evaluation-hash
/// key rotates whenever [`Authenticator::rotate_key`] is called (per key
/// block); every tag additionally consumes a fresh 64-bit OTP mask.
#[derive(Debug)]
pub struct Authenticator {
    hash_key: Option<u64>,
}

impl Default for Authenticator {
    fn default() -> Self {
        Self::new()
    }
}

impl Authenticator {
    pub fn new() -> Self {
        Self { hash_key: None }
    }

    /// Draws a fresh evaluation-hash key from the stream.
    pub fn rotate_key(&mut self, stream: &mut KeyStream) -> Result<(), KeyStackError> {
        let bytes = stream.take(8)?;
        self.hash_key = Some(u64::from_le_bytes(bytes.try_into().unwrap()));
        Ok(())
    }

    /// Tags a message, consuming 64 OTP bits (plus the hash key on first use).
    pub fn tag(&mut self, message: &[u8], stream: &mut KeyStream) -> Result<[u8; 8], KeyStackError> {
        if self.hash_key.is_none() {
            self.rotate_key(stream)?;
        }
        let otp = u64::from_le_bytes(stream.take(8)?.try_into().unwrap());
        Ok((eval_hash(self.hash_key.unwrap(), message) ^ otp).to_le_bytes())
    }

    /// Verifies a tag; consumes exactly the same key material as [`tag`]
    /// so both ends stay in lockstep on the shared stream.
    ///
    /// [`tag`]: Authenticator::tag
    pub fn verify(
        &mut self,
        message: &[u8],
        tag: &[u8; 8],
        stream: &mut KeyStream,
    ) -> Result<bool, KeyStackError> {
        let expect = self.tag(message, stream)?;
        Ok(constant_time_eq(&expect, tag))
    }
}

fn constant_time_eq(a: &[u8; 8], b: &[u8; 8]) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystack::keystore::KeyStream;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn gf64_field_laws() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..200 {
            let (a, b, c): (u64, u64, u64) = (rng.random(), rng.random(), rng.random());
            assert_eq!(gf64_mul(a, b), gf64_mul(b, a));
            assert_eq!(gf64_mul(a, gf64_mul(b, c)), gf64_mul(gf64_mul(a, b), c));
            assert_eq!(gf64_mul(a, b ^ c), gf64_mul(a, b) ^ gf64_mul(a, c));
            assert_eq!(gf64_mul(a, 1), a);
            assert_eq!(gf64_mul(a, 0), 0);
        }
    }

    fn stream_pair(seed: u64, bytes: usize) -> (KeyStream, KeyStream) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let material: Vec<u8> = (0..bytes).map(|_| rng.random()).collect();
        (KeyStream::new(material.clone()), KeyStream::new(material))
    }

    #[test]
    fn tag_verifies_and_rejects_modification() {
        let (mut tx, mut rx) = stream_pair(3, 4096);
        let mut a = Authenticator::new();
        let mut b = Authenticator::new();
        let msg = b"coincidence basis announcement".to_vec();
        let tag = a.tag(&msg, &mut tx).unwrap();
        assert!(b.verify(&msg, &tag, &mut rx).unwrap());

        let (mut tx2, mut rx2) = stream_pair(3, 4096);
        let mut a2 = Authenticator::new();
        let mut b2 = Authenticator::new();
        let tag2 = a2.tag(&msg, &mut tx2).unwrap();
        let mut tampered = msg.clone();
        tampered[4] ^= 0x01;
        assert!(!b2.verify(&tampered, &tag2, &mut rx2).unwrap());
    }

    #[test]
    fn forgeries_fail_over_random_trials() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let (mut tx, mut rx) = stream_pair(5, 1 << 20);
        let mut signer = Authenticator::new();
        let mut checker = Authenticator::new();
        for _ in 0..100_000 {
            let msg: [u8; 16] = rng.random();
            let tag = signer.tag(&msg, &mut tx).unwrap();
            let mut forged = msg;
            let byte = rng.random_range(0..16);
            let bit = rng.random_range(0..8);
            forged[byte] ^= 1 << bit;
            assert!(!checker.verify(&forged, &tag, &mut rx).unwrap());
        }
    }

    #[test]
    fn same_message_fresh_otp_gives_different_tags() {
        let (mut tx, _) = stream_pair(7, 4096);
        let mut a = Authenticator::new();
        let msg = b"repeat".to_vec();
        let t1 = a.tag(&msg, &mut tx).unwrap();
        let t2 = a.tag(&msg, &mut tx).unwrap();
        assert_ne!(t1, t2);
    }
}

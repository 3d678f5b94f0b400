//! Privacy amplification with a Toeplitz matrix over GF(2).
//!
//! The m×n matrix is defined by a public random diagonal string of
//! n+m−1 bits: T[i][j] = s[n−1+i−j]. Row i is therefore the reversed
//! window s[i .. i+n), which lets the product be evaluated as a sliding
//! 64-bit windowed dot product against the bit-reversed input key.

use super::bits::BitBuf;

/// Applies the Toeplitz matrix defined by `diagonals` (length n+m−1) to an
/// n-bit input, producing m bits.
pub fn toeplitz_apply(diagonals: &BitBuf, input: &BitBuf, m: usize) -> BitBuf {
    let n = input.len();
    assert!(m > 0, "output length must be positive");
    assert_eq!(diagonals.len(), n + m - 1, "diagonal string must hold n+m-1 bits");

    // rev[j] = input[n-1-j]; row i of T dotted with input equals
    // dot(s[i..i+n), rev).
    let mut rev = BitBuf::zeros(n);
    for j in 0..n {
        if input.get(n - 1 - j) {
            rev.set(j, true);
        }
    }
    let rev_words = rev.words();
    let whole_words = n / 64;
    let tail_bits = n % 64;

    let mut out = BitBuf::zeros(m);
    for i in 0..m {
        let mut acc = 0u64;
        for (w, &rw) in rev_words.iter().enumerate().take(whole_words) {
            acc ^= diagonals.word_at_bit(i + w * 64) & rw;
        }
        if tail_bits != 0 {
            let window = diagonals.word_at_bit(i + whole_words * 64) & ((1u64 << tail_bits) - 1);
            acc ^= window & rev_words[whole_words];
        }
        if acc.count_ones() & 1 == 1 {
            out.set(i, true);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Naive reference: explicit row-by-row GF(2) matrix product.
    fn toeplitz_naive(diagonals: &BitBuf, input: &BitBuf, m: usize) -> BitBuf {
        let n = input.len();
        let mut out = BitBuf::zeros(m);
        for i in 0..m {
            let mut acc = false;
            for j in 0..n {
                if diagonals.get(n - 1 + i - j) && input.get(j) {
                    acc = !acc;
                }
            }
            out.set(i, acc);
        }
        out
    }

    #[test]
    fn matches_naive_product() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for (n, m) in [(64, 32), (130, 70), (1000, 421), (67, 1)] {
            let diag = BitBuf::random(&mut rng, n + m - 1);
            let input = BitBuf::random(&mut rng, n);
            assert_eq!(
                toeplitz_apply(&diag, &input, m),
                toeplitz_naive(&diag, &input, m),
                "n={n} m={m}"
            );
        }
    }

    #[test]
    fn zero_diagonals_give_zero_key() {
        let input = BitBuf::from_bools(&[true; 100]);
        let out = toeplitz_apply(&BitBuf::zeros(100 + 40 - 1), &input, 40);
        assert_eq!(out.count_ones(), 0);
    }

    #[test]
    fn linearity_over_gf2() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 512;
        let m = 200;
        let diag = BitBuf::random(&mut rng, n + m - 1);
        let x = BitBuf::random(&mut rng, n);
        let p = BitBuf::random(&mut rng, n);
        let mut xp = x.clone();
        xp.xor_with(&p);
        let mut expect = toeplitz_apply(&diag, &x, m);
        expect.xor_with(&toeplitz_apply(&diag, &p, m));
        assert_eq!(toeplitz_apply(&diag, &xp, m), expect);
    }
}

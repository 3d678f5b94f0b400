//! Interactive CASCADE reconciliation.
//!
//! Classic four-pass variant: the first pass runs over the key in natural
//! order with block size k₁ ≈ 0.73/e, later passes shuffle with a shared
//! seeded permutation and double the block size. The corrector (Bob) drives
//! binary searches over blocks whose parity disagrees with the responder's
//! (Alice's) reference key; every correction backtracks into all other
//! passes. Responder parities are cached, and the sibling of each disclosed
//! half is derived rather than re-requested, so no parity index is disclosed
//! twice within a pass.
//!
//! Both halves are pure state machines exchanging [`ParityRange`] batches
//! and parity-bit replies, so they run identically over the in-process
//! loopback and the TCP transport.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::bits::BitBuf;
use super::keystore::KeyStackError;

/// Hard bounds accepted for the working QBER estimate.
pub const QBER_ESTIMATE_RANGE: (f64, f64) = (0.0, 0.12);

#[derive(Debug, Clone, Copy)]
pub struct CascadeParams {
    pub passes: usize,
    /// Initial block size is ceil(block_coeff / estimated_qber).
    pub block_coeff: f64,
    /// Shared shuffle seed; public, exchanged over the classical channel.
    pub seed: u64,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self { passes: 4, block_coeff: 0.73, seed: 0 }
    }
}

/// A parity query in the permuted coordinates of one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParityRange {
    pub pass: u8,
    pub start: u32,
    pub len: u32,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-pass block sizes: k₁ doubling each pass, capped at the key length.
pub fn block_sizes(n: usize, e_est: f64, params: &CascadeParams) -> Result<Vec<usize>, KeyStackError> {
    if !(e_est > QBER_ESTIMATE_RANGE.0 && e_est <= QBER_ESTIMATE_RANGE.1) {
        return Err(KeyStackError::QberEstimateOutOfRange(e_est));
    }
    let k1 = ((params.block_coeff / e_est).ceil() as usize).clamp(4, n.max(4));
    Ok((0..params.passes).map(|p| (k1 << p).min(n)).collect())
}

/// Shared pass permutations. Pass 0 is the identity; later passes are
/// Fisher-Yates shuffles seeded from the cascade seed.
struct Permutations {
    forward: Vec<Option<Vec<u32>>>,
    inverse: Vec<Option<Vec<u32>>>,
}

impl Permutations {
    fn derive(n: usize, passes: usize, seed: u64) -> Self {
        let mut forward = vec![None];
        let mut inverse = vec![None];
        for pass in 1..passes {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ splitmix64(pass as u64));
            let mut perm: Vec<u32> = (0..n as u32).collect();
            perm.shuffle(&mut rng);
            let mut inv = vec![0u32; n];
            for (pos, &src) in perm.iter().enumerate() {
                inv[src as usize] = pos as u32;
            }
            forward.push(Some(perm));
            inverse.push(Some(inv));
        }
        Self { forward, inverse }
    }

    #[inline]
    fn source_index(&self, pass: usize, pos: u32) -> u32 {
        match &self.forward[pass] {
            None => pos,
            Some(p) => p[pos as usize],
        }
    }

    #[inline]
    fn position(&self, pass: usize, src: u32) -> u32 {
        match &self.inverse[pass] {
            None => src,
            Some(p) => p[src as usize],
        }
    }
}

fn range_parity(bits: &BitBuf, perms: &Permutations, pass: usize, start: u32, len: u32) -> bool {
    let mut acc = false;
    for pos in start..start + len {
        acc ^= bits.get(perms.source_index(pass, pos) as usize);
    }
    acc
}

/// Responder half: serves parities of the reference key and counts what it
/// disclosed.
pub struct CascadeResponder {
    bits: BitBuf,
    perms: Permutations,
    parities_sent: usize,
    served: HashMap<ParityRange, bool>,
    duplicate_requests: usize,
}

impl CascadeResponder {
    pub fn new(bits: &BitBuf, e_est: f64, params: &CascadeParams) -> Result<Self, KeyStackError> {
        block_sizes(bits.len(), e_est, params)?;
        Ok(Self {
            bits: bits.clone(),
            perms: Permutations::derive(bits.len(), params.passes, params.seed),
            parities_sent: 0,
            served: HashMap::new(),
            duplicate_requests: 0,
        })
    }

    pub fn respond(&mut self, ranges: &[ParityRange]) -> Vec<bool> {
        let mut out = Vec::with_capacity(ranges.len());
        for r in ranges {
            if self.served.contains_key(r) {
                self.duplicate_requests += 1;
            }
            let p = range_parity(&self.bits, &self.perms, r.pass as usize, r.start, r.len);
            self.served.insert(*r, p);
            self.parities_sent += 1;
            out.push(p);
        }
        out
    }

    pub fn parities_sent(&self) -> usize {
        self.parities_sent
    }

    /// Number of ranges requested more than once; stays zero for a correct
    /// corrector.
    pub fn duplicate_requests(&self) -> usize {
        self.duplicate_requests
    }
}

#[derive(Debug)]
struct Search {
    pass: usize,
    lo: u32,
    hi: u32,
    /// Responder parity of the current interval (tracked down the descent).
    ref_parity: bool,
}

#[derive(Debug, Clone)]
pub struct CascadeResult {
    pub bits: BitBuf,
    pub corrections: usize,
    pub parities_received: usize,
}

/// What the corrector wants next: a batch of parity queries, or the final
/// corrected key.
pub enum CorrectorStep {
    Request(Vec<ParityRange>),
    Finished(CascadeResult),
}

enum Phase {
    TopLevel { pass: usize },
    Wave,
    Done,
}

/// Corrector half: holds the noisy key, converges it onto the responder's.
pub struct CascadeCorrector {
    bits: BitBuf,
    perms: Permutations,
    sizes: Vec<usize>,
    /// mismatch[pass][block]: current parity disagreement with the responder.
    mismatch: Vec<Vec<bool>>,
    /// Cache of responder parities, including derived siblings.
    cache: HashMap<ParityRange, bool>,
    searches: Vec<Search>,
    /// Ranges the previous `Request` asked for, one per pending search.
    pending: Vec<(usize, ParityRange)>,
    phase: Phase,
    corrections: usize,
    parities_received: usize,
}

impl CascadeCorrector {
    pub fn new(bits: BitBuf, e_est: f64, params: &CascadeParams) -> Result<Self, KeyStackError> {
        let sizes = block_sizes(bits.len(), e_est, params)?;
        let perms = Permutations::derive(bits.len(), params.passes, params.seed);
        Ok(Self {
            bits,
            perms,
            sizes,
            mismatch: Vec::new(),
            cache: HashMap::new(),
            searches: Vec::new(),
            pending: Vec::new(),
            phase: Phase::TopLevel { pass: 0 },
            corrections: 0,
            parities_received: 0,
        })
    }

    fn block_count(&self, pass: usize) -> usize {
        self.bits.len().div_ceil(self.sizes[pass])
    }

    fn block_range(&self, pass: usize, block: usize) -> (u32, u32) {
        let k = self.sizes[pass];
        let start = block * k;
        let len = k.min(self.bits.len() - start);
        (start as u32, len as u32)
    }

    fn my_parity(&self, pass: usize, start: u32, len: u32) -> bool {
        range_parity(&self.bits, &self.perms, pass, start, len)
    }

    /// Flips a source bit and toggles the parity state of its block in
    /// every pass processed so far.
    fn flip(&mut self, src: u32) {
        self.bits.toggle(src as usize);
        self.corrections += 1;
        for pass in 0..self.mismatch.len() {
            let block = (self.perms.position(pass, src) as usize) / self.sizes[pass];
            self.mismatch[pass][block] = !self.mismatch[pass][block];
        }
    }

    /// Advances one search as far as the cache allows; returns the next
    /// uncached range, or None when it terminated with a flip.
    fn advance_search(&mut self, idx: usize) -> Option<ParityRange> {
        loop {
            let (pass, lo, hi, ref_parity) = {
                let s = &self.searches[idx];
                (s.pass, s.lo, s.hi, s.ref_parity)
            };
            if hi - lo == 1 {
                let src = self.perms.source_index(pass, lo);
                debug_assert_ne!(
                    self.bits.get(src as usize),
                    ref_parity,
                    "binary search converged on a non-differing bit"
                );
                self.flip(src);
                self.searches[idx].hi = self.searches[idx].lo; // mark finished
                return None;
            }
            let mid = lo + (hi - lo) / 2;
            let left = ParityRange { pass: pass as u8, start: lo, len: mid - lo };
            match self.cache.get(&left).copied() {
                Some(ref_left) => {
                    let my_left = self.my_parity(pass, lo, mid - lo);
                    let s = &mut self.searches[idx];
                    if my_left != ref_left {
                        s.hi = mid;
                        s.ref_parity = ref_left;
                    } else {
                        s.lo = mid;
                        s.ref_parity = ref_parity ^ ref_left;
                    }
                }
                None => return Some(left),
            }
        }
    }

    /// Collects requests for every still-active search; finished searches
    /// drop out. Returns the batch plus bookkeeping of who asked what.
    fn wave_round(&mut self) -> Vec<ParityRange> {
        self.pending.clear();
        let mut batch = Vec::new();
        for idx in 0..self.searches.len() {
            if self.searches[idx].hi <= self.searches[idx].lo {
                continue; // finished
            }
            if let Some(range) = self.advance_search(idx) {
                self.pending.push((idx, range));
                batch.push(range);
            }
        }
        batch
    }

    /// Lowest pass (smallest blocks) that still has an odd-parity block.
    fn spawn_wave(&mut self) -> bool {
        for pass in 0..self.mismatch.len() {
            let odd: Vec<usize> = self.mismatch[pass]
                .iter()
                .enumerate()
                .filter_map(|(b, &m)| m.then_some(b))
                .collect();
            if odd.is_empty() {
                continue;
            }
            self.searches = odd
                .into_iter()
                .map(|b| {
                    let (start, len) = self.block_range(pass, b);
                    let ref_parity = self.cache[&ParityRange { pass: pass as u8, start, len }];
                    Search { pass, lo: start, hi: start + len, ref_parity }
                })
                .collect();
            self.phase = Phase::Wave;
            return true;
        }
        false
    }

    fn top_level_request(&mut self, pass: usize) -> Vec<ParityRange> {
        self.pending.clear();
        let batch: Vec<ParityRange> = (0..self.block_count(pass))
            .map(|b| {
                let (start, len) = self.block_range(pass, b);
                ParityRange { pass: pass as u8, start, len }
            })
            .collect();
        self.phase = Phase::TopLevel { pass };
        batch
    }

    /// Drives the protocol. Pass the responder's reply to the previous
    /// `Request`; pass `None` on the first call.
    pub fn next(&mut self, reply: Option<&[bool]>) -> Result<CorrectorStep, KeyStackError> {
        match self.phase {
            Phase::TopLevel { pass } => {
                match reply {
                    None => {
                        debug_assert_eq!(pass, 0);
                        return Ok(CorrectorStep::Request(self.top_level_request(0)));
                    }
                    Some(bits) => {
                        let count = self.block_count(pass);
                        if bits.len() != count {
                            return Err(KeyStackError::ProtocolDesync(format!(
                                "expected {count} top-level parities, got {}",
                                bits.len()
                            )));
                        }
                        self.parities_received += bits.len();
                        let mut row = Vec::with_capacity(count);
                        for (b, &ref_parity) in bits.iter().enumerate() {
                            let (start, len) = self.block_range(pass, b);
                            self.cache
                                .insert(ParityRange { pass: pass as u8, start, len }, ref_parity);
                            row.push(self.my_parity(pass, start, len) != ref_parity);
                        }
                        self.mismatch.push(row);
                    }
                }
                self.after_wave_or_top()
            }
            Phase::Wave => {
                let bits = reply.ok_or_else(|| {
                    KeyStackError::ProtocolDesync("wave step requires a reply".into())
                })?;
                if bits.len() != self.pending.len() {
                    return Err(KeyStackError::ProtocolDesync(format!(
                        "expected {} wave parities, got {}",
                        self.pending.len(),
                        bits.len()
                    )));
                }
                self.parities_received += bits.len();
                let pending = std::mem::take(&mut self.pending);
                for ((idx, range), &parity) in pending.iter().zip(bits.iter()) {
                    self.cache.insert(*range, parity);
                    // Derive the sibling half from the interval parity the
                    // search tracked, so it is never requested explicitly.
                    let s = &self.searches[*idx];
                    let interval_len = s.hi - s.lo;
                    self.cache.insert(
                        ParityRange {
                            pass: range.pass,
                            start: range.start + range.len,
                            len: interval_len - range.len,
                        },
                        s.ref_parity ^ parity,
                    );
                }
                self.after_wave_or_top()
            }
            Phase::Done => Err(KeyStackError::ProtocolDesync("corrector already finished".into())),
        }
    }

    fn after_wave_or_top(&mut self) -> Result<CorrectorStep, KeyStackError> {
        loop {
            // Keep pumping the current wave while searches remain active.
            if matches!(self.phase, Phase::Wave) {
                let batch = self.wave_round();
                if !batch.is_empty() {
                    return Ok(CorrectorStep::Request(batch));
                }
            }
            // Wave drained (or top level just processed): chase odd blocks,
            // starting from the pass with the smallest blocks. A wave served
            // entirely from cache loops straight into the next one.
            if self.spawn_wave() {
                continue;
            }
            // Everything even: next pass or done.
            let next_pass = self.mismatch.len();
            if next_pass < self.sizes.len() {
                return Ok(CorrectorStep::Request(self.top_level_request(next_pass)));
            }
            self.phase = Phase::Done;
            return Ok(CorrectorStep::Finished(CascadeResult {
                bits: self.bits.clone(),
                corrections: self.corrections,
                parities_received: self.parities_received,
            }));
        }
    }
}

/// Runs corrector against responder in process; used by tests and the
/// single-process pipeline. Returns the corrected key and both sides'
/// disclosure counters (which must agree).
pub fn reconcile_local(
    reference: &BitBuf,
    noisy: BitBuf,
    e_est: f64,
    params: &CascadeParams,
) -> Result<(CascadeResult, usize), KeyStackError> {
    if reference.len() != noisy.len() {
        return Err(KeyStackError::BlockSizeMismatch(reference.len(), noisy.len()));
    }
    let mut responder = CascadeResponder::new(reference, e_est, params)?;
    let mut corrector = CascadeCorrector::new(noisy, e_est, params)?;
    let mut reply: Option<Vec<bool>> = None;
    loop {
        match corrector.next(reply.as_deref())? {
            CorrectorStep::Request(ranges) => {
                reply = Some(responder.respond(&ranges));
            }
            CorrectorStep::Finished(result) => {
                assert_eq!(responder.duplicate_requests(), 0, "parity disclosed twice in a pass");
                return Ok((result, responder.parities_sent()));
            }
        }
    }
}

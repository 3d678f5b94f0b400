//! BBM92 key distillation: sifting, CASCADE reconciliation, Toeplitz
//! privacy amplification and Wegman–Carter authentication, with exact
//! leakage accounting at every step.

pub mod auth;
pub mod bits;
pub mod cascade;
pub mod keystore;
pub mod toeplitz;

use crate::analytic;
use crate::polmath::Basis;
use bits::BitBuf;
pub use keystore::KeyStackError;

/// Default sifted block size, bits.
pub const DEFAULT_BLOCK_SIZE: usize = 32_768;

/// One party's record of a detection tied to a synchronisation trigger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerRecord {
    pub trigger_id: u64,
    pub basis: Basis,
    pub bit: bool,
    pub timestamp_ps: i64,
}

/// What a party announces over the classical channel: which triggers it
/// detected and in which basis. Never the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Announcement {
    pub trigger_id: u64,
    pub basis: Basis,
}

/// A sifted bit with its provenance, before block assembly.
#[derive(Debug, Clone, Copy)]
pub struct SiftedBit {
    pub trigger_id: u64,
    pub bit: bool,
    pub timestamp_ps: i64,
}

/// Fixed-size sifted key block flowing through reconciliation.
#[derive(Debug, Clone)]
pub struct SiftedBlock {
    pub bits: BitBuf,
    pub block_id: u64,
    /// Classical bits leaked for this block (parities + verification hash).
    pub disclosed_bits: usize,
    /// Timestamp of the last contributing coincidence; used for ledger rows.
    pub end_timestamp_ps: i64,
}

/// Distilled secure key for one or more source blocks.
#[derive(Debug, Clone)]
pub struct SecureKey {
    pub bits: BitBuf,
    pub source_block_ids: Vec<u64>,
    /// Forgery bound of the authentication scheme protecting the classical
    /// exchange this key was distilled over.
    pub epsilon_auth: f64,
}

fn check_sorted(records: &[Announcement]) -> Result<(), KeyStackError> {
    for w in records.windows(2) {
        if w[1].trigger_id == w[0].trigger_id {
            return Err(KeyStackError::DuplicateTrigger(w[1].trigger_id));
        }
        if w[1].trigger_id < w[0].trigger_id {
            return Err(KeyStackError::ProtocolDesync(format!(
                "announcements not sorted at trigger {}",
                w[1].trigger_id
            )));
        }
    }
    Ok(())
}

/// Sifting: keeps exactly the triggers present on both sides with matching
/// basis. `invert_local` is set by the party that flips its bits to turn the
/// singlet anticorrelation into a shared key (Bob in this implementation).
pub fn sift(
    local: &[TriggerRecord],
    remote: &[Announcement],
    invert_local: bool,
) -> Result<Vec<SiftedBit>, KeyStackError> {
    let local_ann: Vec<Announcement> = local
        .iter()
        .map(|r| Announcement { trigger_id: r.trigger_id, basis: r.basis })
        .collect();
    check_sorted(&local_ann)?;
    check_sorted(remote)?;

    let mut out = Vec::new();
    let mut ri = 0usize;
    for rec in local {
        while ri < remote.len() && remote[ri].trigger_id < rec.trigger_id {
            ri += 1;
        }
        if ri < remote.len()
            && remote[ri].trigger_id == rec.trigger_id
            && remote[ri].basis == rec.basis
        {
            out.push(SiftedBit {
                trigger_id: rec.trigger_id,
                bit: rec.bit ^ invert_local,
                timestamp_ps: rec.timestamp_ps,
            });
        }
    }
    Ok(out)
}

/// Packs sifted bits into fixed-size blocks; the tail fragment stays inside
/// until enough bits arrive (and is dropped at end of run).
#[derive(Debug)]
pub struct BlockAssembler {
    block_size: usize,
    pending_bits: Vec<bool>,
    pending_last_ts: i64,
    next_block_id: u64,
}

impl BlockAssembler {
    pub fn new(block_size: usize) -> Self {
        Self { block_size, pending_bits: Vec::new(), pending_last_ts: 0, next_block_id: 0 }
    }

    pub fn push(&mut self, sifted: &[SiftedBit]) -> Vec<SiftedBlock> {
        let mut complete = Vec::new();
        for s in sifted {
            self.pending_bits.push(s.bit);
            self.pending_last_ts = s.timestamp_ps;
            if self.pending_bits.len() == self.block_size {
                let bits = BitBuf::from_bools(&self.pending_bits);
                self.pending_bits.clear();
                complete.push(SiftedBlock {
                    bits,
                    block_id: self.next_block_id,
                    disclosed_bits: 0,
                    end_timestamp_ps: self.pending_last_ts,
                });
                self.next_block_id += 1;
            }
        }
        complete
    }

    /// Bits currently buffered in the incomplete tail block.
    pub fn pending(&self) -> usize {
        self.pending_bits.len()
    }
}

/// Per-block QBER estimator: corrected bits over block length. This is the
/// series that drives the management interrupts.
pub fn estimate_qber(corrections: usize, block_len: usize) -> f64 {
    assert!(block_len > 0, "block length must be positive");
    corrections as f64 / block_len as f64
}

/// Secure output length for a reconciled block: ⌊n·(1−τ(e)) − disclosed⌋.
pub fn pa_output_length(n: usize, e_measured: f64, disclosed_bits: usize) -> Result<usize, KeyStackError> {
    let tau = analytic::pa_fraction_tau(e_measured)
        .map_err(|_| KeyStackError::QberEstimateOutOfRange(e_measured))?;
    let m = (n as f64 * (1.0 - tau) - disclosed_bits as f64).floor();
    if m <= 0.0 {
        return Err(KeyStackError::BlockUnusable { n, disclosed: disclosed_bits });
    }
    Ok(m as usize)
}

/// Privacy amplification: applies the Toeplitz matrix defined by the public
/// `diagonals` string (n+m−1 bits) to a corrected block.
pub fn privacy_amplify(
    block: &SiftedBlock,
    e_measured: f64,
    diagonals: &BitBuf,
    epsilon_auth: f64,
) -> Result<SecureKey, KeyStackError> {
    let n = block.bits.len();
    let m = pa_output_length(n, e_measured, block.disclosed_bits)?;
    if diagonals.len() != n + m - 1 {
        return Err(KeyStackError::ProtocolDesync(format!(
            "PA seed length {} != n+m-1 = {}",
            diagonals.len(),
            n + m - 1
        )));
    }
    Ok(SecureKey {
        bits: toeplitz::toeplitz_apply(diagonals, &block.bits, m),
        source_block_ids: vec![block.block_id],
        epsilon_auth,
    })
}

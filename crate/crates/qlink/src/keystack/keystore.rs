//! Authentication key store with strictly monotone consumption.
//!
//! Each channel direction owns one [`KeyStream`]; bytes are handed out once
//! and can never be re-read (there is no indexed access). The store is
//! bootstrapped from the pre-shared key file and replenished from produced
//! secure keys.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KeyStackError {
    #[error("authentication starvation: needed {needed} key bytes, {available} available")]
    AuthStarvation { needed: usize, available: usize },
    #[error("duplicate trigger id {0} in announcements")]
    DuplicateTrigger(u64),
    #[error("sifted block size mismatch: {0} vs {1}")]
    BlockSizeMismatch(usize, usize),
    #[error("QBER estimate {0} outside (0, 0.12]")]
    QberEstimateOutOfRange(f64),
    #[error("reconciliation failed: residual mismatch after final verification")]
    ReconciliationFailed,
    #[error("privacy amplification would leave no key (n={n}, disclosed={disclosed})")]
    BlockUnusable { n: usize, disclosed: usize },
    #[error("cascade protocol desync: {0}")]
    ProtocolDesync(String),
}

/// One direction's worth of shared secret bytes, consumed front to back.
#[derive(Debug)]
pub struct KeyStream {
    segments: std::collections::VecDeque<Vec<u8>>,
    offset: usize,
    available: usize,
    consumed: usize,
}

impl KeyStream {
    pub fn new(initial: Vec<u8>) -> Self {
        let available = initial.len();
        let mut segments = std::collections::VecDeque::new();
        if !initial.is_empty() {
            segments.push_back(initial);
        }
        Self { segments, offset: 0, available, consumed: 0 }
    }

    /// Appends fresh key material (replenishment from distilled keys).
    pub fn replenish(&mut self, bytes: Vec<u8>) {
        self.available += bytes.len();
        if !bytes.is_empty() {
            self.segments.push_back(bytes);
        }
    }

    /// Consumes exactly `n` bytes. Consumed bytes are gone: the cursor only
    /// moves forward.
    pub fn take(&mut self, n: usize) -> Result<Vec<u8>, KeyStackError> {
        if n > self.available {
            return Err(KeyStackError::AuthStarvation { needed: n, available: self.available });
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let front = self.segments.front().expect("available bytes imply a segment");
            let want = n - out.len();
            let have = front.len() - self.offset;
            let take = want.min(have);
            out.extend_from_slice(&front[self.offset..self.offset + take]);
            self.offset += take;
            if self.offset == front.len() {
                self.segments.pop_front();
                self.offset = 0;
            }
        }
        self.available -= n;
        self.consumed += n;
        Ok(out)
    }

    pub fn available(&self) -> usize {
        self.available
    }

    /// Total bytes ever consumed; monotone non-decreasing.
    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn take_is_monotone_and_exact() {
        let mut s = KeyStream::new((0u8..100).collect());
        assert_eq!(s.take(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(s.take(4).unwrap(), vec![3, 4, 5, 6]);
        assert_eq!(s.consumed(), 7);
        assert_eq!(s.available(), 93);
    }

    #[test]
    fn starvation_reports_shortfall() {
        let mut s = KeyStream::new(vec![1, 2, 3]);
        let err = s.take(10).unwrap_err();
        assert_eq!(err, KeyStackError::AuthStarvation { needed: 10, available: 3 });
        // A failed take consumes nothing.
        assert_eq!(s.take(3).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn replenished_bytes_follow_in_order() {
        let mut s = KeyStream::new(vec![9, 8]);
        s.replenish(vec![7, 6, 5]);
        assert_eq!(s.take(4).unwrap(), vec![9, 8, 7, 6]);
        assert_eq!(s.available(), 1);
    }
}

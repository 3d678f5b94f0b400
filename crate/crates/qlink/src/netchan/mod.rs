//! Classical channel between the two endpoints: framed, partially
//! authenticated messages over a reliable ordered byte stream, plus the
//! delivery of the simulated quantum event feed.
//!
//! # Wire format
//!
//! Every frame is laid out as
//!
//! ```text
//! +--------+---------+----------+------------+---------+------------+
//! | magic  | version | msg_type | length     | payload | auth_tag   |
//! | "QLNK" | 0x01    | 1 byte   | u32 BE     | N bytes | 8 bytes(*) |
//! +--------+---------+----------+------------+---------+------------+
//! ```
//!
//! (*) present exactly on authenticated message types (BasisAnnounce,
//! CascadeParityRequest/Reply, BlockVerify, PaSeed, ControlCmd). The tag is
//! a GF(2⁶⁴) evaluation hash over header+payload, masked with a fresh
//! 64-bit one-time pad from the pre-shared/distilled key stream.
//!
//! Integers inside payloads are unsigned LEB128 varints unless stated
//! otherwise; trigger ids and timestamps are delta-coded.

pub mod transport;

use thiserror::Error;

use crate::keystack::auth::Authenticator;
use crate::keystack::bits::BitBuf;
use crate::keystack::cascade::ParityRange;
use crate::keystack::keystore::{KeyStackError, KeyStream};
use crate::keystack::{Announcement, TriggerRecord};
use crate::linksim::RunRecord;
use crate::polmath::Basis;
use transport::Transport;

pub const MAGIC: [u8; 4] = *b"QLNK";
pub const VERSION: u8 = 1;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum NetChanError {
    #[error("i/o failure on classical channel: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("key stack failure: {0}")]
    KeyStack(#[from] KeyStackError),
    #[error("connection lost")]
    ConnectionLost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    BasisAnnounce = 1,
    DetectionReport = 2,
    CascadeParityRequest = 3,
    CascadeParityReply = 4,
    BlockVerify = 5,
    PaSeed = 6,
    QberReport = 7,
    ControlCmd = 8,
    Heartbeat = 9,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::BasisAnnounce,
            2 => Self::DetectionReport,
            3 => Self::CascadeParityRequest,
            4 => Self::CascadeParityReply,
            5 => Self::BlockVerify,
            6 => Self::PaSeed,
            7 => Self::QberReport,
            8 => Self::ControlCmd,
            9 => Self::Heartbeat,
            _ => return None,
        })
    }

    /// Types that always carry an authentication tag.
    pub fn is_authenticated(self) -> bool {
        matches!(
            self,
            Self::BasisAnnounce
                | Self::CascadeParityRequest
                | Self::CascadeParityReply
                | Self::BlockVerify
                | Self::PaSeed
                | Self::ControlCmd
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub msg_type: MessageType,
    pub payload: Vec<u8>,
}

/// Header + payload bytes that the authentication tag covers.
fn tag_scope(msg_type: MessageType, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(10 + payload.len());
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.push(msg_type as u8);
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(payload);
    buf
}

/// What `recv` hands back: a verified frame, or notice that a tampered
/// frame was dropped.
#[derive(Debug)]
pub enum Received {
    Frame(Frame),
    SecurityAlert { msg_type: MessageType },
}

/// Transcript statistics for the security audit: which frame types flowed
/// and how many key-derived bits each type disclosed.
#[derive(Debug, Default, Clone)]
pub struct TranscriptStats {
    pub frames_sent: usize,
    pub frames_received: usize,
    pub parity_bits: usize,
    pub verify_hash_bits: usize,
    pub announce_frames: usize,
    pub payload_bytes_by_type: [usize; 10],
}

/// One direction of the classical channel with authentication and
/// bookkeeping. Both endpoints hold one with mirrored key streams.
pub struct SecureChannel {
    transport: Box<dyn Transport>,
    tx_auth: Authenticator,
    rx_auth: Authenticator,
    tx_stream: KeyStream,
    rx_stream: KeyStream,
    pub stats: TranscriptStats,
    pub alerts: usize,
}

impl SecureChannel {
    /// `tx_key`/`rx_key` are the directional halves of the pre-shared key:
    /// the sender's tx half must be the receiver's rx half.
    pub fn new(transport: Box<dyn Transport>, tx_key: Vec<u8>, rx_key: Vec<u8>) -> Self {
        Self {
            transport,
            tx_auth: Authenticator::new(),
            rx_auth: Authenticator::new(),
            tx_stream: KeyStream::new(tx_key),
            rx_stream: KeyStream::new(rx_key),
            stats: TranscriptStats::default(),
            alerts: 0,
        }
    }

    /// Draws fresh evaluation-hash keys for both directions; called at
    /// session start and after every distilled block.
    pub fn rotate_auth_keys(&mut self) -> Result<(), NetChanError> {
        self.tx_auth.rotate_key(&mut self.tx_stream)?;
        self.rx_auth.rotate_key(&mut self.rx_stream)?;
        Ok(())
    }

    /// Appends distilled key material to both directional streams.
    pub fn replenish(&mut self, tx_bytes: Vec<u8>, rx_bytes: Vec<u8>) {
        self.tx_stream.replenish(tx_bytes);
        self.rx_stream.replenish(rx_bytes);
    }

    pub fn auth_key_available(&self) -> (usize, usize) {
        (self.tx_stream.available(), self.rx_stream.available())
    }

    pub fn auth_key_consumed(&self) -> (usize, usize) {
        (self.tx_stream.consumed(), self.rx_stream.consumed())
    }

    pub fn send(&mut self, msg_type: MessageType, payload: &[u8]) -> Result<(), NetChanError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(NetChanError::Malformed(format!("payload too large: {}", payload.len())));
        }
        let mut frame = tag_scope(msg_type, payload);
        if msg_type.is_authenticated() {
            let tag = self.tx_auth.tag(&frame, &mut self.tx_stream)?;
            frame.extend_from_slice(&tag);
        }
        self.transport.write_all(&frame)?;
        self.transport.flush()?;
        self.stats.frames_sent += 1;
        self.stats.payload_bytes_by_type[msg_type as usize] += payload.len();
        self.track_disclosure(msg_type, payload, true);
        Ok(())
    }

    fn track_disclosure(&mut self, msg_type: MessageType, payload: &[u8], outbound: bool) {
        match msg_type {
            MessageType::CascadeParityReply => {
                if let Ok((_, bits)) = decode_parity_reply(payload) {
                    self.stats.parity_bits += bits.len();
                }
            }
            MessageType::BlockVerify => {
                // Only the corrector's hash report discloses key material;
                // the verdict echo repeats it.
                if let Ok(v) = decode_block_verify(payload) {
                    if v.role == VerifyRole::Report {
                        self.stats.verify_hash_bits += 64;
                    }
                }
            }
            MessageType::BasisAnnounce => {
                if outbound {
                    self.stats.announce_frames += 1;
                }
            }
            _ => {}
        }
    }

    /// Receives the next frame. Authenticated types are verified before
    /// being surfaced; a bad tag drops the frame and raises an alert.
    pub fn recv(&mut self) -> Result<Received, NetChanError> {
        let mut header = [0u8; 10];
        self.transport.read_exact(&mut header).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof
                || e.kind() == std::io::ErrorKind::ConnectionReset
                || e.kind() == std::io::ErrorKind::ConnectionAborted
            {
                NetChanError::ConnectionLost
            } else {
                NetChanError::Io(e)
            }
        })?;
        if header[0..4] != MAGIC {
            return Err(NetChanError::Malformed("bad magic".into()));
        }
        if header[4] != VERSION {
            return Err(NetChanError::Malformed(format!("unsupported version {}", header[4])));
        }
        let msg_type = MessageType::from_u8(header[5]).ok_or(NetChanError::UnknownType(header[5]))?;
        let len = u32::from_be_bytes(header[6..10].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(NetChanError::Malformed(format!("oversized payload {len}")));
        }
        let mut payload = vec![0u8; len];
        self.transport.read_exact(&mut payload)?;
        self.stats.frames_received += 1;
        if msg_type.is_authenticated() {
            let mut tag = [0u8; 8];
            self.transport.read_exact(&mut tag)?;
            let scope = tag_scope(msg_type, &payload);
            if !self.rx_auth.verify(&scope, &tag, &mut self.rx_stream)? {
                self.alerts += 1;
                return Ok(Received::SecurityAlert { msg_type });
            }
        }
        self.track_disclosure(msg_type, &payload, false);
        Ok(Received::Frame(Frame { msg_type, payload }))
    }
}

// ---------------------------------------------------------------------------
// varint + payload codecs
// ---------------------------------------------------------------------------

pub fn put_varint(buf: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            buf.push(byte);
            return;
        }
        buf.push(byte | 0x80);
    }
}

pub fn get_varint(buf: &[u8], pos: &mut usize) -> Result<u64, NetChanError> {
    let mut out = 0u64;
    let mut shift = 0u32;
    loop {
        let byte = *buf.get(*pos).ok_or_else(|| NetChanError::Malformed("truncated varint".into()))?;
        *pos += 1;
        out |= ((byte & 0x7f) as u64) << shift;
        if byte & 0x80 == 0 {
            return Ok(out);
        }
        shift += 7;
        if shift >= 64 {
            return Err(NetChanError::Malformed("varint overflow".into()));
        }
    }
}

/// Basis announcements: count, then per record varint((Δid << 1) | basis).
pub fn encode_announce(records: &[Announcement]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(records.len() * 2 + 4);
    put_varint(&mut buf, records.len() as u64);
    let mut prev = 0u64;
    for r in records {
        let delta = r.trigger_id - prev;
        prev = r.trigger_id;
        put_varint(&mut buf, (delta << 1) | r.basis.index() as u64);
    }
    buf
}

pub fn decode_announce(payload: &[u8]) -> Result<Vec<Announcement>, NetChanError> {
    let mut pos = 0usize;
    let count = get_varint(payload, &mut pos)? as usize;
    let mut out = Vec::with_capacity(count);
    let mut prev = 0u64;
    for _ in 0..count {
        let v = get_varint(payload, &mut pos)?;
        prev += v >> 1;
        out.push(Announcement { trigger_id: prev, basis: Basis::from_index((v & 1) as usize) });
    }
    Ok(out)
}

/// Simulated quantum feed: Bob's detection records (this frame stands in
/// for the photons themselves, so it is intentionally unauthenticated).
pub fn encode_detection_report(records: &[TriggerRecord]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(records.len() * 4 + 4);
    put_varint(&mut buf, records.len() as u64);
    let mut prev_id = 0u64;
    let mut prev_ts = 0i64;
    for r in records {
        put_varint(&mut buf, r.trigger_id - prev_id);
        prev_id = r.trigger_id;
        buf.push(((r.basis.index() as u8) << 1) | r.bit as u8);
        put_varint(&mut buf, (r.timestamp_ps - prev_ts) as u64);
        prev_ts = r.timestamp_ps;
    }
    buf
}

pub fn decode_detection_report(payload: &[u8]) -> Result<Vec<TriggerRecord>, NetChanError> {
    let mut pos = 0usize;
    let count = get_varint(payload, &mut pos)? as usize;
    let mut out = Vec::with_capacity(count);
    let mut prev_id = 0u64;
    let mut prev_ts = 0i64;
    for _ in 0..count {
        prev_id += get_varint(payload, &mut pos)?;
        let flags = *payload
            .get(pos)
            .ok_or_else(|| NetChanError::Malformed("truncated detection report".into()))?;
        pos += 1;
        prev_ts += get_varint(payload, &mut pos)? as i64;
        out.push(TriggerRecord {
            trigger_id: prev_id,
            basis: Basis::from_index((flags >> 1) as usize & 1),
            bit: flags & 1 == 1,
            timestamp_ps: prev_ts,
        });
    }
    Ok(out)
}

pub fn encode_parity_request(block_id: u64, ranges: &[ParityRange]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(ranges.len() * 6 + 8);
    put_varint(&mut buf, block_id);
    put_varint(&mut buf, ranges.len() as u64);
    for r in ranges {
        buf.push(r.pass);
        put_varint(&mut buf, r.start as u64);
        put_varint(&mut buf, r.len as u64);
    }
    buf
}

pub fn decode_parity_request(payload: &[u8]) -> Result<(u64, Vec<ParityRange>), NetChanError> {
    let mut pos = 0usize;
    let block_id = get_varint(payload, &mut pos)?;
    let count = get_varint(payload, &mut pos)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pass = *payload
            .get(pos)
            .ok_or_else(|| NetChanError::Malformed("truncated parity request".into()))?;
        pos += 1;
        let start = get_varint(payload, &mut pos)? as u32;
        let len = get_varint(payload, &mut pos)? as u32;
        out.push(ParityRange { pass, start, len });
    }
    Ok((block_id, out))
}

pub fn encode_parity_reply(block_id: u64, bits: &[bool]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(bits.len() / 8 + 10);
    put_varint(&mut buf, block_id);
    put_varint(&mut buf, bits.len() as u64);
    let packed = BitBuf::from_bools(bits);
    buf.extend_from_slice(&packed.to_bytes());
    buf
}

pub fn decode_parity_reply(payload: &[u8]) -> Result<(u64, Vec<bool>), NetChanError> {
    let mut pos = 0usize;
    let block_id = get_varint(payload, &mut pos)?;
    let count = get_varint(payload, &mut pos)? as usize;
    let bytes = payload
        .get(pos..pos + count.div_ceil(8))
        .ok_or_else(|| NetChanError::Malformed("truncated parity reply".into()))?;
    let packed = BitBuf::from_bytes(bytes, count);
    Ok((block_id, (0..count).map(|i| packed.get(i)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyRole {
    /// Corrector reporting its hash and correction count.
    Report,
    /// Responder's verdict echo.
    Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockVerifyMsg {
    pub block_id: u64,
    pub corrections: u64,
    pub hash: u64,
    pub role: VerifyRole,
    pub ok: bool,
}

pub fn encode_block_verify(msg: &BlockVerifyMsg) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24);
    put_varint(&mut buf, msg.block_id);
    put_varint(&mut buf, msg.corrections);
    buf.extend_from_slice(&msg.hash.to_le_bytes());
    buf.push(match msg.role {
        VerifyRole::Report => 0,
        VerifyRole::Verdict => 1,
    });
    buf.push(msg.ok as u8);
    buf
}

pub fn decode_block_verify(payload: &[u8]) -> Result<BlockVerifyMsg, NetChanError> {
    let mut pos = 0usize;
    let block_id = get_varint(payload, &mut pos)?;
    let corrections = get_varint(payload, &mut pos)?;
    let hash_bytes = payload
        .get(pos..pos + 8)
        .ok_or_else(|| NetChanError::Malformed("truncated block verify".into()))?;
    pos += 8;
    let rest = payload
        .get(pos..pos + 2)
        .ok_or_else(|| NetChanError::Malformed("truncated block verify".into()))?;
    Ok(BlockVerifyMsg {
        block_id,
        corrections,
        hash: u64::from_le_bytes(hash_bytes.try_into().unwrap()),
        role: if rest[0] == 0 { VerifyRole::Report } else { VerifyRole::Verdict },
        ok: rest[1] == 1,
    })
}

pub fn encode_pa_seed(block_id: u64, m: usize, diagonals: &BitBuf) -> Vec<u8> {
    let mut buf = Vec::with_capacity(diagonals.len() / 8 + 16);
    put_varint(&mut buf, block_id);
    put_varint(&mut buf, m as u64);
    put_varint(&mut buf, diagonals.len() as u64);
    buf.extend_from_slice(&diagonals.to_bytes());
    buf
}

pub fn decode_pa_seed(payload: &[u8]) -> Result<(u64, usize, BitBuf), NetChanError> {
    let mut pos = 0usize;
    let block_id = get_varint(payload, &mut pos)?;
    let m = get_varint(payload, &mut pos)? as usize;
    let bits = get_varint(payload, &mut pos)? as usize;
    let bytes = payload
        .get(pos..pos + bits.div_ceil(8))
        .ok_or_else(|| NetChanError::Malformed("truncated PA seed".into()))?;
    Ok((block_id, m, BitBuf::from_bytes(bytes, bits)))
}

pub fn encode_qber_report(block_id: u64, qber: f64) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16);
    put_varint(&mut buf, block_id);
    buf.extend_from_slice(&qber.to_le_bytes());
    buf
}

pub fn decode_qber_report(payload: &[u8]) -> Result<(u64, f64), NetChanError> {
    let mut pos = 0usize;
    let block_id = get_varint(payload, &mut pos)?;
    let bytes = payload
        .get(pos..pos + 8)
        .ok_or_else(|| NetChanError::Malformed("truncated QBER report".into()))?;
    Ok((block_id, f64::from_le_bytes(bytes.try_into().unwrap())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ControlCode {
    EndOfRun = 0,
    PauseQkd = 1,
    ResumeQkd = 2,
}

pub fn encode_control(code: ControlCode, arg: u64) -> Vec<u8> {
    let mut buf = vec![code as u8];
    put_varint(&mut buf, arg);
    buf
}

pub fn decode_control(payload: &[u8]) -> Result<(ControlCode, u64), NetChanError> {
    let code = match payload.first() {
        Some(0) => ControlCode::EndOfRun,
        Some(1) => ControlCode::PauseQkd,
        Some(2) => ControlCode::ResumeQkd,
        other => return Err(NetChanError::Malformed(format!("bad control code {other:?}"))),
    };
    let mut pos = 1usize;
    let arg = get_varint(payload, &mut pos)?;
    Ok((code, arg))
}

// ---------------------------------------------------------------------------
// Simulated quantum feed projection
// ---------------------------------------------------------------------------

/// Endpoint-local views of a simulated run: each side sees only its own
/// detections; simulator origin tags never appear in these records.
#[derive(Debug, Clone)]
pub struct EndpointViews {
    pub alice: Vec<TriggerRecord>,
    pub bob: Vec<TriggerRecord>,
}

pub fn feed_events(record: &RunRecord) -> EndpointViews {
    EndpointViews { alice: record.alice_records.clone(), bob: record.bob_records.clone() }
}

#[cfg(test)]
mod tests {
    use super::transport::loopback_pair;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn channel_pair(psk_len: usize) -> (SecureChannel, SecureChannel) {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let a_to_b: Vec<u8> = (0..psk_len).map(|_| rng.random()).collect();
        let b_to_a: Vec<u8> = (0..psk_len).map(|_| rng.random()).collect();
        let (ta, tb) = loopback_pair();
        let mut alice = SecureChannel::new(Box::new(ta), a_to_b.clone(), b_to_a.clone());
        let mut bob = SecureChannel::new(Box::new(tb), b_to_a, a_to_b);
        alice.rotate_auth_keys().unwrap();
        bob.rotate_auth_keys().unwrap();
        (alice, bob)
    }

    #[test]
    fn frames_round_trip_byte_identically() {
        let (mut alice, mut bob) = channel_pair(1 << 16);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let len = rng.random_range(0..64usize);
            let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let msg_type =
                if rng.random_bool(0.5) { MessageType::QberReport } else { MessageType::Heartbeat };
            alice.send(msg_type, &payload).unwrap();
            match bob.recv().unwrap() {
                Received::Frame(f) => {
                    assert_eq!(f.msg_type, msg_type);
                    assert_eq!(f.payload, payload);
                }
                Received::SecurityAlert { .. } => panic!("unauthenticated type alerted"),
            }
        }
    }

    #[test]
    fn tampered_payload_is_rejected_with_alert() {
        let (mut alice, mut bob) = channel_pair(4096);
        // Tamper in flight: send through a raw loopback we can intercept.
        let payload = encode_announce(&[Announcement { trigger_id: 7, basis: Basis::PM }]);
        alice.send(MessageType::BasisAnnounce, &payload).unwrap();
        // Pull the raw bytes from bob's transport and flip one payload bit.
        let mut raw = bob.transport.drain_pending();
        assert!(!raw.is_empty());
        raw[11] ^= 0x01;
        bob.transport.inject(raw);
        match bob.recv().unwrap() {
            Received::SecurityAlert { msg_type } => {
                assert_eq!(msg_type, MessageType::BasisAnnounce)
            }
            Received::Frame(_) => panic!("tampered frame accepted"),
        }
        assert_eq!(bob.alerts, 1);
    }

    #[test]
    fn authenticated_round_trip_verifies() {
        let (mut alice, mut bob) = channel_pair(1 << 16);
        for i in 0..200u64 {
            let payload = encode_pa_seed(i, 10, &BitBuf::from_bools(&[true; 17]));
            alice.send(MessageType::PaSeed, &payload).unwrap();
            match bob.recv().unwrap() {
                Received::Frame(f) => {
                    let (id, m, diag) = decode_pa_seed(&f.payload).unwrap();
                    assert_eq!(id, i);
                    assert_eq!(m, 10);
                    assert_eq!(diag.len(), 17);
                }
                Received::SecurityAlert { .. } => panic!("valid frame rejected"),
            }
        }
    }

    #[test]
    fn announce_codec_is_exact_inverse() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut id = 0u64;
        let records: Vec<Announcement> = (0..100_000)
            .map(|_| {
                id += rng.random_range(1..50u64);
                Announcement {
                    trigger_id: id,
                    basis: if rng.random_bool(0.5) { Basis::HV } else { Basis::PM },
                }
            })
            .collect();
        let encoded = encode_announce(&records);
        assert_eq!(decode_announce(&encoded).unwrap(), records);
        // Compactness: ≤ 3 bytes per record at realistic trigger spacing.
        assert!(encoded.len() <= records.len() * 3, "payload {} bytes", encoded.len());
        assert!(decode_announce(&encode_announce(&[])).unwrap().is_empty());
    }

    #[test]
    fn detection_report_codec_round_trips() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut id = 0u64;
        let mut ts = 0i64;
        let records: Vec<TriggerRecord> = (0..50_000)
            .map(|_| {
                id += rng.random_range(1..40u64);
                ts += rng.random_range(1..5_000_000i64);
                TriggerRecord {
                    trigger_id: id,
                    basis: if rng.random_bool(0.5) { Basis::HV } else { Basis::PM },
                    bit: rng.random_bool(0.5),
                    timestamp_ps: ts,
                }
            })
            .collect();
        let payload = encode_detection_report(&records);
        assert_eq!(decode_detection_report(&payload).unwrap(), records);
    }

    #[test]
    fn parity_codecs_round_trip() {
        let ranges = vec![
            ParityRange { pass: 0, start: 0, len: 25 },
            ParityRange { pass: 2, start: 1000, len: 50 },
        ];
        let payload = encode_parity_request(3, &ranges);
        assert_eq!(decode_parity_request(&payload).unwrap(), (3, ranges));
        let bits = vec![true, false, true, true, false, false, true, false, true];
        let payload = encode_parity_reply(4, &bits);
        assert_eq!(decode_parity_reply(&payload).unwrap(), (4, bits));
    }

    #[test]
    fn block_verify_codec_round_trips() {
        let msg = BlockVerifyMsg {
            block_id: 12,
            corrections: 987,
            hash: 0xdead_beef_cafe_f00d,
            role: VerifyRole::Report,
            ok: false,
        };
        assert_eq!(decode_block_verify(&encode_block_verify(&msg)).unwrap(), msg);
    }

    #[test]
    fn unknown_message_type_is_rejected() {
        let (ta, tb) = loopback_pair();
        let mut bob = SecureChannel::new(Box::new(tb), vec![], vec![]);
        let mut alice_raw = ta;
        let mut frame = Vec::new();
        frame.extend_from_slice(&MAGIC);
        frame.push(VERSION);
        frame.push(200); // not a valid type
        frame.extend_from_slice(&0u32.to_be_bytes());
        use super::transport::Transport as _;
        alice_raw.write_all(&frame).unwrap();
        assert!(matches!(bob.recv(), Err(NetChanError::UnknownType(200))));
    }

    #[test]
    fn feed_events_projects_without_origin_and_reconstructs_pairs() {
        let scenario = crate::linksim::LinkScenario {
            duration_s: 0.05,
            seed: 44,
            ..Default::default()
        };
        let record = crate::linksim::run_link(&scenario).unwrap();
        let views = feed_events(&record);
        // Bob's view covers exactly the coincidence-forming triggers, so the
        // merged views reconstruct the pairing minus origin tags.
        assert_eq!(views.bob.len(), record.coincidences.len());
        for (rec, coin) in views.bob.iter().zip(&record.coincidences) {
            assert_eq!(rec.trigger_id, coin.trigger_id);
            assert_eq!(rec.basis, coin.bob_basis);
        }
        assert_eq!(views.alice.len(), record.truth.triggers as usize);
    }
}

//! Byte transports under the framed channel: in-process loopback for the
//! single-process pipeline and tests, TCP for the paired endpoint services,
//! and record/replay wrappers for transcript audits.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};

/// A reliable ordered byte stream with whole-buffer writes.
pub trait Transport: Send {
    fn write_all(&mut self, buf: &[u8]) -> io::Result<()>;
    fn flush(&mut self) -> io::Result<()>;
    fn read_exact(&mut self, buf: &mut [u8]) -> io::Result<()>;

    /// Test hook: pull everything queued for this receiver (loopback only).
    fn drain_pending(&mut self) -> Vec<u8> {
        Vec::new()
    }

    /// Test hook: push raw bytes in front of the receive buffer.
    fn inject(&mut self, _bytes: Vec<u8>) {}
}

/// In-process transport half; create with [`loopback_pair`].
pub struct LoopbackTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    buffer: Vec<u8>,
    cursor: usize,
}

pub fn loopback_pair() -> (LoopbackTransport, LoopbackTransport) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (
        LoopbackTransport { tx: tx_a, rx: rx_a, buffer: Vec::new(), cursor: 0 },
        LoopbackTransport { tx: tx_b, rx: rx_b, buffer: Vec::new(), cursor: 0 },
    )
}

impl LoopbackTransport {
    fn fill(&mut self) -> io::Result<()> {
        match self.rx.recv() {
            Ok(bytes) => {
                self.compact();
                self.buffer.extend_from_slice(&bytes);
                Ok(())
            }
            Err(_) => Err(io::Error::new(io::ErrorKind::UnexpectedEof, "loopback peer gone")),
        }
    }

    fn compact(&mut self) {
        if self.cursor > 0 {
            self.buffer.drain(..self.cursor);
            self.cursor = 0;
        }
    }
}

impl Transport for LoopbackTransport {
    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "loopback peer gone"))
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> io::Result<()> {
        while self.buffer.len() - self.cursor < buf.len() {
            self.fill()?;
        }
        buf.copy_from_slice(&self.buffer[self.cursor..self.cursor + buf.len()]);
        self.cursor += buf.len();
        Ok(())
    }

    fn drain_pending(&mut self) -> Vec<u8> {
        self.compact();
        let mut out = std::mem::take(&mut self.buffer);
        loop {
            match self.rx.try_recv() {
                Ok(bytes) => out.extend_from_slice(&bytes),
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
        out
    }

    fn inject(&mut self, bytes: Vec<u8>) {
        self.compact();
        let mut fresh = bytes;
        fresh.extend_from_slice(&self.buffer);
        self.buffer = fresh;
    }
}

/// TCP transport; the write half is behind a mutex so a heartbeat thread
/// can interleave whole frames with protocol traffic.
pub struct TcpTransport {
    reader: TcpStream,
    writer: Arc<Mutex<TcpStream>>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let writer = Arc::new(Mutex::new(stream.try_clone()?));
        Ok(Self { reader: stream, writer })
    }

    pub fn set_read_timeout(&self, timeout: Option<std::time::Duration>) -> io::Result<()> {
        self.reader.set_read_timeout(timeout)
    }

    /// Shared handle for out-of-band whole-frame writes (heartbeats).
    pub fn writer_handle(&self) -> TcpWriterHandle {
        TcpWriterHandle { writer: Arc::clone(&self.writer) }
    }
}

#[derive(Clone)]
pub struct TcpWriterHandle {
    writer: Arc<Mutex<TcpStream>>,
}

impl TcpWriterHandle {
    pub fn write_frame(&self, bytes: &[u8]) -> io::Result<()> {
        let mut w = self.writer.lock().expect("tcp writer poisoned");
        w.write_all(bytes)?;
        w.flush()
    }
}

impl Transport for TcpTransport {
    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        let mut w = self.writer.lock().expect("tcp writer poisoned");
        w.write_all(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        let mut w = self.writer.lock().expect("tcp writer poisoned");
        w.flush()
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> io::Result<()> {
        self.reader.read_exact(buf)
    }
}

/// Wraps another transport and logs every inbound byte, so a session can be
/// replayed into a fresh endpoint.
pub struct RecordingTransport {
    inner: Box<dyn Transport>,
    inbound_log: Arc<Mutex<Vec<u8>>>,
}

impl RecordingTransport {
    pub fn new(inner: Box<dyn Transport>) -> (Self, Arc<Mutex<Vec<u8>>>) {
        let log = Arc::new(Mutex::new(Vec::new()));
        (Self { inner, inbound_log: Arc::clone(&log) }, log)
    }
}

impl Transport for RecordingTransport {
    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        self.inner.write_all(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> io::Result<()> {
        self.inner.read_exact(buf)?;
        self.inbound_log.lock().expect("log poisoned").extend_from_slice(buf);
        Ok(())
    }
}

/// Feeds a recorded inbound byte stream to an endpoint; writes are dropped.
pub struct ReplayTransport {
    bytes: Vec<u8>,
    cursor: usize,
}

impl ReplayTransport {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self { bytes, cursor: 0 }
    }
}

impl Transport for ReplayTransport {
    fn write_all(&mut self, _buf: &[u8]) -> io::Result<()> {
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> io::Result<()> {
        if self.cursor + buf.len() > self.bytes.len() {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "replay exhausted"));
        }
        buf.copy_from_slice(&self.bytes[self.cursor..self.cursor + buf.len()]);
        self.cursor += buf.len();
        Ok(())
    }
}

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use super::frame::{MsgType, WireFrame, DEFAULT_MAX_FRAME, FRAME_HEADER_LEN};
use super::message::ProtocolMessage;
use super::WireError;

/// Length-delimited frames over any byte stream.
#[derive(Debug)]
pub struct FramedStream<S> {
    inner: S,
    max_frame: usize,
}

impl<S: Read + Write> FramedStream<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, max_frame: DEFAULT_MAX_FRAME }
    }

    pub fn with_max_frame(mut self, max_frame: usize) -> Self {
        self.max_frame = max_frame;
        self
    }

    pub fn get_ref(&self) -> &S {
        &self.inner
    }

    pub fn into_inner(self) -> S {
        self.inner
    }

    pub fn write_frame(&mut self, frame: &WireFrame) -> Result<(), WireError> {
        if frame.payload.len() > self.max_frame {
            return Err(WireError::Oversize { len: frame.payload.len(), max: self.max_frame });
        }
        self.inner.write_all(&frame.encode())?;
        self.inner.flush()?;
        Ok(())
    }

    /// Reads one frame. `Ok(None)` means the peer closed cleanly between
    /// frames; closing mid-frame is `Truncated`.
    pub fn read_frame(&mut self) -> Result<Option<WireFrame>, WireError> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut header)?;
        if got == 0 {
            return Ok(None);
        }
        if got < FRAME_HEADER_LEN {
            return Err(WireError::Truncated { needed: FRAME_HEADER_LEN - got });
        }
        let len = u32::from_be_bytes(header[..4].try_into().unwrap()) as usize;
        if len > self.max_frame {
            return Err(WireError::Oversize { len, max: self.max_frame });
        }
        let msg_type = MsgType::from_u8(header[4])?;
        let mut payload = vec![0u8; len];
        let got = read_full(&mut self.inner, &mut payload)?;
        if got < len {
            return Err(WireError::Truncated { needed: len - got });
        }
        Ok(Some(WireFrame { msg_type, payload }))
    }

    pub fn send(&mut self, msg: &ProtocolMessage) -> Result<(), WireError> {
        self.write_frame(&msg.to_frame()?)
    }

    pub fn recv(&mut self) -> Result<Option<ProtocolMessage>, WireError> {
        self.read_frame()?.map(|f| ProtocolMessage::from_frame(&f)).transpose()
    }
}

/// Fills `buf` as far as the stream allows; returns bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, WireError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

pub fn tcp_listen(addr: impl ToSocketAddrs) -> Result<TcpListener, WireError> {
    Ok(TcpListener::bind(addr)?)
}

pub fn tcp_connect(addr: impl ToSocketAddrs) -> Result<FramedStream<TcpStream>, WireError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    Ok(FramedStream::new(stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DeviceId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;
    use std::thread;

    fn echo_server() -> (std::net::SocketAddr, thread::JoinHandle<()>) {
        let listener = tcp_listen("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut framed = FramedStream::new(stream);
            while let Some(frame) = framed.read_frame().unwrap() {
                framed.write_frame(&frame).unwrap();
            }
        });
        (addr, handle)
    }

    #[test]
    fn loopback_echo_of_close() {
        let (addr, server) = echo_server();
        let mut client = tcp_connect(addr).unwrap();
        let close = ProtocolMessage::Close { reason: "x".into() };
        client.send(&close).unwrap();
        assert_eq!(client.recv().unwrap(), Some(close));
        drop(client);
        server.join().unwrap();
    }

    #[test]
    fn back_to_back_frames_stay_separate() {
        let a = ProtocolMessage::Accept { device_id: DeviceId(1) }.to_frame().unwrap();
        let b = ProtocolMessage::PullRequest { round: 2 }.to_frame().unwrap();
        let mut bytes = a.encode();
        bytes.extend(b.encode());
        let mut framed = FramedStream::new(Cursor::new(bytes));
        assert_eq!(framed.read_frame().unwrap(), Some(a));
        assert_eq!(framed.read_frame().unwrap(), Some(b));
        assert_eq!(framed.read_frame().unwrap(), None);
    }

    #[test]
    fn close_mid_frame_is_truncation() {
        let bytes = ProtocolMessage::PullRequest { round: 2 }.to_frame().unwrap().encode();
        for cut in 1..bytes.len() {
            let mut framed = FramedStream::new(Cursor::new(bytes[..cut].to_vec()));
            assert!(matches!(framed.read_frame(), Err(WireError::Truncated { .. })), "cut {cut}");
        }
    }

    #[test]
    fn oversize_header_rejected_before_allocation() {
        let mut framed = FramedStream::new(Cursor::new(vec![0xff, 0xff, 0xff, 0xff, 1])).with_max_frame(1024);
        assert_eq!(framed.read_frame(), Err(WireError::Oversize { len: u32::MAX as usize, max: 1024 }));
    }

    #[test]
    fn random_sizes_over_loopback() {
        let (addr, server) = echo_server();
        let mut client = tcp_connect(addr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sizes: Vec<usize> = (0..12).map(|_| rng.random_range(1..=1_000_000)).collect();
        sizes.extend([1, 1_000_000]);
        for size in sizes {
            let payload: Vec<u8> = (0..size).map(|_| rng.random()).collect();
            let frame = WireFrame { msg_type: MsgType::ModelUpdate, payload };
            client.write_frame(&frame).unwrap();
            assert_eq!(client.read_frame().unwrap().as_ref(), Some(&frame));
        }
        drop(client);
        server.join().unwrap();
    }
}

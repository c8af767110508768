//! Moving messages between devices.
//!
//! Wire contract (all integers big-endian unless noted):
//!
//! ```text
//! frame      := length:u32 | msg_type:u8 | payload[length]
//! msg_type   := 1 Request | 2 Accept | 3 Reject | 4 ModelUpdate | 5 PullRequest | 6 Close
//! Request    := app_id_len:u16 | app_id:utf8 | incentive:f64 (IEEE-754 bits, BE) | round_cap:u32
//! Accept     := device_id:u32
//! Reject     := device_id:u32
//! ModelUpdate:= round:u32 | source:u32 | bundle_round:u32 | model_blob
//! PullRequest:= round:u32
//! Close      := reason_len:u16 | reason:utf8
//!
//! model_blob := "ENFD" | version:u8 (=1) | layer_count:u16 | layer*
//! layer      := rows:u32 | cols:u32 | activation:u8 (1 ReLU, 2 softmax)
//!               | weights: rows*cols f32 little-endian, row-major
//!               | biases: rows f32 little-endian
//! ```

mod blob;
mod frame;
mod message;
mod sim;
mod tcp;

pub use blob::{blob_len, decode_model, encode_model};
pub use frame::{decode_frame, MsgType, WireFrame, DEFAULT_MAX_FRAME, FRAME_HEADER_LEN};
pub use message::{decode_message, encode_message, ProtocolMessage};
pub use sim::{Delivery, LinkParams, SendOutcome, SimError, SimNet, SimNetConfig};
pub use tcp::{tcp_connect, tcp_listen, FramedStream};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("truncated input: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("bad model magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported model blob version {0}")]
    UnsupportedVersion(u8),
    #[error("layer shapes do not chain: {0}")]
    ShapeMismatch(String),
    #[error("unknown activation tag {0}")]
    BadActivation(u8),
    #[error("non-finite parameter in model blob")]
    NonFinite,
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("frame of {len} bytes exceeds the {max}-byte limit")]
    Oversize { len: usize, max: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("string field is not valid UTF-8")]
    BadUtf8,
    #[error("string field longer than 65535 bytes")]
    StringTooLong,
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for WireError {
    fn from(e: std::io::Error) -> Self {
        WireError::Io(e.to_string())
    }
}

/// Sequential reader over a byte slice that reports truncation precisely.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(WireError::Truncated { needed: n - left });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64_be(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

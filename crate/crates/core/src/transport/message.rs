use super::blob::{encode_model, read_model};
use super::frame::{decode_frame, MsgType, WireFrame, DEFAULT_MAX_FRAME};
use super::{Cursor, WireError};
use crate::aggregate::ModelBundle;
use crate::DeviceId;

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolMessage {
    Request { app_id: String, incentive: f64, round_cap: u32 },
    Accept { device_id: DeviceId },
    Reject { device_id: DeviceId },
    ModelUpdate { round: u32, bundle: ModelBundle },
    PullRequest { round: u32 },
    Close { reason: String },
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::StringTooLong)?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn get_str(cur: &mut Cursor<'_>) -> Result<String, WireError> {
    let len = cur.u16()? as usize;
    let raw = cur.take(len)?;
    String::from_utf8(raw.to_vec()).map_err(|_| WireError::BadUtf8)
}

impl ProtocolMessage {
    pub fn msg_type(&self) -> MsgType {
        match self {
            ProtocolMessage::Request { .. } => MsgType::Request,
            ProtocolMessage::Accept { .. } => MsgType::Accept,
            ProtocolMessage::Reject { .. } => MsgType::Reject,
            ProtocolMessage::ModelUpdate { .. } => MsgType::ModelUpdate,
            ProtocolMessage::PullRequest { .. } => MsgType::PullRequest,
            ProtocolMessage::Close { .. } => MsgType::Close,
        }
    }

    pub fn to_frame(&self) -> Result<WireFrame, WireError> {
        let mut p = Vec::new();
        match self {
            ProtocolMessage::Request { app_id, incentive, round_cap } => {
                put_str(&mut p, app_id)?;
                p.extend_from_slice(&incentive.to_be_bytes());
                p.extend_from_slice(&round_cap.to_be_bytes());
            }
            ProtocolMessage::Accept { device_id } | ProtocolMessage::Reject { device_id } => {
                p.extend_from_slice(&device_id.0.to_be_bytes());
            }
            ProtocolMessage::ModelUpdate { round, bundle } => {
                p.extend_from_slice(&round.to_be_bytes());
                p.extend_from_slice(&bundle.source.0.to_be_bytes());
                p.extend_from_slice(&bundle.round.to_be_bytes());
                p.extend_from_slice(&encode_model(&bundle.weights));
            }
            ProtocolMessage::PullRequest { round } => p.extend_from_slice(&round.to_be_bytes()),
            ProtocolMessage::Close { reason } => put_str(&mut p, reason)?,
        }
        if p.len() > u32::MAX as usize {
            return Err(WireError::Oversize { len: p.len(), max: u32::MAX as usize });
        }
        Ok(WireFrame { msg_type: self.msg_type(), payload: p })
    }

    pub fn from_frame(frame: &WireFrame) -> Result<Self, WireError> {
        let mut cur = Cursor::new(&frame.payload);
        let msg = match frame.msg_type {
            MsgType::Request => {
                let app_id = get_str(&mut cur)?;
                let incentive = cur.f64_be()?;
                let round_cap = cur.u32()?;
                ProtocolMessage::Request { app_id, incentive, round_cap }
            }
            MsgType::Accept => ProtocolMessage::Accept { device_id: DeviceId(cur.u32()?) },
            MsgType::Reject => ProtocolMessage::Reject { device_id: DeviceId(cur.u32()?) },
            MsgType::ModelUpdate => {
                let round = cur.u32()?;
                let source = DeviceId(cur.u32()?);
                let bundle_round = cur.u32()?;
                let weights = read_model(&mut cur)?;
                ProtocolMessage::ModelUpdate {
                    round,
                    bundle: ModelBundle { source, weights, round: bundle_round },
                }
            }
            MsgType::PullRequest => ProtocolMessage::PullRequest { round: cur.u32()? },
            MsgType::Close => ProtocolMessage::Close { reason: get_str(&mut cur)? },
        };
        cur.finish()?;
        Ok(msg)
    }

    /// Size of the complete encoded frame, header included.
    pub fn wire_len(&self) -> usize {
        self.to_frame().map(|f| f.encoded_len()).unwrap_or(0)
    }
}

pub fn encode_message(msg: &ProtocolMessage) -> Result<Vec<u8>, WireError> {
    Ok(msg.to_frame()?.encode())
}

/// Decodes a buffer holding exactly one frame.
pub fn decode_message(bytes: &[u8]) -> Result<ProtocolMessage, WireError> {
    let (frame, used) = decode_frame(bytes, DEFAULT_MAX_FRAME)?;
    if used != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - used));
    }
    ProtocolMessage::from_frame(&frame)
}

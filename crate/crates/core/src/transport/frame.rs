use super::WireError;

pub const FRAME_HEADER_LEN: usize = 5;
pub const DEFAULT_MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Request = 1,
    Accept = 2,
    Reject = 3,
    ModelUpdate = 4,
    PullRequest = 5,
    Close = 6,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            1 => MsgType::Request,
            2 => MsgType::Accept,
            3 => MsgType::Reject,
            4 => MsgType::ModelUpdate,
            5 => MsgType::PullRequest,
            6 => MsgType::Close,
            other => return Err(WireError::UnknownMsgType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireFrame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Parses one frame from the front of `buf`, returning it with the number of
/// bytes consumed. Incomplete input yields `Truncated` with the shortfall.
pub fn decode_frame(buf: &[u8], max_payload: usize) -> Result<(WireFrame, usize), WireError> {
    if buf.len() < FRAME_HEADER_LEN {
        return Err(WireError::Truncated { needed: FRAME_HEADER_LEN - buf.len() });
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len > max_payload {
        return Err(WireError::Oversize { len, max: max_payload });
    }
    let msg_type = MsgType::from_u8(buf[4])?;
    let total = FRAME_HEADER_LEN + len;
    if buf.len() < total {
        return Err(WireError::Truncated { needed: total - buf.len() });
    }
    Ok((WireFrame { msg_type, payload: buf[FRAME_HEADER_LEN..total].to_vec() }, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = WireFrame { msg_type: MsgType::PullRequest, payload: vec![0, 0, 0, 3] };
        assert_eq!(f.encode(), vec![0, 0, 0, 4, 5, 0, 0, 0, 3]);
        assert_eq!(decode_frame(&f.encode(), DEFAULT_MAX_FRAME).unwrap(), (f, 9));
    }

    #[test]
    fn rejects_bad_headers() {
        assert_eq!(decode_frame(&[0, 0], 10), Err(WireError::Truncated { needed: 3 }));
        assert_eq!(decode_frame(&[0, 0, 0, 0, 9], 10), Err(WireError::UnknownMsgType(9)));
        assert_eq!(decode_frame(&[0, 0, 0, 11, 1], 10), Err(WireError::Oversize { len: 11, max: 10 }));
        assert_eq!(decode_frame(&[0, 0, 0, 2, 1, 7], 10), Err(WireError::Truncated { needed: 1 }));
    }
}

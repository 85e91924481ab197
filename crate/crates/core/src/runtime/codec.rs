//! `MM01` frame codec.
//!
//! ```text
//! magic "MM01" | msg_type u8 | session_id u64 | batch_index u64 | tensor_count u16
//! per tensor: dtype u8 | ndim u8 | dims u32 × ndim | raw little-endian payload
//! crc32 u32 over every preceding byte
//! ```
//! All integers are little-endian.

use crate::model::{checked_byte_len, DType, FeatureTensor};

pub const MAGIC: &[u8; 4] = b"MM01";
/// Bytes before the first tensor descriptor.
pub const HEADER_LEN: usize = 4 + 1 + 8 + 8 + 2;
pub const TRAILER_LEN: usize = 4;
/// Size of a frame without tensors.
pub const EMPTY_FRAME_LEN: usize = HEADER_LEN + TRAILER_LEN;
/// Frames larger than this are rejected instead of buffered.
pub const MAX_FRAME_LEN: usize = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    ForwardFeatures = 2,
    BackwardGrads = 3,
    LabelsEnc = 4,
    Metrics = 5,
    Control = 6,
    Bye = 7,
}

impl MsgType {
    pub const ALL: [MsgType; 7] = [
        MsgType::Hello,
        MsgType::ForwardFeatures,
        MsgType::BackwardGrads,
        MsgType::LabelsEnc,
        MsgType::Metrics,
        MsgType::Control,
        MsgType::Bye,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == code)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMessage {
    pub msg_type: MsgType,
    pub session_id: u64,
    pub batch_index: u64,
    pub tensors: Vec<FeatureTensor>,
}

impl SplitMessage {
    pub fn new(msg_type: MsgType, session_id: u64, batch_index: u64, tensors: Vec<FeatureTensor>) -> Self {
        Self {
            msg_type,
            session_id,
            batch_index,
            tensors,
        }
    }

    /// Sum of the raw tensor payload sizes.
    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(FeatureTensor::byte_len).sum()
    }

    /// Exact size of the encoded frame.
    pub fn frame_len(&self) -> usize {
        EMPTY_FRAME_LEN
            + self
                .tensors
                .iter()
                .map(|t| 2 + 4 * t.shape().len() + t.byte_len())
                .sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    /// More bytes are needed; `needed` is a lower bound on the full frame size.
    #[error("incomplete frame: need at least {needed} bytes")]
    Incomplete { needed: usize },
    #[error("protocol error: bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("protocol error: unknown message type {0}")]
    UnknownType(u8),
    #[error("protocol error: unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("protocol error: frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    /// Checksum mismatch; `frame_len` bytes can be skipped to resynchronize.
    #[error("corrupt frame: crc {actual:08x} != {expected:08x}")]
    Corrupt { expected: u32, actual: u32, frame_len: usize },
}

/// Panics only if a tensor has more than 255 dims, a dim above u32::MAX, or
/// more than u16::MAX tensors, none of which a valid message has.
pub fn encode_message(m: &SplitMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.frame_len());
    out.extend_from_slice(MAGIC);
    out.push(m.msg_type as u8);
    out.extend_from_slice(&m.session_id.to_le_bytes());
    out.extend_from_slice(&m.batch_index.to_le_bytes());
    let count = u16::try_from(m.tensors.len()).expect("at most 65535 tensors per frame");
    out.extend_from_slice(&count.to_le_bytes());
    for t in &m.tensors {
        out.push(t.dtype().code());
        out.push(u8::try_from(t.shape().len()).expect("at most 255 dims"));
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
        }
        out.extend_from_slice(t.bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.saturating_add(n);
        if end > MAX_FRAME_LEN {
            return Err(DecodeError::TooLarge(end));
        }
        if end > self.buf.len() {
            return Err(DecodeError::Incomplete {
                needed: end + TRAILER_LEN,
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes the frame at the start of `bytes`, returning the message and the
/// number of bytes it occupied. The structure is walked to find the frame end,
/// the checksum is verified, and only then are type and dtype codes interpreted.
pub fn decode_message(bytes: &[u8]) -> Result<(SplitMessage, usize), DecodeError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = match c.take(4) {
        Ok(m) => m.try_into().unwrap(),
        Err(e) => {
            // A short prefix that already disagrees with the magic is a protocol error.
            let n = bytes.len().min(4);
            if bytes[..n] != MAGIC[..n] {
                let mut m = [0u8; 4];
                m[..n].copy_from_slice(&bytes[..n]);
                return Err(DecodeError::BadMagic(m));
            }
            return Err(e);
        }
    };
    if &magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let type_code = c.u8()?;
    let session_id = c.u64()?;
    let batch_index = c.u64()?;
    let count = c.u16()? as usize;
    let mut raw = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let dtype_code = c.u8()?;
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        // Width 1 for unknown codes: the checksum is verified before the code is.
        let dtype = DType::from_code(dtype_code);
        let len = checked_byte_len(dtype.unwrap_or(DType::U8), &shape).ok_or(DecodeError::TooLarge(usize::MAX))?;
        let data = c.take(len)?;
        raw.push((dtype_code, dtype, shape, data));
    }
    let body_end = c.pos;
    let expected = c.u32()?;
    let actual = crc32fast::hash(&bytes[..body_end]);
    let frame_len = c.pos;
    if expected != actual {
        return Err(DecodeError::Corrupt {
            expected,
            actual,
            frame_len,
        });
    }
    let msg_type = MsgType::from_code(type_code).ok_or(DecodeError::UnknownType(type_code))?;
    let tensors = raw
        .into_iter()
        .map(|(code, dtype, shape, data)| {
            let dtype = dtype.ok_or(DecodeError::UnknownDtype(code))?;
            Ok(FeatureTensor::new(dtype, shape, data.to_vec()).expect("length checked while walking the frame"))
        })
        .collect::<Result<Vec<_>, DecodeError>>()?;
    Ok((
        SplitMessage {
            msg_type,
            session_id,
            batch_index,
            tensors,
        },
        frame_len,
    ))
}

//! Label channel: ChaCha20-Poly1305 under a pre-shared 32-byte session key.
//! The nonce is `session_id` (8 bytes LE) followed by the epoch (4 bytes LE).

use ring::aead::{Aad, LessSafeKey, Nonce, UnboundKey, CHACHA20_POLY1305, NONCE_LEN};

use crate::data::Labels;
use crate::error::{Error, Result};
use crate::model::{DType, FeatureTensor};

use super::codec::{decode_message, encode_message, MsgType, SplitMessage};

pub const KEY_LEN: usize = 32;
/// Epoch slot reserved for the HELLO key check.
const KEY_CHECK_EPOCH: u32 = u32::MAX;
const KEY_CHECK_PLAINTEXT: &[u8] = b"metamorph label channel";

#[derive(Clone)]
pub struct LabelCipher {
    key: [u8; KEY_LEN],
}

impl std::fmt::Debug for LabelCipher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LabelCipher(..)")
    }
}

impl LabelCipher {
    pub fn new(key: [u8; KEY_LEN]) -> Self {
        Self { key }
    }

    /// Parses a 64-character hex key.
    pub fn from_hex(hex_key: &str) -> Result<Self> {
        let bytes = hex::decode(hex_key.trim()).map_err(|e| Error::Config(format!("runtime.key: {e}")))?;
        let key: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| Error::Config(format!("runtime.key must be {KEY_LEN} bytes, got {}", b.len())))?;
        Ok(Self::new(key))
    }

    fn key(&self) -> LessSafeKey {
        LessSafeKey::new(UnboundKey::new(&CHACHA20_POLY1305, &self.key).expect("32-byte key"))
    }

    fn nonce(session_id: u64, epoch: u32) -> Nonce {
        let mut n = [0u8; NONCE_LEN];
        n[..8].copy_from_slice(&session_id.to_le_bytes());
        n[8..].copy_from_slice(&epoch.to_le_bytes());
        Nonce::assume_unique_for_key(n)
    }

    pub fn seal(&self, session_id: u64, epoch: u32, plaintext: &[u8]) -> Vec<u8> {
        let mut buf = plaintext.to_vec();
        self.key()
            .seal_in_place_append_tag(Self::nonce(session_id, epoch), Aad::empty(), &mut buf)
            .expect("plaintext within the AEAD length limit");
        buf
    }

    pub fn open(&self, session_id: u64, epoch: u32, ciphertext: &[u8]) -> Result<Vec<u8>> {
        let mut buf = ciphertext.to_vec();
        let plain = self
            .key()
            .open_in_place(Self::nonce(session_id, epoch), Aad::empty(), &mut buf)
            .map_err(|_| Error::Session(format!("label decryption failed for epoch {epoch}")))?;
        Ok(plain.to_vec())
    }

    /// Token sent in HELLO so a peer with a different key aborts before any features flow.
    pub fn key_check(&self, session_id: u64) -> Vec<u8> {
        self.seal(session_id, KEY_CHECK_EPOCH, KEY_CHECK_PLAINTEXT)
    }

    pub fn verify_key_check(&self, session_id: u64, token: &[u8]) -> bool {
        self.open(session_id, KEY_CHECK_EPOCH, token)
            .is_ok_and(|p| p == KEY_CHECK_PLAINTEXT)
    }
}

/// Serializes per-batch labels as a frame of tensors: class labels as `[n, 4]`
/// u8 (u32 LE per sample), masks as `[n, h, w, 4]` u8, dense targets as f32.
pub fn encode_labels(batches: &[Labels]) -> Result<Vec<u8>> {
    let u32_bytes = |v: &[u32]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
    let tensors = batches
        .iter()
        .map(|l| match l {
            Labels::Class(v) => FeatureTensor::new(DType::U8, vec![v.len(), 4], u32_bytes(v)),
            Labels::Mask { labels, height, width } => {
                let n = labels.len() / (height * width).max(1);
                FeatureTensor::new(DType::U8, vec![n, *height, *width, 4], u32_bytes(labels))
            }
            Labels::Dense(t) => Ok(FeatureTensor::from_tensor(t, DType::F32)),
        })
        .collect::<Result<Vec<_>>>()?;
    if tensors.len() > usize::from(u16::MAX) {
        return Err(Error::Config(format!("{} batches per epoch exceed the label frame limit", tensors.len())));
    }
    Ok(encode_message(&SplitMessage::new(MsgType::LabelsEnc, 0, 0, tensors)))
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<Labels>> {
    let (m, used) = decode_message(bytes)?;
    if used != bytes.len() {
        return Err(Error::Protocol("trailing bytes after the label record".into()));
    }
    let u32s = |b: &[u8]| b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<u32>>();
    m.tensors
        .iter()
        .map(|t| match (t.dtype(), t.shape()) {
            (DType::U8, [_, 4]) => Ok(Labels::Class(u32s(t.bytes()))),
            (DType::U8, &[_, height, width, 4]) => Ok(Labels::Mask {
                labels: u32s(t.bytes()),
                height,
                width,
            }),
            (DType::F32, _) => t.to_tensor().map(Labels::Dense),
            (d, s) => Err(Error::Protocol(format!("unexpected label tensor {d:?} {s:?}"))),
        })
        .collect()
}

//! Producer/consumer split training over a framed byte-stream protocol.

mod codec;
mod crypto;
mod rtt;
mod session;
mod transport;

pub use codec::{
    decode_message, encode_message, DecodeError, MsgType, SplitMessage, EMPTY_FRAME_LEN, HEADER_LEN, MAGIC,
    MAX_FRAME_LEN, TRAILER_LEN,
};
pub use crypto::{decode_labels, encode_labels, LabelCipher, KEY_LEN};
pub use rtt::{measure_rtt, rtt_table, RttRecord, RttSummary};
pub use session::{
    consumer_step, run_consumer, run_producer, ConsumerOutcome, ProducerOutcome, SessionConfig, SessionStatus,
};
pub use transport::{Control, Transport};

use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{DType, FeatureTensor};
use crate::tensor::Tensor;

/// Writes captured frames back to back, as they crossed the wire.
pub fn write_capture(path: &Path, frames: &[Vec<u8>]) -> Result<()> {
    std::fs::write(path, frames.concat()).map_err(|e| Error::io(path, e))
}

/// Splits a capture dump back into messages.
pub fn read_capture(bytes: &[u8]) -> Result<Vec<SplitMessage>> {
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let (m, used) = decode_message(rest)?;
        out.push(m);
        rest = &rest[used..];
    }
    Ok(out)
}

/// Feature/gradient exchange over loopback without any model work: the echo
/// peer answers every f32 feature frame with a gradient frame of the same
/// shape. Sizes are interleaved round by round; `warmup` rounds per size are
/// discarded.
pub fn loopback_rtt(payload_bytes: &[usize], rounds: usize, warmup: usize) -> Result<Vec<RttRecord>> {
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| Error::Session(format!("bind: {e}")))?;
    let addr = listener.local_addr().map_err(|e| Error::Session(e.to_string()))?;
    let timeout = Some(Duration::from_secs(30));
    let echo = std::thread::spawn(move || -> Result<()> {
        let (stream, _) = listener.accept().map_err(|e| Error::Session(format!("accept: {e}")))?;
        let mut t = Transport::new(stream, timeout)?;
        loop {
            let m = t.recv()?;
            match m.msg_type {
                MsgType::ForwardFeatures => {
                    let shape = m.tensors.first().map(|f| f.shape().to_vec()).unwrap_or_default();
                    let grad = Tensor::zeros(shape);
                    t.send(&SplitMessage::new(
                        MsgType::BackwardGrads,
                        m.session_id,
                        m.batch_index,
                        vec![FeatureTensor::from_tensor(&grad, DType::F32)],
                    ))?;
                }
                _ => return Ok(()),
            }
        }
    });
    let stream = TcpStream::connect(addr).map_err(|e| Error::Session(format!("connect {addr}: {e}")))?;
    let mut t = Transport::new(stream, timeout)?;
    let start = Instant::now();
    let mut records = Vec::new();
    let mut batch = 0u64;
    for round in 0..warmup + rounds {
        for &bytes in payload_bytes {
            let n = bytes.div_ceil(4);
            let features = Tensor::new([n], (0..n).map(|i| i as f32).collect());
            let frame = SplitMessage::new(
                MsgType::ForwardFeatures,
                1,
                batch,
                vec![FeatureTensor::from_tensor(&features, DType::F32)],
            );
            let send_timestamp = start.elapsed().as_micros() as u64;
            let sent = Instant::now();
            t.send(&frame)?;
            let reply = t.recv()?;
            let rtt_ms = sent.elapsed().as_secs_f64() * 1e3;
            if reply.msg_type != MsgType::BackwardGrads || reply.batch_index != batch {
                return Err(Error::Protocol("echo peer answered out of order".into()));
            }
            if round >= warmup {
                records.push(RttRecord {
                    batch_index: batch,
                    payload_bytes: frame.payload_bytes(),
                    send_timestamp,
                    ack_timestamp: start.elapsed().as_micros() as u64,
                    rtt_ms,
                });
            }
            batch += 1;
        }
    }
    t.send(&SplitMessage::new(MsgType::Bye, 1, batch, vec![]))?;
    echo.join().map_err(|_| Error::Session("echo peer panicked".into()))??;
    Ok(records)
}

#[cfg(test)]
mod tests;

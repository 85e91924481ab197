//! Framed message exchange over a TCP stream with NACK-driven retransmission.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use log::warn;

use crate::error::{Error, Result};
use crate::model::FeatureTensor;

use super::codec::{decode_message, encode_message, DecodeError, MsgType, SplitMessage};

/// Consecutive corrupt frames tolerated before the session gives up.
const MAX_CORRUPT: usize = 3;

/// Records carried in CONTROL messages, as the first byte of a u8 tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Control {
    /// The last frame arrived corrupt; the peer should send it again.
    Nack,
    /// The sender is abandoning the session.
    Abort(String),
    /// The consumer accepted the producer's HELLO.
    Ready,
}

impl Control {
    pub fn to_message(&self, session_id: u64, batch_index: u64) -> SplitMessage {
        let bytes = match self {
            Control::Nack => vec![1],
            Control::Ready => vec![3],
            Control::Abort(reason) => {
                let mut b = vec![2];
                b.extend_from_slice(reason.as_bytes());
                b
            }
        };
        SplitMessage::new(MsgType::Control, session_id, batch_index, vec![FeatureTensor::from_bytes(bytes)])
    }

    pub fn from_message(m: &SplitMessage) -> Result<Self> {
        let bytes = m
            .tensors
            .first()
            .map(FeatureTensor::bytes)
            .ok_or_else(|| Error::Protocol("CONTROL without a record".into()))?;
        match bytes.split_first() {
            Some((1, _)) => Ok(Control::Nack),
            Some((2, reason)) => Ok(Control::Abort(String::from_utf8_lossy(reason).into_owned())),
            Some((3, _)) => Ok(Control::Ready),
            _ => Err(Error::Protocol(format!("unknown CONTROL record {bytes:?}"))),
        }
    }
}

/// One endpoint of a session. Optionally captures every frame it sends or
/// receives, in order, as raw bytes.
pub struct Transport {
    stream: TcpStream,
    buf: Vec<u8>,
    last_sent: Option<Vec<u8>>,
    capture: Option<Vec<Vec<u8>>>,
    corrupt_next: bool,
    bytes_sent: u64,
}

impl Transport {
    pub fn new(stream: TcpStream, timeout: Option<Duration>) -> Result<Self> {
        let io = |e| Error::Session(format!("socket setup: {e}"));
        stream.set_nodelay(true).map_err(io)?;
        stream.set_read_timeout(timeout).map_err(io)?;
        stream.set_write_timeout(timeout).map_err(io)?;
        Ok(Self {
            stream,
            buf: Vec::new(),
            last_sent: None,
            capture: None,
            corrupt_next: false,
            bytes_sent: 0,
        })
    }

    pub fn enable_capture(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    pub fn take_capture(&mut self) -> Vec<Vec<u8>> {
        self.capture.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    /// Flips one payload bit of the next data frame on the wire (the stored
    /// copy used for retransmission stays intact). For fault-injection tests.
    #[doc(hidden)]
    pub fn corrupt_next_send(&mut self) {
        self.corrupt_next = true;
    }

    /// Sends a frame and returns its size in bytes.
    pub fn send(&mut self, m: &SplitMessage) -> Result<usize> {
        let frame = encode_message(m);
        let len = frame.len();
        if self.corrupt_next && len > super::codec::EMPTY_FRAME_LEN {
            self.corrupt_next = false;
            let mut bad = frame.clone();
            bad[len - 5] ^= 0x01;
            self.write(&bad)?;
        } else {
            self.write(&frame)?;
        }
        if let Some(c) = &mut self.capture {
            c.push(frame.clone());
        }
        if m.msg_type != MsgType::Control {
            self.last_sent = Some(frame);
        }
        Ok(len)
    }

    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes).map_err(|e| io_error("send", e))?;
        self.bytes_sent += bytes.len() as u64;
        Ok(())
    }

    /// Receives the next message. Corrupt frames are answered with a NACK and
    /// skipped; an incoming NACK retransmits the last frame sent.
    pub fn recv(&mut self) -> Result<SplitMessage> {
        let mut corrupt = 0;
        loop {
            match decode_message(&self.buf) {
                Ok((m, used)) => {
                    let frame: Vec<u8> = self.buf.drain(..used).collect();
                    if let Some(c) = &mut self.capture {
                        c.push(frame);
                    }
                    if m.msg_type == MsgType::Control && Control::from_message(&m)? == Control::Nack {
                        let frame = self
                            .last_sent
                            .clone()
                            .ok_or_else(|| Error::Protocol("NACK before any frame was sent".into()))?;
                        warn!("peer reported a corrupt frame; retransmitting {} bytes", frame.len());
                        self.write(&frame)?;
                        continue;
                    }
                    return Ok(m);
                }
                Err(DecodeError::Incomplete { .. }) => self.fill()?,
                Err(DecodeError::Corrupt { frame_len, .. }) => {
                    corrupt += 1;
                    self.buf.drain(..frame_len);
                    if corrupt > MAX_CORRUPT {
                        return Err(Error::Protocol(format!("{corrupt} consecutive corrupt frames")));
                    }
                    warn!("dropping a corrupt frame of {frame_len} bytes and requesting retransmission");
                    let nack = encode_message(&Control::Nack.to_message(0, 0));
                    self.write(&nack)?;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn fill(&mut self) -> Result<()> {
        let mut chunk = [0u8; 64 * 1024];
        let n = self.stream.read(&mut chunk).map_err(|e| io_error("receive", e))?;
        if n == 0 {
            return Err(Error::Session("peer closed the connection".into()));
        }
        self.buf.extend_from_slice(&chunk[..n]);
        Ok(())
    }
}

fn io_error(what: &str, e: std::io::Error) -> Error {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => Error::Session(format!("{what} timed out")),
        _ => Error::Session(format!("{what} failed: {e}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DType;
    use crate::tensor::Tensor;
    use std::net::TcpListener;

    fn pair() -> (Transport, Transport) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = TcpStream::connect(addr).unwrap();
        let (server, _) = listener.accept().unwrap();
        let t = Some(Duration::from_secs(5));
        (Transport::new(client, t).unwrap(), Transport::new(server, t).unwrap())
    }

    fn features() -> SplitMessage {
        let t = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        SplitMessage::new(MsgType::ForwardFeatures, 7, 3, vec![FeatureTensor::from_tensor(&t, DType::F32)])
    }

    #[test]
    fn control_records_round_trip() {
        for c in [Control::Nack, Control::Abort("key mismatch".into()), Control::Ready] {
            assert_eq!(Control::from_message(&c.to_message(1, 2)).unwrap(), c);
        }
    }

    #[test]
    fn messages_cross_the_socket_in_order() {
        let (mut a, mut b) = pair();
        a.send(&features()).unwrap();
        a.send(&SplitMessage::new(MsgType::Bye, 7, 4, vec![])).unwrap();
        assert_eq!(b.recv().unwrap(), features());
        assert_eq!(b.recv().unwrap().msg_type, MsgType::Bye);
    }

    #[test]
    fn corrupt_frame_is_nacked_and_retransmitted() {
        let (mut a, mut b) = pair();
        a.enable_capture();
        a.corrupt_next_send();
        a.send(&features()).unwrap();
        let reader = std::thread::spawn(move || {
            let m = b.recv().unwrap();
            b.send(&SplitMessage::new(MsgType::Bye, 7, 3, vec![])).unwrap();
            m
        });
        // The NACK is consumed inside recv, which then returns the reply.
        assert_eq!(a.recv().unwrap().msg_type, MsgType::Bye);
        assert_eq!(reader.join().unwrap(), features());
        let captured = a.take_capture();
        assert_eq!(captured.len(), 3);
        assert_eq!(decode_message(&captured[1]).unwrap().0.msg_type, MsgType::Control);
    }

    #[test]
    fn silence_times_out() {
        let (mut a, _b) = pair();
        a.stream.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
        let err = a.recv().unwrap_err();
        assert!(err.to_string().contains("timed out"), "{err}");
    }
}

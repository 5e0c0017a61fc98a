use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const FRAME_HEADER_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Hello = 0x01,
    Features = 0x02,
    Prediction = 0x03,
    Error = 0x7F,
}

impl TryFrom<u8> for FrameType {
    type Error = Error;
    fn try_from(b: u8) -> Result<Self> {
        match b {
            0x01 => Ok(FrameType::Hello),
            0x02 => Ok(FrameType::Features),
            0x03 => Ok(FrameType::Prediction),
            0x7F => Ok(FrameType::Error),
            _ => Err(Error::Protocol(format!("unknown frame type 0x{b:02X}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameType, payload: Vec<u8>) -> Self {
        Frame { kind, payload }
    }

    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        frame_encode(self.kind, &self.payload)
    }
}

pub fn frame_encode(kind: FrameType, payload: &[u8]) -> Result<Vec<u8>> {
    let len = u32::try_from(payload.len())
        .map_err(|_| Error::Protocol(format!("payload of {} bytes exceeds the frame limit", payload.len())))?;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.push(kind as u8);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decodes exactly one frame from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn frame_decode(bytes: &[u8]) -> Result<(Frame, usize)> {
    let mut cursor = bytes;
    let frame = read_frame(&mut cursor)?.ok_or_else(|| Error::Protocol("empty stream".into()))?;
    Ok((frame, bytes.len() - cursor.len()))
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.to_bytes()?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let got = fill(r, &mut header)?;
    if got == 0 {
        return Ok(None);
    }
    if got < FRAME_HEADER_LEN {
        return Err(Error::Protocol(format!("stream ended after {got} of {FRAME_HEADER_LEN} header bytes")));
    }
    let kind = FrameType::try_from(header[0])?;
    let len = u32::from_be_bytes(header[1..5].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; len];
    let got = fill(r, &mut payload)?;
    if got < len {
        return Err(Error::Protocol(format!("stream ended after {got} of {len} payload bytes")));
    }
    Ok(Some(Frame { kind, payload }))
}

/// Reads until `buf` is full or the stream ends; returns the bytes read.
fn fill(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hello_bytes() {
        let b = frame_encode(FrameType::Features, b"hello").unwrap();
        assert_eq!(b, [0x02, 0, 0, 0, 5, 0x68, 0x65, 0x6C, 0x6C, 0x6F]);
    }

    #[test]
    fn truncated_payload() {
        let mut b = vec![0x02, 0, 0, 0, 10];
        b.extend_from_slice(b"hello");
        assert!(matches!(read_frame(&mut &b[..]), Err(Error::Protocol(_))));
    }

    #[test]
    fn truncated_header_and_clean_eof() {
        assert!(read_frame(&mut &[0x01u8, 0][..]).is_err());
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
    }

    #[test]
    fn unknown_type() {
        assert!(matches!(read_frame(&mut &[0x09u8, 0, 0, 0, 0][..]), Err(Error::Protocol(_))));
    }

    /// Delivers at most one byte per read call.
    struct Trickle<'a>(&'a [u8]);
    impl Read for Trickle<'_> {
        fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
            if self.0.is_empty() || buf.is_empty() {
                return Ok(0);
            }
            buf[0] = self.0[0];
            self.0 = &self.0[1..];
            Ok(1)
        }
    }

    proptest! {
        #[test]
        fn round_trip(kind in prop::sample::select(vec![FrameType::Hello, FrameType::Features, FrameType::Prediction, FrameType::Error]),
                      payload in prop::collection::vec(any::<u8>(), 0..300)) {
            let bytes = frame_encode(kind, &payload).unwrap();
            let (f, used) = frame_decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(&f, &Frame::new(kind, payload.clone()));
            let f2 = read_frame(&mut Trickle(&bytes)).unwrap().unwrap();
            prop_assert_eq!(f2, Frame::new(kind, payload));
        }
    }
}

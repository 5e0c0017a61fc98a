use std::io::BufReader;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::edge::frame::{frame_encode, read_frame, write_frame, Frame, FrameType};
use crate::edge::{parse_error, Prediction};
use crate::entropy::bitstream::{digest_hex, Digest};
use crate::error::{Error, Result};
use crate::models::{compress_batch, ModelBundle};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    /// Encoder forward, quantization and range coding.
    pub encode_us: u64,
    /// FEATURES frame size on the wire.
    pub transfer_bytes: usize,
    /// Send of the request to receipt of the reply.
    pub rtt_us: u64,
}

pub struct EdgeClient<'b> {
    bundle: &'b ModelBundle,
    digest: Digest,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl<'b> EdgeClient<'b> {
    /// Connects and performs the digest handshake.
    pub fn connect(addr: impl ToSocketAddrs, bundle: &'b ModelBundle) -> Result<Self> {
        bundle.tables()?;
        let digest = bundle.digest();
        let writer = TcpStream::connect(addr)?;
        writer.set_nodelay(true)?;
        let reader = BufReader::new(writer.try_clone()?);
        let mut c = EdgeClient { bundle, digest, reader, writer };
        let reply = c.exchange(&Frame::new(FrameType::Hello, digest.to_vec()))?;
        match reply.kind {
            FrameType::Hello if reply.payload == digest => Ok(c),
            FrameType::Hello => Err(Error::IncompatibleModel {
                expected: digest_hex(&digest),
                actual: reply.payload.iter().map(|b| format!("{b:02x}")).collect(),
            }),
            FrameType::Error => Err(parse_error(&reply.payload)),
            k => Err(Error::Protocol(format!("unexpected {k:?} reply to HELLO"))),
        }
    }

    /// Sends one frame and waits for the reply.
    pub fn exchange(&mut self, frame: &Frame) -> Result<Frame> {
        write_frame(&mut self.writer, frame)?;
        read_frame(&mut self.reader)?.ok_or_else(|| Error::Protocol("server closed the connection".into()))
    }

    /// Compresses a `[3,H,W]` image locally and classifies it remotely.
    pub fn classify(&mut self, image: &Tensor) -> Result<(Prediction, Timings)> {
        let t0 = Instant::now();
        let feature = compress_batch(self.bundle, &self.digest, &image.clone().unsqueeze0())?
            .remove(0)
            .feature;
        let encode_us = (t0.elapsed().as_micros() as u64).max(1);
        let bytes = frame_encode(FrameType::Features, &feature.to_bytes())?;
        let t1 = Instant::now();
        std::io::Write::write_all(&mut self.writer, &bytes)?;
        let reply = read_frame(&mut self.reader)?.ok_or_else(|| Error::Protocol("server closed the connection".into()))?;
        let rtt_us = t1.elapsed().as_micros() as u64;
        let timings = Timings { encode_us, transfer_bytes: bytes.len(), rtt_us };
        match reply.kind {
            FrameType::Prediction => Ok((Prediction::from_bytes(&reply.payload)?, timings)),
            FrameType::Error => Err(parse_error(&reply.payload)),
            k => Err(Error::Protocol(format!("unexpected {k:?} reply to FEATURES"))),
        }
    }
}

/// One-shot connect, handshake and classification.
pub fn client_classify(addr: impl ToSocketAddrs, image: &Tensor, bundle: &ModelBundle) -> Result<(Prediction, Timings)> {
    EdgeClient::connect(addr, bundle)?.classify(image)
}

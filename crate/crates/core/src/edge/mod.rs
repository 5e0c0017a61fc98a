//! Wire protocol and runtime for the split system: the edge client encodes
//! images into bitstreams, the cloud server decodes, classifies and replies.
//!
//! Every frame is a type byte, a big-endian `u32` payload length and the
//! payload. A connection opens with a HELLO exchange carrying model digests,
//! then alternates FEATURES requests and PREDICTION replies.

pub mod client;
pub mod frame;
pub mod server;

pub use client::{client_classify, EdgeClient, Timings};
pub use frame::{frame_decode, frame_encode, read_frame, write_frame, Frame, FrameType, FRAME_HEADER_LEN};
pub use server::{serve, thread_cap, Server, ShutdownHandle};

use std::time::Instant;

use crate::entropy::{CompressedFeature, Digest};
use crate::error::{Error, Result};
use crate::models::{classify_latent, decompress_with, ModelBundle};

pub const TOP_K: usize = 5;

/// ERROR frame codes.
pub mod code {
    pub const DIGEST_MISMATCH: u8 = 1;
    pub const BAD_FEATURE: u8 = 2;
    pub const PROTOCOL: u8 = 3;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `(class, softmax probability)`, most likely first.
    pub top: Vec<(u16, f32)>,
    /// Server-side decode and classify time.
    pub server_us: u64,
}

impl Prediction {
    pub fn class(&self) -> usize {
        self.top[0].0 as usize
    }

    pub fn from_logits(logits: &[f32], server_us: u64) -> Self {
        let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f32 = e.iter().sum();
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        let top = order.into_iter().take(TOP_K).map(|i| (i as u16, e[i] / z)).collect();
        Prediction { top, server_us }
    }

    /// `u8` count, then `count` pairs of (`u16` class, `f32` score), then
    /// `u64` server time; all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + 6 * self.top.len() + 8);
        out.push(self.top.len() as u8);
        for &(c, s) in &self.top {
            out.extend_from_slice(&c.to_le_bytes());
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.server_us.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let n = *b.first().ok_or_else(|| Error::Protocol("empty prediction".into()))? as usize;
        if n == 0 || b.len() != 1 + 6 * n + 8 {
            return Err(Error::Protocol(format!("prediction payload of {} bytes for {n} entries", b.len())));
        }
        let top = b[1..1 + 6 * n]
            .chunks_exact(6)
            .map(|c| (u16::from_le_bytes([c[0], c[1]]), f32::from_le_bytes([c[2], c[3], c[4], c[5]])))
            .collect();
        let server_us = u64::from_le_bytes(b[1 + 6 * n..].try_into().unwrap());
        Ok(Prediction { top, server_us })
    }
}

/// Cloud half of the pipeline on one serialized feature.
pub fn predict_feature(bundle: &ModelBundle, digest: &Digest, bytes: &[u8]) -> Result<Prediction> {
    let t0 = Instant::now();
    let cf = CompressedFeature::from_bytes(bytes)?;
    let y = decompress_with(bundle, digest, &cf)?;
    let logits = classify_latent(bundle, &y.unsqueeze0())?;
    Ok(Prediction::from_logits(logits.data(), t0.elapsed().as_micros() as u64))
}

pub(crate) fn error_payload(code: u8, message: &str) -> Vec<u8> {
    let mut p = vec![code];
    p.extend_from_slice(message.as_bytes());
    p
}

pub(crate) fn parse_error(payload: &[u8]) -> Error {
    match payload.split_first() {
        Some((&code, msg)) => Error::Remote { code, message: String::from_utf8_lossy(msg).into_owned() },
        None => Error::Protocol("empty error frame".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_round_trip_and_order() {
        let p = Prediction::from_logits(&[0.5, 3.0, -1.0, 2.0, 0.0, 1.0, 0.2], 42);
        assert_eq!(p.top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![1, 3, 5, 0, 6]);
        assert!(p.top.windows(2).all(|w| w[0].1 > w[1].1));
        assert!(p.top.iter().map(|t| t.1).sum::<f32>() <= 1.0);
        assert_eq!(Prediction::from_bytes(&p.to_bytes()).unwrap(), p);
        assert_eq!(p.to_bytes().len(), 1 + 30 + 8);
    }

    #[test]
    fn fewer_classes_than_k() {
        let p = Prediction::from_logits(&[1.0, 2.0], 0);
        assert_eq!(p.top.len(), 2);
        assert!((p.top[0].1 + p.top[1].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn malformed_prediction() {
        assert!(Prediction::from_bytes(&[]).is_err());
        assert!(Prediction::from_bytes(&[1, 0, 0]).is_err());
    }
}

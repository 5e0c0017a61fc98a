//! `EFBS` compressed-feature container.
//!
//! ```text
//! magic "EFBS" | u8 version | 16 B model digest | u8 C | u16 H_lat | u16 W_lat
//! | u16 img_H | u16 img_W | u32 payload length | payload
//! ```
//! Multi-byte integers are little-endian. The payload is the range-coded
//! latent in channel-major raster order.

use crate::error::{format_err, Error, Result};

pub const BITSTREAM_MAGIC: &[u8; 4] = b"EFBS";
pub const BITSTREAM_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 16 + 1 + 2 * 4 + 4;

pub type Digest = [u8; 16];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub digest: Digest,
    pub channels: u8,
    pub h_lat: u16,
    pub w_lat: u16,
    pub img_h: u16,
    pub img_w: u16,
}

impl FeatureHeader {
    pub fn symbol_count(&self) -> usize {
        self.channels as usize * self.h_lat as usize * self.w_lat as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedFeature {
    pub header: FeatureHeader,
    pub payload: Vec<u8>,
}

impl CompressedFeature {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    /// Bits per input pixel, counting header and payload.
    pub fn bpp(&self) -> f64 {
        self.byte_len() as f64 * 8.0 / (self.header.img_h as f64 * self.header.img_w as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.push(BITSTREAM_VERSION);
        out.extend_from_slice(&h.digest);
        out.push(h.channels);
        for v in [h.h_lat, h.w_lat, h.img_h, h.img_w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return format_err(format!("bitstream of {} bytes is shorter than its header", bytes.len()));
        }
        if &bytes[..4] != BITSTREAM_MAGIC {
            return format_err("bad bitstream magic");
        }
        if bytes[4] != BITSTREAM_VERSION {
            return format_err(format!("unsupported bitstream version {}", bytes[4]));
        }
        let mut digest = [0u8; 16];
        digest.copy_from_slice(&bytes[5..21]);
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let header = FeatureHeader {
            digest,
            channels: bytes[21],
            h_lat: u16_at(22),
            w_lat: u16_at(24),
            img_h: u16_at(26),
            img_w: u16_at(28),
        };
        let len = u32::from_le_bytes(bytes[30..34].try_into().unwrap()) as usize;
        if bytes.len() - HEADER_LEN != len {
            return Err(Error::Format(format!(
                "payload length field {len} but {} payload bytes present",
                bytes.len() - HEADER_LEN
            )));
        }
        if header.symbol_count() == 0 || header.img_h == 0 || header.img_w == 0 {
            return format_err("bitstream header has a zero dimension");
        }
        Ok(CompressedFeature {
            header,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

pub fn digest_hex(d: &Digest) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CompressedFeature {
        CompressedFeature {
            header: FeatureHeader {
                digest: [7; 16],
                channels: 48,
                h_lat: 4,
                w_lat: 4,
                img_h: 32,
                img_w: 32,
            },
            payload: vec![1, 2, 3],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(HEADER_LEN, 34);
        assert_eq!(&b[..4], b"EFBS");
        assert_eq!(b[4], 1);
        assert_eq!(b[21], 48);
        assert_eq!(&b[22..24], &[4, 0]);
        assert_eq!(&b[26..28], &[32, 0]);
        assert_eq!(&b[30..34], &[3, 0, 0, 0]);
        assert_eq!(CompressedFeature::from_bytes(&b).unwrap(), sample());
    }

    #[test]
    fn malformed_headers() {
        let b = sample().to_bytes();
        assert!(CompressedFeature::from_bytes(&b[..20]).is_err());
        assert!(CompressedFeature::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(CompressedFeature::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn bpp_counts_whole_container() {
        let mut cf = sample();
        cf.header.img_h = 224;
        cf.header.img_w = 224;
        cf.payload = vec![0; 784 - HEADER_LEN];
        assert!((cf.bpp() - 0.125).abs() < 1e-12);
    }
}

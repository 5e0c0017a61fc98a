//! 32-bit renormalizing range coder over 16-bit cumulative frequency tables.
//!
//! Carries are propagated through a cached byte (LZMA style). The encoder's
//! always-zero leading byte is not emitted.
//!
//! The flush writes the shortest byte-aligned block lying entirely inside the
//! final interval: one byte when a 2^24-aligned block fits, two otherwise,
//! taking the lowest candidate. The decoder reads past the end as zeros and
//! accepts only that canonical block, so no valid stream is a proper prefix
//! of another and truncation or extension never decodes.

use crate::entropy::table::{CdfTable, PRECISION_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    leading: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            leading: true,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= 1 << PRECISION_BITS);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn emit(&mut self, byte: u8) {
        if self.leading {
            debug_assert_eq!(byte, 0);
            self.leading = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        let end = self.low + self.range as u64;
        let wide = round_up(self.low, 24);
        let (v, bytes) = if wide + TOP as u64 <= end {
            (wide, 1)
        } else {
            (round_up(self.low, 16), 2)
        };
        self.low = v;
        for _ in 0..=bytes {
            self.shift_low();
        }
        self.out
    }
}

fn round_up(x: u64, bits: u32) -> u64 {
    let m = (1u64 << bits) - 1;
    (x + m) & !m
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    window: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = RangeDecoder {
            code: 0,
            range: u32::MAX,
            window: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            let b = dec.next_byte();
            dec.code = (dec.code << 8) | b as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        self.window = (self.window << 8) | b as u32;
        b
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >= 1 << PRECISION_BITS {
            return Err(Error::Decode("code value outside the coding interval".into()));
        }
        let s = table.lookup(target);
        let (start, freq) = table.interval(s);
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            if self.pos > self.input.len() + 3 {
                return Err(Error::Decode("range-coded stream truncated".into()));
            }
            let byte = self.next_byte();
            self.code = (self.code << 8) | byte as u32;
            self.range <<= 8;
        }
        Ok(s)
    }

    /// Verifies that the stream ends with the encoder's canonical flush.
    pub fn finish(self) -> Result<()> {
        let padded = self.pos as i64 - self.input.len() as i64;
        let bits = match padded {
            3 => 24,
            2 => 16,
            p if p < 2 => return Err(Error::Decode("trailing bytes after the final block".into())),
            _ => return Err(Error::Decode("range-coded stream truncated".into())),
        };
        let code = self.code as u64;
        let range = self.range as u64;
        let block = 1u64 << bits;
        let canonical = code < block
            && code + block <= range
            && (bits == 24 || (code.wrapping_sub(self.window as u64) & (TOP as u64 - 1)) + TOP as u64 > range);
        if !canonical {
            return Err(Error::Decode("stream does not terminate on the final interval".into()));
        }
        Ok(())
    }
}

/// Encodes integer symbols, each under the table of its channel. Symbols
/// outside a table's support are clamped to the nearest bound; the second
/// return value counts them.
pub fn range_encode(symbols: &[i32], channels: &[usize], tables: &[CdfTable]) -> Result<(Vec<u8>, usize)> {
    if symbols.len() != channels.len() {
        return Err(Error::Config(format!(
            "{} symbols with {} channel indices",
            symbols.len(),
            channels.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    let mut clamped = 0;
    for (&y, &c) in symbols.iter().zip(channels) {
        let t = tables
            .get(c)
            .ok_or_else(|| Error::Config(format!("no table for channel {c}")))?;
        let yc = y.clamp(t.y_min, t.y_max());
        if yc != y {
            clamped += 1;
        }
        let (start, freq) = t.interval((yc - t.y_min) as usize);
        enc.encode(start, freq);
    }
    Ok((enc.finish(), clamped))
}

/// Decodes exactly `channels.len()` symbols and checks stream termination.
pub fn range_decode(bytes: &[u8], channels: &[usize], tables: &[CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(channels.len());
    for &c in channels {
        let t = tables
            .get(c)
            .ok_or_else(|| Error::Config(format!("no table for channel {c}")))?;
        out.push(t.y_min + dec.decode(t)? as i32);
    }
    dec.finish()?;
    Ok(out)
}

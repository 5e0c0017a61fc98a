//! CIFAR-10 binary records, normalization, augmentation and batching.
//!
//! Each record is one label byte followed by 3072 pixel bytes: the red,
//! green and blue 32×32 planes in that order, rows top to bottom.

pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD_LEN: usize = 1 + PIXELS;
pub const NUM_CLASSES: usize = 10;
/// Zero padding on each side before the random crop.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(Error::Config(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("label {l} out of range")));
        }
        Ok(Dataset { pixels, labels })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % RECORD_LEN != 0 {
            return Err(Error::Format(format!(
                "{} bytes is not a whole number of {RECORD_LEN}-byte records",
                bytes.len()
            )));
        }
        let n = bytes.len() / RECORD_LEN;
        let mut pixels = Vec::with_capacity(n * PIXELS);
        let mut labels = Vec::with_capacity(n);
        for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::Format(format!("record {i} has label byte {}", rec[0])));
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Ok(Dataset { pixels, labels })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&bytes)
    }

    /// Loads and concatenates several files in the given order.
    pub fn load_all<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut out = Dataset::default();
        for p in paths {
            out.extend(Self::load(p)?);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_LEN);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn extend(&mut self, other: Dataset) {
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// First `n` records (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::default();
        for &i in indices {
            out.pixels.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalization needs finite means and positive stds".into()));
        }
        Ok(())
    }

    pub fn apply(&self, channel: usize, byte: u8) -> f32 {
        (byte as f32 / 255.0 - self.mean[channel]) / self.std[channel]
    }
}

/// Random horizontal flip and zero-pad-then-crop of one image, in place.
pub fn augment(img: &mut [u8], rng: &mut ChaCha8Rng) {
    let flip = rng.gen_bool(0.5);
    let dy = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let dx = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let src = img.to_vec();
    for c in 0..3 {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let sy = y as isize + dy;
                let sx0 = x as isize + dx;
                let sx = if flip { SIDE as isize - 1 - sx0 } else { sx0 };
                let inside = (0..SIDE as isize).contains(&sy) && (0..SIDE as isize).contains(&sx);
                img[(c * SIDE + y) * SIDE + x] = if inside {
                    src[(c * SIDE + sy as usize) * SIDE + sx as usize]
                } else {
                    0
                };
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B,3,32,32]`, normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Builds a normalized batch from the given records, optionally augmented.
pub fn make_batch(
    data: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    mut augment_rng: Option<&mut ChaCha8Rng>,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut out = Vec::with_capacity(indices.len() * PIXELS);
    let mut buf = [0u8; PIXELS];
    for &i in indices {
        buf.copy_from_slice(data.image(i));
        if let Some(rng) = augment_rng.as_deref_mut() {
            augment(&mut buf, rng);
        }
        out.extend(buf.iter().enumerate().map(|(j, &b)| norm.apply(j / (SIDE * SIDE), b)));
    }
    Ok(Batch {
        images: Tensor::new(&[indices.len(), 3, SIDE, SIDE], out)?,
        labels: indices.iter().map(|&i| data.label(i)).collect(),
    })
}

/// A shuffled permutation of `0..n` split into batches; the last partial
/// batch is kept.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

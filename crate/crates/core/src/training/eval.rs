use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Dataset, Normalization};
use crate::entropy::bitstream::HEADER_LEN;
use crate::entropy::rate_bits;
use crate::error::{Error, Result};
use crate::models::{classify_latent, compress_batch, decompress_with, ModelBundle};
use crate::tensor::{argmax, Tensor};

const EVAL_BATCH: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    /// Whole container, header included.
    pub bits: u64,
    pub payload_bits: u64,
    /// Prior information content of the transmitted symbols.
    pub estimated_bits: f64,
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub bpp: f64,
    pub top1: f64,
    pub records: Vec<ImageRecord>,
}

impl EvalResult {
    pub fn clamped(&self) -> usize {
        self.records.iter().map(|r| r.clamped).sum()
    }
}

/// Compresses, transmits (in memory), decodes and classifies every image
/// with real bitstreams and rounding quantization.
pub fn evaluate(bundle: &ModelBundle, data: &Dataset, norm: &Normalization) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let digest = bundle.digest();
    let [h, w] = bundle.config.input_hw;
    let pixels = (h * w) as f64;
    let mut records = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = make_batch(data, chunk, norm, None)?;
        let compressed = compress_batch(bundle, &digest, &batch.images)?;
        let mut latents = Vec::with_capacity(chunk.len());
        let mut estimates = Vec::with_capacity(chunk.len());
        for c in &compressed {
            let bytes = c.feature.to_bytes();
            let cf = crate::entropy::CompressedFeature::from_bytes(&bytes)?;
            let y = decompress_with(bundle, &digest, &cf)?;
            estimates.push(rate_bits(&bundle.prior, &bundle.store, &y.clone().unsqueeze0())?);
            latents.push(y);
        }
        let logits = classify_latent(bundle, &Tensor::stack(&latents)?)?;
        let k = bundle.config.classes;
        for (j, &i) in chunk.iter().enumerate() {
            let c = &compressed[j];
            records.push(ImageRecord {
                index: i,
                label: batch.labels[j],
                predicted: argmax(&logits.data()[j * k..(j + 1) * k]),
                bits: c.feature.byte_len() as u64 * 8,
                payload_bits: (c.feature.byte_len() - HEADER_LEN) as u64 * 8,
                estimated_bits: estimates[j],
                clamped: c.clamped,
            });
        }
    }
    let n = records.len() as f64;
    let bpp = records.iter().map(|r| r.bits as f64 / pixels).sum::<f64>() / n;
    let top1 = records.iter().filter(|r| r.predicted == r.label).count() as f64 / n;
    Ok(EvalResult { bpp, top1, records })
}

/// Top-1 accuracy of a teacher network.
pub fn teacher_accuracy(teacher: &crate::models::TeacherModel, data: &Dataset, norm: &Normalization) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let k = teacher.config.classes;
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = make_batch(data, chunk, norm, None)?;
        let mut g = crate::nn::Graph::inference(&teacher.store);
        let x = g.input(batch.images);
        let (_, logits) = teacher.net.forward(&mut g, x)?;
        let l = g.value(logits).data();
        correct += (0..chunk.len())
            .filter(|&j| argmax(&l[j * k..(j + 1) * k]) == batch.labels[j])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

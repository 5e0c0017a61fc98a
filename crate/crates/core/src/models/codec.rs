//! Edge-side compression of images into [`CompressedFeature`]s and the
//! cloud-side inverse.

use crate::entropy::bitstream::{CompressedFeature, Digest, FeatureHeader};
use crate::entropy::prior::round_half_away;
use crate::entropy::{range_decode, range_encode};
use crate::error::{Error, Result};
use crate::models::arch::check_shape;
use crate::models::bundle::ModelBundle;
use crate::nn::Graph;
use crate::tensor::Tensor;

/// A compressed image plus the number of latent symbols that fell outside
/// the frozen support and were clamped.
#[derive(Clone, Debug)]
pub struct Compressed {
    pub feature: CompressedFeature,
    pub clamped: usize,
}

/// Channel index of every symbol in channel-major raster order.
fn channel_map(c: usize, plane: usize) -> Vec<usize> {
    (0..c * plane).map(|i| i / plane).collect()
}

/// Unquantized encoder output for a batch `[B,3,H,W]`.
pub fn encode_latent(bundle: &ModelBundle, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(&bundle.store);
    let x = g.input(images.clone());
    check_shape(&g, x, bundle.config.input_shape(), "encoder")?;
    let y = bundle.encoder.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Compresses every image of a `[B,3,H,W]` batch.
pub fn compress_batch(bundle: &ModelBundle, digest: &Digest, images: &Tensor) -> Result<Vec<Compressed>> {
    let tables = bundle.tables()?;
    let y = encode_latent(bundle, images)?;
    let (c, h, w) = bundle.config.latent_shape();
    let [img_h, img_w] = bundle.config.input_hw;
    let per = c * h * w;
    let channels = channel_map(c, h * w);
    y.data()
        .chunks_exact(per)
        .map(|lat| {
            let symbols: Vec<i32> = lat.iter().map(|&v| round_half_away(v) as i32).collect();
            let (payload, clamped) = range_encode(&symbols, &channels, tables)?;
            Ok(Compressed {
                feature: CompressedFeature {
                    header: FeatureHeader {
                        digest: *digest,
                        channels: c as u8,
                        h_lat: h as u16,
                        w_lat: w as u16,
                        img_h: img_h as u16,
                        img_w: img_w as u16,
                    },
                    payload,
                },
                clamped,
            })
        })
        .collect()
}

/// Compresses one `[3,H,W]` image.
pub fn compress(bundle: &ModelBundle, image: &Tensor) -> Result<CompressedFeature> {
    let batch = image.clone().unsqueeze0();
    Ok(compress_batch(bundle, &bundle.digest(), &batch)?.remove(0).feature)
}

/// Decodes a feature into the quantized latent `[M,H/s,W/s]`, checking it
/// against the model identified by `digest`.
pub fn decompress_with(bundle: &ModelBundle, digest: &Digest, cf: &CompressedFeature) -> Result<Tensor> {
    let hd = &cf.header;
    if &hd.digest != digest {
        return Err(Error::IncompatibleModel {
            expected: crate::entropy::bitstream::digest_hex(digest),
            actual: crate::entropy::bitstream::digest_hex(&hd.digest),
        });
    }
    let (c, h, w) = bundle.config.latent_shape();
    let [img_h, img_w] = bundle.config.input_hw;
    if (hd.channels as usize, hd.h_lat as usize, hd.w_lat as usize) != (c, h, w)
        || (hd.img_h as usize, hd.img_w as usize) != (img_h, img_w)
    {
        return Err(Error::Format(format!(
            "header describes a {}x{}x{} latent of a {}x{} image, model expects {c}x{h}x{w} of {img_h}x{img_w}",
            hd.channels, hd.h_lat, hd.w_lat, hd.img_h, hd.img_w
        )));
    }
    let symbols = range_decode(&cf.payload, &channel_map(c, h * w), bundle.tables()?)?;
    Tensor::new(&[c, h, w], symbols.into_iter().map(|s| s as f32).collect())
}

pub fn decompress(bundle: &ModelBundle, cf: &CompressedFeature) -> Result<Tensor> {
    decompress_with(bundle, &bundle.digest(), cf)
}

/// Cloud-side decoder and classifier on a batch of latents `[B,M,h,w]`;
/// returns logits `[B,K]`.
pub fn classify_latent(bundle: &ModelBundle, latents: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(&bundle.store);
    let y = g.input(latents.clone());
    check_shape(&g, y, bundle.config.latent_shape(), "decoder")?;
    let f = bundle.decoder.forward(&mut g, y)?;
    let logits = bundle.classifier.forward(&mut g, f)?;
    Ok(g.value(logits).clone())
}

//! Multiply-accumulate counting over an architecture description.
//!
//! Counting rules: convolution `k*k*C_in*C_out*H'*W'`; dense head `K*C`;
//! GDN `C*C*H*W` plus one per element for the square root and one for the
//! division; elementwise activations one per element. Skip additions and
//! nearest-neighbour upsampling are free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Gdn {
        channels: usize,
    },
    Gelu,
    Upsample2x,
    DenseHead {
        c: usize,
        k: usize,
    },
    /// `x + body(x)`; the body must preserve the shape.
    Residual {
        body: Vec<LayerSpec>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacCount {
    pub macs: u64,
}

impl MacCount {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

/// Returns the MAC count and the output shape `(C, H, W)`; a dense head
/// yields `(K, 1, 1)`.
pub fn count_macs(layers: &[LayerSpec], input: (usize, usize, usize)) -> Result<(MacCount, (usize, usize, usize))> {
    let mut shape = input;
    let mut macs = 0u64;
    for layer in layers {
        let (c, h, w) = shape;
        match layer {
            LayerSpec::Conv { c_in, c_out, k, stride, pad } => {
                if *c_in != c || *stride == 0 || h + 2 * pad < *k || w + 2 * pad < *k {
                    return Err(Error::Config(format!("conv {layer:?} cannot consume {shape:?}")));
                }
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                macs += (k * k * c_in * c_out * oh * ow) as u64;
                shape = (*c_out, oh, ow);
            }
            LayerSpec::Gdn { channels } => {
                if *channels != c {
                    return Err(Error::Config(format!("gdn over {channels} channels on {shape:?}")));
                }
                macs += (c * c * h * w + 2 * c * h * w) as u64;
            }
            LayerSpec::Gelu => macs += (c * h * w) as u64,
            LayerSpec::Upsample2x => shape = (c, 2 * h, 2 * w),
            LayerSpec::DenseHead { c: dc, k } => {
                if *dc != c {
                    return Err(Error::Config(format!("dense head over {dc} channels on {shape:?}")));
                }
                macs += (k * dc) as u64;
                shape = (*k, 1, 1);
            }
            LayerSpec::Residual { body } => {
                let (inner, out) = count_macs(body, shape)?;
                if out != shape {
                    return Err(Error::Config(format!(
                        "residual body maps {shape:?} to {out:?}"
                    )));
                }
                macs += inner.macs;
            }
        }
    }
    Ok((MacCount { macs }, shape))
}

/// Parses a JSON layer list; unknown layer kinds are configuration errors.
pub fn parse_layers(json: &str) -> Result<Vec<LayerSpec>> {
    serde_json::from_str(json).map_err(|e| Error::Config(format!("layer description: {e}")))
}

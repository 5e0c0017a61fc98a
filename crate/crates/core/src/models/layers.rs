use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::kernels::inv_softplus;
use crate::nn::params::{he_normal, ParamId, ParamStore};
use crate::nn::{Graph, LayerSpec, Var};
use crate::tensor::Tensor;

/// Gain applied to the last convolution of a residual branch at init.
const RESIDUAL_BRANCH_GAIN: f32 = 0.1;
/// Added to the reparameterized GDN beta so it stays strictly positive.
const GDN_BETA_MIN: f32 = 1e-6;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[c_out, c_in, k, k], c_in * k * k, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Conv { weight, bias, c_in, c_out, k, stride, pad })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv {
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// `x + conv3x3(gelu(conv3x3(x)))`, no normalization.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv1 = Conv::build(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng)?;
        let conv2 = Conv::build(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng)?;
        for v in store.tensor_mut(conv2.weight).data_mut() {
            *v *= RESIDUAL_BRANCH_GAIN;
        }
        Ok(ResBlock { conv1, conv2 })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.gelu(h)?;
        let h = self.conv2.forward(g, h)?;
        g.add(x, h)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Residual {
            body: vec![self.conv1.spec(), LayerSpec::Gelu, self.conv2.spec()],
        }
    }
}

/// GDN with `beta = softplus(beta_raw) + 1e-6`, `gamma = softplus(gamma_raw)`.
#[derive(Clone, Debug)]
pub struct Gdn {
    pub beta_raw: ParamId,
    pub gamma_raw: ParamId,
    pub channels: usize,
}

impl Gdn {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let beta = Tensor::full(&[channels], inv_softplus(1.0 - GDN_BETA_MIN));
        let mut gamma = Tensor::full(&[channels, channels], inv_softplus(1e-4));
        for c in 0..channels {
            gamma.data_mut()[c * channels + c] = inv_softplus(0.1);
        }
        Ok(Gdn {
            beta_raw: store.add(format!("{name}.beta"), beta)?,
            gamma_raw: store.add(format!("{name}.gamma"), gamma)?,
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = g.param(self.beta_raw);
        let b = g.softplus(b)?;
        let beta = g.add_scalar(b, GDN_BETA_MIN)?;
        let gm = g.param(self.gamma_raw);
        let gamma = g.softplus(gm)?;
        g.gdn(x, beta, gamma)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Gdn { channels: self.channels }
    }
}

/// Global average pool + affine map to class logits.
#[derive(Clone, Debug)]
pub struct DenseHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c: usize,
    pub k: usize,
}

impl DenseHead {
    pub fn build(store: &mut ParamStore, name: &str, c: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_normal(&[k, c], c, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[k]))?;
        Ok(DenseHead { weight, bias, c, k })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.dense_head(x, w, b)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::DenseHead { c: self.c, k: self.k }
    }
}

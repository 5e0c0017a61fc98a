//! Fully factorized prior: one learned univariate CDF per latent channel.
//!
//! Each channel's CDF is the logistic of a chain of monotone maps
//! `v <- h + a * tanh(h)`, `h = H v + b`, ending in a scalar logit, with
//! `H = softplus(H_raw) > 0` and `a = tanh(a_raw) > -1` keeping the chain
//! strictly increasing. All per-element evaluation runs in `f64`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{CustomOp, Graph, Var};
use crate::nn::kernels::{inv_softplus, softplus};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Smallest likelihood fed to a logarithm.
pub const LIKELIHOOD_FLOOR: f32 = 1e-9;

const MAX_WIDTH: usize = 8;

#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    channels: usize,
    /// Layer widths including the scalar input and output, e.g. `[1,3,3,3,1]`.
    widths: Vec<usize>,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

/// Effective (reparameterized) weights of one channel.
struct ChannelWeights {
    h: Vec<[[f64; MAX_WIDTH]; MAX_WIDTH]>,
    b: Vec<[f64; MAX_WIDTH]>,
    a: Vec<[f64; MAX_WIDTH]>,
}

/// Intermediate values of one chain evaluation, kept for the backward pass.
struct Trace {
    v: Vec<[f64; MAX_WIDTH]>,
    h: Vec<[f64; MAX_WIDTH]>,
    logit: f64,
}

impl FactorizedPrior {
    /// Registers parameters under `prefix` with the standard initialization
    /// (a broad distribution of scale `init_scale`).
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        hidden: &[usize],
        init_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels == 0 || hidden.iter().any(|&w| w == 0 || w > MAX_WIDTH) {
            return Err(Error::Config(format!(
                "prior needs channels >= 1 and hidden widths in 1..={MAX_WIDTH}, got {channels} / {hidden:?}"
            )));
        }
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths.len() - 1;
        let scale = init_scale.powf(1.0 / layers as f64);
        let (mut matrices, mut biases, mut factors) = (vec![], vec![], vec![]);
        for i in 0..layers {
            let (fin, fout) = (widths[i], widths[i + 1]);
            let init = inv_softplus((1.0 / scale / fout as f64) as f32);
            matrices.push(store.add(
                format!("{prefix}.matrix{i}"),
                Tensor::full(&[channels, fout, fin], init),
            )?);
            let b: Vec<f32> = (0..channels * fout).map(|_| rng.gen_range(-0.5..0.5)).collect();
            biases.push(store.add(format!("{prefix}.bias{i}"), Tensor::new(&[channels, fout], b)?)?);
            if i + 1 < layers {
                factors.push(store.add(
                    format!("{prefix}.factor{i}"),
                    Tensor::zeros(&[channels, fout]),
                )?);
            }
        }
        Ok(FactorizedPrior {
            channels,
            widths,
            matrices,
            biases,
            factors,
        })
    }

    /// Re-binds a prior whose parameters already exist in `store`.
    pub fn attach(store: &ParamStore, prefix: &str, channels: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths.len() - 1;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing prior parameter {name}")))?;
            if store.tensor(id).shape() != shape {
                return Err(Error::Format(format!("prior parameter {name} has wrong shape")));
            }
            Ok(id)
        };
        let (mut matrices, mut biases, mut factors) = (vec![], vec![], vec![]);
        for i in 0..layers {
            let (fin, fout) = (widths[i], widths[i + 1]);
            matrices.push(find(format!("{prefix}.matrix{i}"), &[channels, fout, fin])?);
            biases.push(find(format!("{prefix}.bias{i}"), &[channels, fout])?);
            if i + 1 < layers {
                factors.push(find(format!("{prefix}.factor{i}"), &[channels, fout])?);
            }
        }
        Ok(FactorizedPrior {
            channels,
            widths,
            matrices,
            biases,
            factors,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// All parameter ids in a fixed order: matrices, biases, factors.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.matrices
            .iter()
            .chain(&self.biases)
            .chain(&self.factors)
            .copied()
            .collect()
    }

    fn channel_weights(&self, tensors: &[&Tensor], channel: usize) -> ChannelWeights {
        let layers = self.layers();
        let mut w = ChannelWeights {
            h: vec![[[0.0; MAX_WIDTH]; MAX_WIDTH]; layers],
            b: vec![[0.0; MAX_WIDTH]; layers],
            a: vec![[0.0; MAX_WIDTH]; layers],
        };
        for i in 0..layers {
            let (fin, fout) = (self.widths[i], self.widths[i + 1]);
            let m = &tensors[i].data()[channel * fout * fin..][..fout * fin];
            let b = &tensors[layers + i].data()[channel * fout..][..fout];
            for r in 0..fout {
                for c in 0..fin {
                    w.h[i][r][c] = softplus(m[r * fin + c]) as f64;
                }
                w.b[i][r] = b[r] as f64;
                if i + 1 < layers {
                    let f = &tensors[2 * layers + i].data()[channel * fout..][..fout];
                    w.a[i][r] = (f[r] as f64).tanh();
                }
            }
        }
        w
    }

    fn trace(&self, w: &ChannelWeights, x: f64) -> Trace {
        let layers = self.layers();
        let mut t = Trace {
            v: vec![[0.0; MAX_WIDTH]; layers],
            h: vec![[0.0; MAX_WIDTH]; layers],
            logit: 0.0,
        };
        let mut v = [0.0; MAX_WIDTH];
        v[0] = x;
        for i in 0..layers {
            let (fin, fout) = (self.widths[i], self.widths[i + 1]);
            t.v[i] = v;
            let mut h = [0.0; MAX_WIDTH];
            for r in 0..fout {
                h[r] = w.b[i][r] + (0..fin).map(|c| w.h[i][r][c] * v[c]).sum::<f64>();
            }
            t.h[i] = h;
            if i + 1 < layers {
                for r in 0..fout {
                    v[r] = h[r] + w.a[i][r] * h[r].tanh();
                }
            } else {
                t.logit = h[0];
            }
        }
        t
    }

    /// Accumulates `upstream * d logit` into raw-parameter gradient buffers
    /// (effective-weight space; converted later) and returns `d logit / dx`.
    fn trace_backward(&self, w: &ChannelWeights, t: &Trace, upstream: f64, acc: &mut ChannelGrads) -> f64 {
        let layers = self.layers();
        let mut gv = [0.0; MAX_WIDTH];
        let mut gh = [0.0; MAX_WIDTH];
        gh[0] = upstream;
        for i in (0..layers).rev() {
            let (fin, fout) = (self.widths[i], self.widths[i + 1]);
            if i + 1 < layers {
                for r in 0..fout {
                    let th = t.h[i][r].tanh();
                    acc.a[i][r] += gv[r] * th;
                    gh[r] = gv[r] * (1.0 + w.a[i][r] * (1.0 - th * th));
                }
            }
            let mut next = [0.0; MAX_WIDTH];
            for r in 0..fout {
                acc.b[i][r] += gh[r];
                for c in 0..fin {
                    acc.h[i][r][c] += gh[r] * t.v[i][c];
                    next[c] += w.h[i][r][c] * gh[r];
                }
            }
            gv = next;
        }
        gv[0]
    }

    fn param_tensors<'s>(&self, store: &'s ParamStore) -> Vec<&'s Tensor> {
        self.param_ids().into_iter().map(|id| store.tensor(id)).collect()
    }

    fn check_channel(&self, channel: usize) -> Result<()> {
        if channel >= self.channels {
            return Err(Error::Config(format!(
                "channel {channel} outside prior with {} channels",
                self.channels
            )));
        }
        Ok(())
    }

    /// Pre-logistic value of the CDF at `x`.
    pub fn cdf_logit(&self, store: &ParamStore, channel: usize, x: f64) -> Result<f64> {
        self.check_channel(channel)?;
        let w = self.channel_weights(&self.param_tensors(store), channel);
        Ok(self.trace(&w, x).logit)
    }

    pub fn cdf(&self, store: &ParamStore, channel: usize, x: f64) -> Result<f64> {
        Ok(sigmoid64(self.cdf_logit(store, channel, x)?))
    }

    /// Probability mass of the unit interval around `y`, floored at
    /// [`LIKELIHOOD_FLOOR`].
    pub fn likelihood(&self, store: &ParamStore, channel: usize, y: f64) -> Result<f64> {
        self.check_channel(channel)?;
        let w = self.channel_weights(&self.param_tensors(store), channel);
        let lo = self.trace(&w, y - 0.5).logit;
        let hi = self.trace(&w, y + 0.5).logit;
        Ok(interval_mass(lo, hi).max(LIKELIHOOD_FLOOR as f64))
    }

    /// Per-channel closure evaluating the CDF, for table construction.
    pub(crate) fn cdf_fn<'s>(&'s self, store: &'s ParamStore, channel: usize) -> impl Fn(f64) -> f64 + 's {
        let w = self.channel_weights(&self.param_tensors(store), channel);
        move |x| sigmoid64(self.trace(&w, x).logit)
    }

    /// Differentiable likelihoods of `y` ([B,C,H,W]) on the graph.
    pub fn likelihood_var(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let shape = g.value(y).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Config(format!(
                "likelihood over {shape:?} with a {}-channel prior",
                self.channels
            )));
        }
        let params: Vec<Var> = self.param_ids().into_iter().map(|id| g.param(id)).collect();
        let tensors: Vec<&Tensor> = params.iter().map(|&v| g.value(v)).collect();
        let weights: Vec<ChannelWeights> =
            (0..self.channels).map(|c| self.channel_weights(&tensors, c)).collect();
        let plane = shape[2] * shape[3];
        let yd = g.value(y).data();
        let lik: Vec<f32> = yd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let w = &weights[(i / plane) % self.channels];
                let lo = self.trace(w, v as f64 - 0.5).logit;
                let hi = self.trace(w, v as f64 + 0.5).logit;
                interval_mass(lo, hi) as f32
            })
            .collect();
        let value = Tensor::new(&shape, lik)?;
        let mut inputs = vec![y];
        inputs.extend(params);
        g.custom(&inputs, value, Box::new(LikelihoodOp { prior: self.clone(), plane }))
    }
}

#[derive(Clone)]
struct ChannelGrads {
    h: Vec<[[f64; MAX_WIDTH]; MAX_WIDTH]>,
    b: Vec<[f64; MAX_WIDTH]>,
    a: Vec<[f64; MAX_WIDTH]>,
}

struct LikelihoodOp {
    prior: FactorizedPrior,
    plane: usize,
}

impl CustomOp for LikelihoodOp {
    fn name(&self) -> &'static str {
        "factorized_likelihood"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f32>>>> {
        let p = &self.prior;
        let layers = p.layers();
        let (y, params) = (inputs[0], &inputs[1..]);
        let weights: Vec<ChannelWeights> = (0..p.channels).map(|c| p.channel_weights(params, c)).collect();
        let zero = ChannelGrads {
            h: vec![[[0.0; MAX_WIDTH]; MAX_WIDTH]; layers],
            b: vec![[0.0; MAX_WIDTH]; layers],
            a: vec![[0.0; MAX_WIDTH]; layers],
        };
        let mut acc = vec![zero; p.channels];
        let mut dy = vec![0.0f32; y.len()];
        for (i, &v) in y.data().iter().enumerate() {
            let c = (i / self.plane) % p.channels;
            let w = &weights[c];
            let lo = p.trace(w, v as f64 - 0.5);
            let hi = p.trace(w, v as f64 + 0.5);
            let g = grad_out[i] as f64;
            // d(sigma(hi) - sigma(lo)) = sigma'(hi) dhi - sigma'(lo) dlo
            let dx_hi = p.trace_backward(w, &hi, g * dsigmoid64(hi.logit), &mut acc[c]);
            let dx_lo = p.trace_backward(w, &lo, -g * dsigmoid64(lo.logit), &mut acc[c]);
            dy[i] = (dx_hi + dx_lo) as f32;
        }
        let mut out: Vec<Option<Vec<f32>>> = vec![needs[0].then_some(dy)];
        // chain through softplus / tanh reparameterizations
        for i in 0..layers {
            let (fin, fout) = (p.widths[i], p.widths[i + 1]);
            let raw = params[i].data();
            let mut d = vec![0.0f32; raw.len()];
            for c in 0..p.channels {
                for r in 0..fout {
                    for k in 0..fin {
                        let idx = (c * fout + r) * fin + k;
                        d[idx] = (acc[c].h[i][r][k] * sigmoid64(raw[idx] as f64)) as f32;
                    }
                }
            }
            out.push(Some(d));
        }
        for i in 0..layers {
            let fout = p.widths[i + 1];
            let d = (0..p.channels * fout).map(|j| acc[j / fout].b[i][j % fout] as f32).collect();
            out.push(Some(d));
        }
        for i in 0..layers - 1 {
            let fout = p.widths[i + 1];
            let raw = params[2 * layers + i].data();
            let d = (0..p.channels * fout)
                .map(|j| {
                    let t = (raw[j] as f64).tanh();
                    (acc[j / fout].a[i][j % fout] * (1.0 - t * t)) as f32
                })
                .collect();
            out.push(Some(d));
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dsigmoid64(x: f64) -> f64 {
    sigmoid64(x) * sigmoid64(-x)
}

/// `sigma(hi) - sigma(lo)`, evaluated on the tail side that avoids
/// cancellation.
fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo + hi > 0.0 {
        (sigmoid64(-lo) - sigmoid64(-hi)).abs()
    } else {
        (sigmoid64(hi) - sigmoid64(lo)).abs()
    }
}

/// Additive-noise or rounding quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    Noise,
    Round,
}

/// Rounds half away from zero.
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

/// Returns the quantized tensor; in noise mode also the noise that was added.
pub fn quantize(y: &Tensor, mode: QuantMode, rng: &mut ChaCha8Rng) -> Tensor {
    let data = match mode {
        QuantMode::Round => y.data().iter().map(|&v| round_half_away(v)).collect(),
        QuantMode::Noise => y.data().iter().map(|&v| v + rng.gen_range(-0.5f32..0.5)).collect(),
    };
    Tensor::new(y.shape(), data).expect("same shape")
}

/// Uniform(-1/2, 1/2) noise of the given shape.
pub fn uniform_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect()).expect("shape")
}

/// Total information content in bits of `y` under the prior.
pub fn rate_bits(prior: &FactorizedPrior, store: &ParamStore, y: &Tensor) -> Result<f64> {
    let mut g = Graph::inference(store);
    let v = g.input(y.clone());
    let lik = prior.likelihood_var(&mut g, v)?;
    Ok(g
        .value(lik)
        .data()
        .iter()
        .map(|&p| -(p.max(LIKELIHOOD_FLOOR) as f64).log2())
        .sum())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;

    /// A single-layer prior with unit weight and zero bias: c(x) = logistic(x).
    pub(crate) fn logistic_prior(store: &mut ParamStore, channels: usize) -> FactorizedPrior {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = FactorizedPrior::build(store, "lp", channels, &[], 1.0, &mut rng).unwrap();
        let m = p.matrices[0];
        store.tensor_mut(m).data_mut().fill(inv_softplus(1.0));
        store.tensor_mut(p.biases[0]).data_mut().fill(0.0);
        p
    }

    #[test]
    fn logistic_reference_values() {
        let mut s = ParamStore::new();
        let p = logistic_prior(&mut s, 1);
        assert!((p.cdf(&s, 0, 0.0).unwrap() - 0.5).abs() < 1e-7);
        let oracle = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((p.cdf(&s, 0, 0.5).unwrap() - oracle).abs() < 1e-6);
        assert!((oracle - 0.622_459_3).abs() < 1e-7);
        let lik0 = p.likelihood(&s, 0, 0.0).unwrap();
        let oracle = 1.0 / (1.0 + (-0.5f64).exp()) - 1.0 / (1.0 + 0.5f64.exp());
        assert!((lik0 - oracle).abs() < 1e-6);
        assert!((oracle - 0.244_918_7).abs() < 1e-7);
        assert!(p.cdf(&s, 1, 0.0).is_err());
    }

    #[test]
    fn default_prior_is_monotone_and_bounded() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = FactorizedPrior::build(&mut s, "eb", 4, &[3, 3, 3], 10.0, &mut rng).unwrap();
        for c in 0..4 {
            let mut prev = -1.0;
            for i in 0..1000 {
                let x = -60.0 + 0.12 * i as f64;
                let v = p.cdf(&s, c, x).unwrap();
                assert!(v > prev, "channel {c} not increasing at {x}");
                assert!(v > 0.0 && v < 1.0);
                prev = v;
            }
        }
    }

    #[test]
    fn likelihood_is_floored() {
        let mut s = ParamStore::new();
        let p = logistic_prior(&mut s, 1);
        assert!(p.likelihood(&s, 0, 1e4).unwrap() >= LIKELIHOOD_FLOOR as f64);
    }

    #[test]
    fn rounding_ties_go_away_from_zero() {
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(-2.5), -3.0);
        assert_eq!(round_half_away(1.2), 1.0);
    }

    #[test]
    fn noise_is_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::zeros(&[100_000]);
        let q = quantize(&y, QuantMode::Noise, &mut rng);
        let mean = q.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!(q.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn rate_of_half_probability_symbols() {
        // logistic prior scaled so that p(0) = 0.5: c(x) = logistic(s x) with
        // sigma(s/2) - sigma(-s/2) = 0.5  =>  s = 2 ln 3
        let mut s = ParamStore::new();
        let p = logistic_prior(&mut s, 1);
        let m = p.matrices[0];
        s.tensor_mut(m).data_mut().fill(inv_softplus(2.0 * 3f32.ln()));
        let y = Tensor::zeros(&[1, 1, 4, 4]);
        let bits = rate_bits(&p, &s, &y).unwrap();
        assert!((bits - 16.0).abs() < 1e-4, "{bits}");
    }
}

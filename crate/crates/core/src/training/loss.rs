use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::entropy::prior::{quantize, uniform_noise, LIKELIHOOD_FLOOR};
use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::nn::{Graph, Var};

/// Distillation temperature.
pub const TEMPERATURE: f32 = 1.0;

/// Which terms of the objective a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// `λ·l_R + l_MSE + 0.5·(l_KL + l_CE)`.
    SingleStage { lambda: f32 },
    /// `λ·l_R + l_MSE`; the classifier is not run.
    Stage1 { lambda: f32 },
    /// `0.5·(l_KL + l_CE)`, plus `l_MSE` when `mse` is set.
    Stage2 { mse: bool },
}

/// Graph nodes of one loss evaluation; absent terms were not computed.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l_r: Option<Var>,
    pub l_mse: Var,
    pub l_kl: Option<Var>,
    pub l_ce: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub l_r: Option<f64>,
    pub l_mse: f64,
    pub l_kl: Option<f64>,
    pub l_ce: Option<f64>,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Var| g.value(x).data()[0] as f64;
        LossValues {
            total: v(self.total),
            l_r: self.l_r.map(v),
            l_mse: v(self.l_mse),
            l_kl: self.l_kl.map(v),
            l_ce: self.l_ce.map(v),
        }
    }
}

/// Builds the loss of `objective` on `g`. In noise mode the latent gets
/// additive uniform noise drawn from `rng`; round mode rounds it (and is
/// not differentiable w.r.t. the encoder).
pub fn loss_graph(
    g: &mut Graph,
    bundle: &ModelBundle,
    batch: &Batch,
    objective: Objective,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> Result<LossVars> {
    let teacher = bundle.teacher()?;
    let x = g.input(batch.images.clone());
    let y = bundle.encoder.forward(g, x)?;
    let y_hat = match mode {
        QuantMode::Noise => {
            let noise = uniform_noise(g.value(y).shape(), rng);
            g.add_const(y, &noise)?
        }
        QuantMode::Round => {
            let r = quantize(g.value(y), QuantMode::Round, rng);
            g.input(r)
        }
    };
    let [h, w] = bundle.config.input_hw;
    let pixels = (batch.labels.len() * h * w) as f32;
    let wants_rate = !matches!(objective, Objective::Stage2 { .. });
    let l_r = if wants_rate {
        let lik = bundle.prior.likelihood_var(g, y_hat)?;
        let bits = g.neg_log2_sum(lik, LIKELIHOOD_FLOOR as f32)?;
        Some(g.scale(bits, 1.0 / pixels)?)
    } else {
        None
    };
    let feature = bundle.decoder.forward(g, y_hat)?;
    let stem = teacher.stem(g, x)?;
    let l_mse = g.mse(feature, stem)?;
    let (l_kl, l_ce) = if matches!(objective, Objective::Stage1 { .. }) {
        (None, None)
    } else {
        let t_logits = teacher.tail.forward(g, stem)?;
        let s_logits = bundle.classifier.forward(g, feature)?;
        (
            Some(g.kl_div(t_logits, s_logits, TEMPERATURE)?),
            Some(g.cross_entropy(s_logits, &batch.labels)?),
        )
    };
    let distill = |g: &mut Graph| -> Result<Var> {
        let s = g.add(l_kl.unwrap(), l_ce.unwrap())?;
        g.scale(s, 0.5)
    };
    let total = match objective {
        Objective::SingleStage { lambda } | Objective::Stage1 { lambda } => {
            let rate = g.scale(l_r.unwrap(), lambda)?;
            let mut t = g.add(rate, l_mse)?;
            if let Objective::SingleStage { .. } = objective {
                let d = distill(g)?;
                t = g.add(t, d)?;
            }
            t
        }
        Objective::Stage2 { mse } => {
            let d = distill(g)?;
            if mse {
                g.add(d, l_mse)?
            } else {
                d
            }
        }
    };
    let v = g.value(total).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss is {v}")));
    }
    Ok(LossVars { total, l_r, l_mse, l_kl, l_ce })
}

/// Value of the single-stage loss and its components on one batch.
pub fn single_stage_loss(
    bundle: &ModelBundle,
    batch: &Batch,
    lambda: f32,
    mode: QuantMode,
    rng: &mut ChaCha8Rng,
) -> Result<LossValues> {
    let mut g = Graph::inference(&bundle.store);
    let vars = loss_graph(&mut g, bundle, batch, Objective::SingleStage { lambda }, mode, rng)?;
    Ok(vars.values(&g))
}

//! Central finite-difference gradient checking.
//!
//! The checked function's output is projected onto fixed random weights,
//! `L = sum_i r_i y_i`. The numeric side sums in `f64` so that outputs not
//! touched by a perturbation cancel exactly; only the forward pass is used,
//! never the backward rules under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{CustomOp, Graph, Var};
use crate::nn::optim::merge_grads;
use crate::nn::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    pub points_per_input: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            points_per_input: 20,
            floor: 1e-2,
            seed: 0x6772_6164,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub points: usize,
    /// `(input index, element, analytic, numeric)` of the worst point.
    pub worst: Option<(usize, usize, f64, f64)>,
}

struct Projection {
    weights: Vec<f32>,
}

impl CustomOp for Projection {
    fn name(&self) -> &'static str {
        "projection"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        _needs: &[bool],
    ) -> Result<Vec<Option<Vec<f32>>>> {
        Ok(vec![Some(self.weights.iter().map(|w| w * grad_out[0]).collect())])
    }
}

fn projection_weights(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn project_f64(y: &Tensor, w: &[f32]) -> f64 {
    y.data().iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Analytic gradients of the projected output, plus the projection weights
/// and the unprojected forward value.
fn analytic_grads<F>(inputs: &[Tensor], wrt: &[bool], cfg: GradCheckConfig, f: &F) -> Result<(Vec<Vec<f32>>, Vec<f32>, Tensor)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &w)| g.leaf(t.clone(), w))
        .collect();
    let out = f(&mut g, &vars)?;
    let y = g.value(out).clone();
    let weights = projection_weights(y.len(), cfg.seed);
    let value = Tensor::scalar(project_f64(&y, &weights) as f32);
    let loss = g.custom(&[out], value, Box::new(Projection { weights: weights.clone() }))?;
    let grads = g.backward(loss)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((analytic, weights, y))
}

/// Central differences of `eval` at random elements of the flagged inputs.
fn compare<E>(inputs: &[Tensor], wrt: &[bool], analytic: &[Vec<f32>], cfg: GradCheckConfig, mut eval: E) -> Result<GradCheckReport>
where
    E: FnMut(usize, usize, f32) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        points: 0,
        worst: None,
    };
    for (i, &want) in wrt.iter().enumerate() {
        if !want {
            continue;
        }
        for _ in 0..cfg.points_per_input {
            let e = rng.gen_range(0..inputs[i].len());
            let orig = inputs[i].data()[e];
            let up = eval(i, e, orig + cfg.step)?;
            let down = eval(i, e, orig - cfg.step)?;
            // the perturbation is applied in f32, so use the realized step
            let h = ((orig + cfg.step) as f64 - (orig - cfg.step) as f64) / 2.0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][e] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.points += 1;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Checks `f` w.r.t. every input flagged in `wrt`.
pub fn check<F>(inputs: &[Tensor], wrt: &[bool], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (analytic, weights, _) = analytic_grads(inputs, wrt, cfg, &f)?;
    let mut perturbed = inputs.to_vec();
    compare(inputs, wrt, &analytic, cfg, |i, e, v| {
        let orig = perturbed[i].data()[e];
        perturbed[i].data_mut()[e] = v;
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        perturbed[i].data_mut()[e] = orig;
        Ok(project_f64(g.value(out?), &weights))
    })
}

/// Like [`check`], but the numeric side differentiates `reference`, a
/// double-precision forward of the same function. Fails with
/// [`Error::Numeric`] if the reference and `f` disagree at `inputs` by more
/// than `1e-5 * (1 + |y|)` in any output.
pub fn check_reference<F, R>(
    inputs: &[Tensor],
    wrt: &[bool],
    cfg: GradCheckConfig,
    f: F,
    reference: R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Fn(&[Vec<f64>]) -> Vec<f64>,
{
    let (analytic, weights, y) = analytic_grads(inputs, wrt, cfg, &f)?;
    let mut point: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let base = reference(&point);
    if base.len() != y.len() {
        return Err(Error::Numeric(format!("reference has {} outputs, op has {}", base.len(), y.len())));
    }
    for (k, (&r, &v)) in base.iter().zip(y.data()).enumerate() {
        if (r - v as f64).abs() > 1e-5 * (1.0 + r.abs()) {
            return Err(Error::Numeric(format!("reference output {k} is {r}, op gives {v}")));
        }
    }
    let project = |out: Vec<f64>| out.iter().zip(&weights).map(|(&a, &w)| a * w as f64).sum::<f64>();
    compare(inputs, wrt, &analytic, cfg, |i, e, v| {
        let orig = point[i][e];
        point[i][e] = v as f64;
        let out = reference(&point);
        point[i][e] = orig;
        Ok(project(out))
    })
}

/// Checks `f` w.r.t. every trainable parameter of `store` that it uses.
/// Parameter index `i` in the report refers to `store` iteration order.
pub fn check_params<F>(store: &ParamStore, cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let (weights, analytic) = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        let weights = projection_weights(g.value(out).len(), cfg.seed);
        let value = Tensor::scalar(project_f64(g.value(out), &weights) as f32);
        let loss = g.custom(&[out], value, Box::new(Projection { weights: weights.clone() }))?;
        let grads = g.backward(loss)?;
        (weights, merge_grads(grads.params()))
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let out = f(&mut g)?;
        Ok(project_f64(g.value(out), &weights))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        points: 0,
        worst: None,
    };
    let mut work = store.clone();
    for (i, (id, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        for _ in 0..cfg.points_per_input.min(n.max(1)) {
            let e = rng.gen_range(0..n);
            let orig = store.tensor(*id).data()[e];
            work.tensor_mut(*id).data_mut()[e] = orig + cfg.step;
            let up = eval(&work)?;
            work.tensor_mut(*id).data_mut()[e] = orig - cfg.step;
            let down = eval(&work)?;
            work.tensor_mut(*id).data_mut()[e] = orig;
            let h = ((orig + cfg.step) as f64 - (orig - cfg.step) as f64) / 2.0;
            let numeric = (up - down) / (2.0 * h);
            let a = grad[e] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.points += 1;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Uniform random tensor helper for checks.
pub fn random_tensor(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
        .expect("shape product matches")
}

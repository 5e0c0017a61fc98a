#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use featcomp::entropy::prior::LIKELIHOOD_FLOOR;
use featcomp::entropy::FactorizedPrior;
use featcomp::nn::gradcheck::{check, check_params, check_reference, GradCheckConfig, GradCheckReport};
use featcomp::nn::{Graph, ParamStore, Var};
use featcomp::{Result, Tensor};

/// Single-precision finite differences.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Finite differences of a double-precision reference forward.
pub const REFERENCE_TOLERANCE: f64 = 1e-5;

pub struct GradCase {
    pub name: &'static str,
    pub double: bool,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn tolerance(&self) -> f64 {
        if self.double {
            REFERENCE_TOLERANCE
        } else {
            GRAD_TOLERANCE
        }
    }

    pub fn passed(&self) -> bool {
        self.report.points >= 20 && self.report.max_rel_err <= self.tolerance()
    }
}

/// Central-difference step: 2^-10, so that `x ± h` is exact for the
/// dyadic inputs below.
pub const STEP: f32 = 1.0 / 1024.0;

/// Uniform values on the grid of multiples of 1/32 in `[lo, hi)`.
fn dyadic(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let (a, b) = ((lo * 32.0).round() as i32, (hi * 32.0).round() as i32);
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(a..b) as f32 / 32.0).collect()).unwrap()
}

fn random_tensor(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    dyadic(shape, -scale, scale, rng)
}

fn positive(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    dyadic(shape, lo, hi, rng)
}

pub fn config() -> GradCheckConfig {
    GradCheckConfig { step: STEP, ..GradCheckConfig::default() }
}

type Case = (&'static str, bool, Result<GradCheckReport>);

fn inputs_case(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Case {
    let wrt = vec![true; inputs.len()];
    (name, false, check(&inputs, &wrt, config(), f))
}

fn reference_case(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> Case {
    let wrt = vec![true; inputs.len()];
    (name, true, check_reference(&inputs, &wrt, config(), f, reference))
}

fn log_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
    let lse = m + row.iter().map(|v| (v / t - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v / t - lse).collect()
}

fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// [B,C,H,W] global mean then `w p + b`.
fn dense_head64(x: &[f64], w: &[f64], b: &[f64], batch: usize, c: usize, hw: usize) -> Vec<f64> {
    let k = b.len();
    let mut out = Vec::with_capacity(batch * k);
    for n in 0..batch {
        let pooled: Vec<f64> =
            (0..c).map(|ch| x[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        for j in 0..k {
            out.push(b[j] + (0..c).map(|ch| w[j * c + ch] * pooled[ch]).sum::<f64>());
        }
    }
    out
}

fn cross_entropy64(logits: &[f64], labels: &[usize]) -> f64 {
    let k = logits.len() / labels.len();
    let total: f64 = labels.iter().enumerate().map(|(n, &l)| -log_softmax(&logits[n * k..(n + 1) * k], 1.0)[l]).sum();
    total / labels.len() as f64
}

fn kl64(teacher: &[f64], student: &[f64], k: usize, t: f64) -> f64 {
    let batch = teacher.len() / k;
    let mut total = 0.0;
    for n in 0..batch {
        let lt = log_softmax(&teacher[n * k..(n + 1) * k], t);
        let ls = log_softmax(&student[n * k..(n + 1) * k], t);
        total += lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
    }
    total / batch as f64
}

/// Central-difference check of every differentiable op, 20 points per input.
/// Ops with a double-precision reference are differentiated through it.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();

    for (name, k, stride, pad, hw) in [
        ("conv2d 3x3 s1 p1", 3, 1, 1, 6),
        ("conv2d 3x3 s2 p1", 3, 2, 1, 6),
        ("conv2d 5x5 s2 p2", 5, 2, 2, 8),
        ("conv2d 8x8 s8 patch", 8, 8, 0, 16),
        ("conv2d 1x1", 1, 1, 0, 4),
    ] {
        let ins = vec![
            random_tensor(&[2, 3, hw, hw], 1.0, r),
            random_tensor(&[4, 3, k, k], 0.5, r),
            random_tensor(&[4], 0.5, r),
        ];
        cases.push(inputs_case(name, ins, move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad)));
    }
    cases.push(reference_case(
        "gelu",
        vec![random_tensor(&[2, 3, 4, 4], 3.0, r)],
        |g, v| g.gelu(v[0]),
        |x| x[0].iter().map(|&v| gelu64(v)).collect(),
    ));
    cases.push(inputs_case(
        "gdn",
        vec![random_tensor(&[2, 3, 4, 4], 2.0, r), positive(&[3], 0.5, 1.5, r), positive(&[3, 3], 0.05, 0.5, r)],
        |g, v| g.gdn(v[0], v[1], v[2]),
    ));
    cases.push(inputs_case("upsample2x", vec![random_tensor(&[2, 3, 3, 3], 1.0, r)], |g, v| g.upsample2x(v[0])));
    cases.push(reference_case(
        "dense_head",
        vec![random_tensor(&[2, 4, 3, 3], 1.0, r), random_tensor(&[5, 4], 1.0, r), random_tensor(&[5], 1.0, r)],
        |g, v| g.dense_head(v[0], v[1], v[2]),
        |x| dense_head64(&x[0], &x[1], &x[2], 2, 4, 9),
    ));
    cases.push(inputs_case(
        "add",
        vec![random_tensor(&[2, 3, 2, 2], 1.0, r), random_tensor(&[2, 3, 2, 2], 1.0, r)],
        |g, v| g.add(v[0], v[1]),
    ));
    let c = random_tensor(&[2, 3, 2, 2], 1.0, r);
    cases.push(inputs_case("add_const", vec![random_tensor(&[2, 3, 2, 2], 1.0, r)], move |g, v| g.add_const(v[0], &c)));
    cases.push(inputs_case("add_scalar", vec![random_tensor(&[7], 1.0, r)], |g, v| g.add_scalar(v[0], 0.7)));
    cases.push(inputs_case("scale", vec![random_tensor(&[7], 1.0, r)], |g, v| g.scale(v[0], -1.3)));
    cases.push(inputs_case("softplus", vec![random_tensor(&[2, 8], 4.0, r)], |g, v| g.softplus(v[0])));
    cases.push(inputs_case(
        "mse",
        vec![random_tensor(&[1, 1, 2, 3], 1.0, r), random_tensor(&[1, 1, 2, 3], 1.0, r)],
        |g, v| g.mse(v[0], v[1]),
    ));
    cases.push(reference_case(
        "cross_entropy",
        vec![random_tensor(&[4, 5], 2.0, r)],
        |g, v| g.cross_entropy(v[0], &[0, 3, 4, 1]),
        |x| vec![cross_entropy64(&x[0], &[0, 3, 4, 1])],
    ));
    for (name, t) in [("kl_div T=1", 1.0f32), ("kl_div T=2", 2.0)] {
        cases.push(reference_case(
            name,
            vec![random_tensor(&[3, 5], 2.0, r), random_tensor(&[3, 5], 2.0, r)],
            move |g, v| g.kl_div(v[0], v[1], t),
            move |x| vec![kl64(&x[0], &x[1], 5, t as f64)],
        ));
    }
    cases.push(inputs_case("neg_log2_sum", vec![positive(&[10], 0.05, 1.0, r)], |g, v| {
        g.neg_log2_sum(v[0], LIKELIHOOD_FLOOR as f32)
    }));

    // the prior's parameters live in a store, so the latent goes there too
    let mut store = ParamStore::new();
    let prior = FactorizedPrior::build(&mut store, "prior", 3, &[3, 3, 3], 10.0, r).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v += r.gen_range(-0.3f32..0.3);
        }
    }
    let y = store.add("y", random_tensor(&[2, 3, 2, 2], 6.0, r)).unwrap();
    cases.push((
        "factorized likelihood (latent and prior parameters)",
        false,
        check_params(&store, config(), |g| {
            let yv = g.param(y);
            prior.likelihood_var(g, yv)
        }),
    ));

    cases
        .into_iter()
        .map(|(name, double, rep)| GradCase { name, double, report: rep.unwrap_or_else(|e| panic!("{name}: {e}")) })
        .collect()
}

//! Average accuracy gap between two rate-accuracy curves over their common
//! bit-rate interval, on the plain (non-logarithmic) rate axis.

use serde::{Deserialize, Serialize};

use crate::bench::RateAccuracyCurve;
use crate::error::{Error, Result};

pub const SIMPSON_INTERVALS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Least-squares cubic (exact interpolation at four points).
    Cubic,
    /// Piecewise-linear interpolation.
    Linear,
}

impl Method {
    pub fn min_points(self) -> usize {
        match self {
            Method::Cubic => 4,
            Method::Linear => 2,
        }
    }

    /// Cubic when both curves support it.
    pub fn for_curves(a: &RateAccuracyCurve, b: &RateAccuracyCurve) -> Self {
        if a.points.len() >= 4 && b.points.len() >= 4 {
            Method::Cubic
        } else {
            Method::Linear
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cubic" => Ok(Method::Cubic),
            "linear" => Ok(Method::Linear),
            _ => Err(Error::Config(format!("unknown delta-accuracy method {s:?}"))),
        }
    }
}

/// Abscissa used for fitting and integration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateAxis {
    Normal,
    /// Natural log of bpp, as in the classic Bjøntegaard metric.
    Log,
}

impl RateAxis {
    fn map(self, r: f64) -> f64 {
        match self {
            RateAxis::Normal => r,
            RateAxis::Log => r.ln(),
        }
    }
}

enum Fit {
    /// Coefficients in `t = (x - center) / scale`, lowest order first.
    Cubic { coef: [f64; 4], center: f64, scale: f64 },
    Linear(Vec<(f64, f64)>),
}

impl Fit {
    fn new(points: &[(f64, f64)], method: Method) -> Result<Self> {
        if points.len() < method.min_points() {
            return Err(Error::Config(format!(
                "{method:?} fit needs at least {} points, curve has {}",
                method.min_points(),
                points.len()
            )));
        }
        Ok(match method {
            Method::Linear => Fit::Linear(points.to_vec()),
            Method::Cubic => {
                let lo = points.first().unwrap().0;
                let hi = points.last().unwrap().0;
                let center = 0.5 * (lo + hi);
                let scale = (0.5 * (hi - lo)).max(f64::MIN_POSITIVE);
                let rows: Vec<[f64; 4]> = points
                    .iter()
                    .map(|&(x, _)| {
                        let t = (x - center) / scale;
                        [1.0, t, t * t, t * t * t]
                    })
                    .collect();
                let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
                Fit::Cubic {
                    coef: least_squares4(&rows, &ys)?,
                    center,
                    scale,
                }
            }
        })
    }

    fn eval(&self, x: f64) -> f64 {
        match self {
            Fit::Cubic { coef, center, scale } => {
                let t = (x - center) / scale;
                ((coef[3] * t + coef[2]) * t + coef[1]) * t + coef[0]
            }
            Fit::Linear(p) => {
                let i = p.partition_point(|q| q.0 <= x).clamp(1, p.len() - 1);
                let (x0, y0) = p[i - 1];
                let (x1, y1) = p[i];
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }
}

/// Solves the least-squares problem `min |A c - y|` with Householder QR.
fn least_squares4(rows: &[[f64; 4]], y: &[f64]) -> Result<[f64; 4]> {
    let m = rows.len();
    let mut a: Vec<[f64; 4]> = rows.to_vec();
    let mut b = y.to_vec();
    for k in 0..4 {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("degenerate cubic fit".into()));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..4 {
            let dot: f64 = (k..m).map(|i| v[i - k] * a[i][j]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                a[i][j] -= f * v[i - k];
            }
        }
        let dot: f64 = (k..m).map(|i| v[i - k] * b[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in k..m {
            b[i] -= f * v[i - k];
        }
    }
    let mut c = [0.0; 4];
    for k in (0..4).rev() {
        let s: f64 = (k + 1..4).map(|j| a[k][j] * c[j]).sum();
        if a[k][k].abs() < 1e-12 {
            return Err(Error::Numeric("singular cubic fit".into()));
        }
        c[k] = (b[k] - s) / a[k][k];
    }
    Ok(c)
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Mean of `f_test − f_baseline` over the overlapping rate interval, in
/// accuracy percentage points.
pub fn delta_accuracy(test: &RateAccuracyCurve, baseline: &RateAccuracyCurve, method: Method) -> Result<f64> {
    delta_accuracy_on_axis(test, baseline, method, RateAxis::Normal)
}

pub fn delta_accuracy_on_axis(
    test: &RateAccuracyCurve,
    baseline: &RateAccuracyCurve,
    method: Method,
    axis: RateAxis,
) -> Result<f64> {
    let map = |c: &RateAccuracyCurve| -> Vec<(f64, f64)> { c.points.iter().map(|&(r, a)| (axis.map(r), a)).collect() };
    let (pt, pb) = (map(test), map(baseline));
    let lo = pt[0].0.max(pb[0].0);
    let hi = pt.last().unwrap().0.min(pb.last().unwrap().0);
    if !(lo < hi) {
        return Err(Error::Config(format!("curves do not overlap in rate ([{lo}, {hi}])")));
    }
    let ft = Fit::new(&pt, method)?;
    let fb = Fit::new(&pb, method)?;
    let integral = simpson(|x| ft.eval(x) - fb.eval(x), lo, hi, SIMPSON_INTERVALS);
    Ok(integral / (hi - lo))
}

//! Encoding-latency harness, rate-accuracy curves, Delta-accuracy and the
//! RAC report.

pub mod delta;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Dataset, Normalization};
use crate::entropy::bitstream::Digest;
use crate::error::{Error, Result};
use crate::models::{compress_batch, ModelBundle};
use crate::training::{evaluate, EvalResult};

pub use delta::{delta_accuracy, Method};

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_LATENCY_IMAGES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub warmup: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub stddev_us: f64,
}

impl LatencyStats {
    /// Statistics of timed samples in microseconds.
    pub fn from_samples(samples: &[f64], warmup: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("latency needs at least one timed sample".into()));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        // nearest-rank percentile
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(LatencyStats {
            n,
            warmup,
            mean_us: mean,
            median_us: median,
            p95_us: sorted[rank - 1],
            stddev_us: var.sqrt(),
        })
    }
}

/// Times `n` calls of `f` after `warmup` untimed calls. Call `i` receives
/// index `i` counted from the first warmup call.
pub fn measure_latency(warmup: usize, n: usize, mut f: impl FnMut(usize) -> Result<()>) -> Result<LatencyStats> {
    if n == 0 {
        return Err(Error::Config("latency measurement needs n >= 1".into()));
    }
    for i in 0..warmup {
        f(i)?;
    }
    let mut samples = Vec::with_capacity(n);
    for i in warmup..warmup + n {
        let t = Instant::now();
        f(i)?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    LatencyStats::from_samples(&samples, warmup)
}

/// Per-image encoder forward, rounding and range coding, on the calling
/// thread. Images are taken cyclically from `data`.
pub fn measure_encoding_latency(
    bundle: &ModelBundle,
    data: &Dataset,
    norm: &Normalization,
    warmup: usize,
    n: usize,
) -> Result<LatencyStats> {
    if data.is_empty() {
        return Err(Error::Config("latency measurement needs images".into()));
    }
    bundle.tables()?;
    let digest: Digest = bundle.digest();
    let images: Vec<_> = (0..data.len().min(warmup + n))
        .map(|i| make_batch(data, &[i], norm, None).map(|b| b.images))
        .collect::<Result<_>>()?;
    measure_latency(warmup, n, |i| {
        let out = compress_batch(bundle, &digest, &images[i % images.len()])?;
        std::hint::black_box(out);
        Ok(())
    })
}

/// Operating points of one model family, sorted by strictly increasing bpp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateAccuracyCurve {
    pub label: String,
    /// `(bpp, top-1 percent)`.
    pub points: Vec<(f64, f64)>,
}

/// Two rates closer than this are treated as duplicates.
pub const DUPLICATE_BPP: f64 = 1e-6;

impl RateAccuracyCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("a curve needs at least two points".into()));
        }
        for &(r, a) in &points {
            if !(r > 0.0) || !r.is_finite() || !(0.0..=100.0).contains(&a) {
                return Err(Error::Config(format!("invalid curve point ({r}, {a})")));
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|w| w[1].0 - w[0].0 < DUPLICATE_BPP) {
            return Err(Error::Config("duplicate bpp values in curve".into()));
        }
        Ok(RateAccuracyCurve { label: label.into(), points })
    }

    /// Reads a CSV with a `bpp,top1` header.
    pub fn from_csv(label: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty curve file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["bpp", "top1"] {
            return Err(Error::Format(format!("curve header must be bpp,top1, got {header:?}")));
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad curve row {}: {line:?}", i + 2)))
            };
            let mut it = line.split(',');
            let p = (parse(it.next())?, parse(it.next())?);
            if it.next().is_some() {
                return Err(Error::Format(format!("extra columns in curve row {}", i + 2)));
            }
            points.push(p);
        }
        Self::new(label, points)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bpp,top1\n");
        for (r, a) in &self.points {
            s.push_str(&format!("{r},{a}\n"));
        }
        s
    }
}

/// Evaluates each bundle and returns the curve plus the raw results in
/// input order.
pub fn collect_curve(
    label: &str,
    bundles: &[ModelBundle],
    data: &Dataset,
    norm: &Normalization,
) -> Result<(RateAccuracyCurve, Vec<EvalResult>)> {
    let results: Vec<EvalResult> = bundles.iter().map(|b| evaluate(b, data, norm)).collect::<Result<_>>()?;
    let points = results.iter().map(|r| (r.bpp, 100.0 * r.top1)).collect();
    Ok((RateAccuracyCurve::new(label, points)?, results))
}

/// Everything measured for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigMeasurement {
    pub name: String,
    pub macs: u64,
    pub latency: LatencyStats,
    pub curve: RateAccuracyCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RacRow {
    pub name: String,
    pub macs: u64,
    pub latency: LatencyStats,
    pub curve: Vec<(f64, f64)>,
    pub delta_acc: f64,
    /// Interpolant used for `delta_acc`.
    pub method: Method,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RacReport {
    pub configs: Vec<RacRow>,
    pub baseline: String,
}

pub const RAC_CSV_HEADER: &str = "config,macs,latency_mean_us,latency_p95_us,delta_acc,points";

/// Delta-accuracy of every configuration against the named baseline. The
/// cubic fit is used when both curves have at least four points, the
/// piecewise-linear one otherwise.
pub fn rac_report(configs: Vec<ConfigMeasurement>, baseline: &str) -> Result<RacReport> {
    let base = configs
        .iter()
        .find(|c| c.name == baseline)
        .ok_or_else(|| Error::Config(format!("baseline {baseline:?} is not among the configurations")))?
        .curve
        .clone();
    let rows = configs
        .into_iter()
        .map(|c| {
            let method = Method::for_curves(&c.curve, &base);
            let delta_acc = if c.name == baseline {
                0.0
            } else {
                delta_accuracy(&c.curve, &base, method)?
            };
            Ok(RacRow {
                name: c.name,
                macs: c.macs,
                latency: c.latency,
                curve: c.curve.points,
                delta_acc,
                method,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RacReport {
        configs: rows,
        baseline: baseline.to_string(),
    })
}

impl RacReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per configuration; `points` lists `bpp:top1` pairs joined
    /// by `;`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{RAC_CSV_HEADER}\n");
        for r in &self.configs {
            let pts: Vec<String> = r.curve.iter().map(|(b, a)| format!("{b:.6}:{a:.4}")).collect();
            s.push_str(&format!(
                "{},{},{:.3},{:.3},{:.6},{}\n",
                r.name,
                r.macs,
                r.latency.mean_us,
                r.latency.p95_us,
                r.delta_acc,
                pts.join(";")
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn zero_samples_is_an_error() {
        assert!(matches!(measure_latency(0, 0, |_| Ok(())), Err(Error::Config(_))));
    }

    #[test]
    fn sleeping_stub_calibrates_the_timer() {
        let s = measure_latency(3, 20, |_| {
            std::thread::sleep(Duration::from_millis(1));
            Ok(())
        })
        .unwrap();
        assert_eq!(s.n, 20);
        assert_eq!(s.warmup, 3);
        assert!((1000.0..=1500.0).contains(&s.mean_us), "{s:?}");
    }

    #[test]
    fn warmup_is_excluded() {
        let s = measure_latency(2, 3, |i| {
            if i < 2 {
                std::thread::sleep(Duration::from_millis(30));
            }
            Ok(())
        })
        .unwrap();
        assert!(s.mean_us < 10_000.0, "{s:?}");
    }

    #[test]
    fn stats_of_known_samples() {
        let s = LatencyStats::from_samples(&[1.0, 2.0, 3.0, 4.0], 0).unwrap();
        assert_eq!(s.mean_us, 2.5);
        assert_eq!(s.median_us, 2.5);
        assert_eq!(s.p95_us, 4.0);
        assert!((s.stddev_us - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn curve_sorting_and_duplicates() {
        let c = RateAccuracyCurve::new("a", vec![(0.9, 80.0), (0.1, 60.0), (0.5, 70.0)]).unwrap();
        assert_eq!(c.points[0], (0.1, 60.0));
        assert!(RateAccuracyCurve::new("a", vec![(0.5, 1.0), (0.5, 2.0)]).is_err());
        assert!(RateAccuracyCurve::new("a", vec![(0.5, 1.0)]).is_err());
        let back = RateAccuracyCurve::from_csv("a", &c.to_csv()).unwrap();
        assert_eq!(back, c);
        assert!(RateAccuracyCurve::from_csv("a", "x,y\n1,2\n").is_err());
    }

    fn measurement(name: &str, macs: u64, offset: f64) -> ConfigMeasurement {
        ConfigMeasurement {
            name: name.into(),
            macs,
            latency: LatencyStats::from_samples(&[10.0, 12.0], 1).unwrap(),
            curve: RateAccuracyCurve::new(
                name,
                vec![(0.1, 60.0 + offset), (0.3, 70.0 + offset), (0.6, 76.0 + offset), (0.9, 80.0 + offset)],
            )
            .unwrap(),
        }
    }

    #[test]
    fn report_rows_and_schema() {
        let r = rac_report(
            vec![measurement("n0", 10, 0.0), measurement("n4", 20, 1.5), measurement("n8", 30, 2.0)],
            "n0",
        )
        .unwrap();
        assert_eq!(r.configs[0].delta_acc, 0.0);
        assert!((r.configs[1].delta_acc - 1.5).abs() < 1e-9);
        assert!(r.configs.windows(2).all(|w| w[0].macs < w[1].macs));
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "config,macs,latency_mean_us,latency_p95_us,delta_acc,points");
        assert_eq!(csv.lines().count(), 4);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["baseline"], "n0");
        assert_eq!(json["configs"][2]["name"], "n8");
        assert!(json["configs"][0]["curve"][0].is_array());
        assert!(rac_report(vec![measurement("n0", 1, 0.0)], "zz").is_err());
    }
}

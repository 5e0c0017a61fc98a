//! Integer cumulative-frequency tables derived from a trained prior.

use serde::{Deserialize, Serialize};

use crate::entropy::prior::FactorizedPrior;
use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;
pub const MAX_SUPPORT: usize = 4096;
/// Tail mass left outside the scanned support on each side.
pub const TAIL_MASS: f64 = 1e-6;
/// Extra symbols added beyond the scanned support on each side.
pub const SUPPORT_PAD: i32 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdfTable {
    /// Value of symbol index 0.
    pub y_min: i32,
    /// `cum[0] = 0`, `cum[S] = 2^16`, strictly increasing.
    pub cum: Vec<u32>,
}

impl CdfTable {
    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn y_max(&self) -> i32 {
        self.y_min + self.symbols() as i32 - 1
    }

    /// `(start, freq)` of symbol index `s`.
    pub fn interval(&self, s: usize) -> (u32, u32) {
        (self.cum[s], self.cum[s + 1] - self.cum[s])
    }

    /// Symbol index whose interval contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        // last index with cum[i] <= target
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Builds a table from real-valued masses with every symbol receiving at
    /// least one unit.
    pub fn from_pmf(y_min: i32, pmf: &[f64]) -> Result<Self> {
        let counts = quantize_pmf(pmf)?;
        let mut cum = Vec::with_capacity(counts.len() + 1);
        cum.push(0u32);
        for c in counts {
            cum.push(cum.last().unwrap() + c);
        }
        let t = CdfTable { y_min, cum };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.cum.len() >= 2
            && self.cum.len() - 1 <= MAX_SUPPORT
            && self.cum[0] == 0
            && *self.cum.last().unwrap() == TOTAL_FREQ
            && self.cum.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::Format("invalid cumulative frequency table".into()))
        }
    }
}

/// Scales `pmf` to integer counts summing to 2^16: floor, then hand out the
/// remaining units by largest remainder, then lift zero counts to one by
/// taking units from the most over-allocated symbols.
fn quantize_pmf(pmf: &[f64]) -> Result<Vec<u32>> {
    let n = pmf.len();
    if n == 0 || n > MAX_SUPPORT {
        return Err(Error::Config(format!("support of {n} symbols outside 1..={MAX_SUPPORT}")));
    }
    let total: f64 = pmf.iter().sum();
    if !(total > 0.0) || pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Numeric("pmf must be finite, non-negative, non-zero".into()));
    }
    let ideal: Vec<f64> = pmf.iter().map(|p| p / total * TOTAL_FREQ as f64).collect();
    let mut counts: Vec<i64> = ideal.iter().map(|x| x.floor() as i64).collect();
    let mut remaining = TOTAL_FREQ as i64 - counts.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(remaining.max(0) as usize) {
        counts[i] += 1;
        remaining -= 1;
    }
    debug_assert_eq!(remaining, 0);
    let deficit: i64 = counts.iter().filter(|&&c| c == 0).count() as i64;
    for c in counts.iter_mut().filter(|c| **c == 0) {
        *c = 1;
    }
    for _ in 0..deficit {
        let donor = (0..n)
            .filter(|&i| counts[i] > 1)
            .max_by(|&a, &b| (counts[a] as f64 - ideal[a]).total_cmp(&(counts[b] as f64 - ideal[b])))
            .ok_or_else(|| Error::Config("support too large for 16-bit precision".into()))?;
        counts[donor] -= 1;
    }
    Ok(counts.into_iter().map(|c| c as u32).collect())
}

/// Median of a CDF by bisection.
fn median(cdf: &impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Integer support `[y_min, y_max]` of one channel: scan outward from the
/// median until the tail beyond each bound is below [`TAIL_MASS`], then pad.
pub fn support_bounds(cdf: &impl Fn(f64) -> f64) -> Result<(i32, i32)> {
    let m = median(cdf).round() as i64;
    let limit = MAX_SUPPORT as i64;
    let mut lo = m;
    while cdf(lo as f64 - 0.5) >= TAIL_MASS {
        lo -= 1;
        if m - lo > limit {
            return Err(Error::Config(format!("support exceeds {MAX_SUPPORT} symbols")));
        }
    }
    let mut hi = m;
    while 1.0 - cdf(hi as f64 + 0.5) >= TAIL_MASS {
        hi += 1;
        if hi - m > limit {
            return Err(Error::Config(format!("support exceeds {MAX_SUPPORT} symbols")));
        }
    }
    let (lo, hi) = (lo as i32 - SUPPORT_PAD, hi as i32 + SUPPORT_PAD);
    if (hi - lo + 1) as usize > MAX_SUPPORT {
        return Err(Error::Config(format!(
            "support [{lo}, {hi}] exceeds {MAX_SUPPORT} symbols"
        )));
    }
    Ok((lo, hi))
}

/// Table over an explicit support; the edge symbols absorb the tails so the
/// masses sum to one.
pub fn table_for_support(cdf: &impl Fn(f64) -> f64, y_min: i32, y_max: i32) -> Result<CdfTable> {
    if y_max < y_min || (y_max - y_min + 1) as usize > MAX_SUPPORT {
        return Err(Error::Config(format!("support [{y_min}, {y_max}] invalid or too large")));
    }
    let pmf: Vec<f64> = (y_min..=y_max)
        .map(|y| {
            let lo = if y == y_min { 0.0 } else { cdf(y as f64 - 0.5) };
            let hi = if y == y_max { 1.0 } else { cdf(y as f64 + 0.5) };
            (hi - lo).max(0.0)
        })
        .collect();
    CdfTable::from_pmf(y_min, &pmf)
}

/// Freezes every channel of `prior` into a table.
pub fn freeze(prior: &FactorizedPrior, store: &ParamStore) -> Result<Vec<CdfTable>> {
    (0..prior.channels())
        .map(|c| {
            let cdf = prior.cdf_fn(store, c);
            let (lo, hi) = support_bounds(&cdf)?;
            table_for_support(&cdf, lo, hi)
        })
        .collect()
}

/// Ideal code length in bits of symbol `s` under `table`.
pub fn symbol_bits(table: &CdfTable, s: usize) -> f64 {
    let (_, f) = table.interval(s);
    PRECISION_BITS as f64 - (f as f64).log2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::prior::tests::logistic_prior;
    use crate::entropy::prior::sigmoid64;

    #[test]
    fn logistic_table_on_fixed_support() {
        let cdf = |x: f64| sigmoid64(x);
        let t = table_for_support(&cdf, -4, 4).unwrap();
        assert_eq!(t.cum.len(), 10);
        assert_eq!(t.cum[9], 65536);
        assert!(t.cum.windows(2).all(|w| w[0] < w[1]));
        // interior symbol masses track the real likelihood within one unit
        for s in 1..8 {
            let y = t.y_min + s as i32;
            let p = sigmoid64(y as f64 + 0.5) - sigmoid64(y as f64 - 0.5);
            let (_, f) = t.interval(s);
            assert!((f as f64 - p * 65536.0).abs() <= 1.0, "{y}: {f} vs {}", p * 65536.0);
        }
    }

    #[test]
    fn freezing_is_deterministic_and_covers_tails() {
        let mut s = ParamStore::new();
        let p = logistic_prior(&mut s, 2);
        let a = freeze(&p, &s).unwrap();
        let b = freeze(&p, &s).unwrap();
        assert_eq!(a, b);
        let cdf = p.cdf_fn(&s, 0);
        assert!(cdf(a[0].y_min as f64 - 0.5) <= TAIL_MASS);
        assert!(cdf(a[0].y_max() as f64 + 0.5) >= 1.0 - TAIL_MASS);
    }

    #[test]
    fn minimum_mass_is_one_unit() {
        let pmf = [1.0, 1e-12, 1e-12, 0.0, 1.0];
        let t = CdfTable::from_pmf(-2, &pmf).unwrap();
        for s in 0..5 {
            assert!(t.interval(s).1 >= 1);
        }
        assert_eq!(*t.cum.last().unwrap(), TOTAL_FREQ);
    }

    #[test]
    fn oversized_support_is_a_config_error() {
        // very wide logistic: scale 1e4 needs far more than 4096 symbols
        let cdf = |x: f64| sigmoid64(x / 1e4);
        assert!(matches!(support_bounds(&cdf), Err(Error::Config(_))));
        assert!(table_for_support(&|x| sigmoid64(x), 0, 5000).is_err());
    }

    #[test]
    fn lookup_finds_interval() {
        let t = CdfTable { y_min: 0, cum: vec![0, 10, 11, 65536] };
        assert_eq!(t.lookup(0), 0);
        assert_eq!(t.lookup(9), 0);
        assert_eq!(t.lookup(10), 1);
        assert_eq!(t.lookup(11), 2);
        assert_eq!(t.lookup(65535), 2);
    }
}

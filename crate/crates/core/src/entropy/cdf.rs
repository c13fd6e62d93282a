//! Integer CDF tables for the range coder.
//!
//! Every row covers a contiguous integer support `[lo, hi]` followed by one
//! escape symbol that carries the mass of both tails. Cumulative counts sum
//! to `2^PRECISION`, are strictly increasing, and are produced by rounding
//! the continuous CDF at bin edges and then nudging entries just enough to
//! give every symbol a nonzero count.

use std::sync::OnceLock;

use crate::entropy::models::{BottleneckParams, SCALE_BOUND};
use crate::entropy::range_coder::ChunkModel;
use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
const TOTAL: u32 = 1 << PRECISION;

/// Per-side tail mass left outside a factorized row.
pub const FACTORIZED_TAIL: f64 = 1.0 / (1u64 << 18) as f64;
/// Total tail mass left outside a Gaussian row.
pub const GAUSSIAN_TAIL: f64 = 1e-9;
pub const SCALE_LEVELS: usize = 64;
pub const SCALE_MAX: f64 = 256.0;
const MAX_HALF_WIDTH: i32 = 8192;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfRow {
    pub lo: i32,
    /// `n + 2` entries for `n` in-support symbols plus the escape.
    pub cdf: Vec<u32>,
}

impl CdfRow {
    /// Quantise a continuous CDF sampled at the `n + 1` bin edges
    /// `lo - 0.5, lo + 0.5, ..., lo + n - 0.5`.
    pub fn from_edges(lo: i32, edges: &[f64]) -> Result<Self> {
        let n = edges.len().checked_sub(1).filter(|&n| n > 0).ok_or_else(|| Error::invalid("empty CDF support"))?;
        if n + 1 >= TOTAL as usize {
            return Err(Error::invalid(format!("support of {n} symbols exceeds the CDF precision")));
        }
        let mut q = vec![0u32; n + 2];
        for i in 1..=n {
            let e = edges[i].clamp(0.0, 1.0);
            q[i] = (e * TOTAL as f64).round() as u32;
        }
        q[n + 1] = TOTAL;
        for i in 1..=n {
            q[i] = q[i].max(q[i - 1] + 1);
        }
        for i in (1..=n).rev() {
            q[i] = q[i].min(q[i + 1] - 1);
        }
        Ok(CdfRow { lo, cdf: q })
    }

    /// Row from a probability mass function starting at `lo`.
    pub fn from_pmf(lo: i32, pmf: &[f64], lower_tail: f64) -> Result<Self> {
        let mut edges = Vec::with_capacity(pmf.len() + 1);
        let mut acc = lower_tail;
        edges.push(acc);
        for &p in pmf {
            acc += p;
            edges.push(acc);
        }
        Self::from_edges(lo, &edges)
    }

    pub fn symbols(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn support(&self) -> (i32, i32) {
        (self.lo, self.lo + self.symbols() as i32 - 1)
    }

    pub fn escape_index(&self) -> usize {
        self.symbols()
    }

    /// Count assigned to `sym`, or to the escape when `sym` is out of support.
    pub fn freq(&self, sym: i32) -> u32 {
        let (lo, hi) = self.support();
        let k = if (lo..=hi).contains(&sym) {
            (sym - lo) as usize
        } else {
            self.escape_index()
        };
        self.cdf[k + 1] - self.cdf[k]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    pub rows: Vec<CdfRow>,
    pub model: ChunkModel,
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

fn logistic(l: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-l))
}

/// Scales assigned to Gaussian rows, log-spaced from the scale bound.
pub fn gaussian_scale_table() -> &'static [f32] {
    static TABLE: OnceLock<Vec<f32>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let (a, b) = (libm::log(SCALE_BOUND as f64), libm::log(SCALE_MAX));
        (0..SCALE_LEVELS)
            .map(|i| libm::exp(a + (b - a) * i as f64 / (SCALE_LEVELS - 1) as f64) as f32)
            .collect()
    })
}

/// Smallest table entry not below `scale`, clamped to the last row.
pub fn gaussian_scale_index(scale: f32) -> usize {
    let t = gaussian_scale_table();
    t[..t.len() - 1].partition_point(|&s| s < scale)
}

impl CdfTable {
    pub fn new(rows: Vec<CdfRow>, model: ChunkModel) -> Self {
        CdfTable { rows, model }
    }

    pub fn row(&self, idx: usize) -> Result<&CdfRow> {
        self.rows
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("CDF row {idx} of {}", self.rows.len())))
    }

    /// Zero-mean Gaussian rows, one per entry of [`gaussian_scale_table`].
    pub fn gaussian() -> &'static CdfTable {
        static TABLE: OnceLock<CdfTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            // Half-width covering all but GAUSSIAN_TAIL of the mass.
            let mult = 6.109_410_204_869_354;
            let rows = gaussian_scale_table()
                .iter()
                .map(|&s| {
                    let s = s as f64;
                    let half = (s * mult).ceil() as i32;
                    let edges: Vec<f64> = (-half..=half + 1).map(|k| phi((k as f64 - 0.5) / s)).collect();
                    CdfRow::from_edges(-half, &edges).expect("gaussian row")
                })
                .collect();
            CdfTable::new(rows, ChunkModel::GaussianY)
        })
    }

    /// One row per channel of a factorized prior.
    pub fn factorized(p: &BottleneckParams) -> Result<Self> {
        let tail_logit = libm::log(FACTORIZED_TAIL / (1.0 - FACTORIZED_TAIL));
        let logit = |c: usize, x: f64| p.logits_cumulative(c, x as f32) as f64;
        let mut rows = Vec::with_capacity(p.channels());
        for c in 0..p.channels() {
            // Median by bisection; the cumulative is monotone.
            let (mut a, mut b) = (-(MAX_HALF_WIDTH as f64), MAX_HALF_WIDTH as f64);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if logit(c, m) < 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            let median = (0.5 * (a + b)).round() as i32;
            let mut lo = median;
            while logit(c, lo as f64 - 0.5) > tail_logit && lo > median - MAX_HALF_WIDTH {
                lo -= 1;
            }
            let mut hi = median;
            while logit(c, hi as f64 + 0.5) < -tail_logit && hi < median + MAX_HALF_WIDTH {
                hi += 1;
            }
            let edges: Vec<f64> = (lo..=hi + 1).map(|k| logistic(logit(c, k as f64 - 0.5))).collect();
            if edges.iter().any(|e| !e.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite prior CDF in channel {c}")));
            }
            rows.push(CdfRow::from_edges(lo, &edges)?);
        }
        Ok(CdfTable::new(rows, ChunkModel::FactorizedZ))
    }
}

//! Log-domain depth discretization.
//!
//! A [`QuantizationScheme`] splits `[alpha, beta]` into `num_bins` intervals of
//! equal width in `log10` space. Bin indices run `0..=num_bins`, so a
//! per-pixel distribution over bins has `num_bins + 1` entries.

use serde::{Deserialize, Serialize};

use crate::dataio::DepthMap;
use crate::error::{Error, Result};

/// Tolerance on `sum(p) == 1` accepted by [`expected_bin`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "SchemeRepr")]
pub struct QuantizationScheme {
    alpha: f64,
    beta: f64,
    num_bins: usize,
    bin_width: f64,
}

#[derive(Serialize, Deserialize)]
struct SchemeRepr {
    alpha_m: f64,
    beta_m: f64,
    num_bins: usize,
}

impl TryFrom<SchemeRepr> for QuantizationScheme {
    type Error = Error;
    fn try_from(r: SchemeRepr) -> Result<Self> {
        QuantizationScheme::new(r.alpha_m, r.beta_m, r.num_bins)
    }
}

impl From<QuantizationScheme> for SchemeRepr {
    fn from(s: QuantizationScheme) -> Self {
        SchemeRepr {
            alpha_m: s.alpha,
            beta_m: s.beta,
            num_bins: s.num_bins,
        }
    }
}

impl QuantizationScheme {
    pub fn new(alpha: f64, beta: f64, num_bins: usize) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be > 0, got {alpha}")));
        }
        if !(beta.is_finite() && beta > alpha) {
            return Err(Error::InvalidInput(format!(
                "beta must exceed alpha ({alpha}), got {beta}"
            )));
        }
        if num_bins == 0 {
            return Err(Error::InvalidInput("num_bins must be >= 1".into()));
        }
        let bin_width = (beta.log10() - alpha.log10()) / num_bins as f64;
        Ok(Self {
            alpha,
            beta,
            num_bins,
            bin_width,
        })
    }

    /// Indoor default: 0.25 m to 10 m in 80 bins.
    pub fn low_range() -> Self {
        Self::new(0.25, 10.0, 80).expect("valid constants")
    }

    /// Outdoor default: 1 m to 90 m in 80 bins.
    pub fn high_range() -> Self {
        Self::new(1.0, 90.0, 80).expect("valid constants")
    }

    /// Mixed-range scheme used by the coarse router network.
    pub fn coarse() -> Self {
        Self::new(0.25, 90.0, 80).expect("valid constants")
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    /// Number of classes a classifier over this scheme must emit (`K + 1`).
    pub fn num_classes(&self) -> usize {
        self.num_bins + 1
    }

    /// Width of one bin in `log10` units.
    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    /// Continuous (unrounded) bin coordinate of an in-range depth.
    fn bin_coordinate(&self, x: f64) -> f64 {
        let x = x.clamp(self.alpha, self.beta);
        (x.log10() - self.alpha.log10()) / self.bin_width
    }

    /// Maps a metric depth to its bin index. Out-of-range depths are clamped
    /// into `[alpha, beta]` first; ties round away from zero.
    pub fn quantize(&self, x: f64) -> Result<usize> {
        if !(x.is_finite() && x > 0.0) {
            return Err(Error::InvalidInput(format!(
                "depth must be finite and positive, got {x}"
            )));
        }
        let b = self.bin_coordinate(x).round();
        Ok(b.clamp(0.0, self.num_bins as f64) as usize)
    }

    /// Depth at the log-domain center of (possibly fractional) bin `b`.
    pub fn dequantize(&self, b: f64) -> Result<f64> {
        let k = self.num_bins as f64;
        if !(b.is_finite() && (0.0..=k).contains(&b)) {
            return Err(Error::Range {
                value: b,
                lo: 0.0,
                hi: k,
            });
        }
        Ok(self.dequantize_unchecked(b))
    }

    pub(crate) fn dequantize_unchecked(&self, b: f64) -> f64 {
        if b == 0.0 {
            return self.alpha;
        }
        if b == self.num_bins as f64 {
            return self.beta;
        }
        10f64.powf(self.alpha.log10() + b * self.bin_width)
    }

    pub fn quantize_map(&self, depth: &DepthMap) -> QuantizedDepthMap {
        let mut bins = vec![0u32; depth.len()];
        let mut valid = vec![false; depth.len()];
        for (i, (&d, &ok)) in depth.values().iter().zip(depth.valid()).enumerate() {
            if ok {
                // DepthMap guarantees valid pixels are finite and positive.
                bins[i] = self.quantize(d).expect("valid depth") as u32;
                valid[i] = true;
            }
        }
        QuantizedDepthMap {
            height: depth.height(),
            width: depth.width(),
            bins,
            valid,
        }
    }
}

/// Per-pixel bin indices in `[0, K]` plus the validity mask of the source map.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedDepthMap {
    pub height: usize,
    pub width: usize,
    pub bins: Vec<u32>,
    pub valid: Vec<bool>,
}

impl QuantizedDepthMap {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Expected bin `sum_j j * p[j]` of a distribution over bins `0..=K`.
pub fn expected_bin(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty distribution".into()));
    }
    let mut total = 0.0;
    let mut expectation = 0.0;
    for (j, &pj) in p.iter().enumerate() {
        if !(pj.is_finite() && pj >= 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {j} is {pj}, expected a nonnegative probability"
            )));
        }
        total += pj;
        expectation += j as f64 * pj;
    }
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(expectation)
}

//! Procedural scenes with known depth for desk-scale training.
//!
//! Each scene is a ground plane meeting a far backdrop (a wall indoors, the
//! horizon outdoors) with a few fronto-parallel rectangles in front. Color is
//! a fixed function of depth plus per-pixel texture noise, so depth can be
//! learned from appearance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DepthMap, RgbImage};
use crate::error::{Error, Result};
use crate::router::DepthRange;

/// Depth interval of low-range synthetic scenes, meters.
pub const LOW_SYNTHETIC_DEPTHS: (f64, f64) = (0.5, 8.0);
/// Depth interval of high-range synthetic scenes, meters.
pub const HIGH_SYNTHETIC_DEPTHS: (f64, f64) = (2.0, 80.0);

const TEXTURE_AMPLITUDE: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub range: DepthRange,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Upper bound on any generated depth, below the range's own maximum.
    pub max_depth: Option<f64>,
}

impl SyntheticSpec {
    pub fn new(range: DepthRange, width: usize, height: usize, seed: u64) -> Self {
        Self {
            range,
            width,
            height,
            seed,
            max_depth: None,
        }
    }

    pub fn with_max_depth(mut self, cap: f64) -> Self {
        self.max_depth = Some(cap);
        self
    }

    pub fn depth_bounds(&self) -> (f64, f64) {
        let (lo, hi) = match self.range {
            DepthRange::Low => LOW_SYNTHETIC_DEPTHS,
            DepthRange::High => HIGH_SYNTHETIC_DEPTHS,
        };
        (lo, self.max_depth.map_or(hi, |m| m.min(hi)))
    }
}

/// Appearance of a surface at depth `d`, before texture.
pub fn depth_color(d: f64) -> [f64; 3] {
    let t = ((d / 0.5).ln() / 160f64.ln()).clamp(0.0, 1.0);
    [
        0.1 + 0.8 * t,
        0.9 - 0.8 * t,
        0.5 + 0.35 * (5.0 * std::f64::consts::PI * t).sin(),
    ]
}

pub fn generate_synthetic_scene(spec: &SyntheticSpec) -> Result<(RgbImage, DepthMap)> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || w % 32 != 0 || h % 32 != 0 {
        return Err(Error::Shape(format!(
            "synthetic scene size {w}x{h} must be a positive multiple of 32"
        )));
    }
    let (lo, cap) = spec.depth_bounds();
    if !(cap > lo) {
        return Err(Error::InvalidInput(format!(
            "max depth {cap} must exceed the range minimum {lo}"
        )));
    }
    let salt = match spec.range {
        DepthRange::Low => 0x4c4f57,
        DepthRange::High => 0x48494748,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt);

    let far = match spec.range {
        DepthRange::Low => rng.random_range(0.75 * cap..=cap),
        DepthRange::High => cap,
    };
    let near = (lo * rng.random_range(1.0..1.5)).min(far);
    let horizon = rng.random_range((0.3 * h as f64) as usize..=(0.55 * h as f64) as usize);

    let mut depth = vec![far; w * h];
    // ground plane: inverse depth linear in the row below the horizon
    for y in horizon..h {
        let s = (y - horizon) as f64 / (h - 1 - horizon).max(1) as f64;
        let inv = (1.0 - s) / far + s / near;
        depth[y * w..(y + 1) * w].fill(1.0 / inv);
    }

    let n_rect = rng.random_range(2..=4);
    let mut rects: Vec<(usize, usize, usize, usize, f64)> = (0..n_rect)
        .map(|_| {
            let rw = rng.random_range(w / 8..=w / 3);
            let rh = rng.random_range(h / 8..=(h * 2) / 5);
            let x0 = rng.random_range(0..=w - rw);
            let y0 = rng.random_range(0..=h - rh);
            let ln = rng.random_range(lo.ln()..=(0.9 * far).max(lo).ln());
            (x0, y0, rw, rh, ln.exp())
        })
        .collect();
    rects.sort_by(|a, b| b.4.partial_cmp(&a.4).unwrap());
    for (x0, y0, rw, rh, d) in rects {
        for y in y0..y0 + rh {
            depth[y * w + x0..y * w + x0 + rw].fill(d);
        }
    }
    for d in &mut depth {
        *d = d.clamp(lo, cap);
    }

    let n = w * h;
    let mut rgb = vec![0.0; 3 * n];
    for (i, &d) in depth.iter().enumerate() {
        let base = depth_color(d);
        for c in 0..3 {
            let noise = rng.random_range(-TEXTURE_AMPLITUDE..=TEXTURE_AMPLITUDE);
            rgb[c * n + i] = (base[c] + noise).clamp(0.0, 1.0);
        }
    }
    Ok((RgbImage::new(h, w, rgb)?, DepthMap::new(h, w, depth, vec![true; n])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::new(DepthRange::Low, 64, 64, 17);
        let a = generate_synthetic_scene(&spec).unwrap();
        let b = generate_synthetic_scene(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&SyntheticSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn depths_within_bounds_and_fully_valid() {
        for range in [DepthRange::Low, DepthRange::High] {
            for seed in 0..20 {
                let spec = SyntheticSpec::new(range, 64, 32, seed);
                let (lo, hi) = spec.depth_bounds();
                let (img, d) = generate_synthetic_scene(&spec).unwrap();
                assert_eq!(d.num_valid(), 64 * 32);
                assert_eq!((img.width(), img.height()), (64, 32));
                assert!(d.values().iter().all(|&v| v >= lo && v <= hi));
            }
        }
    }

    #[test]
    fn cap_places_scene_on_either_side_of_threshold() {
        let sigma = 5.89;
        let below = SyntheticSpec::new(DepthRange::Low, 64, 64, 3).with_max_depth(5.0);
        let (_, d) = generate_synthetic_scene(&below).unwrap();
        assert!(d.max_valid().unwrap() <= 5.0);
        let above = SyntheticSpec::new(DepthRange::High, 64, 64, 3).with_max_depth(20.0);
        let (_, d) = generate_synthetic_scene(&above).unwrap();
        assert!(d.max_valid().unwrap() > sigma);
    }

    #[test]
    fn rejects_indivisible_size() {
        assert!(generate_synthetic_scene(&SyntheticSpec::new(DepthRange::Low, 60, 64, 0)).is_err());
    }
}

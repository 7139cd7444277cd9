use crate::dataio::{DepthMap, RgbImage};
use crate::error::{Error, Result};

const STOPS: [[f64; 3]; 5] = [
    [0.99, 0.91, 0.15],
    [0.95, 0.45, 0.10],
    [0.75, 0.13, 0.35],
    [0.36, 0.09, 0.55],
    [0.05, 0.03, 0.20],
];

/// Near-to-far color ramp for `t` in `[0, 1]`.
fn ramp(t: f64) -> [f64; 3] {
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)
}

/// RGB on the left, depth on the right colored in log scale between
/// `near` and `far`; invalid depth pixels are black.
pub fn side_by_side(image: &RgbImage, depth: &DepthMap, near: f64, far: f64) -> Result<RgbImage> {
    let (w, h) = (image.width(), image.height());
    if (depth.width(), depth.height()) != (w, h) {
        return Err(Error::Shape(format!(
            "image {w}x{h} and depth {}x{} differ",
            depth.width(),
            depth.height()
        )));
    }
    if !(near > 0.0 && far > near) {
        return Err(Error::InvalidInput(format!("bad color range [{near}, {far}]")));
    }
    let ow = 2 * w;
    let mut data = vec![0.0; 3 * ow * h];
    let span = (far / near).ln();
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(x, y);
            let dc = depth.get(x, y).map_or([0.0; 3], |d| ramp((d / near).ln() / span));
            for c in 0..3 {
                data[c * ow * h + y * ow + x] = px[c];
                data[c * ow * h + y * ow + w + x] = dc[c];
            }
        }
    }
    RgbImage::new(h, ow, data)
}

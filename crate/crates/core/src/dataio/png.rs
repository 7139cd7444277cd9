//! 16-bit depth PNG and 8-bit RGB PNG containers.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::{DepthMap, RgbImage};
use crate::error::{Error, Result};

/// Divisor between raw 16-bit values and meters (KITTI convention).
pub const DEFAULT_DEPTH_SCALE: f64 = 256.0;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a single-channel 16-bit PNG; raw `0` marks an invalid pixel.
pub fn read_depth_png16(path: impl AsRef<Path>, scale: f64) -> Result<DepthMap> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::Format(format!(
            "{}: expected 16-bit single-channel PNG, found {:?}",
            path.display(),
            img.color()
        )));
    };
    let (w, h) = buf.dimensions();
    let raw = buf.into_raw();
    depth_from_raw(h as usize, w as usize, &raw, scale)
}

pub(crate) fn depth_from_raw(height: usize, width: usize, raw: &[u16], scale: f64) -> Result<DepthMap> {
    let values = raw.iter().map(|&r| r as f64 / scale).collect();
    let valid = raw.iter().map(|&r| r != 0).collect();
    DepthMap::new(height, width, values, valid)
}

pub(crate) fn depth_to_raw(depth: &DepthMap, scale: f64) -> Result<Vec<u16>> {
    let max_depth = u16::MAX as f64 / scale;
    depth
        .values()
        .iter()
        .zip(depth.valid())
        .map(|(&d, &ok)| {
            if !ok {
                return Ok(0);
            }
            let raw = (d * scale).round();
            if raw > u16::MAX as f64 {
                return Err(Error::Range {
                    value: d,
                    lo: 0.0,
                    hi: max_depth,
                });
            }
            if raw < 1.0 {
                return Err(Error::Range {
                    value: d,
                    lo: 0.5 / scale,
                    hi: max_depth,
                });
            }
            Ok(raw as u16)
        })
        .collect()
}

/// Writes `round(depth * scale)`, invalid pixels as `0`.
pub fn write_depth_png16(depth: &DepthMap, path: impl AsRef<Path>, scale: f64) -> Result<()> {
    let path = path.as_ref();
    let raw = depth_to_raw(depth, scale)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw)
            .expect("buffer sized from map");
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

pub fn write_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width(), img.height());
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = img.pixel(x as usize, y as usize);
        Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_conversion_examples() {
        let d = depth_from_raw(1, 2, &[5120, 0], 256.0).unwrap();
        assert_eq!(d.get(0, 0), Some(20.0));
        assert_eq!(d.get(1, 0), None);

        let d = DepthMap::new(1, 2, vec![20.0, 0.0], vec![true, false]).unwrap();
        assert_eq!(depth_to_raw(&d, 256.0).unwrap(), vec![5120, 0]);
    }

    #[test]
    fn overflow_names_max_depth() {
        let d = DepthMap::filled(1, 1, 300.0).unwrap();
        match depth_to_raw(&d, 256.0) {
            Err(Error::Range { hi, .. }) => assert!((hi - 65535.0 / 256.0).abs() < 1e-12),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let vals: Vec<f64> = (0..12).map(|i| 0.37 + i as f64 * 1.713).collect();
        let mut valid = vec![true; 12];
        valid[5] = false;
        let d = DepthMap::new(3, 4, vals, valid).unwrap();
        write_depth_png16(&d, &p, 256.0).unwrap();
        let back = read_depth_png16(&p, 256.0).unwrap();
        assert_eq!(back.valid(), d.valid());
        for (a, b) in back.values().iter().zip(d.values()) {
            assert!((a - b).abs() <= 1.0 / 512.0 + 1e-12);
        }
    }

    #[test]
    fn rgb_png_is_not_depth() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        write_rgb_png(&RgbImage::zeros(2, 2), &p).unwrap();
        assert!(matches!(read_depth_png16(&p, 256.0), Err(Error::Format(_))));
        let back = read_rgb_png(&p).unwrap();
        assert_eq!(back.width(), 2);
    }
}

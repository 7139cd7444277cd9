//! Resizing, padding and cropping of image/depth pairs.

use rand::Rng;

use super::{DepthMap, RgbImage};
use crate::error::{Error, Result};

/// Target size KITTI frames are zero padded to.
pub const KITTI_PAD_SIZE: (usize, usize) = (1248, 384);
/// Size padded KITTI frames are downsampled to for coarse-network training.
pub const COARSE_DOWNSAMPLE_SIZE: (usize, usize) = (832, 256);
/// Training patch size (width, height).
pub const TRAIN_CROP_SIZE: (usize, usize) = (320, 240);

/// Linear interpolation taps `(i0, i1, w1)` with half-pixel centers: output
/// sample `o` reads `(1 - w1) * src[i0] + w1 * src[i1]`.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_plane(
    src: &[f64],
    (sw, sh): (usize, usize),
    dst: &mut [f64],
    (dw, dh): (usize, usize),
    xs: &[(usize, usize, f64)],
    ys: &[(usize, usize, f64)],
) {
    debug_assert_eq!(src.len(), sw * sh);
    debug_assert_eq!(dst.len(), dw * dh);
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        let r0 = &src[y0 * sw..(y0 + 1) * sw];
        let r1 = &src[y1 * sw..(y1 + 1) * sw];
        let out = &mut dst[oy * dw..(oy + 1) * dw];
        for (o, &(x0, x1, wx)) in out.iter_mut().zip(xs) {
            let top = r0[x0] + wx * (r0[x1] - r0[x0]);
            let bot = r1[x0] + wx * (r1[x1] - r1[x0]);
            *o = top + wy * (bot - top);
        }
    }
}

/// Bilinear resize of an RGB image (half-pixel centers, no antialiasing).
pub fn resize_bilinear(img: &RgbImage, width: usize, height: usize) -> Result<RgbImage> {
    if width == 0 || height == 0 {
        return Err(Error::Shape("resize target must be positive".into()));
    }
    if width == img.width() && height == img.height() {
        return Ok(img.clone());
    }
    let xs = bilinear_taps(img.width(), width);
    let ys = bilinear_taps(img.height(), height);
    let mut out = RgbImage::zeros(height, width);
    let n = width * height;
    for c in 0..3 {
        resize_plane(
            img.plane(c),
            (img.width(), img.height()),
            &mut out.data_mut()[c * n..(c + 1) * n],
            (width, height),
            &xs,
            &ys,
        );
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Source pixel indices overlapping output pixel `o`.
fn footprint(src: usize, dst: usize, o: usize) -> std::ops::Range<usize> {
    let scale = src as f64 / dst as f64;
    let lo = o as f64 * scale;
    let hi = (o + 1) as f64 * scale;
    let first = (lo.floor() as usize).min(src - 1);
    let last = (hi.ceil() as usize).clamp(first + 1, src);
    first..last
}

/// Resizes a depth map by nearest-valid sampling: each output pixel copies the
/// valid source pixel inside its footprint whose center is closest, or is
/// invalid when the footprint holds no valid pixel. Depths are never blended.
pub fn resize_depth(depth: &DepthMap, width: usize, height: usize) -> Result<DepthMap> {
    if width == 0 || height == 0 {
        return Err(Error::Shape("resize target must be positive".into()));
    }
    if width == depth.width() && height == depth.height() {
        return Ok(depth.clone());
    }
    let fx: Vec<_> = (0..width).map(|o| footprint(depth.width(), width, o)).collect();
    let fy: Vec<_> = (0..height).map(|o| footprint(depth.height(), height, o)).collect();
    let mut out = DepthMap::invalid(height, width);
    for (oy, ys) in fy.iter().enumerate() {
        for (ox, xs) in fx.iter().enumerate() {
            let mut best: Option<(f64, f64)> = None;
            for sy in ys.clone() {
                for sx in xs.clone() {
                    if let Some(d) = depth.get(sx, sy) {
                        let cy = (sy as f64 + 0.5) - (oy as f64 + 0.5) * depth.height() as f64 / height as f64;
                        let cx = (sx as f64 + 0.5) - (ox as f64 + 0.5) * depth.width() as f64 / width as f64;
                        let dist = cx * cx + cy * cy;
                        if best.is_none_or(|(bd, _)| dist < bd) {
                            best = Some((dist, d));
                        }
                    }
                }
            }
            out.set(ox, oy, best.map(|(_, d)| d))?;
        }
    }
    Ok(out)
}

/// Where a source raster sits inside a padded one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadOffset {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

pub trait Raster: Sized {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// Sub-window copy.
    fn crop(&self, left: usize, top: usize, width: usize, height: usize) -> Result<Self>;
    /// Places `self` at the bottom-left of a zero (invalid) canvas, i.e. pads
    /// the top and right edges.
    fn zero_pad(&self, width: usize, height: usize) -> Result<(Self, PadOffset)>;

    fn crop_back(&self, offset: &PadOffset) -> Result<Self> {
        self.crop(offset.left, offset.top, offset.width, offset.height)
    }
}

fn check_window(src: (usize, usize), left: usize, top: usize, w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 || left + w > src.0 || top + h > src.1 {
        return Err(Error::Shape(format!(
            "window {w}x{h} at ({left}, {top}) does not fit in {}x{}",
            src.0, src.1
        )));
    }
    Ok(())
}

fn pad_offset(src: (usize, usize), w: usize, h: usize) -> Result<PadOffset> {
    if src.0 > w || src.1 > h {
        return Err(Error::Shape(format!(
            "source {}x{} larger than pad target {w}x{h}",
            src.0, src.1
        )));
    }
    Ok(PadOffset {
        left: 0,
        top: h - src.1,
        width: src.0,
        height: src.1,
    })
}

impl Raster for RgbImage {
    fn width(&self) -> usize {
        RgbImage::width(self)
    }

    fn height(&self) -> usize {
        RgbImage::height(self)
    }

    fn crop(&self, left: usize, top: usize, w: usize, h: usize) -> Result<Self> {
        check_window((self.width(), self.height()), left, top, w, h)?;
        let mut out = RgbImage::zeros(h, w);
        let (n_src, n_dst) = (self.width() * self.height(), w * h);
        for c in 0..3 {
            for y in 0..h {
                let s = c * n_src + (top + y) * self.width() + left;
                out.data_mut()[c * n_dst + y * w..c * n_dst + (y + 1) * w]
                    .copy_from_slice(&self.data()[s..s + w]);
            }
        }
        Ok(out)
    }

    fn zero_pad(&self, w: usize, h: usize) -> Result<(Self, PadOffset)> {
        let off = pad_offset((self.width(), self.height()), w, h)?;
        let mut out = RgbImage::zeros(h, w);
        let (n_src, n_dst) = (self.width() * self.height(), w * h);
        for c in 0..3 {
            for y in 0..self.height() {
                let d = c * n_dst + (off.top + y) * w + off.left;
                out.data_mut()[d..d + self.width()]
                    .copy_from_slice(&self.data()[c * n_src + y * self.width()..][..self.width()]);
            }
        }
        Ok((out, off))
    }
}

impl Raster for DepthMap {
    fn width(&self) -> usize {
        DepthMap::width(self)
    }

    fn height(&self) -> usize {
        DepthMap::height(self)
    }

    fn crop(&self, left: usize, top: usize, w: usize, h: usize) -> Result<Self> {
        check_window((self.width(), self.height()), left, top, w, h)?;
        let mut values = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for y in top..top + h {
            let row = y * self.width();
            values.extend_from_slice(&self.values()[row + left..row + left + w]);
            valid.extend_from_slice(&self.valid()[row + left..row + left + w]);
        }
        DepthMap::new(h, w, values, valid)
    }

    fn zero_pad(&self, w: usize, h: usize) -> Result<(Self, PadOffset)> {
        let off = pad_offset((self.width(), self.height()), w, h)?;
        let mut out = DepthMap::invalid(h, w);
        for y in 0..self.height() {
            for x in 0..self.width() {
                out.set(off.left + x, off.top + y, self.get(x, y))?;
            }
        }
        Ok((out, off))
    }
}

/// Aligned random crop of an image/depth pair. Returns the crop origin.
pub fn random_crop<R: Rng + ?Sized>(
    img: &RgbImage,
    depth: &DepthMap,
    width: usize,
    height: usize,
    rng: &mut R,
) -> Result<(RgbImage, DepthMap, (usize, usize))> {
    if img.width() != depth.width() || img.height() != depth.height() {
        return Err(Error::Shape(format!(
            "image {}x{} and depth {}x{} are not aligned",
            img.width(),
            img.height(),
            depth.width(),
            depth.height()
        )));
    }
    if img.width() < width || img.height() < height {
        return Err(Error::Shape(format!(
            "source {}x{} smaller than crop {width}x{height}",
            img.width(),
            img.height()
        )));
    }
    let left = rng.random_range(0..=img.width() - width);
    let top = rng.random_range(0..=img.height() - height);
    Ok((
        img.crop(left, top, width, height)?,
        depth.crop(left, top, width, height)?,
        (left, top),
    ))
}

/// Outdoor frame preparation for coarse-network training: zero pad to
/// 1248x384, downsample to 832x256, then take a random 320x240 patch.
pub fn coarse_training_patch<R: Rng + ?Sized>(
    img: &RgbImage,
    depth: &DepthMap,
    rng: &mut R,
) -> Result<(RgbImage, DepthMap)> {
    let (pw, ph) = KITTI_PAD_SIZE;
    let (dw, dh) = COARSE_DOWNSAMPLE_SIZE;
    let (cw, ch) = TRAIN_CROP_SIZE;
    let (img, _) = img.zero_pad(pw, ph)?;
    let (depth, _) = depth.zero_pad(pw, ph)?;
    let img = resize_bilinear(&img, dw, dh)?;
    let depth = resize_depth(&depth, dw, dh)?;
    let (img, depth, _) = random_crop(&img, &depth, cw, ch, rng)?;
    Ok((img, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> RgbImage {
        let n = w * h;
        let data = (0..3 * n).map(|i| (i % 97) as f64 / 96.0).collect();
        RgbImage::new(h, w, data).unwrap()
    }

    #[test]
    fn identity_resize() {
        let img = ramp(7, 5);
        assert_eq!(resize_bilinear(&img, 7, 5).unwrap(), img);
        let d = DepthMap::from_values(2, 3, vec![1.0, 0.0, 3.0, 4.0, 5.0, 0.0]).unwrap();
        assert_eq!(resize_depth(&d, 3, 2).unwrap(), d);
    }

    #[test]
    fn constant_stays_constant() {
        let img = RgbImage::new(4, 6, vec![0.25; 72]).unwrap();
        let r = resize_bilinear(&img, 11, 3).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let d = DepthMap::filled(4, 6, 2.5).unwrap();
        let r = resize_depth(&d, 13, 2).unwrap();
        assert!(r.values().iter().all(|&v| v == 2.5));
        assert_eq!(r.num_valid(), 26);
    }

    #[test]
    fn halving_sizes() {
        let img = ramp(640, 480);
        let r = resize_bilinear(&img, 320, 240).unwrap();
        assert_eq!((r.width(), r.height()), (320, 240));
    }

    #[test]
    fn depth_resize_never_blends() {
        // checkerboard of two depths with holes
        let (w, h) = (16, 12);
        let vals: Vec<f64> = (0..w * h)
            .map(|i| match i % 3 {
                0 => 0.0,
                1 => 2.0,
                _ => 9.0,
            })
            .collect();
        let d = DepthMap::from_values(h, w, vals).unwrap();
        for (tw, th) in [(5, 7), (32, 24), (8, 6), (3, 3)] {
            let r = resize_depth(&d, tw, th).unwrap();
            for (&v, &ok) in r.values().iter().zip(r.valid()) {
                assert!(!ok || v == 2.0 || v == 9.0, "fabricated depth {v}");
            }
        }
    }

    #[test]
    fn sparse_downsample_keeps_samples() {
        let mut d = DepthMap::invalid(4, 4);
        d.set(3, 3, Some(7.0)).unwrap();
        let r = resize_depth(&d, 2, 2).unwrap();
        assert_eq!(r.get(1, 1), Some(7.0));
        assert_eq!(r.num_valid(), 1);
    }

    #[test]
    fn pad_then_crop_back_is_identity() {
        let img = ramp(1240, 370);
        let (p, off) = img.zero_pad(1248, 384).unwrap();
        assert_eq!((p.width(), p.height()), (1248, 384));
        assert_eq!(off, PadOffset { left: 0, top: 14, width: 1240, height: 370 });
        assert_eq!(p.crop_back(&off).unwrap(), img);
        // padded rows on top and columns on the right are zero
        assert!(p.plane(0)[..1248 * 14].iter().all(|&v| v == 0.0));
        assert_eq!(p.pixel(1247, 383), [0.0; 3]);

        let same = img.zero_pad(1240, 370).unwrap();
        assert_eq!(same.0, img);
        assert_eq!((same.1.left, same.1.top), (0, 0));
        assert!(img.zero_pad(1000, 384).is_err());
    }

    #[test]
    fn depth_pad_marks_invalid() {
        let d = DepthMap::filled(2, 3, 4.0).unwrap();
        let (p, off) = d.zero_pad(4, 4).unwrap();
        assert_eq!(p.num_valid(), 6);
        assert_eq!(p.get(0, 0), None);
        assert_eq!(p.get(0, 2), Some(4.0));
        assert_eq!(p.crop_back(&off).unwrap(), d);
    }

    #[test]
    fn crop_identity_and_errors() {
        let img = ramp(320, 240);
        let d = DepthMap::filled(240, 320, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ci, cd, origin) = random_crop(&img, &d, 320, 240, &mut rng).unwrap();
        assert_eq!(origin, (0, 0));
        assert_eq!(ci, img);
        assert_eq!(cd, d);
        assert!(random_crop(&img, &d, 321, 240, &mut rng).is_err());
    }

    #[test]
    fn crop_is_seed_reproducible_and_aligned() {
        let img = ramp(400, 300);
        let vals = (0..400 * 300).map(|i| 1.0 + i as f64).collect();
        let d = DepthMap::from_values(300, 400, vals).unwrap();
        let a = random_crop(&img, &d, 320, 240, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&img, &d, 320, 240, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.2, b.2);
        let (x, y) = a.2;
        assert_eq!(a.1.get(0, 0), Some(1.0 + (y * 400 + x) as f64));
    }

    #[test]
    fn coarse_chain_produces_training_patch() {
        let img = ramp(1240, 370);
        let d = DepthMap::filled(370, 1240, 12.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pi, pd) = coarse_training_patch(&img, &d, &mut rng).unwrap();
        assert_eq!((pi.width(), pi.height()), TRAIN_CROP_SIZE);
        assert_eq!((pd.width(), pd.height()), TRAIN_CROP_SIZE);
        assert!(pd.values().iter().zip(pd.valid()).all(|(&v, &ok)| !ok || v == 12.0));
    }
}

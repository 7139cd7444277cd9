use crate::error::{Error, Result};

/// Metric depth raster with a per-pixel validity mask, row-major.
///
/// Valid pixels are finite and strictly positive. Invalid pixels always hold
/// exactly `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, mut values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if values.len() != n || valid.len() != n {
            return Err(Error::Shape(format!(
                "depth map {width}x{height} needs {n} values, got {} values and {} mask entries",
                values.len(),
                valid.len()
            )));
        }
        for (i, (v, &ok)) in values.iter_mut().zip(&valid).enumerate() {
            if ok {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "valid pixel {i} has non-positive or non-finite depth {v}"
                    )));
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    /// Builds a map where every positive finite value is valid and everything
    /// else is invalid.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self::new(height, width, values, valid)
    }

    pub fn filled(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width], vec![true; height * width])
    }

    pub fn invalid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            valid: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    /// Marks a pixel valid with the given depth, or invalid when `None`.
    pub fn set(&mut self, x: usize, y: usize, depth: Option<f64>) -> Result<()> {
        let i = y * self.width + x;
        match depth {
            Some(d) if d.is_finite() && d > 0.0 => {
                self.values[i] = d;
                self.valid[i] = true;
            }
            Some(d) => {
                return Err(Error::InvalidInput(format!("depth {d} cannot be valid")));
            }
            None => {
                self.values[i] = 0.0;
                self.valid[i] = false;
            }
        }
        Ok(())
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Maximum over valid pixels.
    pub fn max_valid(&self) -> Option<f64> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Three-channel image, planar (channel-major) layout, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image must have positive size".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "rgb image {width}x{height} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("rgb value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let n = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_pixels_are_zeroed() {
        let d = DepthMap::new(1, 2, vec![3.0, 7.0], vec![true, false]).unwrap();
        assert_eq!(d.values(), &[3.0, 0.0]);
        assert_eq!(d.max_valid(), Some(3.0));
    }

    #[test]
    fn rejects_bad_valid_pixel() {
        assert!(DepthMap::new(1, 1, vec![-1.0], vec![true]).is_err());
        assert!(DepthMap::new(1, 1, vec![f64::NAN], vec![true]).is_err());
        assert!(DepthMap::new(2, 2, vec![1.0], vec![true]).is_err());
    }

    #[test]
    fn rgb_bounds() {
        assert!(RgbImage::new(1, 1, vec![0.0, 0.5, 1.2]).is_err());
        assert!(RgbImage::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }
}

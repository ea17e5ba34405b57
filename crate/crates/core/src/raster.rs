//! Channel-major float rasters in `[-1, 1]`.

use ndarray::Array3;

/// Value of an untouched pixel in every channel.
pub const BACKGROUND: f64 = -1.0;

/// A `channels × height × width` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    data: Array3<f64>,
}

impl Raster {
    pub fn background(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, BACKGROUND)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((channels, height, width), value),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[[c, y, x]]
    }

    /// Pixels where any channel differs from the background.
    pub fn stroke_mask(&self) -> Vec<bool> {
        let (c, h, w) = self.dims();
        let mut mask = vec![false; h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if self.data[[ch, y, x]] > BACKGROUND {
                        mask[y * w + x] = true;
                    }
                }
            }
        }
        mask
    }

    pub fn stroke_count(&self) -> usize {
        self.stroke_mask().iter().filter(|&&m| m).count()
    }

    /// Elementwise max; both rasters must share dimensions.
    pub fn max_with(&self, other: &Raster) -> Raster {
        assert_eq!(self.dims(), other.dims());
        let mut out = self.data.clone();
        out.zip_mut_with(&other.data, |a, &b| *a = a.max(b));
        Raster { data: out }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamp to `[-1, 1]` and snap values within `tol` of the background onto it.
    pub fn cleaned(&self, tol: f64) -> Raster {
        let data = self.data.mapv(|v| {
            let v = v.clamp(-1.0, 1.0);
            if (v - BACKGROUND).abs() < tol {
                BACKGROUND
            } else {
                v
            }
        });
        Raster { data }
    }
}

//! Normalized intensity grids: 2-D slices and slice-stacked volumes.

use crate::error::{Error, Result};

/// Single-channel 2-D image, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageSlice {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} slice needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Checks finiteness and the `[0, 1]` range.
    pub fn validate(&self) -> Result<()> {
        check_range(&self.data)
    }
}

/// `depth × height × width × channels` intensities, depth slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageVolume {
    pub fn new(
        depth: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let n = depth * height * width * channels;
        if n != data.len() {
            return Err(Error::shape(format!(
                "volume {depth}x{height}x{width}x{channels} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
            channels: 1,
            data: vec![0.0; depth * height * width],
        }
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn get(&self, z: usize, row: usize, col: usize) -> f32 {
        self.data[(z * self.height + row) * self.width + col]
    }

    /// Copies out slice `z` (single-channel volumes only).
    pub fn slice(&self, z: usize) -> ImageSlice {
        assert_eq!(self.channels, 1, "slicing needs a single-channel volume");
        let n = self.slice_len();
        ImageSlice {
            height: self.height,
            width: self.width,
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<ImageSlice> {
        (0..self.depth).map(|z| self.slice(z)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.depth * self.slice_len() {
            return Err(Error::shape("volume dims disagree with data length"));
        }
        check_range(&self.data)
    }
}

fn check_range(data: &[f32]) -> Result<()> {
    if let Some((i, v)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(Error::Invalid(format!(
            "intensity {v} at index {i} outside [0, 1]"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_indexing_matches_volume() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 / 24.0).collect();
        let v = ImageVolume::new(2, 3, 4, 1, data).unwrap();
        let s = v.slice(1);
        assert_eq!(s.get(2, 3), v.get(1, 2, 3));
        assert!(v.validate().is_ok());
    }

    #[test]
    fn rejects_out_of_range() {
        let s = ImageSlice::new(1, 2, vec![0.5, 1.5]).unwrap();
        assert!(s.validate().is_err());
        let s = ImageSlice::new(1, 2, vec![0.5, f32::NAN]).unwrap();
        assert!(s.validate().is_err());
        assert!(ImageVolume::new(2, 2, 2, 1, vec![0.0; 7]).is_err());
    }
}

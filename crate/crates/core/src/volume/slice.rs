//! Planar slices and display windowing.
//!
//! Orientation: columns run along the fastest remaining axis and rows along
//! the next one. Axis Z gives (col = x, row = y), axis Y gives (col = x,
//! row = z) and axis X gives (col = y, row = z). Pixel `(col, row)` lives at
//! `pixels[col + width * row]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Volume3;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }

    /// Volume coordinates of slice pixel `(col, row)` on plane `index`.
    pub fn voxel(self, index: usize, col: usize, row: usize) -> [usize; 3] {
        match self {
            Axis::X => [index, col, row],
            Axis::Y => [col, index, row],
            Axis::Z => [col, row, index],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" | "sagittal" => Ok(Axis::X),
            "y" | "coronal" => Ok(Axis::Y),
            "z" | "axial" => Ok(Axis::Z),
            _ => Err(Error::argument("axis", format!("`{s}` is not one of x, y, z"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlicePixels {
    Hu(Vec<f32>),
    Gray(Vec<u8>),
}

impl SlicePixels {
    pub fn len(&self) -> usize {
        match self {
            SlicePixels::Hu(p) => p.len(),
            SlicePixels::Gray(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub axis: Axis,
    pub index: usize,
    pub pixels: SlicePixels,
}

impl SliceImage {
    pub fn hu(&self) -> Option<&[f32]> {
        match &self.pixels {
            SlicePixels::Hu(p) => Some(p),
            SlicePixels::Gray(_) => None,
        }
    }

    pub fn gray(&self) -> Option<&[u8]> {
        match &self.pixels {
            SlicePixels::Gray(p) => Some(p),
            SlicePixels::Hu(_) => None,
        }
    }
}

pub fn extract_slice(v: &Volume3, axis: Axis, index: usize) -> Result<SliceImage> {
    let d = v.dims().as_array();
    let extent = d[axis.index()];
    if index >= extent {
        return Err(Error::OutOfRange {
            axis: axis.name(),
            index: index as i64,
            extent,
        });
    }
    let (width, height) = match axis {
        Axis::X => (d[1], d[2]),
        Axis::Y => (d[0], d[2]),
        Axis::Z => (d[0], d[1]),
    };
    let mut pixels = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let [x, y, z] = axis.voxel(index, col, row);
            pixels.push(v.get(x, y, z));
        }
    }
    Ok(SliceImage {
        width,
        height,
        axis,
        index,
        pixels: SlicePixels::Hu(pixels),
    })
}

/// Map `[lo, hi]` HU linearly onto `[0, 255]`, clamping outside the window.
pub fn window_level(s: &SliceImage, lo: f64, hi: f64) -> Result<SliceImage> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::argument("window", format!("lo ({lo}) must be below hi ({hi})")));
    }
    let hu = s
        .hu()
        .ok_or_else(|| Error::argument("slice", "already windowed to 8-bit"))?;
    let scale = 255.0 / (hi - lo);
    let gray = hu
        .iter()
        .map(|&v| ((v as f64 - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(SliceImage {
        pixels: SlicePixels::Gray(gray),
        ..s.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Volume3::new(dims, (0..dims.len()).map(|_| rng.random_range(-1000.0..1000.0)).collect()).unwrap()
    }

    #[test]
    fn z_slice_of_z_ramp_is_constant() {
        let v = Volume3::from_fn(Dims::cube(4), |_, _, z| z as f32).unwrap();
        let s = extract_slice(&v, Axis::Z, 2).unwrap();
        assert_eq!(s.hu().unwrap(), &[2.0; 16]);
        assert!(matches!(extract_slice(&v, Axis::Z, 4), Err(Error::OutOfRange { extent: 4, .. })));
    }

    #[test]
    fn slices_match_direct_indexing() {
        let v = random_volume(Dims::new(5, 6, 7));
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let s = extract_slice(&v, axis, 3).unwrap();
            assert_eq!(s.pixels.len(), s.width * s.height);
            let px = s.hu().unwrap();
            for row in 0..s.height {
                for col in 0..s.width {
                    let (x, y, z) = match axis {
                        Axis::X => (3, col, row),
                        Axis::Y => (col, 3, row),
                        Axis::Z => (col, row, 3),
                    };
                    assert_eq!(px[col + s.width * row], v.data()[x + 5 * (y + 6 * z)]);
                }
            }
        }
    }

    #[test]
    fn all_slices_reconstruct_volume() {
        let v = random_volume(Dims::new(4, 3, 5));
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let mut rebuilt = vec![f32::NAN; v.data().len()];
            for i in 0..v.dims().as_array()[axis.index()] {
                let s = extract_slice(&v, axis, i).unwrap();
                for row in 0..s.height {
                    for col in 0..s.width {
                        let [x, y, z] = axis.voxel(i, col, row);
                        rebuilt[v.dims().index(x, y, z)] = s.hu().unwrap()[col + s.width * row];
                    }
                }
            }
            assert_eq!(rebuilt, v.data());
        }
    }

    #[test]
    fn windowing() {
        let v = Volume3::new(Dims::new(2, 2, 2), vec![-1000.0, 500.0, 900.0, -250.0, -2000.0, 0.0, 0.0, 0.0]).unwrap();
        let s = extract_slice(&v, Axis::Z, 0).unwrap();
        let w = window_level(&s, -1000.0, 500.0).unwrap();
        assert_eq!(w.gray().unwrap(), &[0, 255, 255, 128]);
        let s1 = extract_slice(&v, Axis::Z, 1).unwrap();
        assert_eq!(window_level(&s1, -1000.0, 500.0).unwrap().gray().unwrap()[0], 0);
        assert_eq!(window_level(&s1, -500.0, 500.0).unwrap().gray().unwrap()[1], 128);
        assert!(window_level(&s, 500.0, 500.0).is_err());
        assert!(window_level(&s, 600.0, 500.0).is_err());
    }
}

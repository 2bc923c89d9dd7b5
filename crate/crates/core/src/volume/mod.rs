//! 3D intensity volumes in Hounsfield units.
//!
//! Voxel data is stored x-fastest: the flat index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Intensities stay in HU; the `(x + 1000) / 2000`
//! intensity mapping is applied only where losses are evaluated.

mod mhd;
mod slice;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::RoiBox;

pub use mhd::{decode_mha, encode_mha, load_volume, save_volume, DataFile, ElementType, MhdHeader, VolumeFormat};
pub(crate) use mhd::{f32_payload, read_mhd, write_mhd};
pub use slice::{extract_slice, window_level, Axis, SliceImage, SlicePixels};

/// Grid extent along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        [x, y, z]
    }

    /// Number of voxels in one z-plane.
    pub const fn plane(&self) -> usize {
        self.nx * self.ny
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (name, n) in [("nx", self.nx), ("ny", self.ny), ("nz", self.nz)] {
            if n < 2 {
                return Err(Error::argument(name, format!("extent {n} is below the minimum of 2")));
            }
        }
        Ok(())
    }

    pub fn ensure_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimMismatch {
                left: *self,
                right: *other,
            });
        }
        Ok(())
    }
}

impl From<[usize; 3]> for Dims {
    fn from(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// A 3D scalar grid with physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    data: Vec<f32>,
}

impl Volume3 {
    /// Build a volume with unit spacing and zero origin.
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Self::with_geometry(dims, [1.0; 3], [0.0; 3], data)
    }

    pub fn with_geometry(
        dims: Dims,
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::argument(
                "data",
                format!("length {} does not match {} voxels for {dims}", data.len(), dims.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let [x, y, z] = dims.coords(i);
            return Err(Error::argument("data", format!("non-finite intensity at ({x}, {y}, {z})")));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::argument("spacing", format!("{spacing_mm:?} must be positive")));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::argument("origin", format!("{origin_mm:?} must be finite")));
        }
        Ok(Volume3 {
            dims,
            spacing_mm,
            origin_mm,
            data,
        })
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    /// Evaluate `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> f32 + Sync) -> Result<Self> {
        let data = (0..dims.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = dims.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Same geometry, new voxel values. Values are validated.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::with_geometry(self.dims, self.spacing_mm, self.origin_mm, data)
    }

    /// Apply `f` voxelwise, keeping geometry.
    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Result<Self> {
        self.with_data(self.data.par_iter().map(|&v| f(v)).collect())
    }

    /// Voxelwise `self - other`, e.g. for difference images.
    pub fn difference(&self, other: &Volume3) -> Result<Self> {
        self.dims.ensure_same(&other.dims)?;
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a as f64 - *b as f64) as f32)
                .collect(),
        )
    }
}

/// HU to the unit range used by the losses: `x -> (x + 1000) / 2000`, no clamping.
#[inline]
pub fn normalize_value(hu: f64) -> f64 {
    (hu + 1000.0) / 2000.0
}

#[inline]
pub fn denormalize_value(v: f64) -> f64 {
    2000.0 * v - 1000.0
}

/// Derivative of the normalized intensity with respect to HU.
pub const NORMALIZE_SLOPE: f64 = 1.0 / 2000.0;

pub fn normalize_hu(v: &Volume3) -> Volume3 {
    let data = v.data.par_iter().map(|&x| normalize_value(x as f64) as f32).collect();
    v.replace_data(data)
}

pub fn denormalize(v: &Volume3) -> Volume3 {
    let data = v.data.par_iter().map(|&x| denormalize_value(x as f64) as f32).collect();
    v.replace_data(data)
}

impl Volume3 {
    // Only for maps that cannot produce non-finite values from finite input.
    fn replace_data(&self, data: Vec<f32>) -> Volume3 {
        debug_assert_eq!(data.len(), self.data.len());
        Volume3 {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            origin_mm: self.origin_mm,
            data,
        }
    }
}

/// Root mean squared difference in the volumes' own units (HU for raw volumes).
pub fn rmse(a: &Volume3, b: &Volume3, mask: Option<&RoiBox>) -> Result<f64> {
    a.dims.ensure_same(&b.dims)?;
    let dims = a.dims;
    let roi = match mask {
        Some(roi) => {
            roi.validate(dims)?;
            *roi
        }
        None => RoiBox::full(dims),
    };
    let n = roi.voxel_count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    // Per-plane partial sums, added in plane order, keep the result independent of thread count.
    let partial: Vec<f64> = (roi.min[2]..=roi.max[2])
        .into_par_iter()
        .map(|z| {
            let mut s = 0.0;
            for y in roi.min[1]..=roi.max[1] {
                let row = dims.index(0, y, z);
                for x in roi.min[0]..=roi.max[0] {
                    let d = a.data[row + x] as f64 - b.data[row + x] as f64;
                    s += d * d;
                }
            }
            s
        })
        .collect();
    let sum: f64 = partial.iter().sum();
    Ok((sum / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3::new(dims, (0..dims.len()).map(|_| rng.random_range(-1000.0..1000.0)).collect()).unwrap()
    }

    #[test]
    fn normalization_endpoints() {
        let v = Volume3::new(Dims::new(3, 2, 2), vec![-1000.0, 0.0, 1000.0, -2000.0, 3000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let n = normalize_hu(&v);
        assert_eq!(&n.data()[..5], &[0.0, 0.5, 1.0, -0.5, 2.0]);
        let back = denormalize(&n);
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn denormalize_round_trip_within_tolerance() {
        let v = random_volume(Dims::cube(8), 3);
        let back = denormalize(&normalize_hu(&v));
        let err = v.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-3, "max error {err}");
        assert_eq!(denormalize(&Volume3::filled(Dims::cube(2), 0.0).unwrap()).data()[0], -1000.0);
        assert_eq!(denormalize(&Volume3::filled(Dims::cube(2), 0.5).unwrap()).data()[0], 0.0);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Volume3::new(Dims::new(1, 4, 4), vec![0.0; 16]).is_err());
        assert!(Volume3::new(Dims::cube(2), vec![0.0; 7]).is_err());
        let mut data = vec![0.0; 8];
        data[5] = f32::NAN;
        assert!(Volume3::new(Dims::cube(2), data).is_err());
    }

    #[test]
    fn rmse_examples() {
        let a = random_volume(Dims::cube(8), 1);
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        let b = a.map(|v| v + 50.0).unwrap();
        assert!((rmse(&a, &b, None).unwrap() - 50.0).abs() < 1e-3);
    }

    #[test]
    fn rmse_matches_direct_summation() {
        let a = random_volume(Dims::cube(8), 11);
        let b = random_volume(Dims::cube(8), 12);
        let roi = RoiBox::new([1, 2, 0], [6, 7, 3]).unwrap();
        // brute force over all voxels with an explicit containment test
        let (mut s, mut n) = (0.0f64, 0usize);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    if (1..=6).contains(&x) && (2..=7).contains(&y) && z <= 3 {
                        let d = a.get(x, y, z) as f64 - b.get(x, y, z) as f64;
                        s += d * d;
                        n += 1;
                    }
                }
            }
        }
        let oracle = (s / n as f64).sqrt();
        let got = rmse(&a, &b, Some(&roi)).unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-6);
        assert_eq!(rmse(&a, &b, None).unwrap(), rmse(&b, &a, None).unwrap());
        assert_eq!(
            rmse(&a, &b, Some(&RoiBox::full(a.dims()))).unwrap(),
            rmse(&a, &b, None).unwrap()
        );
    }

    #[test]
    fn rmse_errors() {
        let a = random_volume(Dims::cube(4), 1);
        let b = random_volume(Dims::cube(5), 1);
        assert!(matches!(rmse(&a, &b, None), Err(Error::DimMismatch { .. })));
        let roi = RoiBox::new([0, 0, 0], [4, 0, 0]).unwrap();
        assert!(rmse(&a, &a, Some(&roi)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_affine(alpha in 0.0f64..1.0, s1 in 0u64..1000, s2 in 0u64..1000) {
            let v1 = random_volume(Dims::cube(3), s1);
            let v2 = random_volume(Dims::cube(3), s2);
            let mix = v1.with_data(
                v1.data().iter().zip(v2.data())
                    .map(|(a, b)| (alpha * *a as f64 + (1.0 - alpha) * *b as f64) as f32)
                    .collect(),
            ).unwrap();
            let (n1, n2, nm) = (normalize_hu(&v1), normalize_hu(&v2), normalize_hu(&mix));
            for i in 0..nm.data().len() {
                let expect = alpha * n1.data()[i] as f64 + (1.0 - alpha) * n2.data()[i] as f64;
                proptest::prop_assert!((nm.data()[i] as f64 - expect).abs() < 1e-6);
            }
        }
    }
}

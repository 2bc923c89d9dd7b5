//! Displacement fields and the trilinear spatial transformer.
//!
//! The warp is backward: `warped(x) = moving(x + d(x))`, displacements in
//! voxel units. Sample positions are clamped to `[0, n - 1]` per axis; the
//! derivative along a clamped axis is zero.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{f32_payload, read_mhd, write_mhd, DataFile, Dims, MhdHeader, Volume3};

/// Inclusive, axis-aligned voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

const AXES: [&str; 3] = ["x", "y", "z"];

impl RoiBox {
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if min[a] > max[a] {
                return Err(Error::argument(
                    format!("roi.min.{}", AXES[a]),
                    format!("{} exceeds max {}", min[a], max[a]),
                ));
            }
        }
        Ok(RoiBox { min, max })
    }

    pub fn full(dims: Dims) -> Self {
        RoiBox {
            min: [0; 3],
            max: [dims.nx - 1, dims.ny - 1, dims.nz - 1],
        }
    }

    /// Box of half-width `radius` around `center`, cropped to the grid.
    pub fn around(center: [usize; 3], radius: usize, dims: Dims) -> Self {
        let d = dims.as_array();
        RoiBox {
            min: std::array::from_fn(|a| center[a].saturating_sub(radius)),
            max: std::array::from_fn(|a| (center[a] + radius).min(d[a] - 1)),
        }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        let d = dims.as_array();
        for a in 0..3 {
            if self.min[a] > self.max[a] {
                return Err(Error::argument(
                    format!("roi.min.{}", AXES[a]),
                    format!("{} exceeds max {}", self.min[a], self.max[a]),
                ));
            }
            if self.max[a] >= d[a] {
                return Err(Error::argument(
                    format!("roi.max.{}", AXES[a]),
                    format!("{} is outside the volume extent {}", self.max[a], d[a]),
                ));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.max[a] + 1 - self.min[a])
    }

    pub fn voxel_count(&self) -> usize {
        self.extent().iter().product()
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    pub fn contains_box(&self, other: &RoiBox) -> bool {
        (0..3).all(|a| self.min[a] <= other.min[a] && other.max[a] <= self.max[a])
    }

    pub fn intersects(&self, other: &RoiBox) -> bool {
        (0..3).all(|a| self.min[a] <= other.max[a] && other.min[a] <= self.max[a])
    }

    /// Flat indices of all voxels in the box, x-fastest.
    pub fn indices(&self, dims: Dims) -> impl Iterator<Item = usize> + '_ {
        (self.min[2]..=self.max[2]).flat_map(move |z| {
            (self.min[1]..=self.max[1]).flat_map(move |y| {
                let row = dims.index(0, y, z);
                (self.min[0]..=self.max[0]).map(move |x| row + x)
            })
        })
    }
}

impl fmt::Display for RoiBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.min;
        let [d, e, g] = self.max;
        write!(f, "{a},{b},{c},{d},{e},{g}")
    }
}

impl FromStr for RoiBox {
    type Err = Error;

    /// `x0,y0,z0,x1,y1,z1`, inclusive.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::argument("roi", format!("`{s}` is not six non-negative integers")))?;
        if parts.len() != 6 {
            return Err(Error::argument("roi", format!("expected 6 values, found {}", parts.len())));
        }
        RoiBox::new([parts[0], parts[1], parts[2]], [parts[3], parts[4], parts[5]])
    }
}

/// Per-voxel displacement `(dx, dy, dz)` in voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    data: Vec<[f32; 3]>,
}

impl DisplacementField {
    pub fn zeros(dims: Dims) -> Self {
        DisplacementField {
            dims,
            data: vec![[0.0; 3]; dims.len()],
        }
    }

    pub fn constant(dims: Dims, d: [f32; 3]) -> Self {
        DisplacementField {
            dims,
            data: vec![d; dims.len()],
        }
    }

    pub fn new(dims: Dims, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::argument(
                "dvf",
                format!("{} vectors do not match {} voxels", data.len(), dims.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            let [x, y, z] = dims.coords(i);
            return Err(Error::argument("dvf", format!("non-finite displacement at ({x}, {y}, {z})")));
        }
        Ok(DisplacementField { dims, data })
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> [f32; 3] + Sync) -> Result<Self> {
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

    pub fn data(&self) -> &[[f32; 3]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, d: [f32; 3]) {
        let i = self.dims.index(x, y, z);
        self.data[i] = d;
    }

    /// Components as one flat slice `[dx0, dy0, dz0, dx1, ...]`.
    pub fn as_flat(&self) -> &[f32] {
        self.data.as_flattened()
    }

    pub(crate) fn as_flat_mut(&mut self) -> &mut [f32] {
        self.data.as_flattened_mut()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = MhdHeader::new(self.dims, [1.0; 3], [0.0; 3], 3, DataFile::Local);
        write_mhd(path.as_ref(), header, &f32_payload(self.as_flat().iter().copied()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (h, values) = read_mhd(path)?;
        if h.channels != 3 {
            return Err(Error::format(path, "ElementNumberOfChannels", format!("expected 3, found {}", h.channels)));
        }
        let data = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(h.dims, data).map_err(|e| Error::format(path, "data", e.to_string()))
    }
}

#[inline]
fn axis_cell(p: f64, n: usize) -> (usize, f64, bool) {
    let max = (n - 1) as f64;
    let (q, clamped) = if p < 0.0 {
        (0.0, true)
    } else if p > max {
        (max, true)
    } else {
        (p, false)
    };
    let i0 = (q.floor() as usize).min(n - 2);
    (i0, q - i0 as f64, clamped)
}

/// Trilinear sample of `v` at continuous position `p` and its spatial gradient.
#[inline]
pub fn sample_with_gradient(v: &Volume3, p: [f64; 3]) -> (f64, [f64; 3]) {
    let dims = v.dims();
    let (x0, fx, cx) = axis_cell(p[0], dims.nx);
    let (y0, fy, cy) = axis_cell(p[1], dims.ny);
    let (z0, fz, cz) = axis_cell(p[2], dims.nz);
    let data = v.data();
    let i = dims.index(x0, y0, z0);
    let (sy, sz) = (dims.nx, dims.plane());
    let c = |o: usize| data[i + o] as f64;
    let (c000, c100, c010, c110) = (c(0), c(1), c(sy), c(sy + 1));
    let (c001, c101, c011, c111) = (c(sz), c(sz + 1), c(sz + sy), c(sz + sy + 1));

    // interpolate along x first
    let c00 = c000 + fx * (c100 - c000);
    let c10 = c010 + fx * (c110 - c010);
    let c01 = c001 + fx * (c101 - c001);
    let c11 = c011 + fx * (c111 - c011);
    let c0 = c00 + fy * (c10 - c00);
    let c1 = c01 + fy * (c11 - c01);
    let value = c0 + fz * (c1 - c0);

    let gx = if cx {
        0.0
    } else {
        let d00 = c100 - c000;
        let d10 = c110 - c010;
        let d01 = c101 - c001;
        let d11 = c111 - c011;
        let d0 = d00 + fy * (d10 - d00);
        let d1 = d01 + fy * (d11 - d01);
        d0 + fz * (d1 - d0)
    };
    let gy = if cy { 0.0 } else { (c10 - c00) + fz * ((c11 - c01) - (c10 - c00)) };
    let gz = if cz { 0.0 } else { c1 - c0 };
    (value, [gx, gy, gz])
}

#[inline]
pub fn sample(v: &Volume3, p: [f64; 3]) -> f64 {
    sample_with_gradient(v, p).0
}

#[inline]
pub(crate) fn sample_position(dims: Dims, idx: usize, d: [f32; 3]) -> [f64; 3] {
    let [x, y, z] = dims.coords(idx);
    [x as f64 + d[0] as f64, y as f64 + d[1] as f64, z as f64 + d[2] as f64]
}

/// `warped(x) = moving(x + d(x))`.
pub fn warp(moving: &Volume3, dvf: &DisplacementField) -> Result<Volume3> {
    moving.dims().ensure_same(&dvf.dims)?;
    let dims = moving.dims();
    let data = dvf
        .data
        .par_iter()
        .enumerate()
        .map(|(i, &d)| sample(moving, sample_position(dims, i, d)) as f32)
        .collect();
    moving.with_data(data)
}

/// Derivative of `warped(x)` with respect to the three components of `d(x)`.
pub fn warp_jvp(moving: &Volume3, dvf: &DisplacementField, x: [usize; 3]) -> Result<[f64; 3]> {
    moving.dims().ensure_same(&dvf.dims)?;
    let dims = moving.dims();
    for (a, (&i, &n)) in x.iter().zip(dims.as_array().iter()).enumerate() {
        if i >= n {
            return Err(Error::OutOfRange {
                axis: AXES[a],
                index: i as i64,
                extent: n,
            });
        }
    }
    let idx = dims.index(x[0], x[1], x[2]);
    Ok(sample_with_gradient(moving, sample_position(dims, idx, dvf.data[idx])).1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvfStats {
    pub max_magnitude: f64,
    pub mean_magnitude: f64,
}

pub fn dvf_stats(dvf: &DisplacementField, roi: Option<&RoiBox>) -> Result<DvfStats> {
    let roi = match roi {
        Some(r) => {
            r.validate(dvf.dims)?;
            *r
        }
        None => RoiBox::full(dvf.dims),
    };
    let (mut max, mut sum) = (0.0f64, 0.0f64);
    for i in roi.indices(dvf.dims) {
        let m = magnitude(dvf.data[i]);
        max = max.max(m);
        sum += m;
    }
    Ok(DvfStats {
        max_magnitude: max,
        mean_magnitude: sum / roi.voxel_count() as f64,
    })
}

#[inline]
pub(crate) fn magnitude(d: [f32; 3]) -> f64 {
    let [a, b, c] = d.map(|v| v as f64);
    (a * a + b * b + c * c).sqrt()
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

    fn random_dvf(dims: Dims, seed: u64, amp: f32) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.len()).map(|_| std::array::from_fn(|_| rng.random_range(-amp..amp))).collect();
        DisplacementField::new(dims, data).unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        for (n, seed) in [(2, 1), (5, 2), (9, 3)] {
            let v = random_volume(Dims::new(n, n + 1, n + 2), seed);
            let w = warp(&v, &DisplacementField::zeros(v.dims())).unwrap();
            assert!(v.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn unit_shift_matches_clamped_brute_force() {
        let dims = Dims::new(6, 4, 3);
        let v = Volume3::from_fn(dims, |x, _, _| x as f32).unwrap();
        let w = warp(&v, &DisplacementField::constant(dims, [1.0, 0.0, 0.0])).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..6 {
                    let src = (x + 1).min(5);
                    assert_eq!(w.get(x, y, z), v.get(src, y, z));
                }
            }
        }
        let half = warp(&v, &DisplacementField::constant(dims, [0.5, 0.0, 0.0])).unwrap();
        for x in 0..5 {
            assert_eq!(half.get(x, 1, 1), x as f32 + 0.5);
        }
    }

    #[test]
    fn affine_volumes_are_exact_in_interior() {
        let dims = Dims::cube(10);
        let f = |x: f64, y: f64, z: f64| 3.0 * x - 2.0 * y + 0.5 * z + 7.0;
        let v = Volume3::from_fn(dims, |x, y, z| f(x as f64, y as f64, z as f64) as f32).unwrap();
        let dvf = random_dvf(dims, 4, 2.0);
        let w = warp(&v, &dvf).unwrap();
        for z in 2..8 {
            for y in 2..8 {
                for x in 2..8 {
                    let d = dvf.get(x, y, z).map(|c| c as f64);
                    let expect = f(x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]);
                    assert!((w.get(x, y, z) as f64 - expect).abs() < 1e-5 * expect.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn warped_voxel_depends_only_on_its_own_displacement() {
        let dims = Dims::cube(6);
        let v = random_volume(dims, 9);
        let dvf = random_dvf(dims, 10, 1.5);
        let base = warp(&v, &dvf).unwrap();
        let mut perturbed = dvf.clone();
        perturbed.set(2, 3, 4, [0.7, -1.1, 0.3]);
        let w = warp(&v, &perturbed).unwrap();
        let changed = dims.index(2, 3, 4);
        for i in 0..dims.len() {
            if i != changed {
                assert_eq!(w.data()[i].to_bits(), base.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn jvp_simple_cases() {
        let dims = Dims::cube(6);
        let ramp = Volume3::from_fn(dims, |x, _, _| x as f32).unwrap();
        let dvf = DisplacementField::constant(dims, [0.3, -0.2, 0.1]);
        assert_eq!(warp_jvp(&ramp, &dvf, [2, 2, 2]).unwrap(), [1.0, 0.0, 0.0]);
        let flat = Volume3::filled(dims, 40.0).unwrap();
        assert_eq!(warp_jvp(&flat, &dvf, [2, 2, 2]).unwrap(), [0.0, 0.0, 0.0]);
        assert!(warp_jvp(&flat, &dvf, [6, 0, 0]).is_err());
        // clamped along x: sample at 5 + 3 lies past the edge
        let out = DisplacementField::constant(dims, [3.0, 0.0, 0.0]);
        assert_eq!(warp_jvp(&ramp, &out, [5, 1, 1]).unwrap()[0], 0.0);
    }

    #[test]
    fn jvp_matches_central_differences() {
        let dims = Dims::cube(7);
        let v = random_volume(dims, 21);
        let dvf = random_dvf(dims, 22, 0.9);
        let h = 1e-3;
        for z in 1..6 {
            for y in 1..6 {
                for x in 1..6 {
                    let g = warp_jvp(&v, &dvf, [x, y, z]).unwrap();
                    let d = dvf.get(x, y, z).map(|c| c as f64);
                    let base = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                    for a in 0..3 {
                        let (mut p, mut m) = (base, base);
                        p[a] += h;
                        m[a] -= h;
                        // skip samples whose stencil straddles a cell face
                        if p[a].floor() != m[a].floor() {
                            continue;
                        }
                        let fd = (sample(&v, p) - sample(&v, m)) / (2.0 * h);
                        let scale = fd.abs().max(1.0);
                        assert!((g[a] - fd).abs() / scale < 1e-4, "axis {a}: {} vs {fd}", g[a]);
                    }
                }
            }
        }
    }

    #[test]
    fn stats() {
        let dims = Dims::cube(4);
        let z = dvf_stats(&DisplacementField::zeros(dims), None).unwrap();
        assert_eq!((z.max_magnitude, z.mean_magnitude), (0.0, 0.0));
        let c = dvf_stats(&DisplacementField::constant(dims, [3.0, 4.0, 0.0]), None).unwrap();
        assert_eq!((c.max_magnitude, c.mean_magnitude), (5.0, 5.0));

        let r = random_dvf(dims, 3, 2.0);
        let roi = RoiBox::new([1, 0, 1], [3, 2, 2]).unwrap();
        let (mut max, mut sum, mut n) = (0.0f64, 0.0, 0);
        for z in 1..=2 {
            for y in 0..=2 {
                for x in 1..=3 {
                    let [a, b, c] = r.get(x, y, z).map(|v| v as f64);
                    let m = (a * a + b * b + c * c).sqrt();
                    max = max.max(m);
                    sum += m;
                    n += 1;
                }
            }
        }
        let s = dvf_stats(&r, Some(&roi)).unwrap();
        assert!((s.max_magnitude - max).abs() < 1e-6);
        assert!((s.mean_magnitude - sum / n as f64).abs() < 1e-6);
    }

    #[test]
    fn roi_parsing_and_bounds() {
        let r: RoiBox = "1,2,3,4,5,6".parse().unwrap();
        assert_eq!(r.voxel_count(), 64);
        assert!("1,2,3".parse::<RoiBox>().is_err());
        assert!("4,2,3,1,5,6".parse::<RoiBox>().is_err());
        let err = r.validate(Dims::cube(6)).unwrap_err();
        assert!(err.to_string().contains("roi.max.z"), "{err}");
        assert!(r.validate(Dims::cube(7)).is_ok());
    }

    #[test]
    fn dvf_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dvf = random_dvf(Dims::new(4, 5, 6), 7, 3.0);
        let p = dir.path().join("dvf.mhd");
        dvf.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("ElementNumberOfChannels = 3"));
        assert_eq!(DisplacementField::load(&p).unwrap(), dvf);
    }
}

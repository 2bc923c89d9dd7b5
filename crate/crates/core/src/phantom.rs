//! Synthetic fixed/moving pairs with a known deformation and
//! uncorrelated streak artifacts.
//!
//! The anatomy is a soft-edged body ellipsoid holding two low-density lung
//! ellipsoids and a small dense lesion. The moving image is the anatomy
//! warped by a sum of Gaussian displacement bumps; each image then gets its
//! own streak pattern (independent seeds) and Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{magnitude, warp, DisplacementField, RoiBox};
use crate::volume::{Dims, Volume3};

pub const BACKGROUND_HU: f64 = -1000.0;

/// Half-width of the review box drawn around the lesion of the default phantom.
pub const LESION_ROI_MARGIN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub intensity: f64,
}

/// `d(x) = amplitude * exp(-|x - center|^2 / (2 sigma^2))`, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 3],
    pub sigma: f64,
    pub amplitude: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub streak_count: usize,
    /// Peak streak intensity in HU; each streak gets a random sign.
    pub amplitude: f64,
    pub seed_fixed: u64,
    pub seed_moving: u64,
    /// Gaussian cross-profile standard deviation, voxels.
    #[serde(default = "default_streak_width")]
    pub width: f64,
    /// Largest number of axial slices a single streak spans.
    #[serde(default = "default_streak_slab")]
    pub max_slab: usize,
}

fn default_streak_width() -> f64 {
    1.0
}

fn default_streak_slab() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub body: Ellipsoid,
    pub lungs: Vec<Ellipsoid>,
    pub lesion: Sphere,
    pub gt_deformation: Vec<Bump>,
    pub artifact: ArtifactSpec,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    /// The 64³ acceptance phantom.
    fn default() -> Self {
        let lesion_center = [43.0, 30.0, 32.0];
        PhantomSpec {
            dims: Dims::cube(64),
            body: Ellipsoid {
                center: [31.5, 31.5, 31.5],
                radii: [29.0, 23.0, 29.0],
                intensity: 0.0,
            },
            lungs: vec![
                Ellipsoid {
                    center: [20.0, 30.0, 31.5],
                    radii: [9.0, 13.0, 21.0],
                    intensity: -800.0,
                },
                Ellipsoid {
                    center: [43.0, 30.0, 31.5],
                    radii: [9.0, 13.0, 21.0],
                    intensity: -800.0,
                },
            ],
            lesion: Sphere {
                center: lesion_center,
                radius: 4.0,
                intensity: 100.0,
            },
            gt_deformation: vec![Bump {
                center: lesion_center,
                sigma: 6.0,
                amplitude: [2.4, 3.2, 0.0],
            }],
            artifact: ArtifactSpec {
                streak_count: 40,
                amplitude: 300.0,
                seed_fixed: 11,
                seed_moving: 29,
                width: default_streak_width(),
                max_slab: default_streak_slab(),
            },
            noise_sigma: 20.0,
            rng_seed: 7,
        }
    }
}

impl PhantomSpec {
    /// Spec with no deformation, artifacts or noise.
    pub fn clean(&self) -> Self {
        PhantomSpec {
            gt_deformation: Vec::new(),
            artifact: ArtifactSpec {
                streak_count: 0,
                ..self.artifact
            },
            noise_sigma: 0.0,
            ..self.clone()
        }
    }

    /// Box of half-width `margin` around the lesion, cropped to the grid.
    pub fn lesion_roi(&self, margin: usize) -> RoiBox {
        let c = self.lesion.center.map(|v| v.round().max(0.0) as usize);
        let d = self.dims.as_array();
        let c = std::array::from_fn(|a| c[a].min(d[a] - 1));
        RoiBox::around(c, margin, self.dims)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::argument(field, format!("{v} must be positive")))
            }
        };
        let finite = |field: &str, vals: &[f64]| {
            if vals.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::argument(field, "values must be finite"))
            }
        };
        for (name, e) in std::iter::once(("body", &self.body)).chain(self.lungs.iter().map(|l| ("lungs", l))) {
            for r in e.radii {
                positive(&format!("{name}.radii"), r)?;
            }
            finite(&format!("{name}.center"), &e.center)?;
            finite(&format!("{name}.intensity"), &[e.intensity])?;
        }
        positive("lesion.radius", self.lesion.radius)?;
        finite("lesion.center", &self.lesion.center)?;
        finite("lesion.intensity", &[self.lesion.intensity])?;
        for b in &self.gt_deformation {
            positive("gt_deformation.sigma", b.sigma)?;
            finite("gt_deformation.amplitude", &b.amplitude)?;
            finite("gt_deformation.center", &b.center)?;
        }
        finite("artifact.amplitude", &[self.artifact.amplitude])?;
        positive("artifact.width", self.artifact.width)?;
        if self.artifact.max_slab == 0 {
            return Err(Error::argument("artifact.max_slab", "must be at least 1"));
        }
        if self.artifact.streak_count > 0 && self.artifact.seed_fixed == self.artifact.seed_moving {
            return Err(Error::argument(
                "artifact.seed_moving",
                "must differ from seed_fixed so the two streak patterns are uncorrelated",
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::argument("noise_sigma", "must be >= 0"));
        }
        let limit = self.dims.as_array().into_iter().min().unwrap_or(0) as f64 / 4.0;
        let bound: f64 = self
            .gt_deformation
            .iter()
            .map(|b| b.amplitude.iter().map(|a| a * a).sum::<f64>().sqrt())
            .sum();
        if bound >= limit {
            return Err(Error::argument(
                "gt_deformation.amplitude",
                format!("summed bump magnitude {bound} must stay below {limit} voxels"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub fixed: Volume3,
    pub moving: Volume3,
    pub gt_dvf: DisplacementField,
    /// Artifact-free anatomy underlying `fixed`.
    pub base: Volume3,
    /// `warp(base, gt_dvf)`, the artifact-free anatomy underlying `moving`.
    pub moving_base: Volume3,
}

fn smoothstep_inside(dist: f64) -> f64 {
    // 1 inside, 0 outside, cubic ramp across one voxel centred on the surface
    let t = (0.5 - dist).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn ellipsoid_distance(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    let u: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]) / radii[a]);
    let q = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if q == 0.0 {
        return -radii.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    // first-order distance: (q - 1) / |grad q|
    let g: [f64; 3] = std::array::from_fn(|a| u[a] / (radii[a] * q));
    (q - 1.0) / (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

/// Artifact-free anatomy.
pub fn render_anatomy(spec: &PhantomSpec) -> Result<Volume3> {
    let shapes: Vec<(Ellipsoid, bool)> = std::iter::once((spec.body, false))
        .chain(spec.lungs.iter().map(|l| (*l, false)))
        .chain(std::iter::once((
            Ellipsoid {
                center: spec.lesion.center,
                radii: [spec.lesion.radius; 3],
                intensity: spec.lesion.intensity,
            },
            true,
        )))
        .collect();
    Volume3::from_fn(spec.dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let mut v = BACKGROUND_HU;
        for (e, _) in &shapes {
            let w = smoothstep_inside(ellipsoid_distance(p, e.center, e.radii));
            v += w * (e.intensity - v);
        }
        v as f32
    })
}

pub fn deformation_field(spec: &PhantomSpec) -> Result<DisplacementField> {
    DisplacementField::from_fn(spec.dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let mut d = [0.0f64; 3];
        for b in &spec.gt_deformation {
            let r2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
            let w = (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            for a in 0..3 {
                d[a] += w * b.amplitude[a];
            }
        }
        d.map(|v| v as f32)
    })
}

#[derive(Debug, Clone, Copy)]
struct Streak {
    origin: [f64; 2],
    direction: [f64; 2],
    amplitude: f64,
    z_range: (usize, usize),
}

fn draw_streaks(spec: &PhantomSpec, seed: u64) -> Vec<Streak> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = &spec.artifact;
    let nz = spec.dims.nz;
    (0..a.streak_count)
        .map(|_| {
            // sources scattered over the central half of the body cross-section
            let ox = spec.body.center[0] + rng.random_range(-0.5..0.5) * spec.body.radii[0];
            let oy = spec.body.center[1] + rng.random_range(-0.5..0.5) * spec.body.radii[1];
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let slab = rng.random_range(1..=a.max_slab.min(nz));
            let z0 = rng.random_range(0..=nz - slab);
            Streak {
                origin: [ox, oy],
                direction: [theta.cos(), theta.sin()],
                amplitude: sign * a.amplitude,
                z_range: (z0, z0 + slab - 1),
            }
        })
        .collect()
}

/// Additive streak pattern for one image.
pub fn render_streaks(spec: &PhantomSpec, seed: u64) -> Vec<f64> {
    let dims = spec.dims;
    let streaks = draw_streaks(spec, seed);
    let inv = 1.0 / (2.0 * spec.artifact.width * spec.artifact.width);
    let mut out = vec![0.0f64; dims.len()];
    for s in &streaks {
        for z in s.z_range.0..=s.z_range.1 {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let (dx, dy) = (x as f64 - s.origin[0], y as f64 - s.origin[1]);
                    let perp = dx * s.direction[1] - dy * s.direction[0];
                    out[dims.index(x, y, z)] += s.amplitude * (-perp * perp * inv).exp();
                }
            }
        }
    }
    out
}

fn add_noise(values: &mut [f64], sigma: f64, seed: u64, stream: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for v in values {
        *v += normal.sample(&mut rng);
    }
}

fn corrupt(clean: &Volume3, spec: &PhantomSpec, streak_seed: u64, stream: u64) -> Result<Volume3> {
    if spec.artifact.streak_count == 0 && spec.noise_sigma == 0.0 {
        return Ok(clean.clone());
    }
    let mut values: Vec<f64> = clean.data().iter().map(|&v| v as f64).collect();
    if spec.artifact.streak_count > 0 {
        for (v, s) in values.iter_mut().zip(render_streaks(spec, streak_seed)) {
            *v += s;
        }
    }
    add_noise(&mut values, spec.noise_sigma, spec.rng_seed, stream);
    clean.with_data(values.into_iter().map(|v| v as f32).collect())
}

pub fn generate_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let base = render_anatomy(spec)?;
    let gt_dvf = deformation_field(spec)?;
    let moving_base = warp(&base, &gt_dvf)?;
    let fixed = corrupt(&base, spec, spec.artifact.seed_fixed, 1)?;
    let moving = corrupt(&moving_base, spec, spec.artifact.seed_moving, 2)?;
    Ok(PhantomPair {
        fixed,
        moving,
        gt_dvf,
        base,
        moving_base,
    })
}

/// Field that maps the fixed anatomy onto the moving one for `generate_pair`
/// output: solves `x + d(x) + gt(x + d(x)) = x` by fixed-point iteration,
/// so that `warp(moving_base, d)` approximates `base`.
pub fn registration_target(gt: &DisplacementField) -> DisplacementField {
    let dims = gt.dims();
    let gt_f64: Vec<[f64; 3]> = gt.data().iter().map(|v| v.map(|c| c as f64)).collect();
    let sample = |p: [f64; 3]| -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = trilinear_component(&gt_f64, dims, p, c);
        }
        out
    };
    DisplacementField::from_fn(dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let mut d = [0.0f64; 3];
        for _ in 0..50 {
            let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
            let g = sample(q);
            d = [-g[0], -g[1], -g[2]];
        }
        d.map(|v| v as f32)
    })
    .expect("finite fixed point")
}

fn trilinear_component(data: &[[f64; 3]], dims: Dims, p: [f64; 3], c: usize) -> f64 {
    let n = dims.as_array();
    let mut idx = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let q = p[a].clamp(0.0, (n[a] - 1) as f64);
        idx[a] = (q.floor() as usize).min(n[a] - 2);
        frac[a] = q - idx[a] as f64;
    }
    let mut acc = 0.0;
    for k in 0..8 {
        let o = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
        let w: f64 = (0..3).map(|a| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] }).product();
        acc += w * data[dims.index(idx[0] + o[0], idx[1] + o[1], idx[2] + o[2])][c];
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvfError {
    pub mean: f64,
    pub max: f64,
}

/// Euclidean endpoint error between two fields over an optional box.
pub fn dvf_error(dvf: &DisplacementField, gt: &DisplacementField, roi: Option<&RoiBox>) -> Result<DvfError> {
    dvf.dims().ensure_same(&gt.dims())?;
    let roi = match roi {
        Some(r) => {
            r.validate(dvf.dims())?;
            *r
        }
        None => RoiBox::full(dvf.dims()),
    };
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    for i in roi.indices(dvf.dims()) {
        let (a, b) = (dvf.data()[i], gt.data()[i]);
        let e = magnitude([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
        sum += e;
        max = max.max(e);
    }
    Ok(DvfError {
        mean: sum / roi.voxel_count() as f64,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        let mut s = PhantomSpec::default();
        s.dims = Dims::cube(24);
        s.body = Ellipsoid {
            center: [11.5, 11.5, 11.5],
            radii: [10.0, 8.0, 10.0],
            intensity: 0.0,
        };
        s.lungs = vec![Ellipsoid {
            center: [11.5, 11.5, 11.5],
            radii: [5.0, 5.0, 7.0],
            intensity: -800.0,
        }];
        s.lesion = Sphere {
            center: [12.0, 12.0, 12.0],
            radius: 2.0,
            intensity: 100.0,
        };
        s.gt_deformation = vec![Bump {
            center: [12.0, 12.0, 12.0],
            sigma: 3.0,
            amplitude: [1.2, 1.6, 0.0],
        }];
        s.artifact.streak_count = 10;
        s
    }

    #[test]
    fn clean_spec_gives_identical_images() {
        let p = generate_pair(&small().clean()).unwrap();
        assert_eq!(p.fixed.data(), p.moving.data());
        assert_eq!(p.fixed.data(), p.base.data());
    }

    #[test]
    fn moving_base_is_warped_anatomy() {
        let mut s = small();
        s.artifact.streak_count = 0;
        s.noise_sigma = 0.0;
        let p = generate_pair(&s).unwrap();
        assert_eq!(warp(&p.base, &p.gt_dvf).unwrap().data(), p.moving.data());
        assert_eq!(p.moving_base.data(), p.moving.data());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_pair(&small()).unwrap();
        let b = generate_pair(&small()).unwrap();
        assert_eq!(a.fixed.data(), b.fixed.data());
        assert_eq!(a.moving.data(), b.moving.data());
        assert_eq!(a.gt_dvf.data(), b.gt_dvf.data());
    }

    #[test]
    fn intensities_match_spec_inside_shapes() {
        let p = generate_pair(&small().clean()).unwrap();
        assert_eq!(p.base.get(12, 12, 12), 100.0);
        assert_eq!(p.base.get(0, 0, 0), -1000.0);
        assert_eq!(p.base.get(12, 12, 16), -800.0);
        assert_eq!(p.base.get(12, 5, 12), 0.0);
    }

    #[test]
    fn gt_peak_equals_bump_amplitude() {
        let p = generate_pair(&small()).unwrap();
        let d = p.gt_dvf.get(12, 12, 12);
        assert!((d[0] - 1.2).abs() < 1e-6 && (d[1] - 1.6).abs() < 1e-6 && d[2] == 0.0);
    }

    #[test]
    fn artifacts_are_uncorrelated() {
        let p = generate_pair(&PhantomSpec::default()).unwrap();
        let fa: Vec<f64> = p.fixed.data().iter().zip(p.base.data()).map(|(a, b)| (a - b) as f64).collect();
        let ma: Vec<f64> = p.moving.data().iter().zip(p.moving_base.data()).map(|(a, b)| (a - b) as f64).collect();
        // voxels touched by a streak in either image
        let idx: Vec<usize> = (0..fa.len()).filter(|&i| fa[i].abs() > 60.0 || ma[i].abs() > 60.0).collect();
        assert!(idx.len() > 1000);
        let mean = |v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
        let (mf, mm) = (mean(&fa), mean(&ma));
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let (x, y) = (fa[i] - mf, ma[i] - mm);
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!(r.abs() < 0.1, "correlation {r}");
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let field_of = |s: PhantomSpec| match s.validate() {
            Err(Error::Argument { field, .. }) => field,
            other => panic!("expected argument error, got {other:?}"),
        };
        let mut s = small();
        s.lesion.radius = 0.0;
        assert_eq!(field_of(s), "lesion.radius");
        let mut s = small();
        s.body.radii[1] = -1.0;
        assert_eq!(field_of(s), "body.radii");
        let mut s = small();
        s.artifact.seed_moving = s.artifact.seed_fixed;
        assert_eq!(field_of(s), "artifact.seed_moving");
        let mut s = small();
        s.gt_deformation[0].amplitude = [6.0, 0.0, 0.0];
        assert_eq!(field_of(s), "gt_deformation.amplitude");
        let mut s = small();
        s.gt_deformation[0].amplitude[2] = f64::NAN;
        assert_eq!(field_of(s), "gt_deformation.amplitude");
    }

    #[test]
    fn dvf_error_cases() {
        let dims = Dims::new(5, 4, 3);
        let gt = DisplacementField::from_fn(dims, |x, y, z| [x as f32 * 0.1, -(y as f32), z as f32]).unwrap();
        assert_eq!(dvf_error(&gt, &gt, None).unwrap(), DvfError { mean: 0.0, max: 0.0 });
        let shifted = DisplacementField::from_fn(dims, |x, y, z| {
            let g = gt.get(x, y, z);
            [g[0] + 1.0, g[1], g[2]]
        })
        .unwrap();
        let e = dvf_error(&shifted, &gt, None).unwrap();
        assert!((e.mean - 1.0).abs() < 1e-6 && (e.max - 1.0).abs() < 1e-6);
        assert!(dvf_error(&gt, &DisplacementField::zeros(Dims::cube(3)), None).is_err());
    }

    #[test]
    fn registration_target_inverts_gt() {
        let s = small();
        let p = generate_pair(&s.clone()).unwrap();
        let t = registration_target(&p.gt_dvf);
        // x + t(x) + gt(x + t(x)) == x
        let x = [12usize, 12, 12];
        let d = t.get(x[0], x[1], x[2]);
        let q = [x[0] as f64 + d[0] as f64, x[1] as f64 + d[1] as f64, x[2] as f64 + d[2] as f64];
        let flat: Vec<[f64; 3]> = p.gt_dvf.data().iter().map(|v| v.map(|c| c as f64)).collect();
        for c in 0..3 {
            let g = trilinear_component(&flat, s.dims, q, c);
            assert!((d[c] as f64 + g).abs() < 1e-4);
        }
    }
}

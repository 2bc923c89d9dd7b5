//! Intensity dissimilarity, smoothness regularization and their analytic
//! gradients with respect to the displacement field, plus per-region loss
//! and gradient decomposition.
//!
//! The data term is the mean squared difference between the fixed image and
//! the warped moving image, optionally after the `(x + 1000) / 2000`
//! intensity mapping. Because `warped(x)` depends only on `d(x)`, the data
//! gradient at `x` vanishes whenever `x` is outside the evaluated mask.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{sample_with_gradient, DisplacementField, RoiBox};
use crate::volume::{normalize_value, Dims, Volume3, NORMALIZE_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the diffusion regularizer.
    pub reg_weight: f64,
    /// Apply the HU normalization before comparing intensities.
    pub normalize_inputs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Mse,
            reg_weight: 0.01,
            normalize_inputs: true,
        }
    }
}

impl LossConfig {
    pub fn unregularized() -> Self {
        LossConfig {
            reg_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg_weight.is_finite() && self.reg_weight >= 0.0) {
            return Err(Error::argument("reg_weight", format!("{} must be a finite value >= 0", self.reg_weight)));
        }
        Ok(())
    }

    #[inline]
    fn intensity(&self, hu: f64) -> f64 {
        if self.normalize_inputs {
            normalize_value(hu)
        } else {
            hu
        }
    }

    #[inline]
    fn slope(&self) -> f64 {
        if self.normalize_inputs {
            NORMALIZE_SLOPE
        } else {
            1.0
        }
    }
}

/// A displacement-shaped field of f64 partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    dims: Dims,
    data: Vec<[f64; 3]>,
}

impl GradientField {
    pub fn zeros(dims: Dims) -> Self {
        GradientField {
            dims,
            data: vec![[0.0; 3]; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn as_flat(&self) -> &[f64] {
        self.data.as_flattened()
    }

    pub(crate) fn as_flat_mut(&mut self) -> &mut [f64] {
        self.data.as_flattened_mut()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn norm_squared(&self) -> f64 {
        self.as_flat().iter().map(|g| g * g).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    fn add_scaled(&mut self, other: &GradientField, scale: f64) {
        self.as_flat_mut()
            .par_iter_mut()
            .zip(other.as_flat().par_iter())
            .for_each(|(a, b)| *a += scale * b);
    }

    pub(crate) fn clear_index(&mut self, i: usize) {
        self.data[i] = [0.0; 3];
    }

    /// Zero every vector inside `roi`.
    pub(crate) fn clear_box(&mut self, roi: &RoiBox) {
        for i in roi.indices(self.dims) {
            self.data[i] = [0.0; 3];
        }
    }
}

/// Loss value and its gradient at one displacement field.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Mean squared intensity difference over the evaluated voxels.
    pub data_loss: f64,
    /// Diffusion energy of the field (unweighted); not computed, and zero, when `reg_weight` is zero.
    pub smoothness: f64,
    /// `data_loss + reg_weight * smoothness`.
    pub total: f64,
    pub grad: GradientField,
}

fn mask_box(dims: Dims, mask: Option<&RoiBox>) -> Result<RoiBox> {
    match mask {
        Some(m) => {
            m.validate(dims)?;
            if m.voxel_count() == 0 {
                return Err(Error::EmptyMask);
            }
            Ok(*m)
        }
        None => Ok(RoiBox::full(dims)),
    }
}

/// Mean squared difference between `fixed` and an already-warped image.
pub fn image_loss(fixed: &Volume3, warped: &Volume3, cfg: &LossConfig, mask: Option<&RoiBox>) -> Result<f64> {
    fixed.dims().ensure_same(&warped.dims())?;
    let dims = fixed.dims();
    let roi = mask_box(dims, mask)?;
    let (f, w) = (fixed.data(), warped.data());
    let partial: Vec<f64> = (roi.min[2]..=roi.max[2])
        .into_par_iter()
        .map(|z| {
            let mut s = 0.0;
            for y in roi.min[1]..=roi.max[1] {
                let row = dims.index(0, y, z);
                for i in row + roi.min[0]..=row + roi.max[0] {
                    let r = cfg.intensity(f[i] as f64) - cfg.intensity(w[i] as f64);
                    s += r * r;
                }
            }
            s
        })
        .collect();
    Ok(partial.iter().sum::<f64>() / roi.voxel_count() as f64)
}

/// Loss and analytic gradient of `image_loss(fixed, warp(moving, dvf))` plus
/// the weighted smoothness term. Samples are kept in f64 throughout.
pub fn evaluate(
    fixed: &Volume3,
    moving: &Volume3,
    dvf: &DisplacementField,
    cfg: &LossConfig,
    mask: Option<&RoiBox>,
) -> Result<Evaluation> {
    cfg.validate()?;
    fixed.dims().ensure_same(&moving.dims())?;
    fixed.dims().ensure_same(&dvf.dims())?;
    let dims = fixed.dims();
    let roi = mask_box(dims, mask)?;
    let scale = 2.0 / roi.voxel_count() as f64;
    let slope = cfg.slope();

    let mut grad = GradientField::zeros(dims);
    let plane = dims.plane();
    let (fdata, d) = (fixed.data(), dvf.data());
    let partial: Vec<f64> = grad
        .data
        .par_chunks_mut(plane)
        .enumerate()
        .map(|(z, g)| {
            if z < roi.min[2] || z > roi.max[2] {
                return 0.0;
            }
            let mut ssd = 0.0;
            for y in roi.min[1]..=roi.max[1] {
                for x in roi.min[0]..=roi.max[0] {
                    let i = dims.index(x, y, z);
                    let v = d[i];
                    let p = [x as f64 + v[0] as f64, y as f64 + v[1] as f64, z as f64 + v[2] as f64];
                    let (w, dw) = sample_with_gradient(moving, p);
                    let r = cfg.intensity(fdata[i] as f64) - cfg.intensity(w);
                    ssd += r * r;
                    let k = -scale * r * slope;
                    g[x + dims.nx * y] = [k * dw[0], k * dw[1], k * dw[2]];
                }
            }
            ssd
        })
        .collect();
    let data_loss = partial.iter().sum::<f64>() / roi.voxel_count() as f64;

    let (smooth, total) = if cfg.reg_weight > 0.0 {
        let e = smoothness(dvf);
        grad.add_scaled(&smoothness_grad(dvf), cfg.reg_weight);
        (e, data_loss + cfg.reg_weight * e)
    } else {
        (0.0, data_loss)
    };
    Ok(Evaluation {
        data_loss,
        smoothness: smooth,
        total,
        grad,
    })
}

/// Gradient of the regularized loss with respect to every displacement component.
pub fn loss_grad_dvf(
    fixed: &Volume3,
    moving: &Volume3,
    dvf: &DisplacementField,
    cfg: &LossConfig,
    mask: Option<&RoiBox>,
) -> Result<GradientField> {
    Ok(evaluate(fixed, moving, dvf, cfg, mask)?.grad)
}

/// Diffusion energy: squared forward differences of every component along
/// every axis, summed and divided by `3 * voxels`. Differences that would
/// leave the grid are omitted.
pub fn smoothness(dvf: &DisplacementField) -> f64 {
    let dims = dvf.dims();
    let d = dvf.data();
    let strides = [1, dims.nx, dims.plane()];
    let partial: Vec<f64> = (0..dims.nz)
        .into_par_iter()
        .map(|z| {
            let mut s = 0.0;
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = dims.index(x, y, z);
                    let p = [x, y, z];
                    for a in 0..3 {
                        if p[a] + 1 < dims.as_array()[a] {
                            let (u, v) = (d[i], d[i + strides[a]]);
                            for c in 0..3 {
                                let diff = v[c] as f64 - u[c] as f64;
                                s += diff * diff;
                            }
                        }
                    }
                }
            }
            s
        })
        .collect();
    partial.iter().sum::<f64>() / (3 * dims.len()) as f64
}

pub fn smoothness_grad(dvf: &DisplacementField) -> GradientField {
    let dims = dvf.dims();
    let d = dvf.data();
    let ext = dims.as_array();
    let strides = [1, dims.nx, dims.plane()];
    let k = 2.0 / (3 * dims.len()) as f64;
    let mut grad = GradientField::zeros(dims);
    grad.data.par_iter_mut().enumerate().for_each(|(i, g)| {
        let p = dims.coords(i);
        let u = d[i].map(|c| c as f64);
        let mut acc = [0.0; 3];
        for a in 0..3 {
            if p[a] > 0 {
                let prev = d[i - strides[a]];
                for c in 0..3 {
                    acc[c] += u[c] - prev[c] as f64;
                }
            }
            if p[a] + 1 < ext[a] {
                let next = d[i + strides[a]];
                for c in 0..3 {
                    acc[c] -= next[c] as f64 - u[c];
                }
            }
        }
        *g = acc.map(|v| k * v);
    });
    grad
}

/// Disjoint, covering voxel regions, stored as one label per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    dims: Dims,
    labels: Vec<u32>,
    count: usize,
    bounds: Vec<Option<RoiBox>>,
}

impl RegionPartition {
    pub fn whole(dims: Dims) -> Self {
        RegionPartition {
            dims,
            labels: vec![0; dims.len()],
            count: 1,
            bounds: vec![Some(RoiBox::full(dims))],
        }
    }

    pub fn from_boxes(dims: Dims, boxes: &[RoiBox]) -> Result<Self> {
        let mut labels = vec![u32::MAX; dims.len()];
        for (k, b) in boxes.iter().enumerate() {
            b.validate(dims).map_err(|e| Error::Partition(format!("region {k}: {e}")))?;
            for i in b.indices(dims) {
                if labels[i] != u32::MAX {
                    let [x, y, z] = dims.coords(i);
                    return Err(Error::Partition(format!(
                        "regions {} and {k} overlap at ({x}, {y}, {z})",
                        labels[i]
                    )));
                }
                labels[i] = k as u32;
            }
        }
        Self::finish(dims, labels, boxes.len(), boxes.iter().map(|b| Some(*b)).collect())
    }

    pub fn from_masks(dims: Dims, masks: &[Vec<bool>]) -> Result<Self> {
        let mut labels = vec![u32::MAX; dims.len()];
        for (k, m) in masks.iter().enumerate() {
            if m.len() != dims.len() {
                return Err(Error::Partition(format!("mask {k} has {} entries, expected {}", m.len(), dims.len())));
            }
            for (i, _) in m.iter().enumerate().filter(|(_, &on)| on) {
                if labels[i] != u32::MAX {
                    let [x, y, z] = dims.coords(i);
                    return Err(Error::Partition(format!(
                        "regions {} and {k} overlap at ({x}, {y}, {z})",
                        labels[i]
                    )));
                }
                labels[i] = k as u32;
            }
        }
        Self::finish(dims, labels, masks.len(), vec![None; masks.len()])
    }

    /// Tile the grid with boxes of at most `block` voxels per side.
    pub fn blocks(dims: Dims, block: [usize; 3]) -> Result<Self> {
        if let Some(a) = block.iter().position(|&b| b == 0) {
            return Err(Error::argument(
                format!("blocks.{}", ["x", "y", "z"][a]),
                "block size must be at least 1",
            ));
        }
        let d = dims.as_array();
        let mut boxes = Vec::new();
        for z0 in (0..d[2]).step_by(block[2]) {
            for y0 in (0..d[1]).step_by(block[1]) {
                for x0 in (0..d[0]).step_by(block[0]) {
                    let min = [x0, y0, z0];
                    let max = std::array::from_fn(|a| (min[a] + block[a]).min(d[a]) - 1);
                    boxes.push(RoiBox { min, max });
                }
            }
        }
        Self::from_boxes(dims, &boxes)
    }

    fn finish(dims: Dims, labels: Vec<u32>, count: usize, bounds: Vec<Option<RoiBox>>) -> Result<Self> {
        if let Some(i) = labels.iter().position(|&l| l == u32::MAX) {
            let [x, y, z] = dims.coords(i);
            return Err(Error::Partition(format!("voxel ({x}, {y}, {z}) is not covered by any region")));
        }
        Ok(RegionPartition {
            dims,
            labels,
            count,
            bounds,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx] as usize
    }

    pub fn bounds(&self, k: usize) -> Option<RoiBox> {
        self.bounds.get(k).copied().flatten()
    }

    /// Index of the region containing voxel `(x, y, z)`.
    pub fn region_of(&self, x: usize, y: usize, z: usize) -> usize {
        self.label(self.dims.index(x, y, z))
    }

    fn counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; self.count];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionLoss {
    pub id: usize,
    pub voxels: usize,
    pub ssd: f64,
    pub mse: f64,
}

/// Per-region SSD and MSE. The SSDs sum to the full-image SSD.
pub fn region_decompose(
    fixed: &Volume3,
    warped: &Volume3,
    partition: &RegionPartition,
    cfg: &LossConfig,
) -> Result<Vec<RegionLoss>> {
    fixed.dims().ensure_same(&warped.dims())?;
    fixed.dims().ensure_same(&partition.dims)?;
    let plane = fixed.dims().plane();
    let k = partition.count;
    let (f, w) = (fixed.data(), warped.data());
    let per_plane: Vec<Vec<f64>> = (0..fixed.dims().nz)
        .into_par_iter()
        .map(|z| {
            let mut s = vec![0.0; k];
            for i in z * plane..(z + 1) * plane {
                let r = cfg.intensity(f[i] as f64) - cfg.intensity(w[i] as f64);
                s[partition.labels[i] as usize] += r * r;
            }
            s
        })
        .collect();
    let counts = partition.counts();
    Ok((0..k)
        .map(|id| {
            let ssd: f64 = per_plane.iter().map(|s| s[id]).sum();
            RegionLoss {
                id,
                voxels: counts[id],
                ssd,
                mse: if counts[id] > 0 { ssd / counts[id] as f64 } else { 0.0 },
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionShare {
    pub id: usize,
    pub voxels: usize,
    pub loss_ssd: f64,
    pub loss_mse: f64,
    pub grad_norm: f64,
    pub grad_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<RoiBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientShareReport {
    pub regions: Vec<RegionShare>,
    /// Full-image MSE.
    pub total_loss: f64,
    pub total_grad_norm: f64,
    pub zero_total_gradient: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u64>,
}

impl GradientShareReport {
    pub fn region(&self, id: usize) -> Option<&RegionShare> {
        self.regions.get(id)
    }
}

/// How much of the full-image gradient each region contributes.
///
/// Requires `reg_weight == 0`: the smoothness term couples neighbouring
/// voxels, so region gradients would no longer have disjoint supports.
pub fn gradient_share(
    fixed: &Volume3,
    moving: &Volume3,
    dvf: &DisplacementField,
    partition: &RegionPartition,
    cfg: &LossConfig,
) -> Result<GradientShareReport> {
    if cfg.reg_weight != 0.0 {
        return Err(Error::Unsupported(format!(
            "gradient_share needs reg_weight = 0 (got {}); the regularizer couples regions",
            cfg.reg_weight
        )));
    }
    fixed.dims().ensure_same(&partition.dims)?;
    let eval = evaluate(fixed, moving, dvf, cfg, None)?;
    let warped = crate::transform::warp(moving, dvf)?;
    let losses = region_decompose(fixed, &warped, partition, cfg)?;

    let mut sq = vec![0.0f64; partition.count];
    for (i, g) in eval.grad.data().iter().enumerate() {
        sq[partition.labels[i] as usize] += g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
    }
    let norms: Vec<f64> = sq.iter().map(|s| s.sqrt()).collect();
    let norm_sum: f64 = norms.iter().sum();
    let zero = norm_sum == 0.0;
    let regions = losses
        .iter()
        .zip(&norms)
        .map(|(l, &n)| RegionShare {
            id: l.id,
            voxels: l.voxels,
            loss_ssd: l.ssd,
            loss_mse: l.mse,
            grad_norm: n,
            grad_fraction: if zero { 0.0 } else { n / norm_sum },
            bounds: partition.bounds(l.id),
        })
        .collect();
    Ok(GradientShareReport {
        regions,
        total_loss: eval.data_loss,
        total_grad_norm: eval.grad.norm(),
        zero_total_gradient: zero,
        iteration: None,
    })
}

//! Starting displacement fields.
//!
//! `CoarseToFine` optimizes the full-image loss over a sequence of
//! control grids with node spacing `2^levels, ..., 4, 2` voxels. The dense
//! field is the trilinear interpolation of the grid; the grid gradient is
//! the adjoint of that interpolation applied to the dense gradient.

use serde::{Deserialize, Serialize};

use super::adam::{AdamState, OptimizerConfig};
use crate::error::{Error, Result};
use crate::loss::{evaluate, GradientField, LossConfig};
use crate::transform::DisplacementField;
use crate::volume::{Dims, Volume3};

/// Adam iterations spent on each control-grid level.
pub const ITERATIONS_PER_LEVEL: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Initializer {
    #[default]
    Identity,
    CoarseToFine { levels: u32 },
}

/// Per-axis interpolation table: fine index -> (lower node, weight of upper node).
/// Node `k` sits at `min(k * factor, n - 1)`, so the last cell may be shorter.
fn axis_table(n: usize, factor: usize) -> (usize, Vec<(usize, f64)>) {
    let nodes = (n - 1).div_ceil(factor) + 1;
    let pos = |k: usize| (k * factor).min(n - 1);
    let table = (0..n)
        .map(|i| {
            let k0 = (i / factor).min(nodes - 2);
            let (a, b) = (pos(k0), pos(k0 + 1));
            (k0, (i - a) as f64 / (b - a) as f64)
        })
        .collect();
    (nodes, table)
}

/// Control grid with node spacing `factor` over a fine grid.
#[derive(Debug, Clone)]
pub(crate) struct ControlGrid {
    fine: Dims,
    coarse: Dims,
    tables: [Vec<(usize, f64)>; 3],
    values: Vec<[f32; 3]>,
}

impl ControlGrid {
    /// Grid whose nodes sample `field` at the node positions.
    pub(crate) fn sampled_from(field: &DisplacementField, factor: usize) -> Self {
        let fine = field.dims();
        let (nx, tx) = axis_table(fine.nx, factor);
        let (ny, ty) = axis_table(fine.ny, factor);
        let (nz, tz) = axis_table(fine.nz, factor);
        let coarse = Dims::new(nx, ny, nz);
        let values = (0..coarse.len())
            .map(|i| {
                let [a, b, c] = coarse.coords(i);
                field.get(
                    (a * factor).min(fine.nx - 1),
                    (b * factor).min(fine.ny - 1),
                    (c * factor).min(fine.nz - 1),
                )
            })
            .collect();
        ControlGrid {
            fine,
            coarse,
            tables: [tx, ty, tz],
            values,
        }
    }

    fn weights(&self, i: usize) -> [(usize, f64); 8] {
        let [x, y, z] = self.fine.coords(i);
        let (x0, fx) = self.tables[0][x];
        let (y0, fy) = self.tables[1][y];
        let (z0, fz) = self.tables[2][z];
        let mut out = [(0usize, 0.0f64); 8];
        for (k, o) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let w = (if dx == 1 { fx } else { 1.0 - fx })
                * (if dy == 1 { fy } else { 1.0 - fy })
                * (if dz == 1 { fz } else { 1.0 - fz });
            *o = (self.coarse.index(x0 + dx, y0 + dy, z0 + dz), w);
        }
        out
    }

    pub(crate) fn upsample(&self) -> DisplacementField {
        let data = (0..self.fine.len())
            .map(|i| {
                let mut acc = [0.0f64; 3];
                for (node, w) in self.weights(i) {
                    let v = self.values[node];
                    for c in 0..3 {
                        acc[c] += w * v[c] as f64;
                    }
                }
                acc.map(|v| v as f32)
            })
            .collect();
        DisplacementField::new(self.fine, data).expect("interpolated finite values")
    }

    pub(crate) fn adjoint(&self, grad: &GradientField) -> Vec<f64> {
        let mut out = vec![0.0f64; 3 * self.coarse.len()];
        for (i, g) in grad.data().iter().enumerate() {
            for (node, w) in self.weights(i) {
                for c in 0..3 {
                    out[3 * node + c] += w * g[c];
                }
            }
        }
        out
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        self.values.as_flattened_mut()
    }

    pub(crate) fn len(&self) -> usize {
        3 * self.values.len()
    }
}

/// Produce the starting field for a session.
pub fn initial_field(
    fixed: &Volume3,
    moving: &Volume3,
    loss: &LossConfig,
    optimizer: &OptimizerConfig,
    init: Initializer,
) -> Result<DisplacementField> {
    fixed.dims().ensure_same(&moving.dims())?;
    let mut field = DisplacementField::zeros(fixed.dims());
    let levels = match init {
        Initializer::Identity => return Ok(field),
        Initializer::CoarseToFine { levels } => levels,
    };
    if !(1..=8).contains(&levels) {
        return Err(Error::argument("init.levels", format!("{levels} is outside 1..=8")));
    }
    for level in (1..=levels).rev() {
        let factor = 1usize << level;
        let mut grid = ControlGrid::sampled_from(&field, factor);
        let mut adam = AdamState::new(grid.len());
        for _ in 0..ITERATIONS_PER_LEVEL {
            let dense = grid.upsample();
            let eval = evaluate(fixed, moving, &dense, loss, None)?;
            let g = grid.adjoint(&eval.grad);
            adam.step(grid.params_mut(), &g, optimizer)?;
        }
        field = grid.upsample();
    }
    Ok(field)
}

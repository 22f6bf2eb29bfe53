//! Hybrid patch proposals over the upsampled feature grid: a non-overlapping
//! uniform tiling plus concentric centered multi-scale rectangles, and the
//! bilinear pooling that maps every patch to a fixed-size feature tensor.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SydError};
use crate::tensor::tape::{CropRect, Tape, TensorId};
use crate::tensor::Scalar;

/// Axis-aligned rectangle on the upsampled grid, in grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub x: usize,
    pub y: usize,
    pub dw: usize,
    pub dh: usize,
}

impl PatchSpec {
    pub fn contains(&self, other: &PatchSpec) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.x + self.dw >= other.x + other.dw
            && self.y + self.dh >= other.y + other.dh
    }
}

/// The named patch-set configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchSetName {
    P9,
    P12,
    P16,
    P20,
    P25,
    P30,
    Custom,
}

impl fmt::Display for PatchSetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::P9 => "P9",
            Self::P12 => "P12",
            Self::P16 => "P16",
            Self::P20 => "P20",
            Self::P25 => "P25",
            Self::P30 => "P30",
            Self::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl FromStr for PatchSetName {
    type Err = SydError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P9" => Ok(Self::P9),
            "P12" => Ok(Self::P12),
            "P16" => Ok(Self::P16),
            "P20" => Ok(Self::P20),
            "P25" => Ok(Self::P25),
            "P30" => Ok(Self::P30),
            other => Err(SydError::Config(format!(
                "unknown patch set '{other}' (expected one of P9, P12, P16, P20, P25, P30)"
            ))),
        }
    }
}

/// A complete patch collection: uniform tiling first (row-major), then
/// hierarchical rectangles from smallest to largest.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub name: PatchSetName,
    pub grid_size: usize,
    pub uniform: Vec<PatchSpec>,
    pub hierarchical: Vec<PatchSpec>,
}

impl PatchSet {
    pub fn n(&self) -> usize {
        self.uniform.len() + self.hierarchical.len()
    }

    pub fn all(&self) -> impl Iterator<Item = &PatchSpec> {
        self.uniform.iter().chain(self.hierarchical.iter())
    }

    pub fn custom(grid_size: usize, uniform: Vec<PatchSpec>, hierarchical: Vec<PatchSpec>) -> Self {
        Self {
            name: PatchSetName::Custom,
            grid_size,
            uniform,
            hierarchical,
        }
    }

    /// Diagnostic table of every rectangle.
    pub fn describe(&self) -> String {
        let mut out = format!(
            "patch set {}: grid {}x{}, {} patches ({} uniform + {} hierarchical)\n",
            self.name,
            self.grid_size,
            self.grid_size,
            self.n(),
            self.uniform.len(),
            self.hierarchical.len()
        );
        for (i, p) in self.uniform.iter().enumerate() {
            out.push_str(&format!(
                "  u{i:02}  x={:<3} y={:<3} w={:<3} h={:<3}\n",
                p.x, p.y, p.dw, p.dh
            ));
        }
        for (i, p) in self.hierarchical.iter().enumerate() {
            out.push_str(&format!(
                "  h{i:02}  x={:<3} y={:<3} w={:<3} h={:<3}\n",
                p.x, p.y, p.dw, p.dh
            ));
        }
        out
    }
}

/// (grid/a)^2 disjoint a-by-a squares tiling the grid, row-major.
pub fn uniform_grid(grid: usize, a: usize) -> Result<Vec<PatchSpec>> {
    if a == 0 || grid % a != 0 {
        return Err(SydError::Geometry(format!(
            "uniform patch side {a} does not divide grid {grid}"
        )));
    }
    let per_side = grid / a;
    let mut patches = Vec::with_capacity(per_side * per_side);
    for row in 0..per_side {
        for col in 0..per_side {
            patches.push(PatchSpec {
                x: col * a,
                y: row * a,
                dw: a,
                dh: a,
            });
        }
    }
    Ok(patches)
}

/// `count` concentric centered squares with sides grid*t/count for t = 1..count,
/// smallest first; the largest spans the full grid.
pub fn hierarchical_patches(grid: usize, count: usize) -> Result<Vec<PatchSpec>> {
    if count == 0 || grid % count != 0 {
        return Err(SydError::Geometry(format!(
            "hierarchical count {count} does not divide grid {grid}"
        )));
    }
    let step = grid / count;
    Ok((1..=count)
        .map(|t| {
            let side = step * t;
            let offset = (grid - side) / 2;
            PatchSpec {
                x: offset,
                y: offset,
                dw: side,
                dh: side,
            }
        })
        .collect())
}

/// The published configurations: P9/P12/P16/P20 on a 48-grid, P25/P30 on a
/// 45-grid (45 keeps the 9-cell tiling aligned).
pub fn build_patch_set(name: PatchSetName) -> Result<PatchSet> {
    let (grid, a, hier) = match name {
        PatchSetName::P9 => (48, 16, 0),
        PatchSetName::P12 => (48, 16, 3),
        PatchSetName::P16 => (48, 12, 0),
        PatchSetName::P20 => (48, 12, 4),
        PatchSetName::P25 => (45, 9, 0),
        PatchSetName::P30 => (45, 9, 5),
        PatchSetName::Custom => {
            return Err(SydError::Config(
                "custom patch sets are built with PatchSet::custom".into(),
            ))
        }
    };
    let uniform = uniform_grid(grid, a)?;
    let hierarchical = if hier > 0 {
        hierarchical_patches(grid, hier)?
    } else {
        Vec::new()
    };
    Ok(PatchSet {
        name,
        grid_size: grid,
        uniform,
        hierarchical,
    })
}

/// Bilinear upsample of a [b,h,w,c] feature map to [b,grid,grid,c].
pub fn upsample_feature_map<T: Scalar>(
    tape: &mut Tape<T>,
    fmap: TensorId,
    grid: usize,
) -> Result<TensorId> {
    let shape = tape.shape(fmap).to_vec();
    if shape.len() != 4 {
        return Err(SydError::ShapeMismatch {
            op: "upsample_feature_map",
            lhs: shape,
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (h, w) = (shape[1], shape[2]);
    if grid < h || grid < w {
        return Err(SydError::Geometry(format!(
            "upsample target {grid} is smaller than the {h}x{w} feature map"
        )));
    }
    tape.bilinear_resize(fmap, CropRect { y: 0, x: 0, h, w }, grid, grid)
}

/// Crop one patch rectangle from the upsampled grid and bilinearly resize it
/// to (out_h, out_w).
pub fn pool_patch<T: Scalar>(
    tape: &mut Tape<T>,
    upsampled: TensorId,
    patch: &PatchSpec,
    out_h: usize,
    out_w: usize,
) -> Result<TensorId> {
    tape.bilinear_resize(
        upsampled,
        CropRect {
            y: patch.y,
            x: patch.x,
            h: patch.dh,
            w: patch.dw,
        },
        out_h,
        out_w,
    )
}

/// Upsample the feature map, pool every patch back to the backbone's (h, w),
/// and stack the results to [b, n, h, w, c]. Order: uniform row-major, then
/// hierarchical small to large.
pub fn extract_patch_features<T: Scalar>(
    tape: &mut Tape<T>,
    fmap: TensorId,
    set: &PatchSet,
) -> Result<TensorId> {
    let shape = tape.shape(fmap).to_vec();
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let up = upsample_feature_map(tape, fmap, set.grid_size)?;
    let mut parts = Vec::with_capacity(set.n());
    for patch in set.all() {
        let pooled = pool_patch(tape, up, patch, h, w)?;
        parts.push(tape.reshape(pooled, vec![b, 1, h, w, c])?);
    }
    tape.concat(&parts, 1)
}

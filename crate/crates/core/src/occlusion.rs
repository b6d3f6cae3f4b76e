//! Visibility from a depth map and occlusion masks on tri-grid cells.
//!
//! A voxel is visible when its centre projects inside the image and lies no
//! deeper (camera z) than the surface seen through the nearest pixel plus a
//! tolerance. Visible voxels mark the plane cells whose box contains them; the
//! occlusion mask is the complement.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::camera::{project, CameraIntrinsics, CameraPose};
use crate::config::ModelConfig;
use crate::error::{invalid, shape_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::trigrid::{TriDims, TriGrid};

/// Binary occupancy over `V³` voxel centres of `[-1, 1]³`, index `(ix·V + iy)·V + iz`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityVolume {
    res: usize,
    data: Vec<bool>,
}

impl VisibilityVolume {
    pub fn filled(res: usize, value: bool) -> Self {
        Self { res, data: vec![value; res * res * res] }
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.data[(ix * self.res + iy) * self.res + iz]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, v: bool) {
        let r = self.res;
        self.data[(ix * r + iy) * r + iz] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn voxel_centre(res: usize, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let c = |i: usize| -1.0 + (2 * i + 1) as f64 / res as f64;
        Vector3::new(c(ix), c(iy), c(iz))
    }
}

/// Per-plane binary cell map `[plane][slice][row][col]`, shared by all channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriGridMask {
    slices: usize,
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl TriGridMask {
    pub fn filled(slices: usize, height: usize, width: usize, value: bool) -> Self {
        Self { slices, height, width, data: vec![value; 3 * slices * height * width] }
    }

    pub fn for_dims(dims: TriDims, value: bool) -> Self {
        Self::filled(dims.slices, dims.height, dims.width, value)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.slices, self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn index(&self, plane: usize, slice: usize, row: usize, col: usize) -> usize {
        ((plane * self.slices + slice) * self.height + row) * self.width + col
    }

    pub fn get(&self, plane: usize, slice: usize, row: usize, col: usize) -> bool {
        self.data[self.index(plane, slice, row, col)]
    }

    pub fn set(&mut self, plane: usize, slice: usize, row: usize, col: usize, v: bool) {
        let i = self.index(plane, slice, row, col);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    fn matches(&self, dims: TriDims) -> bool {
        (self.slices, self.height, self.width) == (dims.slices, dims.height, dims.width)
    }

    /// 0/1 tensor `[1, 3·D·C, H, W]` broadcast over `channels`.
    pub fn expand(&self, channels: usize) -> Tensor {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len() * channels);
        for ps in 0..3 * self.slices {
            let cells = &self.data[ps * hw..(ps + 1) * hw];
            for _ in 0..channels {
                out.extend(cells.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            }
        }
        Tensor::from_vec(&[1, 3 * self.slices * channels, self.height, self.width], out).expect("mask layout")
    }
}

/// Camera-space depth of the surface seen through pixel `(col, row)` given its ray distance.
fn pixel_z(t: f64, col: usize, row: usize, intr: &CameraIntrinsics, res: usize) -> f64 {
    let r = res as f64;
    let x = (col as f64 + 0.5 - intr.cx * r) / (intr.fx * r);
    let y = (row as f64 + 0.5 - intr.cy * r) / (intr.fy * r);
    t / math::sqrt(x * x + y * y + 1.0)
}

fn check_depth(depth: &[f64], res: usize) -> Result<()> {
    if depth.len() != res * res {
        return Err(shape_err!("depth map has {} values, expected {}²", depth.len(), res));
    }
    if depth.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("depth map".into()));
    }
    Ok(())
}

/// Pixel hit by a world point, with the point's camera depth.
fn pixel_of(p: &Vector3<f64>, pose: &CameraPose, intr: &CameraIntrinsics, res: usize) -> Option<(usize, usize, f64)> {
    let (u, v, z) = project(p, pose, intr, res).ok()?;
    let r = res as f64;
    if !(u >= 0.0 && u < r && v >= 0.0 && v < r) {
        return None;
    }
    Some((u as usize, v as usize, z))
}

/// Visible voxels for a `res × res` depth map of ray distances.
/// `eps` is the depth tolerance in world units.
pub fn visibility_volume(
    depth: &[f64],
    depth_res: usize,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    v: usize,
    eps: f64,
) -> Result<VisibilityVolume> {
    check_depth(depth, depth_res)?;
    if v == 0 {
        return Err(invalid!("volume resolution must be positive"));
    }
    let mut vol = VisibilityVolume::filled(v, false);
    for ix in 0..v {
        for iy in 0..v {
            for iz in 0..v {
                let p = VisibilityVolume::voxel_centre(v, ix, iy, iz);
                if let Some((col, row, z)) = pixel_of(&p, pose, intr, depth_res) {
                    let surface = pixel_z(depth[row * depth_res + col], col, row, intr, depth_res);
                    if z <= surface + eps {
                        vol.set(ix, iy, iz, true);
                    }
                }
            }
        }
    }
    Ok(vol)
}

/// Tolerance in world units for `diagonals` voxel diagonals at resolution `v`.
pub fn voxel_diagonals(v: usize, diagonals: f64) -> f64 {
    diagonals * 2.0 / v as f64 * math::sqrt(3.0)
}

/// Reference visibility: marches from the camera toward every in-frustum voxel
/// centre and marks it occluded once `occupied` reports a hit before the voxel.
pub fn oracle_raycast<F>(occupied: F, pose: &CameraPose, intr: &CameraIntrinsics, image_res: usize, v: usize, step: f64) -> VisibilityVolume
where
    F: Fn(&Vector3<f64>) -> bool,
{
    let mut vol = VisibilityVolume::filled(v, false);
    let o = pose.translation;
    for ix in 0..v {
        for iy in 0..v {
            for iz in 0..v {
                let p = VisibilityVolume::voxel_centre(v, ix, iy, iz);
                if pixel_of(&p, pose, intr, image_res).is_none() {
                    continue;
                }
                let dist = (p - o).norm();
                let dir = (p - o) / dist;
                let mut t = 0.0;
                let mut blocked = false;
                while t < dist {
                    if occupied(&(o + dir * t)) {
                        blocked = true;
                        break;
                    }
                    t += step;
                }
                vol.set(ix, iy, iz, !blocked);
            }
        }
    }
    vol
}

fn cell(c: f64, n: usize) -> usize {
    (math::floor((c + 1.0) * 0.5 * n as f64).max(0.0) as usize).min(n - 1)
}

/// Projects visible voxels onto plane cells (any visible voxel inside the
/// cell's box marks it) and dilates each slice by `dilation` cells.
pub fn to_trigrid_mask(vol: &VisibilityVolume, slices: usize, height: usize, width: usize, dilation: usize) -> TriGridMask {
    let mut m = TriGridMask::filled(slices, height, width, false);
    let v = vol.res();
    for ix in 0..v {
        for iy in 0..v {
            for iz in 0..v {
                if !vol.get(ix, iy, iz) {
                    continue;
                }
                let p = VisibilityVolume::voxel_centre(v, ix, iy, iz);
                m.set(0, cell(p.z, slices), cell(p.y, height), cell(p.x, width), true);
                m.set(1, cell(p.y, slices), cell(p.z, height), cell(p.x, width), true);
                m.set(2, cell(p.x, slices), cell(p.y, height), cell(p.z, width), true);
            }
        }
    }
    if dilation == 0 {
        return m;
    }
    let mut out = m.clone();
    let r = dilation as isize;
    for plane in 0..3 {
        for s in 0..slices {
            for row in 0..height {
                for col in 0..width {
                    if !m.get(plane, s, row, col) {
                        continue;
                    }
                    for dr in -r..=r {
                        for dc in -r..=r {
                            let (rr, cc) = (row as isize + dr, col as isize + dc);
                            if rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width {
                                out.set(plane, s, rr as usize, cc as usize, true);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cellwise complement.
pub fn occlusion_of(mask: &TriGridMask) -> TriGridMask {
    TriGridMask { data: mask.data.iter().map(|b| !b).collect(), ..mask.clone() }
}

/// Zeroes every cell where the mask is unset.
pub fn apply_mask(grid: &TriGrid, mask: &TriGridMask) -> Result<TriGrid> {
    let dims = grid.dims();
    if !mask.matches(dims) {
        return Err(shape_err!("mask {:?} does not fit tri-grid {:?}", mask.shape(), dims));
    }
    let hw = dims.height * dims.width;
    let mut out = grid.clone();
    let data = out.data_mut();
    for ps in 0..3 * dims.slices {
        for ch in 0..dims.channels {
            let base = (ps * dims.channels + ch) * hw;
            for (k, &keep) in mask.data[ps * hw..(ps + 1) * hw].iter().enumerate() {
                if !keep {
                    data[base + k] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Occlusion mask (1 = occluded) for a tri-grid seen at `pose` with the given depth map.
pub fn occlusion_mask(depth: &[f64], depth_res: usize, pose: &CameraPose, config: &ModelConfig) -> Result<TriGridMask> {
    let v = config.volume_res();
    let eps = voxel_diagonals(v, config.visibility_eps);
    let vol = visibility_volume(depth, depth_res, pose, &config.intrinsics(), v, eps)?;
    let vis = to_trigrid_mask(&vol, config.slices, config.grid_res, config.grid_res, config.mask_dilation);
    Ok(occlusion_of(&vis))
}

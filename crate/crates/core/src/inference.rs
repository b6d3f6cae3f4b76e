//! Dual-encoder inversion: visible tri-grid cells come from the
//! reconstruction encoder, occluded cells from the adversarial encoder.

use alloc::vec::Vec;

use crate::camera::{pose_from_orbit, CameraPose};
use crate::encoder::Encoder;
use crate::error::{shape_err, Result};
use crate::generator::Generator;
use crate::occlusion::{occlusion_mask, TriGridMask};
use crate::renderer::{render, RenderOutput, RenderSettings};
use crate::tensor::Tensor;
use crate::trigrid::TriGrid;

/// Stitched tri-grid with its two sources and the occlusion mask used.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub stitched: TriGrid,
    pub t1: TriGrid,
    pub t2: TriGrid,
    /// 1 = occluded from the input camera.
    pub mask_occluded: TriGridMask,
    pub input_pose: CameraPose,
}

/// Cellwise selection: `t2` where `occluded` is set, `t1` elsewhere,
/// broadcast over channels.
pub fn stitch(t1: &TriGrid, t2: &TriGrid, occluded: &TriGridMask) -> Result<TriGrid> {
    let dims = t1.dims();
    if t2.dims() != dims {
        return Err(shape_err!("tri-grids {:?} and {:?} differ", dims, t2.dims()));
    }
    if occluded.shape() != (dims.slices, dims.height, dims.width) {
        return Err(shape_err!("mask {:?} does not fit tri-grid {:?}", occluded.shape(), dims));
    }
    let hw = dims.height * dims.width;
    let mut out = t1.clone();
    let (src, dst) = (t2.data(), out.data_mut());
    for ps in 0..3 * dims.slices {
        let cells = &occluded.data()[ps * hw..(ps + 1) * hw];
        for ch in 0..dims.channels {
            let base = (ps * dims.channels + ch) * hw;
            for (k, &occ) in cells.iter().enumerate() {
                if occ {
                    dst[base + k] = src[base + k];
                }
            }
        }
    }
    Ok(out)
}

/// Anything that turns an image and its camera into a tri-grid.
pub trait Inverter {
    fn invert_grid(&self, image: &Tensor, pose: &CameraPose) -> Result<TriGrid>;
}

/// A single encoder used on its own.
#[derive(Clone, Copy, Debug)]
pub struct SingleEncoder<'a> {
    pub generator: &'a Generator,
    pub encoder: &'a Encoder,
}

impl Inverter for SingleEncoder<'_> {
    fn invert_grid(&self, image: &Tensor, pose: &CameraPose) -> Result<TriGrid> {
        Ok(self.encoder.encoder_forward(self.generator, image, pose)?.0)
    }
}

/// Reconstruction encoder `e1` stitched with adversarial encoder `e2`.
#[derive(Clone, Copy, Debug)]
pub struct DualEncoder<'a> {
    pub generator: &'a Generator,
    pub e1: &'a Encoder,
    pub e2: &'a Encoder,
}

impl DualEncoder<'_> {
    /// Runs both encoders, derives the occlusion mask from the depth of the
    /// first encoder's same-view render and stitches.
    pub fn invert(&self, image: &Tensor, pose: &CameraPose) -> Result<InversionResult> {
        let cfg = self.generator.config();
        let (t1, _, first) = self.e1.encoder_forward(self.generator, image, pose)?;
        let (t2, _, _) = self.e2.encoder_forward(self.generator, image, pose)?;
        let mask = occlusion_mask(&first.depth, first.resolution, pose, cfg)?;
        let stitched = stitch(&t1, &t2, &mask)?;
        Ok(InversionResult { stitched, t1, t2, mask_occluded: mask, input_pose: *pose })
    }
}

impl Inverter for DualEncoder<'_> {
    fn invert_grid(&self, image: &Tensor, pose: &CameraPose) -> Result<TriGrid> {
        Ok(self.invert(image, pose)?.stitched)
    }
}

/// Renders any tri-grid with the generator's decoder and configured camera.
pub fn render_grid(gen: &Generator, grid: &TriGrid, pose: &CameraPose) -> Result<RenderOutput> {
    let cfg = gen.config();
    render(grid, &gen.decoder(), pose, &cfg.intrinsics(), &RenderSettings::from_config(cfg))
}

pub fn render_novel(gen: &Generator, result: &InversionResult, pose: &CameraPose) -> Result<RenderOutput> {
    render_grid(gen, &result.stitched, pose)
}

/// Orbit poses at yaws `2πk/n`, zero pitch, configured radius.
pub fn orbit_poses(radius: f64, n_views: usize) -> Result<Vec<CameraPose>> {
    (0..n_views).map(|k| pose_from_orbit(core::f64::consts::TAU * k as f64 / n_views as f64, 0.0, radius)).collect()
}

/// Renders of a tri-grid around the full circle.
pub fn render_360_grid(gen: &Generator, grid: &TriGrid, n_views: usize) -> Result<Vec<RenderOutput>> {
    if n_views == 0 {
        return Err(crate::error::invalid!("n_views must be at least 1"));
    }
    orbit_poses(gen.config().radius, n_views)?.iter().map(|p| render_grid(gen, grid, p)).collect()
}

pub fn render_360(gen: &Generator, result: &InversionResult, n_views: usize) -> Result<Vec<RenderOutput>> {
    render_360_grid(gen, &result.stitched, n_views)
}

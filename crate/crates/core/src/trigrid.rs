//! Tri-grid feature volumes: three axis-aligned planes, each split into depth
//! slices along its normal axis.
//!
//! Storage is `[plane][slice][channel][row][col]`. Plane 0 spans XY (slices
//! along z), plane 1 spans XZ (slices along y), plane 2 spans ZY (slices along
//! x). Columns follow the first named axis and rows the second, and every plane
//! covers `[-1, 1]²` with cell-centred samples.

use alloc::vec;
use alloc::vec::Vec;

pub use crate::autodiff::TriDims;
use crate::autodiff::trigrid_taps;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

impl TriDims {
    pub fn new(slices: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { slices, channels, height, width }
    }

    pub fn len(&self) -> usize {
        3 * self.slices * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(planes, slices, channels, height, width)`
    pub fn shape5(&self) -> [usize; 5] {
        [3, self.slices, self.channels, self.height, self.width]
    }

    /// Shape of the stacked channel map fed to the discriminator.
    pub fn disc_shape(&self) -> [usize; 3] {
        [3 * self.slices * self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriGrid {
    dims: TriDims,
    data: Vec<f64>,
}

impl TriGrid {
    pub fn zeros(dims: TriDims) -> Self {
        Self { dims, data: vec![0.0; dims.len()] }
    }

    pub fn full(dims: TriDims, value: f64) -> Self {
        Self { dims, data: vec![value; dims.len()] }
    }

    pub fn from_vec(dims: TriDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(shape_err!("tri-grid {:?} needs {} values, got {}", dims, dims.len(), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> TriDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index of `(plane, slice, channel, row, col)`.
    pub fn index(&self, plane: usize, slice: usize, channel: usize, row: usize, col: usize) -> usize {
        let d = self.dims;
        (((plane * d.slices + slice) * d.channels + channel) * d.height + row) * d.width + col
    }

    pub fn get(&self, plane: usize, slice: usize, channel: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(plane, slice, channel, row, col)]
    }

    /// Stacks planes and slices into channels: `(3, D, C, H, W) → (3·D·C, H, W)`.
    pub fn reshape_for_disc(&self) -> Tensor {
        Tensor::from_vec(&self.dims.disc_shape(), self.data.clone()).expect("tri-grid layout")
    }

    /// Inverse of [`TriGrid::reshape_for_disc`].
    pub fn from_disc_layout(dims: TriDims, t: &Tensor) -> Result<Self> {
        let want = dims.disc_shape();
        let shape = t.shape();
        let ok = shape == want || (shape.len() == 4 && shape[0] == 1 && shape[1..] == want);
        if !ok {
            return Err(shape_err!("stacked map {:?} does not match {:?}", shape, want));
        }
        Self::from_vec(dims, t.data().to_vec())
    }

    /// Batched `[1, 3·D·C, H, W]` view for the autodiff ops.
    pub fn to_tensor(&self) -> Tensor {
        let [c, h, w] = self.dims.disc_shape();
        Tensor::from_vec(&[1, c, h, w], self.data.clone()).expect("tri-grid layout")
    }

    /// Feature lookup summed over the three planes, `[points, C]`.
    pub fn sample(&self, points: &[[f64; 3]]) -> Vec<f64> {
        let c = self.dims.channels;
        let hw = self.dims.height * self.dims.width;
        let mut out = vec![0.0; points.len() * c];
        let mut taps = Vec::with_capacity(24);
        for (i, p) in points.iter().enumerate() {
            trigrid_taps(p, self.dims, &mut taps);
            for &(off, w) in &taps {
                for ch in 0..c {
                    out[i * c + ch] += w * self.data[off + ch * hw];
                }
            }
        }
        out
    }
}

//! Bilinear sampling over the pixel-center lattice, with the derivative
//! information the backward pass needs.
//!
//! Coordinates outside `[0, W-1] x [0, H-1]` are clamped to the border before
//! interpolation. The derivative with respect to the coordinates is the
//! piecewise-linear slope of the subcell to the right/above the sample point
//! (one-sided rule at lattice lines); in the clamped region it is zero.

use super::FeatureGrid;

/// Where a continuous coordinate landed on the lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleNode {
    pub x0: u32,
    pub y0: u32,
    /// Fractional position within the cell, in [0, 1].
    pub tx: f64,
    pub ty: f64,
    /// d(clamped x)/dx: 1 inside the lattice, 0 in the clamped region and at
    /// the far border (right/up one-sided rule).
    pub dxc: f64,
    pub dyc: f64,
}

/// Resolve a continuous coordinate against a `width x height` lattice.
pub fn locate(width: u32, height: u32, x: f64, y: f64) -> SampleNode {
    let wm1 = (width - 1) as f64;
    let hm1 = (height - 1) as f64;
    let xc = x.clamp(0.0, wm1);
    let yc = y.clamp(0.0, hm1);
    let (x0, tx, dxc) = axis_locate(xc, x, width);
    let (y0, ty, dyc) = axis_locate(yc, y, height);
    SampleNode {
        x0,
        y0,
        tx,
        ty,
        dxc,
        dyc,
    }
}

fn axis_locate(clamped: f64, raw: f64, size: u32) -> (u32, f64, f64) {
    if size == 1 {
        return (0, 0.0, 0.0);
    }
    let max = (size - 1) as f64;
    let i0 = (clamped.floor() as u32).min(size - 2);
    let t = clamped - i0 as f64;
    // Inside the lattice the local slope applies; beyond the far node the
    // clamp makes the value constant, so the one-sided derivative is zero.
    let d = if raw >= 0.0 && raw < max { 1.0 } else { 0.0 };
    (i0, t, d)
}

impl SampleNode {
    /// Corner weights in (x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1) order.
    pub fn weights(&self) -> [f64; 4] {
        let (tx, ty) = (self.tx, self.ty);
        [
            (1.0 - tx) * (1.0 - ty),
            tx * (1.0 - ty),
            (1.0 - tx) * ty,
            tx * ty,
        ]
    }

    /// The four corner lattice positions matching `weights()` order.
    pub fn corners(&self, width: u32, height: u32) -> [(u32, u32); 4] {
        let x1 = (self.x0 + 1).min(width - 1);
        let y1 = (self.y0 + 1).min(height - 1);
        [
            (self.x0, self.y0),
            (x1, self.y0),
            (self.x0, y1),
            (x1, y1),
        ]
    }
}

/// Interpolate all channels at one location, appending to `out`.
pub fn sample_channels(grid: &FeatureGrid, node: &SampleNode, out: &mut Vec<f64>) {
    let w = node.weights();
    let corners = node.corners(grid.width(), grid.height());
    for c in 0..grid.channels() {
        let mut v = 0.0;
        for (k, &(cx, cy)) in corners.iter().enumerate() {
            v += w[k] * grid.get(cx, cy, c);
        }
        out.push(v);
    }
}

/// Per-channel derivative of the interpolated value with respect to the
/// (unclamped) sample coordinates.
pub fn sample_coord_grad(grid: &FeatureGrid, node: &SampleNode, c: u32) -> (f64, f64) {
    let [(x0, y0), (x1, _), (_, y1), _] = node.corners(grid.width(), grid.height());
    let g00 = grid.get(x0, y0, c);
    let g10 = grid.get(x1, y0, c);
    let g01 = grid.get(x0, y1, c);
    let g11 = grid.get(x1, y1, c);
    let ddx = ((1.0 - node.ty) * (g10 - g00) + node.ty * (g11 - g01)) * node.dxc;
    let ddy = ((1.0 - node.tx) * (g01 - g00) + node.tx * (g11 - g10)) * node.dyc;
    (ddx, ddy)
}

/// Scatter an upstream gradient for one sampled channel onto the four corner
/// grid values.
pub fn scatter_value_grad(
    grad: &mut [f64],
    grid: &FeatureGrid,
    node: &SampleNode,
    c: u32,
    upstream: f64,
) {
    let w = node.weights();
    let corners = node.corners(grid.width(), grid.height());
    let channels = grid.channels() as usize;
    for (k, &(cx, cy)) in corners.iter().enumerate() {
        let idx =
            (cy as usize * grid.width() as usize + cx as usize) * channels + c as usize;
        grad[idx] += w[k] * upstream;
    }
}

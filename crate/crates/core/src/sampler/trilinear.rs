//! Trilinear interpolation of a channel-first `d × t × h × w` volume.
//!
//! Normalized coordinates follow the align-corners rule: `0` maps to index
//! `0` and `1` maps to index `n − 1` on each axis. Coordinates are clamped
//! to `[0, 1]` before lookup, so the gradient with respect to a clamped
//! coordinate is zero. On an axis of extent 1 the coordinate has no effect.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeDims {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeDims {
    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [d, t, h, w] if d >= 1 && t >= 1 && h >= 1 && w >= 1 => Ok(Self {
                channels: d,
                frames: t,
                height: h,
                width: w,
            }),
            _ => Err(Error::InvalidInput(format!(
                "feature volume must have shape d×t×h×w with all extents >= 1, got {shape:?}"
            ))),
        }
    }

    pub fn cells(&self) -> usize {
        self.frames * self.height * self.width
    }

    #[inline]
    fn index(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + t) * self.height + y) * self.width + x
    }
}

/// Interpolation stencil along one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: usize,
    hi: usize,
    frac: f64,
    /// `d pos / d coord`, zero when clamped or degenerate.
    slope: f64,
}

impl Axis {
    fn new(coord: f64, n: usize) -> Self {
        if n == 1 {
            return Self {
                lo: 0,
                hi: 0,
                frac: 0.0,
                slope: 0.0,
            };
        }
        let inside = (0.0..=1.0).contains(&coord);
        let scale = (n - 1) as f64;
        let mut pos = coord.clamp(0.0, 1.0) * scale;
        // Normalized grid coordinates like k/(n-1) can land an ulp away from
        // the integer; snap so grid points reproduce stored values exactly.
        let r = pos.round();
        if (pos - r).abs() <= 4.0 * f64::EPSILON * scale {
            pos = r;
        }
        let lo = (pos.floor() as usize).min(n - 2);
        Self {
            lo,
            hi: lo + 1,
            frac: pos - lo as f64,
            slope: if inside { scale } else { 0.0 },
        }
    }

    #[inline]
    fn weights(&self) -> [f64; 2] {
        [1.0 - self.frac, self.frac]
    }

    #[inline]
    fn idx(&self) -> [usize; 2] {
        [self.lo, self.hi]
    }
}

fn stencil(dims: VolumeDims, loc: &[f64]) -> [Axis; 3] {
    [
        Axis::new(loc[0], dims.frames),
        Axis::new(loc[1], dims.height),
        Axis::new(loc[2], dims.width),
    ]
}

/// Samples every location (rows of `locs`, 3 coordinates each); returns a
/// `P × d` row-major buffer.
pub(crate) fn forward(volume: &[f64], dims: VolumeDims, locs: &[f64]) -> Vec<f64> {
    let p = locs.len() / 3;
    let d = dims.channels;
    let mut out = vec![0.0; p * d];
    for (pi, loc) in locs.chunks_exact(3).enumerate() {
        let [at, ay, ax] = stencil(dims, loc);
        let orow = &mut out[pi * d..(pi + 1) * d];
        for (ti, wt) in at.idx().into_iter().zip(at.weights()) {
            for (yi, wy) in ay.idx().into_iter().zip(ay.weights()) {
                for (xi, wx) in ax.idx().into_iter().zip(ax.weights()) {
                    let w = wt * wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    for (c, o) in orow.iter_mut().enumerate() {
                        *o += w * volume[dims.index(c, ti, yi, xi)];
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients of the sampled values into `grad_volume`
/// (same layout as the volume) and `grad_locs` (`P × 3`).
pub(crate) fn backward(
    volume: &[f64],
    dims: VolumeDims,
    locs: &[f64],
    grad_out: &[f64],
    mut grad_volume: Option<&mut [f64]>,
    mut grad_locs: Option<&mut [f64]>,
) {
    let d = dims.channels;
    for (pi, loc) in locs.chunks_exact(3).enumerate() {
        let axes = stencil(dims, loc);
        let [at, ay, ax] = axes;
        let g = &grad_out[pi * d..(pi + 1) * d];
        let mut dloc = [0.0; 3];
        for (a, ti) in at.idx().into_iter().enumerate() {
            for (b, yi) in ay.idx().into_iter().enumerate() {
                for (c, xi) in ax.idx().into_iter().enumerate() {
                    let (wt, wy, wx) = (at.weights()[a], ay.weights()[b], ax.weights()[c]);
                    let w = wt * wy * wx;
                    // ∂w/∂pos along each axis: −1 for the low corner, +1 for the high one.
                    let sign = |k: usize| if k == 0 { -1.0 } else { 1.0 };
                    let dw = [sign(a) * wy * wx, wt * sign(b) * wx, wt * wy * sign(c)];
                    let mut dot = 0.0;
                    for (ch, &gc) in g.iter().enumerate() {
                        let idx = dims.index(ch, ti, yi, xi);
                        if let Some(gv) = grad_volume.as_deref_mut() {
                            gv[idx] += w * gc;
                        }
                        dot += gc * volume[idx];
                    }
                    for k in 0..3 {
                        dloc[k] += dw[k] * dot;
                    }
                }
            }
        }
        if let Some(gl) = grad_locs.as_deref_mut() {
            for k in 0..3 {
                gl[pi * 3 + k] += axes[k].slope * dloc[k];
            }
        }
    }
}

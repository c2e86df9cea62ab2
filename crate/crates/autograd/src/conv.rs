use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Spatial geometry of a square-kernel, zero-padded 2-D convolution.
///
/// The "image" side is `channels × height × width`; the "grid" side is
/// the `out_h × out_w` lattice of kernel placements. A transposed
/// convolution reuses the same geometry with the two sides swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Invalid {
                op: "conv",
                msg: "kernel and stride must be positive".into(),
            });
        }
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if ph < kernel || pw < kernel {
            return Err(Error::Invalid {
                op: "conv",
                msg: format!("kernel {kernel} larger than padded input {ph}x{pw}"),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    /// Geometry of the convolution whose input-gradient is the transposed
    /// convolution producing an `out_size`-sided image from a
    /// `in_size`-sided one.
    pub fn for_transpose(
        out_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let grow = |n: usize| ((n - 1) * stride + kernel).checked_sub(2 * pad);
        let (h, w) = match (grow(in_h), grow(in_w)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::Invalid {
                    op: "conv_transpose",
                    msg: "padding too large for kernel".into(),
                })
            }
        };
        let g = Self::new(out_channels, h, w, kernel, stride, pad)?;
        if g.out_h != in_h || g.out_w != in_w {
            return Err(Error::Invalid {
                op: "conv_transpose",
                msg: format!("geometry does not invert: {in_h}x{in_w} -> {h}x{w}"),
            });
        }
        Ok(g)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn grid_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Range of output columns `ox` whose input column `ox·stride + kx - pad`
/// lies inside `0..width`.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if g.width + p > kx { ((g.width + p - kx - 1) / s + 1).min(g.out_w) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds a `C×H×W` image into a `(C·k·k) × (out_h·out_w)` block of a
/// column matrix whose rows are `row_stride` long, starting at column
/// `col_offset`.
pub(crate) fn im2col<S: Scalar>(image: &[S], g: &ConvGeometry, cols: &mut [S], row_stride: usize, col_offset: usize) {
    let grid = g.grid_len();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let start = row * row_stride + col_offset;
                let dst = &mut cols[start..start + grid];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(S::zero());
                    line[hi..].fill(S::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into the image.
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeometry, image: &mut [S], row_stride: usize, col_offset: usize) {
    let grid = g.grid_len();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let start = row * row_stride + col_offset;
                let src = &cols[start..start + grid];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `[N, C, G]` -> `[C, N·G]`.
pub(crate) fn to_channel_major<S: Scalar>(x: &[S], n: usize, c: usize, grid: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * grid + i * grid..ch * n * grid + (i + 1) * grid]
                .copy_from_slice(&x[(i * c + ch) * grid..(i * c + ch + 1) * grid]);
        }
    }
    out
}

/// `[C, N·G]` -> `[N, C, G]`.
pub(crate) fn from_channel_major<S: Scalar>(x: &[S], n: usize, c: usize, grid: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[(i * c + ch) * grid..(i * c + ch + 1) * grid]
                .copy_from_slice(&x[ch * n * grid + i * grid..ch * n * grid + (i + 1) * grid]);
        }
    }
    out
}

//! im2col / col2im kernels shared by convolution and transposed convolution.

use super::real::Real;

/// Geometry of a square-kernel convolution from an `h×w` image to `oh×ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        conv_out(self.h, self.kernel, self.stride, self.pad)
    }

    pub fn out_w(&self) -> usize {
        conv_out(self.w, self.kernel, self.stride, self.pad)
    }

    /// Rows of the column matrix: `channels · kernel²`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: `batch · oh · ow`.
    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = size + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

pub fn deconv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    ((size - 1) * stride + kernel).saturating_sub(2 * pad)
}

/// Unfold `[B, C, H, W]` into a `(C·k·k) × (B·OH·OW)` row-major matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    let plane = g.h * g.w;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst_row[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into `[B, C, H, W]`.
pub fn col2im<T: Real>(cols_mat: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let cols = g.col_cols();
    let plane = g.h * g.w;
    let mut x = vec![T::zero(); g.batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols_mat[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst_row[ix as usize] = dst_row[ix as usize] + src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, P]` → `[C, B, P]`.
pub fn batch_to_channel_major<T: Real>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = (b * channels + c) * plane;
            let dst = (c * batch + b) * plane;
            out[dst..dst + plane].copy_from_slice(&x[src..src + plane]);
        }
    }
    out
}

/// `[C, B, P]` → `[B, C, P]`.
pub fn channel_to_batch_major<T: Real>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = (c * batch + b) * plane;
            let dst = (b * channels + c) * plane;
            out[dst..dst + plane].copy_from_slice(&x[src..src + plane]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(conv_out(32, 4, 2, 1), 16);
        assert_eq!(conv_out(4, 4, 1, 0), 1);
        assert_eq!(deconv_out(1, 4, 1, 0), 4);
        assert_eq!(deconv_out(4, 4, 2, 1), 8);
        assert_eq!(deconv_out(1, 1, 1, 0), 1);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { batch: 2, channels: 3, h: 5, w: 4, kernel: 3, stride: 2, pad: 1 };
        let n = g.batch * g.channels * g.h * g.w;
        let x: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let m = g.col_rows() * g.col_cols();
        let y: Vec<f64> = (0..m).map(|i| ((i * 5 % 13) as f64) * 0.25).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn permutes_round_trip() {
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let y = batch_to_channel_major(&x, 2, 3, 4);
        assert_eq!(channel_to_batch_major(&y, 2, 3, 4), x);
        assert_eq!(&y[4..8], &x[12..16]);
    }
}

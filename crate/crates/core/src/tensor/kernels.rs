//! Raw convolution kernels (im2col + sgemm) shared by the tape ops.

use crate::error::{Error, Result};

/// Output extent of a strided, padded cross-correlation. Errors unless the
/// padded input tiles exactly with the stride.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("padded extent {padded} smaller than kernel {kernel}"),
        ));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::shape(
            "conv2d",
            format!(
                "padded extent {padded} minus kernel {kernel} not divisible by stride {stride}"
            ),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn deconv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return Err(Error::shape(
            "deconv2d",
            format!("padding {pad} consumes the whole output ({full})"),
        ));
    }
    Ok(full - 2 * pad)
}

/// Geometry of one cross-correlation between an "image" side and a "column" side.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(g: &Geometry, image: &[f32], col: &mut [f32]) {
    if g.is_pointwise() {
        col.copy_from_slice(image);
        return;
    }
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns into `image`.
pub(crate) fn col2im_add(g: &Geometry, col: &[f32], image: &mut [f32]) {
    if g.is_pointwise() {
        for (d, s) in image.iter_mut().zip(col) {
            *d += s;
        }
        return;
    }
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` where `op(A)` is m×k and
/// `op(B)` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the strides handed to sgemm.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Conv forward for one sample. `weight` is `c_out × (c_in·kh·kw)`.
pub(crate) fn conv_forward_sample(
    g: &Geometry,
    c_out: usize,
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    col: &mut [f32],
    out: &mut [f32],
) {
    im2col(g, input, col);
    let hw = g.col_cols();
    for (o, plane) in out.chunks_exact_mut(hw).enumerate() {
        plane.fill(bias[o]);
    }
    gemm(c_out, g.col_rows(), hw, weight, false, col, false, 1.0, out);
}

/// Conv backward for one sample; accumulates into the gradient buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_sample(
    g: &Geometry,
    c_out: usize,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    col: &mut [f32],
    grad_input: Option<&mut [f32]>,
    grad_weight: Option<&mut [f32]>,
    grad_bias: Option<&mut [f64]>,
) {
    let hw = g.col_cols();
    let rows = g.col_rows();
    if let Some(gb) = grad_bias {
        for (o, plane) in grad_out.chunks_exact(hw).enumerate() {
            gb[o] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    if let Some(gw) = grad_weight {
        im2col(g, input, col);
        gemm(c_out, hw, rows, grad_out, false, col, true, 1.0, gw);
    }
    if let Some(gi) = grad_input {
        gemm(rows, c_out, hw, weight, true, grad_out, false, 0.0, col);
        col2im_add(g, col, gi);
    }
}

/// Transposed-conv forward for one sample. `weight` is `c_in × (c_out·kh·kw)`
/// and `g` describes the output side as the "image".
#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_forward_sample(
    g: &Geometry,
    c_in: usize,
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    col: &mut [f32],
    out: &mut [f32],
) {
    let hw_in = g.col_cols();
    gemm(g.col_rows(), c_in, hw_in, weight, true, input, false, 0.0, col);
    let plane = g.height * g.width;
    for (o, p) in out.chunks_exact_mut(plane).enumerate() {
        p.fill(bias[o]);
    }
    col2im_add(g, col, out);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_backward_sample(
    g: &Geometry,
    c_in: usize,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    col: &mut [f32],
    grad_input: Option<&mut [f32]>,
    grad_weight: Option<&mut [f32]>,
    grad_bias: Option<&mut [f64]>,
) {
    let hw_in = g.col_cols();
    let rows = g.col_rows();
    if let Some(gb) = grad_bias {
        let plane = g.height * g.width;
        for (o, p) in grad_out.chunks_exact(plane).enumerate() {
            gb[o] += p.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    if grad_input.is_none() && grad_weight.is_none() {
        return;
    }
    im2col(g, grad_out, col);
    if let Some(gi) = grad_input {
        gemm(c_in, rows, hw_in, weight, false, col, false, 1.0, gi);
    }
    if let Some(gw) = grad_weight {
        gemm(c_in, hw_in, rows, input, false, col, true, 1.0, gw);
    }
}

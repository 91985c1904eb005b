//! Differentiable ops recorded on a [`Tape`](super::Tape).

use super::kernels::{self, Geometry};
use super::tape::{Backward, Var};
use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

struct AddBack {
    sign: f32,
}

impl Backward for AddBack {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|v| v * self.sign).collect()),
        ]
    }
}

struct ScaleBack(f32);

impl Backward for ScaleBack {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct ReluBack;

impl Backward for ReluBack {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        let x = inputs[0].data();
        vec![Some(
            x.iter()
                .zip(g)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
        )]
    }
}

struct MatmulBack {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatmulBack {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| {
            let mut out = vec![0.0; self.m * self.k];
            kernels::gemm(self.m, self.n, self.k, g, false, b, true, 0.0, &mut out);
            out
        });
        let gb = needs[1].then(|| {
            let mut out = vec![0.0; self.k * self.n];
            kernels::gemm(self.k, self.m, self.n, a, true, g, false, 0.0, &mut out);
            out
        });
        vec![ga, gb]
    }
}

struct ReshapeBack;

impl Backward for ReshapeBack {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.to_vec())]
    }
}

/// Max over one axis; `argmax` holds the winning offset along that axis.
struct ReduceMaxBack {
    outer: usize,
    len: usize,
    inner: usize,
    argmax: Vec<u32>,
}

impl Backward for ReduceMaxBack {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        let mut out = vec![0.0; self.outer * self.len * self.inner];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let r = o * self.inner + i;
                let a = self.argmax[r] as usize;
                out[(o * self.len + a) * self.inner + i] = g[r];
            }
        }
        vec![Some(out)]
    }
}

struct SumBack;

impl Backward for SumBack {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

struct MseBack;

impl Backward for MseBack {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let diff = |sign: f32| -> Vec<f32> {
            a.iter()
                .zip(b)
                .map(|(x, y)| sign * 2.0 * (x - y) * g[0])
                .collect()
        };
        vec![needs[0].then(|| diff(1.0)), needs[1].then(|| diff(-1.0))]
    }
}

struct ConvBack {
    geometry: Geometry,
    c_out: usize,
}

impl Backward for ConvBack {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geo = &self.geometry;
        let batch = x.shape()[0];
        let in_len = geo.channels * geo.height * geo.width;
        let out_len = self.c_out * geo.col_cols();
        let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut gw = needs[1].then(|| vec![0.0; w.numel()]);
        let mut gb = needs[2].then(|| vec![0.0f64; self.c_out]);
        let mut col = vec![0.0; geo.col_rows() * geo.col_cols()];
        for b in 0..batch {
            kernels::conv_backward_sample(
                geo,
                self.c_out,
                &x.data()[b * in_len..(b + 1) * in_len],
                w.data(),
                &g[b * out_len..(b + 1) * out_len],
                &mut col,
                gx.as_mut().map(|v| &mut v[b * in_len..(b + 1) * in_len]),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
        }
        vec![gx, gw, gb.map(|v| v.into_iter().map(|x| x as f32).collect())]
    }
}

struct DeconvBack {
    geometry: Geometry,
    c_in: usize,
}

impl Backward for DeconvBack {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geo = &self.geometry;
        let batch = x.shape()[0];
        let in_len = self.c_in * geo.col_cols();
        let out_len = geo.channels * geo.height * geo.width;
        let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut gw = needs[1].then(|| vec![0.0; w.numel()]);
        let mut gb = needs[2].then(|| vec![0.0f64; geo.channels]);
        let mut col = vec![0.0; geo.col_rows() * geo.col_cols()];
        for b in 0..batch {
            kernels::deconv_backward_sample(
                geo,
                self.c_in,
                &x.data()[b * in_len..(b + 1) * in_len],
                w.data(),
                &g[b * out_len..(b + 1) * out_len],
                &mut col,
                gx.as_mut().map(|v| &mut v[b * in_len..(b + 1) * in_len]),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
        }
        vec![gx, gw, gb.map(|v| v.into_iter().map(|x| x as f32).collect())]
    }
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.add_signed(other, 1.0, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.add_signed(other, -1.0, "sub")
    }

    fn add_signed(self, other: Var<'t>, sign: f32, op: &'static str) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(op, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + sign * y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.push(out, &[self, other], Box::new(AddBack { sign })))
    }

    pub fn scale(self, c: f32) -> Var<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape(), a.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        self.tape.push(out, &[self], Box::new(ScaleBack(c)))
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape(), a.data().iter().map(|&x| if x < 0.0 { 0.0 } else { x }).collect())
            .expect("same shape");
        self.tape.push(out, &[self], Box::new(ReluBack))
    }

    /// `(m×k) · (k×n)`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.tape.push(out, &[self, other], Box::new(MatmulBack { m, k, n })))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshaped(shape)?;
        Ok(self.tape.push(out, &[self], Box::new(ReshapeBack)))
    }

    /// Maximum along `axis`, which is removed from the shape (a rank-1 input
    /// reduces to shape `[1]`). Ties route the gradient to the first winner.
    pub fn reduce_max(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(Error::shape(
                "reduce_max",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut values = vec![f32::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        let data = a.data();
        for o in 0..outer {
            for s in 0..len {
                let row = &data[(o * len + s) * inner..(o * len + s + 1) * inner];
                let best = &mut values[o * inner..(o + 1) * inner];
                let arg = &mut argmax[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    // NaN wins so that it reaches the loss
                    if s == 0 || row[i] > best[i] || row[i].is_nan() {
                        best[i] = row[i];
                        arg[i] = s as u32;
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().copied().enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, e)| e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, values)?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(ReduceMaxBack {
                outer,
                len,
                inner,
                argmax,
            }),
        ))
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().map(|&v| v as f64).sum();
        self.tape.push(Tensor::scalar(s as f32), &[self], Box::new(SumBack))
    }

    /// Sum (not mean) of squared element-wise differences.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), target.value());
        same_shape("mse", &a, &b)?;
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        Ok(self.tape.push(Tensor::scalar(s as f32), &[self, target], Box::new(MseBack)))
    }

    /// Cross-correlation of an NCHW input with an `O×C×kh×kw` weight plus a
    /// per-output-channel bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 4 || w.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} and weight {:?} must be rank 4", x.shape(), w.shape()),
            ));
        }
        let (batch, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, weight expects {wc}"),
            ));
        }
        if b.shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {c_out} output channels", b.shape()),
            ));
        }
        let out_h = kernels::conv_output_extent(h, kh, stride, pad)?;
        let out_w = kernels::conv_output_extent(wd, kw, stride, pad)?;
        let geometry = Geometry {
            channels: c_in,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let in_len = c_in * h * wd;
        let out_len = c_out * out_h * out_w;
        let mut out = vec![0.0; batch * out_len];
        let mut col = vec![0.0; geometry.col_rows() * geometry.col_cols()];
        for s in 0..batch {
            kernels::conv_forward_sample(
                &geometry,
                c_out,
                &x.data()[s * in_len..(s + 1) * in_len],
                w.data(),
                b.data(),
                &mut col,
                &mut out[s * out_len..(s + 1) * out_len],
            );
        }
        let out = Tensor::new(&[batch, c_out, out_h, out_w], out)?;
        Ok(self.tape.push(
            out,
            &[self, weight, bias],
            Box::new(ConvBack { geometry, c_out }),
        ))
    }

    /// Transposed convolution with an `C_in×C_out×kh×kw` weight; the exact
    /// adjoint of [`Var::conv2d`] with the same kernel, stride and padding.
    pub fn deconv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 4 || w.rank() != 4 {
            return Err(Error::shape(
                "deconv2d",
                format!("input {:?} and weight {:?} must be rank 4", x.shape(), w.shape()),
            ));
        }
        let (batch, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (wc, c_out, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c_in {
            return Err(Error::shape(
                "deconv2d",
                format!("input has {c_in} channels, weight expects {wc}"),
            ));
        }
        if b.shape() != [c_out] {
            return Err(Error::shape(
                "deconv2d",
                format!("bias {:?} for {c_out} output channels", b.shape()),
            ));
        }
        let out_h = kernels::deconv_output_extent(h, kh, stride, pad)?;
        let out_w = kernels::deconv_output_extent(wd, kw, stride, pad)?;
        let geometry = Geometry {
            channels: c_out,
            height: out_h,
            width: out_w,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let in_len = c_in * h * wd;
        let out_len = c_out * out_h * out_w;
        let mut out = vec![0.0; batch * out_len];
        let mut col = vec![0.0; geometry.col_rows() * geometry.col_cols()];
        for s in 0..batch {
            kernels::deconv_forward_sample(
                &geometry,
                c_in,
                &x.data()[s * in_len..(s + 1) * in_len],
                w.data(),
                b.data(),
                &mut col,
                &mut out[s * out_len..(s + 1) * out_len],
            );
        }
        let out = Tensor::new(&[batch, c_out, out_h, out_w], out)?;
        Ok(self.tape.push(
            out,
            &[self, weight, bias],
            Box::new(DeconvBack { geometry, c_in }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = x.conv2d(w, b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[9.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let tape = Tape::new();
        let data: Vec<f32> = (0..18).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[2, 1, 3, 3], &data));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = x.conv2d(w, b, 1, 0).unwrap();
        assert_eq!(y.value().data(), &data[..]);
    }

    #[test]
    fn conv_channel_mismatch_names_dims() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = x.conv2d(w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
    }

    #[test]
    fn deconv_spreads_single_pixel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.5));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = x.deconv2d(w, b, 2, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[2.5; 4]);
    }

    #[test]
    fn deconv_of_zero_is_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.7));
        let b = tape.constant(Tensor::from_vec(vec![0.1, -0.2, 0.3]));
        let y = x.deconv2d(w, b, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 6, 6]);
        let v = y.value();
        for c in 0..3 {
            let expect = [0.1, -0.2, 0.3][c];
            assert!(v.data()[c * 36..(c + 1) * 36].iter().all(|&x| x == expect));
        }
    }

    #[test]
    fn relu_and_mse_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let z = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(a.mse(z).unwrap().value().item(), 5.0);
        assert_eq!(a.mse(a).unwrap().value().item(), 0.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![0.3, -1.0, 4.0, 2.0]));
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn mse_against_zero_gradient_is_twice_input() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![0.5, -1.5, 3.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        x.mse(z).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, -3.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(x.relu().backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn reduce_max_ties_route_to_first() {
        let tape = Tape::new();
        let x = tape.variable(t(&[2, 3], &[1.0, 5.0, 5.0, -2.0, -1.0, -3.0]));
        let m = x.reduce_max(1).unwrap();
        assert_eq!(m.value().data(), &[5.0, -1.0]);
        m.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn reshape_is_bit_exact_and_transparent() {
        let tape = Tape::new();
        let data = vec![0.1f32, -7.25, 3.0e-20, 1.0e10, 5.0, 6.0];
        let x = tape.variable(t(&[2, 3], &data));
        let y = x.reshape(&[3, 1, 2]).unwrap();
        assert_eq!(y.value().data(), &data[..]);
        let w = tape.constant(t(&[3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        y.mse(w).unwrap().backward().unwrap();
        let direct: Vec<f32> = data
            .iter()
            .zip([1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0])
            .map(|(a, b)| 2.0 * (a - b))
            .collect();
        assert_eq!(x.grad().unwrap().data(), &direct[..]);
    }

    #[test]
    fn matmul_small() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3, 1], &[1.0, 0.0, -1.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[-2.0, -2.0]);
        assert!(b.matmul(b).is_err());
    }

    #[test]
    fn mismatched_add_is_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(a.add(b), Err(Error::Shape { .. })));
    }
}

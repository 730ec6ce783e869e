//! Direct channel-last convolution kernels.
//!
//! All three routines share one [`ConvGeometry`]: the forward cross-correlation,
//! its adjoint with respect to the input, and its adjoint with respect to the
//! kernel. The transposed convolution is the input-adjoint of a `same`-padded
//! strided convolution, so it reuses the same three routines with roles swapped.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output size `ceil(H / stride)`; zero padding split evenly, the odd pixel
    /// going to the bottom/right.
    Same,
    /// No padding; output size `floor((H - Kh) / stride) + 1`.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn same_pad(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (&[batch, in_h, in_w, in_c], &[k_h, k_w, k_in, out_c]) = (input, kernel) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected [N,H,W,C] input and [Kh,Kw,Cin,Cout] kernel, got {input:?} and {kernel:?}"),
            ));
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if in_h == 0 || in_w == 0 || k_h == 0 || k_w == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("zero-sized spatial dims: input {input:?}, kernel {kernel:?}"),
            ));
        }
        if k_in != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_c} channels but kernel expects {k_in}"),
            ));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let (oh, pt) = same_pad(in_h, k_h, stride);
                let (ow, pl) = same_pad(in_w, k_w, stride);
                (oh, ow, pt, pl)
            }
            Padding::Valid => {
                if in_h < k_h || in_w < k_w {
                    return Err(Error::shape(
                        "conv2d",
                        format!("valid padding needs input {in_h}x{in_w} >= kernel {k_h}x{k_w}"),
                    ));
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Geometry of the convolution whose input-adjoint is a transposed
    /// convolution of `input` (`[N,H,W,Cin]`) with `kernel`
    /// (`[Kh,Kw,Cout,Cin]`). The adjoint's output is `[N, H*stride, W*stride, Cout]`.
    pub fn for_transpose(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let (&[n, h, w, c], &[_, _, kout, kin]) = (input, kernel) else {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("expected [N,H,W,C] input and [Kh,Kw,Cout,Cin] kernel, got {input:?} and {kernel:?}"),
            ));
        };
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv_transpose2d stride must be positive".into(),
            ));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("zero-sized spatial dims in {input:?}"),
            ));
        }
        if kin != c {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {c} channels but kernel expects {kin}"),
            ));
        }
        let g = Self::new(&[n, h * stride, w * stride, kout], kernel, stride, Padding::Same)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        Ok(g)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_h, self.in_w, self.in_c]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.k_h, self.k_w, self.in_c, self.out_c]
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad_top)
            .filter(|&iy| iy < self.in_h)
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx)
            .checked_sub(self.pad_left)
            .filter(|&ix| ix < self.in_w)
    }
}

/// `y[n,oy,ox,co] = sum x[n,iy,ix,ci] * k[ky,kx,ci,co]`.
pub fn forward(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.in_c, g.out_c);
    let mut y = vec![0.0; g.batch * g.out_h * g.out_w * cout];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let yo = ((n * g.out_h + oy) * g.out_w + ox) * cout;
                let yrow = &mut y[yo..yo + cout];
                for ky in 0..g.k_h {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let xo = ((n * g.in_h + iy) * g.in_w + ix) * cin;
                        let ko = (ky * g.k_w + kx) * cin * cout;
                        for (ci, &xv) in x[xo..xo + cin].iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &k[ko + ci * cout..ko + (ci + 1) * cout];
                            for (yv, &kv) in yrow.iter_mut().zip(krow) {
                                *yv += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`forward`] in its first argument: maps an output-shaped
/// gradient back to input shape.
pub fn backward_input(g: &ConvGeometry, dy: &[f64], k: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.in_c, g.out_c);
    let mut dx = vec![0.0; g.batch * g.in_h * g.in_w * cin];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let yo = ((n * g.out_h + oy) * g.out_w + ox) * cout;
                let dyrow = &dy[yo..yo + cout];
                if dyrow.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..g.k_h {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let xo = ((n * g.in_h + iy) * g.in_w + ix) * cin;
                        let ko = (ky * g.k_w + kx) * cin * cout;
                        for (ci, dxv) in dx[xo..xo + cin].iter_mut().enumerate() {
                            let krow = &k[ko + ci * cout..ko + (ci + 1) * cout];
                            *dxv += dot(dyrow, krow);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of [`forward`] in its second argument.
pub fn backward_kernel(g: &ConvGeometry, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.in_c, g.out_c);
    let mut dk = vec![0.0; g.k_h * g.k_w * cin * cout];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let yo = ((n * g.out_h + oy) * g.out_w + ox) * cout;
                let dyrow = &dy[yo..yo + cout];
                for ky in 0..g.k_h {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let xo = ((n * g.in_h + iy) * g.in_w + ix) * cin;
                        let ko = (ky * g.k_w + kx) * cin * cout;
                        for (ci, &xv) in x[xo..xo + cin].iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let dkrow = &mut dk[ko + ci * cout..ko + (ci + 1) * cout];
                            for (dkv, &dyv) in dkrow.iter_mut().zip(dyrow) {
                                *dkv += xv * dyv;
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain (non-differentiable) convolution on tensors.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
    Tensor::new(g.output_shape().to_vec(), forward(&g, x.data(), k.data()))
}

/// Plain transposed convolution: the adjoint of a `same`-padded [`conv2d`]
/// with the same kernel and stride. Kernel layout is `[Kh, Kw, Cout, Cin]`.
pub fn conv_transpose2d(y: &Tensor, k: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeometry::for_transpose(y.shape(), k.shape(), stride)?;
    Tensor::new(g.input_shape().to_vec(), backward_input(&g, y.data(), k.data()))
}

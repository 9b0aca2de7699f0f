//! Affine 2-D convolution (cross-correlation, no kernel flip) lowered to GEMM
//! through im2col. Stride implements subsampling of the output grid.

use super::gemm::{matmul, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `out_ch × in_ch × K × K`
    pub weight: Tensor,
    /// `out_ch`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvGrads {
    pub fn zeros_like(p: &ConvParams) -> Self {
        ConvGrads {
            weight: Tensor::zeros(p.weight.shape()),
            bias: Tensor::zeros(p.bias.shape()),
        }
    }

    pub fn accumulate(&mut self, other: &ConvGrads) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        self.bias.add_assign(&other.bias)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (o, _, kh, kw) = self.weight.dims4()?;
        if kh != kw || kh == 0 {
            return Err(Error::invalid(format!(
                "square kernel required, got {kh}×{kw}"
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if self.bias.shape() != [o] {
            return Err(Error::shape("conv bias", self.bias.shape(), &[o]));
        }
        if !self.weight.all_finite() || !self.bias.all_finite() {
            return Err(Error::NonFinite("conv parameters".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Output spatial extent for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k {
            return Err(Error::invalid(format!(
                "kernel {k} larger than padded input {ph}×{pw}"
            )));
        }
        Ok(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }

    fn geometry(&self, input: &Tensor) -> Result<(usize, Geometry)> {
        let (b, c, h, w) = input.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(
                "conv2d input channels",
                input.shape(),
                self.weight.shape(),
            ));
        }
        let (out_h, out_w) = self.output_hw(h, w)?;
        Ok((
            b,
            Geometry {
                in_ch: c,
                in_h: h,
                in_w: w,
                out_ch: self.out_channels(),
                k: self.kernel(),
                stride: self.stride,
                pad: self.padding,
                out_h,
                out_w,
            },
        ))
    }
}

fn im2col(src: &[f64], g: &Geometry, col: &mut [f64]) {
    let cols = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        let plane = &src[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geometry, dst: &mut [f64]) {
    let cols = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        let plane = &mut dst[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (batch, g) = p.geometry(input)?;
    let in_plane = g.in_ch * g.in_h * g.in_w;
    let out_plane = g.out_ch * g.col_cols();
    let mut out = vec![0.0; batch * out_plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.col_cols()]
    };
    let weight = Mat::new(p.weight.data(), g.out_ch, g.col_rows());

    for b in 0..batch {
        let src = &input.data()[b * in_plane..(b + 1) * in_plane];
        let dst = &mut out[b * out_plane..(b + 1) * out_plane];
        let cols: &[f64] = if g.is_pointwise() {
            src
        } else {
            im2col(src, &g, &mut col);
            &col
        };
        for (o, row) in dst.chunks_exact_mut(g.col_cols()).enumerate() {
            row.iter_mut().for_each(|v| *v = p.bias.data()[o]);
        }
        matmul(weight, Mat::new(cols, g.col_rows(), g.col_cols()), dst, true);
    }
    Tensor::new(&[batch, g.out_ch, g.out_h, g.out_w], out)
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    saved_input: &Tensor,
    p: &ConvParams,
) -> Result<(Tensor, ConvGrads)> {
    let (batch, g) = p.geometry(saved_input)?;
    let expected = [batch, g.out_ch, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &expected));
    }
    let in_plane = g.in_ch * g.in_h * g.in_w;
    let out_plane = g.out_ch * g.col_cols();
    let mut grad_in = vec![0.0; saved_input.len()];
    let mut grad_w = vec![0.0; p.weight.len()];
    let mut grad_b = vec![0.0; g.out_ch];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let weight = Mat::new(p.weight.data(), g.out_ch, g.col_rows());

    for b in 0..batch {
        let gout = &grad_out.data()[b * out_plane..(b + 1) * out_plane];
        for (o, row) in gout.chunks_exact(g.col_cols()).enumerate() {
            grad_b[o] += row.iter().sum::<f64>();
        }
        let gout = Mat::new(gout, g.out_ch, g.col_cols());
        let src = &saved_input.data()[b * in_plane..(b + 1) * in_plane];
        let dst = &mut grad_in[b * in_plane..(b + 1) * in_plane];

        if g.is_pointwise() {
            matmul(gout, Mat::new(src, g.col_rows(), g.col_cols()).t(), &mut grad_w, true);
            matmul(weight.t(), gout, dst, false);
        } else {
            im2col(src, &g, &mut col);
            matmul(gout, Mat::new(&col, g.col_rows(), g.col_cols()).t(), &mut grad_w, true);
            matmul(weight.t(), gout, &mut col, false);
            col2im(&col, &g, dst);
        }
    }
    Ok((
        Tensor::new(saved_input.shape(), grad_in)?,
        ConvGrads {
            weight: Tensor::new(p.weight.shape(), grad_w)?,
            bias: Tensor::new(p.bias.shape(), grad_b)?,
        },
    ))
}

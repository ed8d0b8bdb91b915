//! 2-D cross-correlation via im2col + GEMM.

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn infer(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let bad = || Error::dim("conv2d", input, kernel);
        if input.len() != 4 || kernel.len() != 4 || stride == 0 {
            return Err(bad());
        }
        let (b, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (co, ci, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if c != ci || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(bad());
        }
        let (sh, sw) = (h + 2 * padding - kh, w + 2 * padding - kw);
        if sh % stride != 0 || sw % stride != 0 {
            return Err(bad());
        }
        Ok(Self {
            batch: b,
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: sh / stride + 1,
            out_w: sw / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one sample into a `[patch_len, positions]` matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let pos = self.positions();
        for c in 0..self.in_channels {
            let plane = &sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let r = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let row = &mut cols[r * pos..(r + 1) * pos];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= self.width as isize {
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

    /// Folds a `[patch_len, positions]` gradient back onto one sample.
    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let pos = self.positions();
        for c in 0..self.in_channels {
            let plane =
                &mut sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let r = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let row = &cols[r * pos..(r + 1) * pos];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let base = iy as usize * self.width;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                plane[base + ix as usize] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let geo = ConvGeometry::infer(input.shape(), kernel.shape(), stride, padding)?;
    let (plen, pos) = (geo.patch_len(), geo.positions());
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = geo.out_channels * pos;
    let mut out = vec![0.0; geo.batch * out_len];
    let mut cols = vec![0.0; plen * pos];
    for b in 0..geo.batch {
        geo.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(
            geo.out_channels,
            plen,
            pos,
            kernel.data(),
            false,
            &cols,
            false,
            &mut out[b * out_len..(b + 1) * out_len],
            0.0,
        );
    }
    Tensor::new(geo.out_shape(), out)
}

/// Returns `(d_input, d_kernel)`, each computed only when requested.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let geo = ConvGeometry::infer(input.shape(), kernel.shape(), stride, padding)?;
    let (plen, pos) = (geo.patch_len(), geo.positions());
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = geo.out_channels * pos;
    let mut d_in = want_input.then(|| vec![0.0; input.len()]);
    let mut d_k = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut cols = vec![0.0; plen * pos];
    let mut dcols = vec![0.0; plen * pos];
    for b in 0..geo.batch {
        let g = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(dk) = d_k.as_mut() {
            geo.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(geo.out_channels, pos, plen, g, false, &cols, true, dk, 1.0);
        }
        if let Some(di) = d_in.as_mut() {
            gemm(
                plen,
                geo.out_channels,
                pos,
                kernel.data(),
                true,
                g,
                false,
                &mut dcols,
                0.0,
            );
            geo.col2im(&dcols, &mut di[b * in_len..(b + 1) * in_len]);
        }
    }
    Ok((d_in, d_k))
}

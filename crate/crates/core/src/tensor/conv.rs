//! 3D cross-correlation lowered to im2col + GEMM.

use super::Scalar;
use crate::error::{Error, Result};

/// Output extent along one axis, or `None` when the kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dGeometry {
    /// Validates shapes of `input` ([C,D,H,W] or [B,C,D,H,W]) and `kernel` ([Cout,Cin,k,k,k]).
    pub fn infer(
        input: &[usize],
        kernel: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, rest) = match input.len() {
            4 => (1, input),
            5 => (input[0], &input[1..]),
            _ => {
                return Err(Error::invalid(
                    "conv3d",
                    format!("input must be [C,D,H,W] or [B,C,D,H,W], got {:?}", input),
                ))
            }
        };
        if kernel.len() != 5 {
            return Err(Error::invalid(
                "conv3d",
                format!("kernel must be [Cout,Cin,k,k,k], got {:?}", kernel),
            ));
        }
        let k = kernel[2];
        if kernel[3] != k {
            return Err(Error::Shape { op: "conv3d", axis: 3, expected: k, actual: kernel[3] });
        }
        if kernel[4] != k {
            return Err(Error::Shape { op: "conv3d", axis: 4, expected: k, actual: kernel[4] });
        }
        if k.is_multiple_of(2) {
            return Err(Error::invalid("conv3d", format!("kernel extent {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d", "stride must be >= 1"));
        }
        let channel_axis = input.len() - 4;
        if rest[0] != kernel[1] {
            return Err(Error::Shape {
                op: "conv3d",
                axis: channel_axis,
                expected: kernel[1],
                actual: rest[0],
            });
        }
        if let Some(b) = bias {
            if b.len() != 1 || b[0] != kernel[0] {
                return Err(Error::Shape {
                    op: "conv3d",
                    axis: 0,
                    expected: kernel[0],
                    actual: b.first().copied().unwrap_or(0),
                });
            }
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output_extent(rest[1 + a], k, stride, pad).ok_or_else(|| {
                Error::invalid(
                    "conv3d",
                    format!(
                        "axis {} extent {} too small for kernel {} with pad {}",
                        channel_axis + 1 + a,
                        rest[1 + a],
                        k,
                        pad
                    ),
                )
            })?;
        }
        Ok(Self {
            batch,
            c_in: rest[0],
            c_out: kernel[0],
            input: [rest[1], rest[2], rest[3]],
            output,
            k,
            stride,
            pad,
        })
    }

    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the column matrix: `c_in * k^3`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    /// Visits contiguous runs of in-bounds taps as `(column start, input start, length)`;
    /// along a run the column index advances by 1 and the input index by the stride.
    /// Column matrix layout is `[patch_len, batch * out_volume]`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let p = self.out_volume();
        let bp = self.batch * p;
        let k = self.k;
        let s = self.stride as isize;
        let pad = self.pad as isize;
        let valid = |kk: usize, n: usize, on: usize| -> (usize, usize) {
            // o with 0 <= o*s + kk - pad < n
            let off = kk as isize - pad;
            let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
            let hi = ((n as isize - 1 - off).div_euclid(s) + 1).clamp(0, on as isize);
            (lo.min(on as isize) as usize, hi.max(lo) as usize)
        };
        for ci in 0..self.c_in {
            for kz in 0..k {
                let (z0, z1) = valid(kz, d, od);
                for ky in 0..k {
                    let (y0, y1) = valid(ky, h, oh);
                    for kx in 0..k {
                        let (x0, x1) = valid(kx, w, ow);
                        if x1 <= x0 {
                            continue;
                        }
                        let row = ((ci * k + kz) * k + ky) * k + kx;
                        for b in 0..self.batch {
                            let in_base = (b * self.c_in + ci) * d * h * w;
                            let col_base = row * bp + b * p;
                            for oz in z0..z1 {
                                let iz = (oz as isize * s + kz as isize - pad) as usize;
                                for oy in y0..y1 {
                                    let iy = (oy as isize * s + ky as isize - pad) as usize;
                                    let ix = (x0 as isize * s + kx as isize - pad) as usize;
                                    f(col_base + (oz * oh + oy) * ow + x0, in_base + (iz * h + iy) * w + ix, x1 - x0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.patch_len() * self.batch * self.out_volume()];
        let s = self.stride;
        self.for_each_run(|c, i, n| {
            if s == 1 {
                cols[c..c + n].copy_from_slice(&input[i..i + n]);
            } else {
                for (t, dst) in cols[c..c + n].iter_mut().enumerate() {
                    *dst = input[i + t * s];
                }
            }
        });
        cols
    }

    pub(crate) fn col2im_accumulate<T: Scalar>(&self, cols: &[T], grad_input: &mut [T]) {
        let s = self.stride;
        self.for_each_run(|c, i, n| {
            for t in 0..n {
                grad_input[i + t * s] = grad_input[i + t * s] + cols[c + t];
            }
        });
    }

    /// Output laid out as `[batch, c_out, out_volume]`.
    pub(crate) fn forward<T: Scalar>(&self, cols: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
        let p = self.out_volume();
        let bp = self.batch * p;
        let kl = self.patch_len();
        let mut out = vec![T::zero(); self.batch * self.c_out * p];
        for b in 0..self.batch {
            let block = &mut out[b * self.c_out * p..(b + 1) * self.c_out * p];
            if let Some(bias) = bias {
                for (co, chunk) in block.chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bias[co]);
                }
            }
            T::gemm(
                self.c_out,
                kl,
                p,
                T::one(),
                kernel,
                (kl as isize, 1),
                &cols[b * p..],
                (bp as isize, 1),
                if bias.is_some() { T::one() } else { T::zero() },
                block,
                (p as isize, 1),
            );
        }
        out
    }

    pub(crate) fn backward_kernel<T: Scalar>(&self, cols: &[T], grad_out: &[T], grad_kernel: &mut [T]) {
        let p = self.out_volume();
        let bp = self.batch * p;
        let kl = self.patch_len();
        for b in 0..self.batch {
            T::gemm(
                self.c_out,
                p,
                kl,
                T::one(),
                &grad_out[b * self.c_out * p..],
                (p as isize, 1),
                &cols[b * p..],
                (1, bp as isize),
                T::one(),
                grad_kernel,
                (kl as isize, 1),
            );
        }
    }

    pub(crate) fn backward_cols<T: Scalar>(&self, kernel: &[T], grad_out: &[T]) -> Vec<T> {
        let p = self.out_volume();
        let bp = self.batch * p;
        let kl = self.patch_len();
        let mut gcols = vec![T::zero(); kl * bp];
        for b in 0..self.batch {
            T::gemm(
                kl,
                self.c_out,
                p,
                T::one(),
                kernel,
                (1, kl as isize),
                &grad_out[b * self.c_out * p..],
                (p as isize, 1),
                T::zero(),
                &mut gcols[b * p..],
                (bp as isize, 1),
            );
        }
        gcols
    }

    pub(crate) fn backward_bias<T: Scalar>(&self, grad_out: &[T], grad_bias: &mut [T]) {
        let p = self.out_volume();
        for b in 0..self.batch {
            for (co, g) in grad_bias.iter_mut().enumerate() {
                let start = (b * self.c_out + co) * p;
                let s: T = grad_out[start..start + p].iter().copied().sum();
                *g = *g + s;
            }
        }
    }
}

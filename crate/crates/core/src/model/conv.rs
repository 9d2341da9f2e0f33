//! 2-D convolution as patch extraction followed by one matrix product.
//!
//! Patch extraction (`im2col`) is a custom op whose backward pass scatters
//! gradients back onto the input; the product is an ordinary matmul, so both
//! passes run through the optimized GEMM path.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::Result;

#[derive(Debug, Clone, Copy)]
struct Im2Col {
    kernel: usize,
    stride: usize,
    padding: usize,
    /// Append a row of ones per image so a bias folds into the product.
    ones_row: bool,
}

impl Im2Col {
    fn rows(&self, c: usize) -> usize {
        c * self.kernel * self.kernel + self.ones_row as usize
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    /// Calls `f(col_offset, input_offset, len, step)` for every run of
    /// output positions along one output row: `len` columns starting at
    /// `col_offset`, reading the input every `step` elements.
    fn visit(&self, dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize)) {
        let [n, c, h, w] = dims;
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (oh, ow) = self.out_hw(h, w);
        let l = oh * ow;
        let rows = self.rows(c);
        for b in 0..n {
            for ch in 0..c {
                let plane = (b * c + ch) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (b * rows + (ch * k + ky) * k + kx) * l;
                        // output columns whose tap lands inside the input
                        let ox_lo = ((p - kx as isize).max(0) as usize).div_ceil(s);
                        let ox_hi = ((w as isize + p - kx as isize - 1).max(-1) + 1) as usize;
                        let ox_hi = ox_hi.div_ceil(s).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let ix = (ox_lo * s + kx) as isize - p;
                            f(row + oy * ow + ox_lo, plane + iy as usize * w + ix as usize, ox_hi - ox_lo, s);
                        }
                    }
                }
            }
        }
    }

    fn forward_slice<T: WithDType>(&self, input: &[T], dims: [usize; 4]) -> Vec<T> {
        let (oh, ow) = self.out_hw(dims[2], dims[3]);
        let (l, rows) = (oh * ow, self.rows(dims[1]));
        let mut out = vec![T::zero(); dims[0] * rows * l];
        if self.ones_row {
            for b in 0..dims[0] {
                out[((b + 1) * rows - 1) * l..(b + 1) * rows * l].fill(T::one());
            }
        }
        self.visit(dims, |col, inp, len, step| {
            if step == 1 {
                out[col..col + len].copy_from_slice(&input[inp..inp + len]);
            } else {
                for (o, i) in out[col..col + len].iter_mut().zip(input[inp..].iter().step_by(step)) {
                    *o = *i;
                }
            }
        });
        out
    }

    fn backward_slice<T: WithDType>(&self, grad: &[T], dims: [usize; 4]) -> Vec<T> {
        let mut acc = vec![T::zero(); dims.iter().product()];
        self.visit(dims, |col, inp, len, step| {
            for (j, g) in grad[col..col + len].iter().enumerate() {
                acc[inp + j * step] += *g;
            }
        });
        acc
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let dims = [n, c, h, w];
        let (oh, ow) = self.out_hw(h, w);
        let shape = Shape::from((n, self.rows(c), oh * ow));
        let (a, b) = layout
            .contiguous_offsets()
            .ok_or(candle_core::Error::RequiresContiguous { op: "im2col" })?;
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(self.forward_slice(&s[a..b], dims)),
            CpuStorage::F64(s) => CpuStorage::F64(self.forward_slice(&s[a..b], dims)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64 only".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let dims = [n, c, h, w];
        let g = grad_res.contiguous()?.flatten_all()?;
        let grad = match arg.dtype() {
            candle_core::DType::F32 => Tensor::from_vec(self.backward_slice(&g.to_vec1::<f32>()?, dims), (n, c, h, w), arg.device())?,
            candle_core::DType::F64 => Tensor::from_vec(self.backward_slice(&g.to_vec1::<f64>()?, dims), (n, c, h, w), arg.device())?,
            dt => return Err(candle_core::Error::Msg(format!("im2col backward: unsupported {dt:?}"))),
        };
        Ok(Some(grad))
    }
}

/// Convolves `x` (N, C, H, W) with `weight` (O, C, k, k) plus an optional
/// per-channel `bias` (O).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    let (o, c, k, _) = weight.dims4()?;
    let op = Im2Col {
        kernel: k,
        stride,
        padding,
        ones_row: bias.is_some(),
    };
    let (oh, ow) = op.out_hw(h, w);
    let cols = x.contiguous()?.apply_op1(op)?;
    let mut wm = weight.reshape((o, c * k * k))?;
    if let Some(b) = bias {
        wm = Tensor::cat(&[&wm, &b.reshape((o, 1))?], 1)?;
    }
    // a stride-0 batch operand is not handled by the CPU matmul, hence the copy
    let y = wm.broadcast_left(n)?.contiguous()?.matmul(&cols)?;
    Ok(y.reshape((n, o, oh, ow))?)
}

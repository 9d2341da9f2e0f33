use candle_core::{Tensor, D};

use super::params::{Init, ParamStore};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        Ok(Conv2d {
            weight: ps.get(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], Init::FanIn(fan_in))?,
            bias: ps.get(&format!("{name}.bias"), &[out_ch], Init::Constant(0.0))?,
            stride,
            padding: kernel / 2,
        })
    }

    /// Same as [`Conv2d::new`] with normal(0, `std`) weights, used for the
    /// small prediction convolutions.
    pub fn with_std(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        std: f64,
    ) -> Result<Self> {
        Ok(Conv2d {
            weight: ps.get(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], Init::Normal(std))?,
            bias: ps.get(&format!("{name}.bias"), &[out_ch], Init::Constant(0.0))?,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        super::conv::conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// Stored as (in, out) so the forward pass is a plain matmul.
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(ps, name, in_dim, out_dim, Init::FanIn(in_dim))
    }

    pub fn with_init(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        Ok(Linear {
            weight: ps.get(&format!("{name}.weight"), &[in_dim, out_dim], init)?,
            bias: ps.get(&format!("{name}.bias"), &[out_dim], Init::Constant(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Embedding {
            table: ps.get(&format!("{name}.weight"), &[rows, dim], Init::Normal(1.0))?,
        })
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, ids.len(), self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }
}

/// Row-wise softmax of a (rows, classes) tensor, returned as f64 vectors.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    if logits.dims2()?.1 == 0 {
        return Ok(vec![Vec::new(); logits.dims2()?.0]);
    }
    let l = logits.to_dtype(candle_core::DType::F64)?;
    let max = l.max_keepdim(D::Minus1)?;
    let e = l.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?.to_vec2()?)
}

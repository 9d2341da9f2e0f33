//! Bilinear RoI pooling ("align" style) as a differentiable tensor op.
//!
//! The op is linear in the feature map: every output cell is a weighted sum of
//! at most `4 * sampling^2` input cells, with weights that depend only on the
//! box coordinates. Box coordinates are constants for autograd.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiAlignConfig {
    pub output_size: usize,
    /// Sample points per bin along each axis.
    pub sampling_ratio: usize,
    /// Box side (sqrt of area) that maps to `canonical_level`.
    pub canonical_size: f64,
    pub canonical_level: usize,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        RoiAlignConfig {
            output_size: 7,
            sampling_ratio: 2,
            canonical_size: 48.0,
            canonical_level: 4,
        }
    }
}

impl RoiAlignConfig {
    /// Pyramid level for a box: `floor(k0 + log2(sqrt(wh) / canonical))`,
    /// clamped to `[min_level, max_level]`.
    pub fn level_for(&self, b: &BBox, min_level: usize, max_level: usize) -> usize {
        let s = b.area().max(1e-12).sqrt();
        let k = (self.canonical_level as f64 + (s / self.canonical_size).log2()).floor();
        (k.max(min_level as f64) as usize).clamp(min_level, max_level)
    }
}

/// (flat input offset within one channel plane, weight)
type Tap = (usize, f64);

#[derive(Debug, Clone)]
pub struct RoiAlign {
    /// (batch index, box in image pixels)
    rois: Vec<(usize, BBox)>,
    spatial_scale: f64,
    output_size: usize,
    sampling_ratio: usize,
}

impl RoiAlign {
    pub fn new(rois: Vec<(usize, BBox)>, spatial_scale: f64, output_size: usize, sampling_ratio: usize) -> Self {
        RoiAlign {
            rois,
            spatial_scale,
            output_size,
            sampling_ratio: sampling_ratio.max(1),
        }
    }

    /// Bilinear taps for every output bin of one RoI, in row-major bin order.
    fn taps(&self, roi: &BBox, height: usize, width: usize) -> Vec<Vec<Tap>> {
        let p = self.output_size;
        let s = self.sampling_ratio;
        // half-pixel offset: pixel centers sit at integer + 0.5 in image space
        let x1 = roi.x1 * self.spatial_scale - 0.5;
        let y1 = roi.y1 * self.spatial_scale - 0.5;
        let x2 = roi.x2 * self.spatial_scale - 0.5;
        let y2 = roi.y2 * self.spatial_scale - 0.5;
        let bin_w = (x2 - x1) / p as f64;
        let bin_h = (y2 - y1) / p as f64;
        let norm = 1.0 / (s * s) as f64;
        let (hf, wf) = (height as f64, width as f64);
        let mut out = Vec::with_capacity(p * p);
        for ph in 0..p {
            for pw in 0..p {
                let mut taps = Vec::with_capacity(4 * s * s);
                for iy in 0..s {
                    let y = y1 + bin_h * (ph as f64 + (iy as f64 + 0.5) / s as f64);
                    for ix in 0..s {
                        let x = x1 + bin_w * (pw as f64 + (ix as f64 + 0.5) / s as f64);
                        if y < -1.0 || y > hf || x < -1.0 || x > wf {
                            continue;
                        }
                        let y = y.max(0.0);
                        let x = x.max(0.0);
                        let (y0, y1i, ly) = if y as usize >= height - 1 {
                            (height - 1, height - 1, 0.0)
                        } else {
                            let y0 = y as usize;
                            (y0, y0 + 1, y - y0 as f64)
                        };
                        let (x0, x1i, lx) = if x as usize >= width - 1 {
                            (width - 1, width - 1, 0.0)
                        } else {
                            let x0 = x as usize;
                            (x0, x0 + 1, x - x0 as f64)
                        };
                        let (hy, hx) = (1.0 - ly, 1.0 - lx);
                        taps.push((y0 * width + x0, hy * hx * norm));
                        taps.push((y0 * width + x1i, hy * lx * norm));
                        taps.push((y1i * width + x0, ly * hx * norm));
                        taps.push((y1i * width + x1i, ly * lx * norm));
                    }
                }
                // neighbouring samples often share pixels on coarse levels
                taps.sort_unstable_by_key(|t| t.0);
                let mut merged: Vec<Tap> = Vec::with_capacity(taps.len());
                for (off, wt) in taps {
                    match merged.last_mut() {
                        Some(last) if last.0 == off => last.1 += wt,
                        _ => merged.push((off, wt)),
                    }
                }
                out.push(merged);
            }
        }
        out
    }

    fn forward_slice<T: WithDType>(&self, input: &[T], dims: &[usize]) -> Vec<T> {
        let (_, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let bins = self.output_size * self.output_size;
        let mut out = vec![T::zero(); self.rois.len() * c * bins];
        for (r, (batch, roi)) in self.rois.iter().enumerate() {
            let taps = self.taps(roi, h, w);
            for ch in 0..c {
                let plane = &input[(batch * c + ch) * h * w..(batch * c + ch + 1) * h * w];
                let dst = &mut out[(r * c + ch) * bins..(r * c + ch + 1) * bins];
                for (bin, t) in taps.iter().enumerate() {
                    let v: f64 = t.iter().map(|&(off, wt)| plane[off].to_f64() * wt).sum();
                    dst[bin] = T::from_f64(v);
                }
            }
        }
        out
    }

    fn backward_slice<T: WithDType>(&self, grad: &[T], dims: &[usize]) -> Vec<T> {
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let bins = self.output_size * self.output_size;
        let mut acc = vec![0f64; n * c * h * w];
        for (r, (batch, roi)) in self.rois.iter().enumerate() {
            let taps = self.taps(roi, h, w);
            for ch in 0..c {
                let base = (batch * c + ch) * h * w;
                let g = &grad[(r * c + ch) * bins..(r * c + ch + 1) * bins];
                for (bin, t) in taps.iter().enumerate() {
                    let gv = g[bin].to_f64();
                    for &(off, wt) in t {
                        acc[base + off] += gv * wt;
                    }
                }
            }
        }
        acc.into_iter().map(T::from_f64).collect()
    }
}

fn contiguous<'a, T: WithDType>(s: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "roi-align" }),
    }
}

impl CustomOp1 for RoiAlign {
    fn name(&self) -> &'static str {
        "roi-align"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let dims = [dims.0, dims.1, dims.2, dims.3];
        let out_shape = Shape::from((self.rois.len(), dims[1], self.output_size, self.output_size));
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(self.forward_slice(contiguous(s, layout)?, &dims)),
            CpuStorage::F64(s) => CpuStorage::F64(self.forward_slice(contiguous(s, layout)?, &dims)),
            _ => return Err(candle_core::Error::Msg("roi-align supports f32 and f64 only".into())),
        };
        Ok((out, out_shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims().to_vec();
        let g = grad_res.contiguous()?;
        let grad = match arg.dtype() {
            candle_core::DType::F32 => {
                let v: Vec<f32> = g.flatten_all()?.to_vec1()?;
                Tensor::from_vec(self.backward_slice(&v, &dims), dims.as_slice(), arg.device())?
            }
            candle_core::DType::F64 => {
                let v: Vec<f64> = g.flatten_all()?.to_vec1()?;
                Tensor::from_vec(self.backward_slice(&v, &dims), dims.as_slice(), arg.device())?
            }
            dt => return Err(candle_core::Error::Msg(format!("roi-align backward: unsupported {dt:?}"))),
        };
        Ok(Some(grad))
    }
}

/// Pools `rois` from `feature` (N, C, H, W) into (R, C, P, P).
pub fn roi_align(
    feature: &Tensor,
    rois: &[(usize, BBox)],
    spatial_scale: f64,
    output_size: usize,
    sampling_ratio: usize,
) -> Result<Tensor> {
    let op = RoiAlign::new(rois.to_vec(), spatial_scale, output_size, sampling_ratio);
    Ok(feature.contiguous()?.apply_op1(op)?)
}

/// Multi-level pooling: each RoI is pooled from its assigned pyramid level and
/// the result is flattened to one (R, C*P*P) row per RoI, in input order.
pub fn pool_pyramid(
    levels: &[Tensor],
    level_ids: &[usize],
    rois: &[(usize, BBox)],
    cfg: &RoiAlignConfig,
) -> Result<Tensor> {
    let min_level = level_ids[0];
    let max_level = *level_ids.last().expect("at least one level");
    let p = cfg.output_size;
    let (_, c, _, _) = levels[0].dims4()?;
    let device = levels[0].device().clone();
    if rois.is_empty() {
        return Ok(Tensor::zeros((0, c * p * p), levels[0].dtype(), &device)?);
    }
    let mut pieces = Vec::new();
    let mut order = Vec::with_capacity(rois.len());
    for (li, &l) in level_ids.iter().enumerate() {
        let mut sel = Vec::new();
        for (i, (_, b)) in rois.iter().enumerate() {
            if cfg.level_for(b, min_level, max_level) == l {
                sel.push(i);
            }
        }
        if sel.is_empty() {
            continue;
        }
        let level_rois: Vec<(usize, BBox)> = sel.iter().map(|&i| rois[i]).collect();
        let scale = 1.0 / (1usize << l) as f64;
        let pooled = roi_align(&levels[li], &level_rois, scale, p, cfg.sampling_ratio)?;
        pieces.push(pooled.reshape((sel.len(), c * p * p))?);
        order.extend(sel);
    }
    let stacked = Tensor::cat(&pieces, 0)?;
    // stacked row k holds roi order[k]; invert to restore input order
    let mut inverse = vec![0u32; rois.len()];
    for (k, &i) in order.iter().enumerate() {
        inverse[i] = k as u32;
    }
    let inverse = Tensor::from_vec(inverse, rois.len(), &device)?;
    Ok(stacked.index_select(&inverse, 0)?)
}

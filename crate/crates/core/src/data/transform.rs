use std::collections::BTreeMap;

use rand::Rng;

use super::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear resampling with half-pixel centres (no antialiasing).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|d| {
                let src = ((d as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        let q = &mut dst[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                let bottom = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                q[oy * out_w + ox] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    Ok(out)
}

/// Random crop from a zero-padded image plus a random horizontal flip,
/// keeping the original size.
pub fn augment<R: Rng + ?Sized>(batch: &Batch, pad: usize, rng: &mut R) -> Batch {
    let [n, c, h, w] = batch.images.shape();
    let mut out = Tensor::zeros(batch.images.shape());
    for s in 0..n {
        let oy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        let src = batch.images.sample(s);
        let dst = out.sample_mut(s);
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + ox;
                    if sx >= 0 && sx < w as isize {
                        dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Batch { images: out, labels: batch.labels.clone() }
}

/// Downsamples one base batch to every target resolution. All outputs share
/// the same underlying samples and labels.
pub fn make_multires_batch(base: &Batch, targets: &[usize]) -> Result<BTreeMap<usize, Batch>> {
    let base_res = base.resolution();
    let mut out = BTreeMap::new();
    for &r in targets {
        if r > base_res {
            return Err(Error::invalid(format!("target resolution {r} above base resolution {base_res}")));
        }
        if out.contains_key(&r) {
            continue;
        }
        let images = resize_bilinear(&base.images, r, r)?;
        out.insert(r, Batch { images, labels: base.labels.clone() });
    }
    Ok(out)
}

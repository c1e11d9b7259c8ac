//! Deterministic resampling. All float-to-byte conversions round half away
//! from zero, which for non-negative samples is `floor(v + 0.5)`.

use rayon::prelude::*;

use super::raster::Raster;
use crate::error::{Error, Result};

/// Halves both dimensions by averaging 2×2 blocks. Odd trailing rows and
/// columns are dropped.
pub fn downsample_2x(img: &Raster) -> Result<Raster> {
    downsample_box(img, 2)
}

/// Integer-factor box downsample: each output pixel is the rounded mean of a
/// `factor`×`factor` block. Output dims are `floor(dim / factor)`.
pub fn downsample_box(img: &Raster, factor: usize) -> Result<Raster> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be >= 1".into()));
    }
    if img.width() < factor || img.height() < factor {
        return Err(Error::DegenerateInput(format!(
            "{}x{} image cannot be downsampled by {factor}",
            img.width(),
            img.height()
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let c = img.channels();
    let (ow, oh) = (img.width() / factor, img.height() / factor);
    let area = (factor * factor) as u32;
    let half = area / 2;
    let mut out = vec![0u8; ow * oh * c];
    out.par_chunks_mut(ow * c).enumerate().for_each(|(oy, orow)| {
        let mut sums = vec![0u32; ow * c];
        for dy in 0..factor {
            let src = img.row(oy * factor + dy);
            for ox in 0..ow {
                let base = ox * factor * c;
                for dx in 0..factor {
                    let p = &src[base + dx * c..base + dx * c + c];
                    for ch in 0..c {
                        sums[ox * c + ch] += p[ch] as u32;
                    }
                }
            }
        }
        for (o, s) in orow.iter_mut().zip(&sums) {
            *o = ((s + half) / area) as u8;
        }
    });
    Raster::from_vec(ow, oh, c, out)
}

/// Resizes to a `target`×`target` square. Each axis independently uses an
/// area-average (box) filter when shrinking and bilinear interpolation with
/// pixel-center alignment when enlarging.
pub fn resize_to(img: &Raster, target: usize) -> Result<Raster> {
    resize(img, target, target)
}

pub fn resize(img: &Raster, out_w: usize, out_h: usize) -> Result<Raster> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::DegenerateInput("resize target must be >= 1".into()));
    }
    let c = img.channels();
    let (w, h) = (img.width(), img.height());
    let xw = axis_weights(w, out_w);
    let yw = axis_weights(h, out_h);

    // Horizontal pass: h rows of out_w pixels.
    let mut tmp = vec![0f32; h * out_w * c];
    tmp.par_chunks_mut(out_w * c).enumerate().for_each(|(y, trow)| {
        let src = img.row(y);
        for (ox, taps) in xw.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0f32;
                for &(sx, wgt) in taps {
                    acc += wgt * src[sx * c + ch] as f32;
                }
                trow[ox * c + ch] = acc;
            }
        }
    });

    // Vertical pass.
    let stride = out_w * c;
    let mut out = vec![0u8; out_h * stride];
    out.par_chunks_mut(stride).enumerate().for_each(|(oy, orow)| {
        let taps = &yw[oy];
        for (i, o) in orow.iter_mut().enumerate() {
            let mut acc = 0f32;
            for &(sy, wgt) in taps {
                acc += wgt * tmp[sy * stride + i];
            }
            *o = round_to_u8(acc);
        }
    });
    Raster::from_vec(out_w, out_h, c, out)
}

#[inline]
pub(crate) fn round_to_u8(v: f32) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Per output index, the (source index, weight) taps along one axis.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    if src == dst {
        return (0..dst).map(|i| vec![(i, 1.0)]).collect();
    }
    if dst < src {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let lo = i as f64 * scale;
                let hi = (i + 1) as f64 * scale;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(src);
                let mut taps: Vec<(usize, f32)> = (first..last)
                    .filter_map(|j| {
                        let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                        (overlap > 0.0).then_some((j, (overlap / scale) as f32))
                    })
                    .collect();
                let total: f32 = taps.iter().map(|t| t.1).sum();
                for t in &mut taps {
                    t.1 /= total;
                }
                taps
            })
            .collect()
    } else {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let j0 = s.floor() as usize;
                let frac = (s - j0 as f64) as f32;
                if frac == 0.0 || j0 + 1 >= src {
                    vec![(j0, 1.0)]
                } else {
                    vec![(j0, 1.0 - frac), (j0 + 1, frac)]
                }
            })
            .collect()
    }
}

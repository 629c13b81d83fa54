//! Resampling, zero-padding and histogram equalization.

use crate::domain::{Image, LandmarkSet};
use crate::error::{Error, Result};

/// Linear resampling to `target_spacing`.
///
/// The new extent per axis is `round(E * s / s')`. Output voxel `i'` samples
/// the input at continuous coordinate `i' * s' / s` (clamped to the last
/// voxel), so a point at coordinate `c` maps to `c * s / s'`.
pub fn resample(img: &Image, target_spacing: &[f64]) -> Result<Image> {
    let dims = img.dims();
    if target_spacing.len() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: target_spacing.len(),
        });
    }
    if target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let mut extents = img.extents().to_vec();
    let mut data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    for a in 0..dims {
        let ratio = target_spacing[a] / img.spacing()[a];
        let old = extents[a];
        let new = (old as f64 * img.spacing()[a] / target_spacing[a]).round();
        if !(new >= 2.0) || new > 1e9 {
            return Err(Error::InvalidConfig(format!(
                "target spacing {} gives extent {new} on axis {a}",
                target_spacing[a]
            )));
        }
        let new = new as usize;
        if new == old && ratio == 1.0 {
            continue;
        }
        data = resample_axis(&data, &extents, a, new, ratio);
        extents[a] = new;
    }
    Image::new(
        extents,
        target_spacing.to_vec(),
        data.into_iter().map(|v| v as f32).collect(),
    )
}

/// Linear interpolation along one axis; separable passes give bi/trilinear.
fn resample_axis(data: &[f64], extents: &[usize], axis: usize, new: usize, ratio: f64) -> Vec<f64> {
    let inner: usize = extents[..axis].iter().product();
    let old = extents[axis];
    let outer: usize = extents[axis + 1..].iter().product();
    let taps: Vec<(usize, usize, f64)> = (0..new)
        .map(|i| {
            let x = (i as f64 * ratio).min((old - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(old - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect();
    let mut out = vec![0.0; inner * new * outer];
    for o in 0..outer {
        for (i, &(i0, i1, t)) in taps.iter().enumerate() {
            let src0 = (o * old + i0) * inner;
            let src1 = (o * old + i1) * inner;
            let dst = (o * new + i) * inner;
            for n in 0..inner {
                let (a, b) = (data[src0 + n], data[src1 + n]);
                out[dst + n] = if t == 0.0 { a } else { a + t * (b - a) };
            }
        }
    }
    out
}

/// Landmark coordinates after resampling from `from` to `to` spacing.
pub fn resample_landmarks(lms: &LandmarkSet, from: &[f64], to: &[f64]) -> LandmarkSet {
    let factors: Vec<f64> = from.iter().zip(to).map(|(f, t)| f / t).collect();
    lms.scaled(&factors)
}

/// Zero-pad to `target` extents with the original centered at offset
/// `floor((target - extent) / 2)`. Returns the padded image and the offset;
/// landmarks move by the offset.
pub fn zero_pad(img: &Image, target: &[usize]) -> Result<(Image, Vec<usize>)> {
    let dims = img.dims();
    if target.len() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: target.len(),
        });
    }
    if target.iter().zip(img.extents()).any(|(t, e)| t < e) {
        return Err(Error::InvalidConfig(format!(
            "pad target {target:?} is smaller than image {:?}",
            img.extents()
        )));
    }
    let offset: Vec<usize> = target
        .iter()
        .zip(img.extents())
        .map(|(t, e)| (t - e) / 2)
        .collect();
    let origin: Vec<isize> = offset.iter().map(|&o| -(o as isize)).collect();
    let out = crate::sampling::crop_at(img, &origin, target)?;
    Ok((out, offset))
}

pub fn pad_landmarks(lms: &LandmarkSet, offset: &[usize]) -> LandmarkSet {
    let delta: Vec<f64> = offset.iter().map(|&o| o as f64).collect();
    lms.translated(&delta)
}

const BINS: usize = 256;

/// Cumulative-histogram equalization over 256 equal-width bins spanning the
/// intensity range. Output lies in `[0, 1]`; a constant image maps to zeros.
pub fn hist_equalize(img: &Image) -> Image {
    let data = img.data();
    let (lo, hi) = data
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mut out = img.clone();
    if !(hi > lo) {
        out.data_mut().iter_mut().for_each(|v| *v = 0.0);
        return out;
    }
    let range = (hi - lo) as f64;
    let bin = |v: f32| -> usize {
        if !v.is_finite() {
            return if v > 0.0 { BINS - 1 } else { 0 };
        }
        (((v - lo) as f64 / range * BINS as f64) as usize).min(BINS - 1)
    };
    let mut cdf = [0usize; BINS];
    for &v in data {
        cdf[bin(v)] += 1;
    }
    for b in 1..BINS {
        cdf[b] += cdf[b - 1];
    }
    let n = data.len();
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let denom = (n - cdf_min) as f64;
    for v in out.data_mut() {
        *v = ((cdf[bin(*v)] - cdf_min) as f64 / denom) as f32;
    }
    out
}

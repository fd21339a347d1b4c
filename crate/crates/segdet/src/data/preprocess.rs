//! Image preprocessing: Otsu thresholding, field-of-view cropping, and
//! resizing to the network's input extent.
//!
//! Raw captures carry a dark border around the useful content. The pipeline
//! finds the global threshold that best splits the 256-bin histogram
//! (maximizing the between-class variance), takes the bounding box of the
//! at-or-above-threshold region as the field of view, crops to it, and
//! resizes — bilinear for images, nearest neighbor with re-binarization for
//! masks, and the matching affine map for box coordinates.

use crate::data::Sample;
use crate::error::{Error, Result};

/// The histogram split maximizing between-class variance; pixels `< T` fall
/// in the dark class, pixels `≥ T` in the bright class. Candidate splits are
/// compared in exact integer arithmetic (the variance ratio is cross
/// multiplied in wide integers), so the winner is not at the mercy of
/// floating-point rounding; equal-variance candidates resolve to the lowest
/// threshold.
pub fn otsu_threshold(gray: &[u8]) -> Result<u8> {
    if gray.is_empty() {
        return Err(Error::data("cannot threshold an empty image"));
    }
    let mut hist = [0u64; 256];
    for v in gray {
        hist[*v as usize] += 1;
    }
    let total: u64 = gray.len() as u64;
    let total_sum: u64 = hist
        .iter()
        .enumerate()
        .map(|(v, n)| v as u64 * n)
        .sum();

    // Between-class variance at split T is w0·w1·(μ0−μ1)², which compares
    // across splits as (m0·w1 − m1·w0)² / (w0·w1) with m the class sums.
    let mut best: Option<(u8, u128, u128)> = None; // (T, numerator, denominator)
    let mut w0: u64 = 0;
    let mut m0: u64 = 0;
    for t in 1..=255u16 {
        w0 += hist[(t - 1) as usize];
        m0 += (t - 1) as u64 * hist[(t - 1) as usize];
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m1 = total_sum - m0;
        let d = m0 as i128 * w1 as i128 - m1 as i128 * w0 as i128;
        let num = d.unsigned_abs().pow(2);
        let den = w0 as u128 * w1 as u128;
        let wins = match &best {
            None => true,
            Some((_, bn, bd)) => match (num.checked_mul(*bd), bn.checked_mul(den)) {
                (Some(lhs), Some(rhs)) => lhs > rhs,
                // Out of u128 range (absurdly large images): compare in f64.
                _ => num as f64 * *bd as f64 > *bn as f64 * den as f64,
            },
        };
        if wins {
            best = Some((t as u8, num, den));
        }
    }
    match best {
        Some((t, _, _)) => Ok(t),
        None => Err(Error::data(
            "image has a single gray level; no threshold separates it",
        )),
    }
}

/// Inclusive bounding box (row0, col0, row1, col1) of pixels `≥ threshold`.
pub fn fov_bounding_box(
    gray: &[u8],
    width: usize,
    height: usize,
    threshold: u8,
) -> Option<(usize, usize, usize, usize)> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..height {
        for c in 0..width {
            if gray[r * width + c] >= threshold {
                bounds = Some(match bounds {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
    }
    bounds
}

/// Bilinear resampling of a `[C, H, W]` buffer, with destination and source
/// pixel centers aligned (so equal extents copy the input exactly).
pub fn resize_bilinear(
    src: &[f64],
    channels: usize,
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; channels * dst_h * dst_w];
    let sy = src_h as f64 / dst_h as f64;
    let sx = src_w as f64 / dst_w as f64;
    for ch in 0..channels {
        let plane = &src[ch * src_h * src_w..(ch + 1) * src_h * src_w];
        for r in 0..dst_h {
            let v = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
            let r0 = v.floor() as usize;
            let r1 = (r0 + 1).min(src_h - 1);
            let fv = v - r0 as f64;
            for c in 0..dst_w {
                let u = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
                let c0 = u.floor() as usize;
                let c1 = (c0 + 1).min(src_w - 1);
                let fu = u - c0 as f64;
                let top = plane[r0 * src_w + c0] * (1.0 - fu) + plane[r0 * src_w + c1] * fu;
                let bottom = plane[r1 * src_w + c0] * (1.0 - fu) + plane[r1 * src_w + c1] * fu;
                out[ch * dst_h * dst_w + r * dst_w + c] = top * (1.0 - fv) + bottom * fv;
            }
        }
    }
    out
}

/// Nearest-neighbor resampling of a single-plane binary mask, re-binarized
/// so the output is exactly {0, 1} whatever rounding does.
pub fn resize_mask_nearest(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dst_h * dst_w];
    let sy = src_h as f64 / dst_h as f64;
    let sx = src_w as f64 / dst_w as f64;
    for r in 0..dst_h {
        let v = (((r as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(src_h - 1);
        for c in 0..dst_w {
            let u = (((c as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(src_w - 1);
            out[r * dst_w + c] = if src[v * src_w + u] >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Crop a sample to its field of view and resize to `target`×`target`.
/// The mask and box coordinates follow the same affine map as the image.
pub fn crop_and_resize(sample: &Sample, target: usize) -> Result<Sample> {
    if target == 0 {
        return Err(Error::config("target size must be positive"));
    }
    let (h, w, ch) = (sample.height, sample.width, sample.channels);

    // Threshold on the channel mean, quantized back to 8 bits.
    let mut gray = Vec::with_capacity(h * w);
    for px in 0..h * w {
        let mut acc = 0.0;
        for c in 0..ch {
            acc += sample.image[c * h * w + px];
        }
        gray.push(((acc / ch as f64) * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let threshold = otsu_threshold(&gray)
        .map_err(|e| Error::data(format!("sample {}: {e}", sample.id)))?;
    let (r0, c0, r1, c1) = fov_bounding_box(&gray, w, h, threshold).ok_or_else(|| {
        Error::data(format!(
            "sample {}: no pixel reaches the field-of-view threshold",
            sample.id
        ))
    })?;
    let crop_h = r1 - r0 + 1;
    let crop_w = c1 - c0 + 1;

    let mut cropped = Vec::with_capacity(ch * crop_h * crop_w);
    for c in 0..ch {
        for r in r0..=r1 {
            let row = &sample.image[c * h * w + r * w + c0..c * h * w + r * w + c1 + 1];
            cropped.extend_from_slice(row);
        }
    }
    let image = resize_bilinear(&cropped, ch, crop_h, crop_w, target, target);

    let mask = match &sample.mask {
        Some(m) => {
            let mut crop = Vec::with_capacity(crop_h * crop_w);
            for r in r0..=r1 {
                crop.extend_from_slice(&m[r * w + c0..r * w + c1 + 1]);
            }
            Some(resize_mask_nearest(&crop, crop_h, crop_w, target, target))
        }
        None => None,
    };

    let sx = target as f64 / crop_w as f64;
    let sy = target as f64 / crop_h as f64;
    let boxes = sample
        .boxes
        .iter()
        .map(|b| crate::dethead::GtBox {
            class: b.class,
            cx: (b.cx - c0 as f64) * sx,
            cy: (b.cy - r0 as f64) * sy,
            w: b.w * sx,
            h: b.h * sy,
        })
        .collect();

    Ok(Sample {
        id: sample.id.clone(),
        channels: ch,
        height: target,
        width: target,
        image,
        mask,
        boxes,
        // A radius is isotropic; use the geometric mean of the axis scales
        // (they are equal whenever the field of view is square).
        disc_radius: sample.disc_radius.map(|r| r * (sx * sy).sqrt()),
    })
}

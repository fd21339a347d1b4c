//! Visualization of predictions: the input image with the predicted mask
//! tinted and the selected boxes stroked, as an interleaved RGB buffer.

use segdet::data::Sample;
use segdet::dethead::DecodedBox;

/// Per-class stroke colors (disc, spot, then a fallback).
fn class_color(class: usize) -> [u8; 3] {
    match class {
        0 => [255, 64, 64],
        1 => [80, 128, 255],
        _ => [255, 224, 64],
    }
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Stroke a one-pixel rectangle outline, clamped to the frame.
fn draw_box(rgb: &mut [u8], width: usize, height: usize, b: &DecodedBox, color: [u8; 3]) {
    let clamp_x = |v: f64| (v.round().max(0.0) as usize).min(width - 1);
    let clamp_y = |v: f64| (v.round().max(0.0) as usize).min(height - 1);
    let (x0, x1) = (clamp_x(b.cx - b.w / 2.0), clamp_x(b.cx + b.w / 2.0));
    let (y0, y1) = (clamp_y(b.cy - b.h / 2.0), clamp_y(b.cy + b.h / 2.0));
    let mut put = |x: usize, y: usize| {
        let at = (y * width + x) * 3;
        rgb[at..at + 3].copy_from_slice(&color);
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

/// Compose the overlay: grayscale (or color) base, mask pixels blended
/// toward green, one stroked rectangle per selected box.
pub fn render(sample: &Sample, mask: &[f64], boxes: &[Option<DecodedBox>]) -> Vec<u8> {
    let (h, w, ch) = (sample.height, sample.width, sample.channels);
    let mut rgb = vec![0u8; h * w * 3];
    for px in 0..h * w {
        for c in 0..3 {
            let plane = if ch == 3 { c } else { 0 };
            rgb[px * 3 + c] = to_byte(sample.image[plane * h * w + px]);
        }
    }
    for (px, m) in mask.iter().enumerate() {
        if *m >= 0.5 {
            let g = &mut rgb[px * 3 + 1];
            *g = ((*g as u16 + 255) / 2) as u8;
        }
    }
    for (class, slot) in boxes.iter().enumerate() {
        if let Some(b) = slot {
            draw_box(&mut rgb, w, h, b, class_color(class));
        }
    }
    rgb
}

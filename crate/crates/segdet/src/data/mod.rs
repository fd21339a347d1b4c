//! Dataset handling: synthetic scene generation, augmentation, on-disk
//! manifests, and deterministic batch streaming.
//!
//! A sample is a single-channel image with up to two annotated structures:
//! a bright "disc" (class 0, the only class with pixel masks) and a dark
//! "spot" (class 1). Ground-truth boxes use a fixed side per class — one
//! quarter of the image extent for discs, one eighth for spots — centered on
//! the structure, in continuous corner-origin coordinates (the center of
//! pixel `(row, col)` is `(col + 0.5, row + 0.5)`).
//!
//! Synthetic raw captures are generated with a dark frame around a textured
//! bright plate, then pushed through the same field-of-view crop used for
//! real data. The frame and plate intensities are kept far enough apart that
//! the crop recovers the plate region exactly, so generated box coordinates
//! are exact, not resampled.

pub mod pnm;
pub mod preprocess;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dethead::GtBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class index of the bright disc (the mask-annotated structure).
pub const DISC_CLASS: usize = 0;
/// Class index of the dark spot.
pub const SPOT_CLASS: usize = 1;
/// Number of object classes.
pub const NUM_CLASSES: usize = 2;

/// Human-readable class name used in reports and logs.
pub fn class_name(class: usize) -> String {
    match class {
        DISC_CLASS => "disc".to_string(),
        SPOT_CLASS => "spot".to_string(),
        other => format!("class{other}"),
    }
}

/// One image with its annotations, pixel values in `[0, 1]`, image layout
/// `[channels, height, width]`, mask layout `[height, width]` with values
/// exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    /// Disc mask; `None` for weakly annotated samples that only carry boxes.
    pub mask: Option<Vec<f64>>,
    pub boxes: Vec<GtBox>,
    /// Disc radius in pixels, for distance normalization at evaluation time.
    /// Carried in the manifest so it survives mask dropping.
    pub disc_radius: Option<f64>,
}

impl Sample {
    /// Ground-truth box side for a class at a given image extent.
    pub fn box_side(class: usize, size: usize) -> f64 {
        match class {
            DISC_CLASS => size as f64 / 4.0,
            _ => size as f64 / 8.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Parameters of the synthetic scene generator. Intensities are 8-bit levels;
/// geometry is in pixels at the preprocessed extent `size`.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Preprocessed square extent; the raw capture is `size + 2·border`.
    pub size: usize,
    /// Dark frame thickness in the raw capture.
    pub border: usize,
    pub disc_radius: (f64, f64),
    pub disc_intensity: (f64, f64),
    pub spot_radius: (f64, f64),
    pub spot_intensity: (f64, f64),
    /// Number of mid-gray blobs that belong to neither class.
    pub distractors: usize,
    pub distractor_radius: (f64, f64),
    /// Amplitude of the sinusoidal plate texture.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Defaults scaled to a target extent (the reference geometry is for 64).
    pub fn for_size(size: usize) -> SceneSpec {
        let s = size as f64 / 64.0;
        SceneSpec {
            size,
            border: (size / 8).max(2),
            disc_radius: (6.5 * s, 9.0 * s),
            disc_intensity: (200.0, 230.0),
            spot_radius: (2.5 * s, 3.5 * s),
            spot_intensity: (30.0, 45.0),
            distractors: 3,
            distractor_radius: (1.5 * s, 3.0 * s),
            texture_amplitude: 20.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::config("scene size must be at least 16"));
        }
        for (name, (lo, hi)) in [
            ("disc_radius", self.disc_radius),
            ("disc_intensity", self.disc_intensity),
            ("spot_radius", self.spot_radius),
            ("spot_intensity", self.spot_intensity),
            ("distractor_radius", self.distractor_radius),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
                return Err(Error::config(format!("invalid {name} range ({lo}, {hi})")));
            }
        }
        let max_margin = self.disc_radius.1.max(self.size as f64 / 8.0) + 1.0;
        if 2.0 * max_margin >= self.size as f64 {
            return Err(Error::config("structures do not fit inside the scene"));
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::for_size(64)
    }
}

fn inside_circle(col: usize, row: usize, cx: f64, cy: f64, radius: f64) -> bool {
    let dx = (col as f64 + 0.5) - cx;
    let dy = (row as f64 + 0.5) - cy;
    dx * dx + dy * dy <= radius * radius
}

/// Generate the raw (framed) capture for scene `index`. Coordinates in the
/// returned boxes are relative to the padded canvas.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = crate::rng::derived(spec.seed, "scene", index as u64);
    let s = spec.size;
    let b = spec.border;
    let padded = s + 2 * b;

    // The draw order below is part of the generator's definition; changing
    // it changes every dataset produced from a given seed.
    let fx = rng.gen_range(0.5..2.0);
    let fy = rng.gen_range(0.5..2.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let disc_rad = rng.gen_range(spec.disc_radius.0..=spec.disc_radius.1);
    let disc_int = rng.gen_range(spec.disc_intensity.0..=spec.disc_intensity.1);
    let spot_rad = rng.gen_range(spec.spot_radius.0..=spec.spot_radius.1);
    let spot_int = rng.gen_range(spec.spot_intensity.0..=spec.spot_intensity.1);
    let mut distractor_shapes = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let rad = rng.gen_range(spec.distractor_radius.0..=spec.distractor_radius.1);
        let int = rng.gen_range(150.0..185.0);
        distractor_shapes.push((rad, int));
    }

    // Placement. Centers stay far enough from the plate edge that both the
    // structure and its fixed-side box are fully inside the field of view.
    let place = |rng: &mut ChaCha8Rng, margin: f64| -> (f64, f64) {
        let lo = b as f64 + margin;
        let hi = (b + s) as f64 - margin;
        (rng.gen_range(lo..hi), rng.gen_range(lo..hi))
    };
    let disc_margin = (s as f64 / 8.0).max(disc_rad + 1.0);
    let (disc_cx, disc_cy) = place(&mut rng, disc_margin);

    let spot_margin = (s as f64 / 16.0).max(spot_rad + 1.0);
    let mut spot_center = None;
    for _ in 0..100 {
        let (x, y) = place(&mut rng, spot_margin);
        let dist = ((x - disc_cx).powi(2) + (y - disc_cy).powi(2)).sqrt();
        if dist >= disc_rad + spot_rad + 4.0 {
            spot_center = Some((x, y));
            break;
        }
    }
    let (spot_cx, spot_cy) = spot_center.ok_or_else(|| {
        Error::data(format!("scene {index}: could not place the spot clear of the disc"))
    })?;

    let mut distractors: Vec<(f64, f64, f64, f64)> = Vec::new(); // (cx, cy, rad, int)
    for (d, (rad, int)) in distractor_shapes.iter().enumerate() {
        let mut placed = false;
        'attempts: for _ in 0..100 {
            let (x, y) = place(&mut rng, rad + 1.0);
            for (ox, oy, orad) in [
                (disc_cx, disc_cy, disc_rad),
                (spot_cx, spot_cy, spot_rad),
            ]
            .into_iter()
            .chain(distractors.iter().map(|t| (t.0, t.1, t.2)))
            {
                if ((x - ox).powi(2) + (y - oy).powi(2)).sqrt() < rad + orad + 3.0 {
                    continue 'attempts;
                }
            }
            distractors.push((x, y, *rad, *int));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::data(format!(
                "scene {index}: could not place distractor {d}"
            )));
        }
    }

    // Rasterize. One noise draw per pixel, row major over the padded canvas.
    let mut image = vec![0.0; padded * padded];
    let mut mask = vec![0.0; padded * padded];
    let mut disc_area = 0usize;
    for r in 0..padded {
        for c in 0..padded {
            let n = 2.0 * rng.gen::<f64>() - 1.0; // in (-1, 1)
            let in_plate = r >= b && r < b + s && c >= b && c < b + s;
            let level = if !in_plate {
                4.0 + 4.0 * n // frame stays in [0, 8]
            } else if inside_circle(c, r, disc_cx, disc_cy, disc_rad) {
                mask[r * padded + c] = 1.0;
                disc_area += 1;
                (disc_int + 5.0 * n).clamp(195.0, 240.0)
            } else if inside_circle(c, r, spot_cx, spot_cy, spot_rad) {
                (spot_int + 3.0 * n).clamp(25.0, 50.0)
            } else if distractors
                .iter()
                .any(|(x, y, rad, _)| inside_circle(c, r, *x, *y, *rad))
            {
                let (_, _, _, int) = *distractors
                    .iter()
                    .find(|(x, y, rad, _)| inside_circle(c, r, *x, *y, *rad))
                    .unwrap();
                (int + 5.0 * n).clamp(145.0, 190.0)
            } else {
                let wave = (std::f64::consts::TAU * (fx * c as f64 + fy * r as f64)
                    / s as f64
                    + phase)
                    .sin();
                (90.0 + spec.texture_amplitude * wave + 10.0 * n).clamp(55.0, 140.0)
            };
            image[r * padded + c] = level / 255.0;
        }
    }

    let boxes = vec![
        GtBox {
            class: DISC_CLASS,
            cx: disc_cx,
            cy: disc_cy,
            w: Sample::box_side(DISC_CLASS, s),
            h: Sample::box_side(DISC_CLASS, s),
        },
        GtBox {
            class: SPOT_CLASS,
            cx: spot_cx,
            cy: spot_cy,
            w: Sample::box_side(SPOT_CLASS, s),
            h: Sample::box_side(SPOT_CLASS, s),
        },
    ];

    Ok(Sample {
        id: format!("scene{index:04}"),
        channels: 1,
        height: padded,
        width: padded,
        image,
        mask: Some(mask),
        boxes,
        disc_radius: Some((disc_area as f64 / std::f64::consts::PI).sqrt()),
    })
}

/// Generate `count` preprocessed scenes: raw captures pushed through the
/// field-of-view crop, with a guard that the crop recovered the plate exactly
/// (so annotations carry no resampling error).
pub fn generate(spec: &SceneSpec, count: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let raw = generate_scene(spec, index)?;
        let cooked = preprocess::crop_and_resize(&raw, spec.size)?;
        let shift = spec.border as f64;
        for (a, b) in raw.boxes.iter().zip(&cooked.boxes) {
            if (a.cx - shift - b.cx).abs() > 1e-9
                || (a.cy - shift - b.cy).abs() > 1e-9
                || (a.w - b.w).abs() > 1e-9
            {
                return Err(Error::data(format!(
                    "scene {index}: field-of-view crop did not recover the plate exactly"
                )));
            }
        }
        out.push(cooked);
    }
    Ok(out)
}

/// Keep masks on the first `keep` samples and drop the rest, turning them
/// into weakly annotated (box-only) samples. Disc radii are retained.
pub fn drop_masks(samples: &mut [Sample], keep: usize) {
    for sample in samples.iter_mut().skip(keep) {
        sample.mask = None;
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Mirror a sample horizontally (columns reversed, `cx ↦ width − cx`).
pub fn hflip(sample: &Sample) -> Sample {
    let (h, w, ch) = (sample.height, sample.width, sample.channels);
    let mut out = sample.clone();
    for c in 0..ch {
        for r in 0..h {
            out.image[c * h * w + r * w..c * h * w + (r + 1) * w].reverse();
        }
    }
    if let Some(mask) = out.mask.as_mut() {
        for r in 0..h {
            mask[r * w..(r + 1) * w].reverse();
        }
    }
    for b in &mut out.boxes {
        b.cx = w as f64 - b.cx;
    }
    out
}

/// Mirror a sample vertically (rows reversed, `cy ↦ height − cy`).
pub fn vflip(sample: &Sample) -> Sample {
    let (h, w, ch) = (sample.height, sample.width, sample.channels);
    let mut out = sample.clone();
    for c in 0..ch {
        let plane = &mut out.image[c * h * w..(c + 1) * h * w];
        for r in 0..h / 2 {
            for col in 0..w {
                plane.swap(r * w + col, (h - 1 - r) * w + col);
            }
        }
    }
    if let Some(mask) = out.mask.as_mut() {
        for r in 0..h / 2 {
            for col in 0..w {
                mask.swap(r * w + col, (h - 1 - r) * w + col);
            }
        }
    }
    for b in &mut out.boxes {
        b.cy = h as f64 - b.cy;
    }
    out
}

/// Shift a sample by whole pixels. The image fills exposed pixels by edge
/// replication, the mask by zero. Boxes translate with the content; callers
/// are responsible for keeping them inside (see [`augment`]).
pub fn translate(sample: &Sample, dx: i64, dy: i64) -> Sample {
    let (h, w, ch) = (sample.height, sample.width, sample.channels);
    let mut out = sample.clone();
    let src_index = |r: i64, c: i64| -> usize {
        let r = r.clamp(0, h as i64 - 1) as usize;
        let c = c.clamp(0, w as i64 - 1) as usize;
        r * w + c
    };
    for c in 0..ch {
        let src = &sample.image[c * h * w..(c + 1) * h * w];
        let dst = &mut out.image[c * h * w..(c + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                dst[r * w + col] = src[src_index(r as i64 - dy, col as i64 - dx)];
            }
        }
    }
    if let Some(mask) = out.mask.as_mut() {
        let src = sample.mask.as_ref().unwrap();
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = (r as i64 - dy, col as i64 - dx);
                mask[r * w + col] = if sr >= 0 && sr < h as i64 && sc >= 0 && sc < w as i64 {
                    src[sr as usize * w + sc as usize]
                } else {
                    0.0
                };
            }
        }
    }
    for b in &mut out.boxes {
        b.cx += dx as f64;
        b.cy += dy as f64;
    }
    out
}

/// Random flips plus a bounded integer shift. The shift is drawn from
/// `±max_shift_fraction` of the extent and clamped per sample so every box
/// (and the mask content) stays fully inside the frame. The draw order —
/// horizontal flip, vertical flip, dx, dy — is fixed.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng, max_shift_fraction: f64) -> Sample {
    let mut out = sample.clone();
    if rng.gen_bool(0.5) {
        out = hflip(&out);
    }
    if rng.gen_bool(0.5) {
        out = vflip(&out);
    }
    let (h, w) = (out.height as f64, out.width as f64);
    let span_x = (w * max_shift_fraction).floor() as i64;
    let span_y = (h * max_shift_fraction).floor() as i64;

    // Headroom on each side from boxes and mask extent.
    let (mut lo_x, mut hi_x) = (-(span_x), span_x);
    let (mut lo_y, mut hi_y) = (-(span_y), span_y);
    for b in &out.boxes {
        lo_x = lo_x.max((-(b.cx - b.w / 2.0)).ceil() as i64);
        hi_x = hi_x.min((w - (b.cx + b.w / 2.0)).floor() as i64);
        lo_y = lo_y.max((-(b.cy - b.h / 2.0)).ceil() as i64);
        hi_y = hi_y.min((h - (b.cy + b.h / 2.0)).floor() as i64);
    }
    if let Some(mask) = &out.mask {
        let wu = out.width;
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (i, v) in mask.iter().enumerate() {
            if *v >= 0.5 {
                let (r, c) = (i / wu, i % wu);
                bounds = Some(match bounds {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
        if let Some((r0, c0, r1, c1)) = bounds {
            lo_x = lo_x.max(-(c0 as i64));
            hi_x = hi_x.min(out.width as i64 - 1 - c1 as i64);
            lo_y = lo_y.max(-(r0 as i64));
            hi_y = hi_y.min(out.height as i64 - 1 - r1 as i64);
        }
    }
    let dx = if lo_x <= hi_x { rng.gen_range(lo_x..=hi_x) } else { 0 };
    let dy = if lo_y <= hi_y { rng.gen_range(lo_y..=hi_y) } else { 0 };
    if dx != 0 || dy != 0 {
        out = translate(&out, dx, dy);
    }
    out
}

// ---------------------------------------------------------------------------
// On-disk datasets
// ---------------------------------------------------------------------------

/// An in-memory dataset, loadable from and savable to a manifest directory.
///
/// Layout: `manifest.tsv` plus `images/{id}.pgm` and `masks/{id}.pgm`. Each
/// manifest line has tab-separated fields
/// `id  image_path  mask_path|-  class,cx,cy,w,h;...|-  [od_radius=<r>]`,
/// with paths relative to the manifest directory and floats in shortest
/// round-trip decimal form.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Dataset {
        Dataset { samples }
    }

    /// Write the dataset under `dir`. Refuses to overwrite an existing
    /// manifest unless `force` is set.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        let manifest_path = dir.join("manifest.tsv");
        if manifest_path.exists() && !force {
            return Err(Error::usage(format!(
                "{} already exists; pass force to overwrite",
                manifest_path.display()
            )));
        }
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut manifest = String::new();
        for sample in &self.samples {
            if !valid_id(sample.id.as_str()) {
                return Err(Error::data(format!(
                    "sample id {:?} contains characters unsafe for file names",
                    sample.id
                )));
            }
            let image_rel = format!("images/{}.pgm", sample.id);
            let bytes: Vec<u8> = sample
                .image
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            pnm::write(
                &dir.join(&image_rel),
                sample.width,
                sample.height,
                sample.channels,
                &bytes,
            )?;
            let mask_rel = match &sample.mask {
                Some(mask) => {
                    let rel = format!("masks/{}.pgm", sample.id);
                    let bytes: Vec<u8> = mask
                        .iter()
                        .map(|v| if *v >= 0.5 { 255 } else { 0 })
                        .collect();
                    pnm::write(&dir.join(&rel), sample.width, sample.height, 1, &bytes)?;
                    rel
                }
                None => "-".to_string(),
            };
            let boxes = if sample.boxes.is_empty() {
                "-".to_string()
            } else {
                sample
                    .boxes
                    .iter()
                    .map(|b| format!("{},{},{},{},{}", b.class, b.cx, b.cy, b.w, b.h))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            write!(manifest, "{}\t{}\t{}\t{}", sample.id, image_rel, mask_rel, boxes).unwrap();
            if let Some(r) = sample.disc_radius {
                write!(manifest, "\tod_radius={r}").unwrap();
            }
            manifest.push('\n');
        }
        fs::write(&manifest_path, manifest)?;
        Ok(())
    }

    /// Load a dataset previously written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.tsv");
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::data(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let at = |msg: &str| Error::data(format!("manifest line {}: {msg}", lineno + 1));
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(4..=5).contains(&fields.len()) {
                return Err(at(&format!("expected 4 or 5 fields, found {}", fields.len())));
            }
            let id = fields[0].to_string();
            let img = pnm::read(&dir.join(fields[1]))
                .map_err(|e| at(&format!("image {}: {e}", fields[1])))?;
            let image: Vec<f64> = img.data.iter().map(|b| *b as f64 / 255.0).collect();
            // PNM stores interleaved channels; deinterleave to planar.
            let image = if img.channels == 1 {
                image
            } else {
                let mut planar = vec![0.0; image.len()];
                let n = img.width * img.height;
                for px in 0..n {
                    for c in 0..img.channels {
                        planar[c * n + px] = image[px * img.channels + c];
                    }
                }
                planar
            };
            let mask = if fields[2] == "-" {
                None
            } else {
                let m = pnm::read(&dir.join(fields[2]))
                    .map_err(|e| at(&format!("mask {}: {e}", fields[2])))?;
                if m.channels != 1 || m.width != img.width || m.height != img.height {
                    return Err(at("mask geometry does not match the image"));
                }
                Some(m.data.iter().map(|b| if *b >= 128 { 1.0 } else { 0.0 }).collect())
            };
            let mut boxes = Vec::new();
            if fields[3] != "-" {
                for part in fields[3].split(';') {
                    let nums: Vec<&str> = part.split(',').collect();
                    if nums.len() != 5 {
                        return Err(at(&format!("box {part:?} needs class,cx,cy,w,h")));
                    }
                    let parse = |s: &str| -> Result<f64> {
                        s.parse::<f64>()
                            .map_err(|_| at(&format!("bad number {s:?} in box field")))
                    };
                    boxes.push(GtBox {
                        class: nums[0]
                            .parse::<usize>()
                            .map_err(|_| at(&format!("bad class {:?}", nums[0])))?,
                        cx: parse(nums[1])?,
                        cy: parse(nums[2])?,
                        w: parse(nums[3])?,
                        h: parse(nums[4])?,
                    });
                }
            }
            let mut disc_radius = None;
            if let Some(extra) = fields.get(4) {
                match extra.strip_prefix("od_radius=") {
                    Some(v) => {
                        disc_radius = Some(v.parse::<f64>().map_err(|_| {
                            at(&format!("bad disc radius {v:?}"))
                        })?);
                    }
                    None => return Err(at(&format!("unrecognized field {extra:?}"))),
                }
            }
            samples.push(Sample {
                id,
                channels: img.channels,
                height: img.height,
                width: img.width,
                image,
                mask,
                boxes,
                disc_radius,
            });
        }
        if samples.is_empty() {
            return Err(Error::data(format!(
                "{} lists no samples",
                manifest_path.display()
            )));
        }
        Ok(Dataset { samples })
    }
}

// ---------------------------------------------------------------------------
// Batch streaming
// ---------------------------------------------------------------------------

/// Deterministic cyclic sampler over `len` indices: each epoch visits every
/// index exactly once in an order reshuffled from `(seed, purpose, epoch)`.
/// Batches that cross an epoch boundary simply continue into the next epoch,
/// so small pools still serve full batches.
#[derive(Debug)]
pub struct BatchStream {
    indices: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
    purpose: String,
}

impl BatchStream {
    pub fn new(len: usize, seed: u64, purpose: &str) -> Result<BatchStream> {
        if len == 0 {
            return Err(Error::usage(format!(
                "cannot stream batches from an empty {purpose} pool"
            )));
        }
        let mut stream = BatchStream {
            indices: (0..len).collect(),
            cursor: 0,
            epoch: 0,
            seed,
            purpose: purpose.to_string(),
        };
        stream.shuffle();
        Ok(stream)
    }

    fn shuffle(&mut self) {
        let mut rng = crate::rng::derived(self.seed, &self.purpose, self.epoch);
        self.indices.shuffle(&mut rng);
    }

    /// Number of completed passes over the pool.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if self.cursor == self.indices.len() {
                self.cursor = 0;
                self.epoch += 1;
                self.shuffle();
            }
            batch.push(self.indices[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

// ---------------------------------------------------------------------------
// Tensor assembly
// ---------------------------------------------------------------------------

/// Stack sample images into a `[B, C, H, W]` tensor. All samples must share
/// one geometry.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::usage("cannot batch zero samples"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(Error::data(format!(
                "sample {} geometry {}x{}x{} differs from {}x{}x{}",
                s.id, s.channels, s.height, s.width, c, h, w
            )));
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::from_vec(&[samples.len(), c, h, w], data)
}

/// Stack masks into a `[B, 1, H, W]` target plus per-image weights that are
/// 1 for mask-annotated samples and 0 for the rest (whose target plane is
/// zero-filled and inert under a zero weight).
pub fn batch_masks(samples: &[&Sample]) -> Result<(Tensor, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::usage("cannot batch zero samples"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut weights = Vec::with_capacity(samples.len());
    for s in samples {
        match &s.mask {
            Some(mask) => {
                data.extend_from_slice(mask);
                weights.push(1.0);
            }
            None => {
                data.extend(std::iter::repeat(0.0).take(h * w));
                weights.push(0.0);
            }
        }
    }
    Ok((Tensor::from_vec(&[samples.len(), 1, h, w], data)?, weights))
}

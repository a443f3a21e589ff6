//! Weak (crop + flip) and strong (color jitter, copy-paste) augmentation.
//!
//! Strong augmentations act on the weak view the teachers already saw. Color
//! jitter is a per-pixel intensity map, so weak-view pseudo-labels stay valid
//! for it unchanged. Copy-paste moves pixels, so it composes the pseudo-labels
//! with the same rectangle.

use rand::Rng;

use crate::data::SegSample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugKind {
    Weak,
    Color,
    CopyPaste,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorParams {
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
}

impl ColorParams {
    pub const IDENTITY: ColorParams = ColorParams {
        brightness: 0.0,
        contrast: 1.0,
        gamma: 1.0,
    };
}

/// Axis-aligned, non-empty pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn new(y0: usize, x0: usize, h: usize, w: usize, size: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("copy-paste rectangle is empty"));
        }
        if y0 + h > size || x0 + w > size {
            return Err(Error::invalid(format!(
                "rectangle {h}x{w} at ({y0}, {x0}) exceeds a {size}x{size} image"
            )));
        }
        Ok(Self { y0, x0, h, w })
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PasteParams {
    pub source: usize,
    pub rect: Rect,
}

/// Everything needed to replay an augmentation bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugRecord {
    pub kind: AugKind,
    pub crop: Crop,
    pub flip: bool,
    pub color: Option<ColorParams>,
    pub paste: Option<PasteParams>,
}

fn weak_record(crop: Crop, flip: bool) -> AugRecord {
    AugRecord {
        kind: AugKind::Weak,
        crop,
        flip,
        color: None,
        paste: None,
    }
}

/// Random `crop_size` window plus a horizontal flip with probability 0.5.
pub fn weak<R: Rng + ?Sized>(sample: &SegSample, crop_size: usize, rng: &mut R) -> Result<(SegSample, AugRecord)> {
    if crop_size == 0 || crop_size > sample.size {
        return Err(Error::invalid(format!(
            "crop size {crop_size} must lie in 1..={}",
            sample.size
        )));
    }
    let slack = sample.size - crop_size;
    let crop = Crop {
        y0: rng.random_range(0..=slack),
        x0: rng.random_range(0..=slack),
        size: crop_size,
    };
    let flip = rng.random_bool(0.5);
    let record = weak_record(crop, flip);
    Ok((apply_weak(sample, &record)?, record))
}

/// Replays the spatial part of `record` on an image and its mask.
pub fn apply_weak(sample: &SegSample, record: &AugRecord) -> Result<SegSample> {
    let Crop { y0, x0, size } = record.crop;
    if y0 + size > sample.size || x0 + size > sample.size {
        return Err(Error::invalid("crop window exceeds the image"));
    }
    let remap = |y: usize, x: usize| {
        let sx = if record.flip { size - 1 - x } else { x };
        (y0 + y) * sample.size + x0 + sx
    };
    let mut image = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            image.push(sample.image[remap(y, x)]);
        }
    }
    let mask = sample.mask.as_ref().map(|m| {
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                out.push(m[remap(y, x)]);
            }
        }
        out
    });
    SegSample::new(sample.id.clone(), size, image, mask)
}

pub fn sample_color_params<R: Rng + ?Sized>(rng: &mut R) -> ColorParams {
    let log_uniform = |rng: &mut R| (rng.random_range(0.8f64.ln()..=1.25f64.ln())).exp();
    ColorParams {
        brightness: rng.random_range(-0.2..=0.2),
        contrast: log_uniform(rng),
        gamma: log_uniform(rng),
    }
}

/// Contrast about the image mean, brightness shift, gamma; clamped to `[0, 1]`.
pub fn apply_color(image: &[f64], p: &ColorParams) -> Vec<f64> {
    let mean = image.iter().sum::<f64>() / image.len().max(1) as f64;
    image
        .iter()
        .map(|&v| {
            let v = (mean + p.contrast * (v - mean) + p.brightness).clamp(0.0, 1.0);
            v.powf(p.gamma).clamp(0.0, 1.0)
        })
        .collect()
}

/// Strong augmentation A1: color jitter.
/// `weak_view` is the record of the weak stage the image came from.
pub fn strong_color<R: Rng + ?Sized>(image: &[f64], weak_view: &AugRecord, rng: &mut R) -> (Vec<f64>, AugRecord) {
    let params = sample_color_params(rng);
    let record = AugRecord {
        kind: AugKind::Color,
        color: Some(params),
        paste: None,
        ..*weak_view
    };
    (apply_color(image, &params), record)
}

/// Hard pseudo-labels for one image: class index, validity, and whether the
/// student (rather than the teacher ensemble) supplied the pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSlice {
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
    pub from_student: Vec<bool>,
}

impl LabelSlice {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Rectangle covering 25%-50% of a `size x size` image, aspect in `[1/2, 2]`.
pub fn sample_paste_rect<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Rect {
    let total = (size * size) as f64;
    loop {
        let area = rng.random_range(0.25..=0.5) * total;
        let aspect = (rng.random_range(0.5f64.ln()..=2f64.ln())).exp();
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / h.max(1) as f64).round() as usize;
        if h == 0 || w == 0 || h > size || w > size {
            continue;
        }
        let frac = (h * w) as f64 / total;
        if !(0.25..=0.5).contains(&frac) {
            continue;
        }
        let y0 = rng.random_range(0..=size - h);
        let x0 = rng.random_range(0..=size - w);
        if let Ok(rect) = Rect::new(y0, x0, h, w, size) {
            return rect;
        }
    }
}

/// Pastes `source` into `target` inside `rect`, for both pixels and labels.
pub fn apply_copypaste(
    target: &[f64],
    source: &[f64],
    target_pl: &LabelSlice,
    source_pl: &LabelSlice,
    size: usize,
    rect: &Rect,
) -> Result<(Vec<f64>, LabelSlice)> {
    let n = size * size;
    if target.len() != n || source.len() != n || target_pl.len() != n || source_pl.len() != n {
        return Err(Error::ShapeMismatch {
            op: "copy-paste",
            lhs: vec![target.len(), target_pl.len()],
            rhs: vec![source.len(), source_pl.len()],
        });
    }
    Rect::new(rect.y0, rect.x0, rect.h, rect.w, size)?;
    let mut image = target.to_vec();
    let mut pl = target_pl.clone();
    for y in rect.y0..rect.y0 + rect.h {
        for x in rect.x0..rect.x0 + rect.w {
            let i = y * size + x;
            image[i] = source[i];
            pl.labels[i] = source_pl.labels[i];
            pl.valid[i] = source_pl.valid[i];
            pl.from_student[i] = source_pl.from_student[i];
        }
    }
    Ok((image, pl))
}

/// Strong augmentation A2: region copy-paste with label composition.
/// `source_index` identifies the source image within the batch.
#[allow(clippy::too_many_arguments)]
pub fn strong_copypaste<R: Rng + ?Sized>(
    target: &[f64],
    source: &[f64],
    target_pl: &LabelSlice,
    source_pl: &LabelSlice,
    size: usize,
    source_index: usize,
    weak_view: &AugRecord,
    rng: &mut R,
) -> Result<(Vec<f64>, LabelSlice, AugRecord)> {
    let rect = sample_paste_rect(size, rng);
    let (image, pl) = apply_copypaste(target, source, target_pl, source_pl, size, &rect)?;
    let record = AugRecord {
        kind: AugKind::CopyPaste,
        color: None,
        paste: Some(PasteParams {
            source: source_index,
            rect,
        }),
        ..*weak_view
    };
    Ok((image, pl, record))
}

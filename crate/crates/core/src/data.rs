//! Synthetic segmentation data, its on-disk formats, and batch sampling.
//!
//! Every image holds one to three non-overlapping shapes (disk, rectangle,
//! ring). Each shape carries a foreground class; the class sets the base
//! intensity, a per-shape offset perturbs it, and a smooth additive field plus
//! Gaussian noise sit on top. Masks are rendered from the stored geometry, so
//! they are exact.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Square grayscale image with an optional class-index mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub size: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub mask: Option<Vec<u8>>,
}

impl SegSample {
    pub fn new(id: impl Into<String>, size: usize, image: Vec<f64>, mask: Option<Vec<u8>>) -> Result<Self> {
        if image.len() != size * size {
            return Err(Error::invalid(format!(
                "image has {} pixels, expected {}x{}",
                image.len(),
                size,
                size
            )));
        }
        if let Some(m) = &mask {
            if m.len() != image.len() {
                return Err(Error::invalid("mask and image sizes differ"));
            }
        }
        Ok(Self {
            id: id.into(),
            size,
            image,
            mask,
        })
    }

    pub fn without_mask(&self) -> Self {
        Self {
            mask: None,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Ring { cy: f64, cx: f64, r_in: f64, r_out: f64 },
}

impl Shape {
    /// Pixel-centre containment test.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Shape::Ring { cy, cx, r_in, r_out } => {
                let d2 = (py - cy).powi(2) + (px - cx).powi(2);
                d2 > r_in * r_in && d2 <= r_out * r_out
            }
        }
    }

    /// Inclusive-exclusive pixel bounding box `(y0, x0, y1, x1)`.
    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Disk { cy, cx, r } | Shape::Ring { cy, cx, r_out: r, .. } => (cy - r, cx - r, cy + r, cx + r),
            Shape::Rect { y0, x0, h, w } => (y0 as f64, x0 as f64, (y0 + h) as f64, (x0 + w) as f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub shape: Shape,
    pub class: u8,
    pub intensity_offset: f64,
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub noise_sigma: f64,
    /// Background level before the smooth field is added.
    pub background_level: f64,
    /// Base intensity of the highest foreground class.
    pub top_level: f64,
    /// Half-range of the uniform per-shape intensity offset.
    pub shape_offset: f64,
    /// Peak-to-centre amplitude of the linear intensity field.
    pub field_amplitude: f64,
    pub max_shapes: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            background_level: 0.2,
            top_level: 0.85,
            shape_offset: 0.06,
            field_amplitude: 0.08,
            max_shapes: 3,
        }
    }
}

impl GeneratorConfig {
    /// Base intensity of `class` (0 is background).
    pub fn class_level(&self, class: u8, num_classes: usize) -> f64 {
        if class == 0 {
            return self.background_level;
        }
        let step = (self.top_level - self.background_level) / (num_classes - 1) as f64;
        self.background_level + step * class as f64
    }
}

/// A sample together with the geometry it was rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub sample: SegSample,
    pub shapes: Vec<PlacedShape>,
}

pub fn render_mask(size: usize, shapes: &[PlacedShape]) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            if let Some(s) = shapes.iter().find(|s| s.shape.contains(y, x)) {
                mask[y * size + x] = s.class;
            }
        }
    }
    mask
}

fn sample_shape<R: Rng>(rng: &mut R, size: usize) -> Shape {
    let s = size as f64;
    let scale = s / 64.0;
    match rng.random_range(0..3) {
        0 => {
            let r = rng.random_range(4.0..12.0) * scale;
            Shape::Disk {
                cy: rng.random_range(r + 1.0..s - r - 1.0),
                cx: rng.random_range(r + 1.0..s - r - 1.0),
                r,
            }
        }
        1 => {
            let h = ((rng.random_range(6.0..20.0) * scale) as usize).max(2);
            let w = ((rng.random_range(6.0..20.0) * scale) as usize).max(2);
            Shape::Rect {
                y0: rng.random_range(1..size - h - 1),
                x0: rng.random_range(1..size - w - 1),
                h,
                w,
            }
        }
        _ => {
            let r_out = rng.random_range(7.0..14.0) * scale;
            let r_in = r_out - rng.random_range(2.5..4.5) * scale;
            Shape::Ring {
                cy: rng.random_range(r_out + 1.0..s - r_out - 1.0),
                cx: rng.random_range(r_out + 1.0..s - r_out - 1.0),
                r_in,
                r_out,
            }
        }
    }
}

fn overlaps(a: &Shape, b: &Shape, gap: f64) -> bool {
    let (ay0, ax0, ay1, ax1) = a.bbox();
    let (by0, bx0, by1, bx1) = b.bbox();
    ay0 < by1 + gap && by0 < ay1 + gap && ax0 < bx1 + gap && bx0 < ax1 + gap
}

fn generate_one(seed: u64, index: usize, size: usize, num_classes: usize, cfg: &GeneratorConfig) -> GeneratedSample {
    let mut rng = substream(seed, Stream::Data, index as u64);
    let target = rng.random_range(1..=cfg.max_shapes);
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(target);
    let mut attempts = 0;
    while shapes.len() < target && attempts < 200 {
        attempts += 1;
        let shape = sample_shape(&mut rng, size);
        if shapes.iter().any(|p| overlaps(&p.shape, &shape, 2.0)) {
            continue;
        }
        shapes.push(PlacedShape {
            shape,
            class: rng.random_range(1..num_classes as u8),
            intensity_offset: rng.random_range(-cfg.shape_offset..=cfg.shape_offset),
        });
    }

    let mask = render_mask(size, &shapes);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.0..=cfg.field_amplitude);
    let (gy, gx) = (amp * angle.sin(), amp * angle.cos());
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("noise sigma is finite and non-negative");
    let s = size as f64;
    let mut image = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let base = match shapes.iter().find(|p| p.shape.contains(y, x)) {
                Some(p) => cfg.class_level(p.class, num_classes) + p.intensity_offset,
                None => cfg.class_level(0, num_classes),
            };
            let field = 2.0 * (gy * ((y as f64 + 0.5) / s - 0.5) + gx * ((x as f64 + 0.5) / s - 0.5));
            image.push((base + field + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    GeneratedSample {
        sample: SegSample {
            id: format!("s{index:05}"),
            size,
            image,
            mask: Some(mask),
        },
        shapes,
    }
}

/// Generates `n` samples with the default generator settings.
pub fn generate_dataset(seed: u64, n: usize, size: usize, num_classes: usize) -> Result<Vec<SegSample>> {
    Ok(generate_with(seed, n, size, num_classes, &GeneratorConfig::default())?
        .into_iter()
        .map(|g| g.sample)
        .collect())
}

/// Sample `i` depends only on `(seed, i)`, never on `n`.
pub fn generate_with(
    seed: u64,
    n: usize,
    size: usize,
    num_classes: usize,
    cfg: &GeneratorConfig,
) -> Result<Vec<GeneratedSample>> {
    if !(2..=5).contains(&num_classes) {
        return Err(Error::invalid(format!("num_classes must be in 2..=5, got {num_classes}")));
    }
    if size < 32 {
        return Err(Error::invalid(format!("image size must be at least 32, got {size}")));
    }
    Ok((0..n).map(|i| generate_one(seed, i, size, num_classes, cfg)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Labeled,
    Unlabeled,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Labeled => "labeled",
            Role::Unlabeled => "unlabeled",
            Role::Test => "test",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Role::Labeled),
            "unlabeled" => Ok(Role::Unlabeled),
            "test" => Ok(Role::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub role: Role,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub size: usize,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids_with_role(&self, role: Role) -> Vec<String> {
        self.samples.iter().filter(|e| e.role == role).map(|e| e.id.clone()).collect()
    }

    /// Replaces every entry's role with the one assigned in `roles`.
    pub fn with_roles(mut self, roles: &[(String, Role)]) -> Result<Self> {
        for e in &mut self.samples {
            e.role = roles
                .iter()
                .find(|(id, _)| id == &e.id)
                .map(|&(_, r)| r)
                .ok_or_else(|| Error::invalid(format!("no role assigned to sample {}", e.id)))?;
        }
        Ok(self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate(path)?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.samples {
            if !seen.insert(&e.id) {
                return Err(Error::format(path, format!("duplicate sample id {}", e.id)));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::format(path, "num_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads every sample referenced by the manifest, resolving paths
    /// relative to `root`.
    pub fn load_samples(&self, root: &Path) -> Result<Vec<(SegSample, Role)>> {
        self.samples
            .iter()
            .map(|e| {
                let image_path = root.join(&e.image_path);
                let (w, h, pixels) = read_pgm(&image_path)?;
                if w != self.size || h != self.size {
                    return Err(Error::format(&image_path, format!("expected {0}x{0} image", self.size)));
                }
                let image = pixels.iter().map(|&p| p as f64 / 255.0).collect();
                let mask = match &e.mask_path {
                    Some(mp) => {
                        let mask_path = root.join(mp);
                        let (mw, mh, m) = read_pgm(&mask_path)?;
                        if mw != w || mh != h {
                            return Err(Error::format(&mask_path, "mask and image sizes differ"));
                        }
                        if let Some(&bad) = m.iter().find(|&&v| v as usize >= self.num_classes) {
                            return Err(Error::format(&mask_path, format!("class index {bad} out of range")));
                        }
                        Some(m)
                    }
                    None => None,
                };
                Ok((SegSample::new(e.id.clone(), self.size, image, mask)?, e.role))
            })
            .collect()
    }
}

fn shuffled_unique(ids: &[String], seed: u64, index: u64) -> Result<Vec<String>> {
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.dedup();
    if order.len() != ids.len() {
        return Err(Error::invalid("sample ids must be unique"));
    }
    order.shuffle(&mut substream(seed, Stream::Data, index));
    Ok(order)
}

fn labeled_count(n_train: usize, labeled_fraction: f64) -> Result<usize> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "labeled fraction must lie in (0, 1), got {labeled_fraction}"
        )));
    }
    let n_labeled = (n_train as f64 * labeled_fraction).round() as usize;
    if n_labeled == 0 {
        return Err(Error::invalid(format!(
            "labeled fraction {labeled_fraction} of {n_train} training samples yields no labeled sample"
        )));
    }
    if n_labeled == n_train {
        return Err(Error::invalid("split leaves no unlabeled samples"));
    }
    Ok(n_labeled)
}

/// Holds out 20% as test, then labels `labeled_fraction` of the remainder,
/// after one seeded shuffle of `ids`.
pub fn split(ids: &[String], labeled_fraction: f64, seed: u64) -> Result<Vec<(String, Role)>> {
    let order = shuffled_unique(ids, seed, u64::MAX)?;
    let n_test = (order.len() as f64 * 0.2).round() as usize;
    let n_labeled = labeled_count(order.len() - n_test, labeled_fraction)?;
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let role = if i < n_test {
                Role::Test
            } else if i < n_test + n_labeled {
                Role::Labeled
            } else {
                Role::Unlabeled
            };
            (id, role)
        })
        .collect())
}

/// Re-draws the labeled subset of a training pool (no test hold-out).
pub fn split_train(train_ids: &[String], labeled_fraction: f64, seed: u64) -> Result<Vec<(String, Role)>> {
    let order = shuffled_unique(train_ids, seed, u64::MAX - 1)?;
    let n_labeled = labeled_count(order.len(), labeled_fraction)?;
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, if i < n_labeled { Role::Labeled } else { Role::Unlabeled }))
        .collect())
}

/// `B` labeled samples and `mu * B` unlabeled samples per iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSpec {
    pub batch: usize,
    pub mu: f64,
}

impl BatchSpec {
    pub fn new(batch: usize, mu: f64) -> Result<Self> {
        let spec = Self { batch, mu };
        spec.unlabeled_batch()?;
        Ok(spec)
    }

    pub fn unlabeled_batch(&self) -> Result<usize> {
        let u = self.mu * self.batch as f64;
        if self.batch == 0 || u < 1.0 || u.fract() != 0.0 {
            return Err(Error::invalid(format!(
                "batch spec needs B >= 1 and an integral mu*B >= 1 (B={}, mu={})",
                self.batch, self.mu
            )));
        }
        Ok(u as usize)
    }
}

/// Sequential without-replacement stream over a pool, reshuffled per epoch.
/// The permutation of epoch `e` is a pure function of `(seed, tag, e)`.
#[derive(Clone, Debug)]
pub struct PoolStream {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    seed: u64,
    tag: u64,
}

impl PoolStream {
    pub fn new(pool: Vec<usize>, seed: u64, tag: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("cannot sample from an empty pool"));
        }
        let mut s = Self {
            order: Vec::new(),
            pool,
            pos: 0,
            epoch: 0,
            seed,
            tag,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = self.pool.clone();
        let index = (self.tag << 32) ^ self.epoch as u64;
        self.order.shuffle(&mut substream(self.seed, Stream::Data, index));
        self.pos = 0;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    /// Next `k` items with the epoch each was drawn in. A batch that runs past
    /// the end of an epoch continues into the next epoch's permutation.
    pub fn take(&mut self, k: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push((self.order[self.pos], self.epoch));
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batches {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Unlabeled-pool epoch of each entry in `unlabeled`.
    pub unlabeled_epochs: Vec<usize>,
}

/// Draws labeled and unlabeled batches from independent streams. One epoch is
/// one pass over the unlabeled pool.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    spec: BatchSpec,
    labeled: PoolStream,
    unlabeled: PoolStream,
}

impl BatchSampler {
    pub fn new(labeled: Vec<usize>, unlabeled: Vec<usize>, spec: BatchSpec, seed: u64) -> Result<Self> {
        spec.unlabeled_batch()?;
        Ok(Self {
            spec,
            labeled: PoolStream::new(labeled, seed, 1)?,
            unlabeled: PoolStream::new(unlabeled, seed, 2)?,
        })
    }

    /// Iterations per epoch of the unlabeled pool, rounded up.
    pub fn epoch_iters(&self) -> usize {
        let u = self.spec.unlabeled_batch().expect("validated in new");
        self.unlabeled.pool_len().div_ceil(u)
    }

    pub fn next_batches(&mut self) -> Batches {
        let u = self.spec.unlabeled_batch().expect("validated in new");
        let labeled = self.labeled.take(self.spec.batch).into_iter().map(|(i, _)| i).collect();
        let (unlabeled, unlabeled_epochs) = self.unlabeled.take(u).into_iter().unzip();
        Batches {
            labeled,
            unlabeled,
            unlabeled_epochs,
        }
    }
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::invalid("pixel buffer does not match PGM dimensions"));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(path, &bytes)
}

fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format(path, format!("expected P5 magic, found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad header field {s}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = &bytes[i + 1..];
    if body.len() != w * h {
        return Err(Error::format(path, format!("expected {} raster bytes, found {}", w * h, body.len())));
    }
    Ok((w, h, body.to_vec()))
}

pub fn intensity_to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Writes `images/<id>.pgm`, `masks/<id>.pgm` and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[SegSample], roles: &[(String, Role)], num_classes: usize) -> Result<PathBuf> {
    let size = samples.first().map(|s| s.size).unwrap_or(0);
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image_path = format!("images/{}.pgm", s.id);
        let pixels: Vec<u8> = s.image.iter().map(|&v| intensity_to_byte(v)).collect();
        write_pgm(&dir.join(&image_path), s.size, s.size, &pixels)?;
        let mask_path = match &s.mask {
            Some(m) => {
                let p = format!("masks/{}.pgm", s.id);
                write_pgm(&dir.join(&p), s.size, s.size, m)?;
                Some(p)
            }
            None => None,
        };
        let role = roles
            .iter()
            .find(|(id, _)| id == &s.id)
            .map(|&(_, r)| r)
            .ok_or_else(|| Error::invalid(format!("no role for sample {}", s.id)))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            role,
            image_path,
            mask_path,
        });
    }
    let manifest = DatasetManifest {
        num_classes,
        size,
        samples: entries,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

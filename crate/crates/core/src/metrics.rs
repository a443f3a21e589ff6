//! Overlap and surface-distance metrics for label masks.
//!
//! Per-class metrics treat class `c` as a binary mask. Dice and Jaccard are
//! percentages; distances are in pixels.

use crate::error::{Error, Result};

/// `(dice, jaccard)` in percent for class `class`. Two empty masks agree
/// perfectly and score 100.
pub fn dice_jaccard(pred: &[u8], gt: &[u8], class: u8) -> Result<(f64, f64)> {
    same_len(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a == class, b == class);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    Ok(overlap_scores(both, p, g))
}

/// Dice and Jaccard from set sizes `|P n G|`, `|P|`, `|G|`.
pub fn overlap_scores(inter: usize, p: usize, g: usize) -> (f64, f64) {
    if p + g == 0 {
        return (100.0, 100.0);
    }
    let dice = 200.0 * inter as f64 / (p + g) as f64;
    let jaccard = 100.0 * inter as f64 / (p + g - inter) as f64;
    (dice, jaccard)
}

/// Foreground pixels with a 4-neighbour outside the mask; pixels on the image
/// border always count.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize]
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas). `f` uses `INFINITY` for "no site".
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// site. All infinite when there is no site.
pub fn squared_distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Linear interpolation between order statistics at rank `q * (n - 1)`.
/// `sorted` must be non-empty and ascending.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// `(hd95, asd)` over the union of both directed boundary-distance sets.
/// Two empty masks give `(0, 0)`; exactly one empty mask gives `None`.
pub fn surface_distances(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<Option<(f64, f64)>> {
    same_len(pred, gt)?;
    if pred.len() != h * w {
        return Err(Error::invalid(format!("mask of {} pixels is not {h}x{w}", pred.len())));
    }
    let (p_any, g_any) = (pred.iter().any(|&v| v), gt.iter().any(|&v| v));
    match (p_any, g_any) {
        (false, false) => return Ok(Some((0.0, 0.0))),
        (true, true) => {}
        _ => return Ok(None),
    }
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    let (dp, dg) = (squared_distance_transform(&bp, h, w), squared_distance_transform(&bg, h, w));
    let mut dists: Vec<f64> = bp
        .iter()
        .zip(&dg)
        .filter(|(&b, _)| b)
        .map(|(_, d)| d.sqrt())
        .chain(bg.iter().zip(&dp).filter(|(&b, _)| b).map(|(_, d)| d.sqrt()))
        .collect();
    let asd = dists.iter().sum::<f64>() / dists.len() as f64;
    dists.sort_by(f64::total_cmp);
    Ok(Some((percentile_sorted(&dists, 0.95), asd)))
}

fn same_len<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when exactly one of the two masks is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Metrics for every foreground class (`1..num_classes`) of one image.
pub fn class_metrics(pred: &[u8], gt: &[u8], h: usize, w: usize, num_classes: usize) -> Result<Vec<ClassMetrics>> {
    (1..num_classes as u8)
        .map(|c| {
            let (dice, jaccard) = dice_jaccard(pred, gt, c)?;
            let p: Vec<bool> = pred.iter().map(|&v| v == c).collect();
            let g: Vec<bool> = gt.iter().map(|&v| v == c).collect();
            let sd = surface_distances(&p, &g, h, w)?;
            Ok(ClassMetrics {
                class: c,
                dice,
                jaccard,
                hd95: sd.map(|s| s.0),
                asd: sd.map(|s| s.1),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub classes: Vec<ClassMetrics>,
}

/// Mean of one metric over samples; undefined distances are excluded and
/// counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub num_classes: usize,
    pub samples: Vec<SampleMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<()> {
        let classes = class_metrics(pred, gt, h, w, self.num_classes)?;
        self.samples.push(SampleMetrics { id: id.into(), classes });
        Ok(())
    }

    /// Foreground class indices.
    pub fn classes(&self) -> impl Iterator<Item = u8> {
        1..self.num_classes as u8
    }

    /// Aggregate for one foreground class over all samples.
    pub fn class_aggregate(&self, class: u8) -> Aggregate {
        let rows: Vec<&ClassMetrics> = self
            .samples
            .iter()
            .flat_map(|s| s.classes.iter().filter(|m| m.class == class))
            .collect();
        Aggregate {
            dice: mean(rows.iter().map(|m| m.dice)).unwrap_or(f64::NAN),
            jaccard: mean(rows.iter().map(|m| m.jaccard)).unwrap_or(f64::NAN),
            hd95: mean(rows.iter().filter_map(|m| m.hd95)),
            asd: mean(rows.iter().filter_map(|m| m.asd)),
            excluded: rows.iter().filter(|m| m.hd95.is_none()).count(),
        }
    }

    /// Mean over foreground classes of the per-class aggregates. Distances
    /// average only the classes where they are defined.
    pub fn overall(&self) -> Aggregate {
        let per: Vec<Aggregate> = self.classes().map(|c| self.class_aggregate(c)).collect();
        Aggregate {
            dice: mean(per.iter().map(|a| a.dice)).unwrap_or(f64::NAN),
            jaccard: mean(per.iter().map(|a| a.jaccard)).unwrap_or(f64::NAN),
            hd95: mean(per.iter().filter_map(|a| a.hd95)),
            asd: mean(per.iter().filter_map(|a| a.asd)),
            excluded: per.iter().map(|a| a.excluded).sum(),
        }
    }

    pub fn mean_dice(&self) -> f64 {
        self.overall().dice
    }

    pub const CSV_HEADER: [&'static str; 6] = ["sample_id", "class", "dice", "jaccard", "hd95", "asd"];

    /// Per-sample rows, then one `mean` row per class and an `all` row, then
    /// `na_count` rows carrying the number of excluded distance values.
    pub fn csv_rows(&self) -> Vec<[String; 6]> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let mut rows = Vec::new();
        for s in &self.samples {
            for m in &s.classes {
                rows.push([
                    s.id.clone(),
                    m.class.to_string(),
                    m.dice.to_string(),
                    m.jaccard.to_string(),
                    opt(m.hd95),
                    opt(m.asd),
                ]);
            }
        }
        let mut aggregates: Vec<(String, Aggregate)> =
            self.classes().map(|c| (c.to_string(), self.class_aggregate(c))).collect();
        aggregates.push(("all".to_string(), self.overall()));
        for (class, a) in &aggregates {
            rows.push([
                "mean".to_string(),
                class.clone(),
                a.dice.to_string(),
                a.jaccard.to_string(),
                opt(a.hd95),
                opt(a.asd),
            ]);
        }
        for (class, a) in &aggregates {
            let n = a.excluded.to_string();
            rows.push(["na_count".to_string(), class.clone(), String::new(), String::new(), n.clone(), n]);
        }
        rows
    }
}

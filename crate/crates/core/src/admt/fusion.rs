//! Pseudo-label fusion of two teacher distributions.
//!
//! All inputs are per-pixel class distributions laid out `N, C, H, W`, as
//! produced by a channel softmax.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::LabelSlice;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy<T: Real>(dist: &[T]) -> Result<T> {
    let mut h = T::zero();
    for &p in dist {
        if p < T::zero() {
            return Err(Error::NegativeProbability(p.as_f64()));
        }
        if p > T::zero() {
            h -= p * p.log2();
        }
    }
    Ok(h)
}

/// Per-pixel entropy of an `N, C, H, W` distribution tensor, in `N, H, W` order.
pub fn entropy_map<T: Real>(probs: &Tensor<T>) -> Result<Vec<T>> {
    let px = Pixels::new(probs)?;
    let mut buf = vec![T::zero(); px.c];
    (0..px.count()).map(|i| entropy(px.gather(i, &mut buf))).collect()
}

/// Entropy-weighted mixture of two distributions with weights `exp(-H)`.
/// Writes into `out`. Equal inputs come back unchanged.
pub fn entropy_ensemble_pixel<T: Real>(q1: &[T], q2: &[T], out: &mut [T]) -> Result<()> {
    let w1 = (-entropy(q1)?).exp();
    let w2 = (-entropy(q2)?).exp();
    let total = w1 + w2;
    let (a1, a2) = (w1 / total, w2 / total);
    for ((o, &x), &y) in out.iter_mut().zip(q1).zip(q2) {
        *o = a1 * x + a2 * y;
    }
    Ok(())
}

pub fn entropy_ensemble<T: Real>(q1: &Tensor<T>, q2: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("entropy_ensemble", q1, q2)?;
    let p1 = Pixels::new(q1)?;
    let p2 = Pixels::new(q2)?;
    let c = p1.c;
    let (mut b1, mut b2, mut mix) = (vec![T::zero(); c], vec![T::zero(); c], vec![T::zero(); c]);
    let mut out = vec![T::zero(); q1.len()];
    for i in 0..p1.count() {
        entropy_ensemble_pixel(p1.gather(i, &mut b1), p2.gather(i, &mut b2), &mut mix)?;
        p1.scatter(i, &mix, &mut out);
    }
    Tensor::new(q1.shape(), out)
}

/// How the two teachers' distributions become one target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ensembling {
    /// Teacher mean; pixels where the teachers disagree are discarded.
    Drop,
    /// Teacher mean everywhere.
    Avg,
    /// Entropy-weighted mixture everywhere.
    Entropy,
    /// Entropy-weighted mixture, replaced by the student's own prediction on
    /// conflicting pixels where the student is more certain.
    Ccm,
}

impl Ensembling {
    pub fn as_str(self) -> &'static str {
        match self {
            Ensembling::Drop => "drop",
            Ensembling::Avg => "avg",
            Ensembling::Entropy => "entropy",
            Ensembling::Ccm => "ccm",
        }
    }
}

impl fmt::Display for Ensembling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ensembling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(Ensembling::Drop),
            "avg" => Ok(Ensembling::Avg),
            "entropy" => Ok(Ensembling::Entropy),
            "ccm" => Ok(Ensembling::Ccm),
            other => Err(Error::invalid(format!("unknown ensembling {other:?}"))),
        }
    }
}

/// Outcome for a single pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelLabel {
    pub label: u8,
    pub valid: bool,
    pub from_student: bool,
    pub conflict: bool,
}

fn argmax<T: Real>(d: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate().skip(1) {
        if v > d[best] {
            best = i;
        }
    }
    best
}

fn max_of<T: Real>(d: &[T]) -> T {
    d.iter().copied().fold(T::neg_infinity(), T::max)
}

fn check_tau<T: Real>(tau: T) -> Result<()> {
    if !(tau > T::zero() && tau < T::one()) {
        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

/// Fuses one pixel. `scratch` must have one slot per class; `qs` is only read
/// by [`Ensembling::Ccm`].
pub fn fuse_pixel<T: Real>(
    strategy: Ensembling,
    q1: &[T],
    q2: &[T],
    qs: Option<&[T]>,
    tau: T,
    scratch: &mut [T],
) -> Result<PixelLabel> {
    let conflict = argmax(q1) != argmax(q2);
    let half = T::lit(0.5);
    let mean = |out: &mut [T]| {
        for ((o, &a), &b) in out.iter_mut().zip(q1).zip(q2) {
            *o = half * (a + b);
        }
    };
    let mut from_student = false;
    let candidate: &[T] = match strategy {
        Ensembling::Drop | Ensembling::Avg => {
            mean(scratch);
            scratch
        }
        Ensembling::Entropy => {
            entropy_ensemble_pixel(q1, q2, scratch)?;
            scratch
        }
        Ensembling::Ccm => {
            let qs = qs.ok_or_else(|| Error::invalid("ccm fusion needs the student distribution"))?;
            entropy_ensemble_pixel(q1, q2, scratch)?;
            if conflict && entropy(scratch)? > entropy(qs)? {
                from_student = true;
                qs
            } else {
                scratch
            }
        }
    };
    let dropped = strategy == Ensembling::Drop && conflict;
    Ok(PixelLabel {
        label: argmax(candidate) as u8,
        valid: !dropped && max_of(candidate) >= tau,
        from_student,
        conflict,
    })
}

/// Hard pseudo-labels for a batch plus fusion diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
    pub from_student: Vec<bool>,
    /// Fraction of pixels where the two teachers' argmax differ.
    pub conflict_frac: f64,
    /// Fraction of pixels that survive the confidence mask.
    pub retained_frac: f64,
}

impl PseudoLabelBatch {
    fn from_pixels(n: usize, h: usize, w: usize, pixels: &[PixelLabel]) -> Self {
        let total = pixels.len().max(1) as f64;
        Self {
            n,
            h,
            w,
            labels: pixels.iter().map(|p| p.label).collect(),
            valid: pixels.iter().map(|p| p.valid).collect(),
            from_student: pixels.iter().map(|p| p.from_student).collect(),
            conflict_frac: pixels.iter().filter(|p| p.conflict).count() as f64 / total,
            retained_frac: pixels.iter().filter(|p| p.valid).count() as f64 / total,
        }
    }

    /// Labels of image `i`.
    pub fn slice(&self, i: usize) -> LabelSlice {
        let plane = self.h * self.w;
        let r = i * plane..(i + 1) * plane;
        LabelSlice {
            labels: self.labels[r.clone()].to_vec(),
            valid: self.valid[r.clone()].to_vec(),
            from_student: self.from_student[r].to_vec(),
        }
    }

    /// Reassembles a batch from per-image slices, keeping the diagnostics,
    /// which describe the fusion step rather than the final layout.
    pub fn replace_slices(&self, slices: &[LabelSlice]) -> Result<Self> {
        let plane = self.h * self.w;
        if slices.len() != self.n || slices.iter().any(|s| s.len() != plane) {
            return Err(Error::ShapeMismatch {
                op: "pseudo-label slices",
                lhs: vec![self.n, plane],
                rhs: slices.iter().map(LabelSlice::len).collect(),
            });
        }
        let mut out = self.clone();
        out.labels = slices.iter().flat_map(|s| s.labels.iter().copied()).collect();
        out.valid = slices.iter().flat_map(|s| s.valid.iter().copied()).collect();
        out.from_student = slices.iter().flat_map(|s| s.from_student.iter().copied()).collect();
        Ok(out)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Fuses two teachers (and, for CCM, the student) into hard pseudo-labels.
pub fn fuse<T: Real>(
    strategy: Ensembling,
    q1: &Tensor<T>,
    q2: &Tensor<T>,
    qs: Option<&Tensor<T>>,
    tau: T,
) -> Result<PseudoLabelBatch> {
    check_tau(tau)?;
    same_shape("fuse", q1, q2)?;
    if let Some(qs) = qs {
        same_shape("fuse", q1, qs)?;
    }
    let p1 = Pixels::new(q1)?;
    let p2 = Pixels::new(q2)?;
    let ps = qs.map(Pixels::new).transpose()?;
    let c = p1.c;
    let (mut b1, mut b2, mut bs, mut scratch) = (
        vec![T::zero(); c],
        vec![T::zero(); c],
        vec![T::zero(); c],
        vec![T::zero(); c],
    );
    let mut pixels = Vec::with_capacity(p1.count());
    for i in 0..p1.count() {
        let s = match &ps {
            Some(ps) => Some(&*ps.gather(i, &mut bs)),
            None => None,
        };
        pixels.push(fuse_pixel(
            strategy,
            p1.gather(i, &mut b1),
            p2.gather(i, &mut b2),
            s,
            tau,
            &mut scratch,
        )?);
    }
    Ok(PseudoLabelBatch::from_pixels(p1.n, p1.h, p1.w, &pixels))
}

/// Conflict-combating fusion: the entropy-weighted ensemble, except that a
/// pixel where the teachers disagree takes the student's distribution if
/// that is lower-entropy than the ensemble. Pixels whose chosen distribution
/// peaks below `tau` are marked invalid.
pub fn ccm_fuse<T: Real>(q1: &Tensor<T>, q2: &Tensor<T>, qs: &Tensor<T>, tau: T) -> Result<PseudoLabelBatch> {
    fuse(Ensembling::Ccm, q1, q2, Some(qs), tau)
}

/// Thresholded argmax of a single teacher.
pub fn single_teacher_labels<T: Real>(q: &Tensor<T>, tau: T) -> Result<PseudoLabelBatch> {
    check_tau(tau)?;
    let px = Pixels::new(q)?;
    let mut buf = vec![T::zero(); px.c];
    let pixels: Vec<_> = (0..px.count())
        .map(|i| {
            let d = px.gather(i, &mut buf);
            PixelLabel {
                label: argmax(d) as u8,
                valid: max_of(d) >= tau,
                from_student: false,
                conflict: false,
            }
        })
        .collect();
    Ok(PseudoLabelBatch::from_pixels(px.n, px.h, px.w, &pixels))
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Strided per-pixel view of an `N, C, H, W` tensor.
struct Pixels<'a, T> {
    data: &'a [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl<'a, T: Real> Pixels<'a, T> {
    fn new(t: &'a Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c > u8::MAX as usize + 1 {
            return Err(Error::invalid(format!("{c} classes do not fit a u8 label")));
        }
        Ok(Self {
            data: t.data(),
            n,
            c,
            h,
            w,
        })
    }

    fn count(&self) -> usize {
        self.n * self.h * self.w
    }

    fn offset(&self, i: usize) -> (usize, usize) {
        let plane = self.h * self.w;
        ((i / plane) * self.c * plane + i % plane, plane)
    }

    fn gather<'b>(&self, i: usize, buf: &'b mut [T]) -> &'b [T] {
        let (base, plane) = self.offset(i);
        for (ci, b) in buf.iter_mut().enumerate() {
            *b = self.data[base + ci * plane];
        }
        buf
    }

    fn scatter(&self, i: usize, values: &[T], out: &mut [T]) {
        let (base, plane) = self.offset(i);
        for (ci, &v) in values.iter().enumerate() {
            out[base + ci * plane] = v;
        }
    }
}

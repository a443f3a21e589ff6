//! The training loop: one student, up to two EMA teachers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::admt::fusion::{fuse, single_teacher_labels, Ensembling, PseudoLabelBatch};
use crate::admt::loss::{dice_ce_loss, lambda_t, LossWeights};
use crate::admt::rpa::{PeriodSource, RpaState, StrongAug, Teacher, UniformPeriods};
use crate::augment::{strong_color, strong_copypaste, weak, AugRecord};
use crate::data::{BatchSampler, BatchSpec, Batches, SegSample};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{ema_update_in_place, poly_lr, ModelParams, SegModel, Sgd};
use crate::rng::{substream, Stream};
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Labeled data only.
    SupOnly,
    /// Classic mean teacher with T1 and color jitter.
    MtSingleT1,
    /// Classic mean teacher with T2 and copy-paste.
    MtSingleT2,
    /// Two alternating teachers, averaged pseudo-labels.
    AdmtRpaOnly,
    /// Two alternating teachers with a configurable ensembling rule.
    AdmtFull,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::SupOnly,
        Mode::MtSingleT1,
        Mode::MtSingleT2,
        Mode::AdmtRpaOnly,
        Mode::AdmtFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SupOnly => "sup_only",
            Mode::MtSingleT1 => "mt_single_t1",
            Mode::MtSingleT2 => "mt_single_t2",
            Mode::AdmtRpaOnly => "admt_rpa_only",
            Mode::AdmtFull => "admt_full",
        }
    }

    fn alternates(self) -> bool {
        matches!(self, Mode::AdmtRpaOnly | Mode::AdmtFull)
    }

    /// Checks a mode/ensembling pair and fills in the default. Modes without
    /// two teachers take no ensembling; the RPA-only ablation is pinned to
    /// averaging.
    pub fn resolve_ensembling(self, requested: Option<Ensembling>) -> Result<Option<Ensembling>> {
        match (self, requested) {
            (Mode::SupOnly | Mode::MtSingleT1 | Mode::MtSingleT2, None) => Ok(None),
            (Mode::AdmtRpaOnly, None | Some(Ensembling::Avg)) => Ok(Some(Ensembling::Avg)),
            (Mode::AdmtFull, None) => Ok(Some(Ensembling::Ccm)),
            (Mode::AdmtFull, Some(e)) => Ok(Some(e)),
            (mode, Some(e)) => Err(Error::invalid(format!("mode {mode} does not accept ensembling {e}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode {s:?}")))
    }
}

/// Maximum RPA period.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeriodLimit {
    Iters(usize),
    /// Half of one pass over the unlabeled pool, rounded up.
    HalfEpoch,
}

impl PeriodLimit {
    pub fn resolve(self, epoch_iters: usize) -> usize {
        match self {
            PeriodLimit::Iters(n) => n,
            PeriodLimit::HalfEpoch => epoch_iters.div_ceil(2).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Already resolved through [`Mode::resolve_ensembling`].
    pub ensembling: Option<Ensembling>,
    pub batch: BatchSpec,
    /// Side of the square weak-augmentation crop.
    pub crop: usize,
    pub max_iters: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Caps the EMA decay at `1 - 1/(k + 1)` for a teacher's `k`-th update,
    /// so early teachers track the student closely.
    pub ema_warmup: bool,
    pub weights: LossWeights,
    pub t_max: PeriodLimit,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let resolved = self.mode.resolve_ensembling(self.ensembling)?;
        if resolved != self.ensembling {
            return Err(Error::invalid(format!(
                "mode {} needs ensembling {:?}, got {:?}",
                self.mode, resolved, self.ensembling
            )));
        }
        self.batch.unlabeled_batch()?;
        let checks = [
            (self.max_iters > 0, "max_iters must be positive"),
            (self.crop > 0, "crop must be positive"),
            (self.base_lr > 0.0 && self.base_lr.is_finite(), "base_lr must be positive"),
            ((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)"),
            (self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay must be non-negative"),
            ((0.0..=1.0).contains(&self.ema_decay), "ema_decay must lie in [0, 1]"),
            (
                self.weights.lambda_u_max >= 0.0 && self.weights.lambda_u_max.is_finite(),
                "lambda_u_max must be non-negative",
            ),
            (self.weights.tau > 0.0 && self.weights.tau < 1.0, "tau must lie in (0, 1)"),
            (self.t_max != PeriodLimit::Iters(0), "t_max must be at least 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::invalid(*msg)),
            None => Ok(()),
        }
    }
}

/// Per-iteration diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iter: usize,
    pub lr: f64,
    pub lambda_t: f64,
    pub loss_x: f64,
    pub loss_u: f64,
    /// The teacher that received this iteration's EMA update, if any.
    pub active_teacher: Option<Teacher>,
    pub conflict_frac: f64,
    pub retained_frac: f64,
    /// Decay used for the EMA update, if one happened.
    pub ema_decay: Option<f64>,
    /// Which samples the iteration drew.
    pub batches: Batches,
}

impl StepReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "iter",
        "lr",
        "lambda_t",
        "loss_x",
        "loss_u",
        "active_teacher",
        "conflict_frac",
        "retained_frac",
    ];

    pub fn csv_fields(&self) -> [String; 8] {
        [
            self.iter.to_string(),
            self.lr.to_string(),
            self.lambda_t.to_string(),
            self.loss_x.to_string(),
            self.loss_u.to_string(),
            self.active_teacher.map_or("none", Teacher::as_str).to_string(),
            self.conflict_frac.to_string(),
            self.retained_frac.to_string(),
        ]
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: SegModel,
    student: ModelParams<f64>,
    teachers: [ModelParams<f64>; 2],
    ema_updates: [usize; 2],
    sgd: Sgd<f64>,
    rpa: Option<RpaState>,
    sampler: BatchSampler,
    labeled: Vec<SegSample>,
    unlabeled: Vec<SegSample>,
    iter: usize,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("mode", &self.cfg.mode)
            .field("iter", &self.iter)
            .field("rpa", &self.rpa)
            .finish_non_exhaustive()
    }
}

fn teacher_slot(t: Teacher) -> usize {
    match t {
        Teacher::T1 => 0,
        Teacher::T2 => 1,
    }
}

/// Stacks equally sized single-channel images into `N, 1, H, W`.
pub fn image_batch(images: &[&[f64]], size: usize) -> Result<Tensor<f64>> {
    let data: Vec<f64> = images.iter().flat_map(|im| im.iter().copied()).collect();
    Tensor::new(&[images.len(), 1, size, size], data)
}

impl Trainer {
    /// Both teachers start as copies of the student. Unlabeled samples are
    /// stripped of their masks here.
    pub fn new(cfg: TrainConfig, labeled: Vec<SegSample>, unlabeled: &[SegSample], num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if labeled.iter().any(|s| s.mask.is_none()) {
            return Err(Error::invalid("every labeled sample needs a mask"));
        }
        if labeled.iter().chain(unlabeled).any(|s| s.size < cfg.crop) {
            return Err(Error::invalid(format!("crop {} exceeds an image", cfg.crop)));
        }
        let model = SegModel::new(1, num_classes)?;
        let student: ModelParams<f64> = model.init_params(&mut substream(cfg.seed, Stream::Init, 0));
        let sampler = BatchSampler::new(
            (0..labeled.len()).collect(),
            (0..unlabeled.len()).collect(),
            cfg.batch,
            cfg.seed,
        )?;
        let rpa = if cfg.mode.alternates() {
            let t_max = cfg.t_max.resolve(sampler.epoch_iters());
            Some(RpaState::new(t_max, UniformPeriods(substream(cfg.seed, Stream::Rpa, 0)))?)
        } else {
            None
        };
        Ok(Self {
            sgd: Sgd::new(&model, cfg.momentum, cfg.weight_decay),
            teachers: [student.clone(), student.clone()],
            ema_updates: [0, 0],
            student,
            model,
            rpa,
            sampler,
            labeled,
            unlabeled: unlabeled.iter().map(SegSample::without_mask).collect(),
            iter: 0,
            cfg,
        })
    }

    /// Replaces the RPA period source, restarting the schedule from T1.
    pub fn set_period_source(&mut self, source: impl PeriodSource + Send + 'static) -> Result<()> {
        if let Some(rpa) = &self.rpa {
            self.rpa = Some(RpaState::new(rpa.t_max(), source)?);
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn student(&self) -> &ModelParams<f64> {
        &self.student
    }

    pub fn teacher(&self, t: Teacher) -> &ModelParams<f64> {
        &self.teachers[teacher_slot(t)]
    }

    pub fn rpa(&self) -> Option<&RpaState> {
        self.rpa.as_ref()
    }

    pub fn epoch_iters(&self) -> usize {
        self.sampler.epoch_iters()
    }

    /// Iterations completed so far.
    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.max_iters
    }

    fn ema_decay_for(&self, t: Teacher) -> f64 {
        let k = self.ema_updates[teacher_slot(t)];
        if self.cfg.ema_warmup {
            self.cfg.ema_decay.min(1.0 - 1.0 / (k as f64 + 1.0))
        } else {
            self.cfg.ema_decay
        }
    }

    fn probs(&self, params: &ModelParams<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        tensor::softmax_channels(&self.model.forward(params, x)?)
    }

    /// One optimisation step. On error nothing is modified except the batch
    /// and iteration counters, which have already advanced.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::invalid("training already reached max_iters"));
        }
        let iter = self.iter;
        self.iter += 1;
        let crop = self.cfg.crop;
        let batches = self.sampler.next_batches();
        let mut rng = substream(self.cfg.seed, Stream::Aug, iter as u64);

        // Supervised term on weak views of the labeled batch.
        let mut tape = Tape::new();
        let views = batches
            .labeled
            .iter()
            .map(|&i| weak(&self.labeled[i], crop, &mut rng).map(|(s, _)| s))
            .collect::<Result<Vec<_>>>()?;
        let x = image_batch(&views.iter().map(|s| &s.image[..]).collect::<Vec<_>>(), crop)?;
        let targets: Vec<u8> = views
            .iter()
            .flat_map(|s| s.mask.as_deref().unwrap_or_default().iter().copied())
            .collect();
        let (logits, handles_x) = self.model.forward_on_tape(&mut tape, &self.student, &x, true)?;
        let probs = tape.softmax_channels(logits)?;
        let loss_x = dice_ce_loss(&mut tape, probs, &targets, &vec![true; targets.len()])?;

        let lambda = lambda_t(iter, &self.cfg.weights);
        let mut loss = loss_x;
        let mut loss_u = None;
        let mut handles_u = None;
        let mut active = None;
        let (mut conflict_frac, mut retained_frac) = (0.0, 0.0);

        if self.cfg.mode != Mode::SupOnly {
            let weak_views = batches
                .unlabeled
                .iter()
                .map(|&i| weak(&self.unlabeled[i], crop, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let xu = image_batch(&weak_views.iter().map(|(s, _)| &s.image[..]).collect::<Vec<_>>(), crop)?;
            let (teacher, aug) = match (self.cfg.mode, self.rpa.as_mut()) {
                (Mode::MtSingleT1, _) => (Teacher::T1, StrongAug::Color),
                (Mode::MtSingleT2, _) => (Teacher::T2, StrongAug::CopyPaste),
                (_, Some(rpa)) => rpa.tick(),
                (_, None) => unreachable!("alternating modes always carry RPA state"),
            };
            let tau = self.cfg.weights.tau;
            let pl = match self.cfg.ensembling {
                None => single_teacher_labels(&self.probs(self.teacher(teacher), &xu)?, tau)?,
                Some(e) => {
                    let q1 = self.probs(&self.teachers[0], &xu)?;
                    let q2 = self.probs(&self.teachers[1], &xu)?;
                    let qs = match e {
                        Ensembling::Ccm => Some(self.probs(&self.student, &xu)?),
                        _ => None,
                    };
                    fuse(e, &q1, &q2, qs.as_ref(), tau)?
                }
            };
            conflict_frac = pl.conflict_frac;
            retained_frac = pl.retained_frac;
            let records: Vec<AugRecord> = weak_views.iter().map(|(_, r)| *r).collect();
            let images: Vec<&[f64]> = weak_views.iter().map(|(s, _)| &s.image[..]).collect();
            let (strong, pl) = strong_views(aug, &images, &records, pl, crop, &mut rng)?;
            let xs = image_batch(&strong.iter().map(|v| &v[..]).collect::<Vec<_>>(), crop)?;
            let (logits_u, hu) = self.model.forward_on_tape(&mut tape, &self.student, &xs, true)?;
            let probs_u = tape.softmax_channels(logits_u)?;
            let lu = dice_ce_loss(&mut tape, probs_u, &pl.labels, &pl.valid)?;
            let weighted = tape.scale(lu, lambda)?;
            loss = tape.add(loss_x, weighted)?;
            loss_u = Some(lu);
            handles_u = Some(hu);
            active = Some(teacher);
        }

        let loss_x_value = tape.value(loss_x).data()[0];
        let loss_u_value = loss_u.map_or(0.0, |l| tape.value(l).data()[0]);
        let total = tape.value(loss).data()[0];
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at iteration {iter} (loss_x={loss_x_value}, loss_u={loss_u_value}, lambda_t={lambda})"
            )));
        }
        tape.backward(loss)?;
        let mut grads = self.model.collect_grads(&tape, &handles_x)?;
        if let Some(hu) = handles_u {
            let gu = self.model.collect_grads(&tape, &hu)?;
            for (g, &u) in grads.as_mut_slice().iter_mut().zip(gu.as_slice()) {
                *g += u;
            }
        }
        let lr = poly_lr(iter, self.cfg.max_iters, self.cfg.base_lr)?;
        self.sgd.step(&mut self.student, &grads, lr)?;

        let mut ema_decay = None;
        if let Some(t) = active {
            let decay = self.ema_decay_for(t);
            let slot = teacher_slot(t);
            ema_update_in_place(&mut self.teachers[slot], &self.student, decay)?;
            self.ema_updates[slot] += 1;
            ema_decay = Some(decay);
        }

        Ok(StepReport {
            iter,
            lr,
            lambda_t: lambda,
            loss_x: loss_x_value,
            loss_u: loss_u_value,
            active_teacher: active,
            conflict_frac,
            retained_frac,
            ema_decay,
            batches,
        })
    }

    /// Steps until `max_iters`, handing every report to `on_step`.
    pub fn run<E: From<Error>>(
        &mut self,
        mut on_step: impl FnMut(&Trainer, &StepReport) -> std::result::Result<(), E>,
    ) -> std::result::Result<(), E> {
        while !self.is_done() {
            let report = self.step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// Applies the strong augmentation of the active teacher. Copy-paste takes
/// its source from the next image in the batch (cyclically).
fn strong_views<R: rand::Rng + ?Sized>(
    aug: StrongAug,
    images: &[&[f64]],
    records: &[AugRecord],
    pl: PseudoLabelBatch,
    size: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, PseudoLabelBatch)> {
    match aug {
        StrongAug::Color => {
            let out = images
                .iter()
                .zip(records)
                .map(|(im, rec)| strong_color(im, rec, rng).0)
                .collect();
            Ok((out, pl))
        }
        StrongAug::CopyPaste => {
            let n = images.len();
            let mut out = Vec::with_capacity(n);
            let mut slices = Vec::with_capacity(n);
            for i in 0..n {
                let src = (i + 1) % n;
                let (im, labels, _) = strong_copypaste(
                    images[i],
                    images[src],
                    &pl.slice(i),
                    &pl.slice(src),
                    size,
                    src,
                    &records[i],
                    rng,
                )?;
                out.push(im);
                slices.push(labels);
            }
            let pl = pl.replace_slices(&slices)?;
            Ok((out, pl))
        }
    }
}

/// Full-image argmax prediction.
pub fn predict(model: &SegModel, params: &ModelParams<f64>, sample: &SegSample) -> Result<Vec<u8>> {
    let x = image_batch(&[&sample.image], sample.size)?;
    let logits = model.forward(params, &x)?;
    Ok(tensor::argmax_channels(&logits)?.into_iter().map(|c| c as u8).collect())
}

/// Predicts every sample with the given parameters and scores it against its
/// mask.
pub fn evaluate(model: &SegModel, params: &ModelParams<f64>, samples: &[SegSample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut report = MetricReport::new(model.num_classes());
    for s in samples {
        let gt = s
            .mask
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("sample {} has no mask to evaluate against", s.id)))?;
        report.push(s.id.clone(), &predict(model, params, s)?, gt, s.size, s.size)?;
    }
    Ok(report)
}

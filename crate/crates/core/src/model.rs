//! Four-layer fully convolutional segmenter and its parameter plumbing.
//!
//! Parameter layout (stable across versions of the checkpoint format):
//! for each layer in order, the kernel `[cout, cin, 3, 3]` row-major followed
//! by the bias `[cout]`. Layers are `cin -> 16`, `16 -> 16`, `16 -> 16`,
//! `16 -> classes`, with ReLU after all but the last.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

pub const HIDDEN_WIDTH: usize = 16;

const CHECKPOINT_MAGIC: &[u8; 4] = b"ADMT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegModel {
    in_channels: usize,
    num_classes: usize,
}

/// Flat, ordered parameter vector of a [`SegModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T>(Vec<T>);

/// Per-layer `(kernel, bias)` views produced by [`ModelParams::unflatten`].
pub type LayerTensors<T> = Vec<(Tensor<T>, Tensor<T>)>;

impl SegModel {
    pub fn new(in_channels: usize, num_classes: usize) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::invalid("model needs at least one input channel"));
        }
        if num_classes < 2 {
            return Err(Error::invalid(format!("num_classes must be >= 2, got {num_classes}")));
        }
        Ok(Self {
            in_channels,
            num_classes,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(cin, cout)` for each conv layer.
    pub fn layers(&self) -> [(usize, usize); 4] {
        [
            (self.in_channels, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, self.num_classes),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(cin, cout)| cout * cin * 9 + cout).sum()
    }

    /// He-uniform kernels (fan-in `cin * 9`) and zero biases.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams<T> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (cin, cout) in self.layers() {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            flat.extend((0..cout * cin * 9).map(|_| T::lit(rng.random_range(-bound..bound))));
            flat.extend(std::iter::repeat_n(T::zero(), cout));
        }
        ModelParams(flat)
    }

    pub fn zero_params<T: Real>(&self) -> ModelParams<T> {
        ModelParams(vec![T::zero(); self.param_count()])
    }

    fn check_input<T: Real>(&self, image: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = image.dims4()?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "model input channels",
                lhs: vec![self.in_channels],
                rhs: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Inference-only forward pass; returns logits `[N, classes, H, W]`.
    pub fn forward<T: Real>(&self, params: &ModelParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image)?;
        let layers = params.unflatten(self)?;
        let last = layers.len() - 1;
        let mut x = image.clone();
        for (i, (k, b)) in layers.iter().enumerate() {
            x = tensor::conv2d(&x, k, b)?;
            if i != last {
                x = tensor::relu(&x);
            }
        }
        tensor::check_finite("model forward", x.data())?;
        Ok(x)
    }

    /// Forward pass recorded on `tape`. Parameter leaves carry gradients
    /// when `trainable` is set; their handles are returned in layout order.
    pub fn forward_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ModelParams<T>,
        image: &Tensor<T>,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(image)?;
        let layers = params.unflatten(self)?;
        let last = layers.len() - 1;
        let mut x = tape.constant(image.clone());
        let mut handles = Vec::with_capacity(layers.len() * 2);
        for (i, (k, b)) in layers.into_iter().enumerate() {
            let (k, b) = if trainable { (k.with_grad(), b.with_grad()) } else { (k, b) };
            let kv = tape.leaf(k);
            let bv = tape.leaf(b);
            handles.extend([kv, bv]);
            x = tape.conv2d(x, kv, bv)?;
            if i != last {
                x = tape.relu(x)?;
            }
        }
        Ok((x, handles))
    }

    /// Gathers parameter gradients from `tape` into layout order; absent
    /// gradients count as zero.
    pub fn collect_grads<T: Real>(&self, tape: &Tape<T>, handles: &[Var]) -> Result<ModelParams<T>> {
        let mut flat = Vec::with_capacity(self.param_count());
        for &h in handles {
            match tape.grad(h) {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat_n(T::zero(), tape.value(h).len())),
            }
        }
        ModelParams::from_vec(self, flat)
    }
}

impl<T: Real> ModelParams<T> {
    pub fn from_vec(model: &SegModel, flat: Vec<T>) -> Result<Self> {
        if flat.len() != model.param_count() {
            return Err(Error::LayoutMismatch {
                expected: model.param_count(),
                actual: flat.len(),
            });
        }
        Ok(Self(flat))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn unflatten(&self, model: &SegModel) -> Result<LayerTensors<T>> {
        if self.0.len() != model.param_count() {
            return Err(Error::LayoutMismatch {
                expected: model.param_count(),
                actual: self.0.len(),
            });
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(4);
        for (cin, cout) in model.layers() {
            let kn = cout * cin * 9;
            let k = Tensor::new(&[cout, cin, 3, 3], self.0[offset..offset + kn].to_vec())?;
            offset += kn;
            let b = Tensor::new(&[cout], self.0[offset..offset + cout].to_vec())?;
            offset += cout;
            out.push((k, b));
        }
        Ok(out)
    }

    pub fn flatten(layers: &[(Tensor<T>, Tensor<T>)]) -> Self {
        let mut flat = Vec::new();
        for (k, b) in layers {
            flat.extend_from_slice(k.data());
            flat.extend_from_slice(b.data());
        }
        Self(flat)
    }

    fn check_layout(&self, other: &Self) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::LayoutMismatch {
                expected: self.0.len(),
                actual: other.0.len(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `decay * teacher + (1 - decay) * student`, element-wise.
pub fn ema_update<T: Real>(teacher: &ModelParams<T>, student: &ModelParams<T>, decay: T) -> Result<ModelParams<T>> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, decay)?;
    Ok(out)
}

pub fn ema_update_in_place<T: Real>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, decay: T) -> Result<()> {
    teacher.check_layout(student)?;
    if !(decay >= T::zero() && decay <= T::one()) {
        return Err(Error::invalid(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    let keep = T::one() - decay;
    for (t, &s) in teacher.0.iter_mut().zip(&student.0) {
        *t = decay * *t + keep * s;
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay applied to every
/// parameter:
/// `v <- momentum * v + (grad + weight_decay * param)`, `param <- param - lr * v`.
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    velocity: &mut ModelParams<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(velocity)?;
    if lr < T::zero() {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient passed to sgd_step".into()));
    }
    let mut next_v = velocity.0.clone();
    let mut next_p = params.0.clone();
    for ((v, p), &g) in next_v.iter_mut().zip(next_p.iter_mut()).zip(&grads.0) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    if next_p.iter().chain(&next_v).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters after sgd_step".into()));
    }
    params.0 = next_p;
    velocity.0 = next_v;
    Ok(())
}

/// Optimizer state for the student.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    pub velocity: ModelParams<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &SegModel, momentum: T, weight_decay: T) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.zero_params(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: T) -> Result<()> {
        sgd_step(params, grads, &mut self.velocity, lr, self.momentum, self.weight_decay)
    }
}

/// Polynomial decay: `base_lr * (1 - iter / max_iter)^0.9`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(Error::invalid(format!("iter {iter} exceeds max_iter {max_iter}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(0.9))
}

/// Serializes parameters as a 16-byte header (`ADMT`, version u32, count u64,
/// all little-endian) followed by little-endian `f64` values.
pub fn checkpoint_bytes<T: Real>(params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

pub fn write_checkpoint<T: Real>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint<T: Real>(path: &Path, bytes: &[u8], model: &SegModel) -> Result<ModelParams<T>> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing ADMT header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if count != model.param_count() {
        return Err(Error::LayoutMismatch {
            expected: model.param_count(),
            actual: count,
        });
    }
    let body = &bytes[16..];
    if body.len() != count * 8 {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", count * 8, body.len()),
        ));
    }
    let flat = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    ModelParams::from_vec(model, flat)
}

pub fn read_checkpoint<T: Real>(path: &Path, model: &SegModel) -> Result<ModelParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(path, &bytes, model)
}

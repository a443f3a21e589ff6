//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as it is evaluated. Leaves that were
//! created with [`Tensor::with_grad`] receive accumulated gradients when
//! [`Tape::backward`] is called on a scalar node. Nodes whose inputs carry no
//! gradient requirement are skipped during the reverse sweep.
//!
//! ```
//! use admt_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
//! let loss = tape.sum(x).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{self, check_finite, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    Relu(Var),
    Softmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    LnClamped(Var, T),
    Sum(Var),
    SumPerChannel(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients accumulate into it when it was
    /// marked with [`Tensor::with_grad`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Records a constant: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, what: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(what, value.data())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::raw(t.shape(), data)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::raw(ta.shape(), data)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        self.record("conv2d", out, Op::Conv2d { input, kernel, bias }, &[input, kernel, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = tensor::relu(self.value(x));
        self.record("relu", out, Op::Relu(x), &[x])
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_channels(self.value(x))?;
        self.record("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip(a, b, |x, y| x / y);
        self.record("div", out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.map(a, |x| x * s);
        self.record("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.map(a, |x| x + s);
        self.record("add_scalar", out, Op::AddScalar(a, s), &[a])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&mut self, a: Var, floor: T) -> Result<Var> {
        let out = self.map(a, |x| x.max(floor).ln());
        self.record("ln", out, Op::LnClamped(a, floor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum::<T>();
        self.record("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Reduces `N, C, H, W` to a length-`C` vector.
    pub fn sum_per_channel(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, h, w) = t.dims4()?;
        let plane = h * w;
        let mut out = vec![T::zero(); c];
        for ni in 0..n {
            for (ci, o) in out.iter_mut().enumerate() {
                *o += t.data()[(ni * c + ci) * plane..][..plane].iter().copied().sum::<T>();
            }
        }
        let out = Tensor::raw(&[c], out);
        self.record("sum_per_channel", out, Op::SumPerChannel(a), &[a])
    }

    /// Accumulates `d loss / d leaf` into every gradient-carrying leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    check_finite("backward", &g)?;
                    self.nodes[i].value.accumulate_grad(&g);
                }
                Op::Conv2d { input, kernel, bias } => {
                    let dims = tensor::conv_dims(self.value(input), self.value(kernel), self.value(bias))?;
                    if self.nodes[input.0].needs_grad {
                        let gi = tensor::conv2d_grad_input(&g, self.value(kernel), dims);
                        add_into(&mut adj, input, gi);
                    }
                    if self.nodes[kernel.0].needs_grad || self.nodes[bias.0].needs_grad {
                        let (gk, gb) = tensor::conv2d_grad_params(&g, self.value(input), dims);
                        add_into(&mut adj, kernel, gk);
                        add_into(&mut adj, bias, gb);
                    }
                }
                Op::Relu(x) => {
                    let xd = self.value(x).data();
                    let gx = g
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    add_into(&mut adj, x, gx);
                }
                Op::Softmax(x) => {
                    let gx = tensor::softmax_channels_grad(&self.nodes[i].value, &g);
                    add_into(&mut adj, x, gx);
                }
                Op::Add(a, b) => {
                    add_into(&mut adj, a, g.clone());
                    add_into(&mut adj, b, g);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(a).data(), self.value(b).data());
                    let ga = g.iter().zip(bd).map(|(&g, &y)| g * y).collect();
                    let gb = g.iter().zip(ad).map(|(&g, &x)| g * x).collect();
                    add_into(&mut adj, a, ga);
                    add_into(&mut adj, b, gb);
                }
                Op::Div(a, b) => {
                    let (ad, bd) = (self.value(a).data(), self.value(b).data());
                    let ga = g.iter().zip(bd).map(|(&g, &y)| g / y).collect();
                    let gb = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    add_into(&mut adj, a, ga);
                    add_into(&mut adj, b, gb);
                }
                Op::Scale(a, s) => add_into(&mut adj, a, g.iter().map(|&g| g * s).collect()),
                Op::AddScalar(a, _) => add_into(&mut adj, a, g),
                Op::LnClamped(a, floor) => {
                    let ad = self.value(a).data();
                    let ga = g
                        .iter()
                        .zip(ad)
                        .map(|(&g, &x)| if x > floor { g / x } else { T::zero() })
                        .collect();
                    add_into(&mut adj, a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(a).len();
                    add_into(&mut adj, a, vec![g[0]; n]);
                }
                Op::SumPerChannel(a) => {
                    let (n, c, h, w) = self.value(a).dims4()?;
                    let plane = h * w;
                    let mut ga = vec![T::zero(); n * c * plane];
                    for ni in 0..n {
                        for ci in 0..c {
                            ga[(ni * c + ci) * plane..][..plane].iter_mut().for_each(|v| *v = g[ci]);
                        }
                    }
                    add_into(&mut adj, a, ga);
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

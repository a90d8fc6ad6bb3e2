use std::borrow::Cow;
use std::rc::Rc;

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Output shape and per-element source offsets for a broadcast pair.
///
/// Shapes align from the right; a dimension of 1 (or a missing leading
/// dimension) repeats.
struct Broadcast {
    shape: Vec<usize>,
    a_index: Src,
    b_index: Src,
}

/// How an operand maps onto the broadcast output.
enum Src {
    Same,
    /// Operand is a contiguous block of the output dims padded with ones on
    /// both sides; offset is `(i / inner) % n`.
    Block { inner: usize, n: usize },
    Table(Vec<usize>),
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast {
                shape: a.to_vec(),
                a_index: Src::Same,
                b_index: Src::Same,
            });
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut out = vec![1; rank - s.len()];
            out.extend_from_slice(s);
            out
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            shape.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(Error::shape(op, &[a, b])),
            });
        }
        let index_for = |p: &[usize]| -> Src {
            if p == shape.as_slice() {
                return Src::Same;
            }
            let lead = p.iter().take_while(|&&d| d == 1).count();
            let trail = p[lead..].iter().rev().take_while(|&&d| d == 1).count();
            let mid = lead..rank - trail;
            if p[mid.clone()] == shape[mid.clone()] {
                return Src::Block {
                    inner: shape[rank - trail..].iter().product(),
                    n: p.iter().product(),
                };
            }
            let src_strides = Tensor::strides(p);
            let n: usize = shape.iter().product();
            let mut idx = Vec::with_capacity(n);
            let mut counter = vec![0usize; rank];
            for _ in 0..n {
                let mut off = 0;
                for d in 0..rank {
                    if p[d] != 1 {
                        off += counter[d] * src_strides[d];
                    }
                }
                idx.push(off);
                for d in (0..rank).rev() {
                    counter[d] += 1;
                    if counter[d] < shape[d] {
                        break;
                    }
                    counter[d] = 0;
                }
            }
            Src::Table(idx)
        };
        let a_index = index_for(&pa);
        let b_index = index_for(&pb);
        Ok(Broadcast {
            shape,
            a_index,
            b_index,
        })
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Operand values laid out at the full broadcast size.
fn expand<'a>(index: &Src, data: &'a [f64], len: usize) -> Cow<'a, [f64]> {
    match index {
        Src::Same => Cow::Borrowed(data),
        Src::Block { inner, n } => {
            let mut out = Vec::with_capacity(len);
            while out.len() < len {
                for &v in &data[..*n] {
                    out.extend(std::iter::repeat_n(v, *inner));
                }
            }
            Cow::Owned(out)
        }
        Src::Table(idx) => Cow::Owned(idx.iter().map(|&i| data[i]).collect()),
    }
}

/// Sums a full-size gradient back onto a broadcast source.
fn reduce_to(index: &Src, g: Vec<f64>, len: usize) -> Vec<f64> {
    match index {
        Src::Same => g,
        Src::Block { inner: 1, n } => {
            let mut out = vec![0.0; len];
            for chunk in g.chunks(*n) {
                out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
            }
            out
        }
        Src::Block { inner, n } => {
            let mut out = vec![0.0; len];
            for (j, chunk) in g.chunks(*inner).enumerate() {
                out[j % n] += chunk.iter().sum::<f64>();
            }
            out
        }
        Src::Table(idx) => {
            let mut out = vec![0.0; len];
            for (i, v) in g.into_iter().enumerate() {
                out[idx[i]] += v;
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (a, b) = (self.value(), other.value());
        if matches!(kind, BinaryKind::Div) && b.data().contains(&0.0) {
            return Err(Error::DivisionByZero { op });
        }
        let bc = Rc::new(Broadcast::new(op, a.shape(), b.shape())?);
        let n = bc.numel();
        let (ax, bx) = (expand(&bc.a_index, a.data(), n), expand(&bc.b_index, b.data(), n));
        let out: Vec<f64> = match kind {
            BinaryKind::Add => ax.iter().zip(bx.iter()).map(|(x, y)| x + y).collect(),
            BinaryKind::Sub => ax.iter().zip(bx.iter()).map(|(x, y)| x - y).collect(),
            BinaryKind::Mul => ax.iter().zip(bx.iter()).map(|(x, y)| x * y).collect(),
            BinaryKind::Div => ax.iter().zip(bx.iter()).map(|(x, y)| x / y).collect(),
        };
        let value = Tensor::from_parts(bc.shape.clone(), out);
        let (na, nb) = (a.numel(), b.numel());
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let full: Vec<f64> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul => {
                        let bx = expand(&bc.b_index, b.data(), n);
                        g.iter().zip(bx.iter()).map(|(gi, y)| gi * y).collect()
                    }
                    BinaryKind::Div => {
                        let bx = expand(&bc.b_index, b.data(), n);
                        g.iter().zip(bx.iter()).map(|(gi, y)| gi / y).collect()
                    }
                };
                reduce_to(&bc.a_index, full, na)
            });
            let gb = needs[1].then(|| {
                let full: Vec<f64> = match kind {
                    BinaryKind::Add => g.to_vec(),
                    BinaryKind::Sub => g.iter().map(|v| -v).collect(),
                    BinaryKind::Mul => {
                        let ax = expand(&bc.a_index, a.data(), n);
                        g.iter().zip(ax.iter()).map(|(gi, x)| gi * x).collect()
                    }
                    BinaryKind::Div => {
                        let (ax, bx) = (expand(&bc.a_index, a.data(), n), expand(&bc.b_index, b.data(), n));
                        g.iter()
                            .zip(ax.iter().zip(bx.iter()))
                            .map(|(gi, (x, y))| -gi * x / (y * y))
                            .collect()
                    }
                };
                reduce_to(&bc.b_index, full, nb)
            });
            vec![ga, gb]
        }))
    }


    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative given input and output.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        self.tape.record_rc(Rc::clone(&y), &[self], move |g, _| {
            let gx = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g)
                .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Derivative at 0 is taken as 0.
    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(self) -> Var<'t> {
        let x = self.value();
        let s: Vec<f64> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let y = x.data().iter().zip(&s).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        self.tape.record(value, &[self], move |g, _| {
            let gx = g
                .iter()
                .zip(x.data().iter().zip(&s))
                .map(|(gi, (&xi, &si))| gi * si * (1.0 + xi * (1.0 - si)))
                .collect();
            vec![Some(gx)]
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain { op: "log" });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain { op: "sqrt" });
        }
        Ok(self.unary(f64::sqrt, |_, y| 0.5 / y))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    /// Derivative at 0 is taken as 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

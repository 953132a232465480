//! Elementwise, structural and dense-layer operations.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::real::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{Backward, Graph, Real, Tensor, Var};

struct AddOp;
impl<T: Real> Backward<T> for AddOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

pub fn add<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let v = g.value(a).zip_map(g.value(b), |x, y| x + y);
    g.record(v, &[a, b], AddOp)
}

pub fn add_n<T: Real>(g: &mut Graph<T>, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = add(g, acc, x);
    }
    acc
}

struct SubOp;
impl<T: Real> Backward<T> for SubOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.map(|v| -v))]
    }
}

pub fn sub<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let v = g.value(a).zip_map(g.value(b), |x, y| x - y);
    g.record(v, &[a, b], SubOp)
}

struct MulOp;
impl<T: Real> Backward<T> for MulOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![
            n[0].then(|| g.zip_map(x[1], |a, b| a * b)),
            n[1].then(|| g.zip_map(x[0], |a, b| a * b)),
        ]
    }
}

pub fn mul<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let v = g.value(a).zip_map(g.value(b), |x, y| x * y);
    g.record(v, &[a, b], MulOp)
}

struct AffineOp<T>(T);
impl<T: Real> Backward<T> for AffineOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = self.0;
        vec![Some(g.map(|v| v * s))]
    }
}

/// `scale * x + shift`.
pub fn affine<T: Real>(g: &mut Graph<T>, x: Var, scale: T, shift: T) -> Var {
    let v = g.value(x).map(|a| scale * a + shift);
    g.record(v, &[x], AffineOp(scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Softplus,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                T::lit(0.5) * x * (T::one() + tanh_exp(c * (x + a * x * x * x)))
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x` (with output `y`).
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Gelu => {
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let u = c * (x + a * x * x * x);
                let t = tanh_exp(u);
                let du = c * (T::one() + T::lit(3.0) * a * x * x);
                T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// `tanh` through one `exp`. Loses relative accuracy near 0 but keeps
/// absolute error at machine epsilon, which is all `1 + tanh` needs.
fn tanh_exp<T: Real>(u: T) -> T {
    let e = (T::lit(-2.0) * u.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

struct ActOp(Activation);
impl<T: Real> Backward<T> for ActOp {
    fn backward(&self, x: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let a = self.0;
        let d: Vec<T> = x[0]
            .data()
            .iter()
            .zip(y.data())
            .zip(g.data())
            .map(|((&xi, &yi), &gi)| gi * a.derivative(xi, yi))
            .collect();
        vec![Some(Tensor::new(g.shape(), d))]
    }
}

pub fn activation<T: Real>(g: &mut Graph<T>, x: Var, act: Activation) -> Var {
    let v = g.value(x).map(|a| act.apply(a));
    g.record(v, &[x], ActOp(act))
}

pub fn gelu<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    activation(g, x, Activation::Gelu)
}

struct LinearOp {
    rows: usize,
    cin: usize,
    cout: usize,
}
impl<T: Real> Backward<T> for LinearOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (m, k, c) = (self.rows, self.cin, self.cout);
        let gx = n[0].then(|| {
            let mut d = vec![T::zero(); m * k];
            matmul_bt_acc(g.data(), x[1].data(), &mut d, m, c, k);
            Tensor::new(x[0].shape(), d)
        });
        let gw = n[1].then(|| {
            let mut d = vec![T::zero(); k * c];
            matmul_at_acc(x[0].data(), g.data(), &mut d, m, k, c);
            Tensor::new(x[1].shape(), d)
        });
        let gb = n[2].then(|| column_sums(g.data(), c));
        vec![gx, gw, gb]
    }
}

fn column_sums<T: Real>(d: &[T], c: usize) -> Tensor<T> {
    let mut s = vec![T::zero(); c];
    for row in d.chunks_exact(c) {
        for (a, &b) in s.iter_mut().zip(row) {
            *a = *a + b;
        }
    }
    Tensor::new(&[c], s)
}

/// Dense map over the last axis: `x [.., cin] @ w [cin, cout] + b [cout]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let xs = g.value(x);
    let ws = g.value(w).shape();
    assert_eq!(ws.len(), 2, "weight must be 2-d");
    let (cin, cout) = (ws[0], ws[1]);
    assert_eq!(xs.channels(), cin, "linear: input has {} channels, weight expects {cin}", xs.channels());
    let rows = xs.numel() / cin;
    let bias = g.value(b).data();
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    matmul_acc(xs.data(), g.value(w).data(), &mut out, rows, cin, cout);
    let mut shape = xs.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    let v = Tensor::new(&shape, out);
    g.record(v, &[x, w, b], LinearOp { rows, cin, cout })
}

struct ConcatOp {
    widths: Vec<usize>,
}
impl<T: Real> Backward<T> for ConcatOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let total: usize = self.widths.iter().sum();
        let rows = g.numel() / total;
        let mut off = 0;
        let mut out = Vec::with_capacity(x.len());
        for (i, &w) in self.widths.iter().enumerate() {
            if n[i] {
                let mut d = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                }
                out.push(Some(Tensor::new(x[i].shape(), d)));
            } else {
                out.push(None);
            }
            off += w;
        }
        out
    }
}

/// Concatenation along the channel (last) axis.
pub fn concat_channels<T: Real>(g: &mut Graph<T>, xs: &[Var]) -> Var {
    let spatial = g.value(xs[0]).spatial().to_vec();
    let widths: Vec<usize> = xs
        .iter()
        .map(|&v| {
            assert_eq!(g.value(v).spatial(), &spatial[..], "concat: spatial shapes differ");
            g.value(v).channels()
        })
        .collect();
    let total: usize = widths.iter().sum();
    let rows: usize = spatial.iter().product();
    let mut d = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (&v, &w) in xs.iter().zip(&widths) {
            d.extend_from_slice(&g.value(v).data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = spatial;
    shape.push(total);
    g.record(Tensor::new(&shape, d), xs, ConcatOp { widths })
}

struct GatherOp {
    idx: Arc<Vec<u32>>,
    group: usize,
}
impl<T: Real> Backward<T> for GatherOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut d = vec![T::zero(); x[0].numel()];
        let inv = T::one() / T::lit(self.group as f64);
        for (i, &gi) in g.data().iter().enumerate() {
            let gi = gi * inv;
            for &j in &self.idx[i * self.group..(i + 1) * self.group] {
                d[j as usize] = d[j as usize] + gi;
            }
        }
        vec![Some(Tensor::new(x[0].shape(), d))]
    }
}

/// `y[i] = x[idx[i]]` with output `shape`; covers permutation, tiling and
/// rearrangement.
pub fn gather<T: Real>(g: &mut Graph<T>, x: Var, idx: Arc<Vec<u32>>, shape: &[usize]) -> Var {
    group_mean(g, x, idx, 1, shape)
}

/// `y[i] = mean_j x[idx[i * group + j]]`.
pub fn group_mean<T: Real>(g: &mut Graph<T>, x: Var, idx: Arc<Vec<u32>>, group: usize, shape: &[usize]) -> Var {
    let n: usize = shape.iter().product();
    assert_eq!(idx.len(), n * group, "gather index length");
    let src = g.value(x).data();
    let inv = T::one() / T::lit(group as f64);
    let d: Vec<T> = idx
        .chunks_exact(group)
        .map(|c| c.iter().map(|&j| src[j as usize]).sum::<T>() * inv)
        .collect();
    g.record(Tensor::new(shape, d), &[x], GatherOp { idx, group })
}

struct ReshapeOp;
impl<T: Real> Backward<T> for ReshapeOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(x[0].shape()))]
    }
}

pub fn reshape<T: Real>(g: &mut Graph<T>, x: Var, shape: &[usize]) -> Var {
    let v = g.value(x).clone().reshape(shape);
    g.record(v, &[x], ReshapeOp)
}

struct SumOp(f64);
impl<T: Real> Backward<T> for SumOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(x[0].shape(), g.data()[0] * T::lit(self.0)))]
    }
}

pub fn sum<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let v = Tensor::scalar(g.value(x).sum());
    g.record(v, &[x], SumOp(1.0))
}

pub fn mean<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let n = g.value(x).numel() as f64;
    let v = Tensor::scalar(g.value(x).sum() / T::lit(n));
    g.record(v, &[x], SumOp(1.0 / n))
}

struct PoolOp {
    rows: usize,
}
impl<T: Real> Backward<T> for PoolOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = g.numel();
        let inv = T::one() / T::lit(self.rows as f64);
        let mut d = Vec::with_capacity(self.rows * c);
        for _ in 0..self.rows {
            d.extend(g.data().iter().map(|&v| v * inv));
        }
        vec![Some(Tensor::new(x[0].shape(), d))]
    }
}

/// Mean over all spatial positions: `[.., C] -> [C]`.
pub fn global_avg_pool<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let xs = g.value(x);
    let c = xs.channels();
    let rows = xs.numel() / c;
    let mut s = column_sums(xs.data(), c);
    s.scale_inplace(T::one() / T::lit(rows as f64));
    g.record(s, &[x], PoolOp { rows })
}

struct SliceOp {
    start: usize,
    width: usize,
}
impl<T: Real> Backward<T> for SliceOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = x[0].channels();
        let mut d = vec![T::zero(); x[0].numel()];
        for (r, row) in g.data().chunks_exact(self.width).enumerate() {
            d[r * c + self.start..r * c + self.start + self.width].copy_from_slice(row);
        }
        vec![Some(Tensor::new(x[0].shape(), d))]
    }
}

/// Channels `start..start + width` of the last axis.
pub fn slice_channels<T: Real>(g: &mut Graph<T>, x: Var, start: usize, width: usize) -> Var {
    let xs = g.value(x);
    let c = xs.channels();
    assert!(start + width <= c);
    let d: Vec<T> = xs.data().chunks_exact(c).flat_map(|r| r[start..start + width].iter().copied()).collect();
    let mut shape = xs.shape().to_vec();
    *shape.last_mut().unwrap() = width;
    g.record(Tensor::new(&shape, d), &[x], SliceOp { start, width })
}

struct DropoutOp<T>(Vec<T>);
impl<T: Real> Backward<T> for DropoutOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let d = g.data().iter().zip(&self.0).map(|(&a, &m)| a * m).collect();
        vec![Some(Tensor::new(g.shape(), d))]
    }
}

/// Inverted dropout. Identity in evaluation graphs or when `rate == 0`.
pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, seed: u64) -> Var {
    if !g.training() || rate <= 0.0 {
        return x;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let v = Tensor::new(
        g.value(x).shape(),
        g.value(x).data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
    );
    g.record(v, &[x], DropoutOp(mask))
}

//! Channel-last convolutions over 2 or 3 spatial axes.
//!
//! Patches of a block of output positions are gathered into an im2col
//! buffer `[positions, taps * cin]` and multiplied with the weight viewed as
//! `[taps * cin, cout]`.

use super::real::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{tensor::strides, Backward, Graph, Real, Tensor, Var};

#[derive(Clone, Debug)]
struct Geometry {
    in_sp: Vec<usize>,
    out_sp: Vec<usize>,
    kernel: Vec<usize>,
    stride: usize,
    pad: usize,
    cin: usize,
    cout: usize,
}

impl Geometry {
    fn n_out(&self) -> usize {
        self.out_sp.iter().product()
    }

    /// `(input, output, kernel)` sizes left-padded to three axes.
    fn dims3(&self) -> ([usize; 3], [usize; 3], [usize; 3]) {
        let lift = |v: &[usize]| -> [usize; 3] {
            let mut o = [1; 3];
            o[3 - v.len()..].copy_from_slice(v);
            o
        };
        (lift(&self.in_sp), lift(&self.out_sp), lift(&self.kernel))
    }

    /// Per axis, the input coordinate read by output coordinate `o` at
    /// kernel offset `j` (index `o * k + j`), or -1 inside the padding.
    fn taps(&self) -> [Vec<isize>; 3] {
        let (ins, outs, ks) = self.dims3();
        let lead = 3 - self.in_sp.len();
        std::array::from_fn(|a| {
            let (stride, pad) = if a < lead { (1, 0) } else { (self.stride as isize, self.pad as isize) };
            let mut t = Vec::with_capacity(outs[a] * ks[a]);
            for o in 0..outs[a] as isize {
                for j in 0..ks[a] as isize {
                    let q = o * stride + j - pad;
                    t.push(if q < 0 || q >= ins[a] as isize { -1 } else { q });
                }
            }
            t
        })
    }

    /// Output positions per im2col chunk.
    fn chunk(&self) -> usize {
        let k: usize = self.kernel.iter().product();
        (1 << 18) / (k * self.cin).max(1)
    }

    /// Visits the input row (or `None` in the padding) of every kernel tap
    /// of output positions `p0..p1`, in patch order.
    fn for_each_tap(&self, taps: &[Vec<isize>; 3], p0: usize, p1: usize, mut f: impl FnMut(Option<usize>)) {
        let (ins, outs, ks) = self.dims3();
        for p in p0..p1 {
            let o = [p / (outs[1] * outs[2]), p / outs[2] % outs[1], p % outs[2]];
            for &i0 in &taps[0][o[0] * ks[0]..(o[0] + 1) * ks[0]] {
                for &i1 in &taps[1][o[1] * ks[1]..(o[1] + 1) * ks[1]] {
                    for &i2 in &taps[2][o[2] * ks[2]..(o[2] + 1) * ks[2]] {
                        if i0 < 0 || i1 < 0 || i2 < 0 {
                            f(None);
                        } else {
                            f(Some((i0 as usize * ins[1] + i1 as usize) * ins[2] + i2 as usize));
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], taps: &[Vec<isize>; 3], p0: usize, p1: usize, col: &mut Vec<T>) {
        let cin = self.cin;
        col.clear();
        self.for_each_tap(taps, p0, p1, |r| match r {
            Some(r) => col.extend_from_slice(&x[r * cin..(r + 1) * cin]),
            None => col.extend(std::iter::repeat(T::zero()).take(cin)),
        });
    }

    fn col2im<T: Real>(&self, col: &[T], taps: &[Vec<isize>; 3], p0: usize, p1: usize, gx: &mut [T]) {
        let cin = self.cin;
        let mut at = 0;
        self.for_each_tap(taps, p0, p1, |r| {
            if let Some(r) = r {
                for (d, &s) in gx[r * cin..(r + 1) * cin].iter_mut().zip(&col[at..at + cin]) {
                    *d = *d + s;
                }
            }
            at += cin;
        });
    }
}

struct ConvOp {
    geo: Geometry,
}

impl<T: Real> Backward<T> for ConvOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let geo = &self.geo;
        let (cout, nout) = (geo.cout, geo.n_out());
        let kk = x[1].numel() / cout;
        let taps = geo.taps();
        let mut gx = n[0].then(|| vec![T::zero(); x[0].numel()]);
        let mut gw = n[1].then(|| vec![T::zero(); x[1].numel()]);
        let mut col = Vec::new();
        let mut p0 = 0;
        while p0 < nout {
            let p1 = (p0 + geo.chunk()).min(nout);
            let gc = &g.data()[p0 * cout..p1 * cout];
            if let Some(gw) = gw.as_mut() {
                geo.im2col(x[0].data(), &taps, p0, p1, &mut col);
                matmul_at_acc(&col, gc, gw, p1 - p0, kk, cout);
            }
            if let Some(gx) = gx.as_mut() {
                col.clear();
                col.resize((p1 - p0) * kk, T::zero());
                matmul_bt_acc(gc, x[1].data(), &mut col, p1 - p0, cout, kk);
                geo.col2im(&col, &taps, p0, p1, gx);
            }
            p0 = p1;
        }
        let gb = n[2].then(|| {
            let mut s = vec![T::zero(); cout];
            for row in g.data().chunks_exact(cout) {
                for (a, &b) in s.iter_mut().zip(row) {
                    *a = *a + b;
                }
            }
            Tensor::new(&[cout], s)
        });
        vec![
            gx.map(|d| Tensor::new(x[0].shape(), d)),
            gw.map(|d| Tensor::new(x[1].shape(), d)),
            gb,
        ]
    }
}

/// Strided convolution with symmetric zero padding.
///
/// `x: [s.., cin]`, `w: [k.., cin, cout]`, `b: [cout]`; output spatial size
/// per axis is `(s + 2 pad - k) / stride + 1`.
pub fn conv<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
    let xs = g.value(x).shape().to_vec();
    let ws = g.value(w).shape().to_vec();
    let d = xs.len() - 1;
    assert_eq!(ws.len(), d + 2, "conv: weight rank {} for {d} spatial axes", ws.len());
    let (cin, cout) = (ws[d], ws[d + 1]);
    assert_eq!(xs[d], cin, "conv: input has {} channels, weight expects {cin}", xs[d]);
    let in_sp = xs[..d].to_vec();
    let kernel = ws[..d].to_vec();
    let out_sp: Vec<usize> = in_sp
        .iter()
        .zip(&kernel)
        .map(|(&s, &k)| {
            assert!(s + 2 * pad >= k, "conv: kernel larger than padded input");
            (s + 2 * pad - k) / stride + 1
        })
        .collect();
    let geo = Geometry { in_sp, out_sp: out_sp.clone(), kernel, stride, pad, cin, cout };
    let nout = geo.n_out();
    let mut out = Vec::with_capacity(nout * cout);
    let bias = g.value(b).data();
    for _ in 0..nout {
        out.extend_from_slice(bias);
    }
    let taps = geo.taps();
    let kk = g.value(w).numel() / cout;
    let mut col = Vec::new();
    let mut p0 = 0;
    while p0 < nout {
        let p1 = (p0 + geo.chunk()).min(nout);
        geo.im2col(g.value(x).data(), &taps, p0, p1, &mut col);
        matmul_acc(&col, g.value(w).data(), &mut out[p0 * cout..p1 * cout], p1 - p0, kk, cout);
        p0 = p1;
    }
    let mut shape = out_sp;
    shape.push(cout);
    g.record(Tensor::new(&shape, out), &[x, w, b], ConvOp { geo })
}

struct UpOp {
    in_sp: Vec<usize>,
    cin: usize,
    cout: usize,
}

impl UpOp {
    /// Output row for every input position under sub-pixel offset `off`.
    fn rows(&self, off: &[usize]) -> Vec<usize> {
        let d = self.in_sp.len();
        let out_sp: Vec<usize> = self.in_sp.iter().map(|s| 2 * s).collect();
        let ost = strides(&out_sp);
        let n: usize = self.in_sp.iter().product();
        let mut p = vec![0usize; d];
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            rows.push((0..d).map(|a| (2 * p[a] + off[a]) * ost[a]).sum());
            for a in (0..d).rev() {
                p[a] += 1;
                if p[a] < self.in_sp[a] {
                    break;
                }
                p[a] = 0;
            }
        }
        rows
    }

    fn offsets(&self) -> Vec<Vec<usize>> {
        let d = self.in_sp.len();
        (0..1usize << d).map(|m| (0..d).map(|a| (m >> (d - 1 - a)) & 1).collect()).collect()
    }
}

impl<T: Real> Backward<T> for UpOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (cin, cout) = (self.cin, self.cout);
        let nin: usize = self.in_sp.iter().product();
        let mut gx = n[0].then(|| vec![T::zero(); x[0].numel()]);
        let mut gw = n[1].then(|| vec![T::zero(); x[1].numel()]);
        let mut gk = vec![T::zero(); nin * cout];
        for (k, off) in self.offsets().iter().enumerate() {
            let rows = self.rows(off);
            for (p, &r) in rows.iter().enumerate() {
                gk[p * cout..(p + 1) * cout].copy_from_slice(&g.data()[r * cout..(r + 1) * cout]);
            }
            let wk = &x[1].data()[k * cin * cout..(k + 1) * cin * cout];
            if let Some(gx) = gx.as_mut() {
                matmul_bt_acc(&gk, wk, gx, nin, cout, cin);
            }
            if let Some(gw) = gw.as_mut() {
                matmul_at_acc(x[0].data(), &gk, &mut gw[k * cin * cout..(k + 1) * cin * cout], nin, cin, cout);
            }
        }
        let gb = n[2].then(|| {
            let mut s = vec![T::zero(); cout];
            for row in g.data().chunks_exact(cout) {
                for (a, &b) in s.iter_mut().zip(row) {
                    *a = *a + b;
                }
            }
            Tensor::new(&[cout], s)
        });
        vec![
            gx.map(|d| Tensor::new(x[0].shape(), d)),
            gw.map(|d| Tensor::new(x[1].shape(), d)),
            gb,
        ]
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
///
/// `x: [s.., cin]`, `w: [2, .., 2, cin, cout]`.
pub fn conv_transpose2x<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let xs = g.value(x).shape().to_vec();
    let ws = g.value(w).shape().to_vec();
    let d = xs.len() - 1;
    assert_eq!(ws.len(), d + 2);
    assert!(ws[..d].iter().all(|&k| k == 2), "transposed conv kernel must be 2");
    let (cin, cout) = (ws[d], ws[d + 1]);
    assert_eq!(xs[d], cin);
    let op = UpOp { in_sp: xs[..d].to_vec(), cin, cout };
    let nin: usize = op.in_sp.iter().product();
    let out_sp: Vec<usize> = op.in_sp.iter().map(|s| 2 * s).collect();
    let nout: usize = out_sp.iter().product();
    let bias = g.value(b).data().to_vec();
    let mut out = Vec::with_capacity(nout * cout);
    for _ in 0..nout {
        out.extend_from_slice(&bias);
    }
    let mut yk = vec![T::zero(); nin * cout];
    for (k, off) in op.offsets().iter().enumerate() {
        yk.iter_mut().for_each(|v| *v = T::zero());
        let wk = &g.value(w).data()[k * cin * cout..(k + 1) * cin * cout];
        matmul_acc(g.value(x).data(), wk, &mut yk, nin, cin, cout);
        for (p, r) in op.rows(off).into_iter().enumerate() {
            for c in 0..cout {
                out[r * cout + c] = out[r * cout + c] + yk[p * cout + c];
            }
        }
    }
    let mut shape = out_sp;
    shape.push(cout);
    g.record(Tensor::new(&shape, out), &[x, w, b], op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck::grad_check, ops};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop 2-d convolution.
    fn conv2d_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; oh * ow * cout];
        for i in 0..oh {
            for j in 0..ow {
                for co in 0..cout {
                    let mut s = b.data()[co];
                    for a in 0..kh {
                        for c in 0..kw {
                            let (y, z) = ((i * stride + a) as isize - pad as isize, (j * stride + c) as isize - pad as isize);
                            if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x.data()[(y as usize * wd + z as usize) * cin + ci]
                                    * w.data()[((a * kw + c) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(i * ow + j) * cout + co] = s;
                }
            }
        }
        Tensor::new(&[oh, ow, cout], out)
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let x = rand_t(&[6, 8, 3], 1);
            let w = rand_t(&[k, k, 3, 4], 2);
            let b = rand_t(&[4], 3);
            let mut g = Graph::inference();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = conv(&mut g, xv, wv, bv, stride, pad);
            let want = conv2d_direct(&x, &w, &b, stride, pad);
            assert_eq!(g.value(y).shape(), want.shape());
            assert!(g.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv3d_across_chunks() {
        let (sp, cin, cout) = ([10usize, 9, 7], 16, 2);
        let x = rand_t(&[sp[0], sp[1], sp[2], cin], 13);
        let w = rand_t(&[3, 3, 3, cin, cout], 14);
        let b = rand_t(&[cout], 15);
        let mut g = Graph::inference();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = conv(&mut g, xv, wv, bv, 1, 1);
        let xi = |p: [isize; 3], c: usize| -> f64 {
            if (0..3).any(|a| p[a] < 0 || p[a] >= sp[a] as isize) {
                return 0.0;
            }
            x.data()[((p[0] as usize * sp[1] + p[1] as usize) * sp[2] + p[2] as usize) * cin + c]
        };
        let mut worst = 0.0f64;
        for (i, &got) in g.value(y).data().iter().enumerate() {
            let co = i % cout;
            let q = i / cout;
            let o = [(q / (sp[1] * sp[2])) as isize, (q / sp[2] % sp[1]) as isize, (q % sp[2]) as isize];
            let mut s = b.data()[co];
            for t in 0..27 {
                let j = [t / 9, t / 3 % 3, t % 3];
                for c in 0..cin {
                    s += xi([o[0] + j[0] as isize - 1, o[1] + j[1] as isize - 1, o[2] + j[2] as isize - 1], c)
                        * w.data()[(t * cin + c) * cout + co];
                }
            }
            worst = worst.max((s - got).abs());
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn conv_gradients() {
        let inputs = vec![rand_t(&[4, 4, 3, 2], 4), rand_t(&[3, 3, 3, 2, 3], 5), rand_t(&[3], 6)];
        let err = grad_check(
            |g, v| {
                let y = conv(g, v[0], v[1], v[2], 1, 1);
                let y = ops::gelu(g, y);
                ops::sum(g, y)
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
        let inputs = vec![rand_t(&[6, 6, 2], 7), rand_t(&[3, 3, 2, 3], 8), rand_t(&[3], 9)];
        let err = grad_check(
            |g, v| {
                let y = conv(g, v[0], v[1], v[2], 2, 1);
                let y = ops::gelu(g, y);
                ops::sum(g, y)
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn transposed_conv_doubles_and_differentiates() {
        let inputs = vec![rand_t(&[3, 2, 2], 10), rand_t(&[2, 2, 2, 3], 11), rand_t(&[3], 12)];
        let mut g = Graph::inference();
        let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = conv_transpose2x(&mut g, v[0], v[1], v[2]);
        assert_eq!(g.value(y).shape(), &[6, 4, 3]);
        // out[2i+a, 2j+c] = x[i, j] @ w[a, c] + b
        let (x, w, b) = (&inputs[0], &inputs[1], &inputs[2]);
        let (i, j, a, c, co) = (1, 1, 1, 0, 2);
        let mut want = b.data()[co];
        for ci in 0..2 {
            want += x.data()[(i * 2 + j) * 2 + ci] * w.data()[((a * 2 + c) * 2 + ci) * 3 + co];
        }
        let got = g.value(y).data()[((2 * i + a) * 4 + (2 * j + c)) * 3 + co];
        assert!((got - want).abs() < 1e-12);

        let err = grad_check(
            |g, v| {
                let y = conv_transpose2x(g, v[0], v[1], v[2]);
                let y = ops::gelu(g, y);
                ops::sum(g, y)
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }
}

//! Volume refinement: windowed local spectrum attention (LSA), the occupancy
//! head, binarization and the per-voxel point uplifter.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, VoxelGrid};
use crate::nn::layers::{Conv, ConvBlock, Mlp, ParamBuilder};
use crate::nn::ops::{self, Activation};
use crate::nn::spectral::fft_nd;
use crate::nn::{Backward, Graph, ParamStore, Real, Tensor, Var};

/// `max(4, min_dim / 8)`, reduced to the largest common divisor of the dims
/// not above it.
pub fn window_size(dims: [usize; 3]) -> usize {
    let min = *dims.iter().min().unwrap();
    let w = (min / 8).max(4).min(min);
    (1..=w).rev().find(|w| dims.iter().all(|d| d % w == 0)).unwrap_or(1)
}

/// Maps unshifted bins of a `w³` window onto a half-spectrum: bin `j` reads
/// parameter `rep[j]`, with its imaginary part multiplied by `sign[j]`
/// (`-1` on the mirrored half, `0` on self-conjugate bins).
#[derive(Clone, Debug)]
pub struct HalfSpectrum {
    pub w: usize,
    pub rep: Vec<usize>,
    pub sign: Vec<i8>,
    pub len: usize,
}

impl HalfSpectrum {
    pub fn new(w: usize) -> Self {
        let n = w * w * w;
        let mirror = |j: usize| {
            let (a, b, c) = (j / (w * w), (j / w) % w, j % w);
            (((w - a) % w) * w + (w - b) % w) * w + (w - c) % w
        };
        let mut rep = vec![0; n];
        let mut sign = vec![0i8; n];
        let mut len = 0;
        for j in 0..n {
            let m = mirror(j);
            if m < j {
                rep[j] = rep[m];
                sign[j] = -1;
            } else {
                rep[j] = len;
                sign[j] = if m == j { 0 } else { 1 };
                len += 1;
            }
        }
        Self { w, rep, sign, len }
    }

    fn expand<T: Real>(&self, re: &[T], im: &[T]) -> Vec<Complex<T>> {
        self.rep
            .iter()
            .zip(&self.sign)
            .map(|(&r, &s)| Complex::new(re[r], im[r] * T::lit(s as f64)))
            .collect()
    }
}

/// Copies `[H,W,D,C]` into `[window][channel][w³]` blocks (or back).
fn window_order(dims: [usize; 3], c: usize, w: usize) -> Vec<usize> {
    let [h, wd, d] = dims;
    let (nh, nw, nd) = (h / w, wd / w, d / w);
    let mut idx = Vec::with_capacity(h * wd * d * c);
    for bh in 0..nh {
        for bw in 0..nw {
            for bd in 0..nd {
                for k in 0..c {
                    for i in 0..w {
                        for j in 0..w {
                            for l in 0..w {
                                let p = ((bh * w + i) * wd + bw * w + j) * d + bd * w + l;
                                idx.push(p * c + k);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

fn to_windows<T: Real>(x: &[T], order: &[usize]) -> Vec<Complex<T>> {
    order.iter().map(|&i| Complex::new(x[i], T::zero())).collect()
}

fn from_windows<T: Real>(buf: &[Complex<T>], order: &[usize], scale: T) -> Vec<T> {
    let mut out = vec![T::zero(); buf.len()];
    for (v, &i) in buf.iter().zip(order) {
        out[i] = v.re * scale;
    }
    out
}

struct LsaOp<T> {
    half: Arc<HalfSpectrum>,
    order: Arc<Vec<usize>>,
    spectrum: Vec<Complex<T>>,
    alpha: Vec<Complex<T>>,
}

impl<T: Real> Backward<T> for LsaOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        let w = self.half.w;
        let n = w * w * w;
        let inv = T::one() / T::lit(n as f64);
        let mut gs = to_windows(g.data(), &self.order);
        fft_nd(&mut gs, &[w, w, w], false);
        let gx = need[0].then(|| {
            let mut b: Vec<Complex<T>> = gs.iter().enumerate().map(|(i, v)| *v * self.alpha[i % n].conj()).collect();
            fft_nd(&mut b, &[w, w, w], true);
            Tensor::new(x[0].shape(), from_windows(&b, &self.order, inv))
        });
        let (mut dre, mut dim) = (vec![T::zero(); self.half.len], vec![T::zero(); self.half.len]);
        if need[1] || need[2] {
            for (i, (a, b)) in self.spectrum.iter().zip(&gs).enumerate() {
                let j = i % n;
                let r = self.half.rep[j];
                dre[r] = dre[r] + (a.re * b.re + a.im * b.im) * inv;
                dim[r] = dim[r] + (a.re * b.im - a.im * b.re) * inv * T::lit(self.half.sign[j] as f64);
            }
        }
        vec![gx, need[1].then(|| Tensor::new(&[self.half.len], dre)), need[2].then(|| Tensor::new(&[self.half.len], dim))]
    }
}

/// `Re F⁻¹(α ⊙ F(x))` per `w³` window and channel, without the residual.
/// `re`, `im` hold the half-spectrum parameters of α.
pub fn window_filter<T: Real>(g: &mut Graph<T>, x: Var, re: Var, im: Var, half: &Arc<HalfSpectrum>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("LSA expects [H,W,D,C], got {shape:?}")));
    }
    let w = half.w;
    let dims = [shape[0], shape[1], shape[2]];
    if dims.iter().any(|d| d % w != 0) {
        return Err(Error::shape(format!("window {w} does not divide volume {dims:?}")));
    }
    if g.shape(re) != [half.len] || g.shape(im) != [half.len] {
        return Err(Error::shape(format!("filter expects {} half-spectrum bins", half.len)));
    }
    let n = w * w * w;
    let order = Arc::new(window_order(dims, shape[3], w));
    let alpha = half.expand(g.value(re).data(), g.value(im).data());
    let mut spectrum = to_windows(g.value(x).data(), &order);
    fft_nd(&mut spectrum, &[w, w, w], false);
    let mut b: Vec<Complex<T>> = spectrum.iter().enumerate().map(|(i, v)| *v * alpha[i % n]).collect();
    fft_nd(&mut b, &[w, w, w], true);
    let out = Tensor::new(&shape, from_windows(&b, &order, T::one() / T::lit(n as f64)));
    Ok(g.record(out, &[x, re, im], LsaOp { half: half.clone(), order, spectrum, alpha }))
}

/// Learned α of one refinement block, shared over windows, channels and
/// samples.
#[derive(Clone, Debug)]
pub struct SpectrumFilter {
    pub re: String,
    pub im: String,
    pub half: Arc<HalfSpectrum>,
}

impl SpectrumFilter {
    /// Starts at α = 0, where the block reduces to its residual path.
    pub fn new(pb: &mut ParamBuilder, id: &str, w: usize) -> Self {
        let half = Arc::new(HalfSpectrum::new(w));
        let re = pb.constant(&format!("{id}.alpha_re"), &[half.len], 0.0);
        let im = pb.constant(&format!("{id}.alpha_im"), &[half.len], 0.0);
        Self { re, im, half }
    }

    /// Full α over unshifted bins.
    pub fn alpha<T: Real>(&self, ps: &ParamStore<T>) -> Vec<Complex<T>> {
        self.half.expand(ps.value(&self.re).data(), ps.value(&self.im).data())
    }

    /// `SA = F⁻¹(α ⊙ F(x)) + x`.
    pub fn enhance<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let re = g.param(ps, &self.re);
        let im = g.param(ps, &self.im);
        let f = window_filter(g, x, re, im, &self.half)?;
        Ok(ops::add(g, f, x))
    }
}

/// Spectrum attention followed by a pointwise residual conv block.
#[derive(Clone, Debug)]
pub struct LsarBlock {
    pub filter: SpectrumFilter,
    pub mix: ConvBlock,
}

impl LsarBlock {
    pub fn new(pb: &mut ParamBuilder, id: &str, c: usize, w: usize) -> Self {
        Self { filter: SpectrumFilter::new(pb, &format!("{id}.lsa"), w), mix: ConvBlock::new(pb, &format!("{id}.mix"), 3, 1, c, c) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.filter.enhance(g, ps, x)?;
        Ok(self.mix.forward(g, ps, y))
    }
}

/// LSAR blocks, a 3D conv block and a 1×1×1 logistic output.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub blocks: Vec<LsarBlock>,
    pub head: ConvBlock,
    pub out: Conv,
    pub window: usize,
}

impl Refiner {
    pub fn new(pb: &mut ParamBuilder, id: &str, dims: [usize; 3], c: usize, blocks: usize, head_kernel: usize) -> Self {
        let window = window_size(dims);
        let blocks = (0..blocks).map(|i| LsarBlock::new(pb, &format!("{id}.lsar.{i}"), c, window)).collect();
        let head = ConvBlock::new(pb, &format!("{id}.head"), 3, head_kernel, c, c);
        let out = Conv::same(pb, &format!("{id}.out"), 3, 1, c, 1);
        Self { blocks, head, out, window }
    }

    /// Refined features `[H,W,D,C]`.
    pub fn refine<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, ps, x)?;
        }
        Ok(x)
    }

    /// Occupancy probability `[H,W,D,1]` from refined features.
    pub fn head<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, refined: Var) -> Var {
        let h = self.head.forward(g, ps, refined);
        let logit = self.out.forward(g, ps, h);
        ops::activation(g, logit, Activation::Sigmoid)
    }

    /// `(refined, prob)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let r = self.refine(g, ps, x)?;
        let p = self.head(g, ps, r);
        Ok((r, p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Binarize {
    Threshold(f64),
    TopK(usize),
}

/// Occupancy probabilities over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyPrediction {
    pub dims: [usize; 3],
    pub prob: Vec<f32>,
}

impl OccupancyPrediction {
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[3] != 1 {
            return Err(Error::shape(format!("probability field must be [H,W,D,1], got {s:?}")));
        }
        Ok(Self { dims: [s[0], s[1], s[2]], prob: t.data().iter().map(|v| v.as_f64() as f32).collect() })
    }

    pub fn binarize(&self, mode: Binarize, voxel_size: f64, origin: [f64; 3]) -> Result<VoxelGrid> {
        let mut grid = VoxelGrid::empty(self.dims, voxel_size, origin);
        match mode {
            Binarize::Threshold(tau) => {
                if !(tau > 0.0 && tau < 1.0) {
                    return Err(Error::invalid(format!("threshold {tau} outside (0, 1)")));
                }
                for (o, &p) in grid.occupancy.iter_mut().zip(&self.prob) {
                    *o = p as f64 >= tau;
                }
            }
            Binarize::TopK(k) => {
                let n = self.prob.len();
                if k == 0 || k > n {
                    return Err(Error::invalid(format!("top_k {k} outside 1..={n}")));
                }
                let mut idx: Vec<usize> = (0..n).collect();
                let cmp = |a: &usize, b: &usize| self.prob[*b].total_cmp(&self.prob[*a]).then(a.cmp(b));
                if k < n {
                    idx.select_nth_unstable_by(k - 1, cmp);
                }
                for &i in &idx[..k] {
                    grid.occupancy[i] = true;
                }
            }
        }
        Ok(grid)
    }
}

/// Per-voxel point generator: `f` offsets inside each occupied voxel from
/// the voxel's refined feature and a sinusoidal code of the slot index.
#[derive(Clone, Debug)]
pub struct Uplifter {
    pub mlp: Mlp,
    pub channels: usize,
}

impl Uplifter {
    /// The output layer starts at zero so initial offsets vanish.
    pub fn new(pb: &mut ParamBuilder, id: &str, c: usize, hidden: usize) -> Self {
        let mlp = Mlp::new(pb, id, &[c + 2, hidden, 3]);
        let w = mlp.layers.last().map(|l| l.w.clone()).unwrap();
        pb.store.value_mut(&w).data_mut().fill(0.0);
        Self { mlp, channels: c }
    }

    /// Offsets in meters, `[n·f, 3]`, ordered voxel-major; `voxels` are flat
    /// grid indices into `features: [H,W,D,C]`.
    pub fn offsets<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, features: Var, voxels: &[usize], f: usize, voxel_size: f64) -> Result<Var> {
        if f == 0 {
            return Err(Error::invalid("uplift rate must be at least 1"));
        }
        if voxels.is_empty() {
            return Err(Error::data("no occupied voxels to uplift"));
        }
        let c = self.channels;
        if g.value(features).channels() != c {
            return Err(Error::shape(format!("uplifter expects {c} channels, got {}", g.value(features).channels())));
        }
        let m = voxels.len() * f;
        let mut idx = Vec::with_capacity(m * c);
        let mut code = Vec::with_capacity(m * 2);
        for &v in voxels {
            for j in 0..f {
                idx.extend((0..c).map(|k| (v * c + k) as u32));
                let a = 2.0 * PI * j as f64 / f as f64;
                code.push(T::lit(a.sin()));
                code.push(T::lit(a.cos()));
            }
        }
        let feat = ops::gather(g, features, Arc::new(idx), &[m, c]);
        let code = g.constant(Tensor::new(&[m, 2], code));
        let x = ops::concat_channels(g, &[feat, code]);
        let y = self.mlp.forward(g, ps, x);
        let y = ops::activation(g, y, Activation::Tanh);
        Ok(ops::affine(g, y, T::lit(voxel_size / 2.0), T::zero()))
    }

    /// Voxel centers plus offsets.
    pub fn uplift<T: Real>(&self, ps: &ParamStore<T>, grid: &VoxelGrid, features: &Tensor<T>, f: usize) -> Result<PointCloud> {
        let voxels: Vec<usize> = grid.occupied_indices().collect();
        let mut g = Graph::inference();
        let fv = g.constant(features.clone());
        let off = self.offsets(&mut g, ps, fv, &voxels, f, grid.voxel_size)?;
        Ok(place_points(grid, &voxels, g.value(off), f))
    }
}

/// `center(v_i) + Δ_{i,j}` for voxel-major offsets. Offsets are clamped to
/// the half edge in f64, since a saturated f32 `vs/2` rounds past the face.
pub fn place_points<T: Real>(grid: &VoxelGrid, voxels: &[usize], offsets: &Tensor<T>, f: usize) -> PointCloud {
    let o = offsets.data();
    let h = grid.voxel_size / 2.0;
    let mut pts = Vec::with_capacity(voxels.len() * f);
    for (i, &v) in voxels.iter().enumerate() {
        let c = grid.center(v);
        for j in 0..f {
            let r = (i * f + j) * 3;
            pts.push(std::array::from_fn(|a| c[a] + o[r + a].as_f64().clamp(-h, h)));
        }
    }
    PointCloud::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, grad_check_params};
    use crate::nn::optim::Adam;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_half(w: usize, seed: u64) -> (Arc<HalfSpectrum>, Tensor<f64>, Tensor<f64>) {
        let h = Arc::new(HalfSpectrum::new(w));
        let n = h.len;
        (h, rand_t(&[n], seed), rand_t(&[n], seed + 1))
    }

    /// Real spatial kernel of α by direct inverse DFT.
    fn kernel(alpha: &[Complex<f64>], w: usize) -> Vec<f64> {
        let n = w * w * w;
        (0..n)
            .map(|p| {
                let (a, b, c) = ((p / (w * w)) as f64, ((p / w) % w) as f64, (p % w) as f64);
                let s: Complex<f64> = (0..n)
                    .map(|j| {
                        let (u, v, t) = ((j / (w * w)) as f64, ((j / w) % w) as f64, (j % w) as f64);
                        let ph = 2.0 * PI * (u * a + v * b + t * c) / w as f64;
                        alpha[j] * Complex::new(ph.cos(), ph.sin())
                    })
                    .sum();
                assert!(s.im.abs() < 1e-9, "kernel not real: {}", s.im);
                s.re / n as f64
            })
            .collect()
    }

    #[test]
    fn window_rule() {
        assert_eq!(window_size([64, 64, 64]), 8);
        assert_eq!(window_size([32, 32, 32]), 4);
        assert_eq!(window_size([448, 448, 56]), 7);
        assert_eq!(window_size([384, 384, 48]), 6);
        assert_eq!(window_size([320, 320, 40]), 5);
        assert_eq!(window_size([24, 24, 20]), 4);
        assert_eq!(window_size([6, 9, 12]), 3);
        for d in [[64, 64, 64], [448, 448, 56], [30, 45, 60], [7, 7, 7]] {
            let w = window_size(d);
            assert!(d.iter().all(|x| x % w == 0));
        }
    }

    #[test]
    fn half_spectrum_covers_all_bins() {
        for w in [2, 3, 4, 5, 8] {
            let h = HalfSpectrum::new(w);
            let n = w * w * w;
            let selfconj = h.sign.iter().filter(|&&s| s == 0).count();
            assert_eq!(2 * h.len - selfconj, n);
            assert!(h.rep.iter().all(|&r| r < h.len));
        }
    }

    #[test]
    fn identity_and_zero_filters() {
        let x = rand_t(&[8, 8, 4, 3], 1);
        let h = Arc::new(HalfSpectrum::new(4));
        for (a, expect) in [(1.0, 2.0), (0.0, 1.0)] {
            let mut g = Graph::new(false);
            let xv = g.constant(x.clone());
            let re = g.constant(Tensor::full(&[h.len], a));
            let im = g.constant(Tensor::zeros(&[h.len]));
            let f = window_filter(&mut g, xv, re, im, &h).unwrap();
            let y = ops::add(&mut g, f, xv);
            let e = x.map(|v| v * expect);
            assert!(g.value(y).max_abs_diff(&e) < 1e-12);
        }
    }

    #[test]
    fn matches_windowed_circular_convolution() {
        for (w, dims) in [(4, [8, 4, 8]), (8, [8, 16, 8])] {
            let (h, re, im) = rand_half(w, 3 + w as u64);
            let x = rand_t(&[dims[0], dims[1], dims[2], 2], 9);
            let alpha = h.expand(re.data(), im.data());
            let k = kernel(&alpha, w);
            let mut g = Graph::new(false);
            let xv = g.constant(x.clone());
            let rv = g.constant(re);
            let iv = g.constant(im);
            let f = window_filter(&mut g, xv, rv, iv, &h).unwrap();
            let y = g.value(f).data();
            let c = 2;
            for p in 0..dims[0] * dims[1] * dims[2] {
                let pc = [p / (dims[1] * dims[2]), (p / dims[2]) % dims[1], p % dims[2]];
                let base: [usize; 3] = std::array::from_fn(|a| pc[a] / w * w);
                let loc: [usize; 3] = std::array::from_fn(|a| pc[a] % w);
                for ch in 0..c {
                    let mut s = 0.0;
                    for m in 0..w * w * w {
                        let mm = [m / (w * w), (m / w) % w, m % w];
                        let q: [usize; 3] = std::array::from_fn(|a| base[a] + (loc[a] + w - mm[a]) % w);
                        s += k[m] * x.data()[((q[0] * dims[1] + q[1]) * dims[2] + q[2]) * c + ch];
                    }
                    assert!((s - y[p * c + ch]).abs() < 1e-10, "w {w} p {p}");
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_volume() {
        let h = Arc::new(HalfSpectrum::new(4));
        let mut g = Graph::<f64>::new(false);
        let x = g.constant(Tensor::zeros(&[6, 4, 4, 1]));
        let re = g.constant(Tensor::zeros(&[h.len]));
        let im = g.constant(Tensor::zeros(&[h.len]));
        assert!(window_filter(&mut g, x, re, im, &h).unwrap_err().to_string().contains("does not divide"));
    }

    #[test]
    fn lsa_gradients() {
        let (h, re, im) = rand_half(4, 21);
        let x = rand_t(&[4, 8, 4, 2], 22);
        let err = grad_check(
            |g, v| {
                let f = window_filter(g, v[0], v[1], v[2], &h).unwrap();
                let y = ops::add(g, f, v[0]);
                let y2 = ops::mul(g, y, y);
                ops::sum(g, y2)
            },
            &[x, re, im],
            1e-6,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn hermitian_under_training() {
        let mut pb = ParamBuilder::new(5);
        let sf = SpectrumFilter::new(&mut pb, "f", 4);
        let mut ps = pb.finish().cast::<f64>();
        let target = rand_t(&[4, 4, 4, 2], 6);
        let x = rand_t(&[4, 4, 4, 2], 7);
        let mut adam = Adam::new(Some(1.0));
        for _ in 0..20 {
            let mut g = Graph::new(true);
            let xv = g.constant(x.clone());
            let y = sf.enhance(&mut g, &ps, xv).unwrap();
            let t = g.constant(target.clone());
            let d = ops::sub(&mut g, y, t);
            let d2 = ops::mul(&mut g, d, d);
            let l = ops::sum(&mut g, d2);
            ps.zero_grad();
            g.backward(l).accumulate(&mut ps);
            adam.step(&mut ps, 0.05);
            let mut a = sf.alpha(&ps);
            let mag = a.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-30);
            fft_nd(&mut a, &[4, 4, 4], true);
            let res = a.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
            assert!(res < 1e-5 * mag * 64.0, "{res}");
        }
        assert!(ps.value(&sf.re).max_abs() > 0.0);
    }

    #[test]
    fn head_on_zero_features_is_half() {
        let mut pb = ParamBuilder::new(1);
        let r = Refiner::new(&mut pb, "ref", [8, 8, 8], 4, 2, 3);
        let ps = pb.finish();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[8, 8, 8, 4]));
        let (_, p) = r.forward(&mut g, &ps, x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
        let x = g.constant(rand_t(&[8, 8, 8, 4], 3).map(|v| v * 50.0).cast::<f32>());
        let (_, p) = r.forward(&mut g, &ps, x).unwrap();
        assert!(g.value(p).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn head_gradients() {
        let mut pb = ParamBuilder::new(2);
        let r = Refiner::new(&mut pb, "ref", [4, 4, 4], 2, 1, 3);
        let mut ps = pb.finish().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (_, p) in ps.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let x = rand_t(&[4, 4, 4, 2], 4);
        let tgt: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        let rep = grad_check_params(
            &ps,
            &|g, ps| {
                let xv = g.constant(x.clone());
                let (_, p) = r.forward(g, ps, xv).unwrap();
                crate::training::focal_loss(g, p, &tgt, 0.75, 2.0)
            },
            1e-6,
            6,
        );
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn binarize_modes() {
        let p = OccupancyPrediction { dims: [2, 2, 2], prob: vec![0.9; 8] };
        assert_eq!(p.binarize(Binarize::Threshold(0.5), 1.0, [0.0; 3]).unwrap().occupied_count(), 8);
        let mut q = p.clone();
        q.prob[5] = 0.95;
        let g = q.binarize(Binarize::TopK(1), 1.0, [0.0; 3]).unwrap();
        assert_eq!(g.occupied_indices().collect::<Vec<_>>(), vec![5]);
        assert!(p.binarize(Binarize::TopK(9), 1.0, [0.0; 3]).is_err());
        assert!(p.binarize(Binarize::TopK(0), 1.0, [0.0; 3]).is_err());
        assert!(p.binarize(Binarize::Threshold(1.0), 1.0, [0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_oracle(levels in prop::collection::vec(0u8..4, 27), k in 1usize..=27) {
            let prob: Vec<f32> = levels.iter().map(|&l| l as f32 / 4.0).collect();
            let p = OccupancyPrediction { dims: [3, 3, 3], prob: prob.clone() };
            let g = p.binarize(Binarize::TopK(k), 1.0, [0.0; 3]).unwrap();
            let mut order: Vec<usize> = (0..27).collect();
            order.sort_by(|&a, &b| prob[b].partial_cmp(&prob[a]).unwrap().then(a.cmp(&b)));
            let mut want: Vec<usize> = order[..k].to_vec();
            want.sort();
            prop_assert_eq!(g.occupied_indices().collect::<Vec<_>>(), want);
        }

        #[test]
        fn uplifted_points_stay_in_voxels(seed in 0u64..1000, f in 1usize..5) {
            let mut pb = ParamBuilder::new(seed);
            let u = Uplifter::new(&mut pb, "up", 3, 8);
            let mut ps = pb.finish();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (_, p) in ps.iter_mut() {
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-20.0..20.0);
                }
            }
            let mut grid = VoxelGrid::empty([4, 4, 4], 0.3, [-1.0, 2.0, 0.5]);
            for i in 0..64 {
                grid.occupancy[i] = rng.gen_bool(0.3);
            }
            grid.occupancy[0] = true;
            let feats = Tensor::from_fn(&[4, 4, 4, 3], |_| rng.gen_range(-5.0f32..5.0));
            let pc = u.uplift(&ps, &grid, &feats, f).unwrap();
            prop_assert_eq!(pc.len(), f * grid.occupied_count());
            let vox: Vec<usize> = grid.occupied_indices().collect();
            for (i, p) in pc.points.iter().enumerate() {
                let c = grid.center(vox[i / f]);
                for a in 0..3 {
                    prop_assert!((p[a] - c[a]).abs() <= 0.15 * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn zero_init_uplift_returns_centers() {
        let mut pb = ParamBuilder::new(0);
        let u = Uplifter::new(&mut pb, "up", 2, 8);
        let ps = pb.finish();
        let mut grid = VoxelGrid::empty([2, 2, 2], 0.5, [0.0; 3]);
        grid.occupancy[3] = true;
        grid.occupancy[6] = true;
        let feats = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f32);
        for f in [1, 2, 4] {
            let pc = u.uplift(&ps, &grid, &feats, f).unwrap();
            assert_eq!(pc.len(), 2 * f);
            if f == 1 {
                assert_eq!(pc.points, vec![grid.center(3), grid.center(6)]);
            }
        }
        assert!(u.uplift(&ps, &VoxelGrid::empty([2, 2, 2], 0.5, [0.0; 3]), &feats, 1).is_err());
        assert!(u.uplift(&ps, &grid, &feats, 0).is_err());
    }
}

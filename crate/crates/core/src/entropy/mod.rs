//! Factorized entropy model, quantization, symbol coding and the container
//! format.

pub mod bitstream;
pub mod coder;
pub mod rangecoder;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::ParamBuilder;
use crate::nn::ops::sigmoid;
use crate::nn::{Backward, Graph, ParamStore, Real, Tensor, Var};

/// Smallest likelihood assigned to any in-range symbol.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Hidden widths of the composed monotone maps `1 -> 3 -> 3 -> 1`.
const W: usize = 3;

/// Additive `U[-0.5, 0.5)` noise, the differentiable stand-in for rounding.
pub fn quantize_train<T: Real>(g: &mut Graph<T>, y: Var, seed: u64) -> Var {
    let noise = uniform_noise::<T>(g.shape(y), seed);
    let n = g.constant(noise);
    crate::nn::ops::add(g, y, n)
}

pub fn uniform_noise<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-0.5..0.5)))
}

/// Round half away from zero.
pub fn quantize_eval<T: Real>(y: &Tensor<T>) -> Tensor<i32> {
    Tensor::new(y.shape(), y.data().iter().map(|v| v.as_f64().round() as i32).collect())
}

/// Parameter ids of a per-channel factorized density.
#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    pub prefix: String,
    pub channels: usize,
}

const PARAMS: [&str; 8] = ["h0", "b0", "a0", "h1", "b1", "a1", "h2", "b2"];

impl FactorizedDensity {
    /// Initialised so that the cumulative has a spread of about `init_scale`.
    pub fn new(pb: &mut ParamBuilder, prefix: &str, channels: usize, init_scale: f64) -> Self {
        let dims = [1, W, W, 1];
        let scale = init_scale.powf(1.0 / 3.0);
        let inits: Vec<f32> =
            (0..3).map(|i| ((1.0 / scale / dims[i + 1] as f64).exp_m1()).ln() as f32).collect();
        let c = channels;
        pb.constant(&format!("{prefix}.h0"), &[c, W], inits[0]);
        let b0 = bias(pb.rng(), c * W);
        pb.tensor(&format!("{prefix}.b0"), Tensor::new(&[c, W], b0));
        pb.constant(&format!("{prefix}.a0"), &[c, W], 0.0);
        pb.constant(&format!("{prefix}.h1"), &[c, W, W], inits[1]);
        let b1 = bias(pb.rng(), c * W);
        pb.tensor(&format!("{prefix}.b1"), Tensor::new(&[c, W], b1));
        pb.constant(&format!("{prefix}.a1"), &[c, W], 0.0);
        pb.constant(&format!("{prefix}.h2"), &[c, W], inits[2]);
        let b2 = bias(pb.rng(), c);
        pb.tensor(&format!("{prefix}.b2"), Tensor::new(&[c, 1], b2));
        Self { prefix: prefix.to_string(), channels }
    }

    pub fn ids(&self) -> Vec<String> {
        PARAMS.iter().map(|p| format!("{}.{p}", self.prefix)).collect()
    }

    fn vars<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>) -> Vec<Var> {
        self.ids().iter().map(|id| g.param(ps, id)).collect()
    }

    /// Differentiable `sum -log2 p(y)` over a `[.., C]` latent whose channels
    /// map to density channels `offset..offset + C`.
    pub fn rate<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, y: Var, offset: usize) -> Var {
        let c = g.value(y).channels();
        assert!(offset + c <= self.channels, "density has {} channels, need {}", self.channels, offset + c);
        let vars = self.vars(g, ps);
        let chans: Vec<Channel<T>> = (0..c).map(|k| Channel::from_tensors(&vars.iter().map(|&v| g.value(v)).collect::<Vec<_>>(), offset + k)).collect();
        let mut bits = T::zero();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            bits = bits + likelihood(&chans[i % c], v).bits;
        }
        let mut inputs = vec![y];
        inputs.extend(vars);
        g.record(Tensor::scalar(bits), &inputs, RateOp { offset })
    }

    /// Frozen double-precision copy for evaluation and coding.
    pub fn freeze(&self, ps: &ParamStore<f32>) -> FrozenDensity {
        let ts: Vec<Tensor<f64>> = self.ids().iter().map(|id| ps.value(id).cast::<f64>()).collect();
        let refs: Vec<&Tensor<f64>> = ts.iter().collect();
        FrozenDensity { channels: (0..self.channels).map(|k| Channel::from_tensors(&refs, k)).collect() }
    }
}

fn bias(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect()
}

fn softplus<T: Real>(x: T) -> T {
    crate::nn::ops::softplus(x)
}

/// Transformed parameters of one channel.
#[derive(Clone, Debug)]
pub struct Channel<T> {
    sh0: [T; W],
    dh0: [T; W],
    b0: [T; W],
    ta0: [T; W],
    da0: [T; W],
    sh1: [[T; W]; W],
    dh1: [[T; W]; W],
    b1: [T; W],
    ta1: [T; W],
    da1: [T; W],
    sh2: [T; W],
    dh2: [T; W],
    b2: T,
}

impl<T: Real> Channel<T> {
    fn from_tensors(p: &[&Tensor<T>], k: usize) -> Self {
        let row = |t: &Tensor<T>| -> [T; W] { std::array::from_fn(|i| t.data()[k * W + i]) };
        let (h0, b0, a0, b1, a1, h2) = (row(p[0]), row(p[1]), row(p[2]), row(p[4]), row(p[5]), row(p[6]));
        let h1: [[T; W]; W] = std::array::from_fn(|j| std::array::from_fn(|i| p[3].data()[(k * W + j) * W + i]));
        let tanh_d = |a: T| T::one() - a.tanh() * a.tanh();
        Self {
            sh0: h0.map(softplus),
            dh0: h0.map(sigmoid),
            b0,
            ta0: a0.map(|a| a.tanh()),
            da0: a0.map(tanh_d),
            sh1: h1.map(|r| r.map(softplus)),
            dh1: h1.map(|r| r.map(sigmoid)),
            b1,
            ta1: a1.map(|a| a.tanh()),
            da1: a1.map(tanh_d),
            sh2: h2.map(softplus),
            dh2: h2.map(sigmoid),
            b2: p[7].data()[k],
        }
    }

    /// Logit of the cumulative at `x` plus the intermediates for backward.
    fn logit(&self, x: T) -> (T, Cache<T>) {
        let mut c = Cache { x, z1: [T::zero(); W], x1: [T::zero(); W], z2: [T::zero(); W], x2: [T::zero(); W] };
        for i in 0..W {
            c.z1[i] = self.sh0[i] * x + self.b0[i];
            c.x1[i] = c.z1[i] + self.ta0[i] * c.z1[i].tanh();
        }
        let mut l = self.b2;
        for j in 0..W {
            let mut z = self.b1[j];
            for i in 0..W {
                z = z + self.sh1[j][i] * c.x1[i];
            }
            c.z2[j] = z;
            c.x2[j] = z + self.ta1[j] * z.tanh();
            l = l + self.sh2[j] * c.x2[j];
        }
        (l, c)
    }

    /// Accumulates `dl` into parameter gradients and returns `dl/dx · dl`.
    fn logit_backward(&self, c: &Cache<T>, dl: T, gr: &mut ChannelGrad<T>) -> T {
        let mut dx1 = [T::zero(); W];
        for j in 0..W {
            let dx2 = self.sh2[j] * dl;
            gr.h2[j] = gr.h2[j] + self.dh2[j] * c.x2[j] * dl;
            let t = c.z2[j].tanh();
            let dz2 = dx2 * (T::one() + self.ta1[j] * (T::one() - t * t));
            gr.a1[j] = gr.a1[j] + dx2 * t * self.da1[j];
            gr.b1[j] = gr.b1[j] + dz2;
            for i in 0..W {
                dx1[i] = dx1[i] + self.sh1[j][i] * dz2;
                gr.h1[j][i] = gr.h1[j][i] + self.dh1[j][i] * c.x1[i] * dz2;
            }
        }
        gr.b2 = gr.b2 + dl;
        let mut dx = T::zero();
        for i in 0..W {
            let t = c.z1[i].tanh();
            let dz1 = dx1[i] * (T::one() + self.ta0[i] * (T::one() - t * t));
            gr.a0[i] = gr.a0[i] + dx1[i] * t * self.da0[i];
            gr.h0[i] = gr.h0[i] + self.dh0[i] * c.x * dz1;
            gr.b0[i] = gr.b0[i] + dz1;
            dx = dx + self.sh0[i] * dz1;
        }
        dx
    }

    /// Cumulative distribution at `x`.
    pub fn cdf(&self, x: T) -> T {
        sigmoid(self.logit(x).0)
    }
}

struct Cache<T> {
    x: T,
    z1: [T; W],
    x1: [T; W],
    z2: [T; W],
    x2: [T; W],
}

#[derive(Clone)]
struct ChannelGrad<T> {
    h0: [T; W],
    b0: [T; W],
    a0: [T; W],
    h1: [[T; W]; W],
    b1: [T; W],
    a1: [T; W],
    h2: [T; W],
    b2: T,
}

impl<T: Real> ChannelGrad<T> {
    fn zero() -> Self {
        let z = [T::zero(); W];
        Self { h0: z, b0: z, a0: z, h1: [z; W], b1: z, a1: z, h2: z, b2: T::zero() }
    }
}

struct Likelihood<T> {
    p: T,
    bits: T,
    upper: Cache<T>,
    lower: Cache<T>,
    lu: T,
    ll: T,
}

/// `p(v) = c(v + ½) − c(v − ½)`, evaluated on the tail nearer to zero logit
/// for precision and floored at [`LIKELIHOOD_FLOOR`].
fn likelihood<T: Real>(ch: &Channel<T>, v: T) -> Likelihood<T> {
    let half = T::lit(0.5);
    let (lu, upper) = ch.logit(v + half);
    let (ll, lower) = ch.logit(v - half);
    let s = if lu + ll > T::zero() { -T::one() } else { T::one() };
    let p = (sigmoid(s * lu) - sigmoid(s * ll)).abs();
    let pb = p.max(T::lit(LIKELIHOOD_FLOOR));
    Likelihood { p, bits: -pb.log2(), upper, lower, lu, ll }
}

struct RateOp {
    offset: usize,
}

impl<T: Real> Backward<T> for RateOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        let y = x[0];
        let c = y.channels();
        let chans: Vec<Channel<T>> = (0..c).map(|k| Channel::from_tensors(&x[1..], self.offset + k)).collect();
        let mut grads = vec![ChannelGrad::zero(); c];
        let mut dy = vec![T::zero(); y.numel()];
        let ln2 = T::lit(std::f64::consts::LN_2);
        let gout = g.data()[0];
        for (i, &v) in y.data().iter().enumerate() {
            let k = i % c;
            let lk = likelihood(&chans[k], v);
            if lk.p <= T::lit(LIKELIHOOD_FLOOR) {
                continue;
            }
            let dp = -gout / (lk.p * ln2);
            let dsig = |l: T| sigmoid(l) * sigmoid(-l);
            let dlu = dp * dsig(lk.lu);
            let dll = -dp * dsig(lk.ll);
            let a = chans[k].logit_backward(&lk.upper, dlu, &mut grads[k]);
            let b = chans[k].logit_backward(&lk.lower, dll, &mut grads[k]);
            dy[i] = a + b;
        }
        let total = x[1].shape()[0];
        let mut out: Vec<Option<Tensor<T>>> = vec![need[0].then(|| Tensor::new(y.shape(), dy))];
        let mut fill = |idx: usize, per: usize, f: &dyn Fn(&ChannelGrad<T>, usize) -> T| {
            if !need[idx] {
                out.push(None);
                return;
            }
            let mut d = vec![T::zero(); x[idx].numel()];
            for (k, gr) in grads.iter().enumerate() {
                for j in 0..per {
                    d[(self.offset + k) * per + j] = f(gr, j);
                }
            }
            debug_assert_eq!(d.len(), total * per);
            out.push(Some(Tensor::new(x[idx].shape(), d)));
        };
        fill(1, W, &|gr, j| gr.h0[j]);
        fill(2, W, &|gr, j| gr.b0[j]);
        fill(3, W, &|gr, j| gr.a0[j]);
        fill(4, W * W, &|gr, j| gr.h1[j / W][j % W]);
        fill(5, W, &|gr, j| gr.b1[j]);
        fill(6, W, &|gr, j| gr.a1[j]);
        fill(7, W, &|gr, j| gr.h2[j]);
        fill(8, 1, &|gr, _| gr.b2);
        out
    }
}

/// Evaluation-time density in double precision.
#[derive(Clone, Debug)]
pub struct FrozenDensity {
    pub channels: Vec<Channel<f64>>,
}

/// Anything that assigns a cumulative probability per channel.
pub trait Cdf {
    fn channels(&self) -> usize;
    fn cdf(&self, channel: usize, x: f64) -> f64;

    /// Probability of the integer bin centred on `v`.
    fn pmf(&self, channel: usize, v: i32) -> f64 {
        let v = v as f64;
        (self.cdf(channel, v + 0.5) - self.cdf(channel, v - 0.5)).max(0.0)
    }
}

impl Cdf for FrozenDensity {
    fn channels(&self) -> usize {
        self.channels.len()
    }

    fn cdf(&self, channel: usize, x: f64) -> f64 {
        self.channels[channel].cdf(x)
    }

    fn pmf(&self, channel: usize, v: i32) -> f64 {
        likelihood(&self.channels[channel], v as f64).p
    }
}

/// `sum -log2 p(v)` over integer latents `[.., C]` mapped to density channels
/// `offset..`.
pub fn rate_bits(latents: &Tensor<i32>, density: &dyn Cdf, offset: usize) -> Result<f64> {
    let c = latents.channels();
    if offset + c > density.channels() {
        return Err(Error::model(format!(
            "density has {} channels, latents need {}",
            density.channels(),
            offset + c
        )));
    }
    let mut bits = 0.0;
    for (i, &v) in latents.data().iter().enumerate() {
        let p = density.pmf(offset + i % c, v).max(LIKELIHOOD_FLOOR);
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::model(format!("non-positive likelihood at element {i}")));
        }
        bits -= p.log2();
    }
    Ok(bits)
}

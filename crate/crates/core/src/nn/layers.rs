//! Parameterised building blocks. A layer only stores parameter ids and
//! shape configuration; values live in a [`ParamStore`].

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, Activation};
use super::params::uniform_init;
use super::{conv, norm, Graph, ParamStore, Real, Tensor, Var};

/// Registers freshly initialised parameters.
pub struct ParamBuilder {
    pub store: ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, id: &str, shape: &[usize], fan_in: usize, gain: f64) -> String {
        let t = uniform_init(&mut self.rng, shape, fan_in, gain);
        self.store.insert(id, t);
        id.to_string()
    }

    pub fn constant(&mut self, id: &str, shape: &[usize], v: f32) -> String {
        self.store.insert(id, Tensor::full(shape, v));
        id.to_string()
    }

    pub fn tensor(&mut self, id: &str, t: Tensor<f32>) -> String {
        self.store.insert(id, t);
        id.to_string()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn finish(self) -> ParamStore<f32> {
        self.store
    }
}

const INIT_GAIN: f64 = 1.732_050_807_568_877_2; // sqrt(3): unit fan-in variance

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, id: &str, cin: usize, cout: usize) -> Self {
        let w = pb.uniform(&format!("{id}.w"), &[cin, cout], cin, INIT_GAIN);
        let b = pb.constant(&format!("{id}.b"), &[cout], 0.0);
        Self { w, b, cin, cout }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, &self.w);
        let b = g.param(ps, &self.b);
        ops::linear(g, x, w, b)
    }
}

/// Multi-layer perceptron over the channel axis with GELU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new(pb: &mut ParamBuilder, id: &str, widths: &[usize]) -> Self {
        let layers = widths.windows(2).enumerate().map(|(i, w)| Linear::new(pb, &format!("{id}.{i}"), w[0], w[1])).collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = ops::gelu(g, x);
            }
            x = l.forward(g, ps, x);
        }
        x
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.cout)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `rank` spatial axes, cubic kernel `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(pb: &mut ParamBuilder, id: &str, rank: usize, k: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Self {
        let mut shape = vec![k; rank];
        shape.extend([cin, cout]);
        let fan = k.pow(rank as u32) * cin;
        let w = pb.uniform(&format!("{id}.w"), &shape, fan, INIT_GAIN);
        let b = pb.constant(&format!("{id}.b"), &[cout], 0.0);
        Self { w, b, stride, pad }
    }

    /// Stride-1 convolution preserving spatial size (odd `k`).
    pub fn same(pb: &mut ParamBuilder, id: &str, rank: usize, k: usize, cin: usize, cout: usize) -> Self {
        Self::new(pb, id, rank, k, cin, cout, 1, k / 2)
    }

    /// Kernel 3, stride 2: halves every spatial axis.
    pub fn down(pb: &mut ParamBuilder, id: &str, rank: usize, cin: usize, cout: usize) -> Self {
        Self::new(pb, id, rank, 3, cin, cout, 2, 1)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, &self.w);
        let b = g.param(ps, &self.b);
        conv::conv(g, x, w, b, self.stride, self.pad)
    }
}

/// Transposed 2x upsampling convolution.
#[derive(Clone, Debug)]
pub struct Up {
    pub w: String,
    pub b: String,
}

impl Up {
    pub fn new(pb: &mut ParamBuilder, id: &str, rank: usize, cin: usize, cout: usize) -> Self {
        let mut shape = vec![2; rank];
        shape.extend([cin, cout]);
        let w = pb.uniform(&format!("{id}.w"), &shape, cin, INIT_GAIN);
        let b = pb.constant(&format!("{id}.b"), &[cout], 0.0);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, &self.w);
        let b = g.param(ps, &self.b);
        conv::conv_transpose2x(g, x, w, b)
    }
}

/// Convolution, GELU, and a residual connection when `cin == cout`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub residual: bool,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder, id: &str, rank: usize, k: usize, cin: usize, cout: usize) -> Self {
        Self { conv: Conv::same(pb, id, rank, k, cin, cout), residual: cin == cout }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv.forward(g, ps, x);
        let y = ops::gelu(g, y);
        if self.residual {
            ops::add(g, x, y)
        } else {
            y
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, id: &str, c: usize) -> Self {
        let gamma = pb.constant(&format!("{id}.gamma"), &[c], 1.0);
        let beta = pb.constant(&format!("{id}.beta"), &[c], 0.0);
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let ga = g.param(ps, &self.gamma);
        let be = g.param(ps, &self.beta);
        norm::layer_norm(g, x, ga, be)
    }
}

/// Applies `act` to a variable; convenience for block code.
pub fn act<T: Real>(g: &mut Graph<T>, x: Var, a: Activation) -> Var {
    ops::activation(g, x, a)
}

/// Number of channels produced by [`positional_embedding`].
pub fn pe_channels(freqs: usize) -> usize {
    6 * freqs
}

/// Sinusoidal embedding of normalised voxel coordinates `i / dim` in `[0, 1)`.
///
/// Channel layout is `[axis][frequency][sin, cos]` with angular frequency
/// `pi * 2^k` for `k = 0..freqs`.
pub fn positional_embedding<T: Real>(dims: [usize; 3], freqs: usize) -> Tensor<T> {
    let c = pe_channels(freqs);
    let n = dims[0] * dims[1] * dims[2];
    let mut out = Vec::with_capacity(n * c);
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for d in 0..dims[2] {
                for (a, &i) in [h, w, d].iter().enumerate() {
                    let u = i as f64 / dims[a] as f64;
                    for k in 0..freqs {
                        let ang = PI * (1u64 << k) as f64 * u;
                        out.push(T::lit(ang.sin()));
                        out.push(T::lit(ang.cos()));
                    }
                }
            }
        }
    }
    Tensor::new(&[dims[0], dims[1], dims[2], c], out)
}

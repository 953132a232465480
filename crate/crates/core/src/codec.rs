//! Frequency-split plane encoder and frequency-modulated plane decoder.

use crate::error::{Error, Result};
use crate::nn::layers::{Conv, ConvBlock, LayerNorm, Mlp, ParamBuilder, Up};
use crate::nn::ops::{self, Activation};
use crate::nn::spectral::{gaussian_mask, spectral_filter};
use crate::nn::{Graph, ParamStore, Real, Tensor, Var};

pub const SCALE_FLOOR: f64 = 0.1;
pub const SIGMA_FLOOR: f64 = 0.5;

/// θ: pooled features to a mask gain and a Gaussian width in bins.
#[derive(Clone, Debug)]
pub struct ScalePredictor {
    pub mlp: Mlp,
}

impl ScalePredictor {
    pub fn new(pb: &mut ParamBuilder, id: &str, c: usize) -> Self {
        Self { mlp: Mlp::new(pb, id, &[c, c.max(2), 2]) }
    }

    /// Returns `(scale, sigma)` as one-element variables.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> (Var, Var) {
        let pooled = ops::global_avg_pool(g, x);
        let out = self.mlp.forward(g, ps, pooled);
        let s = ops::slice_channels(g, out, 0, 1);
        let sg = ops::slice_channels(g, out, 1, 1);
        let s = ops::activation(g, s, Activation::Softplus);
        let sg = ops::activation(g, sg, Activation::Softplus);
        let s = ops::affine(g, s, T::one(), T::lit(SCALE_FLOOR));
        let sg = ops::affine(g, sg, T::one(), T::lit(SIGMA_FLOOR));
        (s, sg)
    }
}

/// Splits `x` with the mask `scale·G(sigma)` and its complement `1 − scale·G`.
pub fn freq_split<T: Real>(g: &mut Graph<T>, x: Var, scale: Var, sigma: Var) -> (Var, Var) {
    let dims = g.value(x).spatial().to_vec();
    let mask = gaussian_mask(g, scale, sigma, &dims);
    let comp = ops::affine(g, mask, -T::one(), T::one());
    let low = spectral_filter(g, x, mask);
    let high = spectral_filter(g, x, comp);
    (low, high)
}

/// Frequency decomposition block.
#[derive(Clone, Debug)]
pub struct FdBlock {
    pub core: ConvBlock,
    pub theta: ScalePredictor,
    pub ln_low: LayerNorm,
    pub ln_out: LayerNorm,
    pub prior: ConvBlock,
    pub fuse: ConvBlock,
    pub dropout: f64,
}

impl FdBlock {
    pub fn new(pb: &mut ParamBuilder, id: &str, c: usize, k: usize, dropout: f64) -> Self {
        Self {
            core: ConvBlock::new(pb, &format!("{id}.core"), 2, k, c, c),
            theta: ScalePredictor::new(pb, &format!("{id}.theta"), c),
            ln_low: LayerNorm::new(pb, &format!("{id}.ln_low"), c),
            ln_out: LayerNorm::new(pb, &format!("{id}.ln_out"), c),
            prior: ConvBlock::new(pb, &format!("{id}.prior"), 2, k, c, c),
            fuse: ConvBlock::new(pb, &format!("{id}.fuse"), 2, k, 2 * c, c),
            dropout,
        }
    }

    /// Returns `(enhanced, fused_hf)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, hf: Var, seed: u64) -> (Var, Var) {
        let core = self.core.forward(g, ps, x);
        let (scale, sigma) = self.theta.forward(g, ps, x);
        let (low, high) = freq_split(g, x, scale, sigma);
        let low = ops::dropout(g, low, self.dropout, seed);
        let low = self.ln_low.forward(g, ps, low);
        let e = ops::add(g, core, low);
        let e = self.ln_out.forward(g, ps, e);
        let prior = self.prior.forward(g, ps, hf);
        let cat = ops::concat_channels(g, &[high, prior]);
        let fused = self.fuse.forward(g, ps, cat);
        (e, fused)
    }
}

/// Strided downsampling of both streams.
#[derive(Clone, Debug)]
pub struct DsBlock {
    pub base: Conv,
    pub hf: Conv,
}

impl DsBlock {
    pub fn new(pb: &mut ParamBuilder, id: &str, cin: usize, cout: usize) -> Self {
        Self { base: Conv::down(pb, &format!("{id}.base"), 2, cin, cout), hf: Conv::down(pb, &format!("{id}.hf"), 2, cin, cout) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, e: Var, hf: Var) -> Result<(Var, Var)> {
        let sh = g.shape(e);
        if sh[..2].iter().any(|d| d % 2 != 0) {
            return Err(Error::shape(format!("downsampling needs even spatial dims, got {sh:?}")));
        }
        Ok((self.base.forward(g, ps, e), self.hf.forward(g, ps, hf)))
    }
}

/// Aligns a high-frequency prior with the base features:
/// `hf + hf ⊙ Re(F⁻¹(F(base) ⊙ G(sigma)))`.
pub fn align_hf<T: Real>(g: &mut Graph<T>, base: Var, hf: Var, sigma: Var) -> Result<Var> {
    if g.shape(base) != g.shape(hf) {
        return Err(Error::shape(format!("align: base {:?} vs hf {:?}", g.shape(base), g.shape(hf))));
    }
    let dims = g.value(base).spatial().to_vec();
    let one = g.constant(Tensor::scalar(T::one()));
    let mask = gaussian_mask(g, one, sigma, &dims);
    let xh = spectral_filter(g, base, mask);
    let m = ops::mul(g, hf, xh);
    Ok(ops::add(g, hf, m))
}

/// Frequency modulation block.
#[derive(Clone, Debug)]
pub struct FmBlock {
    pub sigma: String,
    pub core: ConvBlock,
    pub ln_h: LayerNorm,
    pub ln_out: LayerNorm,
}

impl FmBlock {
    pub fn new(pb: &mut ParamBuilder, id: &str, c: usize, k: usize) -> Self {
        Self {
            sigma: pb.constant(&format!("{id}.sigma"), &[1], 1.0),
            core: ConvBlock::new(pb, &format!("{id}.core"), 2, k, c, c),
            ln_h: LayerNorm::new(pb, &format!("{id}.ln_h"), c),
            ln_out: LayerNorm::new(pb, &format!("{id}.ln_out"), c),
        }
    }

    /// Gaussian width used for alignment: `softplus(raw) + 0.5` bins.
    pub fn sigma<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>) -> Var {
        let raw = g.param(ps, &self.sigma);
        let s = ops::activation(g, raw, Activation::Softplus);
        ops::affine(g, s, T::one(), T::lit(SIGMA_FLOOR))
    }

    /// Returns `(reconstructed, aligned_hf)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, base: Var, hf: Var) -> Result<(Var, Var)> {
        let sigma = self.sigma(g, ps);
        let aligned = align_hf(g, base, hf, sigma)?;
        let core = self.core.forward(g, ps, base);
        let h = self.ln_h.forward(g, ps, aligned);
        let r = ops::add(g, core, h);
        Ok((self.ln_out.forward(g, ps, r), aligned))
    }
}

/// Transposed-convolution upsampling of both streams.
#[derive(Clone, Debug)]
pub struct UsBlock {
    pub base: Up,
    pub hf: Up,
}

impl UsBlock {
    pub fn new(pb: &mut ParamBuilder, id: &str, cin: usize, cout: usize) -> Self {
        Self { base: Up::new(pb, &format!("{id}.base"), 2, cin, cout), hf: Up::new(pb, &format!("{id}.hf"), 2, cin, cout) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, base: Var, hf: Var) -> (Var, Var) {
        (self.base.forward(g, ps, base), self.hf.forward(g, ps, hf))
    }
}

/// Channel count at stage `s` for base width `c2`.
pub fn stage_channels(c2: usize, s: usize) -> usize {
    c2 << s
}

/// Encoder and decoder of one plane.
#[derive(Clone, Debug)]
pub struct PlaneCodec {
    pub stages: usize,
    pub c2: usize,
    pub fd: Vec<FdBlock>,
    pub ds: Vec<DsBlock>,
    pub fm: Vec<FmBlock>,
    pub us: Vec<UsBlock>,
}

impl PlaneCodec {
    pub fn new(pb: &mut ParamBuilder, id: &str, c2: usize, stages: usize, k: usize, dropout: f64) -> Self {
        let ch = |s| stage_channels(c2, s);
        let fd = (0..stages).map(|s| FdBlock::new(pb, &format!("{id}.fd{s}"), ch(s), k, dropout)).collect();
        let ds = (0..stages).map(|s| DsBlock::new(pb, &format!("{id}.ds{s}"), ch(s), ch(s + 1))).collect();
        // fm[s] operates at stage s; us[s] maps stage s + 1 to stage s
        let fm = (0..=stages).map(|s| FmBlock::new(pb, &format!("{id}.fm{s}"), ch(s), k)).collect();
        let us = (0..stages).map(|s| UsBlock::new(pb, &format!("{id}.us{s}"), ch(s + 1), ch(s))).collect();
        Self { stages, c2, fd, ds, fm, us }
    }

    pub fn latent_dims(&self, plane: [usize; 2]) -> [usize; 2] {
        plane.map(|d| d >> self.stages)
    }

    pub fn latent_channels(&self) -> usize {
        stage_channels(self.c2, self.stages)
    }

    /// `(X_{s+1}^H, X_{s+1}) = DS(FD(X_s^H, X_s))` for `s < S`, starting from
    /// a zero prior. Returns `(content, highfreq)`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, seed: u64) -> Result<(Var, Var)> {
        let sh = g.shape(x).to_vec();
        let f = 1usize << self.stages;
        if sh.len() != 3 || sh[0] % f != 0 || sh[1] % f != 0 {
            return Err(Error::shape(format!("plane {sh:?} is not divisible by 2^{}", self.stages)));
        }
        let mut base = x;
        let mut hf = g.constant(Tensor::zeros(&sh));
        for s in 0..self.stages {
            let (e, fused) = self.fd[s].forward(g, ps, base, hf, seed.wrapping_add(s as u64));
            (base, hf) = self.ds[s].forward(g, ps, e, fused)?;
        }
        Ok((base, hf))
    }

    /// FM at every stage from coarse to fine with US between them.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, content: Var, hf: Var) -> Result<Var> {
        let want = self.latent_channels();
        for v in [content, hf] {
            if g.shape(v).len() != 3 || g.shape(v)[2] != want {
                return Err(Error::shape(format!("latent {:?} does not have {want} channels", g.shape(v))));
            }
        }
        let (mut base, mut hf) = (content, hf);
        for s in (0..=self.stages).rev() {
            let (r, aligned) = self.fm[s].forward(g, ps, base, hf)?;
            if s == 0 {
                return Ok(r);
            }
            (base, hf) = self.us[s - 1].forward(g, ps, r, aligned);
        }
        unreachable!()
    }
}

//! Rate-distortion training: focal occupancy loss, the Lagrangian objective
//! and the optimisation loop.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, VoxelGrid};
use crate::model::{voxelize_for, Model, Origin};
use crate::nn::ops;
use crate::nn::optim::{cosine_lr, Adam};
use crate::nn::{Backward, Graph, ParamStore, Real, Tensor, Var};

/// Smallest `p_t` entering the logarithm.
pub const FOCAL_CLAMP: f64 = 1e-7;

struct FocalOp {
    target: Vec<bool>,
    alpha: f64,
    gamma: f64,
}

impl FocalOp {
    fn weight(&self, occupied: bool) -> f64 {
        if occupied {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

impl<T: Real> Backward<T> for FocalOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let n = self.target.len() as f64;
        let gs = g.data()[0].as_f64() / n;
        let d = x[0]
            .data()
            .iter()
            .zip(&self.target)
            .map(|(&p, &occ)| {
                let p = p.as_f64();
                let pt = if occ { p } else { 1.0 - p };
                if pt < FOCAL_CLAMP {
                    return T::zero();
                }
                let q = 1.0 - pt;
                let a = self.weight(occ);
                // d/dp_t of -a q^γ ln p_t
                let mut dpt = -a * q.powf(self.gamma) / pt;
                if self.gamma != 0.0 && q > 0.0 {
                    dpt += a * self.gamma * q.powf(self.gamma - 1.0) * pt.ln();
                }
                T::lit(gs * if occ { dpt } else { -dpt })
            })
            .collect();
        vec![Some(Tensor::new(x[0].shape(), d))]
    }
}

/// Mean over voxels of `-a (1 - p_t)^γ ln p_t`, with `p_t = p` and `a = α`
/// on occupied voxels and `p_t = 1 - p`, `a = 1 - α` on empty ones.
pub fn focal_loss<T: Real>(g: &mut Graph<T>, prob: Var, target: &[bool], alpha: f64, gamma: f64) -> Var {
    assert_eq!(g.value(prob).data().len(), target.len(), "focal target size");
    let op = FocalOp { target: target.to_vec(), alpha, gamma };
    let total: f64 = g
        .value(prob)
        .data()
        .iter()
        .zip(target)
        .map(|(&p, &occ)| {
            let p = p.as_f64();
            let pt = (if occ { p } else { 1.0 - p }).max(FOCAL_CLAMP);
            -op.weight(occ) * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    let v = Tensor::scalar(T::lit(total / target.len() as f64));
    g.record(v, &[prob], op)
}

/// Loss terms of one step. Rates are in bits per original point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    /// Focal distortion, nats per voxel.
    pub distortion: f64,
    pub rate: f64,
    pub rate_content: f64,
    pub rate_highfreq: f64,
    pub total: f64,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `R = λ1 R_content + λ2 R_highfreq`, `L = D + λ R` on graph values.
pub struct RdTerms {
    pub total: Var,
    pub report: LossReport,
}

/// Combines distortion and per-stream bit counts into the Lagrangian;
/// rates are divided by `points` first.
#[allow(clippy::too_many_arguments)]
pub fn rd_loss<T: Real>(g: &mut Graph<T>, distortion: Var, bits_content: Var, bits_hf: Var, points: usize, lambda: f64, lambda1: f64, lambda2: f64) -> RdTerms {
    let inv = 1.0 / points as f64;
    let rc = ops::affine(g, bits_content, T::lit(lambda1 * inv), T::zero());
    let rh = ops::affine(g, bits_hf, T::lit(lambda2 * inv), T::zero());
    let r = ops::add(g, rc, rh);
    let lr = ops::affine(g, r, T::lit(lambda), T::zero());
    let total = ops::add(g, distortion, lr);
    let v = |x: Var| g.value(x).data()[0].as_f64();
    let report = LossReport {
        step: 0,
        distortion: v(distortion),
        rate: v(r),
        rate_content: v(bits_content) * inv,
        rate_highfreq: v(bits_hf) * inv,
        total: v(total),
        lambda,
        lambda1,
        lambda2,
    };
    RdTerms { total, report }
}

/// Base trade-off for rates in bits per point and focal distortion averaged
/// over voxels.
pub const LAMBDA0: f64 = 1e-3;

fn default_ladder() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0, 8.0]
}

/// Training hyperparameters; readable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Multipliers of `lambda` traced by a ladder run.
    pub ladder: Vec<f64>,
    pub alpha_focal: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Learning-rate multiplier of the entropy-model parameters. They see only
    /// rate gradients, and Adam normalizes those away, so without it the rate
    /// falls at the same speed for every λ.
    pub density_lr_scale: f64,
    pub steps: usize,
    pub clip: f64,
    pub seed: u64,
    pub uplift_rate: usize,
    pub uplift_steps: usize,
    pub uplift_lr: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            lambda: LAMBDA0,
            lambda1: 1.0,
            lambda2: 1.0,
            ladder: default_ladder(),
            alpha_focal: 0.75,
            gamma: 2.0,
            lr: 3e-3,
            density_lr_scale: 10.0,
            steps: 500,
            clip: 1.0,
            seed: 0,
            uplift_rate: 1,
            uplift_steps: 200,
            uplift_lr: 3e-3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::invalid(format!("bad training config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let pos = [self.lambda1, self.lambda2, self.lr, self.density_lr_scale, self.clip, self.uplift_lr];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda1, lambda2, lr, density_lr_scale, clip and uplift_lr must be positive and lambda non-negative"));
        }
        if !(0.0..=1.0).contains(&self.alpha_focal) || !(self.gamma >= 0.0) {
            return Err(Error::invalid("alpha_focal must lie in [0, 1] and gamma be non-negative"));
        }
        if self.ladder.iter().any(|v| !(*v > 0.0)) || self.uplift_rate == 0 {
            return Err(Error::invalid("ladder multipliers and uplift rate must be positive"));
        }
        Ok(())
    }
}

/// A training sample: the voxelized target and the original point count.
#[derive(Clone, Debug)]
pub struct Sample {
    pub grid: VoxelGrid,
    pub points: usize,
    /// Original points, used by the uplifter stage.
    pub cloud: PointCloud,
}

impl Sample {
    /// Voxelizes `cloud` on the model grid. Points outside the grid are
    /// dropped from the target but still counted in `points`.
    pub fn from_cloud(cloud: PointCloud, cfg: &ModelConfig, origin: Origin) -> Result<Self> {
        let vox = voxelize_for(&cloud, cfg, origin)?;
        Ok(Self { grid: vox.grid, points: cloud.len(), cloud })
    }
}

pub struct Trainer {
    pub model: Model,
    pub ps: ParamStore<f32>,
    pub cfg: TrainConfig,
    adam: Adam<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, mut ps: ParamStore<f32>, cfg: TrainConfig) -> Self {
        ps.set_trainable("uplift", false);
        Self { adam: Adam::new(Some(cfg.clip)), model, ps, cfg, step: 0 }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One descent step on `L = D + λ R`.
    pub fn train_step(&mut self, sample: &Sample) -> Result<LossReport> {
        let c = &self.cfg;
        let seed = c.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(self.step as u64);
        let mut g = Graph::new(true);
        let out = self.model.forward_train(&mut g, &self.ps, &sample.grid, seed)?;
        let d = focal_loss(&mut g, out.prob, &sample.grid.occupancy, c.alpha_focal, c.gamma);
        let rd = rd_loss(&mut g, d, out.rate_content, out.rate_hf, sample.points, c.lambda, c.lambda1, c.lambda2);
        let mut report = rd.report;
        report.step = self.step;
        if !report.total.is_finite() {
            return Err(Error::model(format!(
                "non-finite loss at step {}: D = {}, R_content = {}, R_highfreq = {}",
                self.step, report.distortion, report.rate_content, report.rate_highfreq
            )));
        }
        let grads = g.backward(rd.total);
        self.ps.zero_grad();
        grads.accumulate(&mut self.ps);
        let gn = self.ps.grad_norm().as_f64();
        if !gn.is_finite() {
            return Err(Error::model(format!("non-finite gradient norm at step {}", self.step)));
        }
        let ds = c.density_lr_scale;
        self.adam.step_scaled(&mut self.ps, cosine_lr(c.lr, self.step, c.steps), |id| if id.starts_with("entropy.") { ds } else { 1.0 });
        self.step += 1;
        Ok(report)
    }

    /// Runs `cfg.steps` steps cycling through `samples`; `on_step` sees
    /// every report.
    pub fn fit(&mut self, samples: &[Sample], mut on_step: impl FnMut(&Trainer, &LossReport)) -> Result<Vec<LossReport>> {
        if samples.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let mut out = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let r = self.train_step(&samples[self.step % samples.len()])?;
            on_step(self, &r);
            out.push(r);
        }
        Ok(out)
    }

    /// Trains only the uplifter on decoded features with a per-voxel
    /// chamfer loss against the original points. Returns the final loss.
    pub fn fit_uplifter(&mut self, samples: &[Sample]) -> Result<f64> {
        let m = &self.model;
        let mut prepared = Vec::with_capacity(samples.len());
        for s in samples {
            let enc = m.encode(&self.ps, &s.grid, s.points)?;
            let dec = m.decode(&self.ps, &enc.bitstream)?;
            let grid = dec.grid(dec.default_mode())?;
            let voxels: Vec<usize> = grid.occupied_indices().collect();
            let targets = voxel_targets(&grid, &voxels, &s.cloud);
            prepared.push((dec.features, voxels, targets, grid.voxel_size));
        }
        let mut ps = self.ps.clone();
        for (id, p) in ps.iter_mut() {
            p.trainable = id.starts_with("uplift");
        }
        let mut adam = Adam::new(Some(self.cfg.clip));
        let f = self.cfg.uplift_rate;
        let mut last = f64::NAN;
        for step in 0..self.cfg.uplift_steps {
            let (feat, voxels, targets, vs) = &prepared[step % prepared.len()];
            let mut g = Graph::new(true);
            let fv = g.constant(feat.clone());
            let off = m.uplifter.offsets(&mut g, &ps, fv, voxels, f, *vs)?;
            let loss = chamfer_loss(&mut g, off, targets, f);
            last = g.value(loss).data()[0] as f64;
            let grads = g.backward(loss);
            ps.zero_grad();
            grads.accumulate(&mut ps);
            adam.step(&mut ps, cosine_lr(self.cfg.uplift_lr, step, self.cfg.uplift_steps));
        }
        for (id, p) in ps.iter() {
            if id.starts_with("uplift") {
                *self.ps.value_mut(id) = p.value.clone();
            }
        }
        Ok(last)
    }
}

/// Original points of every voxel as offsets from its center.
pub fn voxel_targets(grid: &VoxelGrid, voxels: &[usize], cloud: &PointCloud) -> Vec<Vec<[f64; 3]>> {
    let mut slot = std::collections::HashMap::with_capacity(voxels.len());
    for (i, &v) in voxels.iter().enumerate() {
        slot.insert(v, i);
    }
    let mut out = vec![Vec::new(); voxels.len()];
    for p in &cloud.points {
        if let Some(i) = grid.locate(p).and_then(|v| slot.get(&v)) {
            let c = grid.center(voxels[*i]);
            out[*i].push(std::array::from_fn(|a| p[a] - c[a]));
        }
    }
    out
}

struct ChamferOp {
    grad: Vec<f64>,
}

impl<T: Real> Backward<T> for ChamferOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = g.data()[0].as_f64();
        vec![Some(Tensor::new(x[0].shape(), self.grad.iter().map(|&v| T::lit(v * s)).collect()))]
    }
}

/// Mean over voxels with targets of the symmetric chamfer distance between
/// the voxel's `f` predicted offsets and its target offsets.
pub fn chamfer_loss<T: Real>(g: &mut Graph<T>, offsets: Var, targets: &[Vec<[f64; 3]>], f: usize) -> Var {
    let o: Vec<f64> = g.value(offsets).data().iter().map(|v| v.as_f64()).collect();
    assert_eq!(o.len(), targets.len() * f * 3, "offsets do not match voxel count");
    let mut grad = vec![0.0; o.len()];
    let mut total = 0.0;
    let used = targets.iter().filter(|t| !t.is_empty()).count().max(1) as f64;
    let d2 = |p: &[f64], q: &[f64; 3]| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
    for (i, tg) in targets.iter().enumerate() {
        if tg.is_empty() {
            continue;
        }
        let base = i * f * 3;
        let pred: Vec<&[f64]> = (0..f).map(|j| &o[base + 3 * j..base + 3 * j + 3]).collect();
        for (j, p) in pred.iter().enumerate() {
            let (k, d) = tg.iter().enumerate().map(|(k, q)| (k, d2(p, q))).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            total += d / f as f64;
            for a in 0..3 {
                grad[base + 3 * j + a] += 2.0 * (p[a] - tg[k][a]) / f as f64;
            }
        }
        for q in tg {
            let (j, d) = pred.iter().enumerate().map(|(j, p)| (j, d2(p, q))).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            total += d / tg.len() as f64;
            for a in 0..3 {
                grad[base + 3 * j + a] += 2.0 * (pred[j][a] - q[a]) / tg.len() as f64;
            }
        }
    }
    for v in &mut grad {
        *v /= used;
    }
    g.record(Tensor::scalar(T::lit(total / used)), &[offsets], ChamferOp { grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(p: &[f64], t: &[bool], a: f64, gm: f64) -> f64 {
        let mut g = Graph::new(false);
        let v = g.constant(Tensor::new(&[p.len()], p.to_vec()));
        let l = focal_loss(&mut g, v, t, a, gm);
        g.value(l).data()[0]
    }

    #[test]
    fn reduces_to_cross_entropy() {
        let l = eval(&[0.5; 10], &[true; 10], 1.0, 0.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_voxels_cost_nothing() {
        assert!(eval(&[1.0, 0.0], &[true, false], 0.75, 2.0).abs() < 1e-15);
        assert!(eval(&[1.0 - 1e-9], &[true], 0.75, 2.0) < 1e-15);
    }

    #[test]
    fn single_voxel_value() {
        let want = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
        assert!((eval(&[0.9], &[true], 0.25, 2.0) - want).abs() < 1e-15);
        assert!((want - 2.634e-4).abs() < 1e-7);
        // empty voxel with p = 0.1 has p_t = 0.9 and weight 1 - α
        assert!((eval(&[0.1], &[false], 0.75, 2.0) - want).abs() < 1e-15);
    }

    #[test]
    fn clamps_certain_mistakes() {
        let l = eval(&[0.0], &[true], 1.0, 0.0);
        assert!((l + FOCAL_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.3)).collect();
        let p = Tensor::from_fn(&[4, 4, 4, 1], |_| rng.gen_range(0.05..0.95));
        for (a, gm) in [(0.75, 2.0), (0.5, 0.0), (0.25, 0.5)] {
            let err = grad_check(|g, v| focal_loss(g, v[0], &t, a, gm), &[p.clone()], 1e-6);
            assert!(err < 1e-4, "alpha {a} gamma {gm}: {err}");
        }
    }

    #[test]
    fn rd_identities() {
        let mut g = Graph::<f64>::new(false);
        let d = g.constant(Tensor::scalar(0.0));
        let rc = g.constant(Tensor::scalar(3.0));
        let rh = g.constant(Tensor::scalar(5.0));
        let r = rd_loss(&mut g, d, rc, rh, 1, 1.0, 1.0, 1.0);
        assert_eq!(r.report.total, 8.0);
        let d = g.constant(Tensor::scalar(0.7));
        let r = rd_loss(&mut g, d, rc, rh, 4, 0.0, 1.0, 1.0);
        assert_eq!(r.report.total, 0.7);
        let r = rd_loss(&mut g, d, rc, rh, 4, 0.3, 2.0, 0.5);
        assert!((r.report.rate - (2.0 * 0.75 + 0.5 * 1.25)).abs() < 1e-15);
        assert!((r.report.total - (0.7 + 0.3 * r.report.rate)).abs() < 1e-15);
    }

    #[test]
    fn chamfer_gradients_and_values() {
        let targets = vec![vec![[0.01, 0.0, 0.02], [-0.03, 0.02, 0.0], [0.0, -0.04, 0.01]], vec![], vec![[0.02, 0.02, -0.02]]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let off = Tensor::from_fn(&[6, 3], |_| rng.gen_range(-0.05..0.05));
        let err = grad_check(|g, v| chamfer_loss(g, v[0], &targets, 2), &[off], 1e-7);
        assert!(err < 1e-4, "{err}");
        // exact hit costs nothing
        let mut g = Graph::<f64>::new(false);
        let o = g.constant(Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]));
        let l = chamfer_loss(&mut g, o, &[vec![[0.1, 0.2, 0.3]]], 1);
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let c = TrainConfig::default();
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let part = TrainConfig::from_toml("steps = 3\nlambda = 0.5\n[model]\nname = \"x\"\ndims = [32, 32, 32]\nvoxel_size = 0.1\nc1 = 4\nc2 = 4\nstages = 2\ngroup = 4\nembed_blocks = 1\nembed_kernel = 3\nphi_hidden = 0\npe_freqs = 1\nfuse_kernel = 1\ncodec_kernel = 3\ndropout = 0.0\nlsar_blocks = 1\nhead_kernel = 3\nuplift_hidden = 4\ndensity_init_scale = 10.0\nseed = 1\n").unwrap();
        assert_eq!(part.steps, 3);
        assert_eq!(part.model.dims, [32, 32, 32]);
        assert!(TrainConfig::from_toml("stepz = 3").is_err());
        assert!(TrainConfig::from_toml("lr = -1.0").is_err());
    }

    fn tiny_sample(cfg: &ModelConfig) -> Sample {
        let mut grid = VoxelGrid::empty(cfg.dims, cfg.voxel_size, [0.0; 3]);
        let mut pts = Vec::new();
        for h in 0..cfg.dims[0] {
            for w in 0..cfg.dims[1] {
                grid.set(h, w, 1, true);
                let i = grid.index(h, w, 1);
                let c = grid.center(i);
                pts.push([c[0] + 0.02, c[1] - 0.01, c[2]]);
            }
        }
        Sample { grid, points: pts.len(), cloud: PointCloud::new(pts) }
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        let model = ModelConfig { dims: [8, 8, 8], c1: 2, c2: 2, pe_freqs: 1, uplift_hidden: 4, ..ModelConfig::desk() };
        TrainConfig { model, steps, lambda: 0.01, uplift_steps: 30, ..Default::default() }
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_cfg(3);
        let s = tiny_sample(&cfg.model);
        let run = || {
            let (m, ps) = Model::new(cfg.model.clone()).unwrap();
            let mut t = Trainer::new(m, ps, cfg.clone());
            (t.fit(std::slice::from_ref(&s), |_, _| {}).unwrap(), t.ps)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        for ((_, x), (_, y)) in pa.iter().zip(pb.iter()) {
            assert_eq!(x.value, y.value);
        }
        for r in &a {
            assert!((r.total - (r.distortion + r.lambda * r.rate)).abs() < 1e-6 * r.total.abs().max(1.0));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig { lr: 1e-300, ..tiny_cfg(2) };
        let s = tiny_sample(&cfg.model);
        let (m, ps) = Model::new(cfg.model.clone()).unwrap();
        let before = ps.clone();
        let mut t = Trainer::new(m, ps, cfg);
        t.fit(&[s], |_, _| {}).unwrap();
        for ((_, x), (_, y)) in before.iter().zip(t.ps.iter()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn uplifter_stage_reduces_chamfer() {
        let cfg = tiny_cfg(1);
        let s = tiny_sample(&cfg.model);
        let (m, ps) = Model::new(cfg.model.clone()).unwrap();
        let mut t = Trainer::new(m, ps, cfg.clone());
        let frozen: Vec<_> = t.ps.iter().filter(|(id, _)| !id.starts_with("uplift")).map(|(id, p)| (id.clone(), p.value.clone())).collect();
        let mut first = Trainer::new(t.model.clone(), t.ps.clone(), TrainConfig { uplift_steps: 1, ..cfg });
        let l0 = first.fit_uplifter(std::slice::from_ref(&s)).unwrap();
        let l1 = t.fit_uplifter(std::slice::from_ref(&s)).unwrap();
        assert!(l1 < l0, "{l1} >= {l0}");
        for (id, v) in frozen {
            assert_eq!(t.ps.value(&id), &v, "{id} changed");
        }
    }
}

//! End-to-end codec: voxel grid → triplane latents → `.flt` container →
//! occupancy probabilities → points.

use crate::codec::PlaneCodec;
use crate::config::ModelConfig;
use crate::entropy::bitstream::{Bitstream, Header};
use crate::entropy::coder::{ec_decode, ec_encode, CdfTables};
use crate::entropy::{quantize_eval, quantize_train, rate_bits, FactorizedDensity};
use crate::error::{Error, Result};
use crate::geometry::{devoxelize, voxelize, PointCloud, VoxelGrid, Voxelization};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::ParamBuilder;
use crate::nn::ops;
use crate::nn::{Graph, ParamStore, Real, Tensor, Var};
use crate::refinement::{Binarize, OccupancyPrediction, Refiner, Uplifter};
use crate::triplane::{occupancy_tensor, Plane, Triplane};

/// Placement of the voxel grid relative to a cloud.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Origin {
    /// Minimum corner of the cloud's bounding box.
    Min,
    /// Grid centered on the bounding-box center.
    Center,
    At([f64; 3]),
}

/// Grid origin for `cloud`, rounded to the `f32` stored in the header.
pub fn grid_origin(cloud: &PointCloud, cfg: &ModelConfig, origin: Origin) -> Result<[f64; 3]> {
    let (lo, hi) = cloud.bounds().ok_or_else(|| Error::data("no points"))?;
    let o = match origin {
        Origin::Min => lo,
        Origin::Center => std::array::from_fn(|a| (lo[a] + hi[a]) / 2.0 - cfg.dims[a] as f64 * cfg.voxel_size / 2.0),
        Origin::At(o) => o,
    };
    Ok(o.map(|v| {
        let r = v as f32;
        // never round above the minimum corner, which would drop its point
        if (r as f64) > v && matches!(origin, Origin::Min) {
            r.next_down() as f64
        } else {
            r as f64
        }
    }))
}

pub fn voxelize_for(cloud: &PointCloud, cfg: &ModelConfig, origin: Origin) -> Result<Voxelization> {
    let o = grid_origin(cloud, cfg, origin)?;
    voxelize(cloud, cfg.voxel_size as f32 as f64, cfg.dims, o)
}

/// Per-plane content and high-frequency latents, planes in `HW, HD, WD`
/// order.
#[derive(Clone, Copy, Debug)]
pub struct Latents {
    pub content: [Var; 3],
    pub hf: [Var; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLatents {
    pub content: Vec<Tensor<i32>>,
    pub hf: Vec<Tensor<i32>>,
}

/// Training-mode forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainOutput {
    pub prob: Var,
    pub refined: Var,
    /// Bits of the noisy content latents.
    pub rate_content: Var,
    /// Bits of the noisy high-frequency latents.
    pub rate_hf: Var,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    pub latents: QuantizedLatents,
    /// Model estimate of the two substreams' size in bits.
    pub estimated_bits: f64,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub header: Header,
    pub latents: QuantizedLatents,
    pub prob: OccupancyPrediction,
    /// Refined voxel features `[H,W,D,C1]`.
    pub features: Tensor<f32>,
}

impl Decoded {
    pub fn grid(&self, mode: Binarize) -> Result<VoxelGrid> {
        let h = &self.header;
        self.prob.binarize(mode, h.voxel_size as f64, h.origin.map(|v| v as f64))
    }

    /// Density-matched binarization with the transmitted voxel count.
    pub fn default_mode(&self) -> Binarize {
        Binarize::TopK(self.header.occupied as usize)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub triplane: Triplane,
    pub planes: Vec<PlaneCodec>,
    pub content_density: FactorizedDensity,
    pub hf_density: FactorizedDensity,
    pub refiner: Refiner,
    pub uplifter: Uplifter,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(cfg.seed);
        let triplane = Triplane::new(&mut pb, &cfg.triplane_spec())?;
        let planes = Plane::ALL
            .iter()
            .map(|p| PlaneCodec::new(&mut pb, &format!("codec.{}", p.name()), cfg.c2, cfg.stages, cfg.codec_kernel, cfg.dropout))
            .collect();
        let n = 3 * cfg.latent_channels();
        let content_density = FactorizedDensity::new(&mut pb, "entropy.content", n, cfg.density_init_scale);
        let hf_density = FactorizedDensity::new(&mut pb, "entropy.hf", n, cfg.density_init_scale);
        let refiner = Refiner::new(&mut pb, "refine", cfg.dims, cfg.c1, cfg.lsar_blocks, cfg.head_kernel);
        let uplifter = Uplifter::new(&mut pb, "uplift", cfg.c1, cfg.uplift_hidden);
        let m = Self { cfg, triplane, planes, content_density, hf_density, refiner, uplifter };
        Ok((m, pb.finish()))
    }

    /// Rebuilds the model a checkpoint was trained with and checks that its
    /// parameters match.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, ParamStore<f32>)> {
        let cfg = ModelConfig::from_json(&ck.config)?;
        if cfg.hash() != ck.config_hash {
            return Err(Error::model(format!(
                "checkpoint hash {:016x} does not match its config ({:016x})",
                ck.config_hash,
                cfg.hash()
            )));
        }
        let (m, fresh) = Self::new(cfg)?;
        for (id, p) in fresh.iter() {
            match ck.params.get(id) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                Some(q) => {
                    return Err(Error::model(format!(
                        "parameter {id} has shape {:?}, model expects {:?}",
                        q.value.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(Error::model(format!("checkpoint lacks parameter {id}"))),
            }
        }
        if let Some(id) = ck.params.ids().find(|id| fresh.get(id).is_none()) {
            return Err(Error::model(format!("checkpoint has unknown parameter {id}")));
        }
        Ok((m, ck.params))
    }

    pub fn checkpoint(&self, ps: &ParamStore<f32>) -> Checkpoint {
        Checkpoint { config: self.cfg.to_json(), config_hash: self.cfg.hash(), params: ps.clone() }
    }

    pub fn latent_channels(&self) -> usize {
        self.cfg.latent_channels()
    }

    /// Latent `[h, w, C_S]` of each plane.
    pub fn latent_shapes(&self) -> Vec<Vec<usize>> {
        Plane::ALL
            .iter()
            .zip(&self.planes)
            .map(|(p, c)| {
                let [a, b] = c.latent_dims(p.dims(self.cfg.dims));
                vec![a, b, self.latent_channels()]
            })
            .collect()
    }

    fn offsets(&self) -> [usize; 3] {
        let c = self.latent_channels();
        [0, c, 2 * c]
    }

    fn check_grid(&self, grid: &VoxelGrid) -> Result<()> {
        if grid.dims != self.cfg.dims {
            return Err(Error::shape(format!("grid {:?} does not match model dims {:?}", grid.dims, self.cfg.dims)));
        }
        Ok(())
    }

    pub fn analysis<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, occ: Var, seed: u64) -> Result<Latents> {
        let fv = self.triplane.embed_voxels(g, ps, occ);
        let xs = self.triplane.project(g, ps, fv);
        let mut content = [xs[0]; 3];
        let mut hf = [xs[0]; 3];
        for p in 0..3 {
            (content[p], hf[p]) = self.planes[p].encode(g, ps, xs[p], seed.wrapping_add(1000 * p as u64))?;
        }
        Ok(Latents { content, hf })
    }

    /// `(refined features, occupancy probability)`.
    pub fn synthesis<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, lat: &Latents) -> Result<(Var, Var)> {
        let mut planes = [lat.content[0]; 3];
        for p in 0..3 {
            planes[p] = self.planes[p].decode(g, ps, lat.content[p], lat.hf[p])?;
        }
        let fv = self.triplane.back_project(g, ps, &planes)?;
        let fused = self.triplane.fuse_positional(g, ps, fv);
        self.refiner.forward(g, ps, fused)
    }

    /// Noise-relaxed pass used for training.
    pub fn forward_train<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, grid: &VoxelGrid, seed: u64) -> Result<TrainOutput> {
        self.check_grid(grid)?;
        let occ = g.constant(occupancy_tensor(grid));
        let lat = self.analysis(g, ps, occ, seed)?;
        let off = self.offsets();
        let mut noisy = lat;
        let mut rc = Vec::with_capacity(3);
        let mut rh = Vec::with_capacity(3);
        for p in 0..3 {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(2 * p as u64);
            noisy.content[p] = quantize_train(g, lat.content[p], s);
            noisy.hf[p] = quantize_train(g, lat.hf[p], s + 1);
            rc.push(self.content_density.rate(g, ps, noisy.content[p], off[p]));
            rh.push(self.hf_density.rate(g, ps, noisy.hf[p], off[p]));
        }
        let rate_content = ops::add_n(g, &rc);
        let rate_hf = ops::add_n(g, &rh);
        let (refined, prob) = self.synthesis(g, ps, &noisy)?;
        Ok(TrainOutput { prob, refined, rate_content, rate_hf })
    }

    pub fn tables(&self, ps: &ParamStore<f32>) -> (CdfTables, CdfTables) {
        (
            CdfTables::from_density(&self.content_density.freeze(ps)),
            CdfTables::from_density(&self.hf_density.freeze(ps)),
        )
    }

    /// Rounded latents of a grid.
    pub fn quantized_latents(&self, ps: &ParamStore<f32>, grid: &VoxelGrid) -> Result<QuantizedLatents> {
        self.check_grid(grid)?;
        let mut g = Graph::inference();
        let occ = g.constant(occupancy_tensor(grid));
        let lat = self.analysis(&mut g, ps, occ, 0)?;
        Ok(QuantizedLatents {
            content: lat.content.iter().map(|&v| quantize_eval(g.value(v))).collect(),
            hf: lat.hf.iter().map(|&v| quantize_eval(g.value(v))).collect(),
        })
    }

    /// `points` is the original cloud size used for bits-per-point.
    pub fn encode(&self, ps: &ParamStore<f32>, grid: &VoxelGrid, points: usize) -> Result<Encoded> {
        let latents = self.quantized_latents(ps, grid)?;
        let (tc, th) = self.tables(ps);
        let off = self.offsets();
        let content = ec_encode(&latents.content.iter().collect::<Vec<_>>(), &off, &tc)?;
        let highfreq = ec_encode(&latents.hf.iter().collect::<Vec<_>>(), &off, &th)?;
        let fc = self.content_density.freeze(ps);
        let fh = self.hf_density.freeze(ps);
        let mut estimated_bits = 0.0;
        for p in 0..3 {
            estimated_bits += rate_bits(&latents.content[p], &fc, off[p])? + rate_bits(&latents.hf[p], &fh, off[p])?;
        }
        let shapes = self.latent_shapes();
        let header = Header {
            voxel_size: grid.voxel_size as f32,
            origin: grid.origin.map(|v| v as f32),
            dims: self.cfg.dims.map(|d| d as u16),
            stages: self.cfg.stages as u8,
            group: self.cfg.group as u8,
            c2: self.cfg.c2 as u16,
            latent_channels: self.latent_channels() as u16,
            latent_dims: std::array::from_fn(|p| [shapes[p][0] as u16, shapes[p][1] as u16]),
            config_hash: self.cfg.hash(),
            occupied: u32::try_from(grid.occupied_count()).map_err(|_| Error::invalid("too many voxels"))?,
            points: u32::try_from(points).map_err(|_| Error::invalid("too many points"))?,
        };
        if points == 0 {
            return Err(Error::invalid("original point count must be positive"));
        }
        Ok(Encoded { bitstream: Bitstream { header, content, highfreq }, latents, estimated_bits })
    }

    /// Reads only the container and the parameters.
    pub fn decode(&self, ps: &ParamStore<f32>, bs: &Bitstream) -> Result<Decoded> {
        let h = &bs.header;
        if h.config_hash != self.cfg.hash() {
            return Err(Error::model(format!(
                "stream was encoded with model config {:016x}, checkpoint is {:016x}",
                h.config_hash,
                self.cfg.hash()
            )));
        }
        let shapes = self.latent_shapes();
        let consistent = h.dims.map(|d| d as usize) == self.cfg.dims
            && h.stages as usize == self.cfg.stages
            && h.group as usize == self.cfg.group
            && h.c2 as usize == self.cfg.c2
            && h.latent_channels as usize == self.latent_channels()
            && (0..3).all(|p| h.latent_dims[p].map(|d| d as usize) == [shapes[p][0], shapes[p][1]]);
        if !consistent {
            return Err(Error::data("header fields disagree with the model configuration"));
        }
        let n = h.dims.iter().map(|&d| d as usize).product::<usize>();
        if h.occupied as usize > n || !(h.voxel_size > 0.0) || h.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("header geometry out of range"));
        }
        let (tc, th) = self.tables(ps);
        let off = self.offsets();
        let content = ec_decode(&bs.content, &shapes, &off, &tc)
            .map_err(|e| Error::data(format!("substream A: {e}")))?;
        let hf = ec_decode(&bs.highfreq, &shapes, &off, &th).map_err(|e| Error::data(format!("substream B: {e}")))?;
        let mut g = Graph::inference();
        let cv: Vec<Var> = content.iter().map(|t| g.constant(to_real(t))).collect();
        let hv: Vec<Var> = hf.iter().map(|t| g.constant(to_real(t))).collect();
        let lat = Latents { content: [cv[0], cv[1], cv[2]], hf: [hv[0], hv[1], hv[2]] };
        let (refined, prob) = self.synthesis(&mut g, ps, &lat)?;
        Ok(Decoded {
            header: h.clone(),
            latents: QuantizedLatents { content, hf },
            prob: OccupancyPrediction::from_tensor(g.value(prob))?,
            features: g.value(refined).clone(),
        })
    }

    /// Binarized grid and its points: voxel centers, or `f` uplifted points
    /// per voxel.
    pub fn reconstruct(&self, ps: &ParamStore<f32>, dec: &Decoded, mode: Binarize, uplift: Option<usize>) -> Result<(VoxelGrid, PointCloud)> {
        let grid = dec.grid(mode)?;
        let pc = match uplift {
            Some(f) => self.uplifter.uplift(ps, &grid, &dec.features, f)?,
            None => devoxelize(&grid)?,
        };
        Ok((grid, pc))
    }
}

fn to_real<T: Real>(t: &Tensor<i32>) -> Tensor<T> {
    Tensor::new(t.shape(), t.data().iter().map(|&v| T::lit(v as f64)).collect())
}

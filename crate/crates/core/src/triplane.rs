//! Volume embedding, plane projection and back-projection.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::layers::{positional_embedding, ConvBlock, Mlp, ParamBuilder};
use crate::nn::{ops, Graph, ParamStore, Real, Tensor, Var};

/// One of the three orthogonal views, named by the two axes it keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plane {
    Hw,
    Hd,
    Wd,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Hw, Plane::Hd, Plane::Wd];

    /// Axis of the `(H, W, D)` volume removed by the projection.
    pub fn dropped_axis(self) -> usize {
        match self {
            Plane::Hw => 2,
            Plane::Hd => 1,
            Plane::Wd => 0,
        }
    }

    pub fn kept_axes(self) -> [usize; 2] {
        match self {
            Plane::Hw => [0, 1],
            Plane::Hd => [0, 2],
            Plane::Wd => [1, 2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Hw => "hw",
            Plane::Hd => "hd",
            Plane::Wd => "wd",
        }
    }

    pub fn dims(self, vol: [usize; 3]) -> [usize; 2] {
        let [a, b] = self.kept_axes();
        [vol[a], vol[b]]
    }
}

/// Element counts of a triplane representation versus its dense volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StorageLayout {
    pub dims: [usize; 3],
    pub c1: usize,
    pub c2: usize,
}

impl StorageLayout {
    pub fn plane_elements(&self) -> usize {
        Plane::ALL.iter().map(|p| p.dims(self.dims).iter().product::<usize>() * self.c2).sum()
    }

    pub fn volume_elements(&self) -> usize {
        self.dims.iter().product::<usize>() * self.c1
    }

    pub fn ratio(&self) -> f64 {
        self.plane_elements() as f64 / self.volume_elements() as f64
    }
}

/// Index tables for pooling one plane out of a `[H, W, D, C]` volume and for
/// tiling it back.
#[derive(Clone, Debug)]
pub struct PlaneIndex {
    pub plane: Plane,
    pub plane_dims: [usize; 2],
    pub groups: usize,
    pub pool: Arc<Vec<u32>>,
    pub tile: Arc<Vec<u32>>,
}

impl PlaneIndex {
    pub fn new(plane: Plane, dims: [usize; 3], group: usize, c: usize) -> Result<Self> {
        let a = plane.dropped_axis();
        if group == 0 || dims[a] % group != 0 {
            return Err(Error::shape(format!(
                "axis {a} of length {} is not divisible by group size {group}",
                dims[a]
            )));
        }
        let groups = dims[a] / group;
        let [ka, kb] = plane.kept_axes();
        let (p_len, q_len) = (dims[ka], dims[kb]);
        let vol = |coord: [usize; 3], ch: usize| (((coord[0] * dims[1] + coord[1]) * dims[2] + coord[2]) * c + ch) as u32;

        // ℜ1 layout: channel index g * C + c
        let mut pool = Vec::with_capacity(p_len * q_len * groups * c * group);
        for p in 0..p_len {
            for q in 0..q_len {
                for g in 0..groups {
                    for ch in 0..c {
                        for j in 0..group {
                            let mut coord = [0; 3];
                            coord[ka] = p;
                            coord[kb] = q;
                            coord[a] = g * group + j;
                            pool.push(vol(coord, ch));
                        }
                    }
                }
            }
        }
        let mut tile = Vec::with_capacity(dims.iter().product::<usize>() * c);
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    let coord = [h, w, d];
                    let g = coord[a] / group;
                    for ch in 0..c {
                        tile.push((((coord[ka] * q_len + coord[kb]) * groups + g) * c + ch) as u32);
                    }
                }
            }
        }
        Ok(Self { plane, plane_dims: [p_len, q_len], groups, pool: Arc::new(pool), tile: Arc::new(tile) })
    }
}

/// Occupancy embedding, projection MLPs, back-projection MLPs and the
/// positional fusion block.
#[derive(Clone, Debug)]
pub struct Triplane {
    pub dims: [usize; 3],
    pub c1: usize,
    pub c2: usize,
    pub group: usize,
    pub pe_freqs: usize,
    pub embed: Vec<ConvBlock>,
    pub phi1: Vec<Mlp>,
    pub phi2: Vec<Mlp>,
    pub fuse: ConvBlock,
    pub index: Vec<PlaneIndex>,
}

pub struct TriplaneSpec {
    pub dims: [usize; 3],
    pub c1: usize,
    pub c2: usize,
    pub group: usize,
    pub embed_blocks: usize,
    pub embed_kernel: usize,
    pub phi_hidden: usize,
    pub pe_freqs: usize,
    pub fuse_kernel: usize,
}

impl Triplane {
    pub fn new(pb: &mut ParamBuilder, s: &TriplaneSpec) -> Result<Self> {
        let index = Plane::ALL.iter().map(|&p| PlaneIndex::new(p, s.dims, s.group, s.c1)).collect::<Result<Vec<_>>>()?;
        let embed = (0..s.embed_blocks.max(1))
            .map(|i| {
                let cin = if i == 0 { 1 } else { s.c1 };
                ConvBlock::new(pb, &format!("embed.{i}"), 3, s.embed_kernel, cin, s.c1)
            })
            .collect();
        let widths = |a: usize, b: usize| if s.phi_hidden == 0 { vec![a, b] } else { vec![a, s.phi_hidden, b] };
        let phi1 = index
            .iter()
            .map(|ix| Mlp::new(pb, &format!("phi1.{}", ix.plane.name()), &widths(ix.groups * s.c1, s.c2)))
            .collect();
        let phi2 = index
            .iter()
            .map(|ix| Mlp::new(pb, &format!("phi2.{}", ix.plane.name()), &widths(s.c2, ix.groups * s.c1)))
            .collect();
        let pe = crate::nn::layers::pe_channels(s.pe_freqs);
        let fuse = ConvBlock::new(pb, "fuse", 3, s.fuse_kernel, s.c1 + pe, s.c1);
        Ok(Self {
            dims: s.dims,
            c1: s.c1,
            c2: s.c2,
            group: s.group,
            pe_freqs: s.pe_freqs,
            embed,
            phi1,
            phi2,
            fuse,
            index,
        })
    }

    /// `[H, W, D, 1]` occupancy to `[H, W, D, C1]` features.
    pub fn embed_voxels<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, occ: Var) -> Var {
        self.embed.iter().fold(occ, |x, b| b.forward(g, ps, x))
    }

    /// Group-mean pooling along the dropped axis, group-major rearrangement
    /// into channels, then Φ1.
    pub fn project_plane<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, fv: Var, plane: usize) -> Var {
        let ix = &self.index[plane];
        let shape = [ix.plane_dims[0], ix.plane_dims[1], ix.groups * self.c1];
        let pooled = ops::group_mean(g, fv, ix.pool.clone(), self.group, &shape);
        self.phi1[plane].forward(g, ps, pooled)
    }

    pub fn project<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, fv: Var) -> [Var; 3] {
        std::array::from_fn(|p| self.project_plane(g, ps, fv, p))
    }

    /// Φ2, rearrangement of channels into axis groups, and replication of
    /// every group over its `N_g` voxels.
    pub fn back_project_plane<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, plane: usize) -> Var {
        let ix = &self.index[plane];
        let y = self.phi2[plane].forward(g, ps, x);
        let [h, w, d] = self.dims;
        ops::gather(g, y, ix.tile.clone(), &[h, w, d, self.c1])
    }

    pub fn back_project<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, planes: &[Var; 3]) -> Result<Var> {
        for (p, &v) in planes.iter().enumerate() {
            let want = self.index[p].plane_dims;
            let sh = g.shape(v);
            if sh.len() != 3 || sh[..2] != want || sh[2] != self.c2 {
                return Err(Error::shape(format!(
                    "plane {} has shape {sh:?}, expected [{}, {}, {}]",
                    self.index[p].plane.name(),
                    want[0],
                    want[1],
                    self.c2
                )));
            }
        }
        let vols: Vec<Var> = (0..3).map(|p| self.back_project_plane(g, ps, planes[p], p)).collect();
        Ok(ops::add_n(g, &vols))
    }

    /// `CB_3D(F ∥ PE)`.
    pub fn fuse_positional<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, fv: Var) -> Var {
        let x = if self.pe_freqs == 0 {
            fv
        } else {
            let pe = g.constant(positional_embedding::<T>(self.dims, self.pe_freqs));
            ops::concat_channels(g, &[fv, pe])
        };
        self.fuse.forward(g, ps, x)
    }

    pub fn layout(&self) -> StorageLayout {
        StorageLayout { dims: self.dims, c1: self.c1, c2: self.c2 }
    }
}

/// Occupancy grid as a `[H, W, D, 1]` tensor.
pub fn occupancy_tensor<T: Real>(grid: &crate::geometry::VoxelGrid) -> Tensor<T> {
    let [h, w, d] = grid.dims;
    Tensor::new(&[h, w, d, 1], grid.occupancy.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())
}

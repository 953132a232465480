//! Model hyperparameters, presets and the compatibility hash shared by
//! checkpoints and bitstreams.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::triplane::{StorageLayout, TriplaneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// Padded voxel grid `H, W, D`.
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Voxel feature channels.
    pub c1: usize,
    /// Plane feature channels at full plane resolution.
    pub c2: usize,
    /// Encoder stages `S`.
    pub stages: usize,
    /// Projection group size `N_g`.
    pub group: usize,
    pub embed_blocks: usize,
    pub embed_kernel: usize,
    pub phi_hidden: usize,
    pub pe_freqs: usize,
    pub fuse_kernel: usize,
    pub codec_kernel: usize,
    pub dropout: f64,
    pub lsar_blocks: usize,
    pub head_kernel: usize,
    pub uplift_hidden: usize,
    pub density_init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 64³ grid at 0.1 m, sized for CPU overfitting.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            dims: [64, 64, 64],
            voxel_size: 0.1,
            c1: 8,
            c2: 8,
            stages: 2,
            group: 4,
            embed_blocks: 1,
            embed_kernel: 3,
            phi_hidden: 0,
            pe_freqs: 2,
            fuse_kernel: 1,
            codec_kernel: 3,
            dropout: 0.0,
            lsar_blocks: 1,
            head_kernel: 3,
            uplift_hidden: 16,
            density_init_scale: 1.0,
            seed: 0,
        }
    }

    fn table4(name: &str, dims: [usize; 3], c2: usize) -> Self {
        Self {
            name: name.into(),
            dims,
            voxel_size: 0.1,
            c1: 16,
            c2,
            stages: 3,
            group: 4,
            embed_blocks: 2,
            embed_kernel: 3,
            phi_hidden: 0,
            pe_freqs: 8,
            fuse_kernel: 3,
            codec_kernel: 3,
            dropout: 0.1,
            lsar_blocks: 4,
            head_kernel: 3,
            uplift_hidden: 32,
            density_init_scale: 10.0,
            seed: 0,
        }
    }

    pub fn r448() -> Self {
        Self::table4("r448", [448, 448, 56], 20)
    }

    pub fn r384() -> Self {
        Self::table4("r384", [384, 384, 48], 32)
    }

    pub fn r320() -> Self {
        Self::table4("r320", [320, 320, 40], 40)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "r448" => Ok(Self::r448()),
            "r384" => Ok(Self::r384()),
            "r320" => Ok(Self::r320()),
            _ => Err(Error::invalid(format!("unknown preset {name:?} (desk, r448, r384, r320)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.dims.contains(&0) || self.dims.iter().any(|&d| d > u16::MAX as usize) {
            return bad(format!("dims {:?} must be in 1..=65535", self.dims));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad(format!("voxel size {} must be positive", self.voxel_size));
        }
        if self.c1 == 0 || self.c2 == 0 || self.group == 0 || self.stages == 0 {
            return bad("c1, c2, group and stages must be positive".into());
        }
        if self.dims.iter().any(|d| d % self.group != 0) {
            return bad(format!("group {} does not divide dims {:?}", self.group, self.dims));
        }
        let f = 1 << self.stages;
        if self.dims.iter().any(|d| d % f != 0) {
            return bad(format!("dims {:?} not divisible by 2^{}", self.dims, self.stages));
        }
        for k in [self.embed_kernel, self.fuse_kernel, self.codec_kernel, self.head_kernel] {
            if k % 2 == 0 {
                return bad(format!("kernel {k} must be odd"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.stages > 8 || self.group > 255 || (self.c2 << self.stages) > u16::MAX as usize {
            return bad("stages, group or latent channels exceed container limits".into());
        }
        Ok(())
    }

    /// First 8 bytes (little-endian) of SHA-256 over the canonical JSON.
    pub fn hash(&self) -> u64 {
        let d = Sha256::digest(self.to_json().as_bytes());
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::model(format!("bad model config: {e}")))
    }

    pub fn latent_channels(&self) -> usize {
        self.c2 << self.stages
    }

    pub fn triplane_spec(&self) -> TriplaneSpec {
        TriplaneSpec {
            dims: self.dims,
            c1: self.c1,
            c2: self.c2,
            group: self.group,
            embed_blocks: self.embed_blocks,
            embed_kernel: self.embed_kernel,
            phi_hidden: self.phi_hidden,
            pe_freqs: self.pe_freqs,
            fuse_kernel: self.fuse_kernel,
        }
    }

    pub fn layout(&self) -> StorageLayout {
        StorageLayout { dims: self.dims, c1: self.c1, c2: self.c2 }
    }
}

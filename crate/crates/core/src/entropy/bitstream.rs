//! `.flt` container: fixed little-endian header followed by the content and
//! high-frequency substreams.
//!
//! ```text
//! off  size  field
//!   0     5  magic "FLTC1"
//!   5     1  version
//!   6     4  voxel size (f32)
//!  10    12  grid origin (3 x f32)
//!  22     6  padded dims H, W, D (3 x u16)
//!  28     1  stages S
//!  29     1  group size N_g
//!  30     2  base plane channels C2
//!  32     2  latent channels per plane
//!  34    12  latent dims of the HW, HD, WD planes (3 x 2 x u16)
//!  46     8  model config hash
//!  54     4  occupied voxel count
//!  58     4  original point count
//!  62     8  substream byte lengths A, B (2 x u32)
//!  70     8  substream CRC-32s A, B
//!  78     4  CRC-32 of bytes 0..78
//!  82        substream A, then substream B
//! ```

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"FLTC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 82;

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub voxel_size: f32,
    pub origin: [f32; 3],
    pub dims: [u16; 3],
    pub stages: u8,
    pub group: u8,
    pub c2: u16,
    pub latent_channels: u16,
    pub latent_dims: [[u16; 2]; 3],
    pub config_hash: u64,
    pub occupied: u32,
    pub points: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub content: Vec<u8>,
    pub highfreq: Vec<u8>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn put(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.b[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

impl Bitstream {
    pub fn serialize(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if !(h.voxel_size > 0.0) || !h.voxel_size.is_finite() || h.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("header geometry must be finite with positive voxel size"));
        }
        let len = |v: &Vec<u8>| u32::try_from(v.len()).map_err(|_| Error::invalid("substream exceeds 4 GiB"));
        let mut w = Writer(Vec::with_capacity(HEADER_LEN + self.content.len() + self.highfreq.len()));
        w.put(MAGIC);
        w.put(&[VERSION]);
        w.put(&h.voxel_size.to_le_bytes());
        for o in h.origin {
            w.put(&o.to_le_bytes());
        }
        for d in h.dims {
            w.put(&d.to_le_bytes());
        }
        w.put(&[h.stages, h.group]);
        w.put(&h.c2.to_le_bytes());
        w.put(&h.latent_channels.to_le_bytes());
        for s in h.latent_dims {
            w.put(&s[0].to_le_bytes());
            w.put(&s[1].to_le_bytes());
        }
        w.put(&h.config_hash.to_le_bytes());
        w.put(&h.occupied.to_le_bytes());
        w.put(&h.points.to_le_bytes());
        w.put(&len(&self.content)?.to_le_bytes());
        w.put(&len(&self.highfreq)?.to_le_bytes());
        w.put(&crc32fast::hash(&self.content).to_le_bytes());
        w.put(&crc32fast::hash(&self.highfreq).to_le_bytes());
        let crc = crc32fast::hash(&w.0);
        w.put(&crc.to_le_bytes());
        debug_assert_eq!(w.0.len(), HEADER_LEN);
        w.put(&self.content);
        w.put(&self.highfreq);
        Ok(w.0)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::data("bad magic"));
        }
        if bytes.len() < 6 {
            return Err(Error::Truncated { what: "header", offset: bytes.len() });
        }
        if bytes[5] != VERSION {
            return Err(Error::data(format!("unsupported version {} (expected {VERSION})", bytes[5])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated { what: "header", offset: bytes.len() });
        }
        let mut r = Reader { b: bytes, pos: 6 };
        let voxel_size = r.f32();
        let origin = [r.f32(), r.f32(), r.f32()];
        let dims = [r.u16(), r.u16(), r.u16()];
        let stages = r.u8();
        let group = r.u8();
        let c2 = r.u16();
        let latent_channels = r.u16();
        let latent_dims = [[r.u16(), r.u16()], [r.u16(), r.u16()], [r.u16(), r.u16()]];
        let config_hash = r.u64();
        let occupied = r.u32();
        let points = r.u32();
        let (la, lb) = (r.u32() as usize, r.u32() as usize);
        let (ca, cb) = (r.u32(), r.u32());
        let hcrc = r.u32();
        if crc32fast::hash(&bytes[..HEADER_LEN - 4]) != hcrc {
            return Err(Error::data(format!("corrupt header (checksum mismatch in bytes 0..{})", HEADER_LEN - 4)));
        }
        let a_end = HEADER_LEN + la;
        if bytes.len() < a_end {
            return Err(Error::Truncated { what: "substream A", offset: bytes.len() });
        }
        let b_end = a_end + lb;
        if bytes.len() < b_end {
            return Err(Error::Truncated { what: "substream B", offset: bytes.len() });
        }
        if bytes.len() > b_end {
            return Err(Error::data(format!("{} trailing bytes after offset {b_end}", bytes.len() - b_end)));
        }
        let content = bytes[HEADER_LEN..a_end].to_vec();
        let highfreq = bytes[a_end..b_end].to_vec();
        for (name, data, crc, start) in [("A", &content, ca, HEADER_LEN), ("B", &highfreq, cb, a_end)] {
            if crc32fast::hash(data) != crc {
                return Err(Error::data(format!(
                    "corrupt substream {name} at offset {start} (checksum mismatch over {start}..{})",
                    start + data.len()
                )));
            }
        }
        let header = Header {
            voxel_size,
            origin,
            dims,
            stages,
            group,
            c2,
            latent_channels,
            latent_dims,
            config_hash,
            occupied,
            points,
        };
        if !(voxel_size > 0.0) || dims.contains(&0) || points == 0 {
            return Err(Error::data("header fields out of range"));
        }
        Ok(Self { header, content, highfreq })
    }

    /// Total container size in bits.
    pub fn total_bits(&self) -> u64 {
        8 * (HEADER_LEN + self.content.len() + self.highfreq.len()) as u64
    }
}

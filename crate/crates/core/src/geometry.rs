//! Point-cloud ingestion, voxelization and devoxelization.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Raw 3D positions in meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Per-point intensity when the source carries one; the codec ignores it.
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points, intensity: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-wise `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            (lo, hi)
        }))
    }
}

/// Binary occupancy volume over `dims = (H, W, D)` voxels of edge
/// `voxel_size`, whose minimum corner sits at `origin`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub occupancy: Vec<bool>,
}

impl VoxelGrid {
    pub fn empty(dims: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Self {
        Self { dims, voxel_size, origin, occupancy: vec![false; dims[0] * dims[1] * dims[2]] }
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let d = i % self.dims[2];
        let w = (i / self.dims[2]) % self.dims[1];
        [i / (self.dims[1] * self.dims[2]), w, d]
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> bool {
        self.occupancy[self.index(h, w, d)]
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, v: bool) {
        let i = self.index(h, w, d);
        self.occupancy[i] = v;
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }

    pub fn occupied_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupancy.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Center of voxel `i` in meters.
    pub fn center(&self, i: usize) -> [f64; 3] {
        let c = self.coords(i);
        std::array::from_fn(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.voxel_size)
    }

    /// Voxel holding `p` under the half-open cube convention, if inside.
    pub fn locate(&self, p: &[f64; 3]) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            idx[a] = axis_index(p[a], self.origin[a], self.voxel_size, self.dims[a])?;
        }
        Some(self.index(idx[0], idx[1], idx[2]))
    }

    /// Occupancy as 0/1 floats shaped `[H, W, D, 1]`.
    pub fn to_field(&self) -> Vec<f32> {
        self.occupancy.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// `floor((x - origin) / vs)` checked against the cube bounds as computed in
/// floating point, so the returned cube always contains `x`.
fn axis_index(x: f64, origin: f64, vs: f64, len: usize) -> Option<usize> {
    let mut i = ((x - origin) / vs).floor();
    if x < origin + i * vs {
        i -= 1.0;
    } else if x >= origin + (i + 1.0) * vs {
        i += 1.0;
    }
    (i >= 0.0 && i < len as f64).then_some(i as usize)
}

/// Result of [`voxelize`].
#[derive(Clone, Debug)]
pub struct Voxelization {
    pub grid: VoxelGrid,
    /// Points outside `[origin, origin + dims * vs)`.
    pub dropped: usize,
}

pub fn voxelize(cloud: &PointCloud, vs: f64, dims: [usize; 3], origin: [f64; 3]) -> Result<Voxelization> {
    if !(vs > 0.0) || !vs.is_finite() {
        return Err(Error::invalid(format!("voxel size must be positive, got {vs}")));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("grid dims must be positive, got {dims:?}")));
    }
    let mut grid = VoxelGrid::empty(dims, vs, origin);
    let mut dropped = 0;
    for p in &cloud.points {
        match grid.locate(p) {
            Some(i) => grid.occupancy[i] = true,
            None => dropped += 1,
        }
    }
    if dropped == cloud.len() {
        return Err(Error::data(format!("all {} points fall outside the grid", cloud.len())));
    }
    Ok(Voxelization { grid, dropped })
}

/// Center of every occupied voxel, in index order.
pub fn devoxelize(grid: &VoxelGrid) -> Result<PointCloud> {
    let pts: Vec<[f64; 3]> = grid.occupied_indices().map(|i| grid.center(i)).collect();
    if pts.is_empty() {
        return Err(Error::data("grid has no occupied voxels"));
    }
    Ok(PointCloud::new(pts))
}

/// Rounds each of `dims` up to a multiple of `factor`.
pub fn pad_dims(dims: [usize; 3], factor: usize) -> [usize; 3] {
    dims.map(|d| d.div_ceil(factor) * factor)
}

/// KITTI velodyne scan: 16-byte records of little-endian `x, y, z, intensity`.
pub fn load_kitti_bin(path: &Path) -> Result<PointCloud> {
    parse_kitti_bin(&std::fs::read(path)?)
}

pub fn parse_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.is_empty() {
        return Err(Error::data("no points"));
    }
    if bytes.len() % 16 != 0 {
        return Err(Error::Truncated { what: "record", offset: bytes.len() / 16 * 16 });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for (r, rec) in bytes.chunks_exact(16).enumerate() {
        let f: [f32; 4] = std::array::from_fn(|k| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()));
        if let Some(k) = f[..3].iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("byte offset {}", r * 16 + 4 * k)));
        }
        points.push([f[0] as f64, f[1] as f64, f[2] as f64]);
        intensity.push(f[3]);
    }
    Ok(PointCloud { points, intensity: Some(intensity) })
}

pub fn save_kitti_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let it = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, it] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let f = std::fs::File::open(path)?;
    read_ply(BufReader::new(f))
}

/// Reads the vertex positions of a PLY stream. The vertex element must come
/// first; elements after it are ignored.
pub fn read_ply(mut r: impl BufRead) -> Result<PointCloud> {
    let mut line = String::new();
    let read_line = |r: &mut dyn BufRead, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::data("PLY header ends before end_header"));
        }
        Ok(())
    };
    read_line(&mut r, &mut line)?;
    if line.trim() != "ply" {
        return Err(Error::data("not a PLY file (missing `ply` magic)"));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut element = String::new();
    let mut seen_elements = 0;
    loop {
        read_line(&mut r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, ..] => return Err(Error::data(format!("unsupported PLY format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                if seen_elements == 0 && *name != "vertex" {
                    return Err(Error::data(format!(
                        "unsupported element order: `{name}` precedes `vertex`"
                    )));
                }
                if *name == "vertex" {
                    count = Some(n.parse::<usize>().map_err(|_| Error::data(format!("bad vertex count `{n}`")))?);
                }
                element = name.to_string();
                seen_elements += 1;
            }
            ["property", "list", ..] if element == "vertex" => {
                return Err(Error::data("list properties on vertices are not supported"))
            }
            ["property", ty, name] if element == "vertex" => {
                let s = Scalar::parse(ty).ok_or_else(|| Error::data(format!("unknown PLY type `{ty}`")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(Error::data(format!("unrecognised PLY header line `{}`", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| Error::data("PLY header has no format line"))?;
    let count = count.ok_or_else(|| Error::data("PLY file has no vertex element"))?;
    let mut axis = [0usize; 3];
    for (a, name) in ["x", "y", "z"].iter().enumerate() {
        let k = props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::data(format!("PLY vertex element is missing property `{name}`")))?;
        if !matches!(props[k].1, Scalar::F32 | Scalar::F64) {
            return Err(Error::data(format!("PLY property `{name}` must be float or double")));
        }
        axis[a] = k;
    }
    let mut points = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            for v in 0..count {
                line.clear();
                if r.read_line(&mut line)? == 0 {
                    return Err(Error::data(format!("PLY body ends at vertex {v} of {count}")));
                }
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() < props.len() {
                    return Err(Error::data(format!("vertex {v} has {} values, expected {}", toks.len(), props.len())));
                }
                let mut p = [0.0; 3];
                for a in 0..3 {
                    let t = toks[axis[a]];
                    let bad = || Error::data(format!("vertex {v}: bad number `{t}`"));
                    p[a] = match props[axis[a]].1 {
                        Scalar::F32 => t.parse::<f32>().map_err(|_| bad())? as f64,
                        _ => t.parse::<f64>().map_err(|_| bad())?,
                    };
                }
                points.push(p);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
            let offs: Vec<usize> =
                props.iter().scan(0, |acc, (_, s)| { let o = *acc; *acc += s.size(); Some(o) }).collect();
            let mut rec = vec![0u8; stride];
            for v in 0..count {
                r.read_exact(&mut rec).map_err(|_| Error::data(format!("PLY body ends at vertex {v} of {count}")))?;
                points.push(std::array::from_fn(|a| props[axis[a]].1.read_le(&rec[offs[axis[a]]..])));
            }
        }
    }
    if let Some(v) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinite(format!("PLY vertex {v}")));
    }
    Ok(PointCloud::new(points))
}

pub fn save_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_ply(&mut w, cloud, format)?;
    w.flush()?;
    Ok(())
}

pub fn write_ply(w: &mut impl Write, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        w,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )?;
    for p in &cloud.points {
        match format {
            PlyFormat::Ascii => writeln!(w, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?,
            PlyFormat::BinaryLittleEndian => {
                for c in p {
                    w.write_all(&(*c as f32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Loads `.bin` (KITTI) or `.ply` by extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("bin") => load_kitti_bin(path),
        Some("ply") => load_ply(path),
        _ => Err(Error::data(format!("unsupported scan format: {}", path.display()))),
    }
}

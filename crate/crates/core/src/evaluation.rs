//! Geometry metrics (D1/D2 PSNR, IoU), Bjøntegaard deltas and RD tables.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rstar::primitives::GeomWithData;
use rstar::RTree;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Clouds smaller than this are searched exhaustively.
pub const BRUTE_FORCE_BELOW: usize = 2000;
pub const D2_NEIGHBORS: usize = 9;
pub const IOU_GRID: f64 = 0.1;

type Tree = RTree<GeomWithData<[f64; 3], usize>>;

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Exact nearest-neighbor index over a fixed point set.
pub enum NnIndex<'a> {
    Brute(&'a [[f64; 3]]),
    Tree(&'a [[f64; 3]], Box<Tree>),
}

impl<'a> NnIndex<'a> {
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        if points.len() < BRUTE_FORCE_BELOW {
            Self::Brute(points)
        } else {
            Self::tree(points)
        }
    }

    pub fn tree(points: &'a [[f64; 3]]) -> Self {
        let items = points.iter().enumerate().map(|(i, p)| GeomWithData::new(*p, i)).collect();
        Self::Tree(points, Box::new(Tree::bulk_load(items)))
    }

    pub fn points(&self) -> &'a [[f64; 3]] {
        match self {
            Self::Brute(p) | Self::Tree(p, _) => p,
        }
    }

    /// `(squared distance, index)` of the closest point.
    pub fn nearest(&self, q: &[f64; 3]) -> (f64, usize) {
        match self {
            Self::Brute(p) => p
                .iter()
                .enumerate()
                .map(|(i, x)| (sq_dist(q, x), i))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .expect("nonempty index"),
            Self::Tree(p, t) => {
                let i = t.nearest_neighbor(q).expect("nonempty index").data;
                (sq_dist(q, &p[i]), i)
            }
        }
    }

    /// Indices of the `k` closest points, nearest first.
    pub fn knn(&self, q: &[f64; 3], k: usize) -> Vec<usize> {
        match self {
            Self::Brute(p) => {
                let mut d: Vec<(f64, usize)> = p.iter().enumerate().map(|(i, x)| (sq_dist(q, x), i)).collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.into_iter().take(k).map(|(_, i)| i).collect()
            }
            Self::Tree(_, t) => t.nearest_neighbor_iter(q).take(k).map(|n| n.data).collect(),
        }
    }
}

/// `10·log10(3r²/mse)`; zero error maps to `+inf`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (3.0 * peak * peak / mse).log10()
    }
}

/// Maximum axis extent of the cloud's bounding box.
pub fn default_peak(reference: &PointCloud) -> Result<f64> {
    let (lo, hi) = reference.bounds().ok_or_else(|| Error::invalid("empty reference cloud"))?;
    Ok((0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max))
}

fn resolve_peak(reference: &PointCloud, peak: Option<f64>) -> Result<f64> {
    let r = match peak {
        Some(r) => r,
        None => default_peak(reference)?,
    };
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("peak {r} must be positive (pass one explicitly for degenerate clouds)")));
    }
    Ok(r)
}

fn nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("distortion needs two nonempty clouds"));
    }
    Ok(())
}

/// Squared distance from every point of `a` to its nearest neighbor in `b`.
pub fn nn_sq_dists(a: &PointCloud, b: &PointCloud) -> Result<Vec<f64>> {
    nonempty(a, b)?;
    let idx = NnIndex::new(&b.points);
    Ok(a.points.iter().map(|p| idx.nearest(p).0).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Symmetric point-to-point MSE.
pub fn mse_d1(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(mean(&nn_sq_dists(a, b)?).max(mean(&nn_sq_dists(b, a)?)))
}

/// Point-to-point PSNR. `peak` defaults to the largest extent of `a`.
pub fn psnr_d1(a: &PointCloud, b: &PointCloud, peak: Option<f64>) -> Result<f64> {
    nonempty(a, b)?;
    let r = resolve_peak(a, peak)?;
    Ok(psnr_from_mse(mse_d1(a, b)?, r))
}

/// Unit normal of the least-squares plane through `pts`, or `None` when the
/// neighborhood is (nearly) collinear.
pub fn plane_normal(pts: &[[f64; 3]]) -> Option<[f64; 3]> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector3::zeros(), |s, p| s + Vector3::from(*p)) / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = Vector3::from(*p) - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let (mid, top) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(top > 0.0) || mid <= 1e-10 * top {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]);
    Some([v[0], v[1], v[2]])
}

/// Normals from the `k` nearest neighbors (the point included).
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Vec<Option<[f64; 3]>> {
    let idx = NnIndex::new(&cloud.points);
    cloud
        .points
        .iter()
        .map(|p| {
            let nb: Vec<[f64; 3]> = idx.knn(p, k).into_iter().map(|i| cloud.points[i]).collect();
            plane_normal(&nb)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct D2Report {
    pub psnr: f64,
    pub mse: f64,
    /// Points whose reference neighborhood was degenerate and fell back to
    /// the point-to-point residual.
    pub fallbacks: usize,
}

fn directional_d2(a: &PointCloud, b: &PointCloud, k: usize) -> (f64, usize) {
    let idx = NnIndex::new(&b.points);
    let normals = estimate_normals(b, k);
    let mut fallbacks = 0;
    let mut sum = 0.0;
    for p in &a.points {
        let (d1, j) = idx.nearest(p);
        match normals[j] {
            Some(n) => {
                let q = b.points[j];
                let proj: f64 = (0..3).map(|t| (p[t] - q[t]) * n[t]).sum();
                sum += proj * proj;
            }
            None => {
                fallbacks += 1;
                sum += d1;
            }
        }
    }
    (sum / a.len() as f64, fallbacks)
}

/// Point-to-plane PSNR with normals fitted on whichever cloud is searched.
pub fn psnr_d2(a: &PointCloud, b: &PointCloud, peak: Option<f64>, k: usize) -> Result<D2Report> {
    nonempty(a, b)?;
    if k < 3 || a.len() < k + 1 || b.len() < k + 1 {
        return Err(Error::invalid(format!("D2 needs k >= 3 and at least k + 1 = {} points per cloud", k + 1)));
    }
    let r = resolve_peak(a, peak)?;
    let (ab, fa) = directional_d2(a, b, k);
    let (ba, fb) = directional_d2(b, a, k);
    let mse = ab.max(ba);
    Ok(D2Report { psnr: psnr_from_mse(mse, r), mse, fallbacks: fa + fb })
}

fn occupancy(c: &PointCloud, grid: f64, origin: [f64; 3]) -> HashSet<[i64; 3]> {
    c.points.iter().map(|p| std::array::from_fn(|a| ((p[a] - origin[a]) / grid).floor() as i64)).collect()
}

/// Voxel IoU. Both clouds share one grid anchored at `origin`, which
/// defaults to the minimum corner of `a`.
pub fn iou_grid(a: &PointCloud, b: &PointCloud, grid: f64, origin: Option<[f64; 3]>) -> Result<f64> {
    if !(grid > 0.0 && grid.is_finite()) {
        return Err(Error::invalid(format!("grid size {grid} must be positive")));
    }
    if a.is_empty() && b.is_empty() {
        return Err(Error::invalid("IoU of two empty clouds is undefined"));
    }
    let o = match (origin, a.bounds(), b.bounds()) {
        (Some(o), _, _) => o,
        (None, Some((lo, _)), _) | (None, None, Some((lo, _))) => lo,
        (None, None, None) => unreachable!(),
    };
    let (sa, sb) = (occupancy(a, grid, o), occupancy(b, grid, o));
    let inter = sa.intersection(&sb).count();
    Ok(inter as f64 / (sa.len() + sb.len() - inter) as f64)
}

mod inf_sentinel {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

/// One operating point. Exact reconstructions carry `+inf` PSNR, written as
/// `"inf"` in JSON and CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    #[serde(with = "inf_sentinel")]
    pub psnr_d1: f64,
    #[serde(with = "inf_sentinel")]
    pub psnr_d2: f64,
    pub iou: f64,
    pub enc_time: f64,
    pub dec_time: f64,
}

impl RdPoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.bpp > 0.0 && self.bpp.is_finite()) {
            return Err(Error::invalid(format!("bpp {} must be positive", self.bpp)));
        }
        for v in [self.psnr_d1, self.psnr_d2] {
            if v.is_nan() || v == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("psnr {v} is neither finite nor +inf")));
            }
        }
        if !(0.0..=1.0).contains(&self.iou) {
            return Err(Error::invalid(format!("iou {} outside [0, 1]", self.iou)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by bpp and rejects duplicate rates.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        for p in &points {
            p.validate()?;
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::invalid("curve rates must be strictly increasing"));
        }
        Ok(Self { label: label.into(), points })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    D1,
    D2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BdResult {
    /// Average rate change at equal quality, percent.
    pub bd_rate: f64,
    /// Average quality change at equal rate, dB.
    pub bd_psnr: f64,
}

/// Least-squares cubic; coefficients in ascending powers.
pub fn fit_cubic(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    if x.len() != y.len() || x.len() < 4 {
        return Err(Error::invalid("cubic fit needs at least 4 samples"));
    }
    let a = DMatrix::from_fn(x.len(), 4, |i, j| x[i].powi(j as i32));
    let svd = a.svd(true, true);
    let c = svd.solve(&DVector::from_column_slice(y), 1e-14).map_err(Error::invalid)?;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cubic fit is singular (repeated abscissae)"));
    }
    Ok([c[0], c[1], c[2], c[3]])
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Mean of `q(x) − p(x)` over the overlap of the two sample ranges.
fn mean_gap(xp: &[f64], yp: &[f64], xq: &[f64], yq: &[f64], what: &str) -> Result<f64> {
    let (p, q) = (fit_cubic(xp, yp)?, fit_cubic(xq, yq)?);
    let ((a0, a1), (b0, b1)) = (range(xp), range(xq));
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if !(hi > lo) {
        return Err(Error::invalid(format!("curves do not overlap in {what}")));
    }
    Ok((integral(&q, lo, hi) - integral(&p, lo, hi)) / (hi - lo))
}

/// Bjøntegaard deltas of `test` against `reference`.
pub fn bd_metrics(reference: &RdCurve, test: &RdCurve, metric: Metric) -> Result<BdResult> {
    let cols = |c: &RdCurve| -> Result<(Vec<f64>, Vec<f64>)> {
        if c.points.len() < 4 {
            return Err(Error::invalid(format!("curve {:?} has {} points, need 4", c.label, c.points.len())));
        }
        let mut r = Vec::new();
        let mut q = Vec::new();
        for p in &c.points {
            let v = match metric {
                Metric::D1 => p.psnr_d1,
                Metric::D2 => p.psnr_d2,
            };
            if !v.is_finite() || !(p.bpp > 0.0) {
                return Err(Error::invalid(format!("curve {:?} has a point without finite rate and PSNR", c.label)));
            }
            r.push(p.bpp.log10());
            q.push(v);
        }
        Ok((r, q))
    };
    let (rr, qr) = cols(reference)?;
    let (rt, qt) = cols(test)?;
    let log_gap = mean_gap(&qr, &rr, &qt, &rt, "PSNR")?;
    let bd_psnr = mean_gap(&rr, &qr, &rt, &qt, "rate")?;
    Ok(BdResult { bd_rate: (10f64.powf(log_gap) - 1.0) * 100.0, bd_psnr })
}

pub const CSV_HEADER: [&str; 7] = ["label", "bpp", "d1", "d2", "iou", "enc_s", "dec_s"];

fn csv_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// One header line plus one row per point.
pub fn rd_csv(curves: &[RdCurve]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for c in curves {
        for p in &c.points {
            let nums = [p.bpp, p.psnr_d1, p.psnr_d2, p.iou, p.enc_time, p.dec_time].map(csv_num);
            w.write_record(std::iter::once(c.label.as_str()).chain(nums.iter().map(String::as_str)))
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Curves in order of first appearance of their label.
pub fn parse_rd_csv(s: &str) -> Result<Vec<RdCurve>> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    let head = r.headers().map_err(|e| Error::data(format!("bad RD csv: {e}")))?;
    if head.iter().ne(CSV_HEADER) {
        return Err(Error::data(format!("RD csv header must be {}", CSV_HEADER.join(","))));
    }
    let mut curves: Vec<(String, Vec<RdPoint>)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("bad RD csv: {e}")))?;
        let num = |i: usize| -> Result<f64> {
            match &rec[i] {
                "inf" => Ok(f64::INFINITY),
                t => t.parse().map_err(|_| Error::data(format!("RD csv row {}: bad number {t:?}", line + 1))),
            }
        };
        let p = RdPoint { bpp: num(1)?, psnr_d1: num(2)?, psnr_d2: num(3)?, iou: num(4)?, enc_time: num(5)?, dec_time: num(6)? };
        match curves.iter_mut().find(|c| c.0 == rec[0]) {
            Some(c) => c.1.push(p),
            None => curves.push((rec[0].to_string(), vec![p])),
        }
    }
    curves.into_iter().map(|(l, p)| RdCurve::new(l, p)).collect()
}

pub fn rd_json(curves: &[RdCurve]) -> String {
    serde_json::to_string_pretty(curves).expect("curves serialize")
}

pub fn parse_rd_json(s: &str) -> Result<Vec<RdCurve>> {
    let curves: Vec<RdCurve> = serde_json::from_str(s).map_err(|e| Error::data(format!("bad RD json: {e}")))?;
    curves.into_iter().map(|c| RdCurve::new(c.label, c.points)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| std::array::from_fn(|_| r.gen_range(0.0..10.0))).collect())
    }

    fn pt(bpp: f64, d1: f64) -> RdPoint {
        RdPoint { bpp, psnr_d1: d1, psnr_d2: d1 + 3.0, iou: 0.5, enc_time: 0.1, dec_time: 0.2 }
    }

    #[test]
    fn identical_clouds_are_infinite() {
        let a = random_cloud(50, 1);
        assert_eq!(psnr_d1(&a, &a, None).unwrap(), f64::INFINITY);
        assert_eq!(psnr_d2(&a, &a, None, 9).unwrap().psnr, f64::INFINITY);
        assert!(psnr_d1(&a, &PointCloud::new(vec![]), None).is_err());
    }

    #[test]
    fn translated_isolated_points() {
        let a = PointCloud::new((0..20).map(|i| [i as f64 * 5.0, 0.0, 0.0]).collect());
        let d = 0.3;
        let b = PointCloud::new(a.points.iter().map(|p| [p[0], p[1] + d, p[2]]).collect());
        let r = 95.0;
        let got = psnr_d1(&a, &b, None).unwrap();
        assert!((got - 10.0 * (3.0 * r * r / (d * d)).log10()).abs() < 1e-9, "{got}");
    }

    #[test]
    fn tree_matches_brute_force() {
        let a = random_cloud(500, 2);
        let b = random_cloud(500, 3);
        let tree = NnIndex::tree(&b.points);
        for p in &a.points {
            let brute = b.points.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest(p).0, brute);
        }
    }

    #[test]
    fn tree_survives_lattice_ties() {
        let pts: Vec<[f64; 3]> =
            (0..4096).map(|i| [(i % 16) as f64 * 0.1 + 0.05, (i / 16 % 16) as f64 * 0.1 + 0.05, 0.05]).collect();
        let t = NnIndex::tree(&pts);
        assert_eq!(t.nearest(&[0.05, 0.05, 0.05]).0, 0.0);
        assert_eq!(t.knn(&[0.75, 0.75, 0.05], 9).len(), 9);
    }

    #[test]
    fn plane_normals_match_analytic() {
        let n = Vector3::new(1.0, 2.0, 2.0).normalize();
        let (u, v) = (Vector3::new(2.0, -1.0, 0.0).normalize(), n.cross(&Vector3::new(2.0, -1.0, 0.0).normalize()));
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..400)
            .map(|_| {
                let p = u * r.gen_range(-3.0..3.0) + v * r.gen_range(-3.0..3.0) + n * 0.5;
                [p.x, p.y, p.z]
            })
            .collect();
        for est in estimate_normals(&PointCloud::new(pts), 9) {
            let e = Vector3::from(est.unwrap());
            let ang = e.dot(&n).abs().min(1.0).acos().to_degrees();
            assert!(ang < 1.0, "{ang}");
        }
    }

    #[test]
    fn in_plane_offset_has_no_d2_error() {
        let grid = |off: f64| {
            PointCloud::new((0..400).map(|i| [(i % 20) as f64 * 0.1 + off, (i / 20) as f64 * 0.1 + off, 1.0]).collect())
        };
        let (a, b) = (grid(0.0), grid(0.03));
        let d2 = psnr_d2(&a, &b, None, 9).unwrap();
        assert!(d2.mse < 1e-20, "{}", d2.mse);
        assert!(mse_d1(&a, &b).unwrap() > 1e-4);
        assert_eq!(d2.fallbacks, 0);
    }

    #[test]
    fn collinear_neighborhoods_fall_back() {
        let line = PointCloud::new((0..30).map(|i| [i as f64, 0.0, 0.0]).collect());
        let moved = PointCloud::new((0..30).map(|i| [i as f64, 0.5, 0.0]).collect());
        let d2 = psnr_d2(&line, &moved, None, 9).unwrap();
        assert_eq!(d2.fallbacks, 60);
        assert!((d2.mse - 0.25).abs() < 1e-12);
        assert!(psnr_d2(&line, &moved, None, 30).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = PointCloud::new(vec![[0.05, 0.05, 0.05], [0.15, 0.05, 0.05]]);
        let b = PointCloud::new(vec![[0.15, 0.05, 0.05], [0.25, 0.05, 0.05]]);
        assert!((iou_grid(&a, &b, 0.1, Some([0.0; 3])).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou_grid(&a, &a, 0.1, None).unwrap(), 1.0);
        let far = PointCloud::new(vec![[5.0, 5.0, 5.0]]);
        assert_eq!(iou_grid(&a, &far, 0.1, None).unwrap(), 0.0);
        let e = PointCloud::new(vec![]);
        assert!(iou_grid(&e, &e, 0.1, None).is_err());
        assert_eq!(iou_grid(&a, &e, 0.1, None).unwrap(), 0.0);
    }

    #[test]
    fn bd_identical_and_halved() {
        let r = RdCurve::new("ref", vec![pt(0.5, 30.0), pt(1.0, 34.0), pt(2.0, 37.5), pt(4.0, 40.0)]).unwrap();
        let z = bd_metrics(&r, &r, Metric::D1).unwrap();
        assert!(z.bd_rate.abs() < 1e-9 && z.bd_psnr.abs() < 1e-9);
        let half = RdCurve::new("half", r.points.iter().map(|p| RdPoint { bpp: p.bpp / 2.0, ..p.clone() }).collect()).unwrap();
        let h = bd_metrics(&r, &half, Metric::D1).unwrap();
        assert!((h.bd_rate + 50.0).abs() < 1e-9, "{}", h.bd_rate);
        assert!(h.bd_psnr > 0.0);
    }

    #[test]
    fn bd_rejects_disjoint_and_short() {
        let a = RdCurve::new("a", vec![pt(0.5, 20.0), pt(1.0, 21.0), pt(2.0, 22.0), pt(4.0, 23.0)]).unwrap();
        let b = RdCurve::new("b", vec![pt(0.5, 40.0), pt(1.0, 41.0), pt(2.0, 42.0), pt(4.0, 43.0)]).unwrap();
        assert!(bd_metrics(&a, &b, Metric::D1).is_err());
        let c = RdCurve::new("c", a.points[..3].to_vec()).unwrap();
        assert!(bd_metrics(&a, &c, Metric::D1).is_err());
        assert!(RdCurve::new("dup", vec![pt(1.0, 20.0), pt(1.0, 21.0)]).is_err());
    }

    #[test]
    fn report_formats() {
        let c = RdCurve::new("ours", vec![RdPoint { psnr_d2: f64::INFINITY, ..pt(1.5, 40.0) }]).unwrap();
        let csv = rd_csv(std::slice::from_ref(&c));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, vec!["label,bpp,d1,d2,iou,enc_s,dec_s", "ours,1.5,40,inf,0.5,0.1,0.2"]);
        assert_eq!(parse_rd_csv(&csv).unwrap(), vec![c.clone()]);
        let js = rd_json(std::slice::from_ref(&c));
        assert!(js.contains("\"inf\""));
        assert_eq!(parse_rd_json(&js).unwrap(), vec![c]);
        let odd = RdCurve::new("a,\"b\"", vec![pt(1.0, 30.0), pt(2.0, 33.0)]).unwrap();
        let two = [odd, RdCurve::new("plain", vec![pt(0.7, 28.0)]).unwrap()];
        assert_eq!(parse_rd_csv(&rd_csv(&two)).unwrap(), two);
        assert!(parse_rd_csv("label,bpp\nx,1\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn d1_is_symmetric(sa in 0u64..1000, sb in 0u64..1000, na in 1usize..60, nb in 1usize..60) {
            let (a, b) = (random_cloud(na, sa), random_cloud(nb, sb + 5000));
            prop_assert_eq!(mse_d1(&a, &b).unwrap(), mse_d1(&b, &a).unwrap());
        }

        #[test]
        fn iou_is_a_fraction(sa in 0u64..1000, sb in 0u64..1000, grid in 0.5f64..4.0) {
            let (a, b) = (random_cloud(30, sa), random_cloud(30, sb + 5000));
            let v = iou_grid(&a, &b, grid, Some([0.0; 3])).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let same = occupancy(&a, grid, [0.0; 3]) == occupancy(&b, grid, [0.0; 3]);
            prop_assert_eq!(v == 1.0, same);
        }

        #[test]
        fn better_curve_has_negative_rate_delta(gain in 0.05f64..0.6, lift in 0.0f64..1.0) {
            let r = RdCurve::new("r", vec![pt(0.5, 30.0), pt(1.0, 34.0), pt(2.0, 37.5), pt(4.0, 40.0)]).unwrap();
            let t: Vec<RdPoint> = r.points.iter().map(|p| RdPoint { bpp: p.bpp * (1.0 - gain), psnr_d1: p.psnr_d1 + lift, ..p.clone() }).collect();
            let bd = bd_metrics(&r, &RdCurve::new("t", t).unwrap(), Metric::D1).unwrap();
            prop_assert!(bd.bd_rate < 0.0 && bd.bd_psnr > 0.0, "{:?}", bd);
        }

        #[test]
        fn tables_round_trip_exactly(bpp in 1e-6f64..1e3, q in -50f64..200.0, iou in 0.0f64..=1.0, t in 0f64..1e4) {
            let p = RdPoint { bpp, psnr_d1: q, psnr_d2: q / 3.0, iou, enc_time: t, dec_time: t / 7.0 };
            let c = vec![RdCurve::new("x", vec![p]).unwrap()];
            prop_assert_eq!(&parse_rd_csv(&rd_csv(&c)).unwrap(), &c);
            prop_assert_eq!(&parse_rd_json(&rd_json(&c)).unwrap(), &c);
        }
    }
}

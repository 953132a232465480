//! Seeded synthetic LiDAR scenes: a ground plane with boxes and poles,
//! sampled by a ring sensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Scene cube `[0, extent)³` in meters.
    pub extent: f64,
    pub rings: usize,
    pub azimuths: usize,
    pub boxes: usize,
    pub poles: usize,
    pub ground_z: f64,
    pub sensor_height: f64,
    /// Elevation range of the rings in degrees.
    pub elevation: [f64; 2],
    /// Standard deviation-like half width of uniform range noise, meters.
    pub range_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: 6.4,
            rings: 32,
            azimuths: 512,
            boxes: 5,
            poles: 4,
            ground_z: 0.2,
            sensor_height: 1.7,
            elevation: [-75.0, -30.0],
            range_noise: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
struct Pole {
    x: f64,
    y: f64,
    r: f64,
    z0: f64,
    z1: f64,
}

fn hit_box(o: [f64; 3], d: [f64; 3], b: &Aabb) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < b.lo[a] || o[a] > b.hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((b.lo[a] - o[a]) / d[a], (b.hi[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 1e-9).then_some(t0)
}

fn hit_pole(o: [f64; 3], d: [f64; 3], p: &Pole) -> Option<f64> {
    let (ox, oy) = (o[0] - p.x, o[1] - p.y);
    let a = d[0] * d[0] + d[1] * d[1];
    if a < 1e-12 {
        return None;
    }
    let b = 2.0 * (ox * d[0] + oy * d[1]);
    let c = ox * ox + oy * oy - p.r * p.r;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    let z = o[2] + t * d[2];
    (t > 1e-9 && z >= p.z0 && z <= p.z1).then_some(t)
}

/// Deterministic scene: `rings × azimuths` points inside `[0, extent)³`.
pub fn generate(spec: &SceneSpec) -> Result<PointCloud> {
    let e = spec.extent;
    if !(e > 1.0) || spec.rings == 0 || spec.azimuths == 0 {
        return Err(Error::invalid("scene needs extent > 1 m and at least one ring and azimuth"));
    }
    let sensor = [e / 2.0, e / 2.0, spec.ground_z + spec.sensor_height];
    if !(spec.ground_z >= 0.0 && sensor[2] < e) {
        return Err(Error::invalid("sensor must sit inside the scene"));
    }
    let [el0, el1] = spec.elevation;
    if !(el0 < el1 && el1 < 0.0) {
        return Err(Error::invalid("elevations must be negative and increasing"));
    }
    // every ring must reach the ground inside the scene
    let reach = spec.sensor_height / (-el1).to_radians().tan();
    if reach >= e / 2.0 {
        return Err(Error::invalid(format!("shallowest ring reaches {reach:.2} m, beyond the scene half-width")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // keep obstacles off the sensor; the clearance shrinks for small scenes
    let clear = 0.9f64.min(e / 7.0);
    let place = |rng: &mut ChaCha8Rng, margin: f64| -> Result<(f64, f64)> {
        for _ in 0..10_000 {
            let x = rng.gen_range(margin..e - margin);
            let y = rng.gen_range(margin..e - margin);
            if ((x - sensor[0]).powi(2) + (y - sensor[1]).powi(2)).sqrt() > clear + margin {
                return Ok((x, y));
            }
        }
        Err(Error::invalid(format!("no room for obstacles in a {e} m scene")))
    };
    let mut boxes = Vec::with_capacity(spec.boxes);
    for _ in 0..spec.boxes {
        let (sx, sy) = (rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0));
        let h = rng.gen_range(0.3..1.4f64).min(e - spec.ground_z - 0.1);
        let (x, y) = place(&mut rng, 0.6)?;
        boxes.push(Aabb { lo: [x - sx / 2.0, y - sy / 2.0, spec.ground_z], hi: [x + sx / 2.0, y + sy / 2.0, spec.ground_z + h] });
    }
    let mut poles = Vec::with_capacity(spec.poles);
    for _ in 0..spec.poles {
        let r = rng.gen_range(0.05..0.12);
        let h = rng.gen_range(1.5..2.8f64).min(e - spec.ground_z - 0.1);
        let (x, y) = place(&mut rng, 0.3)?;
        poles.push(Pole { x, y, r, z0: spec.ground_z, z1: spec.ground_z + h });
    }
    let mut pts = Vec::with_capacity(spec.rings * spec.azimuths);
    for ring in 0..spec.rings {
        let f = if spec.rings == 1 { 0.5 } else { ring as f64 / (spec.rings - 1) as f64 };
        let el = (el0 + f * (el1 - el0)).to_radians();
        for az in 0..spec.azimuths {
            let phi = 2.0 * std::f64::consts::PI * az as f64 / spec.azimuths as f64;
            let d = [el.cos() * phi.cos(), el.cos() * phi.sin(), el.sin()];
            let mut t = (spec.ground_z - sensor[2]) / d[2];
            for b in &boxes {
                if let Some(tb) = hit_box(sensor, d, b) {
                    t = t.min(tb);
                }
            }
            for p in &poles {
                if let Some(tp) = hit_pole(sensor, d, p) {
                    t = t.min(tp);
                }
            }
            t += rng.gen_range(-spec.range_noise..=spec.range_noise);
            let top = e * (1.0 - 1e-12);
            pts.push(std::array::from_fn(|a| (sensor[a] + t * d[a]).clamp(0.0, top)));
        }
    }
    Ok(PointCloud::new(pts))
}

use std::path::{Path, PathBuf};
use std::time::Instant;

use fltc_core::config::ModelConfig;
use fltc_core::entropy::bitstream::Bitstream;
use fltc_core::evaluation::{self, Metric, RdCurve, RdPoint};
use fltc_core::geometry::{load_cloud, save_kitti_bin, save_ply, PlyFormat, PointCloud};
use fltc_core::model::{voxelize_for, Model, Origin};
use fltc_core::nn::checkpoint::Checkpoint;
use fltc_core::nn::ParamStore;
use fltc_core::refinement::Binarize;
use fltc_core::synth::{generate, SceneSpec};
use fltc_core::training::{Sample, TrainConfig, Trainer};
use fltc_core::{Error, Result};
use serde_json::{json, Value};

use crate::{BdrateArgs, BinarizeKind, DecodeArgs, EncodeArgs, EvalArgs, MetricKind, ReconArgs, SynthArgs, TrainArgs};

fn parse_origin(s: &str) -> Result<Origin> {
    match s {
        "min" => Ok(Origin::Min),
        "center" => Ok(Origin::Center),
        _ => {
            let v: Vec<f64> = s
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid(format!("--origin {s:?}: expected min, center or x,y,z")))?;
            match v[..] {
                [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Origin::At([x, y, z])),
                _ => Err(Error::invalid(format!("--origin {s:?}: expected three finite coordinates"))),
            }
        }
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("--dims {s:?}: expected H,W,D or one size")))?;
    match v[..] {
        [n] => Ok([n; 3]),
        [h, w, d] => Ok([h, w, d]),
        _ => Err(Error::invalid(format!("--dims {s:?}: expected H,W,D or one size"))),
    }
}

/// Finite values as numbers, `+inf` as the string `"inf"`.
fn num(v: f64) -> Value {
    if v == f64::INFINITY {
        json!("inf")
    } else {
        json!(v)
    }
}

fn load_model(path: &Path) -> Result<(Model, ParamStore<f32>)> {
    Model::from_checkpoint(Checkpoint::load(path)?)
}

fn save_cloud(path: &Path, cloud: &PointCloud, ascii: bool) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("bin") => save_kitti_bin(path, cloud),
        Some("ply") => save_ply(path, cloud, if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian }),
        _ => Err(Error::invalid(format!("output {} must end in .ply or .bin", path.display()))),
    }
}

fn binarize_mode(r: &ReconArgs, occupied: usize) -> Result<Binarize> {
    match r.binarize {
        BinarizeKind::Topk => Ok(Binarize::TopK(occupied)),
        BinarizeKind::Thresh if r.tau > 0.0 && r.tau < 1.0 => Ok(Binarize::Threshold(r.tau)),
        BinarizeKind::Thresh => Err(Error::invalid(format!("--tau {} must lie in (0, 1)", r.tau))),
    }
}

fn check_uplift(r: &ReconArgs) -> Result<()> {
    if r.uplift_rate == Some(0) {
        return Err(Error::invalid("--uplift-rate must be at least 1"));
    }
    Ok(())
}

struct Coded {
    bytes: Vec<u8>,
    points: usize,
    occupied: usize,
    dropped: usize,
    estimated_bits: f64,
    seconds: f64,
}

fn encode_cloud(model: &Model, ps: &ParamStore<f32>, cloud: &PointCloud, origin: Origin) -> Result<Coded> {
    let t = Instant::now();
    let vox = voxelize_for(cloud, &model.cfg, origin)?;
    let enc = model.encode(ps, &vox.grid, cloud.len())?;
    let bytes = enc.bitstream.serialize()?;
    Ok(Coded {
        bytes,
        points: cloud.len(),
        occupied: vox.grid.occupied_count(),
        dropped: vox.dropped,
        estimated_bits: enc.estimated_bits,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Parses and reconstructs a container; returns the cloud, occupied voxel
/// count and seconds spent.
fn decode_bytes(model: &Model, ps: &ParamStore<f32>, bytes: &[u8], r: &ReconArgs) -> Result<(PointCloud, usize, f64)> {
    check_uplift(r)?;
    let t = Instant::now();
    let bs = Bitstream::parse(bytes)?;
    let dec = model.decode(ps, &bs)?;
    let mode = binarize_mode(r, dec.header.occupied as usize)?;
    let (grid, cloud) = model.reconstruct(ps, &dec, mode, r.uplift_rate)?;
    Ok((cloud, grid.occupied_count(), t.elapsed().as_secs_f64()))
}

pub fn encode(a: EncodeArgs) -> Result<Value> {
    let origin = parse_origin(&a.origin)?;
    let cloud = load_cloud(&a.input)?;
    let (model, ps) = load_model(&a.checkpoint)?;
    let c = encode_cloud(&model, &ps, &cloud, origin)?;
    std::fs::write(&a.output, &c.bytes)?;
    let bits = c.bytes.len() * 8;
    Ok(json!({
        "command": "encode",
        "output": a.output,
        "points": c.points,
        "occupied": c.occupied,
        "dropped": c.dropped,
        "bytes": c.bytes.len(),
        "bits": bits,
        "bpp": bits as f64 / c.points as f64,
        "estimated_bits": c.estimated_bits,
        "enc_s": c.seconds,
    }))
}

pub fn decode(a: DecodeArgs) -> Result<Value> {
    let bytes = std::fs::read(&a.input)?;
    let (model, ps) = load_model(&a.checkpoint)?;
    let (cloud, occupied, seconds) = decode_bytes(&model, &ps, &bytes, &a.recon)?;
    save_cloud(&a.output, &cloud, a.ascii)?;
    Ok(json!({
        "command": "decode",
        "output": a.output,
        "points": cloud.len(),
        "occupied": occupied,
        "dec_s": seconds,
    }))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = &a.preset {
        c.model = ModelConfig::preset(p)?;
    }
    if let Some(d) = &a.dims {
        c.model.dims = parse_dims(d)?;
    }
    if let Some(v) = a.voxel_size {
        c.model.voxel_size = v;
    }
    if let Some(s) = a.seed {
        c.seed = s;
        c.model.seed = s;
    }
    c.lambda = a.lambda.unwrap_or(c.lambda);
    c.lr = a.lr.unwrap_or(c.lr);
    c.density_lr_scale = a.density_lr_scale.unwrap_or(c.density_lr_scale);
    c.steps = a.steps.unwrap_or(c.steps);
    c.uplift_rate = a.uplift_rate.unwrap_or(c.uplift_rate);
    c.uplift_steps = a.uplift_steps.unwrap_or(c.uplift_steps);
    c.checkpoint_every = a.checkpoint_every.unwrap_or(c.checkpoint_every);
    c.validate()?;
    Ok(c)
}

fn training_clouds(a: &TrainArgs) -> Result<Vec<PointCloud>> {
    let mut clouds = Vec::new();
    for p in &a.scans {
        clouds.push(load_cloud(p)?);
    }
    let seeds: Vec<u64> = match &a.synth_seeds {
        Some(s) => s
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("--synth-seeds {s:?}: expected comma separated integers")))?,
        None if clouds.is_empty() => vec![0],
        None => vec![],
    };
    for seed in seeds {
        clouds.push(generate(&SceneSpec { seed, ..Default::default() })?);
    }
    Ok(clouds)
}

fn ladder_path(out: &Path, lambda: f64) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-lambda{lambda}.{ext}"),
        None => format!("{stem}-lambda{lambda}"),
    };
    out.with_file_name(name)
}

fn train_one(cfg: TrainConfig, samples: &[Sample], out: &Path, log_every: usize) -> Result<Value> {
    let t = Instant::now();
    let (model, ps) = Model::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, ps, cfg);
    let every = trainer.cfg.checkpoint_every;
    let mut save_err = None;
    let reports = trainer.fit(samples, |tr, r| {
        if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == tr.cfg.steps) {
            eprintln!("{}", json!({"step": r.step, "loss": r.total, "distortion": r.distortion, "rate": r.rate}));
        }
        if every > 0 && (r.step + 1) % every == 0 && save_err.is_none() {
            save_err = tr.model.checkpoint(&tr.ps).save(out).err();
        }
    })?;
    if let Some(e) = save_err {
        return Err(e);
    }
    let uplift_loss = if trainer.cfg.uplift_steps > 0 { Some(trainer.fit_uplifter(samples)?) } else { None };
    trainer.model.checkpoint(&trainer.ps).save(out)?;
    let last = reports.last();
    Ok(json!({
        "checkpoint": out,
        "lambda": trainer.cfg.lambda,
        "steps": trainer.steps_done(),
        "loss": last.map(|r| r.total),
        "distortion": last.map(|r| r.distortion),
        "rate": last.map(|r| r.rate),
        "uplift_loss": uplift_loss,
        "seconds": t.elapsed().as_secs_f64(),
    }))
}

pub fn train(a: TrainArgs) -> Result<Value> {
    let cfg = train_config(&a)?;
    let origin = parse_origin(&a.origin)?;
    let samples = training_clouds(&a)?
        .into_iter()
        .map(|c| Sample::from_cloud(c, &cfg.model, origin))
        .collect::<Result<Vec<_>>>()?;
    let runs = if a.ladder {
        let mut runs = Vec::new();
        for &m in &cfg.ladder {
            let c = TrainConfig { lambda: cfg.lambda * m, ..cfg.clone() };
            let out = ladder_path(&a.out, c.lambda);
            runs.push(train_one(c, &samples, &out, a.log_every)?);
        }
        runs
    } else {
        vec![train_one(cfg.clone(), &samples, &a.out, a.log_every)?]
    };
    Ok(json!({ "command": "train", "model": cfg.model.name, "samples": samples.len(), "runs": runs }))
}

struct Metrics {
    d1: f64,
    d2: f64,
    d2_fallbacks: usize,
    iou: f64,
}

fn metrics(reference: &PointCloud, test: &PointCloud, a: &EvalArgs) -> Result<Metrics> {
    let d2 = evaluation::psnr_d2(reference, test, a.peak, a.k)?;
    Ok(Metrics {
        d1: evaluation::psnr_d1(reference, test, a.peak)?,
        d2: d2.psnr,
        d2_fallbacks: d2.fallbacks,
        iou: evaluation::iou_grid(reference, test, a.grid, None)?,
    })
}

fn write_tables(a: &EvalArgs, curve: &RdCurve) -> Result<()> {
    let curves = std::slice::from_ref(curve);
    if let Some(p) = &a.csv {
        std::fs::write(p, evaluation::rd_csv(curves))?;
    }
    if let Some(p) = &a.json {
        std::fs::write(p, evaluation::rd_json(curves))?;
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<Value> {
    let reference = load_cloud(&a.reference)?;
    if let Some(path) = &a.decoded {
        let test = load_cloud(path)?;
        let m = metrics(&reference, &test, &a)?;
        let tables = a.csv.is_some() || a.json.is_some();
        match a.bpp {
            Some(bpp) => {
                let p = RdPoint { bpp, psnr_d1: m.d1, psnr_d2: m.d2, iou: m.iou, enc_time: 0.0, dec_time: 0.0 };
                write_tables(&a, &RdCurve::new(a.label.clone(), vec![p])?)?;
            }
            None if tables => return Err(Error::invalid("RD tables need --bpp for a --decoded cloud")),
            None => {}
        }
        return Ok(json!({
            "command": "eval",
            "label": a.label,
            "bpp": a.bpp,
            "d1": num(m.d1),
            "d2": num(m.d2),
            "d2_fallbacks": m.d2_fallbacks,
            "iou": m.iou,
        }));
    }
    if a.checkpoints.is_empty() {
        return Err(Error::invalid("eval needs --decoded or at least one --checkpoint"));
    }
    let origin = parse_origin(&a.origin)?;
    let mut points = Vec::new();
    let mut extra = Vec::new();
    for ck in &a.checkpoints {
        let (model, ps) = load_model(ck)?;
        let c = encode_cloud(&model, &ps, &reference, origin)?;
        let (test, _, dec_s) = decode_bytes(&model, &ps, &c.bytes, &a.recon)?;
        let m = metrics(&reference, &test, &a)?;
        points.push(RdPoint {
            bpp: (c.bytes.len() * 8) as f64 / c.points as f64,
            psnr_d1: m.d1,
            psnr_d2: m.d2,
            iou: m.iou,
            enc_time: c.seconds,
            dec_time: dec_s,
        });
        extra.push(json!({"checkpoint": ck, "d2_fallbacks": m.d2_fallbacks}));
    }
    let curve = RdCurve::new(a.label.clone(), points)?;
    write_tables(&a, &curve)?;
    Ok(json!({ "command": "eval", "label": curve.label, "points": curve.points, "runs": extra }))
}

fn load_curves(path: &Path) -> Result<Vec<RdCurve>> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("csv") => evaluation::parse_rd_csv(&text),
        _ => evaluation::parse_rd_json(&text),
    }
}

fn pick(curves: Vec<RdCurve>, label: Option<&str>, path: &Path) -> Result<RdCurve> {
    match label {
        Some(l) => curves
            .into_iter()
            .find(|c| c.label == l)
            .ok_or_else(|| Error::invalid(format!("no curve labelled {l:?} in {}", path.display()))),
        None if curves.len() == 1 => Ok(curves.into_iter().next().unwrap()),
        None => Err(Error::invalid(format!("{} holds {} curves; pick one with a label flag", path.display(), curves.len()))),
    }
}

pub fn bdrate(a: BdrateArgs) -> Result<Value> {
    let r = pick(load_curves(&a.reference)?, a.reference_label.as_deref(), &a.reference)?;
    let t = pick(load_curves(&a.test)?, a.test_label.as_deref(), &a.test)?;
    let metric = match a.metric {
        MetricKind::D1 => Metric::D1,
        MetricKind::D2 => Metric::D2,
    };
    let bd = evaluation::bd_metrics(&r, &t, metric)?;
    Ok(json!({
        "command": "bdrate",
        "reference": r.label,
        "test": t.label,
        "metric": format!("{:?}", a.metric).to_lowercase(),
        "bd_rate": bd.bd_rate,
        "bd_psnr": bd.bd_psnr,
    }))
}

pub fn synth(a: SynthArgs) -> Result<Value> {
    let d = SceneSpec::default();
    let spec = SceneSpec {
        seed: a.seed,
        extent: a.extent.unwrap_or(d.extent),
        rings: a.rings.unwrap_or(d.rings),
        azimuths: a.azimuths.unwrap_or(d.azimuths),
        boxes: a.boxes.unwrap_or(d.boxes),
        poles: a.poles.unwrap_or(d.poles),
        ..d
    };
    let cloud = generate(&spec)?;
    save_cloud(&a.out, &cloud, a.ascii)?;
    Ok(json!({ "command": "synth", "output": a.out, "seed": a.seed, "points": cloud.len(), "extent": spec.extent }))
}

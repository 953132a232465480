//! `fltc`: encode, decode, train and evaluate triplane LiDAR geometry codecs.
//!
//! Every command prints one line of JSON on stdout. Exit codes: 0 ok,
//! 1 usage, 2 data error, 3 model error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fltc_core::Error;

#[derive(Parser, Debug)]
#[command(name = "fltc", version, about = "Triplane LiDAR geometry codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress a scan into a .flt container.
    Encode(EncodeArgs),
    /// Reconstruct a point cloud from a .flt container.
    Decode(DecodeArgs),
    /// Train a model (or a λ ladder of models) and write checkpoints.
    Train(TrainArgs),
    /// Measure D1/D2 PSNR, IoU and bits per point; optionally write RD tables.
    Eval(EvalArgs),
    /// Bjøntegaard deltas between two RD curves.
    Bdrate(BdrateArgs),
    /// Write a deterministic synthetic LiDAR scene.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// Input scan (.bin KITTI records or .ply).
    #[arg(short, long)]
    input: PathBuf,
    /// Model checkpoint.
    #[arg(short, long)]
    checkpoint: PathBuf,
    /// Output container (.flt).
    #[arg(short, long)]
    output: PathBuf,
    /// Grid placement: `min`, `center` or an explicit corner `x,y,z`.
    #[arg(long, default_value = "min")]
    origin: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BinarizeKind {
    /// Keep exactly the transmitted number of occupied voxels.
    Topk,
    /// Keep voxels whose probability exceeds `--tau`.
    Thresh,
}

#[derive(Args, Debug, Clone)]
struct ReconArgs {
    /// Occupancy binarization rule.
    #[arg(long, value_enum, default_value = "topk")]
    binarize: BinarizeKind,
    /// Probability threshold for `--binarize thresh`.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Points generated per occupied voxel by the uplifter (omit for voxel centers).
    #[arg(long)]
    uplift_rate: Option<usize>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Input container (.flt).
    #[arg(short, long)]
    input: PathBuf,
    /// Model checkpoint.
    #[arg(short, long)]
    checkpoint: PathBuf,
    /// Output cloud (.ply, or .bin for KITTI records).
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    recon: ReconArgs,
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Output checkpoint. With `--ladder`, one file per λ is written next
    /// to it as `<stem>-lambda<λ>.<ext>`.
    #[arg(short, long)]
    out: PathBuf,
    /// Training config (TOML mirroring the training parameters); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: desk, r448, r384 or r320.
    #[arg(long)]
    preset: Option<String>,
    /// Grid size `H,W,D` (or one value for a cube).
    #[arg(long)]
    dims: Option<String>,
    /// Voxel edge length in meters.
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Rate-distortion trade-off λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate multiplier for the entropy-model parameters.
    #[arg(long)]
    density_lr_scale: Option<f64>,
    /// Optimisation steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed for initialisation and training noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Points per voxel the uplifter is trained for.
    #[arg(long)]
    uplift_rate: Option<usize>,
    /// Uplifter training steps (0 skips it).
    #[arg(long)]
    uplift_steps: Option<usize>,
    /// Save the checkpoint every N steps (0 only at the end).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Train one model per ladder multiplier of λ.
    #[arg(long)]
    ladder: bool,
    /// Training scans (.bin or .ply); repeatable.
    #[arg(long = "scan")]
    scans: Vec<PathBuf>,
    /// Seeds of synthetic scenes to train on, comma separated (default 0 when no scan is given).
    #[arg(long)]
    synth_seeds: Option<String>,
    /// Grid placement: `min`, `center` or `x,y,z`.
    #[arg(long, default_value = "min")]
    origin: String,
    /// Print a progress line to stderr every N steps (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Original scan.
    #[arg(short, long)]
    reference: PathBuf,
    /// Already decoded cloud to compare against the reference.
    #[arg(long, conflicts_with = "checkpoints")]
    decoded: Option<PathBuf>,
    /// Bits per point of `--decoded`, needed for RD tables.
    #[arg(long, requires = "decoded")]
    bpp: Option<f64>,
    /// Checkpoints to run end to end, one RD point each; repeatable.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    recon: ReconArgs,
    /// Grid placement for encoding: `min`, `center` or `x,y,z`.
    #[arg(long, default_value = "min")]
    origin: String,
    /// PSNR peak; defaults to the largest bounding-box extent of the reference.
    #[arg(long)]
    peak: Option<f64>,
    /// IoU voxel size in meters.
    #[arg(long, default_value_t = 0.1)]
    grid: f64,
    /// Neighbors for D2 normal estimation.
    #[arg(long, default_value_t = 9)]
    k: usize,
    /// Curve label in RD tables.
    #[arg(long, default_value = "fltc")]
    label: String,
    /// Write the RD table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the RD table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricKind {
    D1,
    D2,
}

#[derive(Args, Debug)]
struct BdrateArgs {
    /// Anchor RD table (.json or .csv).
    #[arg(long)]
    reference: PathBuf,
    /// Tested RD table (.json or .csv).
    #[arg(long)]
    test: PathBuf,
    /// Curve label inside the anchor table (needed when it holds several).
    #[arg(long)]
    reference_label: Option<String>,
    /// Curve label inside the tested table.
    #[arg(long)]
    test_label: Option<String>,
    /// Quality metric on the PSNR axis.
    #[arg(long, value_enum, default_value = "d1")]
    metric: MetricKind,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output scan (.ply or .bin).
    #[arg(short, long)]
    out: PathBuf,
    /// Scene seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene cube edge in meters.
    #[arg(long)]
    extent: Option<f64>,
    /// Laser rings.
    #[arg(long)]
    rings: Option<usize>,
    /// Samples per ring.
    #[arg(long)]
    azimuths: Option<usize>,
    /// Box obstacles.
    #[arg(long)]
    boxes: Option<usize>,
    /// Pole obstacles.
    #[arg(long)]
    poles: Option<usize>,
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    ascii: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invalid(_) => 1,
        Error::Model(_) => 3,
        Error::Io(_) | Error::Data(_) | Error::Truncated { .. } | Error::NonFinite(_) | Error::Shape(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bdrate(a) => commands::bdrate(a),
        Command::Synth(a) => commands::synth(a),
    };
    match res {
        Ok(stats) => {
            println!("{stats}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::EXIT_CODES;

#[derive(Debug, Parser)]
#[command(name = "qsmtk", version, about = "Quantitative susceptibility mapping toolkit", after_help = EXIT_CODES)]
pub struct Cli {
    /// Worker threads for batch subcommands (synth, batch eval).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Single-threaded run with timings left out of the manifest, so reruns are byte-identical.
    #[arg(long, global = true)]
    pub strict_deterministic: bool,
    /// Master seed for phantoms, noise and training.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Manifest path (default: next to the primary output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded phantom triples (susceptibility, local field, mask).
    Synth(SynthArgs),
    /// Simulate the field perturbation of a susceptibility map.
    Forward(ForwardArgs),
    /// Remove the background field with regularized SHARP.
    Bgremove(BgremoveArgs),
    /// Invert a local field to susceptibility.
    Invert(InvertArgs),
    /// Train the network on a synth directory.
    Train(TrainArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Write one slice as an 8-bit PGM image.
    ExportSlice(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Cube edge in voxels.
    #[arg(long, default_value_t = 64, conflicts_with = "dims")]
    pub size: usize,
    /// Grid as `nx,ny,nz`.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_vec3, default_value = "1,1,1")]
    pub voxel_size: [f64; 3],
    #[arg(long)]
    pub n_shapes: Option<usize>,
    /// Inclusion susceptibility range `lo,hi` in ppm.
    #[arg(long, value_parser = parse_pair)]
    pub chi_range: Option<[f64; 2]>,
    /// Main field direction `hx,hy,hz` (normalized).
    #[arg(long, value_parser = parse_vec3)]
    pub b0: Option<[f64; 3]>,
    /// Also write a noisy field at this SNR.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub chi: PathBuf,
    /// Main field direction; defaults to the header's, then +z.
    #[arg(long, value_parser = parse_vec3)]
    pub b0: Option<[f64; 3]>,
    /// Skip the zero-padding to twice the grid (circular convolution).
    #[arg(long)]
    pub no_pad: bool,
    /// Add masked Gaussian noise at this SNR (needs --mask).
    #[arg(long, requires = "mask")]
    pub snr: Option<f64>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BgremoveArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 6.0)]
    pub radius_mm: f64,
    /// Tikhonov weight.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub cg_max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub cg_tol: f64,
    #[arg(long)]
    pub out_field: PathBuf,
    #[arg(long)]
    pub out_mask: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Tkd,
    Tv,
    Medi,
    Cosmos,
    Nn,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Local field in ppm; repeat once per orientation for cosmos.
    #[arg(long, required = true)]
    pub field: Vec<PathBuf>,
    #[arg(long)]
    pub mask: PathBuf,
    /// Main field direction per field; defaults to each header's, then +z.
    #[arg(long, value_parser = parse_vec3)]
    pub b0: Vec<[f64; 3]>,
    #[arg(long)]
    pub out: PathBuf,
    /// Solve log path (default: `<out>.solve.json`).
    #[arg(long)]
    pub solve_log: Option<PathBuf>,
    /// TKD: truncation threshold on |D|.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// TV: regularization weight.
    #[arg(long)]
    pub alpha1: Option<f64>,
    /// TV and MEDI: gradient splitting penalty.
    #[arg(long)]
    pub mu1: Option<f64>,
    /// TV and MEDI: data splitting penalty.
    #[arg(long)]
    pub mu2: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// MEDI: fidelity weight in phase units.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// MEDI: radians of phase per ppm.
    #[arg(long)]
    pub phase_per_ppm: Option<f64>,
    /// MEDI: percentage of masked voxels treated as edges.
    #[arg(long)]
    pub edge_percentile: Option<f64>,
    /// MEDI: volume whose gradients define the edges (e.g. magnitude).
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// COSMOS: spectral regularizer.
    #[arg(long)]
    pub eps: Option<f64>,
    /// NN: trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Input noise SNR applied to the training fields; omit for noiseless.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    /// Constant factor applied to the input field before the first layer.
    #[arg(long, default_value_t = qsm_nn::NetConfig::default().field_scale)]
    pub field_scale: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.95)]
    pub lr_gamma: f64,
    #[arg(long, default_value_t = 200)]
    pub lr_decay_steps: u64,
    /// Extra checkpoint every N steps (0: epoch ends only).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue from this checkpoint; its training config wins except for --epochs.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires_all = ["reference", "mask"], conflicts_with_all = ["ref_dir", "pred_dir"])]
    pub pred: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Batch mode: synth directory holding `<id>_chi.vol` and `<id>_mask.vol`.
    #[arg(long, requires = "pred_dir")]
    pub ref_dir: Option<PathBuf>,
    /// Batch mode: `label=dir` with one `<id>.vol` per reference; repeatable.
    #[arg(long, value_parser = parse_labeled)]
    pub pred_dir: Vec<(String, PathBuf)>,
    /// SSIM dynamic range over both volumes instead of the reference only.
    #[arg(long)]
    pub symmetric_range: bool,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub vol: PathBuf,
    /// x|y|z or sagittal|coronal|axial.
    #[arg(long, default_value = "z")]
    pub axis: String,
    #[arg(long)]
    pub index: usize,
    /// Display window `lo,hi`.
    #[arg(long, value_parser = parse_pair)]
    pub window: [f64; 2],
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers, got {s:?}"));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("not a number: {p:?}"))?;
        if !o.is_finite() {
            return Err(format!("not finite: {p:?}"));
        }
    }
    Ok(out)
}

pub fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

pub fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    parse_floats::<2>(s)
}

pub fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v = parse_floats::<3>(s)?;
    let mut out = [0; 3];
    for (o, x) in out.iter_mut().zip(v) {
        if x < 1.0 || x.fract() != 0.0 {
            return Err(format!("dims must be positive integers, got {s:?}"));
        }
        *o = x as usize;
    }
    Ok(out)
}

pub fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    let (label, dir) = s.split_once('=').ok_or_else(|| format!("expected label=dir, got {s:?}"))?;
    if label.is_empty() {
        return Err("empty label".into());
    }
    Ok((label.to_string(), PathBuf::from(dir)))
}

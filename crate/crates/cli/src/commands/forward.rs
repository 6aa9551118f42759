use std::path::PathBuf;

use serde::Serialize;

use qsm_core::dipole::{build_dipole_kernel, forward_field, simulate_measurement};
use qsm_core::B0Direction;

use super::{load_mask, load_volume, manifest_beside, resolve_b0, save_volume, Context};
use crate::args::ForwardArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Serialize)]
struct ForwardConfig {
    b0: B0Direction,
    pad: bool,
    snr: Option<f64>,
    noise_seed: Option<u64>,
}

pub fn run(ctx: &Context, a: &ForwardArgs, rec: &mut Recorder) -> CliResult<PathBuf> {
    let chi = load_volume(&a.chi, rec)?;
    let b0 = resolve_b0(a.b0, &chi)?;
    let cfg = ForwardConfig { b0, pad: !a.no_pad, snr: a.snr, noise_seed: a.snr.map(|_| ctx.seed) };
    rec.config(&cfg)?;
    rec.phase("forward");
    let kernel = build_dipole_kernel(chi.dims(), chi.voxel_size(), b0)?;
    let mut field = forward_field(&chi, &kernel, cfg.pad)?;
    if let Some(snr) = a.snr {
        let path = a.mask.as_ref().ok_or_else(|| CliError::usage("--snr needs --mask"))?;
        let mask = load_mask(path, rec)?;
        field = simulate_measurement(&field, &mask, snr, ctx.seed)?.with_b0(Some(b0));
    }
    rec.phase("write");
    save_volume(&field, &a.out, rec)?;
    Ok(manifest_beside(&a.out))
}

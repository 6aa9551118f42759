use std::path::PathBuf;

use qsm_core::fieldprep::{resharp, ResharpConfig};

use super::{load_mask, load_volume, manifest_beside, save_volume, Context};
use crate::args::BgremoveArgs;
use crate::error::CliResult;
use crate::manifest::Recorder;

pub fn run(_ctx: &Context, a: &BgremoveArgs, rec: &mut Recorder) -> CliResult<PathBuf> {
    let field = load_volume(&a.field, rec)?;
    let mask = load_mask(&a.mask, rec)?;
    let cfg = ResharpConfig {
        radius_mm: a.radius_mm,
        tikhonov_lambda: a.lambda,
        cg_max_iters: a.cg_max_iters,
        cg_tol: a.cg_tol,
    };
    rec.config(&cfg)?;
    rec.phase("resharp");
    let out = resharp(&field, &mask, &cfg)?;
    rec.result("cg_iterations", out.cg_iterations)?;
    rec.result("cg_residual", out.cg_residual)?;
    rec.result("reliable_voxels", out.reliable_mask.count())?;
    rec.phase("write");
    save_volume(&out.local_field, &a.out_field, rec)?;
    save_volume(out.reliable_mask.as_volume(), &a.out_mask, rec)?;
    Ok(manifest_beside(&a.out_field))
}

use std::path::PathBuf;

use serde::Serialize;

use qsm_core::export::{export_slice, SliceAxis};

use super::{load_volume, manifest_beside, Context};
use crate::args::ExportArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Serialize)]
struct ExportConfig {
    axis: String,
    index: usize,
    window: [f64; 2],
}

pub fn run(_ctx: &Context, a: &ExportArgs, rec: &mut Recorder) -> CliResult<PathBuf> {
    let axis = SliceAxis::parse(&a.axis).map_err(|e| CliError::usage(e.to_string()))?;
    if !(a.window[0] < a.window[1]) {
        return Err(CliError::usage(format!("--window lo must be below hi, got {:?}", a.window)));
    }
    let vol = load_volume(&a.vol, rec)?;
    rec.config(&ExportConfig { axis: format!("{axis:?}").to_lowercase(), index: a.index, window: a.window })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    let img = export_slice(&vol, axis, a.index, a.window, &a.out)?;
    rec.result("width", img.width)?;
    rec.result("height", img.height)?;
    rec.output(&a.out);
    Ok(manifest_beside(&a.out))
}

//! Subcommand implementations.

mod bgremove;
mod eval;
mod export;
mod forward;
mod invert;
mod synth;
mod train;

use std::path::{Path, PathBuf};

use qsm_core::io::{read_volume, write_volume};
use qsm_core::{B0Direction, Mask, Volume};

use crate::args::{Cli, Command};
use crate::error::{CliError, CliResult, ErrorKind};
use crate::manifest::{beside, Recorder, RunManifest};

/// Global settings shared by every subcommand.
#[derive(Debug)]
pub struct Context {
    pub seed: u64,
    pub threads: usize,
    pub strict: bool,
    manifest: Option<PathBuf>,
    pool: rayon::ThreadPool,
}

impl Context {
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    fn manifest_path(&self, default: PathBuf) -> PathBuf {
        self.manifest.clone().unwrap_or(default)
    }
}

/// Runs one parsed command line and returns the written manifest.
pub fn run(cli: Cli, argv: Vec<String>) -> CliResult<RunManifest> {
    if cli.threads == 0 {
        return Err(CliError::usage("--threads must be >= 1"));
    }
    let threads = if cli.strict_deterministic { 1 } else { cli.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::new(ErrorKind::Internal, e.to_string()))?;
    let ctx = Context { seed: cli.seed, threads, strict: cli.strict_deterministic, manifest: cli.manifest, pool };
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Forward(_) => "forward",
        Command::Bgremove(_) => "bgremove",
        Command::Invert(_) => "invert",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::ExportSlice(_) => "export-slice",
    };
    let mut rec = Recorder::new(name, argv, ctx.seed, threads, ctx.strict);
    let default_manifest = match &cli.command {
        Command::Synth(a) => synth::run(&ctx, a, &mut rec)?,
        Command::Forward(a) => forward::run(&ctx, a, &mut rec)?,
        Command::Bgremove(a) => bgremove::run(&ctx, a, &mut rec)?,
        Command::Invert(a) => invert::run(&ctx, a, &mut rec)?,
        Command::Train(a) => train::run(&ctx, a, &mut rec)?,
        Command::Eval(a) => eval::run(&ctx, a, &mut rec)?,
        Command::ExportSlice(a) => export::run(&ctx, a, &mut rec)?,
    };
    rec.finish(&ctx.manifest_path(default_manifest))
}

/// Reads a volume and records its hash.
fn load_volume(path: &Path, rec: &mut Recorder) -> CliResult<Volume> {
    if !path.is_file() {
        return Err(CliError::file(path, "no such file"));
    }
    rec.input(path)?;
    read_volume(path).map_err(|e| prefixed(path, e.into()))
}

fn load_mask(path: &Path, rec: &mut Recorder) -> CliResult<Mask> {
    let vol = load_volume(path, rec)?;
    Mask::brain(vol).map_err(|e| prefixed(path, e.into()))
}

fn save_volume(vol: &Volume, path: &Path, rec: &mut Recorder) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    write_volume(vol, path).map_err(|e| prefixed(path, e.into()))?;
    rec.output(path);
    Ok(())
}

fn prefixed(path: &Path, e: CliError) -> CliError {
    CliError::new(e.kind, format!("{}: {}", path.display(), e.message))
}

/// Flag value, then header value, then +z.
fn resolve_b0(flag: Option<[f64; 3]>, vol: &Volume) -> CliResult<B0Direction> {
    match flag {
        Some(h) => Ok(B0Direction::normalized(h)?),
        None => Ok(vol.b0().unwrap_or(B0Direction::Z)),
    }
}

fn manifest_beside(out: &Path) -> PathBuf {
    beside(out, ".manifest.json")
}

/// Ids `<id>` of every `<id>_chi.vol` in a synth directory, sorted.
fn phantom_ids(dir: &Path) -> CliResult<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::file(dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let name = e.map_err(|e| CliError::file(dir, e))?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_chi.vol") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::invalid(format!("{}: no *_chi.vol files", dir.display())));
    }
    Ok(ids)
}

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use qsm_core::dipole::simulate_measurement;
use qsm_core::io::write_volume;
use qsm_core::phantom::{derive_seed, generate_phantom, PhantomSpec};
use qsm_core::B0Direction;

use super::{prefixed, Context};
use crate::args::SynthArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_atomic, Recorder};

#[derive(Serialize)]
struct SynthConfig<'a> {
    count: usize,
    snr: Option<f64>,
    spec: &'a PhantomSpec,
}

/// Sidecar written next to each phantom.
#[derive(Serialize)]
struct Provenance<'a> {
    index: usize,
    spec: &'a PhantomSpec,
    files: Vec<String>,
    snr: Option<f64>,
    noise_seed: Option<u64>,
    resimulation_max_abs_err: f64,
}

/// File stem of phantom `i`.
pub fn phantom_id(i: usize) -> String {
    format!("phantom_{i:04}")
}

pub fn run(ctx: &Context, a: &SynthArgs, rec: &mut Recorder) -> CliResult<PathBuf> {
    if a.count == 0 {
        return Err(CliError::usage("--count must be >= 1"));
    }
    if let Some(s) = a.snr {
        if !(s > 0.0) {
            return Err(CliError::usage("--snr must be > 0"));
        }
    }
    let dims = a.dims.unwrap_or([a.size; 3]);
    let mut base = PhantomSpec::new(dims, 0);
    base.voxel_size_mm = a.voxel_size;
    if let Some(n) = a.n_shapes {
        base.n_shapes = n;
    }
    if let Some(r) = a.chi_range {
        base.susceptibility_range_ppm = r;
    }
    if let Some(h) = a.b0 {
        base.b0 = B0Direction::normalized(h)?;
    }
    base.validate()?;
    rec.config(&SynthConfig { count: a.count, snr: a.snr, spec: &base })?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::file(&a.out, e))?;

    rec.phase("generate");
    let specs = base.batch(ctx.seed, a.count);
    let out = &a.out;
    let written: Vec<CliResult<Vec<PathBuf>>> = ctx.install(|| {
        specs
            .par_iter()
            .enumerate()
            .map(|(i, spec)| {
                let pair = generate_phantom(spec)?;
                let err = pair.verify()?;
                let id = phantom_id(i);
                let mut files = vec![
                    (out.join(format!("{id}_chi.vol")), pair.chi_true.clone()),
                    (out.join(format!("{id}_field.vol")), pair.local_field.clone()),
                    (out.join(format!("{id}_mask.vol")), pair.mask.as_volume().clone()),
                ];
                let noise_seed = a.snr.map(|_| derive_seed(spec.seed, 1));
                if let (Some(snr), Some(ns)) = (a.snr, noise_seed) {
                    let noisy = simulate_measurement(&pair.local_field, &pair.mask, snr, ns)?;
                    files.push((out.join(format!("{id}_noisy.vol")), noisy));
                }
                for (p, v) in &files {
                    write_volume(v, p).map_err(|e| prefixed(p, e.into()))?;
                }
                let mut paths: Vec<PathBuf> = files.into_iter().map(|(p, _)| p).collect();
                let prov = Provenance {
                    index: i,
                    spec,
                    files: paths
                        .iter()
                        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
                        .collect(),
                    snr: a.snr,
                    noise_seed,
                    resimulation_max_abs_err: err,
                };
                let side = out.join(format!("{id}.json"));
                write_atomic(&side, &serde_json::to_vec_pretty(&prov)?)?;
                paths.push(side);
                Ok(paths)
            })
            .collect()
    });
    for r in written {
        for p in r? {
            rec.output(&p);
        }
    }
    Ok(a.out.join("manifest.json"))
}

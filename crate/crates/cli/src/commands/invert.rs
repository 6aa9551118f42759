use std::path::PathBuf;

use serde::Serialize;

use qsm_core::dipole::build_dipole_kernel;
use qsm_core::inversion::{
    invert_cosmos, invert_medi_like, invert_tkd, invert_tv_admm, CosmosConfig, MediConfig, OrientationSet,
    OrientedField, SolveLog, TkdConfig, TvAdmmConfig,
};
use qsm_core::{Mask, Unit, Volume};
use qsm_nn::checkpoint::load_checkpoint;
use qsm_nn::{infer, Net, NetConfig};

use super::{load_mask, load_volume, manifest_beside, resolve_b0, save_volume, Context};
use crate::args::{InvertArgs, Method};
use crate::error::{CliError, CliResult};
use crate::manifest::{beside, write_atomic, Recorder};

#[derive(Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
enum Resolved {
    Tkd { b0: [f64; 3], config: TkdConfig },
    Tv { b0: [f64; 3], config: TvAdmmConfig },
    Medi { b0: [f64; 3], edges: String, config: MediConfig },
    Cosmos { b0: Vec<[f64; 3]>, config: CosmosConfig },
    Nn { checkpoint: String, net: NetConfig, step: u64 },
}

#[derive(Serialize)]
struct CosmosLog {
    method: &'static str,
    n_orientations: usize,
    ill_conditioned_bins: usize,
    min_sum_sq: f64,
    well_posed: bool,
}

#[derive(Serialize)]
struct DirectLog {
    method: &'static str,
    iterations: usize,
}

/// Rejects flags that belong to other methods.
fn check_flags(a: &InvertArgs) -> CliResult<()> {
    let used = |name: &str, set: bool, allowed: &[Method]| -> CliResult<()> {
        if set && !allowed.contains(&a.method) {
            return Err(CliError::usage(format!("--{name} does not apply to --method {:?}", a.method).to_lowercase()));
        }
        Ok(())
    };
    used("threshold", a.threshold.is_some(), &[Method::Tkd])?;
    used("alpha1", a.alpha1.is_some(), &[Method::Tv])?;
    for (n, s) in [
        ("mu1", a.mu1.is_some()),
        ("mu2", a.mu2.is_some()),
        ("max-iters", a.max_iters.is_some()),
        ("tol", a.tol.is_some()),
    ] {
        used(n, s, &[Method::Tv, Method::Medi])?;
    }
    for (n, s) in [
        ("lambda", a.lambda.is_some()),
        ("phase-per-ppm", a.phase_per_ppm.is_some()),
        ("edge-percentile", a.edge_percentile.is_some()),
        ("edges", a.edges.is_some()),
    ] {
        used(n, s, &[Method::Medi])?;
    }
    used("eps", a.eps.is_some(), &[Method::Cosmos])?;
    used("checkpoint", a.checkpoint.is_some(), &[Method::Nn])?;
    if a.method != Method::Cosmos && (a.field.len() != 1 || a.b0.len() > 1) {
        return Err(CliError::usage("only --method cosmos takes several --field / --b0 values"));
    }
    if a.method == Method::Cosmos && !a.b0.is_empty() && a.b0.len() != a.field.len() {
        return Err(CliError::usage(format!("{} --b0 values for {} --field values", a.b0.len(), a.field.len())));
    }
    Ok(())
}

pub fn run(_ctx: &Context, a: &InvertArgs, rec: &mut Recorder) -> CliResult<PathBuf> {
    check_flags(a)?;
    let mask = load_mask(&a.mask, rec)?;
    let log_path = a.solve_log.clone().unwrap_or_else(|| beside(&a.out, ".solve.json"));
    let (chi, log) = match a.method {
        Method::Cosmos => cosmos(a, &mask, rec)?,
        _ => {
            let field = load_volume(&a.field[0], rec)?;
            single(a, field, &mask, rec)?
        }
    };
    rec.phase("write");
    let chi = chi.masked(&mask)?;
    save_volume(&chi, &a.out, rec)?;
    write_atomic(&log_path, &serde_json::to_vec_pretty(&log)?)?;
    rec.output(&log_path);
    Ok(manifest_beside(&a.out))
}

fn single(a: &InvertArgs, field: Volume, mask: &Mask, rec: &mut Recorder) -> CliResult<(Volume, serde_json::Value)> {
    if field.unit() != Unit::Ppm {
        return Err(CliError::invalid(format!("field unit is {}, expected ppm", field.unit())));
    }
    let b0 = resolve_b0(a.b0.first().copied(), &field)?;
    let kernel = || build_dipole_kernel(field.dims(), field.voxel_size(), b0);
    match a.method {
        Method::Tkd => {
            let config = TkdConfig { threshold: a.threshold.unwrap_or(TkdConfig::default().threshold) };
            rec.config(&Resolved::Tkd { b0: b0.as_array(), config })?;
            rec.phase("solve");
            let chi = invert_tkd(&field, &kernel()?, &config, mask)?;
            Ok((chi, serde_json::to_value(DirectLog { method: "tkd", iterations: 0 })?))
        }
        Method::Tv => {
            let d = TvAdmmConfig::default();
            let config = TvAdmmConfig {
                alpha1: a.alpha1.unwrap_or(d.alpha1),
                mu1: a.mu1.unwrap_or(d.mu1),
                mu2: a.mu2.unwrap_or(d.mu2),
                max_iters: a.max_iters.unwrap_or(d.max_iters),
                tol: a.tol.unwrap_or(d.tol),
            };
            rec.config(&Resolved::Tv { b0: b0.as_array(), config })?;
            rec.phase("solve");
            let out = invert_tv_admm(&field, &kernel()?, mask.as_volume(), &config)?;
            record_log(rec, &out.log)?;
            Ok((out.chi, serde_json::to_value(&out.log)?))
        }
        Method::Medi => {
            let edges_path = a.edges.as_ref().ok_or_else(|| CliError::usage("--method medi needs --edges"))?;
            let edges = load_volume(edges_path, rec)?;
            let d = MediConfig::default();
            let config = MediConfig {
                lambda: a.lambda.unwrap_or(d.lambda),
                phase_per_ppm: a.phase_per_ppm.unwrap_or(d.phase_per_ppm),
                edge_percentile: a.edge_percentile.unwrap_or(d.edge_percentile),
                mu1: a.mu1.unwrap_or(d.mu1),
                mu2: a.mu2.unwrap_or(d.mu2),
                max_iters: a.max_iters.unwrap_or(d.max_iters),
                tol: a.tol.unwrap_or(d.tol),
            };
            rec.config(&Resolved::Medi { b0: b0.as_array(), edges: edges_path.display().to_string(), config })?;
            rec.phase("solve");
            let out = invert_medi_like(&field, &kernel()?, &edges, mask, &config)?;
            record_log(rec, &out.log)?;
            Ok((out.chi, serde_json::to_value(&out.log)?))
        }
        Method::Nn => {
            let path = a.checkpoint.as_ref().ok_or_else(|| CliError::usage("--method nn needs --checkpoint"))?;
            if !path.is_file() {
                return Err(CliError::file(path, "no such file"));
            }
            rec.input(path)?;
            let ck = load_checkpoint(path)?;
            let step = ck.manifest.step;
            let net = Net::with_params(ck.manifest.net.clone(), ck.store)?;
            rec.config(&Resolved::Nn { checkpoint: path.display().to_string(), net: net.config.clone(), step })?;
            rec.phase("solve");
            let chi = infer(&net, &field, mask)?;
            Ok((chi, serde_json::to_value(DirectLog { method: "nn", iterations: 0 })?))
        }
        Method::Cosmos => unreachable!("handled by cosmos()"),
    }
}

fn record_log(rec: &mut Recorder, log: &SolveLog) -> CliResult<()> {
    rec.result("iterations", log.iterations)?;
    rec.result("converged", log.converged)?;
    rec.result("final_objective", log.objective.last())
}

fn cosmos(a: &InvertArgs, mask: &Mask, rec: &mut Recorder) -> CliResult<(Volume, serde_json::Value)> {
    let mut set = OrientationSet::default();
    for (i, path) in a.field.iter().enumerate() {
        let field = load_volume(path, rec)?;
        let b0 = resolve_b0(a.b0.get(i).copied(), &field)?;
        set.entries.push(OrientedField { local_field: field, b0, mask: mask.clone() });
    }
    let config = CosmosConfig { eps: a.eps.unwrap_or(CosmosConfig::default().eps) };
    rec.config(&Resolved::Cosmos { b0: set.entries.iter().map(|e| e.b0.as_array()).collect(), config })?;
    rec.phase("solve");
    let out = invert_cosmos(&set, &config)?;
    let log = CosmosLog {
        method: "cosmos",
        n_orientations: out.n_orientations,
        ill_conditioned_bins: out.ill_conditioned_bins,
        min_sum_sq: out.min_sum_sq,
        well_posed: out.well_posed(),
    };
    rec.result("well_posed", log.well_posed)?;
    Ok((out.chi, serde_json::to_value(&log)?))
}

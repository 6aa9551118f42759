use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use qsm_core::io::read_volume;
use qsm_core::metrics::{
    format_table, hfen_percent_with, rmse_percent, ssim_with, HfenConfig, MetricSummary, MetricsReport, SsimConfig,
};
use qsm_core::{Mask, Volume};

use super::{load_mask, load_volume, manifest_beside, phantom_ids, prefixed, Context};
use crate::args::EvalArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::{sha256_file, write_atomic, Recorder};

#[derive(Serialize)]
struct EvalConfig {
    hfen: HfenConfig,
    ssim: SsimConfig,
}

#[derive(Serialize)]
struct ItemReport {
    id: String,
    report: MetricsReport,
}

#[derive(Serialize)]
struct BatchReport {
    rows: Vec<MetricSummary>,
    items: BTreeMap<String, Vec<ItemReport>>,
    table: String,
}

fn score(pred: &Volume, reference: &Volume, mask: &Mask, cfg: &EvalConfig) -> CliResult<MetricsReport> {
    Ok(MetricsReport {
        rmse_percent: rmse_percent(pred, reference, mask)?,
        hfen_percent: hfen_percent_with(pred, reference, mask, &cfg.hfen)?,
        ssim: ssim_with(pred, reference, mask, &cfg.ssim)?,
        mask_voxels: mask.count(),
        hfen: cfg.hfen,
        ssim_window: cfg.ssim,
    })
}

pub fn run(ctx: &Context, a: &EvalArgs, rec: &mut Recorder) -> CliResult<PathBuf> {
    let cfg = EvalConfig {
        hfen: HfenConfig::default(),
        ssim: SsimConfig { symmetric_range: a.symmetric_range, ..SsimConfig::default() },
    };
    rec.config(&cfg)?;
    rec.phase("evaluate");
    let body = match (&a.pred, &a.ref_dir) {
        (Some(pred), None) => {
            let reference = a.reference.as_ref().ok_or_else(|| CliError::usage("--pred needs --ref"))?;
            let mask = a.mask.as_ref().ok_or_else(|| CliError::usage("--pred needs --mask"))?;
            let p = load_volume(pred, rec)?;
            let r = load_volume(reference, rec)?;
            let m = load_mask(mask, rec)?;
            let report = score(&p, &r, &m, &cfg)?;
            rec.result("rmse_percent", report.rmse_percent)?;
            serde_json::to_vec_pretty(&report)?
        }
        (None, Some(ref_dir)) => {
            if a.pred_dir.is_empty() {
                return Err(CliError::usage("batch eval needs at least one --pred-dir label=dir"));
            }
            let batch = batch(ctx, a, ref_dir, &cfg, rec)?;
            print_stdout(&batch.table);
            rec.result("rows", &batch.rows)?;
            serde_json::to_vec_pretty(&batch)?
        }
        _ => return Err(CliError::usage("give either --pred/--ref/--mask or --ref-dir with --pred-dir")),
    };
    match &a.out {
        Some(out) => {
            write_atomic(out, &body)?;
            rec.output(out);
            Ok(manifest_beside(out))
        }
        None => {
            if a.pred.is_some() {
                print_stdout(&String::from_utf8_lossy(&body));
            }
            Ok(PathBuf::from("qsmtk-eval.manifest.json"))
        }
    }
}

/// Stdout write that tolerates a closed pipe.
fn print_stdout(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn batch(
    ctx: &Context,
    a: &EvalArgs,
    ref_dir: &std::path::Path,
    cfg: &EvalConfig,
    rec: &mut Recorder,
) -> CliResult<BatchReport> {
    let ids = phantom_ids(ref_dir)?;
    let mut jobs = Vec::new();
    for (label, dir) in &a.pred_dir {
        for id in &ids {
            jobs.push((label.clone(), id.clone(), dir.join(format!("{id}.vol"))));
        }
    }
    for (_, _, p) in &jobs {
        if !p.is_file() {
            return Err(CliError::file(p, "no such file"));
        }
    }
    for id in &ids {
        rec.input(&ref_dir.join(format!("{id}_chi.vol")))?;
        rec.input(&ref_dir.join(format!("{id}_mask.vol")))?;
    }
    let scored: Vec<CliResult<(String, ItemReport, String)>> = ctx.install(|| {
        jobs.par_iter()
            .map(|(label, id, path)| {
                let read = |p: PathBuf| read_volume(&p).map_err(|e| prefixed(&p, e.into()));
                let pred = read(path.clone())?;
                let reference = read(ref_dir.join(format!("{id}_chi.vol")))?;
                let mask = Mask::brain(read(ref_dir.join(format!("{id}_mask.vol")))?)?;
                let report = score(&pred, &reference, &mask, cfg)?;
                Ok((label.clone(), ItemReport { id: id.clone(), report }, sha256_file(path)?))
            })
            .collect()
    });
    let mut items: BTreeMap<String, Vec<ItemReport>> = BTreeMap::new();
    let mut order = Vec::new();
    for ((_, _, path), r) in jobs.iter().zip(scored) {
        let (label, item, hash) = r?;
        rec.hashed_input(path, hash);
        if !items.contains_key(&label) {
            order.push(label.clone());
        }
        items.entry(label).or_default().push(item);
    }
    let rows: Vec<MetricSummary> = order
        .iter()
        .map(|l| MetricSummary::from_reports(l, &items[l].iter().map(|i| i.report.clone()).collect::<Vec<_>>()))
        .collect();
    let table = format_table(&rows);
    Ok(BatchReport { rows, items, table })
}

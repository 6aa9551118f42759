use std::path::PathBuf;

use serde::Serialize;

use qsm_core::dipole::simulate_measurement;
use qsm_core::phantom::derive_seed;
use qsm_nn::checkpoint::load_checkpoint;
use qsm_nn::train::TrainSample;
use qsm_nn::{NetConfig, RmsPropConfig, TrainConfig, Trainer};

use super::{load_mask, load_volume, manifest_beside, phantom_ids, Context};
use crate::args::TrainArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Serialize)]
struct Resolved<'a> {
    data: String,
    samples: usize,
    snr: Option<f64>,
    resumed_from: Option<String>,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    steps: u64,
    mean_loss: f64,
}

pub fn run(ctx: &Context, a: &TrainArgs, rec: &mut Recorder) -> CliResult<PathBuf> {
    if let Some(s) = a.snr {
        if !(s > 0.0) {
            return Err(CliError::usage("--snr must be > 0"));
        }
    }
    rec.phase("load");
    let ids = phantom_ids(&a.data)?;
    let mut samples = Vec::with_capacity(ids.len());
    let mut dims = None;
    for (i, id) in ids.iter().enumerate() {
        let chi = load_volume(&a.data.join(format!("{id}_chi.vol")), rec)?;
        let field = load_volume(&a.data.join(format!("{id}_field.vol")), rec)?;
        let mask = load_mask(&a.data.join(format!("{id}_mask.vol")), rec)?;
        if *dims.get_or_insert(chi.dims()) != chi.dims() {
            return Err(CliError::invalid(format!(
                "{id}: dims {:?} differ from {:?}",
                chi.dims(),
                dims.unwrap_or_default()
            )));
        }
        let input = match a.snr {
            Some(snr) => simulate_measurement(&field, &mask, snr, derive_seed(ctx.seed, i as u64))?,
            None => field.masked(&mask)?,
        };
        samples.push(TrainSample::new(&input, &mask, &chi)?);
    }
    let dims = dims.unwrap_or_default();

    let mut trainer = match &a.resume {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::file(path, "no such file"));
            }
            rec.input(path)?;
            let mut t = Trainer::from_checkpoint(load_checkpoint(path)?)?;
            if t.config.net.input_shape != dims {
                return Err(CliError::invalid(format!(
                    "checkpoint input shape {:?} differs from data {dims:?}",
                    t.config.net.input_shape
                )));
            }
            t.config.epochs = a.epochs;
            t
        }
        None => {
            let cfg = TrainConfig {
                net: NetConfig {
                    base_channels: a.base_channels,
                    input_shape: dims,
                    field_scale: a.field_scale,
                    ..NetConfig::default()
                },
                optimizer: RmsPropConfig {
                    lr0: a.lr,
                    gamma: a.lr_gamma,
                    decay_steps: a.lr_decay_steps,
                    ..RmsPropConfig::default()
                },
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: ctx.seed,
                checkpoint_every: a.checkpoint_every,
            };
            Trainer::new(cfg)?
        }
    };
    rec.config(&Resolved {
        data: a.data.display().to_string(),
        samples: samples.len(),
        snr: a.snr,
        resumed_from: a.resume.as_ref().map(|p| p.display().to_string()),
        train: &trainer.config,
    })?;

    rec.phase("train");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    let per_epoch = samples.len().div_ceil(trainer.config.batch_size);
    let mut epoch_losses = Vec::new();
    let mut current = None;
    trainer.run(&samples, Some(&a.out), |r| {
        if current != Some(r.epoch) {
            current = Some(r.epoch);
            epoch_losses.clear();
        }
        epoch_losses.push(r.loss);
        if epoch_losses.len() == per_epoch {
            let line = EpochLine {
                epoch: r.epoch + 1,
                steps: r.step,
                mean_loss: epoch_losses.iter().sum::<f64>() / per_epoch as f64,
            };
            eprintln!("{}", serde_json::to_string(&line).expect("epoch line"));
        }
    })?;
    rec.output(&a.out);
    rec.result("steps", trainer.step_count())?;
    rec.result("final_loss", trainer.progress.losses.last())?;
    Ok(manifest_beside(&a.out))
}

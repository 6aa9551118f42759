//! Deterministic, resumable masked-L1 training.
//!
//! Initialization draws from `seed`; the sample order of epoch `e` is a
//! shuffle drawn from stream `e` of a generator seeded with `seed`, so a run
//! resumed from any checkpoint replays the same batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use qsm_core::dipole::simulate_measurement;
use qsm_core::phantom::{derive_seed, PhantomPair};
use qsm_core::{Mask, Volume};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{NnError, Result};
use crate::graph::Graph;
use crate::net::{Net, NetConfig};
use crate::optim::{rmsprop_step, RmsPropConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub optimizer: RmsPropConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Extra checkpoint every this many steps; 0 checkpoints at epoch ends only.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            optimizer: RmsPropConfig::default(),
            epochs: 1,
            batch_size: 2,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Position in the run; `losses` holds one entry per completed step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epoch: usize,
    pub next_batch: usize,
    pub losses: Vec<f64>,
}

/// One training example as network-ready tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: Tensor,
    pub target: Tensor,
    pub mask: Tensor,
}

impl TrainSample {
    pub fn new(field: &Volume, mask: &Mask, chi: &Volume) -> Result<Self> {
        let m = Tensor::from_channels(&[mask.as_volume()])?;
        let target = Tensor::from_channels(&[&chi.masked(mask)?])?;
        Ok(Self { input: Tensor::from_field_mask(field, mask)?, target, mask: m })
    }
}

/// Training samples from phantom pairs. With `snr`, pair `i` gets input
/// noise seeded by `derive_seed(seed, i)`.
pub fn samples_from_pairs(pairs: &[PhantomPair], snr: Option<f64>, seed: u64) -> Result<Vec<TrainSample>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let field = match snr {
                Some(s) => simulate_measurement(&p.local_field, &p.mask, s, derive_seed(seed, i as u64))?,
                None => p.local_field.masked(&p.mask)?,
            };
            TrainSample::new(&field, &p.mask, &p.chi_true)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Net,
    pub progress: TrainProgress,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Net::new(config.net.clone(), config.seed)?;
        Ok(Self { config, net, progress: TrainProgress::default() })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config =
            ckpt.manifest.train.ok_or_else(|| NnError::Checkpoint("checkpoint has no training state".into()))?;
        config.validate()?;
        let net = Net::with_params(config.net.clone(), ckpt.store)?;
        Ok(Self { config, net, progress: ckpt.manifest.progress })
    }

    pub fn step_count(&self) -> u64 {
        self.net.params.step
    }

    /// Sample order for `epoch`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Batch loss and per-parameter gradients.
    pub fn loss_and_grads(&self, batch: &[&TrainSample]) -> Result<(f64, Vec<Tensor>)> {
        let stack =
            |f: fn(&TrainSample) -> &Tensor| Tensor::stack(&batch.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
        let mut g = Graph::new();
        let input = g.input(stack(|s| &s.input)?);
        let target = g.input(stack(|s| &s.target)?);
        let mask = g.input(stack(|s| &s.mask)?);
        let out = self.net.forward(&mut g, input)?;
        let loss = g.l1_loss(out, target, mask)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(NnError::NonFiniteLoss(self.step_count()));
        }
        let back = g.backward(loss)?;
        let mut grads = self.net.params.zero_grads();
        for (i, t) in back.params {
            grads[i].add_assign(&t);
        }
        Ok((value, grads))
    }

    pub fn loss(&self, batch: &[&TrainSample]) -> Result<f64> {
        let stack =
            |f: fn(&TrainSample) -> &Tensor| Tensor::stack(&batch.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
        let out = self.net.predict(stack(|s| &s.input)?)?;
        let mut g = Graph::new();
        let p = g.input(out);
        let t = g.input(stack(|s| &s.target)?);
        let m = g.input(stack(|s| &s.mask)?);
        let l = g.l1_loss(p, t, m)?;
        Ok(g.value(l).data()[0])
    }

    /// One optimizer step on `batch`; returns the pre-update loss and the learning rate.
    pub fn step(&mut self, batch: &[&TrainSample]) -> Result<(f64, f64)> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        let lr = rmsprop_step(&mut self.net.params, &grads, &self.config.optimizer)?;
        Ok((loss, lr))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config.net, Some(&self.config), &self.progress, &self.net.params)
    }

    /// Trains until `config.epochs` epochs are complete, continuing from the
    /// current progress. Checkpoints go to `checkpoint` at every epoch end,
    /// every `checkpoint_every` steps and on completion; a failing step
    /// leaves the last checkpoint in place.
    pub fn run(
        &mut self,
        data: &[TrainSample],
        checkpoint: Option<&Path>,
        mut observe: impl FnMut(&StepReport),
    ) -> Result<()> {
        if data.is_empty() && self.config.epochs > 0 {
            return Err(NnError::Config("no training samples".into()));
        }
        let bs = self.config.batch_size;
        let n_batches = data.len().div_ceil(bs);
        while self.progress.epoch < self.config.epochs {
            let order = self.epoch_order(self.progress.epoch, data.len());
            while self.progress.next_batch < n_batches {
                let b = self.progress.next_batch;
                let batch: Vec<&TrainSample> =
                    order[b * bs..((b + 1) * bs).min(data.len())].iter().map(|&i| &data[i]).collect();
                let (loss, lr) = self.step(&batch)?;
                self.progress.losses.push(loss);
                self.progress.next_batch += 1;
                observe(&StepReport { step: self.step_count(), epoch: self.progress.epoch, loss, lr });
                if let Some(path) = checkpoint {
                    let every = self.config.checkpoint_every;
                    if every > 0 && self.step_count().is_multiple_of(every) && self.progress.next_batch < n_batches {
                        self.save(path)?;
                    }
                }
            }
            self.progress.epoch += 1;
            self.progress.next_batch = 0;
            if let Some(path) = checkpoint {
                self.save(path)?;
            }
        }
        if let Some(path) = checkpoint {
            if !path.exists() {
                self.save(path)?;
            }
        }
        Ok(())
    }
}

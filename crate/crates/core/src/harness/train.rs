//! Training loop and whole-volume evaluation.

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::data::{gen_synthetic_with, sample_patch, stack_patches, volume_tensor, SyntheticSpec, VolumeRecord};
use super::io::load_dir;
use super::optim::{adamw_step, AdamState};
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics::{argmax_masks, evaluate, Metrics};
use crate::network::HcmaUNet;
use crate::tensor::{no_grad, Element, SeedStream};
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Counters that, with the parameters and the run config, fully determine the next step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState {
    pub step: u64,
    /// Completed passes over the training records.
    pub epoch: u64,
    pub adam: AdamState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub fr: f64,
    pub time_ms: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} lr={:.3e} loss={:.5} ce={:.5} dice={:.5} fr={:.5} time_ms={:.1}",
            self.step, self.epoch, self.lr, self.loss, self.ce, self.dice, self.fr, self.time_ms
        )
    }
}

/// The training records named by `cfg.data`: a directory of saved volumes
/// or synthetic volumes drawn from the run seed.
pub fn load_records(cfg: &RunConfig) -> Result<Vec<VolumeRecord>> {
    match &cfg.data.dir {
        Some(dir) => load_dir(dir),
        None => Ok(gen_synthetic_with(&SyntheticSpec {
            count: cfg.data.synthetic_count,
            extent: [cfg.data.extent; 3],
            difficulty: cfg.data.difficulty,
            seed: cfg.seed,
        })),
    }
}

pub struct Trainer<T: Element> {
    pub model: HcmaUNet<T>,
    pub state: TrainState,
    pub config: RunConfig,
    pub records: Vec<VolumeRecord>,
}

impl<T: Element> Trainer<T> {
    pub fn new(config: RunConfig, records: Vec<VolumeRecord>) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::config("dtype", format!("run asks for {}, trainer built for {}", config.dtype, T::DTYPE)));
        }
        if records.is_empty() {
            return Err(Error::config("data", "no training records"));
        }
        let model = HcmaUNet::build(&config.model, config.seed)?;
        let state = TrainState {
            adam: AdamState::new(&model.parameters()),
            ..Default::default()
        };
        Ok(Trainer {
            model,
            state,
            config,
            records,
        })
    }

    /// Continues a run from a checkpoint; `records` must be the same set the run started with.
    pub fn resume(path: &Path, records: Vec<VolumeRecord>) -> Result<Self> {
        let (model, state, config) = load_checkpoint::<T>(path)?;
        if records.is_empty() {
            return Err(Error::config("data", "no training records"));
        }
        Ok(Trainer {
            model,
            state,
            config,
            records,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.state, &self.config)
    }

    /// One optimizer step on a freshly sampled batch of patches.
    pub fn step(&mut self) -> Result<StepLog> {
        let start = Instant::now();
        let t = &self.config.train;
        let n = self.records.len() as u64;
        let b = t.batch_size as u64;
        let mut rng = SeedStream::derived(self.config.seed, self.state.step);
        let patches = (0..b)
            .map(|i| {
                let r = &self.records[((self.state.step * b + i) % n) as usize];
                sample_patch(r, t.patch, t.fg_bias, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (x, labels) = stack_patches::<T>(&patches)?;
        let out = self.model.forward(&x)?;
        let losses = total_loss(&out.logits, &out.features, &labels, &self.config.loss)?;
        let value = losses.total.item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged { step: self.state.step });
        }
        losses.total.backward()?;
        let params = self.model.parameters();
        let grads: Vec<Option<Vec<T>>> = params.iter().map(|p| p.grad()).collect();
        let next = adamw_step(&params, &grads, &mut self.state.adam, &t.optimizer)?;
        self.model.set_parameters(next)?;
        self.state.step += 1;
        self.state.epoch = self.state.step * b / n;
        Ok(StepLog {
            step: self.state.step,
            epoch: self.state.epoch,
            lr: t.optimizer.lr,
            loss: value,
            ce: losses.ce.item()?.as_f64(),
            dice: losses.dice.item()?.as_f64(),
            fr: losses.fr.item()?.as_f64(),
            time_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn checkpoint_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("step-{:06}.ckpt", self.state.step))
    }

    /// Steps until `train.steps` is reached, reporting each step to `on_step`.
    /// Checkpoints go to `train.checkpoint_dir` when it is set.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        let every = self.config.train.checkpoint_every;
        while self.state.step < self.config.train.steps {
            let log = self.step()?;
            on_step(&log);
            if let Some(dir) = &self.config.train.checkpoint_dir {
                let done = self.state.step == self.config.train.steps;
                if done || (every > 0 && self.state.step.is_multiple_of(every)) {
                    self.save_checkpoint(&self.checkpoint_path(dir))?;
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, records: &[VolumeRecord]) -> Result<EvalReport> {
        evaluate_model(&self.model, records)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub id: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub cases: Vec<CaseResult>,
    pub mean: Metrics,
}

/// Whole-volume inference on each record, thresholded by argmax.
pub fn evaluate_model<T: Element>(model: &HcmaUNet<T>, records: &[VolumeRecord]) -> Result<EvalReport> {
    let cases = records
        .iter()
        .map(|r| {
            let x = volume_tensor::<T>(r)?;
            let logits = no_grad(|| model.forward(&x))?.logits;
            let pred = argmax_masks(&logits)?.remove(0);
            Ok(CaseResult {
                id: r.id.clone(),
                metrics: evaluate(&pred, &r.label)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<Metrics> = cases.iter().map(|c| c.metrics).collect();
    let mean = Metrics::mean(&all).ok_or_else(|| Error::InvalidArgument("no records to evaluate".into()))?;
    Ok(EvalReport { cases, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::tensor::DType;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dtype = DType::F64;
        cfg.model = NetworkConfig {
            stage_widths: vec![4, 8],
            mism_stages: vec![2],
            ..NetworkConfig::reference()
        };
        cfg.data.extent = 8;
        cfg.data.synthetic_count = 2;
        cfg.train.patch = [8; 3];
        cfg.train.steps = 3;
        cfg.loss.num_negatives = 8;
        cfg.loss.boundary_dilations = 1;
        cfg.loss.negative_dilations = 1;
        cfg
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny();
        let records = load_records(&cfg).unwrap();
        let mut full = Trainer::<f64>::new(cfg.clone(), records.clone()).unwrap();
        full.run(|_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut first = Trainer::<f64>::new(cfg, records.clone()).unwrap();
        first.step().unwrap();
        first.save_checkpoint(&path).unwrap();
        let mut resumed = Trainer::<f64>::resume(&path, records).unwrap();
        assert_eq!(resumed.state, first.state);
        resumed.run(|_| {}).unwrap();

        assert_eq!(resumed.state, full.state);
        let bits = |m: &HcmaUNet<f64>| m.parameters().iter().flat_map(|p| p.to_vec()).map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&resumed.model), bits(&full.model));
    }

    #[test]
    fn checkpoint_rejects_other_dtype_and_version() {
        let cfg = tiny();
        let records = load_records(&cfg).unwrap();
        let t = Trainer::<f64>::new(cfg, records.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        t.save_checkpoint(&path).unwrap();
        assert!(matches!(Trainer::<f32>::resume(&path, records.clone()), Err(Error::Format { .. })));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Trainer::<f64>::resume(&path, records),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn step_log_has_every_field() {
        let cfg = tiny();
        let records = load_records(&cfg).unwrap();
        let mut t = Trainer::<f64>::new(cfg, records.clone()).unwrap();
        let line = t.step().unwrap().to_string();
        for key in ["step=1 ", "epoch=1 ", "lr=", "loss=", "ce=", "dice=", "fr=", "time_ms="] {
            assert!(line.contains(key), "{line}");
        }
        let report = t.evaluate(&records).unwrap();
        assert_eq!(report.cases.len(), 2);
    }
}

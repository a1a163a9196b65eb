//! Optimization: loss, Adam with a cosine schedule, and the epoch loop with
//! resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{add_awgn, sample_patch_batch, step_seed, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Mean of `|y - yhat|^p` as a plain value (no tape).
pub fn loss_lp(y: &Tensor, yhat: &Tensor, p: u8) -> Result<f32> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(y.clone()), tape.constant(yhat.clone()));
    let l = tape.loss_lp(a, b, p)?;
    Ok(tape.value(l).item())
}

/// Single-cycle cosine annealing from `lr0` at step 0 to zero at `total`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m1: IndexMap<String, Tensor>,
    pub m2: IndexMap<String, Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || -> IndexMap<String, Tensor> {
            params.iter().map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape()))).collect()
        };
        OptimState {
            m1: zeros(),
            m2: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn moments(&self, name: &str) -> Result<(&Tensor, &Tensor)> {
        match (self.m1.get(name), self.m2.get(name)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Contract(format!("no optimizer state for `{name}`"))),
        }
    }

    pub(crate) fn write_state(&self, kv: &mut BTreeMap<String, String>) {
        kv.insert("adam.t".into(), self.t.to_string());
        kv.insert("adam.beta1".into(), self.beta1.to_string());
        kv.insert("adam.beta2".into(), self.beta2.to_string());
        kv.insert("adam.eps".into(), self.eps.to_string());
    }

    pub(crate) fn from_parts(
        m1: IndexMap<String, Tensor>,
        m2: IndexMap<String, Tensor>,
        kv: &mut BTreeMap<String, String>,
    ) -> Result<Self> {
        fn take<T: std::str::FromStr>(kv: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = kv
                .remove(key)
                .ok_or_else(|| Error::Format(format!("optimizer state lacks `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Format(format!("optimizer state `{key}` has invalid value `{raw}`")))
        }
        Ok(OptimState {
            m1,
            m2,
            t: take(kv, "adam.t")?,
            beta1: take(kv, "adam.beta1")?,
            beta2: take(kv, "adam.beta2")?,
            eps: take(kv, "adam.eps")?,
        })
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
/// Gradients are left untouched.
pub fn adam_step(params: &mut ParamStore, opt: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != opt.m1.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} tensors, model has {}",
            opt.m1.len(),
            params.len()
        )));
    }
    opt.t += 1;
    let t = opt.t as i32;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let (m, v) = match (opt.m1.get_mut(name), opt.m2.get_mut(name)) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::Contract(format!("missing optimizer state for `{name}`"))),
        };
        if m.shape() != p.value.shape() {
            return Err(Error::Contract(format!("moment shape mismatch for `{name}`")));
        }
        let g = p.grad.data();
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::Contract(format!("non-finite gradient for `{name}`")));
        }
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for (_, p) in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Noise drawn once per image and reused.
    Fixed,
    /// Fresh noise for every patch.
    #[default]
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr0: f64,
    pub loss_p: u8,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    /// Noise std in 8-bit units.
    pub sigma: f32,
    pub noise: NoiseMode,
    /// Clamp noisy inputs to `[0, 1]`.
    pub clamp_noisy: bool,
    pub clip_grad_norm: Option<f64>,
    pub keep_checkpoints: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 30,
            steps_per_epoch: 100,
            lr0: 1e-4,
            loss_p: 2,
            batch: 8,
            patch: 64,
            seed: 0,
            sigma: 30.0,
            noise: NoiseMode::Fresh,
            clamp_noisy: false,
            clip_grad_norm: None,
            keep_checkpoints: 3,
        }
    }
}

impl TrainSchedule {
    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss_p != 1 && self.loss_p != 2 {
            return Err(Error::Config(format!("loss_p must be 1 or 2, got {}", self.loss_p)));
        }
        if self.steps_per_epoch == 0 || self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("steps_per_epoch, batch and patch must be positive".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be finite and non-negative, got {}", self.lr0)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.keep_checkpoints == 0 {
            return Err(Error::Config("keep_checkpoints must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every step run by this trainer, in order.
    pub step_losses: Vec<f32>,
}

impl TrainingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,lr,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{:.8e},{:.8e},{:.3}", r.epoch, r.mean_loss, r.lr, r.seconds);
        }
        out
    }
}

/// Where and how often the trainer persists itself.
#[derive(Clone, Debug)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
}

impl CheckpointPolicy {
    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.msan"))
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.msan")
    }

    pub fn report_path(&self) -> PathBuf {
        self.dir.join("report.csv")
    }
}

/// Training state: model, optimizer and progress counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: OptimState,
    pub schedule: TrainSchedule,
    /// Completed optimizer steps.
    pub step: u64,
    pub report: TrainingReport,
    pub best_val_psnr: Option<f64>,
    epoch_loss: f64,
    epoch_seconds: f64,
}

const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;

impl Trainer {
    pub fn new(model: Model, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let opt = OptimState::new(&model.params);
        Ok(Trainer {
            model,
            opt,
            schedule,
            step: 0,
            report: TrainingReport::default(),
            best_val_psnr: None,
            epoch_loss: 0.0,
            epoch_seconds: 0.0,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps()
    }

    pub fn is_complete(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.schedule.steps_per_epoch as u64) as usize
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps(), self.schedule.lr0)
    }

    /// Noisy/clean patch pair for the current step.
    pub fn batch(&self, data: &[ImageSample]) -> Result<(Tensor, Tensor)> {
        let s = &self.schedule;
        let b = sample_patch_batch(data, s.patch, s.batch, step_seed(s.seed, self.step))?;
        let noisy = match s.noise {
            NoiseMode::Fixed => b.noisy,
            NoiseMode::Fresh => add_awgn(&b.clean, s.sigma, step_seed(s.seed ^ NOISE_STREAM, self.step)),
        };
        let noisy = if s.clamp_noisy { noisy.clamp(0.0, 1.0) } else { noisy };
        Ok((noisy, b.clean))
    }

    /// Forward, backward and one Adam update on an explicit pair.
    pub fn step_on(&mut self, noisy: &Tensor, clean: &Tensor) -> Result<f32> {
        let lr = self.lr();
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, true);
        let x = tape.input(noisy.clone());
        let y = self.model.forward(&mut tape, &p, x)?;
        let target = tape.constant(clean.clone());
        let loss = tape.loss_lp(target, y, self.schedule.loss_p)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {}", self.step)));
        }
        let grads = tape.backward(loss)?;
        self.model.params.accumulate(&grads)?;
        if let Some(max) = self.schedule.clip_grad_norm {
            clip_grad_norm(&mut self.model.params, max);
        }
        adam_step(&mut self.model.params, &mut self.opt, lr)?;
        self.model.params.zero_grads();
        self.step += 1;
        self.report.step_losses.push(value);
        Ok(value)
    }

    /// One step on a sampled batch.
    pub fn train_step(&mut self, data: &[ImageSample]) -> Result<f32> {
        let (noisy, clean) = self.batch(data)?;
        self.step_on(&noisy, &clean)
            .map_err(|e| Error::Contract(format!("step {} failed: {e}", self.step)))
    }

    /// Runs until the schedule completes or `max_steps` more steps have run.
    pub fn fit(
        &mut self,
        data: &[ImageSample],
        val: Option<&[ImageSample]>,
        ckpt: Option<&CheckpointPolicy>,
        max_steps: Option<u64>,
    ) -> Result<&TrainingReport> {
        if data.is_empty() {
            return Err(Error::Argument("training dataset is empty".into()));
        }
        let spe = self.schedule.steps_per_epoch as u64;
        let stop = max_steps.map_or(u64::MAX, |m| self.step.saturating_add(m));
        while !self.is_complete() && self.step < stop {
            let started = Instant::now();
            let lr = self.lr();
            let loss = self.train_step(data)?;
            self.epoch_loss += loss as f64;
            self.epoch_seconds += started.elapsed().as_secs_f64();
            if self.step % spe == 0 {
                let epoch = self.epoch();
                let record = EpochRecord {
                    epoch,
                    mean_loss: self.epoch_loss / spe as f64,
                    lr,
                    seconds: self.epoch_seconds,
                };
                log::info!(
                    "epoch {epoch}/{} loss {:.6e} lr {:.3e} ({:.1}s)",
                    self.schedule.epochs,
                    record.mean_loss,
                    lr,
                    record.seconds
                );
                self.report.epochs.push(record);
                self.epoch_loss = 0.0;
                self.epoch_seconds = 0.0;
                self.end_of_epoch(val, ckpt)?;
            }
        }
        Ok(&self.report)
    }

    fn end_of_epoch(&mut self, val: Option<&[ImageSample]>, ckpt: Option<&CheckpointPolicy>) -> Result<()> {
        let mut improved = false;
        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let r = evaluate(&self.model, val)?;
            log::info!("validation PSNR {:.3} dB SSIM {:.4}", r.mean_psnr, r.mean_ssim);
            if self.best_val_psnr.is_none_or(|b| r.mean_psnr > b) {
                self.best_val_psnr = Some(r.mean_psnr);
                improved = true;
            }
        }
        if let Some(policy) = ckpt {
            let epoch = self.epoch();
            let ck = self.checkpoint();
            ck.save(policy.epoch_path(epoch))?;
            if improved {
                ck.save(policy.best_path())?;
            }
            let keep = self.schedule.keep_checkpoints;
            if epoch > keep {
                let old = policy.epoch_path(epoch - keep);
                if old.exists() {
                    std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
                }
            }
            self.write_report(policy.report_path())?;
        }
        Ok(())
    }

    pub fn write_report(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.report.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Full resumable state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.schedule = Some(self.schedule.clone());
        ck.optim = Some(self.opt.clone());
        let kv = &mut ck.state;
        kv.insert("train.step".into(), self.step.to_string());
        kv.insert("train.epoch_loss".into(), self.epoch_loss.to_string());
        kv.insert("train.epoch_seconds".into(), self.epoch_seconds.to_string());
        kv.insert("data.seed".into(), self.schedule.seed.to_string());
        if let Some(b) = self.best_val_psnr {
            kv.insert("train.best_val_psnr".into(), b.to_string());
        }
        kv.insert("report.csv".into(), self.report.to_csv());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let schedule = ck
            .schedule
            .clone()
            .ok_or_else(|| Error::Format("checkpoint carries no training schedule".into()))?;
        let step: u64 = ck.state_value("train.step")?;
        let epoch_loss: f64 = ck.state_value("train.epoch_loss")?;
        let epoch_seconds: f64 = ck.state_value("train.epoch_seconds")?;
        let best_val_psnr = ck.state.get("train.best_val_psnr").map(|_| ck.state_value("train.best_val_psnr")).transpose()?;
        let epochs = ck.state.get("report.csv").map(|s| parse_report(s)).transpose()?.unwrap_or_default();
        let opt = ck.optim.clone().ok_or_else(|| Error::Format("checkpoint carries no optimizer state".into()))?;
        let model = ck.into_model()?;
        schedule.validate()?;
        Ok(Trainer {
            model,
            opt,
            schedule,
            step,
            report: TrainingReport {
                epochs,
                step_losses: Vec::new(),
            },
            best_val_psnr,
            epoch_loss,
            epoch_seconds,
        })
    }
}

fn parse_report(csv: &str) -> Result<Vec<EpochRecord>> {
    let bad = |l: &str| Error::Format(format!("bad report row `{l}`"));
    csv.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(l));
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(l))?,
                mean_loss: f[1].parse().map_err(|_| bad(l))?,
                lr: f[2].parse().map_err(|_| bad(l))?,
                seconds: f[3].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::params::Init;
    use crate::tensor::Shape;
    use rand::SeedableRng;

    #[test]
    fn loss_examples() {
        let y = Tensor::full([1, 1, 2, 2], 0.5);
        assert_eq!(loss_lp(&y, &y, 2).unwrap(), 0.0);
        assert_eq!(loss_lp(&y, &Tensor::zeros([1, 1, 2, 2]), 2).unwrap(), 0.25);
        assert_eq!(loss_lp(&Tensor::zeros([1, 1, 2, 2]), &y, 1).unwrap(), 0.5);
        assert!(matches!(loss_lp(&y, &Tensor::zeros([1, 1, 2, 3]), 1), Err(Error::Shape(_))));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
    }

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        s.register("w", Shape::new(1, 1, 1, 1), vec![1], Init::Zeros, &mut rng).unwrap();
        s.value_mut("w").unwrap().data_mut()[0] = v;
        s
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut opt = OptimState::new(&s);
        s.get_mut("w").unwrap().grad.data_mut()[0] = 3.0;
        adam_step(&mut s, &mut opt, 1e-2).unwrap();
        assert!((s.value("w").unwrap().item() - 0.99).abs() < 1e-7);
        // gradients are not consumed
        assert_eq!(s.get("w").unwrap().grad.item(), 3.0);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = scalar_store(0.7);
        let mut opt = OptimState::new(&s);
        adam_step(&mut s, &mut opt, 1e-2).unwrap();
        assert_eq!(s.value("w").unwrap().item(), 0.7);
    }

    #[test]
    fn missing_state_is_contract_error() {
        let mut s = scalar_store(0.0);
        let mut opt = OptimState::new(&ParamStore::new());
        assert!(matches!(adam_step(&mut s, &mut opt, 1e-3), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let model = Model::build(ModelConfig::with_depths(1, 4, &[1, 1]), 0).unwrap();
        let before = model.params.clone();
        let schedule = TrainSchedule {
            epochs: 0,
            ..TrainSchedule::default()
        };
        let mut t = Trainer::new(model, schedule).unwrap();
        let pair = ImageSample::synthesize(Tensor::full([1, 1, 64, 64], 0.5), 30.0, 0, "a");
        let r = t.fit(&[pair], None, None, None).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn report_csv_round_trips() {
        let r = TrainingReport {
            epochs: vec![EpochRecord {
                epoch: 1,
                mean_loss: 0.125,
                lr: 1e-4,
                seconds: 2.5,
            }],
            step_losses: vec![],
        };
        assert_eq!(parse_report(&r.to_csv()).unwrap(), r.epochs);
    }
}

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::loss::LossStats;
use super::optim::{clip_grad_norm, AdamW};
use crate::audio::{make_batches, mix_utterances_with, AudioBatch, Waveform};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, StepSeeds};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Aggregates since the last log record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Running {
    pub steps: u64,
    pub loss_sum: f64,
    pub correct: u64,
    pub positions: u64,
    pub histogram: Vec<u64>,
}

impl Running {
    fn new(vocab: usize) -> Self {
        Self {
            histogram: vec![0; vocab],
            ..Default::default()
        }
    }

    fn reset(&mut self) {
        *self = Self::new(self.histogram.len());
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.steps.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.positions.max(1) as f64
    }

    /// Fraction of codes seen since the last reset.
    pub fn utilization(&self) -> f64 {
        let used = self.histogram.iter().filter(|&&c| c > 0).count();
        used as f64 / self.histogram.len().max(1) as f64
    }
}

#[derive(Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed updates.
    pub step: u64,
    pub running: Running,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let t = &cfg.train;
        let optimizer = AdamW::new(&model.params, t.betas, t.eps, t.weight_decay);
        let running = Running::new(cfg.quantizer.vocab);
        Ok(Self {
            model,
            optimizer,
            step: 0,
            running,
        })
    }

    /// Seeds used by the update that takes the state from `step` to `step + 1`.
    pub fn seeds_for(&self, step: u64) -> StepSeeds {
        let cfg = &self.model.cfg;
        StepSeeds {
            mask: derive_seed(cfg.masking.seed, Stream::Mask, step),
            noise: derive_seed(cfg.masking.seed, Stream::MaskNoise, step),
            dropout: (cfg.encoder.dropout > 0.0).then(|| derive_seed(cfg.train.seed, Stream::Dropout, step)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    /// Step count after the update.
    pub step: u64,
    pub loss: f64,
    pub masked_acc: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub mixed_items: usize,
}

/// One update at `lr_schedule(step + 1)`.
pub fn train_step(state: &mut TrainState, batch: &AudioBatch) -> Result<StepMetrics> {
    let lr = state.model.cfg.train.schedule().at(state.step + 1)?;
    train_step_with_lr(state, batch, lr)
}

/// One update at a caller-chosen learning rate. On error the state is left
/// untouched.
pub fn train_step_with_lr(state: &mut TrainState, batch: &AudioBatch, lr: f64) -> Result<StepMetrics> {
    let step = state.step;
    let cfg = &state.model.cfg;
    let mixed = mix_utterances_with(batch, &cfg.mix, &mut stream_rng(cfg.mix.seed, Stream::Mix, step))?;
    let (out, mut grads) = state.model.loss_and_grads(&mixed, state.seeds_for(step))?;
    let loss = out.stats.loss;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    let grad_norm = clip_grad_norm(&mut grads, cfg.train.grad_clip_norm);
    state.optimizer.step(&mut state.model.params, &grads, lr);
    state.step += 1;

    let r = &mut state.running;
    r.steps += 1;
    r.loss_sum += loss;
    r.correct += (out.stats.accuracy * out.stats.positions as f64).round() as u64;
    r.positions += out.stats.positions as u64;
    for (acc, c) in r.histogram.iter_mut().zip(&out.histogram) {
        *acc += c;
    }
    Ok(StepMetrics {
        step: state.step,
        loss,
        masked_acc: out.stats.accuracy,
        lr,
        grad_norm,
        mixed_items: mixed.mixed_flags.iter().filter(|&&m| m).count(),
    })
}

/// Masked-prediction loss and accuracy pooled over `batches`, without mixing
/// or dropout; batch `i` uses masks from `(seed, i)`.
pub fn evaluate(model: &Model, batches: &[AudioBatch], seed: u64) -> Result<LossStats> {
    let (mut loss, mut correct, mut n) = (0.0, 0.0, 0usize);
    for (i, b) in batches.iter().enumerate() {
        let seeds = StepSeeds {
            mask: derive_seed(seed, Stream::Mask, i as u64),
            noise: derive_seed(seed, Stream::MaskNoise, i as u64),
            dropout: None,
        };
        let s = model.loss(b, seeds)?.stats;
        loss += s.loss * s.positions as f64;
        correct += s.accuracy * s.positions as f64;
        n += s.positions;
    }
    if n == 0 {
        return Err(Error::NoMaskedPositions);
    }
    Ok(LossStats {
        loss: loss / n as f64,
        accuracy: correct / n as f64,
        positions: n,
    })
}

/// Deterministic batches for any step: epoch `e` is a fresh shuffle and trim
/// keyed by `(train.seed, e)`.
pub struct BatchSource<'a> {
    corpus: &'a [Waveform],
    batch_size: usize,
    target_len: usize,
    seed: u64,
    epoch: Option<(u64, Vec<AudioBatch>)>,
}

impl<'a> BatchSource<'a> {
    pub fn new(corpus: &'a [Waveform], cfg: &RunConfig) -> Result<Self> {
        if corpus.len() < cfg.train.batch_size {
            return Err(Error::InvalidArgument(format!(
                "corpus of {} utterances cannot fill a batch of {}",
                corpus.len(),
                cfg.train.batch_size
            )));
        }
        Ok(Self {
            corpus,
            batch_size: cfg.train.batch_size,
            target_len: cfg.data.target_len,
            seed: cfg.train.seed,
            epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.corpus.len() / self.batch_size) as u64
    }

    /// The batch consumed by the update from `step` to `step + 1`.
    pub fn batch(&mut self, step: u64) -> Result<&AudioBatch> {
        let per = self.batches_per_epoch();
        let epoch = step / per;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let seed = derive_seed(self.seed, Stream::Shuffle, epoch);
            let batches = make_batches(self.corpus, self.batch_size, self.target_len, seed)?;
            self.epoch = Some((epoch, batches));
        }
        let (_, batches) = self.epoch.as_ref().expect("epoch loaded");
        Ok(&batches[(step % per) as usize])
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub masked_acc: f64,
    pub lr: f64,
    pub wall_time: f64,
    pub codebook_utilization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub final_step: u64,
    /// Per-step losses of this invocation, in order.
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    pub config_hash: String,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt-{step:08}.bin"))
}

fn append_line(file: &mut File, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(file, "{line}")?;
    file.flush()?;
    Ok(())
}

/// Runs `train_step` until `train.total_steps`, writing `metrics.jsonl` and
/// `ckpt-XXXXXXXX.bin` files under `out_dir`. With `resume`, continues from
/// that checkpoint, whose config must match `cfg`.
pub fn pretrain(cfg: &RunConfig, corpus: &[Waveform], out_dir: &Path, resume: Option<&Path>) -> Result<PretrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut state = match resume {
        Some(path) => {
            let state = checkpoint::load_state(path)?;
            if state.model.cfg.hash() != cfg.hash() {
                return Err(Error::Checkpoint(format!(
                    "{} was written with config {}, run config is {}",
                    path.display(),
                    state.model.cfg.hash(),
                    cfg.hash()
                )));
            }
            state
        }
        None => TrainState::new(cfg)?,
    };
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    let mut source = BatchSource::new(corpus, cfg)?;
    let t = &cfg.train;
    let start = Instant::now();
    let mut summary = PretrainSummary {
        final_step: state.step,
        losses: Vec::new(),
        accuracies: Vec::new(),
        records: Vec::new(),
        checkpoints: Vec::new(),
        metrics_path: metrics_path.clone(),
        config_hash: cfg.hash(),
    };
    while state.step < t.total_steps {
        let step = state.step;
        let batch = source.batch(step)?;
        let m = match train_step(&mut state, batch) {
            Ok(m) => m,
            Err(e) => {
                let loss = match e {
                    Error::Divergence { loss, .. } => Some(loss),
                    _ => None,
                };
                let record = serde_json::json!({
                    "event": "error",
                    "step": step,
                    "loss": loss.map(|l| l.to_string()),
                    "error": e.to_string(),
                    "wall_time": start.elapsed().as_secs_f64(),
                });
                append_line(&mut metrics, &record)?;
                return Err(e);
            }
        };
        summary.losses.push(m.loss);
        summary.accuracies.push(m.masked_acc);
        if state.step % t.log_every == 0 || state.step == t.total_steps {
            let record = MetricsRecord {
                step: state.step,
                loss: state.running.mean_loss(),
                masked_acc: state.running.accuracy(),
                lr: m.lr,
                wall_time: start.elapsed().as_secs_f64(),
                codebook_utilization: state.running.utilization(),
            };
            append_line(&mut metrics, &record)?;
            summary.records.push(record);
            state.running.reset();
        }
        if t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0 {
            let path = checkpoint_path(out_dir, state.step);
            checkpoint::save_state(&path, &state)?;
            summary.checkpoints.push(path);
        }
    }
    summary.final_step = state.step;
    Ok(summary)
}

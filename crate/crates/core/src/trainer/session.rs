use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, Stage};
use super::dataset::{Dataset, Example};
use super::decode::Generator;
use crate::backbone::{init_params, ModelConfig};
use crate::causal::{vlci_forward, Mode};
use crate::data::{RawImage, TokenizedReport, Vocabulary};
use crate::nn::{clip_grad_norm, cross_entropy, to_f64, AdamW, LrSchedule, ParamStore};
use crate::vlp::{pretrain_losses, pretrain_step, LossRecord, PretrainSample};
use crate::{Error, Result};

/// Where a session's weights come from.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    /// Freshly initialized from the run seed.
    Fresh,
    /// Weights of a checkpoint, new optimizer and step counter.
    Warm(&'a Checkpoint),
    /// Continue the checkpoint's own run: weights, moments, step and rng.
    Resume(&'a Checkpoint),
}

/// One fine-tuning log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllRecord {
    pub step: u64,
    #[serde(rename = "L_NLL")]
    pub l_nll: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepRecord {
    Pretrain(LossRecord),
    Finetune(NllRecord),
}

impl StepRecord {
    /// The optimized objective.
    pub fn total(&self) -> f64 {
        match self {
            StepRecord::Pretrain(r) => r.l_plm + r.l_mim.unwrap_or(0.0),
            StepRecord::Finetune(r) => r.l_nll,
        }
    }
}

/// Per-epoch summary line of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_bleu4: Option<f64>,
}

/// Mean teacher-forced NLL over every target token of the batch.
pub fn finetune_loss(
    p: &ParamStore,
    cfg: &ModelConfig,
    batch: &[(&[RawImage], &TokenizedReport)],
    mode: Mode,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::invalid("empty fine-tuning batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut tokens = 0usize;
    for (images, report) in batch {
        let ids = report.active();
        let logits = vlci_forward(p, cfg, images, &ids[..ids.len() - 1], mode)?;
        let n = ids.len() - 1;
        terms.push((cross_entropy(&logits, &ids[1..])? * n as f64)?);
        tokens += n;
    }
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / tokens as f64)?)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const TRAIN_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;
const ORDER_STREAM: u64 = 1 << 32;

/// Mutable training state of one stage.
#[derive(Debug)]
pub struct Session {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    schedule: LrSchedule,
    n_train: usize,
}

impl Session {
    pub fn new(run: &RunConfig, data: &Dataset, start: Start) -> Result<Self> {
        run.validate()?;
        if data.train.is_empty() {
            return Err(Error::invalid("train split is empty"));
        }
        let built = Vocabulary::build(&data.train_reports(), run.min_count)?;
        let mut optimizer = AdamW::new(run.optimizer_config());
        let (model, vocab, params, rng) = match start {
            Start::Fresh => {
                let model = run.model_config(built.len())?;
                let params = init_params(&model, run.seed, DType::F32)?;
                (model, built, params, stream_rng(run.seed, TRAIN_STREAM))
            }
            Start::Warm(c) | Start::Resume(c) => {
                if c.vocab != built {
                    return Err(Error::Checkpoint(format!(
                        "vocabulary mismatch: checkpoint has {} entries, the training split gives {} at min_count {}",
                        c.vocab.len(),
                        built.len(),
                        run.min_count
                    )));
                }
                let expected = run.model_config(c.vocab.len())?;
                if expected != c.model {
                    return Err(Error::Config(format!(
                        "checkpoint model {:?} differs from the configured {:?}",
                        c.model, expected
                    )));
                }
                let params = c.param_store(DType::F32)?;
                let rng = match start {
                    Start::Resume(_) => {
                        if c.stage != run.stage {
                            return Err(Error::Config(format!(
                                "cannot resume a {:?} checkpoint as {:?}",
                                c.stage, run.stage
                            )));
                        }
                        optimizer.load_state(c.step, &c.moments, &params)?;
                        c.rng.clone()
                    }
                    _ => stream_rng(run.seed, TRAIN_STREAM),
                };
                (c.model.clone(), c.vocab.clone(), params, rng)
            }
        };
        let n_train = data.train.len();
        let total = run.epochs * n_train.div_ceil(run.batch_size);
        Ok(Self {
            run: run.clone(),
            model,
            vocab,
            params,
            optimizer,
            rng,
            schedule: LrSchedule::new(run.lr, run.warmup_fraction, total),
            n_train,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.run.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.run.epochs * self.steps_per_epoch()
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    /// Training-split order of an epoch; a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_train).collect();
        order.shuffle(&mut stream_rng(self.run.seed, ORDER_STREAM + epoch as u64));
        order
    }

    fn tokenize(&self, e: &Example) -> Result<TokenizedReport> {
        self.vocab.tokenize(&e.report, self.model.max_len)
    }

    /// One optimizer update on the next batch of the training split.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        if data.train.len() != self.n_train {
            return Err(Error::invalid(format!(
                "session was built for {} training samples, got {}",
                self.n_train,
                data.train.len()
            )));
        }
        let step = self.step_count();
        let spe = self.steps_per_epoch() as u64;
        let order = self.epoch_order((step / spe) as usize);
        let b = self.run.batch_size;
        let at = (step % spe) as usize * b;
        let batch: Vec<&Example> = order[at..(at + b).min(self.n_train)]
            .iter()
            .map(|&i| &data.train[i])
            .collect();
        let lr = self.schedule.lr((step + 1) as f64);
        match self.run.stage {
            Stage::Pretrain => {
                let samples = batch
                    .iter()
                    .map(|e| {
                        Ok(PretrainSample {
                            images: (!e.images.is_empty()).then(|| e.images.clone()),
                            report: self.tokenize(e)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let r = pretrain_step(
                    &self.params,
                    &self.model,
                    &samples,
                    &mut self.optimizer,
                    lr,
                    step,
                    &mut self.rng,
                )?;
                Ok(StepRecord::Pretrain(r))
            }
            Stage::Finetune => {
                let reports = batch
                    .iter()
                    .map(|e| self.tokenize(e))
                    .collect::<Result<Vec<_>>>()?;
                let mut items = Vec::with_capacity(batch.len());
                for (e, r) in batch.iter().zip(&reports) {
                    if e.images.is_empty() {
                        return Err(Error::invalid(format!("sample '{}' has no image", e.id)));
                    }
                    items.push((e.images.as_slice(), r));
                }
                let loss = finetune_loss(&self.params, &self.model, &items, self.run.mode)?;
                let l_nll = to_f64(&loss)?;
                let nonfinite = |term: &str| Error::NonFinite {
                    term: term.into(),
                    step,
                };
                if !l_nll.is_finite() {
                    return Err(nonfinite("NLL"));
                }
                let mut grads = self.params.grads(&loss.backward()?);
                if let Some(max) = self.optimizer.config.clip_norm {
                    if !clip_grad_norm(&mut grads, max)?.is_finite() {
                        return Err(nonfinite("gradient"));
                    }
                }
                self.optimizer.step(&self.params, &grads, lr)?;
                Ok(StepRecord::Finetune(NllRecord { step, l_nll, lr }))
            }
        }
    }

    pub fn generator(&self) -> Generator<'_> {
        Generator {
            params: &self.params,
            config: &self.model,
            vocab: &self.vocab,
            mode: self.run.mode,
        }
    }

    /// Mean pre-training objective over the validation split, drawn with a
    /// fixed rng so that epochs are comparable.
    pub fn validation_loss(&self, examples: &[Example]) -> Result<f64> {
        let mut rng = stream_rng(self.run.seed, VALIDATION_STREAM);
        let mut sum = 0.0;
        for e in examples {
            let sample = PretrainSample {
                images: (!e.images.is_empty()).then(|| e.images.clone()),
                report: self.tokenize(e)?,
            };
            let (plm, mim) = pretrain_losses(&self.params, &self.model, &[sample], &mut rng)?;
            sum += to_f64(&plm)? + mim.as_ref().map(to_f64).transpose()?.unwrap_or(0.0);
        }
        Ok(sum / examples.len() as f64)
    }

    fn validate(&self, data: &Dataset) -> Result<(Option<f64>, Option<f64>)> {
        if data.val.is_empty() {
            return Ok((None, None));
        }
        match self.run.stage {
            Stage::Pretrain => Ok((Some(self.validation_loss(&data.val)?), None)),
            Stage::Finetune => {
                let e = self
                    .generator()
                    .evaluate(&data.val, &self.run.decode_config())?;
                Ok((None, Some(e.report.bleu_4)))
            }
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            stage: self.run.stage,
            mode: self.run.mode,
            step: self.step_count(),
            rng: self.rng.clone(),
            params: self.params.to_f32_map()?,
            moments: self.optimizer.state_map()?,
        })
    }
}

/// Result of a full stage.
#[derive(Debug)]
pub struct Outcome {
    /// State after the last epoch.
    pub session: Session,
    /// Best epoch by validation: lowest loss when pre-training (earliest on
    /// ties), highest BLEU-4 when fine-tuning (latest on ties). The last
    /// epoch when there is no validation split.
    pub best: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

struct Log(Option<BufWriter<File>>);

impl Log {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self(None));
        };
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self(Some(BufWriter::new(f))))
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("<log>", e))?;
        }
        Ok(())
    }
}

/// Runs every remaining epoch of `run.stage`, logging each step and epoch and
/// saving the best checkpoint to `run.checkpoint_out` whenever it improves.
pub fn train(run: &RunConfig, data: &Dataset, start: Start) -> Result<Outcome> {
    let mut session = Session::new(run, data, start)?;
    let mut log = Log::open(run.log.as_deref(), matches!(start, Start::Resume(_)))?;
    let spe = session.steps_per_epoch() as u64;
    let total = session.total_steps() as u64;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut epoch_loss = 0.0;
    let mut epoch_steps = 0usize;
    while session.step_count() < total {
        let r = session.step(data)?;
        log.write(&r)?;
        epoch_loss += r.total();
        epoch_steps += 1;
        steps.push(r);
        if session.step_count() % spe != 0 {
            continue;
        }
        let epoch = (session.step_count() / spe) as usize - 1;
        let (val_loss, val_bleu4) = session.validate(data)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / epoch_steps as f64,
            val_loss,
            val_bleu4,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val loss {:?} val BLEU-4 {:?}",
            record.train_loss,
            val_loss,
            val_bleu4
        );
        log.write(&record)?;
        epochs.push(record);
        epoch_loss = 0.0;
        epoch_steps = 0;
        // higher is better
        let score = match (val_loss, val_bleu4) {
            (Some(l), _) => -l,
            (_, Some(b)) => b,
            _ => 0.0,
        };
        let improved = match &best {
            None => true,
            Some((s, _)) => match run.stage {
                Stage::Pretrain => score > *s,
                Stage::Finetune => score >= *s,
            },
        } || (val_loss.is_none() && val_bleu4.is_none());
        if improved {
            let c = session.checkpoint()?;
            if let Some(out) = &run.checkpoint_out {
                c.save(out)?;
            }
            best = Some((score, c));
        }
    }
    let best = match best {
        Some((_, c)) => c,
        None => {
            let c = session.checkpoint()?;
            if let Some(out) = &run.checkpoint_out {
                c.save(out)?;
            }
            c
        }
    };
    Ok(Outcome {
        session,
        best,
        steps,
        epochs,
    })
}

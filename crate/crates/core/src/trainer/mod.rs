//! Optimization loop: batching, Adadelta updates, dev-based early
//! stopping, checkpoints and metrics.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod schedule;

use std::io::Write;

use msved_tensor::Tape;
use rayon::prelude::*;

pub use checkpoint::{Checkpoint, CheckpointHeader, Progress};
pub use config::{Interleave, TrainingConfig};
pub use metrics::{EpochRecord, MetricsRecord, StepRecord};
pub use optim::{clip_global_norm, global_norm, Adadelta};
pub use schedule::{interleave_batches, labeled_order, unlabeled_batch_count, unlabeled_window, ScheduledBatch};

use crate::analysis::exact_match_accuracy;
use crate::corpus::{build_schema_and_vocab, LabeledExample, TagSchema, UnlabeledWord, Vocab};
use crate::error::{MsvedError, Result};
use crate::objectives::{combined_objective, CombinedNoise, LabeledBatch, Mode};
use crate::rng::{stream, Purpose};
use crate::search::{max_decode_len, reinflect, Reinflection};
use crate::seq_model::ModelParams;
use crate::stochastic::AnnealConfig;

/// A labeled triple as symbol indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn encode_examples(schema: &TagSchema, vocab: &Vocab, examples: &[LabeledExample]) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| {
            Ok(EncodedExample {
                source: vocab.encode(&e.source),
                target: vocab.encode(&e.target),
                labels: schema.label_vector(&e.labels)?,
            })
        })
        .collect()
}

/// Everything a run trains and selects on, encoded against one schema and
/// vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: TagSchema,
    pub vocab: Vocab,
    pub train: Vec<EncodedExample>,
    pub dev: Vec<EncodedExample>,
    pub dev_gold: Vec<String>,
    pub unlabeled: Vec<Vec<usize>>,
}

impl Dataset {
    /// Schema from the training triples; vocabulary from training and
    /// unlabeled words.
    pub fn build(train: &[LabeledExample], dev: &[LabeledExample], unlabeled: &[UnlabeledWord]) -> Result<Self> {
        let (schema, vocab) = build_schema_and_vocab(train, unlabeled)?;
        Self::with_vocabulary(schema, vocab, train, dev, unlabeled)
    }

    pub fn with_vocabulary(
        schema: TagSchema,
        vocab: Vocab,
        train: &[LabeledExample],
        dev: &[LabeledExample],
        unlabeled: &[UnlabeledWord],
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(MsvedError::Config("training corpus is empty".into()));
        }
        Ok(Dataset {
            train: encode_examples(&schema, &vocab, train)?,
            dev: encode_examples(&schema, &vocab, dev)?,
            dev_gold: dev.iter().map(|e| e.target.clone()).collect(),
            unlabeled: unlabeled.iter().filter(|w| !w.form.is_empty()).map(|w| vocab.encode(&w.form)).collect(),
            schema,
            vocab,
        })
    }
}

/// Beam-decodes every example with z at its posterior mean.
pub fn predict(
    params: &ModelParams,
    examples: &[EncodedExample],
    beam_size: usize,
    max_decode_factor: usize,
) -> Result<Vec<Reinflection>> {
    examples
        .par_iter()
        .map(|e| {
            reinflect(
                params,
                &e.source,
                &e.labels,
                beam_size,
                max_decode_len(e.source.len(), max_decode_factor),
            )
        })
        .collect()
}

/// Exact-match accuracy of beam-decoded predictions against gold strings.
pub fn accuracy(
    params: &ModelParams,
    vocab: &Vocab,
    examples: &[EncodedExample],
    gold: &[String],
    beam_size: usize,
    max_decode_factor: usize,
) -> Result<f64> {
    let preds = predict(params, examples, beam_size, max_decode_factor)?;
    let strings: Vec<String> = preds.iter().map(|p| vocab.decode(&p.symbols)).collect();
    exact_match_accuracy(&strings, gold)
}

fn anneal_config(config: &TrainingConfig, steps_per_epoch: usize) -> AnnealConfig {
    let per_epoch = steps_per_epoch as u64;
    let max_steps = per_epoch * config.max_epochs as u64;
    AnnealConfig {
        lambda_max: config.lambda_max,
        ramp_steps: config.ramp_steps.unwrap_or(2 * per_epoch),
        tau_start: config.tau_start,
        tau_min: config.tau_min,
        tau_rate: config.tau_rate.unwrap_or_else(|| {
            AnnealConfig::rate_reaching_floor_at(config.tau_start, config.tau_min, max_steps.div_ceil(3))
        }),
    }
}

/// Outcome of a single optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub record: StepRecord,
    /// Present when the update closed an epoch.
    pub epoch: Option<EpochRecord>,
}

pub struct Trainer<'d> {
    config: TrainingConfig,
    data: &'d Dataset,
    params: ModelParams,
    optimizer: Adadelta,
    best: Option<ModelParams>,
    progress: Progress,
    anneal: AnnealConfig,
    labeled_batches: usize,
    unlabeled_batches: usize,
    plan: Option<(u64, Vec<ScheduledBatch>)>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainingConfig, data: &'d Dataset) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::new(config.model(), data.vocab.len(), &data.schema.sizes(), config.seed)?;
        let optimizer = Adadelta::new(config.rho, config.epsilon, params.tensors());
        Self::assemble(config, data, params, optimizer, None, None)
    }

    /// Continues a run from a checkpoint made with the same data.
    pub fn resume(checkpoint: Checkpoint, data: &'d Dataset) -> Result<Self> {
        let h = &checkpoint.header;
        if h.schema_hash != data.schema.hash() || h.vocab != data.vocab {
            return Err(MsvedError::Checkpoint(
                "checkpoint schema or vocabulary differs from the training data".into(),
            ));
        }
        if h.training.hash() != h.config_hash {
            return Err(MsvedError::Checkpoint("stored configuration does not match its hash".into()));
        }
        let Checkpoint {
            header,
            params,
            optimizer,
            best,
        } = checkpoint;
        Self::assemble(header.training, data, params, optimizer, best, Some(header.progress))
    }

    fn assemble(
        config: TrainingConfig,
        data: &'d Dataset,
        params: ModelParams,
        optimizer: Adadelta,
        best: Option<ModelParams>,
        progress: Option<Progress>,
    ) -> Result<Self> {
        if data.dev.is_empty() {
            return Err(MsvedError::Config("dev corpus is empty".into()));
        }
        if config.mode.uses_unlabeled() && data.unlabeled.is_empty() {
            return Err(MsvedError::Config("semi-supervised training needs unlabeled words".into()));
        }
        let labeled_batches = data.train.len().div_ceil(config.batch_size);
        let unlabeled_batches = if config.mode.uses_unlabeled() {
            unlabeled_batch_count(labeled_batches, data.train.len(), data.unlabeled.len()).max(1)
        } else {
            0
        };
        let steps_per_epoch = match config.interleave {
            Interleave::Alternate => labeled_batches + unlabeled_batches,
            Interleave::Joint => labeled_batches,
        };
        let anneal = anneal_config(&config, steps_per_epoch);
        let progress = progress.unwrap_or_else(|| Progress::start(anneal.state_at(0)));
        Ok(Trainer {
            config,
            data,
            params,
            optimizer,
            best,
            progress,
            anneal,
            labeled_batches,
            unlabeled_batches,
            plan: None,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn best_params(&self) -> Option<&ModelParams> {
        self.best.as_ref()
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn anneal_config(&self) -> &AnnealConfig {
        &self.anneal
    }

    pub fn optimizer(&self) -> &Adadelta {
        &self.optimizer
    }

    pub fn is_finished(&self) -> bool {
        self.progress.finished
    }

    pub fn steps_per_epoch(&self) -> usize {
        match self.config.interleave {
            Interleave::Alternate => self.labeled_batches + self.unlabeled_batches,
            Interleave::Joint => self.labeled_batches,
        }
    }

    /// Batch schedule of an epoch; a pure function of the seed and epoch.
    pub fn epoch_plan(&self, epoch: u64) -> Vec<ScheduledBatch> {
        let c = &self.config;
        let labeled = labeled_order(c.seed, epoch, self.data.train.len());
        let window = self.unlabeled_batches * c.batch_size;
        let unlabeled = unlabeled_window(c.seed, self.data.unlabeled.len(), epoch as usize * window, window);
        interleave_batches(&labeled, &unlabeled, c.batch_size, c.interleave)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                model: self.config.model(),
                schema: self.data.schema.clone(),
                schema_hash: self.data.schema.hash(),
                vocab: self.data.vocab.clone(),
                seed: self.config.seed,
                training: self.config.clone(),
                config_hash: self.config.hash(),
                progress: self.progress.clone(),
            },
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            best: self.best.clone(),
        }
    }

    /// Runs the next scheduled update; closes the epoch (dev evaluation,
    /// early stopping) when it was the epoch's last batch.
    pub fn step(&mut self, metrics: &mut dyn Write) -> Result<StepReport> {
        if self.progress.finished {
            return Err(MsvedError::Contract("training has already finished".into()));
        }
        let epoch = self.progress.epoch;
        if self.plan.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.plan = Some((epoch, self.epoch_plan(epoch)));
        }
        let (plan_len, batch) = {
            let plan = &self.plan.as_ref().expect("plan just set").1;
            (plan.len(), plan[self.progress.batch_in_epoch].clone())
        };
        let record = self.update(&batch)?;
        metrics::write_record(metrics, &MetricsRecord::Step(Box::new(record.clone())))?;
        self.progress.step += 1;
        self.progress.anneal = self.anneal.state_at(self.progress.step);
        self.progress.batch_in_epoch += 1;
        self.progress.epoch_objective += record.terms.objective;
        let epoch = if self.progress.batch_in_epoch == plan_len {
            let e = self.close_epoch(plan_len)?;
            metrics::write_record(metrics, &MetricsRecord::Epoch(e.clone()))?;
            Some(e)
        } else {
            None
        };
        Ok(StepReport { record, epoch })
    }

    fn update(&mut self, batch: &ScheduledBatch) -> Result<StepRecord> {
        let c = &self.config;
        let data = self.data;
        let anneal = self.anneal.state_at(self.progress.step);
        let src: Vec<&[usize]> = batch.labeled.iter().map(|&i| data.train[i].source.as_slice()).collect();
        let tgt: Vec<&[usize]> = batch.labeled.iter().map(|&i| data.train[i].target.as_slice()).collect();
        let lab: Vec<&[usize]> = batch.labeled.iter().map(|&i| data.train[i].labels.as_slice()).collect();
        let unl: Vec<&[usize]> = batch.unlabeled.iter().map(|&i| data.unlabeled[i].as_slice()).collect();
        let labeled = (!src.is_empty()).then_some(LabeledBatch {
            sources: &src,
            targets: &tgt,
            labels: &lab,
        });
        let unlabeled = (!unl.is_empty()).then_some(unl.as_slice());
        let mut rng = stream(c.seed, Purpose::StepNoise, self.progress.step);
        let noise = CombinedNoise::sample(&mut rng, &self.params, c.mode, labeled.as_ref(), unlabeled, c.beta);
        let (mut grads, terms) = {
            let mut tape = Tape::new();
            tape.set_checked(c.checked);
            let net = self.params.bind(&mut tape);
            let combined = combined_objective(
                &mut tape,
                &net,
                c.mode,
                labeled.as_ref(),
                unlabeled,
                &anneal,
                &c.weights(),
                &noise,
            )?;
            let loss = tape.neg(combined.objective)?;
            let g = tape.backward(loss)?;
            (net.collect_grads(&g), combined.terms)
        };
        let grad_norm = clip_global_norm(&mut grads, c.grad_clip_norm)?;
        self.optimizer.update(self.params.tensors_mut(), &grads)?;
        if c.checked && !self.params.is_finite() {
            return Err(MsvedError::Tensor(msved_tensor::TensorError::NonFinite { op: "adadelta" }));
        }
        Ok(StepRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            mode: c.mode,
            batch: batch.kind().to_string(),
            labeled_examples: batch.labeled.len(),
            unlabeled_examples: batch.unlabeled.len(),
            terms,
            lambda: anneal.lambda,
            tau: anneal.tau,
            alpha: if c.mode == Mode::SemiSup { c.alpha } else { 0.0 },
            grad_norm,
            seed: c.seed,
        })
    }

    fn close_epoch(&mut self, steps: usize) -> Result<EpochRecord> {
        let c = &self.config;
        let acc = accuracy(
            &self.params,
            &self.data.vocab,
            &self.data.dev,
            &self.data.dev_gold,
            c.beam_size,
            c.max_decode_factor,
        )?;
        let p = &mut self.progress;
        let improved = p.best_dev_accuracy.is_none_or(|b| acc > b);
        if improved {
            p.best_dev_accuracy = Some(acc);
            p.best_epoch = Some(p.epoch);
            p.epochs_since_best = 0;
            self.best = Some(self.params.clone());
        } else {
            p.epochs_since_best += 1;
        }
        let record = EpochRecord {
            epoch: p.epoch,
            steps: p.step,
            mean_objective: p.epoch_objective / steps as f64,
            dev_accuracy: acc,
            best_dev_accuracy: p.best_dev_accuracy.unwrap_or(acc),
            improved,
            finished: false,
            seed: c.seed,
        };
        p.epoch += 1;
        p.batch_in_epoch = 0;
        p.epoch_objective = 0.0;
        p.finished = p.epochs_since_best >= c.patience || p.epoch >= c.max_epochs as u64;
        Ok(EpochRecord {
            finished: p.finished,
            ..record
        })
    }

    /// Steps until the current epoch closes.
    pub fn run_epoch(&mut self, metrics: &mut dyn Write) -> Result<EpochRecord> {
        loop {
            if let Some(e) = self.step(metrics)?.epoch {
                return Ok(e);
            }
        }
    }

    /// Trains until early stopping or the epoch limit; `on_epoch` sees the
    /// trainer after every epoch (e.g. to write a checkpoint).
    pub fn run(
        &mut self,
        metrics: &mut dyn Write,
        mut on_epoch: impl FnMut(&Trainer<'d>, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.progress.finished {
            let e = self.run_epoch(metrics)?;
            on_epoch(self, &e)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub best_dev_accuracy: f64,
    pub epochs: u64,
}

impl TrainOutcome {
    pub fn best_params(&self) -> &ModelParams {
        self.checkpoint.inference_params()
    }
}

/// Trains a model from scratch and returns the final checkpoint, which
/// carries the dev-selected parameters.
pub fn train(config: TrainingConfig, data: &Dataset, metrics: &mut dyn Write) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, data)?;
    trainer.run(metrics, |_, _| Ok(()))?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutcome {
        best_dev_accuracy: checkpoint.header.progress.best_dev_accuracy.unwrap_or(0.0),
        epochs: checkpoint.header.progress.epoch,
        checkpoint,
    })
}

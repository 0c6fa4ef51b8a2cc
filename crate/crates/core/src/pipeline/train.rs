use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{split_indices, Subject};
use super::optim::{Nadam, PlateauSchedule};
use crate::dropout::{enumerate_patterns, sample_pattern, PatternMask};
use crate::error::{Error, Result};
use crate::losses::{generator_target, total_loss, LossReport, SsimConstants};
use crate::network::{build_network, Checkpoint, ParameterStore, Session, TrainingState};
use crate::nn::{Tensor, Var};

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub seg: f64,
    pub gen: f64,
    pub cc: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub val: LossReport,
    pub lr: f64,
    pub improved: bool,
    pub reduced: bool,
}

/// How the availability pattern of each training example is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PatternPolicy {
    /// Uniform over the 15 patterns, redrawn per subject and step.
    Random,
    Fixed(PatternMask),
}

/// Build the weighted objective for one subject on `session`'s graph.
pub fn objective(
    session: &mut Session,
    subject: &Subject,
    pattern: PatternMask,
    config: &RunConfig,
) -> Result<(Var, LossReport)> {
    let out = session.forward_full(&subject.volume, pattern)?;
    let [d, h, w] = subject.labels.shape;
    let onehot = Tensor::from_vec(&[4, d, h, w], subject.labels.one_hot())?;
    let seg = session.graph.dice_loss(out.probs, &onehot);
    let mut terms = vec![(seg, 1.0f32)];
    let mut gen_value = 0.0;
    if config.ablation.uses_generator() {
        let target = generator_target(&subject.volume, pattern)?;
        let constants = SsimConstants::for_target(&target.data);
        let target = Tensor::from_vec(&[1, d, h, w], target.data)?;
        let gen = session.graph.ssim_loss(out.m5, &target, constants);
        gen_value = session.graph.value(gen).item() as f64;
        terms.push((gen, config.lambda as f32));
    }
    let mut cc_value = 0.0;
    if config.ablation.uses_correlation() {
        let cc = session.correlation_loss(&out.bottlenecks)?;
        cc_value = session.graph.value(cc).item() as f64;
        terms.push((cc, config.eta as f32));
    }
    let seg_value = session.graph.value(seg).item() as f64;
    let report = total_loss(seg_value, gen_value, cc_value, config.lambda, config.eta)?;
    Ok((session.graph.combine(&terms), report))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        seg: avg(|r| r.seg),
        gen: avg(|r| r.gen),
        cc: avg(|r| r.cc),
        total: avg(|r| r.total),
        lambda: reports.first().map_or(0.0, |r| r.lambda),
        eta: reports.first().map_or(0.0, |r| r.eta),
    }
}

/// Parameters, optimizer and randomness of one run.
pub struct Trainer {
    pub config: RunConfig,
    pub store: ParameterStore,
    pub optimizer: Nadam,
    pub schedule: PlateauSchedule,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let config = config.resolved()?;
        let mut store = build_network(&config.network, config.seed)?;
        store.retain_groups(&config.ablation.groups());
        let optimizer = Nadam::new(&store);
        let schedule = PlateauSchedule::new(
            config.learning_rate,
            config.plateau_factor,
            config.plateau_patience,
            config.early_stop_patience,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        Ok(Self {
            config,
            store,
            optimizer,
            schedule,
            epoch: 0,
            rng,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.schedule.learning_rate
    }

    pub fn global_step(&self) -> u64 {
        self.optimizer.state.step
    }

    /// Forward, backward and one optimizer update over a batch; gradients
    /// are averaged over its subjects.
    pub fn train_step(&mut self, batch: &[&Subject], policy: PatternPolicy) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let step = self.global_step() + 1;
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut reports = Vec::with_capacity(batch.len());
        let scale = 1.0 / batch.len() as f32;
        for subject in batch {
            let pattern = match policy {
                PatternPolicy::Random => sample_pattern(&mut self.rng),
                PatternPolicy::Fixed(p) => p,
            };
            let seed = self.rng.next_u64();
            let mut session = Session::new(&self.store, &self.config.network, true, seed);
            let (loss, report) = objective(&mut session, subject, pattern, &self.config)
                .map_err(|e| with_step(e, step, &subject.volume.subject_id))?;
            let mut grads = session.graph.backward(loss);
            for (name, &var) in session.bound() {
                if let Some(mut g) = grads.take(var) {
                    if !g.is_finite() {
                        return Err(Error::Numeric(format!("step {step}: non-finite gradient for {name}")));
                    }
                    g.scale(scale);
                    match acc.get_mut(name) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(name.clone(), g);
                        }
                    }
                }
            }
            reports.push(report);
        }
        let lr = self.learning_rate();
        self.optimizer.step(&mut self.store, &acc, lr)?;
        let r = mean_report(&reports);
        Ok(StepRecord {
            step,
            epoch: self.epoch,
            seg: r.seg,
            gen: r.gen,
            cc: r.cc,
            total: r.total,
            lr,
        })
    }

    /// Validation patterns of subject `i`: all four sequences, plus one
    /// pattern cycling through the table.
    pub fn validation_patterns(i: usize) -> [PatternMask; 2] {
        [PatternMask::FULL, enumerate_patterns()[i % 15]]
    }

    /// Mean objective over fixed patterns, without dropout.
    pub fn validation_loss(&self, subjects: &[&Subject]) -> Result<LossReport> {
        if subjects.is_empty() {
            return Err(Error::EmptyDataset("no validation subjects".into()));
        }
        let mut reports = Vec::new();
        for (i, subject) in subjects.iter().enumerate() {
            for pattern in Self::validation_patterns(i) {
                let mut session = Session::new(&self.store, &self.config.network, false, 0);
                reports.push(objective(&mut session, subject, pattern, &self.config)?.1);
            }
        }
        Ok(mean_report(&reports))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.network.clone(), self.store.clone());
        ck.optimizer = Some(self.optimizer.state.clone());
        ck.training = Some(TrainingState {
            epoch: self.epoch,
            global_step: self.global_step(),
            learning_rate: self.learning_rate(),
            best_val_loss: self.schedule.best,
            rng_seed: self.config.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
        });
        ck.run_config = serde_json::to_value(&self.config).ok();
        ck
    }
}

fn with_step(e: Error, step: u64, subject: &str) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step}, subject {subject}: {msg}")),
        other => other,
    }
}

#[derive(Default)]
pub struct TrainOptions<'w> {
    /// JSON-lines sink for step and epoch records.
    pub log: Option<&'w mut dyn Write>,
    /// Where the best-validation checkpoint is written whenever it improves.
    pub checkpoint_path: Option<PathBuf>,
    /// Report progress on stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    /// Best-validation checkpoint.
    pub best: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Train(&'a StepRecord),
    Val {
        epoch: usize,
        step: u64,
        seg: f64,
        gen: f64,
        cc: f64,
        total: f64,
        lr: f64,
    },
}

fn write_line(log: &mut Option<&mut dyn Write>, line: &LogLine) -> Result<()> {
    if let Some(w) = log {
        let text = serde_json::to_string(line).expect("log line serializes");
        writeln!(w, "{text}").map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

/// Full run: seeded split, epochs of shuffled batches with random patterns,
/// plateau schedule and early stopping on the validation objective.
pub fn train(config: RunConfig, subjects: &[Subject], mut options: TrainOptions) -> Result<TrainOutcome> {
    if subjects.len() < 2 {
        return Err(Error::EmptyDataset(format!(
            "need at least 2 subjects for a train/validation split, got {}",
            subjects.len()
        )));
    }
    if let Some(s) = subjects.iter().find(|s| !s.volume.is_complete()) {
        return Err(Error::Supervision(format!("subject {} lacks a sequence", s.volume.subject_id)));
    }
    let mut trainer = Trainer::new(config)?;
    let (train_idx, val_idx) = split_indices(subjects.len(), trainer.config.val_fraction, trainer.config.seed);
    let val: Vec<&Subject> = val_idx.iter().map(|&i| &subjects[i]).collect();
    let mut best: Option<Checkpoint> = None;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    for epoch in 0..trainer.config.max_epochs {
        trainer.epoch = epoch;
        let mut order = train_idx.clone();
        order.shuffle(&mut trainer.rng);
        let mut epoch_totals = Vec::new();
        for chunk in order.chunks(trainer.config.batch_size) {
            let batch: Vec<&Subject> = chunk.iter().map(|&i| &subjects[i]).collect();
            let rec = trainer.train_step(&batch, PatternPolicy::Random)?;
            write_line(&mut options.log, &LogLine::Train(&rec))?;
            epoch_totals.push(rec.total);
            steps.push(rec);
        }
        let lr_used = trainer.learning_rate();
        let v = trainer.validation_loss(&val)?;
        write_line(
            &mut options.log,
            &LogLine::Val {
                epoch,
                step: trainer.global_step(),
                seg: v.seg,
                gen: v.gen,
                cc: v.cc,
                total: v.total,
                lr: lr_used,
            },
        )?;
        let event = trainer.schedule.observe(v.total);
        if event.improved {
            let ck = trainer.checkpoint();
            if let Some(path) = &options.checkpoint_path {
                ck.save(path)?;
            }
            best = Some(ck);
        }
        let train_total = epoch_totals.iter().sum::<f64>() / epoch_totals.len().max(1) as f64;
        if options.verbose {
            eprintln!(
                "epoch {epoch:3}  train {train_total:.4}  val {:.4} (seg {:.4} gen {:.4} cc {:.4})  lr {lr_used:.2e}{}",
                v.total,
                v.seg,
                v.gen,
                v.cc,
                if event.improved { "  *" } else { "" }
            );
        }
        epochs.push(EpochRecord {
            epoch,
            train_total,
            val: v,
            lr: lr_used,
            improved: event.improved,
            reduced: event.reduced,
        });
        if event.stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.expect("first epoch always improves"),
        epochs,
        steps,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

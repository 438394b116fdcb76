//! Joint training, Composer-only pretraining and their epoch loop.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use xmvae_core::dataset::{batch_indices, choose_holdout, Batch, SegmentedDataset, Split};

use crate::checkpoint::{load_xmvae, save_xmvae, Progress};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::{composer_losses, compute_losses, scalar, LossRecord};
use crate::optim::Adam;
use crate::xmvae::{tensor_to_f64, Inputs, Noise, Quantize, Xmvae};

/// Which parameters are optimized and which objective is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// L_s + L_p over every parameter.
    Joint,
    /// L_s over the Composer only.
    ComposerOnly,
}

pub struct Trainer {
    pub model: Xmvae,
    pub adam: Adam,
    pub objective: Objective,
    pub step: usize,
    rng: ChaCha8Rng,
    /// Projected encodings of the latest batch, used to reseed dead codes.
    recent: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Xmvae, objective: Objective, config: &TrainConfig) -> Result<Self> {
        let prefix = match objective {
            Objective::Joint => "",
            Objective::ComposerOnly => "composer.",
        };
        let adam = Adam::new(model.store.vars_with_prefix(prefix), config)?;
        Ok(Self {
            model,
            adam,
            objective,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11),
            recent: Vec::new(),
        })
    }

    fn inputs(&self, batch: &Batch) -> Result<Inputs> {
        Inputs::from_batch(batch, self.model.config.max_len, self.model.dtype(), self.model.device())
    }

    /// One optimizer step followed by the codebook EMA update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64, epoch: usize) -> Result<LossRecord> {
        let inp = self.inputs(batch)?;
        let cfg = &self.model.config;
        let (record, loss, projected, codes) = match self.objective {
            Objective::Joint => {
                let out = self
                    .model
                    .forward(&inp, Quantize::StraightThrough, Noise::Sample(&mut self.rng))?;
                let losses = compute_losses(&out, &inp, cfg.alpha, cfg.beta_at(epoch))?;
                let record = LossRecord::from_losses(&losses)?;
                (record, losses.total, out.composer.projected, out.composer.codes)
            }
            Objective::ComposerOnly => {
                let out = self.model.composer_forward(&inp, Quantize::StraightThrough)?;
                let l = composer_losses(&out, &inp, cfg.alpha)?;
                let record = LossRecord {
                    score_ce: scalar(&l.score.loss)?,
                    commitment: scalar(&l.commitment)?,
                    l_s: scalar(&l.l_s)?,
                    total: scalar(&l.l_s)?,
                    score_correct: l.score.correct,
                    score_count: l.score.count,
                    ..LossRecord::default()
                };
                (record, l.l_s, out.projected, out.codes)
            }
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                epoch,
                step: self.step,
            });
        }
        let grads = loss.backward()?;
        self.adam.step(&grads, lr).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite {
                what,
                epoch,
                step: self.step,
            },
            other => other,
        })?;

        let (rows, assigned) = real_rows(&inp, &tensor_to_f64(&projected)?, &codes, self.model.config.d_z);
        self.model.codebook.ema_update(&rows, &assigned)?;
        self.recent = rows;
        self.step += 1;
        Ok(record)
    }

    /// Reseeds codes that went unused. Returns how many were reseeded.
    pub fn end_epoch(&mut self) -> Result<usize> {
        let dead = self.model.codebook.dead_codes(self.model.config.dead_code_threshold);
        let n = self.model.codebook.reseed(&dead, &self.recent, &mut self.rng)?;
        if n > 0 {
            log::info!("reseeded {n} unused codes");
        }
        Ok(n)
    }

    /// Teacher-forced losses without updates, posterior mean for z_p.
    pub fn evaluate(&self, batches: &[Batch], epoch: usize) -> Result<LossRecord> {
        evaluate(&self.model, batches, self.model.config.beta_at(epoch))
    }
}

/// Projected rows and codes of the real (non-padding) steps.
fn real_rows(inp: &Inputs, projected: &[f64], codes: &[u32], dz: usize) -> (Vec<f64>, Vec<u32>) {
    let mut rows = Vec::with_capacity(inp.real_steps() * dz);
    let mut assigned = Vec::with_capacity(inp.real_steps());
    for r in 0..inp.b {
        for s in 0..inp.lengths[r] {
            let i = r * inp.t + s;
            rows.extend_from_slice(&projected[i * dz..(i + 1) * dz]);
            assigned.push(codes[i]);
        }
    }
    (rows, assigned)
}

/// Step-weighted mean of teacher-forced losses over batches.
pub fn evaluate(model: &Xmvae, batches: &[Batch], beta: f64) -> Result<LossRecord> {
    let mut acc = LossRecord::default();
    let total: usize = batches.iter().map(|b| b.size).sum();
    for batch in batches {
        let inp = Inputs::from_batch(batch, model.config.max_len, model.dtype(), model.device())?;
        let out = model.forward(&inp, Quantize::StraightThrough, Noise::Mean)?;
        let losses = compute_losses(&out, &inp, model.config.alpha, beta)?;
        acc.accumulate(&LossRecord::from_losses(&losses)?, batch.size as f64 / total.max(1) as f64);
    }
    Ok(acc)
}

/// Teacher-forced sub-token accuracy of the score and performance heads.
pub fn accuracy(model: &Xmvae, batches: &[Batch]) -> Result<(f64, f64)> {
    let r = evaluate(model, batches, model.config.beta)?;
    Ok((r.score_accuracy(), r.perf_accuracy()))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossRecord,
    pub validation: Option<LossRecord>,
    pub reseeded: usize,
}

pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue a run from its last checkpoint, optimizer state included.
    pub resume: Option<PathBuf>,
    /// Start from the weights of another checkpoint with a fresh optimizer.
    pub init: Option<PathBuf>,
    pub dtype: DType,
    pub device: Device,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            resume: None,
            init: None,
            dtype: DType::F32,
            device: Device::Cpu,
        }
    }
}

pub struct RunSummary {
    pub history: Vec<EpochRecord>,
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    pub model: Xmvae,
}

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const METRICS_LOG: &str = "metrics.csv";

const LOG_HEADER: [&str; 10] = [
    "epoch",
    "step",
    "lr",
    "score_ce",
    "perf_ce",
    "commitment",
    "kl",
    "l_s",
    "l_p",
    "total",
];

fn open_log(path: &Path, fresh: bool) -> Result<csv::Writer<fs::File>> {
    let exists = !fresh && path.exists() && fs::metadata(path)?.len() > 0;
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !exists {
        w.write_record(LOG_HEADER)?;
    }
    Ok(w)
}

/// Splits the training pieces of a dataset into fitting and validation
/// segment indices. Validation is empty with fewer than two pieces.
pub fn validation_split(ds: &SegmentedDataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let pieces: Vec<usize> = (0..ds.piece_ids.len())
        .filter(|&p| ds.splits[p] == Split::Train)
        .collect();
    let mut held = vec![false; ds.piece_ids.len()];
    if fraction > 0.0 && pieces.len() >= 2 {
        for (i, h) in choose_holdout(pieces.len(), fraction, seed).into_iter().enumerate() {
            held[pieces[i]] = h;
        }
    }
    let train = ds.indices(Split::Train);
    let (val, fit): (Vec<usize>, Vec<usize>) = train.into_iter().partition(|&i| held[ds.segments[i].piece]);
    (fit, val)
}

fn make(ds: &SegmentedDataset, indices: &[usize], batch_size: usize, shuffle: Option<u64>) -> Vec<Batch> {
    batch_indices(indices, batch_size, shuffle)
        .into_iter()
        .map(|idx| Batch::from_sequences(&ds.sequences(&idx), idx))
        .collect()
}

fn run(
    ds: &SegmentedDataset,
    exp: &ExperimentConfig,
    opts: &RunOptions,
    objective: Objective,
) -> Result<RunSummary> {
    let tc = &exp.train;
    tc.schedule.validate()?;
    fs::create_dir_all(&opts.out_dir)?;
    let fingerprint = ds.fingerprint.as_str();

    let (model, start_epoch, step, best, restore) = if let Some(path) = &opts.resume {
        let loaded = load_xmvae(path, Some(fingerprint), &opts.device)?;
        let next = loaded.meta.epoch + 1;
        let (step, best) = (loaded.meta.step, loaded.meta.best_validation);
        (loaded.value, next, step, best, Some((loaded.meta, loaded.tensors)))
    } else if let Some(path) = &opts.init {
        (load_xmvae(path, Some(fingerprint), &opts.device)?.value, 1, 0, None, None)
    } else {
        (Xmvae::new(exp.model.clone(), tc.seed, opts.dtype, &opts.device)?, 1, 0, None, None)
    };
    let mut trainer = Trainer::new(model, objective, tc)?;
    trainer.step = step;
    if let Some((meta, tensors)) = restore {
        let loaded = crate::checkpoint::Loaded {
            value: (),
            meta,
            tensors,
        };
        loaded.restore_adam(&mut trainer.adam)?;
    }

    let (fit, val) = validation_split(ds, tc.validation_fraction, tc.seed);
    if fit.is_empty() {
        return Err(Error::Config("no training segments".into()));
    }
    let val_batches = make(ds, &val, tc.batch_size, None);
    let last_epoch = tc.epochs.min(tc.schedule.stop_epoch);
    let mut log = open_log(&opts.out_dir.join(METRICS_LOG), opts.resume.is_none())?;
    let last = opts.out_dir.join(LAST_CHECKPOINT);
    let best_path = opts.out_dir.join(BEST_CHECKPOINT);
    let mut best = best;
    let mut history = Vec::new();

    for epoch in start_epoch..=last_epoch {
        let lr = tc.schedule.lr_at(epoch)?;
        let batches = make(ds, &fit, tc.batch_size, Some(tc.seed.wrapping_add(epoch as u64)));
        let mut summary = LossRecord::default();
        let n: usize = batches.iter().map(|b| b.size).sum();
        for batch in &batches {
            let r = trainer.train_step(batch, lr, epoch)?;
            log.write_record(&[
                epoch.to_string(),
                trainer.step.to_string(),
                format!("{lr:e}"),
                r.score_ce.to_string(),
                r.perf_ce.to_string(),
                r.commitment.to_string(),
                r.kl.to_string(),
                r.l_s.to_string(),
                r.l_p.to_string(),
                r.total.to_string(),
            ])?;
            summary.accumulate(&r, batch.size as f64 / n as f64);
        }
        log.flush()?;
        let reseeded = trainer.end_epoch()?;
        let validation = if val_batches.is_empty() {
            None
        } else {
            Some(trainer.evaluate(&val_batches, epoch)?)
        };
        let progress = |best_validation| Progress {
            epoch,
            step: trainer.step,
            best_validation,
            parent: None,
        };
        if let Some(v) = &validation {
            let score = match objective {
                Objective::Joint => v.total,
                Objective::ComposerOnly => v.l_s,
            };
            if best.is_none_or(|b| score < b) {
                best = Some(score);
                save_xmvae(&best_path, &trainer.model, Some(&trainer.adam), &progress(best), fingerprint)?;
            }
        }
        save_xmvae(&last, &trainer.model, Some(&trainer.adam), &progress(best), fingerprint)?;
        log::info!(
            "epoch {epoch}: lr {lr:.3e} L_s {:.4} L_p {:.4} kl {:.4}{}",
            summary.l_s,
            summary.l_p,
            summary.kl,
            validation.as_ref().map_or(String::new(), |v| format!(" val {:.4}", v.total))
        );
        history.push(EpochRecord {
            epoch,
            lr,
            train: summary,
            validation,
            reseeded,
        });
    }
    if history.is_empty() && !last.exists() {
        save_xmvae(
            &last,
            &trainer.model,
            Some(&trainer.adam),
            &Progress {
                epoch: start_epoch.saturating_sub(1),
                step: trainer.step,
                best_validation: best,
                parent: None,
            },
            fingerprint,
        )?;
    }
    Ok(RunSummary {
        history,
        last,
        best: best_path.exists().then_some(best_path),
        model: trainer.model,
    })
}

/// Joint training on the train split, with per-epoch checkpoints, a best
/// validation checkpoint and a CSV loss log in `opts.out_dir`.
pub fn run_training(ds: &SegmentedDataset, exp: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    run(ds, exp, opts, Objective::Joint)
}

/// Trains the Composer alone on score-only sequences. The Pianist keeps its
/// initial weights; the checkpoint can initialize [`run_training`].
pub fn pretrain_composer(ds: &SegmentedDataset, exp: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    run(ds, exp, opts, Objective::ComposerOnly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LrSchedule, ModelConfig};
    use xmvae_core::{encode_score, QuantizationSpec, ScoreNote};

    fn scores(n: usize) -> SegmentedDataset {
        let spec = QuantizationSpec::default();
        let mut ds = SegmentedDataset {
            piece_ids: Vec::new(),
            splits: Vec::new(),
            segments: Vec::new(),
            fingerprint: spec.fingerprint(),
        };
        for p in 0..n {
            let notes: Vec<ScoreNote> = (0..6)
                .map(|i| ScoreNote::new(format!("{i}"), 60 + ((i * (p + 1)) % 12) as u8, i as f64 * 0.5, 0.5).unwrap())
                .collect();
            ds.piece_ids.push(format!("p{p}"));
            ds.splits.push(Split::Train);
            ds.segments.push(xmvae_core::dataset::Segment {
                piece: p,
                note_start: 0,
                seq: encode_score(&notes, &spec),
            });
        }
        ds
    }

    fn experiment(epochs: usize) -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig::tiny(),
            train: TrainConfig {
                epochs,
                batch_size: 2,
                schedule: LrSchedule {
                    warmup_epochs: 1,
                    peak: 1e-3,
                    decay_end_epoch: 4,
                    floor: 1e-4,
                    stop_epoch: 6,
                },
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn resume_continues_the_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let ds = scores(3);
        let mut opts = RunOptions::new(dir.path());
        let first = pretrain_composer(&ds, &experiment(2), &opts).unwrap();
        assert_eq!(first.history.len(), 2);
        opts.resume = Some(first.last.clone());
        let second = pretrain_composer(&ds, &experiment(4), &opts).unwrap();
        let epochs: Vec<usize> = second.history.iter().map(|h| h.epoch).collect();
        assert_eq!(epochs, vec![3, 4]);
        let lrs: Vec<f64> = second.history.iter().map(|h| h.lr).collect();
        let sched = experiment(4).train.schedule;
        assert_eq!(lrs, vec![sched.lr_at(3).unwrap(), sched.lr_at(4).unwrap()]);
        let log = fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
        assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 1);
    }

    #[test]
    fn pretraining_leaves_the_pianist_alone() {
        let dir = tempfile::tempdir().unwrap();
        let ds = scores(2);
        let exp = experiment(1);
        let before = Xmvae::new(exp.model.clone(), exp.train.seed, DType::F32, &Device::Cpu).unwrap();
        let out = pretrain_composer(&ds, &exp, &RunOptions::new(dir.path())).unwrap();
        for (name, var) in before.store.vars_with_prefix("pianist.") {
            let after = out.model.store.get(&name).unwrap();
            assert_eq!(
                tensor_to_f64(var.as_tensor()).unwrap(),
                tensor_to_f64(after.as_tensor()).unwrap(),
                "{name}"
            );
        }
        let moved = before
            .store
            .vars_with_prefix("composer.")
            .iter()
            .any(|(n, v)| tensor_to_f64(v.as_tensor()).unwrap() != tensor_to_f64(out.model.store.get(n).unwrap().as_tensor()).unwrap());
        assert!(moved);
    }

    #[test]
    fn validation_split_holds_out_whole_pieces() {
        let ds = scores(10);
        let (fit, val) = validation_split(&ds, 0.2, 0);
        assert_eq!(val.len(), 2);
        assert_eq!(fit.len(), 8);
        let (fit, val) = validation_split(&scores(1), 0.2, 0);
        assert_eq!((fit.len(), val.len()), (1, 0));
    }
}

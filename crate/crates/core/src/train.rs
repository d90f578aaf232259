//! Offline distillation loop: batches from a teacher store, cosine loss,
//! clipped AdamW updates on a warmup + cosine schedule, periodic checkpoints
//! and a per-step metric log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};

use crate::cloner::{ModelBundle, STATE_PREFIX};
use crate::error::{Error, Result};
use crate::model::{cosine_loss, Params, StudentModel, Trainable};
use crate::optim::{clip_grad_norm, lr_at, AdamW};
use crate::segmenter::Segmenter;
use crate::store::{Batcher, Dataset, TargetKind};
use crate::tensor::{self, Tensor, TensorData, TensorMap};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const MODEL_FILE: &str = "model.vsrg";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub target: TargetKind,
    pub trainable: Trainable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 256,
            lr_peak: 5e-5,
            warmup_ratio: 0.01,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            checkpoint_every: 100,
            seed: 42,
            target: TargetKind::Final,
            trainable: Trainable::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup ratio must be in [0, 1)");
        }
        if !(self.lr_peak > 0.0) || !self.lr_peak.is_finite() {
            return bad("peak learning rate must be > 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("epochs, batch size and checkpoint interval must be >= 1");
        }
        if !(self.weight_decay >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("weight decay must be >= 0 and the clip norm > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    pub optimizer: AdamW,
    /// Sum of all logged losses so far.
    pub running_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StudentModel<f32>,
    pub log: Vec<MetricRow>,
    pub total_steps: u64,
    pub last_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:07}.vsrg"))
}

fn state_tensors(params: &Params<f64>, prefix: &str, map: &mut TensorMap) {
    for (name, _, t) in params.tensors() {
        map.insert(
            format!("{STATE_PREFIX}{prefix}.{name}"),
            Tensor::new(vec![t.len()], TensorData::F64(t.to_vec())).unwrap(),
        );
    }
}

pub fn save_checkpoint(path: &Path, model: &StudentModel<f32>, state: &TrainState) -> Result<()> {
    let mut map = model.to_bundle()?.to_tensors();
    let scalar_u = |v: u64| Tensor::u64(vec![1], vec![v]).unwrap();
    map.insert(format!("{STATE_PREFIX}step"), scalar_u(state.step));
    map.insert(format!("{STATE_PREFIX}seed"), scalar_u(state.seed));
    map.insert(format!("{STATE_PREFIX}adam_t"), scalar_u(state.optimizer.t));
    map.insert(
        format!("{STATE_PREFIX}running_loss"),
        Tensor::new(vec![1], TensorData::F64(vec![state.running_loss])).unwrap(),
    );
    map.insert(
        format!("{STATE_PREFIX}weight_decay"),
        Tensor::new(vec![1], TensorData::F64(vec![state.optimizer.weight_decay])).unwrap(),
    );
    state_tensors(&state.optimizer.m, "m", &mut map);
    state_tensors(&state.optimizer.v, "v", &mut map);
    tensor::save(&map, path)
}

pub fn load_checkpoint(path: &Path) -> Result<(StudentModel<f32>, TrainState)> {
    let map = tensor::load(path)?;
    let model = StudentModel::from_bundle(&ModelBundle::from_tensors(&map)?)?;
    let missing = |name: &str| Error::Format(format!("{}: checkpoint lacks {STATE_PREFIX}{name}", path.display()));
    let u = |name: &str| {
        map.get(&format!("{STATE_PREFIX}{name}"))
            .and_then(Tensor::as_u64)
            .and_then(|v| v.first().copied())
            .ok_or_else(|| missing(name))
    };
    let f = |name: &str| {
        map.get(&format!("{STATE_PREFIX}{name}"))
            .and_then(Tensor::as_f64)
            .and_then(|v| v.first().copied())
            .ok_or_else(|| missing(name))
    };
    let mut optimizer = AdamW::new(&model.params, f("weight_decay")?);
    optimizer.t = u("adam_t")?;
    for (prefix, moments) in [("m", &mut optimizer.m), ("v", &mut optimizer.v)] {
        for (name, _, t) in moments.tensors_mut() {
            let key = format!("{prefix}.{name}");
            let stored = map
                .get(&format!("{STATE_PREFIX}{key}"))
                .and_then(Tensor::as_f64)
                .filter(|s| s.len() == t.len())
                .ok_or_else(|| missing(&key))?;
            t.copy_from_slice(stored);
        }
    }
    let state = TrainState {
        step: u("step")?,
        seed: u("seed")?,
        optimizer,
        running_loss: f("running_loss")?,
    };
    Ok((model, state))
}

fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::file(path, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if let [step, lr, loss] = fields[..] {
            if let (Ok(step), Ok(lr), Ok(loss)) = (step.parse(), lr.parse(), loss.parse()) {
                rows.push(MetricRow { step, lr, loss });
            }
        }
    }
    Ok(rows)
}

struct MetricLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricLog {
    /// Opens the log, keeping only rows logged before `start` (for resumes).
    fn open(path: PathBuf, start: u64) -> Result<Self> {
        let kept = if start > 0 && path.exists() {
            read_metrics(&path)?.into_iter().filter(|r| r.step < start).collect()
        } else {
            Vec::new()
        };
        let file = File::create(&path).map_err(|e| Error::file(&path, e))?;
        let mut log = MetricLog {
            out: BufWriter::new(file),
            path,
        };
        writeln!(log.out, "step\tlr\tloss").map_err(|e| Error::file(&log.path, e))?;
        for row in kept {
            log.write(row)?;
        }
        Ok(log)
    }

    fn write(&mut self, row: MetricRow) -> Result<()> {
        writeln!(self.out, "{}\t{:e}\t{:.9}", row.step, row.lr, row.loss)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::file(&self.path, e))
    }
}

/// Trains `model` on `dataset` for `config.epochs` epochs. With `out_dir`,
/// checkpoints, the metric log and the final bundle are written there. With
/// `resume`, training continues from that checkpoint and reproduces the
/// uninterrupted run bit for bit.
pub fn train(
    model: StudentModel<f32>,
    dataset: &Dataset,
    segmenter: &Segmenter<'_>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    let (mut model, mut state) = match resume {
        Some(path) => {
            let (m, s) = load_checkpoint(path)?;
            if s.seed != config.seed {
                return Err(Error::Invalid(format!(
                    "checkpoint was written with seed {} but the run uses seed {}",
                    s.seed, config.seed
                )));
            }
            if m.config != model.config {
                return Err(Error::Shape("checkpoint model config differs from the given model".into()));
            }
            info!("resuming from {} at step {}", path.display(), s.step);
            (m, s)
        }
        None => {
            let optimizer = AdamW::new(&model.params, config.weight_decay);
            (
                model,
                TrainState {
                    step: 0,
                    seed: config.seed,
                    optimizer,
                    running_loss: 0.0,
                },
            )
        }
    };
    model.trainable = config.trainable;
    if segmenter.vocab().size() != model.config.vocab_size {
        return Err(Error::Shape(format!(
            "segmenter vocabulary has {} tokens but the model has {} rows",
            segmenter.vocab().size(),
            model.config.vocab_size
        )));
    }
    let target_dim = match config.target {
        TargetKind::Final => dataset.d,
        TargetKind::PreDense => dataset.d_pre,
    };
    if target_dim != model.config.d {
        return Err(Error::Shape(format!(
            "target vectors have dimension {target_dim} but the model outputs {}",
            model.config.d
        )));
    }

    let max_len = model.config.max_len;
    let make_batcher = |epoch: u64| {
        Batcher::new(dataset, segmenter, config.batch_size, max_len, config.target, config.seed, epoch)
    };
    let mut batcher = make_batcher(0)?;
    let per_epoch = batcher.num_batches() as u64;
    let total_steps = per_epoch * config.epochs;
    let mut batcher_epoch = 0;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let mut metrics = out_dir
        .map(|dir| MetricLog::open(dir.join(METRICS_FILE), state.step))
        .transpose()?;
    let mut log = Vec::new();
    let mut last_checkpoint = resume.map(Path::to_path_buf);

    info!(
        "training {} steps ({} epochs x {per_epoch} batches of {})",
        total_steps, config.epochs, config.batch_size
    );
    while state.step < total_steps {
        let step = state.step;
        let epoch = step / per_epoch;
        if epoch != batcher_epoch {
            batcher = make_batcher(epoch)?;
            batcher_epoch = epoch;
        }
        let batch = batcher.batch((step % per_epoch) as usize);
        let non_finite = |last: &Option<PathBuf>| Error::NonFiniteLoss {
            step,
            last_checkpoint: last.clone(),
        };
        let fwd = match model.forward(&batch.ids, &batch.mask, batch.seq_len, config.target) {
            Err(Error::NonFinite { .. }) => return Err(non_finite(&last_checkpoint)),
            other => other?,
        };
        let (loss, grad_s) = cosine_loss(&fwd.s_hat, &batch.targets, batch.target_dim)?;
        if !loss.is_finite() {
            return Err(non_finite(&last_checkpoint));
        }
        let mut grads = model.backward(&fwd, &grad_s);
        let norm = clip_grad_norm(&mut grads, config.max_grad_norm, model.trainable);
        let lr = lr_at(step, total_steps, config.lr_peak, config.warmup_ratio);
        state.optimizer.step(&mut model.params, &grads, lr, model.trainable);
        state.step += 1;
        state.running_loss += loss;

        let row = MetricRow { step, lr, loss };
        debug!("step {step} lr {lr:e} loss {loss:.6} grad_norm {norm:.4}");
        if let Some(m) = metrics.as_mut() {
            m.write(row)?;
        }
        log.push(row);

        if let Some(dir) = out_dir {
            if state.step % config.checkpoint_every == 0 || state.step == total_steps {
                let path = checkpoint_path(dir, state.step);
                save_checkpoint(&path, &model, &state)?;
                last_checkpoint = Some(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        model.to_bundle()?.save(dir.join(MODEL_FILE))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        total_steps,
        last_checkpoint,
    })
}

/// Mean cosine loss of `model` over the whole dataset.
pub fn evaluate_loss(
    model: &StudentModel<f32>,
    dataset: &Dataset,
    segmenter: &Segmenter<'_>,
    target: TargetKind,
    batch_size: usize,
) -> Result<f64> {
    let batcher = Batcher::new(dataset, segmenter, batch_size, model.config.max_len, target, 0, 0)?;
    let mut total = 0.0;
    for batch in batcher.iter() {
        let fwd = model.forward(&batch.ids, &batch.mask, batch.seq_len, target)?;
        let (loss, _) = cosine_loss(&fwd.s_hat, &batch.targets, batch.target_dim)?;
        total += loss * batch.rows as f64;
    }
    Ok(total / dataset.len() as f64)
}

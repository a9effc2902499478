//! Training loop, evaluation, checkpoints and the run log.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle::Device;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, TrainConfig};
use crate::data::{batch, synth_generate, Batch, Dataset};
use crate::decoder::{assemble_tube, SamplePredictions};
use crate::error::{Error, Result};
use crate::geometry::Tube;
use crate::losses::{loss_total, LossReport, SampleTarget};
use crate::metrics::{aggregate, MetricReport};
use crate::model::Grounder;
use crate::optim::{AdamW, AdamWConfig};

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Iteration {
        iteration: usize,
        epoch: usize,
        loss: LossReport,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        split: String,
        metrics: MetricReport,
        elapsed_s: f64,
    },
}

/// Append-only record of a run, optionally mirrored to a JSONL file.
#[derive(Debug, Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(file)),
        })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("run log", e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn losses(&self) -> impl Iterator<Item = &LossReport> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Iteration { loss, .. } => Some(loss),
            _ => None,
        })
    }

    /// `(epoch, metrics)` for one split.
    pub fn epoch_metrics<'a>(&'a self, split: &'a str) -> impl Iterator<Item = (usize, &'a MetricReport)> + 'a {
        self.records.iter().filter_map(move |r| match r {
            LogRecord::Epoch { epoch, split: s, metrics, .. } if s == split => Some((*epoch, metrics)),
            _ => None,
        })
    }

    /// First epoch (1-based) whose `Accu.@eta` on `split` reaches `target`.
    pub fn epochs_to_threshold(&self, split: &str, eta: f64, target: f64) -> Option<usize> {
        self.epoch_metrics(split)
            .find(|(_, m)| m.accuracy_at(eta).is_some_and(|a| a >= target))
            .map(|(e, _)| e)
    }
}

/// Training state that a checkpoint captures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: String,
    pub config_hash: String,
    pub iteration: usize,
    pub epoch: usize,
    /// Batches already consumed in `epoch`.
    pub cursor: usize,
}

pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIM_FILE: &str = "optim.safetensors";
pub const META_FILE: &str = "meta.json";

/// Build the dataset a data source describes.
pub fn load_source(config: &TrainConfig, source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Manifest { path } => Dataset::open(path),
        DataSource::Synth(spec) => synth_generate(&config.data.apply(spec)),
    }
}

pub fn targets(dataset: &Dataset, indices: &[usize]) -> Vec<SampleTarget> {
    indices
        .iter()
        .map(|&i| {
            let s = dataset.sample(i);
            SampleTarget {
                tube: s.gt_tube.clone(),
                trimmed: s.trimmed,
                num_frames: s.num_frames(),
                num_words: dataset.tokens(i).len(),
                entities: s.entity_spans.iter().map(|e| (e.word_start, e.word_end)).collect(),
            }
        })
        .collect()
}

pub struct Trainer {
    pub model: Grounder,
    optim: AdamW,
    train: Dataset,
    val: Option<Dataset>,
    iteration: usize,
    epoch: usize,
    cursor: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(config: &TrainConfig, train: Dataset, val: Option<Dataset>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        if let Some(v) = &val {
            if v.manifest.vocab != train.manifest.vocab {
                return Err(Error::Invalid("train and val vocabularies differ".into()));
            }
        }
        let model = Grounder::new(config, train.manifest.vocab.len(), &Device::Cpu)?;
        Ok(Self {
            model,
            optim: AdamW::new(optim_config(config)),
            train,
            val,
            iteration: 0,
            epoch: 0,
            cursor: 0,
            started: Instant::now(),
        })
    }

    /// Datasets taken from `config.data`.
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        let train = load_source(config, &config.data.train)?;
        let val = config.data.val.as_ref().map(|s| load_source(config, s)).transpose()?;
        Self::new(config, train, val)
    }

    pub fn config(&self) -> &TrainConfig {
        self.model.config()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn val_set(&self) -> Option<&Dataset> {
        self.val.as_ref()
    }

    /// Sample order of `epoch`; depends only on the seed and the epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let seed = self.config().train.seed ^ 0x5eed_da7a ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.config().train.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// One optimizer step on the given training samples.
    pub fn step(&mut self, indices: &[usize]) -> Result<(LossReport, f64)> {
        let b = batch(&self.train, indices, self.model.device())?;
        let (loss, report) = self.loss(&b, indices)?;
        let grads = loss.backward()?;
        let info = self.optim.step(self.model.store(), &grads)?;
        self.iteration += 1;
        Ok((report, info.grad_norm))
    }

    fn loss(&self, b: &Batch, indices: &[usize]) -> Result<(candle::Tensor, LossReport)> {
        let out = self.model.forward(b)?;
        let cfg = self.config();
        let (loss, report, _) = loss_total(&out.loss_inputs(), &targets(&self.train, indices), &cfg.loss, cfg.model.ecl)?;
        Ok((loss, report))
    }

    /// Loss of the next scheduled batch, without updating anything.
    pub fn peek_next_loss(&self) -> Result<LossReport> {
        let batches = self.batches(self.epoch);
        let idx = &batches[self.cursor.min(batches.len() - 1)];
        let b = batch(&self.train, idx, self.model.device())?;
        Ok(self.loss(&b, idx)?.1)
    }

    /// Run until the end of the current epoch, or `max_iterations`.
    /// Returns `false` when the iteration budget is exhausted.
    pub fn train_epoch(&mut self, log: &mut RunLog) -> Result<bool> {
        let batches = self.batches(self.epoch);
        let budget = self.config().train.max_iterations;
        while self.cursor < batches.len() {
            if budget.is_some_and(|m| self.iteration >= m) {
                return Ok(false);
            }
            let idx = batches[self.cursor].clone();
            let (loss, grad_norm) = self.step(&idx)?;
            log::debug!("iter {} loss {:.4}", self.iteration, loss.total);
            log.push(LogRecord::Iteration {
                iteration: self.iteration,
                epoch: self.epoch + 1,
                loss,
                grad_norm,
            })?;
            self.cursor += 1;
        }
        self.epoch += 1;
        self.cursor = 0;
        Ok(true)
    }

    fn log_epoch_metrics(&self, log: &mut RunLog) -> Result<()> {
        let elapsed_s = self.started.elapsed().as_secs_f64();
        if self.config().train.eval_train {
            let metrics = self.evaluate(&self.train)?;
            log.push(LogRecord::Epoch { epoch: self.epoch, split: "train".into(), metrics, elapsed_s })?;
        }
        if let Some(val) = &self.val {
            let metrics = self.evaluate(val)?;
            log.push(LogRecord::Epoch { epoch: self.epoch, split: "val".into(), metrics, elapsed_s })?;
        }
        Ok(())
    }

    /// Train for the configured epochs (or iteration budget), evaluating after each epoch.
    pub fn run(&mut self, log: &mut RunLog) -> Result<()> {
        while self.epoch < self.config().train.epochs {
            let finished = self.train_epoch(log)?;
            if finished {
                self.log_epoch_metrics(log)?;
            } else {
                break;
            }
        }
        Ok(())
    }

    /// Predicted and ground-truth tubes for every sample.
    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<(Tube, Tube)>> {
        predict_tubes(&self.model, dataset, self.config().train.batch_size)
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<MetricReport> {
        aggregate(&self.predict(dataset)?, &self.config().eval)
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.store().save(dir.join(PARAMS_FILE))?;
        self.optim.save(dir.join(OPTIM_FILE))?;
        let meta = CheckpointMeta {
            config: self.config().to_toml_string()?,
            config_hash: self.config().hash(),
            iteration: self.iteration,
            epoch: self.epoch,
            cursor: self.cursor,
        };
        let path = dir.join(META_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
        Ok(dir.to_path_buf())
    }

    /// Restore parameters, optimizer state and schedule position.
    pub fn load_checkpoint(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let meta = read_meta(dir)?;
        if meta.config_hash != self.config().hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match {}",
                meta.config_hash,
                self.config().hash()
            )));
        }
        self.model.store().load(dir.join(PARAMS_FILE))?;
        self.optim = AdamW::load(optim_config(self.config()), dir.join(OPTIM_FILE), self.model.store())?;
        self.iteration = meta.iteration;
        self.epoch = meta.epoch;
        self.cursor = meta.cursor;
        Ok(())
    }
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Config stored inside a checkpoint.
pub fn checkpoint_config(dir: impl AsRef<Path>) -> Result<TrainConfig> {
    TrainConfig::from_toml_str(&read_meta(dir.as_ref())?.config)
}

fn optim_config(config: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        lr: config.train.lr,
        weight_decay: config.train.weight_decay,
        grad_clip: config.train.grad_clip,
        ..Default::default()
    }
}

pub fn predict_tubes(model: &Grounder, dataset: &Dataset, batch_size: usize) -> Result<Vec<(Tube, Tube)>> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut pairs = Vec::with_capacity(dataset.len());
    for chunk in all.chunks(batch_size.max(1)) {
        let b = batch(dataset, chunk, model.device())?;
        let out = model.forward(&b)?;
        for (row, &i) in chunk.iter().enumerate() {
            let s = dataset.sample(i);
            let p = SamplePredictions::from_batch(&out.predictions, row, s.num_frames())?;
            pairs.push((assemble_tube(&p, s.trimmed)?.tube, s.gt_tube.clone()));
        }
    }
    Ok(pairs)
}

/// Metrics of ground truth against itself; every score is 1.
pub fn evaluate_oracle(dataset: &Dataset, config: &TrainConfig) -> Result<MetricReport> {
    let pairs: Vec<(Tube, Tube)> = dataset.manifest.samples.iter().map(|s| (s.gt_tube.clone(), s.gt_tube.clone())).collect();
    aggregate(&pairs, &config.eval)
}

/// One predicted tube, keyed by video id; the line format of prediction files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub tube: Tube,
}

pub fn write_predictions(dataset: &Dataset, tubes: &[(Tube, Tube)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (s, (pred, _)) in dataset.manifest.samples.iter().zip(tubes) {
        let rec = PredictionRecord {
            video_id: s.video_id.clone(),
            tube: pred.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Metrics of a prediction file against a manifest's ground truth. Every
/// manifest sample needs exactly one prediction.
pub fn score_predictions(
    manifest: &crate::data::DatasetManifest,
    predictions: &[PredictionRecord],
    config: &crate::metrics::MetricConfig,
) -> Result<MetricReport> {
    let mut by_id = std::collections::HashMap::new();
    for p in predictions {
        if by_id.insert(p.video_id.as_str(), &p.tube).is_some() {
            return Err(Error::validation(&p.video_id, "video_id", "duplicate prediction"));
        }
    }
    let pairs = manifest
        .samples
        .iter()
        .map(|s| match by_id.remove(s.video_id.as_str()) {
            Some(t) => Ok((t.clone(), s.gt_tube.clone())),
            None => Err(Error::validation(&s.video_id, "video_id", "no prediction for sample")),
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::validation(*extra, "video_id", "prediction for a sample not in the manifest"));
    }
    aggregate(&pairs, config)
}

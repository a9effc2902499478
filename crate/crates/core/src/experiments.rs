//! Experiment runners: content-aware vs content-agnostic convergence, the
//! query–word alignment heatmap, and T / resolution sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, TrainConfig};
use crate::data::{batch, Dataset};
use crate::decoder::{assemble_tube, SamplePredictions};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::Grounder;
use crate::plot::Series;
use crate::train::{RunLog, Trainer};

/// Split the per-epoch accuracy curve is measured on: `val` when configured.
pub fn curve_split(config: &TrainConfig) -> &'static str {
    if config.data.val.is_some() {
        "val"
    } else {
        "train"
    }
}

/// One finished training run with the series an experiment plots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub loss: Series,
    pub accuracy: Series,
    pub epochs_to_threshold: Option<usize>,
    pub final_metrics: Option<MetricReport>,
}

/// Train `config` to completion and summarize it.
pub fn summarize_run(label: &str, config: &TrainConfig, eta: f64, target: f64) -> Result<(RunSummary, Trainer)> {
    let mut config = config.clone();
    let split = curve_split(&config);
    if split == "train" {
        config.train.eval_train = true;
    }
    let mut trainer = Trainer::from_config(&config)?;
    let mut log = RunLog::in_memory();
    trainer.run(&mut log)?;
    let mut loss = Series::new(label);
    for (i, l) in log.losses().enumerate() {
        loss.push((i + 1) as f64, l.total);
    }
    let mut accuracy = Series::new(label);
    for (epoch, m) in log.epoch_metrics(split) {
        accuracy.push(epoch as f64, m.accuracy_at(eta).unwrap_or(0.0));
    }
    let final_metrics = log.epoch_metrics(split).last().map(|(_, m)| m.clone());
    let summary = RunSummary {
        label: label.to_string(),
        seed: config.train.seed,
        loss,
        accuracy,
        epochs_to_threshold: log.epochs_to_threshold(split, eta, target),
        final_metrics,
    };
    Ok((summary, trainer))
}

/// Twin runs differing only in `model.cqg`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub eta: f64,
    pub target: f64,
    pub content_aware: RunSummary,
    pub content_agnostic: RunSummary,
}

impl ConvergenceRecord {
    pub fn loss_series(&self) -> [Series; 2] {
        [self.content_aware.loss.clone(), self.content_agnostic.loss.clone()]
    }

    pub fn accuracy_series(&self) -> [Series; 2] {
        [self.content_aware.accuracy.clone(), self.content_agnostic.accuracy.clone()]
    }
}

pub const CONTENT_AWARE: &str = "content_aware";
pub const CONTENT_AGNOSTIC: &str = "content_agnostic";

pub fn convergence_experiment(config: &TrainConfig, eta: f64, target: f64) -> Result<ConvergenceRecord> {
    let mut on = config.clone();
    on.model.cqg = true;
    let mut off = config.clone();
    off.model.cqg = false;
    let (content_aware, _) = summarize_run(CONTENT_AWARE, &on, eta, target)?;
    let (content_agnostic, _) = summarize_run(CONTENT_AGNOSTIC, &off, eta, target)?;
    Ok(ConvergenceRecord {
        eta,
        target,
        content_aware,
        content_agnostic,
    })
}

/// Median of epochs-to-threshold, counting a run that never reached the
/// target as `never` epochs.
pub fn median_epochs(values: &[Option<usize>], never: usize) -> f64 {
    let v: Vec<f64> = values.iter().map(|e| e.unwrap_or(never) as f64).collect();
    median(&v)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Query × word cosine similarities of one sample at one frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Heatmap {
    pub video_id: String,
    pub frame: usize,
    pub words: Vec<String>,
    /// `N×L`
    pub similarity: Vec<Vec<f64>>,
    /// Most confident query on `frame`.
    pub selected_query: usize,
    /// Word indices covered by any entity span.
    pub entity_words: Vec<usize>,
}

impl Heatmap {
    pub fn selected_row(&self) -> &[f64] {
        &self.similarity[self.selected_query]
    }

    /// Highest-similarity word of the selected query; lowest index on ties.
    pub fn top_word(&self) -> usize {
        crate::decoder::argmax(self.selected_row())
    }

    pub fn top_word_in_span(&self) -> bool {
        self.entity_words.contains(&self.top_word())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Heatmaps for the given samples, read at the middle frame of each
/// ground-truth span from the entity-anchor features the contrastive loss
/// uses.
pub fn alignment_heatmaps(model: &Grounder, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Heatmap>> {
    let mut maps = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(model.config().train.batch_size.max(1)) {
        let b = batch(dataset, chunk, model.device())?;
        let out = model.forward(&b)?;
        for (row, &i) in chunk.iter().enumerate() {
            let s = dataset.sample(i);
            let span = s.gt_tube.span();
            let frame = (span.start_frame + span.end_frame) / 2;
            let pred = SamplePredictions::from_batch(&out.predictions, row, s.num_frames())?;
            let selected_query = assemble_tube(&pred, s.trimmed)?.selected[frame];
            let anchors = out.anchors.get(row)?.get(frame)?.to_vec2::<f64>()?;
            let len = dataset.tokens(i).len();
            let words = out.words.get(row)?.narrow(0, 0, len)?.to_vec2::<f64>()?;
            let similarity = anchors
                .iter()
                .map(|a| words.iter().map(|w| cosine(a, w)).collect())
                .collect();
            let mut entity_words: Vec<usize> = s.entity_spans.iter().flat_map(|e| e.words()).collect();
            entity_words.sort_unstable();
            entity_words.dedup();
            maps.push(Heatmap {
                video_id: s.video_id.clone(),
                frame,
                words: s.words(),
                similarity,
                selected_query,
                entity_words,
            });
        }
    }
    Ok(maps)
}

pub fn alignment_heatmap(model: &Grounder, dataset: &Dataset, index: usize) -> Result<Heatmap> {
    if index >= dataset.len() {
        return Err(Error::Invalid(format!("sample {index} out of range ({} samples)", dataset.len())));
    }
    Ok(alignment_heatmaps(model, dataset, &[index])?.remove(0))
}

/// How often the selected query's top word lies in an entity span, against
/// the rate of picking a word uniformly at random.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub samples: usize,
    pub top_word_in_span: f64,
    pub chance: f64,
}

pub fn alignment_summary(maps: &[Heatmap]) -> AlignmentSummary {
    let n = maps.len().max(1) as f64;
    AlignmentSummary {
        samples: maps.len(),
        top_word_in_span: maps.iter().filter(|m| m.top_word_in_span()).count() as f64 / n,
        chance: maps
            .iter()
            .map(|m| m.entity_words.len() as f64 / m.words.len().max(1) as f64)
            .sum::<f64>()
            / n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Frames,
    Resolution,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" | "frames" | "num_frames" => Ok(Self::Frames),
            "resolution" | "res" => Ok(Self::Resolution),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (expected frames or resolution)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub num_frames: usize,
    pub resolution: usize,
    pub metrics: MetricReport,
    pub seconds: f64,
}

/// Short train + evaluate per grid point. Synthetic data only, since the
/// axis changes how videos are generated.
pub fn sweep(config: &TrainConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<SweepRow>> {
    let synthetic = |s: &DataSource| matches!(s, DataSource::Synth(_));
    if !synthetic(&config.data.train) || config.data.val.as_ref().is_some_and(|v| !synthetic(v)) {
        return Err(Error::Config("sweep needs synthetic data sources".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = config.clone();
        match axis {
            SweepAxis::Frames => {
                c.data.num_frames = v;
                c.data.untrimmed_num_frames = v;
            }
            SweepAxis::Resolution => c.data.resolution = v,
        }
        c.validate()?;
        let started = Instant::now();
        let mut trainer = Trainer::from_config(&c)?;
        trainer.run(&mut RunLog::in_memory())?;
        let metrics = match trainer.val_set() {
            Some(val) => trainer.evaluate(val)?,
            None => trainer.evaluate(trainer.train_set())?,
        };
        let num_frames = trainer.train_set().sample(0).num_frames();
        rows.push(SweepRow {
            num_frames,
            resolution: c.data.resolution,
            metrics,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// CSV with one row per grid point.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("num_frames,resolution");
    let first = rows.first();
    for a in first.map_or(&[][..], |r| &r.metrics.accuracy[..]) {
        let _ = write!(out, ",accu@{}", a.threshold);
    }
    out.push_str(",m_iou,m_tiou,m_viou");
    for v in first.map_or(&[][..], |r| &r.metrics.viou_at[..]) {
        let _ = write!(out, ",viou@{}", v.threshold);
    }
    out.push_str(",seconds\n");
    for r in rows {
        let _ = write!(out, "{},{}", r.num_frames, r.resolution);
        for a in &r.metrics.accuracy {
            let _ = write!(out, ",{:.6}", a.value);
        }
        let _ = write!(out, ",{:.6},{:.6},{:.6}", r.metrics.m_iou, r.metrics.m_tiou, r.metrics.m_viou);
        for v in &r.metrics.viou_at {
            let _ = write!(out, ",{:.6}", v.value);
        }
        let _ = writeln!(out, ",{:.3}", r.seconds);
    }
    out
}

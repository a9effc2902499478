//! Command-line interface. The binary only parses arguments and maps errors
//! to exit codes; every subcommand lives here.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{DataSource, TrainConfig};
use crate::data::{load_manifest, Dataset};
use crate::error::{Error, Result};
use crate::experiments::{
    alignment_heatmaps, alignment_summary, convergence_experiment, median_epochs, sweep, sweep_table, SweepAxis,
};
use crate::plot::{matrix_csv, render_matrix, render_series, save_png, series_csv, write_text, Series};
use crate::train::{
    checkpoint_config, evaluate_oracle, load_source, read_meta, read_predictions, score_predictions,
    write_predictions, RunLog, Trainer,
};

#[derive(Debug, Parser)]
#[command(name = "vidground", version, about = "Video referring-expression grounding with content-aware queries")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; defaults apply to every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write the run log, a checkpoint and final metrics.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Score ground truth against itself instead of running the model.
        #[arg(long)]
        oracle: bool,
    },
    /// Content-aware vs content-agnostic convergence comparison.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at `train.seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long, default_value_t = 0.8)]
        target: f64,
    },
    /// Query-word cosine similarity of a trained checkpoint.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Train and evaluate over a grid of frame counts or resolutions.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "frames")]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Write the configured synthetic splits as manifests plus frame files.
    Synth(Common),
    /// Validate a manifest (and its frame files) or a config file.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a prediction file against a manifest.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Summarize a checkpoint directory, manifest or config file.
    Inspect {
        #[command(flatten)]
        common: Common,
        path: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => train(&c),
        Command::Eval { common, checkpoint, split, oracle } => eval(&common, checkpoint.as_deref(), &split, oracle),
        Command::Converge { common, seeds, eta, target } => converge(&common, seeds, eta, target),
        Command::Heatmap { common, checkpoint, split, sample } => heatmap(&common, &checkpoint, &split, sample),
        Command::Sweep { common, axis, values } => run_sweep(&common, &axis, &values),
        Command::Synth(c) => synth(&c),
        Command::Validate { common, manifest } => validate(&common, manifest.as_deref()),
        Command::Score { common, predictions, manifest } => score(&common, &predictions, &manifest),
        Command::Inspect { common: _, path } => inspect(&path),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn json_out(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    mkdir(&c.out)?;
    write_text(c.out.join("config.toml"), &cfg.to_toml_string()?)?;
    let mut trainer = Trainer::from_config(&cfg)?;
    let mut log = RunLog::to_file(c.out.join("run_log.jsonl"))?;
    trainer.run(&mut log)?;
    trainer.save_checkpoint(c.out.join("checkpoint"))?;
    let (split, set) = match trainer.val_set() {
        Some(v) => ("val", v),
        None => ("train", trainer.train_set()),
    };
    let metrics = trainer.evaluate(set)?;
    json_out(&c.out.join(format!("metrics_{split}.json")), &metrics)?;
    println!("iterations={}", trainer.iteration());
    print!("{}", metrics.to_key_values());
    Ok(())
}

fn split_source<'a>(cfg: &'a TrainConfig, split: &str) -> Result<&'a DataSource> {
    match split {
        "train" => Ok(&cfg.data.train),
        "val" => cfg
            .data
            .val
            .as_ref()
            .ok_or_else(|| Error::Config("no validation split configured".into())),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

/// Config of a checkpoint, with the data section replaced when `--config` is given.
fn checkpoint_with_data(c: &Common, checkpoint: &Path) -> Result<TrainConfig> {
    let mut cfg = checkpoint_config(checkpoint)?;
    if c.config.is_some() {
        cfg.data = c.load()?.data;
    }
    Ok(cfg)
}

fn restore(checkpoint: &Path) -> Result<Trainer> {
    let cfg = checkpoint_config(checkpoint)?;
    let mut trainer = Trainer::from_config(&cfg)?;
    trainer.load_checkpoint(checkpoint)?;
    Ok(trainer)
}

fn eval(c: &Common, checkpoint: Option<&Path>, split: &str, oracle: bool) -> Result<()> {
    let cfg = match checkpoint {
        Some(dir) => checkpoint_with_data(c, dir)?,
        None => c.load()?,
    };
    let data = load_source(&cfg, split_source(&cfg, split)?)?;
    let metrics = if oracle {
        evaluate_oracle(&data, &cfg)?
    } else {
        let dir = checkpoint.ok_or_else(|| Error::Config("eval needs --checkpoint unless --oracle".into()))?;
        let trainer = restore(dir)?;
        let tubes = crate::train::predict_tubes(&trainer.model, &data, cfg.train.batch_size)?;
        mkdir(&c.out)?;
        write_predictions(&data, &tubes, c.out.join(format!("predictions_{split}.jsonl")))?;
        crate::metrics::aggregate(&tubes, &cfg.eval)?
    };
    mkdir(&c.out)?;
    json_out(&c.out.join(format!("metrics_{split}.json")), &metrics)?;
    print!("{}", metrics.to_key_values());
    Ok(())
}

fn converge(c: &Common, seeds: u64, eta: f64, target: f64) -> Result<()> {
    let base = c.load()?;
    mkdir(&c.out)?;
    let (mut loss, mut acc) = (Vec::<Series>::new(), Vec::<Series>::new());
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for k in 0..seeds.max(1) {
        let mut cfg = base.clone();
        cfg.train.seed = base.train.seed + k;
        let rec = convergence_experiment(&cfg, eta, target)?;
        json_out(&c.out.join(format!("convergence_seed{}.json", cfg.train.seed)), &rec)?;
        for mut s in rec.loss_series() {
            s.label = format!("{}_seed{}", s.label, cfg.train.seed);
            loss.push(s);
        }
        for mut s in rec.accuracy_series() {
            s.label = format!("{}_seed{}", s.label, cfg.train.seed);
            acc.push(s);
        }
        println!(
            "seed={} content_aware_epochs={:?} content_agnostic_epochs={:?}",
            cfg.train.seed, rec.content_aware.epochs_to_threshold, rec.content_agnostic.epochs_to_threshold
        );
        on.push(rec.content_aware.epochs_to_threshold);
        off.push(rec.content_agnostic.epochs_to_threshold);
    }
    write_text(c.out.join("loss.csv"), &series_csv(&loss))?;
    write_text(c.out.join("accuracy.csv"), &series_csv(&acc))?;
    save_png(&render_series(&loss, 640, 400), c.out.join("loss.png"))?;
    save_png(&render_series(&acc, 640, 400), c.out.join("accuracy.png"))?;
    let never = base.train.epochs + 1;
    println!("median_content_aware={}", median_epochs(&on, never));
    println!("median_content_agnostic={}", median_epochs(&off, never));
    Ok(())
}

fn heatmap(c: &Common, checkpoint: &Path, split: &str, sample: usize) -> Result<()> {
    let cfg = checkpoint_with_data(c, checkpoint)?;
    let data = load_source(&cfg, split_source(&cfg, split)?)?;
    let trainer = restore(checkpoint)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let maps = alignment_heatmaps(&trainer.model, &data, &all)?;
    let map = maps
        .get(sample)
        .ok_or_else(|| Error::Invalid(format!("sample {sample} out of range ({} samples)", data.len())))?;
    mkdir(&c.out)?;
    let rows: Vec<String> = (0..map.similarity.len()).map(|i| format!("q{i}")).collect();
    write_text(c.out.join("heatmap.csv"), &matrix_csv(&rows, &map.words, &map.similarity))?;
    save_png(&render_matrix(&map.similarity, -1.0, 1.0, 16), c.out.join("heatmap.png"))?;
    json_out(&c.out.join("heatmap.json"), map)?;
    let summary = alignment_summary(&maps);
    json_out(&c.out.join("alignment.json"), &summary)?;
    println!("video_id={}", map.video_id);
    println!("selected_query={}", map.selected_query);
    println!("top_word={}", map.words[map.top_word()]);
    println!("top_word_in_span_rate={:.6}", summary.top_word_in_span);
    println!("chance={:.6}", summary.chance);
    Ok(())
}

fn run_sweep(c: &Common, axis: &str, values: &[usize]) -> Result<()> {
    let cfg = c.load()?;
    let axis: SweepAxis = axis.parse()?;
    let rows = sweep(&cfg, axis, values)?;
    let table = sweep_table(&rows);
    write_text(c.out.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn synth(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let mut splits = vec![("train", &cfg.data.train)];
    if let Some(v) = &cfg.data.val {
        splits.push(("val", v));
    }
    for (name, source) in splits {
        let DataSource::Synth(spec) = source else {
            return Err(Error::Config(format!("{name} split is not synthetic")));
        };
        let mut spec = cfg.data.apply(spec);
        if let Some(s) = c.seed {
            spec.seed = s;
        }
        let data = crate::data::synth_generate(&spec)?;
        let path = data.write(c.out.join(name))?;
        println!("{name}={} samples={}", path.display(), data.len());
    }
    Ok(())
}

fn validate(c: &Common, manifest: Option<&Path>) -> Result<()> {
    if manifest.is_none() && c.config.is_none() {
        return Err(Error::Config("nothing to validate: pass --manifest and/or --config".into()));
    }
    if c.config.is_some() {
        c.load()?;
        println!("config ok");
    }
    if let Some(path) = manifest {
        let m = load_manifest(path)?;
        Dataset::load(m.clone())?;
        println!("manifest ok: {} samples", m.samples.len());
    }
    Ok(())
}

fn score(c: &Common, predictions: &Path, manifest: &Path) -> Result<()> {
    let cfg = c.load()?;
    let m = load_manifest(manifest)?;
    let metrics = score_predictions(&m, &read_predictions(predictions)?, &cfg.eval)?;
    print!("{}", metrics.to_key_values());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() && path.join(crate::train::META_FILE).is_file() {
        let meta = read_meta(path)?;
        let trainer = restore(path)?;
        let store = trainer.model.store();
        println!("checkpoint={}", path.display());
        println!("iteration={} epoch={} cursor={}", meta.iteration, meta.epoch, meta.cursor);
        println!("config_hash={}", meta.config_hash);
        println!("parameters={} scalars={}", store.len(), store.num_scalars());
        let bank = trainer.model.query_generator().bank().boxes_f64()?;
        for (i, b) in bank.iter().enumerate() {
            println!("region{i}={:.4},{:.4},{:.4},{:.4}", b.cx, b.cy, b.w, b.h);
        }
        return Ok(());
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let cfg = TrainConfig::load(path)?;
            print!("{}", cfg.to_toml_string()?);
            println!("# hash {}", cfg.hash());
        }
        _ => {
            let m = load_manifest(path)?;
            let trimmed = m.samples.iter().filter(|s| s.trimmed).count();
            println!("split={} fps={} vocab={}", m.split, m.fps, m.vocab.len());
            println!("samples={} trimmed={}", m.samples.len(), trimmed);
            for s in m.samples.iter().take(5) {
                println!("{} frames={} span={:?} \"{}\"", s.video_id, s.num_frames(), s.gt_tube.span(), s.sentence);
            }
        }
    }
    Ok(())
}

//! Line-delimited dataset manifests.
//!
//! Line 1 is a header record (schema name, version, split, fps, vocabulary);
//! every following non-empty line is one [`GroundingSample`]. Frame tensors are
//! stored next to the manifest and referenced by relative path.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::tokenize::{split_words, Vocab};
use crate::error::{Error, Result};
use crate::geometry::{TemporalSpan, Tube};

pub const SCHEMA_NAME: &str = "vidground.manifest";
pub const SCHEMA_VERSION: u32 = 1;

/// Tensor names inside frame files.
pub const PIXELS_TENSOR: &str = "frames";
pub const FEATURES_TENSOR: &str = "features";

/// Inclusive token range naming the grounded object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub word_start: usize,
    pub word_end: usize,
    pub target_id: String,
}

impl EntitySpan {
    pub fn words(&self) -> std::ops::RangeInclusive<usize> {
        self.word_start..=self.word_end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameSource {
    /// `u8` tensor `T×3×H×W` stored under [`PIXELS_TENSOR`].
    Raw {
        path: PathBuf,
        num_frames: usize,
        height: usize,
        width: usize,
    },
    /// Float tensor `T×C×H×W` stored under [`FEATURES_TENSOR`].
    Features {
        path: PathBuf,
        num_frames: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl FrameSource {
    pub fn path(&self) -> &Path {
        match self {
            FrameSource::Raw { path, .. } | FrameSource::Features { path, .. } => path,
        }
    }

    pub fn num_frames(&self) -> usize {
        match self {
            FrameSource::Raw { num_frames, .. } | FrameSource::Features { num_frames, .. } => {
                *num_frames
            }
        }
    }

    /// Expected tensor shape in the frame file.
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            FrameSource::Raw {
                num_frames,
                height,
                width,
                ..
            } => vec![num_frames, 3, height, width],
            FrameSource::Features {
                num_frames,
                channels,
                height,
                width,
                ..
            } => vec![num_frames, channels, height, width],
        }
    }
}

/// One video–sentence pair with its ground-truth tube and region-phrase spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub video_id: String,
    pub frames: FrameSource,
    pub sentence: String,
    pub target_id: String,
    #[serde(rename = "tube")]
    pub gt_tube: Tube,
    #[serde(rename = "entities", default)]
    pub entity_spans: Vec<EntitySpan>,
    /// Trimmed videos show the target in every frame; no temporal localization.
    pub trimmed: bool,
}

impl GroundingSample {
    pub fn words(&self) -> Vec<String> {
        split_words(&self.sentence)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.num_frames()
    }

    /// Check every record-level invariant against the vocabulary.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let id = self.video_id.as_str();
        if id.is_empty() {
            return Err(Error::validation("<unnamed>", "video_id", "empty video id"));
        }
        let shape = self.frames.shape();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::validation(id, "frames", format!("zero-sized frame shape {shape:?}")));
        }
        if self.frames.path().as_os_str().is_empty() {
            return Err(Error::validation(id, "frames.path", "empty path"));
        }
        let num_frames = self.num_frames();

        let words = self.words();
        if words.is_empty() {
            return Err(Error::validation(id, "sentence", "sentence has no tokens"));
        }
        if let Some(w) = words.iter().find(|w| !vocab.contains(w)) {
            return Err(Error::validation(id, "sentence", format!("token `{w}` missing from vocabulary")));
        }

        if self.target_id.is_empty() {
            return Err(Error::validation(id, "target_id", "empty target id"));
        }
        let span = self.gt_tube.span();
        if !span.fits_within(num_frames) {
            return Err(Error::validation(
                id,
                "tube",
                format!("span ends at frame {} but video has {num_frames} frames", span.end_frame),
            ));
        }
        if self.trimmed && span != TemporalSpan::full(num_frames)? {
            return Err(Error::validation(
                id,
                "trimmed",
                format!("trimmed sample must span all {num_frames} frames"),
            ));
        }
        for (t, b) in self.gt_tube.iter() {
            let in_unit = [b.cx, b.cy, b.w, b.h].iter().all(|v| (0.0..=1.0).contains(v));
            if !in_unit || b.is_degenerate() {
                return Err(Error::validation(
                    id,
                    "tube.boxes",
                    format!("box at frame {t} is not a non-degenerate normalized box: {b:?}"),
                ));
            }
        }
        for (k, e) in self.entity_spans.iter().enumerate() {
            if e.word_start > e.word_end || e.word_end >= words.len() {
                return Err(Error::validation(
                    id,
                    format!("entities[{k}]"),
                    format!(
                        "span {}..={} invalid for a sentence of {} tokens",
                        e.word_start,
                        e.word_end,
                        words.len()
                    ),
                ));
            }
            if e.target_id != self.target_id {
                return Err(Error::validation(
                    id,
                    format!("entities[{k}].target_id"),
                    format!("`{}` does not resolve to tube `{}`", e.target_id, self.target_id),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    split: String,
    fps: f64,
    vocab: Vocab,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub fps: f64,
    pub vocab: Vocab,
    pub samples: Vec<GroundingSample>,
    /// Directory frame paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::validation("<header>", "fps", format!("fps must be positive, got {}", self.fps)));
        }
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            s.validate(&self.vocab)?;
            if !seen.insert(s.video_id.as_str()) {
                return Err(Error::validation(&s.video_id, "video_id", "duplicate video id"));
            }
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate), and also checks every frame file exists.
    pub fn validate_files(&self) -> Result<()> {
        self.validate()?;
        for s in &self.samples {
            let p = self.root.join(s.frames.path());
            if !p.is_file() {
                return Err(Error::validation(
                    &s.video_id,
                    "frames.path",
                    format!("frame file {} not found", p.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn sample(&self, video_id: &str) -> Option<&GroundingSample> {
        self.samples.iter().find(|s| s.video_id == video_id)
    }

    pub fn frame_path(&self, sample: &GroundingSample) -> PathBuf {
        self.root.join(sample.frames.path())
    }

    /// Read one sample's frame tensor from disk, checking its shape.
    pub fn load_frames(&self, sample: &GroundingSample) -> Result<Tensor> {
        let path = self.frame_path(sample);
        let mut tensors = candle::safetensors::load(&path, &Device::Cpu)?;
        let (name, dtype_ok): (&str, fn(DType) -> bool) = match sample.frames {
            FrameSource::Raw { .. } => (PIXELS_TENSOR, |d| d == DType::U8),
            FrameSource::Features { .. } => (FEATURES_TENSOR, |d| d.is_float()),
        };
        let t = tensors.remove(name).ok_or_else(|| {
            Error::validation(&sample.video_id, "frames.path", format!("{} has no `{name}` tensor", path.display()))
        })?;
        if t.dims() != sample.frames.shape().as_slice() || !dtype_ok(t.dtype()) {
            return Err(Error::validation(
                &sample.video_id,
                "frames",
                format!(
                    "frame file holds {:?} {:?}, expected shape {:?}",
                    t.dtype(),
                    t.dims(),
                    sample.frames.shape()
                ),
            ));
        }
        Ok(t)
    }
}

/// Parse and validate a manifest. Frame files must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(BufReader::new(file), root)?;
    manifest.validate_files()?;
    Ok(manifest)
}

/// Parse a manifest from any reader and check record invariants (not files).
pub fn parse_manifest(reader: impl BufRead, root: PathBuf) -> Result<DatasetManifest> {
    let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
        Ok(l) => !l.trim().is_empty(),
        Err(_) => true,
    });
    let header_line = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::io(&root, e))?,
        None => return Err(Error::validation("<header>", "schema", "empty manifest")),
    };
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::validation("<header>", "header", e.to_string()))?;
    if header.schema != SCHEMA_NAME {
        return Err(Error::validation("<header>", "schema", format!("unknown schema `{}`", header.schema)));
    }
    if header.version != SCHEMA_VERSION {
        return Err(Error::validation(
            "<header>",
            "version",
            format!("unsupported schema version {} (expected {SCHEMA_VERSION})", header.version),
        ));
    }

    let mut samples = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::io(&root, e))?;
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
            Error::validation(format!("<line {}>", lineno + 1), "record", e.to_string())
        })?;
        let id = value
            .get("video_id")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("<line {}>", lineno + 1));
        let sample: GroundingSample =
            serde_json::from_value(value).map_err(|e| Error::validation(&id, "record", e.to_string()))?;
        samples.push(sample);
    }

    let manifest = DatasetManifest {
        split: header.split,
        fps: header.fps,
        vocab: header.vocab,
        samples,
        root,
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, mut out: impl Write) -> Result<()> {
    let header = Header {
        schema: SCHEMA_NAME.to_string(),
        version: SCHEMA_VERSION,
        split: manifest.split.clone(),
        fps: manifest.fps,
        vocab: manifest.vocab.clone(),
    };
    let io = |e| Error::io("<manifest>", e);
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for s in &manifest.samples {
        writeln!(out, "{}", serde_json::to_string(s)?).map_err(io)?;
    }
    Ok(())
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_manifest(manifest, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

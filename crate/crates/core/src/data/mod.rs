//! Dataset schema, manifest I/O, tokenization, batching and the synthetic
//! benchmark generator.

pub mod manifest;
pub mod synth;
pub mod tokenize;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};

pub use manifest::{
    load_manifest, save_manifest, DatasetManifest, EntitySpan, FrameSource, GroundingSample,
};
pub use synth::{synth_generate, Motion, ShapeColor, ShapeKind, SynthSpec};
pub use tokenize::{tokenize, Vocab, PAD_ID, UNK_ID};

use crate::error::{Error, Result};

/// A manifest with every frame tensor resident in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    frames: Vec<Tensor>,
    tokens: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn from_parts(manifest: DatasetManifest, frames: Vec<Tensor>) -> Result<Self> {
        if frames.len() != manifest.samples.len() {
            return Err(Error::Shape(format!(
                "{} frame tensors for {} samples",
                frames.len(),
                manifest.samples.len()
            )));
        }
        for (s, f) in manifest.samples.iter().zip(&frames) {
            if f.dims() != s.frames.shape().as_slice() {
                return Err(Error::validation(
                    &s.video_id,
                    "frames",
                    format!("tensor shape {:?} != declared {:?}", f.dims(), s.frames.shape()),
                ));
            }
        }
        let tokens = manifest
            .samples
            .iter()
            .map(|s| tokenize(&s.sentence, &manifest.vocab))
            .collect::<Result<_>>()?;
        Ok(Self {
            manifest,
            frames,
            tokens,
        })
    }

    /// Load every frame file referenced by a manifest.
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate_files()?;
        let frames = manifest
            .samples
            .iter()
            .map(|s| manifest.load_frames(s))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, frames)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(load_manifest(path)?)
    }

    /// Write `manifest.jsonl` plus one frame file per sample under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for (s, f) in self.manifest.samples.iter().zip(&self.frames) {
            let path = dir.join(s.frames.path());
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let name = match s.frames {
                FrameSource::Raw { .. } => manifest::PIXELS_TENSOR,
                FrameSource::Features { .. } => manifest::FEATURES_TENSOR,
            };
            let map = HashMap::from([(name.to_string(), f.clone())]);
            candle::safetensors::save(&map, &path)?;
        }
        let path = dir.join("manifest.jsonl");
        save_manifest(&self.manifest, &path)?;
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn sample(&self, i: usize) -> &GroundingSample {
        &self.manifest.samples[i]
    }

    pub fn frames(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    pub fn tokens(&self, i: usize) -> &[u32] {
        &self.tokens[i]
    }

    /// A dataset holding only the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut manifest = self.manifest.clone();
        manifest.samples = indices.iter().map(|&i| self.manifest.samples[i].clone()).collect();
        Self {
            manifest,
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            tokens: indices.iter().map(|&i| self.tokens[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum VisualInput {
    /// `B×T×3×H×W`, values in `[0,1]`.
    Pixels(Tensor),
    /// `B×T×C×H×W` precomputed grids.
    Features(Tensor),
}

impl VisualInput {
    pub fn tensor(&self) -> &Tensor {
        match self {
            VisualInput::Pixels(t) | VisualInput::Features(t) => t,
        }
    }
}

/// Padded tensors for a group of samples. Masks hold 1.0 on real positions.
#[derive(Clone, Debug)]
pub struct Batch {
    pub visual: VisualInput,
    /// `B×T`
    pub frame_mask: Tensor,
    /// `B×L`, `u32` ids padded with [`PAD_ID`].
    pub tokens: Tensor,
    /// `B×L`
    pub text_mask: Tensor,
    pub num_frames: Vec<usize>,
    pub num_words: Vec<usize>,
    /// Dataset index of every batch row.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn max_frames(&self) -> usize {
        self.frame_mask.dims()[1]
    }

    pub fn max_words(&self) -> usize {
        self.text_mask.dims()[1]
    }
}

fn mask_tensor(lengths: &[usize], max: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = lengths
        .iter()
        .flat_map(|&n| (0..max).map(move |i| if i < n { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), max), device)?)
}

/// Pad and stack samples. Frames must agree in kind and spatial size.
pub fn batch(dataset: &Dataset, indices: &[usize], device: &Device) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let first = dataset.frames(indices[0]).dims().to_vec();
    let raw = matches!(dataset.sample(indices[0]).frames, FrameSource::Raw { .. });
    let num_frames: Vec<usize> = indices.iter().map(|&i| dataset.sample(i).num_frames()).collect();
    let num_words: Vec<usize> = indices.iter().map(|&i| dataset.tokens(i).len()).collect();
    let t_max = *num_frames.iter().max().expect("non-empty");
    let l_max = *num_words.iter().max().expect("non-empty");

    let mut videos = Vec::with_capacity(indices.len());
    for &i in indices {
        let f = dataset.frames(i);
        let same_kind = matches!(dataset.sample(i).frames, FrameSource::Raw { .. }) == raw;
        if !same_kind || f.dims()[1..] != first[1..] {
            return Err(Error::Shape(format!(
                "sample `{}` frames {:?} incompatible with batch frames {:?}",
                dataset.sample(i).video_id,
                f.dims(),
                first
            )));
        }
        let mut f = f.to_dtype(DType::F64)?;
        if raw {
            f = f.affine(1.0 / 255.0, 0.0)?;
        }
        let t = f.dims()[0];
        if t < t_max {
            let mut pad_shape = f.dims().to_vec();
            pad_shape[0] = t_max - t;
            f = Tensor::cat(&[f, Tensor::zeros(pad_shape, DType::F64, &Device::Cpu)?], 0)?;
        }
        videos.push(f);
    }
    let stacked = Tensor::stack(&videos, 0)?.to_device(device)?;
    let visual = if raw {
        VisualInput::Pixels(stacked)
    } else {
        VisualInput::Features(stacked)
    };

    let ids: Vec<u32> = indices
        .iter()
        .flat_map(|&i| {
            let t = dataset.tokens(i);
            t.iter().copied().chain(std::iter::repeat_n(PAD_ID, l_max - t.len()))
        })
        .collect();

    Ok(Batch {
        visual,
        frame_mask: mask_tensor(&num_frames, t_max, device)?,
        tokens: Tensor::from_vec(ids, (indices.len(), l_max), device)?,
        text_mask: mask_tensor(&num_words, l_max, device)?,
        num_frames,
        num_words,
        indices: indices.to_vec(),
    })
}

//! The full grounding model: backbone, cross-modal encoder, query
//! generation, decoder and heads, wired from a [`TrainConfig`].

use candle::{Device, Tensor};

use crate::backbones::{Backbone, ToyBackbone};
use crate::config::{BoxMode, EntityAnchor, TrainConfig};
use crate::data::Batch;
use crate::decoder::{DecoderOutput, Predictions, QueryDecoder};
use crate::encoder::{flatten_video, token_mask, CrossModalEncoder, FlatVideo, FusedMemory};
use crate::error::Result;
use crate::losses::LossInputs;
use crate::nn::{Linear, ParamStore};
use crate::query::{roi_align, ContentQuerySet, QueryGenerator};

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub video: FlatVideo,
    pub memory: FusedMemory,
    pub queries: ContentQuerySet,
    pub decoded: DecoderOutput,
    pub predictions: Predictions,
    /// `B×T×N×C` contrastive anchors in text space.
    pub anchors: Tensor,
    /// `H^Y: B×L×C`.
    pub words: Tensor,
}

impl ModelOutput {
    pub fn loss_inputs(&self) -> LossInputs<'_> {
        LossInputs {
            predictions: &self.predictions,
            anchors: &self.anchors,
            words: &self.words,
        }
    }
}

#[derive(Debug)]
pub struct Grounder {
    config: TrainConfig,
    store: ParamStore,
    backbone: ToyBackbone,
    encoder: CrossModalEncoder,
    queries: QueryGenerator,
    decoder: QueryDecoder,
    entity_proj: Linear,
}

impl Grounder {
    /// Fresh parameters seeded by `config.train.seed`.
    pub fn new(config: &TrainConfig, vocab_size: usize, device: &Device) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let mut store = ParamStore::new(config.train.seed, device);
        let backbone = ToyBackbone::new(&mut store, &config.backbone, m.dim, vocab_size)?;
        let encoder = CrossModalEncoder::new(&mut store, &config.encoder, m.dim, m.modality_embeddings)?;
        let queries = QueryGenerator::new(
            &mut store,
            m.num_queries,
            m.dim,
            m.roi_bins,
            m.roi_samples,
            m.cqg,
            m.region_init,
        )?;
        let box_mode = if m.cqg { m.box_mode } else { BoxMode::Absolute };
        let decoder = QueryDecoder::new(&mut store, &config.decoder, m.dim, box_mode)?;
        let entity_proj = Linear::new(&mut store, "entity_proj", m.dim, m.dim)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            encoder,
            queries,
            decoder,
            entity_proj,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn query_generator(&self) -> &QueryGenerator {
        &self.queries
    }

    pub fn decoder(&self) -> &QueryDecoder {
        &self.decoder
    }

    pub fn backbone(&self) -> &ToyBackbone {
        &self.backbone
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn forward(&self, batch: &Batch) -> Result<ModelOutput> {
        let grid = self.backbone.encode_frames(&batch.visual)?;
        let video = flatten_video(&grid)?;
        let text = self.backbone.encode_text(&batch.tokens, &batch.text_mask)?;
        let visual_mask = token_mask(&batch.frame_mask, video.height * video.width)?;
        let memory = self.encoder.fuse(&video.tokens, &text.features, &visual_mask, &batch.text_mask)?;
        let queries = self.queries.generate(&video)?;
        let decoded = self.decoder.decode(&memory, &queries)?;
        let regions = self.queries.bank().boxes()?;
        let predictions = self.decoder.predict(&decoded, &regions)?;
        let anchor_src = match self.config.loss.entity_anchor {
            EntityAnchor::Decoder => decoded.p.clone(),
            EntityAnchor::MemoryRoi => {
                let hv = FlatVideo {
                    tokens: memory.visual()?,
                    ..video.clone()
                };
                let (b, t, n) = (batch.frame_mask.dims()[0], video.num_frames, regions.dims()[0]);
                roi_align(&hv.grid()?, &regions, 1, self.queries.samples())?.reshape((b, t, n, self.config.model.dim))?
            }
        };
        let anchors = self.entity_proj.forward(&anchor_src)?;
        let words = memory.text()?;
        Ok(ModelOutput {
            video,
            memory,
            queries,
            decoded,
            predictions,
            anchors,
            words,
        })
    }
}

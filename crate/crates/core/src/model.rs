//! The full keypoint regressor: backbone, coarse head, query encoder,
//! decoder and the two training flows.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::{DecoderConfig, DecoderOutput, QueryDecoder};
use crate::encoder::KeypointEncoder;
use crate::error::{config, contract, Result};
use crate::likelihood::{total_loss, FlowConfig, FlowModel, LaplaceParams, LaplaceTensors, LikelihoodMode, LossFlows};
use crate::numerics::{Checkpoint, NdArray, Tensor};
use crate::params::{Ctx, ParamStore};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub flow: FlowConfig,
    pub likelihood: LikelihoodMode,
    /// Weight of the decoder term in the total loss.
    pub lambda: f64,
    /// Supervise every decoder layer rather than only the last.
    pub aux_loss: bool,
    /// Add the random-reference query group during training.
    pub noisy_refs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let decoder = DecoderConfig { layers: 2, heads: 4, points: 4, levels: 3, dim: 32, ffn_dim: 64 };
        Self {
            backbone: BackboneConfig::default(),
            decoder,
            flow: FlowConfig::default(),
            likelihood: LikelihoodMode::Flow,
            lambda: 1.0,
            aux_loss: true,
            noisy_refs: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        if self.backbone.embed_dim != self.decoder.dim {
            return config(format!("embedding width {} differs from decoder width {}", self.backbone.embed_dim, self.decoder.dim));
        }
        if self.decoder.levels > self.backbone.levels() {
            return config(format!("decoder reads {} levels, backbone has {}", self.decoder.levels, self.backbone.levels()));
        }
        if !(self.lambda >= 0.0) {
            return config(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub coarse: LaplaceTensors,
    /// Proposal actually used for the queries (after any corruption).
    pub proposal: NdArray,
    pub decoder: DecoderOutput,
    /// Query groups per image.
    pub groups: usize,
}

impl ForwardOutput {
    /// Final-layer predictions of the proposal-anchored group, one per image.
    pub fn predictions(&self) -> Result<Vec<LaplaceParams>> {
        let last = self.decoder.last().values();
        let &[rows, k, 2] = last.mu.shape() else { return contract("unexpected prediction shape") };
        let per = k * 2;
        (0..rows / self.groups)
            .map(|b| {
                let r = b * self.groups;
                let take = |a: &NdArray| NdArray::new([k, 2], a.data()[r * per..(r + 1) * per].to_vec());
                LaplaceParams::new(take(&last.mu)?, take(&last.scale)?)
            })
            .collect()
    }
}

/// Per-forward options.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Seed for the random-reference query group (training only).
    pub noise_seed: Option<u64>,
    /// Uniform corruption `(amplitude, seed)` added to the coarse proposal.
    pub proposal_noise: Option<(f64, u64)>,
}

#[derive(Debug, Clone)]
pub struct PoseModel {
    cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: KeypointEncoder,
    pub decoder: QueryDecoder,
    pub coarse_flow: FlowModel,
    pub decoder_flow: FlowModel,
}

impl PoseModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, 0x6d6f_6465_6c);
        let backbone = Backbone::new(&mut store, &cfg.backbone, &mut r)?;
        let encoder = KeypointEncoder::new(&mut store, cfg.backbone.keypoints, cfg.decoder.dim, &mut r)?;
        let levels = cfg.backbone.levels();
        let channels = &cfg.backbone.channels[levels - cfg.decoder.levels..];
        let decoder = QueryDecoder::new(&mut store, &cfg.decoder, channels, &mut r)?;
        let coarse_flow = FlowModel::new(&mut store, "flow.coarse", &cfg.flow, &mut r)?;
        let decoder_flow = FlowModel::new(&mut store, "flow.decoder", &cfg.flow, &mut r)?;
        Ok(Self { cfg: cfg.clone(), store, backbone, encoder, decoder, coarse_flow, decoder_flow })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn keypoints(&self) -> usize {
        self.cfg.backbone.keypoints
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.cfg.backbone.input_size
    }

    /// Forward over a channels-last `[B, H, W, 3]` batch.
    pub fn forward(&self, ctx: &Ctx, images: &NdArray, opts: ForwardOptions) -> Result<ForwardOutput> {
        let x = ctx.constant(images.clone());
        self.forward_tensor(ctx, &x, opts)
    }

    pub fn forward_tensor(&self, ctx: &Ctx, images: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput> {
        let pyramid = self.backbone.extract_pyramid_hwc(ctx, images)?;
        let coarse = self.backbone.coarse_proposal(ctx, &pyramid.pooled)?;
        let coarse = LaplaceTensors { mu: coarse.mu, scale: coarse.scale };
        let mut proposal = coarse.mu.detach().value().clone();
        if let Some((amp, seed)) = opts.proposal_noise {
            let mut r = rng::stream(seed, 0x7072_6f70);
            for v in proposal.data_mut() {
                *v = (*v + rng::uniform(&mut r, -amp, amp)).clamp(0.0, 1.0);
            }
        }
        let noise_seed = if self.cfg.noisy_refs { opts.noise_seed } else { None };
        let queries = self.encoder.init_queries(ctx, &proposal, noise_seed)?;
        let decoder = self.decoder.forward(ctx, &queries, &pyramid)?;
        Ok(ForwardOutput { coarse, proposal, decoder, groups: queries.groups })
    }

    /// Total loss against `[B, K, 2]` normalized ground truth.
    pub fn loss(&self, ctx: &Ctx, out: &ForwardOutput, gt: &NdArray) -> Result<Tensor> {
        let layers: Vec<LaplaceTensors> = if self.cfg.aux_loss {
            out.decoder.layers.iter().map(|l| l.laplace.clone()).collect()
        } else {
            vec![out.decoder.last().clone()]
        };
        let flows = LossFlows { coarse: Some(&self.coarse_flow), decoder: Some(&self.decoder_flow) };
        total_loss(ctx, &out.coarse, &layers, gt, flows, self.cfg.likelihood, self.cfg.lambda)
    }

    /// Inference-mode predictions for a `[B, H, W, 3]` batch.
    pub fn predict(&self, images: &NdArray, proposal_noise: Option<(f64, u64)>) -> Result<Vec<LaplaceParams>> {
        let ctx = Ctx::new(&self.store, false);
        let opts = ForwardOptions { noise_seed: None, proposal_noise };
        self.forward(&ctx, images, opts)?.predictions()
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        self.store.to_checkpoint(meta)
    }

    /// Rebuilds a model from a checkpoint whose metadata carries its config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(ck.meta.get("model").cloned().unwrap_or_default()).map_err(|e| {
            crate::Error::Format { path: "<checkpoint>".into(), msg: format!("model config: {e}") }
        })?;
        let mut model = Self::new(&cfg, 0)?;
        model.store.load_checkpoint(ck)?;
        Ok(model)
    }
}

/// Stacks `[H, W, 3]` patches into a `[B, H, W, 3]` batch.
pub fn stack_hwc(patches: &[&NdArray]) -> Result<NdArray> {
    let Some(first) = patches.first() else { return contract("empty batch") };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(patches.len() * first.len());
    for p in patches {
        if p.shape() != shape.as_slice() {
            return contract("patches in a batch must share a shape");
        }
        data.extend_from_slice(p.data());
    }
    let mut dims = vec![patches.len()];
    dims.extend(shape);
    NdArray::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shapes_and_groups() {
        let cfg = ModelConfig::default();
        let model = PoseModel::new(&cfg, 1).unwrap();
        let imgs = NdArray::from_fn([2, 64, 64, 3], |i| (i % 7) as f64 / 7.0);
        let ctx = Ctx::new(&model.store, true);
        let out = model.forward(&ctx, &imgs, ForwardOptions { noise_seed: Some(3), ..Default::default() }).unwrap();
        assert_eq!(out.groups, 2);
        assert_eq!(out.decoder.last().mu.shape(), &[4, 8, 2]);
        let gt = NdArray::full([2, 8, 2], 0.5);
        let loss = model.loss(&ctx, &out, &gt).unwrap();
        assert!(loss.value().item().unwrap().is_finite());
        let preds = model.predict(&imgs, None).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].mu.shape(), &[8, 2]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::default();
        let model = PoseModel::new(&cfg, 4).unwrap();
        let ck = model.to_checkpoint(serde_json::json!({ "model": cfg }));
        let back = PoseModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap(), "x".as_ref()).unwrap()).unwrap();
        let imgs = NdArray::from_fn([1, 64, 64, 3], |i| (i % 5) as f64 / 5.0);
        assert_eq!(model.predict(&imgs, None).unwrap(), back.predict(&imgs, None).unwrap());
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.backbone.embed_dim = 16;
        assert!(matches!(PoseModel::new(&cfg, 0), Err(crate::Error::Config(_))));
    }
}

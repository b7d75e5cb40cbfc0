//! Transformer decoder over keypoint queries.
//!
//! Each layer runs self-attention across a group's queries, deformable
//! cross-attention into the feature pyramid and an FFN, each followed by a
//! residual add and layer norm. A per-layer head then predicts Laplace
//! parameters and a small linear map nudges the reference points.

pub mod emsda;
pub mod sampling;

use serde::{Deserialize, Serialize};

pub use emsda::{
    emsda_forward, emsda_reference, emsda_value_flops, msda_from_projected, msda_oracle, msda_value_flops,
    project_pyramid, EmsdaOutput, EmsdaParams,
    EmsdaShape, EmsdaWeights, FlopCounter,
};
pub use sampling::{bilinear_sample, sample_rows, GridRef};

use crate::backbone::{FeaturePyramid, MIN_SCALE};
use crate::encoder::KeypointQuerySet;
use crate::error::{config, contract, Result};
use crate::likelihood::LaplaceTensors;
use crate::nn::{LayerNorm, Linear};
use crate::numerics::Tensor;
use crate::params::{Ctx, ParamStore};
use crate::rng::SplitMix64;

/// Clamp applied before the logit in [`refine_reference`].
pub const REF_EPS: f64 = 1e-5;

/// Step multiplier for the sampling-offset and reference-update projections.
pub const LOCATION_LR_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    /// Number of pyramid levels attended to, taken from the coarse end.
    pub levels: usize,
    pub dim: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 3, heads: 8, points: 4, levels: 3, dim: 256, ffn_dim: 1024 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.ffn_dim == 0 {
            return config("decoder needs at least one layer and a non-empty FFN");
        }
        self.attention_shape().validate()
    }

    pub fn attention_shape(&self) -> EmsdaShape {
        EmsdaShape { heads: self.heads, levels: self.levels, points: self.points, dim: self.dim }
    }
}

/// Multi-head self-attention across the query axis of `[N, K, C]`.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut SplitMix64) -> Self {
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let &[n, k, c] = x.shape() else { return contract("self-attention input must be [N, K, C]") };
        let (m, dh) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(ctx, x)?.reshape(&[n, k, 3, m, dh])?.permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.slice(0, i, 1)?.reshape(&[n * m, k, dh]);
        let (q, kt, v) = (part(0)?, part(1)?.permute(&[0, 2, 1])?, part(2)?);
        let weights = q.matmul(&kt)?.scale(1.0 / (dh as f64).sqrt())?.softmax()?;
        let o = weights.matmul(&v)?.reshape(&[n, m, k, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n, k, c])?;
        self.out.forward(ctx, &o)
    }
}

/// `sigmoid(logit(clamp(p)) + Q W + b)`: zero weights leave `p` unchanged.
pub fn refine_reference(ctx: &Ctx, proj: &Linear, queries: &Tensor, refs: &Tensor) -> Result<Tensor> {
    let p = refs.clamp(REF_EPS, 1.0 - REF_EPS);
    let logit = p.log().sub(&p.neg()?.add_scalar(1.0)?.log())?;
    Ok(logit.add(&proj.forward(ctx, queries)?)?.sigmoid())
}

/// Laplace head: `[.., C] -> (mu, b)`, both squashed by a sigmoid.
pub fn laplace_head(ctx: &Ctx, head: &Linear, queries: &Tensor) -> Result<LaplaceTensors> {
    let out = head.forward(ctx, queries)?;
    let last = out.shape().len() - 1;
    Ok(LaplaceTensors {
        mu: out.slice(last, 0, 2)?.sigmoid(),
        scale: out.slice(last, 2, 2)?.sigmoid().clamp(MIN_SCALE, 1.0),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub norm1: LayerNorm,
    pub cross_attn: EmsdaParams,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm3: LayerNorm,
    pub head: Linear,
    pub ref_proj: Linear,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut SplitMix64) -> Result<Self> {
        let c = cfg.dim;
        let cross_attn = EmsdaParams::new(store, &format!("{name}.cross_attn"), cfg.attention_shape(), rng)?;
        cross_attn.offsets.set_lr_scale(store, LOCATION_LR_SCALE);
        let ref_proj = Linear::zeros(store, &format!("{name}.ref_proj"), c, 2);
        ref_proj.set_lr_scale(store, LOCATION_LR_SCALE);
        Ok(Self {
            self_attn: SelfAttention::new(store, &format!("{name}.self_attn"), c, cfg.heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            cross_attn,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            ffn1: Linear::new(store, &format!("{name}.ffn1"), c, cfg.ffn_dim, rng),
            ffn2: Linear::new(store, &format!("{name}.ffn2"), cfg.ffn_dim, c, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c),
            head: Linear::new(store, &format!("{name}.head"), c, 4, rng),
            ref_proj,
        })
    }

    /// Updated queries and cross-attention weights.
    pub fn forward(
        &self,
        ctx: &Ctx,
        queries: &Tensor,
        refs: &Tensor,
        levels: &[Tensor],
        image_of: &dyn Fn(usize) -> usize,
    ) -> Result<(Tensor, Tensor)> {
        let q = self.norm1.forward(ctx, &queries.add(&self.self_attn.forward(ctx, queries)?)?)?;
        let cross = emsda_forward(ctx, &self.cross_attn, &q, refs, levels, image_of)?;
        let q = self.norm2.forward(ctx, &q.add(&cross.out)?)?;
        let ffn = self.ffn2.forward(ctx, &self.ffn1.forward(ctx, &q)?.relu())?;
        let q = self.norm3.forward(ctx, &q.add(&ffn)?)?;
        Ok((q, cross.attn))
    }
}

/// State after one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// `[N, K, C]`.
    pub queries: Tensor,
    /// Reference points the layer attended around, `[N, K, 2]`.
    pub refs: Tensor,
    /// Cross-attention weights `[N, K, M, L*S]`.
    pub attn: Tensor,
    /// This layer's head on its output queries.
    pub laplace: LaplaceTensors,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub layers: Vec<LayerOutput>,
    /// Reference points after the final refinement.
    pub final_refs: Tensor,
}

impl DecoderOutput {
    pub fn last(&self) -> &LaplaceTensors {
        &self.layers.last().expect("at least one layer").laplace
    }
}

#[derive(Debug, Clone)]
pub struct QueryDecoder {
    cfg: DecoderConfig,
    input_proj: Vec<Linear>,
    pub layers: Vec<DecoderLayer>,
}

impl QueryDecoder {
    /// `level_channels` lists the channel counts of the levels the decoder reads.
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, level_channels: &[usize], rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        if level_channels.len() != cfg.levels {
            return config(format!("decoder reads {} levels but {} were given", cfg.levels, level_channels.len()));
        }
        let input_proj = level_channels
            .iter()
            .enumerate()
            .map(|(l, &cl)| Linear::new(store, &format!("decoder.input_proj{l}"), cl, cfg.dim, rng))
            .collect();
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: *cfg, input_proj, layers })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// The coarsest `levels` pyramid levels projected to the decoder width.
    pub fn project_levels(&self, ctx: &Ctx, pyramid: &FeaturePyramid) -> Result<Vec<Tensor>> {
        let total = pyramid.levels.len();
        if total < self.cfg.levels {
            return config(format!("decoder reads {} levels, pyramid has {total}", self.cfg.levels));
        }
        pyramid.levels[total - self.cfg.levels..]
            .iter()
            .zip(&self.input_proj)
            .map(|(x, proj)| proj.forward(ctx, x))
            .collect()
    }

    /// Runs every layer. Reference points enter each layer as constants.
    pub fn forward(&self, ctx: &Ctx, queries: &KeypointQuerySet, pyramid: &FeaturePyramid) -> Result<DecoderOutput> {
        let levels = self.project_levels(ctx, pyramid)?;
        if queries.images() != pyramid.batch() {
            return contract(format!("{} query images for a batch of {}", queries.images(), pyramid.batch()));
        }
        let image_of = |n: usize| queries.image_of(n);
        let mut q = queries.queries.clone();
        let mut refs = ctx.constant(queries.refs.clone());
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, attn) = layer.forward(ctx, &q, &refs, &levels, &image_of)?;
            let laplace = laplace_head(ctx, &layer.head, &next)?;
            let new_refs = refine_reference(ctx, &layer.ref_proj, &next, &refs)?.detach();
            layers.push(LayerOutput { queries: next.clone(), refs, attn, laplace });
            q = next;
            refs = new_refs;
        }
        Ok(DecoderOutput { layers, final_refs: refs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::encoder::KeypointEncoder;
    use crate::numerics::{finite_diff_check_many, NdArray};
    use crate::rng;

    fn tiny() -> DecoderConfig {
        DecoderConfig { layers: 3, heads: 2, points: 2, levels: 2, dim: 8, ffn_dim: 16 }
    }

    struct Fixture {
        store: ParamStore,
        backbone: Backbone,
        encoder: KeypointEncoder,
        decoder: QueryDecoder,
    }

    fn fixture(cfg: DecoderConfig, k: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut r = rng::stream(2, 0);
        let bcfg = BackboneConfig {
            input_size: (16, 16),
            channels: vec![4, 6, 6],
            strides: vec![2, 4, 8],
            keypoints: k,
            embed_dim: cfg.dim,
        };
        let backbone = Backbone::new(&mut store, &bcfg, &mut r).unwrap();
        let encoder = KeypointEncoder::new(&mut store, k, cfg.dim, &mut r).unwrap();
        let decoder = QueryDecoder::new(&mut store, &cfg, &bcfg.channels[3 - cfg.levels..], &mut r).unwrap();
        Fixture { store, backbone, encoder, decoder }
    }

    fn run(f: &Fixture, img: &NdArray, noise: Option<u64>) -> (Vec<f64>, usize, Vec<usize>) {
        let ctx = Ctx::new(&f.store, noise.is_some());
        let pyr = f.backbone.extract_pyramid(&ctx, &[img]).unwrap();
        let prop = f.backbone.coarse_proposal(&ctx, &pyr.pooled).unwrap();
        let qs = f.encoder.init_queries(&ctx, prop.mu.value(), noise).unwrap();
        let out = f.decoder.forward(&ctx, &qs, &pyr).unwrap();
        for l in &out.layers {
            assert!(l.refs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        (out.last().mu.data().to_vec(), out.layers.len(), out.last().mu.shape().to_vec())
    }

    #[test]
    fn deterministic_with_expected_shapes() {
        let cfg = DecoderConfig { layers: 3, ..tiny() };
        let f = fixture(cfg, 4);
        let mut r = rng::stream(7, 0);
        let img = NdArray::from_fn([3, 16, 16], |_| rng::uniform(&mut r, 0.0, 1.0));
        let a = run(&f, &img, None);
        let b = run(&f, &img, None);
        assert_eq!(a, b);
        assert_eq!(a.1, 3);
        assert_eq!(a.2, vec![1, 4, 2]);
        let noisy = run(&f, &img, Some(1));
        assert_eq!(noisy.2, vec![2, 4, 2]);
    }

    #[test]
    fn refine_identity_and_range() {
        let mut store = ParamStore::new();
        let proj = Linear::zeros(&mut store, "p", 3, 2);
        let big = Linear::from_parts(&mut store, "b", NdArray::zeros([3, 2]), Some(NdArray::full([2], 1e4)));
        let ctx = Ctx::new(&store, false);
        let q = ctx.constant(NdArray::full([1, 2, 3], 0.7));
        let refs = ctx.constant(NdArray::from_vec(vec![0.2, 0.9, 0.5, 0.01]).reshape([1, 2, 2]).unwrap());
        let same = refine_reference(&ctx, &proj, &q, &refs).unwrap();
        assert!(same.value().max_abs_diff(refs.value()) < 1e-12);
        let up = refine_reference(&ctx, &big, &q, &refs).unwrap();
        assert!(up.data().iter().all(|&v| v <= 1.0 && v > 0.999));
    }

    #[test]
    fn refine_gradcheck_two_steps() {
        let mut r = rng::stream(11, 0);
        let mut store = ParamStore::new();
        let w = NdArray::from_fn([3, 2], |_| rng::normal(&mut r, 0.5));
        let b = NdArray::from_fn([2], |_| rng::normal(&mut r, 0.5));
        let proj = Linear::from_parts(&mut store, "r", w, Some(b));
        let q = NdArray::from_fn([2, 3], |_| rng::normal(&mut r, 1.0));
        let p = NdArray::from_fn([2, 2], |_| rng::uniform(&mut r, 0.1, 0.9));
        let err = finite_diff_check_many(
            |xs| {
                let ctx = Ctx::with_graph(&store, true, xs[0].graph());
                let once = refine_reference(&ctx, &proj, &xs[0], &xs[1])?;
                Ok(refine_reference(&ctx, &proj, &xs[0], &once)?.square()?.sum())
            },
            &[q, p],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 8, 2, &mut rng::stream(1, 0));
        let mut r = rng::stream(3, 0);
        let x = NdArray::from_fn([1, 4, 8], |_| rng::normal(&mut r, 1.0));
        let perm = [2, 0, 3, 1];
        let xp = NdArray::from_fn([1, 4, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
        let ctx = Ctx::new(&store, false);
        let y = sa.forward(&ctx, &ctx.constant(x)).unwrap();
        let yp = sa.forward(&ctx, &ctx.constant(xp)).unwrap();
        for i in 0..32 {
            assert!((yp.data()[i] - y.data()[perm[i / 8] * 8 + i % 8]).abs() < 1e-12);
        }
    }

    #[test]
    fn level_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let err = QueryDecoder::new(&mut store, &tiny(), &[4], &mut rng::stream(0, 0));
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }
}

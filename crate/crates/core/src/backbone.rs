//! Strided conv feature extractor and the pooled coarse proposal head.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::nn::{BatchNorm, Conv2d, Linear};
use crate::numerics::{NdArray, Tensor};
use crate::params::{Ctx, ParamStore};
use crate::rng::SplitMix64;

/// Lower bound applied to every predicted scale.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `(H, W)` in pixels.
    pub input_size: (usize, usize),
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub keypoints: usize,
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { input_size: (64, 64), channels: vec![16, 32, 32], strides: vec![4, 8, 16], keypoints: 8, embed_dim: 32 }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.strides.is_empty() || self.channels.len() != self.strides.len() {
            return config("backbone needs one channel count per stride and at least one level");
        }
        if self.strides.windows(2).any(|p| p[1] <= p[0] || p[1] % p[0] != 0) {
            return config(format!("strides {:?} must strictly increase by integer factors", self.strides));
        }
        let last = *self.strides.last().expect("non-empty");
        if h % last != 0 || w % last != 0 {
            return config(format!("input {h}x{w} not divisible by final stride {last}"));
        }
        if self.keypoints == 0 || self.embed_dim == 0 || self.channels.contains(&0) {
            return config("keypoints, embed_dim and channels must be positive");
        }
        Ok(())
    }

    /// Spatial size `(H_l, W_l)` of every level.
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        self.strides.iter().map(|s| (self.input_size.0 / s, self.input_size.1 / s)).collect()
    }
}

/// Per-level feature maps `[B, H_l, W_l, C_l]` (channels last) and the
/// globally pooled last level `[B, C_last]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub pooled: Tensor,
}

impl FeaturePyramid {
    pub fn batch(&self) -> usize {
        self.pooled.shape()[0]
    }

    /// Level `l` of image `b` as a `[C, H, W]` array.
    pub fn level_chw(&self, l: usize, b: usize) -> Result<NdArray> {
        let t = self.levels[l].value();
        let &[_, h, w, c] = t.shape() else { return contract("pyramid level is not rank 4") };
        let base = b * h * w * c;
        Ok(NdArray::from_fn([c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            t.data()[base + rest * c + ch]
        }))
    }
}

/// Coarse Laplace parameters `[B, K, 2]` from the pooled feature.
#[derive(Debug, Clone)]
pub struct CoarseProposal {
    pub mu: Tensor,
    pub scale: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        Ok(self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<[ConvBnRelu; 2]>,
    head: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.levels());
        let mut in_ch = 3;
        let mut prev_stride = 1;
        for (l, (&ch, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let factor = stride / prev_stride;
            // Factor 2 (or 1) uses an overlapping 3x3 kernel; larger factors patchify.
            let (k, pad) = if factor <= 2 { (3, 1) } else { (factor, 0) };
            let mk = |store: &mut ParamStore, i: usize, cin: usize, k: usize, s: usize, p: usize, rng: &mut SplitMix64| {
                let name = format!("backbone.l{l}.{i}");
                ConvBnRelu {
                    conv: Conv2d::new(store, &format!("{name}.conv"), cin, ch, k, s, p, false, rng),
                    bn: BatchNorm::new(store, &format!("{name}.bn"), ch),
                }
            };
            let down = mk(store, 0, in_ch, k, factor, pad, rng);
            let refine = mk(store, 1, ch, 3, 1, 1, rng);
            blocks.push([down, refine]);
            in_ch = ch;
            prev_stride = stride;
        }
        let last = *cfg.channels.last().expect("validated");
        let head = Linear::new(store, "backbone.coarse_head", last, 4 * cfg.keypoints, rng);
        Ok(Self { cfg: cfg.clone(), blocks, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Zeroes the coarse head so every proposal starts at the image centre.
    pub fn zero_head(&self, store: &mut ParamStore) {
        let w = store.get_mut(self.head.weight);
        *w = NdArray::zeros(w.shape().to_vec());
        if let Some(b) = self.head.bias {
            let b = store.get_mut(b);
            *b = NdArray::zeros(b.shape().to_vec());
        }
    }

    /// Stacks `[3, H, W]` images into a channels-last `[B, H, W, 3]` batch.
    pub fn batch_images(&self, images: &[&NdArray]) -> Result<NdArray> {
        let (h, w) = self.cfg.input_size;
        if images.is_empty() {
            return contract("empty image batch");
        }
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if img.shape() != [3, h, w] {
                return contract(format!("image shape {:?} does not match [3, {h}, {w}]", img.shape()));
            }
            let d = img.data();
            for p in 0..h * w {
                data.extend([d[p], d[h * w + p], d[2 * h * w + p]]);
            }
        }
        NdArray::new([images.len(), h, w, 3], data)
    }

    /// Multi-level features for `[3, H, W]` images.
    pub fn extract_pyramid(&self, ctx: &Ctx, images: &[&NdArray]) -> Result<FeaturePyramid> {
        let batch = self.batch_images(images)?;
        self.extract_pyramid_hwc(ctx, &ctx.constant(batch))
    }

    /// Same as [`Backbone::extract_pyramid`] for an already stacked `[B, H, W, 3]` batch.
    pub fn extract_pyramid_hwc(&self, ctx: &Ctx, x: &Tensor) -> Result<FeaturePyramid> {
        let (h, w) = self.cfg.input_size;
        if x.shape().len() != 4 || x.shape()[1..] != [h, w, 3] {
            return contract(format!("input {:?} does not match [B, {h}, {w}, 3]", x.shape()));
        }
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for [down, refine] in &self.blocks {
            cur = refine.forward(ctx, &down.forward(ctx, &cur)?)?;
            levels.push(cur.clone());
        }
        let &[b, lh, lw, c] = cur.shape() else { unreachable!("conv output is rank 4") };
        let pooled = cur.reshape(&[b, lh * lw, c])?.mean_axis(1)?.reshape(&[b, c])?;
        Ok(FeaturePyramid { levels, pooled })
    }

    /// Affine map of the pooled feature, squashed by sigmoids into location
    /// `[0, 1]` and scale `(0, 1]`.
    pub fn coarse_proposal(&self, ctx: &Ctx, pooled: &Tensor) -> Result<CoarseProposal> {
        let k = self.cfg.keypoints;
        let b = pooled.shape()[0];
        let out = self.head.forward(ctx, pooled)?.reshape(&[b, k, 4])?;
        let mu = out.slice(2, 0, 2)?.sigmoid();
        let scale = out.slice(2, 2, 2)?.sigmoid().clamp(MIN_SCALE, 1.0);
        Ok(CoarseProposal { mu, scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn build(cfg: &BackboneConfig) -> (Backbone, ParamStore) {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, cfg, &mut rng::stream(1, 0)).unwrap();
        (bb, store)
    }

    #[test]
    fn level_sizes_follow_strides() {
        let cfg = BackboneConfig { strides: vec![8, 16, 32], ..Default::default() };
        let (bb, store) = build(&cfg);
        let img = NdArray::full([3, 64, 64], 0.3);
        let ctx = Ctx::new(&store, false);
        let p = bb.extract_pyramid(&ctx, &[&img]).unwrap();
        let sizes: Vec<_> = p.levels.iter().map(|l| (l.shape()[1], l.shape()[2], l.shape()[3])).collect();
        assert_eq!(sizes, vec![(8, 8, 16), (4, 4, 32), (2, 2, 32)]);
        assert_eq!(p.level_chw(0, 0).unwrap().shape(), &[16, 8, 8]);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let (bb, store) = build(&BackboneConfig::default());
        let img = NdArray::zeros([3, 64, 64]);
        for train in [false, true] {
            let ctx = Ctx::new(&store, train);
            let p = bb.extract_pyramid(&ctx, &[&img, &img]).unwrap();
            assert!(p.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
            assert!(p.pooled.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pooled_is_mean_of_last_level() {
        let (bb, store) = build(&BackboneConfig::default());
        let mut r = rng::stream(9, 0);
        let img = NdArray::from_fn([3, 64, 64], |_| rng::uniform(&mut r, 0.0, 1.0));
        let ctx = Ctx::new(&store, false);
        let p = bb.extract_pyramid(&ctx, &[&img]).unwrap();
        let last = p.levels.last().unwrap().value();
        let (hw, c) = (last.shape()[1] * last.shape()[2], last.shape()[3]);
        for ch in 0..c {
            let m: f64 = (0..hw).map(|i| last.data()[i * c + ch]).sum::<f64>() / hw as f64;
            assert!((m - p.pooled.data()[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let (bb, store) = build(&BackboneConfig::default());
        let ctx = Ctx::new(&store, false);
        let img = NdArray::zeros([3, 32, 64]);
        assert!(matches!(bb.extract_pyramid(&ctx, &[&img]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let bad = [
            BackboneConfig { strides: vec![8, 8], channels: vec![4, 4], ..Default::default() },
            BackboneConfig { input_size: (60, 64), ..Default::default() },
            BackboneConfig { strides: vec![], channels: vec![], ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn zero_head_proposes_centre() {
        let (bb, mut store) = build(&BackboneConfig::default());
        bb.zero_head(&mut store);
        let ctx = Ctx::new(&store, false);
        let pooled = ctx.constant(NdArray::full([2, 32], 3.0));
        let p = bb.coarse_proposal(&ctx, &pooled).unwrap();
        assert!(p.mu.data().iter().chain(p.scale.data()).all(|&v| v == 0.5));
        assert_eq!(p.mu.shape(), &[2, 8, 2]);
    }
}

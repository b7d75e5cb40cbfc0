//! Keypoint query initialisation: class embeddings plus a fixed sine-cosine
//! encoding of each proposal location, with an optional second group of
//! queries anchored at random reference points during training.

use crate::error::{contract, config, Result};
use crate::numerics::{NdArray, Tensor};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::rng::{self, SplitMix64};

pub const TEMPERATURE: f64 = 10_000.0;

/// Sine-cosine embedding of `[n, 2]` coordinates into `[n, dim]`.
///
/// The first `dim / 2` channels encode x and the rest encode y. Within an
/// axis, channel `t` uses frequency `T^(-2*floor(t/2) / (dim/2))`, sine on even
/// `t` and cosine on odd `t`.
pub fn sincos_embed(coords: &NdArray, dim: usize) -> Result<NdArray> {
    if dim == 0 || dim % 4 != 0 {
        return config(format!("embedding width {dim} must be a positive multiple of 4"));
    }
    let &[n, 2] = coords.shape() else {
        return contract(format!("coordinates must be [n, 2], got {:?}", coords.shape()));
    };
    let half = dim / 2;
    let freqs: Vec<f64> =
        (0..half).map(|t| TEMPERATURE.powf(-2.0 * (t / 2) as f64 / half as f64)).collect();
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        for axis in 0..2 {
            let c = coords.data()[2 * i + axis];
            for (t, f) in freqs.iter().enumerate() {
                let a = c * f;
                out.push(if t % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    NdArray::new([n, dim], out)
}

/// Whether stochastic training-only behaviour is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// `k` reference points drawn uniformly on the unit square.
pub fn sample_noisy_references(k: usize, seed: u64, mode: Mode) -> Result<NdArray> {
    if mode == Mode::Inference {
        return contract("random reference points are a training-only augmentation");
    }
    let mut r: SplitMix64 = rng::stream(seed, 0x6e6f_6973);
    Ok(NdArray::from_fn([k, 2], |_| rng::uniform(&mut r, 0.0, 1.0)))
}

/// Queries for a batch, laid out as `groups` consecutive query groups per image.
#[derive(Debug, Clone)]
pub struct KeypointQuerySet {
    /// `[images * groups, K, C]`.
    pub queries: Tensor,
    /// `[images * groups, K, 2]`, always inside the unit square.
    pub refs: NdArray,
    /// One flag per group row; `true` for the random-reference group.
    pub noisy: Vec<bool>,
    /// 1 at inference, 2 with noisy references.
    pub groups: usize,
}

impl KeypointQuerySet {
    pub fn images(&self) -> usize {
        self.noisy.len() / self.groups
    }

    /// Query rows per image (`K` at inference, `2K` with noisy references).
    pub fn rows_per_image(&self) -> usize {
        self.groups * self.queries.shape()[1]
    }

    /// Image feeding group row `n`.
    pub fn image_of(&self, n: usize) -> usize {
        n / self.groups
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KeypointEncoder {
    pub class_embed: ParamId,
    pub keypoints: usize,
    pub dim: usize,
}

impl KeypointEncoder {
    pub fn new(store: &mut ParamStore, keypoints: usize, dim: usize, rng: &mut SplitMix64) -> Result<Self> {
        if dim % 4 != 0 {
            return config(format!("embedding width {dim} must be a multiple of 4"));
        }
        let emb = NdArray::from_fn([keypoints, dim], |_| rng::normal(rng, 1.0));
        let class_embed = store.add("encoder.class_embed", emb, ParamKind::NoDecay);
        Ok(Self { class_embed, keypoints, dim })
    }

    /// Queries `Q_c + sincos(proposal)` for a `[B, K, 2]` proposal. With
    /// `noise_seed` (training only), each image also gets a group anchored at
    /// uniform random points, sharing the same class embeddings.
    pub fn init_queries(&self, ctx: &Ctx, proposal: &NdArray, noise_seed: Option<u64>) -> Result<KeypointQuerySet> {
        let k = self.keypoints;
        let &[b, pk, 2] = proposal.shape() else {
            return contract(format!("proposal must be [B, K, 2], got {:?}", proposal.shape()));
        };
        if pk != k {
            return contract(format!("proposal has {pk} keypoints, encoder expects {k}"));
        }
        let groups = match noise_seed {
            Some(_) if !ctx.is_train() => {
                return contract("random reference points are a training-only augmentation")
            }
            Some(_) => 2,
            None => 1,
        };
        let mut refs = Vec::with_capacity(b * groups * k * 2);
        let mut noisy = Vec::with_capacity(b * groups);
        for i in 0..b {
            refs.extend(proposal.data()[i * k * 2..(i + 1) * k * 2].iter().map(|v| v.clamp(0.0, 1.0)));
            noisy.push(false);
            if let Some(seed) = noise_seed {
                let r = sample_noisy_references(k, rng::derive_seed(seed, i as u64), Mode::Train)?;
                refs.extend_from_slice(r.data());
                noisy.push(true);
            }
        }
        let rows = b * groups;
        let refs = NdArray::new([rows, k, 2], refs)?;
        let pos = sincos_embed(&refs.clone().reshape([rows * k, 2])?, self.dim)?.reshape([rows, k, self.dim])?;
        let queries = ctx.param(self.class_embed).add(&ctx.constant(pos))?;
        Ok(KeypointQuerySet { queries, refs, noisy, groups })
    }
}

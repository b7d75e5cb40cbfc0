//! The full finite-difference suite: every graph primitive at every rank it
//! supports, then each composite path of the model.

use std::rc::Rc;

use serde::Serialize;

use crate::backbone::{BackboneConfig, FeaturePyramid};
use crate::decoder::{bilinear_sample, emsda_forward, refine_reference, DecoderConfig, EmsdaParams, EmsdaShape};
use crate::encoder::KeypointEncoder;
use crate::error::Result;
use crate::likelihood::{rle_loss, total_loss, FlowConfig, LaplaceTensors, LikelihoodMode, LossFlows};
use crate::model::{ForwardOptions, ModelConfig, PoseModel};
use crate::nn::{BatchNorm, Conv2d, LayerNorm, Linear};
use crate::numerics::{finite_diff_check_many, NdArray, Tensor, DEFAULT_EPS, PAD};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::rng::{self, SplitMix64};

/// Pass threshold on the max relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Probed entries per parameter tensor in the model-level checks.
const MODEL_ENTRIES: usize = 24;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

/// Fixed, non-symmetric weights so a weighted sum probes every output entry.
fn weights_like(t: &Tensor) -> Tensor {
    t.constant_like(NdArray::from_fn(t.shape().to_vec(), |i| (1.618 * i as f64 + 0.5).sin()))
}

fn weighted_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.mul(&weights_like(t))?.sum())
}

fn normal(r: &mut SplitMix64, shape: &[usize]) -> NdArray {
    NdArray::from_fn(shape.to_vec(), |_| rng::normal(r, 1.0))
}

/// Draws from `[lo, hi]` that stay at least `margin` away from every kink.
fn avoiding(r: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> NdArray {
    NdArray::from_fn(shape.to_vec(), |_| loop {
        let v = rng::uniform(r, lo, hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            break v;
        }
    })
}

const RANKED: [&[usize]; 5] = [&[], &[5], &[3, 4], &[2, 3, 4], &[2, 1, 3, 2]];

struct Suite {
    out: Vec<GradCheck>,
    seed: u64,
}

impl Suite {
    fn record(&mut self, name: impl Into<String>, err: f64) {
        self.out.push(GradCheck { name: name.into(), max_rel_err: err });
    }

    fn rng(&mut self) -> SplitMix64 {
        rng::stream(self.seed, self.out.len() as u64)
    }

    fn check<F>(&mut self, name: impl Into<String>, xs: &[NdArray], f: F) -> Result<()>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let err = finite_diff_check_many(f, xs, DEFAULT_EPS, None, self.seed)?;
        self.record(name, err);
        Ok(())
    }

    /// Checks `f` w.r.t. `extra` inputs and the parameters `ids` of `store`,
    /// probing at most `entries` values per tensor.
    fn check_params<F>(
        &mut self,
        name: impl Into<String>,
        store: &ParamStore,
        ids: &[ParamId],
        extra: Vec<NdArray>,
        entries: Option<usize>,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&Ctx, &[Tensor]) -> Result<Tensor>,
    {
        let n = extra.len();
        let mut inputs = extra;
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        let err = finite_diff_check_many(
            |xs| {
                let ctx = Ctx::with_graph(store, true, xs[0].graph());
                ctx.bind(ids.iter().copied().zip(xs[n..].iter().cloned()));
                f(&ctx, &xs[..n])
            },
            &inputs,
            DEFAULT_EPS,
            entries,
            self.seed,
        )?;
        self.record(name, err);
        Ok(())
    }
}

fn trainable(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| store.entry(id).kind != ParamKind::Buffer).collect()
}

/// Adds `N(0, std^2)` noise to every trainable value so zero-initialised
/// blocks are probed away from their starting point.
fn perturb(store: &mut ParamStore, std: f64, r: &mut SplitMix64) {
    for id in trainable(store) {
        for v in store.get_mut(id).data_mut() {
            *v += rng::normal(r, std);
        }
    }
}

fn primitives(s: &mut Suite) -> Result<()> {
    for shape in RANKED {
        let rank = shape.len();
        let mut r = s.rng();
        let x = normal(&mut r, shape);
        let y = normal(&mut r, shape);
        let pos = NdArray::from_fn(shape.to_vec(), |_| rng::uniform(&mut r, 0.5, 2.0));
        let kinked = avoiding(&mut r, shape, -0.9, 0.9, &[-0.5, 0.0, 0.5], 0.02);
        s.check(format!("add/rank{rank}"), &[x.clone(), y.clone()], |t| weighted_sum(&t[0].add(&t[1])?))?;
        s.check(format!("sub/rank{rank}"), &[x.clone(), y.clone()], |t| weighted_sum(&t[0].sub(&t[1])?))?;
        s.check(format!("mul/rank{rank}"), &[x.clone(), y.clone()], |t| weighted_sum(&t[0].mul(&t[1])?))?;
        s.check(format!("div/rank{rank}"), &[x.clone(), pos.clone()], |t| weighted_sum(&t[0].div(&t[1])?))?;
        s.check(format!("exp/rank{rank}"), &[x.clone()], |t| weighted_sum(&t[0].exp()))?;
        s.check(format!("log/rank{rank}"), &[pos.clone()], |t| weighted_sum(&t[0].log()))?;
        s.check(format!("tanh/rank{rank}"), &[x.clone()], |t| weighted_sum(&t[0].tanh()))?;
        s.check(format!("sigmoid/rank{rank}"), &[x.clone()], |t| weighted_sum(&t[0].sigmoid()))?;
        s.check(format!("relu/rank{rank}"), &[kinked.clone()], |t| weighted_sum(&t[0].relu()))?;
        s.check(format!("abs/rank{rank}"), &[kinked.clone()], |t| weighted_sum(&t[0].abs()))?;
        s.check(format!("clamp/rank{rank}"), &[kinked.clone()], |t| weighted_sum(&t[0].clamp(-0.5, 0.5)))?;
        s.check(format!("sum/rank{rank}"), &[x.clone()], |t| Ok(t[0].sum().square()?))?;
        s.check(format!("mean/rank{rank}"), &[x.clone()], |t| Ok(t[0].mean().square()?))?;
        if rank == 0 {
            continue;
        }
        s.check(format!("softmax/rank{rank}"), &[x.clone()], |t| weighted_sum(&t[0].softmax()?))?;
        s.check(format!("reshape/rank{rank}"), &[x.clone()], |t| weighted_sum(&t[0].reshape(&[x.len()])?.tanh()))?;
        for axis in 0..rank {
            let len = shape[axis];
            s.check(format!("sum_axis{axis}/rank{rank}"), &[x.clone()], |t| weighted_sum(&t[0].sum_axis(axis)?.square()?))?;
            s.check(format!("mean_axis{axis}/rank{rank}"), &[x.clone()], |t| weighted_sum(&t[0].mean_axis(axis)?.square()?))?;
            s.check(format!("slice_axis{axis}/rank{rank}"), &[x.clone()], |t| {
                weighted_sum(&t[0].slice(axis, len / 2, len - len / 2)?.square()?)
            })?;
            s.check(format!("concat_axis{axis}/rank{rank}"), &[x.clone(), y.clone()], |t| {
                weighted_sum(&Tensor::concat(&[&t[0], &t[1], &t[0]], axis)?.tanh())
            })?;
        }
        if rank >= 2 {
            let mut axes: Vec<usize> = (0..rank).rev().collect();
            axes.rotate_left(1);
            s.check(format!("permute/rank{rank}"), &[x.clone()], |t| weighted_sum(&t[0].permute(&axes)?.square()?))?;
            s.check(format!("transpose/rank{rank}"), &[x.clone()], |t| weighted_sum(&t[0].transpose()?.square()?))?;
        }
    }

    let mut r = s.rng();
    let bcast: [(&[usize], &[usize]); 4] = [(&[2, 3, 4], &[4]), (&[2, 1, 4], &[3, 1]), (&[3, 4], &[]), (&[1, 3], &[2, 1])];
    for (i, (a, b)) in bcast.into_iter().enumerate() {
        let x = normal(&mut r, a);
        let y = NdArray::from_fn(b.to_vec(), |_| rng::uniform(&mut r, 0.5, 2.0));
        s.check(format!("broadcast{i}/add"), &[x.clone(), y.clone()], |t| weighted_sum(&t[0].add(&t[1])?))?;
        s.check(format!("broadcast{i}/sub"), &[y.clone(), x.clone()], |t| weighted_sum(&t[0].sub(&t[1])?))?;
        s.check(format!("broadcast{i}/mul"), &[x.clone(), y.clone()], |t| weighted_sum(&t[0].mul(&t[1])?))?;
        s.check(format!("broadcast{i}/div"), &[x.clone(), y.clone()], |t| weighted_sum(&t[0].div(&t[1])?))?;
    }

    let mm: [(&[usize], &[usize]); 4] = [(&[3, 4], &[4, 2]), (&[2, 3, 4], &[2, 4, 5]), (&[2, 3, 4], &[4, 5]), (&[3, 4], &[2, 4, 5])];
    for (i, (a, b)) in mm.into_iter().enumerate() {
        let x = normal(&mut r, a);
        let y = normal(&mut r, b);
        s.check(format!("matmul{i}"), &[x, y], |t| weighted_sum(&t[0].matmul(&t[1])?))?;
    }

    let x = normal(&mut r, &[4, 3]);
    let index = Rc::new(vec![2, PAD, 0, 2, 3, PAD, 1]);
    s.check("gather/rows", &[x.clone()], |t| weighted_sum(&t[0].gather(index.clone(), 3)?.square()?))?;
    let flat = Rc::new(vec![11, 0, PAD, 5, 5, 7]);
    s.check("gather/scalars", &[x], |t| weighted_sum(&t[0].gather(flat.clone(), 1)?.square()?))?;
    Ok(())
}

fn layers(s: &mut Suite) -> Result<()> {
    let mut r = s.rng();
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 3, &mut r);
    let ln = LayerNorm::new(&mut store, "ln", 6);
    let bn = BatchNorm::new(&mut store, "bn", 3);
    let conv = Conv2d::new(&mut store, "conv", 3, 4, 3, 2, 1, true, &mut r);
    let patch = Conv2d::new(&mut store, "patch", 3, 2, 2, 2, 0, false, &mut r);
    perturb(&mut store, 0.2, &mut r);
    let ids = |p: &str| store.with_prefix(p).filter(|&id| store.entry(id).kind != ParamKind::Buffer).collect::<Vec<_>>();

    let (lin_ids, ln_ids, bn_ids) = (ids("lin."), ids("ln."), ids("bn."));
    let (conv_ids, patch_ids) = (ids("conv."), ids("patch."));
    s.check_params("linear", &store, &lin_ids, vec![normal(&mut r, &[2, 4, 5])], None, |ctx, x| {
        weighted_sum(&lin.forward(ctx, &x[0])?)
    })?;
    s.check_params("layer_norm", &store, &ln_ids, vec![normal(&mut r, &[3, 6])], None, |ctx, x| {
        weighted_sum(&ln.forward(ctx, &x[0])?)
    })?;
    s.check_params("batch_norm", &store, &bn_ids, vec![normal(&mut r, &[2, 3, 2, 3])], None, |ctx, x| {
        weighted_sum(&bn.forward(ctx, &x[0])?)
    })?;
    s.check_params("conv2d/3x3", &store, &conv_ids, vec![normal(&mut r, &[2, 5, 4, 3])], None, |ctx, x| {
        weighted_sum(&conv.forward(ctx, &x[0])?)
    })?;
    s.check_params("conv2d/patchify", &store, &patch_ids, vec![normal(&mut r, &[1, 4, 6, 3])], None, |ctx, x| {
        weighted_sum(&patch.forward(ctx, &x[0])?)
    })?;

    let map = normal(&mut r, &[4, 5, 3]);
    let p = NdArray::from_vec(vec![1.37, 2.61]);
    s.check("bilinear_sample/interior", &[map.clone(), p], |t| weighted_sum(&bilinear_sample(&t[0], &t[1])?))?;
    let edge = NdArray::from_vec(vec![-0.42, 3.3]);
    s.check("bilinear_sample/border", &[map, edge], |t| weighted_sum(&bilinear_sample(&t[0], &t[1])?))?;
    Ok(())
}

fn attention(s: &mut Suite) -> Result<()> {
    let mut r = s.rng();
    let shape = EmsdaShape { heads: 2, levels: 2, points: 3, dim: 8 };
    let mut store = ParamStore::new();
    let params = EmsdaParams::new(&mut store, "attn", shape, &mut r)?;
    perturb(&mut store, 0.3, &mut r);
    let ids = trainable(&store);
    let q = normal(&mut r, &[3, 2, 8]);
    let refs = NdArray::from_fn([3, 2, 2], |_| rng::uniform(&mut r, 0.1, 0.9));
    let l0 = normal(&mut r, &[2, 5, 4, 8]);
    let l1 = normal(&mut r, &[2, 3, 2, 8]);
    s.check_params("emsda", &store, &ids, vec![q, refs, l0, l1], None, |ctx, x| {
        let out = emsda_forward(ctx, &params, &x[0], &x[1], &x[2..], &|n| n % 2)?;
        weighted_sum(&out.out)
    })?;

    let mut store = ParamStore::new();
    let proj = Linear::new(&mut store, "ref", 6, 2, &mut r);
    let ids = trainable(&store);
    let q = normal(&mut r, &[2, 3, 6]);
    let p = NdArray::from_fn([2, 3, 2], |_| rng::uniform(&mut r, 0.05, 0.95));
    s.check_params("refine_reference/two_steps", &store, &ids, vec![q, p], None, |ctx, x| {
        let once = refine_reference(ctx, &proj, &x[0], &x[1])?;
        weighted_sum(&refine_reference(ctx, &proj, &x[0], &once)?)
    })
}

/// The configuration used by the model-level checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { input_size: (16, 16), channels: vec![4, 6, 8], strides: vec![2, 4, 8], keypoints: 4, embed_dim: 16 },
        decoder: DecoderConfig { layers: 2, heads: 2, points: 2, levels: 2, dim: 16, ffn_dim: 32 },
        flow: FlowConfig { layers: 4, hidden: 8 },
        ..ModelConfig::default()
    }
}

fn model_paths(s: &mut Suite) -> Result<()> {
    let mut r = s.rng();
    let seed = s.seed;
    let mut model = PoseModel::new(&tiny_model_config(), seed)?;
    perturb(&mut model.store, 0.1, &mut r);
    model.coarse_flow.randomize(&mut model.store, 0.5, &mut r);
    model.decoder_flow.randomize(&mut model.store, 0.5, &mut r);
    let store = &model.store;
    let prefixed = |p: &str| store.with_prefix(p).filter(|&id| store.entry(id).kind != ParamKind::Buffer).collect::<Vec<_>>();
    let b = 2;
    let k = model.keypoints();
    let gt = NdArray::from_fn([b, k, 2], |_| rng::uniform(&mut r, 0.05, 0.95));

    // Flow weights under every likelihood mode.
    let flow_ids = prefixed("flow.decoder");
    for mode in [LikelihoodMode::Flow, LikelihoodMode::Residual, LikelihoodMode::LaplaceOnly] {
        let mu = NdArray::from_fn([b, k, 2], |_| rng::uniform(&mut r, 0.1, 0.9));
        let scale = NdArray::from_fn([b, k, 2], |_| rng::uniform(&mut r, 0.05, 0.5));
        let ids = if mode == LikelihoodMode::LaplaceOnly { vec![] } else { flow_ids.clone() };
        s.check_params(format!("rle_loss/{mode:?}"), store, &ids, vec![mu, scale], None, |ctx, x| {
            let pred = LaplaceTensors { mu: x[0].clone(), scale: x[1].clone() };
            rle_loss(ctx, &pred, &gt, Some(&model.decoder_flow), mode)
        })?;
    }
    let x = NdArray::from_fn([6, 2], |_| rng::normal(&mut r, 1.5));
    s.check_params("flow_log_prob", store, &flow_ids, vec![x], None, |ctx, x| {
        Ok(model.decoder_flow.log_prob(ctx, &x[0])?.sum())
    })?;

    // Coarse head through the coarse loss.
    let mut ids = prefixed("backbone.coarse_head");
    ids.extend(prefixed("flow.coarse"));
    let pooled = normal(&mut r, &[b, 8]);
    s.check_params("coarse_head/loss", store, &ids, vec![pooled], None, |ctx, x| {
        let p = model.backbone.coarse_proposal(ctx, &x[0])?;
        rle_loss(ctx, &LaplaceTensors { mu: p.mu, scale: p.scale }, &gt, Some(&model.coarse_flow), LikelihoodMode::Flow)
    })?;

    // Backbone features from pixels.
    let ids = prefixed("backbone.");
    let img = NdArray::from_fn([b, 16, 16, 3], |_| rng::uniform(&mut r, 0.0, 1.0));
    s.check_params("backbone/pyramid", store, &ids, vec![img.clone()], Some(MODEL_ENTRIES), |ctx, x| {
        let p = model.backbone.extract_pyramid_hwc(ctx, &x[0])?;
        let mut acc = weighted_sum(&p.pooled)?;
        for l in &p.levels {
            acc = acc.add(&weighted_sum(l)?)?;
        }
        Ok(acc)
    })?;

    // Query initialisation and the whole decoder through the decoder loss,
    // with both query groups and per-layer supervision.
    let mut ids = prefixed("decoder.");
    ids.extend(prefixed("encoder."));
    ids.extend(flow_ids.iter().copied());
    let proposal = NdArray::from_fn([b, k, 2], |_| rng::uniform(&mut r, 0.1, 0.9));
    let level0 = normal(&mut r, &[b, 4, 4, 6]);
    let level1 = normal(&mut r, &[b, 2, 2, 8]);
    let dec = &model.decoder;
    let enc: &KeypointEncoder = &model.encoder;
    s.check_params("decoder/loss", store, &ids, vec![level0, level1], Some(MODEL_ENTRIES), |ctx, x| {
        let pyramid = FeaturePyramid {
            levels: vec![x[0].clone(), x[0].clone(), x[1].clone()],
            pooled: x[1].constant_like(NdArray::zeros([b, 8])),
        };
        let qs = enc.init_queries(ctx, &proposal, Some(seed))?;
        let out = dec.forward(ctx, &qs, &pyramid)?;
        let losses = out
            .layers
            .iter()
            .map(|l| rle_loss(ctx, &l.laplace, &gt, Some(&model.decoder_flow), LikelihoodMode::Flow))
            .collect::<Result<Vec<_>>>()?;
        let mut total = losses[0].clone();
        for l in &losses[1..] {
            total = total.add(l)?;
        }
        total.scale(1.0 / losses.len() as f64)
    })?;

    // Everything together: pixels to the total loss.
    let ids = trainable(store);
    s.check_params("model/total_loss", store, &ids, vec![img], Some(MODEL_ENTRIES / 2), |ctx, x| {
        let out = model.forward_tensor(ctx, &x[0], ForwardOptions { noise_seed: Some(seed), proposal_noise: None })?;
        let layers: Vec<LaplaceTensors> = out.decoder.layers.iter().map(|l| l.laplace.clone()).collect();
        let flows = LossFlows { coarse: Some(&model.coarse_flow), decoder: Some(&model.decoder_flow) };
        total_loss(ctx, &out.coarse, &layers, &gt, flows, LikelihoodMode::Flow, 1.0)
    })
}

/// Runs every check. Errors are reported as failures of the whole suite;
/// tolerance failures are left to the caller via [`GradCheck::passed`].
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut s = Suite { out: Vec::new(), seed };
    primitives(&mut s)?;
    layers(&mut s)?;
    attention(&mut s)?;
    model_paths(&mut s)?;
    Ok(s.out)
}

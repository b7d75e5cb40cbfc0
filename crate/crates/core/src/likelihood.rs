//! Residual log-likelihood losses and Laplace confidence scores.
//!
//! A regression output is a per-axis Laplace location `mu` and scale `b`.
//! Training standardizes the ground truth as `x = (gt - mu) / b` and scores it
//! under a learned density; inference keeps only the Laplace part and turns
//! `b` into a confidence.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::nn::Linear;
use crate::numerics::{NdArray, Tensor};
use crate::params::{Ctx, ParamStore};
use crate::rng::{self, SplitMix64};

/// Log-scales of every coupling layer lie in `[-LOG_SCALE_BOUND, LOG_SCALE_BOUND]`.
pub const LOG_SCALE_BOUND: f64 = 3.0;

/// Half-width of the scoring window, in normalized units.
pub const DEFAULT_SCORE_A: f64 = 0.2;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Plain Laplace parameters, `[.., K, 2]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceParams {
    pub mu: NdArray,
    pub scale: NdArray,
}

impl LaplaceParams {
    pub fn new(mu: NdArray, scale: NdArray) -> Result<Self> {
        if mu.shape() != scale.shape() || mu.shape().last() != Some(&2) {
            return contract(format!("mu {:?} and scale {:?} must match with last dim 2", mu.shape(), scale.shape()));
        }
        if scale.data().iter().any(|&b| !(b > 0.0)) {
            return contract("Laplace scale must be strictly positive");
        }
        Ok(Self { mu, scale })
    }
}

/// Graph Laplace parameters, `[B, K, 2]` each.
#[derive(Debug, Clone)]
pub struct LaplaceTensors {
    pub mu: Tensor,
    pub scale: Tensor,
}

impl LaplaceTensors {
    pub fn values(&self) -> LaplaceParams {
        LaplaceParams { mu: self.mu.value().clone(), scale: self.scale.value().clone() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodMode {
    /// Standard Laplace density only.
    LaplaceOnly,
    /// Flow density only.
    #[default]
    Flow,
    /// Laplace log-density plus flow log-density (unnormalized).
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { layers: 4, hidden: 16 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(ctx, &self.l1.forward(ctx, x)?.tanh())
    }

    fn eval(&self, store: &ParamStore, x: f64) -> f64 {
        let (w1, b1) = (store.get(self.l1.weight).data(), store.get(self.l1.bias.expect("bias")).data());
        let (w2, b2) = (store.get(self.l2.weight).data(), store.get(self.l2.bias.expect("bias")).data());
        let mut out = b2[0];
        for j in 0..w1.len() {
            out += (x * w1[j] + b1[j]).tanh() * w2[j];
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Coupling {
    /// Axis transformed by this layer; the other axis conditions it.
    axis: usize,
    scale: Mlp,
    shift: Mlp,
}

/// Stack of affine couplings on `R^2` over a standard normal base.
///
/// Layer `d` keeps axis `1 - d % 2` and maps axis `d % 2` as
/// `z -> z * exp(s) + t`, with `s = 3 tanh(scale_net(other))`.
#[derive(Debug, Clone)]
pub struct FlowModel {
    layers: Vec<Coupling>,
}

impl FlowModel {
    /// Hidden layers are random and output layers zero, so a fresh flow is the identity.
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FlowConfig, rng: &mut SplitMix64) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 {
            return config("flow needs at least one coupling layer and hidden unit");
        }
        let mut mlp = |store: &mut ParamStore, n: String| Mlp {
            l1: Linear::new(store, &format!("{n}.l1"), 1, cfg.hidden, rng),
            l2: Linear::zeros(store, &format!("{n}.l2"), cfg.hidden, 1),
        };
        let layers = (0..cfg.layers)
            .map(|d| Coupling {
                axis: d % 2,
                scale: mlp(store, format!("{name}.c{d}.scale")),
                shift: mlp(store, format!("{name}.c{d}.shift")),
            })
            .collect();
        Ok(Self { layers })
    }

    /// Overwrites every flow weight with `N(0, std^2)` draws.
    pub fn randomize(&self, store: &mut ParamStore, std: f64, rng: &mut SplitMix64) {
        for c in &self.layers {
            for l in [c.scale.l1, c.scale.l2, c.shift.l1, c.shift.l2] {
                for id in std::iter::once(l.weight).chain(l.bias) {
                    for v in store.get_mut(id).data_mut() {
                        *v = rng::normal(rng, std);
                    }
                }
            }
        }
    }

    /// `log N(f^-1(x)) + log |det d f^-1 / dx|` for rows of `[n, 2]`, giving `[n, 1]`.
    pub fn log_prob(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let &[n, 2] = x.shape() else { return contract(format!("flow input must be [n, 2], got {:?}", x.shape())) };
        let mut cols = [x.slice(1, 0, 1)?, x.slice(1, 1, 1)?];
        let mut log_det: Option<Tensor> = None;
        for c in self.layers.iter().rev() {
            let cond = &cols[1 - c.axis];
            let s = c.scale.forward(ctx, cond)?.tanh().scale(LOG_SCALE_BOUND)?;
            let t = c.shift.forward(ctx, cond)?;
            cols[c.axis] = cols[c.axis].sub(&t)?.mul(&s.neg()?.exp())?;
            let neg = s.neg()?;
            log_det = Some(match log_det {
                Some(d) => d.add(&neg)?,
                None => neg,
            });
        }
        let sq = cols[0].square()?.add(&cols[1].square()?)?;
        let base = sq.scale(-0.5)?.add_scalar(-LN_2PI)?;
        match log_det {
            Some(d) => base.add(&d),
            None => Ok(base),
        }
        .and_then(|t| t.reshape(&[n, 1]))
    }

    /// Plain evaluation of [`FlowModel::log_prob`] at one point.
    pub fn log_prob_at(&self, store: &ParamStore, x: [f64; 2]) -> f64 {
        let mut z = x;
        let mut log_det = 0.0;
        for c in self.layers.iter().rev() {
            let cond = z[1 - c.axis];
            let s = LOG_SCALE_BOUND * c.scale.eval(store, cond).tanh();
            z[c.axis] = (z[c.axis] - c.shift.eval(store, cond)) * (-s).exp();
            log_det -= s;
        }
        -0.5 * (z[0] * z[0] + z[1] * z[1]) - LN_2PI + log_det
    }

    /// Forward map `f` from base samples to data space.
    pub fn forward_map(&self, store: &ParamStore, z: [f64; 2]) -> [f64; 2] {
        let mut x = z;
        for c in &self.layers {
            let cond = x[1 - c.axis];
            let s = LOG_SCALE_BOUND * c.scale.eval(store, cond).tanh();
            x[c.axis] = x[c.axis] * s.exp() + c.shift.eval(store, cond);
        }
        x
    }
}

/// Log-density of the standardized residual, per row `[n, 1]`.
fn residual_log_prob(ctx: &Ctx, xbar: &Tensor, flow: Option<&FlowModel>, mode: LikelihoodMode) -> Result<Tensor> {
    let n = xbar.shape()[0];
    let laplace = || -> Result<Tensor> {
        xbar.abs().sum_axis(1)?.neg()?.add_scalar(-2.0 * std::f64::consts::LN_2)?.reshape(&[n, 1])
    };
    let flow = || flow.ok_or_else(|| crate::Error::Config("flow likelihood needs a flow model".into()));
    match mode {
        LikelihoodMode::LaplaceOnly => laplace(),
        LikelihoodMode::Flow => flow()?.log_prob(ctx, xbar),
        LikelihoodMode::Residual => laplace()?.add(&flow()?.log_prob(ctx, xbar)?),
    }
}

/// Negative log-likelihood of `gt` under `pred`, summed over keypoints and
/// axes and averaged over the leading (batch) axis.
///
/// `pred` is `[R, K, 2]`; `gt` is `[B, K, 2]` with `R` a multiple of `B`,
/// row `r` being compared with image `r / (R / B)`.
pub fn rle_loss(
    ctx: &Ctx,
    pred: &LaplaceTensors,
    gt: &NdArray,
    flow: Option<&FlowModel>,
    mode: LikelihoodMode,
) -> Result<Tensor> {
    let shape = pred.mu.shape().to_vec();
    let &[rows, k, 2] = shape.as_slice() else {
        return contract(format!("prediction must be [R, K, 2], got {shape:?}"));
    };
    if pred.scale.shape() != shape.as_slice() {
        return contract("prediction location and scale shapes differ");
    }
    if pred.scale.data().iter().any(|&b| !(b > 0.0)) {
        return contract("Laplace scale must be strictly positive");
    }
    let &[b, gk, 2] = gt.shape() else { return contract(format!("ground truth must be [B, K, 2], got {:?}", gt.shape())) };
    if gk != k || b == 0 || rows % b != 0 {
        return contract(format!("ground truth {:?} does not match prediction {shape:?}", gt.shape()));
    }
    let groups = rows / b;
    let gt = if groups == 1 {
        gt.clone()
    } else {
        let per = k * 2;
        NdArray::from_fn(shape.clone(), |i| gt.data()[(i / per / groups) * per + i % per])
    };
    let xbar = ctx.constant(gt).sub(&pred.mu)?.div(&pred.scale)?.reshape(&[rows * k, 2])?;
    let log_p = residual_log_prob(ctx, &xbar, flow, mode)?;
    let nll = log_p.sum().neg()?.add(&pred.scale.log().sum())?;
    nll.scale(1.0 / rows as f64)
}

/// `coarse + lambda * mean(layers)`. With `lambda == 0` the coarse term is
/// returned as is, so nothing downstream of the decoder enters the graph.
pub fn combine_losses(coarse: &Tensor, layers: &[Tensor], lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return config(format!("loss weight lambda must be non-negative, got {lambda}"));
    }
    if layers.is_empty() {
        return contract("total loss needs at least one decoder layer");
    }
    if lambda == 0.0 {
        return Ok(coarse.clone());
    }
    let mut dec = layers[0].clone();
    for l in &layers[1..] {
        dec = dec.add(l)?;
    }
    coarse.add(&dec.scale(lambda / layers.len() as f64)?)
}

/// Flows for the two loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossFlows<'a> {
    pub coarse: Option<&'a FlowModel>,
    pub decoder: Option<&'a FlowModel>,
}

/// Total training loss over the coarse proposal and the supervised decoder layers.
pub fn total_loss(
    ctx: &Ctx,
    coarse: &LaplaceTensors,
    layers: &[LaplaceTensors],
    gt: &NdArray,
    flows: LossFlows,
    mode: LikelihoodMode,
    lambda: f64,
) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return config(format!("loss weight lambda must be non-negative, got {lambda}"));
    }
    if layers.is_empty() {
        return contract("total loss needs at least one decoder layer");
    }
    let fc = rle_loss(ctx, coarse, gt, flows.coarse, mode)?;
    if lambda == 0.0 {
        return Ok(fc);
    }
    let dec = layers.iter().map(|l| rle_loss(ctx, l, gt, flows.decoder, mode)).collect::<Result<Vec<_>>>()?;
    combine_losses(&fc, &dec, lambda)
}

/// Laplace mass within `[mu - a, mu + a]`: `1 - exp(-a / b)`.
pub fn axis_score(b: f64, a: f64) -> f64 {
    -(-a / b).exp_m1()
}

/// Per-keypoint confidence: the product of the two axis scores.
pub fn keypoint_score(params: &LaplaceParams, a: f64) -> Result<Vec<f64>> {
    if !(a > 0.0) {
        return contract(format!("score window a must be positive, got {a}"));
    }
    Ok(params.scale.data().chunks(2).map(|b| axis_score(b[0], a) * axis_score(b[1], a)).collect())
}

/// Standard-normal negative log-likelihood of `x` (the zero-flow reference).
pub fn normal_nll(x: [f64; 2]) -> f64 {
    0.5 * (x[0] * x[0] + x[1] * x[1]) + LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check_many, Graph};

    fn params(ctx: &Ctx, mu: &[f64], b: &[f64], k: usize) -> LaplaceTensors {
        let g = ctx.graph();
        LaplaceTensors {
            mu: g.leaf(NdArray::new([1, k, 2], mu.to_vec()).unwrap()),
            scale: g.leaf(NdArray::new([1, k, 2], b.to_vec()).unwrap()),
        }
    }

    #[test]
    fn laplace_centre_loss_is_zero() {
        let store = ParamStore::new();
        let ctx = Ctx::new(&store, true);
        let p = params(&ctx, &[0.3, 0.7], &[0.5, 0.5], 1);
        let gt = NdArray::new([1, 1, 2], vec![0.3, 0.7]).unwrap();
        let l = rle_loss(&ctx, &p, &gt, None, LikelihoodMode::LaplaceOnly).unwrap();
        assert!(l.value().item().unwrap().abs() < 1e-15);
    }

    #[test]
    fn laplace_loss_decreases_toward_truth() {
        let store = ParamStore::new();
        let ctx = Ctx::new(&store, true);
        let gt = NdArray::new([1, 1, 2], vec![0.5, 0.5]).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let x = 0.1 + 0.04 * step as f64;
            let p = params(&ctx, &[x, 0.5], &[0.2, 0.2], 1);
            let l = rle_loss(&ctx, &p, &gt, None, LikelihoodMode::LaplaceOnly).unwrap().value().item().unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn nonpositive_scale_is_contract_violation() {
        let store = ParamStore::new();
        let ctx = Ctx::new(&store, true);
        let p = params(&ctx, &[0.3, 0.7], &[0.5, 0.0], 1);
        let gt = NdArray::zeros([1, 1, 2]);
        assert!(matches!(rle_loss(&ctx, &p, &gt, None, LikelihoodMode::LaplaceOnly), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn zero_flow_is_standard_normal() {
        let mut store = ParamStore::new();
        let flow = FlowModel::new(&mut store, "f", &FlowConfig::default(), &mut rng::stream(0, 0)).unwrap();
        for c in &flow.layers {
            for l in [c.scale.l1, c.shift.l1] {
                *store.get_mut(l.weight) = NdArray::zeros([1, 16]);
            }
        }
        assert!((flow.log_prob_at(&store, [0.0, 0.0]) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let ctx = Ctx::new(&store, true);
        let p = params(&ctx, &[0.2, 0.4, 0.9, 0.1], &[0.3, 0.5, 0.2, 0.7], 2);
        let gt = NdArray::new([1, 2, 2], vec![0.25, 0.1, 0.5, 0.5]).unwrap();
        let l = rle_loss(&ctx, &p, &gt, Some(&flow), LikelihoodMode::Flow).unwrap().value().item().unwrap();
        let mut want = 0.0;
        for kp in 0..2 {
            let x = [(gt.data()[2 * kp] - p.mu.data()[2 * kp]) / p.scale.data()[2 * kp],
                (gt.data()[2 * kp + 1] - p.mu.data()[2 * kp + 1]) / p.scale.data()[2 * kp + 1]];
            want += normal_nll(x) + p.scale.data()[2 * kp].ln() + p.scale.data()[2 * kp + 1].ln();
        }
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    }

    #[test]
    fn plain_and_graph_flow_agree_and_invert() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(4, 0);
        let flow = FlowModel::new(&mut store, "f", &FlowConfig::default(), &mut r).unwrap();
        flow.randomize(&mut store, 0.7, &mut r);
        let pts: Vec<f64> = (0..20).map(|_| rng::normal(&mut r, 2.0)).collect();
        let ctx = Ctx::new(&store, false);
        let lp = flow.log_prob(&ctx, &ctx.constant(NdArray::new([10, 2], pts.clone()).unwrap())).unwrap();
        for i in 0..10 {
            let x = [pts[2 * i], pts[2 * i + 1]];
            assert!((lp.data()[i] - flow.log_prob_at(&store, x)).abs() < 1e-12);
        }
        // log p(f(z)) = log N(z) - log|det df/dz|; check via a finite-difference Jacobian.
        let z = [0.3, -0.8];
        let x = flow.forward_map(&store, z);
        let h = 1e-6;
        let d = |i: usize| {
            let (mut a, mut b) = (z, z);
            a[i] += h;
            b[i] -= h;
            let (fa, fb) = (flow.forward_map(&store, a), flow.forward_map(&store, b));
            [(fa[0] - fb[0]) / (2.0 * h), (fa[1] - fb[1]) / (2.0 * h)]
        };
        let (c0, c1) = (d(0), d(1));
        let det = (c0[0] * c1[1] - c0[1] * c1[0]).abs();
        let want = -normal_nll(z) - det.ln();
        assert!((flow.log_prob_at(&store, x) - want).abs() < 1e-6);
    }

    #[test]
    fn flow_rle_gradcheck() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(6, 0);
        let flow = FlowModel::new(&mut store, "f", &FlowConfig { layers: 4, hidden: 5 }, &mut r).unwrap();
        flow.randomize(&mut store, 0.5, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let mu = NdArray::from_fn([2, 3, 2], |_| rng::uniform(&mut r, 0.2, 0.8));
        let b = NdArray::from_fn([2, 3, 2], |_| rng::uniform(&mut r, 0.1, 0.6));
        let gt = NdArray::from_fn([2, 3, 2], |_| rng::uniform(&mut r, 0.0, 1.0));
        let mut inputs = vec![mu, b];
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        for mode in [LikelihoodMode::Flow, LikelihoodMode::Residual, LikelihoodMode::LaplaceOnly] {
            let err = finite_diff_check_many(
                |xs| {
                    let ctx = Ctx::with_graph(&store, true, xs[0].graph());
                    ctx.bind(ids.iter().copied().zip(xs[2..].iter().cloned()));
                    let pred = LaplaceTensors { mu: xs[0].clone(), scale: xs[1].clone() };
                    rle_loss(&ctx, &pred, &gt, Some(&flow), mode)
                },
                &inputs,
                1e-5,
                None,
                0,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn lambda_rules() {
        let g = Graph::new(0);
        let c = g.leaf(NdArray::scalar(1.5));
        let d = g.leaf(NdArray::scalar(1.5));
        assert_eq!(combine_losses(&c, &[d.clone()], 1.0).unwrap().value().item().unwrap(), 3.0);
        let zero = combine_losses(&c, &[d.clone()], 0.0).unwrap();
        assert_eq!(zero.value().item().unwrap(), 1.5);
        assert!(!zero.backward().unwrap().reached(&d));
        assert!(matches!(combine_losses(&c, &[d], -0.1), Err(crate::Error::Config(_))));
        assert!(combine_losses(&c, &[], 1.0).is_err());
    }

    #[test]
    fn score_examples() {
        let a = 0.2;
        let lp = LaplaceParams::new(NdArray::zeros([1, 2]), NdArray::full([1, 2], a / std::f64::consts::LN_2)).unwrap();
        assert!((keypoint_score(&lp, a).unwrap()[0] - 0.25).abs() < 1e-15);
        let tight = LaplaceParams::new(NdArray::zeros([1, 2]), NdArray::full([1, 2], 1e-6)).unwrap();
        assert_eq!(keypoint_score(&tight, a).unwrap()[0], 1.0);
        assert!(keypoint_score(&lp, 0.0).is_err());
        let mut prev = 0.0;
        for i in 1..50 {
            let s = axis_score(0.3, 0.02 * i as f64);
            assert!(s > prev);
            prev = s;
        }
    }
}

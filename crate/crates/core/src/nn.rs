//! Layers composed from graph primitives.

use std::rc::Rc;

use crate::error::{contract, Result};
use crate::numerics::{NdArray, Tensor, PAD};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::rng::{self, SplitMix64};

/// Glorot-uniform weight of shape `[fan_in, fan_out]`.
pub fn glorot(rng: &mut SplitMix64, fan_in: usize, fan_out: usize) -> NdArray {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    NdArray::from_fn([fan_in, fan_out], |_| rng::uniform(rng, -a, a))
}

/// He-normal weight of shape `[fan_in, fan_out]`.
pub fn he_normal(rng: &mut SplitMix64, fan_in: usize, fan_out: usize) -> NdArray {
    let std = (2.0 / fan_in as f64).sqrt();
    NdArray::from_fn([fan_in, fan_out], |_| rng::normal(rng, std))
}

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut SplitMix64) -> Self {
        let w = glorot(rng, in_dim, out_dim);
        Self::from_parts(store, name, w, Some(NdArray::zeros([out_dim])))
    }

    pub fn new_no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut SplitMix64) -> Self {
        let w = glorot(rng, in_dim, out_dim);
        Self::from_parts(store, name, w, None)
    }

    /// Zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_parts(store, name, NdArray::zeros([in_dim, out_dim]), Some(NdArray::zeros([out_dim])))
    }

    pub fn from_parts(store: &mut ParamStore, name: &str, weight: NdArray, bias: Option<NdArray>) -> Self {
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(format!("{name}.weight"), weight, ParamKind::Weight);
        let bias = bias.map(|b| store.add(format!("{name}.bias"), b, ParamKind::NoDecay));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        if x.shape().last() != Some(&self.in_dim) {
            return contract(format!("linear expects last dim {}, got {:?}", self.in_dim, x.shape()));
        }
        let shape = x.shape().to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let y = x.reshape(&[rows, self.in_dim])?.matmul(&ctx.param(self.weight))?;
        let y = match self.bias {
            Some(b) => y.add(&ctx.param(b))?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_dim;
        y.reshape(&out_shape)
    }

    /// Sets the optimizer step multiplier on both weight and bias.
    pub fn set_lr_scale(&self, store: &mut ParamStore, scale: f64) {
        store.set_lr_scale(self.weight, scale);
        if let Some(b) = self.bias {
            store.set_lr_scale(b, scale);
        }
    }
}

/// Normalisation over the last axis with learned affine terms.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), NdArray::full([dim], 1.0), ParamKind::NoDecay);
        let beta = store.add(format!("{name}.beta"), NdArray::zeros([dim]), ParamKind::NoDecay);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let axis = x.shape().len() - 1;
        let centered = x.sub(&x.mean_axis(axis)?)?;
        let var = centered.square()?.mean_axis(axis)?;
        let inv_std = var.add_scalar(self.eps)?.log().scale(-0.5)?.exp();
        centered.mul(&inv_std)?.mul(&ctx.param(self.gamma))?.add(&ctx.param(self.beta))
    }
}

/// Square-kernel convolution on channels-last `[B, H, W, C]` maps, via a
/// gathered patch matrix and one matmul. Zero padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let fan_in = kernel * kernel * in_ch;
        let weight = store.add(format!("{name}.weight"), he_normal(rng, fan_in, out_ch), ParamKind::Weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), NdArray::zeros([out_ch]), ParamKind::NoDecay));
        Self { weight, bias, kernel, stride, pad, in_ch, out_ch }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    /// Row indices (into the `[B*H*W, C]` view) of every patch element.
    fn patch_index(&self, b: usize, h: usize, w: usize) -> Vec<u32> {
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let mut idx = Vec::with_capacity(b * ho * wo * k * k);
        for n in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                idx.push(PAD);
                            } else {
                                idx.push((n * h * w + iy as usize * w + ix as usize) as u32);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let &[b, h, w, c] = x.shape() else {
            return contract(format!("conv expects [B, H, W, C], got {:?}", x.shape()));
        };
        if c != self.in_ch || h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return contract(format!("conv with {} input channels cannot take {:?}", self.in_ch, x.shape()));
        }
        let (ho, wo) = self.output_size(h, w);
        let patches = x.gather(Rc::new(self.patch_index(b, h, w)), c)?;
        let cols = patches.reshape(&[b * ho * wo, self.kernel * self.kernel * c])?;
        let mut y = cols.matmul(&ctx.param(self.weight))?;
        if let Some(bias) = self.bias {
            y = y.add(&ctx.param(bias))?;
        }
        y.reshape(&[b, ho, wo, self.out_ch])
    }
}

/// Per-channel batch normalisation over all non-channel axes, with running
/// statistics used outside training.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), NdArray::full([channels], 1.0), ParamKind::NoDecay),
            beta: store.add(format!("{name}.beta"), NdArray::zeros([channels]), ParamKind::NoDecay),
            running_mean: store.add(format!("{name}.running_mean"), NdArray::zeros([channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), NdArray::full([channels], 1.0), ParamKind::Buffer),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        if shape.last() != Some(&self.channels) {
            return contract(format!("batch norm over {} channels got {:?}", self.channels, shape));
        }
        let rows = x.numel() / self.channels;
        let flat = x.reshape(&[rows, self.channels])?;
        let (mean, var) = if ctx.is_train() {
            let mean = flat.mean_axis(0)?;
            let var = flat.sub(&mean)?.square()?.mean_axis(0)?;
            let m = self.momentum;
            let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
            let blend = |old: &NdArray, new: &[f64], f: f64| {
                NdArray::from_fn([self.channels], |i| (1.0 - m) * old.data()[i] + m * f * new[i])
            };
            let store = ctx.store();
            ctx.record_buffer(self.running_mean, blend(store.get(self.running_mean), mean.data(), 1.0));
            ctx.record_buffer(self.running_var, blend(store.get(self.running_var), var.data(), unbias));
            (mean, var)
        } else {
            (ctx.param(self.running_mean), ctx.param(self.running_var))
        };
        let inv_std = var.add_scalar(self.eps)?.log().scale(-0.5)?.exp();
        let y = flat.sub(&mean)?.mul(&inv_std)?.mul(&ctx.param(self.gamma))?.add(&ctx.param(self.beta))?;
        y.reshape(&shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check_many;

    #[test]
    fn conv_matches_direct_sum() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, 0);
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, 1, true, &mut r);
        *store.get_mut(conv.bias.unwrap()) = NdArray::from_vec(vec![0.1, -0.2, 0.3]);
        let x = NdArray::from_fn([1, 5, 4, 2], |i| ((i * 7) % 11) as f64 - 5.0);
        let ctx = Ctx::new(&store, false);
        let y = conv.forward(&ctx, &ctx.constant(x.clone())).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 3]);
        let w = store.get(conv.weight);
        for oy in 0..3 {
            for ox in 0..2 {
                for co in 0..3 {
                    let mut s = store.get(conv.bias.unwrap()).data()[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                let xv = x.data()[(iy as usize * 4 + ix as usize) * 2 + ci];
                                s += xv * w.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    let got = y.data()[(oy * 2 + ox) * 3 + co];
                    assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn layer_norm_and_batch_norm_gradcheck() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let bn = BatchNorm::new(&mut store, "bn", 4);
        let mut r = rng::stream(5, 0);
        let x = NdArray::from_fn([3, 4], |_| rng::normal(&mut r, 1.0));
        let w = NdArray::from_fn([3, 4], |_| rng::normal(&mut r, 1.0));
        let err = finite_diff_check_many(
            |xs| {
                let ctx = Ctx::with_graph(&store, true, xs[0].graph());
                let y = ln.forward(&ctx, &xs[0])?;
                let y = bn.forward(&ctx, &y)?;
                Ok(y.mul(&xs[1])?.sum())
            },
            &[x, w],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

//! Multi-scale deformable attention.
//!
//! Each query predicts, per head `i`, level `l` and point `s`, an offset
//! `dp` (in level-grid units) and an attention logit. Head `i` averages the
//! features sampled at `phi_l(p) + dp` with the softmaxed weights, projects the
//! average with `W^v_i`, and the concatenated heads pass through `W^o`.
//!
//! The graph op is the batched training path. [`emsda_reference`] and
//! [`msda_oracle`] are plain-array kernels used to cross-check it and to
//! count floating-point work: the former projects each sample, the latter
//! projects whole feature maps before sampling.

use std::rc::Rc;

use serde::Serialize;

use super::sampling::{sample_rows, GridRef};
use crate::error::{config, contract, Result};
use crate::nn::Linear;
use crate::numerics::{softmax, NdArray, Tensor};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::rng::{self, SplitMix64};

/// Heads, levels, sampling points and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EmsdaShape {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub dim: usize,
}

impl EmsdaShape {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.levels == 0 || self.points == 0 || self.dim == 0 {
            return config(format!("attention shape {self:?} has a zero dimension"));
        }
        if self.dim % self.heads != 0 {
            return config(format!("width {} not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Sampling locations per query, `M * L * S`.
    pub fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// Graph parameters of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct EmsdaParams {
    pub shape: EmsdaShape,
    /// `C -> M*L*S*2`, laid out `[M, L, S, (x, y)]`.
    pub offsets: Linear,
    /// `C -> M*L*S`, laid out `[M, L, S]`.
    pub attn: Linear,
    /// `[M, C, C/M]`.
    pub value: ParamId,
    pub output: Linear,
}

impl EmsdaParams {
    /// Offsets start at zero and the attention logits uniform, so every head
    /// initially averages the features at the reference point.
    pub fn new(store: &mut ParamStore, name: &str, shape: EmsdaShape, rng: &mut SplitMix64) -> Result<Self> {
        shape.validate()?;
        let c = shape.dim;
        let offsets = Linear::zeros(store, &format!("{name}.offsets"), c, shape.samples() * 2);
        let attn = Linear::zeros(store, &format!("{name}.attn"), c, shape.samples());
        let std = (2.0 / (c + shape.head_dim()) as f64).sqrt();
        let v = NdArray::from_fn([shape.heads, c, shape.head_dim()], |_| rng::normal(rng, std));
        let value = store.add(format!("{name}.value"), v, ParamKind::Weight);
        let output = Linear::new(store, &format!("{name}.output"), c, c, rng);
        Ok(Self { shape, offsets, attn, value, output })
    }

    /// Current values as plain arrays.
    pub fn weights(&self, store: &ParamStore) -> EmsdaWeights {
        let bias = |l: &Linear, n: usize| l.bias.map_or_else(|| NdArray::zeros([n]), |b| store.get(b).clone());
        EmsdaWeights {
            shape: self.shape,
            offset_w: store.get(self.offsets.weight).clone(),
            offset_b: bias(&self.offsets, self.shape.samples() * 2),
            attn_w: store.get(self.attn.weight).clone(),
            attn_b: bias(&self.attn, self.shape.samples()),
            value: store.get(self.value).clone(),
            out_w: store.get(self.output.weight).clone(),
            out_b: bias(&self.output, self.shape.dim),
        }
    }

    /// Registers `w` as a fresh parameter block.
    pub fn from_weights(store: &mut ParamStore, name: &str, w: &EmsdaWeights) -> Result<Self> {
        w.validate()?;
        Ok(Self {
            shape: w.shape,
            offsets: Linear::from_parts(store, &format!("{name}.offsets"), w.offset_w.clone(), Some(w.offset_b.clone())),
            attn: Linear::from_parts(store, &format!("{name}.attn"), w.attn_w.clone(), Some(w.attn_b.clone())),
            value: store.add(format!("{name}.value"), w.value.clone(), ParamKind::Weight),
            output: Linear::from_parts(store, &format!("{name}.output"), w.out_w.clone(), Some(w.out_b.clone())),
        })
    }
}

/// Plain-array weights: matrices are `[in, out]`, applied as `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmsdaWeights {
    pub shape: EmsdaShape,
    pub offset_w: NdArray,
    pub offset_b: NdArray,
    pub attn_w: NdArray,
    pub attn_b: NdArray,
    /// `[M, C, C/M]`, one value projection per head.
    pub value: NdArray,
    pub out_w: NdArray,
    pub out_b: NdArray,
}

impl EmsdaWeights {
    /// Gaussian weights; `offset_std` is in grid units.
    pub fn random(shape: EmsdaShape, offset_std: f64, rng: &mut SplitMix64) -> Result<Self> {
        shape.validate()?;
        let c = shape.dim;
        let ws = 1.0 / (c as f64).sqrt();
        let mut g = |dims: &[usize], std: f64| NdArray::from_fn(dims.to_vec(), |_| rng::normal(rng, std));
        Ok(Self {
            shape,
            offset_w: g(&[c, shape.samples() * 2], offset_std * ws),
            offset_b: g(&[shape.samples() * 2], offset_std),
            attn_w: g(&[c, shape.samples()], ws),
            attn_b: g(&[shape.samples()], 1.0),
            value: g(&[shape.heads, c, shape.head_dim()], ws),
            out_w: g(&[c, c], ws),
            out_b: g(&[c], 0.1),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        s.validate()?;
        let (c, n) = (s.dim, s.samples());
        let expect: [(&NdArray, Vec<usize>); 7] = [
            (&self.offset_w, vec![c, 2 * n]),
            (&self.offset_b, vec![2 * n]),
            (&self.attn_w, vec![c, n]),
            (&self.attn_b, vec![n]),
            (&self.value, vec![s.heads, c, s.head_dim()]),
            (&self.out_w, vec![c, c]),
            (&self.out_b, vec![c]),
        ];
        for (a, dims) in expect {
            if a.shape() != dims.as_slice() {
                return contract(format!("attention weight shape {:?}, expected {dims:?}", a.shape()));
            }
        }
        Ok(())
    }

    /// Sampling offsets `[M*L*S, 2]` and softmaxed attention `[M, L*S]` for one query.
    pub fn query_terms(&self, q: &[f64], counter: &mut FlopCounter) -> Result<(Vec<f64>, NdArray)> {
        let s = self.shape;
        let off = affine(q, &self.offset_w, &self.offset_b);
        let logits = affine(q, &self.attn_w, &self.attn_b);
        counter.offsets += 2 * (s.dim * s.samples() * 3) as u64;
        let attn = softmax(&NdArray::new([s.heads, s.levels * s.points], logits)?)?;
        Ok((off, attn))
    }
}

fn affine(x: &[f64], w: &NdArray, b: &NdArray) -> Vec<f64> {
    let n = b.len();
    let mut out = b.data().to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(&w.data()[i * n..(i + 1) * n]) {
            *o += xi * wij;
        }
    }
    out
}

/// Multiply-add work split by stage; each multiply-add counts as 2.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopCounter {
    pub value_proj: u64,
    pub sampling: u64,
    pub offsets: u64,
    pub output_proj: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.value_proj + self.sampling + self.offsets + self.output_proj
    }
}

/// Value-projection work of the sampled variant for `queries` queries.
pub fn emsda_value_flops(queries: u64, shape: &EmsdaShape) -> u64 {
    queries * shape.samples() as u64 * 2 * (shape.dim * shape.head_dim()) as u64
}

/// Value-projection work of projecting every position of `images` pyramids.
pub fn msda_value_flops(images: u64, level_sizes: &[(usize, usize)], dim: usize) -> u64 {
    let positions: usize = level_sizes.iter().map(|(h, w)| h * w).sum();
    images * positions as u64 * 2 * (dim * dim) as u64
}

/// `phi_l`: normalized `[0, 1]` coordinates to level-grid coordinates.
pub fn to_level_coords(p: [f64; 2], (h, w): (usize, usize)) -> [f64; 2] {
    [p[0] * (w as f64 - 1.0), p[1] * (h as f64 - 1.0)]
}

fn check_pyramid(shape: &EmsdaShape, pyramid: &[&NdArray]) -> Result<()> {
    if pyramid.len() != shape.levels {
        return config(format!("{} pyramid levels for {} attention levels", pyramid.len(), shape.levels));
    }
    for x in pyramid {
        if x.ndim() != 3 || x.shape()[0] != shape.dim {
            return contract(format!("level {:?} is not [{}, H, W]", x.shape(), shape.dim));
        }
    }
    Ok(())
}

/// Bilinear sample of a `[C, H, W]` map at grid point `(x, y)`, zero padded.
pub fn bilinear_chw(map: &NdArray, x: f64, y: f64) -> Vec<f64> {
    let &[c, h, w] = map.shape() else { panic!("map must be [C, H, W]") };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut out = vec![0.0; c];
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                continue;
            }
            let pos = yi as usize * w + xi as usize;
            for (ch, o) in out.iter_mut().enumerate() {
                *o += wx * wy * map.data()[ch * h * w + pos];
            }
        }
    }
    out
}

/// One query of the sampled variant over a `[C, H_l, W_l]` pyramid.
/// Every sample is projected by its head's `W^v_i` before weighting.
pub fn emsda_reference(
    w: &EmsdaWeights,
    q: &[f64],
    p: [f64; 2],
    pyramid: &[&NdArray],
    counter: &mut FlopCounter,
) -> Result<Vec<f64>> {
    let s = w.shape;
    check_pyramid(&s, pyramid)?;
    if q.len() != s.dim {
        return contract(format!("query width {} != {}", q.len(), s.dim));
    }
    let (c, dh) = (s.dim, s.head_dim());
    let (off, attn) = w.query_terms(q, counter)?;
    let mut heads = vec![0.0; c];
    for i in 0..s.heads {
        let wv = &w.value.data()[i * c * dh..(i + 1) * c * dh];
        let head = &mut heads[i * dh..(i + 1) * dh];
        for (l, x) in pyramid.iter().enumerate() {
            let phi = to_level_coords(p, (x.shape()[1], x.shape()[2]));
            for j in 0..s.points {
                let idx = (i * s.levels + l) * s.points + j;
                let a = attn.data()[i * s.levels * s.points + l * s.points + j];
                let v = bilinear_chw(x, phi[0] + off[2 * idx], phi[1] + off[2 * idx + 1]);
                counter.sampling += 2 * 4 * c as u64;
                for (ch, vc) in v.iter().enumerate() {
                    let row = &wv[ch * dh..(ch + 1) * dh];
                    for (h, r) in head.iter_mut().zip(row) {
                        *h += a * vc * r;
                    }
                }
                counter.value_proj += 2 * (c * dh) as u64;
            }
        }
    }
    counter.output_proj += 2 * (c * c) as u64;
    Ok(affine(&heads, &w.out_w, &w.out_b))
}

/// Feature maps with every position projected by each head: `[M][l]` of `[C/M, H, W]`.
pub fn project_pyramid(w: &EmsdaWeights, pyramid: &[&NdArray], counter: &mut FlopCounter) -> Result<Vec<Vec<NdArray>>> {
    let s = w.shape;
    check_pyramid(&s, pyramid)?;
    let (c, dh) = (s.dim, s.head_dim());
    let mut out = Vec::with_capacity(s.heads);
    for i in 0..s.heads {
        let wv = &w.value.data()[i * c * dh..(i + 1) * c * dh];
        let mut levels = Vec::with_capacity(pyramid.len());
        for x in pyramid {
            let (h, wd) = (x.shape()[1], x.shape()[2]);
            let hw = h * wd;
            let mut proj = vec![0.0; dh * hw];
            for ch in 0..c {
                let plane = &x.data()[ch * hw..(ch + 1) * hw];
                for d in 0..dh {
                    let wcd = wv[ch * dh + d];
                    for (o, v) in proj[d * hw..(d + 1) * hw].iter_mut().zip(plane) {
                        *o += wcd * v;
                    }
                }
            }
            counter.value_proj += 2 * (hw * c * dh) as u64;
            levels.push(NdArray::new([dh, h, wd], proj)?);
        }
        out.push(levels);
    }
    Ok(out)
}

/// Attention over maps already projected by [`project_pyramid`].
pub fn msda_from_projected(
    w: &EmsdaWeights,
    q: &[f64],
    p: [f64; 2],
    projected: &[Vec<NdArray>],
    counter: &mut FlopCounter,
) -> Result<Vec<f64>> {
    let s = w.shape;
    if q.len() != s.dim || projected.len() != s.heads {
        return contract("query or projected pyramid does not match the attention shape");
    }
    let dh = s.head_dim();
    let (off, attn) = w.query_terms(q, counter)?;
    let mut heads = vec![0.0; s.dim];
    for (i, levels) in projected.iter().enumerate() {
        let head = &mut heads[i * dh..(i + 1) * dh];
        for (l, x) in levels.iter().enumerate() {
            let phi = to_level_coords(p, (x.shape()[1], x.shape()[2]));
            for j in 0..s.points {
                let idx = (i * s.levels + l) * s.points + j;
                let a = attn.data()[i * s.levels * s.points + l * s.points + j];
                let v = bilinear_chw(x, phi[0] + off[2 * idx], phi[1] + off[2 * idx + 1]);
                counter.sampling += 2 * 4 * dh as u64;
                for (h, vc) in head.iter_mut().zip(&v) {
                    *h += a * vc;
                }
            }
        }
    }
    counter.output_proj += 2 * (s.dim * s.dim) as u64;
    Ok(affine(&heads, &w.out_w, &w.out_b))
}

/// The project-then-sample baseline for a single query, with its work count.
pub fn msda_oracle(w: &EmsdaWeights, q: &[f64], p: [f64; 2], pyramid: &[&NdArray]) -> Result<(Vec<f64>, FlopCounter)> {
    let mut counter = FlopCounter::default();
    let projected = project_pyramid(w, pyramid, &mut counter)?;
    let out = msda_from_projected(w, q, p, &projected, &mut counter)?;
    Ok((out, counter))
}

/// Output of the batched graph op.
#[derive(Debug, Clone)]
pub struct EmsdaOutput {
    /// `[N, K, C]`.
    pub out: Tensor,
    /// `[N, K, M, L*S]`; each row sums to one.
    pub attn: Tensor,
}

/// Batched attention for queries `[N, K, C]` with reference points
/// `[N, K, 2]`. `levels` are `[B, H_l, W_l, C]` maps and query row `n` reads
/// image `image_of(n)`.
pub fn emsda_forward(
    ctx: &Ctx,
    params: &EmsdaParams,
    queries: &Tensor,
    refs: &Tensor,
    levels: &[Tensor],
    image_of: &dyn Fn(usize) -> usize,
) -> Result<EmsdaOutput> {
    let s = params.shape;
    let &[n, k, c] = queries.shape() else {
        return contract(format!("queries must be [N, K, C], got {:?}", queries.shape()));
    };
    if c != s.dim || refs.shape() != [n, k, 2] {
        return contract(format!("queries {:?} / refs {:?} do not match width {}", queries.shape(), refs.shape(), s.dim));
    }
    if levels.len() != s.levels {
        return config(format!("{} pyramid levels for {} attention levels", levels.len(), s.levels));
    }
    let batch = levels[0].shape()[0];
    let mut dims = Vec::with_capacity(levels.len());
    let mut rows = Vec::with_capacity(levels.len());
    let mut base = 0;
    let mut bases = Vec::with_capacity(levels.len());
    for x in levels {
        let &[b, h, w, cl] = x.shape() else { return contract("pyramid level is not [B, H, W, C]") };
        if b != batch || cl != c {
            return contract(format!("pyramid level {:?} does not match batch {batch} width {c}", x.shape()));
        }
        dims.push((h, w));
        bases.push(base);
        base += b * h * w;
        rows.push(x.reshape(&[b * h * w, c])?);
    }
    if (0..n).any(|r| image_of(r) >= batch) {
        return contract("query row refers to a missing image");
    }
    let values = Tensor::concat(&rows.iter().collect::<Vec<_>>(), 0)?;

    let (m, ls) = (s.heads, s.levels * s.points);
    let p = n * k * s.samples();
    let off = params.offsets.forward(ctx, queries)?.reshape(&[p, 2])?;
    let attn = params.attn.forward(ctx, queries)?.reshape(&[n, k, m, ls])?.softmax()?;

    let mut grids = Vec::with_capacity(p);
    let mut ref_x = Vec::with_capacity(p);
    let mut scale_x = Vec::with_capacity(p);
    let mut scale_y = Vec::with_capacity(p);
    for row in 0..n {
        let img = image_of(row);
        for q in 0..k {
            for _ in 0..m {
                for (l, &(h, w)) in dims.iter().enumerate() {
                    for _ in 0..s.points {
                        grids.push(GridRef { base: bases[l] + img * h * w, h, w });
                        ref_x.push(((row * k + q) * 2) as u32);
                        scale_x.push(w as f64 - 1.0);
                        scale_y.push(h as f64 - 1.0);
                    }
                }
            }
        }
    }
    let ref_y: Vec<u32> = ref_x.iter().map(|i| i + 1).collect();
    let flat = refs.reshape(&[n * k * 2, 1])?;
    let px = flat
        .gather(Rc::new(ref_x), 1)?
        .mul(&ctx.constant(NdArray::new([p, 1], scale_x)?))?
        .add(&off.slice(1, 0, 1)?)?;
    let py = flat
        .gather(Rc::new(ref_y), 1)?
        .mul(&ctx.constant(NdArray::new([p, 1], scale_y)?))?
        .add(&off.slice(1, 1, 1)?)?;

    let sampled = sample_rows(&values, &grids, &px, &py)?;
    let mixed = sampled.mul(&attn.reshape(&[p, 1])?)?.reshape(&[n * k * m, ls, c])?.sum_axis(1)?;
    let heads = mixed
        .reshape(&[n * k, m, c])?
        .permute(&[1, 0, 2])?
        .matmul(&ctx.param(params.value))?
        .permute(&[1, 0, 2])?
        .reshape(&[n, k, c])?;
    let out = params.output.forward(ctx, &heads)?;
    Ok(EmsdaOutput { out, attn })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_path_returns_sampled_feature() {
        let shape = EmsdaShape { heads: 1, levels: 1, points: 1, dim: 3 };
        let mut w = EmsdaWeights::random(shape, 0.0, &mut rng::stream(0, 0)).unwrap();
        w.offset_w = NdArray::zeros([3, 2]);
        w.offset_b = NdArray::zeros([2]);
        w.value = NdArray::from_fn([1, 3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        w.out_w = NdArray::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        w.out_b = NdArray::zeros([3]);
        let x = NdArray::from_fn([3, 5, 4], |i| i as f64 * 0.5 - 3.0);
        // p = (2/3, 1/4) lands on node (x=2, y=1).
        let p = [2.0 / 3.0, 0.25];
        let want: Vec<f64> = (0..3).map(|ch| x.data()[ch * 20 + 4 + 2]).collect();
        let q = [0.4, -0.2, 0.9];
        let got = emsda_reference(&w, &q, p, &[&x], &mut FlopCounter::default()).unwrap();
        let (oracle, _) = msda_oracle(&w, &q, p, &[&x]).unwrap();
        for ch in 0..3 {
            assert!((got[ch] - want[ch]).abs() < 1e-12);
            assert!((oracle[ch] - want[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_matches_reference_kernel() {
        let shape = EmsdaShape { heads: 2, levels: 2, points: 3, dim: 4 };
        let mut r = rng::stream(3, 0);
        let w = EmsdaWeights::random(shape, 1.5, &mut r).unwrap();
        let maps = [NdArray::from_fn([2, 4, 5, 6], |_| rng::normal(&mut r, 1.0)),
            NdArray::from_fn([2, 4, 2, 3], |_| rng::normal(&mut r, 1.0))];
        let q = NdArray::from_fn([3, 2, 4], |_| rng::normal(&mut r, 1.0));
        let refs = NdArray::from_fn([3, 2, 2], |_| rng::uniform(&mut r, 0.0, 1.0));
        let mut store = ParamStore::new();
        let params = EmsdaParams::from_weights(&mut store, "a", &w).unwrap();
        let ctx = Ctx::new(&store, false);
        // maps are [B, C, H, W]
        let hwc: Vec<Tensor> = maps.iter().map(|m| ctx.constant(m.permute(&[0, 2, 3, 1]).unwrap())).collect();
        let image_of = |row: usize| row % 2;
        let out = emsda_forward(&ctx, &params, &ctx.constant(q.clone()), &ctx.constant(refs.clone()), &hwc, &image_of)
            .unwrap();
        for row in 0..3 {
            let img = image_of(row);
            let chw: Vec<NdArray> = maps
                .iter()
                .map(|m| {
                    let (h, wd) = (m.shape()[2], m.shape()[3]);
                    NdArray::from_fn([4, h, wd], |i| {
                        let (ch, rest) = (i / (h * wd), i % (h * wd));
                        m.data()[(img * 4 + ch) * h * wd + rest]
                    })
                })
                .collect();
            let pyr: Vec<&NdArray> = chw.iter().collect();
            for kq in 0..2 {
                let qv = &q.data()[(row * 2 + kq) * 4..(row * 2 + kq + 1) * 4];
                let p = [refs.data()[(row * 2 + kq) * 2], refs.data()[(row * 2 + kq) * 2 + 1]];
                let want = emsda_reference(&w, qv, p, &pyr, &mut FlopCounter::default()).unwrap();
                let got = &out.out.data()[(row * 2 + kq) * 4..(row * 2 + kq + 1) * 4];
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
        for row in out.attn.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn msda_costs_more_when_maps_exceed_samples() {
        let shape = EmsdaShape { heads: 2, levels: 2, points: 2, dim: 4 };
        let mut r = rng::stream(5, 0);
        let w = EmsdaWeights::random(shape, 1.0, &mut r).unwrap();
        let a = NdArray::from_fn([4, 3, 3], |_| rng::normal(&mut r, 1.0));
        let b = NdArray::from_fn([4, 2, 2], |_| rng::normal(&mut r, 1.0));
        let q = [0.1, 0.2, -0.3, 0.5];
        let mut fe = FlopCounter::default();
        emsda_reference(&w, &q, [0.3, 0.6], &[&a, &b], &mut fe).unwrap();
        let (_, fm) = msda_oracle(&w, &q, [0.3, 0.6], &[&a, &b]).unwrap();
        assert_eq!(fe.value_proj, emsda_value_flops(1, &shape));
        assert_eq!(fm.value_proj, msda_value_flops(1, &[(3, 3), (2, 2)], 4));
        assert!(fm.total() > fe.total());
    }

    #[test]
    fn shape_errors() {
        assert!(EmsdaShape { heads: 3, levels: 1, points: 1, dim: 8 }.validate().is_err());
        let shape = EmsdaShape { heads: 1, levels: 2, points: 1, dim: 2 };
        let w = EmsdaWeights::random(shape, 1.0, &mut rng::stream(0, 0)).unwrap();
        let x = NdArray::zeros([2, 2, 2]);
        assert!(matches!(emsda_reference(&w, &[0.0, 0.0], [0.5, 0.5], &[&x], &mut FlopCounter::default()),
            Err(crate::Error::Config(_))));
    }
}

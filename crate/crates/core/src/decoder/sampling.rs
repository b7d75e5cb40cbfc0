//! Differentiable bilinear sampling with zero padding.
//!
//! Grid coordinates put node `(i, j)` at `x = j, y = i`; a point between
//! nodes blends the up-to-four surrounding feature vectors, and any corner
//! outside the grid contributes zero.

use std::rc::Rc;

use crate::error::{contract, Result};
use crate::numerics::{NdArray, Tensor, PAD};

/// One `H x W` grid inside a stacked `[rows, C]` source, starting at row `base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRef {
    pub base: usize,
    pub h: usize,
    pub w: usize,
}

/// Samples `values`, a stack of row-major grids viewed as `[rows, C]`, at
/// `(px[i], py[i])` inside grid `grids[i]`. Returns `[n, C]`.
pub fn sample_rows(values: &Tensor, grids: &[GridRef], px: &Tensor, py: &Tensor) -> Result<Tensor> {
    let n = grids.len();
    if px.numel() != n || py.numel() != n {
        return contract(format!("{} points but {} / {} coordinates", n, px.numel(), py.numel()));
    }
    let &[rows, c] = values.shape() else {
        return contract(format!("sample source must be [rows, C], got {:?}", values.shape()));
    };
    if grids.iter().any(|g| g.base + g.h * g.w > rows) {
        return contract("sample grid runs past the source rows");
    }
    let px = px.reshape(&[n, 1])?;
    let py = py.reshape(&[n, 1])?;
    let x0 = NdArray::from_fn([n, 1], |i| px.data()[i].floor());
    let y0 = NdArray::from_fn([n, 1], |i| py.data()[i].floor());
    let fx = px.sub(&px.constant_like(x0.clone()))?;
    let fy = py.sub(&py.constant_like(y0.clone()))?;
    let wx = [fx.neg()?.add_scalar(1.0)?, fx];
    let wy = [fy.neg()?.add_scalar(1.0)?, fy];

    let mut acc: Option<Tensor> = None;
    for dy in 0..2 {
        for dx in 0..2 {
            let index: Vec<u32> = (0..n)
                .map(|i| {
                    let g = grids[i];
                    let xi = x0.data()[i] + dx as f64;
                    let yi = y0.data()[i] + dy as f64;
                    if xi < 0.0 || yi < 0.0 || xi >= g.w as f64 || yi >= g.h as f64 {
                        PAD
                    } else {
                        (g.base + yi as usize * g.w + xi as usize) as u32
                    }
                })
                .collect();
            let term = values.gather(Rc::new(index), c)?.mul(&wx[dx].mul(&wy[dy])?)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
    }
    Ok(acc.expect("four corners"))
}

/// Samples an `[H, W, C]` map at a point `p = (x, y)` in grid coordinates.
pub fn bilinear_sample(map: &Tensor, p: &Tensor) -> Result<Tensor> {
    let &[h, w, c] = map.shape() else {
        return contract(format!("feature map must be [H, W, C], got {:?}", map.shape()));
    };
    if p.numel() != 2 {
        return contract("sample point must have two coordinates");
    }
    let rows = map.reshape(&[h * w, c])?;
    let px = p.reshape(&[2])?.slice(0, 0, 1)?;
    let py = p.reshape(&[2])?.slice(0, 1, 1)?;
    sample_rows(&rows, &[GridRef { base: 0, h, w }], &px, &py)?.reshape(&[c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check_many, Graph};
    use crate::rng;

    fn map() -> NdArray {
        NdArray::from_fn([3, 4, 2], |i| (i as f64 * 0.37).sin())
    }

    fn at(m: &NdArray, x: f64, y: f64) -> Vec<f64> {
        let g = Graph::new(0);
        let t = g.constant(m.clone());
        let p = g.constant(NdArray::from_vec(vec![x, y]));
        bilinear_sample(&t, &p).unwrap().data().to_vec()
    }

    #[test]
    fn node_returns_column() {
        let m = map();
        assert_eq!(at(&m, 2.0, 1.0), m.data()[(4 + 2) * 2..(4 + 2) * 2 + 2].to_vec());
    }

    #[test]
    fn midpoint_is_mean() {
        let m = map();
        let v = at(&m, 1.5, 2.0);
        for ch in 0..2 {
            let a = m.data()[(2 * 4 + 1) * 2 + ch];
            let b = m.data()[(2 * 4 + 2) * 2 + ch];
            assert!((v[ch] - 0.5 * (a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn outside_is_zero() {
        let m = map();
        for (x, y) in [(-1.5, 0.0), (4.2, 1.0), (1.0, -3.0), (1.0, 3.0), (1e30, 0.0), (f64::MAX, -f64::MAX)] {
            assert_eq!(at(&m, x, y), vec![0.0, 0.0], "({x}, {y})");
        }
        // Half a cell past the border still blends the edge node.
        assert!(at(&m, 3.5, 1.0).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn array_kernel_agrees() {
        let m = map();
        let chw = m.permute(&[2, 0, 1]).unwrap();
        let mut r = rng::stream(4, 0);
        for _ in 0..50 {
            let (x, y) = (rng::uniform(&mut r, -1.5, 4.5), rng::uniform(&mut r, -1.5, 3.5));
            let plain = super::super::emsda::bilinear_chw(&chw, x, y);
            let g = at(&m, x, y);
            assert!((plain[0] - g[0]).abs() < 1e-14 && (plain[1] - g[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(8, 0);
        let m = NdArray::from_fn([3, 4, 2], |_| rng::normal(&mut r, 1.0));
        let w = NdArray::from_fn([2], |_| rng::normal(&mut r, 1.0));
        for p in [[0.3, 0.7], [2.6, 1.2], [3.4, 2.1], [-0.4, 1.5]] {
            let err = finite_diff_check_many(
                |xs| Ok(bilinear_sample(&xs[0], &xs[1])?.mul(&xs[2])?.sum()),
                &[m.clone(), NdArray::from_vec(p.to_vec()), w.clone()],
                1e-5,
                None,
                0,
            )
            .unwrap();
            assert!(err < 1e-8, "{p:?}: {err}");
        }
    }
}

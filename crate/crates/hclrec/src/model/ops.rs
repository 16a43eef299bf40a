//! Forward and backward primitives shared by the encoder and the routing
//! blocks. Everything is f64 and deterministic given explicit seeds.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::rng::{mix_str, stream};

pub const LN_EPS: f64 = 1e-8;

/// Inverted dropout whose masks are regenerated from (seed, site) instead
/// of stored; forward and backward call with the same site tag and see the
/// same mask. Rate 0 disables it entirely.
#[derive(Debug, Clone, Copy)]
pub struct DropoutCtx {
    pub rate: f64,
    pub seed: u64,
}

impl DropoutCtx {
    pub fn disabled() -> Self {
        DropoutCtx { rate: 0.0, seed: 0 }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0
    }

    fn mask_into(&self, site: &str, out: &mut [f64]) {
        let mut rng = stream(mix_str(self.seed, site));
        let keep = 1.0 - self.rate;
        for x in out.iter_mut() {
            *x = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
        }
    }

    /// Multiply `data` elementwise by the site's mask.
    pub fn apply(&self, site: &str, data: &mut [f64]) {
        if !self.is_active() {
            return;
        }
        let mut mask = vec![0.0; data.len()];
        self.mask_into(site, &mut mask);
        for (x, m) in data.iter_mut().zip(&mask) {
            *x *= m;
        }
    }
}

/// Row-wise layer norm over the last axis of a (B,T,d) tensor.
/// Returns (normalized-then-affine output, pre-affine normalized values,
/// inverse std per row); the latter two feed the backward pass.
pub fn layer_norm_forward(
    x: &Array3<f64>,
    scale: &Array1<f64>,
    shift: &Array1<f64>,
) -> (Array3<f64>, Array3<f64>, Array2<f64>) {
    let (b, t, d) = x.dim();
    let mut xhat = Array3::zeros((b, t, d));
    let mut invstd = Array2::zeros((b, t));
    let mut y = Array3::zeros((b, t, d));
    for bi in 0..b {
        for ti in 0..t {
            let row = x.slice(ndarray::s![bi, ti, ..]);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            invstd[[bi, ti]] = istd;
            for di in 0..d {
                let xh = (x[[bi, ti, di]] - mean) * istd;
                xhat[[bi, ti, di]] = xh;
                y[[bi, ti, di]] = xh * scale[di] + shift[di];
            }
        }
    }
    (y, xhat, invstd)
}

/// Backward of `layer_norm_forward`. Accumulates into dscale/dshift and
/// returns dx.
pub fn layer_norm_backward(
    dy: &Array3<f64>,
    xhat: &Array3<f64>,
    invstd: &Array2<f64>,
    scale: &Array1<f64>,
    dscale: &mut Array1<f64>,
    dshift: &mut Array1<f64>,
) -> Array3<f64> {
    let (b, t, d) = dy.dim();
    let mut dx = Array3::zeros((b, t, d));
    for bi in 0..b {
        for ti in 0..t {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for di in 0..d {
                let g = dy[[bi, ti, di]];
                let xh = xhat[[bi, ti, di]];
                dscale[di] += g * xh;
                dshift[di] += g;
                let dxhat = g * scale[di];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xh;
            }
            let istd = invstd[[bi, ti]];
            let dinv = d as f64;
            for di in 0..d {
                let dxhat = dy[[bi, ti, di]] * scale[di];
                let xh = xhat[[bi, ti, di]];
                dx[[bi, ti, di]] =
                    istd / dinv * (dinv * dxhat - sum_dxhat - xh * sum_dxhat_xhat);
            }
        }
    }
    dx
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// x·W + b over the last axis: (B,T,in) × (in,out) → (B,T,out).
pub fn linear_forward(x: &Array3<f64>, w: &ArrayView2<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (bs, t, din) = x.dim();
    let dout = w.ncols();
    let flat = x
        .view()
        .into_shape_with_order((bs * t, din))
        .expect("contiguous");
    let mut out = flat.dot(w);
    out += &b.view().insert_axis(Axis(0));
    out.into_shape_with_order((bs, t, dout)).expect("shape")
}

/// Backward of `linear_forward`: accumulates dW and db, returns dx.
pub fn linear_backward(
    x: &Array3<f64>,
    w: &ArrayView2<f64>,
    dy: &Array3<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array3<f64> {
    let (bs, t, din) = x.dim();
    let dout = w.ncols();
    let xf = x
        .view()
        .into_shape_with_order((bs * t, din))
        .expect("contiguous");
    let dyf = dy
        .view()
        .into_shape_with_order((bs * t, dout))
        .expect("contiguous");
    *dw += &xf.t().dot(&dyf);
    *db += &dyf.sum_axis(Axis(0));
    dyf.dot(&w.t())
        .into_shape_with_order((bs, t, din))
        .expect("shape")
}

/// Softmax over rows where `allowed` is true; fully-disallowed rows come
/// out as all zeros. Operates on one (T,T) logit matrix.
pub fn masked_softmax_rows(logits: &mut Array2<f64>, allowed: &Array2<bool>) {
    let (rows, cols) = logits.dim();
    for r in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            if allowed[[r, c]] {
                max = max.max(logits[[r, c]]);
            }
        }
        if max == f64::NEG_INFINITY {
            for c in 0..cols {
                logits[[r, c]] = 0.0;
            }
            continue;
        }
        let mut sum = 0.0;
        for c in 0..cols {
            if allowed[[r, c]] {
                let e = (logits[[r, c]] - max).exp();
                logits[[r, c]] = e;
                sum += e;
            } else {
                logits[[r, c]] = 0.0;
            }
        }
        for c in 0..cols {
            logits[[r, c]] /= sum;
        }
    }
}

/// Backward of a row-wise softmax: dS = A ∘ (dA − rowsum(dA ∘ A)).
/// Zero rows (fully masked) produce zero gradients.
pub fn softmax_backward_rows(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = probs.dim();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut dot = 0.0;
        for c in 0..cols {
            dot += dprobs[[r, c]] * probs[[r, c]];
        }
        for c in 0..cols {
            out[[r, c]] = probs[[r, c]] * (dprobs[[r, c]] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array3::from_shape_fn((2, 3, 4), |(b, t, d)| (b + t * 2 + d * 3) as f64 * 0.7);
        let scale = Array1::ones(4);
        let shift = Array1::zeros(4);
        let (y, _, _) = layer_norm_forward(&x, &scale, &shift);
        for b in 0..2 {
            for t in 0..3 {
                let row = y.slice(ndarray::s![b, t, ..]);
                let mean: f64 = row.sum() / 4.0;
                let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let x = Array3::from_shape_fn((1, 2, 5), |(_, t, d)| ((t * 5 + d) as f64).sin());
        let scale = Array1::from_vec(vec![1.1, 0.9, 1.0, 1.2, 0.8]);
        let shift = Array1::from_vec(vec![0.1, -0.2, 0.0, 0.3, 0.05]);
        // Loss = sum(y * r) with fixed r.
        let r = Array3::from_shape_fn((1, 2, 5), |(_, t, d)| ((t + d) as f64 * 0.37).cos());
        let loss = |xx: &Array3<f64>, sc: &Array1<f64>, sh: &Array1<f64>| {
            let (y, _, _) = layer_norm_forward(xx, sc, sh);
            (&y * &r).sum()
        };
        let (_, xhat, invstd) = layer_norm_forward(&x, &scale, &shift);
        let mut dscale = Array1::zeros(5);
        let mut dshift = Array1::zeros(5);
        let dx = layer_norm_backward(&r, &xhat, &invstd, &scale, &mut dscale, &mut dshift);
        let h = 1e-6;
        for t in 0..2 {
            for d in 0..5 {
                let mut xp = x.clone();
                xp[[0, t, d]] += h;
                let mut xm = x.clone();
                xm[[0, t, d]] -= h;
                let fd = (loss(&xp, &scale, &shift) - loss(&xm, &scale, &shift)) / (2.0 * h);
                assert!(
                    (fd - dx[[0, t, d]]).abs() < 1e-6,
                    "dx[{t},{d}] fd {fd} vs {}",
                    dx[[0, t, d]]
                );
            }
        }
        for d in 0..5 {
            let mut sp = scale.clone();
            sp[d] += h;
            let mut sm = scale.clone();
            sm[d] -= h;
            let fd = (loss(&x, &sp, &shift) - loss(&x, &sm, &shift)) / (2.0 * h);
            assert!((fd - dscale[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_matches_known_values() {
        assert!((gelu(0.0) - 0.0).abs() < 1e-15);
        // gelu(1) = 0.5 * (1 + erf(1/sqrt(2))) = 0.841344746...
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn linear_roundtrip_gradients() {
        let x = Array3::from_shape_fn((2, 3, 4), |(b, t, d)| ((b + t + d) as f64).sin());
        let w = Array2::from_shape_fn((4, 5), |(i, o)| ((i * 5 + o) as f64 * 0.1).cos());
        let b = Array1::from_shape_fn(5, |i| i as f64 * 0.01);
        let r = Array3::from_shape_fn((2, 3, 5), |(bb, t, d)| ((bb + t * d) as f64 * 0.2).sin());
        let loss = |xx: &Array3<f64>, ww: &Array2<f64>, bb: &Array1<f64>| {
            (&linear_forward(xx, &ww.view(), bb) * &r).sum()
        };
        let mut dw = Array2::zeros((4, 5));
        let mut db = Array1::zeros(5);
        let dx = linear_backward(&x, &w.view(), &r, &mut dw, &mut db);
        let h = 1e-6;
        let mut wp = w.clone();
        wp[[2, 3]] += h;
        let mut wm = w.clone();
        wm[[2, 3]] -= h;
        assert!(
            ((loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h) - dw[[2, 3]]).abs() < 1e-7
        );
        let mut xp = x.clone();
        xp[[1, 2, 0]] += h;
        let mut xm = x.clone();
        xm[[1, 2, 0]] -= h;
        assert!(
            ((loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h) - dx[[1, 2, 0]]).abs() < 1e-7
        );
        let mut bp = b.clone();
        bp[4] += h;
        let mut bm = b.clone();
        bm[4] -= h;
        assert!(((loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h) - db[4]).abs() < 1e-7);
    }

    #[test]
    fn masked_softmax_ignores_disallowed_and_zeroes_dead_rows() {
        let mut logits = array![[1.0, 2.0, 3.0], [5.0, 1.0, 1.0]];
        let allowed = array![[true, true, false], [false, false, false]];
        masked_softmax_rows(&mut logits, &allowed);
        assert_eq!(logits[[0, 2]], 0.0);
        assert!((logits.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(logits.row(1).sum(), 0.0);
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let base = array![[0.3, -0.2, 0.9, 0.1]];
        let allowed = Array2::from_elem((1, 4), true);
        let dprobs = array![[0.7, -0.3, 0.2, 0.5]];
        let probs = {
            let mut l = base.clone();
            masked_softmax_rows(&mut l, &allowed);
            l
        };
        let ds = softmax_backward_rows(&probs, &dprobs);
        let h = 1e-6;
        for c in 0..4 {
            let mut lp = base.clone();
            lp[[0, c]] += h;
            masked_softmax_rows(&mut lp, &allowed);
            let mut lm = base.clone();
            lm[[0, c]] -= h;
            masked_softmax_rows(&mut lm, &allowed);
            let fd = ((&lp - &lm) * &dprobs).sum() / (2.0 * h);
            assert!((fd - ds[[0, c]]).abs() < 1e-8, "c={c}");
        }
    }

    #[test]
    fn dropout_masks_are_site_stable_and_scale_correctly() {
        let ctx = DropoutCtx { rate: 0.5, seed: 99 };
        let mut a = vec![1.0; 10_000];
        ctx.apply("site1", &mut a);
        let mut b = vec![1.0; 10_000];
        ctx.apply("site1", &mut b);
        assert_eq!(a, b);
        let mut c = vec![1.0; 10_000];
        ctx.apply("site2", &mut c);
        assert_ne!(a, c);
        // Inverted dropout keeps the expectation near 1.
        let mean: f64 = a.iter().sum::<f64>() / a.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!(a.iter().all(|&x| x == 0.0 || x == 2.0));
    }

    #[test]
    fn disabled_dropout_is_identity() {
        let ctx = DropoutCtx::disabled();
        let mut a = vec![0.5, 1.5, -2.0];
        ctx.apply("any", &mut a);
        assert_eq!(a, vec![0.5, 1.5, -2.0]);
    }
}

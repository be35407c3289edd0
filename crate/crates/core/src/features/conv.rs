//! Mirror-padded 2-D convolution, average pooling and nearest unpooling on
//! (batch, row, col, channel) tensors, with the matching backward passes.
//!
//! Convolutions are evaluated as a sum over kernel offsets of
//! (shifted input) × (per-offset weight block) matrix products, so no
//! im2col buffer larger than the input itself is ever allocated.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};

use super::mirror;

/// Input pixels displaced by (dr, dc) with mirrored borders, as an (N·H·W)×C matrix.
pub(crate) fn shifted(x: &Array4<f64>, dr: isize, dc: isize) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    let mut out = Array2::zeros((n * h * w, c));
    let rows: Vec<usize> = (0..h).map(|r| mirror(r as isize + dr, h)).collect();
    let cols: Vec<usize> = (0..w).map(|q| mirror(q as isize + dc, w)).collect();
    let mut i = 0;
    for b in 0..n {
        for &sr in &rows {
            for &sc in &cols {
                out.row_mut(i).assign(&x.slice(s![b, sr, sc, ..]));
                i += 1;
            }
        }
    }
    out
}

/// Adds `d` (an (N·H·W)×C matrix laid out like [`shifted`]) back onto the source pixels.
fn scatter_shifted(dx: &mut Array4<f64>, d: &Array2<f64>, dr: isize, dc: isize) {
    let (n, h, w, _) = dx.dim();
    let rows: Vec<usize> = (0..h).map(|r| mirror(r as isize + dr, h)).collect();
    let cols: Vec<usize> = (0..w).map(|q| mirror(q as isize + dc, w)).collect();
    let mut i = 0;
    for b in 0..n {
        for &sr in &rows {
            for &sc in &cols {
                let mut dst = dx.slice_mut(s![b, sr, sc, ..]);
                dst += &d.row(i);
                i += 1;
            }
        }
    }
}

fn offsets(k: usize) -> impl Iterator<Item = (usize, isize, isize)> {
    let p = (k / 2) as isize;
    (0..k * k).map(move |o| (o, (o / k) as isize - p, (o % k) as isize - p))
}

/// `weight` is (k·k·C_in) × C_out with rows ordered (offset row, offset col, input channel).
pub(crate) fn conv_forward(
    x: &Array4<f64>,
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    k: usize,
) -> Array4<f64> {
    let (n, h, w, cin) = x.dim();
    let cout = weight.ncols();
    debug_assert_eq!(weight.nrows(), k * k * cin);
    let mut acc = Array2::<f64>::zeros((n * h * w, cout));
    for (o, dr, dc) in offsets(k) {
        let sx = shifted(x, dr, dc);
        let block = weight.slice(s![o * cin..(o + 1) * cin, ..]);
        ndarray::linalg::general_mat_mul(1.0, &sx, &block, 1.0, &mut acc);
    }
    acc += &bias;
    acc.into_shape_with_order((n, h, w, cout)).expect("shape")
}

pub(crate) struct ConvGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array4<f64>,
}

pub(crate) fn conv_backward(
    x: &Array4<f64>,
    weight: ArrayView2<f64>,
    dy: &Array4<f64>,
    k: usize,
) -> ConvGrads {
    let (n, h, w, cin) = x.dim();
    let cout = weight.ncols();
    let dy2 = dy
        .view()
        .into_shape_with_order((n * h * w, cout))
        .expect("contiguous gradient");
    let bias = dy2.sum_axis(Axis(0));
    let mut dw = Array2::zeros(weight.raw_dim());
    let mut dx = Array4::zeros(x.raw_dim());
    for (o, dr, dc) in offsets(k) {
        let sx = shifted(x, dr, dc);
        let block = weight.slice(s![o * cin..(o + 1) * cin, ..]);
        dw.slice_mut(s![o * cin..(o + 1) * cin, ..])
            .assign(&sx.t().dot(&dy2));
        let ds = dy2.dot(&block.t());
        scatter_shifted(&mut dx, &ds, dr, dc);
    }
    ConvGrads {
        weight: dw,
        bias,
        input: dx,
    }
}

/// 2×2 average pooling; odd trailing rows/cols average only the in-bounds cells.
pub(crate) fn avgpool2(x: &Array4<f64>) -> Array4<f64> {
    let (n, h, w, c) = x.dim();
    let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array4::zeros((n, ph, pw, c));
    for b in 0..n {
        for r in 0..ph {
            for q in 0..pw {
                let r1 = (2 * r + 2).min(h);
                let q1 = (2 * q + 2).min(w);
                let cnt = ((r1 - 2 * r) * (q1 - 2 * q)) as f64;
                let mut dst = out.slice_mut(s![b, r, q, ..]);
                for sr in 2 * r..r1 {
                    for sq in 2 * q..q1 {
                        dst += &x.slice(s![b, sr, sq, ..]);
                    }
                }
                dst /= cnt;
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(dy: &Array4<f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (n, ph, pw, c) = dy.dim();
    let mut dx = Array4::zeros((n, in_h, in_w, c));
    for b in 0..n {
        for r in 0..ph {
            for q in 0..pw {
                let r1 = (2 * r + 2).min(in_h);
                let q1 = (2 * q + 2).min(in_w);
                let cnt = ((r1 - 2 * r) * (q1 - 2 * q)) as f64;
                let g = dy.slice(s![b, r, q, ..]).mapv(|v| v / cnt);
                for sr in 2 * r..r1 {
                    for sq in 2 * q..q1 {
                        let mut dst = dx.slice_mut(s![b, sr, sq, ..]);
                        dst += &g;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2× upsampling cropped to `out_h × out_w`.
pub(crate) fn unpool2(x: &Array4<f64>, out_h: usize, out_w: usize) -> Array4<f64> {
    let (n, _, _, c) = x.dim();
    let mut out = Array4::zeros((n, out_h, out_w, c));
    for b in 0..n {
        for r in 0..out_h {
            for q in 0..out_w {
                out.slice_mut(s![b, r, q, ..])
                    .assign(&x.slice(s![b, r / 2, q / 2, ..]));
            }
        }
    }
    out
}

pub(crate) fn unpool2_backward(dy: &Array4<f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (n, h, w, c) = dy.dim();
    let mut dx = Array4::zeros((n, in_h, in_w, c));
    for b in 0..n {
        for r in 0..h {
            for q in 0..w {
                let mut dst = dx.slice_mut(s![b, r / 2, q / 2, ..]);
                dst += &dy.slice(s![b, r, q, ..]);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.gen::<f64>() - 0.5)
    }

    /// Direct nested-loop convolution used as the reference.
    fn conv_direct(x: &Array4<f64>, w: &Array2<f64>, b: &Array1<f64>, k: usize) -> Array4<f64> {
        let (n, h, wd, cin) = x.dim();
        let cout = w.ncols();
        let p = (k / 2) as isize;
        Array4::from_shape_fn((n, h, wd, cout), |(bi, r, c, o)| {
            let mut acc = b[o];
            for dr in 0..k {
                for dc in 0..k {
                    let sr = mirror(r as isize + dr as isize - p, h);
                    let sc = mirror(c as isize + dc as isize - p, wd);
                    for ci in 0..cin {
                        acc += x[[bi, sr, sc, ci]] * w[[(dr * k + dc) * cin + ci, o]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn forward_matches_direct() {
        let x = rand4((2, 5, 4, 3), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Array2::from_shape_simple_fn((27, 2), || rng.gen::<f64>());
        let b = Array1::from(vec![0.1, -0.2]);
        let got = conv_forward(&x, w.view(), b.view(), 3);
        let want = conv_direct(&x, &w, &b, 3);
        for (a, e) in got.iter().zip(want.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <conv(x), dy> is linear in x and w; check both gradients by finite differences.
        let x = rand4((1, 3, 4, 2), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Array2::from_shape_simple_fn((18, 3), || rng.gen::<f64>() - 0.5);
        let b = Array1::zeros(3);
        let dy = rand4((1, 3, 4, 3), 5);
        let g = conv_backward(&x, w.view(), &dy, 3);
        let f = |x: &Array4<f64>, w: &Array2<f64>| (conv_forward(x, w.view(), b.view(), 3) * &dy).sum();
        let eps = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 2, 3, 1), (0, 1, 2, 0)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (f(&xp, &w) - f(&xm, &w)) / (2.0 * eps);
            assert!((fd - g.input[idx]).abs() < 1e-8);
        }
        for idx in [(0, 0), (17, 2), (9, 1)] {
            let mut wp = w.clone();
            wp[idx] += eps;
            let mut wm = w.clone();
            wm[idx] -= eps;
            let fd = (f(&x, &wp) - f(&x, &wm)) / (2.0 * eps);
            assert!((fd - g.weight[idx]).abs() < 1e-8);
        }
        assert!((g.bias.sum() - dy.sum()).abs() < 1e-12);
    }

    #[test]
    fn pooling_odd_sizes() {
        let x = Array4::from_shape_fn((1, 3, 3, 1), |(_, r, c, _)| (r * 3 + c) as f64);
        let p = avgpool2(&x);
        assert_eq!(p.dim(), (1, 2, 2, 1));
        assert_eq!(p[[0, 0, 0, 0]], 2.0);
        assert_eq!(p[[0, 0, 1, 0]], 3.5);
        assert_eq!(p[[0, 1, 1, 0]], 8.0);
        let u = unpool2(&p, 3, 3);
        assert_eq!(u[[0, 2, 2, 0]], 8.0);
        assert_eq!(u[[0, 1, 1, 0]], 2.0);
    }

    #[test]
    fn pooling_adjoints() {
        let x = rand4((2, 5, 3, 2), 6);
        let dy = rand4((2, 3, 2, 2), 7);
        let lhs = (avgpool2(&x) * &dy).sum();
        let rhs = (&x * &avgpool2_backward(&dy, 5, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let z = rand4((2, 3, 2, 2), 8);
        let dz = rand4((2, 5, 3, 2), 9);
        let lhs = (unpool2(&z, 5, 3) * &dz).sum();
        let rhs = (&z * &unpool2_backward(&dz, 3, 2)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

//! Forward and backward kernels for 3×3 "same" convolutions and ceil-mode max
//! pooling over HWC rasters.
//!
//! Convolutions are evaluated tap by tap: for every output row and each of the
//! nine kernel taps, the overlapping input row segment is multiplied by the
//! `C_in × C_out` tap matrix with a single GEMM call. No im2col buffer is built.

use crate::tensor::Tensor3;

/// `C += A · B` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) < c.len());
    // SAFETY: the asserts above bound every element the kernel touches, and `c`
    // is an exclusive borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Column range of output pixels whose tap `dx` reads inside the input.
#[inline]
fn tap_cols(width: usize, dx: usize) -> (usize, usize) {
    let start = 1usize.saturating_sub(dx);
    let end = (width + 1 - dx).min(width);
    (start, end)
}

/// 3×3 convolution, stride 1, zero padding of one pixel. `weight` is laid out
/// `[ky][kx][c_in][c_out]`.
pub fn conv3x3_forward(input: &Tensor3, weight: &[f64], bias: &[f64], relu: bool) -> Tensor3 {
    let (h, w, cin) = input.shape();
    let cout = bias.len();
    debug_assert_eq!(weight.len(), 9 * cin * cout);
    let mut out = Tensor3::zeros(h, w, cout);
    for px in out.data_mut().chunks_exact_mut(cout) {
        px.copy_from_slice(bias);
    }
    let row_len_in = w * cin;
    let row_len_out = w * cout;
    for y in 0..h {
        for dy in 0..3 {
            let iy = y + dy;
            if iy == 0 || iy > h {
                continue;
            }
            let iy = iy - 1;
            for dx in 0..3 {
                let (x0, x1) = tap_cols(w, dx);
                if x1 <= x0 {
                    continue;
                }
                let tap = &weight[(dy * 3 + dx) * cin * cout..(dy * 3 + dx + 1) * cin * cout];
                let a_off = iy * row_len_in + (x0 + dx - 1) * cin;
                let a = &input.data()[a_off..iy * row_len_in + row_len_in];
                let c_off = y * row_len_out + x0 * cout;
                let c = &mut out.data_mut()[c_off..(y + 1) * row_len_out];
                gemm_acc(x1 - x0, cin, cout, a, cin, 1, tap, cout, 1, c, cout);
            }
        }
    }
    if relu {
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

/// Gradients of a convolution. `output` is the (post-activation) forward
/// output, used to mask the ReLU. Returns `(d_input, d_weight, d_bias)`;
/// `d_input` is skipped when `need_input_grad` is false.
pub fn conv3x3_backward(
    input: &Tensor3,
    output: &Tensor3,
    weight: &[f64],
    relu: bool,
    grad_out: &Tensor3,
    need_input_grad: bool,
) -> (Option<Tensor3>, Vec<f64>, Vec<f64>) {
    let (h, w, cin) = input.shape();
    let cout = grad_out.channels();
    let mut g = grad_out.clone();
    if relu {
        for (gv, &ov) in g.data_mut().iter_mut().zip(output.data()) {
            if ov <= 0.0 {
                *gv = 0.0;
            }
        }
    }
    let mut d_bias = vec![0.0; cout];
    for px in g.data().chunks_exact(cout) {
        for (db, v) in d_bias.iter_mut().zip(px) {
            *db += v;
        }
    }
    let mut d_weight = vec![0.0; 9 * cin * cout];
    let mut d_input = need_input_grad.then(|| Tensor3::zeros(h, w, cin));
    let row_len_in = w * cin;
    let row_len_out = w * cout;
    for y in 0..h {
        for dy in 0..3 {
            let iy = y + dy;
            if iy == 0 || iy > h {
                continue;
            }
            let iy = iy - 1;
            for dx in 0..3 {
                let (x0, x1) = tap_cols(w, dx);
                if x1 <= x0 {
                    continue;
                }
                let rows = x1 - x0;
                let t0 = (dy * 3 + dx) * cin * cout;
                let a_off = iy * row_len_in + (x0 + dx - 1) * cin;
                let g_off = y * row_len_out + x0 * cout;
                let gseg = &g.data()[g_off..(y + 1) * row_len_out];
                {
                    let a = &input.data()[a_off..iy * row_len_in + row_len_in];
                    // dW_tap (cin × cout) += Aᵀ (cin × rows) · G (rows × cout)
                    gemm_acc(
                        cin,
                        rows,
                        cout,
                        a,
                        1,
                        cin,
                        gseg,
                        cout,
                        1,
                        &mut d_weight[t0..t0 + cin * cout],
                        cout,
                    );
                }
                if let Some(di) = d_input.as_mut() {
                    let tap = &weight[t0..t0 + cin * cout];
                    let dst = &mut di.data_mut()[a_off..iy * row_len_in + row_len_in];
                    // dA (rows × cin) += G (rows × cout) · Wᵀ (cout × cin)
                    gemm_acc(rows, cout, cin, gseg, cout, 1, tap, 1, cout, dst, cin);
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// Ceil-mode max pooling with a `rows × cols` window and equal stride. Returns
/// the pooled raster and, for every output element, the flat input index of
/// its maximum (first occurrence on ties).
pub fn max_pool_forward(input: &Tensor3, rows: usize, cols: usize) -> (Tensor3, Vec<usize>) {
    let (h, w, c) = input.shape();
    let oh = h.div_ceil(rows);
    let ow = w.div_ceil(cols);
    let mut out = Tensor3::zeros(oh, ow, c);
    let mut argmax = vec![0usize; oh * ow * c];
    for r in 0..oh {
        for col in 0..ow {
            for k in 0..c {
                let mut best_i = input.index(r * rows, col * cols, k);
                let mut best = input.data()[best_i];
                for ir in r * rows..((r + 1) * rows).min(h) {
                    for ic in col * cols..((col + 1) * cols).min(w) {
                        let i = input.index(ir, ic, k);
                        let v = input.data()[i];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                let o = out.index(r, col, k);
                out.data_mut()[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(
    in_shape: (usize, usize, usize),
    argmax: &[usize],
    grad_out: &Tensor3,
) -> Tensor3 {
    let mut d = Tensor3::zeros(in_shape.0, in_shape.1, in_shape.2);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d.data_mut()[i] += g;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Tensor3 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// Direct seven-loop convolution used as the reference.
    fn conv_reference(input: &Tensor3, weight: &[f64], bias: &[f64]) -> Tensor3 {
        let (h, w, cin) = input.shape();
        let cout = bias.len();
        Tensor3::from_fn(h, w, cout, |y, x, o| {
            let mut acc = bias[o];
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    let ix = x as isize + kx as isize - 1;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for i in 0..cin {
                        acc += input.get(iy as usize, ix as usize, i)
                            * weight[((ky * 3 + kx) * cin + i) * cout + o];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_reference() {
        for &(h, w, cin, cout) in &[(1, 1, 1, 1), (3, 5, 2, 3), (6, 1, 3, 2), (4, 7, 4, 5)] {
            let x = random(h, w, cin, 1);
            let wt = random(1, 1, 9 * cin * cout, 2).into_vec();
            let b = random(1, 1, cout, 3).into_vec();
            let fast = conv3x3_forward(&x, &wt, &b, false);
            let slow = conv_reference(&x, &wt, &b);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <G, conv(X)> is bilinear in (X, W); check both gradients against
        // directional derivatives of the linear map.
        let (h, w, cin, cout) = (4, 6, 3, 2);
        let x = random(h, w, cin, 5);
        let wt = random(1, 1, 9 * cin * cout, 6).into_vec();
        let zero_b = vec![0.0; cout];
        let g = random(h, w, cout, 7);
        let y = conv3x3_forward(&x, &wt, &zero_b, false);
        let (dx, dw, db) = conv3x3_backward(&x, &y, &wt, false, &g, true);
        let dx = dx.unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let x2 = random(h, w, cin, 8);
        let lhs = dot(g.data(), conv3x3_forward(&x2, &wt, &zero_b, false).data());
        assert!((lhs - dot(dx.data(), x2.data())).abs() < 1e-9);
        let w2 = random(1, 1, 9 * cin * cout, 9).into_vec();
        let lhs = dot(g.data(), conv3x3_forward(&x, &w2, &zero_b, false).data());
        assert!((lhs - dot(&dw, &w2)).abs() < 1e-9);
        let sum_g: Vec<f64> = (0..cout).map(|o| g.data().iter().skip(o).step_by(cout).sum()).collect();
        for (a, b) in db.iter().zip(&sum_g) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_ceil_mode_shapes_and_values() {
        let x = Tensor3::from_fn(3, 5, 1, |r, c, _| (r * 5 + c) as f64);
        let (y, idx) = max_pool_forward(&x, 2, 2);
        assert_eq!(y.shape(), (2, 3, 1));
        assert_eq!(y.data(), &[6.0, 8.0, 9.0, 11.0, 13.0, 14.0]);
        let g = Tensor3::filled(2, 3, 1, 1.0);
        let d = max_pool_backward(x.shape(), &idx, &g);
        assert_eq!(d.data().iter().sum::<f64>(), 6.0);
        assert_eq!(d.get(1, 1, 0), 1.0);
        assert_eq!(d.get(0, 0, 0), 0.0);
    }

    #[test]
    fn pool_height_only() {
        let x = Tensor3::from_fn(4, 3, 2, |r, c, k| (r * 10 + c + k * 100) as f64);
        let (y, _) = max_pool_forward(&x, 2, 1);
        assert_eq!(y.shape(), (2, 3, 2));
        assert_eq!(y.get(1, 2, 1), 132.0);
    }
}

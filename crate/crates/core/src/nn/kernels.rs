//! Numeric kernels over NCHW and NF row-major buffers.

use super::tensor::Scalar;

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Valid source/destination column ranges for horizontal tap offset `dx`.
#[inline]
fn tap_cols(width: usize, dx: isize) -> (usize, usize, usize) {
    // returns (dst_start, src_start, len) for dst[x] += src[x + dx]
    if dx < 0 {
        let s = (-dx) as usize;
        (s, 0, width.saturating_sub(s))
    } else {
        let s = dx as usize;
        (0, s, width.saturating_sub(s))
    }
}

/// 3x3 convolution, stride 1, zero same-padding.
/// `input`: [n, cin, h, w]; `weight`: [cout, cin, 3, 3]; `out`: [n, cout, h, w].
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for b in 0..n {
        let src = &input[b * cin * plane..(b + 1) * cin * plane];
        let dst_all = &mut out[b * cout * plane..(b + 1) * cout * plane];
        for (oc, dst) in dst_all.chunks_exact_mut(plane).enumerate() {
            dst.fill(bias[oc]);
            for ic in 0..cin {
                let sp = &src[ic * plane..(ic + 1) * plane];
                let k = &weight[(oc * cin + ic) * 9..(oc * cin + ic) * 9 + 9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    for kx in 0..3 {
                        let wv = k[ky * 3 + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (d0, s0, len) = tap_cols(w, kx as isize - 1);
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let drow = &mut dst[y * w + d0..y * w + d0 + len];
                            let srow = &sp[sy as usize * w + s0..sy as usize * w + s0 + len];
                            axpy(drow, wv, srow);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the 3x3 convolution. `grad_input` is skipped when `None`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: Option<(&mut [T], &mut [T])>,
    mut grad_input: Option<&mut [T]>,
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    let mut gw = grad_weight;
    for b in 0..n {
        let src = &input[b * cin * plane..(b + 1) * cin * plane];
        let gout = &grad_out[b * cout * plane..(b + 1) * cout * plane];
        for oc in 0..cout {
            let g = &gout[oc * plane..(oc + 1) * plane];
            if let Some((_, gb)) = gw.as_mut() {
                gb[oc] += g.iter().copied().sum::<T>();
            }
            for ic in 0..cin {
                let sp = &src[ic * plane..(ic + 1) * plane];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    for kx in 0..3 {
                        let (d0, s0, len) = tap_cols(w, kx as isize - 1);
                        let widx = (oc * cin + ic) * 9 + ky * 3 + kx;
                        let mut acc = T::zero();
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let grow = &g[y * w + d0..y * w + d0 + len];
                            let srow_start = sy as usize * w + s0;
                            if gw.is_some() {
                                acc += dot(grow, &sp[srow_start..srow_start + len]);
                            }
                            if let Some(gi) = grad_input.as_deref_mut() {
                                let gi_plane =
                                    &mut gi[(b * cin + ic) * plane..(b * cin + ic + 1) * plane];
                                axpy(
                                    &mut gi_plane[srow_start..srow_start + len],
                                    weight[widx],
                                    grow,
                                );
                            }
                        }
                        if let Some((gwt, _)) = gw.as_mut() {
                            gwt[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2 (odd trailing row/column dropped).
/// Returns the flat input index of each selected maximum (first wins ties).
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    out: &mut [T],
    nc: usize,
    h: usize,
    w: usize,
) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = vec![0usize; nc * oh * ow];
    for p in 0..nc {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if input[c] > input[best] {
                        best = c;
                    }
                }
                let o = p * oh * ow + y * ow + x;
                out[o] = input[best];
                idx[o] = best;
            }
        }
    }
    idx
}

/// `out[n, u] = bias[u] + sum_i x[n, i] * weight[i, u]`.
pub fn dense_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    n: usize,
    inputs: usize,
    units: usize,
) {
    for b in 0..n {
        let row = &mut out[b * units..(b + 1) * units];
        row.copy_from_slice(bias);
        let xr = &x[b * inputs..(b + 1) * inputs];
        for (i, &xi) in xr.iter().enumerate() {
            if xi != T::zero() {
                axpy(row, xi, &weight[i * units..(i + 1) * units]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: Option<(&mut [T], &mut [T])>,
    grad_input: Option<&mut [T]>,
    n: usize,
    inputs: usize,
    units: usize,
) {
    if let Some((gw, gb)) = grad_weight {
        for b in 0..n {
            let g = &grad_out[b * units..(b + 1) * units];
            axpy(gb, T::one(), g);
            for (i, &xi) in x[b * inputs..(b + 1) * inputs].iter().enumerate() {
                if xi != T::zero() {
                    axpy(&mut gw[i * units..(i + 1) * units], xi, g);
                }
            }
        }
    }
    if let Some(gi) = grad_input {
        for b in 0..n {
            let g = &grad_out[b * units..(b + 1) * units];
            for i in 0..inputs {
                gi[b * inputs + i] = dot(&weight[i * units..(i + 1) * units], g);
            }
        }
    }
}

/// Row-wise softmax, stabilized by the row maximum.
pub fn softmax_rows<T: Scalar>(logits: &[T], out: &mut [T], classes: usize) {
    for (src, dst) in logits
        .chunks_exact(classes)
        .zip(out.chunks_exact_mut(classes))
    {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / z;
        }
    }
}

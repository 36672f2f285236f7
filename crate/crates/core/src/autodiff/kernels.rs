//! Batched layer kernels. All buffers are row-major with the batch as the
//! leading dimension.

use super::tensor::{gemm, MatRef, Real};

pub(crate) fn dense_forward<T: Real>(x: &[T], batch: usize, n_in: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let n_out = bias.len();
    for row in out.chunks_exact_mut(n_out) {
        row.copy_from_slice(bias);
    }
    gemm(
        batch,
        n_in,
        n_out,
        MatRef::row_major(x, n_in),
        MatRef::row_major(w, n_out),
        T::one(),
        out,
    );
}

/// Accumulates weight and bias gradients and writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Real>(x: &[T], batch: usize, n_in: usize, w: &[T], dy: &[T], dw: &mut [T], db: &mut [T], dx: &mut [T]) {
    let n_out = db.len();
    gemm(
        n_in,
        batch,
        n_out,
        MatRef::transposed(x, n_in),
        MatRef::row_major(dy, n_out),
        T::one(),
        dw,
    );
    for row in dy.chunks_exact(n_out) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += *v;
        }
    }
    gemm(
        batch,
        n_out,
        n_in,
        MatRef::row_major(dy, n_out),
        MatRef::transposed(w, n_out),
        T::zero(),
        dx,
    );
}

/// Geometry of a stride-1, zero-padded ("same") square-kernel convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one sample `[c_in, h, w]` into `[c_in*k*k, h*w]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                for y in 0..h {
                    let line = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    let iy = y + dy;
                    if iy < 0 || iy >= h || x_lo >= x_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    let src_start = (iy * w) as usize + (x_lo as isize + dx) as usize;
                    line[x_lo..x_hi].copy_from_slice(&plane[src_start..src_start + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Folds `[c_in*k*k, h*w]` back onto one sample, accumulating.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ki as isize - pad;
                let dxo = kj as isize - pad;
                let x_lo = (-dxo).clamp(0, w) as usize;
                let x_hi = (w - dxo).clamp(0, w) as usize;
                for y in 0..h {
                    let iy = y + dy;
                    if iy < 0 || iy >= h || x_lo >= x_hi {
                        continue;
                    }
                    let line = &src[(y * w) as usize..((y + 1) * w) as usize];
                    let dst_start = (iy * w) as usize + (x_lo as isize + dxo) as usize;
                    for (d, s) in plane[dst_start..dst_start + (x_hi - x_lo)].iter_mut().zip(&line[x_lo..x_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], batch: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let hw = g.hw();
    let in_len = g.c_in * hw;
    let out_len = g.c_out * hw;
    let mut col = vec![T::zero(); g.col_rows() * hw];
    for b in 0..batch {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut col);
        let o = &mut out[b * out_len..(b + 1) * out_len];
        for (c, plane) in o.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias[c]);
        }
        gemm(
            g.c_out,
            g.col_rows(),
            hw,
            MatRef::row_major(w, g.col_rows()),
            MatRef::row_major(&col, hw),
            T::one(),
            o,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(g: &ConvGeom, x: &[T], batch: usize, w: &[T], dy: &[T], dw: &mut [T], db: &mut [T], dx: &mut [T]) {
    let hw = g.hw();
    let in_len = g.c_in * hw;
    let out_len = g.c_out * hw;
    let rows = g.col_rows();
    let mut col = vec![T::zero(); rows * hw];
    let mut dcol = vec![T::zero(); rows * hw];
    dx.fill(T::zero());
    for b in 0..batch {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        for (c, plane) in dyb.chunks_exact(hw).enumerate() {
            db[c] += plane.iter().copied().sum::<T>();
        }
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut col);
        gemm(
            g.c_out,
            hw,
            rows,
            MatRef::row_major(dyb, hw),
            MatRef::transposed(&col, hw),
            T::one(),
            dw,
        );
        gemm(
            rows,
            g.c_out,
            hw,
            MatRef::transposed(w, rows),
            MatRef::row_major(dyb, hw),
            T::zero(),
            &mut dcol,
        );
        col2im(g, &dcol, &mut dx[b * in_len..(b + 1) * in_len]);
    }
}

/// 2×2 stride-2 max pooling over `[batch*c, h, w]` planes. Writes the flat
/// index of each winner; ties go to the first element in row-major order.
pub(crate) fn maxpool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T], idx: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = x[best];
                idx[o] = best as u32;
            }
        }
    }
}

pub(crate) fn maxpool_backward<T: Real>(dy: &[T], idx: &[u32], dx: &mut [T]) {
    dx.fill(T::zero());
    for (g, &i) in dy.iter().zip(idx) {
        dx[i as usize] += *g;
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Direct quadruple loop reference for "same" convolution.
    fn conv_reference(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
        let pad = (g.k / 2) as isize;
        let mut out = vec![0.0; g.c_out * g.h * g.w];
        for co in 0..g.c_out {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let mut acc = bias[co];
                    for ci in 0..g.c_in {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = y as isize + ki as isize - pad;
                                let ix = xx as isize + kj as isize - pad;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w[((co * g.c_in + ci) * g.k + ki) * g.k + kj] * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * g.h + y) * g.w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3, 5] {
            let g = ConvGeom {
                c_in: 2,
                c_out: 3,
                h: 8,
                w: 8,
                k,
            };
            let x: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; 3 * 64];
            conv_forward(&g, &x, 1, &w, &bias, &mut out);
            let reference = conv_reference(&g, &x, &w, &bias);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn maxpool_breaks_ties_by_first_index() {
        let x = [1.0f32, 1.0, 1.0, 1.0];
        let mut out = [0.0f32];
        let mut idx = [9u32];
        maxpool_forward(&x, 1, 2, 2, &mut out, &mut idx);
        assert_eq!((out[0], idx[0]), (1.0, 0));
        let x = [1.0f32, 3.0, 3.0, 2.0];
        maxpool_forward(&x, 1, 2, 2, &mut out, &mut idx);
        assert_eq!((out[0], idx[0]), (3.0, 1));
    }

    #[test]
    fn stable_activations() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }
}

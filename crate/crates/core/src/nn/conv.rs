//! Same-padding stride-1 convolution via chunked im2col + GEMM.

use super::element::{gemm, MatMut, MatRef};
use super::Element;

/// Output positions per im2col chunk; bounds the scratch buffer.
const CHUNK_POSITIONS: usize = 4096;

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
}

impl Geometry {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        Self {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k: ws[2],
            pad: ws[2] / 2,
        }
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn rows_per_chunk(&self) -> usize {
        (CHUNK_POSITIONS / self.w).max(1)
    }
}

/// Fills `cols` (ckk x rows*w) for output rows `[r0, r0 + rows)` of one sample.
fn im2col<T: Element>(x: &[T], g: &Geometry, r0: usize, rows: usize, cols: &mut [T]) {
    let len = rows * g.w;
    for c in 0..g.c {
        let plane = &x[c * g.hw()..(c + 1) * g.hw()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut cols[((c * g.k + ki) * g.k + kj) * len..][..len];
                for r in 0..rows {
                    let dst = &mut row[r * g.w..(r + 1) * g.w];
                    let src_r = (r0 + r + ki) as isize - g.pad as isize;
                    if src_r < 0 || src_r >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[src_r as usize * g.w..(src_r as usize + 1) * g.w];
                    // dst[j] = src[j + kj - pad] where in range
                    let shift = kj as isize - g.pad as isize;
                    for (j, d) in dst.iter_mut().enumerate() {
                        let sj = j as isize + shift;
                        *d = if sj >= 0 && sj < g.w as isize { src[sj as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto one sample's input gradient.
fn col2im<T: Element>(cols: &[T], g: &Geometry, r0: usize, rows: usize, dx: &mut [T]) {
    let len = rows * g.w;
    for c in 0..g.c {
        let plane = &mut dx[c * g.hw()..(c + 1) * g.hw()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[((c * g.k + ki) * g.k + kj) * len..][..len];
                for r in 0..rows {
                    let src_r = (r0 + r + ki) as isize - g.pad as isize;
                    if src_r < 0 || src_r >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[src_r as usize * g.w..(src_r as usize + 1) * g.w];
                    let shift = kj as isize - g.pad as isize;
                    for (j, &v) in row[r * g.w..(r + 1) * g.w].iter().enumerate() {
                        let sj = j as isize + shift;
                        if sj >= 0 && sj < g.w as isize {
                            dst[sj as usize] = dst[sj as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    xs: &[usize],
    weight: &[T],
    ws: &[usize],
    bias: &[T],
) -> Vec<T> {
    let g = Geometry::new(xs, ws);
    let (hw, ckk) = (g.hw(), g.ckk());
    let mut out = vec![T::zero(); g.n * g.o * hw];
    let rows_per_chunk = g.rows_per_chunk();
    let mut cols = vec![T::zero(); ckk * rows_per_chunk * g.w];
    for s in 0..g.n {
        let xs_ = &x[s * g.c * hw..(s + 1) * g.c * hw];
        let out_s = &mut out[s * g.o * hw..(s + 1) * g.o * hw];
        let mut r0 = 0;
        while r0 < g.h {
            let rows = rows_per_chunk.min(g.h - r0);
            let len = rows * g.w;
            im2col(xs_, &g, r0, rows, &mut cols);
            gemm(
                T::one(),
                MatRef::rows(weight, g.o, ckk),
                MatRef::rows(&cols[..ckk * len], ckk, len),
                T::zero(),
                MatMut {
                    data: &mut *out_s,
                    offset: r0 * g.w,
                    rows: g.o,
                    cols: len,
                    rs: hw,
                    cs: 1,
                },
            );
            r0 += rows;
        }
        for (o, plane) in out_s.chunks_exact_mut(hw).enumerate() {
            for v in plane {
                *v = *v + bias[o];
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    xs: &[usize],
    weight: &[T],
    ws: &[usize],
    gy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> ConvGrads<T> {
    let g = Geometry::new(xs, ws);
    let (hw, ckk) = (g.hw(), g.ckk());
    let rows_per_chunk = g.rows_per_chunk();
    let mut cols = vec![T::zero(); ckk * rows_per_chunk * g.w];
    let mut dcols = vec![T::zero(); if want_dx { ckk * rows_per_chunk * g.w } else { 0 }];
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); weight.len()]);

    let mut db = vec![0.0f64; g.o];
    for s in 0..g.n {
        let gy_s = &gy[s * g.o * hw..(s + 1) * g.o * hw];
        for (o, plane) in gy_s.chunks_exact(hw).enumerate() {
            db[o] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        if !want_dx && !want_dw {
            continue;
        }
        let x_s = &x[s * g.c * hw..(s + 1) * g.c * hw];
        let mut r0 = 0;
        while r0 < g.h {
            let rows = rows_per_chunk.min(g.h - r0);
            let len = rows * g.w;
            let gy_chunk = MatRef {
                data: gy_s,
                offset: r0 * g.w,
                rows: g.o,
                cols: len,
                rs: hw,
                cs: 1,
            };
            if let Some(dw) = dw.as_mut() {
                im2col(x_s, &g, r0, rows, &mut cols);
                // dW += dY_chunk (o x len) * cols^T (len x ckk)
                gemm(
                    T::one(),
                    gy_chunk,
                    MatRef::transposed(&cols[..ckk * len], len, ckk),
                    T::one(),
                    MatMut::rows(dw, g.o, ckk),
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = W^T (ckk x o) * dY_chunk (o x len)
                gemm(
                    T::one(),
                    MatRef::transposed(weight, ckk, g.o),
                    gy_chunk,
                    T::zero(),
                    MatMut::rows(&mut dcols[..ckk * len], ckk, len),
                );
                col2im(&dcols[..ckk * len], &g, r0, rows, &mut dx[s * g.c * hw..(s + 1) * g.c * hw]);
            }
            r0 += rows;
        }
    }
    ConvGrads {
        dx,
        dw,
        db: db.into_iter().map(T::of_f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive(x: &[f64], xs: &[usize], w: &[f64], ws: &[usize], b: &[f64]) -> Vec<f64> {
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; n * o * h * wd];
        for s in 0..n {
            for oc in 0..o {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let (si, sj) = (i as isize + ki as isize - pad, j as isize + kj as isize - pad);
                                    if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                        continue;
                                    }
                                    acc += w[((oc * c + ic) * k + ki) * k + kj]
                                        * x[((s * c + ic) * h + si as usize) * wd + sj as usize];
                                }
                            }
                        }
                        out[((s * o + oc) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let out = conv2d_forward(&[1.0f64; 9], &[1, 1, 3, 3], &[1.0; 9], &[1, 1, 3, 3], &[0.0]);
        assert_eq!(out, [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x: Vec<f64> = (0..20).map(|v| v as f64 * 0.3 - 2.0).collect();
        let mut w = [0.0; 9];
        w[4] = 1.0;
        let out = conv2d_forward(&x, &[1, 1, 4, 5], &w, &[1, 1, 3, 3], &[0.0]);
        assert_eq!(out, x);
    }

    #[test]
    fn matches_naive_across_chunks() {
        // width 3 forces many row chunks when CHUNK_POSITIONS is small relative to h
        let xs = [2, 3, 1500, 3];
        let ws = [4, 3, 3, 3];
        let x: Vec<f64> = (0..xs.iter().product::<usize>()).map(|i| ((i * 37 % 101) as f64 - 50.0) / 25.0).collect();
        let w: Vec<f64> = (0..ws.iter().product::<usize>()).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect();
        let b = [0.1, -0.2, 0.3, 0.0];
        let fast = conv2d_forward(&x, &xs, &w, &ws, &b);
        let slow = naive(&x, &xs, &w, &ws, &b);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }
}

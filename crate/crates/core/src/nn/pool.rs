use super::Element;

const KERNEL: usize = 2;

/// `(extent - 2) / stride + 1`, or `None` below the kernel size.
pub(crate) fn pooled_extent(extent: usize, stride: usize) -> Option<usize> {
    (extent >= KERNEL && stride > 0).then(|| (extent - KERNEL) / stride + 1)
}

pub(crate) fn max_pool2d_forward<T: Element>(
    x: &[T],
    xs: &[usize],
    stride: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<u32>) {
    let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let (r, c) = (i * stride, j * stride);
                let mut best = base + r * w + c;
                // row-major window order; strict comparison keeps the first maximum
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (r + dr) * w + c + dc;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool2d_backward<T: Element>(gy: &[T], argmax: &[u32], len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); len];
    for (&src, &g) in argmax.iter().zip(gy) {
        dx[src as usize] = dx[src as usize] + g;
    }
    dx
}

use super::Element;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch mean and unbiased variance from one train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

impl BatchStats {
    /// `running <- (1 - momentum) running + momentum batch`.
    pub fn update_running<T: Element>(&self, running_mean: &mut [T], running_var: &mut [T]) {
        for c in 0..self.mean.len() {
            let m = running_mean[c].as_f64();
            let v = running_var[c].as_f64();
            running_mean[c] = T::of_f64((1.0 - BN_MOMENTUM) * m + BN_MOMENTUM * self.mean[c]);
            running_var[c] = T::of_f64((1.0 - BN_MOMENTUM) * v + BN_MOMENTUM * self.var_unbiased[c]);
        }
    }
}

pub(crate) struct BnSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    train: bool,
}

pub(crate) struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn batch_norm_forward<T: Element>(
    x: &[T],
    xs: &[usize],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    train: bool,
) -> (Vec<T>, BnSaved<T>, Option<BatchStats>) {
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let count = (n * hw) as f64;
    let channel = |ch: usize| (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);

    let (mean, var, stats) = if train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let m = channel(ch).map(|i| x[i].as_f64()).sum::<f64>() / count;
            let v = channel(ch)
                .map(|i| {
                    let d = x[i].as_f64() - m;
                    d * d
                })
                .sum::<f64>()
                / count;
            mean[ch] = m;
            var[ch] = v;
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var_unbiased: var.iter().map(|v| v * count / (count - 1.0)).collect(),
        };
        (mean, var, Some(stats))
    } else {
        (
            running_mean.iter().map(|v| v.as_f64()).collect(),
            running_var.iter().map(|v| v.as_f64()).collect(),
            None,
        )
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for ch in 0..c {
        let (g, b) = (gamma[ch].as_f64(), beta[ch].as_f64());
        for i in channel(ch) {
            let h = (x[i].as_f64() - mean[ch]) * inv_std[ch];
            xhat[i] = T::of_f64(h);
            out[i] = T::of_f64(g * h + b);
        }
    }
    (out, BnSaved { xhat, inv_std, train }, stats)
}

pub(crate) fn batch_norm_backward<T: Element>(
    gy: &[T],
    xs: &[usize],
    gamma: &[T],
    saved: &BnSaved<T>,
) -> BnGrads<T> {
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let count = (n * hw) as f64;
    let channel = |ch: usize| (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
    let mut dx = vec![T::zero(); gy.len()];
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in channel(ch) {
            let d = gy[i].as_f64();
            sum_dy += d;
            sum_dy_xhat += d * saved.xhat[i].as_f64();
        }
        dgamma.push(T::of_f64(sum_dy_xhat));
        dbeta.push(T::of_f64(sum_dy));
        let scale = gamma[ch].as_f64() * saved.inv_std[ch];
        if saved.train {
            for i in channel(ch) {
                let v = gy[i].as_f64() - sum_dy / count - saved.xhat[i].as_f64() * sum_dy_xhat / count;
                dx[i] = T::of_f64(scale * v);
            }
        } else {
            for i in channel(ch) {
                dx[i] = T::of_f64(scale * gy[i].as_f64());
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

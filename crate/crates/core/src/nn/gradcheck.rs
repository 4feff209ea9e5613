//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, NnError, Tensor, Var};

/// Which coordinates of each parameter to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coordinates {
    All,
    /// Up to `per_param` random coordinates of every parameter.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (param index, coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `loss` with respect to every tensor
/// in `params` against `(f(p + eps) - f(p - eps)) / 2 eps`.
///
/// `loss` builds the scalar on a fresh graph over the (possibly perturbed)
/// parameters; it must be deterministic, so dropout seeds are fixed.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    mode: Mode,
    eps: f64,
    coords: Coordinates,
    loss: F,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, NnError>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, NnError> {
        let mut g = Graph::new(ps, mode, 0);
        let out = loss(&mut g)?;
        match g.value(out) {
            [v] => Ok(*v),
            _ => Err(NnError::NonScalarLoss(g.shape(out).to_vec())),
        }
    };

    let analytic = {
        let mut g = Graph::new(params, mode, 0);
        let out = loss(&mut g)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(NnError::NonScalarLoss(g.shape(out).to_vec()));
        }
        if !v[0].is_finite() {
            return Err(NnError::NonFinite("loss at the check point"));
        }
        g.backward(out)?
    };

    let mut rng = match coords {
        Coordinates::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for pi in 0..params.len() {
        if !params[pi].requires_grad() {
            continue;
        }
        let n = params[pi].numel();
        let picks: Vec<usize> = match (&coords, rng.as_mut()) {
            (Coordinates::Sample { per_param, .. }, Some(r)) if *per_param < n => sample(r, n, *per_param).into_vec(),
            _ => (0..n).collect(),
        };
        let grad = analytic.param(pi);
        for ci in picks {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g[ci]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap().requiring_grad();
        // 0.5 * p.p, with p used as both the input row and the weight row
        let report = grad_check(&[p], Mode::Eval, 1e-3, Coordinates::All, |g| {
            let x = g.param(0);
            let xr = g.reshape(x, vec![1, 5])?;
            let w = g.reshape(x, vec![1, 5])?;
            let zero = g.input(Tensor::zeros(vec![1]));
            let y = g.linear(xr, w, zero)?;
            let y = g.reshape(y, vec![1])?;
            g.dot_const(y, vec![0.5])
        })
        .unwrap();
        assert_eq!(report.checked, 5);
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().requiring_grad();
        let r = grad_check(&[p], Mode::Eval, 1e-3, Coordinates::All, |g| Ok(g.param(0)));
        assert!(matches!(r, Err(NnError::NonScalarLoss(_))));
    }
}

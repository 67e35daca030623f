use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor holding the worst coordinate.
    pub worst: String,
    /// Worst relative error per tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub coordinates: usize,
}

/// Compares analytic gradients against fourth-order central differences
/// (five-point stencil) on up to
/// `coords_per_tensor` random coordinates of every tensor.
///
/// The error of one coordinate is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    loss: F,
    eps: f64,
    coords_per_tensor: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |params: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        Ok(g.scalar(l))
    };
    let grads = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), per_tensor: Vec::new(), coordinates: 0 };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let picks = sample(rng, n, coords_per_tensor.min(n));
        let mut worst = 0.0f64;
        for e in picks.iter() {
            let orig = flat(params, id)[e];
            let mut at = |x: f64| -> Result<f64> {
                flat_mut(params, id)[e] = x;
                let v = eval(params)?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { step: 0, detail: format!("gradient check of {}", params.name(id)) });
                }
                Ok(v)
            };
            let (p2, p1, m1, m2) = (at(orig + 2.0 * eps)?, at(orig + eps)?, at(orig - eps)?, at(orig - 2.0 * eps)?);
            flat_mut(params, id)[e] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.as_slice().expect("standard layout")[e]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
            report.coordinates += 1;
        }
        let name = params.name(id).to_string();
        if worst >= report.max_rel_error {
            report.max_rel_error = worst;
            report.worst = name.clone();
        }
        report.per_tensor.push((name, worst));
    }
    Ok(report)
}

fn flat(params: &ParamStore<f64>, id: crate::tensor::ParamId) -> &[f64] {
    params.get(id).as_slice().expect("standard layout")
}

fn flat_mut(params: &mut ParamStore<f64>, id: crate::tensor::ParamId) -> &mut [f64] {
    params.get_mut(id).as_slice_mut().expect("standard layout")
}

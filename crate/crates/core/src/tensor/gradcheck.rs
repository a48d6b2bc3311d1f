use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the largest elementwise relative error.
///
/// `f` receives a fresh graph and the parameters registered as trainable
/// leaves (in the order given) and must return a scalar loss. It is called
/// `1 + 2·numel` times and must be deterministic.
pub fn finite_difference_check<F>(params: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("param has grad"))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(Error::Shape("finite difference target is not scalar".into()));
        }
        Ok(v.item())
    };

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

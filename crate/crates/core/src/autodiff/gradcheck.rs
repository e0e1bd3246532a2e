use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates of `x`,
/// with central differences of step `eps`.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradient_check_coords(f, x, eps, &coords)
}

/// [`gradient_check`] restricted to the listed coordinates.
pub fn gradient_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g.grad(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.param(t);
        let y = f(&mut g, xv)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the reverse-mode gradient of a scalar function with central
/// finite differences of step `h`, returning the worst componentwise
/// [`relative_error`].
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(input.clone());
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(AutodiffError::NotScalar(g.shape(y).to_vec()));
    }
    g.backward(y)?;
    let analytic = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(t);
        let y = f(&mut g, x)?;
        g.value(y).item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

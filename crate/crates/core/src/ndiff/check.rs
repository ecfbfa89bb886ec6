use super::{Fault, Graph, Tensor, Var};
use crate::error::Result;

/// Compares backward gradients of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h` on every coordinate of every
/// parameter flagged `requires_grad`. Returns the largest relative error,
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh graph and the parameters bound as leaves (in the
/// order of `params`) and must return a one-element node.
pub fn grad_check<F>(params: &mut [Tensor], h: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(params, h, None, f)
}

/// [`grad_check`] on graphs built with a deliberate backward defect.
pub fn grad_check_with_fault<F>(params: &mut [Tensor], h: f64, fault: Option<Fault>, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor], f: &mut F| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::with_fault(fault);
        let vars: Vec<Var> = params.iter().map(|t| g.leaf(t)).collect();
        let root = f(&mut g, &vars)?;
        Ok((g, vars, root))
    };

    let (mut g, vars, root) = eval(params, &mut f)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        if !params[p].requires_grad() {
            continue;
        }
        for i in 0..params[p].len() {
            let orig = params[p].value()[i];
            params[p].value_mut()[i] = orig + h;
            let (g, _, r) = eval(params, &mut f)?;
            let plus = g.item(r);
            params[p].value_mut()[i] = orig - h;
            let (g, _, r) = eval(params, &mut f)?;
            let minus = g.item(r);
            params[p].value_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

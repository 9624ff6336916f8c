use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error across every coordinate of every parameter.
    pub max_rel_error: f64,
    /// Worst relative error per parameter, in input order.
    pub per_param: Vec<f64>,
}

/// Compare analytic gradients against central differences.
///
/// `f` returns the function value (must be a single element) and the analytic
/// gradient for each parameter. The error for a coordinate is
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<(Tensor, Vec<Tensor>)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Domain(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let (value, analytic) = f(params)?;
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract("one gradient per parameter is required".into()));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> { Ok(f(ps)?.0.item()) };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(Error::Contract(format!("gradient {p} has the wrong shape")));
        }
        let mut worst: f64 = 0.0;
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
    })
}

/// Run `build` on a fresh tape with every input as a trainable leaf and return
/// the root value with the gradients of each input.
pub fn eval_with_grads<B>(build: &B, params: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)>
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let value = g.value(root).clone();
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "expected a scalar output, got {:?}",
            value.shape()
        )));
    }
    g.backward(root)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// [`grad_check`] for a function expressed on the tape.
pub fn grad_check_graph<B>(build: B, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check(|ps| eval_with_grads(&build, ps), params, eps)
}

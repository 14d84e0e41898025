use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Largest step accepted by [`finite_difference_check`].
pub const MAX_EPS: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p + eps e) - f(p - eps e)) / (2 eps)` for every coordinate of every
/// parameter. The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` builds the scalar objective on a fresh graph from the parameter
/// leaves it is handed.
pub fn finite_difference_check<F, E>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(eps > 0.0 && eps <= MAX_EPS) {
        return Err(NumericsError::InvalidEpsilon { eps }.into());
    }

    let mut graph = Graph::new();
    let vars = params
        .iter()
        .map(|p| graph.param(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vs = values
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut g, &vs)?;
        Ok(g.value(out).item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for pi in 0..params.len() {
        let mut num = Tensor::zeros(params[pi].shape());
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let n = (up - down) / (2.0 * eps);
            num.data_mut()[k] = n;
            let a = analytic[pi].data()[k];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = f64::max(max_rel_error, rel);
                worst = Some((pi, k));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

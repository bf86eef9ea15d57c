use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)` over all checked scalars.
    pub max_rel_error: f64,
    /// `(parameter, element)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn analytic_grads<F, E>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    match g.backward(loss) {
        Ok(()) => Ok(vars.iter().map(|&v| g.grad(v).cloned().expect("leaf grad")).collect()),
        Err(TensorError::DisconnectedLoss) => Ok(params.iter().map(|p| Tensor::zeros(p.shape())).collect()),
        Err(e) => Err(e.into()),
    }
}

fn evaluate<F, E>(f: &F, params: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), false)).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item()?)
}

/// Checks every scalar of every parameter.
pub fn finite_diff_check<F, E>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    finite_diff_check_at(f, params, step, &coords)
}

/// Checks only the listed `(parameter, element)` coordinates.
pub fn finite_diff_check_at<F, E>(
    f: F,
    params: &[Tensor],
    step: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let grads = analytic_grads(&f, params)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = params.to_vec();
    for &(p, i) in coords {
        let orig = probe[p].data()[i];
        probe[p].data_mut()[i] = orig + step;
        let up = evaluate(&f, &probe)?;
        probe[p].data_mut()[i] = orig - step;
        let down = evaluate(&f, &probe)?;
        probe[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[p].data()[i];
        let err = rel_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((p, i));
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

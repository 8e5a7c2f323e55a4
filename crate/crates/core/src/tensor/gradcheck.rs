use super::{Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step, must lie in `[1e-6, 1e-4]`.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to round-off are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-6,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Flat indices whose relative error exceeds the tolerance.
    pub failing: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub params: Vec<ParamReport>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failing.is_empty())
    }

    pub fn failing_params(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !p.failing.is_empty())
            .map(|p| p.name.as_str())
            .collect()
    }
}

/// Compares the analytic gradient of a scalar objective against central
/// finite differences, coordinate by coordinate.
///
/// `objective` receives a fresh graph and one leaf per entry of `params` (in
/// order) and must return a scalar node. It is evaluated once with gradient
/// tracking and `2·N + 2` times without.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    mut objective: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&config.h) {
        return Err(TensorError::Invalid(format!(
            "grad_check step {} outside [1e-6, 1e-4]",
            config.h
        )));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let first = evaluate(&mut objective, &values)?;
    let second = evaluate(&mut objective, &values)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
    let loss = objective(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    drop(g);

    let mut reports = Vec::with_capacity(params.len());
    let mut coordinates = 0;
    let mut overall = 0.0f64;
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut report = ParamReport {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            failing: Vec::new(),
        };
        for idx in 0..values[pi].len() {
            let orig = values[pi].values()[idx];
            values[pi].values_mut()[idx] = orig + config.h;
            let plus = evaluate(&mut objective, &values)?;
            values[pi].values_mut()[idx] = orig - config.h;
            let minus = evaluate(&mut objective, &values)?;
            values[pi].values_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * config.h);
            let a = analytic[pi][idx];
            let denom = a.abs().max(numeric.abs()).max(config.floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = idx;
            }
            if rel > config.tol {
                report.failing.push(idx);
            }
            coordinates += 1;
        }
        overall = overall.max(report.max_rel_err);
        reports.push(report);
    }
    Ok(GradCheckReport {
        max_rel_err: overall,
        tol: config.tol,
        params: reports,
        coordinates,
    })
}

fn evaluate<F>(objective: &mut F, values: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
    let out = objective(&mut g, &vars)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(TensorError::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.values()[0])
}

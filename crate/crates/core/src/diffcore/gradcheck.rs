use super::{DiffError, Gradients, Graph, ParamSet, Var};

/// Denominator floor for the relative error, so entries whose true gradient
/// is (numerically) zero are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// Central differences `(f(p + h) - f(p - h)) / 2h`, one element at a time.
pub fn finite_difference<F>(params: &ParamSet, f: F, step: f64) -> Result<Gradients, DiffError>
where
    F: Fn(&ParamSet) -> Result<f64, DiffError>,
{
    let mut probe = params.clone();
    let mut out = Gradients::zeros_like(params);
    for id in params.ids() {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let plus = f(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let minus = f(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            out.get_mut(id).data_mut()[j] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

pub fn compare_gradients(
    params: &ParamSet,
    analytic: &Gradients,
    numeric: &Gradients,
    tol: f64,
) -> GradCheckReport {
    let tensors: Vec<TensorCheck> = params
        .ids()
        .map(|id| {
            let mut check = TensorCheck {
                name: params.name(id).to_string(),
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                worst_index: 0,
            };
            let pairs = analytic.get(id).data().iter().zip(numeric.get(id).data());
            for (j, (&a, &n)) in pairs.enumerate() {
                let abs = (a - n).abs();
                let rel = abs / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR);
                check.max_abs_error = check.max_abs_error.max(abs);
                if rel > check.max_rel_error || rel.is_nan() {
                    check.max_rel_error = rel;
                    check.worst_index = j;
                }
            }
            check
        })
        .collect();
    let passed = tensors.iter().all(|t| t.max_rel_error < tol);
    GradCheckReport {
        tensors,
        tol,
        passed,
    }
}

/// Checks the tape's gradient of the scalar built by `build` against
/// central finite differences of the same function.
pub fn grad_check<F>(params: &ParamSet, build: F, step: f64, tol: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, DiffError>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let numeric = finite_difference(
        params,
        |p| {
            let mut g = Graph::new(p);
            let loss = build(&mut g)?;
            Ok(g.value(loss).item())
        },
        step,
    )?;
    Ok(compare_gradients(params, &analytic, &numeric, tol))
}

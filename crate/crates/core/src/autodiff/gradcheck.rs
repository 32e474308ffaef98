use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every checked entry.
    pub max_rel_error: f64,
    /// Largest relative error per parameter, in input order.
    pub per_param: Vec<(String, f64)>,
    /// Number of scalar entries compared.
    pub points: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Upper bound on entries checked per parameter; entries are taken at an
    /// even stride when a parameter is larger.
    pub max_entries_per_param: Option<usize>,
    /// Multiplier applied to analytic gradients before comparison. Anything
    /// other than 1 deliberately corrupts the check.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            max_entries_per_param: None,
            analytic_scale: 1.0,
        }
    }
}

/// `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[(String, Tensor)]) -> Result<(Tape, Vec<Var>, Var), AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(n, t)| tape.param(n.clone(), t.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape
        .value(out)
        .item()
        .ok_or_else(|| AutodiffError::NotScalar(tape.shape(out).to_vec()))?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite(value));
    }
    Ok((tape, vars, out))
}

fn value_at<F>(f: &F, params: &[(String, Tensor)]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let (tape, _, out) = evaluate(f, params)?;
    Ok(tape.value(out).data()[0])
}

/// Checks every entry of every parameter with step `eps`.
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor)],
    eps: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    grad_check_with(f, params, eps, GradCheckOptions::default())
}

pub fn grad_check_with<F>(
    f: F,
    params: &[(String, Tensor)],
    eps: f64,
    options: GradCheckOptions,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(AutodiffError::Invalid(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    let (tape, vars, out) = evaluate(&f, params)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error: f64 = 0.0;
    let mut points = 0;
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(&tape, *var);
        let n = analytic.len();
        let stride = match options.max_entries_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        for k in (0..n).step_by(stride) {
            let original = params[p].1.data()[k];
            work[p].1.data_mut()[k] = original + eps;
            let plus = value_at(&f, &work)?;
            work[p].1.data_mut()[k] = original - eps;
            let minus = value_at(&f, &work)?;
            work[p].1.data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k] * options.analytic_scale;
            worst = worst.max(relative_error(a, numeric));
            points += 1;
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((params[p].0.clone(), worst));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        points,
    })
}

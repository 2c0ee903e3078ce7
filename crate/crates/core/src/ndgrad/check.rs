use super::{GradError, Graph, ParamId, ParamStore, Tensor, Var};

/// Denominator floor of the relative error, so that gradients that are
/// zero up to round-off compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
    pub max_rel_err: f64,
    /// Parameter name and flat index where `max_rel_err` occurred.
    pub worst: Option<(String, usize)>,
    /// Number of scalar entries compared.
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F, E>(params: &ParamStore<f64>, f: &mut F) -> Result<f64, E>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<GradError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(GradError::NonScalarLoss { shape: v.shape().to_vec() }.into());
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(GradError::NonFinite { op: "finite_diff_check" }.into());
    }
    Ok(x)
}

/// Gradients of the loss built by `f`, from a single backward pass over
/// freshly zeroed accumulators. The store's grads are left zeroed.
pub fn analytic_gradients<F, E>(params: &mut ParamStore<f64>, f: &mut F) -> Result<Vec<Tensor<f64>>, E>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<GradError>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss, params)?;
    let grads = params.iter().map(|p| p.grad.clone()).collect();
    params.zero_grad();
    Ok(grads)
}

/// Step for [`finite_diff_check_extrapolated`] on composite graphs.
pub const EXTRAPOLATED_STEP: f64 = 1e-3;

/// Central difference of entry `e` of parameter `id` with step `h`.
fn central<F, E>(params: &mut ParamStore<f64>, id: ParamId, e: usize, h: f64, f: &mut F) -> Result<f64, E>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<GradError>,
{
    let orig = params.value(id).data()[e];
    params.get_mut(id).value.data_mut()[e] = orig + h;
    let plus = evaluate(params, f);
    params.get_mut(id).value.data_mut()[e] = orig - h;
    let minus = evaluate(params, f);
    params.get_mut(id).value.data_mut()[e] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Compares `analytic` against central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps`, one scalar entry at a time.
pub fn compare_gradients<F, E>(params: &mut ParamStore<f64>, analytic: &[Tensor<f64>], eps: f64, mut f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<GradError>,
{
    compare_with(params, analytic, |params, id, e| central(params, id, e, eps, &mut f))
}

fn compare_with<E>(
    params: &mut ParamStore<f64>,
    analytic: &[Tensor<f64>],
    mut numeric_at: impl FnMut(&mut ParamStore<f64>, ParamId, usize) -> Result<f64, E>,
) -> Result<GradCheckReport, E> {
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let ids: Vec<_> = params.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        for e in 0..grad.numel() {
            let numeric = numeric_at(params, id, e)?;
            let err = relative_error(grad.data()[e], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((params.get(id).name.clone(), e));
            }
        }
    }
    Ok(report)
}

/// Worst relative error between backward-pass gradients and central
/// finite differences over every parameter entry.
pub fn finite_diff_check<F, E>(params: &mut ParamStore<f64>, eps: f64, mut f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<GradError>,
{
    let analytic = analytic_gradients(params, &mut f)?;
    compare_gradients(params, &analytic, eps, f)
}

/// Like [`finite_diff_check`], but the numeric derivative is the Richardson
/// extrapolation `(4 D(eps/2) - D(eps)) / 3` of two central differences,
/// which cancels the `eps^2` truncation term. This allows a step large
/// enough that forward round-off stays negligible on deep graphs.
pub fn finite_diff_check_extrapolated<F, E>(params: &mut ParamStore<f64>, eps: f64, mut f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<GradError>,
{
    let analytic = analytic_gradients(params, &mut f)?;
    compare_with(params, &analytic, |params, id, e| {
        let coarse = central(params, id, e, eps, &mut f)?;
        let fine = central(params, id, e, eps / 2.0, &mut f)?;
        Ok((4.0 * fine - coarse) / 3.0)
    })
}

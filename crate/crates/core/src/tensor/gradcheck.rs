use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Largest admissible relative error.
    pub tol: f64,
    /// Multiply analytic gradients by this factor before comparing. Only
    /// useful to confirm the checker notices a broken backward pass.
    pub corrupt_factor: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            tol: 1e-3,
            corrupt_factor: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - n| / max(1, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// Compare the tape's gradients of the scalar built by `f` against central
/// differences for every entry of `params` (every trainable parameter when
/// `params` is empty). `store` is restored before returning.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    opts: GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = if params.is_empty() {
        store.ids().filter(|&id| store.get(id).trainable).collect()
    } else {
        params.to_vec()
    };

    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_into(store);
    let scale = opts.corrupt_factor.unwrap_or(1.0);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradCheckReport {
        params: Vec::with_capacity(ids.len()),
        max_rel_error: 0.0,
        tol: opts.tol,
        passed: true,
    };
    for id in ids {
        let analytic: Vec<f64> = store.get(id).grad.iter().map(|g| g * scale).collect();
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).value.values()[i];
            store.get_mut(id).value.values_mut()[i] = orig + opts.h;
            let plus = eval(store);
            store.get_mut(id).value.values_mut()[i] = orig - opts.h;
            let minus = eval(store);
            store.get_mut(id).value.values_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.h);
            worst = worst.max(relative_error(a, numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.params.push(ParamError {
            name: store.get(id).name.clone(),
            entries: analytic.len(),
            max_rel_error: worst,
        });
    }
    store.zero_grad();
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}

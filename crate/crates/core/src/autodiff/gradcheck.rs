use super::{ParamId, ParamStore, Tape, TensorError, Var};

/// Entries whose analytic and numeric gradients are both below this are
/// compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Options for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
    /// Restrict the check to these parameters (all when empty).
    pub params: Vec<ParamId>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: None,
            params: Vec::new(),
        }
    }
}

/// Compares reverse-mode gradients of `f` with central finite differences.
///
/// `f` builds the program on a fresh tape and returns a scalar loss.
pub fn grad_check<F>(store: &ParamStore<f64>, opts: &GradCheck, f: F) -> Result<GradCheckReport, TensorError>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &'a ParamStore<f64>) -> Result<Var, TensorError>,
{
    if !(1e-7..=1e-4).contains(&opts.step) {
        return Err(TensorError::Invalid(format!("grad_check step {} outside [1e-7, 1e-4]", opts.step)));
    }
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        Ok(tape.value(loss).item())
    };

    let ids: Vec<ParamId> = if opts.params.is_empty() {
        store.ids().collect()
    } else {
        opts.params.clone()
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for id in ids {
        let n = store.value(id).len();
        let stride = match opts.max_entries_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let grad = analytic.param(id);
        for e in (0..n).step_by(stride) {
            let orig = store.value(id).data()[e];
            work.value_mut(id).data_mut()[e] = orig + opts.step;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[e] = orig - opts.step;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let exact = grad.map_or(0.0, |g| g.data()[e]);
            let denom = exact.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), e));
            }
        }
    }
    Ok(report)
}

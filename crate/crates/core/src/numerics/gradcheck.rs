//! Central-difference validation of tape gradients.

use crate::error::{Error, Result};

use super::{Grads, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero on both sides do not divide by zero.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err > self.tol)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<40} {:>6} entries  max rel err {:.3e}{}",
                p.name,
                p.checked,
                p.max_rel_err,
                if p.max_rel_err > self.tol { "  FAIL" } else { "" }
            )?;
        }
        write!(
            f,
            "overall max rel err {:.3e} (tol {:.1e}): {}",
            self.max_rel_err(),
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Checks `grad` against central differences of `value` for every trainable
/// parameter in `params`.
pub fn grad_check_fn(
    value: impl Fn(&ParamStore<f64>) -> Result<f64>,
    grad: impl Fn(&ParamStore<f64>) -> Result<Grads<f64>>,
    params: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = grad(params)?;
    let mut work = params.clone();
    let mut out = Vec::new();
    for id in params.ids() {
        let entry = params.entry(id);
        if !entry.trainable {
            continue;
        }
        let n = entry.value.len();
        let stride = match opts.max_entries {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: entry.name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for i in (0..n).step_by(stride) {
            let orig = entry.value.data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = value(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = value(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective while perturbing `{}`[{i}]",
                    entry.name
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > check.max_rel_err || check.checked == 0 {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
            check.checked += 1;
        }
        out.push(check);
    }
    Ok(GradCheckReport {
        params: out,
        tol: opts.tol,
    })
}

/// Tape-based wrapper: `f` records a scalar objective on a fresh tape.
pub fn grad_check(
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    params: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let value = |p: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let out = f(&mut tape, p)?;
        Ok(tape.value(out).data()[0])
    };
    let grad = |p: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let out = f(&mut tape, p)?;
        if !tape.value(out).data()[0].is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        tape.backward(out, p.len())
    };
    grad_check_fn(value, grad, params, opts)
}

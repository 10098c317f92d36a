use super::rng::RngStream;
use super::tape::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// `|a − b| / max(1e−8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// Parameters are perturbed in place and restored before returning.
pub fn grad_check<F>(params: &mut ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, p)?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let grads = {
        let tape = Tape::new();
        let out = f(&tape, params)?;
        tape.backward(out, params.len())?
    };
    if !grads.all_finite() {
        return Err(Error::NonFinite("grad_check tape gradient".into()));
    }

    let mut coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect();
    if let Some(k) = opts.max_coords {
        if k < coords.len() {
            let mut rng = RngStream::new(opts.seed, 0x6772_6164);
            rng.shuffle(&mut coords);
            coords.truncate(k);
            coords.sort();
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: coords.len(),
    };
    for (id, i) in coords {
        let orig = params.get(id).data()[i];
        params.get_mut(id).data_mut()[i] = orig + opts.eps;
        let plus = eval(params);
        params.get_mut(id).data_mut()[i] = orig - opts.eps;
        let minus = eval(params);
        params.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * opts.eps);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

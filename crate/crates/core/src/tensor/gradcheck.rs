use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};

/// Outcome of comparing backward gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of |a − b| / (|a| + |b| + 1e−12)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares the gradient of the scalar built by `f` against central finite
/// differences `(f(x+eps) − f(x−eps)) / (2·eps)` for every parameter
/// element of `params`.
///
/// `f` must be deterministic: it is called once with a tracked tape and
/// twice per element with fresh tapes.
pub fn grad_check<F, E>(f: F, params: &mut ParamStore<f64>, eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<super::TensorError>,
{
    check_elements(f, params, eps, |len| (0..len).collect())
}

/// Like [`grad_check`], but tensors with more than `per_tensor` elements
/// are checked at `per_tensor` distinct positions drawn from `seed`.
/// Smaller tensors are checked in full.
pub fn grad_check_sampled<F, E>(
    f: F,
    params: &mut ParamStore<f64>,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<super::TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check_elements(f, params, eps, |len| {
        if len <= per_tensor {
            (0..len).collect()
        } else {
            let mut picked = rand::seq::index::sample(&mut rng, len, per_tensor).into_vec();
            picked.sort_unstable();
            picked
        }
    })
}

fn check_elements<F, E>(
    f: F,
    params: &mut ParamStore<f64>,
    eps: f64,
    mut positions: impl FnMut(usize) -> Vec<usize>,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<super::TensorError>,
{
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss)?;
    tape.flush_grads(params);
    drop(tape);

    let eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: None, worst_analytic: 0.0, worst_numeric: 0.0, checked: 0 };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let analytic = params.get(id).grad.clone();
        for i in positions(analytic.len()) {
            let a = analytic[i];
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), i));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative discrepancy between the tape gradient of `f` at `point`
/// and a central finite difference with step `eps`.
///
/// The discrepancy per coordinate is `|g_auto − g_fd| / max(1, |g_auto|, |g_fd|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps, None)
}

/// Multi-input variant. When `max_coords` is set, at most that many evenly
/// spaced coordinates of each input are probed.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    check_finite(tape.value(root).item()?)?;
    let grads = tape.backward(root)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.constant(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        check_finite(tape.value(root).item()?)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (t, p) in points.iter().enumerate() {
        let auto = grads.get(vars[t]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < p.len() => (0..m).map(|i| i * p.len() / m).collect(),
            _ => (0..p.len()).collect(),
        };
        for i in coords {
            let orig = p.data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ga = auto.data()[i];
            let err = (ga - fd).abs() / 1.0f64.max(ga.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("function evaluated to {v}")))
    }
}

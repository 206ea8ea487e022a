use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got {:?}",
            value.shape()
        )));
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check function returned {y}")));
    }
    Ok(y)
}

/// Checks every coordinate of `x`. See [`grad_check_coords`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &all)
}

/// Compares the reverse-mode gradient of scalar `f` at `x` against central
/// differences with step `eps` on the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let y = tape.value(out).item();
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check function returned {y}")));
    }
    let mut grads = tape.backward(out)?;
    let full = grads
        .take(v)
        .map(|g| g.into_data())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &c in coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[c] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[c] = orig;
        analytic.push(full[c]);
        numeric.push((up - down) / (2.0 * eps));
    }
    let (worst, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_err,
        worst: coords.get(worst).copied().unwrap_or(0),
        analytic,
        numeric,
    })
}

use std::fmt;

use super::{Graph, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("{kind} gradient is non-finite at input {input}, coordinate {index}")]
    NonFinite {
        kind: &'static str,
        input: usize,
        index: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the largest relative error.
    pub worst: (usize, usize),
    pub coords: usize,
    pub pass: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "op={} max_rel_err={:.3e} pass={}",
            self.op, self.max_rel_err, self.pass
        )
    }
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// entry of `inputs` against `(f(x+h) - f(x-h)) / 2h`.
///
/// Relative error per coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).values()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut worst = (0, 0);
    let mut coords = 0;
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let x0 = t.values()[j];
            probe[ti].values_mut()[j] = x0 + h;
            let fp = eval(&probe)?;
            probe[ti].values_mut()[j] = x0 - h;
            let fm = eval(&probe)?;
            probe[ti].values_mut()[j] = x0;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][j];
            if !a.is_finite() {
                return Err(GradCheckError::NonFinite {
                    kind: "analytic",
                    input: ti,
                    index: j,
                });
            }
            if !numeric.is_finite() {
                return Err(GradCheckError::NonFinite {
                    kind: "numeric",
                    input: ti,
                    index: j,
                });
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = (ti, j);
            }
            coords += 1;
        }
    }
    Ok(GradCheckReport {
        op: name.to_string(),
        max_rel_err: max_rel,
        worst,
        coords,
        pass: max_rel <= tol,
    })
}

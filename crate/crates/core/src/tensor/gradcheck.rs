//! Central finite-difference gradient checking.

use super::{Graph, Result, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per-input relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().cloned().fold(0.0, f64::max)
    }
}

fn eval(f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], grad: bool) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| {
            if grad {
                g.input(t.shape().to_vec(), t.data().to_vec())
            } else {
                g.constant(t.shape().to_vec(), t.data().to_vec())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok((g, out, vars))
}

/// Compares the backward pass of scalar-valued `f` with central differences
/// of step `h` on every input element.
pub fn check(inputs: &[Tensor], h: f64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<GradCheck> {
    let (mut g, out, vars) = eval(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for j in 0..grad.len() {
            let x = probe[i].data()[j];
            probe[i].data_mut()[j] = x + h;
            let (gp, op, _) = eval(&f, &probe, false)?;
            probe[i].data_mut()[j] = x - h;
            let (gm, om, _) = eval(&f, &probe, false)?;
            probe[i].data_mut()[j] = x;
            numeric[j] = (gp.item(op) - gm.item(om)) / (2.0 * h);
        }
        let diff = grad.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        relative_errors.push(diff / na.max(nn).max(1e-10));
    }
    Ok(GradCheck { relative_errors })
}

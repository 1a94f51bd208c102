//! Central finite-difference gradient checking.

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input; the
    /// absolute difference norm when both norms fall below `1e-8`.
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares `∂f/∂inputs` from [`Graph::backward`] with `(f(x+h) − f(x−h)) / 2h`.
///
/// `f` receives a fresh graph and one leaf per input and must return a scalar node.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<_> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        if !g.value(out).is_scalar() {
            return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (slot, id) in ids.iter().enumerate() {
        let analytic = g
            .grad(*id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[slot].numel()]);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[slot].data()[i];
            work[slot].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[slot].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        per_input.push(if denom < 1e-8 {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        });
    }
    Ok(GradCheck { per_input })
}

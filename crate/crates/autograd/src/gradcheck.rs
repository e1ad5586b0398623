//! Central finite-difference oracle for gradient checks.
//!
//! The oracle only ever evaluates forward values, so it stays independent of
//! the backward rules it is used to verify.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome for one checked input tensor.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; zero when both
    /// gradients vanish below `floor`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let diff: f64 = self
            .analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale < floor {
            0.0
        } else {
            diff / scale
        }
    }
}

/// Compares backprop gradients of the scalar `f(inputs)` against central
/// differences with step `h`, for every input tensor.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Vec<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    analytic
        .into_iter()
        .enumerate()
        .map(|(k, analytic)| {
            let mut numeric = Tensor::zeros(inputs[k].shape());
            for j in 0..inputs[k].numel() {
                let orig = inputs[k].data()[j];
                work[k].data_mut()[j] = orig + h;
                let up = eval(&work);
                work[k].data_mut()[j] = orig - h;
                let down = eval(&work);
                work[k].data_mut()[j] = orig;
                numeric.data_mut()[j] = (up - down) / (2.0 * h);
            }
            GradCheck { analytic, numeric }
        })
        .collect()
}

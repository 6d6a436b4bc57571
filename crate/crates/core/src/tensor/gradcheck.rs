use super::{Graph, Result, Scalar, Tensor, TensorError, Var};

/// A scalar-valued expression that can be built on a graph of any precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, graph: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Compares the `f32` reverse-mode gradient of `f` at `x` against central
/// differences evaluated in `f64` with step `eps`.
///
/// Returns the largest `|analytic - numeric| / max(1, |numeric|)` over all
/// coordinates of `x`.
pub fn finite_diff_check<F: ScalarFn>(f: &F, x: &Tensor<f32>, eps: f64) -> Result<f64> {
    const OP: &str = "finite_diff_check";
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::invalid(OP, format!("step must be positive, got {eps}")));
    }

    let mut graph = Graph::<f32>::new();
    let xv = graph.param(x.clone());
    let out = f.eval(&mut graph, xv)?;
    if !graph.value(out).is_finite() {
        return Err(TensorError::NonFinite { op: OP });
    }
    graph.backward(out)?;
    let analytic = graph.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let base = x.cast::<f64>();
    let eval_at = |point: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let v = g.constant(point);
        let out = f.eval(&mut g, v)?;
        let val = g.value(out);
        if val.len() != 1 {
            return Err(TensorError::NonScalarLoss(val.shape().to_vec()));
        }
        let s = val.data()[0];
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: OP });
        }
        Ok(s)
    };

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] as f64 - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Maximum relative error between reverse-mode and central-difference gradients of a
/// scalar function, `|a - cd| / (|a| + |cd| + 1e-12)` over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::invalid(format!("finite-difference step {} not in (0, 1e-2]", h)));
    }
    let analytic = {
        let mut g = Graph::new();
        let xv = g.param(x.clone())?;
        let out = f(&mut g, xv)?;
        if g.value(out).numel() != 1 {
            return Err(Error::shape("grad_check needs a scalar-valued function"));
        }
        let grads = g.backward_scalar(out)?;
        grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(probe)?;
        let out = f(&mut g, xv)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe".into()));
        }
        Ok(v)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - cd).abs() / (a.abs() + cd.abs() + 1e-12));
    }
    Ok(worst)
}

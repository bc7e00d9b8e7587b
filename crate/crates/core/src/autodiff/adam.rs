use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], lr: f64) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape()
        || state.m.shape() != param.shape()
        || state.v.shape() != param.shape()
    {
        return Err(Error::shape(format!(
            "adam: param {:?}, grad {:?}, moments {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if !(state.lr > 0.0) {
        return Err(Error::invalid(format!("adam learning rate {} must be > 0", state.lr)));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("adam gradient".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(vec![3], vec![3.0, -0.2, 40.0]).unwrap();
        let mut st = AdamState::new(&[3], 0.05);
        adam_step(&mut p, &g, &mut st).unwrap();
        let expect = [1.0 - 0.05, -2.0 + 0.05, 0.5 - 0.05];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[2], 0.1);
        for _ in 0..10 {
            adam_step(&mut p, &Tensor::zeros(&[2]), &mut st).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_square() {
        // scalar oracle: f(x) = x^2, f'(x) = 2x
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&[1], 0.05);
        for _ in 0..100 {
            let g = Tensor::new(vec![1], vec![2.0 * p.data()[0]]).unwrap();
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(p.data()[0].abs() < 0.1, "x = {}", p.data()[0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[2], 0.1);
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st).is_err());
        assert!(adam_step(&mut p, &Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap(), &mut st).is_err());
        st.lr = 0.0;
        assert!(adam_step(&mut p, &Tensor::zeros(&[2]), &mut st).is_err());
    }
}

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn for_params(params: &[&Tensor<T>]) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| (p.rows(), p.cols())).collect();
        Self::new(&shapes)
    }
}

/// One Adam update with decoupled weight decay. `decay[i]` selects which
/// parameters are decayed (`p -= lr * wd * p` before the moment update).
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
    decay: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments, {} decay flags",
                params.len(),
                grads.len(),
                state.m.len(),
                decay.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let step_size = T::of(lr / bc1);
    let bc2_sqrt = T::of(bc2.sqrt());
    let eps = T::of(state.eps);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = T::one() - T::of(lr * weight_decay);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            if decay[i] && weight_decay != 0.0 {
                *pv = *pv * shrink;
            }
            *mv = b1t * *mv + one_b1 * gv;
            *vv = b2t * *vv + one_b2 * gv * gv;
            *pv = *pv - step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = Tensor::<f64>::from_rows(1, 1, vec![0.5]);
        let mut st = AdamState::for_params(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::full(1, 1, 1.0)], &mut st, 0.1, 0.0, &[false]).unwrap();
        assert!((p.item() - 0.4).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = Tensor::<f64>::from_rows(1, 3, vec![0.5, -1.0, 2.0]);
        let before = p.clone();
        let mut st = AdamState::for_params(&[&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Tensor::zeros(1, 3)], &mut st, 0.1, 0.0, &[true]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decay_only_on_flagged() {
        let mut a = Tensor::<f64>::full(1, 1, 1.0);
        let mut b = Tensor::<f64>::full(1, 1, 1.0);
        let mut st = AdamState::for_params(&[&a, &b]);
        let zero = [Tensor::zeros(1, 1), Tensor::zeros(1, 1)];
        adam_step(&mut [&mut a, &mut b], &zero, &mut st, 0.1, 0.5, &[true, false]).unwrap();
        assert!((a.item() - 0.95).abs() < 1e-15);
        assert_eq!(b.item(), 1.0);
    }

    #[test]
    fn rejects_non_finite_grad() {
        let mut p = Tensor::<f64>::zeros(1, 1);
        let mut st = AdamState::for_params(&[&p]);
        let r = adam_step(&mut [&mut p], &[Tensor::full(1, 1, f64::NAN)], &mut st, 0.1, 0.0, &[false]);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
        assert_eq!(st.step, 0);
    }
}

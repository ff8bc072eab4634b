use std::collections::BTreeMap;

use crate::autodiff::{Element, Tensor};

use super::{TrainConfig, TrainError};

/// AdamW moments per named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a String, &'a Tensor<T>)>) -> Self {
        let mut m = BTreeMap::new();
        for (name, p) in params {
            m.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + eps)`.
///
/// Gradients are checked for finiteness before any parameter changes.
pub fn adamw_step<T: Element>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() || state.m.get(name).map(Tensor::shape) != Some(p.shape()) {
            return Err(TrainError::GradientShape(name.clone()));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = config.betas;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let lr = T::from_f64(config.lr);
    let eps = T::from_f64(config.eps);
    let decay = T::one() - T::from_f64(config.lr * config.weight_decay);
    let (bias1, bias2) = (T::from_f64(bias1), T::from_f64(bias2));
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta = *theta * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

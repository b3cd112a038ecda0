use super::Tensor;
use crate::error::{CdError, CdResult};
use crate::scalar::Scalar;
use std::collections::BTreeMap;

/// Named parameter tensors with deterministic (lexicographic) iteration.
#[derive(Debug, Clone)]
pub struct ParamSet<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> CdResult<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(CdError::InvalidConfig(format!(
                "duplicate parameter '{name}'"
            )));
        }
        self.map.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> CdResult<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| CdError::InvalidConfig(format!("no parameter named '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> CdResult<&mut Tensor<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| CdError::InvalidConfig(format!("no parameter named '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for t in self.map.values_mut() {
            t.clear_grad();
        }
    }
}

/// Optimizer slots: first/second moment buffers keyed like the parameters,
/// plus a shared step counter.
#[derive(Debug, Clone)]
pub struct OptimState<S: Scalar> {
    step: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Default for OptimState<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> OptimState<S> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn moment_buf<'a, S: Scalar>(
    map: &'a mut BTreeMap<String, Vec<S>>,
    name: &str,
    len: usize,
) -> CdResult<&'a mut Vec<S>> {
    let buf = map
        .entry(name.to_string())
        .or_insert_with(|| vec![S::zero(); len]);
    if buf.len() != len {
        return Err(CdError::ShapeMismatch(format!(
            "optimizer buffer for '{name}' has {} entries, parameter has {len}",
            buf.len()
        )));
    }
    Ok(buf)
}

/// SGD with classical momentum and coupled weight decay:
/// `v <- mu v + (g + wd p); p <- p - lr v`.
/// Reference hyperparameters: momentum 0.9, weight decay 1e-4.
pub fn sgd_momentum_step<S: Scalar>(
    params: &mut ParamSet<S>,
    state: &mut OptimState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> CdResult<()> {
    let (lr, mu, wd) = (S::from64(lr), S::from64(momentum), S::from64(weight_decay));
    state.step += 1;
    for (name, p) in params.map.iter_mut() {
        let (data, grad) = p.split_mut();
        let grad = grad.ok_or_else(|| CdError::MissingGradient(name.clone()))?;
        let vel = moment_buf(&mut state.m, name, data.len())?;
        for i in 0..data.len() {
            vel[i] = mu * vel[i] + (grad[i] + wd * data[i]);
            data[i] -= lr * vel[i];
        }
    }
    Ok(())
}

/// AdamW: bias-corrected Adam moments with decoupled weight decay
/// (`p <- p - lr wd p` applied alongside the moment step), epsilon 1e-8.
/// Reference hyperparameters: beta1 0.9, beta2 0.999, weight decay 0.01.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamSet<S>,
    state: &mut OptimState<S>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) -> CdResult<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = S::from64(1.0 - beta1.powi(t));
    let bc2 = S::from64(1.0 - beta2.powi(t));
    let (b1, b2) = (S::from64(beta1), S::from64(beta2));
    let (lr, wd) = (S::from64(lr), S::from64(weight_decay));
    let one = S::one();
    let eps = S::norm_eps();
    for (name, p) in params.map.iter_mut() {
        let (data, grad) = p.split_mut();
        let grad = grad.ok_or_else(|| CdError::MissingGradient(name.clone()))?;
        let m = moment_buf(&mut state.m, name, data.len())?;
        let v = moment_buf(&mut state.v, name, data.len())?;
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (one - b1) * grad[i];
            v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * data[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(names: &[(&str, f64, f64)]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        for &(name, value, grad) in names {
            let mut t = Tensor::scalar(value);
            t.set_grad(vec![grad]).unwrap();
            p.insert(name, t).unwrap();
        }
        p
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = scalar_params(&[("w", 1.0, 1.0)]);
        let mut st = OptimState::new();
        sgd_momentum_step(&mut p, &mut st, 0.1, 0.0, 0.0).unwrap();
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_recursion() {
        let mut p = scalar_params(&[("w", 0.0, 1.0)]);
        let mut st = OptimState::new();
        sgd_momentum_step(&mut p, &mut st, 0.1, 0.9, 0.0).unwrap();
        assert!((p.get("w").unwrap().item() + 0.1).abs() < 1e-15);
        p.get_mut("w").unwrap().set_grad(vec![1.0]).unwrap();
        sgd_momentum_step(&mut p, &mut st, 0.1, 0.9, 0.0).unwrap();
        // v2 = 0.9*1 + 1 = 1.9; p = -0.1 - 0.19
        assert!((p.get("w").unwrap().item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_only() {
        let mut p = scalar_params(&[("w", 1.0, 0.0)]);
        let mut st = OptimState::new();
        sgd_momentum_step(&mut p, &mut st, 1.0, 0.0, 1e-4).unwrap();
        assert!((p.get("w").unwrap().item() - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn sgd_missing_gradient_is_error() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::<f64>::scalar(1.0)).unwrap();
        let mut st = OptimState::new();
        let err = sgd_momentum_step(&mut p, &mut st, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, CdError::MissingGradient(n) if n == "w"));
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let mut p = scalar_params(&[("w", 0.5, 1.0)]);
        let mut st = OptimState::new();
        adamw_step(&mut p, &mut st, 0.001, 0.9, 0.999, 0.0).unwrap();
        let delta = p.get("w").unwrap().item() - 0.5;
        // bias correction makes mhat/sqrt(vhat) = 1 at t=1
        assert!((delta + 0.001).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut p = scalar_params(&[("w", 1.0, 0.0)]);
        let mut st = OptimState::new();
        adamw_step(&mut p, &mut st, 0.1, 0.9, 0.999, 0.01).unwrap();
        assert!((p.get("w").unwrap().item() - 0.999).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut p = scalar_params(&[("a", 0.123456789, 0.0), ("b", -3.5, 0.0)]);
        let mut st = OptimState::new();
        for _ in 0..3 {
            adamw_step(&mut p, &mut st, 0.1, 0.9, 0.999, 0.0).unwrap();
            p.get_mut("a").unwrap().set_grad(vec![0.0]).unwrap();
            p.get_mut("b").unwrap().set_grad(vec![0.0]).unwrap();
        }
        assert_eq!(p.get("a").unwrap().item(), 0.123456789);
        assert_eq!(p.get("b").unwrap().item(), -3.5);
    }

    #[test]
    fn param_names_are_unique_and_sorted() {
        let mut p = ParamSet::<f32>::new();
        p.insert("z.w", Tensor::scalar(0.0)).unwrap();
        p.insert("a.w", Tensor::scalar(0.0)).unwrap();
        assert!(p.insert("a.w", Tensor::scalar(1.0)).is_err());
        let names: Vec<&String> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.w", "z.w"]);
    }
}

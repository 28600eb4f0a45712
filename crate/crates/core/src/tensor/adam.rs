use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update on a flat parameter slice.
///
/// `t` is the step count *after* incrementing for this update.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::dim("adam_update", &[param.len()], &[grad.len()]));
    }
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam state over every tensor of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |_| Vec::new();
        let mut adam = Self {
            config,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        };
        for (id, _, t) in store.iter() {
            adam.m[id.0] = vec![T::zero(); t.numel()];
            adam.v[id.0] = vec![T::zero(); t.numel()];
        }
        adam
    }

    /// Applies one update using the store's grad slots. Parameters without
    /// a gradient this step are left untouched, moments included. Grads are
    /// not cleared; callers reset them with [`ParamStore::zero_grads`].
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::dim("adam_step", &[self.m.len()], &[store.len()]));
        }
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            adam_update(
                tensor.data_mut(),
                &grad,
                &mut self.m[id.0],
                &mut self.v[id.0],
                self.step,
                &self.config,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let cfg = AdamConfig::default();
        let mut p = [0.7f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert_eq!(p, [0.7, -2.0]);
    }

    #[test]
    fn three_steps_on_square_match_scalar_oracle() {
        // Hand-rolled Adam for f(w) = w², independent of adam_update.
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut oracle = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            oracle.push(w);
        }

        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(
            AdamConfig {
                lr,
                beta1: b1,
                beta2: b2,
                eps,
            },
            &store,
        );
        for expected in oracle {
            let w = store.get(id).data()[0];
            store.get_mut(id).accumulate_grad(&[2.0 * w]).unwrap();
            adam.step(&mut store).unwrap();
            store.zero_grads();
            assert!((store.get(id).data()[0] - expected).abs() < 1e-10);
        }
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let cfg = AdamConfig::default();
        let mut p = [0.0f64; 2];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        assert!(matches!(
            adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg),
            Err(Error::Dimension { .. })
        ));
    }
}

//! Noam learning-rate schedule and AdamW with decoupled weight decay.

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("learning-rate step counts from 1")]
    StepZero,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("gradient for {name} has shape {got:?}, parameter has {want:?}")]
    Shape { name: String, got: Vec<usize>, want: Vec<usize> },
}

/// `lr_peak * sqrt(w) * min(step^-1/2, step * w^-3/2)`: linear warmup to
/// exactly `lr_peak` at `step = w`, then inverse square-root decay. The
/// step counter restarts at 1 every epoch.
pub fn lr_at(step_in_epoch: usize, lr_peak: f64, warmup: usize) -> Result<f64, OptimError> {
    if step_in_epoch == 0 {
        return Err(OptimError::StepZero);
    }
    let (s, w) = (step_in_epoch as f64, warmup as f64);
    Ok(lr_peak * w.sqrt() * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment buffers for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub hp: AdamWParams,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, hp: AdamWParams) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { hp, step: 0, m: zeros(), v: zeros() }
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    /// Every gradient is validated before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<(), OptimError> {
        for id in store.ids() {
            if let Some(g) = &grads[id.index()] {
                if g.shape() != store.get(id).shape() {
                    return Err(OptimError::Shape {
                        name: store.name(id).to_owned(),
                        got: g.shape().to_vec(),
                        want: store.get(id).shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(OptimError::NonFiniteGrad(store.name(id).to_owned()));
                }
            }
        }
        self.step += 1;
        let AdamWParams { beta1, beta2, eps, weight_decay } = self.hp;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = (1.0 - lr * weight_decay) as f32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                p[j] = p[j] * decay - update as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp(wd: f64) -> AdamWParams {
        AdamWParams { beta1: 0.5, beta2: 0.9, eps: 1e-8, weight_decay: wd }
    }

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut s, "", &mut rng);
        pb.normal("a", &[3, 2], 1.0);
        pb.normal("b", &[4], 1.0);
        s
    }

    #[test]
    fn schedule_examples() {
        let w = 200;
        assert!((lr_at(w, 0.002, w).unwrap() - 0.002).abs() < 1e-12);
        assert!((lr_at(w / 2, 0.002, w).unwrap() - 0.001).abs() < 1e-12);
        assert!((lr_at(4 * w, 0.002, w).unwrap() - 0.001).abs() < 1e-12);
        assert_eq!(lr_at(0, 0.002, w), Err(OptimError::StepZero));
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, hp(0.0));
        let grads: Vec<_> = s.ids().map(|id| Some(Tensor::zeros(s.get(id).shape()))).collect();
        opt.step(&mut s, &grads, 0.01).unwrap();
        for id in s.ids() {
            assert_eq!(s.get(id), before.get(id));
        }
    }

    #[test]
    fn decay_alone_is_a_multiplicative_shrink() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, hp(0.01));
        let grads: Vec<_> = s.ids().map(|id| Some(Tensor::zeros(s.get(id).shape()))).collect();
        opt.step(&mut s, &grads, 0.002).unwrap();
        for id in s.ids() {
            for (a, b) in s.get(id).data().iter().zip(before.get(id).data()) {
                assert_eq!(*a, b * (1.0 - 0.002 * 0.01) as f32);
            }
        }
    }

    #[test]
    fn first_step_matches_closed_form() {
        // from zero moments: m_hat = g, v_hat = g^2, so the step is
        // lr * g / (|g| + eps), i.e. -sign(g) * lr * |g| / (|g| + eps)
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, hp(0.0));
        let g = [0.5f32, -2.0, 1e-3, -7.0, 3.0, 0.25];
        let mut grads = vec![None; s.len()];
        grads[0] = Some(Tensor::new(vec![3, 2], g.to_vec()).unwrap());
        let lr = 0.002;
        opt.step(&mut s, &grads, lr).unwrap();
        for (j, &gj) in g.iter().enumerate() {
            let gj = gj as f64;
            let want = before.get(s.ids().next().unwrap()).data()[j] as f64 - lr * gj / (gj.abs() + 1e-8);
            let got = s.get(s.ids().next().unwrap()).data()[j] as f64;
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
        // the parameter without a gradient is untouched
        let b = s.ids().nth(1).unwrap();
        assert_eq!(s.get(b), before.get(b));
    }

    #[test]
    fn nan_gradient_aborts_without_changes() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, hp(0.01));
        let mut grads: Vec<_> = s.ids().map(|id| Some(Tensor::full(s.get(id).shape(), 1.0f32))).collect();
        grads[1] = Some(Tensor::full(&[4], f32::NAN));
        let err = opt.step(&mut s, &grads, 0.01).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGrad("b".into()));
        assert_eq!(opt.step, 0);
        for id in s.ids() {
            assert_eq!(s.get(id), before.get(id));
        }
    }
}

//! AdamW with decoupled weight decay and global-norm gradient clipping.
//! Frozen parameters stay registered (their names and moment slots survive
//! checkpointing) but are excluded from the norm, the moments and the
//! update, which is what makes stage freezes bit-exact.

use crate::error::{config_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Global L2 norm over the gradients of non-frozen parameters; parameters
/// without a gradient this step contribute nothing.
pub fn global_grad_norm<T: Element>(params: &[Parameter<T>]) -> f64 {
    let mut sq = 0.0f64;
    for p in params {
        if p.frozen {
            continue;
        }
        if let Some(g) = p.tensor.grad() {
            for v in g {
                let v = v.as_f64();
                sq += v * v;
            }
        }
    }
    sq.sqrt()
}

/// Scale gradients in place so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Element>(params: &[Parameter<T>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for p in params {
            if p.frozen {
                continue;
            }
            if let Some(g) = p.tensor.grad() {
                let scaled: Vec<T> = g.iter().map(|&v| v * T::of(factor)).collect();
                p.tensor.zero_grad();
                p.tensor.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

/// Exported optimizer state for checkpointing: first and second moments per
/// parameter (in registration order) plus the step count.
#[derive(Clone)]
pub struct AdamState<T: Element> {
    pub step: u64,
    pub moments: Vec<(String, Vec<T>, Vec<T>)>,
}

pub struct AdamW<T: Element> {
    params: Vec<Parameter<T>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl<T: Element> AdamW<T> {
    pub fn new(params: Vec<Parameter<T>>, weight_decay: f64, clip_norm: Option<f64>) -> Result<AdamW<T>> {
        if weight_decay < 0.0 {
            return Err(config_err("negative weight decay"));
        }
        if let Some(c) = clip_norm {
            if !(c > 0.0) {
                return Err(config_err("clip norm must be positive"));
            }
        }
        for i in 1..params.len() {
            if params[..i].iter().any(|p| p.name == params[i].name) {
                return Err(config_err(format!("duplicate parameter name {}", params[i].name)));
            }
        }
        let m = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Ok(AdamW {
            params,
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
        })
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// One update with the given learning rate. Parameters that are frozen
    /// or received no gradient are left untouched (moments included).
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, lr: f64) -> Result<f64> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(config_err(format!("invalid learning rate {lr}")));
        }
        let norm = match self.clip_norm {
            Some(c) => clip_grad_norm(&self.params, c),
            None => global_grad_norm(&self.params),
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one_m_b1 = T::of(1.0 - self.beta1);
        let one_m_b2 = T::of(1.0 - self.beta2);
        let eps = T::of(self.eps);
        let lr_t = T::of(lr);
        let wd = T::of(self.weight_decay);
        let inv_bc1 = T::of(1.0 / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for (i, p) in self.params.iter().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(g) = p.tensor.grad() else {
                continue;
            };
            let mut data = p.tensor.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                m[j] = b1 * m[j] + one_m_b1 * g[j];
                v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                data[j] = data[j] - lr_t * (mhat / (vhat.sqrt() + eps) + wd * data[j]);
            }
            p.tensor.set_data(&data)?;
        }
        Ok(norm)
    }

    pub fn state(&self) -> AdamState<T> {
        AdamState {
            step: self.step,
            moments: self
                .params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .map(|(p, (m, v))| (p.name.clone(), m.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn load_state(&mut self, state: AdamState<T>) -> Result<()> {
        if state.moments.len() != self.params.len() {
            return Err(config_err(format!(
                "optimizer state holds {} parameters, model has {}",
                state.moments.len(),
                self.params.len()
            )));
        }
        for ((name, m, v), p) in state.moments.iter().zip(&self.params) {
            if *name != p.name || m.len() != p.tensor.numel() || v.len() != p.tensor.numel() {
                return Err(config_err(format!(
                    "optimizer state mismatch at {name} (expected {})",
                    p.name
                )));
            }
        }
        self.step = state.step;
        for (i, (_, m, v)) in state.moments.into_iter().enumerate() {
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn param_with_grad(name: &str, data: Vec<f64>, grad: Vec<f64>) -> Parameter<f64> {
        let t = Tensor::param(&[data.len()], data).unwrap();
        t.accumulate_grad(&grad);
        Parameter {
            name: name.into(),
            tensor: t,
            frozen: false,
        }
    }

    #[test]
    fn clip_rescales_to_exactly_max_norm() {
        // gradient norm 10 (two components of sqrt(50) each)
        let g = (50.0f64).sqrt();
        let p = param_with_grad("w", vec![0.0, 0.0], vec![g, g]);
        let pre = clip_grad_norm(std::slice::from_ref(&p), 1.0);
        assert!((pre - 10.0).abs() < 1e-9);
        let post = global_grad_norm(std::slice::from_ref(&p));
        assert!((post - 1.0).abs() < 1e-6, "post-clip norm {post}");
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let p = param_with_grad("w", vec![0.0], vec![0.25]);
        let pre = clip_grad_norm(std::slice::from_ref(&p), 1.0);
        assert_eq!(pre, 0.25);
        assert_eq!(p.tensor.grad().unwrap(), vec![0.25]);
    }

    #[test]
    fn negative_learning_rate_is_a_config_error() {
        let p = param_with_grad("w", vec![1.0], vec![1.0]);
        let mut opt = AdamW::new(vec![p], 0.0, None).unwrap();
        assert!(opt.step(-0.1).is_err());
        assert!(opt.step(f64::NAN).is_err());
    }

    #[test]
    fn frozen_parameter_is_bit_identical_after_steps() {
        let live = param_with_grad("a", vec![1.0, 2.0], vec![0.5, 0.5]);
        let mut frozen = param_with_grad("b", vec![3.0, 4.0], vec![0.5, 0.5]);
        frozen.frozen = true;
        let ft = frozen.tensor.clone();
        let lt = live.tensor.clone();
        let mut opt = AdamW::new(vec![live, frozen], 0.01, Some(1.0)).unwrap();
        for _ in 0..5 {
            lt.zero_grad();
            lt.accumulate_grad(&[0.5, 0.5]);
            ft.zero_grad();
            ft.accumulate_grad(&[0.5, 0.5]);
            opt.step(0.1).unwrap();
        }
        assert_eq!(ft.to_vec(), vec![3.0, 4.0]);
        assert_ne!(lt.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // With bias correction, the first AdamW step moves each coordinate
        // by lr * g/(|g| + eps) + lr * wd * w.
        let w0 = 2.0;
        let g0 = 3.0;
        let p = param_with_grad("w", vec![w0], vec![g0]);
        let t = p.tensor.clone();
        let mut opt = AdamW::new(vec![p], 0.1, None).unwrap();
        opt.step(0.01).unwrap();
        let expected = w0 - 0.01 * (g0 / (g0.abs() + 1e-8) + 0.1 * w0);
        assert!((t.to_vec()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adamw_decay_is_decoupled_from_the_gradient() {
        // A pure-decay step must not touch the adaptive part: with zero
        // gradient the parameter should not move at all (untouched params
        // are skipped, torch-style).
        let t = Tensor::param(&[1], vec![5.0f64]).unwrap();
        let p = Parameter {
            name: "w".into(),
            tensor: t.clone(),
            frozen: false,
        };
        let mut opt = AdamW::new(vec![p], 0.5, None).unwrap();
        opt.step(0.1).unwrap();
        assert_eq!(t.to_vec(), vec![5.0]);
    }

    #[test]
    fn training_a_quadratic_converges() {
        let t = Tensor::param(&[2], vec![3.0f64, -2.0]).unwrap();
        let p = Parameter {
            name: "x".into(),
            tensor: t.clone(),
            frozen: false,
        };
        let mut opt = AdamW::new(vec![p], 0.0, Some(1.0)).unwrap();
        for _ in 0..400 {
            t.zero_grad();
            let loss = ops::mean_all(&ops::mul(&t, &t).unwrap());
            loss.backward().unwrap();
            opt.step(0.05).unwrap();
        }
        let final_loss: f64 = t.to_vec().iter().map(|v| v * v).sum();
        assert!(final_loss < 1e-4, "final loss {final_loss}");
    }
}

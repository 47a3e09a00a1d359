use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{dim_err, Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// One named parameter handed to [`AdamW::step`].
pub struct ParamGroup<'a, F> {
    pub name: &'a str,
    pub value: &'a mut Tensor<F>,
    pub grad: &'a [F],
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Adam with decoupled weight decay and bias-corrected moments.
pub struct AdamW<F: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    state: IndexMap<String, Moments<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut [ParamGroup<'_, F>]) -> Result<()> {
        let c = self.config;
        if c.lr < 0.0 || !c.lr.is_finite() {
            return Err(TensorError::Contract(format!("invalid learning rate {}", c.lr)));
        }
        for p in params.iter() {
            if p.grad.len() != p.value.numel() {
                return dim_err(
                    "adamw_step",
                    format!(
                        "{}: gradient has {} values, parameter {}",
                        p.name,
                        p.grad.len(),
                        p.value.numel()
                    ),
                );
            }
            if let Some(st) = self.state.get(p.name) {
                if st.m.len() != p.value.numel() {
                    return dim_err("adamw_step", format!("{}: parameter changed size", p.name));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let lr = F::from_f64(c.lr);
        let eps = F::from_f64(c.eps);
        let (inv_bc1, inv_bc2) = (F::from_f64(1.0 / bc1), F::from_f64(1.0 / bc2));
        for p in params.iter_mut() {
            let n = p.value.numel();
            let st = self.state.entry(p.name.to_string()).or_insert_with(|| Moments {
                m: vec![F::zero(); n],
                v: vec![F::zero(); n],
            });
            let shrink = if p.decay && c.weight_decay != 0.0 {
                F::from_f64(1.0 - c.lr * c.weight_decay)
            } else {
                F::one()
            };
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *w = *w * shrink;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.value.is_finite() {
                return Err(TensorError::NonFinite {
                    op: format!("adamw update of {}", p.name),
                });
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut [&mut [F]], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = F::from_f64(max_norm / (total + 1e-6));
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(param: f64, grad: f64, cfg: AdamWConfig) -> f64 {
        let mut opt = AdamW::<f64>::new(cfg);
        let mut w = Tensor::scalar(param);
        let g = [grad];
        opt.step(&mut [ParamGroup {
            name: "w",
            value: &mut w,
            grad: &g,
            decay: true,
        }])
        .unwrap();
        w.data()[0]
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            lr: 0.1,
            ..Default::default()
        };
        assert_eq!(one_step(1.234, 0.0, cfg), 1.234);
    }

    #[test]
    fn pure_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            lr: 0.01,
            ..Default::default()
        };
        assert!((one_step(1.0, 0.0, cfg) - 0.999).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        // m̂ = 1, v̂ = 1 after bias correction: step = lr / (1 + eps)
        let want = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((one_step(1.0, 1.0, cfg) - want).abs() < 1e-15);
        assert!((one_step(1.0, 1.0, cfg) - 0.999).abs() < 1e-8);
    }

    #[test]
    fn step_counter_and_shape_checks() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut w = Tensor::zeros(&[2]);
        let g = [0.5f32, 0.5];
        for k in 1..=3 {
            opt.step(&mut [ParamGroup {
                name: "w",
                value: &mut w,
                grad: &g,
                decay: false,
            }])
            .unwrap();
            assert_eq!(opt.steps_taken(), k);
        }
        let bad = [0.0f32; 3];
        let err = opt.step(&mut [ParamGroup {
            name: "w",
            value: &mut w,
            grad: &bad,
            decay: false,
        }]);
        assert!(matches!(err, Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn divergence_names_the_parameter() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut w = Tensor::scalar(f32::MAX);
        let g = [f32::NAN];
        let err = opt
            .step(&mut [ParamGroup {
                name: "layer0.attn.w_q",
                value: &mut w,
                grad: &g,
                decay: false,
            }])
            .unwrap_err();
        assert!(err.to_string().contains("layer0.attn.w_q"));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = vec![3.0f64, 0.0];
        let mut b = vec![4.0f64];
        let before = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after = (a[0] * a[0] + b[0] * b[0]).sqrt();
        assert!(after <= 1.0 + 1e-6);
        let mut small = vec![0.1f64];
        clip_grad_norm(&mut [&mut small], 1.0);
        assert_eq!(small[0], 0.1);
    }
}

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::Scalar;

/// Warm-up followed by cosine decay with restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warm_steps: usize,
    pub cycle_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            floor_lr: 1e-7,
            warm_steps: 200,
            cycle_steps: 1800,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor_lr > 0.0 && self.peak_lr > self.floor_lr) {
            return Err(Error::Config(format!(
                "need peak_lr > floor_lr > 0, got {} and {}",
                self.peak_lr, self.floor_lr
            )));
        }
        if self.cycle_steps == 0 {
            return Err(Error::Config("cycle_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear from floor to peak over the warm-up, then a
/// half-cosine from peak to floor repeated every `cycle_steps`.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    let span = s.peak_lr - s.floor_lr;
    if step < s.warm_steps {
        return s.floor_lr + span * step as f64 / s.warm_steps as f64;
    }
    let t = ((step - s.warm_steps) % s.cycle_steps.max(1)) as f64 / s.cycle_steps.max(1) as f64;
    s.floor_lr + span * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros = || {
            shapes
                .iter()
                .map(|s| vec![T::zero(); s.iter().product()])
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates `params[i]` in place from `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam",
                detail: format!(
                    "{} params and {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps, one) = (T::of(lr), T::of(self.cfg.eps), T::one());
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.numel() != g.numel() || p.numel() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!("slot {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

//! Adam with bias correction and a linear-warmup / inverse-square-root
//! learning-rate schedule.

use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub warmup_steps: u64,
    /// Global gradient-norm clip applied before the update.
    pub clip_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 16_000,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    /// `lr * min(step / warmup, sqrt(warmup / step))`; constant `lr` when
    /// warmup is zero.
    pub fn lr_at(&self, step: u64) -> f32 {
        let step = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let w = self.warmup_steps as f64;
        (self.lr as f64 * (step / w).min((w / step).sqrt())) as f32
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    /// Steps skipped because a gradient was not finite.
    pub skipped: u64,
}

impl OptimizerState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            skipped: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { lr: f32 },
    Skipped,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            state: OptimizerState::for_store(store),
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Gradients are left in place; callers zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> StepOutcome {
        let finite = store.iter().all(|p| p.grad.iter().all(|g| g.is_finite()));
        if !finite {
            self.state.skipped += 1;
            return StepOutcome::Skipped;
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = store.grad_norm() as f32;
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step;
        let lr = self.config.lr_at(t);
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let bc1 = 1.0 - (b1 as f64).powi(t as i32);
        let bc2 = 1.0 - (b2 as f64).powi(t as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.param_mut(id);
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            for ((w, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g * clip;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        StepOutcome::Applied { lr }
    }
}

use super::TrainError;
use crate::autodiff::ParamStore;

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global L2 clip threshold; 0 disables.
    pub clip_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Global L2 norm of the accumulated gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .ids()
        .filter_map(|id| store.grad(id))
        .flat_map(|g| g.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Parameters without a gradient are left alone. Non-finite gradients
/// abort the step before anything changes.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, hp: &AdamParams) -> Result<StepStats, TrainError> {
    let norm = grad_norm(store);
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient { step: state.step + 1 });
    }
    let clipped = hp.clip_norm > 0.0 && norm > hp.clip_norm;
    let scale = if clipped { hp.clip_norm / (norm + 1e-6) } else { 1.0 };
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = hp.betas;
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(grad) = store.grad(id) else { continue };
        let grad: Vec<f64> = grad.data().iter().map(|g| g * scale).collect();
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let value = store.value_mut(id).data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(StepStats { grad_norm: norm, clipped })
}

/// Dev-loss plateau detector driving the learning-rate shrink.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub initial_lr: f64,
    pub shrink: f64,
    pub patience: usize,
    pub min_improvement: f64,
    pub best_loss: f64,
    pub bad_epochs: usize,
    pub shrinks: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, shrink: f64, patience: usize, min_improvement: f64) -> Self {
        Self {
            initial_lr: lr,
            shrink,
            patience,
            min_improvement,
            best_loss: f64::INFINITY,
            bad_epochs: 0,
            shrinks: 0,
        }
    }

    /// Records an epoch's dev loss; returns the rate for the next epoch.
    pub fn observe(&mut self, dev_loss: f64) -> f64 {
        if dev_loss < self.best_loss - self.min_improvement {
            self.best_loss = dev_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.shrinks += 1;
                self.bad_epochs = 0;
            }
        }
        self.lr()
    }

    /// `initial_lr · shrink^k` after `k` shrink events.
    pub fn lr(&self) -> f64 {
        self.initial_lr * self.shrink.powi(self.shrinks as i32)
    }
}

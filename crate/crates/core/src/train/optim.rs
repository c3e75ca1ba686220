use super::{TrainConfig, TrainError};
use crate::diffcore::Real;
use crate::vit::ModelParams;

/// Adaptive-moment state, one slot per unique tensor, kept in `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Learning rate at `step` of `total` under the configured schedule.
pub fn scheduled_lr(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    match cfg.schedule {
        super::Schedule::Constant => cfg.lr,
        super::Schedule::Cosine if total == 0 => cfg.lr,
        super::Schedule::Cosine => {
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
        }
    }
}

/// One AdamW update from each tensor's accumulated gradient (missing
/// gradients count as zero). Returns the pre-clip global gradient norm.
///
/// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`.
pub fn opt_step<T: Real>(
    params: &mut ModelParams<T>,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64, TrainError> {
    let mut tensors = params.named_tensors_mut();
    if state.m.is_empty() {
        state.m = tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != tensors.len() {
        return Err(TrainError::Config(format!(
            "optimizer state holds {} tensors, model has {}",
            state.m.len(),
            tensors.len()
        )));
    }
    let mut sq = 0.0;
    for (name, t) in &tensors {
        if let Some(g) = t.grad() {
            for &x in g {
                let x = x.as_f64();
                if !x.is_finite() {
                    return Err(TrainError::NonFiniteGrad {
                        name: name.clone(),
                        step: state.step,
                    });
                }
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    let clip = match cfg.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };

    state.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((_, t), m), v) in tensors.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad: Vec<f64> = match t.grad() {
            Some(g) => g.iter().map(|x| x.as_f64() * clip).collect(),
            None => vec![0.0; t.numel()],
        };
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            *p = T::of(p.as_f64() * decay - lr * update);
        }
    }
    Ok(norm)
}

use super::{TrainConfig, TrainError};
use crate::diffcore::{Graph, Real, Tensor, Var};

/// Soft cross-entropy of `softmax(student/τ)` against `softmax(teacher/τ)`,
/// the teacher entering as a constant. With `tau_square_scaling` the value
/// is multiplied by τ².
pub fn loss_distill<T: Real>(
    g: &mut Graph<T>,
    student: Var,
    teacher: &Tensor<T>,
    tau: f64,
    tau_square_scaling: bool,
) -> Result<Var, TrainError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(TrainError::Config(format!("temperature {tau} must be positive")));
    }
    let t = g.constant(teacher);
    let (t, s) = if tau == 1.0 {
        (t, student)
    } else {
        let inv = T::of(1.0 / tau);
        (g.scale(t, inv), g.scale(student, inv))
    };
    let p = g.softmax(t)?;
    let q = g.softmax(s)?;
    let loss = g.soft_cross_entropy(p, q)?;
    Ok(if tau_square_scaling && tau != 1.0 {
        g.scale(loss, T::of(tau * tau))
    } else {
        loss
    })
}

/// Mean cross-entropy against one-hot labels.
pub fn loss_cls<T: Real>(g: &mut Graph<T>, student: Var, labels: &[usize]) -> Result<Var, TrainError> {
    let shape = g.shape(student).to_vec();
    let (b, c) = match shape[..] {
        [b, c] if b == labels.len() => (b, c),
        _ => {
            return Err(TrainError::Config(format!(
                "logits {shape:?} do not match {} labels",
                labels.len()
            )))
        }
    };
    let mut onehot = vec![T::zero(); b * c];
    for (row, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(TrainError::Label { label: y, classes: c });
        }
        onehot[row * c + y] = T::one();
    }
    let target = g.constant(&Tensor::new([b, c], onehot)?);
    let q = g.softmax(student)?;
    Ok(g.soft_cross_entropy(target, q)?)
}

/// `(1 − α)·L_cls + α·L_distill`. At α = 0 or α = 1 only the surviving
/// term is built, so the endpoints equal the single losses exactly.
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    student: Var,
    labels: &[usize],
    teacher: Option<&Tensor<T>>,
    cfg: &TrainConfig,
) -> Result<Var, TrainError> {
    let alpha = cfg.alpha;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return loss_cls(g, student, labels);
    }
    let teacher = teacher.ok_or_else(|| TrainError::Config("alpha > 0 requires teacher logits".into()))?;
    let distill = loss_distill(g, student, teacher, cfg.tau, cfg.tau_square_scaling)?;
    if alpha == 1.0 {
        return Ok(distill);
    }
    let cls = loss_cls(g, student, labels)?;
    let cls = g.scale(cls, T::of(1.0 - alpha));
    let distill = g.scale(distill, T::of(alpha));
    Ok(g.add(cls, distill)?)
}

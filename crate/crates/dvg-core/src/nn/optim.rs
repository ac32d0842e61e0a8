//! Parameter update rules and the two-phase learning-rate schedule.

use crate::error::TrainError;
use crate::tensor::Tensor;

/// Which update rule an [`Optimizer`] applies.
#[derive(Clone, Copy, Debug)]
pub enum OptimizerKind {
    /// Bias-corrected Adam.
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    /// Momentum SGD with coupled weight decay:
    /// `v <- momentum*v + g + weight_decay*p; p <- p - lr*v`.
    SgdMomentum {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum(lr: f64) -> Self {
        OptimizerKind::SgdMomentum {
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    /// Second moment; only Adam touches it.
    v: Vec<f64>,
}

/// Owns the moment buffers for one parameter group.
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, param_sizes: &[usize]) -> Self {
        let second = matches!(kind, OptimizerKind::Adam { .. });
        let slots = param_sizes
            .iter()
            .map(|&n| Slot {
                m: vec![0.0; n],
                v: if second { vec![0.0; n] } else { Vec::new() },
            })
            .collect();
        Optimizer {
            kind,
            step: 0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        match &mut self.kind {
            OptimizerKind::Adam { lr: l, .. } => *l = lr,
            OptimizerKind::SgdMomentum { lr: l, .. } => *l = lr,
        }
    }

    pub fn lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Adam { lr, .. } => lr,
            OptimizerKind::SgdMomentum { lr, .. } => lr,
        }
    }

    /// One update over a parameter group. `grads[i] = None` means a zero
    /// gradient (an unreached leaf); moments still decay.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Option<&Tensor>],
    ) -> Result<(), TrainError> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(TrainError::ParamCountMismatch {
                expected: self.slots.len(),
                got: params.len().max(grads.len()),
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGrad(name.clone()));
                }
                if g.numel() != p.numel() {
                    return Err(TrainError::ParamCountMismatch {
                        expected: p.numel(),
                        got: g.numel(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step;
        for (slot, ((name, p), g)) in self.slots.iter_mut().zip(params.iter_mut().zip(grads)) {
            let zeros: Vec<f64>;
            let g: &[f64] = match g {
                Some(t) => t.data(),
                None => {
                    zeros = vec![0.0; p.numel()];
                    &zeros
                }
            };
            match self.kind {
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    let pd = p.data_mut();
                    for i in 0..pd.len() {
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = slot.m[i] / bc1;
                        let v_hat = slot.v[i] / bc2;
                        pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                OptimizerKind::SgdMomentum {
                    lr,
                    momentum,
                    weight_decay,
                } => {
                    let pd = p.data_mut();
                    for i in 0..pd.len() {
                        slot.m[i] = momentum * slot.m[i] + g[i] + weight_decay * pd[i];
                        pd[i] -= lr * slot.m[i];
                    }
                }
            }
            if !p.is_finite() {
                return Err(TrainError::NonFiniteParam(name.clone()));
            }
        }
        Ok(())
    }

    /// Moment buffers and step counter as named tensors for checkpointing.
    pub fn export_state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}.step"),
            Tensor::scalar(self.step as f64),
        )];
        for (i, slot) in self.slots.iter().enumerate() {
            out.push((format!("{prefix}.m{i}"), Tensor::vector(slot.m.clone())));
            if !slot.v.is_empty() {
                out.push((format!("{prefix}.v{i}"), Tensor::vector(slot.v.clone())));
            }
        }
        out
    }

    /// Restore from `export_state` output. Slot shapes must already match.
    pub fn import_state(
        &mut self,
        prefix: &str,
        lookup: &mut impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<(), String> {
        let step = lookup(&format!("{prefix}.step"))
            .ok_or_else(|| format!("missing optimizer record {prefix}.step"))?;
        self.step = step.item() as u64;
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let m = lookup(&format!("{prefix}.m{i}"))
                .ok_or_else(|| format!("missing optimizer record {prefix}.m{i}"))?;
            if m.numel() != slot.m.len() {
                return Err(format!("optimizer record {prefix}.m{i} has wrong size"));
            }
            slot.m.copy_from_slice(m.data());
            if !slot.v.is_empty() {
                let v = lookup(&format!("{prefix}.v{i}"))
                    .ok_or_else(|| format!("missing optimizer record {prefix}.v{i}"))?;
                if v.numel() != slot.v.len() {
                    return Err(format!("optimizer record {prefix}.v{i} has wrong size"));
                }
                slot.v.copy_from_slice(v.data());
            }
        }
        Ok(())
    }
}

/// Step-indexed two-phase schedule: `initial` for the leading fraction of
/// the run, `late` afterwards.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub initial: f64,
    pub late: f64,
    pub drop_at_frac: f64,
}

impl LrSchedule {
    pub fn at(&self, step: u64, total_steps: u64) -> f64 {
        if (step as f64) < self.drop_at_frac * total_steps as f64 {
            self.initial
        } else {
            self.late
        }
    }
}

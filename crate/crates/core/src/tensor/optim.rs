use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

/// One SGD-with-momentum update: `v ← μv + g`, `θ ← θ − lr·v`. Gradients are left in place.
pub fn sgd_step(store: &mut ParamStore, lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::arg(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::arg(format!("momentum must be in [0, 1), got {momentum}")));
    }
    if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
        return Err(Error::State(format!("parameter {} has no gradient", p.name)));
    }
    for p in store.iter_mut() {
        let g = p.grad.as_ref().expect("checked above");
        for ((theta, v), &gv) in p.tensor.data_mut().iter_mut().zip(&mut p.velocity).zip(g) {
            *v = momentum * *v + gv;
            *theta -= lr * *v;
        }
    }
    Ok(())
}

/// Linear warm-up followed by cosine decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        let s = LrSchedule { base_lr, warmup_epochs, total_epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::arg(format!("epoch {epoch} outside [0, {})", self.total_epochs)));
        }
        let (w, t) = (self.warmup_epochs, self.total_epochs);
        if epoch < w {
            return Ok(self.base_lr / w as f64 * (epoch + 1) as f64);
        }
        let progress = (epoch - w) as f64 / (t - w) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::scalar(theta)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.iter_mut().for_each(|p| p.grad = Some(vec![g]));
    }

    #[test]
    fn plain_step() {
        let mut s = single(1.0);
        set_grad(&mut s, 2.0);
        sgd_step(&mut s, 0.1, 0.0).unwrap();
        assert!((s.iter().next().unwrap().tensor.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_hand_iteration() {
        let mut s = single(0.0);
        for _ in 0..2 {
            set_grad(&mut s, 1.0);
            sgd_step(&mut s, 1.0, 0.9).unwrap();
        }
        let p = s.iter().next().unwrap();
        assert!((p.velocity[0] - 1.9).abs() < 1e-15);
        assert!((p.tensor.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_one_and_missing_grad_are_rejected() {
        let mut s = single(0.0);
        assert!(matches!(sgd_step(&mut s, 0.1, 0.0), Err(Error::State(m)) if m.contains("theta")));
        set_grad(&mut s, 1.0);
        assert!(matches!(sgd_step(&mut s, 0.1, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::new(0.01, 5, 300).unwrap();
        assert!((s.lr_at(2).unwrap() - 0.006).abs() < 1e-15);
        assert_eq!(s.lr_at(5).unwrap(), 0.01);
        let no_warmup = LrSchedule::new(0.01, 0, 300).unwrap();
        let last = no_warmup.lr_at(299).unwrap();
        assert!(last > 0.0 && last <= 0.01 * 0.5 * (1.0 + (PI * 299.0 / 300.0).cos()));
        assert!(s.lr_at(299).unwrap() > 0.0);
        assert!(s.lr_at(300).is_err());
        assert!(LrSchedule::new(0.01, 5, 5).is_err());
    }
}

use std::fmt;
use std::str::FromStr;

use crate::autodiff::ParamStore;
use crate::error::{GaitError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    MomentumSgd,
}

impl OptimizerKind {
    pub(crate) fn tag(self) -> u8 {
        match self {
            OptimizerKind::Adam => 0,
            OptimizerKind::MomentumSgd => 1,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(OptimizerKind::Adam),
            1 => Some(OptimizerKind::MomentumSgd),
            _ => None,
        }
    }

    /// Names of the per-parameter state slots.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            OptimizerKind::Adam => &["m", "v"],
            OptimizerKind::MomentumSgd => &["velocity"],
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = GaitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" | "momentum-sgd" => Ok(OptimizerKind::MomentumSgd),
            _ => Err(GaitError::Config(format!("unknown optimizer '{s}' (adam or sgd)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::MomentumSgd => "sgd",
        })
    }
}

/// Multiplies the learning rate by `factor` every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub every: u64,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub decay: Option<StepDecay>,
    step: u64,
    /// one entry per parameter, one tensor per slot
    state: Vec<Vec<Tensor<F>>>,
}

impl<F: Real> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64, decay: Option<StepDecay>, params: &ParamStore<F>) -> Self {
        let state = params
            .iter()
            .map(|(_, p)| kind.slots().iter().map(|_| Tensor::zeros(p.value.shape())).collect())
            .collect();
        Optimizer { kind, lr, decay, step: 0, state }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        match self.decay {
            Some(d) if d.every > 0 => self.lr * d.factor.powi((self.step / d.every) as i32),
            _ => self.lr,
        }
    }

    pub fn state(&self) -> &[Vec<Tensor<F>>] {
        &self.state
    }

    pub(crate) fn restore(&mut self, step: u64, state: Vec<Vec<Tensor<F>>>) -> Result<()> {
        if state.len() != self.state.len()
            || state.iter().zip(&self.state).any(|(a, b)| {
                a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape())
            })
        {
            return Err(GaitError::Checkpoint("optimizer state does not match the model".into()));
        }
        self.step = step;
        self.state = state;
        Ok(())
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore<F>) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        match self.kind {
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let (b1, b2) = (F::of(ADAM_BETA1), F::of(ADAM_BETA2));
                let (ob1, ob2) = (F::of(1.0 - ADAM_BETA1), F::of(1.0 - ADAM_BETA2));
                let (ic1, ic2) = (F::of(1.0 / c1), F::of(1.0 / c2));
                let (lr, eps) = (F::of(lr), F::of(ADAM_EPS));
                for (p, slots) in params.iter_mut().zip(&mut self.state) {
                    let [m, v] = slots.as_mut_slice() else { unreachable!() };
                    let g = p.grad.data();
                    let (m, v) = (m.data_mut(), v.data_mut());
                    let w = p.value.data_mut();
                    for i in 0..w.len() {
                        m[i] = b1 * m[i] + ob1 * g[i];
                        v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                        let mh = m[i] * ic1;
                        let vh = v[i] * ic2;
                        w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::MomentumSgd => {
                let mu = F::of(SGD_MOMENTUM);
                let lr = F::of(lr);
                for (p, slots) in params.iter_mut().zip(&mut self.state) {
                    let g = p.grad.data();
                    let vel = slots[0].data_mut();
                    let w = p.value.data_mut();
                    for i in 0..w.len() {
                        vel[i] = mu * vel[i] + g[i];
                        w[i] = w[i] - lr * vel[i];
                    }
                }
            }
        }
        params.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        s.iter_mut().next().unwrap().grad = Tensor::from_f64(&[1], &[g]).unwrap();
    }

    #[test]
    fn zero_grads_leave_params() {
        for kind in [OptimizerKind::Adam, OptimizerKind::MomentumSgd] {
            let mut s = one(0.3);
            let mut opt = Optimizer::new(kind, 0.1, None, &s);
            opt.step(&mut s);
            assert_eq!(s.iter().next().unwrap().1.value.data(), &[0.3]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = one(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.001, None, &s);
        set_grad(&mut s, 1.0);
        opt.step(&mut s);
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let w = s.iter().next().unwrap().1.value.data()[0];
        assert!((1.0 - w - 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!(s.grads_are_zero());
    }

    #[test]
    fn momentum_recurrence() {
        let (lr, g) = (0.01, 2.0);
        let mut s = one(0.0);
        let mut opt = Optimizer::new(OptimizerKind::MomentumSgd, lr, None, &s);
        set_grad(&mut s, g);
        opt.step(&mut s);
        let w1 = s.iter().next().unwrap().1.value.data()[0];
        set_grad(&mut s, g);
        opt.step(&mut s);
        let w2 = s.iter().next().unwrap().1.value.data()[0];
        // v1 = g, v2 = (1 + mu) g
        assert!((w1 + lr * g).abs() < 1e-15);
        assert!((w1 - w2 - (1.0 + 0.9) * lr * g).abs() < 1e-15);
        assert!((w2 + (1.0 + 1.9) * lr * g).abs() < 1e-15);
    }

    #[test]
    fn step_decay() {
        let s = one(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1.0, Some(StepDecay { every: 2, factor: 0.5 }), &s);
        let mut s = s;
        let mut lrs = Vec::new();
        for _ in 0..5 {
            lrs.push(opt.current_lr());
            opt.step(&mut s);
        }
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
    }
}

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    RmsProp,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::RmsProp];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Fixed update-rule constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerHyper {
    pub sgd_momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub rmsprop_rho: f64,
    pub eps: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            sgd_momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            rmsprop_rho: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<F> {
    first: Vec<F>,
    second: Vec<F>,
    steps: u64,
}

/// Update rule plus per-parameter moment buffers, addressed by slot index.
#[derive(Clone, Debug)]
pub struct Optimizer<F: Element = f32> {
    kind: OptimizerKind,
    lr: f64,
    pub hyper: OptimizerHyper,
    slots: Vec<Option<Slot<F>>>,
}

impl<F: Element> Optimizer<F> {
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        let mut o = Optimizer {
            kind,
            lr: Self::DEFAULT_LR,
            hyper: OptimizerHyper::default(),
            slots: Vec::new(),
        };
        o.set_lr(lr)?;
        Ok(o)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// Apply one update to the parameter held in `slot`.
    pub fn update(&mut self, slot: usize, param: &mut Tensor<F>, grad: &Tensor<F>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "slot {slot}: parameter {:?} vs gradient {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        let n = param.numel();
        let state = self.slots[slot].get_or_insert_with(|| Slot {
            first: vec![F::zero(); n],
            second: vec![F::zero(); n],
            steps: 0,
        });
        if state.first.len() != n {
            return Err(Error::Shape(format!(
                "slot {slot} was created for {} elements, now {n}",
                state.first.len()
            )));
        }
        state.steps += 1;
        let lr = F::of(self.lr);
        let h = self.hyper;
        let eps = F::of(h.eps);
        let p = param.data_mut();
        let g = grad.data();
        match self.kind {
            OptimizerKind::Sgd => {
                let mu = F::of(h.sgd_momentum);
                for i in 0..n {
                    state.first[i] = mu * state.first[i] + g[i];
                    p[i] -= lr * state.first[i];
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (F::of(h.adam_beta1), F::of(h.adam_beta2));
                let t = state.steps as i32;
                let c1 = F::one() - F::of(h.adam_beta1.powi(t));
                let c2 = F::one() - F::of(h.adam_beta2.powi(t));
                for i in 0..n {
                    state.first[i] = b1 * state.first[i] + (F::one() - b1) * g[i];
                    state.second[i] = b2 * state.second[i] + (F::one() - b2) * g[i] * g[i];
                    let m_hat = state.first[i] / c1;
                    let v_hat = state.second[i] / c2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimizerKind::RmsProp => {
                let rho = F::of(h.rmsprop_rho);
                for i in 0..n {
                    state.second[i] = rho * state.second[i] + (F::one() - rho) * g[i] * g[i];
                    p[i] -= lr * g[i] / (state.second[i].sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Update `params[i]` from `grads[i]` using slot `i`; every gradient must be present.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Option<&Tensor<F>>]) -> Result<()> {
        self.step_from(0, params, grads)
    }

    /// Like [`step`](Self::step) with slots starting at `first_slot`.
    pub fn step_from(
        &mut self,
        first_slot: usize,
        params: &mut [&mut Tensor<F>],
        grads: &[Option<&Tensor<F>>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(Option::is_none) {
            return Err(Error::Contract(format!("missing gradient for parameter {i}")));
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(first_slot + i, p, g.expect("checked above"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Sgd, 0.1).unwrap();
        opt.hyper.sgd_momentum = 0.0;
        let mut p = scalar(0.0);
        opt.step(&mut [&mut p], &[Some(&scalar(1.0))]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        for g in [1e-3, 0.5, -3.0, 250.0] {
            let mut opt = Optimizer::<f64>::new(OptimizerKind::Adam, 1e-3).unwrap();
            let mut p = scalar(0.0);
            opt.step(&mut [&mut p], &[Some(&scalar(g))]).unwrap();
            let moved = p.data()[0];
            assert_eq!(moved.signum(), -g.signum());
            assert!((moved.abs() - 1e-3).abs() < 1e-7, "{g}: {moved}");
        }
    }

    #[test]
    fn sgd_converges_on_parabola() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Sgd, 0.1).unwrap();
        opt.hyper.sgd_momentum = 0.0;
        let mut x = scalar(1.0);
        for _ in 0..200 {
            let g = scalar(2.0 * x.data()[0]);
            opt.step(&mut [&mut x], &[Some(&g)]).unwrap();
        }
        assert!(x.data()[0].abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::RmsProp, 0.1).unwrap();
        let mut p = scalar(0.0);
        assert!(matches!(opt.step(&mut [&mut p], &[None]), Err(Error::Contract(_))));
        assert!(Optimizer::<f64>::new(OptimizerKind::Sgd, 0.0).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("RMSprop".parse::<OptimizerKind>().unwrap(), OptimizerKind::RmsProp);
        assert!("lbfgs".parse::<OptimizerKind>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn halving_lr_halves_sgd_step(g in -100.0f64..100.0, lr in 1e-4f64..1.0) {
            let step = |lr: f64| {
                let mut opt = Optimizer::<f64>::new(OptimizerKind::Sgd, lr).unwrap();
                opt.hyper.sgd_momentum = 0.0;
                let mut p = scalar(0.0);
                opt.step(&mut [&mut p], &[Some(&scalar(g))]).unwrap();
                p.data()[0]
            };
            proptest::prop_assert!((step(lr / 2.0) * 2.0 - step(lr)).abs() <= 1e-12 * step(lr).abs().max(1.0));
        }

        #[test]
        fn adam_steps_bounded_by_lr(grads in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let mut opt = Optimizer::<f64>::new(OptimizerKind::Adam, 1e-3).unwrap();
            let mut p = scalar(0.0);
            let mut prev = 0.0;
            let (b1, b2) = (0.9f64, 0.999f64);
            for (t, g) in grads.into_iter().enumerate() {
                opt.step(&mut [&mut p], &[Some(&scalar(g))]).unwrap();
                let moved = (p.data()[0] - prev).abs();
                // |m̂|/√v̂ ≤ √Σ wᵢ²/uᵢ for the normalised moment weights wᵢ, uᵢ.
                let t = t as i32 + 1;
                let ratio: f64 = (0..t)
                    .map(|i| {
                        let w = (1.0 - b1) * b1.powi(t - 1 - i) / (1.0 - b1.powi(t));
                        let u = (1.0 - b2) * b2.powi(t - 1 - i) / (1.0 - b2.powi(t));
                        w * w / u
                    })
                    .sum();
                proptest::prop_assert!(moved <= 1e-3 * ratio.sqrt() * (1.0 + 1e-9));
                prev = p.data()[0];
            }
        }
    }
}

//! Differentiable training losses.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Probabilities are clipped to `[EPS, 1 − EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-6;

fn same_shape<F: Element>(a: Var<'_, F>, b: Var<'_, F>, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: prediction {sa:?} vs target {sb:?}")));
    }
    Ok(())
}

/// Mean binary cross-entropy over every element.
pub fn bce_loss<'g, F: Element>(pred: Var<'g, F>, target: Var<'g, F>) -> Result<Var<'g, F>> {
    same_shape(pred, target, "bce")?;
    let p = pred.clip(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = target.mul(p.log()?)?;
    let neg = target.scale(-1.0)?.shift(1.0)?.mul(p.scale(-1.0)?.shift(1.0)?.log()?)?;
    pos.add(neg)?.mean(None)?.scale(-1.0)
}

/// Soft Dice loss `1 − (2Σpy + ε) / (Σp + Σy + ε)` over every element.
pub fn dice_loss<'g, F: Element>(pred: Var<'g, F>, target: Var<'g, F>) -> Result<Var<'g, F>> {
    same_shape(pred, target, "dice")?;
    let inter = pred.mul(target)?.sum(None)?.scale(2.0)?.shift(DICE_EPS)?;
    let total = pred.sum(None)?.add(target.sum(None)?)?.shift(DICE_EPS)?;
    inter.div(total)?.scale(-1.0)?.shift(1.0)
}

/// BCE plus Dice.
pub fn segmentation_loss<'g, F: Element>(pred: Var<'g, F>, target: Var<'g, F>) -> Result<Var<'g, F>> {
    bce_loss(pred, target)?.add(dice_loss(pred, target)?)
}

/// One-hot `[N, K]` matrix for integer labels.
pub fn one_hot<F: Element>(labels: &[usize], classes: usize) -> Result<Tensor<F>> {
    let mut data = vec![F::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Contract(format!("label {l} ≥ class count {classes}")));
        }
        data[i * classes + l] = F::one();
    }
    Tensor::new(&[labels.len(), classes], data)
}

/// Mean over samples of `−log p[true class]` for probability rows `[N, K]`.
pub fn cce_loss<'g, F: Element>(probs: Var<'g, F>, labels: &[usize]) -> Result<Var<'g, F>> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "cce expects [{}, K] scores, got {shape:?}",
            labels.len()
        )));
    }
    let hot = probs.graph().constant(one_hot(labels, shape[1])?);
    let picked = probs.clip(PROB_EPS, 1.0 - PROB_EPS)?.log()?.mul(hot)?;
    picked.sum(None)?.scale(-1.0 / labels.len() as f64)
}

pub fn mse_loss<'g, F: Element>(a: Var<'g, F>, b: Var<'g, F>) -> Result<Var<'g, F>> {
    same_shape(a, b, "mse")?;
    let d = a.sub(b)?;
    d.mul(d)?.mean(None)
}

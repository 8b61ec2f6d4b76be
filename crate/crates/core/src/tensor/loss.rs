use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};

/// Smoothing term in numerator and denominator of the Soft-IoU ratio.
pub const SOFT_IOU_EPS: f64 = 1e-6;

/// `1 - (sum p*y + eps) / (sum p + sum y - sum p*y + eps)` over the whole
/// batch jointly. `target` must be binary and is not differentiated.
pub fn soft_iou_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(
            "soft_iou_loss",
            format!("pred {:?} vs target {:?}", g.shape(pred), g.shape(target)),
        ));
    }
    let slack = T::of(1e-6);
    if g
        .value(pred)
        .data()
        .iter()
        .any(|&p| p < -slack || p > T::one() + slack)
    {
        return Err(Error::Invalid("soft_iou_loss: prediction outside [0, 1]".into()));
    }
    if g
        .value(target)
        .data()
        .iter()
        .any(|&y| y != T::zero() && y != T::one())
    {
        return Err(Error::Invalid("soft_iou_loss: target is not binary".into()));
    }
    let eps = T::of(SOFT_IOU_EPS);
    let sum_y = g.value(target).sum();
    let py = g.mul(pred, target)?;
    let inter = g.sum_all(py)?;
    let sum_p = g.sum_all(pred)?;
    let num = g.affine(inter, T::one(), eps)?;
    let diff = g.sub(sum_p, inter)?;
    let den = g.affine(diff, T::one(), sum_y + eps)?;
    let ratio = g.div(num, den)?;
    g.affine(ratio, -T::one(), T::one())
}

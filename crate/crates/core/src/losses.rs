//! Fused loss kernels recorded on the tape as single scalar nodes.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::real::Real;

/// `Σ w_i · BCE(σ(x_i), t_i)` over a column of logits, with soft targets.
pub fn bce_with_logits<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[T], weights: &[T]) -> Var {
    let x = tape.value(logits);
    assert_eq!(x.ncols(), 1, "logits must be a column");
    assert_eq!(x.nrows(), targets.len());
    assert_eq!(x.nrows(), weights.len());
    let mut total = T::zero();
    let mut local = Array2::zeros(x.raw_dim());
    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        let xi = x[[i, 0]];
        total += w * (xi.softplus() - t * xi);
        local[[i, 0]] = w * (xi.sigmoid() - t);
    }
    tape.loss(logits, total, local)
}

/// IoU between a predicted and a target segment sharing one anchor, both
/// given as (distance to start, distance to end), with the derivatives of
/// the IoU in the predicted distances.
pub fn anchored_iou<T: Real>(pred: (T, T), target: (T, T)) -> (T, T, T) {
    let (ls, le) = pred;
    let (gs, ge) = target;
    let (zero, one) = (T::zero(), T::one());
    let inter = ls.min(gs) + le.min(ge);
    let union = ls.max(gs) + le.max(ge);
    if union <= zero {
        return (one, zero, zero);
    }
    let di_s = if ls < gs { one } else { zero };
    let di_e = if le < ge { one } else { zero };
    let du_s = one - di_s;
    let du_e = one - di_e;
    let u2 = union * union;
    let d_s = (di_s * union - inter * du_s) / u2;
    let d_e = (di_e * union - inter * du_e) / u2;
    (inter / union, d_s, d_e)
}

/// `Σ w_k (1 − IoU)` over selected rows of a `[R × 2]` distance matrix.
pub fn iou_distance_loss<T: Real>(
    tape: &mut Tape<T>,
    distances: Var,
    rows: &[usize],
    targets: &[(T, T)],
    weights: &[T],
) -> Var {
    let d = tape.value(distances);
    assert_eq!(d.ncols(), 2);
    let mut total = T::zero();
    let mut local = Array2::zeros(d.raw_dim());
    for ((&r, &g), &w) in rows.iter().zip(targets).zip(weights) {
        let (iou, ds, de) = anchored_iou((d[[r, 0]], d[[r, 1]]), g);
        total += w * (T::one() - iou);
        local[[r, 0]] -= w * ds;
        local[[r, 1]] -= w * de;
    }
    tape.loss(distances, total, local)
}

pub fn smooth_l1<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    if x.abs() < T::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

fn smooth_l1_grad<T: Real>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// `Σ_i w_i Σ_j SL1(target_ij − pred_ij)`.
pub fn smooth_l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Array2<T>, weights: &[T]) -> Var {
    let p = tape.value(pred);
    assert_eq!(p.raw_dim(), target.raw_dim());
    let mut total = T::zero();
    let mut local = Array2::zeros(p.raw_dim());
    for i in 0..p.nrows() {
        let w = weights[i];
        for j in 0..p.ncols() {
            let diff = target[[i, j]] - p[[i, j]];
            total += w * smooth_l1(diff);
            local[[i, j]] = -w * smooth_l1_grad(diff);
        }
    }
    tape.loss(pred, total, local)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_log_form() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Array2::from_shape_vec((2, 1), vec![0.3, -1.2]).unwrap(), true);
        let l = bce_with_logits(&mut tape, x, &[1.0, 0.25], &[0.5, 2.0]);
        let (p0, p1) = (0.3f64.sigmoid(), (-1.2f64).sigmoid());
        let want = -0.5 * p0.ln() - 2.0 * (0.25 * p1.ln() + 0.75 * (1.0 - p1).ln());
        assert!((tape.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_is_continuous_at_knot() {
        let below = smooth_l1(1.0f64 - 1e-9);
        let above = smooth_l1(1.0 + 1e-9);
        assert!((below - above).abs() < 1e-8);
        assert!((smooth_l1_grad(1.0 - 1e-9) - smooth_l1_grad(1.0 + 1e-9f64)).abs() < 1e-8);
    }

    #[test]
    fn anchored_iou_examples() {
        let (iou, _, _) = anchored_iou((2.0, 2.0), (2.0, 2.0));
        assert_eq!(iou, 1.0);
        let (iou, _, _) = anchored_iou((0.0, 0.0), (2.0, 2.0));
        assert_eq!(iou, 0.0);
        let (iou, _, _) = anchored_iou((1.0f64, 3.0), (2.0, 2.0));
        assert!((iou - 3.0 / 5.0).abs() < 1e-12);
    }
}

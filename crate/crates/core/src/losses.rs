//! Margin contrastive losses shared by descriptors and latent codes.

use crate::error::{Result, UldError};
use crate::tape::{Tape, Var};

/// Keeps row norms differentiable when two codes coincide.
pub const NORM_EPS: f64 = 1e-12;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `||a - p|| + max(0, margin - ||a - n||)`.
pub fn margin_contrastive(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(UldError::shape(
            "contrastive triple",
            anchor.len(),
            format!("{} / {}", positive.len(), negative.len()),
        ));
    }
    if !(margin > 0.0) {
        return Err(UldError::InvalidArgument(format!("margin must be positive, got {margin}")));
    }
    Ok(euclid(anchor, positive) + (margin - euclid(anchor, negative)).max(0.0))
}

/// Label precondition shared by both contrastive losses.
pub fn check_triple_labels<L: PartialEq + std::fmt::Debug>(a: &L, p: &L, n: &L) -> Result<()> {
    if a != p || a == n {
        return Err(UldError::InvalidArgument(format!(
            "contrastive triple needs anchor = positive != negative, got {a:?}, {p:?}, {n:?}"
        )));
    }
    Ok(())
}

/// Mean of the row-wise margin loss over matched rows of three `N x D`
/// variables.
pub fn margin_contrastive_var(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, margin: f64) -> Var {
    let dp = tape.sub(anchor, positive);
    let np = tape.row_norm(dp, NORM_EPS);
    let dn = tape.sub(anchor, negative);
    let nn = tape.row_norm(dn, NORM_EPS);
    let neg = tape.scale(nn, -1.0);
    let gap = tape.add_const(neg, margin);
    let hinge = tape.relu(gap);
    let per = tape.add(np, hinge);
    tape.mean(per)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mat;

    #[test]
    fn tape_form_matches_pure_form() {
        let a = [0.3, -0.1, 0.2];
        let p = [0.1, 0.0, 0.25];
        let n = [0.5, 0.1, 0.0];
        let want = margin_contrastive(&a, &p, &n, 0.8).unwrap();
        let mut t = Tape::new();
        let row = |t: &mut Tape, v: &[f64]| t.constant(Mat::from_shape_vec((1, 3), v.to_vec()).unwrap());
        let (va, vp, vn) = (row(&mut t, &a), row(&mut t, &p), row(&mut t, &n));
        let l = margin_contrastive_var(&mut t, va, vp, vn, 0.8);
        assert!((t.scalar(l) - want).abs() < 1e-9);
    }

    #[test]
    fn label_rule() {
        assert!(check_triple_labels(&1, &1, &2).is_ok());
        assert!(check_triple_labels(&1, &2, &3).is_err());
        assert!(check_triple_labels(&1, &1, &1).is_err());
    }
}

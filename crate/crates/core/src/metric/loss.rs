use super::DistanceMatrix;
use crate::error::{Error, Result};

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft-margin triplet loss over every in-batch negative, in both retrieval
/// directions:
///
/// `L = 1/(2B(B−1)) Σ_{i≠j} [softplus(γ(D_ii − D_ij)) + softplus(γ(D_ii − D_ji))]`
pub fn soft_margin_triplet_loss(d: &DistanceMatrix, gamma: f64) -> Result<f64> {
    Ok(loss_and_grad(d.values(), d.rows(), d.cols(), gamma)?.0)
}

/// Loss and its gradient with respect to every matrix entry (row-major).
pub fn soft_margin_triplet_loss_grad(d: &DistanceMatrix, gamma: f64) -> Result<(f64, Vec<f64>)> {
    loss_and_grad(d.values(), d.rows(), d.cols(), gamma)
}

pub(crate) fn loss_and_grad(d: &[f64], rows: usize, cols: usize, gamma: f64) -> Result<(f64, Vec<f64>)> {
    if rows != cols {
        return Err(Error::Shape(format!(
            "triplet loss needs a square distance matrix, got {rows}x{cols}"
        )));
    }
    let b = rows;
    if b < 2 {
        return Err(Error::InvalidArgument(
            "triplet loss needs at least two pairs in a batch".into(),
        ));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("loss sharpness {gamma} must be non-negative")));
    }
    let norm = 1.0 / (2.0 * (b * (b - 1)) as f64);
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * b];
    for i in 0..b {
        let pos = d[i * b + i];
        for j in 0..b {
            if i == j {
                continue;
            }
            // Ground query i against aerial negative j, then aerial query i
            // against ground negative j.
            for neg_idx in [i * b + j, j * b + i] {
                let x = gamma * (pos - d[neg_idx]);
                loss += softplus(x);
                let s = gamma * sigmoid(x) * norm;
                grad[i * b + i] += s;
                grad[neg_idx] -= s;
            }
        }
    }
    Ok((loss * norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(b: usize, f: impl Fn(usize, usize) -> f64) -> DistanceMatrix {
        let v = (0..b * b).map(|k| f(k / b, k % b)).collect();
        DistanceMatrix::new(b, b, v).unwrap()
    }

    #[test]
    fn equal_entries_give_log2() {
        let d = matrix(4, |_, _| 0.7);
        assert!((soft_margin_triplet_loss(&d, 10.0).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unit_margin_value() {
        // Every negative exceeds its positive by exactly 1.
        let d = matrix(3, |i, j| if i == j { 0.2 } else { 1.2 });
        let expected = (1.0 + (-10.0f64).exp()).ln();
        let l = soft_margin_triplet_loss(&d, 10.0).unwrap();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 4.5399e-5).abs() < 1e-8);
    }

    #[test]
    fn vanishing_gamma_gives_log2() {
        let d = matrix(3, |i, j| (i * 3 + j) as f64 * 0.2);
        assert!((soft_margin_triplet_loss(&d, 1e-12).unwrap() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let rect = DistanceMatrix::new(2, 3, vec![0.5; 6]).unwrap();
        assert!(soft_margin_triplet_loss(&rect, 10.0).is_err());
        let one = DistanceMatrix::new(1, 1, vec![0.5]).unwrap();
        assert!(soft_margin_triplet_loss(&one, 10.0).is_err());
        assert!(soft_margin_triplet_loss(&matrix(2, |_, _| 0.0), -1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = matrix(4, |i, j| 0.1 + 0.37 * ((i * 7 + j * 3) % 5) as f64);
        let (_, g) = soft_margin_triplet_loss_grad(&d, 10.0).unwrap();
        let h = 1e-6;
        for k in 0..16 {
            let mut p = d.values().to_vec();
            let mut m = d.values().to_vec();
            p[k] += h;
            m[k] -= h;
            let fd = (loss_and_grad(&p, 4, 4, 10.0).unwrap().0 - loss_and_grad(&m, 4, 4, 10.0).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
        }
    }

    proptest! {
        #[test]
        fn positive_and_permutation_invariant(vals in proptest::collection::vec(0.0f64..2.0, 16), rot in 0usize..4) {
            let d = DistanceMatrix::new(4, 4, vals.clone()).unwrap();
            let l = soft_margin_triplet_loss(&d, 10.0).unwrap();
            prop_assert!(l > 0.0);
            let perm = |i: usize| (i + rot) % 4;
            let p: Vec<f64> = (0..16).map(|k| vals[perm(k / 4) * 4 + perm(k % 4)]).collect();
            let lp = soft_margin_triplet_loss(&DistanceMatrix::new(4, 4, p).unwrap(), 10.0).unwrap();
            prop_assert!((l - lp).abs() < 1e-12);
        }

        #[test]
        fn growing_negatives_lowers_loss(vals in proptest::collection::vec(0.0f64..1.5, 9), bump in 0.01f64..0.5) {
            let d = DistanceMatrix::new(3, 3, vals.clone()).unwrap();
            let grown: Vec<f64> = (0..9).map(|k| if k % 4 == 0 { vals[k] } else { vals[k] + bump }).collect();
            let g = DistanceMatrix::new(3, 3, grown).unwrap();
            prop_assert!(soft_margin_triplet_loss(&g, 10.0).unwrap() < soft_margin_triplet_loss(&d, 10.0).unwrap());
        }
    }
}

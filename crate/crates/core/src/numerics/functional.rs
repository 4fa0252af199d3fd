//! Plain (non-recording) vector math shared by the tape, the evaluation
//! harness and the foreign-function surface.

use super::kernels::dot;
use crate::error::{Error, Result};

/// Cosine of the angle between `a` and `b`. No temperature is applied.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

/// `−Σ target[i] · log softmax(logits)[i]`.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            left: vec![logits.len()],
            right: vec![target.len()],
        });
    }
    if target.iter().any(|&t| t < 0.0) {
        return Err(Error::contract("target distribution has negative entries"));
    }
    let mass: f64 = target.iter().sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "target distribution sums to {mass}, expected 1"
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(-target
        .iter()
        .zip(logits)
        .map(|(t, z)| t * (z - lse))
        .sum::<f64>())
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_unstabilized_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let target: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let naive: f64 = -target
            .iter()
            .zip(&logits)
            .map(|(t, l)| t * (l.exp() / z).ln())
            .sum::<f64>();
        let got = softmax_cross_entropy(&logits, &target).unwrap();
        assert!((got - naive).abs() < 1e-9, "{got} vs {naive}");
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let h = softmax_cross_entropy(&[0.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-15);
        let h = softmax_cross_entropy(&[1000.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(h.abs() < 1e-12);
        assert!(softmax_cross_entropy(&[0.0, 0.0], &[0.6, 0.6]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-700.0f64..700.0, 1..32)) {
            let p = softmax(&logits);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 2..16),
            s in 1e-3f64..1e3,
        ) {
            prop_assume!(norm(&a) > 1e-6);
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            let c = cosine_similarity(&a, &scaled).unwrap();
            prop_assert!((c - 1.0).abs() < 1e-12);
        }
    }
}

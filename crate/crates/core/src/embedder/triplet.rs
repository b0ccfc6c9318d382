//! Triplet loss on squared Euclidean distances and online hard negative
//! mining within a mini-batch.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum()
}

/// `max(0, d_ap − d_an + margin)`.
pub fn triplet_hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

pub fn triplet_loss<T: Scalar>(a: &[T], p: &[T], n: &[T], margin: f64) -> f64 {
    triplet_hinge(squared_distance(a, p), squared_distance(a, n), margin)
}

/// Gradients of one triplet term, scaled by `weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletGrad<T> {
    pub anchor: Vec<T>,
    pub positive: Vec<T>,
    pub negative: Vec<T>,
}

/// Loss of one triplet and its gradient scaled by `weight`; `None` when
/// the hinge is inactive. The subgradient at a hinge argument of exactly
/// zero is taken as zero.
pub fn triplet_loss_grad<T: Scalar>(
    a: &[T],
    p: &[T],
    n: &[T],
    margin: f64,
    weight: f64,
) -> (f64, Option<TripletGrad<T>>) {
    let arg = squared_distance(a, p) - squared_distance(a, n) + margin;
    if arg <= 0.0 {
        return (0.0, None);
    }
    let w = T::from_f64(2.0 * weight);
    let grad = TripletGrad {
        anchor: p.iter().zip(n).map(|(&p, &n)| w * (n - p)).collect(),
        positive: a.iter().zip(p).map(|(&a, &p)| w * (p - a)).collect(),
        negative: a.iter().zip(n).map(|(&a, &n)| w * (a - n)).collect(),
    };
    (arg, Some(grad))
}

/// For every anchor, the index of the batch element with a different label
/// whose embedding is nearest (ties to the smaller index).
pub fn hardest_negatives<T: Scalar, V: AsRef<[T]>, L: PartialEq>(
    anchors: &[V],
    batch: &[V],
    labels: &[L],
) -> Result<Vec<usize>> {
    if anchors.len() != batch.len() || batch.len() != labels.len() {
        return Err(Error::invalid("anchors, batch and labels must have equal length"));
    }
    anchors
        .iter()
        .zip(labels)
        .map(|(a, la)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (x, lj)) in batch.iter().zip(labels).enumerate() {
                if lj == la {
                    continue;
                }
                let d = squared_distance(a.as_ref(), x.as_ref());
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best.map(|(j, _)| j).ok_or_else(|| Error::invalid("batch has a single label: no negative exists"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hinge_examples() {
        assert_eq!(triplet_hinge(0.0, 2.0, 1.0), 0.0);
        assert!((triplet_hinge(0.5, 0.2, 1.0) - 1.3).abs() < 1e-15);
        let a = [0.6, 0.8];
        assert_eq!(triplet_loss(&a, &a, &a, 1.0), 1.0);
        // exactly on the hinge: zero loss and zero subgradient
        let (l, g) = triplet_loss_grad(&[0.0f64], &[0.0], &[1.0], 1.0, 1.0);
        assert_eq!((l, g), (0.0, None));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = vec![0.3, -0.5, 0.81];
        let p = vec![0.2, 0.1, 0.9];
        let n = vec![0.35, -0.4, 0.7];
        let (_, g) = triplet_loss_grad(&a, &p, &n, 1.0, 1.0);
        let g = g.unwrap();
        let eps = 1e-6;
        for (which, analytic) in [(0, &g.anchor), (1, &g.positive), (2, &g.negative)] {
            for k in 0..3 {
                let mut v = [a.clone(), p.clone(), n.clone()];
                v[which][k] += eps;
                let up = triplet_loss(&v[0], &v[1], &v[2], 1.0);
                v[which][k] -= 2.0 * eps;
                let down = triplet_loss(&v[0], &v[1], &v[2], 1.0);
                let numeric = (up - down) / (2.0 * eps);
                assert!((numeric - analytic[k]).abs() <= 1e-6 * numeric.abs().max(1.0));
            }
        }
    }

    #[test]
    fn two_item_batch_pairs_up() {
        let e = vec![vec![1.0f64, 0.0], vec![0.0, 1.0]];
        assert_eq!(hardest_negatives(&e, &e, &[0, 1]).unwrap(), vec![1, 0]);
        assert!(hardest_negatives(&e, &e, &[3, 3]).is_err());
    }

    proptest! {
        #[test]
        fn negatives_are_other_label_nearest(
            raw in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 3), 0usize..3), 2..8),
        ) {
            let batch: Vec<Vec<f64>> = raw.iter().map(|(v, _)| v.clone()).collect();
            let labels: Vec<usize> = raw.iter().map(|(_, l)| *l).collect();
            let anchors: Vec<Vec<f64>> = batch.iter().map(|v| v.iter().map(|x| x * 0.9 + 0.05).collect()).collect();
            match hardest_negatives(&anchors, &batch, &labels) {
                Err(_) => prop_assert!(labels.iter().all(|&l| l == labels[0])),
                Ok(neg) => {
                    for (i, &j) in neg.iter().enumerate() {
                        prop_assert_ne!(labels[i], labels[j]);
                        let d = squared_distance(&anchors[i], &batch[j]);
                        for k in 0..batch.len() {
                            if labels[k] != labels[i] {
                                prop_assert!(d <= squared_distance(&anchors[i], &batch[k]));
                            }
                        }
                    }
                }
            }
        }
    }
}

//! Classification loss.

use crate::error::Result;
use crate::tensor::{Graph, NodeId};

/// Mean softmax cross-entropy over a `[B, C]` logits node, fused into a
/// single graph op so the log-sum-exp never materializes probabilities.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.cross_entropy(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn loss_of(logits: &[f64], shape: &[usize], labels: &[usize]) -> f64 {
        let t = Tensor::new(logits.to_vec(), shape).unwrap();
        let mut g = Graph::new();
        let li = g.leaf(&t);
        let loss = cross_entropy(&mut g, li, labels).unwrap();
        g.data(loss)[0]
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let loss = loss_of(&[0.0; 21], &[1, 21], &[4]);
        assert!((loss - (21.0f64).ln()).abs() < 1e-12);
        assert!((loss - 3.0445).abs() < 1e-4);
    }

    #[test]
    fn saturated_true_class_drives_loss_to_zero() {
        let mut logits = vec![0.0; 21];
        logits[4] = 30.0;
        assert!(loss_of(&logits, &[1, 21], &[4]) < 1e-9);
    }

    #[test]
    fn three_class_oracle_value() {
        // -ln softmax([1,2,3])[2], frozen from the exp/sum oracle
        let loss = loss_of(&[1.0, 2.0, 3.0], &[1, 3], &[2]);
        let oracle = {
            let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
            let total: f64 = exps.iter().sum();
            -(exps[2] / total).ln()
        };
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn shift_invariance() {
        let base = loss_of(&[0.4, -1.0, 2.2, 0.1, -0.7, 1.3], &[2, 3], &[2, 0]);
        let shifted: Vec<f64> = [0.4, -1.0, 2.2, 0.1, -0.7, 1.3].iter().map(|v| v + 57.5).collect();
        let moved = loss_of(&shifted, &[2, 3], &[2, 0]);
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_contract_error() {
        let t = Tensor::zeros(&[1, 3]);
        let mut g = Graph::new();
        let li = g.leaf(&t);
        assert!(matches!(cross_entropy(&mut g, li, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = [0.2, -0.4, 1.1, 0.9, -1.3, 0.5];
        let labels = [1usize, 2];
        let t = Tensor::new(logits.to_vec(), &[2, 3]).unwrap().with_requires_grad();
        let mut g = Graph::new();
        let li = g.leaf(&t);
        let loss = cross_entropy(&mut g, li, &labels).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(li).unwrap().to_vec();

        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits;
            plus[i] += eps;
            let mut minus = logits;
            minus[i] -= eps;
            let numeric = (loss_of(&plus, &[2, 3], &labels) - loss_of(&minus, &[2, 3], &labels)) / (2.0 * eps);
            assert!((analytic[i] - numeric).abs() < 1e-6, "logit {i}: {} vs {numeric}", analytic[i]);
        }
    }
}

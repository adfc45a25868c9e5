//! A common interface for anything that maps features to a class distribution:
//! trained classifiers, expert ensembles, and test stubs.

use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::nn::MlpModel;

pub trait Scorer: Sync {
    fn num_classes(&self) -> usize;

    /// Class probability vector for one feature vector.
    fn class_probs(&self, features: &[f64]) -> Result<Vec<f64>>;
}

/// A k-output model scores via softmax over its logits.
impl Scorer for MlpModel {
    fn num_classes(&self) -> usize {
        self.output_dim()
    }

    fn class_probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        if self.output_dim() < 2 {
            return Err(Error::Config(
                "single-logit models do not define a class distribution".to_string(),
            ));
        }
        Ok(softmax(&self.forward(features)?))
    }
}

/// Always predicts the uniform distribution; PoE with this scorer reduces to
/// plain cross-entropy training.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    pub k: usize,
}

impl Scorer for UniformScorer {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn class_probs(&self, _features: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.k as f64; self.k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    #[test]
    fn model_probs_form_a_distribution() {
        let model = MlpModel::new(&[4, 6, 3], Activation::Relu, 9).unwrap();
        let p = model.class_probs(&[0.1, -0.4, 1.0, 0.3]).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_logit_model_is_not_a_scorer() {
        let model = MlpModel::new(&[4, 1], Activation::Relu, 0).unwrap();
        assert!(model.class_probs(&[0.0; 4]).is_err());
    }

    #[test]
    fn uniform_scorer_is_uniform() {
        let s = UniformScorer { k: 4 };
        assert_eq!(s.class_probs(&[1.0]).unwrap(), vec![0.25; 4]);
    }
}

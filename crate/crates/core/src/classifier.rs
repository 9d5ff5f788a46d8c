//! One-hidden-layer softmax classifier (tanh hidden units).
//!
//! Used twice: as the frozen feature extractor (its normalized hidden
//! activations are the embedding) and as the downstream evaluation model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{AdamWConfig, AdamWState, Mat, MathError, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error(transparent)]
    Math(#[from] MathError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierRecipe {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl ClassifierRecipe {
    /// Downstream evaluation recipe.
    pub fn evaluation() -> Self {
        Self {
            hidden: 32,
            epochs: 100,
            batch_size: 16,
            lr: 1e-2,
        }
    }

    /// Recipe for fitting the feature extractor on the real train split.
    pub fn feature_extractor() -> Self {
        Self {
            hidden: 32,
            epochs: 40,
            batch_size: 32,
            lr: 5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
}

impl MlpClassifier {
    /// Weights ~ N(0, 1/fan_in), zero biases.
    pub fn init(n_in: usize, hidden: usize, n_classes: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Mat::gaussian(hidden, n_in, 1.0 / (n_in as f64).sqrt(), rng),
            b1: vec![0.0; hidden],
            w2: Mat::gaussian(n_classes, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b2: vec![0.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.b2.len()
    }

    pub fn hidden_width(&self) -> usize {
        self.b1.len()
    }

    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .matvec(x)
            .iter()
            .zip(&self.b1)
            .map(|(a, b)| (a + b).tanh())
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let h = self.hidden(x);
        self.w2.matvec(&h).iter().zip(&self.b2).map(|(a, b)| a + b).collect()
    }

    /// Arg-max class; ties go to the smallest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn accuracy(&self, samples: &[Vec<f64>], labels: &[usize]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let correct = samples
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / samples.len() as f64
    }

    /// Cross-entropy of one sample, accumulating `scale * grad` into `grads`.
    fn accumulate(&self, x: &[f64], y: usize, scale: f64, grads: &mut MlpClassifier) -> f64 {
        let h = self.hidden(x);
        let logits: Vec<f64> = self.w2.matvec(&h).iter().zip(&self.b2).map(|(a, b)| a + b).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + max - logits[y];

        let mut d_logits: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        d_logits[y] -= 1.0;
        grads.w2.add_outer(scale, &d_logits, &h);
        crate::math::axpy(&mut grads.b2, scale, &d_logits);
        let d_h = self.w2.matvec_t(&d_logits);
        let d_pre: Vec<f64> = d_h.iter().zip(&h).map(|(g, a)| g * (1.0 - a * a)).collect();
        grads.w1.add_outer(scale, &d_pre, x);
        crate::math::axpy(&mut grads.b1, scale, &d_pre);
        loss
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Mat::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.b1.len()],
            w2: Mat::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![0.0; self.b2.len()],
        }
    }

    fn tensor_sizes(&self) -> [usize; 4] {
        [
            self.w1.data().len(),
            self.b1.len(),
            self.w2.data().len(),
            self.b2.len(),
        ]
    }

    /// Mini-batch AdamW on softmax cross-entropy. Returns the mean loss of the
    /// final epoch.
    pub fn train(
        &mut self,
        samples: &[Vec<f64>],
        labels: &[usize],
        recipe: &ClassifierRecipe,
        rng: &mut Rng,
    ) -> Result<f64, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        let mut opt = AdamWState::new(AdamWConfig::with_lr(recipe.lr), &self.tensor_sizes());
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut last = f64::NAN;
        for epoch in 0..recipe.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for chunk in order.chunks(recipe.batch_size.max(1)) {
                let scale = 1.0 / chunk.len() as f64;
                let mut g = self.zeros_like();
                for &i in chunk {
                    total += self.accumulate(&samples[i], labels[i], scale, &mut g);
                }
                if !total.is_finite() {
                    return Err(TrainError::TrainingDiverged { epoch, loss: total });
                }
                let MlpClassifier { w1, b1, w2, b2 } = self;
                opt.step(
                    &mut [w1.data_mut(), b1, w2.data_mut(), b2],
                    &[g.w1.data(), &g.b1, g.w2.data(), &g.b2],
                )
                .map_err(|_| TrainError::TrainingDiverged { epoch, loss: total })?;
            }
            last = total / samples.len() as f64;
        }
        Ok(last)
    }
}

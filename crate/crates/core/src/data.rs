//! Synthetic Gaussian-mixture datasets, labeled containers and the frozen
//! feature extractor φ.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierRecipe, MlpClassifier, TrainError};
use crate::math::{normalize_to_sphere, MathError, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid mixture spec: {0}")]
    InvalidSpec(String),
    #[error("feature extractor needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("class {class} subgroup has {got} samples, expected IPC = {ipc}")]
    IpcMismatch { class: usize, got: usize, ipc: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Csv(#[from] crate::io::CsvError),
}

/// Class-conditional isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation.
    pub scale: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl GmmSpec {
    /// Means at `separation · e_i`, the vertices of a scaled simplex
    /// (requires `n_classes <= dim`).
    pub fn simplex(
        n_classes: usize,
        dim: usize,
        separation: f64,
        scale: f64,
        n_train: usize,
        n_test: usize,
    ) -> Result<Self, DataError> {
        if n_classes > dim {
            return Err(DataError::InvalidSpec(format!(
                "{n_classes} simplex vertices need dim >= {n_classes}, got {dim}"
            )));
        }
        let means = (0..n_classes)
            .map(|i| {
                let mut m = vec![0.0; dim];
                m[i] = separation;
                m
            })
            .collect();
        let spec = Self {
            n_classes,
            dim,
            means,
            scale,
            n_train,
            n_test,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_classes == 0 || self.dim == 0 {
            return Err(DataError::InvalidSpec("need n_classes >= 1 and dim >= 1".into()));
        }
        if self.means.len() != self.n_classes || self.means.iter().any(|m| m.len() != self.dim) {
            return Err(DataError::InvalidSpec("means must be n_classes vectors of length dim".into()));
        }
        if !(self.scale >= 0.0) {
            return Err(DataError::InvalidSpec(format!("scale must be >= 0, got {}", self.scale)));
        }
        for i in 0..self.n_classes {
            for j in i + 1..self.n_classes {
                if self.means[i] == self.means[j] {
                    return Err(DataError::InvalidSpec(format!("means {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Distilled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Vec<f64>>, labels: Vec<usize>, split: Split) -> Self {
        assert_eq!(samples.len(), labels.len(), "samples and labels differ in length");
        Self {
            samples,
            labels,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Samples of one class, in dataset order.
    pub fn class_samples(&self, class_id: usize) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .zip(&self.labels)
            .filter(|(_, &y)| y == class_id)
            .map(|(x, _)| x.clone())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        crate::io::write_labeled_rows(out, "x", self.samples.iter().zip(&self.labels))
    }

    pub fn read_csv<R: BufRead>(input: R, split: Split) -> Result<Self, DataError> {
        let (samples, labels) = crate::io::read_labeled_rows(input)?;
        Ok(Self::new(samples, labels, split))
    }
}

/// Train and test splits drawn independently, class by class.
pub fn generate_gmm(spec: &GmmSpec, rng: &mut Rng) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    spec.validate()?;
    let mut draw = |n: usize, split: Split| {
        let mut samples = Vec::with_capacity(n * spec.n_classes);
        let mut labels = Vec::with_capacity(n * spec.n_classes);
        for (c, mean) in spec.means.iter().enumerate() {
            for _ in 0..n {
                samples.push(mean.iter().map(|m| m + spec.scale * rng.normal()).collect());
                labels.push(c);
            }
        }
        LabeledDataset::new(samples, labels, split)
    };
    let train = draw(spec.n_train, Split::Train);
    let test = draw(spec.n_test, Split::Test);
    Ok((train, test))
}

/// Frozen φ: L2-normalized hidden activations of a classifier fitted on
/// real training data.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    model: MlpClassifier,
    train_accuracy: f64,
}

impl FeatureExtractor {
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>, MathError> {
        normalize_to_sphere(&self.model.hidden(x))
    }

    pub fn features_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MathError> {
        xs.iter().map(|x| self.features(x)).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.model.hidden_width()
    }

    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }

    pub fn classifier(&self) -> &MlpClassifier {
        &self.model
    }
}

pub fn fit_feature_extractor(
    train: &LabeledDataset,
    recipe: &ClassifierRecipe,
    rng: &mut Rng,
) -> Result<FeatureExtractor, DataError> {
    let n_classes = train.n_classes();
    if n_classes < 2 {
        return Err(DataError::TooFewClasses(n_classes));
    }
    let dim = train.samples.first().map_or(0, |x| x.len());
    let mut model = MlpClassifier::init(dim, recipe.hidden, n_classes, rng);
    model.train(&train.samples, &train.labels, recipe, rng)?;
    let train_accuracy = model.accuracy(&train.samples, &train.labels);
    log::info!("feature extractor train accuracy {train_accuracy:.4}");
    Ok(FeatureExtractor {
        model,
        train_accuracy,
    })
}

/// Concatenate one selected subgroup per class (index = class id).
pub fn make_distilled(selected: &[Vec<Vec<f64>>], ipc: usize) -> Result<LabeledDataset, DataError> {
    let mut samples = Vec::with_capacity(selected.len() * ipc);
    let mut labels = Vec::with_capacity(selected.len() * ipc);
    for (class, group) in selected.iter().enumerate() {
        if group.len() != ipc {
            return Err(DataError::IpcMismatch {
                class,
                got: group.len(),
                ipc,
            });
        }
        samples.extend(group.iter().cloned());
        labels.extend(std::iter::repeat_n(class, ipc));
    }
    Ok(LabeledDataset::new(samples, labels, Split::Distilled))
}

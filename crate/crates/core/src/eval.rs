//! Hard-label downstream evaluation: train a fresh classifier on a (distilled)
//! set, measure Top-1 accuracy on the real test split, aggregate over seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{ClassifierRecipe, MlpClassifier, TrainError};
use crate::data::LabeledDataset;
use crate::math::{mean_std, Rng};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("label spaces differ: train has {train} classes, test has {test}")]
    LabelMismatch { train: usize, test: usize },
    #[error("no methods to compare")]
    NoMethods,
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Trains `recipe` on `train` from scratch and returns test accuracy.
/// Every random choice (init, batch order) comes from `seed`.
pub fn train_and_eval(
    train: &LabeledDataset,
    test: &LabeledDataset,
    seed: u64,
    recipe: &ClassifierRecipe,
) -> Result<f64, EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptySet("train"));
    }
    if test.is_empty() {
        return Err(EvalError::EmptySet("test"));
    }
    let (c_train, c_test) = (train.n_classes(), test.n_classes());
    if c_train != c_test {
        return Err(EvalError::LabelMismatch {
            train: c_train,
            test: c_test,
        });
    }
    let mut rng = Rng::new(seed).derive("eval-classifier");
    let dim = train.samples[0].len();
    let mut model = MlpClassifier::init(dim, recipe.hidden, c_train, &mut rng);
    model.train(&train.samples, &train.labels, recipe, &mut rng)?;
    Ok(model.accuracy(&test.samples, &test.labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub ipc: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for one seed).
    pub std: f64,
    /// SHA-256 over the classifier recipe and seed list.
    pub fingerprint: String,
}

pub fn recipe_fingerprint(recipe: &ClassifierRecipe, seeds: &[u64]) -> String {
    let json = serde_json::json!({ "recipe": recipe, "seeds": seeds });
    hex::encode(Sha256::digest(json.to_string().as_bytes()))
}

impl EvalReport {
    pub fn from_accuracies(method: &str, ipc: usize, seeds: &[u64], accuracies: Vec<f64>, recipe: &ClassifierRecipe) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            method: method.to_string(),
            ipc,
            seeds: seeds.to_vec(),
            accuracies,
            mean,
            std,
            fingerprint: recipe_fingerprint(recipe, seeds),
        }
    }
}

/// Same recipe and seeds for every method.
pub fn compare_methods(
    methods: &[(String, LabeledDataset)],
    test: &LabeledDataset,
    ipc: usize,
    seeds: &[u64],
    recipe: &ClassifierRecipe,
) -> Result<Vec<EvalReport>, EvalError> {
    if methods.is_empty() {
        return Err(EvalError::NoMethods);
    }
    methods
        .iter()
        .map(|(name, data)| {
            let accs = seeds
                .iter()
                .map(|&s| train_and_eval(data, test, s, recipe))
                .collect::<Result<Vec<_>, _>>()?;
            log::info!("{name}: accuracies {accs:?}");
            Ok(EvalReport::from_accuracies(name, ipc, seeds, accs, recipe))
        })
        .collect()
}

/// `method,ipc,seed,accuracy`
pub fn write_results_csv<W: Write>(reports: &[EvalReport], out: W) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "method,ipc,seed,accuracy")?;
    for r in reports {
        for (seed, acc) in r.seeds.iter().zip(&r.accuracies) {
            writeln!(out, "{},{},{},{}", r.method, r.ipc, seed, acc)?;
        }
    }
    out.flush()
}

/// `method,ipc,mean,std`
pub fn write_summary_csv<W: Write>(reports: &[EvalReport], out: W) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "method,ipc,mean,std")?;
    for r in reports {
        writeln!(out, "{},{},{},{}", r.method, r.ipc, r.mean, r.std)?;
    }
    out.flush()
}

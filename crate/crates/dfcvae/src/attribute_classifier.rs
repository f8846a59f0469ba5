//! Binary linear classifiers over latent vectors: L2-regularized hinge loss
//! trained with seeded stochastic subgradient descent and averaged iterates.

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

use crate::core_model::EncoderParams;
use crate::data_pipeline::{load_and_preprocess, AttributeTable, DatasetSpec};
use crate::error::{Error, Result};
use crate::latent_toolkit::encode_mus;

#[derive(Clone, Debug)]
pub struct SvmHyperparams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmHyperparams {
    fn default() -> Self {
        SvmHyperparams {
            lambda: 1e-4,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub attribute_name: String,
    pub weight: Array1<f64>,
    pub bias: f64,
    /// Per-dimension standardization from the training set; zero-variance
    /// dimensions are dropped and recorded.
    pub feat_mean: Array1<f64>,
    pub feat_std: Array1<f64>,
    pub kept_dims: Vec<usize>,
    pub hyper: SvmHyperparams,
}

impl LinearClassifier {
    pub fn decision(&self, x: &ArrayView1<f64>) -> f64 {
        let mut s = self.bias;
        for (k, &d) in self.kept_dims.iter().enumerate() {
            s += self.weight[k] * (x[d] - self.feat_mean[k]) / self.feat_std[k];
        }
        s
    }

    pub fn predict(&self, x: &ArrayView1<f64>) -> i8 {
        if self.decision(x) >= 0.0 {
            1
        } else {
            -1
        }
    }
}

/// Minimize (lambda/2)||w||^2 + mean hinge loss by stochastic subgradient
/// descent with averaged iterates, on standardized features.
pub fn train_linear_svm(
    features: &Array2<f64>,
    labels: &[i8],
    hyper: &SvmHyperparams,
    attribute_name: &str,
) -> Result<LinearClassifier> {
    let n = features.nrows();
    if n != labels.len() {
        return Err(Error::shape("features and labels length mismatch"));
    }
    if n < 2 {
        return Err(Error::config("need at least 2 training samples"));
    }
    let has_pos = labels.iter().any(|&l| l == 1);
    let has_neg = labels.iter().any(|&l| l == -1);
    if !has_pos || !has_neg {
        return Err(Error::config(format!(
            "attribute `{attribute_name}`: training set contains a single class; \
             provide examples of both classes"
        )));
    }

    let d_full = features.ncols();
    let mut kept_dims = Vec::new();
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for d in 0..d_full {
        let col = features.column(d);
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        if var > 0.0 {
            kept_dims.push(d);
            mean.push(m);
            std.push(var.sqrt());
        }
    }
    if kept_dims.is_empty() {
        return Err(Error::config("all feature dimensions have zero variance"));
    }
    // Standardized features plus a constant column carrying the bias, so
    // the subgradient step treats w and b uniformly.
    let dim = kept_dims.len();
    let mut x = Array2::<f64>::zeros((n, dim + 1));
    for (k, &d) in kept_dims.iter().enumerate() {
        for i in 0..n {
            x[[i, k]] = (features[[i, d]] - mean[k]) / std[k];
        }
    }
    x.column_mut(dim).fill(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut w = Array1::<f64>::zeros(dim + 1);
    let total = hyper.epochs * n;
    let avg_start = total / 2; // suffix averaging
    let mut w_avg = Array1::<f64>::zeros(dim + 1);
    let mut avg_count = 0usize;
    for t in 1..=total {
        let i = rng.random_range(0..n);
        let y = labels[i] as f64;
        let eta = 1.0 / (hyper.lambda * t as f64);
        let margin = y * w.dot(&x.row(i));
        w *= 1.0 - eta * hyper.lambda;
        if margin < 1.0 {
            w.scaled_add(eta * y, &x.row(i));
        }
        if t > avg_start {
            w_avg += &w;
            avg_count += 1;
        }
    }
    w_avg /= avg_count as f64;
    let bias = w_avg[dim];
    let weight = w_avg.slice(s![0..dim]).to_owned();

    Ok(LinearClassifier {
        attribute_name: attribute_name.to_string(),
        weight,
        bias,
        feat_mean: Array1::from_vec(mean),
        feat_std: Array1::from_vec(std),
        kept_dims,
        hyper: hyper.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct AccuracyReport {
    /// (attribute name, accuracy percent) per classifier.
    pub entries: Vec<(String, f64)>,
    pub average: f64,
}

impl AccuracyReport {
    pub fn new(entries: Vec<(String, f64)>) -> Self {
        let average = entries.iter().map(|(_, a)| a).sum::<f64>() / entries.len() as f64;
        AccuracyReport { entries, average }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("attribute,accuracy\n");
        for (name, acc) in &self.entries {
            let _ = writeln!(out, "{name},{acc:.2}");
        }
        let _ = writeln!(out, "Average,{:.2}", self.average);
        out
    }
}

/// Accuracy of predictions against {-1,+1} labels, in percent.
pub fn accuracy_percent(predictions: &[i8], labels: &[i8]) -> f64 {
    let correct = predictions
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / labels.len() as f64 * 100.0
}

/// Train one classifier per attribute on latents of the train split.
pub fn train_all(
    encoder: &EncoderParams,
    data: &DatasetSpec,
    table: &AttributeTable,
    hyper: &SvmHyperparams,
) -> Result<Vec<LinearClassifier>> {
    data.validate()?;
    let feats = encode_mus(encoder, &data.train_ids, data)?;
    let mut classifiers = Vec::new();
    for (a, name) in table.attribute_names.iter().enumerate() {
        let labels: Vec<i8> = data
            .train_ids
            .iter()
            .map(|id| {
                table
                    .rows
                    .get(id)
                    .map(|row| row[a])
                    .ok_or_else(|| Error::config(format!("no attributes for `{id}`")))
            })
            .collect::<Result<_>>()?;
        classifiers.push(train_linear_svm(&feats, &labels, hyper, name)?);
    }
    Ok(classifiers)
}

/// Evaluate classifiers on the test split (disjoint from training by
/// construction of the DatasetSpec).
pub fn evaluate(
    classifiers: &[LinearClassifier],
    encoder: &EncoderParams,
    data: &DatasetSpec,
    table: &AttributeTable,
) -> Result<AccuracyReport> {
    data.validate()?;
    if data.test_ids.is_empty() {
        return Err(Error::config("empty test split"));
    }
    let mut feats = Array2::<f64>::zeros((data.test_ids.len(), encoder.fc_mu.bias.len()));
    let mut row = 0usize;
    for chunk in data.test_ids.chunks(64) {
        let batch = load_and_preprocess(data, chunk)?;
        for code in crate::core_model::encode_eval(encoder, &batch)? {
            feats.row_mut(row).assign(&code.mu);
            row += 1;
        }
    }
    let mut entries = Vec::new();
    for clf in classifiers {
        let a = table.attribute_index(&clf.attribute_name)?;
        let mut preds = Vec::with_capacity(data.test_ids.len());
        let mut labels = Vec::with_capacity(data.test_ids.len());
        for (i, id) in data.test_ids.iter().enumerate() {
            let rowv = table
                .rows
                .get(id)
                .ok_or_else(|| Error::config(format!("no attributes for `{id}`")))?;
            labels.push(rowv[a]);
            preds.push(clf.predict(&feats.row(i)));
        }
        entries.push((clf.attribute_name.clone(), accuracy_percent(&preds, &labels)));
    }
    Ok(AccuracyReport::new(entries))
}

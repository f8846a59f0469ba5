//! Latent-space procedures: interpolation, attribute-specific vectors,
//! vector arithmetic, Pearson correlation and embedding export.

use ndarray::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

use crate::archive::TensorArchive;
use crate::core_model::{encode_eval, EncoderParams};
use crate::data_pipeline::{load_and_preprocess, DatasetSpec};
use crate::error::{Error, Result};
use crate::grid::save_image;

/// Named direction in latent space, the difference of mean latent codes
/// between images with and without an attribute.
#[derive(Clone, Debug)]
pub struct AttributeVector {
    pub name: String,
    pub vector: Array1<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl AttributeVector {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut arch = TensorArchive::new();
        arch.metadata.insert("attribute.name".into(), self.name.clone());
        arch.metadata
            .insert("attribute.n_pos".into(), self.n_pos.to_string());
        arch.metadata
            .insert("attribute.n_neg".into(), self.n_neg.to_string());
        arch.insert("attribute.vector", self.vector.clone().into_dyn());
        arch.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let arch = TensorArchive::load(path)?;
        let vector = arch
            .get("attribute.vector")?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Corrupt("attribute.vector is not rank 1".into()))?;
        Ok(AttributeVector {
            name: arch.meta("attribute.name")?.to_string(),
            vector,
            n_pos: arch
                .meta("attribute.n_pos")?
                .parse()
                .map_err(|_| Error::Corrupt("bad attribute.n_pos".into()))?,
            n_neg: arch
                .meta("attribute.n_neg")?
                .parse()
                .map_err(|_| Error::Corrupt("bad attribute.n_neg".into()))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Array2<f64>,
}

impl CorrelationMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "attribute,{}", self.names.join(","));
        for (i, name) in self.names.iter().enumerate() {
            let row: Vec<String> = (0..self.names.len())
                .map(|j| format!("{:?}", self.values[[i, j]]))
                .collect();
            let _ = writeln!(out, "{name},{}", row.join(","));
        }
        out
    }
}

/// z = (1 - alpha) * z_left + alpha * z_right for each alpha.
pub fn interpolate(
    z_left: &Array1<f64>,
    z_right: &Array1<f64>,
    alphas: &[f64],
) -> Result<Vec<Array1<f64>>> {
    if z_left.len() != z_right.len() {
        return Err(Error::shape("interpolation endpoints differ in length"));
    }
    Ok(alphas
        .iter()
        .map(|&a| z_left * (1.0 - a) + &(z_right * a))
        .collect())
}

/// Encode both id sets to their mean posterior means and return the
/// difference mean(pos) - mean(neg).
pub fn attribute_vector(
    encoder: &EncoderParams,
    pos_ids: &[String],
    neg_ids: &[String],
    data: &DatasetSpec,
    name: &str,
) -> Result<AttributeVector> {
    if pos_ids.is_empty() || neg_ids.is_empty() {
        return Err(Error::config("both id lists must be nonempty"));
    }
    let pos = encode_mean(encoder, pos_ids, data)?;
    let neg = encode_mean(encoder, neg_ids, data)?;
    Ok(AttributeVector {
        name: name.to_string(),
        vector: pos - neg,
        n_pos: pos_ids.len(),
        n_neg: neg_ids.len(),
    })
}

/// Attribute vector from precomputed latents, one row per sample.
pub fn attribute_vector_from_latents(
    pos: &Array2<f64>,
    neg: &Array2<f64>,
    name: &str,
) -> Result<AttributeVector> {
    if pos.nrows() == 0 || neg.nrows() == 0 {
        return Err(Error::config("both latent sets must be nonempty"));
    }
    if pos.ncols() != neg.ncols() {
        return Err(Error::shape("latent dims differ"));
    }
    let mp = pos.mean_axis(Axis(0)).unwrap();
    let mn = neg.mean_axis(Axis(0)).unwrap();
    Ok(AttributeVector {
        name: name.to_string(),
        vector: mp - mn,
        n_pos: pos.nrows(),
        n_neg: neg.nrows(),
    })
}

fn encode_mean(
    encoder: &EncoderParams,
    ids: &[String],
    data: &DatasetSpec,
) -> Result<Array1<f64>> {
    let latent_dim = encoder.fc_mu.bias.len();
    let mut acc = Array1::<f64>::zeros(latent_dim);
    let mut count = 0usize;
    for chunk in ids.chunks(64) {
        let batch = load_and_preprocess(data, chunk)?;
        for code in encode_eval(encoder, &batch)? {
            acc += &code.mu;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Encode a list of ids to their posterior means, one row per id.
pub fn encode_mus(
    encoder: &EncoderParams,
    ids: &[String],
    data: &DatasetSpec,
) -> Result<Array2<f64>> {
    let latent_dim = encoder.fc_mu.bias.len();
    let mut out = Array2::<f64>::zeros((ids.len(), latent_dim));
    let mut row = 0usize;
    for chunk in ids.chunks(64) {
        let batch = load_and_preprocess(data, chunk)?;
        for code in encode_eval(encoder, &batch)? {
            out.row_mut(row).assign(&code.mu);
            row += 1;
        }
    }
    Ok(out)
}

/// z + alpha * attribute vector for each alpha.
pub fn apply_attribute(
    z: &Array1<f64>,
    attr: &AttributeVector,
    alphas: &[f64],
) -> Result<Vec<Array1<f64>>> {
    if z.len() != attr.vector.len() {
        return Err(Error::shape("attribute vector length differs from z"));
    }
    Ok(alphas.iter().map(|&a| z + &(&attr.vector * a)).collect())
}

/// Pearson correlation between attribute vectors treated as paired samples
/// over the latent dimensions.
pub fn pearson_correlation(attrs: &[AttributeVector]) -> Result<CorrelationMatrix> {
    if attrs.len() < 2 {
        return Err(Error::config("need at least 2 attribute vectors"));
    }
    let dim = attrs[0].vector.len();
    for a in attrs {
        if a.vector.len() != dim {
            return Err(Error::shape(format!(
                "attribute `{}` has dim {}, expected {dim}",
                a.name,
                a.vector.len()
            )));
        }
    }
    let mut centered = Vec::with_capacity(attrs.len());
    for a in attrs {
        let mean = a.vector.sum() / dim as f64;
        let c = a.vector.mapv(|v| v - mean);
        let var = c.mapv(|v| v * v).sum();
        if var == 0.0 {
            return Err(Error::config(format!(
                "attribute vector `{}` has zero variance",
                a.name
            )));
        }
        centered.push((c, var.sqrt()));
    }
    let k = attrs.len();
    let mut values = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let r = centered[i].0.dot(&centered[j].0) / (centered[i].1 * centered[j].1);
            values[[i, j]] = r;
            values[[j, i]] = r;
        }
        values[[i, i]] = 1.0;
    }
    Ok(CorrelationMatrix {
        names: attrs.iter().map(|a| a.name.clone()).collect(),
        values,
    })
}

/// Write a tabular file of posterior means (image_id plus one column per
/// latent dimension) and a thumbnail directory for external embedding tools.
pub fn export_embedding_inputs(
    encoder: &EncoderParams,
    ids: &[String],
    data: &DatasetSpec,
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::config("empty id list for embedding export"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let thumbs = out_dir.join("thumbnails");
    std::fs::create_dir_all(&thumbs)?;
    let latent_dim = encoder.fc_mu.bias.len();
    let mut csv = String::new();
    let cols: Vec<String> = (0..latent_dim).map(|i| format!("mu_{i}")).collect();
    let _ = writeln!(csv, "image_id,{}", cols.join(","));
    for chunk in ids.chunks(64) {
        let batch = load_and_preprocess(data, chunk)?;
        let codes = encode_eval(encoder, &batch)?;
        for (i, (id, code)) in chunk.iter().zip(codes.iter()).enumerate() {
            let vals: Vec<String> = code.mu.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(csv, "{id},{}", vals.join(","));
            let stem = Path::new(id)
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| id.clone());
            save_image(&batch.slice(s![i, .., .., ..]), thumbs.join(format!("{stem}.png")))?;
        }
    }
    std::fs::write(out_dir.join("embedding.csv"), csv)?;
    Ok(())
}

/// Parse an `embedding.csv` produced by [`export_embedding_inputs`].
pub fn parse_embedding_csv(text: &str) -> Result<Vec<(String, Array1<f64>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts.next().unwrap().to_string();
        let vals: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: i + 1,
                msg: "bad float".into(),
            })?;
        rows.push((id, Array1::from_vec(vals)));
    }
    Ok(rows)
}

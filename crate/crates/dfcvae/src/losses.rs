//! KL divergence, feature perceptual loss, pixel-loss baseline and the
//! weighted total objective, together with their analytic gradients.

use indexmap::IndexMap;
use ndarray::prelude::*;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::loss_network::{FeatureMap, LossNetwork};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Dfc,
    Pixel,
}

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mode: LossMode,
    pub tap_tags: Vec<String>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.5,
            mode: LossMode::Dfc,
            tap_tags: vec!["relu1_1".into(), "relu2_1".into(), "relu3_1".into()],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() || self.alpha < 0.0 || self.beta < 0.0
        {
            return Err(Error::config("alpha and beta must be finite and >= 0"));
        }
        if self.mode == LossMode::Dfc && self.tap_tags.is_empty() {
            return Err(Error::config("dfc mode requires at least one tap tag"));
        }
        Ok(())
    }

    pub fn to_keyvalues(&self) -> Vec<(String, String)> {
        vec![
            ("alpha".into(), format!("{:?}", self.alpha)),
            ("beta".into(), format!("{:?}", self.beta)),
            (
                "mode".into(),
                match self.mode {
                    LossMode::Dfc => "dfc".into(),
                    LossMode::Pixel => "pixel".into(),
                },
            ),
            ("taps".into(), self.tap_tags.join(",")),
        ]
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            meta.get(&format!("loss.{k}"))
                .map(String::as_str)
                .ok_or_else(|| Error::Corrupt(format!("missing metadata key `loss.{k}`")))
        };
        let mode = match get("mode")? {
            "dfc" => LossMode::Dfc,
            "pixel" => LossMode::Pixel,
            other => return Err(Error::Corrupt(format!("bad loss mode `{other}`"))),
        };
        let taps_raw = get("taps")?;
        let tap_tags = if taps_raw.is_empty() {
            Vec::new()
        } else {
            taps_raw.split(',').map(|s| s.trim().to_string()).collect()
        };
        Ok(LossConfig {
            alpha: get("alpha")?
                .parse()
                .map_err(|_| Error::Corrupt("bad loss.alpha".into()))?,
            beta: get("beta")?
                .parse()
                .map_err(|_| Error::Corrupt("bad loss.beta".into()))?,
            mode,
            tap_tags,
        })
    }
}

/// All scalar components of one objective evaluation.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub kl: f64,
    pub per_layer_rec: IndexMap<String, f64>,
    pub rec_total: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Mean over the batch of -1/2 sum_j (1 + logvar - mu^2 - exp(logvar)).
pub fn kl_loss(mu: &Array2<f64>, logvar: &Array2<f64>) -> Result<f64> {
    if mu.dim() != logvar.dim() {
        return Err(Error::shape("mu and logvar shapes differ"));
    }
    if !mu.iter().all(|v| v.is_finite()) || !logvar.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric {
            location: "kl_loss inputs".into(),
        });
    }
    let b = mu.dim().0 as f64;
    let s: f64 = mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| -(1.0 + lv - m * m - lv.exp()) / 2.0)
        .sum();
    Ok(s / b)
}

/// Gradients of [`kl_loss`] with respect to mu and logvar.
pub fn kl_loss_grad(mu: &Array2<f64>, logvar: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let b = mu.dim().0 as f64;
    let dmu = mu.mapv(|m| m / b);
    let dlogvar = logvar.mapv(|lv| (lv.exp() - 1.0) / (2.0 * b));
    (dmu, dlogvar)
}

/// Squared euclidean distance normalized by 1/(2 C W H), mean over batch.
pub fn feature_layer_loss(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.layer_tag != b.layer_tag {
        return Err(Error::shape(format!(
            "feature maps from different layers: {} vs {}",
            a.layer_tag, b.layer_tag
        )));
    }
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape(format!(
            "feature map shapes differ at {}: {:?} vs {:?}",
            a.layer_tag,
            a.data.dim(),
            b.data.dim()
        )));
    }
    let (batch, c, h, w) = a.data.dim();
    let norm = 2.0 * (c * h * w) as f64;
    let sq = (&a.data - &b.data).mapv(|d| d * d).sum();
    Ok(sq / norm / batch as f64)
}

/// d feature_layer_loss / d b.data.
pub fn feature_layer_loss_grad(a: &FeatureMap, b: &FeatureMap) -> Array4<f64> {
    let (batch, c, h, w) = a.data.dim();
    let norm = (c * h * w) as f64 * batch as f64;
    (&b.data - &a.data) / norm
}

/// Mean squared error over all pixels, averaged over batch.
pub fn pixel_loss(x: &Array4<f64>, xbar: &Array4<f64>) -> Result<f64> {
    if x.dim() != xbar.dim() {
        return Err(Error::shape(format!(
            "pixel_loss shapes differ: {:?} vs {:?}",
            x.dim(),
            xbar.dim()
        )));
    }
    let n = x.len() as f64;
    Ok((x - xbar).mapv(|d| d * d).sum() / n)
}

pub fn pixel_loss_grad(x: &Array4<f64>, xbar: &Array4<f64>) -> Array4<f64> {
    let n = x.len() as f64;
    (xbar - x).mapv(|d| 2.0 * d / n)
}

fn breakdown(
    kl: f64,
    per_layer_rec: IndexMap<String, f64>,
    cfg: &LossConfig,
) -> LossBreakdown {
    let rec_total: f64 = per_layer_rec.values().sum();
    LossBreakdown {
        kl,
        rec_total,
        total: cfg.alpha * kl + cfg.beta * rec_total,
        per_layer_rec,
        alpha: cfg.alpha,
        beta: cfg.beta,
    }
}

/// Full objective: alpha * kl + beta * reconstruction.
pub fn total_loss(
    x: &Array4<f64>,
    xbar: &Array4<f64>,
    mu: &Array2<f64>,
    logvar: &Array2<f64>,
    net: Option<&LossNetwork>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let kl = kl_loss(mu, logvar)?;
    let per_layer = match cfg.mode {
        LossMode::Pixel => {
            let mut m = IndexMap::new();
            m.insert("pixel".to_string(), pixel_loss(x, xbar)?);
            m
        }
        LossMode::Dfc => {
            let net = net.ok_or_else(|| Error::config("dfc mode requires a loss network"))?;
            let fx = net.extract_features(x)?;
            let fxbar = net.extract_features(xbar)?;
            let mut m = IndexMap::new();
            for tag in &cfg.tap_tags {
                let a = fx
                    .maps
                    .get(tag)
                    .ok_or_else(|| Error::config(format!("net does not tap `{tag}`")))?;
                let b = &fxbar.maps[tag];
                m.insert(tag.clone(), feature_layer_loss(a, b)?);
            }
            m
        }
    };
    Ok(breakdown(kl, per_layer, cfg))
}

/// Objective plus gradients: (breakdown, d/d xbar, d/d mu, d/d logvar).
/// The mu/logvar gradients cover only the KL term; the reconstruction path
/// reaches them through the decoder and the reparameterization.
pub fn total_loss_with_grad(
    x: &Array4<f64>,
    xbar: &Array4<f64>,
    mu: &Array2<f64>,
    logvar: &Array2<f64>,
    net: Option<&LossNetwork>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Array4<f64>, Array2<f64>, Array2<f64>)> {
    cfg.validate()?;
    let kl = kl_loss(mu, logvar)?;
    let (dmu_kl, dlogvar_kl) = kl_loss_grad(mu, logvar);
    let dmu = dmu_kl * cfg.alpha;
    let dlogvar = dlogvar_kl * cfg.alpha;
    match cfg.mode {
        LossMode::Pixel => {
            let mut m = IndexMap::new();
            m.insert("pixel".to_string(), pixel_loss(x, xbar)?);
            let dxbar = pixel_loss_grad(x, xbar) * cfg.beta;
            Ok((breakdown(kl, m, cfg), dxbar, dmu, dlogvar))
        }
        LossMode::Dfc => {
            let net = net.ok_or_else(|| Error::config("dfc mode requires a loss network"))?;
            let fx = net.extract_features(x)?;
            let (fxbar, cache) = net.forward_with_cache(xbar)?;
            let mut per_layer = IndexMap::new();
            let mut tap_grads = IndexMap::new();
            for tag in &cfg.tap_tags {
                let a = fx
                    .maps
                    .get(tag)
                    .ok_or_else(|| Error::config(format!("net does not tap `{tag}`")))?;
                let b = &fxbar.maps[tag];
                per_layer.insert(tag.clone(), feature_layer_loss(a, b)?);
                tap_grads.insert(tag.clone(), feature_layer_loss_grad(a, b) * cfg.beta);
            }
            let dxbar = net.backward_to_input(&cache, &tap_grads)?;
            Ok((breakdown(kl, per_layer, cfg), dxbar, dmu, dlogvar))
        }
    }
}

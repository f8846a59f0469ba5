//! Fixed pretrained classification network used only for tapped forward
//! passes. Weights are loaded once and never updated; the backward pass here
//! propagates gradients to the *input image* only, which is what the feature
//! reconstruction loss needs.

use indexmap::IndexMap;
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::nn::{
    check_finite4, max_pool2, max_pool2_backward, relu, relu_backward, Conv2d, MaxPoolCache,
    Padding,
};

/// Channel order the loss network was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

/// Input normalization applied before the first conv. The transform is
/// linear, so it sits inside the differentiated path.
#[derive(Clone, Debug)]
pub struct Preprocessing {
    pub input_scale: f64,
    /// Per-channel means in the network's own channel order.
    pub mean: [f64; 3],
    pub channel_order: ChannelOrder,
}

impl Default for Preprocessing {
    fn default() -> Self {
        // Constants published with the reference 19-layer ImageNet weights.
        Preprocessing {
            input_scale: 255.0,
            mean: [103.939, 116.779, 123.68],
            channel_order: ChannelOrder::Bgr,
        }
    }
}

impl Preprocessing {
    fn source_channel(&self, out_c: usize) -> usize {
        match self.channel_order {
            ChannelOrder::Rgb => out_c,
            ChannelOrder::Bgr => 2 - out_c,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, _, h, w) = x.dim();
        let mut y = Array4::<f64>::zeros((b, 3, h, w));
        for c in 0..3 {
            let src = self.source_channel(c);
            let mut out = y.slice_mut(s![.., c, .., ..]);
            out.assign(&x.slice(s![.., src, .., ..]));
            out.mapv_inplace(|v| v * self.input_scale - self.mean[c]);
        }
        y
    }

    pub fn backward(&self, dy: &Array4<f64>) -> Array4<f64> {
        let (b, _, h, w) = dy.dim();
        let mut dx = Array4::<f64>::zeros((b, 3, h, w));
        for c in 0..3 {
            let src = self.source_channel(c);
            let mut out = dx.slice_mut(s![.., src, .., ..]);
            out.assign(&dy.slice(s![.., c, .., ..]));
            out.mapv_inplace(|v| v * self.input_scale);
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub enum LossLayer {
    Conv { name: String, conv: Conv2d },
    Relu { tag: String },
    MaxPool,
}

/// One tapped activation block for one sample batch.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub layer_tag: String,
    /// (batch, C, H, W)
    pub data: Array4<f64>,
}

#[derive(Debug)]
pub struct LossNetwork {
    pub layers: Vec<LossLayer>,
    pub preprocessing: Preprocessing,
    pub taps: Vec<String>,
    /// Index of the deepest layer that must execute to cover all taps.
    deepest: usize,
}

/// Tapped activations plus how many layers actually executed.
pub struct TappedFeatures {
    pub maps: IndexMap<String, FeatureMap>,
    pub layers_executed: usize,
}

enum LayerCache {
    Conv(crate::nn::Conv2dCache),
    Relu(Array4<f64>), // pre-activation input
    Pool(MaxPoolCache),
}

pub struct LossForwardCache {
    caches: Vec<LayerCache>,
    tap_shapes: IndexMap<String, (usize, usize, usize, usize)>,
}

impl LossNetwork {
    pub fn new(
        layers: Vec<LossLayer>,
        preprocessing: Preprocessing,
        tap_tags: &[String],
    ) -> Result<Self> {
        let valid: Vec<String> = layers
            .iter()
            .filter_map(|l| match l {
                LossLayer::Relu { tag } => Some(tag.clone()),
                _ => None,
            })
            .collect();
        let mut deepest = 0;
        for tag in tap_tags {
            let pos = layers.iter().position(
                |l| matches!(l, LossLayer::Relu { tag: t } if t == tag),
            );
            match pos {
                Some(p) => deepest = deepest.max(p),
                None => {
                    return Err(Error::config(format!(
                        "unknown tap tag `{tag}`; valid tags: {}",
                        valid.join(", ")
                    )))
                }
            }
        }
        Ok(LossNetwork {
            layers,
            preprocessing,
            taps: tap_tags.to_vec(),
            deepest,
        })
    }

    pub fn valid_tags(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LossLayer::Relu { tag } => Some(tag.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Forward pass collecting tapped activations. Runs only as deep as the
    /// deepest requested tap.
    pub fn extract_features(&self, batch: &Array4<f64>) -> Result<TappedFeatures> {
        let (feats, _, executed) = self.forward_inner(batch, false)?;
        Ok(TappedFeatures {
            maps: feats,
            layers_executed: executed,
        })
    }

    /// Forward pass that also retains per-layer caches for a later backward.
    pub fn forward_with_cache(
        &self,
        batch: &Array4<f64>,
    ) -> Result<(TappedFeatures, LossForwardCache)> {
        let (feats, caches, executed) = self.forward_inner(batch, true)?;
        let tap_shapes = feats
            .iter()
            .map(|(k, v)| (k.clone(), v.data.dim()))
            .collect();
        Ok((
            TappedFeatures {
                maps: feats,
                layers_executed: executed,
            },
            LossForwardCache {
                caches,
                tap_shapes,
            },
        ))
    }

    fn forward_inner(
        &self,
        batch: &Array4<f64>,
        keep_caches: bool,
    ) -> Result<(IndexMap<String, FeatureMap>, Vec<LayerCache>, usize)> {
        let mut cur = self.preprocessing.forward(batch);
        let mut feats = IndexMap::new();
        let mut caches = Vec::new();
        let mut executed = 0;
        for layer in self.layers.iter().take(self.deepest + 1) {
            match layer {
                LossLayer::Conv { name, conv } => {
                    let (y, cache) = conv.forward(&cur)?;
                    check_finite4(&y, name)?;
                    if keep_caches {
                        caches.push(LayerCache::Conv(cache));
                    }
                    cur = y;
                }
                LossLayer::Relu { tag } => {
                    let y = relu(&cur);
                    if keep_caches {
                        caches.push(LayerCache::Relu(cur));
                    }
                    if self.taps.iter().any(|t| t == tag) {
                        feats.insert(
                            tag.clone(),
                            FeatureMap {
                                layer_tag: tag.clone(),
                                data: y.clone(),
                            },
                        );
                    }
                    cur = y;
                }
                LossLayer::MaxPool => {
                    if cur.dim().2 < 2 || cur.dim().3 < 2 {
                        return Err(Error::shape(
                            "input too small: pooling would produce an empty map",
                        ));
                    }
                    let (y, cache) = max_pool2(&cur);
                    if keep_caches {
                        caches.push(LayerCache::Pool(cache));
                    }
                    cur = y;
                }
            }
            executed += 1;
        }
        Ok((feats, caches, executed))
    }

    /// Backpropagate gradients w.r.t. the tapped activations down to the
    /// input batch. Network weights receive no gradient by construction.
    pub fn backward_to_input(
        &self,
        cache: &LossForwardCache,
        tap_grads: &IndexMap<String, Array4<f64>>,
    ) -> Result<Array4<f64>> {
        let last_shape = match self.layers.get(self.deepest) {
            Some(LossLayer::Relu { tag }) => cache.tap_shapes[tag],
            _ => return Err(Error::other("deepest executed layer is not a tap")),
        };
        let mut dcur = Array4::<f64>::zeros(last_shape);
        for (i, layer) in self
            .layers
            .iter()
            .enumerate()
            .take(self.deepest + 1)
            .rev()
        {
            match (layer, &cache.caches[i]) {
                (LossLayer::Conv { conv, .. }, LayerCache::Conv(c)) => {
                    let (dx, _, _) = conv.backward(c, &dcur);
                    dcur = dx;
                }
                (LossLayer::Relu { tag }, LayerCache::Relu(pre)) => {
                    if let Some(g) = tap_grads.get(tag) {
                        dcur = &dcur + g;
                    }
                    dcur = relu_backward(pre, &dcur);
                }
                (LossLayer::MaxPool, LayerCache::Pool(c)) => {
                    dcur = max_pool2_backward(c, &dcur);
                }
                _ => return Err(Error::other("layer/cache mismatch")),
            }
        }
        Ok(self.preprocessing.backward(&dcur))
    }
}

const BLOCK_CONVS: [usize; 5] = [2, 2, 4, 4, 4];

/// Build the 19-layer network's conv stack from named weights, deriving
/// channel widths from the stored shapes.
pub fn load_loss_network(weights_path: impl AsRef<Path>, tap_tags: &[String]) -> Result<LossNetwork> {
    let arch = TensorArchive::load(weights_path)?;
    let preprocessing = preprocessing_from_meta(&arch)?;
    let mut layers = Vec::new();
    let mut in_ch = 3usize;
    for (block, &n_convs) in BLOCK_CONVS.iter().enumerate() {
        let b = block + 1;
        for idx in 1..=n_convs {
            let wname = format!("vgg.conv{b}_{idx}.weight");
            let bname = format!("vgg.conv{b}_{idx}.bias");
            let w = arch
                .get(&wname)?
                .clone()
                .into_dimensionality::<Ix4>()
                .map_err(|_| Error::Corrupt(format!("tensor `{wname}` is not rank 4")))?;
            let (oc, ic, kh, kw) = w.dim();
            if kh != 3 || kw != 3 || ic != in_ch {
                return Err(Error::Corrupt(format!(
                    "tensor `{wname}` has shape ({oc},{ic},{kh},{kw}), expected (_, {in_ch}, 3, 3)"
                )));
            }
            let bias = arch
                .get(&bname)?
                .clone()
                .into_dimensionality::<Ix1>()
                .map_err(|_| Error::Corrupt(format!("tensor `{bname}` is not rank 1")))?;
            if bias.len() != oc {
                return Err(Error::Corrupt(format!(
                    "tensor `{bname}` length {} does not match {oc} output channels",
                    bias.len()
                )));
            }
            let mut conv = Conv2d::new(ic, oc, 3, 1, Padding::Zeros(1));
            conv.weight = w;
            conv.bias = bias;
            layers.push(LossLayer::Conv { name: format!("conv{b}_{idx}"), conv });
            layers.push(LossLayer::Relu {
                tag: format!("relu{b}_{idx}"),
            });
            in_ch = oc;
        }
        layers.push(LossLayer::MaxPool);
    }
    LossNetwork::new(layers, preprocessing, tap_tags)
}

fn preprocessing_from_meta(arch: &TensorArchive) -> Result<Preprocessing> {
    let mut p = Preprocessing::default();
    if let Some(scale) = arch.metadata.get("loss_network.input_scale") {
        p.input_scale = scale
            .parse()
            .map_err(|_| Error::Corrupt("bad loss_network.input_scale".into()))?;
    }
    if let Some(mean) = arch.metadata.get("loss_network.mean") {
        let vals: Vec<f64> = mean
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Corrupt("bad loss_network.mean".into()))?;
        if vals.len() != 3 {
            return Err(Error::Corrupt("loss_network.mean needs 3 values".into()));
        }
        p.mean = [vals[0], vals[1], vals[2]];
    }
    if let Some(order) = arch.metadata.get("loss_network.channel_order") {
        p.channel_order = match order.as_str() {
            "rgb" => ChannelOrder::Rgb,
            "bgr" => ChannelOrder::Bgr,
            other => return Err(Error::Corrupt(format!("bad channel order `{other}`"))),
        };
    }
    Ok(p)
}

/// Random-weight archive in the 19-layer layout, for tests and desk-scale
/// training without the real pretrained weights.
pub fn random_vgg19_archive(block_widths: &[usize; 5], seed: u64) -> TensorArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arch = TensorArchive::new();
    arch.metadata
        .insert("loss_network.input_scale".into(), "1".into());
    arch.metadata
        .insert("loss_network.mean".into(), "0.5,0.5,0.5".into());
    arch.metadata
        .insert("loss_network.channel_order".into(), "rgb".into());
    let mut in_ch = 3usize;
    for (block, &n_convs) in BLOCK_CONVS.iter().enumerate() {
        let oc = block_widths[block];
        for idx in 1..=n_convs {
            let fan_in = (in_ch * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w = Array4::from_shape_simple_fn((oc, in_ch, 3, 3), || {
                rng.sample::<f64, _>(StandardNormal) * std
            });
            arch.insert(
                format!("vgg.conv{}_{idx}.weight", block + 1),
                w.into_dyn(),
            );
            arch.insert(
                format!("vgg.conv{}_{idx}.bias", block + 1),
                Array1::<f64>::zeros(oc).into_dyn(),
            );
            in_ch = oc;
        }
    }
    arch
}

/// Canonical channel widths of the 19-layer reference network.
pub const VGG19_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

pub fn tags(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

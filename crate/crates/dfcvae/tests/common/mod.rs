//! Shared fixtures: a synthetic face-like corpus with planted attribute
//! signals, plus small helper constructors used across integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dfcvae::data_pipeline::{CropMode, DatasetSpec, NUM_ATTRIBUTES};
use dfcvae::grid::save_image;
use dfcvae::loss_network::{random_vgg19_archive, LossLayer, LossNetwork, Preprocessing};
use dfcvae::nn::{Conv2d, Padding};

pub const CORPUS_SIZE: usize = 720;
pub const IMG_W: usize = 64;
pub const IMG_H: usize = 78;

/// Attribute names: the two planted signals plus filler columns.
pub fn attr_names() -> Vec<String> {
    let mut names = vec!["Eyeglasses".to_string(), "Male".to_string()];
    for i in 3..=NUM_ATTRIBUTES {
        names.push(format!("Attr_{i:02}"));
    }
    names
}

pub fn image_id(i: usize) -> String {
    format!("{:06}.png", i + 1)
}

/// Label layout: Eyeglasses alternates every image, Male every other pair,
/// so both are balanced and mutually independent.
pub fn labels_for(i: usize) -> (i8, i8) {
    let eyeglasses = if i % 2 == 0 { 1 } else { -1 };
    let male = if (i / 2) % 2 == 0 { 1 } else { -1 };
    (eyeglasses, male)
}

fn render_image(i: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (eyeglasses, male) = labels_for(i);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.random_range(0.05..0.15);
    let mut img = Array3::<f64>::zeros((3, IMG_H, IMG_W));
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let base = 0.45
                + 0.12 * ((x as f64 * freq + phase).sin() * (y as f64 * freq).cos())
                + 0.02 * rng.sample::<f64, _>(StandardNormal);
            let (mut r, mut g, mut b) = (base, base, base);
            if male == 1 {
                r += 0.25;
                b -= 0.10;
            } else {
                b += 0.25;
                r -= 0.10;
            }
            if eyeglasses == 1 && (30..38).contains(&y) {
                r *= 0.25;
                g *= 0.25;
                b *= 0.25;
            }
            img[[0, y, x]] = r.clamp(0.0, 1.0);
            img[[1, y, x]] = g.clamp(0.0, 1.0);
            img[[2, y, x]] = b.clamp(0.0, 1.0);
        }
    }
    img
}

/// Paths of a generated corpus.
pub struct Corpus {
    pub image_dir: PathBuf,
    pub attr_path: PathBuf,
    pub landmark_path: PathBuf,
    pub ids: Vec<String>,
}

/// Write `n` synthetic portraits plus annotation files under `root`.
pub fn make_corpus(root: &Path, n: usize, seed: u64) -> Corpus {
    let image_dir = root.join("img");
    std::fs::create_dir_all(&image_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = attr_names();
    let mut ids = Vec::with_capacity(n);

    let mut attr_text = format!("{n}\n{}\n", names.join(" "));
    let mut lm_text = format!(
        "{n}\nlefteye_x lefteye_y righteye_x righteye_y nose_x nose_y leftmouth_x leftmouth_y rightmouth_x rightmouth_y\n"
    );
    for i in 0..n {
        let id = image_id(i);
        let img = render_image(i, &mut rng);
        save_image(&img.view(), image_dir.join(&id)).unwrap();

        let (eyeglasses, male) = labels_for(i);
        let mut vals = vec![eyeglasses, male];
        for _ in 2..NUM_ATTRIBUTES {
            vals.push(if rng.random_range(0..2) == 0 { -1 } else { 1 });
        }
        attr_text.push_str(&id);
        for v in &vals {
            attr_text.push_str(&format!(" {v:>2}"));
        }
        attr_text.push('\n');

        let jx: i32 = rng.random_range(-2..=2);
        let jy: i32 = rng.random_range(-2..=2);
        lm_text.push_str(&format!(
            "{id} {} {} {} {} {} {} {} {} {} {}\n",
            20 + jx,
            33 + jy,
            44 + jx,
            33 + jy,
            32 + jx,
            46 + jy,
            24 + jx,
            58 + jy,
            40 + jx,
            58 + jy
        ));
        ids.push(id);
    }
    let attr_path = root.join("list_attr.txt");
    let landmark_path = root.join("list_landmarks.txt");
    std::fs::write(&attr_path, attr_text).unwrap();
    std::fs::write(&landmark_path, lm_text).unwrap();
    Corpus {
        image_dir,
        attr_path,
        landmark_path,
        ids,
    }
}

static SHARED: OnceLock<(tempfile::TempDir, Corpus)> = OnceLock::new();

/// A corpus of `CORPUS_SIZE` images built once per test binary.
pub fn shared_corpus() -> &'static Corpus {
    let (_, corpus) = SHARED.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_corpus(dir.path(), CORPUS_SIZE, 7);
        (dir, corpus)
    });
    corpus
}

pub fn spec_for(corpus: &Corpus, train_ids: Vec<String>, test_ids: Vec<String>, out_side: usize) -> DatasetSpec {
    DatasetSpec {
        image_dir: corpus.image_dir.clone(),
        attr_path: corpus.attr_path.clone(),
        landmark_path: Some(corpus.landmark_path.clone()),
        crop: CropMode::Center148,
        train_ids,
        test_ids,
        seed: 0,
        out_side,
    }
}

/// Write a narrow randomly initialized loss-network archive and load it.
pub fn narrow_loss_net(dir: &Path, taps: &[&str], seed: u64) -> LossNetwork {
    let path = dir.join("vgg.bin");
    random_vgg19_archive(&[4, 6, 8, 8, 8], seed).save(&path).unwrap();
    let tags: Vec<String> = taps.iter().map(|s| s.to_string()).collect();
    dfcvae::loss_network::load_loss_network(&path, &tags).unwrap()
}

fn random_conv(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Conv2d {
    let mut c = Conv2d::new(in_ch, out_ch, 3, 1, Padding::Zeros(1));
    let fan = (in_ch * 9) as f64;
    c.weight.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal) / fan.sqrt());
    c.bias.mapv_inplace(|_| 0.01 * rng.sample::<f64, _>(StandardNormal));
    c
}

/// Minimal two-conv frozen feature extractor for gradient oracles.
pub fn stand_in_loss_net(seed: u64) -> LossNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        LossLayer::Conv {
            name: "conv1_1".into(),
            conv: random_conv(3, 4, &mut rng),
        },
        LossLayer::Relu {
            tag: "relu1_1".into(),
        },
        LossLayer::MaxPool,
        LossLayer::Conv {
            name: "conv2_1".into(),
            conv: random_conv(4, 6, &mut rng),
        },
        LossLayer::Relu {
            tag: "relu2_1".into(),
        },
    ];
    let pre = Preprocessing {
        input_scale: 1.0,
        mean: [0.5, 0.5, 0.5],
        channel_order: dfcvae::loss_network::ChannelOrder::Rgb,
    };
    LossNetwork::new(layers, pre, &["relu1_1".to_string(), "relu2_1".to_string()]).unwrap()
}

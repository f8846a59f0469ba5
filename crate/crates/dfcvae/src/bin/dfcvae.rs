use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dfcvae::attribute_classifier::{evaluate, train_all, SvmHyperparams};
use dfcvae::config::RunConfig;
use dfcvae::core_model::{decode, encode_eval, load_checkpoint, Checkpoint, Mode};
use dfcvae::data_pipeline::{
    bilinear_resize, center_crop_box, crop, decode_image, parse_attribute_file, AttributeTable,
    DatasetSpec,
};
use dfcvae::error::{Error, Result};
use dfcvae::grid::save_grid;
use dfcvae::latent_toolkit::{
    apply_attribute, attribute_vector, export_embedding_inputs, interpolate,
    pearson_correlation, AttributeVector,
};
use dfcvae::loss_network::load_loss_network;
use dfcvae::trainer::fit;

#[derive(Parser)]
#[command(name = "dfcvae", about = "Deep feature consistent VAE", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a prepared face dataset.
    Train {
        /// Key-value config file (`section.key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with the input images.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Attribute annotation file.
        #[arg(long)]
        attr: Option<PathBuf>,
        /// Landmark annotation file.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Loss network weight archive (falls back to $DFCVAE_WEIGHTS).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Loss variant: dfc123, dfc345 or pixel.
        #[arg(long)]
        mode: Option<String>,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Extra `section.key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Reconstruct images through the model; writes a grid with the
    /// originals on the top row and reconstructions below.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image files.
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode random latent draws into an image grid.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear interpolation between two latent points.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image path or `seed:N` for a random latent.
        #[arg(long)]
        left: String,
        #[arg(long)]
        right: String,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute an attribute vector from annotated images.
    AttrVector {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        attr_file: PathBuf,
        /// Attribute name from the annotation header.
        #[arg(long)]
        attribute: String,
        /// Cap on images per side (positive/negative).
        #[arg(long, default_value_t = 1000)]
        n_per_side: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Walk a latent point along a stored attribute vector.
    AttrApply {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        attr_vec: PathBuf,
        /// Image path or `seed:N`.
        #[arg(long)]
        source: String,
        /// Inclusive range `start:end:step`.
        #[arg(long, default_value = "0:1:0.1")]
        alpha_range: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise Pearson correlation between stored attribute vectors.
    AttrCorr {
        /// Attribute vector archives.
        vectors: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export latent means plus thumbnails for embedding visualization.
    EmbedExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        attr_file: PathBuf,
        #[arg(long, default_value_t = 1600)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train linear attribute classifiers on latents and report accuracy.
    PredictAttrs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        attr_file: PathBuf,
        /// Images held out for evaluation (taken from the end of the sorted
        /// id list).
        #[arg(long, default_value_t = 20000)]
        n_test: usize,
        #[arg(long, default_value_t = 1e-4)]
        lambda: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Accuracy report CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            attr,
            landmarks,
            weights,
            mode,
            out,
            resume,
            sets,
        } => cmd_train(config, data, attr, landmarks, weights, mode, out, resume, sets),
        Command::Reconstruct { checkpoint, images, out } => {
            cmd_reconstruct(checkpoint, images, out)
        }
        Command::Sample { checkpoint, n, cols, seed, out } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let imgs = dfcvae::core_model::sample_images(&ckpt.decoder, n, seed)?;
            save_grid(&imgs, cols, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Interpolate { checkpoint, left, right, steps, out } => {
            if steps < 2 {
                return Err(Error::config("steps must be >= 2"));
            }
            let ckpt = load_checkpoint(checkpoint)?;
            let zl = resolve_latent(&left, &ckpt)?;
            let zr = resolve_latent(&right, &ckpt)?;
            let alphas: Vec<f64> =
                (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
            let zs = interpolate(&zl, &zr, &alphas)?;
            let imgs = decode_latents(&ckpt, &zs)?;
            save_grid(&imgs, steps, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::AttrVector {
            checkpoint,
            data,
            attr_file,
            attribute,
            n_per_side,
            out,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let table = parse_attribute_file(&attr_file)?;
            let mut pos = table.ids_with(&attribute, true)?;
            let mut neg = table.ids_with(&attribute, false)?;
            pos.truncate(n_per_side);
            neg.truncate(n_per_side);
            let spec = simple_spec(data, attr_file, ckpt.model_config.image_side);
            let v = attribute_vector(&ckpt.encoder, &pos, &neg, &spec, &attribute)?;
            v.save(&out)?;
            println!(
                "wrote {} ({} positive, {} negative)",
                out.display(),
                v.n_pos,
                v.n_neg
            );
            Ok(())
        }
        Command::AttrApply { checkpoint, attr_vec, source, alpha_range, out } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let attr = AttributeVector::load(attr_vec)?;
            let z = resolve_latent(&source, &ckpt)?;
            let alphas = parse_alpha_range(&alpha_range)?;
            let zs = apply_attribute(&z, &attr, &alphas)?;
            let imgs = decode_latents(&ckpt, &zs)?;
            save_grid(&imgs, zs.len(), &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::AttrCorr { vectors, out } => {
            let attrs = vectors
                .iter()
                .map(AttributeVector::load)
                .collect::<Result<Vec<_>>>()?;
            let m = pearson_correlation(&attrs)?;
            std::fs::write(&out, m.to_csv())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::EmbedExport { checkpoint, data, attr_file, n, out } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let table = parse_attribute_file(&attr_file)?;
            let mut ids: Vec<String> = table.rows.keys().cloned().collect();
            ids.sort();
            ids.truncate(n);
            let spec = simple_spec(data, attr_file, ckpt.model_config.image_side);
            export_embedding_inputs(&ckpt.encoder, &ids, &spec, &out)?;
            println!("wrote {} entries to {}", ids.len(), out.display());
            Ok(())
        }
        Command::PredictAttrs {
            checkpoint,
            data,
            attr_file,
            n_test,
            lambda,
            epochs,
            seed,
            out,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let table = parse_attribute_file(&attr_file)?;
            let ids: Vec<String> = table.rows.keys().cloned().collect();
            let (train_ids, test_ids) = DatasetSpec::split_last_n(ids, n_test);
            if train_ids.is_empty() || test_ids.is_empty() {
                return Err(Error::config(
                    "both splits must be nonempty; lower --n-test",
                ));
            }
            let mut spec = simple_spec(data, attr_file, ckpt.model_config.image_side);
            spec.train_ids = train_ids;
            spec.test_ids = test_ids;
            let hyper = SvmHyperparams { lambda, epochs, seed };
            let classifiers = train_all(&ckpt.encoder, &spec, &table, &hyper)?;
            let report = evaluate(&classifiers, &ckpt.encoder, &spec, &table)?;
            std::fs::write(&out, report.to_csv())?;
            println!("average accuracy: {:.2}%", report.average);
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    attr: Option<PathBuf>,
    landmarks: Option<PathBuf>,
    weights: Option<PathBuf>,
    mode: Option<String>,
    out: PathBuf,
    resume: Option<PathBuf>,
    sets: Vec<String>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(p) = &data {
        cfg.set("data.image_dir", &p.to_string_lossy())?;
    }
    if let Some(p) = &attr {
        cfg.set("data.attr_path", &p.to_string_lossy())?;
    }
    if let Some(p) = &landmarks {
        cfg.set("data.landmark_path", &p.to_string_lossy())?;
    }
    if let Some(m) = &mode {
        match m.as_str() {
            "dfc123" => {
                cfg.set("loss.mode", "dfc")?;
                cfg.set("loss.taps", "relu1_1,relu2_1,relu3_1")?;
            }
            "dfc345" => {
                cfg.set("loss.mode", "dfc")?;
                cfg.set("loss.taps", "relu3_1,relu4_1,relu5_1")?;
            }
            "pixel" => cfg.set("loss.mode", "pixel")?,
            other => {
                return Err(Error::config(format!(
                    "unknown mode `{other}` (expected dfc123, dfc345 or pixel)"
                )))
            }
        }
    }

    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;

    let image_dir = cfg
        .path("data.image_dir")
        .ok_or_else(|| Error::config("image directory not set (--data or data.image_dir)"))?;
    let attr_path = cfg
        .path("data.attr_path")
        .ok_or_else(|| Error::config("attribute file not set (--attr or data.attr_path)"))?;
    let table = parse_attribute_file(&attr_path)?;
    let (train_ids, test_ids) = dataset_split(&table, &cfg)?;
    let spec = DatasetSpec {
        image_dir,
        attr_path,
        landmark_path: cfg.path("data.landmark_path"),
        crop: cfg.crop_mode()?,
        train_ids,
        test_ids,
        seed: train_cfg.seed,
        out_side: model_cfg.image_side,
    };
    spec.validate()?;

    let net = match train_cfg.loss.mode {
        dfcvae::losses::LossMode::Pixel => None,
        dfcvae::losses::LossMode::Dfc => {
            let path = weights
                .or_else(|| cfg.path("loss_network.weights"))
                .or_else(|| std::env::var("DFCVAE_WEIGHTS").ok().map(PathBuf::from))
                .ok_or_else(|| {
                    Error::config(
                        "loss network weights not set (--weights, loss_network.weights or $DFCVAE_WEIGHTS)",
                    )
                })?;
            Some(load_loss_network(path, &train_cfg.loss.tap_tags)?)
        }
    };

    let resume_ckpt = match resume {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let ckpt = fit(&model_cfg, &train_cfg, &spec, net.as_ref(), &out, resume_ckpt)?;
    let snap = ckpt.trainer_state.as_ref().expect("fit returns trainer state");
    println!(
        "finished epoch {} at step {}; artifacts in {}",
        snap.epoch,
        snap.step,
        out.display()
    );
    Ok(())
}

fn cmd_reconstruct(checkpoint: PathBuf, images: Vec<PathBuf>, out: PathBuf) -> Result<()> {
    if images.is_empty() {
        return Err(Error::config("no input images given"));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let side = ckpt.model_config.image_side;
    let n = images.len();
    let mut batch = Array4::<f64>::zeros((n, 3, side, side));
    for (i, path) in images.iter().enumerate() {
        batch
            .slice_mut(s![i, .., .., ..])
            .assign(&load_square_image(path, side)?);
    }
    let codes = encode_eval(&ckpt.encoder, &batch)?;
    let zs: Vec<Array1<f64>> = codes.into_iter().map(|c| c.mu).collect();
    let recon = decode_latents(&ckpt, &zs)?;
    let mut sheet = Array4::<f64>::zeros((2 * n, 3, side, side));
    for i in 0..n {
        sheet
            .slice_mut(s![i, .., .., ..])
            .assign(&batch.slice(s![i, .., .., ..]));
        sheet
            .slice_mut(s![n + i, .., .., ..])
            .assign(&recon.slice(s![i, .., .., ..]));
    }
    save_grid(&sheet, n, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Center-crop to a square and resize to the model's input side.
fn load_square_image(path: &PathBuf, side: usize) -> Result<Array3<f64>> {
    let img = decode_image(path)?;
    let (_, h, w) = img.dim();
    let (y0, y1, x0, x1) = center_crop_box(h, w, h.min(w));
    Ok(bilinear_resize(&crop(&img, y0, y1, x0, x1), side))
}

/// `seed:N` draws a standard normal latent; anything else is an image path
/// that is encoded to its latent mean.
fn resolve_latent(source: &str, ckpt: &Checkpoint) -> Result<Array1<f64>> {
    if let Some(s) = source.strip_prefix("seed:") {
        let seed: u64 = s
            .parse()
            .map_err(|_| Error::config(format!("bad seed in `{source}`")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = ckpt.decoder.latent_dim();
        Ok(Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal)))
    } else {
        let img = load_square_image(&PathBuf::from(source), ckpt.model_config.image_side)?;
        let batch = img.insert_axis(Axis(0));
        let codes = encode_eval(&ckpt.encoder, &batch)?;
        Ok(codes.into_iter().next().expect("one code per image").mu)
    }
}

fn decode_latents(ckpt: &Checkpoint, zs: &[Array1<f64>]) -> Result<Array4<f64>> {
    let dim = ckpt.decoder.latent_dim();
    let mut z = Array2::<f64>::zeros((zs.len(), dim));
    for (i, v) in zs.iter().enumerate() {
        z.row_mut(i).assign(v);
    }
    decode(&ckpt.decoder, &z, Mode::Eval)
}

fn parse_alpha_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::config(format!(
            "alpha range must be start:end:step, got `{spec}`"
        )));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::config(format!("bad number `{p}` in alpha range")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if step <= 0.0 || end < start {
        return Err(Error::config("alpha range needs end >= start and step > 0"));
    }
    let mut out = Vec::new();
    let n = ((end - start) / step + 1e-9).floor() as usize;
    for i in 0..=n {
        out.push(start + i as f64 * step);
    }
    Ok(out)
}

fn simple_spec(image_dir: PathBuf, attr_path: PathBuf, out_side: usize) -> DatasetSpec {
    DatasetSpec {
        image_dir,
        attr_path,
        landmark_path: None,
        crop: dfcvae::data_pipeline::CropMode::Center148,
        train_ids: Vec::new(),
        test_ids: Vec::new(),
        seed: 0,
        out_side,
    }
}

fn dataset_split(table: &AttributeTable, cfg: &RunConfig) -> Result<(Vec<String>, Vec<String>)> {
    if let Some(part) = cfg.path("data.partition_path") {
        let text = std::fs::read_to_string(part)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let id = it.next().unwrap().to_string();
            let split: u8 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: "expected `image_id split`".into(),
                })?;
            if split == 2 {
                test.push(id);
            } else {
                train.push(id);
            }
        }
        Ok((train, test))
    } else {
        let ids: Vec<String> = table.rows.keys().cloned().collect();
        Ok(DatasetSpec::split_last_n(ids, cfg.n_test()?))
    }
}

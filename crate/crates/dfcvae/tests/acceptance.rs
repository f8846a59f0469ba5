//! End-to-end acceptance suite. Run with `--nocapture` to see one line per
//! criterion; the test fails if any criterion fails.

mod common;

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dfcvae::attribute_classifier::{accuracy_percent, train_linear_svm, SvmHyperparams};
use dfcvae::core_model::{
    decode, encode_eval, init_params, load_checkpoint, save_checkpoint, visit_trainable_mut,
    Checkpoint, DecoderParams, EncoderParams, Mode, ModelConfig,
};
use dfcvae::data_pipeline::{
    load_and_preprocess, parse_attribute_file, parse_attribute_text, parse_landmark_text,
};
use dfcvae::error::Error;
use dfcvae::latent_toolkit::{
    attribute_vector_from_latents, interpolate, pearson_correlation, AttributeVector,
};
use dfcvae::loss_network::{FeatureMap, LossLayer, LossNetwork};
use dfcvae::losses::{
    feature_layer_loss, kl_loss, pixel_loss, total_loss, total_loss_with_grad, LossConfig,
    LossMode,
};
use dfcvae::trainer::{lr_schedule, train_step, TrainConfig, TrainState};

type CriterionResult = Result<String, String>;

#[test]
fn acceptance() {
    let criteria: Vec<(u32, &str, fn() -> CriterionResult)> = vec![
        (1, "gradient oracle", criterion_01_gradient_oracle),
        (2, "kl oracle", criterion_02_kl_oracle),
        (3, "feature loss unit values", criterion_03_feature_loss_units),
        (4, "lr schedule", criterion_04_lr_schedule),
        (5, "overfit convergence", criterion_05_overfit),
        (6, "mode separation", criterion_06_mode_separation),
        (7, "frozen loss network", criterion_07_frozen_network),
        (8, "latent algebra", criterion_08_latent_algebra),
        (9, "linear classifier", criterion_09_linear_classifier),
        (10, "checkpoint round-trip", criterion_10_checkpoint_roundtrip),
        (11, "parser corpus", criterion_11_parser_corpus),
    ];
    let mut failures = 0;
    for (num, name, f) in criteria {
        match f() {
            Ok(detail) => println!("criterion {num:>2} ({name}): PASS - {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {num:>2} ({name}): FAIL - {detail}");
            }
        }
    }
    assert_eq!(failures, 0, "{failures} acceptance criteria failed");
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient oracle
// ---------------------------------------------------------------------------

fn tiny_model() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        image_side: 8,
        encoder_channels: vec![4, 8],
        decoder_channels: vec![8, 4],
        ..ModelConfig::default()
    }
}

fn eval_total(
    enc: &EncoderParams,
    dec: &DecoderParams,
    x: &Array4<f64>,
    eps: &Array2<f64>,
    net: Option<&LossNetwork>,
    cfg: &LossConfig,
) -> f64 {
    let (mu, logvar, _) = enc.forward(x, Mode::Train).unwrap();
    let z = &mu + &(logvar.mapv(|lv| (lv / 2.0).exp()) * eps);
    let (xbar, _) = dec.forward(&z, Mode::Train).unwrap();
    total_loss(x, &xbar, &mu, &logvar, net, cfg).unwrap().total
}

fn analytic_grads(
    enc: &EncoderParams,
    dec: &DecoderParams,
    x: &Array4<f64>,
    eps: &Array2<f64>,
    net: Option<&LossNetwork>,
    cfg: &LossConfig,
) -> dfcvae::core_model::GradMap {
    let (mu, logvar, enc_cache) = enc.forward(x, Mode::Train).unwrap();
    let sigma = logvar.mapv(|lv| (lv / 2.0).exp());
    let z = &mu + &(&sigma * eps);
    let (xbar, dec_cache) = dec.forward(&z, Mode::Train).unwrap();
    let (_bd, dxbar, dmu_kl, dlogvar_kl) =
        total_loss_with_grad(x, &xbar, &mu, &logvar, net, cfg).unwrap();
    let (dec_grads, dz) = dec.backward(&dec_cache, &dxbar);
    let dmu = &dmu_kl + &dz;
    let dlogvar = &dlogvar_kl + &(&dz * eps * &sigma / 2.0);
    let mut grads = enc.backward(&enc_cache, &dmu, &dlogvar);
    grads.extend(dec_grads);
    grads
}

fn check_mode_grads(cfg: &LossConfig, net: Option<&LossNetwork>, n_params: usize) -> Result<usize, String> {
    let mc = tiny_model();
    let (mut enc, mut dec) = init_params(&mc, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Array4::from_shape_simple_fn((2, 3, 8, 8), || rng.random_range(0.0..1.0));
    let eps = Array2::from_shape_simple_fn((2, 4), || rng.sample::<f64, _>(StandardNormal));

    let grads = analytic_grads(&enc, &dec, &x, &eps, net, cfg);
    let mut pool: Vec<(String, usize)> = Vec::new();
    visit_trainable_mut(&mut enc, &mut dec, |name, view| {
        pool.push((name.to_string(), view.len()));
    });
    let total_slots: usize = pool.iter().map(|(_, l)| l).sum();
    let mut picks = Vec::new();
    for _ in 0..n_params {
        let mut slot = rng.random_range(0..total_slots);
        for (name, len) in &pool {
            if slot < *len {
                picks.push((name.clone(), slot));
                break;
            }
            slot -= len;
        }
    }

    let h = 1e-5;
    let mut checked = 0usize;
    for (name, idx) in picks {
        let analytic = grads[name.as_str()].as_slice().unwrap()[idx];
        fn bump(
            enc: &mut EncoderParams,
            dec: &mut DecoderParams,
            name: &str,
            idx: usize,
            delta: f64,
        ) {
            visit_trainable_mut(enc, dec, |n, mut view| {
                if n == name {
                    view.as_slice_mut().unwrap()[idx] += delta;
                }
            });
        }
        bump(&mut enc, &mut dec, &name, idx, h);
        let plus = eval_total(&enc, &dec, &x, &eps, net, cfg);
        bump(&mut enc, &mut dec, &name, idx, -2.0 * h);
        let minus = eval_total(&enc, &dec, &x, &eps, net, cfg);
        bump(&mut enc, &mut dec, &name, idx, h);
        let fd = (plus - minus) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
        if rel >= 1e-4 {
            return Err(format!(
                "{name}[{idx}]: analytic {analytic:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
            ));
        }
        checked += 1;
    }
    Ok(checked)
}

fn criterion_01_gradient_oracle() -> CriterionResult {
    let net = common::stand_in_loss_net(5);
    let dfc = LossConfig {
        alpha: 1.0,
        beta: 0.5,
        mode: LossMode::Dfc,
        tap_tags: vec!["relu1_1".into(), "relu2_1".into()],
    };
    let pixel = LossConfig {
        alpha: 1.0,
        beta: 0.5,
        mode: LossMode::Pixel,
        tap_tags: vec![],
    };
    let a = check_mode_grads(&dfc, Some(&net), 120)?;
    let b = check_mode_grads(&pixel, None, 120)?;
    Ok(format!(
        "{} parameters matched finite differences (rel err < 1e-4)",
        a + b
    ))
}

// ---------------------------------------------------------------------------
// 2. KL Monte-Carlo oracle
// ---------------------------------------------------------------------------

fn criterion_02_kl_oracle() -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 8;
    let n_mc = 100_000;
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let mu = Array2::from_shape_simple_fn((1, dim), || rng.random_range(-1.5..1.5));
        let logvar = Array2::from_shape_simple_fn((1, dim), || rng.random_range(-1.0..1.0));
        let closed = kl_loss(&mu, &logvar).unwrap();
        let sigma = logvar.mapv(|lv| (lv / 2.0).exp());
        let mut acc = 0.0;
        for _ in 0..n_mc {
            let mut s = 0.0;
            for d in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                let z = mu[[0, d]] + sigma[[0, d]] * e;
                s += 0.5 * (z * z - e * e - logvar[[0, d]]);
            }
            acc += s;
        }
        let mc = acc / n_mc as f64;
        let rel = (mc - closed).abs() / closed.abs();
        worst = worst.max(rel);
        if rel >= 0.01 {
            return Err(format!(
                "case {case}: closed {closed:.5} vs mc {mc:.5} (rel {rel:.4})"
            ));
        }
    }
    let zero = kl_loss(&Array2::zeros((4, dim)), &Array2::zeros((4, dim))).unwrap();
    if zero != 0.0 {
        return Err(format!("kl at prior is {zero}, expected exactly 0"));
    }
    for _ in 0..1000 {
        let mu = Array2::from_shape_simple_fn((1, dim), || rng.sample::<f64, _>(StandardNormal));
        let lv = Array2::from_shape_simple_fn((1, dim), || rng.random_range(-3.0..3.0));
        let v = kl_loss(&mu, &lv).unwrap();
        if v < -1e-9 {
            return Err(format!("negative kl {v}"));
        }
    }
    Ok(format!(
        "20 Monte-Carlo cases within 1% (worst {worst:.4}); exact zero at prior; nonnegative on 1000 draws"
    ))
}

// ---------------------------------------------------------------------------
// 3. Feature loss unit values
// ---------------------------------------------------------------------------

fn criterion_03_feature_loss_units() -> CriterionResult {
    for shape in [(2, 3, 4, 5), (1, 7, 2, 2)] {
        let ones = FeatureMap {
            layer_tag: "relu1_1".into(),
            data: Array4::ones(shape),
        };
        let zeros = FeatureMap {
            layer_tag: "relu1_1".into(),
            data: Array4::zeros(shape),
        };
        let same = feature_layer_loss(&ones, &ones).unwrap();
        if same != 0.0 {
            return Err(format!("identical maps gave {same}, expected exactly 0"));
        }
        let half = feature_layer_loss(&ones, &zeros).unwrap();
        if half != 0.5 {
            return Err(format!(
                "ones vs zeros at {shape:?} gave {half}, expected exactly 0.5"
            ));
        }
    }
    Ok("0 for identical maps and 0.5 for ones-vs-zeros at two shapes, exact".into())
}

// ---------------------------------------------------------------------------
// 4. Learning rate schedule
// ---------------------------------------------------------------------------

fn criterion_04_lr_schedule() -> CriterionResult {
    let expect = [5e-4, 2.5e-4, 1.25e-4, 6.25e-5, 3.125e-5];
    for (epoch, &want) in (1u64..=5).zip(expect.iter()) {
        let got = lr_schedule(5e-4, 0.5, epoch);
        if got != want {
            return Err(format!("epoch {epoch}: lr {got} != {want}"));
        }
    }
    Ok("lr over 5 epochs equals 5e-4 * {1, 1/2, 1/4, 1/8, 1/16} exactly".into())
}

// ---------------------------------------------------------------------------
// 5 + 6. Overfit convergence and mode separation
// ---------------------------------------------------------------------------

// Step count is reduced to keep this CPU-only suite fast; the halving
// requirement is unchanged.
const OVERFIT_STEPS: usize = 120;

fn overfit_model() -> ModelConfig {
    ModelConfig {
        latent_dim: 16,
        image_side: 32,
        encoder_channels: vec![8, 16],
        decoder_channels: vec![16, 8],
        ..ModelConfig::default()
    }
}

struct OverfitRun {
    enc: EncoderParams,
    dec: DecoderParams,
    first_total: f64,
    final_total: f64,
}

fn overfit_batch() -> Array4<f64> {
    let corpus = common::shared_corpus();
    let spec = common::spec_for(corpus, corpus.ids[..16].to_vec(), vec![], 32);
    load_and_preprocess(&spec, &corpus.ids[..16]).unwrap()
}

fn run_overfit(loss: LossConfig, net: Option<&LossNetwork>, batch: &Array4<f64>) -> OverfitRun {
    let mc = overfit_model();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        lr0: 2e-3,
        loss,
        seed: 3,
        checkpoint_every: 0,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (mut enc, mut dec) = init_params(&mc, cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg);
    let mut first_total = f64::NAN;
    let mut final_total = f64::NAN;
    for step in 0..OVERFIT_STEPS {
        let bd = train_step(&mut state, &mut enc, &mut dec, batch, net, &cfg).unwrap();
        if step == 0 {
            first_total = bd.total;
        }
        final_total = bd.total;
    }
    OverfitRun {
        enc,
        dec,
        first_total,
        final_total,
    }
}

fn dfc_loss_config() -> LossConfig {
    LossConfig {
        alpha: 1.0,
        beta: 0.5,
        mode: LossMode::Dfc,
        tap_tags: vec!["relu1_1".into(), "relu2_1".into(), "relu3_1".into()],
    }
}

fn pixel_loss_config() -> LossConfig {
    LossConfig {
        alpha: 1.0,
        beta: 0.5,
        mode: LossMode::Pixel,
        tap_tags: vec![],
    }
}

fn criterion_05_overfit() -> CriterionResult {
    let dir = tempfile::tempdir().unwrap();
    let net = common::narrow_loss_net(dir.path(), &["relu1_1", "relu2_1", "relu3_1"], 9);
    let batch = overfit_batch();
    let run_a = run_overfit(dfc_loss_config(), Some(&net), &batch);
    if !(run_a.final_total < 0.5 * run_a.first_total) {
        return Err(format!(
            "total went {:.6} -> {:.6} over {OVERFIT_STEPS} steps, needed < 0.5x",
            run_a.first_total, run_a.final_total
        ));
    }
    let run_b = run_overfit(dfc_loss_config(), Some(&net), &batch);
    if run_a.final_total.to_bits() != run_b.final_total.to_bits() {
        return Err(format!(
            "not deterministic: {} vs {}",
            run_a.final_total, run_b.final_total
        ));
    }
    Ok(format!(
        "total {:.5} -> {:.5} over {OVERFIT_STEPS} steps ({}x), bitwise repeatable",
        run_a.first_total,
        run_a.final_total,
        run_a.final_total / run_a.first_total
    ))
}

fn eval_recon(run: &OverfitRun, batch: &Array4<f64>) -> Array4<f64> {
    let codes = encode_eval(&run.enc, batch).unwrap();
    let dim = codes[0].mu.len();
    let mut z = Array2::<f64>::zeros((codes.len(), dim));
    for (i, c) in codes.iter().enumerate() {
        z.row_mut(i).assign(&c.mu);
    }
    decode(&run.dec, &z, Mode::Eval).unwrap()
}

fn feat_distance(net: &LossNetwork, x: &Array4<f64>, xbar: &Array4<f64>) -> f64 {
    let fx = net.extract_features(x).unwrap();
    let fy = net.extract_features(xbar).unwrap();
    fx.maps
        .iter()
        .map(|(tag, a)| feature_layer_loss(a, &fy.maps[tag]).unwrap())
        .sum()
}

fn criterion_06_mode_separation() -> CriterionResult {
    let dir = tempfile::tempdir().unwrap();
    let net = common::narrow_loss_net(dir.path(), &["relu1_1", "relu2_1", "relu3_1"], 9);
    let batch = overfit_batch();
    let dfc_run = run_overfit(dfc_loss_config(), Some(&net), &batch);
    let pix_run = run_overfit(pixel_loss_config(), None, &batch);

    let dfc_recon = eval_recon(&dfc_run, &batch);
    let pix_recon = eval_recon(&pix_run, &batch);

    let dfc_mse = pixel_loss(&batch, &dfc_recon).unwrap();
    let pix_mse = pixel_loss(&batch, &pix_recon).unwrap();
    let dfc_feat = feat_distance(&net, &batch, &dfc_recon);
    let pix_feat = feat_distance(&net, &batch, &pix_recon);

    if !(pix_mse < dfc_mse) {
        return Err(format!(
            "pixel-mode MSE {pix_mse:.6} not below dfc-mode MSE {dfc_mse:.6}"
        ));
    }
    if !(dfc_feat < pix_feat) {
        return Err(format!(
            "dfc-mode feature distance {dfc_feat:.6} not below pixel-mode {pix_feat:.6}"
        ));
    }
    Ok(format!(
        "pixel MSE {pix_mse:.5} < {dfc_mse:.5}; feature distance {dfc_feat:.5} < {pix_feat:.5}"
    ))
}

// ---------------------------------------------------------------------------
// 7. Frozen loss network
// ---------------------------------------------------------------------------

fn net_weight_bits(net: &LossNetwork) -> Vec<u64> {
    let mut bits = Vec::new();
    for layer in &net.layers {
        if let LossLayer::Conv { conv, .. } = layer {
            bits.extend(conv.weight.iter().map(|v| v.to_bits()));
            bits.extend(conv.bias.iter().map(|v| v.to_bits()));
        }
    }
    bits
}

fn criterion_07_frozen_network() -> CriterionResult {
    let dir = tempfile::tempdir().unwrap();
    let net = common::narrow_loss_net(dir.path(), &["relu1_1"], 13);
    let before = net_weight_bits(&net);

    let mc = tiny_model();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        loss: LossConfig {
            alpha: 1.0,
            beta: 0.5,
            mode: LossMode::Dfc,
            tap_tags: vec!["relu1_1".into()],
        },
        seed: 4,
        checkpoint_every: 0,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (mut enc, mut dec) = init_params(&mc, 1).unwrap();
    let mut state = TrainState::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = Array4::from_shape_simple_fn((2, 3, 8, 8), || rng.random_range(0.0..1.0));
    for _ in 0..100 {
        train_step(&mut state, &mut enc, &mut dec, &batch, Some(&net), &cfg).unwrap();
    }
    let after = net_weight_bits(&net);
    if before != after {
        return Err("loss network weights changed during training".into());
    }
    Ok(format!(
        "{} weight values bitwise unchanged after 100 steps",
        before.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. Latent algebra
// ---------------------------------------------------------------------------

fn criterion_08_latent_algebra() -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dim = 100;
    let zl = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
    let zr = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
    let path = interpolate(&zl, &zr, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
    if path[0] != zl || path[4] != zr {
        return Err("interpolation endpoints are not exact".into());
    }

    let mut d = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
    d *= 10.0 / d.dot(&d).sqrt();
    let n = 1000;
    let mut pos = Array2::<f64>::zeros((n, dim));
    let mut neg = Array2::<f64>::zeros((n, dim));
    for i in 0..n {
        for j in 0..dim {
            pos[[i, j]] = d[j] + rng.sample::<f64, _>(StandardNormal);
            neg[[i, j]] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let av = attribute_vector_from_latents(&pos, &neg, "planted").unwrap();
    let err = (&av.vector - &d).dot(&(&av.vector - &d)).sqrt() / d.dot(&d).sqrt();
    if err >= 0.10 {
        return Err(format!("planted direction relative error {err:.4} >= 0.10"));
    }

    let attrs: Vec<AttributeVector> = (0..4)
        .map(|k| AttributeVector {
            name: format!("a{k}"),
            vector: Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal)),
            n_pos: 1,
            n_neg: 1,
        })
        .collect();
    let m = pearson_correlation(&attrs).unwrap();
    for i in 0..4 {
        if (m.values[[i, i]] - 1.0).abs() > 1e-12 {
            return Err(format!("diagonal [{i}] = {} not 1", m.values[[i, i]]));
        }
        for j in 0..4 {
            if (m.values[[i, j]] - m.values[[j, i]]).abs() > 1e-12 {
                return Err(format!("matrix not symmetric at ({i},{j})"));
            }
        }
    }
    Ok(format!(
        "endpoints exact; planted direction recovered (rel err {err:.4}); Pearson matrix symmetric, unit diagonal"
    ))
}

// ---------------------------------------------------------------------------
// 9. Linear classifier
// ---------------------------------------------------------------------------

fn criterion_09_linear_classifier() -> CriterionResult {
    // Toy set: two Gaussian blobs 10 sigma apart.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, dim) = (200usize, 10usize);
    let mut feats = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y: i8 = if i % 2 == 0 { 1 } else { -1 };
        for j in 0..dim {
            feats[[i, j]] = 5.0 * y as f64 + rng.sample::<f64, _>(StandardNormal);
        }
        labels.push(y);
    }
    let hyper = SvmHyperparams::default();
    let clf = train_linear_svm(&feats, &labels, &hyper, "toy").unwrap();
    let preds: Vec<i8> = (0..n).map(|i| clf.predict(&feats.row(i))).collect();
    let toy_acc = accuracy_percent(&preds, &labels);
    if toy_acc != 100.0 {
        return Err(format!("toy accuracy {toy_acc}% != 100%"));
    }

    // Face-corpus smoke property with a briefly trained encoder.
    let corpus = common::shared_corpus();
    let table = parse_attribute_file(&corpus.attr_path).unwrap();
    let train_ids = corpus.ids[..500].to_vec();
    let test_ids = corpus.ids[500..700].to_vec();
    let spec = common::spec_for(corpus, train_ids.clone(), test_ids.clone(), 32);

    let mc = overfit_model();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        lr0: 1e-3,
        loss: pixel_loss_config(),
        seed: 23,
        checkpoint_every: 0,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (mut enc, mut dec) = init_params(&mc, cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg);
    for chunk in 0..2 {
        for b in 0..16 {
            let ids = &train_ids[(chunk * 16 + b) * 16 % 480..][..16];
            let batch = load_and_preprocess(&spec, ids).unwrap();
            train_step(&mut state, &mut enc, &mut dec, &batch, None, &cfg).unwrap();
        }
    }
    drop(dec);

    let train_mu = dfcvae::latent_toolkit::encode_mus(&enc, &train_ids, &spec).unwrap();
    let test_mu = dfcvae::latent_toolkit::encode_mus(&enc, &test_ids, &spec).unwrap();

    let mut details = Vec::new();
    for name in ["Eyeglasses", "Male"] {
        let idx = table.attribute_index(name).unwrap();
        let ytr: Vec<i8> = train_ids.iter().map(|id| table.rows[id][idx]).collect();
        let yte: Vec<i8> = test_ids.iter().map(|id| table.rows[id][idx]).collect();
        let clf = train_linear_svm(&train_mu, &ytr, &hyper, name).unwrap();
        let preds: Vec<i8> = (0..test_ids.len())
            .map(|i| clf.predict(&test_mu.row(i)))
            .collect();
        let acc = accuracy_percent(&preds, &yte);
        let pos = yte.iter().filter(|&&v| v == 1).count();
        let majority = pos.max(yte.len() - pos) as f64 / yte.len() as f64 * 100.0;
        if acc < majority + 2.0 {
            return Err(format!(
                "{name}: accuracy {acc:.1}% not above majority {majority:.1}% + 2"
            ));
        }
        details.push(format!("{name} {acc:.1}% (majority {majority:.1}%)"));
    }
    Ok(format!("toy 100%; {}", details.join(", ")))
}

// ---------------------------------------------------------------------------
// 10. Checkpoint round-trip
// ---------------------------------------------------------------------------

fn criterion_10_checkpoint_roundtrip() -> CriterionResult {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let mc = overfit_model();
    let (enc, dec) = init_params(&mc, 77).unwrap();
    let ckpt = Checkpoint {
        model_config: mc.clone(),
        encoder: enc,
        decoder: dec,
        trainer_state: None,
        loss_config_snapshot: dfc_loss_config(),
        format_version: dfcvae::core_model::CHECKPOINT_FORMAT_VERSION,
    };
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = Array4::from_shape_simple_fn((3, 3, 32, 32), || rng.random_range(0.0..1.0));
    let a = encode_eval(&ckpt.encoder, &batch).unwrap();
    let b = encode_eval(&loaded.encoder, &batch).unwrap();
    for (ca, cb) in a.iter().zip(b.iter()) {
        if ca.mu != cb.mu || ca.logvar != cb.logvar {
            return Err("encoder outputs differ after round-trip".into());
        }
    }
    let z = Array2::from_shape_simple_fn((3, mc.latent_dim), || rng.sample::<f64, _>(StandardNormal));
    let ya = decode(&ckpt.decoder, &z, Mode::Eval).unwrap();
    let yb = decode(&loaded.decoder, &z, Mode::Eval).unwrap();
    if ya
        .iter()
        .zip(yb.iter())
        .any(|(p, q)| p.to_bits() != q.to_bits())
    {
        return Err("decoder outputs differ after round-trip".into());
    }
    Ok("eval-mode encoder and decoder outputs bitwise identical after save/load".into())
}

// ---------------------------------------------------------------------------
// 11. Parser corpus
// ---------------------------------------------------------------------------

fn expect_parse_error<T: std::fmt::Debug>(
    what: &str,
    r: dfcvae::Result<T>,
    want_line: usize,
) -> Result<(), String> {
    match r {
        Err(Error::Parse { line, .. }) if line == want_line => Ok(()),
        Err(Error::Parse { line, msg }) => Err(format!(
            "{what}: parse error at line {line} ({msg}), expected line {want_line}"
        )),
        other => Err(format!("{what}: expected a parse error, got {other:?}")),
    }
}

fn criterion_11_parser_corpus() -> CriterionResult {
    let corpus = common::shared_corpus();
    let table = parse_attribute_file(&corpus.attr_path).unwrap();
    if table.rows.len() != common::CORPUS_SIZE || table.attribute_names.len() != 40 {
        return Err("well-formed attribute file parsed with wrong counts".into());
    }
    let lm = dfcvae::data_pipeline::parse_landmark_file(&corpus.landmark_path).unwrap();
    if lm.rows.len() != common::CORPUS_SIZE {
        return Err("well-formed landmark file parsed with wrong counts".into());
    }

    let names = common::attr_names().join(" ");
    let ones = vec!["1"; 40].join(" ");
    let short = vec!["1"; 39].join(" ");

    // 1. row with 39 values
    let t = format!("1\n{names}\nimg1.png {short}\n");
    expect_parse_error("short row", parse_attribute_text(&t), 3)?;
    // 2. value outside {-1, 1}
    let bad = format!("{} 0", vec!["1"; 39].join(" "));
    let t = format!("1\n{names}\nimg1.png {bad}\n");
    expect_parse_error("zero value", parse_attribute_text(&t), 3)?;
    // 3. non-numeric count line
    let t = format!("lots\n{names}\nimg1.png {ones}\n");
    expect_parse_error("bad count", parse_attribute_text(&t), 1)?;
    // 4. header with 39 names
    let short_header = common::attr_names()[..39].join(" ");
    let t = format!("1\n{short_header}\nimg1.png {ones}\n");
    expect_parse_error("short header", parse_attribute_text(&t), 2)?;
    // 5. landmark row with 9 coordinates
    let t = "1\nheader\nimg1.png 1 2 3 4 5 6 7 8 9\n";
    expect_parse_error("short landmarks", parse_landmark_text(t), 3)?;

    Ok("well-formed fixtures parse; 5 malformed variants rejected with line numbers".into())
}

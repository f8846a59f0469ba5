//! Adam-based training loop with per-epoch learning-rate halving.

use indexmap::IndexMap;
use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::core_model::{
    reparameterize_batch, save_checkpoint, visit_trainable_mut, Checkpoint, DecoderParams,
    EncoderParams, GradMap, Mode, ModelConfig, TrainerSnapshot, CHECKPOINT_FORMAT_VERSION,
};
use crate::data_pipeline::{batches, DatasetSpec};
use crate::error::{Error, Result};
use crate::loss_network::LossNetwork;
use crate::losses::{total_loss_with_grad, LossBreakdown, LossConfig, LossMode};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative decay applied per epoch after the first.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            lr0: 5e-4,
            lr_decay: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr0 must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay must lie in (0, 1]"));
        }
        self.loss.validate()
    }
}

/// lr(epoch) = lr0 * decay^(epoch - 1), epochs 1-based.
pub fn lr_schedule(lr0: f64, decay: f64, epoch: u64) -> f64 {
    lr0 * decay.powi(epoch.saturating_sub(1) as i32)
}

pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub adam_m: IndexMap<String, ArrayD<f64>>,
    pub adam_v: IndexMap<String, ArrayD<f64>>,
    pub rng: ChaCha8Rng,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            epoch: 1,
            lr: cfg.lr0,
            adam_m: IndexMap::new(),
            adam_v: IndexMap::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            rng_seed: cfg.seed,
        }
    }

    pub fn from_snapshot(s: &TrainerSnapshot) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(s.rng_seed);
        rng.set_word_pos(s.rng_word_pos);
        TrainState {
            step: s.step,
            epoch: s.epoch,
            lr: s.lr,
            adam_m: s.adam_m.clone(),
            adam_v: s.adam_v.clone(),
            rng,
            rng_seed: s.rng_seed,
        }
    }

    pub fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            step: self.step,
            epoch: self.epoch,
            lr: self.lr,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng.get_word_pos(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
        }
    }
}

fn global_grad_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn adam_update(
    state: &mut TrainState,
    enc: &mut EncoderParams,
    dec: &mut DecoderParams,
    grads: &GradMap,
    cfg: &TrainConfig,
) {
    let t = (state.step + 1) as i32;
    let (b1, b2, eps, lr) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, state.lr);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let adam_m = &mut state.adam_m;
    let adam_v = &mut state.adam_v;
    visit_trainable_mut(enc, dec, |name, mut param| {
        let g = match grads.get(name) {
            Some(g) => g,
            None => return,
        };
        let m = adam_m
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        let v = adam_v
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        for ((p, &m), &v) in param.iter_mut().zip(m.iter()).zip(v.iter()) {
            let mhat = m / bc1;
            let vhat = v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    });
}

/// One optimization step: forward, backward, Adam update of encoder and
/// decoder. The loss network is read-only throughout. If the global gradient
/// norm is exactly zero the update (including batch-norm running stats) is
/// skipped, leaving parameters bitwise unchanged.
pub fn train_step(
    state: &mut TrainState,
    enc: &mut EncoderParams,
    dec: &mut DecoderParams,
    batch: &Array4<f64>,
    net: Option<&LossNetwork>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (mu, logvar, enc_cache) = enc.forward(batch, Mode::Train)?;
    let (z, eps) = reparameterize_batch(&mu, &logvar, &mut state.rng);
    let (xbar, dec_cache) = dec.forward(&z, Mode::Train)?;
    let (bd, dxbar, dmu_kl, dlogvar_kl) =
        total_loss_with_grad(batch, &xbar, &mu, &logvar, net, &cfg.loss)?;
    if !bd.total.is_finite() {
        return Err(Error::other(format!(
            "non-finite loss at step {}: kl={} rec_total={} total={}",
            state.step, bd.kl, bd.rec_total, bd.total
        )));
    }
    let (dec_grads, dz) = dec.backward(&dec_cache, &dxbar);
    // z = mu + exp(logvar/2) * eps
    let dmu = &dmu_kl + &dz;
    let sigma = logvar.mapv(|lv| (lv / 2.0).exp());
    let dlogvar = &dlogvar_kl + &(&dz * &eps * &sigma / 2.0);
    let enc_grads = enc.backward(&enc_cache, &dmu, &dlogvar);

    let mut grads = enc_grads;
    grads.extend(dec_grads);
    if global_grad_norm(&grads) == 0.0 {
        state.step += 1;
        return Ok(bd);
    }
    adam_update(state, enc, dec, &grads, cfg);
    enc.apply_bn_stats(&enc_cache);
    dec.apply_bn_stats(&dec_cache);
    state.step += 1;
    Ok(bd)
}

/// Gradients of one train-mode forward/backward without applying an update.
/// Used by tests that inspect gradient structure.
pub fn compute_grads(
    state: &mut TrainState,
    enc: &EncoderParams,
    dec: &DecoderParams,
    batch: &Array4<f64>,
    net: Option<&LossNetwork>,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, GradMap)> {
    let (mu, logvar, enc_cache) = enc.forward(batch, Mode::Train)?;
    let (z, eps) = reparameterize_batch(&mu, &logvar, &mut state.rng);
    let (xbar, dec_cache) = dec.forward(&z, Mode::Train)?;
    let (bd, dxbar, dmu_kl, dlogvar_kl) =
        total_loss_with_grad(batch, &xbar, &mu, &logvar, net, loss_cfg)?;
    let (dec_grads, dz) = dec.backward(&dec_cache, &dxbar);
    let dmu = &dmu_kl + &dz;
    let sigma = logvar.mapv(|lv| (lv / 2.0).exp());
    let dlogvar = &dlogvar_kl + &(&dz * &eps * &sigma / 2.0);
    let mut grads = enc.backward(&enc_cache, &dmu, &dlogvar);
    grads.extend(dec_grads);
    Ok((bd, grads))
}

pub fn metrics_header(loss_cfg: &LossConfig) -> String {
    let recs: Vec<String> = match loss_cfg.mode {
        LossMode::Pixel => vec!["rec_pixel".into()],
        LossMode::Dfc => loss_cfg.tap_tags.iter().map(|t| format!("rec_{t}")).collect(),
    };
    format!("step,kl,{},rec_total,total,lr", recs.join(","))
}

pub fn metrics_row(step: u64, bd: &LossBreakdown, lr: f64) -> String {
    let mut parts = vec![step.to_string(), format!("{:?}", bd.kl)];
    for v in bd.per_layer_rec.values() {
        parts.push(format!("{v:?}"));
    }
    parts.push(format!("{:?}", bd.rec_total));
    parts.push(format!("{:?}", bd.total));
    parts.push(format!("{lr:?}"));
    parts.join(",")
}

/// Full training run: `epochs` passes over the train split, periodic
/// checkpoints and a metrics CSV in `out_dir`. Pass `resume` to continue an
/// interrupted run from its latest checkpoint.
pub fn fit(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    spec: &DatasetSpec,
    net: Option<&LossNetwork>,
    out_dir: impl AsRef<Path>,
    resume: Option<Checkpoint>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    model_cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;

    let (mut enc, mut dec, mut state) = match resume {
        Some(ckpt) => {
            let snap = ckpt
                .trainer_state
                .ok_or_else(|| Error::config("checkpoint has no trainer state to resume from"))?;
            (ckpt.encoder, ckpt.decoder, TrainState::from_snapshot(&snap))
        }
        None => {
            let (e, d) = crate::core_model::init_params(model_cfg, cfg.seed)?;
            (e, d, TrainState::new(cfg))
        }
    };

    let metrics_path = out_dir.join("metrics.csv");
    let fresh = !metrics_path.exists();
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    if fresh {
        writeln!(metrics, "{}", metrics_header(&cfg.loss))?;
    }

    let start_epoch = state.epoch;
    for epoch in start_epoch..=cfg.epochs {
        state.epoch = epoch;
        state.lr = lr_schedule(cfg.lr0, cfg.lr_decay, epoch);
        for item in batches(spec, cfg.batch_size, cfg.seed.wrapping_add(epoch))? {
            let (batch, _ids) = item?;
            let bd = train_step(&mut state, &mut enc, &mut dec, &batch, net, cfg)?;
            if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
                writeln!(metrics, "{}", metrics_row(state.step, &bd, state.lr))?;
            }
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                let ckpt = make_checkpoint(model_cfg, &enc, &dec, &state, &cfg.loss);
                save_checkpoint(&ckpt, out_dir.join("latest.bin"))?;
            }
        }
        // Mark the epoch complete so a resume restarts at the next one.
        state.epoch = epoch + 1;
    }
    state.epoch = cfg.epochs;
    let ckpt = make_checkpoint(model_cfg, &enc, &dec, &state, &cfg.loss);
    save_checkpoint(&ckpt, out_dir.join("latest.bin"))?;
    Ok(ckpt)
}

pub fn make_checkpoint(
    model_cfg: &ModelConfig,
    enc: &EncoderParams,
    dec: &DecoderParams,
    state: &TrainState,
    loss_cfg: &LossConfig,
) -> Checkpoint {
    Checkpoint {
        model_config: model_cfg.clone(),
        encoder: enc.clone(),
        decoder: dec.clone(),
        trainer_state: Some(state.snapshot()),
        loss_config_snapshot: loss_cfg.clone(),
        format_version: CHECKPOINT_FORMAT_VERSION,
    }
}

//! Image-tower warm-up, AdamW, the learning-rate schedule and the SSRL loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use numcore::{NumError, Rng, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{RunConfig, WarmupMode};
use crate::data::{Dataset, Split};
use crate::embed::tokenize_cloud;
use crate::error::{Error, Result};
use crate::geom::{PatchGroups, PointCloud};
use crate::model::{image_cls, Model};
use crate::nn::{Ctx, GradPolicy};
use crate::objectives::{total_loss, AngleTarget, LossBundle, SsrlBatch};
use crate::params::{Owner, ParamStore};
use crate::render::{make_triplet, render_cloud, ImageRaster};

const STREAM_WARMUP: u64 = 11;
const STREAM_SSRL: u64 = 12;

/// Linear warmup to `base` over `warmup` steps, then cosine decay reaching
/// zero at `total`.
pub fn lr_at(step: usize, base: f64, warmup: usize, total: usize) -> Result<f64> {
    if total <= warmup {
        return Err(Error::Config(format!("schedule needs total steps ({total}) > warmup steps ({warmup})")));
    }
    if step < warmup {
        return Ok(base * (step + 1) as f64 / warmup as f64);
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments for every parameter that has been updated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

/// Global L2 norm of all gradients; rescales them to `max_norm` when above it.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> (f64, bool) {
    let sq: f64 = grads.values().flatten().map(|&g| (g as f64) * (g as f64)).sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut().flatten() {
            *g = (*g as f64 * s) as f32;
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Only trainable parameters present in `grads` are touched; a parameter the
/// loss never reached keeps its value and moments.
pub fn optim_step(
    store: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            eprintln!("optim_step: non-finite gradient for {name}, step aborted");
            return Err(Error::Num(NumError::NonFinite { op: "optim_step" }));
        }
        let p = store.get(name)?;
        if p.tensor.numel() != g.len() {
            return Err(Error::Argument(format!("gradient of {name} has wrong length")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - hp.beta1.powi(t), 1.0 - hp.beta2.powi(t));
    for (name, g) in grads {
        let p = store.get_mut(name)?;
        if !p.trainable {
            continue;
        }
        let shape = p.tensor.shape().to_vec();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            let mut wi = *w as f64;
            wi -= lr * hp.weight_decay * wi;
            let mi = hp.beta1 * md[i] as f64 + (1.0 - hp.beta1) * gi;
            let vi = hp.beta2 * vd[i] as f64 + (1.0 - hp.beta2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            wi -= lr * (mi / c1) / ((vi / c2).sqrt() + hp.eps);
            *w = wi as f32;
        }
    }
    Ok(())
}

/// Cross-entropy of `[B, C]` logits against integer labels.
pub fn cross_entropy<T: Scalar>(ctx: &mut Ctx<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = ctx.g.log_softmax(logits, 1)?;
    let hit = ctx.g.pick(lp, labels.to_vec())?;
    let m = ctx.g.mean(hit)?;
    Ok(ctx.g.scale(m, -T::one())?)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub mode: WarmupMode,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

fn image_logits(model: &Model<f32>, images: &[&ImageRaster]) -> Result<Vec<Vec<f32>>> {
    let mut ctx = model.ctx(GradPolicy::None);
    let cls = image_cls(&mut ctx, &model.cfg, images)?;
    let logits = ctx.linear(cls, "image.head")?;
    let t = ctx.g.value(logits);
    Ok(t.data().chunks(t.last_dim()).map(|r| r.to_vec()).collect())
}

fn render_accuracy(model: &Model<f32>, clouds: &[&PointCloud], rng: &Rng, run: &RunConfig) -> Result<f64> {
    let mut correct = 0;
    for (bi, chunk) in clouds.chunks(64).enumerate() {
        let imgs: Vec<ImageRaster> = chunk
            .iter()
            .enumerate()
            .map(|(j, c)| render_cloud(c, rng.split((bi * 64 + j) as u64).uniform() * 360.0, &run.render))
            .collect();
        let refs: Vec<&ImageRaster> = imgs.iter().collect();
        let logits = image_logits(model, &refs)?;
        correct += logits.iter().zip(chunk).filter(|(l, c)| Some(argmax(l)) == c.label).count();
    }
    Ok(correct as f64 / clouds.len().max(1) as f64)
}

/// Supervised training of the shared + image parameters on rendered views,
/// followed by freezing them. `RandomFrozen` only freezes.
pub fn warmup_image_tower(model: &mut Model<f32>, data: &Dataset, run: &RunConfig) -> Result<WarmupReport> {
    let wc = &run.warmup;
    if wc.mode == WarmupMode::RandomFrozen || wc.epochs == 0 {
        model.set_ssrl_trainable();
        return Ok(WarmupReport { mode: wc.mode, epochs: 0, final_loss: None, train_accuracy: None, test_accuracy: None });
    }
    model.params.set_trainable_where(|o| matches!(o, Owner::Shared | Owner::Image));
    let root = Rng::new(run.train.seed).split(STREAM_WARMUP);
    let train: Vec<&PointCloud> = data.split(Split::Train).into_iter().map(|s| &s.cloud).collect();
    let views = wc.views.max(1);
    let per_epoch = train.len() * views;
    let total = wc.epochs * per_epoch.div_ceil(wc.batch.max(1));
    let hp = AdamW { beta1: run.train.beta1, beta2: run.train.beta2, eps: run.train.adam_eps, weight_decay: wc.weight_decay };
    let mut state = OptimState::default();
    let mut step = 0;
    let mut last = None;
    for epoch in 0..wc.epochs {
        let mut erng = root.split(epoch as u64);
        let mut order: Vec<usize> = (0..per_epoch).collect();
        erng.shuffle(&mut order);
        for chunk in batches(&order, wc.batch) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let c = train[k % train.len()];
                let yaw = erng.split(k as u64).uniform() * 360.0;
                imgs.push(render_cloud(c, yaw, &run.render));
                labels.push(c.label.ok_or_else(|| Error::Data("unlabeled training cloud".into()))?);
            }
            let refs: Vec<&ImageRaster> = imgs.iter().collect();
            let lr = lr_at(step, wc.lr, wc.warmup_steps.min(total - 1), total)?;
            let mut ctx = model.ctx(GradPolicy::Trainable);
            let cls = image_cls(&mut ctx, &model.cfg, &refs)?;
            let logits = ctx.linear(cls, "image.head")?;
            let loss = cross_entropy(&mut ctx, logits, &labels)?;
            ctx.g.backward(loss)?;
            last = Some(ctx.g.item(loss) as f64);
            let mut grads = ctx.param_grads();
            drop(ctx);
            clip_global_norm(&mut grads, run.train.clip_norm);
            optim_step(&mut model.params, &grads, &mut state, lr, &hp)?;
            step += 1;
        }
    }
    let eval_rng = root.split(u64::MAX);
    let test: Vec<&PointCloud> = data.split(Split::Test).into_iter().map(|s| &s.cloud).collect();
    let train_accuracy = Some(render_accuracy(model, &train, &eval_rng.split(0), run)?);
    let test_accuracy = Some(render_accuracy(model, &test, &eval_rng.split(1), run)?);
    model.set_ssrl_trainable();
    Ok(WarmupReport { mode: wc.mode, epochs: wc.epochs, final_loss: last, train_accuracy, test_accuracy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub l_cm: Option<f64>,
    pub l_im: Option<f64>,
    pub l_reg: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Tokenized SSRL inputs for a list of clouds, deterministic in
/// `(stream, sample id)`.
pub struct PreparedBatch {
    pub original: Vec<PatchGroups>,
    pub rotated: Vec<PatchGroups>,
    pub images: Vec<ImageRaster>,
    pub targets: Vec<AngleTarget>,
}

pub fn prepare_batch(clouds: &[&PointCloud], ids: &[u64], stream: &Rng, run: &RunConfig) -> Result<PreparedBatch> {
    let mut b = PreparedBatch { original: vec![], rotated: vec![], images: vec![], targets: vec![] };
    for (c, &id) in clouds.iter().zip(ids) {
        let mut rng = stream.split(id);
        let t = make_triplet(c, &mut rng, &run.render);
        b.original.push(tokenize_cloud(&t.original, &run.model, &mut rng)?);
        b.rotated.push(tokenize_cloud(&t.rotated, &run.model, &mut rng)?);
        b.targets.push(AngleTarget::new(t.theta_deg, run.model.angle_bins));
        b.images.push(t.image);
    }
    Ok(b)
}

impl PreparedBatch {
    pub fn as_batch<'a>(&'a self, images: &'a [&'a ImageRaster]) -> SsrlBatch<'a> {
        SsrlBatch { original: &self.original, rotated: &self.rotated, images, targets: &self.targets }
    }
}

pub fn steps_per_epoch(run: &RunConfig, train_len: usize) -> usize {
    train_len.div_ceil(run.train.batch)
}

#[derive(Default)]
pub struct PretrainOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop (and checkpoint) after this many completed epochs.
    pub stop_after: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub warmup: Option<WarmupReport>,
    pub frozen_hash_start: String,
    pub clipped_steps: usize,
}

fn write_jsonl(path: &Path, rows: &[TraceRow], append: bool) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(path)?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Warm-up (unless resuming), then SSRL epochs over shuffled training
/// triplets with AdamW on the point path and heads.
pub fn pretrain(run: &RunConfig, data: &Dataset, opts: PretrainOptions) -> Result<PretrainOutcome> {
    run.validate()?;
    let train: Vec<&PointCloud> = data.split(Split::Train).into_iter().map(|s| &s.cloud).collect();
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let tc = &run.train;
    let spe = steps_per_epoch(run, train.len());
    let total_steps = tc.epochs * spe;
    let hp = AdamW { beta1: tc.beta1, beta2: tc.beta2, eps: tc.adam_eps, weight_decay: tc.weight_decay };
    let ssrl_root = Rng::new(tc.seed).split(STREAM_SSRL);

    let resuming = opts.resume.is_some();
    let (mut model, mut state, mut meta, warmup) = match opts.resume {
        Some(ck) => {
            ck.check_model(&run.model)?;
            let state = ck.optim.unwrap_or_default();
            (ck.model, state, ck.meta, None)
        }
        None => {
            let mut model = Model::new(run.model.clone());
            model.init(tc.seed)?;
            let report = warmup_image_tower(&mut model, data, run)?;
            let meta = CheckpointMeta {
                run: Some(run.clone()),
                epoch: 0,
                step: 0,
                rng: Some(ssrl_root.state()),
                frozen_hash: model.params.frozen_tower_hash(),
                warmup_accuracy: report.test_accuracy,
                head: None,
            };
            (model, OptimState::default(), meta, Some(report))
        }
    };
    model.set_ssrl_trainable();
    let frozen_hash_start = model.params.frozen_tower_hash();
    if frozen_hash_start != meta.frozen_hash {
        return Err(Error::Checkpoint("frozen tower hash does not match the checkpoint record".into()));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), run.to_toml_string())?;
        if let Some(w) = &warmup {
            std::fs::write(dir.join("warmup.json"), serde_json::to_string_pretty(w)? + "\n")?;
        }
        if !resuming {
            write_jsonl(&dir.join("trace.jsonl"), &[], false)?;
        }
    }

    let stop = opts.stop_after.unwrap_or(tc.epochs).min(tc.epochs);
    let mut trace = Vec::new();
    let mut clipped_steps = 0;
    for epoch in meta.epoch..stop {
        let epoch_stream = ssrl_root.split(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        epoch_stream.split(u64::MAX).shuffle(&mut order);
        let mut epoch_rows = Vec::with_capacity(spe);
        for chunk in batches(&order, tc.batch) {
            let clouds: Vec<&PointCloud> = chunk.iter().map(|&i| train[i]).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let prepared = prepare_batch(&clouds, &ids, &epoch_stream, run)?;
            let refs: Vec<&ImageRaster> = prepared.images.iter().collect();
            let lr = lr_at(meta.step, tc.lr, tc.warmup_steps, total_steps)?;
            let mut ctx = model.ctx(GradPolicy::Trainable);
            let out = total_loss(&mut ctx, &model.cfg, &prepared.as_batch(&refs), &tc.losses, tc.trace)?;
            let bundle: LossBundle = out.bundle;
            let mut grads = BTreeMap::new();
            if ctx.g.requires_grad(out.total) {
                ctx.g.backward(out.total)?;
                grads = ctx.param_grads();
            }
            drop(ctx);
            let (grad_norm, clipped) = clip_global_norm(&mut grads, tc.clip_norm);
            clipped_steps += clipped as usize;
            optim_step(&mut model.params, &grads, &mut state, lr, &hp)?;
            epoch_rows.push(TraceRow {
                step: meta.step,
                epoch,
                l_cm: bundle.l_cm,
                l_im: bundle.l_im,
                l_reg: bundle.l_reg,
                total: bundle.total,
                lr,
                grad_norm,
                clipped,
            });
            meta.step += 1;
        }
        meta.epoch = epoch + 1;
        if opts.verbose {
            let n = epoch_rows.len() as f64;
            let mean = |f: fn(&TraceRow) -> Option<f64>| {
                let v: Vec<f64> = epoch_rows.iter().filter_map(f).collect();
                if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
            };
            eprintln!(
                "epoch {:>3}  total {:.4}  cm {:.4}  im {:.4}  reg {:.4}  clipped {}/{}",
                epoch + 1,
                epoch_rows.iter().map(|r| r.total).sum::<f64>() / n,
                mean(|r| r.l_cm),
                mean(|r| r.l_im),
                mean(|r| r.l_reg),
                epoch_rows.iter().filter(|r| r.clipped).count(),
                epoch_rows.len()
            );
        }
        if let Some(dir) = &opts.out_dir {
            write_jsonl(&dir.join("trace.jsonl"), &epoch_rows, true)?;
            if tc.ckpt_every > 0 && meta.epoch % tc.ckpt_every == 0 && meta.epoch < stop {
                let ck = Checkpoint { model: model.clone(), meta: meta.clone(), optim: Some(state.clone()) };
                ck.save(&dir.join(format!("ckpt_epoch{:04}.pcxp", meta.epoch)))?;
            }
        }
        trace.extend(epoch_rows);
    }
    if model.params.frozen_tower_hash() != frozen_hash_start {
        return Err(Error::Usage("frozen tower changed during pre-training".into()));
    }
    let checkpoint = Checkpoint { model, meta, optim: Some(state) };
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join("checkpoint.pcxp"))?;
    }
    Ok(PretrainOutcome { checkpoint, trace, warmup, frozen_hash_start, clipped_steps })
}

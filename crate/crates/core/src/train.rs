//! Sample preparation, AdamW and the training loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{crop_resize, person_box, CropTransform, SyntheticScene};
use crate::error::{config, Error, Result};
use crate::model::{stack_hwc, ForwardOptions, ModelConfig, PoseModel};
use crate::numerics::NdArray;
use crate::params::{apply_buffer_updates, Ctx, ParamId, ParamKind, ParamStore};
use crate::rng;

/// One cropped person: the model input and its normalized ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]`.
    pub patch: NdArray,
    /// `[K, 2]` in `[0, 1]` box coordinates.
    pub gt: NdArray,
    pub transform: CropTransform,
    pub image_id: u64,
    /// Index of the instance within its scene.
    pub instance: usize,
}

/// Crops every annotated instance to `input_size`, growing its box by `padding`.
pub fn prepare_samples(scenes: &[SyntheticScene], input_size: (usize, usize), padding: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in scenes {
        for (n, inst) in s.instances.iter().enumerate() {
            let gt: Vec<[f64; 2]> = (0..inst.num_keypoints()).map(|k| inst.xy(k)).collect();
            let bbox = person_box(inst.bbox, padding);
            let (patch, norm, transform) = crop_resize(&s.image, &gt, bbox, input_size)?;
            let (h, w) = input_size;
            let hwc = NdArray::from_fn([h, w, 3], |i| patch.data()[(i % 3) * h * w + i / 3]);
            let gt = NdArray::new([norm.len(), 2], norm.iter().flatten().copied().collect())?;
            out.push(Sample { patch: hwc, gt, transform, image_id: s.index, instance: n });
        }
    }
    Ok(out)
}

/// Batch inputs `[B, H, W, 3]` and targets `[B, K, 2]`.
pub fn batch_of(samples: &[&Sample]) -> Result<(NdArray, NdArray)> {
    let patches: Vec<&NdArray> = samples.iter().map(|s| &s.patch).collect();
    let gts: Vec<&NdArray> = samples.iter().map(|s| &s.gt).collect();
    Ok((stack_hwc(&patches)?, stack_hwc(&gts)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of `steps` at which the step size is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Evaluate the mean keypoint error every this many epochs (and at the end).
    pub val_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            lr_milestones: vec![0.6, 0.85],
            lr_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 0.0,
            val_every: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.val_every == 0 {
            return config("steps, batch_size and val_every must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return config("lr, lr_decay and eps must be positive; weight_decay and grad_clip non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config("Adam betas must lie in [0, 1)");
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) || self.lr_milestones.windows(2).any(|w| w[1] <= w[0]) {
            return config("lr milestones must increase within [0, 1]");
        }
        Ok(())
    }

    pub fn milestone_steps(&self) -> Vec<usize> {
        self.lr_milestones.iter().map(|m| (m * self.steps as f64).floor() as usize).collect()
    }

    /// Step size for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestone_steps().iter().filter(|&&m| step >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Adam with decoupled weight decay on [`ParamKind::Weight`] entries.
/// Parameters without a gradient in a step are left untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Option<NdArray>>,
    v: Vec<Option<NdArray>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        Self { m: vec![None; store.len()], v: vec![None; store.len()], t: vec![0; store.len()] }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, NdArray)], lr: f64, cfg: &TrainConfig) {
        for (id, g) in grads {
            let i = store.ids().position(|p| p == *id).expect("known parameter");
            let entry = store.entry(*id);
            if entry.kind == ParamKind::Buffer {
                continue;
            }
            let decay = if entry.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
            let step = lr * entry.lr_scale;
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let m = self.m[i].get_or_insert_with(|| NdArray::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| NdArray::zeros(g.shape().to_vec()));
            let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
            let p = store.get_mut(*id);
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                *p -= step * (update + decay * *p);
            }
        }
    }
}

/// Mean `|dx| + |dy|` keypoint error in patch pixels.
pub fn mean_l1_px(model: &PoseModel, samples: &[Sample], proposal_noise: Option<(f64, u64)>, batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let (h, w) = model.input_size();
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, chunk) in samples.chunks(batch.max(1)).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = batch_of(&refs)?;
        let noise = proposal_noise.map(|(a, s)| (a, rng::derive_seed(s, c as u64)));
        let preds = model.predict(&x, noise)?;
        for (p, s) in preds.iter().zip(chunk) {
            for (m, g) in p.mu.data().chunks(2).zip(s.gt.data().chunks(2)) {
                total += (m[0] - g[0]).abs() * w as f64 + (m[1] - g[1]).abs() * h as f64;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Model, optimizer and step counter.
pub struct Trainer {
    pub model: PoseModel,
    pub cfg: TrainConfig,
    opt: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: PoseModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.store);
        Ok(Self { model, cfg, opt, step: 0 })
    }

    /// One optimizer step on `batch`; returns the loss.
    pub fn step_batch(&mut self, batch: &[&Sample], batch_seed: u64) -> Result<f64> {
        let (x, gt) = batch_of(batch)?;
        let (loss, grads, buffers) = {
            let ctx = Ctx::new(&self.model.store, true);
            let opts = ForwardOptions { noise_seed: Some(rng::derive_seed(batch_seed, 1)), proposal_noise: None };
            let out = self.model.forward(&ctx, &x, opts)?;
            let loss = self.model.loss(&ctx, &out, &gt)?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite { step: self.step, batch_seed });
            }
            let g = loss.backward()?;
            (value, ctx.param_grads(&g), ctx.take_buffer_updates())
        };
        let mut grads = grads;
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite { step: self.step, batch_seed });
        }
        if self.cfg.grad_clip > 0.0 {
            let norm = grads.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                let s = self.cfg.grad_clip / norm;
                for (_, g) in &mut grads {
                    *g = g.map(|v| v * s);
                }
            }
        }
        let lr = self.cfg.lr_at(self.step);
        self.opt.step(&mut self.model.store, &grads, lr, &self.cfg);
        apply_buffer_updates(&mut self.model.store, buffers)?;
        self.step += 1;
        Ok(loss)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: PoseModel,
    /// Every metrics record, in log order.
    pub log: Vec<serde_json::Value>,
    pub final_l1_px: f64,
}

fn append_line(path: &Path, v: &serde_json::Value) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(v)?)?;
    Ok(())
}

/// Trains from scratch. With `out_dir`, writes `metrics.jsonl` and
/// `checkpoint.qpc` (at every step-size milestone and at the end).
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    val: Option<&[Sample]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no training samples".into()));
    }
    cfg.validate()?;
    let model = PoseModel::new(model_cfg, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let val = val.unwrap_or(samples);
    let metrics = out_dir.map(|d| d.join("metrics.jsonl"));
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
        if let Some(m) = &metrics {
            if m.exists() {
                fs::remove_file(m)?;
            }
        }
    }
    let mut log = Vec::new();
    let record = |v: serde_json::Value, log: &mut Vec<serde_json::Value>| -> Result<()> {
        if let Some(m) = &metrics {
            append_line(m, &v)?;
        }
        log.push(v);
        Ok(())
    };
    record(json!({ "event": "config", "model": model_cfg, "train": cfg, "samples": samples.len() }), &mut log)?;

    let n = samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let milestones = cfg.milestone_steps();
    let save = |trainer: &Trainer, step: usize| -> Result<()> {
        if let Some(d) = out_dir {
            let meta = json!({ "model": model_cfg, "train": cfg, "step": step });
            trainer.model.to_checkpoint(meta).save(&d.join("checkpoint.qpc"))?;
        }
        Ok(())
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let mut epoch_loss = 0.0;
    let mut epoch_steps = 0;
    let mut final_l1 = f64::NAN;
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng::stream(cfg.seed, 0x5348_0000 + (step as u64 * n as u64) + cursor as u64));
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch_seed = rng::derive_seed(cfg.seed, step as u64);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let loss = match trainer.step_batch(&batch, batch_seed) {
            Ok(l) => l,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(d) = out_dir {
                    let dump = json!({ "step": step, "batch_seed": batch_seed, "batch_indices": idx });
                    fs::write(d.join("nonfinite.json"), serde_json::to_vec_pretty(&dump)?)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        epoch_loss += loss;
        epoch_steps += 1;
        let last = step + 1 == cfg.steps;
        if (step + 1) % steps_per_epoch == 0 || last {
            let mut v = json!({
                "event": "epoch",
                "epoch": epoch,
                "step": step + 1,
                "loss": epoch_loss / epoch_steps as f64,
                "lr": cfg.lr_at(step),
            });
            if (epoch + 1) % cfg.val_every == 0 || last {
                final_l1 = mean_l1_px(&trainer.model, val, None, 32)?;
                v["val_mean_l1_px"] = json!(final_l1);
            }
            record(v, &mut log)?;
            epoch += 1;
            epoch_loss = 0.0;
            epoch_steps = 0;
        }
        if milestones.contains(&(step + 1)) && !last {
            save(&trainer, step + 1)?;
        }
    }
    save(&trainer, cfg.steps)?;
    Ok(TrainOutcome { model: trainer.model, log, final_l1_px: final_l1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn samples(n: usize) -> Vec<Sample> {
        let scenes = synth_generate(3, n, &SynthConfig::default()).unwrap();
        prepare_samples(&scenes, (64, 64), 1.25).unwrap()
    }

    #[test]
    fn schedule_has_two_drops() {
        let cfg = TrainConfig { steps: 100, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(60) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(85) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn samples_keep_gt_inside_unit_box() {
        for s in samples(8) {
            assert!(s.gt.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.patch.shape(), &[64, 64, 3]);
        }
    }

    #[test]
    fn lambda_zero_leaves_decoder_untouched() {
        let mcfg = ModelConfig { lambda: 0.0, ..Default::default() };
        let tcfg = TrainConfig { steps: 3, batch_size: 2, ..Default::default() };
        let data = samples(4);
        let before = PoseModel::new(&mcfg, tcfg.seed).unwrap();
        let after = train(&mcfg, &tcfg, &data, None, None).unwrap().model;
        for id in before.store.ids() {
            let name = &before.store.entry(id).name;
            let same = before.store.get(id) == after.store.get(id);
            if name.starts_with("decoder.") || name.starts_with("flow.decoder") || name.starts_with("encoder.") {
                assert!(same, "{name} changed");
            }
            if name.starts_with("backbone.coarse_head") {
                assert!(!same, "{name} did not train");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mcfg = ModelConfig::default();
        let tcfg = TrainConfig { steps: 4, batch_size: 2, val_every: 1, ..Default::default() };
        let data = samples(4);
        let a = train(&mcfg, &tcfg, &data, None, None).unwrap();
        let b = train(&mcfg, &tcfg, &data, None, None).unwrap();
        assert_eq!(a.log, b.log);
    }
}

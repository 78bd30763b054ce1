//! Rate-distortion training, post-model training and code datasets.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Grads, Graph};
use crate::codec::CodecModel;
use crate::entropy::{EntropyConfig, EntropyModel};
use crate::error::{dim_err, Error, Result};
use crate::metrics::ms_ssim_loss_node;
use crate::params::{write_atomic, Bound, ParamSet};
use crate::quantizer::CodeBlock;
use crate::synth::{batch, random_crop};
use crate::tensor::Tensor;
use crate::transforms::{pad_replicate, TransformConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Mse,
    MsSsim,
}

/// All training knobs; see [`parse_config`] for the file format.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub distortion: Distortion,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_levels: usize,
    pub patience: usize,
    pub epoch_steps: usize,
    pub steps: usize,
    pub warmup: usize,
    pub patch: usize,
    pub batch: usize,
    pub width: usize,
    pub m: usize,
    pub levels: usize,
    pub components: usize,
    pub n_feat: usize,
    pub radius: usize,
    pub res_blocks: usize,
    pub nonlocal: bool,
    pub window: Option<usize>,
    pub code_crop: usize,
    pub post_steps: usize,
    pub post_lr: f64,
    pub post_batch: usize,
    pub heldout: f64,
    /// When false, quantizer centers stay at their initial uniform values.
    pub learn_centers: bool,
    /// When true, the rate term is the constant `log2 L` of uniform tables.
    pub uniform_rate: bool,
}

/// Default operating points (λ values for MSE on `[0, 1]` pixels).
pub const LAMBDA_GRID: [f64; 7] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            distortion: Distortion::Mse,
            lr: 1e-5,
            lr_decay: 0.1,
            lr_levels: 3,
            patience: 5,
            epoch_steps: 500,
            steps: 100_000,
            warmup: 2000,
            patch: 256,
            batch: 8,
            width: 192,
            m: 32,
            levels: 8,
            components: 3,
            n_feat: 3,
            radius: 2,
            res_blocks: 3,
            nonlocal: true,
            window: None,
            code_crop: 60,
            post_steps: 20_000,
            post_lr: 1e-4,
            post_batch: 8,
            heldout: 0.1,
            learn_centers: true,
            uniform_rate: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if self.patch == 0 || self.patch % 8 != 0 {
            return bad("patch must be a positive multiple of 8");
        }
        if self.distortion == Distortion::MsSsim && self.patch < crate::metrics::MS_SSIM_MIN_SIDE {
            return bad("ms-ssim needs patches of at least 16 pixels");
        }
        if self.batch == 0 || self.post_batch == 0 || self.epoch_steps == 0 {
            return bad("batch sizes and epoch_steps must be positive");
        }
        if !(self.lr > 0.0 && self.post_lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("learning rates must be positive and lr_decay in (0, 1)");
        }
        if self.lr_levels == 0 || self.patience == 0 {
            return bad("lr_levels and patience must be positive");
        }
        if !(0.0..1.0).contains(&self.heldout) {
            return bad("heldout must be in [0, 1)");
        }
        self.transform_config().validate()?;
        self.entropy_config().validate()
    }

    pub fn transform_config(&self) -> TransformConfig {
        TransformConfig::new(self.width, self.m)
    }

    pub fn entropy_config(&self) -> EntropyConfig {
        EntropyConfig {
            m: self.m,
            levels: self.levels,
            components: self.components,
            n_feat: self.n_feat,
            radius: self.radius,
            res_blocks: self.res_blocks,
            window: self.window,
            nonlocal: self.nonlocal,
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment. Unknown keys and
/// malformed values are errors. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, val) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (key, val) = (key.trim(), val.trim());
        let err = |what: &str| Error::Config(format!("line {}: {key} expects {what}, got `{val}`", n + 1));
        let f = || val.parse::<f64>().map_err(|_| err("a number"));
        let u = || val.parse::<usize>().map_err(|_| err("a non-negative integer"));
        let b = || match val {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(err("true or false")),
        };
        match key {
            "lambda" => c.lambda = f()?,
            "distortion" => {
                c.distortion = match val {
                    "mse" => Distortion::Mse,
                    "ms-ssim" | "msssim" => Distortion::MsSsim,
                    _ => return Err(err("mse or ms-ssim")),
                }
            }
            "lr" => c.lr = f()?,
            "lr_decay" => c.lr_decay = f()?,
            "lr_levels" => c.lr_levels = u()?,
            "patience" => c.patience = u()?,
            "epoch_steps" => c.epoch_steps = u()?,
            "steps" => c.steps = u()?,
            "warmup" => c.warmup = u()?,
            "patch" => c.patch = u()?,
            "batch" => c.batch = u()?,
            "width" => c.width = u()?,
            "m" => c.m = u()?,
            "levels" => c.levels = u()?,
            "components" => c.components = u()?,
            "n_feat" => c.n_feat = u()?,
            "radius" => c.radius = u()?,
            "res_blocks" => c.res_blocks = u()?,
            "nonlocal" => c.nonlocal = b()?,
            "window" => c.window = if val == "none" { None } else { Some(u()?) },
            "code_crop" => c.code_crop = u()?,
            "post_steps" => c.post_steps = u()?,
            "post_lr" => c.post_lr = f()?,
            "post_batch" => c.post_batch = u()?,
            "heldout" => c.heldout = f()?,
            "learn_centers" => c.learn_centers = b()?,
            "uniform_rate" => c.uniform_rate = b()?,
            _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1))),
        }
    }
    c.validate()?;
    Ok(c)
}

/// Step multiplier for the log proxy weights of the non-local block.
pub const PROXY_LR_SCALE: f64 = 30.0;

/// Adam with bias correction and a fixed per-tensor step multiplier.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    scale: Vec<f64>,
}

impl Adam {
    pub fn new(ps: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = ps.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let scale = ps
            .iter()
            .map(|(name, _)| if name.ends_with(".logw") { PROXY_LR_SCALE } else { 1.0 })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
            scale,
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, bound: &Bound, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, id) in ps.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = grads.get(bound.var(id)) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let lr = lr * self.scale[k];
            for (((w, &gi), mi), vi) in ps.get_mut(id).data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Plateau-driven step schedule: the rate drops by `decay` after
/// `patience` epochs without a new best loss, and training stops after a
/// plateau at the last level.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    base: f64,
    decay: f64,
    levels: usize,
    patience: usize,
    level: usize,
    best: f64,
    stale: usize,
}

impl LrSchedule {
    pub fn new(base: f64, decay: f64, levels: usize, patience: usize) -> Self {
        Self {
            base,
            decay,
            levels,
            patience,
            level: 0,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.lr, c.lr_decay, c.lr_levels, c.patience)
    }

    pub fn lr(&self) -> Option<f64> {
        (self.level < self.levels).then(|| self.base * self.decay.powi(self.level as i32))
    }

    /// Records one epoch loss; returns the rate for the next epoch or
    /// `None` once training should stop.
    pub fn observe(&mut self, loss: f64) -> Option<f64> {
        if self.level >= self.levels {
            return None;
        }
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.level += 1;
                self.stale = 0;
            }
        }
        self.lr()
    }
}

/// Learning rate after replaying `history` of epoch losses.
pub fn lr_schedule(history: &[f64], c: &TrainConfig) -> Option<f64> {
    let mut s = LrSchedule::from_config(c);
    let mut lr = s.lr();
    for &l in history {
        lr = s.observe(l);
    }
    lr
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub distortion: f64,
    /// Bits per code under the MoG model (0 during warmup).
    pub rate: f64,
    pub quant: f64,
    pub total: f64,
    pub lr: f64,
}

/// Optimizer state for joint training of a [`CodecModel`].
pub struct Trainer {
    pub model: CodecModel,
    pub cfg: TrainConfig,
    opt_ga: Adam,
    opt_gs: Adam,
    opt_q: Adam,
    opt_ge: Adam,
    step: usize,
    schedule: LrSchedule,
    lr: Option<f64>,
    epoch: Vec<f64>,
}

impl Trainer {
    pub fn new(model: CodecModel, cfg: TrainConfig) -> Self {
        Self {
            opt_ga: Adam::new(&model.analysis.params),
            opt_gs: Adam::new(&model.synthesis.params),
            opt_q: Adam::new(&model.quantizer.params),
            opt_ge: Adam::new(&model.entropy.params),
            schedule: LrSchedule::from_config(&cfg),
            lr: Some(cfg.lr),
            model,
            cfg,
            step: 0,
            epoch: Vec::new(),
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// `None` once the schedule has stopped training.
    pub fn lr(&self) -> Option<f64> {
        self.lr
    }

    /// One optimizer step on `L_D + λ·L_R + L_q` (rate term off during warmup).
    pub fn rd_step(&mut self, x: &Tensor) -> Result<StepReport> {
        let lr = self.lr.ok_or_else(|| Error::Usage("learning-rate schedule has finished".into()))?;
        let with_rate = self.step >= self.cfg.warmup;
        let model_rate = with_rate && !self.cfg.uniform_rate;
        let m = &self.model;
        let mut g = Graph::new();
        let pa = m.analysis.params.bind(&mut g, true);
        let psy = m.synthesis.params.bind(&mut g, true);
        let pq = m.quantizer.params.bind(&mut g, self.cfg.learn_centers);
        let pe = m.entropy.params.bind(&mut g, model_rate);
        let xv = g.constant(x.clone());
        let z = m.analysis.forward(&mut g, &pa, xv)?;
        let (st, lq, blocks) = m.quantizer.train_forward(&mut g, &pq, z)?;
        let xh = m.synthesis.forward(&mut g, &psy, st)?;
        let ld = match self.cfg.distortion {
            Distortion::Mse => {
                let d = g.sub(xh, xv)?;
                let sq = g.square(d);
                g.mean(sq)
            }
            Distortion::MsSsim => ms_ssim_loss_node(&mut g, xh, xv)?,
        };
        let mut total = g.add(ld, lq)?;
        let mut rate_v = None;
        if with_rate && self.cfg.uniform_rate {
            let bits = g.constant(Tensor::scalar((m.quantizer.levels() as f64).log2()));
            let weighted = g.scale(bits, self.cfg.lambda);
            total = g.add(total, weighted)?;
            rate_v = Some(bits);
        } else if with_rate {
            let centers = m.quantizer.all_centers();
            let bits = m.entropy.rate_bits(&mut g, &pe, st, &blocks, &centers)?;
            let codes = g.value(z).numel() as f64;
            let per_code = g.scale(bits, 1.0 / codes);
            let weighted = g.scale(per_code, self.cfg.lambda);
            total = g.add(total, weighted)?;
            rate_v = Some(per_code);
        }
        let report = StepReport {
            step: self.step,
            distortion: g.value(ld).item()?,
            rate: rate_v.map(|v| g.value(v).item()).transpose()?.unwrap_or(0.0),
            quant: g.value(lq).item()?,
            total: g.value(total).item()?,
            lr,
        };
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: L_D={} L_R={} L_q={}",
                self.step, report.distortion, report.rate, report.quant
            )));
        }
        let grads = g.backward(total)?;
        let m = &mut self.model;
        self.opt_ga.step(&mut m.analysis.params, &pa, &grads, lr);
        self.opt_gs.step(&mut m.synthesis.params, &psy, &grads, lr);
        if self.cfg.learn_centers {
            self.opt_q.step(&mut m.quantizer.params, &pq, &grads, lr);
        }
        if model_rate {
            self.opt_ge.step(&mut m.entropy.params, &pe, &grads, lr);
        }
        m.sync_centers()?;
        self.step += 1;
        if with_rate {
            self.epoch.push(report.total);
            if self.epoch.len() == self.cfg.epoch_steps {
                let mean = self.epoch.iter().sum::<f64>() / self.epoch.len() as f64;
                self.epoch.clear();
                self.lr = self.schedule.observe(mean);
                info!("epoch loss {mean:.6}, next lr {:?}", self.lr);
            }
        }
        Ok(report)
    }
}

/// Runs up to `cfg.steps` joint steps on random patches of `images`
/// (each `[1, 3, H, W]` with sides ≥ the patch size).
pub fn train(
    model: CodecModel,
    images: &[Tensor],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(&StepReport),
) -> Result<(CodecModel, Vec<StepReport>)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Usage("no training images".into()));
    }
    for im in images {
        let s = im.shape();
        if s[2] < cfg.patch || s[3] < cfg.patch {
            return dim_err(format!("image {}x{} smaller than patch {}", s[2], s[3], cfg.patch));
        }
    }
    let mut t = Trainer::new(model, cfg.clone());
    let mut log = Vec::new();
    while t.steps_done() < cfg.steps && t.lr().is_some() {
        let patches: Vec<Tensor> = (0..cfg.batch)
            .map(|_| random_crop(&images[rng.gen_range(0..images.len())], cfg.patch, rng))
            .collect();
        let r = t.rd_step(&batch(&patches))?;
        on_step(&r);
        log.push(r);
    }
    Ok((t.model, log))
}

/// Training log as CSV with columns `step,L_D,L_R,lr`.
pub fn metrics_csv(log: &[StepReport]) -> String {
    let mut s = String::from("step,L_D,L_R,lr\n");
    for r in log {
        let _ = writeln!(s, "{},{:.9e},{:.9e},{:e}", r.step, r.distortion, r.rate, r.lr);
    }
    s
}

pub const DATASET_MAGIC: &[u8; 4] = b"NLCD";

/// Code blocks extracted from images for post-model training.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeDataset {
    pub m: usize,
    pub levels: usize,
    pub blocks: Vec<CodeBlock>,
}

impl CodeDataset {
    pub fn new(m: usize, levels: usize, blocks: Vec<CodeBlock>) -> Result<Self> {
        for b in &blocks {
            if b.dims().0 != m || b.max_index() as usize >= levels {
                return Err(Error::Usage("code block does not fit the dataset's M and L".into()));
            }
        }
        Ok(Self { m, levels, blocks })
    }

    /// Layout: magic `NLCD`, version `u8`, `M` `u16`, `L` `u8`, count `u32`,
    /// then per block `H` `u16`, `W` `u16` and `M·H·W` index bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.push(1);
        out.extend_from_slice(&(self.m as u16).to_le_bytes());
        out.push(self.levels as u8);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            let (_, h, w) = b.dims();
            out.extend_from_slice(&(h as u16).to_le_bytes());
            out.extend_from_slice(&(w as u16).to_le_bytes());
            out.extend_from_slice(b.indices());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("code dataset: {m}"));
        if b.len() < 12 || &b[..4] != DATASET_MAGIC {
            return Err(fmt("bad magic"));
        }
        if b[4] != 1 {
            return Err(fmt("unsupported version"));
        }
        let m = u16::from_le_bytes([b[5], b[6]]) as usize;
        let levels = b[7] as usize;
        let count = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes")) as usize;
        let mut pos = 12;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let hdr = b.get(pos..pos + 4).ok_or_else(|| fmt("truncated"))?;
            let h = u16::from_le_bytes([hdr[0], hdr[1]]) as usize;
            let w = u16::from_le_bytes([hdr[2], hdr[3]]) as usize;
            pos += 4;
            let n = m * h * w;
            let idx = b.get(pos..pos + n).ok_or_else(|| fmt("truncated"))?;
            pos += n;
            blocks.push(CodeBlock::new(m, h, w, idx.to_vec()).map_err(|e| fmt(&e.to_string()))?);
        }
        if pos != b.len() {
            return Err(fmt("trailing bytes"));
        }
        Self::new(m, levels, blocks).map_err(|e| fmt(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::error::read_file(path)?)
    }

    /// Splits off the last `fraction` of blocks (at least one when there
    /// are two or more) as a held-out set.
    pub fn split(&self, fraction: f64) -> (Vec<CodeBlock>, Vec<CodeBlock>) {
        let n = self.blocks.len();
        let mut held = ((n as f64) * fraction).round() as usize;
        if fraction > 0.0 && n >= 2 {
            held = held.clamp(1, n - 1);
        }
        let (a, b) = self.blocks.split_at(n - held);
        (a.to_vec(), b.to_vec())
    }
}

/// Codes of every image with one random spatial crop of at most
/// `crop×crop` per image.
pub fn extract_codes(model: &CodecModel, images: &[Tensor], crop: usize, rng: &mut impl Rng) -> Result<CodeDataset> {
    if crop == 0 {
        return Err(Error::Usage("crop size must be positive".into()));
    }
    let mut blocks = Vec::with_capacity(images.len());
    for img in images {
        let y = model.codes(img)?;
        let (_, h, w) = y.dims();
        let (ch, cw) = (crop.min(h), crop.min(w));
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        blocks.push(y.crop(top, left, ch, cw)?);
    }
    CodeDataset::new(model.quantizer.channels(), model.quantizer.levels(), blocks)
}

/// Mean post-model bits per code over `blocks`.
pub fn post_bits_per_code(model: &EntropyModel, blocks: &[CodeBlock]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in blocks {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let v = model.post_bits(&mut g, &p, std::slice::from_ref(b))?;
        total += g.value(v).item()? * b.len() as f64;
        count += b.len();
    }
    if count == 0 {
        return Err(Error::Usage("no code blocks to evaluate".into()));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostReport {
    /// Training-batch bits per code after each step.
    pub train_bits: Vec<f64>,
    /// Held-out bits per code at the end (training set if nothing is held out).
    pub heldout_bits: f64,
}

/// Minimizes the post model's cross-entropy on `train`; batches hold
/// blocks with equal dims.
pub fn train_post(
    model: &mut EntropyModel,
    train: &[CodeBlock],
    heldout: &[CodeBlock],
    steps: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<PostReport> {
    if train.is_empty() {
        return Err(Error::Usage("no training code blocks".into()));
    }
    let mut opt = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut train_bits = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut picked: Vec<CodeBlock> = Vec::with_capacity(batch_size);
        while picked.len() < batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let b = &train[order[cursor]];
            cursor += 1;
            if picked.first().is_none_or(|f| f.dims() == b.dims()) {
                picked.push(b.clone());
            } else if picked.len() >= 1 && cursor == order.len() {
                break;
            }
        }
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let loss = model.post_bits(&mut g, &p, &picked)?;
        let v = g.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite post loss at step {step}")));
        }
        let grads = g.backward(loss)?;
        opt.step(&mut model.params, &p, &grads, lr);
        train_bits.push(v);
    }
    let eval = if heldout.is_empty() { train } else { heldout };
    let heldout_bits = post_bits_per_code(model, eval)?;
    if heldout.is_empty() {
        warn!("no held-out code blocks; reporting bits on the training set");
    }
    Ok(PostReport { train_bits, heldout_bits })
}

/// Pads every image to a multiple of 8 (edge replication).
pub fn pad_all(images: &[Tensor]) -> Result<Vec<Tensor>> {
    images.iter().map(|i| pad_replicate(i, 8).map(|p| p.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let c = parse_config("lambda = 0.4\n# comment\ndistortion = ms-ssim\npatch = 64 # trailing\nwindow = 4\n").unwrap();
        assert_eq!(c.lambda, 0.4);
        assert_eq!(c.distortion, Distortion::MsSsim);
        assert_eq!(c.patch, 64);
        assert_eq!(c.window, Some(4));
        assert!(matches!(parse_config("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(parse_config("patch = 60"), Err(Error::Config(_))));
        assert!(matches!(parse_config("lambda = 0"), Err(Error::Config(_))));
        assert!(matches!(parse_config("lambda"), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_rules() {
        let c = TrainConfig::default();
        let dec: Vec<f64> = (0..20).map(|i| 10.0 - i as f64).collect();
        assert_eq!(lr_schedule(&dec, &c), Some(1e-5));
        let flat = [1.0; 6];
        let lr = lr_schedule(&flat, &c).unwrap();
        assert!((lr - 1e-6).abs() < 1e-20);
        let three = [1.0; 16];
        assert_eq!(lr_schedule(&three, &c), None);
        let two = [1.0; 11];
        assert!((lr_schedule(&two, &c).unwrap() - 1e-7).abs() < 1e-21);
    }

    #[test]
    fn dataset_round_trip() {
        let b = CodeBlock::new(2, 2, 3, (0..12).map(|i| (i % 8) as u8).collect()).unwrap();
        let d = CodeDataset::new(2, 8, vec![b.clone(), b]).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(CodeDataset::from_bytes(&bytes).unwrap(), d);
        assert!(CodeDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let (tr, ho) = d.split(0.1);
        assert_eq!((tr.len(), ho.len()), (1, 1));
    }
}

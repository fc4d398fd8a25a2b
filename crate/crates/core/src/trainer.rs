//! Set-consistency self-distillation: loss, EMA teacher, centering,
//! schedules, AdamW, collapse monitoring and the training loop.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::{
    aggregate, backbone_backward, backbone_forward, head_backward, head_forward, EncoderState, Grads, Tensor,
    VitConfig,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::imageproc::{multicrop, MultiCropConfig};
use crate::real::{log_softmax, softmax_inplace, Real};
use crate::sampler::{EpochIterator, Level, MinibatchPlan, SamplerConfig, SetIndex, Strategy};
use crate::seed::{self, tag};
use crate::store::{CellSource, Preprocessor};
use crate::synthgen::Split;

/// Floor applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_ECHO_FILE: &str = "train_config.json";

// ---------------------------------------------------------------------------
// Loss pieces on probability vectors

/// One view's probability vector, tagged with the crop it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CropView<T> {
    pub crop: usize,
    pub probs: Vec<T>,
}

/// `H(t, s) = -sum_k t_k log s_k`, with `s` floored at [`PROB_EPS`].
pub fn cross_entropy<T: Real>(t: &[T], s: &[T]) -> T {
    let eps = T::lit(PROB_EPS);
    t.iter().zip(s).map(|(&tk, &sk)| -tk * sk.max(eps).ln()).sum()
}

/// Mean cross-entropy over every (teacher view, student view) pair that
/// comes from different crops. Teacher vectors are constants.
pub fn set_dino_loss<T: Real>(student_views: &[CropView<T>], teacher_views: &[CropView<T>]) -> Result<T> {
    let k = teacher_views
        .first()
        .or(student_views.first())
        .map(|v| v.probs.len())
        .unwrap_or(0);
    if student_views
        .iter()
        .chain(teacher_views)
        .any(|v| v.probs.len() != k)
    {
        return Err(Error::Shape("views have different prototype counts".into()));
    }
    let mut total = T::zero();
    let mut terms = 0usize;
    for t in teacher_views {
        for s in student_views {
            if s.crop == t.crop {
                continue;
            }
            total += cross_entropy(&t.probs, &s.probs);
            terms += 1;
        }
    }
    if terms == 0 {
        return Err(Error::Size("no (teacher, student) pair from different crops".into()));
    }
    Ok(total / T::lit(terms as f64))
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, tensor by tensor.
pub fn ema_update<T: Real>(teacher: &mut EncoderState<T>, student: &EncoderState<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::config("teacher_momentum", "must lie in [0, 1]"));
    }
    if !teacher.same_shapes(student) {
        return Err(Error::Shape("teacher and student layouts differ".into()));
    }
    let lam = T::lit(momentum);
    let rest = T::lit(1.0 - momentum);
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = lam * *tv + rest * sv;
        }
    }
    Ok(())
}

/// `center <- m * center + (1 - m) * mean_rows(logits)`; no-op on an empty batch.
pub fn update_center<T: Real>(center: &mut [T], logits: &[T], rows: usize, momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::config("center_momentum", "must lie in [0, 1)"));
    }
    if rows == 0 {
        log::warn!("center update skipped: empty teacher batch");
        return Ok(());
    }
    let k = center.len();
    if logits.len() != rows * k {
        return Err(Error::Shape("teacher logits do not match the center length".into()));
    }
    let inv = T::one() / T::lit(rows as f64);
    let m = T::lit(momentum);
    let rest = T::lit(1.0 - momentum);
    for (j, c) in center.iter_mut().enumerate() {
        let mean = (0..rows).map(|r| logits[r * k + j]).sum::<T>() * inv;
        *c = m * *c + rest * mean;
    }
    Ok(())
}

/// Jensen gap `H(mean p) - mean H(p)` of a batch of probability vectors.
pub fn collapse_indicator(probs: &[f64], rows: usize) -> f64 {
    if rows == 0 {
        return 0.0;
    }
    let k = probs.len() / rows;
    let entropy = |p: &[f64]| -> f64 { -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>() };
    let mut mean = vec![0.0; k];
    let mut mean_h = 0.0;
    for row in probs.chunks_exact(k) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / rows as f64;
        }
        mean_h += entropy(row) / rows as f64;
    }
    (entropy(&mean) - mean_h).max(0.0)
}

// ---------------------------------------------------------------------------
// Schedules

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    CosineLrWithWarmup,
    CosineWd,
    CosineTeacherMomentum,
}

/// Half-cosine from `start` (progress 0) to `end` (progress `total`), exact at both ends.
pub fn cosine(start: f64, end: f64, step: u64, total: u64) -> f64 {
    if step == 0 {
        return start;
    }
    if step >= total {
        return end;
    }
    let frac = step as f64 / total as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine to `final_value`.
pub fn warmup_cosine(base: f64, final_value: f64, warmup: u64, step: u64, total: u64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    cosine(base, final_value, step - warmup, total.saturating_sub(warmup))
}

// ---------------------------------------------------------------------------
// Configuration and state

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: VitConfig,
    pub multicrop: MultiCropConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub final_lr: f64,
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    pub teacher_momentum_start: f64,
    pub teacher_momentum_end: f64,
    pub teacher_temperature: f64,
    pub student_temperature: f64,
    pub center_momentum: f64,
    pub strategy: Strategy,
    pub level: Level,
    /// Cells per set.
    pub n: usize,
    /// Cells per minibatch; the number of perturbations is `cells_per_minibatch / n`.
    pub cells_per_minibatch: usize,
    pub include_ntc: bool,
    /// Per-tensor gradient norm clip; 0 disables.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Dataset splits whose cells are used for training.
    pub splits: Vec<Split>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: VitConfig::default(),
            multicrop: MultiCropConfig::default(),
            epochs: 20,
            steps_per_epoch: 10,
            base_lr: 5e-4,
            warmup_epochs: 2,
            final_lr: 1e-6,
            weight_decay_start: 0.04,
            weight_decay_end: 0.4,
            teacher_momentum_start: 0.996,
            teacher_momentum_end: 1.0,
            teacher_temperature: 0.01,
            student_temperature: 0.1,
            center_momentum: 0.9,
            strategy: Strategy::CrossBatch,
            level: Level::Sgrna,
            n: 8,
            cells_per_minibatch: 128,
            include_ntc: true,
            grad_clip: 3.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            splits: vec![Split::Train],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mc = &self.multicrop;
        if mc.n_global == 0 {
            return Err(Error::config("multicrop.n_global", "must be at least 1"));
        }
        if mc.n_global + mc.n_local < 2 {
            return Err(Error::config(
                "multicrop.n_local",
                "need at least two crops per cell so that views from different crops exist",
            ));
        }
        if mc.global_size != self.model.image_size {
            return Err(Error::config(
                "multicrop.global_size",
                format!("must equal model.image_size ({})", self.model.image_size),
            ));
        }
        if mc.n_local > 0 && (mc.local_size % self.model.patch_size != 0 || mc.local_size == 0) {
            return Err(Error::config(
                "multicrop.local_size",
                "must be a positive multiple of model.patch_size",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::config("steps_per_epoch", "must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs", "must be smaller than epochs"));
        }
        for (name, v) in [
            ("teacher_temperature", self.teacher_temperature),
            ("student_temperature", self.student_temperature),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("teacher_momentum_start", self.teacher_momentum_start),
            ("teacher_momentum_end", self.teacher_momentum_end),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(Error::config("center_momentum", "must lie in [0, 1)"));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("final_lr", self.final_lr),
            ("weight_decay_start", self.weight_decay_start),
            ("weight_decay_end", self.weight_decay_end),
            ("grad_clip", self.grad_clip),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if self.cells_per_minibatch == 0 || self.cells_per_minibatch % self.n != 0 {
            return Err(Error::config(
                "cells_per_minibatch",
                format!("must be a positive multiple of n = {}", self.n),
            ));
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            strategy: self.strategy,
            level: self.level,
            n_p: self.cells_per_minibatch / self.n,
            n: self.n,
            include_ntc: self.include_ntc,
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    /// Learning rate, weight decay and teacher momentum at `step`. The
    /// schedules reach their end values at the final step.
    pub fn schedule_at(&self, step: u64) -> (f64, f64, f64) {
        let last = self.total_steps().saturating_sub(1);
        (
            schedule(self, step, last, ScheduleKind::CosineLrWithWarmup),
            schedule(self, step, last, ScheduleKind::CosineWd),
            schedule(self, step, last, ScheduleKind::CosineTeacherMomentum),
        )
    }
}

pub fn schedule(cfg: &TrainConfig, step: u64, total_steps: u64, kind: ScheduleKind) -> f64 {
    match kind {
        ScheduleKind::CosineLrWithWarmup => warmup_cosine(
            cfg.base_lr,
            cfg.final_lr,
            (cfg.warmup_epochs * cfg.steps_per_epoch) as u64,
            step,
            total_steps,
        ),
        ScheduleKind::CosineWd => cosine(cfg.weight_decay_start, cfg.weight_decay_end, step, total_steps),
        ScheduleKind::CosineTeacherMomentum => cosine(
            cfg.teacher_momentum_start,
            cfg.teacher_momentum_end,
            step,
            total_steps,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_momentum: f64,
    pub collapse: f64,
    pub n_pairs: usize,
}

/// Everything that evolves during training. The optimizer moments cover
/// student tensors only; the teacher has none.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: EncoderState<f32>,
    pub teacher: EncoderState<f32>,
    pub center: Vec<f32>,
    pub adam_m: EncoderState<f32>,
    pub adam_v: EncoderState<f32>,
    pub step: u64,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let student = EncoderState::init(&cfg.model, seed::derive(cfg.seed, &[tag::INIT]))?;
        Ok(TrainState {
            teacher: student.clone(),
            adam_m: student.zeros_like(),
            adam_v: student.zeros_like(),
            center: vec![0.0; cfg.model.n_prototypes],
            student,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let center = Tensor {
            shape: vec![self.center.len()],
            data: self.center.clone(),
        };
        let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (prefix, state) in [
            ("student.", &self.student),
            ("teacher.", &self.teacher),
            ("optim.m.", &self.adam_m),
            ("optim.v.", &self.adam_v),
        ] {
            for (n, t) in state.names.iter().zip(&state.tensors) {
                named.push((format!("{prefix}{n}"), t));
            }
        }
        named.push(("center".into(), &center));
        let meta = serde_json::json!({
            "step": self.step,
            "train_config": cfg,
            "history": self.history,
        });
        checkpoint::write(path, &cfg.model, meta, &named)
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let ck = checkpoint::read::<f32>(path)?;
        let bad = |m: &str| Error::format(path, m.to_string());
        let cfg: TrainConfig = serde_json::from_value(ck.header.meta["train_config"].clone())
            .map_err(|e| bad(&e.to_string()))?;
        let step = ck.header.meta["step"].as_u64().ok_or_else(|| bad("missing step"))?;
        let history: Vec<HistoryRow> = serde_json::from_value(ck.header.meta["history"].clone())
            .map_err(|e| bad(&e.to_string()))?;
        let model = &ck.header.model;
        let center = ck.get("center").ok_or_else(|| bad("missing center"))?.data.clone();
        Ok((
            TrainState {
                student: EncoderState::from_named(model, ck.with_prefix("student."))?,
                teacher: EncoderState::from_named(model, ck.with_prefix("teacher."))?,
                adam_m: EncoderState::from_named(model, ck.with_prefix("optim.m."))?,
                adam_v: EncoderState::from_named(model, ck.with_prefix("optim.v."))?,
                center,
                step,
                history,
            },
            cfg,
        ))
    }
}

/// Teacher weights of a checkpoint, used for inference.
pub fn load_teacher(path: &Path) -> Result<EncoderState<f32>> {
    let ck = checkpoint::read::<f32>(path)?;
    EncoderState::from_named(&ck.header.model, ck.with_prefix("teacher."))
}

// ---------------------------------------------------------------------------
// Crops and the objective

/// Crops of one set pair. Images are stored crop-major: crop `c` of cell `i`
/// sits at index `c * n + i`.
#[derive(Debug, Clone)]
pub struct PairCrops {
    pub n: usize,
    pub student_global: Vec<Image>,
    pub student_local: Vec<Image>,
    /// `None` when the teacher sees the student's global crops (same cells).
    pub teacher_global: Option<Vec<Image>>,
}

/// Multi-crop every cell of a plan. For each pair in order: all student
/// cells (global then local crops), then all teacher cells (global only)
/// unless the strategy shares cells.
pub fn build_crops(
    plan: &MinibatchPlan,
    images: &HashMap<usize, Image>,
    cfg: &MultiCropConfig,
    rng: &mut impl rand::Rng,
) -> Result<Vec<PairCrops>> {
    let (g, l) = (cfg.n_global, cfg.n_local);
    let teacher_cfg = MultiCropConfig { n_local: 0, ..*cfg };
    let fetch = |row: usize| {
        images
            .get(&row)
            .ok_or_else(|| Error::Lookup(format!("image for manifest row {row} was not loaded")))
    };
    let mut out = Vec::with_capacity(plan.set_pairs.len());
    for pair in &plan.set_pairs {
        let n = pair.student_set.len();
        let mut sg = vec![None; g * n];
        let mut sl = vec![None; l * n];
        for (i, &row) in pair.student_set.iter().enumerate() {
            let (globals, locals) = multicrop(fetch(row)?, cfg, rng)?;
            for (c, img) in globals.into_iter().enumerate() {
                sg[c * n + i] = Some(img);
            }
            for (c, img) in locals.into_iter().enumerate() {
                sl[c * n + i] = Some(img);
            }
        }
        let teacher_global = if pair.strategy == Strategy::SameCells {
            None
        } else {
            let mut tg = vec![None; g * n];
            for (i, &row) in pair.teacher_set.iter().enumerate() {
                let (globals, _) = multicrop(fetch(row)?, &teacher_cfg, rng)?;
                for (c, img) in globals.into_iter().enumerate() {
                    tg[c * n + i] = Some(img);
                }
            }
            Some(tg.into_iter().map(|x| x.expect("filled")).collect())
        };
        out.push(PairCrops {
            n,
            student_global: sg.into_iter().map(|x| x.expect("filled")).collect(),
            student_local: sl.into_iter().map(|x| x.expect("filled")).collect(),
            teacher_global,
        });
    }
    Ok(out)
}

/// Result of one evaluation of the set-consistency objective.
pub struct Objective<T> {
    pub loss: T,
    /// Teacher logits before centering, `[views, K]`.
    pub teacher_logits: Vec<T>,
    /// Centered, sharpened teacher probabilities, `[views, K]`.
    pub teacher_probs: Vec<T>,
    pub n_teacher_views: usize,
    pub grads: Option<Grads<T>>,
}

/// Mean over `rows_per_set` consecutive rows for every set.
fn aggregate_rows<T: Real>(x: &[T], sets: usize, n: usize, d: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(sets * d);
    for s in 0..sets {
        out.extend(aggregate(&x[s * n * d..(s + 1) * n * d], n, d)?);
    }
    Ok(out)
}

/// The set-level loss: teacher sees global set-views (centered, sharpened at
/// `t_temp`), student sees every set-view (sharpened at `s_temp`); the loss
/// averages `H(teacher_v, student_w)` over all pairs with `v != w`.
#[allow(clippy::too_many_arguments)]
pub fn set_dino_objective<T: Real>(
    student: &EncoderState<T>,
    teacher: &EncoderState<T>,
    center: &[T],
    crops: &[PairCrops],
    n_global: usize,
    n_local: usize,
    t_temp: T,
    s_temp: T,
    want_grads: bool,
) -> Result<Objective<T>> {
    let n_pairs = crops.len();
    if n_pairs == 0 {
        return Err(Error::Size("empty minibatch".into()));
    }
    let n = crops[0].n;
    if n == 0 {
        return Err(Error::EmptySet("sets must contain at least one cell".into()));
    }
    let (g, l) = (n_global, n_local);
    let v = g + l;
    let terms_per_pair = g * v - g;
    if terms_per_pair == 0 {
        return Err(Error::Size("no views from different crops".into()));
    }
    for c in crops {
        if c.n != n
            || c.student_global.len() != g * n
            || c.student_local.len() != l * n
            || c.teacher_global.as_ref().is_some_and(|t| t.len() != g * n)
        {
            return Err(Error::Shape("crop layout does not match the set size and crop counts".into()));
        }
    }
    let d = student.config.embed_dim;
    let k = student.config.n_prototypes;
    if center.len() != k {
        return Err(Error::Shape("center length differs from the prototype count".into()));
    }

    // Teacher: global set-views only, no gradient.
    let teacher_imgs: Vec<&Image> = crops
        .iter()
        .flat_map(|c| c.teacher_global.as_ref().unwrap_or(&c.student_global).iter())
        .collect();
    let (t_out, _) = backbone_forward(teacher, &teacher_imgs, false)?;
    let t_sets = aggregate_rows(&t_out.cls, n_pairs * g, n, d)?;
    let (teacher_logits, _) = head_forward(teacher, &t_sets, n_pairs * g);
    let mut teacher_probs = vec![T::zero(); n_pairs * g * k];
    for (r, row) in teacher_probs.chunks_exact_mut(k).enumerate() {
        for j in 0..k {
            row[j] = (teacher_logits[r * k + j] - center[j]) / t_temp;
        }
        softmax_inplace(row);
    }
    if teacher_probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite teacher probabilities".into()));
    }

    // Student: every set-view.
    let sg_imgs: Vec<&Image> = crops.iter().flat_map(|c| c.student_global.iter()).collect();
    let sl_imgs: Vec<&Image> = crops.iter().flat_map(|c| c.student_local.iter()).collect();
    let (sg_out, sg_cache) = backbone_forward(student, &sg_imgs, want_grads)?;
    let (sl_out, sl_cache) = backbone_forward(student, &sl_imgs, want_grads)?;
    let sg_sets = aggregate_rows(&sg_out.cls, n_pairs * g, n, d)?;
    let sl_sets = if l > 0 {
        aggregate_rows(&sl_out.cls, n_pairs * l, n, d)?
    } else {
        Vec::new()
    };
    let mut s_sets = Vec::with_capacity(n_pairs * v * d);
    for p in 0..n_pairs {
        s_sets.extend_from_slice(&sg_sets[p * g * d..(p + 1) * g * d]);
        s_sets.extend_from_slice(&sl_sets[p * l * d..(p + 1) * l * d]);
    }
    let (s_logits, head_cache) = head_forward(student, &s_sets, n_pairs * v);
    let mut s_logp = vec![T::zero(); n_pairs * v * k];
    let mut scaled = vec![T::zero(); k];
    for r in 0..n_pairs * v {
        for j in 0..k {
            scaled[j] = s_logits[r * k + j] / s_temp;
        }
        log_softmax(&scaled, &mut s_logp[r * k..(r + 1) * k]);
    }

    let norm = T::lit((n_pairs * terms_per_pair) as f64);
    let mut loss = T::zero();
    for p in 0..n_pairs {
        for t in 0..g {
            let pt = &teacher_probs[(p * g + t) * k..(p * g + t + 1) * k];
            for s in (0..v).filter(|&s| s != t) {
                let lp = &s_logp[(p * v + s) * k..(p * v + s + 1) * k];
                loss -= pt.iter().zip(lp).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
    }
    loss /= norm;

    let grads = if want_grads {
        let mut grads = student.zeros_like();
        // d loss / d logit of student view s:
        // (cnt_s * softmax_s - sum_{t != s} p_t) / (tau_s * norm).
        let mut d_logits = vec![T::zero(); n_pairs * v * k];
        let scale = T::one() / (s_temp * norm);
        for p in 0..n_pairs {
            for s in 0..v {
                let row = &mut d_logits[(p * v + s) * k..(p * v + s + 1) * k];
                let cnt = T::lit((g - usize::from(s < g)) as f64);
                let lp = &s_logp[(p * v + s) * k..(p * v + s + 1) * k];
                for j in 0..k {
                    row[j] = cnt * lp[j].exp();
                }
                for t in (0..g).filter(|&t| t != s) {
                    let pt = &teacher_probs[(p * g + t) * k..(p * g + t + 1) * k];
                    for j in 0..k {
                        row[j] -= pt[j];
                    }
                }
                row.iter_mut().for_each(|x| *x *= scale);
            }
        }
        let d_sets = head_backward(student, &head_cache, &d_logits, &mut grads);
        let inv_n = T::one() / T::lit(n as f64);
        let mut d_sg = vec![T::zero(); n_pairs * g * n * d];
        let mut d_sl = vec![T::zero(); n_pairs * l * n * d];
        for p in 0..n_pairs {
            for c in 0..v {
                let src = &d_sets[(p * v + c) * d..(p * v + c + 1) * d];
                let (dst, base) = if c < g {
                    (&mut d_sg, (p * g + c) * n)
                } else {
                    (&mut d_sl, (p * l + c - g) * n)
                };
                for i in 0..n {
                    for j in 0..d {
                        dst[(base + i) * d + j] = src[j] * inv_n;
                    }
                }
            }
        }
        if let Some(cache) = sg_cache {
            backbone_backward(student, &cache, &d_sg, &mut grads);
        }
        if let Some(cache) = sl_cache {
            backbone_backward(student, &cache, &d_sl, &mut grads);
        }
        Some(grads)
    } else {
        None
    };
    Ok(Objective {
        loss,
        teacher_logits,
        teacher_probs,
        n_teacher_views: n_pairs * g,
        grads,
    })
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-tensor gradient norm clip; 0 disables.
    pub clip: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            clip: cfg.grad_clip,
        }
    }

    /// One update with bias correction for step number `t` (1-based).
    /// Decoupled weight decay is skipped for biases and normalisation gains.
    #[allow(clippy::too_many_arguments)]
    pub fn step<T: Real>(
        &self,
        params: &mut EncoderState<T>,
        grads: &Grads<T>,
        m: &mut EncoderState<T>,
        v: &mut EncoderState<T>,
        lr: f64,
        weight_decay: f64,
        t: u64,
    ) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(self.eps);
        for i in 0..params.tensors.len() {
            let decay = params.decays(i);
            let g = &grads.tensors[i].data;
            let gscale = if self.clip > 0.0 {
                let norm = g.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
                let coef = self.clip / (norm + 1e-6);
                T::lit(coef.min(1.0))
            } else {
                T::one()
            };
            let shrink = T::lit(1.0 - lr * weight_decay);
            let p = &mut params.tensors[i].data;
            let mi = &mut m.tensors[i].data;
            let vi = &mut v.tensors[i].data;
            for j in 0..p.len() {
                let gj = g[j] * gscale;
                mi[j] = b1 * mi[j] + ob1 * gj;
                vi[j] = b2 * vi[j] + ob2 * gj * gj;
                if decay {
                    p[j] *= shrink;
                }
                p[j] -= step_size * mi[j] / (vi[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

/// Everything a step does after the objective: AdamW on the student, EMA
/// into the teacher, then the center update. `step` is 0-based.
#[allow(clippy::too_many_arguments)]
pub fn apply_update<T: Real>(
    cfg: &TrainConfig,
    step: u64,
    student: &mut EncoderState<T>,
    teacher: &mut EncoderState<T>,
    center: &mut [T],
    adam_m: &mut EncoderState<T>,
    adam_v: &mut EncoderState<T>,
    obj: &Objective<T>,
) -> Result<()> {
    let grads = obj
        .grads
        .as_ref()
        .ok_or_else(|| Error::Misuse("objective was evaluated without gradients".into()))?;
    let (lr, wd, momentum) = cfg.schedule_at(step);
    AdamW::from_config(cfg).step(student, grads, adam_m, adam_v, lr, wd, step + 1);
    ema_update(teacher, student, momentum)?;
    update_center(center, &obj.teacher_logits, obj.n_teacher_views, cfg.center_momentum)
}

// ---------------------------------------------------------------------------
// Training loop

/// Preprocess every distinct cell of a plan (in parallel).
pub fn load_plan_images(
    source: &dyn CellSource,
    pre: &Preprocessor,
    plan: &MinibatchPlan,
) -> Result<HashMap<usize, Image>> {
    let mut rows: Vec<usize> = plan
        .set_pairs
        .iter()
        .flat_map(|p| p.student_set.iter().chain(&p.teacher_set).copied())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.par_iter()
        .map(|&r| pre.load(source, r).map(|img| (r, img)))
        .collect()
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub state: TrainState,
    source: &'a dyn CellSource,
    pre: &'a Preprocessor,
    index: SetIndex,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    /// Fresh training state over the given manifest rows (all when `None`).
    pub fn new(
        source: &'a dyn CellSource,
        rows: Option<&[usize]>,
        pre: &'a Preprocessor,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let index = SetIndex::new(source.cells(), rows, &config.sampler())?;
        if index.n_feasible() == 0 {
            return Err(Error::Size(format!(
                "no perturbation can be sampled: {}",
                index.diagnostics()
            )));
        }
        Ok(Trainer {
            config: config.clone(),
            state: TrainState::init(config)?,
            source,
            pre,
            index,
            out_dir: None,
        })
    }

    /// Write checkpoints, history and the config echo into `dir`. When a
    /// checkpoint of the same configuration exists there, training resumes from it.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::store::write_json(&dir.join(CONFIG_ECHO_FILE), &self.config)?;
        let ck = dir.join(CHECKPOINT_FILE);
        if ck.exists() {
            let (state, cfg) = TrainState::load(&ck)?;
            if cfg != self.config {
                return Err(Error::config(
                    "train",
                    format!("{} was written with a different configuration", ck.display()),
                ));
            }
            log::info!("resuming from step {}", state.step);
            self.state = state;
        }
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn index(&self) -> &SetIndex {
        &self.index
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps()
    }

    pub fn plan(&self, step: u64) -> MinibatchPlan {
        EpochIterator::new(&self.index, self.config.steps_per_epoch, self.config.epochs, self.config.seed)
            .expect("validated steps_per_epoch")
            .plan_at(step)
    }

    /// Minibatch plan and crops of `step`, exactly as the training step draws them.
    pub fn crops_for(&self, step: u64) -> Result<(MinibatchPlan, Vec<PairCrops>)> {
        let plan = self.plan(step);
        let images = load_plan_images(self.source, self.pre, &plan)?;
        let mut rng = seed::rng(self.config.seed, &[tag::CROPS, step]);
        let crops = build_crops(&plan, &images, &self.config.multicrop, &mut rng)?;
        Ok((plan, crops))
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<HistoryRow> {
        let cfg = &self.config;
        let s = self.state.step;
        let (plan, crops) = self.crops_for(s)?;
        if crops.is_empty() {
            return Err(Error::Size(format!(
                "step {s} sampled no set pairs: {}",
                self.index.diagnostics()
            )));
        }
        let (lr, wd, momentum) = cfg.schedule_at(s);
        let obj = set_dino_objective(
            &self.state.student,
            &self.state.teacher,
            &self.state.center,
            &crops,
            cfg.multicrop.n_global,
            cfg.multicrop.n_local,
            cfg.teacher_temperature as f32,
            cfg.student_temperature as f32,
            true,
        )?;
        let loss = obj.loss as f64;
        if !loss.is_finite() {
            return Err(self.non_finite(&plan, loss));
        }
        apply_update(
            cfg,
            s,
            &mut self.state.student,
            &mut self.state.teacher,
            &mut self.state.center,
            &mut self.state.adam_m,
            &mut self.state.adam_v,
            &obj,
        )?;
        let probs: Vec<f64> = obj.teacher_probs.iter().map(|&p| p as f64).collect();
        let row = HistoryRow {
            step: s,
            epoch: s / cfg.steps_per_epoch as u64,
            loss,
            lr,
            weight_decay: wd,
            teacher_momentum: momentum,
            collapse: collapse_indicator(&probs, obj.n_teacher_views),
            n_pairs: plan.set_pairs.len(),
        };
        self.state.history.push(row.clone());
        self.state.step += 1;
        Ok(row)
    }

    fn non_finite(&self, plan: &MinibatchPlan, loss: f64) -> Error {
        let dump = serde_json::to_string_pretty(plan).unwrap_or_default();
        let mut msg = format!("loss became {loss} at step {}", plan.step);
        if let Some(dir) = &self.out_dir {
            let path = dir.join(format!("nonfinite_step_{}.json", plan.step));
            match std::fs::write(&path, &dump) {
                Ok(()) => msg.push_str(&format!("; minibatch plan written to {}", path.display())),
                Err(e) => msg.push_str(&format!("; could not write plan dump: {e}")),
            }
        } else {
            msg.push_str(&format!("; minibatch plan: {dump}"));
        }
        Error::Numeric(msg)
    }

    /// Train until `stop_after` steps have run in total (or to the end),
    /// checkpointing at every epoch boundary.
    pub fn run(&mut self, stop_after: Option<u64>) -> Result<()> {
        let total = self.total_steps();
        let end = stop_after.map_or(total, |s| s.min(total));
        let spe = self.config.steps_per_epoch as u64;
        while self.state.step < end {
            let row = self.step()?;
            if (row.step + 1) % spe == 0 {
                log::info!(
                    "epoch {} step {} loss {:.4} collapse {:.4} lr {:.2e}",
                    row.epoch,
                    row.step,
                    row.loss,
                    row.collapse,
                    row.lr
                );
                self.save()?;
            }
        }
        self.save()
    }

    pub fn save(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        self.state.save(&dir.join(CHECKPOINT_FILE), &self.config)?;
        write_history(&dir.join(HISTORY_FILE), &self.state.history)
    }
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["step", "epoch", "loss", "lr", "weight_decay", "teacher_momentum", "collapse"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.loss.to_string(),
            r.lr.to_string(),
            r.weight_decay.to_string(),
            r.teacher_momentum.to_string(),
            r.collapse.to_string(),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train end to end on the given rows and return the final state.
pub fn train_run(
    source: &dyn CellSource,
    rows: Option<&[usize]>,
    pre: &Preprocessor,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    let mut trainer = Trainer::new(source, rows, pre, config)?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_output(dir)?;
    }
    trainer.run(None)?;
    Ok(trainer.state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(k: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        v
    }

    fn view(crop: usize, probs: Vec<f64>) -> CropView<f64> {
        CropView { crop, probs }
    }

    #[test]
    fn loss_closed_forms() {
        let e0 = onehot(4, 0);
        let u = vec![0.25; 4];
        let same = set_dino_loss(&[view(1, e0.clone())], &[view(0, e0.clone())]).unwrap();
        assert!(same.abs() <= 1e-10);
        let uu = set_dino_loss(&[view(1, u.clone())], &[view(0, u.clone())]).unwrap();
        assert!((uu - 4f64.ln()).abs() < 1e-9);
        let ou = set_dino_loss(&[view(1, u.clone())], &[view(0, e0)]).unwrap();
        assert!((ou - 4f64.ln()).abs() < 1e-9);
        assert!(matches!(
            set_dino_loss(&[view(1, vec![0.5, 0.5])], &[view(0, u.clone())]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(set_dino_loss(&[view(0, u.clone())], &[view(0, u)]), Err(Error::Size(_))));
    }

    #[test]
    fn loss_is_entropy_plus_kl() {
        let mut rng = seed::rng(4, &[]);
        use rand::Rng;
        for _ in 0..50 {
            let mut draw = || {
                let mut v: Vec<f64> = (0..6).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let (t, s) = (draw(), draw());
            let h: f64 = -t.iter().map(|p| p * p.ln()).sum::<f64>();
            let kl: f64 = t.iter().zip(&s).map(|(a, b)| a * (a / b).ln()).sum();
            let loss = set_dino_loss(&[view(1, s)], &[view(0, t)]).unwrap();
            assert!(loss >= 0.0);
            assert!((loss - (h + kl)).abs() < 1e-8);
        }
    }

    #[test]
    fn ema_identities() {
        let cfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 4,
            depth: 1,
            n_heads: 1,
            mlp_ratio: 1,
            n_prototypes: 3,
            projector_hidden_dim: 4,
            bottleneck_dim: 2,
        };
        let student = EncoderState::<f64>::init(&cfg, 1).unwrap();
        let teacher0 = EncoderState::<f64>::init(&cfg, 2).unwrap();
        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.tensors, teacher0.tensors);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.tensors, student.tensors);
        let mut a = student.clone();
        a.tensors.iter_mut().for_each(|x| x.data.iter_mut().for_each(|v| *v = 2.0));
        let mut b = student.clone();
        b.tensors.iter_mut().for_each(|x| x.data.iter_mut().for_each(|v| *v = 4.0));
        ema_update(&mut a, &b, 0.5).unwrap();
        assert!(a.tensors.iter().all(|x| x.data.iter().all(|&v| v == 3.0)));
        let other = EncoderState::<f64>::init(&VitConfig { embed_dim: 8, n_heads: 2, ..cfg }, 1).unwrap();
        assert!(matches!(ema_update(&mut a, &other, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn center_update_arithmetic() {
        let mut c = vec![0.0f64; 2];
        update_center(&mut c, &[1.0, 1.0, 1.0, 1.0], 2, 0.9).unwrap();
        assert!(c.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let mut c = vec![5.0f64, -5.0];
        update_center(&mut c, &[1.0, 2.0, 3.0, 4.0], 2, 0.0).unwrap();
        assert_eq!(c, vec![2.0, 3.0]);
        let before = c.clone();
        update_center(&mut c, &[], 0, 0.5).unwrap();
        assert_eq!(c, before);
        // Repeated identical logits pull the center monotonically towards them.
        let mut c = vec![0.0f64];
        let mut last = 0.0;
        for _ in 0..20 {
            update_center(&mut c, &[1.0], 1, 0.9).unwrap();
            assert!(c[0] > last && c[0] <= 1.0);
            last = c[0];
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            base_lr: 0.04,
            final_lr: 1e-6,
            epochs: 10,
            steps_per_epoch: 7,
            warmup_epochs: 2,
            ..TrainConfig::default()
        };
        let total = cfg.total_steps();
        let lr = |s| schedule(&cfg, s, total, ScheduleKind::CosineLrWithWarmup);
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(14), 0.04);
        assert_eq!(lr(total), 1e-6);
        assert!(lr(7) > 0.0 && lr(7) < 0.04);
        assert_eq!(schedule(&cfg, total, total, ScheduleKind::CosineTeacherMomentum), 1.0);
        assert_eq!(schedule(&cfg, 0, total, ScheduleKind::CosineTeacherMomentum), 0.996);
        assert_eq!(schedule(&cfg, total, total, ScheduleKind::CosineWd), 0.4);
        // The training loop reaches the end values at its last step.
        let (lr_last, wd_last, m_last) = cfg.schedule_at(total - 1);
        assert_eq!((lr_last, wd_last, m_last), (1e-6, 0.4, 1.0));
    }

    #[test]
    fn collapse_indicator_closed_forms() {
        let e0 = onehot(3, 0);
        let e1 = onehot(3, 1);
        let same: Vec<f64> = [e0.clone(), e0.clone(), e0.clone()].concat();
        assert!(collapse_indicator(&same, 3).abs() < 1e-9);
        let two: Vec<f64> = [e0, e1].concat();
        assert!((collapse_indicator(&two, 2) - 2f64.ln()).abs() < 1e-12);
        let uniform = vec![0.25; 8];
        assert!(collapse_indicator(&uniform, 2).abs() < 1e-12);
    }

    fn micro() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            mlp_ratio: 2,
            n_prototypes: 6,
            projector_hidden_dim: 10,
            bottleneck_dim: 5,
        }
    }

    fn random_image(size: usize, rng: &mut impl rand::Rng) -> Image {
        let mut img = Image::zeros(crate::image::CHANNELS, size, size);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        img
    }

    fn random_crops(pairs: usize, n: usize, g: usize, l: usize, shared: bool, seed: u64) -> Vec<PairCrops> {
        let mut rng = seed::rng(seed, &[]);
        (0..pairs)
            .map(|p| PairCrops {
                n,
                student_global: (0..g * n).map(|_| random_image(8, &mut rng)).collect(),
                student_local: (0..l * n).map(|_| random_image(4, &mut rng)).collect(),
                teacher_global: (!shared || p % 2 == 1)
                    .then(|| (0..g * n).map(|_| random_image(8, &mut rng)).collect()),
            })
            .collect()
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let cfg = micro();
        let mut student = EncoderState::<f64>::init(&cfg, 1).unwrap();
        // Init-scale weights put the bottleneck norm near zero, where central
        // differences lose most of their digits.
        for t in student.tensors.iter_mut() {
            t.data.iter_mut().for_each(|v| *v *= 20.0);
        }
        let mut teacher = EncoderState::<f64>::init(&cfg, 2).unwrap();
        teacher.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v *= 20.0));
        let center: Vec<f64> = (0..6).map(|j| 0.1 * j as f64 - 0.2).collect();
        let crops = random_crops(2, 3, 2, 2, true, 9);
        let f = |s: &EncoderState<f64>| {
            set_dino_objective(s, &teacher, &center, &crops, 2, 2, 0.5, 0.1, false)
                .unwrap()
                .loss
        };
        let obj = set_dino_objective(&student, &teacher, &center, &crops, 2, 2, 0.5, 0.1, true).unwrap();
        let grads = obj.grads.unwrap();
        let h = 1e-6;
        for (ti, name) in student.names.iter().enumerate() {
            for e in 0..student.tensors[ti].data.len() {
                let mut plus = student.clone();
                plus.tensors[ti].data[e] += h;
                let mut minus = student.clone();
                minus.tensors[ti].data[e] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = grads.tensors[ti].data[e];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()) + 1e-8,
                    "{name}[{e}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn objective_is_invariant_to_set_order() {
        let cfg = micro();
        let student = EncoderState::<f64>::init(&cfg, 3).unwrap();
        let teacher = EncoderState::<f64>::init(&cfg, 4).unwrap();
        let center = vec![0.0; 6];
        let n = 4;
        let crops = random_crops(1, n, 2, 3, false, 5);
        let loss = |c: &[PairCrops]| {
            set_dino_objective(&student, &teacher, &center, c, 2, 3, 0.04, 0.1, false)
                .unwrap()
                .loss
        };
        let base = loss(&crops);
        // Reverse the cells of both sets (every crop index moves together).
        let permute = |v: &[Image]| -> Vec<Image> {
            v.chunks(n).flat_map(|c| c.iter().rev().cloned()).collect()
        };
        let shuffled = vec![PairCrops {
            n,
            student_global: permute(&crops[0].student_global),
            student_local: permute(&crops[0].student_local),
            teacher_global: crops[0].teacher_global.as_deref().map(permute),
        }];
        assert!((loss(&shuffled) - base).abs() <= 1e-6 * base.abs());
    }

    #[test]
    fn objective_rejects_inconsistent_crops() {
        let cfg = micro();
        let s = EncoderState::<f64>::init(&cfg, 3).unwrap();
        let crops = random_crops(1, 2, 2, 1, false, 5);
        let c = vec![0.0; 6];
        assert!(matches!(
            set_dino_objective(&s, &s, &c, &crops, 2, 2, 0.04, 0.1, false),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            set_dino_objective(&s, &s, &c, &[], 2, 1, 0.04, 0.1, false),
            Err(Error::Size(_))
        ));
        assert!(matches!(
            set_dino_objective(&s, &s, &c[..3], &crops, 2, 1, 0.04, 0.1, false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn adamw_skips_decay_on_biases_and_clips_per_tensor() {
        let cfg = micro();
        let mut p = EncoderState::<f64>::init(&cfg, 1).unwrap();
        let before = p.clone();
        let grads = p.zeros_like();
        let (mut m, mut v) = (p.zeros_like(), p.zeros_like());
        let opt = AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 3.0 };
        opt.step(&mut p, &grads, &mut m, &mut v, 0.1, 0.5, 1);
        for i in 0..p.tensors.len() {
            let shrink = if p.decays(i) { 0.95 } else { 1.0 };
            for (a, b) in p.tensors[i].data.iter().zip(&before.tensors[i].data) {
                assert!((a - b * shrink).abs() < 1e-15);
            }
        }
        // A huge gradient is clipped to norm 3 before entering the moments.
        let mut g = p.zeros_like();
        g.tensors[0].data.iter_mut().for_each(|x| *x = 1e6);
        let (mut m, mut v) = (p.zeros_like(), p.zeros_like());
        opt.step(&mut p.clone(), &g, &mut m, &mut v, 0.1, 0.0, 1);
        let norm_m: f64 = m.tensors[0].data.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm_m - 0.1 * 3.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig {
            warmup_epochs: 20,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "warmup_epochs"));
        let bad = TrainConfig {
            cells_per_minibatch: 100,
            n: 8,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "cells_per_minibatch"));
        let bad = TrainConfig {
            teacher_temperature: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}

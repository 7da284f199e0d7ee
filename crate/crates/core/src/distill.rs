//! Training: supervised teacher training and knowledge distillation.
//!
//! Distillation optimizes `total = CE + α·KD` per batch, where CE is the
//! ground-truth cross-entropy over the scored prompt positions and KD is
//! the temperature-softened divergence between teacher and student
//! distributions at the same positions, scaled by T² so its gradient
//! magnitude stays comparable across temperatures. The weighting α is
//! either fixed or chosen automatically so both terms start at similar
//! magnitudes (median CE / median KD over warmup batches).
//!
//! Freezing policy: the teacher is never updated; the student trains its
//! decoder sub-layer parameters only — encoder and embeddings stay frozen
//! (and therefore remain bit-identical to the teacher's, which both the
//! analysis caches and the shared-tokenizer contract rely on).
//!
//! Determinism: batches are drawn with replacement from a seeded stream,
//! gradients accumulate in sorted parameter order, and the optimizer state
//! lives in ordered maps, so a `(dataset seed, init seed, training seed)`
//! triple reproduces the training log exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::WeightMaskSet;
use crate::error::{Error, Result};
use crate::evalmetrics::{anls, exact_match, DEFAULT_TAU};
use crate::model::{CaptureSet, EncoderInput, ForwardOpts, MaskSet, MiniModel};
use crate::synthdocs::{decode_tokens, encode_prompt, EncodedPrompt, QAPair, SynthDoc};
use crate::tensor::{Graph, Tensor, Var};

// ───────────────────────────────────────────────────────────────────────
// Configuration
// ───────────────────────────────────────────────────────────────────────

/// How the distillation weighting α is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaSetting {
    /// Use this nonnegative value as-is.
    Fixed(f64),
    /// Balance the loss terms from warmup-batch medians.
    Auto,
}

/// Which distribution leads the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdDirection {
    /// KL(teacher ‖ student) — the conventional distillation ordering.
    TeacherLeads,
    /// KL(student ‖ teacher).
    StudentLeads,
}

/// Knowledge-distillation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDConfig {
    /// Softening temperature (> 0).
    pub temperature: f64,
    /// Loss weighting.
    pub alpha: AlphaSetting,
    /// Divergence direction.
    pub direction: KdDirection,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Optimizer steps (> 0 unless explicitly zero-step).
    pub steps: usize,
    /// Batch-sampling seed.
    pub seed: u64,
    /// Global gradient-norm clip (0 disables clipping).
    pub grad_clip: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Adam denominator offset.
    pub epsilon: f64,
    /// Warmup batches measured when α is automatic.
    pub warmup_batches: usize,
    /// Evaluate exact match / similarity on the selection split every this
    /// many steps (0 = never).
    pub eval_every: usize,
}

impl Default for KDConfig {
    /// Robust small-transformer defaults; every field is overridable.
    fn default() -> Self {
        KDConfig {
            temperature: 2.0,
            alpha: AlphaSetting::Auto,
            direction: KdDirection::TeacherLeads,
            learning_rate: 3e-4,
            batch_size: 32,
            steps: 200,
            seed: 0,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_batches: 4,
            eval_every: 0,
        }
    }
}

impl KDConfig {
    fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let AlphaSetting::Fixed(a) = self.alpha {
            if a < 0.0 {
                return Err(Error::Config(format!("α must be nonnegative, got {a}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Supervised teacher-training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Maximum optimizer steps.
    pub steps: usize,
    /// Batch-sampling seed.
    pub seed: u64,
    /// Global gradient-norm clip (0 disables clipping).
    pub grad_clip: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Adam denominator offset.
    pub epsilon: f64,
    /// Stop once the mean CE over the trailing 20 steps falls below this.
    pub early_stop_ce: Option<f64>,
    /// Evaluate on the selection split every this many steps (0 = never).
    pub eval_every: usize,
    /// Linear learning-rate warmup steps (0 disables warmup).
    pub warmup_steps: usize,
    /// Cosine-decay floor as a fraction of the peak learning rate
    /// (1.0 keeps the rate constant after warmup).
    pub final_lr_fraction: f64,
    /// Stop once a selection-split evaluation reaches this exact match.
    pub early_stop_em: Option<f64>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 3000,
            seed: 0,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            early_stop_ce: Some(0.02),
            eval_every: 0,
            warmup_steps: 0,
            final_lr_fraction: 1.0,
            early_stop_em: None,
        }
    }
}

// ───────────────────────────────────────────────────────────────────────
// Logs
// ───────────────────────────────────────────────────────────────────────

/// One optimizer step's logged losses. `total = ce + alpha·kd` holds as an
/// exact arithmetic identity (the total is computed from the two logged
/// parts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Step index (0-based).
    pub step: usize,
    /// Batch-mean cross-entropy.
    pub ce: f64,
    /// Batch-mean distillation term (temperature-scaled).
    pub kd: f64,
    /// Weighting in effect.
    pub alpha: f64,
    /// ce + alpha·kd.
    pub total: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
}

/// Periodic held-out quality measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Step at which the measurement ran.
    pub step: usize,
    /// Exact-match rate on the selection split.
    pub exact_match: f64,
    /// Aggregate similarity on the selection split.
    pub anls: f64,
}

/// Full training trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Per-step loss records.
    pub steps: Vec<StepRecord>,
    /// Periodic selection-split measurements.
    pub evals: Vec<EvalRecord>,
    /// Free-form notes (auto-α choice, early stopping, ...).
    pub notes: Vec<String>,
    /// The α in effect for the run.
    pub alpha: f64,
    /// True when early stopping fired before the step budget.
    pub stopped_early: bool,
}

// ───────────────────────────────────────────────────────────────────────
// Loss assembly
// ───────────────────────────────────────────────────────────────────────

/// The three loss nodes of one distillation sample or batch.
#[derive(Debug, Clone, Copy)]
pub struct KdLossParts {
    /// ce + α·kd.
    pub total: Var,
    /// Ground-truth cross-entropy.
    pub ce: Var,
    /// T²-scaled softened divergence.
    pub kd: Var,
}

/// Builds `total = CE + α·KD` on a graph from logits already gathered at
/// the scored positions. `student` and `teacher` must be (positions ×
/// vocab) nodes of equal shape; `targets` are the ground-truth ids per
/// row. KD is T²·KL between the T-softened distributions, teacher-leading
/// by default.
pub fn kd_loss(
    g: &mut Graph,
    student: Var,
    teacher: Var,
    targets: &[usize],
    temperature: f64,
    alpha: f64,
    direction: KdDirection,
) -> Result<KdLossParts> {
    if g.value(student).shape() != g.value(teacher).shape() {
        return Err(Error::Contract(format!(
            "student logits {:?} vs teacher logits {:?}",
            g.value(student).shape(),
            g.value(teacher).shape()
        )));
    }
    let ce = g.cross_entropy(student, targets)?;
    let kl = match direction {
        KdDirection::TeacherLeads => g.kl_divergence(teacher, student, temperature)?,
        KdDirection::StudentLeads => g.kl_divergence(student, teacher, temperature)?,
    };
    let kd = g.scale(kl, temperature * temperature)?;
    let weighted = g.scale(kd, alpha)?;
    let total = g.add(ce, weighted)?;
    Ok(KdLossParts { total, ce, kd })
}

/// Balances the loss terms: α = median(CE) / median(KD) over warmup
/// batches, clamped to [1e-3, 1e3]. A zero KD median (student already
/// matches teacher) yields α = 1 with an explanatory note.
pub fn auto_alpha(ce_samples: &[f64], kd_samples: &[f64]) -> Result<(f64, Option<String>)> {
    if ce_samples.is_empty() || kd_samples.is_empty() {
        return Err(Error::Param("auto-α needs at least one warmup batch of each loss".into()));
    }
    let kd_med = median(kd_samples);
    if kd_med == 0.0 {
        return Ok((
            1.0,
            Some("distillation term is zero at warmup (student already matches teacher); α set to 1".into()),
        ));
    }
    let alpha = (median(ce_samples) / kd_med).clamp(1e-3, 1e3);
    Ok((alpha, None))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scalar loss values of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdLossValues {
    /// ce + α·kd.
    pub total: f64,
    /// Ground-truth cross-entropy.
    pub ce: f64,
    /// T²-scaled softened divergence.
    pub kd: f64,
}

/// One full distillation loss evaluation for a single sample, with
/// gradients for every trainable student-decoder parameter. Encodes the
/// document with the student's (frozen) encoder and teacher-forces both
/// models. This is the reference path the finite-difference oracle checks;
/// training uses the same assembly with cached encodings.
pub fn kd_sample_loss(
    student: &MiniModel,
    teacher: &MiniModel,
    doc: &SynthDoc,
    qa: &QAPair,
    cfg: &KDConfig,
    alpha: f64,
) -> Result<(KdLossValues, BTreeMap<String, Tensor>)> {
    cfg.validate()?;
    let memory = student.encode(&doc.grid)?;
    let prompt = encode_prompt(qa, student.config.max_prompt)?;
    let teacher_rows = teacher_rows_at_loss_positions(teacher, &memory, &prompt)?;
    let trainable = student.decoder_trainable_names();
    kd_forward_backward(student, &memory, &prompt, &teacher_rows, cfg, alpha, &trainable)
}

/// Teacher logits gathered at the scored positions (value-level, no tape).
fn teacher_rows_at_loss_positions(
    teacher: &MiniModel,
    memory: &Tensor,
    prompt: &EncodedPrompt,
) -> Result<Tensor> {
    let (logits, _) =
        teacher.decode_teacher_forced(memory, &prompt.tokens, &MaskSet::identity(), &CaptureSet::None)?;
    gather_rows_value(&logits, &prompt.loss_positions)
}

fn gather_rows_value(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let cols = t.shape()[1];
    let mut out = Tensor::zeros(&[rows.len(), cols]);
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(t.row(r));
    }
    Ok(out)
}

/// Builds the per-sample KD graph and runs backward. Returns loss values
/// and name-keyed gradients.
fn kd_forward_backward(
    student: &MiniModel,
    memory: &Tensor,
    prompt: &EncodedPrompt,
    teacher_rows: &Tensor,
    cfg: &KDConfig,
    alpha: f64,
    trainable: &std::collections::BTreeSet<String>,
) -> Result<(KdLossValues, BTreeMap<String, Tensor>)> {
    let pass = student.forward_pass(
        EncoderInput::Memory(memory),
        &prompt.tokens,
        &ForwardOpts {
            masks: &MaskSet::identity(),
            patches: &[],
            capture: &CaptureSet::None,
            trainable: Some(trainable),
        },
    )?;
    let mut g = pass.graph;
    let rows = g.gather_rows(pass.logits, &prompt.loss_positions)?;
    let t_rows = g.constant(teacher_rows.clone());
    let targets: Vec<usize> = prompt.targets().iter().map(|&t| t as usize).collect();
    let parts = kd_loss(&mut g, rows, t_rows, &targets, cfg.temperature, alpha, cfg.direction)?;
    let values = KdLossValues {
        total: g.value(parts.total).scalar_value()?,
        ce: g.value(parts.ce).scalar_value()?,
        kd: g.value(parts.kd).scalar_value()?,
    };
    if !values.total.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {values:?}")));
    }
    let grads = g.backward(parts.total)?;
    let mut by_name = BTreeMap::new();
    for (name, var) in &pass.param_vars {
        if let Some(grad) = grads.get(*var) {
            by_name.insert(name.clone(), grad.clone());
        }
    }
    Ok((values, by_name))
}

// ───────────────────────────────────────────────────────────────────────
// Optimizer
// ───────────────────────────────────────────────────────────────────────

/// Adam with bias correction and global-norm clipping. State is keyed by
/// parameter name in sorted order, so updates are deterministic.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam { lr, beta1, beta2, epsilon, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one step from accumulated gradients; returns the pre-clip
    /// global gradient norm.
    fn step(&mut self, model: &mut MiniModel, grads: &BTreeMap<String, Tensor>, clip: f64) -> Result<f64> {
        let norm: f64 = grads
            .values()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {:?}", name)))?;
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = param.data_mut();
            for i in 0..n {
                let gi = grad.data()[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(norm)
    }
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>, weight: f64) {
    for (name, grad) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g * weight;
                }
            }
            None => {
                into.insert(name, grad.scaled(weight));
            }
        }
    }
}

// ───────────────────────────────────────────────────────────────────────
// Shared training plumbing
// ───────────────────────────────────────────────────────────────────────

/// Dataset views used by the trainers.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    /// The full dataset.
    pub dataset: &'a [(SynthDoc, QAPair)],
    /// Indices to draw training batches from.
    pub train: &'a [usize],
    /// Indices for periodic quality measurements (may be empty).
    pub selection: &'a [usize],
}

impl TrainData<'_> {
    fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Param("training split is empty".into()));
        }
        let n = self.dataset.len();
        if self.train.iter().chain(self.selection).any(|&i| i >= n) {
            return Err(Error::Param("split index out of dataset range".into()));
        }
        Ok(())
    }
}

/// Greedy generation + scoring over `indices`, reusing cached encodings.
fn quick_eval(
    model: &MiniModel,
    data: &TrainData<'_>,
    indices: &[usize],
    memory_cache: &mut BTreeMap<usize, Tensor>,
) -> Result<(f64, f64)> {
    let max_new = model.config.grid_cols + 2;
    let mut predictions = Vec::with_capacity(indices.len());
    let mut references = Vec::with_capacity(indices.len());
    let mut exact = 0usize;
    for &i in indices {
        let (doc, qa) = &data.dataset[i];
        let memory = cached_memory(model, memory_cache, i, doc)?;
        let prompt = encode_prompt(qa, model.config.max_prompt)?;
        let generated = model.generate(&memory, prompt.generation_prefix(), max_new, &MaskSet::identity())?;
        let pred = decode_tokens(&generated);
        let reference = decode_tokens(&qa.answer);
        if exact_match(&pred, &reference) {
            exact += 1;
        }
        predictions.push(pred);
        references.push(vec![reference]);
    }
    let a = anls(&predictions, &references, DEFAULT_TAU)?;
    Ok((exact as f64 / indices.len().max(1) as f64, a))
}

/// Encoding cache keyed by sample index (unique within one dataset slice,
/// unlike document ids, which are only unique per source dataset).
fn cached_memory(
    model: &MiniModel,
    cache: &mut BTreeMap<usize, Tensor>,
    sample: usize,
    doc: &SynthDoc,
) -> Result<Tensor> {
    if let Some(m) = cache.get(&sample) {
        return Ok(m.clone());
    }
    let m = model.encode(&doc.grid)?;
    cache.insert(sample, m.clone());
    Ok(m)
}

/// Draws one batch of sample indices with replacement.
fn draw_batch(rng: &mut ChaCha20Rng, pool: &[usize], size: usize) -> Vec<usize> {
    (0..size).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

// ───────────────────────────────────────────────────────────────────────
// Distillation
// ───────────────────────────────────────────────────────────────────────

/// Distills `student` against the frozen `teacher`.
///
/// Teacher parameters, the student encoder, and the student embeddings are
/// never touched (the frozen-set fingerprint is constant). Unstructured
/// weight masks, when supplied, are re-applied after every optimizer step
/// so pinned weights stay exactly zero. A zero step budget returns the
/// student unchanged. Deterministic given the config seed.
pub fn train_distill(
    mut student: MiniModel,
    teacher: &MiniModel,
    data: &TrainData<'_>,
    cfg: &KDConfig,
    weight_masks: Option<&WeightMaskSet>,
) -> Result<(MiniModel, TrainLog)> {
    cfg.validate()?;
    data.validate()?;
    let trainable = student.decoder_trainable_names();
    if trainable.is_empty() {
        return Err(Error::Config("student has no trainable decoder parameters".into()));
    }

    let mut log = TrainLog::default();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut memory_cache: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut teacher_rows_cache: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut prompt_cache: BTreeMap<usize, EncodedPrompt> = BTreeMap::new();

    // Per-sample forward pieces shared by warmup and training.
    let sample_parts = |student: &MiniModel,
                            idx: usize,
                            alpha: f64,
                            memory_cache: &mut BTreeMap<usize, Tensor>,
                            teacher_rows_cache: &mut BTreeMap<usize, Tensor>,
                            prompt_cache: &mut BTreeMap<usize, EncodedPrompt>|
     -> Result<(KdLossValues, BTreeMap<String, Tensor>)> {
        let (doc, qa) = &data.dataset[idx];
        let memory = cached_memory(student, memory_cache, idx, doc)?;
        if !prompt_cache.contains_key(&idx) {
            prompt_cache.insert(idx, encode_prompt(qa, student.config.max_prompt)?);
        }
        let prompt = prompt_cache.get(&idx).expect("just inserted").clone();
        if !teacher_rows_cache.contains_key(&idx) {
            let rows = teacher_rows_at_loss_positions(teacher, &memory, &prompt)?;
            teacher_rows_cache.insert(idx, rows);
        }
        let teacher_rows = teacher_rows_cache.get(&idx).expect("just inserted").clone();
        kd_forward_backward(student, &memory, &prompt, &teacher_rows, cfg, alpha, &trainable)
    };

    // Resolve α.
    let alpha = match cfg.alpha {
        AlphaSetting::Fixed(a) => a,
        AlphaSetting::Auto => {
            let mut ce_meds = Vec::new();
            let mut kd_meds = Vec::new();
            for _ in 0..cfg.warmup_batches.max(1) {
                let batch = draw_batch(&mut rng, data.train, cfg.batch_size);
                let mut ce_sum = 0.0;
                let mut kd_sum = 0.0;
                for idx in batch {
                    let (values, _) = sample_parts(
                        &student,
                        idx,
                        0.0,
                        &mut memory_cache,
                        &mut teacher_rows_cache,
                        &mut prompt_cache,
                    )?;
                    ce_sum += values.ce;
                    kd_sum += values.kd;
                }
                ce_meds.push(ce_sum / cfg.batch_size as f64);
                kd_meds.push(kd_sum / cfg.batch_size as f64);
            }
            let (alpha, note) = auto_alpha(&ce_meds, &kd_meds)?;
            log.notes.push(format!(
                "auto-α: median CE {:.6}, median KD {:.6} → α = {:.6}",
                median(&ce_meds),
                median(&kd_meds),
                alpha
            ));
            if let Some(note) = note {
                log.notes.push(note);
            }
            alpha
        }
    };
    log.alpha = alpha;

    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    for step in 0..cfg.steps {
        let batch = draw_batch(&mut rng, data.train, cfg.batch_size);
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut ce_sum = 0.0;
        let mut kd_sum = 0.0;
        for idx in batch {
            let (values, sample_grads) = sample_parts(
                &student,
                idx,
                alpha,
                &mut memory_cache,
                &mut teacher_rows_cache,
                &mut prompt_cache,
            )?;
            ce_sum += values.ce;
            kd_sum += values.kd;
            accumulate(&mut grads, sample_grads, 1.0 / cfg.batch_size as f64);
        }
        let grad_norm = adam.step(&mut student, &grads, cfg.grad_clip)?;
        if let Some(masks) = weight_masks {
            masks.apply(&mut student)?;
        }
        let ce = ce_sum / cfg.batch_size as f64;
        let kd = kd_sum / cfg.batch_size as f64;
        log.steps.push(StepRecord { step, ce, kd, alpha, total: ce + alpha * kd, grad_norm });

        if cfg.eval_every > 0 && !data.selection.is_empty() && (step + 1) % cfg.eval_every == 0 {
            let (em, a) = quick_eval(&student, data, data.selection, &mut memory_cache)?;
            log.evals.push(EvalRecord { step, exact_match: em, anls: a });
        }
    }
    Ok((student, log))
}

// ───────────────────────────────────────────────────────────────────────
// Teacher training
// ───────────────────────────────────────────────────────────────────────

/// Trains every parameter of the model (encoder, embeddings, decoder) with
/// plain cross-entropy over the scored prompt positions. Documents are
/// encoded on the tape so encoder gradients flow. Aborts with a diagnostic
/// if the loss turns non-finite. Early-stops when the trailing-20-step
/// mean CE drops below the configured threshold.
/// Learning rate at one teacher step: linear warmup to the peak, then
/// cosine decay to `final_lr_fraction` of it over the remaining budget.
fn scheduled_lr(cfg: &TeacherConfig, step: usize) -> f64 {
    let peak = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return peak * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    if cfg.final_lr_fraction >= 1.0 || cfg.steps <= cfg.warmup_steps + 1 {
        return peak;
    }
    let floor = peak * cfg.final_lr_fraction;
    let span = (cfg.steps - cfg.warmup_steps - 1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn train_teacher(
    mut model: MiniModel,
    data: &TrainData<'_>,
    cfg: &TeacherConfig,
) -> Result<(MiniModel, TrainLog)> {
    data.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let trainable = model.all_param_names();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut log = TrainLog::default();
    let mut eval_cache: BTreeMap<usize, Tensor> = BTreeMap::new();

    for step in 0..cfg.steps {
        adam.set_lr(scheduled_lr(cfg, step));
        let batch = draw_batch(&mut rng, data.train, cfg.batch_size);
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut ce_sum = 0.0;
        for idx in batch {
            let (doc, qa) = &data.dataset[idx];
            let prompt = encode_prompt(qa, model.config.max_prompt)?;
            let pass = model.forward_pass(
                EncoderInput::Grid(&doc.grid),
                &prompt.tokens,
                &ForwardOpts {
                    masks: &MaskSet::identity(),
                    patches: &[],
                    capture: &CaptureSet::None,
                    trainable: Some(&trainable),
                },
            )?;
            let mut g = pass.graph;
            let rows = g.gather_rows(pass.logits, &prompt.loss_positions)?;
            let targets: Vec<usize> = prompt.targets().iter().map(|&t| t as usize).collect();
            let ce = g.cross_entropy(rows, &targets)?;
            let ce_value = g.value(ce).scalar_value()?;
            if !ce_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "cross-entropy became non-finite at step {step} (sample {idx})"
                )));
            }
            ce_sum += ce_value;
            let sample_grads = g.backward(ce)?;
            let mut by_name = BTreeMap::new();
            for (name, var) in &pass.param_vars {
                if let Some(grad) = sample_grads.get(*var) {
                    by_name.insert(name.clone(), grad.clone());
                }
            }
            accumulate(&mut grads, by_name, 1.0 / cfg.batch_size as f64);
        }
        let grad_norm = adam.step(&mut model, &grads, cfg.grad_clip)?;
        let ce = ce_sum / cfg.batch_size as f64;
        log.steps.push(StepRecord { step, ce, kd: 0.0, alpha: 0.0, total: ce, grad_norm });

        if cfg.eval_every > 0 && !data.selection.is_empty() && (step + 1) % cfg.eval_every == 0 {
            // The encoder is training, so cached encodings go stale.
            eval_cache.clear();
            let (em, a) = quick_eval(&model, data, data.selection, &mut eval_cache)?;
            log.evals.push(EvalRecord { step, exact_match: em, anls: a });
            if let Some(threshold) = cfg.early_stop_em {
                if em >= threshold {
                    log.notes.push(format!(
                        "early stop at step {step}: selection exact match {em:.4} ≥ {threshold}"
                    ));
                    log.stopped_early = true;
                    break;
                }
            }
        }

        if let Some(threshold) = cfg.early_stop_ce {
            let window = 20.min(log.steps.len());
            let recent: f64 =
                log.steps[log.steps.len() - window..].iter().map(|s| s.ce).sum::<f64>() / window as f64;
            if recent <= threshold {
                log.notes.push(format!(
                    "early stop at step {step}: trailing-{window} mean CE {recent:.6} ≤ {threshold}"
                ));
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((model, log))
}

// ───────────────────────────────────────────────────────────────────────
// Freezing verification
// ───────────────────────────────────────────────────────────────────────

/// Hex digest over the selected parameters (name, shape, little-endian
/// bytes, in sorted name order). Used to verify that frozen parameter sets
/// never change across training.
pub fn parameter_fingerprint<F: Fn(&str) -> bool>(model: &MiniModel, include: F) -> String {
    let mut hasher = Sha256::new();
    for (name, tensor) in model.params() {
        if !include(name) {
            continue;
        }
        hasher.update(name.as_bytes());
        for &dim in tensor.shape() {
            hasher.update((dim as u64).to_le_bytes());
        }
        for &x in tensor.data() {
            hasher.update(x.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The names distillation must never touch: everything except the decoder
/// sub-layer parameters.
pub fn frozen_name(name: &str) -> bool {
    !name.starts_with("decoder.L")
}

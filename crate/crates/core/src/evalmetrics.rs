//! Evaluation harness: normalized edit similarity (with cutoff), exact
//! match, teacher-forced perplexity, per-task breakdowns, and model
//! comparison.
//!
//! String scoring uses answer normalization (lowercase, whitespace runs
//! collapsed, ends trimmed) before comparison. Normalized edit similarity
//! is `1 − levenshtein(pred, ref) / max(len(pred), len(ref))`; the
//! aggregate score averages per-sample similarities after zeroing any
//! below the cutoff τ (default 0.5). With several references per sample
//! the best similarity is taken before thresholding. Exact match is
//! normalized string equality, so an exact match always scores 1 — the
//! exact-match rate can never exceed the aggregate similarity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CaptureSet, MaskSet, MiniModel};
use crate::synthdocs::{decode_tokens, encode_prompt, QAPair, SynthDoc};
use crate::tensor::Tensor;

/// Default similarity cutoff.
pub const DEFAULT_TAU: f64 = 0.5;

// ───────────────────────────────────────────────────────────────────────
// String similarity
// ───────────────────────────────────────────────────────────────────────

/// Lowercases, trims, and collapses whitespace runs to single spaces.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Levenshtein distance over characters (insert/delete/substitute, unit
/// costs).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized edit similarity in [0, 1] after answer normalization.
/// Two empty strings are identical (similarity 1).
pub fn nls(prediction: &str, reference: &str) -> f64 {
    let p = normalize_answer(prediction);
    let r = normalize_answer(reference);
    let denom = p.chars().count().max(r.chars().count());
    if denom == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&p, &r) as f64 / denom as f64
}

/// Mean over samples of the best reference similarity, zeroed below τ.
pub fn anls(predictions: &[String], references: &[Vec<String>], tau: f64) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} reference sets",
            predictions.len(),
            references.len()
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Param(format!("τ must lie in [0,1], got {tau}")));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pred, refs) in predictions.iter().zip(references) {
        let best = refs.iter().map(|r| nls(pred, r)).fold(0.0, f64::max);
        total += if best >= tau { best } else { 0.0 };
    }
    Ok(total / predictions.len() as f64)
}

/// Normalized exact match.
pub fn exact_match(prediction: &str, reference: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(reference)
}

// ───────────────────────────────────────────────────────────────────────
// Model evaluation
// ───────────────────────────────────────────────────────────────────────

/// Identification and cost fields attached to a report by the caller (the
/// accountant computes the cost numbers).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalMeta {
    /// Model identifier (e.g. "teacher", "guided-coarse").
    pub model_id: String,
    /// Mask / recipe identifier ("identity" when unmasked).
    pub recipe_id: String,
    /// Which split the samples came from.
    pub split_id: String,
    /// Parameter count from the accountant.
    pub param_count: usize,
    /// Forward cost from the accountant (convention documented alongside).
    pub flops: f64,
    /// Seeds involved in producing the model.
    pub seeds: Vec<u64>,
}

/// Evaluation results for one model on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Model identifier.
    pub model_id: String,
    /// Mask / recipe identifier.
    pub recipe_id: String,
    /// Split identifier.
    pub split_id: String,
    /// Aggregate normalized edit similarity with cutoff.
    pub anls: f64,
    /// Exact-match rate.
    pub exact_match: f64,
    /// Teacher-forced perplexity over loss positions.
    pub perplexity: f64,
    /// Aggregate similarity per task kind.
    pub per_task_anls: BTreeMap<String, f64>,
    /// Parameter count.
    pub param_count: usize,
    /// Forward cost.
    pub flops: f64,
    /// Samples evaluated.
    pub sample_count: usize,
    /// Seeds involved.
    pub seeds: Vec<u64>,
}

/// Greedy-decodes every sample and scores it.
///
/// Per sample: encode the document (cached per sample index), generate
/// greedily from the question prefix, and score the decoded string against
/// the reference answer.
/// Perplexity is computed teacher-forced: the exponential of the mean
/// cross-entropy pooled over every scored position of every sample.
pub fn evaluate(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
    masks: &MaskSet,
    meta: &EvalMeta,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Param("evaluation needs at least one sample".into()));
    }
    let max_new = model.config.grid_cols + 2;
    let mut memory_cache: BTreeMap<usize, Tensor> = BTreeMap::new();

    let mut predictions = Vec::with_capacity(indices.len());
    let mut references = Vec::with_capacity(indices.len());
    let mut by_task: BTreeMap<String, (Vec<String>, Vec<Vec<String>>)> = BTreeMap::new();
    let mut exact = 0usize;
    let mut nll_sum = 0.0;
    let mut nll_count = 0usize;

    for &i in indices {
        let (doc, qa) = dataset
            .get(i)
            .ok_or_else(|| Error::Param(format!("sample index {} out of range", i)))?;
        // Keyed by sample index, not doc_id: doc_ids restart at zero in
        // every generated dataset, so they alias when datasets are
        // concatenated.
        let memory = match memory_cache.get(&i) {
            Some(m) => m.clone(),
            None => {
                let m = model.encode(&doc.grid)?;
                memory_cache.insert(i, m.clone());
                m
            }
        };
        let prompt = encode_prompt(qa, model.config.max_prompt)?;

        // Greedy generation and string scoring.
        let generated = model.generate(&memory, prompt.generation_prefix(), max_new, masks)?;
        let prediction = decode_tokens(&generated);
        let reference = decode_tokens(&qa.answer);
        if exact_match(&prediction, &reference) {
            exact += 1;
        }
        let entry = by_task.entry(doc.task_kind.name().to_string()).or_default();
        entry.0.push(prediction.clone());
        entry.1.push(vec![reference.clone()]);
        predictions.push(prediction);
        references.push(vec![reference]);

        // Teacher-forced negative log-likelihood, pooled over positions.
        let (logits, _) = model.decode_teacher_forced(&memory, &prompt.tokens, masks, &CaptureSet::None)?;
        let targets = prompt.targets();
        for (k, &pos) in prompt.loss_positions.iter().enumerate() {
            let row = logits.row(pos);
            let target = targets[k] as usize;
            nll_sum += log_sum_exp(row) - row[target];
            nll_count += 1;
        }
    }

    let anls_score = anls(&predictions, &references, DEFAULT_TAU)?;
    let mut per_task_anls = BTreeMap::new();
    for (kind, (preds, refs)) in &by_task {
        per_task_anls.insert(kind.clone(), anls(preds, refs, DEFAULT_TAU)?);
    }

    Ok(EvalReport {
        model_id: meta.model_id.clone(),
        recipe_id: meta.recipe_id.clone(),
        split_id: meta.split_id.clone(),
        anls: anls_score,
        exact_match: exact as f64 / indices.len() as f64,
        perplexity: (nll_sum / nll_count as f64).exp(),
        per_task_anls,
        param_count: meta.param_count,
        flops: meta.flops,
        sample_count: indices.len(),
        seeds: meta.seeds.clone(),
    })
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

// ───────────────────────────────────────────────────────────────────────
// Comparison
// ───────────────────────────────────────────────────────────────────────

/// One row of a model comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Model identifier.
    pub model_id: String,
    /// Mask / recipe identifier.
    pub recipe_id: String,
    /// Aggregate similarity score.
    pub anls: f64,
    /// Score delta against the baseline row.
    pub anls_delta: f64,
    /// Exact-match rate.
    pub exact_match: f64,
    /// Teacher-forced perplexity.
    pub perplexity: f64,
    /// Parameter count.
    pub param_count: usize,
    /// Parameters as a fraction of the baseline.
    pub param_fraction: f64,
    /// Forward cost.
    pub flops: f64,
    /// Cost as a fraction of the baseline.
    pub flop_fraction: f64,
}

/// Reports ranked by score with fractions against a named baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    /// Split shared by all rows.
    pub split_id: String,
    /// Baseline model id (fractions are relative to it).
    pub baseline_id: String,
    /// Rows sorted by score descending (ties broken by model id).
    pub rows: Vec<ComparisonRow>,
}

/// Ranks reports by score and expresses costs relative to the baseline
/// report. All reports must come from the same split.
pub fn compare(reports: &[EvalReport], baseline_id: &str) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(Error::Param("comparison needs at least two reports".into()));
    }
    let split_id = reports[0].split_id.clone();
    if reports.iter().any(|r| r.split_id != split_id) {
        return Err(Error::Contract(format!(
            "comparison mixes splits: {:?}",
            reports.iter().map(|r| r.split_id.as_str()).collect::<Vec<_>>()
        )));
    }
    let baseline = reports
        .iter()
        .find(|r| r.model_id == baseline_id)
        .ok_or_else(|| Error::Param(format!("baseline {:?} not among the reports", baseline_id)))?;
    let (base_anls, base_params, base_flops) = (baseline.anls, baseline.param_count, baseline.flops);

    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            model_id: r.model_id.clone(),
            recipe_id: r.recipe_id.clone(),
            anls: r.anls,
            anls_delta: r.anls - base_anls,
            exact_match: r.exact_match,
            perplexity: r.perplexity,
            param_count: r.param_count,
            param_fraction: r.param_count as f64 / base_params as f64,
            flops: r.flops,
            flop_fraction: r.flops / base_flops,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.anls
            .partial_cmp(&a.anls)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    Ok(ComparisonTable {
        split_id,
        baseline_id: baseline_id.to_string(),
        rows,
    })
}

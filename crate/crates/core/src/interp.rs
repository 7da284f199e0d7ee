//! Interpretability toolkit for the decoder: teacher-forced perplexity
//! probes, sub-layer skipping sweeps, three-run activation patching, token
//! reprojection, attention-head statistics, memory transcription probes,
//! query pathway search, and retrieval-hypothesis classification for
//! key-value documents.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    CaptureSet, HeadId, MaskSet, MiniModel, Site, SiteKind, SitePatch, SublayerId, SublayerKind,
    ANSWER_START_TOKEN, EOS_TOKEN,
};
use crate::synthdocs::{
    decode_tokens, encode_prompt, EncodedPrompt, QAPair, SynthDoc, TaskKind, SPACE_TOKEN,
};
use crate::tensor::Tensor;

// ───────────────────────────────────────────────────────────────────────
// Teacher-forced perplexity
// ───────────────────────────────────────────────────────────────────────

/// Perplexity over the loss positions of a dataset subset: the exponential
/// of the mean cross-entropy pooled over every scored position of every
/// sample. Patches (if any) are applied to every sample's forward pass, so
/// they must fit every prompt in the subset.
pub fn perplexity_teacher_forced(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
    masks: &MaskSet,
    patches: &[SitePatch],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Param("perplexity needs at least one sample".into()));
    }
    let mut cache: BTreeMap<usize, Tensor> = BTreeMap::new();
    // Accumulated per position (not per sample) so the pooled sum matches
    // the evaluation harness bit for bit on identical inputs.
    let mut nll_sum = 0.0;
    let mut nll_count = 0usize;
    for &i in indices {
        let (doc, qa) = fetch(dataset, i)?;
        let memory = cached_memory(model, &mut cache, doc, i)?;
        let prompt = encode_prompt(qa, model.config.max_prompt)?;
        let logits = model.decode_with_patch(&memory, &prompt.tokens, masks, patches)?;
        let targets = prompt.targets();
        for (k, &pos) in prompt.loss_positions.iter().enumerate() {
            let row = logits.row(pos);
            nll_sum += log_sum_exp(row) - row[targets[k] as usize];
            nll_count += 1;
        }
    }
    Ok((nll_sum / nll_count as f64).exp())
}

/// Negative log-likelihood at each loss position of one prompt, in
/// position order. Callers pool these one at a time so that every probe
/// accumulates in the same order and identical logits give identical
/// pooled results bit for bit.
fn prompt_nll(
    model: &MiniModel,
    memory: &Tensor,
    prompt: &EncodedPrompt,
    masks: &MaskSet,
    patches: &[SitePatch],
) -> Result<Vec<f64>> {
    let logits = model.decode_with_patch(memory, &prompt.tokens, masks, patches)?;
    Ok(logits_nll(&logits, prompt))
}

/// Per-position negative log-likelihoods from precomputed logits.
fn logits_nll(logits: &Tensor, prompt: &EncodedPrompt) -> Vec<f64> {
    let targets = prompt.targets();
    prompt
        .loss_positions
        .iter()
        .enumerate()
        .map(|(k, &pos)| {
            let row = logits.row(pos);
            log_sum_exp(row) - row[targets[k] as usize]
        })
        .collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn fetch<'a>(
    dataset: &'a [(SynthDoc, QAPair)],
    i: usize,
) -> Result<(&'a SynthDoc, &'a QAPair)> {
    dataset
        .get(i)
        .map(|(d, q)| (d, q))
        .ok_or_else(|| Error::Param(format!("sample index {} out of range", i)))
}

/// Encoder output cached by sample index (doc_ids restart per generated
/// dataset, so they alias across concatenated datasets).
fn cached_memory(
    model: &MiniModel,
    cache: &mut BTreeMap<usize, Tensor>,
    doc: &SynthDoc,
    i: usize,
) -> Result<Tensor> {
    if let Some(m) = cache.get(&i) {
        return Ok(m.clone());
    }
    let m = model.encode(&doc.grid)?;
    cache.insert(i, m.clone());
    Ok(m)
}

// ───────────────────────────────────────────────────────────────────────
// Sweeps
// ───────────────────────────────────────────────────────────────────────

/// Result of a one-intervention-at-a-time sweep: perplexity deltas against
/// a shared baseline, keyed by the intervention's name (a sub-layer id, a
/// head id, or a reprojection boundary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Unmodified-model perplexity on the same subset.
    pub baseline: f64,
    /// Perplexity minus baseline, per intervention.
    pub deltas: BTreeMap<String, f64>,
    /// Which split the samples came from.
    pub split_id: String,
    /// Samples in the subset.
    pub sample_count: usize,
}

impl SweepResult {
    /// The intervention with the largest perplexity increase. Ties break
    /// toward the lexicographically first name; `None` when empty.
    pub fn most_critical(&self) -> Option<(&str, f64)> {
        self.deltas
            .iter()
            .max_by(|a, b| {
                a.1.partial_cmp(b.1)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| b.0.cmp(a.0))
            })
            .map(|(k, &v)| (k.as_str(), v))
    }
}

/// Skips one sub-layer at a time and measures the perplexity delta on the
/// subset. Interventions are keyed by sub-layer id (`"C3"`-style).
pub fn skip_sweep(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
    split_id: &str,
) -> Result<SweepResult> {
    let baseline =
        perplexity_teacher_forced(model, dataset, indices, &MaskSet::identity(), &[])?;
    let mut deltas = BTreeMap::new();
    for id in model.present_sublayers() {
        let ppl =
            perplexity_teacher_forced(model, dataset, indices, &MaskSet::skipping(id), &[])?;
        deltas.insert(id.to_string(), ppl - baseline);
    }
    Ok(SweepResult {
        baseline,
        deltas,
        split_id: split_id.to_string(),
        sample_count: indices.len(),
    })
}

// ───────────────────────────────────────────────────────────────────────
// Activation patching
// ───────────────────────────────────────────────────────────────────────

/// Where a patch tensor comes from.
#[derive(Debug, Clone)]
pub enum PatchSource {
    /// Zeros shaped like the site.
    Zero,
    /// A single activation row (1 × width) broadcast over the patched
    /// positions; see [`mean_site_value`]. Two-dimensional sites only.
    Mean(Tensor),
    /// The same site captured from the other run of a three-run protocol.
    CounterpartRun,
    /// A caller-supplied tensor in the site's full shape.
    Explicit(Tensor),
}

/// One patch intervention: a site, a source for the replacement value, and
/// an optional token-position filter (`None` patches every position).
#[derive(Debug, Clone)]
pub struct PatchSpec {
    /// Which activation to overwrite.
    pub site: Site,
    /// Where the replacement value comes from.
    pub source: PatchSource,
    /// Token rows to overwrite; `None` = all.
    pub positions: Option<Vec<usize>>,
}

impl PatchSpec {
    /// Patch covering every position.
    pub fn full(site: Site, source: PatchSource) -> Self {
        PatchSpec { site, source, positions: None }
    }

    /// Patch restricted to the given token rows.
    pub fn at(site: Site, source: PatchSource, positions: Vec<usize>) -> Self {
        PatchSpec { site, source, positions: Some(positions) }
    }
}

/// Which run receives the patch in a three-run protocol: noising injects
/// the corrupt run's activation into the clean run; denoising the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchDirection {
    /// Corrupt activation into the clean run (the default framing).
    Noising,
    /// Clean activation into the corrupt run.
    Denoising,
}

/// One run's outcome: teacher-forced perplexity on its own targets plus
/// the greedy generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// Teacher-forced perplexity over the run's loss positions.
    pub perplexity: f64,
    /// Greedily generated answer tokens.
    pub tokens: Vec<u32>,
    /// The generated tokens decoded to text.
    pub output: String,
}

/// The three runs of an activation-patching experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchExperiment {
    /// Unmodified run on the clean input.
    pub clean: RunOutcome,
    /// Unmodified run on the corrupt input.
    pub corrupt: RunOutcome,
    /// Receiving run (per direction) with the patch applied.
    pub patched: RunOutcome,
}

/// Mean activation row at a site: the average over every token position of
/// every reference sample, returned as a 1 × width tensor. Only defined
/// for two-dimensional sites.
pub fn mean_site_value(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
    site: Site,
    masks: &MaskSet,
) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::Param("mean patch needs at least one reference sample".into()));
    }
    let mut sum: Option<Vec<f64>> = None;
    let mut rows = 0usize;
    for &i in indices {
        let (doc, qa) = fetch(dataset, i)?;
        let memory = model.encode(&doc.grid)?;
        let prompt = encode_prompt(qa, model.config.max_prompt)?;
        let (_, trace) =
            model.decode_teacher_forced(&memory, &prompt.tokens, masks, &CaptureSet::of([site]))?;
        let captured = trace.get(&site).ok_or_else(|| Error::Patch {
            site: site.to_string(),
            detail: "site was not captured in the reference run".into(),
        })?;
        if captured.shape().len() != 2 {
            return Err(Error::Patch {
                site: site.to_string(),
                detail: "mean patches apply to two-dimensional sites only".into(),
            });
        }
        let width = captured.shape()[1];
        let acc = sum.get_or_insert_with(|| vec![0.0; width]);
        if acc.len() != width {
            return Err(Error::Patch {
                site: site.to_string(),
                detail: "site width varies across reference samples".into(),
            });
        }
        for r in 0..captured.rows() {
            for (a, &x) in acc.iter_mut().zip(captured.row(r)) {
                *a += x;
            }
        }
        rows += captured.rows();
    }
    let mut acc = sum.expect("at least one sample");
    for a in acc.iter_mut() {
        *a /= rows as f64;
    }
    let width = acc.len();
    Tensor::new(vec![1, width], acc)
}

/// Three-run activation patching: a clean run, a corrupt run, and a
/// patched run in which the receiving input (per `direction`) is rerun
/// with the specified site overwritten. Perplexity is measured against
/// each run's own ground truth; outputs are greedy generations under the
/// same intervention.
pub fn activation_patch_experiment(
    model: &MiniModel,
    clean: (&SynthDoc, &QAPair),
    corrupt: (&SynthDoc, &QAPair),
    spec: &PatchSpec,
    direction: PatchDirection,
    masks: &MaskSet,
) -> Result<PatchExperiment> {
    if spec.positions.is_some() {
        let clean_len = encode_prompt(clean.1, model.config.max_prompt)?.tokens.len();
        let corrupt_len = encode_prompt(corrupt.1, model.config.max_prompt)?.tokens.len();
        if clean_len != corrupt_len {
            return Err(Error::Param(format!(
                "position-indexed patches need equal prompt lengths, got {} vs {}",
                clean_len, corrupt_len
            )));
        }
    }
    let clean_run = run_outcome(model, clean.0, clean.1, masks, &[])?;
    let corrupt_run = run_outcome(model, corrupt.0, corrupt.1, masks, &[])?;
    let (recv, donor) = match direction {
        PatchDirection::Noising => (clean, corrupt),
        PatchDirection::Denoising => (corrupt, clean),
    };
    let patch = resolve_patch(model, spec, recv, donor, masks)?;
    let patched = run_outcome(model, recv.0, recv.1, masks, &[patch])?;
    Ok(PatchExperiment { clean: clean_run, corrupt: corrupt_run, patched })
}

/// Materializes a [`PatchSpec`] into a concrete [`SitePatch`] for the
/// receiving input's teacher-forced prompt.
fn resolve_patch(
    model: &MiniModel,
    spec: &PatchSpec,
    recv: (&SynthDoc, &QAPair),
    donor: (&SynthDoc, &QAPair),
    masks: &MaskSet,
) -> Result<SitePatch> {
    let value = match &spec.source {
        PatchSource::Explicit(t) => t.clone(),
        PatchSource::Zero => {
            let shape = captured_site_shape(model, recv.0, recv.1, spec.site, masks)?;
            Tensor::zeros(&shape)
        }
        PatchSource::Mean(row) => {
            let shape = captured_site_shape(model, recv.0, recv.1, spec.site, masks)?;
            if shape.len() != 2 {
                return Err(Error::Patch {
                    site: spec.site.to_string(),
                    detail: "mean patches apply to two-dimensional sites only".into(),
                });
            }
            if row.shape() != [1, shape[1]] {
                return Err(Error::Patch {
                    site: spec.site.to_string(),
                    detail: format!(
                        "mean row shape {:?} does not match site width {}",
                        row.shape(),
                        shape[1]
                    ),
                });
            }
            let mut tiled = Tensor::zeros(&shape);
            for r in 0..shape[0] {
                tiled.data_mut()[r * shape[1]..(r + 1) * shape[1]].copy_from_slice(row.row(0));
            }
            tiled
        }
        PatchSource::CounterpartRun => {
            let memory = model.encode(&donor.0.grid)?;
            let prompt = encode_prompt(donor.1, model.config.max_prompt)?;
            let (_, trace) = model.decode_teacher_forced(
                &memory,
                &prompt.tokens,
                masks,
                &CaptureSet::of([spec.site]),
            )?;
            trace
                .get(&spec.site)
                .cloned()
                .ok_or_else(|| Error::Patch {
                    site: spec.site.to_string(),
                    detail: "site was not captured in the counterpart run".into(),
                })?
        }
    };
    Ok(match &spec.positions {
        None => SitePatch::full(spec.site, value),
        Some(ps) => SitePatch::at_positions(spec.site, ps.clone(), value),
    })
}

/// Shape of a site's activation on one input's teacher-forced pass.
fn captured_site_shape(
    model: &MiniModel,
    doc: &SynthDoc,
    qa: &QAPair,
    site: Site,
    masks: &MaskSet,
) -> Result<Vec<usize>> {
    let memory = model.encode(&doc.grid)?;
    let prompt = encode_prompt(qa, model.config.max_prompt)?;
    let (_, trace) =
        model.decode_teacher_forced(&memory, &prompt.tokens, masks, &CaptureSet::of([site]))?;
    trace
        .get(&site)
        .map(|t| t.shape().to_vec())
        .ok_or_else(|| Error::Patch {
            site: site.to_string(),
            detail: "site was not captured on this input".into(),
        })
}

/// Teacher-forced perplexity and greedy generation for one sample under
/// the given patches.
fn run_outcome(
    model: &MiniModel,
    doc: &SynthDoc,
    qa: &QAPair,
    masks: &MaskSet,
    patches: &[SitePatch],
) -> Result<RunOutcome> {
    let memory = model.encode(&doc.grid)?;
    let prompt = encode_prompt(qa, model.config.max_prompt)?;
    let nlls = prompt_nll(model, &memory, &prompt, masks, patches)?;
    let perplexity = (nlls.iter().sum::<f64>() / nlls.len() as f64).exp();
    let tokens = patched_generate(
        model,
        &memory,
        prompt.generation_prefix(),
        model.config.grid_cols + 2,
        masks,
        patches,
    )?;
    let output = decode_tokens(&tokens);
    Ok(RunOutcome { perplexity, tokens, output })
}

/// Greedy generation with activation patches pinned at fixed token rows.
///
/// Each supplied patch carries a value tensor laid out for some reference
/// sequence length; at every decode step the patch is rebuilt for the
/// current length, pinning exactly the rows it covers that already exist
/// (positions beyond the current length, or beyond the value tensor, grow
/// freely). Three-dimensional sites (attention maps) cannot be pinned this
/// way because their row widths change as the sequence grows.
pub fn patched_generate(
    model: &MiniModel,
    memory: &Tensor,
    prefix: &[u32],
    max_new: usize,
    masks: &MaskSet,
    patches: &[SitePatch],
) -> Result<Vec<u32>> {
    if prefix.last() != Some(&ANSWER_START_TOKEN) {
        return Err(Error::Param(
            "generation prefix must end with the answer-start token".into(),
        ));
    }
    for p in patches {
        if p.value.shape().len() != 2 {
            return Err(Error::Patch {
                site: p.site.to_string(),
                detail: "attention-map patches are not supported during generation".into(),
            });
        }
    }
    let mut tokens = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && tokens.len() < model.config.max_prompt {
        let mut step_patches = Vec::with_capacity(patches.len());
        for p in patches {
            if let Some(sp) = step_patch(p, tokens.len()) {
                step_patches.push(sp);
            }
        }
        let logits = model.decode_with_patch(memory, &tokens, masks, &step_patches)?;
        let next = logits.argmax_rows()[tokens.len() - 1] as u32;
        if next == EOS_TOKEN {
            break;
        }
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

/// Rebuilds one pinned patch for the current sequence length; `None` when
/// no covered row exists yet.
fn step_patch(patch: &SitePatch, current_len: usize) -> Option<SitePatch> {
    let value_rows = patch.value.rows();
    let pinned: Vec<usize> = match &patch.positions {
        None => (0..value_rows.min(current_len)).collect(),
        Some(ps) => ps
            .iter()
            .copied()
            .filter(|&p| p < current_len && p < value_rows)
            .collect(),
    };
    if pinned.is_empty() {
        return None;
    }
    let width = patch.value.shape()[1];
    let mut value = Tensor::zeros(&[current_len, width]);
    for &p in &pinned {
        value.data_mut()[p * width..(p + 1) * width].copy_from_slice(patch.value.row(p));
    }
    Some(SitePatch::at_positions(patch.site, pinned, value))
}

// ───────────────────────────────────────────────────────────────────────
// Token reprojection
// ───────────────────────────────────────────────────────────────────────

/// Snaps each activation row onto the embedding manifold: decode the row
/// through the unembedding, take the argmax token, and return that token's
/// embedding row. Requires tied embeddings so that the round trip is
/// meaningful.
pub fn reproject_rows(model: &MiniModel, x: &Tensor) -> Result<Tensor> {
    if !model.config.tie_unembedding {
        return Err(Error::Contract(
            "token reprojection requires tied input/output embeddings".into(),
        ));
    }
    let embed = model
        .param("decoder.token_embed.weight")
        .ok_or_else(|| Error::Contract("missing token embedding".into()))?;
    let logits = x.matmul(&model.unembedding_matrix()?)?;
    let ids = logits.argmax_rows();
    let d = embed.shape()[1];
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (r, &t) in ids.iter().enumerate() {
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(embed.row(t));
    }
    Ok(out)
}

/// The reprojection boundaries in execution order: the token-embedding
/// output (before positions are added), each present sub-layer's input
/// stream, and the final stream entering the unembedding.
pub fn reprojection_boundaries(model: &MiniModel) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for id in model.present_sublayers() {
        names.push(format!("{id}.input"));
    }
    names.push("head.input".to_string());
    names
}

/// For each boundary, replaces the activations there by their reprojected
/// embeddings and records the perplexity delta against the clean run.
pub fn token_reprojection_sweep(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
    split_id: &str,
) -> Result<SweepResult> {
    if indices.is_empty() {
        return Err(Error::Param("reprojection sweep needs at least one sample".into()));
    }
    if !model.config.tie_unembedding {
        return Err(Error::Contract(
            "token reprojection requires tied input/output embeddings".into(),
        ));
    }
    let masks = MaskSet::identity();
    let baseline = perplexity_teacher_forced(model, dataset, indices, &masks, &[])?;
    let present = model.present_sublayers();
    let first = *present
        .first()
        .ok_or_else(|| Error::Param("model has no sub-layers".into()))?;
    let last = *present.last().expect("nonempty checked above");
    let embed = model
        .param("decoder.token_embed.weight")
        .ok_or_else(|| Error::Contract("missing token embedding".into()))?
        .clone();
    let pos = model
        .param("decoder.pos_embed.weight")
        .ok_or_else(|| Error::Contract("missing position embedding".into()))?
        .clone();
    let d = model.config.d_model;

    let mut deltas = BTreeMap::new();
    for boundary in reprojection_boundaries(model) {
        let mut nll_sum = 0.0;
        let mut nll_count = 0usize;
        for &i in indices {
            let (doc, qa) = fetch(dataset, i)?;
            let memory = model.encode(&doc.grid)?;
            let prompt = encode_prompt(qa, model.config.max_prompt)?;
            let nlls = match boundary.as_str() {
                "embedding" => {
                    // Reproject the raw token embeddings, then re-add the
                    // positional rows and replace the first input stream.
                    let mut e_tok = Tensor::zeros(&[prompt.tokens.len(), d]);
                    for (r, &t) in prompt.tokens.iter().enumerate() {
                        e_tok.data_mut()[r * d..(r + 1) * d]
                            .copy_from_slice(embed.row(t as usize));
                    }
                    let mut stream = reproject_rows(model, &e_tok)?;
                    for r in 0..prompt.tokens.len() {
                        for (s, &p) in stream.data_mut()[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(pos.row(r))
                        {
                            *s += p;
                        }
                    }
                    let patch = SitePatch::full(Site::new(first, SiteKind::Input), stream);
                    prompt_nll(model, &memory, &prompt, &masks, &[patch])?
                }
                "head.input" => {
                    // The final stream is the last sub-layer's input plus
                    // its contribution; reproject it and decode directly.
                    let sites = [
                        Site::new(last, SiteKind::Input),
                        Site::new(last, SiteKind::Output),
                    ];
                    let (_, trace) = model.decode_teacher_forced(
                        &memory,
                        &prompt.tokens,
                        &masks,
                        &CaptureSet::of(sites),
                    )?;
                    let input = trace.get(&sites[0]).ok_or_else(|| Error::Patch {
                        site: sites[0].to_string(),
                        detail: "input stream was not captured".into(),
                    })?;
                    let output = trace.get(&sites[1]).ok_or_else(|| Error::Patch {
                        site: sites[1].to_string(),
                        detail: "contribution was not captured".into(),
                    })?;
                    let reprojected = reproject_rows(model, &input.add(output)?)?;
                    let logits = reprojected.matmul(&model.unembedding_matrix()?)?;
                    logits_nll(&logits, &prompt)
                }
                name => {
                    let id: SublayerId = name
                        .strip_suffix(".input")
                        .expect("boundary names end in .input")
                        .parse()?;
                    let site = Site::new(id, SiteKind::Input);
                    let (_, trace) = model.decode_teacher_forced(
                        &memory,
                        &prompt.tokens,
                        &masks,
                        &CaptureSet::of([site]),
                    )?;
                    let captured = trace.get(&site).ok_or_else(|| Error::Patch {
                        site: site.to_string(),
                        detail: "input stream was not captured".into(),
                    })?;
                    let patch = SitePatch::full(site, reproject_rows(model, captured)?);
                    prompt_nll(model, &memory, &prompt, &masks, &[patch])?
                }
            };
            for v in nlls {
                nll_sum += v;
                nll_count += 1;
            }
        }
        deltas.insert(boundary, (nll_sum / nll_count as f64).exp() - baseline);
    }
    Ok(SweepResult {
        baseline,
        deltas,
        split_id: split_id.to_string(),
        sample_count: indices.len(),
    })
}

/// First boundary (in the supplied execution order) whose absolute
/// perplexity delta is at most `tolerance` — a candidate point up to which
/// activations stay readable as tokens.
pub fn earliest_quiet_boundary(
    sweep: &SweepResult,
    order: &[String],
    tolerance: f64,
) -> Option<String> {
    order
        .iter()
        .find(|name| sweep.deltas.get(*name).is_some_and(|d| d.abs() <= tolerance))
        .cloned()
}

// ───────────────────────────────────────────────────────────────────────
// Attention-head statistics
// ───────────────────────────────────────────────────────────────────────

/// Shannon entropy of one attention row in nats, with 0·ln 0 = 0.
pub fn attention_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Population variance of one attention row's weights.
pub fn attention_row_variance(row: &[f64]) -> f64 {
    if row.is_empty() {
        return 0.0;
    }
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    row.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / n
}

/// Attention concentration statistics per head: entropy for self-attention
/// (diffuse heads score high) and variance for cross-attention (sharply
/// focused heads score high). Both variance conventions are emitted:
/// per-row (each query row scored, then pooled) and per-map (all entries
/// of a head's map pooled first); they coincide when every row has the
/// same key count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    /// Mean attention entropy (nats) per self-attention head, pooled over
    /// query rows and samples.
    pub sa_entropy: BTreeMap<HeadId, f64>,
    /// Mean per-row attention variance per cross-attention head.
    pub ca_variance: BTreeMap<HeadId, f64>,
    /// Mean per-map attention variance per cross-attention head.
    pub ca_map_variance: BTreeMap<HeadId, f64>,
    /// Samples aggregated.
    pub sample_count: usize,
}

/// Computes [`HeadStats`] over a dataset subset with teacher forcing.
pub fn head_statistics(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
) -> Result<HeadStats> {
    if indices.is_empty() {
        return Err(Error::Param("head statistics need at least one sample".into()));
    }
    let masks = MaskSet::identity();
    let map_sites: Vec<Site> = model
        .present_sublayers()
        .into_iter()
        .filter(|id| id.kind.is_attention())
        .map(|id| Site::new(id, SiteKind::AttentionMap))
        .collect();
    let capture = CaptureSet::of(map_sites.iter().copied());

    // Pooled sums: (sum, count) per head for each statistic.
    let mut entropy: BTreeMap<HeadId, (f64, usize)> = BTreeMap::new();
    let mut row_var: BTreeMap<HeadId, (f64, usize)> = BTreeMap::new();
    let mut map_var: BTreeMap<HeadId, (f64, usize)> = BTreeMap::new();

    for &i in indices {
        let (doc, qa) = fetch(dataset, i)?;
        let memory = model.encode(&doc.grid)?;
        let prompt = encode_prompt(qa, model.config.max_prompt)?;
        let (_, trace) =
            model.decode_teacher_forced(&memory, &prompt.tokens, &masks, &capture)?;
        for site in &map_sites {
            let stacked = trace.get(site).ok_or_else(|| Error::Patch {
                site: site.to_string(),
                detail: "attention map was not captured".into(),
            })?;
            let shape = model
                .layers
                .get(site.sublayer.layer)
                .and_then(|l| l.attn(site.sublayer.kind))
                .ok_or_else(|| {
                    Error::Param(format!("{} is not an attention sub-layer", site.sublayer))
                })?;
            for slot in 0..shape.n_heads() {
                let head = HeadId::new(site.sublayer, shape.original_heads[slot])?;
                let map = stacked.unstack(slot)?;
                match site.sublayer.kind {
                    SublayerKind::SelfAttn => {
                        let e = entropy.entry(head).or_insert((0.0, 0));
                        for r in 0..map.rows() {
                            e.0 += attention_entropy(map.row(r));
                            e.1 += 1;
                        }
                    }
                    SublayerKind::CrossAttn => {
                        let rv = row_var.entry(head).or_insert((0.0, 0));
                        for r in 0..map.rows() {
                            rv.0 += attention_row_variance(map.row(r));
                            rv.1 += 1;
                        }
                        let mv = map_var.entry(head).or_insert((0.0, 0));
                        mv.0 += attention_row_variance(map.data());
                        mv.1 += 1;
                    }
                    SublayerKind::FeedForward => unreachable!("filtered above"),
                }
            }
        }
    }

    let mean = |m: BTreeMap<HeadId, (f64, usize)>| {
        m.into_iter().map(|(h, (s, c))| (h, s / c as f64)).collect()
    };
    Ok(HeadStats {
        sa_entropy: mean(entropy),
        ca_variance: mean(row_var),
        ca_map_variance: mean(map_var),
        sample_count: indices.len(),
    })
}

/// Heads ordered most-important-first for each attention kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedHeads {
    /// Self-attention heads, ascending entropy (concentrated first).
    pub self_attention: Vec<HeadId>,
    /// Cross-attention heads, descending per-row variance (sharp first).
    pub cross_attention: Vec<HeadId>,
}

/// Ranks heads by their concentration statistics: low entropy means an
/// important self-attention head, high variance an important
/// cross-attention head. Ties break by (layer, head) index ascending.
pub fn rank_heads(stats: &HeadStats) -> RankedHeads {
    let mut sa: Vec<(HeadId, f64)> =
        stats.sa_entropy.iter().map(|(&h, &v)| (h, v)).collect();
    sa.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let mut ca: Vec<(HeadId, f64)> =
        stats.ca_variance.iter().map(|(&h, &v)| (h, v)).collect();
    ca.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    RankedHeads {
        self_attention: sa.into_iter().map(|(h, _)| h).collect(),
        cross_attention: ca.into_iter().map(|(h, _)| h).collect(),
    }
}

// ───────────────────────────────────────────────────────────────────────
// Transcription probe
// ───────────────────────────────────────────────────────────────────────

/// Glyph-recovery score of a set of cross-attention heads: each document
/// cell's encoding is pushed through the heads' combined value pathway and
/// the unembedding, and the argmax token is compared with the glyph
/// actually printed in that cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionProbe {
    /// Fraction of glyph-bearing cells whose probe argmax matches the
    /// printed glyph, pooled over all samples.
    pub agreement: f64,
    /// Glyph-bearing cells scored.
    pub cells_scored: usize,
    /// Per-sample agreement, in `indices` order.
    pub per_sample: Vec<f64>,
}

/// Runs the transcription probe with the given cross-attention heads
/// summed. Blank (space) cells are excluded from scoring.
pub fn transcription_probe(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
    heads: &[HeadId],
) -> Result<TranscriptionProbe> {
    if indices.is_empty() {
        return Err(Error::Param("transcription probe needs at least one sample".into()));
    }
    if heads.is_empty() {
        return Err(Error::Param("transcription probe needs at least one head".into()));
    }
    let unembed = model.unembedding_matrix()?;
    let mut agree = 0usize;
    let mut scored = 0usize;
    let mut per_sample = Vec::with_capacity(indices.len());
    for &i in indices {
        let (doc, _) = fetch(dataset, i)?;
        let memory = model.encode(&doc.grid)?;
        let mut combined: Option<Tensor> = None;
        for &head in heads {
            let contribution = model.head_value_contribution(head, &memory)?;
            combined = Some(match combined {
                None => contribution,
                Some(c) => c.add(&contribution)?,
            });
        }
        let logits = combined.expect("at least one head").matmul(&unembed)?;
        let ids = logits.argmax_rows();
        let mut sample_agree = 0usize;
        let mut sample_scored = 0usize;
        let cols = doc.grid.cols();
        for r in 0..doc.grid.rows() {
            for c in 0..cols {
                let cell = doc.grid.get(r, c);
                if cell == SPACE_TOKEN {
                    continue;
                }
                sample_scored += 1;
                if ids[r * cols + c] as u32 == cell {
                    sample_agree += 1;
                }
            }
        }
        agree += sample_agree;
        scored += sample_scored;
        per_sample.push(if sample_scored == 0 {
            0.0
        } else {
            sample_agree as f64 / sample_scored as f64
        });
    }
    if scored == 0 {
        return Err(Error::Param("no glyph-bearing cells to score".into()));
    }
    Ok(TranscriptionProbe {
        agreement: agree as f64 / scored as f64,
        cells_scored: scored,
        per_sample,
    })
}

// ───────────────────────────────────────────────────────────────────────
// Pathway search
// ───────────────────────────────────────────────────────────────────────

/// One enumerated pathway: which upstream sub-layers keep their transform
/// (the rest contribute nothing, leaving the residual stream unchanged),
/// and how well the resulting retrieval query agrees with the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwaySubset {
    /// Sub-layers whose transforms stay active, execution order.
    pub transform: Vec<SublayerId>,
    /// Cosine agreement with the full model's query, averaged over heads
    /// then examples.
    pub agreement: f64,
}

/// Exhaustive pathway enumeration toward the final cross-attention query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayResult {
    /// The cross-attention sub-layer whose query is scored.
    pub target: SublayerId,
    /// The toggleable upstream sub-layers, execution order.
    pub toggled: Vec<SublayerId>,
    /// All 2^L subsets, ranked by agreement descending (ties: fewer active
    /// transforms first, then name order).
    pub subsets: Vec<PathwaySubset>,
    /// Examples scored.
    pub sample_count: usize,
}

/// Enumerates every transform-vs-residual choice over the sub-layers
/// upstream of the final cross-attention, recomputing that sub-layer's
/// query at the answer-start position for each choice and scoring cosine
/// agreement with the full model's query. Examples must be keyword-task
/// QA pairs (a single prompt keyword retrieving one field).
pub fn pathway_search(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
) -> Result<PathwayResult> {
    if indices.is_empty() {
        return Err(Error::Param("pathway search needs at least one example".into()));
    }
    for &i in indices {
        let (doc, _) = fetch(dataset, i)?;
        if doc.task_kind != TaskKind::Keyword {
            return Err(Error::Param(format!(
                "pathway search expects keyword-task examples, got {}",
                doc.task_kind.name()
            )));
        }
    }
    let present = model.present_sublayers();
    let target = *present
        .iter()
        .filter(|id| id.kind == SublayerKind::CrossAttn)
        .last()
        .ok_or_else(|| Error::Param("model has no cross-attention sub-layer".into()))?;
    let toggled: Vec<SublayerId> = present.iter().copied().filter(|id| *id < target).collect();
    let downstream: Vec<SublayerId> = present.iter().copied().filter(|id| *id > target).collect();
    if toggled.len() > 16 {
        return Err(Error::Param(format!(
            "pathway enumeration over {} sub-layers is too large",
            toggled.len()
        )));
    }
    let head_dim = model
        .layers
        .get(target.layer)
        .and_then(|l| l.attn(SublayerKind::CrossAttn))
        .map(|a| a.head_dim)
        .ok_or_else(|| Error::Param(format!("{} was removed by surgery", target)))?;
    let query_site = Site::new(target, SiteKind::Query);
    let capture = CaptureSet::of([query_site]);

    // Per-example setup: encoder memory, generation prefix, and the full
    // model's query at the answer-start position.
    let mut memories = Vec::with_capacity(indices.len());
    let mut prefixes: Vec<Vec<u32>> = Vec::with_capacity(indices.len());
    let mut references = Vec::with_capacity(indices.len());
    for &i in indices {
        let (doc, qa) = fetch(dataset, i)?;
        let memory = model.encode(&doc.grid)?;
        let prompt = encode_prompt(qa, model.config.max_prompt)?;
        let prefix = prompt.generation_prefix().to_vec();
        let reference = query_at_last_position(
            model, &memory, &prefix, &MaskSet::identity(), &capture, query_site,
        )?;
        memories.push(memory);
        prefixes.push(prefix);
        references.push(reference);
    }

    let mut subsets = Vec::with_capacity(1 << toggled.len());
    for bits in 0u32..(1u32 << toggled.len()) {
        let mut masks = MaskSet::identity();
        let mut active = Vec::new();
        for (j, &id) in toggled.iter().enumerate() {
            if bits & (1 << j) != 0 {
                active.push(id);
            } else {
                masks.skip(id);
            }
        }
        // Sub-layers after the target cannot influence its query; skip
        // them so each enumerated run stops computing where scoring stops.
        for &id in &downstream {
            masks.skip(id);
        }
        let mut agreement_sum = 0.0;
        for k in 0..indices.len() {
            let query = query_at_last_position(
                model, &memories[k], &prefixes[k], &masks, &capture, query_site,
            )?;
            agreement_sum += per_head_cosine(&references[k], &query, head_dim)?;
        }
        subsets.push(PathwaySubset {
            transform: active,
            agreement: agreement_sum / indices.len() as f64,
        });
    }
    subsets.sort_by(|a, b| {
        b.agreement
            .partial_cmp(&a.agreement)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.transform.len().cmp(&b.transform.len()))
            .then_with(|| a.transform.cmp(&b.transform))
    });
    Ok(PathwayResult { target, toggled, subsets, sample_count: indices.len() })
}

/// The smallest subset (fewest active transforms) whose agreement meets
/// the threshold; ties prefer higher agreement, then name order.
pub fn minimal_circuit(result: &PathwayResult, threshold: f64) -> Option<&PathwaySubset> {
    result
        .subsets
        .iter()
        .filter(|s| s.agreement >= threshold)
        .min_by(|a, b| {
            a.transform
                .len()
                .cmp(&b.transform.len())
                .then_with(|| {
                    b.agreement
                        .partial_cmp(&a.agreement)
                        .unwrap_or(Ordering::Equal)
                })
                .then_with(|| a.transform.cmp(&b.transform))
        })
}

/// The query row at the last prefix position (answer start).
fn query_at_last_position(
    model: &MiniModel,
    memory: &Tensor,
    prefix: &[u32],
    masks: &MaskSet,
    capture: &CaptureSet,
    site: Site,
) -> Result<Vec<f64>> {
    let (_, trace) = model.decode_teacher_forced(memory, prefix, masks, capture)?;
    let q = trace.get(&site).ok_or_else(|| Error::Patch {
        site: site.to_string(),
        detail: "query was not captured".into(),
    })?;
    Ok(q.row(prefix.len() - 1).to_vec())
}

/// Cosine similarity between two query rows, computed per head slice and
/// averaged. Bitwise-identical slices score exactly 1.
fn per_head_cosine(a: &[f64], b: &[f64], head_dim: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() % head_dim != 0 {
        return Err(Error::Param(format!(
            "query widths {} and {} do not split into {}-wide heads",
            a.len(),
            b.len(),
            head_dim
        )));
    }
    let heads = a.len() / head_dim;
    let mut sum = 0.0;
    for h in 0..heads {
        let xs = &a[h * head_dim..(h + 1) * head_dim];
        let ys = &b[h * head_dim..(h + 1) * head_dim];
        sum += if xs == ys { 1.0 } else { cosine(xs, ys) };
    }
    Ok(sum / heads as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

// ───────────────────────────────────────────────────────────────────────
// Retrieval-hypothesis classification
// ───────────────────────────────────────────────────────────────────────

/// How the model resolved a key-value question when its retrieval query
/// came from a corrupted context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalOutcome {
    /// Output equals the value at the key's original position in the
    /// document the run actually read.
    Positional,
    /// Output equals the corrupted document's value for the key — the
    /// query carried the corrupt context's content.
    Semantic,
    /// Output equals the clean document's value without matching either
    /// reading above (only reachable when those candidates differ from it).
    Memorization,
    /// Output matches none of the candidate values.
    Failure,
    /// Degenerate setup: the candidate values coincide, so the labels
    /// cannot be distinguished.
    Rejected,
}

/// Counts per retrieval hypothesis. The four labels partition the accepted
/// examples (`total`); rejected degenerate setups are counted separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisTally {
    /// Output followed the document position.
    pub positional: usize,
    /// Output followed the corrupt context's content.
    pub semantic: usize,
    /// Output reproduced the clean value by neither route.
    pub memorization: usize,
    /// Output matched no candidate.
    pub failure: usize,
    /// Degenerate examples excluded from `total`.
    pub rejected: usize,
    /// Accepted examples: positional + semantic + memorization + failure.
    pub total: usize,
}

impl HypothesisTally {
    /// Adds one outcome.
    pub fn record(&mut self, outcome: RetrievalOutcome) {
        match outcome {
            RetrievalOutcome::Positional => self.positional += 1,
            RetrievalOutcome::Semantic => self.semantic += 1,
            RetrievalOutcome::Memorization => self.memorization += 1,
            RetrievalOutcome::Failure => self.failure += 1,
            RetrievalOutcome::Rejected => {
                self.rejected += 1;
                return;
            }
        }
        self.total += 1;
    }

    /// Percentages of `total` in label order (positional, semantic,
    /// memorization, failure). All zeros when nothing was accepted.
    pub fn percentages(&self) -> [f64; 4] {
        if self.total == 0 {
            return [0.0; 4];
        }
        let t = self.total as f64;
        [
            100.0 * self.positional as f64 / t,
            100.0 * self.semantic as f64 / t,
            100.0 * self.memorization as f64 / t,
            100.0 * self.failure as f64 / t,
        ]
    }
}

/// Reference outcome distributions (positional, semantic, memorization,
/// failure percentages) measured on a full-scale document model with three
/// key-value vocabularies. Displayed next to toy tallies for orientation —
/// the toy model is not expected to reproduce them.
pub const FULL_SCALE_REFERENCE_TALLIES: [(&str, [f64; 4]); 3] = [
    ("color-name values", [53.0, 31.0, 8.0, 8.0]),
    ("common-noun values", [40.4, 26.2, 3.7, 29.7]),
    ("spelled-out-number values", [37.2, 44.6, 9.1, 9.1]),
];

/// Classifies one corruption case: the retrieval query is captured from a
/// run reading the corrupted document, pinned into generation over the
/// clean document, and the output is matched against the candidate values.
///
/// Candidates: the clean document's value for the key (what a position-
/// following query retrieves, since the run reads the clean document) and
/// the corrupted document's value for the key (what a content-carrying
/// query produces). A memorization label — reproducing the clean value by
/// neither route — cannot occur under this direction because it equals the
/// positional candidate; the precedence order resolves it as positional.
pub fn classify_retrieval(
    model: &MiniModel,
    clean_doc: &SynthDoc,
    corrupt_doc: &SynthDoc,
    qa: &QAPair,
    masks: &MaskSet,
) -> Result<RetrievalOutcome> {
    for (name, doc) in [("clean", clean_doc), ("corrupt", corrupt_doc)] {
        if doc.task_kind != TaskKind::Keyvalue {
            return Err(Error::Param(format!(
                "retrieval classification needs key-value documents; the {} document is {}",
                name,
                doc.task_kind.name()
            )));
        }
    }
    let key = decode_tokens(&qa.question);
    let clean_value = field_value(clean_doc, &key)?;
    let corrupt_value = field_value(corrupt_doc, &key)?;
    if clean_value == corrupt_value {
        return Ok(RetrievalOutcome::Rejected);
    }

    let target = *model
        .present_sublayers()
        .iter()
        .filter(|id| id.kind == SublayerKind::CrossAttn)
        .last()
        .ok_or_else(|| Error::Param("model has no cross-attention sub-layer".into()))?;
    let query_site = Site::new(target, SiteKind::Query);

    let prompt = encode_prompt(qa, model.config.max_prompt)?;
    let prefix = prompt.generation_prefix();
    let answer_pos = prefix.len() - 1;

    // Corrupt-context query at the answer-start position.
    let corrupt_memory = model.encode(&corrupt_doc.grid)?;
    let (_, trace) = model.decode_teacher_forced(
        &corrupt_memory,
        prefix,
        masks,
        &CaptureSet::of([query_site]),
    )?;
    let corrupt_query = trace.get(&query_site).ok_or_else(|| Error::Patch {
        site: query_site.to_string(),
        detail: "query was not captured in the corrupt run".into(),
    })?;

    // Clean-document generation with that query pinned.
    let clean_memory = model.encode(&clean_doc.grid)?;
    let patch =
        SitePatch::at_positions(query_site, vec![answer_pos], corrupt_query.clone());
    let tokens = patched_generate(
        model,
        &clean_memory,
        prefix,
        model.config.grid_cols + 2,
        masks,
        &[patch],
    )?;
    let output = decode_tokens(&tokens);

    Ok(if output == clean_value {
        RetrievalOutcome::Positional
    } else if output == corrupt_value {
        RetrievalOutcome::Semantic
    } else {
        RetrievalOutcome::Failure
    })
}

fn field_value(doc: &SynthDoc, key: &str) -> Result<String> {
    doc.fields
        .iter()
        .find(|f| f.key == key)
        .map(|f| f.value.clone())
        .ok_or_else(|| Error::Param(format!("document has no field for key {:?}", key)))
}

/// Runs [`classify_retrieval`] over every key-value sample in the subset,
/// generating `corruptions_per_doc` corrupted variants of each document
/// from a seeded stream.
pub fn hypothesis_tally(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
    corruptions_per_doc: usize,
    seed: u64,
    masks: &MaskSet,
) -> Result<HypothesisTally> {
    if indices.is_empty() || corruptions_per_doc == 0 {
        return Err(Error::Param("hypothesis tally needs samples and corruptions".into()));
    }
    let mut tally = HypothesisTally::default();
    for (k, &i) in indices.iter().enumerate() {
        let (doc, qa) = fetch(dataset, i)?;
        for c in 0..corruptions_per_doc {
            let corruption_seed = seed
                .wrapping_add(k as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(c as u64);
            let corrupt = crate::synthdocs::corrupt_keyvalue(doc, corruption_seed)?;
            tally.record(classify_retrieval(model, doc, &corrupt, qa, masks)?);
        }
    }
    Ok(tally)
}

// ───────────────────────────────────────────────────────────────────────
// Final feed-forward substitution
// ───────────────────────────────────────────────────────────────────────

/// Cumulative first-answer-token perplexity curves for three conditions:
/// the clean model, the final feed-forward skipped, and the final
/// feed-forward's contribution replaced by the final cross-attention's
/// attention-weighted values. Each entry is the fraction of samples whose
/// per-sample perplexity is at most the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionCurves {
    /// Evaluated thresholds, ascending.
    pub thresholds: Vec<f64>,
    /// Fraction at or below each threshold, clean model.
    pub clean: Vec<f64>,
    /// Fraction at or below each threshold with the final feed-forward
    /// skipped.
    pub skipped: Vec<f64>,
    /// Fraction at or below each threshold with the substitution patch.
    pub substituted: Vec<f64>,
    /// Samples measured.
    pub sample_count: usize,
}

/// A geometric threshold grid from 1 to the vocabulary size (the range of
/// a single-token perplexity).
pub fn perplexity_thresholds(vocab_size: usize, points: usize) -> Vec<f64> {
    let v = vocab_size as f64;
    (0..points)
        .map(|k| v.powf(k as f64 / (points - 1).max(1) as f64))
        .collect()
}

/// Measures whether the final feed-forward sub-layer matters for the first
/// answer token: per sample, the perplexity of the first generated-answer
/// position is computed clean, with the final feed-forward skipped, and
/// with its contribution overwritten by the final cross-attention's
/// attention-weighted values from the same run.
pub fn final_ff_substitution(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    indices: &[usize],
    thresholds: &[f64],
) -> Result<SubstitutionCurves> {
    if indices.is_empty() || thresholds.is_empty() {
        return Err(Error::Param("substitution curves need samples and thresholds".into()));
    }
    let present = model.present_sublayers();
    let ff = *present
        .iter()
        .filter(|id| id.kind == SublayerKind::FeedForward)
        .last()
        .ok_or_else(|| Error::Param("model has no feed-forward sub-layer".into()))?;
    let ca = *present
        .iter()
        .filter(|id| id.kind == SublayerKind::CrossAttn)
        .last()
        .ok_or_else(|| Error::Param("model has no cross-attention sub-layer".into()))?;
    let ff_out = Site::new(ff, SiteKind::Output);
    let ca_av = Site::new(ca, SiteKind::ValueTimesAttention);
    let identity = MaskSet::identity();
    let skipping = MaskSet::skipping(ff);

    let mut clean_ppl = Vec::with_capacity(indices.len());
    let mut skipped_ppl = Vec::with_capacity(indices.len());
    let mut substituted_ppl = Vec::with_capacity(indices.len());
    for &i in indices {
        let (doc, qa) = fetch(dataset, i)?;
        let memory = model.encode(&doc.grid)?;
        let prompt = encode_prompt(qa, model.config.max_prompt)?;

        let (logits, trace) = model.decode_teacher_forced(
            &memory,
            &prompt.tokens,
            &identity,
            &CaptureSet::of([ca_av]),
        )?;
        clean_ppl.push(first_token_perplexity(&logits, &prompt));

        let (skip_logits, _) =
            model.decode_teacher_forced(&memory, &prompt.tokens, &skipping, &CaptureSet::None)?;
        skipped_ppl.push(first_token_perplexity(&skip_logits, &prompt));

        let av = trace.get(&ca_av).ok_or_else(|| Error::Patch {
            site: ca_av.to_string(),
            detail: "attention-weighted values were not captured".into(),
        })?;
        let patch = SitePatch::full(ff_out, av.clone());
        let patched_logits =
            model.decode_with_patch(&memory, &prompt.tokens, &identity, &[patch])?;
        substituted_ppl.push(first_token_perplexity(&patched_logits, &prompt));
    }

    let fraction_below = |ppls: &[f64]| -> Vec<f64> {
        thresholds
            .iter()
            .map(|&t| ppls.iter().filter(|&&p| p <= t).count() as f64 / ppls.len() as f64)
            .collect()
    };
    Ok(SubstitutionCurves {
        thresholds: thresholds.to_vec(),
        clean: fraction_below(&clean_ppl),
        skipped: fraction_below(&skipped_ppl),
        substituted: fraction_below(&substituted_ppl),
        sample_count: indices.len(),
    })
}

/// Perplexity of the first answer token: exp of its negative log-likelihood.
fn first_token_perplexity(logits: &Tensor, prompt: &EncodedPrompt) -> f64 {
    let pos = prompt.loss_positions[0];
    let target = prompt.targets()[0] as usize;
    let row = logits.row(pos);
    (log_sum_exp(row) - row[target]).exp()
}

//! Structural compression and cost accounting: sub-layer and head surgery
//! that produce physically smaller models, two-stage prune recipes minted
//! from interpretability measurements, enumeration and magnitude baselines,
//! and a closed-form parameter/FLOP accountant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::exact_match;
use crate::interp::{perplexity_teacher_forced, rank_heads, HeadStats, SweepResult};
use crate::model::{
    AttnShape, CaptureSet, HeadId, MaskSet, MiniModel, MiniModelConfig, Site, SiteKind,
    SublayerId, SublayerKind,
};
use crate::synthdocs::{decode_tokens, encode_prompt, QAPair, SynthDoc, TaskKind};
use crate::tensor::{gelu_value, Tensor, LAYER_NORM_EPS};

// ───────────────────────────────────────────────────────────────────────
// Unstructured weight masks
// ───────────────────────────────────────────────────────────────────────

/// Element-level masks for unstructured pruning: `true` marks a weight that
/// is pinned to exactly zero. Masks persist through later training — they
/// are re-applied after every optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMaskSet {
    masks: BTreeMap<String, Vec<bool>>,
}

impl WeightMaskSet {
    /// Empty mask set (no weights pinned).
    pub fn new() -> Self {
        WeightMaskSet::default()
    }

    /// Registers the mask for one parameter; the length must equal the
    /// parameter's element count when applied.
    pub fn insert(&mut self, name: &str, mask: Vec<bool>) {
        self.masks.insert(name.to_string(), mask);
    }

    /// The mask for one parameter, if registered.
    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    /// All masked parameter names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(String::as_str)
    }

    /// Total number of weights pinned to zero.
    pub fn zeroed_count(&self) -> usize {
        self.masks.values().map(|m| m.iter().filter(|&&d| d).count()).sum()
    }

    /// Zeroes every masked weight in place.
    pub fn apply(&self, model: &mut MiniModel) -> Result<()> {
        for (name, mask) in &self.masks {
            let tensor = model
                .param_mut(name)
                .ok_or_else(|| Error::Param(format!("mask references missing parameter {:?}", name)))?;
            if tensor.numel() != mask.len() {
                return Err(Error::Shape {
                    op: "WeightMaskSet::apply",
                    detail: format!("{}: {} weights vs {} mask bits", name, tensor.numel(), mask.len()),
                });
            }
            for (w, &dead) in tensor.data_mut().iter_mut().zip(mask) {
                if dead {
                    *w = 0.0;
                }
            }
        }
        Ok(())
    }

    /// True when every masked weight is exactly zero.
    pub fn is_respected(&self, model: &MiniModel) -> bool {
        self.masks.iter().all(|(name, mask)| {
            model
                .param(name)
                .map(|t| t.data().iter().zip(mask).all(|(&w, &dead)| !dead || w == 0.0))
                .unwrap_or(false)
        })
    }

    /// Fraction of all model weights pinned to zero.
    pub fn masked_fraction(&self, model: &MiniModel) -> f64 {
        self.zeroed_count() as f64 / model.param_count() as f64
    }
}

// ───────────────────────────────────────────────────────────────────────
// Closed-form parameter counts
// ───────────────────────────────────────────────────────────────────────

/// Parameters of one attention sub-layer with `heads` retained heads:
/// per head 4·d·head_dim projection weights and 3·head_dim Q/K/V biases,
/// plus the d-wide output bias and the 2·d norm affine pair. With all
/// heads present this is 4·d² weights + 4·d biases + 2·d norm.
pub fn attention_params(d_model: usize, head_dim: usize, heads: usize) -> u64 {
    let (d, hd, k) = (d_model as u64, head_dim as u64, heads as u64);
    k * (4 * d * hd + 3 * hd) + 3 * d
}

/// Parameters of one feed-forward sub-layer: 2·d·d_ff weights, d_ff + d
/// biases, and the 2·d norm affine pair.
pub fn feed_forward_params(d_model: usize, d_ff: usize) -> u64 {
    let (d, f) = (d_model as u64, d_ff as u64);
    2 * d * f + f + 3 * d
}

/// Parameters of the optional encoder self-attention block (never pruned).
fn encoder_attention_params(d_model: usize) -> u64 {
    let d = d_model as u64;
    4 * (d * d + d) + 2 * d
}

/// Retained head count of one attention sub-layer under the masks (0 when
/// the whole sub-layer is skipped).
fn kept_heads(config: &MiniModelConfig, masks: &MaskSet, id: SublayerId) -> usize {
    if masks.is_skipped(id) {
        return 0;
    }
    let dropped = (0..config.n_heads)
        .filter(|&h| masks.is_head_dropped(HeadId { sublayer: id, head: h }))
        .count();
    config.n_heads - dropped
}

/// Closed-form parameter count of one sub-layer under the masks.
fn sublayer_params(config: &MiniModelConfig, masks: &MaskSet, id: SublayerId) -> u64 {
    if masks.is_skipped(id) {
        return 0;
    }
    match id.kind {
        SublayerKind::FeedForward => feed_forward_params(config.d_model, config.d_ff),
        _ => attention_params(config.d_model, config.head_dim(), kept_heads(config, masks, id)),
    }
}

// ───────────────────────────────────────────────────────────────────────
// Cost tables
// ───────────────────────────────────────────────────────────────────────

/// One accounting row: a named module with its parameter count and its
/// forward-pass floating-point operations (zero in parameter-only tables).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    /// Module name: a sub-layer id (`"S0"`), an embedding, or `"encoder"`.
    pub module: String,
    /// Parameter count.
    pub params: u64,
    /// Floating-point operations under the table's convention.
    pub flops: u64,
}

/// A cost table: per-module rows and their totals. Totals always equal the
/// sum of the rows (enforced at construction).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    /// What the table accounts for.
    pub title: String,
    /// FLOP-counting convention descriptor; `None` for parameter-only
    /// tables.
    pub convention: Option<String>,
    /// Per-module rows.
    pub rows: Vec<CostRow>,
    /// Sum of the parameter column.
    pub total_params: u64,
    /// Sum of the FLOP column.
    pub total_flops: u64,
}

impl CostTable {
    fn new(title: String, convention: Option<String>, rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_flops = rows.iter().map(|r| r.flops).sum();
        CostTable { title, convention, rows, total_params, total_flops }
    }

    /// Row lookup by module name.
    pub fn row(&self, module: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.module == module)
    }

    /// Sum of the parameter column over decoder sub-layer rows (those whose
    /// module name is a sub-layer id) — the quantity prune budgets refer to.
    pub fn decoder_sublayer_params(&self) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.module.parse::<SublayerId>().is_ok())
            .map(|r| r.params)
            .sum()
    }

    /// Sum of the FLOP column over decoder sub-layer rows.
    pub fn decoder_sublayer_flops(&self) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.module.parse::<SublayerId>().is_ok())
            .map(|r| r.flops)
            .sum()
    }

    /// Plain-text rendering: module, parameters, and (when the table has a
    /// convention) FLOPs, with digit grouping.
    pub fn render(&self) -> String {
        let with_flops = self.convention.is_some();
        let mut lines: Vec<(String, String, String)> = Vec::new();
        for row in &self.rows {
            lines.push((row.module.clone(), group_digits(row.params), group_digits(row.flops)));
        }
        lines.push(("total".into(), group_digits(self.total_params), group_digits(self.total_flops)));

        let head = ("module".to_string(), "parameters".to_string(), "flops".to_string());
        let w0 = lines.iter().map(|l| l.0.len()).chain([head.0.len()]).max().unwrap_or(6);
        let w1 = lines.iter().map(|l| l.1.len()).chain([head.1.len()]).max().unwrap_or(10);
        let w2 = lines.iter().map(|l| l.2.len()).chain([head.2.len()]).max().unwrap_or(5);

        let mut out = String::new();
        out.push_str(&self.title);
        out.push('\n');
        if let Some(conv) = &self.convention {
            out.push_str("convention: ");
            out.push_str(conv);
            out.push('\n');
        }
        let fmt_line = |a: &str, b: &str, c: &str| {
            if with_flops {
                format!("{a:<w0$}  {b:>w1$}  {c:>w2$}\n")
            } else {
                format!("{a:<w0$}  {b:>w1$}\n")
            }
        };
        out.push_str(&fmt_line(&head.0, &head.1, &head.2));
        for (a, b, c) in &lines {
            out.push_str(&fmt_line(a, b, c));
        }
        out
    }
}

/// Groups digits in threes: 4200448 → "4,200,448".
fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Closed-form parameter table for a configuration under masks: one row per
/// decoder sub-layer (zero when skipped; attention rows shrink with dropped
/// heads), plus embedding, unembedding (when untied), and encoder rows.
/// The total equals exhaustive enumeration of the parameter tensors of an
/// equivalently surgered model.
pub fn count_params(config: &MiniModelConfig, masks: &MaskSet) -> Result<CostTable> {
    config.validate()?;
    masks.validate(config)?;
    let d = config.d_model as u64;
    let mut rows = Vec::new();
    for id in SublayerId::all(config.n_layers) {
        rows.push(CostRow {
            module: id.to_string(),
            params: sublayer_params(config, masks, id),
            flops: 0,
        });
    }
    rows.push(CostRow {
        module: "token embedding".into(),
        params: config.vocab_size as u64 * d,
        flops: 0,
    });
    rows.push(CostRow {
        module: "position embedding".into(),
        params: config.max_prompt as u64 * d,
        flops: 0,
    });
    if !config.tie_unembedding {
        rows.push(CostRow {
            module: "unembedding".into(),
            params: d * config.vocab_size as u64,
            flops: 0,
        });
    }
    rows.push(CostRow {
        module: "encoder glyph embedding".into(),
        params: config.vocab_size as u64 * d,
        flops: 0,
    });
    rows.push(CostRow {
        module: "encoder row embedding".into(),
        params: config.grid_rows as u64 * d,
        flops: 0,
    });
    rows.push(CostRow {
        module: "encoder column embedding".into(),
        params: config.grid_cols as u64 * d,
        flops: 0,
    });
    if config.encoder_self_attention {
        rows.push(CostRow {
            module: "encoder self-attention".into(),
            params: encoder_attention_params(config.d_model),
            flops: 0,
        });
    }
    Ok(CostTable::new("parameter counts".into(), None, rows))
}

// ───────────────────────────────────────────────────────────────────────
// FLOP conventions and counts
// ───────────────────────────────────────────────────────────────────────

/// How floating-point operations are counted. Two independent choices:
/// whether one multiply-accumulate counts as one operation or two, and
/// whether generation reuses cached key/value projections or recomputes
/// the full prefix for every generated token. All four combinations are
/// emitted because published cost tables rarely state their convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopConvention {
    /// 1 FLOP per multiply-accumulate; no key/value cache.
    Mac1NoCache,
    /// 2 FLOPs per multiply-accumulate; no key/value cache.
    Mac2NoCache,
    /// 1 FLOP per multiply-accumulate; key/value cache during generation.
    Mac1KvCache,
    /// 2 FLOPs per multiply-accumulate; key/value cache during generation.
    Mac2KvCache,
}

impl FlopConvention {
    /// All four conventions, in label order.
    pub const ALL: [FlopConvention; 4] = [
        FlopConvention::Mac1NoCache,
        FlopConvention::Mac2NoCache,
        FlopConvention::Mac1KvCache,
        FlopConvention::Mac2KvCache,
    ];

    /// Stable identifier, usable as a command-line value.
    pub fn label(self) -> &'static str {
        match self {
            FlopConvention::Mac1NoCache => "mac1-nocache",
            FlopConvention::Mac2NoCache => "mac2-nocache",
            FlopConvention::Mac1KvCache => "mac1-kvcache",
            FlopConvention::Mac2KvCache => "mac2-kvcache",
        }
    }

    /// Human-readable description recorded in cost tables.
    pub fn describe(self) -> String {
        let mac = match self.mac_factor() {
            1 => "one operation per multiply-accumulate",
            _ => "two operations per multiply-accumulate",
        };
        let cache = if self.cached() {
            "key/value projections cached across generation steps"
        } else {
            "no cache: every generated token recomputes its full prefix"
        };
        format!("{} ({mac}; {cache})", self.label())
    }

    fn mac_factor(self) -> u64 {
        match self {
            FlopConvention::Mac1NoCache | FlopConvention::Mac1KvCache => 1,
            _ => 2,
        }
    }

    fn cached(self) -> bool {
        matches!(self, FlopConvention::Mac1KvCache | FlopConvention::Mac2KvCache)
    }
}

impl fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FlopConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FlopConvention::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::Param(format!("unknown FLOP convention {:?}", s)))
    }
}

/// Symbolic decode-cost table: floating-point operations to generate `m`
/// tokens from an `n`-token prompt, one row per decoder sub-layer plus the
/// unembedding and the encoder pass. Only matrix multiplications are
/// counted (bias additions, softmax, and normalization are excluded);
/// causal scores are counted dense. Cross-attention key/value projections
/// run over `n_patches` rows — under the no-cache conventions they are
/// recomputed for every generated token, under the cached ones they are
/// computed once. The encoder row reflects the configured grid (the
/// `n_patches` argument only sets the cross-attention source length) and
/// is counted once per episode. A workload with `m = 0` costs nothing.
pub fn count_flops(
    config: &MiniModelConfig,
    masks: &MaskSet,
    n_prompt: usize,
    m_generated: usize,
    n_patches: usize,
    convention: FlopConvention,
) -> Result<CostTable> {
    config.validate()?;
    masks.validate(config)?;
    if m_generated > 0 && n_prompt == 0 {
        return Err(Error::Param("generation requires at least one prompt token".into()));
    }
    let d = config.d_model as u64;
    let d_ff = config.d_ff as u64;
    let vocab = config.vocab_size as u64;
    let s_len = n_patches as u64;
    let n = n_prompt as u64;
    let m = m_generated as u64;
    let f = convention.mac_factor();

    // Prefix lengths of the teacher-forced passes a no-cache decode runs:
    // the pass producing token i covers n + i − 1 positions.
    let pass_lengths: Vec<u64> = (0..m).map(|i| n + i).collect();
    let sum_t: u64 = pass_lengths.iter().sum();
    let sum_t2: u64 = pass_lengths.iter().map(|&t| t * t).sum();
    // Cache lengths of the m−1 incremental steps after the full prompt pass.
    let step_lengths: Vec<u64> = (1..m).map(|i| n + i).collect();
    let sum_l: u64 = step_lengths.iter().sum();
    let steps = step_lengths.len() as u64;

    let mut rows = Vec::new();
    for id in SublayerId::all(config.n_layers) {
        let macs = if masks.is_skipped(id) || m == 0 {
            0
        } else {
            match id.kind {
                SublayerKind::SelfAttn => {
                    let w = (kept_heads(config, masks, id) * config.head_dim()) as u64;
                    if convention.cached() {
                        // Full prompt pass + one-token steps over the cache.
                        (4 * n * d * w + 2 * n * n * w) + steps * 4 * d * w + 2 * sum_l * w
                    } else {
                        4 * sum_t * d * w + 2 * sum_t2 * w
                    }
                }
                SublayerKind::CrossAttn => {
                    let w = (kept_heads(config, masks, id) * config.head_dim()) as u64;
                    if convention.cached() {
                        // K/V over the patches once; queries and mixing per step.
                        2 * s_len * d * w
                            + (2 * n * d * w + 2 * n * s_len * w)
                            + steps * (2 * d * w + 2 * s_len * w)
                    } else {
                        m * 2 * s_len * d * w + 2 * sum_t * d * w + 2 * sum_t * s_len * w
                    }
                }
                SublayerKind::FeedForward => {
                    if convention.cached() {
                        2 * (n + steps) * d * d_ff
                    } else {
                        2 * sum_t * d * d_ff
                    }
                }
            }
        };
        rows.push(CostRow { module: id.to_string(), params: sublayer_params(config, masks, id), flops: f * macs });
    }

    let unembed_macs = if m == 0 {
        0
    } else if convention.cached() {
        (n + steps) * d * vocab
    } else {
        sum_t * d * vocab
    };
    let unembed_params = if config.tie_unembedding { 0 } else { d * vocab };
    rows.push(CostRow { module: "unembedding".into(), params: unembed_params, flops: f * unembed_macs });

    let encoder_macs = if config.encoder_self_attention && m > 0 {
        let p = config.n_patches() as u64;
        let rows_ = config.grid_rows as u64;
        let cols = config.grid_cols as u64;
        4 * p * d * d + rows_ * 2 * cols * cols * d
    } else {
        0
    };
    let encoder_params =
        if config.encoder_self_attention { encoder_attention_params(config.d_model) } else { 0 };
    rows.push(CostRow { module: "encoder".into(), params: encoder_params, flops: f * encoder_macs });

    Ok(CostTable::new(
        format!("decode cost: {m_generated} generated from {n_prompt} prompt tokens, {n_patches} patches"),
        Some(convention.describe()),
        rows,
    ))
}

/// Evaluates all four conventions against reference per-module FLOP values
/// and returns the best match with its worst-case relative error. Used to
/// report which convention a published table most plausibly used when the
/// source does not say.
pub fn best_matching_convention(
    config: &MiniModelConfig,
    masks: &MaskSet,
    n_prompt: usize,
    m_generated: usize,
    n_patches: usize,
    reference: &[(&str, u64)],
) -> Result<(FlopConvention, f64)> {
    if reference.is_empty() {
        return Err(Error::Param("reference rows must be nonempty".into()));
    }
    let mut best: Option<(FlopConvention, f64)> = None;
    for convention in FlopConvention::ALL {
        let table = count_flops(config, masks, n_prompt, m_generated, n_patches, convention)?;
        let mut worst = 0.0f64;
        for &(module, target) in reference {
            let row = table
                .row(module)
                .ok_or_else(|| Error::Param(format!("no cost row named {:?}", module)))?;
            if target == 0 {
                return Err(Error::Param("reference values must be positive".into()));
            }
            let rel = (row.flops as f64 / target as f64 - 1.0).abs();
            worst = worst.max(rel);
        }
        if best.map_or(true, |(_, e)| worst < e) {
            best = Some((convention, worst));
        }
    }
    Ok(best.expect("at least one convention evaluated"))
}

// ───────────────────────────────────────────────────────────────────────
// Structural surgery
// ───────────────────────────────────────────────────────────────────────

/// Removes every sub-layer outside `keep` physically: parameters deleted,
/// structure record updated. The result computes exactly what the masked
/// original computes (a skipped sub-layer and an absent one take the same
/// forward path), so outputs agree to machine precision.
pub fn surgery_sublayers(model: &MiniModel, keep: &BTreeSet<SublayerId>) -> Result<MiniModel> {
    if keep.is_empty() {
        return Err(Error::Recipe("surgery keep set is empty".into()));
    }
    let present: BTreeSet<SublayerId> = model.present_sublayers().into_iter().collect();
    for id in keep {
        if !present.contains(id) {
            return Err(Error::Recipe(format!("keep set references {id}, which is not present")));
        }
    }
    if !keep.iter().any(|id| id.kind == SublayerKind::CrossAttn) {
        return Err(Error::Recipe(
            "at least one cross-attention sub-layer must be kept (the decoder must read the document)".into(),
        ));
    }

    let mut layers = model.layers.clone();
    let mut params: BTreeMap<String, Tensor> =
        model.params().map(|(n, t)| (n.to_string(), t.clone())).collect();
    for id in present.iter().filter(|id| !keep.contains(id)) {
        let prefix = format!("decoder.L{}.{}.", id.layer, id.kind.letter());
        params.retain(|name, _| !name.starts_with(&prefix));
        let layer = &mut layers[id.layer];
        match id.kind {
            SublayerKind::SelfAttn => layer.self_attn = None,
            SublayerKind::CrossAttn => layer.cross_attn = None,
            SublayerKind::FeedForward => layer.feed_forward = false,
        }
    }
    let mut out = model.clone();
    out.replace_structure(layers, params);
    Ok(out)
}

/// Shrinks every present attention sub-layer to the heads listed in `keep`:
/// Q/K/V projections keep the kept heads' column slices, the output
/// projection keeps their row slices, and the structure record maps the
/// surviving slots back to original head indices. Each present attention
/// sub-layer must retain at least one head. Equivalent to head-drop
/// masking to machine precision (a dropped head's value slice contributes
/// exact zeros to the shared output projection).
pub fn surgery_heads(model: &MiniModel, keep: &BTreeSet<HeadId>) -> Result<MiniModel> {
    for h in keep {
        let attn = model
            .layers
            .get(h.sublayer.layer)
            .and_then(|l| l.attn(h.sublayer.kind))
            .ok_or_else(|| Error::Recipe(format!("{} has no attention heads to keep", h.sublayer)))?;
        if attn.slot_of(h.head).is_none() {
            return Err(Error::Recipe(format!("head {h} is not present")));
        }
    }

    let mut layers = model.layers.clone();
    let mut params: BTreeMap<String, Tensor> =
        model.params().map(|(n, t)| (n.to_string(), t.clone())).collect();

    for (l, layer) in model.layers.iter().enumerate() {
        for kind in [SublayerKind::SelfAttn, SublayerKind::CrossAttn] {
            let Some(attn) = layer.attn(kind) else { continue };
            let id = SublayerId::new(kind, l);
            let kept: Vec<usize> = attn
                .original_heads
                .iter()
                .copied()
                .filter(|&h| keep.contains(&HeadId { sublayer: id, head: h }))
                .collect();
            if kept.is_empty() {
                return Err(Error::Recipe(format!("{id} would retain zero heads")));
            }
            if kept.len() == attn.n_heads() {
                continue;
            }
            let hd = attn.head_dim;
            let slots: Vec<usize> =
                kept.iter().map(|&h| attn.slot_of(h).expect("validated present")).collect();
            let prefix = format!("decoder.L{l}.{}", kind.letter());
            for proj in ["q_proj", "k_proj", "v_proj"] {
                let wname = format!("{prefix}.{proj}.weight");
                let w = params.get(&wname).ok_or_else(|| Error::Contract(format!("missing {wname}")))?;
                params.insert(wname, keep_column_blocks(w, hd, &slots));
                let bname = format!("{prefix}.{proj}.bias");
                let b = params.get(&bname).ok_or_else(|| Error::Contract(format!("missing {bname}")))?;
                params.insert(bname, keep_bias_blocks(b, hd, &slots));
            }
            let oname = format!("{prefix}.out_proj.weight");
            let o = params.get(&oname).ok_or_else(|| Error::Contract(format!("missing {oname}")))?;
            params.insert(oname, keep_row_blocks(o, hd, &slots));

            let shape = AttnShape { head_dim: hd, original_heads: kept };
            match kind {
                SublayerKind::SelfAttn => layers[l].self_attn = Some(shape),
                SublayerKind::CrossAttn => layers[l].cross_attn = Some(shape),
                SublayerKind::FeedForward => unreachable!("attention kinds only"),
            }
        }
    }
    let mut out = model.clone();
    out.replace_structure(layers, params);
    Ok(out)
}

/// New matrix keeping the `slots` column blocks of width `hd`.
fn keep_column_blocks(w: &Tensor, hd: usize, slots: &[usize]) -> Tensor {
    let rows = w.rows();
    let new_w = slots.len() * hd;
    let mut out = Tensor::zeros(&[rows, new_w]);
    for i in 0..rows {
        let src = w.row(i);
        let dst = out.row_mut(i);
        for (ns, &slot) in slots.iter().enumerate() {
            dst[ns * hd..(ns + 1) * hd].copy_from_slice(&src[slot * hd..(slot + 1) * hd]);
        }
    }
    out
}

/// New bias keeping the m`slots` blocks of width `hd`.
fn keep_bias_blocks(b: &Tensor, hd: usize, slots: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(slots.len() * hd);
    for &slot in slots {
        data.extend_from_slice(&b.data()[slot * hd..(slot + 1) * hd]);
    }
    Tensor::new(vec![slots.len() * hd], data).expect("block copy preserves length")
}

/// New matrix keeping the `slots` row blocks of height `hd`.
fn keep_row_blocks(w: &Tensor, hd: usize, slots: &[usize]) -> Tensor {
    let cols = w.cols();
    let mut out = Tensor::zeros(&[slots.len() * hd, cols]);
    for (ns, &slot) in slots.iter().enumerate() {
        for r in 0..hd {
            out.row_mut(ns * hd + r).copy_from_slice(w.row(slot * hd + r));
        }
    }
    out
}

// ───────────────────────────────────────────────────────────────────────
// Prune recipes
// ───────────────────────────────────────────────────────────────────────

/// A two-stage structural prune: stage 1 keeps a set of sub-layers, stage 2
/// keeps a set of heads within the surviving attention sub-layers, and a
/// reintroduction pass may put back heads that stage 2 dropped but that a
/// per-task exact-match check showed to be load-bearing. A recipe can be
/// realized either as masks (for analysis and equal-cost comparisons) or as
/// surgery (for genuinely smaller checkpoints); the two agree to machine
/// precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecipe {
    /// Recipe name, recorded in reports and checkpoints.
    pub name: String,
    /// Stage 1: sub-layers kept.
    pub keep_sublayers: BTreeSet<SublayerId>,
    /// Stage 2: heads kept inside kept attention sub-layers.
    pub keep_heads: BTreeSet<HeadId>,
    /// Heads dropped by stage 2 but put back by the reintroduction check.
    /// Invariant: disjoint from `keep_heads`.
    pub reintroduced_heads: BTreeSet<HeadId>,
    /// The parameter fraction the recipe was minted for (of decoder
    /// sub-layer parameters; the realized fraction may differ slightly).
    pub target_fraction: f64,
}

impl PruneRecipe {
    /// The identity recipe: everything kept.
    pub fn identity(config: &MiniModelConfig) -> Self {
        let keep_sublayers: BTreeSet<SublayerId> =
            SublayerId::all(config.n_layers).into_iter().collect();
        let keep_heads = all_heads(config, &keep_sublayers);
        PruneRecipe {
            name: "identity".into(),
            keep_sublayers,
            keep_heads,
            reintroduced_heads: BTreeSet::new(),
            target_fraction: 1.0,
        }
    }

    /// Heads effectively retained: stage-2 keeps plus reintroductions.
    pub fn effective_heads(&self) -> BTreeSet<HeadId> {
        self.keep_heads.union(&self.reintroduced_heads).copied().collect()
    }

    /// Structural validity against a configuration.
    pub fn validate(&self, config: &MiniModelConfig) -> Result<()> {
        if self.keep_sublayers.is_empty() {
            return Err(Error::Recipe(format!("recipe {:?} keeps no sub-layers", self.name)));
        }
        if !self.keep_sublayers.iter().any(|id| id.kind == SublayerKind::CrossAttn) {
            return Err(Error::Recipe(format!("recipe {:?} keeps no cross-attention", self.name)));
        }
        for id in &self.keep_sublayers {
            if id.layer >= config.n_layers {
                return Err(Error::Recipe(format!("recipe {:?} keeps missing sub-layer {id}", self.name)));
            }
        }
        if let Some(h) = self.reintroduced_heads.intersection(&self.keep_heads).next() {
            return Err(Error::Recipe(format!(
                "recipe {:?} reintroduces {h}, which stage 2 already keeps",
                self.name
            )));
        }
        let effective = self.effective_heads();
        for h in &effective {
            if !h.sublayer.kind.is_attention() {
                return Err(Error::Recipe(format!("recipe {:?} keeps head of non-attention {}", self.name, h.sublayer)));
            }
            if h.head >= config.n_heads || h.sublayer.layer >= config.n_layers {
                return Err(Error::Recipe(format!("recipe {:?} keeps missing head {h}", self.name)));
            }
            if !self.keep_sublayers.contains(&h.sublayer) {
                return Err(Error::Recipe(format!(
                    "recipe {:?} keeps head {h} of a dropped sub-layer",
                    self.name
                )));
            }
        }
        for id in self.keep_sublayers.iter().filter(|id| id.kind.is_attention()) {
            if !effective.iter().any(|h| h.sublayer == *id) {
                return Err(Error::Recipe(format!("recipe {:?} leaves {id} with zero heads", self.name)));
            }
        }
        Ok(())
    }

    /// The mask realization: skip dropped sub-layers, drop non-kept heads
    /// of kept attention sub-layers.
    pub fn masks(&self, config: &MiniModelConfig) -> Result<MaskSet> {
        self.validate(config)?;
        let mut masks = MaskSet::from_keep_set(config.n_layers, &self.keep_sublayers);
        let effective = self.effective_heads();
        for id in self.keep_sublayers.iter().filter(|id| id.kind.is_attention()) {
            for head in 0..config.n_heads {
                let h = HeadId { sublayer: *id, head };
                if !effective.contains(&h) {
                    masks.drop_head(h);
                }
            }
        }
        Ok(masks)
    }

    /// The surgery realization: physically removes dropped sub-layers, then
    /// shrinks attention projections to the effective heads.
    pub fn apply(&self, model: &MiniModel) -> Result<MiniModel> {
        self.validate(&model.config)?;
        let stage1 = surgery_sublayers(model, &self.keep_sublayers)?;
        let effective = self.effective_heads();
        let full = all_heads(&model.config, &self.keep_sublayers);
        if effective == full {
            return Ok(stage1);
        }
        surgery_heads(&stage1, &effective)
    }

    /// Closed-form decoder sub-layer parameter count of the recipe.
    pub fn decoder_params(&self, config: &MiniModelConfig) -> Result<u64> {
        let masks = self.masks(config)?;
        Ok(count_params(config, &masks)?.decoder_sublayer_params())
    }
}

/// All heads of the attention sub-layers in `keep`.
fn all_heads(config: &MiniModelConfig, keep: &BTreeSet<SublayerId>) -> BTreeSet<HeadId> {
    let mut out = BTreeSet::new();
    for id in keep.iter().filter(|id| id.kind.is_attention()) {
        for head in 0..config.n_heads {
            out.insert(HeadId { sublayer: *id, head });
        }
    }
    out
}

/// Writes a recipe as pretty-printed JSON.
pub fn save_recipe(path: &Path, recipe: &PruneRecipe) -> Result<()> {
    let mut text = serde_json::to_string_pretty(recipe)
        .map_err(|e| Error::Checkpoint(format!("recipe serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a recipe written by [`save_recipe`].
pub fn load_recipe(path: &Path) -> Result<PruneRecipe> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("recipe parse failed: {e}")))
}

// ───────────────────────────────────────────────────────────────────────
// Recipe minting
// ───────────────────────────────────────────────────────────────────────

/// Budgets and thresholds for minting the two-stage recipes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MintBudgets {
    /// Stage-1 target: kept fraction of decoder sub-layer parameters.
    pub coarse_fraction: f64,
    /// Stage-2 target: kept fraction after head drops.
    pub fine_fraction: f64,
    /// A first-layer feed-forward counts as absorbable when the
    /// token-reprojection delta at the boundary just downstream of it is at
    /// most this fraction of the sweep's baseline perplexity.
    pub absorb_tolerance: f64,
    /// Reintroduction threshold in exact-match points (0.02 = 2 points):
    /// a dropped head returns if removing it costs any task kind more than
    /// this on the selection split.
    pub reintroduction_points: f64,
}

impl Default for MintBudgets {
    fn default() -> Self {
        MintBudgets {
            coarse_fraction: 0.32,
            fine_fraction: 0.07,
            absorb_tolerance: 0.02,
            reintroduction_points: 0.02,
        }
    }
}

/// Mints the two guided recipes from interpretability measurements.
///
/// The coarse recipe keeps sub-layers in decreasing order of their
/// skip-sweep perplexity delta until the parameter budget is exhausted,
/// always starting from the most critical cross-attention sub-layer; when
/// the token-reprojection sweep shows the stream is still readable as
/// tokens just downstream of the first feed-forward (its work can be
/// absorbed into the embedding), that sub-layer is excluded from
/// consideration. The fine recipe starts from the coarse keep set and
/// drops heads — high-entropy self-attention and low-variance
/// cross-attention first — until its tighter budget is met, never emptying
/// a kept attention sub-layer. Reintroduction is a separate, measured pass
/// ([`reintroduce_heads`]); freshly minted fine recipes have an empty
/// reintroduction list. A budget of 100% or more yields the full structure.
pub fn mint_recipe(
    config: &MiniModelConfig,
    stats: &HeadStats,
    skip: &SweepResult,
    reprojection: &SweepResult,
    budgets: &MintBudgets,
) -> Result<(PruneRecipe, PruneRecipe)> {
    config.validate()?;
    let mut candidates: Vec<(SublayerId, f64)> = Vec::new();
    for (name, &delta) in &skip.deltas {
        let id: SublayerId = name
            .parse()
            .map_err(|_| Error::Contract(format!("skip sweep key {:?} is not a sub-layer id", name)))?;
        candidates.push((id, delta));
    }
    if candidates.is_empty() {
        return Err(Error::Contract("skip sweep has no sub-layer deltas".into()));
    }
    let identity_masks = MaskSet::identity();
    let full_params: u64 = candidates
        .iter()
        .map(|(id, _)| sublayer_params(config, &identity_masks, *id))
        .sum();

    // Coarse stage: fill the parameter budget by criticality.
    let keep_sublayers: BTreeSet<SublayerId> = if budgets.coarse_fraction >= 1.0 {
        candidates.iter().map(|(id, _)| *id).collect()
    } else {
        let budget = (budgets.coarse_fraction * full_params as f64).floor() as u64;
        let absorbable = first_ff_absorbable(&candidates, reprojection, budgets.absorb_tolerance)?;
        let mut order = candidates.clone();
        order.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        let anchor = order
            .iter()
            .map(|(id, _)| *id)
            .find(|id| id.kind == SublayerKind::CrossAttn)
            .ok_or_else(|| Error::Recipe("skip sweep covers no cross-attention sub-layer".into()))?;
        let mut keep = BTreeSet::from([anchor]);
        let mut used = sublayer_params(config, &identity_masks, anchor);
        if used > budget {
            return Err(Error::Recipe(format!(
                "coarse budget {budget} cannot hold one cross-attention sub-layer ({used} parameters)"
            )));
        }
        for (id, _) in order {
            if keep.contains(&id) || absorbable == Some(id) {
                continue;
            }
            let cost = sublayer_params(config, &identity_masks, id);
            if used + cost <= budget {
                keep.insert(id);
                used += cost;
            }
        }
        keep
    };

    let coarse = PruneRecipe {
        name: "mint-coarse".into(),
        keep_heads: all_heads(config, &keep_sublayers),
        keep_sublayers: keep_sublayers.clone(),
        reintroduced_heads: BTreeSet::new(),
        target_fraction: budgets.coarse_fraction,
    };

    // Fine stage: drop heads from the coarse structure in increasing
    // importance until the tighter budget is met.
    let coarse_params = coarse.decoder_params(config)?;
    let fine_budget = (budgets.fine_fraction * full_params as f64).floor() as u64;
    let mut fine = PruneRecipe {
        name: "mint-fine".into(),
        keep_sublayers: keep_sublayers.clone(),
        keep_heads: coarse.keep_heads.clone(),
        reintroduced_heads: BTreeSet::new(),
        target_fraction: budgets.fine_fraction,
    };
    if coarse_params > fine_budget {
        let ranked = rank_heads(stats);
        let droppable: BTreeSet<HeadId> = fine.keep_heads.clone();
        let mut order: Vec<(HeadId, f64)> = Vec::new();
        for (list_pos, list) in [&ranked.self_attention, &ranked.cross_attention].into_iter().enumerate() {
            let len = list.len().max(1) as f64;
            for (idx, h) in list.iter().enumerate() {
                if droppable.contains(h) {
                    let _ = list_pos;
                    order.push((*h, (idx + 1) as f64 / len));
                }
            }
        }
        for h in &droppable {
            if !order.iter().any(|(oh, _)| oh == h) {
                return Err(Error::Contract(format!("head statistics do not cover {h}")));
            }
        }
        // Least important first: largest within-list rank fraction.
        order.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        let head_cost = attention_params(config.d_model, config.head_dim(), 1)
            - attention_params(config.d_model, config.head_dim(), 0);
        let mut heads_left: BTreeMap<SublayerId, usize> = BTreeMap::new();
        for h in &droppable {
            *heads_left.entry(h.sublayer).or_insert(0) += 1;
        }
        let mut used = coarse_params;
        for (h, _) in order {
            if used <= fine_budget {
                break;
            }
            let left = heads_left.get_mut(&h.sublayer).expect("droppable head has a sub-layer");
            if *left <= 1 {
                continue;
            }
            *left -= 1;
            used -= head_cost;
            fine.keep_heads.remove(&h);
        }
        if used > fine_budget {
            return Err(Error::Recipe(format!(
                "fine budget {fine_budget} is below the minimum structure ({used} parameters with one head per kept attention sub-layer)"
            )));
        }
    }

    Ok((coarse, fine))
}

/// Whether the first-layer feed-forward qualifies as absorbable: present
/// among the candidates, and the reprojection delta at the boundary just
/// downstream of it is within tolerance of the baseline.
fn first_ff_absorbable(
    candidates: &[(SublayerId, f64)],
    reprojection: &SweepResult,
    tolerance: f64,
) -> Result<Option<SublayerId>> {
    let first_ff = SublayerId::new(SublayerKind::FeedForward, 0);
    if !candidates.iter().any(|(id, _)| *id == first_ff) {
        return Ok(None);
    }
    let mut ids: Vec<SublayerId> = candidates.iter().map(|(id, _)| *id).collect();
    ids.sort();
    let boundary = match ids.iter().find(|id| **id > first_ff) {
        Some(next) => format!("{next}.input"),
        None => "head.input".to_string(),
    };
    let delta = reprojection.deltas.get(&boundary).ok_or_else(|| {
        Error::Contract(format!("reprojection sweep lacks boundary {:?}", boundary))
    })?;
    Ok((delta.abs() <= tolerance * reprojection.baseline).then_some(first_ff))
}

// ───────────────────────────────────────────────────────────────────────
// Head reintroduction
// ───────────────────────────────────────────────────────────────────────

/// Measures, for every head the recipe's stage 2 dropped, what its absence
/// costs each task kind in exact match on the selection split, and returns
/// the recipe with every head whose absence costs any kind more than
/// `em_drop_points` (0.02 = 2 points) moved onto the reintroduction list.
/// Each candidate is tested independently against the recipe as given.
pub fn reintroduce_heads(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    selection: &[usize],
    recipe: &PruneRecipe,
    em_drop_points: f64,
) -> Result<PruneRecipe> {
    if selection.is_empty() {
        return Err(Error::Param("reintroduction needs a nonempty selection split".into()));
    }
    let config = &model.config;
    recipe.validate(config)?;

    let mut by_kind: BTreeMap<TaskKind, Vec<usize>> = BTreeMap::new();
    for &i in selection {
        let (doc, _) = dataset
            .get(i)
            .ok_or_else(|| Error::Param(format!("selection index {i} out of dataset range")))?;
        by_kind.entry(doc.task_kind).or_default().push(i);
    }

    let mut memories: BTreeMap<usize, Tensor> = BTreeMap::new();
    let base = em_by_kind(model, dataset, &by_kind, &recipe.masks(config)?, &mut memories)?;

    let effective = recipe.effective_heads();
    let candidates: Vec<HeadId> = all_heads(config, &recipe.keep_sublayers)
        .into_iter()
        .filter(|h| !effective.contains(h))
        .collect();

    let mut out = recipe.clone();
    for h in candidates {
        let mut trial = recipe.clone();
        trial.reintroduced_heads.insert(h);
        let with = em_by_kind(model, dataset, &by_kind, &trial.masks(config)?, &mut memories)?;
        let rescued = by_kind.keys().any(|kind| with[kind] - base[kind] > em_drop_points);
        if rescued {
            out.reintroduced_heads.insert(h);
        }
    }
    Ok(out)
}

/// Greedy exact match per task kind under the masks.
fn em_by_kind(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    by_kind: &BTreeMap<TaskKind, Vec<usize>>,
    masks: &MaskSet,
    memories: &mut BTreeMap<usize, Tensor>,
) -> Result<BTreeMap<TaskKind, f64>> {
    let max_new = model.config.grid_cols + 2;
    let mut out = BTreeMap::new();
    for (&kind, indices) in by_kind {
        let mut exact = 0usize;
        for &i in indices {
            let (doc, qa) = &dataset[i];
            if !memories.contains_key(&i) {
                memories.insert(i, model.encode(&doc.grid)?);
            }
            let memory = &memories[&i];
            let prompt = encode_prompt(qa, model.config.max_prompt)?;
            let generated = model.generate(memory, prompt.generation_prefix(), max_new, masks)?;
            if exact_match(&decode_tokens(&generated), &decode_tokens(&qa.answer)) {
                exact += 1;
            }
        }
        out.insert(kind, exact as f64 / indices.len().max(1) as f64);
    }
    Ok(out)
}

// ───────────────────────────────────────────────────────────────────────
// Enumeration baseline
// ───────────────────────────────────────────────────────────────────────

/// Budget predicates for student enumeration, as fractions of the full
/// structure's decoder sub-layer parameters and decode FLOPs under the
/// stated workload and convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentBudget {
    /// Maximum kept fraction of decoder sub-layer parameters.
    pub max_param_fraction: f64,
    /// Maximum kept fraction of decoder sub-layer decode FLOPs.
    pub max_flop_fraction: f64,
    /// Prompt length of the FLOP workload.
    pub prompt_tokens: usize,
    /// Generated-token count of the FLOP workload.
    pub generated_tokens: usize,
    /// FLOP convention the budget is stated under.
    pub convention: FlopConvention,
}

impl Default for StudentBudget {
    fn default() -> Self {
        StudentBudget {
            max_param_fraction: 1.0,
            max_flop_fraction: 1.0,
            prompt_tokens: 16,
            generated_tokens: 8,
            convention: FlopConvention::Mac1NoCache,
        }
    }
}

/// One enumerated student: a sub-layer keep set with its exact costs and
/// proxy quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentCandidate {
    /// Sub-layers kept.
    pub keep: BTreeSet<SublayerId>,
    /// Decoder sub-layer parameters kept.
    pub params: u64,
    /// Kept fraction of decoder sub-layer parameters.
    pub param_fraction: f64,
    /// Decoder sub-layer decode FLOPs kept.
    pub flops: u64,
    /// Kept fraction of decoder sub-layer decode FLOPs.
    pub flop_fraction: f64,
    /// Teacher-forced perplexity on the selection split with the keep set
    /// masked in (no retraining).
    pub proxy_perplexity: f64,
}

/// All sub-layer keep sets over `present` that retain at least one
/// cross-attention sub-layer, in ascending bitmask order (duplicate-free by
/// construction). Capped at 16 sub-layers.
pub fn enumerate_keep_sets(present: &[SublayerId]) -> Result<Vec<BTreeSet<SublayerId>>> {
    if present.len() > 16 {
        return Err(Error::Param(format!(
            "enumeration over {} sub-layers exceeds the 2^16 cap",
            present.len()
        )));
    }
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << present.len()) {
        let keep: BTreeSet<SublayerId> = present
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, id)| *id)
            .collect();
        if keep.iter().any(|id| id.kind == SublayerKind::CrossAttn) {
            out.push(keep);
        }
    }
    Ok(out)
}

/// Exhaustive student search: every sub-layer keep set within the budgets,
/// scored by teacher-forced perplexity on the selection split (cheapest
/// faithful proxy — candidates are not retrained here) and returned best
/// first, truncated to `limit`. Requires the model's full architecture
/// (enumeration reasons at config level).
pub fn enumerate_students(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    selection: &[usize],
    budget: &StudentBudget,
    limit: usize,
) -> Result<Vec<StudentCandidate>> {
    let config = &model.config;
    let present = model.present_sublayers();
    if present.len() != 3 * config.n_layers
        || model.present_heads().len() != 2 * config.n_layers * config.n_heads
    {
        return Err(Error::Contract(
            "student enumeration requires the full (unsurgered) architecture".into(),
        ));
    }
    let identity = MaskSet::identity();
    let full_params = count_params(config, &identity)?.decoder_sublayer_params();
    let full_flops = count_flops(
        config,
        &identity,
        budget.prompt_tokens,
        budget.generated_tokens,
        config.n_patches(),
        budget.convention,
    )?
    .decoder_sublayer_flops();
    if full_params == 0 || full_flops == 0 {
        return Err(Error::Param("budget fractions need a nonzero full-model workload".into()));
    }

    let mut survivors = Vec::new();
    for keep in enumerate_keep_sets(&present)? {
        let masks = MaskSet::from_keep_set(config.n_layers, &keep);
        let params = count_params(config, &masks)?.decoder_sublayer_params();
        let flops = count_flops(
            config,
            &masks,
            budget.prompt_tokens,
            budget.generated_tokens,
            config.n_patches(),
            budget.convention,
        )?
        .decoder_sublayer_flops();
        let param_fraction = params as f64 / full_params as f64;
        let flop_fraction = flops as f64 / full_flops as f64;
        if param_fraction <= budget.max_param_fraction && flop_fraction <= budget.max_flop_fraction {
            survivors.push((keep, masks, params, param_fraction, flops, flop_fraction));
        }
    }

    let mut candidates = Vec::with_capacity(survivors.len());
    for (keep, masks, params, param_fraction, flops, flop_fraction) in survivors {
        let proxy = perplexity_teacher_forced(model, dataset, selection, &masks, &[])?;
        candidates.push(StudentCandidate {
            keep,
            params,
            param_fraction,
            flops,
            flop_fraction,
            proxy_perplexity: proxy,
        });
    }
    candidates.sort_by(|a, b| {
        a.proxy_perplexity
            .partial_cmp(&b.proxy_perplexity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.params.cmp(&b.params))
            .then_with(|| a.keep.cmp(&b.keep))
    });
    candidates.truncate(limit);
    Ok(candidates)
}

// ───────────────────────────────────────────────────────────────────────
// Magnitude × activation baseline
// ───────────────────────────────────────────────────────────────────────

/// Unstructured pruning by weight magnitude times input-activation norm.
///
/// For every decoder sub-layer weight matrix, each weight is scored
/// |W[j,c]| · ‖x_j‖, where ‖x_j‖ is the L2 norm of input feature j over
/// all calibration tokens, and per output unit (one column of our
/// input-major matrices) the lowest-scoring `sparsity` fraction is masked
/// to zero. Activations are collected with teacher forcing on the
/// calibration subset; the inputs each matrix actually sees are
/// reconstructed from captured sites (normed stream for Q/K/V and the
/// feed-forward input, raw patch encodings for cross-attention K/V, mixed
/// values for the output projection, hidden activations for the second
/// feed-forward matrix). Biases, embeddings, and the encoder are never
/// masked, and dense shapes are unchanged — this baseline saves no FLOPs.
pub fn magnitude_activation_prune(
    model: &MiniModel,
    dataset: &[(SynthDoc, QAPair)],
    calibration: &[usize],
    sparsity: f64,
) -> Result<WeightMaskSet> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Param(format!("sparsity {sparsity} outside [0, 1)")));
    }
    if calibration.is_empty() {
        return Err(Error::Param("calibration subset is empty".into()));
    }

    let present = model.present_sublayers();
    let mut sites = Vec::new();
    for &id in &present {
        sites.push(Site::new(id, SiteKind::Input));
        if id.kind.is_attention() {
            sites.push(Site::new(id, SiteKind::ValueTimesAttention));
        }
    }
    let capture = CaptureSet::of(sites.into_iter());
    let masks = MaskSet::identity();

    // Squared input-feature sums per weight matrix, keyed by parameter name.
    let mut accum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &i in calibration {
        let (doc, qa) = dataset
            .get(i)
            .ok_or_else(|| Error::Param(format!("calibration index {i} out of dataset range")))?;
        let memory = model.encode(&doc.grid)?;
        let prompt = encode_prompt(qa, model.config.max_prompt)?;
        let (_, trace) = model.decode_teacher_forced(&memory, &prompt.tokens, &masks, &capture)?;

        for &id in &present {
            let prefix = format!("decoder.L{}.{}", id.layer, id.kind.letter());
            let input = trace
                .get(&Site::new(id, SiteKind::Input))
                .ok_or_else(|| Error::Contract(format!("missing input capture for {id}")))?;
            let normed = layer_norm_rows(
                input,
                require(model, &format!("{prefix}.norm.gain"))?,
                require(model, &format!("{prefix}.norm.bias"))?,
            );
            match id.kind {
                SublayerKind::FeedForward => {
                    add_squared(&mut accum, format!("{prefix}.w1.weight"), &normed);
                    let hidden = hidden_activations(
                        &normed,
                        require(model, &format!("{prefix}.w1.weight"))?,
                        require(model, &format!("{prefix}.w1.bias"))?,
                    )?;
                    add_squared(&mut accum, format!("{prefix}.w2.weight"), &hidden);
                }
                SublayerKind::SelfAttn | SublayerKind::CrossAttn => {
                    add_squared(&mut accum, format!("{prefix}.q_proj.weight"), &normed);
                    let kv_input = match id.kind {
                        SublayerKind::SelfAttn => &normed,
                        _ => &memory,
                    };
                    add_squared(&mut accum, format!("{prefix}.k_proj.weight"), kv_input);
                    add_squared(&mut accum, format!("{prefix}.v_proj.weight"), kv_input);
                    let av = trace
                        .get(&Site::new(id, SiteKind::ValueTimesAttention))
                        .ok_or_else(|| Error::Contract(format!("missing value capture for {id}")))?;
                    add_squared(&mut accum, format!("{prefix}.out_proj.weight"), av);
                }
            }
        }
    }

    let mut out = WeightMaskSet::new();
    for (name, squared) in accum {
        let w = require(model, &name)?;
        if squared.len() != w.rows() {
            return Err(Error::Shape {
                op: "magnitude_activation_prune",
                detail: format!("{name}: {} activation features vs {} matrix rows", squared.len(), w.rows()),
            });
        }
        let norms: Vec<f64> = squared.iter().map(|&s| s.sqrt()).collect();
        let mask = magnitude_unit_mask(w, &norms, sparsity)?;
        if mask.iter().any(|&dead| dead) {
            out.insert(&name, mask);
        }
    }
    Ok(out)
}

/// The per-matrix masking rule of [`magnitude_activation_prune`], exposed
/// so small cases can be checked by hand: scores every weight as
/// |W[j,c]| · feature_norms[j] and, per output unit (column), marks the
/// lowest-scoring `round(sparsity · in_dim)` weights dead. Ties break
/// toward the lower input index.
pub fn magnitude_unit_mask(
    weights: &Tensor,
    feature_norms: &[f64],
    sparsity: f64,
) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Param(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let (in_dim, out_dim) = (weights.rows(), weights.cols());
    if feature_norms.len() != in_dim {
        return Err(Error::Shape {
            op: "magnitude_unit_mask",
            detail: format!("{} feature norms vs {} matrix rows", feature_norms.len(), in_dim),
        });
    }
    let zeros_per_unit = ((sparsity * in_dim as f64).round() as usize).min(in_dim);
    let mut mask = vec![false; in_dim * out_dim];
    if zeros_per_unit == 0 {
        return Ok(mask);
    }
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(in_dim);
    for c in 0..out_dim {
        scored.clear();
        for j in 0..in_dim {
            scored.push((weights.at2(j, c).abs() * feature_norms[j], j));
        }
        scored.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
        });
        for &(_, j) in scored.iter().take(zeros_per_unit) {
            mask[j * out_dim + c] = true;
        }
    }
    Ok(mask)
}

fn require<'m>(model: &'m MiniModel, name: &str) -> Result<&'m Tensor> {
    model
        .param(name)
        .ok_or_else(|| Error::Contract(format!("missing parameter {:?}", name)))
}

/// Row-wise layer norm matching the forward pass (population variance,
/// epsilon inside the square root).
fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let dst = out.row_mut(i);
        for j in 0..c {
            dst[j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
        }
    }
    out
}

/// gelu(x·W₁ + b₁): the inputs the second feed-forward matrix sees.
fn hidden_activations(normed: &Tensor, w1: &Tensor, b1: &Tensor) -> Result<Tensor> {
    let mut hidden = normed.matmul(w1)?;
    let cols = hidden.cols();
    for i in 0..hidden.rows() {
        let row = hidden.row_mut(i);
        for j in 0..cols {
            row[j] = gelu_value(row[j] + b1.data()[j]);
        }
    }
    Ok(hidden)
}

/// Accumulates per-feature squared sums of `rows` into the named slot.
fn add_squared(accum: &mut BTreeMap<String, Vec<f64>>, name: String, rows: &Tensor) {
    let cols = rows.cols();
    let slot = accum.entry(name).or_insert_with(|| vec![0.0; cols]);
    for i in 0..rows.rows() {
        for (j, &v) in rows.row(i).iter().enumerate() {
            slot[j] += v * v;
        }
    }
}

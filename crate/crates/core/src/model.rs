//! The miniature encoder–decoder model under study.
//!
//! A patch encoder (per-cell glyph embedding + learned 2-D positional
//! embedding, with an optional row-local self-attention layer) feeds a
//! multimodal decoder of `n_layers` layers. Each decoder layer runs three
//! sub-layers in order — self-attention `S`, cross-attention `C`,
//! feed-forward `M` — as pre-norm residual blocks:
//!
//! ```text
//! stream ← stream + SubLayer(LayerNorm(stream))
//! ```
//!
//! Pre-norm makes "skip sub-layer = identity on the residual stream" exact,
//! which the skipping sweeps rely on. There is deliberately *no* final layer
//! norm after the last block, so the logit-lens projection of the final
//! stream coincides exactly with the model head.
//!
//! Every sub-layer and every attention head is individually maskable (see
//! [`MaskSet`]), and each sub-layer exposes named activation sites that can
//! be captured into an [`ActivationTrace`] or overwritten by a [`SitePatch`]
//! before downstream use. Site semantics:
//!
//! | site                  | shape            | meaning                          |
//! |-----------------------|------------------|----------------------------------|
//! | `input`               | (T, d)           | residual stream entering the sub-layer (pre-norm) |
//! | `output`              | (T, d)           | the sub-layer's *contribution* (incl. out-proj bias), before the residual add |
//! | `attention-map`       | (heads, T, S)    | per-head post-softmax attention  |
//! | `value-times-attention` | (T, heads·d_h) | per-head attention-weighted values, pre out-proj |
//! | `query`/`key`/`value` | (T or S, heads·d_h) | post-projection, pre-split    |
//!
//! `S` is the key-side length: the token count for self-attention, the patch
//! count for cross-attention. Because `output` records the contribution, the
//! stream obeys `input(next) = input(prev) + output(prev)` exactly, a
//! skipped sub-layer has an all-zero `output`, and zero-patching `output`
//! is identical to skipping. Dropping a head zeroes that head's slice of
//! `value-times-attention` before the output projection (the projection
//! bias stays — skipping the whole sub-layer is what removes the bias).
//!
//! Masks reference heads by their *original* indices; after head surgery the
//! model remembers which original heads each slot corresponds to, so
//! analysis code keeps addressing `C3.H11` even in a shrunken model.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Graph, Tensor, Var};

// ───────────────────────────────────────────────────────────────────────
// Special tokens
// ───────────────────────────────────────────────────────────────────────

/// Padding (never attended to in practice; sequences are dense here).
pub const PAD_TOKEN: u32 = 0;
/// End of sequence; greedy generation stops on it.
pub const EOS_TOKEN: u32 = 1;
/// Marks the start of the question span.
pub const QUESTION_START_TOKEN: u32 = 2;
/// Marks the start of the answer span; generation prompts end with it.
pub const ANSWER_START_TOKEN: u32 = 3;
/// Uppercase-shift marker: renders the following glyph as uppercase.
pub const SHIFT_TOKEN: u32 = 4;
/// First id available to the glyph alphabet.
pub const FIRST_GLYPH_TOKEN: u32 = 5;

// ───────────────────────────────────────────────────────────────────────
// Configuration and input grid
// ───────────────────────────────────────────────────────────────────────

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniModelConfig {
    /// Embedding width.
    pub d_model: usize,
    /// Decoder layer count.
    pub n_layers: usize,
    /// Heads per attention sub-layer.
    pub n_heads: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    /// Token count (special tokens + glyph alphabet must fit).
    pub vocab_size: usize,
    /// Document grid height (one text line per row).
    pub grid_rows: usize,
    /// Document grid width.
    pub grid_cols: usize,
    /// Maximum decoder positions.
    pub max_prompt: usize,
    /// Share the unembedding with the token embedding (transpose).
    pub tie_unembedding: bool,
    /// Add a single row-local self-attention layer to the encoder.
    pub encoder_self_attention: bool,
}

impl MiniModelConfig {
    /// The toy configuration used throughout training and analysis: the
    /// smallest scale at which four layers and twelve sub-layers develop
    /// differentiated roles while training on one CPU core in minutes.
    pub fn toy_default() -> Self {
        MiniModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 8,
            d_ff: 256,
            vocab_size: 128,
            grid_rows: 12,
            grid_cols: 12,
            max_prompt: 64,
            tie_unembedding: true,
            encoder_self_attention: true,
        }
    }

    /// Full-scale reference configuration used for cost accounting only
    /// (never instantiated as parameters): a 4-layer, 16-head decoder at
    /// d=1024 with a 57,525-token vocabulary and 4800 encoder patches.
    pub fn reference_base() -> Self {
        MiniModelConfig {
            d_model: 1024,
            n_layers: 4,
            n_heads: 16,
            d_ff: 4096,
            vocab_size: 57_525,
            grid_rows: 60,
            grid_cols: 80,
            max_prompt: 128,
            tie_unembedding: false,
            encoder_self_attention: false,
        }
    }

    /// Encoder output sequence length.
    pub fn n_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Width of one attention head.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Checks structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.vocab_size as u32) < FIRST_GLYPH_TOKEN {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the special tokens",
                self.vocab_size
            )));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.max_prompt == 0 {
            return Err(Error::Config("grid and prompt sizes must be positive".into()));
        }
        Ok(())
    }
}

/// A document as the encoder sees it: a dense grid of glyph-token ids,
/// row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    rows: usize,
    cols: usize,
    cells: Vec<u32>,
}

impl TokenGrid {
    /// Builds a grid, checking the cell count.
    pub fn new(rows: usize, cols: usize, cells: Vec<u32>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::Shape {
                op: "TokenGrid::new",
                detail: format!("{}×{} grid needs {} cells, got {}", rows, cols, rows * cols, cells.len()),
            });
        }
        Ok(TokenGrid { rows, cols, cells })
    }

    /// Grid filled with one token (e.g. the blank glyph).
    pub fn filled(rows: usize, cols: usize, token: u32) -> Self {
        TokenGrid { rows, cols, cells: vec![token; rows * cols] }
    }

    /// Grid height.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Grid width.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// All cells, row-major.
    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    /// Cell at (row, col).
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.cols + col]
    }

    /// Overwrites cell (row, col).
    pub fn set(&mut self, row: usize, col: usize, token: u32) {
        self.cells[row * self.cols + col] = token;
    }
}

// ───────────────────────────────────────────────────────────────────────
// Sub-layer and head addressing
// ───────────────────────────────────────────────────────────────────────

/// The three sub-layer kinds of a decoder layer, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SublayerKind {
    /// Causal self-attention (`S`).
    SelfAttn,
    /// Cross-attention over patch encodings (`C`).
    CrossAttn,
    /// Position-wise feed-forward (`M`).
    FeedForward,
}

impl SublayerKind {
    /// One-letter name used in printable ids.
    pub fn letter(self) -> char {
        match self {
            SublayerKind::SelfAttn => 'S',
            SublayerKind::CrossAttn => 'C',
            SublayerKind::FeedForward => 'M',
        }
    }

    /// True for the two attention kinds.
    pub fn is_attention(self) -> bool {
        !matches!(self, SublayerKind::FeedForward)
    }
}

/// Identifies one decoder sub-layer, printable as `S0`…`M3`.
///
/// Ordering follows execution order: `S0 < C0 < M0 < S1 < …`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SublayerId {
    /// Layer index, 0-based.
    pub layer: usize,
    /// Which of the three blocks.
    pub kind: SublayerKind,
}

impl SublayerId {
    /// Shorthand constructor.
    pub fn new(kind: SublayerKind, layer: usize) -> Self {
        SublayerId { layer, kind }
    }

    /// All sub-layer ids of an `n_layers` decoder in execution order.
    pub fn all(n_layers: usize) -> Vec<SublayerId> {
        let mut ids = Vec::with_capacity(3 * n_layers);
        for layer in 0..n_layers {
            for kind in [SublayerKind::SelfAttn, SublayerKind::CrossAttn, SublayerKind::FeedForward] {
                ids.push(SublayerId { layer, kind });
            }
        }
        ids
    }
}

impl fmt::Display for SublayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.letter(), self.layer)
    }
}

impl FromStr for SublayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        let kind = match chars.next() {
            Some('S') => SublayerKind::SelfAttn,
            Some('C') => SublayerKind::CrossAttn,
            Some('M') => SublayerKind::FeedForward,
            _ => return Err(Error::Param(format!("bad sub-layer id {:?}", s))),
        };
        let layer: usize = chars
            .as_str()
            .parse()
            .map_err(|_| Error::Param(format!("bad sub-layer id {:?}", s)))?;
        Ok(SublayerId { layer, kind })
    }
}

impl TryFrom<String> for SublayerId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SublayerId> for String {
    fn from(id: SublayerId) -> String {
        id.to_string()
    }
}

/// Identifies one attention head, printable as `C3.H11`. Head indices are
/// always *original* indices — they survive head surgery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HeadId {
    /// Owning attention sub-layer.
    pub sublayer: SublayerId,
    /// Head index within the sub-layer, 0-based.
    pub head: usize,
}

impl HeadId {
    /// Shorthand constructor; the sub-layer must be an attention kind.
    pub fn new(sublayer: SublayerId, head: usize) -> Result<Self> {
        if !sublayer.kind.is_attention() {
            return Err(Error::Param(format!(
                "{} is not an attention sub-layer, cannot own heads",
                sublayer
            )));
        }
        Ok(HeadId { sublayer, head })
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.H{}", self.sublayer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (sub, head) = s
            .split_once(".H")
            .ok_or_else(|| Error::Param(format!("bad head id {:?}", s)))?;
        let sublayer: SublayerId = sub.parse()?;
        let head: usize = head
            .parse()
            .map_err(|_| Error::Param(format!("bad head id {:?}", s)))?;
        HeadId::new(sublayer, head)
    }
}

impl TryFrom<String> for HeadId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HeadId> for String {
    fn from(id: HeadId) -> String {
        id.to_string()
    }
}

// ───────────────────────────────────────────────────────────────────────
// Masks
// ───────────────────────────────────────────────────────────────────────

/// Which sub-layers to skip and which heads to drop during a forward pass.
///
/// The empty mask is the identity configuration. A skipped sub-layer
/// implicitly drops all its heads (and its output-projection bias); a
/// dropped head zeroes only its own value slice, leaving the bias in place.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    skipped: BTreeSet<SublayerId>,
    dropped_heads: BTreeSet<HeadId>,
}

impl MaskSet {
    /// The identity configuration: nothing skipped, nothing dropped.
    pub fn identity() -> Self {
        MaskSet::default()
    }

    /// Marks a sub-layer as skipped (norm + sub-layer + bias bypassed as
    /// one unit).
    pub fn skip(&mut self, id: SublayerId) -> &mut Self {
        self.skipped.insert(id);
        self
    }

    /// Marks a head as dropped.
    pub fn drop_head(&mut self, id: HeadId) -> &mut Self {
        self.dropped_heads.insert(id);
        self
    }

    /// Single-skip convenience constructor.
    pub fn skipping(id: SublayerId) -> Self {
        let mut m = MaskSet::identity();
        m.skip(id);
        m
    }

    /// Builds the mask whose *kept* sub-layers are exactly `keep`, over an
    /// `n_layers` decoder.
    pub fn from_keep_set(n_layers: usize, keep: &BTreeSet<SublayerId>) -> Self {
        let mut m = MaskSet::identity();
        for id in SublayerId::all(n_layers) {
            if !keep.contains(&id) {
                m.skip(id);
            }
        }
        m
    }

    /// True when the sub-layer is skipped.
    pub fn is_skipped(&self, id: SublayerId) -> bool {
        self.skipped.contains(&id)
    }

    /// True when the head is dropped, either directly or because its whole
    /// sub-layer is skipped.
    pub fn is_head_dropped(&self, id: HeadId) -> bool {
        self.skipped.contains(&id.sublayer) || self.dropped_heads.contains(&id)
    }

    /// True for the identity configuration.
    pub fn is_identity(&self) -> bool {
        self.skipped.is_empty() && self.dropped_heads.is_empty()
    }

    /// Skipped sub-layers in execution order.
    pub fn skipped_sublayers(&self) -> impl Iterator<Item = &SublayerId> {
        self.skipped.iter()
    }

    /// Directly dropped heads (not counting those implied by skips).
    pub fn dropped_heads(&self) -> impl Iterator<Item = &HeadId> {
        self.dropped_heads.iter()
    }

    /// Checks that every referenced sub-layer and head exists in `config`.
    pub fn validate(&self, config: &MiniModelConfig) -> Result<()> {
        for id in &self.skipped {
            if id.layer >= config.n_layers {
                return Err(Error::Param(format!("mask references missing sub-layer {}", id)));
            }
        }
        for h in &self.dropped_heads {
            if h.sublayer.layer >= config.n_layers || h.head >= config.n_heads {
                return Err(Error::Param(format!("mask references missing head {}", h)));
            }
            if !h.sublayer.kind.is_attention() {
                return Err(Error::Param(format!("mask drops head of non-attention {}", h.sublayer)));
            }
        }
        Ok(())
    }
}

// ───────────────────────────────────────────────────────────────────────
// Activation sites, traces, patches
// ───────────────────────────────────────────────────────────────────────

/// The named activation points inside one sub-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    /// Residual stream entering the sub-layer (pre-norm).
    Input,
    /// The sub-layer's contribution (incl. out-proj bias), pre-residual-add.
    Output,
    /// Post-softmax attention weights.
    AttentionMap,
    /// Attention-weighted values, pre-output-projection.
    ValueTimesAttention,
    /// Query projections.
    Query,
    /// Key projections.
    Key,
    /// Value projections.
    Value,
}

impl SiteKind {
    fn label(self) -> &'static str {
        match self {
            SiteKind::Input => "input",
            SiteKind::Output => "output",
            SiteKind::AttentionMap => "map",
            SiteKind::ValueTimesAttention => "AV",
            SiteKind::Query => "query",
            SiteKind::Key => "key",
            SiteKind::Value => "value",
        }
    }
}

/// One addressable activation site: a sub-layer, a kind, and optionally a
/// single head (original index) for the attention-internal kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    /// Owning sub-layer.
    pub sublayer: SublayerId,
    /// Which activation of that sub-layer.
    pub kind: SiteKind,
    /// Restrict to one head (attention-internal kinds only); `None` means
    /// the full concatenation (or the stacked maps).
    pub head: Option<usize>,
}

impl Site {
    /// Full-width site of the given kind.
    pub fn new(sublayer: SublayerId, kind: SiteKind) -> Self {
        Site { sublayer, kind, head: None }
    }

    /// Site restricted to one head.
    pub fn for_head(sublayer: SublayerId, kind: SiteKind, head: usize) -> Self {
        Site { sublayer, kind, head: Some(head) }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.head {
            Some(h) => write!(f, "{}.H{}.{}", self.sublayer, h, self.kind.label()),
            None => write!(f, "{}.{}", self.sublayer, self.kind.label()),
        }
    }
}

/// Captured activations from one forward pass: requested sites plus the
/// final logits.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    sites: BTreeMap<Site, Tensor>,
    /// Final logits (always captured when any capture was requested).
    pub logits: Option<Tensor>,
}

impl ActivationTrace {
    /// The captured tensor for a site, if requested.
    pub fn get(&self, site: &Site) -> Option<&Tensor> {
        self.sites.get(site)
    }

    /// All captured sites in deterministic order.
    pub fn sites(&self) -> impl Iterator<Item = (&Site, &Tensor)> {
        self.sites.iter()
    }

    fn insert(&mut self, site: Site, value: Tensor) {
        self.sites.insert(site, value);
    }
}

/// Which sites to capture during a forward pass.
#[derive(Debug, Clone, Default)]
pub enum CaptureSet {
    /// Capture nothing (the default).
    #[default]
    None,
    /// Capture every existing full-width site of every present sub-layer
    /// (per-head variants are derivable from the full tensors).
    All,
    /// Capture exactly these sites.
    Sites(BTreeSet<Site>),
}

impl CaptureSet {
    /// Convenience constructor from a site list.
    pub fn of(sites: impl IntoIterator<Item = Site>) -> Self {
        CaptureSet::Sites(sites.into_iter().collect())
    }

    fn is_none(&self) -> bool {
        matches!(self, CaptureSet::None)
    }

    fn wants(&self, site: &Site) -> bool {
        match self {
            CaptureSet::None => false,
            CaptureSet::All => site.head.is_none(),
            CaptureSet::Sites(set) => set.contains(site),
        }
    }

    /// Sites explicitly requested (empty for None/All).
    fn explicit_sites(&self) -> Vec<Site> {
        match self {
            CaptureSet::Sites(set) => set.iter().copied().collect(),
            _ => Vec::new(),
        }
    }
}

/// Overwrites one site's computed activation with an explicit tensor before
/// downstream use. The tensor must match the site's full natural shape; an
/// optional position filter restricts the overwrite to those token rows
/// (other rows keep their computed values).
#[derive(Debug, Clone)]
pub struct SitePatch {
    /// Where to patch.
    pub site: Site,
    /// Token positions (rows) to overwrite; `None` = all rows.
    pub positions: Option<Vec<usize>>,
    /// Replacement activation, full site shape.
    pub value: Tensor,
}

impl SitePatch {
    /// Patch covering every position.
    pub fn full(site: Site, value: Tensor) -> Self {
        SitePatch { site, positions: None, value }
    }

    /// Patch restricted to the given token rows.
    pub fn at_positions(site: Site, positions: Vec<usize>, value: Tensor) -> Self {
        SitePatch { site, positions: Some(positions), value }
    }
}

// ───────────────────────────────────────────────────────────────────────
// Model structure
// ───────────────────────────────────────────────────────────────────────

/// Shape record of one attention sub-layer after (possible) head surgery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnShape {
    /// Width of one head (invariant under surgery).
    pub head_dim: usize,
    /// Original head indices retained, ascending. Slot `s` of the shrunken
    /// projections corresponds to original head `original_heads[s]`.
    pub original_heads: Vec<usize>,
}

impl AttnShape {
    fn full(n_heads: usize, head_dim: usize) -> Self {
        AttnShape { head_dim, original_heads: (0..n_heads).collect() }
    }

    /// Retained head count.
    pub fn n_heads(&self) -> usize {
        self.original_heads.len()
    }

    /// Total projection width (heads × head_dim).
    pub fn width(&self) -> usize {
        self.n_heads() * self.head_dim
    }

    /// Slot index of an original head, if retained.
    pub fn slot_of(&self, original_head: usize) -> Option<usize> {
        self.original_heads.iter().position(|&h| h == original_head)
    }
}

/// Which sub-layers of one decoder layer are physically present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    /// Self-attention, if not removed by surgery.
    pub self_attn: Option<AttnShape>,
    /// Cross-attention, if not removed by surgery.
    pub cross_attn: Option<AttnShape>,
    /// Feed-forward presence.
    pub feed_forward: bool,
}

impl LayerShape {
    fn full(config: &MiniModelConfig) -> Self {
        LayerShape {
            self_attn: Some(AttnShape::full(config.n_heads, config.head_dim())),
            cross_attn: Some(AttnShape::full(config.n_heads, config.head_dim())),
            feed_forward: true,
        }
    }

    /// The attention shape for an attention kind (`None` for feed-forward
    /// or surgically removed sub-layers).
    pub fn attn(&self, kind: SublayerKind) -> Option<&AttnShape> {
        match kind {
            SublayerKind::SelfAttn => self.self_attn.as_ref(),
            SublayerKind::CrossAttn => self.cross_attn.as_ref(),
            SublayerKind::FeedForward => None,
        }
    }

    /// True when the sub-layer of this kind is physically present.
    pub fn has(&self, kind: SublayerKind) -> bool {
        match kind {
            SublayerKind::SelfAttn => self.self_attn.is_some(),
            SublayerKind::CrossAttn => self.cross_attn.is_some(),
            SublayerKind::FeedForward => self.feed_forward,
        }
    }
}

/// The model: configuration, per-layer structure record, and parameters
/// keyed by canonical names (`decoder.L2.C.out_proj.weight` style).
#[derive(Debug, Clone)]
pub struct MiniModel {
    /// Original architecture (unchanged by surgery; `layers` records what
    /// actually remains).
    pub config: MiniModelConfig,
    /// Physical structure after any surgery.
    pub layers: Vec<LayerShape>,
    /// Initialization seed (recorded in checkpoints).
    pub seed: u64,
    params: BTreeMap<String, Tensor>,
}

/// Builds a freshly initialized model. Projection matrices draw from a
/// Xavier-style normal (σ = √(2/(fan_in+fan_out))), embeddings from
/// N(0, 1/√d_model), biases start at zero and norm gains at one. All draws
/// come from one seeded stream in sorted parameter-name order, so the same
/// (config, seed) pair is bit-identical across runs.
pub fn build_model(config: MiniModelConfig, seed: u64) -> Result<MiniModel> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let specs = parameter_specs(&config);
    let mut params = BTreeMap::new();
    for (name, spec) in &specs {
        let tensor = match *spec {
            ParamSpec::Matrix { rows, cols } => {
                let sigma = (2.0 / (rows + cols) as f64).sqrt();
                random_tensor(&mut rng, &[rows, cols], sigma)
            }
            ParamSpec::Embedding { rows, cols } => {
                let sigma = 1.0 / (config.d_model as f64).sqrt();
                random_tensor(&mut rng, &[rows, cols], sigma)
            }
            ParamSpec::Zeros { len } => Tensor::zeros(&[len]),
            ParamSpec::Ones { len } => Tensor::full(&[len], 1.0),
        };
        params.insert(name.clone(), tensor);
    }
    let layers = (0..config.n_layers).map(|_| LayerShape::full(&config)).collect();
    Ok(MiniModel { config, layers, seed, params })
}

enum ParamSpec {
    Matrix { rows: usize, cols: usize },
    Embedding { rows: usize, cols: usize },
    Zeros { len: usize },
    Ones { len: usize },
}

/// Canonical parameter list for a freshly built (un-surgered) model, in
/// sorted name order.
fn parameter_specs(config: &MiniModelConfig) -> Vec<(String, ParamSpec)> {
    let d = config.d_model;
    let mut specs: Vec<(String, ParamSpec)> = Vec::new();
    let mut push = |name: String, spec: ParamSpec| specs.push((name, spec));

    push("encoder.glyph_embed.weight".into(), ParamSpec::Embedding { rows: config.vocab_size, cols: d });
    push("encoder.row_embed.weight".into(), ParamSpec::Embedding { rows: config.grid_rows, cols: d });
    push("encoder.col_embed.weight".into(), ParamSpec::Embedding { rows: config.grid_cols, cols: d });
    if config.encoder_self_attention {
        push("encoder.attn.norm.gain".into(), ParamSpec::Ones { len: d });
        push("encoder.attn.norm.bias".into(), ParamSpec::Zeros { len: d });
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            push(format!("encoder.attn.{proj}.weight"), ParamSpec::Matrix { rows: d, cols: d });
            push(format!("encoder.attn.{proj}.bias"), ParamSpec::Zeros { len: d });
        }
    }

    push("decoder.token_embed.weight".into(), ParamSpec::Embedding { rows: config.vocab_size, cols: d });
    push("decoder.pos_embed.weight".into(), ParamSpec::Embedding { rows: config.max_prompt, cols: d });
    if !config.tie_unembedding {
        push("decoder.unembed.weight".into(), ParamSpec::Matrix { rows: d, cols: config.vocab_size });
    }

    for l in 0..config.n_layers {
        for kind in ['S', 'C'] {
            push(format!("decoder.L{l}.{kind}.norm.gain"), ParamSpec::Ones { len: d });
            push(format!("decoder.L{l}.{kind}.norm.bias"), ParamSpec::Zeros { len: d });
            for proj in ["q_proj", "k_proj", "v_proj"] {
                push(format!("decoder.L{l}.{kind}.{proj}.weight"), ParamSpec::Matrix { rows: d, cols: d });
                push(format!("decoder.L{l}.{kind}.{proj}.bias"), ParamSpec::Zeros { len: d });
            }
            push(format!("decoder.L{l}.{kind}.out_proj.weight"), ParamSpec::Matrix { rows: d, cols: d });
            push(format!("decoder.L{l}.{kind}.out_proj.bias"), ParamSpec::Zeros { len: d });
        }
        push(format!("decoder.L{l}.M.norm.gain"), ParamSpec::Ones { len: d });
        push(format!("decoder.L{l}.M.norm.bias"), ParamSpec::Zeros { len: d });
        push(format!("decoder.L{l}.M.w1.weight"), ParamSpec::Matrix { rows: d, cols: config.d_ff });
        push(format!("decoder.L{l}.M.w1.bias"), ParamSpec::Zeros { len: config.d_ff });
        push(format!("decoder.L{l}.M.w2.weight"), ParamSpec::Matrix { rows: config.d_ff, cols: d });
        push(format!("decoder.L{l}.M.w2.bias"), ParamSpec::Zeros { len: d });
    }

    specs.sort_by(|a, b| a.0.cmp(&b.0));
    specs
}

/// Standard-normal draws via Box–Muller, scaled by sigma.
fn random_tensor(rng: &mut ChaCha20Rng, shape: &[usize], sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * sigma);
        if data.len() < n {
            data.push(r * theta.sin() * sigma);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape/data length agree by construction")
}

impl MiniModel {
    /// Parameter tensor by canonical name.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Mutable parameter tensor by canonical name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Replaces a parameter tensor (shape must match the existing one).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::Shape {
                        op: "set_param",
                        detail: format!("{}: {:?} vs {:?}", name, slot.shape(), value.shape()),
                    });
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::Param(format!("unknown parameter {:?}", name))),
        }
    }

    /// All parameter names in sorted order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// All (name, tensor) pairs in sorted order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Used by surgery to build shrunken models.
    pub(crate) fn replace_structure(
        &mut self,
        layers: Vec<LayerShape>,
        params: BTreeMap<String, Tensor>,
    ) {
        self.layers = layers;
        self.params = params;
    }

    /// Total parameter element count.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Element count over decoder sub-layer parameters only (excludes
    /// embeddings and the encoder) — the quantity prune budgets refer to.
    pub fn decoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with("decoder.L"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Names of the parameters a distillation run may update: decoder
    /// sub-layer weights only (embeddings and encoder stay frozen).
    pub fn decoder_trainable_names(&self) -> BTreeSet<String> {
        self.params
            .keys()
            .filter(|name| name.starts_with("decoder.L"))
            .cloned()
            .collect()
    }

    /// Names of every parameter (teacher training updates all of them).
    pub fn all_param_names(&self) -> BTreeSet<String> {
        self.params.keys().cloned().collect()
    }

    /// The unembedding matrix (d_model × vocab): the transpose of the token
    /// embedding when tied, otherwise its own parameter.
    pub fn unembedding_matrix(&self) -> Result<Tensor> {
        if self.config.tie_unembedding {
            self.params
                .get("decoder.token_embed.weight")
                .ok_or_else(|| Error::Contract("token embedding missing".into()))?
                .transposed()
        } else {
            Ok(self
                .params
                .get("decoder.unembed.weight")
                .ok_or_else(|| Error::Contract("unembedding missing".into()))?
                .clone())
        }
    }

    /// Structure record lookup: is a sub-layer physically present?
    pub fn has_sublayer(&self, id: SublayerId) -> bool {
        self.layers.get(id.layer).is_some_and(|l| l.has(id.kind))
    }

    /// Sub-layers physically present, in execution order.
    pub fn present_sublayers(&self) -> Vec<SublayerId> {
        SublayerId::all(self.layers.len())
            .into_iter()
            .filter(|id| self.has_sublayer(*id))
            .collect()
    }

    /// Attention heads physically present (original indices), in order.
    pub fn present_heads(&self) -> Vec<HeadId> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for kind in [SublayerKind::SelfAttn, SublayerKind::CrossAttn] {
                if let Some(attn) = layer.attn(kind) {
                    let sub = SublayerId::new(kind, l);
                    for &h in &attn.original_heads {
                        out.push(HeadId { sublayer: sub, head: h });
                    }
                }
            }
        }
        out
    }

    // ───────────────────────────────────────────────────────────────────
    // Encoding
    // ───────────────────────────────────────────────────────────────────

    /// Encodes a document grid into one embedding per cell (n_patches ×
    /// d_model): glyph embedding + row embedding + column embedding,
    /// optionally contextualized by a single row-local self-attention
    /// layer. Deterministic; value-level (no tape).
    pub fn encode(&self, grid: &TokenGrid) -> Result<Tensor> {
        let mut g = Graph::new();
        let var = self.encode_on_graph(&mut g, grid, None)?;
        Ok(g.value(var).clone())
    }

    /// Encoder forward on an existing graph. `trainable` binds the listed
    /// parameters as gradient leaves (used by teacher training).
    pub(crate) fn encode_on_graph(
        &self,
        g: &mut Graph,
        grid: &TokenGrid,
        trainable: Option<&BTreeSet<String>>,
    ) -> Result<Var> {
        if grid.rows() != self.config.grid_rows || grid.cols() != self.config.grid_cols {
            return Err(Error::Shape {
                op: "encode",
                detail: format!(
                    "grid {}×{} does not match configured {}×{}",
                    grid.rows(),
                    grid.cols(),
                    self.config.grid_rows,
                    self.config.grid_cols
                ),
            });
        }
        for &cell in grid.cells() {
            if cell as usize >= self.config.vocab_size {
                return Err(Error::Param(format!(
                    "grid token {} outside vocabulary of {}",
                    cell, self.config.vocab_size
                )));
            }
        }
        let mut binder = Binder { model: self, trainable, vars: BTreeMap::new() };

        let glyph = binder.bind(g, "encoder.glyph_embed.weight")?;
        let rowe = binder.bind(g, "encoder.row_embed.weight")?;
        let cole = binder.bind(g, "encoder.col_embed.weight")?;

        let cell_ids: Vec<usize> = grid.cells().iter().map(|&c| c as usize).collect();
        let row_ids: Vec<usize> = (0..grid.rows()).flat_map(|r| std::iter::repeat(r).take(grid.cols())).collect();
        let col_ids: Vec<usize> = (0..grid.rows()).flat_map(|_| 0..grid.cols()).collect();

        let e_glyph = g.gather_rows(glyph, &cell_ids)?;
        let e_row = g.gather_rows(rowe, &row_ids)?;
        let e_col = g.gather_rows(cole, &col_ids)?;
        let glyph_plus_row = g.add(e_glyph, e_row)?;
        let mut memory = g.add(glyph_plus_row, e_col)?;

        if self.config.encoder_self_attention {
            // One pre-norm residual self-attention block in which cells only
            // attend within their own grid row. The row-locality is computed
            // block-by-block rather than with an additive mask, so each row
            // runs an exact cols×cols softmax.
            let gain = binder.bind(g, "encoder.attn.norm.gain")?;
            let bias = binder.bind(g, "encoder.attn.norm.bias")?;
            let normed = g.layer_norm(memory, gain, bias)?;

            let heads = self.config.n_heads;
            let hd = self.config.head_dim();
            let q = self.projection(g, &mut binder, "encoder.attn.q_proj", normed)?;
            let k = self.projection(g, &mut binder, "encoder.attn.k_proj", normed)?;
            let v = self.projection(g, &mut binder, "encoder.attn.v_proj", normed)?;

            let mut row_outputs = Vec::with_capacity(grid.rows());
            for r in 0..grid.rows() {
                let span: Vec<usize> = (r * grid.cols()..(r + 1) * grid.cols()).collect();
                let qr = g.gather_rows(q, &span)?;
                let kr = g.gather_rows(k, &span)?;
                let vr = g.gather_rows(v, &span)?;
                let mut av_parts = Vec::with_capacity(heads);
                for s in 0..heads {
                    let qs = g.slice_cols(qr, s * hd, (s + 1) * hd)?;
                    let ks = g.slice_cols(kr, s * hd, (s + 1) * hd)?;
                    let vs = g.slice_cols(vr, s * hd, (s + 1) * hd)?;
                    let kt = g.transpose(ks)?;
                    let scores = g.matmul(qs, kt)?;
                    let scaled = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
                    let map = g.softmax(scaled)?;
                    av_parts.push(g.matmul(map, vs)?);
                }
                row_outputs.push(g.concat_cols(&av_parts)?);
            }
            let av = g.concat_rows(&row_outputs)?;
            let contribution = self.projection(g, &mut binder, "encoder.attn.out_proj", av)?;
            memory = g.add(memory, contribution)?;
        }
        Ok(memory)
    }

    /// x·W + b for a named linear layer.
    fn projection(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let w = binder.bind(g, &format!("{prefix}.weight"))?;
        let b = binder.bind(g, &format!("{prefix}.bias"))?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    // ───────────────────────────────────────────────────────────────────
    // Decoding
    // ───────────────────────────────────────────────────────────────────

    /// Teacher-forced decode: one forward pass over the whole token
    /// sequence with causal self-attention, returning next-token logits at
    /// every position plus any requested activation captures.
    pub fn decode_teacher_forced(
        &self,
        memory: &Tensor,
        tokens: &[u32],
        masks: &MaskSet,
        capture: &CaptureSet,
    ) -> Result<(Tensor, ActivationTrace)> {
        let pass = self.forward_pass(
            EncoderInput::Memory(memory),
            tokens,
            &ForwardOpts { masks, patches: &[], capture, trainable: None },
        )?;
        let logits = pass.graph.value(pass.logits).clone();
        Ok((logits, pass.trace))
    }

    /// Teacher-forced decode with activation patches applied at their sites
    /// before downstream use. Everything else matches
    /// [`MiniModel::decode_teacher_forced`]. Patched runs are value-only.
    pub fn decode_with_patch(
        &self,
        memory: &Tensor,
        tokens: &[u32],
        masks: &MaskSet,
        patches: &[SitePatch],
    ) -> Result<Tensor> {
        let pass = self.forward_pass(
            EncoderInput::Memory(memory),
            tokens,
            &ForwardOpts { masks, patches, capture: &CaptureSet::None, trainable: None },
        )?;
        Ok(pass.graph.value(pass.logits).clone())
    }

    /// Greedy autoregressive decoding: appends argmax tokens until the
    /// end-of-sequence token or `max_new` tokens. The prompt must end with
    /// the answer-start token. Returns only the newly generated tokens
    /// (end-of-sequence excluded).
    pub fn generate(
        &self,
        memory: &Tensor,
        prompt: &[u32],
        max_new: usize,
        masks: &MaskSet,
    ) -> Result<Vec<u32>> {
        if prompt.last() != Some(&ANSWER_START_TOKEN) {
            return Err(Error::Param(
                "generation prompt must end with the answer-start token".into(),
            ));
        }
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && tokens.len() < self.config.max_prompt {
            let (logits, _) =
                self.decode_teacher_forced(memory, &tokens, masks, &CaptureSet::None)?;
            let next = logits.argmax_rows()[tokens.len() - 1] as u32;
            if next == EOS_TOKEN {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }

    /// Decodes an activation through the unembedding: softmax(x · Wᵤ).
    /// Accepts any tensor whose last dimension is d_model; returns one
    /// probability row per input row.
    pub fn logit_lens(&self, activation: &Tensor) -> Result<Tensor> {
        let shape = activation.shape();
        if shape.last() != Some(&self.config.d_model) {
            return Err(Error::Shape {
                op: "logit_lens",
                detail: format!(
                    "activation {:?} does not end in d_model {}",
                    shape, self.config.d_model
                ),
            });
        }
        let rows: usize = activation.numel() / self.config.d_model;
        let flat = activation.reshaped(&[rows, self.config.d_model])?;
        let logits = flat.matmul(&self.unembedding_matrix()?)?;
        Ok(softmax_rows(&logits))
    }

    /// Per-patch token distribution read through one cross-attention head:
    /// each patch encoding is passed through the head's value projection,
    /// the head's slice of the output projection (bias omitted so heads
    /// are comparable), and the unembedding.
    pub fn head_lens(&self, head: HeadId, patch_enc: &Tensor) -> Result<Tensor> {
        let projected = self.head_value_contribution(head, patch_enc)?;
        let logits = projected.matmul(&self.unembedding_matrix()?)?;
        Ok(softmax_rows(&logits))
    }

    /// What one cross-attention head would write into the residual stream
    /// for each input row, ignoring attention weights: rows pass through
    /// the head's value-projection slice (with bias) and its slice of the
    /// output projection (bias omitted so heads sum cleanly). Summing over
    /// all heads reproduces the attention value path up to the out-proj
    /// bias.
    pub fn head_value_contribution(&self, head: HeadId, rows: &Tensor) -> Result<Tensor> {
        if head.sublayer.kind != SublayerKind::CrossAttn {
            return Err(Error::Param(format!(
                "head projections require a cross-attention head, got {}",
                head
            )));
        }
        let layer = self
            .layers
            .get(head.sublayer.layer)
            .ok_or_else(|| Error::Param(format!("missing layer {}", head.sublayer.layer)))?;
        let attn = layer
            .cross_attn
            .as_ref()
            .ok_or_else(|| Error::Param(format!("{} was removed by surgery", head.sublayer)))?;
        let slot = attn
            .slot_of(head.head)
            .ok_or_else(|| Error::Param(format!("head {} was removed by surgery", head)))?;
        let hd = attn.head_dim;
        let prefix = format!("decoder.L{}.C", head.sublayer.layer);

        let wv = self.require_param(&format!("{prefix}.v_proj.weight"))?;
        let bv = self.require_param(&format!("{prefix}.v_proj.bias"))?;
        let wo = self.require_param(&format!("{prefix}.out_proj.weight"))?;

        // Head slice of the value projection: columns [slot·hd, (slot+1)·hd).
        let d = self.config.d_model;
        let mut wv_h = Tensor::zeros(&[d, hd]);
        for i in 0..d {
            for j in 0..hd {
                wv_h.data_mut()[i * hd + j] = wv.at2(i, slot * hd + j);
            }
        }
        let mut bv_h = Tensor::zeros(&[1, hd]);
        for j in 0..hd {
            bv_h.data_mut()[j] = bv.data()[slot * hd + j];
        }
        // Head slice of the output projection: rows [slot·hd, (slot+1)·hd).
        let mut wo_h = Tensor::zeros(&[hd, d]);
        for i in 0..hd {
            wo_h.data_mut()[i * d..(i + 1) * d].copy_from_slice(wo.row(slot * hd + i));
        }

        let n = rows.rows();
        let mut v = rows.matmul(&wv_h)?;
        for i in 0..n {
            for j in 0..hd {
                v.data_mut()[i * hd + j] += bv_h.data()[j];
            }
        }
        v.matmul(&wo_h)
    }

    fn require_param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {:?}", name)))
    }

    // ───────────────────────────────────────────────────────────────────
    // Forward machinery
    // ───────────────────────────────────────────────────────────────────

    /// Full forward pass with masks, patches, captures, and optional
    /// gradient binding. This is the single code path behind every public
    /// decode entry point and the trainers.
    pub(crate) fn forward_pass(
        &self,
        input: EncoderInput<'_>,
        tokens: &[u32],
        opts: &ForwardOpts<'_>,
    ) -> Result<ForwardPass> {
        if tokens.is_empty() {
            return Err(Error::Param("decode requires at least one token".into()));
        }
        if tokens.len() > self.config.max_prompt {
            return Err(Error::Length(format!(
                "sequence of {} tokens exceeds max_prompt {}",
                tokens.len(),
                self.config.max_prompt
            )));
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Param(format!(
                    "token {} outside vocabulary of {}",
                    t, self.config.vocab_size
                )));
            }
        }
        opts.masks.validate(&self.config)?;
        if !opts.patches.is_empty() && opts.trainable.is_some() {
            return Err(Error::Contract(
                "patched runs are value-only; gradients cannot flow through patches".into(),
            ));
        }
        self.validate_sites(tokens.len(), opts)?;

        let mut g = Graph::new();
        let mut binder = Binder { model: self, trainable: opts.trainable, vars: BTreeMap::new() };
        let mut trace = ActivationTrace::default();
        let plan = PatchPlan::group(opts.patches);

        let memory = match input {
            EncoderInput::Memory(m) => {
                if m.shape() != [self.config.n_patches(), self.config.d_model] {
                    return Err(Error::Shape {
                        op: "decode",
                        detail: format!(
                            "memory {:?}, expected [{}, {}]",
                            m.shape(),
                            self.config.n_patches(),
                            self.config.d_model
                        ),
                    });
                }
                g.constant(m.clone())
            }
            EncoderInput::Grid(grid) => self.encode_on_graph(&mut g, grid, opts.trainable)?,
        };

        let t_len = tokens.len();
        let token_embed = binder.bind(&mut g, "decoder.token_embed.weight")?;
        let pos_embed = binder.bind(&mut g, "decoder.pos_embed.weight")?;
        let tok_ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos_ids: Vec<usize> = (0..t_len).collect();
        let e_tok = g.gather_rows(token_embed, &tok_ids)?;
        let e_pos = g.gather_rows(pos_embed, &pos_ids)?;
        let mut stream = g.add(e_tok, e_pos)?;

        let causal = g.constant(causal_mask(t_len));

        for (l, layer) in self.layers.iter().enumerate() {
            for kind in [SublayerKind::SelfAttn, SublayerKind::CrossAttn, SublayerKind::FeedForward] {
                if !layer.has(kind) {
                    continue;
                }
                let id = SublayerId::new(kind, l);

                // Input site: the residual stream at entry. A patch here
                // replaces the stream itself.
                stream = self.apply_site(&mut g, &plan, opts, &mut trace, Site::new(id, SiteKind::Input), stream)?;

                if opts.masks.is_skipped(id) {
                    // Contribution is exactly zero; the stream passes through.
                    let out_site = Site::new(id, SiteKind::Output);
                    if opts.capture.wants(&out_site) {
                        let shape = g.value(stream).shape().to_vec();
                        trace.insert(out_site, Tensor::zeros(&shape));
                    }
                    continue;
                }

                let contribution = match kind {
                    SublayerKind::FeedForward => self.feed_forward(&mut g, &mut binder, l, stream)?,
                    _ => self.attention(
                        &mut g,
                        &mut binder,
                        &plan,
                        opts,
                        &mut trace,
                        id,
                        layer.attn(kind).expect("present by has()"),
                        stream,
                        memory,
                        causal,
                    )?,
                };
                let contribution = self.apply_site(
                    &mut g,
                    &plan,
                    opts,
                    &mut trace,
                    Site::new(id, SiteKind::Output),
                    contribution,
                )?;
                stream = g.add(stream, contribution)?;
            }
        }

        let unembed = if self.config.tie_unembedding {
            let te = binder.bind(&mut g, "decoder.token_embed.weight")?;
            g.transpose(te)?
        } else {
            binder.bind(&mut g, "decoder.unembed.weight")?
        };
        let logits = g.matmul(stream, unembed)?;
        if !opts.capture.is_none() {
            trace.logits = Some(g.value(logits).clone());
        }

        Ok(ForwardPass { param_vars: binder.vars, graph: g, logits, trace })
    }

    /// Pre-norm feed-forward contribution: W₂·gelu(W₁·LN(x)+b₁)+b₂.
    fn feed_forward(&self, g: &mut Graph, binder: &mut Binder<'_>, l: usize, stream: Var) -> Result<Var> {
        let prefix = format!("decoder.L{l}.M");
        let gain = binder.bind(g, &format!("{prefix}.norm.gain"))?;
        let bias = binder.bind(g, &format!("{prefix}.norm.bias"))?;
        let normed = g.layer_norm(stream, gain, bias)?;
        let hidden = self.projection(g, binder, &format!("{prefix}.w1"), normed)?;
        let act = g.gelu(hidden)?;
        self.projection(g, binder, &format!("{prefix}.w2"), act)
    }

    /// Pre-norm attention contribution (self or cross), with per-head site
    /// capture/patching and head-drop masking.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        plan: &PatchPlan<'_>,
        opts: &ForwardOpts<'_>,
        trace: &mut ActivationTrace,
        id: SublayerId,
        attn: &AttnShape,
        stream: Var,
        memory: Var,
        causal: Var,
    ) -> Result<Var> {
        let prefix = format!("decoder.L{}.{}", id.layer, id.kind.letter());
        let gain = binder.bind(g, &format!("{prefix}.norm.gain"))?;
        let bias = binder.bind(g, &format!("{prefix}.norm.bias"))?;
        let normed = g.layer_norm(stream, gain, bias)?;
        let kv_src = match id.kind {
            SublayerKind::SelfAttn => normed,
            SublayerKind::CrossAttn => memory,
            SublayerKind::FeedForward => unreachable!("attention() called for feed-forward"),
        };

        let q = self.projection(g, binder, &format!("{prefix}.q_proj"), normed)?;
        let k = self.projection(g, binder, &format!("{prefix}.k_proj"), kv_src)?;
        let v = self.projection(g, binder, &format!("{prefix}.v_proj"), kv_src)?;

        let q = self.apply_qkv_site(g, plan, opts, trace, id, attn, SiteKind::Query, q)?;
        let k = self.apply_qkv_site(g, plan, opts, trace, id, attn, SiteKind::Key, k)?;
        let v = self.apply_qkv_site(g, plan, opts, trace, id, attn, SiteKind::Value, v)?;

        let hd = attn.head_dim;
        let mut maps: Vec<Var> = Vec::with_capacity(attn.n_heads());
        for slot in 0..attn.n_heads() {
            let orig = attn.original_heads[slot];
            let qs = g.slice_cols(q, slot * hd, (slot + 1) * hd)?;
            let ks = g.slice_cols(k, slot * hd, (slot + 1) * hd)?;
            let kt = g.transpose(ks)?;
            let scores = g.matmul(qs, kt)?;
            let scaled = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let masked = match id.kind {
                SublayerKind::SelfAttn => g.add(scaled, causal)?,
                _ => scaled,
            };
            let mut map = g.softmax(masked)?;
            map = self.apply_per_head(g, plan, opts, trace, id, SiteKind::AttentionMap, orig, map)?;
            maps.push(map);
        }

        // Full attention-map site: the per-head maps stacked (heads, T, S).
        let map_site = Site::new(id, SiteKind::AttentionMap);
        if plan.has(&map_site) {
            let stacked: Vec<Tensor> = maps.iter().map(|&m| g.value(m).clone()).collect();
            let current = Tensor::stack(&stacked)?;
            let patched = plan.apply_3d(&map_site, &current)?;
            for (slot, new_map) in maps.iter_mut().enumerate() {
                *new_map = g.constant(patched.unstack(slot)?);
            }
        }
        if opts.capture.wants(&map_site) {
            let stacked: Vec<Tensor> = maps.iter().map(|&m| g.value(m).clone()).collect();
            trace.insert(map_site, Tensor::stack(&stacked)?);
        }

        let mut av_parts: Vec<Var> = Vec::with_capacity(attn.n_heads());
        for slot in 0..attn.n_heads() {
            let orig = attn.original_heads[slot];
            let vs = g.slice_cols(v, slot * hd, (slot + 1) * hd)?;
            let mut av = g.matmul(maps[slot], vs)?;
            if opts.masks.is_head_dropped(HeadId { sublayer: id, head: orig }) {
                // Dropping a head = zeroing its value-times-attention slice.
                let shape = g.value(av).shape().to_vec();
                av = g.constant(Tensor::zeros(&shape));
            }
            av = self.apply_per_head(g, plan, opts, trace, id, SiteKind::ValueTimesAttention, orig, av)?;
            av_parts.push(av);
        }
        let av = g.concat_cols(&av_parts)?;
        let av = self.apply_site(g, plan, opts, trace, Site::new(id, SiteKind::ValueTimesAttention), av)?;

        self.projection(g, binder, &format!("{prefix}.out_proj"), av)
    }

    /// Patch-then-capture for a full-width site.
    fn apply_site(
        &self,
        g: &mut Graph,
        plan: &PatchPlan<'_>,
        opts: &ForwardOpts<'_>,
        trace: &mut ActivationTrace,
        site: Site,
        var: Var,
    ) -> Result<Var> {
        let var = match plan.get(&site) {
            Some(_) => {
                let patched = plan.apply_2d(&site, g.value(var))?;
                g.constant(patched)
            }
            None => var,
        };
        if opts.capture.wants(&site) {
            trace.insert(site, g.value(var).clone());
        }
        Ok(var)
    }

    /// Patch-then-capture for a query/key/value site, honoring both
    /// full-width and per-head patches (per-head addressed by original
    /// index, applied onto the concatenated projection).
    fn apply_qkv_site(
        &self,
        g: &mut Graph,
        plan: &PatchPlan<'_>,
        opts: &ForwardOpts<'_>,
        trace: &mut ActivationTrace,
        id: SublayerId,
        attn: &AttnShape,
        kind: SiteKind,
        var: Var,
    ) -> Result<Var> {
        let full_site = Site::new(id, kind);
        let mut value: Option<Tensor> = None;
        if plan.has(&full_site) {
            value = Some(plan.apply_2d(&full_site, g.value(var))?);
        }
        for slot in 0..attn.n_heads() {
            let orig = attn.original_heads[slot];
            let head_site = Site::for_head(id, kind, orig);
            if plan.has(&head_site) {
                let base = value.take().unwrap_or_else(|| g.value(var).clone());
                value = Some(plan.apply_head_slice(&head_site, &base, slot, attn.head_dim)?);
            }
        }
        let var = match value {
            Some(patched) => g.constant(patched),
            None => var,
        };
        if opts.capture.wants(&full_site) {
            trace.insert(full_site, g.value(var).clone());
        }
        // Per-head capture slices out of the concatenated tensor.
        for slot in 0..attn.n_heads() {
            let orig = attn.original_heads[slot];
            let head_site = Site::for_head(id, kind, orig);
            if opts.capture.wants(&head_site) {
                let hd = attn.head_dim;
                let full = g.value(var);
                let rows = full.rows();
                let mut out = Tensor::zeros(&[rows, hd]);
                for i in 0..rows {
                    out.row_mut(i).copy_from_slice(&full.row(i)[slot * hd..(slot + 1) * hd]);
                }
                trace.insert(head_site, out);
            }
        }
        Ok(var)
    }

    /// Patch-then-capture for one head's 2-D site (map or AV slice).
    #[allow(clippy::too_many_arguments)]
    fn apply_per_head(
        &self,
        g: &mut Graph,
        plan: &PatchPlan<'_>,
        opts: &ForwardOpts<'_>,
        trace: &mut ActivationTrace,
        id: SublayerId,
        kind: SiteKind,
        original_head: usize,
        var: Var,
    ) -> Result<Var> {
        let site = Site::for_head(id, kind, original_head);
        let var = match plan.get(&site) {
            Some(_) => {
                let patched = plan.apply_2d(&site, g.value(var))?;
                g.constant(patched)
            }
            None => var,
        };
        if opts.capture.wants(&site) {
            trace.insert(site, g.value(var).clone());
        }
        Ok(var)
    }

    /// Validates every capture and patch site against the model structure
    /// and masks before the forward pass starts.
    fn validate_sites(&self, _t_len: usize, opts: &ForwardOpts<'_>) -> Result<()> {
        let check = |site: &Site, is_patch: bool| -> Result<()> {
            let fail = |detail: String| -> Error {
                if is_patch {
                    Error::Patch { site: site.to_string(), detail }
                } else {
                    Error::Param(format!("unknown capture site {}: {}", site, detail))
                }
            };
            let layer = self
                .layers
                .get(site.sublayer.layer)
                .ok_or_else(|| fail(format!("layer {} does not exist", site.sublayer.layer)))?;
            if !layer.has(site.sublayer.kind) {
                return Err(fail("sub-layer was removed by surgery".into()));
            }
            let internal = !matches!(site.kind, SiteKind::Input | SiteKind::Output);
            if site.sublayer.kind == SublayerKind::FeedForward && internal {
                return Err(fail("feed-forward sub-layers have no attention sites".into()));
            }
            if let Some(h) = site.head {
                if site.sublayer.kind == SublayerKind::FeedForward || !internal {
                    return Err(fail("per-head addressing only applies to attention-internal sites".into()));
                }
                let attn = layer.attn(site.sublayer.kind).expect("attention present");
                if attn.slot_of(h).is_none() {
                    return Err(fail(format!("head {} not present", h)));
                }
            }
            if internal && opts.masks.is_skipped(site.sublayer) {
                return Err(fail("sub-layer is skipped by the mask; its internals are not computed".into()));
            }
            Ok(())
        };
        for patch in opts.patches {
            check(&patch.site, true)?;
        }
        for site in opts.capture.explicit_sites() {
            check(&site, false)?;
        }
        Ok(())
    }
}

/// What the encoder side of a forward pass consumes.
pub(crate) enum EncoderInput<'a> {
    /// Precomputed patch encodings (analysis, distillation).
    Memory(&'a Tensor),
    /// Raw grid, encoded on-graph (teacher training).
    Grid(&'a TokenGrid),
}

/// Forward-pass options shared by all entry points.
pub(crate) struct ForwardOpts<'a> {
    pub masks: &'a MaskSet,
    pub patches: &'a [SitePatch],
    pub capture: &'a CaptureSet,
    /// Parameters to bind as gradient leaves; `None` = pure value run.
    pub trainable: Option<&'a BTreeSet<String>>,
}

/// A completed forward pass: the tape, the logits node, captured sites, and
/// the bound parameter vars (for optimizers).
pub(crate) struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    pub trace: ActivationTrace,
    pub param_vars: BTreeMap<String, Var>,
}

/// Binds model parameters onto a graph on first use, as gradient leaves for
/// names in the trainable set and constants otherwise.
struct Binder<'m> {
    model: &'m MiniModel,
    trainable: Option<&'m BTreeSet<String>>,
    vars: BTreeMap<String, Var>,
}

impl Binder<'_> {
    fn bind(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let tensor = self
            .model
            .param(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {:?}", name)))?
            .clone();
        let var = if self.trainable.is_some_and(|set| set.contains(name)) {
            g.param(tensor)
        } else {
            g.constant(tensor)
        };
        self.vars.insert(name.to_string(), var);
        Ok(var)
    }
}

/// Additive causal mask: 0 at or before the diagonal, −1e30 after. The
/// large negative collapses to exactly zero attention after the
/// max-stabilized softmax, which makes causality bit-exact.
fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            m.data_mut()[i * t + j] = -1e30;
        }
    }
    m
}

/// Patches grouped by site for O(1) lookup during the forward pass.
struct PatchPlan<'a> {
    by_site: BTreeMap<Site, &'a SitePatch>,
}

impl<'a> PatchPlan<'a> {
    fn group(patches: &'a [SitePatch]) -> Self {
        let mut by_site = BTreeMap::new();
        for p in patches {
            by_site.insert(p.site, p);
        }
        PatchPlan { by_site }
    }

    fn has(&self, site: &Site) -> bool {
        self.by_site.contains_key(site)
    }

    fn get(&self, site: &Site) -> Option<&'a SitePatch> {
        self.by_site.get(site).copied()
    }

    /// Applies a 2-D patch: full replacement, or row splice under a
    /// position filter.
    fn apply_2d(&self, site: &Site, current: &Tensor) -> Result<Tensor> {
        let patch = self.get(site).expect("checked by caller");
        if patch.value.shape() != current.shape() {
            return Err(Error::Patch {
                site: site.to_string(),
                detail: format!(
                    "patch shape {:?} does not match site shape {:?}",
                    patch.value.shape(),
                    current.shape()
                ),
            });
        }
        match &patch.positions {
            None => Ok(patch.value.clone()),
            Some(rows) => {
                let mut out = current.clone();
                for &r in rows {
                    if r >= current.shape()[0] {
                        return Err(Error::Patch {
                            site: site.to_string(),
                            detail: format!("position {} out of range for {} rows", r, current.shape()[0]),
                        });
                    }
                    out.row_mut(r).copy_from_slice(patch.value.row(r));
                }
                Ok(out)
            }
        }
    }

    /// Applies a stacked (heads, T, S) attention-map patch.
    fn apply_3d(&self, site: &Site, current: &Tensor) -> Result<Tensor> {
        let patch = self.get(site).expect("checked by caller");
        if patch.value.shape() != current.shape() {
            return Err(Error::Patch {
                site: site.to_string(),
                detail: format!(
                    "patch shape {:?} does not match site shape {:?}",
                    patch.value.shape(),
                    current.shape()
                ),
            });
        }
        match &patch.positions {
            None => Ok(patch.value.clone()),
            Some(rows) => {
                let heads = current.shape()[0];
                let mut slices = Vec::with_capacity(heads);
                for h in 0..heads {
                    let mut cur = current.unstack(h)?;
                    let new = patch.value.unstack(h)?;
                    for &r in rows {
                        if r >= cur.shape()[0] {
                            return Err(Error::Patch {
                                site: site.to_string(),
                                detail: format!("position {} out of range", r),
                            });
                        }
                        cur.row_mut(r).copy_from_slice(new.row(r));
                    }
                    slices.push(cur);
                }
                Tensor::stack(&slices)
            }
        }
    }

    /// Applies a per-head patch onto one head slice of a concatenated
    /// (rows, heads·hd) projection. The patch tensor has the slice's own
    /// shape (rows, hd).
    fn apply_head_slice(&self, site: &Site, full: &Tensor, slot: usize, hd: usize) -> Result<Tensor> {
        let patch = self.get(site).expect("checked by caller");
        let rows = full.rows();
        if patch.value.shape() != [rows, hd] {
            return Err(Error::Patch {
                site: site.to_string(),
                detail: format!(
                    "patch shape {:?} does not match head slice [{}, {}]",
                    patch.value.shape(),
                    rows,
                    hd
                ),
            });
        }
        let mut out = full.clone();
        let all_rows: Vec<usize>;
        let rows_to_patch: &[usize] = match &patch.positions {
            None => {
                all_rows = (0..rows).collect();
                &all_rows
            }
            Some(r) => r,
        };
        for &r in rows_to_patch {
            if r >= rows {
                return Err(Error::Patch {
                    site: site.to_string(),
                    detail: format!("position {} out of range for {} rows", r, rows),
                });
            }
            out.row_mut(r)[slot * hd..(slot + 1) * hd].copy_from_slice(patch.value.row(r));
        }
        Ok(out)
    }
}

// ───────────────────────────────────────────────────────────────────────
// Checkpoints
// ───────────────────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 8] = b"GVQACKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: MiniModelConfig,
    seed: u64,
    layers: Vec<LayerShape>,
    masks: MaskSet,
    /// Prune recipe the model was produced by, when it was. Absent for
    /// unpruned models, keeping their byte layout unchanged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recipe: Option<crate::compress::PruneRecipe>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes a self-describing binary checkpoint: magic, format version,
/// JSON header (config, seed, structure record, masks, tensor index), then
/// raw little-endian f64 data in header order. Byte-identical for identical
/// models.
pub fn save_model(path: &Path, model: &MiniModel, masks: &MaskSet) -> Result<()> {
    save_checkpoint(path, model, masks, None)
}

/// [`save_model`] with provenance: records the prune recipe the model came
/// from inside the checkpoint header.
pub fn save_checkpoint(
    path: &Path,
    model: &MiniModel,
    masks: &MaskSet,
    recipe: Option<&crate::compress::PruneRecipe>,
) -> Result<()> {
    let tensors: Vec<TensorEntry> = model
        .params()
        .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
        .collect();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        seed: model.seed,
        layers: model.layers.clone(),
        masks: masks.clone(),
        recipe: recipe.cloned(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, tensor) in model.params() {
        for &v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(MiniModel, MaskSet)> {
    let (model, masks, _) = load_checkpoint(path)?;
    Ok((model, masks))
}

/// Reads a checkpoint including its recorded prune recipe, if any.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(MiniModel, MaskSet, Option<crate::compress::PruneRecipe>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}; not a model checkpoint",
            magic
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header parse failed: {e}")))?;

    let mut params = BTreeMap::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for slot in data.iter_mut() {
            file.read_exact(&mut buf)?;
            *slot = f64::from_le_bytes(buf);
        }
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let model = MiniModel {
        config: header.config,
        layers: header.layers,
        seed: header.seed,
        params,
    };
    Ok((model, header.masks, header.recipe))
}

//! Synthetic document generator.
//!
//! Documents are dense glyph grids — one text line per grid row — paired
//! with span-copy questions in four task regimes:
//!
//! * **transcription** — "line r": read back the full content of row `r`;
//! * **keyword** — name a field *kind* ("date", "num", "code") and copy the
//!   unique field of that kind, recognizable by its micro-grammar;
//! * **keyvalue** — name a visible key ("k3") and copy the value printed
//!   after it on the same line;
//! * **casing** — a keyword question spelled in uppercase via shift
//!   markers; the answer stays lowercase.
//!
//! Field micro-grammars: `date` = digit digit `-` digit digit (`03-12`),
//! `num` = three digits (`481`), `code` = uppercase letter + two digits
//! (`K47`). Every field sits on its own grid row, so grammars can never
//! merge across fields. Key-value lines render as `k3: v5` from column 0
//! (key at columns 0–1, value from column 4), which makes "value for key"
//! questions answerable from same-line context.
//!
//! Key-value documents support controlled corruption: the values are
//! cyclically permuted across slots (every value moves; for two pairs this
//! is exactly a swap) while keys and positions stay fixed — the
//! clean/corrupt contrast that activation-patching experiments consume.
//!
//! All generation is a pure function of (spec, seed).

use std::collections::BTreeMap;
use std::io::{BufRead, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    TokenGrid, ANSWER_START_TOKEN, EOS_TOKEN, FIRST_GLYPH_TOKEN, QUESTION_START_TOKEN, SHIFT_TOKEN,
};

// ───────────────────────────────────────────────────────────────────────
// Glyph tokenizer
// ───────────────────────────────────────────────────────────────────────

const LOWER_BASE: u32 = FIRST_GLYPH_TOKEN; // 'a'..='z' → 5..=30
const UPPER_BASE: u32 = LOWER_BASE + 26; // 'A'..='Z' → 31..=56
const DIGIT_BASE: u32 = UPPER_BASE + 26; // '0'..='9' → 57..=66
/// Token id of `:`.
pub const COLON_TOKEN: u32 = DIGIT_BASE + 10; // 67
/// Token id of the blank cell / space glyph.
pub const SPACE_TOKEN: u32 = COLON_TOKEN + 1; // 68
/// Token id of `-`.
pub const DASH_TOKEN: u32 = SPACE_TOKEN + 1; // 69
/// One past the last glyph id; the minimum vocabulary that fits this
/// alphabet.
pub const GLYPH_VOCAB_END: u32 = DASH_TOKEN + 1; // 70

/// Token id of one printable glyph, or an error for characters outside the
/// alphabet.
pub fn glyph_token(ch: char) -> Result<u32> {
    match ch {
        'a'..='z' => Ok(LOWER_BASE + (ch as u32 - 'a' as u32)),
        'A'..='Z' => Ok(UPPER_BASE + (ch as u32 - 'A' as u32)),
        '0'..='9' => Ok(DIGIT_BASE + (ch as u32 - '0' as u32)),
        ':' => Ok(COLON_TOKEN),
        ' ' => Ok(SPACE_TOKEN),
        '-' => Ok(DASH_TOKEN),
        _ => Err(Error::DataGen(format!("character {:?} outside the glyph alphabet", ch))),
    }
}

/// Encodes printable text one glyph per token (uppercase letters use their
/// dedicated glyph ids).
pub fn encode_text(text: &str) -> Result<Vec<u32>> {
    text.chars().map(glyph_token).collect()
}

/// Encodes text for uppercase-shift questions: each uppercase letter
/// becomes the shift marker followed by its lowercase glyph; everything
/// else encodes as usual.
pub fn encode_shifted(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(text.len());
    for ch in text.chars() {
        if ch.is_ascii_uppercase() {
            out.push(SHIFT_TOKEN);
            out.push(glyph_token(ch.to_ascii_lowercase())?);
        } else {
            out.push(glyph_token(ch)?);
        }
    }
    Ok(out)
}

/// Decodes glyph tokens back to text. A shift marker followed by a
/// lowercase glyph folds to the uppercase letter, so
/// `decode_tokens(encode_shifted(x)) == x`. Non-glyph tokens render as `?`.
pub fn decode_tokens(tokens: &[u32]) -> String {
    let mut out = String::with_capacity(tokens.len());
    let mut shift = false;
    for &t in tokens {
        if t == SHIFT_TOKEN {
            shift = true;
            continue;
        }
        let ch = match t {
            t if (LOWER_BASE..LOWER_BASE + 26).contains(&t) => (b'a' + (t - LOWER_BASE) as u8) as char,
            t if (UPPER_BASE..UPPER_BASE + 26).contains(&t) => (b'A' + (t - UPPER_BASE) as u8) as char,
            t if (DIGIT_BASE..DIGIT_BASE + 10).contains(&t) => (b'0' + (t - DIGIT_BASE) as u8) as char,
            COLON_TOKEN => ':',
            SPACE_TOKEN => ' ',
            DASH_TOKEN => '-',
            _ => '?',
        };
        if shift && ch.is_ascii_lowercase() {
            out.push(ch.to_ascii_uppercase());
        } else {
            out.push(ch);
        }
        shift = false;
    }
    out
}

// ───────────────────────────────────────────────────────────────────────
// Domain types
// ───────────────────────────────────────────────────────────────────────

/// The four behavioral regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Read back one full line.
    Transcription,
    /// Copy the unique field of a named kind.
    Keyword,
    /// Copy the value printed after a named key.
    Keyvalue,
    /// Keyword question spelled in uppercase via shift markers.
    Casing,
}

impl TaskKind {
    /// All kinds in canonical order.
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Transcription,
        TaskKind::Keyword,
        TaskKind::Keyvalue,
        TaskKind::Casing,
    ];

    /// Kebab-case name (matches the serialized form).
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Transcription => "transcription",
            TaskKind::Keyword => "keyword",
            TaskKind::Keyvalue => "keyvalue",
            TaskKind::Casing => "casing",
        }
    }
}

/// The typed micro-grammars a keyword question can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    /// `dd-dd`.
    Date,
    /// `ddd`.
    Number,
    /// Uppercase letter + two digits.
    Code,
    /// A `key: value` pair.
    KeyValue,
    /// Untyped filler word.
    Text,
}

impl FieldKind {
    /// The question word naming this kind.
    pub fn question_word(self) -> &'static str {
        match self {
            FieldKind::Date => "date",
            FieldKind::Number => "num",
            FieldKind::Code => "code",
            FieldKind::KeyValue => "key",
            FieldKind::Text => "text",
        }
    }
}

/// One annotated span: the value glyphs sit at row `row`, columns
/// [`col_start`, `col_end`). For key-value fields the key renders on the
/// same row starting at column 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldAnnotation {
    /// Grammar of the span.
    pub kind: FieldKind,
    /// Key string ("k3" for key-value pairs, the kind's question word
    /// otherwise).
    pub key: String,
    /// Value string whose glyphs appear at the stated coordinates.
    pub value: String,
    /// Grid row.
    pub row: usize,
    /// First column of the value span.
    pub col_start: usize,
    /// One past the last column of the value span.
    pub col_end: usize,
}

/// A synthetic document: the glyph grid plus its field annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthDoc {
    /// Rendered glyph grid.
    pub grid: TokenGrid,
    /// Annotated fields (keys unique within the document).
    pub fields: Vec<FieldAnnotation>,
    /// Which regime this document belongs to.
    pub task_kind: TaskKind,
}

/// A question over one document whose answer is a contiguous glyph span of
/// the grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    /// Question glyph tokens (may contain shift markers).
    pub question: Vec<u32>,
    /// Answer glyph tokens.
    pub answer: Vec<u32>,
    /// Index of the owning document within its dataset.
    pub doc_id: usize,
}

/// Fractions for the three analysis subsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Interpretability-analysis share.
    pub interpretability: f64,
    /// Student-selection share.
    pub selection: f64,
    /// Post-pruning evaluation share.
    pub evaluation: f64,
}

impl Default for SplitSpec {
    /// The 0.2 / 0.2 / 0.6 split.
    fn default() -> Self {
        SplitSpec { interpretability: 0.2, selection: 0.2, evaluation: 0.6 }
    }
}

impl SplitSpec {
    /// Checks positivity and unit sum (to 1e-9).
    pub fn validate(&self) -> Result<()> {
        let parts = [self.interpretability, self.selection, self.evaluation];
        if parts.iter().any(|&f| f <= 0.0) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {}, not 1", sum)));
        }
        Ok(())
    }
}

/// Index sets of the three analysis subsets over one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    /// Items for interpretability analysis.
    pub interpretability: Vec<usize>,
    /// Items for student selection.
    pub selection: Vec<usize>,
    /// Items for final evaluation.
    pub evaluation: Vec<usize>,
}

/// Generation request: per-task document counts and alphabet sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    /// Documents per task kind, keyed by kind.
    pub counts: BTreeMap<TaskKind, usize>,
    /// Distinct keys available to key-value documents (≤ 10).
    pub n_keys: usize,
    /// Distinct values available to key-value documents (≤ 10).
    pub n_values: usize,
    /// Grid height.
    pub grid_rows: usize,
    /// Grid width.
    pub grid_cols: usize,
    /// Vocabulary bound the glyph alphabet must fit into.
    pub vocab_size: usize,
}

impl DataSpec {
    /// A spec with `n` documents of every task kind and the default
    /// alphabet sizes (|K| = |V| = 8) on the 12×12 grid.
    pub fn uniform(n: usize) -> Self {
        DataSpec {
            counts: TaskKind::ALL.iter().map(|&k| (k, n)).collect(),
            n_keys: 8,
            n_values: 8,
            grid_rows: 12,
            grid_cols: 12,
            vocab_size: 128,
        }
    }

    /// Total document count.
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    fn validate(&self) -> Result<()> {
        if self.counts.values().any(|&c| c == 0) || self.counts.is_empty() {
            return Err(Error::DataGen("document counts must be positive".into()));
        }
        if self.n_keys < 2 || self.n_keys > 10 || self.n_values < 2 || self.n_values > 10 {
            return Err(Error::DataGen(
                "key/value alphabet sizes must be in 2..=10 (single digit suffix)".into(),
            ));
        }
        if (self.vocab_size as u32) < GLYPH_VOCAB_END {
            return Err(Error::DataGen(format!(
                "vocabulary of {} cannot hold the {}-token glyph alphabet",
                self.vocab_size, GLYPH_VOCAB_END
            )));
        }
        if self.grid_rows < 6 || self.grid_cols < 8 {
            return Err(Error::DataGen("grid too small for the task layouts".into()));
        }
        Ok(())
    }
}

// ───────────────────────────────────────────────────────────────────────
// Generation
// ───────────────────────────────────────────────────────────────────────

/// Generates `spec.total()` documents with one QA pair each, reproducibly
/// from the seed. Per-task counts are honored exactly; every answer is a
/// contiguous glyph span of its grid.
pub fn gen_dataset(spec: &DataSpec, seed: u64) -> Result<Vec<(SynthDoc, QAPair)>> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.total());
    for kind in TaskKind::ALL {
        let n = spec.counts.get(&kind).copied().unwrap_or(0);
        for _ in 0..n {
            let doc_id = out.len();
            let (doc, qa) = match kind {
                TaskKind::Transcription => gen_transcription(spec, &mut rng, doc_id)?,
                TaskKind::Keyword => gen_keyword(spec, &mut rng, doc_id, false)?,
                TaskKind::Keyvalue => gen_keyvalue(spec, &mut rng, doc_id)?,
                TaskKind::Casing => gen_keyword(spec, &mut rng, doc_id, true)?,
            };
            out.push((doc, qa));
        }
    }
    Ok(out)
}

/// Blank grid of the spec's dimensions.
fn blank_grid(spec: &DataSpec) -> TokenGrid {
    TokenGrid::filled(spec.grid_rows, spec.grid_cols, SPACE_TOKEN)
}

/// Writes `text` into the grid at (row, col); the caller guarantees fit.
fn write_text(grid: &mut TokenGrid, row: usize, col: usize, text: &str) -> Result<()> {
    for (i, ch) in text.chars().enumerate() {
        grid.set(row, col + i, glyph_token(ch)?);
    }
    Ok(())
}

/// Random lowercase word of 2–5 glyphs.
fn random_word(rng: &mut ChaCha20Rng) -> String {
    let len = rng.gen_range(2..=5);
    (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect()
}

/// Fills one row with space-separated random words and returns the trimmed
/// line text.
fn fill_word_row(grid: &mut TokenGrid, rng: &mut ChaCha20Rng, row: usize) -> Result<String> {
    let cols = grid.cols();
    let mut col = 0;
    let mut line = String::new();
    loop {
        let word = random_word(rng);
        if col + word.len() > cols {
            break;
        }
        write_text(grid, row, col, &word)?;
        if !line.is_empty() {
            line.push(' ');
        }
        line.push_str(&word);
        col += word.len() + 1;
        if col >= cols {
            break;
        }
    }
    Ok(line)
}

fn render_field_value(kind: FieldKind, rng: &mut ChaCha20Rng) -> String {
    match kind {
        FieldKind::Date => format!(
            "{}{}-{}{}",
            rng.gen_range(0..10),
            rng.gen_range(0..10),
            rng.gen_range(0..10),
            rng.gen_range(0..10)
        ),
        FieldKind::Number => format!("{}{}{}", rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(0..10)),
        FieldKind::Code => format!(
            "{}{}{}",
            (b'A' + rng.gen_range(0..26u8)) as char,
            rng.gen_range(0..10),
            rng.gen_range(0..10)
        ),
        FieldKind::KeyValue | FieldKind::Text => unreachable!("not a keyword grammar"),
    }
}

const KEYWORD_KINDS: [FieldKind; 3] = [FieldKind::Date, FieldKind::Number, FieldKind::Code];
/// Casing questions target digit-valued grammars so the answer is trivially
/// lowercase.
const CASING_KINDS: [FieldKind; 2] = [FieldKind::Date, FieldKind::Number];

/// Transcription: word-filled rows; the question names one row by digit.
fn gen_transcription(
    spec: &DataSpec,
    rng: &mut ChaCha20Rng,
    doc_id: usize,
) -> Result<(SynthDoc, QAPair)> {
    let mut grid = blank_grid(spec);
    let queryable = spec.grid_rows.min(10); // single-digit row label
    let mut lines = Vec::with_capacity(queryable);
    for row in 0..spec.grid_rows {
        let line = fill_word_row(&mut grid, rng, row)?;
        if row < queryable {
            lines.push(line);
        }
    }
    let target = rng.gen_range(0..queryable);
    let answer_text = lines[target].clone();
    let fields = vec![FieldAnnotation {
        kind: FieldKind::Text,
        key: format!("line {target}"),
        value: answer_text.clone(),
        row: target,
        col_start: 0,
        col_end: answer_text.len(),
    }];
    let doc = SynthDoc { grid, fields, task_kind: TaskKind::Transcription };
    let qa = QAPair {
        question: encode_text(&format!("line {target}"))?,
        answer: encode_text(&answer_text)?,
        doc_id,
    };
    Ok((doc, qa))
}

/// Keyword / casing: exactly one field of the queried kind plus distractor
/// fields of the other kinds and filler words, each on its own row.
fn gen_keyword(
    spec: &DataSpec,
    rng: &mut ChaCha20Rng,
    doc_id: usize,
    shifted: bool,
) -> Result<(SynthDoc, QAPair)> {
    let mut grid = blank_grid(spec);
    let target_kind = if shifted {
        CASING_KINDS[rng.gen_range(0..CASING_KINDS.len())]
    } else {
        KEYWORD_KINDS[rng.gen_range(0..KEYWORD_KINDS.len())]
    };

    // One field per distinct kind — exactly one instance of the target.
    let mut rows: Vec<usize> = (0..spec.grid_rows).collect();
    rows.shuffle(rng);
    let mut fields = Vec::new();
    for (i, &kind) in KEYWORD_KINDS.iter().enumerate() {
        if kind != target_kind && rng.gen_bool(0.5) {
            continue; // distractor kinds appear with probability 1/2
        }
        let value = render_field_value(kind, rng);
        let row = rows[i];
        let col = rng.gen_range(0..=spec.grid_cols - value.len());
        write_text(&mut grid, row, col, &value)?;
        fields.push(FieldAnnotation {
            kind,
            key: kind.question_word().to_string(),
            value: value.clone(),
            row,
            col_start: col,
            col_end: col + value.len(),
        });
    }
    // Filler words on two of the remaining rows (letters only, so no
    // grammar can be imitated).
    for &row in rows.iter().skip(KEYWORD_KINDS.len()).take(2) {
        let word = random_word(rng);
        let col = rng.gen_range(0..=spec.grid_cols - word.len());
        write_text(&mut grid, row, col, &word)?;
    }

    let target = fields
        .iter()
        .find(|f| f.kind == target_kind)
        .expect("target field placed unconditionally");
    let answer = encode_text(&target.value)?;
    let question_text = target_kind.question_word();
    let question = if shifted {
        encode_shifted(&question_text.to_ascii_uppercase())?
    } else {
        encode_text(question_text)?
    };
    let task_kind = if shifted { TaskKind::Casing } else { TaskKind::Keyword };
    let doc = SynthDoc { grid, fields, task_kind };
    Ok((doc, QAPair { question, answer, doc_id }))
}

/// Key-value: 4–6 `kD: vD` lines with distinct keys and distinct values;
/// the question names one key.
fn gen_keyvalue(spec: &DataSpec, rng: &mut ChaCha20Rng, doc_id: usize) -> Result<(SynthDoc, QAPair)> {
    let hi = 6.min(spec.n_keys).min(spec.n_values).min(spec.grid_rows);
    let lo = 4.min(hi).max(2);
    let n_pairs = rng.gen_range(lo..=hi);
    let mut keys: Vec<usize> = (0..spec.n_keys).collect();
    keys.shuffle(rng);
    let mut values: Vec<usize> = (0..spec.n_values).collect();
    values.shuffle(rng);

    let mut grid = blank_grid(spec);
    let mut rows: Vec<usize> = (0..spec.grid_rows).collect();
    rows.shuffle(rng);
    let mut row_choice: Vec<usize> = rows[..n_pairs].to_vec();
    row_choice.sort_unstable(); // lines read top-to-bottom

    let mut fields = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let key = format!("k{}", keys[i]);
        let value = format!("v{}", values[i]);
        let row = row_choice[i];
        let line = format!("{key}: {value}");
        write_text(&mut grid, row, 0, &line)?;
        fields.push(FieldAnnotation {
            kind: FieldKind::KeyValue,
            key,
            value,
            row,
            col_start: 4,
            col_end: 6,
        });
    }

    let asked = rng.gen_range(0..n_pairs);
    let qa = QAPair {
        question: encode_text(&fields[asked].key)?,
        answer: encode_text(&fields[asked].value)?,
        doc_id,
    };
    Ok((SynthDoc { grid, fields, task_kind: TaskKind::Keyvalue }, qa))
}

// ───────────────────────────────────────────────────────────────────────
// Corruption
// ───────────────────────────────────────────────────────────────────────

/// Returns a copy of a key-value document whose values are cyclically
/// permuted across the value slots (uniform over full cycles, so *every*
/// value moves; two pairs always swap). Keys, positions, and all grid
/// cells outside the value spans are untouched.
pub fn corrupt_keyvalue(doc: &SynthDoc, seed: u64) -> Result<SynthDoc> {
    if doc.task_kind != TaskKind::Keyvalue {
        return Err(Error::Corrupt(format!(
            "corruption requires a keyvalue document, got {}",
            doc.task_kind.name()
        )));
    }
    let slots: Vec<usize> = (0..doc.fields.len())
        .filter(|&i| doc.fields[i].kind == FieldKind::KeyValue)
        .collect();
    if slots.len() < 2 {
        return Err(Error::Corrupt("corruption needs at least two key-value pairs".into()));
    }

    // Sattolo's algorithm: a uniformly random cyclic permutation.
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = slots.len();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }

    let mut corrupted = doc.clone();
    for (i, &slot) in slots.iter().enumerate() {
        let source = &doc.fields[slots[perm[i]]];
        let dest = &mut corrupted.fields[slot];
        dest.value = source.value.clone();
        let (row, col, text) = (dest.row, dest.col_start, dest.value.clone());
        write_text(&mut corrupted.grid, row, col, &text)?;
    }
    Ok(corrupted)
}

// ───────────────────────────────────────────────────────────────────────
// Splitting
// ───────────────────────────────────────────────────────────────────────

/// Splits a dataset into the three analysis subsets: disjoint, exhaustive,
/// stratified by task kind (per-kind proportions within ±1 item), shuffled
/// reproducibly by the seed.
pub fn split(
    dataset: &[(SynthDoc, QAPair)],
    spec: &SplitSpec,
    seed: u64,
) -> Result<SplitIndices> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut by_kind: BTreeMap<TaskKind, Vec<usize>> = BTreeMap::new();
    for (i, (doc, _)) in dataset.iter().enumerate() {
        by_kind.entry(doc.task_kind).or_default().push(i);
    }

    let mut out = SplitIndices {
        interpretability: Vec::new(),
        selection: Vec::new(),
        evaluation: Vec::new(),
    };
    for indices in by_kind.values_mut() {
        indices.shuffle(&mut rng);
        let n = indices.len();
        // Largest-remainder apportionment: exact when fractions divide n.
        let fracs = [spec.interpretability, spec.selection, spec.evaluation];
        let mut sizes: Vec<usize> = fracs.iter().map(|f| (f * n as f64).floor() as usize).collect();
        let mut remainders: Vec<(usize, f64)> = fracs
            .iter()
            .enumerate()
            .map(|(j, f)| (j, f * n as f64 - sizes[j] as f64))
            .collect();
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut leftover = n - sizes.iter().sum::<usize>();
        for &(j, _) in &remainders {
            if leftover == 0 {
                break;
            }
            sizes[j] += 1;
            leftover -= 1;
        }
        let (a, b) = (sizes[0], sizes[0] + sizes[1]);
        out.interpretability.extend_from_slice(&indices[..a]);
        out.selection.extend_from_slice(&indices[a..b]);
        out.evaluation.extend_from_slice(&indices[b..]);
    }
    out.interpretability.sort_unstable();
    out.selection.sort_unstable();
    out.evaluation.sort_unstable();
    Ok(out)
}

// ───────────────────────────────────────────────────────────────────────
// Prompt encoding
// ───────────────────────────────────────────────────────────────────────

/// A teacher-forcing decoder sequence with its scored positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPrompt {
    /// question-start, question, answer-start, answer, eos.
    pub tokens: Vec<u32>,
    /// Input positions whose next-token predictions are scored: exactly
    /// the answer-start position and the answer positions, so the targets
    /// are the answer tokens followed by eos (len(answer)+1 positions).
    pub loss_positions: Vec<usize>,
}

impl EncodedPrompt {
    /// The prompt prefix for generation: everything up to and including
    /// the answer-start token.
    pub fn generation_prefix(&self) -> &[u32] {
        let astart = self
            .loss_positions
            .first()
            .copied()
            .expect("loss positions are never empty");
        &self.tokens[..=astart]
    }

    /// Target token at each loss position (`tokens[p+1]`).
    pub fn targets(&self) -> Vec<u32> {
        self.loss_positions.iter().map(|&p| self.tokens[p + 1]).collect()
    }
}

/// Lays out `question-start, question, answer-start, answer, eos` and marks
/// the scored positions. Errors when the sequence exceeds `max_len`.
pub fn encode_prompt(qa: &QAPair, max_len: usize) -> Result<EncodedPrompt> {
    let len = qa.question.len() + qa.answer.len() + 3;
    if len > max_len {
        return Err(Error::Length(format!(
            "prompt of {} tokens exceeds the maximum of {}",
            len, max_len
        )));
    }
    let mut tokens = Vec::with_capacity(len);
    tokens.push(QUESTION_START_TOKEN);
    tokens.extend_from_slice(&qa.question);
    let astart = tokens.len();
    tokens.push(ANSWER_START_TOKEN);
    tokens.extend_from_slice(&qa.answer);
    tokens.push(EOS_TOKEN);
    let loss_positions: Vec<usize> = (astart..astart + qa.answer.len() + 1).collect();
    Ok(EncodedPrompt { tokens, loss_positions })
}

// ───────────────────────────────────────────────────────────────────────
// Dataset files
// ───────────────────────────────────────────────────────────────────────

/// One dataset line: a versioned, self-contained record of a document and
/// its QA pair. The grid serializes as space-separated token ids,
/// row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Format version of this record.
    pub record_version: u32,
    /// Position within the dataset.
    pub doc_id: usize,
    /// Task regime name.
    pub task_kind: TaskKind,
    /// Grid height.
    pub rows: usize,
    /// Grid width.
    pub cols: usize,
    /// Space-separated glyph-token ids, row-major.
    pub grid: String,
    /// Field annotations.
    pub fields: Vec<FieldAnnotation>,
    /// Question token ids.
    pub question: Vec<u32>,
    /// Answer token ids.
    pub answer: Vec<u32>,
}

/// Current dataset record version.
pub const DATASET_RECORD_VERSION: u32 = 1;

/// Writes one record per line.
pub fn write_dataset(path: &Path, dataset: &[(SynthDoc, QAPair)]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, (doc, qa)) in dataset.iter().enumerate() {
        let record = DatasetRecord {
            record_version: DATASET_RECORD_VERSION,
            doc_id: i,
            task_kind: doc.task_kind,
            rows: doc.grid.rows(),
            cols: doc.grid.cols(),
            grid: doc
                .grid
                .cells()
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            fields: doc.fields.clone(),
            question: qa.question.clone(),
            answer: qa.answer.clone(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::DataGen(format!("record serialization failed: {e}")))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Vec<(SynthDoc, QAPair)>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| {
            Error::DataGen(format!("line {}: record parse failed: {e}", lineno + 1))
        })?;
        if record.record_version != DATASET_RECORD_VERSION {
            return Err(Error::DataGen(format!(
                "line {}: unsupported record version {}",
                lineno + 1,
                record.record_version
            )));
        }
        let cells: Vec<u32> = record
            .grid
            .split_whitespace()
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|e| Error::DataGen(format!("line {}: bad grid token: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        let grid = TokenGrid::new(record.rows, record.cols, cells)?;
        let doc = SynthDoc { grid, fields: record.fields, task_kind: record.task_kind };
        let qa = QAPair { question: record.question, answer: record.answer, doc_id: record.doc_id };
        out.push((doc, qa));
    }
    Ok(out)
}

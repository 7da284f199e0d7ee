//! Contracts of the synthetic-document generator: reproducibility, span
//! copying, corruption guarantees, stratified splitting, prompt layout, and
//! dataset file round-trips.

use std::collections::BTreeSet;

use glyphvqa::model::{ANSWER_START_TOKEN, EOS_TOKEN, QUESTION_START_TOKEN, SHIFT_TOKEN};
use glyphvqa::synthdocs::{
    corrupt_keyvalue, decode_tokens, encode_prompt, encode_shifted, encode_text, gen_dataset,
    read_dataset, split, write_dataset, DataSpec, FieldKind, QAPair, SplitSpec, SynthDoc,
    TaskKind, SPACE_TOKEN,
};

fn default_dataset(n: usize, seed: u64) -> Vec<(SynthDoc, QAPair)> {
    gen_dataset(&DataSpec::uniform(n), seed).expect("generation succeeds")
}

/// The answer tokens must appear as a contiguous run somewhere in the grid.
fn answer_is_span(doc: &SynthDoc, qa: &QAPair) -> bool {
    let cols = doc.grid.cols();
    let a = &qa.answer;
    if a.is_empty() || a.len() > cols {
        return false;
    }
    (0..doc.grid.rows()).any(|r| {
        (0..=cols - a.len()).any(|c| (0..a.len()).all(|i| doc.grid.get(r, c + i) == a[i]))
    })
}

// ─── Tokenizer ──────────────────────────────────────────────────────────

#[test]
fn tokenizer_round_trips_both_cases() {
    for text in ["hello world", "k3: v7", "03-12", "K47", "MIXED case 9"] {
        let toks = encode_text(text).expect("printable");
        assert_eq!(decode_tokens(&toks), text, "plain round-trip of {text:?}");
    }
    assert!(encode_text("émigré").is_err(), "non-alphabet characters are rejected");
}

#[test]
fn shift_encoding_marks_uppercase_and_round_trips() {
    let toks = encode_shifted("WHAT IS THE DATE").expect("encodable");
    // Every uppercase letter contributes a shift marker + lowercase glyph.
    let shift_count = toks.iter().filter(|&&t| t == SHIFT_TOKEN).count();
    assert_eq!(shift_count, 13, "one marker per uppercase letter");
    assert_eq!(decode_tokens(&toks), "WHAT IS THE DATE", "shift round-trip");
    // Plain encoding of the same text uses dedicated uppercase glyphs.
    let plain = encode_text("WHAT IS THE DATE").unwrap();
    assert!(plain.iter().all(|&t| t != SHIFT_TOKEN));
    assert_eq!(decode_tokens(&plain), "WHAT IS THE DATE");
}

// ─── Generation ─────────────────────────────────────────────────────────

#[test]
fn generation_is_reproducible_and_ratios_exact() {
    let spec = DataSpec::uniform(25);
    let a = gen_dataset(&spec, 42).unwrap();
    let b = gen_dataset(&spec, 42).unwrap();
    assert_eq!(a, b, "same (spec, seed) must regenerate identically");
    let c = gen_dataset(&spec, 43).unwrap();
    assert_ne!(a, c, "different seeds should differ");

    assert_eq!(a.len(), 100, "mix (25,25,25,25) over 100 docs");
    for kind in TaskKind::ALL {
        let n = a.iter().filter(|(d, _)| d.task_kind == kind).count();
        assert_eq!(n, 25, "exactly 25 documents of kind {}", kind.name());
    }
}

#[test]
fn every_answer_is_a_copyable_span() {
    for (doc, qa) in default_dataset(40, 7) {
        assert!(
            answer_is_span(&doc, &qa),
            "{} answer {:?} not found as a grid span",
            doc.task_kind.name(),
            decode_tokens(&qa.answer)
        );
    }
}

#[test]
fn annotations_match_grid_coordinates_and_keys_unique() {
    for (doc, _) in default_dataset(40, 8) {
        let mut keys = BTreeSet::new();
        for f in &doc.fields {
            assert!(keys.insert(f.key.clone()), "duplicate key {:?} within one document", f.key);
            let span: Vec<u32> = (f.col_start..f.col_end).map(|c| doc.grid.get(f.row, c)).collect();
            let expected = encode_text(&f.value).unwrap();
            assert_eq!(span, expected, "annotation {:?} not at stated coordinates", f.key);
        }
    }
}

#[test]
fn keyword_docs_contain_exactly_one_target_instance() {
    for (doc, qa) in default_dataset(60, 9) {
        if doc.task_kind != TaskKind::Keyword && doc.task_kind != TaskKind::Casing {
            continue;
        }
        let question = decode_tokens(&qa.question).to_ascii_lowercase();
        let n = doc
            .fields
            .iter()
            .filter(|f| f.kind.question_word() == question)
            .count();
        assert_eq!(n, 1, "question {:?} must match exactly one field", question);
    }
}

#[test]
fn keyvalue_answers_come_from_value_alphabet() {
    let mut spec = DataSpec::uniform(1);
    spec.counts = [(TaskKind::Keyvalue, 100)].into_iter().collect();
    spec.n_keys = 8;
    spec.n_values = 8;
    for (doc, qa) in gen_dataset(&spec, 5).unwrap() {
        let answer = decode_tokens(&qa.answer);
        assert!(answer.starts_with('v'), "keyvalue answer {answer:?} outside V");
        let suffix: usize = answer[1..].parse().expect("digit suffix");
        assert!(suffix < 8, "value index within |V| = 8");
        // Values are distinct within one document.
        let values: BTreeSet<&String> = doc.fields.iter().map(|f| &f.value).collect();
        assert_eq!(values.len(), doc.fields.len(), "values distinct within a document");
    }
}

#[test]
fn casing_questions_are_shift_marked_with_lowercase_answers() {
    for (doc, qa) in default_dataset(30, 10) {
        if doc.task_kind != TaskKind::Casing {
            continue;
        }
        assert!(
            qa.question.contains(&SHIFT_TOKEN),
            "casing question must carry shift markers"
        );
        let answer = decode_tokens(&qa.answer);
        assert_eq!(answer, answer.to_ascii_lowercase(), "casing answer must be lowercase");
        let q = decode_tokens(&qa.question);
        assert_eq!(q, q.to_ascii_uppercase(), "casing question decodes to uppercase");
    }
}

#[test]
fn vocabulary_overflow_is_rejected() {
    let mut spec = DataSpec::uniform(2);
    spec.vocab_size = 40; // below the 70-token glyph alphabet
    assert!(gen_dataset(&spec, 1).is_err());
}

// ─── Corruption ─────────────────────────────────────────────────────────

fn keyvalue_doc(seed: u64) -> SynthDoc {
    let mut spec = DataSpec::uniform(1);
    spec.counts = [(TaskKind::Keyvalue, 1)].into_iter().collect();
    gen_dataset(&spec, seed).unwrap().remove(0).0
}

#[test]
fn corruption_preserves_keys_and_positions_moves_every_value() {
    let doc = keyvalue_doc(21);
    let corrupt = corrupt_keyvalue(&doc, 99).unwrap();

    assert_eq!(doc.fields.len(), corrupt.fields.len());
    for (a, b) in doc.fields.iter().zip(&corrupt.fields) {
        assert_eq!(a.key, b.key, "keys unchanged");
        assert_eq!((a.row, a.col_start, a.col_end), (b.row, b.col_start, b.col_end), "positions unchanged");
        assert_ne!(a.value, b.value, "every value must move (cyclic shuffle)");
    }
    // Same value multiset.
    let mut va: Vec<&String> = doc.fields.iter().map(|f| &f.value).collect();
    let mut vb: Vec<&String> = corrupt.fields.iter().map(|f| &f.value).collect();
    va.sort();
    vb.sort();
    assert_eq!(va, vb, "value multiset preserved");

    // Grid cells outside value spans are untouched.
    let in_span = |r: usize, c: usize| {
        doc.fields.iter().any(|f| f.row == r && (f.col_start..f.col_end).contains(&c))
    };
    for r in 0..doc.grid.rows() {
        for c in 0..doc.grid.cols() {
            if !in_span(r, c) {
                assert_eq!(doc.grid.get(r, c), corrupt.grid.get(r, c), "cell ({r},{c}) changed outside value spans");
            }
        }
    }
}

#[test]
fn two_pair_corruption_is_a_swap() {
    // Build a 2-pair document by trimming a generated one.
    let mut doc = keyvalue_doc(33);
    while doc.fields.len() > 2 {
        let f = doc.fields.pop().unwrap();
        for c in f.col_start..f.col_end {
            doc.grid.set(f.row, c, SPACE_TOKEN);
        }
        // Blank the key prefix of the removed line too.
        for c in 0..f.col_start {
            doc.grid.set(f.row, c, SPACE_TOKEN);
        }
    }
    let corrupt = corrupt_keyvalue(&doc, 5).unwrap();
    assert_eq!(corrupt.fields[0].value, doc.fields[1].value);
    assert_eq!(corrupt.fields[1].value, doc.fields[0].value);

    // A single-pair document cannot be corrupted.
    let mut single = doc.clone();
    single.fields.truncate(1);
    assert!(corrupt_keyvalue(&single, 5).is_err());
}

/// Monte-Carlo bound on the shuffle distribution: over 1000 corruptions of
/// a 5-pair document, the fraction of values keeping their key stays ≤ 25%
/// (the cyclic shuffle achieves exactly 0).
#[test]
fn corruption_keep_fraction_bounded() {
    let mut doc = (0..100)
        .map(keyvalue_doc)
        .find(|d| d.fields.len() >= 5)
        .expect("some seed yields a ≥5-pair document");
    while doc.fields.len() > 5 {
        let f = doc.fields.pop().unwrap();
        for c in 0..f.col_end {
            doc.grid.set(f.row, c, SPACE_TOKEN);
        }
    }
    assert_eq!(doc.fields.len(), 5, "need a 5-pair document for this oracle");
    let mut kept = 0usize;
    let mut total = 0usize;
    for seed in 0..1000 {
        let corrupt = corrupt_keyvalue(&doc, seed).unwrap();
        for (a, b) in doc.fields.iter().zip(&corrupt.fields) {
            total += 1;
            if a.value == b.value {
                kept += 1;
            }
        }
    }
    let fraction = kept as f64 / total as f64;
    assert!(fraction <= 0.25, "keep fraction {fraction} exceeds 25%");
}

// ─── Splitting ──────────────────────────────────────────────────────────

#[test]
fn split_sizes_exact_at_default_fractions() {
    let dataset = default_dataset(25, 3); // 100 items
    let s = split(&dataset, &SplitSpec::default(), 11).unwrap();
    assert_eq!(s.interpretability.len(), 20);
    assert_eq!(s.selection.len(), 20);
    assert_eq!(s.evaluation.len(), 60);
}

#[test]
fn split_is_disjoint_exhaustive_and_stratified() {
    let dataset = default_dataset(13, 17); // 52 items, awkward sizes
    let s = split(&dataset, &SplitSpec::default(), 23).unwrap();
    let mut all: Vec<usize> = s
        .interpretability
        .iter()
        .chain(&s.selection)
        .chain(&s.evaluation)
        .copied()
        .collect();
    all.sort_unstable();
    let expected: Vec<usize> = (0..dataset.len()).collect();
    assert_eq!(all, expected, "subsets must partition the dataset");

    // Stratification: per-kind proportions within ±1 item of the target.
    for kind in TaskKind::ALL {
        let kind_total = dataset.iter().filter(|(d, _)| d.task_kind == kind).count() as f64;
        for (subset, frac) in [
            (&s.interpretability, 0.2),
            (&s.selection, 0.2),
            (&s.evaluation, 0.6),
        ] {
            let got = subset
                .iter()
                .filter(|&&i| dataset[i].0.task_kind == kind)
                .count() as f64;
            assert!(
                (got - frac * kind_total).abs() <= 1.0,
                "{}: {} items of {} at fraction {}",
                kind.name(),
                got,
                kind_total,
                frac
            );
        }
    }
}

#[test]
fn invalid_split_fractions_rejected() {
    let dataset = default_dataset(2, 1);
    let bad = SplitSpec { interpretability: 0.5, selection: 0.5, evaluation: 0.5 };
    assert!(split(&dataset, &bad, 0).is_err());
    let zero = SplitSpec { interpretability: 0.0, selection: 0.4, evaluation: 0.6 };
    assert!(split(&dataset, &zero, 0).is_err());
}

// ─── Prompt encoding ────────────────────────────────────────────────────

#[test]
fn prompt_layout_and_loss_positions() {
    let qa = QAPair {
        question: encode_text("k3").unwrap(),
        answer: encode_text("v5").unwrap(),
        doc_id: 0,
    };
    let p = encode_prompt(&qa, 64).unwrap();
    assert_eq!(p.tokens[0], QUESTION_START_TOKEN);
    assert_eq!(p.tokens[3], ANSWER_START_TOKEN);
    assert_eq!(*p.tokens.last().unwrap(), EOS_TOKEN);
    assert_eq!(p.tokens.len(), 7);

    // Scored positions: answer-start + answer tokens = len(answer)+1.
    assert_eq!(p.loss_positions.len(), qa.answer.len() + 1);
    assert_eq!(p.loss_positions, vec![3, 4, 5]);
    assert_eq!(p.targets(), vec![qa.answer[0], qa.answer[1], EOS_TOKEN]);
    assert_eq!(p.generation_prefix(), &p.tokens[..4]);

    // Overlong sequences are rejected.
    assert!(encode_prompt(&qa, 6).is_err());
}

// ─── Dataset files ──────────────────────────────────────────────────────

#[test]
fn dataset_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let dataset = default_dataset(5, 77);
    write_dataset(&path, &dataset).unwrap();
    let loaded = read_dataset(&path).unwrap();
    assert_eq!(dataset, loaded, "dataset must survive a file round-trip");

    // Line-delimited: one record per line, seekable by line number.
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), dataset.len());

    // Byte-identical on rewrite (no timestamps or map ordering drift).
    let path2 = dir.path().join("data2.jsonl");
    write_dataset(&path2, &dataset).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn field_kinds_cover_grammar_shapes() {
    for (doc, _) in default_dataset(40, 19) {
        for f in &doc.fields {
            match f.kind {
                FieldKind::Date => {
                    assert_eq!(f.value.len(), 5);
                    assert_eq!(&f.value[2..3], "-");
                }
                FieldKind::Number => {
                    assert_eq!(f.value.len(), 3);
                    assert!(f.value.chars().all(|c| c.is_ascii_digit()));
                }
                FieldKind::Code => {
                    assert!(f.value.chars().next().unwrap().is_ascii_uppercase());
                    assert_eq!(f.value.len(), 3);
                }
                FieldKind::KeyValue => {
                    assert!(f.value.starts_with('v'));
                }
                FieldKind::Text => {}
            }
        }
    }
}

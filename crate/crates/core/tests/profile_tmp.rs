//! Temporary throughput probes (ignored by default; run explicitly).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use glyphvqa::distill::{train_teacher, TeacherConfig, TrainData};
use glyphvqa::evalmetrics::anls;
use glyphvqa::model::{build_model, save_model, CaptureSet, MaskSet, MiniModelConfig};
use glyphvqa::synthdocs::{decode_tokens, encode_prompt, gen_dataset, DataSpec, TaskKind};

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn learning_curve_toy_teacher() {
    let steps = env_usize("LC_STEPS", 1500);
    let peak = env_f64("LC_PEAK", 1e-3);
    let warmup = env_usize("LC_WARMUP", 100);
    let floor = env_f64("LC_FLOOR", 0.1);
    let pool = env_usize("LC_POOL", 12_500);
    let trans_weight = env_usize("LC_TRANS", 1);
    let batch = env_usize("LC_BATCH", 32);
    println!(
        "steps {steps}  peak {peak}  warmup {warmup}  floor {floor}  pool {pool}/kind  transcription×{trans_weight}  batch {batch}"
    );

    let config = MiniModelConfig::toy_default();
    let model = build_model(config.clone(), 0).unwrap();
    let t0 = Instant::now();
    let mut spec = DataSpec::uniform(pool);
    spec.counts.insert(TaskKind::Transcription, pool * trans_weight);
    let train_set = gen_dataset(&spec, 100).unwrap();
    println!("generated {} training samples in {:.1}s", train_set.len(), t0.elapsed().as_secs_f64());
    let analysis_set = gen_dataset(&DataSpec::uniform(1000), 200).unwrap();

    // Held-out monitor: 200 samples drawn evenly from the analysis set.
    let mut combined: Vec<_> = train_set;
    let offset = combined.len();
    for (i, sample) in analysis_set.iter().enumerate() {
        if i % 20 == 0 {
            combined.push(sample.clone());
        }
    }
    let train: Vec<usize> = (0..offset).collect();
    let selection: Vec<usize> = (offset..combined.len()).collect();
    println!("train {} samples, monitor {} samples", train.len(), selection.len());

    let data = TrainData { dataset: &combined, train: &train, selection: &selection };
    let cfg = TeacherConfig {
        learning_rate: peak,
        batch_size: batch,
        steps,
        seed: 0,
        early_stop_ce: None,
        eval_every: 250.max(steps / 24),
        warmup_steps: warmup,
        final_lr_fraction: floor,
        ..TeacherConfig::default()
    };
    let t0 = Instant::now();
    let (trained, log) = train_teacher(model, &data, &cfg).unwrap();
    for e in &log.evals {
        println!("step {:>5}  EM {:.3}  similarity {:.3}", e.step, e.exact_match, e.anls);
    }
    for s in log.steps.iter().step_by(250) {
        println!("step {:>5}  CE {:.4}  grad {:.3}", s.step, s.ce, s.grad_norm);
    }
    println!("total wall time: {:.1} min", t0.elapsed().as_secs_f64() / 60.0);

    // Per-kind breakdown on held-out samples spread across all kinds.
    let masks = MaskSet::identity();
    let mut per_kind: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for (doc, qa) in analysis_set.iter().step_by(10).take(400) {
        let memory = trained.encode(&doc.grid).unwrap();
        let prompt = encode_prompt(qa, config.max_prompt).unwrap();
        let generated = trained
            .generate(&memory, prompt.generation_prefix(), config.grid_cols + 2, &masks)
            .unwrap();
        let truth = decode_tokens(&qa.answer);
        let got = decode_tokens(&generated);
        let entry = per_kind.entry(doc.task_kind.name()).or_insert((0, 0, 0.0));
        entry.0 += 1;
        entry.1 += usize::from(got == truth);
        entry.2 += anls(&[got.clone()], &[vec![truth.clone()]], 0.5).unwrap();
    }
    for (kind, (n, em, sim)) in &per_kind {
        println!(
            "kind {:>13}: EM {:.3}  similarity {:.3}  (n={})",
            kind,
            *em as f64 / *n as f64,
            sim / *n as f64,
            n
        );
    }
    if let Ok(path) = std::env::var("LC_SAVE") {
        save_model(Path::new(&path), &trained, &MaskSet::identity()).unwrap();
        println!("saved checkpoint to {path}");
    }
}

#[test]
#[ignore]
fn profile_toy_throughput() {
    let config = MiniModelConfig::toy_default();
    let model = build_model(config.clone(), 0).unwrap();
    let dataset = gen_dataset(&DataSpec::uniform(25), 1).unwrap(); // 100 samples

    // Teacher-forced value forward (no tape).
    let t0 = Instant::now();
    let mut count = 0;
    for (doc, qa) in dataset.iter().take(20) {
        let memory = model.encode(&doc.grid).unwrap();
        let prompt = encode_prompt(qa, config.max_prompt).unwrap();
        let _ = model
            .decode_teacher_forced(&memory, &prompt.tokens, &MaskSet::identity(), &CaptureSet::None)
            .unwrap();
        count += 1;
    }
    println!("value fwd (encode+decode): {:.2} ms/sample", t0.elapsed().as_secs_f64() * 1000.0 / count as f64);

    // Greedy generation throughput.
    let t0 = Instant::now();
    let mut gen_count = 0;
    for (doc, qa) in dataset.iter().take(20) {
        let memory = model.encode(&doc.grid).unwrap();
        let prompt = encode_prompt(qa, config.max_prompt).unwrap();
        let _ = model
            .generate(&memory, prompt.generation_prefix(), config.grid_cols + 2, &MaskSet::identity())
            .unwrap();
        gen_count += 1;
    }
    println!("generate: {:.2} ms/sample", t0.elapsed().as_secs_f64() * 1000.0 / gen_count as f64);

    // One full teacher step at batch 32 (grid encoded on the tape, fwd+bwd).
    let train: Vec<usize> = (0..dataset.len()).collect();
    let data = TrainData { dataset: &dataset, train: &train, selection: &[] };
    let cfg = TeacherConfig { steps: 3, batch_size: 32, early_stop_ce: None, ..TeacherConfig::default() };
    let t0 = Instant::now();
    let (_, log) = train_teacher(model, &data, &cfg).unwrap();
    let per_step = t0.elapsed().as_secs_f64() / log.steps.len() as f64;
    println!("teacher step (batch 32, grid on tape): {:.2} s/step → {:.0} steps in 30 min", per_step, 1800.0 / per_step);
}

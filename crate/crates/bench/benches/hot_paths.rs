//! Benchmarks for the paths that dominate experiment wall-clock: the tape's
//! matmul kernel, encoder forward passes, teacher-forced sequence scoring,
//! beam decoding, and one entropy adaptation step.

use criterion::{criterion_group, criterion_main, Criterion};
use entlab_core::decode::{beam_search_with_context, BeamSpec, Hypothesis, NBestList};
use entlab_core::losses::{min_entropy_loss, ListItem, LossOptions};
use entlab_core::model::{
    build_params, prepare_decoding, register_speaker_code, sequence_logprob, CodeMode,
    ModelConfig, EOS, FIRST_CONTENT,
};
use entlab_core::optim::Adam;
use entlab_core::tape::Tape;
use entlab_core::tensor::{ParameterStore, Tensor};

/// Deterministic pseudo-audio; benches must not depend on an RNG crate.
fn features(rows: usize, d: usize, phase: f64) -> Tensor {
    let values: Vec<f64> =
        (0..rows * d).map(|i| (phase + i as f64 * 0.61803).sin() * 0.4).collect();
    Tensor::from_vec(&[rows, d], values).expect("shape matches values")
}

fn square(n: usize, phase: f64) -> Tensor {
    let values: Vec<f64> =
        (0..n * n).map(|i| (phase + i as f64 * 0.31831).cos() / n as f64).collect();
    Tensor::from_vec(&[n, n], values).expect("shape matches values").with_grad()
}

fn bench_matmul(c: &mut Criterion) {
    let a = square(64, 0.0);
    let b = square(64, 1.0);
    c.bench_function("matmul_64x64_with_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let ia = tape.leaf(&a).unwrap();
            let ib = tape.leaf(&b).unwrap();
            let prod = tape.matmul(ia, ib).unwrap();
            let loss = tape.mean_all(prod).unwrap();
            tape.backward(loss).unwrap();
            tape.scalar_value(loss).unwrap()
        })
    });
}

fn bench_encoder_forward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let store = build_params(&cfg, 7).unwrap();
    let feats = features(12, cfg.d_feat, 0.3);
    c.bench_function("encoder_forward_12_frames", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            entlab_core::model::encode(
                &mut tape,
                &store,
                &cfg,
                &feats,
                &entlab_core::model::EncodeOptions::new(CodeMode::Zero, false),
            )
            .unwrap()
        })
    });
}

fn bench_sequence_score(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let store = build_params(&cfg, 7).unwrap();
    let feats = features(12, cfg.d_feat, 0.6);
    let target: Vec<u32> = (0..8).map(|i| FIRST_CONTENT + (i % 4)).chain([EOS]).collect();
    c.bench_function("teacher_forced_score_8_tokens", |bench| {
        bench.iter(|| sequence_logprob(&store, &cfg, &feats, &target, CodeMode::Zero, false).unwrap())
    });
}

fn bench_beam_search(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let store = build_params(&cfg, 7).unwrap();
    let feats = features(12, cfg.d_feat, 0.9);
    let ctx = prepare_decoding(&store, &cfg, &feats, CodeMode::Zero, false).unwrap();
    let spec = BeamSpec { beam_width: 8, n_best: 5, max_len: 12 };
    c.bench_function("beam_search_width_8_len_12", |bench| {
        bench.iter(|| beam_search_with_context(&store, &cfg, &ctx, "bench/0", spec).unwrap())
    });
}

/// One adaptation step: renormalized list loss over five utterances with
/// five hypotheses each, gradients pulled, one Adam update on the code.
fn bench_adaptation_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let mut base = build_params(&cfg, 7).unwrap();
    base.freeze_all();
    let code_name = register_speaker_code(&mut base, &cfg, "bench").unwrap();
    base.set_trainable(&code_name, true).unwrap();

    let feats: Vec<Tensor> = (0..5).map(|i| features(10, cfg.d_feat, i as f64)).collect();
    let lists: Vec<NBestList> = (0..5)
        .map(|u| NBestList {
            utterance_id: format!("bench/{u}"),
            hypotheses: (0..5)
                .map(|h| Hypothesis {
                    tokens: (0..4).map(|t| FIRST_CONTENT + ((u + h + t) % 5) as u32).chain([EOS]).collect(),
                    logprob: -1.0 - h as f64,
                })
                .collect(),
        })
        .collect();

    c.bench_function("entropy_adaptation_step_5x5", |bench| {
        bench.iter(|| {
            let mut store: ParameterStore = base.clone();
            let items: Vec<ListItem> = feats
                .iter()
                .zip(&lists)
                .map(|(f, l)| ListItem { features: f, list: l })
                .collect();
            let opts = LossOptions::new(CodeMode::Named(&code_name), false);
            let mut comp = min_entropy_loss(&store, &cfg, &items, &opts).unwrap();
            store.zero_grads();
            comp.accumulate_grads(&mut store).unwrap();
            let mut adam = Adam::new(1e-2);
            adam.step_named(&mut store, std::slice::from_ref(&code_name)).unwrap();
            comp.value
        })
    });
}

criterion_group!(
    hot_paths,
    bench_matmul,
    bench_encoder_forward,
    bench_sequence_score,
    bench_beam_search,
    bench_adaptation_step
);
criterion_main!(hot_paths);

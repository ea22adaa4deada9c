//! Command implementations. Everything here is callable from tests; the
//! binary only parses arguments and maps failures to exit codes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use entlab_core::adapt::{
    evaluate_speaker, resume_training, run_grid, summary_tsv, train_base, CurveRow, TrainOutcome,
};
use entlab_core::corpus::{generate_corpus, load_corpus, Corpus};
use entlab_core::model::{load_checkpoint, save_checkpoint, CodeMode};
use entlab_core::decode::BeamSpec;
use entlab_core::metrics::{aggregate, AggregateMode, WerBreakdown};
use entlab_core::selfcheck::{run_all, CheckOptions};
use entlab_core::ParameterStore;

use crate::config::ExperimentConfig;
use crate::report;
use crate::Failure;

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Failure::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn gen_corpus(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let manifest = generate_corpus(&cfg.corpus, &cfg.paths.corpus_dir)?;
    println!(
        "wrote {} utterances ({} train + {} test speakers) to {}",
        manifest.n_utterances,
        manifest.train_speakers.len(),
        manifest.test_speakers.len(),
        cfg.paths.corpus_dir.display()
    );
    for (split, count) in &manifest.split_counts {
        println!("  {split}: {count}");
    }
    Ok(())
}

fn load_corpus_checked(cfg: &ExperimentConfig) -> Result<Corpus, Failure> {
    let corpus = load_corpus(&cfg.paths.corpus_dir)?;
    if corpus.manifest.config != cfg.corpus {
        return Err(Failure::Config(format!(
            "corpus at {} was generated from a different corpus config; regenerate it",
            cfg.paths.corpus_dir.display()
        )));
    }
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    completed_steps: usize,
}

fn state_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("state.json")
}

const CURVE_HEADER: &str = "step\ttrain_loss\tdev_accuracy_with_codes\tdev_accuracy_zero_code";

fn curve_tsv(rows: &[CurveRow], with_header: bool) -> String {
    let mut out = String::new();
    if with_header {
        out.push_str(CURVE_HEADER);
        out.push('\n');
    }
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\n",
            r.step, r.train_loss, r.dev_accuracy_with_codes, r.dev_accuracy_zero_code
        ));
    }
    out
}

pub fn train(cfg: &ExperimentConfig, resume: bool) -> Result<(), Failure> {
    let corpus = load_corpus_checked(cfg)?;
    let mut plan = cfg.train.clone();
    plan.seed = entlab_core::seeds::derive_indexed(cfg.seed, &["train"], cfg.train.seed);
    let curve_path = cfg.paths.out_dir.join("training_curve.tsv");

    let outcome: TrainOutcome;
    let start_step;
    if resume {
        let (model_cfg, store) = load_checkpoint(&cfg.paths.checkpoint)?;
        if model_cfg != cfg.model {
            return Err(Failure::Config(
                "checkpoint model config does not match the experiment config".to_string(),
            ));
        }
        let raw = std::fs::read_to_string(state_path(&cfg.paths.checkpoint)).map_err(|e| {
            Failure::Data(format!("cannot read training state next to the checkpoint: {e}"))
        })?;
        let state: TrainState = serde_json::from_str(&raw)
            .map_err(|e| Failure::Data(format!("malformed training state: {e}")))?;
        start_step = state.completed_steps;
        outcome = resume_training(&corpus, &cfg.model, &plan, store, start_step)?;
    } else {
        start_step = 0;
        outcome = train_base(&corpus, &cfg.model, &plan)?;
    }

    save_checkpoint(&outcome.store, &cfg.model, &cfg.paths.checkpoint)?;
    let state = TrainState { completed_steps: plan.steps };
    write_file(
        &state_path(&cfg.paths.checkpoint),
        &serde_json::to_string(&state).expect("state serializes"),
    )?;
    if resume && curve_path.exists() {
        let mut text = std::fs::read_to_string(&curve_path)
            .map_err(|e| Failure::Data(format!("cannot read {}: {e}", curve_path.display())))?;
        text.push_str(&curve_tsv(&outcome.curve, false));
        write_file(&curve_path, &text)?;
    } else {
        write_file(&curve_path, &curve_tsv(&outcome.curve, true))?;
    }

    let last = outcome.curve.last();
    println!(
        "trained steps {}..{} -> {}",
        start_step,
        plan.steps,
        cfg.paths.checkpoint.display()
    );
    if let Some(r) = last {
        println!(
            "final train loss {:.6}, train-dev accuracy {:.4} with codes / {:.4} zero-code",
            r.train_loss, r.dev_accuracy_with_codes, r.dev_accuracy_zero_code
        );
    }
    Ok(())
}

fn load_model(cfg: &ExperimentConfig) -> Result<ParameterStore, Failure> {
    let (model_cfg, store) = load_checkpoint(&cfg.paths.checkpoint)?;
    if model_cfg != cfg.model {
        return Err(Failure::Config(
            "checkpoint model config does not match the experiment config".to_string(),
        ));
    }
    Ok(store)
}

pub fn adapt(cfg: &ExperimentConfig, jobs: usize) -> Result<(), Failure> {
    let corpus = load_corpus_checked(cfg)?;
    let store = load_model(cfg)?;
    let seed = entlab_core::seeds::derive(cfg.seed, &["adapt"]);
    let outcome = run_grid(&corpus, &store, &cfg.model, &cfg.adapt, seed, jobs)?;
    for note in &outcome.aborted {
        eprintln!("warning: adaptation aborted for {note}");
    }
    let summary_path = cfg.paths.out_dir.join("summary.tsv");
    write_file(&summary_path, &summary_tsv(&outcome.summary))?;
    let mut reports = String::new();
    for r in &outcome.reports {
        reports.push_str(&serde_json::to_string(r).expect("report serializes"));
        reports.push('\n');
    }
    write_file(&cfg.paths.out_dir.join("reports.jsonl"), &reports)?;
    println!(
        "wrote {} summary rows and {} speaker reports to {}",
        outcome.summary.len(),
        outcome.reports.len(),
        cfg.paths.out_dir.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let corpus = load_corpus_checked(cfg)?;
    let store = load_model(cfg)?;
    let spec = BeamSpec {
        beam_width: cfg.adapt.beam_width,
        n_best: 1,
        max_len: cfg.adapt.max_decode_len,
    };
    let mut lines = String::from("speaker_id\twer\tsubstitutions\tinsertions\tdeletions\treference_length\n");
    let mut breakdowns: Vec<WerBreakdown> = Vec::new();
    for sid in &corpus.manifest.test_speakers {
        let b = evaluate_speaker(&store, &cfg.model, &corpus, sid, CodeMode::Zero, false, spec)?;
        lines.push_str(&format!(
            "{sid}\t{:.6}\t{}\t{}\t{}\t{}\n",
            b.wer(),
            b.substitutions,
            b.insertions,
            b.deletions,
            b.reference_length
        ));
        breakdowns.push(b);
    }
    write_file(&cfg.paths.out_dir.join("evaluate.tsv"), &lines)?;
    let per_speaker = aggregate(&breakdowns, AggregateMode::PerSpeakerMean)?;
    let pooled = aggregate(&breakdowns, AggregateMode::Pooled)?;
    println!(
        "unadapted test WER over {} speakers: per-speaker mean {:.4}, pooled {:.4}",
        breakdowns.len(),
        per_speaker,
        pooled
    );
    Ok(())
}

pub fn report(
    cfg: &ExperimentConfig,
    summary: Option<&Path>,
    ablations: &[(String, PathBuf)],
) -> Result<(), Failure> {
    let default_path = cfg.paths.out_dir.join("summary.tsv");
    let summary_path = summary.unwrap_or(&default_path);
    let rows = report::read_summary(summary_path)?;

    let mut labeled: Vec<(String, Vec<entlab_core::adapt::SummaryRow>)> =
        vec![("default".to_string(), rows.clone())];
    for (label, path) in ablations {
        labeled.push((label.clone(), report::read_summary(path)?));
    }

    let out = &cfg.paths.out_dir;
    write_file(&out.join("thermometer.csv"), &report::thermometer_csv(&rows))?;
    write_file(&out.join("per_speaker_deltas.csv"), &report::per_speaker_deltas_csv(&rows))?;
    write_file(&out.join("amount_sweep.csv"), &report::amount_sweep_csv(&rows))?;
    write_file(&out.join("injection_ablation.csv"), &report::ablation_csv(&labeled))?;
    println!(
        "wrote thermometer.csv, per_speaker_deltas.csv, amount_sweep.csv, injection_ablation.csv to {}",
        out.display()
    );
    Ok(())
}

pub fn selfcheck(seed: u64, corrupt_op: Option<String>) -> Result<(), Failure> {
    let started = Instant::now();
    let results = run_all(&CheckOptions { seed, corrupt_op })?;
    let mut failed: Vec<String> = Vec::new();
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {}: {}", r.name, r.detail);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    println!(
        "{} of {} checks passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("checks failed: {}", failed.join(", "))))
    }
}

//! Runtime invariant suite: every algebraic identity the losses and the
//! decoder are built on, re-verified on seeded random instances. The CLI
//! exposes this as `selfcheck`; a fresh build must pass everything in well
//! under five minutes on one core.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::decode::{beam_search_with_context, enumerate_outcomes, hyp_order, BeamSpec};
use crate::error::Result;
use crate::gradcheck::{check_store_gradients, op_gradient_reports};
use crate::losses::{
    entropy_decomposition_check, min_entropy_loss, oracle_loss, pseudolabel_loss,
    renormalized_list_loss, ListItem, LossOptions,
};
use crate::metrics::edit_distance_wer;
use crate::model::{
    apply_lora, build_params, cross_from_encoder, encode, prepare_decoding,
    register_speaker_code, sequence_logprob_on_tape, CodeMode, EncodeOptions, ModelConfig,
    TokenId, TokenSequence, EOS, FIRST_CONTENT,
};
use crate::seeds;
use crate::tape::Tape;
use crate::tensor::{ParamGroup, ParameterStore, Tensor};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Observed-vs-expected summary, also filled in on success.
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> CheckResult {
        CheckResult { name: name.to_string(), passed, detail }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Damages the named tape operation's analytic gradient before the op
    /// check runs; negative control for the checker itself.
    pub corrupt_op: Option<String>,
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_encoder_layers: 2,
        n_decoder_layers: 1,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 6,
        d_feat: 4,
        d_code: 3,
        injection_layers: [0, 1].into_iter().collect(),
        lora_rank: 1,
        lora_layers: [1].into_iter().collect(),
        max_positions: 32,
    }
}

fn random_features(rows: usize, d_feat: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let values: Vec<f64> = (0..rows * d_feat).map(|_| normal.sample(&mut rng)).collect();
    Tensor::from_vec(&[rows, d_feat], values).expect("features")
}

/// A store with one trainable speaker code and trainable low-rank factors,
/// both nudged off their fresh initialization so the checked gradients are
/// not trivially zero.
fn adaptation_store(cfg: &ModelConfig, seed: u64) -> Result<(ParameterStore, String)> {
    let mut store = build_params(cfg, seeds::derive(seed, &["params"]))?;
    apply_lora(&mut store, cfg, seeds::derive(seed, &["lora"]))?;
    let code_name = register_speaker_code(&mut store, cfg, "probe")?;
    store.freeze_all();
    store.set_trainable(&code_name, true)?;
    store.set_group_trainable(ParamGroup::Lora, true);
    {
        let code = store.tensor_mut(&code_name)?;
        for (i, v) in code.values_mut().iter_mut().enumerate() {
            *v = 0.05 * (i as f64 + 1.0);
        }
    }
    let lora_b: Vec<String> = store
        .group_names(ParamGroup::Lora)
        .into_iter()
        .filter(|n| n.ends_with("_lora_b"))
        .collect();
    for name in lora_b {
        let t = store.tensor_mut(&name)?;
        for (i, v) in t.values_mut().iter_mut().enumerate() {
            *v = 0.01 * ((i % 7) as f64 - 3.0);
        }
    }
    Ok((store, code_name))
}

fn random_hypotheses(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Vec<TokenSequence> {
    let content = (FIRST_CONTENT as usize..cfg.vocab_size).map(|t| t as TokenId);
    let alphabet: Vec<TokenId> = content.collect();
    let mut seen: Vec<TokenSequence> = Vec::new();
    while seen.len() < n {
        let len = rng.random_range(1..=3);
        let mut toks: TokenSequence =
            (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        toks.push(EOS);
        if !seen.contains(&toks) {
            seen.push(toks);
        }
    }
    seen
}

fn nbest_from(utt: &str, tokens: Vec<TokenSequence>) -> crate::decode::NBestList {
    let mut hyps: Vec<crate::decode::Hypothesis> = tokens
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| crate::decode::Hypothesis {
            tokens,
            logprob: -0.5 * (i as f64 + 1.0),
        })
        .collect();
    hyps.sort_by(hyp_order);
    crate::decode::NBestList { utterance_id: utt.to_string(), hypotheses: hyps }
}

/// Finite differences over every primitive tape operation.
pub fn check_op_gradients(opts: &CheckOptions) -> Result<CheckResult> {
    const TOL: f64 = 1e-6;
    let reports = op_gradient_reports(opts.seed, opts.corrupt_op.as_deref())?;
    let (worst_op, worst) = reports
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, w)| (n.clone(), *w))
        .expect("report list is nonempty");
    let passed = worst < TOL;
    Ok(CheckResult::new(
        "op_gradients",
        passed,
        format!("worst relative error {worst:.3e} at op '{worst_op}' (tolerance {TOL:.0e})"),
    ))
}

fn graded_check<F>(
    base: &ParameterStore,
    names: &[String],
    seed: u64,
    f: F,
) -> Result<(f64, usize)>
where
    F: Fn(&ParameterStore) -> Result<crate::losses::LossComputation>,
{
    let mut probe = base.clone();
    let mut comp = f(&probe)?;
    probe.zero_grads();
    comp.accumulate_grads(&mut probe)?;
    let report = check_store_gradients(&mut probe, names, 6, 1e-5, seed, |s| Ok(f(s)?.value))?;
    Ok((report.worst, report.coords_checked))
}

/// Analytic gradients of all three adaptation losses against central
/// differences, over the speaker code and the low-rank factors. The
/// renormalizer of the list loss is left flowing, so its gradient path is
/// part of what the differences must confirm.
pub fn check_loss_gradients(opts: &CheckOptions) -> Result<CheckResult> {
    const TOL: f64 = 1e-4;
    let cfg = small_config();
    let (store, code_name) = adaptation_store(&cfg, seeds::derive(opts.seed, &["loss_grad"]))?;
    let feats = random_features(3, cfg.d_feat, seeds::derive(opts.seed, &["loss_feats"]));
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(opts.seed, &["loss_hyps"]));
    let list = nbest_from("check/0", random_hypotheses(&mut rng, &cfg, 3));
    let label: TokenSequence = list.hypotheses[0].tokens.clone();
    let lopts = LossOptions { code: CodeMode::Named(&code_name), lora: true, stop_grad_normalizer: false };

    let mut names = vec![code_name.clone()];
    names.extend(store.group_names(ParamGroup::Lora));
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    let mut worst_at = "";

    let label_items = [crate::losses::LabelItem { features: &feats, label: &label }];
    let list_items = [ListItem { features: &feats, list: &list }];
    let cases: [(&str, &dyn Fn(&ParameterStore) -> Result<crate::losses::LossComputation>); 3] = [
        ("pseudolabel", &|s| pseudolabel_loss(s, &cfg, &label_items, &lopts)),
        ("oracle", &|s| oracle_loss(s, &cfg, &label_items, &lopts)),
        ("min_entropy", &|s| min_entropy_loss(s, &cfg, &list_items, &lopts)),
    ];
    for (name, f) in cases {
        let (w, c) = graded_check(&store, &names, seeds::derive(opts.seed, &["probes", name]), f)?;
        coords += c;
        if w > worst {
            worst = w;
            worst_at = name;
        }
    }
    let passed = worst < TOL && coords >= 50;
    Ok(CheckResult::new(
        "loss_gradients",
        passed,
        format!(
            "worst relative error {worst:.3e} on '{worst_at}' over {coords} coordinates \
             (tolerance {TOL:.0e}, need >= 50)"
        ),
    ))
}

/// Conditional-entropy chain rule on a fully enumerable model.
pub fn check_entropy_decomposition(opts: &CheckOptions) -> Result<CheckResult> {
    const TOL: f64 = 1e-10;
    let cfg = small_config();
    let store = build_params(&cfg, seeds::derive(opts.seed, &["decomp"]))?;
    let feats: Vec<Tensor> = (0..3)
        .map(|i| random_features(2 + i, cfg.d_feat, seeds::derive_indexed(opts.seed, &["df"], i as u64)))
        .collect();
    let audio: Vec<(&Tensor, f64)> =
        feats.iter().map(|f| (f, 1.0 / feats.len() as f64)).collect();
    let d = entropy_decomposition_check(&store, &cfg, &audio, CodeMode::Zero, false, 3)?;
    let gap = (d.h_joint - (d.h_cond + d.h_audio)).abs();
    Ok(CheckResult::new(
        "entropy_decomposition",
        gap < TOL,
        format!(
            "|H(q,A) - (H_A(q) + H(p_A))| = {gap:.3e} with H(q,A) = {:.6} (tolerance {TOL:.0e})",
            d.h_joint
        ),
    ))
}

/// A singleton hypothesis list renormalizes to certainty, so the list loss
/// must equal plain cross-entropy on that hypothesis.
pub fn check_singleton_reduction(opts: &CheckOptions) -> Result<CheckResult> {
    const TOL: f64 = 1e-12;
    let cfg = small_config();
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let seed = seeds::derive_indexed(opts.seed, &["singleton"], trial);
        let store = build_params(&cfg, seed)?;
        let feats = random_features(3, cfg.d_feat, seed ^ 0x9e37);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51f1);
        let list = nbest_from("n1/0", random_hypotheses(&mut rng, &cfg, 1));
        let items = [ListItem { features: &feats, list: &list }];
        let opts_l = LossOptions::new(CodeMode::Zero, false);
        let me = min_entropy_loss(&store, &cfg, &items, &opts_l)?.value;
        let label: TokenSequence = list.hypotheses[0].tokens.clone();
        let litems = [crate::losses::LabelItem { features: &feats, label: &label }];
        let ce = pseudolabel_loss(&store, &cfg, &litems, &opts_l)?.value;
        worst = worst.max((me - ce).abs());
    }
    Ok(CheckResult::new(
        "singleton_reduction",
        worst < TOL,
        format!("worst |list loss - cross-entropy| = {worst:.3e} over 100 models (tolerance {TOL:.0e})"),
    ))
}

/// Renormalization cancels any common factor on the list masses, shifting
/// the loss by exactly the log of that factor.
pub fn check_mass_scaling(opts: &CheckOptions) -> Result<CheckResult> {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(opts.seed, &["scaling"]));
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=8);
        let logprobs: Vec<f64> = (0..n).map(|_| -6.0 * rng.random::<f64>() - 0.05).collect();
        let base = renormalized_list_loss(&logprobs);
        for alpha in [0.9f64, 0.5, 0.1] {
            let scaled: Vec<f64> = logprobs.iter().map(|l| l + alpha.ln()).collect();
            let shifted = renormalized_list_loss(&scaled);
            worst = worst.max((shifted - (base - alpha.ln())).abs());
        }
    }
    Ok(CheckResult::new(
        "mass_scaling",
        worst < TOL,
        format!("worst |loss shift + ln(alpha)| = {worst:.3e} (tolerance {TOL:.0e})"),
    ))
}

/// A beam wider than the whole search space must return exactly the
/// enumeration's top hypotheses, in the same order.
pub fn check_beam_vs_enumeration(opts: &CheckOptions) -> Result<CheckResult> {
    const TOL: f64 = 1e-12;
    let cfg = small_config();
    let spec = BeamSpec { beam_width: 32, n_best: 5, max_len: 4 };
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let seed = seeds::derive_indexed(opts.seed, &["beam"], trial);
        let store = build_params(&cfg, seed)?;
        let feats = random_features(3, cfg.d_feat, seed ^ 0x517c);
        let ctx = prepare_decoding(&store, &cfg, &feats, CodeMode::Zero, false)?;
        let beam = beam_search_with_context(&store, &cfg, &ctx, "bve/0", spec)?;
        let mut closed = enumerate_outcomes(&store, &cfg, &ctx, spec.max_len)?.closed;
        closed.sort_by(hyp_order);
        closed.truncate(spec.n_best);
        if beam.hypotheses.len() != closed.len() {
            return Ok(CheckResult::new(
                "beam_vs_enumeration",
                false,
                format!(
                    "trial {trial}: beam returned {} hypotheses, enumeration {}",
                    beam.hypotheses.len(),
                    closed.len()
                ),
            ));
        }
        for (b, e) in beam.hypotheses.iter().zip(&closed) {
            if b.tokens != e.tokens {
                return Ok(CheckResult::new(
                    "beam_vs_enumeration",
                    false,
                    format!("trial {trial}: beam {:?} vs enumeration {:?}", b.tokens, e.tokens),
                ));
            }
            worst = worst.max((b.logprob - e.logprob).abs());
        }
    }
    Ok(CheckResult::new(
        "beam_vs_enumeration",
        worst < TOL,
        format!("top-5 sets identical on 20 models; worst logprob gap {worst:.3e}"),
    ))
}

/// Exhaustive enumeration of monotone alignment scripts; the independent
/// oracle for the edit-distance DP. Minimizes total edits, then insertions
/// plus deletions.
pub fn brute_force_edit_counts(reference: &[TokenId], hypothesis: &[TokenId]) -> (usize, usize, usize) {
    fn walk(
        r: &[TokenId],
        h: &[TokenId],
        i: usize,
        j: usize,
        subs: usize,
        ins: usize,
        dels: usize,
        best: &mut Option<(usize, usize, usize)>,
    ) {
        if i == r.len() && j == h.len() {
            let cand = (subs + ins + dels, ins + dels, subs);
            match best {
                Some((c, id, _)) if (cand.0, cand.1) >= (*c, *id) => {}
                _ => *best = Some((cand.0, cand.1, subs)),
            }
            return;
        }
        if i < r.len() && j < h.len() {
            let s = if r[i] == h[j] { 0 } else { 1 };
            walk(r, h, i + 1, j + 1, subs + s, ins, dels, best);
        }
        if i < r.len() {
            walk(r, h, i + 1, j, subs, ins, dels + 1, best);
        }
        if j < h.len() {
            walk(r, h, i, j + 1, subs, ins + 1, dels, best);
        }
    }
    let mut best = None;
    walk(reference, hypothesis, 0, 0, 0, 0, 0, &mut best);
    let (cost, insdel, subs) = best.expect("empty alignment space is impossible");
    // Recover the split: insertions minus deletions is fixed by the length
    // difference, so insdel and the lengths pin both counts.
    let diff = hypothesis.len() as isize - reference.len() as isize;
    let ins = ((insdel as isize + diff) / 2) as usize;
    let dels = insdel - ins;
    debug_assert_eq!(cost, subs + ins + dels);
    (subs, ins, dels)
}

/// Edit-distance DP against exhaustive alignment enumeration, over every
/// pair of sequences up to length 5 on a 3-token alphabet.
pub fn check_wer_oracle(_opts: &CheckOptions) -> Result<CheckResult> {
    let alphabet: [TokenId; 3] = [FIRST_CONTENT, FIRST_CONTENT + 1, FIRST_CONTENT + 2];
    let mut all: Vec<TokenSequence> = vec![Vec::new()];
    let mut level: Vec<TokenSequence> = vec![Vec::new()];
    for _ in 0..5 {
        let mut next = Vec::with_capacity(level.len() * alphabet.len());
        for s in &level {
            for &t in &alphabet {
                let mut e = s.clone();
                e.push(t);
                next.push(e);
            }
        }
        all.extend(next.iter().cloned());
        level = next;
    }
    let mut pairs = 0usize;
    for r in &all {
        // An empty reference is rejected by contract, not compared.
        if r.is_empty() {
            continue;
        }
        for h in &all {
            let got = edit_distance_wer(r, h)?;
            let (subs, ins, dels) = brute_force_edit_counts(r, h);
            if got.substitutions != subs || got.insertions != ins || got.deletions != dels {
                return Ok(CheckResult::new(
                    "wer_oracle",
                    false,
                    format!(
                        "pair ({r:?}, {h:?}): dp ({}, {}, {}) vs brute force ({subs}, {ins}, {dels})",
                        got.substitutions, got.insertions, got.deletions
                    ),
                ));
            }
            pairs += 1;
        }
    }
    Ok(CheckResult::new(
        "wer_oracle",
        true,
        format!("dp matches exhaustive alignment enumeration on {pairs} pairs"),
    ))
}

/// Zero speaker code must be indistinguishable from disabling injection,
/// and fresh low-rank factors must leave the model untouched.
pub fn check_identity_paths(opts: &CheckOptions) -> Result<CheckResult> {
    const TOL: f64 = 1e-12;
    let cfg = small_config();
    let seed = seeds::derive(opts.seed, &["identity"]);
    let mut store = build_params(&cfg, seed)?;
    let feats = random_features(4, cfg.d_feat, seed ^ 0x77);

    let mut t1 = Tape::new();
    let zero = encode(&mut t1, &store, &cfg, &feats, &EncodeOptions::new(CodeMode::Zero, false))?;
    let mut t2 = Tape::new();
    let off =
        encode(&mut t2, &store, &cfg, &feats, &EncodeOptions::new(CodeMode::Disabled, false))?;
    let code_gap = t1
        .values(zero)
        .iter()
        .zip(t2.values(off))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    apply_lora(&mut store, &cfg, seed ^ 0x1234)?;
    let target: TokenSequence = vec![FIRST_CONTENT, FIRST_CONTENT + 1, EOS];
    let score = |lora: bool| -> Result<f64> {
        let mut tape = Tape::new();
        let enc = encode(&mut tape, &store, &cfg, &feats, &EncodeOptions::new(CodeMode::Zero, lora))?;
        let cross = cross_from_encoder(&mut tape, &store, &cfg, enc)?;
        let lp = sequence_logprob_on_tape(&mut tape, &store, &cfg, &cross, &target)?;
        Ok(tape.values(lp)[0])
    };
    let lora_gap = (score(true)? - score(false)?).abs();

    let passed = code_gap < TOL && lora_gap < TOL;
    Ok(CheckResult::new(
        "identity_paths",
        passed,
        format!(
            "zero-code vs disabled-injection gap {code_gap:.3e}, fresh low-rank score gap \
             {lora_gap:.3e} (tolerance {TOL:.0e})"
        ),
    ))
}

/// Runs every check; order is fixed so reports are comparable across runs.
pub fn run_all(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_op_gradients(opts)?,
        check_loss_gradients(opts)?,
        check_entropy_decomposition(opts)?,
        check_singleton_reduction(opts)?,
        check_mass_scaling(opts)?,
        check_beam_vs_enumeration(opts)?,
        check_wer_oracle(opts)?,
        check_identity_paths(opts)?,
    ])
}

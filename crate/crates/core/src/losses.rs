//! Adaptation objectives over frozen hypothesis sets: cross-entropy against
//! a pseudolabel or reference, and the renormalized list conditional entropy
//! whose normalizer penalizes shifting probability mass off the list.

use crate::decode::{enumerate_outcomes, NBestList};
use crate::error::{Error, Result};
use crate::model::{
    cross_from_encoder, encode, prepare_decoding, sequence_logprob_on_tape, CodeMode,
    EncodeOptions, ModelConfig, TokenId, TokenSequence, EOS,
};
use crate::tape::{Tape, ValueId};
use crate::tensor::{ParameterStore, Tensor};

/// Hypothesis lists whose total mass falls below this are rejected rather
/// than renormalized: dividing by such a Z amplifies noise, not signal.
pub const MASS_GUARD: f64 = 1e-30;

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Total probability mass of a hypothesis list, from log-probabilities.
pub fn list_normalizer(logprobs: &[f64]) -> f64 {
    logsumexp(logprobs).exp()
}

/// Renormalized conditional entropy of one list as a pure function of its
/// sequence log-probabilities: -(1/Z) sum_w q_w ln q_w = -softmax(l)·l.
/// Scaling every probability by a fixed factor in (0,1) raises the value by
/// exactly the negated log of that factor.
pub fn renormalized_list_loss(logprobs: &[f64]) -> f64 {
    let lse = logsumexp(logprobs);
    -logprobs.iter().map(|&l| (l - lse).exp() * l).sum::<f64>()
}

/// One scored utterance: features plus the label sequence to score against.
#[derive(Debug, Clone, Copy)]
pub struct LabelItem<'a> {
    pub features: &'a Tensor,
    pub label: &'a [TokenId],
}

/// One scored utterance: features plus its frozen hypothesis list.
#[derive(Debug, Clone, Copy)]
pub struct ListItem<'a> {
    pub features: &'a Tensor,
    pub list: &'a NBestList,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOptions<'a> {
    pub code: CodeMode<'a>,
    pub lora: bool,
    /// Freeze the normalizer at its current value instead of letting
    /// gradients flow through it. Ablation flag; default off.
    pub stop_grad_normalizer: bool,
}

impl<'a> LossOptions<'a> {
    pub fn new(code: CodeMode<'a>, lora: bool) -> LossOptions<'a> {
        LossOptions { code, lora, stop_grad_normalizer: false }
    }
}

/// A batch loss with its tape kept alive so the caller can run backward.
pub struct LossComputation {
    pub tape: Tape,
    pub loss: ValueId,
    pub value: f64,
    pub per_item: Vec<f64>,
}

impl LossComputation {
    /// Backpropagates and delivers parameter gradients to the store.
    pub fn accumulate_grads(&mut self, store: &mut ParameterStore) -> Result<()> {
        self.tape.backward(self.loss)?;
        self.tape.pull_grads(store)
    }
}

fn ensure_eos(label: &[TokenId]) -> TokenSequence {
    let mut owned = label.to_vec();
    if owned.last() != Some(&EOS) {
        owned.push(EOS);
    }
    owned
}

fn finish_batch(mut tape: Tape, per_ids: Vec<ValueId>) -> Result<LossComputation> {
    let stacked = tape.stack_scalars(&per_ids)?;
    let loss = tape.mean_all(stacked)?;
    let value = tape.scalar_value(loss)?;
    let per_item = per_ids
        .iter()
        .map(|&id| tape.scalar_value(id))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LossComputation { tape, loss, value, per_item })
}

/// Teacher-forced cross-entropy where every utterance carries its own
/// encode options; the training loop uses this to clamp a share of speaker
/// codes to zero within one batch.
pub fn mixed_label_loss(
    store: &ParameterStore,
    cfg: &ModelConfig,
    items: &[(LabelItem, LossOptions)],
) -> Result<LossComputation> {
    if items.is_empty() {
        return Err(Error::contract("adaptation batch is empty"));
    }
    let mut tape = Tape::new();
    let mut per_ids = Vec::with_capacity(items.len());
    for (item, opts) in items {
        let enc_opts = EncodeOptions::new(opts.code, opts.lora);
        let enc = encode(&mut tape, store, cfg, item.features, &enc_opts)?;
        let cross = cross_from_encoder(&mut tape, store, cfg, enc)?;
        let target = ensure_eos(item.label);
        let lp = sequence_logprob_on_tape(&mut tape, store, cfg, &cross, &target)?;
        per_ids.push(tape.scale(lp, -1.0)?);
    }
    finish_batch(tape, per_ids)
}

fn label_cross_entropy(
    store: &ParameterStore,
    cfg: &ModelConfig,
    items: &[LabelItem],
    opts: &LossOptions,
) -> Result<LossComputation> {
    let paired: Vec<(LabelItem, LossOptions)> =
        items.iter().map(|item| (*item, *opts)).collect();
    mixed_label_loss(store, cfg, &paired)
}

/// Mean negated log-probability of each utterance's decoded 1-best label.
pub fn pseudolabel_loss(
    store: &ParameterStore,
    cfg: &ModelConfig,
    items: &[LabelItem],
    opts: &LossOptions,
) -> Result<LossComputation> {
    label_cross_entropy(store, cfg, items, opts)
}

/// Mean negated log-probability of each utterance's true reference; the
/// supervised upper bound on what adaptation can achieve.
pub fn oracle_loss(
    store: &ParameterStore,
    cfg: &ModelConfig,
    items: &[LabelItem],
    opts: &LossOptions,
) -> Result<LossComputation> {
    label_cross_entropy(store, cfg, items, opts)
}

/// Drops exact-duplicate hypotheses, which would double-count mass.
fn dedup_hypotheses(list: &NBestList) -> Vec<&TokenSequence> {
    let mut kept: Vec<&TokenSequence> = Vec::with_capacity(list.hypotheses.len());
    for h in &list.hypotheses {
        if !kept.iter().any(|t| **t == h.tokens) {
            kept.push(&h.tokens);
        }
    }
    kept
}

/// Total current-model probability mass on a hypothesis list, computed in
/// the log domain. Gradient-free; the loss recomputes its own normalizer.
pub fn normalizer_z(
    store: &ParameterStore,
    cfg: &ModelConfig,
    item: &ListItem,
    opts: &LossOptions,
) -> Result<f64> {
    if item.list.hypotheses.is_empty() {
        return Err(Error::contract("hypothesis list is empty"));
    }
    let mut tape = Tape::new();
    let enc_opts = EncodeOptions::new(opts.code, opts.lora);
    let enc = encode(&mut tape, store, cfg, item.features, &enc_opts)?;
    let cross = cross_from_encoder(&mut tape, store, cfg, enc)?;
    let mut logprobs = Vec::new();
    for tokens in dedup_hypotheses(item.list) {
        let lp = sequence_logprob_on_tape(&mut tape, store, cfg, &cross, tokens)?;
        logprobs.push(tape.scalar_value(lp)?);
    }
    let z = list_normalizer(&logprobs);
    if z < MASS_GUARD {
        return Err(Error::DegenerateMass(format!(
            "list mass {z:.3e} for '{}' is below {MASS_GUARD:.0e}",
            item.list.utterance_id
        )));
    }
    if z > 1.0 + 1e-9 {
        return Err(Error::contract(format!(
            "list mass {z} for '{}' exceeds unity",
            item.list.utterance_id
        )));
    }
    Ok(z)
}

/// Mean renormalized conditional entropy over the batch's frozen lists:
/// -(1/|batch|) sum_X (1/Z(X)) sum_w q(w|X) ln q(w|X). Probabilities and
/// normalizers are recomputed from the current parameters on every call, and
/// gradients flow through both unless the stop flag is set.
pub fn min_entropy_loss(
    store: &ParameterStore,
    cfg: &ModelConfig,
    items: &[ListItem],
    opts: &LossOptions,
) -> Result<LossComputation> {
    if items.is_empty() {
        return Err(Error::contract("adaptation batch is empty"));
    }
    let mut tape = Tape::new();
    let mut per_ids = Vec::with_capacity(items.len());
    let enc_opts = EncodeOptions::new(opts.code, opts.lora);
    for item in items {
        if item.list.hypotheses.is_empty() {
            return Err(Error::contract(format!(
                "hypothesis list for '{}' is empty",
                item.list.utterance_id
            )));
        }
        let enc = encode(&mut tape, store, cfg, item.features, &enc_opts)?;
        let cross = cross_from_encoder(&mut tape, store, cfg, enc)?;
        let mut lp_ids = Vec::new();
        for tokens in dedup_hypotheses(item.list) {
            lp_ids.push(sequence_logprob_on_tape(&mut tape, store, cfg, &cross, tokens)?);
        }
        let stacked = tape.stack_scalars(&lp_ids)?;
        let z = list_normalizer(tape.values(stacked));
        if z < MASS_GUARD {
            return Err(Error::DegenerateMass(format!(
                "list mass {z:.3e} for '{}' is below {MASS_GUARD:.0e}",
                item.list.utterance_id
            )));
        }
        let item_loss = if opts.stop_grad_normalizer {
            // -(1/Z0) sum exp(l)·l with Z0 held at its current value.
            let masses = tape.exp(stacked)?;
            let weighted = tape.dot(masses, stacked)?;
            tape.scale(weighted, -1.0 / z)?
        } else {
            let weights = tape.softmax_1d(stacked)?;
            let weighted = tape.dot(weights, stacked)?;
            tape.scale(weighted, -1.0)?
        };
        per_ids.push(item_loss);
    }
    finish_batch(tape, per_ids)
}

/// Exact entropy accounting over a finite toy joint distribution. The joint
/// entropy is computed directly from the joint masses, not via the identity
/// it is later checked against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyDecomposition {
    pub h_joint: f64,
    pub h_cond: f64,
    pub h_audio: f64,
}

fn xlnx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Decomposition from explicit tables: `rows` pairs each audio probability
/// with the full outcome distribution conditioned on that audio.
pub fn decomposition_from_tables(rows: &[(f64, Vec<f64>)]) -> Result<EntropyDecomposition> {
    if rows.is_empty() {
        return Err(Error::contract("decomposition needs at least one audio row"));
    }
    let p_total: f64 = rows.iter().map(|(p, _)| p).sum();
    if (p_total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("audio probabilities sum to {p_total}, want 1")));
    }
    let mut h_joint = 0.0;
    let mut h_cond = 0.0;
    let mut h_audio = 0.0;
    for (p, outcome_masses) in rows {
        if *p < 0.0 {
            return Err(Error::contract("negative audio probability"));
        }
        let q_total: f64 = outcome_masses.iter().sum();
        if (q_total - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "outcome masses sum to {q_total}, want 1"
            )));
        }
        h_audio -= xlnx(*p);
        let row_entropy: f64 = -outcome_masses.iter().map(|&q| xlnx(q)).sum::<f64>();
        h_cond += p * row_entropy;
        h_joint -= outcome_masses.iter().map(|&q| xlnx(p * q)).sum::<f64>();
    }
    Ok(EntropyDecomposition { h_joint, h_cond, h_audio })
}

/// Builds the outcome tables for a toy audio distribution by exhaustive
/// enumeration (closed sequences plus open prefixes at the horizon carry
/// unit mass together) and returns the three entropies.
pub fn entropy_decomposition_check(
    store: &ParameterStore,
    cfg: &ModelConfig,
    audio: &[(&Tensor, f64)],
    code: CodeMode,
    lora: bool,
    max_len: usize,
) -> Result<EntropyDecomposition> {
    let mut rows = Vec::with_capacity(audio.len());
    for (features, p) in audio {
        let ctx = prepare_decoding(store, cfg, features, code, lora)?;
        let outcomes = enumerate_outcomes(store, cfg, &ctx, max_len)?;
        let mut masses: Vec<f64> =
            outcomes.closed.iter().map(|h| h.logprob.exp()).collect();
        masses.extend(outcomes.open.iter().map(|(_, lp)| lp.exp()));
        rows.push((*p, masses));
    }
    decomposition_from_tables(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{beam_search, enumerate_all, BeamSpec, Hypothesis};
    use crate::model::{apply_lora, build_params, register_speaker_code};
    use crate::tensor::ParamGroup;
    use rand::distr::{Distribution, StandardUniform};
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = 0.6931471805599453;
    const NEG_LN_02: f64 = 1.6094379124341003;
    const NEG_LN_025: f64 = 1.3862943611198906;

    fn tiny_config() -> ModelConfig {
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
            max_positions: 16,
        }
    }

    fn random_features(cfg: &ModelConfig, frames: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..frames * cfg.d_feat)
            .map(|_| {
                let u: f64 = StandardUniform.sample(&mut rng);
                2.0 * u - 1.0
            })
            .collect();
        Tensor::from_vec(&[frames, cfg.d_feat], values).expect("shape matches")
    }

    fn fixture(seed: u64) -> (ModelConfig, ParameterStore, Tensor) {
        let cfg = tiny_config();
        let mut store = build_params(&cfg, seed).expect("params build");
        apply_lora(&mut store, &cfg, seed.wrapping_add(1)).expect("low-rank factors");
        let features = random_features(&cfg, 3, seed.wrapping_add(2));
        (cfg, store, features)
    }

    #[test]
    fn hand_evaluations_match() {
        let half = [0.5f64.ln(), 0.5f64.ln()];
        assert!((renormalized_list_loss(&half) - LN_2).abs() < 1e-12);
        let fifth = [0.2f64.ln(), 0.2f64.ln()];
        assert!((renormalized_list_loss(&fifth) - NEG_LN_02).abs() < 1e-12);
        let quarter = [0.25f64.ln()];
        assert!((renormalized_list_loss(&quarter) - NEG_LN_025).abs() < 1e-12);

        assert!((list_normalizer(&[0.3f64.ln()]) - 0.3).abs() < 1e-12);
        assert!((list_normalizer(&fifth) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn scaling_mass_down_raises_the_loss_by_minus_ln_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = 1 + (rng.next_u32() as usize % 6);
            let logprobs: Vec<f64> = (0..n)
                .map(|_| {
                    let u: f64 = StandardUniform.sample(&mut rng);
                    -8.0 * u - 0.05
                })
                .collect();
            let base = renormalized_list_loss(&logprobs);
            for alpha in [0.9f64, 0.5, 0.1] {
                let scaled: Vec<f64> = logprobs.iter().map(|l| l + alpha.ln()).collect();
                let shifted = renormalized_list_loss(&scaled);
                assert!(
                    (shifted - base + alpha.ln()).abs() < 1e-10,
                    "alpha {alpha}: {shifted} vs {base}"
                );
            }
        }
    }

    #[test]
    fn list_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..200 {
            let n = 1 + (rng.next_u32() as usize % 8);
            let logprobs: Vec<f64> = (0..n)
                .map(|_| {
                    let u: f64 = StandardUniform.sample(&mut rng);
                    -30.0 * u
                })
                .collect();
            assert!(renormalized_list_loss(&logprobs) >= 0.0);
        }
    }

    #[test]
    fn singleton_list_reduces_to_pseudolabel_cross_entropy() {
        for seed in [5u64, 6, 7] {
            let (cfg, store, features) = fixture(seed);
            let spec = BeamSpec { beam_width: 4, n_best: 1, max_len: 5 };
            let list = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u", spec)
                .expect("beam");
            let opts = LossOptions::new(CodeMode::Zero, false);
            let ent = min_entropy_loss(
                &store,
                &cfg,
                &[ListItem { features: &features, list: &list }],
                &opts,
            )
            .expect("entropy loss");
            let pl = pseudolabel_loss(
                &store,
                &cfg,
                &[LabelItem { features: &features, label: &list.hypotheses[0].tokens }],
                &opts,
            )
            .expect("pseudolabel loss");
            assert!(
                (ent.value - pl.value).abs() <= 1e-12,
                "seed {seed}: {} vs {}",
                ent.value,
                pl.value
            );
        }
    }

    #[test]
    fn empty_batches_are_rejected() {
        let (cfg, store, _) = fixture(9);
        let opts = LossOptions::new(CodeMode::Zero, false);
        assert!(pseudolabel_loss(&store, &cfg, &[], &opts).is_err());
        assert!(min_entropy_loss(&store, &cfg, &[], &opts).is_err());
    }

    #[test]
    fn normalizer_matches_summed_hypothesis_masses() {
        let (cfg, store, features) = fixture(10);
        let spec = BeamSpec { beam_width: 8, n_best: 5, max_len: 4 };
        let list = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u", spec)
            .expect("beam");
        let opts = LossOptions::new(CodeMode::Zero, false);
        let z = normalizer_z(&store, &cfg, &ListItem { features: &features, list: &list }, &opts)
            .expect("normalizer");
        let direct: f64 = list.hypotheses.iter().map(|h| h.logprob.exp()).sum();
        assert!((z - direct).abs() < 1e-12, "{z} vs {direct}");
        assert!(z > 0.0 && z <= 1.0 + 1e-9);
    }

    #[test]
    fn full_coverage_list_has_unit_normalizer() {
        let (cfg, store, features) = fixture(11);
        let all = enumerate_all(&store, &cfg, &features, CodeMode::Zero, false, "u", 3)
            .expect("enumeration");
        let opts = LossOptions::new(CodeMode::Zero, false);
        let z = normalizer_z(&store, &cfg, &ListItem { features: &features, list: &all }, &opts)
            .expect("normalizer");
        let open_mass = {
            let ctx = prepare_decoding(&store, &cfg, &features, CodeMode::Zero, false)
                .expect("ctx");
            enumerate_outcomes(&store, &cfg, &ctx, 3).expect("outcomes").open_mass()
        };
        assert!((z + open_mass - 1.0).abs() < 1e-9, "z {z} + open {open_mass}");
    }

    #[test]
    fn degenerate_mass_is_rejected() {
        let (cfg, mut store, features) = fixture(12);
        // With the terminator this dominant, content-bearing hypotheses
        // carry mass far below the guard.
        boost_eos(&mut store, 80.0);
        let list = NBestList {
            utterance_id: "u".to_string(),
            hypotheses: vec![Hypothesis { tokens: vec![3, 3, EOS], logprob: -160.0 }],
        };
        let opts = LossOptions::new(CodeMode::Zero, false);
        let item = ListItem { features: &features, list: &list };
        assert!(matches!(
            normalizer_z(&store, &cfg, &item, &opts),
            Err(Error::DegenerateMass(_))
        ));
        assert!(matches!(
            min_entropy_loss(&store, &cfg, &[item], &opts),
            Err(Error::DegenerateMass(_))
        ));
    }

    #[test]
    fn duplicates_do_not_double_count() {
        let (cfg, store, features) = fixture(13);
        let spec = BeamSpec { beam_width: 4, n_best: 2, max_len: 4 };
        let list = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u", spec)
            .expect("beam");
        let mut doubled = list.clone();
        doubled.hypotheses.push(list.hypotheses[0].clone());
        let opts = LossOptions::new(CodeMode::Zero, false);
        let a = min_entropy_loss(
            &store,
            &cfg,
            &[ListItem { features: &features, list: &list }],
            &opts,
        )
        .expect("loss");
        let b = min_entropy_loss(
            &store,
            &cfg,
            &[ListItem { features: &features, list: &doubled }],
            &opts,
        )
        .expect("loss");
        assert!((a.value - b.value).abs() < 1e-12);
    }

    /// Boosting the EOS output bias makes open mass vanish, so the closed
    /// enumeration carries effectively all probability.
    fn boost_eos(store: &mut ParameterStore, boost: f64) {
        let bias = store.tensor_mut("decoder/output/b").expect("output bias");
        bias.values_mut()[EOS as usize] += boost;
    }

    #[test]
    fn full_support_list_loss_equals_exact_conditional_entropy() {
        let (cfg, mut store, features) = fixture(14);
        boost_eos(&mut store, 14.0);
        let all = enumerate_all(&store, &cfg, &features, CodeMode::Zero, false, "u", 5)
            .expect("enumeration");
        let opts = LossOptions::new(CodeMode::Zero, false);
        let loss = min_entropy_loss(
            &store,
            &cfg,
            &[ListItem { features: &features, list: &all }],
            &opts,
        )
        .expect("loss");
        let decomp = entropy_decomposition_check(
            &store,
            &cfg,
            &[(&features, 1.0)],
            CodeMode::Zero,
            false,
            5,
        )
        .expect("decomposition");
        assert!(
            (loss.value - decomp.h_cond).abs() < 1e-8,
            "{} vs {}",
            loss.value,
            decomp.h_cond
        );
    }

    #[test]
    fn table_decomposition_identities() {
        let uniform = decomposition_from_tables(&[(1.0, vec![0.25; 4])]).expect("tables");
        assert!(uniform.h_audio.abs() < 1e-12);
        assert!((uniform.h_joint - uniform.h_cond).abs() < 1e-12);
        assert!((uniform.h_cond - 4.0f64.ln()).abs() < 1e-12);

        let deterministic = decomposition_from_tables(&[
            (0.5, vec![1.0, 0.0, 0.0]),
            (0.5, vec![0.0, 0.0, 1.0]),
        ])
        .expect("tables");
        assert!(deterministic.h_cond.abs() < 1e-12);
        assert!((deterministic.h_joint - deterministic.h_audio).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let n_audio = 2 + (rng.next_u32() as usize % 3);
            let n_out = 2 + (rng.next_u32() as usize % 5);
            let mut p: Vec<f64> = (0..n_audio)
                .map(|_| StandardUniform.sample(&mut rng))
                .map(|u: f64| u + 0.01)
                .collect();
            let pt: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= pt);
            let rows: Vec<(f64, Vec<f64>)> = p
                .iter()
                .map(|&pi| {
                    let mut q: Vec<f64> = (0..n_out)
                        .map(|_| StandardUniform.sample(&mut rng))
                        .map(|u: f64| u + 0.01)
                        .collect();
                    let qt: f64 = q.iter().sum();
                    q.iter_mut().for_each(|v| *v /= qt);
                    (pi, q)
                })
                .collect();
            let d = decomposition_from_tables(&rows).expect("tables");
            assert!(
                (d.h_joint - d.h_cond - d.h_audio).abs() < 1e-12,
                "{} vs {} + {}",
                d.h_joint,
                d.h_cond,
                d.h_audio
            );
        }
    }

    #[test]
    fn model_decomposition_identity_holds() {
        let (cfg, store, _) = fixture(15);
        let f0 = random_features(&cfg, 3, 101);
        let f1 = random_features(&cfg, 4, 102);
        let f2 = random_features(&cfg, 2, 103);
        let audio = [(&f0, 0.5), (&f1, 0.3), (&f2, 0.2)];
        let d = entropy_decomposition_check(&store, &cfg, &audio, CodeMode::Zero, false, 3)
            .expect("decomposition");
        assert!(
            (d.h_joint - d.h_cond - d.h_audio).abs() < 1e-10,
            "{} vs {} + {}",
            d.h_joint,
            d.h_cond,
            d.h_audio
        );
        assert!(d.h_cond >= 0.0 && d.h_audio >= 0.0);
    }

    /// Configures the store the way adaptation does: everything frozen
    /// except a fresh speaker code and the low-rank factors.
    fn adaptation_store(seed: u64) -> (ModelConfig, ParameterStore, Tensor, String) {
        let (cfg, mut store, features) = fixture(seed);
        let code_name = register_speaker_code(&mut store, &cfg, "probe").expect("code");
        store.freeze_all();
        store.set_group_trainable(ParamGroup::SpeakerCode, true);
        store.set_group_trainable(ParamGroup::Lora, true);
        // Fresh adaptation tensors sit at stationary points (a zero code,
        // and zero B factors that null the A gradients); nudge both so the
        // finite-difference comparison probes nontrivial derivatives.
        {
            let t = store.tensor_mut(&code_name).expect("code tensor");
            for (i, v) in t.values_mut().iter_mut().enumerate() {
                *v = 0.05 * (i as f64 + 1.0);
            }
        }
        for name in store.group_names(ParamGroup::Lora) {
            if name.ends_with("_lora_b") {
                let t = store.tensor_mut(&name).expect("low-rank factor");
                for (i, v) in t.values_mut().iter_mut().enumerate() {
                    *v = 0.01 * ((i % 7) as f64 - 3.0);
                }
            }
        }
        (cfg, store, features, code_name)
    }

    fn adapted_names(store: &ParameterStore) -> Vec<String> {
        let mut names = store.group_names(ParamGroup::SpeakerCode);
        names.extend(store.group_names(ParamGroup::Lora));
        names
    }

    #[test]
    fn label_loss_gradients_match_finite_differences() {
        let (cfg, mut store, features, code_name) = adaptation_store(21);
        let spec = BeamSpec { beam_width: 4, n_best: 1, max_len: 5 };
        let list = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u", spec)
            .expect("beam");
        let label = list.hypotheses[0].tokens.clone();
        let opts = LossOptions::new(CodeMode::Named(&code_name), true);
        let mut comp = pseudolabel_loss(
            &store,
            &cfg,
            &[LabelItem { features: &features, label: &label }],
            &opts,
        )
        .expect("loss");
        comp.accumulate_grads(&mut store).expect("grads");
        let names = adapted_names(&store);
        let report = crate::gradcheck::check_store_gradients(
            &mut store,
            &names,
            8,
            1e-5,
            77,
            |s| {
                let opts = LossOptions::new(CodeMode::Named(&code_name), true);
                Ok(pseudolabel_loss(
                    s,
                    &cfg,
                    &[LabelItem { features: &features, label: &label }],
                    &opts,
                )?
                .value)
            },
        )
        .expect("gradient check");
        assert!(report.worst < 1e-4, "worst {}", report.worst);
    }

    #[test]
    fn entropy_loss_gradients_match_finite_differences() {
        let (cfg, mut store, features, code_name) = adaptation_store(22);
        let spec = BeamSpec { beam_width: 8, n_best: 5, max_len: 5 };
        let list = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u", spec)
            .expect("beam");
        let opts = LossOptions::new(CodeMode::Named(&code_name), true);
        let mut comp = min_entropy_loss(
            &store,
            &cfg,
            &[ListItem { features: &features, list: &list }],
            &opts,
        )
        .expect("loss");
        comp.accumulate_grads(&mut store).expect("grads");
        let names = adapted_names(&store);
        let report = crate::gradcheck::check_store_gradients(
            &mut store,
            &names,
            8,
            1e-5,
            78,
            |s| {
                let opts = LossOptions::new(CodeMode::Named(&code_name), true);
                Ok(min_entropy_loss(
                    s,
                    &cfg,
                    &[ListItem { features: &features, list: &list }],
                    &opts,
                )?
                .value)
            },
        )
        .expect("gradient check");
        assert!(report.worst < 1e-4, "worst {}", report.worst);
    }

    #[test]
    fn stopped_normalizer_gradients_match_their_own_objective() {
        let (cfg, mut store, features, code_name) = adaptation_store(23);
        let spec = BeamSpec { beam_width: 8, n_best: 5, max_len: 5 };
        let list = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u", spec)
            .expect("beam");
        let mut opts = LossOptions::new(CodeMode::Named(&code_name), true);
        opts.stop_grad_normalizer = true;
        let mut comp = min_entropy_loss(
            &store,
            &cfg,
            &[ListItem { features: &features, list: &list }],
            &opts,
        )
        .expect("loss");
        comp.accumulate_grads(&mut store).expect("grads");

        // The frozen-normalizer objective as a pure function: divide the
        // weighted mass sum at perturbed parameters by the base-point Z.
        let z0 = normalizer_z(
            &store,
            &cfg,
            &ListItem { features: &features, list: &list },
            &LossOptions::new(CodeMode::Named(&code_name), true),
        )
        .expect("normalizer");
        let names = adapted_names(&store);
        let report = crate::gradcheck::check_store_gradients(
            &mut store,
            &names,
            6,
            1e-5,
            79,
            |s| {
                let mut tape = Tape::new();
                let enc_opts =
                    EncodeOptions::new(CodeMode::Named(&code_name), true);
                let enc = encode(&mut tape, s, &cfg, &features, &enc_opts)?;
                let cross = cross_from_encoder(&mut tape, s, &cfg, enc)?;
                let mut sum = 0.0;
                for tokens in dedup_hypotheses(&list) {
                    let lp = sequence_logprob_on_tape(&mut tape, s, &cfg, &cross, tokens)?;
                    let l = tape.scalar_value(lp)?;
                    sum += l.exp() * l;
                }
                Ok(-sum / z0)
            },
        )
        .expect("gradient check");
        assert!(report.worst < 1e-4, "worst {}", report.worst);

        // The normalizer path must actually contribute: gradients under the
        // two flags differ even though the loss values can coincide.
        let stopped: Vec<f64> = store
            .tensor(&code_name)
            .expect("code")
            .grad()
            .expect("gradient")
            .to_vec();
        store.zero_grads();
        let mut full = min_entropy_loss(
            &store,
            &cfg,
            &[ListItem { features: &features, list: &list }],
            &LossOptions::new(CodeMode::Named(&code_name), true),
        )
        .expect("loss");
        full.accumulate_grads(&mut store).expect("grads");
        let flowing: Vec<f64> = store
            .tensor(&code_name)
            .expect("code")
            .grad()
            .expect("gradient")
            .to_vec();
        let gap = stopped
            .iter()
            .zip(&flowing)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(gap > 1e-12, "normalizer path contributed nothing");
    }

    #[test]
    fn oracle_loss_is_nonnegative_and_matches_pseudolabel_on_same_target() {
        let (cfg, store, features) = fixture(24);
        let spec = BeamSpec { beam_width: 4, n_best: 1, max_len: 5 };
        let list = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u", spec)
            .expect("beam");
        let label = list.hypotheses[0].tokens.clone();
        let opts = LossOptions::new(CodeMode::Zero, false);
        let a = oracle_loss(
            &store,
            &cfg,
            &[LabelItem { features: &features, label: &label }],
            &opts,
        )
        .expect("oracle");
        let b = pseudolabel_loss(
            &store,
            &cfg,
            &[LabelItem { features: &features, label: &label }],
            &opts,
        )
        .expect("pseudolabel");
        assert!(a.value >= 0.0);
        assert!((a.value - b.value).abs() < 1e-15);
    }

    #[test]
    fn labels_without_terminators_are_closed_before_scoring() {
        let (cfg, store, features) = fixture(25);
        let opts = LossOptions::new(CodeMode::Zero, false);
        let bare: TokenSequence = vec![3, 4];
        let closed: TokenSequence = vec![3, 4, EOS];
        let a = oracle_loss(
            &store,
            &cfg,
            &[LabelItem { features: &features, label: &bare }],
            &opts,
        )
        .expect("bare");
        let b = oracle_loss(
            &store,
            &cfg,
            &[LabelItem { features: &features, label: &closed }],
            &opts,
        )
        .expect("closed");
        assert!((a.value - b.value).abs() < 1e-15);
    }
}

//! Beam-search decoding into N-best lists, plus exhaustive enumeration for
//! small vocabularies. Scores are raw sequence log-probabilities with no
//! length normalization, so downstream mass computations stay meaningful.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    prepare_decoding, step_logprobs, CodeMode, DecodingContext, ModelConfig, TokenId,
    TokenSequence, EOS, FIRST_CONTENT,
};
use crate::tensor::{ParameterStore, Tensor};

/// One decoded candidate. Tokens always end with EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub logprob: f64,
}

/// Ordering used everywhere hypotheses are ranked: higher logprob first,
/// ties broken token-lexicographically so runs are reproducible.
pub fn hyp_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens))
}

fn prefix_order(a: &(TokenSequence, f64), b: &(TokenSequence, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utterance_id: String,
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    pub fn validate(&self) -> Result<()> {
        if self.hypotheses.is_empty() {
            return Err(Error::contract(format!(
                "empty hypothesis list for utterance '{}'",
                self.utterance_id
            )));
        }
        let mut seen: BTreeSet<&[TokenId]> = BTreeSet::new();
        for (i, h) in self.hypotheses.iter().enumerate() {
            if h.tokens.last() != Some(&EOS) {
                return Err(Error::contract(format!(
                    "hypothesis {i} of '{}' is not EOS-terminated",
                    self.utterance_id
                )));
            }
            if h.tokens[..h.tokens.len() - 1].iter().any(|&t| t < FIRST_CONTENT) {
                return Err(Error::contract(format!(
                    "hypothesis {i} of '{}' has a control token in its body",
                    self.utterance_id
                )));
            }
            if !h.logprob.is_finite() || h.logprob > 0.0 {
                return Err(Error::contract(format!(
                    "hypothesis {i} of '{}' has log-probability {}",
                    self.utterance_id, h.logprob
                )));
            }
            if i > 0 && self.hypotheses[i - 1].logprob < h.logprob {
                return Err(Error::contract(format!(
                    "hypotheses of '{}' are not in descending order at {i}",
                    self.utterance_id
                )));
            }
            if !seen.insert(&h.tokens) {
                return Err(Error::contract(format!(
                    "duplicate hypothesis in '{}'",
                    self.utterance_id
                )));
            }
        }
        Ok(())
    }
}

/// Beam-search shape: `max_len` counts tokens including the closing EOS, so
/// content may run to `max_len - 1` before the forced close.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec {
    pub beam_width: usize,
    pub n_best: usize,
    pub max_len: usize,
}

impl Default for BeamSpec {
    fn default() -> BeamSpec {
        BeamSpec { beam_width: 8, n_best: 5, max_len: 12 }
    }
}

impl BeamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_best == 0 || self.beam_width < self.n_best {
            return Err(Error::contract(format!(
                "beam width {} and list size {} must satisfy width >= size >= 1",
                self.beam_width, self.n_best
            )));
        }
        if self.max_len == 0 {
            return Err(Error::contract("beam search needs max_len >= 1"));
        }
        Ok(())
    }
}

pub fn beam_search(
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    code: CodeMode,
    lora: bool,
    utterance_id: &str,
    spec: BeamSpec,
) -> Result<NBestList> {
    let ctx = prepare_decoding(store, cfg, features, code, lora)?;
    beam_search_with_context(store, cfg, &ctx, utterance_id, spec)
}

/// Length-unnormalized beam search. Every prefix the beam visits contributes
/// its EOS closure to a completed pool that is never pruned; unfinished beams
/// at the length limit are force-closed the same way, so all returned masses
/// are genuine sequence probabilities.
pub fn beam_search_with_context(
    store: &ParameterStore,
    cfg: &ModelConfig,
    ctx: &DecodingContext,
    utterance_id: &str,
    spec: BeamSpec,
) -> Result<NBestList> {
    spec.validate()?;
    let content_budget = spec.max_len - 1;
    let content: Vec<TokenId> = (FIRST_CONTENT..cfg.vocab_size as TokenId).collect();
    let mut frontier: Vec<(TokenSequence, f64)> = vec![(Vec::new(), 0.0)];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for depth in 0..=content_budget {
        let mut children: Vec<(TokenSequence, f64)> = Vec::new();
        for (prefix, lp) in &frontier {
            let row = step_logprobs(store, cfg, ctx, prefix)?;
            let mut closed = prefix.clone();
            closed.push(EOS);
            completed.push(Hypothesis { tokens: closed, logprob: lp + row[EOS as usize] });
            if depth < content_budget {
                for &t in &content {
                    let mut ext = prefix.clone();
                    ext.push(t);
                    children.push((ext, lp + row[t as usize]));
                }
            }
        }
        if depth == content_budget {
            break;
        }
        children.sort_by(prefix_order);
        children.truncate(spec.beam_width);
        frontier = children;
    }
    completed.sort_by(hyp_order);
    // Visited prefixes are distinct, so closures are too; dedup is a guard.
    completed.dedup_by(|a, b| a.tokens == b.tokens);
    completed.truncate(spec.n_best);
    let list = NBestList { utterance_id: utterance_id.to_string(), hypotheses: completed };
    list.validate()?;
    Ok(list)
}

/// Exhaustive expansion of the outcome tree to a fixed horizon. The closed
/// and open parts partition unit probability mass: every step distribution
/// sums to one over content tokens plus EOS.
pub struct EnumeratedOutcomes {
    /// All EOS-terminated sequences of total length <= max(max_len, 1),
    /// sorted by descending logprob.
    pub closed: Vec<Hypothesis>,
    /// Unterminated prefixes at the horizon with their prefix log-masses.
    pub open: Vec<(TokenSequence, f64)>,
}

impl EnumeratedOutcomes {
    pub fn closed_mass(&self) -> f64 {
        self.closed.iter().map(|h| h.logprob.exp()).sum()
    }

    pub fn open_mass(&self) -> f64 {
        self.open.iter().map(|(_, lp)| lp.exp()).sum()
    }
}

pub fn enumerate_outcomes(
    store: &ParameterStore,
    cfg: &ModelConfig,
    ctx: &DecodingContext,
    max_len: usize,
) -> Result<EnumeratedOutcomes> {
    if (cfg.vocab_size as f64).powi(max_len as i32) > 1e6 {
        return Err(Error::Resource(format!(
            "enumerating vocabulary {} to length {max_len} exceeds the 1e6-sequence budget",
            cfg.vocab_size
        )));
    }
    let content_budget = max_len.saturating_sub(1);
    let content: Vec<TokenId> = (FIRST_CONTENT..cfg.vocab_size as TokenId).collect();
    let mut closed: Vec<Hypothesis> = Vec::new();
    let mut open: Vec<(TokenSequence, f64)> = Vec::new();
    let mut level: Vec<(TokenSequence, f64)> = vec![(Vec::new(), 0.0)];
    for depth in 0..=content_budget {
        let mut next: Vec<(TokenSequence, f64)> = Vec::new();
        for (prefix, lp) in &level {
            let row = step_logprobs(store, cfg, ctx, prefix)?;
            let mut seq = prefix.clone();
            seq.push(EOS);
            closed.push(Hypothesis { tokens: seq, logprob: lp + row[EOS as usize] });
            for &t in &content {
                let mut ext = prefix.clone();
                ext.push(t);
                let child = (ext, lp + row[t as usize]);
                if depth == content_budget {
                    open.push(child);
                } else {
                    next.push(child);
                }
            }
        }
        level = next;
    }
    closed.sort_by(hyp_order);
    open.sort_by(prefix_order);
    Ok(EnumeratedOutcomes { closed, open })
}

/// Every EOS-terminated sequence the decoder can emit within `max_len`
/// tokens, scored exactly and sorted. Test oracle for beam search and for
/// full-support entropy identities.
pub fn enumerate_all(
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    code: CodeMode,
    lora: bool,
    utterance_id: &str,
    max_len: usize,
) -> Result<NBestList> {
    let ctx = prepare_decoding(store, cfg, features, code, lora)?;
    let outcomes = enumerate_outcomes(store, cfg, &ctx, max_len)?;
    let list = NBestList { utterance_id: utterance_id.to_string(), hypotheses: outcomes.closed };
    list.validate()?;
    Ok(list)
}

#[derive(Serialize, Deserialize)]
struct NBestRecord {
    utterance_id: String,
    rank: usize,
    logprob: f64,
    tokens: TokenSequence,
}

/// Debug dump: one JSON line per hypothesis, rank 0 first per utterance.
pub fn write_nbest_jsonl<W: Write>(out: &mut W, lists: &[NBestList]) -> Result<()> {
    for list in lists {
        for (rank, h) in list.hypotheses.iter().enumerate() {
            let record = NBestRecord {
                utterance_id: list.utterance_id.clone(),
                rank,
                logprob: h.logprob,
                tokens: h.tokens.clone(),
            };
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_nbest_jsonl<R: BufRead>(input: R) -> Result<Vec<NBestList>> {
    let mut lists: Vec<NBestList> = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: NBestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("hypothesis line {}: {e}", idx + 1)))?;
        let hyp = Hypothesis { tokens: record.tokens, logprob: record.logprob };
        match lists.last_mut() {
            Some(list) if list.utterance_id == record.utterance_id => {
                if record.rank != list.hypotheses.len() {
                    return Err(Error::data(format!(
                        "hypothesis line {}: rank {} breaks the 0..n order",
                        idx + 1,
                        record.rank
                    )));
                }
                list.hypotheses.push(hyp);
            }
            _ => {
                if record.rank != 0 {
                    return Err(Error::data(format!(
                        "hypothesis line {}: new utterance must start at rank 0",
                        idx + 1
                    )));
                }
                lists.push(NBestList {
                    utterance_id: record.utterance_id,
                    hypotheses: vec![hyp],
                });
            }
        }
    }
    for list in &lists {
        list.validate()?;
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_params, sequence_logprob};
    use rand::distr::{Distribution, StandardUniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    fn fixture() -> (ModelConfig, ParameterStore, Tensor) {
        let cfg = tiny_config();
        let mut store = build_params(&cfg, 11).expect("params build");
        crate::model::apply_lora(&mut store, &cfg, 13).expect("low-rank factors");
        let features = random_features(&cfg, 3, 12);
        (cfg, store, features)
    }

    #[test]
    fn wide_beam_matches_enumeration() {
        let (cfg, store, features) = fixture();
        // 3 content tokens, depth limit 3: the frontier peaks at 27, so a
        // beam of 27 visits every prefix and the search is exhaustive.
        let spec = BeamSpec { beam_width: 27, n_best: 5, max_len: 4 };
        let beam = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u0", spec)
            .expect("beam");
        let all = enumerate_all(&store, &cfg, &features, CodeMode::Zero, false, "u0", 4)
            .expect("enumeration");
        assert_eq!(all.hypotheses.len(), 40);
        for (b, e) in beam.hypotheses.iter().zip(&all.hypotheses) {
            assert_eq!(b.tokens, e.tokens);
            assert!((b.logprob - e.logprob).abs() < 1e-12);
        }
        let one = BeamSpec { beam_width: 27, n_best: 1, max_len: 4 };
        let best = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u0", one)
            .expect("beam");
        assert_eq!(best.hypotheses[0].tokens, all.hypotheses[0].tokens);
    }

    #[test]
    fn zero_length_budget_yields_bare_eos() {
        let (cfg, store, features) = fixture();
        let all = enumerate_all(&store, &cfg, &features, CodeMode::Zero, false, "u0", 0)
            .expect("enumeration");
        assert_eq!(all.hypotheses.len(), 1);
        assert_eq!(all.hypotheses[0].tokens, vec![EOS]);
    }

    #[test]
    fn closed_and_open_masses_partition_unity() {
        let (cfg, store, features) = fixture();
        let ctx = prepare_decoding(&store, &cfg, &features, CodeMode::Zero, false).expect("ctx");
        let outcomes = enumerate_outcomes(&store, &cfg, &ctx, 3).expect("enumeration");
        assert_eq!(outcomes.closed.len(), 1 + 3 + 9);
        assert_eq!(outcomes.open.len(), 27);
        let total = outcomes.closed_mass() + outcomes.open_mass();
        assert!((total - 1.0).abs() < 1e-9, "mass {total}");
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let (cfg, store, features) = fixture();
        let err = enumerate_all(&store, &cfg, &features, CodeMode::Zero, false, "u0", 9)
            .expect_err("budget");
        assert!(matches!(err, Error::Resource(_)));
    }

    #[test]
    fn wider_beams_never_lose_the_best_hypothesis() {
        let (cfg, store, features) = fixture();
        let mut last_best = f64::NEG_INFINITY;
        for width in [1usize, 2, 4, 8, 16] {
            let spec = BeamSpec { beam_width: width, n_best: 1, max_len: 4 };
            let list = beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u0", spec)
                .expect("beam");
            let best = list.hypotheses[0].logprob;
            assert!(best >= last_best - 1e-12, "width {width}: {best} < {last_best}");
            last_best = best;
        }
    }

    #[test]
    fn beam_scores_match_the_sequence_scorer() {
        let (cfg, store, features) = fixture();
        let list = beam_search(
            &store,
            &cfg,
            &features,
            CodeMode::Zero,
            false,
            "u0",
            BeamSpec { beam_width: 8, n_best: 5, max_len: 5 },
        )
        .expect("beam");
        for h in &list.hypotheses {
            let lp = sequence_logprob(&store, &cfg, &features, &h.tokens, CodeMode::Zero, false)
                .expect("score");
            assert!((h.logprob - lp).abs() < 1e-9, "{} vs {lp}", h.logprob);
        }
    }

    #[test]
    fn repeated_searches_are_identical() {
        let (cfg, store, features) = fixture();
        let spec = BeamSpec::default();
        let a = beam_search(&store, &cfg, &features, CodeMode::Zero, true, "u0", spec)
            .expect("beam");
        let b = beam_search(&store, &cfg, &features, CodeMode::Zero, true, "u0", spec)
            .expect("beam");
        assert_eq!(a, b);
    }

    #[test]
    fn spec_preconditions_are_checked() {
        let (cfg, store, features) = fixture();
        let narrow = BeamSpec { beam_width: 2, n_best: 5, max_len: 4 };
        assert!(beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u0", narrow).is_err());
        let empty = BeamSpec { beam_width: 8, n_best: 5, max_len: 0 };
        assert!(beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u0", empty).is_err());
    }

    #[test]
    fn validate_rejects_malformed_lists() {
        let good = NBestList {
            utterance_id: "u".to_string(),
            hypotheses: vec![
                Hypothesis { tokens: vec![3, EOS], logprob: -0.5 },
                Hypothesis { tokens: vec![4, EOS], logprob: -1.5 },
            ],
        };
        good.validate().expect("well formed");

        let mut unterminated = good.clone();
        unterminated.hypotheses[0].tokens = vec![3, 4];
        assert!(unterminated.validate().is_err());

        let mut ascending = good.clone();
        ascending.hypotheses.swap(0, 1);
        assert!(ascending.validate().is_err());

        let mut duplicated = good.clone();
        duplicated.hypotheses[1] = duplicated.hypotheses[0].clone();
        assert!(duplicated.validate().is_err());

        let empty = NBestList { utterance_id: "u".to_string(), hypotheses: vec![] };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip_preserves_lists() {
        let (cfg, store, features) = fixture();
        let spec = BeamSpec { beam_width: 8, n_best: 3, max_len: 4 };
        let lists = vec![
            beam_search(&store, &cfg, &features, CodeMode::Zero, false, "u0", spec)
                .expect("beam"),
            beam_search(&store, &cfg, &features, CodeMode::Zero, true, "u1", spec)
                .expect("beam"),
        ];
        let mut buf: Vec<u8> = Vec::new();
        write_nbest_jsonl(&mut buf, &lists).expect("write");
        let back = read_nbest_jsonl(buf.as_slice()).expect("read");
        assert_eq!(lists, back);
    }
}

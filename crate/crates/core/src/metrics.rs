//! Token error rate via edit distance.
//!
//! The DP minimizes total edit cost first and, among minimal alignments, the
//! insertion+deletion count, making the reported breakdown deterministic.
//! Terminator and padding tokens are stripped from both sides before
//! alignment, so appending or removing them never changes the result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

impl WerBreakdown {
    pub fn cost(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> f64 {
        self.cost() as f64 / self.reference_length as f64
    }

    /// Pools counts, e.g. across the utterances of one speaker.
    pub fn merge(reports: &[WerBreakdown]) -> Result<WerBreakdown> {
        if reports.is_empty() {
            return Err(Error::contract("merging zero error breakdowns"));
        }
        Ok(WerBreakdown {
            substitutions: reports.iter().map(|r| r.substitutions).sum(),
            insertions: reports.iter().map(|r| r.insertions).sum(),
            deletions: reports.iter().map(|r| r.deletions).sum(),
            reference_length: reports.iter().map(|r| r.reference_length).sum(),
        })
    }
}

fn strip(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().copied().filter(|&t| t != EOS && t != PAD).collect()
}

/// Aligns hypothesis against reference with unit costs. Among alignments of
/// minimal cost, prefers the one with the fewest insertions+deletions (i.e.
/// the most substitutions), which pins down the breakdown uniquely.
pub fn edit_distance_wer(reference: &[TokenId], hypothesis: &[TokenId]) -> Result<WerBreakdown> {
    let r = strip(reference);
    let h = strip(hypothesis);
    if r.is_empty() {
        return Err(Error::contract("empty reference after stripping terminators"));
    }
    let (nr, nh) = (r.len(), h.len());
    // dp[i][j] = (cost, ins+del) for r[..i] vs h[..j], compared lexicographically
    let mut dp = vec![(0usize, 0usize); (nr + 1) * (nh + 1)];
    let at = |i: usize, j: usize| i * (nh + 1) + j;
    for i in 1..=nr {
        dp[at(i, 0)] = (i, i);
    }
    for j in 1..=nh {
        dp[at(0, j)] = (j, j);
    }
    for i in 1..=nr {
        for j in 1..=nh {
            let sub_cost = usize::from(r[i - 1] != h[j - 1]);
            let diag = dp[at(i - 1, j - 1)];
            let diag = (diag.0 + sub_cost, diag.1);
            let del = dp[at(i - 1, j)];
            let del = (del.0 + 1, del.1 + 1);
            let ins = dp[at(i, j - 1)];
            let ins = (ins.0 + 1, ins.1 + 1);
            dp[at(i, j)] = diag.min(del).min(ins);
        }
    }
    let (cost, ins_del) = dp[at(nr, nh)];
    // With i insertions and d deletions: i - d = |h| - |r|, i + d known.
    let diff = nh as isize - nr as isize;
    let insertions = ((ins_del as isize + diff) / 2) as usize;
    let deletions = ins_del - insertions;
    let substitutions = cost - ins_del;
    Ok(WerBreakdown {
        substitutions,
        insertions,
        deletions,
        reference_length: nr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// Unweighted mean of per-report rates.
    PerSpeakerMean,
    /// Total errors over total reference length.
    Pooled,
}

/// Aggregates per-speaker breakdowns into a single rate.
pub fn aggregate(reports: &[WerBreakdown], mode: AggregateMode) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::contract("aggregating zero error breakdowns"));
    }
    match mode {
        AggregateMode::PerSpeakerMean => {
            Ok(reports.iter().map(|r| r.wer()).sum::<f64>() / reports.len() as f64)
        }
        AggregateMode::Pooled => {
            let merged = WerBreakdown::merge(reports)?;
            Ok(merged.wer())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive alignment search: tries every monotone alignment and keeps
    /// the lexicographic minimum of (cost, ins+del). Exponential, only for
    /// cross-checking the DP on short sequences.
    pub(crate) fn brute_force(r: &[TokenId], h: &[TokenId]) -> (usize, usize) {
        fn go(r: &[TokenId], h: &[TokenId]) -> (usize, usize) {
            match (r.is_empty(), h.is_empty()) {
                (true, true) => (0, 0),
                (true, false) => (h.len(), h.len()),
                (false, true) => (r.len(), r.len()),
                (false, false) => {
                    let sub = usize::from(r[0] != h[0]);
                    let d = go(&r[1..], &h[1..]);
                    let d = (d.0 + sub, d.1);
                    let del = go(&r[1..], h);
                    let del = (del.0 + 1, del.1 + 1);
                    let ins = go(r, &h[1..]);
                    let ins = (ins.0 + 1, ins.1 + 1);
                    d.min(del).min(ins)
                }
            }
        }
        go(r, h)
    }

    #[test]
    fn identical_sequences_have_zero_errors() {
        let b = edit_distance_wer(&[3, 4, 5], &[3, 4, 5]).unwrap();
        assert_eq!(b.cost(), 0);
        assert_eq!(b.wer(), 0.0);
    }

    #[test]
    fn single_substitution() {
        let b = edit_distance_wer(&[3, 4, 5], &[3, 9, 5]).unwrap();
        assert_eq!((b.substitutions, b.insertions, b.deletions), (1, 0, 0));
        assert!((b.wer() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let b = edit_distance_wer(&[3, 4, 5], &[]).unwrap();
        assert_eq!((b.substitutions, b.insertions, b.deletions), (0, 0, 3));
        assert_eq!(b.wer(), 1.0);
    }

    #[test]
    fn wer_can_exceed_one() {
        let b = edit_distance_wer(&[3], &[4, 5, 6]).unwrap();
        assert!(b.wer() > 1.0);
        assert!(b.substitutions + b.deletions <= 1);
    }

    #[test]
    fn terminator_and_padding_are_ignored() {
        let with = edit_distance_wer(&[3, 4, EOS], &[3, 5, EOS, PAD, PAD]).unwrap();
        let without = edit_distance_wer(&[3, 4], &[3, 5]).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn empty_reference_is_rejected() {
        assert!(edit_distance_wer(&[EOS], &[3]).is_err());
    }

    #[test]
    fn aggregate_modes_differ_as_expected() {
        // Speaker A: perfect over 10 tokens. Speaker B: 1 error over 2.
        let a = WerBreakdown { substitutions: 0, insertions: 0, deletions: 0, reference_length: 10 };
        let b = WerBreakdown { substitutions: 1, insertions: 0, deletions: 0, reference_length: 2 };
        let mean = aggregate(&[a, b], AggregateMode::PerSpeakerMean).unwrap();
        let pooled = aggregate(&[a, b], AggregateMode::Pooled).unwrap();
        assert!((mean - 0.25).abs() < 1e-15);
        assert!((pooled - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn dp_matches_brute_force_on_short_sequences() {
        // All pairs over a 3-token alphabet up to length 4: cost and the
        // insertion+deletion tiebreak must match the exhaustive search.
        let alphabet = [3u32, 4, 5];
        let mut seqs: Vec<Vec<TokenId>> = vec![];
        for len in 1..=4usize {
            let mut idx = vec![0usize; len];
            loop {
                seqs.push(idx.iter().map(|&i| alphabet[i]).collect());
                let mut k = 0;
                loop {
                    idx[k] += 1;
                    if idx[k] < alphabet.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                    if k == len {
                        break;
                    }
                }
                if k == len {
                    break;
                }
            }
        }
        let mut hyps = seqs.clone();
        hyps.push(vec![]);
        for r in &seqs {
            for h in &hyps {
                let got = edit_distance_wer(r, h).unwrap();
                let want = brute_force(r, h);
                assert_eq!((got.cost(), got.insertions + got.deletions), want, "r={r:?} h={h:?}");
            }
        }
    }
}

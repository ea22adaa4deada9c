//! Deterministic synthetic corpus: token sequences rendered to feature
//! frames through a per-speaker channel (mixing matrix plus bias) and
//! per-speaker stationary noise. Every byte is a pure function of the
//! corpus seed, so splits regenerate identically anywhere.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, TokenSequence, FIRST_CONTENT};
use crate::seeds;
use crate::tensor::Tensor;

/// Adaptation-amount analogs: utterance counts standing in for one and ten
/// minutes of per-speaker audio.
pub const ONE_MINUTE_UTTS: usize = 5;
pub const TEN_MINUTE_UTTS: usize = 40;

/// Root-mean-square scale of prototype entries; noise tiers are defined
/// relative to it (off, -20 dB, -10 dB, 0 dB).
const SIGNAL_SCALE: f64 = 0.3536;

pub fn noise_tiers() -> Vec<f64> {
    vec![0.0, SIGNAL_SCALE * 0.1, SIGNAL_SCALE * 10f64.powf(-0.5), SIGNAL_SCALE]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    /// Held-out utterances of training speakers; the accuracy probe for
    /// multi-task code training.
    TrainDev,
    Adapt,
    AdaptDev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TrainDev => "train_dev",
            Split::Adapt => "adapt",
            Split::AdaptDev => "adapt_dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub split: Split,
    /// Frame matrix [frames, d_feat].
    pub features: Tensor,
    /// Content tokens only; terminators are appended where needed.
    pub tokens: TokenSequence,
}

/// Stationary per-speaker environment. Fully determined by the corpus seed
/// and the speaker id.
#[derive(Debug, Clone)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Mixing matrix [d_feat, d_feat]: an orthonormalized perturbation of
    /// the identity times a per-dimension gain.
    pub channel: Tensor,
    pub bias: Vec<f64>,
    pub noise_scale: f64,
    /// Gain spread of the channel; rejection sampling keeps it <= 10.
    pub channel_condition: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default = "default_train_speakers")]
    pub n_train_speakers: usize,
    #[serde(default = "default_test_speakers")]
    pub n_test_speakers: usize,
    #[serde(default = "default_train_utts")]
    pub n_train_utts: usize,
    #[serde(default = "default_train_dev_utts")]
    pub n_train_dev_utts: usize,
    #[serde(default = "default_adapt_utts")]
    pub n_adapt_utts: usize,
    #[serde(default = "default_adapt_dev_utts")]
    pub n_adapt_dev_utts: usize,
    #[serde(default = "default_test_utts")]
    pub n_test_utts: usize,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_d_feat")]
    pub d_feat: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default)]
    pub corpus_seed: u64,
    /// Off-identity strength of the mixing matrix; 0 keeps it orthonormal
    /// around the identity.
    #[serde(default)]
    pub channel_strength: f64,
    /// Log-normal sigma of per-dimension channel gains.
    #[serde(default)]
    pub log_gain_sigma: f64,
    /// Sigma of the per-speaker bias entries.
    #[serde(default)]
    pub bias_sigma: f64,
    /// Per-speaker noise scale is drawn uniformly from these.
    #[serde(default = "default_noise_tiers")]
    pub noise_tiers: Vec<f64>,
}

fn default_train_speakers() -> usize {
    40
}
fn default_test_speakers() -> usize {
    20
}
fn default_train_utts() -> usize {
    100
}
fn default_train_dev_utts() -> usize {
    10
}
fn default_adapt_utts() -> usize {
    40
}
fn default_adapt_dev_utts() -> usize {
    10
}
fn default_test_utts() -> usize {
    20
}
fn default_min_tokens() -> usize {
    3
}
fn default_max_tokens() -> usize {
    10
}
fn default_d_feat() -> usize {
    8
}
fn default_vocab() -> usize {
    16
}
fn default_noise_tiers() -> Vec<f64> {
    noise_tiers()
}

impl Default for CorpusConfig {
    fn default() -> CorpusConfig {
        CorpusConfig {
            n_train_speakers: default_train_speakers(),
            n_test_speakers: default_test_speakers(),
            n_train_utts: default_train_utts(),
            n_train_dev_utts: default_train_dev_utts(),
            n_adapt_utts: default_adapt_utts(),
            n_adapt_dev_utts: default_adapt_dev_utts(),
            n_test_utts: default_test_utts(),
            min_tokens: default_min_tokens(),
            max_tokens: default_max_tokens(),
            d_feat: default_d_feat(),
            vocab_size: default_vocab(),
            corpus_seed: 0,
            channel_strength: 0.0,
            log_gain_sigma: 0.0,
            bias_sigma: 0.0,
            noise_tiers: default_noise_tiers(),
        }
    }
}

impl CorpusConfig {
    /// Named difficulty presets. "clean" renders prototypes untouched and
    /// calibrates the recognizer's headroom; "clean-noise" adds per-speaker
    /// stationary noise only; "channel-noise" adds the mixing channel too.
    pub fn preset(name: &str) -> Result<CorpusConfig> {
        let mut cfg = CorpusConfig::default();
        match name {
            "clean" => {
                cfg.noise_tiers = vec![0.0];
            }
            "clean-noise" => {}
            "channel-noise" => {
                cfg.channel_strength = 0.12;
                cfg.log_gain_sigma = 0.2;
                cfg.bias_sigma = 0.25;
            }
            other => {
                return Err(Error::contract(format!(
                    "unknown corpus preset '{other}' (clean, clean-noise, channel-noise)"
                )))
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return Err(Error::contract(format!(
                "token length range [{}, {}] is empty or zero",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.d_feat == 0 {
            return Err(Error::contract("d_feat must be positive"));
        }
        if self.vocab_size < FIRST_CONTENT as usize + 1 {
            return Err(Error::contract(format!(
                "vocab_size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        if self.noise_tiers.is_empty() {
            return Err(Error::contract("noise_tiers must not be empty"));
        }
        if self.noise_tiers.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
            return Err(Error::contract("noise tiers must be finite and nonnegative"));
        }
        if self.channel_strength < 0.0 || self.log_gain_sigma < 0.0 || self.bias_sigma < 0.0 {
            return Err(Error::contract("channel parameters must be nonnegative"));
        }
        Ok(())
    }

    pub fn n_content_tokens(&self) -> usize {
        self.vocab_size - FIRST_CONTENT as usize
    }

    fn train_speaker_ids(&self) -> Vec<String> {
        (0..self.n_train_speakers).map(|i| format!("trn{i:03}")).collect()
    }

    fn test_speaker_ids(&self) -> Vec<String> {
        (0..self.n_test_speakers).map(|i| format!("tst{i:03}")).collect()
    }
}

/// Token prototype matrix [n_content, d_feat], drawn once per corpus.
pub fn token_prototypes(cfg: &CorpusConfig) -> Tensor {
    let seed = seeds::derive(cfg.corpus_seed, &["prototypes"]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, SIGNAL_SCALE).expect("valid normal");
    let n = cfg.n_content_tokens();
    let values: Vec<f64> = (0..n * cfg.d_feat).map(|_| normal.sample(&mut rng)).collect();
    Tensor::from_vec(&[n, cfg.d_feat], values).expect("shape matches values")
}

/// Gram-Schmidt orthonormalization of the columns of a square matrix,
/// in place. The input is a perturbed identity, so it is far from rank
/// deficient; degenerate columns are a caller bug.
fn orthonormalize_columns(m: &mut [f64], d: usize) -> Result<()> {
    for j in 0..d {
        for k in 0..j {
            let dot: f64 = (0..d).map(|i| m[i * d + j] * m[i * d + k]).sum();
            for i in 0..d {
                m[i * d + j] -= dot * m[i * d + k];
            }
        }
        let norm: f64 = (0..d).map(|i| m[i * d + j] * m[i * d + j]).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::contract("channel basis collapsed during orthonormalization"));
        }
        for i in 0..d {
            m[i * d + j] /= norm;
        }
    }
    Ok(())
}

/// Builds the stationary environment for one speaker. Rejection-samples the
/// per-dimension gains until their spread (the channel's condition number,
/// since the mixing basis is orthonormal) is at most 10.
pub fn speaker_profile(cfg: &CorpusConfig, speaker_id: &str) -> Result<SpeakerProfile> {
    let seed = seeds::derive(cfg.corpus_seed, &["speaker", speaker_id, "profile"]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_feat;
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    let mut basis = vec![0.0; d * d];
    for i in 0..d {
        basis[i * d + i] = 1.0;
    }
    if cfg.channel_strength > 0.0 {
        for v in basis.iter_mut() {
            *v += cfg.channel_strength * unit.sample(&mut rng);
        }
        orthonormalize_columns(&mut basis, d)?;
    }

    let mut gains = vec![1.0; d];
    let mut condition = 1.0;
    if cfg.log_gain_sigma > 0.0 {
        loop {
            for g in gains.iter_mut() {
                *g = (cfg.log_gain_sigma * unit.sample(&mut rng)).exp();
            }
            let hi = gains.iter().cloned().fold(f64::MIN, f64::max);
            let lo = gains.iter().cloned().fold(f64::MAX, f64::min);
            condition = hi / lo;
            if condition <= 10.0 {
                break;
            }
        }
    }

    let mut channel = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            channel[i * d + j] = basis[i * d + j] * gains[j];
        }
    }

    let bias: Vec<f64> = if cfg.bias_sigma > 0.0 {
        (0..d).map(|_| cfg.bias_sigma * unit.sample(&mut rng)).collect()
    } else {
        vec![0.0; d]
    };

    let tier = rng.random_range(0..cfg.noise_tiers.len());
    Ok(SpeakerProfile {
        speaker_id: speaker_id.to_string(),
        channel: Tensor::from_vec(&[d, d], channel)?,
        bias,
        noise_scale: cfg.noise_tiers[tier],
        channel_condition: condition,
        seed,
    })
}

/// Renders content tokens to frames: each token emits 2 to 4 copies of its
/// prototype, mixed through the speaker channel, shifted by the speaker
/// bias, and dusted with the speaker's stationary noise.
pub fn render_utterance(
    tokens: &[TokenId],
    profile: &SpeakerProfile,
    prototypes: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d = profile.channel.shape()[0];
    if prototypes.shape()[1] != d {
        return Err(Error::dim(format!(
            "prototype width {} vs channel size {d}",
            prototypes.shape()[1]
        )));
    }
    let n_content = prototypes.shape()[0];
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let chan = profile.channel.values();
    let mut rows: Vec<f64> = Vec::new();
    let mut n_frames = 0usize;
    for &t in tokens {
        if t < FIRST_CONTENT || (t - FIRST_CONTENT) as usize >= n_content {
            return Err(Error::contract(format!("token {t} outside the content vocabulary")));
        }
        let proto =
            &prototypes.values()[(t - FIRST_CONTENT) as usize * d..(t - FIRST_CONTENT + 1) as usize * d];
        let copies = rng.random_range(2..=4usize);
        for _ in 0..copies {
            for i in 0..d {
                let mixed: f64 = (0..d).map(|j| chan[i * d + j] * proto[j]).sum();
                let noise = if profile.noise_scale > 0.0 {
                    profile.noise_scale * unit.sample(rng)
                } else {
                    0.0
                };
                rows.push(mixed + profile.bias[i] + noise);
            }
            n_frames += 1;
        }
    }
    Tensor::from_vec(&[n_frames, d], rows)
}

fn draw_tokens(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> TokenSequence {
    let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
    (0..len)
        .map(|_| FIRST_CONTENT + rng.random_range(0..cfg.n_content_tokens()) as TokenId)
        .collect()
}

fn make_utterance(
    cfg: &CorpusConfig,
    profile: &SpeakerProfile,
    prototypes: &Tensor,
    split: Split,
    index: usize,
) -> Result<Utterance> {
    let seed = seeds::derive_indexed(
        cfg.corpus_seed,
        &["speaker", &profile.speaker_id, split.name(), "utt"],
        index as u64,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = draw_tokens(cfg, &mut rng);
    let features = render_utterance(&tokens, profile, prototypes, &mut rng)?;
    Ok(Utterance {
        utt_id: format!("{}/{}/{index:03}", profile.speaker_id, split.name()),
        speaker_id: profile.speaker_id.clone(),
        split,
        features,
        tokens,
    })
}

#[derive(Serialize, Deserialize)]
struct UttRecord {
    utt_id: String,
    speaker_id: String,
    split: Split,
    features: Vec<Vec<f64>>,
    tokens: TokenSequence,
}

impl From<&Utterance> for UttRecord {
    fn from(u: &Utterance) -> UttRecord {
        let d = u.features.shape()[1];
        let features = u
            .features
            .values()
            .chunks(d)
            .map(|row| row.to_vec())
            .collect();
        UttRecord {
            utt_id: u.utt_id.clone(),
            speaker_id: u.speaker_id.clone(),
            split: u.split,
            features,
            tokens: u.tokens.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub n_utterances: usize,
    pub split_counts: std::collections::BTreeMap<String, usize>,
    pub train_speakers: Vec<String>,
    pub test_speakers: Vec<String>,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates every utterance and writes `corpus.jsonl` plus
/// `manifest.json` under `dir`. Generation is intentionally single-threaded:
/// the output bytes are part of the determinism contract.
pub fn generate_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let train_ids = cfg.train_speaker_ids();
    let test_ids = cfg.test_speaker_ids();
    debug_assert!(train_ids.iter().all(|t| !test_ids.contains(t)));
    let prototypes = token_prototypes(cfg);

    fs::create_dir_all(dir)?;
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join(CORPUS_FILE))?);
    let mut split_counts: std::collections::BTreeMap<String, usize> =
        std::collections::BTreeMap::new();
    let mut n_utterances = 0usize;

    let emit = |out: &mut dyn Write,
                    counts: &mut std::collections::BTreeMap<String, usize>,
                    total: &mut usize,
                    u: &Utterance|
     -> Result<()> {
        let record = UttRecord::from(u);
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
        *counts.entry(u.split.name().to_string()).or_insert(0) += 1;
        *total += 1;
        Ok(())
    };

    for id in &train_ids {
        let profile = speaker_profile(cfg, id)?;
        for i in 0..cfg.n_train_utts {
            let u = make_utterance(cfg, &profile, &prototypes, Split::Train, i)?;
            emit(&mut out, &mut split_counts, &mut n_utterances, &u)?;
        }
        for i in 0..cfg.n_train_dev_utts {
            let u = make_utterance(cfg, &profile, &prototypes, Split::TrainDev, i)?;
            emit(&mut out, &mut split_counts, &mut n_utterances, &u)?;
        }
    }
    for id in &test_ids {
        let profile = speaker_profile(cfg, id)?;
        for (split, count) in [
            (Split::Adapt, cfg.n_adapt_utts),
            (Split::AdaptDev, cfg.n_adapt_dev_utts),
            (Split::Test, cfg.n_test_utts),
        ] {
            for i in 0..count {
                let u = make_utterance(cfg, &profile, &prototypes, split, i)?;
                emit(&mut out, &mut split_counts, &mut n_utterances, &u)?;
            }
        }
    }
    out.flush()?;

    let manifest = CorpusManifest {
        config: cfg.clone(),
        n_utterances,
        split_counts,
        train_speakers: train_ids,
        test_speakers: test_ids,
    };
    let mut mf = fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    Ok(manifest)
}

#[derive(Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub utterances: Vec<Utterance>,
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CorpusManifest = serde_json::from_reader(
        fs::File::open(&manifest_path)
            .map_err(|e| Error::Data(format!("manifest {}: {e}", manifest_path.display())))?,
    )?;
    let corpus_path = dir.join(CORPUS_FILE);
    let file = fs::File::open(&corpus_path)
        .map_err(|e| Error::Data(format!("corpus {}: {e}", corpus_path.display())))?;
    let d = manifest.config.d_feat;
    let mut utterances = Vec::with_capacity(manifest.n_utterances);
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: UttRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("utterance line {}: {e}", idx + 1)))?;
        if record.features.iter().any(|row| row.len() != d) {
            return Err(Error::Data(format!(
                "utterance line {}: feature row width differs from d_feat {d}",
                idx + 1
            )));
        }
        let rows = record.features.len();
        let values: Vec<f64> = record.features.into_iter().flatten().collect();
        utterances.push(Utterance {
            utt_id: record.utt_id,
            speaker_id: record.speaker_id,
            split: record.split,
            features: Tensor::from_vec(&[rows, d], values)?,
            tokens: record.tokens,
        });
    }
    if utterances.len() != manifest.n_utterances {
        return Err(Error::Data(format!(
            "manifest promises {} utterances, file holds {}",
            manifest.n_utterances,
            utterances.len()
        )));
    }
    Ok(Corpus { manifest, utterances })
}

impl Corpus {
    pub fn utterances_for(&self, speaker_id: &str, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.speaker_id == speaker_id && u.split == split)
            .collect()
    }

    /// Deterministic prefix of a speaker's adaptation split, ordered by
    /// utterance id. Zero or oversized requests are contract errors: the
    /// callers sweep explicit amounts and an empty batch hides bugs.
    pub fn subset_adaptation_data(&self, speaker_id: &str, amount: usize) -> Result<Vec<&Utterance>> {
        let mut utts = self.utterances_for(speaker_id, Split::Adapt);
        utts.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        if amount == 0 {
            return Err(Error::contract("adaptation needs at least one utterance"));
        }
        if amount > utts.len() {
            return Err(Error::contract(format!(
                "requested {amount} adaptation utterances, speaker '{speaker_id}' has {}",
                utts.len()
            )));
        }
        utts.truncate(amount);
        Ok(utts)
    }
}

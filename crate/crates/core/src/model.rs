//! Encoder-decoder sequence recognizer with per-speaker conditioning.
//!
//! The encoder consumes frame features and the decoder scores token
//! sequences autoregressively. Two adaptation surfaces exist:
//! - a per-speaker code vector, projected by per-layer linear maps (no bias)
//!   and added to the normalized input of selected encoder self-attention
//!   blocks, after the residual branch has split off;
//! - low-rank additive deltas on the query and value projections of selected
//!   encoder layers (delta = B*A, with B zero at creation so a fresh delta is
//!   a no-op).
//!
//! Token convention: 0 = BOS, 1 = EOS, 2 = PAD, content ids from 3 up. The
//! output distribution masks BOS and PAD with a -1e30 additive penalty, which
//! underflows to exactly zero probability after the softmax.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tape::{Tape, ValueId};
use crate::tensor::{ParamGroup, ParameterStore, Tensor};

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
/// First content token id.
pub const FIRST_CONTENT: TokenId = 3;

pub const OUTPUT_MASK_PENALTY: f64 = -1e30;

fn default_d_model() -> usize {
    32
}
fn default_enc_layers() -> usize {
    4
}
fn default_dec_layers() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_d_ff() -> usize {
    64
}
fn default_vocab() -> usize {
    16
}
fn default_d_feat() -> usize {
    8
}
fn default_d_code() -> usize {
    16
}
fn default_injection() -> BTreeSet<usize> {
    (0..4).collect()
}
fn default_lora_rank() -> usize {
    2
}
fn default_lora_layers() -> BTreeSet<usize> {
    [1, 2, 3].into_iter().collect()
}
fn default_max_positions() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_enc_layers")]
    pub n_encoder_layers: usize,
    #[serde(default = "default_dec_layers")]
    pub n_decoder_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_d_feat")]
    pub d_feat: usize,
    #[serde(default = "default_d_code")]
    pub d_code: usize,
    /// Encoder layers that receive the projected speaker code.
    #[serde(default = "default_injection")]
    pub injection_layers: BTreeSet<usize>,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    /// Encoder layers whose q/v projections carry low-rank deltas.
    #[serde(default = "default_lora_layers")]
    pub lora_layers: BTreeSet<usize>,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            d_model: default_d_model(),
            n_encoder_layers: default_enc_layers(),
            n_decoder_layers: default_dec_layers(),
            n_heads: default_heads(),
            d_ff: default_d_ff(),
            vocab_size: default_vocab(),
            d_feat: default_d_feat(),
            d_code: default_d_code(),
            injection_layers: default_injection(),
            lora_rank: default_lora_rank(),
            lora_layers: default_lora_layers(),
            max_positions: default_max_positions(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.d_feat == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_encoder_layers == 0 || self.n_decoder_layers == 0 {
            return Err(Error::contract("need at least one layer on each side"));
        }
        if self.vocab_size < FIRST_CONTENT as usize + 1 {
            return Err(Error::contract(format!(
                "vocab_size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        if let Some(&bad) = self.injection_layers.iter().find(|&&l| l >= self.n_encoder_layers) {
            return Err(Error::contract(format!(
                "injection layer {bad} out of {} encoder layers",
                self.n_encoder_layers
            )));
        }
        if let Some(&bad) = self.lora_layers.iter().find(|&&l| l >= self.n_encoder_layers) {
            return Err(Error::contract(format!(
                "low-rank delta layer {bad} out of {} encoder layers",
                self.n_encoder_layers
            )));
        }
        if self.lora_rank > self.d_model {
            return Err(Error::contract(format!(
                "low-rank delta rank {} exceeds d_model {}",
                self.lora_rank, self.d_model
            )));
        }
        if self.d_code == 0 {
            return Err(Error::contract("d_code must be positive"));
        }
        if self.max_positions == 0 {
            return Err(Error::contract("max_positions must be positive"));
        }
        Ok(())
    }

    pub fn n_content_tokens(&self) -> usize {
        self.vocab_size - FIRST_CONTENT as usize
    }
}

/// Sinusoidal position table, rows 0..n.
fn positional_rows(n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for pos in 0..n {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> impl Iterator<Item = f64> + '_ {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    std::iter::repeat_with(move || dist.sample(rng))
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let values: Vec<f64> = xavier(rng, rows, cols).take(rows * cols).collect();
    Tensor::from_vec(&[rows, cols], values).expect("shape matches values")
}

/// Builds a freshly initialized parameter store: Xavier-normal matrices,
/// unit layer-norm gains, zero biases. Code projections are created for every
/// injection layer; low-rank deltas and speaker codes are added later.
pub fn build_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &["model_init"]));
    let mut store = ParameterStore::new();
    let d = cfg.d_model;

    let put = |store: &mut ParameterStore, name: String, t: Tensor, g: ParamGroup| {
        store.insert(&name, t, g)
    };

    put(&mut store, "encoder/input/w".into(), matrix(&mut rng, cfg.d_feat, d), ParamGroup::Base)?;
    put(&mut store, "encoder/input/b".into(), Tensor::zeros(&[d]), ParamGroup::Base)?;
    for i in 0..cfg.n_encoder_layers {
        put(&mut store, format!("encoder/{i}/ln1/g"), Tensor::from_vec(&[d], vec![1.0; d])?, ParamGroup::Base)?;
        put(&mut store, format!("encoder/{i}/ln1/b"), Tensor::zeros(&[d]), ParamGroup::Base)?;
        for w in ["wq", "wk", "wv", "wo"] {
            put(&mut store, format!("encoder/{i}/attn/{w}"), matrix(&mut rng, d, d), ParamGroup::Base)?;
        }
        put(&mut store, format!("encoder/{i}/ln2/g"), Tensor::from_vec(&[d], vec![1.0; d])?, ParamGroup::Base)?;
        put(&mut store, format!("encoder/{i}/ln2/b"), Tensor::zeros(&[d]), ParamGroup::Base)?;
        put(&mut store, format!("encoder/{i}/ff/w1"), matrix(&mut rng, d, cfg.d_ff), ParamGroup::Base)?;
        put(&mut store, format!("encoder/{i}/ff/b1"), Tensor::zeros(&[cfg.d_ff]), ParamGroup::Base)?;
        put(&mut store, format!("encoder/{i}/ff/w2"), matrix(&mut rng, cfg.d_ff, d), ParamGroup::Base)?;
        put(&mut store, format!("encoder/{i}/ff/b2"), Tensor::zeros(&[d]), ParamGroup::Base)?;
        if cfg.injection_layers.contains(&i) {
            put(
                &mut store,
                format!("encoder/{i}/code_proj"),
                matrix(&mut rng, cfg.d_code, d),
                ParamGroup::CodeProjection,
            )?;
        }
    }
    put(&mut store, "encoder/out_ln/g".into(), Tensor::from_vec(&[d], vec![1.0; d])?, ParamGroup::Base)?;
    put(&mut store, "encoder/out_ln/b".into(), Tensor::zeros(&[d]), ParamGroup::Base)?;

    put(&mut store, "decoder/embed".into(), matrix(&mut rng, cfg.vocab_size, d), ParamGroup::Base)?;
    for i in 0..cfg.n_decoder_layers {
        put(&mut store, format!("decoder/{i}/ln1/g"), Tensor::from_vec(&[d], vec![1.0; d])?, ParamGroup::Base)?;
        put(&mut store, format!("decoder/{i}/ln1/b"), Tensor::zeros(&[d]), ParamGroup::Base)?;
        for w in ["wq", "wk", "wv", "wo"] {
            put(&mut store, format!("decoder/{i}/self_attn/{w}"), matrix(&mut rng, d, d), ParamGroup::Base)?;
        }
        put(&mut store, format!("decoder/{i}/ln2/g"), Tensor::from_vec(&[d], vec![1.0; d])?, ParamGroup::Base)?;
        put(&mut store, format!("decoder/{i}/ln2/b"), Tensor::zeros(&[d]), ParamGroup::Base)?;
        for w in ["wq", "wk", "wv", "wo"] {
            put(&mut store, format!("decoder/{i}/cross_attn/{w}"), matrix(&mut rng, d, d), ParamGroup::Base)?;
        }
        put(&mut store, format!("decoder/{i}/ln3/g"), Tensor::from_vec(&[d], vec![1.0; d])?, ParamGroup::Base)?;
        put(&mut store, format!("decoder/{i}/ln3/b"), Tensor::zeros(&[d]), ParamGroup::Base)?;
        put(&mut store, format!("decoder/{i}/ff/w1"), matrix(&mut rng, d, cfg.d_ff), ParamGroup::Base)?;
        put(&mut store, format!("decoder/{i}/ff/b1"), Tensor::zeros(&[cfg.d_ff]), ParamGroup::Base)?;
        put(&mut store, format!("decoder/{i}/ff/w2"), matrix(&mut rng, cfg.d_ff, d), ParamGroup::Base)?;
        put(&mut store, format!("decoder/{i}/ff/b2"), Tensor::zeros(&[d]), ParamGroup::Base)?;
    }
    put(&mut store, "decoder/out_ln/g".into(), Tensor::from_vec(&[d], vec![1.0; d])?, ParamGroup::Base)?;
    put(&mut store, "decoder/out_ln/b".into(), Tensor::zeros(&[d]), ParamGroup::Base)?;
    put(&mut store, "decoder/output/w".into(), matrix(&mut rng, d, cfg.vocab_size), ParamGroup::Base)?;
    put(&mut store, "decoder/output/b".into(), Tensor::zeros(&[cfg.vocab_size]), ParamGroup::Base)?;
    Ok(store)
}

pub fn code_param_name(speaker_id: &str) -> String {
    format!("speaker_code/{speaker_id}")
}

/// Adds a zero-initialized code vector for `speaker_id` and returns its name.
pub fn register_speaker_code(
    store: &mut ParameterStore,
    cfg: &ModelConfig,
    speaker_id: &str,
) -> Result<String> {
    let name = code_param_name(speaker_id);
    store.insert(&name, Tensor::zeros(&[1, cfg.d_code]), ParamGroup::SpeakerCode)?;
    Ok(name)
}

fn lora_names(layer: usize, target: &str) -> (String, String) {
    (
        format!("encoder/{layer}/attn/{target}_lora_a"),
        format!("encoder/{layer}/attn/{target}_lora_b"),
    )
}

/// Creates low-rank delta factors for the configured encoder layers: A is
/// N(0, 0.02) with shape [rank, d_model], B is zero with shape
/// [d_model, rank], so the initial delta B*A vanishes. Creating them twice is
/// an error; rank 0 is a no-op.
pub fn apply_lora(store: &mut ParameterStore, cfg: &ModelConfig, seed: u64) -> Result<()> {
    if cfg.lora_rank == 0 {
        return Ok(());
    }
    let d = cfg.d_model;
    let r = cfg.lora_rank;
    for &layer in &cfg.lora_layers {
        for target in ["wq", "wv"] {
            let (a_name, b_name) = lora_names(layer, target);
            if store.contains(&a_name) || store.contains(&b_name) {
                return Err(Error::contract(format!(
                    "low-rank delta already present on encoder layer {layer} {target}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_indexed(
                seed,
                &["lora", target],
                layer as u64,
            ));
            let dist = Normal::new(0.0, 0.02).expect("valid normal");
            let a_vals: Vec<f64> = (0..r * d).map(|_| dist.sample(&mut rng)).collect();
            store.insert(&a_name, Tensor::from_vec(&[r, d], a_vals)?, ParamGroup::Lora)?;
            store.insert(&b_name, Tensor::zeros(&[d, r]), ParamGroup::Lora)?;
        }
    }
    Ok(())
}

/// How the encoder obtains its speaker code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeMode<'a> {
    /// Injection arms absent from the graph entirely.
    Disabled,
    /// Injection arms present, fed an all-zero constant.
    Zero,
    /// Injection arms fed the named store parameter.
    Named(&'a str),
}

#[derive(Debug, Clone, Default)]
pub struct EncodeOptions<'a> {
    pub code: Option<CodeMode<'a>>,
    pub lora: bool,
    /// Layers whose attention output is zeroed; residual test hook.
    pub ablate_attention: Option<&'a BTreeSet<usize>>,
}

impl<'a> EncodeOptions<'a> {
    pub fn new(code: CodeMode<'a>, lora: bool) -> EncodeOptions<'a> {
        EncodeOptions { code: Some(code), lora, ablate_attention: None }
    }
}

fn code_mode<'a>(opts: &EncodeOptions<'a>) -> CodeMode<'a> {
    opts.code.unwrap_or(CodeMode::Zero)
}

/// Effective projection weight: base, plus the low-rank delta when enabled
/// and present for this layer.
fn projection_weight(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    layer: usize,
    target: &str,
    lora: bool,
) -> Result<ValueId> {
    let base = tape.param(store, &format!("encoder/{layer}/attn/{target}"))?;
    if !lora || cfg.lora_rank == 0 || !cfg.lora_layers.contains(&layer) {
        return Ok(base);
    }
    let (a_name, b_name) = lora_names(layer, target);
    if !store.contains(&a_name) {
        return Err(Error::contract(format!(
            "low-rank decoding requested but '{a_name}' is missing"
        )));
    }
    let a = tape.param(store, &a_name)?;
    let b = tape.param(store, &b_name)?;
    let delta = tape.matmul(b, a)?;
    tape.add(base, delta)
}

pub struct EncoderProbes {
    /// Residual stream right after each layer's attention output is added.
    pub post_attention: Vec<ValueId>,
}

/// Encodes a frame matrix ([T, d_feat]) to the final hidden sequence
/// ([T, d_model]), returning per-layer probe points alongside.
pub fn encode_probed(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    opts: &EncodeOptions,
) -> Result<(ValueId, EncoderProbes)> {
    if features.shape().len() != 2 || features.shape()[1] != cfg.d_feat {
        return Err(Error::dim(format!(
            "features shape {:?}, want [T, {}]",
            features.shape(),
            cfg.d_feat
        )));
    }
    let t_len = features.shape()[0];
    if t_len == 0 {
        return Err(Error::dim("empty feature sequence"));
    }
    if t_len > cfg.max_positions {
        return Err(Error::dim(format!(
            "sequence length {t_len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let d = cfg.d_model;
    let x = tape.leaf(features)?;
    let win = tape.param(store, "encoder/input/w")?;
    let bin = tape.param(store, "encoder/input/b")?;
    let proj_in = tape.matmul(x, win)?;
    let mut h = tape.add_row_bias(proj_in, bin)?;
    let pos = tape.constant(&[t_len, d], positional_rows(t_len, d))?;
    h = tape.add(h, pos)?;

    let mode = code_mode(opts);
    let mut probes = EncoderProbes { post_attention: Vec::with_capacity(cfg.n_encoder_layers) };
    for i in 0..cfg.n_encoder_layers {
        let g1 = tape.param(store, &format!("encoder/{i}/ln1/g"))?;
        let b1 = tape.param(store, &format!("encoder/{i}/ln1/b"))?;
        let mut xn = tape.layer_norm(h, g1, b1)?;
        if cfg.injection_layers.contains(&i) {
            match mode {
                CodeMode::Disabled => {}
                CodeMode::Zero | CodeMode::Named(_) => {
                    let code_row = match mode {
                        CodeMode::Named(name) => tape.param(store, name)?,
                        _ => tape.constant(&[1, cfg.d_code], vec![0.0; cfg.d_code])?,
                    };
                    let p = tape.param(store, &format!("encoder/{i}/code_proj"))?;
                    let shift = tape.matmul(code_row, p)?;
                    xn = tape.add_row_bias(xn, shift)?;
                }
            }
        }
        let wq = projection_weight(tape, store, cfg, i, "wq", opts.lora)?;
        let wk = tape.param(store, &format!("encoder/{i}/attn/wk"))?;
        let wv = projection_weight(tape, store, cfg, i, "wv", opts.lora)?;
        let wo = tape.param(store, &format!("encoder/{i}/attn/wo"))?;
        let q = tape.matmul(xn, wq)?;
        let k = tape.matmul(xn, wk)?;
        let v = tape.matmul(xn, wv)?;
        let a = tape.attention(q, k, v, cfg.n_heads, false)?;
        let mut o = tape.matmul(a, wo)?;
        if opts.ablate_attention.is_some_and(|s| s.contains(&i)) {
            o = tape.scale(o, 0.0)?;
        }
        h = tape.add(h, o)?;
        probes.post_attention.push(h);

        let g2 = tape.param(store, &format!("encoder/{i}/ln2/g"))?;
        let b2 = tape.param(store, &format!("encoder/{i}/ln2/b"))?;
        let yn = tape.layer_norm(h, g2, b2)?;
        let w1 = tape.param(store, &format!("encoder/{i}/ff/w1"))?;
        let b1f = tape.param(store, &format!("encoder/{i}/ff/b1"))?;
        let w2 = tape.param(store, &format!("encoder/{i}/ff/w2"))?;
        let b2f = tape.param(store, &format!("encoder/{i}/ff/b2"))?;
        let f1 = tape.matmul(yn, w1)?;
        let f1 = tape.add_row_bias(f1, b1f)?;
        let f1 = tape.gelu(f1)?;
        let f2 = tape.matmul(f1, w2)?;
        let f2 = tape.add_row_bias(f2, b2f)?;
        h = tape.add(h, f2)?;
    }
    let gout = tape.param(store, "encoder/out_ln/g")?;
    let bout = tape.param(store, "encoder/out_ln/b")?;
    let out = tape.layer_norm(h, gout, bout)?;
    Ok((out, probes))
}

pub fn encode(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    opts: &EncodeOptions,
) -> Result<ValueId> {
    Ok(encode_probed(tape, store, cfg, features, opts)?.0)
}

/// Cross-attention keys/values per decoder layer, derived from the encoder
/// output. Building them once per utterance lets every hypothesis scored
/// against that utterance share the encoder computation.
pub struct CrossAttnKeys {
    pub per_layer: Vec<(ValueId, ValueId)>,
}

pub fn cross_from_encoder(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    enc: ValueId,
) -> Result<CrossAttnKeys> {
    let mut per_layer = Vec::with_capacity(cfg.n_decoder_layers);
    for i in 0..cfg.n_decoder_layers {
        let wk = tape.param(store, &format!("decoder/{i}/cross_attn/wk"))?;
        let wv = tape.param(store, &format!("decoder/{i}/cross_attn/wv"))?;
        let k = tape.matmul(enc, wk)?;
        let v = tape.matmul(enc, wv)?;
        per_layer.push((k, v));
    }
    Ok(CrossAttnKeys { per_layer })
}

/// Output-side additive mask: BOS and PAD can never be emitted.
fn output_mask(cfg: &ModelConfig) -> Vec<f64> {
    let mut m = vec![0.0; cfg.vocab_size];
    m[BOS as usize] = OUTPUT_MASK_PENALTY;
    m[PAD as usize] = OUTPUT_MASK_PENALTY;
    m
}

/// Teacher-forced decoder pass: feeds `input_ids` (starting with BOS) and
/// returns masked log-probability rows of shape [len(input_ids), vocab].
pub fn decoder_logprob_rows(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    cross: &CrossAttnKeys,
    input_ids: &[TokenId],
) -> Result<ValueId> {
    if input_ids.is_empty() {
        return Err(Error::contract("decoder input must start with BOS"));
    }
    if input_ids.len() > cfg.max_positions {
        return Err(Error::dim(format!(
            "decoder length {} exceeds max_positions {}",
            input_ids.len(),
            cfg.max_positions
        )));
    }
    if let Some(&bad) = input_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::contract(format!("token {bad} outside vocabulary")));
    }
    if cross.per_layer.len() != cfg.n_decoder_layers {
        return Err(Error::dim(format!(
            "cross context covers {} layers, model has {}",
            cross.per_layer.len(),
            cfg.n_decoder_layers
        )));
    }
    let d = cfg.d_model;
    let ids: Vec<usize> = input_ids.iter().map(|&t| t as usize).collect();
    let table = tape.param(store, "decoder/embed")?;
    let e = tape.embed(table, &ids)?;
    let pos = tape.constant(&[ids.len(), d], positional_rows(ids.len(), d))?;
    let mut h = tape.add(e, pos)?;
    for i in 0..cfg.n_decoder_layers {
        let g1 = tape.param(store, &format!("decoder/{i}/ln1/g"))?;
        let b1 = tape.param(store, &format!("decoder/{i}/ln1/b"))?;
        let xn = tape.layer_norm(h, g1, b1)?;
        let wq = tape.param(store, &format!("decoder/{i}/self_attn/wq"))?;
        let wk = tape.param(store, &format!("decoder/{i}/self_attn/wk"))?;
        let wv = tape.param(store, &format!("decoder/{i}/self_attn/wv"))?;
        let wo = tape.param(store, &format!("decoder/{i}/self_attn/wo"))?;
        let q = tape.matmul(xn, wq)?;
        let k = tape.matmul(xn, wk)?;
        let v = tape.matmul(xn, wv)?;
        let a = tape.attention(q, k, v, cfg.n_heads, true)?;
        let o = tape.matmul(a, wo)?;
        h = tape.add(h, o)?;

        let g2 = tape.param(store, &format!("decoder/{i}/ln2/g"))?;
        let b2 = tape.param(store, &format!("decoder/{i}/ln2/b"))?;
        let xn2 = tape.layer_norm(h, g2, b2)?;
        let wqc = tape.param(store, &format!("decoder/{i}/cross_attn/wq"))?;
        let woc = tape.param(store, &format!("decoder/{i}/cross_attn/wo"))?;
        let qc = tape.matmul(xn2, wqc)?;
        let (kc, vc) = cross.per_layer[i];
        let ac = tape.attention(qc, kc, vc, cfg.n_heads, false)?;
        let oc = tape.matmul(ac, woc)?;
        h = tape.add(h, oc)?;

        let g3 = tape.param(store, &format!("decoder/{i}/ln3/g"))?;
        let b3 = tape.param(store, &format!("decoder/{i}/ln3/b"))?;
        let xn3 = tape.layer_norm(h, g3, b3)?;
        let w1 = tape.param(store, &format!("decoder/{i}/ff/w1"))?;
        let b1f = tape.param(store, &format!("decoder/{i}/ff/b1"))?;
        let w2 = tape.param(store, &format!("decoder/{i}/ff/w2"))?;
        let b2f = tape.param(store, &format!("decoder/{i}/ff/b2"))?;
        let f1 = tape.matmul(xn3, w1)?;
        let f1 = tape.add_row_bias(f1, b1f)?;
        let f1 = tape.gelu(f1)?;
        let f2 = tape.matmul(f1, w2)?;
        let f2 = tape.add_row_bias(f2, b2f)?;
        h = tape.add(h, f2)?;
    }
    let gout = tape.param(store, "decoder/out_ln/g")?;
    let bout = tape.param(store, "decoder/out_ln/b")?;
    h = tape.layer_norm(h, gout, bout)?;
    let wout = tape.param(store, "decoder/output/w")?;
    let bo = tape.param(store, "decoder/output/b")?;
    let logits = tape.matmul(h, wout)?;
    let logits = tape.add_row_bias(logits, bo)?;
    let mask = tape.constant(&[cfg.vocab_size], output_mask(cfg))?;
    let masked = tape.add_row_bias(logits, mask)?;
    tape.log_softmax_rows(masked)
}

/// Trims `target` to its first EOS (inclusive); everything after the first
/// EOS is padding and must not influence the score. Rejects sequences without
/// EOS, with BOS/PAD before EOS, or with out-of-vocabulary tokens.
pub fn effective_target(target: &[TokenId], vocab_size: usize) -> Result<&[TokenId]> {
    let eos_at = target
        .iter()
        .position(|&t| t == EOS)
        .ok_or_else(|| Error::contract("target sequence lacks an EOS terminator"))?;
    let eff = &target[..=eos_at];
    for &t in &eff[..eos_at] {
        if t == BOS || t == PAD {
            return Err(Error::contract(format!("control token {t} inside target body")));
        }
        if t as usize >= vocab_size {
            return Err(Error::contract(format!("token {t} outside vocabulary")));
        }
    }
    Ok(eff)
}

/// Scores log q(target | encoder output) on an existing tape. The score is a
/// sum of per-position log-probabilities, not length-normalized.
pub fn sequence_logprob_on_tape(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    cross: &CrossAttnKeys,
    target: &[TokenId],
) -> Result<ValueId> {
    let eff = effective_target(target, cfg.vocab_size)?;
    let mut input: Vec<TokenId> = Vec::with_capacity(eff.len());
    input.push(BOS);
    input.extend_from_slice(&eff[..eff.len() - 1]);
    let rows = decoder_logprob_rows(tape, store, cfg, cross, &input)?;
    let idx: Vec<usize> = eff.iter().map(|&t| t as usize).collect();
    let lp = tape.pick_rowwise(rows, &idx)?;
    tape.sum_all(lp)
}

/// Convenience wrapper: fresh tape, no gradients retained.
pub fn sequence_logprob(
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    target: &[TokenId],
    code: CodeMode,
    lora: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = encode(&mut tape, store, cfg, features, &EncodeOptions::new(code, lora))?;
    let cross = cross_from_encoder(&mut tape, store, cfg, enc)?;
    let lp = sequence_logprob_on_tape(&mut tape, store, cfg, &cross, target)?;
    tape.scalar_value(lp)
}

/// Frozen per-utterance decoding state: cross-attention keys/values as plain
/// value tensors, so each decoding step runs on a small throwaway tape.
pub struct DecodingContext {
    cross_values: Vec<(Tensor, Tensor)>,
}

pub fn prepare_decoding(
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    code: CodeMode,
    lora: bool,
) -> Result<DecodingContext> {
    let mut tape = Tape::new();
    let enc = encode(&mut tape, store, cfg, features, &EncodeOptions::new(code, lora))?;
    let cross = cross_from_encoder(&mut tape, store, cfg, enc)?;
    let cross_values = cross
        .per_layer
        .iter()
        .map(|&(k, v)| {
            let kt = Tensor::from_vec(tape.shape(k), tape.values(k).to_vec())?;
            let vt = Tensor::from_vec(tape.shape(v), tape.values(v).to_vec())?;
            Ok((kt, vt))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecodingContext { cross_values })
}

impl DecodingContext {
    fn onto_tape(&self, tape: &mut Tape) -> Result<CrossAttnKeys> {
        let per_layer = self
            .cross_values
            .iter()
            .map(|(k, v)| {
                let kid = tape.constant(k.shape(), k.values().to_vec())?;
                let vid = tape.constant(v.shape(), v.values().to_vec())?;
                Ok((kid, vid))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CrossAttnKeys { per_layer })
    }
}

/// Next-token log-probabilities after consuming `prefix` (content tokens
/// only, no BOS/EOS). Returns the masked distribution over the vocabulary.
pub fn step_logprobs(
    store: &ParameterStore,
    cfg: &ModelConfig,
    ctx: &DecodingContext,
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let cross = ctx.onto_tape(&mut tape)?;
    let mut input: Vec<TokenId> = Vec::with_capacity(prefix.len() + 1);
    input.push(BOS);
    input.extend_from_slice(prefix);
    let rows = decoder_logprob_rows(&mut tape, store, cfg, &cross, &input)?;
    let v = cfg.vocab_size;
    let last = &tape.values(rows)[(input.len() - 1) * v..input.len() * v];
    Ok(last.to_vec())
}

/// Greedy per-position choices under teacher forcing against `target`.
/// Used as a cheap agreement diagnostic during adaptation.
pub fn teacher_forced_tokens(
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    target: &[TokenId],
    code: CodeMode,
    lora: bool,
) -> Result<Vec<TokenId>> {
    let eff = effective_target(target, cfg.vocab_size)?;
    let mut tape = Tape::new();
    let enc = encode(&mut tape, store, cfg, features, &EncodeOptions::new(code, lora))?;
    let cross = cross_from_encoder(&mut tape, store, cfg, enc)?;
    let mut input: Vec<TokenId> = Vec::with_capacity(eff.len());
    input.push(BOS);
    input.extend_from_slice(&eff[..eff.len() - 1]);
    let rows = decoder_logprob_rows(&mut tape, store, cfg, &cross, &input)?;
    let v = cfg.vocab_size;
    let vals = tape.values(rows);
    Ok((0..input.len())
        .map(|i| {
            let row = &vals[i * v..(i + 1) * v];
            let mut best = 0usize;
            for j in 1..v {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best as TokenId
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    group: ParamGroup,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    tensors: std::collections::BTreeMap<String, CheckpointTensor>,
}

pub fn save_checkpoint(store: &ParameterStore, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let tensors = store
        .iter()
        .map(|(name, p)| {
            (
                name.clone(),
                CheckpointTensor {
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.values().to_vec(),
                    group: p.group,
                    trainable: p.tensor.requires_grad(),
                },
            )
        })
        .collect();
    let ckpt = Checkpoint { config: cfg.clone(), tensors };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterStore)> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&raw)
        .map_err(|e| Error::data(format!("malformed checkpoint {}: {e}", path.display())))?;
    ckpt.config.validate()?;
    let mut store = ParameterStore::new();
    for (name, t) in ckpt.tensors {
        let tensor = Tensor::from_vec(&t.shape, t.values)?;
        let tensor = if t.trainable { tensor.with_grad() } else { tensor };
        store.insert(&name, tensor, t.group)?;
    }
    Ok((ckpt.config, store))
}

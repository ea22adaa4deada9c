//! Per-speaker test-time adaptation: fine-tuning a fresh speaker code
//! and/or low-rank deltas against hypothesis-level objectives, epoch
//! selection on a held-out adapt-dev split, and the surrounding multi-task
//! training loop and experiment grid.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, Utterance};
use crate::decode::{beam_search, BeamSpec, NBestList};
use crate::error::{Error, Result};
use crate::losses::{
    min_entropy_loss, mixed_label_loss, LabelItem, ListItem, LossComputation, LossOptions,
};
use crate::metrics::{aggregate, edit_distance_wer, AggregateMode, WerBreakdown};
use crate::model::{
    apply_lora, build_params, code_param_name, effective_target, register_speaker_code,
    teacher_forced_tokens, CodeMode, ModelConfig, EOS,
};
use crate::optim::Adam;
use crate::seeds;
use crate::tensor::{ParamGroup, ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterSet {
    SpeakerCode,
    Lora,
    Both,
}

impl ParameterSet {
    pub fn name(self) -> &'static str {
        match self {
            ParameterSet::SpeakerCode => "speaker_code",
            ParameterSet::Lora => "lora",
            ParameterSet::Both => "both",
        }
    }

    pub fn uses_code(self) -> bool {
        matches!(self, ParameterSet::SpeakerCode | ParameterSet::Both)
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, ParameterSet::Lora | ParameterSet::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Pseudolabel,
    MinEntropy,
    Oracle,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Pseudolabel => "pseudolabel",
            LossKind::MinEntropy => "min_entropy",
            LossKind::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochSelection {
    /// One epoch for all speakers: the grid point with the lowest mean
    /// adapt-dev score.
    #[default]
    GlobalAverage,
    /// Each speaker keeps its own best epoch.
    PerSpeaker,
}

pub fn default_max_epochs() -> usize {
    50
}
pub fn default_lr_code() -> f64 {
    1e-2
}
pub fn default_lr_lora() -> f64 {
    1e-3
}
pub fn default_n_best() -> usize {
    5
}
pub fn default_beam_width() -> usize {
    8
}
pub fn default_max_decode_len() -> usize {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptPlan {
    pub parameter_set: ParameterSet,
    pub loss_kind: LossKind,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr_code")]
    pub lr_code: f64,
    #[serde(default = "default_lr_lora")]
    pub lr_lora: f64,
    #[serde(default = "default_n_best")]
    pub n_best: usize,
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    #[serde(default = "default_max_decode_len")]
    pub max_decode_len: usize,
    #[serde(default)]
    pub epoch_selection: EpochSelection,
    /// Freeze the renormalizer when backpropagating; ablation flag.
    #[serde(default)]
    pub stop_grad_normalizer: bool,
    /// Re-decode hypothesis sets from the adapting model every epoch
    /// instead of freezing them at the unadapted decode; ablation flag.
    #[serde(default)]
    pub refresh_hypotheses: bool,
}

impl AdaptPlan {
    pub fn new(parameter_set: ParameterSet, loss_kind: LossKind) -> AdaptPlan {
        AdaptPlan {
            parameter_set,
            loss_kind,
            max_epochs: default_max_epochs(),
            lr_code: default_lr_code(),
            lr_lora: default_lr_lora(),
            n_best: default_n_best(),
            beam_width: default_beam_width(),
            max_decode_len: default_max_decode_len(),
            epoch_selection: EpochSelection::default(),
            stop_grad_normalizer: false,
            refresh_hypotheses: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::contract("adaptation needs at least one epoch"));
        }
        if self.lr_code <= 0.0 || self.lr_lora <= 0.0 {
            return Err(Error::contract("learning rates must be positive"));
        }
        self.decode_spec().validate()
    }

    pub fn decode_spec(&self) -> BeamSpec {
        BeamSpec { beam_width: self.beam_width, n_best: self.n_best, max_len: self.max_decode_len }
    }
}

/// Values of the adapted tensors at one epoch. Snapshots deliberately
/// exclude everything else, which both keeps them small and proves the
/// frozen parameters never moved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tensors: BTreeMap<String, SnapshotTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub group: ParamGroup,
}

fn capture_snapshot(store: &ParameterStore, names: &[String]) -> Result<Snapshot> {
    let mut tensors = BTreeMap::new();
    for name in names {
        let t = store.tensor(name)?;
        tensors.insert(
            name.clone(),
            SnapshotTensor {
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
                group: store.get(name)?.group,
            },
        );
    }
    Ok(Snapshot { tensors })
}

/// Writes snapshot values into the store, creating missing tensors. The
/// target is a clone of the training checkpoint, so adapted tensors from a
/// test speaker are usually missing rather than stale.
pub fn apply_snapshot(store: &mut ParameterStore, snapshot: &Snapshot) -> Result<()> {
    for (name, t) in &snapshot.tensors {
        if store.contains(name) {
            let dst = store.tensor_mut(name)?;
            if dst.shape() != t.shape.as_slice() {
                return Err(Error::dim(format!(
                    "snapshot tensor '{name}' has shape {:?}, store has {:?}",
                    t.shape,
                    dst.shape()
                )));
            }
            dst.values_mut().copy_from_slice(&t.values);
        } else {
            store.insert(name, Tensor::from_vec(&t.shape, t.values.clone())?, t.group)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective value on the adaptation subset at this epoch's parameters.
    pub adapt_loss: f64,
    /// Same objective evaluated on adapt-dev; drives epoch selection.
    pub selection_score: f64,
    /// Teacher-forced token agreement with the frozen adapt-dev
    /// pseudolabels; logged as a label-free diagnostic, never selected on.
    pub pseudolabel_agreement: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptationTrace {
    pub speaker_id: String,
    pub records: Vec<EpochRecord>,
    pub snapshots: Vec<Snapshot>,
}

/// Frozen hypothesis sets for one speaker, decoded once with the unadapted
/// model: zero code, no low-rank deltas.
#[derive(Debug, Clone)]
pub struct SpeakerCache {
    pub lists: BTreeMap<String, NBestList>,
}

pub fn decode_speaker_cache(
    store: &ParameterStore,
    cfg: &ModelConfig,
    corpus: &Corpus,
    speaker_id: &str,
    spec: BeamSpec,
) -> Result<SpeakerCache> {
    let mut lists = BTreeMap::new();
    for split in [Split::Adapt, Split::AdaptDev] {
        for u in corpus.utterances_for(speaker_id, split) {
            let list = beam_search(store, cfg, &u.features, CodeMode::Zero, false, &u.utt_id, spec)?;
            lists.insert(u.utt_id.clone(), list);
        }
    }
    Ok(SpeakerCache { lists })
}

fn decode_current_lists(
    store: &ParameterStore,
    cfg: &ModelConfig,
    utts: &[&Utterance],
    code: CodeMode,
    lora: bool,
    spec: BeamSpec,
) -> Result<BTreeMap<String, NBestList>> {
    let mut lists = BTreeMap::new();
    for u in utts {
        let list = beam_search(store, cfg, &u.features, code, lora, &u.utt_id, spec)?;
        lists.insert(u.utt_id.clone(), list);
    }
    Ok(lists)
}

fn batch_objective(
    store: &ParameterStore,
    cfg: &ModelConfig,
    utts: &[&Utterance],
    lists: &BTreeMap<String, NBestList>,
    kind: LossKind,
    opts: &LossOptions,
) -> Result<LossComputation> {
    match kind {
        LossKind::MinEntropy => {
            let items: Vec<ListItem> = utts
                .iter()
                .map(|u| {
                    lists
                        .get(&u.utt_id)
                        .map(|list| ListItem { features: &u.features, list })
                        .ok_or_else(|| {
                            Error::contract(format!("no hypothesis list for '{}'", u.utt_id))
                        })
                })
                .collect::<Result<_>>()?;
            min_entropy_loss(store, cfg, &items, opts)
        }
        LossKind::Pseudolabel => {
            let items: Vec<(LabelItem, LossOptions)> = utts
                .iter()
                .map(|u| {
                    lists
                        .get(&u.utt_id)
                        .map(|list| {
                            let item = LabelItem {
                                features: &u.features,
                                label: &list.hypotheses[0].tokens,
                            };
                            (item, *opts)
                        })
                        .ok_or_else(|| {
                            Error::contract(format!("no hypothesis list for '{}'", u.utt_id))
                        })
                })
                .collect::<Result<_>>()?;
            mixed_label_loss(store, cfg, &items)
        }
        LossKind::Oracle => {
            let items: Vec<(LabelItem, LossOptions)> = utts
                .iter()
                .map(|u| (LabelItem { features: &u.features, label: &u.tokens }, *opts))
                .collect();
            mixed_label_loss(store, cfg, &items)
        }
    }
}

/// Teacher-forced token agreement between the current model and the frozen
/// pseudolabels of the given utterances.
fn pseudolabel_agreement(
    store: &ParameterStore,
    cfg: &ModelConfig,
    utts: &[&Utterance],
    lists: &BTreeMap<String, NBestList>,
    code: CodeMode,
    lora: bool,
) -> Result<f64> {
    let mut matched = 0usize;
    let mut total = 0usize;
    for u in utts {
        let label = &lists
            .get(&u.utt_id)
            .ok_or_else(|| Error::contract(format!("no hypothesis list for '{}'", u.utt_id)))?
            .hypotheses[0]
            .tokens;
        let eff = effective_target(label, cfg.vocab_size)?;
        let pred = teacher_forced_tokens(store, cfg, &u.features, label, code, lora)?;
        matched += pred.iter().zip(eff).filter(|(p, t)| p == t).count();
        total += eff.len();
    }
    if total == 0 {
        return Err(Error::contract("agreement over zero positions"));
    }
    Ok(matched as f64 / total as f64)
}

/// Fine-tunes a fresh speaker code and/or fresh low-rank deltas for one
/// unseen speaker against the plan's objective, recording a per-epoch loss,
/// selection score, and snapshot. Record 0 is the untouched initialization,
/// so selection may conclude that no adaptation was best.
pub fn adapt_speaker(
    corpus: &Corpus,
    base: &ParameterStore,
    cfg: &ModelConfig,
    speaker_id: &str,
    plan: &AdaptPlan,
    amount: usize,
    cache: &SpeakerCache,
    seed: u64,
) -> Result<AdaptationTrace> {
    plan.validate()?;
    if corpus.manifest.train_speakers.iter().any(|s| s == speaker_id) {
        return Err(Error::contract(format!(
            "speaker '{speaker_id}' was seen in training; adaptation targets unseen speakers"
        )));
    }
    let adapt_utts = corpus.subset_adaptation_data(speaker_id, amount)?;
    let dev_utts = corpus.utterances_for(speaker_id, Split::AdaptDev);
    if dev_utts.is_empty() {
        return Err(Error::contract(format!(
            "speaker '{speaker_id}' has no adapt-dev utterances for epoch selection"
        )));
    }

    let mut store = base.clone();
    store.freeze_all();
    let code_name = if plan.parameter_set.uses_code() {
        let name = register_speaker_code(&mut store, cfg, speaker_id)?;
        store.set_trainable(&name, true)?;
        Some(name)
    } else {
        None
    };
    if plan.parameter_set.uses_lora() {
        apply_lora(&mut store, cfg, seeds::derive(seed, &["adapt", speaker_id, "lora"]))?;
        store.set_group_trainable(ParamGroup::Lora, true);
    }
    let code = code_name.as_deref().map(CodeMode::Named).unwrap_or(CodeMode::Zero);
    let lora = plan.parameter_set.uses_lora();
    let opts = LossOptions {
        code,
        lora,
        stop_grad_normalizer: plan.stop_grad_normalizer,
    };

    let mut adapted_names: Vec<String> = Vec::new();
    if let Some(name) = &code_name {
        adapted_names.push(name.clone());
    }
    if lora {
        adapted_names.extend(store.group_names(ParamGroup::Lora));
    }

    let mut opt_code = Adam::new(plan.lr_code);
    let mut opt_lora = Adam::new(plan.lr_lora);
    let mut lists = cache.lists.clone();
    let mut records = Vec::with_capacity(plan.max_epochs + 1);
    let mut snapshots = Vec::with_capacity(plan.max_epochs + 1);

    for epoch in 0..=plan.max_epochs {
        if plan.refresh_hypotheses && epoch > 0 {
            let mut all: Vec<&Utterance> = adapt_utts.clone();
            all.extend(dev_utts.iter().copied());
            lists = decode_current_lists(&store, cfg, &all, code, lora, plan.decode_spec())?;
        }
        let mut comp = batch_objective(&store, cfg, &adapt_utts, &lists, plan.loss_kind, &opts)?;
        let selection_score =
            batch_objective(&store, cfg, &dev_utts, &lists, plan.loss_kind, &opts)?.value;
        let agreement = pseudolabel_agreement(&store, cfg, &dev_utts, &lists, code, lora)?;
        records.push(EpochRecord {
            epoch,
            adapt_loss: comp.value,
            selection_score,
            pseudolabel_agreement: agreement,
        });
        snapshots.push(capture_snapshot(&store, &adapted_names)?);
        if epoch == plan.max_epochs {
            break;
        }
        store.zero_grads();
        comp.accumulate_grads(&mut store)?;
        if let Some(name) = &code_name {
            opt_code.step_named(&mut store, std::slice::from_ref(name))?;
        }
        if lora {
            opt_lora.step(&mut store, &[ParamGroup::Lora])?;
        }
    }

    Ok(AdaptationTrace { speaker_id: speaker_id.to_string(), records, snapshots })
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpochChoice {
    Global(usize),
    PerSpeaker(BTreeMap<String, usize>),
}

impl EpochChoice {
    pub fn for_speaker(&self, speaker_id: &str) -> Result<usize> {
        match self {
            EpochChoice::Global(e) => Ok(*e),
            EpochChoice::PerSpeaker(map) => map
                .get(speaker_id)
                .copied()
                .ok_or_else(|| Error::contract(format!("no chosen epoch for '{speaker_id}'"))),
        }
    }
}

fn argmin_latest(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = 0usize;
    let mut best_score = f64::INFINITY;
    for (i, s) in scores.enumerate() {
        if s <= best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Picks the adaptation epoch from the recorded adapt-dev scores: one global
/// epoch minimizing the cross-speaker mean, or one epoch per speaker. Ties
/// resolve to the latest epoch.
pub fn select_epoch(traces: &[AdaptationTrace], mode: EpochSelection) -> Result<EpochChoice> {
    if traces.is_empty() {
        return Err(Error::contract("no traces to select an epoch from"));
    }
    let grid = traces[0].records.len();
    if traces.iter().any(|t| t.records.len() != grid) {
        return Err(Error::contract("traces disagree on the epoch grid"));
    }
    match mode {
        EpochSelection::GlobalAverage => {
            let means = (0..grid).map(|e| {
                traces.iter().map(|t| t.records[e].selection_score).sum::<f64>()
                    / traces.len() as f64
            });
            Ok(EpochChoice::Global(argmin_latest(means)))
        }
        EpochSelection::PerSpeaker => {
            let map = traces
                .iter()
                .map(|t| {
                    let e = argmin_latest(t.records.iter().map(|r| r.selection_score));
                    (t.speaker_id.clone(), e)
                })
                .collect();
            Ok(EpochChoice::PerSpeaker(map))
        }
    }
}

/// Decodes a speaker's test split with 1-best beam search and pools the
/// edit-distance counts into one per-speaker report.
pub fn evaluate_speaker(
    store: &ParameterStore,
    cfg: &ModelConfig,
    corpus: &Corpus,
    speaker_id: &str,
    code: CodeMode,
    lora: bool,
    spec: BeamSpec,
) -> Result<WerBreakdown> {
    let utts = corpus.utterances_for(speaker_id, Split::Test);
    if utts.is_empty() {
        return Err(Error::contract(format!("speaker '{speaker_id}' has no test utterances")));
    }
    let one_best = BeamSpec { n_best: 1, ..spec };
    let mut reports = Vec::with_capacity(utts.len());
    for u in utts {
        let list = beam_search(store, cfg, &u.features, code, lora, &u.utt_id, one_best)?;
        reports.push(edit_distance_wer(&u.tokens, &list.hypotheses[0].tokens)?);
    }
    WerBreakdown::merge(&reports)
}

/// Applies one trace's chosen snapshot to a clone of the base checkpoint
/// and evaluates that speaker's test WER.
pub fn evaluate_snapshot(
    base: &ParameterStore,
    cfg: &ModelConfig,
    corpus: &Corpus,
    trace: &AdaptationTrace,
    plan: &AdaptPlan,
    epoch: usize,
) -> Result<WerBreakdown> {
    let snapshot = trace
        .snapshots
        .get(epoch)
        .ok_or_else(|| Error::contract(format!("trace has no snapshot for epoch {epoch}")))?;
    let mut store = base.clone();
    apply_snapshot(&mut store, snapshot)?;
    let code_name =
        plan.parameter_set.uses_code().then(|| code_param_name(&trace.speaker_id));
    let code = code_name.as_deref().map(CodeMode::Named).unwrap_or(CodeMode::Zero);
    evaluate_speaker(
        &store,
        cfg,
        corpus,
        &trace.speaker_id,
        code,
        plan.parameter_set.uses_lora(),
        plan.decode_spec(),
    )
}

fn default_train_steps() -> usize {
    1200
}
fn default_batch_size() -> usize {
    16
}
fn default_zero_code_fraction() -> f64 {
    0.5
}
fn default_warmup_epochs() -> usize {
    5
}
fn default_train_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Share of utterances per batch whose speaker code is clamped to zero
    /// and receives no gradient, so the model also works code-free.
    #[serde(default = "default_zero_code_fraction")]
    pub zero_code_fraction: f64,
    /// Epochs during which every code stays clamped at zero.
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs_codes_frozen: usize,
    #[serde(default = "default_train_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> TrainPlan {
        TrainPlan {
            steps: default_train_steps(),
            batch_size: default_batch_size(),
            zero_code_fraction: default_zero_code_fraction(),
            warmup_epochs_codes_frozen: default_warmup_epochs(),
            learning_rate: default_train_lr(),
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::contract("steps and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.zero_code_fraction) {
            return Err(Error::contract("zero_code_fraction must lie in [0, 1]"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::contract("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub train_loss: f64,
    pub dev_accuracy_with_codes: f64,
    pub dev_accuracy_zero_code: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    /// Epoch-end rows; the last training step always gets a row.
    pub curve: Vec<CurveRow>,
    /// Loss at every executed step, in order. A resumed run's first entry
    /// is bitwise equal to what the uninterrupted run saw at that step.
    pub step_losses: Vec<f64>,
}

/// Teacher-forced token accuracy on the train-dev split, with speaker codes
/// either engaged or clamped to zero.
pub fn train_dev_accuracy(
    store: &ParameterStore,
    cfg: &ModelConfig,
    corpus: &Corpus,
    with_codes: bool,
) -> Result<f64> {
    let mut matched = 0usize;
    let mut total = 0usize;
    for u in corpus.utterances.iter().filter(|u| u.split == Split::TrainDev) {
        let mut target = u.tokens.clone();
        target.push(EOS);
        let name = code_param_name(&u.speaker_id);
        let code = if with_codes && store.contains(&name) {
            CodeMode::Named(&name)
        } else {
            CodeMode::Zero
        };
        let pred = teacher_forced_tokens(store, cfg, &u.features, &target, code, false)?;
        matched += pred.iter().zip(&target).filter(|(p, t)| p == t).count();
        total += target.len();
    }
    if total == 0 {
        return Err(Error::contract("train-dev split is empty"));
    }
    Ok(matched as f64 / total as f64)
}

/// Joint training of the recognizer, the code projections, and one code per
/// training speaker, with multi-task zero-code clamping. Only codes of
/// speakers present (and unclamped) in a batch take an optimizer step.
pub fn train_base(corpus: &Corpus, cfg: &ModelConfig, plan: &TrainPlan) -> Result<TrainOutcome> {
    plan.validate()?;
    cfg.validate()?;
    let mut store = build_params(cfg, seeds::derive(plan.seed, &["init"]))?;
    for sid in &corpus.manifest.train_speakers {
        register_speaker_code(&mut store, cfg, sid)?;
    }
    resume_training(corpus, cfg, plan, store, 0)
}

/// Continues a training run from `start_step` on an existing store. Batch
/// composition and clamping masks depend only on (seed, step), so a resumed
/// run sees exactly the data an uninterrupted run would have seen. Optimizer
/// moments are not carried across the boundary.
pub fn resume_training(
    corpus: &Corpus,
    cfg: &ModelConfig,
    plan: &TrainPlan,
    mut store: ParameterStore,
    start_step: usize,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if start_step > plan.steps {
        return Err(Error::contract(format!(
            "start step {start_step} is beyond the plan's {} steps",
            plan.steps
        )));
    }
    store.set_group_trainable(ParamGroup::Base, true);
    store.set_group_trainable(ParamGroup::CodeProjection, true);
    let mut code_names: BTreeMap<String, String> = BTreeMap::new();
    for sid in &corpus.manifest.train_speakers {
        let name = code_param_name(sid);
        if !store.contains(&name) {
            return Err(Error::contract(format!("store lacks the code for '{sid}'")));
        }
        store.set_trainable(&name, true)?;
        code_names.insert(sid.clone(), name);
    }

    let train_utts: Vec<&Utterance> =
        corpus.utterances.iter().filter(|u| u.split == Split::Train).collect();
    if train_utts.is_empty() {
        return Err(Error::data("corpus has no training utterances"));
    }
    let epoch_len = train_utts.len().div_ceil(plan.batch_size);
    let warmup_steps = plan.warmup_epochs_codes_frozen * epoch_len;

    let mut shared_names = store.group_names(ParamGroup::Base);
    shared_names.extend(store.group_names(ParamGroup::CodeProjection));

    let mut optimizer = Adam::new(plan.learning_rate);
    let mut curve: Vec<CurveRow> = Vec::new();
    let mut step_losses: Vec<f64> = Vec::with_capacity(plan.steps - start_step);
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;

    for step in start_step..plan.steps {
        let epoch = step / epoch_len;
        if epoch != order_epoch {
            order = shuffled_indices(train_utts.len(), plan.seed, epoch as u64);
            order_epoch = epoch;
        }
        let lo = (step % epoch_len) * plan.batch_size;
        let hi = (lo + plan.batch_size).min(order.len());
        let batch: Vec<&Utterance> = order[lo..hi].iter().map(|&i| train_utts[i]).collect();

        let mut pick = ChaCha8Rng::seed_from_u64(seeds::derive_indexed(
            plan.seed,
            &["zero_code"],
            step as u64,
        ));
        let warm = step < warmup_steps;
        let mut items: Vec<(LabelItem, LossOptions)> = Vec::with_capacity(batch.len());
        let mut active_codes: Vec<String> = Vec::new();
        for u in &batch {
            let clamp = warm || pick.random_bool(plan.zero_code_fraction);
            let code = if clamp {
                CodeMode::Zero
            } else {
                let name = &code_names[&u.speaker_id];
                if !active_codes.contains(name) {
                    active_codes.push(name.clone());
                }
                CodeMode::Named(name)
            };
            items.push((
                LabelItem { features: &u.features, label: &u.tokens },
                LossOptions { code, lora: false, stop_grad_normalizer: false },
            ));
        }

        let mut comp = mixed_label_loss(&store, cfg, &items)?;
        step_losses.push(comp.value);
        store.zero_grads();
        comp.accumulate_grads(&mut store)?;
        let mut step_names = shared_names.clone();
        step_names.extend(active_codes);
        optimizer.step_named(&mut store, &step_names)?;

        let last = step + 1 == plan.steps;
        if (step + 1) % epoch_len == 0 || last {
            curve.push(CurveRow {
                step: step + 1,
                train_loss: comp.value,
                dev_accuracy_with_codes: train_dev_accuracy(&store, cfg, corpus, true)?,
                dev_accuracy_zero_code: train_dev_accuracy(&store, cfg, corpus, false)?,
            });
        }
    }
    Ok(TrainOutcome { store, curve, step_losses })
}

fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_indexed(seed, &["order"], epoch));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub speaker_id: String,
    pub parameter_set: String,
    pub loss_kind: String,
    pub amount_utts: usize,
    pub chosen_epoch: usize,
    pub wer_unadapted: f64,
    pub wer_adapted: f64,
}

pub const SUMMARY_HEADER: &str =
    "speaker_id\tparameter_set\tloss_kind\tamount_utts\tchosen_epoch\twer_unadapted\twer_adapted";

pub fn summary_tsv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
            r.speaker_id,
            r.parameter_set,
            r.loss_kind,
            r.amount_utts,
            r.chosen_epoch,
            r.wer_unadapted,
            r.wer_adapted
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub speaker_id: String,
    pub parameter_set: ParameterSet,
    pub loss_kind: LossKind,
    pub amount_utts: usize,
    pub chosen_epoch: usize,
    pub per_epoch: Vec<EpochRecord>,
    pub wer_unadapted: f64,
    pub wer_adapted: f64,
}

fn all_parameter_sets() -> Vec<ParameterSet> {
    vec![ParameterSet::SpeakerCode, ParameterSet::Lora, ParameterSet::Both]
}
fn all_loss_kinds() -> Vec<LossKind> {
    vec![LossKind::Pseudolabel, LossKind::MinEntropy, LossKind::Oracle]
}
fn default_amounts() -> Vec<usize> {
    vec![crate::corpus::ONE_MINUTE_UTTS, crate::corpus::TEN_MINUTE_UTTS]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptGrid {
    #[serde(default = "all_parameter_sets")]
    pub parameter_sets: Vec<ParameterSet>,
    #[serde(default = "all_loss_kinds")]
    pub loss_kinds: Vec<LossKind>,
    #[serde(default = "default_amounts")]
    pub amounts: Vec<usize>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr_code")]
    pub lr_code: f64,
    #[serde(default = "default_lr_lora")]
    pub lr_lora: f64,
    #[serde(default = "default_n_best")]
    pub n_best: usize,
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    #[serde(default = "default_max_decode_len")]
    pub max_decode_len: usize,
    #[serde(default)]
    pub epoch_selection: EpochSelection,
    #[serde(default)]
    pub stop_grad_normalizer: bool,
    #[serde(default)]
    pub refresh_hypotheses: bool,
}

impl Default for AdaptGrid {
    /// Full experiment surface: every parameter set crossed with every
    /// objective, at the one-minute and ten-minute data amounts.
    fn default() -> AdaptGrid {
        AdaptGrid {
            parameter_sets: all_parameter_sets(),
            loss_kinds: all_loss_kinds(),
            amounts: default_amounts(),
            max_epochs: default_max_epochs(),
            lr_code: default_lr_code(),
            lr_lora: default_lr_lora(),
            n_best: default_n_best(),
            beam_width: default_beam_width(),
            max_decode_len: default_max_decode_len(),
            epoch_selection: EpochSelection::default(),
            stop_grad_normalizer: false,
            refresh_hypotheses: false,
        }
    }
}

impl AdaptGrid {
    pub fn plan(&self, parameter_set: ParameterSet, loss_kind: LossKind) -> AdaptPlan {
        AdaptPlan {
            parameter_set,
            loss_kind,
            max_epochs: self.max_epochs,
            lr_code: self.lr_code,
            lr_lora: self.lr_lora,
            n_best: self.n_best,
            beam_width: self.beam_width,
            max_decode_len: self.max_decode_len,
            epoch_selection: self.epoch_selection,
            stop_grad_normalizer: self.stop_grad_normalizer,
            refresh_hypotheses: self.refresh_hypotheses,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parameter_sets.is_empty() || self.loss_kinds.is_empty() || self.amounts.is_empty()
        {
            return Err(Error::contract("grid axes must be nonempty"));
        }
        self.plan(self.parameter_sets[0], self.loss_kinds[0]).validate()
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// One aggregate unadapted row first, then one row per (cell, speaker),
    /// sorted for byte-stable output.
    pub summary: Vec<SummaryRow>,
    pub reports: Vec<AdaptationReport>,
    /// Human-readable notes for speakers whose adaptation aborted.
    pub aborted: Vec<String>,
}

/// Runs the full adaptation grid over every test speaker. Speakers are
/// independent jobs; `jobs` bounds the worker threads and has no effect on
/// the output bytes. A degenerate-mass abort drops that speaker from the
/// affected cell and the grid continues.
pub fn run_grid(
    corpus: &Corpus,
    base: &ParameterStore,
    cfg: &ModelConfig,
    grid: &AdaptGrid,
    seed: u64,
    jobs: usize,
) -> Result<GridOutcome> {
    use rayon::prelude::*;
    grid.validate()?;
    let speakers: Vec<String> = corpus.manifest.test_speakers.clone();
    if speakers.is_empty() {
        return Err(Error::data("corpus has no test speakers"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Resource(format!("worker pool: {e}")))?;

    let spec = BeamSpec {
        beam_width: grid.beam_width,
        n_best: grid.n_best,
        max_len: grid.max_decode_len,
    };

    // Frozen hypothesis sets and unadapted baselines, one per speaker,
    // shared by every grid cell.
    let prepared: Vec<(String, SpeakerCache, WerBreakdown)> = pool.install(|| {
        speakers
            .par_iter()
            .map(|sid| {
                let cache = decode_speaker_cache(base, cfg, corpus, sid, spec)?;
                let baseline =
                    evaluate_speaker(base, cfg, corpus, sid, CodeMode::Zero, false, spec)?;
                Ok((sid.clone(), cache, baseline))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut summary: Vec<SummaryRow> = Vec::new();
    let mut reports: Vec<AdaptationReport> = Vec::new();
    let mut aborted: Vec<String> = Vec::new();

    let unadapted_mean = {
        let breakdowns: Vec<WerBreakdown> = prepared.iter().map(|(_, _, b)| *b).collect();
        aggregate(&breakdowns, AggregateMode::PerSpeakerMean)?
    };
    summary.push(SummaryRow {
        speaker_id: "all".to_string(),
        parameter_set: "unadapted".to_string(),
        loss_kind: "none".to_string(),
        amount_utts: 0,
        chosen_epoch: 0,
        wer_unadapted: unadapted_mean,
        wer_adapted: unadapted_mean,
    });

    for &pset in &grid.parameter_sets {
        for &kind in &grid.loss_kinds {
            let plan = grid.plan(pset, kind);
            for &amount in &grid.amounts {
                let cell: Vec<std::result::Result<AdaptationTrace, (String, Error)>> =
                    pool.install(|| {
                        prepared
                            .par_iter()
                            .map(|(sid, cache, _)| {
                                adapt_speaker(corpus, base, cfg, sid, &plan, amount, cache, seed)
                                    .map_err(|e| (sid.clone(), e))
                            })
                            .collect()
                    });
                let mut traces: Vec<AdaptationTrace> = Vec::new();
                for res in cell {
                    match res {
                        Ok(trace) => traces.push(trace),
                        Err((sid, Error::DegenerateMass(msg))) => aborted.push(format!(
                            "{sid} [{} {} {amount}]: {msg}",
                            pset.name(),
                            kind.name()
                        )),
                        Err((_, e)) => return Err(e),
                    }
                }
                if traces.is_empty() {
                    continue;
                }
                let choice = select_epoch(&traces, plan.epoch_selection)?;
                let evaluated: Vec<(usize, WerBreakdown)> = pool.install(|| {
                    traces
                        .par_iter()
                        .map(|trace| {
                            let epoch = choice.for_speaker(&trace.speaker_id)?;
                            let wer =
                                evaluate_snapshot(base, cfg, corpus, trace, &plan, epoch)?;
                            Ok((epoch, wer))
                        })
                        .collect::<Result<Vec<_>>>()
                })?;
                for (trace, (epoch, wer)) in traces.iter().zip(&evaluated) {
                    let baseline = prepared
                        .iter()
                        .find(|(sid, _, _)| sid == &trace.speaker_id)
                        .map(|(_, _, b)| b.wer())
                        .expect("prepared covers every trace");
                    summary.push(SummaryRow {
                        speaker_id: trace.speaker_id.clone(),
                        parameter_set: pset.name().to_string(),
                        loss_kind: kind.name().to_string(),
                        amount_utts: amount,
                        chosen_epoch: *epoch,
                        wer_unadapted: baseline,
                        wer_adapted: wer.wer(),
                    });
                    reports.push(AdaptationReport {
                        speaker_id: trace.speaker_id.clone(),
                        parameter_set: pset,
                        loss_kind: kind,
                        amount_utts: amount,
                        chosen_epoch: *epoch,
                        per_epoch: trace.records.clone(),
                        wer_unadapted: baseline,
                        wer_adapted: wer.wer(),
                    });
                }
            }
        }
    }

    summary[1..].sort_by(|a, b| {
        (&a.parameter_set, &a.loss_kind, a.amount_utts, &a.speaker_id)
            .cmp(&(&b.parameter_set, &b.loss_kind, b.amount_utts, &b.speaker_id))
    });
    reports.sort_by(|a, b| {
        (a.parameter_set, a.loss_kind, a.amount_utts, &a.speaker_id)
            .cmp(&(b.parameter_set, b.loss_kind, b.amount_utts, &b.speaker_id))
    });
    Ok(GridOutcome { summary, reports, aborted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, load_corpus, CorpusConfig};

    fn trace_with(speaker: &str, scores: &[f64]) -> AdaptationTrace {
        AdaptationTrace {
            speaker_id: speaker.to_string(),
            records: scores
                .iter()
                .enumerate()
                .map(|(epoch, &s)| EpochRecord {
                    epoch,
                    adapt_loss: s,
                    selection_score: s,
                    pseudolabel_agreement: 0.0,
                })
                .collect(),
            snapshots: scores.iter().map(|_| Snapshot { tensors: BTreeMap::new() }).collect(),
        }
    }

    #[test]
    fn epoch_selection_follows_the_protocol() {
        let a = trace_with("a", &[3.0, 1.0, 2.0]);
        let b = trace_with("b", &[3.0, 2.0, 1.0]);
        match select_epoch(&[a.clone(), b.clone()], EpochSelection::GlobalAverage).unwrap() {
            EpochChoice::Global(e) => assert_eq!(e, 2, "means tie at 1.5; latest wins"),
            other => panic!("unexpected choice {other:?}"),
        }
        match select_epoch(&[a.clone(), b.clone()], EpochSelection::PerSpeaker).unwrap() {
            EpochChoice::PerSpeaker(map) => {
                assert_eq!(map["a"], 1);
                assert_eq!(map["b"], 2);
            }
            other => panic!("unexpected choice {other:?}"),
        }
        let lone = trace_with("c", &[5.0, 4.0, 3.0]);
        match select_epoch(&[lone], EpochSelection::GlobalAverage).unwrap() {
            EpochChoice::Global(e) => assert_eq!(e, 2, "monotone decrease picks the last epoch"),
            other => panic!("unexpected choice {other:?}"),
        }
        let short = trace_with("d", &[1.0]);
        assert!(select_epoch(&[a, short], EpochSelection::GlobalAverage).is_err());
    }

    fn tiny_model() -> ModelConfig {
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

    fn tiny_corpus_config() -> CorpusConfig {
        CorpusConfig {
            n_train_speakers: 2,
            n_test_speakers: 2,
            n_train_utts: 6,
            n_train_dev_utts: 3,
            n_adapt_utts: 3,
            n_adapt_dev_utts: 2,
            n_test_utts: 2,
            min_tokens: 2,
            max_tokens: 4,
            d_feat: 4,
            vocab_size: 6,
            corpus_seed: 77,
            ..CorpusConfig::preset("clean-noise").unwrap()
        }
    }

    struct Fixture {
        corpus: Corpus,
        cfg: ModelConfig,
        store: ParameterStore,
        _dir: tempfile::TempDir,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().expect("tempdir");
        let ccfg = tiny_corpus_config();
        generate_corpus(&ccfg, dir.path()).expect("generate");
        let corpus = load_corpus(dir.path()).expect("load");
        let cfg = tiny_model();
        let plan = TrainPlan {
            steps: 8,
            batch_size: 4,
            warmup_epochs_codes_frozen: 1,
            seed: 5,
            ..TrainPlan::default()
        };
        let store = train_base(&corpus, &cfg, &plan).expect("train").store;
        Fixture { corpus, cfg, store, _dir: dir }
    }

    fn quick_plan(pset: ParameterSet, kind: LossKind) -> AdaptPlan {
        AdaptPlan {
            max_epochs: 3,
            n_best: 2,
            beam_width: 4,
            max_decode_len: 6,
            ..AdaptPlan::new(pset, kind)
        }
    }

    #[test]
    fn adaptation_freezes_everything_outside_the_plan() {
        let f = fixture();
        let plan = quick_plan(ParameterSet::SpeakerCode, LossKind::MinEntropy);
        let cache =
            decode_speaker_cache(&f.store, &f.cfg, &f.corpus, "tst000", plan.decode_spec())
                .expect("cache");
        let trace = adapt_speaker(&f.corpus, &f.store, &f.cfg, "tst000", &plan, 3, &cache, 9)
            .expect("adapt");
        assert_eq!(trace.records.len(), 4, "epoch 0 plus three steps");
        // The snapshots hold only the speaker code.
        for snap in &trace.snapshots {
            assert_eq!(snap.tensors.len(), 1);
            assert!(snap.tensors.contains_key(&code_param_name("tst000")));
        }
        // Epoch 0 is the untouched zero code.
        let first = &trace.snapshots[0].tensors[&code_param_name("tst000")];
        assert!(first.values.iter().all(|&v| v == 0.0));
        // Codes actually move under the objective.
        let last = &trace.snapshots[3].tensors[&code_param_name("tst000")];
        assert!(last.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn training_speakers_are_rejected_for_adaptation() {
        let f = fixture();
        let plan = quick_plan(ParameterSet::SpeakerCode, LossKind::Oracle);
        let cache = SpeakerCache { lists: BTreeMap::new() };
        let err = adapt_speaker(&f.corpus, &f.store, &f.cfg, "trn000", &plan, 1, &cache, 9)
            .expect_err("train speaker");
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn epoch_zero_scores_match_the_unadapted_model() {
        let f = fixture();
        for pset in [ParameterSet::SpeakerCode, ParameterSet::Lora, ParameterSet::Both] {
            let plan = AdaptPlan { max_epochs: 1, ..quick_plan(pset, LossKind::MinEntropy) };
            let cache =
                decode_speaker_cache(&f.store, &f.cfg, &f.corpus, "tst001", plan.decode_spec())
                    .expect("cache");
            let trace =
                adapt_speaker(&f.corpus, &f.store, &f.cfg, "tst001", &plan, 3, &cache, 10)
                    .expect("adapt");
            // The loss at the fresh initialization must equal the loss of
            // the plain unadapted model on the same frozen lists.
            let utts = f.corpus.subset_adaptation_data("tst001", 3).expect("subset");
            let items: Vec<ListItem> = utts
                .iter()
                .map(|u| ListItem { features: &u.features, list: &cache.lists[&u.utt_id] })
                .collect();
            let unadapted = min_entropy_loss(
                &f.store,
                &f.cfg,
                &items,
                &LossOptions::new(CodeMode::Zero, false),
            )
            .expect("loss");
            assert!(
                (trace.records[0].adapt_loss - unadapted.value).abs() < 1e-12,
                "{pset:?}: {} vs {}",
                trace.records[0].adapt_loss,
                unadapted.value
            );
        }
    }

    #[test]
    fn oracle_adaptation_descends_on_its_objective() {
        let f = fixture();
        let plan = AdaptPlan {
            max_epochs: 8,
            ..quick_plan(ParameterSet::Both, LossKind::Oracle)
        };
        let cache =
            decode_speaker_cache(&f.store, &f.cfg, &f.corpus, "tst000", plan.decode_spec())
                .expect("cache");
        let trace = adapt_speaker(&f.corpus, &f.store, &f.cfg, "tst000", &plan, 3, &cache, 11)
            .expect("adapt");
        let first = trace.records[0].adapt_loss;
        let last = trace.records.last().unwrap().adapt_loss;
        assert!(last < first, "oracle loss went {first} -> {last}");
    }

    #[test]
    fn evaluate_consistency_between_snapshot_zero_and_baseline() {
        let f = fixture();
        let plan = quick_plan(ParameterSet::Both, LossKind::Pseudolabel);
        let cache =
            decode_speaker_cache(&f.store, &f.cfg, &f.corpus, "tst000", plan.decode_spec())
                .expect("cache");
        let trace = adapt_speaker(&f.corpus, &f.store, &f.cfg, "tst000", &plan, 3, &cache, 12)
            .expect("adapt");
        let at_zero = evaluate_snapshot(&f.store, &f.cfg, &f.corpus, &trace, &plan, 0)
            .expect("evaluate");
        let baseline = evaluate_speaker(
            &f.store,
            &f.cfg,
            &f.corpus,
            "tst000",
            CodeMode::Zero,
            false,
            plan.decode_spec(),
        )
        .expect("baseline");
        assert_eq!(at_zero.cost(), baseline.cost(), "fresh snapshot must decode identically");
        assert!((at_zero.wer() - baseline.wer()).abs() < 1e-12);
    }

    #[test]
    fn multitask_training_moves_codes_only_when_allowed() {
        let dir = tempfile::tempdir().expect("tempdir");
        let ccfg = tiny_corpus_config();
        generate_corpus(&ccfg, dir.path()).expect("generate");
        let corpus = load_corpus(dir.path()).expect("load");
        let cfg = tiny_model();

        let clamped = TrainPlan {
            steps: 6,
            batch_size: 4,
            zero_code_fraction: 1.0,
            warmup_epochs_codes_frozen: 0,
            seed: 6,
            ..TrainPlan::default()
        };
        let store = train_base(&corpus, &cfg, &clamped).expect("train").store;
        for sid in &corpus.manifest.train_speakers {
            let code = store.tensor(&code_param_name(sid)).expect("code");
            assert!(code.values().iter().all(|&v| v == 0.0), "clamped code moved");
        }

        let mixed = TrainPlan {
            steps: 8,
            batch_size: 4,
            zero_code_fraction: 0.25,
            warmup_epochs_codes_frozen: 1,
            seed: 6,
            ..TrainPlan::default()
        };
        let out = train_base(&corpus, &cfg, &mixed).expect("train");
        let (store, curve) = (out.store, out.curve);
        let moved = corpus.manifest.train_speakers.iter().any(|sid| {
            store
                .tensor(&code_param_name(sid))
                .expect("code")
                .values()
                .iter()
                .any(|&v| v != 0.0)
        });
        assert!(moved, "no code moved after warm-up");
        assert!(!curve.is_empty());
        assert!(curve.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn resumed_training_recomputes_the_interrupted_step_bitwise() {
        let dir = tempfile::tempdir().expect("tempdir");
        let ccfg = tiny_corpus_config();
        generate_corpus(&ccfg, dir.path()).expect("generate");
        let corpus = load_corpus(dir.path()).expect("load");
        let cfg = tiny_model();
        let plan = TrainPlan {
            steps: 7,
            batch_size: 4,
            warmup_epochs_codes_frozen: 1,
            seed: 9,
            ..TrainPlan::default()
        };
        let full = train_base(&corpus, &cfg, &plan).expect("full run");
        let short = TrainPlan { steps: 4, ..plan.clone() };
        let part = train_base(&corpus, &cfg, &short).expect("short run");
        let resumed = resume_training(&corpus, &cfg, &plan, part.store, 4).expect("resume");
        assert_eq!(resumed.step_losses.len(), 3);
        assert_eq!(
            resumed.step_losses[0].to_bits(),
            full.step_losses[4].to_bits(),
            "first resumed forward must be bitwise identical"
        );
    }

    #[test]
    fn grid_produces_sorted_rows_and_is_deterministic() {
        let f = fixture();
        let grid = AdaptGrid {
            parameter_sets: vec![ParameterSet::SpeakerCode],
            loss_kinds: vec![LossKind::Oracle],
            amounts: vec![2],
            max_epochs: 2,
            lr_code: default_lr_code(),
            lr_lora: default_lr_lora(),
            n_best: 2,
            beam_width: 4,
            max_decode_len: 6,
            epoch_selection: EpochSelection::GlobalAverage,
            stop_grad_normalizer: false,
            refresh_hypotheses: false,
        };
        let a = run_grid(&f.corpus, &f.store, &f.cfg, &grid, 3, 1).expect("grid");
        assert_eq!(a.summary.len(), 1 + 2, "one unadapted row plus one per speaker");
        assert_eq!(a.summary[0].parameter_set, "unadapted");
        assert_eq!(a.reports.len(), 2);
        assert!(a.aborted.is_empty());
        let b = run_grid(&f.corpus, &f.store, &f.cfg, &grid, 3, 2).expect("grid");
        assert_eq!(summary_tsv(&a.summary), summary_tsv(&b.summary));
    }
}

//! Teacher-forced training over episode records.
//!
//! One optimizer step works on a batch of episodes sharing a single tape:
//! every trajectory timestep contributes an action cross-entropy, query
//! timesteps add the answer loss and a mined contrastive term, and the
//! codebook and episodic losses are added once per batch. The whole run is
//! a pure function of the dataset and the config seed; interrupting it at
//! any step and resuming from the serialized state replays the remainder
//! bit for bit.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::gridworld::{Observation, World};
use crate::model::vocab::{ACTION_BASE, EOS};
use crate::model::{Bound, Model, ModelConfig, ParamSet, Vocabulary};
use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::objectives::{
    answer_ce, atlas_loss, episodic_loss, mine, soft_usage_entropy, st_crl_loss, total_loss,
    Experience, LossWeights, ObjectiveError, ReplayEntry, StepLosses,
};
use crate::querygen::EpisodeRecord;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    InvalidConfig(&'static str),
    EmptyDataset,
    /// A dataset record is internally inconsistent or fails to rebuild.
    InvalidEpisode(String),
    NonFiniteGradient { step: usize, name: String },
    NonFiniteLoss { step: usize },
    Num(NumError),
    Objective(ObjectiveError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::InvalidConfig(d) => write!(f, "invalid training config: {d}"),
            TrainError::EmptyDataset => write!(f, "empty training dataset"),
            TrainError::InvalidEpisode(d) => write!(f, "invalid episode: {d}"),
            TrainError::NonFiniteGradient { step, name } => {
                write!(f, "non-finite gradient for {name} at step {step}")
            }
            TrainError::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            TrainError::Num(e) => write!(f, "{e}"),
            TrainError::Objective(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        TrainError::Num(e)
    }
}

impl From<ObjectiveError> for TrainError {
    fn from(e: ObjectiveError) -> Self {
        TrainError::Objective(e)
    }
}

/// Everything one run needs beyond the dataset itself. One seed drives
/// parameter init, batch shuffling, and the in-loop sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent on linear warmup.
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient norm ceiling, applied before the moment update.
    pub grad_clip: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.03,
            epochs: 10,
            batch_size: 8,
            grad_clip: 1.0,
            seed: 42,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(TrainError::InvalidConfig("lr_peak must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::InvalidConfig("betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(TrainError::InvalidConfig("adam_eps must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::InvalidConfig("warmup_fraction must lie in [0, 1)"));
        }
        // The episodic loss contrasts frames across episodes, so a batch
        // of one has nothing to contrast against.
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 2"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip must be positive"));
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Learning rate at `step` out of `total`: linear warmup to `lr_peak`
/// over `round(warmup_fraction * total)` steps, then cosine decay to zero
/// at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = fmath::round(cfg.warmup_fraction * total as f64) as usize;
    if step < warmup {
        return cfg.lr_peak * step as f64 / warmup as f64;
    }
    let span = total - warmup;
    if span == 0 || step >= total {
        return 0.0;
    }
    let frac = (step - warmup) as f64 / span as f64;
    cfg.lr_peak * 0.5 * (1.0 + fmath::cos(core::f64::consts::PI * frac))
}

/// Serializable snapshot of the sampling stream, captured mid-run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

/// Optimizer state between steps. Serializing `step`, `params`, both
/// moment maps, and the rng snapshot is enough to resume exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub params: ParamSet,
    pub m1: BTreeMap<String, Tensor>,
    pub m2: BTreeMap<String, Tensor>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> TrainState {
        TrainState {
            step: 0,
            params: ParamSet::init(&cfg.model, Vocabulary::standard().len(), cfg.seed),
            m1: BTreeMap::new(),
            m2: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn rng_state(&self) -> RngState {
        let pos = self.rng.get_word_pos();
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn set_rng(&mut self, s: &RngState) {
        let mut rng = ChaCha8Rng::from_seed(s.seed);
        rng.set_stream(s.stream);
        rng.set_word_pos(((s.word_pos_hi as u128) << 64) | s.word_pos_lo as u128);
        self.rng = rng;
    }

    /// Packages the current parameters as an inference model.
    pub fn to_model(&self, config: ModelConfig) -> Model {
        Model { config, vocab: Vocabulary::standard(), params: self.params.clone() }
    }
}

/// One update: validate gradients, clip to the global norm ceiling, apply
/// the bias-corrected moment update with decoupled weight decay, and
/// advance the step counter. Parameters without a gradient entry are left
/// untouched, moments included.
pub fn optimizer_step(
    state: &mut TrainState,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let mut sq = 0.0;
    for (name, g) in grads {
        for &x in g.data() {
            if !x.is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    step: state.step,
                    name: name.clone(),
                });
            }
            sq += x * x;
        }
    }
    let norm = fmath::sqrt(sq);
    let scale = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    let t = state.step as i32 + 1;
    let bc1 = 1.0 - fmath::powi(cfg.beta1, t);
    let bc2 = 1.0 - fmath::powi(cfg.beta2, t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (name, g) in grads {
        let Some(p) = state.params.get_mut(name) else { continue };
        let m1 = state.m1.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let m2 = state.m2.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for i in 0..p.len() {
            let ge = g.data()[i] * scale;
            let m1i = cfg.beta1 * m1.data()[i] + (1.0 - cfg.beta1) * ge;
            let m2i = cfg.beta2 * m2.data()[i] + (1.0 - cfg.beta2) * ge * ge;
            m1.data_mut()[i] = m1i;
            m2.data_mut()[i] = m2i;
            let update = (m1i / bc1) / (fmath::sqrt(m2i / bc2) + cfg.adam_eps);
            p.data_mut()[i] = p.data()[i] * decay - lr * update;
        }
    }
    state.step += 1;
    Ok(())
}

/// Optimizer steps one epoch yields: full batches, plus the trailing
/// partial batch if it still holds the two episodes a batch needs.
pub fn steps_per_epoch(n_episodes: usize, batch_size: usize) -> usize {
    n_episodes / batch_size + usize::from(n_episodes % batch_size >= 2)
}

pub fn total_steps(n_episodes: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs * steps_per_epoch(n_episodes, cfg.batch_size)
}

/// Epoch-local shuffle of episode indices, derived statelessly from the
/// run seed so a resumed run sees the same order without replaying draws.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mixed = seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    order
}

/// Episode indices making up one optimizer step's batch.
pub fn batch_for(step: usize, n_episodes: usize, cfg: &TrainConfig) -> Vec<usize> {
    let spe = steps_per_epoch(n_episodes, cfg.batch_size);
    let order = epoch_order(cfg.seed, step / spe, n_episodes);
    let lo = (step % spe) * cfg.batch_size;
    let hi = (lo + cfg.batch_size).min(n_episodes);
    order[lo..hi].to_vec()
}

/// One dataset query, tokenized, with its replay-buffer entry.
struct PreppedQuery {
    asked_at: usize,
    tokens: Vec<u32>,
    /// Ground-truth answer tokens fed back during teacher forcing.
    answer_prefix: Vec<u32>,
    /// `answer_prefix` shifted onto the targets: the answer plus EOS.
    answer_targets: Vec<u32>,
    replay: ReplayEntry,
}

/// One dataset episode with everything pre-encoded.
struct Prepped {
    episode_id: u64,
    instruction: Vec<u32>,
    /// Index of each ground-truth action among the four action logits.
    action_targets: Vec<usize>,
    observations: Vec<Observation>,
    queries: Vec<PreppedQuery>,
}

fn prep(dataset: &[EpisodeRecord]) -> Result<Vec<Prepped>, TrainError> {
    let vocab = Vocabulary::standard();
    let mut ids = BTreeSet::new();
    let mut out = Vec::with_capacity(dataset.len());
    for (idx, rec) in dataset.iter().enumerate() {
        let bad = |d: String| TrainError::InvalidEpisode(format!("episode {}: {d}", rec.episode_id));
        if !ids.insert(rec.episode_id) {
            return Err(bad("duplicate id".to_string()));
        }
        if rec.observations.len() != rec.actions.len() + 1 {
            return Err(bad(format!(
                "{} observations for {} actions",
                rec.observations.len(),
                rec.actions.len()
            )));
        }
        if rec.actions.is_empty() {
            return Err(bad("no actions".to_string()));
        }
        let world = World::new(rec.scene.clone()).map_err(|e| bad(e.to_string()))?;
        let instruction = vocab.encode(&rec.instruction).map_err(|e| bad(e.to_string()))?;
        let mut queries = Vec::with_capacity(rec.queries.len());
        for q in &rec.queries {
            let asked_at = q.asked_at as usize;
            if asked_at >= rec.observations.len() {
                return Err(bad(format!("query asked at {asked_at} beyond the trajectory")));
            }
            if queries.iter().any(|p: &PreppedQuery| p.asked_at == asked_at) {
                return Err(bad(format!("two queries asked at {asked_at}")));
            }
            let tokens = vocab.encode(&q.tokens).map_err(|e| bad(e.to_string()))?;
            let answer_prefix = vocab.encode(&q.gt_answer).map_err(|e| bad(e.to_string()))?;
            if answer_prefix.is_empty() {
                return Err(bad("empty ground-truth answer".to_string()));
            }
            let mut answer_targets = answer_prefix.clone();
            answer_targets.push(EOS);
            let replay = ReplayEntry::from_query(&world, rec.episode_id, idx, q)
                .map_err(|e| bad(e.to_string()))?;
            queries.push(PreppedQuery { asked_at, tokens, answer_prefix, answer_targets, replay });
        }
        let action_targets =
            rec.actions.iter().map(|&a| (vocab.action_token(a) - ACTION_BASE) as usize).collect();
        out.push(Prepped {
            episode_id: rec.episode_id,
            instruction,
            action_targets,
            observations: rec.observations.clone(),
            queries,
        });
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    /// Mean action cross-entropy over the batch's trajectory steps.
    pub loss_action: f64,
    /// Mean unweighted answer cross-entropy over the batch's query steps.
    pub loss_qa: f64,
    /// Mean contrastive loss over query steps whose mining found both a
    /// positive and at least one negative.
    pub loss_crl: f64,
    pub loss_sem: f64,
    pub loss_epi: f64,
    /// Soft codebook-usage entropy of this batch's features, always
    /// measured even when the codebook loss is off.
    pub atlas_entropy: f64,
}

/// Trains from scratch: `epochs` passes over `dataset` in seeded shuffled
/// order. Returns the final state and one log record per optimizer step.
pub fn train(
    dataset: &[EpisodeRecord],
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<TrainLogRecord>), TrainError> {
    cfg.validate()?;
    run(TrainState::new(cfg), dataset, cfg, usize::MAX)
}

/// Continues a checkpointed run to completion. Concatenating the logs of
/// any interrupted-and-resumed split reproduces the uninterrupted run's
/// log exactly.
pub fn resume(
    state: TrainState,
    dataset: &[EpisodeRecord],
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<TrainLogRecord>), TrainError> {
    run(state, dataset, cfg, usize::MAX)
}

/// Advances `state` by at most `max_new_steps` optimizer steps, stopping
/// earlier when the schedule of `cfg.epochs` epochs completes.
pub fn run(
    mut state: TrainState,
    dataset: &[EpisodeRecord],
    cfg: &TrainConfig,
    max_new_steps: usize,
) -> Result<(TrainState, Vec<TrainLogRecord>), TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let prepped = prep(dataset)?;
    let n = prepped.len();
    let total = total_steps(n, cfg);

    // The replay buffer is a pure function of the completed batch
    // schedule, so a resumed run rebuilds the pool it would have had.
    let mut buffer: Vec<ReplayEntry> = Vec::new();
    let mut seen: BTreeSet<(u64, u32)> = BTreeSet::new();
    let mut admit = |ep: &Prepped, buffer: &mut Vec<ReplayEntry>| {
        for q in &ep.queries {
            if seen.insert((ep.episode_id, q.asked_at as u32)) {
                buffer.push(q.replay.clone());
            }
        }
    };
    for s in 0..state.step.min(total) {
        for &i in &batch_for(s, n, cfg) {
            admit(&prepped[i], &mut buffer);
        }
    }

    let mut log = Vec::new();
    while state.step < total && log.len() < max_new_steps {
        let batch = batch_for(state.step, n, cfg);
        for &i in &batch {
            admit(&prepped[i], &mut buffer);
        }
        log.push(train_step(&mut state, &prepped, &buffer, &batch, total, cfg)?);
    }
    Ok((state, log))
}

fn mean_or_zero(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

fn experience<'a>(ep: &'a Prepped, q: &'a PreppedQuery) -> Experience<'a> {
    Experience {
        instruction: &ep.instruction,
        observations: &ep.observations[..=q.asked_at],
        query: &q.tokens,
    }
}

/// Rebuilds the model inputs a replay entry points at.
fn resolve<'a>(prepped: &'a [Prepped], entry: &ReplayEntry) -> Result<Experience<'a>, TrainError> {
    let missing = || {
        TrainError::InvalidEpisode(format!(
            "replay entry for episode {} step {} resolves to nothing",
            entry.episode_id, entry.asked_at
        ))
    };
    let ep = prepped
        .get(entry.experience_ref)
        .filter(|p| p.episode_id == entry.episode_id)
        .ok_or_else(missing)?;
    let q = ep
        .queries
        .iter()
        .find(|q| q.asked_at == entry.asked_at as usize)
        .ok_or_else(missing)?;
    Ok(experience(ep, q))
}

/// Answer loss and, when mining succeeds, the contrastive loss for one
/// query timestep. Returns the unweighted answer cross-entropy.
#[allow(clippy::too_many_arguments)]
fn query_losses(
    tape: &mut Tape,
    bound: &Bound,
    prepped: &[Prepped],
    buffer: &[ReplayEntry],
    ep: &Prepped,
    q: &PreppedQuery,
    frames: &[Var],
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    action_ids: [u32; 4],
) -> Result<(Var, Option<Var>), TrainError> {
    let w = &cfg.weights;
    let step = bound.forward_step(
        tape,
        &ep.instruction,
        &frames[..=q.asked_at],
        Some(&q.tokens),
        &q.answer_prefix,
        action_ids,
    )?;
    let rows = tape.slice_rows(
        step.logits,
        step.assembled.ans_pos,
        step.assembled.ans_pos + q.answer_targets.len(),
    )?;
    let qa = answer_ce(tape, rows, &q.answer_targets)?;
    if w.lambda_c <= 0.0 || cfg.model.drop_map {
        return Ok((qa, None));
    }
    let crl = match mine(buffer, &q.replay, w, rng) {
        Err(ObjectiveError::NoPositive) => None,
        Err(e) => return Err(e.into()),
        Ok((positive, negatives, _report)) => {
            if negatives.is_empty() {
                None
            } else {
                let pos = resolve(prepped, &positive)?;
                let negs: Vec<Experience> = negatives
                    .entries()
                    .map(|e| resolve(prepped, e))
                    .collect::<Result<_, _>>()?;
                Some(st_crl_loss(
                    bound,
                    tape,
                    experience(ep, q),
                    pos,
                    &negs,
                    w.tau,
                    false,
                    action_ids,
                )?)
            }
        }
    };
    Ok((qa, crl))
}

fn train_step(
    state: &mut TrainState,
    prepped: &[Prepped],
    buffer: &[ReplayEntry],
    batch: &[usize],
    total: usize,
    cfg: &TrainConfig,
) -> Result<TrainLogRecord, TrainError> {
    let w = &cfg.weights;
    let s = state.step;
    let lr = lr_at(s, total, cfg);
    let action_ids = Vocabulary::standard().action_ids();
    // Pure ablations skip the answer pass entirely: with both the answer
    // and contrastive weights at zero nothing downstream uses it.
    let want_queries = w.lambda_qa > 0.0 || (w.lambda_c > 0.0 && !cfg.model.drop_map);

    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, cfg.model.clone());

    let mut ep_totals = Vec::with_capacity(batch.len());
    let mut episode_features: Vec<Vec<Var>> = Vec::with_capacity(batch.len());
    let mut action_vals = Vec::new();
    let mut qa_vals = Vec::new();
    let mut crl_vals = Vec::new();
    for &i in batch {
        let ep = &prepped[i];
        let frames = bound.encode_episode(&mut tape, &ep.observations)?;
        let mut steps: Vec<StepLosses> = Vec::with_capacity(ep.action_targets.len() + 1);
        for t in 0..=ep.action_targets.len() {
            let query = ep.queries.iter().find(|q| q.asked_at == t);
            let mut mindcraft = None;
            if t < ep.action_targets.len() {
                let free = bound.forward_step(
                    &mut tape,
                    &ep.instruction,
                    &frames[..=t],
                    None,
                    &[],
                    action_ids,
                )?;
                let a_ce = tape.cross_entropy(free.action_logits, ep.action_targets[t])?;
                action_vals.push(value(&tape, a_ce));
                mindcraft = Some(a_ce);
            }
            let mut crl = None;
            if let Some(q) = query.filter(|_| want_queries) {
                let (qa, c) = query_losses(
                    &mut tape,
                    &bound,
                    prepped,
                    buffer,
                    ep,
                    q,
                    &frames,
                    &mut state.rng,
                    cfg,
                    action_ids,
                )?;
                qa_vals.push(value(&tape, qa));
                if let Some(cv) = c {
                    crl_vals.push(value(&tape, cv));
                }
                let weighted = tape.scale(qa, w.lambda_qa);
                mindcraft = Some(match mindcraft {
                    Some(a) => tape.add(a, weighted)?,
                    // A query on the terminal observation has no action to
                    // imitate; its step carries the answer loss alone.
                    None => weighted,
                });
                crl = c;
            }
            if let Some(mindcraft) = mindcraft {
                steps.push(StepLosses { mindcraft, crl, sem: None });
            }
        }
        ep_totals.push(total_loss(&mut tape, &steps, None, w)?);
        episode_features.push(frames);
    }

    let flat = tape.concat_flat(&ep_totals)?;
    let mut batch_loss = tape.mean_all(flat);
    let mut sem_val = 0.0;
    if w.lambda_s > 0.0 && !cfg.model.drop_map {
        let all: Vec<Var> = episode_features.iter().flatten().copied().collect();
        let sem = atlas_loss(&mut tape, &all, bound.var("atlas.codes"), w.gamma)?;
        sem_val = value(&tape, sem);
        let term = tape.scale(sem, w.lambda_s);
        batch_loss = tape.add(batch_loss, term)?;
    }
    let mut epi_val = 0.0;
    if w.lambda_r > 0.0 {
        // a batch whose frames are almost all zero vectors has nothing to
        // contrast; it simply contributes no episodic term
        match episodic_loss(&mut tape, &episode_features, w.tau, &mut state.rng) {
            Err(ObjectiveError::InsufficientBatch) => {}
            Err(e) => return Err(e.into()),
            Ok(epi) => {
                epi_val = value(&tape, epi);
                let term = tape.scale(epi, w.lambda_r);
                batch_loss = tape.add(batch_loss, term)?;
            }
        }
    }

    let feature_values: Vec<&[f64]> =
        episode_features.iter().flatten().map(|&v| tape.value(v).data()).collect();
    let atlas_entropy = soft_usage_entropy(&feature_values, tape.value(bound.var("atlas.codes")));

    let loss_total = value(&tape, batch_loss);
    if !loss_total.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: s });
    }
    let grads = tape.backward(batch_loss)?;
    let mut gmap: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, &v) in bound.vars() {
        if let Some(g) = grads.get(v) {
            gmap.insert(name.clone(), g.clone());
        }
    }
    optimizer_step(state, &gmap, lr, cfg)?;
    Ok(TrainLogRecord {
        step: s,
        lr,
        loss_total,
        loss_action: mean_or_zero(&action_vals),
        loss_qa: mean_or_zero(&qa_vals),
        loss_crl: mean_or_zero(&crl_vals),
        loss_sem: sem_val,
        loss_epi: epi_val,
        atlas_entropy,
    })
}

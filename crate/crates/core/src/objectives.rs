//! Training losses: the imitation-plus-answer objective, the contrastive
//! map-state objective with metadata-mined hard negatives, the codebook
//! commitment loss with a usage-entropy regularizer, the episodic
//! contrastive loss, and their weighted trajectory total.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gridworld::{Observation, World};
use crate::model::Bound;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::NumError;
use crate::querygen::{CognitiveQuery, Fact, QueryType};

/// Temperature of the soft code-assignment used for the usage
/// distribution.
pub const ATLAS_SOFT_TEMP: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveError {
    /// A contrastive input has zero norm, so cosine similarity is
    /// undefined.
    ZeroVector,
    /// InfoNCE needs at least one negative.
    EmptyNegatives,
    LengthMismatch { expected: usize, got: usize },
    InsufficientBatch,
    /// No buffer entry can serve as the anchor's positive; the anchor
    /// contributes no contrastive term this step.
    NoPositive,
    InvalidWeights(&'static str),
    InvalidMetadata(String),
    Num(NumError),
}

impl fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveError::ZeroVector => write!(f, "zero-norm vector in similarity"),
            ObjectiveError::EmptyNegatives => write!(f, "contrastive loss without negatives"),
            ObjectiveError::LengthMismatch { expected, got } => {
                write!(f, "answer targets: expected {expected}, got {got}")
            }
            ObjectiveError::InsufficientBatch => write!(f, "batch too small for this loss"),
            ObjectiveError::NoPositive => write!(f, "no positive candidate in replay buffer"),
            ObjectiveError::InvalidWeights(d) => write!(f, "invalid loss weights: {d}"),
            ObjectiveError::InvalidMetadata(d) => write!(f, "bad replay metadata: {d}"),
            ObjectiveError::Num(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ObjectiveError {}

impl From<NumError> for ObjectiveError {
    fn from(e: NumError) -> Self {
        ObjectiveError::Num(e)
    }
}

/// Scalar weights and negative-mining counts for the total objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_qa: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n_spatial: usize,
    pub n_semantic: usize,
    pub n_unrelated: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_qa: 1.0,
            lambda_c: 0.1,
            lambda_s: 0.2,
            lambda_r: 0.1,
            gamma: 0.1,
            tau: 0.07,
            n_spatial: 8,
            n_semantic: 8,
            n_unrelated: 16,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.tau > 0.0) {
            return Err(ObjectiveError::InvalidWeights("tau must be positive"));
        }
        let lambdas = [self.lambda_qa, self.lambda_c, self.lambda_s, self.lambda_r];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(ObjectiveError::InvalidWeights("lambdas must be nonnegative"));
        }
        Ok(())
    }
}

/// Mean per-token cross-entropy of a teacher-forced answer: row i of the
/// 2-D `answer_logits` is scored against `targets[i]`.
pub fn answer_ce(
    tape: &mut Tape,
    answer_logits: Var,
    targets: &[u32],
) -> Result<Var, ObjectiveError> {
    let shape = tape.value(answer_logits).shape().to_vec();
    let rows = match shape.as_slice() {
        [r, _] => *r,
        s => {
            return Err(ObjectiveError::Num(NumError::ShapeMismatch {
                op: "answer_ce",
                detail: format!("answer logits must be 2-D, got {s:?}"),
            }))
        }
    };
    if rows != targets.len() || targets.is_empty() {
        return Err(ObjectiveError::LengthMismatch { expected: rows, got: targets.len() });
    }
    let mut sum: Option<Var> = None;
    for (i, &target) in targets.iter().enumerate() {
        let row = tape.row(answer_logits, i)?;
        let ce = tape.cross_entropy(row, target as usize)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, ce)?,
            None => ce,
        });
    }
    Ok(tape.scale(sum.expect("targets nonempty"), 1.0 / targets.len() as f64))
}

/// Imitation loss of one timestep: action cross-entropy plus, when a query
/// was asked, the mean per-token cross-entropy of the answer.
pub fn mindcraft_loss(
    tape: &mut Tape,
    action_logits: Var,
    gt_action: usize,
    answer: Option<(Var, &[u32])>,
    lambda_qa: f64,
) -> Result<Var, ObjectiveError> {
    let action_ce = tape.cross_entropy(action_logits, gt_action)?;
    let Some((answer_logits, targets)) = answer else {
        return Ok(action_ce);
    };
    let mean = answer_ce(tape, answer_logits, targets)?;
    let weighted = tape.scale(mean, lambda_qa);
    Ok(tape.add(action_ce, weighted)?)
}

fn checked_norm(tape: &mut Tape, v: Var) -> Result<Var, ObjectiveError> {
    let n = tape.norm(v)?;
    if tape.value(n).data()[0] == 0.0 {
        return Err(ObjectiveError::ZeroVector);
    }
    Ok(n)
}

/// Contrastive loss over cosine similarities: one positive against a set
/// of negatives at temperature `tau`. Negatives are detached unless
/// `negative_gradients` is set.
pub fn info_nce(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    tau: f64,
    negative_gradients: bool,
) -> Result<Var, ObjectiveError> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::InvalidWeights("tau must be positive"));
    }
    if negatives.is_empty() {
        return Err(ObjectiveError::EmptyNegatives);
    }
    let anchor_norm = checked_norm(tape, anchor)?;
    let mut sims: Vec<Var> = Vec::with_capacity(negatives.len() + 1);
    let mut others: Vec<Var> = Vec::with_capacity(negatives.len() + 1);
    others.push(positive);
    for &n in negatives {
        others.push(if negative_gradients { n } else { tape.detach(n) });
    }
    for other in others {
        let other_norm = checked_norm(tape, other)?;
        let d = tape.dot(anchor, other)?;
        let den = tape.mul(anchor_norm, other_norm)?;
        sims.push(tape.div(d, den)?);
    }
    let flat = tape.concat_flat(&sims)?;
    let logits = tape.scale(flat, 1.0 / tau);
    Ok(tape.cross_entropy(logits, 0)?)
}

/// Replayed query metadata plus a pointer into the episode store, enough
/// to reclassify the entry and to rebuild its inputs for a fresh forward
/// pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub episode_id: u64,
    pub asked_at: u32,
    pub qtype: QueryType,
    pub template_id: u32,
    pub fact_id: String,
    pub scene_seed: u64,
    pub region_id: u32,
    pub gt_answer: Vec<String>,
    /// Canonical question text with the paraphrase variant normalized
    /// away; entries asking the same thing share it verbatim.
    pub class: String,
    /// Index of the owning episode in the caller's episode store.
    pub experience_ref: usize,
}

impl ReplayEntry {
    /// Builds an entry from a generated query, deriving the scene seed and
    /// the normalized question class from its fact id.
    pub fn from_query(
        world: &World,
        episode_id: u64,
        experience_ref: usize,
        query: &CognitiveQuery,
    ) -> Result<ReplayEntry, ObjectiveError> {
        let (scene_seed, fact) = Fact::parse(&query.fact_id)
            .ok_or_else(|| ObjectiveError::InvalidMetadata(query.fact_id.clone()))?;
        let canonical = crate::querygen::query_tokens(world, query.qtype, 0, &fact)
            .map_err(|e| ObjectiveError::InvalidMetadata(format!("{e}")))?;
        Ok(ReplayEntry {
            episode_id,
            asked_at: query.asked_at,
            qtype: query.qtype,
            template_id: query.template_id,
            fact_id: query.fact_id.clone(),
            scene_seed,
            region_id: query.region_id_at_ask,
            gt_answer: query.gt_answer.clone(),
            class: canonical.join(" "),
            experience_ref,
        })
    }

    fn same_entry(&self, other: &ReplayEntry) -> bool {
        self.episode_id == other.episode_id && self.asked_at == other.asked_at
    }

    fn same_region(&self, other: &ReplayEntry) -> bool {
        self.scene_seed == other.scene_seed && self.region_id == other.region_id
    }
}

/// The three hard-negative categories mined for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    /// Same question elsewhere with a different answer.
    pub spatial: Vec<ReplayEntry>,
    /// Same region, different question, different answer.
    pub semantic: Vec<ReplayEntry>,
    /// Different region and different question.
    pub unrelated: Vec<ReplayEntry>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.spatial.len() + self.semantic.len() + self.unrelated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.spatial.iter().chain(self.semantic.iter()).chain(self.unrelated.iter())
    }
}

/// Per-category deficits after mining; spatial and semantic deficits were
/// backfilled from the unrelated pool, the unrelated figure is what could
/// not be filled at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MineReport {
    pub spatial_shortfall: usize,
    pub semantic_shortfall: usize,
    pub unrelated_shortfall: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Positive,
    Spatial,
    Semantic,
    Unrelated,
}

/// Mining rules, applied in order. Entries that fit no category (for
/// example the same question with the same answer in another scene) are
/// left unused.
fn classify(anchor: &ReplayEntry, c: &ReplayEntry) -> Option<Role> {
    if anchor.same_entry(c) {
        return None;
    }
    let same_class = c.class == anchor.class;
    let same_answer = c.gt_answer == anchor.gt_answer;
    if same_class && same_answer && c.scene_seed == anchor.scene_seed {
        Some(Role::Positive)
    } else if same_class && !same_answer {
        Some(Role::Spatial)
    } else if anchor.same_region(c) && !same_class && !same_answer {
        Some(Role::Semantic)
    } else if !anchor.same_region(c) && !same_class {
        Some(Role::Unrelated)
    } else {
        None
    }
}

/// Draws one positive and the three negative categories for an anchor,
/// uniformly within each category. Spatial or semantic deficits are
/// backfilled with extra unrelated entries and reported.
pub fn mine<R: Rng>(
    buffer: &[ReplayEntry],
    anchor: &ReplayEntry,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<(ReplayEntry, NegativeSet, MineReport), ObjectiveError> {
    let mut positives: Vec<&ReplayEntry> = Vec::new();
    let mut spatial: Vec<&ReplayEntry> = Vec::new();
    let mut semantic: Vec<&ReplayEntry> = Vec::new();
    let mut unrelated: Vec<&ReplayEntry> = Vec::new();
    for c in buffer {
        match classify(anchor, c) {
            Some(Role::Positive) => positives.push(c),
            Some(Role::Spatial) => spatial.push(c),
            Some(Role::Semantic) => semantic.push(c),
            Some(Role::Unrelated) => unrelated.push(c),
            None => {}
        }
    }
    let positive = (**positives.choose(rng).ok_or(ObjectiveError::NoPositive)?).clone();
    let take = |pool: &[&ReplayEntry], k: usize, rng: &mut R| -> Vec<ReplayEntry> {
        pool.choose_multiple(rng, k).map(|e| (**e).clone()).collect()
    };
    let spatial_taken = take(&spatial, weights.n_spatial, rng);
    let semantic_taken = take(&semantic, weights.n_semantic, rng);
    let spatial_shortfall = weights.n_spatial - spatial_taken.len();
    let semantic_shortfall = weights.n_semantic - semantic_taken.len();
    let unrelated_quota = weights.n_unrelated + spatial_shortfall + semantic_shortfall;
    let unrelated_taken = take(&unrelated, unrelated_quota, rng);
    let report = MineReport {
        spatial_shortfall,
        semantic_shortfall,
        unrelated_shortfall: unrelated_quota - unrelated_taken.len(),
    };
    let set = NegativeSet { spatial: spatial_taken, semantic: semantic_taken, unrelated: unrelated_taken };
    Ok((positive, set, report))
}

/// The stored inputs of one query timestep, as the model saw them.
#[derive(Debug, Clone, Copy)]
pub struct Experience<'a> {
    pub instruction: &'a [u32],
    /// Observations up to and including the asked-at timestep.
    pub observations: &'a [Observation],
    pub query: &'a [u32],
}

/// Re-runs one experience through the bound model and returns the hidden
/// state of its map slot.
pub fn recompute_map_state(
    bound: &Bound,
    tape: &mut Tape,
    exp: Experience<'_>,
    action_ids: [u32; 4],
) -> Result<Var, ObjectiveError> {
    let frames = bound.encode_episode(tape, exp.observations)?;
    let step =
        bound.forward_step(tape, exp.instruction, &frames, Some(exp.query), &[], action_ids)?;
    Ok(step.m_prime)
}

/// Contrastive map-state loss: the anchor, positive, and negative
/// experiences all pass through the same model with current parameters,
/// and their map slots feed a cosine InfoNCE.
#[allow(clippy::too_many_arguments)]
pub fn st_crl_loss(
    bound: &Bound,
    tape: &mut Tape,
    anchor: Experience<'_>,
    positive: Experience<'_>,
    negatives: &[Experience<'_>],
    tau: f64,
    negative_gradients: bool,
    action_ids: [u32; 4],
) -> Result<Var, ObjectiveError> {
    if negatives.is_empty() {
        return Err(ObjectiveError::EmptyNegatives);
    }
    let a = recompute_map_state(bound, tape, anchor, action_ids)?;
    let p = recompute_map_state(bound, tape, positive, action_ids)?;
    let ns: Vec<Var> = negatives
        .iter()
        .map(|&n| recompute_map_state(bound, tape, n, action_ids))
        .collect::<Result<_, _>>()?;
    info_nce(tape, a, p, &ns, tau, negative_gradients)
}

/// Codebook loss over one batch of visual features: squared distance from
/// each (stop-gradient) feature to its nearest code, minus `gamma` times
/// the entropy of the batch soft-usage distribution.
pub fn atlas_loss(
    tape: &mut Tape,
    features: &[Var],
    codes: Var,
    gamma: f64,
) -> Result<Var, ObjectiveError> {
    if features.is_empty() {
        return Err(ObjectiveError::InsufficientBatch);
    }
    let n = match tape.value(codes).shape() {
        [n, _] => *n,
        s => {
            return Err(ObjectiveError::Num(NumError::ShapeMismatch {
                op: "atlas_loss",
                detail: format!("codes must be 2-D, got {s:?}"),
            }))
        }
    };
    let code_rows: Vec<Var> = (0..n).map(|j| tape.row(codes, j)).collect::<Result<_, _>>()?;
    let mut commit_sum: Option<Var> = None;
    let mut usage_sum: Option<Var> = None;
    for &f in features {
        let f_det = tape.detach(f);
        let mut d2: Vec<Var> = Vec::with_capacity(n);
        for &code in &code_rows {
            let diff = tape.sub(f_det, code)?;
            d2.push(tape.dot(diff, diff)?);
        }
        let mut nearest = 0;
        for k in 1..n {
            if tape.value(d2[k]).data()[0] < tape.value(d2[nearest]).data()[0] {
                nearest = k;
            }
        }
        commit_sum = Some(match commit_sum {
            Some(s) => tape.add(s, d2[nearest])?,
            None => d2[nearest],
        });
        let flat = tape.concat_flat(&d2)?;
        let scaled = tape.scale(flat, -1.0 / ATLAS_SOFT_TEMP);
        let mat = tape.stack_rows(&[scaled])?;
        let p = tape.softmax_rows(mat)?;
        usage_sum = Some(match usage_sum {
            Some(s) => tape.add(s, p)?,
            None => p,
        });
    }
    let inv_b = 1.0 / features.len() as f64;
    let commit = tape.scale(commit_sum.expect("batch nonempty"), inv_b);
    let p_bar = tape.scale(usage_sum.expect("batch nonempty"), inv_b);
    // Sum of p ln p is -H, so adding gamma times it subtracts gamma H.
    let p_ln_p = tape.xlnx(p_bar);
    let neg_entropy = tape.sum_all(p_ln_p);
    let reg = tape.scale(neg_entropy, gamma);
    Ok(tape.add(commit, reg)?)
}

/// Batch soft-usage entropy of the codebook recomputed from plain values,
/// the diagnostic the atlas regularizer maximizes. Degenerate inputs give
/// zero.
pub fn soft_usage_entropy(features: &[&[f64]], codes: &crate::numcore::Tensor) -> f64 {
    let &[n, d] = codes.shape() else { return 0.0 };
    if features.is_empty() || n == 0 {
        return 0.0;
    }
    let mut p_bar = alloc::vec![0.0; n];
    for f in features {
        let mut logits: Vec<f64> = (0..n)
            .map(|k| {
                let row = &codes.data()[k * d..(k + 1) * d];
                -f.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    / ATLAS_SOFT_TEMP
            })
            .collect();
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = crate::fmath::exp(*l - m);
            z += *l;
        }
        for k in 0..n {
            p_bar[k] += logits[k] / z;
        }
    }
    let b = features.len() as f64;
    -p_bar
        .iter()
        .map(|&s| {
            let p = s / b;
            if p > 0.0 {
                p * crate::fmath::ln(p)
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Episode-level contrastive loss: for every episode, two random distinct
/// timesteps form the anchor-positive pair and every feature of every
/// other episode is a negative; the per-episode losses are averaged.
///
/// A frame can legitimately be the zero vector (nothing visible and blank
/// geometry), which carries no direction for the cosine similarity, so
/// sampling is restricted to frames with nonzero norm. Episodes left with
/// fewer than two usable frames contribute negatives but no anchor; if no
/// episode can anchor, the batch is reported as insufficient.
pub fn episodic_loss<R: Rng>(
    tape: &mut Tape,
    episodes: &[Vec<Var>],
    tau: f64,
    rng: &mut R,
) -> Result<Var, ObjectiveError> {
    if episodes.len() < 2 || episodes.iter().any(|e| e.len() < 2) {
        return Err(ObjectiveError::InsufficientBatch);
    }
    let usable: Vec<Vec<usize>> = episodes
        .iter()
        .map(|e| {
            e.iter()
                .enumerate()
                .filter(|(_, v)| tape.value(**v).data().iter().any(|&x| x != 0.0))
                .map(|(t, _)| t)
                .collect()
        })
        .collect();
    let mut sum: Option<Var> = None;
    let mut anchors = 0usize;
    for (i, episode) in episodes.iter().enumerate() {
        let here = &usable[i];
        if here.len() < 2 {
            continue;
        }
        let a = rng.gen_range(0..here.len());
        let offset = rng.gen_range(1..here.len());
        let t_a = here[a];
        let t_p = here[(a + offset) % here.len()];
        let negatives: Vec<Var> = episodes
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(j, e)| usable[j].iter().map(|&t| e[t]))
            .collect();
        if negatives.is_empty() {
            continue;
        }
        let l = info_nce(tape, episode[t_a], episode[t_p], &negatives, tau, false)?;
        anchors += 1;
        sum = Some(match sum {
            Some(s) => tape.add(s, l)?,
            None => l,
        });
    }
    match sum {
        Some(s) => Ok(tape.scale(s, 1.0 / anchors as f64)),
        None => Err(ObjectiveError::InsufficientBatch),
    }
}

/// The pieces of one trajectory timestep, unweighted. `crl` is present
/// only at query timesteps whose mining succeeded; `sem` is absent when
/// nothing was visible.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub mindcraft: Var,
    pub crl: Option<Var>,
    pub sem: Option<Var>,
}

/// Weighted total over a trajectory: the per-step terms averaged over its
/// length, plus the episodic term once.
pub fn total_loss(
    tape: &mut Tape,
    steps: &[StepLosses],
    episodic: Option<Var>,
    weights: &LossWeights,
) -> Result<Var, ObjectiveError> {
    if steps.is_empty() {
        return Err(ObjectiveError::InsufficientBatch);
    }
    let mut sum: Option<Var> = None;
    for step in steps {
        let mut term = step.mindcraft;
        if let Some(crl) = step.crl {
            let c = tape.scale(crl, weights.lambda_c);
            term = tape.add(term, c)?;
        }
        if let Some(sem) = step.sem {
            let s = tape.scale(sem, weights.lambda_s);
            term = tape.add(term, s)?;
        }
        sum = Some(match sum {
            Some(s) => tape.add(s, term)?,
            None => term,
        });
    }
    let mut loss = tape.scale(sum.expect("steps nonempty"), 1.0 / steps.len() as f64);
    if let Some(epi) = episodic {
        let e = tape.scale(epi, weights.lambda_r);
        loss = tape.add(loss, e)?;
    }
    Ok(loss)
}

#[cfg(test)]
#[path = "objectives/tests.rs"]
mod tests;

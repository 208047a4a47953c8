//! Evaluation: greedy closed-loop rollouts with scripted queries, and the
//! metric suite computed over the resulting prediction log.
//!
//! Distances to the goal use the Chebyshev metric, matching the gridworld
//! visibility convention; `success_radius` is counted in cells.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::gridworld::{Action, Cell, Observation, Pose, World};
use crate::model::{Model, Vocabulary};
use crate::numcore::NumError;
use crate::querygen::{EpisodeRecord, QueryType};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    /// The log holds no queries (accuracy metrics) or no episodes
    /// (navigation metrics).
    EmptyLog,
    NoProbeSets,
    InvalidEpisode(String),
    Num(NumError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyLog => write!(f, "prediction log is empty"),
            EvalError::NoProbeSets => write!(f, "no probe sets to compare"),
            EvalError::InvalidEpisode(d) => write!(f, "invalid episode: {d}"),
            EvalError::Num(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for EvalError {}

impl From<NumError> for EvalError {
    fn from(e: NumError) -> Self {
        EvalError::Num(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Success requires ending within this many cells of the goal.
    pub success_radius: u32,
    /// Action budget per episode; reaching it ends the episode and the
    /// final pose is evaluated as if the agent had stopped there.
    pub max_steps: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { success_radius: 1, max_steps: 64 }
    }
}

/// One asked query with the agent's decoded answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub fact_id: String,
    pub template_id: u32,
    pub qtype: QueryType,
    pub predicted: Vec<String>,
    pub gt_answer: Vec<String>,
    /// Exact token-sequence match of predicted against gt_answer.
    pub correct: bool,
}

/// One rolled-out episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: u64,
    pub success: bool,
    /// Cells traversed: forward moves that changed the cell.
    pub path_length: u32,
    /// Geodesic cell distance from start to goal.
    pub shortest_length: u32,
    /// Closest the path came to the goal, start pose included.
    pub min_goal_distance: u32,
    pub queries: Vec<QueryOutcome>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionLog {
    pub episodes: Vec<EpisodeResult>,
}

impl PredictionLog {
    pub fn queries(&self) -> impl Iterator<Item = &QueryOutcome> {
        self.episodes.iter().flat_map(|e| e.queries.iter())
    }
}

/// Queries probing one underlying fact with one shared answer; answering
/// them differently is an inconsistency regardless of correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub set_id: u32,
    /// At least two member queries.
    pub query_ids: Vec<String>,
}

fn chebyshev(a: Cell, b: Cell) -> u32 {
    let dx = (a.0 - b.0).unsigned_abs();
    let dy = (a.1 - b.1).unsigned_abs();
    dx.max(dy)
}

/// What a policy returns for one timestep: the action to take and, when a
/// query was posed, the decoded answer token ids.
type Decision = (Action, Vec<u32>);

/// Rollout core, generic over the acting policy so tests can drive it
/// with scripted agents. The policy sees the agent's own observation
/// history; queries fire at their scripted timesteps, and queries
/// scheduled beyond the episode's end are asked on the full history.
fn rollout_with<F>(
    episodes: &[EpisodeRecord],
    cfg: &RolloutConfig,
    vocab: &Vocabulary,
    mut policy: F,
) -> Result<PredictionLog, EvalError>
where
    F: FnMut(usize, &World, &Pose, &[Observation], Option<&[u32]>) -> Result<Decision, EvalError>,
{
    let mut out = Vec::with_capacity(episodes.len());
    for (ep_idx, rec) in episodes.iter().enumerate() {
        let bad = |d: String| EvalError::InvalidEpisode(format!("episode {}: {d}", rec.episode_id));
        let world = World::new(rec.scene.clone()).map_err(|e| bad(e.to_string()))?;
        let shortest = world
            .geodesic(rec.start.cell(), rec.goal)
            .ok_or_else(|| bad("goal unreachable".to_string()))?;
        let mut scheduled: BTreeMap<usize, (&crate::querygen::CognitiveQuery, Vec<u32>)> =
            BTreeMap::new();
        for q in &rec.queries {
            let tokens = vocab.encode(&q.tokens).map_err(|e| bad(e.to_string()))?;
            if scheduled.insert(q.asked_at as usize, (q, tokens)).is_some() {
                return Err(bad(format!("two queries asked at {}", q.asked_at)));
            }
        }

        let mut pose = rec.start;
        let mut observations = vec![world.observe(&pose, 0)];
        let mut min_goal = chebyshev(pose.cell(), rec.goal);
        let mut path_length = 0u32;
        let mut outcomes = Vec::with_capacity(rec.queries.len());
        let answer = |q: &crate::querygen::CognitiveQuery,
                          ids: &[u32]|
         -> Result<QueryOutcome, EvalError> {
            let predicted = vocab.decode(ids).map_err(|e| bad(e.to_string()))?;
            Ok(QueryOutcome {
                query_id: q.query_id.clone(),
                fact_id: q.fact_id.clone(),
                template_id: q.template_id,
                qtype: q.qtype,
                correct: predicted == q.gt_answer,
                predicted,
                gt_answer: q.gt_answer.clone(),
            })
        };

        let mut t = 0usize;
        while t < cfg.max_steps {
            let asked = scheduled.remove(&t);
            let query_tokens = asked.as_ref().map(|(_, tok)| tok.as_slice());
            let (action, ids) = policy(ep_idx, &world, &pose, &observations, query_tokens)?;
            if let Some((q, _)) = asked {
                outcomes.push(answer(q, &ids)?);
            }
            if action == Action::Stop {
                break;
            }
            let next = world.step(&pose, action);
            if next.cell() != pose.cell() {
                path_length += 1;
            }
            pose = next;
            t += 1;
            observations.push(world.observe(&pose, t as u32));
            min_goal = min_goal.min(chebyshev(pose.cell(), rec.goal));
        }
        // whatever remains scripted was never reached; it is asked on the
        // history the agent actually collected
        for (_, (q, tokens)) in scheduled {
            let (_, ids) = policy(ep_idx, &world, &pose, &observations, Some(&tokens))?;
            outcomes.push(answer(q, &ids)?);
        }

        out.push(EpisodeResult {
            episode_id: rec.episode_id,
            success: chebyshev(pose.cell(), rec.goal) <= cfg.success_radius,
            path_length,
            shortest_length: shortest,
            min_goal_distance: min_goal,
            queries: outcomes,
        });
    }
    Ok(PredictionLog { episodes: out })
}

/// Greedy closed-loop evaluation of a trained model over `episodes`.
pub fn rollout(
    model: &Model,
    episodes: &[EpisodeRecord],
    cfg: &RolloutConfig,
) -> Result<PredictionLog, EvalError> {
    let instructions: Vec<Vec<u32>> = episodes
        .iter()
        .map(|rec| {
            model.vocab.encode(&rec.instruction).map_err(|e| {
                EvalError::InvalidEpisode(format!("episode {}: {e}", rec.episode_id))
            })
        })
        .collect::<Result<_, _>>()?;
    rollout_with(episodes, cfg, &model.vocab, |ep_idx, _, _, observations, query| {
        let out = model.act(&instructions[ep_idx], observations, query)?;
        Ok((out.action, out.answer))
    })
}

/// Fraction of all asked queries answered exactly right.
pub fn qa_acc(log: &PredictionLog) -> Result<f64, EvalError> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for q in log.queries() {
        total += 1;
        correct += usize::from(q.correct);
    }
    if total == 0 {
        return Err(EvalError::EmptyLog);
    }
    Ok(correct as f64 / total as f64)
}

/// Answer accuracy restricted to successfully navigated episodes; None
/// when no successful episode carried a query.
pub fn gca(log: &PredictionLog) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for e in log.episodes.iter().filter(|e| e.success) {
        for q in &e.queries {
            total += 1;
            correct += usize::from(q.correct);
        }
    }
    if total == 0 {
        None
    } else {
        Some(correct as f64 / total as f64)
    }
}

/// Groups the log's queries by (fact_id, gt_answer) and keeps the groups
/// with at least two members. Ordering is deterministic in the key.
pub fn build_probe_sets(log: &PredictionLog) -> Vec<ProbeSet> {
    let mut groups: BTreeMap<(&str, &[String]), Vec<&str>> = BTreeMap::new();
    for q in log.queries() {
        groups
            .entry((q.fact_id.as_str(), q.gt_answer.as_slice()))
            .or_default()
            .push(q.query_id.as_str());
    }
    groups
        .into_values()
        .filter(|members| members.len() >= 2)
        .enumerate()
        .map(|(i, members)| ProbeSet {
            set_id: i as u32,
            query_ids: members.iter().map(|m| m.to_string()).collect(),
        })
        .collect()
}

/// Cognitive-map consistency: over every probe set, the fraction of member
/// pairs whose predicted answers agree with each other.
pub fn cmc(log: &PredictionLog, sets: &[ProbeSet]) -> Result<f64, EvalError> {
    if sets.is_empty() {
        return Err(EvalError::NoProbeSets);
    }
    let mut predicted: BTreeMap<&str, &[String]> = BTreeMap::new();
    for q in log.queries() {
        predicted.insert(q.query_id.as_str(), &q.predicted);
    }
    let mut consistent = 0u64;
    let mut pairs = 0u64;
    for set in sets {
        let answers: Vec<&[String]> = set
            .query_ids
            .iter()
            .map(|id| {
                predicted
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| EvalError::InvalidEpisode(format!("unknown query id {id}")))
            })
            .collect::<Result<_, _>>()?;
        for m in 0..answers.len() {
            for n in m + 1..answers.len() {
                pairs += 1;
                consistent += u64::from(answers[m] == answers[n]);
            }
        }
    }
    if pairs == 0 {
        return Err(EvalError::NoProbeSets);
    }
    Ok(consistent as f64 / pairs as f64)
}

/// Fraction of episodes navigated successfully.
pub fn sr(log: &PredictionLog) -> Result<f64, EvalError> {
    if log.episodes.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let s = log.episodes.iter().filter(|e| e.success).count();
    Ok(s as f64 / log.episodes.len() as f64)
}

/// Success rate over episodes containing at least one wrong answer; None
/// when every answer everywhere was right.
pub fn sr_wa(log: &PredictionLog) -> Option<f64> {
    let wa: Vec<&EpisodeResult> = log
        .episodes
        .iter()
        .filter(|e| e.queries.iter().any(|q| !q.correct))
        .collect();
    if wa.is_empty() {
        return None;
    }
    let s = wa.iter().filter(|e| e.success).count();
    Some(s as f64 / wa.len() as f64)
}

/// Success weighted by path length: mean of S·l/max(p, l). A successful
/// zero-length episode (started on the goal) scores 1.
pub fn spl(log: &PredictionLog) -> Result<f64, EvalError> {
    if log.episodes.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let mut sum = 0.0;
    for e in &log.episodes {
        if !e.success {
            continue;
        }
        let denom = e.path_length.max(e.shortest_length);
        sum += if denom == 0 { 1.0 } else { e.shortest_length as f64 / denom as f64 };
    }
    Ok(sum / log.episodes.len() as f64)
}

/// Oracle success: fraction of episodes whose path ever came within
/// `success_radius` of the goal.
pub fn os(log: &PredictionLog, success_radius: u32) -> Result<f64, EvalError> {
    if log.episodes.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let hit = log.episodes.iter().filter(|e| e.min_goal_distance <= success_radius).count();
    Ok(hit as f64 / log.episodes.len() as f64)
}

#[cfg(test)]
#[path = "evalsuite/tests.rs"]
mod tests;

//! Forward passes over the tape: observation encoding, fusion, map reading,
//! sequence assembly, the causal decision head, and greedy inference.

use alloc::vec::Vec;

use crate::fmath;
use crate::gridworld::{Action, Bearing, Observation, VIEW_DEPTH};
use crate::numcore::attention::{causal_block, cross_attention, AttnWeights, BlockWeights};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::{NumError, Tensor};

use super::vocab::{ANS, BOS, PAD, QRY};
use super::{sample_frames, Bound, Model, GEO_FEATURES};

/// Geometry feature vector: raw depth profile, bearing fractions, distance
/// fractions over visible objects.
pub fn geo_features(obs: &Observation) -> Vec<f64> {
    let mut f = Vec::with_capacity(GEO_FEATURES);
    f.extend_from_slice(&obs.depth_profile);
    let n = obs.visible.len().max(1) as f64;
    for bearing in [Bearing::Left, Bearing::Center, Bearing::Right] {
        let c = obs.visible.iter().filter(|v| v.egocentric_bearing == bearing).count();
        f.push(c as f64 / n);
    }
    for d in 0..=VIEW_DEPTH as u32 {
        let c = obs.visible.iter().filter(|v| v.distance == d).count();
        f.push(c as f64 / n);
    }
    debug_assert_eq!(f.len(), GEO_FEATURES);
    f
}

/// Classic sinusoidal position table, `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    let ln_base = fmath::ln(10000.0);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i - i % 2) as f64;
            let rate = fmath::exp(-ln_base * pair / dim as f64);
            let angle = pos as f64 * rate;
            t.data_mut()[pos * dim + i] =
                if i % 2 == 0 { fmath::sin(angle) } else { fmath::cos(angle) };
        }
    }
    t
}

/// Assembled input sequence and the special positions inside it.
#[derive(Debug)]
pub struct Assembled {
    /// Embedded sequence before positional encodings; the map slot holds
    /// m_t bitwise.
    pub embedded: Var,
    /// Sequence after positional encodings, fed to the decision head.
    pub seq: Var,
    pub map_pos: usize,
    pub ans_pos: usize,
    pub len: usize,
}

/// Everything one decision pass produces.
#[derive(Debug)]
pub struct StepForward {
    pub assembled: Assembled,
    /// Final hidden states `[len, dim]` after the last layer norm.
    pub hidden: Var,
    /// Full-vocabulary logits `[len, vocab]`.
    pub logits: Var,
    /// Logits over the four action tokens, read at the answer slot.
    pub action_logits: Var,
    pub z: Var,
    pub m: Var,
    /// Hidden state at the map slot.
    pub m_prime: Var,
}

impl Bound {
    fn attn(&self, prefix: &str) -> AttnWeights {
        AttnWeights {
            wq: self.var(&alloc::format!("{prefix}.wq")),
            wk: self.var(&alloc::format!("{prefix}.wk")),
            wv: self.var(&alloc::format!("{prefix}.wv")),
            wo: self.var(&alloc::format!("{prefix}.wo")),
        }
    }

    /// Two-stream encoding: mean of category+attribute embeddings over the
    /// visible set (zero when nothing is visible), and a linear map of the
    /// geometry features.
    pub fn encode_observation(
        &self,
        tape: &mut Tape,
        obs: &Observation,
    ) -> Result<(Var, Var), NumError> {
        let d = self.config.dim;
        let f_vis = if obs.visible.is_empty() {
            tape.leaf(Tensor::zeros(&[d]))
        } else {
            let cat_ids: Vec<usize> = obs.visible.iter().map(|v| v.category as usize).collect();
            let attr_ids: Vec<usize> =
                obs.visible.iter().map(|v| v.attribute as usize).collect();
            let cats = tape.embedding(self.var("enc.cat_embed"), &cat_ids)?;
            let attrs = tape.embedding(self.var("enc.attr_embed"), &attr_ids)?;
            let sum = tape.add(cats, attrs)?;
            tape.mean_pool_rows(sum)?
        };
        let geo_in = tape.leaf(Tensor::vector(geo_features(obs)));
        let f_geo = tape.matmul(geo_in, self.var("enc.geo_w"))?;
        Ok((f_vis, f_geo))
    }

    /// Residual cross-attention of the semantic stream over the geometric
    /// one. Zero geometry features pass the semantic stream through
    /// unchanged.
    pub fn fuse(&self, tape: &mut Tape, f_vis: Var, f_geo: Var) -> Result<Var, NumError> {
        if self.config.geo_bypass {
            return Ok(f_vis);
        }
        let q = tape.stack_rows(&[f_vis])?;
        let kv = tape.stack_rows(&[f_geo])?;
        let attended = cross_attention(tape, q, kv, kv, &self.attn("fuse"), self.config.fusion_heads)?;
        let attended_row = tape.row(attended, 0)?;
        tape.add(f_vis, attended_row)
    }

    /// Encode and fuse one observation.
    pub fn encode_fused(&self, tape: &mut Tape, obs: &Observation) -> Result<Var, NumError> {
        let (f_vis, f_geo) = self.encode_observation(tape, obs)?;
        self.fuse(tape, f_vis, f_geo)
    }

    /// Encode every observation of an episode on one tape so later steps
    /// share the frame subgraphs.
    pub fn encode_episode(
        &self,
        tape: &mut Tape,
        observations: &[Observation],
    ) -> Result<Vec<Var>, NumError> {
        observations.iter().map(|o| self.encode_fused(tape, o)).collect()
    }

    /// Attention pooling over sampled frames into z, then a map read over
    /// the atlas codes into m.
    pub fn build_map(&self, tape: &mut Tape, frames: &[Var]) -> Result<(Var, Var), NumError> {
        let fr = tape.stack_rows(frames)?;
        let pooled = cross_attention(tape, self.var("pool.query"), fr, fr, &self.attn("pool"), 1)?;
        let z = tape.row(pooled, 0)?;
        let z_row = tape.stack_rows(&[z])?;
        let codes = self.var("atlas.codes");
        let read =
            cross_attention(tape, z_row, codes, codes, &self.attn("map"), self.config.fusion_heads)?;
        let m = tape.row(read, 0)?;
        Ok((z, m))
    }

    /// Builds the decision-head input: BOS, instruction, K frame slots
    /// (PAD-filled when the memory is short), the optional query segment,
    /// the map slot carrying m verbatim, the answer slot, and any
    /// already-known answer tokens. The query precedes the map slot so the
    /// causal head leaves a query-conditioned hidden state there.
    /// Positional encodings are added after the map substitution.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        instruction: &[u32],
        frames: &[Var],
        m: Var,
        query: Option<&[u32]>,
        answer_prefix: &[u32],
    ) -> Result<Assembled, NumError> {
        let k = self.config.frames;
        debug_assert!(!frames.is_empty() && frames.len() <= k);
        let tok = self.var("seq.tok_embed");
        let as_ids = |ids: &[u32]| ids.iter().map(|&i| i as usize).collect::<Vec<usize>>();

        let mut parts: Vec<Var> = Vec::new();
        parts.push(tape.embedding(tok, &[BOS as usize])?);
        if !instruction.is_empty() {
            parts.push(tape.embedding(tok, &as_ids(instruction))?);
        }
        let fr = tape.stack_rows(frames)?;
        parts.push(tape.matmul(fr, self.var("seq.frame_proj"))?);
        if frames.len() < k {
            let pad_ids = alloc::vec![PAD as usize; k - frames.len()];
            parts.push(tape.embedding(tok, &pad_ids)?);
        }
        let mut map_pos = 1 + instruction.len() + k;
        if let Some(q) = query {
            parts.push(tape.embedding(tok, &[QRY as usize])?);
            if !q.is_empty() {
                parts.push(tape.embedding(tok, &as_ids(q))?);
            }
            map_pos += 1 + q.len();
        }
        // Under drop_map the map row is omitted and map_pos aliases the
        // answer slot, so the map readout becomes the answer-slot state.
        if !self.config.drop_map {
            parts.push(tape.stack_rows(&[m])?);
        }
        let ans_pos = if self.config.drop_map { map_pos } else { map_pos + 1 };
        parts.push(tape.embedding(tok, &[ANS as usize])?);
        if !answer_prefix.is_empty() {
            parts.push(tape.embedding(tok, &as_ids(answer_prefix))?);
        }
        let embedded = tape.concat_rows(&parts)?;
        let len = tape.value(embedded).rows();
        let pos = tape.leaf(positional_encoding(len, self.config.dim));
        let seq = tape.add(embedded, pos)?;
        Ok(Assembled { embedded, seq, map_pos, ans_pos, len })
    }

    /// Causal transformer stack plus final layer norm.
    pub fn decision_head(&self, tape: &mut Tape, seq: Var) -> Result<Var, NumError> {
        let mut x = seq;
        for layer in 0..self.config.layers {
            let name = |s: &str| alloc::format!("head.l{layer}.{s}");
            let w = BlockWeights {
                ln1_gamma: self.var(&name("ln1_g")),
                ln1_beta: self.var(&name("ln1_b")),
                attn: self.attn(&alloc::format!("head.l{layer}")),
                mlp_w1: self.var(&name("mlp_w1")),
                mlp_b1: self.var(&name("mlp_b1")),
                mlp_w2: self.var(&name("mlp_w2")),
                mlp_b2: self.var(&name("mlp_b2")),
                ln2_gamma: self.var(&name("ln2_g")),
                ln2_beta: self.var(&name("ln2_b")),
            };
            x = causal_block(tape, x, &w, self.config.heads)?;
        }
        tape.layer_norm(x, self.var("head.final_ln_g"), self.var("head.final_ln_b"))
    }

    /// One full decision pass at the current timestep. `all_frames` holds
    /// the fused frames of the whole episode so far; the step samples its
    /// frame subset internally.
    pub fn forward_step(
        &self,
        tape: &mut Tape,
        instruction: &[u32],
        all_frames: &[Var],
        query: Option<&[u32]>,
        answer_prefix: &[u32],
        action_ids: [u32; 4],
    ) -> Result<StepForward, NumError> {
        let picked = sample_frames(all_frames.len(), self.config.frames);
        let sampled: Vec<Var> = picked.iter().map(|&i| all_frames[i]).collect();
        let (z, m) = self.build_map(tape, &sampled)?;
        let assembled = self.assemble(tape, instruction, &sampled, m, query, answer_prefix)?;
        let hidden = self.decision_head(tape, assembled.seq)?;
        let logits = tape.matmul(hidden, self.var("head.out_w"))?;
        let m_prime = tape.row(hidden, assembled.map_pos)?;
        let ans_row = tape.row(logits, assembled.ans_pos)?;
        let ids: Vec<usize> = action_ids.iter().map(|&i| i as usize).collect();
        let action_logits = tape.gather(ans_row, &ids)?;
        Ok(StepForward { assembled, hidden, logits, action_logits, z, m, m_prime })
    }
}

/// Inference result of [`Model::act`].
#[derive(Debug, Clone)]
pub struct ActOutput {
    pub action: Action,
    pub action_logits: Vec<f64>,
    /// Greedy answer tokens, absent without a query, EOS excluded.
    pub answer: Vec<u32>,
    pub z: Tensor,
    pub m: Tensor,
    pub m_prime: Tensor,
}

/// First maximum wins, so decoding ties break toward the lower id.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Greedy decision pass. The action comes from a query-free prompt;
    /// when a query is present a second prompt carrying it decodes the
    /// answer token by token until EOS or the length cap, and supplies the
    /// query-conditioned map readouts.
    pub fn act(
        &self,
        instruction: &[u32],
        observations: &[Observation],
        query: Option<&[u32]>,
    ) -> Result<ActOutput, NumError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let frames = bound.encode_episode(&mut tape, observations)?;
        let action_ids = self.vocab.action_ids();
        let base = bound.forward_step(&mut tape, instruction, &frames, None, &[], action_ids)?;
        let action_logits = tape.value(base.action_logits).data().to_vec();
        let action = self.vocab.action_from_index(argmax(&action_logits));
        let mut answer = Vec::new();
        let mut readout = (base.z, base.m, base.m_prime);
        if query.is_some() {
            for _ in 0..self.config.max_answer_len {
                let pass = bound.forward_step(
                    &mut tape,
                    instruction,
                    &frames,
                    query,
                    &answer,
                    action_ids,
                )?;
                let last = tape.row(pass.logits, pass.assembled.len - 1)?;
                let next = argmax(tape.value(last).data()) as u32;
                readout = (pass.z, pass.m, pass.m_prime);
                if next == super::vocab::EOS {
                    break;
                }
                answer.push(next);
            }
        }
        Ok(ActOutput {
            action,
            action_logits,
            answer,
            z: tape.value(readout.0).clone(),
            m: tape.value(readout.1).clone(),
            m_prime: tape.value(readout.2).clone(),
        })
    }
}

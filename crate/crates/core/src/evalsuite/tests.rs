use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gridworld::{generate_scene, SceneConfig};
use crate::model::{Model, ModelConfig};
use crate::querygen::{make_episode, QueryGenConfig};

fn outcome(
    qid: &str,
    fact: &str,
    predicted: &[&str],
    gt: &[&str],
) -> QueryOutcome {
    let predicted: Vec<String> = predicted.iter().map(|s| s.to_string()).collect();
    let gt_answer: Vec<String> = gt.iter().map(|s| s.to_string()).collect();
    QueryOutcome {
        query_id: qid.to_string(),
        fact_id: fact.to_string(),
        template_id: 0,
        qtype: crate::querygen::QueryType::SelfLocalization,
        correct: predicted == gt_answer,
        predicted,
        gt_answer,
    }
}

fn episode(id: u64, success: bool, p: u32, l: u32, min_d: u32, queries: Vec<QueryOutcome>) -> EpisodeResult {
    EpisodeResult {
        episode_id: id,
        success,
        path_length: p,
        shortest_length: l,
        min_goal_distance: min_d,
        queries,
    }
}

/// Random synthetic log with enough key collisions to form probe sets.
fn random_log(rng: &mut ChaCha8Rng, next_qid: &mut u64) -> PredictionLog {
    let answers = ["red", "blue", "green", "closet"];
    let n = rng.gen_range(1..=6);
    let mut episodes = Vec::with_capacity(n);
    for e in 0..n {
        let mut queries = Vec::new();
        for _ in 0..rng.gen_range(0..=5) {
            let fact = format!("fact{}", rng.gen_range(0..6u32));
            let gt = answers[rng.gen_range(0..answers.len())];
            let pred = if rng.gen_bool(0.5) {
                gt
            } else {
                answers[rng.gen_range(0..answers.len())]
            };
            let qid = format!("q{}", *next_qid);
            *next_qid += 1;
            queries.push(outcome(&qid, &fact, &[pred], &[gt]));
        }
        episodes.push(episode(
            e as u64,
            rng.gen_bool(0.5),
            rng.gen_range(0..30),
            rng.gen_range(0..20),
            rng.gen_range(0..8),
            queries,
        ));
    }
    PredictionLog { episodes }
}

#[test]
fn metrics_match_brute_force_recounts_on_randomized_logs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut next_qid = 0u64;
    let radius = 1u32;
    let mut saw_probe_sets = 0usize;
    let mut saw_gca = 0usize;
    let mut saw_wa = 0usize;
    for _ in 0..1000 {
        let log = random_log(&mut rng, &mut next_qid);

        // answer accuracy, recomputed from raw token equality
        let mut total = 0;
        let mut right = 0;
        for e in &log.episodes {
            for q in &e.queries {
                total += 1;
                if q.predicted == q.gt_answer {
                    right += 1;
                }
            }
        }
        match qa_acc(&log) {
            Ok(v) => assert_eq!(v, right as f64 / total as f64),
            Err(EvalError::EmptyLog) => assert_eq!(total, 0),
            Err(e) => panic!("unexpected {e}"),
        }

        // accuracy over successful episodes only
        let mut stotal = 0;
        let mut sright = 0;
        for e in &log.episodes {
            if e.success {
                for q in &e.queries {
                    stotal += 1;
                    if q.predicted == q.gt_answer {
                        sright += 1;
                    }
                }
            }
        }
        match gca(&log) {
            Some(v) => {
                saw_gca += 1;
                assert_eq!(v, sright as f64 / stotal as f64);
            }
            None => assert_eq!(stotal, 0),
        }

        // pairwise consistency, recomputed without building sets: every
        // unordered query pair sharing (fact, gt) is a comparison
        let all: Vec<&QueryOutcome> = log.queries().collect();
        let mut pairs = 0u64;
        let mut consistent = 0u64;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if all[i].fact_id == all[j].fact_id && all[i].gt_answer == all[j].gt_answer {
                    pairs += 1;
                    if all[i].predicted == all[j].predicted {
                        consistent += 1;
                    }
                }
            }
        }
        let sets = build_probe_sets(&log);
        match cmc(&log, &sets) {
            Ok(v) => {
                saw_probe_sets += 1;
                assert_eq!(v, consistent as f64 / pairs as f64);
            }
            Err(EvalError::NoProbeSets) => assert_eq!(pairs, 0),
            Err(e) => panic!("unexpected {e}"),
        }

        // navigation metrics
        let n = log.episodes.len() as f64;
        let wins = log.episodes.iter().filter(|e| e.success).count();
        assert_eq!(sr(&log).unwrap(), wins as f64 / n);

        let mut spl_sum = 0.0;
        for e in &log.episodes {
            spl_sum += if !e.success {
                0.0
            } else if e.path_length.max(e.shortest_length) == 0 {
                1.0
            } else {
                e.shortest_length as f64 / e.path_length.max(e.shortest_length) as f64
            };
        }
        assert_eq!(spl(&log).unwrap(), spl_sum / n);

        let near = log.episodes.iter().filter(|e| e.min_goal_distance <= radius).count();
        assert_eq!(os(&log, radius).unwrap(), near as f64 / n);

        let wa: Vec<&EpisodeResult> = log
            .episodes
            .iter()
            .filter(|e| e.queries.iter().any(|q| q.predicted != q.gt_answer))
            .collect();
        match sr_wa(&log) {
            Some(v) => {
                saw_wa += 1;
                let w = wa.iter().filter(|e| e.success).count();
                assert_eq!(v, w as f64 / wa.len() as f64);
            }
            None => assert!(wa.is_empty()),
        }
    }
    // the random generator must actually exercise the defined branches
    assert!(saw_probe_sets > 500, "{saw_probe_sets}");
    assert!(saw_gca > 500, "{saw_gca}");
    assert!(saw_wa > 500, "{saw_wa}");
}

#[test]
fn cmc_counts_pairs_not_queries() {
    // one set of three: answers A, A, B give one consistent pair of three
    let log = PredictionLog {
        episodes: vec![episode(
            0,
            true,
            3,
            3,
            0,
            vec![
                outcome("a", "f", &["red"], &["red"]),
                outcome("b", "f", &["red"], &["red"]),
                outcome("c", "f", &["blue"], &["red"]),
            ],
        )],
    };
    let sets = build_probe_sets(&log);
    assert_eq!(sets.len(), 1);
    assert_eq!(sets[0].query_ids.len(), 3);
    let v = cmc(&log, &sets).unwrap();
    assert!((v - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn cmc_is_invariant_under_answer_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut qid = 0u64;
    let mut tried = 0;
    while tried < 20 {
        let log = random_log(&mut rng, &mut qid);
        let sets = build_probe_sets(&log);
        let Ok(before) = cmc(&log, &sets) else { continue };
        tried += 1;
        let relabel = |w: &str| -> String {
            match w {
                "red" => "blue".to_string(),
                "blue" => "green".to_string(),
                "green" => "closet".to_string(),
                "closet" => "red".to_string(),
                other => other.to_string(),
            }
        };
        let mut renamed = log.clone();
        for e in &mut renamed.episodes {
            for q in &mut e.queries {
                q.predicted = q.predicted.iter().map(|w| relabel(w)).collect();
            }
        }
        // probe sets key on gt, which is untouched
        let after = cmc(&renamed, &sets).unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn cmc_consistency_is_not_accuracy() {
    // two queries, both wrong, but wrong differently: zero consistency
    let log = PredictionLog {
        episodes: vec![episode(
            0,
            true,
            1,
            1,
            0,
            vec![
                outcome("a", "f", &["blue"], &["red"]),
                outcome("b", "f", &["green"], &["red"]),
            ],
        )],
    };
    let sets = build_probe_sets(&log);
    assert_eq!(cmc(&log, &sets).unwrap(), 0.0);

    // identically wrong answers are perfectly consistent
    let log2 = PredictionLog {
        episodes: vec![episode(
            0,
            true,
            1,
            1,
            0,
            vec![
                outcome("a", "f", &["blue"], &["red"]),
                outcome("b", "f", &["blue"], &["red"]),
            ],
        )],
    };
    assert_eq!(cmc(&log2, &build_probe_sets(&log2)).unwrap(), 1.0);
}

#[test]
fn probe_sets_partition_matching_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut qid = 0u64;
    for _ in 0..50 {
        let log = random_log(&mut rng, &mut qid);
        let sets = build_probe_sets(&log);
        let mut seen = BTreeSet::new();
        for set in &sets {
            assert!(set.query_ids.len() >= 2);
            // members exist, are unique, and share fact and gt
            let members: Vec<&QueryOutcome> = set
                .query_ids
                .iter()
                .map(|id| log.queries().find(|q| &q.query_id == id).expect("member exists"))
                .collect();
            for m in &members {
                assert!(seen.insert(m.query_id.clone()), "{} in two sets", m.query_id);
                assert_eq!(m.fact_id, members[0].fact_id);
                assert_eq!(m.gt_answer, members[0].gt_answer);
            }
        }
        // nothing left out: any query not in a set has no partner
        for q in log.queries() {
            if !seen.contains(&q.query_id) {
                let partners = log
                    .queries()
                    .filter(|o| {
                        o.query_id != q.query_id
                            && o.fact_id == q.fact_id
                            && o.gt_answer == q.gt_answer
                    })
                    .count();
                assert_eq!(partners, 0, "{} should be in a set", q.query_id);
            }
        }
    }
}

#[test]
fn gca_equals_qa_acc_when_everything_succeeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut qid = 0u64;
    for _ in 0..20 {
        let mut log = random_log(&mut rng, &mut qid);
        for e in &mut log.episodes {
            e.success = true;
        }
        match qa_acc(&log) {
            Ok(acc) => assert_eq!(gca(&log), Some(acc)),
            Err(_) => assert_eq!(gca(&log), None),
        }
    }
}

#[test]
fn spl_handles_the_degenerate_and_pinned_cases() {
    let log = PredictionLog {
        episodes: vec![
            // started on the goal and stopped: full credit
            episode(0, true, 0, 0, 0, vec![]),
            // successful with detour: 4 / max(5, 4)
            episode(1, true, 5, 4, 0, vec![]),
            // failure contributes zero no matter the path
            episode(2, false, 4, 4, 2, vec![]),
        ],
    };
    let expect = (1.0 + 0.8 + 0.0) / 3.0;
    assert!((spl(&log).unwrap() - expect).abs() < 1e-15);
}

#[test]
fn empty_conditions_are_reported_not_zeroed() {
    let empty = PredictionLog::default();
    assert_eq!(qa_acc(&empty), Err(EvalError::EmptyLog));
    assert_eq!(sr(&empty), Err(EvalError::EmptyLog));
    assert_eq!(spl(&empty), Err(EvalError::EmptyLog));
    assert_eq!(os(&empty, 1), Err(EvalError::EmptyLog));
    assert_eq!(gca(&empty), None);
    assert_eq!(sr_wa(&empty), None);
    assert_eq!(cmc(&empty, &[]), Err(EvalError::NoProbeSets));

    // episodes without queries still leave accuracy undefined
    let nav_only = PredictionLog { episodes: vec![episode(0, true, 2, 2, 0, vec![])] };
    assert_eq!(qa_acc(&nav_only), Err(EvalError::EmptyLog));
    assert_eq!(gca(&nav_only), None);
    assert_eq!(sr_wa(&nav_only), None);
    assert!(build_probe_sets(&nav_only).is_empty());

    // all answers right: no wrong-answer cohort
    let right = PredictionLog {
        episodes: vec![episode(0, false, 2, 2, 2, vec![outcome("a", "f", &["red"], &["red"])])],
    };
    assert_eq!(sr_wa(&right), None);

    // all singleton facts: no probe sets
    let singles = PredictionLog {
        episodes: vec![episode(
            0,
            true,
            1,
            1,
            0,
            vec![
                outcome("a", "f1", &["red"], &["red"]),
                outcome("b", "f2", &["red"], &["red"]),
            ],
        )],
    };
    assert!(build_probe_sets(&singles).is_empty());
    assert_eq!(cmc(&singles, &build_probe_sets(&singles)), Err(EvalError::NoProbeSets));
}

fn rollout_dataset(scenes: u64, per_scene: usize) -> Vec<EpisodeRecord> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let gen = QueryGenConfig { budget: 3, duplicate_fraction: 0.5 };
    for s in 0..scenes {
        let scene = generate_scene(s, &SceneConfig::default()).unwrap();
        let world = World::new(scene).unwrap();
        for _ in 0..per_scene {
            let id = out.len() as u64;
            out.push(make_episode(&world, id, &mut rng, &gen));
        }
    }
    out
}

#[test]
fn expert_policy_reaches_every_goal() {
    let data = rollout_dataset(3, 2);
    let vocab = Vocabulary::standard();
    let cfg = RolloutConfig { success_radius: 1, max_steps: 256 };
    let log = rollout_with(&data, &cfg, &vocab, |ep, world, pose, _, query| {
        let action = world.expert_path(*pose, data[ep].goal).unwrap()[0];
        let answer = match query {
            None => Vec::new(),
            Some(tokens) => {
                // answer with the ground truth of the matching scripted query
                let q = data[ep]
                    .queries
                    .iter()
                    .find(|q| vocab.encode(&q.tokens).unwrap() == tokens)
                    .expect("scripted query");
                vocab.encode(&q.gt_answer).unwrap()
            }
        };
        Ok((action, answer))
    })
    .unwrap();

    assert_eq!(sr(&log).unwrap(), 1.0);
    assert_eq!(os(&log, cfg.success_radius).unwrap(), 1.0);
    assert_eq!(qa_acc(&log).unwrap(), 1.0);
    assert_eq!(gca(&log), Some(1.0));
    assert_eq!(sr_wa(&log), None);
    // every scripted query was asked exactly once
    for (rec, res) in data.iter().zip(&log.episodes) {
        assert_eq!(res.queries.len(), rec.queries.len());
        let asked: BTreeSet<&String> = res.queries.iter().map(|q| &q.query_id).collect();
        assert!(rec.queries.iter().all(|q| asked.contains(&q.query_id)));
        assert!(res.shortest_length > 0 || res.path_length == 0);
    }
    let sets = build_probe_sets(&log);
    if !sets.is_empty() {
        assert_eq!(cmc(&log, &sets).unwrap(), 1.0);
    }
}

#[test]
fn immediate_stop_fails_far_goals_with_zero_path() {
    let data: Vec<EpisodeRecord> = rollout_dataset(3, 2)
        .into_iter()
        .filter(|r| {
            let w = World::new(r.scene.clone()).unwrap();
            w.geodesic(r.start.cell(), r.goal).unwrap() > 1
        })
        .collect();
    assert!(!data.is_empty());
    let vocab = Vocabulary::standard();
    let cfg = RolloutConfig::default();
    let log = rollout_with(&data, &cfg, &vocab, |_, _, _, _, _| Ok((Action::Stop, Vec::new())))
        .unwrap();
    for (rec, res) in data.iter().zip(&log.episodes) {
        assert!(!res.success);
        assert_eq!(res.path_length, 0);
        // scripted queries are still asked on the collected history
        assert_eq!(res.queries.len(), rec.queries.len());
        for q in &res.queries {
            assert!(q.predicted.is_empty());
            assert!(!q.correct);
        }
    }
    assert_eq!(sr(&log).unwrap(), 0.0);
}

#[test]
fn step_budget_terminates_a_policy_that_never_stops() {
    let data = rollout_dataset(2, 1);
    let vocab = Vocabulary::standard();
    let cfg = RolloutConfig { success_radius: 1, max_steps: 7 };
    let log = rollout_with(&data, &cfg, &vocab, |_, _, _, observations, _| {
        assert!(observations.len() <= cfg.max_steps + 1);
        Ok((Action::Forward, Vec::new()))
    })
    .unwrap();
    for (rec, res) in data.iter().zip(&log.episodes) {
        assert!(res.path_length <= cfg.max_steps as u32);
        assert_eq!(res.queries.len(), rec.queries.len());
        // success is judged at wherever the budget ran out
        let world = World::new(rec.scene.clone()).unwrap();
        let mut pose = rec.start;
        for _ in 0..cfg.max_steps {
            pose = world.step(&pose, Action::Forward);
        }
        let d = chebyshev(pose.cell(), rec.goal);
        assert_eq!(res.success, d <= cfg.success_radius);
    }
}

#[test]
fn untrained_model_rollout_produces_a_complete_log() {
    let data = rollout_dataset(1, 2);
    let model = Model::new(
        ModelConfig {
            dim: 16,
            layers: 1,
            heads: 2,
            fusion_heads: 2,
            frames: 4,
            atlas_size: 4,
            max_answer_len: 4,
            ..ModelConfig::default()
        },
        77,
    );
    let cfg = RolloutConfig { success_radius: 1, max_steps: 10 };
    let log = rollout(&model, &data, &cfg).unwrap();
    assert_eq!(log.episodes.len(), data.len());
    for (rec, res) in data.iter().zip(&log.episodes) {
        assert_eq!(res.episode_id, rec.episode_id);
        assert_eq!(res.queries.len(), rec.queries.len());
        assert!(res.path_length <= cfg.max_steps as u32);
        assert!(res.min_goal_distance <= chebyshev(rec.start.cell(), rec.goal));
        for q in &res.queries {
            assert!(q.predicted.len() <= model.config.max_answer_len);
        }
    }
    // determinism: the same rollout twice is identical
    let again = rollout(&model, &data, &cfg).unwrap();
    assert_eq!(log, again);
}

#[test]
fn prediction_logs_serialize_round_trip() {
    let log = PredictionLog {
        episodes: vec![episode(
            3,
            true,
            4,
            4,
            0,
            vec![outcome("a", "f", &["red"], &["red"])],
        )],
    };
    let json = serde_json::to_string(&log).unwrap();
    let back: PredictionLog = serde_json::from_str(&json).unwrap();
    assert_eq!(log, back);
}

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gridworld::generate_scene;
use crate::gridworld::SceneConfig;
use crate::model::{Model, ModelConfig, Vocabulary};
use crate::numcore::gradcheck::check_gradients;
use crate::numcore::Tensor;
use crate::querygen::{make_episode, EpisodeRecord, QueryGenConfig};

fn vec_leaf(tape: &mut Tape, data: &[f64]) -> Var {
    tape.leaf(Tensor::vector(data.to_vec()))
}

fn scalar_value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn softmax_ce(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn brute_nce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let mut logits = vec![cos(anchor, positive) / tau];
    for n in negatives {
        logits.push(cos(anchor, n) / tau);
    }
    softmax_ce(&logits, 0)
}

#[test]
fn weights_default_and_validation() {
    let w = LossWeights::default();
    assert_eq!(
        (w.lambda_qa, w.lambda_c, w.lambda_s, w.lambda_r),
        (1.0, 0.1, 0.2, 0.1)
    );
    assert_eq!((w.gamma, w.tau), (0.1, 0.07));
    assert_eq!((w.n_spatial, w.n_semantic, w.n_unrelated), (8, 8, 16));
    assert!(w.validate().is_ok());

    assert!(LossWeights { tau: 0.0, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights { lambda_s: -0.1, ..LossWeights::default() }.validate().is_err());
}

#[test]
fn answer_free_step_is_plain_action_loss() {
    let mut tape = Tape::new();
    let logits = vec_leaf(&mut tape, &[0.0; 4]);
    let loss = mindcraft_loss(&mut tape, logits, 2, None, 1.0).unwrap();
    assert!((scalar_value(&tape, loss) - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn query_step_adds_mean_answer_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let action: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let answers: Vec<Vec<f64>> =
        (0..3).map(|_| (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let targets = [7u32, 0, 4];

    let mut tape = Tape::new();
    let a = vec_leaf(&mut tape, &action);
    let flat: Vec<f64> = answers.iter().flatten().copied().collect();
    let ans = tape.leaf(Tensor::matrix(3, 10, flat).unwrap());

    // Weight zero: the answer part must vanish.
    let plain = mindcraft_loss(&mut tape, a, 1, Some((ans, &targets)), 0.0).unwrap();
    assert!((scalar_value(&tape, plain) - softmax_ce(&action, 1)).abs() < 1e-12);

    let loss = mindcraft_loss(&mut tape, a, 1, Some((ans, &targets)), 1.0).unwrap();
    let mean_answer: f64 = answers
        .iter()
        .zip(targets)
        .map(|(row, t)| softmax_ce(row, t as usize))
        .sum::<f64>()
        / 3.0;
    let expected = softmax_ce(&action, 1) + mean_answer;
    assert!((scalar_value(&tape, loss) - expected).abs() < 1e-10);

    let short = [7u32, 0];
    assert_eq!(
        mindcraft_loss(&mut tape, a, 1, Some((ans, &short)), 1.0),
        Err(ObjectiveError::LengthMismatch { expected: 3, got: 2 })
    );
    let none: [u32; 0] = [];
    let empty = tape.leaf(Tensor::matrix(0, 10, vec![]).unwrap());
    assert!(mindcraft_loss(&mut tape, a, 1, Some((empty, &none)), 1.0).is_err());
}

#[test]
fn info_nce_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let dim = rng.gen_range(2..8);
        let n_neg = rng.gen_range(1..6);
        let tau = [0.07, 0.5, 1.0][case % 3];
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3 {
                    return v;
                }
            }
        };
        let anchor = draw(&mut rng);
        let positive = draw(&mut rng);
        let negatives: Vec<Vec<f64>> = (0..n_neg).map(|_| draw(&mut rng)).collect();

        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &anchor);
        let p = vec_leaf(&mut tape, &positive);
        let ns: Vec<Var> = negatives.iter().map(|n| vec_leaf(&mut tape, n)).collect();
        let loss = info_nce(&mut tape, a, p, &ns, tau, false).unwrap();
        let expected = brute_nce(&anchor, &positive, &negatives, tau);
        assert!(
            (scalar_value(&tape, loss) - expected).abs() <= 1e-10,
            "case {case}: {} vs {expected}",
            scalar_value(&tape, loss)
        );
    }
}

#[test]
fn info_nce_frozen_geometry() {
    let e0 = [1.0, 0.0, 0.0];
    let e1 = [0.0, 1.0, 0.0];
    let e2 = [0.0, 0.0, 1.0];

    // Perfect positive, two orthogonal negatives, unit temperature.
    let mut tape = Tape::new();
    let a = vec_leaf(&mut tape, &e0);
    let p = vec_leaf(&mut tape, &e0);
    let ns = [vec_leaf(&mut tape, &e1), vec_leaf(&mut tape, &e2)];
    let loss = info_nce(&mut tape, a, p, &ns, 1.0, false).unwrap();
    let got = scalar_value(&tape, loss);
    assert!((got - ((1f64.exp() + 2.0).ln() - 1.0)).abs() < 1e-12);
    assert!((got - 0.5514).abs() < 1e-4);

    // Same geometry at the sharp default temperature.
    let loss = info_nce(&mut tape, a, p, &ns, 0.07, false).unwrap();
    assert!(scalar_value(&tape, loss) < 1e-5);

    // The anchor prefers a negative equal to itself over an orthogonal
    // positive.
    let p_orth = vec_leaf(&mut tape, &e1);
    let n_self = [vec_leaf(&mut tape, &e0)];
    let loss = info_nce(&mut tape, a, p_orth, &n_self, 1.0, false).unwrap();
    assert!(scalar_value(&tape, loss) > 2f64.ln());
}

#[test]
fn info_nce_rejects_degenerate_inputs() {
    let mut tape = Tape::new();
    let a = vec_leaf(&mut tape, &[1.0, 0.0]);
    let z = vec_leaf(&mut tape, &[0.0, 0.0]);
    let n = vec_leaf(&mut tape, &[0.0, 1.0]);
    assert_eq!(info_nce(&mut tape, z, a, &[n], 1.0, false), Err(ObjectiveError::ZeroVector));
    assert_eq!(info_nce(&mut tape, a, z, &[n], 1.0, false), Err(ObjectiveError::ZeroVector));
    assert_eq!(info_nce(&mut tape, a, n, &[z], 1.0, false), Err(ObjectiveError::ZeroVector));
    assert_eq!(info_nce(&mut tape, a, n, &[], 1.0, false), Err(ObjectiveError::EmptyNegatives));
    assert!(matches!(
        info_nce(&mut tape, a, n, &[n], 0.0, false),
        Err(ObjectiveError::InvalidWeights(_))
    ));
}

#[test]
fn info_nce_gradient_flow_respects_detach_flag() {
    let run = |negative_gradients: bool| -> (bool, bool, bool) {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[0.8, 0.1, -0.4]);
        let p = vec_leaf(&mut tape, &[0.2, 0.9, 0.3]);
        let n = vec_leaf(&mut tape, &[-0.5, 0.4, 0.7]);
        let loss = info_nce(&mut tape, a, p, &[n], 0.5, negative_gradients).unwrap();
        let grads = tape.backward(loss).unwrap();
        let nz = |v: Var| grads.get(v).is_some_and(|g| g.data().iter().any(|x| *x != 0.0));
        (nz(a), nz(p), nz(n))
    };
    assert_eq!(run(false), (true, true, false));
    assert_eq!(run(true), (true, true, true));
}

fn entry(id: u64, scene: u64, region: u32, class: &str, answer: &str) -> ReplayEntry {
    ReplayEntry {
        episode_id: id,
        asked_at: id as u32,
        qtype: QueryType::SelfLocalization,
        template_id: 0,
        fact_id: format!("loc:{scene}:{region}"),
        scene_seed: scene,
        region_id: region,
        gt_answer: vec![answer.to_string()],
        class: class.to_string(),
        experience_ref: id as usize,
    }
}

#[test]
fn mining_examples() {
    let anchor = entry(0, 1, 0, "what room", "kitchen");
    let twin = entry(1, 1, 2, "what room", "kitchen");
    let spatial = entry(2, 1, 3, "what room", "bedroom");
    let semantic = entry(3, 1, 0, "is the sofa left", "left");
    let unrelated = entry(4, 2, 5, "seen before or after", "before");
    let buffer =
        vec![anchor.clone(), twin.clone(), spatial.clone(), semantic.clone(), unrelated.clone()];

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = LossWeights { n_spatial: 2, n_semantic: 2, n_unrelated: 2, ..LossWeights::default() };
    let (pos, negs, report) = mine(&buffer, &anchor, &w, &mut rng).unwrap();
    assert_eq!(pos, twin);
    assert_eq!(negs.spatial, vec![spatial.clone()]);
    assert_eq!(negs.semantic, vec![semantic]);
    assert_eq!(negs.unrelated, vec![unrelated]);
    assert_eq!(
        report,
        MineReport { spatial_shortfall: 1, semantic_shortfall: 1, unrelated_shortfall: 3 }
    );

    // Nothing shares the anchor's class and answer in its scene.
    let lonely = entry(9, 3, 0, "what room", "kitchen");
    let buffer = vec![lonely.clone(), spatial.clone()];
    assert_eq!(
        mine(&buffer, &lonely, &w, &mut rng).err(),
        Some(ObjectiveError::NoPositive)
    );
}

#[test]
fn mining_matches_rule_enumeration() {
    let scenes = [1u64, 2];
    let regions = [0u32, 1, 2];
    let classes = ["a", "b", "c", "d"];
    let answers = ["x", "y", "z"];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _case in 0..200 {
        let len = rng.gen_range(4..40);
        let buffer: Vec<ReplayEntry> = (0..len)
            .map(|i| {
                entry(
                    i as u64,
                    scenes[rng.gen_range(0..scenes.len())],
                    regions[rng.gen_range(0..regions.len())],
                    classes[rng.gen_range(0..classes.len())],
                    answers[rng.gen_range(0..answers.len())],
                )
            })
            .collect();
        let anchor = buffer[rng.gen_range(0..len)].clone();
        let w = LossWeights {
            n_spatial: rng.gen_range(0..5),
            n_semantic: rng.gen_range(0..5),
            n_unrelated: rng.gen_range(0..8),
            ..LossWeights::default()
        };

        // The rules, restated flatly over every buffer entry.
        let mut oracle_pos = BTreeSet::new();
        let mut oracle_spatial = BTreeSet::new();
        let mut oracle_semantic = BTreeSet::new();
        let mut oracle_unrelated = BTreeSet::new();
        for c in &buffer {
            if c.episode_id == anchor.episode_id && c.asked_at == anchor.asked_at {
                continue;
            }
            let same_class = c.class == anchor.class;
            let same_answer = c.gt_answer == anchor.gt_answer;
            let same_region =
                c.scene_seed == anchor.scene_seed && c.region_id == anchor.region_id;
            if same_class && same_answer && c.scene_seed == anchor.scene_seed {
                oracle_pos.insert(c.episode_id);
            }
            if same_class && !same_answer {
                oracle_spatial.insert(c.episode_id);
            }
            if same_region && !same_class && !same_answer {
                oracle_semantic.insert(c.episode_id);
            }
            if !same_region && !same_class {
                oracle_unrelated.insert(c.episode_id);
            }
        }

        match mine(&buffer, &anchor, &w, &mut rng) {
            Err(ObjectiveError::NoPositive) => assert!(oracle_pos.is_empty()),
            Err(e) => panic!("unexpected {e}"),
            Ok((pos, negs, report)) => {
                assert!(oracle_pos.contains(&pos.episode_id));
                let ids = |v: &[ReplayEntry]| -> Vec<u64> {
                    v.iter().map(|e| e.episode_id).collect()
                };
                for id in ids(&negs.spatial) {
                    assert!(oracle_spatial.contains(&id));
                }
                for id in ids(&negs.semantic) {
                    assert!(oracle_semantic.contains(&id));
                }
                for id in ids(&negs.unrelated) {
                    assert!(oracle_unrelated.contains(&id));
                }
                // Sampling without replacement, categories disjoint.
                let mut seen = BTreeSet::new();
                for e in negs.entries() {
                    assert!(seen.insert(e.episode_id));
                }
                assert_eq!(negs.spatial.len(), w.n_spatial.min(oracle_spatial.len()));
                assert_eq!(negs.semantic.len(), w.n_semantic.min(oracle_semantic.len()));
                let quota = w.n_unrelated + (w.n_spatial - negs.spatial.len())
                    + (w.n_semantic - negs.semantic.len());
                assert_eq!(negs.unrelated.len(), quota.min(oracle_unrelated.len()));
                assert_eq!(report.spatial_shortfall, w.n_spatial - negs.spatial.len());
                assert_eq!(report.semantic_shortfall, w.n_semantic - negs.semantic.len());
                assert_eq!(report.unrelated_shortfall, quota - negs.unrelated.len());
            }
        }
    }
}

fn sample_record(seed: u64) -> (crate::gridworld::World, EpisodeRecord) {
    let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
    let world = crate::gridworld::World::new(scene).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = make_episode(&world, seed, &mut rng, &QueryGenConfig {
        budget: 4,
        duplicate_fraction: 1.0,
    });
    (world, rec)
}

#[test]
fn replay_entry_copies_query_metadata() {
    let mut checked_pairs = 0;
    for seed in 0..20u64 {
        let (world, rec) = sample_record(seed);
        let entries: Vec<ReplayEntry> = rec
            .queries
            .iter()
            .map(|q| ReplayEntry::from_query(&world, rec.episode_id, 0, q).unwrap())
            .collect();
        for (q, e) in rec.queries.iter().zip(&entries) {
            assert_eq!(e.asked_at, q.asked_at);
            assert_eq!(e.template_id, q.template_id);
            assert_eq!(e.fact_id, q.fact_id);
            assert_eq!(e.region_id, q.region_id_at_ask);
            assert_eq!(e.gt_answer, q.gt_answer);
            assert_eq!(e.qtype, q.qtype);
            assert_eq!(e.scene_seed, world.scene().seed);
        }
        // Paraphrases flip the surface template but keep the class.
        for (q, e) in rec.queries.iter().zip(&entries) {
            if let Some(base) = q.query_id.strip_suffix('p') {
                let primary = rec.queries.iter().position(|o| o.query_id == base).unwrap();
                assert_ne!(q.template_id, rec.queries[primary].template_id);
                assert_eq!(e.class, entries[primary].class);
                checked_pairs += 1;
            }
        }
    }
    assert!(checked_pairs > 5);
}

#[test]
fn atlas_equidistant_codes_give_uniform_usage() {
    // Tetrahedron vertices are mutually equidistant; one feature sitting
    // exactly on each code gives zero commitment and uniform batch usage.
    let verts =
        [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let mut tape = Tape::new();
    let codes = tape.leaf(Tensor::matrix(4, 3, verts.iter().flatten().copied().collect()).unwrap());
    let features: Vec<Var> = verts.iter().map(|v| vec_leaf(&mut tape, v)).collect();
    let gamma = 0.1;
    let loss = atlas_loss(&mut tape, &features, codes, gamma).unwrap();
    assert!((scalar_value(&tape, loss) + gamma * 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn atlas_one_hot_usage_has_zero_entropy() {
    // The far codes underflow to exactly zero assignment, so the usage
    // entropy term vanishes along with the commitment.
    let rows = [[0.0, 0.0], [1e3, 0.0], [0.0, 1e3], [1e3, 1e3]];
    let mut tape = Tape::new();
    let codes = tape.leaf(Tensor::matrix(4, 2, rows.iter().flatten().copied().collect()).unwrap());
    let f = vec_leaf(&mut tape, &[0.0, 0.0]);
    let loss = atlas_loss(&mut tape, &[f], codes, 0.5).unwrap();
    assert_eq!(scalar_value(&tape, loss), 0.0);
}

#[test]
fn atlas_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let features: Vec<Vec<f64>> =
        (0..6).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let codes = Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let report = check_gradients(&[codes], |tape, vars| {
        let fs: Vec<Var> =
            features.iter().map(|f| tape.leaf(Tensor::vector(f.clone()))).collect();
        Ok(atlas_loss(tape, &fs, vars[0], 0.1).expect("valid batch"))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
}

#[test]
fn atlas_loss_sends_nothing_back_to_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let codes_t =
        Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let codes = tape.leaf(codes_t);
    let features: Vec<Var> = (0..3)
        .map(|_| {
            let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            vec_leaf(&mut tape, &v)
        })
        .collect();
    let loss = atlas_loss(&mut tape, &features, codes, 0.1).unwrap();
    let grads = tape.backward(loss).unwrap();
    for &f in &features {
        assert!(grads.get(f).is_none(), "feature received gradient");
    }
    let code_grad = grads.get(codes).expect("codes must receive gradient");
    assert!(code_grad.data().iter().any(|g| *g != 0.0));
}

/// Soft-usage entropy recomputed outside the tape.
fn usage_entropy(features: &[Vec<f64>], codes: &Tensor) -> f64 {
    let [n, d] = *codes.shape() else { panic!() };
    let mut p_bar = vec![0.0; n];
    for f in features {
        let mut logits: Vec<f64> = (0..n)
            .map(|k| {
                let row = &codes.data()[k * d..(k + 1) * d];
                -f.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    / ATLAS_SOFT_TEMP
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logits.iter_mut().for_each(|l| *l = (*l - m).exp());
        let z: f64 = logits.iter().sum();
        for k in 0..n {
            p_bar[k] += logits[k] / z / features.len() as f64;
        }
    }
    -p_bar.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[test]
fn atlas_gradient_step_raises_usage_entropy() {
    // Collapsed usage: every feature sits near code 0, the other codes are
    // a moderate distance out. One descent step must spread usage.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let features: Vec<Vec<f64>> = (0..6)
        .map(|_| vec![rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)])
        .collect();
    let codes_t = Tensor::matrix(
        4,
        2,
        vec![0.0, 0.0, 1.5, 0.1, -0.1, 1.5, 1.4, 1.5],
    )
    .unwrap();

    let h_before = usage_entropy(&features, &codes_t);

    let mut tape = Tape::new();
    let codes = tape.leaf(codes_t.clone());
    let fs: Vec<Var> = features.iter().map(|f| vec_leaf(&mut tape, f)).collect();
    let loss = atlas_loss(&mut tape, &fs, codes, 1.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(codes).unwrap();

    let lr = 0.2;
    let mut stepped = codes_t.clone();
    for (w, gi) in stepped.data_mut().iter_mut().zip(g.data()) {
        *w -= lr * gi;
    }
    let h_after = usage_entropy(&features, &stepped);
    assert!(
        h_after > h_before,
        "entropy fell from {h_before} to {h_after}"
    );
}

#[test]
fn episodic_loss_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let e0 = vec_leaf(&mut tape, &[1.0, 0.0, 0.0]);
    let e1 = vec_leaf(&mut tape, &[0.0, 1.0, 0.0]);

    // One episode, or an episode with a single step, is not a batch.
    assert_eq!(
        episodic_loss(&mut tape, &[vec![e0, e0]], 1.0, &mut rng),
        Err(ObjectiveError::InsufficientBatch)
    );
    assert_eq!(
        episodic_loss(&mut tape, &[vec![e0, e0], vec![e1]], 1.0, &mut rng),
        Err(ObjectiveError::InsufficientBatch)
    );

    // Constant per-episode features, orthogonal across episodes: every
    // anchor sees similarity one to its positive and zero to all
    // negatives, so the loss is a closed form in the episode sizes.
    let episodes = vec![vec![e0, e0, e0], vec![e1, e1]];
    let loss = episodic_loss(&mut tape, &episodes, 1.0, &mut rng).unwrap();
    let term = |negs: f64| (1f64.exp() + negs).ln() - 1.0;
    let expected = (term(2.0) + term(3.0)) / 2.0;
    assert!((scalar_value(&tape, loss) - expected).abs() < 1e-12);

    // Nonnegative on random batches.
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let episodes: Vec<Vec<Var>> = (0..3)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        let v: Vec<f64> =
                            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        vec_leaf(&mut tape, &v)
                    })
                    .collect()
            })
            .collect();
        let loss = episodic_loss(&mut tape, &episodes, 0.07, &mut rng).unwrap();
        assert!(scalar_value(&tape, loss) >= 0.0);
    }
}

#[test]
fn total_loss_weighting() {
    let w = LossWeights::default();
    let mut tape = Tape::new();
    let one = tape.scalar(1.0);

    // Two steps, a query on the first one only.
    let steps = [
        StepLosses { mindcraft: one, crl: Some(one), sem: Some(one) },
        StepLosses { mindcraft: one, crl: None, sem: Some(one) },
    ];
    let loss = total_loss(&mut tape, &steps, Some(one), &w).unwrap();
    assert!((scalar_value(&tape, loss) - 1.35).abs() < 1e-12);

    // Only the imitation term left on.
    let zeroed = LossWeights { lambda_c: 0.0, lambda_s: 0.0, lambda_r: 0.0, ..w.clone() };
    let two = tape.scalar(2.0);
    let four = tape.scalar(4.0);
    let steps = [
        StepLosses { mindcraft: two, crl: Some(one), sem: Some(one) },
        StepLosses { mindcraft: four, crl: None, sem: Some(one) },
    ];
    let loss = total_loss(&mut tape, &steps, Some(one), &zeroed).unwrap();
    assert!((scalar_value(&tape, loss) - 3.0).abs() < 1e-12);

    // Single step without a query.
    let steps = [StepLosses { mindcraft: one, crl: None, sem: Some(one) }];
    let loss = total_loss(&mut tape, &steps, Some(one), &w).unwrap();
    assert!((scalar_value(&tape, loss) - 1.3).abs() < 1e-12);

    assert_eq!(
        total_loss(&mut tape, &[], Some(one), &w),
        Err(ObjectiveError::InsufficientBatch)
    );
}

fn crl_fixture() -> Option<(Model, crate::gridworld::World, EpisodeRecord, Vec<u32>, Vec<u32>, u32)>
{
    let vocab = Vocabulary::standard();
    for seed in 0..20u64 {
        let (world, rec) = sample_record(seed);
        // The anchor step must sit late enough that shorter observation
        // prefixes are genuinely different experiences, and something must
        // be in view so the semantic encoder participates.
        let Some(q) = rec
            .queries
            .iter()
            .find(|q| q.asked_at >= 2 && !rec.observations[q.asked_at as usize].visible.is_empty())
        else {
            continue;
        };
        let t = q.asked_at;
        let instruction = vocab.encode(&rec.instruction).unwrap();
        let query = vocab.encode(&q.tokens).unwrap();
        let model = Model::new(
            ModelConfig {
                dim: 16,
                layers: 1,
                heads: 2,
                fusion_heads: 2,
                frames: 4,
                atlas_size: 4,
                max_answer_len: 8,
                ..ModelConfig::default()
            },
            400 + seed,
        );
        return Some((model, world, rec, instruction, query, t));
    }
    None
}

#[test]
fn st_crl_identical_positive_is_perfectly_aligned() {
    let (model, _world, rec, instruction, query, t) = crl_fixture().expect("fixture");
    let vocab = Vocabulary::standard();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let upto = &rec.observations[..=t as usize];
    let exp = Experience { instruction: &instruction, observations: upto, query: &query };

    // Same inputs, same parameters: the recomputed map state is identical
    // bit for bit.
    let a = recompute_map_state(&bound, &mut tape, exp, vocab.action_ids()).unwrap();
    let p = recompute_map_state(&bound, &mut tape, exp, vocab.action_ids()).unwrap();
    assert_eq!(tape.value(a).data(), tape.value(p).data());

    // One negative from the start of the episode.
    let neg = Experience {
        instruction: &instruction,
        observations: &rec.observations[..1],
        query: &query,
    };
    let loss =
        st_crl_loss(&bound, &mut tape, exp, exp, &[neg], 1.0, false, vocab.action_ids()).unwrap();
    let n = recompute_map_state(&bound, &mut tape, neg, vocab.action_ids()).unwrap();
    let expected = brute_nce(
        tape.value(a).data(),
        tape.value(a).data(),
        &[tape.value(n).data().to_vec()],
        1.0,
    );
    assert!((scalar_value(&tape, loss) - expected).abs() < 1e-10);

    assert_eq!(
        st_crl_loss(&bound, &mut tape, exp, exp, &[], 1.0, false, vocab.action_ids()),
        Err(ObjectiveError::EmptyNegatives)
    );
}

#[test]
fn st_crl_gradients_reach_atlas_and_encoder() {
    let (model, _world, rec, instruction, query, t) = crl_fixture().expect("fixture");
    let vocab = Vocabulary::standard();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let anchor = Experience {
        instruction: &instruction,
        observations: &rec.observations[..=t as usize],
        query: &query,
    };
    let positive = Experience {
        instruction: &instruction,
        observations: &rec.observations[..=(t as usize).min(1)],
        query: &query,
    };
    let negative = Experience {
        instruction: &instruction,
        observations: &rec.observations[..1],
        query: &query,
    };
    let loss = st_crl_loss(
        &bound,
        &mut tape,
        anchor,
        positive,
        &[negative],
        0.07,
        false,
        vocab.action_ids(),
    )
    .unwrap();
    let grads = tape.backward(loss).unwrap();
    for name in ["atlas.codes", "enc.geo_w", "enc.cat_embed", "pool.query", "head.l0.wq", "seq.tok_embed"] {
        let g = grads.get(bound.var(name)).unwrap_or_else(|| panic!("no grad for {name}"));
        let norm: f64 = g.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "zero gradient for {name}");
    }
}

#[test]
fn answer_ce_is_the_mean_row_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let rows: Vec<Vec<f64>> =
        (0..4).map(|_| (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let targets = [2u32, 6, 0, 3];
    let mut tape = Tape::new();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let logits = tape.leaf(Tensor::matrix(4, 7, flat).unwrap());
    let got = answer_ce(&mut tape, logits, &targets).unwrap();
    let expected: f64 = rows
        .iter()
        .zip(targets)
        .map(|(r, t)| softmax_ce(r, t as usize))
        .sum::<f64>()
        / 4.0;
    assert!((scalar_value(&tape, got) - expected).abs() < 1e-10);

    let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(answer_ce(&mut tape, v, &[0]).is_err());
}

#[test]
fn entropy_helper_matches_the_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let n = rng.gen_range(2..6);
        let d = rng.gen_range(2..5);
        let b = rng.gen_range(1..8);
        let codes = Tensor::matrix(
            n,
            d,
            (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let features: Vec<Vec<f64>> =
            (0..b).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let views: Vec<&[f64]> = features.iter().map(|f| f.as_slice()).collect();
        let got = soft_usage_entropy(&views, &codes);
        let expected = usage_entropy(&features, &codes);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got >= 0.0 && got <= (n as f64).ln() + 1e-12);
    }
    assert_eq!(soft_usage_entropy(&[], &Tensor::zeros(&[3, 2])), 0.0);
}

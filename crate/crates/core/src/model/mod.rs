//! Agent model: two-stream observation encoding, cross-attention fusion,
//! episodic frame memory, a latent map read from a learnable code atlas, and
//! a causal decision head emitting actions and answer tokens from one
//! unified vocabulary.

pub mod vocab;

mod forward;


pub use forward::{argmax, geo_features, positional_encoding, ActOutput, Assembled, StepForward};
pub use vocab::Vocabulary;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gridworld::{Category, Color, DEPTH_PROFILE_WIDTH, VIEW_DEPTH};
use crate::numcore::gradcheck::normal_tensor;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::Tensor;

/// Width of the geometry feature vector fed to the geo encoder: depth
/// profile, bearing histogram, distance histogram.
pub const GEO_FEATURES: usize = DEPTH_PROFILE_WIDTH + 3 + (VIEW_DEPTH as usize + 1);

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width D.
    pub dim: usize,
    /// Decision-head transformer layers.
    pub layers: usize,
    /// Decision-head attention heads.
    pub heads: usize,
    /// Heads in the observation fusion and map readers.
    pub fusion_heads: usize,
    /// Frame slots K in the assembled sequence.
    pub frames: usize,
    /// Code count N_w in the atlas.
    pub atlas_size: usize,
    /// Greedy decoding cap for answers.
    pub max_answer_len: usize,
    /// Ablation switch: fusion returns the semantic stream untouched.
    pub geo_bypass: bool,
    /// Ablation switch: the assembled sequence carries no map slot; the
    /// map readout row then coincides with the answer slot.
    pub drop_map: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            fusion_heads: 4,
            frames: 8,
            atlas_size: 16,
            max_answer_len: 8,
            geo_bypass: false,
            drop_map: false,
        }
    }
}

/// Named parameter store with a stable iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    inner: BTreeMap<String, Tensor>,
}

impl ParamSet {
    /// Seeded initialization of every learnable tensor: normal with sigma
    /// 0.02 for embeddings and projection matrices, sigma 1/sqrt(D) for
    /// the atlas codes so nearest-code assignment starts diverse; gains
    /// start at one, shifts and biases at zero.
    pub fn init(cfg: &ModelConfig, vocab_len: usize, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let mut p = ParamSet::default();
        let mat = |p: &mut ParamSet, name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            p.inner.insert(name.into(), normal_tensor(&[r, c], 0.02, rng));
        };
        let embed = mat;
        embed(&mut p, "enc.cat_embed", Category::ALL.len(), d, &mut rng);
        embed(&mut p, "enc.attr_embed", Color::ALL.len(), d, &mut rng);
        mat(&mut p, "enc.geo_w", GEO_FEATURES, d, &mut rng);
        for n in ["fuse.wq", "fuse.wk", "fuse.wv", "fuse.wo"] {
            mat(&mut p, n, d, d, &mut rng);
        }
        mat(&mut p, "pool.query", 1, d, &mut rng);
        for n in ["pool.wq", "pool.wk", "pool.wv", "pool.wo"] {
            mat(&mut p, n, d, d, &mut rng);
        }
        for n in ["map.wq", "map.wk", "map.wv", "map.wo"] {
            mat(&mut p, n, d, d, &mut rng);
        }
        p.inner.insert(
            "atlas.codes".into(),
            normal_tensor(&[cfg.atlas_size, d], 1.0 / crate::fmath::sqrt(d as f64), &mut rng),
        );
        embed(&mut p, "seq.tok_embed", vocab_len, d, &mut rng);
        mat(&mut p, "seq.frame_proj", d, d, &mut rng);
        for layer in 0..cfg.layers {
            let name = |suffix: &str| alloc::format!("head.l{layer}.{suffix}");
            p.inner.insert(name("ln1_g"), Tensor::filled(&[d], 1.0));
            p.inner.insert(name("ln1_b"), Tensor::zeros(&[d]));
            for s in ["wq", "wk", "wv", "wo"] {
                mat(&mut p, &name(s), d, d, &mut rng);
            }
            mat(&mut p, &name("mlp_w1"), d, 2 * d, &mut rng);
            p.inner.insert(name("mlp_b1"), Tensor::zeros(&[2 * d]));
            mat(&mut p, &name("mlp_w2"), 2 * d, d, &mut rng);
            p.inner.insert(name("mlp_b2"), Tensor::zeros(&[d]));
            p.inner.insert(name("ln2_g"), Tensor::filled(&[d], 1.0));
            p.inner.insert(name("ln2_b"), Tensor::zeros(&[d]));
        }
        p.inner.insert("head.final_ln_g".into(), Tensor::filled(&[d], 1.0));
        p.inner.insert("head.final_ln_b".into(), Tensor::zeros(&[d]));
        mat(&mut p, "head.out_w", d, vocab_len, &mut rng);
        p
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.inner.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.inner.get_mut(name)
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        self.inner.insert(name, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.inner.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.inner.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.inner.values().map(Tensor::len).sum()
    }
}

/// Model = config + vocabulary + parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Model {
        let vocab = Vocabulary::standard();
        let params = ParamSet::init(&config, vocab.len(), seed);
        Model { config, vocab, params }
    }

    /// Registers every parameter on a tape, in name order, and returns the
    /// handle map used by the forward functions.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape, self.config.clone())
    }
}

impl ParamSet {
    /// Tape-binds a raw parameter store, for callers that hold parameters
    /// outside a Model (optimizers, checkpoint loaders).
    pub fn bind(&self, tape: &mut Tape, config: ModelConfig) -> Bound {
        let vars: BTreeMap<String, Var> =
            self.iter().map(|(name, value)| (name.clone(), tape.leaf(value.clone()))).collect();
        Bound { vars, config }
    }
}

/// Tape-bound view of the parameters for one recorded computation.
pub struct Bound {
    vars: BTreeMap<String, Var>,
    pub config: ModelConfig,
}

impl Bound {
    /// Handle of a named parameter. Names are fixed at init; a miss is a
    /// programming error, not a data error.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Uniform frame subsample: everything when the memory fits, otherwise K
/// evenly spaced indices that always include the first and last frame.
pub fn sample_frames(len: usize, k: usize) -> Vec<usize> {
    debug_assert!(k >= 2);
    if len <= k {
        return (0..len).collect();
    }
    let t = (len - 1) as f64;
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for j in 0..k {
        let idx = crate::fmath::round(j as f64 * t / (k - 1) as f64) as usize;
        if picked.last() != Some(&idx) {
            picked.push(idx);
        }
    }
    // Spacing above one keeps the rounded indices distinct; the backfill
    // covers the defensive dedup path.
    let mut cursor = 0;
    while picked.len() < k {
        if !picked.contains(&cursor) {
            picked.push(cursor);
        }
        cursor += 1;
    }
    picked.sort_unstable();
    picked
}

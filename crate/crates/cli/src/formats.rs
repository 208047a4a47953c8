//! File formats: JSON configs and reports, JSON Lines datasets and logs,
//! scene directories, and the binary checkpoint.
//!
//! A checkpoint is one file: a single-line JSON manifest {version, config,
//! params: [{name, shape}]} terminated by '\n', followed by the raw
//! parameter data as little-endian 32-bit floats, arrays concatenated in
//! manifest order. Parameter order is the store's name order, so the
//! layout is deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mindcraft_core::evalsuite::{EpisodeResult, PredictionLog};
use mindcraft_core::gridworld::SceneGraph;
use mindcraft_core::model::{Model, ModelConfig, ParamSet, Vocabulary};
use mindcraft_core::numcore::Tensor;
use mindcraft_core::querygen::QueryType;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_VERSION: u32 = 1;

fn describe_io(scope: &str, path: &Path, e: &io::Error) -> String {
    if e.kind() == io::ErrorKind::NotFound {
        format!("{scope}: not found: {}", path.display())
    } else {
        format!("{scope}: {}: {e}", path.display())
    }
}

pub fn read_bytes(scope: &str, path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::data(describe_io(scope, path, &e)))
}

pub fn write_bytes(scope: &str, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::data(describe_io(scope, parent, &e)))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::data(describe_io(scope, path, &e)))
}

pub fn read_json<T: DeserializeOwned>(scope: &str, path: &Path) -> Result<T, CliError> {
    let bytes = read_bytes(scope, path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::data(format!("{scope}: {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(scope: &str, path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("{scope}: {e}")))?;
    text.push('\n');
    write_bytes(scope, path, text.as_bytes())
}

/// JSON Lines: one record per line, blank lines rejected, an empty file is
/// an empty dataset.
pub fn read_jsonl<T: DeserializeOwned>(scope: &str, path: &Path) -> Result<Vec<T>, CliError> {
    let bytes = read_bytes(scope, path)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| CliError::data(format!("{scope}: {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        out.push(serde_json::from_str(line).map_err(|e| {
            CliError::data(format!("{scope}: {}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(scope: &str, path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for item in items {
        text.push_str(
            &serde_json::to_string(item).map_err(|e| CliError::data(format!("{scope}: {e}")))?,
        );
        text.push('\n');
    }
    write_bytes(scope, path, text.as_bytes())
}

pub fn scene_file_name(seed: u64) -> String {
    format!("scene-{seed:06}.json")
}

/// Loads every `*.json` in the directory as a scene, in file-name order.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<SceneGraph>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::data(describe_io("scenes", dir, &e)))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut scenes = Vec::with_capacity(files.len());
    for file in files {
        scenes.push(read_json("scenes", &file)?);
    }
    Ok(scenes)
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    params: Vec<ManifestParam>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ParamSet,
) -> Result<(), CliError> {
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        params: params
            .iter()
            .map(|(name, t)| ManifestParam { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let mut bytes =
        serde_json::to_vec(&manifest).map_err(|e| CliError::data(format!("ckpt: {e}")))?;
    bytes.push(b'\n');
    for (_, t) in params.iter() {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_bytes("ckpt", path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CliError> {
    let bytes = read_bytes("ckpt", path)?;
    let bad = |d: String| CliError::data(format!("ckpt: {}: {d}", path.display()));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing manifest line".to_string()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    let mut params = ParamSet::default();
    let mut off = nl + 1;
    for p in &manifest.params {
        let count: usize = p.shape.iter().product();
        let end = off + count * 4;
        if end > bytes.len() {
            return Err(bad(format!("truncated data for {}", p.name)));
        }
        let data: Vec<f64> = bytes[off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::new(p.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
        params.insert(p.name.clone(), tensor);
        off = end;
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok(Model { config: manifest.config, vocab: Vocabulary::standard(), params })
}

/// Everything `eval` writes. Undefined metrics are null, never 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub qa_acc: Option<f64>,
    pub gca: Option<f64>,
    pub cmc: Option<f64>,
    pub sr_wa: Option<f64>,
    pub sr: f64,
    pub spl: f64,
    pub os: f64,
    pub n_episodes: usize,
    pub n_queries: usize,
    pub n_probe_sets: usize,
    pub per_qtype: BTreeMap<String, QtypeBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QtypeBreakdown {
    pub n: usize,
    pub correct: usize,
    pub qa_acc: f64,
}

pub fn qtype_name(q: QueryType) -> &'static str {
    match q {
        QueryType::ObjectAttributeRecall => "object_attribute_recall",
        QueryType::TemporalRelationRecall => "temporal_relation_recall",
        QueryType::SelfLocalization => "self_localization",
        QueryType::LocalSpatialRelation => "local_spatial_relation",
        QueryType::TopologicalAdjacency => "topological_adjacency",
        QueryType::FutureLandmark => "future_landmark",
    }
}

pub fn build_report(
    log: &PredictionLog,
    success_radius: u32,
) -> Result<EvalReport, CliError> {
    use mindcraft_core::evalsuite as ev;
    let fail = |e: ev::EvalError| CliError::data(format!("eval: {e}"));
    let option_of = |r: Result<f64, ev::EvalError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(ev::EvalError::EmptyLog) | Err(ev::EvalError::NoProbeSets) => Ok(None),
        Err(e) => Err(fail(e)),
    };
    let sets = ev::build_probe_sets(log);
    let mut per_qtype: BTreeMap<String, QtypeBreakdown> = BTreeMap::new();
    for q in log.queries() {
        let slot = per_qtype
            .entry(qtype_name(q.qtype).to_string())
            .or_insert(QtypeBreakdown { n: 0, correct: 0, qa_acc: 0.0 });
        slot.n += 1;
        slot.correct += usize::from(q.correct);
    }
    for slot in per_qtype.values_mut() {
        slot.qa_acc = slot.correct as f64 / slot.n as f64;
    }
    Ok(EvalReport {
        qa_acc: option_of(ev::qa_acc(log))?,
        gca: ev::gca(log),
        cmc: option_of(ev::cmc(log, &sets))?,
        sr_wa: ev::sr_wa(log),
        sr: ev::sr(log).map_err(fail)?,
        spl: ev::spl(log).map_err(fail)?,
        os: ev::os(log, success_radius).map_err(fail)?,
        n_episodes: log.episodes.len(),
        n_queries: log.queries().count(),
        n_probe_sets: sets.len(),
        per_qtype,
    })
}

/// Columns of one embedding-dump row; the m′ vector and optional
/// projection are appended as numbered columns.
pub fn dump_header(dim: usize, project: bool) -> Vec<String> {
    let mut cols = vec![
        "episode_id".to_string(),
        "t".to_string(),
        "query_id".to_string(),
        "region_id".to_string(),
        "room_type".to_string(),
        "qtype".to_string(),
    ];
    for i in 0..dim {
        cols.push(format!("m_{i}"));
    }
    if project {
        cols.push("proj_0".to_string());
        cols.push("proj_1".to_string());
    }
    cols
}

pub fn write_run_config(path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_json("config", path, cfg)
}

pub fn read_run_config(path: &Path) -> Result<RunConfig, CliError> {
    read_json("config", path)
}

/// Per-episode summary line printed by `eval` when verbose output is
/// wanted later; kept for the report's JSON side only.
pub fn episode_brief(e: &EpisodeResult) -> String {
    format!(
        "episode {}: success={} path={} shortest={} queries={}",
        e.episode_id,
        u8::from(e.success),
        e.path_length,
        e.shortest_length,
        e.queries.len()
    )
}

//! Dataset generation, the JSON manifest and split bookkeeping.

use hmap_core::geometry::TerrainKind;
use hmap_core::heightmap::{HeightmapSpec, FLATTENING_ORDER};
use hmap_core::rng::{derive_seed, SplitMix64};
use hmap_core::terrain::{generate, randomized_spec, TerrainSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::container::{load_episode, save_episode};
use crate::episode::{simulate_episode, Episode, SensorSuite, TrajectoryConfig};
use crate::error::{PipelineError, Result};
use crate::model::{HEIGHT_OFFSET, RANGE_SCALE};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Seed domain for episode scripts, kept apart from terrain seeds.
const EPISODE_SEED_DOMAIN: u64 = 0xe915_0de5;
const SPLIT_SEED_DOMAIN: u64 = 0x5b17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub master_seed: u64,
    pub episodes_per_kind: usize,
    pub steps_per_episode: usize,
    pub kinds: Vec<TerrainKind>,
    pub terrain_footprint: [f64; 2],
    pub sensors: SensorSuite,
    pub heightmap: HeightmapSpec,
    pub trajectory: TrajectoryConfig,
}

impl Default for DatasetConfig {
    /// 140 episodes (20 per terrain kind) of 64 steps.
    fn default() -> Self {
        Self {
            master_seed: 7,
            episodes_per_kind: 20,
            steps_per_episode: 64,
            kinds: TerrainKind::ALL.to_vec(),
            terrain_footprint: [8.0, 8.0],
            sensors: SensorSuite::default(),
            heightmap: HeightmapSpec::default(),
            trajectory: TrajectoryConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_kind == 0 || self.steps_per_episode == 0 || self.kinds.is_empty() {
            return Err(PipelineError::Config("dataset needs at least one episode of one step".into()));
        }
        self.sensors.lidar.validate()?;
        self.sensors.depth.validate()?;
        self.heightmap.validate()?;
        Ok(())
    }

    pub fn episode_count(&self) -> usize {
        self.episodes_per_kind * self.kinds.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEntry {
    pub id: u32,
    pub file: String,
    pub kind: TerrainKind,
    pub terrain: TerrainSpec,
    pub seed: u64,
    pub steps: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub range_scale: f32,
    pub height_offset: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: DatasetConfig,
    pub episodes: Vec<EpisodeEntry>,
    pub splits: BTreeMap<Split, Vec<u32>>,
    pub normalization: Normalization,
    pub flattening_order: String,
    pub sample_count: usize,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[u32] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn entry(&self, id: u32) -> Option<&EpisodeEntry> {
        self.episodes.iter().find(|e| e.id == id)
    }

    /// Splits must be disjoint, cover every episode and agree with the
    /// per-episode tags.
    pub fn check_splits(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (split, ids) in &self.splits {
            for id in ids {
                if !seen.insert(*id) {
                    return Err(PipelineError::Leakage(format!("episode {id} appears in more than one split")));
                }
                match self.entry(*id) {
                    Some(e) if e.split == *split => {}
                    _ => return Err(PipelineError::Leakage(format!("episode {id} is tagged inconsistently"))),
                }
            }
        }
        if seen.len() != self.episodes.len() {
            return Err(PipelineError::Data("splits do not cover every episode".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Train / validation / test counts: 70 % rounded to train, the rest halved
/// with the odd episode going to validation.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let rest = n - train;
    let val = rest.div_ceil(2);
    (train, val, rest - val)
}

/// Stratified split: episodes are shuffled within their terrain kind, the
/// kinds are interleaved round-robin, and the resulting order is cut by
/// [`split_counts`].
pub fn assign_splits(kinds: &[TerrainKind], seed: u64) -> Vec<Split> {
    let mut rng = SplitMix64::new(derive_seed(seed, SPLIT_SEED_DOMAIN));
    let mut groups: BTreeMap<TerrainKind, Vec<usize>> = BTreeMap::new();
    for (i, k) in kinds.iter().enumerate() {
        groups.entry(*k).or_default().push(i);
    }
    for g in groups.values_mut() {
        rng.shuffle(g);
    }
    let mut order = Vec::with_capacity(kinds.len());
    let longest = groups.values().map(Vec::len).max().unwrap_or(0);
    for r in 0..longest {
        for g in groups.values() {
            if let Some(i) = g.get(r) {
                order.push(*i);
            }
        }
    }
    let (train, val, _) = split_counts(kinds.len());
    let mut out = vec![Split::Test; kinds.len()];
    for (pos, i) in order.into_iter().enumerate() {
        out[i] = if pos < train {
            Split::Train
        } else if pos < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Episode table of a configuration, without simulating anything.
pub fn plan_episodes(cfg: &DatasetConfig) -> Vec<EpisodeEntry> {
    let mut kinds = Vec::with_capacity(cfg.episode_count());
    for k in &cfg.kinds {
        kinds.extend(std::iter::repeat_n(*k, cfg.episodes_per_kind));
    }
    let splits = assign_splits(&kinds, cfg.master_seed);
    kinds
        .iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (kind, split))| {
            let mut terrain = randomized_spec(*kind, derive_seed(cfg.master_seed, i as u64));
            terrain.footprint = cfg.terrain_footprint;
            EpisodeEntry {
                id: i as u32,
                file: format!("episode_{i:05}.epis"),
                kind: *kind,
                terrain,
                seed: derive_seed(cfg.master_seed ^ EPISODE_SEED_DOMAIN, i as u64),
                steps: cfg.steps_per_episode,
                split,
            }
        })
        .collect()
}

pub fn simulate_entry(cfg: &DatasetConfig, entry: &EpisodeEntry) -> Result<Episode> {
    let field = generate(&entry.terrain)?;
    let mut ep = simulate_episode(&field, entry.seed, entry.steps, &cfg.sensors, &cfg.heightmap, &cfg.trajectory)?;
    ep.id = entry.id;
    ep.terrain_seed = entry.terrain.seed;
    Ok(ep)
}

/// Simulates every episode into `out_dir` (one `EPIS` file each, `jobs`
/// worker threads) and writes the manifest last.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path, jobs: usize) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let entries = plan_episodes(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| {
        entries.par_iter().try_for_each(|e| -> Result<()> {
            let ep = simulate_entry(cfg, e)?;
            save_episode(&out_dir.join(&e.file), &ep)
        })
    })?;
    let mut splits: BTreeMap<Split, Vec<u32>> = BTreeMap::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        splits.insert(s, entries.iter().filter(|e| e.split == s).map(|e| e.id).collect());
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        sample_count: entries.iter().map(|e| e.steps).sum(),
        episodes: entries,
        splits,
        normalization: Normalization { range_scale: RANGE_SCALE, height_offset: HEIGHT_OFFSET },
        flattening_order: FLATTENING_ORDER.to_string(),
    };
    manifest.check_splits()?;
    std::fs::write(out_dir.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(root.join(MANIFEST_FILE))?;
        let manifest = DatasetManifest::from_json(&text)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(PipelineError::Data(format!("unsupported manifest schema {}", manifest.schema_version)));
        }
        manifest.check_splits()?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn ids(&self, split: Split) -> &[u32] {
        self.manifest.ids(split)
    }

    pub fn load(&self, id: u32) -> Result<Episode> {
        let entry = self.manifest.entry(id).ok_or_else(|| PipelineError::Data(format!("no episode {id}")))?;
        let ep = load_episode(&self.root.join(&entry.file))?;
        if ep.id != id || ep.kind != entry.kind || ep.len() != entry.steps {
            return Err(PipelineError::Data(format!("episode file {} does not match the manifest", entry.file)));
        }
        Ok(ep)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Episode>> {
        self.ids(split).iter().map(|id| self.load(*id)).collect()
    }
}

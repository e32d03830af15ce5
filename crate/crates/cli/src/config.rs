use std::path::{Path, PathBuf};

use hmap_pipeline::dataset::DatasetConfig;
use hmap_pipeline::eval::EvalConfig;
use hmap_pipeline::model::ModelConfig;
use hmap_pipeline::stage1::Stage1Config;
use hmap_pipeline::stage2::Stage2Config;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "HMAP_OUT_DIR";
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub stage1_depth: Option<PathBuf>,
    pub stage1_lidar: Option<PathBuf>,
}

/// Every tunable of a run in one document. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.model.heightmap != self.dataset.heightmap {
            return Err(Failure::data("model.heightmap and dataset.heightmap differ"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `out` when given, else `<$HMAP_OUT_DIR or runs>/<command>`.
pub fn resolve_out(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        root.join(command)
    })
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    tool: &'a str,
    tool_version: &'a str,
    command: &'a str,
    arguments: serde_json::Value,
}

/// Writes `config.json` (loadable with `--config`) and `run.json` (tool
/// version, subcommand, arguments) into `dir`.
pub fn write_provenance(dir: &Path, cfg: &RunConfig, command: &str, arguments: serde_json::Value) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    let record = RunRecord { tool: "hmap", tool_version: env!("CARGO_PKG_VERSION"), command, arguments };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

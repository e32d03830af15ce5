//! `hmap`: terrain and dataset generation, range-image inspection, both
//! training stages, evaluation and a preprocessing benchmark.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use hmap_core::TerrainKind;
use hmap_pipeline::dataset::Split;
use hmap_pipeline::model::{Modality, ModalityMode};

use crate::failure::{Failure, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "hmap", version, about = "Robot-centric heightmap reconstruction from simulated LiDAR and depth")]
pub struct Cli {
    /// Worker threads for episode-parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    pub reproducible: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a height field.
    Terrain {
        #[arg(long)]
        kind: TerrainKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw the terrain parameters from the seed instead of using the defaults.
        #[arg(long)]
        randomize: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a PGM rendering of the elevations.
        #[arg(long)]
        preview: bool,
        /// Also write a LiDAR scan taken from the footprint center.
        #[arg(long)]
        scan: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Simulate episodes and write a dataset directory.
    Dataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Preprocess a stored point cloud into a range image.
    Project {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: pretrain one modality's autoencoder.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: train the full model on sequences.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<ModalityMode>,
        #[arg(long)]
        seq: Option<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Stage 1 checkpoint; repeat for both modalities.
        #[arg(long = "stage1")]
        stage1: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained model or the fusion baseline on a dataset split.
    #[command(group(ArgGroup::new("method").required(true).args(["checkpoint", "oracle"])))]
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        /// Additional trained models scored alongside; repeatable.
        #[arg(long = "ablation")]
        ablations: Vec<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the range-image preprocessing against the 10 Hz budget.
    Bench {
        #[arg(long, default_value_t = 200)]
        scan_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}")),
    }
}

impl Cli {
    pub fn jobs(&self) -> Result<usize, Failure> {
        if self.reproducible {
            return Ok(1);
        }
        match self.jobs {
            Some(0) => Err(Failure::usage("--jobs must be at least 1")),
            Some(n) => Ok(n),
            None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

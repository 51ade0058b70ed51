use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use triplanar::metrics::DEFAULT_N_THRESHOLDS;
use triplanar::models::{SanConfig, UnetConfig};
use triplanar::phantom::PhantomRange;
use triplanar::training::HyperParams;

use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "triplanar", version, about = "Tri-planar U-Net vessel-wall segmentation")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a train/test manifest.
    Phantom(PhantomArgs),
    /// Train the three per-view U-Nets, then the fusion network.
    Train(TrainArgs),
    /// Segment one volume, or the test split of a manifest.
    Segment(SegmentArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Number of volumes.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub train_ratio: Option<f64>,
    /// Volume size as NXxNYxNZ, e.g. 64x64x32.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    /// Noise level, as a single value or a LO,HI range.
    #[arg(long, value_parser = parse_range)]
    pub noise_level: Option<[f64; 2]>,
    /// Per-axial-frame noise gain spread (anisotropic noise), value or LO,HI.
    #[arg(long, value_parser = parse_range)]
    pub frame_noise_spread: Option<[f64; 2]>,
    /// Lumen radius in voxels, value or LO,HI.
    #[arg(long, value_parser = parse_range)]
    pub lumen_radius: Option<[f64; 2]>,
    /// Wall thickness in voxels, value or LO,HI.
    #[arg(long, value_parser = parse_range)]
    pub wall_thickness: Option<[f64; 2]>,
    /// Centreline drift amplitude in voxels, value or LO,HI.
    #[arg(long, value_parser = parse_range)]
    pub drift_amplitude: Option<[f64; 2]>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub n_epoch: Option<usize>,
    /// Epochs for the fusion network (defaults to --n-epoch).
    #[arg(long)]
    pub san_n_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Volume size the networks are built for (defaults to the data's size).
    #[arg(long, value_parser = parse_dims)]
    pub working_dims: Option<[usize; 3]>,
    /// Keep only the newest K epoch checkpoints per model (default: all).
    #[arg(long)]
    pub keep_checkpoints: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Volume stem (`<stem>.raw` + `<stem>.json`) to segment.
    #[arg(long, conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    /// Segment every volume of the manifest's test split, with and without fusion.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Use the axial U-Net alone.
    #[arg(long)]
    pub axial_only: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Segmentation directory or probability volume stem.
    #[arg(long, requires = "truth", conflicts_with = "manifest")]
    pub pred: Option<PathBuf>,
    /// Ground-truth mask stem.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Evaluate the manifest's test split; needs --predictions.
    #[arg(long, requires = "predictions")]
    pub manifest: Option<PathBuf>,
    /// Output directory of `segment --manifest`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub n_thresholds: Option<usize>,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad dims {s:?}: {e}"))?;
    <[usize; 3]>::try_from(parts).map_err(|_| format!("dims must look like 64x64x32, got {s:?}"))
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad value {s:?}: {e}"))?;
    match parts[..] {
        [v] => Ok([v, v]),
        [lo, hi] => Ok([lo, hi]),
        _ => Err(format!("expected VALUE or LO,HI, got {s:?}")),
    }
}

/// Everything a command needs. Unset fields take their defaults; the merged
/// result is echoed to `<out>/config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub phantom: PhantomSection,
    pub train: TrainSection,
    pub segment: SegmentSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            phantom: PhantomSection::default(),
            train: TrainSection::default(),
            segment: SegmentSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub n: usize,
    pub train_ratio: f64,
    pub range: PhantomRange,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            n: 10,
            train_ratio: 0.8,
            range: PhantomRange::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub manifest: Option<PathBuf>,
    pub hyper: HyperParams,
    pub san_n_epoch: Option<usize>,
    pub unet: UnetConfig,
    pub san: SanConfig,
    pub working_dims: Option<[usize; 3]>,
    pub keep_checkpoints: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            manifest: None,
            hyper: HyperParams::default(),
            san_n_epoch: None,
            unet: UnetConfig::default(),
            san: SanConfig::default(),
            working_dims: None,
            keep_checkpoints: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    pub run: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub threshold: f32,
    pub axial_only: bool,
}

impl Default for SegmentSection {
    fn default() -> Self {
        Self {
            run: None,
            input: None,
            manifest: None,
            threshold: triplanar::fusion::DEFAULT_THRESHOLD,
            axial_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub pred: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub threshold: f64,
    pub n_thresholds: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            pred: None,
            truth: None,
            manifest: None,
            predictions: None,
            threshold: triplanar::fusion::DEFAULT_THRESHOLD as f64,
            n_thresholds: DEFAULT_N_THRESHOLDS,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Applies command-line flags on top of the file values.
    pub fn merge(&mut self, cli: &Cli) {
        if let Some(seed) = cli.seed {
            self.seed = seed;
        }
        if let Some(out) = &cli.out {
            self.out = Some(out.clone());
        }
        fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
            if let Some(v) = flag {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        match &cli.command {
            Command::Phantom(a) => {
                let p = &mut self.phantom;
                set(&mut p.n, &a.n);
                set(&mut p.train_ratio, &a.train_ratio);
                set(&mut p.range.dims, &a.dims);
                set(&mut p.range.noise_level, &a.noise_level);
                set(&mut p.range.frame_noise_spread, &a.frame_noise_spread);
                set(&mut p.range.lumen_radius, &a.lumen_radius);
                set(&mut p.range.wall_thickness, &a.wall_thickness);
                set(&mut p.range.drift_amplitude, &a.drift_amplitude);
            }
            Command::Train(a) => {
                let t = &mut self.train;
                set_opt(&mut t.manifest, &a.manifest);
                set(&mut t.hyper.n_epoch, &a.n_epoch);
                set_opt(&mut t.san_n_epoch, &a.san_n_epoch);
                set(&mut t.hyper.batch_size, &a.batch_size);
                set(&mut t.hyper.alpha, &a.alpha);
                set(&mut t.unet.base_width, &a.base_width);
                set(&mut t.unet.depth, &a.depth);
                set_opt(&mut t.working_dims, &a.working_dims);
                set_opt(&mut t.keep_checkpoints, &a.keep_checkpoints);
            }
            Command::Segment(a) => {
                let s = &mut self.segment;
                set_opt(&mut s.run, &a.run);
                set_opt(&mut s.input, &a.input);
                set_opt(&mut s.manifest, &a.manifest);
                set(&mut s.threshold, &a.threshold);
                s.axial_only |= a.axial_only;
            }
            Command::Evaluate(a) => {
                let e = &mut self.evaluate;
                set_opt(&mut e.pred, &a.pred);
                set_opt(&mut e.truth, &a.truth);
                set_opt(&mut e.manifest, &a.manifest);
                set_opt(&mut e.predictions, &a.predictions);
                set(&mut e.threshold, &a.threshold);
                set(&mut e.n_thresholds, &a.n_thresholds);
            }
        }
    }
}

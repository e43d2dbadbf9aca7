//! Run configuration: one TOML file drives every subcommand. Unset keys take
//! the documented defaults, and each run echoes the fully-resolved config for
//! reproduction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SynthConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::nn::NetConfig;
use crate::register::RansacConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// single-threaded, zeroed timings, byte-reproducible outputs
    pub deterministic: bool,
    /// worker threads; 0 picks the hardware default
    pub threads: usize,
    /// run the pipeline in f64 instead of f32
    pub use_f64: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "run".into(),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            deterministic: false,
            threads: 0,
            use_f64: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Kitti,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    // scan-sequence datasets
    pub scan_dir: Option<PathBuf>,
    pub pose_file: Option<PathBuf>,
    pub calib_file: Option<PathBuf>,
    pub sequence_id: String,
    pub train_stride: usize,
    pub test_window: usize,
    /// cap on evaluation pairs (0 = no cap)
    pub max_pairs: usize,
    // synthetic corpus
    pub synth_pairs: usize,
    pub synth_points: usize,
    pub synth: SynthConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Synthetic,
            scan_dir: None,
            pose_file: None,
            calib_file: None,
            sequence_id: "00".into(),
            train_stride: 10,
            test_window: 5,
            max_pairs: 0,
            synth_pairs: 50,
            synth_points: 4096,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSection {
    /// voxel grid size (meters)
    pub voxel_size: f64,
    /// neighbors for the normal/curvature PCA
    pub k_normal: usize,
    /// random-sample budget after filtering (0 = keep all)
    pub sample_points: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            voxel_size: 0.1,
            k_normal: 16,
            sample_points: 16384,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub temperature: f64,
    pub sigma_max: f64,
    pub lambda_p2p: f64,
    /// saliency-derived keypoint weights in the matching loss
    pub use_weights: bool,
    /// keep chamfer + point-to-point active during stage 2
    pub stage2_keep_detector_loss: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            temperature: 0.1,
            sigma_max: 1.0,
            lambda_p2p: 1.0,
            use_weights: true,
            stage2_keep_detector_loss: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// pairs accumulated per optimizer step
    pub batch_pairs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// epochs between checkpoints (0 = only final)
    pub checkpoint_every: usize,
    pub freeze_detector: bool,
    /// seed for parameter initialization
    pub init_seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            stage1_epochs: 20,
            stage2_epochs: 20,
            batch_pairs: 1,
            learning_rate: 0.001,
            momentum: 0.9,
            checkpoint_every: 10,
            freeze_detector: false,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub input_sizes: Vec<usize>,
    pub keypoint_counts: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            input_sizes: vec![4096, 8192, 16384],
            keypoint_counts: vec![128, 256, 512],
            repeats: 3,
        }
    }
}

/// The whole run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessSection,
    pub network: NetConfig,
    pub detector: DetectorConfig,
    pub loss: LossSection,
    pub training: TrainingSection,
    pub ransac: RansacConfig,
    pub eval: EvalConfig,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.preprocess.voxel_size <= 0.0 {
            return Err(Error::Config("preprocess.voxel_size must be positive".into()));
        }
        if self.preprocess.k_normal < 3 {
            return Err(Error::Config("preprocess.k_normal must be at least 3".into()));
        }
        if self.detector.candidates == 0 || self.detector.neighbors == 0 {
            return Err(Error::Config("detector counts must be positive".into()));
        }
        if self.detector.dilation_ratio == 0 {
            return Err(Error::Config("detector.dilation_ratio must be >= 1".into()));
        }
        if self.loss.temperature <= 0.0 {
            return Err(Error::Config("loss.temperature must be positive".into()));
        }
        if self.loss.sigma_max <= 0.0 {
            return Err(Error::Config("loss.sigma_max must be positive".into()));
        }
        if self.training.learning_rate <= 0.0 {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        if self.training.batch_pairs == 0 {
            return Err(Error::Config("training.batch_pairs must be >= 1".into()));
        }
        if !(0.0 < self.ransac.confidence && self.ransac.confidence < 1.0) {
            return Err(Error::Config("ransac.confidence must be in (0, 1)".into()));
        }
        self.eval.validate()?;
        if self.dataset.kind == DatasetKind::Kitti
            && (self.dataset.scan_dir.is_none() || self.dataset.pose_file.is_none())
        {
            return Err(Error::Config(
                "dataset.kind = \"kitti\" requires scan_dir and pose_file".into(),
            ));
        }
        if !(0.0 < self.dataset.synth.overlap && self.dataset.synth.overlap <= 1.0) {
            return Err(Error::Config("dataset.synth.overlap must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// The fully-resolved TOML echo written as `config.resolved`.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config echo: {e}")))
    }

    /// Output directory for this run: `<out_dir>/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(&self.run.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_config() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.preprocess.voxel_size, 0.1);
        assert_eq!(cfg.preprocess.sample_points, 16384);
        assert_eq!(cfg.detector.candidates, 512);
        assert_eq!(cfg.detector.neighbors, 128);
        assert_eq!(cfg.detector.dilation_ratio, 2);
        assert_eq!(cfg.loss.temperature, 0.1);
        assert_eq!(cfg.training.learning_rate, 0.001);
        assert_eq!(cfg.training.momentum, 0.9);
        assert_eq!(cfg.ransac.confidence, 0.99);
        assert_eq!(cfg.ransac.max_iterations, 10_000);
        assert_eq!(cfg.eval.eps_r, 0.5);
        assert_eq!(cfg.eval.eps_p, 1.0);
        assert_eq!(cfg.eval.keypoint_counts, vec![128, 256, 512]);
        assert_eq!(cfg.bench.input_sizes, vec![4096, 8192, 16384]);
        cfg.validate().unwrap();
    }

    #[test]
    fn resolved_echo_round_trips() {
        let cfg = RunConfig::default();
        let echo = cfg.resolved_toml().unwrap();
        let back: RunConfig = toml::from_str(&echo).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_bad_values() {
        let bad: RunConfig = toml::from_str("[loss]\ntemperature = -1.0").unwrap();
        assert!(bad.validate().is_err());
        let bad: RunConfig = toml::from_str("[dataset]\nkind = \"kitti\"").unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn load_reports_missing_file() {
        assert!(matches!(
            RunConfig::load("/nonexistent/config.toml"),
            Err(Error::Io { .. })
        ));
    }
}

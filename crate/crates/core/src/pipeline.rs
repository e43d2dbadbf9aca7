//! Glue between the datasets and the core stages: preprocessing, stage-timed
//! detection/description, corpus preparation, the processed-cloud cache
//! format and the benchmark grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{Point3, Vector3};

use crate::cloud::{estimate_normals_curvature, voxel_downsample, PointCloud};
use crate::config::{DatasetKind, RunConfig};
use crate::dataset::{self, synth_scene, FramePair, SequenceManifest};
use crate::descriptor::{describe, DescriptorSet};
use crate::detector::{
    build_clusters_from_centers, detect_from_clusters, sample_centers, DetectorConfig, KeypointSet,
};
use crate::error::{Error, Result};
use crate::metrics::{EvalPair, StageTimings};
use crate::nn::NetParams;
use crate::scalar::{derive_seed, Real};
use crate::spatial::KdTree;

/// Voxel filter, normal/curvature estimation, then random subsampling to at
/// most `sample_points` (the fixed preprocessing order).
pub fn preprocess_cloud<T: Real>(
    cloud: &PointCloud<T>,
    cfg: &crate::config::PreprocessSection,
    seed: u64,
) -> Result<PointCloud<T>> {
    let filtered = voxel_downsample(cloud, T::cast(cfg.voxel_size))?;
    if filtered.len() < cfg.k_normal {
        return Err(Error::InvalidArgument(format!(
            "cloud has only {} points after the voxel filter",
            filtered.len()
        )));
    }
    let (featured, _diag) = estimate_normals_curvature(&filtered, cfg.k_normal)?;
    if cfg.sample_points == 0 || featured.len() <= cfg.sample_points {
        return Ok(featured);
    }
    let keep =
        crate::spatial::random_sample_candidates(&featured, cfg.sample_points, seed)?;
    Ok(featured.select(&keep))
}

/// Detection plus description with per-stage wall-clock timings.
pub fn detect_describe_timed<T: Real>(
    cloud: &PointCloud<T>,
    params: &NetParams<T>,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<(KeypointSet<T>, DescriptorSet<T>, StageTimings)> {
    if !cloud.has_features() {
        return Err(Error::MissingChannels);
    }
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let centers = sample_centers(cloud, cfg, seed)?;
    timings.sample = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let tree = KdTree::build(cloud.positions())?;
    let clusters = build_clusters_from_centers(cloud, &tree, &centers, cfg, seed)?;
    timings.cluster = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let keypoints = detect_from_clusters(clusters, params)?;
    timings.detect = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let descriptors = describe(&keypoints.clusters, &keypoints.feature_maps, params)?;
    timings.describe = t.elapsed().as_secs_f64();

    Ok((keypoints, descriptors, timings))
}

/// Builds the evaluation corpus described by the config: synthetic pairs or
/// sequence pairs read from disk. Unreadable sequence frames surface as
/// `Err` entries so the evaluator can skip and count them.
pub fn build_eval_corpus<T: Real>(cfg: &RunConfig) -> Result<Vec<Result<EvalPair<T>>>> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let n = cfg.dataset.synth_pairs.max(1);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(build_synth_pair(cfg, i));
            }
            Ok(out)
        }
        DatasetKind::Kitti => {
            let manifest = load_manifest::<T>(cfg)?;
            let mut pairs = dataset::make_test_pairs(&manifest, cfg.dataset.test_window);
            if cfg.dataset.max_pairs > 0 {
                pairs.truncate(cfg.dataset.max_pairs);
            }
            Ok(pairs
                .into_iter()
                .map(|p| load_sequence_pair(cfg, &manifest, &p))
                .collect())
        }
    }
}

/// Builds the training corpus (pairs with feature-attached clouds).
pub fn build_training_pairs<T: Real>(cfg: &RunConfig) -> Result<Vec<crate::train::TrainingPair<T>>> {
    let eval_pairs: Vec<EvalPair<T>> = match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let n = cfg.dataset.synth_pairs.max(1);
            (0..n)
                .map(|i| build_synth_pair(cfg, i))
                .collect::<Result<_>>()?
        }
        DatasetKind::Kitti => {
            let manifest = load_manifest::<T>(cfg)?;
            let mut pairs = dataset::make_training_pairs(&manifest, cfg.dataset.train_stride)?;
            if cfg.dataset.max_pairs > 0 {
                pairs.truncate(cfg.dataset.max_pairs);
            }
            pairs
                .iter()
                .map(|p| load_sequence_pair(cfg, &manifest, p))
                .collect::<Result<_>>()?
        }
    };
    eval_pairs
        .into_iter()
        .map(|p| crate::train::TrainingPair::new(p.source, p.target, p.gt))
        .collect()
}

fn build_synth_pair<T: Real>(cfg: &RunConfig, index: usize) -> Result<EvalPair<T>> {
    let seed = derive_seed(cfg.run.seed, 0x5EED_0000 + index as u64);
    let pair = synth_scene::<T>(seed, cfg.dataset.synth_points, &cfg.dataset.synth)?;
    let source = preprocess_cloud(&pair.source, &cfg.preprocess, derive_seed(seed, 1))?;
    let target = preprocess_cloud(&pair.target, &cfg.preprocess, derive_seed(seed, 2))?;
    Ok(EvalPair {
        source_id: index * 2,
        target_id: index * 2 + 1,
        source,
        target,
        gt: pair.gt,
    })
}

fn load_manifest<T: Real>(cfg: &RunConfig) -> Result<SequenceManifest<T>> {
    let scan_dir = cfg
        .dataset
        .scan_dir
        .as_ref()
        .ok_or_else(|| Error::Config("dataset.scan_dir is required".into()))?;
    let pose_file = cfg
        .dataset
        .pose_file
        .as_ref()
        .ok_or_else(|| Error::Config("dataset.pose_file is required".into()))?;
    let calibration = match &cfg.dataset.calib_file {
        Some(path) => Some(dataset::read_calibration::<T>(path)?),
        None => None,
    };
    SequenceManifest::load(
        cfg.dataset.sequence_id.clone(),
        scan_dir,
        pose_file,
        calibration.as_ref(),
    )
}

fn load_sequence_pair<T: Real>(
    cfg: &RunConfig,
    manifest: &SequenceManifest<T>,
    pair: &FramePair<T>,
) -> Result<EvalPair<T>> {
    let load = |frame: usize| -> Result<PointCloud<T>> {
        let (cloud, _rejected) = dataset::read_scan::<T>(&manifest.scan_paths[frame])?;
        preprocess_cloud(
            &cloud,
            &cfg.preprocess,
            derive_seed(cfg.run.seed, frame as u64),
        )
    };
    Ok(EvalPair {
        source_id: pair.source,
        target_id: pair.target,
        source: load(pair.source)?,
        target: load(pair.target)?,
        gt: pair.gt,
    })
}

const CACHE_MAGIC: &[u8; 8] = b"SRPCLD\0\x01";

/// Writes a processed (feature-attached) cloud to the cache format:
/// magic, point count u32, then per point `x y z nx ny nz curvature` as
/// little-endian f32.
pub fn write_processed_cloud<T: Real>(cloud: &PointCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let normals = cloud.normals().ok_or(Error::MissingChannels)?;
    let curvatures = cloud.curvatures().ok_or(Error::MissingChannels)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        let mut w = w;
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(cloud.len() as u32).to_le_bytes())?;
        for i in 0..cloud.len() {
            let p = cloud.positions()[i];
            let n = normals[i];
            for v in [p.x, p.y, p.z, n.x, n.y, n.z, curvatures[i]] {
                w.write_all(&v.as_f32().to_le_bytes())?;
            }
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_processed_cloud<T: Real>(path: impl AsRef<Path>) -> Result<PointCloud<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 12];
    r.read_exact(&mut header).map_err(|_| Error::Parse {
        offset: 0,
        message: "truncated processed-cloud header".into(),
    })?;
    if &header[0..8] != CACHE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad processed-cloud magic".into(),
        });
    }
    let count = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let mut buf = vec![0u8; count * 28];
    r.read_exact(&mut buf).map_err(|_| Error::Parse {
        offset: 12,
        message: "truncated processed-cloud data".into(),
    })?;
    let mut positions = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    let mut curvatures = Vec::with_capacity(count);
    for rec in buf.chunks_exact(28) {
        let f = |o: usize| {
            T::cast(f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes")) as f64)
        };
        positions.push(Point3::new(f(0), f(4), f(8)));
        normals.push(Vector3::new(f(12), f(16), f(20)));
        curvatures.push(f(24));
    }
    PointCloud::with_features(positions, normals, curvatures)
}

/// One cell of the benchmark grid.
#[derive(Clone, Copy, Debug)]
pub struct BenchCell {
    pub input_points: usize,
    pub keypoints: usize,
    pub timings: StageTimings,
}

impl BenchCell {
    pub fn detect_describe_seconds(&self) -> f64 {
        self.timings.detect_describe()
    }
}

/// Times detect+describe over the input-size x keypoint-count grid on
/// synthetic scenes. Each cell reports the mean of `repeats` runs after one
/// warmup.
pub fn bench_grid<T: Real>(cfg: &RunConfig, params: &NetParams<T>) -> Result<Vec<BenchCell>> {
    let mut cells = Vec::new();
    for &n in &cfg.bench.input_sizes {
        // oversample the scene so preprocessing still leaves n points
        let synth = synth_scene::<T>(
            derive_seed(cfg.run.seed, n as u64),
            n * 2,
            &cfg.dataset.synth,
        )?;
        let pre = crate::config::PreprocessSection {
            sample_points: n,
            ..cfg.preprocess.clone()
        };
        let cloud = preprocess_cloud(&synth.source, &pre, cfg.run.seed)?;
        if cloud.len() < n {
            return Err(Error::InvalidArgument(format!(
                "bench scene only produced {} points for target {n}",
                cloud.len()
            )));
        }
        for &m in &cfg.bench.keypoint_counts {
            let det = DetectorConfig {
                candidates: m,
                ..cfg.detector.clone()
            };
            // warmup
            detect_describe_timed(&cloud, params, &det, cfg.run.seed)?;
            let repeats = cfg.bench.repeats.max(1);
            let mut acc = StageTimings::default();
            for rep in 0..repeats {
                let (_, _, t) =
                    detect_describe_timed(&cloud, params, &det, derive_seed(cfg.run.seed, rep as u64))?;
                acc.sample += t.sample;
                acc.cluster += t.cluster;
                acc.detect += t.detect;
                acc.describe += t.describe;
            }
            let scale = 1.0 / repeats as f64;
            cells.push(BenchCell {
                input_points: n,
                keypoints: m,
                timings: StageTimings {
                    sample: acc.sample * scale,
                    cluster: acc.cluster * scale,
                    detect: acc.detect * scale,
                    describe: acc.describe * scale,
                    matching: 0.0,
                    ransac: 0.0,
                },
            });
        }
    }
    Ok(cells)
}

/// Writes the benchmark grid as CSV (milliseconds).
pub fn write_bench_csv(cells: &[BenchCell], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        let mut w = w;
        writeln!(
            w,
            "input_points,keypoints,sample_ms,cluster_ms,detect_ms,describe_ms,detect_describe_ms"
        )?;
        for c in cells {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.input_points,
                c.keypoints,
                c.timings.sample * 1e3,
                c.timings.cluster * 1e3,
                c.timings.detect * 1e3,
                c.timings.describe * 1e3,
                c.detect_describe_seconds() * 1e3
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

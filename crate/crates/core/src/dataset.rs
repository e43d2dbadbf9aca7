//! Data ingestion: velodyne-style binary scans, pose files, frame-pair
//! construction and synthetic scene generation.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Reads a binary scan: little-endian f32 quadruples `(x, y, z, reflectance)`
/// per point; reflectance is discarded. Non-finite points are skipped and
/// counted in the second return value.
pub fn read_scan<T: Real>(path: impl AsRef<Path>) -> Result<(PointCloud<T>, usize)> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    parse_scan(&bytes)
}

/// Parses scan bytes (the `read_scan` contract without the file system).
pub fn parse_scan<T: Real>(bytes: &[u8]) -> Result<(PointCloud<T>, usize)> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % 16,
            message: format!(
                "scan length {} is not a multiple of 16 bytes",
                bytes.len()
            ),
        });
    }
    let mut positions = Vec::with_capacity(bytes.len() / 16);
    let mut rejected = 0usize;
    for rec in bytes.chunks_exact(16) {
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes"));
        let (x, y, z) = (f(0), f(4), f(8));
        if x.is_finite() && y.is_finite() && z.is_finite() {
            positions.push(Point3::new(
                T::cast(x as f64),
                T::cast(y as f64),
                T::cast(z as f64),
            ));
        } else {
            rejected += 1;
        }
    }
    Ok((PointCloud::new(positions)?, rejected))
}

/// Writes a cloud in the scan format (reflectance written as 0).
/// `read_scan(write_scan(c))` round-trips positions bit-exactly for f32.
pub fn write_scan<T: Real>(cloud: &PointCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        let mut w = w;
        for p in cloud.positions() {
            for v in [p.x, p.y, p.z] {
                w.write_all(&v.as_f32().to_le_bytes())?;
            }
            w.write_all(&0f32.to_le_bytes())?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

/// Parses a pose file: one pose per line, 12 whitespace-separated floats
/// forming a row-major 3x4 `[R | t]`. Rotations are re-projected onto SO(3)
/// to absorb text rounding.
pub fn read_poses<T: Real>(path: impl AsRef<Path>) -> Result<Vec<RigidTransform<T>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut poses = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        poses.push(parse_pose_line::<T>(line).map_err(|e| Error::Parse {
            offset: line_no,
            message: format!("pose line {}: {e}", line_no + 1),
        })?);
    }
    Ok(poses)
}

fn parse_pose_line<T: Real>(line: &str) -> std::result::Result<RigidTransform<T>, String> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    if values.len() != 12 {
        return Err(format!("expected 12 floats, got {}", values.len()));
    }
    let mut rot = Matrix3::zeros();
    let mut tr = Vector3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            rot[(i, j)] = T::cast(values[i * 4 + j]);
        }
        tr[i] = T::cast(values[i * 4 + 3]);
    }
    RigidTransform::project_rotation(&rot, tr).map_err(|e| e.to_string())
}

/// Parses an optional sensor calibration file: either a bare 12-float line
/// or a `Tr:`-prefixed line among other entries.
pub fn read_calibration<T: Real>(path: impl AsRef<Path>) -> Result<RigidTransform<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for line in text.lines() {
        let line = line.trim();
        let payload = match line.strip_prefix("Tr:") {
            Some(rest) => rest.trim(),
            None if line.split_whitespace().count() == 12 => line,
            None => continue,
        };
        return parse_pose_line::<T>(payload).map_err(|e| Error::Parse {
            offset: 0,
            message: format!("calibration: {e}"),
        });
    }
    Err(Error::Parse {
        offset: 0,
        message: "no calibration entry found".into(),
    })
}

/// An ordered sequence of scans with per-frame poses in a common frame.
#[derive(Clone, Debug)]
pub struct SequenceManifest<T: Real> {
    pub sequence_id: String,
    pub scan_paths: Vec<PathBuf>,
    pub poses: Vec<RigidTransform<T>>,
}

impl<T: Real> SequenceManifest<T> {
    /// Loads a manifest from a directory of `.bin` scans (sorted by name)
    /// and a pose file. An optional calibration transform `tr` re-expresses
    /// poses in the sensor frame: `pose' = tr^-1 * pose * tr`.
    pub fn load(
        sequence_id: impl Into<String>,
        scan_dir: impl AsRef<Path>,
        pose_file: impl AsRef<Path>,
        calibration: Option<&RigidTransform<T>>,
    ) -> Result<Self> {
        let scan_dir = scan_dir.as_ref();
        let mut scan_paths: Vec<PathBuf> = std::fs::read_dir(scan_dir)
            .map_err(|e| Error::io(scan_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
            .collect();
        scan_paths.sort();
        let mut poses = read_poses::<T>(pose_file)?;
        if let Some(tr) = calibration {
            let tr_inv = tr.inverse();
            for pose in &mut poses {
                *pose = tr_inv.compose(pose).compose(tr);
            }
        }
        let manifest = SequenceManifest {
            sequence_id: sequence_id.into(),
            scan_paths,
            poses,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses.len() != self.scan_paths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} poses for {} scans",
                self.poses.len(),
                self.scan_paths.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scan_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scan_paths.is_empty()
    }

    /// Relative ground-truth transform (target <- source).
    pub fn relative_transform(&self, source: usize, target: usize) -> RigidTransform<T> {
        self.poses[target].inverse().compose(&self.poses[source])
    }
}

/// A source/target frame pair with its relative ground truth.
#[derive(Clone, Debug)]
pub struct FramePair<T: Real> {
    pub source: usize,
    pub target: usize,
    pub gt: RigidTransform<T>,
}

/// Training pairs `(i, i + stride)`.
pub fn make_training_pairs<T: Real>(
    manifest: &SequenceManifest<T>,
    stride: usize,
) -> Result<Vec<FramePair<T>>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let n = manifest.len();
    let mut pairs = Vec::new();
    for i in 0..n.saturating_sub(stride) {
        pairs.push(FramePair {
            source: i,
            target: i + stride,
            gt: manifest.relative_transform(i, i + stride),
        });
    }
    Ok(pairs)
}

/// Test pairs: each frame with the `window` frames around it, deduplicated
/// to unordered pairs `(i, j)` with `i < j`.
pub fn make_test_pairs<T: Real>(
    manifest: &SequenceManifest<T>,
    window: usize,
) -> Vec<FramePair<T>> {
    let n = manifest.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..(i + window + 1).min(n) {
            pairs.push(FramePair {
                source: i,
                target: j,
                gt: manifest.relative_transform(i, j),
            });
        }
    }
    pairs
}

/// Synthetic scene family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// ground plane, walls and boxes (structured geometry with corners)
    Structured,
    /// uniform noise in a cube
    Uniform,
}

/// Synthetic pair generation knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub kind: SceneKind,
    /// per-coordinate Gaussian jitter (meters)
    pub jitter: f64,
    /// shared fraction of the scene visible in both views, in (0, 1]
    pub overlap: f64,
    /// rotation magnitude bound (degrees)
    pub max_rotation_deg: f64,
    /// translation magnitude bound (meters)
    pub max_translation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SceneKind::Structured,
            jitter: 0.01,
            overlap: 0.8,
            max_rotation_deg: 30.0,
            max_translation: 5.0,
        }
    }
}

/// A generated scan pair; `gt` maps source-frame points into the target
/// frame.
pub struct SynthPair<T: Real> {
    pub source: PointCloud<T>,
    pub target: PointCloud<T>,
    pub gt: RigidTransform<T>,
}

/// A rectangle patch: origin plus two edge vectors.
struct Patch {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    area: f64,
}

fn structured_patches(rng: &mut ChaCha8Rng) -> Vec<Patch> {
    let mut patches = Vec::new();
    let mut push = |origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>| {
        let area = u.cross(&v).norm();
        patches.push(Patch { origin, u, v, area });
    };
    // ground plane
    push(
        Vector3::new(-15.0, -15.0, 0.0),
        Vector3::new(30.0, 0.0, 0.0),
        Vector3::new(0.0, 30.0, 0.0),
    );
    // a few walls
    for _ in 0..3 {
        let x = rng.gen_range(-12.0..12.0);
        let y = rng.gen_range(-12.0..12.0);
        let len = rng.gen_range(4.0..10.0);
        let height = rng.gen_range(2.0..4.0);
        let along = if rng.gen_bool(0.5) {
            Vector3::new(len, 0.0, 0.0)
        } else {
            Vector3::new(0.0, len, 0.0)
        };
        push(
            Vector3::new(x, y, 0.0),
            along,
            Vector3::new(0.0, 0.0, height),
        );
    }
    // boxes: four side faces and a top each
    for _ in 0..5 {
        let cx = rng.gen_range(-10.0..10.0);
        let cy = rng.gen_range(-10.0..10.0);
        let sx = rng.gen_range(1.0..3.0);
        let sy = rng.gen_range(1.0..3.0);
        let sz = rng.gen_range(1.0..3.0);
        let base = Vector3::new(cx - sx / 2.0, cy - sy / 2.0, 0.0);
        let ex = Vector3::new(sx, 0.0, 0.0);
        let ey = Vector3::new(0.0, sy, 0.0);
        let ez = Vector3::new(0.0, 0.0, sz);
        push(base, ex, ez);
        push(base + ey, ex, ez);
        push(base, ey, ez);
        push(base + ex, ey, ez);
        push(base + ez, ex, ey);
    }
    patches
}

fn sample_patch_point(patches: &[Patch], total_area: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let mut pick = rng.gen_range(0.0..total_area);
    for patch in patches {
        if pick <= patch.area {
            let a = rng.gen_range(0.0..1.0);
            let b = rng.gen_range(0.0..1.0);
            return patch.origin + patch.u * a + patch.v * b;
        }
        pick -= patch.area;
    }
    let last = patches.last().expect("nonempty patches");
    last.origin + last.u * 0.5 + last.v * 0.5
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates a synthetic scan pair with a known relative transform.
///
/// Both views are independently resampled from the same scene surface; the
/// target view is expressed in a frame rotated/translated by the returned
/// transform. `overlap < 1` crops both views along a random direction so
/// only that fraction of the scene is shared.
pub fn synth_scene<T: Real>(seed: u64, n_points: usize, cfg: &SynthConfig) -> Result<SynthPair<T>> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be >= 1".into()));
    }
    if !(0.0 < cfg.overlap && cfg.overlap <= 1.0) {
        return Err(Error::InvalidArgument("overlap must be in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // scene-frame sampler
    let patches = match cfg.kind {
        SceneKind::Structured => structured_patches(&mut rng),
        SceneKind::Uniform => Vec::new(),
    };
    let total_area: f64 = patches.iter().map(|p| p.area).sum();
    let sample_scene = |rng: &mut ChaCha8Rng| -> Vector3<f64> {
        match cfg.kind {
            SceneKind::Structured => sample_patch_point(&patches, total_area, rng),
            SceneKind::Uniform => Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ),
        }
    };

    // ground-truth transform: rotation <= max_rotation_deg, translation <= max_translation
    let axis = loop {
        let v = Vector3::new(
            rng.gen_range(-1.0f64..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if v.norm() > 1e-3 {
            break v.normalize();
        }
    };
    let angle = rng.gen_range(0.0..cfg.max_rotation_deg.to_radians());
    let dir = loop {
        let v = Vector3::new(
            rng.gen_range(-1.0f64..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if v.norm() > 1e-3 {
            break v.normalize();
        }
    };
    let translation = dir * rng.gen_range(0.0..cfg.max_translation);
    let gt64 = RigidTransform::<f64>::from_axis_angle(&axis, angle, translation);

    // overlap crop: each view keeps a slab along a random horizontal direction
    let crop_dir = {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        Vector3::new(theta.cos(), theta.sin(), 0.0)
    };
    let (lo, hi) = {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..512 {
            let s = sample_scene(&mut rng).dot(&crop_dir);
            lo = lo.min(s);
            hi = hi.max(s);
        }
        (lo, hi)
    };
    let keep_frac = (1.0 + cfg.overlap) / 2.0;
    let source_max = lo + keep_frac * (hi - lo);
    let target_min = hi - keep_frac * (hi - lo);

    let draw_view = |rng: &mut ChaCha8Rng,
                         keep: &dyn Fn(f64) -> bool,
                         to_target_frame: bool|
     -> Vec<Point3<T>> {
        let mut out = Vec::with_capacity(n_points);
        let mut guard = 0usize;
        while out.len() < n_points {
            guard += 1;
            if guard > n_points * 1000 {
                break;
            }
            let p = sample_scene(rng);
            if !keep(p.dot(&crop_dir)) {
                continue;
            }
            let mut p = p;
            if to_target_frame {
                p = gt64.rotation() * p + gt64.translation();
            }
            if cfg.jitter > 0.0 {
                p += Vector3::new(
                    gaussian(rng) * cfg.jitter,
                    gaussian(rng) * cfg.jitter,
                    gaussian(rng) * cfg.jitter,
                );
            }
            out.push(Point3::new(
                T::cast(p.x),
                T::cast(p.y),
                T::cast(p.z),
            ));
        }
        out
    };

    let source = draw_view(&mut rng, &|s| s <= source_max, false);
    let target = draw_view(&mut rng, &|s| s >= target_min, true);

    let rot = gt64.rotation();
    let mut rot_t = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            rot_t[(i, j)] = T::cast(rot[(i, j)]);
        }
    }
    let tr = gt64.translation();
    let gt = RigidTransform::new(
        rot_t,
        Vector3::new(
            T::cast(tr.x),
            T::cast(tr.y),
            T::cast(tr.z),
        ),
    )?;
    Ok(SynthPair {
        source: PointCloud::new(source)?,
        target: PointCloud::new(target)?,
        gt,
    })
}

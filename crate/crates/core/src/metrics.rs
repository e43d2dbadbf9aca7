//! Evaluation metrics: repeatability, precision and registration
//! performance, plus the corpus evaluation driver and its report files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform};
use crate::descriptor::{describe, DescriptorSet};
use crate::detector::{detect, select_keypoints, DetectorConfig, KeypointSet};
use crate::error::{Error, Result};
use crate::nn::NetParams;
use crate::register::{match_descriptors, mutual_filter, ransac_register, RansacConfig};
use crate::scalar::{derive_seed, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// repeatability distance threshold (meters)
    pub eps_r: f64,
    /// precision distance threshold (meters)
    pub eps_p: f64,
    /// success rule: RTE bound (meters)
    pub rte_max: f64,
    /// success rule: RRE bound (degrees)
    pub rre_max: f64,
    /// keypoint counts swept for repeatability/precision
    pub keypoint_counts: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eps_r: 0.5,
            eps_p: 1.0,
            rte_max: 2.0,
            rre_max: 5.0,
            keypoint_counts: vec![128, 256, 512],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_r <= 0.0 || self.eps_p <= 0.0 || self.rte_max <= 0.0 || self.rre_max <= 0.0 {
            return Err(Error::Config("evaluation thresholds must be positive".into()));
        }
        if self.keypoint_counts.is_empty() {
            return Err(Error::Config("keypoint_counts must not be empty".into()));
        }
        Ok(())
    }
}

/// Fraction of source keypoints whose nearest target keypoint, after the
/// ground-truth alignment, lies within `eps_r`.
pub fn repeatability<T: Real>(
    src: &[Point3<T>],
    dst: &[Point3<T>],
    gt: &RigidTransform<T>,
    eps_r: f64,
) -> f64 {
    if src.is_empty() || dst.is_empty() {
        return 0.0;
    }
    let eps = T::cast(eps_r);
    let mut hits = 0usize;
    for p in src {
        let moved = gt.transform_point(p);
        let mut best = T::cast(f64::INFINITY);
        for q in dst {
            let d = (moved - q).norm();
            if d < best {
                best = d;
            }
        }
        if best < eps {
            hits += 1;
        }
    }
    hits as f64 / src.len() as f64
}

/// Fraction of descriptor-NN correspondences that land within `eps_p` of
/// the ground-truth location of the source keypoint.
pub fn precision<T: Real>(
    src_kp: &[Point3<T>],
    src_desc: &DescriptorSet<T>,
    dst_kp: &[Point3<T>],
    dst_desc: &DescriptorSet<T>,
    gt: &RigidTransform<T>,
    eps_p: f64,
) -> Result<f64> {
    if src_kp.len() != src_desc.len() || dst_kp.len() != dst_desc.len() {
        return Err(Error::Shape("keypoints not aligned with descriptors".into()));
    }
    if src_kp.is_empty() || dst_kp.is_empty() {
        return Ok(0.0);
    }
    let eps = T::cast(eps_p);
    let pairs = match_descriptors(src_desc, dst_desc)?;
    let mut valid = 0usize;
    for (i, j) in pairs {
        let expected = gt.transform_point(&src_kp[i]);
        if (dst_kp[j] - expected).norm() < eps {
            valid += 1;
        }
    }
    Ok(valid as f64 / src_kp.len() as f64)
}

/// Relative translation error (meters) and relative rotation error
/// (degrees, trace formula with clamped argument).
pub fn registration_errors<T: Real>(est: &RigidTransform<T>, gt: &RigidTransform<T>) -> (f64, f64) {
    let rte = (est.translation() - gt.translation()).norm().as_f64();
    let m = gt.rotation().transpose() * est.rotation();
    let trace = (m[(0, 0)] + m[(1, 1)] + m[(2, 2)]).as_f64();
    let arg = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let rre = arg.acos().to_degrees();
    (rte, rre)
}

/// Wall-clock seconds per pipeline stage.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub sample: f64,
    pub cluster: f64,
    pub detect: f64,
    pub describe: f64,
    pub matching: f64,
    pub ransac: f64,
}

impl StageTimings {
    pub fn detect_describe(&self) -> f64 {
        self.sample + self.cluster + self.detect + self.describe
    }
}

/// One evaluated frame pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub source_id: usize,
    pub target_id: usize,
    /// repeatability per swept keypoint count, config order
    pub repeatability: Vec<f64>,
    /// precision per swept keypoint count, config order
    pub precision: Vec<f64>,
    pub rte: f64,
    pub rre: f64,
    pub success: bool,
    pub inlier_ratio: f64,
    pub iterations: u64,
    pub rmse: f64,
    pub timings: StageTimings,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> MeanStd {
    let n = values.clone().count();
    if n == 0 {
        return MeanStd::default();
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Aggregated corpus metrics. `report_version` tracks the schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub report_version: u32,
    pub keypoint_counts: Vec<usize>,
    pub pair_count: usize,
    pub skipped_pairs: usize,
    pub repeatability: Vec<MeanStd>,
    pub precision: Vec<MeanStd>,
    pub rte: MeanStd,
    pub rre: MeanStd,
    pub success_rate: f64,
    pub inlier_ratio: MeanStd,
    pub iterations: MeanStd,
    pub timings: StageTimings,
    #[serde(skip)]
    pub pairs: Vec<PairRecord>,
}

pub const REPORT_VERSION: u32 = 1;

/// Everything needed to run detection, description and registration on a
/// prepared pair.
pub struct EvalRun<'p, T: Real> {
    pub params: &'p NetParams<T>,
    pub detector: DetectorConfig,
    pub ransac: RansacConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    /// zero out wall-clock fields for byte-identical reports
    pub deterministic: bool,
}

/// A preprocessed evaluation pair: feature-attached clouds plus the
/// ground-truth transform (target <- source).
pub struct EvalPair<T: Real> {
    pub source_id: usize,
    pub target_id: usize,
    pub source: PointCloud<T>,
    pub target: PointCloud<T>,
    pub gt: RigidTransform<T>,
}

struct DetectedSide<T: Real> {
    keypoints: KeypointSet<T>,
    descriptors: DescriptorSet<T>,
}

fn run_side<T: Real>(
    cloud: &PointCloud<T>,
    run: &EvalRun<'_, T>,
    seed: u64,
    timings: &mut StageTimings,
) -> Result<DetectedSide<T>> {
    // sample + cluster + detect timings are folded into detect() internally;
    // time the whole call as the detect stage and description separately.
    let t0 = Instant::now();
    let keypoints = detect(cloud, run.params, &run.detector, seed)?;
    timings.detect += t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let descriptors = describe(&keypoints.clusters, &keypoints.feature_maps, run.params)?;
    timings.describe += t1.elapsed().as_secs_f64();
    Ok(DetectedSide {
        keypoints,
        descriptors,
    })
}

fn select_with_descriptors<T: Real>(
    side: &DetectedSide<T>,
    m: usize,
) -> Result<(KeypointSet<T>, DescriptorSet<T>)> {
    let m = m.min(side.keypoints.len());
    let mut order: Vec<usize> = (0..side.keypoints.len()).collect();
    order.sort_by(|&a, &b| {
        side.keypoints.saliencies[a]
            .partial_cmp(&side.keypoints.saliencies[b])
            .expect("finite saliencies")
            .then(a.cmp(&b))
    });
    order.truncate(m);
    let selected = select_keypoints(&side.keypoints, m)?;
    let mut descriptors = crate::nn::tensor::Tensor2::zeros(m, side.descriptors.dim());
    for (r, &i) in order.iter().enumerate() {
        descriptors
            .row_mut(r)
            .copy_from_slice(side.descriptors.descriptor(i));
    }
    Ok((selected, DescriptorSet { descriptors }))
}

/// Evaluates one prepared pair.
pub fn evaluate_pair<T: Real>(pair: &EvalPair<T>, run: &EvalRun<'_, T>) -> Result<PairRecord> {
    let mut timings = StageTimings::default();
    let seed_s = derive_seed(run.seed, pair.source_id as u64 * 2 + 1);
    let seed_t = derive_seed(run.seed, pair.target_id as u64 * 2);
    let src = run_side(&pair.source, run, seed_s, &mut timings)?;
    let tgt = run_side(&pair.target, run, seed_t, &mut timings)?;

    let mut rep = Vec::with_capacity(run.eval.keypoint_counts.len());
    let mut prec = Vec::with_capacity(run.eval.keypoint_counts.len());
    for &m in &run.eval.keypoint_counts {
        let (src_sel, src_desc) = select_with_descriptors(&src, m)?;
        let (tgt_sel, tgt_desc) = select_with_descriptors(&tgt, m)?;
        rep.push(repeatability(
            &src_sel.keypoints,
            &tgt_sel.keypoints,
            &pair.gt,
            run.eval.eps_r,
        ));
        prec.push(precision(
            &src_sel.keypoints,
            &src_desc,
            &tgt_sel.keypoints,
            &tgt_desc,
            &pair.gt,
            run.eval.eps_p,
        )?);
    }

    // registration at the largest swept count
    let m_reg = *run
        .eval
        .keypoint_counts
        .iter()
        .max()
        .expect("validated nonempty");
    let (src_sel, src_desc) = select_with_descriptors(&src, m_reg)?;
    let (tgt_sel, tgt_desc) = select_with_descriptors(&tgt, m_reg)?;
    let t0 = Instant::now();
    let pairs = match_descriptors(&src_desc, &tgt_desc)?;
    let pairs = if run.ransac.mutual_filter {
        mutual_filter(&pairs, &src_desc, &tgt_desc)?
    } else {
        pairs
    };
    timings.matching += t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let ransac_cfg = RansacConfig {
        seed: derive_seed(run.seed, (pair.source_id as u64) << 32 | pair.target_id as u64),
        ..run.ransac
    };
    let reg = if pairs.len() >= 3 {
        ransac_register(&pairs, &src_sel.keypoints, &tgt_sel.keypoints, &ransac_cfg)?
    } else {
        // not enough correspondences: flagged failure, not a crash
        crate::register::RegistrationResult {
            transform: RigidTransform::identity(),
            inlier_mask: vec![],
            inlier_ratio: 0.0,
            iterations: 0,
            rmse: 0.0,
            success: false,
        }
    };
    timings.ransac += t1.elapsed().as_secs_f64();

    let (rte, rre) = registration_errors(&reg.transform, &pair.gt);
    let success = reg.success && rte < run.eval.rte_max && rre < run.eval.rre_max;
    if run.deterministic {
        timings = StageTimings::default();
    }
    Ok(PairRecord {
        source_id: pair.source_id,
        target_id: pair.target_id,
        repeatability: rep,
        precision: prec,
        rte,
        rre,
        success,
        inlier_ratio: reg.inlier_ratio,
        iterations: reg.iterations,
        rmse: reg.rmse,
        timings,
    })
}

/// Runs the full evaluation protocol over a corpus. Pair sources that failed
/// to load arrive as `Err` and are skipped but counted.
pub fn evaluate_corpus<T: Real>(
    pairs: Vec<Result<EvalPair<T>>>,
    run: &EvalRun<'_, T>,
) -> Result<MetricsReport> {
    run.eval.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation corpus".into()));
    }
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for pair in pairs {
        match pair {
            Ok(p) => records.push(evaluate_pair(&p, run)?),
            Err(e) => {
                eprintln!("skipping unreadable pair: {e}");
                skipped += 1;
            }
        }
    }
    Ok(summarize(records, skipped, &run.eval))
}

fn summarize(records: Vec<PairRecord>, skipped: usize, eval: &EvalConfig) -> MetricsReport {
    let n_counts = eval.keypoint_counts.len();
    let rep: Vec<MeanStd> = (0..n_counts)
        .map(|c| mean_std(records.iter().map(move |r| r.repeatability[c])))
        .collect();
    let prec: Vec<MeanStd> = (0..n_counts)
        .map(|c| mean_std(records.iter().map(move |r| r.precision[c])))
        .collect();
    let successes = records.iter().filter(|r| r.success).count();
    let mut timings = StageTimings::default();
    for r in &records {
        timings.sample += r.timings.sample;
        timings.cluster += r.timings.cluster;
        timings.detect += r.timings.detect;
        timings.describe += r.timings.describe;
        timings.matching += r.timings.matching;
        timings.ransac += r.timings.ransac;
    }
    MetricsReport {
        report_version: REPORT_VERSION,
        keypoint_counts: eval.keypoint_counts.clone(),
        pair_count: records.len(),
        skipped_pairs: skipped,
        repeatability: rep,
        precision: prec,
        rte: mean_std(records.iter().map(|r| r.rte)),
        rre: mean_std(records.iter().map(|r| r.rre)),
        success_rate: if records.is_empty() {
            0.0
        } else {
            successes as f64 / records.len() as f64
        },
        inlier_ratio: mean_std(records.iter().map(|r| r.inlier_ratio)),
        iterations: mean_std(records.iter().map(|r| r.iterations as f64)),
        timings,
        pairs: records,
    }
}

/// Writes the aggregate report as pretty JSON.
pub fn write_report_json(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Writes one CSV row per pair. Column order: ids, repeatability and
/// precision per swept count (ascending config order), then registration
/// metrics and stage timings.
pub fn write_pairs_csv(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        let mut w = w;
        write!(w, "source,target")?;
        for m in &report.keypoint_counts {
            write!(w, ",repeatability_{m}")?;
        }
        for m in &report.keypoint_counts {
            write!(w, ",precision_{m}")?;
        }
        writeln!(
            w,
            ",rte,rre,success,inlier_ratio,iterations,rmse,t_sample,t_cluster,t_detect,t_describe,t_match,t_ransac"
        )?;
        for r in &report.pairs {
            write!(w, "{},{}", r.source_id, r.target_id)?;
            for v in &r.repeatability {
                write!(w, ",{v}")?;
            }
            for v in &r.precision {
                write!(w, ",{v}")?;
            }
            writeln!(
                w,
                ",{},{},{},{},{},{},{},{},{},{},{},{}",
                r.rte,
                r.rre,
                r.success,
                r.inlier_ratio,
                r.iterations,
                r.rmse,
                r.timings.sample,
                r.timings.cluster,
                r.timings.detect,
                r.timings.describe,
                r.timings.matching,
                r.timings.ransac
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_points(n: usize, seed: u64, scale: f64) -> Vec<Point3<f64>> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                )
            })
            .collect()
    }

    #[test]
    fn repeatability_trivial_cases() {
        let gt = RigidTransform::from_axis_angle(
            &Vector3::z(),
            0.5,
            Vector3::new(1.0, 2.0, 3.0),
        );
        let src = random_points(20, 1, 5.0);
        let dst: Vec<Point3<f64>> = src.iter().map(|p| gt.transform_point(p)).collect();
        assert_eq!(repeatability(&src, &dst, &gt, 0.5), 1.0);

        // displace every target far beyond the threshold
        let far: Vec<Point3<f64>> = dst
            .iter()
            .map(|p| Point3::new(p.x + 100.0, p.y, p.z))
            .collect();
        assert_eq!(repeatability(&src, &far, &gt, 0.5), 0.0);
    }

    #[test]
    fn repeatability_matches_brute_force_oracle() {
        let gt = RigidTransform::from_axis_angle(
            &Vector3::new(0.1, 0.8, 0.2),
            0.7,
            Vector3::new(-1.0, 0.5, 2.0),
        );
        let src = random_points(10, 2, 3.0);
        let dst = random_points(10, 3, 3.0);
        let eps = 1.5;
        let got = repeatability(&src, &dst, &gt, eps);
        // independent double loop
        let mut hits = 0;
        for p in &src {
            let moved = gt.transform_point(p);
            let min = dst
                .iter()
                .map(|q| (moved - q).norm())
                .fold(f64::INFINITY, f64::min);
            if min < eps {
                hits += 1;
            }
        }
        assert_eq!(got, hits as f64 / 10.0);
    }

    #[test]
    fn repeatability_monotone_in_threshold() {
        let gt = RigidTransform::identity();
        let src = random_points(15, 4, 3.0);
        let dst = random_points(15, 5, 3.0);
        let mut prev = 0.0;
        for eps in [0.1, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let r = repeatability(&src, &dst, &gt, eps);
            assert!(r >= prev);
            assert!((0.0..=1.0).contains(&r));
            prev = r;
        }
    }

    fn desc(rows: Vec<Vec<f64>>) -> DescriptorSet<f64> {
        DescriptorSet {
            descriptors: crate::nn::tensor::Tensor2::from_rows(&rows).unwrap(),
        }
    }

    #[test]
    fn precision_engineered_cases() {
        let gt = RigidTransform::from_axis_angle(&Vector3::z(), 0.2, Vector3::new(1.0, 0.0, 0.0));
        let src = random_points(4, 6, 3.0);
        let dst: Vec<Point3<f64>> = src.iter().map(|p| gt.transform_point(p)).collect();
        // descriptors that point each source at its true match
        let one_hot = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let d_src = desc((0..4).map(one_hot).collect());
        let d_dst = desc((0..4).map(one_hot).collect());
        let p = precision(&src, &d_src, &dst, &d_dst, &gt, 1.0).unwrap();
        assert_eq!(p, 1.0);

        // adversarial: everyone matches the farthest keypoint
        let spread: Vec<Point3<f64>> = (0..4)
            .map(|i| Point3::new(i as f64 * 50.0, 0.0, 0.0))
            .collect();
        let spread_dst: Vec<Point3<f64>> =
            spread.iter().map(|p| gt.transform_point(p)).collect();
        let d_src = desc((0..4).map(|i| one_hot(3 - i)).collect());
        let d_dst = desc((0..4).map(one_hot).collect());
        let p = precision(&spread, &d_src, &spread_dst, &d_dst, &gt, 1.0).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn precision_matches_double_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let gt = RigidTransform::from_axis_angle(
            &Vector3::new(0.3, 0.3, 1.0),
            0.4,
            Vector3::new(0.5, -0.5, 1.0),
        );
        let src = random_points(10, 8, 4.0);
        let dst = random_points(10, 9, 4.0);
        let d_src = desc(
            (0..10)
                .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        );
        let d_dst = desc(
            (0..10)
                .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        );
        let eps = 2.0;
        let got = precision(&src, &d_src, &dst, &d_dst, &gt, eps).unwrap();

        let mut valid = 0;
        for i in 0..10 {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..10 {
                let d: f64 = d_src
                    .descriptor(i)
                    .iter()
                    .zip(d_dst.descriptor(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if (dst[best] - gt.transform_point(&src[i])).norm() < eps {
                valid += 1;
            }
        }
        assert_eq!(got, valid as f64 / 10.0);
    }

    #[test]
    fn registration_error_cases() {
        let gt = RigidTransform::from_axis_angle(
            &Vector3::new(0.2, 0.4, 0.9),
            0.6,
            Vector3::new(1.0, -2.0, 0.5),
        );
        let (rte, rre) = registration_errors(&gt, &gt);
        assert!(rte < 1e-12);
        assert!(rre < 1e-5);

        // 5 degrees about z on top of gt, same translation
        let five = RigidTransform::from_axis_angle(
            &Vector3::z(),
            5.0f64.to_radians(),
            Vector3::zeros(),
        );
        let est = RigidTransform::new(
            five.rotation() * gt.rotation(),
            *gt.translation(),
        )
        .unwrap();
        let (rte, rre) = registration_errors(&est, &gt);
        assert!(rte < 1e-12);
        assert!((rre - 5.0).abs() < 1e-6);

        // success rule boundary: RTE = 2.1 m fails the default rule
        let shifted = RigidTransform::new(
            *gt.rotation(),
            gt.translation() + Vector3::new(2.1, 0.0, 0.0),
        )
        .unwrap();
        let (rte, rre) = registration_errors(&shifted, &gt);
        let cfg = EvalConfig::default();
        assert!(!(rte < cfg.rte_max && rre < cfg.rre_max));
    }

    #[test]
    fn rre_is_symmetric() {
        let a = RigidTransform::from_axis_angle(
            &Vector3::new(0.5, 0.1, 0.3),
            0.8,
            Vector3::zeros(),
        );
        let b = RigidTransform::from_axis_angle(
            &Vector3::new(-0.2, 0.9, 0.1),
            0.3,
            Vector3::zeros(),
        );
        let (_, ab) = registration_errors(&a, &b);
        let (_, ba) = registration_errors(&b, &a);
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn mean_std_aggregation() {
        let ms = mean_std([1.0, 2.0, 3.0, 4.0].into_iter());
        assert!((ms.mean - 2.5).abs() < 1e-12);
        assert!((ms.std - (1.25f64).sqrt()).abs() < 1e-12);
    }
}

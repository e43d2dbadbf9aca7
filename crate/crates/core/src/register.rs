//! Descriptor-based correspondence search and RANSAC rigid-transform
//! estimation with a 99%-confidence adaptive iteration count.

use nalgebra::Point3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{kabsch_align, RigidTransform};
use crate::descriptor::DescriptorSet;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub confidence: f64,
    pub max_iterations: u64,
    /// residual bound (meters) for a correspondence to count as an inlier
    pub inlier_threshold: f64,
    pub seed: u64,
    /// keep only mutual nearest-neighbor matches before RANSAC
    pub mutual_filter: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            confidence: 0.99,
            max_iterations: 10_000,
            inlier_threshold: 1.0,
            seed: 0,
            mutual_filter: false,
        }
    }
}

/// minimal sample for a rigid transform
const SAMPLE_SIZE: usize = 3;

#[derive(Clone, Debug)]
pub struct RegistrationResult<T: Real> {
    pub transform: RigidTransform<T>,
    pub inlier_mask: Vec<bool>,
    pub inlier_ratio: f64,
    pub iterations: u64,
    /// RMSE over the inliers of the final model (0 when failed)
    pub rmse: f64,
    pub success: bool,
}

impl<T: Real> RegistrationResult<T> {
    fn failed(n_corr: usize) -> Self {
        RegistrationResult {
            transform: RigidTransform::identity(),
            inlier_mask: vec![false; n_corr],
            inlier_ratio: 0.0,
            iterations: 0,
            rmse: 0.0,
            success: false,
        }
    }

    /// JSON result record: row-major rotation, translation, diagnostics.
    pub fn to_json(&self) -> serde_json::Value {
        let r = self.transform.rotation();
        let t = self.transform.translation();
        let rotation: Vec<f64> = (0..3)
            .flat_map(|i| (0..3).map(move |j| r[(i, j)].as_f64()))
            .collect();
        serde_json::json!({
            "rotation": rotation,
            "translation": [t.x.as_f64(), t.y.as_f64(), t.z.as_f64()],
            "inlier_ratio": self.inlier_ratio,
            "iterations": self.iterations,
            "rmse": self.rmse,
            "success": self.success,
        })
    }
}

/// For each source descriptor, the index of the Euclidean-nearest target
/// descriptor; ties break toward the lower index.
pub fn match_descriptors<T: Real>(
    source: &DescriptorSet<T>,
    target: &DescriptorSet<T>,
) -> Result<Vec<(usize, usize)>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument("empty descriptor set".into()));
    }
    if source.dim() != target.dim() {
        return Err(Error::Shape("descriptor dimensions differ".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let q = source.descriptor(i);
            let mut best = 0usize;
            let mut best_d = T::cast(f64::INFINITY);
            for j in 0..target.len() {
                let mut d = T::zero();
                for (a, b) in q.iter().zip(target.descriptor(j)) {
                    let diff = *a - *b;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            (i, best)
        })
        .collect();
    Ok(pairs)
}

/// Keeps only pairs where source and target pick each other.
pub fn mutual_filter<T: Real>(
    pairs: &[(usize, usize)],
    source: &DescriptorSet<T>,
    target: &DescriptorSet<T>,
) -> Result<Vec<(usize, usize)>> {
    let reverse = match_descriptors(target, source)?;
    Ok(pairs
        .iter()
        .copied()
        .filter(|&(i, j)| reverse[j].1 == i)
        .collect())
}

/// Iterations needed to hit `confidence` of drawing one all-inlier sample at
/// inlier fraction `w`: `ceil(ln(1 - confidence) / ln(1 - w^s))`.
pub fn required_iterations(confidence: f64, inlier_fraction: f64, sample_size: u32) -> u64 {
    if inlier_fraction <= 0.0 {
        return u64::MAX;
    }
    if inlier_fraction >= 1.0 {
        return 1;
    }
    let p_good = inlier_fraction.powi(sample_size as i32);
    let denom = (-p_good).ln_1p();
    if denom == 0.0 {
        return u64::MAX;
    }
    let n = ((1.0 - confidence).ln() / denom).ceil();
    if n < 1.0 {
        1
    } else if n >= u64::MAX as f64 {
        u64::MAX
    } else {
        n as u64
    }
}

/// RANSAC rigid registration over correspondences. Degenerate (collinear)
/// minimal samples are resampled without consuming iteration budget; the
/// best model is re-estimated over all of its inliers at the end.
pub fn ransac_register<T: Real>(
    correspondences: &[(usize, usize)],
    source_keypoints: &[Point3<T>],
    target_keypoints: &[Point3<T>],
    cfg: &RansacConfig,
) -> Result<RegistrationResult<T>> {
    let n = correspondences.len();
    if n < SAMPLE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "need at least {SAMPLE_SIZE} correspondences, got {n}"
        )));
    }
    if !(0.0 < cfg.confidence && cfg.confidence < 1.0) {
        return Err(Error::Config("confidence must be in (0, 1)".into()));
    }
    let threshold = T::cast(cfg.inlier_threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let count_inliers = |t: &RigidTransform<T>, mask: &mut [bool]| -> usize {
        let mut count = 0;
        for (slot, &(i, j)) in mask.iter_mut().zip(correspondences) {
            let moved = t.transform_point(&source_keypoints[i]);
            let ok = (moved - target_keypoints[j]).norm() < threshold;
            *slot = ok;
            count += ok as usize;
        }
        count
    };

    let mut best_inliers = 0usize;
    let mut best_transform: Option<RigidTransform<T>> = None;
    let mut mask = vec![false; n];
    let mut required = cfg.max_iterations;
    let mut iterations = 0u64;
    // degenerate draws do not count toward the budget, but cap total work
    let mut degenerate_streak = 0u32;
    const MAX_DEGENERATE_STREAK: u32 = 1000;

    while iterations < required.min(cfg.max_iterations) {
        let mut pick = [0usize; SAMPLE_SIZE];
        for s in 0..SAMPLE_SIZE {
            loop {
                let cand = rng.gen_range(0..n);
                if !pick[..s].contains(&cand) {
                    pick[s] = cand;
                    break;
                }
            }
        }
        let src: Vec<Point3<T>> = pick
            .iter()
            .map(|&c| source_keypoints[correspondences[c].0])
            .collect();
        let dst: Vec<Point3<T>> = pick
            .iter()
            .map(|&c| target_keypoints[correspondences[c].1])
            .collect();
        let model = match kabsch_align(&src, &dst) {
            Ok(m) => {
                degenerate_streak = 0;
                m
            }
            Err(Error::AlignmentDegenerate(_)) => {
                degenerate_streak += 1;
                if degenerate_streak >= MAX_DEGENERATE_STREAK {
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        iterations += 1;

        let inliers = count_inliers(&model, &mut mask);
        if inliers > best_inliers {
            best_inliers = inliers;
            best_transform = Some(model);
            let w = inliers as f64 / n as f64;
            required = required_iterations(cfg.confidence, w, SAMPLE_SIZE as u32);
        }
    }

    let Some(best) = best_transform else {
        return Ok(RegistrationResult::failed(n));
    };
    if best_inliers < SAMPLE_SIZE {
        let mut failed = RegistrationResult::failed(n);
        failed.iterations = iterations;
        return Ok(failed);
    }

    // re-estimate over all inliers of the best model
    count_inliers(&best, &mut mask);
    let src: Vec<Point3<T>> = mask
        .iter()
        .zip(correspondences)
        .filter(|(ok, _)| **ok)
        .map(|(_, &(i, _))| source_keypoints[i])
        .collect();
    let dst: Vec<Point3<T>> = mask
        .iter()
        .zip(correspondences)
        .filter(|(ok, _)| **ok)
        .map(|(_, &(_, j))| target_keypoints[j])
        .collect();
    let refined = kabsch_align(&src, &dst).unwrap_or(best);
    let final_inliers = count_inliers(&refined, &mut mask);
    let (transform, inlier_count) = if final_inliers >= best_inliers {
        (refined, final_inliers)
    } else {
        // refinement degraded the consensus; keep the sampled model
        (best, count_inliers(&best, &mut mask))
    };

    let mut sq_sum = 0.0f64;
    for (ok, &(i, j)) in mask.iter().zip(correspondences) {
        if *ok {
            let moved = transform.transform_point(&source_keypoints[i]);
            sq_sum += (moved - target_keypoints[j]).norm_squared().as_f64();
        }
    }
    let rmse = if inlier_count > 0 {
        (sq_sum / inlier_count as f64).sqrt()
    } else {
        0.0
    };

    Ok(RegistrationResult {
        transform,
        inlier_ratio: inlier_count as f64 / n as f64,
        inlier_mask: mask,
        iterations,
        rmse,
        success: true,
    })
}

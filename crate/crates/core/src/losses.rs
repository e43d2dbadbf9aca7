//! Training objectives: the soft-assignment matching loss with saliency
//! weights, the probabilistic chamfer loss and the point-to-point loss.
//!
//! Each loss exists as a tape graph builder (used by training) plus a plain
//! function over values. The plain functions run the same graph code on a
//! throwaway tape, so there is a single implementation of the math.

use nalgebra::Point3;

use crate::cloud::{PointCloud, RigidTransform};
use crate::descriptor::DescriptorSet;
use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor2;
use crate::scalar::Real;
use crate::spatial::KdTree;

/// Distances below this are clamped before the reciprocal in the matching
/// score (guards identical descriptors).
pub const DISTANCE_CLAMP: f64 = 1e-12;

/// Matching-loss hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct MatchingConfig<T: Real> {
    /// temperature sharpening the score distribution
    pub temperature: T,
    /// saliency upper bound for keypoint weights
    pub sigma_max: T,
    /// disable for the uniform-weight ablation
    pub use_weights: bool,
}

impl<T: Real> Default for MatchingConfig<T> {
    fn default() -> Self {
        MatchingConfig {
            temperature: T::cast(0.1),
            sigma_max: T::cast(1.0),
            use_weights: true,
        }
    }
}

/// One side of a training pair.
#[derive(Clone, Debug)]
pub struct SideData<T: Real> {
    pub keypoints: Vec<Point3<T>>,
    pub sigmas: Vec<T>,
    pub descriptors: DescriptorSet<T>,
}

/// A source/target pair with its ground-truth relative transform
/// (target <- source).
#[derive(Clone, Debug)]
pub struct PairBatch<T: Real> {
    pub source: SideData<T>,
    pub target: SideData<T>,
    pub gt: RigidTransform<T>,
}

impl<T: Real> PairBatch<T> {
    pub fn validate(&self) -> Result<()> {
        let m = self.source.keypoints.len();
        if self.target.keypoints.len() != m {
            return Err(Error::Shape(format!(
                "keypoint counts differ: {} vs {}",
                m,
                self.target.keypoints.len()
            )));
        }
        for side in [&self.source, &self.target] {
            if side.sigmas.len() != side.keypoints.len()
                || side.descriptors.len() != side.keypoints.len()
            {
                return Err(Error::Shape("side fields are not index-aligned".into()));
            }
        }
        Ok(())
    }
}

/// Packs points into an `M x 3` tensor.
pub fn points_tensor<T: Real>(points: &[Point3<T>]) -> Tensor2<T> {
    let mut out = Tensor2::zeros(points.len(), 3);
    for (r, p) in points.iter().enumerate() {
        out.row_mut(r).copy_from_slice(&[p.x, p.y, p.z]);
    }
    out
}

/// Tensor applying the rotation to row vectors: `x_row . rot_rows(R) = (R x)_row`.
fn rotation_rows<T: Real>(gt: &RigidTransform<T>) -> Tensor2<T> {
    let r = gt.rotation();
    let mut out = Tensor2::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            out.set(i, j, r[(j, i)]);
        }
    }
    out
}

/// Tensor applying the inverse rotation to row vectors.
fn rotation_rows_inv<T: Real>(gt: &RigidTransform<T>) -> Tensor2<T> {
    let r = gt.rotation();
    let mut out = Tensor2::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            out.set(i, j, r[(i, j)]);
        }
    }
    out
}

fn translation_row<T: Real>(gt: &RigidTransform<T>) -> Tensor2<T> {
    let t = gt.translation();
    Tensor2::row_vector(vec![t.x, t.y, t.z])
}

/// Maps `M x 3` keypoint rows through the rigid transform.
pub fn transform_rows_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    points: NodeId,
    gt: &RigidTransform<T>,
) -> NodeId {
    let rot = tape.constant(rotation_rows(gt));
    let tr = tape.constant(translation_row(gt));
    let rotated = tape.matmul(points, rot);
    tape.add_row(rotated, tr)
}

/// Maps `M x 3` keypoint rows through the inverse transform.
pub fn inverse_transform_rows_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    points: NodeId,
    gt: &RigidTransform<T>,
) -> NodeId {
    let rot = tape.constant(rotation_rows_inv(gt));
    let tr = tape.constant(translation_row(gt));
    let centered = tape.sub_row(points, tr);
    tape.matmul(centered, rot)
}

/// Soft assignment: row-stochastic scores from inverse squared descriptor
/// distances sharpened by `temperature`, and the score-weighted target
/// keypoints.
pub fn soft_assign_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    query_desc: NodeId,
    target_desc: NodeId,
    target_keypoints: NodeId,
    temperature: T,
) -> (NodeId, NodeId) {
    let dist = tape.pairwise_sqdist(query_desc, target_desc);
    let inv = tape.recip_clamped(dist, T::cast(DISTANCE_CLAMP));
    let sharpened = tape.mul_scalar(inv, T::one() / temperature);
    let scores = tape.softmax_rows(sharpened);
    let soft_keypoints = tape.matmul(scores, target_keypoints);
    (scores, soft_keypoints)
}

/// Saliency-derived keypoint weights `w_i = max(sigma_max - sigma_i, 0)`,
/// normalized to mean 1. Returns the weight node and whether the uniform
/// fallback fired (all saliencies at or above `sigma_max`).
pub fn keypoint_weights_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    sigmas: NodeId,
    sigma_max: T,
) -> (NodeId, bool) {
    let m = tape.value(sigmas).rows();
    let negated = tape.mul_scalar(sigmas, -T::one());
    let headroom = tape.add_scalar(negated, sigma_max);
    let raw = tape.relu(headroom);
    let total = tape.sum_all(raw);
    if tape.value(total).item() <= T::zero() {
        let ones = Tensor2::from_vec(m, 1, vec![T::one(); m]).expect("shape");
        return (tape.constant(ones), true);
    }
    let normalized = tape.div_by_scalar(raw, total);
    (tape.mul_scalar(normalized, T::cast_usize(m)), false)
}

/// Nodes for one side of a pair inside a loss graph.
#[derive(Clone, Copy, Debug)]
pub struct SideNodes {
    pub keypoints: NodeId,
    pub sigmas: NodeId,
    pub descriptors: NodeId,
}

/// The bidirectional soft-assignment matching loss.
pub fn matching_loss_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    source: SideNodes,
    target: SideNodes,
    gt: &RigidTransform<T>,
    cfg: &MatchingConfig<T>,
) -> NodeId {
    let (_, soft_target) = soft_assign_graph(
        tape,
        source.descriptors,
        target.descriptors,
        target.keypoints,
        cfg.temperature,
    );
    let (_, soft_source) = soft_assign_graph(
        tape,
        target.descriptors,
        source.descriptors,
        source.keypoints,
        cfg.temperature,
    );
    let uniform = |tape: &mut Tape<'_, T>, sigmas: NodeId| {
        let m = tape.value(sigmas).rows();
        tape.constant(Tensor2::from_vec(m, 1, vec![T::one(); m]).expect("shape"))
    };
    let (w_source, w_target) = if cfg.use_weights {
        let (ws, _) = keypoint_weights_graph(tape, source.sigmas, cfg.sigma_max);
        let (wt, _) = keypoint_weights_graph(tape, target.sigmas, cfg.sigma_max);
        (ws, wt)
    } else {
        (uniform(tape, source.sigmas), uniform(tape, target.sigmas))
    };

    // source keypoints carried into the target frame vs their soft matches
    let source_in_target = transform_rows_graph(tape, source.keypoints, gt);
    let residual_s = tape.sub(source_in_target, soft_target);
    let sq_s = tape.mul(residual_s, residual_s);
    let per_kp_s = tape.sum_over_cols(sq_s);
    let weighted_s = tape.mul(w_source, per_kp_s);
    let term_s = tape.sum_all(weighted_s);

    // soft-assigned source positions of target keypoints, also mapped forward
    let soft_source_in_target = transform_rows_graph(tape, soft_source, gt);
    let residual_t = tape.sub(soft_source_in_target, target.keypoints);
    let sq_t = tape.mul(residual_t, residual_t);
    let per_kp_t = tape.sum_over_cols(sq_t);
    let weighted_t = tape.mul(w_target, per_kp_t);
    let term_t = tape.sum_all(weighted_t);

    tape.add(term_s, term_t)
}

fn nearest_indices<T: Real>(from: &Tensor2<T>, to: &Tensor2<T>) -> Vec<usize> {
    (0..from.rows())
        .map(|i| {
            let fr = from.row(i);
            let mut best = 0usize;
            let mut best_d = T::cast(f64::INFINITY);
            for j in 0..to.rows() {
                let tr = to.row(j);
                let mut d = T::zero();
                for a in 0..3 {
                    let diff = fr[a] - tr[a];
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One direction of the probabilistic chamfer loss:
/// `mean_i ln(sigma_pair_i) + d_i / sigma_pair_i` with
/// `sigma_pair = (sigma_query + sigma_nn) / 2` and `d_i` the distance from
/// the aligned query keypoint to its nearest counterpart. The mean keeps the
/// gradient scale independent of the keypoint count, like the
/// point-to-point loss.
fn chamfer_direction<T: Real>(
    tape: &mut Tape<'_, T>,
    aligned_query_kp: NodeId,
    query_sigmas: NodeId,
    counterpart_kp: NodeId,
    counterpart_sigmas: NodeId,
) -> NodeId {
    let idx = nearest_indices(tape.value(aligned_query_kp), tape.value(counterpart_kp));
    let nn = tape.gather_rows(counterpart_kp, &idx);
    let diff = tape.sub(aligned_query_kp, nn);
    let sq = tape.mul(diff, diff);
    let d2 = tape.sum_over_cols(sq);
    let dist = tape.sqrt_guarded(d2);

    let nn_sigmas = tape.gather_rows(counterpart_sigmas, &idx);
    let sigma_sum = tape.add(query_sigmas, nn_sigmas);
    let sigma_pair = tape.mul_scalar(sigma_sum, T::cast(0.5));
    let log_term = tape.ln(sigma_pair);
    let ratio = tape.div(dist, sigma_pair);
    let per_kp = tape.add(log_term, ratio);
    let total = tape.sum_all(per_kp);
    let m = tape.value(aligned_query_kp).rows();
    tape.mul_scalar(total, T::one() / T::cast_usize(m))
}

/// Symmetric probabilistic chamfer loss under the ground-truth alignment.
pub fn chamfer_loss_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    source_keypoints: NodeId,
    source_sigmas: NodeId,
    target_keypoints: NodeId,
    target_sigmas: NodeId,
    gt: &RigidTransform<T>,
) -> NodeId {
    let source_in_target = transform_rows_graph(tape, source_keypoints, gt);
    let fwd = chamfer_direction(
        tape,
        source_in_target,
        source_sigmas,
        target_keypoints,
        target_sigmas,
    );
    let target_in_source = inverse_transform_rows_graph(tape, target_keypoints, gt);
    let bwd = chamfer_direction(
        tape,
        target_in_source,
        target_sigmas,
        source_keypoints,
        source_sigmas,
    );
    tape.add(fwd, bwd)
}

/// Mean squared distance from each keypoint to its nearest original cloud
/// point. The cloud is fixed; gradients flow into the keypoints.
pub fn point_to_point_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    keypoints: NodeId,
    cloud: &PointCloud<T>,
    tree: &KdTree<T>,
) -> NodeId {
    let m = tape.value(keypoints).rows();
    let mut nn = Tensor2::zeros(m, 3);
    for i in 0..m {
        let row = tape.value(keypoints).row(i);
        let (idx, _) = tree.nearest_one(&Point3::new(row[0], row[1], row[2]));
        let p = cloud.positions()[idx];
        nn.row_mut(i).copy_from_slice(&[p.x, p.y, p.z]);
    }
    let nn = tape.constant(nn);
    let diff = tape.sub(keypoints, nn);
    let sq = tape.mul(diff, diff);
    let d2 = tape.sum_over_cols(sq);
    let total = tape.sum_all(d2);
    tape.mul_scalar(total, T::one() / T::cast_usize(m))
}

// ---------------------------------------------------------------------------
// plain-value wrappers
// ---------------------------------------------------------------------------

/// Soft assignment over descriptor sets: returns the `M x M` score matrix and
/// the soft target keypoint for every query.
pub fn soft_assign<T: Real>(
    query: &DescriptorSet<T>,
    target: &DescriptorSet<T>,
    target_keypoints: &[Point3<T>],
    temperature: T,
) -> Result<(Tensor2<T>, Vec<Point3<T>>)> {
    if temperature <= T::zero() {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if target.len() != target_keypoints.len() {
        return Err(Error::Shape("target descriptors vs keypoints".into()));
    }
    if query.dim() != target.dim() {
        return Err(Error::Shape("descriptor dimensions differ".into()));
    }
    let env: Vec<Tensor2<T>> = Vec::new();
    let mut tape = Tape::new(&env);
    let q = tape.constant(query.descriptors.clone());
    let t = tape.constant(target.descriptors.clone());
    let kp = tape.constant(points_tensor(target_keypoints));
    let (scores, soft) = soft_assign_graph(&mut tape, q, t, kp, temperature);
    let soft_points = (0..query.len())
        .map(|i| {
            let row = tape.value(soft).row(i);
            Point3::new(row[0], row[1], row[2])
        })
        .collect();
    Ok((tape.value(scores).clone(), soft_points))
}

/// Evaluates the keypoint weights of a saliency vector. The second return
/// flags the uniform fallback.
pub fn keypoint_weights<T: Real>(sigmas: &[T], sigma_max: T) -> Result<(Vec<T>, bool)> {
    if sigmas.is_empty() {
        return Err(Error::InvalidArgument("no saliencies".into()));
    }
    if sigma_max <= T::zero() {
        return Err(Error::InvalidArgument("sigma_max must be positive".into()));
    }
    let env: Vec<Tensor2<T>> = Vec::new();
    let mut tape = Tape::new(&env);
    let s = tape.constant(Tensor2::col_vector(sigmas.to_vec()));
    let (w, fallback) = keypoint_weights_graph(&mut tape, s, sigma_max);
    Ok((tape.value(w).data().to_vec(), fallback))
}

fn batch_nodes<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    batch: &PairBatch<T>,
) -> (SideNodes, SideNodes) {
    let mut side = |data: &SideData<T>| {
        let kp = tape.constant(points_tensor(&data.keypoints));
        let sig = tape.constant(Tensor2::col_vector(data.sigmas.clone()));
        let desc = tape.constant(data.descriptors.descriptors.clone());
        SideNodes {
            keypoints: kp,
            sigmas: sig,
            descriptors: desc,
        }
    };
    let s = side(&batch.source);
    let t = side(&batch.target);
    (s, t)
}

/// The matching loss of a pair batch.
pub fn matching_loss<T: Real>(batch: &PairBatch<T>, cfg: &MatchingConfig<T>) -> Result<T> {
    batch.validate()?;
    if cfg.temperature <= T::zero() {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let env: Vec<Tensor2<T>> = Vec::new();
    let mut tape = Tape::new(&env);
    let (s, t) = batch_nodes(&mut tape, batch);
    let loss = matching_loss_graph(&mut tape, s, t, &batch.gt, cfg);
    Ok(tape.value(loss).item())
}

/// The symmetric probabilistic chamfer loss of a pair batch.
pub fn probabilistic_chamfer_loss<T: Real>(batch: &PairBatch<T>) -> Result<T> {
    batch.validate()?;
    let env: Vec<Tensor2<T>> = Vec::new();
    let mut tape = Tape::new(&env);
    let (s, t) = batch_nodes(&mut tape, batch);
    let loss = chamfer_loss_graph(&mut tape, s.keypoints, s.sigmas, t.keypoints, t.sigmas, &batch.gt);
    Ok(tape.value(loss).item())
}

/// Mean squared keypoint-to-cloud distance.
pub fn point_to_point_loss<T: Real>(keypoints: &[Point3<T>], cloud: &PointCloud<T>) -> Result<T> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if keypoints.is_empty() {
        return Ok(T::zero());
    }
    let tree = KdTree::build(cloud.positions())?;
    let env: Vec<Tensor2<T>> = Vec::new();
    let mut tape = Tape::new(&env);
    let kp = tape.constant(points_tensor(keypoints));
    let loss = point_to_point_graph(&mut tape, kp, cloud, &tree);
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn desc_set(rows: Vec<Vec<f64>>) -> DescriptorSet<f64> {
        DescriptorSet {
            descriptors: Tensor2::from_rows(&rows).unwrap(),
        }
    }

    fn random_points(n: usize, rng: &mut StdRng, scale: f64) -> Vec<Point3<f64>> {
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

    fn random_descs(n: usize, d: usize, rng: &mut StdRng) -> DescriptorSet<f64> {
        DescriptorSet {
            descriptors: Tensor2::from_vec(
                n,
                d,
                (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        }
    }

    #[test]
    fn symmetric_two_target_case() {
        // equal descriptor distances to both targets: scores 0.5/0.5 and the
        // soft keypoint is the midpoint
        let query = desc_set(vec![vec![0.0, 0.0]]);
        let target = desc_set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let target_kp = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(2.0, 4.0, 6.0)];
        let (scores, soft) = soft_assign(&query, &target, &target_kp, 0.1).unwrap();
        assert!((scores.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((scores.get(0, 1) - 0.5).abs() < 1e-12);
        assert!((soft[0].coords - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn score_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(1);
        let q = random_descs(12, 8, &mut rng);
        let t = random_descs(12, 8, &mut rng);
        let kp = random_points(12, &mut rng, 5.0);
        let (scores, _) = soft_assign(&q, &t, &kp, 0.1).unwrap();
        for r in 0..scores.rows() {
            let sum: f64 = scores.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(scores.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn low_temperature_degenerates_to_nearest_neighbor() {
        // descriptor entries at trained-feature scale; the inverse-distance
        // scores then dwarf the temperature and the softmax goes one-hot
        let mut rng = StdRng::seed_from_u64(2);
        let scaled = |n: usize, d: usize, rng: &mut StdRng| DescriptorSet {
            descriptors: Tensor2::from_vec(
                n,
                d,
                (0..n * d).map(|_| rng.gen_range(-0.01..0.01)).collect(),
            )
            .unwrap(),
        };
        for _ in 0..100 {
            let q = scaled(64, 16, &mut rng);
            let t = scaled(64, 16, &mut rng);
            let kp = random_points(64, &mut rng, 2.0);
            let (scores, soft) = soft_assign(&q, &t, &kp, 1e-3).unwrap();
            for i in 0..64 {
                // exhaustive nearest-descriptor oracle
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..64 {
                    let d: f64 = q
                        .descriptor(i)
                        .iter()
                        .zip(t.descriptor(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                let argmax = (0..64)
                    .max_by(|&a, &b| scores.get(i, a).partial_cmp(&scores.get(i, b)).unwrap())
                    .unwrap();
                assert_eq!(argmax, best);
                assert!((soft[i] - kp[best]).norm() < 1e-3);
            }
        }
    }

    #[test]
    fn identical_descriptors_hit_the_clamp_path() {
        let q = desc_set(vec![vec![0.5, 0.5]]);
        let t = desc_set(vec![vec![0.5, 0.5], vec![3.0, 3.0]]);
        let kp = vec![Point3::new(1.0, 0.0, 0.0), Point3::new(-1.0, 0.0, 0.0)];
        let (scores, soft) = soft_assign(&q, &t, &kp, 0.1).unwrap();
        assert!(scores.get(0, 0) > 1.0 - 1e-12);
        assert!((soft[0] - kp[0]).norm() < 1e-9);
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let mut rng = StdRng::seed_from_u64(3);
        let q = random_descs(10, 6, &mut rng);
        let t = random_descs(10, 6, &mut rng);
        let kp = random_points(10, &mut rng, 5.0);
        let entropy = |s: &Tensor2<f64>, r: usize| -> f64 {
            s.row(r)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum()
        };
        let mut prev: Option<Vec<f64>> = None;
        for temp in [0.01, 0.1, 0.5, 2.0] {
            let (scores, _) = soft_assign(&q, &t, &kp, temp).unwrap();
            let rows: Vec<f64> = (0..10).map(|r| entropy(&scores, r)).collect();
            if let Some(p) = prev {
                for (lo, hi) in p.iter().zip(&rows) {
                    assert!(hi + 1e-9 >= *lo, "entropy must not decrease with temperature");
                }
            }
            prev = Some(rows);
        }
    }

    #[test]
    fn keypoint_weight_examples() {
        // all equal below the bound: every weight is 1
        let (w, fallback) = keypoint_weights::<f64>(&[0.4, 0.4, 0.4], 1.0).unwrap();
        assert!(!fallback);
        for v in &w {
            assert!((v - 1.0).abs() < 1e-12);
        }

        let (w, fallback) = keypoint_weights::<f64>(&[0.5, 1.5], 1.0).unwrap();
        assert!(!fallback);
        assert!((w[0] - 2.0).abs() < 1e-12);
        assert!(w[1].abs() < 1e-12);

        // normalization identity: weights sum to M
        let mut rng = StdRng::seed_from_u64(4);
        let sigmas: Vec<f64> = (0..17).map(|_| rng.gen_range(0.0..0.99)).collect();
        let (w, _) = keypoint_weights(&sigmas, 1.0).unwrap();
        assert!((w.iter().sum::<f64>() - 17.0).abs() < 1e-9);
    }

    #[test]
    fn saturated_saliencies_fall_back_to_uniform() {
        let (w, fallback) = keypoint_weights(&[2.0, 3.0, 5.0], 1.0).unwrap();
        assert!(fallback);
        assert_eq!(w, vec![1.0, 1.0, 1.0]);
    }

    fn engineered_batch(perm: &[usize], gt: &RigidTransform<f64>) -> PairBatch<f64> {
        // target keypoints are geometrically aligned with the source; the
        // descriptor permutation alone decides which hard assignment the
        // huge-gap descriptors realize
        let source_kp = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(4.0, 0.0, 0.0),
            Point3::new(0.0, 4.0, 0.0),
        ];
        let target_kp: Vec<Point3<f64>> =
            source_kp.iter().map(|p| gt.transform_point(p)).collect();
        let one_hot = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 100.0;
            v
        };
        let source_desc = desc_set((0..3).map(one_hot).collect());
        let target_desc = desc_set(perm.iter().map(|&j| one_hot(j)).collect());
        PairBatch {
            source: SideData {
                keypoints: source_kp,
                sigmas: vec![0.3, 0.4, 0.5],
                descriptors: source_desc,
            },
            target: SideData {
                keypoints: target_kp,
                sigmas: vec![0.35, 0.45, 0.55],
                descriptors: target_desc,
            },
            gt: *gt,
        }
    }

    #[test]
    fn perfect_correspondence_gives_zero_loss() {
        let gt = RigidTransform::from_axis_angle(
            &Vector3::z(),
            0.4,
            Vector3::new(1.0, -2.0, 0.5),
        );
        let batch = engineered_batch(&[0, 1, 2], &gt);
        let loss = matching_loss(&batch, &MatchingConfig::default()).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss} should vanish");
    }

    #[test]
    fn matching_loss_is_nonnegative() {
        let mut rng = StdRng::seed_from_u64(5);
        let gt = RigidTransform::from_axis_angle(
            &Vector3::new(0.1, 0.9, -0.3),
            0.7,
            Vector3::new(-1.0, 2.0, 3.0),
        );
        for _ in 0..20 {
            let batch = PairBatch {
                source: SideData {
                    keypoints: random_points(9, &mut rng, 4.0),
                    sigmas: (0..9).map(|_| rng.gen_range(0.05..0.95)).collect(),
                    descriptors: random_descs(9, 8, &mut rng),
                },
                target: SideData {
                    keypoints: random_points(9, &mut rng, 4.0),
                    sigmas: (0..9).map(|_| rng.gen_range(0.05..0.95)).collect(),
                    descriptors: random_descs(9, 8, &mut rng),
                },
                gt,
            };
            assert!(matching_loss(&batch, &MatchingConfig::default()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn saliency_shift_preserves_best_permutation() {
        // exhaustive 3-keypoint permutation oracle: adding a constant to all
        // saliencies (still below sigma_max) rescales weights but keeps the
        // argmin permutation
        let gt = RigidTransform::from_axis_angle(
            &Vector3::new(0.2, -0.1, 1.0),
            0.3,
            Vector3::new(0.5, 1.5, -0.5),
        );
        let perms: Vec<Vec<usize>> = vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ];
        let losses_for = |shift: f64| -> Vec<f64> {
            perms
                .iter()
                .map(|p| {
                    let mut batch = engineered_batch(p, &gt);
                    for s in batch
                        .source
                        .sigmas
                        .iter_mut()
                        .chain(batch.target.sigmas.iter_mut())
                    {
                        *s += shift;
                    }
                    matching_loss(&batch, &MatchingConfig::default()).unwrap()
                })
                .collect()
        };
        let argmin = |v: &[f64]| {
            v.iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let base = losses_for(0.0);
        let shifted = losses_for(0.3);
        assert_ne!(base, shifted, "weights must change with the shift");
        assert_eq!(argmin(&base), argmin(&shifted));
        assert_eq!(argmin(&base), 0, "identity permutation is optimal");
    }

    #[test]
    fn matching_loss_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(6);
        let gt = RigidTransform::from_axis_angle(
            &Vector3::new(0.3, 0.2, 0.9),
            0.5,
            Vector3::new(1.0, 0.0, -1.0),
        );
        let m = 5;
        let d = 4;
        let env = vec![
            points_tensor(&random_points(m, &mut rng, 3.0)),
            Tensor2::col_vector((0..m).map(|_| rng.gen_range(0.1..0.9)).collect()),
            random_descs(m, d, &mut rng).descriptors,
            points_tensor(&random_points(m, &mut rng, 3.0)),
            Tensor2::col_vector((0..m).map(|_| rng.gen_range(0.1..0.9)).collect()),
            random_descs(m, d, &mut rng).descriptors,
        ];
        let cfg = MatchingConfig::default();
        let report = check_gradients(&env, 1e-5, |tape| {
            let source = SideNodes {
                keypoints: tape.var(0),
                sigmas: tape.var(1),
                descriptors: tape.var(2),
            };
            let target = SideNodes {
                keypoints: tape.var(3),
                sigmas: tape.var(4),
                descriptors: tape.var(5),
            };
            matching_loss_graph(tape, source, target, &gt, &cfg)
        });
        assert!(
            report.max_rel_err < 1e-4,
            "matching loss gradcheck failed: {}",
            report.max_rel_err
        );
    }

    #[test]
    fn chamfer_zero_on_identical_sets() {
        let mut rng = StdRng::seed_from_u64(7);
        let gt = RigidTransform::from_axis_angle(
            &Vector3::new(0.0, 1.0, 0.4),
            0.25,
            Vector3::new(2.0, -0.5, 1.0),
        );
        let kp = random_points(8, &mut rng, 3.0);
        let target_kp: Vec<Point3<f64>> = kp.iter().map(|p| gt.transform_point(p)).collect();
        let batch = PairBatch {
            source: SideData {
                keypoints: kp,
                sigmas: vec![1.0; 8],
                descriptors: random_descs(8, 4, &mut rng),
            },
            target: SideData {
                keypoints: target_kp,
                sigmas: vec![1.0; 8],
                descriptors: random_descs(8, 4, &mut rng),
            },
            gt,
        };
        let loss = probabilistic_chamfer_loss(&batch).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn chamfer_optimum_calibrates_sigma_to_distance() {
        // scalar calculus oracle: d/dsigma (ln s + d/s) = 0 at s = d.
        // run SGD on the sigmas of a 1-pair instance and check convergence.
        let d = 0.8f64;
        let gt = RigidTransform::identity();
        let source_kp = points_tensor(&[Point3::new(0.0, 0.0, 0.0)]);
        let target_kp = points_tensor(&[Point3::new(d, 0.0, 0.0)]);
        let mut env = vec![
            Tensor2::col_vector(vec![0.3f64]),
            Tensor2::col_vector(vec![0.3f64]),
        ];
        let mut velocity = [0.0f64; 2];
        for _ in 0..4000 {
            let mut tape = Tape::new(&env);
            let kp_s = tape.constant(source_kp.clone());
            let sig_s = tape.var(0);
            let kp_t = tape.constant(target_kp.clone());
            let sig_t = tape.var(1);
            let loss = chamfer_loss_graph(&mut tape, kp_s, sig_s, kp_t, sig_t, &gt);
            let grads = tape.backward(loss).unwrap();
            for (i, g) in grads.iter().enumerate() {
                velocity[i] = 0.9 * velocity[i] + g.item();
                let updated = env[i].item() - 0.01 * velocity[i];
                env[i] = Tensor2::scalar(updated.max(1e-3));
            }
        }
        let sigma_bar = 0.5 * (env[0].item() + env[1].item());
        assert!(
            (sigma_bar - d).abs() / d < 0.01,
            "sigma {sigma_bar} should settle within 1% of d {d}"
        );
    }

    #[test]
    fn chamfer_monotone_in_target_shift() {
        let mut rng = StdRng::seed_from_u64(8);
        let kp = random_points(6, &mut rng, 2.0);
        let mut prev = None;
        for shift in [0.5, 1.0, 2.0, 4.0] {
            let target_kp: Vec<Point3<f64>> = kp
                .iter()
                .map(|p| Point3::new(p.x + shift, p.y, p.z))
                .collect();
            let batch = PairBatch {
                source: SideData {
                    keypoints: kp.clone(),
                    sigmas: vec![1.0; 6],
                    descriptors: random_descs(6, 4, &mut rng),
                },
                target: SideData {
                    keypoints: target_kp,
                    sigmas: vec![1.0; 6],
                    descriptors: random_descs(6, 4, &mut rng),
                },
                gt: RigidTransform::identity(),
            };
            let loss = probabilistic_chamfer_loss(&batch).unwrap();
            if let Some(p) = prev {
                assert!(loss > p);
            }
            prev = Some(loss);
        }
    }

    #[test]
    fn chamfer_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let gt = RigidTransform::from_axis_angle(
            &Vector3::new(1.0, 0.2, 0.1),
            0.35,
            Vector3::new(0.4, 0.8, -0.2),
        );
        let m = 6;
        let env = vec![
            points_tensor(&random_points(m, &mut rng, 3.0)),
            Tensor2::col_vector((0..m).map(|_| rng.gen_range(0.3..1.2)).collect()),
            points_tensor(&random_points(m, &mut rng, 3.0)),
            Tensor2::col_vector((0..m).map(|_| rng.gen_range(0.3..1.2)).collect()),
        ];
        let report = check_gradients(&env, 1e-5, |tape| {
            let kp_s = tape.var(0);
            let sig_s = tape.var(1);
            let kp_t = tape.var(2);
            let sig_t = tape.var(3);
            chamfer_loss_graph(tape, kp_s, sig_s, kp_t, sig_t, &gt)
        });
        assert!(
            report.max_rel_err < 1e-4,
            "chamfer gradcheck failed: {}",
            report.max_rel_err
        );
    }

    #[test]
    fn point_to_point_examples() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)]).unwrap();
        // coincident keypoint: zero
        let zero: f64 = point_to_point_loss(&[Point3::new(0.0, 0.0, 0.0)], &cloud).unwrap();
        assert_eq!(zero, 0.0);
        // distance 2 from the single cloud point: squared distance 4
        let four: f64 = point_to_point_loss(&[Point3::new(2.0, 0.0, 0.0)], &cloud).unwrap();
        assert!((four - 4.0).abs() < 1e-12);
        // empty cloud errors
        let empty = PointCloud::<f64>::new(vec![]).unwrap();
        assert!(point_to_point_loss(&[Point3::new(0.0, 0.0, 0.0)], &empty).is_err());
    }

    #[test]
    fn point_to_point_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(10);
        let cloud = PointCloud::new(random_points(40, &mut rng, 4.0)).unwrap();
        let tree = KdTree::build(cloud.positions()).unwrap();
        let env = vec![points_tensor(&random_points(5, &mut rng, 4.0))];
        let report = check_gradients(&env, 1e-5, |tape| {
            let kp = tape.var(0);
            point_to_point_graph(tape, kp, &cloud, &tree)
        });
        assert!(
            report.max_rel_err < 1e-4,
            "p2p gradcheck failed: {}",
            report.max_rel_err
        );
    }
}

//! Point-cloud container, voxel downsampling, normal/curvature features,
//! rigid transforms and closed-form rigid alignment.

use std::collections::HashMap;

use nalgebra::{Matrix3, Point3, Vector3, SVD};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spatial::KdTree;

/// Orthonormality tolerance for rotation validation.
const ROTATION_TOL: f64 = 1e-6;

/// A cloud of 3-D points with optional per-point surface features
/// (unit normal and curvature). The feature channel width is 4 when
/// both are attached: `[nx, ny, nz, curvature]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T: Real> {
    positions: Vec<Point3<T>>,
    normals: Option<Vec<Vector3<T>>>,
    curvatures: Option<Vec<T>>,
}

impl<T: Real> PointCloud<T> {
    /// Builds a bare cloud (no feature channels). Rejects non-finite coordinates.
    pub fn new(positions: Vec<Point3<T>>) -> Result<Self> {
        for (i, p) in positions.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite coordinate at point {i}"
                )));
            }
        }
        Ok(PointCloud {
            positions,
            normals: None,
            curvatures: None,
        })
    }

    pub fn with_features(
        positions: Vec<Point3<T>>,
        normals: Vec<Vector3<T>>,
        curvatures: Vec<T>,
    ) -> Result<Self> {
        if normals.len() != positions.len() || curvatures.len() != positions.len() {
            return Err(Error::Shape(format!(
                "feature lengths {}/{} do not match point count {}",
                normals.len(),
                curvatures.len(),
                positions.len()
            )));
        }
        let mut cloud = PointCloud::new(positions)?;
        cloud.normals = Some(normals);
        cloud.curvatures = Some(curvatures);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3<T>] {
        &self.positions
    }

    pub fn normals(&self) -> Option<&[Vector3<T>]> {
        self.normals.as_deref()
    }

    pub fn curvatures(&self) -> Option<&[T]> {
        self.curvatures.as_deref()
    }

    pub fn has_features(&self) -> bool {
        self.normals.is_some() && self.curvatures.is_some()
    }

    /// Width of the per-point feature channel block (0 or 4).
    pub fn channel_width(&self) -> usize {
        if self.has_features() {
            4
        } else {
            0
        }
    }

    /// Appends point `i`'s channels (`nx, ny, nz, curvature`) to `out`.
    pub fn push_channels(&self, i: usize, out: &mut Vec<T>) {
        if let (Some(normals), Some(curv)) = (&self.normals, &self.curvatures) {
            let n = &normals[i];
            out.push(n.x);
            out.push(n.y);
            out.push(n.z);
            out.push(curv[i]);
        }
    }

    /// Keeps only the points at `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> PointCloud<T> {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
            curvatures: self
                .curvatures
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// A proper rigid motion: rotation in SO(3) plus translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T: Real> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    /// Validates that `rotation` is orthonormal with determinant +1
    /// (tolerance 1e-6, widened to 50 ulp for narrower scalars)
    /// before constructing.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let tol = T::cast(ROTATION_TOL).max(T::default_epsilon() * T::cast(50.0));
        let gram = rotation.transpose() * rotation;
        let eye = Matrix3::identity();
        let mut max_dev = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let d = (gram[(i, j)] - eye[(i, j)]).abs();
                if d > max_dev {
                    max_dev = d;
                }
            }
        }
        if max_dev > tol {
            return Err(Error::InvalidArgument(format!(
                "rotation not orthonormal (max deviation {})",
                max_dev.as_f64()
            )));
        }
        let det = rotation.determinant();
        if (det - T::one()).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {} is not +1",
                det.as_f64()
            )));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn rotate_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform<T>) -> RigidTransform<T> {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform<T> {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation about `axis` by `angle` (radians) plus `translation`.
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T, translation: Vector3<T>) -> Self {
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(*axis),
            angle,
        )
        .into_inner();
        RigidTransform { rotation, translation }
    }

    /// Re-projects a nearly-orthonormal matrix onto SO(3) (used when loading
    /// text pose files whose entries carry rounding error).
    pub fn project_rotation(m: &Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let svd = SVD::new(*m, true, true);
        let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
        let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
        let mut r = u * v_t;
        if r.determinant() < T::zero() {
            let mut u = u;
            for i in 0..3 {
                u[(i, 2)] = -u[(i, 2)];
            }
            r = u * v_t;
        }
        RigidTransform::new(r, translation)
    }
}

/// Voxel-grid downsampling: at most one point per occupied voxel, placed at
/// the centroid of the voxel's members; feature channels are averaged.
/// Output is ordered by voxel key, so it is deterministic.
pub fn voxel_downsample<T: Real>(cloud: &PointCloud<T>, grid_size: T) -> Result<PointCloud<T>> {
    if grid_size <= T::zero() {
        return Err(Error::InvalidArgument("grid size must be positive".into()));
    }
    struct Acc<T> {
        pos: Vector3<T>,
        normal: Vector3<T>,
        curv: T,
        count: usize,
    }
    let with_features = cloud.has_features();
    let mut voxels: HashMap<(i64, i64, i64), Acc<T>> = HashMap::new();
    let key_of = |p: &Point3<T>| {
        (
            (p.x / grid_size).floor().as_f64() as i64,
            (p.y / grid_size).floor().as_f64() as i64,
            (p.z / grid_size).floor().as_f64() as i64,
        )
    };
    for (i, p) in cloud.positions.iter().enumerate() {
        let acc = voxels.entry(key_of(p)).or_insert_with(|| Acc {
            pos: Vector3::zeros(),
            normal: Vector3::zeros(),
            curv: T::zero(),
            count: 0,
        });
        acc.pos += p.coords;
        if with_features {
            acc.normal += cloud.normals.as_ref().unwrap()[i];
            acc.curv += cloud.curvatures.as_ref().unwrap()[i];
        }
        acc.count += 1;
    }
    let mut keys: Vec<_> = voxels.keys().copied().collect();
    keys.sort_unstable();

    let mut positions = Vec::with_capacity(keys.len());
    let mut normals = Vec::new();
    let mut curvatures = Vec::new();
    for key in keys {
        let acc = &voxels[&key];
        let inv = T::one() / T::cast_usize(acc.count);
        positions.push(Point3::from(acc.pos * inv));
        if with_features {
            normals.push(acc.normal * inv);
            curvatures.push(acc.curv * inv);
        }
    }
    if with_features {
        PointCloud::with_features(positions, normals, curvatures)
    } else {
        PointCloud::new(positions)
    }
}

/// Diagnostics from feature estimation.
#[derive(Clone, Copy, Debug, Default)]
pub struct FeatureDiagnostics {
    /// Neighborhoods with rank < 2 (normal fell back to +z, curvature to 0).
    pub degenerate_count: usize,
}

/// Estimates per-point unit normals and curvature from the PCA of the
/// `k_normal` nearest neighbors. The normal is the eigenvector of the
/// smallest covariance eigenvalue, oriented toward the sensor origin;
/// curvature is `lambda_min / (l0 + l1 + l2)`.
pub fn estimate_normals_curvature<T: Real>(
    cloud: &PointCloud<T>,
    k_normal: usize,
) -> Result<(PointCloud<T>, FeatureDiagnostics)> {
    let n = cloud.len();
    if k_normal < 3 {
        return Err(Error::InvalidArgument("k_normal must be at least 3".into()));
    }
    if n < k_normal {
        return Err(Error::InvalidArgument(format!(
            "cloud of {n} points is smaller than k_normal {k_normal}"
        )));
    }
    let tree = KdTree::build(cloud.positions())?;
    let results: Vec<(Vector3<T>, T, bool)> = {
        use rayon::prelude::*;
        cloud
            .positions
            .par_iter()
            .map(|p| normal_at(&tree, cloud.positions(), p, k_normal))
            .collect()
    };
    let mut normals = Vec::with_capacity(n);
    let mut curvatures = Vec::with_capacity(n);
    let mut diag = FeatureDiagnostics::default();
    for (normal, curv, degenerate) in results {
        if degenerate {
            diag.degenerate_count += 1;
        }
        normals.push(normal);
        curvatures.push(curv);
    }
    let out = PointCloud::with_features(cloud.positions.clone(), normals, curvatures)?;
    Ok((out, diag))
}

fn normal_at<T: Real>(
    tree: &KdTree<T>,
    positions: &[Point3<T>],
    p: &Point3<T>,
    k: usize,
) -> (Vector3<T>, T, bool) {
    let neighbors = tree.knn(p, k);
    let mut centroid = Vector3::zeros();
    for &(idx, _) in &neighbors {
        centroid += positions[idx].coords;
    }
    centroid *= T::one() / T::cast_usize(neighbors.len());
    let mut cov = Matrix3::zeros();
    for &(idx, _) in &neighbors {
        let d = positions[idx].coords - centroid;
        cov += d * d.transpose();
    }

    let eig = nalgebra::SymmetricEigen::new(cov);
    // order eigenvalues ascending
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
    });
    let l_min = eig.eigenvalues[order[0]].max(T::zero());
    let l_mid = eig.eigenvalues[order[1]].max(T::zero());
    let sum = eig.eigenvalues.iter().fold(T::zero(), |a, &v| a + v.max(T::zero()));

    // rank < 2: the two smallest eigenvalues vanish relative to the spread
    let degenerate = sum <= T::zero() || l_mid <= sum * T::cast(1e-12);
    if degenerate {
        return (Vector3::z(), T::zero(), true);
    }

    let mut normal: Vector3<T> = eig.eigenvectors.column(order[0]).into();
    let norm = normal.norm();
    if norm <= T::zero() || !norm.is_finite() {
        return (Vector3::z(), T::zero(), true);
    }
    normal /= norm;
    // orient toward the sensor origin; on ties pick a canonical sign
    let toward = normal.dot(&p.coords);
    if toward > T::zero() {
        normal = -normal;
    } else if toward == T::zero() {
        let flip = if normal.z != T::zero() {
            normal.z < T::zero()
        } else if normal.y != T::zero() {
            normal.y < T::zero()
        } else {
            normal.x < T::zero()
        };
        if flip {
            normal = -normal;
        }
    }
    let curvature = l_min / sum;
    (normal, curvature, false)
}

/// Applies a rigid transform: positions map through `R x + t`, normals rotate
/// by `R`, curvature is untouched.
pub fn apply_transform<T: Real>(cloud: &PointCloud<T>, t: &RigidTransform<T>) -> PointCloud<T> {
    PointCloud {
        positions: cloud
            .positions
            .iter()
            .map(|p| t.transform_point(p))
            .collect(),
        normals: cloud
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| t.rotate_vector(n)).collect()),
        curvatures: cloud.curvatures.clone(),
    }
}

/// Least-squares rigid alignment (SVD of the cross-covariance): returns the
/// transform minimizing `sum ||T(src_i) - dst_i||^2`, with the rotation branch
/// sign-corrected to det = +1.
pub fn kabsch_align<T: Real>(src: &[Point3<T>], dst: &[Point3<T>]) -> Result<RigidTransform<T>> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!(
            "point counts differ: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::AlignmentDegenerate(format!(
            "need at least 3 pairs, got {}",
            src.len()
        )));
    }
    let inv_n = T::one() / T::cast_usize(src.len());
    let mut c_src = Vector3::zeros();
    let mut c_dst = Vector3::zeros();
    for (a, b) in src.iter().zip(dst) {
        c_src += a.coords;
        c_dst += b.coords;
    }
    c_src *= inv_n;
    c_dst *= inv_n;

    let mut cross = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        cross += (a.coords - c_src) * (b.coords - c_dst).transpose();
    }

    let svd = SVD::new(cross, true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD of cross-covariance failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD of cross-covariance failed".into()))?;
    let sv = &svd.singular_values;
    // rank < 2 leaves a rotation about the degenerate direction unconstrained
    if sv[1] <= sv[0] * T::cast(1e-9) {
        return Err(Error::AlignmentDegenerate(
            "cross-covariance rank < 2 (collinear or coincident points)".into(),
        ));
    }

    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < T::zero() {
        // reflection guard: flip the smallest singular direction
        let mut v = v;
        for i in 0..3 {
            v[(i, 2)] = -v[(i, 2)];
        }
        r = v * u.transpose();
    }
    let t = c_dst - r * c_src;
    RigidTransform::new(r, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_cloud(n: usize, seed: u64, scale: f64) -> Vec<Point3<f64>> {
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
    fn voxel_collapses_single_cell() {
        let pts = vec![
            Point3::new(0.01f64, 0.01, 0.01),
            Point3::new(0.02, 0.03, 0.04),
            Point3::new(0.05, 0.02, 0.08),
            Point3::new(0.09, 0.09, 0.01),
            Point3::new(0.03, 0.05, 0.06),
        ];
        let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / 5.0;
        let cloud = PointCloud::new(pts).unwrap();
        let out = voxel_downsample(&cloud, 0.1).unwrap();
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out.positions()[0].coords, centroid, epsilon = 1e-12);
    }

    #[test]
    fn voxel_preserves_sparse_lattice() {
        // 10x10x10 lattice with 1 m spacing, 0.5 m grid: one point per voxel.
        let mut pts = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                for z in 0..10 {
                    pts.push(Point3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let out = voxel_downsample(&cloud, 0.5).unwrap();
        assert_eq!(out.len(), 1000);
        // brute-force binning oracle: group by floor(p / g), compare centroids
        let mut oracle: std::collections::BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> =
            std::collections::BTreeMap::new();
        for p in &pts {
            let k = (
                (p.x / 0.5).floor() as i64,
                (p.y / 0.5).floor() as i64,
                (p.z / 0.5).floor() as i64,
            );
            let e = oracle.entry(k).or_insert((Vector3::zeros(), 0));
            e.0 += p.coords;
            e.1 += 1;
        }
        let expected: Vec<Vector3<f64>> =
            oracle.values().map(|(s, c)| s / *c as f64).collect();
        for (got, want) in out.positions().iter().zip(&expected) {
            assert_relative_eq!(got.coords, *want, epsilon = 1e-12);
        }
    }

    #[test]
    fn voxel_empty_cloud_is_empty() {
        let cloud = PointCloud::<f64>::new(vec![]).unwrap();
        assert!(voxel_downsample(&cloud, 0.1).unwrap().is_empty());
    }

    #[test]
    fn voxel_count_and_bounds_property() {
        let pts = random_cloud(500, 7, 4.0);
        let cloud = PointCloud::new(pts).unwrap();
        let g = 0.7;
        let out = voxel_downsample(&cloud, g).unwrap();
        assert!(out.len() <= cloud.len());
        for p in out.positions() {
            // centroid must lie inside its own voxel
            let key = |v: f64| (v / g).floor();
            for c in [p.x, p.y, p.z] {
                let k = key(c);
                assert!(c >= k * g - 1e-12 && c <= (k + 1.0) * g + 1e-12);
            }
        }
    }

    #[test]
    fn normals_on_plane() {
        let mut pts = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                pts.push(Point3::new(x as f64 * 0.1, y as f64 * 0.1, 0.0));
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        let (out, diag) = estimate_normals_curvature(&cloud, 8).unwrap();
        assert_eq!(diag.degenerate_count, 0);
        for (n, c) in out.normals().unwrap().iter().zip(out.curvatures().unwrap()) {
            assert!(n.z.abs() > 1.0 - 1e-9);
            assert!(*c < 1e-9);
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn curvature_positive_on_sphere() {
        // patch of the unit sphere around +z
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                let theta = 0.05 + 0.4 * (i as f64) / 30.0;
                let phi = 2.0 * std::f64::consts::PI * (j as f64) / 30.0;
                pts.push(Point3::new(
                    theta.sin() * phi.cos(),
                    theta.sin() * phi.sin(),
                    theta.cos(),
                ));
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        let (out, _) = estimate_normals_curvature(&cloud, 16).unwrap();
        let mean_curv: f64 =
            out.curvatures().unwrap().iter().sum::<f64>() / out.len() as f64;
        assert!(mean_curv > 0.0, "sphere patch must have positive curvature");
        for c in out.curvatures().unwrap() {
            assert!(*c >= 0.0 && *c <= 1.0 / 3.0 + 1e-12);
        }
    }

    #[test]
    fn collinear_neighborhood_is_degenerate_not_nan() {
        let pts: Vec<_> = (0..8).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let (out, diag) = estimate_normals_curvature(&cloud, 3).unwrap();
        assert_eq!(diag.degenerate_count, 8);
        for (n, c) in out.normals().unwrap().iter().zip(out.curvatures().unwrap()) {
            assert!(n.x.is_finite() && n.y.is_finite() && n.z.is_finite());
            assert_eq!(*n, Vector3::z());
            assert_eq!(*c, 0.0);
        }
    }

    #[test]
    fn apply_identity_is_bitwise() {
        let pts = random_cloud(50, 3, 5.0);
        let cloud = PointCloud::new(pts).unwrap();
        let out = apply_transform(&cloud, &RigidTransform::identity());
        assert_eq!(out.positions(), cloud.positions());
    }

    #[test]
    fn apply_then_inverse_round_trips() {
        let pts = random_cloud(50, 4, 5.0);
        let cloud = PointCloud::new(pts).unwrap();
        let t = RigidTransform::from_axis_angle(
            &Vector3::new(0.3, -0.5, 0.8),
            0.7,
            Vector3::new(1.0, -2.0, 3.0),
        );
        let back = apply_transform(&apply_transform(&cloud, &t), &t.inverse());
        for (a, b) in back.positions().iter().zip(cloud.positions()) {
            assert_relative_eq!(a.coords, b.coords, epsilon = 1e-9);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_axis_angle(
            &Vector3::z(),
            std::f64::consts::FRAC_PI_2,
            Vector3::zeros(),
        );
        let p = t.transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(p.coords, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn transform_preserves_pairwise_distances() {
        let pts = random_cloud(40, 11, 3.0);
        let cloud = PointCloud::new(pts).unwrap();
        let t = RigidTransform::from_axis_angle(
            &Vector3::new(1.0, 2.0, -1.0),
            1.1,
            Vector3::new(-4.0, 0.5, 2.0),
        );
        let moved = apply_transform(&cloud, &t);
        for i in 0..cloud.len() {
            for j in (i + 1)..cloud.len() {
                let d0 = (cloud.positions()[i] - cloud.positions()[j]).norm();
                let d1 = (moved.positions()[i] - moved.positions()[j]).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kabsch_identity() {
        let pts = random_cloud(10, 5, 2.0);
        let t = kabsch_align(&pts, &pts).unwrap();
        assert_relative_eq!(*t.rotation(), Matrix3::identity(), epsilon = 1e-9);
        assert_relative_eq!(*t.translation(), Vector3::zeros(), epsilon = 1e-9);
    }

    #[test]
    fn kabsch_recovers_known_transform() {
        let src = random_cloud(25, 6, 3.0);
        let gt = RigidTransform::from_axis_angle(
            &Vector3::new(0.2, 1.0, -0.4),
            0.9,
            Vector3::new(2.0, -1.0, 0.25),
        );
        let dst: Vec<_> = src.iter().map(|p| gt.transform_point(p)).collect();
        let est = kabsch_align(&src, &dst).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((est.rotation()[(i, j)] - gt.rotation()[(i, j)]).abs() < 1e-6);
            }
        }
        assert_relative_eq!(*est.translation(), *gt.translation(), epsilon = 1e-6);
    }

    #[test]
    fn kabsch_reflection_guard_keeps_det_positive() {
        let src = vec![
            Point3::new(1.0f64, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        // mirrored through the yz plane
        let dst: Vec<_> = src.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect();
        let est = kabsch_align(&src, &dst).unwrap();
        assert!((est.rotation().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kabsch_rejects_degenerate_input() {
        let two = random_cloud(2, 8, 1.0);
        assert!(matches!(
            kabsch_align(&two, &two),
            Err(Error::AlignmentDegenerate(_))
        ));
        let line: Vec<_> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            kabsch_align(&line, &line),
            Err(Error::AlignmentDegenerate(_))
        ));
    }

    #[test]
    fn kabsch_is_no_worse_than_identity() {
        let src = random_cloud(30, 9, 2.0);
        let mut rng = StdRng::seed_from_u64(10);
        let dst: Vec<_> = src
            .iter()
            .map(|p| {
                Point3::new(
                    p.x + rng.gen_range(-0.3..0.3),
                    p.y + rng.gen_range(-0.3..0.3),
                    p.z + rng.gen_range(-0.3..0.3),
                )
            })
            .collect();
        let est = kabsch_align(&src, &dst).unwrap();
        let res = |t: &RigidTransform<f64>| {
            src.iter()
                .zip(&dst)
                .map(|(a, b)| (t.transform_point(a) - b).norm_squared())
                .sum::<f64>()
        };
        assert!(res(&est) <= res(&RigidTransform::identity()) + 1e-12);
    }

    #[test]
    fn rotation_validation_rejects_scaled_matrix() {
        let bad = Matrix3::identity() * 1.01;
        assert!(RigidTransform::new(bad, Vector3::zeros()).is_err());
    }
}

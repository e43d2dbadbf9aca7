//! kd-tree spatial index, exact kNN queries, random candidate sampling and
//! random dilation cluster construction.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor2;
use crate::scalar::Real;

const LEAF_SIZE: usize = 16;

/// Balanced 3-D kd-tree over a fixed point set. Queries are exact; ties are
/// broken by lower point index so results match an exhaustive scan.
pub struct KdTree<T: Real> {
    points: Vec<Point3<T>>,
    /// point indices, permuted so each node owns a contiguous range
    order: Vec<u32>,
    nodes: Vec<Node<T>>,
}

struct Node<T> {
    /// range into `order`
    start: u32,
    end: u32,
    axis: u8,
    split: T,
    left: u32,
    right: u32,
}

const NO_CHILD: u32 = u32::MAX;

/// `(squared distance, index)` ordered so the heap keeps the worst candidate on top.
#[derive(Clone, Copy)]
struct Candidate<T>(T, usize);

impl<T: Real> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Real> Eq for Candidate<T> {}
impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Real> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .partial_cmp(&other.0)
            .expect("finite distances")
            .then(self.1.cmp(&other.1))
    }
}

impl<T: Real> KdTree<T> {
    pub fn build(points: &[Point3<T>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        let mut tree = KdTree {
            points: points.to_vec(),
            order: Vec::new(),
            nodes: Vec::new(),
        };
        let n = points.len();
        tree.build_node(&mut order, 0, n, &mut nodes);
        tree.order = order;
        tree.nodes = nodes;
        Ok(tree)
    }

    fn build_node(
        &self,
        order: &mut [u32],
        start: usize,
        end: usize,
        nodes: &mut Vec<Node<T>>,
    ) -> u32 {
        let id = nodes.len() as u32;
        if end - start <= LEAF_SIZE {
            nodes.push(Node {
                start: start as u32,
                end: end as u32,
                axis: 3, // leaf marker
                split: T::zero(),
                left: NO_CHILD,
                right: NO_CHILD,
            });
            return id;
        }
        // split on the widest axis at the median
        let mut lo = [T::cast(f64::INFINITY); 3];
        let mut hi = [T::cast(f64::NEG_INFINITY); 3];
        for &i in &order[start..end] {
            let p = &self.points[i as usize];
            for a in 0..3 {
                let v = p.coords[a];
                if v < lo[a] {
                    lo[a] = v;
                }
                if v > hi[a] {
                    hi[a] = v;
                }
            }
        }
        let mut axis = 0;
        let mut widest = hi[0] - lo[0];
        for a in 1..3 {
            let w = hi[a] - lo[a];
            if w > widest {
                widest = w;
                axis = a;
            }
        }
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            let va = self.points[a as usize].coords[axis];
            let vb = self.points[b as usize].coords[axis];
            va.partial_cmp(&vb).expect("finite coords").then(a.cmp(&b))
        });
        let split = self.points[order[mid] as usize].coords[axis];
        nodes.push(Node {
            start: start as u32,
            end: end as u32,
            axis: axis as u8,
            split,
            left: NO_CHILD,
            right: NO_CHILD,
        });
        let left = self.build_node(order, start, mid, nodes);
        let right = self.build_node(order, mid, end, nodes);
        nodes[id as usize].left = left;
        nodes[id as usize].right = right;
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `min(k, N)` nearest points to `query`, sorted by nondecreasing
    /// distance (ties by lower index). Returns `(index, distance)` pairs.
    pub fn knn(&self, query: &Point3<T>, k: usize) -> Vec<(usize, T)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate<T>> = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut out: Vec<(usize, T)> = heap
            .into_sorted_vec()
            .into_iter()
            .map(|Candidate(d2, i)| (i, d2.sqrt()))
            .collect();
        out.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .expect("finite distances")
                .then(a.0.cmp(&b.0))
        });
        out
    }

    /// Nearest single point: `(index, distance)`.
    pub fn nearest_one(&self, query: &Point3<T>) -> (usize, T) {
        self.knn(query, 1)[0]
    }

    fn search(&self, node: u32, query: &Point3<T>, k: usize, heap: &mut BinaryHeap<Candidate<T>>) {
        let n = &self.nodes[node as usize];
        if n.axis == 3 {
            for &i in &self.order[n.start as usize..n.end as usize] {
                let d2 = (self.points[i as usize] - query).norm_squared();
                let cand = Candidate(d2, i as usize);
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().expect("nonempty heap") {
                    heap.pop();
                    heap.push(cand);
                }
            }
            return;
        }
        let axis = n.axis as usize;
        let delta = query.coords[axis] - n.split;
        let (near, far) = if delta < T::zero() {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, query, k, heap);
        let worst = heap.peek().map(|c| c.0);
        let visit_far = heap.len() < k || delta * delta <= worst.expect("nonempty heap");
        if visit_far {
            self.search(far, query, k, heap);
        }
    }
}

/// Draws `m` distinct candidate indices uniformly without replacement.
/// Deterministic per seed.
pub fn random_sample_candidates<T: Real>(
    cloud: &PointCloud<T>,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} candidates from {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, m).into_vec())
}

/// How the cluster picks `K` members from the `alpha_d * K` candidate pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilationMode {
    /// uniform sample of K pool members (the default strategy)
    Random,
    /// every alpha_d-th neighbor by rank, for ablation comparison
    Stride,
}

/// A sampled center with `K` dilated neighbors and their per-point features.
///
/// `features` has shape `K x (4 + C)`: relative position (3), relative
/// distance (1) and the cloud's feature channels (C).
#[derive(Clone, Debug)]
pub struct Cluster<T: Real> {
    pub center_index: usize,
    pub center: Point3<T>,
    pub neighbor_indices: Vec<usize>,
    /// absolute neighbor positions, row-aligned with `features`
    pub positions: Vec<Point3<T>>,
    pub features: Tensor2<T>,
    /// distance from the center to the farthest pool member
    pub pool_radius: T,
    /// true when the cloud was smaller than `alpha_d * K`
    pub truncated_pool: bool,
}

/// Builds a random dilation cluster: pool = `alpha_d * K` exact nearest
/// neighbors of the center (truncated to N on small clouds), cluster = `K`
/// distinct pool members. Deterministic per seed.
pub fn random_dilation_cluster<T: Real>(
    tree: &KdTree<T>,
    cloud: &PointCloud<T>,
    center_index: usize,
    k: usize,
    alpha_d: usize,
    mode: DilationMode,
    seed: u64,
) -> Result<Cluster<T>> {
    let n = cloud.len();
    if k == 0 || alpha_d == 0 {
        return Err(Error::InvalidArgument("K and alpha_d must be >= 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "cloud of {n} points cannot form clusters of K = {k}"
        )));
    }
    let center = cloud.positions()[center_index];
    let pool_target = alpha_d * k;
    let truncated_pool = n < pool_target;
    let pool = tree.knn(&center, pool_target);
    let pool_radius = pool.last().expect("nonempty pool").1;

    let chosen: Vec<usize> = match mode {
        DilationMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
            // keep members ordered by distance rank for a deterministic layout
            picks.sort_unstable();
            picks
        }
        DilationMode::Stride => (0..k).map(|i| (i * alpha_d).min(pool.len() - 1)).collect(),
    };

    let c_width = cloud.channel_width();
    let mut neighbor_indices = Vec::with_capacity(k);
    let mut positions = Vec::with_capacity(k);
    let mut feat = Vec::with_capacity(k * (4 + c_width));
    for &rank in &chosen {
        let (idx, dist) = pool[rank];
        let p = cloud.positions()[idx];
        let rel = p - center;
        neighbor_indices.push(idx);
        positions.push(p);
        feat.push(rel.x);
        feat.push(rel.y);
        feat.push(rel.z);
        feat.push(dist);
        cloud.push_channels(idx, &mut feat);
    }
    let features = Tensor2::from_vec(k, 4 + c_width, feat)?;
    Ok(Cluster {
        center_index,
        center,
        neighbor_indices,
        positions,
        features,
        pool_radius,
        truncated_pool,
    })
}

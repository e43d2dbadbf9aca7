//! Attentive points aggregation: per-cluster attention weights, keypoint
//! generation, attentive feature maps, saliency uncertainty and top-M
//! keypoint selection.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor2;
use crate::nn::{AttentionHead, LayerSlots, NetParams, ParamSlots};
use crate::scalar::{derive_seed, Real};
use crate::spatial::{random_dilation_cluster, random_sample_candidates, Cluster, DilationMode, KdTree};

/// Sampling/clustering configuration for detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// number of candidate clusters M
    pub candidates: usize,
    /// cluster size K
    pub neighbors: usize,
    /// dilation ratio alpha_d (pool = alpha_d * K nearest neighbors)
    pub dilation_ratio: usize,
    pub dilation: DilationMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            candidates: 512,
            neighbors: 128,
            dilation_ratio: 2,
            dilation: DilationMode::Random,
        }
    }
}

/// Detected keypoints with their attention context, index-aligned with the
/// source clusters.
#[derive(Clone, Debug)]
pub struct KeypointSet<T: Real> {
    pub keypoints: Vec<Point3<T>>,
    /// saliency uncertainties (softplus output, always positive)
    pub saliencies: Vec<T>,
    /// per-cluster attention weights over the K members
    pub attention: Vec<Vec<T>>,
    /// attentive feature maps, K x C_a per cluster
    pub feature_maps: Vec<Tensor2<T>>,
    /// summed global features, C_a per cluster
    pub global_features: Vec<Vec<T>>,
    pub clusters: Vec<Cluster<T>>,
}

impl<T: Real> KeypointSet<T> {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Count of clusters whose candidate pool was truncated by a small cloud.
    pub fn truncated_pool_count(&self) -> usize {
        self.clusters.iter().filter(|c| c.truncated_pool).count()
    }
}

/// Tape nodes of one cluster's detector forward pass.
pub struct DetectorNodes {
    /// attention weights as a `1 x K` row on the simplex
    pub weights_row: NodeId,
    /// generated keypoint, `1 x 3`
    pub keypoint: NodeId,
    /// attentive feature map, `K x C_a`
    pub feature_map: NodeId,
    /// summed global feature, `1 x C_a`
    pub global_feature: NodeId,
    /// saliency uncertainty, `1 x 1`
    pub sigma: NodeId,
}

pub(crate) fn mlp_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    layers: &[LayerSlots],
    mut x: NodeId,
) -> NodeId {
    for layer in layers {
        let w = tape.var(layer.weight);
        let b = tape.var(layer.bias);
        x = tape.linear(x, w, b, layer.activation);
    }
    x
}

/// Records one cluster's detector forward pass on `tape`. The tape
/// environment must be the canonical parameter list for `slots`.
pub fn detector_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    slots: &ParamSlots,
    head: AttentionHead,
    cluster: &Cluster<T>,
) -> DetectorNodes {
    let k = cluster.features.rows();
    let x = tape.constant(cluster.features.clone());
    let fhat = mlp_on_tape(tape, &slots.detector, x);

    let scores = match head {
        AttentionHead::ChannelMax => tape.max_over_cols(fhat),
        AttentionHead::Linear => {
            let att = slots.attention.expect("linear head requires attention slots");
            mlp_on_tape(tape, &[att], fhat)
        }
    };
    let scores_row = tape.transpose(scores);
    let weights_row = tape.softmax_rows(scores_row);

    let mut pos = Tensor2::zeros(k, 3);
    for (r, p) in cluster.positions.iter().enumerate() {
        pos.row_mut(r).copy_from_slice(&[p.x, p.y, p.z]);
    }
    let pos = tape.constant(pos);
    let keypoint = tape.matmul(weights_row, pos);

    let weights_col = tape.transpose(weights_row);
    let feature_map = tape.scale_rows(fhat, weights_col);
    let global_feature = tape.sum_over_rows(feature_map);
    let pre_sigma = mlp_on_tape(tape, &slots.saliency, global_feature);
    let sigma = tape.softplus(pre_sigma);

    DetectorNodes {
        weights_row,
        keypoint,
        feature_map,
        global_feature,
        sigma,
    }
}

/// Samples the M candidate center indices for a detection run.
pub fn sample_centers<T: Real>(
    cloud: &PointCloud<T>,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    random_sample_candidates(cloud, cfg.candidates, derive_seed(seed, u64::MAX))
}

/// Builds clusters around given centers. The per-cluster RNG seed is derived
/// from `seed` and the center index, so construction is
/// schedule-independent.
pub fn build_clusters_from_centers<T: Real>(
    cloud: &PointCloud<T>,
    tree: &KdTree<T>,
    centers: &[usize],
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<Vec<Cluster<T>>> {
    centers
        .par_iter()
        .map(|&center| {
            random_dilation_cluster(
                tree,
                cloud,
                center,
                cfg.neighbors,
                cfg.dilation_ratio,
                cfg.dilation,
                derive_seed(seed, center as u64),
            )
        })
        .collect()
}

/// Samples candidates and builds their clusters in one call.
pub fn build_clusters<T: Real>(
    cloud: &PointCloud<T>,
    tree: &KdTree<T>,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<Vec<Cluster<T>>> {
    let centers = sample_centers(cloud, cfg, seed)?;
    build_clusters_from_centers(cloud, tree, &centers, cfg, seed)
}

/// Runs the detector forward pass over prebuilt clusters.
pub fn detect_from_clusters<T: Real>(
    clusters: Vec<Cluster<T>>,
    params: &NetParams<T>,
) -> Result<KeypointSet<T>> {
    let env = params.param_env();
    let slots = ParamSlots::of(&params.config);
    let head = params.config.attention_head;

    struct ClusterOut<T: Real> {
        keypoint: Point3<T>,
        sigma: T,
        weights: Vec<T>,
        feature_map: Tensor2<T>,
        global_feature: Vec<T>,
    }

    let outs: Vec<ClusterOut<T>> = clusters
        .par_iter()
        .map(|cluster| {
            let mut tape = Tape::new(&env);
            let nodes = detector_graph(&mut tape, &slots, head, cluster);
            let kp = tape.value(nodes.keypoint).row(0).to_vec();
            ClusterOut {
                keypoint: Point3::new(kp[0], kp[1], kp[2]),
                sigma: tape.value(nodes.sigma).item(),
                weights: tape.value(nodes.weights_row).row(0).to_vec(),
                feature_map: tape.value(nodes.feature_map).clone(),
                global_feature: tape.value(nodes.global_feature).row(0).to_vec(),
            }
        })
        .collect();

    let mut set = KeypointSet {
        keypoints: Vec::with_capacity(outs.len()),
        saliencies: Vec::with_capacity(outs.len()),
        attention: Vec::with_capacity(outs.len()),
        feature_maps: Vec::with_capacity(outs.len()),
        global_features: Vec::with_capacity(outs.len()),
        clusters,
    };
    for out in outs {
        set.keypoints.push(out.keypoint);
        set.saliencies.push(out.sigma);
        set.attention.push(out.weights);
        set.feature_maps.push(out.feature_map);
        set.global_features.push(out.global_feature);
    }
    Ok(set)
}

/// Full detection: sample candidates, build random dilation clusters, run
/// the attentive aggregation network.
///
/// Requires normal/curvature channels on the cloud.
pub fn detect<T: Real>(
    cloud: &PointCloud<T>,
    params: &NetParams<T>,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<KeypointSet<T>> {
    if !cloud.has_features() {
        return Err(Error::MissingChannels);
    }
    if cloud.channel_width() != params.config.input_channels {
        return Err(Error::Shape(format!(
            "cloud channels {} do not match network input channels {}",
            cloud.channel_width(),
            params.config.input_channels
        )));
    }
    let tree = KdTree::build(cloud.positions())?;
    let clusters = build_clusters(cloud, &tree, cfg, seed)?;
    detect_from_clusters(clusters, params)
}

/// Keeps the `m_out` keypoints with smallest saliency uncertainty, ordered
/// by uncertainty and tie-broken by cluster index. No non-maximum
/// suppression is applied.
pub fn select_keypoints<T: Real>(set: &KeypointSet<T>, m_out: usize) -> Result<KeypointSet<T>> {
    if m_out > set.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m_out} keypoints from {}",
            set.len()
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.saliencies[a]
            .partial_cmp(&set.saliencies[b])
            .expect("finite saliencies")
            .then(a.cmp(&b))
    });
    order.truncate(m_out);
    Ok(KeypointSet {
        keypoints: order.iter().map(|&i| set.keypoints[i]).collect(),
        saliencies: order.iter().map(|&i| set.saliencies[i]).collect(),
        attention: order.iter().map(|&i| set.attention[i].clone()).collect(),
        feature_maps: order.iter().map(|&i| set.feature_maps[i].clone()).collect(),
        global_features: order
            .iter()
            .map(|&i| set.global_features[i].clone())
            .collect(),
        clusters: order.iter().map(|&i| set.clusters[i].clone()).collect(),
    })
}

const KEYPOINT_MAGIC: &[u8; 4] = b"SRKP";
const KEYPOINT_VERSION: u32 = 1;

/// Writes one `x,y,z,sigma` CSV row per keypoint.
pub fn write_keypoints_csv<T: Real>(set: &KeypointSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        let mut w = w;
        writeln!(w, "x,y,z,sigma")?;
        for (p, s) in set.keypoints.iter().zip(&set.saliencies) {
            writeln!(w, "{},{},{},{}", p.x, p.y, p.z, s)?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

/// Versioned little-endian binary dump: per record `x, y, z, sigma` as f32.
pub fn write_keypoints_bin<T: Real>(set: &KeypointSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        let mut w = w;
        w.write_all(KEYPOINT_MAGIC)?;
        w.write_all(&KEYPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(set.len() as u32).to_le_bytes())?;
        for (p, s) in set.keypoints.iter().zip(&set.saliencies) {
            for v in [p.x, p.y, p.z, *s] {
                w.write_all(&v.as_f32().to_le_bytes())?;
            }
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

/// Reads the binary keypoint dump back as `(position, sigma)` records.
pub fn read_keypoints_bin(path: impl AsRef<Path>) -> Result<Vec<(Point3<f32>, f32)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 12];
    r.read_exact(&mut header)
        .map_err(|_| Error::Parse { offset: 0, message: "truncated keypoint header".into() })?;
    if &header[0..4] != KEYPOINT_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad keypoint magic".into() });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != KEYPOINT_VERSION {
        return Err(Error::Parse { offset: 4, message: format!("unsupported version {version}") });
    }
    let count = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let mut out = Vec::with_capacity(count);
    let mut buf = [0u8; 16];
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|_| Error::Parse {
            offset: 12 + i * 16,
            message: "truncated keypoint record".into(),
        })?;
        let f = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
        out.push((Point3::new(f(0), f(4), f(8)), f(12)));
    }
    Ok(out)
}

//! Descriptor generation: per-cluster fusion of individual point features,
//! a pooled global cluster feature and the detector's attentive feature map.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor2;
use crate::nn::{NetParams, ParamSlots};
use crate::scalar::Real;
use crate::spatial::Cluster;

use crate::detector::mlp_on_tape;

/// Fixed-length descriptors, index-aligned with their keypoint set.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet<T: Real> {
    /// M x d descriptor matrix
    pub descriptors: Tensor2<T>,
}

impl<T: Real> DescriptorSet<T> {
    pub fn len(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn descriptor(&self, i: usize) -> &[T] {
        self.descriptors.row(i)
    }
}

/// Records one cluster's descriptor forward pass on `tape` and returns the
/// `1 x d` descriptor node. `feature_map` is the detector's attentive map
/// node for the same cluster.
pub fn descriptor_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    slots: &ParamSlots,
    params_cfg: &crate::nn::NetConfig,
    cluster: &Cluster<T>,
    feature_map: NodeId,
) -> NodeId {
    let k = cluster.features.rows();
    let x = tape.constant(cluster.features.clone());
    let point_features = mlp_on_tape(tape, &slots.descriptor_point, x);
    let global = tape.max_over_rows(point_features);
    let global_rows = tape.repeat_row(global, k);

    let attentive = if params_cfg.use_attentive_map {
        feature_map
    } else {
        // ablation: zero out the attentive channel
        tape.constant(Tensor2::zeros(k, params_cfg.feature_width))
    };
    let fused = tape.concat_cols(&[point_features, global_rows, attentive]);
    let per_point = mlp_on_tape(tape, &slots.descriptor_fuse, fused);
    let mut descriptor = tape.max_over_rows(per_point);

    if params_cfg.descriptor_output_scale != 1.0 {
        descriptor = tape.mul_scalar(descriptor, T::cast(params_cfg.descriptor_output_scale));
    }
    if params_cfg.l2_normalize {
        let sq = tape.mul(descriptor, descriptor);
        let norm_sq = tape.sum_all(sq);
        let shifted = tape.add_scalar(norm_sq, T::cast(1e-12));
        let norm = tape.sqrt_guarded(shifted);
        descriptor = tape.div_by_scalar(descriptor, norm);
    }
    descriptor
}

/// Generates descriptors for index-aligned clusters and attentive feature
/// maps (both produced by the detector).
pub fn describe<T: Real>(
    clusters: &[Cluster<T>],
    feature_maps: &[Tensor2<T>],
    params: &NetParams<T>,
) -> Result<DescriptorSet<T>> {
    if clusters.len() != feature_maps.len() {
        return Err(Error::Shape(format!(
            "{} clusters vs {} feature maps",
            clusters.len(),
            feature_maps.len()
        )));
    }
    let env = params.param_env();
    let slots = ParamSlots::of(&params.config);
    let dim = params.config.descriptor_dim;

    let rows: Vec<Vec<T>> = clusters
        .par_iter()
        .zip(feature_maps.par_iter())
        .map(|(cluster, fmap)| {
            let mut tape = Tape::new(&env);
            let fmap_node = tape.constant(fmap.clone());
            let desc = descriptor_graph(&mut tape, &slots, &params.config, cluster, fmap_node);
            tape.value(desc).row(0).to_vec()
        })
        .collect();

    let mut descriptors = Tensor2::zeros(rows.len(), dim);
    for (r, row) in rows.iter().enumerate() {
        descriptors.row_mut(r).copy_from_slice(row);
    }
    Ok(DescriptorSet { descriptors })
}

const DESCRIPTOR_MAGIC: &[u8; 4] = b"SRDS";
const DESCRIPTOR_VERSION: u32 = 1;

/// Binary descriptor dump: header carries `M` and `d`, then `M * d`
/// little-endian f32 values, one record per descriptor.
pub fn write_descriptors_bin<T: Real>(
    set: &DescriptorSet<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        let mut w = w;
        w.write_all(DESCRIPTOR_MAGIC)?;
        w.write_all(&DESCRIPTOR_VERSION.to_le_bytes())?;
        w.write_all(&(set.len() as u32).to_le_bytes())?;
        w.write_all(&(set.dim() as u32).to_le_bytes())?;
        for &v in set.descriptors.data() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_descriptors_bin(path: impl AsRef<Path>) -> Result<DescriptorSet<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::Parse { offset: 0, message: "truncated descriptor header".into() })?;
    if &header[0..4] != DESCRIPTOR_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad descriptor magic".into() });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != DESCRIPTOR_VERSION {
        return Err(Error::Parse { offset: 4, message: format!("unsupported version {version}") });
    }
    let m = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
    let mut buf = vec![0u8; m * d * 4];
    r.read_exact(&mut buf).map_err(|_| Error::Parse {
        offset: 16,
        message: "truncated descriptor data".into(),
    })?;
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(DescriptorSet {
        descriptors: Tensor2::from_vec(m, d, data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use crate::detector::{detect, DetectorConfig};
    use crate::nn::NetConfig;
    use crate::spatial::DilationMode;
    use nalgebra::{Point3, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        let normals = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0).normalize())
            .collect();
        let curvatures = (0..n).map(|_| rng.gen_range(0.0..0.33)).collect();
        PointCloud::with_features(positions, normals, curvatures).unwrap()
    }

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            candidates: 8,
            neighbors: 12,
            dilation_ratio: 2,
            dilation: DilationMode::Random,
        }
    }

    fn detect_describe(
        seed: u64,
        net: &NetConfig,
    ) -> (crate::detector::KeypointSet<f64>, DescriptorSet<f64>) {
        let cloud = test_cloud(256, seed);
        let params = NetParams::init(net, 77).unwrap();
        let set = detect(&cloud, &params, &cfg(), seed).unwrap();
        let descs = describe(&set.clusters, &set.feature_maps, &params).unwrap();
        (set, descs)
    }

    #[test]
    fn descriptor_shape_and_finiteness() {
        let (set, descs) = detect_describe(1, &NetConfig::default());
        assert_eq!(descs.len(), set.len());
        assert_eq!(descs.dim(), 128);
        assert!(descs.descriptors.all_finite());
    }

    #[test]
    fn joint_row_permutation_leaves_descriptor_unchanged() {
        let cloud = test_cloud(256, 2);
        let params = NetParams::init(&NetConfig::default(), 3).unwrap();
        let set = detect(&cloud, &params, &cfg(), 5).unwrap();
        let cluster = set.clusters[0].clone();
        let fmap = set.feature_maps[0].clone();
        let base = describe(&[cluster.clone()], &[fmap.clone()], &params).unwrap();

        // reverse the rows of both the cluster and the attentive map
        let k = cluster.features.rows();
        let perm: Vec<usize> = (0..k).rev().collect();
        let permute = |t: &Tensor2<f64>| {
            let mut out = Tensor2::zeros(t.rows(), t.cols());
            for (r, &src) in perm.iter().enumerate() {
                out.row_mut(r).copy_from_slice(t.row(src));
            }
            out
        };
        let mut permuted = cluster.clone();
        permuted.features = permute(&cluster.features);
        permuted.positions = perm.iter().map(|&i| cluster.positions[i]).collect();
        permuted.neighbor_indices = perm.iter().map(|&i| cluster.neighbor_indices[i]).collect();
        let permuted_fmap = permute(&fmap);

        let swapped = describe(&[permuted], &[permuted_fmap], &params).unwrap();
        for (a, b) in base
            .descriptors
            .data()
            .iter()
            .zip(swapped.descriptors.data())
        {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_clusters_get_identical_descriptors() {
        let cloud = test_cloud(256, 3);
        let params = NetParams::init(&NetConfig::default(), 4).unwrap();
        let set = detect(&cloud, &params, &cfg(), 6).unwrap();
        let twice = describe(
            &[set.clusters[0].clone(), set.clusters[0].clone()],
            &[set.feature_maps[0].clone(), set.feature_maps[0].clone()],
            &params,
        )
        .unwrap();
        assert_eq!(twice.descriptor(0), twice.descriptor(1));
    }

    #[test]
    fn attentive_map_ablation_changes_output() {
        let with = detect_describe(4, &NetConfig::default());
        let without = detect_describe(
            4,
            &NetConfig {
                use_attentive_map: false,
                ..NetConfig::default()
            },
        );
        assert_ne!(
            with.1.descriptors.data(),
            without.1.descriptors.data(),
            "removing the attentive map must alter descriptors"
        );
    }

    #[test]
    fn translation_leaves_descriptors_bitwise_identical() {
        // cluster features are relative, so a pure translation with the same
        // membership produces the same descriptor bits
        let cloud = test_cloud(256, 5);
        let params = NetParams::init(&NetConfig::default(), 5).unwrap();
        let set = detect(&cloud, &params, &cfg(), 9).unwrap();
        let descs = describe(&set.clusters, &set.feature_maps, &params).unwrap();

        let offset = Vector3::new(10.0, -20.0, 30.0);
        let shifted: Vec<Cluster<f64>> = set
            .clusters
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.center += offset;
                for p in &mut c.positions {
                    *p += offset;
                }
                c
            })
            .collect();
        let descs2 = describe(&shifted, &set.feature_maps, &params).unwrap();
        assert_eq!(descs.descriptors, descs2.descriptors);
    }

    #[test]
    fn l2_normalize_flag_yields_unit_norm() {
        let (_, descs) = detect_describe(
            6,
            &NetConfig {
                l2_normalize: true,
                ..NetConfig::default()
            },
        );
        for i in 0..descs.len() {
            let norm: f64 = descs.descriptor(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn misaligned_inputs_error() {
        let cloud = test_cloud(256, 7);
        let params = NetParams::init(&NetConfig::default(), 7).unwrap();
        let set = detect(&cloud, &params, &cfg(), 10).unwrap();
        assert!(describe(&set.clusters, &set.feature_maps[1..], &params).is_err());
    }

    #[test]
    fn descriptor_dump_round_trip() {
        let (_, descs) = detect_describe(8, &NetConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.bin");
        write_descriptors_bin(&descs, &path).unwrap();
        let loaded = read_descriptors_bin(&path).unwrap();
        assert_eq!(loaded.len(), descs.len());
        assert_eq!(loaded.dim(), descs.dim());
        for (a, b) in loaded
            .descriptors
            .data()
            .iter()
            .zip(descs.descriptors.data())
        {
            assert_eq!(*a, *b as f32);
        }
    }
}

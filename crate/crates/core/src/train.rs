//! Two-stage training: the detector first (chamfer + point-to-point), then
//! the descriptor with the matching loss while the detector fine-tunes.
//!
//! Each step builds per-cluster forward graphs (in parallel), joins their
//! outputs in a small loss graph, and chains the backward passes. Gradient
//! reduction is chunk-ordered, so results are identical across thread
//! counts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::cloud::{PointCloud, RigidTransform};
use crate::detector::{build_clusters, detector_graph, DetectorConfig, DetectorNodes};
use crate::descriptor::descriptor_graph;
use crate::error::{Error, Result};
use crate::losses::{
    chamfer_loss_graph, matching_loss_graph, point_to_point_graph, MatchingConfig, SideNodes,
};
use crate::nn::sgd::SgdMomentum;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor2;
use crate::nn::{Gradients, NetParams, ParamSlots};
use crate::scalar::{derive_seed, Real};
use crate::spatial::{Cluster, KdTree};

/// deterministic chunk size for gradient reduction
const REDUCE_CHUNK: usize = 32;

/// A training pair with feature-attached clouds and prebuilt spatial
/// indices.
pub struct TrainingPair<T: Real> {
    pub source: PointCloud<T>,
    pub target: PointCloud<T>,
    pub gt: RigidTransform<T>,
    source_tree: KdTree<T>,
    target_tree: KdTree<T>,
}

impl<T: Real> TrainingPair<T> {
    pub fn new(source: PointCloud<T>, target: PointCloud<T>, gt: RigidTransform<T>) -> Result<Self> {
        if !source.has_features() || !target.has_features() {
            return Err(Error::MissingChannels);
        }
        let source_tree = KdTree::build(source.positions())?;
        let target_tree = KdTree::build(target.positions())?;
        Ok(TrainingPair {
            source,
            target,
            gt,
            source_tree,
            target_tree,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_pairs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// epochs between checkpoint callbacks (0 = only the final one)
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            stage1_epochs: 20,
            stage2_epochs: 20,
            batch_pairs: 1,
            learning_rate: 0.001,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainSchedule {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        TrainSchedule {
            stage1_epochs: cfg.training.stage1_epochs,
            stage2_epochs: cfg.training.stage2_epochs,
            batch_pairs: cfg.training.batch_pairs,
            learning_rate: cfg.training.learning_rate,
            momentum: cfg.training.momentum,
            seed: cfg.run.seed,
            checkpoint_every: cfg.training.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions<T: Real> {
    pub detector: DetectorConfig,
    pub matching: MatchingConfig<T>,
    pub lambda_p2p: T,
    /// keep chamfer + point-to-point active during stage 2
    pub stage2_keep_detector_loss: bool,
    /// freeze detector parameters during stage 2
    pub freeze_detector: bool,
}

impl<T: Real> Default for TrainOptions<T> {
    fn default() -> Self {
        TrainOptions {
            detector: DetectorConfig::default(),
            matching: MatchingConfig::default(),
            lambda_p2p: T::one(),
            stage2_keep_detector_loss: false,
            freeze_detector: false,
        }
    }
}

impl<T: Real> TrainOptions<T> {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        TrainOptions {
            detector: cfg.detector.clone(),
            matching: MatchingConfig {
                temperature: T::cast(cfg.loss.temperature),
                sigma_max: T::cast(cfg.loss.sigma_max),
                use_weights: cfg.loss.use_weights,
            },
            lambda_p2p: T::cast(cfg.loss.lambda_p2p),
            stage2_keep_detector_loss: cfg.loss.stage2_keep_detector_loss,
            freeze_detector: cfg.training.freeze_detector,
        }
    }
}

/// One optimizer-step log row.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub chamfer: f64,
    pub p2p: f64,
    pub matching: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub stage: u8,
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub aborted: bool,
    /// largest detector-parameter gradient magnitude seen (fine-tuning probe)
    pub detector_grad_max: f64,
}

/// Writes the per-step loss curve as CSV.
pub fn write_loss_csv(steps: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        let mut w = w;
        writeln!(w, "step,stage,chamfer,p2p,matching,total")?;
        for s in steps {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.step, s.stage, s.chamfer, s.p2p, s.matching, s.total
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

struct ClusterForward<'e, T: Real> {
    tape: Tape<'e, T>,
    nodes: DetectorNodes,
    descriptor: Option<NodeId>,
}

struct SideForward<'e, T: Real> {
    forwards: Vec<ClusterForward<'e, T>>,
    keypoints: Tensor2<T>,
    sigmas: Tensor2<T>,
    descriptors: Option<Tensor2<T>>,
}

fn forward_side<'e, T: Real>(
    env: &'e [Tensor2<T>],
    slots: &ParamSlots,
    params: &NetParams<T>,
    clusters: &[Cluster<T>],
    with_descriptors: bool,
) -> SideForward<'e, T> {
    let head = params.config.attention_head;
    let forwards: Vec<ClusterForward<'e, T>> = clusters
        .par_iter()
        .map(|cluster| {
            let mut tape = Tape::new(env);
            let nodes = detector_graph(&mut tape, slots, head, cluster);
            let descriptor = with_descriptors.then(|| {
                descriptor_graph(&mut tape, slots, &params.config, cluster, nodes.feature_map)
            });
            ClusterForward {
                tape,
                nodes,
                descriptor,
            }
        })
        .collect();

    let m = forwards.len();
    let mut keypoints = Tensor2::zeros(m, 3);
    let mut sigmas = Tensor2::zeros(m, 1);
    let mut descriptors =
        with_descriptors.then(|| Tensor2::zeros(m, params.config.descriptor_dim));
    for (i, fwd) in forwards.iter().enumerate() {
        keypoints
            .row_mut(i)
            .copy_from_slice(fwd.tape.value(fwd.nodes.keypoint).row(0));
        sigmas.set(i, 0, fwd.tape.value(fwd.nodes.sigma).item());
        if let (Some(buf), Some(desc)) = (descriptors.as_mut(), fwd.descriptor) {
            buf.row_mut(i).copy_from_slice(fwd.tape.value(desc).row(0));
        }
    }
    SideForward {
        forwards,
        keypoints,
        sigmas,
        descriptors,
    }
}

/// Pulls the per-cluster seed gradients out of the loss-graph environment
/// gradients and runs every cluster backward, reducing parameter gradients
/// in fixed chunk order.
fn backward_side<T: Real>(
    side: &SideForward<'_, T>,
    kp_grads: &Tensor2<T>,
    sigma_grads: &Tensor2<T>,
    desc_grads: Option<&Tensor2<T>>,
    n_slots: usize,
) -> Result<Vec<Tensor2<T>>> {
    let chunk_results: Vec<Result<Vec<Tensor2<T>>>> = side
        .forwards
        .par_chunks(REDUCE_CHUNK)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let mut acc: Option<Vec<Tensor2<T>>> = None;
            for (off, fwd) in chunk.iter().enumerate() {
                let i = chunk_idx * REDUCE_CHUNK + off;
                let mut seeds = vec![
                    (
                        fwd.nodes.keypoint,
                        Tensor2::row_vector(kp_grads.row(i).to_vec()),
                    ),
                    (fwd.nodes.sigma, Tensor2::scalar(sigma_grads.get(i, 0))),
                ];
                if let (Some(desc), Some(dg)) = (fwd.descriptor, desc_grads) {
                    seeds.push((desc, Tensor2::row_vector(dg.row(i).to_vec())));
                }
                let grads = fwd.tape.backward_seeded(&seeds)?;
                match &mut acc {
                    Some(total) => {
                        for (t, g) in total.iter_mut().zip(&grads) {
                            t.add_assign(g);
                        }
                    }
                    None => acc = Some(grads),
                }
            }
            Ok(acc.expect("nonempty chunk"))
        })
        .collect();

    let mut total: Vec<Tensor2<T>> = (0..n_slots).map(|_| Tensor2::zeros(0, 0)).collect();
    let mut initialized = false;
    for chunk in chunk_results {
        let chunk = chunk?;
        if !initialized {
            total = chunk;
            initialized = true;
        } else {
            for (t, g) in total.iter_mut().zip(&chunk) {
                t.add_assign(g);
            }
        }
    }
    Ok(total)
}

struct StepOutcome<T: Real> {
    grads: Gradients<T>,
    chamfer: f64,
    p2p: f64,
    matching: f64,
    total: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_step<T: Real>(
    params: &NetParams<T>,
    slots: &ParamSlots,
    pair: &TrainingPair<T>,
    opts: &TrainOptions<T>,
    stage: u8,
    seed: u64,
) -> Result<StepOutcome<T>> {
    let clusters_s = build_clusters(
        &pair.source,
        &pair.source_tree,
        &opts.detector,
        derive_seed(seed, 0),
    )?;
    let clusters_t = build_clusters(
        &pair.target,
        &pair.target_tree,
        &opts.detector,
        derive_seed(seed, 1),
    )?;

    let env = params.param_env();
    let with_desc = stage == 2;
    let src = forward_side(&env, slots, params, &clusters_s, with_desc);
    let tgt = forward_side(&env, slots, params, &clusters_t, with_desc);
    for side in [&src, &tgt] {
        let finite = side.keypoints.all_finite()
            && side.sigmas.all_finite()
            && side.descriptors.as_ref().is_none_or(|d| d.all_finite());
        if !finite {
            return Err(Error::Numerical("non-finite network outputs".into()));
        }
    }

    // loss graph over the stacked cluster outputs
    let mut loss_env = vec![
        src.keypoints.clone(),
        src.sigmas.clone(),
        tgt.keypoints.clone(),
        tgt.sigmas.clone(),
    ];
    if with_desc {
        loss_env.push(src.descriptors.clone().expect("stage 2 descriptors"));
        loss_env.push(tgt.descriptors.clone().expect("stage 2 descriptors"));
    }

    let mut tape = Tape::new(&loss_env);
    let kp_s = tape.var(0);
    let sig_s = tape.var(1);
    let kp_t = tape.var(2);
    let sig_t = tape.var(3);

    let zero = tape.constant(Tensor2::scalar(T::zero()));
    let mut chamfer_node = zero;
    let mut p2p_node = zero;
    let mut matching_node = zero;

    let detector_losses = stage == 1 || opts.stage2_keep_detector_loss;
    if detector_losses {
        chamfer_node = chamfer_loss_graph(&mut tape, kp_s, sig_s, kp_t, sig_t, &pair.gt);
        let p2p_s = point_to_point_graph(&mut tape, kp_s, &pair.source, &pair.source_tree);
        let p2p_t = point_to_point_graph(&mut tape, kp_t, &pair.target, &pair.target_tree);
        let p2p_sum = tape.add(p2p_s, p2p_t);
        p2p_node = tape.mul_scalar(p2p_sum, opts.lambda_p2p);
    }
    if with_desc {
        let desc_s = tape.var(4);
        let desc_t = tape.var(5);
        matching_node = matching_loss_graph(
            &mut tape,
            SideNodes {
                keypoints: kp_s,
                sigmas: sig_s,
                descriptors: desc_s,
            },
            SideNodes {
                keypoints: kp_t,
                sigmas: sig_t,
                descriptors: desc_t,
            },
            &pair.gt,
            &opts.matching,
        );
    }
    let partial = tape.add(chamfer_node, p2p_node);
    let total_node = tape.add(partial, matching_node);

    let chamfer = tape.value(chamfer_node).item().as_f64();
    let p2p = tape.value(p2p_node).item().as_f64();
    let matching = tape.value(matching_node).item().as_f64();
    let total = tape.value(total_node).item().as_f64();
    if !total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {total}")));
    }

    let loss_grads = tape.backward(total_node)?;
    let n_slots = env.len();
    let desc_grad_s = loss_grads.get(4);
    let desc_grad_t = loss_grads.get(5);
    let grads_s = backward_side(&src, &loss_grads[0], &loss_grads[1], desc_grad_s, n_slots)?;
    let grads_t = backward_side(&tgt, &loss_grads[2], &loss_grads[3], desc_grad_t, n_slots)?;

    let mut tensors = grads_s;
    for (a, b) in tensors.iter_mut().zip(&grads_t) {
        a.add_assign(b);
    }
    let grads = Gradients { tensors };
    if !grads.all_finite() {
        return Err(Error::Numerical("non-finite gradients".into()));
    }
    Ok(StepOutcome {
        grads,
        chamfer,
        p2p,
        matching,
        total,
    })
}

fn detector_slot_indices(slots: &ParamSlots) -> Vec<usize> {
    let mut out = Vec::new();
    for layer in slots
        .detector
        .iter()
        .chain(slots.attention.iter())
        .chain(slots.saliency.iter())
    {
        out.push(layer.weight);
        out.push(layer.bias);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_stage<T: Real>(
    mut params: NetParams<T>,
    pairs: &[TrainingPair<T>],
    schedule: &TrainSchedule,
    opts: &TrainOptions<T>,
    stage: u8,
    epochs: usize,
    step_offset: usize,
    mut on_checkpoint: impl FnMut(usize, &NetParams<T>) -> Result<()>,
) -> Result<(NetParams<T>, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let slots = ParamSlots::of(&params.config);
    let detector_slots = detector_slot_indices(&slots);
    let mut opt = SgdMomentum::new(
        &params,
        T::cast(schedule.learning_rate),
        T::cast(schedule.momentum),
    );
    let mut report = TrainReport {
        stage,
        ..TrainReport::default()
    };
    let mut step = step_offset;
    // params verified by the latest finite loss, before any later update
    let mut last_good = params.clone();

    for epoch in 0..epochs {
        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        let mut batch: Option<Gradients<T>> = None;
        let mut batch_len = 0usize;

        for (pair_idx, pair) in pairs.iter().enumerate() {
            let seed = derive_seed(
                schedule.seed,
                (stage as u64) << 48 | (epoch as u64) << 24 | pair_idx as u64,
            );
            let outcome = match train_step(&params, &slots, pair, opts, stage, seed) {
                Ok(o) => o,
                Err(Error::Numerical(msg)) => {
                    eprintln!("aborting stage {stage}: {msg}");
                    report.aborted = true;
                    return Ok((last_good, report));
                }
                Err(e) => return Err(e),
            };
            last_good = params.clone();

            for &slot in &detector_slots {
                let g = outcome.grads.tensors[slot].max_abs().as_f64();
                if g > report.detector_grad_max {
                    report.detector_grad_max = g;
                }
            }

            report.steps.push(StepRecord {
                step,
                stage,
                chamfer: outcome.chamfer,
                p2p: outcome.p2p,
                matching: outcome.matching,
                total: outcome.total,
            });
            epoch_sum += outcome.total;
            epoch_count += 1;
            step += 1;

            match &mut batch {
                Some(acc) => acc.accumulate(&outcome.grads),
                None => batch = Some(outcome.grads),
            }
            batch_len += 1;
            let last_pair = pair_idx + 1 == pairs.len();
            if batch_len == schedule.batch_pairs || last_pair {
                let mut grads = batch.take().expect("accumulated batch");
                if batch_len > 1 {
                    let inv = T::cast_usize(batch_len).recip();
                    for t in &mut grads.tensors {
                        for v in t.data_mut() {
                            *v *= inv;
                        }
                    }
                }
                if stage == 2 && opts.freeze_detector {
                    for &slot in &detector_slots {
                        for v in grads.tensors[slot].data_mut() {
                            *v = T::zero();
                        }
                    }
                }
                opt.step(&mut params, &grads)?;
                batch_len = 0;
            }
        }

        report.epoch_mean_loss.push(epoch_sum / epoch_count as f64);
        if schedule.checkpoint_every > 0 && (epoch + 1) % schedule.checkpoint_every == 0 {
            on_checkpoint(epoch + 1, &params)?;
        }
    }
    Ok((params, report))
}

/// Stage 1: detector training with chamfer + point-to-point losses.
pub fn train_stage1<T: Real>(
    params: NetParams<T>,
    pairs: &[TrainingPair<T>],
    schedule: &TrainSchedule,
    opts: &TrainOptions<T>,
    on_checkpoint: impl FnMut(usize, &NetParams<T>) -> Result<()>,
) -> Result<(NetParams<T>, TrainReport)> {
    run_stage(
        params,
        pairs,
        schedule,
        opts,
        1,
        schedule.stage1_epochs,
        0,
        on_checkpoint,
    )
}

/// Stage 2: descriptor training with the matching loss; the detector keeps
/// fine-tuning unless frozen.
pub fn train_stage2<T: Real>(
    params: NetParams<T>,
    pairs: &[TrainingPair<T>],
    schedule: &TrainSchedule,
    opts: &TrainOptions<T>,
    on_checkpoint: impl FnMut(usize, &NetParams<T>) -> Result<()>,
) -> Result<(NetParams<T>, TrainReport)> {
    run_stage(
        params,
        pairs,
        schedule,
        opts,
        2,
        schedule.stage2_epochs,
        schedule.stage1_epochs * pairs.len(),
        on_checkpoint,
    )
}

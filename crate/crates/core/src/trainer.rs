//! Toy SGD loop wiring the selector, the scoring stacks, and the losses
//! into an end-to-end trainer over synthetic scenes.
//!
//! Clusters depend only on heatmaps and proposals, so they are computed
//! once per image and cached, together with the base-stage labels (every
//! cluster member is a pseudo GT there, scores play no role). Refinement
//! labels are reselected every iteration from the live scores. Images are
//! processed in ascending image-id order and batch gradients averaged in
//! that order, so runs are bit-reproducible.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, BBox};
use crate::hgps::{
    assign_labels, build_clusters, select_pseudo_gt_ir, select_pseudo_gt_wsbdn, AssignedLabels,
    ClusterSet, HgpsConfig, StageScores,
};
use crate::metrics::{corloc, mean_ap, ApInterpolation, Detection, GroundTruth, TopBox};
use crate::midn::{
    forward_ir, forward_wsbdn, grad_dthcp, loss_dthcp, sgd_step, BoxLevelImageLabel, DthcpModel,
    DthcpSupervision, FeatureMatrix, HeadRole, LinearHead,
};
use crate::synth::{SceneBundle, SplitMix64};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by `lr_decay_factor` at the end of this
    /// 1-based epoch; 0 disables the decay.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    /// Seed for head initialization.
    pub seed: u64,
    pub use_cls_ign: bool,
    /// Evaluate mAP every N iterations; 0 evaluates at epoch ends only.
    pub eval_every: usize,
    pub nms_iou: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.05,
            lr_decay_epoch: 20,
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            seed: 0,
            use_cls_ign: true,
            eval_every: 0,
            nms_iou: 0.3,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be positive".into(),
            ));
        }
        // lr = 0 is allowed: the update degenerates to the identity
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "nms iou must be in (0,1), got {}",
                self.nms_iou
            )));
        }
        Ok(())
    }
}

/// An image with everything static precomputed.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub image_id: usize,
    pub num_classes: usize,
    /// Raw proposals followed by the cluster set's synthetic boxes.
    pub all_boxes: Vec<BBox>,
    pub num_proposals: usize,
    pub features: FeatureMatrix,
    pub clusters: ClusterSet,
    /// Base-stage labels: every cluster member is a pseudo GT, weight 1.
    pub base_labels: AssignedLabels,
    pub image_label: BoxLevelImageLabel,
    pub ground_truth: Vec<GroundTruth>,
}

/// Build clusters once, append the synthetic boxes as extra feature rows,
/// and freeze the base-stage supervision.
pub fn prepare_scene(bundle: &SceneBundle, hgps_cfg: &HgpsConfig) -> Result<PreparedScene> {
    let clusters = build_clusters(
        &bundle.heatmaps,
        &bundle.image_labels,
        &bundle.proposals,
        (bundle.scene.width, bundle.scene.height),
        hgps_cfg,
    )?;
    let mut all_boxes = bundle.proposals.clone();
    all_boxes.extend_from_slice(clusters.extra_boxes());
    let features = FeatureMatrix::new(bundle.features_for(&all_boxes))?;
    let base_gts = select_pseudo_gt_wsbdn(&clusters);
    let base_labels = assign_labels(&all_boxes, &base_gts, hgps_cfg);
    Ok(PreparedScene {
        image_id: bundle.image_id,
        num_classes: bundle.image_labels.len(),
        num_proposals: bundle.proposals.len(),
        all_boxes,
        features,
        clusters,
        base_labels,
        image_label: bundle.box_level_label(),
        ground_truth: bundle.ground_truth.clone(),
    })
}

/// Xavier-uniform weights, zero biases, drawn from a SplitMix64 stream in
/// head order (cls, wgt, refinement stages ascending).
pub fn init_model(
    feature_dim: usize,
    num_classes: usize,
    stages: usize,
    seed: u64,
) -> Result<DthcpModel> {
    let out = num_classes + 1;
    let mut rng = SplitMix64::new(seed);
    let limit = (6.0 / (feature_dim + out) as f64).sqrt();
    let mut make = |role: HeadRole| -> Result<LinearHead> {
        let weight =
            Array2::from_shape_fn((feature_dim, out), |_| rng.uniform(-limit, limit));
        LinearHead::new(role, weight, ndarray::Array1::zeros(out))
    };
    Ok(DthcpModel {
        cls: make(HeadRole::Cls)?,
        wgt: make(HeadRole::Wgt)?,
        ir: (1..=stages)
            .map(|k| make(HeadRole::Ir(k)))
            .collect::<Result<_>>()?,
    })
}

/// One row of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Present on evaluation points.
    pub map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DthcpModel,
    pub records: Vec<TrainRecord>,
    pub iterations: usize,
    pub final_map: f64,
    pub final_corloc: f64,
}

/// Detections for one image from the last refinement stage: per class,
/// score every raw proposal and keep the NMS survivors. Synthetic cluster
/// boxes are scored rows but never emitted as detections.
pub fn detections_for_scene(
    scene: &PreparedScene,
    model: &DthcpModel,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let head = model
        .ir
        .last()
        .ok_or_else(|| Error::InvalidConfig("model has no refinement stage".into()))?;
    let scores = forward_ir(&scene.features, head)?;
    let mut dets = Vec::new();
    for class_id in 0..scene.num_classes {
        let scored: Vec<(BBox, f64)> = (0..scene.num_proposals)
            .map(|r| (scene.all_boxes[r], scores[[r, class_id]]))
            .collect();
        for idx in nms(&scored, nms_iou) {
            dets.push(Detection {
                image_id: scene.image_id,
                class_id,
                bbox: scored[idx].0,
                score: scored[idx].1,
            });
        }
    }
    Ok(dets)
}

/// Synthetic-suite mAP of the current model over the prepared scenes.
pub fn evaluate_map(
    scenes: &[PreparedScene],
    model: &DthcpModel,
    nms_iou: f64,
) -> Result<f64> {
    let num_classes = scenes.first().map(|s| s.num_classes).unwrap_or(0);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for scene in scenes {
        dets.extend(detections_for_scene(scene, model, nms_iou)?);
        gts.extend_from_slice(&scene.ground_truth);
    }
    Ok(mean_ap(
        &dets,
        &gts,
        num_classes,
        0.5,
        ApInterpolation::Continuous,
    ))
}

/// CorLoc of the current model: the top-scoring proposal per positive
/// (image, class) pair against the scene ground truth.
pub fn evaluate_corloc(
    scenes: &[PreparedScene],
    model: &DthcpModel,
) -> Result<f64> {
    let num_classes = scenes.first().map(|s| s.num_classes).unwrap_or(0);
    let mut tops = Vec::new();
    let mut gts = Vec::new();
    for scene in scenes {
        let head = model
            .ir
            .last()
            .ok_or_else(|| Error::InvalidConfig("model has no refinement stage".into()))?;
        let scores = forward_ir(&scene.features, head)?;
        for class_id in 0..scene.num_classes {
            if !scene.ground_truth.iter().any(|g| g.class_id == class_id) {
                continue;
            }
            let best = (0..scene.num_proposals)
                .max_by(|&a, &b| {
                    scores[[a, class_id]]
                        .partial_cmp(&scores[[b, class_id]])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.cmp(&a))
                })
                .expect("scene has proposals");
            tops.push(TopBox {
                image_id: scene.image_id,
                class_id,
                bbox: scene.all_boxes[best],
            });
        }
        gts.extend_from_slice(&scene.ground_truth);
    }
    Ok(corloc(&tops, &gts, num_classes))
}

/// Refinement-stage supervision for one image under the live scores.
fn stage_labels(
    scene: &PreparedScene,
    model: &DthcpModel,
    hgps_cfg: &HgpsConfig,
) -> Result<Vec<AssignedLabels>> {
    let stack = forward_wsbdn(&scene.features, &model.cls, &model.wgt)?;
    let mut labels = Vec::with_capacity(model.ir.len());
    let mut prev: Option<Array2<f64>> = None;
    for k in 1..=model.ir.len() {
        let gts = if k == 1 {
            let weight_src = if hgps_cfg.weight_from_ws0_at_stage1 {
                &stack.ws
            } else {
                &stack.s
            };
            select_pseudo_gt_ir(
                &scene.clusters,
                StageScores {
                    argmax: &stack.ws,
                    weight: weight_src,
                },
                k,
                hgps_cfg,
            )?
        } else {
            let prev_scores = prev.as_ref().expect("previous stage scores present");
            select_pseudo_gt_ir(
                &scene.clusters,
                StageScores {
                    argmax: prev_scores,
                    weight: prev_scores,
                },
                k,
                hgps_cfg,
            )?
        };
        labels.push(assign_labels(&scene.all_boxes, &gts, hgps_cfg));
        prev = Some(forward_ir(&scene.features, &model.ir[k - 1])?);
    }
    Ok(labels)
}

/// Run the full loop and return the trained model plus the loss/mAP curve.
pub fn train(
    scenes: &[PreparedScene],
    hgps_cfg: &HgpsConfig,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    hgps_cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("no scenes to train on".into()));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by_key(|&i| scenes[i].image_id);

    let feature_dim = scenes[0].features.dim();
    let num_classes = scenes[0].num_classes;
    let mut model = init_model(feature_dim, num_classes, hgps_cfg.stages, cfg.seed)?;

    let mut lr = cfg.learning_rate;
    let mut records = Vec::new();
    let mut iteration = 0usize;

    for epoch in 1..=cfg.epochs {
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_loss = 0.0;
            let mut accum: Option<crate::midn::DthcpGrads> = None;
            for &idx in batch {
                let scene = &scenes[idx];
                let ir_labels = stage_labels(scene, &model, hgps_cfg)?;
                let sup = DthcpSupervision {
                    image_label: &scene.image_label,
                    base_labels: &scene.base_labels,
                    ir_labels: &ir_labels,
                    use_cls_ign: cfg.use_cls_ign,
                };
                let losses = loss_dthcp(&scene.features, &model, &sup)?;
                batch_loss += losses.total;
                let grads = grad_dthcp(&scene.features, &model, &sup)?;
                match &mut accum {
                    None => accum = Some(grads),
                    Some(acc) => acc.add(&grads),
                }
            }
            let mut grads = accum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            batch_loss *= scale;

            sgd_step(&mut model.cls, &grads.cls, lr, cfg.weight_decay)?;
            sgd_step(&mut model.wgt, &grads.wgt, lr, cfg.weight_decay)?;
            for (head, grad) in model.ir.iter_mut().zip(&grads.ir) {
                sgd_step(head, grad, lr, cfg.weight_decay)?;
            }

            iteration += 1;
            let eval_now = cfg.eval_every > 0 && iteration % cfg.eval_every == 0;
            let map = if eval_now {
                Some(evaluate_map(scenes, &model, cfg.nms_iou)?)
            } else {
                None
            };
            records.push(TrainRecord {
                iteration,
                epoch,
                loss: batch_loss,
                map,
            });
        }

        if cfg.eval_every == 0 {
            let map = evaluate_map(scenes, &model, cfg.nms_iou)?;
            if let Some(last) = records.last_mut() {
                last.map = Some(map);
            }
        }
        if cfg.lr_decay_epoch > 0 && epoch == cfg.lr_decay_epoch {
            lr *= cfg.lr_decay_factor;
        }
    }

    let final_map = evaluate_map(scenes, &model, cfg.nms_iou)?;
    let final_corloc = evaluate_corloc(scenes, &model)?;
    Ok(TrainOutcome {
        model,
        records,
        iterations: iteration,
        final_map,
        final_corloc,
    })
}

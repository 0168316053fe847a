//! Heatmap-guided proposal selection.
//!
//! Builds pseudo ground-truth clusters from dual-threshold heatmap boxes
//! and region proposals, selects pseudo-GT boxes per refinement stage, and
//! assigns per-proposal training labels and weights.
//!
//! A cluster gathers the proposals that lie between one high-threshold box
//! and the enlarged low-threshold box it is subordinate to. A proposal is
//! "between" boxes A and B when it contains A and is contained by B,
//! boundaries inclusive. Each cluster also carries exactly one synthetic
//! member (the low box itself, or the enlarged high box when a low region
//! owns several high regions) so no cluster is ever empty.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{contains, iou, scale_box, BBox};
use crate::heatmap::{subordinate, threshold_regions, Heatmap, ThresholdLevel};

/// Thresholds and stage count for the selector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HgpsConfig {
    /// High heatmap threshold; separates adjacent same-class instances.
    pub tau_high: f64,
    /// Low heatmap threshold; covers complete object extents.
    pub tau_low: f64,
    /// Enlargement factor applied to threshold boxes.
    pub r: f64,
    /// IoU at or above which a proposal takes a pseudo-GT's class.
    pub tau_iou1: f64,
    /// IoU below which a proposal is ignored during training.
    pub tau_iou2: f64,
    /// Number of instance-refinement stages (K).
    pub stages: usize,
    /// Stage-1 selection ranks members by the weighted score matrix while
    /// the emitted weight is read from the unweighted class scores (the
    /// literal algorithm). Set true to read the weight from the weighted
    /// matrix instead.
    pub weight_from_ws0_at_stage1: bool,
}

impl Default for HgpsConfig {
    fn default() -> Self {
        Self {
            tau_high: 0.8,
            tau_low: 0.3,
            r: 1.2,
            tau_iou1: 0.5,
            tau_iou2: 0.1,
            stages: 3,
            weight_from_ws0_at_stage1: false,
        }
    }
}

impl HgpsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_low > 0.0 && self.tau_low < self.tau_high && self.tau_high <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "thresholds must satisfy 0 < tau_low < tau_high <= 1, got ({}, {})",
                self.tau_low, self.tau_high
            )));
        }
        if !(self.r.is_finite() && self.r >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "scale factor must be >= 1, got {}",
                self.r
            )));
        }
        if !(self.tau_iou2 > 0.0 && self.tau_iou2 < self.tau_iou1 && self.tau_iou1 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "IoU thresholds must satisfy 0 < tau_iou2 < tau_iou1 < 1, got ({}, {})",
                self.tau_iou1, self.tau_iou2
            )));
        }
        if self.stages == 0 {
            return Err(Error::InvalidConfig("stage count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where a cluster member came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberTag {
    /// Index into the proposal list.
    Proposal(usize),
    /// The low-threshold box itself.
    LowBox,
    /// The enlarged high-threshold box.
    ScaledHighBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterMember {
    pub tag: MemberTag,
    pub bbox: BBox,
    /// Row in the stacked score/feature matrices: the proposal index, or
    /// `num_proposals + i` for the i-th synthetic box.
    pub row: usize,
}

/// One pseudo-GT cluster: the synthetic member first, then proposals in
/// ascending index order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster {
    pub class_id: usize,
    pub low_region: usize,
    /// Present for clusters anchored to a specific high region.
    pub high_region: Option<usize>,
    pub members: Vec<ClusterMember>,
}

/// All clusters of an image, per class, plus the synthetic boxes that must
/// be scored alongside the raw proposals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSet {
    pub num_classes: usize,
    pub num_proposals: usize,
    per_class: Vec<Vec<Cluster>>,
    extra_boxes: Vec<BBox>,
}

impl ClusterSet {
    pub fn clusters(&self, class_id: usize) -> &[Cluster] {
        &self.per_class[class_id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Cluster> {
        self.per_class.iter().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.iter().all(|c| c.is_empty())
    }

    /// Synthetic boxes in row order; row of `extra_boxes()[i]` is
    /// `num_proposals + i`.
    pub fn extra_boxes(&self) -> &[BBox] {
        &self.extra_boxes
    }

    /// Rows required of any score/feature matrix covering this set.
    pub fn total_rows(&self) -> usize {
        self.num_proposals + self.extra_boxes.len()
    }
}

/// Internal builder so the brute-force verification path can assemble an
/// identical structure without going through `build_clusters`.
pub(crate) struct ClusterSetBuilder {
    num_classes: usize,
    num_proposals: usize,
    per_class: Vec<Vec<Cluster>>,
    extra_boxes: Vec<BBox>,
}

impl ClusterSetBuilder {
    pub(crate) fn new(num_classes: usize, num_proposals: usize) -> Self {
        Self {
            num_classes,
            num_proposals,
            per_class: vec![Vec::new(); num_classes],
            extra_boxes: Vec::new(),
        }
    }

    /// Register a synthetic box and return its score row.
    pub(crate) fn push_extra(&mut self, bbox: BBox) -> usize {
        self.extra_boxes.push(bbox);
        self.num_proposals + self.extra_boxes.len() - 1
    }

    pub(crate) fn push_cluster(&mut self, cluster: Cluster) {
        self.per_class[cluster.class_id].push(cluster);
    }

    pub(crate) fn finish(self) -> ClusterSet {
        ClusterSet {
            num_classes: self.num_classes,
            num_proposals: self.num_proposals,
            per_class: self.per_class,
            extra_boxes: self.extra_boxes,
        }
    }
}

/// True iff `p` lies between `inner` and `outer`: it contains the inner box
/// and is contained by the outer one, boundaries inclusive.
pub fn between(p: &BBox, inner: &BBox, outer: &BBox) -> bool {
    contains(p, inner) && contains(outer, p)
}

/// Build pseudo-GT clusters for every class present in the image label.
///
/// Per low-threshold region, the number of subordinate high regions decides
/// the shape: zero gives a singleton cluster holding only the low box, one
/// gives a cluster of the low box plus the proposals between the high box
/// and the enlarged low box, and two or more give one cluster per high box
/// where a proposal qualifying for several of them is kept only in the
/// cluster whose enlarged high box overlaps it most (ties to the lower
/// high-region id).
pub fn build_clusters(
    heatmaps: &[Heatmap],
    image_labels: &[bool],
    proposals: &[BBox],
    image_size: (usize, usize),
    cfg: &HgpsConfig,
) -> Result<ClusterSet> {
    cfg.validate()?;
    let (img_w, img_h) = image_size;
    let bounds = (img_w as f64, img_h as f64);
    let mut builder = ClusterSetBuilder::new(image_labels.len(), proposals.len());

    for (class_id, &present) in image_labels.iter().enumerate() {
        if !present {
            continue;
        }
        let mut maps = heatmaps.iter().filter(|h| h.class_id == class_id);
        let map = maps
            .next()
            .ok_or(Error::MissingHeatmap { class: class_id })?;
        if maps.next().is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate heatmap for class {class_id}"
            )));
        }
        if map.height() != img_h || map.width() != img_w {
            return Err(Error::DimensionMismatch(format!(
                "heatmap for class {class_id} is {}x{}, image is {img_h}x{img_w}",
                map.height(),
                map.width()
            )));
        }

        let lows = threshold_regions(map, cfg.tau_low, ThresholdLevel::Low);
        let highs = threshold_regions(map, cfg.tau_high, ThresholdLevel::High);
        let groups = subordinate(&highs, &lows)?.grouped(lows.len());

        for (low_id, low) in lows.iter().enumerate() {
            let scaled_low = scale_box(&low.bbox, cfg.r, bounds)?;
            let group = &groups[low_id];
            match group.len() {
                0 => {
                    let row = builder.push_extra(low.bbox);
                    builder.push_cluster(Cluster {
                        class_id,
                        low_region: low_id,
                        high_region: None,
                        members: vec![ClusterMember {
                            tag: MemberTag::LowBox,
                            bbox: low.bbox,
                            row,
                        }],
                    });
                }
                1 => {
                    let high = &highs[group[0]];
                    let row = builder.push_extra(low.bbox);
                    let mut members = vec![ClusterMember {
                        tag: MemberTag::LowBox,
                        bbox: low.bbox,
                        row,
                    }];
                    for (p_idx, p) in proposals.iter().enumerate() {
                        if between(p, &high.bbox, &scaled_low) {
                            members.push(ClusterMember {
                                tag: MemberTag::Proposal(p_idx),
                                bbox: *p,
                                row: p_idx,
                            });
                        }
                    }
                    builder.push_cluster(Cluster {
                        class_id,
                        low_region: low_id,
                        high_region: Some(high.id),
                        members,
                    });
                }
                _ => {
                    let scaled_highs: Vec<BBox> = group
                        .iter()
                        .map(|&hid| scale_box(&highs[hid].bbox, cfg.r, bounds))
                        .collect::<Result<_>>()?;
                    // membership before dedup, per high box
                    let candidates: Vec<Vec<usize>> = group
                        .iter()
                        .map(|&hid| {
                            proposals
                                .iter()
                                .enumerate()
                                .filter(|(_, p)| between(p, &highs[hid].bbox, &scaled_low))
                                .map(|(i, _)| i)
                                .collect()
                        })
                        .collect();
                    // a proposal qualifying for several high boxes stays only
                    // where the enlarged high box has maximal IoU with it
                    let assigned = |p_idx: usize| -> usize {
                        let mut best = usize::MAX;
                        let mut best_iou = f64::NEG_INFINITY;
                        for (g, cand) in candidates.iter().enumerate() {
                            if !cand.contains(&p_idx) {
                                continue;
                            }
                            let v = iou(&scaled_highs[g], &proposals[p_idx]);
                            if v > best_iou {
                                best_iou = v;
                                best = g;
                            }
                        }
                        best
                    };

                    for (g, &hid) in group.iter().enumerate() {
                        let row = builder.push_extra(scaled_highs[g]);
                        let mut members = vec![ClusterMember {
                            tag: MemberTag::ScaledHighBox,
                            bbox: scaled_highs[g],
                            row,
                        }];
                        for &p_idx in &candidates[g] {
                            if assigned(p_idx) == g {
                                members.push(ClusterMember {
                                    tag: MemberTag::Proposal(p_idx),
                                    bbox: proposals[p_idx],
                                    row: p_idx,
                                });
                            }
                        }
                        builder.push_cluster(Cluster {
                            class_id,
                            low_region: low_id,
                            high_region: Some(hid),
                            members,
                        });
                    }
                }
            }
        }
    }
    Ok(builder.finish())
}

/// Which module a pseudo-GT set supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Wsbdn,
    Ir(usize),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PseudoGt {
    pub bbox: BBox,
    pub weight: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoGtSet {
    pub stage: StageTag,
    pub entries: Vec<PseudoGt>,
}

impl PseudoGtSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Score matrices from the preceding stage used by [`select_pseudo_gt_ir`].
/// For stage 1 the ranking matrix is the base module's weighted scores and
/// the weight matrix its unweighted class scores; for later stages both are
/// the previous refinement stage's scores.
#[derive(Debug, Clone, Copy)]
pub struct StageScores<'a> {
    pub argmax: &'a Array2<f64>,
    pub weight: &'a Array2<f64>,
}

fn check_score_dims(scores: &Array2<f64>, clusters: &ClusterSet) -> Result<()> {
    if scores.nrows() != clusters.total_rows() {
        return Err(Error::DimensionMismatch(format!(
            "score matrix has {} rows, cluster set requires {}",
            scores.nrows(),
            clusters.total_rows()
        )));
    }
    if scores.ncols() != clusters.num_classes + 1 {
        return Err(Error::DimensionMismatch(format!(
            "score matrix has {} columns, expected {}",
            scores.ncols(),
            clusters.num_classes + 1
        )));
    }
    Ok(())
}

/// Select one pseudo-GT box per cluster for refinement stage `k`: the
/// member with the highest ranking score in the cluster's class column
/// (ties to the lowest member index), carrying the weight-matrix entry of
/// that member as its confidence.
pub fn select_pseudo_gt_ir(
    clusters: &ClusterSet,
    scores: StageScores,
    k: usize,
    cfg: &HgpsConfig,
) -> Result<PseudoGtSet> {
    cfg.validate()?;
    if k == 0 || k > cfg.stages {
        return Err(Error::InvalidConfig(format!(
            "stage index {k} outside 1..={}",
            cfg.stages
        )));
    }
    check_score_dims(scores.argmax, clusters)?;
    check_score_dims(scores.weight, clusters)?;

    let mut entries = Vec::new();
    for class_id in 0..clusters.num_classes {
        for cluster in clusters.clusters(class_id) {
            let best = cluster
                .members
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| {
                    let sa = scores.argmax[[a.row, class_id]];
                    let sb = scores.argmax[[b.row, class_id]];
                    sa.partial_cmp(&sb)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(ib.cmp(ia)) // ties -> lowest member index
                })
                .map(|(_, m)| m)
                .ok_or_else(|| Error::Invariant("empty cluster".into()))?;
            entries.push(PseudoGt {
                bbox: best.bbox,
                weight: scores.weight[[best.row, class_id]],
                class_id,
            });
        }
    }
    Ok(PseudoGtSet {
        stage: StageTag::Ir(k),
        entries,
    })
}

/// Every member of every cluster becomes a pseudo-GT box for the base
/// module, weight 1.
pub fn select_pseudo_gt_wsbdn(clusters: &ClusterSet) -> PseudoGtSet {
    let mut entries = Vec::new();
    for class_id in 0..clusters.num_classes {
        for cluster in clusters.clusters(class_id) {
            for member in &cluster.members {
                entries.push(PseudoGt {
                    bbox: member.bbox,
                    weight: 1.0,
                    class_id,
                });
            }
        }
    }
    PseudoGtSet {
        stage: StageTag::Wsbdn,
        entries,
    }
}

/// Per-proposal training label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalLabel {
    /// Matched a pseudo-GT of this class at IoU >= tau_iou1.
    Foreground(usize),
    /// Best IoU in [tau_iou2, tau_iou1).
    Background,
    /// Best IoU below tau_iou2; excluded from the classification loss.
    Ignored,
}

/// Labels, loss weights, and best-match IoU for every proposal.
#[derive(Debug, Clone)]
pub struct AssignedLabels {
    pub labels: Vec<ProposalLabel>,
    pub weights: Vec<f64>,
    pub best_iou: Vec<f64>,
}

impl AssignedLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Proposals participating in the classification loss.
    pub fn num_active(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| !matches!(l, ProposalLabel::Ignored))
            .count()
    }

    pub fn num_ignored(&self) -> usize {
        self.len() - self.num_active()
    }
}

/// Assign each proposal the class of its best-overlapping pseudo-GT box,
/// background when the overlap is moderate, or ignored when it is below
/// `tau_iou2`. Weights copy the matched pseudo-GT's confidence (zero for
/// ignored proposals). Ties on IoU go to the lowest pseudo-GT index.
pub fn assign_labels(proposals: &[BBox], gts: &PseudoGtSet, cfg: &HgpsConfig) -> AssignedLabels {
    let mut labels = Vec::with_capacity(proposals.len());
    let mut weights = Vec::with_capacity(proposals.len());
    let mut best_iou = Vec::with_capacity(proposals.len());

    for p in proposals {
        let mut t = 0.0;
        let mut j_star: Option<usize> = None;
        for (j, gt) in gts.entries.iter().enumerate() {
            let v = iou(p, &gt.bbox);
            if v > t {
                t = v;
                j_star = Some(j);
            }
        }
        let (label, weight) = match j_star {
            Some(j) if t >= cfg.tau_iou1 => (
                ProposalLabel::Foreground(gts.entries[j].class_id),
                gts.entries[j].weight,
            ),
            Some(j) if t >= cfg.tau_iou2 => (ProposalLabel::Background, gts.entries[j].weight),
            _ => (ProposalLabel::Ignored, 0.0),
        };
        labels.push(label);
        weights.push(weight);
        best_iou.push(t);
    }
    AssignedLabels {
        labels,
        weights,
        best_iou,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{normalize, RawActivationMap};
    use ndarray::Array2;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn heatmap_from(values: Array2<f64>, class_id: usize) -> Heatmap {
        normalize(&RawActivationMap::new(values, class_id).unwrap())
    }

    /// 32x32 map: one low plateau holding two 3x3 hot blobs.
    fn two_blob_heatmap() -> Heatmap {
        let mut v = Array2::zeros((32, 32));
        for r in 8..24 {
            for c in 2..30 {
                v[[r, c]] = 0.4;
            }
        }
        for r in 10..13 {
            for c in 6..9 {
                v[[r, c]] = 1.0;
            }
            for c in 20..23 {
                v[[r, c]] = 1.0;
            }
        }
        heatmap_from(v, 0)
    }

    #[test]
    fn singleton_cluster_when_no_high_region() {
        // low plateau at 0.5, hot pixel elsewhere so the plateau has no high region
        let mut v = Array2::zeros((16, 16));
        for r in 2..6 {
            for c in 2..6 {
                v[[r, c]] = 0.5;
            }
        }
        v[[12, 12]] = 1.0;
        let h = heatmap_from(v, 0);
        let proposals = vec![bb(2.0, 2.0, 6.0, 6.0)];
        let cfg = HgpsConfig::default();
        let set = build_clusters(&[h], &[true], &proposals, (16, 16), &cfg).unwrap();
        let clusters = set.clusters(0);
        assert_eq!(clusters.len(), 2);
        // plateau region: singleton, only the low box
        let singleton = clusters
            .iter()
            .find(|c| c.high_region.is_none())
            .expect("plateau cluster has no high region");
        assert_eq!(singleton.members.len(), 1);
        assert_eq!(singleton.members[0].tag, MemberTag::LowBox);
        assert_eq!(singleton.members[0].bbox, bb(2.0, 2.0, 6.0, 6.0));
    }

    #[test]
    fn giant_proposal_deduplicated_to_max_iou_cluster() {
        let h = two_blob_heatmap();
        let tight1 = bb(6.0, 10.0, 9.0, 13.0);
        let tight2 = bb(20.0, 10.0, 23.0, 13.0);
        // contains both high boxes; clips the second scaled high box so the
        // first cluster wins the IoU comparison
        let giant = bb(4.0, 8.0, 23.0, 16.0);
        let proposals = vec![tight1, giant, tight2];
        let cfg = HgpsConfig::default();
        let set = build_clusters(&[h], &[true], &proposals, (32, 32), &cfg).unwrap();
        let clusters = set.clusters(0);
        assert_eq!(clusters.len(), 2);
        assert!(clusters.iter().all(|c| c.high_region.is_some()));
        assert_eq!(clusters[0].members[0].tag, MemberTag::ScaledHighBox);

        let proposal_ids = |c: &Cluster| -> Vec<usize> {
            c.members
                .iter()
                .filter_map(|m| match m.tag {
                    MemberTag::Proposal(i) => Some(i),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(proposal_ids(&clusters[0]), vec![0, 1]);
        assert_eq!(proposal_ids(&clusters[1]), vec![2]);
    }

    #[test]
    fn equal_iou_dedup_ties_to_lower_high_region() {
        let h = two_blob_heatmap();
        // symmetric giant box; r = 2 keeps the scaled high boxes on exactly
        // representable coordinates so the two IoU values are bit-identical
        let giant = bb(4.0, 8.0, 26.0, 16.0);
        let proposals = vec![giant];
        let cfg = HgpsConfig {
            r: 2.0,
            ..Default::default()
        };
        let set = build_clusters(&[h], &[true], &proposals, (32, 32), &cfg).unwrap();
        let clusters = set.clusters(0);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].members.len(), 2);
        assert_eq!(clusters[1].members.len(), 1);
    }

    #[test]
    fn no_labels_no_clusters() {
        let cfg = HgpsConfig::default();
        let set = build_clusters(&[], &[false, false], &[], (8, 8), &cfg).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.total_rows(), 0);
    }

    #[test]
    fn missing_heatmap_is_an_error() {
        let cfg = HgpsConfig::default();
        let err = build_clusters(&[], &[true], &[], (8, 8), &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingHeatmap { class: 0 }));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut v = Array2::zeros((4, 4));
        v[[1, 1]] = 1.0;
        let h = heatmap_from(v, 0);
        let cfg = HgpsConfig::default();
        assert!(matches!(
            build_clusters(&[h], &[true], &[], (8, 8), &cfg),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = HgpsConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.tau_low = 0.9;
        assert!(cfg.validate().is_err());
        cfg = HgpsConfig {
            r: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = HgpsConfig {
            tau_iou2: 0.6,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = HgpsConfig {
            stages: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn single_cluster_set(member_boxes: &[BBox]) -> ClusterSet {
        // one class, one cluster whose members are the given proposals plus
        // a synthetic low box equal to the first one
        let mut b = ClusterSetBuilder::new(1, member_boxes.len());
        let row = b.push_extra(member_boxes[0]);
        let mut members = vec![ClusterMember {
            tag: MemberTag::LowBox,
            bbox: member_boxes[0],
            row,
        }];
        for (i, bbox) in member_boxes.iter().enumerate() {
            members.push(ClusterMember {
                tag: MemberTag::Proposal(i),
                bbox: *bbox,
                row: i,
            });
        }
        b.push_cluster(Cluster {
            class_id: 0,
            low_region: 0,
            high_region: Some(0),
            members,
        });
        b.finish()
    }

    #[test]
    fn ir_selection_takes_argmax_member() {
        let boxes = vec![
            bb(0.0, 0.0, 4.0, 4.0),
            bb(1.0, 1.0, 5.0, 5.0),
            bb(2.0, 2.0, 6.0, 6.0),
        ];
        let set = single_cluster_set(&boxes);
        // rows: 3 proposals + 1 synthetic
        let argmax =
            Array2::from_shape_vec((4, 2), vec![0.1, 0.0, 0.7, 0.0, 0.3, 0.0, 0.05, 0.0]).unwrap();
        let weight = &argmax * 0.5;
        let cfg = HgpsConfig::default();
        let gts = select_pseudo_gt_ir(
            &set,
            StageScores {
                argmax: &argmax,
                weight: &weight,
            },
            1,
            &cfg,
        )
        .unwrap();
        assert_eq!(gts.len(), 1);
        assert_eq!(gts.entries[0].bbox, boxes[1]);
        assert_eq!(gts.entries[0].weight, 0.35);
        assert_eq!(gts.entries[0].class_id, 0);
        assert_eq!(gts.stage, StageTag::Ir(1));
    }

    #[test]
    fn ir_selection_on_singleton_cluster() {
        // one cluster holding only its synthetic low box
        let mut b = ClusterSetBuilder::new(1, 0);
        let bbox = bb(2.0, 2.0, 6.0, 6.0);
        let row = b.push_extra(bbox);
        b.push_cluster(Cluster {
            class_id: 0,
            low_region: 0,
            high_region: None,
            members: vec![ClusterMember {
                tag: MemberTag::LowBox,
                bbox,
                row,
            }],
        });
        let set = b.finish();
        let scores = Array2::from_elem((1, 2), 0.125);
        let cfg = HgpsConfig::default();
        let gts = select_pseudo_gt_ir(
            &set,
            StageScores {
                argmax: &scores,
                weight: &scores,
            },
            3,
            &cfg,
        )
        .unwrap();
        assert_eq!(gts.len(), 1);
        assert_eq!(gts.entries[0].bbox, bbox);
        assert_eq!(gts.entries[0].weight, 0.125);
    }

    #[test]
    fn ir_selection_tie_takes_lowest_member() {
        let boxes = vec![bb(0.0, 0.0, 4.0, 4.0), bb(1.0, 1.0, 5.0, 5.0)];
        let set = single_cluster_set(&boxes);
        let scores = Array2::from_elem((3, 2), 0.5);
        let cfg = HgpsConfig::default();
        let gts = select_pseudo_gt_ir(
            &set,
            StageScores {
                argmax: &scores,
                weight: &scores,
            },
            2,
            &cfg,
        )
        .unwrap();
        // lowest member index is the synthetic low box
        assert_eq!(gts.entries[0].bbox, boxes[0]);
    }

    #[test]
    fn ir_selection_rejects_bad_stage_or_dims() {
        let set = single_cluster_set(&[bb(0.0, 0.0, 1.0, 1.0)]);
        let scores = Array2::from_elem((2, 2), 0.5);
        let cfg = HgpsConfig::default();
        let ss = StageScores {
            argmax: &scores,
            weight: &scores,
        };
        assert!(select_pseudo_gt_ir(&set, ss, 0, &cfg).is_err());
        assert!(select_pseudo_gt_ir(&set, ss, 4, &cfg).is_err());
        let short = Array2::from_elem((1, 2), 0.5);
        assert!(select_pseudo_gt_ir(
            &set,
            StageScores {
                argmax: &short,
                weight: &short,
            },
            1,
            &cfg
        )
        .is_err());
    }

    #[test]
    fn wsbdn_selection_takes_every_member() {
        let boxes = vec![
            bb(0.0, 0.0, 4.0, 4.0),
            bb(1.0, 1.0, 5.0, 5.0),
            bb(2.0, 2.0, 6.0, 6.0),
        ];
        let set = single_cluster_set(&boxes);
        let gts = select_pseudo_gt_wsbdn(&set);
        assert_eq!(gts.len(), 4); // synthetic + 3 proposals
        assert!(gts.entries.iter().all(|g| g.weight == 1.0));
        assert_eq!(gts.stage, StageTag::Wsbdn);

        let empty = ClusterSetBuilder::new(2, 0).finish();
        assert!(select_pseudo_gt_wsbdn(&empty).is_empty());
    }

    #[test]
    fn label_assignment_thresholds() {
        let cfg = HgpsConfig::default();
        let gts = PseudoGtSet {
            stage: StageTag::Ir(1),
            entries: vec![PseudoGt {
                bbox: bb(0.0, 0.0, 10.0, 10.0),
                weight: 0.9,
                class_id: 3,
            }],
        };
        let proposals = vec![
            bb(0.0, 0.0, 10.0, 10.0),  // IoU 1.0 -> foreground
            bb(0.0, 0.0, 10.0, 3.0),   // IoU 0.3 -> background
            bb(50.0, 50.0, 60.0, 60.0) // disjoint -> ignored
        ];
        let labels = assign_labels(&proposals, &gts, &cfg);
        assert_eq!(labels.labels[0], ProposalLabel::Foreground(3));
        assert_eq!(labels.weights[0], 0.9);
        assert_eq!(labels.best_iou[0], 1.0);
        assert_eq!(labels.labels[1], ProposalLabel::Background);
        assert_eq!(labels.labels[2], ProposalLabel::Ignored);
        assert_eq!(labels.weights[2], 0.0);
        assert_eq!(labels.num_active(), 2);
        assert_eq!(labels.num_ignored(), 1);
    }

    #[test]
    fn label_assignment_empty_gts_ignores_everything() {
        let cfg = HgpsConfig::default();
        let gts = PseudoGtSet {
            stage: StageTag::Wsbdn,
            entries: vec![],
        };
        let labels = assign_labels(&[bb(0.0, 0.0, 1.0, 1.0)], &gts, &cfg);
        assert_eq!(labels.labels, vec![ProposalLabel::Ignored]);
    }

    #[test]
    fn label_counts_partition_proposals() {
        let cfg = HgpsConfig::default();
        let gts = PseudoGtSet {
            stage: StageTag::Ir(1),
            entries: vec![
                PseudoGt {
                    bbox: bb(0.0, 0.0, 4.0, 4.0),
                    weight: 0.5,
                    class_id: 0,
                },
                PseudoGt {
                    bbox: bb(8.0, 8.0, 12.0, 12.0),
                    weight: 0.7,
                    class_id: 1,
                },
            ],
        };
        let proposals: Vec<BBox> = (0..7)
            .map(|i| bb(i as f64, i as f64, i as f64 + 4.0, i as f64 + 4.0))
            .collect();
        let labels = assign_labels(&proposals, &gts, &cfg);
        assert_eq!(labels.num_active() + labels.num_ignored(), proposals.len());
    }
}

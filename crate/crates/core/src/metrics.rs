//! VOC-protocol detection metrics: per-class AP, mAP, CorLoc, and
//! pseudo-GT quality diagnostics.
//!
//! Matching is greedy over detections in descending score order; a
//! detection is a true positive when its best-overlapping unmatched ground
//! truth of the same class and image reaches the IoU threshold. AP
//! integrates the precision envelope over recall, either continuously
//! (all points) or at the 11 evenly spaced recall levels.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{contains, iou, BBox};
use crate::hgps::PseudoGtSet;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// How the area under the precision-recall curve is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// All-points interpolation (the post-2010 VOC convention).
    Continuous,
    /// Mean of the precision envelope at recalls 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Greedy-match detections of one class against ground truths, returning
/// per-detection true-positive flags in descending score order (ties keep
/// input order) along with the number of ground truths.
fn match_class(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thr: f64,
) -> (Vec<bool>, usize) {
    let gt_idx: Vec<usize> = gts
        .iter()
        .enumerate()
        .filter(|(_, g)| g.class_id == class_id)
        .map(|(i, _)| i)
        .collect();
    let mut order: Vec<usize> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class_id == class_id)
        .map(|(i, _)| i)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &dets[di];
        let mut best_iou = 0.0;
        let mut best_gt = None;
        for &gi in &gt_idx {
            if gts[gi].image_id != det.image_id {
                continue;
            }
            let v = iou(&det.bbox, &gts[gi].bbox);
            if v > best_iou {
                best_iou = v;
                best_gt = Some(gi);
            }
        }
        let tp = match best_gt {
            Some(gi) if best_iou >= iou_thr && !matched[gi] => {
                matched[gi] = true;
                true
            }
            _ => false,
        };
        flags.push(tp);
    }
    (flags, gt_idx.len())
}

fn ap_from_flags(flags: &[bool], num_gt: usize, interpolation: ApInterpolation) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    for (i, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    match interpolation {
        ApInterpolation::Continuous => {
            // precision envelope from the right, then sum recall increments
            let mut envelope = precisions.clone();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..envelope.len() {
                if recalls[i] > prev_recall {
                    ap += (recalls[i] - prev_recall) * envelope[i];
                    prev_recall = recalls[i];
                }
            }
            ap
        }
        ApInterpolation::ElevenPoint => {
            let mut ap = 0.0;
            for step in 0..=10 {
                let t = step as f64 / 10.0;
                let p = precisions
                    .iter()
                    .zip(&recalls)
                    .filter(|(_, &r)| r >= t)
                    .map(|(&p, _)| p)
                    .fold(0.0, f64::max);
                ap += p / 11.0;
            }
            ap
        }
    }
}

/// Average precision for one class at the given IoU threshold. Zero when
/// the class has no ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thr: f64,
    interpolation: ApInterpolation,
) -> f64 {
    let (flags, num_gt) = match_class(dets, gts, class_id, iou_thr);
    ap_from_flags(&flags, num_gt, interpolation)
}

/// Mean AP over the classes that have at least one ground truth.
pub fn mean_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_thr: f64,
    interpolation: ApInterpolation,
) -> f64 {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        if gts.iter().any(|g| g.class_id == c) {
            sum += average_precision(dets, gts, c, iou_thr, interpolation);
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    }
}

/// Per-class AP table plus the mean.
pub fn per_class_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_thr: f64,
    interpolation: ApInterpolation,
) -> (Vec<f64>, f64) {
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| average_precision(dets, gts, c, iou_thr, interpolation))
        .collect();
    let map = mean_ap(dets, gts, num_classes, iou_thr, interpolation);
    (per_class, map)
}

/// One candidate box per (image, present class) pair.
#[derive(Debug, Clone, Copy)]
pub struct TopBox {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Correct-localization rate: per class, the fraction of positive images
/// whose candidate box overlaps any ground truth of that class at IoU >=
/// 0.5; averaged over classes with at least one positive image. Confidence
/// plays no role, only geometry.
pub fn corloc(top_boxes: &[TopBox], gts: &[GroundTruth], num_classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        let mut images: Vec<usize> = gts
            .iter()
            .filter(|g| g.class_id == c)
            .map(|g| g.image_id)
            .collect();
        images.sort_unstable();
        images.dedup();
        if images.is_empty() {
            continue;
        }
        let hits = images
            .iter()
            .filter(|&&img| {
                top_boxes
                    .iter()
                    .find(|t| t.image_id == img && t.class_id == c)
                    .is_some_and(|t| {
                        gts.iter()
                            .filter(|g| g.class_id == c && g.image_id == img)
                            .any(|g| iou(&t.bbox, &g.bbox) >= 0.5)
                    })
            })
            .count();
        sum += hits as f64 / images.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    }
}

/// Per-class pseudo-GT quality diagnostics for one image.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QualityReport {
    /// True instances matched by some pseudo GT at IoU >= 0.5, per class.
    pub matched_instances: usize,
    pub total_instances: usize,
    /// Mean over true instances of the best IoU with any pseudo GT.
    pub mean_best_iou: f64,
    /// Pseudo GTs covering two or more true instances at IoU >= 0.3 each.
    pub merge_count: usize,
    /// Pseudo GTs lying inside a true box with IoU < 0.5: a box that found
    /// only a discriminative part.
    pub part_only_count: usize,
}

impl QualityReport {
    pub fn recall(&self) -> f64 {
        if self.total_instances == 0 {
            0.0
        } else {
            self.matched_instances as f64 / self.total_instances as f64
        }
    }

    pub fn merge(&mut self, other: &QualityReport) {
        let total_iou = self.mean_best_iou * self.total_instances as f64
            + other.mean_best_iou * other.total_instances as f64;
        self.matched_instances += other.matched_instances;
        self.total_instances += other.total_instances;
        self.mean_best_iou = if self.total_instances == 0 {
            0.0
        } else {
            total_iou / self.total_instances as f64
        };
        self.merge_count += other.merge_count;
        self.part_only_count += other.part_only_count;
    }
}

/// Diagnose a pseudo-GT set against the true instances of the same image:
/// instance recall at IoU 0.5, mean best IoU, multi-instance merges, and
/// part-only boxes.
pub fn pseudo_gt_quality(pseudo: &PseudoGtSet, gts_true: &[GroundTruth]) -> QualityReport {
    let mut report = QualityReport {
        total_instances: gts_true.len(),
        ..Default::default()
    };

    let mut iou_sum = 0.0;
    for gt in gts_true {
        let best = pseudo
            .entries
            .iter()
            .filter(|p| p.class_id == gt.class_id)
            .map(|p| iou(&p.bbox, &gt.bbox))
            .fold(0.0, f64::max);
        iou_sum += best;
        if best >= 0.5 {
            report.matched_instances += 1;
        }
    }
    report.mean_best_iou = if gts_true.is_empty() {
        0.0
    } else {
        iou_sum / gts_true.len() as f64
    };

    for p in &pseudo.entries {
        let same_class: Vec<&GroundTruth> = gts_true
            .iter()
            .filter(|g| g.class_id == p.class_id)
            .collect();
        let covered = same_class
            .iter()
            .filter(|g| iou(&p.bbox, &g.bbox) >= 0.3)
            .count();
        if covered >= 2 {
            report.merge_count += 1;
        }
        let part_only = same_class
            .iter()
            .any(|g| contains(&g.bbox, &p.bbox) && iou(&p.bbox, &g.bbox) < 0.5);
        if part_only {
            report.part_only_count += 1;
        }
    }
    report
}

// ---------------------------------------------------------------------------
// CSV formats: `image_id,class_id,x1,y1,x2,y2[,score]`
// ---------------------------------------------------------------------------

pub fn write_detections_csv<W: Write>(w: W, dets: &[Detection]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for d in dets {
        writer.write_record([
            d.image_id.to_string(),
            d.class_id.to_string(),
            d.bbox.x1.to_string(),
            d.bbox.y1.to_string(),
            d.bbox.x2.to_string(),
            d.bbox.y2.to_string(),
            d.score.to_string(),
        ])?;
    }
    writer.flush().map_err(Error::Io)?;
    Ok(())
}

pub fn write_ground_truth_csv<W: Write>(w: W, gts: &[GroundTruth]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for g in gts {
        writer.write_record([
            g.image_id.to_string(),
            g.class_id.to_string(),
            g.bbox.x1.to_string(),
            g.bbox.y1.to_string(),
            g.bbox.x2.to_string(),
            g.bbox.y2.to_string(),
        ])?;
    }
    writer.flush().map_err(Error::Io)?;
    Ok(())
}

fn parse_box_record(record: &csv::StringRecord) -> Result<(usize, usize, BBox, Option<f64>)> {
    if record.len() != 6 && record.len() != 7 {
        return Err(Error::Parse(format!(
            "expected 6 or 7 CSV fields, got {}",
            record.len()
        )));
    }
    let field = |i: usize| -> Result<f64> {
        record[i]
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("bad CSV field '{}': {e}", &record[i])))
    };
    let image_id = field(0)? as usize;
    let class_id = field(1)? as usize;
    let bbox = BBox::new(field(2)?, field(3)?, field(4)?, field(5)?)?;
    let score = if record.len() == 7 {
        Some(field(6)?)
    } else {
        None
    };
    Ok((image_id, class_id, bbox, score))
}

/// Read detections; a missing score column defaults to 1.
pub fn read_detections_csv<R: Read>(r: R) -> Result<Vec<Detection>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut out = Vec::new();
    for record in reader.records() {
        let (image_id, class_id, bbox, score) = parse_box_record(&record?)?;
        out.push(Detection {
            image_id,
            class_id,
            bbox,
            score: score.unwrap_or(1.0),
        });
    }
    Ok(out)
}

pub fn read_ground_truth_csv<R: Read>(r: R) -> Result<Vec<GroundTruth>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut out = Vec::new();
    for record in reader.records() {
        let (image_id, class_id, bbox, _) = parse_box_record(&record?)?;
        out.push(GroundTruth {
            image_id,
            class_id,
            bbox,
        });
    }
    Ok(out)
}

pub fn read_detections_file<P: AsRef<Path>>(path: P) -> Result<Vec<Detection>> {
    read_detections_csv(std::fs::File::open(path)?)
}

pub fn read_ground_truth_file<P: AsRef<Path>>(path: P) -> Result<Vec<GroundTruth>> {
    read_ground_truth_csv(std::fs::File::open(path)?)
}

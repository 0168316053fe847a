//! Brute-force reference implementations used to verify the production
//! paths. Each oracle re-derives its answer with the most literal machinery
//! available: BFS flood fill instead of union-find, exhaustive pixel-subset
//! checks instead of single-pixel lookups, per-prefix re-matching instead
//! of an incremental sweep. Slow on purpose, and kept free of the code
//! paths they check.

use ndarray::Array2;
use std::collections::{HashSet, VecDeque};

use crate::error::{Error, Result};
use crate::geometry::{contains, iou, scale_box, BBox};
use crate::heatmap::{Connectivity, Heatmap};
use crate::hgps::{Cluster, ClusterMember, ClusterSet, ClusterSetBuilder, HgpsConfig, MemberTag};
use crate::metrics::{ApInterpolation, Detection, GroundTruth};

/// BFS flood-fill connected components, ordered by (min row, min col) with
/// the row-major first pixel as tie-break — the same ordering contract as
/// the union-find path, arrived at independently.
pub fn oracle_connected_components(
    mask: &Array2<bool>,
    connectivity: Connectivity,
) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut visited = Array2::from_elem((h, w), false);
    let mut regions: Vec<Vec<(usize, usize)>> = Vec::new();

    for sr in 0..h {
        for sc in 0..w {
            if !mask[[sr, sc]] || visited[[sr, sc]] {
                continue;
            }
            let mut pixels = Vec::new();
            let mut queue = VecDeque::new();
            visited[[sr, sc]] = true;
            queue.push_back((sr, sc));
            while let Some((r, c)) = queue.pop_front() {
                pixels.push((r, c));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        if connectivity == Connectivity::Four && dr != 0 && dc != 0 {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask[[nr, nc]] && !visited[[nr, nc]] {
                            visited[[nr, nc]] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            pixels.sort_unstable();
            regions.push(pixels);
        }
    }
    regions.sort_by_key(|px| {
        let min_row = px.iter().map(|p| p.0).min().unwrap();
        let min_col = px.iter().map(|p| p.1).min().unwrap();
        (min_row, min_col, px[0])
    });
    regions
}

fn pixel_box(pixels: &[(usize, usize)]) -> BBox {
    let min_row = pixels.iter().map(|p| p.0).min().unwrap() as f64;
    let max_row = pixels.iter().map(|p| p.0).max().unwrap() as f64;
    let min_col = pixels.iter().map(|p| p.1).min().unwrap() as f64;
    let max_col = pixels.iter().map(|p| p.1).max().unwrap() as f64;
    BBox::new(min_col, min_row, max_col + 1.0, max_row + 1.0).expect("region box valid")
}

/// Pseudo-GT cluster construction re-derived by exhaustive predicate
/// evaluation: BFS regions, subset-checked subordination, and a literal
/// scan over every (proposal, high box) pair. Produces the same structure
/// as the production path, including score-row bookkeeping.
pub fn oracle_cluster_enumeration(
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
        let map = heatmaps
            .iter()
            .find(|h| h.class_id == class_id)
            .ok_or(Error::MissingHeatmap { class: class_id })?;
        if map.height() != img_h || map.width() != img_w {
            return Err(Error::DimensionMismatch(format!(
                "heatmap for class {class_id} is {}x{}, image is {img_h}x{img_w}",
                map.height(),
                map.width()
            )));
        }

        let low_mask = map.values().mapv(|v| v >= cfg.tau_low);
        let high_mask = map.values().mapv(|v| v >= cfg.tau_high);
        let lows = oracle_connected_components(&low_mask, Connectivity::Eight);
        let highs = oracle_connected_components(&high_mask, Connectivity::Eight);

        // every high region must be a pixel-subset of exactly one low region
        let low_sets: Vec<HashSet<(usize, usize)>> =
            lows.iter().map(|px| px.iter().cloned().collect()).collect();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); lows.len()];
        for (hid, high) in highs.iter().enumerate() {
            let mut owner = None;
            for (lid, set) in low_sets.iter().enumerate() {
                if high.iter().all(|p| set.contains(p)) {
                    if owner.is_some() {
                        return Err(Error::Invariant(format!(
                            "high region {hid} contained in two low regions"
                        )));
                    }
                    owner = Some(lid);
                }
            }
            let owner = owner.ok_or_else(|| {
                Error::Invariant(format!("high region {hid} contained in no low region"))
            })?;
            groups[owner].push(hid);
        }

        for (low_id, low_pixels) in lows.iter().enumerate() {
            let low_box = pixel_box(low_pixels);
            let scaled_low = scale_box(&low_box, cfg.r, bounds)?;
            let group = &groups[low_id];
            if group.is_empty() {
                let row = builder.push_extra(low_box);
                builder.push_cluster(Cluster {
                    class_id,
                    low_region: low_id,
                    high_region: None,
                    members: vec![ClusterMember {
                        tag: MemberTag::LowBox,
                        bbox: low_box,
                        row,
                    }],
                });
            } else if group.len() == 1 {
                let high_box = pixel_box(&highs[group[0]]);
                let row = builder.push_extra(low_box);
                let mut members = vec![ClusterMember {
                    tag: MemberTag::LowBox,
                    bbox: low_box,
                    row,
                }];
                for (p_idx, p) in proposals.iter().enumerate() {
                    if contains(p, &high_box) && contains(&scaled_low, p) {
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
                    high_region: Some(group[0]),
                    members,
                });
            } else {
                let high_boxes: Vec<BBox> =
                    group.iter().map(|&hid| pixel_box(&highs[hid])).collect();
                let scaled_highs: Vec<BBox> = high_boxes
                    .iter()
                    .map(|b| scale_box(b, cfg.r, bounds))
                    .collect::<Result<_>>()?;

                // dedup table: for every proposal, the single group index
                // that keeps it, by exhaustive comparison
                let keeper: Vec<Option<usize>> = proposals
                    .iter()
                    .map(|p| {
                        let mut best: Option<(usize, f64)> = None;
                        for g in 0..group.len() {
                            if contains(p, &high_boxes[g]) && contains(&scaled_low, p) {
                                let v = iou(&scaled_highs[g], p);
                                let better = match best {
                                    None => true,
                                    Some((_, bv)) => v > bv,
                                };
                                if better {
                                    best = Some((g, v));
                                }
                            }
                        }
                        best.map(|(g, _)| g)
                    })
                    .collect();

                for (g, &hid) in group.iter().enumerate() {
                    let row = builder.push_extra(scaled_highs[g]);
                    let mut members = vec![ClusterMember {
                        tag: MemberTag::ScaledHighBox,
                        bbox: scaled_highs[g],
                        row,
                    }];
                    for (p_idx, p) in proposals.iter().enumerate() {
                        if keeper[p_idx] == Some(g) {
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
                        high_region: Some(hid),
                        members,
                    });
                }
            }
        }
    }
    Ok(builder.finish())
}

/// Average precision by explicit enumeration over every score prefix, with
/// the greedy matching recomputed from scratch per prefix.
pub fn oracle_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thr: f64,
    interpolation: ApInterpolation,
) -> f64 {
    let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if class_gts.is_empty() {
        return 0.0;
    }
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

    // greedy matching over the first k detections, from scratch
    let match_prefix = |k: usize| -> usize {
        let mut used = vec![false; class_gts.len()];
        let mut tp = 0usize;
        for &di in order.iter().take(k) {
            let det = &dets[di];
            let mut best_iou = 0.0;
            let mut best = None;
            for (gi, g) in class_gts.iter().enumerate() {
                if g.image_id != det.image_id {
                    continue;
                }
                let v = iou(&det.bbox, &g.bbox);
                if v > best_iou {
                    best_iou = v;
                    best = Some(gi);
                }
            }
            if let Some(gi) = best {
                if best_iou >= iou_thr && !used[gi] {
                    used[gi] = true;
                    tp += 1;
                }
            }
        }
        tp
    };

    let n = order.len();
    let num_gt = class_gts.len() as f64;
    let precisions: Vec<f64> = (1..=n).map(|k| match_prefix(k) as f64 / k as f64).collect();
    let recalls: Vec<f64> = (1..=n).map(|k| match_prefix(k) as f64 / num_gt).collect();

    match interpolation {
        ApInterpolation::Continuous => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..n {
                if recalls[i] > prev_recall {
                    // envelope by direct max over the suffix
                    let envelope = precisions[i..].iter().cloned().fold(0.0, f64::max);
                    ap += (recalls[i] - prev_recall) * envelope;
                    prev_recall = recalls[i];
                }
            }
            ap
        }
        ApInterpolation::ElevenPoint => {
            let mut ap = 0.0;
            for step in 0..=10 {
                let t = step as f64 / 10.0;
                let p = (0..n)
                    .filter(|&i| recalls[i] >= t)
                    .map(|i| precisions[i])
                    .fold(0.0, f64::max);
                ap += p / 11.0;
            }
            ap
        }
    }
}

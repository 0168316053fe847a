//! Deterministic synthetic scenes with analytically known threshold
//! geometry, plus the independent brute-force oracles used to verify the
//! production paths.
//!
//! Heatmaps use a plateau-with-falloff model: value 1 inside a core
//! rectangle (the instance box shrunk by `core_ratio`), decaying linearly
//! to 0 at the box enlarged by `falloff_ratio`, combined per pixel as
//! `min` of the two axis profiles. Level sets are therefore rectangles
//! interpolating between the core and the falloff extent, so threshold
//! regions can be predicted exactly. Proposals mix jittered tight boxes,
//! part boxes buried inside instance cores, boxes spanning adjacent
//! same-class pairs, and uniform random boxes — the ingredients the
//! selection ablations need.
//!
//! All randomness flows from a SplitMix64 stream seeded per scene, so every
//! artifact is bit-reproducible from the integer seed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::heatmap::{normalize, Heatmap, RawActivationMap};
use crate::metrics::GroundTruth;
use crate::midn::BoxLevelImageLabel;

pub mod oracle;

/// Identifier recorded in config dumps; the exact mixing constants below
/// are part of the reproducibility contract.
pub const RNG_ALGORITHM: &str = "splitmix64";

/// SplitMix64: 64-bit mixing generator. Gamma 0x9E3779B97F4A7C15 with the
/// standard finalizer constants 0xBF58476D1CE4E5B9 / 0x94D049BB133111EB.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform in 0..n.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}

/// One scramble round, used to derive independent noise streams (e.g. one
/// per box) without disturbing the main sequence.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Image extent and placed instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// (class id, box) in placement order.
    pub instances: Vec<(usize, BBox)>,
    pub seed: u64,
}

/// Knobs for scene generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Isolated instances per class, drawn uniformly from this inclusive range.
    pub singles_range: (usize, usize),
    /// Deliberate adjacent same-class pairs per scene.
    pub adjacent_pairs: usize,
    /// Side-length range for isolated instances.
    pub single_size: (f64, f64),
    /// Side-length range for pair members (larger, so the falloffs bridge).
    pub pair_size: (f64, f64),
    /// Distance between the two members of a pair, in pixels.
    pub pair_gap: f64,
    /// Core rectangle = instance box scaled by this factor (< 1).
    pub core_ratio: f64,
    /// Heat reaches 0 at the instance box scaled by this factor (> 1).
    pub falloff_ratio: f64,
    /// Uniform per-pixel noise amplitude added to the raw map.
    pub noise_amp: f64,
    /// Jittered tight boxes per instance.
    pub jitter_per_instance: usize,
    /// Coordinate noise as a fraction of the box side.
    pub jitter_sigma: f64,
    /// Sub-rectangle boxes per instance, buried inside the core.
    pub parts_per_instance: usize,
    /// Boxes spanning each adjacent pair.
    pub merge_per_pair: bool,
    /// Uniform random boxes per scene.
    pub random_proposals: usize,
    /// Instance-sized boxes shifted to overlap their instance at IoU just
    /// below 0.1 — hard false positives that end up ignored by the label
    /// assignment.
    pub near_miss_per_instance: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Fraction of boxes whose features leak a random class prototype they
    /// do not overlap — background that merely resembles a class.
    pub spurious_rate: f64,
    /// Identifier of the generator driving all randomness.
    pub rng_algorithm: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 176,
            height: 176,
            num_classes: 3,
            singles_range: (1, 2),
            adjacent_pairs: 1,
            single_size: (32.0, 48.0),
            pair_size: (44.0, 56.0),
            pair_gap: 4.0,
            core_ratio: 0.5,
            falloff_ratio: 1.4,
            noise_amp: 0.05,
            jitter_per_instance: 2,
            jitter_sigma: 0.05,
            parts_per_instance: 1,
            merge_per_pair: true,
            random_proposals: 8,
            near_miss_per_instance: 2,
            feature_dim: 8,
            feature_noise: 0.1,
            spurious_rate: 0.25,
            rng_algorithm: RNG_ALGORITHM.to_string(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidConfig("scene extent below 16x16".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("need at least one class".into()));
        }
        if !(self.core_ratio > 0.0 && self.core_ratio < 1.0 && self.falloff_ratio > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < core_ratio < 1 < falloff_ratio, got ({}, {})",
                self.core_ratio, self.falloff_ratio
            )));
        }
        if self.singles_range.0 > self.singles_range.1 {
            return Err(Error::InvalidConfig("empty singles range".into()));
        }
        if !(self.noise_amp >= 0.0 && self.noise_amp < 0.1) {
            return Err(Error::InvalidConfig(
                "noise amplitude must stay in [0, 0.1) so cores clear the high threshold".into(),
            ));
        }
        if self.feature_dim < self.num_classes + 1 {
            return Err(Error::InvalidConfig(format!(
                "feature_dim {} below num_classes+1 = {}",
                self.feature_dim,
                self.num_classes + 1
            )));
        }
        Ok(())
    }
}

/// Everything generated for one image.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub image_id: usize,
    pub config: SynthConfig,
    pub scene: Scene,
    pub image_labels: Vec<bool>,
    /// One heatmap per present class, ascending class id.
    pub heatmaps: Vec<Heatmap>,
    pub proposals: Vec<BBox>,
    pub ground_truth: Vec<GroundTruth>,
}

impl SceneBundle {
    pub fn box_level_label(&self) -> BoxLevelImageLabel {
        BoxLevelImageLabel::from_present(&self.image_labels)
    }

    /// Features for the raw proposals.
    pub fn proposal_features(&self) -> Array2<f64> {
        self.features_for(&self.proposals)
    }

    /// Class-prototype features for arbitrary boxes: each class contributes
    /// its best IoU against the box, the remainder goes to the background
    /// prototype, and a per-box noise stream (derived from the scene seed
    /// and the box bits, so results do not depend on generation order)
    /// perturbs every dimension.
    pub fn features_for(&self, boxes: &[BBox]) -> Array2<f64> {
        let cfg = &self.config;
        let d = cfg.feature_dim;
        let c = cfg.num_classes;
        let mut out = Array2::zeros((boxes.len(), d));
        for (row, b) in boxes.iter().enumerate() {
            let mut affinity = vec![0.0f64; c];
            for (class_id, inst) in &self.scene.instances {
                let v = iou(b, inst);
                if v > affinity[*class_id] {
                    affinity[*class_id] = v;
                }
            }
            let fg = affinity.iter().cloned().fold(0.0, f64::max);
            let bg = 1.0 - fg;

            let mut noise = SplitMix64::new(mix_seed(self.scene.seed, box_bits(b)));
            let spurious_class = noise.below(c.max(1));
            let spurious = if noise.chance(cfg.spurious_rate) {
                noise.uniform(0.2, 0.6)
            } else {
                0.0
            };
            for j in 0..d {
                let mut proto = if j < c {
                    3.0 * affinity[j]
                } else if j == c {
                    3.0 * bg
                } else {
                    0.0
                };
                if j == spurious_class {
                    proto = (proto + 3.0 * spurious).min(3.0);
                }
                out[[row, j]] = proto + noise.uniform(-cfg.feature_noise, cfg.feature_noise);
            }
        }
        out
    }
}

fn box_bits(b: &BBox) -> u64 {
    let mut h = b.x1.to_bits();
    for v in [b.y1, b.x2, b.y2] {
        h = mix_seed(h, v.to_bits());
    }
    h
}

/// Trapezoid profile along one axis: 1 inside the core interval, linear to
/// 0 at the falloff interval.
fn trapezoid(x: f64, core_lo: f64, core_hi: f64, fall_lo: f64, fall_hi: f64) -> f64 {
    if x >= core_lo && x <= core_hi {
        1.0
    } else if x > fall_lo && x < core_lo {
        (x - fall_lo) / (core_lo - fall_lo)
    } else if x > core_hi && x < fall_hi {
        (fall_hi - x) / (fall_hi - core_hi)
    } else {
        0.0
    }
}

/// Heat contributed by one instance at a point, before noise.
fn instance_heat(b: &BBox, x: f64, y: f64, core_ratio: f64, falloff_ratio: f64) -> f64 {
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    let tx = trapezoid(
        x,
        cx - hw * core_ratio,
        cx + hw * core_ratio,
        cx - hw * falloff_ratio,
        cx + hw * falloff_ratio,
    );
    let ty = trapezoid(
        y,
        cy - hh * core_ratio,
        cy + hh * core_ratio,
        cy - hh * falloff_ratio,
        cy + hh * falloff_ratio,
    );
    tx.min(ty)
}

fn falloff_rect(b: &BBox, falloff_ratio: f64) -> BBox {
    let (cx, cy) = b.center();
    let hw = b.width() / 2.0 * falloff_ratio;
    let hh = b.height() / 2.0 * falloff_ratio;
    BBox::new(cx - hw, cy - hh, cx + hw, cy + hh).expect("falloff rect valid")
}

fn rects_closer_than(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x1 - gap < b.x2 && b.x1 - gap < a.x2 && a.y1 - gap < b.y2 && b.y1 - gap < a.y2
}

struct Placer<'a> {
    cfg: &'a SynthConfig,
    instances: Vec<(usize, BBox)>,
}

impl<'a> Placer<'a> {
    /// Placement is accepted when the falloff footprint keeps a 2 px gap to
    /// every same-class footprint (so low-threshold regions never merge by
    /// accident) and the box itself overlaps nothing else too strongly.
    fn admissible(&self, class_id: usize, boxes: &[BBox]) -> bool {
        for b in boxes {
            let fr = falloff_rect(b, self.cfg.falloff_ratio);
            for (oc, ob) in &self.instances {
                if *oc == class_id
                    && rects_closer_than(&fr, &falloff_rect(ob, self.cfg.falloff_ratio), 2.0)
                {
                    return false;
                }
                if iou(b, ob) > 0.15 {
                    return false;
                }
            }
        }
        true
    }

    fn try_place_single(&mut self, rng: &mut SplitMix64, class_id: usize) {
        let (lo, hi) = self.cfg.single_size;
        for _ in 0..48 {
            let w = rng.uniform(lo, hi);
            let h = rng.uniform(lo, hi);
            let mx = (self.cfg.falloff_ratio - 1.0) / 2.0 * w + 1.0;
            let my = (self.cfg.falloff_ratio - 1.0) / 2.0 * h + 1.0;
            if self.cfg.width as f64 - w - 2.0 * mx <= 0.0
                || self.cfg.height as f64 - h - 2.0 * my <= 0.0
            {
                continue;
            }
            let x1 = rng.uniform(mx, self.cfg.width as f64 - w - mx);
            let y1 = rng.uniform(my, self.cfg.height as f64 - h - my);
            let b = BBox::new(x1, y1, x1 + w, y1 + h).expect("sampled box valid");
            if self.admissible(class_id, &[b]) {
                self.instances.push((class_id, b));
                return;
            }
        }
    }

    fn try_place_pair(&mut self, rng: &mut SplitMix64, class_id: usize) {
        let (lo, hi) = self.cfg.pair_size;
        let gap = self.cfg.pair_gap;
        for _ in 0..48 {
            let w = rng.uniform(lo, hi);
            let h = rng.uniform(lo, hi);
            let horizontal = rng.chance(0.5);
            let (span_w, span_h) = if horizontal {
                (2.0 * w + gap, h)
            } else {
                (w, 2.0 * h + gap)
            };
            let mx = (self.cfg.falloff_ratio - 1.0) / 2.0 * w + 1.0;
            let my = (self.cfg.falloff_ratio - 1.0) / 2.0 * h + 1.0;
            if self.cfg.width as f64 - span_w - 2.0 * mx <= 0.0
                || self.cfg.height as f64 - span_h - 2.0 * my <= 0.0
            {
                continue;
            }
            let x1 = rng.uniform(mx, self.cfg.width as f64 - span_w - mx);
            let y1 = rng.uniform(my, self.cfg.height as f64 - span_h - my);
            let a = BBox::new(x1, y1, x1 + w, y1 + h).expect("pair member valid");
            let b = if horizontal {
                BBox::new(x1 + w + gap, y1, x1 + 2.0 * w + gap, y1 + h)
            } else {
                BBox::new(x1, y1 + h + gap, x1 + w, y1 + 2.0 * h + gap)
            }
            .expect("pair member valid");
            // the pair must violate the falloff separation *with each other*
            // by construction, so only check against previous instances
            if self.admissible(class_id, &[a, b]) {
                self.instances.push((class_id, a));
                self.instances.push((class_id, b));
                return;
            }
        }
    }
}

fn clamp_box(x1: f64, y1: f64, x2: f64, y2: f64, w: f64, h: f64) -> Option<BBox> {
    BBox::new(
        x1.max(0.0),
        y1.max(0.0),
        x2.min(w).max(x1.max(0.0) + 1.0),
        y2.min(h).max(y1.max(0.0) + 1.0),
    )
    .ok()
}

/// Generate one scene: instances, per-class heatmaps, proposals, and ground
/// truth. Bit-deterministic for a fixed seed.
pub fn generate_scene(cfg: &SynthConfig, seed: u64, image_id: usize) -> Result<SceneBundle> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    // --- instances: pairs first (largest footprint), then singles
    let mut placer = Placer {
        cfg,
        instances: Vec::new(),
    };
    let mut pair_ranges: Vec<(usize, usize)> = Vec::new(); // instance index ranges of pairs
    for _ in 0..cfg.adjacent_pairs {
        let class_id = rng.below(cfg.num_classes);
        let before = placer.instances.len();
        placer.try_place_pair(&mut rng, class_id);
        if placer.instances.len() == before + 2 {
            pair_ranges.push((before, before + 1));
        }
    }
    for class_id in 0..cfg.num_classes {
        let n = rng.range_inclusive(cfg.singles_range.0, cfg.singles_range.1);
        for _ in 0..n {
            placer.try_place_single(&mut rng, class_id);
        }
    }
    let instances = placer.instances;

    let mut image_labels = vec![false; cfg.num_classes];
    for (c, _) in &instances {
        image_labels[*c] = true;
    }

    // --- heatmaps for present classes, pixel noise drawn row-major
    let mut heatmaps = Vec::new();
    for class_id in 0..cfg.num_classes {
        if !image_labels[class_id] {
            continue;
        }
        let mut values = Array2::zeros((cfg.height, cfg.width));
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let mut v: f64 = 0.0;
                for (ic, ib) in &instances {
                    if *ic == class_id {
                        v = v.max(instance_heat(ib, x, y, cfg.core_ratio, cfg.falloff_ratio));
                    }
                }
                if cfg.noise_amp > 0.0 {
                    v += cfg.noise_amp * rng.next_f64();
                }
                values[[r, c]] = v;
            }
        }
        heatmaps.push(normalize(&RawActivationMap::new(values, class_id)?));
    }

    // --- proposals: jitters, then parts, then pair spans, then randoms
    let mut proposals = Vec::new();
    for (_, b) in &instances {
        for _ in 0..cfg.jitter_per_instance {
            let dx = cfg.jitter_sigma * b.width();
            let dy = cfg.jitter_sigma * b.height();
            let jb = clamp_box(
                b.x1 + rng.uniform(-dx, dx),
                b.y1 + rng.uniform(-dy, dy),
                b.x2 + rng.uniform(-dx, dx),
                b.y2 + rng.uniform(-dy, dy),
                w,
                h,
            );
            if let Some(jb) = jb {
                proposals.push(jb);
            }
        }
    }
    for (_, b) in &instances {
        for _ in 0..cfg.parts_per_instance {
            // buried inside the core so a heat-driven score ranks it first
            let scale = rng.uniform(0.30, 0.45);
            let (cx, cy) = b.center();
            let ox = rng.uniform(-0.02, 0.02) * b.width();
            let oy = rng.uniform(-0.02, 0.02) * b.height();
            let hw = b.width() / 2.0 * scale;
            let hh = b.height() / 2.0 * scale;
            if let Some(pb) = clamp_box(cx + ox - hw, cy + oy - hh, cx + ox + hw, cy + oy + hh, w, h)
            {
                proposals.push(pb);
            }
        }
    }
    if cfg.merge_per_pair {
        for &(i, j) in &pair_ranges {
            let a = instances[i].1;
            let b = instances[j].1;
            let union = BBox::new(
                a.x1.min(b.x1),
                a.y1.min(b.y1),
                a.x2.max(b.x2),
                a.y2.max(b.y2),
            )
            .expect("pair union valid");
            let (cx, cy) = union.center();
            let hw = union.width() / 2.0 * 1.15;
            let hh = union.height() / 2.0 * 1.15;
            if let Some(mb) = clamp_box(cx - hw, cy - hh, cx + hw, cy + hh, w, h) {
                proposals.push(mb);
            }
        }
    }
    for (_, b) in &instances {
        for _ in 0..cfg.near_miss_per_instance {
            // slide one box-length away minus a sliver, leaving IoU ~ s/(2-s);
            // flip direction when the preferred one would leave the image
            let s = rng.uniform(0.05, 0.14);
            let horizontal = rng.chance(0.5);
            let sign = if rng.chance(0.5) { 1.0 } else { -1.0 };
            for sign in [sign, -sign] {
                let (dx, dy) = if horizontal {
                    (b.width() * (1.0 - s) * sign, 0.0)
                } else {
                    (0.0, b.height() * (1.0 - s) * sign)
                };
                let (x1, y1, x2, y2) = (b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy);
                if x1 >= 0.0 && y1 >= 0.0 && x2 <= w && y2 <= h {
                    proposals.push(BBox::new(x1, y1, x2, y2).expect("shifted box valid"));
                    break;
                }
            }
        }
    }
    for _ in 0..cfg.random_proposals {
        let bw = rng.uniform(8.0, 60.0_f64.min(w - 1.0));
        let bh = rng.uniform(8.0, 60.0_f64.min(h - 1.0));
        let x1 = rng.uniform(0.0, w - bw);
        let y1 = rng.uniform(0.0, h - bh);
        if let Some(rb) = clamp_box(x1, y1, x1 + bw, y1 + bh, w, h) {
            proposals.push(rb);
        }
    }

    let ground_truth = instances
        .iter()
        .map(|&(class_id, bbox)| GroundTruth {
            image_id,
            class_id,
            bbox,
        })
        .collect();

    Ok(SceneBundle {
        image_id,
        config: cfg.clone(),
        scene: Scene {
            width: cfg.width,
            height: cfg.height,
            instances,
            seed,
        },
        image_labels,
        heatmaps,
        proposals,
        ground_truth,
    })
}

/// Heat-concentration scores emulating a classifier that favors
/// discriminative parts: the mean squared heat over the box, per class,
/// with a flat background column. Small boxes buried in an instance core
/// score near 1; tight boxes dilute through the falloff ring; boxes
/// spanning adjacent instances dilute further through the gap.
pub fn heat_scores(
    heatmaps: &[Heatmap],
    num_classes: usize,
    boxes: &[BBox],
    background: f64,
) -> Array2<f64> {
    let mut out = Array2::zeros((boxes.len(), num_classes + 1));
    for (row, b) in boxes.iter().enumerate() {
        for class_id in 0..num_classes {
            let Some(map) = heatmaps.iter().find(|m| m.class_id == class_id) else {
                continue;
            };
            let (hgt, wid) = (map.height(), map.width());
            let r0 = (b.y1 - 0.5).ceil().max(0.0) as usize;
            let r1 = ((b.y2 - 0.5).floor() as isize).min(hgt as isize - 1);
            let c0 = (b.x1 - 0.5).ceil().max(0.0) as usize;
            let c1 = ((b.x2 - 0.5).floor() as isize).min(wid as isize - 1);
            let mut sum = 0.0;
            let mut count = 0usize;
            if r1 >= r0 as isize && c1 >= c0 as isize {
                for r in r0..=(r1 as usize) {
                    for c in c0..=(c1 as usize) {
                        let v = map.values()[[r, c]];
                        sum += v * v;
                        count += 1;
                    }
                }
            }
            out[[row, class_id]] = if count == 0 { 0.0 } else { sum / count as f64 };
        }
        out[[row, num_classes]] = background;
    }
    out
}

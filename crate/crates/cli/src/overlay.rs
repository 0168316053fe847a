//! Minimal rasterizer: heatmap as grayscale background, box outlines on
//! top, written as a binary portable pixmap. No plotting dependency.

use dthcp::geometry::{scale_box, BBox};
use dthcp::heatmap::{threshold_regions, Heatmap, ThresholdLevel};
use dthcp::hgps::{Cluster, HgpsConfig, MemberTag};

const LOW_COLOR: [u8; 3] = [64, 96, 255];
const SCALED_LOW_COLOR: [u8; 3] = [0, 220, 220];
const HIGH_COLOR: [u8; 3] = [255, 64, 64];
const MEMBER_COLOR: [u8; 3] = [64, 255, 64];
const SYNTH_COLOR: [u8; 3] = [255, 64, 255];

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn from_heatmap(map: &Heatmap) -> Self {
        let (h, w) = (map.height(), map.width());
        let mut pixels = vec![0u8; w * h * 3];
        for r in 0..h {
            for c in 0..w {
                let v = (map.values()[[r, c]].clamp(0.0, 1.0) * 255.0) as u8;
                let base = (r * w + c) * 3;
                pixels[base] = v;
                pixels[base + 1] = v;
                pixels[base + 2] = v;
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }

    fn put(&mut self, r: i64, c: i64, color: [u8; 3]) {
        if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
            return;
        }
        let base = (r as usize * self.width + c as usize) * 3;
        self.pixels[base..base + 3].copy_from_slice(&color);
    }

    fn outline(&mut self, b: &BBox, color: [u8; 3]) {
        let x1 = b.x1.floor() as i64;
        let y1 = b.y1.floor() as i64;
        let x2 = (b.x2.ceil() as i64 - 1).max(x1);
        let y2 = (b.y2.ceil() as i64 - 1).max(y1);
        for x in x1..=x2 {
            self.put(y1, x, color);
            self.put(y2, x, color);
        }
        for y in y1..=y2 {
            self.put(y, x1, color);
            self.put(y, x2, color);
        }
    }

    fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Render one class: threshold boxes, their enlargements, and the cluster
/// members for that class.
pub fn render_class_overlay(map: &Heatmap, cfg: &HgpsConfig, clusters: &[Cluster]) -> Vec<u8> {
    let mut canvas = Canvas::from_heatmap(map);
    let bounds = (map.width() as f64, map.height() as f64);

    for low in threshold_regions(map, cfg.tau_low, ThresholdLevel::Low) {
        canvas.outline(&low.bbox, LOW_COLOR);
        if let Ok(scaled) = scale_box(&low.bbox, cfg.r, bounds) {
            canvas.outline(&scaled, SCALED_LOW_COLOR);
        }
    }
    for high in threshold_regions(map, cfg.tau_high, ThresholdLevel::High) {
        canvas.outline(&high.bbox, HIGH_COLOR);
    }
    for cluster in clusters {
        for member in &cluster.members {
            let color = match member.tag {
                MemberTag::Proposal(_) => MEMBER_COLOR,
                _ => SYNTH_COLOR,
            };
            canvas.outline(&member.bbox, color);
        }
    }
    canvas.to_ppm()
}

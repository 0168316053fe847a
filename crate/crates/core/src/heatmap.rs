//! Heatmap processing: normalization, bilinear upsampling, thresholding,
//! connected components, threshold boxes, and the region-level subordinate
//! relation.
//!
//! A raw activation map is an arbitrary finite grid per class. Normalizing
//! it min-max maps it to `[0, 1]`; thresholding the normalized map at a
//! high and a low level produces connected regions whose tightest boxes
//! drive pseudo-GT cluster construction. The subordinate relation ties each
//! high-threshold region to the unique low-threshold region whose pixel set
//! contains it — pixel containment, never box containment, since a box can
//! enclose another box whose region it does not touch.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Unnormalized per-class activation grid.
#[derive(Debug, Clone)]
pub struct RawActivationMap {
    pub class_id: usize,
    values: Array2<f64>,
}

impl RawActivationMap {
    pub fn new(values: Array2<f64>, class_id: usize) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::DimensionMismatch(
                "activation map must be at least 1x1".into(),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("activation map values".into()));
        }
        Ok(Self { class_id, values })
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Min-max normalized heatmap: all values in `[0, 1]`, with min 0 and max 1
/// whenever the source map was non-constant.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub class_id: usize,
    values: Array2<f64>,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Min-max normalize: `v' = (v - min) / (max - min)`. A constant map carries
/// no localization signal and normalizes to all zeros, which makes the
/// degenerate case explicit downstream (no threshold region survives any
/// positive threshold).
pub fn normalize(raw: &RawActivationMap) -> Heatmap {
    let min = raw.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        raw.values.mapv(|v| (v - min) / (max - min))
    } else {
        Array2::zeros(raw.values.raw_dim())
    };
    Heatmap {
        class_id: raw.class_id,
        values,
    }
}

/// Corner-aligned bilinear interpolation to `height x width`. Corner
/// alignment preserves extremal positions, so normalization before or after
/// a resize agrees at the corners. Output extremes are bounded by input
/// extremes.
pub fn upsample_bilinear(
    raw: &RawActivationMap,
    height: usize,
    width: usize,
) -> Result<RawActivationMap> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig(
            "upsample target dimensions must be positive".into(),
        ));
    }
    let (sh, sw) = (raw.height(), raw.width());
    if sh == height && sw == width {
        return Ok(raw.clone());
    }

    let src_pos = |i: usize, out_n: usize, src_n: usize| -> f64 {
        if out_n <= 1 || src_n <= 1 {
            0.0
        } else {
            i as f64 * (src_n - 1) as f64 / (out_n - 1) as f64
        }
    };

    let mut out = Array2::zeros((height, width));
    for i in 0..height {
        let sy = src_pos(i, height, sh);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f64;
        for j in 0..width {
            let sx = src_pos(j, width, sw);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - x0 as f64;
            let v00 = raw.values[[y0, x0]];
            let v01 = raw.values[[y0, x1]];
            let v10 = raw.values[[y1, x0]];
            let v11 = raw.values[[y1, x1]];
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            let v = top + (bottom - top) * fy;
            // clamp away interpolation rounding so output extremes never
            // escape the corner values
            let lo = v00.min(v01).min(v10).min(v11);
            let hi = v00.max(v01).max(v10).max(v11);
            out[[i, j]] = v.clamp(lo, hi);
        }
    }
    RawActivationMap::new(out, raw.class_id)
}

/// Which neighbors count as connected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Whether a threshold region came from the high or the low threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdLevel {
    High,
    Low,
}

/// One connected region of a thresholded heatmap.
#[derive(Debug, Clone)]
pub struct ThresholdRegion {
    pub id: usize,
    /// Member pixels as (row, col), sorted row-major.
    pub pixels: Vec<(usize, usize)>,
    /// Tightest axis-aligned cover: pixel (row, col) occupies the unit
    /// square [col, col+1] x [row, row+1].
    pub bbox: BBox,
    pub level: ThresholdLevel,
    pub threshold: f64,
}

impl ThresholdRegion {
    /// Binary search over the sorted pixel list.
    pub fn contains_pixel(&self, pixel: (usize, usize)) -> bool {
        self.pixels.binary_search(&pixel).is_ok()
    }
}

/// Maps each high-threshold region id to the low-threshold region id whose
/// pixel set contains it. Total over the high regions it was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubordinateMap {
    high_to_low: Vec<usize>,
}

impl SubordinateMap {
    pub fn low_of(&self, high_id: usize) -> usize {
        self.high_to_low[high_id]
    }

    pub fn len(&self) -> usize {
        self.high_to_low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high_to_low.is_empty()
    }

    /// High region ids grouped per low region, preserving high-id order.
    pub fn grouped(&self, num_lows: usize) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); num_lows];
        for (high, &low) in self.high_to_low.iter().enumerate() {
            groups[low].push(high);
        }
        groups
    }
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // attach the larger root under the smaller to keep labels stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Union-find connected-component labeling of a boolean mask.
///
/// Returns one sorted pixel list per component, ordered by the region's
/// (min row, min col), with the row-major first pixel as the final
/// tie-break.
pub fn connected_components(
    mask: &Array2<bool>,
    connectivity: Connectivity,
) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let idx = |r: usize, c: usize| r * w + c;
    let mut sets = DisjointSets::new(h * w);

    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            if c > 0 && mask[[r, c - 1]] {
                sets.union(idx(r, c), idx(r, c - 1));
            }
            if r > 0 {
                if mask[[r - 1, c]] {
                    sets.union(idx(r, c), idx(r - 1, c));
                }
                if connectivity == Connectivity::Eight {
                    if c > 0 && mask[[r - 1, c - 1]] {
                        sets.union(idx(r, c), idx(r - 1, c - 1));
                    }
                    if c + 1 < w && mask[[r - 1, c + 1]] {
                        sets.union(idx(r, c), idx(r - 1, c + 1));
                    }
                }
            }
        }
    }

    // Gather pixels per root in row-major order.
    let mut by_root: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    let mut root_slot = vec![usize::MAX; h * w];
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let root = sets.find(idx(r, c));
            let slot = if root_slot[root] == usize::MAX {
                root_slot[root] = by_root.len();
                by_root.push((root, Vec::new()));
                by_root.len() - 1
            } else {
                root_slot[root]
            };
            by_root[slot].1.push((r, c));
        }
    }

    let mut regions: Vec<Vec<(usize, usize)>> = by_root.into_iter().map(|(_, px)| px).collect();
    regions.sort_by_key(|px| {
        let min_row = px.iter().map(|p| p.0).min().unwrap();
        let min_col = px.iter().map(|p| p.1).min().unwrap();
        (min_row, min_col, px[0])
    });
    regions
}

fn region_bbox(pixels: &[(usize, usize)]) -> BBox {
    let min_row = pixels.iter().map(|p| p.0).min().unwrap();
    let max_row = pixels.iter().map(|p| p.0).max().unwrap();
    let min_col = pixels.iter().map(|p| p.1).min().unwrap();
    let max_col = pixels.iter().map(|p| p.1).max().unwrap();
    BBox::new(
        min_col as f64,
        min_row as f64,
        (max_col + 1) as f64,
        (max_row + 1) as f64,
    )
    .expect("pixel region box is non-degenerate")
}

/// Connected regions of the mask `{v >= tau}` under 8-connectivity, each
/// with its tightest box. Thresholding is inclusive so the max-valued pixel
/// (value 1.0) is captured by any `tau <= 1`. Region ids follow the
/// (min row, min col) ordering.
pub fn threshold_regions(h: &Heatmap, tau: f64, level: ThresholdLevel) -> Vec<ThresholdRegion> {
    let mask = h.values.mapv(|v| v >= tau);
    connected_components(&mask, Connectivity::Eight)
        .into_iter()
        .enumerate()
        .map(|(id, pixels)| {
            let bbox = region_bbox(&pixels);
            ThresholdRegion {
                id,
                pixels,
                bbox,
                level,
                threshold: tau,
            }
        })
        .collect()
}

/// Resolve the subordinate relation: each high region maps to the low
/// region containing its pixels. With `tau_high > tau_low` on the same
/// heatmap every high pixel lies in the low mask and a connected high
/// region cannot straddle two low components, so one member pixel settles
/// the mapping. Fails loudly when fed regions that violate that
/// precondition.
pub fn subordinate(highs: &[ThresholdRegion], lows: &[ThresholdRegion]) -> Result<SubordinateMap> {
    let mut high_to_low = Vec::with_capacity(highs.len());
    for high in highs {
        let probe = *high
            .pixels
            .first()
            .ok_or_else(|| Error::Invariant("threshold region with empty pixel set".into()))?;
        let low_id = lows
            .iter()
            .find(|low| low.contains_pixel(probe))
            .map(|low| low.id)
            .ok_or_else(|| {
                Error::Invariant(format!(
                    "high region {} pixel {:?} lies in no low region",
                    high.id, probe
                ))
            })?;
        high_to_low.push(low_id);
    }
    Ok(SubordinateMap { high_to_low })
}

/// Write a grid as the text format: line 1 `H W`, then H lines of W
/// space-separated decimal floats.
pub fn write_grid<W: Write>(mut w: W, values: &Array2<f64>) -> Result<()> {
    writeln!(w, "{} {}", values.nrows(), values.ncols())?;
    for row in values.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn write_grid_file<P: AsRef<Path>>(path: P, values: &Array2<f64>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_grid(std::io::BufWriter::new(file), values)
}

/// Read the text-grid format back into an array.
pub fn read_grid<R: BufRead>(r: R) -> Result<Array2<f64>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty heatmap file".into()))??;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(format!("bad heatmap header '{header}': {e}")))?;
    if dims.len() != 2 {
        return Err(Error::Parse(format!("bad heatmap header '{header}'")));
    }
    let (h, w) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("heatmap file truncated at row {i}")))??;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("bad heatmap row {i}: {e}")))?;
        if row.len() != w {
            return Err(Error::Parse(format!(
                "heatmap row {i} has {} values, expected {w}",
                row.len()
            )));
        }
        data.extend(row);
    }
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::Parse(format!("heatmap shape error: {e}")))
}

pub fn read_grid_file<P: AsRef<Path>>(path: P) -> Result<Array2<f64>> {
    let file = std::fs::File::open(path)?;
    read_grid(BufReader::new(file))
}

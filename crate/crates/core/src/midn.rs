//! Multiple-instance scoring stacks and their losses.
//!
//! The base module (WSBDN) runs two parallel linear branches over proposal
//! features: a classification branch softmaxed along the class dimension
//! and a weighting branch softmaxed along the proposal dimension. Their
//! element-wise product sums over proposals into an image-level score that
//! is provably inside `[0, 1]` per class, which supports a binary
//! cross-entropy image loss. Refinement stages use a single class-softmax
//! branch each. The WSDDN/OICR baselines (C-dimensional heads, `1/R`
//! normalization) are kept alongside for comparison.
//!
//! Every loss has a matching analytic gradient, and the module ships the
//! central finite-difference checker used to verify them.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hgps::{AssignedLabels, ProposalLabel};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside every log;
/// saturated regimes can hit 0 or 1 exactly.
pub const PROB_EPS: f64 = 1e-7;

/// Validated proposal feature matrix, one row per scored box.
#[derive(Debug, Clone)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::DimensionMismatch(
                "feature matrix must be at least 1x1".into(),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self(values))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn num_rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Which branch a linear head implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadRole {
    Cls,
    Wgt,
    Ir(usize),
}

/// Affine map from features to logits: `logits = F W + b`.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub role: HeadRole,
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl LinearHead {
    pub fn new(role: HeadRole, weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::DimensionMismatch(format!(
                "head weight is {}x{} but bias has {} entries",
                weight.nrows(),
                weight.ncols(),
                bias.len()
            )));
        }
        if !weight.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("head parameters".into()));
        }
        Ok(Self { role, weight, bias })
    }

    pub fn zeros(role: HeadRole, input_dim: usize, output_dim: usize) -> Self {
        Self {
            role,
            weight: Array2::zeros((input_dim, output_dim)),
            bias: Array1::zeros(output_dim),
        }
    }

    /// Fill parameters from a generator, weights first (row-major), then bias.
    pub fn from_fn(
        role: HeadRole,
        input_dim: usize,
        output_dim: usize,
        mut f: impl FnMut() -> f64,
    ) -> Result<Self> {
        let weight = Array2::from_shape_fn((input_dim, output_dim), |_| f());
        let bias = Array1::from_shape_fn(output_dim, |_| f());
        Self::new(role, weight, bias)
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn logits(&self, features: &FeatureMatrix) -> Result<Array2<f64>> {
        if features.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "features have dim {}, head expects {}",
                features.dim(),
                self.input_dim()
            )));
        }
        Ok(features.matrix().dot(&self.weight) + &self.bias)
    }
}

/// Numerically stable softmax along rows (the class dimension).
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Numerically stable softmax along columns (the proposal dimension).
pub fn softmax_cols(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut col in out.columns_mut() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// Outputs of a WSBDN forward pass over `R x (C+1)` logits.
#[derive(Debug, Clone)]
pub struct ScoreStack {
    pub logits_cls: Array2<f64>,
    pub logits_wgt: Array2<f64>,
    /// Class-wise softmax of the classification logits; rows sum to 1.
    pub s: Array2<f64>,
    /// Proposal-wise softmax of the weighting logits; columns sum to 1.
    pub w: Array2<f64>,
    /// Element-wise product `s ⊙ w`.
    pub ws: Array2<f64>,
    /// Column sums of `ws`; each entry lies in `[0, 1]`.
    pub s_img: Array1<f64>,
}

/// Image-level label over `C+1` entries with the background entry pinned
/// to 1: every image contains proposals representing the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxLevelImageLabel {
    y: Vec<f64>,
}

impl BoxLevelImageLabel {
    /// Build from per-class presence flags; appends the background entry.
    pub fn from_present(present: &[bool]) -> Self {
        let mut y: Vec<f64> = present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        y.push(1.0);
        Self { y }
    }

    pub fn from_raw(y: Vec<f64>) -> Result<Self> {
        if y.is_empty() || *y.last().unwrap() != 1.0 {
            return Err(Error::InvalidConfig(
                "box-level image label must end with a background entry of 1".into(),
            ));
        }
        if !y.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::InvalidConfig(
                "box-level image label entries must be 0 or 1".into(),
            ));
        }
        Ok(Self { y })
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    /// Number of foreground classes C (label length minus background).
    pub fn num_classes(&self) -> usize {
        self.y.len() - 1
    }

    pub fn is_absent(&self, column: usize) -> bool {
        self.y[column] == 0.0
    }
}

/// WSBDN forward: affine logits, class-wise and proposal-wise softmax,
/// Hadamard product, and image score by column sum. The image score is
/// clamped onto `[0, 1]` to keep the proven bound exact under float
/// rounding; anything further out is an internal error.
pub fn forward_wsbdn(
    features: &FeatureMatrix,
    cls: &LinearHead,
    wgt: &LinearHead,
) -> Result<ScoreStack> {
    if cls.output_dim() != wgt.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "cls head has {} outputs, wgt head {}",
            cls.output_dim(),
            wgt.output_dim()
        )));
    }
    let logits_cls = cls.logits(features)?;
    let logits_wgt = wgt.logits(features)?;
    let s = softmax_rows(&logits_cls);
    let w = softmax_cols(&logits_wgt);
    let ws = &s * &w;
    let raw_img = ws.sum_axis(Axis(0));
    for &v in raw_img.iter() {
        if !(-1e-9..=1.0 + 1e-9).contains(&v) {
            return Err(Error::Invariant(format!("image score {v} outside [0, 1]")));
        }
    }
    let s_img = raw_img.mapv(|v| v.clamp(0.0, 1.0));
    Ok(ScoreStack {
        logits_cls,
        logits_wgt,
        s,
        w,
        ws,
        s_img,
    })
}

/// Refinement-stage forward: class-wise softmax of one head's logits.
pub fn forward_ir(features: &FeatureMatrix, head: &LinearHead) -> Result<Array2<f64>> {
    Ok(softmax_rows(&head.logits(features)?))
}

/// Outputs of the baseline two-stream forward over `R x C` logits (no
/// background column).
#[derive(Debug, Clone)]
pub struct WsddnStack {
    pub s: Array2<f64>,
    pub w: Array2<f64>,
    pub prod: Array2<f64>,
    pub img: Array1<f64>,
}

pub fn forward_wsddn(
    features: &FeatureMatrix,
    cls: &LinearHead,
    det: &LinearHead,
) -> Result<WsddnStack> {
    if cls.output_dim() != det.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "cls head has {} outputs, det head {}",
            cls.output_dim(),
            det.output_dim()
        )));
    }
    let s = softmax_rows(&cls.logits(features)?);
    let w = softmax_cols(&det.logits(features)?);
    let prod = &s * &w;
    let img = prod.sum_axis(Axis(0)).mapv(|v| v.clamp(0.0, 1.0));
    Ok(WsddnStack { s, w, prod, img })
}

fn bce(probs: &[f64], targets: &[f64]) -> f64 {
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

/// Binary cross-entropy between the image score and the box-level label.
pub fn loss_img(stack: &ScoreStack, y: &BoxLevelImageLabel) -> Result<f64> {
    if stack.s_img.len() != y.values().len() {
        return Err(Error::DimensionMismatch(format!(
            "image score has {} entries, label {}",
            stack.s_img.len(),
            y.values().len()
        )));
    }
    Ok(bce(stack.s_img.as_slice().unwrap(), y.values()))
}

/// Baseline image loss over C foreground classes only.
pub fn loss_wsddn_baseline(stack: &WsddnStack, y_fg: &[f64]) -> Result<f64> {
    if stack.img.len() != y_fg.len() {
        return Err(Error::DimensionMismatch(format!(
            "image score has {} entries, label {}",
            stack.img.len(),
            y_fg.len()
        )));
    }
    Ok(bce(stack.img.as_slice().unwrap(), y_fg))
}

/// A loss value together with the size of its normalizing set; a zero count
/// means the loss degenerated to 0 because the set was empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub count: usize,
}

impl LossTerm {
    pub const ZERO: LossTerm = LossTerm {
        value: 0.0,
        count: 0,
    };

    pub fn is_degenerate(&self) -> bool {
        self.count == 0
    }
}

fn label_column(label: &ProposalLabel, ncols: usize) -> Result<Option<usize>> {
    match *label {
        ProposalLabel::Foreground(c) => {
            if c + 1 >= ncols {
                Err(Error::DimensionMismatch(format!(
                    "label class {c} outside score matrix with {ncols} columns"
                )))
            } else {
                Ok(Some(c))
            }
        }
        ProposalLabel::Background => Ok(Some(ncols - 1)),
        ProposalLabel::Ignored => Ok(None),
    }
}

fn check_label_rows(scores: &Array2<f64>, labels: &AssignedLabels) -> Result<()> {
    if scores.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "score matrix has {} rows, labels cover {}",
            scores.nrows(),
            labels.len()
        )));
    }
    Ok(())
}

/// Cross-entropy over non-ignored proposals, normalized by their count.
/// `weighted = false` treats every weight as 1. An image whose proposals
/// are all ignored yields 0 with a zero count rather than poisoning a
/// batch.
pub fn loss_cls(scores: &Array2<f64>, labels: &AssignedLabels, weighted: bool) -> Result<LossTerm> {
    check_label_rows(scores, labels)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, label) in labels.labels.iter().enumerate() {
        let Some(col) = label_column(label, scores.ncols())? else {
            continue;
        };
        let w = if weighted { labels.weights[r] } else { 1.0 };
        sum -= w * scores[[r, col]].max(PROB_EPS).ln();
        count += 1;
    }
    if count == 0 {
        return Ok(LossTerm::ZERO);
    }
    Ok(LossTerm {
        value: sum / count as f64,
        count,
    })
}

/// Negative-certainty loss on ignored proposals: push their scores toward 0
/// on every class absent from the image. The background column never
/// contributes because its label entry is pinned to 1.
pub fn loss_cls_ign(
    scores: &Array2<f64>,
    labels: &AssignedLabels,
    y: &BoxLevelImageLabel,
) -> Result<LossTerm> {
    check_label_rows(scores, labels)?;
    if scores.ncols() != y.values().len() {
        return Err(Error::DimensionMismatch(format!(
            "score matrix has {} columns, label {}",
            scores.ncols(),
            y.values().len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, label) in labels.labels.iter().enumerate() {
        if !matches!(label, ProposalLabel::Ignored) {
            continue;
        }
        count += 1;
        for c in 0..scores.ncols() {
            if y.is_absent(c) {
                sum -= (1.0 - scores[[r, c]]).max(PROB_EPS).ln();
            }
        }
    }
    if count == 0 {
        return Ok(LossTerm::ZERO);
    }
    Ok(LossTerm {
        value: sum / count as f64,
        count,
    })
}

/// Baseline refinement loss: weighted cross-entropy normalized by the full
/// proposal count R. Differs from [`loss_cls`] only in the normalizer.
pub fn loss_oicr_baseline(scores: &Array2<f64>, labels: &AssignedLabels) -> Result<f64> {
    check_label_rows(scores, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (r, label) in labels.labels.iter().enumerate() {
        let Some(col) = label_column(label, scores.ncols())? else {
            continue;
        };
        sum -= labels.weights[r] * scores[[r, col]].max(PROB_EPS).ln();
    }
    Ok(sum / labels.len() as f64)
}

/// Per-stage classification + negative-certainty pair.
#[derive(Debug, Clone, Copy)]
pub struct StageLosses {
    pub cls: f64,
    pub cls_ign: f64,
}

/// Total objective: image loss plus the base-stage pair plus one pair per
/// refinement stage.
pub fn loss_total_dthcp(l_img: f64, base: StageLosses, ir: &[StageLosses]) -> f64 {
    l_img + base.cls + base.cls_ign + ir.iter().map(|s| s.cls + s.cls_ign).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Analytic gradients
// ---------------------------------------------------------------------------

/// Gradient of one head's parameters.
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl HeadGrad {
    pub fn zeros_like(head: &LinearHead) -> Self {
        Self {
            weight: Array2::zeros((head.input_dim(), head.output_dim())),
            bias: Array1::zeros(head.output_dim()),
        }
    }

    pub fn add(&mut self, other: &HeadGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight *= factor;
        self.bias *= factor;
    }

    pub fn is_finite(&self) -> bool {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

/// Backprop `dL/ds -> dL/dlogits` through a row softmax.
fn grad_row_softmax(s: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(s.raw_dim());
    for r in 0..s.nrows() {
        let inner: f64 = (0..s.ncols()).map(|c| g[[r, c]] * s[[r, c]]).sum();
        for c in 0..s.ncols() {
            out[[r, c]] = s[[r, c]] * (g[[r, c]] - inner);
        }
    }
    out
}

/// Backprop `dL/dw -> dL/dlogits` through a column softmax.
fn grad_col_softmax(w: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(w.raw_dim());
    for c in 0..w.ncols() {
        let inner: f64 = (0..w.nrows()).map(|r| g[[r, c]] * w[[r, c]]).sum();
        for r in 0..w.nrows() {
            out[[r, c]] = w[[r, c]] * (g[[r, c]] - inner);
        }
    }
    out
}

fn head_grads(features: &FeatureMatrix, dlogits: &Array2<f64>) -> HeadGrad {
    HeadGrad {
        weight: features.matrix().t().dot(dlogits),
        bias: dlogits.sum_axis(Axis(0)),
    }
}

/// `dL/dp` for a clamped binary cross-entropy term; zero where the clamp is
/// active.
fn bce_prob_grad(p: f64, y: f64) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        0.0
    } else {
        -y / p + (1.0 - y) / (1.0 - p)
    }
}

fn grad_two_stream(
    features: &FeatureMatrix,
    cls: &LinearHead,
    wgt: &LinearHead,
    s: &Array2<f64>,
    w: &Array2<f64>,
    img: &Array1<f64>,
    targets: &[f64],
) -> (HeadGrad, HeadGrad, Array2<f64>) {
    let gp: Vec<f64> = img
        .iter()
        .zip(targets)
        .map(|(&p, &t)| bce_prob_grad(p, t))
        .collect();
    let (rows, cols) = s.dim();
    let mut g_s = Array2::zeros((rows, cols));
    let mut g_w = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            g_s[[r, c]] = gp[c] * w[[r, c]];
            g_w[[r, c]] = gp[c] * s[[r, c]];
        }
    }
    let dz_cls = grad_row_softmax(s, &g_s);
    let dz_wgt = grad_col_softmax(w, &g_w);
    let d_features = dz_cls.dot(&cls.weight().t()) + dz_wgt.dot(&wgt.weight().t());
    (
        head_grads(features, &dz_cls),
        head_grads(features, &dz_wgt),
        d_features,
    )
}

/// Gradients of the image loss w.r.t. both WSBDN heads and the features.
pub fn grad_loss_img(
    features: &FeatureMatrix,
    cls: &LinearHead,
    wgt: &LinearHead,
    y: &BoxLevelImageLabel,
) -> Result<(HeadGrad, HeadGrad, Array2<f64>)> {
    let stack = forward_wsbdn(features, cls, wgt)?;
    if stack.s_img.len() != y.values().len() {
        return Err(Error::DimensionMismatch(format!(
            "image score has {} entries, label {}",
            stack.s_img.len(),
            y.values().len()
        )));
    }
    Ok(grad_two_stream(
        features,
        cls,
        wgt,
        &stack.s,
        &stack.w,
        &stack.s_img,
        y.values(),
    ))
}

/// Gradients of the baseline image loss (C columns, no background).
pub fn grad_loss_wsddn(
    features: &FeatureMatrix,
    cls: &LinearHead,
    det: &LinearHead,
    y_fg: &[f64],
) -> Result<(HeadGrad, HeadGrad, Array2<f64>)> {
    let stack = forward_wsddn(features, cls, det)?;
    if stack.img.len() != y_fg.len() {
        return Err(Error::DimensionMismatch(format!(
            "image score has {} entries, label {}",
            stack.img.len(),
            y_fg.len()
        )));
    }
    Ok(grad_two_stream(
        features, cls, det, &stack.s, &stack.w, &stack.img, y_fg,
    ))
}

/// Shared tail of the classification-style gradients: `dL/ds` through the
/// row softmax of `head`, then into parameters and features.
fn grad_from_score_grad(
    features: &FeatureMatrix,
    head: &LinearHead,
    scores: &Array2<f64>,
    g_s: &Array2<f64>,
) -> (HeadGrad, Array2<f64>) {
    let dz = grad_row_softmax(scores, g_s);
    let d_features = dz.dot(&head.weight().t());
    (head_grads(features, &dz), d_features)
}

/// Gradient of [`loss_cls`] w.r.t. the head that produced the class scores.
pub fn grad_loss_cls(
    features: &FeatureMatrix,
    head: &LinearHead,
    labels: &AssignedLabels,
    weighted: bool,
) -> Result<(HeadGrad, Array2<f64>)> {
    let scores = forward_ir(features, head)?;
    check_label_rows(&scores, labels)?;
    let active = labels.num_active();
    let mut g_s = Array2::zeros(scores.raw_dim());
    if active > 0 {
        let norm = active as f64;
        for (r, label) in labels.labels.iter().enumerate() {
            let Some(col) = label_column(label, scores.ncols())? else {
                continue;
            };
            let w = if weighted { labels.weights[r] } else { 1.0 };
            let p = scores[[r, col]];
            if p > PROB_EPS {
                g_s[[r, col]] = -w / (p * norm);
            }
        }
    }
    Ok(grad_from_score_grad(features, head, &scores, &g_s))
}

/// Gradient of [`loss_cls_ign`].
pub fn grad_loss_cls_ign(
    features: &FeatureMatrix,
    head: &LinearHead,
    labels: &AssignedLabels,
    y: &BoxLevelImageLabel,
) -> Result<(HeadGrad, Array2<f64>)> {
    let scores = forward_ir(features, head)?;
    check_label_rows(&scores, labels)?;
    let ignored = labels.num_ignored();
    let mut g_s = Array2::zeros(scores.raw_dim());
    if ignored > 0 {
        let norm = ignored as f64;
        for (r, label) in labels.labels.iter().enumerate() {
            if !matches!(label, ProposalLabel::Ignored) {
                continue;
            }
            for c in 0..scores.ncols() {
                if y.is_absent(c) {
                    let q = 1.0 - scores[[r, c]];
                    if q > PROB_EPS {
                        g_s[[r, c]] = 1.0 / (q * norm);
                    }
                }
            }
        }
    }
    Ok(grad_from_score_grad(features, head, &scores, &g_s))
}

/// Gradient of [`loss_oicr_baseline`].
pub fn grad_loss_oicr(
    features: &FeatureMatrix,
    head: &LinearHead,
    labels: &AssignedLabels,
) -> Result<(HeadGrad, Array2<f64>)> {
    let scores = forward_ir(features, head)?;
    check_label_rows(&scores, labels)?;
    let mut g_s = Array2::zeros(scores.raw_dim());
    if !labels.is_empty() {
        let norm = labels.len() as f64;
        for (r, label) in labels.labels.iter().enumerate() {
            let Some(col) = label_column(label, scores.ncols())? else {
                continue;
            };
            let p = scores[[r, col]];
            if p > PROB_EPS {
                g_s[[r, col]] = -labels.weights[r] / (p * norm);
            }
        }
    }
    Ok(grad_from_score_grad(features, head, &scores, &g_s))
}

// ---------------------------------------------------------------------------
// Full model: base module plus K refinement heads
// ---------------------------------------------------------------------------

/// All learnable parameters of the detector.
#[derive(Debug, Clone)]
pub struct DthcpModel {
    pub cls: LinearHead,
    pub wgt: LinearHead,
    pub ir: Vec<LinearHead>,
}

impl DthcpModel {
    pub fn heads(&self) -> impl Iterator<Item = &LinearHead> {
        [&self.cls, &self.wgt].into_iter().chain(self.ir.iter())
    }
}

/// Frozen supervision for one image and one optimizer step. Labels and
/// weights are treated as constants: selection is not differentiated
/// through.
#[derive(Debug, Clone, Copy)]
pub struct DthcpSupervision<'a> {
    pub image_label: &'a BoxLevelImageLabel,
    pub base_labels: &'a AssignedLabels,
    pub ir_labels: &'a [AssignedLabels],
    pub use_cls_ign: bool,
}

/// Loss breakdown for one image.
#[derive(Debug, Clone)]
pub struct DthcpLosses {
    pub img: f64,
    pub base_cls: LossTerm,
    pub base_cls_ign: LossTerm,
    pub ir: Vec<(LossTerm, LossTerm)>,
    pub total: f64,
}

fn check_supervision(model: &DthcpModel, sup: &DthcpSupervision) -> Result<()> {
    if sup.ir_labels.len() != model.ir.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} refinement label sets for {} heads",
            sup.ir_labels.len(),
            model.ir.len()
        )));
    }
    Ok(())
}

/// Evaluate the full objective for one image under frozen supervision.
pub fn loss_dthcp(
    features: &FeatureMatrix,
    model: &DthcpModel,
    sup: &DthcpSupervision,
) -> Result<DthcpLosses> {
    check_supervision(model, sup)?;
    let stack = forward_wsbdn(features, &model.cls, &model.wgt)?;
    let img = loss_img(&stack, sup.image_label)?;
    let base_cls = loss_cls(&stack.s, sup.base_labels, false)?;
    let base_cls_ign = if sup.use_cls_ign {
        loss_cls_ign(&stack.s, sup.base_labels, sup.image_label)?
    } else {
        LossTerm::ZERO
    };

    let mut ir = Vec::with_capacity(model.ir.len());
    for (head, labels) in model.ir.iter().zip(sup.ir_labels) {
        let scores = forward_ir(features, head)?;
        let cls = loss_cls(&scores, labels, true)?;
        let cls_ign = if sup.use_cls_ign {
            loss_cls_ign(&scores, labels, sup.image_label)?
        } else {
            LossTerm::ZERO
        };
        ir.push((cls, cls_ign));
    }

    let stage_pairs: Vec<StageLosses> = ir
        .iter()
        .map(|(c, i)| StageLosses {
            cls: c.value,
            cls_ign: i.value,
        })
        .collect();
    let total = loss_total_dthcp(
        img,
        StageLosses {
            cls: base_cls.value,
            cls_ign: base_cls_ign.value,
        },
        &stage_pairs,
    );
    Ok(DthcpLosses {
        img,
        base_cls,
        base_cls_ign,
        ir,
        total,
    })
}

/// Gradients of the full objective w.r.t. every head and the features.
#[derive(Debug, Clone)]
pub struct DthcpGrads {
    pub cls: HeadGrad,
    pub wgt: HeadGrad,
    pub ir: Vec<HeadGrad>,
    pub features: Array2<f64>,
}

impl DthcpGrads {
    pub fn zeros_like(model: &DthcpModel, num_rows: usize, dim: usize) -> Self {
        Self {
            cls: HeadGrad::zeros_like(&model.cls),
            wgt: HeadGrad::zeros_like(&model.wgt),
            ir: model.ir.iter().map(HeadGrad::zeros_like).collect(),
            features: Array2::zeros((num_rows, dim)),
        }
    }

    pub fn add(&mut self, other: &DthcpGrads) {
        self.cls.add(&other.cls);
        self.wgt.add(&other.wgt);
        for (a, b) in self.ir.iter_mut().zip(&other.ir) {
            a.add(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.cls.scale(factor);
        self.wgt.scale(factor);
        for g in &mut self.ir {
            g.scale(factor);
        }
    }
}

pub fn grad_dthcp(
    features: &FeatureMatrix,
    model: &DthcpModel,
    sup: &DthcpSupervision,
) -> Result<DthcpGrads> {
    check_supervision(model, sup)?;
    let (mut g_cls, g_wgt, mut g_feat) =
        grad_loss_img(features, &model.cls, &model.wgt, sup.image_label)?;

    let (g, df) = grad_loss_cls(features, &model.cls, sup.base_labels, false)?;
    g_cls.add(&g);
    g_feat += &df;
    if sup.use_cls_ign {
        let (g, df) = grad_loss_cls_ign(features, &model.cls, sup.base_labels, sup.image_label)?;
        g_cls.add(&g);
        g_feat += &df;
    }

    let mut g_ir = Vec::with_capacity(model.ir.len());
    for (head, labels) in model.ir.iter().zip(sup.ir_labels) {
        let (mut g, df) = grad_loss_cls(features, head, labels, true)?;
        g_feat += &df;
        if sup.use_cls_ign {
            let (gi, dfi) = grad_loss_cls_ign(features, head, labels, sup.image_label)?;
            g.add(&gi);
            g_feat += &dfi;
        }
        g_ir.push(g);
    }
    Ok(DthcpGrads {
        cls: g_cls,
        wgt: g_wgt,
        ir: g_ir,
        features: g_feat,
    })
}

/// One SGD update with weight decay folded into the gradient:
/// `θ <- θ - lr (g + wd θ)`.
pub fn sgd_step(head: &mut LinearHead, grad: &HeadGrad, lr: f64, weight_decay: f64) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient in sgd step".into()));
    }
    if grad.weight.raw_dim() != head.weight.raw_dim() || grad.bias.len() != head.bias.len() {
        return Err(Error::DimensionMismatch("gradient/head shapes".into()));
    }
    head.weight.zip_mut_with(&grad.weight, |w, &g| {
        *w -= lr * (g + weight_decay * *w);
    });
    head.bias.zip_mut_with(&grad.bias, |b, &g| {
        *b -= lr * (g + weight_decay * *b);
    });
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

/// Central finite-difference gradient of `f` w.r.t. every parameter of
/// `head`.
pub fn fd_head_grad(head: &LinearHead, h: f64, mut f: impl FnMut(&LinearHead) -> f64) -> HeadGrad {
    let mut probe = head.clone();
    let mut weight = Array2::zeros(head.weight.raw_dim());
    for r in 0..head.weight.nrows() {
        for c in 0..head.weight.ncols() {
            let orig = probe.weight[[r, c]];
            probe.weight[[r, c]] = orig + h;
            let plus = f(&probe);
            probe.weight[[r, c]] = orig - h;
            let minus = f(&probe);
            probe.weight[[r, c]] = orig;
            weight[[r, c]] = (plus - minus) / (2.0 * h);
        }
    }
    let mut bias = Array1::zeros(head.bias.len());
    for i in 0..head.bias.len() {
        let orig = probe.bias[i];
        probe.bias[i] = orig + h;
        let plus = f(&probe);
        probe.bias[i] = orig - h;
        let minus = f(&probe);
        probe.bias[i] = orig;
        bias[i] = (plus - minus) / (2.0 * h);
    }
    HeadGrad { weight, bias }
}

/// Central finite-difference gradient of `f` w.r.t. every feature entry.
pub fn fd_features_grad(
    features: &FeatureMatrix,
    h: f64,
    mut f: impl FnMut(&FeatureMatrix) -> f64,
) -> Array2<f64> {
    let mut probe = features.clone();
    let mut out = Array2::zeros(probe.0.raw_dim());
    for r in 0..probe.0.nrows() {
        for c in 0..probe.0.ncols() {
            let orig = probe.0[[r, c]];
            probe.0[[r, c]] = orig + h;
            let plus = f(&probe);
            probe.0[[r, c]] = orig - h;
            let minus = f(&probe);
            probe.0[[r, c]] = orig;
            out[[r, c]] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

/// Relative error with a small floor so finite-difference noise on
/// near-zero entries does not register as disagreement.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Largest relative error between an analytic and a numeric head gradient.
pub fn max_rel_error(analytic: &HeadGrad, numeric: &HeadGrad) -> f64 {
    let w = analytic
        .weight
        .iter()
        .zip(numeric.weight.iter())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max);
    let b = analytic
        .bias
        .iter()
        .zip(numeric.bias.iter())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max);
    w.max(b)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

/// Serialized head: role, dims, row-major weights, bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadState {
    pub role: HeadRole,
    pub input_dim: usize,
    pub output_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadState {
    pub fn from_head(head: &LinearHead) -> Self {
        Self {
            role: head.role,
            input_dim: head.input_dim(),
            output_dim: head.output_dim(),
            weight: head.weight.iter().cloned().collect(),
            bias: head.bias.to_vec(),
        }
    }

    pub fn to_head(&self) -> Result<LinearHead> {
        let weight = Array2::from_shape_vec((self.input_dim, self.output_dim), self.weight.clone())
            .map_err(|e| Error::Parse(format!("checkpoint weight shape: {e}")))?;
        LinearHead::new(self.role, weight, Array1::from(self.bias.clone()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub heads: Vec<HeadState>,
}

impl Checkpoint {
    pub fn from_model(model: &DthcpModel, step: u64) -> Self {
        Self {
            step,
            heads: model.heads().map(HeadState::from_head).collect(),
        }
    }

    pub fn to_model(&self) -> Result<DthcpModel> {
        let mut cls = None;
        let mut wgt = None;
        let mut ir: Vec<(usize, LinearHead)> = Vec::new();
        for state in &self.heads {
            let head = state.to_head()?;
            match state.role {
                HeadRole::Cls => cls = Some(head),
                HeadRole::Wgt => wgt = Some(head),
                HeadRole::Ir(k) => ir.push((k, head)),
            }
        }
        ir.sort_by_key(|(k, _)| *k);
        Ok(DthcpModel {
            cls: cls.ok_or_else(|| Error::Parse("checkpoint missing cls head".into()))?,
            wgt: wgt.ok_or_else(|| Error::Parse("checkpoint missing wgt head".into()))?,
            ir: ir.into_iter().map(|(_, h)| h).collect(),
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

//! Point proposals: label assignment, attention-gated multi-scale fusion, the
//! localization loss, and decoding with non-maximum suppression.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::geometry::Point2;
use crate::network::params::ParamSpec;
use crate::tensor::{Bindings, Graph, Tensor, Var};
use crate::{Error, Result};

/// Clamp applied to predicted probabilities inside the log loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationConfig {
    /// Proposal-to-ground-truth matching radius in px.
    pub match_radius: f64,
    pub nms_radius: f64,
    /// Maximum number of decoded points kept per frame.
    pub top_m: usize,
    /// Candidates scoring below this are never decoded.
    pub score_floor: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            match_radius: 10.0,
            nms_radius: 5.0,
            top_m: 128,
            score_floor: 0.01,
        }
    }
}

/// Image position of the proposal anchored at cell `(row, col)` of a level
/// with the given stride: the center of the pixel block the cell covers.
pub fn anchor(stride: usize, row: usize, col: usize) -> Point2 {
    let s = stride as f64;
    let half = (s - 1.0) / 2.0;
    Point2::new(s * col as f64 + half, s * row as f64 + half)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Ground truth for one proposal level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub shape: LevelShape,
    /// `c*`, 0 or 1 per cell.
    pub labels: Vec<f64>,
    /// `r*` as `[2, H, W]` (dx plane then dy plane); zero where negative.
    pub offsets: Vec<f64>,
    /// Index of the matched ground-truth point per cell.
    pub matched: Vec<Option<usize>>,
}

impl LevelTargets {
    pub fn positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    /// `s` mask expanded to the `[2, H, W]` regression layout.
    pub fn regression_mask(&self) -> Vec<f64> {
        let mut m = self.labels.clone();
        m.extend_from_slice(&self.labels);
        m
    }
}

/// Marks every proposal within `match_radius` of its nearest ground-truth
/// point as positive, with the offset to that point as regression target.
/// Equidistant points resolve to the lower index.
pub fn assign_labels(gt: &[Point2], levels: &[LevelShape], match_radius: f64) -> Result<Vec<LevelTargets>> {
    if !(match_radius > 0.0) {
        return Err(Error::invalid("assign_labels", "match radius must be positive"));
    }
    levels
        .iter()
        .map(|&shape| {
            if shape.height == 0 || shape.width == 0 || shape.stride == 0 {
                return Err(Error::invalid("assign_labels", alloc::format!("empty level {shape:?}")));
            }
            let plane = shape.height * shape.width;
            let mut labels = vec![0.0; plane];
            let mut offsets = vec![0.0; 2 * plane];
            let mut matched = vec![None; plane];
            for row in 0..shape.height {
                for col in 0..shape.width {
                    let a = anchor(shape.stride, row, col);
                    let mut best: Option<(usize, f64)> = None;
                    for (k, &p) in gt.iter().enumerate() {
                        let d = a.dist_sq(p);
                        if best.map_or(true, |(_, bd)| d < bd) {
                            best = Some((k, d));
                        }
                    }
                    if let Some((k, d)) = best {
                        if libm::sqrt(d) <= match_radius {
                            let i = row * shape.width + col;
                            labels[i] = 1.0;
                            offsets[i] = gt[k].x - a.x;
                            offsets[plane + i] = gt[k].y - a.y;
                            matched[i] = Some(k);
                        }
                    }
                }
            }
            Ok(LevelTargets {
                shape,
                labels,
                offsets,
                matched,
            })
        })
        .collect()
}

/// Predictions and targets of one proposal level.
#[derive(Debug, Clone)]
pub struct ProposalLevel {
    /// `[1, H, W]` probabilities.
    pub scores: Var,
    /// `[2, H, W]` offsets in px.
    pub regression: Var,
    pub targets: LevelTargets,
}

#[derive(Debug, Clone, Default)]
pub struct ProposalBatch {
    pub levels: Vec<ProposalLevel>,
}

/// `1/L * sum_l sum_ij [ logloss(c, c*) + s * |r - r*|^2 ]`.
pub fn localization_loss(g: &mut Graph, batch: &ProposalBatch) -> Result<Var> {
    if batch.levels.is_empty() {
        return Err(Error::Empty("localization_loss"));
    }
    let mut terms = Vec::with_capacity(2 * batch.levels.len());
    for level in &batch.levels {
        let t = &level.targets;
        let (h, w) = (t.shape.height, t.shape.width);
        if g.shape(level.scores) != [1, h, w] {
            return Err(Error::shape("localization_loss scores", g.shape(level.scores), &[1, h, w]));
        }
        if g.shape(level.regression) != [2, h, w] {
            return Err(Error::shape("localization_loss regression", g.shape(level.regression), &[2, h, w]));
        }
        terms.push(g.bce_sum(level.scores, &t.labels, PROB_EPS)?);
        if t.positives() > 0 {
            let target = g.constant(Tensor::new(vec![2, h, w], t.offsets.clone())?);
            let mask = g.constant(Tensor::new(vec![2, h, w], t.regression_mask())?);
            let diff = g.sub(level.regression, target)?;
            let sq = g.mul(diff, diff)?;
            let masked = g.mul(sq, mask)?;
            terms.push(g.sum(masked));
        }
    }
    let total = g.add_all(&terms)?;
    Ok(g.mul_scalar(total, 1.0 / batch.levels.len() as f64))
}

// ---- attention-gated fusion -------------------------------------------------

/// Channel reduction inside the channel-attention bottleneck.
pub const ATTENTION_REDUCTION: usize = 4;
/// Kernel size of the spatial-attention convolution.
pub const SPATIAL_KERNEL: usize = 7;

pub const BRANCHES: [&str; 2] = ["cls", "reg"];

fn hidden(c: usize) -> usize {
    (c / ATTENTION_REDUCTION).max(1)
}

/// Parameters of the localization subnet for input features of widths
/// `channels` at strides 1, 2, 4.
pub fn param_specs(channels: [usize; 3]) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let total: usize = channels.iter().sum();
    for (branch, out) in [("cls", 1), ("reg", 2)] {
        for (l, &c) in channels.iter().enumerate() {
            let p = alloc::format!("loc.{branch}.l{}", l + 1);
            specs.extend(ParamSpec::dense(&alloc::format!("{p}.ca1"), hidden(c), c));
            specs.extend(ParamSpec::dense(&alloc::format!("{p}.ca2"), c, hidden(c)));
            specs.extend(ParamSpec::conv(&alloc::format!("{p}.sa"), 1, 2, SPATIAL_KERNEL));
            if l > 0 {
                specs.extend(ParamSpec::conv(&alloc::format!("{p}.side"), out, c, 3));
            }
        }
        specs.extend(ParamSpec::conv(&alloc::format!("loc.{branch}.head"), out, total, 3));
    }
    specs
}

fn p(b: &Bindings, prefix: &str, leaf: &str) -> Result<Var> {
    let mut name = String::from(prefix);
    name.push('.');
    name.push_str(leaf);
    b.get(&name)
}

/// Channel attention: a sigmoid gate per channel from average- and
/// max-pooled statistics through a shared bottleneck MLP.
pub fn channel_attention(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let (w1, b1) = (p(b, prefix, "ca1.w")?, p(b, prefix, "ca1.b")?);
    let (w2, b2) = (p(b, prefix, "ca2.w")?, p(b, prefix, "ca2.b")?);
    let avg = g.global_avg_pool(x)?;
    let max = g.global_max_pool(x)?;
    let mut outs = [avg, max];
    for o in &mut outs {
        let h = g.dense(*o, w1, b1)?;
        let h = g.relu(h);
        *o = g.dense(h, w2, b2)?;
    }
    let logits = g.add(outs[0], outs[1])?;
    let gate = g.sigmoid(logits);
    g.scale_channels(x, gate)
}

/// Spatial attention: a sigmoid gate per pixel from the channel-wise mean and
/// max through a single convolution.
pub fn spatial_attention(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let (k, kb) = (p(b, prefix, "sa.k")?, p(b, prefix, "sa.b")?);
    let mean = g.channel_mean(x)?;
    let max = g.channel_max(x)?;
    let stats = g.concat_channels(&[mean, max])?;
    let logits = g.conv2d(stats, k, kb, 1, SPATIAL_KERNEL / 2)?;
    let gate = g.sigmoid(logits);
    g.scale_spatial(x, gate)
}

fn upsample_to_stride1(g: &mut Graph, mut x: Var, level: usize) -> Result<Var> {
    for _ in 0..level {
        x = g.upsample2_bilinear(x)?;
    }
    Ok(x)
}

/// Output of [`attention_fuse`].
#[derive(Debug, Clone, Copy)]
pub struct FusedMaps {
    /// `[1, H, W]` probabilities at stride 1.
    pub scores: Var,
    /// `[2, H, W]` offsets at stride 1.
    pub regression: Var,
    /// Per-level side predictions `(scores, regression)` at strides 2 and 4.
    pub side: [(Var, Var); 2],
}

/// Gates each of the three feature levels with channel then spatial attention
/// (separately for the classification and regression branch), upsamples them
/// to stride 1, concatenates and predicts the score and offset maps. With
/// `attention == false` the gates are skipped, which equals gates fixed at 1.
pub fn attention_fuse(g: &mut Graph, b: &Bindings, feats: [Var; 3], attention: bool) -> Result<FusedMaps> {
    let (c0, h, w) = match *g.shape(feats[0]) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::invalid("attention_fuse", alloc::format!("expected [C,H,W], got {s:?}"))),
    };
    let _ = c0;
    for (l, &f) in feats.iter().enumerate() {
        let s = g.shape(f);
        if s.len() != 3 || s[1] << l != h || s[2] << l != w {
            return Err(Error::shape("attention_fuse", &[h, w], s));
        }
    }
    let mut maps = [[feats[0]; 2]; 2];
    let mut side = [[feats[0]; 2]; 2];
    for (bi, branch) in BRANCHES.iter().enumerate() {
        let mut resized = Vec::with_capacity(3);
        for (l, &f) in feats.iter().enumerate() {
            let prefix = alloc::format!("loc.{branch}.l{}", l + 1);
            let gated = if attention {
                let x = channel_attention(g, b, &prefix, f)?;
                spatial_attention(g, b, &prefix, x)?
            } else {
                f
            };
            if l > 0 {
                let k = p(b, &prefix, "side.k")?;
                let kb = p(b, &prefix, "side.b")?;
                side[l - 1][bi] = g.conv2d(gated, k, kb, 1, 1)?;
            }
            resized.push(upsample_to_stride1(g, gated, l)?);
        }
        let cat = g.concat_channels(&resized)?;
        let prefix = alloc::format!("loc.{branch}.head");
        let k = p(b, &prefix, "k")?;
        let kb = p(b, &prefix, "b")?;
        maps[bi][0] = g.conv2d(cat, k, kb, 1, 1)?;
    }
    let scores = g.sigmoid(maps[0][0]);
    let side_scores = [g.sigmoid(side[0][0]), g.sigmoid(side[1][0])];
    Ok(FusedMaps {
        scores,
        regression: maps[1][0],
        side: [(side_scores[0], side[0][1]), (side_scores[1], side[1][1])],
    })
}

// ---- decoding -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedPoint {
    pub pos: Point2,
    pub confidence: f64,
}

/// Total order used for NMS: confidence descending, then position.
fn rank(a: &DetectedPoint, b: &DetectedPoint) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.pos.x.total_cmp(&b.pos.x))
        .then(a.pos.y.total_cmp(&b.pos.y))
}

/// Greedy suppression by descending confidence: a point survives unless a
/// kept point lies closer than `radius`. At most `top_m` points are kept.
pub fn nms(mut candidates: Vec<DetectedPoint>, radius: f64, top_m: usize) -> Vec<DetectedPoint> {
    candidates.sort_by(rank);
    let r2 = radius * radius;
    let mut kept: Vec<DetectedPoint> = Vec::new();
    for c in candidates {
        if kept.len() >= top_m {
            break;
        }
        if kept.iter().all(|k| k.pos.dist_sq(c.pos) >= r2) {
            kept.push(c);
        }
    }
    kept
}

/// Turns a stride-`stride` score map `[1,H,W]` and offset map `[2,H,W]` into
/// points `anchor + offset` and suppresses duplicates.
pub fn decode_and_nms(
    scores: &Tensor,
    regression: &Tensor,
    stride: usize,
    cfg: &LocalizationConfig,
) -> Result<Vec<DetectedPoint>> {
    let (h, w) = match *scores.shape() {
        [1, h, w] => (h, w),
        ref s => return Err(Error::invalid("decode_and_nms", alloc::format!("scores must be [1,H,W], got {s:?}"))),
    };
    if regression.shape() != [2, h, w] {
        return Err(Error::shape("decode_and_nms", scores.shape(), regression.shape()));
    }
    let plane = h * w;
    let (s, r) = (scores.data(), regression.data());
    let candidates = (0..plane)
        .filter(|&i| s[i] >= cfg.score_floor)
        .map(|i| {
            let a = anchor(stride, i / w, i % w);
            DetectedPoint {
                pos: Point2::new(a.x + r[i], a.y + r[plane + i]),
                confidence: s[i].clamp(0.0, 1.0),
            }
        })
        .collect();
    Ok(nms(candidates, cfg.nms_radius, cfg.top_m))
}

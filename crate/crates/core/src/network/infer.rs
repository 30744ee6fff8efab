//! Inference on frame pairs and whole sequences.

use alloc::vec::Vec;

use super::loss::associate;
use super::model::forward;
use super::{ModelConfig, ModelState};
use crate::density::count_from_map;
use crate::geometry::Point2;
use crate::localization::{decode_and_nms, DetectedPoint};
use crate::synth::ImageFrame;
use crate::tensor::{Bindings, Graph, Tensor};
use crate::{Error, Result};

/// Per-point offsets `(ox_fwd, oy_fwd, ox_bwd, oy_bwd)`.
pub type Offsets = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct PairInference {
    /// Sum of the stride-1 density map per frame.
    pub counts: [f64; 2],
    pub detections: [Vec<DetectedPoint>; 2],
    pub offsets: [Vec<Offsets>; 2],
    /// First-frame detections projected into the second frame, `p - o_fwd`.
    pub projected: Vec<Point2>,
}

/// Pair inference together with the stride-1 density map of each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMaps {
    pub inference: PairInference,
    pub density: [Tensor; 2],
}

/// Runs the model on one pair. Without the association subnet all offsets
/// are zero and `projected` equals the first-frame positions.
pub fn infer(state: &ModelState, cfg: &ModelConfig, pair: [&ImageFrame; 2]) -> Result<PairInference> {
    infer_with_maps(state, cfg, pair).map(|m| m.inference)
}

pub fn infer_with_maps(state: &ModelState, cfg: &ModelConfig, pair: [&ImageFrame; 2]) -> Result<PairMaps> {
    let mut g = Graph::new();
    let b = Bindings::bind(&mut g, &state.params, &|_| true);
    let out = forward(&mut g, &b, cfg, pair)?;
    let counts = [0, 1].map(|t| count_from_map(g.value(out[t].density[0])));
    let mut detections = [Vec::new(), Vec::new()];
    for t in 0..2 {
        if let Some(loc) = out[t].localization {
            detections[t] = decode_and_nms(g.value(loc.scores), g.value(loc.regression), 1, &cfg.localization)?;
        }
    }
    let mut offsets = [0, 1].map(|t| alloc::vec![[0.0; 4]; detections[t].len()]);
    if cfg.ablation.association_active() {
        let pts: [Vec<Point2>; 2] = [0, 1].map(|t| detections[t].iter().map(|d| d.pos).collect());
        let o = associate(&mut g, &b, cfg, &out, [&pts[0], &pts[1]])?;
        for t in 0..2 {
            let v = g.value(o[t]).data();
            for (i, row) in offsets[t].iter_mut().enumerate() {
                row.copy_from_slice(&v[4 * i..4 * i + 4]);
            }
        }
    }
    let projected = detections[0]
        .iter()
        .zip(&offsets[0])
        .map(|(d, o)| Point2::new(d.pos.x - o[0], d.pos.y - o[1]))
        .collect();
    let density = [0, 1].map(|t| g.value(out[t].density[0]).clone());
    let inference = PairInference {
        counts,
        detections,
        offsets,
        projected,
    };
    Ok(PairMaps { inference, density })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceInference {
    pub counts: Vec<f64>,
    pub detections: Vec<Vec<DetectedPoint>>,
    pub offsets: Vec<Vec<Offsets>>,
    /// `projected[t]` holds frame-`t` detections projected into frame `t+1`;
    /// empty for the last frame.
    pub projected: Vec<Vec<Point2>>,
}

/// Runs every consecutive pair. Frame `t` takes its outputs from the pair
/// `(t, t+1)`, the last frame from the final pair.
pub fn infer_sequence(state: &ModelState, cfg: &ModelConfig, frames: &[ImageFrame]) -> Result<SequenceInference> {
    if frames.len() < 2 {
        return Err(Error::invalid("infer_sequence", "need at least two frames"));
    }
    let mut out = SequenceInference::default();
    for t in 1..frames.len() {
        let p = infer(state, cfg, [&frames[t - 1], &frames[t]])?;
        out.counts.push(p.counts[0]);
        out.detections.push(p.detections[0].clone());
        out.offsets.push(p.offsets[0].clone());
        out.projected.push(p.projected);
        if t + 1 == frames.len() {
            out.counts.push(p.counts[1]);
            let [_, last] = p.detections;
            out.detections.push(last);
            let [_, last_o] = p.offsets;
            out.offsets.push(last_o);
            out.projected.push(Vec::new());
        }
    }
    Ok(out)
}

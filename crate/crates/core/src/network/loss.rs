//! Per-pair loss terms and their combination over a batch.

use alloc::vec::Vec;

use super::model::{FrameOutputs, STRIDES};
use super::{ModelConfig, Stage};
use crate::association::{self, ContextLoss, DirectionInput};
use crate::density::{self, build_density_pyramid, DensityPyramid};
use crate::geometry::Point2;
use crate::localization::{self, assign_labels, LevelShape, LevelTargets, ProposalBatch, ProposalLevel};
use crate::synth::FrameAnnotations;
use crate::tensor::{Bindings, Graph, Tensor, Var};
use crate::{Error, Result};

/// Ground truth of one frame pair.
#[derive(Debug, Clone)]
pub struct PairTargets {
    pub density: [DensityPyramid; 2],
    pub labels: [Vec<LevelTargets>; 2],
    pub annotations: [FrameAnnotations; 2],
}

pub fn level_shapes(width: usize, height: usize) -> Vec<LevelShape> {
    STRIDES
        .iter()
        .map(|&s| LevelShape {
            height: height / s,
            width: width / s,
            stride: s,
        })
        .collect()
}

pub fn pair_targets(ann: [&FrameAnnotations; 2], width: usize, height: usize, match_radius: f64) -> Result<PairTargets> {
    let shapes = level_shapes(width, height);
    let mut density = Vec::with_capacity(2);
    let mut labels = Vec::with_capacity(2);
    for a in ann {
        density.push(build_density_pyramid(a, width, height)?);
        labels.push(assign_labels(&a.positions(), &shapes, match_radius)?);
    }
    let [d0, d1]: [DensityPyramid; 2] = density.try_into().map_err(|_| Error::Empty("pair_targets"))?;
    let [l0, l1]: [Vec<LevelTargets>; 2] = labels.try_into().map_err(|_| Error::Empty("pair_targets"))?;
    Ok(PairTargets {
        density: [d0, d1],
        labels: [l0, l1],
        annotations: [ann[0].clone(), ann[1].clone()],
    })
}

/// The three terms of one pair; absent terms are switched off.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub density: Var,
    pub localization: Option<Var>,
    pub association: Option<ContextLoss>,
}

/// Top-`M` decoded proposals of a frame from the current predictions.
pub fn proposals(g: &Graph, out: &FrameOutputs, cfg: &ModelConfig) -> Result<Vec<Point2>> {
    match out.localization {
        Some(loc) => Ok(localization::decode_and_nms(g.value(loc.scores), g.value(loc.regression), 1, &cfg.localization)?
            .into_iter()
            .map(|d| d.pos)
            .collect()),
        None => Ok(Vec::new()),
    }
}

/// Offsets `[N_t, 4]` for the proposals of both frames.
pub fn associate(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    outputs: &[FrameOutputs; 2],
    points: [&[Point2]; 2],
) -> Result<[Var; 2]> {
    let mut out = [outputs[0].fused; 2];
    for t in 0..2 {
        out[t] = if points[t].is_empty() {
            g.constant(Tensor::zeros(&[0, 4]))
        } else {
            let f = association::sample_point_features(g, outputs[t].fused, points[t])?;
            association::predict_offsets(g, b, points[t], f, cfg.association.beta)?
        };
    }
    Ok(out)
}

fn localization_term(g: &mut Graph, out: &FrameOutputs, labels: &[LevelTargets]) -> Result<Option<Var>> {
    let Some(loc) = out.localization else {
        return Ok(None);
    };
    let maps = [(loc.scores, loc.regression), loc.side[0], loc.side[1]];
    let levels = maps
        .iter()
        .zip(labels)
        .map(|(&(scores, regression), t)| ProposalLevel {
            scores,
            regression,
            targets: t.clone(),
        })
        .collect();
    localization::localization_loss(g, &ProposalBatch { levels }).map(Some)
}

/// Loss terms of one pair. The localization term is the mean over both
/// frames; the association term is only built in stage two.
pub fn pair_losses(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    outputs: &[FrameOutputs; 2],
    targets: &PairTargets,
    stage: Stage,
) -> Result<LossParts> {
    let pred = [outputs[0].density, outputs[1].density];
    let den = density::density_loss(g, &pred, &[&targets.density[0], &targets.density[1]], &cfg.loss_weights)?;
    let mut loc_terms = Vec::with_capacity(2);
    for t in 0..2 {
        if let Some(l) = localization_term(g, &outputs[t], &targets.labels[t])? {
            loc_terms.push(l);
        }
    }
    let localization = if loc_terms.is_empty() {
        None
    } else {
        let s = g.add_all(&loc_terms)?;
        Some(g.mul_scalar(s, 0.5))
    };
    let association = if stage == Stage::Two && cfg.ablation.association_active() {
        let p0 = proposals(g, &outputs[0], cfg)?;
        let p1 = proposals(g, &outputs[1], cfg)?;
        let offsets = associate(g, b, cfg, outputs, [&p0, &p1])?;
        let fwd = g.slice_cols(offsets[0], 0, 2)?;
        let bwd = g.slice_cols(offsets[1], 2, 2)?;
        let ann: [Vec<(u32, Point2)>; 2] = [0, 1].map(|t| targets.annotations[t].points.iter().map(|a| (a.id, a.pos)).collect());
        let acfg = cfg.association_config();
        let fwd = DirectionInput::from_annotations(p0, fwd, &ann[0], &ann[1], acfg.match_radius);
        let bwd = DirectionInput::from_annotations(p1, bwd, &ann[1], &ann[0], acfg.match_radius);
        Some(association::neighboring_context_loss(g, &fwd, &bwd, &acfg)?)
    } else {
        None
    };
    Ok(LossParts {
        density: den,
        localization,
        association,
    })
}

/// Batch mean of `L_den + L_loc + L_ass`.
pub fn multi_task_loss(g: &mut Graph, batch: &[LossParts]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("multi_task_loss"));
    }
    let mut terms = Vec::with_capacity(3 * batch.len());
    for p in batch {
        terms.push(p.density);
        terms.extend(p.localization);
        terms.extend(p.association.map(|a| a.loss));
    }
    let total = g.add_all(&terms)?;
    Ok(g.mul_scalar(total, 1.0 / batch.len() as f64))
}

//! End-to-end helpers: synthetic scene sets, sequence prediction, evaluation
//! and the shared-stage-one ablation experiment.

use alloc::vec::Vec;

use crate::geometry::Point2;
use crate::metrics::{localization_map, mae_mse, tracking_map_pooled, EvalReport};
use crate::network::{infer_sequence, train_stage, Ablation, ModelConfig, ModelState, Sequence, SequenceInference, Stage, StepLog, TrainConfig};
use crate::localization::DetectedPoint;
use crate::synth::{frame_annotations, generate_scene, FrameAnnotations, SceneConfig, Trajectory};
use crate::tracking::{link_from_variant, LinkVariant, TrackSet, TrackerConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sequence: Sequence,
    pub trajectories: Vec<Trajectory>,
}

/// `count` scenes with seeds `base.seed + first .. base.seed + first + count`.
pub fn generate_scenes(base: &SceneConfig, first: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| {
            let cfg = SceneConfig {
                seed: base.seed.wrapping_add(first + i),
                ..*base
            };
            let (frames, trajectories) = generate_scene(&cfg)?;
            Ok(Scene {
                sequence: Sequence {
                    annotations: frame_annotations(&trajectories, frames.len()),
                    frames,
                },
                trajectories,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub inference: SequenceInference,
    pub tracks: TrackSet,
}

/// Inference plus tracking; offsets guide the linker only when the
/// association subnet is active.
pub fn predict(state: &ModelState, cfg: &ModelConfig, seq: &Sequence, tracker: &TrackerConfig) -> Result<Prediction> {
    let inference = infer_sequence(state, cfg, &seq.frames)?;
    let tracks = if cfg.ablation.association_active() {
        link_from_variant(&inference.detections, Some(&inference.projected), LinkVariant::WithOffsets, tracker)?
    } else {
        link_from_variant(&inference.detections, None, LinkVariant::WithoutOffsets, tracker)?
    };
    Ok(Prediction { inference, tracks })
}

/// Predictions for one sequence, borrowed from wherever they were produced.
#[derive(Debug, Clone, Copy)]
pub struct SequenceOutputs<'a> {
    pub counts: &'a [f64],
    pub detections: &'a [Vec<DetectedPoint>],
    pub tracks: &'a TrackSet,
}

/// Ground truth for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceTruth<'a> {
    pub annotations: &'a [FrameAnnotations],
    pub trajectories: &'a [Trajectory],
}

/// Full report over sequences: counts, pooled localization AP over all
/// frames, tracking AP pooled over sequences.
pub fn evaluate_outputs(outputs: &[SequenceOutputs<'_>], truth: &[SequenceTruth<'_>]) -> Result<EvalReport> {
    if outputs.len() != truth.len() {
        return Err(Error::shape("evaluate", &[outputs.len()], &[truth.len()]));
    }
    let mut series = Vec::with_capacity(truth.len());
    let mut dets = Vec::new();
    let mut gts: Vec<Vec<Point2>> = Vec::new();
    for (o, t) in outputs.iter().zip(truth) {
        let ann = t.annotations;
        if o.counts.len() != ann.len() || o.detections.len() != ann.len() {
            return Err(Error::shape("evaluate", &[o.counts.len(), o.detections.len()], &[ann.len()]));
        }
        series.push(ann.iter().zip(o.counts).map(|(a, &c)| (a.count() as f64, c)).collect());
        dets.extend(o.detections.iter().cloned());
        gts.extend(ann.iter().map(|a| a.positions()));
    }
    let (mae, mse) = mae_mse(&series)?;
    let localization = localization_map(&dets, &gts)?;
    let pairs: Vec<(&TrackSet, &[Trajectory])> = outputs.iter().zip(truth).map(|(o, t)| (o.tracks, t.trajectories)).collect();
    Ok(EvalReport {
        mae,
        mse,
        localization,
        tracking: tracking_map_pooled(&pairs),
    })
}

pub fn evaluate(preds: &[Prediction], scenes: &[Scene]) -> Result<EvalReport> {
    let outputs: Vec<SequenceOutputs<'_>> = preds
        .iter()
        .map(|p| SequenceOutputs {
            counts: &p.inference.counts,
            detections: &p.inference.detections,
            tracks: &p.tracks,
        })
        .collect();
    let truth: Vec<SequenceTruth<'_>> = scenes
        .iter()
        .map(|s| SequenceTruth {
            annotations: &s.sequence.annotations,
            trajectories: &s.trajectories,
        })
        .collect();
    evaluate_outputs(&outputs, &truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub tracker: TrackerConfig,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub ablation: Ablation,
    pub logs: Vec<StepLog>,
    pub report: EvalReport,
    pub state: ModelState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub stage1_logs: Vec<StepLog>,
    pub variants: Vec<VariantResult>,
}

/// Trains stage one once, then fine-tunes and evaluates one stage-two model
/// per ablation variant on held-out scenes.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    variants: &[Ablation],
    on_step: &mut dyn FnMut(Option<Ablation>, &StepLog),
) -> Result<ExperimentOutcome> {
    let train = generate_scenes(&cfg.scene, 0, cfg.train_scenes)?;
    let test = generate_scenes(&cfg.scene, cfg.train_scenes as u64, cfg.test_scenes)?;
    let train_seqs: Vec<Sequence> = train.into_iter().map(|s| s.sequence).collect();
    let mut state = ModelState::new(&cfg.model, cfg.init_seed)?;
    let stage1_logs = train_stage(&mut state, &cfg.model, &train_seqs, &cfg.stage1, Stage::One, &mut |l| on_step(None, l))?;
    let mut results = Vec::with_capacity(variants.len());
    for &ablation in variants {
        let model = ModelConfig { ablation, ..cfg.model.clone() };
        let mut s = state.clone();
        let logs = train_stage(&mut s, &model, &train_seqs, &cfg.stage2, Stage::Two, &mut |l| on_step(Some(ablation), l))?;
        let preds = test
            .iter()
            .map(|sc| predict(&s, &model, &sc.sequence, &cfg.tracker))
            .collect::<Result<Vec<_>>>()?;
        results.push(VariantResult {
            ablation,
            logs,
            report: evaluate(&preds, &test)?,
            state: s,
        });
    }
    Ok(ExperimentOutcome {
        stage1_logs,
        variants: results,
    })
}

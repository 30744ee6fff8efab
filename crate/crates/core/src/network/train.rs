//! Two-stage training loop.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{clip_global_norm, Adam, Gradients};
use super::loss::{multi_task_loss, pair_losses, pair_targets};
use super::model::forward;
use super::{ModelConfig, ModelState, Stage};
use crate::synth::{AugmentConfig, FrameAnnotations, ImageFrame};
use crate::tensor::{Bindings, Graph};
use crate::{Error, Result};

/// Frames of one video with their annotations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequence {
    pub frames: Vec<ImageFrame>,
    pub annotations: Vec<FrameAnnotations>,
}

impl Sequence {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.annotations.len() {
            return Err(Error::shape("Sequence", &[self.frames.len()], &[self.annotations.len()]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    /// Random crop `(width, height)` applied to each pair; `None` trains on
    /// full frames.
    pub crop: Option<(usize, usize)>,
    pub flip_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            seed: 0,
            crop: None,
            flip_probability: 0.5,
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    pub density: f64,
    pub localization: f64,
    pub association: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

struct PairResult {
    grads: Gradients,
    log: [f64; 4],
}

fn pair_step(
    state: &ModelState,
    cfg: &ModelConfig,
    frames: [&ImageFrame; 2],
    ann: [&FrameAnnotations; 2],
    stage: Stage,
) -> Result<PairResult> {
    let targets = pair_targets(ann, frames[0].width, frames[0].height, cfg.localization.match_radius)?;
    let mut g = Graph::new();
    let b = Bindings::bind(&mut g, &state.params, &|n| state.is_frozen(n));
    let out = forward(&mut g, &b, cfg, frames)?;
    let parts = pair_losses(&mut g, &b, cfg, &out, &targets, stage)?;
    let loss = multi_task_loss(&mut g, &[parts])?;
    g.backward(loss)?;
    let grads = b
        .iter()
        .filter(|(_, &v)| g.requires_grad(v))
        .map(|(n, &v)| (n.clone(), g.grad_tensor(v).into_data()))
        .collect();
    let item = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| g.value(v).item());
    Ok(PairResult {
        grads,
        log: [
            g.value(loss).item(),
            g.value(parts.density).item(),
            item(parts.localization),
            item(parts.association.map(|a| a.loss)),
        ],
    })
}

/// Trains `state` for `tcfg.steps` optimizer steps of the given stage and
/// returns the per-step loss log. Entering stage two freezes the density
/// heads; stage one cannot follow stage two.
pub fn train_stage(
    state: &mut ModelState,
    cfg: &ModelConfig,
    data: &[Sequence],
    tcfg: &TrainConfig,
    stage: Stage,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if stage == Stage::One && state.stage == Stage::Two {
        return Err(Error::invalid("train", "stage one cannot resume a stage-two state"));
    }
    let pairs: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (1..seq.frames.len()).map(move |t| (s, t)))
        .collect();
    for seq in data {
        seq.validate()?;
    }
    if pairs.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if stage == Stage::Two {
        state.enter_stage_two();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ (stage.number() as u64) << 56);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut logs = Vec::with_capacity(tcfg.steps);
    let k = cfg.batch_size as f64;
    for step in 0..tcfg.steps {
        let mut total = Gradients::new();
        let mut sums = [0.0; 4];
        for _ in 0..cfg.batch_size {
            let (s, t) = pairs[rng.gen_range(0..pairs.len())];
            let seq = &data[s];
            let (f0, f1) = (&seq.frames[t - 1], &seq.frames[t]);
            let (a0, a1) = (&seq.annotations[t - 1], &seq.annotations[t]);
            let res = match tcfg.crop {
                Some((cw, ch)) => {
                    let aug = AugmentConfig {
                        crop_width: cw,
                        crop_height: ch,
                        flip_probability: tcfg.flip_probability,
                    };
                    let p = aug.sample(f0.width, f0.height, &mut rng)?;
                    let (c0, b0) = p.apply(f0, a0)?;
                    let (c1, b1) = p.apply(f1, a1)?;
                    pair_step(state, cfg, [&c0, &c1], [&b0, &b1], stage)?
                }
                None => pair_step(state, cfg, [f0, f1], [a0, a1], stage)?,
            };
            for (name, g) in res.grads {
                let acc = total.entry(name).or_insert_with(|| alloc::vec![0.0; g.len()]);
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v / k);
            }
            sums.iter_mut().zip(res.log).for_each(|(s, v)| *s += v / k);
        }
        let grad_norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut total, c),
            None => super::adam::global_norm(&total),
        };
        adam.step(&mut state.params, &total, &state.frozen)?;
        let log = StepLog {
            stage,
            step,
            loss: sums[0],
            density: sums[1],
            localization: sums[2],
            association: sums[3],
            grad_norm,
        };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{frame_annotations, generate_scene, SceneConfig};
    use alloc::vec;

    fn data() -> Vec<Sequence> {
        let cfg = SceneConfig {
            width: 16,
            height: 16,
            num_frames: 3,
            num_people: 3,
            min_count: 1,
            num_groups: 1,
            seed: 9,
            ..Default::default()
        };
        let (frames, trajs) = generate_scene(&cfg).unwrap();
        vec![Sequence {
            annotations: frame_annotations(&trajs, frames.len()),
            frames,
        }]
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            widths: [2, 3, 4],
            max_disp: 1,
            batch_size: 2,
            learning_rate: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_and_empty_data() {
        let cfg = tiny();
        let mut state = ModelState::new(&cfg, 1).unwrap();
        let before = state.clone();
        let logs = train_stage(&mut state, &cfg, &data(), &TrainConfig::default(), Stage::One, &mut |_| {}).unwrap();
        assert!(logs.is_empty());
        assert_eq!(state, before);
        assert!(train_stage(&mut state, &cfg, &[], &TrainConfig::default(), Stage::One, &mut |_| {}).is_err());
    }

    #[test]
    fn stage_two_freezes_density_and_is_deterministic() {
        let cfg = tiny();
        let d = data();
        let tcfg = TrainConfig { steps: 3, seed: 4, crop: Some((12, 12)), ..Default::default() };
        let run = || {
            let mut state = ModelState::new(&cfg, 2).unwrap();
            let l1 = train_stage(&mut state, &cfg, &d, &tcfg, Stage::One, &mut |_| {}).unwrap();
            let snapshot = state.clone();
            let l2 = train_stage(&mut state, &cfg, &d, &tcfg, Stage::Two, &mut |_| {}).unwrap();
            (snapshot, state, l1, l2)
        };
        let (before, after, l1, l2) = run();
        assert_eq!(after.stage, Stage::Two);
        assert!(!after.frozen.is_empty());
        for name in &after.frozen {
            assert!(name.starts_with("density."));
            assert_eq!(before.params[name], after.params[name]);
        }
        assert_ne!(before.params["backbone.g1.c1.k"], after.params["backbone.g1.c1.k"]);
        let (_, again, m1, m2) = run();
        assert_eq!((l1, l2), (m1, m2));
        assert_eq!(after, again);
    }
}

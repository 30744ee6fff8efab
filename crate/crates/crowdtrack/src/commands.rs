//! Command implementations, independent of argument parsing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crowdtrack_core::geometry::Point2;
use crowdtrack_core::metrics::EvalReport;
use crowdtrack_core::network::{infer, train_stage, ModelConfig, ModelState, Sequence, Stage, StepLog};
use crowdtrack_core::pipeline::{evaluate_outputs, generate_scenes, run_experiment, ExperimentOutcome, SequenceOutputs, SequenceTruth};
use crowdtrack_core::tracking::{link_from_variant, LinkVariant, TrackSet};

use crate::config::RunConfig;
use crate::dataset::{self, SceneEntry};
use crate::error::{Error, Result};
use crate::formats;
use crate::render;

pub const LOSS_LOG_HEADER: &str = "stage,step,loss,density,localization,association,grad_norm";

/// Loss log rows; values use the shortest exact decimal form.
pub fn loss_log_text(logs: &[StepLog]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            l.stage.number(),
            l.step,
            l.loss,
            l.density,
            l.localization,
            l.association,
            l.grad_norm
        );
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        dataset::create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<file>.cfg` next to a file output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Writes `train/scene_*` and `test/scene_*` with the seeds used by the
/// experiment, plus the resolved configuration.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let e = &cfg.experiment;
    dataset::create_dir(out)?;
    write_text(&out.join(dataset::RUN_CONFIG), &cfg.to_text())?;
    for (split, first, count) in [("train", 0, e.train_scenes), ("test", e.train_scenes as u64, e.test_scenes)] {
        for (i, scene) in generate_scenes(&e.scene, first, count)?.into_iter().enumerate() {
            let dir = out.join(split).join(dataset::scene_name(i));
            dataset::write_scene(&dir, &scene.sequence.frames, &scene.trajectories)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    One,
    Two,
    Both,
}

fn load_sequences(data: &Path) -> Result<Vec<Sequence>> {
    dataset::scene_entries(data)?
        .iter()
        .map(|s| dataset::read_sequence(&s.dir).map(|(seq, _)| seq))
        .collect()
}

/// Checks that a checkpoint holds exactly the parameters `model` declares.
fn check_compatible(state: &ModelState, model: &ModelConfig, path: &Path) -> Result<()> {
    let fresh = ModelState::new(model, 0)?;
    for (name, t) in &fresh.params {
        match state.params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::format(path, 0, format!("`{name}` has shape {:?}, config expects {:?}", p.shape(), t.shape())));
            }
            None => return Err(Error::format(path, 0, format!("missing parameter `{name}` for this config"))),
        }
    }
    if let Some(extra) = state.params.keys().find(|k| !fresh.params.contains_key(*k)) {
        return Err(Error::format(path, 0, format!("parameter `{extra}` not used by this config")));
    }
    Ok(())
}

pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<ModelState> {
    let state = formats::load_checkpoint(ckpt)?;
    check_compatible(&state, &cfg.experiment.model, ckpt)?;
    Ok(state)
}

/// Trains the selected stages and writes the checkpoint, its loss log and
/// the resolved configuration. Stage two alone continues from `init`, which
/// must be a stage-one checkpoint.
pub fn train(cfg: &RunConfig, data: &Path, stage: StageSel, init: Option<&Path>, ckpt: &Path, log: &Path) -> Result<ModelState> {
    let e = &cfg.experiment;
    let mut state = match (stage, init) {
        (StageSel::Two, None) => {
            return Err(Error::Usage("stage 2 needs a stage-1 checkpoint (--init)".into()));
        }
        (StageSel::Two, Some(p)) => {
            let s = load_model(cfg, p)?;
            if s.stage != Stage::One {
                return Err(Error::Usage(format!("{} is not a stage-1 checkpoint", p.display())));
            }
            s
        }
        (_, Some(_)) => return Err(Error::Usage("--init only applies to --stage 2".into())),
        (_, None) => ModelState::new(&e.model, e.init_seed)?,
    };
    let seqs = load_sequences(data)?;
    let mut logs = Vec::new();
    if stage != StageSel::Two {
        logs.extend(train_stage(&mut state, &e.model, &seqs, &e.stage1, Stage::One, &mut |_| {})?);
    }
    if stage != StageSel::One {
        logs.extend(train_stage(&mut state, &e.model, &seqs, &e.stage2, Stage::Two, &mut |_| {})?);
    }
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        dataset::create_dir(parent)?;
    }
    formats::save_checkpoint(ckpt, &state)?;
    write_text(log, &loss_log_text(&logs))?;
    write_text(&sidecar(ckpt), &cfg.to_text())?;
    Ok(state)
}

/// Counts, detections, offsets and level-1 density maps for every scene.
pub fn infer_cmd(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = &cfg.experiment.model;
    let state = load_model(cfg, ckpt)?;
    dataset::create_dir(out)?;
    write_text(&out.join(dataset::RUN_CONFIG), &cfg.to_text())?;
    for scene in dataset::scene_entries(data)? {
        let (seq, _) = dataset::read_sequence(&scene.dir)?;
        let dst = scene.mirror(out);
        let dens = dst.join(dataset::DENSITY_DIR);
        dataset::create_dir(&dens)?;
        let n = seq.frames.len();
        let (mut counts, mut dets, mut offs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for t in 1..n {
            let p = infer::infer_with_maps(&state, model, [&seq.frames[t - 1], &seq.frames[t]])?;
            let last = t + 1 == n;
            for k in 0..(1 + usize::from(last)) {
                formats::write_dmap(&dens.join(dataset::density_file(t - 1 + k)), &p.density[k])?;
                counts.push(p.inference.counts[k]);
                dets.push(p.inference.detections[k].clone());
                offs.push(p.inference.offsets[k].clone());
            }
        }
        formats::save_counts(&dst.join(dataset::COUNTS), &counts)?;
        formats::save_detections(&dst.join(dataset::DETECTIONS), &dets)?;
        formats::save_offsets(&dst.join(dataset::OFFSETS), &dets, &offs)?;
    }
    Ok(())
}

/// Links the detections of one prediction directory; with offsets the
/// forward offset projects each point into the next frame.
pub fn track_dir(cfg: &RunConfig, pred: &Path, use_offsets: bool) -> Result<TrackSet> {
    let dets = formats::load_detections(&pred.join(dataset::DETECTIONS), None)?;
    let tracker = &cfg.experiment.tracker;
    if !use_offsets {
        return Ok(link_from_variant(&dets, None, LinkVariant::WithoutOffsets, tracker)?);
    }
    let path = pred.join(dataset::OFFSETS);
    let offs = formats::load_offsets(&path, Some(dets.len()))?;
    let mut projected: Vec<Vec<Point2>> = Vec::with_capacity(dets.len());
    for (t, (d, o)) in dets.iter().zip(&offs).enumerate() {
        if d.len() != o.len() || d.iter().zip(o).any(|(a, b)| a.pos.dist(b.0) > 1e-3) {
            return Err(Error::format(&path, 0, format!("frame {t} does not match the detections")));
        }
        let last = t + 1 == dets.len();
        projected.push(if last { Vec::new() } else { o.iter().map(|(p, v)| Point2::new(p.x - v[0], p.y - v[1])).collect() });
    }
    Ok(link_from_variant(&dets, Some(&projected), LinkVariant::WithOffsets, tracker)?)
}

/// Tracks every prediction directory below `pred`, mirrored into `out`.
pub fn track_cmd(cfg: &RunConfig, pred: &Path, out: &Path, use_offsets: bool) -> Result<()> {
    dataset::create_dir(out)?;
    write_text(&out.join(dataset::RUN_CONFIG), &cfg.to_text())?;
    for entry in prediction_entries(pred)? {
        let tracks = track_dir(cfg, &entry.dir, use_offsets)?;
        let dst = entry.mirror(out);
        dataset::create_dir(&dst)?;
        formats::save_tracks(&dst.join(dataset::TRACKS), &tracks)?;
    }
    Ok(())
}

/// Prediction directories: `pred` itself when it holds detections,
/// otherwise its `scene_*` children.
pub fn prediction_entries(pred: &Path) -> Result<Vec<SceneEntry>> {
    if pred.join(dataset::DETECTIONS).is_file() || pred.join(dataset::COUNTS).is_file() {
        return Ok(vec![SceneEntry {
            name: None,
            dir: pred.to_path_buf(),
        }]);
    }
    let listing = std::fs::read_dir(pred).map_err(|e| Error::io(pred, e))?;
    let mut out = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(pred, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("scene_") && entry.path().is_dir() {
            out.push(SceneEntry {
                name: Some(name),
                dir: entry.path(),
            });
        }
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    if out.is_empty() {
        return Err(Error::Usage(format!("{} holds no predictions", pred.display())));
    }
    Ok(out)
}

/// Evaluates prediction directories against ground truth. Each GT scene
/// reads `counts.csv`, `detections.csv` and `tracks.csv` from the matching
/// prediction directory; counts and tracks may be produced separately, so
/// `tracks` optionally points at a different root.
pub fn eval(gt: &Path, pred: &Path, tracks: Option<&Path>) -> Result<EvalReport> {
    let scenes = dataset::scene_entries(gt)?;
    let mut truths = Vec::with_capacity(scenes.len());
    let mut outputs = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let truth = dataset::read_truth(&s.dir)?;
        let dir = s.mirror(pred);
        let counts_path = dir.join(dataset::COUNTS);
        let counts = formats::load_counts(&counts_path)?;
        if counts.len() != truth.num_frames {
            return Err(Error::format(&counts_path, 0, format!("{} frames, ground truth has {}", counts.len(), truth.num_frames)));
        }
        let dets = formats::load_detections(&dir.join(dataset::DETECTIONS), Some(truth.num_frames))?;
        let track_dir = tracks.map_or(dir.clone(), |t| s.mirror(t));
        let ts = formats::load_tracks(&track_dir.join(dataset::TRACKS))?;
        outputs.push((counts, dets, ts));
        truths.push(truth);
    }
    let outs: Vec<SequenceOutputs<'_>> = outputs
        .iter()
        .map(|(c, d, t)| SequenceOutputs {
            counts: c,
            detections: d,
            tracks: t,
        })
        .collect();
    let truth: Vec<SequenceTruth<'_>> = truths
        .iter()
        .map(|t| SequenceTruth {
            annotations: &t.annotations,
            trajectories: &t.trajectories,
        })
        .collect();
    Ok(evaluate_outputs(&outs, &truth)?)
}

pub fn render_density(map: &Path, out: &Path) -> Result<()> {
    formats::write_pgm(out, &render::density_image(&formats::read_dmap(map)?))
}

pub fn render_tracks(tracks: &Path, width: usize, height: usize, background: Option<&Path>, out: &Path) -> Result<()> {
    let ts = formats::load_tracks(tracks)?;
    let bg = background.map(formats::read_pgm).transpose()?;
    let (w, h) = bg.as_ref().map_or((width, height), |b| (b.width, b.height));
    if w == 0 || h == 0 {
        return Err(Error::Usage("render needs --width and --height or --background".into()));
    }
    formats::write_ppm(out, &render::tracks_image(&ts, w, h, bg.as_ref()))
}

/// Runs the shared-stage-one ablation experiment on generated scenes and
/// writes loss logs plus one report per variant.
pub fn experiment(cfg: &RunConfig, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<ExperimentOutcome> {
    dataset::create_dir(out)?;
    write_text(&out.join(dataset::RUN_CONFIG), &cfg.to_text())?;
    let outcome = run_experiment(&cfg.experiment, &cfg.variants, &mut |v, l| {
        if l.step % 100 == 0 {
            let name = v.and_then(|a| a.name()).unwrap_or("shared");
            progress(&format!("stage {} {name} step {} loss {:.4}", l.stage.number(), l.step, l.loss));
        }
    })?;
    write_text(&out.join("stage1_loss.csv"), &loss_log_text(&outcome.stage1_logs))?;
    for v in &outcome.variants {
        let name = v.ablation.name().unwrap_or("custom");
        write_text(&out.join(format!("stage2_loss_{name}.csv")), &loss_log_text(&v.logs))?;
        write_text(&out.join(format!("report_{name}.txt")), &v.report.to_key_values())?;
        formats::save_checkpoint(&out.join(format!("model_{name}.stnw")), &v.state)?;
    }
    Ok(outcome)
}

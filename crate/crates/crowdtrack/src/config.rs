//! `key=value` run configuration.
//!
//! One key per line, `#` starts a comment. Every key has a default, unknown
//! keys are rejected, and [`RunConfig::to_text`] echoes the complete resolved
//! configuration so that any run can be repeated from its log.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crowdtrack_core::density::LossWeights;
use crowdtrack_core::metrics::{LOC_THRESHOLDS, TRACK_DISTANCE, TRACK_RATIOS};
use crowdtrack_core::network::{Ablation, ModelConfig, TrainConfig};
use crowdtrack_core::pipeline::ExperimentConfig;
use crowdtrack_core::synth::SceneConfig;
use crowdtrack_core::tracking::TrackerConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    /// Stage-two variants trained by the `experiment` command.
    pub variants: Vec<Ablation>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig {
                scene: SceneConfig::default(),
                train_scenes: 8,
                test_scenes: 2,
                model: ModelConfig::default(),
                stage1: TrainConfig {
                    steps: 1000,
                    seed: 1,
                    ..Default::default()
                },
                stage2: TrainConfig {
                    steps: 1000,
                    seed: 2,
                    ..Default::default()
                },
                tracker: TrackerConfig::default(),
                init_seed: 7,
            },
            variants: vec![Ablation::FULL],
            paths: Paths::default(),
        }
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn real(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn triple<T: FromStr + Copy>(v: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<[T; 3], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b, c] => Ok([parse(a)?, parse(b)?, parse(c)?]),
        _ => Err(format!("expected three comma-separated values, got `{v}`")),
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn crop(v: &str) -> Result<Option<(usize, usize)>, String> {
    if v == "none" {
        return Ok(None);
    }
    let (w, h) = v.split_once('x').ok_or_else(|| format!("expected WxH or none, got `{v}`"))?;
    Ok(Some((num(w)?, num(h)?)))
}

fn show_crop(c: Option<(usize, usize)>) -> String {
    c.map_or("none".into(), |(w, h)| format!("{w}x{h}"))
}

fn variant(v: &str) -> Result<Ablation, String> {
    Ablation::from_name(v).ok_or_else(|| {
        let names: Vec<&str> = Ablation::VARIANTS.iter().map(|(n, _)| *n).collect();
        format!("unknown variant `{v}`, expected one of {}", names.join(", "))
    })
}

fn show_variant(a: &Ablation) -> String {
    a.name().unwrap_or("custom").into()
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

/// Protocol constants are listed for the record but cannot be changed.
fn fixed(key: &str, current: String, v: &str) -> Result<(), String> {
    if v == current {
        Ok(())
    } else {
        Err(format!("`{key}` is fixed by the evaluation protocol at {current}"))
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.experiment;
        let s = &e.scene;
        let m = &e.model;
        let l = &m.localization;
        let a = &m.association;
        let t = &e.tracker;
        vec![
            ("scene.width", s.width.to_string()),
            ("scene.height", s.height.to_string()),
            ("scene.frames", s.num_frames.to_string()),
            ("scene.people", s.num_people.to_string()),
            ("scene.groups", s.num_groups.to_string()),
            ("scene.drift_speed", s.drift_speed.to_string()),
            ("scene.jitter_sigma", s.jitter_sigma.to_string()),
            ("scene.group_spread", s.group_spread.to_string()),
            ("scene.blob_sigma", s.blob_sigma.to_string()),
            ("scene.blob_intensity", s.blob_intensity.to_string()),
            ("scene.clutter", s.clutter.to_string()),
            ("scene.min_count", s.min_count.to_string()),
            ("scene.max_count", s.max_count.to_string()),
            ("scene.seed", s.seed.to_string()),
            ("data.train_scenes", e.train_scenes.to_string()),
            ("data.test_scenes", e.test_scenes.to_string()),
            ("model.widths", list(&m.widths)),
            ("model.max_disp", m.max_disp.to_string()),
            ("model.loss_weights", list(&m.loss_weights.0)),
            ("model.density_scale", m.density_scale.to_string()),
            ("model.batch_size", m.batch_size.to_string()),
            ("model.learning_rate", m.learning_rate.to_string()),
            ("model.clip_norm", m.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("model.attention", m.attention.to_string()),
            ("model.variant", show_variant(&m.ablation)),
            ("model.init_seed", e.init_seed.to_string()),
            ("loc.match_radius", l.match_radius.to_string()),
            ("loc.nms_radius", l.nms_radius.to_string()),
            ("loc.top_m", l.top_m.to_string()),
            ("loc.score_floor", l.score_floor.to_string()),
            ("ass.beta", a.beta.to_string()),
            ("ass.neighborhood_radius", a.neighborhood_radius.to_string()),
            ("ass.match_radius", a.match_radius.to_string()),
            ("ass.hidden", a.hidden.to_string()),
            ("train.stage1_steps", e.stage1.steps.to_string()),
            ("train.stage2_steps", e.stage2.steps.to_string()),
            ("train.stage1_seed", e.stage1.seed.to_string()),
            ("train.stage2_seed", e.stage2.seed.to_string()),
            ("train.crop", show_crop(e.stage1.crop)),
            ("train.flip_probability", e.stage1.flip_probability.to_string()),
            ("tracker.gate", t.gate.to_string()),
            ("tracker.entry_cost", t.entry_cost.to_string()),
            ("tracker.exit_cost", t.exit_cost.to_string()),
            ("tracker.link_lambda", t.link_lambda.to_string()),
            ("eval.loc_thresholds", LOC_THRESHOLDS.to_string()),
            ("eval.track_ratios", list(&TRACK_RATIOS)),
            ("eval.track_distance", TRACK_DISTANCE.to_string()),
            ("experiment.variants", self.variants.iter().map(show_variant).collect::<Vec<_>>().join(",")),
            ("paths.data", show_path(&self.paths.data)),
            ("paths.ckpt", show_path(&self.paths.ckpt)),
            ("paths.out", show_path(&self.paths.out)),
        ]
    }

    /// Sets one key; the error names the problem without location.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let e = &mut self.experiment;
        let s = &mut e.scene;
        let m = &mut e.model;
        match key {
            "scene.width" => s.width = num(v)?,
            "scene.height" => s.height = num(v)?,
            "scene.frames" => s.num_frames = num(v)?,
            "scene.people" => s.num_people = num(v)?,
            "scene.groups" => s.num_groups = num(v)?,
            "scene.drift_speed" => s.drift_speed = real(v)?,
            "scene.jitter_sigma" => s.jitter_sigma = real(v)?,
            "scene.group_spread" => s.group_spread = real(v)?,
            "scene.blob_sigma" => s.blob_sigma = real(v)?,
            "scene.blob_intensity" => s.blob_intensity = real(v)?,
            "scene.clutter" => s.clutter = real(v)?,
            "scene.min_count" => s.min_count = num(v)?,
            "scene.max_count" => s.max_count = num(v)?,
            "scene.seed" => s.seed = num(v)?,
            "data.train_scenes" => e.train_scenes = num(v)?,
            "data.test_scenes" => e.test_scenes = num(v)?,
            "model.widths" => m.widths = triple(v, num)?,
            "model.max_disp" => m.max_disp = num(v)?,
            "model.loss_weights" => m.loss_weights = LossWeights(triple(v, real)?),
            "model.density_scale" => m.density_scale = real(v)?,
            "model.batch_size" => m.batch_size = num(v)?,
            "model.learning_rate" => m.learning_rate = real(v)?,
            "model.clip_norm" => m.clip_norm = if v == "none" { None } else { Some(real(v)?) },
            "model.attention" => m.attention = boolean(v)?,
            "model.variant" => m.ablation = variant(v)?,
            "model.init_seed" => e.init_seed = num(v)?,
            "loc.match_radius" => m.localization.match_radius = real(v)?,
            "loc.nms_radius" => m.localization.nms_radius = real(v)?,
            "loc.top_m" => m.localization.top_m = num(v)?,
            "loc.score_floor" => m.localization.score_floor = real(v)?,
            "ass.beta" => m.association.beta = num(v)?,
            "ass.neighborhood_radius" => m.association.neighborhood_radius = real(v)?,
            "ass.match_radius" => m.association.match_radius = real(v)?,
            "ass.hidden" => m.association.hidden = num(v)?,
            "train.stage1_steps" => e.stage1.steps = num(v)?,
            "train.stage2_steps" => e.stage2.steps = num(v)?,
            "train.stage1_seed" => e.stage1.seed = num(v)?,
            "train.stage2_seed" => e.stage2.seed = num(v)?,
            "train.crop" => {
                let c = crop(v)?;
                e.stage1.crop = c;
                e.stage2.crop = c;
            }
            "train.flip_probability" => {
                let p = real(v)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("probability {p} outside [0, 1]"));
                }
                e.stage1.flip_probability = p;
                e.stage2.flip_probability = p;
            }
            "tracker.gate" => e.tracker.gate = real(v)?,
            "tracker.entry_cost" => e.tracker.entry_cost = real(v)?,
            "tracker.exit_cost" => e.tracker.exit_cost = real(v)?,
            "tracker.link_lambda" => e.tracker.link_lambda = real(v)?,
            "eval.loc_thresholds" => fixed(key, LOC_THRESHOLDS.to_string(), v)?,
            "eval.track_ratios" => fixed(key, list(&TRACK_RATIOS), v)?,
            "eval.track_distance" => fixed(key, TRACK_DISTANCE.to_string(), v)?,
            "experiment.variants" => {
                self.variants = v.split(',').map(|n| variant(n.trim())).collect::<Result<_, _>>()?;
                if self.variants.is_empty() {
                    return Err("at least one variant required".into());
                }
            }
            "paths.data" => self.paths.data = path(v),
            "paths.ckpt" => self.paths.ckpt = path(v),
            "paths.out" => self.paths.out = path(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies a text configuration on top of `self`. Later keys may not
    /// repeat earlier ones.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = (i + 1) as u64;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::format(origin, line, format!("expected key=value, found `{body}`")))?;
            let k = k.trim();
            if !seen.insert(k.to_owned()) {
                return Err(Error::format(origin, line, format!("duplicate key `{k}`")));
            }
            self.set(k, v.trim()).map_err(|m| Error::format(origin, line, m))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, origin)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Command-line `key=value` overrides, applied after the file.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())
                .map_err(|m| Error::config(format!("override `{o}`: {m}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.scene.validate()?;
        e.model.validate()?;
        e.tracker.validate()?;
        if e.model.ablation.name().is_none() {
            return Err(Error::config("model.variant must be a named variant"));
        }
        for (name, c) in [("train.crop", e.stage1.crop), ("train.crop", e.stage2.crop)] {
            if let Some((w, h)) = c {
                if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
                    return Err(Error::config(format!("{name} extents must be positive multiples of 4")));
                }
            }
        }
        Ok(())
    }

    /// The complete resolved configuration, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Settings of the scaled-down end-to-end experiment: 64x64 frames,
    /// 16 frames, 12 people, 8 training and 2 test scenes.
    pub fn desk() -> Self {
        let mut c = Self::default();
        let text = include_str!("../../../configs/desk.cfg");
        c.apply_text(text, Path::new("configs/desk.cfg"))
            .expect("bundled desk configuration parses");
        c
    }
}

//! Directory layout of scenes and prediction sets.
//!
//! A scene directory holds `frame_NNNN.pgm` images and `annotations.csv`. A
//! data directory is either a scene directory or a directory of `scene_*`
//! scene directories. Prediction directories mirror the same structure.

use std::path::{Path, PathBuf};

use crowdtrack_core::network::Sequence;
use crowdtrack_core::synth::{frame_annotations, FrameAnnotations, ImageFrame, Trajectory};

use crate::error::{Error, Result};
use crate::formats;

pub const ANNOTATIONS: &str = "annotations.csv";
pub const COUNTS: &str = "counts.csv";
pub const DETECTIONS: &str = "detections.csv";
pub const OFFSETS: &str = "offsets.csv";
pub const TRACKS: &str = "tracks.csv";
pub const DENSITY_DIR: &str = "density";
/// Resolved configuration written next to every command's outputs.
pub const RUN_CONFIG: &str = "run.cfg";

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:04}.pgm")
}

pub fn density_file(t: usize) -> String {
    format!("frame_{t:04}.dmap")
}

pub fn scene_name(i: usize) -> String {
    format!("scene_{i:03}")
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// One scene of a data directory; `name` is `None` when the data directory
/// is itself the scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneEntry {
    pub name: Option<String>,
    pub dir: PathBuf,
}

impl SceneEntry {
    /// Where this scene's outputs go below `out`.
    pub fn mirror(&self, out: &Path) -> PathBuf {
        match &self.name {
            Some(n) => out.join(n),
            None => out.to_path_buf(),
        }
    }
}

/// Scenes of a data directory, in name order.
pub fn scene_entries(root: &Path) -> Result<Vec<SceneEntry>> {
    if root.join(ANNOTATIONS).is_file() {
        return Ok(vec![SceneEntry {
            name: None,
            dir: root.to_path_buf(),
        }]);
    }
    let listing = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut out = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("scene_") && entry.path().join(ANNOTATIONS).is_file() {
            out.push(SceneEntry {
                name: Some(name),
                dir: entry.path(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Usage(format!(
            "{} holds neither {ANNOTATIONS} nor scene_* directories",
            root.display()
        )));
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

/// Number of consecutive `frame_NNNN.pgm` files starting at 0.
pub fn count_frames(dir: &Path) -> usize {
    (0..).take_while(|&t| dir.join(frame_file(t)).is_file()).count()
}

pub fn write_scene(dir: &Path, frames: &[ImageFrame], trajs: &[Trajectory]) -> Result<()> {
    create_dir(dir)?;
    for (t, f) in frames.iter().enumerate() {
        formats::write_pgm(&dir.join(frame_file(t)), f)?;
    }
    formats::save_annotations(&dir.join(ANNOTATIONS), trajs)
}

/// Ground truth of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub num_frames: usize,
    pub trajectories: Vec<Trajectory>,
    pub annotations: Vec<FrameAnnotations>,
}

/// The frame count comes from the images when present, otherwise from the
/// last annotated frame.
pub fn read_truth(dir: &Path) -> Result<Truth> {
    let path = dir.join(ANNOTATIONS);
    let trajectories = formats::load_annotations(&path)?;
    let last = trajectories.iter().flat_map(|t| t.points.last()).map(|p| p.frame + 1).max();
    let images = count_frames(dir);
    let num_frames = if images > 0 { images } else { last.unwrap_or(0) };
    if last.is_some_and(|l| l > num_frames) {
        return Err(Error::format(&path, 0, format!("annotations reach frame {} but only {num_frames} frames exist", last.unwrap_or(0) - 1)));
    }
    let annotations = frame_annotations(&trajectories, num_frames);
    Ok(Truth {
        num_frames,
        trajectories,
        annotations,
    })
}

/// Frames and annotations of one scene, checked for consistent extents.
pub fn read_sequence(dir: &Path) -> Result<(Sequence, Truth)> {
    let truth = read_truth(dir)?;
    if truth.num_frames < 2 {
        return Err(Error::Usage(format!("{} needs at least two frames", dir.display())));
    }
    let frames = (0..truth.num_frames)
        .map(|t| formats::read_pgm(&dir.join(frame_file(t))))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (frames[0].width, frames[0].height);
    if let Some(t) = frames.iter().position(|f| (f.width, f.height) != (w, h)) {
        return Err(Error::format(&dir.join(frame_file(t)), 0, format!("size differs from {w}x{h}")));
    }
    for a in &truth.annotations {
        a.validate(w, h).map_err(|e| Error::format(&dir.join(ANNOTATIONS), 0, e.to_string()))?;
    }
    let seq = Sequence {
        frames,
        annotations: truth.annotations.clone(),
    };
    Ok((seq, truth))
}

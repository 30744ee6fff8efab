//! Annotation data model and a synthetic crowd-scene generator.
//!
//! Coordinates are in pixels with pixel centers on integer positions, so a
//! frame of width `W` covers `x` in `[-0.5, W - 0.5)`.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Point2;
use crate::{Error, Result};

/// Per-frame count bounds observed in real drone crowd footage.
pub const MIN_COUNT: usize = 25;
pub const MAX_COUNT: usize = 455;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPoint {
    pub frame: usize,
    pub pos: Point2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u32,
    pub points: Vec<TimedPoint>,
}

impl Trajectory {
    /// Frame indices must be strictly increasing without gaps.
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::invalid(
                    "Trajectory",
                    alloc::format!(
                        "id {} jumps from frame {} to {}",
                        self.id,
                        w[0].frame,
                        w[1].frame
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.points.first().map(|p| p.frame)
    }

    pub fn at(&self, frame: usize) -> Option<Point2> {
        let first = self.first_frame()?;
        let p = self.points.get(frame.checked_sub(first)?)?;
        (p.frame == frame).then_some(p.pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub id: u32,
    pub pos: Point2,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameAnnotations {
    pub frame_index: usize,
    pub points: Vec<Annotation>,
}

impl FrameAnnotations {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn positions(&self) -> Vec<Point2> {
        self.points.iter().map(|a| a.pos).collect()
    }

    pub fn find(&self, id: u32) -> Option<Point2> {
        self.points.iter().find(|a| a.id == id).map(|a| a.pos)
    }

    /// Ids unique, every point inside a `width x height` frame.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.points {
            if !seen.insert(a.id) {
                return Err(Error::invalid(
                    "FrameAnnotations",
                    alloc::format!("duplicate id {} in frame {}", a.id, self.frame_index),
                ));
            }
            if !in_bounds(a.pos, width, height) {
                return Err(Error::invalid(
                    "FrameAnnotations",
                    alloc::format!(
                        "point ({}, {}) of id {} outside {width}x{height}",
                        a.pos.x,
                        a.pos.y,
                        a.id
                    ),
                ));
            }
        }
        Ok(())
    }
}

pub fn in_bounds(p: Point2, width: usize, height: usize) -> bool {
    p.x >= -0.5 && p.y >= -0.5 && p.x < width as f64 - 0.5 && p.y < height as f64 - 0.5
}

/// Regroups trajectories into one annotation set per frame `0..num_frames`,
/// ordered by id.
pub fn frame_annotations(trajs: &[Trajectory], num_frames: usize) -> Vec<FrameAnnotations> {
    let mut frames: Vec<FrameAnnotations> = (0..num_frames)
        .map(|frame_index| FrameAnnotations {
            frame_index,
            points: Vec::new(),
        })
        .collect();
    for t in trajs {
        for p in &t.points {
            if let Some(f) = frames.get_mut(p.frame) {
                f.points.push(Annotation { id: t.id, pos: p.pos });
            }
        }
    }
    for f in &mut frames {
        f.points.sort_by_key(|a| a.id);
    }
    frames
}

/// Grayscale frame, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("ImageFrame", &[height, width], &[data.len()]));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sub-rectangle starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::invalid(
                "crop",
                alloc::format!(
                    "{width}x{height} at ({x0},{y0}) exceeds {}x{}",
                    self.width,
                    self.height
                ),
            ));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn flipped(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width.max(1)) {
            data.extend(row.iter().rev());
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub num_people: usize,
    pub num_groups: usize,
    /// Group drift speed in px/frame.
    pub drift_speed: f64,
    /// Per-person, per-frame Gaussian jitter in px.
    pub jitter_sigma: f64,
    /// Spread of people around their group center, as a fraction of the
    /// shorter frame side.
    pub group_spread: f64,
    /// Gaussian sigma of each rendered head blob in px.
    pub blob_sigma: f64,
    pub blob_intensity: f64,
    /// Amplitude of the uniform background clutter.
    pub clutter: f64,
    pub min_count: usize,
    pub max_count: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 960,
            height: 540,
            num_frames: 16,
            num_people: 144,
            num_groups: 6,
            drift_speed: 1.5,
            jitter_sigma: 0.3,
            group_spread: 0.15,
            blob_sigma: 3.0,
            blob_intensity: 0.9,
            clutter: 0.1,
            min_count: MIN_COUNT,
            max_count: MAX_COUNT,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Keeps at least this many pixels between a head and the frame edge.
    pub const MARGIN: f64 = 2.0;

    pub fn validate(&self) -> Result<()> {
        let err = |reason: alloc::string::String| Err(Error::invalid("SceneConfig", reason));
        if self.width == 0 || self.height == 0 {
            return err(alloc::format!("zero-area frame {}x{}", self.width, self.height));
        }
        if (self.width as f64) <= 2.0 * Self::MARGIN + 1.0 || (self.height as f64) <= 2.0 * Self::MARGIN + 1.0 {
            return err(alloc::format!("frame {}x{} too small", self.width, self.height));
        }
        if self.num_frames < 2 {
            return err(alloc::format!("need at least 2 frames, got {}", self.num_frames));
        }
        if self.num_people < self.min_count || self.num_people > self.max_count {
            return err(alloc::format!(
                "num_people {} outside [{}, {}]",
                self.num_people, self.min_count, self.max_count
            ));
        }
        if self.num_groups == 0 {
            return err("num_groups must be positive".into());
        }
        if !(self.drift_speed >= 0.0 && self.jitter_sigma >= 0.0 && self.blob_sigma > 0.0 && self.clutter >= 0.0) {
            return err("motion and rendering parameters must be non-negative".into());
        }
        Ok(())
    }
}

/// Standard normal sample (Box-Muller).
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Reflects `v` into `[lo, hi]`; returns the folded value and whether the
/// number of reflections was odd.
fn reflect(mut v: f64, lo: f64, hi: f64) -> (f64, bool) {
    let mut flipped = false;
    for _ in 0..64 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            return (v, flipped);
        }
        flipped = !flipped;
    }
    (v.clamp(lo, hi), flipped)
}

/// Group-coherent drift with per-person jitter and reflective walls, rendered
/// as one Gaussian blob per head over uniform clutter.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(Vec<ImageFrame>, Vec<Trajectory>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let (xlo, xhi) = (SceneConfig::MARGIN, w - 1.0 - SceneConfig::MARGIN);
    let (ylo, yhi) = (SceneConfig::MARGIN, h - 1.0 - SceneConfig::MARGIN);
    let spread = cfg.group_spread * w.min(h);

    let groups: Vec<(Point2, Point2)> = (0..cfg.num_groups)
        .map(|_| {
            let center = Point2::new(rng.gen_range(xlo..=xhi), rng.gen_range(ylo..=yhi));
            let theta = rng.gen_range(0.0..core::f64::consts::TAU);
            let v = Point2::new(cfg.drift_speed * libm::cos(theta), cfg.drift_speed * libm::sin(theta));
            (center, v)
        })
        .collect();

    let mut pos = Vec::with_capacity(cfg.num_people);
    let mut vel = Vec::with_capacity(cfg.num_people);
    for i in 0..cfg.num_people {
        let (center, v) = groups[i % cfg.num_groups];
        let x = reflect(center.x + spread * gaussian(&mut rng), xlo, xhi).0;
        let y = reflect(center.y + spread * gaussian(&mut rng), ylo, yhi).0;
        pos.push(Point2::new(x, y));
        vel.push(v);
    }

    let mut trajs: Vec<Trajectory> = (0..cfg.num_people)
        .map(|i| Trajectory {
            id: i as u32 + 1,
            points: Vec::with_capacity(cfg.num_frames),
        })
        .collect();
    for frame in 0..cfg.num_frames {
        if frame > 0 {
            for (p, v) in pos.iter_mut().zip(vel.iter_mut()) {
                let jx = cfg.jitter_sigma * gaussian(&mut rng);
                let jy = cfg.jitter_sigma * gaussian(&mut rng);
                let (x, fx) = reflect(p.x + v.x + jx, xlo, xhi);
                let (y, fy) = reflect(p.y + v.y + jy, ylo, yhi);
                if fx {
                    v.x = -v.x;
                }
                if fy {
                    v.y = -v.y;
                }
                *p = Point2::new(x, y);
            }
        }
        for (t, &p) in trajs.iter_mut().zip(&pos) {
            t.points.push(TimedPoint { frame, pos: p });
        }
    }

    let frames = (0..cfg.num_frames)
        .map(|f| {
            let heads: Vec<Point2> = trajs.iter().map(|t| t.points[f].pos).collect();
            render(cfg, &heads, &mut rng)
        })
        .collect();
    Ok((frames, trajs))
}

fn render(cfg: &SceneConfig, heads: &[Point2], rng: &mut impl Rng) -> ImageFrame {
    let (w, h) = (cfg.width, cfg.height);
    let mut data: Vec<f64> = (0..w * h).map(|_| cfg.clutter * rng.gen::<f64>()).collect();
    let reach = libm::ceil(4.0 * cfg.blob_sigma) as isize;
    let inv = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
    for p in heads {
        let (cx, cy) = (libm::round(p.x) as isize, libm::round(p.y) as isize);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
            for x in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                let d2 = Point2::new(x as f64, y as f64).dist_sq(*p);
                data[y as usize * w + x as usize] += cfg.blob_intensity * libm::exp(-d2 * inv);
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    ImageFrame {
        width: w,
        height: h,
        data,
    }
}

/// Splits a frame into 2x2 quadrants (row-major: top-left, top-right,
/// bottom-left, bottom-right) and moves annotations into patch coordinates.
/// Points exactly on a seam go to the lower-index patch.
pub fn split_frame_patches(
    frame: &ImageFrame,
    ann: &FrameAnnotations,
) -> Result<Vec<(ImageFrame, FrameAnnotations)>> {
    if frame.width % 2 != 0 || frame.height % 2 != 0 || frame.width == 0 || frame.height == 0 {
        return Err(Error::invalid(
            "split_frame_patches",
            alloc::format!("extents must be even and non-zero, got {}x{}", frame.width, frame.height),
        ));
    }
    let (pw, ph) = (frame.width / 2, frame.height / 2);
    let seam_x = pw as f64 - 0.5;
    let seam_y = ph as f64 - 0.5;
    let mut out = Vec::with_capacity(4);
    for py in 0..2 {
        for px in 0..2 {
            let img = frame.crop(px * pw, py * ph, pw, ph)?;
            let points = ann
                .points
                .iter()
                .filter(|a| {
                    let right = a.pos.x > seam_x;
                    let below = a.pos.y > seam_y;
                    right == (px == 1) && below == (py == 1)
                })
                .map(|a| Annotation {
                    id: a.id,
                    pos: Point2::new(a.pos.x - (px * pw) as f64, a.pos.y - (py * ph) as f64),
                })
                .collect();
            out.push((
                img,
                FrameAnnotations {
                    frame_index: ann.frame_index,
                    points,
                },
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop_width: usize,
    pub crop_height: usize,
    pub flip_probability: f64,
}

/// One concrete draw of the augmentation, reusable across a frame pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_width: usize,
    pub crop_height: usize,
}

impl AugmentConfig {
    pub fn sample(&self, width: usize, height: usize, rng: &mut impl Rng) -> Result<AugmentParams> {
        if self.crop_width > width || self.crop_height > height {
            return Err(Error::invalid(
                "augment",
                alloc::format!(
                    "crop {}x{} larger than frame {width}x{height}",
                    self.crop_width, self.crop_height
                ),
            ));
        }
        let flip = rng.gen::<f64>() < self.flip_probability;
        let crop_x = rng.gen_range(0..=width - self.crop_width);
        let crop_y = rng.gen_range(0..=height - self.crop_height);
        Ok(AugmentParams {
            flip,
            crop_x,
            crop_y,
            crop_width: self.crop_width,
            crop_height: self.crop_height,
        })
    }
}

impl AugmentParams {
    /// Flip first (about the full frame), then crop; points leaving the crop
    /// are dropped.
    pub fn apply(&self, frame: &ImageFrame, ann: &FrameAnnotations) -> Result<(ImageFrame, FrameAnnotations)> {
        let base = if self.flip { frame.flipped() } else { frame.clone() };
        let img = base.crop(self.crop_x, self.crop_y, self.crop_width, self.crop_height)?;
        let w = frame.width as f64;
        let points = ann
            .points
            .iter()
            .map(|a| {
                let x = if self.flip { w - 1.0 - a.pos.x } else { a.pos.x };
                Annotation {
                    id: a.id,
                    pos: Point2::new(x - self.crop_x as f64, a.pos.y - self.crop_y as f64),
                }
            })
            .filter(|a| in_bounds(a.pos, self.crop_width, self.crop_height))
            .collect();
        Ok((
            img,
            FrameAnnotations {
                frame_index: ann.frame_index,
                points,
            },
        ))
    }
}

/// Random horizontal flip plus random crop, applied consistently to the frame
/// and its annotations.
pub fn augment(
    frame: &ImageFrame,
    ann: &FrameAnnotations,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(ImageFrame, FrameAnnotations)> {
    cfg.sample(frame.width, frame.height, rng)?.apply(frame, ann)
}

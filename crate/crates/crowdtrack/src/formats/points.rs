//! Annotation, detection, offset, track and count files.

use std::collections::BTreeMap;
use std::path::Path;

use crowdtrack_core::geometry::Point2;
use crowdtrack_core::localization::DetectedPoint;
use crowdtrack_core::network::infer::Offsets;
use crowdtrack_core::synth::{TimedPoint, Trajectory};
use crowdtrack_core::tracking::{TrackPoint, TrackSet, Tracklet};

use super::table::{self, Row};
use crate::error::{Error, Result};

pub const ANNOTATION_HEADER: [&str; 4] = ["frame", "id", "x", "y"];
pub const DETECTION_HEADER: [&str; 4] = ["frame", "x", "y", "conf"];
pub const OFFSET_HEADER: [&str; 7] = ["frame", "x", "y", "ox_fwd", "oy_fwd", "ox_bwd", "oy_bwd"];
pub const TRACK_HEADER: [&str; 5] = ["track_id", "frame", "x", "y", "conf"];
pub const COUNT_HEADER: [&str; 2] = ["frame", "count"];

/// Groups `(id, frame, payload, line)` rows into frame-ordered runs per id,
/// rejecting duplicate frames and gaps.
fn group_runs<T>(path: &Path, rows: Vec<(u32, usize, T, u64)>) -> Result<BTreeMap<u32, Vec<(usize, T)>>> {
    let mut by_id: BTreeMap<u32, Vec<(usize, T, u64)>> = BTreeMap::new();
    for (id, frame, v, line) in rows {
        by_id.entry(id).or_default().push((frame, v, line));
    }
    let mut out = BTreeMap::new();
    for (id, mut pts) in by_id {
        pts.sort_by_key(|p| (p.0, p.2));
        for w in pts.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(Error::format(path, w[1].2, format!("id {id} appears twice in frame {}", w[0].0)));
            }
            if w[1].0 != w[0].0 + 1 {
                return Err(Error::format(path, w[1].2, format!("id {id} skips from frame {} to {}", w[0].0, w[1].0)));
            }
        }
        out.insert(id, pts.into_iter().map(|(f, v, _)| (f, v)).collect());
    }
    Ok(out)
}

fn point(row: &Row<'_>, x: usize) -> Result<Point2, String> {
    Ok(Point2::new(row.real(x)?, row.real(x + 1)?))
}

pub fn save_annotations(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut rows: Vec<(usize, u32, Point2)> = trajs
        .iter()
        .flat_map(|t| t.points.iter().map(move |p| (p.frame, t.id, p.pos)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    table::write(
        path,
        &ANNOTATION_HEADER,
        rows.into_iter().map(|(f, id, p)| format!("{f},{id},{:.3},{:.3}", p.x, p.y)),
    )
}

/// Trajectories in ascending id order.
pub fn load_annotations(path: &Path) -> Result<Vec<Trajectory>> {
    let rows = table::read(path, &ANNOTATION_HEADER, |r, line| {
        Ok((r.get::<u32>(1)?, r.get::<usize>(0)?, point(r, 2)?, line))
    })?;
    Ok(group_runs(path, rows)?
        .into_iter()
        .map(|(id, pts)| Trajectory {
            id,
            points: pts.into_iter().map(|(frame, pos)| TimedPoint { frame, pos }).collect(),
        })
        .collect())
}

/// Ensures a per-frame list has at least `num_frames` entries.
fn frames_for<T>(path: &Path, rows: Vec<(usize, T, u64)>, num_frames: Option<usize>) -> Result<Vec<Vec<T>>> {
    let needed = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let n = num_frames.unwrap_or(needed);
    let mut out: Vec<Vec<T>> = (0..n).map(|_| Vec::new()).collect();
    for (f, v, line) in rows {
        let slot = out
            .get_mut(f)
            .ok_or_else(|| Error::format(path, line, format!("frame {f} outside 0..{n}")))?;
        slot.push(v);
    }
    Ok(out)
}

pub fn save_detections(path: &Path, dets: &[Vec<DetectedPoint>]) -> Result<()> {
    table::write(
        path,
        &DETECTION_HEADER,
        dets.iter().enumerate().flat_map(|(f, ds)| {
            ds.iter()
                .map(move |d| format!("{f},{:.3},{:.3},{:.6}", d.pos.x, d.pos.y, d.confidence))
        }),
    )
}

/// Detections per frame; `num_frames` fixes the frame count, otherwise it is
/// one past the largest frame index present.
pub fn load_detections(path: &Path, num_frames: Option<usize>) -> Result<Vec<Vec<DetectedPoint>>> {
    let rows = table::read(path, &DETECTION_HEADER, |r, line| {
        let confidence = r.real(3)?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(format!("confidence {confidence} outside [0, 1]"));
        }
        Ok((r.get::<usize>(0)?, DetectedPoint { pos: point(r, 1)?, confidence }, line))
    })?;
    frames_for(path, rows, num_frames)
}

pub fn save_offsets(path: &Path, dets: &[Vec<DetectedPoint>], offsets: &[Vec<Offsets>]) -> Result<()> {
    if dets.len() != offsets.len() || dets.iter().zip(offsets).any(|(d, o)| d.len() != o.len()) {
        return Err(Error::Usage("offsets do not line up with detections".into()));
    }
    table::write(
        path,
        &OFFSET_HEADER,
        dets.iter().zip(offsets).enumerate().flat_map(|(f, (ds, os))| {
            ds.iter().zip(os).map(move |(d, o)| {
                format!("{f},{:.3},{:.3},{:.6},{:.6},{:.6},{:.6}", d.pos.x, d.pos.y, o[0], o[1], o[2], o[3])
            })
        }),
    )
}

/// Per frame, each detection position with its `[fwd x, fwd y, bwd x, bwd y]`
/// offsets.
pub fn load_offsets(path: &Path, num_frames: Option<usize>) -> Result<Vec<Vec<(Point2, Offsets)>>> {
    let rows = table::read(path, &OFFSET_HEADER, |r, line| {
        let o = [r.real(3)?, r.real(4)?, r.real(5)?, r.real(6)?];
        Ok((r.get::<usize>(0)?, (point(r, 1)?, o), line))
    })?;
    frames_for(path, rows, num_frames)
}

pub fn save_tracks(path: &Path, tracks: &TrackSet) -> Result<()> {
    let mut rows: Vec<(u32, &TrackPoint)> = tracks
        .tracklets
        .iter()
        .flat_map(|t| t.points.iter().map(move |p| (t.id, p)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1.frame));
    table::write(
        path,
        &TRACK_HEADER,
        rows.into_iter()
            .map(|(id, p)| format!("{id},{},{:.3},{:.3},{:.6}", p.frame, p.pos.x, p.pos.y, p.confidence)),
    )
}

pub fn load_tracks(path: &Path) -> Result<TrackSet> {
    let rows = table::read(path, &TRACK_HEADER, |r, line| {
        let confidence = r.real(4)?;
        Ok((r.get::<u32>(0)?, r.get::<usize>(1)?, (point(r, 2)?, confidence), line))
    })?;
    Ok(TrackSet {
        tracklets: group_runs(path, rows)?
            .into_iter()
            .map(|(id, pts)| Tracklet {
                id,
                points: pts
                    .into_iter()
                    .map(|(frame, (pos, confidence))| TrackPoint { frame, pos, confidence })
                    .collect(),
            })
            .collect(),
    })
}

pub fn save_counts(path: &Path, counts: &[f64]) -> Result<()> {
    table::write(path, &COUNT_HEADER, counts.iter().enumerate().map(|(f, c)| format!("{f},{c:.6}")))
}

/// Counts indexed by frame; every frame `0..n` must appear exactly once.
pub fn load_counts(path: &Path) -> Result<Vec<f64>> {
    let rows = table::read(path, &COUNT_HEADER, |r, line| Ok((r.get::<usize>(0)?, r.real(1)?, line)))?;
    let mut out = vec![None; rows.len()];
    for (f, c, line) in rows {
        match out.get_mut(f) {
            Some(slot @ None) => *slot = Some(c),
            Some(Some(_)) => return Err(Error::format(path, line, format!("frame {f} listed twice"))),
            None => return Err(Error::format(path, line, format!("frame {f} out of sequence"))),
        }
    }
    Ok(out.into_iter().map(|c| c.unwrap_or(0.0)).collect())
}

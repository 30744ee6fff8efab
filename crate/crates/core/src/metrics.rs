//! Counting, localization and tracking evaluation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt::Write;

use crate::geometry::Point2;
use crate::localization::DetectedPoint;
use crate::synth::Trajectory;
use crate::tracking::TrackSet;
use crate::{Error, Result};

/// Distance thresholds 1..=25 px of the localization protocol.
pub const LOC_THRESHOLDS: usize = 25;
/// Matched-ratio thresholds of the tracking protocol.
pub const TRACK_RATIOS: [f64; 3] = [0.10, 0.15, 0.20];
/// Point matching distance on tracklets, px.
pub const TRACK_DISTANCE: f64 = 25.0;

/// `(MAE, MSE)` over per-video series of `(ground truth, estimate)` counts,
/// weighted by frame, with MSE as the root of the mean squared error.
pub fn mae_mse(series: &[Vec<(f64, f64)>]) -> Result<(f64, f64)> {
    let n: usize = series.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Empty("mae_mse"));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for &(z, e) in series.iter().flatten() {
        abs += libm::fabs(z - e);
        sq += (z - e) * (z - e);
    }
    Ok((abs / n as f64, libm::sqrt(sq / n as f64)))
}

/// Processing order of predictions: confidence descending, ties by index.
pub fn confidence_order(preds: &[DetectedPoint]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    idx
}

fn gt_tiebreak(a: Point2, b: Point2) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Greedy matching: each prediction, in confidence order, takes the nearest
/// unmatched ground-truth point within `threshold` (equidistant candidates
/// by coordinates). Returns the matched GT index per prediction.
pub fn greedy_match(preds: &[DetectedPoint], gt: &[Point2], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt.len()];
    let mut out = vec![None; preds.len()];
    for i in confidence_order(preds) {
        let p = preds[i].pos;
        let mut best: Option<(f64, usize)> = None;
        for (k, &q) in gt.iter().enumerate() {
            if taken[k] {
                continue;
            }
            let d = p.dist(q);
            if d > threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bk)) => d < bd || (d == bd && gt_tiebreak(q, gt[bk]) == Ordering::Less),
            };
            if better {
                best = Some((d, k));
            }
        }
        if let Some((_, k)) = best {
            taken[k] = true;
            out[i] = Some(k);
        }
    }
    out
}

/// All-points interpolated average precision of scored hits `(confidence,
/// true positive)` against `positives` ground-truth items. Hits are ranked
/// by confidence, ties keeping their input order.
pub fn average_precision(hits: &[(f64, bool)], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..hits.len()).collect();
    order.sort_by(|&a, &b| hits[b].0.total_cmp(&hits[a].0).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (rank, &i) in order.iter().enumerate() {
        if hits[i].1 {
            tp += 1;
        }
        curve.push((tp as f64 / positives as f64, tp as f64 / (rank + 1) as f64));
    }
    // precision envelope from the right
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for &(r, p) in &curve {
        ap += (r - last_recall) * p;
        last_recall = r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    /// AP at thresholds 1..=25 px.
    pub ap: [f64; LOC_THRESHOLDS],
    pub map: f64,
    pub warnings: Vec<String>,
}

impl LocalizationReport {
    /// AP at an integer threshold in px.
    pub fn at(&self, px: usize) -> f64 {
        self.ap[px - 1]
    }
}

/// Pools all frames per threshold and reports AP per threshold and the mean.
pub fn localization_map(preds: &[Vec<DetectedPoint>], gts: &[Vec<Point2>]) -> Result<LocalizationReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape("localization_map", &[preds.len()], &[gts.len()]));
    }
    let positives: usize = gts.iter().map(Vec::len).sum();
    let mut warnings = Vec::new();
    if positives == 0 {
        warnings.push(String::from("no ground-truth points; L-AP reported as 0"));
    }
    let mut ap = [0.0; LOC_THRESHOLDS];
    for (k, slot) in ap.iter_mut().enumerate() {
        let thr = (k + 1) as f64;
        let mut hits = Vec::new();
        for (p, g) in preds.iter().zip(gts) {
            let m = greedy_match(p, g, thr);
            hits.extend(p.iter().zip(&m).map(|(d, m)| (d.confidence, m.is_some())));
        }
        *slot = average_precision(&hits, positives);
    }
    let map = ap.iter().sum::<f64>() / LOC_THRESHOLDS as f64;
    Ok(LocalizationReport { ap, map, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    /// AP at ratio thresholds 0.10, 0.15, 0.20.
    pub ap: [f64; 3],
    pub map: f64,
    pub warnings: Vec<String>,
}

/// Frames where the tracklet lies within 25 px of the trajectory, divided by
/// the trajectory length.
pub fn matched_ratio(track: &crate::tracking::Tracklet, gt: &Trajectory) -> f64 {
    if gt.points.is_empty() {
        return 0.0;
    }
    let hits = gt
        .points
        .iter()
        .filter(|g| track.at(g.frame).is_some_and(|p| p.pos.dist(g.pos) <= TRACK_DISTANCE))
        .count();
    hits as f64 / gt.points.len() as f64
}

fn tracking_hits(pred: &TrackSet, gt: &[Trajectory], hits: &mut [Vec<(f64, bool)>; 3]) {
    let mut order: Vec<usize> = (0..pred.tracklets.len()).collect();
    let conf: Vec<f64> = pred.tracklets.iter().map(|t| t.mean_confidence()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(pred.tracklets[a].id.cmp(&pred.tracklets[b].id)));
    let ratios: Vec<Vec<f64>> = pred.tracklets.iter().map(|t| gt.iter().map(|g| matched_ratio(t, g)).collect()).collect();
    for (h, &r) in hits.iter_mut().zip(&TRACK_RATIOS) {
        let mut claimed = vec![false; gt.len()];
        for &i in &order {
            let mut best: Option<(f64, usize)> = None;
            for (k, &v) in ratios[i].iter().enumerate() {
                if !claimed[k] && v > r && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, k));
                }
            }
            if let Some((_, k)) = best {
                claimed[k] = true;
            }
            h.push((conf[i], best.is_some()));
        }
    }
}

/// Tracklets in descending mean confidence (ties by id) each claim the
/// unclaimed trajectory of highest matched ratio, provided that ratio is
/// strictly above the threshold; claiming is done separately per threshold.
pub fn tracking_map(pred: &TrackSet, gt: &[Trajectory]) -> TrackingReport {
    tracking_map_pooled(&[(pred, gt)])
}

/// Tracking AP with claims made within each sequence and the ranked hits
/// pooled over all sequences.
pub fn tracking_map_pooled(sequences: &[(&TrackSet, &[Trajectory])]) -> TrackingReport {
    let mut warnings = Vec::new();
    let positives: usize = sequences.iter().map(|s| s.1.len()).sum();
    if positives == 0 {
        warnings.push(String::from("no ground-truth trajectories; T-AP reported as 0"));
    }
    let mut hits: [Vec<(f64, bool)>; 3] = Default::default();
    for (pred, gt) in sequences {
        tracking_hits(pred, gt, &mut hits);
    }
    let ap = [0, 1, 2].map(|k| average_precision(&hits[k], positives));
    let map = ap.iter().sum::<f64>() / 3.0;
    TrackingReport { ap, map, warnings }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub localization: LocalizationReport,
    pub tracking: TrackingReport,
}

impl EvalReport {
    /// One `key=value` line per figure.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mae={:.6}", self.mae);
        let _ = writeln!(s, "mse={:.6}", self.mse);
        for (k, v) in self.localization.ap.iter().enumerate() {
            let _ = writeln!(s, "l_ap@{}={:.6}", k + 1, v);
        }
        let _ = writeln!(s, "l_map={:.6}", self.localization.map);
        for (r, v) in TRACK_RATIOS.iter().zip(&self.tracking.ap) {
            let _ = writeln!(s, "t_ap@{r:.2}={v:.6}");
        }
        let _ = writeln!(s, "t_map={:.6}", self.tracking.map);
        s
    }

    pub fn to_table(&self) -> String {
        let l = &self.localization;
        let t = &self.tracking;
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>10}", "metric", "value");
        let rows = [
            ("MAE", self.mae),
            ("MSE", self.mse),
            ("L-mAP", l.map),
            ("L-AP@10", l.at(10)),
            ("L-AP@15", l.at(15)),
            ("L-AP@20", l.at(20)),
            ("T-mAP", t.map),
            ("T-AP@0.10", t.ap[0]),
            ("T-AP@0.15", t.ap[1]),
            ("T-AP@0.20", t.ap[2]),
        ];
        for (name, v) in rows {
            let _ = writeln!(s, "{name:<10}{v:>10.4}");
        }
        for w in l.warnings.iter().chain(&t.warnings) {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TimedPoint;
    use crate::tracking::{TrackPoint, Tracklet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dp(x: f64, y: f64, c: f64) -> DetectedPoint {
        DetectedPoint { pos: Point2::new(x, y), confidence: c }
    }

    #[test]
    fn counting_examples() {
        assert_eq!(mae_mse(&[vec![(3.0, 3.0), (5.0, 5.0)]]).unwrap(), (0.0, 0.0));
        let (mae, mse) = mae_mse(&[vec![(10.0, 12.0), (20.0, 16.0)]]).unwrap();
        assert!((mae - 3.0).abs() < 1e-12);
        assert!((mse - 10f64.sqrt()).abs() < 1e-12);
        // frame-weighted, not per-video averaged
        let (mae, _) = mae_mse(&[vec![(1.0, 2.0)], vec![(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]]).unwrap();
        assert!((mae - 0.25).abs() < 1e-12);
        assert!(mae_mse(&[vec![]]).is_err());
    }

    /// Unique assignment where each prediction, in order, holds the nearest
    /// GT not held by an earlier one, or none if no such GT is in range.
    pub(crate) fn greedy_oracle(preds: &[DetectedPoint], gt: &[Point2], thr: f64) -> Vec<Option<usize>> {
        let order = confidence_order(preds);
        let n = preds.len();
        let mut found: Vec<Vec<Option<usize>>> = Vec::new();
        let mut cur = vec![None; n];
        fn rec(k: usize, order: &[usize], preds: &[DetectedPoint], gt: &[Point2], thr: f64, cur: &mut Vec<Option<usize>>, found: &mut Vec<Vec<Option<usize>>>) {
            if k == order.len() {
                found.push(cur.clone());
                return;
            }
            let i = order[k];
            let held: Vec<usize> = order[..k].iter().filter_map(|&j| cur[j]).collect();
            let free: Vec<usize> = (0..gt.len()).filter(|g| !held.contains(g) && preds[i].pos.dist(gt[*g]) <= thr).collect();
            for choice in core::iter::once(None).chain(free.iter().map(|&g| Some(g))) {
                let ok = match choice {
                    None => free.is_empty(),
                    Some(g) => free.iter().all(|&h| {
                        let (dg, dh) = (preds[i].pos.dist(gt[g]), preds[i].pos.dist(gt[h]));
                        dg < dh || (dg == dh && gt_tiebreak(gt[g], gt[h]).then(g.cmp(&h)) != Ordering::Greater)
                    }),
                };
                if ok {
                    cur[i] = choice;
                    rec(k + 1, order, preds, gt, thr, cur, found);
                    cur[i] = None;
                }
            }
        }
        rec(0, &order, preds, gt, thr, &mut cur, &mut found);
        assert_eq!(found.len(), 1);
        found.remove(0)
    }

    fn max_matching(preds: &[DetectedPoint], gt: &[Point2], thr: f64) -> usize {
        fn rec(i: usize, preds: &[DetectedPoint], gt: &[Point2], thr: f64, used: &mut Vec<bool>) -> usize {
            if i == preds.len() {
                return 0;
            }
            let mut best = rec(i + 1, preds, gt, thr, used);
            for k in 0..gt.len() {
                if !used[k] && preds[i].pos.dist(gt[k]) <= thr {
                    used[k] = true;
                    best = best.max(1 + rec(i + 1, preds, gt, thr, used));
                    used[k] = false;
                }
            }
            best
        }
        rec(0, preds, gt, thr, &mut vec![false; gt.len()])
    }

    #[test]
    fn greedy_examples_and_oracles() {
        assert_eq!(greedy_match(&[dp(0.0, 0.0, 0.9)], &[Point2::new(1.0, 0.0)], 2.0), vec![Some(0)]);
        let two = greedy_match(&[dp(0.0, 0.0, 0.9), dp(0.5, 0.0, 0.8)], &[Point2::new(1.0, 0.0)], 2.0);
        assert_eq!(two, vec![Some(0), None]);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..500 {
            let np = rng.gen_range(0..=6);
            let ng = rng.gen_range(0..=6);
            // coarse grid makes distance ties and confidence ties common
            let preds: Vec<DetectedPoint> = (0..np).map(|_| dp(rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64, rng.gen_range(0..4) as f64 / 4.0)).collect();
            let gt: Vec<Point2> = (0..ng).map(|_| Point2::new(rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64)).collect();
            let thr = rng.gen_range(1.0..5.0);
            let m = greedy_match(&preds, &gt, thr);
            assert_eq!(m, greedy_oracle(&preds, &gt, thr));
            let tp = m.iter().flatten().count();
            assert!(tp <= max_matching(&preds, &gt, thr));
            // GT order does not change which points are matched
            let mut perm: Vec<usize> = (0..ng).collect();
            perm.reverse();
            let rev: Vec<Point2> = perm.iter().map(|&k| gt[k]).collect();
            let m2 = greedy_match(&preds, &rev, thr);
            let pos = |m: &[Option<usize>], g: &[Point2]| m.iter().map(|o| o.map(|k| (g[k].x, g[k].y))).collect::<Vec<_>>();
            assert_eq!(pos(&m, &gt), pos(&m2, &rev));
        }
    }

    #[test]
    fn localization_hand_cases() {
        let r = localization_map(&[vec![dp(5.0, 0.0, 1.0)]], &[vec![Point2::new(0.0, 0.0)]]).unwrap();
        for k in 1..=25 {
            assert_eq!(r.at(k), if k >= 5 { 1.0 } else { 0.0 });
        }
        assert_eq!(r.map, 21.0 / 25.0);
        let r = localization_map(&[vec![dp(0.0, 0.0, 0.9), dp(50.0, 50.0, 0.8)]], &[vec![Point2::new(0.0, 0.0), Point2::new(90.0, 0.0)]]).unwrap();
        assert_eq!(r.at(25), 0.5);
        let perfect = localization_map(&[vec![dp(1.0, 2.0, 0.7)], vec![dp(3.0, 3.0, 0.2)]], &[vec![Point2::new(1.0, 2.0)], vec![Point2::new(3.0, 3.0)]]).unwrap();
        assert_eq!(perfect.map, 1.0);
        let empty = localization_map(&[vec![]], &[vec![Point2::new(1.0, 1.0)]]).unwrap();
        assert_eq!(empty.map, 0.0);
        let no_gt = localization_map(&[vec![dp(0.0, 0.0, 1.0)]], &[vec![]]).unwrap();
        assert_eq!(no_gt.map, 0.0);
        assert_eq!(no_gt.warnings.len(), 1);
    }

    #[test]
    fn ap_monotone_in_threshold_and_map_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let preds: Vec<Vec<DetectedPoint>> = (0..3).map(|_| (0..rng.gen_range(0..8)).map(|_| dp(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0), rng.gen())).collect()).collect();
            let gts: Vec<Vec<Point2>> = (0..3).map(|_| (0..rng.gen_range(1..8)).map(|_| Point2::new(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0))).collect()).collect();
            let r = localization_map(&preds, &gts).unwrap();
            for w in r.ap.windows(2) {
                assert!(w[1] >= w[0] - 1e-15);
            }
            assert!((r.map - r.ap.iter().sum::<f64>() / 25.0).abs() < 1e-12);
            assert!(r.ap.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    fn traj(id: u32, frames: core::ops::Range<usize>, x: f64) -> Trajectory {
        Trajectory { id, points: frames.map(|f| TimedPoint { frame: f, pos: Point2::new(x, f as f64) }).collect() }
    }

    fn tracklet(id: u32, pts: &[(usize, f64, f64)], conf: f64) -> Tracklet {
        Tracklet { id, points: pts.iter().map(|&(f, x, y)| TrackPoint { frame: f, pos: Point2::new(x, y), confidence: conf }).collect() }
    }

    #[test]
    fn tracking_cases() {
        let gt = vec![traj(1, 0..10, 0.0), traj(2, 0..10, 100.0)];
        let echo = TrackSet {
            tracklets: gt.iter().map(|t| tracklet(t.id, &t.points.iter().map(|p| (p.frame, p.pos.x, p.pos.y)).collect::<Vec<_>>(), 1.0)).collect(),
        };
        assert_eq!(tracking_map(&echo, &gt).map, 1.0);

        let eight = tracklet(1, &(0..8).map(|f| (f, 3.0, f as f64)).collect::<Vec<_>>(), 0.9);
        assert_eq!(matched_ratio(&eight, &gt[0]), 0.8);
        let r = tracking_map(&TrackSet { tracklets: vec![eight] }, &gt[..1]);
        assert_eq!(r.ap, [1.0; 3]);

        // 3 of 20 frames: ratio 0.15, strictly above 0.10 only
        let long = traj(1, 0..20, 0.0);
        let short = tracklet(1, &[(0, 0.0, 0.0), (1, 0.0, 1.0), (2, 0.0, 2.0)], 0.9);
        assert!((matched_ratio(&short, &long) - 0.15).abs() < 1e-15);
        let r = tracking_map(&TrackSet { tracklets: vec![short] }, &[long]);
        assert_eq!(r.ap, [1.0, 0.0, 0.0]);

        let r = tracking_map(&TrackSet::default(), &[]);
        assert_eq!(r.map, 0.0);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn report_formats() {
        let rep = EvalReport {
            mae: 0.0,
            mse: 0.0,
            localization: LocalizationReport { ap: [1.0; 25], map: 1.0, warnings: vec![] },
            tracking: TrackingReport { ap: [1.0; 3], map: 1.0, warnings: vec![] },
        };
        let kv = rep.to_key_values();
        assert!(kv.contains("l_map=1.000000\n"));
        assert!(kv.contains("t_ap@0.15=1.000000\n"));
        assert_eq!(kv.lines().count(), 2 + 25 + 1 + 3 + 1);
        assert!(rep.to_table().contains("L-AP@10"));
    }
}

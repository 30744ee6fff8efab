//! Min-cost-flow linking of per-frame detections into tracklets.
//!
//! Every detection becomes a split node pair joined by an arc carrying the
//! detection cost; entry, exit and gated transition arcs connect the pairs.
//! Node-disjoint source-to-sink paths are tracklets. The solver runs
//! successive shortest paths on the residual graph and stops at the first
//! path of non-negative cost, which yields the minimum-cost set of paths.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::geometry::Point2;
use crate::localization::DetectedPoint;
use crate::{Error, Result};

/// Confidence clamp applied before taking the detection log-odds.
pub const CONF_CLAMP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Maximum projected distance of a transition arc, px.
    pub gate: f64,
    pub entry_cost: f64,
    pub exit_cost: f64,
    /// Transition cost per px of projected distance.
    pub link_lambda: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            gate: 25.0,
            entry_cost: 2.0,
            exit_cost: 2.0,
            link_lambda: 0.04,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate > 0.0) || !(self.link_lambda >= 0.0) {
            return Err(Error::invalid("TrackerConfig", "gate must be positive and lambda non-negative"));
        }
        Ok(())
    }
}

/// `log((1 - c) / c)` with `c` clamped to `[1e-4, 1 - 1e-4]`.
pub fn detection_cost(confidence: f64) -> f64 {
    let c = confidence.clamp(CONF_CLAMP, 1.0 - CONF_CLAMP);
    libm::log((1.0 - c) / c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct DetRef {
    pub frame: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    /// Detections in node order; detection `d` owns nodes `2+2d` (in) and
    /// `3+2d` (out). Node 0 is the source, node 1 the sink.
    pub detections: Vec<DetRef>,
    pub points: Vec<DetectedPoint>,
    pub arcs: Vec<Arc>,
}

pub const SOURCE: usize = 0;
pub const SINK: usize = 1;

pub fn in_node(d: usize) -> usize {
    2 + 2 * d
}

pub fn out_node(d: usize) -> usize {
    3 + 2 * d
}

impl FlowGraph {
    pub fn num_nodes(&self) -> usize {
        2 + 2 * self.detections.len()
    }

    /// Transition arcs as `(from detection, to detection, cost)`.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.arcs
            .iter()
            .filter(|a| a.from >= 2 && a.to >= 2 && a.from % 2 == 1)
            .map(|a| ((a.from - 3) / 2, (a.to - 2) / 2, a.cost))
    }
}

/// `projected[t][i]` is detection `i` of frame `t` projected into frame
/// `t+1`; frames without projections link by raw position.
pub fn build_flow_graph(
    detections: &[Vec<DetectedPoint>],
    projected: &[Vec<Point2>],
    cfg: &TrackerConfig,
) -> Result<FlowGraph> {
    cfg.validate()?;
    let mut refs = Vec::new();
    let mut points = Vec::new();
    let mut first = Vec::with_capacity(detections.len());
    for (f, dets) in detections.iter().enumerate() {
        first.push(refs.len());
        for (i, d) in dets.iter().enumerate() {
            if !d.pos.is_finite() {
                return Err(Error::invalid("build_flow_graph", alloc::format!("non-finite detection {i} in frame {f}")));
            }
            refs.push(DetRef { frame: f, index: i });
            points.push(*d);
        }
    }
    let mut arcs = Vec::new();
    for (d, p) in points.iter().enumerate() {
        arcs.push(Arc { from: SOURCE, to: in_node(d), cost: cfg.entry_cost });
        arcs.push(Arc { from: in_node(d), to: out_node(d), cost: detection_cost(p.confidence) });
        arcs.push(Arc { from: out_node(d), to: SINK, cost: cfg.exit_cost });
    }
    for f in 1..detections.len() {
        for (i, a) in detections[f - 1].iter().enumerate() {
            let from = projected.get(f - 1).and_then(|p| p.get(i)).copied().unwrap_or(a.pos);
            for (j, b) in detections[f].iter().enumerate() {
                let dist = from.dist(b.pos);
                if dist <= cfg.gate {
                    arcs.push(Arc {
                        from: out_node(first[f - 1] + i),
                        to: in_node(first[f] + j),
                        cost: cfg.link_lambda * dist,
                    });
                }
            }
        }
    }
    Ok(FlowGraph { detections: refs, points, arcs })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub frame: usize,
    pub pos: Point2,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u32,
    pub points: Vec<TrackPoint>,
}

impl Tracklet {
    pub fn mean_confidence(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p.confidence).sum::<f64>() / self.points.len() as f64
    }

    pub fn at(&self, frame: usize) -> Option<&TrackPoint> {
        let first = self.points.first()?.frame;
        self.points.get(frame.checked_sub(first)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.windows(2).any(|w| w[1].frame != w[0].frame + 1) {
            return Err(Error::invalid("Tracklet", alloc::format!("tracklet {} is not frame-contiguous", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackSet {
    pub tracklets: Vec<Tracklet>,
}

impl TrackSet {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.tracklets.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("TrackSet", "duplicate tracklet id"));
        }
        self.tracklets.iter().try_for_each(Tracklet::validate)
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }
}

/// Node-disjoint paths as detection index lists plus their total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    pub paths: Vec<Vec<usize>>,
    pub cost: f64,
}

#[derive(Clone, Copy)]
struct Edge {
    to: usize,
    cost: f64,
    cap: u8,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then on node index
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-cost set of node-disjoint source-sink paths.
pub fn solve_min_cost_flow(graph: &FlowGraph) -> FlowSolution {
    let n = graph.num_nodes();
    let mut edges: Vec<Edge> = Vec::with_capacity(2 * graph.arcs.len());
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for a in &graph.arcs {
        adj[a.from].push(edges.len());
        edges.push(Edge { to: a.to, cost: a.cost, cap: 1 });
        adj[a.to].push(edges.len());
        edges.push(Edge { to: a.from, cost: -a.cost, cap: 0 });
    }
    // initial potentials: shortest distances on the DAG; node order
    // source, detection pairs by frame, then sink is topological
    let mut order: Vec<usize> = vec![SOURCE];
    order.extend(2..n);
    order.push(SINK);
    let mut pot = vec![f64::INFINITY; n];
    pot[SOURCE] = 0.0;
    for &u in &order {
        if pot[u].is_finite() {
            for &e in &adj[u] {
                let ed = edges[e];
                if ed.cap > 0 && pot[u] + ed.cost < pot[ed.to] {
                    pot[ed.to] = pot[u] + ed.cost;
                }
            }
        }
    }
    let mut total = 0.0;
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    loop {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        dist[SOURCE] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Entry(0.0, SOURCE));
        while let Some(Entry(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &e in &adj[u] {
                let ed = edges[e];
                if ed.cap == 0 || !pot[ed.to].is_finite() {
                    continue;
                }
                // reduced costs are non-negative up to rounding
                let rc = (ed.cost + pot[u] - pot[ed.to]).max(0.0);
                let nd = d + rc;
                if nd < dist[ed.to] {
                    dist[ed.to] = nd;
                    prev[ed.to] = e;
                    heap.push(Entry(nd, ed.to));
                }
            }
        }
        if !dist[SINK].is_finite() {
            break;
        }
        // true path cost from the arcs themselves
        let mut path_cost = 0.0;
        let mut v = SINK;
        while v != SOURCE {
            let e = prev[v];
            path_cost += edges[e].cost;
            v = edges[e ^ 1].to;
        }
        if path_cost >= 0.0 {
            break;
        }
        total += path_cost;
        let mut v = SINK;
        while v != SOURCE {
            let e = prev[v];
            edges[e].cap -= 1;
            edges[e ^ 1].cap += 1;
            v = edges[e ^ 1].to;
        }
        for u in 0..n {
            if dist[u].is_finite() {
                pot[u] += dist[u];
            }
        }
    }
    // decompose: saturated forward arcs carry the flow
    let mut next = vec![usize::MAX; n];
    let mut starts = Vec::new();
    for (i, a) in graph.arcs.iter().enumerate() {
        if edges[2 * i].cap == 0 {
            if a.from == SOURCE {
                starts.push(a.to);
            } else {
                next[a.from] = a.to;
            }
        }
    }
    starts.sort_unstable();
    let paths = starts
        .into_iter()
        .map(|start| {
            let mut path = Vec::new();
            let mut v = start;
            while v != SINK {
                let d = (v - 2) / 2;
                path.push(d);
                v = next[out_node(d)];
            }
            path
        })
        .collect();
    FlowSolution { paths, cost: total }
}

/// Total cost of a set of paths; `None` if they are not node-disjoint or use
/// a missing arc.
pub fn paths_cost(graph: &FlowGraph, paths: &[Vec<usize>]) -> Option<f64> {
    let arc_cost = |from: usize, to: usize| graph.arcs.iter().find(|a| a.from == from && a.to == to).map(|a| a.cost);
    let mut used = vec![false; graph.detections.len()];
    let mut total = 0.0;
    for p in paths {
        let first = *p.first()?;
        total += arc_cost(SOURCE, in_node(first))?;
        for (k, &d) in p.iter().enumerate() {
            if core::mem::replace(&mut used[d], true) {
                return None;
            }
            total += arc_cost(in_node(d), out_node(d))?;
            if let Some(&e) = p.get(k + 1) {
                total += arc_cost(out_node(d), in_node(e))?;
            }
        }
        total += arc_cost(out_node(*p.last()?), SINK)?;
    }
    Some(total)
}

fn to_trackset(graph: &FlowGraph, sol: &FlowSolution) -> TrackSet {
    let tracklets = sol
        .paths
        .iter()
        .enumerate()
        .map(|(k, p)| Tracklet {
            id: k as u32 + 1,
            points: p
                .iter()
                .map(|&d| TrackPoint {
                    frame: graph.detections[d].frame,
                    pos: graph.points[d].pos,
                    confidence: graph.points[d].confidence,
                })
                .collect(),
        })
        .collect();
    TrackSet { tracklets }
}

/// Builds the graph and solves it; tracklet ids follow path order.
pub fn track(detections: &[Vec<DetectedPoint>], projected: &[Vec<Point2>], cfg: &TrackerConfig) -> Result<TrackSet> {
    let graph = build_flow_graph(detections, projected, cfg)?;
    Ok(to_trackset(&graph, &solve_min_cost_flow(&graph)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkVariant {
    /// Transition cost measured from the offset-projected point `p'`.
    WithOffsets,
    /// Transition cost measured from the raw position (zero motion).
    WithoutOffsets,
}

pub fn link_from_variant(
    detections: &[Vec<DetectedPoint>],
    projected: Option<&[Vec<Point2>]>,
    variant: LinkVariant,
    cfg: &TrackerConfig,
) -> Result<TrackSet> {
    match (variant, projected) {
        (LinkVariant::WithOffsets, Some(p)) => track(detections, p, cfg),
        (LinkVariant::WithOffsets, None) => Err(Error::invalid("link_from_variant", "offsets required")),
        (LinkVariant::WithoutOffsets, _) => track(detections, &[], cfg),
    }
}

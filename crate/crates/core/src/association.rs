//! Motion offsets for proposal points and the neighboring context loss.
//!
//! Offsets follow the projection convention `p' = p - o`: a forward offset
//! maps a point of frame `t-1` onto frame `t` by subtraction, a backward
//! offset maps a frame-`t` point back onto frame `t-1`.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::Point2;
use crate::network::params::{Init, ParamSpec};
use crate::tensor::{Bindings, Graph, Tensor, Var};
use crate::{Error, Result};

/// Number of stacked point-neighborhood layers.
pub const LAYERS: usize = 3;
/// Relative positions enter the layers divided by this many px.
pub const POSITION_SCALE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationConfig {
    /// Neighbors aggregated by each layer.
    pub beta: usize,
    /// Radius of the relation-term neighborhoods, px.
    pub neighborhood_radius: f64,
    /// Proposal-to-ground-truth matching radius, px.
    pub match_radius: f64,
    pub hidden: usize,
    pub use_relation: bool,
    pub use_cycle: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            beta: 8,
            neighborhood_radius: 50.0,
            match_radius: 10.0,
            hidden: 16,
            use_relation: true,
            use_cycle: true,
        }
    }
}

/// Neighbor index lists, one per point, never containing the point itself.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NeighborGraph {
    pub lists: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn edges(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    /// `(center, neighbor)` pairs in list order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lists.iter().enumerate().flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
    }
}

fn by_distance(points: &[Point2], i: usize) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &q)| (points[i].dist_sq(q), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d
}

/// The `beta` nearest other points of every point, nearest first; ties go to
/// the lower index. With fewer than `beta + 1` points all others are used.
pub fn knn_neighbors(points: &[Point2], beta: usize) -> Result<NeighborGraph> {
    if beta == 0 {
        return Err(Error::invalid("knn_neighbors", "beta must be at least 1"));
    }
    let lists = (0..points.len())
        .map(|i| by_distance(points, i).into_iter().take(beta).map(|(_, j)| j).collect())
        .collect();
    Ok(NeighborGraph { lists })
}

/// All other points within `radius` (inclusive), nearest first.
pub fn radius_neighbors(points: &[Point2], radius: f64) -> Result<NeighborGraph> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius_neighbors", "radius must be positive"));
    }
    let r2 = radius * radius;
    let lists = (0..points.len())
        .map(|i| {
            by_distance(points, i)
                .into_iter()
                .take_while(|&(d, _)| d <= r2)
                .map(|(_, j)| j)
                .collect()
        })
        .collect();
    Ok(NeighborGraph { lists })
}

/// `(p_j - o_j) - (p_i - o_i)`.
pub fn relation_vector(p_i: Point2, o_i: Point2, p_j: Point2, o_j: Point2) -> Point2 {
    (p_j - o_j) - (p_i - o_i)
}

// ---- point-neighborhood network ---------------------------------------------

pub fn param_specs(in_dim: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut width = in_dim;
    for l in 0..LAYERS {
        specs.extend(ParamSpec::dense(&alloc::format!("ass.pc{l}.edge"), hidden, width + 2));
        specs.extend(ParamSpec::dense(&alloc::format!("ass.pc{l}.node"), hidden, width + hidden));
        width = hidden;
    }
    specs.push(ParamSpec::new("ass.out.w", &[4, hidden], Init::Zeros));
    specs.push(ParamSpec::new("ass.out.b", &[4], Init::Zeros));
    specs
}

/// One layer: for every point, an edge MLP over (relative position, neighbor
/// feature) summed across its neighbors, then a pointwise MLP over
/// (own feature, aggregate). `feats` is `[N, D]`; the result is `[N, hidden]`.
pub fn point_neighborhood_layer(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    points: &[Point2],
    feats: Var,
    graph: &NeighborGraph,
) -> Result<Var> {
    let n = points.len();
    if g.shape(feats).len() != 2 || g.shape(feats)[0] != n || graph.len() != n {
        return Err(Error::shape("point_neighborhood_layer", g.shape(feats), &[n, graph.len()]));
    }
    let ew = b.get(&alloc::format!("{prefix}.edge.w"))?;
    let eb = b.get(&alloc::format!("{prefix}.edge.b"))?;
    let nw = b.get(&alloc::format!("{prefix}.node.w"))?;
    let nb = b.get(&alloc::format!("{prefix}.node.b"))?;
    let hidden = g.shape(ew)[0];
    let (centers, nbrs): (Vec<usize>, Vec<usize>) = graph.pairs().unzip();
    let rel: Vec<f64> = graph
        .pairs()
        .flat_map(|(i, j)| {
            let d = points[j] - points[i];
            [d.x / POSITION_SCALE, d.y / POSITION_SCALE]
        })
        .collect();
    let rel = g.constant(Tensor::new(vec![centers.len(), 2], rel)?);
    let nf = g.gather_rows(feats, &nbrs)?;
    let edge_in = g.concat_cols(&[rel, nf])?;
    let e = g.linear(edge_in, ew, eb)?;
    let e = g.relu(e);
    let agg = g.segment_sum(e, &centers, n)?;
    debug_assert_eq!(g.shape(agg), &[n, hidden]);
    let node_in = g.concat_cols(&[feats, agg])?;
    let h = g.linear(node_in, nw, nb)?;
    Ok(g.relu(h))
}

/// Stacked layers plus the output layer: `[N, 4]` holding
/// `(ox_fwd, oy_fwd, ox_bwd, oy_bwd)` per point.
pub fn predict_offsets(
    g: &mut Graph,
    b: &Bindings,
    points: &[Point2],
    feats: Var,
    beta: usize,
) -> Result<Var> {
    let graph = knn_neighbors(points, beta)?;
    let mut h = feats;
    for l in 0..LAYERS {
        h = point_neighborhood_layer(g, b, &alloc::format!("ass.pc{l}"), points, h, &graph)?;
    }
    let w = b.get("ass.out.w")?;
    let bias = b.get("ass.out.b")?;
    g.linear(h, w, bias)
}

/// Pixel whose center is nearest to `p`, clamped into an `h x w` map.
pub fn nearest_pixel(p: Point2, h: usize, w: usize) -> (usize, usize) {
    let clamp = |v: f64, n: usize| libm::round(v).clamp(0.0, (n - 1) as f64) as usize;
    (clamp(p.y, h), clamp(p.x, w))
}

/// Feature rows `[N, C]` of a `[C, H, W]` map at the given points.
pub fn sample_point_features(g: &mut Graph, map: Var, points: &[Point2]) -> Result<Var> {
    let (h, w) = match *g.shape(map) {
        [_, h, w] if h > 0 && w > 0 => (h, w),
        ref s => return Err(Error::invalid("sample_point_features", alloc::format!("bad map shape {s:?}"))),
    };
    let px: Vec<(usize, usize)> = points.iter().map(|&p| nearest_pixel(p, h, w)).collect();
    g.sample_pixels(map, &px)
}

// ---- neighboring context loss -----------------------------------------------

/// Greedy one-to-one matching of proposals to ground-truth points: pairs are
/// taken in ascending distance (ties by proposal then GT index) while both
/// ends are free and the distance is within `radius`.
pub fn match_to_gt(proposals: &[Point2], gt: &[Point2], radius: f64) -> Vec<Option<usize>> {
    let r2 = radius * radius;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        for (k, q) in gt.iter().enumerate() {
            let d = p.dist_sq(*q);
            if d <= r2 {
                pairs.push((d, i, k));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; proposals.len()];
    let mut taken = vec![false; gt.len()];
    for (_, i, k) in pairs {
        if out[i].is_none() && !taken[k] {
            out[i] = Some(k);
            taken[k] = true;
        }
    }
    out
}

/// One temporal direction of the loss.
#[derive(Debug, Clone)]
pub struct DirectionInput {
    /// Proposal positions in the source frame.
    pub proposals: Vec<Point2>,
    /// `[N, 2]` offsets of those proposals for this direction.
    pub offsets: Var,
    /// Ground-truth position in the target frame of the identity each
    /// proposal was matched to; `None` excludes the proposal.
    pub targets: Vec<Option<Point2>>,
}

impl DirectionInput {
    /// Matches `proposals` against the source-frame annotations and looks the
    /// identities up in the target frame.
    pub fn from_annotations(
        proposals: Vec<Point2>,
        offsets: Var,
        source: &[(u32, Point2)],
        target: &[(u32, Point2)],
        match_radius: f64,
    ) -> Self {
        let src: Vec<Point2> = source.iter().map(|a| a.1).collect();
        let targets = match_to_gt(&proposals, &src, match_radius)
            .into_iter()
            .map(|m| m.and_then(|k| target.iter().find(|t| t.0 == source[k].0).map(|t| t.1)))
            .collect();
        Self {
            proposals,
            offsets,
            targets,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ContextLoss {
    pub loss: Var,
    /// Proposals that entered the sum, per direction.
    pub used: [usize; 2],
    /// Proposals excluded for lack of a ground-truth correspondence.
    pub excluded: [usize; 2],
}

struct DirectionSums {
    sum: Option<Var>,
    used: usize,
    excluded: usize,
}

fn direction_terms(
    g: &mut Graph,
    d: &DirectionInput,
    radius: f64,
    use_relation: bool,
) -> Result<DirectionSums> {
    let n = d.proposals.len();
    if d.targets.len() != n || g.shape(d.offsets) != [n, 2] {
        return Err(Error::shape("neighboring_context_loss", g.shape(d.offsets), &[n, 2]));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| d.targets[i].is_some()).collect();
    let excluded = n - rows.len();
    if rows.is_empty() {
        return Ok(DirectionSums { sum: None, used: 0, excluded });
    }
    let pts: Vec<Point2> = rows.iter().map(|&i| d.proposals[i]).collect();
    // residual r_i = (p_i - o_i) - p*_i
    let shift: Vec<f64> = rows
        .iter()
        .flat_map(|&i| {
            let t = d.targets[i].unwrap_or_default();
            [d.proposals[i].x - t.x, d.proposals[i].y - t.y]
        })
        .collect();
    let shift = g.constant(Tensor::new(vec![rows.len(), 2], shift)?);
    let o = g.gather_rows(d.offsets, &rows)?;
    let resid = g.sub(shift, o)?;
    let a = g.abs(resid);
    let mut parts = vec![g.sum(a)];
    if use_relation {
        // v(p'_i, p'_j) - v(p*_i, p*_j) = r_j - r_i
        let graph = radius_neighbors(&pts, radius)?;
        if graph.edges() > 0 {
            let (ci, nj): (Vec<usize>, Vec<usize>) = graph.pairs().unzip();
            let rj = g.gather_rows(resid, &nj)?;
            let ri = g.gather_rows(resid, &ci)?;
            let diff = g.sub(rj, ri)?;
            let a = g.abs(diff);
            parts.push(g.sum(a));
        }
    }
    Ok(DirectionSums {
        sum: Some(g.add_all(&parts)?),
        used: rows.len(),
        excluded,
    })
}

/// `1/(2M) * sum_i [ |p'_i - p*_i|_1 + sum_{j in N(i)} |v(p'_i, p'_j) - v(p*_i, p*_j)|_1 ]`
/// over the forward direction and, with `use_cycle`, the backward one. `M` is
/// the mean number of matched proposals over the directions used. With no
/// matched proposal at all the loss is a constant zero.
pub fn neighboring_context_loss(
    g: &mut Graph,
    forward: &DirectionInput,
    backward: &DirectionInput,
    cfg: &AssociationConfig,
) -> Result<ContextLoss> {
    let fwd = direction_terms(g, forward, cfg.neighborhood_radius, cfg.use_relation)?;
    let bwd = if cfg.use_cycle {
        Some(direction_terms(g, backward, cfg.neighborhood_radius, cfg.use_relation)?)
    } else {
        None
    };
    let mut sums: Vec<Var> = fwd.sum.into_iter().collect();
    let mut m = fwd.used as f64;
    if let Some(b) = &bwd {
        sums.extend(b.sum);
        m = (m + b.used as f64) / 2.0;
    }
    let loss = if sums.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let total = g.add_all(&sums)?;
        g.mul_scalar(total, 1.0 / (2.0 * m))
    };
    let b = bwd.as_ref();
    Ok(ContextLoss {
        loss,
        used: [fwd.used, b.map_or(0, |b| b.used)],
        excluded: [fwd.excluded, b.map_or(0, |b| b.excluded)],
    })
}

/// Orders points by descending confidence, then position; used to pick the
/// top-`M` proposals deterministically.
pub fn top_m_order(conf: &[f64], pos: &[Point2], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..conf.len()).collect();
    idx.sort_by(|&a, &b| {
        conf[b]
            .total_cmp(&conf[a])
            .then(pos[a].x.total_cmp(&pos[b].x))
            .then(pos[a].y.total_cmp(&pos[b].y))
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::initialize;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point2> {
        (0..n).map(|_| pt(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent))).collect()
    }

    #[test]
    fn knn_examples() {
        let p = [pt(0.0, 0.0), pt(10.0, 0.0), pt(20.0, 0.0)];
        let g = knn_neighbors(&p, 1).unwrap();
        assert_eq!(g.lists, vec![vec![1], vec![0], vec![1]]);
        let g = knn_neighbors(&p, 5).unwrap();
        assert_eq!(g.lists[0], vec![1, 2]);
        assert!(knn_neighbors(&p, 0).is_err());
        let g = radius_neighbors(&[pt(0.0, 0.0), pt(60.0, 0.0)], 50.0).unwrap();
        assert!(g.lists.iter().all(Vec::is_empty));
    }

    #[test]
    fn knn_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let p = random_points(&mut rng, 20, 100.0);
            let g = knn_neighbors(&p, 8).unwrap();
            for i in 0..20 {
                let mut all: Vec<usize> = (0..20).filter(|&j| j != i).collect();
                all.sort_by(|&a, &b| p[i].dist(p[a]).partial_cmp(&p[i].dist(p[b])).unwrap().then(a.cmp(&b)));
                assert_eq!(g.lists[i], all[..8]);
            }
            let r = radius_neighbors(&p, 30.0).unwrap();
            for (i, l) in r.lists.iter().enumerate() {
                assert!(!l.contains(&i));
                for &j in l {
                    assert!(r.lists[j].contains(&i));
                }
            }
        }
    }

    #[test]
    fn relation_vector_examples() {
        let v = relation_vector(pt(0.0, 0.0), pt(0.0, 0.0), pt(5.0, 5.0), pt(1.0, 0.0));
        assert_eq!(v, pt(4.0, 5.0));
        let o = pt(2.5, -1.0);
        assert_eq!(relation_vector(pt(1.0, 2.0), o, pt(4.0, 8.0), o), pt(3.0, 6.0));
        let (a, oa, b, ob) = (pt(1.0, 2.0), pt(0.3, 0.1), pt(-4.0, 7.0), pt(1.0, -2.0));
        assert_eq!(relation_vector(a, oa, b, ob), -relation_vector(b, ob, a, oa));
    }

    fn offsets(g: &mut Graph, o: &[f64], param: bool) -> Var {
        let t = Tensor::new(vec![o.len() / 2, 2], o.to_vec()).unwrap();
        if param {
            g.param(t)
        } else {
            g.constant(t)
        }
    }

    fn empty(g: &mut Graph) -> DirectionInput {
        DirectionInput { proposals: vec![], offsets: offsets(g, &[], false), targets: vec![] }
    }

    #[test]
    fn single_point_forward_only() {
        let mut g = Graph::new();
        // p' = (3,4) - (1,1) = (2,3), target (1,2): off by (1,1)
        let fwd = DirectionInput {
            proposals: vec![pt(3.0, 4.0)],
            offsets: offsets(&mut g, &[1.0, 1.0], false),
            targets: vec![Some(pt(1.0, 2.0))],
        };
        let bwd = empty(&mut g);
        let cfg = AssociationConfig { use_cycle: false, ..Default::default() };
        let out = neighboring_context_loss(&mut g, &fwd, &bwd, &cfg).unwrap();
        assert!((g.value(out.loss).item() - 1.0).abs() < 1e-9);
        assert_eq!(out.used, [1, 0]);
    }

    #[test]
    fn exact_offsets_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = random_points(&mut rng, 6, 60.0);
        let v = pt(1.5, -0.5);
        let mut g = Graph::new();
        let o: Vec<f64> = (0..6).flat_map(|_| [-v.x, -v.y]).collect();
        let back: Vec<f64> = (0..6).flat_map(|_| [v.x, v.y]).collect();
        let fwd = DirectionInput {
            proposals: p.clone(),
            offsets: offsets(&mut g, &o, false),
            targets: p.iter().map(|&q| Some(q + v)).collect(),
        };
        let bwd = DirectionInput {
            proposals: p.iter().map(|&q| q + v).collect(),
            offsets: offsets(&mut g, &back, false),
            targets: p.iter().map(|&q| Some(q)).collect(),
        };
        let out = neighboring_context_loss(&mut g, &fwd, &bwd, &AssociationConfig::default()).unwrap();
        assert!(g.value(out.loss).item().abs() < 1e-12);
    }

    /// Direct evaluation of the loss formula from point arithmetic.
    fn loss_oracle(dirs: &[(&[Point2], &[Point2], &[Option<Point2>])], radius: f64, rel: bool) -> f64 {
        let mut total = 0.0;
        let mut m = 0.0;
        for (p, o, t) in dirs {
            let rows: Vec<usize> = (0..p.len()).filter(|&i| t[i].is_some()).collect();
            m += rows.len() as f64;
            for &i in &rows {
                let pi = p[i] - o[i];
                total += (pi - t[i].unwrap()).l1();
                if rel {
                    for &j in &rows {
                        if j != i && p[i].dist(p[j]) <= radius {
                            let pj = p[j] - o[j];
                            let pred = relation_vector(pi, Point2::default(), pj, Point2::default());
                            let gt = relation_vector(t[i].unwrap(), Point2::default(), t[j].unwrap(), Point2::default());
                            total += (pred - gt).l1();
                        }
                    }
                }
            }
        }
        m /= dirs.len() as f64;
        if m == 0.0 {
            0.0
        } else {
            total / (2.0 * m)
        }
    }

    fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Point2>, Vec<Point2>, Vec<Option<Point2>>) {
        let p = random_points(rng, n, 80.0);
        let o = (0..n).map(|_| pt(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))).collect();
        let t = p
            .iter()
            .map(|&q| rng.gen_bool(0.8).then(|| q + pt(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))))
            .collect();
        (p, o, t)
    }

    fn flat(o: &[Point2]) -> Vec<f64> {
        o.iter().flat_map(|q| [q.x, q.y]).collect()
    }

    #[test]
    fn matches_formula_oracle_and_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let a = random_direction(&mut rng, 7);
            let b = random_direction(&mut rng, 5);
            for (rel, cyc) in [(true, true), (true, false), (false, true), (false, false)] {
                let mut g = Graph::new();
                let fwd = DirectionInput { proposals: a.0.clone(), offsets: offsets(&mut g, &flat(&a.1), false), targets: a.2.clone() };
                let bwd = DirectionInput { proposals: b.0.clone(), offsets: offsets(&mut g, &flat(&b.1), false), targets: b.2.clone() };
                let cfg = AssociationConfig { use_relation: rel, use_cycle: cyc, ..Default::default() };
                let out = neighboring_context_loss(&mut g, &fwd, &bwd, &cfg).unwrap();
                let mut dirs = vec![(&a.0[..], &a.1[..], &a.2[..])];
                if cyc {
                    dirs.push((&b.0[..], &b.1[..], &b.2[..]));
                }
                let want = loss_oracle(&dirs, 50.0, rel);
                assert!((g.value(out.loss).item() - want).abs() < 1e-9);
                assert!(g.value(out.loss).item() >= 0.0);
            }
        }
    }

    #[test]
    fn relation_term_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = random_direction(&mut rng, 6);
        let shift = pt(13.0, -7.0);
        let eval = |p: &[Point2], t: &[Option<Point2>]| {
            let mut g = Graph::new();
            let d = DirectionInput { proposals: p.to_vec(), offsets: offsets(&mut g, &flat(&a.1), false), targets: t.to_vec() };
            let e = empty(&mut g);
            let cfg = AssociationConfig { use_cycle: false, ..Default::default() };
            let with = neighboring_context_loss(&mut g, &d, &e, &cfg).unwrap().loss;
            let cfg = AssociationConfig { use_relation: false, ..cfg };
            let without = neighboring_context_loss(&mut g, &d, &e, &cfg).unwrap().loss;
            g.value(with).item() - g.value(without).item()
        };
        let moved_p: Vec<Point2> = a.0.iter().map(|&q| q + shift).collect();
        let moved_t: Vec<Option<Point2>> = a.2.iter().map(|t| t.map(|q| q + shift)).collect();
        assert!((eval(&a.0, &a.2) - eval(&moved_p, &moved_t)).abs() < 1e-9);
    }

    #[test]
    fn unmatched_proposals_are_excluded() {
        let mut g = Graph::new();
        let fwd = DirectionInput {
            proposals: vec![pt(0.0, 0.0), pt(5.0, 5.0)],
            offsets: offsets(&mut g, &[0.0, 0.0, 9.0, 9.0], false),
            targets: vec![Some(pt(1.0, 0.0)), None],
        };
        let bwd = empty(&mut g);
        let out = neighboring_context_loss(&mut g, &fwd, &bwd, &AssociationConfig::default()).unwrap();
        assert_eq!(out.used, [1, 0]);
        assert_eq!(out.excluded, [1, 0]);
        // cycle on but backward empty: M = 1/2
        assert!((g.value(out.loss).item() - 1.0).abs() < 1e-12);

        let (mut g, e) = { let mut g = Graph::new(); let e = empty(&mut g); (g, e) };
        let out = neighboring_context_loss(&mut g, &e, &e.clone(), &AssociationConfig::default()).unwrap();
        assert_eq!(g.value(out.loss).item(), 0.0);
    }

    #[test]
    fn loss_gradient_wrt_offsets() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let a = random_direction(&mut rng, 5);
            let b = random_direction(&mut rng, 4);
            let inputs = [
                Tensor::new(vec![5, 2], flat(&a.1)).unwrap(),
                Tensor::new(vec![4, 2], flat(&b.1)).unwrap(),
            ];
            let report = gradcheck::check(
                &inputs,
                |g, v| {
                    let fwd = DirectionInput { proposals: a.0.clone(), offsets: v[0], targets: a.2.clone() };
                    let bwd = DirectionInput { proposals: b.0.clone(), offsets: v[1], targets: b.2.clone() };
                    Ok(neighboring_context_loss(g, &fwd, &bwd, &AssociationConfig::default())?.loss)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn greedy_gt_matching() {
        let props = [pt(0.0, 0.0), pt(1.0, 0.0), pt(30.0, 0.0)];
        let gt = [pt(0.8, 0.0), pt(-2.0, 0.0)];
        assert_eq!(match_to_gt(&props, &gt, 10.0), vec![Some(1), Some(0), None]);
        let src = [(7, pt(0.8, 0.0)), (3, pt(-2.0, 0.0))];
        let tgt = [(3, pt(-1.0, 1.0))];
        let mut g = Graph::new();
        let o = offsets(&mut g, &[0.0; 6], false);
        let d = DirectionInput::from_annotations(props.to_vec(), o, &src, &tgt, 10.0);
        assert_eq!(d.targets, vec![Some(pt(-1.0, 1.0)), None, None]);
    }

    fn bound(in_dim: usize, hidden: usize, seed: u64, zero_bias: bool) -> (Graph, Bindings) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = initialize(&param_specs(in_dim, hidden), &mut rng);
        for (name, t) in store.iter_mut() {
            if name == "ass.out.w" {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
            if !zero_bias && name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        let mut g = Graph::new();
        let b = Bindings::bind(&mut g, &store, &|_| false);
        (g, b)
    }

    #[test]
    fn zero_features_and_biases_give_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let p = random_points(&mut rng, 10, 50.0);
        let (mut g, b) = bound(3, 6, 1, true);
        let f = g.constant(Tensor::zeros(&[10, 3]));
        let o = predict_offsets(&mut g, &b, &p, f, 8).unwrap();
        assert_eq!(g.shape(o), &[10, 4]);
        // relative positions still enter, but with zero biases a single
        // isolated point has nothing to aggregate
        let (mut g, b) = bound(3, 6, 1, true);
        let f = g.constant(Tensor::zeros(&[1, 3]));
        let o = predict_offsets(&mut g, &b, &p[..1], f, 8).unwrap();
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        // zero-initialized output layer gives zero offsets for any input
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let store = initialize(&param_specs(3, 6), &mut rng2);
        let mut g = Graph::new();
        let b = Bindings::bind(&mut g, &store, &|_| false);
        let f = g.constant(Tensor::new(vec![10, 3], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let o = predict_offsets(&mut g, &b, &p, f, 8).unwrap();
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let p = random_points(&mut rng, 9, 40.0);
        let feats = Tensor::new(vec![9, 3], (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (mut g, b) = bound(3, 5, 3, false);
        let f = g.constant(feats);
        let graph = knn_neighbors(&p, 4).unwrap();
        let mut rev = graph.clone();
        rev.lists.iter_mut().for_each(|l| l.reverse());
        let a = point_neighborhood_layer(&mut g, &b, "ass.pc0", &p, f, &graph).unwrap();
        let c = point_neighborhood_layer(&mut g, &b, "ass.pc0", &p, f, &rev).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(c).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_gradient_wrt_features() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let p = random_points(&mut rng, 6, 40.0);
            let mut store = initialize(&param_specs(3, 4), &mut rng);
            for t in store.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
            let feats = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let report = gradcheck::check(
                &[feats],
                |g, v| {
                    let b = Bindings::bind(g, &store, &|_| true);
                    let o = predict_offsets(g, &b, &p, v[0], 3)?;
                    let w = g.constant(Tensor::new(vec![6, 4], (0..24).map(|i| libm::sin(i as f64)).collect())?);
                    let y = g.mul(o, w)?;
                    Ok(g.sum(y))
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn top_m_is_deterministic() {
        let conf = [0.5, 0.9, 0.5, 0.1];
        let pos = [pt(3.0, 0.0), pt(0.0, 0.0), pt(1.0, 0.0), pt(0.0, 0.0)];
        assert_eq!(top_m_order(&conf, &pos, 3), vec![1, 2, 0]);
    }
}

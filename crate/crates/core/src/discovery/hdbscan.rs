//! HDBSCAN over dense vectors.
//!
//! Stages: core distances (k-th nearest neighbor, self excluded), an exact
//! O(n^2) Prim MST of the mutual-reachability graph, a single-linkage
//! dendrogram built with union-find, the condensed tree, and flat clusters
//! chosen by excess-of-mass stability.
//!
//! Merges at exactly equal distance are treated as one simultaneous
//! multi-way split when condensing, so the result does not depend on how
//! tied MST edges happen to be ordered.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{check_points, DiscoveryError, UnionFind};
use crate::geom::{dot, squared_euclidean, GeomError, Metric};

#[derive(Debug, Clone, PartialEq)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Neighbor rank used for core distances; defaults to `min_cluster_size`.
    pub min_samples: Option<usize>,
    pub metric: Metric,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        Self { min_cluster_size: 10, min_samples: None, metric: Metric::Euclidean }
    }
}

impl HdbscanParams {
    pub fn k(&self) -> usize {
        self.min_samples.unwrap_or(self.min_cluster_size)
    }

    pub fn validate(&self) -> Result<(), DiscoveryError> {
        if self.min_cluster_size < 2 {
            return Err(DiscoveryError::InvalidParams(format!(
                "min_cluster_size must be at least 2, got {}",
                self.min_cluster_size
            )));
        }
        if self.k() == 0 {
            return Err(DiscoveryError::InvalidParams("min_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Edge of the condensed tree. `child < n_points` is a point leaving
/// `parent` at `lambda`; otherwise a cluster born at `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub child_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    /// `n_points + index`; the root is `n_points`.
    pub id: usize,
    pub parent: Option<usize>,
    pub birth_lambda: f64,
    pub stability: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CondensedTree {
    pub n_points: usize,
    pub edges: Vec<CondensedEdge>,
    pub clusters: Vec<ClusterNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdbscanResult {
    /// Cluster per point, numbered by smallest member index; `None` is NOISE.
    pub labels: Vec<Option<usize>>,
    pub tree: CondensedTree,
    pub core_distances: Vec<f64>,
    pub mst: Vec<MstEdge>,
    pub warning: Option<String>,
}

impl HdbscanResult {
    pub fn n_clusters(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }
}

/// Row-major copy of the points, prepared for one metric.
struct Space {
    dim: usize,
    data: Vec<f64>,
    metric: Metric,
}

impl Space {
    fn new(points: &[Vec<f64>], metric: Metric) -> Result<Self, DiscoveryError> {
        let dim = check_points(points)?;
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            match metric {
                Metric::Euclidean => data.extend_from_slice(p),
                Metric::Cosine => {
                    let norm = dot(p, p).sqrt();
                    if norm == 0.0 {
                        return Err(GeomError::ZeroNorm.into());
                    }
                    data.extend(p.iter().map(|v| v / norm));
                }
            }
        }
        Ok(Self { dim, data, metric })
    }

    fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    fn dist(&self, i: usize, j: usize) -> f64 {
        match self.metric {
            Metric::Euclidean => squared_euclidean(self.row(i), self.row(j)).sqrt(),
            Metric::Cosine => (1.0 - dot(self.row(i), self.row(j))).max(0.0),
        }
    }
}

/// Keeps the `k` smallest values seen, ascending.
struct SmallestK {
    k: usize,
    values: Vec<f64>,
}

impl SmallestK {
    fn push(&mut self, v: f64) {
        if self.values.len() == self.k {
            if v >= self.values[self.k - 1] {
                return;
            }
            self.values.pop();
        }
        let at = self.values.partition_point(|&x| x <= v);
        self.values.insert(at, v);
    }
}

const BLOCK: usize = 64;

fn core_distances_in(space: &Space, k: usize) -> Vec<f64> {
    let n = space.len();
    let mut heaps: Vec<SmallestK> = (0..n).map(|_| SmallestK { k, values: Vec::with_capacity(k + 1) }).collect();
    // each pair once, in cache-sized tiles
    for ib in (0..n).step_by(BLOCK) {
        for jb in (ib..n).step_by(BLOCK) {
            for i in ib..(ib + BLOCK).min(n) {
                let start = if jb == ib { i + 1 } else { jb };
                for j in start..(jb + BLOCK).min(n) {
                    let d = space.dist(i, j);
                    heaps[i].push(d);
                    heaps[j].push(d);
                }
            }
        }
    }
    heaps.into_iter().map(|h| h.values[k - 1]).collect()
}

/// Distance from each point to its k-th nearest neighbor, itself excluded.
pub fn core_distances(points: &[Vec<f64>], k: usize, metric: Metric) -> Result<Vec<f64>, DiscoveryError> {
    if k == 0 {
        return Err(DiscoveryError::ZeroK);
    }
    if k >= points.len() {
        return Err(DiscoveryError::TooFewPoints { k, n: points.len().saturating_sub(1) });
    }
    let space = Space::new(points, metric)?;
    Ok(core_distances_in(&space, k))
}

pub fn mutual_reachability(i: usize, j: usize, core: &[f64], dist: f64) -> f64 {
    if i == j {
        return core[i];
    }
    core[i].max(core[j]).max(dist)
}

const PAR_CHUNK: usize = 4096;

/// Prim's algorithm on the complete mutual-reachability graph. Edges are
/// returned in insertion order; the lowest index wins ties.
fn prim(space: &Space, core: &[f64]) -> Vec<MstEdge> {
    let n = space.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;

    for _ in 1..n {
        let cur_core = core[current];
        let chunks = best
            .par_chunks_mut(PAR_CHUNK)
            .zip(from.par_chunks_mut(PAR_CHUNK))
            .zip(in_tree.par_chunks(PAR_CHUNK))
            .enumerate();
        let (next, weight) = chunks
            .map(|(c, ((best, from), in_tree))| {
                let base = c * PAR_CHUNK;
                let mut local = (usize::MAX, f64::INFINITY);
                for o in 0..best.len() {
                    if in_tree[o] {
                        continue;
                    }
                    let j = base + o;
                    let w = cur_core.max(core[j]).max(space.dist(current, j));
                    if w < best[o] {
                        best[o] = w;
                        from[o] = current;
                    }
                    if best[o] < local.1 {
                        local = (j, best[o]);
                    }
                }
                local
            })
            .reduce(|| (usize::MAX, f64::INFINITY), |a, b| if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a });
        // every remaining weight is finite, so a vertex was found
        debug_assert!(next != usize::MAX);
        in_tree[next] = true;
        edges.push(MstEdge { a: from[next].min(next), b: from[next].max(next), weight });
        current = next;
    }
    edges
}

/// Mutual-reachability MST of `points` given precomputed core distances.
pub fn minimum_spanning_tree(points: &[Vec<f64>], core: &[f64], metric: Metric) -> Result<Vec<MstEdge>, DiscoveryError> {
    let space = Space::new(points, metric)?;
    Ok(prim(&space, core))
}

#[derive(Debug, Clone, Copy)]
struct LinkNode {
    left: usize,
    right: usize,
    dist: f64,
    size: usize,
}

/// Single-linkage dendrogram: nodes `n..2n-1`, root last.
fn single_linkage(n: usize, mst: &[MstEdge]) -> Vec<LinkNode> {
    let mut sorted = mst.to_vec();
    sorted.sort_by(|x, y| x.weight.total_cmp(&y.weight).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    let mut uf = UnionFind::new(n);
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut nodes = Vec::with_capacity(n.saturating_sub(1));
    for e in sorted {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        let (left, right) = (node_of[ra], node_of[rb]);
        let size = uf.set_size(ra) + uf.set_size(rb);
        let root = uf.union(ra, rb).expect("MST edges join distinct components");
        node_of[root] = n + nodes.len();
        nodes.push(LinkNode { left, right, dist: e.weight, size });
    }
    nodes
}

fn lambda_of(dist: f64) -> f64 {
    if dist > 0.0 {
        1.0 / dist
    } else {
        f64::INFINITY
    }
}

struct Condenser<'a> {
    n: usize,
    nodes: &'a [LinkNode],
    min_cluster_size: usize,
    tree: CondensedTree,
}

impl Condenser<'_> {
    fn size(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.nodes[node - self.n].size
        }
    }

    fn dist(&self, node: usize) -> Option<f64> {
        (node >= self.n).then(|| self.nodes[node - self.n].dist)
    }

    /// Children of `node` after dissolving descendants merged at the same
    /// distance.
    fn effective_children(&self, node: usize) -> Vec<usize> {
        let d = self.nodes[node - self.n].dist;
        let mut out = Vec::new();
        let mut stack = vec![self.nodes[node - self.n].right, self.nodes[node - self.n].left];
        while let Some(c) = stack.pop() {
            if self.dist(c) == Some(d) {
                let ln = &self.nodes[c - self.n];
                stack.push(ln.right);
                stack.push(ln.left);
            } else {
                out.push(c);
            }
        }
        out
    }

    fn emit_points(&mut self, cluster: usize, node: usize, lambda: f64) {
        let mut stack = vec![node];
        while let Some(c) = stack.pop() {
            if c < self.n {
                self.tree.edges.push(CondensedEdge { parent: cluster, child: c, lambda, child_size: 1 });
            } else {
                let ln = &self.nodes[c - self.n];
                stack.push(ln.right);
                stack.push(ln.left);
            }
        }
    }

    fn new_cluster(&mut self, parent: Option<usize>, birth_lambda: f64) -> usize {
        let id = self.n + self.tree.clusters.len();
        self.tree.clusters.push(ClusterNode { id, parent, birth_lambda, stability: 0.0, selected: false });
        id
    }

    fn run(&mut self, root: usize) {
        let root_cluster = self.new_cluster(None, 0.0);
        let mut stack = vec![(root_cluster, root)];
        while let Some((cluster, mut node)) = stack.pop() {
            loop {
                if node < self.n {
                    let birth = self.tree.clusters[cluster - self.n].birth_lambda;
                    self.emit_points(cluster, node, birth);
                    break;
                }
                let lambda = lambda_of(self.nodes[node - self.n].dist);
                let children = self.effective_children(node);
                let (big, small): (Vec<usize>, Vec<usize>) =
                    children.iter().partition(|&&c| self.size(c) >= self.min_cluster_size);
                for c in small {
                    self.emit_points(cluster, c, lambda);
                }
                match big.len() {
                    0 => break,
                    1 => node = big[0],
                    _ => {
                        let mut spawned = Vec::with_capacity(big.len());
                        for c in big {
                            let id = self.new_cluster(Some(cluster), lambda);
                            let child_size = self.size(c);
                            self.tree.edges.push(CondensedEdge { parent: cluster, child: id, lambda, child_size });
                            spawned.push((id, c));
                        }
                        // pop in creation order
                        stack.extend(spawned.into_iter().rev());
                        break;
                    }
                }
            }
        }
    }
}

/// Excess-of-mass selection. The root is eligible only when it never
/// splits. Returns the flat label of every point.
fn select_clusters(tree: &mut CondensedTree) -> Vec<Option<usize>> {
    let n = tree.n_points;
    let nc = tree.clusters.len();
    for e in &tree.edges {
        let birth = tree.clusters[e.parent - n].birth_lambda;
        tree.clusters[e.parent - n].stability += (e.lambda - birth) * e.child_size as f64;
    }
    let mut kids: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for c in &tree.clusters {
        if let Some(p) = c.parent {
            kids[p - n].push(c.id - n);
        }
    }
    let mut subtree = vec![0.0; nc];
    let mut chosen = vec![false; nc];
    for c in (0..nc).rev() {
        let stability = tree.clusters[c].stability;
        if kids[c].is_empty() {
            chosen[c] = true;
            subtree[c] = stability;
            continue;
        }
        let sum: f64 = kids[c].iter().map(|&k| subtree[k]).sum();
        if c == 0 || sum > stability {
            subtree[c] = sum;
        } else {
            chosen[c] = true;
            subtree[c] = stability;
        }
    }
    // parents precede children in id order
    let mut owner: Vec<Option<usize>> = vec![None; nc];
    for c in 0..nc {
        let inherited = tree.clusters[c].parent.and_then(|p| owner[p - n]);
        owner[c] = inherited.or(chosen[c].then_some(c));
        tree.clusters[c].selected = chosen[c] && inherited.is_none();
    }

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let root_max = tree.edges.iter().filter(|e| e.parent == n && e.child < n).map(|e| e.lambda).fold(f64::NEG_INFINITY, f64::max);
    for e in tree.edges.iter().filter(|e| e.child < n) {
        let Some(sel) = owner[e.parent - n] else { continue };
        // a selected root keeps only the points that stay until its end
        if sel == 0 && e.lambda < root_max {
            continue;
        }
        labels[e.child] = Some(sel);
    }

    // canonical numbering: by smallest member point
    let mut rename: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels.iter().flatten() {
        let next = rename.len();
        rename.entry(*l).or_insert(next);
    }
    labels.iter().map(|l| l.map(|c| rename[&c])).collect()
}

pub fn hdbscan(points: &[Vec<f64>], params: &HdbscanParams) -> Result<HdbscanResult, DiscoveryError> {
    params.validate()?;
    let n = points.len();
    let space = Space::new(points, params.metric)?;
    let k = params.k();
    if n < params.min_cluster_size || k >= n {
        let warning = format!(
            "{n} points cannot form a cluster with min_cluster_size {} and min_samples {k}; all points are NOISE",
            params.min_cluster_size
        );
        log::warn!("{warning}");
        return Ok(HdbscanResult {
            labels: vec![None; n],
            tree: CondensedTree { n_points: n, ..Default::default() },
            core_distances: Vec::new(),
            mst: Vec::new(),
            warning: Some(warning),
        });
    }

    let core = core_distances_in(&space, k);
    let mst = prim(&space, &core);
    let nodes = single_linkage(n, &mst);
    let mut condenser = Condenser {
        n,
        nodes: &nodes,
        min_cluster_size: params.min_cluster_size,
        tree: CondensedTree { n_points: n, ..Default::default() },
    };
    condenser.run(n + nodes.len() - 1);
    let mut tree = condenser.tree;
    let labels = select_clusters(&mut tree);
    Ok(HdbscanResult { labels, tree, core_distances: core, mst, warning: None })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn core_distance_examples() {
        let pts = line(&[0.0, 1.0, 3.0, 7.0]);
        let core = core_distances(&pts, 2, Metric::Euclidean).unwrap();
        assert_eq!(core, vec![3.0, 2.0, 3.0, 6.0]);
        let nn = core_distances(&pts, 1, Metric::Euclidean).unwrap();
        assert_eq!(nn, vec![1.0, 1.0, 2.0, 4.0]);
        let dup = line(&[2.0, 2.0, 9.0]);
        assert_eq!(core_distances(&dup, 1, Metric::Euclidean).unwrap()[0], 0.0);
        assert!(matches!(core_distances(&pts, 4, Metric::Euclidean), Err(DiscoveryError::TooFewPoints { .. })));
    }

    #[test]
    fn mutual_reachability_examples() {
        let core = vec![3.0, 2.0, 3.0, 6.0];
        assert_eq!(mutual_reachability(0, 1, &core, 1.0), 3.0);
        assert_eq!(mutual_reachability(0, 3, &core, 7.0), 7.0);
        assert_eq!(mutual_reachability(2, 2, &core, 0.0), 3.0);
    }

    #[test]
    fn two_groups_on_a_line() {
        let pts = line(&[0.0, 1.0, 2.0, 100.0, 101.0, 102.0]);
        let params = HdbscanParams { min_cluster_size: 2, min_samples: Some(1), metric: Metric::Euclidean };
        let r = hdbscan(&pts, &params).unwrap();
        assert_eq!(r.labels, vec![Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)]);
        // MST: four unit edges and the bridge of 98
        let mut w: Vec<f64> = r.mst.iter().map(|e| e.weight).collect();
        w.sort_by(f64::total_cmp);
        assert_eq!(w, vec![1.0, 1.0, 1.0, 1.0, 98.0]);
        // both children born at 1/98, points leave at lambda 1
        let stab: Vec<f64> = r.tree.clusters.iter().skip(1).map(|c| c.stability).collect();
        let expected = 3.0 * (1.0 - 1.0 / 98.0);
        assert!(stab.iter().all(|s| (s - expected).abs() < 1e-12), "{stab:?}");
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![vec![1.5, -2.0]; 12];
        let r = hdbscan(&pts, &HdbscanParams { min_cluster_size: 5, ..Default::default() }).unwrap();
        assert!(r.labels.iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn too_few_points_are_noise() {
        let pts = line(&[0.0, 1.0, 2.0]);
        let r = hdbscan(&pts, &HdbscanParams { min_cluster_size: 5, ..Default::default() }).unwrap();
        assert!(r.labels.iter().all(Option::is_none));
        assert!(r.warning.is_some());
    }

    #[test]
    fn invalid_params() {
        let pts = line(&[0.0, 1.0, 2.0]);
        assert!(hdbscan(&pts, &HdbscanParams { min_cluster_size: 1, ..Default::default() }).is_err());
        let p = HdbscanParams { min_cluster_size: 2, min_samples: Some(0), metric: Metric::Euclidean };
        assert!(hdbscan(&pts, &p).is_err());
    }

    #[test]
    fn blobs_with_scattered_noise() {
        let b = crate::synth::blobs(2, 50, 0.3, 20.0, 10, 200.0, 2, 3);
        let r = hdbscan(&b.points, &HdbscanParams::default()).unwrap();
        assert_eq!(r.n_clusters(), 2);
        for (l, t) in r.labels.iter().zip(&b.truth) {
            match t {
                Some(_) => assert!(l.is_some()),
                None => assert!(l.is_none()),
            }
        }
        let first = r.labels[0];
        assert!(r.labels[..50].iter().all(|l| *l == first));
    }

    #[test]
    fn condensed_tree_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..300).map(|_| (0..3).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let r = hdbscan(&pts, &HdbscanParams { min_cluster_size: 8, ..Default::default() }).unwrap();
        let n = pts.len();
        let mut point_seen = vec![0; n];
        for e in &r.tree.edges {
            let birth = r.tree.clusters[e.parent - n].birth_lambda;
            assert!(e.lambda >= birth && e.lambda >= 0.0);
            if e.child < n {
                point_seen[e.child] += 1;
            } else {
                assert_eq!(r.tree.clusters[e.child - n].birth_lambda, e.lambda);
            }
        }
        assert!(point_seen.iter().all(|&c| c == 1));
        assert!(r.tree.clusters.iter().all(|c| c.stability >= 0.0));
        // a selected cluster never has a selected ancestor
        for c in r.tree.clusters.iter().filter(|c| c.selected) {
            let mut p = c.parent;
            while let Some(id) = p {
                assert!(!r.tree.clusters[id - n].selected);
                p = r.tree.clusters[id - n].parent;
            }
        }
    }

    #[test]
    fn cosine_metric_clusters_directions() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.001;
            pts.push(vec![1.0 + t, t, 0.0]);
            pts.push(vec![t, 0.0, 3.0 + t]);
        }
        let p = HdbscanParams { min_cluster_size: 5, min_samples: None, metric: Metric::Cosine };
        let r = hdbscan(&pts, &p).unwrap();
        assert_eq!(r.n_clusters(), 2);
        assert_ne!(r.labels[0], r.labels[1]);
        pts.push(vec![0.0, 0.0, 0.0]);
        assert!(hdbscan(&pts, &p).is_err());
    }

    #[test]
    fn mst_matches_kruskal_weight() {
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=64);
            let dim = rng.random_range(1..=5);
            let pts: Vec<Vec<f64>> =
                (0..n).map(|_| (0..dim).map(|_| rng.random_range(0..6) as f64).collect()).collect();
            let k = rng.random_range(1..n.min(8));
            let core = core_distances(&pts, k, Metric::Euclidean).unwrap();
            let prim_total: f64 = minimum_spanning_tree(&pts, &core, Metric::Euclidean).unwrap().iter().map(|e| e.weight).sum();

            let plain = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let mut all = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    all.push((core[i].max(core[j]).max(plain(&pts[i], &pts[j])), i, j));
                }
            }
            all.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut uf = UnionFind::new(n);
            let kruskal_total: f64 = all.iter().filter(|&&(_, i, j)| uf.union(i, j).is_some()).map(|e| e.0).sum();
            assert!((prim_total - kruskal_total).abs() <= 1e-9 * kruskal_total.max(1.0), "seed {seed}");
        }
    }
}

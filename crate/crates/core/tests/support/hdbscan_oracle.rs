//! Straight-line HDBSCAN reference built on level sets of the
//! mutual-reachability graph: no spanning tree, no dendrogram. A component
//! `S` persists up to the smallest distance `d*` that still connects it and
//! splits into the components formed by edges strictly shorter than `d*`.

struct Cluster {
    birth: f64,
    stability: f64,
    children: Vec<usize>,
    members: Vec<usize>,
    /// Points leaving this cluster directly, with their lambda.
    leaves: Vec<(usize, f64)>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn components(set: &[usize], m: &[Vec<f64>], below: f64) -> Vec<Vec<usize>> {
    let mut seen = vec![false; set.len()];
    let mut out = Vec::new();
    for s in 0..set.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![set[s]];
        let mut queue = vec![s];
        while let Some(a) = queue.pop() {
            for b in 0..set.len() {
                if !seen[b] && m[set[a]][set[b]] < below {
                    seen[b] = true;
                    comp.push(set[b]);
                    queue.push(b);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Smallest threshold `t` such that edges `<= t` connect `set`.
fn connecting_level(set: &[usize], m: &[Vec<f64>]) -> f64 {
    let mut weights: Vec<f64> = Vec::new();
    for (i, &a) in set.iter().enumerate() {
        for &b in &set[i + 1..] {
            weights.push(m[a][b]);
        }
    }
    weights.sort_by(f64::total_cmp);
    weights.dedup();
    for &t in &weights {
        if components(set, m, f64::from_bits(t.to_bits() + 1)).len() == 1 {
            return t;
        }
    }
    unreachable!("the complete graph is connected")
}

fn lambda(d: f64) -> f64 {
    if d > 0.0 {
        1.0 / d
    } else {
        f64::INFINITY
    }
}

fn grow(clusters: &mut Vec<Cluster>, id: usize, m: &[Vec<f64>], mcs: usize) {
    let mut set = clusters[id].members.clone();
    loop {
        let d = connecting_level(&set, m);
        let l = lambda(d);
        let birth = clusters[id].birth;
        let (big, small): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
            components(&set, m, d).into_iter().partition(|c| c.len() >= mcs);
        for p in small.into_iter().flatten() {
            clusters[id].leaves.push((p, l));
            clusters[id].stability += l - birth;
        }
        match big.len() {
            0 => return,
            1 => set = big.into_iter().next().unwrap(),
            _ => {
                for comp in big {
                    clusters[id].stability += (l - birth) * comp.len() as f64;
                    let child = clusters.len();
                    clusters.push(Cluster { birth: l, stability: 0.0, children: vec![], members: comp, leaves: vec![] });
                    clusters[id].children.push(child);
                    grow(clusters, child, m, mcs);
                }
                return;
            }
        }
    }
}

fn select(clusters: &[Cluster], id: usize, out: &mut Vec<usize>) -> f64 {
    let c = &clusters[id];
    if c.children.is_empty() {
        out.push(id);
        return c.stability;
    }
    let mut below = Vec::new();
    let sum: f64 = c.children.iter().map(|&ch| select(clusters, ch, &mut below)).sum();
    if id == 0 || sum > c.stability {
        out.extend(below);
        sum
    } else {
        out.push(id);
        c.stability
    }
}

pub fn oracle_hdbscan(points: &[Vec<f64>], min_cluster_size: usize, k: usize) -> Vec<Option<usize>> {
    let n = points.len();
    if n < min_cluster_size || k >= n {
        return vec![None; n];
    }
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| distance(&points[i], &points[j])).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| core[i].max(core[j]).max(distance(&points[i], &points[j]))).collect())
        .collect();

    let mut clusters =
        vec![Cluster { birth: 0.0, stability: 0.0, children: vec![], members: (0..n).collect(), leaves: vec![] }];
    grow(&mut clusters, 0, &m, min_cluster_size);
    let mut chosen = Vec::new();
    select(&clusters, 0, &mut chosen);

    let mut raw: Vec<Option<usize>> = vec![None; n];
    for &c in &chosen {
        if c == 0 {
            let last = clusters[0].leaves.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            for &(p, l) in &clusters[0].leaves {
                if l == last {
                    raw[p] = Some(0);
                }
            }
        } else {
            for &p in &clusters[c].members {
                raw[p] = Some(c);
            }
        }
    }
    let mut names = std::collections::BTreeMap::new();
    raw.iter()
        .map(|r| {
            r.map(|c| {
                let next = names.len();
                *names.entry(c).or_insert(next)
            })
        })
        .collect()
}

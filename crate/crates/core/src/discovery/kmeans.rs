use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_points, DiscoveryError};
use crate::geom::squared_euclidean;

pub const KMEANS_MAX_ITER: usize = 300;
/// Lloyd iterations stop once no centroid moves farther than this.
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each update step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn wcss(&self) -> f64 {
        self.wcss_history.last().copied().unwrap_or(0.0)
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_euclidean(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_euclidean(p, &points[first])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every remaining point coincides with a seed
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_euclidean(p, &points[pick]));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations. Deterministic for a
/// given seed. Clusters left empty by an assignment step are re-seeded with
/// the point farthest from its own centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult, DiscoveryError> {
    let dim = check_points(points)?;
    let n = points.len();
    if k == 0 {
        return Err(DiscoveryError::ZeroK);
    }
    if k > n {
        return Err(DiscoveryError::TooFewPoints { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut wcss_history = Vec::new();
    let mut iterations = 0;

    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sizes = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            labels[i] = c;
            dist[i] = d;
            sizes[c] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let mut far: Option<usize> = None;
            for i in 0..n {
                if sizes[labels[i]] > 1 && far.is_none_or(|f| dist[i] > dist[f]) {
                    far = Some(i);
                }
            }
            let i = far.expect("k <= n leaves a cluster with two or more points");
            sizes[labels[i]] -= 1;
            labels[i] = c;
            sizes[c] = 1;
            dist[i] = 0.0;
            centroids[c] = points[i].clone();
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        for (c, sum) in sums.iter_mut().enumerate() {
            sum.iter_mut().for_each(|s| *s /= sizes[c] as f64);
            shift = shift.max(squared_euclidean(sum, &centroids[c]).sqrt());
        }
        centroids = sums;
        let wcss: f64 = points.iter().zip(&labels).map(|(p, &l)| squared_euclidean(p, &centroids[l])).sum();
        wcss_history.push(wcss);
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeansResult { labels, centroids, wcss_history, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimum-WCSS partition into exactly k non-empty clusters, by
    /// enumerating every labeling.
    fn brute_force_partition(points: &[Vec<f64>], k: usize) -> (Vec<usize>, f64) {
        let n = points.len();
        let mut best = (vec![], f64::INFINITY);
        let total = k.pow(n as u32);
        for code in 0..total {
            let labels: Vec<usize> = (0..n).map(|i| (code / k.pow(i as u32)) % k).collect();
            if (0..k).any(|c| !labels.contains(&c)) {
                continue;
            }
            let mut cost = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                let dim = points[0].len();
                let mean: Vec<f64> =
                    (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
                cost += members.iter().map(|p| squared_euclidean(p, &mean)).sum::<f64>();
            }
            if cost < best.1 {
                best = (labels, cost);
            }
        }
        best
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn two_pairs_match_exhaustive_optimum() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 10.0], vec![10.1, 10.0]];
        let (oracle, cost) = brute_force_partition(&pts, 2);
        for seed in 0..10 {
            let r = kmeans(&pts, 2, seed).unwrap();
            assert!(same_partition(&r.labels, &oracle));
            assert!((r.wcss() - cost).abs() < 1e-12);
        }
        assert!(same_partition(&oracle, &[0, 0, 1, 1]));
    }

    #[test]
    fn k_equals_n_gives_zero_wcss() {
        let pts = vec![vec![0.0], vec![3.0], vec![7.0], vec![7.5]];
        let r = kmeans(&pts, 4, 1).unwrap();
        assert_eq!(r.wcss(), 0.0);
        let mut labels = r.labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_one_gives_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 8.0]];
        let r = kmeans(&pts, 1, 5).unwrap();
        assert_eq!(r.centroids, vec![vec![2.0, 4.0]]);
        assert!(r.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert_eq!(kmeans(&pts, 3, 0), Err(DiscoveryError::TooFewPoints { k: 3, n: 2 }));
        assert_eq!(kmeans(&pts, 0, 0), Err(DiscoveryError::ZeroK));
        assert_eq!(kmeans(&[vec![0.0], vec![1.0, 2.0]], 1, 0), Err(DiscoveryError::RaggedPoints));
    }

    #[test]
    fn duplicates_still_fill_every_cluster() {
        let pts = vec![vec![1.0]; 5];
        let r = kmeans(&pts, 3, 2).unwrap();
        for c in 0..3 {
            assert!(r.labels.contains(&c));
        }
    }

    #[test]
    fn wcss_never_increases_and_runs_are_deterministic() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..120).map(|_| (0..4).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let k = 1 + (seed as usize % 9);
            let r = kmeans(&pts, k, seed).unwrap();
            for w in r.wcss_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed}: {} -> {}", w[0], w[1]);
            }
            assert_eq!(r, kmeans(&pts, k, seed).unwrap());
            assert!(r.iterations <= KMEANS_MAX_ITER);
        }
    }
}

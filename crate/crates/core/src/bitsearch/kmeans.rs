//! One-dimensional k-means++ with Lloyd refinement and seeded restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Lloyd iterations per restart.
pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// Cluster centers in ascending order.
    pub centers: Vec<f64>,
    /// Index into `centers` for every sample.
    pub assignment: Vec<usize>,
    /// Sum of squared sample-to-center distances.
    pub sse: f64,
    /// Restarts actually run (0 when the data had at most `k` distinct values).
    pub restarts_used: usize,
    /// Set when `k` exceeded the number of distinct samples.
    pub degenerate: bool,
}

/// Index of the nearest center among ascending `centers`; ties go to the lower index.
fn nearest(centers: &[f64], x: f64) -> usize {
    let hi = centers.partition_point(|&c| c < x);
    if hi == 0 {
        return 0;
    }
    if hi == centers.len() {
        return centers.len() - 1;
    }
    if x - centers[hi - 1] <= centers[hi] - x {
        hi - 1
    } else {
        hi
    }
}

fn assign(centers: &[f64], samples: &[f64], out: &mut [usize]) -> bool {
    let mut changed = false;
    for (slot, &x) in out.iter_mut().zip(samples) {
        let c = nearest(centers, x);
        if *slot != c {
            *slot = c;
            changed = true;
        }
    }
    changed
}

fn sse(centers: &[f64], samples: &[f64], assignment: &[usize]) -> f64 {
    samples
        .iter()
        .zip(assignment)
        .map(|(&x, &a)| (x - centers[a]).powi(2))
        .sum()
}

/// D²-weighted seeding: first center uniform, then proportional to the squared
/// distance to the nearest chosen center.
fn seed_centers(samples: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k);
    let first = samples[rng.random_range(0..samples.len())];
    centers.push(first);
    let mut d2: Vec<f64> = samples.iter().map(|&x| (x - first).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if acc > target && d > 0.0 {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `target` just past the accumulated total.
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"));
        let c = samples[pick];
        centers.push(c);
        for (d, &x) in d2.iter_mut().zip(samples) {
            *d = d.min((x - c).powi(2));
        }
    }
    centers
}

fn lloyd(samples: &[f64], mut centers: Vec<f64>) -> (Vec<f64>, Vec<usize>) {
    centers.sort_by(f64::total_cmp);
    let mut assignment = vec![usize::MAX; samples.len()];
    assign(&centers, samples, &mut assignment);
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![0.0; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (&x, &a) in samples.iter().zip(&assignment) {
            sums[a] += x;
            counts[a] += 1;
        }
        for ((c, s), n) in centers.iter_mut().zip(&sums).zip(&counts) {
            if *n > 0 {
                *c = s / *n as f64;
            }
        }
        // Means of an ordered partition stay ordered, but empty clusters may not.
        centers.sort_by(f64::total_cmp);
        if !assign(&centers, samples, &mut assignment) {
            break;
        }
    }
    (centers, assignment)
}

/// Clusters `samples` into `k` groups; the best of `restarts` seeded runs by SSE wins.
pub fn kmeanspp_cluster(samples: &[f64], k: usize, restarts: usize, seed: u64) -> Result<ClusterResult> {
    if samples.is_empty() {
        return invalid("cannot cluster an empty sample set");
    }
    if k == 0 || restarts == 0 {
        return invalid("k and restarts must be at least 1");
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return invalid("samples must be finite");
    }
    let mut distinct = samples.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if k >= distinct.len() {
        let assignment = samples.iter().map(|&x| nearest(&distinct, x)).collect();
        return Ok(ClusterResult {
            degenerate: k > distinct.len(),
            centers: distinct,
            assignment,
            sse: 0.0,
            restarts_used: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterResult> = None;
    for _ in 0..restarts {
        let init = seed_centers(samples, k, &mut rng);
        let (centers, assignment) = lloyd(samples, init);
        let err = sse(&centers, samples, &assignment);
        if best.as_ref().is_none_or(|b| err < b.sse) {
            best = Some(ClusterResult {
                centers,
                assignment,
                sse: err,
                restarts_used: restarts,
                degenerate: false,
            });
        }
    }
    Ok(best.expect("restarts >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_samples_have_zero_sse() {
        let r = kmeanspp_cluster(&[5.0; 10], 2, 4, 1).unwrap();
        assert_eq!(r.sse, 0.0);
        assert!(r.degenerate);
        assert_eq!(r.centers, vec![5.0]);
    }

    #[test]
    fn two_valued_data() {
        let r = kmeanspp_cluster(&[0.0, 0.0, 4.0, 4.0], 2, 4, 1).unwrap();
        assert_eq!(r.centers, vec![0.0, 4.0]);
        assert_eq!(r.sse, 0.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn four_points_two_clusters() {
        let r = kmeanspp_cluster(&[1.0, 2.0, 3.0, 4.0], 2, 8, 7).unwrap();
        assert_eq!(r.centers, vec![1.5, 3.5]);
        assert_eq!(r.sse, 1.0);
        assert_eq!(r.assignment, vec![0, 0, 1, 1]);
    }

    #[test]
    fn assignment_is_nearest_and_sse_consistent() {
        let samples: Vec<f64> = (0..200).map(|i| ((i * 7919) % 1000) as f64 / 97.0).collect();
        let r = kmeanspp_cluster(&samples, 6, 3, 11).unwrap();
        for (&x, &a) in samples.iter().zip(&r.assignment) {
            let d = (x - r.centers[a]).abs();
            assert!(r.centers.iter().all(|&c| d <= (x - c).abs() + 1e-9));
        }
        let recomputed: f64 = samples
            .iter()
            .zip(&r.assignment)
            .map(|(&x, &a)| (x - r.centers[a]).powi(2))
            .sum();
        assert!((recomputed - r.sse).abs() <= 1e-6 * r.sse.max(1e-12));
    }

    #[test]
    fn deterministic_given_seed() {
        let samples: Vec<f64> = (0..300).map(|i| ((i * 31) % 97) as f64).collect();
        let a = kmeanspp_cluster(&samples, 8, 4, 99).unwrap();
        let b = kmeanspp_cluster(&samples, 8, 4, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(kmeanspp_cluster(&[], 2, 1, 0).is_err());
        assert!(kmeanspp_cluster(&[1.0], 0, 1, 0).is_err());
        assert!(kmeanspp_cluster(&[1.0], 1, 0, 0).is_err());
    }
}

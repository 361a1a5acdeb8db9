//! Spherical k-means over failure-video embeddings and cross-epoch label
//! alignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::derive_seed;
use crate::embedding::{dot, l2_normalize, Embedding};
use crate::error::{Error, Result};

/// Independent k-means++ restarts per call; the lowest objective wins.
pub const RESTARTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub task_id: usize,
    pub centers: Vec<Embedding>,
    pub assignments: Vec<usize>,
    /// `(1/M) Σ -v_i · c_{q_i}`, in `[-1, 1]`.
    pub objective: f64,
    pub sample_count: usize,
    /// Objective after every iteration of the winning restart.
    pub history: Vec<f64>,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &q in &self.assignments {
            sizes[q] += 1;
        }
        sizes
    }

    /// Relabels so that new cluster `perm[k]` becomes cluster `k`.
    pub fn relabel(&mut self, perm: &[usize]) {
        let mut inverse = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        self.centers = perm.iter().map(|&p| self.centers[p].clone()).collect();
        for q in &mut self.assignments {
            *q = inverse[*q];
        }
    }
}

/// Index of the most similar center; ties go to the lowest index.
fn nearest(x: &[f64], centers: &[Embedding]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let s = dot(x, c);
        if s > best_sim {
            best = k;
            best_sim = s;
        }
    }
    best
}

pub fn objective(features: &[Embedding], centers: &[Embedding], assignments: &[usize]) -> f64 {
    let total: f64 = features
        .iter()
        .zip(assignments)
        .map(|(x, &q)| -x.dot(&centers[q]))
        .sum();
    total / features.len() as f64
}

fn seed_centers(features: &[Embedding], k: usize, rng: &mut ChaCha8Rng) -> Vec<Embedding> {
    let m = features.len();
    let mut chosen = vec![rng.random_range(0..m)];
    while chosen.len() < k {
        let dist: Vec<f64> = features
            .iter()
            .map(|x| {
                let best = chosen
                    .iter()
                    .map(|&c| x.dot(&features[c]))
                    .fold(f64::NEG_INFINITY, f64::max);
                (1.0 - best).max(0.0)
            })
            .collect();
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            (0..m).find(|i| !chosen.contains(i)).expect("m >= k")
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = m - 1;
            for (i, d) in dist.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        };
        chosen.push(next);
    }
    chosen.iter().map(|&i| features[i].clone()).collect()
}

/// Moves the worst-fitting member of a multi-member cluster into every empty
/// cluster.
fn repair_empty(features: &[Embedding], centers: &mut [Embedding], assignments: &mut [usize]) {
    let k = centers.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &q in assignments.iter() {
            sizes[q] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let worst = (0..features.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .min_by(|&a, &b| {
                let sa = features[a].dot(&centers[assignments[a]]);
                let sb = features[b].dot(&centers[assignments[b]]);
                sa.total_cmp(&sb)
            })
            .expect("M >= K guarantees a multi-member cluster");
        assignments[worst] = empty;
        centers[empty] = features[worst].clone();
    }
}

fn update_centers(features: &[Embedding], centers: &mut [Embedding], assignments: &[usize]) {
    let dim = features[0].dim();
    let mut sums = vec![vec![0.0; dim]; centers.len()];
    for (x, &q) in features.iter().zip(assignments) {
        for (s, v) in sums[q].iter_mut().zip(x.iter()) {
            *s += v;
        }
    }
    for (c, s) in centers.iter_mut().zip(&sums) {
        // Members that cancel exactly keep the previous direction.
        if let Ok(e) = l2_normalize(s) {
            *c = e;
        }
    }
}

fn lloyd(
    features: &[Embedding],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Embedding>, Vec<usize>, Vec<f64>) {
    let mut centers = seed_centers(features, k, rng);
    let mut assignments: Vec<usize> = features.iter().map(|x| nearest(x, &centers)).collect();
    repair_empty(features, &mut centers, &mut assignments);
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        update_centers(features, &mut centers, &assignments);
        history.push(objective(features, &centers, &assignments));
        let mut next: Vec<usize> = features.iter().map(|x| nearest(x, &centers)).collect();
        repair_empty(features, &mut centers, &mut next);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    if !converged {
        // Keep centers consistent with the last assignment.
        update_centers(features, &mut centers, &assignments);
        history.push(objective(features, &centers, &assignments));
    }
    (centers, assignments, history)
}

pub fn spherical_kmeans(
    features: &[Embedding],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterState> {
    let m = features.len();
    if k == 0 || m < k {
        return Err(Error::TooFewSamples { m, k });
    }
    let mut best: Option<(Vec<Embedding>, Vec<usize>, Vec<f64>)> = None;
    for r in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xc1u64, r as u64));
        let run = lloyd(features, k, max_iters, &mut rng);
        let obj = *run.2.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| obj < *b.2.last().unwrap()) {
            best = Some(run);
        }
    }
    let (centers, assignments, history) = best.expect("RESTARTS >= 1");
    Ok(ClusterState {
        task_id: 0,
        objective: *history.last().unwrap(),
        centers,
        assignments,
        sample_count: m,
        history,
    })
}

pub fn assign_pseudo_labels(state: &ClusterState, features: &[Embedding]) -> Vec<usize> {
    features.iter().map(|x| nearest(x, &state.centers)).collect()
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns `col[row]`.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = none).
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Permutation `π` maximizing `Σ_k prev[k] · new[π(k)]`.
pub fn align_clusters(prev: &[Embedding], new: &[Embedding]) -> Result<Vec<usize>> {
    if prev.len() != new.len() {
        return Err(Error::SizeMismatch(format!(
            "{} previous centers vs {} new centers",
            prev.len(),
            new.len()
        )));
    }
    let cost: Vec<Vec<f64>> = prev
        .iter()
        .map(|p| new.iter().map(|c| -p.dot(c)).collect())
        .collect();
    Ok(hungarian(&cost))
}

/// Fraction of samples whose label differs between two labelings.
pub fn label_churn(prev: &[usize], next: &[usize]) -> f64 {
    if prev.is_empty() {
        return 0.0;
    }
    let changed = prev.iter().zip(next).filter(|(a, b)| a != b).count();
    changed as f64 / prev.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit2(deg: f64) -> Embedding {
        let r = deg.to_radians();
        Embedding::from_unit(vec![r.cos(), r.sin()])
    }

    fn random_units(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Embedding> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                l2_normalize(&v).unwrap()
            })
            .collect()
    }

    /// Global optimum by enumerating every labeling; a labeling's best
    /// objective uses the normalized member means as centers.
    fn brute_force(features: &[Embedding], k: usize) -> f64 {
        let m = features.len();
        let dim = features[0].dim();
        let mut best = f64::INFINITY;
        for code in 0..k.pow(m as u32) {
            let mut c = code;
            let labels: Vec<usize> = (0..m)
                .map(|_| {
                    let l = c % k;
                    c /= k;
                    l
                })
                .collect();
            let mut total = 0.0;
            for j in 0..k {
                let mut s = vec![0.0; dim];
                for (x, _) in features.iter().zip(&labels).filter(|(_, &l)| l == j) {
                    for (a, b) in s.iter_mut().zip(x.iter()) {
                        *a += b;
                    }
                }
                total -= s.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
            best = best.min(total / m as f64);
        }
        best
    }

    #[test]
    fn self_centers_when_m_equals_k() {
        let f = vec![unit2(0.0), unit2(100.0), unit2(220.0)];
        let s = spherical_kmeans(&f, 3, 20, 1).unwrap();
        assert!((s.objective + 1.0).abs() < 1e-12);
        let mut a = s.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn duplicated_groups() {
        let f = vec![unit2(30.0), unit2(30.0), unit2(200.0), unit2(200.0), unit2(30.0)];
        let s = spherical_kmeans(&f, 2, 20, 4).unwrap();
        assert!((s.objective + 1.0).abs() < 1e-12);
        assert_eq!(s.assignments[0], s.assignments[1]);
        assert_eq!(s.assignments[2], s.assignments[3]);
        assert_ne!(s.assignments[0], s.assignments[2]);
    }

    #[test]
    fn four_points_two_clusters() {
        let f = vec![unit2(0.0), unit2(10.0), unit2(180.0), unit2(190.0)];
        let s = spherical_kmeans(&f, 2, 50, 0).unwrap();
        let expected = -(5f64.to_radians().cos());
        assert!((s.objective - expected).abs() < 1e-9);
        assert!((brute_force(&f, 2) - expected).abs() < 1e-12);
        assert_eq!(s.assignments[0], s.assignments[1]);
        assert_eq!(s.assignments[2], s.assignments[3]);
        assert_ne!(s.assignments[0], s.assignments[2]);
    }

    #[test]
    fn too_few_samples() {
        let f = vec![unit2(0.0)];
        assert!(matches!(
            spherical_kmeans(&f, 2, 10, 0),
            Err(Error::TooFewSamples { m: 1, k: 2 })
        ));
    }

    #[test]
    fn matches_brute_force_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut hits = 0;
        for inst in 0..50u64 {
            let m = rng.random_range(3..=8);
            let k = rng.random_range(1..=3usize).min(m);
            let dim = rng.random_range(2..=4);
            let f = random_units(&mut rng, m, dim);
            let s = spherical_kmeans(&f, k, 100, inst).unwrap();
            for w in s.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "instance {inst}: {:?}", s.history);
            }
            for c in &s.centers {
                assert!((c.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            }
            assert_eq!(assign_pseudo_labels(&s, &f), s.assignments);
            if (s.objective - brute_force(&f, k)).abs() < 1e-9 {
                hits += 1;
            }
        }
        assert!(hits >= 45, "{hits} of 50 reached the global optimum");
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_units(&mut rng, 30, 6);
        assert_eq!(spherical_kmeans(&f, 3, 50, 9).unwrap(), spherical_kmeans(&f, 3, 50, 9).unwrap());
    }

    #[test]
    fn pseudo_labels_and_ties() {
        let state = ClusterState {
            task_id: 0,
            centers: vec![unit2(0.0), unit2(90.0), unit2(-90.0)],
            assignments: vec![],
            objective: 0.0,
            sample_count: 0,
            history: vec![],
        };
        assert_eq!(assign_pseudo_labels(&state, &[unit2(90.0)]), vec![1]);
        // Centers 0 and 2 sit at +-10 degrees: exactly equal cosine to 0 degrees.
        let mid = ClusterState {
            centers: vec![unit2(10.0), unit2(180.0), unit2(-10.0)],
            ..state
        };
        assert_eq!(assign_pseudo_labels(&mid, &[unit2(0.0)]), vec![0]);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let centers = random_units(&mut rng, 4, 5);
        let feats = random_units(&mut rng, 40, 5);
        let s = ClusterState {
            centers: centers.clone(),
            ..mid
        };
        let brute: Vec<usize> = feats
            .iter()
            .map(|x| {
                let sims: Vec<f64> = centers.iter().map(|c| x.dot(c)).collect();
                let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                sims.iter().position(|&v| v == max).unwrap()
            })
            .collect();
        assert_eq!(assign_pseudo_labels(&s, &feats), brute);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn alignment_basics() {
        let prev = vec![unit2(0.0), unit2(120.0), unit2(240.0)];
        assert_eq!(align_clusters(&prev, &prev).unwrap(), vec![0, 1, 2]);
        let swapped = vec![prev[1].clone(), prev[0].clone(), prev[2].clone()];
        assert_eq!(align_clusters(&prev, &swapped).unwrap(), vec![1, 0, 2]);
        assert!(matches!(align_clusters(&prev, &prev[..2]), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn alignment_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let prev = random_units(&mut rng, 3, 4);
            let new = random_units(&mut rng, 3, 4);
            let score = |p: &[usize]| -> f64 { (0..3).map(|k| prev[k].dot(&new[p[k]])).sum() };
            let best = permutations(3)
                .into_iter()
                .max_by(|a, b| score(a).total_cmp(&score(b)))
                .unwrap();
            let got = align_clusters(&prev, &new).unwrap();
            assert!((score(&got) - score(&best)).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_recovers_planted_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..100 {
            let k = 1 + trial % 4;
            let centers = loop {
                let c = random_units(&mut rng, k, 6);
                let ok = (0..k).all(|i| (0..k).all(|j| i == j || c[i].dot(&c[j]) < 0.99));
                if ok {
                    break c;
                }
            };
            for perm in permutations(k) {
                let new: Vec<Embedding> = perm.iter().map(|&p| centers[p].clone()).collect();
                // new[j] = centers[perm[j]]: old k sits at new index perm^{-1}(k).
                let got = align_clusters(&centers, &new).unwrap();
                for (old, &j) in got.iter().enumerate() {
                    assert_eq!(perm[j], old);
                }
            }
        }
    }

    #[test]
    fn relabel_and_churn() {
        let f = vec![unit2(0.0), unit2(5.0), unit2(180.0), unit2(185.0)];
        let s = spherical_kmeans(&f, 2, 20, 0).unwrap();
        let mut swapped = s.clone();
        swapped.relabel(&[1, 0]);
        assert_eq!(swapped.centers[0], s.centers[1]);
        assert_eq!(label_churn(&s.assignments, &swapped.assignments), 1.0);
        let perm = align_clusters(&s.centers, &swapped.centers).unwrap();
        swapped.relabel(&perm);
        assert_eq!(swapped, s);
        assert_eq!(label_churn(&s.assignments, &swapped.assignments), 0.0);
        assert_eq!(label_churn(&[], &[]), 0.0);
    }
}
